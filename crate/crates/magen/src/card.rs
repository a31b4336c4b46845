use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CARD_TOKEN_RANGE: std::ops::RangeInclusive<usize> = 60..=120;

/// NAME / POS / SITES / MINSET knowledge record for one disease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseCard {
    pub name: String,
    pub pos: Vec<String>,
    pub sites: Vec<String>,
    pub minset: Vec<String>,
    pub token_count: usize,
}

impl DiseaseCard {
    pub fn new(name: String, pos: Vec<String>, sites: Vec<String>, minset: Vec<String>) -> Result<Self> {
        let mut card = Self { name, pos, sites, minset, token_count: 0 };
        card.validate()?;
        card.token_count = count_tokens(&card.render());
        Ok(card)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, empty) in [
            ("NAME", self.name.trim().is_empty()),
            ("POS", self.pos.is_empty()),
            ("SITES", self.sites.is_empty()),
            ("MINSET", self.minset.is_empty()),
        ] {
            if empty {
                return Err(Error::Card(format!("field {key} is empty")));
            }
        }
        Ok(())
    }

    pub fn in_token_budget(&self) -> bool {
        CARD_TOKEN_RANGE.contains(&self.token_count)
    }

    /// The key: value block the card was parsed from.
    pub fn render(&self) -> String {
        format!(
            "NAME: {}\nPOS: {}\nSITES: {}\nMINSET: {}",
            self.name,
            self.pos.join("; "),
            self.sites.join("; "),
            self.minset.join("; ")
        )
    }
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lines inside the first ``` fence, or all lines when there is none.
pub(crate) fn block_lines(text: &str) -> Vec<&str> {
    let mut inside = None;
    let mut lines = Vec::new();
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match inside {
                None => inside = Some(()),
                Some(()) => return lines,
            }
            continue;
        }
        if inside.is_some() {
            lines.push(line);
        }
    }
    if inside.is_some() {
        lines
    } else {
        text.lines().collect()
    }
}

/// Value of `KEY:` (case-insensitive key) among `lines`.
pub(crate) fn key_value<'a>(lines: &[&'a str], key: &str) -> Option<&'a str> {
    lines.iter().find_map(|l| {
        let l = l.trim().trim_start_matches(['-', '*']).trim();
        let (k, v) = l.split_once(':')?;
        k.trim().eq_ignore_ascii_case(key).then(|| v.trim())
    })
}

fn phrases(v: &str) -> Vec<String> {
    v.split(';').map(str::trim).filter(|p| !p.is_empty()).map(str::to_owned).collect()
}

/// Parses a summary-agent reply. Phrases within a field are `;`-separated.
pub fn parse_card(text: &str) -> Result<DiseaseCard> {
    let lines = block_lines(text);
    let get = |key: &str| key_value(&lines, key).ok_or_else(|| Error::Card(format!("missing {key}")));
    let card = DiseaseCard::new(get("NAME")?.to_owned(), phrases(get("POS")?), phrases(get("SITES")?), phrases(get("MINSET")?))?;
    if !card.in_token_budget() {
        log::warn!("card `{}` has {} tokens, outside {:?}", card.name, card.token_count, CARD_TOKEN_RANGE);
    }
    Ok(card)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GUTTATE: &str = "Here is the card.\n```\nNAME: Guttate psoriasis\nPOS: small, red, scaly, drop-like spots; sudden onset\nSITES: trunk; arms; legs\nMINSET: drop-like scaly papules; recent streptococcal infection\n```\n";

    #[test]
    fn parses_fenced_card() {
        let card = parse_card(GUTTATE).unwrap();
        assert_eq!(card.name, "Guttate psoriasis");
        assert_eq!(card.pos[0], "small, red, scaly, drop-like spots");
        assert_eq!(card.sites, vec!["trunk", "arms", "legs"]);
        assert_eq!(card.minset.len(), 2);
        assert_eq!(card.token_count, count_tokens(&card.render()));
        assert!(!card.in_token_budget());
    }

    #[test]
    fn missing_minset_is_an_error() {
        let text = "NAME: x\nPOS: a\nSITES: b\n";
        assert!(matches!(parse_card(text), Err(Error::Card(m)) if m.contains("MINSET")));
        assert!(parse_card("NAME: x\nPOS: a\nSITES: b\nMINSET: ;\n").is_err());
    }

    #[test]
    fn unfenced_and_case_insensitive_keys() {
        let card = parse_card("name: x\npos: a\n- sites: b\nMinSet: c").unwrap();
        assert_eq!((card.pos[0].as_str(), card.sites[0].as_str(), card.minset[0].as_str()), ("a", "b", "c"));
    }
}
