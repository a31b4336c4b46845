use serde::{Deserialize, Serialize};

use crate::card::{block_lines, key_value};
use crate::error::{Error, Result};
use omake_core::ontology::normalize_name;

pub const NO_DEFINITIVE: &str = "No definitive diagnosis";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Verified,
    NoDefinitiveDiagnosis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimCheck {
    pub claim: String,
    pub supported: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    /// Empty when no diagnosis was reached.
    pub refined_caption: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnosis: Option<String>,
    #[serde(default)]
    pub claims_checked: Vec<ClaimCheck>,
}

impl Verdict {
    pub fn no_definitive(claims_checked: Vec<ClaimCheck>) -> Self {
        Self { status: VerdictStatus::NoDefinitiveDiagnosis, refined_caption: String::new(), diagnosis: None, claims_checked }
    }
}

fn parse_claim(line: &str) -> Option<ClaimCheck> {
    let l = line.trim();
    let rest = l.get(..6).filter(|p| p.eq_ignore_ascii_case("claim:")).map(|_| &l[6..])?;
    let (claim, mark) = rest.rsplit_once('|')?;
    let supported = match mark.trim().to_ascii_lowercase().as_str() {
        "supported" | "yes" | "true" => true,
        "unsupported" | "no" | "false" => false,
        _ => return None,
    };
    Some(ClaimCheck { claim: claim.trim().to_owned(), supported })
}

/// Parses a verification reply against the five candidates.
///
/// Any mention of "No definitive diagnosis" wins. Otherwise `DIAGNOSIS:` must
/// name a candidate and `CAPTION:` must be nonempty.
pub fn parse_verdict(text: &str, candidates: &[String]) -> Result<Verdict> {
    let lines = block_lines(text);
    let claims: Vec<ClaimCheck> = lines.iter().filter_map(|l| parse_claim(l)).collect();
    if text.to_ascii_lowercase().contains(&NO_DEFINITIVE.to_ascii_lowercase()) {
        return Ok(Verdict::no_definitive(claims));
    }
    let diagnosis = key_value(&lines, "DIAGNOSIS").filter(|d| !d.is_empty()).ok_or_else(|| Error::Verdict("missing DIAGNOSIS".into()))?;
    let caption = key_value(&lines, "CAPTION").filter(|c| !c.is_empty()).ok_or_else(|| Error::Verdict("missing CAPTION".into()))?;
    let wanted = normalize_name(diagnosis);
    let matched = candidates
        .iter()
        .find(|c| normalize_name(c) == wanted)
        .ok_or_else(|| Error::Contract(format!("diagnosis `{diagnosis}` is not one of the candidates {candidates:?}")))?;
    Ok(Verdict {
        status: VerdictStatus::Verified,
        refined_caption: caption.to_owned(),
        diagnosis: Some(matched.clone()),
        claims_checked: claims,
    })
}
