use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use omake_core::ontology::normalize_name;

use crate::card::DiseaseCard;
use crate::error::{Error, Result};

/// Disease cards stored one JSON file per normalised name.
pub struct KnowledgeBase {
    dir: PathBuf,
    lock: RwLock<()>,
}

fn file_stem(name: &str) -> String {
    normalize_name(name)
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

impl KnowledgeBase {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, lock: RwLock::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{}.json", file_stem(name)))
    }

    pub fn store(&self, card: &DiseaseCard) -> Result<()> {
        card.validate()?;
        let _guard = self.lock.write().unwrap();
        let path = self.path_for(&card.name);
        let text = serde_json::to_string_pretty(card)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn retrieve(&self, name: &str) -> Result<DiseaseCard> {
        let _guard = self.lock.read().unwrap();
        let path = self.path_for(name);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::MissingCard { name: name.to_owned(), suggestions: self.nearest(name, 3)? })
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Card names, sorted.
    pub fn names(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let card: DiseaseCard = serde_json::from_str(&text)?;
                names.push(normalize_name(&card.name));
            }
        }
        names.sort();
        Ok(names)
    }

    fn nearest(&self, name: &str, n: usize) -> Result<Vec<String>> {
        let target = normalize_name(name);
        let mut scored: Vec<(f64, String)> =
            self.names()?.into_iter().map(|c| (strsim::normalized_levenshtein(&target, &c), c)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(n).map(|(_, c)| c).collect())
    }
}
