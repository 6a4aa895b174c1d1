//! Free-text class descriptions used as training-time text augmentation,
//! fetched through a provider interface and kept in an append-only cache file.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use super::vocab::PLACEHOLDER;
use crate::error::{Error, Result};

/// Instruction sent to the provider; `[]` is replaced by the class name.
pub const DESCRIPTION_INSTRUCTION: &str = "Please describe this action in the video []";

/// Something that turns an instruction into a free-text description.
pub trait DescriptionProvider {
    fn id(&self) -> &str;
    fn describe(&mut self, instruction: &str) -> std::result::Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub name: String,
    pub provider: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptionCache {
    records: BTreeMap<String, DescriptionRecord>,
}

impl DescriptionCache {
    pub fn get(&self, name: &str) -> Option<&DescriptionRecord> {
        self.records.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &DescriptionRecord> {
        self.records.values()
    }

    /// Adds a record for a class not yet cached; existing entries are never replaced.
    pub fn insert(&mut self, record: DescriptionRecord) -> bool {
        if self.records.contains_key(&record.name) {
            return false;
        }
        self.records.insert(record.name.clone(), record);
        true
    }

    /// Description lists keyed by class name, as stored in a vocabulary.
    pub fn as_map(&self) -> BTreeMap<String, Vec<String>> {
        self.records
            .iter()
            .map(|(k, r)| (k.clone(), r.descriptions.clone()))
            .collect()
    }

    /// One JSON record per line. A missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cache = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            cache.insert(serde_json::from_str(line)?);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        crate::encoders::checkpoint::write_atomic(path, out.as_bytes())
    }
}

/// Ensures every class in `names` is cached. Offline, a miss is a hard error
/// naming the missing classes. Online, only missing classes are requested; a
/// provider failure leaves the input cache untouched.
pub fn fetch_descriptions(
    provider: Option<&mut dyn DescriptionProvider>,
    names: &[String],
    cache: &DescriptionCache,
    offline: bool,
) -> Result<DescriptionCache> {
    let missing: Vec<String> = names.iter().filter(|n| !cache.contains(n)).cloned().collect();
    if missing.is_empty() {
        return Ok(cache.clone());
    }
    if offline {
        return Err(Error::MissingDescriptions(missing));
    }
    let provider = provider.ok_or_else(|| Error::Config("online mode needs a description provider".into()))?;
    let mut out = cache.clone();
    for name in missing {
        let instruction = DESCRIPTION_INSTRUCTION.replacen(PLACEHOLDER, &name, 1);
        let text = provider.describe(&instruction).map_err(Error::Provider)?;
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        out.insert(DescriptionRecord {
            name,
            provider: provider.id().to_string(),
            timestamp,
            descriptions: vec![text],
        });
    }
    Ok(out)
}

/// Deterministic offline provider that fills a fixed sentence template with the
/// class name found at the end of the instruction.
#[derive(Debug, Clone)]
pub struct TemplateProvider {
    pub template: String,
    pub requests: usize,
}

impl TemplateProvider {
    pub fn new(template: &str) -> Self {
        Self {
            template: template.to_string(),
            requests: 0,
        }
    }
}

impl Default for TemplateProvider {
    fn default() -> Self {
        Self::new("The video shows a [] pattern moving across the frame")
    }
}

impl DescriptionProvider for TemplateProvider {
    fn id(&self) -> &str {
        "template"
    }

    fn describe(&mut self, instruction: &str) -> std::result::Result<String, String> {
        self.requests += 1;
        let prefix = DESCRIPTION_INSTRUCTION.trim_end_matches(PLACEHOLDER);
        let name = instruction
            .strip_prefix(prefix)
            .ok_or_else(|| format!("unexpected instruction '{instruction}'"))?;
        Ok(self.template.replacen(PLACEHOLDER, name, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Failing;
    impl DescriptionProvider for Failing {
        fn id(&self) -> &str {
            "failing"
        }
        fn describe(&mut self, _: &str) -> std::result::Result<String, String> {
            Err("timeout".into())
        }
    }

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn offline_paths() {
        let mut p = TemplateProvider::default();
        let filled = fetch_descriptions(Some(&mut p), &names(&["a", "b"]), &DescriptionCache::default(), false).unwrap();
        let same = fetch_descriptions(None, &names(&["a", "b"]), &filled, true).unwrap();
        assert_eq!(same, filled);
        match fetch_descriptions(None, &names(&["a", "c"]), &filled, true) {
            Err(Error::MissingDescriptions(m)) => assert_eq!(m, vec!["c".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cached_entries_are_not_refetched() {
        let mut p = TemplateProvider::default();
        let c1 = fetch_descriptions(Some(&mut p), &names(&["brushing teeth"]), &DescriptionCache::default(), false).unwrap();
        assert_eq!(p.requests, 1);
        assert_eq!(
            c1.get("brushing teeth").unwrap().descriptions,
            vec!["The video shows a brushing teeth pattern moving across the frame".to_string()]
        );
        let c2 = fetch_descriptions(Some(&mut p), &names(&["brushing teeth"]), &c1, false).unwrap();
        assert_eq!(p.requests, 1);
        assert_eq!(c1, c2);
    }

    #[test]
    fn provider_failure_is_retriable() {
        let cache = DescriptionCache::default();
        let r = fetch_descriptions(Some(&mut Failing), &names(&["x"]), &cache, false);
        assert!(matches!(r, Err(Error::Provider(_))));
        assert!(cache.is_empty());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut p = TemplateProvider::default();
        let c = fetch_descriptions(Some(&mut p), &names(&["a", "b"]), &DescriptionCache::default(), false).unwrap();
        c.save(&path).unwrap();
        assert_eq!(DescriptionCache::load(&path).unwrap(), c);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);
    }
}
