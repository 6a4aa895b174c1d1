//! Class vocabularies, prompt rendering and cross-dataset filtering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::digest;
use crate::error::{Error, Result, Warned, Warning};

pub const DEFAULT_TEMPLATE: &str = "A video of []";
pub const PLACEHOLDER: &str = "[]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Templated name plus one seeded description when any exist.
    Train,
    /// Templated name only.
    Eval,
    /// Templated name plus every description.
    EvalWithDescriptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub descriptions: BTreeMap<String, Vec<String>>,
}

fn default_template() -> String {
    DEFAULT_TEMPLATE.to_string()
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        Self::with_template(names, DEFAULT_TEMPLATE)
    }

    pub fn with_template(names: Vec<String>, template: &str) -> Result<Self> {
        let v = Self {
            names,
            template: template.to_string(),
            descriptions: BTreeMap::new(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<&String> = self.names.iter().collect();
        if unique.len() != self.names.len() {
            return Err(Error::Invalid("class names must be unique".into()));
        }
        if self.template.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::Invalid(format!(
                "template '{}' must contain exactly one {PLACEHOLDER}",
                self.template
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn templated(&self, name: &str) -> String {
        self.template.replacen(PLACEHOLDER, name, 1)
    }

    /// Prompts for one class. Train mode picks one description with a seeded RNG,
    /// so a fixed seed sequence reproduces the same selections.
    pub fn render_prompts(&self, name: &str, mode: PromptMode, seed: u64) -> Result<Vec<String>> {
        if !self.contains(name) {
            return Err(Error::Invalid(format!("class '{name}' is not in the vocabulary")));
        }
        let mut out = vec![self.templated(name)];
        let descs = self.descriptions.get(name).map(Vec::as_slice).unwrap_or(&[]);
        match mode {
            PromptMode::Eval => {}
            PromptMode::Train => {
                if !descs.is_empty() {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    out.push(descs[rng.gen_range(0..descs.len())].clone());
                }
            }
            PromptMode::EvalWithDescriptions => out.extend(descs.iter().cloned()),
        }
        Ok(out)
    }

    /// Keeps the classes in `keep`, in vocabulary order.
    pub fn subset(&self, keep: &[String]) -> Result<Self> {
        let set: BTreeSet<&String> = keep.iter().collect();
        for k in keep {
            if !self.contains(k) {
                return Err(Error::Invalid(format!("class '{k}' is not in the vocabulary")));
            }
        }
        let names: Vec<String> = self.names.iter().filter(|n| set.contains(n)).cloned().collect();
        let descriptions = self
            .descriptions
            .iter()
            .filter(|(k, _)| set.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            names,
            template: self.template.clone(),
            descriptions,
        })
    }

    /// Digest of the class names and template (descriptions excluded).
    pub fn digest(&self) -> String {
        digest::of_json(&(&self.names, &self.template))
    }

    /// Every text that may reach the tokenizer.
    pub fn all_texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.template.as_str())
            .chain(self.names.iter().map(String::as_str))
            .chain(self.descriptions.values().flatten().map(String::as_str))
    }
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_class_name(name: &str) -> String {
    name.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Target classes whose normalized name matches no source class.
pub fn cross_dataset_vocabulary(
    target: &ClassVocabulary,
    source: &ClassVocabulary,
    matcher: &dyn Fn(&str) -> String,
) -> Result<Warned<ClassVocabulary>> {
    if target.is_empty() || source.is_empty() {
        return Err(Error::Invalid("both vocabularies must be nonempty".into()));
    }
    let seen: BTreeSet<String> = source.names.iter().map(|n| matcher(n)).collect();
    let keep: Vec<String> = target
        .names
        .iter()
        .filter(|n| !seen.contains(&matcher(n)))
        .cloned()
        .collect();
    let out = target.subset(&keep)?;
    let warnings = if out.is_empty() {
        vec![Warning::EmptyVocabulary]
    } else {
        Vec::new()
    };
    Ok(Warned::with(out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(names: &[&str]) -> ClassVocabulary {
        ClassVocabulary::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn template_rules() {
        assert!(ClassVocabulary::with_template(vec!["a".into()], "no placeholder").is_err());
        assert!(ClassVocabulary::with_template(vec!["a".into()], "[] and []").is_err());
        assert!(ClassVocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn eval_prompt_is_templated_name() {
        let v = vocab(&["brushing teeth"]);
        assert_eq!(
            v.render_prompts("brushing teeth", PromptMode::Eval, 0).unwrap(),
            vec!["A video of brushing teeth".to_string()]
        );
        assert!(v.render_prompts("surfing", PromptMode::Eval, 0).is_err());
    }

    #[test]
    fn train_prompts_fall_back_and_reproduce() {
        let mut v = vocab(&["a", "b"]);
        assert_eq!(v.render_prompts("a", PromptMode::Train, 3).unwrap().len(), 1);
        v.descriptions.insert(
            "b".into(),
            vec!["one".into(), "two".into(), "three".into()],
        );
        let run = |v: &ClassVocabulary| -> Vec<String> {
            (0..20).map(|s| v.render_prompts("b", PromptMode::Train, s).unwrap()[1].clone()).collect()
        };
        let first = run(&v);
        assert_eq!(first, run(&v));
        assert!(first.iter().collect::<BTreeSet<_>>().len() > 1);
        assert_eq!(v.render_prompts("b", PromptMode::EvalWithDescriptions, 0).unwrap().len(), 4);
    }

    #[test]
    fn cross_dataset_exclusion() {
        let m = |s: &str| normalize_class_name(s);
        let t = vocab(&["Riding Horse", "surfing"]);
        let s = vocab(&["riding horse"]);
        let out = cross_dataset_vocabulary(&t, &s, &m).unwrap();
        assert_eq!(out.value.names, vec!["surfing".to_string()]);
        assert!(out.warnings.is_empty());

        let same = cross_dataset_vocabulary(&t, &t, &m).unwrap();
        assert!(same.value.is_empty());
        assert_eq!(same.warnings, vec![Warning::EmptyVocabulary]);

        let other = vocab(&["juggling"]);
        assert_eq!(cross_dataset_vocabulary(&t, &other, &m).unwrap().value, t);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_class_name("  Riding,   Horse! "), "riding horse");
        assert_eq!(normalize_class_name("tai-chi"), "taichi");
    }
}
