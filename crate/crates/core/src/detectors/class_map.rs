use std::collections::{BTreeMap, HashSet};

use crate::error::{CollisionGroup, Error, Result};

/// Class names mapped to the id of the first token of their tokenization.
///
/// Two classes that share a first token cannot be told apart by first-token
/// logits, so collisions are a hard error until the caller supplies a rename
/// (the canonical case being `position -> location` next to `positive`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTokenMap {
    entries: Vec<(String, u32)>,
    renames: Vec<(String, String)>,
}

impl ClassTokenMap {
    pub fn build<F>(class_names: &[String], tokenize: F, renames: &[(String, String)]) -> Result<Self>
    where
        F: Fn(&str) -> Vec<u32>,
    {
        if class_names.is_empty() {
            return Err(Error::InvalidClassNames("no class names given".into()));
        }
        let mut seen = HashSet::new();
        for name in class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidClassNames(format!("duplicate class name {name:?}")));
            }
        }

        let lookup: BTreeMap<&str, &str> = renames.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let mut applied = Vec::new();
        let mut entries = Vec::with_capacity(class_names.len());
        let mut renamed_seen = HashSet::new();
        for name in class_names {
            let effective = match lookup.get(name.as_str()) {
                Some(&replacement) => {
                    applied.push((name.clone(), replacement.to_string()));
                    replacement.to_string()
                }
                None => name.clone(),
            };
            if !renamed_seen.insert(effective.clone()) {
                return Err(Error::InvalidClassNames(format!(
                    "renaming produces duplicate class name {effective:?}"
                )));
            }
            let first = tokenize(&effective)
                .first()
                .copied()
                .ok_or_else(|| Error::InvalidClassNames(format!("class name {effective:?} tokenizes to nothing")))?;
            entries.push((effective, first));
        }

        let mut by_token: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for (name, tok) in &entries {
            by_token.entry(*tok).or_default().push(name.clone());
        }
        let groups: Vec<CollisionGroup> = by_token
            .into_iter()
            .filter(|(_, names)| names.len() > 1)
            .map(|(token, names)| CollisionGroup { token, names })
            .collect();
        if !groups.is_empty() {
            return Err(Error::Collision { groups });
        }
        Ok(ClassTokenMap {
            entries,
            renames: applied,
        })
    }

    /// A map with no classes, for extracting embedding-only dumps.
    pub fn empty() -> Self {
        ClassTokenMap {
            entries: Vec::new(),
            renames: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class names after renames, in class-index order.
    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|(_, t)| *t).collect()
    }

    pub fn entries(&self) -> &[(String, u32)] {
        &self.entries
    }

    pub fn renames(&self) -> &[(String, String)] {
        &self.renames
    }

    pub fn token_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| *t)
    }
}

/// Byte-level tokenization: one token per UTF-8 byte.
pub fn byte_tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}
