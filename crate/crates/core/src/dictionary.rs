//! Verb/noun label spaces and the unified action dictionary.
//!
//! An action id is an index into an ordered list of (verb, noun) pairs.
//! The dictionary also keeps the inverse map, so predictions over unified
//! action classes decode back to their factored labels, and factored
//! predictions can look up their action id (which may be absent: not every
//! verb×noun combination is a valid action).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Dense id → unique name mapping for one label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    /// Build from (id, name) entries; ids must cover 0..K-1 exactly and
    /// names must be unique. Repeated consistent entries are allowed.
    pub fn from_entries(kind: &str, entries: &[(usize, String)]) -> Result<Self> {
        let mut by_id: HashMap<usize, &str> = HashMap::new();
        for (id, name) in entries {
            match by_id.get(id) {
                Some(existing) if *existing != name.as_str() => {
                    return Err(Error::Dictionary(format!(
                        "{kind} id {id} has conflicting names {existing:?} and {name:?}"
                    )));
                }
                _ => {
                    by_id.insert(*id, name.as_str());
                }
            }
        }
        let k = by_id.len();
        let mut names = vec![String::new(); k];
        for (id, name) in &by_id {
            if *id >= k {
                return Err(Error::Dictionary(format!(
                    "{kind} ids are not dense: id {id} with only {k} distinct ids"
                )));
            }
            names[*id] = (*name).to_string();
        }
        let mut seen = HashMap::new();
        for (id, name) in names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.clone(), id) {
                return Err(Error::Dictionary(format!(
                    "{kind} name {name:?} used by ids {prev} and {id}"
                )));
            }
        }
        Ok(LabelSpace { names })
    }

    /// Numbered placeholder names, for synthetic label spaces.
    pub fn numbered(prefix: &str, k: usize) -> Self {
        LabelSpace {
            names: (0..k).map(|i| format!("{prefix}{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone)]
pub struct ActionDictionary {
    verbs: LabelSpace,
    nouns: LabelSpace,
    action_names: Vec<String>,
    forward: Vec<(usize, usize)>,
    inverse: HashMap<(usize, usize), usize>,
}

impl ActionDictionary {
    /// Build from an ordered pair list; action id i maps to the i-th pair.
    pub fn build(verbs: LabelSpace, nouns: LabelSpace, pairs: &[(usize, usize)]) -> Result<Self> {
        let names = pairs
            .iter()
            .map(|&(v, n)| {
                format!(
                    "{} {}",
                    verbs.name(v).unwrap_or("?"),
                    nouns.name(n).unwrap_or("?")
                )
            })
            .collect();
        Self::build_named(verbs, nouns, pairs, names)
    }

    pub fn build_named(
        verbs: LabelSpace,
        nouns: LabelSpace,
        pairs: &[(usize, usize)],
        action_names: Vec<String>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dictionary("empty pair list".into()));
        }
        if action_names.len() != pairs.len() {
            return Err(Error::Dictionary("action name count mismatch".into()));
        }
        let mut inverse = HashMap::with_capacity(pairs.len());
        for (a, &(v, n)) in pairs.iter().enumerate() {
            if v >= verbs.len() {
                return Err(Error::Dictionary(format!(
                    "action {a} references verb id {v} outside 0..{}",
                    verbs.len()
                )));
            }
            if n >= nouns.len() {
                return Err(Error::Dictionary(format!(
                    "action {a} references noun id {n} outside 0..{}",
                    nouns.len()
                )));
            }
            if let Some(prev) = inverse.insert((v, n), a) {
                return Err(Error::Dictionary(format!(
                    "duplicate pair (verb {v}, noun {n}) at actions {prev} and {a}"
                )));
            }
        }
        Ok(ActionDictionary {
            verbs,
            nouns,
            action_names,
            forward: pairs.to_vec(),
            inverse,
        })
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_nouns(&self) -> usize {
        self.nouns.len()
    }

    pub fn num_actions(&self) -> usize {
        self.forward.len()
    }

    pub fn verbs(&self) -> &LabelSpace {
        &self.verbs
    }

    pub fn nouns(&self) -> &LabelSpace {
        &self.nouns
    }

    pub fn action_name(&self, a: usize) -> Option<&str> {
        self.action_names.get(a).map(String::as_str)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.forward
    }

    /// Decode an action id to its (verb, noun) pair.
    pub fn action_to_pair(&self, a: usize) -> Result<(usize, usize)> {
        self.forward.get(a).copied().ok_or_else(|| {
            Error::Dictionary(format!(
                "action id {a} outside 0..{}",
                self.forward.len()
            ))
        })
    }

    /// Look up the action id of a (verb, noun) pair; `Ok(None)` when the
    /// pair is not a dictionary entry.
    pub fn pair_to_action(&self, v: usize, n: usize) -> Result<Option<usize>> {
        if v >= self.verbs.len() {
            return Err(Error::Dictionary(format!(
                "verb id {v} outside 0..{}",
                self.verbs.len()
            )));
        }
        if n >= self.nouns.len() {
            return Err(Error::Dictionary(format!(
                "noun id {n} outside 0..{}",
                self.nouns.len()
            )));
        }
        Ok(self.inverse.get(&(v, n)).copied())
    }

    /// Load from a CSV with header
    /// `verb_class,verb,noun_class,noun,action_class,action`.
    /// Action classes must appear as 0,1,2,... in file order.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| {
            Error::Dictionary(format!("{}: {e}", path.display()))
        })?;
        let mut verb_entries = Vec::new();
        let mut noun_entries = Vec::new();
        let mut pairs = Vec::new();
        let mut action_names = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| Error::Dictionary(format!("{}: {e}", path.display())))?;
            if record.len() != 6 {
                return Err(Error::Dictionary(format!(
                    "{}: row {i} has {} fields, expected 6",
                    path.display(),
                    record.len()
                )));
            }
            let parse = |field: usize, what: &str| -> Result<usize> {
                record[field].trim().parse().map_err(|_| {
                    Error::Dictionary(format!(
                        "{}: row {i}: bad {what} {:?}",
                        path.display(),
                        &record[field]
                    ))
                })
            };
            let v = parse(0, "verb_class")?;
            let n = parse(2, "noun_class")?;
            let a = parse(4, "action_class")?;
            if a != i {
                return Err(Error::Dictionary(format!(
                    "{}: action_class {a} at row {i}; ids must follow file order",
                    path.display()
                )));
            }
            verb_entries.push((v, record[1].trim().to_string()));
            noun_entries.push((n, record[3].trim().to_string()));
            pairs.push((v, n));
            action_names.push(record[5].trim().to_string());
        }
        let verbs = LabelSpace::from_entries("verb", &verb_entries)?;
        let nouns = LabelSpace::from_entries("noun", &noun_entries)?;
        let mut seen = HashMap::new();
        for (a, name) in action_names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.clone(), a) {
                return Err(Error::Dictionary(format!(
                    "action name {name:?} used by ids {prev} and {a}"
                )));
            }
        }
        Self::build_named(verbs, nouns, &pairs, action_names)
    }

    /// Write the CSV form accepted by [`ActionDictionary::load_csv`].
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Dictionary(format!("{}: {e}", path.display())))?;
        writer
            .write_record(["verb_class", "verb", "noun_class", "noun", "action_class", "action"])
            .map_err(|e| Error::Dictionary(e.to_string()))?;
        for (a, &(v, n)) in self.forward.iter().enumerate() {
            writer
                .write_record([
                    v.to_string(),
                    self.verbs.name(v).unwrap_or("?").to_string(),
                    n.to_string(),
                    self.nouns.name(n).unwrap_or("?").to_string(),
                    a.to_string(),
                    self.action_names[a].clone(),
                ])
                .map_err(|e| Error::Dictionary(e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
