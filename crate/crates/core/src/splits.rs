//! Cross-validation fold assignment, persisted as `splits.json` = `{"fold_0": [ids], ...}`.

use std::fmt;

use rand::seq::SliceRandom;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub folds: Vec<Vec<String>>,
}

/// Which fold to train: a single validation fold, or every case with no validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSel {
    Fold(usize),
    All,
}

impl FoldSel {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(FoldSel::All);
        }
        s.parse().map(FoldSel::Fold).map_err(|_| Error::Config(format!("fold must be an index or 'all', got {s:?}")))
    }

    pub fn dir_name(self) -> String {
        match self {
            FoldSel::Fold(k) => format!("fold_{k}"),
            FoldSel::All => "fold_all".into(),
        }
    }
}

impl fmt::Display for FoldSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldSel::Fold(k) => write!(f, "{k}"),
            FoldSel::All => f.write_str("all"),
        }
    }
}

pub fn split_folds(case_ids: &[String], fold_count: usize, seed: u64) -> Result<Splits> {
    if fold_count == 0 {
        return Err(Error::Config("fold_count must be ≥ 1".into()));
    }
    if fold_count > case_ids.len() {
        return Err(Error::Config(format!("{fold_count} folds requested for {} cases", case_ids.len())));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != case_ids.len() {
        return Err(Error::Config("duplicate case ids".into()));
    }
    ids.shuffle(&mut rng::stream(seed, "splits"));
    let mut folds = vec![Vec::new(); fold_count];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % fold_count].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(Splits { folds })
}

impl Splits {
    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    fn check(&self, sel: FoldSel) -> Result<()> {
        match sel {
            FoldSel::Fold(k) if k >= self.folds.len() => {
                Err(Error::Config(format!("fold {k} out of range for {} folds", self.folds.len())))
            }
            _ => Ok(()),
        }
    }

    pub fn train_ids(&self, sel: FoldSel) -> Result<Vec<String>> {
        self.check(sel)?;
        let mut ids: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| sel != FoldSel::Fold(*i))
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn val_ids(&self, sel: FoldSel) -> Result<Vec<String>> {
        self.check(sel)?;
        Ok(match sel {
            FoldSel::Fold(k) => self.folds[k].clone(),
            FoldSel::All => Vec::new(),
        })
    }

    pub fn all_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.folds.iter().flatten().cloned().collect();
        ids.sort();
        ids
    }
}

impl Serialize for Splits {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.folds.len()))?;
        for (i, f) in self.folds.iter().enumerate() {
            map.serialize_entry(&format!("fold_{i}"), f)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Splits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Splits;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of fold_<i> to case id lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> std::result::Result<Splits, A::Error> {
                use serde::de::Error as _;
                let mut entries: Vec<(usize, Vec<String>)> = Vec::new();
                while let Some((k, v)) = m.next_entry::<String, Vec<String>>()? {
                    let i = k
                        .strip_prefix("fold_")
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(|| A::Error::custom(format!("unexpected key {k:?}")))?;
                    entries.push((i, v));
                }
                entries.sort_by_key(|e| e.0);
                if entries.iter().enumerate().any(|(j, e)| e.0 != j) {
                    return Err(A::Error::custom("fold keys must be fold_0..fold_{k-1}"));
                }
                Ok(Splits { folds: entries.into_iter().map(|e| e.1).collect() })
            }
        }
        d.deserialize_map(V)
    }
}
