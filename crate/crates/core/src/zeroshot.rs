//! Zero-shot compound-expression prediction from basic-task outputs.
//!
//! Each compound class is scored as `I_au + F_emo + D_va`: how well the
//! predicted AUs match the class profile, how much probability the two
//! constituent emotions receive, and a valence bonus for classes whose
//! blend is positive.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionBundle;
use crate::relatedness::{
    au_index, RelatednessTable, ANGER, CANONICAL_AUS, DISGUST, EMOTIONS, FEAR, HAPPINESS, NUM_AUS,
    NUM_EMOTIONS, SADNESS, SURPRISE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CompoundClass {
    pub name: String,
    pub emo1: usize,
    pub emo2: usize,
    /// AU index (position among the canonical AUs) to `p(au | class)`.
    pub au_profile: BTreeMap<usize, f64>,
    pub requires_positive_valence: bool,
}

impl CompoundClass {
    pub fn validate(&self) -> Result<()> {
        if self.emo1 == self.emo2 || self.emo1 >= NUM_EMOTIONS || self.emo2 >= NUM_EMOTIONS {
            return Err(Error::Config(format!(
                "compound `{}` needs two distinct basic emotions",
                self.name
            )));
        }
        if self.au_profile.is_empty() {
            return Err(Error::Config(format!("compound `{}` has an empty AU profile", self.name)));
        }
        for (&au, &w) in &self.au_profile {
            if au >= NUM_AUS {
                return Err(Error::IndexOutOfRange {
                    what: "AU",
                    index: au,
                    len: NUM_AUS,
                });
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Config(format!(
                    "compound `{}` AU weight {w} outside (0, 1]",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompoundScore {
    pub i_au: f64,
    pub f_emo: f64,
    pub d_va: u8,
    pub total: f64,
}

/// The eleven two-emotion blends, `(name, emo1, emo2, positive valence)`.
pub const COMPOUND_BLENDS: [(&str, usize, usize, bool); 11] = [
    ("happily_surprised", HAPPINESS, SURPRISE, true),
    ("happily_disgusted", HAPPINESS, DISGUST, true),
    ("sadly_fearful", SADNESS, FEAR, false),
    ("sadly_angry", SADNESS, ANGER, false),
    ("sadly_surprised", SADNESS, SURPRISE, false),
    ("sadly_disgusted", SADNESS, DISGUST, false),
    ("fearfully_angry", FEAR, ANGER, false),
    ("fearfully_surprised", FEAR, SURPRISE, false),
    ("angrily_surprised", ANGER, SURPRISE, false),
    ("angrily_disgusted", ANGER, DISGUST, false),
    ("disgustedly_surprised", DISGUST, SURPRISE, false),
];

/// Compound profiles built from the constituents' related AUs. With
/// `weighted`, observational AUs keep their table weight, otherwise every
/// related AU gets 1. An AU shared by both constituents takes the larger
/// weight.
pub fn default_compound_classes(table: &RelatednessTable, weighted: bool) -> Result<Vec<CompoundClass>> {
    if table.num_classes() != NUM_EMOTIONS || table.num_labels() != NUM_AUS {
        return Err(Error::Config("compound defaults need the emotion/AU table".into()));
    }
    COMPOUND_BLENDS
        .iter()
        .map(|&(name, emo1, emo2, positive)| {
            let mut au_profile = BTreeMap::new();
            for class in [emo1, emo2] {
                for e in table.lookup(class)? {
                    let w = table.coupling_weight(e, weighted);
                    let slot = au_profile.entry(e.label).or_insert(w);
                    *slot = f64::max(*slot, w);
                }
            }
            let c = CompoundClass {
                name: name.to_string(),
                emo1,
                emo2,
                au_profile,
                requires_positive_valence: positive,
            };
            c.validate()?;
            Ok(c)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    name: String,
    emo1: usize,
    emo2: usize,
    /// Keyed by AU number, e.g. `"12"` for AU12.
    aus: BTreeMap<String, f64>,
    #[serde(default)]
    positive_valence: bool,
}

/// Parses a profile file: a JSON array of
/// `{"name", "emo1", "emo2", "aus": {"12": 1.0, ...}, "positive_valence"}`.
pub fn parse_profiles(text: &str) -> Result<Vec<CompoundClass>> {
    let records: Vec<ProfileRecord> = serde_json::from_str(text)?;
    if records.is_empty() {
        return Err(Error::Config("compound profile file lists no classes".into()));
    }
    records
        .into_iter()
        .map(|r| {
            let mut au_profile = BTreeMap::new();
            for (key, w) in r.aus {
                let number: u32 = key
                    .trim_start_matches("AU")
                    .parse()
                    .map_err(|_| Error::UnknownLabel(key.clone()))?;
                let idx = au_index(number).ok_or_else(|| Error::UnknownLabel(key.clone()))?;
                au_profile.insert(idx, w);
            }
            let c = CompoundClass {
                name: r.name,
                emo1: r.emo1,
                emo2: r.emo2,
                au_profile,
                requires_positive_valence: r.positive_valence,
            };
            c.validate()?;
            Ok(c)
        })
        .collect()
}

pub fn load_profiles(path: &Path) -> Result<Vec<CompoundClass>> {
    parse_profiles(&std::fs::read_to_string(path).map_err(Error::at(path))?)
}

pub fn profiles_to_json(classes: &[CompoundClass]) -> String {
    let records: Vec<ProfileRecord> = classes
        .iter()
        .map(|c| ProfileRecord {
            name: c.name.clone(),
            emo1: c.emo1,
            emo2: c.emo2,
            aus: c
                .au_profile
                .iter()
                .map(|(i, w)| (CANONICAL_AUS[*i].to_string(), *w))
                .collect(),
            positive_valence: c.requires_positive_valence,
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("profiles serialize")
}

pub fn compound_scores(bundle: &PredictionBundle, classes: &[CompoundClass]) -> Result<Vec<CompoundScore>> {
    if bundle.au_probs.len() != NUM_AUS || bundle.expr_probs.len() != NUM_EMOTIONS {
        return Err(Error::Shape("bundle lacks the affect head layout".into()));
    }
    classes
        .iter()
        .map(|c| {
            c.validate()?;
            let norm: f64 = c.au_profile.values().sum();
            let match_: f64 = c.au_profile.iter().map(|(k, w)| bundle.au_probs[*k] * w).sum();
            let i_au = match_ / norm;
            let f_emo = bundle.expr_probs[c.emo1] + bundle.expr_probs[c.emo2];
            let d_va = u8::from(c.requires_positive_valence && bundle.va[0] > 0.0);
            Ok(CompoundScore {
                i_au,
                f_emo,
                d_va,
                total: i_au + f_emo + f64::from(d_va),
            })
        })
        .collect()
}

/// Index of the highest total; ties go to the lowest index.
pub fn predict_compound(scores: &[CompoundScore]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("no compound scores"));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.total > scores[best].total {
            best = i;
        }
    }
    Ok(best)
}

pub fn compound_names(classes: &[CompoundClass]) -> Vec<String> {
    classes
        .iter()
        .map(|c| {
            if c.name.is_empty() {
                format!("{}+{}", EMOTIONS[c.emo1], EMOTIONS[c.emo2])
            } else {
                c.name.clone()
            }
        })
        .collect()
}
