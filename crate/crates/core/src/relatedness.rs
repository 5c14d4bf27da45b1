//! Task-relatedness tables: categorical classes mapped to weighted sets of
//! binary labels.
//!
//! Two flavours exist. A prototypical/observational table comes from domain
//! knowledge (a cognitive study of which AUs annotators saw for each
//! emotion): prototypical AUs carry weight 1, observational AUs carry the
//! fraction of annotators that observed them. An empirical table is counted
//! from a co-annotated corpus.

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Action units covered by the AU head, ascending by AU number.
pub const CANONICAL_AUS: [u32; 17] = [1, 2, 4, 5, 6, 7, 9, 10, 11, 12, 15, 17, 20, 23, 24, 25, 26];

/// Basic emotion categories in model output order.
pub const EMOTIONS: [&str; 7] = [
    "neutral",
    "happiness",
    "sadness",
    "surprise",
    "fear",
    "disgust",
    "anger",
];

pub const NEUTRAL: usize = 0;
pub const HAPPINESS: usize = 1;
pub const SADNESS: usize = 2;
pub const SURPRISE: usize = 3;
pub const FEAR: usize = 4;
pub const DISGUST: usize = 5;
pub const ANGER: usize = 6;

pub const NUM_EMOTIONS: usize = EMOTIONS.len();
pub const NUM_AUS: usize = CANONICAL_AUS.len();

const DOMAIN_TABLE_JSON: &str = include_str!("../data/emotion_au_domain.json");
const AFFWILD2_TABLE_JSON: &str = include_str!("../data/emotion_au_affwild2.json");

/// Position of an AU number in [`CANONICAL_AUS`].
pub fn au_index(au_number: u32) -> Option<usize> {
    CANONICAL_AUS.iter().position(|&n| n == au_number)
}

pub fn au_label_names() -> Vec<String> {
    CANONICAL_AUS.iter().map(|n| format!("AU{n}")).collect()
}

pub fn emotion_names() -> Vec<String> {
    EMOTIONS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    PrototypicalObservational,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub label: usize,
    pub weight: f64,
    /// Always false in empirical tables.
    pub prototypical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelatednessTable {
    class_names: Vec<String>,
    label_names: Vec<String>,
    /// Per class, entries sorted by label index.
    entries: Vec<Vec<Entry>>,
    kind: TableKind,
}

impl RelatednessTable {
    /// Builds a table, validating every invariant.
    pub fn new(
        class_names: Vec<String>,
        label_names: Vec<String>,
        mut entries: Vec<Vec<Entry>>,
        kind: TableKind,
    ) -> Result<Self> {
        if entries.len() != class_names.len() {
            return Err(Error::Shape(format!(
                "{} entry rows for {} classes",
                entries.len(),
                class_names.len()
            )));
        }
        check_unique(&class_names, Error::DuplicateClass)?;
        check_unique(&label_names, |l| Error::DuplicateLabel {
            class: "<label list>".into(),
            label: l,
        })?;
        for (class, row) in entries.iter_mut().enumerate() {
            row.sort_by_key(|e| e.label);
            let mut seen = HashSet::new();
            for e in row.iter() {
                let label = label_names.get(e.label).ok_or(Error::IndexOutOfRange {
                    what: "label",
                    index: e.label,
                    len: label_names.len(),
                })?;
                if !seen.insert(e.label) {
                    return Err(Error::DuplicateLabel {
                        class: class_names[class].clone(),
                        label: label.clone(),
                    });
                }
                if !(e.weight > 0.0 && e.weight <= 1.0) {
                    return Err(Error::WeightOutOfRange {
                        class: class_names[class].clone(),
                        label: label.clone(),
                        weight: e.weight,
                    });
                }
                if e.prototypical && (kind == TableKind::Empirical || e.weight != 1.0) {
                    return Err(Error::PrototypicalWeight {
                        class: class_names[class].clone(),
                        label: label.clone(),
                        weight: e.weight,
                    });
                }
            }
        }
        Ok(Self {
            class_names,
            label_names,
            entries,
            kind,
        })
    }

    /// The emotion/AU relatedness of the cognitive study (prototypical and
    /// observational AUs), bundled with the crate.
    pub fn emotion_au_domain() -> Self {
        load_domain_table_str(DOMAIN_TABLE_JSON).expect("bundled domain table is valid")
    }

    /// Emotion/AU relatedness measured on Aff-Wild2, bundled with the crate.
    pub fn emotion_au_affwild2() -> Self {
        Self::from_json(AFFWILD2_TABLE_JSON).expect("bundled empirical table is valid")
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == name)
    }

    /// Entries of one class, ordered by label index. May be empty.
    pub fn lookup(&self, class: usize) -> Result<&[Entry]> {
        self.entries
            .get(class)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                what: "class",
                index: class,
                len: self.class_names.len(),
            })
    }

    pub fn entry(&self, class: usize, label: usize) -> Option<&Entry> {
        self.entries.get(class)?.iter().find(|e| e.label == label)
    }

    /// Weight used when the relation enters a coupling term.
    ///
    /// Prototypical/observational tables use 1 for every listed label unless
    /// `reweight` is set, in which case observational labels use their
    /// annotator-agreement weight. Empirical tables always use their weights.
    pub fn coupling_weight(&self, entry: &Entry, reweight: bool) -> f64 {
        match self.kind {
            TableKind::Empirical => entry.weight,
            TableKind::PrototypicalObservational if reweight => entry.weight,
            TableKind::PrototypicalObservational => 1.0,
        }
    }

    /// Dense `classes x labels` matrix of coupling weights, zero where no
    /// relation exists.
    pub fn weight_matrix(&self, reweight: bool) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; self.label_names.len()];
                for e in row {
                    dense[e.label] = self.coupling_weight(e, reweight);
                }
                dense
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_repr()).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: TableRepr = serde_json::from_str(text)?;
        Self::from_repr(repr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(Error::at(path))?)
    }

    fn to_repr(&self) -> TableRepr {
        let entries = self
            .class_names
            .iter()
            .zip(&self.entries)
            .map(|(class, row)| {
                let row = row
                    .iter()
                    .map(|e| {
                        (
                            self.label_names[e.label].clone(),
                            EntryRepr {
                                w: e.weight,
                                proto: e.prototypical,
                            },
                        )
                    })
                    .collect();
                (class.clone(), row)
            })
            .collect();
        TableRepr {
            classes: self.class_names.clone(),
            labels: self.label_names.clone(),
            entries,
            kind: self.kind,
        }
    }

    fn from_repr(repr: TableRepr) -> Result<Self> {
        let mut entries = vec![Vec::new(); repr.classes.len()];
        for (class, row) in repr.entries {
            let c = repr
                .classes
                .iter()
                .position(|n| *n == class)
                .ok_or_else(|| Error::UnknownClass(class.clone()))?;
            for (label, e) in row {
                let l = repr
                    .labels
                    .iter()
                    .position(|n| *n == label)
                    .ok_or(Error::UnknownLabel(label))?;
                entries[c].push(Entry {
                    label: l,
                    weight: e.w,
                    prototypical: e.proto,
                });
            }
        }
        Self::new(repr.classes, repr.labels, entries, repr.kind)
    }
}

fn check_unique(names: &[String], err: impl Fn(String) -> Error) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(err(n.clone()));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    classes: Vec<String>,
    labels: Vec<String>,
    entries: IndexMap<String, IndexMap<String, EntryRepr>>,
    kind: TableKind,
}

#[derive(Serialize, Deserialize)]
struct EntryRepr {
    w: f64,
    proto: bool,
}

/// Domain-knowledge source file: per class, prototypical labels and
/// observational `(label, weight)` pairs.
#[derive(Debug, Deserialize)]
struct DomainSource {
    classes: Vec<String>,
    labels: Vec<String>,
    relations: Vec<DomainRelation>,
}

#[derive(Debug, Deserialize)]
struct DomainRelation {
    class: String,
    #[serde(default)]
    prototypical: Vec<String>,
    #[serde(default)]
    observational: Vec<ObservationalSource>,
}

#[derive(Debug, Deserialize)]
struct ObservationalSource {
    label: String,
    weight: f64,
}

pub fn load_domain_table(path: &Path) -> Result<RelatednessTable> {
    load_domain_table_str(&std::fs::read_to_string(path).map_err(Error::at(path))?)
}

pub fn load_domain_table_str(text: &str) -> Result<RelatednessTable> {
    let src: DomainSource = serde_json::from_str(text)?;
    let mut entries = vec![Vec::new(); src.classes.len()];
    let mut seen_classes = HashSet::new();
    for rel in &src.relations {
        let c = src
            .classes
            .iter()
            .position(|n| *n == rel.class)
            .ok_or_else(|| Error::UnknownClass(rel.class.clone()))?;
        if !seen_classes.insert(c) {
            return Err(Error::DuplicateClass(rel.class.clone()));
        }
        let find_label = |name: &str| {
            src.labels
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::UnknownLabel(name.to_string()))
        };
        for name in &rel.prototypical {
            entries[c].push(Entry {
                label: find_label(name)?,
                weight: 1.0,
                prototypical: true,
            });
        }
        for obs in &rel.observational {
            entries[c].push(Entry {
                label: find_label(&obs.label)?,
                weight: obs.weight,
                prototypical: false,
            });
        }
    }
    RelatednessTable::new(
        src.classes,
        src.labels,
        entries,
        TableKind::PrototypicalObservational,
    )
}

/// Class-labelled samples with (possibly partial) binary annotations.
#[derive(Debug, Clone, Default)]
pub struct CoAnnotatedCorpus {
    pub class_names: Vec<String>,
    pub label_names: Vec<String>,
    /// `(class index, per-label annotation)`; `None` marks an unannotated label.
    pub samples: Vec<(usize, Vec<Option<bool>>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceWarning {
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct InferredTable {
    pub table: RelatednessTable,
    pub warnings: Vec<InferenceWarning>,
}

pub const DEFAULT_EMPIRICAL_THRESHOLD: f64 = 0.1;

/// Counts, per class and label, the fraction of annotated samples in which
/// the label is active, keeping fractions at or above `threshold`.
pub fn infer_empirical(corpus: &CoAnnotatedCorpus, threshold: f64) -> Result<InferredTable> {
    if corpus.samples.is_empty() {
        return Err(Error::Empty("co-annotated corpus is empty"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let k = corpus.class_names.len();
    let b = corpus.label_names.len();
    let mut active = vec![vec![0u64; b]; k];
    let mut annotated = vec![vec![0u64; b]; k];
    let mut per_class = vec![0u64; k];
    for (class, labels) in &corpus.samples {
        if *class >= k {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: *class,
                len: k,
            });
        }
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "sample has {} labels, corpus declares {b}",
                labels.len()
            )));
        }
        per_class[*class] += 1;
        for (l, v) in labels.iter().enumerate() {
            if let Some(on) = v {
                annotated[*class][l] += 1;
                if *on {
                    active[*class][l] += 1;
                }
            }
        }
    }

    let mut warnings = Vec::new();
    let mut entries = vec![Vec::new(); k];
    for c in 0..k {
        if per_class[c] == 0 {
            warnings.push(InferenceWarning {
                class: corpus.class_names[c].clone(),
                message: "no samples; class omitted".into(),
            });
            continue;
        }
        if annotated[c].iter().all(|&n| n == 0) {
            warnings.push(InferenceWarning {
                class: corpus.class_names[c].clone(),
                message: "no annotated labels; class omitted".into(),
            });
            continue;
        }
        for l in 0..b {
            if annotated[c][l] == 0 {
                continue;
            }
            let w = active[c][l] as f64 / annotated[c][l] as f64;
            if w > 0.0 && w >= threshold {
                entries[c].push(Entry {
                    label: l,
                    weight: w,
                    prototypical: false,
                });
            }
        }
    }
    let table = RelatednessTable::new(
        corpus.class_names.clone(),
        corpus.label_names.clone(),
        entries,
        TableKind::Empirical,
    )?;
    Ok(InferredTable { table, warnings })
}
