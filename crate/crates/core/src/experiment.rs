//! Config-driven runs. Every run owns an output directory and leaves a
//! `manifest.json` there with the config, its hash, the seed, input file
//! hashes and the run's results.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset;
use crate::error::{Error, Result};
use crate::labels::{clean_va_expr, subsample_frames, HeterogeneousSample};
use crate::losses::{Coupling, LossWeights, Task};
use crate::metrics::{
    au_metrics, classification_metrics, threshold, va_metrics, AuMetrics, ClassificationMetrics, ConfusionMatrix,
    VaMetrics, DEFAULT_AU_THRESHOLD,
};
use crate::model::{
    bundles_from_outputs, gradient_check, median_filter, GradCheckConfig, HeadRole, ModelSpec, MultiHeadModel,
    DEFAULT_MEDIAN_WINDOW, DEFAULT_TRUNK,
};
use crate::objective::{BatchObjective, CouplingMode, CouplingSetup};
use crate::relatedness::{
    au_label_names, emotion_names, infer_empirical, CoAnnotatedCorpus, InferenceWarning, RelatednessTable,
    DEFAULT_EMPIRICAL_THRESHOLD,
};
use crate::scheduler::epoch_seed;
use crate::synthdata::{Generator, GeneratorSpec, Partition};
use crate::tensor::Tensor;
use crate::train::{train, EpochSummary, StepRecord, TrainSettings};
use crate::zeroshot::{compound_names, compound_scores, default_compound_classes, load_profiles, predict_compound, profiles_to_json};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    /// Hash of the config with its output directory removed.
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<InputFile>,
    pub results: serde_json::Value,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        Ok(serde_json::from_str(&std::fs::read_to_string(&path).map_err(Error::at(&path))?)?)
    }
}

fn write_manifest<C: Serialize>(
    out: &Path,
    command: &str,
    config: &C,
    seed: u64,
    inputs: &[&Path],
    results: serde_json::Value,
) -> Result<Manifest> {
    let mut config = serde_json::to_value(config)?;
    let mut hashed = config.clone();
    if let Some(obj) = hashed.as_object_mut() {
        obj.remove("out");
    }
    if let Some(obj) = config.as_object_mut() {
        obj.insert("out".into(), serde_json::Value::String(out.display().to_string()));
    }
    let inputs = inputs
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(Error::at(p))?;
            Ok(InputFile {
                path: p.display().to_string(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command: command.into(),
        version: VERSION.into(),
        config_sha256: sha256_hex(serde_json::to_string(&hashed)?.as_bytes()),
        config,
        seed,
        inputs,
        results,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::at(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::at(dir))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Experiment config

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum RelatednessSource {
    /// The bundled cognitive-study table.
    #[default]
    Domain,
    /// The bundled table of AU activation rates per expression.
    Affwild2,
    File { path: PathBuf },
    /// Inferred from a CSV of samples carrying both expression and AU labels.
    Empirical {
        corpus: PathBuf,
        #[serde(default = "default_empirical_threshold")]
        threshold: f64,
    },
}

fn default_empirical_threshold() -> f64 {
    DEFAULT_EMPIRICAL_THRESHOLD
}

impl RelatednessSource {
    fn rebase(&mut self, base: &Path) {
        match self {
            RelatednessSource::File { path } => *path = resolve(base, path),
            RelatednessSource::Empirical { corpus, .. } => *corpus = resolve(base, corpus),
            _ => {}
        }
    }

    fn input(&self) -> Option<&Path> {
        match self {
            RelatednessSource::File { path } => Some(path),
            RelatednessSource::Empirical { corpus, .. } => Some(corpus),
            _ => None,
        }
    }

    pub fn resolve(&self) -> Result<(RelatednessTable, Vec<InferenceWarning>)> {
        match self {
            RelatednessSource::Domain => Ok((RelatednessTable::emotion_au_domain(), Vec::new())),
            RelatednessSource::Affwild2 => Ok((RelatednessTable::emotion_au_affwild2(), Vec::new())),
            RelatednessSource::File { path } => Ok((RelatednessTable::load(path)?, Vec::new())),
            RelatednessSource::Empirical { corpus, threshold } => {
                let inferred = infer_empirical(&corpus_from(&dataset::load(corpus)?), *threshold)?;
                Ok((inferred.table, inferred.warnings))
            }
        }
    }
}

/// Expression/AU pairs of the samples that carry both.
pub fn corpus_from(samples: &[HeterogeneousSample]) -> CoAnnotatedCorpus {
    CoAnnotatedCorpus {
        class_names: emotion_names(),
        label_names: au_label_names(),
        samples: samples
            .iter()
            .filter_map(|s| Some((s.expr?, s.au.clone()?)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    /// One annotation CSV per separately labelled set.
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub trunk_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk_widths: DEFAULT_TRUNK.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    /// Drop training samples whose VA contradicts their expression.
    pub clean_va_expr: bool,
    /// Keep every fifth frame of each video.
    pub subsample: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            clean_va_expr: true,
            subsample: false,
        }
    }
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datasets: DatasetPaths,
    #[serde(default)]
    pub relatedness: RelatednessSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Fraction of each training set held out when no test set is given.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a config; relative paths are taken from the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c: Self = read_config(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in &mut c.datasets.train {
            *p = resolve(base, p);
        }
        if let Some(t) = &mut c.datasets.test {
            *t = resolve(base, t);
        }
        c.relatedness.rebase(base);
        if let Some(o) = &mut c.out {
            *o = resolve(base, o);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.train.is_empty() {
            return Err(Error::Config("no training sets".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction)));
        }
        if self.model.trunk_widths.contains(&0) {
            return Err(Error::Config("trunk widths must be positive".into()));
        }
        let t = &self.train;
        if t.max_batch == 0 || t.epochs == 0 {
            return Err(Error::Config("max_batch and epochs must be positive".into()));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!("lr {} / momentum {}", t.lr, t.momentum)));
        }
        t.loss_weights.validate()
    }
}

fn preprocess(samples: Vec<HeterogeneousSample>, p: &Preprocess) -> (Vec<HeterogeneousSample>, usize) {
    let (mut kept, removed) = if p.clean_va_expr {
        clean_va_expr(samples)
    } else {
        (samples, Vec::new())
    };
    if p.subsample {
        kept = subsample_frames(kept);
    }
    (kept, removed.len())
}

fn feature_dim<'a>(samples: impl IntoIterator<Item = &'a HeterogeneousSample>) -> Result<usize> {
    let mut dim = None;
    for s in samples {
        match dim {
            None => dim = Some(s.features.len()),
            Some(d) if d != s.features.len() => {
                return Err(Error::Data(format!(
                    "sample `{}` has {} features, others have {d}",
                    s.id,
                    s.features.len()
                )))
            }
            _ => {}
        }
    }
    dim.ok_or(Error::Empty("no samples"))
}

/// Moves a seeded random `fraction` of each set into one held-out list;
/// both sides keep the input order.
pub fn split_holdout(
    sets: Vec<Vec<HeterogeneousSample>>,
    fraction: f64,
    seed: u64,
) -> (Vec<Vec<HeterogeneousSample>>, Vec<HeterogeneousSample>) {
    let mut held = Vec::new();
    let mut kept_sets = Vec::new();
    for (s, set) in sets.into_iter().enumerate() {
        let k = (fraction * set.len() as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + s as u64);
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng);
        let mut out = vec![false; set.len()];
        for &i in &idx[..k] {
            out[i] = true;
        }
        let mut kept = Vec::with_capacity(set.len() - k);
        for (i, x) in set.into_iter().enumerate() {
            if out[i] {
                held.push(x);
            } else {
                kept.push(x);
            }
        }
        kept_sets.push(kept);
    }
    (kept_sets, held)
}

#[derive(Debug)]
pub struct TrainRun {
    pub out: PathBuf,
    pub model: MultiHeadModel,
    pub epochs: Vec<EpochSummary>,
    pub heldout: Option<EvalReport>,
    pub manifest: Manifest,
}

#[derive(Serialize)]
struct TrainResults<'a> {
    feature_dim: usize,
    set_sizes: Vec<usize>,
    removed_by_cleaning: usize,
    heldout_size: usize,
    relatedness_warnings: Vec<String>,
    epochs: &'a [EpochSummary],
    heldout: &'a Option<EvalReport>,
}

/// Trains, checkpointing after every epoch, and scores the held-out split.
///
/// Writes `steps.csv`, `checkpoints/epoch_NNN.ckpt`, `model.ckpt`,
/// `relatedness.json`, `heldout_confusion.csv` and the manifest.
pub fn run_train(config: &ExperimentConfig) -> Result<TrainRun> {
    config.validate()?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory".into()))?;
    let (table, warnings) = config.relatedness.resolve()?;
    let mut sets = Vec::new();
    let mut removed = 0;
    for p in &config.datasets.train {
        let (kept, r) = preprocess(dataset::load(p)?, &config.preprocess);
        removed += r;
        sets.push(kept);
    }
    let seed = config.train.seed;
    let (sets, heldout) = match &config.datasets.test {
        Some(p) => (sets, dataset::load(p)?),
        None => split_holdout(sets, config.holdout_fraction, seed),
    };
    let dim = feature_dim(sets.iter().flatten().chain(&heldout))?;

    let mut model = MultiHeadModel::new(ModelSpec::affect(dim, config.model.trunk_widths.clone(), seed))?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let steps_path = out.join("steps.csv");
    let mut steps = std::io::BufWriter::new(std::fs::File::create(&steps_path).map_err(Error::at(&steps_path))?);
    writeln!(steps, "{}", StepRecord::CSV_HEADER)?;
    let refs: Vec<&[HeterogeneousSample]> = sets.iter().map(Vec::as_slice).collect();
    let epochs = train(
        &mut model,
        &refs,
        &table,
        &config.train,
        |rec| Ok(writeln!(steps, "{}", rec.csv_line())?),
        |e, m| m.save(&ckpt_dir.join(format!("epoch_{e:03}.ckpt"))),
    )?;
    steps.flush()?;
    drop(steps);
    model.save(&out.join("model.ckpt"))?;
    table.save(&out.join("relatedness.json"))?;

    let heldout_report = if heldout.is_empty() {
        None
    } else {
        let (report, cm) = evaluate(&model, &heldout, None)?;
        if let Some(cm) = cm {
            let p = out.join("heldout_confusion.csv");
            std::fs::write(&p, cm.to_csv()).map_err(Error::at(&p))?;
        }
        Some(report)
    };

    let mut inputs: Vec<&Path> = config.datasets.train.iter().map(PathBuf::as_path).collect();
    inputs.extend(config.datasets.test.as_deref());
    inputs.extend(config.relatedness.input());
    let results = TrainResults {
        feature_dim: dim,
        set_sizes: sets.iter().map(Vec::len).collect(),
        removed_by_cleaning: removed,
        heldout_size: heldout.len(),
        relatedness_warnings: warnings.iter().map(|w| format!("{}: {}", w.class, w.message)).collect(),
        epochs: &epochs,
        heldout: &heldout_report,
    };
    let manifest = write_manifest(&out, "train", config, seed, &inputs, serde_json::to_value(&results)?)?;
    Ok(TrainRun {
        out,
        model,
        epochs,
        heldout: heldout_report,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaReport {
    pub labelled: usize,
    pub unfiltered: VaMetrics,
    /// Present when the data has video keys.
    pub filtered: Option<VaMetrics>,
    pub median_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub va: Option<VaReport>,
    pub expr: Option<ClassificationMetrics>,
    pub au: Option<AuMetrics>,
}

fn head_role(task: Task) -> Result<HeadRole> {
    match task {
        Task::Va => Ok(HeadRole::Va),
        Task::Expr => Ok(HeadRole::Categorical),
        Task::Au => Ok(HeadRole::Binary),
        t => Err(Error::Config(format!("evaluation of task {t:?} is not supported"))),
    }
}

/// Forward pass in row chunks.
fn outputs_for(model: &MultiHeadModel, samples: &[HeterogeneousSample]) -> Result<Vec<Tensor>> {
    let spec = model.spec();
    if let Some(s) = samples.iter().find(|s| s.features.len() != spec.input_dim) {
        return Err(Error::Data(format!(
            "sample `{}` has {} features; the model expects {}",
            s.id,
            s.features.len(),
            spec.input_dim
        )));
    }
    let mut heads: Vec<Vec<f64>> = vec![Vec::new(); spec.heads.len()];
    for chunk in samples.chunks(4096) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(|s| s.features.clone()).collect();
        for (h, o) in model.forward(&Tensor::from_rows(&rows)?)?.into_iter().enumerate() {
            heads[h].extend_from_slice(o.data());
        }
    }
    heads
        .into_iter()
        .zip(&spec.heads)
        .map(|(d, h)| Tensor::new(vec![samples.len(), h.dim], d))
        .collect()
}

/// VA predictions median-filtered along each video, in frame order.
/// `None` when no sample has a video key.
fn filtered_va(samples: &[HeterogeneousSample], va: &[[f64; 2]], window: usize) -> Result<Option<Vec<[f64; 2]>>> {
    let mut videos: BTreeMap<&str, Vec<(u64, usize)>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(k) = &s.sequence_key {
            videos.entry(k.video.as_str()).or_default().push((k.frame, i));
        }
    }
    if videos.is_empty() {
        return Ok(None);
    }
    let mut out = va.to_vec();
    for frames in videos.values_mut() {
        frames.sort_unstable();
        let seq: Vec<Vec<f64>> = frames.iter().map(|&(_, i)| va[i].to_vec()).collect();
        for (&(_, i), f) in frames.iter().zip(median_filter(&seq, window)?) {
            out[i] = [f[0], f[1]];
        }
    }
    Ok(Some(out))
}

/// Metrics for `tasks` (default: every task with labels in `samples`),
/// plus the expression confusion matrix.
pub fn evaluate(
    model: &MultiHeadModel,
    samples: &[HeterogeneousSample],
    tasks: Option<&[Task]>,
) -> Result<(EvalReport, Option<ConfusionMatrix>)> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate"));
    }
    let tasks: Vec<Task> = match tasks {
        Some(t) => t.to_vec(),
        None => [
            (Task::Va, samples.iter().any(|s| s.va.is_some())),
            (Task::Expr, samples.iter().any(|s| s.expr.is_some())),
            (Task::Au, samples.iter().any(|s| s.au.is_some())),
        ]
        .into_iter()
        .filter_map(|(t, present)| present.then_some(t))
        .collect(),
    };
    let spec = model.spec();
    let mut head = BTreeMap::new();
    for &t in &tasks {
        let role = head_role(t)?;
        let h = spec
            .head_index(role)
            .ok_or_else(|| Error::Config(format!("model has no head for task {t:?}")))?;
        head.insert(t, h);
    }
    let outputs = outputs_for(model, samples)?;
    let mut report = EvalReport {
        samples: samples.len(),
        va: None,
        expr: None,
        au: None,
    };
    let mut confusion = None;

    if let Some(&h) = head.get(&Task::Va) {
        let pred: Vec<[f64; 2]> = (0..samples.len()).map(|r| [outputs[h].row(r)[0], outputs[h].row(r)[1]]).collect();
        let labelled: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].va.is_some()).collect();
        if !labelled.is_empty() {
            let truth: Vec<[f64; 2]> = labelled.iter().map(|&i| samples[i].va.unwrap()).collect();
            let pick = |p: &[[f64; 2]]| labelled.iter().map(|&i| p[i]).collect::<Vec<_>>();
            let filtered = filtered_va(samples, &pred, DEFAULT_MEDIAN_WINDOW)?;
            report.va = Some(VaReport {
                labelled: labelled.len(),
                unfiltered: va_metrics(&truth, &pick(&pred))?,
                filtered: filtered.as_deref().map(|f| va_metrics(&truth, &pick(f))).transpose()?,
                median_window: filtered.is_some().then_some(DEFAULT_MEDIAN_WINDOW),
            });
        }
    }
    if let Some(&h) = head.get(&Task::Expr) {
        let classes = spec.heads[h].dim;
        let mut cm = ConfusionMatrix::new(classes);
        for (r, s) in samples.iter().enumerate() {
            if let Some(e) = s.expr {
                cm.add(e, argmax(outputs[h].row(r)))?;
            }
        }
        if cm.total() > 0 {
            report.expr = Some(classification_metrics(&cm)?);
            confusion = Some(cm);
        }
    }
    if let Some(&h) = head.get(&Task::Au) {
        let rows: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].au.is_some()).collect();
        if !rows.is_empty() {
            let probs: Vec<Vec<f64>> = rows.iter().map(|&r| outputs[h].row(r).to_vec()).collect();
            let truth: Vec<Vec<Option<bool>>> = rows.iter().map(|&r| samples[r].au.clone().unwrap()).collect();
            report.au = Some(au_metrics(&threshold(&probs, DEFAULT_AU_THRESHOLD), &truth)?);
        }
    }
    Ok((report, confusion))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    #[serde(default)]
    pub tasks: Option<Vec<Task>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Writes `metrics.json`, `confusion.csv` (when expressions are scored)
/// and the manifest.
pub fn run_eval(config: &EvalConfig) -> Result<EvalReport> {
    let out = config.out.clone().ok_or_else(|| Error::Config("no output directory".into()))?;
    let model = MultiHeadModel::load(&config.checkpoint)?;
    let samples = dataset::load(&config.data)?;
    let (report, cm) = evaluate(&model, &samples, config.tasks.as_deref())?;
    create_dir(&out)?;
    write_json(&out.join("metrics.json"), &report)?;
    if let Some(cm) = cm {
        let p = out.join("confusion.csv");
        std::fs::write(&p, cm.to_csv()).map_err(Error::at(&p))?;
    }
    write_manifest(
        &out,
        "eval",
        config,
        model.spec().seed,
        &[&config.checkpoint, &config.data],
        serde_json::to_value(&report)?,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Zero-shot compound scoring

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Compound profile file; the built-in blends of the domain table
    /// when absent.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub classes: Vec<String>,
    pub predictions: Vec<usize>,
    /// Present when the data has compound ground truth.
    pub metrics: Option<ClassificationMetrics>,
}

/// Writes `scores.csv` (one row per sample and class), `predictions.csv`
/// in input order, `profiles.json`, `metrics.json` when ground truth
/// exists, and the manifest.
pub fn run_zero_shot(config: &ZeroShotConfig) -> Result<ZeroShotResult> {
    let out = config.out.clone().ok_or_else(|| Error::Config("no output directory".into()))?;
    let classes = match &config.profiles {
        Some(p) => load_profiles(p)?,
        None => default_compound_classes(&RelatednessTable::emotion_au_domain(), true)?,
    };
    let names = compound_names(&classes);
    let model = MultiHeadModel::load(&config.checkpoint)?;
    let samples = dataset::load(&config.data)?;
    if samples.is_empty() {
        return Err(Error::Empty("no samples to score"));
    }
    let bundles = bundles_from_outputs(model.spec(), &outputs_for(&model, &samples)?)?;

    create_dir(&out)?;
    let mut scores = csv::Writer::from_path(out.join("scores.csv"))?;
    scores.write_record(["id", "class", "i_au", "f_emo", "d_va", "total"])?;
    let mut preds = csv::Writer::from_path(out.join("predictions.csv"))?;
    preds.write_record(["id", "predicted", "truth"])?;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut cm = ConfusionMatrix::new(classes.len());
    for (s, b) in samples.iter().zip(&bundles) {
        let sc = compound_scores(b, &classes)?;
        for (name, c) in names.iter().zip(&sc) {
            scores.write_record([
                s.id.clone(),
                name.clone(),
                c.i_au.to_string(),
                c.f_emo.to_string(),
                c.d_va.to_string(),
                c.total.to_string(),
            ])?;
        }
        let p = predict_compound(&sc)?;
        predictions.push(p);
        let truth = match s.compound {
            Some(t) if t >= classes.len() => {
                return Err(Error::Data(format!(
                    "sample `{}` has compound class {t}; only {} profiles",
                    s.id,
                    classes.len()
                )))
            }
            Some(t) => {
                cm.add(t, p)?;
                names[t].clone()
            }
            None => String::new(),
        };
        preds.write_record([s.id.clone(), names[p].clone(), truth])?;
    }
    scores.flush()?;
    preds.flush()?;
    let p = out.join("profiles.json");
    std::fs::write(&p, profiles_to_json(&classes)).map_err(Error::at(&p))?;
    let metrics = if cm.total() > 0 {
        let m = classification_metrics(&cm)?;
        write_json(&out.join("metrics.json"), &m)?;
        let p = out.join("confusion.csv");
        std::fs::write(&p, cm.to_csv()).map_err(Error::at(&p))?;
        Some(m)
    } else {
        None
    };
    let result = ZeroShotResult {
        classes: names,
        predictions,
        metrics,
    };
    let mut inputs: Vec<&Path> = vec![&config.checkpoint, &config.data];
    inputs.extend(config.profiles.as_deref());
    write_manifest(
        &out,
        "zero_shot",
        config,
        model.spec().seed,
        &inputs,
        serde_json::json!({ "classes": result.classes, "metrics": result.metrics }),
    )?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub modes: Vec<CouplingMode>,
    pub trunk_widths: Vec<usize>,
    pub feature_dim: usize,
    /// Joint batch size, split in thirds across VA, expression and AU samples.
    pub batch: usize,
    pub threshold: f64,
    pub step: f64,
    pub samples_per_tensor: usize,
    pub floor: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        let c = GradCheckConfig::default();
        Self {
            modes: CouplingMode::ALL.to_vec(),
            trunk_widths: vec![32, 32],
            feature_dim: 12,
            batch: 16,
            threshold: 1e-5,
            step: c.step,
            samples_per_tensor: c.samples_per_tensor,
            floor: c.floor,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCheck {
    pub mode: CouplingMode,
    /// Max relative error of each loss term alone and of the total.
    pub components: BTreeMap<String, f64>,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub modes: Vec<ModeCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn ensure_passed(&self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::Numerical(format!(
                "max relative gradient error {:e} exceeds {:e}",
                self.max_rel_error, self.threshold
            )))
        }
    }
}

/// The mixed batch the check runs on.
pub fn gradcheck_batch(s: &GradcheckSettings) -> Result<Vec<HeterogeneousSample>> {
    let sets = Generator::new(GeneratorSpec::new(s.feature_dim, 0.3, s.seed))?.generate(s.batch, Partition::THIRDS)?;
    Ok(sets.va.into_iter().chain(sets.expr).chain(sets.au).collect())
}

/// Loss-term weightings checked under `mode`: each active term alone,
/// then all together.
pub fn gradcheck_components(mode: CouplingMode) -> Vec<(String, LossWeights)> {
    let mut out = Vec::new();
    let single = |f: &dyn Fn(&mut LossWeights)| {
        let mut w = LossWeights::uniform(0.0);
        f(&mut w);
        w
    };
    for t in [Task::Va, Task::Expr, Task::Au] {
        let name = serde_json::to_value(t).unwrap().as_str().unwrap().to_string();
        out.push((name, single(&|w| {
            w.lambda_per_task.insert(t, 1.0);
        })));
    }
    if mode.uses_dm() {
        out.push(("distr_matching".into(), single(&|w| {
            w.coupling_weights.insert(Coupling::DistrMatching, 1.0);
        })));
    }
    if mode.uses_sca() {
        out.push(("soft_co_annotation".into(), single(&|w| {
            w.coupling_weights.insert(Coupling::SoftCoAnnotation, 1.0);
        })));
    }
    out.push(("total".into(), LossWeights::default()));
    out
}

pub fn run_gradcheck(s: &GradcheckSettings) -> Result<GradcheckReport> {
    if s.modes.is_empty() || s.batch == 0 || s.feature_dim == 0 {
        return Err(Error::Config("gradient check needs modes, a batch and features".into()));
    }
    let table = RelatednessTable::emotion_au_domain();
    let samples = gradcheck_batch(s)?;
    let model = MultiHeadModel::new(ModelSpec::affect(s.feature_dim, s.trunk_widths.clone(), s.seed))?;
    let cfg = GradCheckConfig {
        step: s.step,
        samples_per_tensor: s.samples_per_tensor,
        floor: s.floor,
        seed: s.seed,
    };
    let mut modes = Vec::new();
    let mut max = 0.0f64;
    for &mode in &s.modes {
        let setup = CouplingSetup::new(mode, &table);
        let mut components = BTreeMap::new();
        let mut checked = 0;
        for (name, weights) in gradcheck_components(mode) {
            let (objective, x) = BatchObjective::new(&samples, model.spec(), &setup, &weights)?;
            let r = gradient_check(&model, &x, &objective, &cfg)?;
            max = max.max(r.max_rel_error);
            checked += r.checked;
            components.insert(name, r.max_rel_error);
        }
        modes.push(ModeCheck {
            mode,
            components,
            checked,
        });
    }
    let report = GradcheckReport {
        threshold: s.threshold,
        modes,
        max_rel_error: max,
        passed: max < s.threshold,
    };
    if let Some(out) = &s.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
        write_manifest(out, "gradcheck", s, s.seed, &[], serde_json::to_value(&report)?)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Training samples, split across the three label sets.
    pub n: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub partition: Partition,
    /// Fully labelled held-out samples.
    pub test_n: usize,
    /// Fully labelled samples for empirical relatedness inference.
    pub corpus_n: usize,
    pub frames_per_video: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 6000,
            feature_dim: 32,
            noise_scale: 0.3,
            partition: Partition::THIRDS,
            test_n: 3000,
            corpus_n: 0,
            frames_per_video: None,
            seed: 0,
            out: None,
        }
    }
}

impl SynthConfig {
    pub fn generator(&self) -> Result<Generator> {
        let mut spec = GeneratorSpec::new(self.feature_dim, self.noise_scale, self.seed);
        spec.frames_per_video = self.frames_per_video;
        Generator::new(spec)
    }

    /// Held-out draws use a seed derived from, but distinct from, the
    /// training draw.
    pub fn test_samples(&self, g: &Generator) -> Vec<HeterogeneousSample> {
        relabel(g.draw(self.test_n, epoch_seed(self.seed, 1)), "t")
    }

    pub fn corpus_samples(&self, g: &Generator) -> Vec<HeterogeneousSample> {
        relabel(g.draw(self.corpus_n, epoch_seed(self.seed, 2)), "c")
    }
}

fn relabel(mut samples: Vec<HeterogeneousSample>, prefix: &str) -> Vec<HeterogeneousSample> {
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("{prefix}{i}");
    }
    samples
}

/// Writes `va.csv`, `expr.csv`, `au.csv`, `test.csv`, `corpus.csv` (when
/// requested), a ready-to-run `experiment.json` and the manifest.
pub fn run_generate(config: &SynthConfig) -> Result<ExperimentConfig> {
    let out = config.out.clone().ok_or_else(|| Error::Config("no output directory".into()))?;
    if config.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let g = config.generator()?;
    let sets = g.generate(config.n, config.partition)?;
    create_dir(&out)?;
    let mut train = Vec::new();
    for (name, set) in [("va.csv", &sets.va), ("expr.csv", &sets.expr), ("au.csv", &sets.au)] {
        if !set.is_empty() {
            dataset::save(&out.join(name), set)?;
            train.push(PathBuf::from(name));
        }
    }
    let mut test = None;
    if config.test_n > 0 {
        dataset::save(&out.join("test.csv"), &config.test_samples(&g))?;
        test = Some(PathBuf::from("test.csv"));
    }
    if config.corpus_n > 0 {
        dataset::save(&out.join("corpus.csv"), &config.corpus_samples(&g))?;
    }
    let experiment = ExperimentConfig {
        datasets: DatasetPaths { train, test },
        relatedness: RelatednessSource::Domain,
        model: ModelConfig::default(),
        train: TrainSettings {
            seed: config.seed,
            ..TrainSettings::default()
        },
        preprocess: Preprocess::default(),
        holdout_fraction: default_holdout(),
        out: Some(PathBuf::from("run")),
    };
    write_json(&out.join("experiment.json"), &experiment)?;
    write_manifest(
        &out,
        "generate",
        config,
        config.seed,
        &[],
        serde_json::json!({
            "set_sizes": [sets.va.len(), sets.expr.len(), sets.au.len()],
            "test_size": config.test_n,
            "corpus_size": config.corpus_n,
        }),
    )?;
    Ok(experiment)
}

// ---------------------------------------------------------------------------
// Relatedness inference

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_empirical_threshold")]
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Writes the inferred `relatedness.json` and the manifest; warnings go
/// into the manifest.
pub fn run_infer(config: &InferConfig) -> Result<RelatednessTable> {
    let out = config.out.clone().ok_or_else(|| Error::Config("no output directory".into()))?;
    let corpus = corpus_from(&dataset::load(&config.corpus)?);
    let inferred = infer_empirical(&corpus, config.threshold)?;
    create_dir(&out)?;
    inferred.table.save(&out.join("relatedness.json"))?;
    let warnings: Vec<String> = inferred.warnings.iter().map(|w| format!("{}: {}", w.class, w.message)).collect();
    write_manifest(
        &out,
        "infer",
        config,
        0,
        &[&config.corpus],
        serde_json::json!({ "samples": corpus.samples.len(), "warnings": warnings }),
    )?;
    Ok(inferred.table)
}

/// Reads any of the run configs from JSON.
pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_config(path)
}
