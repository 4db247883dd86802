//! Fine-tuning, two-stage intermediate transfer and the transfer matrix.
//!
//! Every random choice of a run is drawn from a seed derived from the master
//! seed and a label path (see [`crate::experiment::derive_seed`]). Target-side
//! seeds (resample, shuffle order, head initialisation) depend only on the
//! target and the restart index, so a baseline and every transfer into the
//! same target see identical target-side randomness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::{EncodedInput, FeatureExtractor, GradRequest, Model, TaskHead};
use crate::error::{Error, Result};
use crate::experiment::derive_seed;
use crate::tasks::{subsample_limited, Example, Regime, Target, Task, TaskClass};

/// Sums per-example `(loss, grads)` in input order, so the result does not
/// depend on how the items were scheduled across threads.
pub fn reduce_grads(results: Vec<Result<(f64, Vec<Tensor>)>>) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut loss = 0.0;
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for r in results {
        let (l, grads) = r?;
        loss += l;
        if acc.is_empty() {
            acc = grads.into_iter().map(Tensor::into_data).collect();
        } else {
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, y) in a.iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok((loss, acc))
}

/// `p += step * g / n`, with the mean gradient `g / n` first rescaled to
/// global norm `clip` when it is longer.
pub fn apply_update(params: &mut [&mut Tensor], grads: &[Vec<f64>], step: f64, n: usize, clip: Option<f64>) {
    let n = n.max(1) as f64;
    let mut scale = step / n;
    if let Some(c) = clip {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt() / n;
        if norm > c {
            scale *= c / norm;
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g) {
            *x += scale * d;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// Train the head only.
    pub freeze_extractor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            lr: 0.05,
            batch_size: 16,
            max_grad_norm: Some(1.0),
            freeze_extractor: false,
        }
    }
}

/// Shared optimiser settings with per-class epoch counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    pub epochs: BTreeMap<TaskClass, usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            lr: t.lr,
            batch_size: t.batch_size,
            max_grad_norm: t.max_grad_norm,
            epochs: TaskClass::ALL
                .into_iter()
                .map(|c| (c, c.default_epochs()))
                .collect(),
        }
    }
}

impl TrainSettings {
    pub fn for_class(&self, class: TaskClass) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.get(&class).copied().unwrap_or(class.default_epochs()),
            lr: self.lr,
            batch_size: self.batch_size,
            max_grad_norm: self.max_grad_norm,
            freeze_extractor: false,
        }
    }
}

/// How long to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Epochs(usize),
    Steps(usize),
}

fn encode_all(model: &Model, examples: &[Example]) -> Result<Vec<EncodedInput>> {
    examples.iter().map(|e| model.encode(&e.segments)).collect()
}

/// Mini-batch gradient ascent on the log-likelihood. Returns the mean batch
/// loss (negative log-likelihood) of every step.
pub fn train(model: &mut Model, examples: &[Example], cfg: &TrainConfig, schedule: Schedule, shuffle_seed: u64) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch_size must be positive"));
    }
    let total_steps = match schedule {
        Schedule::Epochs(e) => e * examples.len().div_ceil(cfg.batch_size),
        Schedule::Steps(s) => s,
    };
    if total_steps == 0 {
        return Ok(Vec::new());
    }
    if examples.is_empty() {
        return Err(Error::validation("cannot train on an empty dataset"));
    }
    let inputs = encode_all(model, examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(total_steps);
    let req = GradRequest {
        extractor: !cfg.freeze_extractor,
        head: true,
        activations: false,
    };
    for step in 0..total_steps {
        if cursor >= order.len() {
            order = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += batch.len();
        let m: &Model = model;
        let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
            .par_iter()
            .map(|&i| {
                let g = m.example_gradients(&inputs[i], &examples[i].target, req)?;
                Ok((-g.log_likelihood, g.extractor.into_iter().chain(g.head).collect()))
            })
            .collect();
        let (loss, grads) = reduce_grads(results)?;
        let loss = loss / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        let mut params: Vec<&mut Tensor> = if cfg.freeze_extractor {
            model.head.params.iter_mut().collect()
        } else {
            model.fe.params.iter_mut().chain(model.head.params.iter_mut()).collect()
        };
        apply_update(&mut params, &grads, cfg.lr, batch.len(), cfg.max_grad_norm);
    }
    Ok(losses)
}

pub fn predict_all(model: &Model, examples: &[Example]) -> Result<Vec<Target>> {
    examples
        .par_iter()
        .map(|e| model.predict(&model.encode(&e.segments)?))
        .collect()
}

/// Dev-set score of `model` on `task`.
pub fn evaluate(model: &Model, task: &Task) -> Result<f64> {
    task.score(&predict_all(model, &task.dev)?)
}

/// Fixed-epoch fine-tuning followed by dev evaluation.
pub fn fine_tune(model: &mut Model, task: &Task, sample: &[Example], cfg: &TrainConfig, shuffle_seed: u64) -> Result<f64> {
    if model.head.kind != task.head_kind() {
        return Err(Error::validation(format!(
            "head {:?} does not match task {} ({:?})",
            model.head.kind,
            task.id,
            task.head_kind()
        )));
    }
    train(model, sample, cfg, Schedule::Epochs(cfg.epochs), shuffle_seed)?;
    evaluate(model, task)
}

/// `(p_st - p_t) / p_t`.
pub fn relative_transfer_gain(p_st: f64, p_t: f64) -> Result<f64> {
    if p_t == 0.0 {
        return Err(Error::UndefinedGain(format!("p_t = 0 (p_st = {p_st})")));
    }
    Ok((p_st - p_t) / p_t)
}

/// Sample mean and sample standard deviation (`n - 1`); std is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Regimes on the source and target side of a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegimePair {
    pub source: Regime,
    pub target: Regime,
}

impl RegimePair {
    pub fn name(&self) -> String {
        format!("{}-{}", self.source.name(), self.target.name())
    }

    /// Parses `full-full`, `full-limited`, `limited-limited` or
    /// `limited-full`, attaching `limit` and `restarts` to limited sides.
    pub fn parse(s: &str, limit: usize, restarts: usize) -> Result<Self> {
        let side = |x: &str| match x {
            "full" => Ok(Regime::Full),
            "limited" => Ok(Regime::Limited { limit, restarts }),
            _ => Err(Error::validation(format!("unknown regime pair {s:?}"))),
        };
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::validation(format!("unknown regime pair {s:?}")))?;
        Ok(RegimePair {
            source: side(a)?,
            target: side(b)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub regime: String,
    /// `None` for a baseline (no intermediate stage).
    pub source: Option<String>,
    pub target: String,
    pub mean: f64,
    pub std: f64,
    pub restarts: usize,
}

fn sample_for(task: &Task, regime: &Regime, seed: u64) -> Result<Vec<Example>> {
    match regime {
        Regime::Full => Ok(task.train.clone()),
        Regime::Limited { limit, .. } => subsample_limited(&task.train, *limit, seed),
    }
}

/// Restart-`r` seeds for the target side: (resample, shuffle, head init).
fn target_seeds(master: u64, target: &str, r: usize) -> (u64, u64, u64) {
    let r = r.to_string();
    (
        derive_seed(master, &["target", target, &r, "sample"]),
        derive_seed(master, &["target", target, &r, "shuffle"]),
        derive_seed(master, &["target", target, &r, "head"]),
    )
}

/// Stage-2 fine-tuning of `extractor` on `target` for one restart.
fn target_stage(extractor: &FeatureExtractor, target: &Task, regime: &Regime, cfg: &TrainConfig, master: u64, r: usize) -> Result<f64> {
    let (sample_seed, shuffle_seed, head_seed) = target_seeds(master, &target.id, r);
    let sample = sample_for(target, regime, sample_seed)?;
    let head = TaskHead::init(target.head_kind(), extractor.config.d_model, head_seed)?;
    let mut model = Model::new(extractor.clone(), head)?;
    fine_tune(&mut model, target, &sample, cfg, shuffle_seed)
}

/// Stage-1 fine-tuning on `source`; returns the extractor with the source
/// head dropped. A full-regime source ignores `r`.
pub fn source_stage(reference: &FeatureExtractor, source: &Task, regime: &Regime, cfg: &TrainConfig, master: u64, r: usize) -> Result<FeatureExtractor> {
    let r = match regime {
        Regime::Full => "all".to_string(),
        Regime::Limited { .. } => r.to_string(),
    };
    let sample = sample_for(source, regime, derive_seed(master, &["source", &source.id, &r, "sample"]))?;
    let head = TaskHead::init(source.head_kind(), reference.config.d_model, derive_seed(master, &["source", &source.id, &r, "head"]))?;
    let mut model = Model::new(reference.clone(), head)?;
    fine_tune(&mut model, source, &sample, cfg, derive_seed(master, &["source", &source.id, &r, "shuffle"]))?;
    Ok(model.fe)
}

/// Target trained directly from the reference extractor.
pub fn baseline(reference: &FeatureExtractor, target: &Task, regime: &Regime, cfg: &TrainConfig, master: u64) -> Result<(f64, f64, Vec<f64>)> {
    let scores = (0..regime.restarts())
        .map(|r| target_stage(reference, target, regime, cfg, master, r))
        .collect::<Result<Vec<_>>>()?;
    let (m, s) = mean_std(&scores);
    Ok((m, s, scores))
}

/// Two-stage transfer: source fine-tuning, head swap, target fine-tuning.
pub fn stilts_transfer(
    reference: &FeatureExtractor,
    source: &Task,
    target: &Task,
    pair: &RegimePair,
    source_cfg: &TrainConfig,
    target_cfg: &TrainConfig,
    master: u64,
) -> Result<TransferRecord> {
    if source.id == target.id {
        return Err(Error::validation(format!("source and target are both {}", source.id)));
    }
    let restarts = pair.target.restarts();
    let mut shared = None;
    let mut scores = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let fe = match (&pair.source, &shared) {
            (Regime::Full, Some(fe)) => fe,
            _ => {
                shared = Some(source_stage(reference, source, &pair.source, source_cfg, master, r)?);
                shared.as_ref().unwrap()
            }
        };
        scores.push(target_stage(fe, target, &pair.target, target_cfg, master, r)?);
    }
    let (mean, std) = mean_std(&scores);
    Ok(TransferRecord {
        regime: pair.name(),
        source: Some(source.id.clone()),
        target: target.id.clone(),
        mean,
        std,
        restarts,
    })
}

type CellKey = (String, Option<String>, String);

/// Transfer records keyed by `(regime, source, target)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultMatrix {
    records: BTreeMap<CellKey, TransferRecord>,
}

pub const RESULTS_HEADER: [&str; 6] = ["regime", "source", "target", "mean", "std", "restarts"];
pub const NO_SOURCE: &str = "NONE";

impl ResultMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(r: &TransferRecord) -> CellKey {
        (r.regime.clone(), r.source.clone(), r.target.clone())
    }

    /// Inserts a record; an existing record for the same cell must agree.
    pub fn insert(&mut self, rec: TransferRecord) -> Result<()> {
        check_record(&rec).map_err(Error::validation)?;
        let key = Self::key(&rec);
        if let Some(old) = self.records.get(&key) {
            if old != &rec {
                return Err(Error::Ingest(format!(
                    "conflicting records for {} {}->{}: {} vs {}",
                    rec.regime,
                    rec.source.as_deref().unwrap_or(NO_SOURCE),
                    rec.target,
                    old.mean,
                    rec.mean
                )));
            }
            return Ok(());
        }
        self.records.insert(key, rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &TransferRecord> {
        self.records.values()
    }

    pub fn contains(&self, regime: &str, source: Option<&str>, target: &str) -> bool {
        self.records
            .contains_key(&(regime.to_string(), source.map(str::to_string), target.to_string()))
    }

    pub fn get(&self, regime: &str, source: Option<&str>, target: &str) -> Option<&TransferRecord> {
        self.records
            .get(&(regime.to_string(), source.map(str::to_string), target.to_string()))
    }

    pub fn baseline(&self, regime: &str, target: &str) -> Option<&TransferRecord> {
        self.get(regime, None, target)
    }

    pub fn regimes(&self) -> BTreeSet<String> {
        self.records.keys().map(|k| k.0.clone()).collect()
    }

    pub fn targets(&self, regime: &str) -> BTreeSet<String> {
        self.records.keys().filter(|k| k.0 == regime).map(|k| k.2.clone()).collect()
    }

    /// Transfer records (baseline excluded) into `target`.
    pub fn transfers_into<'a>(&'a self, regime: &'a str, target: &'a str) -> impl Iterator<Item = &'a TransferRecord> + 'a {
        self.records
            .values()
            .filter(move |r| r.regime == regime && r.target == target && r.source.is_some())
    }

    /// Every transfer target has a baseline.
    pub fn check_complete(&self) -> Result<()> {
        for r in self.records.values() {
            if r.source.is_some() && self.baseline(&r.regime, &r.target).is_none() {
                return Err(Error::Ingest(format!("missing baseline for target {} in regime {}", r.target, r.regime)));
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: ResultMatrix) -> Result<()> {
        for r in other.records.into_values() {
            self.insert(r)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RESULTS_HEADER)?;
        for r in self.records.values() {
            w.write_record(record_fields(r))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Canonical sorted CSV, written atomically.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::experiment::write_atomic(path, self.to_csv_string()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn parse_csv(text: &str, name: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != RESULTS_HEADER {
            return Err(Error::Parse {
                path: name.to_string(),
                line: 1,
                message: format!("expected header {}", RESULTS_HEADER.join(",")),
            });
        }
        let mut m = ResultMatrix::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Parse {
                path: name.to_string(),
                line,
                message: e.to_string(),
            })?;
            let rec = parse_record(&row).map_err(|message| Error::Parse {
                path: name.to_string(),
                line,
                message,
            })?;
            m.insert(rec)?;
        }
        Ok(m)
    }
}

fn record_fields(r: &TransferRecord) -> [String; 6] {
    [
        r.regime.clone(),
        r.source.clone().unwrap_or_else(|| NO_SOURCE.to_string()),
        r.target.clone(),
        r.mean.to_string(),
        r.std.to_string(),
        r.restarts.to_string(),
    ]
}

fn parse_record(row: &csv::StringRecord) -> std::result::Result<TransferRecord, String> {
    if row.len() != 6 {
        return Err(format!("expected 6 fields, got {}", row.len()));
    }
    let num = |i: usize| row[i].trim().parse::<f64>().map_err(|e| format!("field {}: {e}", RESULTS_HEADER[i]));
    let rec = TransferRecord {
        regime: row[0].trim().to_string(),
        source: match row[1].trim() {
            NO_SOURCE => None,
            s => Some(s.to_string()),
        },
        target: row[2].trim().to_string(),
        mean: num(3)?,
        std: num(4)?,
        restarts: row[5].trim().parse().map_err(|e| format!("field restarts: {e}"))?,
    };
    check_record(&rec)?;
    Ok(rec)
}

fn check_record(rec: &TransferRecord) -> std::result::Result<(), String> {
    if rec.regime.is_empty() || rec.target.is_empty() {
        return Err("empty regime or target".into());
    }
    if !(rec.std >= 0.0) || (rec.restarts == 1 && rec.std != 0.0) {
        return Err(format!("invalid std {} for {} restarts", rec.std, rec.restarts));
    }
    Ok(())
}

/// Reads a results store for resumption. Anything short of a header and
/// complete, newline-terminated records is reported as corruption.
fn read_store(path: &Path) -> Result<ResultMatrix> {
    let text = fs::read_to_string(path)?;
    let corrupt = |line: usize, message: String| Error::CorruptStore {
        path: path.to_path_buf(),
        line,
        message,
    };
    if text.is_empty() {
        return Ok(ResultMatrix::new());
    }
    if !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(corrupt(line, "incomplete final record".into()));
    }
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER.join(",").as_str()) {
        return Err(corrupt(1, "bad header".into()));
    }
    let mut m = ResultMatrix::new();
    for (i, line) in lines.enumerate() {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
        let row = rdr
            .records()
            .next()
            .ok_or_else(|| corrupt(i + 2, "empty line".into()))?
            .map_err(|e| corrupt(i + 2, e.to_string()))?;
        let rec = parse_record(&row).map_err(|e| corrupt(i + 2, e))?;
        m.insert(rec).map_err(|e| corrupt(i + 2, e.to_string()))?;
    }
    Ok(m)
}

/// Inputs of [`run_matrix`].
pub struct MatrixSpec<'a> {
    pub reference: &'a FeatureExtractor,
    pub tasks: &'a [Task],
    pub pairs: &'a [RegimePair],
    pub train: &'a TrainSettings,
    pub master_seed: u64,
    pub workers: usize,
}

enum Job<'a> {
    Baseline(&'a RegimePair, &'a Task),
    Transfer(&'a RegimePair, &'a Task, &'a Task),
}

/// Baselines for every target and every ordered `(source, target)` pair, per
/// regime pair. With a `store`, finished cells are appended as they complete
/// and skipped on a rerun; the finished store is rewritten in sorted order.
pub fn run_matrix(spec: &MatrixSpec, store: Option<&Path>) -> Result<ResultMatrix> {
    if spec.tasks.len() < 2 {
        return Err(Error::validation("run_matrix needs at least two tasks"));
    }
    let mut done = match store {
        Some(p) if p.exists() => read_store(p)?,
        _ => ResultMatrix::new(),
    };
    let mut jobs = Vec::new();
    for pair in spec.pairs {
        let name = pair.name();
        for t in spec.tasks {
            if !done.contains(&name, None, &t.id) {
                jobs.push(Job::Baseline(pair, t));
            }
            for s in spec.tasks {
                if s.id != t.id && !done.contains(&name, Some(&s.id), &t.id) {
                    jobs.push(Job::Transfer(pair, s, t));
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.max(1))
        .build()
        .map_err(|e| Error::validation(e.to_string()))?;

    let writer = match store {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let fresh = !p.exists() || fs::metadata(p)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                f.write_all(format!("{}\n", RESULTS_HEADER.join(",")).as_bytes())?;
                f.sync_data()?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };
    let persist = |rec: &TransferRecord| -> Result<()> {
        if let Some(w) = &writer {
            let mut line = csv::Writer::from_writer(Vec::new());
            line.write_record(record_fields(rec))?;
            let bytes = line.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            let mut f = w.lock().expect("store lock");
            f.write_all(&bytes)?;
            f.sync_data()?;
        }
        Ok(())
    };

    // Stage-1 extractors are shared by every target of a source.
    let mut stage1_keys: Vec<(&RegimePair, &Task, usize)> = Vec::new();
    let mut seen = BTreeSet::new();
    for j in &jobs {
        if let Job::Transfer(pair, s, _) = j {
            let rs = match pair.source {
                Regime::Full => 1,
                Regime::Limited { .. } => pair.target.restarts(),
            };
            for r in 0..rs {
                if seen.insert((regime_key(&pair.source), s.id.clone(), r)) {
                    stage1_keys.push((pair, s, r));
                }
            }
        }
    }
    let stage1: HashMap<(String, String, usize), FeatureExtractor> = pool.install(|| {
        stage1_keys
            .par_iter()
            .map(|(pair, s, r)| {
                let cfg = spec.train.for_class(s.class);
                let fe = source_stage(spec.reference, s, &pair.source, &cfg, spec.master_seed, *r)?;
                Ok(((regime_key(&pair.source), s.id.clone(), *r), fe))
            })
            .collect::<Result<_>>()
    })?;

    let new_records: Vec<TransferRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let rec = match job {
                    Job::Baseline(pair, t) => {
                        let (mean, std, _) = baseline(spec.reference, t, &pair.target, &spec.train.for_class(t.class), spec.master_seed)?;
                        TransferRecord {
                            regime: pair.name(),
                            source: None,
                            target: t.id.clone(),
                            mean,
                            std,
                            restarts: pair.target.restarts(),
                        }
                    }
                    Job::Transfer(pair, s, t) => {
                        let restarts = pair.target.restarts();
                        let cfg = spec.train.for_class(t.class);
                        let scores = (0..restarts)
                            .map(|r| {
                                let r1 = if pair.source == Regime::Full { 0 } else { r };
                                let fe = &stage1[&(regime_key(&pair.source), s.id.clone(), r1)];
                                target_stage(fe, t, &pair.target, &cfg, spec.master_seed, r)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let (mean, std) = mean_std(&scores);
                        TransferRecord {
                            regime: pair.name(),
                            source: Some(s.id.clone()),
                            target: t.id.clone(),
                            mean,
                            std,
                            restarts,
                        }
                    }
                };
                persist(&rec)?;
                Ok(rec)
            })
            .collect::<Result<_>>()
    })?;
    drop(writer);
    for r in new_records {
        done.insert(r)?;
    }
    if let Some(p) = store {
        done.write_csv(p)?;
    }
    Ok(done)
}

fn regime_key(r: &Regime) -> String {
    match r {
        Regime::Full => "full".into(),
        Regime::Limited { limit, restarts } => format!("limited/{limit}/{restarts}"),
    }
}

/// Path of the sidecar written next to CSV outputs.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, HeadKind};
    use crate::tasks::{generate_task, FamilyTemplate, TaskFamily};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 64,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            max_len: 24,
            ..Default::default()
        }
    }

    fn fam(t: FamilyTemplate, lo: u32) -> TaskFamily {
        TaskFamily::from_template("f", t, (lo, lo + 30), 0.0, 1).unwrap()
    }

    #[test]
    fn gain_examples() {
        assert!((relative_transfer_gain(77.6, 60.6).unwrap() - 0.280528).abs() < 1e-6);
        assert_eq!(relative_transfer_gain(42.0, 42.0).unwrap(), 0.0);
        assert!((relative_transfer_gain(45.0, 50.0).unwrap() + 0.1).abs() < 1e-15);
        assert!(matches!(relative_transfer_gain(1.0, 0.0), Err(Error::UndefinedGain(_))));
    }

    #[test]
    fn sample_std_convention() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let cfg = small_cfg();
        let task = generate_task(&fam(FamilyTemplate::MarkerPresence, 0), "a", 20, 10, 1).unwrap();
        let model = Model::new(FeatureExtractor::init(&cfg).unwrap(), TaskHead::init(task.head_kind(), 8, 3).unwrap()).unwrap();
        let before = evaluate(&model, &task).unwrap();
        let mut m2 = model.clone();
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let after = fine_tune(&mut m2, &task, &task.train, &tc, 0).unwrap();
        assert_eq!(m2, model);
        assert_eq!(before, after);
    }

    #[test]
    fn one_example_is_memorised() {
        let cfg = small_cfg();
        let task = generate_task(&fam(FamilyTemplate::MarkerPresence, 0), "a", 1, 1, 4).unwrap();
        let mut model = Model::new(FeatureExtractor::init(&cfg).unwrap(), TaskHead::init(task.head_kind(), 8, 3).unwrap()).unwrap();
        let tc = TrainConfig { epochs: 50, batch_size: 1, ..Default::default() };
        train(&mut model, &task.train, &tc, Schedule::Epochs(tc.epochs), 0).unwrap();
        let preds = predict_all(&model, &task.train).unwrap();
        assert_eq!(preds[0], task.train[0].target);
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let cfg = small_cfg();
        let task = generate_task(&fam(FamilyTemplate::MarkerPresence, 0), "a", 4, 2, 1).unwrap();
        let mut model = Model::new(FeatureExtractor::init(&cfg).unwrap(), TaskHead::init(HeadKind::Span, 8, 0).unwrap()).unwrap();
        assert!(matches!(fine_tune(&mut model, &task, &task.train, &TrainConfig::default(), 0), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_epoch_source_stage_reproduces_the_baseline() {
        let cfg = small_cfg();
        let reference = FeatureExtractor::init(&cfg).unwrap();
        let src = generate_task(&fam(FamilyTemplate::TokenTags, 0), "s", 30, 10, 1).unwrap();
        let tgt = generate_task(&fam(FamilyTemplate::MarkerPresence, 30), "t", 40, 10, 2).unwrap();
        let pair = RegimePair::parse("full-limited", 16, 3).unwrap();
        let tc = TrainConfig { epochs: 2, ..Default::default() };
        let none = TrainConfig { epochs: 0, ..tc.clone() };
        let rec = stilts_transfer(&reference, &src, &tgt, &pair, &none, &tc, 7).unwrap();
        let (m, s, _) = baseline(&reference, &tgt, &pair.target, &tc, 7).unwrap();
        assert_eq!((rec.mean, rec.std), (m, s));
        assert_eq!(rec.restarts, 3);
        let again = stilts_transfer(&reference, &src, &tgt, &pair, &none, &tc, 7).unwrap();
        assert_eq!(again, rec);
    }

    fn matrix_fixture() -> (FeatureExtractor, Vec<Task>) {
        let cfg = small_cfg();
        let tasks = vec![
            generate_task(&fam(FamilyTemplate::MarkerPresence, 0), "a", 12, 6, 1).unwrap(),
            generate_task(&fam(FamilyTemplate::TokenTags, 30), "b", 12, 6, 2).unwrap(),
            generate_task(&fam(FamilyTemplate::KeyedSpan, 0), "c", 12, 6, 3).unwrap(),
        ];
        (FeatureExtractor::init(&cfg).unwrap(), tasks)
    }

    #[test]
    fn matrix_counts_resumes_and_round_trips() {
        let (reference, tasks) = matrix_fixture();
        let pairs = [RegimePair::parse("full-full", 8, 2).unwrap()];
        let settings = TrainSettings {
            epochs: [(TaskClass::Cr, 1), (TaskClass::Qa, 1), (TaskClass::Sl, 1)].into_iter().collect(),
            ..Default::default()
        };
        let spec = MatrixSpec {
            reference: &reference,
            tasks: &tasks,
            pairs: &pairs,
            train: &settings,
            master_seed: 3,
            workers: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let full_path = dir.path().join("full.csv");
        let full = run_matrix(&spec, Some(&full_path)).unwrap();
        assert_eq!(full.len(), 3 + 6);
        full.check_complete().unwrap();
        assert_eq!(ResultMatrix::read_csv(&full_path).unwrap(), full);

        // Interrupted run: keep the header and the first four records.
        let text = fs::read_to_string(&full_path).unwrap();
        let partial: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        let resumed_path = dir.path().join("resumed.csv");
        fs::write(&resumed_path, &partial).unwrap();
        let resumed = run_matrix(&spec, Some(&resumed_path)).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(fs::read(&resumed_path).unwrap(), fs::read(&full_path).unwrap());

        let torn = dir.path().join("torn.csv");
        fs::write(&torn, format!("{}full-full,a,b,1.", partial)).unwrap();
        match run_matrix(&spec, Some(&torn)) {
            Err(Error::CorruptStore { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_is_bit_exact() {
        let mut m = ResultMatrix::new();
        for (i, v) in [0.1 + 0.2, 1.0 / 3.0, 77.6, 1e-300].iter().enumerate() {
            m.insert(TransferRecord {
                regime: "full-limited".into(),
                source: if i == 0 { None } else { Some(format!("s{i}")) },
                target: "t".into(),
                mean: *v,
                std: v / 7.0,
                restarts: 5,
            })
            .unwrap();
        }
        let back = ResultMatrix::parse_csv(&m.to_csv_string().unwrap(), "mem").unwrap();
        assert_eq!(back, m);
    }


    proptest::proptest! {
        #[test]
        fn result_store_reloads_bit_exactly(cells in proptest::collection::vec((0usize..3, 0usize..4, -1e6f64..1e6, 0.0f64..1e3, 1usize..6), 1..20)) {
            let mut m = ResultMatrix::new();
            for (s, t, mean, std, restarts) in cells {
                let std = if restarts == 1 { 0.0 } else { std };
                let source = (s > 0).then(|| format!("s{s}"));
                if m.contains("full-limited", source.as_deref(), &format!("t{t}")) {
                    continue;
                }
                m.insert(TransferRecord {
                    regime: "full-limited".into(),
                    source,
                    target: format!("t{t}"),
                    mean,
                    std,
                    restarts,
                })
                .unwrap();
            }
            let text = m.to_csv_string().unwrap();
            let back = ResultMatrix::parse_csv(&text, "mem").unwrap();
            proptest::prop_assert_eq!(&back, &m);
            proptest::prop_assert_eq!(back.to_csv_string().unwrap(), text);
        }
    }
}
