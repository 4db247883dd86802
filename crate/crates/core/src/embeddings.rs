//! Task embeddings: averaged reference-model representations (TextEmb) and
//! diagonal Fisher information of a fine-tuned model (TaskEmb).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tensor};
use crate::encoder::{component_slices, forward_features, Component, EncodedInput, FeatureExtractor, GradRequest, HeadKind, Model, TaskHead};
use crate::error::{Error, Result};
use crate::experiment::{derive_seed, write_atomic};
use crate::tasks::{Example, Target, Task};
use crate::transfer::{train, Schedule, TrainConfig};

pub const TEXT: &str = "text";
pub const ACTIVATIONS: &str = "activations";

/// Component names of a TaskEmb, in fusion order.
pub const TASKEMB_COMPONENTS: [&str; 5] = ["token_embeddings", "attention", "feed_forward", "layer_output", ACTIVATIONS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    TaskEmb,
    TextEmb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::TaskEmb => "taskemb",
            Method::TextEmb => "textemb",
        }
    }
}

/// Mean over token positions of the final-layer vectors, then over examples.
pub fn text_emb(reference: &FeatureExtractor, examples: &[Example]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::validation("text embedding of an empty dataset"));
    }
    let d = reference.config.d_model;
    let per_example: Vec<Vec<f64>> = examples
        .par_iter()
        .map(|e| {
            let input = crate::encoder::encode_input(&reference.config, &e.segments)?;
            let t = forward_features(reference, &input)?.tokens;
            Ok(column_means(&t))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; d];
    for h in &per_example {
        for (o, v) in out.iter_mut().zip(h) {
            *o += v;
        }
    }
    let n = examples.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (a, v) in m.iter_mut().zip(t.row_slice(r)) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= t.rows() as f64);
    m
}

/// Which labels the Fisher averages over.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FisherMode {
    /// Training labels.
    #[default]
    Empirical,
    /// `samples` labels per example drawn from the model's own predictive
    /// distribution.
    Expected { samples: usize, seed: u64 },
}

/// Draws a label from the model's predictive distribution given raw head
/// outputs.
pub fn sample_target(head: &HeadKind, out: &Tensor, rng: &mut ChaCha8Rng) -> Target {
    let categorical = |row: &[f64], rng: &mut ChaCha8Rng| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        row.len() - 1
    };
    match head {
        HeadKind::Classifier { .. } => Target::Class(categorical(softmax_rows(out).row_slice(0), rng)),
        HeadKind::Regressor => Target::Real(out.data()[0] + Normal::new(0.0, 1.0).expect("unit").sample(rng)),
        HeadKind::Span => {
            let cols = softmax_rows(&transpose2(out));
            let s = categorical(cols.row_slice(0), rng);
            let e = categorical(cols.row_slice(1), rng);
            Target::Span(s, e)
        }
        HeadKind::Tagger { .. } => {
            let p = softmax_rows(out);
            Target::Tags((0..p.rows()).map(|r| categorical(p.row_slice(r), rng)).collect())
        }
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut d = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = t.get(i, j);
        }
    }
    Tensor::new(c, r, d).expect("sized")
}

/// The labels whose gradients enter the Fisher for example `i`.
fn labels_for(model: &Model, input: &EncodedInput, ex: &Example, i: usize, mode: FisherMode) -> Result<Vec<Target>> {
    match mode {
        FisherMode::Empirical => Ok(vec![ex.target.clone()]),
        FisherMode::Expected { samples, seed } => {
            if samples == 0 {
                return Err(Error::validation("expected Fisher needs at least one sample"));
            }
            let out = model.head_output(input)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["fisher", &i.to_string()]));
            Ok((0..samples).map(|_| sample_target(&model.head.kind, &out, &mut rng)).collect())
        }
    }
}

/// Squared-gradient sums of one example (over its labels) and the label count.
fn example_fisher(model: &Model, ex: &Example, i: usize, mode: FisherMode, req: GradRequest) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let input = model.encode(&ex.segments)?;
    let labels = labels_for(model, &input, ex, i, mode)?;
    let mut params = Vec::new();
    let mut acts = Vec::new();
    for y in &labels {
        let g = model.example_gradients(&input, y, req)?;
        if req.extractor {
            if params.is_empty() {
                params = vec![0.0; model.fe.num_params()];
            }
            let mut at = 0;
            for t in &g.extractor {
                for v in t.data() {
                    params[at] += v * v;
                    at += 1;
                }
            }
        }
        if let Some(a) = g.activations {
            let sq: Vec<f64> = a.data().iter().map(|v| v * v).collect();
            let m = column_means(&Tensor::new(a.rows(), a.cols(), sq)?);
            if acts.is_empty() {
                acts = vec![0.0; m.len()];
            }
            for (x, v) in acts.iter_mut().zip(m) {
                *x += v;
            }
        }
    }
    Ok((params, acts, labels.len()))
}

/// Diagonal Fisher over every extractor parameter (flattened layout order)
/// and over the final-layer activations: the mean over examples (and
/// sampled labels) of squared log-likelihood gradients.
pub fn fisher_diagonals(model: &Model, examples: &[Example], mode: FisherMode, params: bool, activations: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::validation("Fisher of an empty dataset"));
    }
    let req = GradRequest {
        extractor: params,
        head: false,
        activations,
    };
    let parts: Vec<(Vec<f64>, Vec<f64>, usize)> = examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| example_fisher(model, e, i, mode, req))
        .collect::<Result<_>>()?;
    let mut p = if params { vec![0.0; model.fe.num_params()] } else { Vec::new() };
    let mut a = if activations { vec![0.0; model.fe.config.d_model] } else { Vec::new() };
    let mut count = 0usize;
    for (pp, aa, n) in parts {
        for (x, v) in p.iter_mut().zip(&pp) {
            *x += v;
        }
        for (x, v) in a.iter_mut().zip(&aa) {
            *x += v;
        }
        count += n;
    }
    let n = count as f64;
    p.iter_mut().for_each(|x| *x /= n);
    a.iter_mut().for_each(|x| *x /= n);
    Ok((p, a))
}

/// Splits a flattened extractor vector by component and averages the
/// congruent per-layer slices of repeated components.
pub fn layer_average(fe: &FeatureExtractor, flat: &[f64]) -> Result<BTreeMap<Component, Vec<f64>>> {
    if flat.len() != fe.num_params() {
        return Err(Error::validation(format!(
            "vector of {} entries for {} parameters",
            flat.len(),
            fe.num_params()
        )));
    }
    Ok(component_slices(&fe.config)
        .into_iter()
        .map(|(c, ranges)| {
            let mut avg = vec![0.0; ranges[0].len()];
            for r in &ranges {
                for (a, v) in avg.iter_mut().zip(&flat[r.clone()]) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= ranges.len() as f64);
            (c, avg)
        })
        .collect())
}

pub fn fisher_diag_params(model: &Model, examples: &[Example], mode: FisherMode) -> Result<BTreeMap<Component, Vec<f64>>> {
    let (flat, _) = fisher_diagonals(model, examples, mode, true, false)?;
    layer_average(&model.fe, &flat)
}

pub fn fisher_diag_activations(model: &Model, examples: &[Example], mode: FisherMode) -> Result<Vec<f64>> {
    Ok(fisher_diagonals(model, examples, mode, false, true)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVector {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ComponentVector {
    pub fn new(values: Vec<f64>) -> Self {
        ComponentVector {
            dim: values.len(),
            values,
        }
    }
}

/// Named per-component vectors of one task. Serialises to canonical JSON
/// (fixed field order, sorted component names).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub task: String,
    pub model_hash: String,
    pub method: Method,
    pub components: BTreeMap<String, ComponentVector>,
    pub config_hash: String,
}

impl TaskEmbedding {
    pub fn component(&self, name: &str) -> Result<&[f64]> {
        self.components
            .get(name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| Error::Comparability(format!("{} has no {name} component", self.task)))
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_canonical_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let e: TaskEmbedding = serde_json::from_str(&fs::read_to_string(path)?)?;
        for (name, c) in &e.components {
            if c.dim != c.values.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    message: format!("component {name} declares dim {} but has {} values", c.dim, c.values.len()),
                });
            }
        }
        Ok(e)
    }

    /// Same reference model and configuration as `other`.
    pub fn check_comparable(&self, other: &TaskEmbedding) -> Result<()> {
        if self.model_hash != other.model_hash {
            return Err(Error::Comparability(format!("{} and {} come from different models", self.task, other.task)));
        }
        if self.config_hash != other.config_hash {
            return Err(Error::Comparability(format!("{} and {} use different configurations", self.task, other.task)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbConfig {
    pub train: TrainConfig,
    pub fisher: FisherMode,
}

impl Default for TaskEmbConfig {
    fn default() -> Self {
        TaskEmbConfig {
            train: TrainConfig::default(),
            fisher: FisherMode::Empirical,
        }
    }
}

/// Fine-tunes a copy of `reference` on the task's full training set.
pub fn fine_tune_for_embedding(reference: &FeatureExtractor, task: &Task, cfg: &TaskEmbConfig, master: u64) -> Result<Model> {
    let head = TaskHead::init(task.head_kind(), reference.config.d_model, derive_seed(master, &["taskemb", &task.id, "head"]))?;
    let mut model = Model::new(reference.clone(), head)?;
    train(&mut model, &task.train, &cfg.train, Schedule::Epochs(cfg.train.epochs), derive_seed(master, &["taskemb", &task.id, "shuffle"]))?;
    Ok(model)
}

/// Fisher components of an already fine-tuned model plus the reference
/// model's text component.
pub fn assemble_task_emb(reference: &FeatureExtractor, tuned: &Model, task: &Task, mode: FisherMode, config_hash: &str) -> Result<TaskEmbedding> {
    let (flat, acts) = fisher_diagonals(tuned, &task.train, mode, true, true)?;
    let mut components: BTreeMap<String, ComponentVector> = layer_average(&tuned.fe, &flat)?
        .into_iter()
        .map(|(c, v)| (c.name().to_string(), ComponentVector::new(v)))
        .collect();
    components.insert(ACTIVATIONS.to_string(), ComponentVector::new(acts));
    components.insert(TEXT.to_string(), ComponentVector::new(text_emb(reference, &task.train)?));
    Ok(TaskEmbedding {
        task: task.id.clone(),
        model_hash: reference.hash(),
        method: Method::TaskEmb,
        components,
        config_hash: config_hash.to_string(),
    })
}

pub fn task_emb(reference: &FeatureExtractor, task: &Task, cfg: &TaskEmbConfig, master: u64, config_hash: &str) -> Result<TaskEmbedding> {
    let tuned = fine_tune_for_embedding(reference, task, cfg, master)?;
    assemble_task_emb(reference, &tuned, task, cfg.fisher, config_hash)
}

pub fn text_task_emb(reference: &FeatureExtractor, task: &Task, config_hash: &str) -> Result<TaskEmbedding> {
    let mut components = BTreeMap::new();
    components.insert(TEXT.to_string(), ComponentVector::new(text_emb(reference, &task.train)?));
    Ok(TaskEmbedding {
        task: task.id.clone(),
        model_hash: reference.hash(),
        method: Method::TextEmb,
        components,
        config_hash: config_hash.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub task: String,
    pub method: Method,
    pub model_hash: String,
    pub file: PathBuf,
}

/// Directory of embedding files plus `index.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LibraryIndex {
    pub entries: Vec<LibraryEntry>,
}

pub const INDEX_FILE: &str = "index.json";

pub fn embedding_file_name(task: &str, method: Method) -> String {
    format!("{task}.{}.json", method.name())
}

impl LibraryIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(INDEX_FILE);
        if !p.exists() {
            return Ok(LibraryIndex::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    /// Writes `emb` and records it, replacing any entry for the same
    /// `(task, model, method)`.
    pub fn add(dir: &Path, emb: &TaskEmbedding) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let file = PathBuf::from(embedding_file_name(&emb.task, emb.method));
        emb.write(&dir.join(&file))?;
        let mut idx = Self::load(dir)?;
        idx.entries
            .retain(|e| !(e.task == emb.task && e.method == emb.method && e.model_hash == emb.model_hash));
        idx.entries.push(LibraryEntry {
            task: emb.task.clone(),
            method: emb.method,
            model_hash: emb.model_hash.clone(),
            file: file.clone(),
        });
        idx.entries.sort_by(|a, b| (&a.task, a.method.name()).cmp(&(&b.task, b.method.name())));
        write_atomic(&dir.join(INDEX_FILE), (serde_json::to_string_pretty(&idx)? + "\n").as_bytes())?;
        Ok(dir.join(file))
    }

    /// Every embedding of `method` listed in the index of `dir`.
    pub fn load_embeddings(dir: &Path, method: Method) -> Result<Vec<TaskEmbedding>> {
        let idx = Self::load(dir)?;
        idx.entries
            .iter()
            .filter(|e| e.method == method)
            .map(|e| TaskEmbedding::read(&dir.join(&e.file)))
            .collect()
    }
}
