//! Tasks, synthetic task families, data regimes, metrics and dataset files.
//!
//! A synthetic family fixes a vocabulary window and a labelling rule.
//! Sibling tasks drawn from one family share that rule but never share an
//! input, which gives a ground-truth notion of task similarity.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{self, EncoderConfig, FeatureExtractor, HeadKind, MASK_ID};
use crate::error::{Error, Result};
use crate::transfer::{apply_update, reduce_grads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskClass {
    Cr,
    Qa,
    Sl,
}

impl TaskClass {
    pub const ALL: [TaskClass; 3] = [TaskClass::Cr, TaskClass::Qa, TaskClass::Sl];

    pub fn name(self) -> &'static str {
        match self {
            TaskClass::Cr => "cr",
            TaskClass::Qa => "qa",
            TaskClass::Sl => "sl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cr" => Ok(TaskClass::Cr),
            "qa" => Ok(TaskClass::Qa),
            "sl" => Ok(TaskClass::Sl),
            other => Err(Error::validation(format!("unknown task class {other:?}"))),
        }
    }

    /// Fine-tuning epochs used when nothing else is configured.
    pub fn default_epochs(self) -> usize {
        match self {
            TaskClass::Cr | TaskClass::Qa => 3,
            TaskClass::Sl => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    TokenF1,
    SpanF1,
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSpace {
    Classes { count: usize },
    Real,
    Span,
    Tags { count: usize, background: usize },
}

/// Gold label of one example, also used for predictions.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Real(f64),
    /// Inclusive token span within the passage (second segment).
    Span(usize, usize),
    /// One tag per first-segment token.
    Tags(Vec<usize>),
}

impl Target {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Target::Class(_) => "class",
            Target::Real(_) => "real",
            Target::Span(..) => "span",
            Target::Tags(_) => "tags",
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Target::Class(c) => serde_json::json!(c),
            Target::Real(v) => serde_json::json!(v),
            Target::Span(s, e) => serde_json::json!([s, e]),
            Target::Tags(t) => serde_json::json!(t),
        }
    }

    fn from_json(v: &serde_json::Value, space: &LabelSpace) -> std::result::Result<Self, String> {
        let idx = |v: &serde_json::Value| v.as_u64().map(|x| x as usize).ok_or_else(|| format!("expected index, got {v}"));
        match space {
            LabelSpace::Classes { .. } => idx(v).map(Target::Class),
            LabelSpace::Real => v.as_f64().map(Target::Real).ok_or_else(|| format!("expected real, got {v}")),
            LabelSpace::Span => match v.as_array().map(Vec::as_slice) {
                Some([s, e]) => Ok(Target::Span(idx(s)?, idx(e)?)),
                _ => Err(format!("expected [start,end], got {v}")),
            },
            LabelSpace::Tags { .. } => v
                .as_array()
                .ok_or_else(|| format!("expected tag list, got {v}"))?
                .iter()
                .map(idx)
                .collect::<std::result::Result<_, _>>()
                .map(Target::Tags),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub segments: Vec<Vec<u32>>,
    pub target: Target,
}

impl Example {
    /// Checks the target against the label space and the segment layout.
    pub fn validate(&self, space: &LabelSpace) -> std::result::Result<(), String> {
        if self.segments.is_empty() || self.segments.len() > 2 || self.segments.iter().any(Vec::is_empty) {
            return Err("expected one or two non-empty segments".into());
        }
        match (space, &self.target) {
            (LabelSpace::Classes { count }, Target::Class(c)) if c < count => Ok(()),
            (LabelSpace::Classes { count }, Target::Class(c)) => Err(format!("class {c} outside {count} classes")),
            (LabelSpace::Real, Target::Real(v)) if v.is_finite() => Ok(()),
            (LabelSpace::Span, Target::Span(s, e)) => {
                let p = self.segments.get(1).map_or(0, Vec::len);
                if s <= e && *e < p {
                    Ok(())
                } else {
                    Err(format!("span ({s},{e}) outside passage of {p} tokens"))
                }
            }
            (LabelSpace::Tags { count, .. }, Target::Tags(t)) => {
                if t.len() != self.segments[0].len() {
                    Err(format!("{} tags for {} tokens", t.len(), self.segments[0].len()))
                } else if let Some(bad) = t.iter().find(|&&x| x >= *count) {
                    Err(format!("tag {bad} outside {count} tags"))
                } else {
                    Ok(())
                }
            }
            (s, t) => Err(format!("target kind {} does not fit label space {s:?}", t.kind_name())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: String,
    pub class: TaskClass,
    pub metric: Metric,
    pub label_space: LabelSpace,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl Task {
    pub fn head_kind(&self) -> HeadKind {
        match self.label_space {
            LabelSpace::Classes { count } => HeadKind::Classifier { classes: count },
            LabelSpace::Real => HeadKind::Regressor,
            LabelSpace::Span => HeadKind::Span,
            LabelSpace::Tags { count, .. } => HeadKind::Tagger { tags: count },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = matches!(
            (self.class, self.metric, &self.label_space),
            (TaskClass::Cr, Metric::Accuracy, LabelSpace::Classes { .. })
                | (TaskClass::Cr, Metric::Spearman, LabelSpace::Real)
                | (TaskClass::Qa, Metric::SpanF1, LabelSpace::Span)
                | (TaskClass::Sl, Metric::TokenF1, LabelSpace::Tags { .. })
        );
        if !ok {
            return Err(Error::validation(format!(
                "task {}: metric {:?} and label space {:?} do not fit class {:?}",
                self.id, self.metric, self.label_space, self.class
            )));
        }
        for (split, set) in [("train", &self.train), ("dev", &self.dev)] {
            for (i, ex) in set.iter().enumerate() {
                ex.validate(&self.label_space)
                    .map_err(|m| Error::validation(format!("task {} {split}[{i}]: {m}", self.id)))?;
            }
        }
        Ok(())
    }

    pub fn score(&self, predictions: &[Target]) -> Result<f64> {
        evaluate_metric(self, predictions)
    }
}

/// Data regime for one side of a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Full,
    Limited { limit: usize, restarts: usize },
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::Limited { .. } => "limited",
        }
    }

    pub fn restarts(&self) -> usize {
        match self {
            Regime::Full => 1,
            Regime::Limited { restarts, .. } => *restarts,
        }
    }
}

/// `min(limit, n)` distinct example indices; all of them when `n <= limit`.
pub fn subsample_limited<T: Clone>(data: &[T], limit: usize, restart_seed: u64) -> Result<Vec<T>> {
    Ok(subsample_indices(data.len(), limit, restart_seed)?
        .into_iter()
        .map(|i| data[i].clone())
        .collect())
}

pub fn subsample_indices(n: usize, limit: usize, restart_seed: u64) -> Result<Vec<usize>> {
    if limit == 0 {
        return Err(Error::validation("limit must be positive"));
    }
    if n <= limit {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, limit).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> Result<f64> {
    same_len(gold.len(), pred.len())?;
    if gold.is_empty() {
        return Err(Error::validation("empty evaluation set"));
    }
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

/// Micro-averaged F1 over all tokens whose tag differs from `background`.
pub fn token_f1(gold: &[Vec<usize>], pred: &[Vec<usize>], background: usize) -> Result<f64> {
    same_len(gold.len(), pred.len())?;
    let (mut tp, mut gold_pos, mut pred_pos) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        same_len(g.len(), p.len())?;
        for (a, b) in g.iter().zip(p) {
            gold_pos += (*a != background) as usize;
            pred_pos += (*b != background) as usize;
            tp += (a == b && *a != background) as usize;
        }
    }
    if gold_pos == 0 && pred_pos == 0 {
        return Ok(100.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / pred_pos as f64;
    let r = tp as f64 / gold_pos as f64;
    Ok(100.0 * 2.0 * p * r / (p + r))
}

/// Mean per-example token-overlap F1 of inclusive spans.
pub fn span_f1(gold: &[(usize, usize)], pred: &[(usize, usize)]) -> Result<f64> {
    same_len(gold.len(), pred.len())?;
    if gold.is_empty() {
        return Err(Error::validation("empty evaluation set"));
    }
    let total: f64 = gold
        .iter()
        .zip(pred)
        .map(|(&(gs, ge), &(ps, pe))| {
            let lo = gs.max(ps);
            let hi = ge.min(pe);
            if lo > hi {
                return 0.0;
            }
            let overlap = (hi - lo + 1) as f64;
            let p = overlap / (pe - ps + 1) as f64;
            let r = overlap / (ge - gs + 1) as f64;
            2.0 * p * r / (p + r)
        })
        .sum();
    Ok(100.0 * total / gold.len() as f64)
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &order[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation x100; 0 when either side has no variance.
pub fn spearman(gold: &[f64], pred: &[f64]) -> Result<f64> {
    same_len(gold.len(), pred.len())?;
    if gold.len() < 2 {
        return Ok(0.0);
    }
    let (a, b) = (average_ranks(gold), average_ranks(pred));
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * cov / (va * vb).sqrt())
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::validation(format!("{b} predictions for {a} gold items")));
    }
    Ok(())
}

fn mismatch(t: &Target) -> Error {
    Error::validation(format!("prediction kind {} does not fit the metric", t.kind_name()))
}

/// Scores `predictions` against `gold` examples with the task's metric.
pub fn score_examples(task: &Task, gold: &[Example], predictions: &[Target]) -> Result<f64> {
    same_len(gold.len(), predictions.len())?;
    match task.metric {
        Metric::Accuracy => {
            let g = gold.iter().map(|e| match e.target { Target::Class(c) => Ok(c), ref t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            let p = predictions.iter().map(|t| match t { Target::Class(c) => Ok(*c), t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            accuracy(&g, &p)
        }
        Metric::Spearman => {
            let g = gold.iter().map(|e| match e.target { Target::Real(v) => Ok(v), ref t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            let p = predictions.iter().map(|t| match t { Target::Real(v) => Ok(*v), t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            spearman(&g, &p)
        }
        Metric::SpanF1 => {
            let g = gold.iter().map(|e| match e.target { Target::Span(s, e) => Ok((s, e)), ref t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            let p = predictions.iter().map(|t| match t { Target::Span(s, e) => Ok((*s, *e)), t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            span_f1(&g, &p)
        }
        Metric::TokenF1 => {
            let bg = match task.label_space {
                LabelSpace::Tags { background, .. } => background,
                _ => return Err(Error::validation("token F1 needs a tag label space")),
            };
            let g = gold.iter().map(|e| match &e.target { Target::Tags(t) => Ok(t.clone()), t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            let p = predictions.iter().map(|t| match t { Target::Tags(t) => Ok(t.clone()), t => Err(mismatch(t)) }).collect::<Result<Vec<_>>>()?;
            token_f1(&g, &p, bg)
        }
    }
}

/// Dev-set score of `predictions` (aligned with `task.dev`).
pub fn evaluate_metric(task: &Task, predictions: &[Target]) -> Result<f64> {
    score_examples(task, &task.dev, predictions)
}

/// Labelling rule shared by every task of a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum FamilyRule {
    /// Class 1 iff any marker token occurs.
    MarkerPresence { markers: Vec<u32> },
    /// Score `5 * (marker tokens / length)`.
    MarkerScore { markers: Vec<u32> },
    /// The question token selects which answer tokens form the gold span.
    KeyedSpan {
        keys: Vec<u32>,
        answers: Vec<Vec<u32>>,
        distractor: f64,
    },
    /// Fixed tag per vocabulary token; tag 0 is background.
    TokenTags { tag_of: BTreeMap<u32, usize>, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub name: String,
    pub class: TaskClass,
    /// Half-open window of synthetic token values the family draws from.
    pub window: (u32, u32),
    /// Inclusive range of first-segment (or passage) lengths.
    pub length: (usize, usize),
    pub noise: f64,
    pub rule: FamilyRule,
}

/// Kinds of family that [`TaskFamily::from_template`] can build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyTemplate {
    MarkerPresence,
    MarkerScore,
    KeyedSpan,
    TokenTags,
}

impl FamilyTemplate {
    pub const ALL: [FamilyTemplate; 4] = [
        FamilyTemplate::MarkerPresence,
        FamilyTemplate::MarkerScore,
        FamilyTemplate::KeyedSpan,
        FamilyTemplate::TokenTags,
    ];
}

impl TaskFamily {
    /// Draws a family's rule from `seed` inside the token `window`.
    pub fn from_template(name: &str, template: FamilyTemplate, window: (u32, u32), noise: f64, seed: u64) -> Result<Self> {
        let size = window.1.saturating_sub(window.0) as usize;
        if size < 16 {
            return Err(Error::validation(format!("family window {window:?} is too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<u32> = (window.0..window.1).collect();
        pool.shuffle(&mut rng);
        let (class, length, rule) = match template {
            FamilyTemplate::MarkerPresence => {
                let length = (6, 12);
                // About half the inputs contain a marker.
                let mean_len = (length.0 + length.1) as f64 / 2.0;
                let m = ((size as f64) * (1.0 - 0.5f64.powf(1.0 / mean_len))).round().max(1.0) as usize;
                let mut markers = pool[..m].to_vec();
                markers.sort_unstable();
                (TaskClass::Cr, length, FamilyRule::MarkerPresence { markers })
            }
            FamilyTemplate::MarkerScore => {
                let mut markers = pool[..size / 4].to_vec();
                markers.sort_unstable();
                (TaskClass::Cr, (6, 12), FamilyRule::MarkerScore { markers })
            }
            FamilyTemplate::KeyedSpan => {
                let n_keys = 4;
                let per_key = 3;
                let keys = pool[..n_keys].to_vec();
                let answers = (0..n_keys)
                    .map(|k| pool[n_keys + k * per_key..n_keys + (k + 1) * per_key].to_vec())
                    .collect();
                (
                    TaskClass::Qa,
                    (8, 16),
                    FamilyRule::KeyedSpan {
                        keys,
                        answers,
                        distractor: 0.3,
                    },
                )
            }
            FamilyTemplate::TokenTags => {
                let count = 3;
                let tag_of = (window.0..window.1)
                    .map(|t| {
                        let tag = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..count) };
                        (t, tag)
                    })
                    .collect();
                (TaskClass::Sl, (6, 12), FamilyRule::TokenTags { tag_of, count })
            }
        };
        Ok(TaskFamily {
            name: name.to_string(),
            class,
            window,
            length,
            noise,
            rule,
        })
    }

    pub fn metric(&self) -> Metric {
        match self.rule {
            FamilyRule::MarkerPresence { .. } => Metric::Accuracy,
            FamilyRule::MarkerScore { .. } => Metric::Spearman,
            FamilyRule::KeyedSpan { .. } => Metric::SpanF1,
            FamilyRule::TokenTags { .. } => Metric::TokenF1,
        }
    }

    pub fn label_space(&self) -> LabelSpace {
        match &self.rule {
            FamilyRule::MarkerPresence { .. } => LabelSpace::Classes { count: 2 },
            FamilyRule::MarkerScore { .. } => LabelSpace::Real,
            FamilyRule::KeyedSpan { .. } => LabelSpace::Span,
            FamilyRule::TokenTags { count, .. } => LabelSpace::Tags {
                count: *count,
                background: 0,
            },
        }
    }

    fn draw_example(&self, rng: &mut ChaCha8Rng) -> Example {
        let len = rng.gen_range(self.length.0..=self.length.1);
        let uniform = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> { (0..n).map(|_| rng.gen_range(self.window.0..self.window.1)).collect() };
        match &self.rule {
            FamilyRule::MarkerPresence { markers } => {
                let seg = uniform(rng, len);
                let mut y = seg.iter().any(|t| markers.binary_search(t).is_ok()) as usize;
                if rng.gen_bool(self.noise) {
                    y = 1 - y;
                }
                Example {
                    segments: vec![seg],
                    target: Target::Class(y),
                }
            }
            FamilyRule::MarkerScore { markers } => {
                let seg = uniform(rng, len);
                let hits = seg.iter().filter(|t| markers.binary_search(t).is_ok()).count();
                let mut y = 5.0 * hits as f64 / len as f64;
                if self.noise > 0.0 {
                    y += Normal::new(0.0, self.noise).expect("finite").sample(rng);
                }
                Example {
                    segments: vec![seg],
                    target: Target::Real(y),
                }
            }
            FamilyRule::KeyedSpan { keys, answers, distractor } => {
                let special: HashSet<u32> = keys.iter().chain(answers.iter().flatten()).copied().collect();
                let filler: Vec<u32> = (self.window.0..self.window.1).filter(|t| !special.contains(t)).collect();
                let k = rng.gen_range(0..keys.len());
                let mut passage: Vec<u32> = (0..len).map(|_| *filler.choose(rng).expect("filler")).collect();
                let span_len = rng.gen_range(1..=3usize);
                let start = rng.gen_range(0..=len - span_len);
                for p in start..start + span_len {
                    passage[p] = *answers[k].choose(rng).expect("answers");
                }
                if rng.gen_bool(*distractor) {
                    let other = (k + rng.gen_range(1..keys.len())) % keys.len();
                    let dl = rng.gen_range(1..=2usize);
                    let free: Vec<usize> = (0..=len - dl).filter(|&s| s + dl < start || s > start + span_len).collect();
                    if let Some(&s) = free.choose(rng) {
                        for p in s..s + dl {
                            passage[p] = *answers[other].choose(rng).expect("answers");
                        }
                    }
                }
                Example {
                    segments: vec![vec![keys[k]], passage],
                    target: Target::Span(start, start + span_len - 1),
                }
            }
            FamilyRule::TokenTags { tag_of, count } => {
                let seg = uniform(rng, len);
                let tags = seg
                    .iter()
                    .map(|t| {
                        let tag = tag_of[t];
                        if rng.gen_bool(self.noise) {
                            (tag + rng.gen_range(1..*count)) % count
                        } else {
                            tag
                        }
                    })
                    .collect();
                Example {
                    segments: vec![seg],
                    target: Target::Tags(tags),
                }
            }
        }
    }
}

/// Generates several tasks from one family jointly so that no input appears
/// twice across any of their train or dev sets.
pub fn generate_siblings(family: &TaskFamily, ids: &[String], n_train: usize, n_dev: usize, seed: u64) -> Result<Vec<Task>> {
    if n_train == 0 || n_dev == 0 {
        return Err(Error::validation("n_train and n_dev must be positive"));
    }
    let mut seen: HashSet<Vec<Vec<u32>>> = HashSet::new();
    let mut tasks = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let need = n_train + n_dev;
        let mut examples = Vec::with_capacity(need);
        let mut attempts = 0;
        while examples.len() < need {
            attempts += 1;
            if attempts > 100 * need + 1000 {
                return Err(Error::validation(format!(
                    "family {} cannot produce {need} distinct inputs for {id}",
                    family.name
                )));
            }
            let ex = family.draw_example(&mut rng);
            if seen.insert(ex.segments.clone()) {
                examples.push(ex);
            }
        }
        let dev = examples.split_off(n_train);
        let task = Task {
            id: id.clone(),
            class: family.class,
            metric: family.metric(),
            label_space: family.label_space(),
            train: examples,
            dev,
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn generate_task(family: &TaskFamily, id: &str, n_train: usize, n_dev: usize, seed: u64) -> Result<Task> {
    Ok(generate_siblings(family, &[id.to_string()], n_train, n_dev, seed)?.remove(0))
}

/// Number of synthetic token values before they wrap in the encoder.
pub fn token_space(cfg: &EncoderConfig) -> u32 {
    (cfg.vocab_size - encoder::RESERVED_IDS) as u32
}

/// One family per entry in `templates`, each in its own disjoint window.
pub fn roster(templates: &[FamilyTemplate], cfg: &EncoderConfig, noise: f64, seed: u64) -> Result<Vec<TaskFamily>> {
    let space = token_space(cfg);
    let width = space / templates.len().max(1) as u32;
    templates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let lo = i as u32 * width;
            TaskFamily::from_template(
                &format!("f{i}"),
                *t,
                (lo, lo + width),
                noise,
                seed.wrapping_add(i as u64 * 7919),
            )
        })
        .collect()
}

/// Tokens in dataset files may be integers or words; words are hashed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawToken {
    Id(u32),
    Word(String),
}

/// 32-bit FNV-1a.
pub fn hash_word(w: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in w.as_bytes() {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    segments: Vec<Vec<RawToken>>,
    target: serde_json::Value,
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let line = serde_json::json!({"segments": ex.segments, "target": ex.target.to_json()});
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    crate::experiment::write_atomic(path, out.as_bytes())
}

/// Reads a JSON-lines dataset, validating every example against `space`.
pub fn read_examples(path: &Path, space: &LabelSpace) -> Result<Vec<Example>> {
    let file = fs::File::open(path)?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: name.clone(),
            line: i + 1,
            message,
        };
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let segments = raw
            .segments
            .into_iter()
            .map(|s| {
                s.into_iter()
                    .map(|t| match t {
                        RawToken::Id(v) => v,
                        RawToken::Word(w) => hash_word(&w),
                    })
                    .collect()
            })
            .collect();
        let target = Target::from_json(&raw.target, space).map_err(err)?;
        let ex = Example { segments, target };
        ex.validate(space).map_err(err)?;
        out.push(ex);
    }
    Ok(out)
}

/// Per-task manifest: metadata plus paths of the train and dev files,
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub id: String,
    pub class: TaskClass,
    pub metric: Metric,
    pub label_space: LabelSpace,
    pub train: PathBuf,
    pub dev: PathBuf,
}

/// Writes `<dir>/<id>.json`, `<id>.train.jsonl` and `<id>.dev.jsonl`.
pub fn store_task(dir: &Path, task: &Task) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let train = PathBuf::from(format!("{}.train.jsonl", task.id));
    let dev = PathBuf::from(format!("{}.dev.jsonl", task.id));
    write_examples(&dir.join(&train), &task.train)?;
    write_examples(&dir.join(&dev), &task.dev)?;
    let manifest = TaskManifest {
        id: task.id.clone(),
        class: task.class,
        metric: task.metric,
        label_space: task.label_space.clone(),
        train,
        dev,
    };
    let path = dir.join(format!("{}.json", task.id));
    crate::experiment::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn load_task(manifest_path: &Path) -> Result<Task> {
    let name = manifest_path.display().to_string();
    let text = fs::read_to_string(manifest_path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: name.clone(),
        message: e.to_string(),
    })?;
    for field in ["id", "class", "metric", "label_space", "train", "dev"] {
        if value.get(field).is_none() {
            return Err(Error::Manifest {
                path: name,
                message: format!("missing field {field:?}"),
            });
        }
    }
    let m: TaskManifest = serde_json::from_value(value).map_err(|e| Error::Manifest {
        path: name.clone(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let task = Task {
        train: read_examples(&base.join(&m.train), &m.label_space)?,
        dev: read_examples(&base.join(&m.dev), &m.label_space)?,
        id: m.id,
        class: m.class,
        metric: m.metric,
        label_space: m.label_space,
    };
    task.validate().map_err(|e| Error::Manifest {
        path: name,
        message: e.to_string(),
    })?;
    Ok(task)
}

/// Loads every `*.json` manifest in `dir`, sorted by task id.
pub fn load_task_dir(dir: &Path) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p.to_string_lossy().ends_with(".manifest.json")
                && p.file_name().is_some_and(|n| n != crate::experiment::EXPERIMENT_MANIFEST)
        })
        .collect();
    entries.sort();
    for p in entries {
        tasks.push(load_task(&p)?);
    }
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(tasks)
}

/// Bigram Markov corpus over the full synthetic token space.
pub fn markov_corpus(token_space: u32, n_sentences: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successors: Vec<Vec<u32>> = (0..token_space)
        .map(|_| (0..6).map(|_| rng.gen_range(0..token_space)).collect())
        .collect();
    (0..n_sentences)
        .map(|_| {
            let len = rng.gen_range(8..=20);
            let mut t = rng.gen_range(0..token_space);
            let mut s = Vec::with_capacity(len);
            for _ in 0..len {
                s.push(t);
                t = if rng.gen_bool(0.85) {
                    *successors[t as usize].choose(&mut rng).expect("successors")
                } else {
                    rng.gen_range(0..token_space)
                };
            }
            s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 16,
            lr: 0.1,
            mask_prob: 0.15,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

fn masked_positions(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut m: Vec<usize> = (0..len).filter(|_| rng.gen_bool(p)).collect();
    if m.is_empty() {
        m.push(rng.gen_range(0..len));
    }
    m
}

/// Masked-token loss of one sentence and, if `grad`, its gradients for the
/// extractor followed by the prediction head.
fn mlm_example(
    fe: &FeatureExtractor,
    head: &[Tensor],
    sentence: &[u32],
    masked: &[usize],
    grad: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let cfg = &fe.config;
    let mut input = encoder::encode_input(cfg, &[sentence.to_vec()])?;
    let offset = input.segments[0].start;
    let gold: Vec<usize> = masked.iter().map(|&i| input.ids[offset + i]).collect();
    for &i in masked {
        input.ids[offset + i] = MASK_ID;
    }
    let mut tape = Tape::new();
    let p = encoder::bind_extractor(&mut tape, fe, grad);
    let hw = if grad { tape.param(head[0].clone()) } else { tape.constant(head[0].clone()) };
    let hb = if grad { tape.param(head[1].clone()) } else { tape.constant(head[1].clone()) };
    let fv = encoder::features_on_tape(&mut tape, cfg, &p, &input)?;
    let mut rows = Vec::with_capacity(masked.len());
    for &i in masked {
        rows.push(tape.slice_rows(fv.output, offset + i, 1)?);
    }
    let mut logits = Vec::with_capacity(rows.len());
    for r in rows {
        let z = tape.matmul(r, hw)?;
        logits.push(tape.add_row(z, hb)?);
    }
    let mut lls = Vec::with_capacity(logits.len());
    for (z, &g) in logits.into_iter().zip(&gold) {
        let lp = tape.log_softmax(z);
        lls.push(tape.pick(lp, &[(0, g)])?);
    }
    let all = tape.concat_cols(&lls)?;
    let mean = tape.mean(all);
    let loss = tape.scale(mean, -1.0);
    let value = tape.value(loss).data()[0];
    if !grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = p
        .iter()
        .chain([&hw, &hb])
        .map(|v| tape.grad(*v).cloned().expect("on loss path"))
        .collect();
    Ok((value, grads))
}

/// Output of [`pretrain_reference_model`]. The masked-token head is kept
/// only for measuring held-out loss; it is never used downstream.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub extractor: FeatureExtractor,
    pub mlm_head: Vec<Tensor>,
    pub report: PretrainReport,
}

/// Masked-token head before any training step.
pub fn initial_mlm_head(enc: &EncoderConfig, cfg: &PretrainConfig) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6c_6d5f_6865_6164);
    let (d, v) = (enc.d_model, enc.vocab_size);
    Ok(vec![
        Tensor::new(d, v, (0..d * v).map(|_| rng.gen_range(-0.1..0.1)).collect())?,
        Tensor::zeros(1, v),
    ])
}

/// Masked-token pretraining of a freshly initialised extractor.
/// `steps = 0` returns the initialisation unchanged.
pub fn pretrain_reference_model(corpus: &[Vec<u32>], enc: &EncoderConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    if corpus.is_empty() {
        return Err(Error::validation("pretraining corpus is empty"));
    }
    let mut fe = FeatureExtractor::init(enc)?;
    let mut head = initial_mlm_head(enc, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(usize, Vec<usize>)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..corpus.len());
                let m = masked_positions(corpus[i].len(), cfg.mask_prob, &mut rng);
                (i, m)
            })
            .collect();
        let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
            .par_iter()
            .map(|(i, m)| mlm_example(&fe, &head, &corpus[*i], m, true))
            .collect();
        let (loss, grads) = reduce_grads(results)?;
        let loss = loss / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        let mut params: Vec<&mut Tensor> = fe.params.iter_mut().chain(head.iter_mut()).collect();
        apply_update(&mut params, &grads, -cfg.lr, cfg.batch_size, cfg.max_grad_norm);
    }
    let initial_loss = losses.first().copied().unwrap_or(f64::NAN);
    let tail = &losses[losses.len().saturating_sub(20)..];
    let final_loss = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    Ok(Pretrained {
        extractor: fe,
        mlm_head: head,
        report: PretrainReport {
            initial_loss,
            final_loss,
            losses,
        },
    })
}

/// Mean masked-token loss over `sentences`, with masks drawn from `seed`.
pub fn heldout_mlm_loss(fe: &FeatureExtractor, head: &[Tensor], sentences: &[Vec<u32>], seed: u64) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::validation("no held-out sentences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in sentences {
        let m = masked_positions(s.len(), 0.15, &mut rng);
        total += mlm_example(fe, head, s, &m, false)?.0;
    }
    Ok(total / sentences.len() as f64)
}
