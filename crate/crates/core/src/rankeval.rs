//! Source-task rankings, rank fusion, ranking metrics and aggregation of
//! transfer tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{TaskEmbedding, TASKEMB_COMPONENTS, TEXT};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::experiment::write_atomic;
use crate::tasks::{Task, TaskClass};
use crate::transfer::{relative_transfer_gain, train, ResultMatrix, Schedule, TrainConfig};

/// Reciprocal rank fusion constant.
pub const RRF_K: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub source: String,
    pub score: f64,
    pub rank: f64,
}

/// Sources ordered by descending score; tied scores share the mean of their
/// positional ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub target: String,
    pub entries: Vec<RankEntry>,
}

impl Ranking {
    /// Ranks `(source, score)` pairs, dropping the target itself. Equal
    /// scores are listed by source id.
    pub fn from_scores(target: &str, scores: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut s: Vec<(String, f64)> = scores.into_iter().filter(|(src, _)| src != target).collect();
        if let Some((src, _)) = s.iter().find(|(_, v)| v.is_nan()) {
            return Err(Error::validation(format!("NaN score for source {src}")));
        }
        let mut seen = BTreeSet::new();
        for (src, _) in &s {
            if !seen.insert(src.as_str()) {
                return Err(Error::validation(format!("source {src} scored twice")));
            }
        }
        s.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut entries = Vec::with_capacity(s.len());
        let mut i = 0;
        while i < s.len() {
            let mut j = i + 1;
            while j < s.len() && s[j].1 == s[i].1 {
                j += 1;
            }
            // Positions i+1..=j share their mean.
            let rank = (i + 1 + j) as f64 / 2.0;
            for (src, score) in &s[i..j] {
                entries.push(RankEntry {
                    source: src.clone(),
                    score: *score,
                    rank,
                });
            }
            i = j;
        }
        Ok(Ranking {
            target: target.to_string(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank_of(&self, source: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.source == source).map(|e| e.rank)
    }

    pub fn sources(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.source.as_str()).collect()
    }

    pub fn top(&self) -> Option<&str> {
        self.entries.first().map(|e| e.source.as_str())
    }

    /// Keeps only `keep` and re-ranks by the original scores.
    pub fn restrict(&self, keep: &BTreeSet<String>) -> Result<Ranking> {
        Ranking::from_scores(
            &self.target,
            self.entries
                .iter()
                .filter(|e| keep.contains(&e.source))
                .map(|e| (e.source.clone(), e.score)),
        )
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Comparability(format!("vectors of dimension {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Ranks library entries by cosine similarity of one component to the
/// target's.
pub fn rank_by_cosine(target: &TaskEmbedding, library: &[TaskEmbedding], component: &str) -> Result<Ranking> {
    let t = target.component(component)?;
    let scores = library
        .iter()
        .filter(|e| e.task != target.task)
        .map(|e| {
            target.check_comparable(e)?;
            Ok((e.task.clone(), cosine(t, e.component(component)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ranking::from_scores(&target.task, scores)
}

/// Summed in ascending rank order so the score does not depend on the order
/// the components are listed in.
pub fn rrf_score(ranks: &[f64]) -> f64 {
    let mut r = ranks.to_vec();
    r.sort_by(f64::total_cmp);
    r.iter().map(|r| 1.0 / (RRF_K + r)).sum()
}

/// Fuses rankings of the same sources by `sum 1 / (60 + rank)`.
pub fn rrf_fuse(target: &str, rankings: &[Ranking]) -> Result<Ranking> {
    let first = rankings
        .first()
        .ok_or_else(|| Error::validation("nothing to fuse"))?;
    let sources: BTreeSet<&str> = first.sources().into_iter().collect();
    let mut fused = Vec::with_capacity(sources.len());
    for s in &sources {
        let ranks = rankings
            .iter()
            .map(|r| {
                r.rank_of(s)
                    .ok_or_else(|| Error::validation(format!("source {s} missing from a ranking for {}", r.target)))
            })
            .collect::<Result<Vec<_>>>()?;
        fused.push((s.to_string(), rrf_score(&ranks)));
    }
    for r in &rankings[1..] {
        if let Some(extra) = r.sources().into_iter().find(|s| !sources.contains(s)) {
            return Err(Error::validation(format!("source {extra} missing from a ranking for {}", first.target)));
        }
    }
    Ranking::from_scores(target, fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankMethod {
    #[serde(rename = "taskemb")]
    TaskEmb,
    #[serde(rename = "textemb")]
    TextEmb,
    #[serde(rename = "text+task")]
    TextTask,
    #[serde(rename = "datasize")]
    DataSize,
    #[serde(rename = "curvegrad")]
    CurveGrad,
}

impl RankMethod {
    pub const ALL: [RankMethod; 5] = [
        RankMethod::TaskEmb,
        RankMethod::TextEmb,
        RankMethod::TextTask,
        RankMethod::DataSize,
        RankMethod::CurveGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RankMethod::TaskEmb => "taskemb",
            RankMethod::TextEmb => "textemb",
            RankMethod::TextTask => "text+task",
            RankMethod::DataSize => "datasize",
            RankMethod::CurveGrad => "curvegrad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ranking method {s:?}")))
    }

    /// Embedding components fused by this method (empty for the baselines).
    pub fn components(self) -> Vec<&'static str> {
        match self {
            RankMethod::TaskEmb => TASKEMB_COMPONENTS.to_vec(),
            RankMethod::TextEmb => vec![TEXT],
            RankMethod::TextTask => {
                let mut c = TASKEMB_COMPONENTS.to_vec();
                c.push(TEXT);
                c
            }
            RankMethod::DataSize | RankMethod::CurveGrad => Vec::new(),
        }
    }
}

/// Per-component cosine rankings fused with RRF (a single component is
/// returned unfused).
pub fn rank_by_embedding(method: RankMethod, target: &TaskEmbedding, library: &[TaskEmbedding]) -> Result<Ranking> {
    let comps = method.components();
    if comps.is_empty() {
        return Err(Error::validation(format!("{} does not rank by embeddings", method.name())));
    }
    let per: Vec<Ranking> = comps
        .iter()
        .map(|c| rank_by_cosine(target, library, c))
        .collect::<Result<_>>()?;
    if per.len() == 1 {
        return Ok(per.into_iter().next().expect("one ranking"));
    }
    rrf_fuse(&target.task, &per)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task: String,
    pub class: TaskClass,
    pub train_size: usize,
}

/// Reads `task,class,train_size` rows.
pub fn read_task_index(path: &Path) -> Result<Vec<TaskInfo>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |m: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            message: m,
        };
        if row.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", row.len())));
        }
        out.push(TaskInfo {
            task: row[0].to_string(),
            class: TaskClass::parse(&row[1]).map_err(|e| bad(e.to_string()))?,
            train_size: row[2].parse().map_err(|e| bad(format!("train_size: {e}")))?,
        });
    }
    Ok(out)
}

pub fn write_task_index(path: &Path, tasks: &[TaskInfo]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "class", "train_size"])?;
    for t in tasks {
        w.write_record([t.task.as_str(), t.class.name(), &t.train_size.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Larger training sets first.
pub fn rank_by_datasize(tasks: &[TaskInfo], target: &str) -> Result<Ranking> {
    Ranking::from_scores(target, tasks.iter().map(|t| (t.task.clone(), t.train_size as f64)))
}

/// Fractions of training at which loss-curve slopes are measured.
pub const CURVEGRAD_CHECKPOINTS: [f64; 5] = [0.1, 0.2, 0.3, 0.5, 0.7];
pub const CURVEGRAD_MIN_STEPS: usize = 100;

/// Window half-width: 2% of the run, at least one step.
pub fn curvegrad_half_width(total: usize) -> usize {
    ((0.02 * total as f64).round() as usize).max(1)
}

/// Slopes of a per-step loss curve at each checkpoint: the curve is smoothed
/// with a centred moving average, then a least-squares line is fitted to the
/// smoothed values within the window around the checkpoint.
pub fn curve_slopes(losses: &[f64]) -> Result<[f64; 5]> {
    let t = losses.len();
    if t < CURVEGRAD_MIN_STEPS {
        return Err(Error::validation(format!(
            "loss curve of {t} steps; at least {CURVEGRAD_MIN_STEPS} needed"
        )));
    }
    let h = curvegrad_half_width(t);
    let smooth = |i: usize| {
        let lo = i.saturating_sub(h);
        let hi = (i + h).min(t - 1);
        losses[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
    };
    let mut out = [0.0; 5];
    for (o, frac) in out.iter_mut().zip(CURVEGRAD_CHECKPOINTS) {
        let c = ((frac * t as f64).round() as usize).min(t - 1);
        let lo = c.saturating_sub(h);
        let hi = (c + h).min(t - 1);
        let xs: Vec<f64> = (lo..=hi).map(|i| i as f64).collect();
        let ys: Vec<f64> = (lo..=hi).map(smooth).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        *o = sxy / sxx;
    }
    Ok(out)
}

/// Fine-tunes `model` on the source task for `total_steps` and returns the
/// checkpoint slopes of its training loss.
pub fn curvegrad_features(model: &mut Model, source: &Task, total_steps: usize, cfg: &TrainConfig, seed: u64) -> Result<[f64; 5]> {
    if total_steps < CURVEGRAD_MIN_STEPS {
        return Err(Error::validation(format!("{total_steps} steps; at least {CURVEGRAD_MIN_STEPS} needed")));
    }
    let losses = train(model, &source.train, cfg, Schedule::Steps(total_steps), seed)?;
    curve_slopes(&losses)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeOrder {
    /// Most negative slope (fastest-falling loss) first.
    #[default]
    SteepestDescent,
    /// Largest slope value first.
    Descending,
}

/// One ranking per checkpoint, fused with RRF.
pub fn rank_by_curvegrad(target: &str, slopes: &BTreeMap<String, [f64; 5]>, order: SlopeOrder) -> Result<Ranking> {
    let per: Vec<Ranking> = (0..CURVEGRAD_CHECKPOINTS.len())
        .map(|k| {
            Ranking::from_scores(
                target,
                slopes.iter().map(|(s, v)| {
                    let score = match order {
                        SlopeOrder::SteepestDescent => -v[k],
                        SlopeOrder::Descending => v[k],
                    };
                    (s.clone(), score)
                }),
            )
        })
        .collect::<Result<_>>()?;
    rrf_fuse(target, &per)
}

pub fn dcg(rels: &[f64], p: usize) -> Result<f64> {
    if p > rels.len() {
        return Err(Error::validation(format!("p = {p} exceeds {} entries", rels.len())));
    }
    Ok(rels[..p]
        .iter()
        .enumerate()
        .map(|(i, r)| (2f64.powf(*r) - 1.0) / ((i + 2) as f64).log2())
        .sum())
}

/// Maps raw target scores to the relevances inside `2^rel`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelScaling {
    Divide { by: f64 },
    Identity,
}

impl Default for RelScaling {
    fn default() -> Self {
        RelScaling::Divide { by: 100.0 }
    }
}

impl RelScaling {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            RelScaling::Divide { by } => raw / by,
            RelScaling::Identity => raw,
        }
    }
}

/// Target performance after transfer from each source, and the sources of
/// maximal gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRelevance {
    pub target: String,
    pub baseline: f64,
    pub relevance: BTreeMap<String, f64>,
    pub best: Vec<String>,
}

impl GoldRelevance {
    /// Gold for `target` from `matrix`, optionally restricted to `sources`.
    pub fn from_matrix(matrix: &ResultMatrix, regime: &str, target: &str, sources: Option<&BTreeSet<String>>) -> Result<Self> {
        let base = matrix
            .baseline(regime, target)
            .ok_or_else(|| Error::Ingest(format!("missing baseline for target {target} in regime {regime}")))?
            .mean;
        let relevance: BTreeMap<String, f64> = matrix
            .transfers_into(regime, target)
            .filter_map(|r| {
                let s = r.source.as_ref().expect("transfer has a source");
                sources.is_none_or(|k| k.contains(s)).then(|| (s.clone(), r.mean))
            })
            .collect();
        if relevance.is_empty() {
            return Err(Error::validation(format!("no transfers into {target} in regime {regime}")));
        }
        let gains: Vec<(String, f64)> = relevance
            .iter()
            .map(|(s, m)| Ok((s.clone(), relative_transfer_gain(*m, base)?)))
            .collect::<Result<_>>()?;
        let top = gains.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
        Ok(GoldRelevance {
            target: target.to_string(),
            baseline: base,
            best: gains.into_iter().filter(|g| g.1 == top).map(|g| g.0).collect(),
            relevance,
        })
    }
}

/// `100 * DCG_p(predicted order) / DCG_p(ideal order)`.
pub fn ndcg(pred: &Ranking, gold: &GoldRelevance, p: usize, scaling: RelScaling) -> Result<f64> {
    if p > gold.relevance.len() {
        return Err(Error::validation(format!("p = {p} exceeds {} sources", gold.relevance.len())));
    }
    let mut got = Vec::with_capacity(gold.relevance.len());
    for s in gold.relevance.keys() {
        if pred.rank_of(s).is_none() {
            return Err(Error::validation(format!("ranking for {} lacks source {s}", pred.target)));
        }
    }
    for e in &pred.entries {
        if let Some(r) = gold.relevance.get(&e.source) {
            got.push(scaling.apply(*r));
        }
    }
    let mut ideal = got.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(&ideal, p)?;
    if best == 0.0 {
        return Ok(100.0);
    }
    Ok(100.0 * dcg(&got, p)? / best)
}

/// Mean over targets of the rank given to the gold best source (the mean of
/// their ranks when several sources tie for best).
pub fn avg_best_source_rank(pairs: &[(&Ranking, &GoldRelevance)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::validation("no targets to evaluate"));
    }
    let mut total = 0.0;
    for (r, g) in pairs {
        if g.best.is_empty() {
            return Err(Error::validation(format!("no best source for {}", g.target)));
        }
        let mut sum = 0.0;
        for b in &g.best {
            sum += r
                .rank_of(b)
                .ok_or_else(|| Error::validation(format!("ranking for {} lacks gold source {b}", r.target)))?;
        }
        total += sum / g.best.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean (in percent) over targets of the best source's relative gain, and
/// the number of targets whose best gain is positive.
pub fn table2_aggregate(matrix: &ResultMatrix, regime: &str) -> Result<(f64, usize)> {
    let targets = matrix.targets(regime);
    let mut gains = Vec::new();
    for t in &targets {
        let base = matrix
            .baseline(regime, t)
            .ok_or_else(|| Error::Ingest(format!("missing baseline for target {t} in regime {regime}")))?
            .mean;
        let best = matrix
            .transfers_into(regime, t)
            .map(|r| relative_transfer_gain(r.mean, base))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(None, |m: Option<f64>, g| Some(m.map_or(g, |m| m.max(g))));
        if let Some(b) = best {
            gains.push(b);
        }
    }
    if gains.is_empty() {
        return Err(Error::validation(format!("no transfers in regime {regime}")));
    }
    let mean = 100.0 * gains.iter().sum::<f64>() / gains.len() as f64;
    Ok((mean, gains.iter().filter(|g| **g > 0.0).count()))
}

/// Keeps transfers whose source and target both appear in the given sets,
/// plus the baselines of the kept targets.
pub fn restrict_matrix(matrix: &ResultMatrix, sources: &BTreeSet<String>, targets: &BTreeSet<String>) -> Result<ResultMatrix> {
    let mut out = ResultMatrix::new();
    for r in matrix.records() {
        let keep = targets.contains(&r.target) && r.source.as_ref().is_none_or(|s| sources.contains(s));
        if keep {
            out.insert(r.clone())?;
        }
    }
    Ok(out)
}

/// One transcribed table: transfers from `source` class tasks into `target`
/// class tasks under one regime pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TableKey {
    pub source: TaskClass,
    pub target: TaskClass,
    pub regime: String,
}

impl TableKey {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.csv", self.source.name(), self.target.name(), self.regime)
    }

    pub fn parse_file_name(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".csv")?;
        let mut it = stem.splitn(3, '_');
        let source = TaskClass::parse(it.next()?).ok()?;
        let target = TaskClass::parse(it.next()?).ok()?;
        Some(TableKey {
            source,
            target,
            regime: it.next()?.to_string(),
        })
    }
}

/// Reads one results-format table and checks every target has a baseline.
pub fn ingest_table(path: &Path) -> Result<ResultMatrix> {
    let m = ResultMatrix::read_csv(path)?;
    m.check_complete()?;
    Ok(m)
}

/// Transcribed tables of a directory, keyed by class pair and regime.
#[derive(Debug, Clone, Default)]
pub struct TableSet {
    pub tables: BTreeMap<TableKey, ResultMatrix>,
    pub tasks: Vec<TaskInfo>,
}

pub const TASK_SIZES_FILE: &str = "task_sizes.csv";

impl TableSet {
    pub fn ingest(dir: &Path) -> Result<Self> {
        let mut set = TableSet::default();
        let mut names: Vec<String> = fs::read_dir(dir)?
            .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_>>()?;
        names.sort();
        for name in names {
            if name == TASK_SIZES_FILE {
                set.tasks = read_task_index(&dir.join(&name))?;
            } else if let Some(key) = TableKey::parse_file_name(&name) {
                set.tables.insert(key, ingest_table(&dir.join(&name))?);
            }
        }
        if set.tables.is_empty() {
            return Err(Error::Ingest(format!("no tables found in {}", dir.display())));
        }
        Ok(set)
    }

    pub fn table(&self, source: TaskClass, target: TaskClass, regime: &str) -> Result<&ResultMatrix> {
        let key = TableKey {
            source,
            target,
            regime: regime.to_string(),
        };
        self.tables
            .get(&key)
            .ok_or_else(|| Error::Ingest(format!("no table {}", key.file_name())))
    }

    pub fn class_of(&self, task: &str) -> Option<TaskClass> {
        self.tasks.iter().find(|t| t.task == task).map(|t| t.class)
    }

    pub fn tasks_of(&self, class: TaskClass) -> Vec<TaskInfo> {
        self.tasks.iter().filter(|t| t.class == class).cloned().collect()
    }
}

pub const TABLE2_REGIMES: [&str; 3] = ["full-full", "full-limited", "limited-limited"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Cell {
    pub source: TaskClass,
    pub target: TaskClass,
    pub regime: String,
    pub mean_gain: f64,
    pub positive: usize,
    pub targets: usize,
}

/// Every class-pair aggregate available for `regime`.
pub fn table2(set: &TableSet, regime: &str) -> Result<Vec<Table2Cell>> {
    let mut out = Vec::new();
    for (k, m) in &set.tables {
        if k.regime != regime {
            continue;
        }
        let (mean_gain, positive) = table2_aggregate(m, regime)?;
        out.push(Table2Cell {
            source: k.source,
            target: k.target,
            regime: regime.to_string(),
            mean_gain,
            positive,
            targets: m.targets(regime).len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    InClass,
    AllClass,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "in-class" => Ok(Scope::InClass),
            "all-class" => Ok(Scope::AllClass),
            _ => Err(Error::Usage(format!("unknown scope {s:?} (in-class or all-class)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::InClass => "in-class",
            Scope::AllClass => "all-class",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEval {
    pub target: String,
    pub best: Vec<String>,
    pub best_rank: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub scope: Scope,
    pub regime: String,
    pub rho: f64,
    pub ndcg: f64,
    pub rel_scaling: RelScaling,
    pub targets: Vec<TargetEval>,
}

/// Scores rankings against gold relevance from `matrix`. Each ranking is
/// restricted to the sources that have a gold transfer into its target
/// (in-class scope further keeps only sources of the target's class).
pub fn evaluate_rankings(
    method: &str,
    rankings: &[Ranking],
    matrix: &ResultMatrix,
    regime: &str,
    scope: Scope,
    classes: &BTreeMap<String, TaskClass>,
    scaling: RelScaling,
) -> Result<EvalReport> {
    let mut per = Vec::new();
    let mut rhos = Vec::new();
    for r in rankings {
        let tclass = classes.get(&r.target);
        let in_scope: BTreeSet<String> = r
            .sources()
            .into_iter()
            .filter(|s| match scope {
                Scope::AllClass => true,
                Scope::InClass => tclass.is_some() && classes.get(*s) == tclass,
            })
            .map(str::to_string)
            .collect();
        let gold = GoldRelevance::from_matrix(matrix, regime, &r.target, Some(&in_scope))?;
        let keep: BTreeSet<String> = gold.relevance.keys().cloned().collect();
        let restricted = r.restrict(&keep)?;
        let rho = avg_best_source_rank(&[(&restricted, &gold)])?;
        let n = ndcg(&restricted, &gold, keep.len(), scaling)?;
        rhos.push(rho);
        per.push(TargetEval {
            target: r.target.clone(),
            best: gold.best.clone(),
            best_rank: rho,
            ndcg: n,
        });
    }
    if per.is_empty() {
        return Err(Error::validation("no rankings to evaluate"));
    }
    let k = per.len() as f64;
    Ok(EvalReport {
        method: method.to_string(),
        scope,
        regime: regime.to_string(),
        rho: rhos.iter().sum::<f64>() / k,
        ndcg: per.iter().map(|t| t.ndcg).sum::<f64>() / k,
        rel_scaling: scaling,
        targets: per,
    })
}

/// DataSize rankings for every target of a transcribed table, over the
/// other tasks of the table's source class.
pub fn datasize_rankings(set: &TableSet, source: TaskClass, target: TaskClass) -> Result<Vec<Ranking>> {
    let pool = set.tasks_of(source);
    if pool.is_empty() {
        return Err(Error::Ingest(format!("no task sizes for class {}", source.name())));
    }
    set.tasks_of(target)
        .iter()
        .map(|t| rank_by_datasize(&pool, &t.task))
        .collect()
}

pub const RANKINGS_HEADER: [&str; 4] = ["target", "source", "score", "rank"];

pub fn rankings_to_csv(rankings: &[Ranking]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RANKINGS_HEADER)?;
    for r in rankings {
        for e in &r.entries {
            w.write_record([r.target.as_str(), &e.source, &e.score.to_string(), &e.rank.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_rankings(path: &Path, rankings: &[Ranking]) -> Result<()> {
    write_atomic(path, rankings_to_csv(rankings)?.as_bytes())
}

/// Reads rankings, grouping rows by target in file order.
pub fn read_rankings(path: &Path) -> Result<Vec<Ranking>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: Vec<Ranking> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |m: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            message: m,
        };
        if row.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", row.len())));
        }
        let entry = RankEntry {
            source: row[1].to_string(),
            score: row[2].parse().map_err(|e| bad(format!("score: {e}")))?,
            rank: row[3].parse().map_err(|e| bad(format!("rank: {e}")))?,
        };
        match out.last_mut() {
            Some(r) if r.target == row[0] => r.entries.push(entry),
            _ => out.push(Ranking {
                target: row[0].to_string(),
                entries: vec![entry],
            }),
        }
    }
    Ok(out)
}

/// Every ranking file (`*.csv`) of a directory, sorted by file name.
pub fn read_rankings_dir(dir: &Path) -> Result<Vec<Ranking>> {
    if dir.is_file() {
        return read_rankings(dir);
    }
    let mut files: Vec<_> = fs::read_dir(dir)?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_rankings(&f)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{ComponentVector, Method};
    use crate::transfer::TransferRecord;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(task: &str, comps: &[(&str, Vec<f64>)]) -> TaskEmbedding {
        TaskEmbedding {
            task: task.into(),
            model_hash: "m".into(),
            method: Method::TaskEmb,
            components: comps.iter().map(|(n, v)| (n.to_string(), ComponentVector::new(v.clone()))).collect(),
            config_hash: "c".into(),
        }
    }

    fn rec(regime: &str, source: Option<&str>, target: &str, mean: f64) -> TransferRecord {
        TransferRecord {
            regime: regime.into(),
            source: source.map(Into::into),
            target: target.into(),
            mean,
            std: 0.0,
            restarts: 1,
        }
    }

    #[test]
    fn cosine_extremes_and_ties() {
        let t = emb("t", &[(TEXT, vec![1.0, 0.0])]);
        let lib = vec![
            emb("orth", &[(TEXT, vec![0.0, 2.0])]),
            emb("same", &[(TEXT, vec![3.0, 0.0])]),
            t.clone(),
        ];
        let r = rank_by_cosine(&t, &lib, TEXT).unwrap();
        assert_eq!(r.sources(), vec!["same", "orth"]);
        assert!((r.entries[0].score - 1.0).abs() < 1e-15);
        assert_eq!(r.entries[1].score, 0.0);

        let lib = vec![emb("a", &[(TEXT, vec![1.0, 1.0])]), emb("b", &[(TEXT, vec![1.0, 1.0])])];
        let r = rank_by_cosine(&t, &lib, TEXT).unwrap();
        assert_eq!(r.rank_of("a"), Some(1.5));
        assert_eq!(r.rank_of("b"), Some(1.5));
    }

    #[test]
    fn cosine_ranking_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rv = |rng: &mut ChaCha8Rng| (0..5).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect::<Vec<f64>>();
        let t = emb("t", &[(TEXT, rv(&mut rng))]);
        let lib: Vec<_> = (0..4).map(|i| emb(&format!("s{i}"), &[(TEXT, rv(&mut rng))])).collect();
        let mut brute: Vec<(String, f64)> = lib
            .iter()
            .map(|e| {
                let (a, b) = (&t.components[TEXT].values, &e.components[TEXT].values);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let n = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (e.task.clone(), dot / (n(a) * n(b)))
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let r = rank_by_cosine(&t, &lib, TEXT).unwrap();
        assert_eq!(r.sources(), brute.iter().map(|b| b.0.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn incomparable_embeddings_are_rejected() {
        let t = emb("t", &[(TEXT, vec![1.0, 0.0])]);
        let short = emb("s", &[(TEXT, vec![1.0])]);
        assert!(matches!(rank_by_cosine(&t, &[short], TEXT), Err(Error::Comparability(_))));
        let mut other = emb("o", &[(TEXT, vec![1.0, 0.0])]);
        other.model_hash = "x".into();
        assert!(matches!(rank_by_cosine(&t, &[other], TEXT), Err(Error::Comparability(_))));
    }

    #[test]
    fn rrf_examples() {
        assert!((rrf_score(&[1.0]) - 0.0163934).abs() < 1e-6);
        assert!((rrf_score(&[1.0, 2.0]) - 0.0325224).abs() < 1e-6);
        let r = Ranking::from_scores("t", [("a".into(), 3.0), ("b".into(), 2.0), ("c".into(), 1.0)]).unwrap();
        assert_eq!(rrf_fuse("t", std::slice::from_ref(&r)).unwrap().sources(), r.sources());
        let partial = Ranking::from_scores("t", [("a".into(), 1.0)]).unwrap();
        assert!(matches!(rrf_fuse("t", &[r.clone(), partial.clone()]), Err(Error::Validation(_))));
        assert!(matches!(rrf_fuse("t", &[partial, r]), Err(Error::Validation(_))));
    }

    #[test]
    fn datasize_examples() {
        let tasks = vec![
            TaskInfo { task: "big".into(), class: TaskClass::Cr, train_size: 570_000 },
            TaskInfo { task: "t".into(), class: TaskClass::Cr, train_size: 2_500 },
            TaskInfo { task: "x".into(), class: TaskClass::Cr, train_size: 1_000 },
            TaskInfo { task: "y".into(), class: TaskClass::Cr, train_size: 1_000 },
        ];
        let r = rank_by_datasize(&tasks, "t").unwrap();
        assert_eq!(r.top(), Some("big"));
        assert_eq!(r.rank_of("x"), Some(2.5));
        assert_eq!(r.rank_of("y"), Some(2.5));
        assert_eq!(r.rank_of("t"), None);
    }

    #[test]
    fn curve_slope_examples() {
        let lin: Vec<f64> = (0..1000).map(|t| 2.0 - 0.001 * t as f64).collect();
        for s in curve_slopes(&lin).unwrap() {
            assert!((s + 0.001).abs() < 1e-9);
        }
        assert_eq!(curve_slopes(&[0.7; 200]).unwrap(), [0.0; 5]);
        let t = 10_000.0;
        let quad: Vec<f64> = (0..10_000).map(|i| (1.0 - i as f64 / t).powi(2)).collect();
        let s = curve_slopes(&quad).unwrap();
        assert!((s[3] + 1e-4).abs() < 1e-6);
        assert!(matches!(curve_slopes(&[1.0; 99]), Err(Error::Validation(_))));
    }

    #[test]
    fn curvegrad_direction_and_fusion() {
        let mut slopes = BTreeMap::new();
        slopes.insert("improving".to_string(), [-0.01; 5]);
        slopes.insert("flat".to_string(), [-0.0001; 5]);
        let r = rank_by_curvegrad("t", &slopes, SlopeOrder::SteepestDescent).unwrap();
        assert_eq!(r.top(), Some("improving"));
        let r = rank_by_curvegrad("t", &slopes, SlopeOrder::Descending).unwrap();
        assert_eq!(r.top(), Some("flat"));

        let mut same = BTreeMap::new();
        same.insert("a".to_string(), [-0.1; 5]);
        same.insert("b".to_string(), [-0.1; 5]);
        let r = rank_by_curvegrad("t", &same, SlopeOrder::SteepestDescent).unwrap();
        assert_eq!(r.rank_of("a"), r.rank_of("b"));

        let mut mixed = BTreeMap::new();
        mixed.insert("a".to_string(), [-3.0, -1.0, -2.0, -1.0, -1.0]);
        mixed.insert("b".to_string(), [-2.0, -3.0, -1.0, -2.0, -2.0]);
        mixed.insert("c".to_string(), [-1.0, -2.0, -3.0, -3.0, -3.0]);
        // Per-checkpoint ranks (steepest first): a 1,3,2,3,3  b 2,1,3,2,2  c 3,2,1,1,1
        let f = |rs: &[f64]| rs.iter().map(|r| 1.0 / (60.0 + r)).sum::<f64>();
        let r = rank_by_curvegrad("t", &mixed, SlopeOrder::SteepestDescent).unwrap();
        for (s, rs) in [("a", [1.0, 3.0, 2.0, 3.0, 3.0]), ("b", [2.0, 1.0, 3.0, 2.0, 2.0]), ("c", [3.0, 2.0, 1.0, 1.0, 1.0])] {
            let e = r.entries.iter().find(|e| e.source == s).unwrap();
            assert!((e.score - f(&rs)).abs() < 1e-15);
        }
        assert_eq!(r.sources(), vec!["c", "b", "a"]);
    }

    #[test]
    fn dcg_and_ndcg_examples() {
        assert_eq!(dcg(&[1.0, 0.0, 0.0], 3).unwrap(), 1.0);
        assert!((dcg(&[0.0, 1.0], 2).unwrap() - 0.63093).abs() < 1e-5);
        assert_eq!(dcg(&[0.0; 4], 4).unwrap(), 0.0);
        assert!(dcg(&[1.0], 2).is_err());

        let gold = GoldRelevance {
            target: "t".into(),
            baseline: 1.0,
            relevance: [("a".into(), 3.0), ("b".into(), 2.0), ("c".into(), 1.0)].into(),
            best: vec!["a".into()],
        };
        let ideal = Ranking::from_scores("t", [("a".into(), 3.0), ("b".into(), 2.0), ("c".into(), 1.0)]).unwrap();
        assert_eq!(ndcg(&ideal, &gold, 3, RelScaling::Identity).unwrap(), 100.0);
        let reversed = Ranking::from_scores("t", [("a".into(), 1.0), ("b".into(), 2.0), ("c".into(), 3.0)]).unwrap();
        let v = ndcg(&reversed, &gold, 3, RelScaling::Identity).unwrap();
        assert!((v - 68.06).abs() < 0.005, "{v}");
        assert!(ndcg(&ideal, &gold, 4, RelScaling::Identity).is_err());
    }

    #[test]
    fn best_source_rank_examples() {
        let gold = |t: &str, best: &str| GoldRelevance {
            target: t.into(),
            baseline: 1.0,
            relevance: [("a".into(), 1.0), ("b".into(), 1.0), ("c".into(), 1.0), ("d".into(), 1.0)].into(),
            best: vec![best.into()],
        };
        let r = |t: &str| Ranking::from_scores(t, [("a".into(), 4.0), ("b".into(), 3.0), ("c".into(), 2.0), ("d".into(), 1.0)]).unwrap();
        let (r1, r2) = (r("t1"), r("t2"));
        let (g1, g2) = (gold("t1", "b"), gold("t2", "d"));
        assert_eq!(avg_best_source_rank(&[(&r1, &g1), (&r2, &g2)]).unwrap(), 3.0);
        let g3 = gold("t1", "a");
        assert_eq!(avg_best_source_rank(&[(&r1, &g3)]).unwrap(), 1.0);
        let missing = gold("t1", "zz");
        assert!(avg_best_source_rank(&[(&r1, &missing)]).is_err());
    }

    #[test]
    fn gold_ties_and_zero_gain() {
        let mut m = ResultMatrix::new();
        m.insert(rec("full-full", None, "t", 50.0)).unwrap();
        m.insert(rec("full-full", Some("a"), "t", 55.0)).unwrap();
        m.insert(rec("full-full", Some("b"), "t", 55.0)).unwrap();
        m.insert(rec("full-full", Some("c"), "t", 50.0)).unwrap();
        let g = GoldRelevance::from_matrix(&m, "full-full", "t", None).unwrap();
        assert_eq!(g.best, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(relative_transfer_gain(50.0, 50.0).unwrap(), 0.0);
    }

    #[test]
    fn table2_toy_examples() {
        let mut m = ResultMatrix::new();
        m.insert(rec("ff", None, "t1", 50.0)).unwrap();
        m.insert(rec("ff", Some("a"), "t1", 55.0)).unwrap();
        m.insert(rec("ff", None, "t2", 40.0)).unwrap();
        m.insert(rec("ff", Some("a"), "t2", 38.0)).unwrap();
        let (mean, count) = table2_aggregate(&m, "ff").unwrap();
        assert!((mean - 2.5).abs() < 1e-12);
        assert_eq!(count, 1);

        let mut flat = ResultMatrix::new();
        flat.insert(rec("ff", None, "t", 50.0)).unwrap();
        flat.insert(rec("ff", Some("a"), "t", 50.0)).unwrap();
        assert_eq!(table2_aggregate(&flat, "ff").unwrap(), (0.0, 0));
        assert!(table2_aggregate(&ResultMatrix::new(), "ff").is_err());
    }

    #[test]
    fn table2_survives_a_csv_round_trip_bitwise() {
        let mut m = ResultMatrix::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 0..5 {
            let t = format!("t{t}");
            m.insert(rec("ff", None, &t, rand::Rng::gen_range(&mut rng, 10.0..90.0))).unwrap();
            for s in 0..4 {
                m.insert(rec("ff", Some(&format!("s{s}")), &t, rand::Rng::gen_range(&mut rng, 10.0..90.0))).unwrap();
            }
        }
        let back = ResultMatrix::parse_csv(&m.to_csv_string().unwrap(), "mem").unwrap();
        let (a, b) = (table2_aggregate(&m, "ff").unwrap(), table2_aggregate(&back, "ff").unwrap());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rankings_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rs = vec![
            Ranking::from_scores("t1", [("a".into(), 0.1), ("b".into(), 1.0 / 3.0)]).unwrap(),
            Ranking::from_scores("t2", [("a".into(), 2.0), ("c".into(), 2.0)]).unwrap(),
        ];
        let p = dir.path().join("r.csv");
        write_rankings(&p, &rs).unwrap();
        assert_eq!(read_rankings(&p).unwrap(), rs);
        assert_eq!(read_rankings_dir(dir.path()).unwrap(), rs);
    }

    #[test]
    fn table_file_names() {
        let k = TableKey::parse_file_name("qa_sl_full-limited.csv").unwrap();
        assert_eq!((k.source, k.target, k.regime.as_str()), (TaskClass::Qa, TaskClass::Sl, "full-limited"));
        assert_eq!(k.file_name(), "qa_sl_full-limited.csv");
        assert!(TableKey::parse_file_name("task_sizes.csv").is_none());
    }

    #[test]
    fn random_rankings_average_the_middle_rank() {
        let k = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let names: Vec<String> = (0..k).map(|i| format!("s{i}")).collect();
        let gold = GoldRelevance {
            target: "t".into(),
            baseline: 1.0,
            relevance: names.iter().map(|n| (n.clone(), 1.0)).collect(),
            best: vec!["s0".into()],
        };
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            let r = Ranking::from_scores("t", order.into_iter().enumerate().map(|(i, s)| (s, -(i as f64)))).unwrap();
            total += avg_best_source_rank(&[(&r, &gold)]).unwrap();
        }
        let want = (k as f64 + 1.0) / 2.0;
        assert!((total / n as f64 - want).abs() / want < 0.02);
    }

    proptest! {
        #[test]
        fn adjacent_swap_toward_ideal_never_lowers_ndcg(rels in prop::collection::vec(0.0f64..1.0, 2..8), i in 0usize..7) {
            let i = i % (rels.len() - 1);
            let names: Vec<String> = (0..rels.len()).map(|k| format!("s{k}")).collect();
            let gold = GoldRelevance {
                target: "t".into(),
                baseline: 1.0,
                relevance: names.iter().cloned().zip(rels.iter().copied()).collect(),
                best: vec![],
            };
            let rank = |order: &[usize]| {
                Ranking::from_scores("t", order.iter().enumerate().map(|(pos, k)| (names[*k].clone(), -(pos as f64)))).unwrap()
            };
            let mut order: Vec<usize> = (0..rels.len()).collect();
            let before = ndcg(&rank(&order), &gold, rels.len(), RelScaling::Identity).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&before));
            if rels[order[i + 1]] > rels[order[i]] {
                order.swap(i, i + 1);
                let after = ndcg(&rank(&order), &gold, rels.len(), RelScaling::Identity).unwrap();
                prop_assert!(after >= before - 1e-12);
            }
        }

        #[test]
        fn rrf_ignores_component_order(scores in prop::collection::vec(prop::collection::vec(-5i32..5, 4), 2..5)) {
            let rankings: Vec<Ranking> = scores
                .iter()
                .map(|s| Ranking::from_scores("t", s.iter().enumerate().map(|(i, v)| (format!("s{i}"), *v as f64))).unwrap())
                .collect();
            let mut rev = rankings.clone();
            rev.reverse();
            let a = rrf_fuse("t", &rankings).unwrap();
            let b = rrf_fuse("t", &rev).unwrap();
            prop_assert_eq!(a.sources(), b.sources());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(x.score.to_bits(), y.score.to_bits());
                prop_assert_eq!(x.rank, y.rank);
            }
        }

        #[test]
        fn datasize_ignores_insertion_order(sizes in prop::collection::vec(1usize..50, 2..8), seed in 0u64..1000) {
            let tasks: Vec<TaskInfo> = sizes
                .iter()
                .enumerate()
                .map(|(i, n)| TaskInfo { task: format!("s{i}"), class: TaskClass::Cr, train_size: *n })
                .collect();
            let mut shuffled = tasks.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(rank_by_datasize(&tasks, "s0").unwrap(), rank_by_datasize(&shuffled, "s0").unwrap());
        }
    }
}
