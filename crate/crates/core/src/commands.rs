//! Command-line surface. Every subcommand reads and writes files only, takes
//! `--seed`, `--config` and `--out`, and stamps what it writes with the
//! configuration hash and master seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::embeddings::{LibraryIndex, TaskEmbedding};
use crate::encoder::{load_model, save_model, FeatureExtractor};
use crate::error::{Error, Result};
use crate::experiment::{
    curvegrad_slopes, embed_task, embedding_method, generate_roster, pipeline_predict_and_verify, pretrain, rank_curvegrad, stamp_artifact,
    write_experiment_manifest, write_stamped, ExperimentConfig,
};
use crate::layout::{fr_layout, TaskGraph, TaskSpace};
use crate::rankeval::{
    avg_best_source_rank, datasize_rankings, evaluate_rankings, ndcg, rank_by_datasize, rank_by_embedding, read_rankings_dir, read_task_index,
    rankings_to_csv, table2, write_task_index, GoldRelevance, RankMethod, Ranking, RelScaling, Scope, TableSet, TaskInfo, TABLE2_REGIMES,
};
use crate::tasks::{load_task_dir, store_task, Task, TaskClass};
use crate::transfer::{run_matrix, MatrixSpec, ResultMatrix};

pub const REFERENCE_FILE: &str = "reference.model";
pub const TASK_INDEX_FILE: &str = "task_sizes.csv";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Parser)]
#[command(name = "task-transfer", version, about = "Intermediate-task transfer experiments on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed; every run seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Experiment configuration (JSON); omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory or file.
    #[arg(long)]
    pub out: PathBuf,
}

impl Common {
    pub fn config(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default().with_seed(0),
        };
        let mut cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.out_root = self.out.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-token pretraining of the shared reference extractor.
    Pretrain(PretrainArgs),
    /// Generate the synthetic task roster as dataset files.
    GenTasks(GenTasksArgs),
    /// Baselines and all pairwise transfers, resumable.
    RunMatrix(RunMatrixArgs),
    /// Task embeddings.
    Embed(EmbedArgs),
    /// Rank source tasks for one or all targets.
    Rank(RankArgs),
    /// Score rankings against measured transfers.
    Evaluate(EvaluateArgs),
    /// Force-directed 2-D layout of the task space.
    Layout(LayoutArgs),
    /// Aggregates over the bundled published result tables.
    Reproduce(ReproduceArgs),
    /// Embed a target, pick the top source, transfer and compare.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RunMatrixArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    /// Regime pairs to run (defaults to the configured ones).
    #[arg(long, value_delimiter = ',')]
    pub regimes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(subcommand)]
    pub action: EmbedAction,
}

#[derive(Debug, Subcommand)]
pub enum EmbedAction {
    /// Compute embeddings into a library directory.
    Compute(EmbedComputeArgs),
}

#[derive(Debug, Args)]
pub struct EmbedComputeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    /// Task to embed; every task when omitted.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_enum, default_value_t = EmbedMethodArg::Taskemb)]
    pub method: EmbedMethodArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EmbedMethodArg {
    Taskemb,
    Textemb,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RankMethodArg {
    Taskemb,
    Textemb,
    #[value(name = "text+task")]
    TextTask,
    Datasize,
    Curvegrad,
}

impl From<RankMethodArg> for RankMethod {
    fn from(m: RankMethodArg) -> Self {
        match m {
            RankMethodArg::Taskemb => RankMethod::TaskEmb,
            RankMethodArg::Textemb => RankMethod::TextEmb,
            RankMethodArg::TextTask => RankMethod::TextTask,
            RankMethodArg::Datasize => RankMethod::DataSize,
            RankMethodArg::Curvegrad => RankMethod::CurveGrad,
        }
    }
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub method: RankMethodArg,
    /// Target to rank sources for; every known task when omitted.
    #[arg(long)]
    pub target: Option<String>,
    /// Embedding library (embedding methods).
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Task directory (curvegrad) or `task,class,train_size` index (datasize).
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Reference model (curvegrad).
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Results CSV with the measured transfers.
    #[arg(long, required = true)]
    pub gold: PathBuf,
    /// Ranking CSV file or directory of them.
    #[arg(long)]
    pub rankings: PathBuf,
    #[arg(long, value_enum, default_value_t = ScopeArg::AllClass)]
    pub scope: ScopeArg,
    #[arg(long, default_value = "full-full")]
    pub regime: String,
    /// `task,class,train_size` index giving task classes (in-class scope).
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, default_value = "ranking")]
    pub method: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    InClass,
    AllClass,
}

#[derive(Debug, Args)]
pub struct LayoutArgs {
    #[command(flatten)]
    pub common: Common,
    /// Ranking CSV file or directory of them.
    #[arg(long, required_unless_present = "results", conflicts_with = "results")]
    pub rankings: Option<PathBuf>,
    /// Rank sources by measured transfer from a results CSV instead.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Regime pair read from `--results`.
    #[arg(long, default_value = "full-full")]
    pub regime: String,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(value_enum)]
    pub what: ReproduceWhat,
    /// Directory of transcribed tables.
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/tables"))]
    pub tables: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReproduceWhat {
    Table2,
    #[value(name = "table3-datasize")]
    Table3Datasize,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Results CSV to check the ranking against.
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

/// Exit status for an error: 2 for usage errors, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonScalarLoss(_) => "non_scalar_loss",
        Error::Validation(_) => "validation",
        Error::InputTooLong { .. } => "input_too_long",
        Error::Parse { .. } => "parse",
        Error::Manifest { .. } => "manifest",
        Error::HashMismatch(_) => "hash_mismatch",
        Error::ConfigMismatch(_) => "config_mismatch",
        Error::Divergence { .. } => "divergence",
        Error::Comparability(_) => "comparability",
        Error::UndefinedGain(_) => "undefined_gain",
        Error::CorruptStore { .. } => "corrupt_store",
        Error::Ingest(_) => "ingest",
        Error::Usage(_) => "usage",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

/// One-line JSON error report.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({"error": error_kind(e), "message": e.to_string()}).to_string()
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

fn load_reference(path: &Path, cfg: &ExperimentConfig) -> Result<FeatureExtractor> {
    Ok(load_model(path, Some(&cfg.encoder))?.0)
}

fn find_task<'a>(tasks: &'a [Task], id: &str) -> Result<&'a Task> {
    tasks
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::Usage(format!("no task {id:?} in the task directory")))
}

pub fn task_infos(tasks: &[Task]) -> Vec<TaskInfo> {
    tasks
        .iter()
        .map(|t| TaskInfo {
            task: t.id.clone(),
            class: t.class,
            train_size: t.train.len(),
        })
        .collect()
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a.common),
        Command::GenTasks(a) => cmd_gen_tasks(&a.common),
        Command::RunMatrix(a) => cmd_run_matrix(&a),
        Command::Embed(EmbedArgs {
            action: EmbedAction::Compute(a),
        }) => cmd_embed(&a),
        Command::Rank(a) => cmd_rank(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Layout(a) => cmd_layout(&a),
        Command::Reproduce(a) => cmd_reproduce(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
    }
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    write_experiment_manifest(&c.out, &cfg)?;
    let p = pretrain(&cfg)?;
    let model = c.out.join(REFERENCE_FILE);
    save_model(&model, &p.extractor, None)?;
    stamp_artifact(&model, "reference_model", &cfg)?;
    write_stamped(&c.out.join("pretrain_report.json"), &json_bytes(&p.report)?, "pretrain_report", &cfg)?;
    println!(
        "reference model {} ({} parameters, hash {}); masked-token loss {:.4} -> {:.4}",
        model.display(),
        p.extractor.num_params(),
        &p.extractor.hash()[..16],
        p.report.initial_loss,
        p.report.final_loss
    );
    Ok(())
}

fn cmd_gen_tasks(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    write_experiment_manifest(&c.out, &cfg)?;
    let tasks = generate_roster(&cfg, cfg.master_seed)?;
    for t in &tasks {
        let manifest = store_task(&c.out, t)?;
        stamp_artifact(&manifest, "task", &cfg)?;
        for split in ["train", "dev"] {
            stamp_artifact(&c.out.join(format!("{}.{split}.jsonl", t.id)), "task_split", &cfg)?;
        }
    }
    let index = c.out.join(TASK_INDEX_FILE);
    write_task_index(&index, &task_infos(&tasks))?;
    stamp_artifact(&index, "task_index", &cfg)?;
    println!("{} tasks written to {}", tasks.len(), c.out.display());
    Ok(())
}

fn cmd_run_matrix(a: &RunMatrixArgs) -> Result<()> {
    let cfg = a.common.config()?;
    write_experiment_manifest(&a.common.out, &cfg)?;
    let reference = load_reference(&a.reference, &cfg)?;
    let tasks = load_task_dir(&a.tasks)?;
    let names = if a.regimes.is_empty() { cfg.regimes.pairs.clone() } else { a.regimes.clone() };
    let pairs = names.iter().map(|n| cfg.regimes.parse(n)).collect::<Result<Vec<_>>>()?;
    let workers = if a.workers == 0 { rayon::current_num_threads() } else { a.workers };
    let store = a.common.out.join(RESULTS_FILE);
    let m = run_matrix(
        &MatrixSpec {
            reference: &reference,
            tasks: &tasks,
            pairs: &pairs,
            train: &cfg.train,
            master_seed: cfg.master_seed,
            workers,
        },
        Some(&store),
    )?;
    stamp_artifact(&store, "results", &cfg)?;
    println!("{} cells in {}", m.len(), store.display());
    Ok(())
}

fn cmd_embed(a: &EmbedComputeArgs) -> Result<()> {
    let mut cfg = a.common.config()?;
    cfg.embedding.method = match a.method {
        EmbedMethodArg::Taskemb => RankMethod::TaskEmb,
        EmbedMethodArg::Textemb => RankMethod::TextEmb,
    };
    let reference = load_reference(&a.reference, &cfg)?;
    let tasks = load_task_dir(&a.tasks)?;
    let chosen: Vec<&Task> = match &a.task {
        Some(id) => vec![find_task(&tasks, id)?],
        None => tasks.iter().collect(),
    };
    for t in chosen {
        let e = embed_task(&cfg, &reference, t)?;
        let path = LibraryIndex::add(&a.common.out, &e)?;
        stamp_artifact(&path, "embedding", &cfg)?;
        println!("{} -> {}", t.id, path.display());
    }
    Ok(())
}

fn cmd_rank(a: &RankArgs) -> Result<()> {
    let cfg = a.common.config()?;
    let method: RankMethod = a.method.into();
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| Error::Usage(format!("--{flag} is required for --method {}", method.name())))
    };
    let rankings: Vec<Ranking> = match method {
        RankMethod::DataSize => {
            let src = need(&a.tasks, "tasks")?;
            let infos = if src.is_dir() { read_task_index(&src.join(TASK_INDEX_FILE))? } else { read_task_index(&src)? };
            targets_for(&a.target, infos.iter().map(|t| t.task.clone()))?
                .iter()
                .map(|t| rank_by_datasize(&infos, t))
                .collect::<Result<_>>()?
        }
        RankMethod::CurveGrad => {
            let reference = load_reference(&need(&a.reference, "reference")?, &cfg)?;
            let tasks = load_task_dir(&need(&a.tasks, "tasks")?)?;
            let slopes = curvegrad_slopes(&cfg, &reference, &tasks)?;
            write_stamped(&a.common.out.join("curvegrad_slopes.json"), &json_bytes(&slopes)?, "curvegrad_slopes", &cfg)?;
            targets_for(&a.target, tasks.iter().map(|t| t.id.clone()))?
                .iter()
                .map(|t| rank_curvegrad(&cfg, t, &slopes))
                .collect::<Result<_>>()?
        }
        m => {
            let lib_dir = need(&a.library, "library")?;
            let library = LibraryIndex::load_embeddings(&lib_dir, embedding_method(m)?)?;
            if library.is_empty() {
                return Err(Error::Usage(format!("no {} embeddings in {}", m.name(), lib_dir.display())));
            }
            let by_task: BTreeMap<&str, &TaskEmbedding> = library.iter().map(|e| (e.task.as_str(), e)).collect();
            targets_for(&a.target, library.iter().map(|e| e.task.clone()))?
                .iter()
                .map(|t| {
                    let te = by_task
                        .get(t.as_str())
                        .ok_or_else(|| Error::Usage(format!("target {t} has no embedding in the library")))?;
                    rank_by_embedding(m, te, &library)
                })
                .collect::<Result<_>>()?
        }
    };
    let name = match &a.target {
        Some(t) => format!("{}_{t}.csv", file_safe(method.name())),
        None => format!("{}.csv", file_safe(method.name())),
    };
    let path = a.common.out.join(name);
    write_stamped(&path, rankings_to_csv(&rankings)?.as_bytes(), "rankings", &cfg)?;
    for r in &rankings {
        println!("{}: {}", r.target, r.sources().join(" > "));
    }
    Ok(())
}

fn file_safe(s: &str) -> String {
    s.replace('+', "_")
}

fn targets_for(target: &Option<String>, all: impl Iterator<Item = String>) -> Result<Vec<String>> {
    let all: BTreeSet<String> = all.collect();
    match target {
        Some(t) if all.contains(t) => Ok(vec![t.clone()]),
        Some(t) => Err(Error::Usage(format!("unknown target {t:?}"))),
        None => Ok(all.into_iter().collect()),
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = a.common.config()?;
    let gold = ResultMatrix::read_csv(&a.gold)?;
    gold.check_complete()?;
    let rankings = read_rankings_dir(&a.rankings)?;
    let scope = match a.scope {
        ScopeArg::InClass => Scope::InClass,
        ScopeArg::AllClass => Scope::AllClass,
    };
    let classes: BTreeMap<String, TaskClass> = match &a.classes {
        Some(p) => read_task_index(p)?.into_iter().map(|t| (t.task, t.class)).collect(),
        None if matches!(scope, Scope::InClass) => {
            return Err(Error::Usage("--classes is required for --scope in-class".into()));
        }
        None => BTreeMap::new(),
    };
    let report = evaluate_rankings(&a.method, &rankings, &gold, &a.regime, scope, &classes, cfg.ranking.rel_scaling)?;
    let path = if a.common.out.extension().is_some_and(|e| e == "json") {
        a.common.out.clone()
    } else {
        a.common.out.join(format!("eval_{}_{}.json", file_safe(&a.method), scope.name()))
    };
    write_stamped(&path, &json_bytes(&report)?, "eval_report", &cfg)?;
    println!("{} {} {}: rho {:.3}, ndcg {:.2}", report.method, scope.name(), report.regime, report.rho, report.ndcg);
    Ok(())
}

fn cmd_layout(a: &LayoutArgs) -> Result<()> {
    let cfg = a.common.config()?;
    let rankings = match (&a.rankings, &a.results) {
        (Some(r), _) => read_rankings_dir(r)?,
        (None, Some(res)) => measured_rankings(&ResultMatrix::read_csv(res)?, &a.regime)?,
        (None, None) => return Err(Error::Usage("layout needs --rankings or --results".into())),
    };
    let graph = TaskGraph::from_rankings(&rankings)?;
    let mut params = cfg.ranking.layout.clone();
    params.seed = crate::experiment::derive_seed(cfg.master_seed, &["layout"]);
    let pos = fr_layout(&graph, &params)?;
    let space = TaskSpace::build(&graph, &pos);
    let path = if a.common.out.extension().is_some_and(|e| e == "json") {
        a.common.out.clone()
    } else {
        a.common.out.join("space.json")
    };
    write_stamped(&path, &json_bytes(&space)?, "layout", &cfg)?;
    for n in &space.nodes {
        println!("{:>12} {:>9.4} {:>9.4}", n.task, n.x, n.y);
    }
    Ok(())
}

/// Per target, sources ordered by measured transfer score.
fn measured_rankings(m: &ResultMatrix, regime: &str) -> Result<Vec<Ranking>> {
    let targets = m.targets(regime);
    if targets.is_empty() {
        return Err(Error::Usage(format!("no transfers for regime {regime}")));
    }
    targets
        .iter()
        .map(|t| {
            Ranking::from_scores(
                t,
                m.transfers_into(regime, t)
                    .map(|r| (r.source.clone().expect("transfer has a source"), r.mean)),
            )
        })
        .collect()
}

#[derive(Serialize)]
struct Table3Row {
    regime: String,
    rho: f64,
    ndcg: BTreeMap<String, f64>,
}

fn cmd_reproduce(a: &ReproduceArgs) -> Result<()> {
    let cfg = a.common.config()?;
    let set = TableSet::ingest(&a.tables)?;
    let (name, bytes) = match a.what {
        ReproduceWhat::Table2 => {
            let mut cells = Vec::new();
            for regime in TABLE2_REGIMES {
                let t = table2(&set, regime)?;
                println!("{regime}");
                println!("{:>8} {:>12} {:>12} {:>12}", "src\\tgt", "CR", "QA", "SL");
                for src in TaskClass::ALL {
                    let row: Vec<String> = TaskClass::ALL
                        .iter()
                        .map(|tgt| {
                            t.iter()
                                .find(|c| c.source == src && c.target == *tgt)
                                .map_or("-".into(), |c| format!("{:.1} ({})", c.mean_gain, c.positive))
                        })
                        .collect();
                    println!("{:>8} {:>12} {:>12} {:>12}", src.name().to_uppercase(), row[0], row[1], row[2]);
                }
                cells.extend(t);
            }
            ("table2.json", json_bytes(&cells)?)
        }
        ReproduceWhat::Table3Datasize => {
            let mut rows = Vec::new();
            for regime in TABLE2_REGIMES {
                let m = set.table(TaskClass::Cr, TaskClass::Cr, regime)?;
                let rankings = datasize_rankings(&set, TaskClass::Cr, TaskClass::Cr)?;
                let golds = rankings
                    .iter()
                    .map(|r| GoldRelevance::from_matrix(m, regime, &r.target, None))
                    .collect::<Result<Vec<_>>>()?;
                let pairs: Vec<_> = rankings.iter().zip(&golds).collect();
                let rho = avg_best_source_rank(&pairs)?;
                let mut nd = BTreeMap::new();
                for (label, s) in [("divide_100", RelScaling::Divide { by: 100.0 }), ("divide_10", RelScaling::Divide { by: 10.0 }), ("identity", RelScaling::Identity)] {
                    let v = pairs
                        .iter()
                        .map(|(r, g)| ndcg(r, g, g.relevance.len(), s))
                        .collect::<Result<Vec<_>>>()?;
                    nd.insert(label.to_string(), v.iter().sum::<f64>() / v.len() as f64);
                }
                println!(
                    "DataSize CR in-class {regime}: rho {rho:.2}; ndcg {}",
                    nd.iter().map(|(k, v)| format!("{k} {v:.1}")).collect::<Vec<_>>().join(", ")
                );
                rows.push(Table3Row {
                    regime: regime.to_string(),
                    rho,
                    ndcg: nd,
                });
            }
            ("table3_datasize.json", json_bytes(&rows)?)
        }
    };
    write_stamped(&a.common.out.join(name), &bytes, "reproduction", &cfg)?;
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let cfg = a.common.config()?;
    let reference = load_reference(&a.reference, &cfg)?;
    let tasks = load_task_dir(&a.tasks)?;
    let target = find_task(&tasks, &a.target)?;
    let library = LibraryIndex::load_embeddings(&a.library, embedding_method(cfg.embedding.method)?)?;
    let gold = a.gold.as_deref().map(ResultMatrix::read_csv).transpose()?;
    let report = pipeline_predict_and_verify(&cfg, &reference, target, &tasks, &library, gold.as_ref())?;
    let path = if a.common.out.extension().is_some_and(|e| e == "json") {
        a.common.out.clone()
    } else {
        a.common.out.join(format!("pipeline_{}.json", a.target))
    };
    write_stamped(&path, &json_bytes(&report)?, "pipeline_report", &cfg)?;
    println!(
        "{}: selected {} ({}); transfer {:.2} vs baseline {:.2} (gain {:+.2}%)",
        report.target,
        report.selected,
        report.method,
        report.transfer_score,
        report.baseline_score,
        100.0 * report.gain
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_subcommand_has_help_and_common_flags() {
        let mut cmd = Cli::command();
        for sub in cmd.get_subcommands_mut() {
            let leaf = if sub.get_name() == "embed" { sub.find_subcommand_mut("compute").unwrap() } else { sub };
            let help = leaf.render_help().to_string();
            assert!(!help.is_empty());
            for flag in ["--seed", "--config", "--out"] {
                assert!(help.contains(flag), "{} lacks {flag}", leaf.get_name());
            }
        }
    }

    #[test]
    fn evaluate_without_gold_is_a_usage_error() {
        let e = Cli::try_parse_from(["task-transfer", "evaluate", "--rankings", "r", "--out", "o"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = Cli::try_parse_from(["task-transfer", "pretrain", "--out", "o", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn error_reports_are_structured() {
        let e = Error::Usage("x".into());
        assert_eq!(exit_code(&e), 2);
        let v: serde_json::Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"], "usage");
        assert_eq!(exit_code(&Error::validation("y")), 1);
    }
}
