//! Experiment configuration, seed derivation, artifact persistence and the
//! end-to-end select-then-transfer pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{task_emb, text_task_emb, FisherMode, Method, TaskEmbConfig, TaskEmbedding};
use crate::encoder::{EncoderConfig, FeatureExtractor, Model, TaskHead};
use crate::error::{Error, Result};
use crate::layout::LayoutParams;
use crate::rankeval::{curvegrad_features, ndcg, rank_by_curvegrad, rank_by_embedding, GoldRelevance, RankMethod, Ranking, RelScaling, SlopeOrder};
use crate::tasks::{generate_siblings, markov_corpus, pretrain_reference_model, roster, token_space, FamilyTemplate, PretrainConfig, Pretrained, Task, TaskClass};
use crate::transfer::{baseline, relative_transfer_gain, stilts_transfer, RegimePair, ResultMatrix, TrainSettings};

/// Per-run seed: the first eight bytes (little-endian) of
/// `SHA-256(master_le || len(label_1) || label_1 || ...)`, with lengths as
/// little-endian `u64`. Any cell of an experiment can be re-run in isolation
/// from the master seed and its label path.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RosterConfig {
    pub templates: Vec<FamilyTemplate>,
    pub siblings: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub noise: f64,
}

impl Default for RosterConfig {
    fn default() -> Self {
        RosterConfig {
            templates: FamilyTemplate::ALL.to_vec(),
            siblings: 2,
            n_train: 200,
            n_dev: 100,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeSettings {
    pub pairs: Vec<String>,
    pub limit: usize,
    pub restarts: usize,
}

impl Default for RegimeSettings {
    fn default() -> Self {
        RegimeSettings {
            pairs: vec!["full-full".into(), "full-limited".into(), "limited-limited".into()],
            limit: 32,
            restarts: 3,
        }
    }
}

impl RegimeSettings {
    pub fn parse(&self, name: &str) -> Result<RegimePair> {
        RegimePair::parse(name, self.limit, self.restarts)
    }

    pub fn all(&self) -> Result<Vec<RegimePair>> {
        self.pairs.iter().map(|p| self.parse(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub method: RankMethod,
    pub fisher: FisherMode,
    /// Fine-tune only the head before measuring the Fisher.
    pub freeze_extractor: bool,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            method: RankMethod::TaskEmb,
            fisher: FisherMode::Empirical,
            freeze_extractor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankSettings {
    pub rel_scaling: RelScaling,
    pub slope_order: SlopeOrder,
    pub curvegrad_steps: usize,
    pub layout: LayoutParams,
}

impl Default for RankSettings {
    fn default() -> Self {
        RankSettings {
            rel_scaling: RelScaling::default(),
            slope_order: SlopeOrder::default(),
            curvegrad_steps: 200,
            layout: LayoutParams::default(),
        }
    }
}

/// Everything that determines an experiment's artifacts. `out_root` only
/// says where they go and is left out of the hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub corpus_sentences: usize,
    pub roster: RosterConfig,
    pub regimes: RegimeSettings,
    pub train: TrainSettings,
    pub embedding: EmbeddingSettings,
    pub ranking: RankSettings,
    /// Regime pair of the pipeline's verification transfer.
    pub pipeline_regime: String,
    pub master_seed: u64,
    pub out_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            corpus_sentences: 2000,
            roster: RosterConfig::default(),
            regimes: RegimeSettings::default(),
            train: TrainSettings {
                lr: 0.2,
                epochs: TaskClass::ALL.into_iter().map(|c| (c, 6)).collect(),
                ..TrainSettings::default()
            },
            embedding: EmbeddingSettings::default(),
            ranking: RankSettings::default(),
            pipeline_regime: "full-limited".into(),
            master_seed: 0,
            out_root: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Copies the master seed into the places that take their own seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.encoder.seed = derive_seed(seed, &["encoder"]);
        self.pretrain.seed = derive_seed(seed, &["pretrain"]);
        self
    }

    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_root = PathBuf::new();
        Ok(serde_json::to_string(&c)?)
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }

    pub fn taskemb_config(&self, task: &Task) -> TaskEmbConfig {
        let mut train = self.train.for_class(task.class);
        train.freeze_extractor = self.embedding.freeze_extractor;
        TaskEmbConfig {
            train,
            fisher: self.embedding.fisher,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.regimes.all()?;
        self.regimes.parse(&self.pipeline_regime)?;
        if self.roster.siblings == 0 || self.roster.templates.is_empty() {
            return Err(Error::validation("roster needs at least one family and one sibling"));
        }
        Ok(())
    }
}

/// Provenance written next to every artifact as `<file>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactStamp {
    pub kind: String,
    pub file: String,
    pub sha256: String,
    pub config_hash: String,
    pub master_seed: u64,
}

pub fn stamp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the stamp for an artifact already on disk.
pub fn stamp_artifact(path: &Path, kind: &str, cfg: &ExperimentConfig) -> Result<ArtifactStamp> {
    let stamp = ArtifactStamp {
        kind: kind.to_string(),
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_hex(&fs::read(path)?),
        config_hash: cfg.config_hash()?,
        master_seed: cfg.master_seed,
    };
    write_atomic(&stamp_path(path), (serde_json::to_string_pretty(&stamp)? + "\n").as_bytes())?;
    Ok(stamp)
}

/// Atomic write plus stamp.
pub fn write_stamped(path: &Path, bytes: &[u8], kind: &str, cfg: &ExperimentConfig) -> Result<ArtifactStamp> {
    write_atomic(path, bytes)?;
    stamp_artifact(path, kind, cfg)
}

/// Top-level record of the configuration an output directory was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
}

pub const EXPERIMENT_MANIFEST: &str = "experiment.json";

/// Writes `experiment.json` under `out`, refusing to mix configurations in
/// one directory.
pub fn write_experiment_manifest(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = out.join(EXPERIMENT_MANIFEST);
    let hash = cfg.config_hash()?;
    if path.exists() {
        let old: ExperimentManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if old.config_hash != hash {
            return Err(Error::ConfigMismatch(format!(
                "{} was built with configuration {}, not {hash}",
                out.display(),
                old.config_hash
            )));
        }
        return Ok(());
    }
    let mut config = cfg.clone();
    config.out_root = PathBuf::new();
    let m = ExperimentManifest {
        config_hash: hash,
        master_seed: cfg.master_seed,
        config,
    };
    write_atomic(&path, (serde_json::to_string_pretty(&m)? + "\n").as_bytes())
}

/// Pretrains the reference extractor on a Markov corpus over the synthetic
/// token space.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<Pretrained> {
    let corpus = markov_corpus(token_space(&cfg.encoder), cfg.corpus_sentences, derive_seed(cfg.master_seed, &["corpus"]));
    pretrain_reference_model(&corpus, &cfg.encoder, &cfg.pretrain)
}

pub fn sibling_id(family: usize, sibling: usize) -> String {
    format!("f{family}s{sibling}")
}

/// Tasks of the configured roster, family by family; ids are `f<i>s<j>`.
pub fn generate_roster(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Task>> {
    let r = &cfg.roster;
    let families = roster(&r.templates, &cfg.encoder, r.noise, derive_seed(seed, &["roster"]))?;
    let mut tasks = Vec::new();
    for (i, f) in families.iter().enumerate() {
        let ids: Vec<String> = (0..r.siblings).map(|j| sibling_id(i, j)).collect();
        tasks.extend(generate_siblings(f, &ids, r.n_train, r.n_dev, derive_seed(seed, &["family", &i.to_string()]))?);
    }
    Ok(tasks)
}

/// Embedding of `task` by the configured method.
pub fn embed_task(cfg: &ExperimentConfig, reference: &FeatureExtractor, task: &Task) -> Result<TaskEmbedding> {
    let hash = cfg.config_hash()?;
    match cfg.embedding.method {
        RankMethod::TextEmb => text_task_emb(reference, task, &hash),
        RankMethod::TaskEmb | RankMethod::TextTask => task_emb(reference, task, &cfg.taskemb_config(task), cfg.master_seed, &hash),
        m => Err(Error::Usage(format!("{} is not an embedding method", m.name()))),
    }
}

pub fn embedding_method(m: RankMethod) -> Result<Method> {
    match m {
        RankMethod::TextEmb => Ok(Method::TextEmb),
        RankMethod::TaskEmb | RankMethod::TextTask => Ok(Method::TaskEmb),
        m => Err(Error::Usage(format!("{} does not use embeddings", m.name()))),
    }
}

/// Loss-curve slopes of every source fine-tuned from the reference model.
pub fn curvegrad_slopes(cfg: &ExperimentConfig, reference: &FeatureExtractor, sources: &[Task]) -> Result<BTreeMap<String, [f64; 5]>> {
    sources
        .par_iter()
        .map(|s| {
            let head = TaskHead::init(s.head_kind(), reference.config.d_model, derive_seed(cfg.master_seed, &["curvegrad", &s.id, "head"]))?;
            let mut model = Model::new(reference.clone(), head)?;
            let slopes = curvegrad_features(
                &mut model,
                s,
                cfg.ranking.curvegrad_steps,
                &cfg.train.for_class(s.class),
                derive_seed(cfg.master_seed, &["curvegrad", &s.id, "shuffle"]),
            )?;
            Ok((s.id.clone(), slopes))
        })
        .collect()
}

pub fn rank_curvegrad(cfg: &ExperimentConfig, target: &str, slopes: &BTreeMap<String, [f64; 5]>) -> Result<Ranking> {
    let others: BTreeMap<String, [f64; 5]> = slopes.iter().filter(|(k, _)| *k != target).map(|(k, v)| (k.clone(), *v)).collect();
    rank_by_curvegrad(target, &others, cfg.ranking.slope_order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldCheck {
    pub best: Vec<String>,
    pub selected_gold_rank: f64,
    pub best_predicted_rank: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub target: String,
    pub method: String,
    pub regime: String,
    pub ranking: Ranking,
    pub selected: String,
    pub transfer_score: f64,
    pub baseline_score: f64,
    pub gain: f64,
    pub gold: Option<GoldCheck>,
    pub config_hash: String,
    pub master_seed: u64,
}

/// Embeds the target, ranks the library, transfers from the top-ranked
/// source and compares with the target trained alone. With a result matrix,
/// also scores the ranking against the measured transfers.
pub fn pipeline_predict_and_verify(
    cfg: &ExperimentConfig,
    reference: &FeatureExtractor,
    target: &Task,
    sources: &[Task],
    library: &[TaskEmbedding],
    gold: Option<&ResultMatrix>,
) -> Result<PipelineReport> {
    let lib: Vec<TaskEmbedding> = library.iter().filter(|e| e.task != target.id).cloned().collect();
    if lib.is_empty() {
        return Err(Error::Usage(
            "embedding library is empty; compute source embeddings with `embed` first".into(),
        ));
    }
    let emb = embed_task(cfg, reference, target)?;
    let ranking = rank_by_embedding(cfg.embedding.method, &emb, &lib)?;
    let selected = ranking.top().expect("non-empty library").to_string();
    let source = sources
        .iter()
        .find(|s| s.id == selected)
        .ok_or_else(|| Error::validation(format!("selected source {selected} is not among the loaded tasks")))?;
    let pair = cfg.regimes.parse(&cfg.pipeline_regime)?;
    let rec = stilts_transfer(
        reference,
        source,
        target,
        &pair,
        &cfg.train.for_class(source.class),
        &cfg.train.for_class(target.class),
        cfg.master_seed,
    )?;
    let (base, _, _) = baseline(reference, target, &pair.target, &cfg.train.for_class(target.class), cfg.master_seed)?;
    let gold = match gold {
        Some(m) => {
            let g = GoldRelevance::from_matrix(m, &pair.name(), &target.id, None)?;
            let keep: std::collections::BTreeSet<String> = g.relevance.keys().cloned().collect();
            let r = ranking.restrict(&keep)?;
            let best_rank = g.best.iter().filter_map(|b| r.rank_of(b)).sum::<f64>() / g.best.len() as f64;
            let gold_ranking = Ranking::from_scores(&target.id, g.relevance.iter().map(|(s, v)| (s.clone(), *v)))?;
            Some(GoldCheck {
                best: g.best.clone(),
                selected_gold_rank: gold_ranking.rank_of(&selected).unwrap_or(f64::NAN),
                best_predicted_rank: best_rank,
                ndcg: ndcg(&r, &g, g.relevance.len(), cfg.ranking.rel_scaling)?,
            })
        }
        None => None,
    };
    Ok(PipelineReport {
        target: target.id.clone(),
        method: cfg.embedding.method.name().to_string(),
        regime: pair.name(),
        ranking,
        selected,
        transfer_score: rec.mean,
        baseline_score: base,
        gain: relative_transfer_gain(rec.mean, base).unwrap_or(f64::NAN),
        gold,
        config_hash: cfg.config_hash()?,
        master_seed: cfg.master_seed,
    })
}

/// Outcome of one controlled trial: a target with one sibling in a roster
/// of otherwise unrelated tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub target: String,
    pub sibling: String,
    pub unrelated: String,
    pub ranking: Ranking,
    /// The sibling outranks every unrelated source.
    pub sibling_first: bool,
    pub sibling_score: f64,
    pub unrelated_score: f64,
    pub baseline_score: f64,
}

/// Generates a fresh roster for `trial`, ranks the target's sources by the
/// configured embedding, and compares transfer from the sibling with
/// transfer from a randomly drawn unrelated source.
pub fn controlled_trial(cfg: &ExperimentConfig, reference: &FeatureExtractor, trial: usize) -> Result<TrialOutcome> {
    if cfg.roster.siblings < 2 || cfg.roster.templates.len() < 2 {
        return Err(Error::validation("a controlled trial needs two families with two siblings each"));
    }
    let t = trial.to_string();
    let seed = derive_seed(cfg.master_seed, &["trial", &t]);
    let tasks = generate_roster(cfg, seed)?;
    let fam = trial % cfg.roster.templates.len();
    let target_id = sibling_id(fam, 0);
    let sibling = sibling_id(fam, 1);
    let prefix = format!("f{fam}s");
    let unrelated: Vec<&Task> = tasks.iter().filter(|x| !x.id.starts_with(&prefix)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["unrelated"]));
    let pick = unrelated.choose(&mut rng).expect("other families").id.clone();

    let mut tcfg = cfg.clone();
    tcfg.master_seed = seed;
    let embs: Vec<TaskEmbedding> = tasks.par_iter().map(|x| embed_task(&tcfg, reference, x)).collect::<Result<_>>()?;
    let target_emb = embs.iter().find(|e| e.task == target_id).expect("target embedded");
    let ranking = rank_by_embedding(cfg.embedding.method, target_emb, &embs)?;
    let sib_rank = ranking.rank_of(&sibling).expect("sibling ranked");
    let sibling_first = ranking
        .entries
        .iter()
        .filter(|e| !e.source.starts_with(&prefix))
        .all(|e| e.rank > sib_rank);

    let get = |id: &str| tasks.iter().find(|x| x.id == id).expect("roster task");
    let target = get(&target_id);
    let pair = cfg.regimes.parse(&cfg.pipeline_regime)?;
    let tcfg_t = cfg.train.for_class(target.class);
    let run = |src: &Task| stilts_transfer(reference, src, target, &pair, &cfg.train.for_class(src.class), &tcfg_t, seed);
    let (s, u) = rayon::join(|| run(get(&sibling)), || run(get(&pick)));
    let (base, _, _) = baseline(reference, target, &pair.target, &tcfg_t, seed)?;
    Ok(TrialOutcome {
        trial,
        target: target_id,
        sibling,
        unrelated: pick,
        ranking,
        sibling_first,
        sibling_score: s?.mean,
        unrelated_score: u?.mean,
        baseline_score: base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_label_sensitive() {
        let a = derive_seed(1, &["target", "t0", "0"]);
        assert_eq!(a, derive_seed(1, &["target", "t0", "0"]));
        assert_ne!(a, derive_seed(2, &["target", "t0", "0"]));
        assert_ne!(a, derive_seed(1, &["target", "t0", "1"]));
        // Length prefixes keep label boundaries unambiguous.
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert!(!dir.path().join("sub/x.txt.tmp").exists());
    }

    #[test]
    fn config_hash_ignores_the_output_root() {
        let a = ExperimentConfig::default().with_seed(3);
        let mut b = a.clone();
        b.out_root = PathBuf::from("/elsewhere");
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_ne!(a.config_hash().unwrap(), ExperimentConfig::default().with_seed(4).config_hash().unwrap());
    }

    #[test]
    fn partial_config_files_take_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"encoder": {"d_model": 16}, "master_seed": 5}"#).unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.encoder.d_model, 16);
        assert_eq!(c.encoder.vocab_size, 256);
        assert_eq!(c.master_seed, 5);
        fs::write(&p, r#"{"bogus": 1}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn stamps_record_hash_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default().with_seed(2);
        let p = dir.path().join("a.csv");
        let s = write_stamped(&p, b"x,y\n", "results", &cfg).unwrap();
        assert_eq!(s.sha256, sha256_hex(b"x,y\n"));
        let back: ArtifactStamp = serde_json::from_str(&fs::read_to_string(stamp_path(&p)).unwrap()).unwrap();
        assert_eq!(back, s);
        write_experiment_manifest(dir.path(), &cfg).unwrap();
        write_experiment_manifest(dir.path(), &cfg).unwrap();
        assert!(matches!(
            write_experiment_manifest(dir.path(), &ExperimentConfig::default().with_seed(9)),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn roster_ids_and_sizes() {
        let mut cfg = ExperimentConfig::default();
        cfg.roster.n_train = 10;
        cfg.roster.n_dev = 5;
        let tasks = generate_roster(&cfg, 1).unwrap();
        assert_eq!(tasks.len(), 8);
        assert_eq!(tasks[3].id, "f1s1");
        assert!(tasks.iter().all(|t| t.train.len() == 10 && t.dev.len() == 5));
        assert_eq!(tasks, generate_roster(&cfg, 1).unwrap());
    }

    #[test]
    fn pipeline_with_one_source_selects_it() {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder = EncoderConfig {
            vocab_size: 40,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 8,
            max_len: 24,
            ..Default::default()
        };
        cfg.roster.n_train = 12;
        cfg.roster.n_dev = 6;
        cfg.roster.templates = vec![FamilyTemplate::MarkerPresence];
        cfg.regimes.limit = 4;
        cfg.regimes.restarts = 1;
        cfg.train.epochs.values_mut().for_each(|e| *e = 1);
        let tasks = generate_roster(&cfg, 0).unwrap();
        let fe = FeatureExtractor::init(&cfg.encoder).unwrap();
        let lib = vec![embed_task(&cfg, &fe, &tasks[1]).unwrap()];
        let a = pipeline_predict_and_verify(&cfg, &fe, &tasks[0], &tasks, &lib, None).unwrap();
        assert_eq!(a.selected, "f0s1");
        assert_eq!(a, pipeline_predict_and_verify(&cfg, &fe, &tasks[0], &tasks, &lib, None).unwrap());
        assert!(matches!(
            pipeline_predict_and_verify(&cfg, &fe, &tasks[0], &tasks, &[], None),
            Err(Error::Usage(_))
        ));
    }
}
