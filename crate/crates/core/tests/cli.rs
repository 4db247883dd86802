use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use task_transfer::experiment::{ArtifactStamp, ExperimentConfig};
use task_transfer::rankeval::Table2Cell;
use task_transfer::tasks::{FamilyTemplate, TaskClass};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_task-transfer")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = bin(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn tiny(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::default();
    cfg.encoder.vocab_size = 64;
    cfg.encoder.d_model = 8;
    cfg.encoder.n_layers = 1;
    cfg.encoder.d_ffn = 16;
    cfg.encoder.max_len = 32;
    cfg.pretrain.steps = 3;
    cfg.corpus_sentences = 40;
    cfg.roster.templates = vec![FamilyTemplate::MarkerPresence, FamilyTemplate::KeyedSpan];
    cfg.roster.n_train = 12;
    cfg.roster.n_dev = 6;
    cfg.train.epochs = TaskClass::ALL.into_iter().map(|c| (c, 1)).collect();
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn stamp_of(path: &Path) -> ArtifactStamp {
    serde_json::from_str(&fs::read_to_string(format!("{}.manifest.json", path.display())).unwrap()).unwrap()
}

#[test]
fn embed_rank_layout_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let d = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let common = ["--config", &cfg, "--seed", "5"];
    let with = |mut a: Vec<String>| {
        a.extend(common.iter().map(|s| s.to_string()));
        a
    };
    let run = |a: Vec<String>| ok(&with(a).iter().map(String::as_str).collect::<Vec<_>>());
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    run(s(&["pretrain", "--out", &d("ref")]));
    run(s(&["gen-tasks", "--out", &d("tasks")]));
    let model = d("ref/reference.model");
    run(s(&["embed", "compute", "--reference", &model, "--tasks", &d("tasks"), "--out", &d("lib")]));
    let out = run(s(&["rank", "--method", "taskemb", "--library", &d("lib"), "--target", "f0s0", "--out", &d("ranks")]));
    assert!(out.starts_with("f0s0: "));
    run(s(&["rank", "--method", "taskemb", "--library", &d("lib"), "--out", &d("all")]));
    run(s(&["layout", "--rankings", &d("all"), "--out", &d("space")]));
    run(s(&["run-matrix", "--reference", &model, "--tasks", &d("tasks"), "--regimes", "full-full", "--out", &d("matrix")]));
    run(s(&["layout", "--results", &d("matrix/results.csv"), "--out", &d("measured")]));
    assert!(tmp.path().join("measured/space.json").exists());

    let ranks = tmp.path().join("ranks/taskemb_f0s0.csv");
    let text = fs::read_to_string(&ranks).unwrap();
    assert_eq!(text.lines().next().unwrap(), "target,source,score,rank");
    assert_eq!(text.lines().count(), 4);
    let stamp = stamp_of(&ranks);
    assert_eq!(stamp.kind, "rankings");
    assert_eq!(stamp.master_seed, 5);
    assert_eq!(stamp.sha256, task_transfer::experiment::sha256_hex(text.as_bytes()));

    let space: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("space/space.json")).unwrap()).unwrap();
    assert_eq!(space["nodes"].as_array().unwrap().len(), 4);
    assert_eq!(space["edges"].as_array().unwrap().len(), 6);
    assert!(tmp.path().join("ref/experiment.json").exists());
}

#[test]
fn reproduce_table2_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["reproduce", "table2", "--out", tmp.path().to_str().unwrap()]);
    assert!(out.contains("full-full"));
    let cells: Vec<Table2Cell> = serde_json::from_str(&fs::read_to_string(tmp.path().join("table2.json")).unwrap()).unwrap();
    assert_eq!(cells.len(), 27);
    let cr = cells
        .iter()
        .find(|c| c.regime == "full-full" && c.source == TaskClass::Cr && c.target == TaskClass::Cr)
        .unwrap();
    assert!((cr.mean_gain - 6.3).abs() < 0.1);
    assert_eq!(cr.positive, 11);
}

fn error_of(o: &Output) -> serde_json::Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap()
}

#[test]
fn failures_exit_nonzero_with_structured_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();

    let o = bin(&["evaluate", "--rankings", "r.csv", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    fs::create_dir(tmp.path().join("empty")).unwrap();
    let o = bin(&["rank", "--method", "taskemb", "--library", tmp.path().join("empty").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o)["error"], "usage");

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"master_seed": 1, "no_such_field": 2}"#).unwrap();
    let o = bin(&["pretrain", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_of(&o)["error"], "parse");

    let o = bin(&["layout", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let o = bin(&["rank", "--method", "datasize", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_of(&o)["message"].as_str().unwrap().contains("--tasks"));
}

#[test]
fn an_output_directory_keeps_one_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let out = tmp.path().join("tasks");
    let out = out.to_str().unwrap();
    ok(&["gen-tasks", "--config", &cfg, "--seed", "1", "--out", out]);
    ok(&["gen-tasks", "--config", &cfg, "--seed", "1", "--out", out]);
    let o = bin(&["gen-tasks", "--config", &cfg, "--seed", "2", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_of(&o)["error"], "config_mismatch");
}
