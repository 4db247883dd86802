//! End to end: build a source library, predict the best source for a new
//! target, transfer from it, and check the choice against measured transfers.

use task_transfer::experiment::{embed_task, generate_roster, pipeline_predict_and_verify, pretrain, ExperimentConfig};
use task_transfer::transfer::{run_matrix, MatrixSpec};

fn main() -> task_transfer::Result<()> {
    let mut cfg = ExperimentConfig::default().with_seed(6);
    cfg.regimes.pairs = vec![cfg.pipeline_regime.clone()];
    cfg.regimes.restarts = 2;
    let reference = pretrain(&cfg)?.extractor;
    let tasks = generate_roster(&cfg, cfg.master_seed)?;
    let target = tasks.iter().find(|t| t.id == "f1s0").unwrap();
    let library = tasks
        .iter()
        .filter(|t| t.id != target.id)
        .map(|t| embed_task(&cfg, &reference, t))
        .collect::<task_transfer::Result<Vec<_>>>()?;
    let pairs = cfg.regimes.all()?;
    let gold = run_matrix(
        &MatrixSpec {
            reference: &reference,
            tasks: &tasks,
            pairs: &pairs,
            train: &cfg.train,
            master_seed: cfg.master_seed,
            workers: rayon::current_num_threads(),
        },
        None,
    )?;
    let rep = pipeline_predict_and_verify(&cfg, &reference, target, &tasks, &library, Some(&gold))?;
    println!("ranking for {}: {}", rep.target, rep.ranking.sources().join(" > "));
    println!("selected {}: {:.2} vs {:.2} alone ({:+.1}%)", rep.selected, rep.transfer_score, rep.baseline_score, 100.0 * rep.gain);
    if let Some(g) = &rep.gold {
        println!(
            "measured best {:?}; selected source is measured #{}, best source predicted #{}; ndcg {:.1}",
            g.best, g.selected_gold_rank, g.best_predicted_rank, g.ndcg
        );
    }
    Ok(())
}
