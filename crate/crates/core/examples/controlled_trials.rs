//! Sibling-versus-unrelated trials on a synthetic roster: does the task
//! embedding pick the sibling, and does transfer from it help more?

use std::time::Instant;

use task_transfer::experiment::{controlled_trial, pretrain, ExperimentConfig};

fn main() -> task_transfer::Result<()> {
    let trials: usize = std::env::args().nth(1).map_or(Ok(20), |a| a.parse()).expect("trial count");
    let seed: u64 = std::env::args().nth(2).map_or(Ok(7), |a| a.parse()).expect("seed");
    let cfg = ExperimentConfig::default().with_seed(seed);
    let t0 = Instant::now();
    let reference = pretrain(&cfg)?;
    println!("pretrained in {:.1?}: loss {:.3} -> {:.3}", t0.elapsed(), reference.report.initial_loss, reference.report.final_loss);
    let (mut picked, mut helped) = (0, 0);
    for trial in 0..trials {
        let t = Instant::now();
        let o = controlled_trial(&cfg, &reference.extractor, trial)?;
        picked += o.sibling_first as usize;
        helped += (o.sibling_score > o.unrelated_score) as usize;
        println!(
            "trial {trial:2} target {} top {} sibling-first {} | sibling {:.2} unrelated {} {:.2} baseline {:.2} ({:.1?})",
            o.target,
            o.ranking.top().unwrap_or("-"),
            o.sibling_first,
            o.sibling_score,
            o.unrelated,
            o.unrelated_score,
            o.baseline_score,
            t.elapsed()
        );
    }
    println!("sibling ranked first: {picked}/{trials}; sibling transfer better: {helped}/{trials}; total {:.1?}", t0.elapsed());
    Ok(())
}
