//! Loss-curve slopes of each source at fixed fractions of fine-tuning,
//! fused into one source ranking.

use task_transfer::experiment::{curvegrad_slopes, generate_roster, pretrain, rank_curvegrad, ExperimentConfig};
use task_transfer::rankeval::curve_slopes;

fn main() -> task_transfer::Result<()> {
    let line: Vec<f64> = (0..1000).map(|t| 1.0 - 0.001 * t as f64).collect();
    println!("slopes of a straight line: {:?}", curve_slopes(&line)?);

    let cfg = ExperimentConfig::default().with_seed(5);
    let reference = pretrain(&cfg)?.extractor;
    let tasks = generate_roster(&cfg, cfg.master_seed)?;
    let slopes = curvegrad_slopes(&cfg, &reference, &tasks)?;
    for (id, s) in &slopes {
        let s: Vec<String> = s.iter().map(|v| format!("{v:+.5}")).collect();
        println!("{id}  {}", s.join(" "));
    }
    let r = rank_curvegrad(&cfg, "f0s0", &slopes)?;
    println!("curvegrad ranking for f0s0: {}", r.sources().join(" > "));
    Ok(())
}
