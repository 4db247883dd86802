//! Two-stage transfer into a limited-data target: from its sibling, from an
//! unrelated task, and the target trained alone.

use task_transfer::experiment::{generate_roster, pretrain, ExperimentConfig};
use task_transfer::transfer::{baseline, relative_transfer_gain, stilts_transfer};

fn main() -> task_transfer::Result<()> {
    let cfg = ExperimentConfig::default().with_seed(3);
    let reference = pretrain(&cfg)?.extractor;
    let tasks = generate_roster(&cfg, cfg.master_seed)?;
    let get = |id: &str| tasks.iter().find(|t| t.id == id).unwrap();
    let target = get("f0s0");
    let pair = cfg.regimes.parse("full-limited")?;
    let tcfg = cfg.train.for_class(target.class);
    let (base, std, _) = baseline(&reference, target, &pair.target, &tcfg, cfg.master_seed)?;
    println!("{} alone ({}): {base:.2} +- {std:.2}", target.id, pair.name());
    for src in ["f0s1", "f2s0", "f3s1"] {
        let s = get(src);
        let rec = stilts_transfer(&reference, s, target, &pair, &cfg.train.for_class(s.class), &tcfg, cfg.master_seed)?;
        println!(
            "{src} -> {}: {:.2} +- {:.2}  gain {:+.1}%",
            target.id,
            rec.mean,
            rec.std,
            100.0 * relative_transfer_gain(rec.mean, base)?
        );
    }
    Ok(())
}
