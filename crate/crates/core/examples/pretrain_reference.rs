//! Masked-token pretraining of a small reference extractor, saved and
//! reloaded from disk.

use task_transfer::encoder::{load_model, save_model};
use task_transfer::experiment::{pretrain, ExperimentConfig};

fn main() -> task_transfer::Result<()> {
    let mut cfg = ExperimentConfig::default().with_seed(1);
    cfg.pretrain.steps = 100;
    let p = pretrain(&cfg)?;
    for (i, l) in p.report.losses.iter().enumerate().step_by(20) {
        println!("step {i:4}  masked-token loss {l:.4}");
    }
    println!("{} parameters, loss {:.4} -> {:.4}", p.extractor.num_params(), p.report.initial_loss, p.report.final_loss);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("reference.model");
    save_model(&path, &p.extractor, None)?;
    let (back, _) = load_model(&path, Some(&cfg.encoder))?;
    println!("reloaded {} ({} bytes), hash {}", path.display(), std::fs::metadata(&path)?.len(), &back.hash()[..16]);
    assert_eq!(back.hash(), p.extractor.hash());
    Ok(())
}
