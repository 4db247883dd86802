//! The synthetic roster: one family per template, sibling tasks within a
//! family, written to and read back from dataset files.

use task_transfer::experiment::{generate_roster, ExperimentConfig};
use task_transfer::tasks::{load_task_dir, store_task};

fn main() -> task_transfer::Result<()> {
    let cfg = ExperimentConfig::default().with_seed(2);
    let tasks = generate_roster(&cfg, cfg.master_seed)?;
    for t in &tasks {
        let ex = &t.train[0];
        println!(
            "{:6} {:2} {:?} train {} dev {}  e.g. {:?} -> {:?}",
            t.id,
            t.class.name(),
            t.metric,
            t.train.len(),
            t.dev.len(),
            ex.segments,
            ex.target
        );
    }
    let dir = tempfile::tempdir()?;
    for t in &tasks {
        store_task(dir.path(), t)?;
    }
    let back = load_task_dir(dir.path())?;
    assert_eq!(back, tasks);
    println!("{} tasks round-tripped through {}", back.len(), dir.path().display());
    Ok(())
}
