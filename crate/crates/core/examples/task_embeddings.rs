//! TaskEmb and TextEmb vectors for a roster, stored in a library and
//! compared by cosine similarity.

use task_transfer::embeddings::{LibraryIndex, Method};
use task_transfer::experiment::{embed_task, embedding_method, generate_roster, pretrain, ExperimentConfig};
use task_transfer::rankeval::{cosine, rank_by_embedding, RankMethod};

fn main() -> task_transfer::Result<()> {
    let mut cfg = ExperimentConfig::default().with_seed(4);
    cfg.roster.templates.truncate(2);
    let reference = pretrain(&cfg)?.extractor;
    let tasks = generate_roster(&cfg, cfg.master_seed)?;
    let lib = tempfile::tempdir()?;
    for method in [RankMethod::TaskEmb, RankMethod::TextEmb] {
        cfg.embedding.method = method;
        for t in &tasks {
            LibraryIndex::add(lib.path(), &embed_task(&cfg, &reference, t)?)?;
        }
    }
    let embs = LibraryIndex::load_embeddings(lib.path(), Method::TaskEmb)?;
    for e in &embs {
        let dims: Vec<String> = e.components.iter().map(|(k, v)| format!("{k}:{}", v.dim)).collect();
        println!("{}  {}", e.task, dims.join(" "));
    }
    println!("cosine on feed_forward:");
    for a in &embs {
        let row: Vec<String> = embs
            .iter()
            .map(|b| Ok(format!("{:6.3}", cosine(a.component("feed_forward")?, b.component("feed_forward")?)?)))
            .collect::<task_transfer::Result<_>>()?;
        println!("  {}  {}", a.task, row.join(" "));
    }
    for method in [RankMethod::TaskEmb, RankMethod::TextEmb] {
        let lib_m = LibraryIndex::load_embeddings(lib.path(), embedding_method(method)?)?;
        let r = rank_by_embedding(method, &lib_m[0], &lib_m)?;
        println!("{} ranking for {}: {}", method.name(), r.target, r.sources().join(" > "));
    }
    Ok(())
}
