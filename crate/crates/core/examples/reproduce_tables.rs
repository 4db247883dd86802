//! Aggregates over the bundled published result tables: mean best-source
//! gain per class pair, and the DataSize heuristic scored against them.

use std::path::Path;

use task_transfer::rankeval::{avg_best_source_rank, datasize_rankings, ndcg, table2, GoldRelevance, RelScaling, TableSet, TABLE2_REGIMES};
use task_transfer::tasks::TaskClass;

fn main() -> task_transfer::Result<()> {
    let set = TableSet::ingest(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tables"))?;
    for regime in TABLE2_REGIMES {
        println!("{regime}");
        for c in table2(&set, regime)? {
            println!("  {} -> {}  {:5.1}% ({} of {} targets gain)", c.source.name(), c.target.name(), c.mean_gain, c.positive, c.targets);
        }
    }
    for regime in TABLE2_REGIMES {
        let m = set.table(TaskClass::Cr, TaskClass::Cr, regime)?;
        let rankings = datasize_rankings(&set, TaskClass::Cr, TaskClass::Cr)?;
        let golds = rankings
            .iter()
            .map(|r| GoldRelevance::from_matrix(m, regime, &r.target, None))
            .collect::<task_transfer::Result<Vec<_>>>()?;
        let pairs: Vec<_> = rankings.iter().zip(&golds).collect();
        let nd: f64 = pairs
            .iter()
            .map(|(r, g)| ndcg(r, g, g.relevance.len(), RelScaling::default()))
            .sum::<task_transfer::Result<f64>>()?
            / pairs.len() as f64;
        println!("DataSize on CR {regime}: rho {:.2}, ndcg {nd:.1}", avg_best_source_rank(&pairs)?);
    }
    Ok(())
}
