//! Force-directed map of a task space where tasks that rank each other
//! highly as sources attract.

use task_transfer::layout::{fr_layout, LayoutParams, TaskGraph, TaskSpace};
use task_transfer::rankeval::Ranking;

fn main() -> task_transfer::Result<()> {
    // Two clusters {a, b, c} and {x, y}: each task ranks its own cluster first.
    let tasks = ["a", "b", "c", "x", "y"];
    let cluster = |t: &str| if "abc".contains(t) { 0 } else { 1 };
    let rankings: Vec<Ranking> = tasks
        .iter()
        .map(|t| {
            let scores = tasks
                .iter()
                .filter(|s| *s != t)
                .map(|s| (s.to_string(), if cluster(s) == cluster(t) { 1.0 } else { 0.0 } - s.as_bytes()[0] as f64 * 1e-3));
            Ranking::from_scores(t, scores)
        })
        .collect::<task_transfer::Result<_>>()?;
    let graph = TaskGraph::from_rankings(&rankings)?;
    let pos = fr_layout(&graph, &LayoutParams::default())?;
    let space = TaskSpace::build(&graph, &pos);
    for n in &space.nodes {
        println!("{}  ({:+.4}, {:+.4})", n.task, n.x, n.y);
    }
    for e in &space.edges {
        println!("{}-{}  force {:.3}", e.a, e.b, e.weight);
    }
    Ok(())
}
