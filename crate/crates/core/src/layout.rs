//! Force-directed (Fruchterman-Reingold) placement of tasks, with attraction
//! between two tasks given by how highly each ranks the other as a source.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::write_atomic;
use crate::rankeval::Ranking;

/// `1/r_a + 1/r_b`, where `r_a` is the rank of `a` as a source for `b` and
/// `r_b` the rank of `b` as a source for `a`.
pub fn pair_force(rank_a_for_b: f64, rank_b_for_a: f64) -> Result<f64> {
    if !(rank_a_for_b >= 1.0 && rank_b_for_a >= 1.0) {
        return Err(Error::validation(format!(
            "ranks must be at least 1, got ({rank_a_for_b}, {rank_b_for_a})"
        )));
    }
    Ok(1.0 / rank_a_for_b + 1.0 / rank_b_for_a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub iterations: usize,
    /// Side of the square frame the nodes start in.
    pub side: f64,
    /// Scale of the ideal distance `k = c * sqrt(side^2 / n)`.
    pub c: f64,
    pub cooling: f64,
    pub seed: u64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            iterations: 500,
            side: 1.0,
            c: 1.0,
            cooling: 0.95,
            seed: 0,
        }
    }
}

impl LayoutParams {
    pub fn initial_temperature(&self) -> f64 {
        self.side / 10.0
    }
}

/// Nodes and symmetric positive attraction weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    pub nodes: Vec<String>,
    weights: Vec<Vec<f64>>,
}

impl TaskGraph {
    pub fn new(nodes: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = nodes.iter().collect();
        if unique.len() != nodes.len() {
            return Err(Error::validation("duplicate node in task graph"));
        }
        let n = nodes.len();
        Ok(TaskGraph {
            nodes,
            weights: vec![vec![0.0; n]; n],
        })
    }

    pub fn set_weight(&mut self, a: usize, b: usize, w: f64) -> Result<()> {
        if a == b || !(w > 0.0 && w.is_finite()) {
            return Err(Error::validation(format!("invalid edge ({a}, {b}) with weight {w}")));
        }
        self.weights[a][b] = w;
        self.weights[b][a] = w;
        Ok(())
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights[a][b]
    }

    /// Every pair must have a positive weight.
    pub fn check_complete(&self) -> Result<()> {
        for a in 0..self.nodes.len() {
            for b in a + 1..self.nodes.len() {
                if self.weights[a][b] <= 0.0 {
                    return Err(Error::validation(format!(
                        "no weight between {} and {}",
                        self.nodes[a], self.nodes[b]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Weights from source rankings: every node is a ranking target and
    /// ranks every other node.
    pub fn from_rankings(rankings: &[Ranking]) -> Result<Self> {
        let by_target: BTreeMap<&str, &Ranking> = rankings.iter().map(|r| (r.target.as_str(), r)).collect();
        let nodes: Vec<String> = by_target.keys().map(|s| s.to_string()).collect();
        let mut g = TaskGraph::new(nodes)?;
        for a in 0..g.nodes.len() {
            for b in a + 1..g.nodes.len() {
                let rank = |src: &str, tgt: &str| {
                    by_target[tgt]
                        .rank_of(src)
                        .ok_or_else(|| Error::validation(format!("ranking for {tgt} lacks {src}")))
                };
                let w = pair_force(rank(&g.nodes[a], &g.nodes[b])?, rank(&g.nodes[b], &g.nodes[a])?)?;
                g.set_weight(a, b, w)?;
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutTrace {
    /// Largest node displacement of each iteration.
    pub max_displacement: Vec<f64>,
    /// Temperature in force during each iteration.
    pub temperature: Vec<f64>,
}

/// Runs the layout; positions are returned centred on their centroid.
pub fn fr_layout(graph: &TaskGraph, params: &LayoutParams) -> Result<Vec<[f64; 2]>> {
    Ok(fr_layout_traced(graph, params)?.0)
}

pub fn fr_layout_traced(graph: &TaskGraph, params: &LayoutParams) -> Result<(Vec<[f64; 2]>, LayoutTrace)> {
    let n = graph.nodes.len();
    if n < 2 {
        return Err(Error::validation("layout needs at least two nodes"));
    }
    graph.check_complete()?;
    if !(params.side > 0.0 && params.c > 0.0 && params.cooling > 0.0 && params.cooling < 1.0) {
        return Err(Error::validation("layout side and c must be positive and cooling in (0, 1)"));
    }
    let k = params.c * (params.side * params.side / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let half = params.side / 2.0;
    let mut pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-half..half), rng.gen_range(-half..half)]).collect();
    let mut temp = params.initial_temperature();
    let mut trace = LayoutTrace {
        max_displacement: Vec::new(),
        temperature: Vec::new(),
    };
    for _ in 0..params.iterations {
        let mut disp = vec![[0.0f64; 2]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = pos[i][0] - pos[j][0];
                let dy = pos[i][1] - pos[j][1];
                let d = (dx * dx + dy * dy).sqrt().max(1e-12);
                let f = k * k / d - graph.weight(i, j) * d * d / k;
                disp[i][0] += dx / d * f;
                disp[i][1] += dy / d * f;
            }
        }
        let mut max_move = 0.0f64;
        for (p, d) in pos.iter_mut().zip(&disp) {
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len > 0.0 {
                let step = len.min(temp);
                p[0] += d[0] / len * step;
                p[1] += d[1] / len * step;
                max_move = max_move.max(step);
            }
        }
        trace.max_displacement.push(max_move);
        trace.temperature.push(temp);
        temp *= params.cooling;
        if max_move < 1e-6 * params.side {
            break;
        }
    }
    let cx = pos.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = pos.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    for p in &mut pos {
        p[0] -= cx;
        p[1] -= cy;
    }
    Ok((pos, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePosition {
    pub task: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpace {
    pub nodes: Vec<NodePosition>,
    pub edges: Vec<Edge>,
}

impl TaskSpace {
    pub fn build(graph: &TaskGraph, pos: &[[f64; 2]]) -> Self {
        let nodes = graph
            .nodes
            .iter()
            .zip(pos)
            .map(|(t, p)| NodePosition {
                task: t.clone(),
                x: p[0],
                y: p[1],
            })
            .collect();
        let mut edges = Vec::new();
        for a in 0..graph.nodes.len() {
            for b in a + 1..graph.nodes.len() {
                edges.push(Edge {
                    a: graph.nodes[a].clone(),
                    b: graph.nodes[b].clone(),
                    weight: graph.weight(a, b),
                });
            }
        }
        TaskSpace { nodes, edges }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    fn graph(n: usize, w: f64) -> TaskGraph {
        let mut g = TaskGraph::new((0..n).map(|i| format!("t{i}")).collect()).unwrap();
        for a in 0..n {
            for b in a + 1..n {
                g.set_weight(a, b, w).unwrap();
            }
        }
        g
    }

    #[test]
    fn pair_force_examples() {
        assert_eq!(pair_force(1.0, 1.0).unwrap(), 2.0);
        assert!((pair_force(2.0, 3.0).unwrap() - 0.8333).abs() < 1e-4);
        assert_eq!(pair_force(2.0, 3.0).unwrap(), pair_force(3.0, 2.0).unwrap());
        assert!(matches!(pair_force(0.5, 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn equal_weights_give_an_equilateral_triangle() {
        for seed in 0..5 {
            let p = fr_layout(&graph(3, 1.0), &LayoutParams { seed, ..Default::default() }).unwrap();
            let d = [dist(p[0], p[1]), dist(p[1], p[2]), dist(p[0], p[2])];
            let mean = d.iter().sum::<f64>() / 3.0;
            for x in d {
                assert!((x - mean).abs() / mean < 0.02, "{d:?}");
            }
        }
    }

    #[test]
    fn stronger_attraction_shortens_the_distance() {
        let params = LayoutParams { seed: 3, ..Default::default() };
        let strong = fr_layout(&graph(2, 2.0), &params).unwrap();
        let weak = fr_layout(&graph(2, 0.5), &params).unwrap();
        assert!(dist(strong[0], strong[1]) < dist(weak[0], weak[1]));
        // Centred output: the two points are mirror images.
        assert!((strong[0][0] + strong[1][0]).abs() < 1e-12);
    }

    #[test]
    fn layout_is_deterministic_and_moves_at_most_the_temperature() {
        let mut g = graph(5, 1.0);
        g.set_weight(0, 1, 2.0).unwrap();
        let params = LayoutParams { seed: 9, ..Default::default() };
        let (a, trace) = fr_layout_traced(&g, &params).unwrap();
        assert_eq!(a, fr_layout(&g, &params).unwrap());
        for (m, t) in trace.max_displacement.iter().zip(&trace.temperature) {
            assert!(m <= t);
        }
        let cx: f64 = a.iter().map(|p| p[0]).sum();
        assert!(cx.abs() < 1e-12);
    }

    #[test]
    fn graph_from_rankings() {
        let r = |t: &str, order: &[&str]| Ranking::from_scores(t, order.iter().enumerate().map(|(i, s)| (s.to_string(), -(i as f64)))).unwrap();
        let rankings = vec![r("a", &["b", "c"]), r("b", &["c", "a"]), r("c", &["a", "b"])];
        let g = TaskGraph::from_rankings(&rankings).unwrap();
        // b is 1st for a, a is 2nd for b.
        assert_eq!(g.weight(0, 1), 1.5);
        assert_eq!(g.weight(1, 0), 1.5);
        let space = TaskSpace::build(&g, &fr_layout(&g, &LayoutParams::default()).unwrap());
        assert_eq!(space.nodes.len(), 3);
        assert_eq!(space.edges.len(), 3);
        assert!(TaskGraph::from_rankings(&rankings[..1]).is_ok());
        assert!(fr_layout(&TaskGraph::from_rankings(&rankings[..1]).unwrap(), &LayoutParams::default()).is_err());
        let missing = vec![r("a", &["b"]), r("b", &["c"])];
        assert!(TaskGraph::from_rankings(&missing).is_err());
    }


    proptest::proptest! {
        #[test]
        fn moves_are_bounded_and_output_is_centred(
            weights in proptest::collection::vec(0.05f64..3.0, 6),
            seed in 0u64..1000,
        ) {
            let mut g = graph(4, 1.0);
            let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
            for ((a, b), w) in pairs.into_iter().zip(&weights) {
                g.set_weight(a, b, *w).unwrap();
            }
            let (pos, trace) = fr_layout_traced(&g, &LayoutParams { seed, ..Default::default() }).unwrap();
            for (m, t) in trace.max_displacement.iter().zip(&trace.temperature) {
                proptest::prop_assert!(m <= t);
            }
            let cx: f64 = pos.iter().map(|p| p[0]).sum();
            let cy: f64 = pos.iter().map(|p| p[1]).sum();
            proptest::prop_assert!(cx.abs() < 1e-9 && cy.abs() < 1e-9);
        }

        #[test]
        fn pair_force_is_symmetric_and_positive(a in 1.0f64..50.0, b in 1.0f64..50.0) {
            let f = pair_force(a, b).unwrap();
            proptest::prop_assert!(f > 0.0);
            proptest::prop_assert_eq!(f, pair_force(b, a).unwrap());
        }
    }
}
