//! Random-walk context generation and negative sampling for the graph-context
//! objective.
//!
//! Walk generation is stateless: walk (t, v, w) draws from an RNG derived from
//! (seed, t, v, w), so the walk set is identical however the work is split.
//! Training does not materialize the full context-pair multiset; [`PairIndex`]
//! plus [`sample_pairs`] draw uniformly from it on demand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{NodeId, Snapshot};
use crate::seeds::{self, stream};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("window {window} exceeds walk length {walk_length}")]
    WindowTooLarge { window: usize, walk_length: usize },
    #[error("negative table is empty (no node has positive weight)")]
    EmptyTable,
}

#[derive(Debug, Clone)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 10,
            walk_length: 40,
            window: 10,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.window > self.walk_length {
            return Err(SamplingError::WindowTooLarge {
                window: self.window,
                walk_length: self.walk_length,
            });
        }
        Ok(())
    }
}

/// Weighted first-order random walks, `walks_per_node` per start node, each of
/// `walk_length` nodes. Self-loops guarantee every step has a successor.
pub fn random_walks(snapshot: &Snapshot, cfg: &WalkConfig) -> Result<Vec<Vec<NodeId>>, SamplingError> {
    cfg.validate()?;
    let n = snapshot.node_count();
    let t = snapshot.time_index() as u64;
    // Per-node cumulative neighbor weights for O(log deg) steps.
    let cumulative: Vec<Vec<f64>> = (0..n)
        .map(|v| {
            let mut acc = 0.0;
            snapshot
                .neighbors(NodeId(v))
                .expect("node index in range")
                .iter()
                .map(|&(_, w)| {
                    acc += w;
                    acc
                })
                .collect()
        })
        .collect();

    let per_node: Vec<Vec<Vec<NodeId>>> = (0..n)
        .into_par_iter()
        .map(|v| {
            (0..cfg.walks_per_node)
                .map(|w| {
                    let mut rng = seeds::rng(cfg.seed, &[stream::WALK, t, v as u64, w as u64]);
                    let mut walk = Vec::with_capacity(cfg.walk_length);
                    let mut cur = NodeId(v);
                    walk.push(cur);
                    for _ in 1..cfg.walk_length {
                        let cums = &cumulative[cur.0];
                        let total = *cums.last().expect("self-loop guarantees an entry");
                        let x = rng.gen::<f64>() * total;
                        let mut idx = cums.partition_point(|&c| c <= x);
                        if idx >= cums.len() {
                            idx = cums.len() - 1;
                        }
                        cur = snapshot.neighbors(cur).expect("node index in range")[idx].0;
                        walk.push(cur);
                    }
                    walk
                })
                .collect()
        })
        .collect();
    Ok(per_node.into_iter().flatten().collect())
}

/// Materializes the full co-occurrence multiset: for every position i, every
/// j != i with |i-j| <= window, excluding self pairs.
pub fn context_pairs(walks: &[Vec<NodeId>], window: usize) -> Vec<(NodeId, NodeId)> {
    let mut pairs = Vec::new();
    for walk in walks {
        for i in 0..walk.len() {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(walk.len().saturating_sub(1));
            for j in lo..=hi {
                if j != i && walk[i] != walk[j] {
                    pairs.push((walk[i], walk[j]));
                }
            }
        }
    }
    pairs
}

/// Uniform addressing of ordered index pairs (i, j) with j != i, |i-j| <= window
/// inside a fixed-length walk.
#[derive(Debug, Clone)]
pub struct PairIndex {
    cumulative: Vec<usize>,
    window: usize,
    len: usize,
}

impl PairIndex {
    pub fn new(walk_length: usize, window: usize) -> Self {
        let mut cumulative = Vec::with_capacity(walk_length);
        let mut acc = 0;
        for i in 0..walk_length {
            let left = i.min(window);
            let right = (walk_length - 1 - i).min(window);
            acc += left + right;
            cumulative.push(acc);
        }
        Self {
            cumulative,
            window,
            len: walk_length,
        }
    }

    /// Ordered index pairs per walk.
    pub fn pairs_per_walk(&self) -> usize {
        *self.cumulative.last().unwrap_or(&0)
    }

    /// Maps a flat index in [0, pairs_per_walk) to (center, context) positions.
    fn locate(&self, k: usize) -> (usize, usize) {
        let i = self.cumulative.partition_point(|&c| c <= k);
        let before = if i == 0 { 0 } else { self.cumulative[i - 1] };
        let offset = k - before;
        let left = i.min(self.window);
        let j = if offset < left {
            i - left + offset
        } else {
            i + 1 + (offset - left)
        };
        debug_assert!(j < self.len);
        (i, j)
    }
}

/// Draws up to `count` pairs uniformly from the co-occurrence multiset of a
/// fixed-length walk set. Self pairs are rejected and redrawn; a draw is
/// abandoned after 100 consecutive rejections, so a degenerate corpus (all
/// walks stuck on one node) yields fewer pairs rather than a hang.
pub fn sample_pairs(
    walks: &[Vec<NodeId>],
    index: &PairIndex,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(NodeId, NodeId)> {
    let per_walk = index.pairs_per_walk();
    if walks.is_empty() || per_walk == 0 {
        return Vec::new();
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..100 {
            let w = rng.gen_range(0..walks.len());
            let k = rng.gen_range(0..per_walk);
            let (i, j) = index.locate(k);
            let (center, context) = (walks[w][i], walks[w][j]);
            if center != context {
                found = Some((center, context));
                break;
            }
        }
        if let Some(p) = found {
            pairs.push(p);
        }
    }
    pairs
}

/// Cumulative degree^power weights for negative draws.
#[derive(Debug, Clone)]
pub struct NegativeTable {
    cumulative: Vec<f64>,
}

impl NegativeTable {
    /// Weights each node by its (self-loop-free) degree to `power`.
    pub fn from_snapshot(snapshot: &Snapshot, power: f64) -> Result<Self, SamplingError> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = (0..snapshot.node_count())
            .map(|v| {
                let d = snapshot.degree(NodeId(v)) as f64;
                if d > 0.0 {
                    acc += d.powf(power);
                }
                acc
            })
            .collect();
        if acc <= 0.0 {
            return Err(SamplingError::EmptyTable);
        }
        Ok(Self { cumulative })
    }

    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<NodeId> {
        let total = *self.cumulative.last().expect("table is non-empty");
        (0..count)
            .map(|_| {
                let x = rng.gen::<f64>() * total;
                let mut idx = self.cumulative.partition_point(|&c| c <= x);
                if idx >= self.cumulative.len() {
                    idx = self.cumulative.len() - 1;
                }
                NodeId(idx)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DynamicGraph;
    use rand_chacha::rand_core::SeedableRng;

    fn lone_node_graph() -> DynamicGraph {
        DynamicGraph::from_step_edges(1, vec![vec![], vec![]]).unwrap()
    }

    #[test]
    fn isolated_node_walks_in_place() {
        let g = lone_node_graph();
        let cfg = WalkConfig {
            walks_per_node: 3,
            walk_length: 5,
            window: 2,
            seed: 1,
        };
        let walks = random_walks(g.snapshot(1).unwrap(), &cfg).unwrap();
        assert_eq!(walks.len(), 3);
        for w in &walks {
            assert_eq!(w, &vec![NodeId(0); 5]);
        }
    }

    #[test]
    fn walks_are_deterministic_and_stay_on_edges() {
        let g = DynamicGraph::from_step_edges(
            4,
            vec![vec![(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5)], vec![]],
        )
        .unwrap();
        let cfg = WalkConfig {
            walks_per_node: 4,
            walk_length: 12,
            window: 3,
            seed: 42,
        };
        let snap = g.snapshot(1).unwrap();
        let a = random_walks(snap, &cfg).unwrap();
        let b = random_walks(snap, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        for walk in &a {
            for pair in walk.windows(2) {
                let (u, v) = (pair[0], pair[1]);
                assert!(u == v || snap.has_link(u, v), "step {u}->{v} is not an edge");
            }
        }
    }

    #[test]
    fn two_node_transition_frequency_is_binomial() {
        // Self-loop weight 1 vs edge weight 1: P(move) = 1/2 at every step.
        let g = DynamicGraph::from_step_edges(2, vec![vec![(0, 1, 1.0)], vec![]]).unwrap();
        let cfg = WalkConfig {
            walks_per_node: 50,
            walk_length: 101,
            window: 1,
            seed: 9,
        };
        let walks = random_walks(g.snapshot(1).unwrap(), &cfg).unwrap();
        let mut steps = 0usize;
        let mut moves = 0usize;
        for walk in &walks {
            for pair in walk.windows(2) {
                steps += 1;
                if pair[0] != pair[1] {
                    moves += 1;
                }
            }
        }
        assert_eq!(steps, 10_000);
        let sigma = (steps as f64 * 0.25).sqrt();
        let expected = steps as f64 / 2.0;
        assert!(
            (moves as f64 - expected).abs() < 3.0 * sigma,
            "moves {moves} outside 3 sigma of {expected}"
        );
    }

    #[test]
    fn context_pairs_window_one() {
        let (a, b, c) = (NodeId(0), NodeId(1), NodeId(2));
        let pairs = context_pairs(&[vec![a, b, c]], 1);
        assert_eq!(pairs, vec![(a, b), (b, a), (b, c), (c, b)]);
    }

    #[test]
    fn constant_walk_yields_no_pairs() {
        let a = NodeId(0);
        assert!(context_pairs(&[vec![a, a, a]], 2).is_empty());
    }

    #[test]
    fn pair_count_matches_closed_form() {
        // Distinct nodes: 2 * (L*w - w*(w+1)/2) ordered pairs.
        for (len, window) in [(7usize, 3usize), (10, 10), (5, 1), (40, 10)] {
            let walk: Vec<NodeId> = (0..len).map(NodeId).collect();
            let got = context_pairs(&[walk], window).len();
            let w = window.min(len - 1);
            let expected = 2 * (len * w - w * (w + 1) / 2);
            assert_eq!(got, expected, "len {len} window {window}");
        }
    }

    #[test]
    fn pair_index_enumerates_the_same_multiset() {
        let walk: Vec<NodeId> = vec![0, 1, 2, 1, 3, 0].into_iter().map(NodeId).collect();
        let window = 2;
        let index = PairIndex::new(walk.len(), window);
        let mut enumerated: Vec<(NodeId, NodeId)> = (0..index.pairs_per_walk())
            .map(|k| {
                let (i, j) = index.locate(k);
                (walk[i], walk[j])
            })
            .filter(|(a, b)| a != b)
            .collect();
        let mut direct = context_pairs(&[walk], window);
        enumerated.sort();
        direct.sort();
        assert_eq!(enumerated, direct);
    }

    #[test]
    fn sampled_pairs_come_from_the_multiset() {
        let g = DynamicGraph::from_step_edges(
            5,
            vec![vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)], vec![]],
        )
        .unwrap();
        let cfg = WalkConfig {
            walks_per_node: 3,
            walk_length: 10,
            window: 3,
            seed: 5,
        };
        let walks = random_walks(g.snapshot(1).unwrap(), &cfg).unwrap();
        let index = PairIndex::new(cfg.walk_length, cfg.window);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sampled = sample_pairs(&walks, &index, 200, &mut rng);
        assert_eq!(sampled.len(), 200);
        let mut universe = context_pairs(&walks, cfg.window);
        universe.sort();
        universe.dedup();
        for p in &sampled {
            assert!(universe.binary_search(p).is_ok(), "pair {p:?} not in multiset");
        }
    }

    #[test]
    fn degenerate_corpus_returns_fewer_pairs() {
        let walks = vec![vec![NodeId(0); 6]];
        let index = PairIndex::new(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_pairs(&walks, &index, 10, &mut rng).is_empty());
    }

    #[test]
    fn negative_table_uniform_when_degrees_equal() {
        // 4 nodes in a cycle: all degrees 2. Chi-squared with 3 dof at alpha=0.01.
        let g = DynamicGraph::from_step_edges(
            4,
            vec![vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0)], vec![]],
        )
        .unwrap();
        let table = NegativeTable::from_snapshot(g.snapshot(1).unwrap(), 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = table.sample(100_000, &mut rng);
        let mut counts = [0f64; 4];
        for d in draws {
            counts[d.0] += 1.0;
        }
        let expected = 25_000.0;
        let chi2: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 11.345, "chi-squared {chi2} exceeds the 1% critical value");
    }

    #[test]
    fn negative_table_follows_power_law() {
        // Degrees 1 and 16 with power 0.75 sample at ratio 1 : 8.
        let mut edges = vec![(0, 1, 1.0)];
        for other in 2..17 {
            edges.push((1, other, 1.0));
        }
        let g = DynamicGraph::from_step_edges(17, vec![edges, vec![]]).unwrap();
        let snap = g.snapshot(1).unwrap();
        assert_eq!(snap.degree(NodeId(0)), 1);
        assert_eq!(snap.degree(NodeId(1)), 16);
        let table = NegativeTable::from_snapshot(snap, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200_000;
        let draws = table.sample(n, &mut rng);
        let node0 = draws.iter().filter(|d| d.0 == 0).count() as f64;
        let node1 = draws.iter().filter(|d| d.0 == 1).count() as f64;
        // p0/p1 = 1/8 exactly; check node0 against its binomial expectation.
        let p0 = 1.0 / (1.0 + 8.0 + 15.0); // fifteen leaves of degree 1 share weight 1
        let expected = n as f64 * p0;
        let sigma = (n as f64 * p0 * (1.0 - p0)).sqrt();
        assert!(
            (node0 - expected).abs() < 3.0 * sigma,
            "node0 count {node0} outside 3 sigma of {expected}"
        );
        let ratio = node1 / node0;
        assert!(
            (ratio - 8.0).abs() < 0.5,
            "degree-16 node sampled at ratio {ratio}, want about 8"
        );
    }

    #[test]
    fn negative_table_rejects_empty_snapshot() {
        let g = lone_node_graph();
        assert!(matches!(
            NegativeTable::from_snapshot(g.snapshot(1).unwrap(), 0.75).unwrap_err(),
            SamplingError::EmptyTable
        ));
    }

    #[test]
    fn zero_count_draws_nothing() {
        let g = DynamicGraph::from_step_edges(2, vec![vec![(0, 1, 1.0)], vec![]]).unwrap();
        let table = NegativeTable::from_snapshot(g.snapshot(1).unwrap(), 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(table.sample(0, &mut rng).is_empty());
    }

    #[test]
    fn window_larger_than_walk_is_rejected() {
        let g = lone_node_graph();
        let cfg = WalkConfig {
            walks_per_node: 1,
            walk_length: 3,
            window: 4,
            seed: 0,
        };
        assert!(matches!(
            random_walks(g.snapshot(1).unwrap(), &cfg).unwrap_err(),
            SamplingError::WindowTooLarge { .. }
        ));
    }
}
