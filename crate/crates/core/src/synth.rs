//! Deterministic synthetic dynamic graphs: a null model with no temporal
//! signal, a pure-persistence graph, a corpus shaped like the Enron dataset
//! (143 nodes, 2,347 link records, 16 steps), and the bundled 12-node toy.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{DynamicGraph, EdgeRecord};
use crate::seeds::{self, stream};

/// Seed baked into the committed toy dataset file.
pub const TOY_SEED: u64 = 12;

fn all_pairs(nodes: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(nodes * (nodes - 1) / 2);
    for u in 0..nodes {
        for v in (u + 1)..nodes {
            pairs.push((u, v));
        }
    }
    pairs
}

fn distinct_pairs(nodes: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut pairs = all_pairs(nodes);
    assert!(count <= pairs.len(), "asked for more links than pairs exist");
    for k in 0..count {
        let j = k + rng.gen_range(0..pairs.len() - k);
        pairs.swap(k, j);
    }
    pairs.truncate(count);
    pairs
}

/// Every snapshot drawn independently: links carry no information about the
/// next step, so link-prediction AUC has no signal to exceed chance.
pub fn null_graph(nodes: usize, steps: usize, links_per_step: usize, seed: u64) -> DynamicGraph {
    let step_edges = (0..steps)
        .map(|t| {
            let mut rng = seeds::rng(seed, &[stream::SYNTH, 0, t as u64]);
            distinct_pairs(nodes, links_per_step, &mut rng)
                .into_iter()
                .map(|(u, v)| (u, v, 1.0))
                .collect()
        })
        .collect();
    DynamicGraph::from_step_edges(nodes, step_edges).expect("valid synthetic edges")
}

fn community_of(v: usize, community_size: usize) -> usize {
    v / community_size
}

fn bernoulli_community_graph(
    nodes: usize,
    community_size: usize,
    p_in: f64,
    p_out: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, f64)> {
    all_pairs(nodes)
        .into_iter()
        .filter(|&(u, v)| {
            let p = if community_of(u, community_size) == community_of(v, community_size) {
                p_in
            } else {
                p_out
            };
            rng.gen::<f64>() < p
        })
        .map(|(u, v)| (u, v, 1.0))
        .collect()
}

/// 50 nodes in five communities of ten, one community draw repeated over six
/// identical snapshots: links at t+1 equal links at t exactly.
pub fn persistence_graph(seed: u64) -> DynamicGraph {
    let mut rng = seeds::rng(seed, &[stream::SYNTH, 1]);
    let edges = bernoulli_community_graph(50, 10, 0.45, 0.02, &mut rng);
    DynamicGraph::from_step_edges(50, vec![edges; 6]).expect("valid synthetic edges")
}

/// Total link records per bin for the Enron-shaped corpus; sums to 2,347 and
/// ramps up then down like the mailing volume it imitates.
fn enron_bin_counts() -> [usize; 16] {
    let weights = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0];
    let total_w: f64 = weights.iter().sum();
    let mut counts = [0usize; 16];
    let mut assigned = 0;
    for (c, w) in counts.iter_mut().zip(weights) {
        *c = (2347.0 * w / total_w).floor() as usize;
        assigned += *c;
    }
    let mut remainder = 2347 - assigned;
    let mut i = 0;
    while remainder > 0 {
        counts[i % 16] += 1;
        remainder -= 1;
        i += 1;
    }
    counts
}

/// Draws one endpoint pair inside a hub-weighted community block.
fn community_pair(
    members: &[usize],
    hub_weight: &[f64],
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let total: f64 = hub_weight.iter().sum();
    let draw = |rng: &mut ChaCha8Rng| {
        let x = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        for (i, &w) in hub_weight.iter().enumerate() {
            acc += w;
            if x < acc {
                return i;
            }
        }
        hub_weight.len() - 1
    };
    loop {
        let a = draw(rng);
        let b = draw(rng);
        if a != b {
            let (u, v) = (members[a].min(members[b]), members[a].max(members[b]));
            return (u, v);
        }
    }
}

/// 143 nodes, 16 snapshots, exactly 2,347 link records. Eight communities
/// with Zipf-weighted hubs; roughly 70% of each bin's links persist from the
/// previous bin, the rest are fresh draws (90% intra-community).
pub fn enron_shaped(seed: u64) -> DynamicGraph {
    let nodes = 143;
    let mut rng = seeds::rng(seed, &[stream::SYNTH, 2]);
    let communities: Vec<Vec<usize>> = (0..8)
        .map(|c| {
            let start = c * 18;
            let end = ((c + 1) * 18).min(nodes);
            (start..end).collect()
        })
        .collect();
    let hub_weights: Vec<Vec<f64>> = communities
        .iter()
        .map(|members| {
            (1..=members.len())
                .map(|rank| 1.0 / (rank as f64).powf(0.8))
                .collect()
        })
        .collect();

    let fresh_pair = |rng: &mut ChaCha8Rng| -> (usize, usize) {
        if rng.gen::<f64>() < 0.9 {
            let c = rng.gen_range(0..communities.len());
            community_pair(&communities[c], &hub_weights[c], rng)
        } else {
            let (ca, cb) = loop {
                let a = rng.gen_range(0..communities.len());
                let b = rng.gen_range(0..communities.len());
                if a != b {
                    break (a, b);
                }
            };
            let (ia, ib) = (
                community_pair(&communities[ca], &hub_weights[ca], rng).0,
                community_pair(&communities[cb], &hub_weights[cb], rng).0,
            );
            (ia.min(ib), ia.max(ib))
        }
    };

    let counts = enron_bin_counts();
    let mut step_edges: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(16);
    let mut previous: Vec<(usize, usize)> = Vec::new();
    for &count in &counts {
        let mut bin: Vec<(usize, usize)> = Vec::with_capacity(count);
        let mut seen = std::collections::HashSet::new();
        let mut carried = previous.clone();
        carried.shuffle(&mut rng);
        for &(u, v) in &carried {
            if bin.len() * 10 >= count * 7 {
                break;
            }
            if seen.insert((u, v)) {
                bin.push((u, v));
            }
        }
        while bin.len() < count {
            let (u, v) = fresh_pair(&mut rng);
            if seen.insert((u, v)) {
                bin.push((u, v));
            }
        }
        previous = bin.clone();
        step_edges.push(bin.into_iter().map(|(u, v)| (u, v, 1.0)).collect());
    }
    DynamicGraph::from_step_edges(nodes, step_edges).expect("valid synthetic edges")
}

/// The bundled toy corpus: 12 nodes in three communities of four over four
/// bins, with high intra-community density and mild churn.
pub fn toy_records(seed: u64) -> Vec<EdgeRecord> {
    let mut rng = seeds::rng(seed, &[stream::SYNTH, 3]);
    let mut records = Vec::new();
    for t in 0..4u64 {
        for (u, v) in all_pairs(12) {
            let p = if community_of(u, 4) == community_of(v, 4) {
                0.9
            } else {
                0.05
            };
            if rng.gen::<f64>() < p {
                records.push(EdgeRecord {
                    u: u.to_string(),
                    v: v.to_string(),
                    weight: 1.0,
                    timestamp: t as f64,
                });
            }
        }
    }
    records
}

/// Renders records in the ingestion format: `u v timestamp` per line.
pub fn render_edge_list(records: &[EdgeRecord]) -> String {
    let mut out = String::from("# synthetic toy corpus: 12 nodes, 4 steps, 3 communities\n");
    for r in records {
        out.push_str(&format!("{} {} {}\n", r.u, r.v, r.timestamp));
    }
    out
}
