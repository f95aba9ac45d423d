//! Plain-loop re-implementation of the full forward pass, kept deliberately
//! free of the tape so it can serve as an independent oracle for the model.

use convdysat_core::graph::{DynamicGraph, NodeId};
use convdysat_core::model::{forward, init_params, ModelConfig, ParamStore};

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

fn matvec_rows(feats: &[Vec<f64>], w: &[f64], din: usize, fh: usize) -> Vec<Vec<f64>> {
    feats
        .iter()
        .map(|row| {
            (0..fh)
                .map(|f| (0..din).map(|k| row[k] * w[k * fh + f]).sum())
                .collect()
        })
        .collect()
}

/// One structural layer per Eqs. 1-2: neighbor logits A_uv * (a_dst.Wx_v +
/// a_src.Wx_u) through LeakyReLU and a neighborhood softmax, heads
/// concatenated, ELU at the end.
fn structural_layer(
    g: &DynamicGraph,
    t: usize,
    feats: Option<&[Vec<f64>]>,
    store: &ParamStore,
    layer: usize,
    heads: usize,
) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let snapshot = g.snapshot(t).unwrap();
    let mut out = vec![Vec::new(); n];
    for h in 0..heads {
        let w = store.get(&format!("structural.l{layer}.h{h}.w")).unwrap();
        let a = store.get(&format!("structural.l{layer}.h{h}.a")).unwrap();
        let (din, fh) = (w.shape()[0], w.shape()[1]);
        let xw: Vec<Vec<f64>> = match feats {
            None => (0..n)
                .map(|u| w.data()[u * fh..(u + 1) * fh].to_vec())
                .collect(),
            Some(feats) => matvec_rows(feats, w.data(), din, fh),
        };
        let a_src = &a.data()[..fh];
        let a_dst = &a.data()[fh..];
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<f64>();
        for v in 0..n {
            let s_dst_v = dot(&xw[v], a_dst);
            let neighbors = snapshot.neighbors(NodeId(v)).unwrap();
            let logits: Vec<f64> = neighbors
                .iter()
                .map(|&(u, weight)| leaky(weight * (s_dst_v + dot(&xw[u.0], a_src))))
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let mut head_out = vec![0.0; fh];
            for (&(u, _), &e) in neighbors.iter().zip(&exps) {
                let alpha = e / denom;
                for (o, &x) in head_out.iter_mut().zip(&xw[u.0]) {
                    *o += alpha * x;
                }
            }
            out[v].extend(head_out);
        }
    }
    for row in out.iter_mut() {
        for x in row.iter_mut() {
            *x = elu(*x);
        }
    }
    out
}

fn causal_conv(x: &[Vec<f64>], kernel: &[f64], bias: &[f64], k: usize, din: usize, fh: usize) -> Vec<Vec<f64>> {
    let steps = x.len();
    (0..steps)
        .map(|t| {
            (0..fh)
                .map(|f| {
                    let mut acc = bias[f];
                    for p in 0..k {
                        let src = t as isize - (k as isize - 1) + p as isize;
                        if src < 0 {
                            continue;
                        }
                        for d in 0..din {
                            acc += x[src as usize][d] * kernel[(p * din + d) * fh + f];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Full forward per Eqs. 1-9 with scalar loops only.
fn reference_forward(
    g: &DynamicGraph,
    store: &ParamStore,
    cfg: &ModelConfig,
    up_to: usize,
) -> Vec<Vec<Vec<f64>>> {
    let n = g.node_count();
    let mut per_step = Vec::with_capacity(up_to);
    for t in 1..=up_to {
        let mut feats: Option<Vec<Vec<f64>>> = None;
        for layer in 0..cfg.structural_dims.len() {
            feats = Some(structural_layer(
                g,
                t,
                feats.as_deref(),
                store,
                layer,
                cfg.structural_heads,
            ));
        }
        per_step.push(feats.unwrap());
    }

    let position = store.get("temporal.position").unwrap();
    let dprime = *cfg.structural_dims.last().unwrap();
    let fh = cfg.temporal_dim / cfg.temporal_heads;
    let scale = cfg.score_scale();
    let mut result = vec![vec![Vec::new(); n]; up_to];
    for v in 0..n {
        let x: Vec<Vec<f64>> = (0..up_to)
            .map(|i| {
                (0..dprime)
                    .map(|d| per_step[i][v][d] + position.data()[i * dprime + d])
                    .collect()
            })
            .collect();
        let mut rows = vec![Vec::new(); up_to];
        for h in 0..cfg.temporal_heads {
            let get = |tag: &str, part: &str| {
                store
                    .get(&format!("temporal.h{h}.{tag}.{part}"))
                    .unwrap()
                    .data()
            };
            let q = causal_conv(&x, get("q", "kernel"), get("q", "bias"), cfg.qk_kernel, dprime, fh);
            let k = causal_conv(&x, get("k", "kernel"), get("k", "bias"), cfg.qk_kernel, dprime, fh);
            let val = causal_conv(&x, get("v", "kernel"), get("v", "bias"), 1, dprime, fh);
            for t in 0..up_to {
                let logits: Vec<f64> = (0..=t)
                    .map(|j| scale * q[t].iter().zip(&k[j]).map(|(&a, &b)| a * b).sum::<f64>())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let mut head_out = vec![0.0; fh];
                for (j, &e) in exps.iter().enumerate() {
                    let beta = e / denom;
                    for (o, &value) in head_out.iter_mut().zip(&val[j]) {
                        *o += beta * value;
                    }
                }
                rows[t].extend(head_out);
            }
        }
        for t in 0..up_to {
            result[t][v] = rows[t].clone();
        }
    }
    result
}

fn assert_close(a: &[f64], b: &[f64], context: &str) {
    assert_eq!(a.len(), b.len(), "{context}: length");
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let tol = 1e-12 * x.abs().max(y.abs()).max(1.0);
        assert!(
            (x - y).abs() <= tol,
            "{context}[{i}]: tape {x} vs reference {y}"
        );
    }
}

fn toy_graph() -> DynamicGraph {
    DynamicGraph::from_step_edges(
        4,
        vec![
            vec![(0, 1, 1.0), (1, 2, 2.0)],
            vec![(0, 1, 1.0), (2, 3, 1.0)],
            vec![(1, 3, 0.5), (0, 2, 1.0)],
        ],
    )
    .unwrap()
}

#[test]
fn tape_forward_matches_loop_reference_on_toy() {
    let g = toy_graph();
    let cfg = ModelConfig {
        structural_dims: vec![4],
        structural_heads: 2,
        temporal_dim: 4,
        temporal_heads: 2,
        ..ModelConfig::default()
    };
    let store = init_params(&cfg, g.node_count(), g.steps(), 21).unwrap();
    let table = forward(&g, &store, &cfg, 3).unwrap();
    let reference = reference_forward(&g, &store, &cfg, 3);
    for t in 1..=3 {
        for (v, row) in reference[t - 1].iter().enumerate() {
            assert_close(table.embedding(t, NodeId(v)), row, &format!("t={t} v={v}"));
        }
    }
}

#[test]
fn tape_forward_matches_reference_with_stacked_layers_and_odd_heads() {
    let g = DynamicGraph::from_step_edges(
        6,
        vec![
            vec![(0, 1, 1.0), (1, 2, 1.5), (3, 4, 1.0), (4, 5, 2.0)],
            vec![(0, 2, 1.0), (2, 3, 1.0), (3, 5, 0.5)],
            vec![(0, 1, 2.0), (1, 5, 1.0), (2, 4, 1.0)],
            vec![(0, 5, 1.0), (1, 4, 1.0), (2, 3, 3.0)],
        ],
    )
    .unwrap();
    for (heads_s, heads_t, seed) in [(1, 1, 5u64), (3, 2, 6), (2, 4, 7)] {
        let cfg = ModelConfig {
            structural_dims: vec![6, 6],
            structural_heads: heads_s,
            temporal_dim: 8,
            temporal_heads: heads_t,
            qk_kernel: 3,
            ..ModelConfig::default()
        };
        let store = init_params(&cfg, g.node_count(), g.steps(), seed).unwrap();
        let table = forward(&g, &store, &cfg, 4).unwrap();
        let reference = reference_forward(&g, &store, &cfg, 4);
        for t in 1..=4 {
            for (v, row) in reference[t - 1].iter().enumerate() {
                assert_close(
                    table.embedding(t, NodeId(v)),
                    row,
                    &format!("H_S={heads_s} H_T={heads_t} t={t} v={v}"),
                );
            }
        }
    }
}

/// Frozen values from the loop reference, checked once and pinned so future
/// refactors cannot silently shift the forward pass.
#[test]
fn golden_embedding_values_stay_pinned() {
    let g = toy_graph();
    let cfg = ModelConfig {
        structural_dims: vec![4],
        structural_heads: 2,
        temporal_dim: 4,
        temporal_heads: 2,
        ..ModelConfig::default()
    };
    let store = init_params(&cfg, g.node_count(), g.steps(), 21).unwrap();
    let table = forward(&g, &store, &cfg, 3).unwrap();
    let golden: [f64; 4] = [
        0.05446291210464081,
        0.0401621139087625,
        0.2595122890126713,
        0.01425123221930789,
    ];
    for (got, want) in table.embedding(3, NodeId(0)).iter().zip(&golden) {
        assert_eq!(got, want);
    }
}
