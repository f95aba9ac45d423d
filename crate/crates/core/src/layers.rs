//! The three ConvDySAT layer types: structural neighborhood attention,
//! convolutional query/key/value generation with masked temporal attention,
//! and trainable position embeddings.
//!
//! Layers are free functions over a [`ComputationTape`]; parameters arrive as
//! tensor ids already registered on that tape, so one forward pass records one
//! differentiable graph end to end.

use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::graph::{NodeId, Snapshot};
use crate::tape::{ComputationTape, TensorError, TensorId};
use crate::tensor::Tensor;

/// Dense per-snapshot constants for structural attention: the weighted
/// adjacency (self-loops at 1.0 on the diagonal) and the neighborhood mask
/// (0 where an entry exists, -inf elsewhere).
#[derive(Debug, Clone)]
pub struct SnapshotDense {
    pub weights: Tensor,
    pub mask: Tensor,
}

pub fn snapshot_dense(snapshot: &Snapshot) -> SnapshotDense {
    let n = snapshot.node_count();
    let mut weights = vec![0.0; n * n];
    let mut mask = vec![f64::NEG_INFINITY; n * n];
    for v in 0..n {
        for &(u, w) in snapshot.neighbors(NodeId(v)).expect("node index in range") {
            weights[v * n + u.0] = w;
            mask[v * n + u.0] = 0.0;
        }
    }
    SnapshotDense {
        weights: Tensor::new(vec![n, n], weights).expect("square shape"),
        mask: Tensor::new(vec![n, n], mask).expect("square shape"),
    }
}

/// One structural head: shared transform `w` of shape [D, F_h] and attention
/// vector `a` of shape [2*F_h, 1] (neighbor half first, center half second).
#[derive(Debug, Clone, Copy)]
pub struct StructuralHeadIds {
    pub w: TensorId,
    pub a: TensorId,
}

/// Structural attention output plus each head's attention matrix (rows are
/// centers, columns neighbors; rows sum to 1).
#[derive(Debug)]
pub struct StructuralOutput {
    pub output: TensorId,
    pub alphas: Vec<TensorId>,
}

/// GAT-style neighborhood attention with head concatenation. `features` of
/// shape [N, D] may be
/// omitted for the one-hot first layer, where X.W collapses to W itself (then
/// W must have N rows).
pub fn structural_attention(
    tape: &mut ComputationTape,
    dense: &SnapshotDense,
    features: Option<TensorId>,
    heads: &[StructuralHeadIds],
) -> Result<StructuralOutput, TensorError> {
    let n = dense.weights.shape()[0];
    if heads.is_empty() {
        return Err(TensorError::EmptyConcat);
    }
    let adj = tape.constant(dense.weights.clone());
    let mask = tape.constant(dense.mask.clone());
    let ones_row = tape.constant(Tensor::new(vec![1, n], vec![1.0; n])?);
    let ones_col = tape.constant(Tensor::new(vec![n, 1], vec![1.0; n])?);

    let mut outputs = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    for head in heads {
        let w_shape = tape.value(head.w)?.shape().to_vec();
        if w_shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "structural_attention",
                shape: w_shape,
            });
        }
        let fh = w_shape[1];
        if tape.value(head.a)?.shape() != [2 * fh, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "structural_attention",
                lhs: vec![2 * fh, 1],
                rhs: tape.value(head.a)?.shape().to_vec(),
            });
        }
        let xw = match features {
            Some(x) => tape.matmul(x, head.w)?,
            None => {
                if w_shape[0] != n {
                    return Err(TensorError::ShapeMismatch {
                        op: "structural_attention",
                        lhs: vec![n, n],
                        rhs: w_shape,
                    });
                }
                head.w
            }
        };
        let src_rows: Vec<usize> = (0..fh).collect();
        let dst_rows: Vec<usize> = (fh..2 * fh).collect();
        let a_src = tape.gather_rows(head.a, &src_rows)?;
        let a_dst = tape.gather_rows(head.a, &dst_rows)?;
        // S[v][u] = a_dst.(W x_v) + a_src.(W x_u): center term down rows,
        // neighbor term across columns.
        let s_src = tape.matmul(xw, a_src)?;
        let s_dst = tape.matmul(xw, a_dst)?;
        let center = tape.matmul(s_dst, ones_row)?;
        let s_src_t = tape.transpose(s_src)?;
        let neighbor = tape.matmul(ones_col, s_src_t)?;
        let combined = tape.add(center, neighbor)?;
        // A_uv scales the logit before the nonlinearity.
        let weighted = tape.multiply(adj, combined)?;
        let logits = tape.leaky_relu(weighted, 0.2)?;
        let alpha = tape.masked_softmax(logits, mask)?;
        let head_out = tape.matmul(alpha, xw)?;
        outputs.push(head_out);
        alphas.push(alpha);
    }
    let concat = tape.concat(&outputs, 1)?;
    let output = tape.elu(concat)?;
    Ok(StructuralOutput { output, alphas })
}

/// Temporal mask: entry (i, j) is 0 iff j <= i (a query attends its present
/// and past), -inf above the diagonal.
pub fn build_mask(steps: usize) -> Tensor {
    let mut data = vec![f64::NEG_INFINITY; steps * steps];
    for i in 0..steps {
        for j in 0..=i {
            data[i * steps + j] = 0.0;
        }
    }
    Tensor::new(vec![steps, steps], data).expect("square shape")
}

/// One temporal head: query/key convolutions (kernel size 2 or 3) and the
/// value convolution (kernel size 1), each with a bias.
#[derive(Debug, Clone, Copy)]
pub struct TemporalHeadIds {
    pub q_kernel: TensorId,
    pub q_bias: TensorId,
    pub k_kernel: TensorId,
    pub k_bias: TensorId,
    pub v_kernel: TensorId,
    pub v_bias: TensorId,
}

#[derive(Debug)]
pub struct TemporalOutput {
    pub output: TensorId,
    pub betas: Vec<TensorId>,
}

/// Masked scaled-dot-product self-attention over one node's history, with
/// causally convolved queries/keys/values and head concatenation; `x` has shape
/// [T, D']. `mask` is a registered [`build_mask`] constant of matching T;
/// `score_scale` multiplies the raw query-key products (1/sqrt of the scaling
/// dimension).
pub fn temporal_attention(
    tape: &mut ComputationTape,
    x: TensorId,
    heads: &[TemporalHeadIds],
    mask: TensorId,
    score_scale: f64,
) -> Result<TemporalOutput, TensorError> {
    if heads.is_empty() {
        return Err(TensorError::EmptyConcat);
    }
    let steps = tape.value(x)?.shape()[0];
    if tape.value(mask)?.shape() != [steps, steps] {
        return Err(TensorError::ShapeMismatch {
            op: "temporal_attention",
            lhs: vec![steps, steps],
            rhs: tape.value(mask)?.shape().to_vec(),
        });
    }
    let mut outputs = Vec::with_capacity(heads.len());
    let mut betas = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tape.causal_conv1d(x, head.q_kernel, head.q_bias)?;
        let k = tape.causal_conv1d(x, head.k_kernel, head.k_bias)?;
        let v = tape.causal_conv1d(x, head.v_kernel, head.v_bias)?;
        let kt = tape.transpose(k)?;
        let qk = tape.matmul(q, kt)?;
        let scaled = tape.scale(qk, score_scale)?;
        let beta = tape.masked_softmax(scaled, mask)?;
        let head_out = tape.matmul(beta, v)?;
        outputs.push(head_out);
        betas.push(beta);
    }
    let output = tape.concat(&outputs, 1)?;
    Ok(TemporalOutput { output, betas })
}

/// Elementwise sum of a node's structural sequence with the shared trainable
/// position table (shapes must match).
pub fn add_position_embeddings(
    tape: &mut ComputationTape,
    h: TensorId,
    p: TensorId,
) -> Result<TensorId, TensorError> {
    tape.add(h, p)
}

/// Layer-level finite-difference reports: structural attention with respect to
/// every input, temporal attention through its causal Q/K/V convolutions, and
/// position embeddings feeding temporal attention. Each output is reduced to a
/// scalar through its squared sum; compositions are held to the model
/// tolerance rather than the per-op bound.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheckReport>, TensorError> {
    use crate::gradcheck::{FD_EPSILON, MODEL_TOLERANCE};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: Vec<usize>| -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-0.9..0.9)).collect();
        Tensor::new(shape, data).expect("suite shapes are valid")
    };

    let g = crate::graph::DynamicGraph::from_step_edges(
        4,
        vec![
            vec![(0, 1, 1.5), (1, 2, 0.7), (0, 3, 1.0), (2, 3, 2.0)],
            vec![(0, 2, 1.0)],
        ],
    )
    .expect("suite graph is valid");
    let dense = snapshot_dense(g.snapshot(1).expect("step 1 exists"));

    let x = draw(vec![4, 3]);
    let w = draw(vec![3, 2]);
    let a = draw(vec![4, 1]);
    let mut reports = Vec::new();

    // Structural attention: one check per input, the others held constant.
    let structural = |probe_w: bool, probe_a: bool| {
        let (dense, x, w, a) = (dense.clone(), x.clone(), w.clone(), a.clone());
        move |tape: &mut ComputationTape, probe: TensorId| -> Result<TensorId, TensorError> {
            let w = if probe_w { probe } else { tape.constant(w.clone()) };
            let a = if probe_a { probe } else { tape.constant(a.clone()) };
            let x = if probe_w || probe_a {
                tape.constant(x.clone())
            } else {
                probe
            };
            let out = structural_attention(tape, &dense, Some(x), &[StructuralHeadIds { w, a }])?;
            let sq = tape.multiply(out.output, out.output)?;
            tape.sum(sq)
        }
    };
    for (name, probed, probe_w, probe_a) in [
        ("structural_attention_w", &w, true, false),
        ("structural_attention_a", &a, false, true),
        ("structural_attention_features", &x, false, false),
    ] {
        let err = finite_difference_check(structural(probe_w, probe_a), probed, FD_EPSILON)?;
        reports.push(GradCheckReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: MODEL_TOLERANCE,
        });
    }

    // Temporal attention over a 4-step history, one head of width 2.
    let seq = draw(vec![4, 3]);
    let q_kernel = draw(vec![2, 3, 2]);
    let k_kernel = draw(vec![2, 3, 2]);
    let v_kernel = draw(vec![1, 3, 2]);
    let bias = draw(vec![2]);
    let position = draw(vec![4, 3]);
    #[derive(Clone, Copy)]
    enum Probe {
        Q,
        K,
        V,
        Bias,
        Input,
        Position,
    }
    let temporal = |which: Probe| {
        let (seq, q_kernel, k_kernel, v_kernel, bias, position) = (
            seq.clone(),
            q_kernel.clone(),
            k_kernel.clone(),
            v_kernel.clone(),
            bias.clone(),
            position.clone(),
        );
        move |tape: &mut ComputationTape, probe: TensorId| -> Result<TensorId, TensorError> {
            let pick = |tape: &mut ComputationTape, take: bool, fixed: &Tensor| {
                if take {
                    probe
                } else {
                    tape.constant(fixed.clone())
                }
            };
            let q = pick(tape, matches!(which, Probe::Q), &q_kernel);
            let k = pick(tape, matches!(which, Probe::K), &k_kernel);
            let v = pick(tape, matches!(which, Probe::V), &v_kernel);
            let b = pick(tape, matches!(which, Probe::Bias), &bias);
            let h = pick(tape, matches!(which, Probe::Input), &seq);
            let p = pick(tape, matches!(which, Probe::Position), &position);
            let x = add_position_embeddings(tape, h, p)?;
            let head = TemporalHeadIds {
                q_kernel: q,
                q_bias: b,
                k_kernel: k,
                k_bias: b,
                v_kernel: v,
                v_bias: b,
            };
            let mask = tape.constant(build_mask(4));
            let out = temporal_attention(tape, x, &[head], mask, 1.0 / (2.0f64).sqrt())?;
            let sq = tape.multiply(out.output, out.output)?;
            tape.sum(sq)
        }
    };
    for (name, probed, which) in [
        ("temporal_attention_q_kernel", &q_kernel, Probe::Q),
        ("temporal_attention_k_kernel", &k_kernel, Probe::K),
        ("temporal_attention_v_kernel", &v_kernel, Probe::V),
        ("temporal_attention_bias", &bias, Probe::Bias),
        ("temporal_attention_input", &seq, Probe::Input),
        ("position_embeddings", &position, Probe::Position),
    ] {
        let err = finite_difference_check(temporal(which), probed, FD_EPSILON)?;
        reports.push(GradCheckReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(reports)
}
