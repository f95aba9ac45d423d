//! Acceptance gate: one test per shipping criterion, each printing a single
//! `ACCEPTANCE cN <name>: PASS/FAIL (...)` line before asserting.
//!
//! Run with `cargo test -p convdysat --test acceptance -- --nocapture` to see
//! every line. Wall-clock-bounded criteria (c1, c4, c5) serialize behind a
//! mutex and run inside a one-worker thread pool so their budgets reflect
//! single-threaded execution regardless of test harness parallelism.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convdysat_core::evaluation::{self, roc_auc, EvalConfig};
use convdysat_core::gradcheck::op_suite;
use convdysat_core::graph::{build_snapshots, parse_edge_list, DynamicGraph, NodeId, SnapshotMode};
use convdysat_core::layers::{
    build_mask, layer_suite, snapshot_dense, structural_attention, temporal_attention,
    StructuralHeadIds, TemporalHeadIds,
};
use convdysat_core::model::{composed_suite, forward, init_params, ModelConfig};
use convdysat_core::synth;
use convdysat_core::tape::ComputationTape;
use convdysat_core::tensor::Tensor;
use convdysat_core::training::{TrainConfig, Trainer};

/// Wall-clock criteria run one at a time behind this lock.
static TIMED: Mutex<()> = Mutex::new(());

fn timed_lock() -> std::sync::MutexGuard<'static, ()> {
    TIMED.lock().unwrap_or_else(|e| e.into_inner())
}

fn serial_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-worker pool")
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion}: {word} ({detail})");
    assert!(pass, "{criterion} failed: {detail}");
}

fn toy_graph() -> DynamicGraph {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy.edges");
    let text = std::fs::read_to_string(&path).expect("bundled toy dataset");
    let records = parse_edge_list(&text).expect("toy edge list parses");
    build_snapshots(&records, 4, SnapshotMode::Binned).expect("toy snapshots")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.9..0.9)).collect();
    Tensor::new(shape, data).expect("well-formed shape")
}

/// Trains to completion and runs the link-prediction protocol over every
/// trained step, returning (micro mean, macro mean).
fn train_and_eval(
    graph: DynamicGraph,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> (f64, f64) {
    let mut trainer = Trainer::new(graph, model_cfg, train_cfg).expect("trainer config");
    trainer.run(None).expect("training run");
    let steps: Vec<usize> = trainer.step_params().iter().map(|(t, _)| *t).collect();
    let tables: Vec<(usize, _)> = steps
        .iter()
        .map(|&t| (t, trainer.embeddings_for_step(t).expect("history step")))
        .collect();
    let report = evaluation::evaluate(trainer.graph(), &tables, &EvalConfig::default())
        .expect("evaluation");
    (report.micro_mean, report.macro_mean)
}

// --- c1: gradient correctness -----------------------------------------------

#[test]
fn c1_gradient_correctness() {
    let _guard = timed_lock();
    let start = Instant::now();
    let mut reports = op_suite(11).expect("op suite");
    reports.extend(layer_suite(11).expect("layer suite"));
    reports.extend(composed_suite(11).expect("composed suite"));
    let elapsed = start.elapsed();

    let failures: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passes())
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0_f64, f64::max);
    let in_budget = elapsed < Duration::from_secs(60);
    verdict(
        "c1 gradient-correctness",
        failures.is_empty() && in_budget,
        &format!(
            "{} checks, worst rel err {worst:.3e}, {:.1}s{}{}",
            reports.len(),
            elapsed.as_secs_f64(),
            if in_budget { "" } else { " OVER 60s BUDGET" },
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failures.join(", "))
            },
        ),
    );
}

// --- c2: causality -----------------------------------------------------------

fn random_bins(rng: &mut ChaCha8Rng, nodes: usize, steps: usize, links: usize) -> Vec<Vec<(usize, usize, f64)>> {
    (0..steps)
        .map(|_| {
            let mut bin = std::collections::BTreeSet::new();
            while bin.len() < links {
                let u = rng.gen_range(0..nodes);
                let v = rng.gen_range(0..nodes);
                if u != v {
                    bin.insert((u.min(v), u.max(v)));
                }
            }
            bin.into_iter().map(|(u, v)| (u, v, 1.0)).collect()
        })
        .collect()
}

#[test]
fn c2_causality() {
    let nodes = 14;
    let steps = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let base_bins = random_bins(&mut rng, nodes, steps, 20);
    let g_base = DynamicGraph::from_step_edges(nodes, base_bins.clone()).expect("base graph");

    let cfg = ModelConfig {
        structural_dims: vec![8],
        structural_heads: 2,
        temporal_dim: 8,
        temporal_heads: 2,
        ..ModelConfig::default()
    };
    let store = init_params(&cfg, nodes, steps, 7).expect("params");
    let tab_base = forward(&g_base, &store, &cfg, steps).expect("base forward");

    let mut unchanged_checks = 0usize;
    let mut propagated = 0usize;
    for _ in 0..20 {
        // Perturb one snapshot strictly after a random reference step.
        let t_star = rng.gen_range(1..steps);
        let j = rng.gen_range(t_star + 1..=steps);
        let mut bins = base_bins.clone();
        let u = rng.gen_range(0..nodes);
        let v = loop {
            let v = rng.gen_range(0..nodes);
            if v != u {
                break v;
            }
        };
        let pair = (u.min(v), u.max(v));
        let bin = &mut bins[j - 1];
        let before = bin.len();
        bin.retain(|&(a, b, _)| (a, b) != pair);
        if bin.len() == before {
            bin.push((pair.0, pair.1, 1.0));
        }

        let g_pert = DynamicGraph::from_step_edges(nodes, bins).expect("perturbed graph");
        let tab_pert = forward(&g_pert, &store, &cfg, steps).expect("perturbed forward");

        // Everything strictly before the perturbed snapshot must be
        // bit-for-bit identical, including the reference step t_star.
        for t in 1..j {
            for v in 0..nodes {
                let a = tab_base.embedding(t, NodeId(v));
                let b = tab_pert.embedding(t, NodeId(v));
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(
                        x.to_bits(),
                        y.to_bits(),
                        "embedding changed at t={t} v={v} after perturbing snapshot {j}"
                    );
                }
                unchanged_checks += 1;
            }
        }
        // Sanity: the perturbation must actually reach the later embeddings,
        // otherwise the bitwise check above proves nothing.
        let moved = (j..=steps).any(|t| {
            (0..nodes).any(|v| {
                tab_base
                    .embedding(t, NodeId(v))
                    .iter()
                    .zip(tab_pert.embedding(t, NodeId(v)))
                    .any(|(x, y)| x.to_bits() != y.to_bits())
            })
        });
        if moved {
            propagated += 1;
        }
    }

    // Masked softmax must put exactly zero mass above the diagonal.
    let mut tape = ComputationTape::new();
    let logits = tape.constant(rand_tensor(&mut rng, vec![6, 6]));
    let mask = tape.constant(build_mask(6));
    let sm = tape.masked_softmax(logits, mask).expect("masked softmax");
    let probs = tape.value(sm).expect("softmax value");
    let mut above_diag_zero = true;
    for r in 0..6 {
        for c in 0..6 {
            if c > r && probs.data()[r * 6 + c] != 0.0 {
                above_diag_zero = false;
            }
        }
    }

    verdict(
        "c2 causality",
        propagated == 20 && above_diag_zero,
        &format!(
            "20 perturbations, {unchanged_checks} earlier embeddings bitwise-identical, \
             {propagated}/20 propagated forward, above-diagonal mass exactly 0: {above_diag_zero}"
        ),
    );
}

// --- c3: AUC oracle equivalence ----------------------------------------------

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut hits = 0.0_f64;
    let mut pairs = 0usize;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1;
            if sp > sn {
                hits += 1.0;
            } else if sp == sn {
                hits += 0.5;
            }
        }
    }
    hits / pairs as f64
}

#[test]
fn c3_auc_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    let mut sizes = (0, usize::MAX);
    for i in 0..200 {
        let n = match i {
            0 => 2,
            1 => 200,
            _ => rng.gen_range(2..=200),
        };
        sizes = (sizes.0.max(n), sizes.1.min(n));
        // Half the instances quantize scores so ties are common.
        let quantized = i % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if quantized {
                    rng.gen_range(0..8) as f64 * 0.25
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[n - 1] = false;

        let fast = roc_auc(&scores, &labels).expect("rank-statistic AUC");
        let slow = brute_force_auc(&scores, &labels);
        if fast != slow {
            mismatches += 1;
        }
    }
    verdict(
        "c3 auc-oracle-equivalence",
        mismatches == 0,
        &format!("200 instances, sizes {}..={}, {mismatches} mismatches", sizes.1, sizes.0),
    );
}

// --- c4: null and signal sanity ----------------------------------------------

fn c4_model() -> ModelConfig {
    ModelConfig {
        structural_dims: vec![32],
        structural_heads: 4,
        temporal_dim: 32,
        temporal_heads: 4,
        ..ModelConfig::default()
    }
}

fn c4_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs_per_step: epochs,
        batch_size: 256,
        learning_rate: 0.01,
        walks_per_node: 10,
        walk_length: 20,
        context_window: 5,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn c4_null_and_signal_sanity() {
    let _guard = timed_lock();
    let pool = serial_pool();
    let start = Instant::now();
    let (null_micro, persist_micro) = pool.install(|| {
        let null = synth::null_graph(40, 5, 60, 5);
        let (null_micro, _) = train_and_eval(null, c4_model(), c4_train(10));
        let persist = synth::persistence_graph(7);
        let (persist_micro, _) = train_and_eval(persist, c4_model(), c4_train(50));
        (null_micro, persist_micro)
    });
    let elapsed = start.elapsed();
    let null_ok = (0.43..=0.57).contains(&null_micro);
    let persist_ok = persist_micro >= 0.90;
    let in_budget = elapsed < Duration::from_secs(600);
    verdict(
        "c4 null-and-signal-sanity",
        null_ok && persist_ok && in_budget,
        &format!(
            "null micro {null_micro:.4} (want 0.43..=0.57), persistence micro {persist_micro:.4} \
             (want >=0.90), {:.0}s single-threaded (budget 600s)",
            elapsed.as_secs_f64()
        ),
    );
}

// --- c5: desk-scale reproduction ----------------------------------------------

fn c5_model() -> ModelConfig {
    ModelConfig {
        structural_dims: vec![64],
        structural_heads: 8,
        temporal_dim: 64,
        temporal_heads: 8,
        ..ModelConfig::default()
    }
}

fn c5_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs_per_step: epochs,
        batch_size: 256,
        learning_rate: 0.01,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn c5_desk_scale_reduced_budget() {
    let _guard = timed_lock();
    let pool = serial_pool();
    let start = Instant::now();
    let (micro, macro_) =
        pool.install(|| train_and_eval(synth::enron_shaped(3), c5_model(), c5_train(50)));
    let elapsed = start.elapsed();
    let in_budget = elapsed < Duration::from_secs(1800);
    verdict(
        "c5 desk-scale-reduced-budget",
        micro >= 0.78 && macro_ >= 0.76 && in_budget,
        &format!(
            "micro {micro:.4} (want >=0.78), macro {macro_:.4} (want >=0.76), \
             {:.0}s single-threaded (budget 1800s)",
            elapsed.as_secs_f64()
        ),
    );
}

/// Full-budget soft target. The reference numbers come from unstated
/// hyperparameters, so this is informational: run it by hand with
/// `cargo test -p convdysat --test acceptance -- --ignored --nocapture`.
#[test]
#[ignore = "soft target, roughly 4x the reduced-budget runtime"]
fn c5_desk_scale_full_budget_soft() {
    let _guard = timed_lock();
    let pool = serial_pool();
    let (micro, macro_) =
        pool.install(|| train_and_eval(synth::enron_shaped(3), c5_model(), c5_train(200)));
    let micro_pts = micro * 100.0;
    let macro_pts = macro_ * 100.0;
    let ok = (micro_pts - 88.37).abs() <= 4.0 && (macro_pts - 86.33).abs() <= 4.0;
    println!(
        "ACCEPTANCE c5-soft full-budget: {} (micro {micro_pts:.2} vs 88.37 +/- 4.0, \
         macro {macro_pts:.2} vs 86.33 +/- 4.0)",
        if ok { "PASS" } else { "FAIL" }
    );
    // Soft target: report without asserting.
}

// --- c6: loss decrease ---------------------------------------------------------

#[test]
fn c6_loss_decrease_on_toy() {
    let mut details = Vec::new();
    let mut all_ok = true;
    for seed in [1, 2, 3] {
        let cfg = TrainConfig {
            epochs_per_step: 11,
            batch_size: 128,
            learning_rate: 0.01,
            walks_per_node: 10,
            walk_length: 20,
            context_window: 5,
            seed,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            structural_dims: vec![16],
            structural_heads: 2,
            temporal_dim: 16,
            temporal_heads: 2,
            ..ModelConfig::default()
        };
        let mut trainer = Trainer::new(toy_graph(), model, cfg).expect("trainer");
        trainer.run(Some(11)).expect("eleven epochs");
        let records = trainer.records();
        assert!(records.len() >= 11, "expected 11 epoch records on step 1");
        let first = records[0].loss;
        let tenth = records[10].loss;
        let ok = tenth <= 0.8 * first;
        all_ok &= ok;
        details.push(format!("seed {seed}: {first:.4} -> {tenth:.4}"));
    }
    verdict(
        "c6 loss-decrease",
        all_ok,
        &format!("epoch-10 <= 0.8 x epoch-0 for seeds 1..3 ({})", details.join("; ")),
    );
}

// --- c7: determinism ------------------------------------------------------------

fn write_c7_config(dir: &std::path::Path, out: &std::path::Path) -> PathBuf {
    let edges = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy.edges");
    let edges = edges.canonicalize().expect("toy dataset path");
    let cfg = serde_json::json!({
        "data.edges": edges,
        "data.steps": 4,
        "run.out": out,
        "model.structural_dims": [8],
        "model.structural_heads": 2,
        "model.temporal_dim": 8,
        "model.temporal_heads": 2,
        "train.epochs_per_step": 3,
        "train.learning_rate": 0.01,
        "train.batch_size": 128,
        "train.walks_per_node": 5,
        "train.walk_length": 20,
        "train.context_window": 5,
        "eval.seeds": [1, 2],
        "eval.iterations": 100,
    });
    let path = dir.join(format!(
        "{}.json",
        out.file_name().and_then(|s| s.to_str()).unwrap_or("cfg")
    ));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run_c7(bin: &str, cfg: &std::path::Path, threads: Option<usize>) {
    for sub in ["train", "evaluate"] {
        let mut cmd = Command::new(bin);
        if let Some(n) = threads {
            cmd.arg("--threads").arg(n.to_string());
        }
        cmd.arg(sub).arg("--config").arg(cfg);
        let out = cmd.output().expect("spawn convdysat");
        assert!(
            out.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn c7_determinism() {
    let bin = env!("CARGO_BIN_EXE_convdysat");
    let tmp = tempfile::tempdir().expect("tempdir");
    let runs = ["a", "b", "threads4"];
    for (i, name) in runs.iter().enumerate() {
        let out = tmp.path().join(name);
        let cfg = write_c7_config(tmp.path(), &out);
        let threads = if i == 2 { Some(4) } else { None };
        run_c7(bin, &cfg, threads);
    }
    let read = |name: &str, file: &str| -> Vec<u8> {
        std::fs::read(tmp.path().join(name).join(file)).expect("run output file")
    };
    let mut same = true;
    for file in ["metrics.csv", "eval.csv"] {
        let a = read("a", file);
        same &= a == read("b", file) && a == read("threads4", file);
    }
    verdict(
        "c7 determinism",
        same,
        "metrics.csv and eval.csv byte-identical across repeat run and --threads 4",
    );
}

// --- c8: mask and shape contracts -----------------------------------------------

#[test]
fn c8_mask_and_shape_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let nodes = 6;
    let bins = random_bins(&mut rng, nodes, 2, 7);
    let g = DynamicGraph::from_step_edges(nodes, bins).expect("two-bin graph");
    let dense = snapshot_dense(g.snapshot(1).expect("snapshot"));

    let mut checked_rows = 0usize;
    let mut max_row_err = 0.0_f64;
    let mut dims_ok = true;
    for h in [1usize, 2, 4, 8] {
        // Structural attention: per-head dim 3, expect [N, 3h].
        let mut tape = ComputationTape::new();
        let x = tape.constant(rand_tensor(&mut rng, vec![nodes, 5]));
        let heads: Vec<StructuralHeadIds> = (0..h)
            .map(|_| StructuralHeadIds {
                w: tape.constant(rand_tensor(&mut rng, vec![5, 3])),
                a: tape.constant(rand_tensor(&mut rng, vec![6, 1])),
            })
            .collect();
        let out = structural_attention(&mut tape, &dense, Some(x), &heads).expect("structural");
        dims_ok &= tape.value(out.output).unwrap().shape() == [nodes, 3 * h];
        for alpha in &out.alphas {
            let a = tape.value(*alpha).unwrap();
            for r in 0..nodes {
                let sum: f64 = a.data()[r * nodes..(r + 1) * nodes].iter().sum();
                max_row_err = max_row_err.max((sum - 1.0).abs());
                checked_rows += 1;
            }
        }

        // Temporal attention: per-head dim 2 over 5 steps, expect [T, 2h].
        let steps = 5;
        let mut tape = ComputationTape::new();
        let x = tape.constant(rand_tensor(&mut rng, vec![steps, 4]));
        let mask = tape.constant(build_mask(steps));
        let heads: Vec<TemporalHeadIds> = (0..h)
            .map(|_| TemporalHeadIds {
                q_kernel: tape.constant(rand_tensor(&mut rng, vec![2, 4, 2])),
                q_bias: tape.constant(rand_tensor(&mut rng, vec![2])),
                k_kernel: tape.constant(rand_tensor(&mut rng, vec![2, 4, 2])),
                k_bias: tape.constant(rand_tensor(&mut rng, vec![2])),
                v_kernel: tape.constant(rand_tensor(&mut rng, vec![1, 4, 2])),
                v_bias: tape.constant(rand_tensor(&mut rng, vec![2])),
            })
            .collect();
        let scale = 1.0 / (2.0_f64).sqrt();
        let out = temporal_attention(&mut tape, x, &heads, mask, scale).expect("temporal");
        dims_ok &= tape.value(out.output).unwrap().shape() == [steps, 2 * h];
        for beta in &out.betas {
            let b = tape.value(*beta).unwrap();
            for r in 0..steps {
                let row = &b.data()[r * steps..(r + 1) * steps];
                let sum: f64 = row.iter().sum();
                max_row_err = max_row_err.max((sum - 1.0).abs());
                checked_rows += 1;
                for (c, &val) in row.iter().enumerate() {
                    if c > r {
                        assert_eq!(val, 0.0, "beta mass above diagonal at ({r},{c})");
                    }
                }
            }
        }

        // End to end: total dims stay divisible concatenations of h heads.
        let cfg = ModelConfig {
            structural_dims: vec![8],
            structural_heads: h,
            temporal_dim: 8,
            temporal_heads: h,
            ..ModelConfig::default()
        };
        let store = init_params(&cfg, nodes, g.steps(), 9).expect("params");
        let table = forward(&g, &store, &cfg, g.steps()).expect("forward");
        dims_ok &= table.dim == 8 && table.all_finite();
    }

    verdict(
        "c8 mask-shape-contracts",
        dims_ok && max_row_err <= 1e-12,
        &format!(
            "head counts 1,2,4,8 concatenate to H x per-head dim; {checked_rows} attention rows \
             sum to 1 within 1e-12 (max |sum-1| = {max_row_err:.2e})"
        ),
    );
}
