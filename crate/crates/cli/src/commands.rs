//! The four subcommands. Every output lands under the configured directory
//! with fixed names: manifest.json, metrics.csv, eval.csv, summary.json,
//! checkpoint.bin, config.json, plus timings.csv for wall-clock data so the
//! deterministic files stay byte-identical across reruns.

use std::fs;
use std::path::{Path, PathBuf};

use convdysat_core::checkpoint::Checkpoint;
use convdysat_core::evaluation;
use convdysat_core::gradcheck::{
    finite_difference_check, op_suite, GradCheckReport, FD_EPSILON, OP_TOLERANCE,
};
use convdysat_core::graph::{
    build_snapshots, parse_edge_list, DynamicGraph, EdgeRecord, SnapshotMode,
};
use convdysat_core::layers::layer_suite;
use convdysat_core::model::composed_suite;
use convdysat_core::tensor::Tensor;
use convdysat_core::training::Trainer;

use crate::config::RunConfig;
use crate::error::CliError;

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_records(path: &Path) -> Result<Vec<EdgeRecord>, CliError> {
    Ok(parse_edge_list(&read_to_string(path)?)?)
}

fn manifest_json(g: &DynamicGraph, mode: SnapshotMode, record_count: usize) -> String {
    let links: Vec<usize> = g.snapshots().iter().map(|s| s.edges().len()).collect();
    let manifest = serde_json::json!({
        "nodes": g.node_count(),
        "steps": g.steps(),
        "mode": mode.to_string(),
        "records": record_count,
        "links_per_step": links,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

pub fn ingest(
    edges: &Path,
    steps: usize,
    mode: SnapshotMode,
    out: &Path,
) -> Result<(), CliError> {
    let records = load_records(edges)?;
    let g = build_snapshots(&records, steps, mode)?;
    create_dir(out)?;
    for snapshot in g.snapshots() {
        let mut lines = String::new();
        for &(u, v, w) in snapshot.edges() {
            let lu = g.label(u).expect("interned node has a label");
            let lv = g.label(v).expect("interned node has a label");
            lines.push_str(&format!("{lu} {lv} {w}\n"));
        }
        write_file(
            &out.join(format!("snapshot_{:02}.edges", snapshot.time_index())),
            &lines,
        )?;
    }
    write_file(&out.join("manifest.json"), &manifest_json(&g, mode, records.len()))?;
    println!(
        "ingested {} records into {} snapshots over {} nodes",
        records.len(),
        g.steps(),
        g.node_count()
    );
    Ok(())
}

fn write_metrics(out: &Path, trainer: &Trainer) -> Result<(), CliError> {
    let mut csv = String::from("epoch,time_step,loss\n");
    for r in trainer.records() {
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.time_step, r.loss));
    }
    write_file(&out.join("metrics.csv"), &csv)?;
    let mut timings = String::from("epoch,time_step,wall_ms\n");
    for t in trainer.timings() {
        timings.push_str(&format!("{},{},{}\n", t.epoch, t.time_step, t.wall_ms));
    }
    write_file(&out.join("timings.csv"), &timings)
}

pub fn train(
    config_path: &Path,
    resume: bool,
    halt_after: Option<usize>,
) -> Result<(), CliError> {
    let cfg = RunConfig::from_json(&read_to_string(config_path)?)?;
    let records = load_records(&cfg.edges)?;
    let g = build_snapshots(&records, cfg.steps, cfg.mode)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.json"), &cfg.to_json())?;
    write_file(
        &cfg.out.join("manifest.json"),
        &manifest_json(&g, cfg.mode, records.len()),
    )?;

    let ckpt_path = cfg.out.join("checkpoint.bin");
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let same_model = serde_json::to_value(&ckpt.model_cfg).ok()
            == serde_json::to_value(&cfg.model).ok();
        let same_train = serde_json::to_value(&ckpt.train_cfg).ok()
            == serde_json::to_value(&cfg.train).ok();
        if !(same_model && same_train) {
            return Err(CliError::Shape(
                "checkpoint was written under a different configuration; \
                 resuming would not reproduce an uninterrupted run"
                    .into(),
            ));
        }
        Trainer::from_checkpoint(g, ckpt)?
    } else {
        Trainer::new(g, cfg.model.clone(), cfg.train.clone())?
    };

    let mut last_saved_step = trainer.current_step();
    let mut spent = 0usize;
    let outcome = loop {
        if trainer.finished() {
            break Ok(true);
        }
        if halt_after.is_some_and(|budget| spent >= budget) {
            break Ok(false);
        }
        match trainer.run(Some(1)) {
            Ok(done) => {
                if !done {
                    spent += 1;
                }
                // Keep a resumable checkpoint at every step boundary so an
                // abort never loses more than the current step.
                if trainer.current_step() > last_saved_step {
                    trainer.checkpoint().save(&ckpt_path)?;
                    last_saved_step = trainer.current_step();
                }
            }
            Err(e) => break Err(e),
        }
    };

    // Completed epochs are logged even when the run aborts, and the last
    // good checkpoint stays on disk for inspection or resume.
    write_metrics(&cfg.out, &trainer)?;
    match outcome {
        Ok(finished) => {
            trainer.checkpoint().save(&ckpt_path)?;
            let final_loss = trainer
                .records()
                .last()
                .map(|r| r.loss.to_string())
                .unwrap_or_else(|| "n/a".into());
            if finished {
                println!(
                    "trained {} epochs; final loss {final_loss}; outputs in {}",
                    trainer.total_epochs(),
                    cfg.out.display()
                );
            } else {
                println!(
                    "halted after {} total epochs; resume with --resume",
                    trainer.total_epochs()
                );
            }
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn evaluate(
    config_path: &Path,
    checkpoint: Option<PathBuf>,
    seeds: Option<u64>,
) -> Result<(), CliError> {
    let cfg = RunConfig::from_json(&read_to_string(config_path)?)?;
    let records = load_records(&cfg.edges)?;
    let g = build_snapshots(&records, cfg.steps, cfg.mode)?;
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.out.join("checkpoint.bin"));
    let ckpt = Checkpoint::load(&ckpt_path)?;

    if serde_json::to_value(&ckpt.model_cfg).ok() != serde_json::to_value(&cfg.model).ok() {
        return Err(CliError::Shape(
            "checkpoint model configuration differs from the run config".into(),
        ));
    }
    if let Some(w) = ckpt.params.get("structural.l0.h0.w") {
        let rows = w.shape()[0];
        if rows != g.node_count() {
            return Err(CliError::Shape(format!(
                "checkpoint was trained on {rows} nodes but the dataset has {}",
                g.node_count()
            )));
        }
    }

    let trainer = Trainer::from_checkpoint(g, ckpt)?;
    let steps: Vec<usize> = trainer.step_params().iter().map(|(t, _)| *t).collect();
    if steps.is_empty() {
        return Err(CliError::Config(
            "checkpoint has no finished training steps; run train first".into(),
        ));
    }
    let mut tables = Vec::with_capacity(steps.len());
    for t in steps {
        tables.push((t, trainer.embeddings_for_step(t)?));
    }

    let mut eval_cfg = cfg.eval.clone();
    if let Some(n) = seeds {
        if n == 0 {
            return Err(CliError::Config("--seeds must be at least 1".into()));
        }
        eval_cfg.seeds = (1..=n).collect();
    }
    let report = evaluation::evaluate(trainer.graph(), &tables, &eval_cfg)?;

    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.json"), &cfg.to_json())?;
    write_file(&cfg.out.join("eval.csv"), &report.to_csv())?;
    write_file(&cfg.out.join("summary.json"), &report.summary_json())?;
    println!(
        "micro-AUC {:.4} \u{b1} {:.4} | macro-AUC {:.4} \u{b1} {:.4}",
        report.micro_mean, report.micro_std, report.macro_mean, report.macro_std
    );
    Ok(())
}

/// Negative control for the gradient checker: the finite-difference probes
/// see a slightly different function than the one the tape differentiated,
/// which is exactly how a buggy backward rule presents.
fn corrupted_report() -> Result<GradCheckReport, CliError> {
    use std::cell::Cell;
    let first = Cell::new(true);
    let x = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.4])?;
    let err = finite_difference_check(
        move |tape, id| {
            let id = if first.replace(false) {
                id
            } else {
                tape.scale(id, 1.05)?
            };
            let s = tape.sigmoid(id)?;
            tape.sum(s)
        },
        &x,
        FD_EPSILON,
    )?;
    Ok(GradCheckReport {
        name: "corrupted_fixture".into(),
        max_rel_err: err,
        tolerance: OP_TOLERANCE,
    })
}

pub fn gradcheck(sizes: &str, corrupt_fixture: bool) -> Result<(), CliError> {
    if sizes != "small" {
        return Err(CliError::Config(format!(
            "unsupported --sizes \"{sizes}\"; only \"small\" is available"
        )));
    }
    let mut reports = op_suite(11)?;
    reports.extend(layer_suite(11)?);
    reports.extend(composed_suite(11)?);
    if corrupt_fixture {
        reports.push(corrupted_report()?);
    }
    let mut first_failure: Option<String> = None;
    for r in &reports {
        let verdict = if r.passes() { "ok" } else { "FAIL" };
        println!(
            "{:<32} max rel err {:>12.6e}  tol {:>7.0e}  {verdict}",
            r.name, r.max_rel_err, r.tolerance
        );
        if !r.passes() && first_failure.is_none() {
            first_failure = Some(r.name.clone());
        }
    }
    match first_failure {
        Some(name) => Err(CliError::GradCheck(format!(
            "component {name} exceeded its tolerance"
        ))),
        None => Ok(()),
    }
}
