//! Flat dotted-key JSON run configuration.
//!
//! One file drives both train and evaluate. Every key is `section.field` and
//! maps one-to-one onto a core config struct, so the echo written into the
//! output directory parses back to the identical configuration. Unknown keys
//! are rejected rather than ignored.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde_json::{json, Value};

use convdysat_core::evaluation::EvalConfig;
use convdysat_core::graph::SnapshotMode;
use convdysat_core::model::{LossReduction, ModelConfig};
use convdysat_core::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub edges: PathBuf,
    pub steps: usize,
    pub mode: SnapshotMode,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let map: BTreeMap<String, Value> = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("config is not a flat JSON object: {e}")))?;
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        let mut eval = EvalConfig::default();
        let mut edges: Option<PathBuf> = None;
        let mut steps: Option<usize> = None;
        let mut mode = SnapshotMode::Binned;
        let mut out: Option<PathBuf> = None;

        for (key, value) in &map {
            match key.as_str() {
                "data.edges" => edges = Some(PathBuf::from(as_str(key, value)?)),
                "data.steps" => steps = Some(as_usize(key, value)?),
                "data.mode" => {
                    mode = SnapshotMode::from_str(as_str(key, value)?).map_err(CliError::Config)?
                }
                "run.out" => out = Some(PathBuf::from(as_str(key, value)?)),

                "model.structural_dims" => model.structural_dims = as_usize_list(key, value)?,
                "model.structural_heads" => model.structural_heads = as_usize(key, value)?,
                "model.temporal_dim" => model.temporal_dim = as_usize(key, value)?,
                "model.temporal_heads" => model.temporal_heads = as_usize(key, value)?,
                "model.qk_kernel" => model.qk_kernel = as_usize(key, value)?,
                "model.negative_ratio" => model.negative_ratio = as_f64(key, value)?,
                "model.negatives_per_positive" => {
                    model.negatives_per_positive = as_usize(key, value)?
                }
                "model.scale_by_full_dim" => model.scale_by_full_dim = as_bool(key, value)?,
                "model.reduction" => {
                    model.reduction = match as_str(key, value)? {
                        "mean" => LossReduction::Mean,
                        "sum" => LossReduction::Sum,
                        other => {
                            return Err(CliError::Config(format!(
                                "{key} must be \"mean\" or \"sum\", got \"{other}\""
                            )))
                        }
                    }
                }

                "train.epochs_per_step" => train.epochs_per_step = as_usize(key, value)?,
                "train.batch_size" => train.batch_size = as_usize(key, value)?,
                "train.learning_rate" => train.learning_rate = as_f64(key, value)?,
                "train.beta1" => train.beta1 = as_f64(key, value)?,
                "train.beta2" => train.beta2 = as_f64(key, value)?,
                "train.epsilon" => train.epsilon = as_f64(key, value)?,
                "train.weight_decay" => train.weight_decay = as_f64(key, value)?,
                "train.gradient_clip_norm" => train.gradient_clip_norm = as_f64(key, value)?,
                "train.seed" => train.seed = as_u64(key, value)?,
                "train.walks_per_node" => train.walks_per_node = as_usize(key, value)?,
                "train.walk_length" => train.walk_length = as_usize(key, value)?,
                "train.context_window" => train.context_window = as_usize(key, value)?,
                "train.cold_start" => train.cold_start = as_bool(key, value)?,
                "train.latest_only" => train.latest_only = as_bool(key, value)?,
                "train.first_eval_step" => train.first_eval_step = as_usize(key, value)?,

                "eval.seeds" => eval.seeds = as_u64_list(key, value)?,
                "eval.l2_grid" => eval.l2_grid = as_f64_list(key, value)?,
                "eval.iterations" => eval.iterations = as_usize(key, value)?,
                "eval.validation_fraction" => {
                    eval.split.validation_fraction = as_f64(key, value)?
                }
                "eval.train_fraction" => eval.split.train_fraction = as_f64(key, value)?,

                other => {
                    return Err(CliError::Config(format!("unknown config key \"{other}\"")))
                }
            }
        }

        let cfg = Self {
            edges: edges.ok_or_else(|| missing("data.edges"))?,
            steps: steps.ok_or_else(|| missing("data.steps"))?,
            mode,
            out: out.ok_or_else(|| missing("run.out"))?,
            model,
            train,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.steps < 2 {
            return Err(CliError::Config("data.steps must be at least 2".into()));
        }
        self.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.seeds.is_empty() {
            return Err(CliError::Config("eval.seeds must not be empty".into()));
        }
        if self.eval.l2_grid.is_empty() {
            return Err(CliError::Config("eval.l2_grid must not be empty".into()));
        }
        if self.eval.iterations == 0 {
            return Err(CliError::Config("eval.iterations must be positive".into()));
        }
        let v = self.eval.split.validation_fraction;
        if !(0.0..1.0).contains(&v) {
            return Err(CliError::Config(
                "eval.validation_fraction must lie in [0, 1)".into(),
            ));
        }
        let t = self.eval.split.train_fraction;
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::Config(
                "eval.train_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// The exact resolved configuration as sorted flat JSON; parsing it back
    /// reproduces this config.
    pub fn to_json(&self) -> String {
        let mut map: BTreeMap<String, Value> = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        put("data.edges", json!(self.edges.to_string_lossy()));
        put("data.steps", json!(self.steps));
        put("data.mode", json!(self.mode.to_string()));
        put("run.out", json!(self.out.to_string_lossy()));

        put("model.structural_dims", json!(self.model.structural_dims));
        put("model.structural_heads", json!(self.model.structural_heads));
        put("model.temporal_dim", json!(self.model.temporal_dim));
        put("model.temporal_heads", json!(self.model.temporal_heads));
        put("model.qk_kernel", json!(self.model.qk_kernel));
        put("model.negative_ratio", json!(self.model.negative_ratio));
        put(
            "model.negatives_per_positive",
            json!(self.model.negatives_per_positive),
        );
        put(
            "model.scale_by_full_dim",
            json!(self.model.scale_by_full_dim),
        );
        let reduction = match self.model.reduction {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        };
        put("model.reduction", json!(reduction));

        put("train.epochs_per_step", json!(self.train.epochs_per_step));
        put("train.batch_size", json!(self.train.batch_size));
        put("train.learning_rate", json!(self.train.learning_rate));
        put("train.beta1", json!(self.train.beta1));
        put("train.beta2", json!(self.train.beta2));
        put("train.epsilon", json!(self.train.epsilon));
        put("train.weight_decay", json!(self.train.weight_decay));
        put(
            "train.gradient_clip_norm",
            json!(self.train.gradient_clip_norm),
        );
        put("train.seed", json!(self.train.seed));
        put("train.walks_per_node", json!(self.train.walks_per_node));
        put("train.walk_length", json!(self.train.walk_length));
        put("train.context_window", json!(self.train.context_window));
        put("train.cold_start", json!(self.train.cold_start));
        put("train.latest_only", json!(self.train.latest_only));
        put("train.first_eval_step", json!(self.train.first_eval_step));

        put("eval.seeds", json!(self.eval.seeds));
        put("eval.l2_grid", json!(self.eval.l2_grid));
        put("eval.iterations", json!(self.eval.iterations));
        put(
            "eval.validation_fraction",
            json!(self.eval.split.validation_fraction),
        );
        put("eval.train_fraction", json!(self.eval.split.train_fraction));

        let mut text =
            serde_json::to_string_pretty(&map).expect("flat config serializes");
        text.push('\n');
        text
    }
}

fn missing(key: &str) -> CliError {
    CliError::Config(format!("missing required config key \"{key}\""))
}

fn bad(key: &str, wanted: &str) -> CliError {
    CliError::Config(format!("{key} must be {wanted}"))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str, CliError> {
    v.as_str().ok_or_else(|| bad(key, "a string"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize, CliError> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| bad(key, "a non-negative integer"))
}

fn as_u64(key: &str, v: &Value) -> Result<u64, CliError> {
    v.as_u64().ok_or_else(|| bad(key, "a non-negative integer"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64, CliError> {
    v.as_f64().ok_or_else(|| bad(key, "a number"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, CliError> {
    v.as_bool().ok_or_else(|| bad(key, "true or false"))
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>, CliError> {
    v.as_array()
        .ok_or_else(|| bad(key, "an array of integers"))?
        .iter()
        .map(|item| as_usize(key, item))
        .collect()
}

fn as_u64_list(key: &str, v: &Value) -> Result<Vec<u64>, CliError> {
    v.as_array()
        .ok_or_else(|| bad(key, "an array of integers"))?
        .iter()
        .map(|item| as_u64(key, item))
        .collect()
}

fn as_f64_list(key: &str, v: &Value) -> Result<Vec<f64>, CliError> {
    v.as_array()
        .ok_or_else(|| bad(key, "an array of numbers"))?
        .iter()
        .map(|item| as_f64(key, item))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "data.edges": "data/toy.edges",
        "data.steps": 4,
        "run.out": "runs/toy",
        "model.structural_dims": [16],
        "model.structural_heads": 4,
        "model.temporal_dim": 16,
        "model.temporal_heads": 2,
        "train.epochs_per_step": 20,
        "train.learning_rate": 0.005,
        "eval.seeds": [1, 2, 3]
    }"#;

    #[test]
    fn parses_overrides_and_keeps_defaults() {
        let cfg = RunConfig::from_json(SAMPLE).unwrap();
        assert_eq!(cfg.steps, 4);
        assert_eq!(cfg.mode, SnapshotMode::Binned);
        assert_eq!(cfg.model.structural_dims, vec![16]);
        assert_eq!(cfg.model.qk_kernel, 2);
        assert_eq!(cfg.train.epochs_per_step, 20);
        assert_eq!(cfg.train.learning_rate, 0.005);
        assert_eq!(cfg.train.batch_size, 512);
        assert_eq!(cfg.eval.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_json(r#"{"data.edges": "x", "data.steps": 2, "run.out": "o", "model.tempral_heads": 2}"#)
            .unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        assert!(err.to_string().contains("model.tempral_heads"));
    }

    #[test]
    fn missing_required_key_is_rejected() {
        let err = RunConfig::from_json(r#"{"data.steps": 4, "run.out": "o"}"#).unwrap_err();
        assert!(err.to_string().contains("data.edges"));
    }

    #[test]
    fn echo_round_trips_losslessly() {
        let cfg = RunConfig::from_json(SAMPLE).unwrap();
        let echo = cfg.to_json();
        let again = RunConfig::from_json(&echo).unwrap();
        assert_eq!(again.to_json(), echo);
    }

    #[test]
    fn wrong_types_are_rejected() {
        for (snippet, needle) in [
            (r#""data.steps": "four""#, "data.steps"),
            (r#""train.learning_rate": true"#, "train.learning_rate"),
            (r#""model.structural_dims": 16"#, "model.structural_dims"),
        ] {
            let text = format!(
                r#"{{"data.edges": "x", "run.out": "o", {snippet}, "data.steps": 2}}"#
            );
            // A duplicate data.steps key would mask the check for that case.
            let text = if snippet.contains("data.steps") {
                format!(r#"{{"data.edges": "x", "run.out": "o", {snippet}}}"#)
            } else {
                text
            };
            let err = RunConfig::from_json(&text).unwrap_err();
            assert!(
                err.to_string().contains(needle),
                "expected {needle} in: {err}"
            );
        }
    }

    #[test]
    fn steps_below_two_are_rejected() {
        let err = RunConfig::from_json(
            r#"{"data.edges": "x", "data.steps": 1, "run.out": "o"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }
}
