//! Experiment configuration: line-oriented `key=value` on top of defaults.
//!
//! Keys are dotted paths into [`ExperimentConfig`], e.g. `teacher.d_model=96`
//! or `sweep.lambdas=0.0,0.1,0.3`. Blank lines and `#` comments are ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::{TaskConfig, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTraining {
    pub train: TrainConfig,
    /// Required test accuracy at the evaluation temperature.
    pub gate: f64,
    /// Rounds trained before the gate is checked.
    pub min_rounds: usize,
    pub max_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerDefaults {
    pub tau: f64,
    pub epsilon: f64,
    pub max_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub permutation_lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Run seed for single-run pipeline stages.
    pub seed: u64,
    pub task: TaskConfig,
    pub teacher: ModelConfig,
    pub proxy: ModelConfig,
    pub student: ModelConfig,
    pub teacher_training: TeacherTraining,
    /// Pre-training of the proxy and the student base on gold traces.
    pub base_training: TrainConfig,
    /// Gold examples used for base pre-training (a prefix of the teacher corpus).
    pub base_examples: usize,
    pub distill: TrainConfig,
    pub sampler: SamplerDefaults,
    pub icl_k: usize,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskConfig::default(),
            teacher: ModelConfig::teacher(),
            proxy: ModelConfig::proxy(),
            student: ModelConfig::student(),
            teacher_training: TeacherTraining {
                train: TrainConfig {
                    learning_rate: 1e-3,
                    epochs: 3,
                    eval_interval_steps: 1000,
                    ..TrainConfig::default()
                },
                gate: 0.95,
                min_rounds: 4,
                max_rounds: 6,
            },
            base_training: TrainConfig {
                learning_rate: 1e-3,
                epochs: 10,
                eval_interval_steps: 1000,
                ..TrainConfig::default()
            },
            base_examples: 4000,
            distill: TrainConfig::default(),
            sampler: SamplerDefaults {
                tau: 0.6,
                epsilon: 1e-6,
                max_tokens: 40,
            },
            icl_k: 3,
            sweep: SweepGrid {
                lambdas: vec![0.0, 0.005, 0.01, 0.02, 0.05],
                taus: vec![0.6, 0.9, 1.2],
                permutation_lambdas: vec![0.01, 0.02, 0.03, 0.05],
                seeds: vec![0, 1, 2, 3, 4],
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("teacher", &self.teacher), ("proxy", &self.proxy), ("student", &self.student)] {
            m.validate()?;
            if m.vocab_size != Vocab::SIZE {
                return Err(Error::invalid(format!("{name}.vocab_size must be {}", Vocab::SIZE)));
            }
        }
        self.teacher_training.train.validate()?;
        self.base_training.validate()?;
        self.distill.validate()?;
        if !(self.sampler.tau > 0.0) || !(self.sampler.epsilon > 0.0) || self.sampler.max_tokens == 0 {
            return Err(Error::invalid("sampler τ, ε and max_tokens must be positive"));
        }
        if self.teacher_training.min_rounds > self.teacher_training.max_rounds.max(1) {
            return Err(Error::invalid("teacher min_rounds exceeds max_rounds"));
        }
        if !(0.0..=1.0).contains(&self.teacher_training.gate) {
            return Err(Error::invalid("teacher gate must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", lineno + 1)))?;
            set_path(&mut tree, key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, sorted; parsing this back yields `self`.
    pub fn to_lines(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_lines().as_bytes()))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.push(format!("{prefix}={}", parts.join(",")));
        }
        other => out.push(format!("{prefix}={}", scalar_text(other))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_u64() && !n.is_i64() => format!("{f:?}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| format!("unknown key `{key}`"))?;
    }
    let replacement = match &*node {
        Value::Array(items) => {
            let template = items.first().cloned().unwrap_or(Value::from(0.0));
            let mut parsed = Vec::new();
            for piece in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                parsed.push(coerce(&template, piece).ok_or_else(|| format!("bad list item `{piece}` for `{key}`"))?);
            }
            Value::Array(parsed)
        }
        Value::Object(_) => return Err(format!("`{key}` is a section, not a value")),
        scalar => coerce(scalar, raw).ok_or_else(|| format!("bad value `{raw}` for `{key}`"))?,
    };
    *node = replacement;
    Ok(())
}

fn coerce(template: &Value, raw: &str) -> Option<Value> {
    match template {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::from),
        Value::String(_) => Some(Value::from(raw)),
        Value::Number(n) if n.is_u64() || n.is_i64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().filter(|f| f.is_finite()).map(Value::from),
        _ => None,
    }
}
