//! The downstream-loss gradient `g = ∇ℓ(θ_P)`.
//!
//! `ℓ` is the proxy's mean masked NLL on teacher traces for the held-out
//! problems, with prompt positions masked out. `g` is stored raw; any scaling
//! is absorbed by ε and λ at sampling time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskedSequence, TransformerModel};
use crate::numerics::ParamVector;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientArtifact {
    pub g: ParamVector,
    pub source_trace_artifact: String,
    pub proxy_config_hash: String,
    pub norm: f64,
    /// Unix seconds. Kept out of the sidecar so rebuilt payloads are byte-identical.
    pub created_at: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    source_trace_artifact: String,
    proxy_config_hash: String,
    proxy_params_hash: String,
    grad_hash: String,
    norm: f64,
    loss: f64,
    trace_count: usize,
}

pub fn compute_downstream_grad(
    proxy: &TransformerModel,
    holdout_traces: &[MaskedSequence],
    source_trace_artifact: &str,
) -> Result<(GradientArtifact, f64)> {
    if holdout_traces.is_empty() {
        return Err(Error::invalid("no held-out traces to differentiate"));
    }
    let (loss, g) = proxy.accumulate_loss_grad(holdout_traces)?;
    let norm = g.norm();
    Ok((
        GradientArtifact {
            g,
            source_trace_artifact: source_trace_artifact.to_string(),
            proxy_config_hash: proxy.config.digest(),
            norm,
            created_at: now_unix(),
        },
        loss,
    ))
}

pub(crate) fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl GradientArtifact {
    pub fn paths(dir: &Path) -> (PathBuf, PathBuf) {
        (dir.join("student_grad.json"), dir.join("student_grad.bin"))
    }

    /// Fails unless the gradient was taken for a proxy with this config.
    pub fn check_proxy(&self, proxy: &TransformerModel) -> Result<()> {
        if self.proxy_config_hash != proxy.config.digest() {
            return Err(Error::invalid("gradient was computed for a different proxy config"));
        }
        proxy.params.check_same_layout(&self.g)
    }

    pub fn save(&self, dir: &Path, proxy_params_hash: &str, loss: f64, trace_count: usize) -> Result<()> {
        let (json_path, bin_path) = Self::paths(dir);
        let sidecar = Sidecar {
            source_trace_artifact: self.source_trace_artifact.clone(),
            proxy_config_hash: self.proxy_config_hash.clone(),
            proxy_params_hash: proxy_params_hash.to_string(),
            grad_hash: self.g.digest(),
            norm: self.norm,
            loss,
            trace_count,
        };
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
        self.g.save(&bin_path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (json_path, bin_path) = Self::paths(dir);
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let g = ParamVector::load(&bin_path)?;
        if g.digest() != sidecar.grad_hash {
            return Err(Error::Format {
                path: bin_path,
                detail: "gradient payload does not match its recorded hash".into(),
            });
        }
        let created_at = std::fs::metadata(&bin_path)
            .and_then(|m| m.modified())
            .ok()
            .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            g,
            source_trace_artifact: sidecar.source_trace_artifact,
            proxy_config_hash: sidecar.proxy_config_hash,
            norm: sidecar.norm,
            created_at,
        })
    }
}
