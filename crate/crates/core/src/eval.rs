//! Accuracy, the utility–distillability sweep, and bootstrap aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{finetune, LossCurves, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{MaskedSequence, TransformerModel};
use crate::sampler::{derive_seed, generate_traces, PenaltyContext, SamplerKind, SamplerSpec, TraceRecord};
use crate::tasks::{build_icl_prompt, TaskInstance};

/// Student decoding temperature; the attacker samples cleanly.
pub const STUDENT_EVAL_TAU: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: SamplerKind,
    /// τ for temperature rows, λ otherwise.
    pub knob: f64,
    pub seed: u64,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub undistilled_accuracy: f64,
    pub final_holdout_loss: f64,
    pub trace_artifact: String,
    pub manifest_hash: String,
}

pub const METRICS_HEADER: &str =
    "method,knob,seed,teacher_acc,student_acc,undistilled_acc,final_holdout_loss,trace_artifact,manifest_hash";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.10},{},{}",
            self.method.as_str(),
            self.knob,
            self.seed,
            self.teacher_accuracy,
            self.student_accuracy,
            self.undistilled_accuracy,
            self.final_holdout_loss,
            self.trace_artifact,
            self.manifest_hash
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Fraction of traces whose extracted answer matches the gold answer.
pub fn score_traces(traces: &mut [TraceRecord], instances: &[TaskInstance]) -> Result<f64> {
    if traces.is_empty() || traces.len() != instances.len() {
        return Err(Error::invalid("need one trace per instance"));
    }
    for (t, inst) in traces.iter_mut().zip(instances) {
        t.score(inst.gold_answer);
    }
    Ok(traces.iter().filter(|t| t.correct).count() as f64 / traces.len() as f64)
}

pub fn evaluate_accuracy(
    model: &TransformerModel,
    instances: &[TaskInstance],
    spec: &SamplerSpec,
    ctx: Option<&PenaltyContext>,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::invalid("no instances to evaluate"));
    }
    let prompts: Vec<_> = instances.iter().map(|i| i.prompt_tokens.clone()).collect();
    let mut traces = generate_traces(model, spec, ctx, &prompts)?;
    score_traces(&mut traces, instances)
}

/// Accuracy with `k` gold exemplars prepended to every prompt.
pub fn evaluate_icl_accuracy(
    model: &TransformerModel,
    instances: &[TaskInstance],
    exemplars: &[TaskInstance],
    k: usize,
    spec: &SamplerSpec,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::invalid("no instances to evaluate"));
    }
    let mut prompts = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        // Rotate through the exemplar pool so prompts do not all share one context.
        let start = (i * k) % exemplars.len().max(1);
        let chosen: Vec<TaskInstance> = exemplars.iter().cycle().skip(start).take(k).cloned().collect();
        prompts.push(build_icl_prompt(inst, &chosen, k, model.config.max_seq_len)?);
    }
    let mut traces = generate_traces(model, spec, None, &prompts)?;
    score_traces(&mut traces, instances)
}

/// Percentile bootstrap of the mean, seeded for reproducibility.
pub fn bootstrap_ci_seeded(values: &[f64], resamples: usize, confidence: f64, seed: u64) -> Result<(f64, f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least two values"));
    }
    if !(confidence > 0.0 && confidence < 1.0) || resamples == 0 {
        return Err(Error::invalid("confidence must lie in (0, 1) and resamples be positive"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    let pick = |q: f64| {
        let idx = (q * (resamples - 1) as f64).round() as usize;
        means[idx.min(resamples - 1)]
    };
    Ok((mean, pick(alpha), pick(1.0 - alpha)))
}

pub fn bootstrap_ci(values: &[f64], resamples: usize, confidence: f64) -> Result<(f64, f64, f64)> {
    bootstrap_ci_seeded(values, resamples, confidence, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    /// λ values for the permutation baseline; empty skips it.
    pub permutation_lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Teacher temperature under antidistillation.
    pub tau: f64,
    pub epsilon: f64,
    pub max_tokens: usize,
    pub icl_k: usize,
    pub train: TrainConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.taus.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("λ grid, τ grid and seeds must be non-empty"));
        }
        self.train.validate()
    }

    pub fn row_count(&self) -> usize {
        self.seeds.len() * (self.lambdas.len() + self.taus.len() + self.permutation_lambdas.len())
    }
}

/// Everything a sweep reads but never changes.
pub struct SweepBases<'a> {
    pub teacher: &'a TransformerModel,
    pub student_base: &'a TransformerModel,
    pub penalty: &'a PenaltyContext,
    pub train: &'a [TaskInstance],
    pub test: &'a [TaskInstance],
    pub exemplars: &'a [TaskInstance],
    /// Clean teacher traces on held-out problems; the student's holdout loss.
    pub holdout_traces: &'a [MaskedSequence],
}

/// Per-row seeds: sampling depends only on the row seed and split, so the λ = 0
/// row and the equal-τ temperature row see identical randomness.
pub fn sampling_seed(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream)
}

pub const STREAM_TRAIN: u64 = 0;
pub const STREAM_TEST: u64 = 1;
pub const STREAM_STUDENT_EVAL: u64 = 2;
pub const STREAM_OPTIMIZER: u64 = 3;
pub const STREAM_ICL: u64 = 4;

pub struct RowOutcome {
    pub row: MetricsRow,
    pub curves: LossCurves,
    pub student: TransformerModel,
}

/// Runs one (method, knob, seed) cell of the sweep.
pub fn run_row(bases: &SweepBases<'_>, cfg: &SweepConfig, spec_template: &SamplerSpec, seed: u64, undistilled: f64) -> Result<RowOutcome> {
    let ctx = spec_template.kind.uses_penalty().then_some(bases.penalty);
    let test_spec = spec_template.with_seed(sampling_seed(seed, STREAM_TEST));
    let teacher_accuracy = evaluate_accuracy(bases.teacher, bases.test, &test_spec, ctx)?;

    let train_spec = spec_template.with_seed(sampling_seed(seed, STREAM_TRAIN));
    let prompts: Vec<_> = bases.train.iter().map(|i| i.prompt_tokens.clone()).collect();
    let traces = generate_traces(bases.teacher, &train_spec, ctx, &prompts)?;
    let seqs: Vec<MaskedSequence> = traces
        .iter()
        .map(|t| MaskedSequence::from_prompt_completion(&t.prompt_tokens, &t.generated_tokens))
        .collect();
    let train = TrainConfig {
        optimizer_seed: sampling_seed(seed, STREAM_OPTIMIZER),
        ..cfg.train.clone()
    };
    let (student, curves) = finetune(bases.student_base, &seqs, bases.holdout_traces, &train)?;
    let eval_spec = SamplerSpec::temperature(STUDENT_EVAL_TAU, cfg.max_tokens, sampling_seed(seed, STREAM_STUDENT_EVAL));
    let student_accuracy = evaluate_accuracy(&student, bases.test, &eval_spec, None)?;

    let knob = match spec_template.kind {
        SamplerKind::Temperature => spec_template.tau,
        _ => spec_template.lambda,
    };
    Ok(RowOutcome {
        row: MetricsRow {
            method: spec_template.kind,
            knob,
            seed,
            teacher_accuracy,
            student_accuracy,
            undistilled_accuracy: undistilled,
            final_holdout_loss: curves.final_holdout().unwrap_or(f64::NAN),
            trace_artifact: String::new(),
            manifest_hash: String::new(),
        },
        curves,
        student,
    })
}

pub fn undistilled_accuracy(bases: &SweepBases<'_>, cfg: &SweepConfig, seed: u64) -> Result<f64> {
    let spec = SamplerSpec::temperature(STUDENT_EVAL_TAU, cfg.max_tokens, sampling_seed(seed, STREAM_ICL));
    evaluate_icl_accuracy(bases.student_base, bases.test, bases.exemplars, cfg.icl_k, &spec)
}

/// Templates for every (method, knob) cell, in row order.
pub fn sweep_specs(cfg: &SweepConfig) -> Vec<SamplerSpec> {
    let mut specs = Vec::new();
    for &l in &cfg.lambdas {
        specs.push(SamplerSpec::penalized(SamplerKind::Antidistill, cfg.tau, l, cfg.epsilon, cfg.max_tokens, 0));
    }
    for &t in &cfg.taus {
        specs.push(SamplerSpec::temperature(t, cfg.max_tokens, 0));
    }
    for &l in &cfg.permutation_lambdas {
        specs.push(SamplerSpec::penalized(SamplerKind::Permutation, cfg.tau, l, cfg.epsilon, cfg.max_tokens, 0));
    }
    specs
}

pub fn tradeoff_sweep(bases: &SweepBases<'_>, cfg: &SweepConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let specs = sweep_specs(cfg);
    let mut rows = Vec::with_capacity(cfg.row_count());
    for &seed in &cfg.seeds {
        let undistilled = undistilled_accuracy(bases, cfg, seed)?;
        for spec in &specs {
            rows.push(run_row(bases, cfg, spec, seed, undistilled)?.row);
        }
    }
    Ok(rows)
}

/// Linear interpolation of `y` at `x` over points sorted by `x`; clamps outside the range.
pub fn interpolate(points: &[(f64, f64)], x: f64) -> Option<f64> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first = *pts.first()?;
    let last = *pts.last()?;
    if x <= first.0 {
        return Some(first.1);
    }
    if x >= last.0 {
        return Some(last.1);
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x >= x0 && x <= x1 {
            if x1 == x0 {
                return Some((y0 + y1) / 2.0);
            }
            return Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0));
        }
    }
    None
}

/// Mean of `field` over rows with the given method and knob.
pub fn mean_by(rows: &[MetricsRow], method: SamplerKind, knob: f64, field: impl Fn(&MetricsRow) -> f64) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.knob == knob)
        .map(field)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_examples() {
        assert_eq!(bootstrap_ci(&[0.3; 5], 1000, 0.95).unwrap(), (0.3, 0.3, 0.3));
        let (m, lo, hi) = bootstrap_ci(&[0.0, 1.0], 10_000, 0.95).unwrap();
        assert_eq!(m, 0.5);
        assert!((0.0..=0.5).contains(&lo) && (0.5..=1.0).contains(&hi));
        assert!(bootstrap_ci(&[1.0], 100, 0.95).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], 100, 1.0).is_err());
        assert_eq!(
            bootstrap_ci_seeded(&[1.0, 2.0, 4.0], 500, 0.9, 3).unwrap(),
            bootstrap_ci_seeded(&[1.0, 2.0, 4.0], 500, 0.9, 3).unwrap()
        );
    }

    #[test]
    fn bootstrap_coverage() {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials = 400;
        let mut covered = 0;
        for t in 0..trials {
            let sample: Vec<f64> = (0..50).map(|_| normal.sample(&mut rng)).collect();
            let (_, lo, hi) = bootstrap_ci_seeded(&sample, 1000, 0.95, t).unwrap();
            if lo <= 2.0 && 2.0 <= hi {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        assert!((rate - 0.95).abs() <= 0.03, "coverage {rate}");
    }

    #[test]
    fn interpolation() {
        let pts = [(0.2, 1.0), (0.8, 0.0), (0.5, 0.5)];
        assert_eq!(interpolate(&pts, 0.5), Some(0.5));
        assert!((interpolate(&pts, 0.65).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(interpolate(&pts, 0.0), Some(1.0));
        assert_eq!(interpolate(&pts, 1.0), Some(0.0));
        assert_eq!(interpolate(&[], 1.0), None);
    }

    #[test]
    fn csv_layout() {
        let row = MetricsRow {
            method: SamplerKind::Antidistill,
            knob: 0.3,
            seed: 2,
            teacher_accuracy: 0.9,
            student_accuracy: 0.5,
            undistilled_accuracy: 0.1,
            final_holdout_loss: 1.25,
            trace_artifact: "teacher_lambda=0.3_train".into(),
            manifest_hash: "ab".into(),
        };
        let csv = metrics_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), 9);
        assert_eq!(
            lines[1],
            "antidistill,0.3,2,0.900000,0.500000,0.100000,1.2500000000,teacher_lambda=0.3_train,ab"
        );
    }
}
