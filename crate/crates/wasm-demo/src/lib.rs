//! A tiny teacher/proxy pair trained in place, plus the three views the
//! page shows: the adjusted next-token distribution, the ε error curve and
//! sampled traces. [`Lab`] is plain Rust; [`DemoLab`] wraps it for JS with
//! JSON strings in and out.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use antidistill::distill::{finetune, TrainConfig};
use antidistill::gradstore::compute_downstream_grad;
use antidistill::model::{init_model, MaskedSequence, ModelConfig, TransformerModel};
use antidistill::numerics::ParamVector;
use antidistill::sampler::{
    adjusted_distribution, decade_grid, delta_hat, epsilon_error_sweep, generate_trace, EpsilonErrorRow,
    PenaltyContext, SamplerKind, SamplerSpec,
};
use antidistill::tasks::{detokenize, generate_dataset, tokenize, TaskInstance, Vocab};
use antidistill::Result;

const EPSILON: f64 = 1e-6;

fn model_config(d_model: usize, n_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: Vocab::SIZE,
        d_model,
        n_layers,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_seq_len: 48,
        init_seed: seed,
    }
}

fn gold(instances: &[TaskInstance]) -> Vec<MaskedSequence> {
    instances
        .iter()
        .map(|i| MaskedSequence::from_prompt_completion(&i.prompt_tokens, &i.gold_trace_tokens))
        .collect()
}

/// Parses `3+4+2` into a task instance.
pub fn parse_problem(text: &str) -> Result<TaskInstance> {
    let operands: std::result::Result<Vec<u64>, _> = text.split('+').map(|s| s.trim().parse::<u64>()).collect();
    let operands =
        operands.map_err(|_| antidistill::Error::InvalidArgument(format!("`{text}` is not a sum like 3+4+2")))?;
    TaskInstance::from_operands(&operands)
}

#[derive(Clone, Debug, Serialize)]
pub struct Distribution {
    pub labels: Vec<String>,
    pub teacher: Vec<f64>,
    pub delta: Vec<f64>,
    pub adjusted: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Generation {
    pub text: String,
    pub answer: Option<u64>,
    pub correct: bool,
    pub teacher_forwards: usize,
    pub proxy_forwards: usize,
}

pub struct Lab {
    teacher: TransformerModel,
    ctx: PenaltyContext,
    g: ParamVector,
    contexts: Vec<Vec<usize>>,
}

impl Lab {
    /// Trains a teacher and a smaller proxy on gold traces of 2–3 one-digit
    /// sums; `epochs` trades start-up time for teacher quality.
    pub fn new(seed: u64, epochs: usize) -> Result<Self> {
        let data = generate_dataset(seed, 700, (2, 3), (1, 1))?;
        let (corpus, holdout) = data.split_at(600);
        let train = TrainConfig {
            learning_rate: 3e-3,
            epochs: epochs.max(1),
            batch_size: 16,
            eval_interval_steps: 1000,
            ..TrainConfig::default()
        };
        let (teacher, _) = finetune(&init_model(&model_config(24, 2, seed))?, &gold(corpus), &[], &train)?;
        let short = TrainConfig { epochs: 1, ..train };
        let (proxy, _) = finetune(&init_model(&model_config(16, 1, seed + 1))?, &gold(&corpus[..200]), &[], &short)?;
        let (art, _) = compute_downstream_grad(&proxy, &gold(holdout), "gold holdout")?;
        let ctx = PenaltyContext::new(&proxy, &art.g, EPSILON, "gold holdout")?;
        let contexts = holdout
            .iter()
            .take(20)
            .enumerate()
            .map(|(i, inst)| {
                let full = inst.full_tokens();
                full[..inst.prompt_tokens.len() + i % inst.gold_trace_tokens.len()].to_vec()
            })
            .collect();
        Ok(Self { teacher, ctx, g: art.g, contexts })
    }

    /// Next-token view after `problem` and an optional partial trace such as `<R>7,`.
    pub fn distribution(&self, problem: &str, partial: &str, tau: f64, lambda: f64) -> Result<Distribution> {
        let mut prefix = parse_problem(problem)?.prompt_tokens;
        prefix.extend(tokenize(partial)?);
        let teacher_logp = self.teacher.next_token_logprobs(&prefix)?;
        let delta = delta_hat(&self.ctx, &prefix)?;
        let adjusted = adjusted_distribution(&teacher_logp, Some(&delta), tau, lambda)?;
        let teacher = adjusted_distribution(&teacher_logp, None, tau, 0.0)?;
        Ok(Distribution {
            labels: (0..Vocab::SIZE).map(|t| detokenize(&[t]).unwrap_or_default()).collect(),
            teacher,
            delta,
            adjusted,
        })
    }

    pub fn epsilon_curve(&self, lo: i32, hi: i32) -> Result<Vec<EpsilonErrorRow>> {
        epsilon_error_sweep(self.ctx.proxy(), &self.g, &self.contexts, &decade_grid(lo, hi))
    }

    pub fn generate(&self, problem: &str, kind: SamplerKind, tau: f64, lambda: f64, seed: u64) -> Result<Generation> {
        let inst = parse_problem(problem)?;
        let spec = match kind {
            SamplerKind::Temperature => SamplerSpec::temperature(tau, 24, seed),
            k => SamplerSpec::penalized(k, tau, lambda, EPSILON, 24, seed),
        };
        let ctx = kind.uses_penalty().then_some(&self.ctx);
        let mut trace = generate_trace(&self.teacher, &spec, ctx, &inst.prompt_tokens)?;
        trace.score(inst.gold_answer);
        Ok(Generation {
            text: detokenize(&trace.generated_tokens)?,
            answer: trace.extracted_answer,
            correct: trace.correct,
            teacher_forwards: trace.teacher_forward_count,
            proxy_forwards: trace.proxy_forward_count,
        })
    }
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct DemoLab(Lab);

#[wasm_bindgen]
impl DemoLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, epochs: u32) -> std::result::Result<DemoLab, JsError> {
        Lab::new(seed as u64, epochs as usize)
            .map(DemoLab)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn distribution(&self, problem: &str, partial: &str, tau: f64, lambda: f64) -> std::result::Result<String, JsError> {
        js(self.0.distribution(problem, partial, tau, lambda))
    }

    #[wasm_bindgen(js_name = epsilonCurve)]
    pub fn epsilon_curve(&self, lo: i32, hi: i32) -> std::result::Result<String, JsError> {
        js(self.0.epsilon_curve(lo, hi))
    }

    /// `kind` is `temperature`, `antidistill` or `permutation`.
    pub fn generate(&self, problem: &str, kind: &str, tau: f64, lambda: f64, seed: u32) -> std::result::Result<String, JsError> {
        let kind = match kind {
            "temperature" => SamplerKind::Temperature,
            "antidistill" => SamplerKind::Antidistill,
            "permutation" => SamplerKind::Permutation,
            other => return Err(JsError::new(&format!("unknown sampler `{other}`"))),
        };
        js(self.0.generate(problem, kind, tau, lambda, seed as u64))
    }
}
