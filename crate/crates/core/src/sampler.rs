//! Temperature sampling and antidistillation sampling.
//!
//! Antidistillation sampling draws each token from
//! `softmax(logp_teacher / τ + λ·Δ̂)`, where `Δ̂[v]` is the central finite
//! difference of the proxy's log-probability of `v` along the stored
//! downstream-loss gradient `g`:
//!
//! ```text
//! Δ̂[v] = (log p(v | prefix; θ_P + εg) − log p(v | prefix; θ_P − εg)) / 2ε
//! ```
//!
//! `Δ̂[v] > 0` means that training on `v` would raise the proxy's held-out
//! loss, i.e. the token is harmful to a student. Both perturbed proxies are
//! materialized once in a [`PenaltyContext`], so each generated token costs one
//! teacher forward and two proxy forwards.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoder, TransformerModel};
use crate::numerics::{log_softmax, perturb, Graph, ParamVector, Tensor};
use crate::tasks::{extract_answer, TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Temperature,
    Antidistill,
    Permutation,
    ExactOracle,
}

impl SamplerKind {
    pub fn uses_penalty(self) -> bool {
        !matches!(self, SamplerKind::Temperature)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Temperature => "temperature",
            SamplerKind::Antidistill => "antidistill",
            SamplerKind::Permutation => "permutation",
            SamplerKind::ExactOracle => "exact-oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub max_tokens: usize,
    pub rng_seed: u64,
}

impl SamplerSpec {
    pub fn temperature(tau: f64, max_tokens: usize, rng_seed: u64) -> Self {
        Self {
            kind: SamplerKind::Temperature,
            tau,
            lambda: 0.0,
            epsilon: 0.0,
            max_tokens,
            rng_seed,
        }
    }

    pub fn penalized(kind: SamplerKind, tau: f64, lambda: f64, epsilon: f64, max_tokens: usize, rng_seed: u64) -> Self {
        Self {
            kind,
            tau,
            lambda,
            epsilon,
            max_tokens,
            rng_seed,
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be positive"));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("temperature {} must be finite and ≥ 0", self.tau)));
        }
        if self.kind.uses_penalty() {
            if self.tau <= 0.0 {
                return Err(Error::invalid("penalized sampling requires a positive temperature"));
            }
            if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
                return Err(Error::invalid(format!("lambda {} must be finite and ≥ 0", self.lambda)));
            }
            if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
                return Err(Error::invalid(format!("epsilon {} must be positive", self.epsilon)));
            }
        }
        Ok(())
    }

    /// λ actually applied: temperature sampling ignores it.
    fn effective_lambda(&self) -> f64 {
        if self.kind.uses_penalty() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// The two perturbed proxies `θ_P ± εg`, built once before sampling.
#[derive(Clone, Debug)]
pub struct PenaltyContext {
    pub proxy_plus: TransformerModel,
    pub proxy_minus: TransformerModel,
    pub epsilon: f64,
    /// Name or digest of the gradient artifact `g` came from.
    pub grad_ref: String,
    proxy: TransformerModel,
    direction: ParamVector,
}

impl PenaltyContext {
    pub fn new(proxy: &TransformerModel, g: &ParamVector, epsilon: f64, grad_ref: impl Into<String>) -> Result<Self> {
        proxy.params.check_same_layout(g)?;
        let plus = perturb(&proxy.params, g, epsilon, 1.0)?;
        let minus = perturb(&proxy.params, g, epsilon, -1.0)?;
        Ok(Self {
            proxy_plus: TransformerModel {
                config: proxy.config.clone(),
                params: plus,
            },
            proxy_minus: TransformerModel {
                config: proxy.config.clone(),
                params: minus,
            },
            epsilon,
            grad_ref: grad_ref.into(),
            proxy: proxy.clone(),
            direction: g.clone(),
        })
    }

    pub fn proxy(&self) -> &TransformerModel {
        &self.proxy
    }

    pub fn direction(&self) -> &ParamVector {
        &self.direction
    }
}

fn finite_difference(plus: &[f64], minus: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let delta: Vec<f64> = plus.iter().zip(minus).map(|(p, m)| (p - m) / (2.0 * epsilon)).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("delta_hat", "non-finite penalty"));
    }
    Ok(delta)
}

/// Finite-difference penalty for every next token, from two proxy forwards.
pub fn delta_hat(ctx: &PenaltyContext, prefix: &[TokenId]) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::invalid("empty prefix"));
    }
    let plus = ctx.proxy_plus.next_token_logprobs(prefix)?;
    let minus = ctx.proxy_minus.next_token_logprobs(prefix)?;
    finite_difference(&plus, &minus, ctx.epsilon)
}

/// Exact directional derivative `⟨g, ∇_θ log p(v | prefix; θ)⟩` for every `v`,
/// via one forward pass and `V` reverse passes.
pub fn delta_exact(proxy: &TransformerModel, g: &ParamVector, prefix: &[TokenId]) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::invalid("empty prefix"));
    }
    proxy.params.check_same_layout(g)?;
    let mut graph = Graph::new(&proxy.params);
    let logits = proxy.build_logits(&mut graph, prefix)?;
    let logp = graph.log_softmax(logits);
    if !graph.value(logp).is_finite() {
        return Err(Error::numeric("delta_exact", "non-finite log-probabilities"));
    }
    let shape = graph.value(logp).shape().to_vec();
    let (t, v) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(v);
    for tok in 0..v {
        let mut seed = Tensor::zeros(&shape);
        seed.data_mut()[(t - 1) * v + tok] = 1.0;
        let score = graph.backward_with(logp, seed)?;
        out.push(score.dot(g)?);
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("delta_exact", "non-finite directional derivative"));
    }
    Ok(out)
}

/// `|sin θ|` between the two vectors: `sqrt(1 − cos²)`. Insensitive to sign.
pub fn relative_error(delta: &[f64], delta_hat: &[f64]) -> Result<f64> {
    let c = signed_cosine(delta, delta_hat)?;
    Ok((1.0 - c * c).max(0.0).sqrt().min(1.0))
}

pub fn signed_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("vectors differ in length"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("relative error of a zero vector is undefined"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `softmax(teacher_logp / τ + λ·delta)`.
///
/// With `λ = 0` this is plain temperature sampling; with `τ = 0` and `λ = 0` it
/// degenerates to a one-hot on the argmax (lowest id wins ties).
pub fn adjusted_distribution(teacher_logp: &[f64], delta: Option<&[f64]>, tau: f64, lambda: f64) -> Result<Vec<f64>> {
    if teacher_logp.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda {lambda} must be finite and ≥ 0")));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be ≥ 0")));
    }
    if tau == 0.0 {
        if lambda > 0.0 {
            return Err(Error::invalid("a zero temperature would erase the penalty"));
        }
        let mut out = vec![0.0; teacher_logp.len()];
        out[argmax(teacher_logp)] = 1.0;
        return Ok(out);
    }
    let mut z: Vec<f64> = teacher_logp.iter().map(|l| l / tau).collect();
    if lambda > 0.0 {
        let delta = delta.ok_or_else(|| Error::invalid("λ > 0 requires a penalty vector"))?;
        if delta.len() != z.len() {
            return Err(Error::invalid("penalty length differs from vocabulary"));
        }
        for (zi, d) in z.iter_mut().zip(delta) {
            *zi += lambda * d;
        }
    }
    if z.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::numeric("adjusted_distribution", "non-finite logits"));
    }
    crate::numerics::kernels::softmax_in_place(&mut z);
    Ok(z)
}

/// Lowest index among the maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniformly random permutation of `delta` with independent random sign flips.
pub fn permute_signflip<R: Rng + ?Sized>(delta: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out = delta.to_vec();
    out.shuffle(rng);
    for v in &mut out {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    out
}

/// Inverse-CDF draw from a normalized probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_positive
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub prompt_tokens: Vec<TokenId>,
    pub generated_tokens: Vec<TokenId>,
    pub sampler: SamplerSpec,
    pub teacher_forward_count: usize,
    pub proxy_forward_count: usize,
    pub extracted_answer: Option<u64>,
    pub correct: bool,
}

impl TraceRecord {
    pub fn score(&mut self, gold: u64) {
        self.correct = self.extracted_answer == Some(gold);
    }
}

/// Mixes a run seed with an item index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Autoregressively samples up to `spec.max_tokens` tokens after `prompt`.
pub fn generate_trace(
    teacher: &TransformerModel,
    spec: &SamplerSpec,
    ctx: Option<&PenaltyContext>,
    prompt: &[TokenId],
) -> Result<TraceRecord> {
    spec.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let ctx = match (spec.kind.uses_penalty(), ctx) {
        (true, Some(c)) => Some(c),
        (false, None) => None,
        (true, None) => return Err(Error::invalid("penalized sampling needs a penalty context")),
        (false, Some(_)) => return Err(Error::invalid("temperature sampling takes no penalty context")),
    };
    let mut limit = teacher.config.max_seq_len;
    if let Some(c) = ctx {
        limit = limit.min(c.proxy_plus.config.max_seq_len);
    }
    if prompt.len() >= limit {
        return Err(Error::invalid("prompt leaves no room to generate"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut perm_rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    perm_rng.set_stream(1);

    let mut teacher_dec = Decoder::new(teacher);
    let mut teacher_logits = teacher_dec.feed(prompt)?;
    let mut proxy_decs = match ctx {
        Some(c) if spec.kind != SamplerKind::ExactOracle => {
            let mut plus = Decoder::new(&c.proxy_plus);
            let mut minus = Decoder::new(&c.proxy_minus);
            let lp = plus.feed(prompt)?;
            let lm = minus.feed(prompt)?;
            Some((plus, minus, lp, lm))
        }
        _ => None,
    };

    let mut prefix = prompt.to_vec();
    let mut generated = Vec::new();
    let (mut teacher_forwards, mut proxy_forwards) = (0, 0);
    let lambda = spec.effective_lambda();
    loop {
        teacher_forwards += 1;
        let logp = log_softmax(&teacher_logits)?;
        let delta = match (spec.kind, &proxy_decs, ctx) {
            (SamplerKind::Temperature, _, _) => None,
            (SamplerKind::ExactOracle, _, Some(c)) => {
                proxy_forwards += 1;
                Some(delta_exact(c.proxy(), c.direction(), &prefix)?)
            }
            (kind, Some((_, _, lp, lm)), Some(c)) => {
                proxy_forwards += 2;
                let d = finite_difference(&log_softmax(lp)?, &log_softmax(lm)?, c.epsilon)?;
                Some(if kind == SamplerKind::Permutation {
                    permute_signflip(&d, &mut perm_rng)
                } else {
                    d
                })
            }
            _ => return Err(Error::Internal("sampler state out of sync".into())),
        };

        let token = if spec.tau == 0.0 {
            argmax(&logp)
        } else {
            let applied = if lambda > 0.0 { delta.as_deref() } else { None };
            let probs = adjusted_distribution(&logp, applied, spec.tau, lambda)?;
            sample_index(&probs, &mut rng)
        };
        generated.push(token);
        prefix.push(token);
        if token == Vocab::EOS || generated.len() >= spec.max_tokens || prefix.len() >= limit {
            break;
        }
        teacher_logits = teacher_dec.feed(&[token])?;
        if let Some((plus, minus, lp, lm)) = proxy_decs.as_mut() {
            *lp = plus.feed(&[token])?;
            *lm = minus.feed(&[token])?;
        }
    }

    Ok(TraceRecord {
        prompt_tokens: prompt.to_vec(),
        extracted_answer: extract_answer(&generated),
        generated_tokens: generated,
        sampler: spec.clone(),
        teacher_forward_count: teacher_forwards,
        proxy_forward_count: proxy_forwards,
        correct: false,
    })
}

/// One trace per prompt; prompt `i` samples with seed `derive_seed(spec.rng_seed, i)`.
pub fn generate_traces(
    teacher: &TransformerModel,
    spec: &SamplerSpec,
    ctx: Option<&PenaltyContext>,
    prompts: &[Vec<TokenId>],
) -> Result<Vec<TraceRecord>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| generate_trace(teacher, &spec.with_seed(derive_seed(spec.rng_seed, i as u64)), ctx, p))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonErrorRow {
    pub epsilon: f64,
    pub mean_error: f64,
    pub max_error: f64,
    /// Diagnostic only: the error above cannot tell Δ̂ from −Δ̂.
    pub mean_signed_cosine: f64,
}

/// Mean `|sin θ|` between Δ̂(ε) and the exact Δ over `contexts`, per ε.
pub fn epsilon_error_sweep(
    proxy: &TransformerModel,
    g: &ParamVector,
    contexts: &[Vec<TokenId>],
    eps_grid: &[f64],
) -> Result<Vec<EpsilonErrorRow>> {
    if contexts.len() < 10 {
        return Err(Error::invalid("the ε sweep needs at least 10 contexts"));
    }
    if eps_grid.is_empty() || eps_grid.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::invalid("ε grid must be non-empty and positive"));
    }
    let lo = eps_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eps_grid.iter().copied().fold(0.0, f64::max);
    if hi / lo < 1e6 * (1.0 - 1e-9) {
        return Err(Error::invalid("ε grid must span at least six orders of magnitude"));
    }
    if g.values().iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("zero gradient: the error is undefined"));
    }
    let exact: Vec<Vec<f64>> = contexts
        .iter()
        .map(|c| delta_exact(proxy, g, c))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let ctx = PenaltyContext::new(proxy, g, eps, "sweep")?;
        let (mut sum, mut max, mut cos) = (0.0, 0.0f64, 0.0);
        for (c, d) in contexts.iter().zip(&exact) {
            let approx = delta_hat(&ctx, c)?;
            // Perturbations below the rounding floor can cancel exactly.
            let (err, c) = if approx.iter().all(|&v| v == 0.0) {
                (1.0, 0.0)
            } else {
                (relative_error(d, &approx)?, signed_cosine(d, &approx)?)
            };
            sum += err;
            max = max.max(err);
            cos += c;
        }
        let n = contexts.len() as f64;
        rows.push(EpsilonErrorRow {
            epsilon: eps,
            mean_error: sum / n,
            max_error: max,
            mean_signed_cosine: cos / n,
        });
    }
    Ok(rows)
}

/// Decade grid `10^lo, …, 10^hi`.
pub fn decade_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 10f64.powi(e)).collect()
}

/// ε with the smallest mean error.
pub fn best_epsilon(rows: &[EpsilonErrorRow]) -> Option<&EpsilonErrorRow> {
    rows.iter().min_by(|a, b| a.mean_error.total_cmp(&b.mean_error))
}
