//! Tiny decoder-only transformer.
//!
//! Pre-norm blocks (attention then GELU MLP), learned positional embeddings
//! and an untied output head with bias. Teacher, proxy and student are all
//! built by [`init_model`]; they differ only in [`ModelConfig`].

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Graph, Layout, NodeId, ParamVector, Tensor};
use crate::tasks::{TokenId, Vocab};

pub const INIT_STD: f64 = 0.02;

thread_local! {
    static FORWARD_PASSES: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Model forward passes run on this thread so far (full or incremental).
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

fn count_forward() {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn teacher() -> Self {
        Self {
            vocab_size: Vocab::SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 96,
            init_seed: 1,
        }
    }

    pub fn proxy() -> Self {
        Self {
            vocab_size: Vocab::SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 96,
            init_seed: 2,
        }
    }

    pub fn student() -> Self {
        Self {
            init_seed: 3,
            ..Self::proxy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut l = Layout::new();
        let mut push = |name: String, shape: &[usize]| {
            l.push(name, shape).expect("layout names are unique");
        };
        push("tok_emb".into(), &[v, d]);
        push("pos_emb".into(), &[self.max_seq_len, d]);
        for i in 0..self.n_layers {
            let p = format!("blocks.{i}");
            push(format!("{p}.ln1.gain"), &[d]);
            push(format!("{p}.ln1.bias"), &[d]);
            for w in ["q", "k", "v", "o"] {
                push(format!("{p}.attn.w{w}"), &[d, d]);
                push(format!("{p}.attn.b{w}"), &[d]);
            }
            push(format!("{p}.ln2.gain"), &[d]);
            push(format!("{p}.ln2.bias"), &[d]);
            push(format!("{p}.mlp.w1"), &[d, f]);
            push(format!("{p}.mlp.b1"), &[f]);
            push(format!("{p}.mlp.w2"), &[f, d]);
            push(format!("{p}.mlp.b2"), &[d]);
        }
        push("ln_f.gain".into(), &[d]);
        push("ln_f.bias".into(), &[d]);
        push("head.weight".into(), &[d, v]);
        push("head.bias".into(), &[v]);
        l
    }

    pub fn param_count(&self) -> usize {
        self.layout().total()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamVector,
}

/// Gaussian(0, 0.02²) weights from `init_seed`; normalization gains 1, biases 0.
pub fn init_model(config: &ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let layout = config.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParamVector::zeros(layout.clone());
    for (i, entry) in layout.entries().iter().enumerate() {
        let slice = params.entry_slice_mut(i);
        if entry.name.ends_with(".gain") {
            slice.fill(1.0);
        } else if entry.shape.len() == 1 {
            slice.fill(0.0);
        } else {
            slice.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    Ok(TransformerModel {
        config: config.clone(),
        params,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<TokenId>, loss_mask: Vec<bool>) -> Result<Self> {
        if tokens.len() != loss_mask.len() {
            return Err(Error::invalid("tokens and loss mask differ in length"));
        }
        Ok(Self { tokens, loss_mask })
    }

    /// Prompt positions masked out, completion positions masked in.
    pub fn from_prompt_completion(prompt: &[TokenId], completion: &[TokenId]) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(completion);
        let mut loss_mask = vec![false; prompt.len()];
        loss_mask.extend(std::iter::repeat(true).take(completion.len()));
        Self { tokens, loss_mask }
    }

    /// `(row, target)` pairs: row `t` predicts `tokens[t+1]` where it is masked in.
    pub fn targets(&self) -> Vec<(usize, TokenId)> {
        (1..self.tokens.len())
            .filter(|&t| self.loss_mask[t])
            .map(|t| (t - 1, self.tokens[t]))
            .collect()
    }
}

impl TransformerModel {
    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the `[T, V]` logits node.
    pub fn build_logits(&self, g: &mut Graph<'_>, tokens: &[TokenId]) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        count_forward();
        let cfg = &self.config;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.param("tok_emb")?;
        let pos = g.param("pos_emb")?;
        let te = g.gather(tok, tokens)?;
        let pe = g.gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        for i in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            let (g1, b1) = (g.param(&p("ln1.gain"))?, g.param(&p("ln1.bias"))?);
            let h = g.layer_norm(x, g1, b1)?;
            let proj = |w: &str, b: &str, g: &mut Graph<'_>| -> Result<NodeId> {
                let (w, b) = (g.param(&p(w))?, g.param(&p(b))?);
                let y = g.matmul(h, w)?;
                g.add_bias(y, b)
            };
            let q = proj("attn.wq", "attn.bq", g)?;
            let k = proj("attn.wk", "attn.bk", g)?;
            let v = proj("attn.wv", "attn.bv", g)?;
            let a = g.causal_attention(q, k, v, cfg.n_heads)?;
            let (wo, bo) = (g.param(&p("attn.wo"))?, g.param(&p("attn.bo"))?);
            let o = g.matmul(a, wo)?;
            let o = g.add_bias(o, bo)?;
            x = g.add(x, o)?;

            let (g2, b2) = (g.param(&p("ln2.gain"))?, g.param(&p("ln2.bias"))?);
            let h2 = g.layer_norm(x, g2, b2)?;
            let (w1, bb1) = (g.param(&p("mlp.w1"))?, g.param(&p("mlp.b1"))?);
            let f = g.matmul(h2, w1)?;
            let f = g.add_bias(f, bb1)?;
            let f = g.gelu(f);
            let (w2, bb2) = (g.param(&p("mlp.w2"))?, g.param(&p("mlp.b2"))?);
            let f = g.matmul(f, w2)?;
            let f = g.add_bias(f, bb2)?;
            x = g.add(x, f)?;
        }
        let (gf, bf) = (g.param("ln_f.gain")?, g.param("ln_f.bias")?);
        let xf = g.layer_norm(x, gf, bf)?;
        let (wh, bh) = (g.param("head.weight")?, g.param("head.bias")?);
        let logits = g.matmul(xf, wh)?;
        g.add_bias(logits, bh)
    }

    /// Records `mean −log p(target)` over the masked-in targets, scaled by `weight`.
    pub fn build_nll(&self, g: &mut Graph<'_>, seq: &MaskedSequence, weight: f64) -> Result<NodeId> {
        if seq.tokens.len() != seq.loss_mask.len() {
            return Err(Error::invalid("tokens and loss mask differ in length"));
        }
        let targets = seq.targets();
        if targets.is_empty() {
            return Err(Error::invalid("sequence has no masked-in targets"));
        }
        let logits = self.build_logits(g, &seq.tokens)?;
        let w = weight / targets.len() as f64;
        let weighted: Vec<_> = targets.into_iter().map(|(r, t)| (r, t, w)).collect();
        g.masked_nll(logits, &weighted)
    }

    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let id = self.build_logits(&mut g, tokens)?;
        let out = g.value(id).clone();
        if !out.is_finite() {
            return Err(Error::numeric(g.first_non_finite().unwrap_or("logits"), "non-finite logits"));
        }
        Ok(out)
    }

    pub fn forward_batch(&self, batch: &[Vec<TokenId>]) -> Result<Vec<Tensor>> {
        batch.iter().map(|t| self.forward_logits(t)).collect()
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_token_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut dec = Decoder::new(self);
        let logits = dec.feed(prefix)?;
        crate::numerics::log_softmax(&logits)
    }

    pub fn sequence_nll(&self, seq: &MaskedSequence) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let id = self.build_nll(&mut g, seq, 1.0)?;
        let v = g.value(id).data()[0];
        if !v.is_finite() {
            return Err(Error::numeric(g.first_non_finite().unwrap_or("nll"), format!("nll = {v}")));
        }
        Ok(v)
    }

    /// Mean of per-sequence NLLs over `dataset`, without gradients.
    pub fn mean_nll(&self, dataset: &[MaskedSequence]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let mut total = 0.0;
        for s in dataset {
            total += self.sequence_nll(s)?;
        }
        Ok(total / dataset.len() as f64)
    }

    /// Dataset-mean NLL and its gradient, accumulated one sequence at a time.
    pub fn accumulate_loss_grad(&self, dataset: &[MaskedSequence]) -> Result<(f64, ParamVector)> {
        if dataset.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let weight = 1.0 / dataset.len() as f64;
        let mut total = 0.0;
        let mut grad = ParamVector::zeros(self.params.layout().clone());
        for seq in dataset {
            let (v, gs) = crate::numerics::value_and_grad(&self.params, |g| self.build_nll(g, seq, weight))?;
            total += v;
            grad.axpy(1.0, &gs)?;
        }
        Ok((total, grad))
    }

    /// SHA-256 over the config and parameter encodings.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.params.to_bytes());
        hex::encode(h.finalize())
    }

    pub fn checkpoint_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{name}.config.json")), dir.join(format!("{name}.params.bin")))
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let (cfg_path, bin_path) = Self::checkpoint_paths(dir, name);
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
        self.params.save(&bin_path)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let (cfg_path, bin_path) = Self::checkpoint_paths(dir, name);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        config.validate()?;
        let params = ParamVector::load(&bin_path)?;
        if params.layout() != &config.layout() {
            return Err(Error::Format {
                path: bin_path,
                detail: "parameter layout does not match config".into(),
            });
        }
        Ok(Self { config, params })
    }
}

/// Free function form of [`TransformerModel::forward_logits`].
pub fn forward_logits(model: &TransformerModel, tokens: &[TokenId]) -> Result<Tensor> {
    model.forward_logits(tokens)
}

pub fn sequence_nll(model: &TransformerModel, seq: &MaskedSequence) -> Result<f64> {
    model.sequence_nll(seq)
}

pub fn accumulate_loss_grad(model: &TransformerModel, dataset: &[MaskedSequence]) -> Result<(f64, ParamVector)> {
    model.accumulate_loss_grad(dataset)
}

struct BlockWeights<'a> {
    ln1_g: &'a [f64],
    ln1_b: &'a [f64],
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
    ln2_g: &'a [f64],
    ln2_b: &'a [f64],
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Incremental decoder with a per-layer key/value cache.
///
/// Produces the same logits as [`TransformerModel::forward_logits`] (up to
/// floating-point reassociation) while doing one row of work per token.
pub struct Decoder<'m> {
    model: &'m TransformerModel,
    blocks: Vec<BlockWeights<'m>>,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m TransformerModel) -> Self {
        let p = &model.params;
        let s = |name: String| p.slice(&name).expect("layout built from config");
        let blocks = (0..model.config.n_layers)
            .map(|i| BlockWeights {
                ln1_g: s(format!("blocks.{i}.ln1.gain")),
                ln1_b: s(format!("blocks.{i}.ln1.bias")),
                wq: s(format!("blocks.{i}.attn.wq")),
                bq: s(format!("blocks.{i}.attn.bq")),
                wk: s(format!("blocks.{i}.attn.wk")),
                bk: s(format!("blocks.{i}.attn.bk")),
                wv: s(format!("blocks.{i}.attn.wv")),
                bv: s(format!("blocks.{i}.attn.bv")),
                wo: s(format!("blocks.{i}.attn.wo")),
                bo: s(format!("blocks.{i}.attn.bo")),
                ln2_g: s(format!("blocks.{i}.ln2.gain")),
                ln2_b: s(format!("blocks.{i}.ln2.bias")),
                w1: s(format!("blocks.{i}.mlp.w1")),
                b1: s(format!("blocks.{i}.mlp.b1")),
                w2: s(format!("blocks.{i}.mlp.w2")),
                b2: s(format!("blocks.{i}.mlp.b2")),
            })
            .collect();
        let cap = model.config.max_seq_len * model.config.d_model;
        let n = model.config.n_layers;
        Self {
            model,
            blocks,
            k_cache: vec![vec![0.0; cap]; n],
            v_cache: vec![vec![0.0; cap]; n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds tokens and returns the logits after the last one.
    pub fn feed(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::invalid("no tokens to feed"));
        }
        count_forward();
        for &t in &tokens[..tokens.len() - 1] {
            self.advance(t, false)?;
        }
        let logits = self.advance(tokens[tokens.len() - 1], true)?.expect("head requested");
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("decoder", "non-finite logits"));
        }
        Ok(logits)
    }

    fn advance(&mut self, token: TokenId, head: bool) -> Result<Option<Vec<f64>>> {
        let cfg = &self.model.config;
        if token >= cfg.vocab_size {
            return Err(Error::invalid(format!("token id {token} out of range")));
        }
        if self.len >= cfg.max_seq_len {
            return Err(Error::invalid("decoder exceeded max_seq_len"));
        }
        let (d, f, pos) = (cfg.d_model, cfg.d_ff, self.len);
        let p = &self.model.params;
        let tok = &p.slice("tok_emb").expect("tok_emb")[token * d..(token + 1) * d];
        let pe = &p.slice("pos_emb").expect("pos_emb")[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pe).map(|(a, b)| a + b).collect();
        let mut h = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut a = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut ff = vec![0.0; f];
        for (l, w) in self.blocks.iter().enumerate() {
            kernels::layer_norm_forward(&x, w.ln1_g, w.ln1_b, &mut h, d);
            vec_mat(&h, w.wq, w.bq, &mut q);
            let kc = &mut self.k_cache[l][pos * d..(pos + 1) * d];
            vec_mat(&h, w.wk, w.bk, kc);
            let vc = &mut self.v_cache[l][pos * d..(pos + 1) * d];
            vec_mat(&h, w.wv, w.bv, vc);
            kernels::attention_row(&q, &self.k_cache[l], &self.v_cache[l], pos + 1, d, cfg.n_heads, &mut a);
            vec_mat(&a, w.wo, w.bo, &mut o);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);

            kernels::layer_norm_forward(&x, w.ln2_g, w.ln2_b, &mut h, d);
            vec_mat(&h, w.w1, w.b1, &mut ff);
            ff.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            vec_mat(&ff, w.w2, w.b2, &mut o);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
        }
        self.len += 1;
        if !head {
            return Ok(None);
        }
        kernels::layer_norm_forward(&x, p.slice("ln_f.gain").expect("ln_f"), p.slice("ln_f.bias").expect("ln_f"), &mut h, d);
        let mut logits = vec![0.0; cfg.vocab_size];
        vec_mat(&h, p.slice("head.weight").expect("head"), p.slice("head.bias").expect("head"), &mut logits);
        Ok(Some(logits))
    }
}

/// `out = bias + x·w` for a row vector `x` and row-major `w: len(x)×len(out)`.
fn vec_mat(x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}
