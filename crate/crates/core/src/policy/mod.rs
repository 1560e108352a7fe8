//! Tiny decoder-only autoregressive transformer policy.
//!
//! Pre-LN blocks with learned absolute position embeddings, float64
//! throughout. Three evaluation paths share the same numeric kernels:
//!
//! * [`fast`] — no-grad forward with a reusable activation cache. Because
//!   every kernel computes each output row independently with a fixed
//!   accumulation order, incremental decoding, suffix recomputation and a
//!   full forward produce bit-identical logits.
//! * [`diff`] — tape-based forward for parameter gradients and for
//!   gradients with respect to input embeddings.
//! * [`checkpoint`] — versioned binary container with per-tensor checksums.

pub mod checkpoint;
pub mod diff;
pub mod fast;

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Model hyperparameters and special token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Doubles as the mask token for counterfactual perturbation.
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_id: u32,
}

impl PolicyConfig {
    /// Desk-scale defaults: large enough for multi-step arithmetic traces,
    /// small enough for CPU runs.
    pub fn desk_default() -> Self {
        PolicyConfig {
            vocab_size: 64,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    /// Reduced profile for CI and tests.
    pub fn ci_profile() -> Self {
        PolicyConfig {
            vocab_size: 32,
            d_model: 48,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 96,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, id) in [("pad", self.pad_id), ("bos", self.bos_id), ("eos", self.eos_id)] {
            if id as usize >= self.vocab_size {
                return Err(Error::Contract(format!("{name} id {id} outside vocab")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probs = logits.to_vec();
        kernels::softmax_row(&mut probs);
        TokenDistribution { probs }
    }

    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for &p in &self.probs {
            if p < 0.0 {
                return Err(Error::Contract(format!("negative probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

/// Per-position embedding vectors, used to override or perturb the
/// model's own token embeddings.
#[derive(Debug, Clone)]
pub struct SequenceEmbeddings {
    pub d_model: usize,
    /// Row-major `[len, d_model]`.
    pub data: Vec<f64>,
}

impl SequenceEmbeddings {
    pub fn len(&self) -> usize {
        self.data.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_model..(i + 1) * self.d_model]
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable tensors of the policy.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: PolicyConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub unembed: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl ModelParams {
    pub fn init(cfg: &PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::substream(seed, "param-init", 0);
        let d = cfg.d_model;
        let mut normal = |shape: Vec<usize>, std: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng::standard_normal(&mut r) * std).collect();
            Tensor::new(shape, data)
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: Tensor::new(vec![d], vec![1.0; d]),
                ln1_b: Tensor::zeros(vec![d]),
                wq: normal(vec![d, d], 0.02),
                wk: normal(vec![d, d], 0.02),
                wv: normal(vec![d, d], 0.02),
                wo: normal(vec![d, d], 0.02),
                ln2_g: Tensor::new(vec![d], vec![1.0; d]),
                ln2_b: Tensor::zeros(vec![d]),
                w1: normal(vec![d, 4 * d], 0.02),
                b1: Tensor::zeros(vec![4 * d]),
                w2: normal(vec![4 * d, d], 0.02),
                b2: Tensor::zeros(vec![d]),
            });
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            tok_emb: normal(vec![cfg.vocab_size, d], 0.02),
            pos_emb: normal(vec![cfg.max_seq_len, d], 0.02),
            layers,
            lnf_g: Tensor::new(vec![d], vec![1.0; d]),
            lnf_b: Tensor::zeros(vec![d]),
            unembed: normal(vec![d, cfg.vocab_size], 0.02),
        })
    }

    /// Named views of every tensor in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &l.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &l.ln1_b));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ln2_g"), &l.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &l.ln2_b));
            out.push((format!("layer{i}.w1"), &l.w1));
            out.push((format!("layer{i}.b1"), &l.b1));
            out.push((format!("layer{i}.w2"), &l.w2));
            out.push((format!("layer{i}.b2"), &l.b2));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &mut l.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &mut l.ln1_b));
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.ln2_g"), &mut l.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &mut l.ln2_b));
            out.push((format!("layer{i}.w1"), &mut l.w1));
            out.push((format!("layer{i}.b1"), &mut l.b1));
            out.push((format!("layer{i}.w2"), &mut l.w2));
            out.push((format!("layer{i}.b2"), &mut l.b2));
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    /// Token embedding rows for a sequence, as supplied to the first block.
    pub fn token_embeddings(&self, ids: &[u32]) -> SequenceEmbeddings {
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let i = id as usize;
            data.extend_from_slice(&self.tok_emb.data[i * d..(i + 1) * d]);
        }
        SequenceEmbeddings { d_model: d, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Greedy,
}

#[derive(Debug, Clone)]
pub struct Sampled {
    pub response: Vec<u32>,
    /// Log-probability of each sampled token under the temperature-adjusted
    /// sampling distribution (PAD and BOS masked out).
    pub logprobs: Vec<f64>,
    /// Entropy of that distribution at each step.
    pub entropies: Vec<f64>,
}

/// Masks PAD and BOS so they can never be sampled, applies temperature,
/// and returns masked log-probabilities for one logits row.
pub fn sampling_logprobs(cfg: &PolicyConfig, logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut row: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    row[cfg.pad_id as usize] = f64::NEG_INFINITY;
    row[cfg.bos_id as usize] = f64::NEG_INFINITY;
    kernels::log_softmax_row(&mut row);
    row
}

/// Per-position forward through the full sequence; see `forward_logits`
/// for the embedding-override and noise variants.
pub fn full_logits(params: &ModelParams, ids: &[u32]) -> Result<Vec<f64>> {
    let mut cache = fast::ForwardCache::new(&params.cfg);
    fast::extend(params, &mut cache, ids, None)
}

/// Forward pass over prompt+response with optional response-embedding
/// override and optional isotropic Gaussian noise on the response-token
/// embeddings. Returns `[len, vocab]` logits.
pub fn forward_logits<R: Rng>(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    embedding_override: Option<&SequenceEmbeddings>,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    assert!(noise_sigma >= 0.0, "sigma must be nonnegative");
    let mut cache = fast::ForwardCache::new(&params.cfg);
    let mut logits = fast::extend(params, &mut cache, prompt, None)?;
    let mut emb = match embedding_override {
        Some(e) => {
            assert_eq!(e.len(), response.len(), "override length mismatch");
            e.clone()
        }
        None => {
            for &id in response {
                if id as usize >= params.cfg.vocab_size {
                    return Err(Error::UnknownToken { id, vocab: params.cfg.vocab_size });
                }
            }
            params.token_embeddings(response)
        }
    };
    if noise_sigma > 0.0 {
        for v in &mut emb.data {
            *v += noise_sigma * rng::standard_normal(rng);
        }
    }
    logits.extend(fast::extend(params, &mut cache, response, Some(&emb.data))?);
    Ok(logits)
}

/// Autoregressive sampling. Generation stops at EOS (included in the
/// response) or after `max_new` tokens.
pub fn sample<R: Rng>(
    params: &ModelParams,
    prompt: &[u32],
    temperature: f64,
    max_new: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Sampled> {
    if mode == SampleMode::Stochastic {
        assert!(temperature > 0.0, "stochastic sampling needs temperature > 0");
    }
    let cfg = &params.cfg;
    let mut cache = fast::ForwardCache::new(cfg);
    let logits = fast::extend(params, &mut cache, prompt, None)?;
    let mut last_row = logits[(prompt.len() - 1) * cfg.vocab_size..].to_vec();
    let mut response = Vec::new();
    let mut logprobs = Vec::new();
    let mut entropies = Vec::new();
    for _ in 0..max_new {
        if cache.len() >= cfg.max_seq_len {
            break;
        }
        let lp = sampling_logprobs(cfg, &last_row, temperature);
        entropies.push(-lp.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<f64>());
        let tok = match mode {
            SampleMode::Greedy => argmax(&lp) as u32,
            SampleMode::Stochastic => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = cfg.eos_id;
                for (v, &l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        chosen = v as u32;
                        break;
                    }
                }
                chosen
            }
        };
        response.push(tok);
        logprobs.push(lp[tok as usize]);
        if tok == cfg.eos_id {
            break;
        }
        let row = fast::extend(params, &mut cache, &[tok], None)?;
        last_row = row;
    }
    Ok(Sampled { response, logprobs, entropies })
}

/// Teacher-forced per-response-position log-probabilities and entropies
/// under the sampling (PAD/BOS-masked, temperature-adjusted) distribution.
pub fn logprobs_entropy(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    temperature: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = &params.cfg;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let logits = full_logits(params, &ids)?;
    let mut lps = Vec::with_capacity(response.len());
    let mut ents = Vec::with_capacity(response.len());
    for (j, &tok) in response.iter().enumerate() {
        let row_idx = prompt.len() + j - 1;
        let row = &logits[row_idx * cfg.vocab_size..(row_idx + 1) * cfg.vocab_size];
        let lp = sampling_logprobs(cfg, row, temperature);
        lps.push(lp[tok as usize]);
        let h = -lp.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<f64>();
        ents.push(h);
    }
    Ok((lps, ents))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Index of the second-largest entry.
pub fn argmax2(xs: &[f64]) -> usize {
    let first = argmax(xs);
    let mut second = usize::MAX;
    for (i, &v) in xs.iter().enumerate() {
        if i == first {
            continue;
        }
        if second == usize::MAX || v > xs[second] {
            second = i;
        }
    }
    second
}
