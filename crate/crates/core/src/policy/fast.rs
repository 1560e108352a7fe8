//! No-grad forward path with a per-layer key/value activation cache.
//!
//! [`extend`] appends tokens to a cached prefix and returns logits for the
//! new rows only. A full forward is `extend` from an empty cache; sampling
//! extends one token at a time; counterfactual perturbation truncates the
//! cache at the masked position and re-extends with the perturbed suffix.
//! All three reuse the same row-independent kernels, so their logits agree
//! bit for bit (asserted by tests).

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::policy::{ModelParams, PolicyConfig, LN_EPS};

/// Cached per-layer key/value rows for a processed prefix.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// One `[len * d_model]` buffer per layer.
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl ForwardCache {
    pub fn new(cfg: &PolicyConfig) -> Self {
        ForwardCache {
            k: vec![Vec::new(); cfg.n_layers],
            v: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// A copy of the cache holding only the first `n` positions.
    pub fn truncated(&self, n: usize, d_model: usize) -> Self {
        assert!(n <= self.len);
        ForwardCache {
            k: self.k.iter().map(|b| b[..n * d_model].to_vec()).collect(),
            v: self.v.iter().map(|b| b[..n * d_model].to_vec()).collect(),
            len: n,
        }
    }
}

fn ln_rows(x: &[f64], n: usize, d: usize, gain: &[f64], bias: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.resize(n * d, 0.0);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let (mu, sigma) = kernels::row_moments(row, LN_EPS);
        for j in 0..d {
            out[i * d + j] = gain[j] * (row[j] - mu) / sigma + bias[j];
        }
    }
}

/// Appends `tokens` after the cached prefix and returns their logits
/// (`[tokens.len(), vocab]`). `emb_override`, when present, replaces the
/// token-embedding lookup for the new rows (position embeddings are still
/// added).
pub fn extend(
    params: &ModelParams,
    cache: &mut ForwardCache,
    tokens: &[u32],
    emb_override: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let cfg = &params.cfg;
    let d = cfg.d_model;
    let n = tokens.len();
    let start = cache.len;
    if start + n > cfg.max_seq_len {
        return Err(Error::Overlength { len: start + n, max: cfg.max_seq_len });
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut x = match emb_override {
        Some(e) => {
            assert_eq!(e.len(), n * d, "embedding override shape");
            e.to_vec()
        }
        None => {
            for &id in tokens {
                if id as usize >= cfg.vocab_size {
                    return Err(Error::UnknownToken { id, vocab: cfg.vocab_size });
                }
            }
            params.token_embeddings(tokens).data
        }
    };
    for i in 0..n {
        let p = start + i;
        for j in 0..d {
            x[i * d + j] += params.pos_emb.data[p * d + j];
        }
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let total = start + n;
    let mut h = Vec::new();
    let mut scores = vec![0.0; total];

    for (li, layer) in params.layers.iter().enumerate() {
        ln_rows(&x, n, d, &layer.ln1_g.data, &layer.ln1_b.data, &mut h);
        let mut q = vec![0.0; n * d];
        let mut knew = vec![0.0; n * d];
        let mut vnew = vec![0.0; n * d];
        kernels::matmul(&h, n, d, &layer.wq.data, d, &mut q);
        kernels::matmul(&h, n, d, &layer.wk.data, d, &mut knew);
        kernels::matmul(&h, n, d, &layer.wv.data, d, &mut vnew);
        cache.k[li].extend_from_slice(&knew);
        cache.v[li].extend_from_slice(&vnew);
        let kall = &cache.k[li];
        let vall = &cache.v[li];

        let mut attn = vec![0.0; n * d];
        for i in 0..n {
            let p = start + i;
            for head in 0..n_heads {
                let hoff = head * dh;
                let qrow = &q[i * d + hoff..i * d + hoff + dh];
                for (j, s) in scores.iter_mut().enumerate().take(p + 1) {
                    let krow = &kall[j * d + hoff..j * d + hoff + dh];
                    let mut acc = 0.0;
                    for t in 0..dh {
                        acc += qrow[t] * krow[t];
                    }
                    *s = acc * scale;
                }
                kernels::softmax_row(&mut scores[..p + 1]);
                let orow = &mut attn[i * d + hoff..i * d + hoff + dh];
                for (j, &w) in scores.iter().enumerate().take(p + 1) {
                    let vrow = &vall[j * d + hoff..j * d + hoff + dh];
                    for t in 0..dh {
                        orow[t] += w * vrow[t];
                    }
                }
            }
        }
        let mut proj = vec![0.0; n * d];
        kernels::matmul(&attn, n, d, &layer.wo.data, d, &mut proj);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        ln_rows(&x, n, d, &layer.ln2_g.data, &layer.ln2_b.data, &mut h);
        let d4 = 4 * d;
        let mut mid = vec![0.0; n * d4];
        kernels::matmul(&h, n, d, &layer.w1.data, d4, &mut mid);
        for i in 0..n {
            for j in 0..d4 {
                let z = mid[i * d4 + j] + layer.b1.data[j];
                mid[i * d4 + j] = kernels::gelu(z);
            }
        }
        let mut out = vec![0.0; n * d];
        kernels::matmul(&mid, n, d4, &layer.w2.data, d, &mut out);
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] += out[i * d + j] + layer.b2.data[j];
            }
        }
    }
    cache.len = total;

    ln_rows(&x, n, d, &params.lnf_g.data, &params.lnf_b.data, &mut h);
    let mut logits = vec![0.0; n * cfg.vocab_size];
    kernels::matmul(&h, n, d, &params.unembed.data, cfg.vocab_size, &mut logits);
    Ok(logits)
}
