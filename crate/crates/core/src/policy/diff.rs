//! Tape-based differentiable forward pass.
//!
//! Mirrors the arithmetic of [`super::fast`] exactly (same kernels, same
//! layer-norm epsilon, causal masking via an additive `-1e30` constant that
//! underflows to exact zeros in the softmax), so the two paths agree to the
//! last bit on identical inputs.

use crate::error::Result;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::policy::{ModelParams, LN_EPS};
use std::collections::HashMap;

/// Forward options: which leaves the graph exposes.
#[derive(Default)]
pub struct DiffOptions<'a> {
    /// Register every parameter as a gradient leaf.
    pub trainable: bool,
    /// `(prompt_len, embeddings)` — registers the token embeddings of all
    /// positions `>= prompt_len` as a single `[T_resp, d]` gradient leaf
    /// holding `embeddings` (noise, if any, is already baked in by the
    /// caller). Position embeddings are still added on top.
    pub response_embeddings: Option<(usize, &'a [f64])>,
}

pub struct DiffForward {
    pub graph: Graph,
    /// `[len, vocab]` logits over the full sequence.
    pub logits: NodeId,
    /// Parameter leaves in `ModelParams::named` order (empty if frozen).
    pub param_leaves: Vec<(String, NodeId)>,
    /// The response-embedding leaf when requested.
    pub emb_leaf: Option<NodeId>,
}

const MASK_NEG: f64 = -1e30;

/// Builds the computation graph for one sequence.
pub fn build(params: &ModelParams, ids: &[u32], opts: &DiffOptions) -> Result<DiffForward> {
    let cfg = &params.cfg;
    let d = cfg.d_model;
    let len = ids.len();
    if len > cfg.max_seq_len {
        return Err(crate::error::Error::Overlength { len, max: cfg.max_seq_len });
    }
    let mut g = Graph::new();

    let mut leaves = Vec::new();
    let mut by_name: HashMap<String, NodeId> = HashMap::new();
    for (name, t) in params.named() {
        let id = if opts.trainable { g.leaf(t.clone(), true) } else { g.constant(t.clone()) };
        by_name.insert(name.clone(), id);
        if opts.trainable {
            leaves.push((name, id));
        }
    }
    let p = |by: &HashMap<String, NodeId>, name: &str| -> NodeId { by[name] };

    let positions: Vec<usize> = (0..len).collect();
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();

    let tok_table = p(&by_name, "tok_emb");
    let (emb, emb_leaf) = match opts.response_embeddings {
        Some((prompt_len, data)) => {
            assert!(prompt_len <= len);
            let n_resp = len - prompt_len;
            assert_eq!(data.len(), n_resp * d);
            let leaf = g.leaf(Tensor::new(vec![n_resp, d], data.to_vec()), true);
            if prompt_len == 0 {
                (leaf, Some(leaf))
            } else {
                let prompt_part = g.gather_rows(tok_table, &idx[..prompt_len]);
                (g.concat_rows(&[prompt_part, leaf]), Some(leaf))
            }
        }
        None => (g.gather_rows(tok_table, &idx), None),
    };
    let pos = g.gather_rows(p(&by_name, "pos_emb"), &positions);
    let mut x = g.add(emb, pos);

    // Additive causal mask: 0 on and below the diagonal, -1e30 above.
    let mut mask_data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            mask_data[i * len + j] = MASK_NEG;
        }
    }
    let mask = g.constant(Tensor::new(vec![len, len], mask_data));

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    for li in 0..cfg.n_layers {
        let nm = |s: &str| format!("layer{li}.{s}");
        let h = g.layer_norm(x, p(&by_name, &nm("ln1_g")), p(&by_name, &nm("ln1_b")), LN_EPS);
        let q = g.matmul(h, p(&by_name, &nm("wq")));
        let k = g.matmul(h, p(&by_name, &nm("wk")));
        let v = g.matmul(h, p(&by_name, &nm("wv")));
        let mut heads = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let qh = g.slice_cols(q, head * dh, dh);
            let kh = g.slice_cols(k, head * dh, dh);
            let vh = g.slice_cols(v, head * dh, dh);
            let raw = g.matmul_nt(qh, kh);
            let scaled = g.scale(raw, scale);
            let masked = g.add(scaled, mask);
            let probs = g.softmax_rows(masked);
            heads.push(g.matmul(probs, vh));
        }
        let attn = g.concat_cols(&heads);
        let proj = g.matmul(attn, p(&by_name, &nm("wo")));
        x = g.add(x, proj);

        let h2 = g.layer_norm(x, p(&by_name, &nm("ln2_g")), p(&by_name, &nm("ln2_b")), LN_EPS);
        let mid = g.matmul(h2, p(&by_name, &nm("w1")));
        let mid_b = g.add_row(mid, p(&by_name, &nm("b1")));
        let act = g.gelu(mid_b);
        let out = g.matmul(act, p(&by_name, &nm("w2")));
        let out_b = g.add_row(out, p(&by_name, &nm("b2")));
        x = g.add(x, out_b);
    }

    let fin = g.layer_norm(x, p(&by_name, "lnf_g"), p(&by_name, "lnf_b"), LN_EPS);
    let logits = g.matmul(fin, p(&by_name, "unembed"));

    Ok(DiffForward { graph: g, logits, param_leaves: leaves, emb_leaf })
}
