//! Per-token importance: counterfactual masking (OAR-P), gradient
//! sensitivity (OAR-G), a policy-entropy proxy, and a random baseline.
//!
//! All methods score response tokens only and share the same
//! log-transform + min-max normalization. Answer-span content tokens are
//! never attribution targets: masking the answer's own digits trivially
//! destroys the probe, so they receive raw score 0.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::policy::{self, diff, fast, ModelParams, SequenceEmbeddings, TokenDistribution};
use crate::rng;
use crate::tasks;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const EPS_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    /// Softmax of the last position's next-token logits.
    LtLogits,
    /// Softmax of the mean of logits over the positions predicting the
    /// answer span.
    AsMean,
    /// Mean log-likelihood of the answer-span tokens (scalar score).
    AsJoint,
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::LtLogits => "lt_logits",
            ProbeKind::AsMean => "as_mean",
            ProbeKind::AsJoint => "as_joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeProbe {
    pub kind: ProbeKind,
    /// Degrade answer-span probes to LtLogits when a sequence has no
    /// well-formed span (early training produces none).
    pub warmup_active: bool,
}

impl OutcomeProbe {
    pub fn new(kind: ProbeKind, warmup_active: bool) -> Self {
        OutcomeProbe { kind, warmup_active }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributionMethod {
    OarP,
    OarG,
    Entropy,
    Random,
}

impl AttributionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttributionMethod::OarP => "oar_p",
            AttributionMethod::OarG => "oar_g",
            AttributionMethod::Entropy => "entropy",
            AttributionMethod::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub method: AttributionMethod,
    pub probe: Option<ProbeKind>,
    pub i_raw: Vec<f64>,
    pub i_hat: Vec<f64>,
    /// All-equal raw scores; downstream reshaping falls back to uniform.
    pub degenerate: bool,
}

impl ImportanceProfile {
    pub fn from_raw(
        method: AttributionMethod,
        probe: Option<ProbeKind>,
        i_raw: Vec<f64>,
    ) -> Result<Self> {
        let (i_hat, degenerate) = normalize_importance(&i_raw)?;
        Ok(ImportanceProfile { method, probe, i_raw, i_hat, degenerate })
    }
}

pub enum ProbeValue {
    Distribution(TokenDistribution),
    Score(f64),
}

/// A probe pinned to concrete positions of one (prompt, response) pair.
/// `rows` index the full-sequence logits matrix; for span probes they are
/// the positions *predicting* each span content token (kept fixed from
/// the unperturbed trajectory).
#[derive(Debug, Clone)]
struct ResolvedProbe {
    kind: ProbeKind,
    rows: Vec<usize>,
    /// Span content token ids, parallel to `rows` (AsJoint only).
    targets: Vec<u32>,
    /// Response index range of span content, for target exclusion.
    span: Option<(usize, usize)>,
}

fn resolve_probe(probe: &OutcomeProbe, prompt_len: usize, response: &[u32]) -> Result<ResolvedProbe> {
    let last_row = prompt_len + response.len() - 1;
    let lt = ResolvedProbe {
        kind: ProbeKind::LtLogits,
        rows: vec![last_row],
        targets: Vec::new(),
        span: tasks::extract_answer_span(response).map(|s| (s.start, s.end)),
    };
    if probe.kind == ProbeKind::LtLogits {
        return Ok(lt);
    }
    match tasks::extract_answer_span(response) {
        Some(span) if span.start < span.end => Ok(ResolvedProbe {
            kind: probe.kind,
            rows: (span.start..span.end).map(|j| prompt_len + j - 1).collect(),
            targets: response[span.start..span.end].to_vec(),
            span: Some((span.start, span.end)),
        }),
        _ if probe.warmup_active => Ok(lt),
        _ => Err(Error::NoAnswerSpan),
    }
}

/// The logits row the distributional probes reduce to.
fn probe_logits_row(vocab: usize, logits: &[f64], rp: &ResolvedProbe) -> Vec<f64> {
    if rp.rows.len() == 1 {
        return logits[rp.rows[0] * vocab..(rp.rows[0] + 1) * vocab].to_vec();
    }
    let mut mean = vec![0.0; vocab];
    for &r in &rp.rows {
        for (m, &z) in mean.iter_mut().zip(&logits[r * vocab..(r + 1) * vocab]) {
            *m += z;
        }
    }
    for m in &mut mean {
        *m /= rp.rows.len() as f64;
    }
    mean
}

/// Mean span log-likelihood (AsJoint scalar).
fn joint_score(vocab: usize, logits: &[f64], rp: &ResolvedProbe) -> f64 {
    let mut total = 0.0;
    for (&r, &tok) in rp.rows.iter().zip(&rp.targets) {
        let mut row = logits[r * vocab..(r + 1) * vocab].to_vec();
        kernels::log_softmax_row(&mut row);
        total += row[tok as usize];
    }
    total / rp.rows.len() as f64
}

fn probe_value(vocab: usize, logits: &[f64], rp: &ResolvedProbe) -> ProbeValue {
    match rp.kind {
        ProbeKind::AsJoint => ProbeValue::Score(joint_score(vocab, logits, rp)),
        _ => ProbeValue::Distribution(TokenDistribution::from_logits(&probe_logits_row(
            vocab, logits, rp,
        ))),
    }
}

/// Evaluates the outcome probe on an unperturbed sequence.
pub fn probe_distribution(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    probe: &OutcomeProbe,
) -> Result<ProbeValue> {
    let rp = resolve_probe(probe, prompt.len(), response)?;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let logits = policy::full_logits(params, &ids)?;
    Ok(probe_value(params.cfg.vocab_size, &logits, &rp))
}

/// KL(P ‖ Q) from two logits rows, computed in log space.
fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let mut lp = p_logits.to_vec();
    kernels::log_softmax_row(&mut lp);
    let mut lq = q_logits.to_vec();
    kernels::log_softmax_row(&mut lq);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p > 0.0 {
                p * (a - b)
            } else {
                0.0
            }
        })
        .sum();
    kl.max(0.0)
}

fn importance_from_perturbed(
    vocab: usize,
    rp: &ResolvedProbe,
    base_row_or_score: &ProbeValueRaw,
    logits: &[f64],
) -> f64 {
    match (rp.kind, base_row_or_score) {
        (ProbeKind::AsJoint, ProbeValueRaw::Score(phi0)) => {
            (phi0 - joint_score(vocab, logits, rp)).max(0.0)
        }
        (_, ProbeValueRaw::Row(p_row)) => kl_from_logits(p_row, &probe_logits_row(vocab, logits, rp)),
        _ => unreachable!("probe kind/value mismatch"),
    }
}

enum ProbeValueRaw {
    Row(Vec<f64>),
    Score(f64),
}

fn base_probe_raw(vocab: usize, logits: &[f64], rp: &ResolvedProbe) -> ProbeValueRaw {
    match rp.kind {
        ProbeKind::AsJoint => ProbeValueRaw::Score(joint_score(vocab, logits, rp)),
        _ => ProbeValueRaw::Row(probe_logits_row(vocab, logits, rp)),
    }
}

fn is_span_content(rp: &ResolvedProbe, t: usize) -> bool {
    matches!(rp.span, Some((s, e)) if t >= s && t < e)
}

/// Serial counterfactual masking: one full fresh forward per target
/// position. The reference implementation the batched path must match
/// bit for bit.
pub fn oar_p_scores_serial(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    probe: &OutcomeProbe,
) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::Contract("empty response".into()));
    }
    let rp = resolve_probe(probe, prompt.len(), response)?;
    let vocab = params.cfg.vocab_size;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let base_logits = policy::full_logits(params, &ids)?;
    let base = base_probe_raw(vocab, &base_logits, &rp);
    let mut scores = vec![0.0; response.len()];
    for t in 0..response.len() {
        if is_span_content(&rp, t) {
            continue;
        }
        let mut perturbed = ids.clone();
        perturbed[prompt.len() + t] = params.cfg.pad_id;
        let logits = policy::full_logits(params, &perturbed)?;
        scores[t] = importance_from_perturbed(vocab, &rp, &base, &logits);
    }
    Ok(scores)
}

/// Batched counterfactual masking. Reuses the unperturbed prefix
/// activations: perturbing position t leaves every earlier row untouched
/// (causality), so only the suffix from t onward is recomputed. Because
/// all kernels compute rows independently with a fixed accumulation
/// order, the result is bit-identical to the serial path. `batch_budget`
/// caps how many suffix evaluations run between cache reuses; it is a
/// memory guard, not semantics.
pub fn oar_p_scores(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    probe: &OutcomeProbe,
    batch_budget: usize,
) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::Contract("empty response".into()));
    }
    if batch_budget == 0 {
        return Err(Error::Contract("batch_budget must be >= 1".into()));
    }
    let rp = resolve_probe(probe, prompt.len(), response)?;
    let cfg = &params.cfg;
    let vocab = cfg.vocab_size;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);

    let mut cache = fast::ForwardCache::new(cfg);
    let base_logits = fast::extend(params, &mut cache, &ids, None)?;
    let base = base_probe_raw(vocab, &base_logits, &rp);

    let targets: Vec<usize> =
        (0..response.len()).filter(|&t| !is_span_content(&rp, t)).collect();
    let mut scores = vec![0.0; response.len()];
    for chunk in targets.chunks(batch_budget) {
        for &t in chunk {
            let pos = prompt.len() + t;
            let mut suffix_ids = ids[pos..].to_vec();
            suffix_ids[0] = cfg.pad_id;
            let mut c = cache.truncated(pos, cfg.d_model);
            let suffix_logits = fast::extend(params, &mut c, &suffix_ids, None)?;
            // Stitch full logits: unperturbed prefix rows + recomputed
            // suffix rows.
            let mut logits = base_logits[..pos * vocab].to_vec();
            logits.extend_from_slice(&suffix_logits);
            scores[t] = importance_from_perturbed(vocab, &rp, &base, &logits);
        }
    }
    Ok(scores)
}

/// Original/perturbed probe distribution pairs for distributional probes,
/// alongside the raw scores (used by the Pinsker diagnostics).
pub fn oar_p_distribution_pairs(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    probe: &OutcomeProbe,
) -> Result<Vec<(usize, TokenDistribution, TokenDistribution, f64)>> {
    let rp = resolve_probe(probe, prompt.len(), response)?;
    if rp.kind == ProbeKind::AsJoint {
        return Err(Error::Contract("AsJoint probe has no distribution pair".into()));
    }
    let vocab = params.cfg.vocab_size;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let base_logits = policy::full_logits(params, &ids)?;
    let p_row = probe_logits_row(vocab, &base_logits, &rp);
    let p = TokenDistribution::from_logits(&p_row);
    let mut out = Vec::new();
    for t in 0..response.len() {
        if is_span_content(&rp, t) {
            continue;
        }
        let mut perturbed = ids.clone();
        perturbed[prompt.len() + t] = params.cfg.pad_id;
        let logits = policy::full_logits(params, &perturbed)?;
        let q_row = probe_logits_row(vocab, &logits, &rp);
        let score = kl_from_logits(&p_row, &q_row);
        out.push((t, p.clone(), TokenDistribution::from_logits(&q_row), score));
    }
    Ok(out)
}

/// Default noise scale: 0.05 x RMS of the sequence's token-embedding
/// entries, so the perturbation stays "small" as embedding norms drift
/// over training.
pub fn default_sigma(params: &ModelParams, prompt: &[u32], response: &[u32]) -> f64 {
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let emb = params.token_embeddings(&ids);
    let ms = emb.data.iter().map(|v| v * v).sum::<f64>() / emb.data.len() as f64;
    0.05 * ms.sqrt()
}

pub struct OarGResult {
    pub scores: Vec<f64>,
    /// dJ/d(embedding), `[T_resp, d]` row-major.
    pub grad: Vec<f64>,
    /// Clean response token embeddings, `[T_resp, d]`.
    pub clean_emb: Vec<f64>,
    /// Noisy embeddings the gradient was evaluated at.
    pub noisy_emb: Vec<f64>,
    /// Value of the self-distillation objective at the noisy point.
    pub objective: f64,
}

/// Gradient x input attribution. One noise draw, one backward pass:
/// teacher distribution from clean embeddings (held constant), student
/// under Gaussian noise on the response embeddings (answer-span content
/// rows are left clean), J = KL(teacher ‖ student) for distributional
/// probes or the clean-minus-noisy score drop for AsJoint, and
/// I_t = |<dJ/de_t, e_t>| with the clean embedding as the input.
pub fn oar_g_detailed(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    probe: &OutcomeProbe,
    sigma: f64,
    seed: u64,
) -> Result<OarGResult> {
    if sigma <= 0.0 {
        return Err(Error::Contract(format!("sigma {sigma} must be positive")));
    }
    if response.is_empty() {
        return Err(Error::Contract("empty response".into()));
    }
    let cfg = &params.cfg;
    let d = cfg.d_model;
    let vocab = cfg.vocab_size;
    let rp = resolve_probe(probe, prompt.len(), response)?;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);

    // Teacher on clean embeddings.
    let base_logits = policy::full_logits(params, &ids)?;
    let base = base_probe_raw(vocab, &base_logits, &rp);

    let clean = params.token_embeddings(response);
    let mut noisy = clean.data.clone();
    let mut r = rng::substream(seed, "oar-g-noise", 0);
    for (t, row) in noisy.chunks_mut(d).enumerate() {
        if is_span_content(&rp, t) {
            continue;
        }
        for v in row {
            *v += sigma * rng::standard_normal(&mut r);
        }
    }

    let fwd = diff::build(
        params,
        &ids,
        &diff::DiffOptions {
            trainable: false,
            response_embeddings: Some((prompt.len(), &noisy)),
        },
    )?;
    let mut g = fwd.graph;
    let probe_rows = g.select_rows(fwd.logits, &rp.rows);
    let j = match &base {
        ProbeValueRaw::Row(p_logits) => {
            // J = KL(P0 ‖ P_eps) = sum p0 (ln p0 - ln q), P0 constant.
            let mut lp = p_logits.to_vec();
            kernels::log_softmax_row(&mut lp);
            let p0: Vec<f64> = lp.iter().map(|&l| l.exp()).collect();
            let c: f64 = p0.iter().zip(&lp).map(|(&p, &l)| if p > 0.0 { p * l } else { 0.0 }).sum();
            let mean_row = g.mean_rows(probe_rows);
            let lq = g.log_softmax_rows(mean_row);
            let p0_node = g.constant(crate::numerics::Tensor::new(vec![1, vocab], p0));
            let prod = g.mul(p0_node, lq);
            let cross = g.sum(prod);
            let neg = g.scale(cross, -1.0);
            g.add_scalar(neg, c)
        }
        ProbeValueRaw::Score(phi0) => {
            // J = phi_clean - phi_noisy (teacher constant).
            let lsm = g.log_softmax_rows(probe_rows);
            let cols: Vec<usize> = rp.targets.iter().map(|&t| t as usize).collect();
            let picked = g.pick_per_row(lsm, &cols);
            let phi = g.mean(picked);
            let neg = g.scale(phi, -1.0);
            g.add_scalar(neg, *phi0)
        }
    };
    let objective = g.value(j)[0];
    g.backward(j)?;
    let emb_leaf = fwd.emb_leaf.expect("embedding leaf requested");
    let grad = g.grad(emb_leaf).expect("embedding gradient").to_vec();

    let mut scores = vec![0.0; response.len()];
    for t in 0..response.len() {
        if is_span_content(&rp, t) {
            continue;
        }
        let dot: f64 = grad[t * d..(t + 1) * d]
            .iter()
            .zip(clean.row(t))
            .map(|(&gv, &ev)| gv * ev)
            .sum();
        scores[t] = dot.abs();
    }
    Ok(OarGResult { scores, grad, clean_emb: clean.data, noisy_emb: noisy, objective })
}

/// Raw OAR-G scores, averaging over `repeats` independent noise draws.
pub fn oar_g_scores(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    probe: &OutcomeProbe,
    sigma: f64,
    seed: u64,
    repeats: usize,
) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(Error::Contract("repeats must be >= 1".into()));
    }
    let mut acc = vec![0.0; response.len()];
    for k in 0..repeats {
        let r = oar_g_detailed(params, prompt, response, probe, sigma, seed.wrapping_add(k as u64))?;
        for (a, s) in acc.iter_mut().zip(&r.scores) {
            *a += s;
        }
    }
    for a in &mut acc {
        *a /= repeats as f64;
    }
    Ok(acc)
}

/// Evaluates the OAR-G objective (teacher from clean embeddings) at an
/// arbitrary response-embedding point, via the no-grad forward path.
/// Used by directional finite-difference checks.
pub fn oar_g_objective(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    probe: &OutcomeProbe,
    emb: &SequenceEmbeddings,
) -> Result<f64> {
    let vocab = params.cfg.vocab_size;
    let rp = resolve_probe(probe, prompt.len(), response)?;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let base_logits = policy::full_logits(params, &ids)?;
    let base = base_probe_raw(vocab, &base_logits, &rp);
    let mut r = rng::substream(0, "unused", 0);
    let logits = policy::forward_logits(params, prompt, response, Some(emb), 0.0, &mut r)?;
    Ok(match &base {
        ProbeValueRaw::Row(p_row) => kl_from_logits(p_row, &probe_logits_row(vocab, &logits, &rp)),
        ProbeValueRaw::Score(phi0) => phi0 - joint_score(vocab, &logits, &rp),
    })
}

/// Policy entropy at each response position as a cheap importance proxy.
pub fn entropy_scores(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    temperature: f64,
) -> Result<Vec<f64>> {
    Ok(policy::logprobs_entropy(params, prompt, response, temperature)?.1)
}

/// Seeded Uniform(0,1) scores.
pub fn random_scores(t: usize, seed: u64) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Contract("T must be >= 1".into()));
    }
    let mut r = rng::substream(seed, "random-credit", 0);
    Ok((0..t).map(|_| r.gen::<f64>()).collect())
}

/// Log-transform then min-max. A spread below 1e-12 is degenerate: all
/// normalized scores are 0 and the flag tells reshaping to fall back to
/// uniform weights.
pub fn normalize_importance(raw: &[f64]) -> Result<(Vec<f64>, bool)> {
    if raw.is_empty() {
        return Err(Error::Contract("empty importance vector".into()));
    }
    for &x in raw {
        if !x.is_finite() {
            return Err(Error::NonFinite("raw importance".into()));
        }
        if x < 0.0 {
            return Err(Error::Contract(format!("negative raw importance {x}")));
        }
    }
    let bar: Vec<f64> = raw.iter().map(|&x| x.ln_1p()).collect();
    let min = bar.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = bar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        return Ok((vec![0.0; raw.len()], true));
    }
    let denom = max - min + EPS_NORM;
    Ok((bar.iter().map(|&b| (b - min) / denom).collect(), false))
}

#[derive(Serialize, Deserialize)]
pub struct ImportanceDumpRecord {
    pub trajectory_id: u64,
    pub method: String,
    pub probe: String,
    pub tokens: Vec<String>,
    pub i_raw: Vec<f64>,
    pub i_hat: Vec<f64>,
}

/// Appends one JSONL record to an importance dump.
pub fn append_importance_dump<W: Write>(w: &mut W, rec: &ImportanceDumpRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec).map_err(|e| Error::Contract(format!("jsonl encode: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::tasks::vocab;

    fn tiny_cfg() -> PolicyConfig {
        PolicyConfig {
            vocab_size: vocab::USED,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            pad_id: vocab::PAD,
            bos_id: vocab::BOS,
            eos_id: vocab::EOS,
        }
    }

    fn fixture() -> (ModelParams, Vec<u32>, Vec<u32>) {
        let params = ModelParams::init(&tiny_cfg(), 3).unwrap();
        let task = tasks::generate_task(17, 2).unwrap();
        (params, task.prompt, task.gold_trace)
    }

    #[test]
    fn normalize_worked_examples() {
        let e = std::f64::consts::E;
        let (i_hat, d) = normalize_importance(&[0.0, e - 1.0, e * e - 1.0]).unwrap();
        assert!(!d);
        assert!(i_hat[0].abs() < 1e-6);
        assert!((i_hat[1] - 0.5).abs() < 1e-6);
        assert!((i_hat[2] - 1.0).abs() < 1e-6);

        let (i_hat, d) = normalize_importance(&[0.7, 0.7, 0.7]).unwrap();
        assert!(d);
        assert!(i_hat.iter().all(|&x| x == 0.0));

        assert!(normalize_importance(&[-0.1, 1.0]).is_err());
        assert!(normalize_importance(&[]).is_err());
    }

    #[test]
    fn normalize_range_bounds() {
        let mut r = rng::substream(5, "norm-range", 0);
        use rand::Rng;
        for _ in 0..200 {
            let n = r.gen_range(1..40);
            let raw: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 10.0).collect();
            let (i_hat, d) = normalize_importance(&raw).unwrap();
            assert!(i_hat.iter().all(|&x| (0.0..=1.0).contains(&x)));
            if !d {
                let min = i_hat.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = i_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(min.abs() < 1e-9);
                assert!(max > 1.0 - 1e-5 && max <= 1.0);
            }
        }
    }

    #[test]
    fn oar_p_mask_identity_gives_zero() {
        let (params, prompt, _) = fixture();
        // A constructed response already containing the mask token at one
        // position: perturbing it there is the identity.
        let response = vec![vocab::DIGIT0 + 3, vocab::PAD, vocab::DIGIT0 + 7, vocab::EOS];
        let probe = OutcomeProbe::new(ProbeKind::LtLogits, true);
        let scores = oar_p_scores_serial(&params, &prompt, &response, &probe).unwrap();
        assert_eq!(scores[1], 0.0);
        assert!(scores[0] > 0.0 || scores[2] > 0.0);
    }

    #[test]
    fn oar_p_batched_matches_serial_bitwise() {
        let (params, _, _) = fixture();
        for (seed, kind) in [
            (1u64, ProbeKind::LtLogits),
            (2, ProbeKind::AsMean),
            (3, ProbeKind::AsJoint),
            (4, ProbeKind::LtLogits),
            (5, ProbeKind::AsMean),
        ] {
            let task = tasks::generate_task(seed, 1 + (seed % 3) as u32).unwrap();
            let probe = OutcomeProbe::new(kind, true);
            let serial = oar_p_scores_serial(&params, &task.prompt, &task.gold_trace, &probe).unwrap();
            for budget in [1, 4, 32] {
                let batched =
                    oar_p_scores(&params, &task.prompt, &task.gold_trace, &probe, budget).unwrap();
                assert_eq!(serial, batched, "seed {seed} kind {kind:?} budget {budget}");
            }
        }
    }

    #[test]
    fn oar_p_scores_nonnegative_and_response_sized() {
        let (params, prompt, response) = fixture();
        for kind in [ProbeKind::LtLogits, ProbeKind::AsMean, ProbeKind::AsJoint] {
            let probe = OutcomeProbe::new(kind, true);
            let scores = oar_p_scores(&params, &prompt, &response, &probe, 32).unwrap();
            assert_eq!(scores.len(), response.len());
            assert!(scores.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn span_content_excluded_from_targets() {
        let (params, prompt, response) = fixture();
        let span = tasks::extract_answer_span(&response).unwrap();
        let probe = OutcomeProbe::new(ProbeKind::AsMean, false);
        let scores = oar_p_scores(&params, &prompt, &response, &probe, 32).unwrap();
        for t in span.start..span.end {
            assert_eq!(scores[t], 0.0);
        }
        let g = oar_g_scores(&params, &prompt, &response, &probe, 0.02, 9, 1).unwrap();
        for t in span.start..span.end {
            assert_eq!(g[t], 0.0);
        }
    }

    #[test]
    fn missing_span_fallback_and_error() {
        let (params, prompt, _) = fixture();
        let no_span = vec![vocab::DIGIT0 + 1, vocab::PLUS, vocab::DIGIT0 + 2, vocab::EOS];
        let warm = OutcomeProbe::new(ProbeKind::AsMean, true);
        let lt = OutcomeProbe::new(ProbeKind::LtLogits, false);
        let a = oar_p_scores_serial(&params, &prompt, &no_span, &warm).unwrap();
        let b = oar_p_scores_serial(&params, &prompt, &no_span, &lt).unwrap();
        assert_eq!(a, b);
        let strict = OutcomeProbe::new(ProbeKind::AsMean, false);
        assert!(matches!(
            oar_p_scores_serial(&params, &prompt, &no_span, &strict),
            Err(Error::NoAnswerSpan)
        ));
    }

    #[test]
    fn probe_value_shapes() {
        let (params, prompt, response) = fixture();
        match probe_distribution(&params, &prompt, &response, &OutcomeProbe::new(ProbeKind::LtLogits, false))
            .unwrap()
        {
            ProbeValue::Distribution(d) => d.validate().unwrap(),
            _ => panic!("expected distribution"),
        }
        match probe_distribution(&params, &prompt, &response, &OutcomeProbe::new(ProbeKind::AsJoint, false))
            .unwrap()
        {
            ProbeValue::Score(s) => assert!(s <= 0.0, "mean log-likelihood must be <= 0, got {s}"),
            _ => panic!("expected score"),
        }
    }

    #[test]
    fn as_mean_single_token_span_equals_that_position() {
        let (params, prompt, _) = fixture();
        let response = vec![
            vocab::DIGIT0 + 2,
            vocab::ANS_OPEN,
            vocab::DIGIT0 + 5,
            vocab::ANS_CLOSE,
            vocab::EOS,
        ];
        let mut ids = prompt.clone();
        ids.extend_from_slice(&response);
        let logits = policy::full_logits(&params, &ids).unwrap();
        // Span content is response index 2; the predicting row is
        // prompt_len + 1.
        let row_idx = prompt.len() + 1;
        let vocab_n = params.cfg.vocab_size;
        let expected = TokenDistribution::from_logits(
            &logits[row_idx * vocab_n..(row_idx + 1) * vocab_n],
        );
        match probe_distribution(&params, &prompt, &response, &OutcomeProbe::new(ProbeKind::AsMean, false))
            .unwrap()
        {
            ProbeValue::Distribution(d) => {
                for (a, b) in d.probs.iter().zip(&expected.probs) {
                    assert_eq!(a, b);
                }
            }
            _ => panic!("expected distribution"),
        }
    }

    #[test]
    fn pinsker_bound_holds() {
        let (params, prompt, response) = fixture();
        let probe = OutcomeProbe::new(ProbeKind::LtLogits, false);
        let pairs = oar_p_distribution_pairs(&params, &prompt, &response, &probe).unwrap();
        let mut r = rng::substream(99, "pinsker", 0);
        use rand::Rng;
        let mut checked = 0;
        'outer: loop {
            for (_, p, q, score) in &pairs {
                let s: Vec<bool> = (0..p.probs.len()).map(|_| r.gen::<bool>()).collect();
                let ps: f64 = p.probs.iter().zip(&s).filter(|(_, &inc)| inc).map(|(&x, _)| x).sum();
                let qs: f64 = q.probs.iter().zip(&s).filter(|(_, &inc)| inc).map(|(&x, _)| x).sum();
                assert!((ps - qs).abs() <= (score / 2.0).sqrt() + 1e-9);
                checked += 1;
                if checked >= 1000 {
                    break 'outer;
                }
            }
        }
    }

    #[test]
    fn oar_g_vanishing_sigma_vanishing_scores() {
        let (params, prompt, response) = fixture();
        let probe = OutcomeProbe::new(ProbeKind::LtLogits, false);
        let scores = oar_g_scores(&params, &prompt, &response, &probe, 1e-12, 7, 1).unwrap();
        assert!(scores.iter().all(|&s| s < 1e-6), "{scores:?}");
    }

    #[test]
    fn oar_g_zero_embedding_zero_score() {
        let (mut params, prompt, _) = fixture();
        let tok = (vocab::DIGIT0 + 4) as usize;
        let d = params.cfg.d_model;
        for v in &mut params.tok_emb.data[tok * d..(tok + 1) * d] {
            *v = 0.0;
        }
        let response = vec![vocab::DIGIT0 + 1, vocab::DIGIT0 + 4, vocab::DIGIT0 + 2, vocab::EOS];
        let probe = OutcomeProbe::new(ProbeKind::LtLogits, true);
        let scores = oar_g_scores(&params, &prompt, &response, &probe, 0.05, 3, 1).unwrap();
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn oar_g_deterministic_and_seed_sensitive() {
        let (params, prompt, response) = fixture();
        let probe = OutcomeProbe::new(ProbeKind::AsMean, true);
        let sigma = default_sigma(&params, &prompt, &response);
        let a = oar_g_scores(&params, &prompt, &response, &probe, sigma, 42, 1).unwrap();
        let b = oar_g_scores(&params, &prompt, &response, &probe, sigma, 42, 1).unwrap();
        assert_eq!(a, b);
        let c = oar_g_scores(&params, &prompt, &response, &probe, sigma, 43, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oar_g_directional_finite_difference() {
        let (params, prompt, response) = fixture();
        let d = params.cfg.d_model;
        for kind in [ProbeKind::LtLogits, ProbeKind::AsJoint] {
            let probe = OutcomeProbe::new(kind, true);
            let sigma = default_sigma(&params, &prompt, &response);
            let r = oar_g_detailed(&params, &prompt, &response, &probe, sigma, 11).unwrap();
            let h = 1e-5;
            let mut checked = 0;
            for t in 0..response.len() {
                let e_t = &r.clean_emb[t * d..(t + 1) * d];
                let norm = e_t.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 =
                    r.grad[t * d..(t + 1) * d].iter().zip(e_t).map(|(&g, &e)| g * e).sum();
                if norm < 1e-9 || dot.abs() < 1e-10 {
                    continue;
                }
                let mut shifted = r.noisy_emb.clone();
                for (sv, &ev) in shifted[t * d..(t + 1) * d].iter_mut().zip(e_t) {
                    *sv += h * ev / norm;
                }
                let emb = SequenceEmbeddings { d_model: d, data: shifted };
                let j1 = oar_g_objective(&params, &prompt, &response, &probe, &emb).unwrap();
                let predicted = dot * h / norm;
                let actual = j1 - r.objective;
                let rel = (actual - predicted).abs() / predicted.abs().max(1e-12);
                assert!(rel < 0.1, "kind {kind:?} t {t} rel {rel} pred {predicted} act {actual}");
                checked += 1;
            }
            assert!(checked >= 5, "too few checkable positions for {kind:?}");
        }
    }

    #[test]
    fn entropy_scores_match_policy_entropy() {
        let (params, prompt, response) = fixture();
        let scores = entropy_scores(&params, &prompt, &response, 1.0).unwrap();
        let (_, ents) = policy::logprobs_entropy(&params, &prompt, &response, 1.0).unwrap();
        assert_eq!(scores, ents);
    }

    #[test]
    fn entropy_uniform_logit_model() {
        let (mut params, prompt, response) = fixture();
        for v in &mut params.unembed.data {
            *v = 0.0;
        }
        let scores = entropy_scores(&params, &prompt, &response, 1.0).unwrap();
        // PAD and BOS are masked from the policy, so the uniform-logit
        // entropy is ln(vocab - 2).
        let expect = ((params.cfg.vocab_size - 2) as f64).ln();
        for &s in &scores {
            assert!((s - expect).abs() < 1e-9, "{s} vs {expect}");
        }
    }

    #[test]
    fn random_scores_statistics() {
        let a = random_scores(32, 7).unwrap();
        let b = random_scores(32, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, random_scores(32, 8).unwrap());
        let big = random_scores(100_000, 1).unwrap();
        assert!(big.iter().all(|&x| (0.0..1.0).contains(&x)));
        let mean = big.iter().sum::<f64>() / big.len() as f64;
        assert!((0.497..=0.503).contains(&mean), "mean {mean}");
        assert!(random_scores(0, 1).is_err());
    }

    #[test]
    fn profile_from_raw() {
        let p = ImportanceProfile::from_raw(
            AttributionMethod::Random,
            None,
            random_scores(10, 3).unwrap(),
        )
        .unwrap();
        assert!(!p.degenerate);
        assert_eq!(p.i_hat.len(), 10);
    }
}
