//! SFT warm-start and the GRPO training loop.
//!
//! One step: freeze the policy, sample G responses per prompt, score
//! rewards, normalize within each group, attribute per-token importance
//! with the configured credit method, reshape the sequence advantage into
//! token advantages, and take a single clipped-surrogate update —
//! strictly on-policy, one optimizer epoch per batch.

use crate::attribution::{self, AttributionMethod, ImportanceProfile, OutcomeProbe, ProbeKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::policy::{self, diff, ModelParams, SampleMode};
use crate::reshaping::{self, GatingConfig};
use crate::rng;
use crate::tasks::{self, RewardBreakdown, TaskInstance};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CreditMethod {
    Vanilla,
    Random,
    Entropy,
    OarP,
    OarG,
}

impl CreditMethod {
    pub const ALL: [CreditMethod; 5] = [
        CreditMethod::Vanilla,
        CreditMethod::Random,
        CreditMethod::Entropy,
        CreditMethod::OarP,
        CreditMethod::OarG,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CreditMethod::Vanilla => "vanilla",
            CreditMethod::Random => "random",
            CreditMethod::Entropy => "entropy",
            CreditMethod::OarP => "oar_p",
            CreditMethod::OarG => "oar_g",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::Contract(format!("unknown credit method {s:?}; valid: {}", valid.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub credit: CreditMethod,
    pub gating: GatingConfig,
    pub probe: OutcomeProbe,
    /// Entropy-baseline bonus coefficient and cap divisor.
    pub alpha: f64,
    pub kappa: f64,
    pub batch_budget: usize,
    pub oar_g_repeats: usize,
    /// Fixed OAR-G noise scale; `None` uses the per-sequence default.
    pub sigma: Option<f64>,
    pub difficulty_min: u32,
    pub difficulty_max: u32,
    pub seed: u64,
    /// Treat every importance profile as degenerate (uniform fallback),
    /// reducing any credit method to vanilla GRPO.
    pub force_degenerate: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            prompts_per_batch: 4,
            total_steps: 200,
            learning_rate: 3e-4,
            eps_low: 0.2,
            eps_high: 0.28,
            temperature: 1.0,
            max_new_tokens: 96,
            credit: CreditMethod::Vanilla,
            gating: GatingConfig::default(),
            probe: OutcomeProbe::new(ProbeKind::AsMean, true),
            alpha: 0.4,
            kappa: 4.0,
            batch_budget: 32,
            oar_g_repeats: 1,
            sigma: None,
            difficulty_min: 1,
            difficulty_max: 3,
            seed: 0,
            force_degenerate: false,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Contract(format!("group size {} < 2", self.group_size)));
        }
        for (name, e) in [("eps_low", self.eps_low), ("eps_high", self.eps_high)] {
            if !(0.0 < e && e < 1.0) {
                return Err(Error::Contract(format!("{name} {e} outside (0,1)")));
            }
        }
        if self.temperature <= 0.0 {
            return Err(Error::Contract(format!("temperature {} must be positive", self.temperature)));
        }
        if self.prompts_per_batch == 0 || self.max_new_tokens == 0 {
            return Err(Error::Contract("prompts_per_batch and max_new_tokens must be >= 1".into()));
        }
        if !(1..=6).contains(&self.difficulty_min)
            || !(1..=6).contains(&self.difficulty_max)
            || self.difficulty_min > self.difficulty_max
        {
            return Err(Error::Contract("difficulty range must satisfy 1 <= min <= max <= 6".into()));
        }
        self.gating.validate()
    }
}

/// One line of the training log. Wall-clock fields are the only
/// non-reproducible entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_accuracy: f64,
    pub mean_format: f64,
    pub mean_entropy: f64,
    pub mean_ess_ratio: f64,
    pub mean_top10_mass: f64,
    /// Unrenormalized bonus mass added by the entropy baseline (zero for
    /// all other methods).
    pub entropy_bonus_mass: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub loss: f64,
    pub response_tokens: usize,
    pub seconds_per_token: f64,
}

impl StepLog {
    /// Equality over every reproducible field (wall clock excluded).
    pub fn same_dynamics(&self, other: &StepLog) -> bool {
        let a = (self.step, self.mean_reward, self.mean_accuracy, self.mean_format);
        let b = (other.step, other.mean_reward, other.mean_accuracy, other.mean_format);
        a == b
            && (self.mean_entropy, self.mean_ess_ratio, self.mean_top10_mass)
                == (other.mean_entropy, other.mean_ess_ratio, other.mean_top10_mass)
            && (self.entropy_bonus_mass, self.clip_fraction, self.grad_norm)
                == (other.entropy_bonus_mass, other.clip_fraction, other.grad_norm)
            && (self.loss, self.response_tokens) == (other.loss, other.response_tokens)
    }
}

pub fn append_step_log<W: Write>(w: &mut W, log: &StepLog) -> Result<()> {
    serde_json::to_writer(&mut *w, log).map_err(|e| Error::Contract(format!("jsonl encode: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_step_logs(path: &std::path::Path) -> Result<Vec<StepLog>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Contract(format!("jsonl decode: {e}")))?,
        );
    }
    Ok(out)
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adam with bias correction, one moment pair per parameter tensor.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Applies one update; `grads` is aligned with `ModelParams::named`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((idx, (_, tensor)), grad) in params.named_mut().into_iter().enumerate().zip(grads) {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..tensor.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Zeroed gradient buffers aligned with `ModelParams::named`.
pub fn grad_buffers(params: &ModelParams) -> Vec<Vec<f64>> {
    params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
}

pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

// ── rollouts ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub response: Vec<u32>,
    /// Behavior log-probs recorded at sampling time.
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

/// Samples G trajectories per task from the frozen policy and computes
/// group-normalized advantages. Deterministic per (params, cfg.seed, step).
pub fn collect_rollouts(
    params: &ModelParams,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<RolloutGroup>> {
    let mut out = Vec::with_capacity(batch.len());
    for (p_idx, task) in batch.iter().enumerate() {
        let mut trajectories = Vec::with_capacity(cfg.group_size);
        let mut rewards = Vec::with_capacity(cfg.group_size);
        for i in 0..cfg.group_size {
            let idx = ((step * batch.len() + p_idx) * cfg.group_size + i) as u64;
            let mut r = rng::substream(cfg.seed, "rollout-sample", idx);
            let s = policy::sample(
                params,
                &task.prompt,
                cfg.temperature,
                cfg.max_new_tokens,
                SampleMode::Stochastic,
                &mut r,
            )?;
            let reward = tasks::compute_reward(&s.response, task);
            rewards.push(reward.overall);
            trajectories.push(Trajectory {
                response: s.response,
                logprobs: s.logprobs,
                entropies: s.entropies,
                reward,
            });
        }
        let (advantages, degenerate) = reshaping::normalize_group_rewards(&rewards)?;
        out.push(RolloutGroup { task: task.clone(), trajectories, advantages, degenerate });
    }
    Ok(out)
}

// ── clipped surrogate ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LossStats {
    /// Trajectory token-mean surrogate loss (already scaled by
    /// `loss_scale` when accumulated, unscaled here).
    pub loss: f64,
    pub clipped_tokens: usize,
    pub tokens: usize,
}

/// Builds the clipped-surrogate loss for one trajectory, backpropagates,
/// and accumulates `loss_scale`-weighted parameter gradients into `acc`.
/// Advantages and behavior log-probs enter as constants. `include`
/// deletes individual tokens' surrogate terms from the sum while keeping
/// the token-mean denominator (used by the noise-suppression diagnostics).
#[allow(clippy::too_many_arguments)]
pub fn accumulate_policy_gradients(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    behavior_logprobs: &[f64],
    advantages: &[f64],
    cfg: &TrainConfig,
    include: Option<&[bool]>,
    loss_scale: f64,
    acc: &mut [Vec<f64>],
) -> Result<LossStats> {
    let t_len = response.len();
    if behavior_logprobs.len() != t_len || advantages.len() != t_len {
        return Err(Error::Contract("length mismatch in policy loss inputs".into()));
    }
    let cfg_p = &params.cfg;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let fwd = diff::build(params, &ids, &diff::DiffOptions { trainable: true, response_embeddings: None })?;
    let mut g = fwd.graph;

    let rows: Vec<usize> = (0..t_len).map(|j| prompt.len() + j - 1).collect();
    let sel = g.select_rows(fwd.logits, &rows);
    let scaled = g.scale(sel, 1.0 / cfg.temperature);
    let mut mask = vec![0.0; cfg_p.vocab_size];
    mask[cfg_p.pad_id as usize] = -1e30;
    mask[cfg_p.bos_id as usize] = -1e30;
    let mask_node = g.constant(Tensor::new(vec![1, cfg_p.vocab_size], mask));
    let masked = g.add_row(scaled, mask_node);
    let lsm = g.log_softmax_rows(masked);
    let cols: Vec<usize> = response.iter().map(|&t| t as usize).collect();
    let lp_new = g.pick_per_row(lsm, &cols);

    let lp_old = g.constant(Tensor::new(vec![t_len], behavior_logprobs.to_vec()));
    let log_ratio = g.sub(lp_new, lp_old);
    let ratio = g.exp(log_ratio);
    for (j, &rho) in g.value(ratio).iter().enumerate() {
        if !rho.is_finite() {
            return Err(Error::NonFinite(format!("importance ratio at position {j}")));
        }
    }
    let ratio_vals = g.value(ratio).to_vec();

    let adv_node = g.constant(Tensor::new(vec![t_len], advantages.to_vec()));
    let unclipped = g.mul(ratio, adv_node);
    let clipped_ratio = g.clamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    let clipped = g.mul(clipped_ratio, adv_node);
    let mut surrogate = g.min_elem(unclipped, clipped);
    if let Some(inc) = include {
        assert_eq!(inc.len(), t_len);
        let m: Vec<f64> = inc.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let m_node = g.constant(Tensor::new(vec![t_len], m));
        surrogate = g.mul(surrogate, m_node);
    }
    let mean = g.mean(surrogate);
    let loss = g.scale(mean, -loss_scale);
    let loss_val = g.value(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("policy loss".into()));
    }
    g.backward(loss)?;
    for ((_, leaf), buf) in fwd.param_leaves.iter().zip(acc.iter_mut()) {
        let grad = g.grad(*leaf).expect("trainable leaf gradient");
        for (b, &gv) in buf.iter_mut().zip(grad) {
            *b += gv;
        }
    }

    let clipped_tokens = ratio_vals
        .iter()
        .zip(advantages)
        .filter(|(&rho, &a)| {
            (rho > 1.0 + cfg.eps_high && a > 0.0) || (rho < 1.0 - cfg.eps_low && a < 0.0)
        })
        .count();
    Ok(LossStats { loss: loss_val / loss_scale, clipped_tokens, tokens: t_len })
}

// ── SFT warm-start ───────────────────────────────────────────────────────

/// Cross-entropy gradient on one gold trace, scaled by `loss_scale`.
fn accumulate_ce_gradients(
    params: &ModelParams,
    task: &TaskInstance,
    loss_scale: f64,
    acc: &mut [Vec<f64>],
) -> Result<f64> {
    let mut ids = task.prompt.clone();
    ids.extend_from_slice(&task.gold_trace);
    let fwd = diff::build(params, &ids, &diff::DiffOptions { trainable: true, response_embeddings: None })?;
    let mut g = fwd.graph;
    let t_len = task.gold_trace.len();
    let rows: Vec<usize> = (0..t_len).map(|j| task.prompt.len() + j - 1).collect();
    let sel = g.select_rows(fwd.logits, &rows);
    let lsm = g.log_softmax_rows(sel);
    let cols: Vec<usize> = task.gold_trace.iter().map(|&t| t as usize).collect();
    let picked = g.pick_per_row(lsm, &cols);
    let mean = g.mean(picked);
    let loss = g.scale(mean, -loss_scale);
    let loss_val = g.value(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("sft loss".into()));
    }
    g.backward(loss)?;
    for ((_, leaf), buf) in fwd.param_leaves.iter().zip(acc.iter_mut()) {
        let grad = g.grad(*leaf).expect("trainable leaf gradient");
        for (b, &gv) in buf.iter_mut().zip(grad) {
            *b += gv;
        }
    }
    Ok(loss_val / loss_scale)
}

/// Supervised warm-start on gold traces. Returns the per-step mean
/// cross-entropy losses.
pub fn sft_warmstart(
    params: &mut ModelParams,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    difficulty: (u32, u32),
) -> Result<Vec<f64>> {
    if steps == 0 || batch_size == 0 {
        return Err(Error::Contract("steps and batch_size must be >= 1".into()));
    }
    let mut opt = Adam::new(params, lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut acc = grad_buffers(params);
        let mut total = 0.0;
        for b in 0..batch_size {
            let idx = (step * batch_size + b) as u64;
            let task_seed = rng::substream(seed, "sft-task", idx).gen::<u64>();
            let d = difficulty.0 + (idx % (difficulty.1 - difficulty.0 + 1) as u64) as u32;
            let task = tasks::generate_task(task_seed, d)?;
            total += accumulate_ce_gradients(params, &task, 1.0 / batch_size as f64, &mut acc)?;
        }
        let loss = total / batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("sft diverged at step {step}")));
        }
        opt.step(params, &acc);
        losses.push(loss);
    }
    Ok(losses)
}

/// Greedy-decode evaluation on held-out tasks: mean (accuracy, format,
/// overall) rewards.
pub fn evaluate_greedy(
    params: &ModelParams,
    heldout: &[TaskInstance],
    max_new: usize,
) -> Result<(f64, f64, f64)> {
    let mut acc = 0.0;
    let mut fmt = 0.0;
    let mut overall = 0.0;
    let mut r = rng::substream(0, "greedy-eval", 0);
    for task in heldout {
        let s = policy::sample(params, &task.prompt, 1.0, max_new, SampleMode::Greedy, &mut r)?;
        let rew = tasks::compute_reward(&s.response, task);
        acc += rew.accuracy;
        fmt += rew.format;
        overall += rew.overall;
    }
    let n = heldout.len() as f64;
    Ok((acc / n, fmt / n, overall / n))
}

/// Deterministic held-out task set, disjoint from training streams by
/// substream tag.
pub fn heldout_tasks(seed: u64, n: usize, difficulty: (u32, u32)) -> Result<Vec<TaskInstance>> {
    (0..n)
        .map(|i| {
            let task_seed = rng::substream(seed, "heldout-task", i as u64).gen::<u64>();
            let d = difficulty.0 + (i as u64 % (difficulty.1 - difficulty.0 + 1) as u64) as u32;
            tasks::generate_task(task_seed, d)
        })
        .collect()
}

// ── credit assignment ────────────────────────────────────────────────────

/// Per-token advantages plus the weight vector the diagnostics run on.
pub struct AssignedCredit {
    pub token_advantages: Vec<f64>,
    pub weights: Vec<f64>,
    pub profile: Option<ImportanceProfile>,
    pub entropy_bonus_mass: f64,
}

/// Applies one credit method to one trajectory. `traj_index` must be
/// unique per (step, trajectory) so stochastic methods get independent
/// substreams.
pub fn assign_credit(
    params: &ModelParams,
    task: &TaskInstance,
    traj: &Trajectory,
    a_seq: f64,
    cfg: &TrainConfig,
    traj_index: u64,
) -> Result<AssignedCredit> {
    let t_len = traj.response.len();
    let make_profile = |method, probe, raw: Vec<f64>| -> Result<ImportanceProfile> {
        let mut p = ImportanceProfile::from_raw(method, probe, raw)?;
        if cfg.force_degenerate {
            p.degenerate = true;
            p.i_hat = vec![0.0; p.i_hat.len()];
        }
        Ok(p)
    };
    let reshaped = |p: &ImportanceProfile| reshaping::reshape(a_seq, &p.i_hat, &cfg.gating, p.degenerate);
    match cfg.credit {
        CreditMethod::Vanilla => {
            let r = reshaping::reshape(a_seq, &vec![0.0; t_len], &cfg.gating, true)?;
            Ok(AssignedCredit {
                token_advantages: r.a_oar,
                weights: r.omega_tilde,
                profile: None,
                entropy_bonus_mass: 0.0,
            })
        }
        CreditMethod::Random => {
            let s = rng::substream(cfg.seed, "random-credit-seed", traj_index).gen::<u64>();
            let p = make_profile(AttributionMethod::Random, None, attribution::random_scores(t_len, s)?)?;
            let r = reshaped(&p)?;
            Ok(AssignedCredit {
                token_advantages: r.a_oar,
                weights: r.omega_tilde,
                profile: Some(p),
                entropy_bonus_mass: 0.0,
            })
        }
        CreditMethod::Entropy => {
            let shaped = reshaping::entropy_shape(a_seq, &traj.entropies, cfg.alpha, cfg.kappa)?;
            let bonus: f64 = shaped.iter().map(|a| a - a_seq).sum();
            let weights: Vec<f64> = shaped.iter().map(|a| a.abs()).collect();
            Ok(AssignedCredit {
                token_advantages: shaped,
                weights,
                profile: None,
                entropy_bonus_mass: bonus,
            })
        }
        CreditMethod::OarP => {
            let raw = attribution::oar_p_scores(params, &task.prompt, &traj.response, &cfg.probe, cfg.batch_budget)?;
            let p = make_profile(AttributionMethod::OarP, Some(cfg.probe.kind), raw)?;
            let r = reshaped(&p)?;
            Ok(AssignedCredit {
                token_advantages: r.a_oar,
                weights: r.omega_tilde,
                profile: Some(p),
                entropy_bonus_mass: 0.0,
            })
        }
        CreditMethod::OarG => {
            let sigma = cfg
                .sigma
                .unwrap_or_else(|| attribution::default_sigma(params, &task.prompt, &traj.response));
            let s = rng::substream(cfg.seed, "oar-g-seed", traj_index).gen::<u64>();
            let raw = attribution::oar_g_scores(
                params,
                &task.prompt,
                &traj.response,
                &cfg.probe,
                sigma,
                s,
                cfg.oar_g_repeats,
            )?;
            let p = make_profile(AttributionMethod::OarG, Some(cfg.probe.kind), raw)?;
            let r = reshaped(&p)?;
            Ok(AssignedCredit {
                token_advantages: r.a_oar,
                weights: r.omega_tilde,
                profile: Some(p),
                entropy_bonus_mass: 0.0,
            })
        }
    }
}

// ── training loop ────────────────────────────────────────────────────────

/// Training batch for one step, deterministic in (seed, step).
pub fn step_tasks(cfg: &TrainConfig, step: usize) -> Result<Vec<TaskInstance>> {
    (0..cfg.prompts_per_batch)
        .map(|p| {
            let idx = (step * cfg.prompts_per_batch + p) as u64;
            let task_seed = rng::substream(cfg.seed, "rl-task", idx).gen::<u64>();
            let span = (cfg.difficulty_max - cfg.difficulty_min + 1) as u64;
            let d = cfg.difficulty_min + (idx % span) as u32;
            tasks::generate_task(task_seed, d)
        })
        .collect()
}

/// One full GRPO step: collect, attribute, reshape, update. Mutates the
/// parameters only after all gradients are verified finite.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLog> {
    let t0 = Instant::now();
    let batch = step_tasks(cfg, step)?;
    let groups = collect_rollouts(params, &batch, cfg, step)?;

    let n_traj = (groups.len() * cfg.group_size) as f64;
    let mut acc = grad_buffers(params);
    let mut loss_total = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut reward = (0.0, 0.0, 0.0);
    let mut entropy_sum = 0.0;
    let mut entropy_n = 0usize;
    let mut ess_sum = 0.0;
    let mut top10_sum = 0.0;
    let mut metric_n = 0usize;
    let mut bonus_mass = 0.0;

    let mut traj_index = (step * cfg.prompts_per_batch * cfg.group_size) as u64;
    for group in &groups {
        for (i, traj) in group.trajectories.iter().enumerate() {
            let a_seq = group.advantages[i];
            let credit = assign_credit(params, &group.task, traj, a_seq, cfg, traj_index)?;
            traj_index += 1;

            reward.0 += traj.reward.overall;
            reward.1 += traj.reward.accuracy;
            reward.2 += traj.reward.format;
            entropy_sum += traj.entropies.iter().sum::<f64>();
            entropy_n += traj.entropies.len();
            bonus_mass += credit.entropy_bonus_mass;
            if let Ok((ess, top10)) = reshaping::credit_metrics(&credit.weights) {
                ess_sum += ess;
                top10_sum += top10;
                metric_n += 1;
            }

            let stats = accumulate_policy_gradients(
                params,
                &group.task.prompt,
                &traj.response,
                &traj.logprobs,
                &credit.token_advantages,
                cfg,
                None,
                1.0 / n_traj,
                &mut acc,
            )?;
            loss_total += stats.loss / n_traj;
            clipped += stats.clipped_tokens;
            tokens += stats.tokens;
        }
    }

    for buf in &acc {
        for &g in buf {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient at step {step}")));
            }
        }
    }
    let gnorm = grad_norm(&acc);
    opt.step(params, &acc);

    let elapsed = t0.elapsed().as_secs_f64();
    Ok(StepLog {
        step,
        mean_reward: reward.0 / n_traj,
        mean_accuracy: reward.1 / n_traj,
        mean_format: reward.2 / n_traj,
        mean_entropy: if entropy_n > 0 { entropy_sum / entropy_n as f64 } else { 0.0 },
        mean_ess_ratio: if metric_n > 0 { ess_sum / metric_n as f64 } else { 1.0 },
        mean_top10_mass: if metric_n > 0 { top10_sum / metric_n as f64 } else { 0.0 },
        entropy_bonus_mass: bonus_mass,
        clip_fraction: if tokens > 0 { clipped as f64 / tokens as f64 } else { 0.0 },
        grad_norm: gnorm,
        loss: loss_total,
        response_tokens: tokens,
        seconds_per_token: if tokens > 0 { elapsed / tokens as f64 } else { 0.0 },
    })
}

/// Full RL loop. `on_step` fires after each step (logging, checkpoints).
pub fn train<F: FnMut(&ModelParams, &StepLog) -> Result<()>>(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let mut opt = Adam::new(params, cfg.learning_rate);
    let mut logs = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let log = train_step(params, &mut opt, cfg, step)?;
        on_step(params, &log)?;
        logs.push(log);
    }
    Ok(logs)
}
