//! Counterfactual Oracle labels, recall@top-K% curves, the broadcast-
//! variance simulation, and time-per-token profiling across credit
//! methods.

use crate::attribution;
use crate::error::{Error, Result};
use crate::policy::{self, fast, ModelParams, SampleMode};
use crate::rng;
use crate::tasks::{self, TaskInstance};
use crate::trainer::{self, CreditMethod, TrainConfig, Trajectory};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Ground-truth causal labels for one trajectory. Only positions strictly
/// before the answer span are labeled (replacing answer digits flips
/// correctness trivially).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLabels {
    /// Response positions that were labeled.
    pub targets: Vec<usize>,
    /// Parallel to `targets`: 1 when replacing the token flipped
    /// final-answer correctness.
    pub causal: Vec<bool>,
    /// Parallel to `targets`: the argmax-2 replacement token.
    pub replacement: Vec<u32>,
    /// Parallel to `targets`: correctness of the re-decoded sequence.
    pub redecoded_correct: Vec<bool>,
    pub original_correct: bool,
    /// Response length the labels refer to.
    pub response_len: usize,
}

/// Greedy re-decode from a shared prefix cache; returns the completed
/// response (prefix + forced token + greedy suffix).
fn redecode_suffix(
    params: &ModelParams,
    cache: &fast::ForwardCache,
    prefix_response: &[u32],
    forced: u32,
    max_len: usize,
) -> Result<Vec<u32>> {
    let cfg = &params.cfg;
    let mut response = prefix_response.to_vec();
    response.push(forced);
    let mut c = cache.truncated(cache.len(), cfg.d_model);
    let mut last_row = fast::extend(params, &mut c, &[forced], None)?;
    while response.len() < max_len && c.len() < cfg.max_seq_len {
        if *response.last().unwrap() == cfg.eos_id {
            break;
        }
        let lp = policy::sampling_logprobs(cfg, &last_row, 1.0);
        let tok = policy::argmax(&lp) as u32;
        response.push(tok);
        if tok == cfg.eos_id {
            break;
        }
        last_row = fast::extend(params, &mut c, &[tok], None)?;
    }
    Ok(response)
}

/// Labels each pre-span position: replace the token with the policy's
/// second choice, greedily re-decode the suffix, and compare final-answer
/// correctness against the original response.
pub fn oracle_label(
    params: &ModelParams,
    task: &TaskInstance,
    response: &[u32],
    max_len: usize,
) -> Result<OracleLabels> {
    if params.cfg.vocab_size < 4 {
        return Err(Error::Contract("vocabulary too small for argmax-2 replacement".into()));
    }
    let cfg = &params.cfg;
    let original_correct = tasks::compute_reward(response, task).accuracy == 1.0;
    let span_start = tasks::extract_answer_span(response).map(|s| s.start).unwrap_or(response.len());
    // The opening tag sits at span_start - 1; everything before it is a
    // reasoning token.
    let limit = span_start.saturating_sub(1).min(response.len());

    let mut ids = task.prompt.clone();
    ids.extend_from_slice(response);
    let mut full_cache = fast::ForwardCache::new(cfg);
    let full_logits = fast::extend(params, &mut full_cache, &ids, None)?;

    let mut targets = Vec::new();
    let mut causal = Vec::new();
    let mut replacement = Vec::new();
    let mut redecoded_correct = Vec::new();
    for t in 0..limit {
        let row_idx = task.prompt.len() + t - 1;
        let row = &full_logits[row_idx * cfg.vocab_size..(row_idx + 1) * cfg.vocab_size];
        let lp = policy::sampling_logprobs(cfg, row, 1.0);
        let second = policy::argmax2(&lp) as u32;
        assert_ne!(second as usize, policy::argmax(&lp), "argmax-2 must differ from argmax");
        let prefix_cache = full_cache.truncated(task.prompt.len() + t, cfg.d_model);
        let new_response = redecode_suffix(params, &prefix_cache, &response[..t], second, max_len)?;
        let new_correct = tasks::compute_reward(&new_response, task).accuracy == 1.0;
        targets.push(t);
        causal.push(new_correct != original_correct);
        replacement.push(second);
        redecoded_correct.push(new_correct);
    }
    Ok(OracleLabels {
        targets,
        causal,
        replacement,
        redecoded_correct,
        original_correct,
        response_len: response.len(),
    })
}

/// Independent slow twin of `oracle_label`: no cache reuse, every decode
/// step is a full fresh forward.
pub fn oracle_label_brute(
    params: &ModelParams,
    task: &TaskInstance,
    response: &[u32],
    max_len: usize,
) -> Result<OracleLabels> {
    let cfg = &params.cfg;
    let original_correct = tasks::compute_reward(response, task).accuracy == 1.0;
    let span_start = tasks::extract_answer_span(response).map(|s| s.start).unwrap_or(response.len());
    let limit = span_start.saturating_sub(1).min(response.len());

    let mut targets = Vec::new();
    let mut causal = Vec::new();
    let mut replacement = Vec::new();
    let mut redecoded_correct = Vec::new();
    for t in 0..limit {
        let mut prefix = task.prompt.clone();
        prefix.extend_from_slice(&response[..t]);
        let logits = policy::full_logits(params, &prefix)?;
        let row = &logits[(prefix.len() - 1) * cfg.vocab_size..prefix.len() * cfg.vocab_size];
        let lp = policy::sampling_logprobs(cfg, row, 1.0);
        let second = policy::argmax2(&lp) as u32;
        let mut new_response = response[..t].to_vec();
        new_response.push(second);
        while new_response.len() < max_len
            && task.prompt.len() + new_response.len() < cfg.max_seq_len
            && *new_response.last().unwrap() != cfg.eos_id
        {
            let mut seq = task.prompt.clone();
            seq.extend_from_slice(&new_response);
            let logits = policy::full_logits(params, &seq)?;
            let row = &logits[(seq.len() - 1) * cfg.vocab_size..seq.len() * cfg.vocab_size];
            let lp = policy::sampling_logprobs(cfg, row, 1.0);
            new_response.push(policy::argmax(&lp) as u32);
        }
        let new_correct = tasks::compute_reward(&new_response, task).accuracy == 1.0;
        targets.push(t);
        causal.push(new_correct != original_correct);
        replacement.push(second);
        redecoded_correct.push(new_correct);
    }
    Ok(OracleLabels {
        targets,
        causal,
        replacement,
        redecoded_correct,
        original_correct,
        response_len: response.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    /// K grid in percent.
    pub k_grid: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Micro-averaged recall of Oracle-causal tokens within each trajectory's
/// top-K% tokens ranked by normalized importance (ties broken by position
/// index ascending).
pub fn recall_curve(
    labels: &[OracleLabels],
    importance: &[Vec<f64>],
    k_grid: &[f64],
) -> Result<RecallCurve> {
    if labels.len() != importance.len() {
        return Err(Error::Contract("labels/importance length mismatch".into()));
    }
    let total_causal: usize =
        labels.iter().map(|l| l.causal.iter().filter(|&&c| c).count()).sum();
    if total_causal == 0 {
        return Err(Error::Degenerate("no causal tokens in corpus".into()));
    }
    let mut recall = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let mut captured = 0usize;
        for (l, i_hat) in labels.iter().zip(importance) {
            if i_hat.len() != l.response_len {
                return Err(Error::Contract("importance length mismatch with labels".into()));
            }
            let t = i_hat.len();
            let top = ((k / 100.0 * t as f64).ceil() as usize).min(t);
            let mut order: Vec<usize> = (0..t).collect();
            order.sort_by(|&a, &b| {
                i_hat[b].partial_cmp(&i_hat[a]).unwrap().then(a.cmp(&b))
            });
            let selected = &order[..top];
            for (&pos, &c) in l.targets.iter().zip(&l.causal) {
                if c && selected.contains(&pos) {
                    captured += 1;
                }
            }
        }
        recall.push(captured as f64 / total_causal as f64);
    }
    Ok(RecallCurve { k_grid: k_grid.to_vec(), recall })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VarianceSim {
    pub t: usize,
    pub var_broadcast: f64,
    pub var_token: f64,
    pub ratio: f64,
}

/// Samples i.i.d. standard-normal latent per-token contributions, forms
/// the broadcast sum A = sum a_t, and reports the empirical variance
/// ratio demonstrating credit aliasing growing with T.
pub fn variance_sim(t: usize, trials: usize, seed: u64) -> Result<VarianceSim> {
    if t < 1 || trials < 2 {
        return Err(Error::Contract("need t >= 1 and trials >= 2".into()));
    }
    let mut r = rng::substream(seed, "variance-sim", 0);
    let mut sums = Vec::with_capacity(trials);
    let mut singles = Vec::with_capacity(trials * t);
    for _ in 0..trials {
        let mut a = 0.0;
        for _ in 0..t {
            let x = rng::standard_normal(&mut r);
            singles.push(x);
            a += x;
        }
        sums.push(a);
    }
    let var = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let var_broadcast = var(&sums);
    let var_token = var(&singles);
    Ok(VarianceSim { t, var_broadcast, var_token, ratio: var_broadcast / var_token })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub variant: String,
    pub seconds_per_token: f64,
    /// Relative to the vanilla row.
    pub normalized: f64,
}

/// Measures one update sweep (attribution + reshaping + gradient
/// computation) per variant on an identical frozen batch, reporting
/// elapsed time divided by the action-token count, normalized to
/// vanilla = 1.0. Rows: vanilla, oar_g, oar_p_batched, oar_p_serial.
pub fn profile_time_per_token(
    params: &ModelParams,
    cfg: &TrainConfig,
    groups: &[trainer::RolloutGroup],
) -> Result<Vec<TimingRow>> {
    let tokens: usize = groups
        .iter()
        .flat_map(|g| g.trajectories.iter())
        .map(|t| t.response.len())
        .sum();
    if tokens == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let n_traj: f64 = groups.iter().map(|g| g.trajectories.len() as f64).sum();

    let sweep = |credit: CreditMethod, serial_oar_p: bool| -> Result<f64> {
        let cfg = TrainConfig { credit, ..cfg.clone() };
        let t0 = Instant::now();
        let mut acc = trainer::grad_buffers(params);
        let mut traj_index = 0u64;
        for group in groups {
            for (i, traj) in group.trajectories.iter().enumerate() {
                let a_seq = group.advantages[i];
                let credit = if serial_oar_p {
                    let raw = attribution::oar_p_scores_serial(
                        params,
                        &group.task.prompt,
                        &traj.response,
                        &cfg.probe,
                    )?;
                    let p = attribution::ImportanceProfile::from_raw(
                        attribution::AttributionMethod::OarP,
                        Some(cfg.probe.kind),
                        raw,
                    )?;
                    let r = crate::reshaping::reshape(a_seq, &p.i_hat, &cfg.gating, p.degenerate)?;
                    trainer::AssignedCredit {
                        token_advantages: r.a_oar,
                        weights: r.omega_tilde,
                        profile: Some(p),
                        entropy_bonus_mass: 0.0,
                    }
                } else {
                    trainer::assign_credit(params, &group.task, traj, a_seq, &cfg, traj_index)?
                };
                traj_index += 1;
                trainer::accumulate_policy_gradients(
                    params,
                    &group.task.prompt,
                    &traj.response,
                    &traj.logprobs,
                    &credit.token_advantages,
                    &cfg,
                    None,
                    1.0 / n_traj,
                    &mut acc,
                )?;
            }
        }
        Ok(t0.elapsed().as_secs_f64() / tokens as f64)
    };

    let vanilla = sweep(CreditMethod::Vanilla, false)?;
    let oar_g = sweep(CreditMethod::OarG, false)?;
    let oar_p_batched = sweep(CreditMethod::OarP, false)?;
    let oar_p_serial = sweep(CreditMethod::OarP, true)?;
    let rows = [
        ("vanilla", vanilla),
        ("oar_g", oar_g),
        ("oar_p_batched", oar_p_batched),
        ("oar_p_serial", oar_p_serial),
    ];
    Ok(rows
        .into_iter()
        .map(|(variant, s)| TimingRow {
            variant: variant.to_string(),
            seconds_per_token: s,
            normalized: s / vanilla,
        })
        .collect())
}

/// Collects greedy (deterministic) correct trajectories for the oracle
/// and recall studies, sampling tasks until `n` hits or the seed budget
/// runs out.
pub fn correct_trajectories(
    params: &ModelParams,
    n: usize,
    max_new: usize,
    difficulty: (u32, u32),
    seed: u64,
    max_attempts: usize,
) -> Result<Vec<(TaskInstance, Trajectory)>> {
    let mut out = Vec::new();
    for i in 0..max_attempts {
        if out.len() >= n {
            break;
        }
        let task_seed = rng::substream(seed, "eval-task", i as u64).gen::<u64>();
        let d = difficulty.0 + (i as u64 % (difficulty.1 - difficulty.0 + 1) as u64) as u32;
        let task = tasks::generate_task(task_seed, d)?;
        let mut r = rng::substream(seed, "eval-sample", i as u64);
        let s = policy::sample(params, &task.prompt, 1.0, max_new, SampleMode::Stochastic, &mut r)?;
        let reward = tasks::compute_reward(&s.response, &task);
        if reward.accuracy == 1.0 {
            out.push((
                task,
                Trajectory {
                    response: s.response,
                    logprobs: s.logprobs,
                    entropies: s.entropies,
                    reward,
                },
            ));
        }
    }
    Ok(out)
}
