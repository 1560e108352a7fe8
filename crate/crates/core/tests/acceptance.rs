//! Acceptance gate: one test per release criterion, each printing a
//! single PASS/FAIL line (visible with --nocapture). Shared expensive
//! state — a warm-started, RL-trained toy checkpoint plus a corpus of
//! correct trajectories — is built once.

use oar_core::attribution::{self, AttributionMethod, ImportanceProfile, OutcomeProbe, ProbeKind};
use oar_core::evaluation::{self, OracleLabels};
use oar_core::numerics::{finite_difference_check, Graph, Tensor};
use oar_core::policy::{ModelParams, PolicyConfig, SequenceEmbeddings};
use oar_core::reshaping::{self, GatingConfig};
use oar_core::rng;
use oar_core::tasks::{vocab, TaskInstance};
use oar_core::trainer::{self, CreditMethod, StepLog, TrainConfig, Trajectory};
use rand::Rng;
use std::panic::AssertUnwindSafe;
use std::sync::OnceLock;
use std::time::Instant;

fn criterion<F: FnOnce()>(num: u32, name: &str, f: F) {
    let t0 = Instant::now();
    let result = std::panic::catch_unwind(AssertUnwindSafe(f));
    let secs = t0.elapsed().as_secs_f64();
    match result {
        Ok(()) => println!("ACCEPTANCE {num:02} {name}: PASS ({secs:.1}s)"),
        Err(e) => {
            println!("ACCEPTANCE {num:02} {name}: FAIL ({secs:.1}s)");
            std::panic::resume_unwind(e);
        }
    }
}

// ── shared fixture ───────────────────────────────────────────────────────

const SFT_STEPS: usize = 2000;
const RL_STEPS: usize = 100;
const MAX_NEW: usize = 64;
const DIFFICULTY: (u32, u32) = (1, 1);

fn toy_model_cfg() -> PolicyConfig {
    PolicyConfig {
        vocab_size: vocab::USED,
        d_model: 48,
        n_layers: 4,
        n_heads: 4,
        max_seq_len: 96,
        pad_id: vocab::PAD,
        bos_id: vocab::BOS,
        eos_id: vocab::EOS,
    }
}

fn warm_start(seed: u64) -> ModelParams {
    let mut params = ModelParams::init(&toy_model_cfg(), seed).unwrap();
    trainer::sft_warmstart(&mut params, SFT_STEPS, 8, 1e-3, seed, DIFFICULTY).unwrap();
    params
}

fn rl_config(credit: CreditMethod, seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps: RL_STEPS,
        max_new_tokens: MAX_NEW,
        difficulty_max: DIFFICULTY.1,
        credit,
        seed,
        ..Default::default()
    }
}

struct Fixture {
    warm0: ModelParams,
    /// warm0 plus a vanilla GRPO run.
    trained: ModelParams,
    vanilla_logs: Vec<StepLog>,
    /// >= 100 sampled trajectories with correct final answers.
    corpus: Vec<(TaskInstance, Trajectory)>,
    labels: Vec<OracleLabels>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let warm0 = warm_start(0);
        let mut trained = warm0.clone();
        let vanilla_logs =
            trainer::train(&mut trained, &rl_config(CreditMethod::Vanilla, 0), |_, _| Ok(()))
                .unwrap();
        let corpus =
            evaluation::correct_trajectories(&trained, 100, MAX_NEW, DIFFICULTY, 11, 800).unwrap();
        assert!(corpus.len() >= 100, "only {} correct trajectories", corpus.len());
        let labels = corpus
            .iter()
            .map(|(task, traj)| {
                evaluation::oracle_label(&trained, task, &traj.response, MAX_NEW).unwrap()
            })
            .collect();
        Fixture { warm0, trained, vanilla_logs, corpus, labels }
    })
}

fn probe() -> OutcomeProbe {
    OutcomeProbe::new(ProbeKind::AsMean, true)
}

// ── 1: advantage normalization ───────────────────────────────────────────

#[test]
fn criterion_01_advantage_normalization() {
    criterion(1, "advantage normalization", || {
        let mut r = rng::substream(1, "accept-adv", 0);
        let mut non_degenerate = 0;
        for _ in 0..1000 {
            let rewards: Vec<f64> = (0..8).map(|_| r.gen::<f64>() * 1.1).collect();
            let (adv, degenerate) = reshaping::normalize_group_rewards(&rewards).unwrap();
            if degenerate {
                continue;
            }
            non_degenerate += 1;
            let mean = adv.iter().sum::<f64>() / adv.len() as f64;
            assert!(mean.abs() <= 1e-9, "group mean {mean}");
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64;
            assert!((var.sqrt() - 1.0).abs() <= 1e-6, "group std {}", var.sqrt());
        }
        assert!(non_degenerate >= 990);

        let (adv, degenerate) = reshaping::normalize_group_rewards(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!degenerate);
        let s3 = 3f64.sqrt();
        let expect = [s3, -1.0 / s3, -1.0 / s3, -1.0 / s3];
        for (a, e) in adv.iter().zip(expect) {
            assert!((a - e).abs() <= 1e-9, "{a} vs {e}");
        }
    });
}

// ── 2: sum preservation ──────────────────────────────────────────────────

#[test]
fn criterion_02_sum_preservation() {
    criterion(2, "sum preservation", || {
        let mut r = rng::substream(2, "accept-sum", 0);
        for _ in 0..10_000 {
            let t = r.gen_range(1..=128usize);
            let i_hat: Vec<f64> = (0..t).map(|_| r.gen::<f64>()).collect();
            let cfg = GatingConfig {
                tau: r.gen::<f64>(),
                beta: r.gen::<f64>() * 4.0,
                ..GatingConfig::default()
            };
            let out = reshaping::reshape(1.0, &i_hat, &cfg, false).unwrap();
            let sum: f64 = out.omega_tilde.iter().sum();
            assert!(
                (sum - t as f64).abs() <= 1e-6 * t as f64,
                "sum {sum} vs T {t} (tau {} beta {})",
                cfg.tau,
                cfg.beta
            );
        }
        // degenerate profile -> uniform fallback, exactly mass T
        let out =
            reshaping::reshape(0.5, &[0.0; 16], &GatingConfig::default(), true).unwrap();
        assert!(out.uniform_fallback);
        assert!(out.omega_tilde.iter().all(|&w| w == 1.0));
    });
}

// ── 3: gate correctness ──────────────────────────────────────────────────

#[test]
fn criterion_03_gate_correctness() {
    criterion(3, "gate correctness", || {
        for tau in (1..=9).map(|i| i as f64 / 10.0) {
            for beta in [0.5, 2.0, 4.0] {
                let cfg = GatingConfig { tau, beta, ..GatingConfig::default() };
                assert_eq!(reshaping::gate(tau, &cfg, tau), 1.0, "gate(tau) must be exactly 1");
                let below = reshaping::gate(tau - 1e-12, &cfg, tau);
                assert!((below - 1.0).abs() <= 1e-6, "jump {} at tau {tau}", (below - 1.0).abs());
                let mut prev = f64::MIN;
                for i in 0..=1000 {
                    let w = reshaping::gate(i as f64 / 1000.0, &cfg, tau);
                    assert!(w >= prev - 1e-15, "non-monotone at {} tau {tau}", i as f64 / 1000.0);
                    prev = w;
                }
            }
        }
        let cfg = GatingConfig { tau: 0.4, beta: 2.0, ..GatingConfig::default() };
        assert!((reshaping::gate(0.2, &cfg, 0.4) - 0.5).abs() <= 1e-5);
        assert!((reshaping::gate(1.0, &cfg, 0.4) - 3.0).abs() <= 1e-5);
    });
}

// ── 4: gradient fidelity ─────────────────────────────────────────────────

#[test]
fn criterion_04_gradient_fidelity() {
    criterion(4, "gradient fidelity", || {
        type OpCase = (&'static str, fn(&mut Graph, oar_core::NodeId) -> oar_core::NodeId);
        let cases: Vec<OpCase> = vec![
            ("add", |g, x| {
                let c = g.constant(Tensor::new(vec![4, 6], (0..24).map(|i| i as f64 * 0.1).collect()));
                let y = g.add(x, c);
                g.mean(y)
            }),
            ("sub", |g, x| {
                let c = g.constant(Tensor::new(vec![4, 6], vec![0.3; 24]));
                let y = g.sub(x, c);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("mul", |g, x| {
                let y = g.mul(x, x);
                g.sum(y)
            }),
            ("scale", |g, x| {
                let y = g.scale(x, -1.7);
                let y = g.exp(y);
                g.mean(y)
            }),
            ("add_scalar", |g, x| {
                let y = g.add_scalar(x, 0.25);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("add_row", |g, x| {
                let row = g.constant(Tensor::new(vec![6], vec![0.5, -0.5, 1.0, 0.0, 0.2, -0.2]));
                let y = g.add_row(x, row);
                let y = g.gelu(y);
                g.mean(y)
            }),
            ("matmul", |g, x| {
                let w = g.constant(Tensor::new(vec![6, 3], (0..18).map(|i| (i as f64 - 9.0) * 0.1).collect()));
                let y = g.matmul(x, w);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("matmul_nt", |g, x| {
                let w = g.constant(Tensor::new(vec![5, 6], (0..30).map(|i| (i as f64 - 15.0) * 0.07).collect()));
                let y = g.matmul_nt(x, w);
                let y = g.gelu(y);
                g.mean(y)
            }),
            ("gather_rows", |g, x| {
                let y = g.gather_rows(x, &[3, 1, 1, 0]);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("select_rows", |g, x| {
                let y = g.select_rows(x, &[2, 0]);
                let y = g.exp(y);
                g.mean(y)
            }),
            ("concat_rows", |g, x| {
                let a = g.select_rows(x, &[0, 1]);
                let b = g.select_rows(x, &[2, 3]);
                let y = g.concat_rows(&[b, a]);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("slice_cols", |g, x| {
                let y = g.slice_cols(x, 1, 3);
                let y = g.gelu(y);
                g.sum(y)
            }),
            ("concat_cols", |g, x| {
                let a = g.slice_cols(x, 0, 2);
                let b = g.slice_cols(x, 2, 4);
                let y = g.concat_cols(&[b, a]);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("softmax_rows", |g, x| {
                let y = g.softmax_rows(x);
                let y = g.mul(y, y);
                g.sum(y)
            }),
            ("log_softmax_rows", |g, x| {
                let y = g.log_softmax_rows(x);
                let p = g.pick_per_row(y, &[0, 2, 4, 1]);
                g.mean(p)
            }),
            ("layer_norm", |g, x| {
                let gain = g.constant(Tensor::new(vec![6], vec![1.1, 0.9, 1.0, 1.2, 0.8, 1.0]));
                let bias = g.constant(Tensor::new(vec![6], vec![0.1; 6]));
                let y = g.layer_norm(x, gain, bias, 1e-5);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("gelu", |g, x| {
                let y = g.gelu(x);
                g.sum(y)
            }),
            ("exp", |g, x| {
                let y = g.exp(x);
                g.mean(y)
            }),
            ("clamp", |g, x| {
                let y = g.clamp(x, -0.8, 0.8);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("min_elem", |g, x| {
                let c = g.constant(Tensor::new(vec![4, 6], (0..24).map(|i| (i as f64 - 12.0) * 0.05).collect()));
                let y = g.min_elem(x, c);
                g.mean(y)
            }),
            ("pick_per_row", |g, x| {
                let p = g.pick_per_row(x, &[5, 0, 3, 2]);
                let y = g.mul(p, p);
                g.sum(y)
            }),
            ("sum", |g, x| {
                let y = g.mul(x, x);
                g.sum(y)
            }),
            ("mean", |g, x| g.mean(x)),
            ("mean_rows", |g, x| {
                let y = g.mean_rows(x);
                let y = g.mul(y, y);
                g.sum(y)
            }),
        ];
        for seed in 0..20u64 {
            let mut r = rng::substream(seed, "accept-fd", 0);
            let x = Tensor::new(vec![4, 6], (0..24).map(|_| rng::standard_normal(&mut r) * 0.7).collect());
            for (name, f) in &cases {
                let rel = finite_difference_check(f, &x, 1e-6).unwrap();
                assert!(rel < 1e-4, "op {name} seed {seed} rel err {rel}");
            }
        }

        // directional finite-difference on the trained checkpoint's OAR-G
        let fx = fixture();
        let d = fx.trained.cfg.d_model;
        let mut checked = 0;
        'outer: for (i, (task, traj)) in fx.corpus.iter().enumerate() {
            let sigma = attribution::default_sigma(&fx.trained, &task.prompt, &traj.response);
            let r = attribution::oar_g_detailed(
                &fx.trained,
                &task.prompt,
                &traj.response,
                &probe(),
                sigma,
                100 + i as u64,
            )
            .unwrap();
            let h = 1e-5;
            for t in 0..traj.response.len() {
                let e_t = &r.clean_emb[t * d..(t + 1) * d];
                let norm = e_t.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 =
                    r.grad[t * d..(t + 1) * d].iter().zip(e_t).map(|(&g, &e)| g * e).sum();
                if norm < 1e-9 || dot.abs() < 1e-8 {
                    continue;
                }
                let mut shifted = r.noisy_emb.clone();
                for (sv, &ev) in shifted[t * d..(t + 1) * d].iter_mut().zip(e_t) {
                    *sv += h * ev / norm;
                }
                let emb = SequenceEmbeddings { d_model: d, data: shifted };
                let j1 = attribution::oar_g_objective(
                    &fx.trained,
                    &task.prompt,
                    &traj.response,
                    &probe(),
                    &emb,
                )
                .unwrap();
                let predicted = dot * h / norm;
                let actual = j1 - r.objective;
                let rel = (actual - predicted).abs() / predicted.abs().max(1e-12);
                assert!(rel < 0.1, "traj {i} t {t} rel {rel}");
                checked += 1;
                if checked >= 20 {
                    break 'outer;
                }
            }
        }
        assert!(checked >= 20, "only {checked} checkable positions");
    });
}

// ── 5: OAR-P batched/serial equivalence ──────────────────────────────────

#[test]
fn criterion_05_oar_p_bit_equivalence() {
    criterion(5, "oar-p batched/serial bit equivalence", || {
        let fx = fixture();
        for (task, traj) in fx.corpus.iter().take(50) {
            let serial = attribution::oar_p_scores_serial(
                &fx.trained,
                &task.prompt,
                &traj.response,
                &probe(),
            )
            .unwrap();
            let batched = attribution::oar_p_scores(
                &fx.trained,
                &task.prompt,
                &traj.response,
                &probe(),
                TrainConfig::default().batch_budget,
            )
            .unwrap();
            assert_eq!(serial.len(), batched.len());
            for (a, b) in serial.iter().zip(&batched) {
                assert_eq!(a.to_bits(), b.to_bits(), "bit mismatch {a} vs {b}");
            }
        }
    });
}

// ── 6: Pinsker bound ─────────────────────────────────────────────────────

#[test]
fn criterion_06_pinsker_bound() {
    criterion(6, "pinsker bound", || {
        let fx = fixture();
        let mut r = rng::substream(6, "accept-pinsker", 0);
        let mut triples = 0;
        'outer: for (task, traj) in &fx.corpus {
            let pairs = attribution::oar_p_distribution_pairs(
                &fx.trained,
                &task.prompt,
                &traj.response,
                &probe(),
            )
            .unwrap();
            for (_, p, q, _) in pairs {
                let event: Vec<bool> = (0..p.probs.len()).map(|_| r.gen::<bool>()).collect();
                let ps: f64 = p.probs.iter().zip(&event).filter(|(_, &e)| e).map(|(v, _)| v).sum();
                let qs: f64 = q.probs.iter().zip(&event).filter(|(_, &e)| e).map(|(v, _)| v).sum();
                let kl: f64 = p
                    .probs
                    .iter()
                    .zip(&q.probs)
                    .filter(|(&pv, _)| pv > 0.0)
                    .map(|(&pv, &qv)| pv * (pv / qv).ln())
                    .sum();
                assert!(
                    (ps - qs).abs() <= (kl / 2.0).sqrt() + 1e-9,
                    "tv {} kl {kl}",
                    (ps - qs).abs()
                );
                triples += 1;
                if triples >= 1000 {
                    break 'outer;
                }
            }
        }
        assert!(triples >= 1000, "only {triples} triples available");
    });
}

// ── 7: noise suppression ─────────────────────────────────────────────────

#[test]
fn criterion_07_noise_suppression() {
    criterion(7, "noise suppression", || {
        let fx = fixture();
        let cfg = rl_config(CreditMethod::Vanilla, 0);
        let mut r = rng::substream(7, "accept-noise", 0);
        for (task, traj) in fx.corpus.iter().take(20) {
            let t_len = traj.response.len();
            let k = r.gen_range(0..t_len);
            let adv: Vec<f64> = (0..t_len).map(|_| rng::standard_normal(&mut r)).collect();
            let mut zeroed = adv.clone();
            zeroed[k] = 0.0; // omega_tilde_k forced to zero
            let mut include = vec![true; t_len];
            include[k] = false;

            let mut acc_zero = trainer::grad_buffers(&fx.trained);
            trainer::accumulate_policy_gradients(
                &fx.trained,
                &task.prompt,
                &traj.response,
                &traj.logprobs,
                &zeroed,
                &cfg,
                None,
                1.0,
                &mut acc_zero,
            )
            .unwrap();
            let mut acc_del = trainer::grad_buffers(&fx.trained);
            trainer::accumulate_policy_gradients(
                &fx.trained,
                &task.prompt,
                &traj.response,
                &traj.logprobs,
                &adv,
                &cfg,
                Some(&include),
                1.0,
                &mut acc_del,
            )
            .unwrap();
            for (gz, gd) in acc_zero.iter().flatten().zip(acc_del.iter().flatten()) {
                assert!((gz - gd).abs() <= 1e-12, "grad mismatch {gz} vs {gd}");
            }
        }
    });
}

// ── 8: oracle & recall ───────────────────────────────────────────────────

fn corpus_importance(fx: &Fixture, method: AttributionMethod) -> Vec<Vec<f64>> {
    let cfg = rl_config(CreditMethod::Vanilla, 0);
    fx.corpus
        .iter()
        .enumerate()
        .map(|(i, (task, traj))| {
            let raw = match method {
                AttributionMethod::OarP => attribution::oar_p_scores(
                    &fx.trained,
                    &task.prompt,
                    &traj.response,
                    &probe(),
                    cfg.batch_budget,
                )
                .unwrap(),
                AttributionMethod::OarG => {
                    let sigma =
                        attribution::default_sigma(&fx.trained, &task.prompt, &traj.response);
                    attribution::oar_g_scores(
                        &fx.trained,
                        &task.prompt,
                        &traj.response,
                        &probe(),
                        sigma,
                        i as u64,
                        1,
                    )
                    .unwrap()
                }
                AttributionMethod::Entropy => attribution::entropy_scores(
                    &fx.trained,
                    &task.prompt,
                    &traj.response,
                    cfg.temperature,
                )
                .unwrap(),
                AttributionMethod::Random => {
                    attribution::random_scores(traj.response.len(), i as u64).unwrap()
                }
            };
            ImportanceProfile::from_raw(method, Some(probe().kind), raw).unwrap().i_hat
        })
        .collect()
}

#[test]
fn criterion_08_oracle_and_recall() {
    criterion(8, "oracle & recall", || {
        let fx = fixture();
        assert!(fx.corpus.len() >= 100);
        let grid: Vec<f64> = (1..=20).map(|k| k as f64 * 5.0).collect();

        let oar_p = evaluation::recall_curve(&fx.labels, &corpus_importance(fx, AttributionMethod::OarP), &grid).unwrap();
        for w in oar_p.recall.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "recall not monotone in K");
        }
        let at20 = oar_p.recall[3]; // grid[3] == 20.0

        // Monte-Carlo random baseline
        let reps = 200;
        let mut vals = Vec::with_capacity(reps);
        for rep in 0..reps as u64 {
            let imp: Vec<Vec<f64>> = fx
                .corpus
                .iter()
                .enumerate()
                .map(|(i, (_, traj))| {
                    let raw =
                        attribution::random_scores(traj.response.len(), rep * 1009 + i as u64)
                            .unwrap();
                    ImportanceProfile::from_raw(AttributionMethod::Random, None, raw)
                        .unwrap()
                        .i_hat
                })
                .collect();
            vals.push(evaluation::recall_curve(&fx.labels, &imp, &[20.0]).unwrap().recall[0]);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64)
            .sqrt();
        assert!(
            at20 >= mean + 0.10,
            "oar-p recall@20 {at20:.3} vs random {mean:.3} (+{:.3})",
            at20 - mean
        );
        assert!(
            (mean - 0.20).abs() <= 3.0 * sd,
            "random recall {mean:.3} outside 3-sigma band of 0.20 (sd {sd:.4})"
        );

        // trend report (non-blocking): oar_p >= oar_g > entropy
        let g20 = evaluation::recall_curve(&fx.labels, &corpus_importance(fx, AttributionMethod::OarG), &[20.0]).unwrap().recall[0];
        let e20 = evaluation::recall_curve(&fx.labels, &corpus_importance(fx, AttributionMethod::Entropy), &[20.0]).unwrap().recall[0];
        println!(
            "  recall@20: oar_p {at20:.3} oar_g {g20:.3} entropy {e20:.3} random {mean:.3} | trend oar_p>=oar_g>entropy: {}",
            at20 >= g20 && g20 > e20
        );
    });
}

// ── 9: credit concentration ──────────────────────────────────────────────

#[test]
fn criterion_09_credit_concentration() {
    criterion(9, "credit concentration", || {
        let fx = fixture();
        for log in &fx.vanilla_logs {
            assert_eq!(log.mean_ess_ratio, 1.0, "vanilla ess at step {}", log.step);
        }

        let cfg = rl_config(CreditMethod::OarP, 0);
        let mut non_degenerate = 0;
        for (i, (task, traj)) in fx.corpus.iter().take(20).enumerate() {
            let credit =
                trainer::assign_credit(&fx.trained, task, traj, 0.8, &cfg, i as u64).unwrap();
            let profile = credit.profile.expect("oar-p always yields a profile");
            if profile.degenerate {
                continue;
            }
            non_degenerate += 1;
            let (ess, _) = reshaping::credit_metrics(&credit.weights).unwrap();
            assert!(ess < 1.0, "ess {ess} with non-degenerate profile");
        }
        assert!(non_degenerate > 0);

        let (ess, top10) = reshaping::credit_metrics(&vec![1.0; 50]).unwrap();
        assert!((ess - 1.0).abs() <= 1e-12);
        assert!((top10 - 0.1).abs() <= 1e-9, "uniform top10 mass {top10}");
    });
}

// ── 10: end-to-end seeded training ───────────────────────────────────────

#[test]
fn criterion_10_end_to_end_training() {
    criterion(10, "end-to-end seeded training", || {
        let fx = fixture();
        let heldout = trainer::heldout_tasks(999, 192, DIFFICULTY).unwrap();
        let seeds = [0u64, 1, 2];
        let mut warm_acc = Vec::new();
        let mut warms = Vec::new();
        for &seed in &seeds {
            let warm = if seed == 0 { fx.warm0.clone() } else { warm_start(seed) };
            let (acc, fmt, _) = trainer::evaluate_greedy(&warm, &heldout, MAX_NEW).unwrap();
            assert!(fmt >= 0.9, "seed {seed} warm-start format {fmt}");
            warm_acc.push(acc);
            warms.push(warm);
        }
        let warm_mean = warm_acc.iter().sum::<f64>() / 3.0;

        let mut method_mean = std::collections::BTreeMap::new();
        for method in CreditMethod::ALL {
            let mut accs = Vec::new();
            for (si, &seed) in seeds.iter().enumerate() {
                let final_params = if method == CreditMethod::Vanilla && seed == 0 {
                    fx.trained.clone()
                } else {
                    let mut p = warms[si].clone();
                    trainer::train(&mut p, &rl_config(method, seed), |_, _| Ok(())).unwrap();
                    p
                };
                let (acc, _, _) = trainer::evaluate_greedy(&final_params, &heldout, MAX_NEW).unwrap();
                accs.push(acc);
            }
            let mean = accs.iter().sum::<f64>() / 3.0;
            println!(
                "  {}: warm {warm_mean:.3} -> final {mean:.3} (seeds {:?})",
                method.name(),
                accs
            );
            assert!(
                mean > warm_mean,
                "{} did not improve over warm-start ({mean:.3} vs {warm_mean:.3})",
                method.name()
            );
            method_mean.insert(method.name(), mean);
        }
        let vanilla = method_mean["vanilla"];
        let oar_g = method_mean["oar_g"];
        assert!(
            oar_g >= vanilla - 0.02,
            "oar_g {oar_g:.3} below vanilla {vanilla:.3} - 0.02"
        );
    });
}

// ── 11: variance simulation ──────────────────────────────────────────────

#[test]
fn criterion_11_variance_simulation() {
    criterion(11, "variance simulation", || {
        let v = evaluation::variance_sim(50, 10_000, 42).unwrap();
        assert!(
            (v.ratio - 50.0).abs() <= 0.15 * 50.0,
            "Var(A)/Var(a_t) = {:.2}, expected within 15% of 50",
            v.ratio
        );
    });
}

// ── 12: timing study ─────────────────────────────────────────────────────

#[test]
fn criterion_12_timing_study() {
    criterion(12, "timing study", || {
        let fx = fixture();
        let cfg = rl_config(CreditMethod::Vanilla, 0);
        let batch = trainer::step_tasks(&cfg, 0).unwrap();
        let groups = trainer::collect_rollouts(&fx.trained, &batch, &cfg, 0).unwrap();
        let rows = evaluation::profile_time_per_token(&fx.trained, &cfg, &groups).unwrap();
        let by = |n: &str| rows.iter().find(|r| r.variant == n).unwrap().seconds_per_token;
        let (v, g, pb, ps) = (by("vanilla"), by("oar_g"), by("oar_p_batched"), by("oar_p_serial"));
        println!(
            "  time/token multiples vs vanilla: oar_g {:.2}x, oar_p_batched {:.2}x, oar_p_serial {:.2}x",
            g / v,
            pb / v,
            ps / v
        );
        assert!(ps >= pb, "serial {ps} < batched {pb}");
        assert!(pb >= g, "batched {pb} < oar_g {g}");
        assert!(g >= v, "oar_g {g} < vanilla {v}");
    });
}
