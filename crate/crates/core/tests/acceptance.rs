//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits non-zero if any fails.
//!
//! The training experiments use a small network (two hidden layers of 32,
//! batch 32) so the whole suite fits on one CPU core; everything else runs
//! with the default configuration.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racelab::controllers::ControllerKind;
use racelab::env::{
    update_curriculum, ActionMode, CurriculumState, CurriculumTraceEntry, FilterEvent, FilterTraceEntry, RaceEnv,
    TerminalCause, CURRICULUM_ALPHA_MAX, CURRICULUM_LAPS, CURRICULUM_STEP,
};
use racelab::experiment::{self, AblationRow, AblationRun, ExperimentConfig, ABLATION_VARIANTS};
use racelab::nn::{GaussianHead, Mlp};
use racelab::orchestrator::{run_training, AsyncScheduling, RunMode, TrainingOptions, TrainingReport};
use racelab::plant::{integrate, lateral_tire_force, TirePreset, VehicleParams, VehicleState};
use racelab::sac::{ReplayBuffer, SacConfig, SacLearner, Transition};
use racelab::track::{bundled, wrap_angle, FrenetPose};

/// Collects failed checks for one criterion.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn ensure(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(msg());
        }
    }

    fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }
}

/// Heavy runs shared between criteria.
#[derive(Default)]
struct Shared {
    filter_traces: Vec<(String, Vec<FilterTraceEntry>)>,
    e2e_reports: Vec<TrainingReport>,
    rl_checkpoint: Option<PathBuf>,
}

fn desk_scale(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.sac.hidden_size = 32;
    cfg.sac.batch_size = 32;
    cfg.trace_every_episodes = 0;
    cfg
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

/// Central differences of `f` over the flattened parameters of `net`.
fn numeric_grad(net: &Mlp, mut f: impl FnMut(&Mlp) -> f64) -> Vec<f64> {
    let sizes = net.layer_sizes();
    let flat = net.to_flat();
    let h = 1e-6;
    (0..flat.len())
        .map(|i| {
            let mut p = flat.clone();
            p[i] += h;
            let up = f(&Mlp::from_flat(&sizes, &p).unwrap());
            p[i] -= 2.0 * h;
            let down = f(&Mlp::from_flat(&sizes, &p).unwrap());
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn residual_env(kind: ControllerKind) -> RaceEnv {
    let cfg = ExperimentConfig { controller: kind, ..Default::default() };
    cfg.build_env(cfg.load_track().unwrap(), false).unwrap()
}

fn e2e_env() -> RaceEnv {
    let cfg = ExperimentConfig { mode: ActionMode::E2e, controller: ControllerKind::None, ..Default::default() };
    cfg.build_env(cfg.load_track().unwrap(), false).unwrap()
}

/// Drives `env` with uniformly random normalized actions, recovering after
/// every terminal, and hands each step to `visit`.
fn fuzz(env: &mut RaceEnv, steps: usize, seed: u64, mut visit: impl FnMut(&RaceEnv, &[f64], [f64; 2], &racelab::env::StepResult, u64)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(seed);
    for _ in 0..steps {
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let episode = env.episode_id();
        let r = env.step(env.action_box().denormalize(a));
        visit(env, &obs, a, &r, episode);
        obs = r.observation.clone();
        if r.terminal {
            obs = env.run_recovery().0;
        }
    }
}

// ---------------------------------------------------------------------------

fn ac1_properties(c: &mut Checks) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Frenet round trip
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for track in [bundled::c_like(), bundled::y_like()] {
        let l = track.total_length();
        for _ in 0..500 {
            let s = rng.random_range(0.0..l);
            let (wl, wr) = track.widths_at(s);
            let n = rng.random_range(-0.9 * wr..0.9 * wl);
            let mu = rng.random_range(-1.0..1.0);
            let (x, y, psi) = track.frenet_to_global(FrenetPose::new(s, n, mu));
            let back = track.global_to_frenet(x, y, psi, None).unwrap();
            let ds = (back.s - s).rem_euclid(l);
            worst.0 = worst.0.max(ds.min(l - ds));
            worst.1 = worst.1.max((back.n - n).abs());
            worst.2 = worst.2.max(wrap_angle(back.mu - mu).abs());
        }
    }
    c.ensure(worst.0 < 1e-3 && worst.1 < 1e-3 && worst.2 < 1e-3, || format!("Frenet round trip error {worst:?}"));

    // Pacejka oddness and zero slip
    for preset in [TirePreset::Turbo, TirePreset::Tpu] {
        let p = VehicleParams::with_preset(preset);
        for coeffs in [p.pacejka_front, p.pacejka_rear] {
            c.ensure(lateral_tire_force(&coeffs, p.mu_friction, 0.0) == 0.0, || "F_y(0) != 0".into());
            for i in 1..=200 {
                let a = i as f64 * 0.005;
                let (fp, fm) = (lateral_tire_force(&coeffs, p.mu_friction, a), lateral_tire_force(&coeffs, p.mu_friction, -a));
                c.ensure((fp + fm).abs() <= 1e-12 * fp.abs(), || format!("Pacejka not odd at {a}: {fp} vs {fm}"));
            }
        }
    }

    // RK4 Richardson order
    let params = VehicleParams::default();
    let x0 = VehicleState { s: 1.0, n: 0.1, mu: 0.05, v_x: 4.0, v_y: 0.2, r: 1.0, delta: 0.1 };
    let kappa = |s: f64| 0.3 + 0.1 * s.sin();
    let run = |h: f64, steps: usize| {
        let mut x = x0;
        for _ in 0..steps {
            x = integrate(&x, 1.0, 0.1, &params, kappa, h).unwrap();
        }
        [x.s, x.n, x.mu, x.v_x, x.v_y, x.r]
    };
    // one-second manoeuvre at dt and dt/2, both measured against dt/16
    let dt = 0.02;
    let steps = (1.0 / dt) as usize;
    let reference = run(dt / 16.0, steps * 16);
    let err = |x: [f64; 6]| x.iter().zip(&reference).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let (e1, e2) = (err(run(dt, steps)), err(run(dt / 2.0, steps * 2)));
    let order = (e1 / e2).log2();
    c.note(format!("RK4 observed order {order:.3}"));
    c.ensure((3.8..=4.2).contains(&order), || format!("RK4 observed order {order}"));

    // n-step returns against brute force on a recorded run
    let mut env = residual_env(ControllerKind::Map);
    let mut log: Vec<Transition> = Vec::new();
    fuzz(&mut env, 1000, 5, |_, obs, a, r, ep| {
        log.push(Transition {
            obs: obs.to_vec(),
            action: a.to_vec(),
            reward: r.reward,
            next_obs: r.observation.clone(),
            terminal: r.terminal,
            episode_id: ep,
        })
    });
    let terminals = log.iter().filter(|t| t.terminal).count();
    c.note(format!("recorded run: {terminals} terminals"));
    let gamma = 0.96;
    for capacity in [2000, 701] {
        let mut buf = ReplayBuffer::new(capacity, env.observation_dim(), 2);
        for t in &log {
            buf.push(t.clone());
        }
        for n in [1usize, 3, 5] {
            let idx: Vec<u64> = (buf.oldest()..buf.pushed()).collect();
            let batch = buf.gather(&idx, n, gamma);
            for (row, &i) in idx.iter().enumerate() {
                let (mut g, mut disc, mut last, mut done) = (0.0, 1.0, i as usize, false);
                for j in 0..n {
                    let k = i as usize + j;
                    if k >= log.len() || log[k].episode_id != log[i as usize].episode_id {
                        break;
                    }
                    g += disc * log[k].reward;
                    disc *= gamma;
                    last = k;
                    if log[k].terminal {
                        done = true;
                        break;
                    }
                }
                let ok = batch.returns[row] == g
                    && batch.gamma_k[row] == disc
                    && (batch.done[row] == 1.0) == done
                    && batch.next_obs.row(row).to_vec() == log[last].next_obs
                    && batch.obs.row(row).to_vec() == log[i as usize].obs
                    && batch.actions.row(row).to_vec() == log[i as usize].action;
                c.ensure(ok, || format!("n-step mismatch at {i} (n={n}, capacity {capacity})"));
            }
        }
    }

    // HDRA against an event-log oracle
    for (capacity, steps, penalty, seed) in [(257usize, 10usize, 10.0, 1u64), (64, 7, 3.5, 2), (5000, 10, 10.0, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new(capacity, 1, 1);
        let (mut rewards, mut episodes): (Vec<f64>, Vec<u64>) = (Vec::new(), Vec::new());
        let mut episode = 0;
        for _ in 0..4000 {
            let terminal = rng.random_bool(0.03);
            let reward = if terminal { 0.0 } else { rng.random_range(-1.0..1.0) };
            buf.push(Transition { obs: vec![0.0], action: vec![0.0], reward, next_obs: vec![0.0], terminal, episode_id: episode });
            rewards.push(reward);
            episodes.push(episode);
            let current = rewards.len() - 1;
            if terminal {
                buf.apply_hdra(current as u64, steps, penalty);
                let oldest = rewards.len().saturating_sub(capacity);
                for n in 0..steps {
                    let Some(i) = current.checked_sub(n) else { break };
                    if i < oldest || episodes[i] != episode {
                        break;
                    }
                    rewards[i] -= penalty - n as f64 * penalty / steps as f64;
                }
            }
            if terminal || rng.random_bool(0.01) {
                episode += 1;
            }
        }
        let oldest = rewards.len().saturating_sub(capacity);
        c.ensure(buf.rewards_in_order() == rewards[oldest..], || format!("HDRA buffer state differs (capacity {capacity})"));
    }

    // gradient checks
    let mut worst_grad = 0.0f64;
    let mut record = |name: &str, a: &[f64], n: &[f64], c: &mut Checks| {
        let e = rel_l2(a, n);
        worst_grad = worst_grad.max(e);
        c.ensure(e <= 1e-4, || format!("{name} gradient relative error {e:e}"));
    };

    let net = Mlp::new(&[5, 7, 6, 3], &mut rng);
    let x = random_matrix(&mut rng, 4, 5);
    let w = random_matrix(&mut rng, 4, 3);
    let loss = |m: &Mlp, x: &Array2<f64>| (&m.forward_batch(x.view()).unwrap() * &w).sum();
    let cache = net.forward_cached(x.view()).unwrap();
    let (g, gx) = net.backward(&cache, w.view()).unwrap();
    record("MLP parameter", &g.to_flat(), &numeric_grad(&net, |m| loss(m, &x)), c);
    let h = 1e-6;
    let num_x: Vec<f64> = (0..x.len())
        .map(|k| {
            let (i, j) = (k / 5, k % 5);
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let up = loss(&net, &xp);
            xp[[i, j]] -= 2.0 * h;
            (up - loss(&net, &xp)) / (2.0 * h)
        })
        .collect();
    record("MLP input", &gx.iter().copied().collect::<Vec<_>>(), &num_x, c);

    let head = GaussianHead { low: vec![-0.15, -0.5], high: vec![0.15, 2.0] };
    for _ in 0..20 {
        let mean: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
        let log_std: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..1.0)).collect();
        let noise: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (cs, cl) = ([0.7, -1.3], 0.4);
        let obj = |m: &[f64], l: &[f64]| {
            let s = head.sample_squashed(m, l, &noise);
            cs[0] * s.squashed[0] + cs[1] * s.squashed[1] + cl * s.log_prob
        };
        let s = head.sample_squashed(&mean, &log_std, &noise);
        let (dm, dl) = head.backward(&s, &cs, cl);
        let fd = |which: usize, k: usize| {
            let (mut m, mut l) = (mean.clone(), log_std.clone());
            let v = if which == 0 { &mut m[k] } else { &mut l[k] };
            *v += h;
            let up = obj(&m, &l);
            let v = if which == 0 { &mut m[k] } else { &mut l[k] };
            *v -= 2.0 * h;
            (up - obj(&m, &l)) / (2.0 * h)
        };
        let analytic: Vec<f64> = dm.iter().chain(&dl).copied().collect();
        let numeric = vec![fd(0, 0), fd(0, 1), fd(1, 0), fd(1, 1)];
        record("squashed Gaussian", &analytic, &numeric, c);
    }

    let cfg = SacConfig { hidden: vec![8, 8], batch_size: 6, ..Default::default() };
    let mut learner = SacLearner::new(cfg, 6, 2, 3).unwrap();
    let mut buf = ReplayBuffer::new(100, 6, 2);
    for i in 0..40 {
        let v = |rng: &mut ChaCha8Rng, d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        buf.push(Transition {
            obs: v(&mut rng, 6),
            action: v(&mut rng, 2),
            reward: rng.random_range(-1.0..1.0),
            next_obs: v(&mut rng, 6),
            terminal: i % 13 == 12,
            episode_id: i / 13,
        });
    }
    // a few real updates so the critics and actor are not at initialization
    for _ in 0..5 {
        learner.update(&buf).unwrap();
    }
    let batch = buf.gather(&[0, 5, 11, 12, 20, 33], 3, 0.96);
    let noise = learner.draw_noise(6);
    let y = learner.critic_targets(&batch, 0.3, &noise).unwrap();
    let (_, g1, g2) = learner.critic_loss_and_grads(&batch, &y).unwrap();
    let mut probe = learner.clone();
    let n1 = numeric_grad(&learner.q1, |m| {
        probe.q1 = m.clone();
        probe.critic_loss_and_grads(&batch, &y).unwrap().0
    });
    record("critic Q1", &g1.to_flat(), &n1, c);
    let mut probe = learner.clone();
    let n2 = numeric_grad(&learner.q2, |m| {
        probe.q2 = m.clone();
        probe.critic_loss_and_grads(&batch, &y).unwrap().0
    });
    record("critic Q2", &g2.to_flat(), &n2, c);
    let obs = batch.obs.clone();
    let (_, ga, _) = learner.actor_loss_and_grads(obs.view(), &noise, 0.3).unwrap();
    let mut probe = learner.clone();
    let na = numeric_grad(&learner.actor, |m| {
        probe.actor = m.clone();
        probe.actor_loss_and_grads(obs.view(), &noise, 0.3).unwrap().0
    });
    record("actor", &ga.to_flat(), &na, c);
    c.note(format!("worst gradient relative error {worst_grad:.2e}"));

    let secs = started.elapsed().as_secs_f64();
    c.note(format!("{secs:.1}s"));
    c.ensure(secs < 120.0, || format!("property suite took {secs:.1}s"));
}

fn ac2_reward(c: &mut Checks) {
    let lambda = 10.0;
    let penalty = 10.0;

    // scripted clean laps with the base controller alone
    let mut env = residual_env(ControllerKind::Pp);
    env.reset(0);
    let l = env.track().total_length();
    let wrap = |d: f64| (d + 0.5 * l).rem_euclid(l) - 0.5 * l;
    let mut s_mark = env.state().s;
    let mut total = 0.0;
    let mut laps_seen = 0;
    while laps_seen < 3 {
        let r = env.step(racelab::plant::ControlInput::ZERO);
        c.ensure(!r.terminal, || "scripted lap hit a terminal".into());
        if r.terminal {
            return;
        }
        total += r.reward;
        if let Some(lap) = r.laps.first() {
            c.ensure(lap.clean, || "scripted lap not clean".into());
            // progress past the line at either end of the lap
            let expected = lambda * (l + wrap(r.info.s - s_mark));
            c.ensure((total - expected).abs() <= lambda * 0.01, || {
                format!("lap {laps_seen}: reward {total} vs lambda*length {expected}")
            });
            if laps_seen == 0 {
                c.note(format!("lap reward {total:.4} vs {:.4}", lambda * l));
            }
            total = 0.0;
            s_mark = r.info.s;
            laps_seen += 1;
        }
    }

    // exclusivity fuzz
    let mut counts = [0usize; 2];
    for (mut env, seed) in [(residual_env(ControllerKind::Map), 21u64), (e2e_env(), 22)] {
        fuzz(&mut env, 25_000, seed, |_, _, _, r, _| {
            if r.terminal {
                counts[0] += 1;
                c.ensure(r.reward == -penalty && r.terminal_cause != TerminalCause::None, || {
                    format!("terminal step reward {} cause {:?}", r.reward, r.terminal_cause)
                });
            } else {
                counts[1] += 1;
                c.ensure(r.reward == lambda * r.info.delta_s && r.terminal_cause == TerminalCause::None, || {
                    format!("progress step reward {} vs {}", r.reward, lambda * r.info.delta_s)
                });
            }
        });
    }
    c.note(format!("fuzz: {} terminal, {} progress steps", counts[0], counts[1]));
    c.ensure(counts[0] > 0 && counts[0] + counts[1] == 50_000, || format!("fuzz counts {counts:?}"));
}

fn small_learner(env: &RaceEnv, seed: u64) -> SacLearner {
    let cfg = SacConfig { hidden: vec![16, 16], batch_size: 16, ..Default::default() };
    SacLearner::new(cfg, env.observation_dim(), 2, seed).unwrap()
}

fn train_small(mode: RunMode, schedule: racelab::orchestrator::RateSchedule, steps: u64, seed: u64) -> TrainingReport {
    let mut env = residual_env(ControllerKind::Pp);
    let mut learner = small_learner(&env, seed);
    let mut buffer = ReplayBuffer::new(100_000, env.observation_dim(), 2);
    let opts = TrainingOptions { mode, scheduling: AsyncScheduling::Virtual, budget_steps: steps, seed, trace_every_episodes: 0 };
    run_training(&mut env, &mut learner, &mut buffer, &schedule, &opts).unwrap()
}

fn ac3_rates(c: &mut Checks, shared: &mut Shared) {
    let r = train_small(RunMode::TrainAsync, Default::default(), 10_000, 1);
    let ratio = r.learner_updates as f64 / r.env_steps as f64;
    c.note(format!("{} steps, {} updates (ratio {ratio:.4}), {} syncs", r.env_steps, r.learner_updates, r.behavior_syncs));
    c.ensure(r.env_steps == 10_000, || format!("env steps {}", r.env_steps));
    c.ensure((ratio - 3.2).abs() <= 0.01, || format!("update ratio {ratio}"));
    let expected = r.env_steps as f64 / 10.0;
    c.ensure((r.behavior_syncs as f64 - expected).abs() <= 1.0, || format!("syncs {} vs {expected}", r.behavior_syncs));
    shared.filter_traces.push(("rates run".into(), r.psi_trace));
}

fn ac4_determinism(c: &mut Checks) {
    let times = |r: &TrainingReport| r.laps.iter().map(|l| l.lap_time_s.to_bits()).collect::<Vec<_>>();
    let a = train_small(RunMode::TrainSync, Default::default(), 2000, 7);
    let b = train_small(RunMode::TrainSync, Default::default(), 2000, 7);
    c.ensure(a.parameter_checksum == b.parameter_checksum, || "sync checksums differ".into());
    c.ensure(times(&a) == times(&b) && !a.laps.is_empty(), || "sync lap sequences differ".into());

    let lockstep = racelab::orchestrator::RateSchedule { learner_hz: 10, sync_hz: 10, ..Default::default() };
    let v = train_small(RunMode::TrainAsync, lockstep, 2000, 7);
    c.ensure(v.parameter_checksum == a.parameter_checksum, || "lock-step async differs from sync".into());
    c.ensure(times(&v) == times(&a), || "lock-step async lap times differ from sync".into());
    c.note(format!("{} laps, checksum {}", a.laps.len(), &a.parameter_checksum[..12]));
}

fn ac5_residual(c: &mut Checks, shared: &mut Shared, root: &Path) {
    let base = desk_scale(ExperimentConfig { budget_steps: 12_000, ..Default::default() });
    let mut map = base.clone();
    map.output_dir = root.join("map_baseline");
    map.deploy.baseline_only = true;
    let baseline = experiment::cmd_deploy(&map).unwrap();
    let t_map = baseline.t_mu.expect("baseline converges");
    let mut wins = 0;
    for seed in [1u64, 2, 3] {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.output_dir = root.join(format!("rl_map_seed{seed}"));
        let report = experiment::cmd_train(&cfg).unwrap();
        shared.filter_traces.push((format!("RL-MAP seed {seed}"), report.psi_trace.clone()));
        let ck = cfg.output_dir.join("checkpoint");
        cfg.deploy.checkpoint = Some(ck.clone());
        cfg.output_dir = root.join(format!("rl_map_seed{seed}_deploy"));
        let dep = experiment::cmd_deploy(&cfg).unwrap();
        let gain = dep.t_mu.map(|t| 1.0 - t / t_map);
        let win = dep.converged && gain.is_some_and(|g| g >= 0.05);
        wins += win as usize;
        if shared.rl_checkpoint.is_none() && dep.converged {
            shared.rl_checkpoint = Some(ck);
        }
        c.note(format!(
            "seed {seed}: t_mu {:.3} vs MAP {t_map:.3} ({:+.1}%), n_bound {}",
            dep.t_mu.unwrap_or(f64::NAN),
            -100.0 * gain.unwrap_or(f64::NAN),
            dep.n_bound
        ));
    }
    c.ensure(wins >= 2, || format!("only {wins}/3 seeds at least 5% faster than MAP"));
}

fn ac6_baselines(c: &mut Checks, root: &Path) {
    for track in ["c_like", "y_like"] {
        let mut t = Vec::new();
        for kind in [ControllerKind::Map, ControllerKind::Pp, ControllerKind::Ftg] {
            let mut cfg = ExperimentConfig { controller: kind, ..Default::default() };
            cfg.track.file = track.into();
            cfg.deploy.baseline_only = true;
            cfg.output_dir = root.join(format!("baseline_{track}_{kind}"));
            let r = experiment::cmd_deploy(&cfg).unwrap();
            c.ensure(r.converged, || format!("{kind} on {track} did not converge"));
            t.push(r.t_mu.unwrap_or(f64::INFINITY));
        }
        c.note(format!("{track}: MAP {:.3} PP {:.3} FTG {:.3}", t[0], t[1], t[2]));
        c.ensure(t[1] >= 1.01 * t[0], || format!("{track}: PP {} not 1% slower than MAP {}", t[1], t[0]));
        c.ensure(t[2] >= 1.01 * t[1], || format!("{track}: FTG {} not 1% slower than PP {}", t[2], t[1]));
    }
}

/// The ablation grid is trained end to end, as in the original study.
fn ablation_base() -> ExperimentConfig {
    let mut cfg = desk_scale(ExperimentConfig { mode: ActionMode::E2e, controller: ControllerKind::None, ..Default::default() });
    cfg.ablation.seeds = vec![1, 2, 3, 4, 5];
    cfg
}

fn ac7_ablation(c: &mut Checks, shared: &mut Shared, root: &Path) {
    let base = ablation_base();
    let mut runs: Vec<Vec<AblationRun>> = Vec::new();
    for v in &ABLATION_VARIANTS {
        let mut per_seed = Vec::new();
        for &seed in &base.ablation.seeds {
            let cfg = v.apply(&base, seed);
            let out = experiment::train(&cfg).unwrap();
            shared.filter_traces.push((format!("{} seed {seed}", v.name), out.report.psi_trace.clone()));
            let run = AblationRun::from_report(v.name, seed, &out.report, base.ablation.final_window_minutes);
            let json = serde_json::to_string(&run).unwrap();
            std::fs::write(root.join(format!("{}_seed{seed}.json", v.slug())), json).unwrap();
            shared.e2e_reports.push(out.report);
            per_seed.push(run);
        }
        runs.push(per_seed);
    }
    let rows: Vec<AblationRow> = ABLATION_VARIANTS.iter().zip(&runs).map(|(v, r)| AblationRow::aggregate(v.name, r)).collect();
    for row in &rows {
        c.note(format!(
            "{}: t_mu {:.3} sigma {:.3} laps {:.1} bound {:.1}",
            row.run,
            row.stats.map_or(f64::NAN, |s| s.t_mu),
            row.stats.map_or(f64::NAN, |s| s.sigma),
            row.n_laps_mu,
            row.n_bound_mu
        ));
    }
    let (hdra_async, sync, td3, td1) = (&runs[0], &runs[1], &runs[2], &runs[3]);
    let inf = |x: Option<f64>| x.unwrap_or(f64::INFINITY);

    let a = td3.iter().zip(td1).filter(|(p, q)| inf(p.first_clean_lap_minutes) <= inf(q.first_clean_lap_minutes)).count();
    let firsts: Vec<String> = td3
        .iter()
        .zip(td1)
        .map(|(p, q)| format!("{:.1}/{:.1}", inf(p.first_clean_lap_minutes), inf(q.first_clean_lap_minutes)))
        .collect();
    c.note(format!("(a) first clean lap TD3/TD1 min: {} -> {a}/5", firsts.join(" ")));
    c.ensure(a >= 4, || format!("(a) TD3 first clean lap no later than TD1 in {a}/5 seeds"));

    let b = hdra_async.iter().zip(sync).filter(|(p, q)| inf(p.final_window_mean) <= inf(q.final_window_mean)).count();
    let means: Vec<String> = hdra_async
        .iter()
        .zip(sync)
        .map(|(p, q)| format!("{:.2}/{:.2}", inf(p.final_window_mean), inf(q.final_window_mean)))
        .collect();
    c.note(format!("(b) final-window mean async/sync: {} -> {b}/5", means.join(" ")));
    c.ensure(b >= 4, || format!("(b) async final-window mean no worse than sync in {b}/5 seeds"));

    let sd = |r: &AblationRow| r.stats.map_or(f64::INFINITY, |s| s.sigma);
    c.ensure(sd(&rows[0]) <= sd(&rows[2]), || format!("(c) HDRA sigma {} > TD3 sigma {}", sd(&rows[0]), sd(&rows[2])));
}

fn ac8_safety_filter(c: &mut Checks, shared: &Shared) {
    let eps = 0.05;
    let mut entries = 0;
    let mut clamped = 0;
    for (name, trace) in &shared.filter_traces {
        let mut psi = FRAC_PI_6;
        for (i, e) in trace.iter().enumerate() {
            let step = match e.event {
                FilterEvent::LapCompleted => eps,
                FilterEvent::BoundaryViolation => -eps,
            };
            let expected = (psi + step).clamp(FRAC_PI_6, FRAC_PI_2);
            let exact_step = ((e.psi_after - e.psi_before) - step).abs() < 1e-12;
            clamped += !exact_step as usize;
            c.ensure(e.psi_before == psi, || format!("{name}: entry {i} starts at {} not {psi}", e.psi_before));
            c.ensure(e.psi_after == expected, || format!("{name}: entry {i} {:?} went to {} not {expected}", e.event, e.psi_after));
            c.ensure(exact_step || e.psi_after == FRAC_PI_6 || e.psi_after == FRAC_PI_2, || {
                format!("{name}: entry {i} changed by {}", e.psi_after - e.psi_before)
            });
            c.ensure((FRAC_PI_6..=FRAC_PI_2).contains(&e.psi_after), || format!("{name}: psi {} out of range", e.psi_after));
            psi = e.psi_after;
            entries += 1;
        }
    }
    c.note(format!("{} runs, {entries} events, {clamped} held at a bound", shared.filter_traces.len()));
    c.ensure(entries > 0, || "no safety-filter events recorded".into());
}

fn check_curriculum(c: &mut Checks, name: &str, trace: &[CurriculumTraceEntry]) -> usize {
    let (mut alpha, mut streak) = (CurriculumState::default().alpha, 0u32);
    let mut raises = 0;
    for (i, e) in trace.iter().enumerate() {
        c.ensure(e.before.alpha == alpha && e.before.consecutive_clean_laps == streak, || {
            format!("{name}: entry {i} starts from {:?}, oracle ({alpha}, {streak})", e.before)
        });
        if e.lap_clean {
            streak += 1;
            if streak == CURRICULUM_LAPS {
                alpha = (alpha + CURRICULUM_STEP).min(CURRICULUM_ALPHA_MAX);
                streak = 0;
            }
        } else {
            streak = 0;
        }
        let d = e.after.alpha - e.before.alpha;
        raises += (d > 0.0) as usize;
        c.ensure(d == 0.0 || d == CURRICULUM_STEP || (e.after.alpha == CURRICULUM_ALPHA_MAX && d > 0.0), || {
            format!("{name}: entry {i} changed alpha by {d}")
        });
        c.ensure(e.after.alpha == alpha && e.after.consecutive_clean_laps == streak, || {
            format!("{name}: entry {i} ended at {:?}, oracle ({alpha}, {streak})", e.after)
        });
        c.ensure(e.after.alpha <= CURRICULUM_ALPHA_MAX, || format!("{name}: alpha {} above cap", e.after.alpha));
    }
    raises
}

fn ac9_curriculum(c: &mut Checks, shared: &Shared) {
    // scripted events through the update rule
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut state = CurriculumState::default();
    let mut trace = Vec::new();
    for i in 0..400 {
        let clean = i > 300 || rng.random_bool(0.75);
        let after = update_curriculum(state, clean);
        trace.push(CurriculumTraceEntry { t_s: i as f64, lap_clean: clean, before: state, after });
        state = after;
    }
    let raises = check_curriculum(c, "scripted", &trace);
    c.ensure(state.alpha == CURRICULUM_ALPHA_MAX, || format!("scripted run ended at alpha {}", state.alpha));
    c.note(format!("scripted: {raises} raises, capped at {}", state.alpha));

    // full end-to-end training runs
    c.ensure(!shared.e2e_reports.is_empty(), || "no end-to-end training run available".into());
    let mut events = 0;
    let mut top = 0.0f64;
    for (i, r) in shared.e2e_reports.iter().enumerate() {
        check_curriculum(c, &format!("e2e run {i}"), &r.curriculum_trace);
        events += r.curriculum_trace.len();
        top = top.max(r.final_curriculum_alpha);
        c.ensure(r.curriculum_trace.last().is_none_or(|e| e.after.alpha == r.final_curriculum_alpha), || {
            format!("e2e run {i}: final alpha {} disagrees with trace", r.final_curriculum_alpha)
        });
    }
    c.note(format!("{} e2e runs, {events} lap events, highest final alpha {top}", shared.e2e_reports.len()));
}

struct LapRow {
    time: f64,
    clean: bool,
    flying: bool,
    counted: bool,
    violations: usize,
}

fn read_laps(path: &Path) -> Vec<LapRow> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (t, cl, fl, co, ca) = (col("lap_time_s"), col("clean"), col("flying"), col("counted"), col("terminal_causes"));
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            LapRow {
                time: r[t].parse().unwrap(),
                clean: &r[cl] == "true",
                flying: &r[fl] == "true",
                counted: &r[co] == "true",
                violations: r[ca].split(';').filter(|x| *x == TerminalCause::BoundaryViolation.as_str()).count(),
            }
        })
        .collect()
}

fn ac10_deployment(c: &mut Checks, shared: &Shared, root: &Path) {
    let mut cases: Vec<(String, ExperimentConfig)> = Vec::new();
    let mut baseline = ExperimentConfig { controller: ControllerKind::Pp, ..Default::default() };
    baseline.deploy.baseline_only = true;
    cases.push(("PP baseline".into(), baseline));
    match &shared.rl_checkpoint {
        Some(ck) => {
            let mut rl = desk_scale(ExperimentConfig::default());
            rl.deploy.checkpoint = Some(ck.clone());
            cases.push(("RL-MAP".into(), rl));
        }
        None => c.ensure(false, || "no converged RL checkpoint to deploy".into()),
    }
    for (name, mut cfg) in cases {
        cfg.output_dir = root.join(format!("deploy_{}", name.replace(' ', "_")));
        let report = experiment::cmd_deploy(&cfg).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("deployment_report.json")).unwrap()).unwrap();
        let laps = read_laps(&cfg.output_dir.join("laps.csv"));
        let counted: Vec<&LapRow> = laps.iter().filter(|l| l.counted).collect();
        let first = laps.iter().position(|l| l.counted).unwrap_or(laps.len());
        c.ensure(counted.len() == 20, || format!("{name}: {} counted laps", counted.len()));
        c.ensure(laps.last().is_some_and(|l| l.counted), || format!("{name}: did not stop on the 20th clean lap"));
        c.ensure(laps[first..].iter().all(|l| l.clean), || format!("{name}: unclean lap inside the streak"));
        c.ensure(laps[first..].iter().all(|l| l.counted == l.flying), || format!("{name}: flying lap left out of the streak"));
        c.ensure(counted.iter().all(|l| l.clean && l.flying), || format!("{name}: counted lap not clean"));

        let times: Vec<f64> = counted.iter().map(|l| l.time).collect();
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let sigma = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = times.iter().copied().fold(f64::INFINITY, f64::min);
        let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n_bound: usize = laps.iter().map(|l| l.violations).sum();
        let close = |a: f64, b: f64| (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(1e-300);
        for (key, ours) in [("t_min", min), ("t_max", max), ("t_mu", mean), ("sigma", sigma)] {
            let reported = json[key].as_f64().unwrap_or(f64::NAN);
            c.ensure(close(reported, ours), || format!("{name}: {key} reported {reported} recomputed {ours}"));
        }
        c.ensure(json["n_bound"].as_u64() == Some(n_bound as u64), || format!("{name}: n_bound {} vs {n_bound}", json["n_bound"]));
        c.ensure(report.converged, || format!("{name}: not converged"));
        c.note(format!("{name}: {} laps, t_mu {mean:.4}, sigma {sigma:.4}, n_bound {n_bound}", laps.len()));
    }
}

// ---------------------------------------------------------------------------

type Criterion<'a> = (u8, &'static str, Box<dyn FnOnce(&mut Checks) + 'a>);

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let shared = std::cell::RefCell::new(Shared::default());
    let ablation_root = root.join("ablation");
    std::fs::create_dir_all(&ablation_root).unwrap();

    // order matters: later criteria reuse the traces of earlier runs
    let criteria: Vec<Criterion> = vec![
        (1, "property suite", Box::new(ac1_properties)),
        (2, "reward accounting", Box::new(ac2_reward)),
        (3, "actor/learner rates", Box::new(|c| ac3_rates(c, &mut shared.borrow_mut()))),
        (4, "determinism", Box::new(ac4_determinism)),
        (6, "baseline ordering", Box::new(|c| ac6_baselines(c, &root))),
        (5, "residual improvement over MAP", Box::new(|c| ac5_residual(c, &mut shared.borrow_mut(), &root))),
        (10, "deployment protocol", Box::new(|c| ac10_deployment(c, &shared.borrow(), &root))),
        (7, "ablation directions", Box::new(|c| ac7_ablation(c, &mut shared.borrow_mut(), &ablation_root))),
        (8, "safety-filter curriculum", Box::new(|c| ac8_safety_filter(c, &shared.borrow()))),
        (9, "speed-cap curriculum", Box::new(|c| ac9_curriculum(c, &shared.borrow()))),
    ];

    // `cargo test --test acceptance -- 1 8` runs a subset; cargo's own flags are ignored
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.trim_start_matches("AC").parse().ok()).collect();
    let mut results = Vec::new();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let mut checks = Checks::default();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut checks)));
        if let Err(e) = outcome {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            checks.failures.push(format!("panicked: {}", msg.unwrap_or_default()));
        }
        let pass = checks.failures.is_empty();
        let mut detail = checks.notes.join("; ");
        if !pass {
            detail = format!("{} | {}", checks.failures.join("; "), detail);
        }
        println!(
            "AC{id} {}: {name} [{:.1}s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        results.push((id, pass));
    }
    results.sort();
    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| format!("AC{}", r.0)).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
