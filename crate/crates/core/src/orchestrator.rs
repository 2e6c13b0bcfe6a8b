//! Actor/learner scheduling on a simulated clock, and deployment runs.
//!
//! Rates are realized as integer tick ratios of the control clock, so a
//! training run is reproducible bit for bit in the synchronous and the
//! lock-step asynchronous modes. A free-running threaded mode exists for
//! stress testing and is not deterministic.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    CurriculumTraceEntry, FilterTraceEntry, LapRecord, RaceEnv, TerminalCause, TraceRow,
};
use crate::plant::ControlInput;
use crate::rates::RateDivider;
use crate::sac::{Policy, ReplayBuffer, SacError, SacLearner, Transition};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sac(#[from] SacError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSchedule {
    pub control_hz: u64,
    pub deploy_control_hz: u64,
    pub learner_hz: u64,
    pub sync_hz: u64,
    pub base_hz: u64,
    pub physics_hz: u64,
    /// Gradient steps after each env step in synchronous mode.
    pub sync_mode_updates_per_step: u64,
}

impl Default for RateSchedule {
    fn default() -> Self {
        Self {
            control_hz: 10,
            deploy_control_hz: 15,
            learner_hz: 32,
            sync_hz: 1,
            base_hz: 40,
            physics_hz: 400,
            sync_mode_updates_per_step: 1,
        }
    }
}

impl RateSchedule {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let all = [self.control_hz, self.deploy_control_hz, self.learner_hz, self.sync_hz, self.base_hz, self.physics_hz];
        if all.contains(&0) {
            return Err(OrchestratorError::Config("all rates must be positive".into()));
        }
        if self.physics_hz % self.base_hz != 0 {
            return Err(OrchestratorError::Config(format!(
                "physics rate {} is not a multiple of the base rate {}",
                self.physics_hz, self.base_hz
            )));
        }
        if self.sync_hz > self.control_hz {
            return Err(OrchestratorError::Config("behavior sync cannot be faster than acting".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    TrainAsync,
    TrainSync,
    Deploy,
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train_async" => Ok(Self::TrainAsync),
            "train_sync" => Ok(Self::TrainSync),
            "deploy" => Ok(Self::Deploy),
            other => Err(format!("unknown run mode `{other}`")),
        }
    }
}

/// How the asynchronous mode interleaves actor and learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsyncScheduling {
    /// Deterministic lock-step interleaving on the simulated clock.
    #[default]
    Virtual,
    /// Two OS threads running freely.
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOptions {
    pub mode: RunMode,
    pub scheduling: AsyncScheduling,
    pub budget_steps: u64,
    pub seed: u64,
    /// Keep the step trace of every k-th episode (0 disables tracing).
    pub trace_every_episodes: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            mode: RunMode::TrainAsync,
            scheduling: AsyncScheduling::Virtual,
            budget_steps: 12_000,
            seed: 0,
            trace_every_episodes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mode: RunMode,
    pub env_steps: u64,
    pub learner_updates: u64,
    pub skipped_updates: u64,
    pub behavior_syncs: u64,
    /// Training clock: env steps / control rate.
    pub sim_minutes: f64,
    /// Physics time including recovery phases.
    pub physics_seconds: f64,
    pub wall_seconds: f64,
    pub laps: Vec<LapRecord>,
    pub boundary_violations: u64,
    /// Env step index of every boundary violation.
    pub violation_steps: Vec<u64>,
    pub safety_filter_terminals: u64,
    pub singularity_terminals: u64,
    pub recoveries_timed_out: u64,
    pub episodes: u64,
    pub first_clean_lap_minutes: Option<f64>,
    /// Entropy temperature at the end of the run.
    pub final_temperature: f64,
    /// Speed-cap curriculum alpha at the end of the run.
    pub final_curriculum_alpha: f64,
    pub parameter_checksum: String,
    pub psi_trace: Vec<FilterTraceEntry>,
    pub curriculum_trace: Vec<CurriculumTraceEntry>,
    pub control_hz: u64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl TrainingReport {
    pub fn lap_minutes(&self, lap: &LapRecord) -> f64 {
        lap.finished_at_step as f64 / self.control_hz as f64 / 60.0
    }

    /// `sim_minutes,lap_time_s,clean` rows.
    pub fn lap_curve_csv(&self) -> String {
        let mut out = String::from("sim_minutes,lap_time_s,clean\n");
        for lap in &self.laps {
            out.push_str(&format!("{},{},{}\n", self.lap_minutes(lap), lap.lap_time_s, lap.clean));
        }
        out
    }
}

/// Deep copy of the learner's actor, immutable afterwards.
pub fn sync_policy(learner: &SacLearner) -> Policy {
    learner.policy()
}

const ACTOR_STREAM: u64 = 0x5eed_ac70;

struct Actor {
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    report: TrainingReport,
    trace_every: u64,
}

impl Actor {
    fn new(env: &mut RaceEnv, opts: &TrainingOptions, control_hz: u64) -> Self {
        let obs = env.reset(opts.seed);
        if opts.trace_every_episodes > 0 {
            env.enable_trace();
        }
        Self {
            rng: ChaCha8Rng::seed_from_u64(opts.seed ^ ACTOR_STREAM),
            obs,
            trace_every: opts.trace_every_episodes,
            report: TrainingReport {
                mode: opts.mode,
                env_steps: 0,
                learner_updates: 0,
                skipped_updates: 0,
                behavior_syncs: 0,
                sim_minutes: 0.0,
                physics_seconds: 0.0,
                wall_seconds: 0.0,
                laps: Vec::new(),
                boundary_violations: 0,
                violation_steps: Vec::new(),
                safety_filter_terminals: 0,
                singularity_terminals: 0,
                recoveries_timed_out: 0,
                episodes: 1,
                first_clean_lap_minutes: None,
                final_temperature: 0.0,
                final_curriculum_alpha: 0.0,
                parameter_checksum: String::new(),
                psi_trace: Vec::new(),
                curriculum_trace: Vec::new(),
                control_hz,
                trace: Vec::new(),
            },
        }
    }

    /// One control step under `policy`; the transition goes to `buffer`.
    fn step(&mut self, env: &mut RaceEnv, policy: &Policy, buffer: &mut ReplayBuffer, hdra: Option<(usize, f64)>) -> Result<(), OrchestratorError> {
        let noise = policy.sample_noise(&mut self.rng);
        let action = policy.act(&self.obs, Some(&noise)).map_err(SacError::from)?;
        let episode = env.episode_id();
        let result = env.step(env.action_box().denormalize([action[0], action[1]]));
        let mut reward = result.reward;
        if result.terminal && hdra.is_some() {
            // the delayed adjustment writes the penalty itself
            reward += env.config().reward.penalty;
        }
        buffer.push(Transition {
            obs: std::mem::take(&mut self.obs),
            action,
            reward,
            next_obs: result.observation.clone(),
            terminal: result.terminal,
            episode_id: episode,
        });
        if let (true, Some((steps, penalty))) = (result.terminal, hdra) {
            buffer.apply_hdra(buffer.pushed() - 1, steps, penalty);
        }
        self.report.env_steps += 1;
        self.record_laps(result.laps);
        match result.terminal_cause {
            TerminalCause::BoundaryViolation => {
                self.report.boundary_violations += 1;
                self.report.violation_steps.push(self.report.env_steps);
            }
            TerminalCause::SafetyFilter => self.report.safety_filter_terminals += 1,
            TerminalCause::Singularity => self.report.singularity_terminals += 1,
            TerminalCause::None => {}
        }
        self.obs = result.observation;
        if result.terminal {
            let (obs, outcome, laps) = env.run_recovery();
            self.keep_trace(env, episode);
            if outcome == crate::env::RecoveryOutcome::TimedOut {
                self.report.recoveries_timed_out += 1;
            }
            self.record_laps(laps);
            self.report.episodes += 1;
            self.obs = obs;
        }
        Ok(())
    }

    fn keep_trace(&mut self, env: &mut RaceEnv, episode: u64) {
        if self.trace_every > 0 {
            let rows = env.take_trace();
            if episode % self.trace_every == 1 % self.trace_every {
                self.report.trace.extend(rows);
            }
        }
    }

    fn record_laps(&mut self, laps: Vec<LapRecord>) {
        for lap in laps {
            if lap.clean && self.report.first_clean_lap_minutes.is_none() {
                self.report.first_clean_lap_minutes = Some(self.report.lap_minutes(&lap));
            }
            self.report.laps.push(lap);
        }
    }

    fn finish(mut self, env: &mut RaceEnv, learner: &SacLearner, started: Instant) -> TrainingReport {
        let episode = env.episode_id();
        self.keep_trace(env, episode);
        let r = &mut self.report;
        r.sim_minutes = r.env_steps as f64 / r.control_hz as f64 / 60.0;
        r.physics_seconds = env.sim_time();
        r.wall_seconds = started.elapsed().as_secs_f64();
        r.final_temperature = learner.alpha();
        r.final_curriculum_alpha = env.curriculum().alpha;
        r.parameter_checksum = learner.checksum();
        r.psi_trace = env.filter_trace().to_vec();
        r.curriculum_trace = env.curriculum_trace().to_vec();
        self.report
    }
}

fn hdra_params(learner: &SacLearner) -> Option<(usize, f64)> {
    let c = &learner.config;
    c.hdra_on.then_some((c.hdra_steps, c.penalty))
}

fn learner_step(learner: &mut SacLearner, buffer: &ReplayBuffer, report: &mut TrainingReport) -> Result<(), OrchestratorError> {
    match learner.update(buffer) {
        Ok(_) => report.learner_updates += 1,
        Err(SacError::InsufficientData { .. }) => report.skipped_updates += 1,
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

/// Trains `learner` in `env` for `budget_steps` control steps. The learner
/// is paused while the environment drives its recovery phases.
pub fn run_training(
    env: &mut RaceEnv,
    learner: &mut SacLearner,
    buffer: &mut ReplayBuffer,
    schedule: &RateSchedule,
    opts: &TrainingOptions,
) -> Result<TrainingReport, OrchestratorError> {
    schedule.validate()?;
    if opts.budget_steps == 0 {
        return Err(OrchestratorError::Config("training budget must be positive".into()));
    }
    if env.config().control_hz != schedule.control_hz || env.config().physics_hz != schedule.physics_hz {
        return Err(OrchestratorError::Config("environment rates disagree with the schedule".into()));
    }
    if learner.obs_dim() != env.observation_dim() || buffer.obs_dim() != env.observation_dim() {
        return Err(OrchestratorError::Config(format!(
            "observation dimension {} does not match the learner ({}) or buffer ({})",
            env.observation_dim(),
            learner.obs_dim(),
            buffer.obs_dim()
        )));
    }
    let started = Instant::now();
    match (opts.mode, opts.scheduling) {
        (RunMode::Deploy, _) => Err(OrchestratorError::Config("deploy is not a training mode".into())),
        (RunMode::TrainSync, _) => {
            let mut actor = Actor::new(env, opts, schedule.control_hz);
            let hdra = hdra_params(learner);
            for _ in 0..opts.budget_steps {
                let policy = learner.policy();
                actor.step(env, &policy, buffer, hdra)?;
                for _ in 0..schedule.sync_mode_updates_per_step {
                    learner_step(learner, buffer, &mut actor.report)?;
                }
                actor.report.behavior_syncs += 1;
            }
            Ok(actor.finish(env, learner, started))
        }
        (RunMode::TrainAsync, AsyncScheduling::Virtual) => {
            let mut actor = Actor::new(env, opts, schedule.control_hz);
            let hdra = hdra_params(learner);
            let mut updates = RateDivider::new(schedule.learner_hz, schedule.control_hz);
            let mut syncs = RateDivider::new(schedule.sync_hz, schedule.control_hz);
            let mut behavior = sync_policy(learner);
            for _ in 0..opts.budget_steps {
                actor.step(env, &behavior, buffer, hdra)?;
                for _ in 0..updates.next_count() {
                    learner_step(learner, buffer, &mut actor.report)?;
                }
                if syncs.next_count() > 0 {
                    behavior = sync_policy(learner);
                    actor.report.behavior_syncs += 1;
                }
            }
            Ok(actor.finish(env, learner, started))
        }
        (RunMode::TrainAsync, AsyncScheduling::Threaded) => run_threaded(env, learner, buffer, schedule, opts, started),
    }
}

fn run_threaded(
    env: &mut RaceEnv,
    learner: &mut SacLearner,
    buffer: &mut ReplayBuffer,
    schedule: &RateSchedule,
    opts: &TrainingOptions,
    started: Instant,
) -> Result<TrainingReport, OrchestratorError> {
    let shared = Arc::new(Mutex::new(std::mem::replace(buffer, ReplayBuffer::new(1, 1, 1))));
    let snapshot = Arc::new(Mutex::new(sync_policy(learner)));
    let done = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let hdra = hdra_params(learner);
    let sync_every = (schedule.control_hz / schedule.sync_hz).max(1);

    let worker_learner = learner.clone();
    let (buf_l, snap_l, done_l) = (shared.clone(), snapshot.clone(), done.clone());
    let handle = std::thread::spawn(move || -> Result<(SacLearner, u64, u64), SacError> {
        let mut learner = worker_learner;
        let (mut ok, mut skipped) = (0u64, 0u64);
        while !done_l.load(std::sync::atomic::Ordering::Acquire) {
            let batch = {
                let buf = buf_l.lock().expect("buffer lock");
                let c = &learner.config;
                let (b, n, g) = (c.batch_size, c.n_steps, c.gamma);
                buf.sample_nstep(b, n, g, &mut rand::rng())
            };
            match batch {
                Ok(batch) => {
                    learner.update_on(&batch)?;
                    ok += 1;
                    if ok % 32 == 0 {
                        *snap_l.lock().expect("snapshot lock") = learner.policy();
                    }
                }
                Err(SacError::InsufficientData { .. }) => {
                    skipped += 1;
                    std::thread::yield_now();
                }
                Err(e) => return Err(e),
            }
        }
        Ok((learner, ok, skipped))
    });

    let mut actor = Actor::new(env, opts, schedule.control_hz);
    let mut behavior = snapshot.lock().expect("snapshot lock").clone();
    let mut result = Ok(());
    for step in 0..opts.budget_steps {
        let mut buf = shared.lock().expect("buffer lock");
        // push and delayed edit happen under one lock
        if let Err(e) = actor.step(env, &behavior, &mut buf, hdra) {
            result = Err(e);
            break;
        }
        drop(buf);
        if (step + 1) % sync_every == 0 {
            behavior = snapshot.lock().expect("snapshot lock").clone();
            actor.report.behavior_syncs += 1;
        }
    }
    done.store(true, std::sync::atomic::Ordering::Release);
    let (trained, ok, skipped) = handle.join().map_err(|_| OrchestratorError::Config("learner thread panicked".into()))??;
    *learner = trained;
    *buffer = Arc::try_unwrap(shared).map_err(|_| OrchestratorError::Config("buffer still shared".into()))?
        .into_inner()
        .expect("buffer lock");
    result?;
    actor.report.learner_updates = ok;
    actor.report.skipped_updates = skipped;
    Ok(actor.finish(env, learner, started))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentOptions {
    pub target_clean_laps: usize,
    pub violation_cap: u64,
    /// Hard stop on simulated time, seconds.
    pub max_sim_seconds: f64,
}

impl Default for DeploymentOptions {
    fn default() -> Self {
        Self { target_clean_laps: 20, violation_cap: 50, max_sim_seconds: 7200.0 }
    }
}

/// Lap statistics over the final run of consecutive clean laps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LapStats {
    pub t_min: f64,
    pub t_max: f64,
    pub t_mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub n: usize,
}

impl LapStats {
    pub fn from_times(times: &[f64]) -> Option<Self> {
        if times.is_empty() {
            return None;
        }
        let n = times.len() as f64;
        let t_mu = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - t_mu).powi(2)).sum::<f64>() / n;
        Some(Self {
            t_min: times.iter().copied().fold(f64::INFINITY, f64::min),
            t_max: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            t_mu,
            sigma: var.sqrt(),
            n: times.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentReport {
    pub converged: bool,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub t_mu: Option<f64>,
    pub sigma: Option<f64>,
    /// Boundary violations before the clean streak completed.
    pub n_bound: u64,
    pub clean_streak: usize,
    pub laps: Vec<LapRecord>,
    /// Indices into `laps` of the streak the statistics cover.
    pub counted: Vec<usize>,
    pub sim_seconds: f64,
    pub parameter_checksum: Option<String>,
    #[serde(skip)]
    pub fastest_lap_trace: Vec<TraceRow>,
}

pub const LAP_CSV_HEADER: &str = "lap_index,lap_time_s,clean,flying,counted,mean_speed,max_speed,terminal_causes";

impl DeploymentReport {
    pub fn lap_csv(&self) -> String {
        let mut out = format!("{LAP_CSV_HEADER}\n");
        for (i, lap) in self.laps.iter().enumerate() {
            let causes: Vec<&str> = lap.terminal_causes.iter().map(|c| c.as_str()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                lap.lap_index,
                lap.lap_time_s,
                lap.clean,
                lap.flying,
                self.counted.contains(&i),
                lap.mean_speed,
                lap.max_speed,
                causes.join(";")
            ));
        }
        out
    }

    pub fn counted_times(&self) -> Vec<f64> {
        self.counted.iter().map(|&i| self.laps[i].lap_time_s).collect()
    }
}

/// Drives with the deterministic policy mean (or the base controller alone
/// when `policy` is `None`) until `target_clean_laps` consecutive clean
/// flying laps, the violation cap, or the time limit.
pub fn run_deployment(
    env: &mut RaceEnv,
    policy: Option<&Policy>,
    opts: &DeploymentOptions,
    seed: u64,
) -> Result<DeploymentReport, OrchestratorError> {
    if opts.target_clean_laps == 0 {
        return Err(OrchestratorError::Config("target_clean_laps must be positive".into()));
    }
    if policy.is_none() && env.base_controller().is_none() {
        return Err(OrchestratorError::Config("baseline deployment needs a base controller".into()));
    }
    let checksum = policy.map(|p| p.net.checksum());
    let mut obs = env.reset(seed);
    env.enable_trace();
    let mut laps: Vec<LapRecord> = Vec::new();
    let mut streak: Vec<usize> = Vec::new();
    let mut fastest: Option<(f64, Vec<TraceRow>)> = None;
    let mut lap_rows: Vec<TraceRow> = Vec::new();
    let mut violations = 0u64;
    let start_time = env.sim_time();

    let mut handle_laps = |new: Vec<LapRecord>, rows: &mut Vec<TraceRow>, laps: &mut Vec<LapRecord>, streak: &mut Vec<usize>| {
        for lap in new {
            laps.push(lap.clone());
            if lap.clean && lap.flying {
                streak.push(laps.len() - 1);
                if fastest.as_ref().is_none_or(|(t, _)| lap.lap_time_s < *t) {
                    fastest = Some((lap.lap_time_s, std::mem::take(rows)));
                }
            } else if !lap.clean {
                streak.clear();
            }
            rows.clear();
        }
    };

    let converged = loop {
        if streak.len() >= opts.target_clean_laps {
            break true;
        }
        if violations >= opts.violation_cap || env.sim_time() - start_time > opts.max_sim_seconds {
            break false;
        }
        let u = match policy {
            Some(p) => {
                let a = p.act(&obs, None).map_err(SacError::from)?;
                env.action_box().denormalize([a[0], a[1]])
            }
            None => ControlInput::ZERO,
        };
        let r = env.step(u);
        lap_rows.extend(env.take_trace());
        handle_laps(r.laps, &mut lap_rows, &mut laps, &mut streak);
        obs = r.observation;
        if r.terminal {
            if r.terminal_cause == TerminalCause::BoundaryViolation {
                violations += 1;
            }
            let (o, _, rec_laps) = env.run_recovery();
            handle_laps(rec_laps, &mut lap_rows, &mut laps, &mut streak);
            obs = o;
        }
    };
    streak.truncate(opts.target_clean_laps);
    let counted = if converged { streak } else { Vec::new() };
    let times: Vec<f64> = counted.iter().map(|&i| laps[i].lap_time_s).collect();
    let stats = LapStats::from_times(&times);
    Ok(DeploymentReport {
        converged,
        t_min: stats.map(|s| s.t_min),
        t_max: stats.map(|s| s.t_max),
        t_mu: stats.map(|s| s.t_mu),
        sigma: stats.map(|s| s.sigma),
        n_bound: violations,
        clean_streak: counted.len(),
        laps,
        counted,
        sim_seconds: env.sim_time() - start_time,
        parameter_checksum: checksum,
        fastest_lap_trace: fastest.map(|(_, rows)| rows).unwrap_or_default(),
    })
}
