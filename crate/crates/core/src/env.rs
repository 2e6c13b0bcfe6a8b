//! The episodic racing environment.
//!
//! [`RaceEnv`] advances the plant at the physics rate, queries the base
//! controller at its own rate, composes residual (or end-to-end) commands,
//! detects terminals, and runs the recovery state machine between episodes.
//! Terminal checks run on every physics tick in the order singularity,
//! boundary violation, safety filter.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{BaseController, PurePursuitConfig, BASE_DELTA_MAX};
use crate::plant::{self, ControlInput, PlantError, VehicleParams, VehicleState};
use crate::rates::RateDivider;
use crate::track::{FrenetPose, Track};

pub const RESIDUAL_DELTA: (f64, f64) = (-0.15, 0.15);
pub const RESIDUAL_V: (f64, f64) = (-0.5, 2.0);
pub const E2E_V_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Residual,
    E2e,
}

impl std::str::FromStr for ActionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "residual" => Ok(Self::Residual),
            "e2e" => Ok(Self::E2e),
            other => Err(format!("unknown mode `{other}` (expected residual or e2e)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCause {
    None,
    BoundaryViolation,
    SafetyFilter,
    Singularity,
}

impl TerminalCause {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::BoundaryViolation => "boundary_violation",
            Self::SafetyFilter => "safety_filter",
            Self::Singularity => "singularity",
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
}

/// Axis-aligned action bounds, `[delta, v]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub low: [f64; 2],
    pub high: [f64; 2],
}

impl ActionBox {
    /// Maps a normalized action in `[-1, 1]^2` onto the box.
    pub fn denormalize(&self, a: [f64; 2]) -> ControlInput {
        let map = |i: usize| self.low[i] + 0.5 * (a[i].clamp(-1.0, 1.0) + 1.0) * (self.high[i] - self.low[i]);
        ControlInput::new(map(0), map(1))
    }

    pub fn normalize(&self, u: ControlInput) -> [f64; 2] {
        let map = |i: usize, x: f64| 2.0 * (x - self.low[i]) / (self.high[i] - self.low[i]) - 1.0;
        [map(0, u.delta_cmd), map(1, u.v_cmd)]
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput::new(
            u.delta_cmd.clamp(self.low[0], self.high[0]),
            u.v_cmd.clamp(self.low[1], self.high[1]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Number of lookahead samples `J`.
    pub points: usize,
    /// Lookahead horizon `l`, meters.
    pub horizon: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { points: 20, horizon: 6.0 }
    }
}

impl ObservationConfig {
    pub fn dim(&self, mode: ActionMode) -> usize {
        let car = match mode {
            ActionMode::Residual => 9,
            ActionMode::E2e => 7,
        };
        car + 6 * self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Progress multiplier `lambda`.
    pub lambda: f64,
    /// Terminal penalty `p`, stored as `-p`.
    pub penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda: 10.0, penalty: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyFilterState {
    pub psi_filter: f64,
    pub psi_min: f64,
    pub psi_max: f64,
    pub epsilon: f64,
}

impl Default for SafetyFilterState {
    fn default() -> Self {
        Self { psi_filter: FRAC_PI_6, psi_min: FRAC_PI_6, psi_max: FRAC_PI_2, epsilon: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterEvent {
    LapCompleted,
    BoundaryViolation,
}

/// Widens the heading threshold after a clean lap, tightens it after a
/// boundary violation; always within `[psi_min, psi_max]`.
pub fn update_safety_filter(sf: SafetyFilterState, event: FilterEvent) -> SafetyFilterState {
    let delta = match event {
        FilterEvent::LapCompleted => sf.epsilon,
        FilterEvent::BoundaryViolation => -sf.epsilon,
    };
    SafetyFilterState { psi_filter: (sf.psi_filter + delta).clamp(sf.psi_min, sf.psi_max), ..sf }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumState {
    /// End-to-end speed cap, m/s.
    pub alpha: f64,
    pub consecutive_clean_laps: u32,
}

impl Default for CurriculumState {
    fn default() -> Self {
        Self { alpha: 1.0, consecutive_clean_laps: 0 }
    }
}

pub const CURRICULUM_STEP: f64 = 0.5;
pub const CURRICULUM_ALPHA_MAX: f64 = 7.0;
pub const CURRICULUM_LAPS: u32 = 3;

/// Three consecutive clean laps raise the speed cap by 0.5 m/s (capped at
/// 7 m/s); a violation resets the streak.
pub fn update_curriculum(cs: CurriculumState, lap_clean: bool) -> CurriculumState {
    if !lap_clean {
        return CurriculumState { consecutive_clean_laps: 0, ..cs };
    }
    let streak = cs.consecutive_clean_laps + 1;
    if streak >= CURRICULUM_LAPS {
        CurriculumState { alpha: (cs.alpha + CURRICULUM_STEP).min(CURRICULUM_ALPHA_MAX), consecutive_clean_laps: 0 }
    } else {
        CurriculumState { consecutive_clean_laps: streak, ..cs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    pub speed: f64,
    pub n_tol: f64,
    pub mu_tol: f64,
    pub timeout_s: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self { speed: 1.5, n_tol: 0.15, mu_tol: 0.15, timeout_s: 60.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub mode: ActionMode,
    pub observation: ObservationConfig,
    pub reward: RewardConfig,
    pub safety_filter: SafetyFilterState,
    pub recovery: RecoveryConfig,
    pub start_s: f64,
    pub reset_speed: f64,
    /// Random start position along the track, drawn from the reset seed.
    pub randomize_start: bool,
    pub physics_hz: u64,
    pub control_hz: u64,
    pub base_hz: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            mode: ActionMode::Residual,
            observation: ObservationConfig::default(),
            reward: RewardConfig::default(),
            safety_filter: SafetyFilterState::default(),
            recovery: RecoveryConfig::default(),
            start_s: 0.0,
            reset_speed: 0.5,
            randomize_start: false,
            physics_hz: 400,
            control_hz: 10,
            base_hz: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapRecord {
    pub lap_index: usize,
    pub lap_time_s: f64,
    pub clean: bool,
    /// First lap after a reset starts from a standing launch.
    pub flying: bool,
    pub terminal_causes: Vec<TerminalCause>,
    pub mean_speed: f64,
    pub max_speed: f64,
    /// Simulated time at which the lap finished.
    pub finished_at_s: f64,
    /// Control steps the agent had taken when the lap finished.
    pub finished_at_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub s: f64,
    pub lap_count: usize,
    /// Elapsed time of the lap in progress.
    pub lap_time_s: f64,
    pub delta_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub terminal_cause: TerminalCause,
    pub info: StepInfo,
    /// Laps finished during this step.
    pub laps: Vec<LapRecord>,
}

/// One row of the episode trace export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_s: f64,
    pub s_m: f64,
    pub n_m: f64,
    pub mu_rad: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub r: f64,
    pub delta: f64,
    pub delta_cmd: f64,
    pub v_cmd: f64,
    pub reward: f64,
    pub terminal_cause: TerminalCause,
}

pub const TRACE_HEADER: &str = "t_s,s_m,n_m,mu_rad,v_x,v_y,r,delta,delta_cmd,v_cmd,reward,terminal_cause";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 96);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.t_s,
            r.s_m,
            r.n_m,
            r.mu_rad,
            r.v_x,
            r.v_y,
            r.r,
            r.delta,
            r.delta_cmd,
            r.v_cmd,
            r.reward,
            r.terminal_cause.as_str()
        ));
    }
    out
}

/// Timestamped threshold change of the safety filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterTraceEntry {
    pub t_s: f64,
    pub event: FilterEvent,
    pub psi_before: f64,
    pub psi_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumTraceEntry {
    pub t_s: f64,
    pub lap_clean: bool,
    pub before: CurriculumState,
    pub after: CurriculumState,
}

/// How a recovery phase ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryOutcome {
    AlreadyAligned,
    Converged,
    TimedOut,
}

/// Element-wise sum in residual mode (plant limits apply later); in
/// end-to-end mode the RL command is clamped to `[-0.42, 0.42] x [0.5, alpha]`.
pub fn compose_action(u_rl: ControlInput, u_base: ControlInput, mode: ActionMode, alpha: f64) -> ControlInput {
    match mode {
        ActionMode::Residual => {
            let r = residual_box().clamp(u_rl);
            ControlInput::new(u_base.delta_cmd + r.delta_cmd, u_base.v_cmd + r.v_cmd)
        }
        ActionMode::E2e => e2e_box(alpha).clamp(u_rl),
    }
}

pub fn residual_box() -> ActionBox {
    ActionBox { low: [RESIDUAL_DELTA.0, RESIDUAL_V.0], high: [RESIDUAL_DELTA.1, RESIDUAL_V.1] }
}

pub fn e2e_box(alpha: f64) -> ActionBox {
    ActionBox { low: [-BASE_DELTA_MAX, E2E_V_MIN], high: [BASE_DELTA_MAX, alpha.max(E2E_V_MIN)] }
}

/// Normalization scales for the car channels.
const SCALE_V: f64 = 10.0;
const SCALE_YAW_RATE: f64 = 6.0;
const SCALE_N: f64 = 1.0;
const SCALE_STEER: f64 = BASE_DELTA_MAX;

/// Builds the normalized observation vector.
pub fn build_observation(
    state: &VehicleState,
    u_base: Option<ControlInput>,
    u_rl_prev: ControlInput,
    track: &Track,
    cfg: &ObservationConfig,
) -> Vec<f64> {
    let mut obs = Vec::with_capacity(9 + 6 * cfg.points);
    obs.extend([
        state.v_x / SCALE_V,
        state.v_y / SCALE_V,
        state.r / SCALE_YAW_RATE,
        state.n / SCALE_N,
        state.mu / PI,
    ]);
    if let Some(u) = u_base {
        obs.extend([u.delta_cmd / SCALE_STEER, u.v_cmd / SCALE_V]);
    }
    obs.extend([u_rl_prev.delta_cmd / SCALE_STEER, u_rl_prev.v_cmd / SCALE_V]);

    let (x, y, heading) = track.frenet_to_global(FrenetPose::new(state.s, state.n, state.mu));
    let (sin_h, cos_h) = heading.sin_cos();
    let to_body = |(px, py): (f64, f64)| {
        let (dx, dy) = (px - x, py - y);
        ((cos_h * dx + sin_h * dy) / cfg.horizon, (-sin_h * dx + cos_h * dy) / cfg.horizon)
    };
    let spacing = if cfg.points > 1 { cfg.horizon / (cfg.points - 1) as f64 } else { 0.0 };
    let mut left = Vec::with_capacity(2 * cfg.points);
    let mut right = Vec::with_capacity(2 * cfg.points);
    for k in 0..cfg.points {
        let s = state.s + k as f64 * spacing;
        let (wl, wr) = track.widths_at(s);
        let (rx, ry) = to_body(track.position(s));
        obs.extend([rx, ry]);
        let (lx, ly) = to_body(track.offset_point(s, wl));
        left.extend([lx, ly]);
        let (qx, qy) = to_body(track.offset_point(s, -wr));
        right.extend([qx, qy]);
    }
    obs.extend(left);
    obs.extend(right);
    obs
}

#[derive(Debug, Clone)]
struct LapTracker {
    index: usize,
    start_tick: u64,
    distance: f64,
    clean: bool,
    flying: bool,
    causes: Vec<TerminalCause>,
    speed_sum: f64,
    speed_max: f64,
    samples: u64,
}

impl LapTracker {
    fn new(index: usize, start_tick: u64, flying: bool) -> Self {
        Self {
            index,
            start_tick,
            distance: 0.0,
            clean: true,
            flying,
            causes: Vec::new(),
            speed_sum: 0.0,
            speed_max: 0.0,
            samples: 0,
        }
    }
}

/// The racing environment. Single-threaded; owned by the actor.
#[derive(Debug, Clone)]
pub struct RaceEnv {
    track: Arc<Track>,
    params: VehicleParams,
    cfg: EnvConfig,
    base: Option<BaseController>,
    recovery_controller: BaseController,
    state: VehicleState,
    tick: u64,
    control_divider: RateDivider,
    base_every: u64,
    safety: SafetyFilterState,
    curriculum: CurriculumState,
    u_base: ControlInput,
    u_rl_prev: ControlInput,
    lap: LapTracker,
    laps: Vec<LapRecord>,
    needs_recovery: bool,
    episode_id: u64,
    agent_steps: u64,
    filter_trace: Vec<FilterTraceEntry>,
    curriculum_trace: Vec<CurriculumTraceEntry>,
    trace: Option<Vec<TraceRow>>,
    violations: u64,
}

impl RaceEnv {
    /// `base` is required in residual mode. Recovery uses the base
    /// controller when it is pursuit-based and pure pursuit otherwise.
    pub fn new(
        track: Arc<Track>,
        params: VehicleParams,
        cfg: EnvConfig,
        base: Option<BaseController>,
    ) -> Result<Self, EnvError> {
        if cfg.mode == ActionMode::Residual && base.is_none() {
            return Err(EnvError::Config("residual mode requires a base controller".into()));
        }
        if track.velocity_profile().is_none() {
            return Err(EnvError::Config("track has no velocity profile".into()));
        }
        if cfg.physics_hz == 0 || cfg.control_hz == 0 || cfg.base_hz == 0 || cfg.physics_hz % cfg.base_hz != 0 {
            return Err(EnvError::Config(format!(
                "physics rate {} must be a positive multiple of the base rate {}",
                cfg.physics_hz, cfg.base_hz
            )));
        }
        if cfg.observation.points < 2 || cfg.observation.horizon <= 0.0 {
            return Err(EnvError::Config("observation needs at least 2 points and a positive horizon".into()));
        }
        params.validate().map_err(EnvError::Config)?;
        let recovery_controller = match &base {
            Some(b @ (BaseController::PurePursuit(_) | BaseController::Map(..))) => b.clone(),
            _ => BaseController::PurePursuit(PurePursuitConfig { wheelbase: params.wheelbase(), ..Default::default() }),
        };
        let mut env = Self {
            track,
            params,
            cfg,
            base,
            recovery_controller,
            state: VehicleState::default(),
            tick: 0,
            control_divider: RateDivider::new(cfg.physics_hz, cfg.control_hz),
            base_every: cfg.physics_hz / cfg.base_hz,
            safety: SafetyFilterState { psi_filter: cfg.safety_filter.psi_min, ..cfg.safety_filter },
            curriculum: CurriculumState::default(),
            u_base: ControlInput::ZERO,
            u_rl_prev: ControlInput::ZERO,
            lap: LapTracker::new(0, 0, false),
            laps: Vec::new(),
            needs_recovery: false,
            episode_id: 0,
            agent_steps: 0,
            filter_trace: Vec::new(),
            curriculum_trace: Vec::new(),
            trace: None,
            violations: 0,
        };
        env.place(cfg.start_s);
        Ok(env)
    }

    fn dt(&self) -> f64 {
        1.0 / self.cfg.physics_hz as f64
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }
    pub fn track(&self) -> &Track {
        &self.track
    }
    pub fn params(&self) -> &VehicleParams {
        &self.params
    }
    pub fn state(&self) -> &VehicleState {
        &self.state
    }
    pub fn mode(&self) -> ActionMode {
        self.cfg.mode
    }
    pub fn base_controller(&self) -> Option<&BaseController> {
        self.base.as_ref()
    }
    pub fn safety_filter(&self) -> SafetyFilterState {
        self.safety
    }
    pub fn curriculum(&self) -> CurriculumState {
        self.curriculum
    }
    pub fn set_curriculum(&mut self, cs: CurriculumState) {
        self.curriculum = cs;
    }
    pub fn set_safety_filter(&mut self, psi: f64) {
        self.safety.psi_filter = psi.clamp(self.safety.psi_min, self.safety.psi_max);
    }
    pub fn needs_recovery(&self) -> bool {
        self.needs_recovery
    }
    pub fn episode_id(&self) -> u64 {
        self.episode_id
    }
    pub fn sim_time(&self) -> f64 {
        self.tick as f64 * self.dt()
    }
    pub fn agent_steps(&self) -> u64 {
        self.agent_steps
    }
    pub fn laps(&self) -> &[LapRecord] {
        &self.laps
    }
    pub fn boundary_violations(&self) -> u64 {
        self.violations
    }
    pub fn filter_trace(&self) -> &[FilterTraceEntry] {
        &self.filter_trace
    }
    pub fn curriculum_trace(&self) -> &[CurriculumTraceEntry] {
        &self.curriculum_trace
    }
    pub fn observation_dim(&self) -> usize {
        self.cfg.observation.dim(self.cfg.mode)
    }

    /// Bounds the agent's action lives in, after denormalization.
    pub fn action_box(&self) -> ActionBox {
        match self.cfg.mode {
            ActionMode::Residual => residual_box(),
            ActionMode::E2e => e2e_box(self.curriculum.alpha),
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }
    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn place(&mut self, s: f64) {
        self.state = VehicleState::at(self.track.wrap_s(s), self.cfg.reset_speed);
        self.u_rl_prev = ControlInput::ZERO;
        self.refresh_base();
    }

    fn refresh_base(&mut self) {
        self.u_base = match &self.base {
            Some(b) => b.command(&self.state, &self.track),
            None => ControlInput::ZERO,
        };
    }

    /// Places the car on the reference line and starts a new episode.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let start = if self.cfg.randomize_start {
            ChaCha8Rng::seed_from_u64(seed).random_range(0.0..self.track.total_length())
        } else {
            self.cfg.start_s
        };
        self.place(start);
        self.needs_recovery = false;
        self.episode_id += 1;
        self.lap = LapTracker::new(self.laps.len(), self.tick, false);
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        let base = match self.cfg.mode {
            ActionMode::Residual => Some(self.u_base),
            ActionMode::E2e => None,
        };
        build_observation(&self.state, base, self.u_rl_prev, &self.track, &self.cfg.observation)
    }

    /// Latest base-controller command (post-clamp).
    pub fn base_command(&self) -> ControlInput {
        self.u_base
    }

    fn record_violation(&mut self) {
        self.violations += 1;
        self.lap.clean = false;
        let before = self.safety;
        self.safety = update_safety_filter(self.safety, FilterEvent::BoundaryViolation);
        self.filter_trace.push(FilterTraceEntry {
            t_s: self.sim_time(),
            event: FilterEvent::BoundaryViolation,
            psi_before: before.psi_filter,
            psi_after: self.safety.psi_filter,
        });
        if self.cfg.mode == ActionMode::E2e {
            let before = self.curriculum;
            self.curriculum = update_curriculum(self.curriculum, false);
            self.curriculum_trace.push(CurriculumTraceEntry {
                t_s: self.sim_time(),
                lap_clean: false,
                before,
                after: self.curriculum,
            });
        }
    }

    /// Advances one physics tick under `cmd`; returns the progress made and
    /// any laps completed, or the singularity error.
    fn physics_tick(&mut self, cmd: ControlInput) -> Result<(f64, Option<LapRecord>), PlantError> {
        let prev_s = self.state.s;
        let next = plant::step(&self.state, cmd, &self.params, &self.track, self.dt())?;
        self.state = next;
        self.tick += 1;
        let ds = self.track.progress_delta(prev_s, next.s);
        self.lap.distance += ds;
        self.lap.speed_sum += next.v_x;
        self.lap.speed_max = self.lap.speed_max.max(next.v_x);
        self.lap.samples += 1;
        let crossed = prev_s + ds >= self.track.total_length();
        let mut finished = None;
        if crossed && self.lap.distance >= 0.5 * self.track.total_length() {
            finished = Some(self.finish_lap());
        }
        Ok((ds, finished))
    }

    fn finish_lap(&mut self) -> LapRecord {
        let record = LapRecord {
            lap_index: self.lap.index,
            lap_time_s: (self.tick - self.lap.start_tick) as f64 * self.dt(),
            clean: self.lap.clean,
            flying: self.lap.flying,
            terminal_causes: self.lap.causes.clone(),
            mean_speed: self.lap.speed_sum / self.lap.samples.max(1) as f64,
            max_speed: self.lap.speed_max,
            finished_at_s: self.sim_time(),
            finished_at_step: self.agent_steps,
        };
        let carry = self.lap.distance - self.track.total_length();
        self.lap = LapTracker::new(record.lap_index + 1, self.tick, true);
        self.lap.distance = carry;
        if record.clean {
            let before = self.safety;
            self.safety = update_safety_filter(self.safety, FilterEvent::LapCompleted);
            self.filter_trace.push(FilterTraceEntry {
                t_s: self.sim_time(),
                event: FilterEvent::LapCompleted,
                psi_before: before.psi_filter,
                psi_after: self.safety.psi_filter,
            });
            if self.cfg.mode == ActionMode::E2e {
                let before = self.curriculum;
                self.curriculum = update_curriculum(self.curriculum, true);
                self.curriculum_trace.push(CurriculumTraceEntry {
                    t_s: self.sim_time(),
                    lap_clean: true,
                    before,
                    after: self.curriculum,
                });
            }
        }
        self.laps.push(record.clone());
        record
    }

    /// One control period under the agent's command (physical units).
    ///
    /// # Panics
    /// If called while a recovery is pending.
    pub fn step(&mut self, action_rl: ControlInput) -> StepResult {
        assert!(!self.needs_recovery, "step called while recovery is pending");
        let u_rl = self.action_box().clamp(action_rl);
        let ticks = self.control_divider.next_count();
        let mut progress = 0.0;
        let mut cause = TerminalCause::None;
        let mut laps = Vec::new();
        let mut last_cmd = ControlInput::ZERO;
        for _ in 0..ticks {
            if self.tick % self.base_every == 0 {
                self.refresh_base();
            }
            let cmd = compose_action(u_rl, self.u_base, self.cfg.mode, self.curriculum.alpha);
            last_cmd = cmd;
            match self.physics_tick(cmd) {
                Err(_) => cause = TerminalCause::Singularity,
                Ok((ds, lap)) => {
                    progress += ds;
                    laps.extend(lap);
                    let pose = FrenetPose::new(self.state.s, self.state.n, self.state.mu);
                    if self.track.boundary_violation(&pose) {
                        cause = TerminalCause::BoundaryViolation;
                    } else if self.state.mu.abs() > self.safety.psi_filter {
                        cause = TerminalCause::SafetyFilter;
                    }
                }
            }
            if cause != TerminalCause::None {
                break;
            }
        }
        self.agent_steps += 1;
        let terminal = cause != TerminalCause::None;
        let reward = if terminal { -self.cfg.reward.penalty } else { self.cfg.reward.lambda * progress };
        if terminal {
            self.lap.causes.push(cause);
            if cause == TerminalCause::BoundaryViolation {
                self.record_violation();
            }
            self.needs_recovery = true;
        }
        self.u_rl_prev = u_rl;
        self.refresh_base();
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRow {
                t_s: self.tick as f64 / self.cfg.physics_hz as f64,
                s_m: self.state.s,
                n_m: self.state.n,
                mu_rad: self.state.mu,
                v_x: self.state.v_x,
                v_y: self.state.v_y,
                r: self.state.r,
                delta: self.state.delta,
                delta_cmd: last_cmd.delta_cmd,
                v_cmd: last_cmd.v_cmd,
                reward,
                terminal_cause: cause,
            });
        }
        StepResult {
            observation: self.observe(),
            reward,
            terminal,
            terminal_cause: cause,
            info: StepInfo {
                s: self.state.s,
                lap_count: self.laps.len(),
                lap_time_s: (self.tick - self.lap.start_tick) as f64 * self.dt(),
                delta_s: progress,
            },
            laps,
        }
    }

    fn aligned(&self) -> bool {
        self.state.n.abs() < self.cfg.recovery.n_tol && self.state.mu.abs() < self.cfg.recovery.mu_tol
    }

    /// Drives back to the reference line with the recovery controller at
    /// reduced speed, then starts a new episode. Laps finishing meanwhile are
    /// returned alongside the outcome. A singularity or timeout puts the car
    /// back on the line.
    pub fn run_recovery(&mut self) -> (Vec<f64>, RecoveryOutcome, Vec<LapRecord>) {
        let mut laps = Vec::new();
        let mut outcome = RecoveryOutcome::AlreadyAligned;
        if !self.aligned() {
            outcome = RecoveryOutcome::TimedOut;
            let limit = (self.cfg.recovery.timeout_s * self.cfg.physics_hz as f64).round() as u64;
            let mut cmd = ControlInput::ZERO;
            for i in 0..limit {
                if i == 0 || self.tick % self.base_every == 0 {
                    let u = self.recovery_controller.command(&self.state, &self.track);
                    cmd = ControlInput::new(u.delta_cmd, u.v_cmd.min(self.cfg.recovery.speed));
                }
                match self.physics_tick(cmd) {
                    Ok((_, lap)) => laps.extend(lap),
                    Err(_) => break,
                }
                if self.aligned() {
                    outcome = RecoveryOutcome::Converged;
                    break;
                }
            }
            if outcome == RecoveryOutcome::TimedOut {
                let s = self.state.s;
                self.state = VehicleState::at(s, self.cfg.reset_speed);
            }
        }
        self.needs_recovery = false;
        self.episode_id += 1;
        self.u_rl_prev = ControlInput::ZERO;
        self.refresh_base();
        (self.observe(), outcome, laps)
    }

    /// Overrides the vehicle state (tests and scripted scenarios).
    pub fn set_state(&mut self, state: VehicleState) {
        self.state = state;
        self.refresh_base();
    }

    /// Forces the recovery flag, as after a terminal.
    pub fn schedule_recovery(&mut self) {
        self.needs_recovery = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{bundled, shapes};

    fn pp_env(track: Track, mode: ActionMode) -> RaceEnv {
        let v = track.generate_velocity_profile(0.5, 9.81, 3.0, 4.0);
        let track = Arc::new(track.with_velocity_profile(v));
        let base = BaseController::PurePursuit(PurePursuitConfig::default());
        let cfg = EnvConfig { mode, ..Default::default() };
        RaceEnv::new(track, VehicleParams::default(), cfg, Some(base)).unwrap()
    }

    #[test]
    fn safety_filter_updates() {
        let sf = SafetyFilterState { psi_filter: FRAC_PI_2, ..Default::default() };
        assert_eq!(update_safety_filter(sf, FilterEvent::LapCompleted).psi_filter, FRAC_PI_2);
        let sf = SafetyFilterState { psi_filter: FRAC_PI_6 + 0.05, ..Default::default() };
        assert_eq!(update_safety_filter(sf, FilterEvent::BoundaryViolation).psi_filter, FRAC_PI_6);
        let start = SafetyFilterState { psi_filter: 0.9, ..Default::default() };
        let mut sf = start;
        for _ in 0..5 {
            sf = update_safety_filter(sf, FilterEvent::LapCompleted);
            sf = update_safety_filter(sf, FilterEvent::BoundaryViolation);
        }
        assert!((sf.psi_filter - start.psi_filter).abs() < 1e-12);
    }

    #[test]
    fn curriculum_rule() {
        let cs = CurriculumState { alpha: 1.0, consecutive_clean_laps: 2 };
        assert_eq!(update_curriculum(cs, true), CurriculumState { alpha: 1.5, consecutive_clean_laps: 0 });
        let cs = CurriculumState { alpha: 7.0, consecutive_clean_laps: 2 };
        assert_eq!(update_curriculum(cs, true).alpha, 7.0);
        let cs = CurriculumState { alpha: 2.0, consecutive_clean_laps: 2 };
        assert_eq!(update_curriculum(cs, false), CurriculumState { alpha: 2.0, consecutive_clean_laps: 0 });
    }

    #[test]
    fn compose_examples() {
        let base = ControlInput::new(0.2, 3.0);
        assert_eq!(compose_action(ControlInput::ZERO, base, ActionMode::Residual, 1.0), base);
        let u = compose_action(ControlInput::new(0.15, 2.0), ControlInput::new(0.40, 9.5), ActionMode::Residual, 1.0);
        assert!((u.delta_cmd - 0.55).abs() < 1e-12 && (u.v_cmd - 11.5).abs() < 1e-12);
        let p = VehicleParams::default();
        assert_eq!(plant::steer_toward(0.41, u.delta_cmd, &p, 0.01), 0.42);
        assert_eq!(plant::speed_tracking_accel(u.v_cmd, 10.0, &p), 0.0);
        for a in [[-1.0, -1.0], [1.0, 1.0], [0.3, -0.2]] {
            let u = e2e_box(1.0).denormalize(a);
            let c = compose_action(u, base, ActionMode::E2e, 1.0);
            assert!((0.5..=1.0).contains(&c.v_cmd));
        }
    }

    #[test]
    fn reset_is_deterministic_and_dims_match() {
        let mut env = pp_env(bundled::c_like(), ActionMode::Residual);
        let a = env.reset(7);
        let b = env.reset(7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 129);
        let mut env = pp_env(bundled::c_like(), ActionMode::E2e);
        assert_eq!(env.reset(7).len(), 127);
    }

    #[test]
    fn residual_requires_base() {
        let track = bundled::c_like();
        let v = track.generate_velocity_profile(1.0, 9.81, 3.0, 4.0);
        let track = Arc::new(track.with_velocity_profile(v));
        let err = RaceEnv::new(track, VehicleParams::default(), EnvConfig::default(), None).unwrap_err();
        assert!(matches!(err, EnvError::Config(_)));
    }

    #[test]
    fn straight_observation_geometry() {
        let track = shapes::stadium(40.0, 3.0, 0.1, 1.0);
        let state = VehicleState::at(5.0, 2.0);
        let cfg = ObservationConfig::default();
        let obs = build_observation(&state, Some(ControlInput::ZERO), ControlInput::ZERO, &track, &cfg);
        let j = cfg.points;
        let refs = &obs[9..9 + 2 * j];
        let left = &obs[9 + 2 * j..9 + 4 * j];
        let right = &obs[9 + 4 * j..];
        for k in 0..j {
            assert!(refs[2 * k + 1].abs() < 1e-12);
            assert!((left[2 * k + 1] - 1.0 / cfg.horizon).abs() < 1e-12);
            assert!((right[2 * k + 1] + 1.0 / cfg.horizon).abs() < 1e-12);
        }
        assert!(refs[0].abs() < 1e-12);
    }

    #[test]
    fn progress_reward_and_terminal_penalty() {
        let mut env = pp_env(bundled::c_like(), ActionMode::Residual);
        env.reset(1);
        let r = env.step(ControlInput::ZERO);
        assert!(!r.terminal);
        assert!((r.reward - 10.0 * r.info.delta_s).abs() < 1e-12);
        assert!(r.info.delta_s > 0.0);

        let s = env.state().s;
        let (wl, _) = env.track().widths_at(s);
        env.set_state(VehicleState { n: wl - 0.001, mu: 0.3, ..VehicleState::at(s, 3.0) });
        env.set_safety_filter(PI / 2.0);
        let r = env.step(ControlInput::new(0.15, 2.0));
        assert!(r.terminal);
        assert_eq!(r.terminal_cause, TerminalCause::BoundaryViolation);
        assert_eq!(r.reward, -10.0);
    }

    #[test]
    fn safety_filter_terminal() {
        let mut env = pp_env(bundled::c_like(), ActionMode::Residual);
        env.reset(1);
        let psi = env.safety_filter().psi_filter;
        let s = env.state().s;
        env.set_state(VehicleState { mu: psi + 0.01, ..VehicleState::at(s, 1.0) });
        let r = env.step(ControlInput::ZERO);
        assert_eq!(r.terminal_cause, TerminalCause::SafetyFilter);
        assert_eq!(r.reward, -10.0);
    }

    #[test]
    fn recovery_from_aligned_exits_immediately() {
        let mut env = pp_env(bundled::c_like(), ActionMode::Residual);
        env.reset(1);
        env.schedule_recovery();
        let t0 = env.sim_time();
        let (_, outcome, _) = env.run_recovery();
        assert_eq!(outcome, RecoveryOutcome::AlreadyAligned);
        assert_eq!(env.sim_time(), t0);
    }

    #[test]
    fn recovery_converges_from_outside() {
        let mut env = pp_env(bundled::c_like(), ActionMode::Residual);
        env.reset(1);
        let s = 5.0;
        let (_, wr) = env.track().widths_at(s);
        env.set_state(VehicleState { n: -(wr + 0.5), mu: -30f64.to_radians(), ..VehicleState::at(s, 1.0) });
        env.schedule_recovery();
        let (_, outcome, _) = env.run_recovery();
        assert_eq!(outcome, RecoveryOutcome::Converged);
        assert!(env.state().n.abs() < 0.15 && env.state().mu.abs() < 0.15);
        assert!(!env.needs_recovery());
    }

    #[test]
    fn scripted_clean_lap_reward_equals_track_length() {
        let mut env = pp_env(bundled::c_like(), ActionMode::Residual);
        env.reset(3);
        let mut total = 0.0;
        let mut lap = None;
        for _ in 0..2000 {
            let r = env.step(ControlInput::ZERO);
            assert!(!r.terminal);
            total += r.reward;
            if let Some(l) = r.laps.first() {
                lap = Some(l.clone());
                break;
            }
        }
        let lap = lap.expect("lap completed");
        assert!(lap.clean);
        // the step that crossed the line carried past it by `carry`
        let carry = env.state().s;
        let expected = 10.0 * (env.track().total_length() + carry);
        assert!((total - expected).abs() < 10.0 * 0.01, "{total} vs {expected}");
    }
}
