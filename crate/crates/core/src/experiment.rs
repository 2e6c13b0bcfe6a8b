//! Experiment configuration and the command implementations behind the CLI.
//!
//! Configuration is TOML with one section per subsystem. Any key can be
//! overridden with a dotted path, e.g. `sac.batch_size=64`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controllers::{BaseController, ControllerKind, FtgConfig, MapGridSpec, MapLookupTable, PurePursuitConfig};
use crate::env::{
    residual_box, ActionMode, CurriculumState, EnvConfig, LapRecord, ObservationConfig, RaceEnv, RecoveryConfig,
    RewardConfig, SafetyFilterState,
};
use crate::nn::Checkpoint;
use crate::orchestrator::{
    run_deployment, run_training, AsyncScheduling, DeploymentOptions, DeploymentReport, LapStats, RateSchedule,
    RunMode, TrainingOptions, TrainingReport,
};
use crate::plant::{ControlInput, TirePreset, VehicleParams, GRAVITY};
use crate::sac::{Policy, ReplayBuffer, SacConfig, SacLearner};
use crate::track::Track;

pub use toml::Table as TomlTable;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    /// A bundled name (`c_like`, `y_like`) or a CSV path.
    pub file: String,
    /// Friction used for the reference speed profile, relative to the tires.
    pub profile_friction_scale: f64,
    pub start_s: f64,
}

impl Default for TrackSection {
    fn default() -> Self {
        Self { file: "c_like".into(), profile_friction_scale: 0.8, start_s: 0.0 }
    }
}

/// Tire set plus optional per-field overrides of the vehicle defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleSection {
    pub tire_preset: TirePreset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_friction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_front: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_rear: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_long_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steer_rate_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed_tau: Option<f64>,
}

impl VehicleSection {
    pub fn params(&self) -> VehicleParams {
        let mut p = VehicleParams::with_preset(self.tire_preset);
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.m, self.m);
        set(&mut p.i_z, self.i_z);
        set(&mut p.l_f, self.l_f);
        set(&mut p.l_r, self.l_r);
        set(&mut p.mu_friction, self.mu_friction);
        set(&mut p.pacejka_front.b, self.b_front);
        set(&mut p.pacejka_rear.b, self.b_rear);
        set(&mut p.v_max, self.v_max);
        set(&mut p.a_long_max, self.a_long_max);
        set(&mut p.steer_rate_max, self.steer_rate_max);
        set(&mut p.speed_tau, self.speed_tau);
        // axle loads follow the geometry
        let wb = p.l_f + p.l_r;
        p.pacejka_front.f_z = p.m * GRAVITY * p.l_r / wb;
        p.pacejka_rear.f_z = p.m * GRAVITY * p.l_f / wb;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyFilterSection {
    pub psi_min: f64,
    pub psi_max: f64,
    pub epsilon: f64,
}

impl Default for SafetyFilterSection {
    fn default() -> Self {
        let d = SafetyFilterState::default();
        Self { psi_min: d.psi_min, psi_max: d.psi_max, epsilon: d.epsilon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacSection {
    pub lr: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub hdra_on: bool,
    pub hdra_steps: usize,
    pub tau_polyak: f64,
    pub initial_alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_entropy: Option<f64>,
    pub policy_init_scale: f64,
}

impl Default for SacSection {
    fn default() -> Self {
        let d = SacConfig::default();
        Self {
            lr: d.lr,
            gamma: d.gamma,
            n_steps: d.n_steps,
            buffer_capacity: d.buffer_capacity,
            batch_size: d.batch_size,
            hidden_layers: 2,
            hidden_size: 256,
            hdra_on: d.hdra_on,
            hdra_steps: d.hdra_steps,
            tau_polyak: d.tau_polyak,
            initial_alpha: d.initial_alpha,
            target_entropy: d.target_entropy,
            policy_init_scale: d.policy_init_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllersSection {
    pub pure_pursuit: PurePursuitConfig,
    pub ftg: FtgConfig,
    pub map_grid: MapGridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeploySection {
    /// Checkpoint stem (without extension).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Drive the base controller alone, no checkpoint.
    pub baseline_only: bool,
    pub target_clean_laps: usize,
    pub violation_cap: u64,
    pub max_sim_seconds: f64,
}

impl Default for DeploySection {
    fn default() -> Self {
        let d = DeploymentOptions::default();
        Self {
            checkpoint: None,
            baseline_only: false,
            target_clean_laps: d.target_clean_laps,
            violation_cap: d.violation_cap,
            max_sim_seconds: d.max_sim_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub budget_minutes: f64,
    pub final_window_minutes: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3, 4, 5], budget_minutes: 40.0, final_window_minutes: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shots {
    #[default]
    Zero,
    Few,
}

impl std::fmt::Display for Shots {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Few => "few",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub shots: Shots,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_checkpoint: Option<PathBuf>,
    pub budget_steps: u64,
    pub bin_width_s: f64,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { shots: Shots::Zero, source_checkpoint: None, budget_steps: 12_000, bin_width_s: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub budget_steps: u64,
    pub run_mode: RunMode,
    pub scheduling: AsyncScheduling,
    pub mode: ActionMode,
    pub controller: ControllerKind,
    /// Keep step traces of every k-th training episode (0 disables).
    pub trace_every_episodes: u64,
    pub track: TrackSection,
    pub vehicle: VehicleSection,
    pub observation: ObservationConfig,
    pub reward: RewardConfig,
    pub safety_filter: SafetyFilterSection,
    pub recovery: RecoveryConfig,
    pub sac: SacSection,
    pub rates: RateSchedule,
    pub controllers: ControllersSection,
    pub deploy: DeploySection,
    pub ablation: AblationSection,
    pub transfer: TransferSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            budget_steps: 12_000,
            run_mode: RunMode::TrainAsync,
            scheduling: AsyncScheduling::Virtual,
            mode: ActionMode::Residual,
            controller: ControllerKind::Map,
            trace_every_episodes: 10,
            track: TrackSection::default(),
            vehicle: VehicleSection::default(),
            observation: ObservationConfig::default(),
            reward: RewardConfig::default(),
            safety_filter: SafetyFilterSection::default(),
            recovery: RecoveryConfig::default(),
            sac: SacSection::default(),
            rates: RateSchedule::default(),
            controllers: ControllersSection::default(),
            deploy: DeploySection::default(),
            ablation: AblationSection::default(),
            transfer: TransferSection::default(),
        }
    }
}

/// Sets `path = value` in a TOML table. The value is parsed as TOML when it
/// can be and taken as a string otherwise.
pub fn apply_override(table: &mut TomlTable, path: &str, value: &str) -> Result<(), ExperimentError> {
    let parsed = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ExperimentError::Config(format!("malformed override key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("non-empty key");
    let mut node = table;
    for k in parents {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("override `{path}`: `{k}` is not a section")))?;
    }
    node.insert(last.to_string(), parsed);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let cfg_err = |e: toml::de::Error| ExperimentError::Config(e.to_string());
        // deserializing the raw text first keeps line numbers in file errors
        let _: Self = toml::from_str(text).map_err(cfg_err)?;
        let mut table: toml::Table = text.parse().map_err(cfg_err)?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: Self = table.try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        match (self.mode, self.controller) {
            (ActionMode::E2e, ControllerKind::None) | (ActionMode::Residual, ControllerKind::Pp | ControllerKind::Map | ControllerKind::Ftg) => {}
            (ActionMode::E2e, c) => return fail(format!("mode e2e requires controller = none, got {c}")),
            (ActionMode::Residual, _) => return fail("mode residual requires a base controller (pp, map or ftg)".into()),
        }
        if self.budget_steps == 0 {
            return fail("budget_steps must be positive".into());
        }
        if !(self.track.profile_friction_scale > 0.0) {
            return fail("track.profile_friction_scale must be positive".into());
        }
        let sf = &self.safety_filter;
        if !(sf.psi_min > 0.0 && sf.psi_min <= sf.psi_max && sf.epsilon > 0.0) {
            return fail("safety_filter needs 0 < psi_min <= psi_max and epsilon > 0".into());
        }
        if self.sac.hidden_layers == 0 || self.sac.hidden_size == 0 {
            return fail("sac.hidden_layers and sac.hidden_size must be positive".into());
        }
        self.sac_config().validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.rates.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.vehicle.params().validate().map_err(ExperimentError::Config)?;
        if self.observation.points < 2 || !(self.observation.horizon > 0.0) {
            return fail("observation needs points >= 2 and a positive horizon".into());
        }
        if self.ablation.seeds.is_empty() || !(self.ablation.budget_minutes > self.ablation.final_window_minutes) {
            return fail("ablation needs seeds and budget_minutes > final_window_minutes".into());
        }
        if !(self.transfer.bin_width_s > 0.0) {
            return fail("transfer.bin_width_s must be positive".into());
        }
        Ok(())
    }

    pub fn sac_config(&self) -> SacConfig {
        let s = &self.sac;
        SacConfig {
            gamma: s.gamma,
            n_steps: s.n_steps,
            batch_size: s.batch_size,
            lr: s.lr,
            tau_polyak: s.tau_polyak,
            target_entropy: s.target_entropy,
            initial_alpha: s.initial_alpha,
            hidden: vec![s.hidden_size; s.hidden_layers],
            buffer_capacity: s.buffer_capacity,
            hdra_on: s.hdra_on,
            hdra_steps: s.hdra_steps,
            penalty: self.reward.penalty,
            policy_init_scale: s.policy_init_scale,
        }
    }

    pub fn vehicle_params(&self) -> VehicleParams {
        self.vehicle.params()
    }

    /// Loads the track and attaches a speed profile (a companion raceline
    /// file wins over the generated one).
    pub fn load_track(&self) -> Result<Arc<Track>, ExperimentError> {
        let track = crate::track::bundled::by_name(&self.track.file)
            .map_err(|e| ExperimentError::Config(format!("track `{}`: {e}", self.track.file)))?;
        if track.velocity_profile().is_some() {
            return Ok(Arc::new(track));
        }
        let p = self.vehicle_params();
        let v = track.generate_velocity_profile(
            self.track.profile_friction_scale * p.mu_friction,
            GRAVITY,
            p.a_long_max,
            p.v_max,
        );
        Ok(Arc::new(track.with_velocity_profile(v)))
    }

    pub fn base_controller(&self, kind: ControllerKind) -> Option<BaseController> {
        let mut pp = self.controllers.pure_pursuit;
        pp.wheelbase = self.vehicle_params().wheelbase();
        match kind {
            ControllerKind::Pp => Some(BaseController::PurePursuit(pp)),
            ControllerKind::Map => {
                let table = MapLookupTable::build(&self.vehicle_params(), &self.controllers.map_grid);
                Some(BaseController::Map(Box::new(table), pp))
            }
            ControllerKind::Ftg => Some(BaseController::FollowTheGap(self.controllers.ftg)),
            ControllerKind::None => None,
        }
    }

    pub fn env_config(&self, control_hz: u64, deployment: bool) -> EnvConfig {
        let sf = &self.safety_filter;
        let safety_filter = if deployment {
            // deployment drives with the widest threshold, fixed
            SafetyFilterState { psi_filter: sf.psi_max, psi_min: sf.psi_max, psi_max: sf.psi_max, epsilon: sf.epsilon }
        } else {
            SafetyFilterState { psi_filter: sf.psi_min, psi_min: sf.psi_min, psi_max: sf.psi_max, epsilon: sf.epsilon }
        };
        EnvConfig {
            mode: self.mode,
            observation: self.observation,
            reward: self.reward,
            safety_filter,
            recovery: self.recovery,
            start_s: self.track.start_s,
            control_hz,
            base_hz: self.rates.base_hz,
            physics_hz: self.rates.physics_hz,
            ..EnvConfig::default()
        }
    }

    pub fn build_env(&self, track: Arc<Track>, deployment: bool) -> Result<RaceEnv, ExperimentError> {
        let hz = if deployment { self.rates.deploy_control_hz } else { self.rates.control_hz };
        RaceEnv::new(track, self.vehicle_params(), self.env_config(hz, deployment), self.base_controller(self.controller))
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn build_learner(&self, obs_dim: usize, seed: u64) -> Result<SacLearner, ExperimentError> {
        let mut learner =
            SacLearner::new(self.sac_config(), obs_dim, 2, seed).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.mode == ActionMode::Residual {
            learner.center_policy_on(&residual_box().normalize(ControlInput::ZERO));
        }
        Ok(learner)
    }

    pub fn training_options(&self) -> TrainingOptions {
        TrainingOptions {
            mode: self.run_mode,
            scheduling: self.scheduling,
            budget_steps: self.budget_steps,
            seed: self.seed,
            trace_every_episodes: self.trace_every_episodes,
        }
    }

    pub fn deployment_options(&self) -> DeploymentOptions {
        DeploymentOptions {
            target_clean_laps: self.deploy.target_clean_laps,
            violation_cap: self.deploy.violation_cap,
            max_sim_seconds: self.deploy.max_sim_seconds,
        }
    }
}

const SOURCES: &[&str] = &[
    include_str!("lib.rs"),
    include_str!("track.rs"),
    include_str!("plant.rs"),
    include_str!("controllers.rs"),
    include_str!("env.rs"),
    include_str!("nn.rs"),
    include_str!("sac.rs"),
    include_str!("rates.rs"),
    include_str!("orchestrator.rs"),
    include_str!("experiment.rs"),
];

/// Hash of the library sources this binary was built from.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update(s.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub code_hash: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

pub fn write_manifest(cfg: &ExperimentConfig, dir: &Path, command: &str) -> Result<Manifest, ExperimentError> {
    let m = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        code_hash: code_hash(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
    };
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text).map_err(runtime)
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    fs::write(path, text).map_err(runtime)
}

/// Saves the learner plus the environment's curriculum state.
pub fn save_checkpoint(stem: &Path, learner: &SacLearner, env: &RaceEnv, cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let mut ck = learner.to_checkpoint();
    ck.scalars.insert("curriculum_alpha".into(), env.curriculum().alpha);
    ck.scalars.insert("psi_filter".into(), env.safety_filter().psi_filter);
    ck.metadata = serde_json::json!({
        "mode": cfg.mode,
        "controller": cfg.controller,
        "track": env.track().name(),
        "obs_dim": env.observation_dim(),
        "action_dim": 2,
        "config_hash": cfg.hash(),
    });
    ck.save(stem).map_err(runtime)
}

/// What a saved policy needs to drive.
#[derive(Debug, Clone)]
pub struct LoadedPolicy {
    pub policy: Policy,
    pub checkpoint: Checkpoint,
    pub curriculum_alpha: f64,
    pub source_track: String,
}

pub fn load_policy(stem: &Path, cfg: &ExperimentConfig, obs_dim: usize) -> Result<LoadedPolicy, ExperimentError> {
    let (bin, json) = Checkpoint::paths(stem);
    if !bin.exists() || !json.exists() {
        return Err(ExperimentError::Runtime(format!("checkpoint `{}` not found", stem.display())));
    }
    let ck = Checkpoint::load(stem).map_err(runtime)?;
    let meta_mode: Option<ActionMode> = serde_json::from_value(ck.metadata["mode"].clone()).ok();
    if meta_mode.is_some_and(|m| m != cfg.mode) {
        return Err(ExperimentError::Config(format!("checkpoint was trained in mode {:?}, config says {:?}", meta_mode, cfg.mode)));
    }
    let actor = ck.net("actor").map_err(runtime)?.clone();
    if actor.input_dim() != obs_dim || actor.output_dim() != 4 {
        return Err(ExperimentError::Config(format!(
            "checkpoint actor maps {} -> {}, environment needs {} -> 4",
            actor.input_dim(),
            actor.output_dim(),
            obs_dim
        )));
    }
    Ok(LoadedPolicy {
        policy: Policy { net: actor, action_dim: 2 },
        curriculum_alpha: ck.scalars.get("curriculum_alpha").copied().unwrap_or(CurriculumState::default().alpha),
        source_track: ck.metadata["track"].as_str().unwrap_or_default().to_string(),
        checkpoint: ck,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainingReport,
    pub learner: SacLearner,
    pub env: RaceEnv,
}

/// Trains without touching the filesystem.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome, ExperimentError> {
    cfg.validate()?;
    let track = cfg.load_track()?;
    let mut env = cfg.build_env(track, false)?;
    let mut learner = cfg.build_learner(env.observation_dim(), cfg.seed)?;
    let mut buffer = ReplayBuffer::new(cfg.sac.buffer_capacity, env.observation_dim(), 2);
    let report = run_training(&mut env, &mut learner, &mut buffer, &cfg.rates, &cfg.training_options())
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok(TrainOutcome { report, learner, env })
}

/// `train`: writes checkpoint, report, lap curve, traces and manifest.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainingReport, ExperimentError> {
    let out = train(cfg)?;
    let dir = &cfg.output_dir;
    write_manifest(cfg, dir, "train")?;
    save_checkpoint(&dir.join("checkpoint"), &out.learner, &out.env, cfg)?;
    write_json(&dir.join("training_report.json"), &out.report)?;
    write_text(&dir.join("lap_curve.csv"), &out.report.lap_curve_csv())?;
    write_text(&dir.join("trace.csv"), &crate::env::trace_to_csv(&out.report.trace))?;
    Ok(out.report)
}

/// Deploys `policy` (or the base controller alone) on the config's track.
pub fn deploy(cfg: &ExperimentConfig, policy: Option<&LoadedPolicy>) -> Result<DeploymentReport, ExperimentError> {
    let track = cfg.load_track()?;
    let mut env = cfg.build_env(track, true)?;
    if let Some(p) = policy {
        env.set_curriculum(CurriculumState { alpha: p.curriculum_alpha, consecutive_clean_laps: 0 });
    }
    run_deployment(&mut env, policy.map(|p| &p.policy), &cfg.deployment_options(), cfg.seed)
        .map_err(|e| ExperimentError::Config(e.to_string()))
}

fn write_deployment(dir: &Path, report: &DeploymentReport) -> Result<(), ExperimentError> {
    write_json(&dir.join("deployment_report.json"), report)?;
    write_text(&dir.join("laps.csv"), &report.lap_csv())?;
    write_text(&dir.join("fastest_lap_trace.csv"), &crate::env::trace_to_csv(&report.fastest_lap_trace))
}

/// `deploy`: writes the report, per-lap CSV and the fastest-lap trace.
pub fn cmd_deploy(cfg: &ExperimentConfig) -> Result<DeploymentReport, ExperimentError> {
    cfg.validate()?;
    let loaded = if cfg.deploy.baseline_only {
        if cfg.mode != ActionMode::Residual {
            return Err(ExperimentError::Config("baseline-only deployment needs a base controller".into()));
        }
        None
    } else {
        let stem = cfg
            .deploy
            .checkpoint
            .as_deref()
            .ok_or_else(|| ExperimentError::Config("deploy.checkpoint is required unless deploy.baseline_only".into()))?;
        let obs_dim = cfg.observation.dim(cfg.mode);
        Some(load_policy(stem, cfg, obs_dim)?)
    };
    let report = deploy(cfg, loaded.as_ref())?;
    write_manifest(cfg, &cfg.output_dir, "deploy")?;
    write_deployment(&cfg.output_dir, &report)?;
    Ok(report)
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: &'static str,
    pub hdra_on: bool,
    pub n_steps: usize,
    pub run_mode: RunMode,
}

pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant { name: "HDRA+TD3 async", hdra_on: true, n_steps: 3, run_mode: RunMode::TrainAsync },
    AblationVariant { name: "HDRA+TD3 sync", hdra_on: true, n_steps: 3, run_mode: RunMode::TrainSync },
    AblationVariant { name: "TD3 async", hdra_on: false, n_steps: 3, run_mode: RunMode::TrainAsync },
    AblationVariant { name: "TD1 async", hdra_on: false, n_steps: 1, run_mode: RunMode::TrainAsync },
];

impl AblationVariant {
    pub fn slug(&self) -> String {
        self.name.to_lowercase().replace(['+', ' '], "_")
    }

    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.sac.hdra_on = self.hdra_on;
        cfg.sac.n_steps = self.n_steps;
        cfg.run_mode = self.run_mode;
        cfg.budget_steps = (base.ablation.budget_minutes * 60.0 * base.rates.control_hz as f64).round() as u64;
        cfg.trace_every_episodes = 0;
        cfg
    }
}

/// Final-window view of one ablation training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub run: String,
    pub seed: u64,
    pub budget_steps: u64,
    pub window_start_step: u64,
    pub first_clean_lap_minutes: Option<f64>,
    /// Laps completed inside the final window.
    pub window_laps: Vec<LapRecord>,
    pub window_boundary_violations: u64,
    pub laps: Vec<LapRecord>,
    pub final_window_mean: Option<f64>,
}

impl AblationRun {
    pub fn from_report(run: &str, seed: u64, report: &TrainingReport, window_minutes: f64) -> Self {
        let window_steps = (window_minutes * 60.0 * report.control_hz as f64).round() as u64;
        let start = report.env_steps.saturating_sub(window_steps);
        let window_laps: Vec<LapRecord> = report.laps.iter().filter(|l| l.finished_at_step > start).cloned().collect();
        let clean: Vec<f64> = window_laps.iter().filter(|l| l.clean).map(|l| l.lap_time_s).collect();
        Self {
            run: run.into(),
            seed,
            budget_steps: report.env_steps,
            window_start_step: start,
            first_clean_lap_minutes: report.first_clean_lap_minutes,
            window_boundary_violations: report.violation_steps.iter().filter(|&&s| s > start).count() as u64,
            final_window_mean: LapStats::from_times(&clean).map(|s| s.t_mu),
            window_laps,
            laps: report.laps.clone(),
        }
    }

    pub fn clean_window_times(&self) -> Vec<f64> {
        self.window_laps.iter().filter(|l| l.clean).map(|l| l.lap_time_s).collect()
    }
}

pub const ABLATION_HEADER: &str = "run,t_min,t_max,t_mu,sigma,n_laps_mu,n_bound_mu";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    /// Statistics over the pooled clean laps of all seeds' final windows.
    pub stats: Option<LapStats>,
    pub n_laps_mu: f64,
    pub n_bound_mu: f64,
}

impl AblationRow {
    pub fn aggregate(run: &str, runs: &[AblationRun]) -> Self {
        let pooled: Vec<f64> = runs.iter().flat_map(|r| r.clean_window_times()).collect();
        let n = runs.len().max(1) as f64;
        Self {
            run: run.into(),
            stats: LapStats::from_times(&pooled),
            n_laps_mu: runs.iter().map(|r| r.window_laps.len() as f64).sum::<f64>() / n,
            n_bound_mu: runs.iter().map(|r| r.window_boundary_violations as f64).sum::<f64>() / n,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    let f = |v: Option<f64>| v.map_or(String::from("nan"), |x| x.to_string());
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run,
            f(r.stats.map(|s| s.t_min)),
            f(r.stats.map(|s| s.t_max)),
            f(r.stats.map(|s| s.t_mu)),
            f(r.stats.map(|s| s.sigma)),
            r.n_laps_mu,
            r.n_bound_mu
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

/// Trains one ablation run; no files written.
pub fn ablation_run(base: &ExperimentConfig, variant: &AblationVariant, seed: u64) -> Result<AblationRun, ExperimentError> {
    let cfg = variant.apply(base, seed);
    let out = train(&cfg)?;
    Ok(AblationRun::from_report(variant.name, seed, &out.report, base.ablation.final_window_minutes))
}

/// `ablation`: four variants times the configured seeds.
pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<AblationSummary, ExperimentError> {
    cfg.validate()?;
    write_manifest(cfg, &cfg.output_dir, "ablation")?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for v in &ABLATION_VARIANTS {
        let mut runs = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let run = ablation_run(cfg, v, seed)?;
            write_json(&cfg.output_dir.join("runs").join(format!("{}_seed{seed}.json", v.slug())), &run)?;
            runs.push(run);
        }
        rows.push(AblationRow::aggregate(v.name, &runs));
        all.extend(runs);
    }
    write_text(&cfg.output_dir.join("ablation_summary.csv"), &ablation_csv(&rows))?;
    Ok(AblationSummary { rows, runs: all })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub transfer: Shots,
    pub source_track: String,
    pub target_track: String,
    pub fine_tune_steps: u64,
    pub deployment: DeploymentReport,
}

pub const HISTOGRAM_HEADER: &str = "bin_start_s,bin_end_s,count";

/// Fixed-width histogram with bins aligned to multiples of `width`.
pub fn histogram(times: &[f64], width: f64) -> Vec<(f64, f64, usize)> {
    if times.is_empty() {
        return Vec::new();
    }
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / width).floor() as i64;
    let last = (hi / width).floor() as i64;
    let mut counts = vec![0usize; (last - first + 1) as usize];
    for &t in times {
        counts[((t / width).floor() as i64 - first) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let k = first + i as i64;
            let edge = |j: i64| (j as f64 * width * 1e9).round() / 1e9;
            (edge(k), edge(k + 1), c)
        })
        .collect()
}

pub fn histogram_csv(bins: &[(f64, f64, usize)]) -> String {
    let mut out = format!("{HISTOGRAM_HEADER}\n");
    for (a, b, c) in bins {
        out.push_str(&format!("{a},{b},{c}\n"));
    }
    out
}

/// `transfer`: zero-shot deployment, or fine-tuning then deployment.
pub fn cmd_transfer(cfg: &ExperimentConfig) -> Result<TransferReport, ExperimentError> {
    cfg.validate()?;
    let stem = cfg
        .transfer
        .source_checkpoint
        .as_deref()
        .ok_or_else(|| ExperimentError::Config("transfer.source_checkpoint is required".into()))?;
    let obs_dim = cfg.observation.dim(cfg.mode);
    let mut loaded = load_policy(stem, cfg, obs_dim)?;
    let target = cfg.load_track()?;
    if loaded.source_track == target.name() {
        return Err(ExperimentError::Config(format!("source checkpoint was trained on the target track `{}`", target.name())));
    }
    let mut fine_tune_steps = 0;
    if cfg.transfer.shots == Shots::Few {
        let mut env = cfg.build_env(target.clone(), false)?;
        env.set_curriculum(CurriculumState { alpha: loaded.curriculum_alpha, consecutive_clean_laps: 0 });
        if let Some(&psi) = loaded.checkpoint.scalars.get("psi_filter") {
            env.set_safety_filter(psi);
        }
        let mut learner = cfg.build_learner(obs_dim, cfg.seed)?;
        learner.load_checkpoint(&loaded.checkpoint).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let mut buffer = ReplayBuffer::new(cfg.sac.buffer_capacity, obs_dim, 2);
        let opts = TrainingOptions { budget_steps: cfg.transfer.budget_steps, ..cfg.training_options() };
        let report = run_training(&mut env, &mut learner, &mut buffer, &cfg.rates, &opts)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        fine_tune_steps = report.env_steps;
        write_json(&cfg.output_dir.join("fine_tune_report.json"), &report)?;
        loaded.policy = learner.policy();
        loaded.curriculum_alpha = env.curriculum().alpha;
    }
    let deployment = deploy(cfg, Some(&loaded))?;
    let times: Vec<f64> = deployment.laps.iter().filter(|l| l.clean && l.flying).map(|l| l.lap_time_s).collect();
    let report = TransferReport {
        transfer: cfg.transfer.shots,
        source_track: loaded.source_track.clone(),
        target_track: target.name().to_string(),
        fine_tune_steps,
        deployment,
    };
    write_manifest(cfg, &cfg.output_dir, "transfer")?;
    write_json(&cfg.output_dir.join("transfer_report.json"), &report)?;
    write_text(&cfg.output_dir.join("laps.csv"), &report.deployment.lap_csv())?;
    write_text(&cfg.output_dir.join("histogram.csv"), &histogram_csv(&histogram(&times, cfg.transfer.bin_width_s)))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub name: String,
    pub points: usize,
    pub total_length_m: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub width_min_m: f64,
    pub width_max_m: f64,
    pub profile_v_min: f64,
    pub profile_v_max: f64,
    /// Lap time implied by the reference speed profile.
    pub profile_lap_time_s: f64,
}

pub fn track_info(cfg: &ExperimentConfig) -> Result<TrackInfo, ExperimentError> {
    let t = cfg.load_track()?;
    let k = t.curvature();
    let widths: Vec<f64> = t.points().iter().map(|p| p.w_left + p.w_right).collect();
    let v = t.velocity_profile().expect("profile attached");
    let lap: f64 = t
        .segment_lengths()
        .iter()
        .enumerate()
        .map(|(i, ds)| 2.0 * ds / (v[i] + v[(i + 1) % v.len()]))
        .sum();
    let fold = |xs: &[f64], f: fn(f64, f64) -> f64, init: f64| xs.iter().copied().fold(init, f);
    Ok(TrackInfo {
        name: t.name().to_string(),
        points: t.len(),
        total_length_m: t.total_length(),
        kappa_min: fold(k, f64::min, f64::INFINITY),
        kappa_max: fold(k, f64::max, f64::NEG_INFINITY),
        width_min_m: fold(&widths, f64::min, f64::INFINITY),
        width_max_m: fold(&widths, f64::max, f64::NEG_INFINITY),
        profile_v_min: fold(v, f64::min, f64::INFINITY),
        profile_v_max: fold(v, f64::max, f64::NEG_INFINITY),
        profile_lap_time_s: lap,
    })
}

/// `make-map-table`: steady-state steering table for the configured car.
pub fn make_map_table(cfg: &ExperimentConfig) -> MapLookupTable {
    MapLookupTable::build(&cfg.vehicle_params(), &cfg.controllers.map_grid)
}
