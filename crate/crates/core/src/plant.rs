//! Curvilinear dynamic single-track vehicle with Pacejka lateral tires.
//!
//! The six dynamic states `[s, n, mu, v_x, v_y, r]` evolve under the
//! curvilinear bicycle equations and are integrated with classical RK4 at
//! a fixed physics step. Steering is a rate-limited actuator state and the
//! speed command is tracked by a first-order lag, saturated at
//! `a_long_max`. Below 0.3 m/s the lateral dynamics are blended into a
//! kinematic bicycle so the slip angles stay defined at rest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::track::{wrap_angle, Track};

pub const GRAVITY: f64 = 9.81;
/// Minimum admissible `|1 - kappa n|`.
pub const SINGULARITY_GUARD: f64 = 0.05;
/// Below this speed the model is fully kinematic.
pub const V_KINEMATIC: f64 = 0.1;
/// Above this speed the model is fully dynamic.
pub const V_DYNAMIC: f64 = 0.3;
const KINEMATIC_RELAXATION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum PlantError {
    #[error("curvilinear singularity: |1 - kappa n| = {value:.4} (kappa {kappa:.4}, n {n:.4})")]
    Singularity { kappa: f64, n: f64, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacejkaCoeffs {
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "E")]
    pub e: f64,
    /// Static vertical load on the lumped axle, N.
    #[serde(rename = "F_z")]
    pub f_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TirePreset {
    #[default]
    Turbo,
    Tpu,
}

impl TirePreset {
    pub fn mu_static(self) -> f64 {
        match self {
            TirePreset::Turbo => 1.01,
            TirePreset::Tpu => 0.75,
        }
    }
}

impl std::str::FromStr for TirePreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "turbo" => Ok(TirePreset::Turbo),
            "tpu" => Ok(TirePreset::Tpu),
            other => Err(format!("unknown tire preset `{other}` (expected turbo or tpu)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub m: f64,
    #[serde(rename = "I_z")]
    pub i_z: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub mu_friction: f64,
    pub pacejka_front: PacejkaCoeffs,
    pub pacejka_rear: PacejkaCoeffs,
    pub delta_max: f64,
    pub v_max: f64,
    pub a_long_max: f64,
    pub steer_rate_max: f64,
    pub speed_tau: f64,
}

impl VehicleParams {
    /// 1:10-scale defaults on the given tire set.
    pub fn with_preset(preset: TirePreset) -> Self {
        let (m, l_f, l_r) = (3.5, 0.16, 0.16);
        let wheelbase = l_f + l_r;
        let coeffs = |b, f_z| PacejkaCoeffs { b, c: 1.5, d: 1.0, e: 0.5, f_z };
        Self {
            m,
            i_z: 0.05,
            l_f,
            l_r,
            mu_friction: preset.mu_static(),
            // softer front axle: mild understeer
            pacejka_front: coeffs(4.0, m * GRAVITY * l_r / wheelbase),
            pacejka_rear: coeffs(5.0, m * GRAVITY * l_f / wheelbase),
            delta_max: 0.42,
            v_max: 10.0,
            a_long_max: 7.0,
            steer_rate_max: 3.2,
            speed_tau: 0.3,
        }
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("m", self.m),
            ("I_z", self.i_z),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("mu_friction", self.mu_friction),
            ("delta_max", self.delta_max),
            ("v_max", self.v_max),
            ("a_long_max", self.a_long_max),
            ("steer_rate_max", self.steer_rate_max),
            ("speed_tau", self.speed_tau),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(format!("{name} must be positive, got {value}"));
            }
        }
        for (name, c) in [("pacejka_front", self.pacejka_front), ("pacejka_rear", self.pacejka_rear)] {
            if !(c.b > 0.0 && c.c > 0.0 && c.d > 0.0 && c.f_z > 0.0) {
                return Err(format!("{name}: B, C, D and F_z must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self::with_preset(TirePreset::Turbo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub s: f64,
    pub n: f64,
    /// Heading relative to the reference tangent.
    pub mu: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub r: f64,
    /// Current steering angle (actuator state).
    pub delta: f64,
}

impl VehicleState {
    pub fn at(s: f64, v_x: f64) -> Self {
        Self { s, v_x, ..Default::default() }
    }

    fn dynamic(&self) -> [f64; 6] {
        [self.s, self.n, self.mu, self.v_x, self.v_y, self.r]
    }

    fn with_dynamic(&self, x: [f64; 6]) -> Self {
        Self { s: x[0], n: x[1], mu: x[2], v_x: x[3], v_y: x[4], r: x[5], delta: self.delta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub delta_cmd: f64,
    pub v_cmd: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { delta_cmd: 0.0, v_cmd: 0.0 };

    pub fn new(delta_cmd: f64, v_cmd: f64) -> Self {
        Self { delta_cmd, v_cmd }
    }
}

/// Pacejka Magic Formula `mu F_z D sin(C atan(B a - E (B a - atan(B a))))`.
pub fn lateral_tire_force(coeffs: &PacejkaCoeffs, mu_friction: f64, alpha: f64) -> f64 {
    let ba = coeffs.b * alpha;
    mu_friction * coeffs.f_z * coeffs.d * (coeffs.c * (ba - coeffs.e * (ba - ba.atan())).atan()).sin()
}

/// `(alpha_f, alpha_r)` using the state's current steering angle.
pub fn slip_angles(state: &VehicleState, params: &VehicleParams) -> (f64, f64) {
    let alpha_f = ((state.v_y + state.r * params.l_f) / state.v_x).atan() - state.delta;
    let alpha_r = ((state.v_y - state.r * params.l_r) / state.v_x).atan();
    (alpha_f, alpha_r)
}

/// Lateral axle forces acting on the chassis. They oppose the slip angle,
/// so the Magic Formula value enters with a negative sign.
pub fn axle_forces(state: &VehicleState, params: &VehicleParams) -> (f64, f64) {
    let (alpha_f, alpha_r) = slip_angles(state, params);
    (
        -lateral_tire_force(&params.pacejka_front, params.mu_friction, alpha_f),
        -lateral_tire_force(&params.pacejka_rear, params.mu_friction, alpha_r),
    )
}

/// Time derivative of `[s, n, mu, v_x, v_y, r]` for longitudinal input
/// `accel` and steering angle `delta` on a reference of curvature `kappa_ref`.
pub fn state_derivative(
    state: &VehicleState,
    accel: f64,
    delta: f64,
    params: &VehicleParams,
    kappa_ref: f64,
) -> Result<[f64; 6], PlantError> {
    let guard = 1.0 - kappa_ref * state.n;
    if guard.abs() <= SINGULARITY_GUARD || !guard.is_finite() {
        return Err(PlantError::Singularity { kappa: kappa_ref, n: state.n, value: guard.abs() });
    }
    let (sin_mu, cos_mu) = state.mu.sin_cos();
    let s_dot = (state.v_x * cos_mu - state.v_y * sin_mu) / guard;
    let n_dot = state.v_x * sin_mu + state.v_y * cos_mu;
    let mu_dot = state.r - kappa_ref * s_dot;

    let blend = ((state.v_x - V_KINEMATIC) / (V_DYNAMIC - V_KINEMATIC)).clamp(0.0, 1.0);
    let dynamic = if blend > 0.0 {
        let st = VehicleState { delta, ..*state };
        let (f_yf, f_yr) = axle_forces(&st, params);
        let (sin_d, cos_d) = delta.sin_cos();
        let m = params.m;
        [
            accel + (-f_yf * sin_d + m * state.v_y * state.r) / m,
            (f_yr + f_yf * cos_d - m * state.v_x * state.r) / m,
            (f_yf * params.l_f * cos_d - f_yr * params.l_r) / params.i_z,
        ]
    } else {
        [0.0; 3]
    };
    let kinematic = if blend < 1.0 {
        let tan_d = delta.tan();
        let wheelbase = params.wheelbase();
        let r_kin = state.v_x * tan_d / wheelbase;
        let v_y_kin = r_kin * params.l_r;
        [
            accel,
            accel * params.l_r * tan_d / wheelbase + (v_y_kin - state.v_y) / KINEMATIC_RELAXATION,
            accel * tan_d / wheelbase + (r_kin - state.r) / KINEMATIC_RELAXATION,
        ]
    } else {
        [0.0; 3]
    };
    let mix = |i: usize| blend * dynamic[i] + (1.0 - blend) * kinematic[i];
    Ok([s_dot, n_dot, mu_dot, mix(0), mix(1), mix(2)])
}

/// Longitudinal acceleration produced by the speed-tracking lag.
pub fn speed_tracking_accel(v_cmd: f64, v_x: f64, params: &VehicleParams) -> f64 {
    let target = v_cmd.clamp(0.0, params.v_max);
    ((target - v_x) / params.speed_tau).clamp(-params.a_long_max, params.a_long_max)
}

/// Steering actuator after one step toward the clamped command.
pub fn steer_toward(delta: f64, delta_cmd: f64, params: &VehicleParams, dt: f64) -> f64 {
    let target = delta_cmd.clamp(-params.delta_max, params.delta_max);
    let max_move = params.steer_rate_max * dt;
    (delta + (target - delta).clamp(-max_move, max_move)).clamp(-params.delta_max, params.delta_max)
}

/// One RK4 step with inputs held constant, curvature looked up along the way.
pub fn integrate(
    state: &VehicleState,
    accel: f64,
    delta: f64,
    params: &VehicleParams,
    kappa_at: impl Fn(f64) -> f64,
    dt: f64,
) -> Result<VehicleState, PlantError> {
    let x0 = state.dynamic();
    let eval = |x: [f64; 6]| state_derivative(&state.with_dynamic(x), accel, delta, params, kappa_at(x[0]));
    let shift = |x: [f64; 6], k: [f64; 6], h: f64| std::array::from_fn(|i| x[i] + h * k[i]);
    let k1 = eval(x0)?;
    let k2 = eval(shift(x0, k1, 0.5 * dt))?;
    let k3 = eval(shift(x0, k2, 0.5 * dt))?;
    let k4 = eval(shift(x0, k3, dt))?;
    let x1: [f64; 6] = std::array::from_fn(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    Ok(state.with_dynamic(x1))
}

/// Advances the vehicle by `dt` seconds under `cmd`.
pub fn step(
    state: &VehicleState,
    cmd: ControlInput,
    params: &VehicleParams,
    track: &Track,
    dt: f64,
) -> Result<VehicleState, PlantError> {
    let delta = steer_toward(state.delta, cmd.delta_cmd, params, dt);
    let accel = speed_tracking_accel(cmd.v_cmd, state.v_x, params);
    let current = VehicleState { delta, ..*state };
    let mut next = integrate(&current, accel, delta, params, |s| track.curvature_at(s), dt)?;
    next.s = track.wrap_s(next.s);
    next.mu = wrap_angle(next.mu);
    next.v_x = next.v_x.max(0.0);
    Ok(next)
}

/// Steady cornering on a circle of curvature `kappa` at longitudinal speed `v_x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyCornering {
    pub delta: f64,
    pub v_y: f64,
    pub r: f64,
    /// Relative heading that keeps the velocity tangent to the circle.
    pub mu: f64,
    /// Longitudinal input holding `v_x` constant.
    pub accel: f64,
}

/// Solves `v_y' = r' = 0` with `r = kappa * |v|` by Newton iteration on
/// `(delta, v_y)`. Returns `None` when the iteration does not converge to a
/// steering angle inside `delta_max` (beyond the friction limit).
pub fn steady_cornering(params: &VehicleParams, v_x: f64, kappa: f64) -> Option<SteadyCornering> {
    if kappa == 0.0 {
        return Some(SteadyCornering { delta: 0.0, v_y: 0.0, r: 0.0, mu: 0.0, accel: 0.0 });
    }
    let residual = |delta: f64, v_y: f64| -> [f64; 2] {
        let r = kappa * v_x.hypot(v_y);
        let st = VehicleState { v_x, v_y, r, delta, ..Default::default() };
        let d = state_derivative(&st, 0.0, delta, params, 0.0).expect("n = 0 is never singular");
        [d[4], d[5]]
    };
    let wheelbase = params.wheelbase();
    let mut delta = (wheelbase * kappa).atan();
    let mut v_y = kappa * v_x * v_x.hypot(0.0) * params.l_r / v_x.max(1e-9);
    let scale = [1.0, params.m / params.i_z];
    for _ in 0..100 {
        let f = residual(delta, v_y);
        let norm = (f[0] / scale[0]).abs() + (f[1] / scale[1]).abs();
        if norm < 1e-12 {
            break;
        }
        let h = 1e-7;
        let fd = residual(delta + h, v_y);
        let fv = residual(delta, v_y + h);
        let j = [
            [(fd[0] - f[0]) / h, (fv[0] - f[0]) / h],
            [(fd[1] - f[1]) / h, (fv[1] - f[1]) / h],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let dd = (f[0] * j[1][1] - f[1] * j[0][1]) / det;
        let dv = (j[0][0] * f[1] - j[1][0] * f[0]) / det;
        delta -= dd.clamp(-0.2, 0.2);
        v_y -= dv.clamp(-1.0, 1.0);
        if !(delta.is_finite() && v_y.is_finite()) || delta.abs() > 1.4 {
            return None;
        }
    }
    let f = residual(delta, v_y);
    if f[0].abs() > 1e-8 || f[1].abs() > 1e-8 || delta.abs() > params.delta_max {
        return None;
    }
    let r = kappa * v_x.hypot(v_y);
    let st = VehicleState { v_x, v_y, r, delta, ..Default::default() };
    let (f_yf, _) = axle_forces(&st, params);
    Some(SteadyCornering {
        delta,
        v_y,
        r,
        mu: (-v_y / v_x).atan(),
        accel: f_yf * delta.sin() / params.m - v_y * r,
    })
}
