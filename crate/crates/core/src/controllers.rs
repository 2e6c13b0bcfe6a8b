//! Classical base controllers: Pure Pursuit, the tire-aware MAP pursuit and
//! Follow-The-Gap.
//!
//! All three return a [`ControlInput`] inside the base ranges
//! `delta in [-0.42, 0.42]` rad and `v in [0, 10]` m/s.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::plant::{steady_cornering, ControlInput, VehicleParams, VehicleState};
use crate::track::{ray_angles, FrenetPose, Track};

pub const BASE_DELTA_MAX: f64 = 0.42;
pub const BASE_V_MAX: f64 = 10.0;

fn clamp_base(delta: f64, v: f64) -> ControlInput {
    ControlInput::new(delta.clamp(-BASE_DELTA_MAX, BASE_DELTA_MAX), v.clamp(0.0, BASE_V_MAX))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurePursuitConfig {
    pub lookahead_base: f64,
    /// Seconds; lookahead grows linearly with speed.
    pub lookahead_gain: f64,
    pub wheelbase: f64,
    /// Multiplier on the track velocity profile.
    #[serde(default = "one")]
    pub speed_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for PurePursuitConfig {
    fn default() -> Self {
        Self { lookahead_base: 0.5, lookahead_gain: 0.2, wheelbase: 0.32, speed_scale: 1.0 }
    }
}

impl PurePursuitConfig {
    pub fn lookahead(&self, v_x: f64) -> f64 {
        (self.lookahead_base + self.lookahead_gain * v_x).clamp(0.5, 3.0)
    }
}

/// Pursuit geometry shared by PP and MAP: `(eta, L, v_profile)`.
fn pursuit_target(state: &VehicleState, track: &Track, cfg: &PurePursuitConfig) -> (f64, f64, f64) {
    let lookahead = cfg.lookahead(state.v_x);
    let (x, y, heading) = track.frenet_to_global(FrenetPose::new(state.s, state.n, state.mu));
    let s_target = state.s + lookahead;
    let (tx, ty) = track.position(s_target);
    let (dx, dy) = (tx - x, ty - y);
    let (sin_h, cos_h) = heading.sin_cos();
    let lx = cos_h * dx + sin_h * dy;
    let ly = -sin_h * dx + cos_h * dy;
    let eta = ly.atan2(lx);
    let v = cfg.speed_scale * track.velocity_at(s_target).unwrap_or(0.0);
    (eta, lookahead, v)
}

/// Kinematic pure pursuit toward the reference point `L` meters ahead.
pub fn pure_pursuit(state: &VehicleState, track: &Track, cfg: &PurePursuitConfig) -> ControlInput {
    let (eta, lookahead, v) = pursuit_target(state, track, cfg);
    let delta = (2.0 * cfg.wheelbase * eta.sin() / lookahead).atan();
    clamp_base(delta, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapGridSpec {
    pub v_min: f64,
    pub v_max: f64,
    pub v_step: f64,
    pub kappa_max: f64,
    pub kappa_step: f64,
}

impl Default for MapGridSpec {
    fn default() -> Self {
        Self { v_min: 0.5, v_max: 10.0, v_step: 0.25, kappa_max: 1.5, kappa_step: 0.01 }
    }
}

impl MapGridSpec {
    fn axis(min: f64, max: f64, step: f64) -> Vec<f64> {
        let count = ((max - min) / step).round() as usize + 1;
        (0..count).map(|i| min + i as f64 * step).collect()
    }
    pub fn speeds(&self) -> Vec<f64> {
        Self::axis(self.v_min, self.v_max, self.v_step)
    }
    pub fn curvatures(&self) -> Vec<f64> {
        Self::axis(-self.kappa_max, self.kappa_max, self.kappa_step)
    }
}

/// Steering lookup over `(v_x, kappa_target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapLookupTable {
    speeds: Vec<f64>,
    curvatures: Vec<f64>,
    /// Row-major by speed.
    delta: Vec<f64>,
    saturated: Vec<bool>,
}

impl MapLookupTable {
    /// Inverts the plant's steady-state cornering solution cell by cell.
    /// Cells past the friction limit copy the last feasible steering angle
    /// of their row (moving outward from `kappa = 0`).
    pub fn build(params: &VehicleParams, grid: &MapGridSpec) -> Self {
        Self::from_solver(grid, |v, k| steady_cornering(params, v, k).map(|sol| sol.delta))
    }

    /// Table from the no-slip kinematic law `delta = atan(wheelbase * kappa)`.
    pub fn kinematic(wheelbase: f64, grid: &MapGridSpec) -> Self {
        Self::from_solver(grid, |_, k| Some((wheelbase * k).atan()))
    }

    fn from_solver(grid: &MapGridSpec, solve: impl Fn(f64, f64) -> Option<f64>) -> Self {
        let speeds = grid.speeds();
        let curvatures = grid.curvatures();
        let nk = curvatures.len();
        let zero = curvatures
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut delta = vec![0.0; speeds.len() * nk];
        let mut saturated = vec![false; speeds.len() * nk];
        for (row, &v) in speeds.iter().enumerate() {
            let base = row * nk;
            for direction in [1isize, -1] {
                let mut boundary = 0.0;
                let mut hit_limit = false;
                let mut col = zero as isize;
                while col >= 0 && (col as usize) < nk {
                    let c = col as usize;
                    let solved = if hit_limit { None } else { solve(v, curvatures[c]) };
                    match solved {
                        Some(d) if d.abs() <= BASE_DELTA_MAX && (d - boundary) * direction as f64 >= -1e-12 => {
                            delta[base + c] = d;
                            boundary = d;
                        }
                        _ => {
                            hit_limit = true;
                            delta[base + c] = boundary;
                            saturated[base + c] = true;
                        }
                    }
                    col += direction;
                }
            }
        }
        Self { speeds, curvatures, delta, saturated }
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }
    pub fn curvatures(&self) -> &[f64] {
        &self.curvatures
    }

    pub fn node(&self, vi: usize, ki: usize) -> (f64, bool) {
        let idx = vi * self.curvatures.len() + ki;
        (self.delta[idx], self.saturated[idx])
    }

    fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
        let last = axis.len() - 1;
        if x <= axis[0] {
            return (0, 0.0);
        }
        if x >= axis[last] {
            return (last.saturating_sub(1), if last == 0 { 0.0 } else { 1.0 });
        }
        let i = axis.partition_point(|&a| a <= x) - 1;
        (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
    }

    /// Bilinear interpolation, clamped to the table's range.
    pub fn lookup(&self, v_x: f64, kappa: f64) -> f64 {
        let (vi, vu) = Self::bracket(&self.speeds, v_x);
        let (ki, ku) = Self::bracket(&self.curvatures, kappa);
        let nk = self.curvatures.len();
        let vj = (vi + 1).min(self.speeds.len() - 1);
        let kj = (ki + 1).min(nk - 1);
        let at = |v: usize, k: usize| self.delta[v * nk + k];
        let lo = at(vi, ki) * (1.0 - ku) + at(vi, kj) * ku;
        let hi = at(vj, ki) * (1.0 - ku) + at(vj, kj) * ku;
        lo * (1.0 - vu) + hi * vu
    }

    /// `v_mps,kappa_1pm,delta_rad,saturated` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v_mps,kappa_1pm,delta_rad,saturated\n");
        for (vi, v) in self.speeds.iter().enumerate() {
            for (ki, k) in self.curvatures.iter().enumerate() {
                let (d, sat) = self.node(vi, ki);
                let _ = writeln!(out, "{v},{k},{d},{}", u8::from(sat));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows: Vec<(f64, f64, f64, bool)> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| format!("line {}: {e}", i + 2))?;
            let field = |j: usize| -> Result<f64, String> {
                record
                    .get(j)
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or_else(|| format!("line {}: bad field {j}", i + 2))
            };
            rows.push((field(0)?, field(1)?, field(2)?, field(3)? != 0.0));
        }
        let mut speeds: Vec<f64> = Vec::new();
        let mut curvatures: Vec<f64> = Vec::new();
        for r in &rows {
            if speeds.last() != Some(&r.0) {
                speeds.push(r.0);
            }
            if speeds.len() == 1 {
                curvatures.push(r.1);
            }
        }
        if speeds.is_empty() || rows.len() != speeds.len() * curvatures.len() {
            return Err("table is not a full rectangular grid".into());
        }
        Ok(Self {
            delta: rows.iter().map(|r| r.2).collect(),
            saturated: rows.iter().map(|r| r.3).collect(),
            speeds,
            curvatures,
        })
    }
}

/// Pursuit geometry with the kinematic steering law replaced by the table.
pub fn map_controller(state: &VehicleState, track: &Track, table: &MapLookupTable, cfg: &PurePursuitConfig) -> ControlInput {
    let (eta, lookahead, v) = pursuit_target(state, track, cfg);
    let kappa_target = 2.0 * eta.sin() / lookahead;
    clamp_base(table.lookup(state.v_x, kappa_target), v)
}

/// Piecewise-linear `clearance -> speed` law `clamp(offset + gain * c, lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedMap {
    pub offset: f64,
    pub gain: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl SpeedMap {
    pub fn speed(&self, clearance: f64) -> f64 {
        (self.offset + self.gain * clearance).clamp(self.v_min, self.v_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtgConfig {
    pub n_rays: usize,
    pub fov: f64,
    pub max_range: f64,
    pub bubble_radius: f64,
    pub range_threshold: f64,
    pub speed_map: SpeedMap,
}

impl Default for FtgConfig {
    fn default() -> Self {
        Self {
            n_rays: 109,
            fov: 1.5 * std::f64::consts::PI,
            max_range: 10.0,
            bubble_radius: 0.3,
            range_threshold: 1.6,
            speed_map: SpeedMap { offset: 1.0, gain: 0.8, v_min: 1.0, v_max: 6.0 },
        }
    }
}

/// Outcome of one Follow-The-Gap decision, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct GapChoice {
    /// Inclusive index range of the bubble around the nearest return.
    pub bubble: (usize, usize),
    /// Inclusive index range of the chosen gap, if any.
    pub gap: Option<(usize, usize)>,
    pub target_ray: usize,
}

/// Widest run of `ranges > threshold`; the first one wins ties.
pub fn widest_gap(ranges: &[f64], threshold: f64) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for i in 0..=ranges.len() {
        let free = i < ranges.len() && ranges[i] > threshold;
        match (free, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let len = i - s;
                if best.is_none_or(|(bs, be)| len > be - bs + 1) {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// Deepest ray in `[lo, hi]`; ties go to the ray nearest the scan center.
fn deepest(ranges: &[f64], lo: usize, hi: usize) -> usize {
    let center = (ranges.len() - 1) as f64 / 2.0;
    let max = ranges[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo..=hi)
        .filter(|&i| ranges[i] >= max - 1e-9)
        .min_by(|&a, &b| (a as f64 - center).abs().total_cmp(&(b as f64 - center).abs()).then(a.cmp(&b)))
        .unwrap_or(lo)
}

pub fn choose_gap(ranges: &[f64], cfg: &FtgConfig) -> GapChoice {
    let n = ranges.len();
    let nearest = (0..n).min_by(|&a, &b| ranges[a].total_cmp(&ranges[b])).unwrap_or(0);
    let spacing = if n > 1 { cfg.fov / (n - 1) as f64 } else { cfg.fov };
    let half_angle = (cfg.bubble_radius / ranges[nearest].max(1e-6)).min(1.0).asin().max(0.0);
    let reach = (half_angle / spacing).ceil() as usize;
    let bubble = (nearest.saturating_sub(reach), (nearest + reach).min(n - 1));
    let mut masked = ranges.to_vec();
    masked[bubble.0..=bubble.1].iter_mut().for_each(|r| *r = 0.0);
    let gap = widest_gap(&masked, cfg.range_threshold);
    let target_ray = match gap {
        Some((lo, hi)) => deepest(&masked, lo, hi),
        None => deepest(&masked, 0, n - 1),
    };
    GapChoice { bubble, gap, target_ray }
}

/// Steers toward the best point of the widest free gap.
pub fn follow_the_gap(ranges: &[f64], cfg: &FtgConfig, _v_x: f64) -> ControlInput {
    let choice = choose_gap(ranges, cfg);
    let angle = ray_angles(0.0, cfg.fov, ranges.len()).nth(choice.target_ray).unwrap_or(0.0);
    let center = ranges.len() / 2;
    let clearance = if ranges.len() % 2 == 1 {
        ranges[center]
    } else {
        0.5 * (ranges[center - 1] + ranges[center])
    };
    let v = match choice.gap {
        Some(_) => cfg.speed_map.speed(clearance),
        None => cfg.speed_map.v_min,
    };
    clamp_base(angle, v)
}

/// Which classical controller supplies `u_base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Pp,
    Map,
    Ftg,
    None,
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pp" => Ok(Self::Pp),
            "map" => Ok(Self::Map),
            "ftg" => Ok(Self::Ftg),
            "none" => Ok(Self::None),
            other => Err(format!("unknown controller `{other}` (expected pp, map, ftg or none)")),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pp => "pp",
            Self::Map => "map",
            Self::Ftg => "ftg",
            Self::None => "none",
        })
    }
}

/// A ready-to-query base controller.
#[derive(Debug, Clone)]
pub enum BaseController {
    PurePursuit(PurePursuitConfig),
    Map(Box<MapLookupTable>, PurePursuitConfig),
    FollowTheGap(FtgConfig),
}

impl BaseController {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Self::PurePursuit(_) => ControllerKind::Pp,
            Self::Map(..) => ControllerKind::Map,
            Self::FollowTheGap(_) => ControllerKind::Ftg,
        }
    }

    pub fn command(&self, state: &VehicleState, track: &Track) -> ControlInput {
        match self {
            Self::PurePursuit(cfg) => pure_pursuit(state, track, cfg),
            Self::Map(table, cfg) => map_controller(state, track, table, cfg),
            Self::FollowTheGap(cfg) => {
                let (x, y, heading) = track.frenet_to_global(FrenetPose::new(state.s, state.n, state.mu));
                let ranges = track.cast_rays(x, y, heading, cfg.fov, cfg.n_rays, cfg.max_range);
                follow_the_gap(&ranges, cfg, state.v_x)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::shapes;
    use approx::assert_relative_eq;

    fn profiled(track: Track, v: f64) -> Track {
        let n = track.len();
        track.with_velocity_profile(vec![v; n])
    }

    #[test]
    fn pure_pursuit_aligned_on_straight_is_zero() {
        let track = profiled(shapes::stadium(40.0, 3.0, 0.1, 1.0), 3.0);
        let st = VehicleState::at(10.0, 3.0);
        let u = pure_pursuit(&st, &track, &PurePursuitConfig::default());
        assert!(u.delta_cmd.abs() < 1e-12);
        assert_relative_eq!(u.v_cmd, 3.0);
    }

    #[test]
    fn pure_pursuit_left_offset_steers_right() {
        let track = profiled(shapes::stadium(40.0, 3.0, 0.1, 1.0), 3.0);
        let st = VehicleState { n: 0.3, ..VehicleState::at(10.0, 3.0) };
        assert!(pure_pursuit(&st, &track, &PurePursuitConfig::default()).delta_cmd < 0.0);
        let st = VehicleState { n: -0.3, ..VehicleState::at(10.0, 3.0) };
        assert!(pure_pursuit(&st, &track, &PurePursuitConfig::default()).delta_cmd > 0.0);
    }

    #[test]
    fn outputs_stay_in_base_ranges() {
        let track = profiled(shapes::circle(2.0, 200, 1.0), 30.0);
        let st = VehicleState { n: -0.9, mu: 1.2, ..VehicleState::at(1.0, 8.0) };
        let u = pure_pursuit(&st, &track, &PurePursuitConfig::default());
        assert!(u.delta_cmd.abs() <= BASE_DELTA_MAX && (0.0..=BASE_V_MAX).contains(&u.v_cmd));
    }

    #[test]
    fn map_table_zero_row_and_node_identity() {
        let table = MapLookupTable::build(&VehicleParams::default(), &MapGridSpec::default());
        let zero = table.curvatures().iter().position(|k| k.abs() < 1e-12).unwrap();
        for vi in 0..table.speeds().len() {
            assert_eq!(table.node(vi, zero).0, 0.0);
        }
        for (vi, &v) in table.speeds().iter().enumerate().step_by(7) {
            for (ki, &k) in table.curvatures().iter().enumerate().step_by(13) {
                assert_eq!(table.lookup(v, k), table.node(vi, ki).0);
            }
        }
    }

    #[test]
    fn map_table_is_monotone_before_saturation() {
        let table = MapLookupTable::build(&VehicleParams::default(), &MapGridSpec::default());
        let nk = table.curvatures().len();
        for vi in 0..table.speeds().len() {
            for ki in 1..nk {
                assert!(table.node(vi, ki).0 >= table.node(vi, ki - 1).0 - 1e-12);
            }
        }
    }

    #[test]
    fn map_table_saturated_cells_take_boundary() {
        let table = MapLookupTable::build(&VehicleParams::default(), &MapGridSpec::default());
        let vi = table.speeds().len() - 1;
        let last = table.curvatures().len() - 1;
        let (d, sat) = table.node(vi, last);
        assert!(sat);
        assert!(d.is_finite() && d.abs() <= BASE_DELTA_MAX);
        let v = table.speeds()[vi];
        assert_eq!(table.lookup(v, 50.0), d);
    }

    #[test]
    fn map_table_csv_round_trip() {
        let grid = MapGridSpec { v_min: 1.0, v_max: 2.0, v_step: 0.5, kappa_max: 0.1, kappa_step: 0.05 };
        let table = MapLookupTable::build(&VehicleParams::default(), &grid);
        assert_eq!(MapLookupTable::from_csv(&table.to_csv()).unwrap(), table);
    }

    #[test]
    fn kinematic_table_matches_pure_pursuit() {
        let track = profiled(shapes::circle(4.0, 300, 1.0), 3.0);
        let cfg = PurePursuitConfig::default();
        let table = MapLookupTable::kinematic(cfg.wheelbase, &MapGridSpec::default());
        for i in 0..50 {
            let st = VehicleState {
                n: -0.5 + i as f64 * 0.02,
                mu: 0.3 - i as f64 * 0.012,
                ..VehicleState::at(i as f64 * 0.4, 1.0 + i as f64 * 0.1)
            };
            let pp = pure_pursuit(&st, &track, &cfg);
            let map = map_controller(&st, &track, &table, &cfg);
            assert!((pp.delta_cmd - map.delta_cmd).abs() < 1e-3);
            assert_eq!(pp.v_cmd, map.v_cmd);
        }
    }

    #[test]
    fn ftg_symmetric_corridor_goes_straight() {
        let cfg = FtgConfig::default();
        let track = shapes::stadium(200.0, 3.0, 0.1, 1.0);
        let ranges = track.cast_rays(50.0, 0.0, 0.0, cfg.fov, cfg.n_rays, cfg.max_range);
        let u = follow_the_gap(&ranges, &cfg, 2.0);
        assert_eq!(u.delta_cmd, 0.0);
        assert!(u.v_cmd > cfg.speed_map.v_min);
    }

    #[test]
    fn ftg_bubble_excludes_nearest_return() {
        let cfg = FtgConfig { n_rays: 61, ..FtgConfig::default() };
        let mut ranges = vec![3.0; 61];
        ranges[58] = 0.5;
        ranges[40] = 8.0;
        let choice = choose_gap(&ranges, &cfg);
        let (lo, hi) = choice.gap.unwrap();
        assert!(hi < choice.bubble.0 || lo > choice.bubble.1);
        assert!(choice.target_ray < choice.bubble.0 || choice.target_ray > choice.bubble.1);
        assert_eq!(choice.target_ray, 40);
        assert!(follow_the_gap(&ranges, &cfg, 2.0).delta_cmd >= 0.0);
    }

    #[test]
    fn ftg_no_gap_steers_to_max_range_slowly() {
        let cfg = FtgConfig { n_rays: 11, ..FtgConfig::default() };
        let mut ranges = vec![0.5; 11];
        ranges[8] = 1.0;
        let choice = choose_gap(&ranges, &cfg);
        assert_eq!(choice.gap, None);
        assert_eq!(choice.target_ray, 8);
        let u = follow_the_gap(&ranges, &cfg, 2.0);
        assert_eq!(u.v_cmd, cfg.speed_map.v_min);
        assert!(u.delta_cmd > 0.0);
    }

    #[test]
    fn widest_gap_examples() {
        assert_eq!(widest_gap(&[0.0, 2.0, 2.0, 0.0, 2.0], 1.0), Some((1, 2)));
        assert_eq!(widest_gap(&[2.0, 0.0, 2.0], 1.0), Some((0, 0)));
        assert_eq!(widest_gap(&[0.0, 0.5], 1.0), None);
        assert_eq!(widest_gap(&[2.0; 4], 1.0), Some((0, 3)));
    }
}
