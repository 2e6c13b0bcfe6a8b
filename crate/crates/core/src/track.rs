//! Closed race tracks in curvilinear (Frenet) coordinates.
//!
//! A [`Track`] is a closed polyline reference line with per-point boundary
//! widths. Positions are linearly interpolated along the polyline while the
//! tangent field is interpolated between per-vertex central-difference
//! tangents. Using a continuous tangent field makes the global/Frenet maps
//! exact inverses of each other for every pose inside the boundaries, not
//! only for poses that project onto a segment interior.
//!
//! Sign conventions are left-positive throughout: `n > 0` is left of the
//! reference line and positive curvature is a left turn.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-window of the local Frenet search around the caller's hint.
pub const LOCAL_SEARCH_HALF_WINDOW: f64 = 2.0;
/// Curvature floor used by the friction-limited speed profile.
pub const KAPPA_MIN: f64 = 1e-4;

const CLOSURE_DUPLICATE_TOL: f64 = 0.01;
const MIN_POINTS: usize = 10;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("projection failed: ({x:.3}, {y:.3}) is farther than {margin:.2} m from the reference line")]
    Projection { x: f64, y: f64, margin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub w_left: f64,
    pub w_right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrenetPose {
    /// Arc-length progress in `[0, total_length)`.
    pub s: f64,
    /// Signed lateral offset, left-positive.
    pub n: f64,
    /// Heading relative to the reference tangent, in `(-pi, pi]`.
    pub mu: f64,
}

impl FrenetPose {
    pub fn new(s: f64, n: f64, mu: f64) -> Self {
        Self { s, n, mu }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone)]
pub struct Track {
    name: String,
    points: Vec<TrackPoint>,
    arc_length: Vec<f64>,
    seg_length: Vec<f64>,
    curvature: Vec<f64>,
    /// Unit vertex tangents from central differences.
    tangent: Vec<[f64; 2]>,
    total_length: f64,
    velocity_profile: Option<Vec<f64>>,
    max_width: f64,
    boundary_segments: Vec<[(f64, f64); 2]>,
}

impl Track {
    /// Builds a track from an ordered closed loop of points. A trailing copy
    /// of the first point (within 1 cm) is dropped.
    pub fn from_points(name: impl Into<String>, mut points: Vec<TrackPoint>) -> Result<Self, TrackError> {
        if points.len() >= 2 {
            let (first, last) = (points[0], points[points.len() - 1]);
            if (last.x - first.x).hypot(last.y - first.y) < CLOSURE_DUPLICATE_TOL {
                points.pop();
            }
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(TrackError::Geometry(format!("point {i} is not finite")));
            }
            if !(p.w_left > 0.0 && p.w_right > 0.0) {
                return Err(TrackError::Geometry(format!(
                    "point {i} has non-positive width (left {}, right {})",
                    p.w_left, p.w_right
                )));
            }
        }
        let count = points.len();
        if count < 3 {
            return Err(TrackError::Geometry(format!("{count} points cannot form a loop")));
        }
        let mut seg_length = Vec::with_capacity(count);
        for i in 0..count {
            let (a, b) = (points[i], points[(i + 1) % count]);
            let len = (b.x - a.x).hypot(b.y - a.y);
            if len <= 1e-9 {
                return Err(TrackError::Geometry(format!(
                    "arc length not strictly increasing between points {i} and {}",
                    (i + 1) % count
                )));
            }
            seg_length.push(len);
        }
        if count < MIN_POINTS {
            return Err(TrackError::Geometry(format!(
                "need at least {MIN_POINTS} points, got {count}"
            )));
        }
        let mut sorted = seg_length[..count - 1].to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        if seg_length[count - 1] > 10.0 * median {
            return Err(TrackError::Geometry(format!(
                "loop not closed: gap of {:.3} m between last and first point (median spacing {:.3} m)",
                seg_length[count - 1],
                median
            )));
        }

        let mut arc_length = Vec::with_capacity(count);
        let mut acc = 0.0;
        for len in &seg_length {
            arc_length.push(acc);
            acc += len;
        }
        let total_length = acc;

        let tangent: Vec<[f64; 2]> = (0..count)
            .map(|i| {
                let prev = points[(i + count - 1) % count];
                let next = points[(i + 1) % count];
                let (dx, dy) = (next.x - prev.x, next.y - prev.y);
                let norm = dx.hypot(dy);
                [dx / norm, dy / norm]
            })
            .collect();

        let heading: Vec<f64> = tangent.iter().map(|t| t[1].atan2(t[0])).collect();
        let curvature: Vec<f64> = (0..count)
            .map(|i| {
                let (ip, inx) = ((i + count - 1) % count, (i + 1) % count);
                let dh = wrap_angle(heading[inx] - heading[ip]);
                dh / (seg_length[ip] + seg_length[i])
            })
            .collect();

        let max_width = points
            .iter()
            .map(|p| p.w_left.max(p.w_right))
            .fold(0.0, f64::max);

        let mut track = Self {
            name: name.into(),
            points,
            arc_length,
            seg_length,
            curvature,
            tangent,
            total_length,
            velocity_profile: None,
            max_width,
            boundary_segments: Vec::new(),
        };
        let (left, right) = track.boundaries();
        track.boundary_segments = [left, right]
            .iter()
            .flat_map(|line| (0..line.len()).map(move |i| [line[i], line[(i + 1) % line.len()]]))
            .collect();
        Ok(track)
    }

    /// Parses the `x_m,y_m,w_left_m,w_right_m` CSV format.
    pub fn from_csv_str(name: impl Into<String>, text: &str) -> Result<Self, TrackError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| TrackError::Parse { line: 1, message: e.to_string() })?
            .clone();
        let expected = ["x_m", "y_m", "w_left_m", "w_right_m"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(TrackError::Parse {
                line: 1,
                message: format!("expected header `{}`", expected.join(",")),
            });
        }
        let mut points = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| TrackError::Parse { line, message: e.to_string() })?;
            if record.len() != 4 {
                return Err(TrackError::Parse {
                    line,
                    message: format!("expected 4 fields, found {}", record.len()),
                });
            }
            let mut v = [0.0; 4];
            for (slot, field) in v.iter_mut().zip(record.iter()) {
                *slot = field.parse().map_err(|_| TrackError::Parse {
                    line,
                    message: format!("`{field}` is not a number"),
                })?;
            }
            points.push(TrackPoint { x: v[0], y: v[1], w_left: v[2], w_right: v[3] });
        }
        if points.len() < MIN_POINTS {
            return Err(TrackError::Parse {
                line: points.len() + 1,
                message: format!("need at least {MIN_POINTS} rows, found {}", points.len()),
            });
        }
        Self::from_points(name, points)
    }

    /// Loads a track CSV and, when present, its `<name>_raceline.csv`
    /// companion (`s_m,v_mps`) as the velocity profile.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrackError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrackError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("track").to_string();
        let mut track = Self::from_csv_str(stem.clone(), &text)?;
        let companion = path.with_file_name(format!("{stem}_raceline.csv"));
        if companion.exists() {
            let text = fs::read_to_string(&companion).map_err(|source| TrackError::Io {
                path: companion.display().to_string(),
                source,
            })?;
            track.apply_raceline_csv(&text)?;
        }
        Ok(track)
    }

    fn apply_raceline_csv(&mut self, text: &str) -> Result<(), TrackError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| TrackError::Parse { line, message: e.to_string() })?;
            let parse = |i: usize| -> Result<f64, TrackError> {
                record.get(i).and_then(|f| f.parse().ok()).ok_or_else(|| TrackError::Parse {
                    line,
                    message: "expected `s_m,v_mps`".into(),
                })
            };
            samples.push((parse(0)?.rem_euclid(self.total_length), parse(1)?));
        }
        if samples.is_empty() {
            return Err(TrackError::Parse { line: 2, message: "empty raceline file".into() });
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        let len = self.total_length;
        let profile = self
            .arc_length
            .iter()
            .map(|&s| {
                let idx = samples.partition_point(|p| p.0 <= s);
                let (a, b) = if idx == 0 {
                    let last = samples[samples.len() - 1];
                    ((last.0 - len, last.1), samples[0])
                } else if idx == samples.len() {
                    (samples[idx - 1], (samples[0].0 + len, samples[0].1))
                } else {
                    (samples[idx - 1], samples[idx])
                };
                if (b.0 - a.0).abs() < 1e-12 {
                    a.1
                } else {
                    a.1 + (b.1 - a.1) * (s - a.0) / (b.0 - a.0)
                }
            })
            .collect();
        self.velocity_profile = Some(profile);
        Ok(())
    }

    /// Writes the track in its CSV interchange format.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("x_m,y_m,w_left_m,w_right_m\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.w_left, p.w_right));
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn points(&self) -> &[TrackPoint] {
        &self.points
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn arc_length(&self) -> &[f64] {
        &self.arc_length
    }
    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }
    pub fn segment_lengths(&self) -> &[f64] {
        &self.seg_length
    }
    pub fn total_length(&self) -> f64 {
        self.total_length
    }
    pub fn velocity_profile(&self) -> Option<&[f64]> {
        self.velocity_profile.as_deref()
    }
    pub fn max_width(&self) -> f64 {
        self.max_width
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        let w = s.rem_euclid(self.total_length);
        // rem_euclid can return total_length itself for tiny negative inputs
        if w >= self.total_length {
            0.0
        } else {
            w
        }
    }

    /// Segment index and fraction along it for a (wrapped) arc length.
    pub fn locate(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_s(s);
        let idx = self.arc_length.partition_point(|&a| a <= s).saturating_sub(1);
        let u = ((s - self.arc_length[idx]) / self.seg_length[idx]).clamp(0.0, 1.0);
        (idx, u)
    }

    fn next(&self, i: usize) -> usize {
        (i + 1) % self.points.len()
    }

    fn lerp(&self, s: f64, f: impl Fn(usize) -> f64) -> f64 {
        let (i, u) = self.locate(s);
        f(i) * (1.0 - u) + f(self.next(i)) * u
    }

    /// Reference-line position at arc length `s`.
    pub fn position(&self, s: f64) -> (f64, f64) {
        let (i, u) = self.locate(s);
        let (a, b) = (self.points[i], self.points[self.next(i)]);
        (a.x + u * (b.x - a.x), a.y + u * (b.y - a.y))
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent(&self, s: f64) -> (f64, f64) {
        let (i, u) = self.locate(s);
        let (a, b) = (self.tangent[i], self.tangent[self.next(i)]);
        let (tx, ty) = (a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]));
        let norm = tx.hypot(ty);
        (tx / norm, ty / norm)
    }

    pub fn heading(&self, s: f64) -> f64 {
        let (tx, ty) = self.tangent(s);
        ty.atan2(tx)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.lerp(s, |i| self.curvature[i])
    }

    /// `(w_left, w_right)` linearly interpolated at `s`.
    pub fn widths_at(&self, s: f64) -> (f64, f64) {
        (
            self.lerp(s, |i| self.points[i].w_left),
            self.lerp(s, |i| self.points[i].w_right),
        )
    }

    /// Target speed from the velocity profile, if one is attached.
    pub fn velocity_at(&self, s: f64) -> Option<f64> {
        let profile = self.velocity_profile.as_ref()?;
        Some(self.lerp(s, |i| profile[i]))
    }

    /// Point at lateral offset `offset` (left-positive) from the reference at `s`.
    pub fn offset_point(&self, s: f64, offset: f64) -> (f64, f64) {
        let (px, py) = self.position(s);
        let (tx, ty) = self.tangent(s);
        (px - offset * ty, py + offset * tx)
    }

    pub fn frenet_to_global(&self, pose: FrenetPose) -> (f64, f64, f64) {
        let (x, y) = self.offset_point(pose.s, pose.n);
        (x, y, wrap_angle(self.heading(pose.s) + pose.mu))
    }

    /// Projects a global pose onto the reference line. With `hint_s`, only
    /// segments within the local window are tried first; the global search
    /// is the fallback.
    pub fn global_to_frenet(
        &self,
        x: f64,
        y: f64,
        heading: f64,
        hint_s: Option<f64>,
    ) -> Result<FrenetPose, TrackError> {
        let margin = self.search_margin();
        let local = hint_s.and_then(|hint| {
            let best = self.project_over(x, y, self.window_segments(hint));
            best.filter(|&(_, n)| n.abs() <= margin)
        });
        let best = match local {
            Some(b) => Some(b),
            None => self.project_over(x, y, 0..self.points.len()),
        };
        match best {
            Some((s, n)) if n.abs() <= margin => Ok(FrenetPose {
                s,
                n,
                mu: wrap_angle(heading - self.heading(s)),
            }),
            _ => Err(TrackError::Projection { x, y, margin }),
        }
    }

    /// Maximum lateral distance accepted by the projection.
    pub fn search_margin(&self) -> f64 {
        let widest = self
            .points
            .iter()
            .map(|p| p.w_left + p.w_right)
            .fold(0.0, f64::max);
        2.0 * widest
    }

    fn window_segments(&self, hint: f64) -> impl Iterator<Item = usize> + '_ {
        let count = self.points.len();
        let (center, _) = self.locate(hint);
        let mut back = 0;
        let mut acc = 0.0;
        while acc < LOCAL_SEARCH_HALF_WINDOW && back < count / 2 {
            back += 1;
            acc += self.seg_length[(center + count - back) % count];
        }
        let mut fwd = 0;
        acc = 0.0;
        while acc < LOCAL_SEARCH_HALF_WINDOW && fwd < count / 2 {
            acc += self.seg_length[(center + fwd) % count];
            fwd += 1;
        }
        (0..back + fwd).map(move |k| (center + count - back + k) % count)
    }

    /// Best `(s, n)` over candidate segments, smallest `|n|` wins.
    fn project_over(&self, x: f64, y: f64, segments: impl Iterator<Item = usize>) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for i in segments {
            for (u, n) in self.segment_feet(i, x, y) {
                if best.is_none_or(|(_, bn)| n.abs() < bn.abs()) {
                    let s = self.wrap_s(self.arc_length[i] + u * self.seg_length[i]);
                    best = Some((s, n));
                }
            }
        }
        best
    }

    /// Solutions `u in [0, 1]` of `(X - P(u)) . T(u) = 0` on segment `i`,
    /// with the signed lateral offset at each.
    fn segment_feet(&self, i: usize, x: f64, y: f64) -> impl Iterator<Item = (f64, f64)> {
        let j = self.next(i);
        let (a, b) = (self.points[i], self.points[j]);
        let d = [b.x - a.x, b.y - a.y];
        let e = [x - a.x, y - a.y];
        let ta = self.tangent[i];
        let tb = [self.tangent[j][0] - ta[0], self.tangent[j][1] - ta[1]];
        let dot = |p: [f64; 2], q: [f64; 2]| p[0] * q[0] + p[1] * q[1];
        let c2 = -dot(d, tb);
        let c1 = dot(e, tb) - dot(d, ta);
        let c0 = dot(e, ta);
        let mut roots = [f64::NAN; 2];
        if c2.abs() < 1e-12 * (c1.abs() + c0.abs()).max(1e-300) {
            if c1 != 0.0 {
                roots[0] = -c0 / c1;
            }
        } else {
            let disc = c1 * c1 - 4.0 * c2 * c0;
            if disc >= 0.0 {
                let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
                if q != 0.0 {
                    roots[0] = q / c2;
                    roots[1] = c0 / q;
                } else {
                    roots[0] = 0.0;
                }
            }
        }
        const EDGE: f64 = 1e-9;
        roots.into_iter().filter_map(move |u| {
            if !(u.is_finite() && (-EDGE..=1.0 + EDGE).contains(&u)) {
                return None;
            }
            let u = u.clamp(0.0, 1.0);
            let (px, py) = (a.x + u * d[0], a.y + u * d[1]);
            let (tx, ty) = (ta[0] + u * tb[0], ta[1] + u * tb[1]);
            let norm = tx.hypot(ty);
            let n = ((x - px) * -ty + (y - py) * tx) / norm;
            Some((u, n))
        })
    }

    /// True when the pose is outside the boundaries at its arc length.
    pub fn boundary_violation(&self, pose: &FrenetPose) -> bool {
        let (wl, wr) = self.widths_at(pose.s);
        pose.n > wl || pose.n < -wr
    }

    /// Shortest signed wrapped difference `s_now - s_prev`.
    pub fn progress_delta(&self, s_prev: f64, s_now: f64) -> f64 {
        let d = s_now - s_prev;
        d - self.total_length * (d / self.total_length).round()
    }

    /// Boundary polylines `(left, right)` through the vertex normals.
    pub fn boundaries(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let left = self
            .points
            .iter()
            .zip(&self.tangent)
            .map(|(p, t)| (p.x - p.w_left * t[1], p.y + p.w_left * t[0]))
            .collect();
        let right = self
            .points
            .iter()
            .zip(&self.tangent)
            .map(|(p, t)| (p.x + p.w_right * t[1], p.y - p.w_right * t[0]))
            .collect();
        (left, right)
    }

    /// Left and right boundary segments, left first.
    pub fn boundary_segments(&self) -> &[[(f64, f64); 2]] {
        &self.boundary_segments
    }

    /// Simulated range scan: `n_rays` rays spread evenly across `fov`,
    /// centered on `heading`, each clipped at `max_range`.
    pub fn cast_rays(&self, x: f64, y: f64, heading: f64, fov: f64, n_rays: usize, max_range: f64) -> Vec<f64> {
        let segments = &self.boundary_segments;
        ray_angles(heading, fov, n_rays)
            .map(|angle| {
                let dir = (angle.cos(), angle.sin());
                segments
                    .iter()
                    .filter_map(|seg| ray_segment_distance((x, y), dir, seg[0], seg[1]))
                    .fold(max_range, f64::min)
            })
            .collect()
    }

    /// Friction-limited speed per point: lateral limit `sqrt(mu g / |kappa|)`
    /// capped at `v_cap`, then forward/backward passes bounding
    /// `|dv^2/ds| <= 2 a_max` around the loop until nothing changes.
    pub fn generate_velocity_profile(&self, mu_friction: f64, g: f64, a_max: f64, v_cap: f64) -> Vec<f64> {
        let count = self.points.len();
        let mut v2: Vec<f64> = self
            .curvature
            .iter()
            .map(|k| {
                let lateral = mu_friction * g / k.abs().max(KAPPA_MIN);
                lateral.min(v_cap * v_cap)
            })
            .collect();
        loop {
            let mut changed = false;
            for step in 0..count {
                let i = step;
                let j = (i + 1) % count;
                let limit = v2[i] + 2.0 * a_max * self.seg_length[i];
                if v2[j] > limit {
                    v2[j] = limit;
                    changed = true;
                }
            }
            for step in 0..count {
                let j = count - 1 - step;
                let i = (j + 1) % count;
                let limit = v2[i] + 2.0 * a_max * self.seg_length[j];
                if v2[j] > limit {
                    v2[j] = limit;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        v2.into_iter().map(f64::sqrt).collect()
    }

    pub fn set_velocity_profile(&mut self, profile: Vec<f64>) {
        assert_eq!(profile.len(), self.points.len(), "profile length mismatch");
        self.velocity_profile = Some(profile);
    }

    pub fn with_velocity_profile(mut self, profile: Vec<f64>) -> Self {
        self.set_velocity_profile(profile);
        self
    }
}

pub(crate) fn ray_angles(heading: f64, fov: f64, n_rays: usize) -> impl Iterator<Item = f64> {
    let step = if n_rays > 1 { fov / (n_rays - 1) as f64 } else { 0.0 };
    (0..n_rays).map(move |i| heading - 0.5 * fov + i as f64 * step)
}

/// Distance along a unit ray to segment `a-b`, if they intersect.
pub fn ray_segment_distance(origin: (f64, f64), dir: (f64, f64), a: (f64, f64), b: (f64, f64)) -> Option<f64> {
    let e = (b.0 - a.0, b.1 - a.1);
    let denom = dir.0 * e.1 - dir.1 * e.0;
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = (a.0 - origin.0, a.1 - origin.1);
    let t = (w.0 * e.1 - w.1 * e.0) / denom;
    let u = (w.0 * dir.1 - w.1 * dir.0) / denom;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// The bundled synthetic layouts.
pub mod bundled {
    use super::{Track, TrackError};

    pub const C_LIKE_CSV: &str = include_str!("../tracks/c_like.csv");
    pub const Y_LIKE_CSV: &str = include_str!("../tracks/y_like.csv");

    /// Roughly 41 m, one long left-hand sweep with a right-hand dent.
    pub fn c_like() -> Track {
        Track::from_csv_str("c_like", C_LIKE_CSV).expect("bundled c_like track is valid")
    }

    /// Roughly 34 m, three-lobed.
    pub fn y_like() -> Track {
        Track::from_csv_str("y_like", Y_LIKE_CSV).expect("bundled y_like track is valid")
    }

    pub fn by_name(name: &str) -> Result<Track, TrackError> {
        match name {
            "c_like" | "c-like" => Ok(c_like()),
            "y_like" | "y-like" => Ok(y_like()),
            other => Track::load(other),
        }
    }
}

/// Synthetic layouts for tests and examples.
pub mod shapes {
    use super::{Track, TrackPoint};
    use std::f64::consts::PI;

    /// Counter-clockwise circle starting at `(radius, 0)`.
    pub fn circle(radius: f64, count: usize, width: f64) -> Track {
        let points = (0..count)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / count as f64;
                TrackPoint { x: radius * t.cos(), y: radius * t.sin(), w_left: width, w_right: width }
            })
            .collect();
        Track::from_points("circle", points).expect("circle is a valid track")
    }

    /// Long rounded rectangle whose bottom straight runs along `y = 0` in +x.
    /// `straight` is the straight length and `radius` the end-turn radius.
    pub fn stadium(straight: f64, radius: f64, spacing: f64, width: f64) -> Track {
        let mut points = Vec::new();
        let n_straight = (straight / spacing).round().max(1.0) as usize;
        let n_turn = (PI * radius / spacing).round().max(4.0) as usize;
        let mut push = |x: f64, y: f64| points.push(TrackPoint { x, y, w_left: width, w_right: width });
        for i in 0..n_straight {
            push(i as f64 * straight / n_straight as f64, 0.0);
        }
        for i in 0..n_turn {
            let t = -PI / 2.0 + PI * i as f64 / n_turn as f64;
            push(straight + radius * t.cos(), radius + radius * t.sin());
        }
        for i in 0..n_straight {
            push(straight - i as f64 * straight / n_straight as f64, 2.0 * radius);
        }
        for i in 0..n_turn {
            let t = PI / 2.0 + PI * i as f64 / n_turn as f64;
            push(radius * t.cos(), radius + radius * t.sin());
        }
        Track::from_points("stadium", points).expect("stadium is a valid track")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square_with_duplicates() -> Vec<TrackPoint> {
        let p = |x, y| TrackPoint { x, y, w_left: 1.0, w_right: 1.0 };
        vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 0.0), p(0.0, 1.0)]
    }

    #[test]
    fn circle_length_and_curvature() {
        let track = shapes::circle(5.0, 100, 1.0);
        // polyline inscribed in the circle is slightly shorter
        assert_relative_eq!(track.total_length(), 2.0 * PI * 5.0, max_relative = 1e-3);
        for k in track.curvature() {
            assert_relative_eq!(*k, 0.2, max_relative = 1e-3);
        }
        let turning: f64 = track
            .curvature()
            .iter()
            .zip(track.segment_lengths())
            .map(|(k, ds)| k * ds)
            .sum();
        assert_relative_eq!(turning, 2.0 * PI, max_relative = 0.01);
    }

    #[test]
    fn degenerate_square_is_rejected() {
        let err = Track::from_points("sq", square_with_duplicates()).unwrap_err();
        assert!(matches!(err, TrackError::Geometry(_)), "{err}");
    }

    #[test]
    fn non_positive_width_is_rejected() {
        let mut pts: Vec<_> = shapes::circle(5.0, 40, 1.0).points().to_vec();
        pts[3].w_right = 0.0;
        assert!(matches!(Track::from_points("c", pts), Err(TrackError::Geometry(_))));
    }

    #[test]
    fn open_loop_is_rejected() {
        let pts: Vec<_> = (0..20)
            .map(|i| TrackPoint { x: i as f64 * 0.1, y: 0.0, w_left: 1.0, w_right: 1.0 })
            .collect();
        let err = Track::from_points("line", pts).unwrap_err();
        assert!(err.to_string().contains("loop not closed"), "{err}");
    }

    #[test]
    fn repeated_first_point_is_dropped() {
        let mut pts: Vec<_> = shapes::circle(5.0, 50, 1.0).points().to_vec();
        pts.push(pts[0]);
        let track = Track::from_points("c", pts).unwrap();
        assert_eq!(track.len(), 50);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "x_m,y_m,w_left_m,w_right_m\n0,0,1,1\n1,zero,1,1\n";
        match Track::from_csv_str("bad", text) {
            Err(TrackError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "x,y,wl,wr\n0,0,1,1\n";
        assert!(matches!(Track::from_csv_str("bad", bad_header), Err(TrackError::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let track = shapes::circle(5.0, 100, 1.0);
        let again = Track::from_csv_str("c", &track.to_csv_string()).unwrap();
        assert_eq!(again.len(), 100);
        assert_relative_eq!(again.total_length(), track.total_length(), max_relative = 1e-12);
    }

    #[test]
    fn bundled_tracks_have_stated_lengths() {
        let c = bundled::c_like();
        assert_relative_eq!(c.total_length(), 41.0, max_relative = 0.01);
        let y = bundled::y_like();
        assert_relative_eq!(y.total_length(), 34.0, max_relative = 0.01);
    }

    #[test]
    fn on_line_pose_is_identity() {
        let track = bundled::c_like();
        let s = 12.3;
        let (x, y) = track.position(s);
        let pose = track.global_to_frenet(x, y, track.heading(s), Some(s)).unwrap();
        assert_relative_eq!(pose.s, s, epsilon = 1e-9);
        assert!(pose.n.abs() < 1e-9);
        assert!(pose.mu.abs() < 1e-9);
    }

    #[test]
    fn circle_inside_is_positive_offset() {
        let track = shapes::circle(5.0, 100, 1.5);
        let pose = track.global_to_frenet(4.0, 0.0, PI / 2.0, None).unwrap();
        assert!((pose.n - 1.0).abs() < 1e-3, "n = {}", pose.n);
        let (x, y, _) = track.frenet_to_global(FrenetPose::new(0.0, 1.0, 0.0));
        assert!((x.hypot(y) - 4.0).abs() < 1e-3);
        let (x0, y0, h0) = track.frenet_to_global(FrenetPose::new(0.0, 0.0, 0.0));
        assert_eq!((x0, y0), (5.0, 0.0));
        assert_relative_eq!(h0, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_fails_far_away() {
        let track = shapes::circle(5.0, 100, 1.0);
        assert!(matches!(
            track.global_to_frenet(50.0, 50.0, 0.0, None),
            Err(TrackError::Projection { .. })
        ));
    }

    #[test]
    fn boundary_edges() {
        let track = bundled::c_like();
        let s = 7.0;
        let (wl, wr) = track.widths_at(s);
        assert!(!track.boundary_violation(&FrenetPose::new(s, 0.0, 0.0)));
        assert!(track.boundary_violation(&FrenetPose::new(s, wl + 0.01, 0.0)));
        assert!(track.boundary_violation(&FrenetPose::new(s, -wr - 0.01, 0.0)));
        assert!(!track.boundary_violation(&FrenetPose::new(s, wl, 0.0)));
    }

    #[test]
    fn progress_wraps() {
        let pts: Vec<_> = shapes::circle(41.0 / (2.0 * PI), 410, 1.0).points().to_vec();
        let track = Track::from_points("c", pts).unwrap();
        let len = track.total_length();
        let d = track.progress_delta(len - 0.1, 0.2);
        assert_relative_eq!(d, 0.3, epsilon = 1e-9);
        assert_eq!(track.progress_delta(3.0, 3.0), 0.0);
        assert_relative_eq!(track.progress_delta(0.2, len - 0.1), -0.3, epsilon = 1e-9);
    }

    #[test]
    fn straight_profile_hits_cap_and_corner_hits_friction_limit() {
        let track = shapes::stadium(30.0, 2.0, 0.05, 1.0);
        let v = track.generate_velocity_profile(1.0, 9.81, 1e9, 7.0);
        let (mid, _) = track.locate(15.0);
        assert_relative_eq!(v[mid], 7.0, epsilon = 1e-12);
        let (corner, _) = track.locate(30.0 + PI);
        let expected = (9.81f64 / track.curvature()[corner]).sqrt();
        assert_relative_eq!(v[corner], expected, epsilon = 1e-9);
        // kappa = 0.5 exactly yields the textbook value
        assert_relative_eq!((9.81f64 / 0.5).sqrt(), 4.429, epsilon = 1e-3);
    }
}
