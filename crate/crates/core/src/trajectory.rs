//! Reference trajectory sources.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hfca::{FlatReference, Posture};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("posture schedule times must be strictly increasing")]
    UnorderedSchedule,
    #[error("posture schedule is empty")]
    EmptySchedule,
    #[error("segment durations must be positive")]
    NonPositiveDuration,
    #[error("{waypoints} waypoints need {expected} segment durations, got {got}")]
    SegmentCount {
        waypoints: usize,
        expected: usize,
        got: usize,
    },
    #[error("minimum-snap constraint system is singular")]
    Singular,
    #[error("invalid circle: {0}")]
    Circle(&'static str),
    #[error("export: {0}")]
    Csv(#[from] csv::Error),
    #[error("export: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that yields a flat reference at time `t ≥ 0`.
pub trait ReferenceSource: Send + Sync {
    fn sample(&self, t: f64) -> FlatReference;
}

/// Fixed position, yaw and posture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantReference {
    pub r: Vector3<f64>,
    pub yaw: f64,
    pub posture: Posture,
}

pub fn constant_reference(r: Vector3<f64>, yaw: f64, posture: Posture) -> ConstantReference {
    ConstantReference { r, yaw, posture }
}

impl ReferenceSource for ConstantReference {
    fn sample(&self, _t: f64) -> FlatReference {
        FlatReference::hold(self.r, self.yaw, self.posture)
    }
}

/// Piecewise-constant posture, `(time, posture)` entries in increasing time.
/// Before the first entry the first posture applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureSchedule {
    entries: Vec<(f64, Posture)>,
}

impl PostureSchedule {
    pub fn new(entries: Vec<(f64, Posture)>) -> Result<Self, TrajectoryError> {
        if entries.is_empty() {
            return Err(TrajectoryError::EmptySchedule);
        }
        if entries.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(TrajectoryError::UnorderedSchedule);
        }
        Ok(PostureSchedule { entries })
    }

    pub fn constant(posture: Posture) -> Self {
        PostureSchedule {
            entries: vec![(0.0, posture)],
        }
    }

    pub fn entries(&self) -> &[(f64, Posture)] {
        &self.entries
    }

    /// The switch time is inclusive: at `t = t_k` the new posture applies.
    pub fn posture_at(&self, t: f64) -> Posture {
        let idx = self.entries.partition_point(|(tk, _)| *tk <= t);
        self.entries[idx.saturating_sub(1)].1
    }
}

/// Constant position with a posture flip at `t_flip`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPosture {
    pub r: Vector3<f64>,
    pub yaw: f64,
    schedule: PostureSchedule,
}

pub fn step_posture(
    r: Vector3<f64>,
    yaw: f64,
    initial: Posture,
    t_flip: f64,
) -> Result<StepPosture, TrajectoryError> {
    let schedule = if t_flip <= 0.0 {
        PostureSchedule::constant(initial.flipped())
    } else {
        PostureSchedule::new(vec![(0.0, initial), (t_flip, initial.flipped())])?
    };
    Ok(StepPosture { r, yaw, schedule })
}

impl ReferenceSource for StepPosture {
    fn sample(&self, t: f64) -> FlatReference {
        FlatReference::hold(self.r, self.yaw, self.schedule.posture_at(t))
    }
}

/// Polynomial coefficients per segment in local time, lowest order first.
pub const POLY_ORDER: usize = 7;
const NCOEF: usize = POLY_ORDER + 1;
/// Axes x, y, z, yaw.
const AXES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub coeffs: [[f64; NCOEF]; AXES],
}

/// `d^k/dt^k` of `Σ c_i t^i`.
fn poly_derivative(coeffs: &[f64; NCOEF], t: f64, k: usize) -> f64 {
    let mut acc = 0.0;
    for i in (k..NCOEF).rev() {
        acc = acc * t + coeffs[i] * falling(i, k);
    }
    acc
}

/// `i·(i−1)···(i−k+1)`
fn falling(i: usize, k: usize) -> f64 {
    (0..k).map(|j| (i - j) as f64).product()
}

/// Piecewise polynomial in `(x, y, z, ψ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePolynomial {
    pub segments: Vec<Segment>,
}

impl PiecewisePolynomial {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Segment index and local time; clamps to `[0, duration]`.
    fn locate(&self, t: f64) -> (usize, f64) {
        let mut start = 0.0;
        let last = self.segments.len() - 1;
        for (i, seg) in self.segments.iter().enumerate() {
            if t < start + seg.duration || i == last {
                return (i, (t - start).clamp(0.0, seg.duration));
            }
            start += seg.duration;
        }
        unreachable!("at least one segment")
    }

    /// `k`-th derivative of axis `axis` at global time `t` (clamped).
    pub fn eval(&self, axis: usize, t: f64, k: usize) -> f64 {
        let (i, tau) = self.locate(t);
        poly_derivative(&self.segments[i].coeffs[axis], tau, k)
    }

    /// `k`-th derivative of segment `seg`, axis `axis` at local time `tau`.
    pub fn eval_segment(&self, seg: usize, axis: usize, tau: f64, k: usize) -> f64 {
        poly_derivative(&self.segments[seg].coeffs[axis], tau, k)
    }

    pub fn position(&self, t: f64, k: usize) -> Vector3<f64> {
        Vector3::new(self.eval(0, t, k), self.eval(1, t, k), self.eval(2, t, k))
    }

    /// `Σ_axes ∫ (p⁗)² dt` over x, y, z.
    pub fn snap_cost(&self) -> f64 {
        self.segments
            .iter()
            .map(|seg| {
                let q = snap_cost_matrix(seg.duration);
                (0..3)
                    .map(|a| {
                        let c = DVector::from_row_slice(&seg.coeffs[a]);
                        c.dot(&(&q * &c))
                    })
                    .sum::<f64>()
            })
            .sum()
    }
}

/// `∫₀ᵀ (p⁗)² dt = cᵀQc`.
fn snap_cost_matrix(duration: f64) -> DMatrix<f64> {
    DMatrix::from_fn(NCOEF, NCOEF, |j, k| {
        if j < 4 || k < 4 {
            return 0.0;
        }
        let p = (j + k - 7) as i32;
        falling(j, 4) * falling(k, 4) * duration.powi(p) / p as f64
    })
}

/// Minimum-snap problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinSnapSpec {
    pub waypoints: Vec<Vector3<f64>>,
    /// Yaw at each waypoint (rad); empty means zero throughout.
    #[serde(default)]
    pub yaw: Vec<f64>,
    pub durations: Vec<f64>,
    pub posture: PostureSchedule,
    /// Interior knot indices (1-based waypoint index) where the position
    /// acceleration is pinned to `−g·e3`.
    #[serde(default)]
    pub free_fall_knots: Vec<usize>,
    pub gravity: f64,
}

impl MinSnapSpec {
    /// Start → start + `δ` → start with the posture flipping at the middle
    /// waypoint and a free-fall constraint there.
    pub fn inversion(
        start: Vector3<f64>,
        delta: Vector3<f64>,
        durations: [f64; 2],
        initial: Posture,
        gravity: f64,
    ) -> Result<Self, TrajectoryError> {
        Ok(MinSnapSpec {
            waypoints: vec![start, start + delta, start],
            yaw: Vec::new(),
            durations: durations.to_vec(),
            posture: PostureSchedule::new(vec![
                (0.0, initial),
                (durations[0], initial.flipped()),
            ])?,
            free_fall_knots: vec![1],
            gravity,
        })
    }
}

/// Minimum-snap trajectory with its posture schedule. After the last segment
/// the final waypoint is held.
#[derive(Debug, Clone, PartialEq)]
pub struct MinSnapTrajectory {
    pub poly: PiecewisePolynomial,
    pub posture: PostureSchedule,
    pub spec: MinSnapSpec,
}

/// Equality constraints `A c = b` of one axis.
fn axis_constraints(
    values: &[f64],
    durations: &[f64],
    pinned_accel: &[(usize, f64)],
) -> (DMatrix<f64>, DVector<f64>) {
    let segs = durations.len();
    let n = segs * NCOEF;
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let row_at = |seg: usize, tau: f64, k: usize, sign: f64, row: &mut Vec<f64>| {
        for i in k..NCOEF {
            row[seg * NCOEF + i] += sign * falling(i, k) * tau.powi((i - k) as i32);
        }
    };
    // rest at both ends
    for k in 0..4 {
        let mut row = vec![0.0; n];
        row_at(0, 0.0, k, 1.0, &mut row);
        rows.push((row, if k == 0 { values[0] } else { 0.0 }));
        let mut row = vec![0.0; n];
        row_at(segs - 1, durations[segs - 1], k, 1.0, &mut row);
        rows.push((row, if k == 0 { values[segs] } else { 0.0 }));
    }
    for knot in 1..segs {
        let (left, right) = (knot - 1, knot);
        let mut row = vec![0.0; n];
        row_at(left, durations[left], 0, 1.0, &mut row);
        rows.push((row, values[knot]));
        let mut row = vec![0.0; n];
        row_at(right, 0.0, 0, 1.0, &mut row);
        rows.push((row, values[knot]));
        for k in 1..=4 {
            let mut row = vec![0.0; n];
            row_at(left, durations[left], k, 1.0, &mut row);
            row_at(right, 0.0, k, -1.0, &mut row);
            rows.push((row, 0.0));
        }
        if let Some(&(_, acc)) = pinned_accel.iter().find(|(k, _)| *k == knot) {
            let mut row = vec![0.0; n];
            row_at(right, 0.0, 2, 1.0, &mut row);
            rows.push((row, acc));
        }
    }
    let a = DMatrix::from_fn(rows.len(), n, |r, c| rows[r].0[c]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    (a, b)
}

fn solve_axis(
    values: &[f64],
    durations: &[f64],
    pinned_accel: &[(usize, f64)],
) -> Result<Vec<f64>, TrajectoryError> {
    let segs = durations.len();
    let n = segs * NCOEF;
    let (a, b) = axis_constraints(values, durations, pinned_accel);
    let m = a.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    for (s, &d) in durations.iter().enumerate() {
        let q = snap_cost_matrix(d) * 2.0;
        kkt.view_mut((s * NCOEF, s * NCOEF), (NCOEF, NCOEF)).copy_from(&q);
    }
    kkt.view_mut((n, 0), (m, n)).copy_from(&a);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(n, m).copy_from(&b);
    let lu = kkt.lu();
    let sol = lu.solve(&rhs).ok_or(TrajectoryError::Singular)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(TrajectoryError::Singular);
    }
    Ok(sol.rows(0, n).iter().copied().collect())
}

/// Solves the minimum-snap problem axis by axis.
pub fn min_snap(spec: &MinSnapSpec) -> Result<MinSnapTrajectory, TrajectoryError> {
    let segs = spec.durations.len();
    if spec.waypoints.len() != segs + 1 || segs == 0 {
        return Err(TrajectoryError::SegmentCount {
            waypoints: spec.waypoints.len(),
            expected: spec.waypoints.len().saturating_sub(1),
            got: segs,
        });
    }
    if spec.durations.iter().any(|d| !(*d > 0.0)) {
        return Err(TrajectoryError::NonPositiveDuration);
    }
    let yaw: Vec<f64> = if spec.yaw.is_empty() {
        vec![0.0; segs + 1]
    } else {
        spec.yaw.clone()
    };
    if yaw.len() != segs + 1 {
        return Err(TrajectoryError::SegmentCount {
            waypoints: yaw.len(),
            expected: segs,
            got: segs,
        });
    }
    let mut segments: Vec<Segment> = spec
        .durations
        .iter()
        .map(|&duration| Segment {
            duration,
            coeffs: [[0.0; NCOEF]; AXES],
        })
        .collect();
    for axis in 0..AXES {
        let values: Vec<f64> = if axis < 3 {
            spec.waypoints.iter().map(|w| w[axis]).collect()
        } else {
            yaw.clone()
        };
        let pinned: Vec<(usize, f64)> = match axis {
            0 | 1 => spec.free_fall_knots.iter().map(|&k| (k, 0.0)).collect(),
            2 => spec.free_fall_knots.iter().map(|&k| (k, -spec.gravity)).collect(),
            _ => Vec::new(),
        };
        let coeffs = solve_axis(&values, &spec.durations, &pinned)?;
        for (s, seg) in segments.iter_mut().enumerate() {
            seg.coeffs[axis].copy_from_slice(&coeffs[s * NCOEF..(s + 1) * NCOEF]);
        }
    }
    Ok(MinSnapTrajectory {
        poly: PiecewisePolynomial { segments },
        posture: spec.posture.clone(),
        spec: spec.clone(),
    })
}

impl MinSnapTrajectory {
    /// Largest violation of the equality constraints for every axis.
    pub fn constraint_residual(&self) -> f64 {
        let durations: Vec<f64> = self.poly.segments.iter().map(|s| s.duration).collect();
        let mut worst: f64 = 0.0;
        for axis in 0..3 {
            let values: Vec<f64> = self.spec.waypoints.iter().map(|w| w[axis]).collect();
            let pinned: Vec<(usize, f64)> = self
                .spec
                .free_fall_knots
                .iter()
                .map(|&k| (k, if axis == 2 { -self.spec.gravity } else { 0.0 }))
                .collect();
            let (a, b) = axis_constraints(&values, &durations, &pinned);
            let c = DVector::from_iterator(
                durations.len() * NCOEF,
                self.poly.segments.iter().flat_map(|s| s.coeffs[axis]),
            );
            worst = worst.max((a * c - b).amax());
        }
        worst
    }
}

impl ReferenceSource for MinSnapTrajectory {
    fn sample(&self, t: f64) -> FlatReference {
        let posture = self.posture.posture_at(t);
        let end = self.poly.duration();
        if t >= end {
            let last = *self.spec.waypoints.last().expect("validated");
            return FlatReference::hold(last, self.poly.eval(3, end, 0), posture);
        }
        FlatReference {
            r: self.poly.position(t, 0),
            v: self.poly.position(t, 1),
            a: self.poly.position(t, 2),
            j: self.poly.position(t, 3),
            yaw: self.poly.eval(3, t, 0),
            yaw_rate: self.poly.eval(3, t, 1),
            posture,
        }
    }
}

/// Horizontal circle about `(0, 0, z)` starting at `(radius, 0, z)`,
/// counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleReference {
    pub radius: f64,
    pub period: f64,
    pub z: f64,
    pub posture: Posture,
    /// `None`: tangent heading; `Some(ψ)`: constant heading.
    pub fixed_yaw: Option<f64>,
}

pub fn circle_reference(
    radius: f64,
    period: f64,
    z: f64,
    posture: Posture,
    fixed_yaw: Option<f64>,
) -> Result<CircleReference, TrajectoryError> {
    if !(radius >= 0.0) {
        return Err(TrajectoryError::Circle("radius must be non-negative"));
    }
    if !(period > 0.0) {
        return Err(TrajectoryError::Circle("period must be positive"));
    }
    Ok(CircleReference {
        radius,
        period,
        z,
        posture,
        fixed_yaw,
    })
}

impl ReferenceSource for CircleReference {
    fn sample(&self, t: f64) -> FlatReference {
        let w = std::f64::consts::TAU / self.period;
        let (s, c) = (w * t).sin_cos();
        let r = self.radius;
        let (yaw, yaw_rate) = match self.fixed_yaw {
            Some(psi) => (psi, 0.0),
            None if r == 0.0 => (0.0, 0.0),
            None => (w * t + std::f64::consts::FRAC_PI_2, w),
        };
        FlatReference {
            r: Vector3::new(r * c, r * s, self.z),
            v: Vector3::new(-r * w * s, r * w * c, 0.0),
            a: Vector3::new(-r * w * w * c, -r * w * w * s, 0.0),
            j: Vector3::new(r * w.powi(3) * s, -r * w.powi(3) * c, 0.0),
            yaw,
            yaw_rate,
            posture: self.posture,
        }
    }
}

/// Writes `t, r, v, a, j, yaw, yaw_rate, eta` sampled every `dt` over
/// `[0, duration]`.
pub fn write_reference_csv<W: Write>(
    writer: W,
    source: &dyn ReferenceSource,
    dt: f64,
    duration: f64,
) -> Result<(), TrajectoryError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t", "rx", "ry", "rz", "vx", "vy", "vz", "ax", "ay", "az", "jx", "jy", "jz", "yaw",
        "yaw_rate", "eta",
    ])?;
    let steps = (duration / dt).round() as usize;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let s = source.sample(t);
        let mut rec = vec![t.to_string()];
        for v in [s.r, s.v, s.a, s.j] {
            rec.extend(v.iter().map(|x| x.to_string()));
        }
        rec.push(s.yaw.to_string());
        rec.push(s.yaw_rate.to_string());
        rec.push(s.posture.sign().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
