//! Hopf-fibration position and attitude controller.
//!
//! The position loop produces a desired acceleration and jerk, hence a thrust
//! axis `s` and its rate. The desired body z axis is `η·s`; it is lifted to a
//! quaternion with one of two base charts (north, south) composed with a yaw
//! rotation about body z. Together with the two thrust postures this gives the
//! four controller charts. The attitude loop uses the quaternion logarithm
//! error weighted by the transposed inverse right Jacobian.

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ControlWrench, QuadParams, QuadState};
use crate::so3::{
    chart_north, chart_south, chart_yaw_offset, inv_right_jacobian, log_so3, yaw_quat, Quat,
    So3Error, UnitVector3,
};

/// Below this norm the desired acceleration has no usable direction.
pub const DEGENERATE_ACCEL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum HfcaError {
    #[error("desired acceleration norm {0} is too small to define a thrust axis")]
    DegenerateThrust(f64),
    #[error("chart evaluated outside its domain: {0}")]
    Chart(#[from] So3Error),
}

/// Thrust posture `η`: body z codirectional (`Nominal`) or opposed
/// (`Inverted`) to the desired thrust axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Posture {
    Nominal,
    Inverted,
}

impl Posture {
    pub fn sign(self) -> f64 {
        match self {
            Posture::Nominal => 1.0,
            Posture::Inverted => -1.0,
        }
    }

    /// Sign of a continuous posture channel; zero maps to `Nominal`.
    pub fn from_sign(v: f64) -> Self {
        if v < 0.0 {
            Posture::Inverted
        } else {
            Posture::Nominal
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Posture::Nominal => Posture::Inverted,
            Posture::Inverted => Posture::Nominal,
        }
    }
}

/// Hybrid flat reference sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatReference {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub j: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
    pub posture: Posture,
}

impl FlatReference {
    pub fn hold(r: Vector3<f64>, yaw: f64, posture: Posture) -> Self {
        FlatReference {
            r,
            v: Vector3::zeros(),
            a: Vector3::zeros(),
            j: Vector3::zeros(),
            yaw,
            yaw_rate: 0.0,
            posture,
        }
    }
}

/// Diagonal feedback gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub k_r: Vector3<f64>,
    pub k_v: Vector3<f64>,
    pub k_att: Vector3<f64>,
    pub k_omega: Vector3<f64>,
}

impl Gains {
    /// Attitude gains scaled by the vehicle inertia so the closed-loop
    /// attitude dynamics are `ë = −k_att·e − k_omega·ė` per axis.
    pub fn inertia_scaled(
        k_r: f64,
        k_v: f64,
        k_att: f64,
        k_omega: f64,
        quad: &QuadParams,
    ) -> Self {
        let d = quad.inertia.diagonal();
        Gains {
            k_r: Vector3::repeat(k_r),
            k_v: Vector3::repeat(k_v),
            k_att: d * k_att,
            k_omega: d * k_omega,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.k_r
            .iter()
            .chain(self.k_v.iter())
            .chain(self.k_att.iter())
            .chain(self.k_omega.iter())
            .all(|&g| g > 0.0 && g.is_finite())
    }
}

impl Default for Gains {
    /// Yaw is softer than roll and pitch: its torque authority comes only
    /// from the rotor drag moments.
    fn default() -> Self {
        let mut g = Gains::inertia_scaled(10.0, 6.0, 120.0, 16.0, &QuadParams::default());
        let izz = QuadParams::default().inertia[(2, 2)];
        g.k_att.z = 30.0 * izz;
        g.k_omega.z = 8.0 * izz;
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chart {
    North,
    South,
}

impl Chart {
    pub fn id(self) -> u8 {
        match self {
            Chart::North => 0,
            Chart::South => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartState {
    pub chart: Chart,
    pub posture: Posture,
    /// rad; always zero on the north chart
    pub yaw_offset: f64,
}

impl ChartState {
    /// Chart matching the hemisphere of `b3d`, without offset.
    pub fn initial(b3d: &Vector3<f64>, posture: Posture) -> Self {
        ChartState {
            chart: if b3d.z < 0.0 { Chart::South } else { Chart::North },
            posture,
            yaw_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartConfig {
    /// Hysteresis half-width in `c`.
    pub hysteresis: f64,
    /// Minimum `‖(a, b)‖` for which the equator yaw offset is applied.
    pub offset_min_norm: f64,
}

impl Default for ChartConfig {
    fn default() -> Self {
        ChartConfig {
            hysteresis: 0.1,
            offset_min_norm: 1e-6,
        }
    }
}

/// Output of the position loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionCommand {
    pub acc_d: Vector3<f64>,
    pub jerk_d: Vector3<f64>,
    /// `m·b3·r̈_d` (N)
    pub f_c: f64,
}

/// Position feedback. `accel` is the current world acceleration of the
/// vehicle; `r_mod` shifts the position reference.
pub fn position_feedback(
    x: &QuadState,
    accel: &Vector3<f64>,
    reference: &FlatReference,
    r_mod: Option<&Vector3<f64>>,
    gains: &Gains,
    quad: &QuadParams,
) -> Result<PositionCommand, HfcaError> {
    let target = match r_mod {
        Some(d) => reference.r + d,
        None => reference.r,
    };
    let e_r = x.r - target;
    let e_v = x.v - reference.v;
    let e_a = accel - reference.a;
    let acc_d = -gains.k_r.component_mul(&e_r) - gains.k_v.component_mul(&e_v)
        + reference.a
        + Vector3::z() * quad.gravity;
    let jerk_d = -gains.k_r.component_mul(&e_v) - gains.k_v.component_mul(&e_a) + reference.j;
    let norm = acc_d.norm();
    if !(norm >= DEGENERATE_ACCEL) {
        return Err(HfcaError::DegenerateThrust(norm));
    }
    Ok(PositionCommand {
        acc_d,
        jerk_d,
        f_c: quad.mass * x.b3().dot(&acc_d),
    })
}

/// Thrust axis `s = r̈_d/‖r̈_d‖` and `ṡ = (I − ssᵀ) r⃛_d / ‖r̈_d‖`.
pub fn thrust_axis(
    acc_d: &Vector3<f64>,
    jerk_d: &Vector3<f64>,
) -> Result<(UnitVector3, Vector3<f64>), HfcaError> {
    let norm = acc_d.norm();
    if !(norm >= DEGENERATE_ACCEL) {
        return Err(HfcaError::DegenerateThrust(norm));
    }
    let s = Unit::new_unchecked(acc_d / norm);
    let s_dot = (jerk_d - s.into_inner() * s.dot(jerk_d)) / norm;
    Ok((s, s_dot))
}

/// Chart transition with hysteresis. A switch into the south chart saves the
/// equator yaw offset unless `(a, b)` is ill-conditioned or the switch is
/// caused by a posture change; both of those fall back to no offset.
pub fn chart_switch(
    cs: &ChartState,
    b3d: &Vector3<f64>,
    posture: Posture,
    cfg: &ChartConfig,
) -> ChartState {
    let posture_changed = posture != cs.posture;
    match cs.chart {
        Chart::North if b3d.z < -cfg.hysteresis => {
            let ab = b3d.x.hypot(b3d.y);
            let yaw_offset = if ab > cfg.offset_min_norm && !posture_changed {
                chart_yaw_offset(b3d)
            } else {
                0.0
            };
            ChartState {
                chart: Chart::South,
                posture,
                yaw_offset,
            }
        }
        Chart::South if b3d.z > cfg.hysteresis => ChartState {
            chart: Chart::North,
            posture,
            yaw_offset: 0.0,
        },
        _ => ChartState { posture, ..*cs },
    }
}

/// Desired attitude for thrust axis `s`, posture and reference yaw in chart
/// `cs.chart`. Returns the quaternion and the yaw angle applied about body z.
pub fn desired_attitude(
    s: &UnitVector3,
    posture: Posture,
    yaw: f64,
    cs: &ChartState,
) -> Result<(Quat, f64), HfcaError> {
    let b3d = Unit::new_unchecked(s.into_inner() * posture.sign());
    let psi_n = posture.sign() * yaw;
    Ok(match cs.chart {
        Chart::North => (chart_north(&b3d)? * yaw_quat(psi_n), psi_n),
        Chart::South => {
            let psi_s = cs.yaw_offset + psi_n;
            (chart_south(&b3d)? * yaw_quat(psi_s), psi_s)
        }
    })
}

/// `ω_d = 2·vec(q_d⁻¹ ⊗ q̇_d)`.
pub fn desired_angular_velocity(q_d: &Quat, q_d_dot: &Quat) -> Vector3<f64> {
    (q_d.inverse() * *q_d_dot).vec() * 2.0
}

/// Attitude error pair `(e_R, e_ω)`.
pub fn attitude_errors(
    q: &Quat,
    omega: &Vector3<f64>,
    q_d: &Quat,
    omega_d: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    // conjugate rather than inverse keeps q_e exactly the identity when q = q_d
    let q_e = q_d.conj() * *q;
    let e_r = log_so3(q_e);
    let e_w = omega - q_e.rotation_matrix().transpose() * omega_d;
    (e_r, e_w)
}

/// Body torque `−J_r⁻ᵀ(e_R) K_R e_R − K_ω e_ω + r_off × [0, 0, f_c]`.
pub fn attitude_feedback(
    q: &Quat,
    omega: &Vector3<f64>,
    q_d: &Quat,
    omega_d: &Vector3<f64>,
    gains: &Gains,
    cm_offset: &Vector3<f64>,
    f_c: f64,
) -> Vector3<f64> {
    let (e_r, e_w) = attitude_errors(q, omega, q_d, omega_d);
    torque_from_errors(&e_r, &e_w, gains, cm_offset, f_c)
}

/// Torque law evaluated on precomputed errors.
pub fn torque_from_errors(
    e_r: &Vector3<f64>,
    e_w: &Vector3<f64>,
    gains: &Gains,
    cm_offset: &Vector3<f64>,
    f_c: f64,
) -> Vector3<f64> {
    -inv_right_jacobian(e_r).transpose() * gains.k_att.component_mul(e_r)
        - gains.k_omega.component_mul(e_w)
        + cm_offset.cross(&Vector3::new(0.0, 0.0, f_c))
}

/// Controller settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub gains: Gains,
    pub charts: ChartConfig,
    /// Position loop runs once every this many attitude ticks.
    pub position_divider: u32,
    /// Time step of the finite difference used for `q̇_d` (s).
    pub fd_step: f64,
    /// Bound on the perturbation `‖ṡ‖·fd_step` of the thrust axis.
    pub fd_max_axis_step: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            gains: Gains::default(),
            charts: ChartConfig::default(),
            position_divider: 10,
            fd_step: 1e-3,
            fd_max_axis_step: 1e-3,
        }
    }
}

/// Everything the controller produced on one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub wrench: ControlWrench,
    pub chart: ChartState,
    pub q_d: Quat,
    pub omega_d: Vector3<f64>,
    pub acc_d: Vector3<f64>,
    pub axis: UnitVector3,
}

#[derive(Debug, Clone, Copy)]
struct OuterLoop {
    acc_d: Vector3<f64>,
    axis: UnitVector3,
    q_d: Quat,
    omega_d: Vector3<f64>,
}

/// Stateful controller: chart bookkeeping plus the outer-loop outputs held
/// between position updates. One instance per vehicle.
#[derive(Debug, Clone)]
pub struct HfcaController {
    cfg: ControllerConfig,
    quad: QuadParams,
    chart: Option<ChartState>,
    outer: Option<OuterLoop>,
    tick: u64,
}

impl HfcaController {
    pub fn new(cfg: ControllerConfig, quad: QuadParams) -> Self {
        HfcaController {
            cfg,
            quad,
            chart: None,
            outer: None,
            tick: 0,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn chart(&self) -> Option<ChartState> {
        self.chart
    }

    pub fn reset(&mut self) {
        self.chart = None;
        self.outer = None;
        self.tick = 0;
    }

    /// One attitude tick; the position loop is refreshed every
    /// `position_divider` ticks. `accel` is the current world acceleration.
    pub fn control_step(
        &mut self,
        x: &QuadState,
        accel: &Vector3<f64>,
        reference: &FlatReference,
        r_mod: Option<&Vector3<f64>>,
    ) -> Result<ControlOutput, HfcaError> {
        let divider = u64::from(self.cfg.position_divider.max(1));
        if self.outer.is_none() || self.tick.is_multiple_of(divider) {
            self.outer = Some(self.position_update(x, accel, reference, r_mod)?);
        }
        self.tick += 1;
        let outer = self.outer.expect("outer loop initialized above");
        let chart = self.chart.expect("chart initialized by the position update");
        let f_c = self.quad.mass * x.b3().dot(&outer.acc_d);
        let tau = attitude_feedback(
            &x.q,
            &x.omega,
            &outer.q_d,
            &outer.omega_d,
            &self.cfg.gains,
            &self.quad.cm_offset,
            f_c,
        );
        Ok(ControlOutput {
            wrench: ControlWrench::new(f_c, tau),
            chart,
            q_d: outer.q_d,
            omega_d: outer.omega_d,
            acc_d: outer.acc_d,
            axis: outer.axis,
        })
    }

    fn position_update(
        &mut self,
        x: &QuadState,
        accel: &Vector3<f64>,
        reference: &FlatReference,
        r_mod: Option<&Vector3<f64>>,
    ) -> Result<OuterLoop, HfcaError> {
        let posture = reference.posture;
        let held = |this: &Self| match this.outer {
            Some(o) => o.axis,
            None => Unit::new_normalize(x.b3() * posture.sign()),
        };
        let (acc_d, axis, s_dot) =
            match position_feedback(x, accel, reference, r_mod, &self.cfg.gains, &self.quad) {
                Ok(cmd) => {
                    let (s, s_dot) = thrust_axis(&cmd.acc_d, &cmd.jerk_d)?;
                    (cmd.acc_d, s, s_dot)
                }
                Err(HfcaError::DegenerateThrust(_)) => {
                    let s = held(self);
                    (Vector3::zeros(), s, Vector3::zeros())
                }
                Err(e) => return Err(e),
            };

        let b3d = axis.into_inner() * posture.sign();
        let chart = match self.chart {
            None => ChartState::initial(&b3d, posture),
            Some(cs) => chart_switch(&cs, &b3d, posture, &self.cfg.charts),
        };
        self.chart = Some(chart);

        let (q_d, _) = desired_attitude(&axis, posture, reference.yaw, &chart)?;
        let q_d_dot = self.attitude_rate(&axis, &s_dot, posture, reference, &chart, &q_d)?;
        Ok(OuterLoop {
            acc_d,
            axis,
            q_d,
            omega_d: desired_angular_velocity(&q_d, &q_d_dot),
        })
    }

    /// Central difference of `q_d` along `(ṡ, ψ̇)` inside a fixed chart, with
    /// both samples sign-aligned to `q_d`.
    fn attitude_rate(
        &self,
        axis: &UnitVector3,
        s_dot: &Vector3<f64>,
        posture: Posture,
        reference: &FlatReference,
        chart: &ChartState,
        q_d: &Quat,
    ) -> Result<Quat, HfcaError> {
        let rate = s_dot.norm();
        let mut h = self.cfg.fd_step;
        if rate * h > self.cfg.fd_max_axis_step {
            h = self.cfg.fd_max_axis_step / rate;
        }
        let sample = |sign: f64| -> Result<Quat, HfcaError> {
            let s = Unit::new_normalize(axis.into_inner() + s_dot * (sign * h));
            let yaw = reference.yaw + reference.yaw_rate * (sign * h);
            let (q, _) = desired_attitude(&s, posture, yaw, chart)?;
            Ok(q.aligned_with(q_d))
        };
        let (plus, minus) = (sample(1.0)?, sample(-1.0)?);
        Ok((plus - minus).scale(0.5 / h))
    }
}
