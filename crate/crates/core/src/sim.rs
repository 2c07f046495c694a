//! Rigid-body quadrotor dynamics.
//!
//! Rotor numbering (body frame, x forward, y left):
//! 1 front-right `(+d, −d)`, 2 rear-left `(−d, +d)`,
//! 3 front-left `(+d, +d)`, 4 rear-right `(−d, −d)`.
//! Rotors 1 and 2 produce negative yaw torque for positive thrust, 3 and 4
//! positive.

use std::io::Write;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{
    motor_step, rate_of_thrust, ActuatorParams, MotorState, SteadyStateParams, ROTORS,
};
use crate::so3::{skew, Quat};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state at t = {0} s")]
    NonFinite(f64),
    #[error("invalid vehicle parameters: {0}")]
    Params(String),
    #[error("trace export: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace export: {0}")]
    Csv(#[from] csv::Error),
}

/// Vehicle constants. Defaults are placeholder values for a ~1 kg vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// kg·m², body frame
    pub inertia: Matrix3<f64>,
    /// `(x_i, y_i)` in m
    pub rotor_positions: [[f64; 2]; ROTORS],
    /// Offset from the centre of mass to the geometric centre, body frame (m).
    pub cm_offset: Vector3<f64>,
    /// m/s²
    pub gravity: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        let d = 0.09;
        QuadParams {
            mass: 0.95,
            inertia: Matrix3::from_diagonal(&Vector3::new(0.0045, 0.0045, 0.0085)),
            rotor_positions: [[d, -d], [-d, d], [d, d], [-d, -d]],
            cm_offset: Vector3::zeros(),
            gravity: 9.81,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.mass > 0.0) {
            return Err(SimError::Params(format!("mass {} must be positive", self.mass)));
        }
        if (self.inertia - self.inertia.transpose()).abs().max() > 1e-12 {
            return Err(SimError::Params("inertia must be symmetric".into()));
        }
        if self.inertia.cholesky().is_none() {
            return Err(SimError::Params("inertia must be positive definite".into()));
        }
        if !(self.gravity >= 0.0) {
            return Err(SimError::Params("gravity must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }
}

/// Collective thrust and body torques.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlWrench {
    /// N, signed along body z
    pub f_c: f64,
    /// N·m
    pub tau: Vector3<f64>,
}

impl ControlWrench {
    pub fn new(f_c: f64, tau: Vector3<f64>) -> Self {
        ControlWrench { f_c, tau }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.f_c, self.tau.x, self.tau.y, self.tau.z)
    }

    pub fn from_vector(u: &Vector4<f64>) -> Self {
        ControlWrench {
            f_c: u[0],
            tau: Vector3::new(u[1], u[2], u[3]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f_c.is_finite() && self.tau.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    /// m, world
    pub r: Vector3<f64>,
    /// m/s, world
    pub v: Vector3<f64>,
    /// body → world
    pub q: Quat,
    /// rad/s, body
    pub omega: Vector3<f64>,
    pub motors: MotorState,
}

impl Default for QuadState {
    fn default() -> Self {
        QuadState {
            r: Vector3::zeros(),
            v: Vector3::zeros(),
            q: Quat::IDENTITY,
            omega: Vector3::zeros(),
            motors: MotorState::default(),
        }
    }
}

impl QuadState {
    /// At rest with the given attitude and the rotors spinning at the rates
    /// that balance gravity for that posture (`b3 · e3` sign).
    pub fn hovering(q: Quat, quad: &QuadParams, act: &ActuatorParams) -> Self {
        let up = q.rotate(&Vector3::z()).z;
        let per_rotor = quad.hover_thrust() / 4.0 * up.signum();
        QuadState {
            q,
            motors: act.rates_for_thrust(per_rotor),
            ..Default::default()
        }
    }

    /// Body z axis in the world frame.
    pub fn b3(&self) -> Vector3<f64> {
        self.q.rotate(&Vector3::z())
    }

    /// Gravity direction expressed in the body frame, `−Rᵀe3`.
    pub fn body_gravity(&self) -> Vector3<f64> {
        -(self.q.rotation_matrix().transpose() * Vector3::z())
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(self.v.iter()).chain(self.omega.iter()).all(|v| v.is_finite())
            && self.q.is_finite()
            && self.motors.is_finite()
    }
}

/// Mixer matrix `M(Ω)` mapping rotor thrusts to `[f_c, τx, τy, τz]`. The
/// moment scale of each column follows the regime of that rotor's rate.
pub fn mixer(motors: &MotorState, quad: &QuadParams, ss: &SteadyStateParams) -> Matrix4<f64> {
    const YAW_SIGN: [f64; ROTORS] = [-1.0, -1.0, 1.0, 1.0];
    Matrix4::from_fn(|row, i| {
        let [x, y] = quad.rotor_positions[i];
        match row {
            0 => 1.0,
            1 => y,
            2 => -x,
            _ => YAW_SIGN[i] * ss.rotors[i].moment_scale(motors.0[i]),
        }
    })
}

/// `u = M·T`.
pub fn wrench_from_thrusts(thrusts: &Vector4<f64>, m: &Matrix4<f64>) -> ControlWrench {
    ControlWrench::from_vector(&(m * thrusts))
}

/// Rigid-body part of the state derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDeriv {
    pub r_dot: Vector3<f64>,
    pub v_dot: Vector3<f64>,
    pub q_dot: Quat,
    pub omega_dot: Vector3<f64>,
}

/// World-frame acceleration produced by `f_c` at attitude `q`.
pub fn linear_acceleration(q: &Quat, f_c: f64, quad: &QuadParams) -> Vector3<f64> {
    q.rotate(&Vector3::z()) * (f_c / quad.mass) - Vector3::z() * quad.gravity
}

/// Derivative of `(r, v, q, ω)` under a constant wrench.
pub fn rigid_body_deriv(x: &QuadState, u: &ControlWrench, quad: &QuadParams) -> StateDeriv {
    let i_omega = quad.inertia * x.omega;
    let rhs = -x.omega.cross(&i_omega) + u.tau;
    StateDeriv {
        r_dot: x.v,
        v_dot: linear_acceleration(&x.q, u.f_c, quad),
        q_dot: (x.q * Quat::pure(x.omega)).scale(0.5),
        omega_dot: solve_inertia(quad, &rhs),
    }
}

/// State derivative for rotor thrusts `thrusts`, mixed at the current rotor
/// regimes.
pub fn dynamics_deriv(
    x: &QuadState,
    thrusts: &Vector4<f64>,
    quad: &QuadParams,
    ss: &SteadyStateParams,
) -> StateDeriv {
    let u = wrench_from_thrusts(thrusts, &mixer(&x.motors, quad, ss));
    rigid_body_deriv(x, &u, quad)
}

/// Derivative with a centre-of-mass offset. `r` tracks the geometric centre;
/// the offset is rotated into the world frame before entering the
/// translational equation.
pub fn dynamics_deriv_cm_offset(x: &QuadState, u: &ControlWrench, quad: &QuadParams) -> StateDeriv {
    let off = quad.cm_offset;
    let i_omega = quad.inertia * x.omega;
    let rhs = -x.omega.cross(&i_omega) + u.tau - off.cross(&Vector3::new(0.0, 0.0, u.f_c));
    let omega_dot = solve_inertia(quad, &rhs);
    let w = skew(&x.omega);
    let body_coupling = skew(&omega_dot) * off + w * w * off;
    StateDeriv {
        r_dot: x.v,
        v_dot: linear_acceleration(&x.q, u.f_c, quad) - x.q.rotate(&body_coupling),
        q_dot: (x.q * Quat::pure(x.omega)).scale(0.5),
        omega_dot,
    }
}

fn solve_inertia(quad: &QuadParams, rhs: &Vector3<f64>) -> Vector3<f64> {
    let m = &quad.inertia;
    if m[(0, 1)] == 0.0 && m[(0, 2)] == 0.0 && m[(1, 2)] == 0.0 {
        Vector3::new(
            rhs.x / quad.inertia[(0, 0)],
            rhs.y / quad.inertia[(1, 1)],
            rhs.z / quad.inertia[(2, 2)],
        )
    } else {
        quad.inertia
            .cholesky()
            .map(|c| c.solve(rhs))
            .unwrap_or_else(|| Vector3::repeat(f64::NAN))
    }
}

fn advance(x: &QuadState, d: &StateDeriv, h: f64) -> QuadState {
    QuadState {
        r: x.r + d.r_dot * h,
        v: x.v + d.v_dot * h,
        q: x.q + d.q_dot.scale(h),
        omega: x.omega + d.omega_dot * h,
        motors: x.motors,
    }
}

/// One classical Runge–Kutta step of `f` followed by quaternion
/// renormalization. Rotor rates are carried through unchanged.
pub fn rk4_step<F>(x: &QuadState, dt: f64, f: F) -> QuadState
where
    F: Fn(&QuadState) -> StateDeriv,
{
    let k1 = f(x);
    let k2 = f(&advance(x, &k1, 0.5 * dt));
    let k3 = f(&advance(x, &k2, 0.5 * dt));
    let k4 = f(&advance(x, &k3, dt));
    let w = dt / 6.0;
    QuadState {
        r: x.r + (k1.r_dot + k2.r_dot * 2.0 + k3.r_dot * 2.0 + k4.r_dot) * w,
        v: x.v + (k1.v_dot + k2.v_dot * 2.0 + k3.v_dot * 2.0 + k4.v_dot) * w,
        q: (x.q + (k1.q_dot + k2.q_dot.scale(2.0) + k3.q_dot.scale(2.0) + k4.q_dot).scale(w))
            .normalize(),
        omega: x.omega
            + (k1.omega_dot + k2.omega_dot * 2.0 + k3.omega_dot * 2.0 + k4.omega_dot) * w,
        motors: x.motors,
    }
}

/// Result of one simulator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: QuadState,
    /// Thrusts actually produced during the step (N).
    pub thrusts: Vector4<f64>,
    pub wrench: ControlWrench,
}

/// Advances the vehicle by `dt`.
///
/// `command_model` converts the thrust commands into rate set points (the
/// controller's belief); `plant` supplies the transient response and the
/// thrust actually produced at the new rates.
pub fn step(
    x: &QuadState,
    thrust_cmd: &Vector4<f64>,
    quad: &QuadParams,
    command_model: &SteadyStateParams,
    plant: &ActuatorParams,
    dt: f64,
) -> Result<StepOutcome, SimError> {
    debug_assert!(dt > 0.0);
    let desired: [f64; ROTORS] =
        std::array::from_fn(|i| rate_of_thrust(thrust_cmd[i], command_model, i).omega);
    let motors = motor_step(&x.motors, &desired, &plant.transient, dt);
    let thrusts = Vector4::from_fn(|i, _| plant.steady.rotors[i].thrust(motors.0[i]));
    let wrench = wrench_from_thrusts(&thrusts, &mixer(&motors, quad, &plant.steady));
    let mut next = rk4_step(x, dt, |s| rigid_body_deriv(s, &wrench, quad));
    next.motors = motors;
    if !next.is_finite() {
        return Err(SimError::NonFinite(f64::NAN));
    }
    Ok(StepOutcome {
        state: next,
        thrusts,
        wrench,
    })
}

/// One row of an exported trajectory trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: QuadState,
    pub thrusts: Vector4<f64>,
    pub wrench: ControlWrench,
    /// 0 = north chart, 1 = south chart
    pub chart: u8,
    pub eta: f64,
}

pub const TRACE_HEADER: [&str; 28] = [
    "t", "rx", "ry", "rz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz", "omega1",
    "omega2", "omega3", "omega4", "T1", "T2", "T3", "T4", "fc", "taux", "tauy", "tauz", "chart",
    "eta",
];

/// Writes `rows` as CSV.
pub fn write_trace_csv<W: Write>(writer: W, rows: &[TraceRow]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_HEADER)?;
    for row in rows {
        let s = &row.state;
        let mut rec: Vec<String> = Vec::with_capacity(28);
        rec.push(row.t.to_string());
        rec.extend(s.r.iter().chain(s.v.iter()).map(|v| v.to_string()));
        rec.extend(s.q.to_array().iter().map(|v| v.to_string()));
        rec.extend(s.omega.iter().map(|v| v.to_string()));
        rec.extend(s.motors.0.iter().map(|v| v.to_string()));
        rec.extend(row.thrusts.iter().map(|v| v.to_string()));
        rec.push(row.wrench.f_c.to_string());
        rec.extend(row.wrench.tau.iter().map(|v| v.to_string()));
        rec.push(row.chart.to_string());
        rec.push(row.eta.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rx_pi() -> Quat {
        Quat::from_axis_angle(&Vector3::x(), std::f64::consts::PI)
    }

    #[test]
    fn mixer_sign_pattern() {
        let quad = QuadParams::default();
        let ss = SteadyStateParams::default();
        let m = mixer(&MotorState([100.0; 4]), &quad, &ss);
        let ms = ss.rotors[0].forward.moment_scale;
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0; 4]);
        assert_eq!(
            m.row(3).iter().copied().collect::<Vec<_>>(),
            vec![-ms, -ms, ms, ms]
        );
        let reversed = mixer(&MotorState([-100.0, 100.0, 100.0, 100.0]), &quad, &ss);
        assert_eq!(reversed[(3, 0)], -ss.rotors[0].reverse.moment_scale);
        assert_eq!(reversed[(3, 1)], -ms);
    }

    #[test]
    fn mixer_is_well_conditioned() {
        let quad = QuadParams::default();
        let m = mixer(&MotorState([1.0; 4]), &quad, &SteadyStateParams::default());
        let sv = m.singular_values();
        assert!(sv.max() / sv.min() < 1e3);
    }

    #[test]
    fn wrench_examples() {
        let quad = QuadParams::default();
        let m = mixer(&MotorState([1.0; 4]), &quad, &SteadyStateParams::default());
        let mg = quad.hover_thrust();
        let u = wrench_from_thrusts(&Vector4::repeat(mg / 4.0), &m);
        assert_relative_eq!(u.f_c, mg, epsilon = 1e-12);
        assert!(u.tau.norm() < 1e-12);
        assert_eq!(wrench_from_thrusts(&Vector4::zeros(), &m), ControlWrench::default());
        // more thrust on the +y rotors (2, 3), less on the −y rotors (1, 4)
        let u = wrench_from_thrusts(&Vector4::new(-0.5, 0.5, 0.5, -0.5), &m);
        assert_relative_eq!(u.tau.x, 4.0 * 0.5 * 0.09, epsilon = 1e-12);
        assert!(u.tau.y.abs() < 1e-12 && u.tau.z.abs() < 1e-12 && u.f_c.abs() < 1e-12);
    }

    #[test]
    fn yaw_torque_of_positive_thrusts() {
        let quad = QuadParams::default();
        let ss = SteadyStateParams::default();
        let t = Vector4::new(1.0, 2.0, 3.5, 0.25);
        let u = wrench_from_thrusts(&t, &mixer(&MotorState([1.0; 4]), &quad, &ss));
        let ms = ss.rotors[0].forward.moment_scale;
        assert_relative_eq!(u.tau.z, ms * (-t[0] - t[1] + t[2] + t[3]), epsilon = 1e-15);
    }

    #[test]
    fn hover_and_free_fall_derivatives() {
        let quad = QuadParams::default();
        let mg = quad.hover_thrust();
        let x = QuadState::default();
        let d = rigid_body_deriv(&x, &ControlWrench::new(mg, Vector3::zeros()), &quad);
        assert!(d.v_dot.norm() < 1e-12 && d.omega_dot.norm() < 1e-12);

        let inv = QuadState {
            q: rx_pi(),
            ..Default::default()
        };
        let d = rigid_body_deriv(&inv, &ControlWrench::new(-mg, Vector3::zeros()), &quad);
        assert!(d.v_dot.norm() < 1e-12);

        let d = rigid_body_deriv(&x, &ControlWrench::default(), &quad);
        assert_relative_eq!(d.v_dot, Vector3::new(0.0, 0.0, -quad.gravity), epsilon = 1e-15);
    }

    #[test]
    fn hover_step_is_stationary() {
        let quad = QuadParams::default();
        let act = ActuatorParams::default();
        let x = QuadState::hovering(Quat::IDENTITY, &quad, &act);
        let cmd = Vector4::repeat(quad.hover_thrust() / 4.0);
        let out = step(&x, &cmd, &quad, &act.steady, &act, 0.001).unwrap();
        assert!((out.state.r - x.r).norm() < 1e-9);
        assert!((out.state.v - x.v).norm() < 1e-9);
        assert!(out.state.q.sign_invariant_distance(&x.q) < 1e-9);
        assert!((out.state.omega - x.omega).norm() < 1e-9);

        let xi = QuadState::hovering(rx_pi(), &quad, &act);
        let out = step(&xi, &(-cmd), &quad, &act.steady, &act, 0.001).unwrap();
        assert!((out.state.v).norm() < 1e-9);
    }

    fn tumbling() -> (QuadState, QuadParams) {
        let quad = QuadParams {
            inertia: Matrix3::from_diagonal(&Vector3::new(0.0045, 0.0062, 0.0085)),
            ..Default::default()
        };
        let x = QuadState {
            omega: Vector3::new(4.0, -1.5, 2.0),
            q: Quat::from_euler_zyx(0.3, -0.2, 0.7),
            ..Default::default()
        };
        (x, quad)
    }

    fn kinetic_energy(x: &QuadState, quad: &QuadParams) -> f64 {
        0.5 * x.omega.dot(&(quad.inertia * x.omega))
    }

    #[test]
    fn torque_free_energy_is_conserved() {
        let (mut x, quad) = tumbling();
        let e0 = kinetic_energy(&x, &quad);
        for _ in 0..1000 {
            x = rk4_step(&x, 0.001, |s| rigid_body_deriv(s, &ControlWrench::default(), &quad));
        }
        assert!((kinetic_energy(&x, &quad) - e0).abs() < 1e-6 * e0.max(1.0));
        assert!((x.q.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cm_offset_reduces_to_plain_dynamics() {
        let (x, quad) = tumbling();
        let u = ControlWrench::new(5.0, Vector3::new(0.01, -0.02, 0.003));
        let a = rigid_body_deriv(&x, &u, &quad);
        let b = dynamics_deriv_cm_offset(&x, &u, &quad);
        assert!((a.v_dot - b.v_dot).norm() < 1e-12);
        assert!((a.omega_dot - b.omega_dot).norm() < 1e-12);
    }

    #[test]
    fn cm_offset_pitches_at_hover() {
        let quad = QuadParams {
            cm_offset: Vector3::new(0.01, 0.0, 0.0),
            ..Default::default()
        };
        let mg = quad.hover_thrust();
        let x = QuadState::default();
        let d = dynamics_deriv_cm_offset(&x, &ControlWrench::new(mg, Vector3::zeros()), &quad);
        // −r_off × [0,0,mg] = (0, 0.01·mg, 0)
        let expected = Vector3::new(0.0, 0.01 * mg / quad.inertia[(1, 1)], 0.0);
        assert_relative_eq!(d.omega_dot, expected, epsilon = 1e-12);

        let tau = quad.cm_offset.cross(&Vector3::new(0.0, 0.0, mg));
        let d = dynamics_deriv_cm_offset(&x, &ControlWrench::new(mg, tau), &quad);
        assert!(d.omega_dot.norm() < 1e-12);
    }

    #[test]
    fn replay_is_bit_identical() {
        let quad = QuadParams::default();
        let act = ActuatorParams::default();
        let run = || {
            let mut x = QuadState::hovering(Quat::IDENTITY, &quad, &act);
            for k in 0..500 {
                let c = 2.0 + (k as f64 * 0.01).sin();
                let cmd = Vector4::new(c, 2.0, 2.5, c - 0.3);
                x = step(&x, &cmd, &quad, &act.steady, &act, 0.001).unwrap().state;
            }
            x
        };
        let (a, b) = (run(), run());
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn trace_csv_has_all_columns() {
        let row = TraceRow {
            t: 0.5,
            state: QuadState::default(),
            thrusts: Vector4::repeat(1.0),
            wrench: ControlWrench::new(4.0, Vector3::zeros()),
            chart: 1,
            eta: -1.0,
        };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 28);
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 28);
        assert_eq!(fields[7], "1");
        assert_eq!(fields[26], "1");
        assert_eq!(fields[27], "-1");
    }

    proptest! {
        #[test]
        fn gyroscopic_term_does_no_work(
            w in prop::array::uniform3(-20.0f64..20.0),
            tau in prop::array::uniform3(-0.1f64..0.1),
        ) {
            let (mut x, quad) = tumbling();
            x.omega = Vector3::from(w);
            let u = ControlWrench::new(0.0, Vector3::from(tau));
            let d = rigid_body_deriv(&x, &u, &quad);
            let power = x.omega.dot(&(quad.inertia * d.omega_dot));
            prop_assert!((power - x.omega.dot(&u.tau)).abs() < 1e-10 * (1.0 + power.abs()));
        }

        #[test]
        fn step_keeps_unit_quaternion(
            t in prop::array::uniform4(-5.0f64..10.0),
            w in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let quad = QuadParams::default();
            let act = ActuatorParams::default();
            let mut x = QuadState::hovering(Quat::IDENTITY, &quad, &act);
            x.omega = Vector3::from(w);
            for _ in 0..20 {
                x = step(&x, &Vector4::from(t), &quad, &act.steady, &act, 0.001).unwrap().state;
                prop_assert!((x.q.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
