//! Closed-loop episodes: controller, allocation and plant wired together,
//! randomized resets, the per-step cost and the policy environment.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{sample_params, ActuatorParams, RandomizationRanges};
use crate::allocation::{allocate, direct_inversion, AllocationConfig};
use crate::hfca::{ControllerConfig, FlatReference, HfcaController, HfcaError, Posture};
use crate::policy::{
    build_observation, delay_ticks, interpret_action, ActionHistory, DelayLine,
    ObservationScales, PolicyAction, ACTION_DIM, OBS_DIM,
};
use crate::sim::{linear_acceleration, mixer, step, QuadParams, QuadState, SimError, TraceRow};
use crate::so3::Quat;
use crate::trajectory::ReferenceSource;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Control(#[from] HfcaError),
    #[error("singular mixer in direct inversion")]
    SingularMixer,
    #[error("invalid environment configuration: {0}")]
    Config(String),
}

/// Flight-regime transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transition {
    /// Nominal to inverted.
    Nti,
    /// Inverted to nominal.
    Itn,
}

impl Transition {
    pub const ALL: [Transition; 2] = [Transition::Nti, Transition::Itn];

    pub fn initial_posture(self) -> Posture {
        match self {
            Transition::Nti => Posture::Nominal,
            Transition::Itn => Posture::Inverted,
        }
    }

    pub fn target_posture(self) -> Posture {
        self.initial_posture().flipped()
    }

    /// Body-frame gravity direction at the target hover.
    pub fn target_body_gravity(self) -> Vector3<f64> {
        body_gravity_for(self.target_posture())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Transition::Nti => "nti",
            Transition::Itn => "itn",
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nti" => Ok(Transition::Nti),
            "itn" => Ok(Transition::Itn),
            other => Err(format!("unknown transition {other:?} (expected nti or itn)")),
        }
    }
}

/// Hover attitude for a posture: identity or a half turn about x.
pub fn posture_rotation(p: Posture) -> Quat {
    match p {
        Posture::Nominal => Quat::IDENTITY,
        Posture::Inverted => Quat::from_axis_angle(&Vector3::x(), std::f64::consts::PI),
    }
}

/// `−Rᵀe3` at the hover attitude of `p`.
pub fn body_gravity_for(p: Posture) -> Vector3<f64> {
    -(posture_rotation(p).rotation_matrix().transpose() * Vector3::z())
}

/// Inversion pipeline under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Posture step, controller, direct mixer inversion.
    StepHfca,
    /// Posture step, controller, constrained allocation.
    StepHfcaOca,
    /// Minimum-snap inversion trajectory, controller, constrained allocation.
    MinsnapHfcaOca,
    /// Learned reference modulation, controller, constrained allocation.
    PolicyHfcaOca,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::StepHfca,
        Method::StepHfcaOca,
        Method::MinsnapHfcaOca,
        Method::PolicyHfcaOca,
    ];

    pub fn uses_allocation(self) -> bool {
        !matches!(self, Method::StepHfca)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::StepHfca => "step-hfca",
            Method::StepHfcaOca => "step-hfca-oca",
            Method::MinsnapHfcaOca => "minsnap-hfca-oca",
            Method::PolicyHfcaOca => "policy-hfca-oca",
        }
    }

    /// Row label for comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::StepHfca => "S(t)+HFCA",
            Method::StepHfcaOca => "S(t)+HFCA+OCA",
            Method::MinsnapHfcaOca => "minsnap+HFCA+OCA",
            Method::PolicyHfcaOca => "policy+HFCA+OCA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// Physical vehicle plus the controller and allocator tuned for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vehicle {
    pub quad: QuadParams,
    pub actuator: ActuatorParams,
    pub controller: ControllerConfig,
    pub allocation: AllocationConfig,
}

impl Default for Vehicle {
    fn default() -> Self {
        let quad = QuadParams::default();
        let actuator = ActuatorParams::default();
        let arm = quad.rotor_positions[0][0].abs();
        Vehicle {
            quad,
            actuator,
            controller: ControllerConfig::default(),
            allocation: AllocationConfig::for_vehicle(&actuator.steady, arm),
        }
    }
}

impl Vehicle {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.quad.validate()?;
        self.actuator
            .validate()
            .map_err(|e| EnvError::Config(e.to_string()))?;
        self.allocation
            .validate()
            .map_err(|e| EnvError::Config(e.to_string()))?;
        if !self.controller.gains.is_valid() {
            return Err(EnvError::Config("controller gains must be positive".into()));
        }
        Ok(())
    }
}

/// Spread of the randomized initial condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetSpread {
    /// Half-width of the uniform position draw per axis (m).
    pub position: Vector3<f64>,
    /// Standard deviation of each velocity component (m/s).
    pub velocity_std: f64,
    /// Half-width of the uniform yaw draw (rad).
    pub yaw: f64,
    /// Half-width of the uniform roll and pitch draws (rad).
    pub tilt: f64,
    /// Standard deviation of each body-rate component (rad/s).
    pub omega_std: f64,
}

impl Default for ResetSpread {
    fn default() -> Self {
        ResetSpread {
            position: Vector3::repeat(0.1),
            velocity_std: 0.1,
            yaw: std::f64::consts::PI,
            tilt: 0.1,
            omega_std: 0.1,
        }
    }
}

impl ResetSpread {
    pub fn zero() -> Self {
        ResetSpread {
            position: Vector3::zeros(),
            velocity_std: 0.0,
            yaw: 0.0,
            tilt: 0.0,
            omega_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let ok = self
            .position
            .iter()
            .chain([self.velocity_std, self.yaw, self.tilt, self.omega_std].iter())
            .all(|v| *v >= 0.0 && v.is_finite());
        if !ok {
            return Err(EnvError::Config("reset spread must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn symmetric_uniform<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("positive std").sample(rng)
    } else {
        0.0
    }
}

/// Random hover-like start around the hover attitude of `posture`; the
/// rotors spin at the rates balancing gravity for the sampled attitude.
pub fn reset_distribution<R: Rng + ?Sized>(
    rng: &mut R,
    posture: Posture,
    spread: &ResetSpread,
    vehicle: &Vehicle,
) -> QuadState {
    let r = Vector3::from_fn(|i, _| symmetric_uniform(rng, spread.position[i]));
    let v = Vector3::from_fn(|_, _| normal(rng, spread.velocity_std));
    let yaw = symmetric_uniform(rng, spread.yaw);
    let pitch = symmetric_uniform(rng, spread.tilt);
    let roll = symmetric_uniform(rng, spread.tilt);
    let omega = Vector3::from_fn(|_, _| normal(rng, spread.omega_std));
    let q = Quat::from_euler_zyx(yaw, pitch, roll) * posture_rotation(posture);
    QuadState {
        r,
        v,
        omega,
        ..QuadState::hovering(q, &vehicle.quad, &vehicle.actuator)
    }
}

/// Weights of the per-step cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub position: f64,
    pub velocity: f64,
    pub orientation: f64,
    pub angular_velocity: f64,
    pub posture: f64,
    pub action_rate: f64,
}

impl RewardWeights {
    pub fn nti() -> Self {
        RewardWeights {
            position: 5.0,
            velocity: 0.005,
            orientation: 3.0,
            angular_velocity: 0.2,
            posture: 0.1,
            action_rate: 0.2,
        }
    }

    pub fn itn() -> Self {
        RewardWeights {
            position: 5.0,
            velocity: 0.0,
            orientation: 3.0,
            angular_velocity: 0.75,
            posture: 0.1,
            action_rate: 0.25,
        }
    }

    pub fn for_transition(t: Transition) -> Self {
        match t {
            Transition::Nti => Self::nti(),
            Transition::Itn => Self::itn(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let all = [
            self.position,
            self.velocity,
            self.orientation,
            self.angular_velocity,
            self.posture,
            self.action_rate,
        ];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(EnvError::Config("reward weights must be finite and non-negative".into()))
        }
    }
}

pub const HUBER_DELTA: f64 = 1.0;

/// Huber loss of `‖v‖`.
pub fn huber(v: &Vector3<f64>, delta: f64) -> f64 {
    let n = v.norm();
    if n <= delta {
        0.5 * n * n
    } else {
        delta * (n - 0.5 * delta)
    }
}

/// Bounds applied to the state before it enters the cost.
const COST_CLIP_POSITION: f64 = 10.0;
const COST_CLIP_VELOCITY: f64 = 20.0;
const COST_CLIP_RATE: f64 = 50.0;

/// Per-step cost; the reward is its negation.
pub fn step_cost(
    x: &QuadState,
    a: &PolicyAction,
    a_prev: &PolicyAction,
    w: &RewardWeights,
    g_bd: &Vector3<f64>,
) -> f64 {
    let clip = |v: &Vector3<f64>, b: f64| v.map(|c| c.clamp(-b, b));
    let r = clip(&x.r, COST_CLIP_POSITION);
    let v = clip(&x.v, COST_CLIP_VELOCITY);
    let omega = clip(&x.omega, COST_CLIP_RATE);
    w.position * r.lp_norm(1)
        + w.velocity * huber(&v, HUBER_DELTA)
        + w.orientation * (x.body_gravity() - g_bd).norm()
        + w.angular_velocity * huber(&omega, HUBER_DELTA)
        + w.posture * (1.0 - a.eta_raw * a.eta_raw)
        + w.action_rate * (a.r_mod - a_prev.r_mod).norm()
}

/// Controller, allocator and plant advancing together one dynamics tick at a
/// time.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    vehicle: Vehicle,
    plant: ActuatorParams,
    allocation: bool,
    controller: HfcaController,
    state: QuadState,
    thrust_prev: Vector4<f64>,
    accel: Vector3<f64>,
    t: f64,
    dt: f64,
}

/// Quantities produced by one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    pub row: TraceRow,
}

impl ClosedLoop {
    /// `plant` is the actuator realization; the controller and allocator use
    /// the nominal parameters in `vehicle`.
    pub fn new(
        vehicle: &Vehicle,
        plant: ActuatorParams,
        allocation: bool,
        state: QuadState,
        dt: f64,
    ) -> Self {
        let thrust_prev =
            Vector4::from_fn(|i, _| vehicle.actuator.steady.rotors[i].thrust(state.motors.0[i]));
        ClosedLoop {
            vehicle: *vehicle,
            plant,
            allocation,
            controller: HfcaController::new(vehicle.controller, vehicle.quad),
            state,
            thrust_prev,
            accel: Vector3::zeros(),
            t: 0.0,
            dt,
        }
    }

    pub fn state(&self) -> &QuadState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn plant(&self) -> &ActuatorParams {
        &self.plant
    }

    /// Trace row describing the current state before any tick.
    pub fn initial_row(&self, eta: f64) -> TraceRow {
        let m = mixer(&self.state.motors, &self.vehicle.quad, &self.plant.steady);
        let thrusts =
            Vector4::from_fn(|i, _| self.plant.steady.rotors[i].thrust(self.state.motors.0[i]));
        TraceRow {
            t: self.t,
            state: self.state,
            thrusts,
            wrench: crate::sim::wrench_from_thrusts(&thrusts, &m),
            chart: 0,
            eta,
        }
    }

    pub fn tick(
        &mut self,
        reference: &FlatReference,
        r_mod: Option<&Vector3<f64>>,
    ) -> Result<Tick, EnvError> {
        let out = self
            .controller
            .control_step(&self.state, &self.accel, reference, r_mod)?;
        let nominal = &self.vehicle.actuator.steady;
        let m = mixer(&self.state.motors, &self.vehicle.quad, nominal);
        let cmd = if self.allocation {
            allocate(&out.wrench, &m, &self.vehicle.allocation, &self.thrust_prev).thrusts
        } else {
            direct_inversion(&out.wrench, &m).map_err(|_| EnvError::SingularMixer)?
        };
        self.thrust_prev = cmd;
        let outcome = step(
            &self.state,
            &cmd,
            &self.vehicle.quad,
            nominal,
            &self.plant,
            self.dt,
        )?;
        self.state = outcome.state;
        self.accel = linear_acceleration(&self.state.q, outcome.wrench.f_c, &self.vehicle.quad);
        self.t += self.dt;
        Ok(Tick {
            row: TraceRow {
                t: self.t,
                state: self.state,
                thrusts: outcome.thrusts,
                wrench: outcome.wrench,
                chart: out.chart.chart.id(),
                eta: reference.posture.sign(),
            },
        })
    }
}

/// Episode timing and randomization shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Dynamics and attitude-control step (s).
    pub dt_dyn: f64,
    /// Policy step (s).
    pub dt_env: f64,
    /// Episode length (s).
    pub duration: f64,
    /// Policy inference delay (s).
    pub delay: f64,
    /// Per-axis bound on the position modulation (m).
    pub action_limit: f64,
    /// Reference yaw (rad).
    pub yaw: f64,
    pub reset: ResetSpread,
    /// Draw a fresh actuator realization per episode.
    pub randomize_actuators: bool,
    pub ranges: RandomizationRanges,
    pub observation: ObservationScales,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt_dyn: 0.001,
            dt_env: 0.02,
            duration: 3.0,
            delay: 0.006,
            action_limit: 2.0,
            yaw: 0.0,
            reset: ResetSpread::default(),
            randomize_actuators: false,
            ranges: RandomizationRanges::default(),
            observation: ObservationScales::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: &str| Err(EnvError::Config(m.to_string()));
        if !(self.dt_dyn > 0.0 && self.dt_env > 0.0 && self.duration > 0.0) {
            return err("time steps and duration must be positive");
        }
        if self.substeps().is_none() {
            return err("dt_env must be a multiple of dt_dyn");
        }
        if self.delay_ticks().is_none() {
            return err("delay must be a non-negative multiple of dt_dyn");
        }
        if !(self.action_limit > 0.0) {
            return err("action limit must be positive");
        }
        self.reset.validate()?;
        self.ranges
            .validate()
            .map_err(|e| EnvError::Config(e.to_string()))
    }

    /// Dynamics ticks per policy step.
    pub fn substeps(&self) -> Option<usize> {
        delay_ticks(self.dt_env, self.dt_dyn).filter(|&n| n >= 1)
    }

    pub fn delay_ticks(&self) -> Option<usize> {
        delay_ticks(self.delay, self.dt_dyn)
    }

    pub fn dynamics_ticks(&self) -> usize {
        (self.duration / self.dt_dyn).round() as usize
    }

    pub fn policy_steps(&self) -> usize {
        (self.duration / self.dt_env).round() as usize
    }
}

/// Actuator realization for one episode.
pub fn episode_plant<R: Rng + ?Sized>(rng: &mut R, cfg: &EnvConfig, vehicle: &Vehicle) -> ActuatorParams {
    if cfg.randomize_actuators {
        sample_params(rng, &vehicle.actuator, &cfg.ranges)
    } else {
        vehicle.actuator
    }
}

/// Runs a reference-driven episode for `cfg.duration`, returning the trace
/// including the initial row.
pub fn run_reference_episode(
    vehicle: &Vehicle,
    plant: ActuatorParams,
    allocation: bool,
    initial: QuadState,
    reference: &dyn ReferenceSource,
    cfg: &EnvConfig,
) -> Result<Vec<TraceRow>, EnvError> {
    let mut cl = ClosedLoop::new(vehicle, plant, allocation, initial, cfg.dt_dyn);
    let ticks = cfg.dynamics_ticks();
    let mut trace = Vec::with_capacity(ticks + 1);
    trace.push(cl.initial_row(reference.sample(0.0).posture.sign()));
    for _ in 0..ticks {
        let reference = reference.sample(cl.time());
        trace.push(cl.tick(&reference, None)?.row);
    }
    Ok(trace)
}

/// Outcome of one policy step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep {
    pub observation: [f64; OBS_DIM],
    pub cost: f64,
    pub done: bool,
}

/// Reference-modulation environment: one call to [`PolicyEnv::step`]
/// applies an action and advances `dt_env`.
#[derive(Debug, Clone)]
pub struct PolicyEnv {
    cfg: EnvConfig,
    vehicle: Vehicle,
    transition: Transition,
    weights: RewardWeights,
    g_bd: Vector3<f64>,
    rng: ChaCha8Rng,
    cl: ClosedLoop,
    history: ActionHistory,
    delay: DelayLine<PolicyAction>,
    prev_action: PolicyAction,
    steps: usize,
}

impl PolicyEnv {
    /// All episode randomness comes from `seed`.
    pub fn new(
        cfg: EnvConfig,
        vehicle: Vehicle,
        transition: Transition,
        weights: RewardWeights,
        seed: u64,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        vehicle.validate()?;
        weights.validate()?;
        let delay = cfg.delay_ticks().expect("validated");
        let mut env = PolicyEnv {
            cfg,
            vehicle,
            transition,
            weights,
            g_bd: transition.target_body_gravity(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cl: ClosedLoop::new(&vehicle, vehicle.actuator, true, QuadState::default(), cfg.dt_dyn),
            history: ActionHistory::new(),
            delay: DelayLine::new(delay, PolicyAction::default()),
            prev_action: PolicyAction::default(),
            steps: 0,
        };
        env.reset();
        Ok(env)
    }

    /// Starts a new episode with fresh initial state and actuator draw.
    pub fn reset(&mut self) -> [f64; OBS_DIM] {
        let plant = episode_plant(&mut self.rng, &self.cfg, &self.vehicle);
        let x0 = reset_distribution(
            &mut self.rng,
            self.transition.initial_posture(),
            &self.cfg.reset,
            &self.vehicle,
        );
        self.reset_with(x0, plant)
    }

    /// Starts a new episode from a given state and actuator realization.
    pub fn reset_with(&mut self, x0: QuadState, plant: ActuatorParams) -> [f64; OBS_DIM] {
        self.cl = ClosedLoop::new(&self.vehicle, plant, true, x0, self.cfg.dt_dyn);
        self.history.clear();
        self.delay.reset(PolicyAction::default());
        self.prev_action = PolicyAction::default();
        self.steps = 0;
        self.observe()
    }

    pub fn observe(&self) -> [f64; OBS_DIM] {
        build_observation(self.cl.state(), &self.history, &self.cfg.observation)
    }

    pub fn state(&self) -> &QuadState {
        self.cl.state()
    }

    pub fn plant(&self) -> &ActuatorParams {
        self.cl.plant()
    }

    pub fn time(&self) -> f64 {
        self.cl.time()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn initial_row(&self) -> TraceRow {
        self.cl.initial_row(self.delay_current_eta())
    }

    fn delay_current_eta(&self) -> f64 {
        PolicyAction::default().posture().sign()
    }

    /// Applies `raw` (network output before clamping) for one policy step.
    /// Every dynamics tick is appended to `trace` when given.
    pub fn step(
        &mut self,
        raw: &[f64; ACTION_DIM],
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<EnvStep, EnvError> {
        let (action, _) = interpret_action(raw, self.cfg.action_limit);
        self.history.push(action);
        self.delay.submit(action);
        for _ in 0..self.cfg.substeps().expect("validated") {
            let applied = self.delay.advance();
            let reference = FlatReference::hold(Vector3::zeros(), self.cfg.yaw, applied.posture());
            let tick = self.cl.tick(&reference, Some(&applied.r_mod))?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(tick.row);
            }
        }
        let cost = step_cost(
            self.cl.state(),
            &action,
            &self.prev_action,
            &self.weights,
            &self.g_bd,
        );
        self.prev_action = action;
        self.steps += 1;
        Ok(EnvStep {
            observation: self.observe(),
            cost,
            done: self.steps >= self.cfg.policy_steps(),
        })
    }
}
