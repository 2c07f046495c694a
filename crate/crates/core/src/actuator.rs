//! Rotor actuator model.
//!
//! Steady state: each rotor maps its signed angular rate `Ω` to thrust with a
//! second-order polynomial `c2·Ω|Ω| + c1·Ω + c0` and to reaction torque with a
//! moment scale, with a separate coefficient set for the forward (`Ω ≥ 0`) and
//! reverse (`Ω < 0`) regimes.
//!
//! Transient: the motor rate follows a first-order lag toward a set point.
//! During a commanded spin reversal the set point is first pinned at the
//! switching threshold `Ω₀` until the rate has decayed into the dead zone
//! `|Ω − Ω₀| ≤ Δ_Ω`; only then does it head for the desired rate.
//!
//! The default coefficients describe a placeholder 6-inch vehicle with an
//! asymmetric propeller (about twice the thrust in the forward regime at equal
//! `|Ω|`); they are not measured values.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROTORS: usize = 4;

#[derive(Debug, Error)]
pub enum ActuatorError {
    #[error("rotor {rotor}: quadratic coefficient must be positive in the {regime:?} regime")]
    NonPositiveQuadratic { rotor: usize, regime: Regime },
    #[error("rotor {rotor}: thrust is not strictly increasing near Ω = {omega}")]
    NonMonotonic { rotor: usize, omega: f64 },
    #[error("invalid rate limits [{0}, {1}]")]
    RateLimits(f64, f64),
    #[error("invalid transient parameters: {0}")]
    Transient(String),
    #[error("invalid randomization range {name}: [{low}, {high}]")]
    Range { name: &'static str, low: f64, high: f64 },
    #[error("{regime:?} regime has {count} samples, at least 3 are required")]
    InsufficientSamples { regime: Regime, count: usize },
    #[error("{0:?} regime design matrix is rank deficient")]
    RankDeficient(Regime),
    #[error("no thrust samples")]
    NoSamples,
    #[error("sample file: {0}")]
    Csv(#[from] csv::Error),
}

/// Propeller operating regime, selected by the sign of the rotor rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Forward,
    Reverse,
}

impl Regime {
    /// `Ω ≥ 0` selects the forward regime.
    pub fn of_rate(omega: f64) -> Self {
        if omega >= 0.0 {
            Regime::Forward
        } else {
            Regime::Reverse
        }
    }
}

/// Coefficients of one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrustCoeffs {
    /// N·s²/rad²
    pub c2: f64,
    /// N·s/rad
    pub c1: f64,
    /// N
    pub c0: f64,
    /// Reaction torque per unit thrust (m).
    pub moment_scale: f64,
}

impl ThrustCoeffs {
    pub fn thrust(&self, omega: f64) -> f64 {
        self.c2 * omega * omega.abs() + self.c1 * omega + self.c0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotorModel {
    pub forward: ThrustCoeffs,
    pub reverse: ThrustCoeffs,
}

impl RotorModel {
    pub fn coeffs(&self, regime: Regime) -> &ThrustCoeffs {
        match regime {
            Regime::Forward => &self.forward,
            Regime::Reverse => &self.reverse,
        }
    }

    pub fn coeffs_mut(&mut self, regime: Regime) -> &mut ThrustCoeffs {
        match regime {
            Regime::Forward => &mut self.forward,
            Regime::Reverse => &mut self.reverse,
        }
    }

    pub fn thrust(&self, omega: f64) -> f64 {
        self.coeffs(Regime::of_rate(omega)).thrust(omega)
    }

    pub fn torque(&self, omega: f64) -> f64 {
        let c = self.coeffs(Regime::of_rate(omega));
        c.moment_scale * c.thrust(omega)
    }

    pub fn moment_scale(&self, omega: f64) -> f64 {
        self.coeffs(Regime::of_rate(omega)).moment_scale
    }
}

impl Default for RotorModel {
    fn default() -> Self {
        RotorModel {
            forward: ThrustCoeffs {
                c2: 1.8e-6,
                c1: 1.0e-4,
                c0: 0.0,
                moment_scale: 0.012,
            },
            reverse: ThrustCoeffs {
                c2: 0.9e-6,
                c1: 0.5e-4,
                c0: 0.0,
                moment_scale: 0.020,
            },
        }
    }
}

/// Steady-state model of all four rotors plus the admissible rate range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateParams {
    pub rotors: [RotorModel; ROTORS],
    /// rad/s, negative
    pub omega_min: f64,
    /// rad/s, positive
    pub omega_max: f64,
}

impl Default for SteadyStateParams {
    fn default() -> Self {
        SteadyStateParams {
            rotors: [RotorModel::default(); ROTORS],
            omega_min: -2900.0,
            omega_max: 2900.0,
        }
    }
}

impl SteadyStateParams {
    pub fn new(
        rotors: [RotorModel; ROTORS],
        omega_min: f64,
        omega_max: f64,
    ) -> Result<Self, ActuatorError> {
        let p = SteadyStateParams {
            rotors,
            omega_min,
            omega_max,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks positivity of the quadratic terms and samples the thrust curve
    /// of each regime for strict monotonicity.
    pub fn validate(&self) -> Result<(), ActuatorError> {
        if !(self.omega_min < 0.0 && self.omega_max > 0.0) {
            return Err(ActuatorError::RateLimits(self.omega_min, self.omega_max));
        }
        const SAMPLES: usize = 256;
        for (i, rotor) in self.rotors.iter().enumerate() {
            for regime in [Regime::Forward, Regime::Reverse] {
                let c = rotor.coeffs(regime);
                if !(c.c2 > 0.0) {
                    return Err(ActuatorError::NonPositiveQuadratic { rotor: i, regime });
                }
                let (lo, hi) = match regime {
                    Regime::Forward => (0.0, self.omega_max),
                    Regime::Reverse => (self.omega_min, 0.0),
                };
                let mut prev = c.thrust(lo);
                for k in 1..=SAMPLES {
                    let omega = lo + (hi - lo) * k as f64 / SAMPLES as f64;
                    let t = c.thrust(omega);
                    if t <= prev {
                        return Err(ActuatorError::NonMonotonic { rotor: i, omega });
                    }
                    prev = t;
                }
            }
        }
        Ok(())
    }

    /// Achievable thrust interval of `rotor`.
    pub fn thrust_range(&self, rotor: usize) -> (f64, f64) {
        let m = &self.rotors[rotor];
        (m.thrust(self.omega_min), m.thrust(self.omega_max))
    }
}

/// Steady-state thrust (N) of `rotor` spinning at `omega` rad/s.
pub fn thrust_of_rate(omega: f64, p: &SteadyStateParams, rotor: usize) -> f64 {
    p.rotors[rotor].thrust(omega)
}

/// Reaction torque (N·m) of `rotor` spinning at `omega` rad/s.
pub fn torque_of_rate(omega: f64, p: &SteadyStateParams, rotor: usize) -> f64 {
    p.rotors[rotor].torque(omega)
}

/// Result of inverting the thrust model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCommand {
    pub omega: f64,
    /// The requested thrust was outside the achievable range (or inside the
    /// unreachable band created by a non-zero `c0`) and was clamped.
    pub clamped: bool,
}

/// Rotor rate producing thrust `thrust` (N). The regime follows the sign of
/// the request, ties going to the forward regime.
pub fn rate_of_thrust(thrust: f64, p: &SteadyStateParams, rotor: usize) -> RateCommand {
    let model = &p.rotors[rotor];
    let (t_lo, t_hi) = p.thrust_range(rotor);
    if thrust >= t_hi {
        return RateCommand {
            omega: p.omega_max,
            clamped: thrust > t_hi,
        };
    }
    if thrust <= t_lo {
        return RateCommand {
            omega: p.omega_min,
            clamped: thrust < t_lo,
        };
    }
    let regime = Regime::of_rate(thrust);
    let c = model.coeffs(regime);
    let u = thrust - c.c0;
    if u == 0.0 {
        return RateCommand {
            omega: 0.0,
            clamped: false,
        };
    }
    match regime {
        Regime::Forward => {
            // c2 Ω² + c1 Ω − u = 0, Ω ≥ 0
            if u < 0.0 {
                return RateCommand {
                    omega: 0.0,
                    clamped: true,
                };
            }
            let omega = 2.0 * u / (c.c1 + (c.c1 * c.c1 + 4.0 * c.c2 * u).sqrt());
            RateCommand {
                omega,
                clamped: false,
            }
        }
        Regime::Reverse => {
            // −c2 Ω² + c1 Ω − u = 0, Ω < 0
            if u > 0.0 {
                return RateCommand {
                    omega: -0.0,
                    clamped: true,
                };
            }
            let omega = 2.0 * u / (c.c1 + (c.c1 * c.c1 - 4.0 * c.c2 * u).sqrt());
            RateCommand {
                omega,
                clamped: false,
            }
        }
    }
}

/// First-order transient parameters of one rotor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientParams {
    /// Slew rate above the switching threshold (1/s).
    pub alpha_forward: f64,
    /// Slew rate below the switching threshold (1/s).
    pub alpha_reverse: f64,
    /// `Ω₀` (rad/s).
    pub switch_threshold: f64,
    /// `Δ_Ω` (rad/s).
    pub dead_zone: f64,
}

impl Default for TransientParams {
    fn default() -> Self {
        TransientParams {
            alpha_forward: 30.0,
            alpha_reverse: 25.0,
            switch_threshold: 0.0,
            dead_zone: 300.0,
        }
    }
}

impl TransientParams {
    pub fn validate(&self) -> Result<(), ActuatorError> {
        if !(self.alpha_forward > 0.0 && self.alpha_reverse > 0.0) {
            return Err(ActuatorError::Transient("slew rates must be positive".into()));
        }
        if !(self.dead_zone >= 0.0) {
            return Err(ActuatorError::Transient("dead zone must be non-negative".into()));
        }
        Ok(())
    }

    /// Switching predicate: a reversal has been commanded while the rotor is
    /// still outside the dead zone on the other side of `Ω₀`.
    pub fn approaching_dead_zone(&self, omega: f64, omega_desired: f64) -> bool {
        let o0 = self.switch_threshold;
        (omega > o0 + self.dead_zone && omega_desired < o0)
            || (omega < o0 - self.dead_zone && omega_desired > o0)
    }

    pub fn slew_rate(&self, omega: f64) -> f64 {
        if omega >= self.switch_threshold {
            self.alpha_forward
        } else {
            self.alpha_reverse
        }
    }

    /// One explicit-Euler step of the rotor rate.
    pub fn step(&self, omega: f64, omega_desired: f64, dt: f64) -> f64 {
        let set_point = if self.approaching_dead_zone(omega, omega_desired) {
            self.switch_threshold
        } else {
            omega_desired
        };
        omega + self.slew_rate(omega) * (set_point - omega) * dt
    }
}

/// Signed rotor rates (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotorState(pub [f64; ROTORS]);

impl MotorState {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Advances every rotor by one step of length `dt`.
pub fn motor_step(
    state: &MotorState,
    desired: &[f64; ROTORS],
    transient: &[TransientParams; ROTORS],
    dt: f64,
) -> MotorState {
    debug_assert!(dt > 0.0);
    MotorState(std::array::from_fn(|i| {
        transient[i].step(state.0[i], desired[i], dt)
    }))
}

/// Complete actuator description of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActuatorParams {
    pub steady: SteadyStateParams,
    pub transient: [TransientParams; ROTORS],
}

impl ActuatorParams {
    pub fn validate(&self) -> Result<(), ActuatorError> {
        self.steady.validate()?;
        self.transient.iter().try_for_each(TransientParams::validate)
    }

    /// Rates at which every rotor produces `thrust` N.
    pub fn rates_for_thrust(&self, thrust: f64) -> MotorState {
        MotorState(std::array::from_fn(|i| {
            rate_of_thrust(thrust, &self.steady, i).omega
        }))
    }
}

/// Closed interval `[low, high]` for a uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct UniformRange {
    pub low: f64,
    pub high: f64,
}

impl UniformRange {
    pub const fn new(low: f64, high: f64) -> Self {
        UniformRange { low, high }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.random_range(self.low..=self.high)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }
}

impl From<[f64; 2]> for UniformRange {
    fn from(v: [f64; 2]) -> Self {
        UniformRange::new(v[0], v[1])
    }
}

impl From<UniformRange> for [f64; 2] {
    fn from(r: UniformRange) -> Self {
        [r.low, r.high]
    }
}

/// Domain-randomization ranges. `alpha` and `thrust_coeff` are multiplicative
/// factors on the nominal values; the other two are absolute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationRanges {
    pub alpha: UniformRange,
    pub thrust_coeff: UniformRange,
    /// rad/s
    pub switch_threshold: UniformRange,
    /// rad/s
    pub dead_zone: UniformRange,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        RandomizationRanges {
            alpha: UniformRange::new(0.75, 1.25),
            thrust_coeff: UniformRange::new(0.9, 1.1),
            switch_threshold: UniformRange::new(-60.0, 60.0),
            dead_zone: UniformRange::new(200.0, 400.0),
        }
    }
}

impl RandomizationRanges {
    /// Ranges that reproduce the nominal parameters exactly.
    pub fn degenerate(nominal: &TransientParams) -> Self {
        RandomizationRanges {
            alpha: UniformRange::new(1.0, 1.0),
            thrust_coeff: UniformRange::new(1.0, 1.0),
            switch_threshold: UniformRange::new(nominal.switch_threshold, nominal.switch_threshold),
            dead_zone: UniformRange::new(nominal.dead_zone, nominal.dead_zone),
        }
    }

    pub fn validate(&self) -> Result<(), ActuatorError> {
        for (name, r) in [
            ("alpha", self.alpha),
            ("thrust_coeff", self.thrust_coeff),
            ("switch_threshold", self.switch_threshold),
            ("dead_zone", self.dead_zone),
        ] {
            if !(r.low <= r.high) {
                return Err(ActuatorError::Range {
                    name,
                    low: r.low,
                    high: r.high,
                });
            }
        }
        if self.alpha.low <= 0.0 || self.thrust_coeff.low <= 0.0 || self.dead_zone.low < 0.0 {
            return Err(ActuatorError::Range {
                name: "factor",
                low: self.alpha.low.min(self.thrust_coeff.low),
                high: self.dead_zone.low,
            });
        }
        Ok(())
    }
}

/// Draws an independent realization of the actuator parameters: slew rates and
/// every thrust coefficient are scaled by their own factor, the switching
/// threshold and dead-zone width are drawn per rotor from the absolute ranges.
pub fn sample_params<R: Rng + ?Sized>(
    rng: &mut R,
    nominal: &ActuatorParams,
    ranges: &RandomizationRanges,
) -> ActuatorParams {
    let mut out = *nominal;
    for rotor in out.steady.rotors.iter_mut() {
        for regime in [Regime::Forward, Regime::Reverse] {
            let c = rotor.coeffs_mut(regime);
            c.c2 *= ranges.thrust_coeff.sample(rng);
            c.c1 *= ranges.thrust_coeff.sample(rng);
            c.c0 *= ranges.thrust_coeff.sample(rng);
        }
    }
    for t in out.transient.iter_mut() {
        t.alpha_forward *= ranges.alpha.sample(rng);
        t.alpha_reverse *= ranges.alpha.sample(rng);
        t.switch_threshold = ranges.switch_threshold.sample(rng);
        t.dead_zone = ranges.dead_zone.sample(rng);
    }
    out
}

/// True when `sampled` could have been produced by [`sample_params`].
pub fn within_ranges(
    sampled: &ActuatorParams,
    nominal: &ActuatorParams,
    ranges: &RandomizationRanges,
) -> bool {
    const SLACK: f64 = 1e-12;
    let factor_ok = |value: f64, nom: f64, r: &UniformRange| {
        if nom == 0.0 {
            return value == 0.0;
        }
        let f = value / nom;
        r.low - SLACK <= f && f <= r.high + SLACK
    };
    let steady_ok = sampled
        .steady
        .rotors
        .iter()
        .zip(nominal.steady.rotors.iter())
        .all(|(s, n)| {
            [Regime::Forward, Regime::Reverse].iter().all(|&g| {
                let (s, n) = (s.coeffs(g), n.coeffs(g));
                factor_ok(s.c2, n.c2, &ranges.thrust_coeff)
                    && factor_ok(s.c1, n.c1, &ranges.thrust_coeff)
                    && factor_ok(s.c0, n.c0, &ranges.thrust_coeff)
            })
        });
    let transient_ok = sampled
        .transient
        .iter()
        .zip(nominal.transient.iter())
        .all(|(s, n)| {
            factor_ok(s.alpha_forward, n.alpha_forward, &ranges.alpha)
                && factor_ok(s.alpha_reverse, n.alpha_reverse, &ranges.alpha)
                && ranges.switch_threshold.contains(s.switch_threshold)
                && ranges.dead_zone.contains(s.dead_zone)
        });
    steady_ok && transient_ok
}

/// One thrust-stand measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrustSample {
    /// rad/s
    pub omega: f64,
    /// N
    pub thrust: f64,
    /// N·m
    pub torque: f64,
}

/// Reads `omega,thrust,torque` rows.
pub fn read_thrust_samples<R: Read>(reader: R) -> Result<Vec<ThrustSample>, ActuatorError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeFit {
    pub samples: usize,
    /// RMS thrust residual (N).
    pub thrust_rms: f64,
    /// RMS torque residual (N·m).
    pub torque_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: RotorModel,
    pub forward: Option<RegimeFit>,
    pub reverse: Option<RegimeFit>,
}

impl FitReport {
    /// Only one regime had data; the other kept its nominal coefficients.
    pub fn is_partial(&self) -> bool {
        self.forward.is_none() || self.reverse.is_none()
    }
}

/// Least-squares fit of one rotor's steady-state model. A regime without any
/// samples keeps the coefficients of `nominal`.
pub fn fit_steady_state(
    samples: &[ThrustSample],
    nominal: &RotorModel,
) -> Result<FitReport, ActuatorError> {
    if samples.is_empty() {
        return Err(ActuatorError::NoSamples);
    }
    let mut model = *nominal;
    let mut fits = [None, None];
    for (slot, regime) in [Regime::Forward, Regime::Reverse].into_iter().enumerate() {
        let subset: Vec<&ThrustSample> = samples
            .iter()
            .filter(|s| Regime::of_rate(s.omega) == regime)
            .collect();
        match subset.len() {
            0 => continue,
            n if n < 3 => {
                return Err(ActuatorError::InsufficientSamples { regime, count: n });
            }
            _ => {}
        }
        let (coeffs, fit) = fit_regime(&subset, regime)?;
        *model.coeffs_mut(regime) = coeffs;
        fits[slot] = Some(fit);
    }
    Ok(FitReport {
        model,
        forward: fits[0],
        reverse: fits[1],
    })
}

fn fit_regime(
    samples: &[&ThrustSample],
    regime: Regime,
) -> Result<(ThrustCoeffs, RegimeFit), ActuatorError> {
    let n = samples.len();
    let mut x = DMatrix::from_fn(n, 3, |r, c| {
        let o = samples[r].omega;
        match c {
            0 => o * o.abs(),
            1 => o,
            _ => 1.0,
        }
    });
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.thrust));

    // Equilibrate columns so the rank test is scale free.
    let mut scales = [1.0; 3];
    for (c, scale) in scales.iter_mut().enumerate() {
        let norm = x.column(c).norm();
        if norm == 0.0 {
            return Err(ActuatorError::RankDeficient(regime));
        }
        *scale = norm;
        x.column_mut(c).scale_mut(1.0 / norm);
    }
    let svd = x.clone().svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if smin <= smax * 1e-10 {
        return Err(ActuatorError::RankDeficient(regime));
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|_| ActuatorError::RankDeficient(regime))?;
    let (c2, c1, c0) = (beta[0] / scales[0], beta[1] / scales[1], beta[2] / scales[2]);

    let (tt, tz) = samples
        .iter()
        .fold((0.0, 0.0), |(tt, tz), s| (tt + s.thrust * s.thrust, tz + s.thrust * s.torque));
    let moment_scale = if tt > 0.0 { tz / tt } else { 0.0 };

    let coeffs = ThrustCoeffs {
        c2,
        c1,
        c0,
        moment_scale,
    };
    let (mut rt, mut rz) = (0.0, 0.0);
    for s in samples {
        rt += (coeffs.thrust(s.omega) - s.thrust).powi(2);
        rz += (moment_scale * s.thrust - s.torque).powi(2);
    }
    let fit = RegimeFit {
        samples: n,
        thrust_rms: (rt / n as f64).sqrt(),
        torque_rms: (rz / n as f64).sqrt(),
    };
    Ok((coeffs, fit))
}
