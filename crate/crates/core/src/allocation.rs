//! Control allocation: wrench → rotor thrusts.
//!
//! The optimal allocation minimizes
//! `½‖W(M T − u)‖² + ½λ‖T − T_prev‖²` over the thrust box with a fixed number
//! of projected-gradient iterations, warm-started at `T_prev`.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::SteadyStateParams;
use crate::sim::ControlWrench;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum AllocationError {
    #[error("mixer matrix is singular")]
    SingularMixer,
    #[error("invalid allocation config: {0}")]
    Config(&'static str),
}

/// How the projected-gradient step `γ = 1/L` is bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// `L = trace(H)`; always an upper bound for SPD `H`.
    Trace,
    /// `L` from a power-iteration estimate of the largest eigenvalue.
    PowerIteration { iterations: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    /// Diagonal of `W`, ordered collective, roll, pitch, yaw.
    pub weights: Vector4<f64>,
    pub lambda: f64,
    pub iterations: u32,
    pub step_rule: StepRule,
    /// N
    pub t_min: Vector4<f64>,
    /// N
    pub t_max: Vector4<f64>,
}

impl AllocationConfig {
    /// Default weighting with the thrust box taken from the rate limits of
    /// `ss`. Each row is first normalized to thrust units by its lever arm
    /// (`arm` for roll/pitch, the forward moment scale for yaw); roll and
    /// pitch then carry three times the collective weight and yaw 0.3 of it.
    pub fn for_vehicle(ss: &SteadyStateParams, arm: f64) -> Self {
        let t_min = Vector4::from_fn(|i, _| ss.thrust_range(i).0);
        let t_max = Vector4::from_fn(|i, _| ss.thrust_range(i).1);
        let yaw_scale = ss.rotors[0].forward.moment_scale;
        AllocationConfig {
            weights: Vector4::new(1.0, 3.0 / arm, 3.0 / arm, 0.3 / yaw_scale),
            lambda: 1e-3,
            iterations: 50,
            step_rule: StepRule::Trace,
            t_min,
            t_max,
        }
    }

    pub fn validate(&self) -> Result<(), AllocationError> {
        if self.weights.iter().any(|w| !(w.abs() > 0.0) || !w.is_finite()) {
            return Err(AllocationError::Config("W must be nonsingular"));
        }
        if !(self.lambda >= 0.0) {
            return Err(AllocationError::Config("lambda must be non-negative"));
        }
        if self.iterations < 1 {
            return Err(AllocationError::Config("at least one iteration is required"));
        }
        if (0..4).any(|i| !(self.t_min[i] < self.t_max[i])) {
            return Err(AllocationError::Config("t_min must be below t_max"));
        }
        Ok(())
    }
}

impl Default for AllocationConfig {
    fn default() -> Self {
        AllocationConfig::for_vehicle(&SteadyStateParams::default(), 0.09)
    }
}

/// `min ½TᵀHT + fᵀT` subject to `lower ≤ T ≤ upper`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpProblem {
    pub h: Matrix4<f64>,
    pub f: Vector4<f64>,
    pub lower: Vector4<f64>,
    pub upper: Vector4<f64>,
}

impl QpProblem {
    pub fn objective(&self, t: &Vector4<f64>) -> f64 {
        0.5 * t.dot(&(self.h * t)) + self.f.dot(t)
    }

    pub fn gradient(&self, t: &Vector4<f64>) -> Vector4<f64> {
        self.h * t + self.f
    }

    pub fn project(&self, t: &Vector4<f64>) -> Vector4<f64> {
        t.zip_zip_map(&self.lower, &self.upper, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Upper bound (or estimate) of the largest eigenvalue of `H`.
    pub fn lipschitz(&self, rule: StepRule) -> f64 {
        match rule {
            StepRule::Trace => self.h.trace(),
            StepRule::PowerIteration { iterations } => {
                let mut v = Vector4::repeat(0.5);
                let mut estimate = self.h.trace();
                for _ in 0..iterations.max(1) {
                    let w = self.h * v;
                    let n = w.norm();
                    if n == 0.0 {
                        break;
                    }
                    estimate = v.dot(&w) / v.norm_squared();
                    v = w / n;
                }
                estimate
            }
        }
    }
}

/// `T = M⁻¹u`, unclamped.
pub fn direct_inversion(u: &ControlWrench, m: &Matrix4<f64>) -> Result<Vector4<f64>, AllocationError> {
    m.lu().solve(&u.as_vector()).ok_or(AllocationError::SingularMixer)
}

/// Hessian `MᵀWᵀWM + λI` and linear term `−(MᵀWᵀWu + λT_prev)`.
pub fn build_qp(
    u: &ControlWrench,
    m: &Matrix4<f64>,
    cfg: &AllocationConfig,
    t_prev: &Vector4<f64>,
) -> QpProblem {
    let w2 = Matrix4::from_diagonal(&cfg.weights.component_mul(&cfg.weights));
    let mt_w2 = m.transpose() * w2;
    let mut h = mt_w2 * m + Matrix4::identity() * cfg.lambda;
    // exact symmetry regardless of rounding in the product
    h = (h + h.transpose()) * 0.5;
    QpProblem {
        h,
        f: -(mt_w2 * u.as_vector() + t_prev * cfg.lambda),
        lower: cfg.t_min,
        upper: cfg.t_max,
    }
}

/// `k` iterations of `T ← Π(T − γ∇J)` with `γ = 1/L`, starting from the
/// projection of `start`.
pub fn pgd_solve(p: &QpProblem, k: u32, rule: StepRule, start: &Vector4<f64>) -> Vector4<f64> {
    pgd_solve_observed(p, k, rule, start, |_| {})
}

/// [`pgd_solve`] reporting every iterate (including the projected start).
pub fn pgd_solve_observed<F: FnMut(&Vector4<f64>)>(
    p: &QpProblem,
    k: u32,
    rule: StepRule,
    start: &Vector4<f64>,
    mut observe: F,
) -> Vector4<f64> {
    let l = p.lipschitz(rule);
    let gamma = if l > 0.0 { 1.0 / l } else { 0.0 };
    let mut t = p.project(start);
    observe(&t);
    for _ in 0..k {
        t = p.project(&(t - p.gradient(&t) * gamma));
        observe(&t);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub thrusts: Vector4<f64>,
    pub at_lower: [bool; 4],
    pub at_upper: [bool; 4],
}

impl Allocation {
    pub fn saturated(&self) -> bool {
        self.at_lower.iter().chain(self.at_upper.iter()).any(|&b| b)
    }
}

/// Box-constrained allocation warm-started at `t_prev`.
pub fn allocate(
    u: &ControlWrench,
    m: &Matrix4<f64>,
    cfg: &AllocationConfig,
    t_prev: &Vector4<f64>,
) -> Allocation {
    const ACTIVE_TOL: f64 = 1e-9;
    let p = build_qp(u, m, cfg, t_prev);
    let t = pgd_solve(&p, cfg.iterations, cfg.step_rule, t_prev);
    Allocation {
        thrusts: t,
        at_lower: std::array::from_fn(|i| t[i] <= p.lower[i] + ACTIVE_TOL),
        at_upper: std::array::from_fn(|i| t[i] >= p.upper[i] - ACTIVE_TOL),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::MotorState;
    use crate::sim::{mixer, QuadParams};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn default_mixer() -> Matrix4<f64> {
        mixer(
            &MotorState([1.0; 4]),
            &QuadParams::default(),
            &SteadyStateParams::default(),
        )
    }

    /// Minimum over all 3⁴ free/lower/upper patterns of the feasible
    /// stationary points of the reduced problem.
    fn active_set_oracle(p: &QpProblem) -> (Vector4<f64>, f64) {
        let mut best: Option<(Vector4<f64>, f64)> = None;
        for code in 0..81u32 {
            let pattern: [u32; 4] = std::array::from_fn(|i| (code / 3u32.pow(i as u32)) % 3);
            let mut t = Vector4::zeros();
            let free: Vec<usize> = (0..4).filter(|&i| pattern[i] == 0).collect();
            for i in 0..4 {
                match pattern[i] {
                    1 => t[i] = p.lower[i],
                    2 => t[i] = p.upper[i],
                    _ => {}
                }
            }
            if !free.is_empty() {
                let n = free.len();
                let a = nalgebra::DMatrix::from_fn(n, n, |r, c| p.h[(free[r], free[c])]);
                let b = nalgebra::DVector::from_fn(n, |r, _| {
                    let i = free[r];
                    -p.f[i] - (0..4).filter(|j| pattern[*j] != 0).map(|j| p.h[(i, j)] * t[j]).sum::<f64>()
                });
                let Some(sol) = a.lu().solve(&b) else { continue };
                for (r, &i) in free.iter().enumerate() {
                    t[i] = sol[r];
                }
            }
            if (0..4).any(|i| t[i] < p.lower[i] - 1e-12 || t[i] > p.upper[i] + 1e-12) {
                continue;
            }
            let obj = p.objective(&t);
            if best.is_none_or(|(_, b)| obj < b) {
                best = Some((t, obj));
            }
        }
        best.expect("the all-bound patterns are always feasible")
    }

    #[test]
    fn direct_inversion_examples() {
        let m = default_mixer();
        let mg = QuadParams::default().hover_thrust();
        let t = direct_inversion(&ControlWrench::new(mg, Vector3::zeros()), &m).unwrap();
        assert_relative_eq!(t, Vector4::repeat(mg / 4.0), epsilon = 1e-12);
        let t = direct_inversion(&ControlWrench::default(), &m).unwrap();
        assert_eq!(t, Vector4::zeros());
        let u = ControlWrench::new(3.0, Vector3::new(0.1, -0.2, 0.03));
        let t = direct_inversion(&u, &m).unwrap();
        assert!((m * t - u.as_vector()).norm() < 1e-10);
        assert!(direct_inversion(&u, &Matrix4::zeros()).is_err());
    }

    #[test]
    fn build_qp_reductions() {
        let m = default_mixer();
        let cfg = AllocationConfig {
            weights: Vector4::repeat(1.0),
            lambda: 0.0,
            ..Default::default()
        };
        let p = build_qp(&ControlWrench::default(), &m, &cfg, &Vector4::zeros());
        assert_relative_eq!(p.h, m.transpose() * m, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = default_mixer();
        let cfg = AllocationConfig::default();
        let u = ControlWrench::new(8.0, Vector3::new(0.05, -0.1, 0.02));
        let t_prev = Vector4::new(2.0, 1.5, 2.5, 3.0);
        let p = build_qp(&u, &m, &cfg, &t_prev);
        let w = Matrix4::from_diagonal(&cfg.weights);
        let cost = |t: &Vector4<f64>| {
            0.5 * (w * (m * t - u.as_vector())).norm_squared()
                + 0.5 * cfg.lambda * (t - t_prev).norm_squared()
        };
        let t = Vector4::new(1.0, -0.5, 2.0, 0.3);
        let h = 1e-6;
        for i in 0..4 {
            let mut e = Vector4::zeros();
            e[i] = h;
            let fd = (cost(&(t + e)) - cost(&(t - e))) / (2.0 * h);
            let g = p.gradient(&t)[i];
            assert!((fd - g).abs() < 1e-10 * (1.0 + g.abs()) + 1e-6, "{i}: {fd} vs {g}");
        }
    }

    #[test]
    fn dominant_regularization_returns_previous() {
        let m = default_mixer();
        let cfg = AllocationConfig {
            weights: Vector4::repeat(1.0),
            lambda: 1e6,
            ..Default::default()
        };
        let t_prev = Vector4::new(1.0, -2.0, 30.0, 0.5);
        let p = build_qp(&ControlWrench::new(5.0, Vector3::zeros()), &m, &cfg, &t_prev);
        let t = pgd_solve(&p, 200, StepRule::Trace, &Vector4::zeros());
        let clamped = p.project(&t_prev);
        assert!((t - clamped).norm() < 1e-4, "{t:?} vs {clamped:?}");
    }

    #[test]
    fn pgd_projection_example() {
        let p = QpProblem {
            h: Matrix4::identity(),
            f: Vector4::repeat(-2.0),
            lower: Vector4::repeat(-1.0),
            upper: Vector4::repeat(1.0),
        };
        let t = pgd_solve(&p, 50, StepRule::PowerIteration { iterations: 20 }, &Vector4::zeros());
        assert_relative_eq!(t, Vector4::repeat(1.0), epsilon = 1e-12);
    }

    #[test]
    fn interior_optimum_matches_linear_solve() {
        let m = default_mixer();
        // rows normalized to unit lever arm: H is close to a multiple of I
        let ms = SteadyStateParams::default().rotors[0].forward.moment_scale;
        let cfg = AllocationConfig {
            weights: Vector4::new(1.0, 1.0 / 0.09, 1.0 / 0.09, 1.0 / ms),
            lambda: 1e-2,
            ..Default::default()
        };
        let u = ControlWrench::new(9.0, Vector3::new(0.05, 0.02, 0.0));
        let p = build_qp(&u, &m, &cfg, &Vector4::repeat(2.0));
        let exact = -p.h.lu().solve(&p.f).unwrap();
        assert!((0..4).all(|i| exact[i] > p.lower[i] && exact[i] < p.upper[i]));
        let t = pgd_solve(&p, 200, StepRule::PowerIteration { iterations: 30 }, &Vector4::repeat(2.0));
        assert!((t - exact).norm() < 1e-6, "{t:?} vs {exact:?}");
    }

    #[test]
    fn hover_allocation_matches_inversion() {
        let m = default_mixer();
        let cfg = AllocationConfig::default();
        let mg = QuadParams::default().hover_thrust();
        let u = ControlWrench::new(mg, Vector3::zeros());
        let a = allocate(&u, &m, &cfg, &Vector4::repeat(mg / 4.0));
        let direct = direct_inversion(&u, &m).unwrap();
        assert!((a.thrusts - direct).norm() < 1e-6);
        assert!(!a.saturated());

        let a = allocate(&ControlWrench::default(), &m, &cfg, &Vector4::zeros());
        assert_eq!(a.thrusts, Vector4::zeros());
    }

    #[test]
    fn excessive_collective_saturates_all_rotors() {
        let m = default_mixer();
        let cfg = AllocationConfig::default();
        let u = ControlWrench::new(10.0 * cfg.t_max.sum(), Vector3::zeros());
        let a = allocate(&u, &m, &cfg, &Vector4::zeros());
        let p = build_qp(&u, &m, &cfg, &Vector4::zeros());
        let (oracle, _) = active_set_oracle(&p);
        assert!(a.at_upper.iter().all(|&b| b));
        assert!((a.thrusts - oracle).norm() < 1e-9);
    }

    #[test]
    fn roll_is_prioritized_under_saturation() {
        let m = default_mixer();
        let cfg = AllocationConfig {
            iterations: 2000,
            ..Default::default()
        };
        // collective near the upper limit plus a large roll demand
        let u = ControlWrench::new(0.95 * cfg.t_max.sum(), Vector3::new(0.8, 0.0, 0.05));
        let a = allocate(&u, &m, &cfg, &Vector4::repeat(cfg.t_max[0]));
        let residual = m * a.thrusts - u.as_vector();
        assert!(residual[1].abs() < 0.1 * residual[0].abs().max(1e-3));
        let p = build_qp(&u, &m, &cfg, &Vector4::repeat(cfg.t_max[0]));
        let (oracle, best) = active_set_oracle(&p);
        assert!((p.objective(&a.thrusts) - best).abs() < 1e-6);
        assert!((a.thrusts - oracle).norm() < 1e-4);
    }

    fn random_qp() -> impl Strategy<Value = QpProblem> {
        (
            prop::array::uniform16(-1.0f64..1.0),
            0.05f64..1.0,
            prop::array::uniform4(-3.0f64..3.0),
            prop::array::uniform4(-2.0f64..0.0),
            prop::array::uniform4(0.1f64..2.0),
        )
            .prop_map(|(a, mu, f, lo, width)| {
                let a = Matrix4::from_row_slice(&a);
                let lower = Vector4::from(lo);
                QpProblem {
                    h: a.transpose() * a + Matrix4::identity() * mu,
                    f: Vector4::from(f),
                    lower,
                    upper: lower + Vector4::from(width),
                }
            })
    }

    proptest! {
        #[test]
        fn output_is_feasible_and_monotone(p in random_qp(), start in prop::array::uniform4(-5.0f64..5.0)) {
            let mut prev = f64::INFINITY;
            let t = pgd_solve_observed(&p, 50, StepRule::Trace, &Vector4::from(start), |t| {
                let j = p.objective(t);
                assert!(j <= prev + 1e-12, "{j} > {prev}");
                prev = j;
            });
            for i in 0..4 {
                prop_assert!(p.lower[i] <= t[i] && t[i] <= p.upper[i]);
            }
        }

        #[test]
        fn converged_output_satisfies_kkt(p in random_qp()) {
            let t = pgd_solve(&p, 5000, StepRule::PowerIteration { iterations: 50 }, &Vector4::zeros());
            let g = p.gradient(&t);
            let tol = 1e-6;
            for i in 0..4 {
                if t[i] <= p.lower[i] {
                    prop_assert!(g[i] >= -tol);
                } else if t[i] >= p.upper[i] {
                    prop_assert!(g[i] <= tol);
                } else {
                    prop_assert!(g[i].abs() < tol, "coordinate {} gradient {}", i, g[i]);
                }
            }
            let (_, best) = active_set_oracle(&p);
            prop_assert!((p.objective(&t) - best).abs() < 1e-9);
        }

        #[test]
        fn hessian_is_symmetric_and_regularized(
            omega in prop::array::uniform4(-2000.0f64..2000.0),
            u in prop::array::uniform4(-10.0f64..10.0),
        ) {
            let m = mixer(&MotorState(omega), &QuadParams::default(), &SteadyStateParams::default());
            let cfg = AllocationConfig::default();
            let p = build_qp(&ControlWrench::from_vector(&Vector4::from(u)), &m, &cfg, &Vector4::zeros());
            prop_assert!((p.h - p.h.transpose()).abs().max() <= 1e-12);
            let min_eig = p.h.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= cfg.lambda * (1.0 - 1e-6));
        }
    }
}
