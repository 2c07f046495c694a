//! Rollout harness, trajectory metrics and method comparison tables.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    episode_plant, reset_distribution, run_reference_episode, EnvConfig, EnvError, Method,
    PolicyEnv, RewardWeights, Transition, Vehicle,
};
use crate::policy::PolicyNetwork;
use crate::sim::TraceRow;
use crate::trajectory::{min_snap, step_posture, MinSnapSpec, ReferenceSource, TrajectoryError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("method {0} needs policy weights")]
    MissingWeights(Method),
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("comparison: {0}")]
    Compare(String),
    #[error("report output: {0}")]
    Io(#[from] std::io::Error),
    #[error("report output: {0}")]
    Csv(#[from] csv::Error),
}

pub const DEFAULT_CONE_DEG: f64 = 10.0;

/// Earliest sample time after which every sample of `g_b` lies within
/// `cone_deg` of `g_bd`; `None` when the last sample is outside the cone.
pub fn settling_time(samples: &[(f64, Vector3<f64>)], g_bd: &Vector3<f64>, cone_deg: f64) -> Option<f64> {
    let cone = cone_deg.to_radians();
    let inside = |g: &Vector3<f64>| g.angle(g_bd) <= cone;
    match samples.iter().rposition(|(_, g)| !inside(g)) {
        None => samples.first().map(|(t, _)| *t),
        Some(last_out) => samples.get(last_out + 1).map(|(t, _)| *t),
    }
}

/// [`settling_time`] over the body-frame gravity of a trace.
pub fn trace_settling_time(trace: &[TraceRow], g_bd: &Vector3<f64>, cone_deg: f64) -> Option<f64> {
    let samples: Vec<_> = trace.iter().map(|r| (r.t, r.state.body_gravity())).collect();
    settling_time(&samples, g_bd, cone_deg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionMetrics {
    /// RMS of `‖r − origin‖` (m).
    pub rmse: f64,
    /// Per-axis maximum of `|r − origin|` (m).
    pub max_dev: Vector3<f64>,
    /// Sum of squared distances, kept for pooling.
    pub sum_sq: f64,
    pub samples: usize,
}

pub fn position_metrics(positions: &[Vector3<f64>], origin: &Vector3<f64>) -> PositionMetrics {
    let mut sum_sq = 0.0;
    let mut max_dev = Vector3::zeros();
    for p in positions {
        let d = p - origin;
        sum_sq += d.norm_squared();
        max_dev = max_dev.sup(&d.abs());
    }
    let n = positions.len();
    PositionMetrics {
        rmse: if n == 0 { 0.0 } else { (sum_sq / n as f64).sqrt() },
        max_dev,
        sum_sq,
        samples: n,
    }
}

pub fn trace_position_metrics(trace: &[TraceRow], origin: &Vector3<f64>) -> PositionMetrics {
    let positions: Vec<_> = trace.iter().map(|r| r.state.r).collect();
    position_metrics(&positions, origin)
}

/// Reference point for position errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorOrigin {
    /// World origin.
    #[default]
    World,
    /// Position at the start of the rollout.
    Start,
}

/// Minimum-snap baseline parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinSnapParams {
    /// Height of the middle waypoint above the start (m).
    pub delta_z: f64,
    /// Segment durations (s).
    pub durations: [f64; 2],
}

impl Default for MinSnapParams {
    fn default() -> Self {
        MinSnapParams {
            delta_z: 0.45,
            durations: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub transition: Transition,
    pub n: usize,
    pub seed: u64,
    pub cone_deg: f64,
    pub origin: ErrorOrigin,
    pub env: EnvConfig,
    pub vehicle: Vehicle,
    pub minsnap: MinSnapParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::StepHfcaOca,
            transition: Transition::Nti,
            n: 20,
            seed: 0,
            cone_deg: DEFAULT_CONE_DEG,
            origin: ErrorOrigin::World,
            env: EnvConfig::default(),
            vehicle: Vehicle::default(),
            minsnap: MinSnapParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n == 0 {
            return Err(EvalError::Config("n must be at least 1".into()));
        }
        if !(self.cone_deg > 0.0 && self.cone_deg < 180.0) {
            return Err(EvalError::Config("cone angle must be in (0, 180) degrees".into()));
        }
        self.env.validate()?;
        self.vehicle.validate()?;
        Ok(())
    }
}

/// Stream `index` of the master seed; rollout `index` of every method sees
/// the same initial state and actuator draw.
pub fn rollout_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Full dynamics-rate trace of rollout `index`, starting with the initial row.
pub fn run_rollout(
    cfg: &ExperimentConfig,
    policy: Option<&PolicyNetwork>,
    index: usize,
) -> Result<Vec<TraceRow>, EvalError> {
    let mut rng = rollout_rng(cfg.seed, index);
    let plant = episode_plant(&mut rng, &cfg.env, &cfg.vehicle);
    let initial = cfg.transition.initial_posture();
    let x0 = reset_distribution(&mut rng, initial, &cfg.env.reset, &cfg.vehicle);
    let origin = Vector3::zeros();
    let reference: Box<dyn ReferenceSource> = match cfg.method {
        Method::StepHfca | Method::StepHfcaOca => {
            Box::new(step_posture(origin, cfg.env.yaw, initial, 0.0)?)
        }
        Method::MinsnapHfcaOca => Box::new(min_snap(&MinSnapSpec::inversion(
            origin,
            Vector3::new(0.0, 0.0, cfg.minsnap.delta_z),
            cfg.minsnap.durations,
            initial,
            cfg.vehicle.quad.gravity,
        )?)?),
        Method::PolicyHfcaOca => {
            let net = policy.ok_or(EvalError::MissingWeights(cfg.method))?;
            return run_policy_rollout(cfg, net, x0, plant);
        }
    };
    Ok(run_reference_episode(
        &cfg.vehicle,
        plant,
        cfg.method.uses_allocation(),
        x0,
        reference.as_ref(),
        &cfg.env,
    )?)
}

fn run_policy_rollout(
    cfg: &ExperimentConfig,
    net: &PolicyNetwork,
    x0: crate::sim::QuadState,
    plant: crate::actuator::ActuatorParams,
) -> Result<Vec<TraceRow>, EvalError> {
    let mut env = PolicyEnv::new(
        cfg.env,
        cfg.vehicle,
        cfg.transition,
        RewardWeights::for_transition(cfg.transition),
        0,
    )?;
    let mut obs = env.reset_with(x0, plant);
    let mut trace = Vec::with_capacity(cfg.env.dynamics_ticks() + 1);
    trace.push(env.initial_row());
    loop {
        let (mean, _) = net
            .forward(&obs)
            .map_err(|e| EvalError::Config(e.to_string()))?;
        let s = env.step(&mean, Some(&mut trace))?;
        obs = s.observation;
        if s.done {
            break;
        }
    }
    Ok(trace)
}

/// Metrics of a single rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub index: usize,
    pub position: PositionMetrics,
    /// `None` when the rollout never settles.
    pub settling_time: Option<f64>,
}

pub fn rollout_metrics(
    index: usize,
    trace: &[TraceRow],
    transition: Transition,
    cone_deg: f64,
    origin: ErrorOrigin,
) -> RolloutMetrics {
    let o = match origin {
        ErrorOrigin::World => Vector3::zeros(),
        ErrorOrigin::Start => trace.first().map(|r| r.state.r).unwrap_or_default(),
    };
    RolloutMetrics {
        index,
        position: trace_position_metrics(trace, &o),
        settling_time: trace_settling_time(trace, &transition.target_body_gravity(), cone_deg),
    }
}

/// Per-rollout rows and aggregates of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub transition: Transition,
    pub seed: u64,
    pub duration: f64,
    pub rollouts: Vec<RolloutMetrics>,
}

/// Aggregate figures of a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// RMS over all samples of all rollouts.
    pub pooled_rmse: f64,
    /// Mean of the per-rollout RMSEs.
    pub mean_rmse: f64,
    /// Mean settling time with unsettled rollouts counted at the horizon.
    pub settling_time: f64,
    pub settled: usize,
    /// Mean over rollouts of the per-axis maxima.
    pub max_dev: Vector3<f64>,
}

impl MetricsReport {
    pub fn n(&self) -> usize {
        self.rollouts.len()
    }

    pub fn aggregate(&self) -> Aggregate {
        let n = self.rollouts.len().max(1) as f64;
        let (sum_sq, samples) = self.rollouts.iter().fold((0.0, 0usize), |(s, c), r| {
            (s + r.position.sum_sq, c + r.position.samples)
        });
        Aggregate {
            pooled_rmse: if samples == 0 { 0.0 } else { (sum_sq / samples as f64).sqrt() },
            mean_rmse: self.rollouts.iter().map(|r| r.position.rmse).sum::<f64>() / n,
            settling_time: self
                .rollouts
                .iter()
                .map(|r| r.settling_time.unwrap_or(self.duration))
                .sum::<f64>()
                / n,
            settled: self.rollouts.iter().filter(|r| r.settling_time.is_some()).count(),
            max_dev: self
                .rollouts
                .iter()
                .fold(Vector3::zeros(), |acc, r| acc + r.position.max_dev)
                / n,
        }
    }

    /// Per-rollout rows followed by `pooled` and `mean` aggregate rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "method", "transition", "rollout", "rmse", "settling_time", "settled", "max_dx",
            "max_dy", "max_dz",
        ])?;
        let (m, t) = (self.method.as_str(), self.transition.as_str());
        for r in &self.rollouts {
            let ts = r
                .settling_time
                .map_or_else(|| "unsettled".to_string(), |v| v.to_string());
            out.write_record([
                m.to_string(),
                t.to_string(),
                r.index.to_string(),
                r.position.rmse.to_string(),
                ts,
                r.settling_time.is_some().to_string(),
                r.position.max_dev.x.to_string(),
                r.position.max_dev.y.to_string(),
                r.position.max_dev.z.to_string(),
            ])?;
        }
        let a = self.aggregate();
        for (name, rmse) in [("pooled", a.pooled_rmse), ("mean", a.mean_rmse)] {
            out.write_record([
                m.to_string(),
                t.to_string(),
                name.to_string(),
                rmse.to_string(),
                a.settling_time.to_string(),
                format!("{}/{}", a.settled, self.n()),
                a.max_dev.x.to_string(),
                a.max_dev.y.to_string(),
                a.max_dev.z.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// All traces of an experiment together with its report.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub traces: Vec<Vec<TraceRow>>,
}

/// `n` rollouts in parallel; results are ordered by rollout index and do not
/// depend on the thread count.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    policy: Option<&PolicyNetwork>,
    keep_traces: bool,
) -> Result<ExperimentOutcome, EvalError> {
    cfg.validate()?;
    if cfg.method == Method::PolicyHfcaOca && policy.is_none() {
        return Err(EvalError::MissingWeights(cfg.method));
    }
    let results: Vec<Result<(RolloutMetrics, Vec<TraceRow>), EvalError>> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let trace = run_rollout(cfg, policy, i)?;
            let m = rollout_metrics(i, &trace, cfg.transition, cfg.cone_deg, cfg.origin);
            Ok((m, if keep_traces { trace } else { Vec::new() }))
        })
        .collect();
    let mut rollouts = Vec::with_capacity(cfg.n);
    let mut traces = Vec::new();
    for r in results {
        let (m, t) = r?;
        rollouts.push(m);
        if keep_traces {
            traces.push(t);
        }
    }
    Ok(ExperimentOutcome {
        report: MetricsReport {
            method: cfg.method,
            transition: cfg.transition,
            seed: cfg.seed,
            duration: cfg.env.duration,
            rollouts,
        },
        traces,
    })
}

/// Ranking mark of a table cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Best,
    Second,
    None,
}

pub const METRIC_NAMES: [&str; 5] = ["rmse", "settling_time", "max_dx", "max_dy", "max_dz"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub values: [f64; 5],
    pub marks: [Mark; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub transition: Transition,
    pub rows: Vec<ComparisonRow>,
}

/// Marks the smallest value(s) of each column best and the next distinct
/// value second; equal values share a mark.
pub fn rank_columns(values: &[[f64; 5]]) -> Vec<[Mark; 5]> {
    let mut marks = vec![[Mark::None; 5]; values.len()];
    for c in 0..5 {
        let mut distinct: Vec<f64> = values.iter().map(|v| v[c]).filter(|v| !v.is_nan()).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        for (r, v) in values.iter().enumerate() {
            marks[r][c] = match distinct.iter().position(|d| *d == v[c]) {
                Some(0) => Mark::Best,
                Some(1) => Mark::Second,
                _ => Mark::None,
            };
        }
    }
    marks
}

/// Table-style comparison of reports for one transition using pooled RMSE.
pub fn compare(reports: &[MetricsReport]) -> Result<ComparisonTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::Compare("need at least two reports".into()));
    }
    let transition = reports[0].transition;
    if reports.iter().any(|r| r.transition != transition) {
        return Err(EvalError::Compare("reports mix transitions".into()));
    }
    let labels: Vec<String> = reports.iter().map(|r| r.method.label().to_string()).collect();
    let values: Vec<[f64; 5]> = reports
        .iter()
        .map(|r| {
            let a = r.aggregate();
            [a.pooled_rmse, a.settling_time, a.max_dev.x, a.max_dev.y, a.max_dev.z]
        })
        .collect();
    Ok(table_from_values(transition, labels, values))
}

pub fn table_from_values(
    transition: Transition,
    labels: Vec<String>,
    values: Vec<[f64; 5]>,
) -> ComparisonTable {
    let marks = rank_columns(&values);
    ComparisonTable {
        transition,
        rows: labels
            .into_iter()
            .zip(values)
            .zip(marks)
            .map(|((label, values), marks)| ComparisonRow { label, values, marks })
            .collect(),
    }
}

impl ComparisonTable {
    /// One row per method; each metric followed by its mark.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["transition".to_string(), "method".to_string()];
        for m in METRIC_NAMES {
            header.push(m.to_string());
            header.push(format!("{m}_mark"));
        }
        out.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![self.transition.to_string(), row.label.clone()];
            for (v, m) in row.values.iter().zip(&row.marks) {
                rec.push(v.to_string());
                rec.push(
                    match m {
                        Mark::Best => "best",
                        Mark::Second => "second",
                        Mark::None => "",
                    }
                    .to_string(),
                );
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Aligned text; `**` marks best and `*` second best.
    pub fn to_text(&self) -> String {
        let header = ["method", "e_r", "t_s", "max dx", "max dy", "max dz"];
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut c = vec![r.label.clone()];
                for (v, m) in r.values.iter().zip(&r.marks) {
                    let tag = match m {
                        Mark::Best => "**",
                        Mark::Second => "*",
                        Mark::None => "",
                    };
                    c.push(format!("{v:.4}{tag}"));
                }
                c
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|c| c[i].chars().count())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        let _ = writeln!(s, "transition: {}", self.transition);
        let line = |s: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &header.map(String::from));
        for c in &cells {
            line(&mut s, c);
        }
        s
    }
}
