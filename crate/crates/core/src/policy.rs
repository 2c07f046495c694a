//! Policy-side runtime: observation layout, the Gaussian MLP head, action
//! interpretation, the action history and the inference delay line.

use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hfca::Posture;
use crate::nn::{Mlp, NnError};
use crate::sim::QuadState;

pub const HISTORY_LEN: usize = 3;
pub const ACTION_DIM: usize = 4;
pub const OBS_DIM: usize = 3 + 3 + 9 + 3 + HISTORY_LEN * ACTION_DIM;

/// Starting value of every log standard deviation.
pub fn initial_log_std() -> f64 {
    0.25f64.ln()
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("weight file: {0}")]
    Io(#[from] io::Error),
    #[error("weight sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("weight file holds {got} values, sidecar describes {expected}")]
    Length { expected: usize, got: usize },
    #[error("policy must map {OBS_DIM} observations to {ACTION_DIM} actions, got {input} -> {output}")]
    Dimensions { input: usize, output: usize },
    #[error("weights contain non-finite values")]
    NonFinite,
}

/// Divisors applied to each observation block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationScales {
    /// m
    pub position: f64,
    /// m/s
    pub velocity: f64,
    /// rad/s
    pub angular_rate: f64,
    /// m; applied to the position channels of the action history.
    pub action: f64,
}

impl Default for ObservationScales {
    fn default() -> Self {
        ObservationScales {
            position: 1.0,
            velocity: 2.0,
            angular_rate: 10.0,
            action: 2.0,
        }
    }
}

/// Position-reference modulation and the continuous posture channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyAction {
    /// m
    pub r_mod: Vector3<f64>,
    /// In `[−1, 1]`; its sign selects the posture.
    pub eta_raw: f64,
}

impl PolicyAction {
    /// Zero is resolved to the nominal posture.
    pub fn posture(&self) -> Posture {
        Posture::from_sign(self.eta_raw)
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [self.r_mod.x, self.r_mod.y, self.r_mod.z, self.eta_raw]
    }
}

/// Maps a raw network output to an action: the first three channels are
/// clamped to `[−1, 1]` and scaled by `limit`, the fourth is clamped to
/// `[−1, 1]`.
pub fn interpret_action(raw: &[f64; ACTION_DIM], limit: f64) -> (PolicyAction, Posture) {
    let c = |v: f64| v.clamp(-1.0, 1.0);
    let action = PolicyAction {
        r_mod: Vector3::new(c(raw[0]), c(raw[1]), c(raw[2])) * limit,
        eta_raw: c(raw[3]),
    };
    (action, action.posture())
}

/// Inverse of the scaling in [`interpret_action`] for in-range actions.
pub fn action_to_raw(a: &PolicyAction, limit: f64) -> [f64; ACTION_DIM] {
    [
        a.r_mod.x / limit,
        a.r_mod.y / limit,
        a.r_mod.z / limit,
        a.eta_raw,
    ]
}

/// FIFO of the last [`HISTORY_LEN`] actions, most recent first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionHistory {
    buf: VecDeque<PolicyAction>,
}

impl ActionHistory {
    pub fn new() -> Self {
        ActionHistory {
            buf: VecDeque::with_capacity(HISTORY_LEN + 1),
        }
    }

    pub fn push(&mut self, a: PolicyAction) {
        self.buf.push_front(a);
        self.buf.truncate(HISTORY_LEN);
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Exactly [`HISTORY_LEN`] entries, zero-padded, most recent first.
    pub fn padded(&self) -> [PolicyAction; HISTORY_LEN] {
        std::array::from_fn(|i| self.buf.get(i).copied().unwrap_or_default())
    }

    pub fn latest(&self) -> PolicyAction {
        self.buf.front().copied().unwrap_or_default()
    }
}

/// Layout: `r, v, R (row-major), ω, history` with history entries
/// `(r_mod, η_raw)` most recent first.
pub fn build_observation(
    x: &QuadState,
    hist: &ActionHistory,
    scales: &ObservationScales,
) -> [f64; OBS_DIM] {
    let mut o = [0.0; OBS_DIM];
    let rot = x.q.rotation_matrix();
    for i in 0..3 {
        o[i] = x.r[i] / scales.position;
        o[3 + i] = x.v[i] / scales.velocity;
        o[15 + i] = x.omega[i] / scales.angular_rate;
        for j in 0..3 {
            o[6 + 3 * i + j] = rot[(i, j)];
        }
    }
    for (k, a) in hist.padded().iter().enumerate() {
        let base = 18 + ACTION_DIM * k;
        for i in 0..3 {
            o[base + i] = a.r_mod[i] / scales.action;
        }
        o[base + 3] = a.eta_raw;
    }
    o
}

/// Observation blocks in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedObservation {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    pub rotation: nalgebra::Matrix3<f64>,
    pub omega: Vector3<f64>,
    pub history: [PolicyAction; HISTORY_LEN],
}

pub fn decode_observation(o: &[f64; OBS_DIM], scales: &ObservationScales) -> DecodedObservation {
    let v3 = |off: usize, s: f64| Vector3::new(o[off] * s, o[off + 1] * s, o[off + 2] * s);
    DecodedObservation {
        r: v3(0, scales.position),
        v: v3(3, scales.velocity),
        rotation: nalgebra::Matrix3::from_fn(|i, j| o[6 + 3 * i + j]),
        omega: v3(15, scales.angular_rate),
        history: std::array::from_fn(|k| {
            let base = 18 + ACTION_DIM * k;
            PolicyAction {
                r_mod: v3(base, scales.action),
                eta_raw: o[base + 3],
            }
        }),
    }
}

/// Diagonal Gaussian policy: `mean = tanh(MLP(o))` with a state-independent
/// log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    pub mlp: Mlp,
    pub log_std: DVector<f64>,
}

impl PolicyNetwork {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let sizes = layer_sizes(OBS_DIM, hidden, ACTION_DIM);
        PolicyNetwork {
            mlp: Mlp::new(&sizes, 0.01, rng),
            log_std: DVector::from_element(ACTION_DIM, initial_log_std()),
        }
    }

    pub fn zeros(hidden: &[usize]) -> Self {
        PolicyNetwork {
            mlp: Mlp::zeros(&layer_sizes(OBS_DIM, hidden, ACTION_DIM)),
            log_std: DVector::from_element(ACTION_DIM, initial_log_std()),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        self.mlp.validate()?;
        let (input, output) = (self.mlp.input_size(), self.mlp.output_size());
        if input != OBS_DIM || output != ACTION_DIM || self.log_std.len() != ACTION_DIM {
            return Err(PolicyError::Dimensions { input, output });
        }
        if !self.mlp.is_finite() || self.log_std.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(())
    }

    pub fn hidden(&self) -> Vec<usize> {
        let s = self.mlp.sizes();
        s[1..s.len() - 1].to_vec()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<([f64; ACTION_DIM], [f64; ACTION_DIM]), PolicyError> {
        let out = self.mlp.forward(obs)?;
        Ok((
            std::array::from_fn(|i| out[i].tanh()),
            std::array::from_fn(|i| self.log_std[i]),
        ))
    }

    /// Means for a batch of observations (one per column).
    pub fn forward_batch(&self, obs: &DMatrix<f64>) -> Result<DMatrix<f64>, PolicyError> {
        let cache = self.mlp.forward_batch(obs)?;
        Ok(cache.output().map(f64::tanh))
    }

    /// Draws `mean + σ·ε` and returns it with its log-density.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        mean: &[f64; ACTION_DIM],
        rng: &mut R,
    ) -> ([f64; ACTION_DIM], f64) {
        let a: [f64; ACTION_DIM] = std::array::from_fn(|i| {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            mean[i] + self.log_std[i].exp() * eps
        });
        let lp = gaussian_log_prob(&a, mean, self.log_std.as_slice());
        (a, lp)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let extra = self.log_std.as_slice().to_vec();
        save_weights(path, &self.mlp, &extra)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let (mlp, extra) = load_weights(path)?;
        let net = PolicyNetwork {
            mlp,
            log_std: DVector::from_vec(extra),
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    const HALF_LN_2PIE: f64 = 1.418_938_533_204_672_7;
    log_std.iter().map(|ls| ls + HALF_LN_2PIE).sum()
}

/// Applies values after a fixed number of ticks; the previously applied
/// value holds until a newer one matures.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLine<T> {
    delay: usize,
    pending: VecDeque<(u64, T)>,
    current: T,
    tick: u64,
}

impl<T: Copy> DelayLine<T> {
    pub fn new(delay_ticks: usize, initial: T) -> Self {
        DelayLine {
            delay: delay_ticks,
            pending: VecDeque::new(),
            current: initial,
            tick: 0,
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Schedules `value`, computed at the current tick.
    pub fn submit(&mut self, value: T) {
        self.pending.push_back((self.tick + self.delay as u64, value));
    }

    /// Value in effect for the current tick; then advances one tick.
    pub fn advance(&mut self) -> T {
        while let Some(&(due, v)) = self.pending.front() {
            if due > self.tick {
                break;
            }
            self.current = v;
            self.pending.pop_front();
        }
        self.tick += 1;
        self.current
    }

    pub fn reset(&mut self, initial: T) {
        self.pending.clear();
        self.current = initial;
        self.tick = 0;
    }
}

/// `delay_ticks`-step shift of a per-tick stream, filled with `initial`.
pub fn delayed_apply<T: Copy>(stream: &[T], delay_ticks: usize, initial: T) -> Vec<T> {
    let mut line = DelayLine::new(delay_ticks, initial);
    stream
        .iter()
        .map(|&v| {
            line.submit(v);
            line.advance()
        })
        .collect()
}

/// Delay in dynamics ticks; `None` unless `delay` is a non-negative
/// multiple of `dt`.
pub fn delay_ticks(delay: f64, dt: f64) -> Option<usize> {
    if !(delay >= 0.0) || !(dt > 0.0) {
        return None;
    }
    let n = (delay / dt).round();
    ((n * dt - delay).abs() <= 1e-9 * dt.max(delay)).then_some(n as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightSidecar {
    format: String,
    layers: Vec<LayerShape>,
    extra: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerShape {
    /// `[out, in]`, weights stored row-major followed by the bias.
    weight: [usize; 2],
    bias: usize,
}

const WEIGHT_FORMAT: &str = "f32-le";

/// JSON sidecar path for a weight file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `mlp` and `extra` as little-endian f32 with a JSON shape sidecar.
pub fn save_weights(path: &Path, mlp: &Mlp, extra: &[f64]) -> Result<(), PolicyError> {
    let mut bytes = Vec::with_capacity(4 * (mlp.parameter_count() + extra.len()));
    let mut put = |v: f64| bytes.extend_from_slice(&(v as f32).to_le_bytes());
    let mut layers = Vec::new();
    for (w, b) in mlp.weights.iter().zip(&mlp.biases) {
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                put(w[(i, j)]);
            }
        }
        b.iter().for_each(|&v| put(v));
        layers.push(LayerShape {
            weight: [w.nrows(), w.ncols()],
            bias: b.len(),
        });
    }
    extra.iter().for_each(|&v| put(v));
    let sidecar = WeightSidecar {
        format: WEIGHT_FORMAT.to_string(),
        layers,
        extra: extra.len(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(Mlp, Vec<f64>), PolicyError> {
    let sidecar: WeightSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.format != WEIGHT_FORMAT {
        return Err(PolicyError::Io(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported format {:?}", sidecar.format),
        )));
    }
    let bytes = fs::read(path)?;
    let expected = sidecar
        .layers
        .iter()
        .map(|l| l.weight[0] * l.weight[1] + l.bias)
        .sum::<usize>()
        + sidecar.extra;
    if bytes.len() != 4 * expected {
        return Err(PolicyError::Length {
            expected,
            got: bytes.len() / 4,
        });
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut next = || values.next().expect("length checked above");
    let mut mlp = Mlp {
        weights: Vec::new(),
        biases: Vec::new(),
    };
    for l in &sidecar.layers {
        let [rows, cols] = l.weight;
        let mut w = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                w[(i, j)] = next();
            }
        }
        mlp.weights.push(w);
        mlp.biases.push(DVector::from_fn(l.bias, |_, _| next()));
    }
    mlp.validate()?;
    let extra = (0..sidecar.extra).map(|_| next()).collect();
    Ok((mlp, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::Quat;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn action(x: f64, eta: f64) -> PolicyAction {
        PolicyAction {
            r_mod: Vector3::new(x, -x, 0.5 * x),
            eta_raw: eta,
        }
    }

    #[test]
    fn hover_observation_layout() {
        let o = build_observation(
            &QuadState::default(),
            &ActionHistory::new(),
            &ObservationScales::default(),
        );
        assert_eq!(o.len(), 30);
        let mut expected = [0.0; OBS_DIM];
        expected[6] = 1.0;
        expected[10] = 1.0;
        expected[14] = 1.0;
        assert_eq!(o, expected);
    }

    #[test]
    fn history_only_changes_history_block() {
        let x = QuadState {
            r: Vector3::new(0.1, -0.2, 0.3),
            v: Vector3::new(1.0, 0.0, -1.0),
            q: Quat::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.7),
            omega: Vector3::new(3.0, -1.0, 0.5),
            ..QuadState::default()
        };
        let s = ObservationScales::default();
        let mut h = ActionHistory::new();
        let a = build_observation(&x, &h, &s);
        h.push(action(0.5, -0.3));
        let b = build_observation(&x, &h, &s);
        assert_eq!(a[..18], b[..18]);
        assert_ne!(a[18..], b[18..]);
    }

    #[test]
    fn history_is_fifo_of_three() {
        let mut h = ActionHistory::new();
        for k in 1..=4 {
            h.push(action(k as f64, 0.0));
        }
        assert_eq!(h.len(), 3);
        let p = h.padded();
        assert_eq!(p[0].r_mod.x, 4.0);
        assert_eq!(p[2].r_mod.x, 2.0);
        let mut short = ActionHistory::new();
        short.push(action(1.0, 1.0));
        assert_eq!(short.padded()[1], PolicyAction::default());
    }

    proptest! {
        #[test]
        fn observation_round_trips(
            r in prop::array::uniform3(-5.0f64..5.0),
            v in prop::array::uniform3(-5.0f64..5.0),
            w in prop::array::uniform3(-20.0f64..20.0),
            hist in prop::collection::vec((-2.0f64..2.0, -1.0f64..1.0), 0..5),
        ) {
            let x = QuadState {
                r: Vector3::from(r),
                v: Vector3::from(v),
                omega: Vector3::from(w),
                q: Quat::from_axis_angle(&Vector3::new(0.3, -0.1, 0.9), 1.3),
                ..QuadState::default()
            };
            // power-of-two scales keep the round trip exact
            let s = ObservationScales { position: 2.0, velocity: 4.0, angular_rate: 16.0, action: 2.0 };
            let mut h = ActionHistory::new();
            for (m, e) in hist {
                h.push(action(m, e));
            }
            let d = decode_observation(&build_observation(&x, &h, &s), &s);
            prop_assert_eq!(d.r, x.r);
            prop_assert_eq!(d.v, x.v);
            prop_assert_eq!(d.omega, x.omega);
            prop_assert_eq!(d.rotation, x.q.rotation_matrix());
            prop_assert_eq!(d.history, h.padded());
        }

        #[test]
        fn interpret_is_idempotent_and_posture_is_binary(
            raw in prop::array::uniform4(-3.0f64..3.0),
            limit in 0.1f64..5.0,
        ) {
            let (a, eta) = interpret_action(&raw, limit);
            prop_assert!(a.r_mod.iter().all(|v| v.abs() <= limit));
            prop_assert!(a.eta_raw.abs() <= 1.0);
            prop_assert!(eta.sign() == 1.0 || eta.sign() == -1.0);
            let (b, eta_b) = interpret_action(&action_to_raw(&a, limit), limit);
            prop_assert!((a.r_mod - b.r_mod).norm() <= 1e-12 * limit);
            prop_assert_eq!(a.eta_raw, b.eta_raw);
            prop_assert_eq!(eta, eta_b);
        }
    }

    #[test]
    fn interpret_examples() {
        let (a, eta) = interpret_action(&[0.0; 4], 2.0);
        assert_eq!(a.r_mod, Vector3::zeros());
        assert_eq!(eta, Posture::Nominal);
        let (a, eta) = interpret_action(&[1.0, -1.0, 0.0, -0.9], 2.0);
        assert_eq!(a.r_mod, Vector3::new(2.0, -2.0, 0.0));
        assert_eq!(eta, Posture::Inverted);
    }

    #[test]
    fn zero_network_has_zero_mean_and_initial_log_std() {
        let net = PolicyNetwork::zeros(&[16, 16]);
        let (mean, log_std) = net.forward(&[0.3; OBS_DIM]).unwrap();
        assert_eq!(mean, [0.0; 4]);
        assert_eq!(log_std, [0.25f64.ln(); 4]);
    }

    #[test]
    fn wrong_observation_length_is_an_error() {
        let net = PolicyNetwork::zeros(&[8]);
        assert!(matches!(
            net.forward(&[0.0; 10]),
            Err(PolicyError::Network(NnError::InputSize { expected: 30, got: 10 }))
        ));
    }

    #[test]
    fn single_channel_mean_is_hand_computable() {
        let mut net = PolicyNetwork::zeros(&[1]);
        net.mlp.weights[0][(0, 0)] = 1.5;
        net.mlp.biases[0][0] = -0.2;
        net.mlp.weights[1][(2, 0)] = 0.8;
        net.mlp.biases[1][2] = 0.1;
        let mut obs = [0.0; OBS_DIM];
        obs[0] = 0.4;
        let (mean, _) = net.forward(&obs).unwrap();
        let expected = (0.8 * (1.5f64 * 0.4 - 0.2).tanh() + 0.1).tanh();
        assert_eq!(mean[2], expected);
        assert_eq!(mean[0], 0.0);
    }

    #[test]
    fn batched_means_match_and_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = PolicyNetwork::new(&[32, 32], &mut rng);
        let obs = DMatrix::from_fn(OBS_DIM, 7, |_, _| rng.random_range(-1.0..1.0));
        let batch = net.forward_batch(&obs).unwrap();
        for c in 0..7 {
            let (m1, _) = net.forward(obs.column(c).as_slice()).unwrap();
            let (m2, _) = net.forward(obs.column(c).as_slice()).unwrap();
            assert_eq!(m1, m2);
            for i in 0..ACTION_DIM {
                assert!((m1[i] - batch[(i, c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gaussian_log_prob_matches_closed_form() {
        let lp = gaussian_log_prob(&[0.5], &[0.0], &[0.0]);
        let expected = -0.125 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-15);
        let h = gaussian_entropy(&[0.25f64.ln()]);
        let expected = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.0625).ln();
        assert!((h - expected).abs() < 1e-14);
    }

    #[test]
    fn delay_examples() {
        let stream: Vec<u32> = (1..=10).collect();
        assert_eq!(delayed_apply(&stream, 0, 0), stream);
        let d = delay_ticks(0.006, 0.001).unwrap();
        assert_eq!(d, 6);
        let shifted = delayed_apply(&stream, d, 0);
        assert_eq!(shifted, vec![0, 0, 0, 0, 0, 0, 1, 2, 3, 4]);
        assert_eq!(delay_ticks(0.0065, 0.001), None);
        assert_eq!(delay_ticks(-0.001, 0.001), None);
    }

    #[test]
    fn delay_line_holds_between_sparse_submissions() {
        let mut line = DelayLine::new(6, 0u32);
        let mut applied = Vec::new();
        for k in 0..40u32 {
            if k % 20 == 0 {
                line.submit(k / 20 + 1);
            }
            applied.push(line.advance());
        }
        assert!(applied[..6].iter().all(|&v| v == 0));
        assert!(applied[6..26].iter().all(|&v| v == 1));
        assert!(applied[26..].iter().all(|&v| v == 2));
    }

    #[test]
    fn weight_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = PolicyNetwork::new(&[16, 8], &mut rng);
        net.log_std[1] = -2.0;
        net.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 4 * (net.mlp.parameter_count() + ACTION_DIM));
        let loaded = PolicyNetwork::load(&path).unwrap();
        assert_eq!(loaded.hidden(), vec![16, 8]);
        for (a, b) in net.mlp.weights.iter().zip(&loaded.mlp.weights) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (*x as f32) as f64 == *y));
        }
        assert_eq!(loaded.log_std[1], -2.0);
        // a second save of the loaded network is byte-identical
        let again = dir.path().join("again.bin");
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn truncated_weight_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        PolicyNetwork::zeros(&[4]).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(PolicyNetwork::load(&path), Err(PolicyError::Length { .. })));
    }
}
