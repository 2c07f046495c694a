//! Proximal policy optimization over batched reference-modulation
//! environments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, PolicyEnv, RewardWeights, Transition, Vehicle};
use crate::nn::{global_norm, Adam, Mlp, MlpGrads};
use crate::policy::{
    gaussian_entropy, gaussian_log_prob, layer_sizes, save_weights, PolicyError, PolicyNetwork,
    ACTION_DIM, OBS_DIM,
};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("checkpoint output: {0}")]
    Io(#[from] std::io::Error),
    #[error("training curve: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {reason}; last checkpoint {checkpoint:?}")]
    Diverged {
        epoch: usize,
        reason: String,
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub update_epochs: usize,
    pub minibatches: usize,
    pub num_envs: usize,
    pub epochs: usize,
    /// Global gradient-norm bound.
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    /// Multiply rewards by the policy step so returns approximate a time
    /// integral.
    pub scale_reward_by_dt: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            update_epochs: 4,
            minibatches: 20,
            num_envs: 2048,
            epochs: 750,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            scale_reward_by_dt: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let pos = [
            self.learning_rate,
            self.gamma,
            self.clip,
            self.max_grad_norm,
            self.adam_eps,
        ];
        if !pos.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(PpoError::Config("rates, discount and clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || self.gamma > 1.0 {
            return Err(PpoError::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(PpoError::Config("loss coefficients must be non-negative".into()));
        }
        if self.update_epochs == 0 || self.minibatches == 0 || self.num_envs == 0 || self.epochs == 0 {
            return Err(PpoError::Config("counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one trajectory. `values` holds one
/// more entry than `rewards`: the bootstrap value after the last step.
/// `dones[t]` cuts the recursion after step `t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n + 1, "values need a bootstrap entry");
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * not_done - values[t];
        running = delta + gamma * lambda * not_done * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero mean, unit standard deviation.
pub fn normalize(v: &mut [f64]) {
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Clipped surrogate objective term `min(r·A, clip(r, 1 ± ε)·A)` (to be
/// maximized).
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to `log π_new`.
pub fn clipped_surrogate_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = (advantage >= 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip);
    if clipped {
        0.0
    } else {
        ratio * advantage
    }
}

/// One minibatch worth of training samples; columns are samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Gradients of the PPO loss.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub policy: MlpGrads,
    pub log_std: DVector<f64>,
    pub value: MlpGrads,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// `L = −mean(surrogate) + c_v·½·mean((V − R)²) − c_e·H` and its gradients.
pub fn ppo_loss(
    policy: &PolicyNetwork,
    value: &Mlp,
    batch: &Batch,
    cfg: &PpoConfig,
) -> Result<(LossStats, LossGrads), PpoError> {
    let b = batch.obs.ncols();
    let inv_b = 1.0 / b as f64;
    let pcache = policy.mlp.forward_batch(&batch.obs).map_err(PolicyError::from)?;
    let vcache = value.forward_batch(&batch.obs).map_err(PolicyError::from)?;
    let z = pcache.output();
    let v = vcache.output();
    let log_std = policy.log_std.as_slice();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

    let mut d_z = DMatrix::zeros(ACTION_DIM, b);
    let mut d_log_std = DVector::zeros(ACTION_DIM);
    let mut d_v = DMatrix::zeros(1, b);
    let mut stats = LossStats::default();
    let mut clipped = 0usize;
    for i in 0..b {
        let mean: [f64; ACTION_DIM] = std::array::from_fn(|k| z[(k, i)].tanh());
        let a: [f64; ACTION_DIM] = std::array::from_fn(|k| batch.actions[(k, i)]);
        let lp = gaussian_log_prob(&a, &mean, log_std);
        let log_ratio = lp - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        let adv = batch.advantages[i];
        stats.policy_loss -= clipped_surrogate(ratio, adv, cfg.clip) * inv_b;
        stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv_b;
        if (ratio - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        // ∂L/∂log π
        let g = -clipped_surrogate_grad(ratio, adv, cfg.clip) * inv_b;
        for k in 0..ACTION_DIM {
            let diff = a[k] - mean[k];
            d_z[(k, i)] = g * diff * inv_var[k] * (1.0 - mean[k] * mean[k]);
            d_log_std[k] += g * (diff * diff * inv_var[k] - 1.0);
        }
        let err = v[(0, i)] - batch.returns[i];
        stats.value_loss += 0.5 * err * err * inv_b;
        d_v[(0, i)] = cfg.value_coef * err * inv_b;
    }
    stats.entropy = gaussian_entropy(log_std);
    stats.clip_fraction = clipped as f64 * inv_b;
    stats.loss = stats.policy_loss + cfg.value_coef * stats.value_loss - cfg.entropy_coef * stats.entropy;
    d_log_std.add_scalar_mut(-cfg.entropy_coef);

    let mut pg = policy.mlp.zero_grads();
    policy.mlp.backward(&pcache, &d_z, &mut pg);
    let mut vg = value.zero_grads();
    value.backward(&vcache, &d_v, &mut vg);
    Ok((
        stats,
        LossGrads {
            policy: pg,
            log_std: d_log_std,
            value: vg,
        },
    ))
}

/// Policy, critic and optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: PolicyNetwork,
    pub value: Mlp,
    adam: Adam,
}

impl Learner {
    pub fn new(hidden: &[usize], cfg: &PpoConfig, rng: &mut ChaCha8Rng) -> Self {
        let policy = PolicyNetwork::new(hidden, rng);
        let value = Mlp::new(&layer_sizes(OBS_DIM, hidden, 1), 1.0, rng);
        let mut shapes: Vec<usize> = policy.mlp.weights.iter().map(|w| w.len()).collect();
        shapes.extend(policy.mlp.biases.iter().map(|b| b.len()));
        shapes.push(ACTION_DIM);
        shapes.extend(value.weights.iter().map(|w| w.len()));
        shapes.extend(value.biases.iter().map(|b| b.len()));
        let mut adam = Adam::new(cfg.learning_rate, &shapes);
        adam.eps = cfg.adam_eps;
        Learner { policy, value, adam }
    }

    /// One clipped gradient step; returns the pre-clip gradient norm.
    pub fn apply(&mut self, grads: &LossGrads, max_norm: f64) -> f64 {
        let mut flat: Vec<Vec<f64>> = grads.policy.slices().iter().map(|s| s.to_vec()).collect();
        flat.push(grads.log_std.as_slice().to_vec());
        flat.extend(grads.value.slices().iter().map(|s| s.to_vec()));
        let views: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
        let norm = global_norm(&views);
        if norm > max_norm {
            let s = max_norm / norm;
            flat.iter_mut().flat_map(|v| v.iter_mut()).for_each(|g| *g *= s);
        }
        let views: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
        let mut params = self.policy.mlp.param_slices_mut();
        params.push(self.policy.log_std.as_mut_slice());
        params.extend(self.value.param_slices_mut());
        self.adam.update(params, &views);
        norm
    }
}

/// Everything needed to run a training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub transition: Transition,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub vehicle: Vehicle,
    pub weights: RewardWeights,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Checkpoint period in epochs; `0` disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(transition: Transition) -> Self {
        TrainConfig {
            transition,
            ppo: PpoConfig::default(),
            env: EnvConfig {
                randomize_actuators: true,
                ..EnvConfig::default()
            },
            vehicle: Vehicle::default(),
            weights: RewardWeights::for_transition(transition),
            hidden: vec![512, 512],
            seed: 0,
            checkpoint_every: 50,
        }
    }

    /// Reduced size for single-machine CPU runs.
    pub fn desk_scale(transition: Transition) -> Self {
        let mut c = Self::new(transition);
        c.ppo.num_envs = 256;
        c.ppo.epochs = 200;
        c.hidden = vec![64, 64];
        c
    }

    pub fn validate(&self) -> Result<(), PpoError> {
        self.ppo.validate()?;
        self.env.validate()?;
        self.vehicle.validate()?;
        self.weights.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(PpoError::Config("hidden layers must be non-empty".into()));
        }
        let samples = self.ppo.num_envs * self.env.policy_steps();
        if samples < self.ppo.minibatches {
            return Err(PpoError::Config("fewer samples than minibatches".into()));
        }
        Ok(())
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    /// Mean over environments of `Σ C·dt_env` for the collected episode.
    pub mean_cost: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub fn write_curve_csv<W: Write>(w: W, rows: &[CurveRow]) -> Result<(), PpoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "epoch", "mean_cost", "clip_fraction", "approx_kl", "policy_loss", "value_loss", "entropy",
    ])?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.mean_cost.to_string(),
            r.clip_fraction.to_string(),
            r.approx_kl.to_string(),
            r.policy_loss.to_string(),
            r.value_loss.to_string(),
            r.entropy.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights after the last update.
    pub policy: PolicyNetwork,
    pub value: Mlp,
    /// Weights that collected the lowest-cost epoch.
    pub best_policy: PolicyNetwork,
    pub best_epoch: usize,
    pub curve: Vec<CurveRow>,
}

/// Per-environment rollout storage for one epoch.
struct EnvRollout {
    obs: Vec<[f64; OBS_DIM]>,
    actions: Vec<[f64; ACTION_DIM]>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    cost: f64,
}

struct Worker {
    env: PolicyEnv,
    rng: ChaCha8Rng,
    obs: [f64; OBS_DIM],
    roll: EnvRollout,
}

fn stream(seed: u64, salt: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index as u64);
    rng
}

const ENV_SALT: u64 = 0x5eed_0001;
const ACTION_SALT: u64 = 0x5eed_0002;
const TRAINER_SALT: u64 = 0x5eed_0003;

/// File names written into the output directory.
pub const FINAL_POLICY_FILE: &str = "policy.bin";
pub const BEST_POLICY_FILE: &str = "policy_best.bin";
pub const VALUE_FILE: &str = "value.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVE_FILE: &str = "curve.csv";

/// Trains a policy. `progress` sees every curve row as it is produced.
/// When `out_dir` is given, checkpoints, the final and best policies and the
/// curve are written there.
pub fn train<F: FnMut(&CurveRow)>(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: F,
) -> Result<TrainOutcome, PpoError> {
    cfg.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let mut trainer_rng = stream(cfg.seed, TRAINER_SALT, 0);
    let mut learner = Learner::new(&cfg.hidden, &cfg.ppo, &mut trainer_rng);
    let steps = cfg.env.policy_steps();
    let reward_scale = if cfg.ppo.scale_reward_by_dt { cfg.env.dt_env } else { 1.0 };

    let mut workers: Vec<Worker> = (0..cfg.ppo.num_envs)
        .map(|i| {
            let env_seed = {
                use rand::RngCore;
                stream(cfg.seed, ENV_SALT, i).next_u64()
            };
            Ok(Worker {
                env: PolicyEnv::new(cfg.env, cfg.vehicle, cfg.transition, cfg.weights, env_seed)?,
                rng: stream(cfg.seed, ACTION_SALT, i),
                obs: [0.0; OBS_DIM],
                roll: EnvRollout {
                    obs: Vec::with_capacity(steps),
                    actions: Vec::with_capacity(steps),
                    log_probs: Vec::with_capacity(steps),
                    rewards: Vec::with_capacity(steps),
                    values: Vec::with_capacity(steps + 1),
                    dones: Vec::with_capacity(steps),
                    cost: 0.0,
                },
            })
        })
        .collect::<Result<_, PpoError>>()?;

    let mut curve = Vec::with_capacity(cfg.ppo.epochs);
    let mut best: Option<(f64, usize, PolicyNetwork)> = None;
    let mut last_checkpoint: Option<PathBuf> = None;

    for epoch in 1..=cfg.ppo.epochs {
        let snapshot = learner.policy.clone();
        let diverged = |reason: String, ckpt: &Option<PathBuf>| PpoError::Diverged {
            epoch,
            reason,
            checkpoint: ckpt.clone(),
        };

        // rollout
        for w in workers.iter_mut() {
            w.obs = w.env.reset();
            let r = &mut w.roll;
            r.obs.clear();
            r.actions.clear();
            r.log_probs.clear();
            r.rewards.clear();
            r.values.clear();
            r.dones.clear();
            r.cost = 0.0;
        }
        for _ in 0..steps {
            let obs = DMatrix::from_fn(OBS_DIM, workers.len(), |k, i| workers[i].obs[k]);
            let means = learner.policy.forward_batch(&obs)?;
            let values = learner
                .value
                .forward_batch(&obs)
                .map_err(PolicyError::from)?
                .output()
                .clone();
            let policy = &learner.policy;
            let results: Vec<Result<(), EnvError>> = workers
                .par_iter_mut()
                .enumerate()
                .map(|(i, w)| {
                    let mean: [f64; ACTION_DIM] = std::array::from_fn(|k| means[(k, i)]);
                    let (a, lp) = policy.sample(&mean, &mut w.rng);
                    let s = w.env.step(&a, None)?;
                    let r = &mut w.roll;
                    r.obs.push(w.obs);
                    r.actions.push(a);
                    r.log_probs.push(lp);
                    r.values.push(values[(0, i)]);
                    r.rewards.push(-s.cost * reward_scale);
                    r.dones.push(s.done);
                    r.cost += s.cost * cfg.env.dt_env;
                    w.obs = s.observation;
                    Ok(())
                })
                .collect();
            for r in results {
                r.map_err(|e| diverged(e.to_string(), &last_checkpoint))?;
            }
        }

        // advantages
        let mut all_obs = Vec::with_capacity(workers.len() * steps);
        let mut all_actions = Vec::with_capacity(workers.len() * steps);
        let mut all_lp = Vec::with_capacity(workers.len() * steps);
        let mut all_adv = Vec::with_capacity(workers.len() * steps);
        let mut all_ret = Vec::with_capacity(workers.len() * steps);
        let mut mean_cost = 0.0;
        for w in workers.iter_mut() {
            let r = &mut w.roll;
            // every rollout ends its episode, so the bootstrap value is unused
            r.values.push(0.0);
            let (adv, ret) = gae(&r.rewards, &r.values, &r.dones, cfg.ppo.gamma, cfg.ppo.gae_lambda);
            all_obs.extend_from_slice(&r.obs);
            all_actions.extend_from_slice(&r.actions);
            all_lp.extend_from_slice(&r.log_probs);
            all_adv.extend(adv);
            all_ret.extend(ret);
            mean_cost += r.cost;
        }
        mean_cost /= workers.len() as f64;
        if !mean_cost.is_finite() {
            return Err(diverged("non-finite episode cost".into(), &last_checkpoint));
        }
        normalize(&mut all_adv);

        // update
        let n = all_obs.len();
        let mb = n / cfg.ppo.minibatches;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut acc = LossStats::default();
        let mut count = 0.0;
        for _ in 0..cfg.ppo.update_epochs {
            idx.shuffle(&mut trainer_rng);
            for chunk in idx.chunks_exact(mb) {
                let batch = Batch {
                    obs: DMatrix::from_fn(OBS_DIM, chunk.len(), |k, j| all_obs[chunk[j]][k]),
                    actions: DMatrix::from_fn(ACTION_DIM, chunk.len(), |k, j| all_actions[chunk[j]][k]),
                    old_log_probs: chunk.iter().map(|&j| all_lp[j]).collect(),
                    advantages: chunk.iter().map(|&j| all_adv[j]).collect(),
                    returns: chunk.iter().map(|&j| all_ret[j]).collect(),
                };
                let (stats, grads) = ppo_loss(&learner.policy, &learner.value, &batch, &cfg.ppo)?;
                if !stats.loss.is_finite() {
                    return Err(diverged(format!("non-finite loss {stats:?}"), &last_checkpoint));
                }
                learner.apply(&grads, cfg.ppo.max_grad_norm);
                acc.policy_loss += stats.policy_loss;
                acc.value_loss += stats.value_loss;
                acc.entropy += stats.entropy;
                acc.clip_fraction += stats.clip_fraction;
                acc.approx_kl += stats.approx_kl;
                count += 1.0;
            }
        }
        if !learner.policy.mlp.is_finite() || !learner.value.is_finite() {
            return Err(diverged("non-finite weights".into(), &last_checkpoint));
        }

        let row = CurveRow {
            epoch,
            mean_cost,
            clip_fraction: acc.clip_fraction / count,
            approx_kl: acc.approx_kl / count,
            policy_loss: acc.policy_loss / count,
            value_loss: acc.value_loss / count,
            entropy: acc.entropy / count,
        };
        progress(&row);
        curve.push(row);
        if best.as_ref().is_none_or(|(c, _, _)| mean_cost < *c) {
            best = Some((mean_cost, epoch, snapshot));
        }

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let path = dir.join(CHECKPOINT_FILE);
                learner.policy.save(&path)?;
                save_weights(&dir.join(VALUE_FILE), &learner.value, &[])?;
                write_curve_csv(fs::File::create(dir.join(CURVE_FILE))?, &curve)?;
                last_checkpoint = Some(path);
            }
        }
    }

    let (_, best_epoch, best_policy) = best.expect("at least one epoch");
    if let Some(dir) = out_dir {
        learner.policy.save(&dir.join(FINAL_POLICY_FILE))?;
        best_policy.save(&dir.join(BEST_POLICY_FILE))?;
        save_weights(&dir.join(VALUE_FILE), &learner.value, &[])?;
        write_curve_csv(fs::File::create(dir.join(CURVE_FILE))?, &curve)?;
    }
    Ok(TrainOutcome {
        policy: learner.policy,
        value: learner.value,
        best_policy,
        best_epoch,
        curve,
    })
}
