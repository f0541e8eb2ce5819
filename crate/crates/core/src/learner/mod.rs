//! Soft actor-critic with twin layer-normalized critics, an observation
//! autoencoder feeding the critics, an action embedder and a learned
//! temperature.
//!
//! The actor reads the raw observation vector. Each critic reads the
//! concatenation of the encoder latent `z_q` and the action embedding `z_a`.
//! All backward passes are written out by hand; the loss functions take their
//! Gaussian noise explicitly so they can be checked against finite
//! differences.

mod adam;
pub mod nn;
mod persist;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Observation, Transition};
use crate::vehicle::{Action, VehicleParams};

pub use adam::{Adam, ScalarAdam};
pub use nn::{layer_norm, LayerNorm, Linear, Mlp};

pub const PARAMS_MAGIC: &[u8; 4] = b"PCPR";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid learner config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt parameter file: {0}")]
    Corrupt(String),
    #[error("unsupported parameter file version {found} (expected {PARAMS_VERSION})")]
    Version { found: u32 },
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub obs_dim: usize,
    /// Hidden width of the actor and critic MLPs (two layers each).
    pub hidden: usize,
    pub ae_hidden: usize,
    pub latent: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub lambda_ae: f64,
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Steering and speed bounds the squashed actions are scaled to.
    pub action_scale: [f64; 2],
    /// Let the critic loss train the encoder as well.
    pub critic_grad_to_encoder: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        let v = VehicleParams::default();
        Self {
            obs_dim: crate::env::OBS_DIM,
            hidden: 256,
            ae_hidden: 128,
            latent: 32,
            embed_hidden: 64,
            embed_dim: 32,
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            lambda_ae: 1.0,
            target_entropy: -2.0,
            init_alpha: 0.2,
            log_std_min: -5.0,
            log_std_max: 2.0,
            action_scale: [v.max_steer, v.max_speed],
            critic_grad_to_encoder: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidConfig(m.to_string()));
        if [self.obs_dim, self.hidden, self.ae_hidden, self.latent, self.embed_hidden, self.embed_dim]
            .contains(&0)
        {
            return bad("layer sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return bad("gamma and tau must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.init_alpha > 0.0 && self.lambda_ae >= 0.0) {
            return bad("lr and init_alpha must be positive, lambda_ae non-negative");
        }
        if self.log_std_min.partial_cmp(&self.log_std_max) != Some(std::cmp::Ordering::Less) {
            return bad("log_std_min must be below log_std_max");
        }
        if !self.action_scale.iter().all(|&b| b > 0.0 && b.is_finite()) {
            return bad("action_scale must be positive");
        }
        Ok(())
    }
}

/// A minibatch in array form. Actions are normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub dones: Array1<f64>,
    pub next_obs: Array2<f64>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition], action_scale: [f64; 2]) -> Result<Self, LearnerError> {
        let n = ts.len();
        if n == 0 {
            return Err(LearnerError::EmptyBatch);
        }
        let d = ts[0].obs.0.len();
        let mut obs = Array2::zeros((n, d));
        let mut next_obs = Array2::zeros((n, d));
        let mut actions = Array2::zeros((n, 2));
        let mut rewards = Array1::zeros(n);
        let mut dones = Array1::zeros(n);
        for (i, t) in ts.iter().enumerate() {
            if t.obs.0.len() != d || t.next_obs.0.len() != d {
                return Err(LearnerError::InvalidConfig("ragged observations in batch".into()));
            }
            obs.row_mut(i).assign(&Array1::from(t.obs.0.clone()));
            next_obs.row_mut(i).assign(&Array1::from(t.next_obs.0.clone()));
            actions[[i, 0]] = (t.action.delta / action_scale[0]).clamp(-1.0, 1.0);
            actions[[i, 1]] = (t.action.v / action_scale[1]).clamp(-1.0, 1.0);
            rewards[i] = t.reward;
            dones[i] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(Self {
            obs,
            actions,
            rewards,
            dones,
            next_obs,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard-normal draws for the target action and the actor's action.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub next: Array2<f64>,
    pub current: Array2<f64>,
}

impl Noise {
    pub fn sample<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut draw = || Array2::from_shape_simple_fn((n, 2), || StandardNormal.sample(&mut *rng));
        let next = draw();
        let current = draw();
        Self { next, current }
    }
}

/// `log(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log density of `a = scale * tanh(u)` with `u = mean + exp(log_std) * eps`,
/// for one action dimension.
pub fn squashed_log_prob(eps: f64, log_std: f64, u: f64, scale: f64) -> f64 {
    -0.5 * eps * eps - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln() - log_one_minus_tanh_sq(u) - scale.ln()
}

/// Actor forward pass at explicit noise.
pub struct PolicySample {
    cache: nn::MlpCache,
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    /// Whether the raw log-std was inside the clamp interval.
    in_range: Array2<bool>,
    pub u: Array2<f64>,
    /// `tanh(u)`, the action normalized to `[-1, 1]`.
    pub squashed: Array2<f64>,
    pub log_prob: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct CriticGrads {
    pub critics: [Mlp; 2],
    pub embedder: Mlp,
    /// Present only when the critic loss trains the encoder.
    pub encoder: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct AeGrads {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic: [f64; 2],
    pub actor: f64,
    pub alpha_loss: f64,
    pub ae: f64,
    pub alpha: f64,
    pub mean_q: f64,
    pub mean_log_prob: f64,
    /// Set when a loss was non-finite; no parameter was changed.
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub actor: Adam,
    pub critics: [Adam; 2],
    pub embedder: Adam,
    pub encoder: Adam,
    pub decoder: Adam,
    pub alpha: ScalarAdam,
}

#[derive(Clone, Debug)]
pub struct SacLearner {
    config: LearnerConfig,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub embedder: Mlp,
    pub log_alpha: f64,
    pub opt: Optimizers,
    pub updates: u64,
    rng: ChaCha8Rng,
}

impl SacLearner {
    pub fn new(config: LearnerConfig, seed: u64) -> Result<Self, LearnerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let actor = Mlp::new(&[c.obs_dim, c.hidden, c.hidden, 4], true, &mut rng);
        let critic_in = c.latent + c.embed_dim;
        let critics = [
            Mlp::new(&[critic_in, c.hidden, c.hidden, 1], true, &mut rng),
            Mlp::new(&[critic_in, c.hidden, c.hidden, 1], true, &mut rng),
        ];
        let encoder = Mlp::new(&[c.obs_dim, c.ae_hidden, c.latent], false, &mut rng);
        let decoder = Mlp::new(&[c.latent, c.ae_hidden, c.obs_dim], false, &mut rng);
        let embedder = Mlp::new(&[2, c.embed_hidden, c.embed_dim], false, &mut rng);
        let opt = Optimizers {
            actor: Adam::new(&actor, c.lr),
            critics: [Adam::new(&critics[0], c.lr), Adam::new(&critics[1], c.lr)],
            embedder: Adam::new(&embedder, c.lr),
            encoder: Adam::new(&encoder, c.lr),
            decoder: Adam::new(&decoder, c.lr),
            alpha: ScalarAdam::new(c.lr),
        };
        Ok(Self {
            targets: critics.clone(),
            log_alpha: c.init_alpha.ln(),
            config,
            actor,
            critics,
            encoder,
            decoder,
            embedder,
            opt,
            updates: 0,
            rng,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Actor forward at explicit noise `eps` (rows of two standard normals).
    pub fn policy_sample(&self, obs: &Array2<f64>, eps: &Array2<f64>) -> PolicySample {
        let (out, cache) = self.actor.forward_cached(obs);
        let mean = out.slice(s![.., 0..2]).to_owned();
        let raw = out.slice(s![.., 2..4]);
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
        let log_std = raw.mapv(|v| v.clamp(lo, hi));
        let in_range = raw.mapv(|v| v > lo && v < hi);
        let u = &mean + &(log_std.mapv(f64::exp) * eps);
        let squashed = u.mapv(f64::tanh);
        let scale = self.config.action_scale;
        let log_prob = Array1::from_shape_fn(obs.nrows(), |i| {
            (0..2)
                .map(|j| squashed_log_prob(eps[[i, j]], log_std[[i, j]], u[[i, j]], scale[j]))
                .sum()
        });
        PolicySample {
            cache,
            mean,
            log_std,
            in_range,
            u,
            squashed,
            log_prob,
        }
    }

    fn to_action(&self, squashed: [f64; 2]) -> Action {
        let s = self.config.action_scale;
        Action::new(squashed[0] * s[0], squashed[1] * s[1])
    }

    /// Samples an action, or returns the mean action when `deterministic`.
    pub fn act(&mut self, obs: &Observation, deterministic: bool) -> Action {
        let x = Array2::from_shape_vec((1, obs.0.len()), obs.0.clone()).expect("row vector");
        let eps = if deterministic {
            Array2::zeros((1, 2))
        } else {
            Array2::from_shape_simple_fn((1, 2), || StandardNormal.sample(&mut self.rng))
        };
        let p = self.policy_sample(&x, &eps);
        self.to_action([p.squashed[[0, 0]], p.squashed[[0, 1]]])
    }

    /// Sampled action together with its log density.
    pub fn sample_action(&mut self, obs: &Observation) -> (Action, f64) {
        let x = Array2::from_shape_vec((1, obs.0.len()), obs.0.clone()).expect("row vector");
        let eps = Array2::from_shape_simple_fn((1, 2), || StandardNormal.sample(&mut self.rng));
        let p = self.policy_sample(&x, &eps);
        (self.to_action([p.squashed[[0, 0]], p.squashed[[0, 1]]]), p.log_prob[0])
    }

    pub fn encode(&self, obs: &Array2<f64>) -> Array2<f64> {
        self.encoder.forward(obs)
    }

    pub fn decode(&self, z: &Array2<f64>) -> Array2<f64> {
        self.decoder.forward(z)
    }

    /// Embeds normalized actions.
    pub fn embed(&self, actions: &Array2<f64>) -> Array2<f64> {
        self.embedder.forward(actions)
    }

    /// Q-values of `net` at latent `z_q` and normalized actions.
    pub fn q_values(&self, net: &Mlp, z_q: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
        let x = nn::concat_cols(z_q, &self.embed(actions));
        net.forward(&x).column(0).to_owned()
    }

    /// Soft targets `y` with explicit next-action noise.
    pub fn compute_targets(&self, batch: &Batch, eps_next: &Array2<f64>) -> Array1<f64> {
        let z_next = self.encode(&batch.next_obs);
        let p = self.policy_sample(&batch.next_obs, eps_next);
        let q1 = self.q_values(&self.targets[0], &z_next, &p.squashed);
        let q2 = self.q_values(&self.targets[1], &z_next, &p.squashed);
        let alpha = self.alpha();
        let soft = Array1::from_shape_fn(batch.len(), |i| q1[i].min(q2[i]) - alpha * p.log_prob[i]);
        &batch.rewards + &((1.0 - &batch.dones) * self.config.gamma * soft)
    }

    /// Mean squared TD error of both critics against fixed targets `y`.
    pub fn critic_loss(&self, batch: &Batch, y: &Array1<f64>) -> ([f64; 2], CriticGrads) {
        let n = batch.len() as f64;
        let (z_q, enc_cache) = self.encoder.forward_cached(&batch.obs);
        let (z_a, emb_cache) = self.embedder.forward_cached(&batch.actions);
        let x = nn::concat_cols(&z_q, &z_a);
        let mut grads = CriticGrads {
            critics: [self.critics[0].zeros_like(), self.critics[1].zeros_like()],
            embedder: self.embedder.zeros_like(),
            encoder: None,
        };
        let mut losses = [0.0; 2];
        let mut dx = Array2::zeros(x.raw_dim());
        for (i, loss) in losses.iter_mut().enumerate() {
            let (q, cache) = self.critics[i].forward_cached(&x);
            let diff = &q.column(0) - y;
            *loss = diff.mapv(|d| d * d).sum() / n;
            let g = (diff * (2.0 / n)).insert_axis(Axis(1));
            dx += &self.critics[i].backward(&cache, &g, Some(&mut grads.critics[i]));
        }
        let (dz_q, dz_a) = nn::split_cols(&dx, self.config.latent);
        self.embedder.backward(&emb_cache, &dz_a, Some(&mut grads.embedder));
        if self.config.critic_grad_to_encoder {
            let mut eg = self.encoder.zeros_like();
            self.encoder.backward(&enc_cache, &dz_q, Some(&mut eg));
            grads.encoder = Some(eg);
        }
        (losses, grads)
    }

    /// Actor objective `mean(alpha * log pi - min_i Q_i)` at explicit noise.
    /// Returns the loss, the actor gradient and the per-sample log densities.
    pub fn actor_loss(&self, obs: &Array2<f64>, eps: &Array2<f64>) -> (f64, Mlp, Array1<f64>) {
        let n = obs.nrows() as f64;
        let alpha = self.alpha();
        let z_q = self.encode(obs);
        let p = self.policy_sample(obs, eps);
        let (z_a, emb_cache) = self.embedder.forward_cached(&p.squashed);
        let x = nn::concat_cols(&z_q, &z_a);
        let (q1, c1) = self.critics[0].forward_cached(&x);
        let (q2, c2) = self.critics[1].forward_cached(&x);
        let rows = obs.nrows();
        let mut g1 = Array2::zeros((rows, 1));
        let mut g2 = Array2::zeros((rows, 1));
        let mut loss = 0.0;
        for i in 0..rows {
            let (a, b) = (q1[[i, 0]], q2[[i, 0]]);
            if a <= b {
                g1[[i, 0]] = -1.0 / n;
            } else {
                g2[[i, 0]] = -1.0 / n;
            }
            loss += alpha * p.log_prob[i] - a.min(b);
        }
        loss /= n;
        let dx = self.critics[0].backward(&c1, &g1, None) + self.critics[1].backward(&c2, &g2, None);
        let (_, dz_a) = nn::split_cols(&dx, self.config.latent);
        let d_squashed = self.embedder.backward(&emb_cache, &dz_a, None);

        let mut grad_out = Array2::zeros((rows, 4));
        let std = p.log_std.mapv(f64::exp);
        for i in 0..rows {
            for j in 0..2 {
                let t = p.squashed[[i, j]];
                // d log pi / du = 2 tanh(u) through the squashing correction.
                let du = d_squashed[[i, j]] * (1.0 - t * t) + alpha / n * 2.0 * t;
                grad_out[[i, j]] = du;
                if p.in_range[[i, j]] {
                    grad_out[[i, j + 2]] = du * std[[i, j]] * eps[[i, j]] - alpha / n;
                }
            }
        }
        let mut grads = self.actor.zeros_like();
        self.actor.backward(&p.cache, &grad_out, Some(&mut grads));
        (loss, grads, p.log_prob)
    }

    /// Temperature objective `mean(-alpha * (log pi + target_entropy))` and
    /// its derivative with respect to `log alpha`.
    pub fn alpha_loss(&self, log_prob: &Array1<f64>) -> (f64, f64) {
        let alpha = self.alpha();
        let h = self.config.target_entropy;
        let loss = log_prob.iter().map(|lp| -alpha * (lp + h)).sum::<f64>() / log_prob.len() as f64;
        // d alpha / d log alpha = alpha, so the gradient equals the loss.
        (loss, loss)
    }

    /// Batch mean of the L1 reconstruction error norm.
    pub fn ae_loss(&self, obs: &Array2<f64>) -> (f64, AeGrads) {
        let n = obs.nrows() as f64;
        let (z, enc_cache) = self.encoder.forward_cached(obs);
        let (rec, dec_cache) = self.decoder.forward_cached(&z);
        let diff = rec - obs;
        let loss = diff.mapv(f64::abs).sum() / n;
        let g = diff.mapv(|d| {
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        });
        let mut grads = AeGrads {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        };
        let dz = self.decoder.backward(&dec_cache, &g, Some(&mut grads.decoder));
        self.encoder.backward(&enc_cache, &dz, Some(&mut grads.encoder));
        (loss, grads)
    }

    /// One update with freshly sampled noise.
    pub fn update(&mut self, batch: &Batch) -> LossReport {
        let noise = Noise::sample(batch.len(), &mut self.rng);
        self.update_with_noise(batch, &noise)
    }

    /// All losses are evaluated at the current parameters, then each group
    /// takes one optimizer step and the targets move toward the critics.
    pub fn update_with_noise(&mut self, batch: &Batch, noise: &Noise) -> LossReport {
        let y = self.compute_targets(batch, &noise.next);
        let (critic, critic_grads) = self.critic_loss(batch, &y);
        let (actor, actor_grads, log_prob) = self.actor_loss(&batch.obs, &noise.current);
        let (alpha_loss, alpha_grad) = self.alpha_loss(&log_prob);
        let (ae, ae_grads) = self.ae_loss(&batch.obs);
        let z_q = self.encode(&batch.obs);
        let mean_q = self.q_values(&self.critics[0], &z_q, &batch.actions).mean().unwrap_or(0.0);
        let mut report = LossReport {
            critic,
            actor,
            alpha_loss,
            ae,
            alpha: self.alpha(),
            mean_q,
            mean_log_prob: log_prob.mean().unwrap_or(0.0),
            aborted: false,
        };
        let finite = [critic[0], critic[1], actor, alpha_loss, ae, mean_q]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            report.aborted = true;
            return report;
        }

        for i in 0..2 {
            self.opt.critics[i].step(&mut self.critics[i], &critic_grads.critics[i], 1.0);
        }
        self.opt.embedder.step(&mut self.embedder, &critic_grads.embedder, 1.0);
        self.opt.actor.step(&mut self.actor, &actor_grads, 1.0);
        self.opt.alpha.step(&mut self.log_alpha, alpha_grad);

        let lambda = self.config.lambda_ae;
        let mut enc_grad = self.encoder.zeros_like();
        enc_grad.add_scaled(&ae_grads.encoder, lambda);
        if let Some(extra) = &critic_grads.encoder {
            enc_grad.add_scaled(extra, 1.0);
        }
        self.opt.encoder.step(&mut self.encoder, &enc_grad, 1.0);
        self.opt.decoder.step(&mut self.decoder, &ae_grads.decoder, lambda);

        self.soft_update_targets();
        self.updates += 1;
        report
    }

    pub fn soft_update_targets(&mut self) {
        let tau = self.config.tau;
        for i in 0..2 {
            self.targets[i].polyak_from(&self.critics[i], tau);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.log_alpha.is_finite()
            && [&self.actor, &self.critics[0], &self.critics[1], &self.targets[0], &self.targets[1]]
                .iter()
                .all(|m| m.is_finite())
            && [&self.encoder, &self.decoder, &self.embedder].iter().all(|m| m.is_finite())
    }
}

/// Bound on a layer-normalized scalar head given its final features:
/// `|Q| <= ||w||_2 * ||h||_2 + |b|`.
pub fn q_bound_at(head: &Mlp, features: &Array1<f64>) -> f64 {
    let last = head.layers.last().expect("nonempty net");
    let w_norm = last.w.row(0).mapv(|v| v * v).sum().sqrt();
    let h_norm = features.mapv(|v| v * v).sum().sqrt();
    w_norm * h_norm + last.b[0].abs()
}

/// Input-independent bound for a layer-normalized scalar head: the normalized
/// features have norm at most `sqrt(d)`, so the head output is bounded by
/// `||w||_2 * (max|gain| * sqrt(d) + ||offset||_2) + |b|`.
pub fn q_bound(head: &Mlp) -> Option<f64> {
    let norm = head.norm.as_ref()?;
    let last = head.layers.last()?;
    let d = norm.gain.len() as f64;
    let w_norm = last.w.row(0).mapv(|v| v * v).sum().sqrt();
    let g_max = norm.gain.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let b_norm = norm.bias.mapv(|v| v * v).sum().sqrt();
    Some(w_norm * (g_max * d.sqrt() + b_norm) + last.b[0].abs())
}

/// Forward pass through a scalar head returning each output with the
/// features that entered the final layer.
pub fn q_with_features(head: &Mlp, x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (q, cache) = head.forward_cached(x);
    (q.column(0).to_owned(), cache.last_features().clone())
}

#[cfg(test)]
mod tests;
