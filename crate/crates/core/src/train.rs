//! Single-noise-level denoising score matching training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsm::loss_param_gradient;
use crate::error::{Error, Result};
use crate::model::{Architecture, EnergyModel};
use crate::norm::{compute_norm_stats, NormMethod};
use crate::table::VoxelTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Noise standard deviation in normalized units.
    pub sigma: f64,
    pub epochs: usize,
    /// Clamped to the table size when larger.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub norm: NormMethod,
    /// Pair every noise draw `ε` with `−ε` on the same clean row. The
    /// objective is unchanged in expectation; the O(1/σ) part of the
    /// gradient noise cancels within each pair.
    pub antithetic: bool,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            epochs: 20,
            batch_size: 512,
            learning_rate: 3e-3,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            norm: NormMethod::Robust,
            antithetic: true,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Config(
                "Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into(),
            ));
        }
        self.architecture.validate()
    }
}

/// Learning-rate schedule over the optimizer steps of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let x = step as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
    /// Wall-clock duration; not part of any digest.
    #[serde(skip)]
    pub seconds: f64,
    /// Digest of the generator position after training.
    pub rng_digest: String,
}

/// Draws `ε ~ N(0, σ²I)` for every entry of `clean`; returns `(u + ε, ε)`.
pub fn perturb<R: Rng + ?Sized>(
    clean: &[f64],
    sigma: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let noise: Vec<f64> = clean
        .iter()
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect();
    let noisy = clean.iter().zip(&noise).map(|(u, e)| u + e).collect();
    Ok((noisy, noise))
}

/// Adaptive moment estimation over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Fits a fresh model to `table`. Initialization, shuffling and noise all
/// come from one generator seeded with `config.seed`.
pub fn train(table: &VoxelTable, config: &TrainConfig) -> Result<(EnergyModel, TrainTrace)> {
    train_with_progress(table, config, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after each epoch.
pub fn train_with_progress(
    table: &VoxelTable,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(EnergyModel, TrainTrace)> {
    config.validate()?;
    let started = Instant::now();
    let d = table.d();
    let rows = table.masked_indices();
    let data = table.select(&rows)?;
    let n = data.n();
    let stats = compute_norm_stats(&data, config.norm)?;
    let normalized = stats.normalize_table(&data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = EnergyModel::init(d, &config.architecture, config.seed, &mut rng)?;
    model.meta.norm = stats;
    model.meta.sigma_train = config.sigma;

    let mut params = model.params();
    let mut adam = Adam::new(
        params.len(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    // Clean rows per optimizer step; each contributes two rows when
    // antithetic pairs are on.
    let batch = if config.antithetic {
        (config.batch_size / 2).max(1)
    } else {
        config.batch_size
    }
    .min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut clean = Vec::with_capacity(batch * d);
    let mut reference: Option<f64> = None;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let total_steps = config.epochs * n.div_ceil(batch);
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, idx) in order.chunks(batch).enumerate() {
            clean.clear();
            for &i in idx {
                clean.extend_from_slice(normalized.row(i));
            }
            let (_, mut noise) = perturb(&clean, config.sigma, &mut rng)?;
            if config.antithetic {
                clean.extend_from_within(..);
                let mirrored: Vec<f64> = noise.iter().map(|e| -e).collect();
                noise.extend(mirrored);
            }
            let out =
                loss_param_gradient(&model, &clean, &noise, config.sigma).map_err(|e| match e {
                    Error::Numeric { .. } => Error::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            let limit = *reference.get_or_insert(out.loss) * 10.0;
            if !out.loss.is_finite() || out.loss > limit || out.grad.iter().any(|g| !g.is_finite())
            {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: out.loss,
                });
            }
            adam.set_learning_rate(
                config.learning_rate * config.schedule.factor(global_step, total_steps),
            );
            global_step += 1;
            adam.update(&mut params, &out.grad);
            model.set_params(&params)?;
            sum += out.loss * idx.len() as f64;
            count += idx.len();
        }
        let mean = sum / count as f64;
        progress(epoch, mean);
        epoch_loss.push(mean);
    }

    let mut hasher = Sha256::new();
    hasher.update(config.seed.to_le_bytes());
    hasher.update(rng.get_word_pos().to_le_bytes());
    let digest = hasher.finalize();
    let trace = TrainTrace {
        epoch_loss,
        seconds: started.elapsed().as_secs_f64(),
        rng_digest: crate::io::hex(&digest[..16]),
    };
    Ok((model, trace))
}
