//! Joint training of the two conditional denoisers.

mod checkpoint;
mod log;

use mam_tape::{AdamW, Graph, ParamSet};
use ndarray::{Array3, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{alignment_loss, AlignMethod, AlignmentConfig};
use crate::data::Dataset;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{forward_noise, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::objective::{denoise_loss, energy_loss, total_loss, AlphaMode, AlphaParam, LossBreakdown, LossParts};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use log::TrainLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_x: f64,
    pub lr_y: f64,
    /// Learning rate of the alignment weight; defaults to `lr_x`.
    #[serde(default)]
    pub lr_alpha: Option<f64>,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub denoiser_x: DenoiserConfig,
    pub denoiser_y: DenoiserConfig,
    pub alignment: AlignmentConfig,
    pub alpha_mode: AlphaMode,
    /// Include the energy terms in the objective.
    #[serde(default = "yes")]
    pub use_energy: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Desk-scale defaults for modalities with `d_x` and `d_y` channels.
    pub fn desk(d_x: usize, d_y: usize) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr_x: 1e-4,
            lr_y: 1e-4,
            lr_alpha: None,
            weight_decay: 1e-4,
            ema_decay: 0.999,
            seed: 0,
            schedule: ScheduleConfig::default(),
            denoiser_x: DenoiserConfig::desk(d_x, d_y),
            denoiser_y: DenoiserConfig::desk(d_y, d_x),
            alignment: AlignmentConfig::default(),
            alpha_mode: AlphaMode::default(),
            use_energy: true,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [("lr_x", self.lr_x), ("lr_y", self.lr_y), ("lr_alpha", self.lr_alpha())] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.denoiser_x.validate()?;
        self.denoiser_y.validate()?;
        self.alignment.validate()?;
        let (dx, dy) = (&self.denoiser_x, &self.denoiser_y);
        if dx.d_in != dy.d_cond || dy.d_in != dx.d_cond {
            return bad(format!(
                "denoiser channel counts disagree: x ({} | {}) vs y ({} | {})",
                dx.d_in, dx.d_cond, dy.d_in, dy.d_cond
            ));
        }
        if dx.d_latent != dy.d_latent && self.alignment.method != AlignMethod::None {
            return bad("alignment needs equal latent widths".into());
        }
        for d in [dx, dy] {
            if d.num_steps != self.schedule.num_steps {
                return bad(format!(
                    "denoiser built for {} steps but schedule has {}",
                    d.num_steps, self.schedule.num_steps
                ));
            }
        }
        Ok(())
    }

    pub fn lr_alpha(&self) -> f64 {
        self.lr_alpha.unwrap_or(self.lr_x)
    }

    /// Sets the channel counts of both denoisers from the data.
    pub fn fit_dims(&mut self, d_x: usize, d_y: usize) {
        self.denoiser_x.d_in = d_x;
        self.denoiser_x.d_cond = d_y;
        self.denoiser_y.d_in = d_y;
        self.denoiser_y.d_cond = d_x;
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, elementwise.
pub fn ema_update(shadow: &mut ParamSet, live: &ParamSet, decay: f64) -> Result<()> {
    for (name, s) in shadow.iter_mut() {
        let l = live
            .get(name)
            .ok_or_else(|| Error::Shape(format!("EMA shadow '{name}' has no live counterpart")))?;
        if l.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "EMA shadow '{name}' is {:?} but live is {:?}",
                s.shape(),
                l.shape()
            )));
        }
        s.zip_mut_with(l, |a, &b| *a = decay * *a + (1.0 - decay) * b);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied(LossBreakdown),
    /// Non-finite loss or gradient; no parameters changed.
    Skipped(String),
}

/// Models, optimizers, EMA shadows and the RNG stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub model_x: Denoiser,
    pub model_y: Denoiser,
    pub alpha: AlphaParam,
    pub opt_x: AdamW,
    pub opt_y: AdamW,
    pub opt_alpha: AdamW,
    pub ema_x: ParamSet,
    pub ema_y: ParamSet,
    pub ema_alpha: f64,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub skipped: u64,
}

fn alpha_set(raw: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(AlphaParam::NAME, ndarray::arr0(raw).into_dyn());
    p
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let model_x = Denoiser::new(config.denoiser_x.clone(), seeds.next_u64())?;
        let model_y = Denoiser::new(config.denoiser_y.clone(), seeds.next_u64())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let alpha = AlphaParam::new(config.alpha_mode);
        Ok(Trainer {
            opt_x: AdamW::new(config.lr_x, config.weight_decay),
            opt_y: AdamW::new(config.lr_y, config.weight_decay),
            opt_alpha: AdamW::new(config.lr_alpha(), config.weight_decay),
            ema_x: model_x.params.clone(),
            ema_y: model_y.params.clone(),
            ema_alpha: alpha.raw,
            schedule,
            model_x,
            model_y,
            alpha,
            rng,
            step: 0,
            skipped: 0,
            config,
        })
    }

    fn learns_alpha(&self) -> bool {
        self.config.alignment.method != AlignMethod::None
    }

    /// One optimization step on a batch of clean pairs `x0 [B, L, d_X]`,
    /// `y0 [B, L, d_Y]`.
    pub fn train_step(&mut self, x0: &Array3<f64>, y0: &Array3<f64>) -> Result<StepOutcome> {
        let b = x0.dim().0;
        if y0.dim().0 != b || y0.dim().1 != x0.dim().1 {
            return Err(Error::Shape(format!(
                "batch shapes disagree: {:?} vs {:?}",
                x0.dim(),
                y0.dim()
            )));
        }
        let t: Vec<usize> = (0..b)
            .map(|_| self.rng.random_range(1..=self.schedule.num_steps))
            .collect();
        let noise_x = forward_noise(x0, &t, &self.schedule, self.rng.next_u64())?;
        let noise_y = forward_noise(y0, &t, &self.schedule, self.rng.next_u64())?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());

        let graph = Graph::new();
        let px = self.model_x.params.bind(&graph);
        let py = self.model_y.params.bind(&graph);
        let x0v = graph.constant(x0.clone().into_dyn());
        let y0v = graph.constant(y0.clone().into_dyn());
        let out_x = self.model_x.forward(
            &px,
            graph.constant(noise_x.x_t.into_dyn()),
            y0v,
            &t,
            Some(&mut dropout_rng),
        )?;
        let out_y = self.model_y.forward(
            &py,
            graph.constant(noise_y.x_t.into_dyn()),
            x0v,
            &t,
            Some(&mut dropout_rng),
        )?;
        let (energy_x, energy_y) = if self.config.use_energy {
            (energy_loss(x0v, out_x.x0_hat)?, energy_loss(y0v, out_y.x0_hat)?)
        } else {
            (graph.scalar(0.0), graph.scalar(0.0))
        };
        let parts = LossParts {
            denoise_x: denoise_loss(x0v, out_x.x0_hat)?,
            denoise_y: denoise_loss(y0v, out_y.x0_hat)?,
            energy_x,
            energy_y,
            align: alignment_loss(out_x.latent, out_y.latent, &self.config.alignment)?,
        };
        let raw = if self.learns_alpha() {
            graph.param(ndarray::arr0(self.alpha.raw).into_dyn())
        } else {
            graph.scalar(self.alpha.raw)
        };
        let (total, breakdown) = match total_loss(&parts, raw, self.alpha.mode) {
            Ok(v) => v,
            Err(Error::Numerical(msg)) => return Ok(self.skip(msg)),
            Err(e) => return Err(e),
        };
        let grads = graph.backward(total);
        let gx = px.grads(&grads);
        let gy = py.grads(&grads);
        let galpha = alpha_set(grads.wrt(raw).map(|g| g[IxDyn(&[])]).unwrap_or(0.0));
        if !(gx.all_finite() && gy.all_finite() && galpha.all_finite()) {
            return Ok(self.skip("non-finite gradient".into()));
        }

        self.opt_x.step(&mut self.model_x.params, &gx);
        self.opt_y.step(&mut self.model_y.params, &gy);
        if self.learns_alpha() {
            let mut a = alpha_set(self.alpha.raw);
            self.opt_alpha.step(&mut a, &galpha);
            self.alpha.raw = a.get(AlphaParam::NAME).unwrap()[IxDyn(&[])];
        }
        let decay = self.config.ema_decay;
        ema_update(&mut self.ema_x, &self.model_x.params, decay)?;
        ema_update(&mut self.ema_y, &self.model_y.params, decay)?;
        self.ema_alpha = decay * self.ema_alpha + (1.0 - decay) * self.alpha.raw;
        self.step += 1;
        Ok(StepOutcome::Applied(breakdown))
    }

    fn skip(&mut self, reason: String) -> StepOutcome {
        self.skipped += 1;
        ::log::warn!("step {} skipped: {reason}", self.step + 1);
        StepOutcome::Skipped(reason)
    }

    /// Batch index lists for one epoch: shuffled, dropping the last partial
    /// batch unless the dataset is smaller than one batch.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let b = self.config.batch_size;
        if n < b {
            return if n == 0 { Vec::new() } else { vec![order] };
        }
        order.chunks_exact(b).map(|c| c.to_vec()).collect()
    }

    /// Runs the configured epochs (or until `max_steps`) over normalized
    /// training pairs. Returns the breakdown of every applied step.
    pub fn fit(&mut self, train: &Dataset, mut log: Option<&mut TrainLog>) -> Result<Vec<LossBreakdown>> {
        if train.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let mut history = Vec::new();
        'outer: for _ in 0..self.config.epochs {
            for batch in self.epoch_batches(train.len()) {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    break 'outer;
                }
                let (x, y) = train.stack(&batch);
                if let StepOutcome::Applied(b) = self.train_step(&x, &y)? {
                    if let Some(l) = log.as_deref_mut() {
                        l.append(self.step, &b)?;
                    }
                    history.push(b);
                }
            }
        }
        Ok(history)
    }

    /// Denoisers carrying the EMA weights, used for all evaluation.
    pub fn ema_models(&self) -> Result<(Denoiser, Denoiser)> {
        Ok((
            Denoiser::from_params(self.model_x.config.clone(), self.ema_x.clone())?,
            Denoiser::from_params(self.model_y.config.clone(), self.ema_y.clone())?,
        ))
    }
}
