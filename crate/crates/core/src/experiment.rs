//! Run configuration, per-fold training and evaluation, and ablation variants.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::align::AlignMethod;
use crate::data::{
    generate_synthetic, ingest_csv, make_folds, Dataset, FoldSpec, ModalitySchema, PairScaler, SyntheticSystem,
};
use crate::denoiser::Denoiser;
use crate::diffusion::{ancestral_sample, forward_noise};
use crate::error::{Error, Result};
use crate::metrics::{
    fid, flatten_windows, generation_mse, latent_correlation, predictive_score, probe, MetricsReport, PredictorConfig,
    ProbeKind,
};
use crate::objective::LossBreakdown;
use crate::trainer::{save_checkpoint, TrainConfig, TrainLog, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A named synthetic preset generated on the fly.
    Synthetic {
        system: String,
        n_sequences: usize,
        length: usize,
        seed: u64,
    },
    /// A dataset directory written by `Dataset::save`.
    Directory { path: PathBuf },
    /// A canonical-header CSV.
    Csv {
        path: PathBuf,
        schema_x: String,
        schema_y: String,
        window_len: usize,
    },
}

impl DataSource {
    pub fn synthetic(system: &str) -> Self {
        DataSource::Synthetic {
            system: system.to_string(),
            n_sequences: 192,
            length: 64,
            seed: 0,
        }
    }

    /// Raw (unnormalized) pairs.
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                system,
                n_sequences,
                length,
                seed,
            } => {
                let sys = SyntheticSystem::preset(system)?;
                Ok(generate_synthetic(&sys, *n_sequences, *length, *seed)?.dataset)
            }
            DataSource::Directory { path } => Dataset::load(path),
            DataSource::Csv {
                path,
                schema_x,
                schema_y,
                window_len,
            } => {
                let sx = ModalitySchema::by_name(schema_x)?;
                let sy = ModalitySchema::by_name(schema_y)?;
                let (pairs, report) = ingest_csv(path, &sx, &sy, *window_len)?;
                log::info!("ingested {}: {report:?}", path.display());
                Dataset::new(pairs)
            }
        }
    }

    pub fn modality_pair(&self) -> String {
        match self {
            DataSource::Csv { schema_x, schema_y, .. } => format!("{schema_x}-{schema_y}"),
            _ => "x-y".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub k_subjects: usize,
    pub k_profiles: usize,
    pub n_folds: usize,
    pub seed: u64,
    /// Run only the first this many folds.
    pub limit: Option<usize>,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            k_subjects: 1,
            k_profiles: 0,
            n_folds: 4,
            seed: 0,
            limit: None,
        }
    }
}

impl FoldConfig {
    pub fn folds(&self, data: &Dataset) -> Result<Vec<FoldSpec>> {
        let mut folds = make_folds(data, self.k_subjects, self.k_profiles, self.n_folds, self.seed)?;
        if let Some(n) = self.limit {
            folds.truncate(n);
        }
        Ok(folds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sample_seed: u64,
    pub probe_seed: u64,
    /// Compute the train-on-generated forecasting score (slow).
    pub predictive: bool,
    pub predictor: PredictorConfig,
    /// Generate at most this many sequences per split (first in order).
    /// Latent metrics (probes, CKA) always use the whole split.
    pub max_sequences: Option<usize>,
    /// Also report metrics on the training split.
    pub include_train: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sample_seed: 0,
            probe_seed: 0,
            predictive: false,
            predictor: PredictorConfig::default(),
            max_sequences: Some(256),
            include_train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub data: DataSource,
    pub train: TrainConfig,
    #[serde(default)]
    pub folds: FoldConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk_synthetic(system: &str) -> Result<Self> {
        let sys = SyntheticSystem::preset(system)?;
        Ok(RunConfig {
            name: "desk".into(),
            data: DataSource::synthetic(system),
            train: TrainConfig::desk(sys.d_x, sys.d_y),
            folds: FoldConfig::default(),
            eval: EvalConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}

/// Short name for a training configuration: the alignment method, suffixed
/// with the loss terms that are switched off.
pub fn variant_label(cfg: &TrainConfig) -> String {
    let mut label = cfg.alignment.method.name().to_string();
    if cfg.alignment.method == AlignMethod::Llma {
        if !cfg.alignment.use_contrast {
            label.push_str("-no-contrast");
        }
        if !cfg.alignment.use_cov {
            label.push_str("-no-cov");
        }
    }
    if !cfg.use_energy {
        label.push_str("-no-energy");
    }
    label
}

/// One ablation row: which of the three loss terms are active.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub label: String,
    pub contrast: bool,
    pub cov: bool,
    pub energy: bool,
    pub config: TrainConfig,
}

/// Full LLMA and the three single-term removals, sharing every other setting
/// (seeds included) with `base`.
pub fn ablation_variants(base: &TrainConfig) -> Vec<AblationVariant> {
    [
        (true, true, true),
        (false, true, true),
        (true, false, true),
        (true, true, false),
    ]
    .into_iter()
    .map(|(contrast, cov, energy)| {
        let mut config = base.clone();
        config.alignment.method = AlignMethod::Llma;
        config.alignment.use_contrast = contrast;
        config.alignment.use_cov = cov;
        config.use_energy = energy;
        AblationVariant {
            label: variant_label(&config),
            contrast,
            cov,
            energy,
            config,
        }
    })
    .collect()
}

/// What one split evaluation produced besides the metric rows.
#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub real_x: Array3<f64>,
    pub real_y: Array3<f64>,
    /// X generated from Y, and Y generated from X, for the first
    /// `max_sequences` of the split.
    pub gen_x: Array3<f64>,
    pub gen_y: Array3<f64>,
    /// Encoder outputs at t = 1 on the whole split, mean-pooled over each
    /// sequence.
    pub latent_x: Array2<f64>,
    pub latent_y: Array2<f64>,
    pub labels: Vec<usize>,
}

pub struct SplitContext<'a> {
    pub variant: &'a str,
    pub modality_pair: &'a str,
    pub fold_index: usize,
    pub split: &'a str,
}

fn head(data: &Dataset, max: Option<usize>) -> Dataset {
    match max {
        Some(m) if m < data.len() => data.subset(&(0..m).collect::<Vec<_>>()),
        _ => data.clone(),
    }
}

/// Encoder output at t = 1 for real data noised to that step.
fn final_step_latent(model: &Denoiser, real: &Array3<f64>, trainer: &Trainer, seed: u64) -> Result<Array3<f64>> {
    let t = vec![1; real.dim().0];
    let noisy = forward_noise(real, &t, &trainer.schedule, seed)?;
    model.encode(&noisy.x_t, &t)
}

/// Sequence-pooled final-step encoder latents of both models (EMA weights)
/// on normalized `data`: `(z_x, z_y)`, each `[N, d_model]`.
pub fn pooled_latents(trainer: &Trainer, data: &Dataset, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let (model_x, model_y) = trainer.ema_models()?;
    let (real_x, real_y) = data.stack_all();
    let zx = final_step_latent(&model_x, &real_x, trainer, seed.wrapping_add(2))?;
    let zy = final_step_latent(&model_y, &real_y, trainer, seed.wrapping_add(3))?;
    Ok((
        zx.mean_axis(Axis(1)).expect("non-empty sequences"),
        zy.mean_axis(Axis(1)).expect("non-empty sequences"),
    ))
}

/// `[N, L, d] -> [N * floor(L / c), d]`, averaging each window of `c` steps.
pub fn window_means(z: &Array3<f64>, c: usize) -> Array2<f64> {
    let (n, l, d) = z.dim();
    let m = l / c.max(1);
    let mut out = Array2::zeros((n * m, d));
    for i in 0..n {
        for w in 0..m {
            let win = z.slice(s![i, w * c..(w + 1) * c, ..]);
            out.row_mut(i * m + w).assign(&win.mean_axis(Axis(0)).unwrap());
        }
    }
    out
}

fn optional_probe(z: &Array2<f64>, labels: &[usize], kind: ProbeKind, seed: u64) -> Result<Option<f64>> {
    match probe(z, labels, kind, seed) {
        Ok(acc) => Ok(Some(acc)),
        Err(Error::Data(msg)) => {
            log::warn!("probe skipped: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Evaluates the EMA weights of `trainer` on normalized `data` in both
/// generation directions. `reference` is the normalized training split, used
/// as the train-on-real baseline of the forecasting score.
pub fn evaluate_split(
    trainer: &Trainer,
    data: &Dataset,
    reference: Option<&Dataset>,
    ctx: &SplitContext<'_>,
    cfg: &EvalConfig,
) -> Result<(Vec<MetricsReport>, EvalArtifacts)> {
    if data.is_empty() {
        return Err(Error::Data(format!("empty {} split", ctx.split)));
    }
    let (model_x, model_y) = trainer.ema_models()?;
    let (all_x, all_y) = data.stack_all();
    let zx = final_step_latent(&model_x, &all_x, trainer, cfg.sample_seed.wrapping_add(2))?;
    let zy = final_step_latent(&model_y, &all_y, trainer, cfg.sample_seed.wrapping_add(3))?;
    let latent_x = zx.mean_axis(Axis(1)).expect("non-empty sequences");
    let latent_y = zy.mean_axis(Axis(1)).expect("non-empty sequences");
    let labels = data.labels();

    let (real_x, real_y) = head(data, cfg.max_sequences).stack_all();
    let gen_x = ancestral_sample(&model_x, &real_y, &trainer.schedule, cfg.sample_seed)?;
    let gen_y = ancestral_sample(&model_y, &real_x, &trainer.schedule, cfg.sample_seed.wrapping_add(1))?;
    let c = trainer.config.alignment.window_len.min(zx.dim().1);
    let cka = match latent_correlation(&window_means(&zx, c), &window_means(&zy, c)) {
        Ok(v) => Some(v),
        Err(Error::Numerical(msg)) => {
            log::warn!("latent correlation skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let reference = reference.map(|r| head(r, cfg.max_sequences).stack_all());

    let mut reports = Vec::with_capacity(2);
    let directions = [
        ("X|Y", &gen_x, &real_x, &latent_x, reference.as_ref().map(|r| &r.0)),
        ("Y|X", &gen_y, &real_y, &latent_y, reference.as_ref().map(|r| &r.1)),
    ];
    for (direction, generated, real, latent, reference) in directions {
        let (predictive, predictive_ratio) = if cfg.predictive {
            let score = predictive_score(generated, real, &cfg.predictor)?;
            let ratio = match reference {
                Some(r) => Some(score / predictive_score(r, real, &cfg.predictor)?),
                None => None,
            };
            (Some(score), ratio)
        } else {
            (None, None)
        };
        let report = MetricsReport {
            variant: ctx.variant.to_string(),
            modality_pair: ctx.modality_pair.to_string(),
            direction: direction.to_string(),
            fold_index: ctx.fold_index,
            split: ctx.split.to_string(),
            mse: generation_mse(generated, real)?,
            fid: fid(&flatten_windows(real), &flatten_windows(generated))?,
            predictive,
            predictive_ratio,
            probe_linear: optional_probe(latent, &labels, ProbeKind::Linear, cfg.probe_seed)?,
            probe_nonlinear: optional_probe(latent, &labels, ProbeKind::Nonlinear, cfg.probe_seed)?,
            latent_correlation: cka,
        };
        report.validate()?;
        reports.push(report);
    }
    let artifacts = EvalArtifacts {
        real_x,
        real_y,
        gen_x,
        gen_y,
        latent_x,
        latent_y,
        labels,
    };
    Ok((reports, artifacts))
}

/// One fold's normalized splits and the train-split scaler behind them.
pub struct FoldData {
    pub train: Dataset,
    pub test: Dataset,
    pub scaler: PairScaler,
}

impl FoldData {
    /// Splits `raw` and fits the scaler on the training side only.
    pub fn prepare(raw: &Dataset, fold: &FoldSpec) -> Result<FoldData> {
        let (train_idx, test_idx) = fold.checked_split(raw)?;
        let train_raw = raw.subset(&train_idx);
        let scaler = PairScaler::fit(&train_raw)?;
        Ok(Self::with_scaler(raw, &train_idx, &test_idx, scaler))
    }

    /// Splits `raw` and applies a previously frozen scaler.
    pub fn with_frozen_scaler(raw: &Dataset, fold: &FoldSpec, scaler: PairScaler) -> Result<FoldData> {
        let (train_idx, test_idx) = fold.checked_split(raw)?;
        Ok(Self::with_scaler(raw, &train_idx, &test_idx, scaler))
    }

    fn with_scaler(raw: &Dataset, train_idx: &[usize], test_idx: &[usize], scaler: PairScaler) -> FoldData {
        FoldData {
            train: scaler.apply(&raw.subset(train_idx)),
            test: scaler.apply(&raw.subset(test_idx)),
            scaler,
        }
    }
}

/// Fold bookkeeping stored in the checkpoint manifest's `metrics` field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: FoldSpec,
    pub variant: String,
    pub modality_pair: String,
}

/// Trains (or, given `resume`, continues training) on the fold's training
/// split. With `out`, appends to `train_log.csv` and writes `checkpoint/`.
pub fn train_fold(
    cfg: &RunConfig,
    data: &FoldData,
    fold: &FoldSpec,
    out: Option<&Path>,
    resume: Option<Trainer>,
) -> Result<(Trainer, Vec<LossBreakdown>)> {
    let mut trainer = match resume {
        Some(t) => t,
        None => {
            let mut train_cfg = cfg.train.clone();
            let (_, dx, dy) = data.train.dims();
            train_cfg.fit_dims(dx, dy);
            Trainer::new(train_cfg)?
        }
    };
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(TrainLog::open(&dir.join("train_log.csv"))?)
        }
        None => None,
    };
    let history = trainer.fit(&data.train, log.as_mut())?;
    if trainer.step == 0 {
        return Err(Error::Numerical("every training step was skipped".into()));
    }
    if let Some(dir) = out {
        let record = FoldRecord {
            fold: fold.clone(),
            variant: variant_label(&trainer.config),
            modality_pair: cfg.data.modality_pair(),
        };
        save_checkpoint(
            &dir.join("checkpoint"),
            &trainer,
            Some(&data.scaler),
            serde_json::to_value(record)?,
        )?;
    }
    Ok((trainer, history))
}

/// Test-split metrics (plus training-split metrics when configured) and the
/// test-split artifacts.
pub fn evaluate_fold(
    trainer: &Trainer,
    data: &FoldData,
    fold_index: usize,
    modality_pair: &str,
    cfg: &EvalConfig,
) -> Result<(Vec<MetricsReport>, EvalArtifacts)> {
    let variant = variant_label(&trainer.config);
    let ctx = |split| SplitContext {
        variant: &variant,
        modality_pair,
        fold_index,
        split,
    };
    let (mut reports, artifacts) = evaluate_split(trainer, &data.test, Some(&data.train), &ctx("test"), cfg)?;
    if cfg.include_train {
        let (train_reports, _) = evaluate_split(trainer, &data.train, Some(&data.train), &ctx("train"), cfg)?;
        reports.extend(train_reports);
    }
    Ok((reports, artifacts))
}

pub struct FoldOutcome {
    pub trainer: Trainer,
    pub scaler: PairScaler,
    pub history: Vec<LossBreakdown>,
    pub reports: Vec<MetricsReport>,
    /// Held-out split artifacts for plotting.
    pub test_artifacts: EvalArtifacts,
}

/// Prepares, trains and evaluates one fold.
pub fn run_fold(cfg: &RunConfig, raw: &Dataset, fold: &FoldSpec, out: Option<&Path>) -> Result<FoldOutcome> {
    let data = FoldData::prepare(raw, fold)?;
    let (trainer, history) = train_fold(cfg, &data, fold, out, None)?;
    let (reports, test_artifacts) =
        evaluate_fold(&trainer, &data, fold.fold_index, &cfg.data.modality_pair(), &cfg.eval)?;
    Ok(FoldOutcome {
        trainer,
        scaler: data.scaler,
        history,
        reports,
        test_artifacts,
    })
}
