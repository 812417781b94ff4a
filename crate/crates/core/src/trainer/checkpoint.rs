//! Checkpoint directory: `manifest.json`, `arrays.bin` (see [`crate::store`])
//! and `rng_state`.

use std::fs;
use std::path::Path;

use mam_tape::{AdamW, ParamSet};
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::data::PairScaler;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::objective::AlphaParam;
use crate::store::{self, SCHEMA_VERSION};

const RNG_BLOB_LEN: usize = 32 + 8 + 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub step: u64,
    pub skipped_steps: u64,
    pub config: TrainConfig,
    pub optimizer_steps: [u64; 3],
    /// Normalization fitted on the training split, if any.
    #[serde(default)]
    pub scaler: Option<PairScaler>,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

fn prefixed(out: &mut ParamSet, prefix: &str, set: &ParamSet) {
    for (name, t) in set.iter() {
        out.insert(format!("{prefix}{name}"), t.clone());
    }
}

fn take_prefixed(all: &ParamSet, prefix: &str) -> ParamSet {
    all.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

fn scalar_set(raw: f64) -> ParamSet {
    [(AlphaParam::NAME.to_string(), ndarray::arr0(raw).into_dyn())]
        .into_iter()
        .collect()
}

fn rng_blob(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(RNG_BLOB_LEN);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_blob(bytes: &[u8]) -> Option<ChaCha8Rng> {
    if bytes.len() != RNG_BLOB_LEN {
        return None;
    }
    let seed: [u8; 32] = bytes[..32].try_into().ok()?;
    let stream = u64::from_le_bytes(bytes[32..40].try_into().ok()?);
    let word_pos = u128::from_le_bytes(bytes[40..56].try_into().ok()?);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Some(rng)
}

pub fn save_checkpoint(
    dir: &Path,
    trainer: &Trainer,
    scaler: Option<&PairScaler>,
    metrics: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = ParamSet::new();
    prefixed(&mut arrays, "theta.", &trainer.model_x.params);
    prefixed(&mut arrays, "phi.", &trainer.model_y.params);
    prefixed(&mut arrays, "ema.theta.", &trainer.ema_x);
    prefixed(&mut arrays, "ema.phi.", &trainer.ema_y);
    prefixed(&mut arrays, "", &scalar_set(trainer.alpha.raw));
    prefixed(&mut arrays, "ema.", &scalar_set(trainer.ema_alpha));
    let opts = [
        ("opt.theta", &trainer.opt_x),
        ("opt.phi", &trainer.opt_y),
        ("opt.alpha", &trainer.opt_alpha),
    ];
    for (prefix, opt) in opts {
        let (_, m, v) = opt.state();
        prefixed(&mut arrays, &format!("{prefix}.m."), m);
        prefixed(&mut arrays, &format!("{prefix}.v."), v);
    }
    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        step: trainer.step,
        skipped_steps: trainer.skipped,
        config: trainer.config.clone(),
        optimizer_steps: [
            trainer.opt_x.steps_taken(),
            trainer.opt_y.steps_taken(),
            trainer.opt_alpha.steps_taken(),
        ],
        scaler: scaler.cloned(),
        metrics,
    };
    store::write_arrays(&dir.join("arrays.bin"), &arrays)?;
    fs::write(dir.join("rng_state"), rng_blob(&trainer.rng))?;
    // manifest last: its presence marks a complete checkpoint
    store::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Trainer, CheckpointManifest)> {
    let manifest: CheckpointManifest = store::read_manifest(&dir.join("manifest.json"))?;
    let arrays_path = dir.join("arrays.bin");
    let arrays = store::read_arrays(&arrays_path)?;
    let corrupt = |path: &Path, reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let rng_path = dir.join("rng_state");
    let rng = rng_from_blob(&fs::read(&rng_path)?)
        .ok_or_else(|| corrupt(&rng_path, "rng state has the wrong length".into()))?;
    let config = manifest.config.clone();
    config.validate()?;
    let scalar = |name: &str| -> Result<f64> {
        arrays
            .get(name)
            .filter(|t| t.ndim() == 0)
            .map(|t| t[IxDyn(&[])])
            .ok_or_else(|| corrupt(&arrays_path, format!("missing scalar '{name}'")))
    };
    let model = |prefix: &str, cfg| {
        Denoiser::from_params(cfg, take_prefixed(&arrays, prefix))
            .map_err(|e| corrupt(&arrays_path, format!("{prefix}: {e}")))
    };
    let model_x = model("theta.", config.denoiser_x.clone())?;
    let model_y = model("phi.", config.denoiser_y.clone())?;
    let ema_x = model("ema.theta.", config.denoiser_x.clone())?.params;
    let ema_y = model("ema.phi.", config.denoiser_y.clone())?.params;
    let alpha = AlphaParam {
        raw: scalar(AlphaParam::NAME)?,
        mode: config.alpha_mode,
    };
    let ema_alpha = scalar(&format!("ema.{}", AlphaParam::NAME))?;
    let optimizer = |prefix: &str, lr: f64, step: u64| {
        let mut opt = AdamW::new(lr, config.weight_decay);
        opt.restore_state(
            step,
            take_prefixed(&arrays, &format!("{prefix}.m.")),
            take_prefixed(&arrays, &format!("{prefix}.v.")),
        );
        opt
    };
    let [sx, sy, sa] = manifest.optimizer_steps;
    let trainer = Trainer {
        schedule: config.schedule.build()?,
        opt_x: optimizer("opt.theta", config.lr_x, sx),
        opt_y: optimizer("opt.phi", config.lr_y, sy),
        opt_alpha: optimizer("opt.alpha", config.lr_alpha(), sa),
        model_x,
        model_y,
        ema_x,
        ema_y,
        alpha,
        ema_alpha,
        rng,
        step: manifest.step,
        skipped: manifest.skipped_steps,
        config,
    };
    Ok((trainer, manifest))
}
