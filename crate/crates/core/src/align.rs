//! Latent alignment objectives between the two modality encoders.
//!
//! Window-level losses take a [`LatentTrajectory`]; the baseline losses take
//! pooled window embeddings `[N, d]` so every method sees the same inputs.

use mam_tape::{Tensor, Var};
use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::denoiser::{extract_windows, LatentTrajectory};
use crate::error::{shape_err, Error, Result};

const NORM_EPS: f64 = 1e-8;
const STD_EPS: f64 = 1e-8;
const MASK: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    #[default]
    Llma,
    Simclr,
    Barlow,
    Vicreg,
    #[serde(alias = "mse")]
    LatentMse,
    None,
}

impl AlignMethod {
    pub const ALL: [AlignMethod; 6] = [
        AlignMethod::Llma,
        AlignMethod::Simclr,
        AlignMethod::Barlow,
        AlignMethod::Vicreg,
        AlignMethod::LatentMse,
        AlignMethod::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlignMethod::Llma => "llma",
            AlignMethod::Simclr => "simclr",
            AlignMethod::Barlow => "barlow",
            AlignMethod::Vicreg => "vicreg",
            AlignMethod::LatentMse => "latent_mse",
            AlignMethod::None => "none",
        }
    }
}

impl std::str::FromStr for AlignMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llma" => Ok(AlignMethod::Llma),
            "simclr" => Ok(AlignMethod::Simclr),
            "barlow" => Ok(AlignMethod::Barlow),
            "vicreg" => Ok(AlignMethod::Vicreg),
            "mse" | "latent_mse" => Ok(AlignMethod::LatentMse),
            "none" => Ok(AlignMethod::None),
            other => Err(Error::Config(format!("unknown alignment method '{other}'"))),
        }
    }
}

impl std::fmt::Display for AlignMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub method: AlignMethod,
    pub window_len: usize,
    pub temperature: f64,
    pub barlow_lambda: f64,
    /// `(inv, var, cov)` weights.
    pub vicreg_weights: [f64; 3],
    pub vicreg_gamma: f64,
    /// Ablation switches for the two LLMA terms.
    pub use_contrast: bool,
    pub use_cov: bool,
    /// Average the contrastive loss over X and Y anchors.
    pub symmetrize: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            method: AlignMethod::Llma,
            window_len: 8,
            temperature: 0.1,
            barlow_lambda: 5e-3,
            vicreg_weights: [25.0, 25.0, 1.0],
            vicreg_gamma: 1.0,
            use_contrast: true,
            use_cov: true,
            symmetrize: false,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be >= 1".into()));
        }
        let weights = [self.barlow_lambda, self.vicreg_gamma]
            .into_iter()
            .chain(self.vicreg_weights);
        for w in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "alignment weights must be finite and >= 0, got {w}"
                )));
            }
        }
        if self.method == AlignMethod::Llma && self.use_cov && self.window_len < 2 {
            return Err(Error::Config("covariance alignment needs window_len >= 2".into()));
        }
        Ok(())
    }
}

fn eye(n: usize) -> Tensor {
    Array2::<f64>::eye(n).into_dyn()
}

fn check_pair(zx: &LatentTrajectory<'_>, zy: &LatentTrajectory<'_>) -> Result<()> {
    if zx.z.shape() != zy.z.shape() || zx.window_len != zy.window_len {
        return Err(shape_err(format!(
            "latent trajectories differ: {:?}/C={} vs {:?}/C={}",
            zx.z.shape(),
            zx.window_len,
            zy.z.shape(),
            zy.window_len
        )));
    }
    Ok(())
}

fn check_pooled(zx: Var<'_>, zy: Var<'_>, min_rows: usize) -> Result<(usize, usize)> {
    let (sx, sy) = (zx.shape(), zy.shape());
    if sx.len() != 2 || sx != sy {
        return Err(shape_err(format!(
            "pooled embeddings must be matching [N, d], got {sx:?} and {sy:?}"
        )));
    }
    if sx[0] < min_rows {
        return Err(shape_err(format!(
            "need at least {min_rows} pooled rows, got {}",
            sx[0]
        )));
    }
    Ok((sx[0], sx[1]))
}

/// Row-wise `p / (‖p‖ + ε)`.
pub fn l2_normalize(p: Var<'_>) -> Var<'_> {
    // the tiny shift keeps the sqrt derivative finite at an all-zero row
    let norm = p.square().sum_axis(1, true).shift(1e-300).sqrt().shift(NORM_EPS);
    p / norm
}

/// Mean of the diagonal of a square `[n, n]` matrix.
fn diag_mean(m: Var<'_>) -> Var<'_> {
    let n = m.shape()[0];
    (m * m.graph().constant(eye(n))).sum().scale(1.0 / n as f64)
}

/// Window-level InfoNCE with X windows as anchors and every Y window in the
/// batch as a candidate.
pub fn contrastive_align<'g>(
    zx: &LatentTrajectory<'g>,
    zy: &LatentTrajectory<'g>,
    tau: f64,
    symmetrize: bool,
) -> Result<Var<'g>> {
    check_pair(zx, zy)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let ux = l2_normalize(zx.pooled());
    let uy = l2_normalize(zy.pooled());
    let logits = ux.matmul_t(uy).scale(1.0 / tau);
    let forward = -diag_mean(logits.log_softmax());
    if !symmetrize {
        return Ok(forward);
    }
    let backward = -diag_mean(logits.transpose_last().log_softmax());
    Ok((forward + backward).scale(0.5))
}

/// Per-window sample covariance `[B * M, d, d]` with `1/(C-1)` normalization.
pub fn window_covariance<'g>(z: &LatentTrajectory<'g>) -> Result<Var<'g>> {
    let c = z.window_len;
    if c < 2 {
        return Err(Error::Config(format!(
            "covariance needs at least 2 steps per window, got {c}"
        )));
    }
    let w = z.windows().reshape(&[z.batch() * z.num_windows, c, z.dim()]);
    let centered = w - w.mean_axis(1, true);
    Ok(centered.bmm(centered, true, false).scale(1.0 / (c - 1) as f64))
}

pub fn covariance_align<'g>(zx: &LatentTrajectory<'g>, zy: &LatentTrajectory<'g>) -> Result<Var<'g>> {
    check_pair(zx, zy)?;
    let cx = window_covariance(zx)?;
    let cy = window_covariance(zy)?;
    Ok((cx - cy).square().mean())
}

pub fn llma<'g>(zx: &LatentTrajectory<'g>, zy: &LatentTrajectory<'g>, config: &AlignmentConfig) -> Result<Var<'g>> {
    let mut total = zx.z.graph().scalar(0.0);
    if config.use_contrast {
        total = total + contrastive_align(zx, zy, config.temperature, config.symmetrize)?;
    }
    if config.use_cov {
        total = total + covariance_align(zx, zy)?;
    }
    Ok(total)
}

/// NT-Xent over the `2N` embeddings `[ux; uy]`, positives at `(i + N) mod 2N`.
pub fn simclr_align<'g>(zx: Var<'g>, zy: Var<'g>, tau: f64) -> Result<Var<'g>> {
    let (n, _) = check_pooled(zx, zy, 1)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if n < 2 {
        log::warn!("NT-Xent with a single pair has no cross-pair negatives");
    }
    let g = zx.graph();
    let u = g.concat(&[l2_normalize(zx), l2_normalize(zy)], 0);
    let two_n = 2 * n;
    let mask = eye(two_n) * MASK;
    let positives = Tensor::from_shape_fn(IxDyn(&[two_n, two_n]), |ix| {
        if ix[1] == (ix[0] + n) % two_n {
            1.0
        } else {
            0.0
        }
    });
    let logits = u.matmul_t(u).scale(1.0 / tau) + g.constant(mask);
    let picked = logits.log_softmax() * g.constant(positives);
    Ok(-picked.sum().scale(1.0 / two_n as f64))
}

/// Per-column `(z - mean) / sqrt(var + ε)` with population variance.
fn standardize(z: Var<'_>) -> Var<'_> {
    let centered = z - z.mean_axis(0, true);
    let var = centered.square().mean_axis(0, true);
    centered / var.shift(STD_EPS).sqrt()
}

pub fn barlow_align<'g>(zx: Var<'g>, zy: Var<'g>, lam: f64) -> Result<Var<'g>> {
    let (n, d) = check_pooled(zx, zy, 2)?;
    let g = zx.graph();
    let cross = standardize(zx)
        .transpose_last()
        .matmul(standardize(zy))
        .scale(1.0 / n as f64);
    let id = g.constant(eye(d));
    let off = g.constant(eye(d).mapv(|v| 1.0 - v));
    let on_diag = ((id - cross) * id).square().sum();
    let off_diag = (cross * off).square().sum();
    Ok(on_diag + off_diag.scale(lam))
}

/// Variance hinge and off-diagonal covariance penalty for one batch.
fn vicreg_single<'g>(z: Var<'g>, gamma: f64) -> (Var<'g>, Var<'g>) {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let centered = z - z.mean_axis(0, true);
    let var = centered.square().mean_axis(0, false);
    let std = var.shift(STD_EPS).sqrt();
    let hinge = (-std).shift(gamma).relu().square().sum();
    let cov = centered.transpose_last().matmul(centered).scale(1.0 / n as f64);
    let off = z.graph().constant(eye(d).mapv(|v| 1.0 - v));
    (hinge, (cov * off).square().sum())
}

pub fn vicreg_align<'g>(zx: Var<'g>, zy: Var<'g>, weights: [f64; 3], gamma_v: f64) -> Result<Var<'g>> {
    check_pooled(zx, zy, 2)?;
    let inv = (zx - zy).square().mean();
    let (vx, cx) = vicreg_single(zx, gamma_v);
    let (vy, cy) = vicreg_single(zy, gamma_v);
    Ok(inv.scale(weights[0]) + (vx + vy).scale(0.5 * weights[1]) + (cx + cy).scale(0.5 * weights[2]))
}

pub fn latent_mse_align<'g>(zx: Var<'g>, zy: Var<'g>) -> Result<Var<'g>> {
    if zx.shape() != zy.shape() {
        return Err(shape_err(format!(
            "latent shapes differ: {:?} vs {:?}",
            zx.shape(),
            zy.shape()
        )));
    }
    Ok((zx - zy).square().mean())
}

/// Alignment loss between full latents `[B, L, d]` under `config.method`.
pub fn alignment_loss<'g>(zx: Var<'g>, zy: Var<'g>, config: &AlignmentConfig) -> Result<Var<'g>> {
    if zx.shape() != zy.shape() {
        return Err(shape_err(format!(
            "latent shapes differ: {:?} vs {:?}",
            zx.shape(),
            zy.shape()
        )));
    }
    let windows = || -> Result<(LatentTrajectory<'g>, LatentTrajectory<'g>)> {
        Ok((
            extract_windows(zx, config.window_len)?,
            extract_windows(zy, config.window_len)?,
        ))
    };
    match config.method {
        AlignMethod::None => Ok(zx.graph().scalar(0.0)),
        AlignMethod::LatentMse => latent_mse_align(zx, zy),
        AlignMethod::Llma => {
            let (wx, wy) = windows()?;
            llma(&wx, &wy, config)
        }
        AlignMethod::Simclr => {
            let (wx, wy) = windows()?;
            simclr_align(wx.pooled(), wy.pooled(), config.temperature)
        }
        AlignMethod::Barlow => {
            let (wx, wy) = windows()?;
            barlow_align(wx.pooled(), wy.pooled(), config.barlow_lambda)
        }
        AlignMethod::Vicreg => {
            let (wx, wy) = windows()?;
            vicreg_align(wx.pooled(), wy.pooled(), config.vicreg_weights, config.vicreg_gamma)
        }
    }
}

trait MatmulT<'g> {
    fn matmul_t(self, other: Var<'g>) -> Var<'g>;
}

impl<'g> MatmulT<'g> for Var<'g> {
    /// `self [n, d] @ other [m, d]^T`.
    fn matmul_t(self, other: Var<'g>) -> Var<'g> {
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let m = other.shape()[0];
        self.reshape(&[1, n, d])
            .bmm(other.reshape(&[1, m, d]), false, true)
            .reshape(&[n, m])
    }
}
