//! Denoising and energy terms and their combination with a learned alignment
//! weight. The energy weight is fixed to 1.

use mam_tape::Var;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const GAMMA: f64 = 1.0;

pub fn denoise_loss<'g>(x0: Var<'g>, x0_hat: Var<'g>) -> Result<Var<'g>> {
    if x0.shape() != x0_hat.shape() {
        return Err(shape_err(format!(
            "prediction {:?} does not match target {:?}",
            x0_hat.shape(),
            x0.shape()
        )));
    }
    Ok((x0 - x0_hat).square().mean())
}

/// Kinetic energy `0.5 (x[l+1] - x[l])^2` per step, shape `[B, L-1, d]`.
pub fn energy(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(shape_err(format!("energy expects [B, L, d], got {shape:?}")));
    }
    let len = shape[1];
    if len < 2 {
        return Err(shape_err(format!("energy needs L >= 2, got {len}")));
    }
    let diff = x.slice(1, 1, len - 1) - x.slice(1, 0, len - 1);
    Ok(diff.square().scale(0.5))
}

pub fn energy_loss<'g>(x0: Var<'g>, x0_hat: Var<'g>) -> Result<Var<'g>> {
    if x0.shape() != x0_hat.shape() {
        return Err(shape_err(format!(
            "prediction {:?} does not match target {:?}",
            x0_hat.shape(),
            x0.shape()
        )));
    }
    Ok((energy(x0)? - energy(x0_hat)?).square().mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Softplus,
    /// `exp(-raw) * L_align + raw`
    #[default]
    Uncertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaParam {
    pub raw: f64,
    pub mode: AlphaMode,
}

impl AlphaParam {
    pub const NAME: &'static str = "alpha.raw";

    /// Starts at an effective weight of one in either mode.
    pub fn new(mode: AlphaMode) -> Self {
        let raw = match mode {
            AlphaMode::Softplus => (1f64.exp() - 1.0).ln(),
            AlphaMode::Uncertainty => 0.0,
        };
        AlphaParam { raw, mode }
    }

    pub fn effective(&self) -> f64 {
        effective_alpha(self.raw, self.mode)
    }
}

pub fn effective_alpha(raw: f64, mode: AlphaMode) -> f64 {
    match mode {
        AlphaMode::Softplus => raw.max(0.0) + (-raw.abs()).exp().ln_1p(),
        AlphaMode::Uncertainty => (-raw).exp(),
    }
}

/// Per-batch loss terms before weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<'g> {
    pub denoise_x: Var<'g>,
    pub denoise_y: Var<'g>,
    pub energy_x: Var<'g>,
    pub energy_y: Var<'g>,
    pub align: Var<'g>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub denoise_x: f64,
    pub denoise_y: f64,
    pub energy_x: f64,
    pub energy_y: f64,
    pub align: f64,
    pub alpha_effective: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: [&'static str; 8] = [
        "step",
        "denoise_x",
        "denoise_y",
        "energy_x",
        "energy_y",
        "align",
        "alpha_effective",
        "total",
    ];

    /// Rebuilds the total from the parts.
    pub fn recombine(&self, mode: AlphaMode) -> f64 {
        let weighted = self.alpha_effective * self.align;
        let penalty = match mode {
            AlphaMode::Softplus => 0.0,
            AlphaMode::Uncertainty => -self.alpha_effective.ln(),
        };
        self.denoise_x + self.denoise_y + weighted + penalty + GAMMA * (self.energy_x + self.energy_y)
    }

    pub fn csv_row(&self, step: u64) -> [String; 8] {
        [
            step.to_string(),
            self.denoise_x.to_string(),
            self.denoise_y.to_string(),
            self.energy_x.to_string(),
            self.energy_y.to_string(),
            self.align.to_string(),
            self.alpha_effective.to_string(),
            self.total.to_string(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        [
            self.denoise_x,
            self.denoise_y,
            self.energy_x,
            self.energy_y,
            self.align,
            self.alpha_effective,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Combines the parts with the learned alignment weight held in `raw`.
pub fn total_loss<'g>(parts: &LossParts<'g>, raw: Var<'g>, mode: AlphaMode) -> Result<(Var<'g>, LossBreakdown)> {
    let named = [
        ("denoise_x", parts.denoise_x),
        ("denoise_y", parts.denoise_y),
        ("energy_x", parts.energy_x),
        ("energy_y", parts.energy_y),
        ("align", parts.align),
        ("alpha", raw),
    ];
    for (name, v) in named {
        let value = v.item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss term {name} is {value}")));
        }
    }
    let (weighted, alpha) = match mode {
        AlphaMode::Softplus => {
            let a = raw.softplus();
            (a * parts.align, a)
        }
        AlphaMode::Uncertainty => {
            let a = (-raw).exp();
            (a * parts.align + raw, a)
        }
    };
    let total = parts.denoise_x + parts.denoise_y + weighted + (parts.energy_x + parts.energy_y).scale(GAMMA);
    let breakdown = LossBreakdown {
        denoise_x: parts.denoise_x.item(),
        denoise_y: parts.denoise_y.item(),
        energy_x: parts.energy_x.item(),
        energy_y: parts.energy_y.item(),
        align: parts.align.item(),
        alpha_effective: alpha.item(),
        total: total.item(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("total loss is {}", breakdown.total)));
    }
    Ok((total, breakdown))
}
