use mam_tape::Var;

use crate::error::{shape_err, Error, Result};

/// Encoder latents `[B, L, d_Z]` with their partition into `M = floor(L / C)`
/// contiguous windows of length `C`. Trailing steps that do not fill a window
/// are dropped and counted in `dropped`.
#[derive(Debug, Clone, Copy)]
pub struct LatentTrajectory<'g> {
    pub z: Var<'g>,
    pub window_len: usize,
    pub num_windows: usize,
    pub dropped: usize,
}

pub fn extract_windows(z: Var<'_>, window_len: usize) -> Result<LatentTrajectory<'_>> {
    let shape = z.shape();
    if shape.len() != 3 {
        return Err(shape_err(format!("latent must be [B, L, d], got {shape:?}")));
    }
    let len = shape[1];
    if window_len == 0 || window_len > len {
        return Err(Error::Config(format!("window length {window_len} outside [1, {len}]")));
    }
    let num_windows = len / window_len;
    Ok(LatentTrajectory {
        z,
        window_len,
        num_windows,
        dropped: len - num_windows * window_len,
    })
}

impl<'g> LatentTrajectory<'g> {
    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[2]
    }

    /// `[B, M, C, d]` view of the retained steps.
    pub fn windows(&self) -> Var<'g> {
        let (b, d) = (self.batch(), self.dim());
        let kept = self.num_windows * self.window_len;
        let z = if self.dropped > 0 {
            self.z.slice(1, 0, kept)
        } else {
            self.z
        };
        z.reshape(&[b, self.num_windows, self.window_len, d])
    }

    /// Mean over each window's steps: `[B * M, d]`, ordered batch-major.
    pub fn pooled(&self) -> Var<'g> {
        let (b, d) = (self.batch(), self.dim());
        self.windows().mean_axis(2, false).reshape(&[b * self.num_windows, d])
    }
}
