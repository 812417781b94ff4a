//! Conditional transformer denoiser for one modality.
//!
//! The noisy input is projected to model width, combined with positional and
//! timestep embeddings and passed through a self-attention encoder; the
//! encoder output is the latent trajectory used for alignment. The decoder
//! runs on the embedded condition (the clean other modality), attends to the
//! encoder output through cross-attention and projects back to the input
//! channels as a prediction of the clean signal.

mod latent;
mod layers;

use mam_tape::{Bound, Graph, ParamSet, Var};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoise;
use crate::error::{shape_err, Error, Result};

pub use latent::{extract_windows, LatentTrajectory};
pub use layers::sinusoidal;
use layers::{attention, dropout, feed_forward, layer_norm, linear, positions, Init};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channels of the modality being generated.
    pub d_in: usize,
    /// Channels of the conditioning modality.
    pub d_cond: usize,
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    /// Width of the exposed latent; always equal to `d_model`.
    pub d_latent: usize,
    /// Hidden width of the position-wise feed-forward blocks.
    pub d_ff: usize,
    pub max_len: usize,
    /// Diffusion steps accepted by the timestep embedder.
    pub num_steps: usize,
    pub dropout: f64,
}

impl DenoiserConfig {
    /// CPU-sized defaults: width 32, two encoder and two decoder layers.
    pub fn desk(d_in: usize, d_cond: usize) -> Self {
        Self {
            d_in,
            d_cond,
            d_model: 32,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            d_latent: 32,
            d_ff: 128,
            max_len: 64,
            num_steps: 50,
            dropout: 0.1,
        }
    }

    /// Full-size layout: width 128, four encoder and four decoder layers,
    /// eight heads, 2048-wide feed-forward blocks, windows of 300 samples.
    pub fn full_size(d_in: usize, d_cond: usize) -> Self {
        Self {
            d_in,
            d_cond,
            d_model: 128,
            n_layers_enc: 4,
            n_layers_dec: 4,
            n_heads: 8,
            d_latent: 128,
            d_ff: 2048,
            max_len: 300,
            num_steps: 50,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_in", self.d_in),
            ("d_cond", self.d_cond),
            ("d_model", self.d_model),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("num_steps", self.num_steps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("denoiser {name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for sinusoidal embeddings".into()));
        }
        if self.d_latent != self.d_model {
            return Err(Error::Config(format!(
                "d_latent ({}) must equal d_model ({})",
                self.d_latent, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Prediction and encoder latent of one forward pass.
pub struct DenoiserOutput<'g> {
    /// `[B, L, d_in]` estimate of the clean signal.
    pub x0_hat: Var<'g>,
    /// `[B, L, d_model]` encoder output.
    pub latent: Var<'g>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    pos_table: Array2<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff) = (config.d_model, config.d_ff);
        {
            let mut init = Init {
                params: &mut params,
                rng: &mut rng,
            };
            init.linear("in_proj", config.d_in, d);
            init.linear("time_mlp.0", d, d);
            init.linear("time_mlp.1", d, d);
            init.linear("cond_embed", config.d_cond, d);
            for i in 0..config.n_layers_enc {
                let n = format!("encoder.{i}");
                init.layer_norm(&format!("{n}.norm1"), d);
                init.attention(&format!("{n}.self_attn"), d);
                init.layer_norm(&format!("{n}.norm2"), d);
                init.feed_forward(&format!("{n}.ff"), d, ff);
            }
            init.layer_norm("encoder.norm", d);
            for i in 0..config.n_layers_dec {
                let n = format!("decoder.{i}");
                init.layer_norm(&format!("{n}.norm1"), d);
                init.attention(&format!("{n}.self_attn"), d);
                init.layer_norm(&format!("{n}.norm2"), d);
                init.attention(&format!("{n}.cross_attn"), d);
                init.layer_norm(&format!("{n}.norm3"), d);
                init.feed_forward(&format!("{n}.ff"), d, ff);
            }
            init.layer_norm("decoder.norm", d);
            init.linear("out_proj", d, config.d_in);
        }
        Self::from_params(config, params)
    }

    /// Rebuild a denoiser around existing parameters (e.g. EMA shadows or a checkpoint).
    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let positions: Vec<f64> = (0..config.max_len).map(|p| p as f64).collect();
        let pos_table = sinusoidal(&positions, config.d_model);
        let out = Self {
            config,
            params,
            pos_table,
        };
        let reference = out.expected_shapes();
        if reference.len() != out.params.len() {
            return Err(shape_err(format!(
                "expected {} parameter arrays, found {}",
                reference.len(),
                out.params.len()
            )));
        }
        for (name, shape) in reference {
            match out.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(shape_err(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(shape_err(format!("missing parameter {name}"))),
            }
        }
        Ok(out)
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        type Shapes = Vec<(String, Vec<usize>)>;
        fn lin(v: &mut Shapes, n: &str, i: usize, o: usize) {
            v.push((format!("{n}.w"), vec![i, o]));
            v.push((format!("{n}.b"), vec![o]));
        }
        fn ln(v: &mut Shapes, n: &str, d: usize) {
            v.push((format!("{n}.gamma"), vec![d]));
            v.push((format!("{n}.beta"), vec![d]));
        }
        fn attn(v: &mut Shapes, n: &str, d: usize) {
            for part in ["q", "k", "v", "o"] {
                lin(v, &format!("{n}.{part}"), d, d);
            }
        }
        let c = &self.config;
        let (d, ff) = (c.d_model, c.d_ff);
        let mut v = Vec::new();
        lin(&mut v, "in_proj", c.d_in, d);
        lin(&mut v, "time_mlp.0", d, d);
        lin(&mut v, "time_mlp.1", d, d);
        lin(&mut v, "cond_embed", c.d_cond, d);
        lin(&mut v, "out_proj", d, c.d_in);
        ln(&mut v, "encoder.norm", d);
        ln(&mut v, "decoder.norm", d);
        for i in 0..c.n_layers_enc {
            let n = format!("encoder.{i}");
            ln(&mut v, &format!("{n}.norm1"), d);
            ln(&mut v, &format!("{n}.norm2"), d);
            attn(&mut v, &format!("{n}.self_attn"), d);
            lin(&mut v, &format!("{n}.ff.0"), d, ff);
            lin(&mut v, &format!("{n}.ff.1"), ff, d);
        }
        for i in 0..c.n_layers_dec {
            let n = format!("decoder.{i}");
            for norm in ["norm1", "norm2", "norm3"] {
                ln(&mut v, &format!("{n}.{norm}"), d);
            }
            attn(&mut v, &format!("{n}.self_attn"), d);
            attn(&mut v, &format!("{n}.cross_attn"), d);
            lin(&mut v, &format!("{n}.ff.0"), d, ff);
            lin(&mut v, &format!("{n}.ff.1"), ff, d);
        }
        v
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.params)
    }

    /// Sinusoidal timestep features passed through the SiLU MLP: `[B, 1, d_model]`.
    fn time_embedding<'g>(&self, p: &Bound<'g>, graph: &'g Graph, t: &[usize]) -> Var<'g> {
        let steps: Vec<f64> = t.iter().map(|&s| s as f64).collect();
        let feats = sinusoidal(&steps, self.config.d_model).into_dyn();
        let h = linear(p, "time_mlp.0", graph.constant(feats)).silu();
        linear(p, "time_mlp.1", h).reshape(&[t.len(), 1, self.config.d_model])
    }

    fn check_inputs(&self, x_shape: &[usize], c_shape: &[usize], t: &[usize]) -> Result<()> {
        let c = &self.config;
        if x_shape.len() != 3 || c_shape.len() != 3 {
            return Err(shape_err("denoiser inputs must be [B, L, channels]"));
        }
        let (b, l) = (x_shape[0], x_shape[1]);
        if x_shape[2] != c.d_in {
            return Err(shape_err(format!(
                "x_t has {} channels, expected {}",
                x_shape[2], c.d_in
            )));
        }
        if c_shape != [b, l, c.d_cond] {
            return Err(shape_err(format!(
                "condition has shape {c_shape:?}, expected [{b}, {l}, {}]",
                c.d_cond
            )));
        }
        if l == 0 || l > c.max_len {
            return Err(shape_err(format!("sequence length {l} outside [1, {}]", c.max_len)));
        }
        if t.len() != b {
            return Err(shape_err(format!("{} timesteps for batch of {b}", t.len())));
        }
        if let Some(bad) = t.iter().find(|&&s| s == 0 || s > c.num_steps) {
            return Err(Error::Config(format!("timestep {bad} outside [1, {}]", c.num_steps)));
        }
        Ok(())
    }

    /// Differentiable forward pass. Pass an RNG to enable dropout (training).
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x_t: Var<'g>,
        cond: Var<'g>,
        t: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DenoiserOutput<'g>> {
        self.check_inputs(&x_t.shape(), &cond.shape(), t)?;
        let graph = x_t.graph();
        let c = &self.config;
        let len = x_t.shape()[1];
        let rate = c.dropout;
        let pos = positions(graph, &self.pos_table, len);
        let temb = self.time_embedding(p, graph, t);

        let mut h = linear(p, "in_proj", x_t) + pos + temb;
        for i in 0..c.n_layers_enc {
            let n = format!("encoder.{i}");
            let a = layer_norm(p, &format!("{n}.norm1"), h);
            let a = attention(p, &format!("{n}.self_attn"), a, a, c.n_heads);
            h = h + dropout(a, rate, rng.as_deref_mut());
            let f = feed_forward(p, &format!("{n}.ff"), layer_norm(p, &format!("{n}.norm2"), h));
            h = h + dropout(f, rate, rng.as_deref_mut());
        }
        let latent = layer_norm(p, "encoder.norm", h);

        let mut y = linear(p, "cond_embed", cond) + pos + temb;
        for i in 0..c.n_layers_dec {
            let n = format!("decoder.{i}");
            let a = layer_norm(p, &format!("{n}.norm1"), y);
            let a = attention(p, &format!("{n}.self_attn"), a, a, c.n_heads);
            y = y + dropout(a, rate, rng.as_deref_mut());
            let q = layer_norm(p, &format!("{n}.norm2"), y);
            let a = attention(p, &format!("{n}.cross_attn"), q, latent, c.n_heads);
            y = y + dropout(a, rate, rng.as_deref_mut());
            let f = feed_forward(p, &format!("{n}.ff"), layer_norm(p, &format!("{n}.norm3"), y));
            y = y + dropout(f, rate, rng.as_deref_mut());
        }
        let x0_hat = linear(p, "out_proj", layer_norm(p, "decoder.norm", y));
        Ok(DenoiserOutput { x0_hat, latent })
    }

    /// Inference-mode forward pass on plain arrays: `(x0_hat, latent)`.
    pub fn denoise_forward(
        &self,
        x_t: &Array3<f64>,
        cond: &Array3<f64>,
        t: &[usize],
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let graph = Graph::inference();
        let p = self.params.bind(&graph);
        let out = self.forward(
            &p,
            graph.constant(x_t.clone().into_dyn()),
            graph.constant(cond.clone().into_dyn()),
            t,
            None,
        )?;
        let to3 = |v: Var<'_>| {
            v.to_tensor()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("rank-3 output")
        };
        Ok((to3(out.x0_hat), to3(out.latent)))
    }

    /// Encoder latent only, `h(x_t, t)`.
    pub fn encode(&self, x_t: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>> {
        // The decoder is cheap relative to sampling; reuse the full pass with a
        // zero condition so that shape checks stay in one place.
        let (b, l, _) = x_t.dim();
        let cond = Array3::zeros((b, l, self.config.d_cond));
        Ok(self.denoise_forward(x_t, &cond, t)?.1)
    }
}

impl Denoise for Denoiser {
    fn num_steps(&self) -> usize {
        self.config.num_steps
    }

    fn output_dim(&self) -> usize {
        self.config.d_in
    }

    fn predict_x0(&self, x_t: &Array3<f64>, cond: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>> {
        Ok(self.denoise_forward(x_t, cond, t)?.0)
    }
}

/// Number of learnable scalars.
pub fn count_params(params: &ParamSet) -> usize {
    params.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mam_tape::Tensor;
    use ndarray::IxDyn;

    fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::diffusion::standard_normal(shape, &mut rng)
    }

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            d_in: 3,
            d_cond: 2,
            d_model: 8,
            n_layers_enc: 1,
            n_layers_dec: 1,
            n_heads: 2,
            d_latent: 8,
            d_ff: 16,
            max_len: 10,
            num_steps: 5,
            dropout: 0.1,
        }
    }

    #[test]
    fn output_shapes() {
        let m = Denoiser::new(tiny(), 0).unwrap();
        let (x0, z) = m
            .denoise_forward(&random3((2, 7, 3), 1), &random3((2, 7, 2), 2), &[1, 5])
            .unwrap();
        assert_eq!(x0.dim(), (2, 7, 3));
        assert_eq!(z.dim(), (2, 7, 8));
    }

    #[test]
    fn zero_output_projection_gives_zero_prediction() {
        let mut m = Denoiser::new(tiny(), 0).unwrap();
        m.params.get_mut("out_proj.w").unwrap().fill(0.0);
        m.params.get_mut("out_proj.b").unwrap().fill(0.0);
        let (x0, _) = m
            .denoise_forward(&random3((2, 7, 3), 1), &random3((2, 7, 2), 2), &[2, 3])
            .unwrap();
        assert!(x0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_census() {
        let mut p = ParamSet::new();
        p.insert("lin.w", Tensor::zeros(IxDyn(&[3, 4])));
        p.insert("lin.b", Tensor::zeros(IxDyn(&[4])));
        assert_eq!(count_params(&p), 16);
    }

    #[test]
    fn census_is_stable_and_matches_layout() {
        let a = Denoiser::new(DenoiserConfig::desk(4, 3), 1).unwrap();
        let b = Denoiser::new(DenoiserConfig::desk(4, 3), 2).unwrap();
        assert_eq!(a.count_params(), b.count_params());
        // Hand count for width 32, ff 128, 2 + 2 layers, 4 -> 3 channels.
        let d = 32;
        let lin = |i: usize, o: usize| i * o + o;
        let attn = 4 * lin(d, d);
        let ff = lin(d, 128) + lin(128, d);
        let ln = 2 * d;
        let enc = 2 * ln + attn + ff;
        let dec = 3 * ln + 2 * attn + ff;
        let expected = lin(4, d) + 2 * lin(d, d) + lin(3, d) + lin(d, 4) + 2 * ln + 2 * enc + 2 * dec;
        assert_eq!(a.count_params(), expected);
        assert!(expected < 1_000_000);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let m = Denoiser::new(tiny(), 0).unwrap();
        let x = random3((2, 7, 3), 1);
        let c = random3((2, 7, 2), 2);
        assert!(m.denoise_forward(&x, &c, &[0, 1]).is_err());
        assert!(m.denoise_forward(&x, &c, &[1, 6]).is_err());
        assert!(m.denoise_forward(&x, &c, &[1]).is_err());
        assert!(m.denoise_forward(&x, &random3((2, 7, 3), 2), &[1, 1]).is_err());
        assert!(m
            .denoise_forward(&random3((1, 11, 3), 1), &random3((1, 11, 2), 1), &[1])
            .is_err());
        let mut cfg = tiny();
        cfg.n_heads = 3;
        assert!(Denoiser::new(cfg, 0).is_err());
        let mut cfg = tiny();
        cfg.d_latent = 4;
        assert!(Denoiser::new(cfg, 0).is_err());
    }

    #[test]
    fn latent_depends_on_timestep() {
        let m = Denoiser::new(tiny(), 3).unwrap();
        let x = random3((1, 6, 3), 4);
        let z1 = m.encode(&x, &[1]).unwrap();
        let z2 = m.encode(&x, &[4]).unwrap();
        let diff = (&z1 - &z2).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff > 0.0);
    }

    #[test]
    fn shared_timestep_embeds_identically_across_batch() {
        let m = Denoiser::new(tiny(), 3).unwrap();
        let g = Graph::inference();
        let p = m.params.bind(&g);
        let e = m.time_embedding(&p, &g, &[3, 1, 3]).to_tensor();
        let row = |i: usize| e.index_axis(ndarray::Axis(0), i).to_owned();
        assert_eq!(row(0), row(2));
        assert_ne!(row(0), row(1));
    }

    #[test]
    fn from_params_rejects_wrong_layout() {
        let m = Denoiser::new(tiny(), 0).unwrap();
        let mut params = m.params.clone();
        params.insert("out_proj.w", Tensor::zeros(IxDyn(&[8, 2])));
        assert!(Denoiser::from_params(tiny(), params).is_err());
    }
}
