//! U-shaped encoder/decoder. The contraction path emits one latent per
//! residual block; the expansion path rebuilds an image from (possibly
//! evolved) latents, deepest first.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, GroupNorm, Linear, ResBlock};
use crate::tensor::{ParamGroup, ParamStore, Tensor, Vars};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub image_size: usize,
    /// Std of Gaussian noise added to the encoder input during training.
    pub input_noise_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_resolution: 2,
            image_size: 64,
            input_noise_std: 0.05,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.channel_multipliers.len();
        if self.in_channels == 0 || self.base_channels == 0 || self.blocks_per_resolution == 0 || r == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        let factor = 1usize << (r - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by {factor} for {r} resolutions",
                self.image_size
            )));
        }
        if !(self.input_noise_std >= 0.0) {
            return Err(Error::Config("input_noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_resolutions(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn num_latents(&self) -> usize {
        self.num_resolutions() * self.blocks_per_resolution
    }

    /// Resolution level of latent `b` (0 = full size).
    pub fn resolution_of(&self, b: usize) -> usize {
        b / self.blocks_per_resolution
    }

    /// `(channels, height, width)` of every latent, shallow to deep.
    pub fn latent_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.num_latents())
            .map(|b| {
                let l = self.resolution_of(b);
                let s = self.image_size >> l;
                (self.base_channels * self.channel_multipliers[l], s, s)
            })
            .collect()
    }
}

/// Per-layer latents, each `[N, C_b, H_b, W_b]`; the last is the bottleneck.
#[derive(Clone, Debug)]
pub struct MultiscaleLatent {
    pub latents: Vec<Tensor>,
    pub resolution_of: Vec<usize>,
}

impl MultiscaleLatent {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn bottleneck(&self) -> &Tensor {
        self.latents.last().expect("non-empty latent set")
    }

    pub fn detach(&self) -> MultiscaleLatent {
        MultiscaleLatent {
            latents: self.latents.iter().map(Tensor::detach).collect(),
            resolution_of: self.resolution_of.clone(),
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.latents.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// `[sin(t w_0), .., sin(t w_{d/2-1}), cos(t w_0), ..]` with
/// `w_k = 10000^(-k / (d/2))`.
pub fn sinusoidal_time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidInput(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

const TIME_FREQ_DIM: usize = 32;
/// Normalized time spans lie in [0, 1]; stretch them so the embedding's
/// high-frequency components resolve small differences.
const TIME_INPUT_SCALE: f64 = 1000.0;

#[derive(Clone, Debug)]
struct TimeMlp {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    encoder: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    /// `decoder[b]` consumes `concat(z~, z[b])` for `b = B-2 .. 0`.
    decoder: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    time: Option<TimeMlp>,
}

impl Backbone {
    /// Builds parameters under `prefix` in `store`. With `time_conditioned`
    /// every residual block receives a learned embedding of the time span.
    pub fn new(
        config: &BackboneConfig,
        store: &mut ParamStore,
        prefix: &str,
        time_conditioned: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let shapes = config.latent_shapes();
        let time_dim = time_conditioned.then_some(4 * config.base_channels);
        let time = time_dim.map(|d| TimeMlp {
            fc1: Linear::new(store, &format!("{prefix}.time.fc1"), TIME_FREQ_DIM, d, g, rng),
            fc2: Linear::new(store, &format!("{prefix}.time.fc2"), d, d, g, rng),
        });
        let stem = Conv2d::new(store, &format!("{prefix}.stem"), config.in_channels, config.base_channels, 3, 1, g, rng);
        let mut encoder = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = config.base_channels;
        for (b, &(c, _, _)) in shapes.iter().enumerate() {
            encoder.push(ResBlock::new(store, &format!("{prefix}.enc{b}"), ch, c, time_dim, g, rng));
            ch = c;
            let last_in_level = (b + 1) % config.blocks_per_resolution == 0;
            if last_in_level && b + 1 < shapes.len() {
                let l = config.resolution_of(b);
                downsample.push(Conv2d::new(store, &format!("{prefix}.down{l}"), ch, ch, 3, 2, g, rng));
            }
        }
        let mut decoder = Vec::new();
        let mut carried = shapes[shapes.len() - 1].0;
        for b in (0..shapes.len() - 1).rev() {
            let skip = shapes[b].0;
            decoder.push(ResBlock::new(store, &format!("{prefix}.dec{b}"), carried + skip, skip, time_dim, g, rng));
            carried = skip;
        }
        decoder.reverse();
        let out_norm = GroupNorm::new(store, &format!("{prefix}.out_norm"), carried, g);
        let out_conv = Conv2d::new(store, &format!("{prefix}.out_conv"), carried, config.in_channels, 3, 1, g, rng);
        Ok(Backbone { config: config.clone(), stem, encoder, downsample, decoder, out_norm, out_conv, time })
    }

    pub fn is_time_conditioned(&self) -> bool {
        self.time.is_some()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 4 || s[0] == 0 || s[1..] != [c.in_channels, c.image_size, c.image_size] {
            return Err(Error::shape(format!("[N, {}, {}, {}]", c.in_channels, c.image_size, c.image_size), s));
        }
        Ok(())
    }

    fn check_latents(&self, z: &MultiscaleLatent) -> Result<()> {
        let expected = self.config.latent_shapes();
        if z.len() != expected.len() {
            return Err(Error::shape(expected.len(), z.len()));
        }
        let n = z.latents[0].dim(0);
        for (t, &(c, h, w)) in z.latents.iter().zip(&expected) {
            if t.shape() != [n, c, h, w] {
                return Err(Error::shape([n, c, h, w], t.shape()));
            }
        }
        Ok(())
    }

    /// Contraction path; each block's output is tapped before downsampling.
    pub fn encode(&self, vars: &Vars, x: &Tensor) -> Result<MultiscaleLatent> {
        self.encode_with(vars, x, None)
    }

    fn encode_with(&self, vars: &Vars, x: &Tensor, temb: Option<&Tensor>) -> Result<MultiscaleLatent> {
        self.check_input(x)?;
        let mut h = self.stem.forward(vars, x);
        let mut latents = Vec::with_capacity(self.encoder.len());
        let mut down = self.downsample.iter();
        for (b, block) in self.encoder.iter().enumerate() {
            h = block.forward(vars, &h, temb);
            latents.push(h.clone());
            if (b + 1) % self.config.blocks_per_resolution == 0 {
                if let Some(d) = down.next() {
                    h = d.forward(vars, &h);
                }
            }
        }
        let resolution_of = (0..latents.len()).map(|b| self.config.resolution_of(b)).collect();
        Ok(MultiscaleLatent { latents, resolution_of })
    }

    /// Expansion path returning pre-activation logits.
    pub fn decode_logits(&self, vars: &Vars, z: &MultiscaleLatent) -> Result<Tensor> {
        self.decode_with(vars, z, None)
    }

    fn decode_with(&self, vars: &Vars, z: &MultiscaleLatent, temb: Option<&Tensor>) -> Result<Tensor> {
        self.check_latents(z)?;
        let mut carried = z.bottleneck().clone();
        for b in (0..z.len() - 1).rev() {
            while carried.dim(2) < z.latents[b].dim(2) {
                carried = carried.upsample2x();
            }
            carried = self.decoder[b].forward(vars, &Tensor::concat_channels(&[&carried, &z.latents[b]]), temb);
        }
        let h = self.out_norm.forward(vars, &carried).silu();
        Ok(self.out_conv.forward(vars, &h))
    }

    /// Image in [0, 1] reconstructed from latents.
    pub fn decode(&self, vars: &Vars, z: &MultiscaleLatent) -> Result<Tensor> {
        Ok(self.decode_logits(vars, z)?.sigmoid())
    }

    fn time_features(&self, vars: &Vars, dt: f64, n: usize) -> Result<Option<Tensor>> {
        let Some(mlp) = &self.time else { return Ok(None) };
        let e = sinusoidal_time_embedding(dt * TIME_INPUT_SCALE, TIME_FREQ_DIM)?;
        let e = Tensor::new(e.repeat(n), &[n, TIME_FREQ_DIM]);
        Ok(Some(mlp.fc2.forward(vars, &mlp.fc1.forward(vars, &e).silu())))
    }

    /// Time-conditional baseline: predicts the image at `t_j` directly, with
    /// an embedding of `t_j - t_i` added inside every residual block.
    pub fn forward_t_unet(&self, vars: &Vars, x: &Tensor, t_i: f64, t_j: f64) -> Result<Tensor> {
        if self.time.is_none() {
            return Err(Error::Unsupported("backbone was built without time conditioning".into()));
        }
        self.check_input(x)?;
        let temb = self.time_features(vars, t_j - t_i, x.dim(0))?;
        let z = self.encode_with(vars, x, temb.as_ref())?;
        Ok(self.decode_with(vars, &z, temb.as_ref())?.sigmoid())
    }
}
