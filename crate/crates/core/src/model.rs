//! Full forecasting model (backbone, flow fields, diffusion terms,
//! contrastive head, frozen feature encoder) and its persisted state.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, MultiscaleLatent};
use crate::checkpoint::Archive;
use crate::dynamics::{
    field_output_norms, integrate_ode, integrate_sde, DiffusionTermSet, DynamicsConfig, FlowFieldSet, SmoothnessNorm,
};
use crate::objectives::{
    contrastive_simsiam_loss, reconstruction_loss, visual_feature_loss, ContrastiveHead, HeadConfig, LossTerms,
    LossWeights, RandomConvEncoder,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::raster::Image;
use crate::tensor::{ParamGroup, ParamStore, Tensor, Vars};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Deterministic latent flow.
    Ode,
    /// Latent flow with learned Brownian forcing.
    Sde,
    /// Time-conditional UNet baseline (no latent flow).
    TUnet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ode => "ode",
            Variant::Sde => "sde",
            Variant::TUnet => "tunet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub dynamics: DynamicsConfig,
    pub head: HeadConfig,
    /// Seeds weight initialisation and the frozen feature encoder.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, backbone: BackboneConfig, dynamics: DynamicsConfig, init_seed: u64) -> Self {
        ModelConfig { variant, backbone, dynamics, head: HeadConfig::default(), init_seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.dynamics.validate()
    }
}

/// Encoder input for one forward pass plus its supervision target.
#[derive(Clone, Debug)]
pub struct PairBatch {
    /// What the encoder sees (possibly noise-perturbed `x_i`).
    pub input: Tensor,
    pub target: Tensor,
    pub t_i: f64,
    pub t_j: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fields: Option<FlowFieldSet>,
    pub sigmas: Option<DiffusionTermSet>,
    pub head: Option<ContrastiveHead>,
    pub encoder: RandomConvEncoder,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let is_flow = config.variant != Variant::TUnet;
        let backbone = Backbone::new(&config.backbone, &mut store, "backbone", !is_flow, &mut rng)?;
        let shapes = config.backbone.latent_shapes();
        let channels: Vec<usize> = shapes.iter().map(|s| s.0).collect();
        let res: Vec<usize> = (0..shapes.len()).map(|b| config.backbone.resolution_of(b)).collect();
        let fields = is_flow.then(|| FlowFieldSet::new(&mut store, "flow", &channels, &res, &config.dynamics, &mut rng));
        let sigmas = (config.variant == Variant::Sde)
            .then(|| DiffusionTermSet::new(&mut store, "sigma", &channels, &res, &config.dynamics, &mut rng));
        let head = is_flow
            .then(|| ContrastiveHead::new(&mut store, "head", *channels.last().expect("latents"), &config.head, &mut rng));
        let encoder = RandomConvEncoder::new(config.backbone.in_channels, config.init_seed ^ 0x5eed_f00d);
        Ok(Model { config: config.clone(), store, backbone, fields, sigmas, head, encoder })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn image_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let c = &self.config.backbone;
        for im in images {
            if im.shape() != (c.in_channels, c.image_size, c.image_size) {
                return Err(Error::shape((c.in_channels, c.image_size, c.image_size), im.shape()));
            }
        }
        Image::batch(images)
    }

    pub fn encode(&self, vars: &Vars, x: &Tensor) -> Result<MultiscaleLatent> {
        self.backbone.encode(vars, x)
    }

    /// Moves latents from `t_i` to `t_j`. `seed` drives the Brownian draws of
    /// the stochastic variant.
    pub fn evolve(&self, vars: &Vars, z: &MultiscaleLatent, t_i: f64, t_j: f64, seed: u64) -> Result<MultiscaleLatent> {
        let fields = self
            .fields
            .as_ref()
            .ok_or_else(|| Error::Unsupported("the time-conditional UNet has no latent flow".into()))?;
        let drift = fields.bind(vars);
        let solver = &self.config.dynamics.solver;
        match &self.sigmas {
            Some(s) => integrate_sde(z, t_i, t_j, &drift, &s.bind(vars), solver, seed),
            None => integrate_ode(z, t_i, t_j, &drift, solver),
        }
    }

    /// Forecast `x_j` from `x_i` (`[N, C, H, W]`, values in [0, 1]).
    pub fn forward(&self, vars: &Vars, x_i: &Tensor, t_i: f64, t_j: f64, seed: u64) -> Result<Tensor> {
        if self.variant() == Variant::TUnet {
            return self.backbone.forward_t_unet(vars, x_i, t_i, t_j);
        }
        let z = self.encode(vars, x_i)?;
        let z_j = self.evolve(vars, &z, t_i, t_j, seed)?;
        self.backbone.decode(vars, &z_j)
    }

    /// Loss terms of one forward pass. Terms whose weight is zero, or that
    /// the variant lacks, are not computed.
    pub fn loss_terms(&self, vars: &Vars, batch: &PairBatch, weights: &LossWeights, seed: u64) -> Result<LossTerms> {
        let (x_hat, trajectory) = if self.variant() == Variant::TUnet {
            (self.backbone.forward_t_unet(vars, &batch.input, batch.t_i, batch.t_j)?, None)
        } else {
            let z_i = self.encode(vars, &batch.input)?;
            let z_j = self.evolve(vars, &z_i, batch.t_i, batch.t_j, seed)?;
            (self.backbone.decode(vars, &z_j)?, Some((z_i, z_j)))
        };
        let reconstruction = reconstruction_loss(&x_hat, &batch.target)?;
        let visual = (weights.lambda_v > 0.0)
            .then(|| visual_feature_loss(&x_hat, &batch.target, &self.encoder))
            .transpose()?;
        let mut contrastive = None;
        let mut smoothness = None;
        if let (Some((z_i, z_j)), Some(fields), Some(head)) = (&trajectory, &self.fields, &self.head) {
            if weights.lambda_c > 0.0 {
                let z_target = self.encode(vars, &batch.target)?;
                let (a, b) = (z_i.bottleneck().global_avg_pool(), z_target.bottleneck().global_avg_pool());
                contrastive = Some(contrastive_simsiam_loss(vars, head, &a, &b));
            }
            if weights.lambda_s > 0.0 {
                smoothness = Some(match self.config.dynamics.smoothness_norm {
                    SmoothnessNorm::FieldOutput => {
                        let (a, b) = (z_i.detach(), z_j.detach());
                        field_output_norms(&fields.bind(vars), &[(&a, batch.t_i), (&b, batch.t_j)])
                    }
                    SmoothnessNorm::Parameters => self.field_parameter_norm(vars),
                });
            }
        }
        Ok(LossTerms { reconstruction, visual, contrastive, smoothness })
    }

    fn field_parameter_norm(&self, vars: &Vars) -> Tensor {
        let mut acc = Tensor::scalar(0.0);
        for id in self.store.ids_in(ParamGroup::FlowField) {
            acc = acc.add(&vars.get(id).square().sum());
        }
        acc
    }

    /// Decodes `num_samples` stochastic forecasts (seeds `seed..seed+n`) and
    /// the per-pixel standard deviation across them.
    pub fn sample_trajectories(
        &self,
        vars: &Vars,
        x_i: &Image,
        t_i: f64,
        t_j: f64,
        num_samples: usize,
        seed: u64,
    ) -> Result<(Vec<Image>, Image)> {
        if self.variant() != Variant::Sde {
            return Err(Error::Unsupported(
                "trajectory sampling needs the stochastic variant; use a deterministic forecast for ODE models".into(),
            ));
        }
        if num_samples == 0 {
            return Err(Error::InvalidInput("num_samples must be positive".into()));
        }
        let x = self.image_tensor(&[x_i])?;
        let z = self.encode(vars, &x)?;
        let mut samples = Vec::with_capacity(num_samples);
        for k in 0..num_samples {
            let z_j = self.evolve(vars, &z, t_i, t_j, seed.wrapping_add(k as u64))?;
            samples.push(Image::from_tensor(&self.backbone.decode(vars, &z_j)?, 0)?);
        }
        let std = pixel_std(&samples);
        Ok((samples, std))
    }
}

/// Population standard deviation per pixel across images of equal shape.
pub fn pixel_std(images: &[Image]) -> Image {
    let n = images.len() as f64;
    let mut out = Image::filled(images[0].channels, images[0].height, images[0].width, 0.0);
    for (k, v) in out.data.iter_mut().enumerate() {
        let mean = images.iter().map(|im| im.data[k]).sum::<f64>() / n;
        *v = (images.iter().map(|im| (im.data[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
    }
    out
}

/// Live weights, EMA shadow, optimizer moments and step counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: Model,
    pub ema: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    model: ModelConfig,
    optimizer: AdamWConfig,
    step: u64,
    optimizer_t: u64,
    #[serde(default)]
    extra: serde_json::Value,
}

impl ModelState {
    pub fn new(model: Model, optimizer: AdamWConfig) -> Self {
        let ema = model.store.clone();
        let optimizer = AdamW::new(optimizer, &model.store);
        ModelState { model, ema, optimizer, step: 0 }
    }

    /// Parameters bound for inference with the EMA weights.
    pub fn ema_vars(&self) -> Vars {
        self.ema.bind_frozen()
    }

    /// Forecast with EMA weights; `allow_backward` permits `t_j < t_i`.
    pub fn predict(&self, x_i: &Image, t_i: f64, t_j: f64, allow_backward: bool, seed: u64) -> Result<Image> {
        if t_j < t_i && !allow_backward {
            return Err(Error::InvalidInput(format!(
                "cannot forecast backwards in time ({t_i} -> {t_j}) without the backward flag"
            )));
        }
        let model = if allow_backward && t_j < t_i {
            let mut m = self.model.clone();
            m.config.dynamics.solver.allow_backward = true;
            std::borrow::Cow::Owned(m)
        } else {
            std::borrow::Cow::Borrowed(&self.model)
        };
        let x = model.image_tensor(&[x_i])?;
        let y = model.forward(&self.ema_vars(), &x, t_i, t_j, seed)?;
        Image::from_tensor(&y, 0)
    }

    /// Decode(encode(x)) with EMA weights.
    pub fn autoencode(&self, x: &Image) -> Result<Image> {
        let vars = self.ema_vars();
        let t = self.model.image_tensor(&[x])?;
        if self.model.variant() == Variant::TUnet {
            return Image::from_tensor(&self.model.backbone.forward_t_unet(&vars, &t, 0.0, 0.0)?, 0);
        }
        let z = self.model.encode(&vars, &t)?;
        Image::from_tensor(&self.model.backbone.decode(&vars, &z)?, 0)
    }

    pub fn to_archive(&self, extra: serde_json::Value) -> Result<Archive> {
        let meta = CheckpointMeta {
            format_version: 1,
            model: self.model.config.clone(),
            optimizer: self.optimizer.config.clone(),
            step: self.step,
            optimizer_t: self.optimizer.t,
            extra,
        };
        let mut ar = Archive::new(serde_json::to_value(&meta)?);
        ar.push_store("live/", &self.model.store);
        ar.push_store("ema/", &self.ema);
        ar.push_store("encoder/", self.model.encoder.store());
        for (e, (m, v)) in self.model.store.iter().map(|(_, e)| e).zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            ar.push(format!("adam_m/{}", e.name), &e.shape, m);
            ar.push(format!("adam_v/{}", e.name), &e.shape, v);
        }
        Ok(ar)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_archive(extra)?.save(path)
    }

    pub fn from_archive(ar: &Archive) -> Result<(Self, serde_json::Value)> {
        let meta: CheckpointMeta = serde_json::from_value(ar.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        if meta.format_version != 1 {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let mut model = Model::new(&meta.model)?;
        ar.fill_store("live/", &mut model.store)?;
        let mut encoder_store = model.encoder.store().clone();
        ar.fill_store("encoder/", &mut encoder_store)?;
        model.encoder.load_weights(&encoder_store)?;
        let mut ema = model.store.clone();
        ar.fill_store("ema/", &mut ema)?;
        let mut optimizer = AdamW::new(meta.optimizer, &model.store);
        optimizer.t = meta.optimizer_t;
        let mut m_store = model.store.clone();
        ar.fill_store("adam_m/", &mut m_store)?;
        let mut v_store = model.store.clone();
        ar.fill_store("adam_v/", &mut v_store)?;
        optimizer.m = m_store.iter().map(|(_, e)| e.data.clone()).collect();
        optimizer.v = v_store.iter().map(|(_, e)| e.data.clone()).collect();
        Ok((ModelState { model, ema, optimizer, step: meta.step }, meta.extra))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_archive(&Archive::load(path)?)
    }
}
