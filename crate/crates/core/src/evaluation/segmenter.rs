//! Small encoder-decoder that delineates lesions, so that forecast and
//! ground-truth images are scored with the same mask extractor.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Archive;
use crate::datasets::{Dataset, Split};
use crate::optim::{AdamW, AdamWConfig};
use crate::raster::{Image, Mask};
use crate::tensor::{Gradients, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            epochs: 6,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub backbone_config: BackboneConfig,
    store: ParamStore,
    net: Backbone,
}

#[derive(Serialize, Deserialize)]
struct SegmenterMeta {
    kind: String,
    backbone: BackboneConfig,
}

impl Segmenter {
    fn build(backbone_config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Backbone::new(backbone_config, &mut store, "seg", false, &mut rng)?;
        Ok(Segmenter { backbone_config: backbone_config.clone(), store, net })
    }

    fn logits(&self, images: &[&Image], train: bool) -> Result<crate::tensor::Tensor> {
        let vars = if train { self.store.bind_trainable() } else { self.store.bind_frozen() };
        let x = Image::batch(images)?;
        let z = self.net.encode(&vars, &x)?;
        self.net.decode_logits(&vars, &z)
    }

    /// Binary lesion mask (`p >= 0.5`).
    pub fn segment(&self, image: &Image) -> Result<Mask> {
        let logits = self.logits(&[image], false)?;
        let (h, w) = (image.height, image.width);
        Mask::new(h, w, logits.data()[..h * w].iter().map(|&v| u8::from(v >= 0.0)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = SegmenterMeta { kind: "segmenter".into(), backbone: self.backbone_config.clone() };
        let mut ar = Archive::new(serde_json::to_value(meta)?);
        ar.push_store("live/", &self.store);
        ar.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ar = Archive::load(path)?;
        let meta: SegmenterMeta = serde_json::from_value(ar.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("bad segmenter metadata: {e}")))?;
        if meta.kind != "segmenter" {
            return Err(Error::Checkpoint(format!("expected a segmenter checkpoint, found {}", meta.kind)));
        }
        let mut seg = Segmenter::build(&meta.backbone, 0)?;
        ar.fill_store("live/", &mut seg.store)?;
        Ok(seg)
    }
}

/// Trains on every (image, mask) of the training split with pixelwise
/// binary cross-entropy and random flips.
pub fn train_segmenter(dataset: &Dataset, config: &SegmenterConfig) -> Result<Segmenter> {
    let mut samples: Vec<(&Image, &Mask)> = Vec::new();
    for s in dataset.series_in(Split::Train) {
        if let Some(masks) = &s.masks {
            samples.extend(s.images.iter().zip(masks));
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no ground-truth masks in the training split".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("segmenter batch_size must be positive".into()));
    }
    let (c, h, w) = samples[0].0.shape();
    if h != w {
        return Err(Error::InvalidInput("segmenter expects square images".into()));
    }
    let backbone_config = BackboneConfig {
        in_channels: c,
        base_channels: config.base_channels,
        channel_multipliers: config.channel_multipliers.clone(),
        blocks_per_resolution: 1,
        image_size: h,
        input_noise_std: 0.0,
    };
    let mut seg = Segmenter::build(&backbone_config, config.seed)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() }, &seg.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len() * h * w);
            for &k in chunk {
                let (im, m) = samples[k];
                let (im, m) = match rng.random_range(0..3) {
                    0 => (im.flip_horizontal(), m.flip_horizontal()),
                    1 => (im.flip_vertical(), m.flip_vertical()),
                    _ => (im.clone(), m.clone()),
                };
                images.push(im);
                targets.extend(m.data.iter().map(|&v| f64::from(v)));
            }
            let refs: Vec<&Image> = images.iter().collect();
            let loss = seg.logits(&refs, true)?.bce_with_logits(&targets);
            if !loss.item().is_finite() {
                return Err(Error::NonFiniteLoss { term: "segmenter cross-entropy".into() });
            }
            epoch_loss += loss.item() * chunk.len() as f64;
            let grads: Gradients = loss.backward();
            opt.step(&mut seg.store, &grads, config.learning_rate, |_| true);
        }
        log::info!("segmenter epoch {epoch}: bce {:.4}", epoch_loss / samples.len() as f64);
    }
    Ok(seg)
}
