//! Training loop (gradient accumulation, AdamW, warmup + cosine schedule,
//! weight EMA, best-validation selection) and test-time optimization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{augment_pair, AugmentPolicy};
use crate::datasets::{enumerate_pairs, series_pairs, Dataset, LongitudinalSeries, Split, TrainingPair};
use crate::evaluation::metrics::{mse, psnr, MetricConfig};
use crate::model::{Model, ModelConfig, ModelState, PairBatch, Variant};
use crate::objectives::{reconstruction_loss, total_loss, LossBreakdown, LossWeights};
use crate::optim::{ema_update, warmup_cosine, AdamW, AdamWConfig};
use crate::raster::Image;
use crate::tensor::{Gradients, ParamGroup};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per optimizer step; must equal `grad_accumulation` (batch 1).
    pub effective_batch: usize,
    pub grad_accumulation: usize,
    pub ema_decay: f64,
    /// Fraction of all optimizer steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Model variant to train; replaces the variant of the model config.
    pub variant: Variant,
    /// Enables the visual, contrastive and smoothness terms ("++" runs).
    pub regularizers_on: bool,
    /// Set from the objectives section of a run configuration.
    #[serde(skip)]
    pub loss_weights: LossWeights,
    pub augment: AugmentPolicy,
    pub optimizer: AdamWConfig,
    /// Validation pairs scored per epoch; 0 scores all of them.
    pub max_val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 120,
            effective_batch: 64,
            grad_accumulation: 64,
            ema_decay: 0.9,
            warmup_fraction: 0.05,
            seed: 0,
            variant: Variant::Ode,
            regularizers_on: true,
            loss_weights: LossWeights::default(),
            augment: AugmentPolicy::default(),
            optimizer: AdamWConfig::default(),
            max_val_pairs: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized schedule: fewer epochs, smaller accumulation window and a
    /// larger peak rate so a few hundred pairs per epoch still give
    /// meaningful progress.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 40,
            effective_batch: 8,
            grad_accumulation: 8,
            max_val_pairs: 48,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grad_accumulation == 0 || self.effective_batch != self.grad_accumulation {
            return Err(Error::Config(format!(
                "effective_batch ({}) must equal grad_accumulation ({}) with batch size 1, and both be positive",
                self.effective_batch, self.grad_accumulation
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("learning_rate must be positive and ema_decay in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        self.loss_weights.validate()
    }

    pub fn effective_weights(&self) -> LossWeights {
        if self.regularizers_on {
            self.loss_weights.clone()
        } else {
            LossWeights::none()
        }
    }
}

/// One optimizer step. `val_psnr` is set on the last step of each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub visual: f64,
    pub contrastive: f64,
    pub smoothness: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the final step.
    pub last: ModelState,
    /// Final live weights with the EMA snapshot of the best validation epoch.
    pub best: ModelState,
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.steps {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mixes run seed, epoch and pair position into a per-pair seed.
fn pair_seed(seed: u64, epoch: usize, k: usize) -> u64 {
    let mut x = seed ^ ((epoch as u64) << 32) ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn noisy(image: &Image, std: f64, seed: u64) -> Image {
    if std == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    out.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    out
}

/// Loss gradients of one pair, tracking only the groups accepted by `track`.
pub(crate) fn pair_gradients(
    model: &Model,
    pair: &TrainingPair,
    input: &Image,
    weights: &LossWeights,
    seed: u64,
    track: impl Fn(ParamGroup) -> bool,
) -> Result<(Gradients, LossBreakdown)> {
    let vars = model.store.bind(track);
    let batch = PairBatch {
        input: model.image_tensor(&[input])?,
        target: model.image_tensor(&[&pair.x_j])?,
        t_i: pair.t_i,
        t_j: pair.t_j,
    };
    let terms = model.loss_terms(&vars, &batch, weights, seed)?;
    let (total, breakdown) = total_loss(&terms, weights);
    if let Some(term) = breakdown.non_finite_term() {
        return Err(Error::NonFiniteLoss { term: format!("{term} (series {}, pair {}->{})", pair.series_id, pair.i, pair.j) });
    }
    Ok((total.backward(), breakdown))
}

/// Mean reconstruction MSE and PSNR of EMA-weight forecasts over `pairs`.
pub fn score_pairs(state: &ModelState, pairs: &[TrainingPair]) -> Result<(f64, f64)> {
    let cfg = MetricConfig::default();
    let (mut loss, mut db) = (0.0, 0.0);
    for (k, p) in pairs.iter().enumerate() {
        let pred = state.predict(&p.x_i, p.t_i, p.t_j, false, k as u64)?;
        loss += mse(&pred, &p.x_j)?;
        db += psnr(&pred, &p.x_j, &cfg)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok((loss / n, db / n))
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, s: f64) {
    acc.total += s * b.total;
    acc.reconstruction += s * b.reconstruction;
    acc.visual += s * b.visual;
    acc.contrastive += s * b.contrastive;
    acc.smoothness += s * b.smoothness;
}

/// Trains a fresh model on the training split of `dataset`. The variant is
/// taken from `config`.
pub fn train(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, model_config, config, |_| {})
}

/// As [`train`], calling `on_epoch` after each validation pass.
pub fn train_with_progress(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let pairs = enumerate_pairs(dataset, Split::Train);
    if pairs.is_empty() {
        return Err(Error::InvalidInput("training split has no pairs".into()));
    }
    let mut val_pairs = enumerate_pairs(dataset, Split::Val);
    if config.max_val_pairs > 0 && val_pairs.len() > config.max_val_pairs {
        val_pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xba1));
        val_pairs.truncate(config.max_val_pairs);
    }
    let model_config = &ModelConfig { variant: config.variant, ..model_config.clone() };
    let mut state = ModelState::new(Model::new(model_config)?, config.optimizer.clone());
    let weights = config.effective_weights();
    let acc = config.grad_accumulation;
    let steps_per_epoch = pairs.len().div_ceil(acc);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup = (config.warmup_fraction * total_steps as f64).round() as usize;
    let noise_std = model_config.backbone.input_noise_std;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffler);
        let mut epoch_loss = 0.0;
        for chunk_start in (0..order.len()).step_by(acc) {
            let chunk = &order[chunk_start..(chunk_start + acc).min(order.len())];
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = Gradients::default();
            let mut mean = LossBreakdown::default();
            for (offset, &idx) in chunk.iter().enumerate() {
                let seed = pair_seed(config.seed, epoch, chunk_start + offset);
                let pair = augment_pair(&pairs[idx], &config.augment, seed);
                let input = noisy(&pair.x_i, noise_std, seed ^ 1);
                let (g, b) = pair_gradients(&state.model, &pair, &input, &weights, seed, |_| true)?;
                grads.merge(&g, scale);
                add_breakdown(&mut mean, &b, scale);
            }
            let lr = config.learning_rate * warmup_cosine(state.step as usize, total_steps, warmup);
            state.optimizer.step(&mut state.model.store, &grads, lr, |g| g != ParamGroup::Frozen);
            ema_update(&mut state.ema, &state.model.store, config.ema_decay);
            state.step += 1;
            epoch_loss += mean.total * chunk.len() as f64;
            steps.push(StepRecord {
                step: state.step,
                epoch,
                total: mean.total,
                reconstruction: mean.reconstruction,
                visual: mean.visual,
                contrastive: mean.contrastive,
                smoothness: mean.smoothness,
                lr,
                val_psnr: None,
            });
        }
        let (val_loss, val_psnr) = if val_pairs.is_empty() {
            (None, None)
        } else {
            let (l, p) = score_pairs(&state, &val_pairs)?;
            (Some(l), Some(p))
        };
        if let Some(last) = steps.last_mut() {
            last.val_psnr = val_psnr;
        }
        let score = val_psnr.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || val_psnr.is_none()) {
            best = Some((score, epoch, state.ema.clone()));
        }
        let record = EpochRecord { epoch, train_loss: epoch_loss / pairs.len() as f64, val_loss, val_psnr };
        log::debug!(
            "epoch {epoch}: train {:.5} val_loss {:?} val_psnr {:?}",
            record.train_loss,
            record.val_loss,
            record.val_psnr
        );
        on_epoch(&record);
        epochs.push(record);
    }
    let (best_epoch, best_ema) = match best {
        Some((_, e, ema)) => (e, ema),
        None => (0, state.ema.clone()),
    };
    let mut best_state = state.clone();
    best_state.ema = best_ema;
    Ok(TrainOutcome { last: state, best: best_state, best_epoch, steps, epochs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtoConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Also adapt backbone and head instead of only the flow fields.
    pub full_model: bool,
}

impl Default for TtoConfig {
    fn default() -> Self {
        TtoConfig { iterations: 1, learning_rate: 1e-4, full_model: false }
    }
}

/// Mean reconstruction loss of EMA-weight forecasts over all pairs of
/// `history` (fixed stochastic seeds).
pub fn history_loss(state: &ModelState, history: &LongitudinalSeries, time_scale: f64) -> Result<f64> {
    let pairs = series_pairs(history, time_scale);
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!("series {} has fewer than 2 visits", history.series_id)));
    }
    let vars = state.ema_vars();
    let mut total = 0.0;
    for (k, p) in pairs.iter().enumerate() {
        let x = state.model.image_tensor(&[&p.x_i])?;
        let y = state.model.forward(&vars, &x, p.t_i, p.t_j, k as u64)?;
        total += reconstruction_loss(&y, &state.model.image_tensor(&[&p.x_j])?)?.item();
    }
    Ok(total / pairs.len() as f64)
}

/// Fine-tunes a copy of `state` on every pair within `history` and returns
/// it; `state` itself is not modified. The copy starts from the EMA weights,
/// uses a fresh optimizer without weight decay and the unregularized
/// reconstruction objective, and its EMA is set to the adapted weights.
pub fn test_time_optimize(
    state: &ModelState,
    history: &LongitudinalSeries,
    time_scale: f64,
    config: &TtoConfig,
) -> Result<ModelState> {
    if history.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "test-time optimization needs at least 2 observed visits, series {} has {}",
            history.series_id,
            history.len()
        )));
    }
    if state.model.fields.is_none() && !config.full_model {
        return Err(Error::Unsupported("model has no flow fields to adapt".into()));
    }
    let pairs = series_pairs(history, time_scale);
    let mut tuned = state.clone();
    tuned.model.store.copy_values_from(&state.ema);
    let opt_config = AdamWConfig { weight_decay: 0.0, ..state.optimizer.config.clone() };
    let mut opt = AdamW::new(opt_config, &tuned.model.store);
    let full = config.full_model;
    let track = move |g: ParamGroup| full || g == ParamGroup::FlowField;
    let scale = 1.0 / pairs.len() as f64;
    for _ in 0..config.iterations {
        let mut grads = Gradients::default();
        for (k, p) in pairs.iter().enumerate() {
            let (g, _) = pair_gradients(&tuned.model, p, &p.x_i, &LossWeights::none(), k as u64, track)?;
            grads.merge(&g, scale);
        }
        opt.step(&mut tuned.model.store, &grads, config.learning_rate, |g| g != ParamGroup::Frozen && track(g));
    }
    tuned.ema.copy_values_from(&tuned.model.store);
    Ok(tuned)
}

/// Forecast of the last visit of `series` from its second-to-last visit.
pub fn forecast_last(state: &ModelState, series: &LongitudinalSeries, time_scale: f64) -> Result<Image> {
    let n = series.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 visits".into()));
    }
    state.predict(&series.images[n - 2], series.times[n - 2] / time_scale, series.times[n - 1] / time_scale, false, 0)
}

/// Copies the first `n` visits of a series.
pub fn truncate_series(series: &LongitudinalSeries, n: usize) -> Result<LongitudinalSeries> {
    LongitudinalSeries::new(
        series.series_id.clone(),
        series.images[..n].to_vec(),
        series.times[..n].to_vec(),
        series.masks.as_ref().map(|m| m[..n].to_vec()),
    )
}

/// Trains the time-conditional UNet baseline.
pub fn train_t_unet(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train(dataset, model_config, &TrainConfig { variant: Variant::TUnet, ..config.clone() })
}

/// Gradients of one true batch sharing `(t_i, t_j)`.
#[cfg(test)]
fn batched_gradients(model: &Model, inputs: &[&Image], targets: &[&Image], t_i: f64, t_j: f64, w: &LossWeights) -> Gradients {
    let vars = model.store.bind_trainable();
    let batch = PairBatch {
        input: Image::batch(inputs).unwrap(),
        target: Image::batch(targets).unwrap(),
        t_i,
        t_j,
    };
    let terms = model.loss_terms(&vars, &batch, w, 0).unwrap();
    total_loss(&terms, w).0.backward()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::split_series_level;
    use crate::datasets::{generate_synthetic, SynthConfig};
    use crate::model::tests::{tiny_config, tiny_image};

    fn tiny_dataset(num_series: usize) -> Dataset {
        let cfg = SynthConfig {
            num_series,
            image_size: 8,
            visits_min: 3,
            visits_max: 4,
            lesion_base_radius: 1.5,
            growth_rate_range: (0.05, 0.1),
            ..SynthConfig::default()
        };
        split_series_level(&generate_synthetic(&cfg, 3).unwrap(), (0.5, 0.25, 0.25), 1).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 1,
            effective_batch: 2,
            grad_accumulation: 2,
            augment: AugmentPolicy::identity(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_one_epoch() {
        let data = tiny_dataset(4);
        let out = train(&data, &tiny_config(Variant::Ode), &quick_config()).unwrap();
        assert_eq!(out.epochs.len(), 1);
        assert!(out.epochs[0].val_psnr.is_some());
        assert_eq!(out.steps.len(), enumerate_pairs(&data, Split::Train).len().div_ceil(2));
        let dir = tempfile::tempdir().unwrap();
        out.write_history_csv(&dir.path().join("history.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(text.starts_with("step,epoch,total,reconstruction,visual,contrastive,smoothness,lr,val_psnr"));
        for v in [Variant::Sde, Variant::TUnet] {
            let out = train(&data, &tiny_config(Variant::Ode), &TrainConfig { variant: v, ..quick_config() }).unwrap();
            assert_eq!(out.epochs.len(), 1);
            assert_eq!(out.last.model.variant(), v);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let data = tiny_dataset(4);
        let bad = TrainConfig { effective_batch: 4, ..quick_config() };
        assert!(train(&data, &tiny_config(Variant::Ode), &bad).is_err());
        let mut empty = data.clone();
        empty.split_assignment.values_mut().for_each(|s| *s = Split::Test);
        assert!(train(&empty, &tiny_config(Variant::Ode), &quick_config()).is_err());
    }

    #[test]
    fn same_seed_same_result() {
        let data = tiny_dataset(4);
        let cfg = TrainConfig { augment: AugmentPolicy::default(), ..quick_config() };
        let cfg = TrainConfig { variant: Variant::Sde, ..cfg };
        let a = train(&data, &tiny_config(Variant::Sde), &cfg).unwrap();
        let b = train(&data, &tiny_config(Variant::Sde), &cfg).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.last.model.store.iter().map(|(_, e)| e.data.clone()).collect::<Vec<_>>(),
                   b.last.model.store.iter().map(|(_, e)| e.data.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn accumulation_matches_true_batch() {
        let model = Model::new(&tiny_config(Variant::Ode)).unwrap();
        let w = LossWeights { lambda_v: 0.0, lambda_c: 0.0, lambda_s: 0.1 };
        let xs: Vec<Image> = (0..4).map(|k| tiny_image(k as f64)).collect();
        let ys: Vec<Image> = (0..4).map(|k| tiny_image(k as f64 + 0.5)).collect();
        let mut acc = Gradients::default();
        for k in 0..4 {
            let pair = TrainingPair {
                series_id: "s".into(),
                i: 0,
                j: 1,
                x_i: xs[k].clone(),
                x_j: ys[k].clone(),
                t_i: 0.2,
                t_j: 0.7,
                mask_i: None,
                mask_j: None,
            };
            let (g, _) = pair_gradients(&model, &pair, &xs[k], &w, 0, |_| true).unwrap();
            acc.merge(&g, 0.25);
        }
        let batched = batched_gradients(&model, &xs.iter().collect::<Vec<_>>(), &ys.iter().collect::<Vec<_>>(), 0.2, 0.7, &w);
        let mut a = ModelState::new(model.clone(), AdamWConfig::default());
        let mut b = a.clone();
        a.optimizer.step(&mut a.model.store, &acc, 1e-2, |_| true);
        b.optimizer.step(&mut b.model.store, &batched, 1e-2, |_| true);
        let dist: f64 = a
            .model
            .store
            .iter()
            .zip(b.model.store.iter())
            .flat_map(|((_, p), (_, q))| p.data.iter().zip(&q.data).map(|(x, y)| (x - y).powi(2)))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-6, "{dist}");
    }

    #[test]
    fn overfits_single_pair() {
        let mut data = tiny_dataset(4);
        let keep = data.series_in(Split::Train).next().unwrap().series_id.clone();
        let s = data.series.iter_mut().find(|s| s.series_id == keep).unwrap();
        *s = truncate_series(s, 2).unwrap();
        data.split_assignment.iter_mut().for_each(|(id, sp)| {
            if *id != keep {
                *sp = Split::Test;
            }
        });
        let mut mc = tiny_config(Variant::Ode);
        mc.backbone.input_noise_std = 0.0;
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 200,
            effective_batch: 1,
            grad_accumulation: 1,
            regularizers_on: false,
            warmup_fraction: 0.0,
            augment: AugmentPolicy::identity(),
            optimizer: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
            ..TrainConfig::default()
        };
        let out = train(&data, &mc, &cfg).unwrap();
        let last = out.steps.last().unwrap().reconstruction;
        assert!(last < 1e-3, "{last}");
    }

    #[test]
    fn tto_contract() {
        let data = tiny_dataset(4);
        let out = train(&data, &tiny_config(Variant::Ode), &quick_config()).unwrap();
        let state = out.best;
        let series = data.series_in(Split::Test).next().unwrap().clone();
        let history = truncate_series(&series, series.len() - 1).unwrap();
        let before = state.clone();
        let zero = test_time_optimize(&state, &history, data.time_scale, &TtoConfig { iterations: 0, ..TtoConfig::default() }).unwrap();
        assert_eq!(forecast_last(&zero, &series, data.time_scale).unwrap(), forecast_last(&state, &series, data.time_scale).unwrap());
        let tuned = test_time_optimize(&state, &history, data.time_scale, &TtoConfig::default()).unwrap();
        for ((_, a), (_, b)) in tuned.model.store.iter().zip(before.ema.iter()) {
            if a.group != ParamGroup::FlowField {
                assert_eq!(a.data, b.data, "{}", a.name);
            }
        }
        assert_eq!(state.model.store.iter().map(|(_, e)| &e.data).collect::<Vec<_>>(),
                   before.model.store.iter().map(|(_, e)| &e.data).collect::<Vec<_>>());
        assert_ne!(tuned.ema.iter().map(|(_, e)| &e.data).collect::<Vec<_>>(),
                   state.ema.iter().map(|(_, e)| &e.data).collect::<Vec<_>>());
        let l0 = history_loss(&state, &history, data.time_scale).unwrap();
        let small = test_time_optimize(&state, &history, data.time_scale, &TtoConfig { learning_rate: 1e-6, ..TtoConfig::default() }).unwrap();
        assert!(history_loss(&small, &history, data.time_scale).unwrap() <= l0 + 1e-6);
        let single = LongitudinalSeries {
            series_id: "one".into(),
            images: vec![series.images[0].clone()],
            times: vec![0.0],
            masks: None,
        };
        assert!(test_time_optimize(&state, &single, data.time_scale, &TtoConfig::default()).is_err());
    }
}
