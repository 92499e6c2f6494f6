//! Parameterized layers over [`ParamStore`] slots.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor, Vars};

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn num_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_scale(store, name, in_channels, out_channels, kernel, stride, group, rng, 1.0)
    }

    /// Like [`Conv2d::new`] with the initial weights multiplied by `scale`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_scale(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
        scale: f64,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform(rng, out_channels * fan_in, bound).into_iter().map(|v| v * scale).collect();
        let b = uniform(rng, out_channels, bound).into_iter().map(|v| v * scale).collect();
        let weight = store.add(format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], w, group);
        let bias = store.add(format!("{name}.bias"), &[out_channels], b, group);
        Conv2d { weight, bias, in_channels, out_channels, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Tensor {
        x.conv2d(vars.get(self.weight), Some(vars.get(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[out_features, in_features],
            uniform(rng, out_features * in_features, bound),
            group,
        );
        let bias = store.add(format!("{name}.bias"), &[out_features], uniform(rng, out_features, bound), group);
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Tensor {
        x.linear(vars.get(self.weight), Some(vars.get(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[channels], vec![1.0; channels], group);
        let beta = store.add(format!("{name}.beta"), &[channels], vec![0.0; channels], group);
        GroupNorm { gamma, beta, groups: num_groups(channels) }
    }

    pub fn forward(&self, vars: &Vars, x: &Tensor) -> Tensor {
        x.group_norm(vars.get(self.gamma), vars.get(self.beta), self.groups, 1e-5)
    }
}

/// Pre-activation residual block: GN, SiLU, conv, (+ time), GN, SiLU, conv,
/// plus a 1x1 projection on the skip path when channel counts differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    time_proj: Option<Linear>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        time_dim: Option<usize>,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), in_channels, group);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_channels, out_channels, 3, 1, group, rng);
        let time_proj = time_dim.map(|d| Linear::new(store, &format!("{name}.time"), d, out_channels, group, rng));
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), out_channels, group);
        let conv2 =
            Conv2d::with_scale(store, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, group, rng, 0.1);
        let skip = (in_channels != out_channels)
            .then(|| Conv2d::new(store, &format!("{name}.skip"), in_channels, out_channels, 1, 1, group, rng));
        ResBlock { norm1, conv1, norm2, conv2, skip, time_proj, in_channels, out_channels }
    }

    /// `time` is a `[N, time_dim]` embedding; required iff the block was
    /// built with a time projection.
    pub fn forward(&self, vars: &Vars, x: &Tensor, time: Option<&Tensor>) -> Tensor {
        let mut h = self.conv1.forward(vars, &self.norm1.forward(vars, x).silu());
        if let (Some(proj), Some(t)) = (&self.time_proj, time) {
            h = h.add_channels(&proj.forward(vars, &t.silu()));
        }
        let h = self.conv2.forward(vars, &self.norm2.forward(vars, &h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(vars, x),
            None => x.clone(),
        };
        skip.add(&h)
    }
}
