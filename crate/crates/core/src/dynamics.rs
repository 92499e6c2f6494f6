//! Per-layer flow fields and fixed-step ODE/SDE integration of latents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::MultiscaleLatent;
use crate::nn::{Conv2d, Linear};
use crate::tensor::{ParamGroup, ParamStore, Tensor, Vars};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Autonomous field `f(z)`.
    Position,
    /// `f(z, tau)` with `tau` broadcast as an extra input channel.
    PositionAndTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// One field per latent layer.
    PerLayer,
    /// One field per resolution, shared by the layers at that resolution.
    PerResolution,
    /// Only the bottleneck evolves; every other latent passes through.
    BottleneckOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Euler,
    Rk4,
    EulerMaruyama,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps_per_unit_time: usize,
    /// Permit `t_j < t_i`.
    pub allow_backward: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { method: SolverMethod::Euler, steps_per_unit_time: 10, allow_backward: false }
    }
}

impl SolverConfig {
    /// `max(1, ceil(steps_per_unit_time * |dt|))`, ignoring rounding noise
    /// below 1e-9 steps.
    pub fn num_steps(&self, dt: f64) -> usize {
        let raw = self.steps_per_unit_time as f64 * dt.abs();
        ((raw - 1e-9).ceil() as usize).max(1)
    }
}

/// Which quantity the smoothness regularizer penalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessNorm {
    /// Squared output norm of the field at trajectory latents.
    FieldOutput,
    /// Squared norm of the field parameters.
    Parameters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub parameterization: Parameterization,
    pub sharing: Sharing,
    pub solver: SolverConfig,
    /// Hidden width of each diffusion-scale MLP.
    pub sigma_hidden: usize,
    /// Initial pre-softplus bias of the diffusion scale.
    pub sigma_init_bias: f64,
    pub smoothness_norm: SmoothnessNorm,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            parameterization: Parameterization::Position,
            sharing: Sharing::PerLayer,
            solver: SolverConfig::default(),
            sigma_hidden: 16,
            sigma_init_bias: -3.0,
            smoothness_norm: SmoothnessNorm::FieldOutput,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.solver.steps_per_unit_time == 0 {
            return Err(Error::Config("steps_per_unit_time must be at least 1".into()));
        }
        if self.sigma_hidden == 0 {
            return Err(Error::Config("sigma_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Velocity of latent layer `layer` at state `z` and time `tau`.
pub trait Drift {
    fn is_active(&self, layer: usize) -> bool;
    fn eval(&self, layer: usize, z: &Tensor, tau: f64) -> Tensor;
}

/// Per-channel diffusion scale `[C]` of layer `layer` at time `tau`.
pub trait Diffusion {
    fn sigma(&self, layer: usize, tau: f64) -> Tensor;
}

/// Two 3x3 convolutions with a tanh in between; output channels equal the
/// latent's channels.
#[derive(Clone, Debug)]
pub struct FlowField {
    conv1: Conv2d,
    conv2: Conv2d,
    time_input: bool,
}

impl FlowField {
    fn new(store: &mut ParamStore, name: &str, channels: usize, time_input: bool, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::FlowField;
        let cin = channels + usize::from(time_input);
        FlowField {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, channels, 3, 1, g, rng),
            conv2: Conv2d::with_scale(store, &format!("{name}.conv2"), channels, channels, 3, 1, g, rng, 0.1),
            time_input,
        }
    }

    pub fn forward(&self, vars: &Vars, z: &Tensor, tau: f64) -> Tensor {
        let input = if self.time_input {
            let s = z.shape();
            let t = Tensor::full(&[s[0], 1, s[2], s[3]], tau);
            Tensor::concat_channels(&[z, &t])
        } else {
            z.clone()
        };
        self.conv2.forward(vars, &self.conv1.forward(vars, &input).tanh())
    }
}

fn layer_map(sharing: Sharing, resolution_of: &[usize]) -> Vec<Option<usize>> {
    let b = resolution_of.len();
    match sharing {
        Sharing::PerLayer => (0..b).map(Some).collect(),
        Sharing::PerResolution => resolution_of.iter().map(|&r| Some(r)).collect(),
        Sharing::BottleneckOnly => (0..b).map(|l| (l + 1 == b).then_some(0)).collect(),
    }
}

/// Flow fields for every latent layer, with the configured sharing.
#[derive(Clone, Debug)]
pub struct FlowFieldSet {
    pub fields: Vec<FlowField>,
    /// Layer -> index into `fields`; `None` leaves that latent unchanged.
    pub layer_to_field: Vec<Option<usize>>,
    pub parameterization: Parameterization,
    pub sharing: Sharing,
}

impl FlowFieldSet {
    /// `channels[b]` and `resolution_of[b]` describe latent `b`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[usize],
        resolution_of: &[usize],
        config: &DynamicsConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layer_to_field = layer_map(config.sharing, resolution_of);
        let time_input = config.parameterization == Parameterization::PositionAndTime;
        let mut fields = Vec::new();
        for (layer, slot) in layer_to_field.iter().enumerate() {
            if let Some(k) = *slot {
                if k == fields.len() {
                    fields.push(FlowField::new(store, &format!("{prefix}.f{k}"), channels[layer], time_input, rng));
                }
            }
        }
        FlowFieldSet { fields, layer_to_field, parameterization: config.parameterization, sharing: config.sharing }
    }

    pub fn bind<'a>(&'a self, vars: &'a Vars) -> BoundFields<'a> {
        BoundFields { set: self, vars }
    }
}

pub struct BoundFields<'a> {
    set: &'a FlowFieldSet,
    vars: &'a Vars,
}

impl Drift for BoundFields<'_> {
    fn is_active(&self, layer: usize) -> bool {
        matches!(self.set.layer_to_field.get(layer), Some(Some(_)))
    }

    fn eval(&self, layer: usize, z: &Tensor, tau: f64) -> Tensor {
        let k = self.set.layer_to_field[layer].expect("eval on inactive layer");
        self.set.fields[k].forward(self.vars, z, tau)
    }
}

/// `sigma(tau) = softplus(W2 tanh(W1 tau + b1) + b2)`, one MLP per field.
#[derive(Clone, Debug)]
pub struct DiffusionTermSet {
    nets: Vec<(Linear, Linear)>,
    pub layer_to_net: Vec<Option<usize>>,
}

impl DiffusionTermSet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[usize],
        resolution_of: &[usize],
        config: &DynamicsConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layer_to_net = layer_map(config.sharing, resolution_of);
        let g = ParamGroup::Diffusion;
        let mut nets = Vec::new();
        for (layer, slot) in layer_to_net.iter().enumerate() {
            if let Some(k) = *slot {
                if k == nets.len() {
                    let fc1 = Linear::new(store, &format!("{prefix}.s{k}.fc1"), 1, config.sigma_hidden, g, rng);
                    let fc2 = Linear::new(store, &format!("{prefix}.s{k}.fc2"), config.sigma_hidden, channels[layer], g, rng);
                    store.get_mut(fc2.bias).data.iter_mut().for_each(|b| *b = config.sigma_init_bias);
                    nets.push((fc1, fc2));
                }
            }
        }
        DiffusionTermSet { nets, layer_to_net }
    }

    pub fn bind<'a>(&'a self, vars: &'a Vars) -> BoundDiffusion<'a> {
        BoundDiffusion { set: self, vars }
    }
}

pub struct BoundDiffusion<'a> {
    set: &'a DiffusionTermSet,
    vars: &'a Vars,
}

impl Diffusion for BoundDiffusion<'_> {
    fn sigma(&self, layer: usize, tau: f64) -> Tensor {
        let k = self.set.layer_to_net[layer].expect("sigma on inactive layer");
        let (fc1, fc2) = &self.set.nets[k];
        let h = fc1.forward(self.vars, &Tensor::new(vec![tau], &[1, 1])).tanh();
        let out = fc2.forward(self.vars, &h).softplus();
        let c = out.numel();
        out.reshape(&[c])
    }
}

/// Spans are snapped to a 2^-32 grid so that equal spans computed from
/// different endpoints (`0.3 - 0.0` vs `5.3 - 5.0`) give identical steps.
fn quantized_span(t_i: f64, t_j: f64) -> f64 {
    const GRID: f64 = 4294967296.0;
    ((t_j - t_i) * GRID).round() / GRID
}

fn check_span(t_i: f64, t_j: f64, solver: &SolverConfig) -> Result<f64> {
    if !t_i.is_finite() || !t_j.is_finite() {
        return Err(Error::InvalidInput("integration endpoints must be finite".into()));
    }
    if t_j < t_i && !solver.allow_backward {
        return Err(Error::InvalidInput(format!(
            "backward integration from {t_i} to {t_j} requires allow_backward"
        )));
    }
    Ok(quantized_span(t_i, t_j))
}

fn finite_or(layer: usize, step: usize, z: Tensor) -> Result<Tensor> {
    if z.all_finite() {
        Ok(z)
    } else {
        Err(Error::Integration { layer, step })
    }
}

/// Evolves every active latent from `t_i` to `t_j` with the configured
/// fixed-step method (`EulerMaruyama` falls back to plain Euler here).
pub fn integrate_ode(
    z: &MultiscaleLatent,
    t_i: f64,
    t_j: f64,
    drift: &dyn Drift,
    solver: &SolverConfig,
) -> Result<MultiscaleLatent> {
    let dt = check_span(t_i, t_j, solver)?;
    if dt == 0.0 {
        return Ok(z.clone());
    }
    let n = solver.num_steps(dt);
    let h = dt / n as f64;
    let mut out = Vec::with_capacity(z.len());
    for (layer, z0) in z.latents.iter().enumerate() {
        if !drift.is_active(layer) {
            out.push(z0.clone());
            continue;
        }
        let mut zk = z0.clone();
        for step in 0..n {
            let tau = t_i + step as f64 * h;
            let next = match solver.method {
                SolverMethod::Euler | SolverMethod::EulerMaruyama => zk.add(&drift.eval(layer, &zk, tau).scale(h)),
                SolverMethod::Rk4 => {
                    let k1 = drift.eval(layer, &zk, tau);
                    let k2 = drift.eval(layer, &zk.add(&k1.scale(h / 2.0)), tau + h / 2.0);
                    let k3 = drift.eval(layer, &zk.add(&k2.scale(h / 2.0)), tau + h / 2.0);
                    let k4 = drift.eval(layer, &zk.add(&k3.scale(h)), tau + h);
                    let incr = k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4);
                    zk.add(&incr.scale(h / 6.0))
                }
            };
            zk = finite_or(layer, step, next)?;
        }
        out.push(zk);
    }
    Ok(MultiscaleLatent { latents: out, resolution_of: z.resolution_of.clone() })
}

/// Euler-Maruyama: `z <- z + f(z, tau) h + sigma(tau) sqrt(h) xi`. Brownian
/// increments for layer `b` come from a ChaCha8 stream `b` seeded by `seed`.
pub fn integrate_sde(
    z: &MultiscaleLatent,
    t_i: f64,
    t_j: f64,
    drift: &dyn Drift,
    diffusion: &dyn Diffusion,
    solver: &SolverConfig,
    seed: u64,
) -> Result<MultiscaleLatent> {
    let dt = check_span(t_i, t_j, solver)?;
    if dt == 0.0 {
        return Ok(z.clone());
    }
    let n = solver.num_steps(dt);
    let h = dt / n as f64;
    let sqrt_h = h.abs().sqrt();
    let mut out = Vec::with_capacity(z.len());
    for (layer, z0) in z.latents.iter().enumerate() {
        if !drift.is_active(layer) {
            out.push(z0.clone());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(layer as u64);
        let mut zk = z0.clone();
        for step in 0..n {
            let tau = t_i + step as f64 * h;
            let xi: Vec<f64> = (0..zk.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise = Tensor::new(xi, zk.shape()).mul_channels(&diffusion.sigma(layer, tau)).scale(sqrt_h);
            let next = zk.add(&drift.eval(layer, &zk, tau).scale(h)).add(&noise);
            zk = finite_or(layer, step, next)?;
        }
        out.push(zk);
    }
    Ok(MultiscaleLatent { latents: out, resolution_of: z.resolution_of.clone() })
}

/// Mean over active layers and sampled latent sets of the per-position
/// squared channel norm of the field output. `samples` pairs each latent set
/// with the time at which the field is evaluated.
pub fn field_output_norms(drift: &dyn Drift, samples: &[(&MultiscaleLatent, f64)]) -> Tensor {
    let mut terms = Vec::new();
    for (z, tau) in samples {
        for (layer, zb) in z.latents.iter().enumerate() {
            if !drift.is_active(layer) {
                continue;
            }
            let f = drift.eval(layer, zb, *tau);
            let positions = (f.numel() / f.dim(1)) as f64;
            terms.push(f.square().sum().scale(1.0 / positions));
        }
    }
    if terms.is_empty() {
        return Tensor::scalar(0.0);
    }
    let k = terms.len() as f64;
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t);
    }
    acc.scale(1.0 / k)
}
