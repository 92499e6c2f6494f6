//! Training loss: reconstruction plus visual-feature, SimSiam and
//! trajectory-smoothness regularizers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, Linear};
use crate::tensor::{ParamGroup, ParamStore, Tensor, Vars};
use crate::{Error, Result};

const COS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_v: 0.001, lambda_c: 0.01, lambda_s: 0.1 }
    }
}

impl LossWeights {
    pub fn none() -> Self {
        LossWeights { lambda_v: 0.0, lambda_c: 0.0, lambda_s: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_v", self.lambda_v), ("lambda_c", self.lambda_c), ("lambda_s", self.lambda_s)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean squared error over every element.
pub fn reconstruction_loss(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x_hat.shape() != x.shape() {
        return Err(Error::shape(x.shape(), x_hat.shape()));
    }
    Ok(x_hat.sub(x).square().mean())
}

/// Frozen image-to-vector map used by the visual-feature term.
pub trait FeatureEncoder {
    /// `[N, C, H, W] -> [N, D]`.
    fn embed(&self, x: &Tensor) -> Tensor;
}

/// Three stride-2 3x3 convolutions with ReLU and random, never-trained
/// weights, flattened to a vector.
#[derive(Clone, Debug)]
pub struct RandomConvEncoder {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl RandomConvEncoder {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [in_channels, 8, 16, 32];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Conv2d::new(&mut store, &format!("feat.c{k}"), w[0], w[1], 3, 2, ParamGroup::Frozen, &mut rng))
            .collect();
        RandomConvEncoder { store, convs }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Replaces the weights, e.g. with externally trained ones of the same
    /// layout.
    pub fn load_weights(&mut self, other: &ParamStore) -> Result<()> {
        if !self.store.same_layout(other) {
            return Err(Error::InvalidInput("feature encoder weights have a different layout".into()));
        }
        self.store.copy_values_from(other);
        Ok(())
    }
}

impl FeatureEncoder for RandomConvEncoder {
    fn embed(&self, x: &Tensor) -> Tensor {
        let vars = self.store.bind_frozen();
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&vars, &h).relu();
        }
        let n = h.dim(0);
        let d = h.numel() / n;
        h.reshape(&[n, d])
    }
}

/// `-cos(e(x_hat), e(x))`, averaged over the batch.
pub fn visual_feature_loss(x_hat: &Tensor, x: &Tensor, encoder: &dyn FeatureEncoder) -> Result<Tensor> {
    if x_hat.shape() != x.shape() {
        return Err(Error::shape(x.shape(), x_hat.shape()));
    }
    let target = encoder.embed(x).detach();
    Ok(encoder.embed(x_hat).cosine_similarity(&target, COS_EPS).mean().scale(-1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub projection_dim: usize,
    pub predictor_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { projection_dim: 64, predictor_hidden: 32 }
    }
}

/// Projector and predictor MLPs of the SimSiam branch.
#[derive(Clone, Debug)]
pub struct ContrastiveHead {
    proj1: Linear,
    proj2: Linear,
    pred1: Linear,
    pred2: Linear,
}

impl ContrastiveHead {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, config: &HeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Head;
        let (p, h) = (config.projection_dim, config.predictor_hidden);
        ContrastiveHead {
            proj1: Linear::new(store, &format!("{prefix}.proj1"), input_dim, p, g, rng),
            proj2: Linear::new(store, &format!("{prefix}.proj2"), p, p, g, rng),
            pred1: Linear::new(store, &format!("{prefix}.pred1"), p, h, g, rng),
            pred2: Linear::new(store, &format!("{prefix}.pred2"), h, p, g, rng),
        }
    }

    pub fn project(&self, vars: &Vars, pooled: &Tensor) -> Tensor {
        self.proj2.forward(vars, &self.proj1.forward(vars, pooled).relu())
    }

    pub fn predict(&self, vars: &Vars, projection: &Tensor) -> Tensor {
        self.pred2.forward(vars, &self.pred1.forward(vars, projection).relu())
    }
}

/// Symmetric SimSiam objective from predictor outputs `p_*` and projections
/// `z_*`; the projection branch is cut from the graph in each half.
pub fn simsiam_loss(p_i: &Tensor, z_i: &Tensor, p_j: &Tensor, z_j: &Tensor) -> Tensor {
    let half = |p: &Tensor, z: &Tensor| p.cosine_similarity(&z.detach(), COS_EPS).mean().scale(-0.5);
    half(p_i, z_j).add(&half(p_j, z_i))
}

/// Contrastive term on two pooled bottleneck vectors `[N, C]` of the same
/// series.
pub fn contrastive_simsiam_loss(vars: &Vars, head: &ContrastiveHead, pooled_i: &Tensor, pooled_j: &Tensor) -> Tensor {
    let (z_i, z_j) = (head.project(vars, pooled_i), head.project(vars, pooled_j));
    let (p_i, p_j) = (head.predict(vars, &z_i), head.predict(vars, &z_j));
    simsiam_loss(&p_i, &z_i, &p_j, &z_j)
}

/// Unweighted loss terms of one forward pass; absent terms were skipped
/// because their weight is zero or the variant lacks them.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub reconstruction: Tensor,
    pub visual: Option<Tensor>,
    pub contrastive: Option<Tensor>,
    pub smoothness: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub visual: f64,
    pub contrastive: f64,
    pub smoothness: f64,
}

/// `l_r + lambda_v l_v + lambda_c l_c + lambda_s l_s`. Terms with zero
/// weight are not added at all.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> (Tensor, LossBreakdown) {
    let mut total = terms.reconstruction.clone();
    let mut b = LossBreakdown { reconstruction: terms.reconstruction.item(), ..LossBreakdown::default() };
    for (term, w, slot) in [
        (&terms.visual, weights.lambda_v, &mut b.visual),
        (&terms.contrastive, weights.lambda_c, &mut b.contrastive),
        (&terms.smoothness, weights.lambda_s, &mut b.smoothness),
    ] {
        if let Some(t) = term {
            *slot = t.item();
            if w != 0.0 {
                total = total.add(&t.scale(w));
            }
        }
    }
    b.total = total.item();
    (total, b)
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("reconstruction", self.reconstruction),
            ("visual", self.visual),
            ("contrastive", self.contrastive),
            ("smoothness", self.smoothness),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect(), shape)
    }

    /// Returns fixed vectors regardless of input, keyed by the first pixel.
    struct TableEncoder(Vec<(f64, Vec<f64>)>);

    impl FeatureEncoder for TableEncoder {
        fn embed(&self, x: &Tensor) -> Tensor {
            let key = x.data()[0];
            let v = &self.0.iter().find(|(k, _)| *k == key).expect("known key").1;
            Tensor::new(v.clone(), &[1, v.len()])
        }
    }

    #[test]
    fn reconstruction_examples() {
        let x = rand_tensor(1, &[1, 1, 4, 4]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap().item(), 0.0);
        let off = x.add_scalar(0.1);
        assert!((reconstruction_loss(&off, &x).unwrap().item() - 0.01).abs() < 1e-15);
        let y = rand_tensor(2, &[2, 3, 5, 5]);
        let z = rand_tensor(3, &[2, 3, 5, 5]);
        let brute = y.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.numel() as f64;
        assert!((reconstruction_loss(&y, &z).unwrap().item() - brute).abs() < 1e-10);
        assert!(reconstruction_loss(&y, &x).is_err());
    }

    #[test]
    fn visual_examples() {
        let enc = RandomConvEncoder::new(1, 0);
        let x = rand_tensor(4, &[1, 1, 16, 16]);
        assert!((visual_feature_loss(&x, &x, &enc).unwrap().item() + 1.0).abs() < 1e-12);
        let a = Tensor::full(&[1, 1, 2, 2], 0.25);
        let b = Tensor::full(&[1, 1, 2, 2], 0.75);
        let ortho = TableEncoder(vec![(0.25, vec![1.0, 0.0]), (0.75, vec![0.0, 2.0])]);
        assert_eq!(visual_feature_loss(&a, &b, &ortho).unwrap().item(), 0.0);
        let anti = TableEncoder(vec![(0.25, vec![1.0, 1.0]), (0.75, vec![-3.0, -3.0])]);
        assert!((visual_feature_loss(&a, &b, &anti).unwrap().item() - 1.0).abs() < 1e-8);
        // Zero embeddings stay finite.
        let zero = TableEncoder(vec![(0.25, vec![0.0, 0.0]), (0.75, vec![0.0, 0.0])]);
        assert_eq!(visual_feature_loss(&a, &b, &zero).unwrap().item(), 0.0);
    }

    #[test]
    fn simsiam_examples() {
        let z = rand_tensor(5, &[1, 6]);
        // Identity predictor, identical views.
        assert!((simsiam_loss(&z, &z, &z, &z).item() + 1.0).abs() < 1e-12);
        let e1 = Tensor::new(vec![1.0, 0.0], &[1, 2]);
        let e2 = Tensor::new(vec![0.0, 1.0], &[1, 2]);
        assert_eq!(simsiam_loss(&e1, &e1, &e2, &e2).item(), 0.0);
        // Symmetric under swapping the two views.
        let mut store = ParamStore::new();
        let head = ContrastiveHead::new(&mut store, "h", 6, &HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let vars = store.bind_frozen();
        let (a, b) = (rand_tensor(6, &[2, 6]), rand_tensor(7, &[2, 6]));
        let ab = contrastive_simsiam_loss(&vars, &head, &a, &b).item();
        let ba = contrastive_simsiam_loss(&vars, &head, &b, &a).item();
        assert_eq!(ab, ba);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn stop_gradient_on_projection_branch() {
        let mut store = ParamStore::new();
        let id = store.add("p", &[1, 3], vec![0.3, -0.2, 0.9], ParamGroup::Head);
        let other = store.add("z", &[1, 3], vec![0.5, 0.1, -0.4], ParamGroup::Head);
        let vars = store.bind_trainable();
        let p = vars.get(id).clone();
        let z = vars.get(other).clone();
        let g = simsiam_loss(&p, &z, &p, &z).backward();
        assert!(g.get(id).is_some());
        assert!(g.get(other).is_none());
    }

    #[test]
    fn total_combines_weighted_terms() {
        let terms = LossTerms {
            reconstruction: Tensor::scalar(0.5),
            visual: Some(Tensor::scalar(-0.8)),
            contrastive: Some(Tensor::scalar(-0.6)),
            smoothness: Some(Tensor::scalar(2.0)),
        };
        let (t, b) = total_loss(&terms, &LossWeights::none());
        assert_eq!(t.item(), 0.5);
        assert_eq!(b.visual, -0.8);
        let (t, _) = total_loss(&terms, &LossWeights { lambda_v: 0.1, lambda_c: 0.01, lambda_s: 1.0 });
        assert!((t.item() - (0.5 - 0.08 - 0.006 + 2.0)).abs() < 1e-15);
        assert!(LossWeights { lambda_v: -1.0, ..LossWeights::default() }.validate().is_err());
        let bad = LossBreakdown { smoothness: f64::NAN, ..LossBreakdown::default() };
        assert_eq!(bad.non_finite_term(), Some("smoothness"));
    }
}
