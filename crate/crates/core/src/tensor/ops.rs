use super::{GradFn, Tensor};

/// Elementwise op whose local derivative is precomputed at forward time.
struct Pointwise {
    input: Tensor,
    local: Vec<f64>,
}

impl GradFn for Pointwise {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().zip(&self.local).map(|(g, d)| g * d).collect())]
    }
}

struct AddFn {
    a: Tensor,
    b: Tensor,
    b_sign: f64,
}

impl GradFn for AddFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.a, &self.b]
    }
    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let ga = needs[0].then(|| grad.to_vec());
        let gb = needs[1].then(|| grad.iter().map(|g| self.b_sign * g).collect());
        vec![ga, gb]
    }
}

struct MulFn {
    a: Tensor,
    b: Tensor,
}

impl GradFn for MulFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.a, &self.b]
    }
    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let ga = needs[0].then(|| grad.iter().zip(self.b.data()).map(|(g, b)| g * b).collect());
        let gb = needs[1].then(|| grad.iter().zip(self.a.data()).map(|(g, a)| g * a).collect());
        vec![ga, gb]
    }
}

struct SumFn {
    input: Tensor,
    scale: f64,
}

impl GradFn for SumFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.scale; self.input.numel()])]
    }
}

struct ReshapeFn {
    input: Tensor,
}

impl GradFn for ReshapeFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Concatenation along axis 1 of `[N, C_k, ...]` tensors.
struct ConcatFn {
    parts: Vec<Tensor>,
}

impl GradFn for ConcatFn {
    fn inputs(&self) -> Vec<&Tensor> {
        self.parts.iter().collect()
    }
    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.parts[0].dim(0);
        let sizes: Vec<usize> = self.parts.iter().map(|p| p.numel() / n).collect();
        let row: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(self.parts.len());
        let mut offset = 0;
        for (k, &size) in sizes.iter().enumerate() {
            if needs[k] {
                let mut g = Vec::with_capacity(size * n);
                for s in 0..n {
                    let start = s * row + offset;
                    g.extend_from_slice(&grad[start..start + size]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += size;
        }
        out
    }
}

/// `x[n, c, ...] (+|*) v[n or 1, c]`.
struct ChannelFn {
    x: Tensor,
    v: Tensor,
    multiply: bool,
}

impl ChannelFn {
    fn layout(x: &Tensor, v: &Tensor) -> (usize, usize, usize, bool) {
        let n = x.dim(0);
        let c = x.dim(1);
        let inner = x.numel() / (n * c);
        let per_sample = match v.shape() {
            [vc] if *vc == c => false,
            [1, vc] if *vc == c => false,
            [vn, vc] if *vn == n && *vc == c => true,
            s => panic!("channel operand shape {s:?} incompatible with {:?}", x.shape()),
        };
        (n, c, inner, per_sample)
    }
}

impl GradFn for ChannelFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x, &self.v]
    }
    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c, inner, per_sample) = ChannelFn::layout(&self.x, &self.v);
        let v = self.v.data();
        let x = self.x.data();
        let gx = needs[0].then(|| {
            if !self.multiply {
                return grad.to_vec();
            }
            let mut g = vec![0.0; grad.len()];
            for s in 0..n {
                for ch in 0..c {
                    let scale = v[if per_sample { s * c + ch } else { ch }];
                    let base = (s * c + ch) * inner;
                    for k in base..base + inner {
                        g[k] = grad[k] * scale;
                    }
                }
            }
            g
        });
        let gv = needs[1].then(|| {
            let mut g = vec![0.0; self.v.numel()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    let acc: f64 = if self.multiply {
                        (base..base + inner).map(|k| grad[k] * x[k]).sum()
                    } else {
                        grad[base..base + inner].iter().sum()
                    };
                    g[if per_sample { s * c + ch } else { ch }] += acc;
                }
            }
            g
        });
        vec![gx, gv]
    }
}

struct UpsampleFn {
    input: Tensor,
}

impl GradFn for UpsampleFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = self.input.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut g = vec![0.0; self.input.numel()];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    g[(p * h + y / 2) * w + x / 2] += grad[(p * 2 * h + y) * 2 * w + x];
                }
            }
        }
        vec![Some(g)]
    }
}

struct AvgPoolFn {
    input: Tensor,
}

impl GradFn for AvgPoolFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = self.input.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut g = vec![0.0; self.input.numel()];
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    g[(p * h + y) * w + x] = 0.25 * grad[(p * ho + y / 2) * wo + x / 2];
                }
            }
        }
        vec![Some(g)]
    }
}

struct GlobalPoolFn {
    input: Tensor,
}

impl GradFn for GlobalPoolFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.input]
    }
    fn backward(&self, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let planes = self.input.dim(0) * self.input.dim(1);
        let inner = self.input.numel() / planes;
        let mut g = Vec::with_capacity(self.input.numel());
        for p in 0..planes {
            g.extend(std::iter::repeat_n(grad[p] / inner as f64, inner));
        }
        vec![Some(g)]
    }
}

/// Row-wise cosine similarity of `[N, D]` tensors.
struct CosineFn {
    a: Tensor,
    b: Tensor,
    eps: f64,
}

impl GradFn for CosineFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.a, &self.b]
    }
    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.a.dim(0);
        let d = self.a.numel() / n;
        let (a, b) = (self.a.data(), self.b.data());
        let mut ga = needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = needs[1].then(|| vec![0.0; b.len()]);
        for r in 0..n {
            let ar = &a[r * d..(r + 1) * d];
            let br = &b[r * d..(r + 1) * d];
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = br.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Below the guard the denominator is the constant eps.
            let clamped = na * nb < self.eps;
            let den = if clamped { self.eps } else { na * nb };
            // d/da [dot / (|a||b|)] = b/den - dot * |b| * a / (|a| den^2)
            if let Some(ga) = ga.as_mut() {
                let coef = if !clamped && na > 0.0 { dot * nb / (na * den * den) } else { 0.0 };
                for k in 0..d {
                    ga[r * d + k] = grad[r] * (br[k] / den - coef * ar[k]);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let coef = if !clamped && nb > 0.0 { dot * na / (nb * den * den) } else { 0.0 };
                for k in 0..d {
                    gb[r * d + k] = grad[r] * (ar[k] / den - coef * br[k]);
                }
            }
        }
        vec![ga, gb]
    }
}

struct BceFn {
    logits: Tensor,
    targets: Vec<f64>,
}

impl GradFn for BceFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.logits]
    }
    fn backward(&self, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let m = self.targets.len() as f64;
        let g = self
            .logits
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(x, t)| grad[0] * (sigmoid(*x) - t) / m)
            .collect();
        vec![Some(g)]
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Tensor {
    fn pointwise(&self, f: impl Fn(f64) -> (f64, f64)) -> Tensor {
        let (data, local): (Vec<f64>, Vec<f64>) = self.data().iter().map(|&x| f(x)).unzip();
        let input = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), self.requires_grad(), move || {
            Box::new(Pointwise { input, local })
        })
    }

    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(self.shape(), other.shape(), "{op}: shape mismatch");
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape().to_vec(), a.requires_grad() || b.requires_grad(), move || {
            Box::new(AddFn { a, b, b_sign: 1.0 })
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape().to_vec(), a.requires_grad() || b.requires_grad(), move || {
            Box::new(AddFn { a, b, b_sign: -1.0 })
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape().to_vec(), a.requires_grad() || b.requires_grad(), move || {
            Box::new(MulFn { a, b })
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.pointwise(|x| (x * s, s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.pointwise(|x| (x + s, 1.0))
    }

    pub fn square(&self) -> Tensor {
        self.pointwise(|x| (x * x, 2.0 * x))
    }

    pub fn relu(&self) -> Tensor {
        self.pointwise(|x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn tanh(&self) -> Tensor {
        self.pointwise(|x| {
            let y = x.tanh();
            (y, 1.0 - y * y)
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.pointwise(|x| {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.pointwise(|x| {
            let s = sigmoid(x);
            (x * s, s * (1.0 + x * (1.0 - s)))
        })
    }

    pub fn softplus(&self) -> Tensor {
        self.pointwise(|x| (softplus(x), sigmoid(x)))
    }

    pub fn sum(&self) -> Tensor {
        let input = self.clone();
        Tensor::from_op(vec![self.data().iter().sum()], vec![1], self.requires_grad(), move || {
            Box::new(SumFn { input, scale: 1.0 })
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let input = self.clone();
        Tensor::from_op(vec![self.data().iter().sum::<f64>() / n], vec![1], self.requires_grad(), move || {
            Box::new(SumFn { input, scale: 1.0 / n })
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(super::numel_of(shape), self.numel(), "reshape: element count mismatch");
        let input = self.clone();
        Tensor::from_op(self.to_vec(), shape.to_vec(), self.requires_grad(), move || {
            Box::new(ReshapeFn { input })
        })
    }

    /// Concatenates along axis 1. All parts share axis 0 and trailing axes.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let n = first[0];
        for p in parts {
            assert_eq!(p.dim(0), n, "concat: batch mismatch");
            assert_eq!(&p.shape()[2..], &first[2..], "concat: trailing shape mismatch");
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel() / n).collect();
        let mut data = Vec::with_capacity(sizes.iter().sum::<usize>() * n);
        for s in 0..n {
            for (p, &size) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&p.data()[s * size..(s + 1) * size]);
            }
        }
        let mut shape = first.to_vec();
        shape[1] = parts.iter().map(|p| p.dim(1)).sum();
        let track = parts.iter().any(|p| p.requires_grad());
        let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::from_op(data, shape, track, move || Box::new(ConcatFn { parts }))
    }

    fn channel_op(&self, v: &Tensor, multiply: bool) -> Tensor {
        let (n, c, inner, per_sample) = ChannelFn::layout(self, v);
        let mut data = self.to_vec();
        let vd = v.data();
        for s in 0..n {
            for ch in 0..c {
                let val = vd[if per_sample { s * c + ch } else { ch }];
                let base = (s * c + ch) * inner;
                for x in &mut data[base..base + inner] {
                    if multiply {
                        *x *= val;
                    } else {
                        *x += val;
                    }
                }
            }
        }
        let (x, v) = (self.clone(), v.clone());
        Tensor::from_op(data, self.shape().to_vec(), x.requires_grad() || v.requires_grad(), move || {
            Box::new(ChannelFn { x, v, multiply })
        })
    }

    /// Adds a per-channel value (`[C]` or `[N, C]`) across all positions.
    pub fn add_channels(&self, v: &Tensor) -> Tensor {
        self.channel_op(v, false)
    }

    /// Multiplies by a per-channel value (`[C]` or `[N, C]`).
    pub fn mul_channels(&self, v: &Tensor) -> Tensor {
        self.channel_op(v, true)
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "upsample2x expects NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut data = vec![0.0; planes * 4 * h * w];
        let src = self.data();
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let input = self.clone();
        Tensor::from_op(data, vec![s[0], s[1], 2 * h, 2 * w], self.requires_grad(), move || {
            Box::new(UpsampleFn { input })
        })
    }

    /// 2x2 average pooling of `[N, C, H, W]` with even H, W.
    pub fn avg_pool2x(&self) -> Tensor {
        let s = self.shape();
        assert!(s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2x expects even NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data();
        let mut data = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for x in 0..wo {
                    let at = |dy: usize, dx: usize| src[(p * h + 2 * y + dy) * w + 2 * x + dx];
                    data[(p * ho + y) * wo + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let input = self.clone();
        Tensor::from_op(data, vec![s[0], s[1], ho, wo], self.requires_grad(), move || {
            Box::new(AvgPoolFn { input })
        })
    }

    /// Mean over all axes after the channel axis: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Tensor {
        let (n, c) = (self.dim(0), self.dim(1));
        let inner = self.numel() / (n * c);
        let data = self
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let input = self.clone();
        Tensor::from_op(data, vec![n, c], self.requires_grad(), move || Box::new(GlobalPoolFn { input }))
    }

    /// Row-wise `a.b / max(|a||b|, eps)` over `[N, ...]`, giving `[N]`.
    pub fn cosine_similarity(&self, other: &Tensor, eps: f64) -> Tensor {
        self.assert_same_shape(other, "cosine_similarity");
        let n = self.dim(0);
        let d = self.numel() / n;
        let data = (0..n)
            .map(|r| {
                let a = &self.data()[r * d..(r + 1) * d];
                let b = &other.data()[r * d..(r + 1) * d];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb).max(eps)
            })
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![n], a.requires_grad() || b.requires_grad(), move || {
            Box::new(CosineFn { a, b, eps })
        })
    }

    /// Mean binary cross-entropy of logits against `{0,1}` (or soft) targets.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Tensor {
        assert_eq!(targets.len(), self.numel(), "bce: target length mismatch");
        let m = targets.len() as f64;
        let loss = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / m;
        let logits = self.clone();
        let targets = targets.to_vec();
        Tensor::from_op(vec![loss], vec![1], self.requires_grad(), move || Box::new(BceFn { logits, targets }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::ParamId;
    use super::*;

    /// Central differences of `f` at `x0`, for checking backward rules.
    fn numeric_grad(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.to_vec();
                p[i] += h;
                let fp = f(&Tensor::new(p.clone(), shape));
                p[i] -= 2.0 * h;
                let fm = f(&Tensor::new(p, shape));
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn check(shape: &[usize], f: impl Fn(&Tensor) -> Tensor) {
        let n: usize = shape.iter().product();
        let x0: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.17 + 0.03).collect();
        let x = Tensor::variable(ParamId(0), x0.clone(), shape);
        let g = f(&x).backward();
        let analytic = g.get(ParamId(0)).unwrap().to_vec();
        let numeric = numeric_grad(&x0, shape, |t| f(t).item());
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn pointwise_gradients() {
        check(&[2, 3], |x| x.silu().sum());
        check(&[2, 3], |x| x.sigmoid().square().sum());
        check(&[2, 3], |x| x.softplus().mean());
        check(&[2, 3], |x| x.tanh().scale(3.0).add_scalar(1.0).sum());
        check(&[2, 3], |x| x.mul(&x.silu()).sub(&x).sum());
    }

    #[test]
    fn structural_gradients() {
        let other = Tensor::new((0..16).map(|i| i as f64 * 0.1).collect(), &[1, 1, 4, 4]);
        check(&[1, 2, 4, 4], |x| Tensor::concat_channels(&[x, &other]).square().sum());
        check(&[1, 2, 2, 2], |x| x.upsample2x().square().sum());
        check(&[1, 2, 4, 4], |x| x.avg_pool2x().square().sum());
        check(&[2, 3, 2, 2], |x| x.global_avg_pool().square().sum());
        check(&[1, 6], |x| x.reshape(&[2, 3]).square().mean());
    }

    #[test]
    fn channel_gradients() {
        let v = Tensor::new(vec![0.5, -1.5], &[2]);
        check(&[1, 2, 2, 2], |x| x.mul_channels(&v).square().sum());
        let x = Tensor::new((0..16).map(|i| (i as f64).sin()).collect(), &[2, 2, 2, 2]);
        check(&[2, 2], |v| x.add_channels(v).square().sum());
        check(&[2], |v| x.mul_channels(v).square().sum());
    }

    #[test]
    fn cosine_and_bce_gradients() {
        let b = Tensor::new(vec![0.3, -0.2, 0.9, 0.1, 0.4, -0.7], &[2, 3]);
        check(&[2, 3], |a| a.cosine_similarity(&b, 1e-8).sum());
        check(&[2, 3], |a| b.cosine_similarity(a, 1e-8).square().sum());
        let t = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        check(&[2, 3], |x| x.bce_with_logits(&t));
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::variable(ParamId(0), vec![1.0, 2.0], &[2]);
        let y = x.detach().mul(&x).sum();
        let g = y.backward();
        assert_eq!(g.get(ParamId(0)).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut x = Tensor::variable(ParamId(0), vec![1.0], &[1]);
        for _ in 0..200_000 {
            x = x.add_scalar(1e-6);
        }
        let g = x.sum().backward();
        assert_eq!(g.get(ParamId(0)).unwrap(), &[1.0]);
    }
}
