use super::{GradFn, Tensor};

/// `C[m x n] (+)= A[m x k] * B[k x n]` with explicit strides, so transposed
/// operands cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover every strided index for the given shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = ((g.w + g.pad).saturating_sub(kx)).div_ceil(g.stride).min(g.wo);
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let l = g.positions();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if hi > lo {
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (o, ix) in out_row[lo..hi].iter_mut().zip((ix0..).step_by(g.stride)) {
                                *o = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let l = g.positions();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(g, kx);
                if hi <= lo {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dx[base + ix0..base + ix0 + (hi - lo)].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (v, ix) in s.iter().zip((ix0..).step_by(g.stride)) {
                            dx[base + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

struct ConvFn {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    geom: ConvGeom,
}

impl GradFn for ConvFn {
    fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x, &self.w];
        if let Some(b) = &self.b {
            v.push(b);
        }
        v
    }

    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = self.geom;
        let n = self.x.dim(0);
        let cout = self.w.dim(0);
        let (kk, l) = (g.patch(), g.positions());
        let in_size = g.cin * g.h * g.w;
        let out_size = cout * l;
        let mut dx = needs[0].then(|| vec![0.0; self.x.numel()]);
        let mut dw = needs[1].then(|| vec![0.0; self.w.numel()]);
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { kk * l }];
        let mut dcol = vec![0.0; if dx.is_some() && !g.is_pointwise() { kk * l } else { 0 }];
        for s in 0..n {
            let dy = &grad[s * out_size..(s + 1) * out_size];
            let xs = &self.x.data()[s * in_size..(s + 1) * in_size];
            if let Some(dw) = dw.as_mut() {
                let cols: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut col);
                    &col
                };
                // dW[cout x kk] += dY[cout x l] * col^T[l x kk]
                gemm(cout, l, kk, dy, (l, 1), cols, (1, l), dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_size..(s + 1) * in_size];
                // dcol[kk x l] = W^T[kk x cout] * dY[cout x l]
                if g.is_pointwise() {
                    gemm(kk, cout, l, self.w.data(), (1, kk), dy, (l, 1), dxs, false);
                } else {
                    gemm(kk, cout, l, self.w.data(), (1, kk), dy, (l, 1), &mut dcol, false);
                    col2im(&dcol, &g, dxs);
                }
            }
        }
        let mut out = vec![dx, dw];
        if self.b.is_some() {
            let db = needs[2].then(|| {
                let mut db = vec![0.0; cout];
                for s in 0..n {
                    for (c, d) in db.iter_mut().enumerate() {
                        let start = s * out_size + c * l;
                        *d += grad[start..start + l].iter().sum::<f64>();
                    }
                }
                db
            });
            out.push(db);
        }
        out
    }
}

struct LinearFn {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
}

impl GradFn for LinearFn {
    fn inputs(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x, &self.w];
        if let Some(b) = &self.b {
            v.push(b);
        }
        v
    }

    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, din) = (self.x.dim(0), self.x.dim(1));
        let dout = self.w.dim(0);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * din];
            gemm(n, dout, din, grad, (dout, 1), self.w.data(), (din, 1), &mut dx, false);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; dout * din];
            gemm(dout, n, din, grad, (1, dout), self.x.data(), (din, 1), &mut dw, false);
            dw
        });
        let mut out = vec![dx, dw];
        if self.b.is_some() {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; dout];
                for row in grad.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                db
            }));
        }
        out
    }
}

struct GroupNormFn {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GradFn for GroupNormFn {
    fn inputs(&self) -> Vec<&Tensor> {
        vec![&self.x, &self.gamma, &self.beta]
    }

    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, c) = (self.x.dim(0), self.x.dim(1));
        let inner = self.x.numel() / (n * c);
        let cpg = c / self.groups;
        let m = (cpg * inner) as f64;
        let gamma = self.gamma.data();
        let xh = &self.normalized;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for k in base..base + inner {
                    dgamma[ch] += grad[k] * xh[k];
                    dbeta[ch] += grad[k];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; self.x.numel()];
            for s in 0..n {
                for gi in 0..self.groups {
                    let start = (s * c + gi * cpg) * inner;
                    let end = start + cpg * inner;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for k in start..end {
                        let ch = (k / inner) % c;
                        let d = grad[k] * gamma[ch];
                        sum_d += d;
                        sum_dx += d * xh[k];
                    }
                    let inv = self.inv_std[s * self.groups + gi];
                    for k in start..end {
                        let ch = (k / inner) % c;
                        let d = grad[k] * gamma[ch];
                        dx[k] = inv / m * (m * d - sum_d - xh[k] * sum_dx);
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

impl Tensor {
    /// 2-D convolution of `[N, Cin, H, W]` with weights `[Cout, Cin, k, k]`
    /// and optional bias `[Cout]`. Zero padding.
    pub fn conv2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let xs = self.shape();
        let ws = w.shape();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects 4-D input and weight");
        assert_eq!(xs[1], ws[1], "conv2d: input channels {} vs weight {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let (kk, l) = (geom.patch(), geom.positions());
        let mut out = vec![0.0; n * cout * l];
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { kk * l }];
        let in_size = cin * h * wd;
        for s in 0..n {
            let x = &self.data()[s * in_size..(s + 1) * in_size];
            let dst = &mut out[s * cout * l..(s + 1) * cout * l];
            if let Some(b) = b {
                for (c, chunk) in dst.chunks_mut(l).enumerate() {
                    chunk.fill(b.data()[c]);
                }
            }
            let cols: &[f64] = if geom.is_pointwise() {
                x
            } else {
                im2col(x, &geom, &mut col);
                &col
            };
            gemm(cout, kk, l, w.data(), (kk, 1), cols, (l, 1), dst, b.is_some());
        }
        let track = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        let (x, w, b) = (self.clone(), w.clone(), b.cloned());
        Tensor::from_op(out, vec![n, cout, geom.ho, geom.wo], track, move || {
            Box::new(ConvFn { x, w, b, geom })
        })
    }

    /// `x[N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        assert_eq!(self.shape().len(), 2, "linear expects [N, in]");
        let (n, din) = (self.dim(0), self.dim(1));
        assert_eq!(w.dim(1), din, "linear: weight expects {} inputs, got {din}", w.dim(1));
        let dout = w.dim(0);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(n, din, dout, self.data(), (din, 1), w.data(), (1, din), &mut out, b.is_some());
        let track = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        let (x, w, b) = (self.clone(), w.clone(), b.cloned());
        Tensor::from_op(out, vec![n, dout], track, move || Box::new(LinearFn { x, w, b }))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
        let (n, c) = (self.dim(0), self.dim(1));
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        assert_eq!(gamma.numel(), c);
        assert_eq!(beta.numel(), c);
        let inner = self.numel() / (n * c);
        let cpg = c / groups;
        let m = (cpg * inner) as f64;
        let x = self.data();
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * groups];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for gi in 0..groups {
                let start = (s * c + gi * cpg) * inner;
                let end = start + cpg * inner;
                let mean = x[start..end].iter().sum::<f64>() / m;
                let var = x[start..end].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[s * groups + gi] = inv;
                for k in start..end {
                    let ch = (k / inner) % c;
                    let xh = (x[k] - mean) * inv;
                    normalized[k] = xh;
                    out[k] = xh * gamma.data()[ch] + beta.data()[ch];
                }
            }
        }
        let track = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let (xt, gamma, beta) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(out, self.shape().to_vec(), track, move || {
            Box::new(GroupNormFn { x: xt, gamma, beta, groups, normalized, inv_std })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::ParamId;
    use super::*;

    fn seq(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let [n, cin, h, wd] = xs;
        let [cout, _, k, _] = ws;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((s * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((s * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 5), (2, 2, 5), (3, 1, 3)] {
            let xs = [2, 3, 7, 6];
            let ws = [4, 3, k, k];
            let x = seq(xs.iter().product(), 1);
            let w = seq(ws.iter().product(), 2);
            let b = seq(4, 3);
            let got = Tensor::new(x.clone(), &xs).conv2d(
                &Tensor::new(w.clone(), &ws),
                Some(&Tensor::new(b.clone(), &[4])),
                stride,
                pad,
            );
            let want = conv_naive(&x, xs, &w, ws, &b, stride, pad);
            for (a, e) in got.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    fn fd_check(params: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[Tensor]) -> Tensor) {
        let leaves: Vec<Tensor> = params
            .iter()
            .enumerate()
            .map(|(i, (d, s))| Tensor::variable(ParamId(i), d.clone(), s))
            .collect();
        let grads = f(&leaves).backward();
        let h = 1e-6;
        for (pi, (d, s)) in params.iter().enumerate() {
            let analytic = grads.get(ParamId(pi)).expect("missing gradient");
            for i in 0..d.len() {
                let eval = |delta: f64| {
                    let ts: Vec<Tensor> = params
                        .iter()
                        .enumerate()
                        .map(|(j, (dj, sj))| {
                            let mut v = dj.clone();
                            if j == pi {
                                v[i] += delta;
                            }
                            Tensor::new(v, sj)
                        })
                        .collect();
                    f(&ts).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (analytic[i] - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                    "param {pi} idx {i} (shape {s:?}): analytic {} numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (3, 1, 3)] {
            fd_check(
                &[
                    (seq(2 * 2 * 5 * 4, 4), vec![2, 2, 5, 4]),
                    (seq(3 * 2 * k * k, 5), vec![3, 2, k, k]),
                    (seq(3, 6), vec![3]),
                ],
                |t| t[0].conv2d(&t[1], Some(&t[2]), stride, pad).square().sum(),
            );
        }
    }

    #[test]
    fn linear_gradients() {
        fd_check(
            &[(seq(6, 1), vec![2, 3]), (seq(12, 2), vec![4, 3]), (seq(4, 3), vec![4])],
            |t| t[0].linear(&t[1], Some(&t[2])).tanh().sum(),
        );
    }

    #[test]
    fn group_norm_gradients() {
        let weights = Tensor::new(seq(2 * 4 * 3 * 3, 9), &[2, 4, 3, 3]);
        fd_check(
            &[(seq(2 * 4 * 3 * 3, 7), vec![2, 4, 3, 3]), (seq(4, 8), vec![4]), (seq(4, 9), vec![4])],
            |t| t[0].group_norm(&t[1], &t[2], 2, 1e-5).mul(&weights).sum(),
        );
    }

    #[test]
    fn group_norm_normalizes() {
        let x = Tensor::new(seq(64, 3), &[1, 4, 4, 4]);
        let y = x.group_norm(&Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1, 0.0);
        let mean = y.data().iter().sum::<f64>() / 64.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
}
