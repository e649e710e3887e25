//! Layers with hand-written backward passes.
//!
//! Activations inside the backbone are laid out channel-major over the whole
//! batch (`C x N x H x W`), which turns every convolution into a single GEMM
//! against an im2col buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Batched activation in `C x N x H x W` order.
#[derive(Debug, Clone)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    fn same_shape(&self, data: Vec<f32>) -> Act {
        Act {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data,
        }
    }
}

/// `C = op(A) * op(B) + beta * C` with row-major operands.
///
/// `op(A)` is `m x k`; when `a_trans` is set, `a` holds the `k x m` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
}

pub struct ConvCache {
    col: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
        let value = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                value,
            ),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Act) -> Vec<f32> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let cols = x.n * ho * wo;
        let k = self.kernel;
        let mut col = vec![0.0f32; self.in_channels * k * k * cols];
        for ci in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for n in 0..x.n {
                        let src = &x.data[(ci * x.n + n) * x.h * x.w..][..x.h * x.w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.w..][..x.w];
                            let dst_row = &mut dst[(n * ho + oy) * wo..][..wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], shape: (usize, usize, usize, usize)) -> Act {
        let (c, n_batch, h, w) = shape;
        let (ho, wo) = self.out_hw(h, w);
        let cols = n_batch * ho * wo;
        let k = self.kernel;
        let mut dx = Act::zeros(c, n_batch, h, w);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for n in 0..n_batch {
                        let dst = &mut dx.data[(ci * n_batch + n) * h * w..][..h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..][..w];
                            let src_row = &src[(n * ho + oy) * wo..][..wo];
                            for (ox, &g) in src_row.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Act) -> (Act, ConvCache) {
        debug_assert_eq!(x.c, self.in_channels);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let cols = x.n * ho * wo;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let col = self.im2col(x);
        let mut y = Act::zeros(self.out_channels, x.n, ho, wo);
        gemm(
            self.out_channels,
            kdim,
            cols,
            &self.weight.value,
            false,
            &col,
            false,
            0.0,
            &mut y.data,
        );
        (
            y,
            ConvCache {
                col,
                in_shape: (x.c, x.n, x.h, x.w),
            },
        )
    }

    /// Accumulates the weight gradient; returns the input gradient when requested.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Act, need_input_grad: bool) -> Option<Act> {
        let cols = dy.n * dy.h * dy.w;
        let kdim = self.in_channels * self.kernel * self.kernel;
        gemm(
            self.out_channels,
            cols,
            kdim,
            &dy.data,
            false,
            &cache.col,
            true,
            1.0,
            &mut self.weight.grad,
        );
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![0.0f32; kdim * cols];
        gemm(
            kdim,
            self.out_channels,
            cols,
            &self.weight.value,
            true,
            &dy.data,
            false,
            0.0,
            &mut dcol,
        );
        Some(self.col2im(&dcol, cache.in_shape))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
}

pub struct GroupNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        GroupNorm {
            channels,
            groups,
            eps: 1e-5,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
        }
    }

    pub fn forward(&self, x: &Act) -> (Act, GroupNormCache) {
        let hw = x.h * x.w;
        let per_group = self.channels / self.groups;
        let count = (per_group * hw) as f32;
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut y = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; x.n * self.groups];
        for n in 0..x.n {
            for g in 0..self.groups {
                let channels = g * per_group..(g + 1) * per_group;
                let plane = |c: usize| (c * x.n + n) * hw;
                let mut mean = 0.0f32;
                for c in channels.clone() {
                    mean += x.data[plane(c)..plane(c) + hw].iter().sum::<f32>();
                }
                mean /= count;
                let mut var = 0.0f32;
                for c in channels.clone() {
                    var += x.data[plane(c)..plane(c) + hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f32>();
                }
                var /= count;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[n * self.groups + g] = istd;
                for c in channels {
                    let (gm, bt) = (self.gamma.value[c], self.beta.value[c]);
                    for i in plane(c)..plane(c) + hw {
                        let xh = (x.data[i] - mean) * istd;
                        xhat[i] = xh;
                        y[i] = gm * xh + bt;
                    }
                }
            }
        }
        (x.same_shape(y), GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Act) -> Act {
        let hw = dy.h * dy.w;
        let per_group = self.channels / self.groups;
        let count = (per_group * hw) as f32;
        let mut dx = vec![0.0f32; dy.data.len()];
        for n in 0..dy.n {
            for g in 0..self.groups {
                let channels = g * per_group..(g + 1) * per_group;
                let plane = |c: usize| (c * dy.n + n) * hw;
                let mut sum_d = 0.0f32;
                let mut sum_dx = 0.0f32;
                for c in channels.clone() {
                    let gm = self.gamma.value[c];
                    let mut dgamma = 0.0f32;
                    let mut dbeta = 0.0f32;
                    for i in plane(c)..plane(c) + hw {
                        let d = dy.data[i];
                        dgamma += d * cache.xhat[i];
                        dbeta += d;
                        let dxh = d * gm;
                        sum_d += dxh;
                        sum_dx += dxh * cache.xhat[i];
                    }
                    self.gamma.grad[c] += dgamma;
                    self.beta.grad[c] += dbeta;
                }
                let mean_d = sum_d / count;
                let mean_dx = sum_dx / count;
                let istd = cache.inv_std[n * self.groups + g];
                for c in channels {
                    let gm = self.gamma.value[c];
                    for i in plane(c)..plane(c) + hw {
                        let dxh = dy.data[i] * gm;
                        dx[i] = istd * (dxh - mean_d - cache.xhat[i] * mean_dx);
                    }
                }
            }
        }
        dy.same_shape(dx)
    }
}

pub fn relu(x: &mut Act) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` in place by the positive entries of the ReLU output `y`.
pub fn relu_backward(y: &Act, dy: &mut Act) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn add_in_place(x: &mut Act, other: &Act) {
    for (a, b) in x.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

/// Global average pooling into row-major `N x C` features.
pub fn global_avg_pool(x: &Act) -> Vec<f32> {
    let hw = (x.h * x.w) as f32;
    let mut out = vec![0.0f32; x.n * x.c];
    for c in 0..x.c {
        for n in 0..x.n {
            let s: f32 = x.data[(c * x.n + n) * x.h * x.w..][..x.h * x.w].iter().sum();
            out[n * x.c + c] = s / hw;
        }
    }
    out
}

pub fn global_avg_pool_backward(dfeat: &[f32], shape: (usize, usize, usize, usize)) -> Act {
    let (c, n_batch, h, w) = shape;
    let hw = h * w;
    let mut dx = Act::zeros(c, n_batch, h, w);
    for ch in 0..c {
        for n in 0..n_batch {
            let g = dfeat[n * c + ch] / hw as f32;
            dx.data[(ch * n_batch + n) * hw..][..hw]
                .iter_mut()
                .for_each(|v| *v = g);
        }
    }
    dx
}

/// Fully connected layer over row-major `N x in` features.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            in_features,
            out_features,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_features, in_features],
                weight,
            ),
            bias: Param::new(format!("{name}.bias"), vec![out_features], bias),
        }
    }

    pub fn forward(&self, features: &[f32], n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; n * self.out_features];
        for row in out.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            features,
            false,
            &self.weight.value,
            true,
            1.0,
            &mut out,
        );
        out
    }

    /// Accumulates parameter gradients and adds the feature gradient into `dfeat`.
    pub fn backward(&mut self, features: &[f32], dlogits: &[f32], n: usize, dfeat: &mut [f32]) {
        gemm(
            self.out_features,
            n,
            self.in_features,
            dlogits,
            true,
            features,
            false,
            1.0,
            &mut self.weight.grad,
        );
        for row in dlogits.chunks_exact(self.out_features) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        gemm(
            n,
            self.out_features,
            self.in_features,
            dlogits,
            false,
            &self.weight.value,
            false,
            1.0,
            dfeat,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_act(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Act {
        let mut a = Act::zeros(c, n, h, w);
        a.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        a
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new("c", 2, 3, 3, 2, &mut rng);
        let x = random_act(2, 2, 5, 5, &mut rng);
        let (y, _) = conv.forward(&x);
        assert_eq!((y.c, y.n, y.h, y.w), (3, 2, 3, 3));
        for co in 0..3 {
            for n in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = 0.0f32;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    let xv = x.data[((ci * 2 + n) * 5 + iy as usize) * 5 + ix as usize];
                                    let wv = conv.weight.value[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                    s += xv * wv;
                                }
                            }
                        }
                        let got = y.data[((co * 2 + n) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-5);
                    }
                }
            }
        }
    }

    // Checks the adjoint identity <dy, J dx> = <J^T dy, dx> for the linear conv map.
    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new("c", 3, 4, 3, 2, &mut rng);
        let x = random_act(3, 2, 6, 6, &mut rng);
        let (y, cache) = conv.forward(&x);
        let dy = random_act(y.c, y.n, y.h, y.w, &mut rng);
        let dx = conv.backward(&cache, &dy, true).unwrap();
        assert!((dot(&dy.data, &y.data) - dot(&dx.data, &x.data)).abs() < 1e-3);
        assert!((dot(&dy.data, &y.data) - dot(&conv.weight.grad, &conv.weight.value)).abs() < 1e-3);
    }

    #[test]
    fn group_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gn = GroupNorm::new("g", 4, 2);
        gn.gamma.value.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        let x = random_act(4, 2, 3, 3, &mut rng);
        let probe = random_act(4, 2, 3, 3, &mut rng);
        let (_, cache) = gn.forward(&x);
        let dx = gn.backward(&cache, &probe);
        let objective = |x: &Act| dot(&gn.forward(x).0.data, &probe.data);
        for i in [0usize, 5, 17, 40, 71] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += 1e-2;
            xm.data[i] -= 1e-2;
            let fd = (objective(&xp) - objective(&xm)) / 2e-2;
            assert!((fd - f64::from(dx.data[i])).abs() < 2e-2, "{i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn linear_backward_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::new("l", 3, 2, &mut rng);
        let feats = vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let out = lin.forward(&feats, 2);
        let expect0 = lin.bias.value[0] + dot(&lin.weight.value[0..3], &feats[0..3]) as f32;
        assert!((out[0] - expect0).abs() < 1e-6);
        let mut dfeat = vec![0.0; 6];
        lin.backward(&feats, &[1.0, 0.0, 0.0, 1.0], 2, &mut dfeat);
        assert_eq!(&lin.weight.grad[0..3], &[1.0, 2.0, 3.0]);
        assert_eq!(&lin.weight.grad[3..6], &[-1.0, 0.5, 0.0]);
        assert_eq!(lin.bias.grad, vec![1.0, 1.0]);
        assert_eq!(&dfeat[0..3], &lin.weight.value[0..3]);
    }
}
