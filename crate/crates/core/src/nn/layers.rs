//! Primitive layers: convolution, normalization, activations, upsampling.

use super::{dims4, Layer, Param};
use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// Desk-scale bottlenecks shrink to a few spatial cells, where per-channel
// variances can collapse orders of magnitude below typical feature scale;
// a larger stabilizer keeps 1/sqrt(var+eps) bounded so training stays
// well-conditioned at toy resolutions.
const NORM_EPS: f64 = 1e-2;
const BN_MOMENTUM: f64 = 0.1;

fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ndarray::ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    let mut arr = ndarray::ArrayD::zeros(ndarray::IxDyn(shape));
    for v in arr.iter_mut() {
        *v = dist.sample(rng);
    }
    arr
}

/// 2D convolution, NCHW, zero padding, lowered to im2col + GEMM.
///
/// The weight block is stored as `(out_ch, in_ch * kh * kw)` so both the
/// forward pass and the weight gradient are single matrix products.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    cached_input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::new_rect(name, rng, in_ch, out_ch, (kernel, kernel), stride, pad)
    }

    pub fn new_rect(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = Param::new(
            format!("{name}.w"),
            normal_init(rng, &[out_ch, in_ch * kernel.0 * kernel.1], 0.02),
        );
        let bias = Param::new(
            format!("{name}.b"),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])),
        );
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cached_input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let oh = (h + 2 * self.pad).checked_sub(kh).expect("conv input too small") / self.stride + 1;
        let ow = (w + 2 * self.pad).checked_sub(kw).expect("conv input too small") / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array4<f64>, n: usize, oh: usize, ow: usize) -> Array2<f64> {
        let (kh, kw) = self.kernel;
        let (_, c, h, w) = dims4(x);
        let mut cols = Array2::zeros((c * kh * kw, oh * ow));
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ic * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[n, ic, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_acc(&self, dcols: &Array2<f64>, out: &mut Array4<f64>, n: usize, oh: usize, ow: usize) {
        let (kh, kw) = self.kernel;
        let (_, c, h, w) = dims4(out);
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ic * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            out[[n, ic, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.in_ch, "conv {}: channel mismatch", self.weight.name);
        let (oh, ow) = self.out_hw(h, w);
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        for bn in 0..n {
            let cols = self.im2col(x, bn, oh, ow);
            let y = w2.dot(&cols); // (out_ch, oh*ow)
            for oc in 0..self.out_ch {
                let b = self.bias.value[[oc]];
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[[bn, oc, oy, ox]] = y[[oc, oy * ow + ox]] + b;
                    }
                }
            }
        }
        self.cached_input = Some(x.clone());
        out
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let x = self.cached_input.take().expect("conv backward without forward");
        let (n, _, _, _) = dims4(&x);
        let (_, oc, oh, ow) = dims4(grad_out);
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut dw = Array2::zeros(w2.raw_dim());
        let mut db = Array1::<f64>::zeros(oc);
        let mut dx = Array4::zeros(x.raw_dim());
        for bn in 0..n {
            let mut g = Array2::zeros((oc, oh * ow));
            for c in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = grad_out[[bn, c, oy, ox]];
                        g[[c, oy * ow + ox]] = v;
                        db[c] += v;
                    }
                }
            }
            let cols = self.im2col(&x, bn, oh, ow);
            dw = dw + g.dot(&cols.t());
            let dcols = w2.t().dot(&g);
            self.col2im_acc(&dcols, &mut dx, bn, oh, ow);
        }
        self.weight.grad += &dw.into_dyn();
        for c in 0..oc {
            self.bias.grad[[c]] += db[c];
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Batch normalization over `(N, H, W)` per channel, with running statistics
/// for inference.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mut gamma_init = normal_init(rng, &[channels], 0.02);
        gamma_init.mapv_inplace(|v| 1.0 + v);
        Self {
            gamma: Param::new(format!("{name}.gamma"), gamma_init),
            beta: Param::new(
                format!("{name}.beta"),
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])),
            ),
            running_mean: Param::frozen(
                format!("{name}.running_mean"),
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])),
            ),
            running_var: Param::frozen(
                format!("{name}.running_var"),
                ndarray::ArrayD::from_elem(ndarray::IxDyn(&[channels]), 1.0),
            ),
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        let m = (n * h * w) as f64;
        let mut out = Array4::zeros(x.raw_dim());
        let mut x_hat = Array4::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for bn in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let v = x[[bn, ch, y, xx]];
                            s += v;
                            s2 += v * v;
                        }
                    }
                }
                let mean = s / m;
                let var = (s2 / m - mean * mean).max(0.0);
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_mean.value[[ch]] =
                    (1.0 - BN_MOMENTUM) * self.running_mean.value[[ch]] + BN_MOMENTUM * mean;
                self.running_var.value[[ch]] =
                    (1.0 - BN_MOMENTUM) * self.running_var.value[[ch]] + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (self.running_mean.value[[ch]], self.running_var.value[[ch]])
            };
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.value[[ch]];
            let b = self.beta.value[[ch]];
            for bn in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (x[[bn, ch, y, xx]] - mean) * istd;
                        x_hat[[bn, ch, y, xx]] = xh;
                        out[[bn, ch, y, xx]] = g * xh + b;
                    }
                }
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, train });
        out
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("bn backward without forward");
        let (n, c, h, w) = dims4(grad_out);
        let m = (n * h * w) as f64;
        let mut dx = Array4::zeros(grad_out.raw_dim());
        for ch in 0..c {
            let g = self.gamma.value[[ch]];
            let istd = cache.inv_std[ch];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for bn in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let go = grad_out[[bn, ch, y, xx]];
                        sum_g += go;
                        sum_gx += go * cache.x_hat[[bn, ch, y, xx]];
                    }
                }
            }
            self.beta.grad[[ch]] += sum_g;
            self.gamma.grad[[ch]] += sum_gx;
            for bn in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let go = grad_out[[bn, ch, y, xx]];
                        let xh = cache.x_hat[[bn, ch, y, xx]];
                        dx[[bn, ch, y, xx]] = if cache.train {
                            g * istd / m * (m * go - sum_g - xh * sum_gx)
                        } else {
                            g * istd * go
                        };
                    }
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Instance normalization: statistics per `(sample, channel)` over `H x W`.
/// A single-element spatial field has no statistics to normalize with, so
/// 1x1 inputs pass through the affine part unchanged.
pub struct InstanceNorm2d {
    pub gamma: Param,
    pub beta: Param,
    cache: Option<(Array4<f64>, Array2<f64>, bool)>, // x_hat, inv_std per (n, c), passthrough
}

impl InstanceNorm2d {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mut gamma_init = normal_init(rng, &[channels], 0.02);
        gamma_init.mapv_inplace(|v| 1.0 + v);
        Self {
            gamma: Param::new(format!("{name}.gamma"), gamma_init),
            beta: Param::new(
                format!("{name}.beta"),
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])),
            ),
            cache: None,
        }
    }
}

impl Layer for InstanceNorm2d {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        let m = (h * w) as f64;
        let passthrough = h * w == 1;
        let mut out = Array4::zeros(x.raw_dim());
        let mut x_hat = Array4::zeros(x.raw_dim());
        let mut inv_std = Array2::zeros((n, c));
        for bn in 0..n {
            for ch in 0..c {
                let g = self.gamma.value[[ch]];
                let b = self.beta.value[[ch]];
                if passthrough {
                    let v = x[[bn, ch, 0, 0]];
                    x_hat[[bn, ch, 0, 0]] = v;
                    inv_std[[bn, ch]] = 1.0;
                    out[[bn, ch, 0, 0]] = g * v + b;
                    continue;
                }
                let mut s = 0.0;
                let mut s2 = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[bn, ch, y, xx]];
                        s += v;
                        s2 += v * v;
                    }
                }
                let mean = s / m;
                let var = (s2 / m - mean * mean).max(0.0);
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[[bn, ch]] = istd;
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (x[[bn, ch, y, xx]] - mean) * istd;
                        x_hat[[bn, ch, y, xx]] = xh;
                        out[[bn, ch, y, xx]] = g * xh + b;
                    }
                }
            }
        }
        self.cache = Some((x_hat, inv_std, passthrough));
        out
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let (x_hat, inv_std, passthrough) =
            self.cache.take().expect("in backward without forward");
        let (n, c, h, w) = dims4(grad_out);
        let m = (h * w) as f64;
        let mut dx = Array4::zeros(grad_out.raw_dim());
        for bn in 0..n {
            for ch in 0..c {
                let g = self.gamma.value[[ch]];
                let istd = inv_std[[bn, ch]];
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        let go = grad_out[[bn, ch, y, xx]];
                        sum_g += go;
                        sum_gx += go * x_hat[[bn, ch, y, xx]];
                    }
                }
                self.beta.grad[[ch]] += sum_g;
                self.gamma.grad[[ch]] += sum_gx;
                for y in 0..h {
                    for xx in 0..w {
                        let go = grad_out[[bn, ch, y, xx]];
                        let xh = x_hat[[bn, ch, y, xx]];
                        dx[[bn, ch, y, xx]] = if passthrough {
                            g * go
                        } else {
                            g * istd / m * (m * go - sum_g - xh * sum_gx)
                        };
                    }
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

pub struct Relu {
    mask: Option<Array4<f64>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { mask: None }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let out = x * &mask;
        self.mask = Some(mask);
        out
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.take().expect("relu backward without forward");
        grad_out * &mask
    }
}

pub struct LeakyRelu {
    slope: f64,
    mask: Option<Array4<f64>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, mask: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let slope = self.slope;
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { slope });
        let out = x * &mask;
        self.mask = Some(mask);
        out
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.take().expect("lrelu backward without forward");
        grad_out * &mask
    }
}

/// Logistic squashing into (0, 1).
pub struct Sigmoid {
    out: Option<Array4<f64>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { out: None }
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let out = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.out = Some(out.clone());
        out
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let out = self.out.take().expect("sigmoid backward without forward");
        grad_out * &(&out * &out.mapv(|y| 1.0 - y))
    }
}

/// Nearest-neighbor 2x upsampling.
pub struct NearestUpsample2 {
    in_hw: Option<(usize, usize)>,
}

impl NearestUpsample2 {
    pub fn new() -> Self {
        Self { in_hw: None }
    }
}

impl Default for NearestUpsample2 {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for NearestUpsample2 {
    fn forward(&mut self, x: &Array4<f64>, _train: bool) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        self.in_hw = Some((h, w));
        let mut out = Array4::zeros((n, c, h * 2, w * 2));
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[bn, ch, y, xx]];
                        out[[bn, ch, 2 * y, 2 * xx]] = v;
                        out[[bn, ch, 2 * y, 2 * xx + 1]] = v;
                        out[[bn, ch, 2 * y + 1, 2 * xx]] = v;
                        out[[bn, ch, 2 * y + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let (h, w) = self.in_hw.take().expect("upsample backward without forward");
        let (n, c, _, _) = dims4(grad_out);
        let mut dx = Array4::zeros((n, c, h, w));
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        dx[[bn, ch, y, xx]] = grad_out[[bn, ch, 2 * y, 2 * xx]]
                            + grad_out[[bn, ch, 2 * y, 2 * xx + 1]]
                            + grad_out[[bn, ch, 2 * y + 1, 2 * xx]]
                            + grad_out[[bn, ch, 2 * y + 1, 2 * xx + 1]];
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_input(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut x = Array4::zeros(shape);
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        x
    }

    /// Central-difference check of a layer's input and parameter gradients
    /// under the scalar objective sum(coef * forward(x)).
    fn check_layer_grads<L: Layer>(layer: &mut L, x: &Array4<f64>, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = layer.forward(x, true);
        let coef = rand_input(&mut rng, dims4(&y));
        super::super::zero_grads(|f| layer.visit_params(f));
        // reforward so the cache matches the graded pass
        let y = layer.forward(x, true);
        let dx = layer.backward(&coef);
        let loss0 = (&y * &coef).sum();
        assert!(loss0.is_finite());

        let eps = 1e-6;
        // input gradient probes
        for probe in 0..6 {
            let mut idx = [0usize; 4];
            let s = dims4(x);
            idx[0] = probe % s.0;
            idx[1] = (probe * 7) % s.1;
            idx[2] = (probe * 3) % s.2;
            idx[3] = (probe * 5) % s.3;
            let mut xp = x.clone();
            xp[idx] += eps;
            let lp = (&layer.forward(&xp, true) * &coef).sum();
            let mut xm = x.clone();
            xm[idx] -= eps;
            let lm = (&layer.forward(&xm, true) * &coef).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let g = dx[idx];
            assert!(
                (fd - g).abs() <= tol * (1.0 + fd.abs().max(g.abs())),
                "input grad mismatch: analytic {g} vs fd {fd}"
            );
        }
        // parameter gradient probes
        let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
        layer.visit_params(&mut |p| {
            if p.trainable {
                grads.push((p.name.clone(), p.grad.iter().cloned().collect()));
            }
        });
        for (pname, ganalytic) in &grads {
            for k in [0usize, ganalytic.len() / 2, ganalytic.len() - 1] {
                let mut lp = 0.0;
                let mut lm = 0.0;
                for sgn in [1.0, -1.0] {
                    layer.visit_params(&mut |p| {
                        if &p.name == pname {
                            p.value.as_slice_mut().unwrap()[k] += sgn * eps;
                        }
                    });
                    let l = (&layer.forward(x, true) * &coef).sum();
                    if sgn > 0.0 {
                        lp = l;
                    } else {
                        lm = l;
                    }
                    layer.visit_params(&mut |p| {
                        if &p.name == pname {
                            p.value.as_slice_mut().unwrap()[k] -= sgn * eps;
                        }
                    });
                }
                let fd = (lp - lm) / (2.0 * eps);
                let g = ganalytic[k];
                assert!(
                    (fd - g).abs() <= tol * (1.0 + fd.abs().max(g.abs())),
                    "{pname}[{k}]: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("t", &mut rng, 3, 4, 3, 2, 1);
        let x = rand_input(&mut rng, (2, 3, 7, 6));
        check_layer_grads(&mut conv, &x, 2, 1e-6);
    }

    #[test]
    fn conv_known_values_stride1() {
        // 1x1 input channel, 3x3 kernel of ones, pad 1: output = local sums.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("t", &mut rng, 1, 1, 3, 1, 1);
        conv.weight.value.fill(1.0);
        conv.bias.value.fill(0.5);
        let mut x = Array4::zeros((1, 1, 3, 3));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let y = conv.forward(&x, true);
        // center pixel sees the full 3x3 = sum 0..=8 = 36, plus bias
        assert_eq!(y[[0, 0, 1, 1]], 36.5);
        // corner (0,0) sees {0,1,3,4} = 8
        assert_eq!(y[[0, 0, 0, 0]], 8.5);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new("t", &mut rng, 3);
        let x = rand_input(&mut rng, (2, 3, 4, 5));
        // Running stats mutate across forwards; pin them for the check.
        let rm = bn.running_mean.value.clone();
        let rv = bn.running_var.value.clone();
        check_layer_grads(&mut bn, &x, 4, 1e-5);
        bn.running_mean.value = rm;
        bn.running_var.value = rv;
    }

    #[test]
    fn batchnorm_normalizes_batch_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new("t", &mut rng, 2);
        bn.gamma.value.fill(1.0);
        let x = rand_input(&mut rng, (4, 2, 3, 3));
        let y = bn.forward(&x, true);
        for ch in 0..2 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut cnt = 0.0;
            for bn_ in 0..4 {
                for yy in 0..3 {
                    for xx in 0..3 {
                        s += y[[bn_, ch, yy, xx]];
                        s2 += y[[bn_, ch, yy, xx]] * y[[bn_, ch, yy, xx]];
                        cnt += 1.0;
                    }
                }
            }
            assert!((s / cnt).abs() < 1e-10);
            // output variance is var/(var+eps), slightly below 1
            assert!(s2 / cnt > 0.95 && s2 / cnt <= 1.0, "{}", s2 / cnt);
        }
    }

    #[test]
    fn instancenorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut inorm = InstanceNorm2d::new("t", &mut rng, 3);
        let x = rand_input(&mut rng, (2, 3, 4, 4));
        check_layer_grads(&mut inorm, &x, 8, 1e-5);
    }

    #[test]
    fn activations_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_input(&mut rng, (2, 3, 4, 4));
        check_layer_grads(&mut Relu::new(), &x, 10, 1e-6);
        check_layer_grads(&mut LeakyRelu::new(0.2), &x, 11, 1e-6);
        check_layer_grads(&mut Sigmoid::new(), &x, 12, 1e-6);
        check_layer_grads(&mut NearestUpsample2::new(), &x, 13, 1e-6);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_input(&mut rng, (1, 2, 3, 5));
        let up = NearestUpsample2::new().forward(&x, true);
        let back = super::super::avg_pool2(&up);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
