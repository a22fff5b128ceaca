//! Learned mask-to-mask geometric matching.
//!
//! Two convolutional towers embed the input masks, a correlation layer
//! relates every cell of one grid to every cell of the other, and a small
//! regression head maps the correlation volume to thin-plate-spline
//! parameters over the canonical control grid. The predicted warp is
//! supervised with the mean absolute difference between the warped source
//! mask and the target mask, and every step of the chain is differentiable
//! back to the tower parameters.

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, InstanceNorm2d, Relu};
use crate::nn::{dims4, Layer, Param, Sequential};
use crate::tps::{
    canonical_grid, grid_sample, grid_sample_backward, tps_basis, TpsParams,
};
use ndarray::{Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;

const CORR_EPS: f64 = 1e-8;

/// Normalized correlation volume between two feature grids.
///
/// Entry `[n, flat(p, q), i, j]` is the inner product of the
/// unit-normalized feature vectors at cell `(i, j)` of `a` and cell
/// `(p, q)` of `b`. Zero-norm vectors are guarded by dividing by
/// `max(norm, 1e-8)`, so every entry stays in `[-1, 1]`.
pub fn correlate(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    assert_eq!(a.shape(), b.shape(), "correlate expects matching grids");
    let (n, c, h, w) = dims4(a);
    let cells = h * w;
    let an = normalize_cells(a);
    let bn = normalize_cells(b);
    let mut out = Array4::zeros((n, cells, h, w));
    for bi in 0..n {
        for p in 0..h {
            for q in 0..w {
                let k = p * w + q;
                for i in 0..h {
                    for j in 0..w {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += an[[bi, ch, i, j]] * bn[[bi, ch, p, q]];
                        }
                        out[[bi, k, i, j]] = dot;
                    }
                }
            }
        }
    }
    out
}

fn cell_norms(x: &Array4<f64>) -> Array3<f64> {
    let (n, c, h, w) = dims4(x);
    let mut norms = Array3::zeros((n, h, w));
    for bi in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for ch in 0..c {
                    s += x[[bi, ch, i, j]] * x[[bi, ch, i, j]];
                }
                norms[[bi, i, j]] = s.sqrt().max(CORR_EPS);
            }
        }
    }
    norms
}

fn normalize_cells(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = dims4(x);
    let norms = cell_norms(x);
    let mut out = x.clone();
    for bi in 0..n {
        for i in 0..h {
            for j in 0..w {
                let inv = 1.0 / norms[[bi, i, j]];
                for ch in 0..c {
                    out[[bi, ch, i, j]] *= inv;
                }
            }
        }
    }
    out
}

/// Gradients of [`correlate`] with respect to both feature grids.
pub fn correlate_backward(
    a: &Array4<f64>,
    b: &Array4<f64>,
    grad_out: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>) {
    let (n, c, h, w) = dims4(a);
    let an = normalize_cells(a);
    let bn = normalize_cells(b);
    let norms_a = cell_norms(a);
    let norms_b = cell_norms(b);
    // gradients wrt the unit vectors first
    let mut d_an = Array4::<f64>::zeros(a.raw_dim());
    let mut d_bn = Array4::<f64>::zeros(b.raw_dim());
    for bi in 0..n {
        for p in 0..h {
            for q in 0..w {
                let k = p * w + q;
                for i in 0..h {
                    for j in 0..w {
                        let g = grad_out[[bi, k, i, j]];
                        if g == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            d_an[[bi, ch, i, j]] += g * bn[[bi, ch, p, q]];
                            d_bn[[bi, ch, p, q]] += g * an[[bi, ch, i, j]];
                        }
                    }
                }
            }
        }
    }
    // then through the normalization v_hat = v / max(||v||, eps)
    let through_norm = |x: &Array4<f64>,
                        xn: &Array4<f64>,
                        norms: &Array3<f64>,
                        d_hat: &Array4<f64>| {
        let mut dx = Array4::<f64>::zeros(x.raw_dim());
        for bi in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let nv = norms[[bi, i, j]];
                    let mut raw_norm = 0.0;
                    for ch in 0..c {
                        raw_norm += x[[bi, ch, i, j]] * x[[bi, ch, i, j]];
                    }
                    let raw_norm = raw_norm.sqrt();
                    if raw_norm > CORR_EPS {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += xn[[bi, ch, i, j]] * d_hat[[bi, ch, i, j]];
                        }
                        for ch in 0..c {
                            dx[[bi, ch, i, j]] =
                                (d_hat[[bi, ch, i, j]] - xn[[bi, ch, i, j]] * dot) / nv;
                        }
                    } else {
                        for ch in 0..c {
                            dx[[bi, ch, i, j]] = d_hat[[bi, ch, i, j]] / CORR_EPS;
                        }
                    }
                }
            }
        }
        dx
    };
    let da = through_norm(a, &an, &norms_a, &d_an);
    let db = through_norm(b, &bn, &norms_b, &d_bn);
    (da, db)
}

#[derive(Debug, Clone)]
pub struct MatcherConfig {
    /// Channels of each tower input (masks are single-channel).
    pub in_channels: usize,
    /// First tower width; doubles per downsample block (32 at paper scale).
    pub base_width: usize,
    /// Control grid side K; the regressed parameter count is `6 + 2K^2`.
    pub grid_size: usize,
}

impl MatcherConfig {
    pub fn mask_matcher(width_factor: usize) -> Self {
        Self {
            in_channels: 1,
            base_width: (32 / width_factor).max(1),
            grid_size: 5,
        }
    }

    pub fn param_count(&self) -> usize {
        6 + 2 * self.grid_size * self.grid_size
    }
}

/// Feature towers + correlation + TPS regression head.
///
/// Built for one input resolution; the full-spatial regression kernel is
/// sized from the tower output grid. The final layer is zero-initialized
/// with an identity-transform bias, so a fresh model predicts the identity
/// warp. The regressed radial weights are projected onto the TPS
/// side-condition subspace (a fixed linear map), keeping every predicted
/// parameter set a valid thin-plate spline.
pub struct MatcherModel {
    pub cfg: MatcherConfig,
    tower_a: Sequential,
    tower_b: Sequential,
    reg_conv: Sequential,
    head: Conv2d,
    projector: Array2<f64>,
    control: Vec<[f64; 2]>,
    cache: Option<MatcherCache>,
}

struct MatcherCache {
    feat_a: Array4<f64>,
    feat_b: Array4<f64>,
    raw_shape: (usize, usize),
}

fn tower(name: &str, rng: &mut ChaCha8Rng, in_ch: usize, base: usize) -> Sequential {
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    let mut cur = in_ch;
    for i in 0..4 {
        let out = base << i;
        layers.push(Box::new(Conv2d::new(
            &format!("{name}.c{i}"),
            rng,
            cur,
            out,
            3,
            2,
            1,
        )));
        layers.push(Box::new(InstanceNorm2d::new(
            &format!("{name}.in{i}"),
            rng,
            out,
        )));
        layers.push(Box::new(Relu::new()));
        cur = out;
    }
    Sequential::new(layers)
}

fn side_condition_projector(control: &[[f64; 2]]) -> Array2<f64> {
    let n = control.len();
    let mut p = nalgebra::DMatrix::<f64>::zeros(n, 3);
    for (i, c) in control.iter().enumerate() {
        p[(i, 0)] = 1.0;
        p[(i, 1)] = c[0];
        p[(i, 2)] = c[1];
    }
    let ptp = p.transpose() * &p;
    let inv = ptp.try_inverse().expect("control grid is degenerate");
    let hat = &p * inv * p.transpose();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = if i == j { 1.0 } else { 0.0 } - hat[(i, j)];
        }
    }
    out
}

impl MatcherModel {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        cfg: MatcherConfig,
        height: usize,
        width: usize,
    ) -> Self {
        let tower_a = tower(&format!("{name}.ta"), rng, cfg.in_channels, cfg.base_width);
        let tower_b = tower(&format!("{name}.tb"), rng, cfg.in_channels, cfg.base_width);
        // tower output grid after four stride-2 convs (k3 p1): ceil(x/16)
        let (gh, gw) = (height.div_ceil(16), width.div_ceil(16));
        let cells = gh * gw;
        let mid = (cfg.base_width * 4).max(4);
        // correlation entries are already unit-normalized; no norm layers
        // here, which also keeps 1x1 correlation grids non-degenerate
        let reg_conv = Sequential::new(vec![
            Box::new(Conv2d::new(
                &format!("{name}.rc0"),
                rng,
                cells,
                mid,
                3,
                1,
                1,
            )),
            Box::new(Relu::new()),
            Box::new(Conv2d::new(&format!("{name}.rc1"), rng, mid, mid, 3, 1, 1)),
            Box::new(Relu::new()),
        ]);
        let mut head = Conv2d::new_rect(
            &format!("{name}.rhead"),
            rng,
            mid,
            cfg.param_count(),
            (gh, gw),
            1,
            0,
        );
        // identity initialization: zero weights, identity-transform bias
        head.weight.value.fill(0.0);
        head.bias.value.fill(0.0);
        head.bias.value[[1]] = 1.0; // affine x: cx
        head.bias.value[[5]] = 1.0; // affine y: cy
        let control = canonical_grid(cfg.grid_size);
        let projector = side_condition_projector(&control);
        Self {
            cfg,
            tower_a,
            tower_b,
            reg_conv,
            head,
            projector,
            control,
            cache: None,
        }
    }

    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.control
    }

    /// Predict one TPS parameter set per batch sample.
    pub fn forward(&mut self, a: &Array4<f64>, b: &Array4<f64>, train: bool) -> Vec<TpsParams> {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(
            a.shape()[1],
            self.cfg.in_channels,
            "matcher channel mismatch"
        );
        let feat_a = self.tower_a.forward(a, train);
        let feat_b = self.tower_b.forward(b, train);
        let corr = correlate(&feat_a, &feat_b);
        let mid = self.reg_conv.forward(&corr, train);
        let raw = self.head.forward(&mid, train); // (n, p, 1, 1)
        let n = raw.shape()[0];
        let k2 = self.cfg.grid_size * self.cfg.grid_size;
        let mut out = Vec::with_capacity(n);
        for bi in 0..n {
            let affine = [
                [raw[[bi, 0, 0, 0]], raw[[bi, 1, 0, 0]], raw[[bi, 2, 0, 0]]],
                [raw[[bi, 3, 0, 0]], raw[[bi, 4, 0, 0]], raw[[bi, 5, 0, 0]]],
            ];
            let mut weights = vec![[0.0; 2]; k2];
            for d in 0..2 {
                // project the raw coefficients onto the side-condition subspace
                for (i, wrow) in weights.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..k2 {
                        acc += self.projector[[i, j]] * raw[[bi, 6 + d * k2 + j, 0, 0]];
                    }
                    wrow[d] = acc;
                }
            }
            out.push(TpsParams {
                control_points: self.control.clone(),
                affine,
                weights,
                regularization: 0.0,
            });
        }
        self.cache = Some(MatcherCache {
            feat_a,
            feat_b,
            raw_shape: (n, self.cfg.param_count()),
        });
        out
    }

    /// Backprop from per-sample parameter gradients (same layout as the
    /// forward's `TpsParams`) into the model parameters.
    pub fn backward(&mut self, d_params: &[ParamGrad]) {
        let cache = self.cache.take().expect("matcher backward without forward");
        let (n, pcount) = cache.raw_shape;
        assert_eq!(d_params.len(), n);
        let k2 = self.cfg.grid_size * self.cfg.grid_size;
        let mut d_raw = Array4::zeros((n, pcount, 1, 1));
        for (bi, dp) in d_params.iter().enumerate() {
            for d in 0..2 {
                for c in 0..3 {
                    d_raw[[bi, d * 3 + c, 0, 0]] = dp.affine[d][c];
                }
                // the projector is symmetric, so applying it again is the
                // transpose map
                for j in 0..k2 {
                    let mut acc = 0.0;
                    for i in 0..k2 {
                        acc += self.projector[[i, j]] * dp.weights[i][d];
                    }
                    d_raw[[bi, 6 + d * k2 + j, 0, 0]] = acc;
                }
            }
        }
        let d_mid = self.head.backward(&d_raw);
        let d_corr = self.reg_conv.backward(&d_mid);
        let (da, db) = correlate_backward(&cache.feat_a, &cache.feat_b, &d_corr);
        self.tower_a.backward(&da);
        self.tower_b.backward(&db);
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.tower_a.visit_params(f);
        self.tower_b.visit_params(f);
        self.reg_conv.visit_params(f);
        self.head.visit_params(f);
    }
}

/// Gradient of a scalar loss with respect to one sample's TPS parameters.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub affine: [[f64; 3]; 2],
    pub weights: Vec<[f64; 2]>,
}

impl ParamGrad {
    pub fn zeros(k: usize) -> Self {
        Self {
            affine: [[0.0; 3]; 2],
            weights: vec![[0.0; 2]; k * k],
        }
    }
}

/// Mean absolute difference between the warped source mask and the target
/// mask (mean reduction over all pixels).
pub fn geometric_matching_loss(
    params: &TpsParams,
    clothes_mask: &Array2<f64>,
    target_clothes_mask: &Array2<f64>,
) -> f64 {
    assert_eq!(clothes_mask.shape(), target_clothes_mask.shape());
    let warped = crate::tps::warp_mask(clothes_mask, params);
    let n = warped.len() as f64;
    warped
        .iter()
        .zip(target_clothes_mask.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n
}

/// A matcher bound to one resolution, with the TPS design matrix cached so
/// training steps can push loss gradients back through the warp.
pub struct GeoMatcher {
    pub model: MatcherModel,
    pub height: usize,
    pub width: usize,
    basis: Array2<f64>,
}

impl GeoMatcher {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        cfg: MatcherConfig,
        height: usize,
        width: usize,
    ) -> Self {
        let model = MatcherModel::new(name, rng, cfg, height, width);
        let basis = tps_basis(model.control_points(), height, width);
        Self {
            model,
            height,
            width,
            basis,
        }
    }

    fn check_resolution(&self, x: &Array4<f64>) -> Result<()> {
        let (_, _, h, w) = dims4(x);
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(format!(
                "matcher expects {}x{}, got {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn predict(
        &mut self,
        a: &Array4<f64>,
        b: &Array4<f64>,
        train: bool,
    ) -> Result<Vec<TpsParams>> {
        self.check_resolution(a)?;
        self.check_resolution(b)?;
        Ok(self.model.forward(a, b, train))
    }

    /// Full supervised pass: predict warps from `(a, b)`, warp `sources`,
    /// compare against `targets` with mean L1, and accumulate parameter
    /// gradients. Returns the batch loss.
    pub fn loss_with_grads(
        &mut self,
        a: &Array4<f64>,
        b: &Array4<f64>,
        sources: &Array4<f64>,
        targets: &Array4<f64>,
        train: bool,
    ) -> Result<f64> {
        let params = self.predict(a, b, train)?;
        let (n, _, h, w) = dims4(sources);
        assert_eq!(params.len(), n);
        let total_elems = sources.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(n);
        for (bi, p) in params.iter().enumerate() {
            let src = sources.index_axis(Axis(0), bi);
            let grid = self.grid_from_params(p);
            let warped = grid_sample(&src, &grid);
            let tgt = targets.index_axis(Axis(0), bi);
            let mut d_warped = Array3::zeros(warped.raw_dim());
            for ((dw, wv), tv) in d_warped.iter_mut().zip(warped.iter()).zip(tgt.iter()) {
                loss += (wv - tv).abs();
                *dw = crate::nn::loss::sign0(wv - tv) / total_elems;
            }
            let (_, d_grid) = grid_sample_backward(&src, &grid, &d_warped.view());
            grads.push(self.param_grad_from_grid_grad(&d_grid, h, w));
        }
        self.model.backward(&grads);
        Ok(loss / total_elems)
    }

    /// Evaluate the parameter-to-grid map for one sample (pixel units).
    pub fn grid_from_params(&self, p: &TpsParams) -> Array3<f64> {
        let (h, w) = (self.height, self.width);
        let nctrl = p.control_points.len();
        let mut theta = [vec![0.0; 3 + nctrl], vec![0.0; 3 + nctrl]];
        for d in 0..2 {
            theta[d][0] = p.affine[d][0];
            theta[d][1] = p.affine[d][1];
            theta[d][2] = p.affine[d][2];
            for (i, wgt) in p.weights.iter().enumerate() {
                theta[d][3 + i] = wgt[d];
            }
        }
        let mut grid = Array3::zeros((2, h, w));
        for row in 0..h * w {
            let (y, x) = (row / w, row % w);
            for d in 0..2 {
                let mut acc = 0.0;
                for c in 0..3 + nctrl {
                    acc += self.basis[[row, c]] * theta[d][c];
                }
                let extent = if d == 0 { w } else { h };
                grid[[d, y, x]] = crate::tps::norm_to_pixel(acc, extent);
            }
        }
        grid
    }

    fn param_grad_from_grid_grad(&self, d_grid: &Array3<f64>, h: usize, w: usize) -> ParamGrad {
        let k = self.model.cfg.grid_size;
        let nctrl = k * k;
        let mut pg = ParamGrad::zeros(k);
        for d in 0..2 {
            let extent = if d == 0 { w } else { h };
            let scale = (extent - 1) as f64 / 2.0; // norm -> pixel jacobian
            let mut theta_grad = vec![0.0; 3 + nctrl];
            for row in 0..h * w {
                let (y, x) = (row / w, row % w);
                let g = d_grid[[d, y, x]] * scale;
                if g == 0.0 {
                    continue;
                }
                for (c, tg) in theta_grad.iter_mut().enumerate() {
                    *tg += self.basis[[row, c]] * g;
                }
            }
            for c in 0..3 {
                pg.affine[d][c] = theta_grad[c];
            }
            for i in 0..nctrl {
                pg.weights[i][d] = theta_grad[3 + i];
            }
        }
        pg
    }
}
