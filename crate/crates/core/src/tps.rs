//! Thin-plate-spline warps.
//!
//! A [`TpsParams`] describes a smooth 2D mapping over the normalized domain
//! `[-1,1]^2`: an affine part plus radial-basis terms `U(r) = r^2 log r^2`
//! anchored at control points. The convention throughout is *backward*
//! warping: the mapping sends a target-image point to the source location
//! it should sample from, which avoids forward-splat holes.
//!
//! Pixel <-> normalized conversion uses align-corners semantics, so the
//! same parameters apply at any resolution (full images and bottleneck
//! feature grids alike).

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayView3, Axis};

/// Magic bytes of the serialized parameter container.
const MAGIC: &[u8; 8] = b"TPSWARP\0";
const FORMAT_VERSION: u32 = 1;

/// Tolerance for the TPS side conditions (weights orthogonal to the
/// affine subspace).
pub const SIDE_CONDITION_TOL: f64 = 1e-8;

/// Snap tolerance for bilinear sampling: sample positions this close to an
/// integer pixel are treated as exact, making identity and integer
/// translations bit-exact.
const SNAP_EPS: f64 = 1e-6;

/// Radial basis `U(r) = r^2 log(r^2)` with `U(0) = 0`.
#[inline]
pub fn radial_basis(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Thin-plate-spline warp parameters.
///
/// `affine[d]` holds `(c0, cx, cy)` for output dimension `d` (0 = x,
/// 1 = y); `weights[i]` holds the `(x, y)` radial coefficients of control
/// point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams {
    pub control_points: Vec<[f64; 2]>,
    pub affine: [[f64; 3]; 2],
    pub weights: Vec<[f64; 2]>,
    pub regularization: f64,
}

/// The canonical K x K control grid over `[-1,1]^2`, row-major in (y, x).
pub fn canonical_grid(k: usize) -> Vec<[f64; 2]> {
    assert!(k >= 2, "canonical grid needs k >= 2");
    let mut pts = Vec::with_capacity(k * k);
    for gy in 0..k {
        for gx in 0..k {
            pts.push([
                -1.0 + 2.0 * gx as f64 / (k - 1) as f64,
                -1.0 + 2.0 * gy as f64 / (k - 1) as f64,
            ]);
        }
    }
    pts
}

impl TpsParams {
    /// Identity warp on the canonical K x K grid: identity affine, zero
    /// radial weights.
    pub fn identity(k: usize) -> Self {
        let control_points = canonical_grid(k);
        let n = control_points.len();
        Self {
            control_points,
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            weights: vec![[0.0, 0.0]; n],
            regularization: 0.0,
        }
    }

    /// Pure translation by `(dx, dy)` in normalized units.
    pub fn translation(k: usize, dx: f64, dy: f64) -> Self {
        let mut p = Self::identity(k);
        p.affine[0][0] = dx;
        p.affine[1][0] = dy;
        p
    }

    pub fn num_control_points(&self) -> usize {
        self.control_points.len()
    }

    /// `Some(K)` when the control points are exactly the canonical K x K grid.
    pub fn grid_size(&self) -> Option<usize> {
        let n = self.control_points.len();
        let k = (n as f64).sqrt().round() as usize;
        if k < 2 || k * k != n {
            return None;
        }
        let grid = canonical_grid(k);
        let matches = self
            .control_points
            .iter()
            .zip(grid.iter())
            .all(|(a, b)| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        matches.then_some(k)
    }

    /// Map one normalized point through the warp.
    pub fn map_point(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for d in 0..2 {
            let a = &self.affine[d];
            out[d] = a[0] + a[1] * p[0] + a[2] * p[1];
        }
        for (c, w) in self.control_points.iter().zip(self.weights.iter()) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let u = radial_basis(dx * dx + dy * dy);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    /// Max absolute residual of the side conditions
    /// `sum w = sum w*x = sum w*y = 0` over both output dimensions.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for d in 0..2 {
            let mut s = [0.0; 3];
            for (c, w) in self.control_points.iter().zip(self.weights.iter()) {
                s[0] += w[d];
                s[1] += w[d] * c[0];
                s[2] += w[d] * c[1];
            }
            for v in s {
                worst = worst.max(v.abs());
            }
        }
        worst
    }

    /// Serialize canonical-grid parameters: 16-byte header (magic, version,
    /// K) followed by 6 affine reals and `2 K^2` weights as little-endian
    /// f32 (x-weights then y-weights).
    pub fn serialize(&self) -> Result<Vec<u8>> {
        let k = self.grid_size().ok_or_else(|| {
            Error::invalid("only canonical-grid TPS parameters are serializable")
        })? as u32;
        let n = self.control_points.len();
        let mut out = Vec::with_capacity(16 + 4 * (6 + 2 * n));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
        for d in 0..2 {
            for c in 0..3 {
                out.extend_from_slice(&(self.affine[d][c] as f32).to_le_bytes());
            }
        }
        for d in 0..2 {
            for w in &self.weights {
                out.extend_from_slice(&(w[d] as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..8] != MAGIC {
            return Err(Error::invalid("bad TPS container header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported TPS container version {version}"
            )));
        }
        let k = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if k < 2 {
            return Err(Error::invalid(format!("bad TPS grid size {k}")));
        }
        let n = k * k;
        let expect = 16 + 4 * (6 + 2 * n);
        if bytes.len() != expect {
            return Err(Error::invalid(format!(
                "TPS container length {} does not match K={k} (expect {expect})",
                bytes.len()
            )));
        }
        let read_f32 = |off: usize| -> f64 {
            f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
        };
        let mut affine = [[0.0; 3]; 2];
        for d in 0..2 {
            for c in 0..3 {
                affine[d][c] = read_f32(16 + 4 * (d * 3 + c));
            }
        }
        let mut weights = vec![[0.0; 2]; n];
        for d in 0..2 {
            for (i, w) in weights.iter_mut().enumerate() {
                w[d] = read_f32(16 + 24 + 4 * (d * n + i));
            }
        }
        Ok(Self {
            control_points: canonical_grid(k),
            affine,
            weights,
            regularization: 0.0,
        })
    }
}

/// Solve for the TPS sending each source point to its target.
///
/// With `regularization = 0` the mapping interpolates exactly; positive
/// values trade accuracy for smoothness. Collinear or duplicate source
/// points make the system singular and are reported as an error.
pub fn solve_tps(
    source_points: &[[f64; 2]],
    target_points: &[[f64; 2]],
    regularization: f64,
) -> Result<TpsParams> {
    let n = source_points.len();
    if n != target_points.len() {
        return Err(Error::invalid(format!(
            "point list lengths differ: {n} vs {}",
            target_points.len()
        )));
    }
    if n < 3 {
        return Err(Error::invalid("TPS needs at least 3 control points"));
    }
    if regularization < 0.0 {
        return Err(Error::invalid("regularization must be non-negative"));
    }

    let dim = n + 3;
    let mut sys = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            let dx = source_points[i][0] - source_points[j][0];
            let dy = source_points[i][1] - source_points[j][1];
            sys[(i, j)] = radial_basis(dx * dx + dy * dy);
        }
        sys[(i, i)] += regularization;
        sys[(i, n)] = 1.0;
        sys[(i, n + 1)] = source_points[i][0];
        sys[(i, n + 2)] = source_points[i][1];
        sys[(n, i)] = 1.0;
        sys[(n + 1, i)] = source_points[i][0];
        sys[(n + 2, i)] = source_points[i][1];
    }

    let mut rhs = nalgebra::DMatrix::<f64>::zeros(dim, 2);
    for i in 0..n {
        rhs[(i, 0)] = target_points[i][0];
        rhs[(i, 1)] = target_points[i][1];
    }

    let lu = sys.clone().full_piv_lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("TPS system is not invertible".into()))?;

    // Full-pivot LU can still "solve" a numerically degenerate system;
    // verify the residual before accepting.
    let residual = (&sys * &sol - &rhs).abs().max();
    let scale = rhs.abs().max().max(1.0);
    if !residual.is_finite() || residual > 1e-6 * scale {
        return Err(Error::SingularSystem(format!(
            "TPS solve residual {residual:.3e} (collinear or duplicate source points?)"
        )));
    }

    let mut weights = vec![[0.0; 2]; n];
    for (i, w) in weights.iter_mut().enumerate() {
        w[0] = sol[(i, 0)];
        w[1] = sol[(i, 1)];
    }
    let affine = [
        [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
        [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
    ];
    Ok(TpsParams {
        control_points: source_points.to_vec(),
        affine,
        weights,
        regularization,
    })
}

/// Pixel column -> normalized x (align-corners). Degenerate 1-wide axes map
/// to the domain center.
#[inline]
pub fn pixel_to_norm(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (extent - 1) as f64 - 1.0
    }
}

/// Normalized coordinate -> pixel units along an axis of `extent` pixels.
#[inline]
pub fn norm_to_pixel(v: f64, extent: usize) -> f64 {
    (v + 1.0) * (extent - 1) as f64 / 2.0
}

/// Dense backward sampling grid at resolution `(h, w)`: for every output
/// pixel, the source location in pixel units. Layout `(2, h, w)` with
/// channel 0 = x, channel 1 = y.
pub fn sample_grid(params: &TpsParams, h: usize, w: usize) -> Array3<f64> {
    let mut grid = Array3::zeros((2, h, w));
    for y in 0..h {
        let yn = pixel_to_norm(y, h);
        for x in 0..w {
            let xn = pixel_to_norm(x, w);
            let q = params.map_point([xn, yn]);
            grid[[0, y, x]] = norm_to_pixel(q[0], w);
            grid[[1, y, x]] = norm_to_pixel(q[1], h);
        }
    }
    grid
}

/// Per-pixel design matrix of the TPS: row `y*w + x` holds
/// `[1, xn, yn, U(r_1), .., U(r_N)]` so that each grid coordinate is the
/// row dotted with `[c0, cx, cy, w_1..w_N]`. The grid is linear in the
/// parameters, which is what makes the learned matcher differentiable.
pub fn tps_basis(control_points: &[[f64; 2]], h: usize, w: usize) -> Array2<f64> {
    let n = control_points.len();
    let mut basis = Array2::zeros((h * w, 3 + n));
    for y in 0..h {
        let yn = pixel_to_norm(y, h);
        for x in 0..w {
            let xn = pixel_to_norm(x, w);
            let row = y * w + x;
            basis[[row, 0]] = 1.0;
            basis[[row, 1]] = xn;
            basis[[row, 2]] = yn;
            for (j, c) in control_points.iter().enumerate() {
                let dx = xn - c[0];
                let dy = yn - c[1];
                basis[[row, 3 + j]] = radial_basis(dx * dx + dy * dy);
            }
        }
    }
    basis
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

/// Bilinear sample of `(C, H, W)` channels at the given grid (pixel units).
/// Out-of-bounds taps read as zero.
pub fn grid_sample(input: &ArrayView3<f64>, grid: &Array3<f64>) -> Array3<f64> {
    let (c, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
    let mut out = Array3::zeros((c, oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let xs = snap(grid[[0, y, x]]);
            let ys = snap(grid[[1, y, x]]);
            let x0 = xs.floor();
            let y0 = ys.floor();
            let fx = xs - x0;
            let fy = ys - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            for ch in 0..c {
                let mut acc = 0.0;
                for &(tx, ty, wgt) in &taps {
                    if wgt != 0.0 && tx >= 0 && ty >= 0 && (tx as usize) < iw && (ty as usize) < ih
                    {
                        acc += wgt * input[[ch, ty as usize, tx as usize]];
                    }
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Gradients of [`grid_sample`]: returns `(d_input, d_grid)` given the
/// output gradient. `d_grid` is in pixel units.
pub fn grid_sample_backward(
    input: &ArrayView3<f64>,
    grid: &Array3<f64>,
    grad_out: &ArrayView3<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let (c, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
    let mut d_input = Array3::zeros((c, ih, iw));
    let mut d_grid = Array3::zeros((2, oh, ow));
    let read = |ch: usize, tx: i64, ty: i64| -> f64 {
        if tx >= 0 && ty >= 0 && (tx as usize) < iw && (ty as usize) < ih {
            input[[ch, ty as usize, tx as usize]]
        } else {
            0.0
        }
    };
    for y in 0..oh {
        for x in 0..ow {
            let xs = snap(grid[[0, y, x]]);
            let ys = snap(grid[[1, y, x]]);
            let x0f = xs.floor();
            let y0f = ys.floor();
            let fx = xs - x0f;
            let fy = ys - y0f;
            let (x0, y0) = (x0f as i64, y0f as i64);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let g = grad_out[[ch, y, x]];
                if g == 0.0 {
                    continue;
                }
                for &(tx, ty, wgt) in &taps {
                    if wgt != 0.0 && tx >= 0 && ty >= 0 && (tx as usize) < iw && (ty as usize) < ih
                    {
                        d_input[[ch, ty as usize, tx as usize]] += g * wgt;
                    }
                }
                let i00 = read(ch, x0, y0);
                let i10 = read(ch, x0 + 1, y0);
                let i01 = read(ch, x0, y0 + 1);
                let i11 = read(ch, x0 + 1, y0 + 1);
                gx += g * ((i10 - i00) * (1.0 - fy) + (i11 - i01) * fy);
                gy += g * ((i01 - i00) * (1.0 - fx) + (i11 - i10) * fx);
            }
            d_grid[[0, y, x]] = gx;
            d_grid[[1, y, x]] = gy;
        }
    }
    (d_input, d_grid)
}

/// Warp an image with the given parameters (backward sampling).
pub fn warp_image(input: &crate::image::Image, params: &TpsParams) -> crate::image::Image {
    let grid = sample_grid(params, input.height(), input.width());
    crate::image::Image {
        data: grid_sample(&input.data.view(), &grid),
    }
}

/// Warp a single-channel mask with the given parameters.
pub fn warp_mask(mask: &Array2<f64>, params: &TpsParams) -> Array2<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let grid = sample_grid(params, h, w);
    let stacked = mask.view().insert_axis(Axis(0));
    let out = grid_sample(&stacked, &grid);
    out.index_axis(Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solve_identity_gives_identity_params() {
        let pts = canonical_grid(5);
        let params = solve_tps(&pts, &pts, 0.0).unwrap();
        for w in &params.weights {
            assert!(w[0].abs() < 1e-9 && w[1].abs() < 1e-9);
        }
        let a = params.affine;
        assert!((a[0][0]).abs() < 1e-9 && (a[0][1] - 1.0).abs() < 1e-9 && a[0][2].abs() < 1e-9);
        assert!((a[1][0]).abs() < 1e-9 && a[1][1].abs() < 1e-9 && (a[1][2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn solve_translation_gives_pure_affine() {
        let pts = canonical_grid(4);
        let targets: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + 0.25, p[1] - 0.5]).collect();
        let params = solve_tps(&pts, &targets, 0.0).unwrap();
        for w in &params.weights {
            assert!(w[0].abs() < 1e-9 && w[1].abs() < 1e-9);
        }
        assert!((params.affine[0][0] - 0.25).abs() < 1e-9);
        assert!((params.affine[1][0] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn solve_interpolates_random_targets_exactly() {
        // Direct evaluation oracle: evaluate the returned mapping at every
        // source point and compare to its target.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let grid = canonical_grid(5);
            let targets: Vec<[f64; 2]> = grid
                .iter()
                .map(|p| {
                    [
                        p[0] + rng.gen_range(-0.2..0.2),
                        p[1] + rng.gen_range(-0.2..0.2),
                    ]
                })
                .collect();
            let params = solve_tps(&grid, &targets, 0.0).unwrap();
            for (s, t) in grid.iter().zip(targets.iter()) {
                let m = params.map_point(*s);
                assert!((m[0] - t[0]).abs() < 1e-6, "{} vs {}", m[0], t[0]);
                assert!((m[1] - t[1]).abs() < 1e-6);
            }
            assert!(params.side_condition_residual() < SIDE_CONDITION_TOL);
        }
    }

    #[test]
    fn solve_rejects_collinear_sources() {
        let pts: Vec<[f64; 2]> = (0..5).map(|i| [i as f64 * 0.1, i as f64 * 0.1]).collect();
        let targets = pts.clone();
        assert!(matches!(
            solve_tps(&pts, &targets, 0.0),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn solve_rejects_duplicate_sources() {
        let mut pts = canonical_grid(3);
        pts[1] = pts[0];
        let targets = pts.clone();
        assert!(matches!(
            solve_tps(&pts, &targets, 0.0),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn warp_identity_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = crate::image::Image::new(24, 18);
        for v in img.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let out = warp_image(&img, &TpsParams::identity(5));
        for (a, b) in out.data.iter().zip(img.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn warp_integer_translation_matches_shift_oracle() {
        let (h, w) = (20, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mask = Array2::zeros((h, w));
        for v in mask.iter_mut() {
            *v = rng.gen::<f64>();
        }
        // Backward-sampling translation of (+3, +2) pixels reads from
        // (x+3, y+2), i.e. shifts content left/up by (3, 2).
        let (tx, ty) = (3i64, 2i64);
        let dx = 2.0 * tx as f64 / (w - 1) as f64;
        let dy = 2.0 * ty as f64 / (h - 1) as f64;
        let out = warp_mask(&mask, &TpsParams::translation(5, dx, dy));
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sx, sy) = (x + tx, y + ty);
                let expect = if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    mask[[sy as usize, sx as usize]]
                } else {
                    0.0
                };
                assert_eq!(out[[y as usize, x as usize]].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn warp_zero_input_is_zero() {
        let mask = Array2::zeros((12, 10));
        let params = TpsParams::translation(5, 0.3, -0.1);
        assert_eq!(warp_mask(&mask, &params).sum(), 0.0);
    }

    #[test]
    fn warp_is_linear_in_intensities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (16, 12);
        let mut xa = Array2::zeros((h, w));
        let mut xb = Array2::zeros((h, w));
        for v in xa.iter_mut() {
            *v = rng.gen::<f64>();
        }
        for v in xb.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let mut params = TpsParams::identity(4);
        params.affine[0][0] = 0.07;
        params.weights[5] = [0.01, -0.02];
        params.weights[10] = [-0.01, 0.02];
        let (a, b) = (0.7, -1.3);
        let combo = warp_mask(&(a * &xa + b * &xb), &params);
        let separate = a * warp_mask(&xa, &params) + b * warp_mask(&xb, &params);
        for (u, v) in combo.iter().zip(separate.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_sample_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (6, 5);
        let mut input = Array3::zeros((2, h, w));
        for v in input.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let mut grid = Array3::zeros((2, h, w));
        for y in 0..h {
            for x in 0..w {
                grid[[0, y, x]] = x as f64 + rng.gen_range(-0.4..0.4);
                grid[[1, y, x]] = y as f64 + rng.gen_range(-0.4..0.4);
            }
        }
        // Scalar objective: weighted sum of output.
        let mut coef = Array3::zeros((2, h, w));
        for v in coef.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let loss = |input: &Array3<f64>, grid: &Array3<f64>| -> f64 {
            (grid_sample(&input.view(), grid) * &coef).sum()
        };
        let (d_input, d_grid) = grid_sample_backward(&input.view(), &grid, &coef.view());
        let eps = 1e-6;
        for probe in 0..10 {
            let idx = [
                probe % 2,
                (probe * 3) % h,
                (probe * 5) % w,
            ];
            let mut ip = input.clone();
            ip[idx] += eps;
            let mut im = input.clone();
            im[idx] -= eps;
            let fd = (loss(&ip, &grid) - loss(&im, &grid)) / (2.0 * eps);
            assert!(
                (fd - d_input[idx]).abs() < 1e-6,
                "input grad {} vs fd {}",
                d_input[idx],
                fd
            );

            let mut gp = grid.clone();
            gp[idx] += eps;
            let mut gm = grid.clone();
            gm[idx] -= eps;
            let fd = (loss(&input, &gp) - loss(&input, &gm)) / (2.0 * eps);
            assert!(
                (fd - d_grid[idx]).abs() < 1e-6,
                "grid grad {} vs fd {}",
                d_grid[idx],
                fd
            );
        }
    }

    #[test]
    fn serialization_roundtrip_canonical_grid() {
        let mut params = TpsParams::identity(5);
        params.affine[0][0] = 0.125; // f32-exact values survive the roundtrip
        params.weights[3] = [0.25, -0.5];
        let bytes = params.serialize().unwrap();
        assert_eq!(bytes.len(), 16 + 4 * (6 + 2 * 25));
        let back = TpsParams::deserialize(&bytes).unwrap();
        assert_eq!(back.affine, params.affine);
        assert_eq!(back.weights, params.weights);
    }

    #[test]
    fn serialization_rejects_non_grid_control_points() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let params = solve_tps(&pts, &pts, 0.0).unwrap();
        assert!(params.serialize().is_err());
    }

    #[test]
    fn deserialization_rejects_corrupt_bytes() {
        assert!(TpsParams::deserialize(b"nonsense").is_err());
        let mut good = TpsParams::identity(3).serialize().unwrap();
        good.truncate(good.len() - 1);
        assert!(TpsParams::deserialize(&good).is_err());
    }
}
