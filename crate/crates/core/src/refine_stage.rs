//! Stage III: composition-mask refinement.
//!
//! A shallow generator predicts a single-channel mask in (0, 1) from
//! warped clothes, the coarse result, and the target pose; the final
//! render blends warped clothes over the coarse result with that mask.
//! Training uses a perceptual term on the blend plus a mask regularizer
//! pulling the mask toward 1.

use crate::error::{Error, Result};
use crate::image::NUM_KEYPOINTS;
use crate::nn::loss::l1_mean;
use crate::nn::models::{
    GeneratorConfig, HeadKind, PerceptualExtractor, ResnetGenerator, PERCEPTUAL_TAPS,
};
use crate::nn::{dims4, Param};
use crate::warp_stage::{perceptual_loss, perceptual_loss_with_grad};
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Render generator input: C_w (3) + coarse (3) + pose (18).
pub const RENDER_CHANNELS: usize = 3 + 3 + NUM_KEYPOINTS;

/// Weights of the two render loss terms. A strong mask weight collapses
/// the render to raw warped clothes at desk scale, hence the small default.
/// `mask_toward_one` selects the regularizer direction; the written form
/// penalizes distance from 1.
#[derive(Debug, Clone, Copy)]
pub struct RenderLossWeights {
    pub perceptual: f64,
    pub mask: f64,
    pub mask_toward_one: bool,
}

impl Default for RenderLossWeights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            mask: 0.1,
            mask_toward_one: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderLosses {
    pub total: f64,
    pub perceptual: f64,
    pub mask: f64,
}

/// Blend warped clothes over the coarse result:
/// `out = mask * warped + (1 - mask) * coarse`, broadcasting the
/// single-channel mask over RGB.
pub fn compose(
    warped_clothes: &Array4<f64>,
    coarse: &Array4<f64>,
    mask: &Array4<f64>,
) -> Result<Array4<f64>> {
    let (n, c, h, w) = dims4(warped_clothes);
    if coarse.shape() != warped_clothes.shape() {
        return Err(Error::shape("compose: clothes/coarse shape mismatch"));
    }
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "compose: mask must be (N, 1, H, W), got {:?}",
            mask.shape()
        )));
    }
    let mut out = Array4::zeros((n, c, h, w));
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let m = mask[[bn, 0, y, x]];
                    out[[bn, ch, y, x]] = m * warped_clothes[[bn, ch, y, x]]
                        + (1.0 - m) * coarse[[bn, ch, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`compose`] with respect to the mask given the output
/// gradient (channel contributions summed).
pub fn compose_mask_grad(
    warped_clothes: &Array4<f64>,
    coarse: &Array4<f64>,
    d_out: &Array4<f64>,
) -> Array4<f64> {
    let (n, c, h, w) = dims4(warped_clothes);
    let mut d_mask = Array4::zeros((n, 1, h, w));
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    d_mask[[bn, 0, y, x]] += d_out[[bn, ch, y, x]]
                        * (warped_clothes[[bn, ch, y, x]] - coarse[[bn, ch, y, x]]);
                }
            }
        }
    }
    d_mask
}

/// Mask regularizer: `mean|1 - mask|` (or `mean|mask|` with the direction
/// switch). Returns the term and its gradient with respect to the mask.
pub fn mask_term(mask: &Array4<f64>, toward_one: bool, scale: f64) -> (f64, Array4<f64>) {
    let n = mask.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros(mask.raw_dim());
    for (g, &m) in grad.iter_mut().zip(mask.iter()) {
        let d = if toward_one { 1.0 - m } else { m };
        loss += d.abs();
        let s = crate::nn::loss::sign0(d) * scale / n;
        *g = if toward_one { -s } else { s };
    }
    (loss / n, grad)
}

/// Total render objective on an already-composed image (pure evaluation).
pub fn render_loss(
    rendered: &Array4<f64>,
    target: &Array4<f64>,
    mask: &Array4<f64>,
    weights: &RenderLossWeights,
    extractor: &mut PerceptualExtractor,
    alphas: &[f64; PERCEPTUAL_TAPS],
) -> RenderLosses {
    let percep = perceptual_loss(extractor, rendered, target, alphas);
    let (mask_loss, _) = mask_term(mask, weights.mask_toward_one, 1.0);
    RenderLosses {
        total: weights.perceptual * percep + weights.mask * mask_loss,
        perceptual: percep,
        mask: mask_loss,
    }
}

/// Stage-III mask generator plus the shared frozen perceptual tower.
pub struct RefineStage {
    pub generator: ResnetGenerator,
    pub extractor: PerceptualExtractor,
    pub alphas: [f64; PERCEPTUAL_TAPS],
}

/// One stage-III batch: inputs plus the ground-truth target image.
#[derive(Debug, Clone)]
pub struct RenderBatch {
    /// `(N, 3, H, W)` warped clothes C_w.
    pub warped_clothes: Array4<f64>,
    /// `(N, 3, H, W)` coarse synthesis from stage II.
    pub coarse: Array4<f64>,
    /// `(N, 18, H, W)` target pose heatmap.
    pub pose: Array4<f64>,
    /// `(N, 3, H, W)` ground-truth target image.
    pub target: Array4<f64>,
}

impl RenderBatch {
    pub fn input_stack(&self) -> Array4<f64> {
        crate::nn::concat_channels(&[&self.warped_clothes, &self.coarse, &self.pose])
    }
}

impl RefineStage {
    pub fn new(rng: &mut ChaCha8Rng, width_factor: usize, extractor_seed: u64) -> Self {
        let base = (64 / width_factor).max(1);
        let generator = ResnetGenerator::new(
            "render_g",
            rng,
            GeneratorConfig::shallow(RENDER_CHANNELS, 1, base, HeadKind::Sigmoid),
        );
        let mut ext_rng = ChaCha8Rng::seed_from_u64(extractor_seed);
        let extractor = PerceptualExtractor::new(&mut ext_rng, base);
        Self {
            generator,
            extractor,
            alphas: crate::warp_stage::WarpLossWeights::default().alphas,
        }
    }

    /// Predict the composition mask, strictly inside (0, 1).
    pub fn predict_mask(&mut self, batch_input: &Array4<f64>, train: bool) -> Result<Array4<f64>> {
        let (_, c, _, _) = dims4(batch_input);
        if c != RENDER_CHANNELS {
            return Err(Error::shape(format!(
                "render generator expects {RENDER_CHANNELS} input channels, got {c}"
            )));
        }
        Ok(self.generator.forward(batch_input, train))
    }

    /// Full render pass: mask, composition, losses, gradients into the
    /// generator.
    pub fn losses_with_grads(
        &mut self,
        batch: &RenderBatch,
        weights: &RenderLossWeights,
    ) -> Result<RenderLosses> {
        let input = batch.input_stack();
        let mask = self.predict_mask(&input, true)?;
        let rendered = compose(&batch.warped_clothes, &batch.coarse, &mask)?;
        let (percep, d_rendered) = perceptual_loss_with_grad(
            &mut self.extractor,
            &rendered,
            &batch.target,
            &self.alphas,
            weights.perceptual,
        );
        let (mask_loss, d_mask_term) = mask_term(&mask, weights.mask_toward_one, weights.mask);
        let d_mask = compose_mask_grad(&batch.warped_clothes, &batch.coarse, &d_rendered)
            + d_mask_term;
        self.generator.backward(&d_mask);
        Ok(RenderLosses {
            total: weights.perceptual * percep + weights.mask * mask_loss,
            perceptual: percep,
            mask: mask_loss,
        })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.generator.visit_params(f);
        self.extractor.visit_params(f);
    }

    pub fn visit_generator_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.generator.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, GradCheckTarget};
    use crate::nn::zero_grads;
    use rand::Rng;

    fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut x = Array4::zeros(shape);
        for v in x.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        x
    }

    #[test]
    fn compose_mask_extremes_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cw = rand4(&mut rng, (1, 3, 8, 6));
        let coarse = rand4(&mut rng, (1, 3, 8, 6));
        let ones = Array4::from_elem((1, 1, 8, 6), 1.0);
        let zeros = Array4::zeros((1, 1, 8, 6));
        let out1 = compose(&cw, &coarse, &ones).unwrap();
        for (a, b) in out1.iter().zip(cw.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let out0 = compose(&cw, &coarse, &zeros).unwrap();
        for (a, b) in out0.iter().zip(coarse.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let half = Array4::from_elem((1, 1, 2, 2), 0.5);
        let a = Array4::from_elem((1, 3, 2, 2), 0.2);
        let b = Array4::from_elem((1, 3, 2, 2), 0.8);
        let mid = compose(&a, &b, &half).unwrap();
        assert!(mid.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn compose_output_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let cw = rand4(&mut rng, (1, 3, 4, 3));
            let coarse = rand4(&mut rng, (1, 3, 4, 3));
            let mask = rand4(&mut rng, (1, 1, 4, 3));
            let out = compose(&cw, &coarse, &mask).unwrap();
            for ch in 0..3 {
                for y in 0..4 {
                    for x in 0..3 {
                        let lo = cw[[0, ch, y, x]].min(coarse[[0, ch, y, x]]);
                        let hi = cw[[0, ch, y, x]].max(coarse[[0, ch, y, x]]);
                        let v = out[[0, ch, y, x]];
                        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn compose_rejects_bad_shapes() {
        let cw = Array4::zeros((1, 3, 4, 3));
        let coarse = Array4::zeros((1, 3, 4, 3));
        let bad_mask = Array4::zeros((1, 3, 4, 3));
        assert!(compose(&cw, &coarse, &bad_mask).is_err());
        let bad_coarse = Array4::zeros((1, 3, 5, 3));
        assert!(compose(&cw, &bad_coarse, &Array4::zeros((1, 1, 4, 3))).is_err());
    }

    #[test]
    fn mask_term_trivial_values_and_uniform_gradient() {
        let ones = Array4::from_elem((1, 1, 4, 3), 1.0);
        let (loss, _) = mask_term(&ones, true, 1.0);
        assert_eq!(loss, 0.0);
        let zeros = Array4::zeros((1, 1, 4, 3));
        let (loss, grad) = mask_term(&zeros, true, 0.25);
        assert!((loss - 1.0).abs() < 1e-15); // mean|1 - 0| = 1; weighted term = mask weight
        // gradient is uniformly -scale / count while mask < 1
        let n = 12.0;
        for g in grad.iter() {
            assert!((g - (-0.25 / n)).abs() < 1e-15);
        }
        // direction switch penalizes distance from zero instead
        let (loss0, grad0) = mask_term(&zeros, false, 1.0);
        assert_eq!(loss0, 0.0);
        assert!(grad0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn render_loss_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stage = RefineStage::new(&mut rng, 8, 7);
        let target = rand4(&mut rng, (1, 3, 16, 12));
        let ones = Array4::from_elem((1, 1, 16, 12), 1.0);
        let w = RenderLossWeights::default();
        let alphas = stage.alphas;
        // rendered == target and mask == 1: total loss is exactly zero
        let r = render_loss(&target.clone(), &target, &ones, &w, &mut stage.extractor, &alphas);
        assert_eq!(r.total, 0.0);
        // mask == 0 contributes exactly the mask weight
        let zeros = Array4::zeros((1, 1, 16, 12));
        let r = render_loss(&target.clone(), &target, &zeros, &w, &mut stage.extractor, &alphas);
        assert!((r.total - w.mask).abs() < 1e-12);
        assert!((r.mask - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predicted_mask_is_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut stage = RefineStage::new(&mut rng, 8, 7);
        let input = rand4(&mut rng, (2, RENDER_CHANNELS, 16, 12));
        let mask = stage.predict_mask(&input, true).unwrap();
        assert_eq!(mask.shape(), &[2, 1, 16, 12]);
        assert!(mask.iter().all(|&m| m > 0.0 && m < 1.0));
        let bad = Array4::zeros((1, 7, 16, 12));
        assert!(stage.predict_mask(&bad, true).is_err());
    }

    struct RenderTarget {
        stage: RefineStage,
        batch: RenderBatch,
        weights: RenderLossWeights,
    }

    impl GradCheckTarget for RenderTarget {
        fn loss_with_grads(&mut self) -> f64 {
            zero_grads(|f| self.stage.visit_params(f));
            self.stage
                .losses_with_grads(&self.batch, &self.weights)
                .unwrap()
                .total
        }
        fn loss(&mut self) -> f64 {
            let input = self.batch.input_stack();
            let mask = self.stage.predict_mask(&input, true).unwrap();
            let rendered =
                compose(&self.batch.warped_clothes, &self.batch.coarse, &mask).unwrap();
            let alphas = self.stage.alphas;
            render_loss(
                &rendered,
                &self.batch.target,
                &mask,
                &self.weights,
                &mut self.stage.extractor,
                &alphas,
            )
            .total
        }
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
            self.stage.visit_generator_params(f);
        }
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stage = RefineStage::new(&mut rng, 8, 7);
        let batch = RenderBatch {
            warped_clothes: rand4(&mut rng, (1, 3, 16, 12)),
            coarse: rand4(&mut rng, (1, 3, 16, 12)),
            pose: rand4(&mut rng, (1, NUM_KEYPOINTS, 16, 12)),
            target: rand4(&mut rng, (1, 3, 16, 12)),
        };
        let mut target = RenderTarget {
            stage,
            batch,
            weights: RenderLossWeights::default(),
        };
        let res = check_gradients(&mut target, 50, 1e-5, 29);
        assert!(res.passes(50, 1e-3), "{res:?}");
    }
}
