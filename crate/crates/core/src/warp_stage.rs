//! Stage II: coarse synthesis with warped features.
//!
//! The generator consumes warped clothes, the de-clothed reference image,
//! the target pose, and the synthesized parsing (44 channels), warps its
//! bottleneck features with the parsing-pair transform, and emits a
//! bounded RGB image. Training combines an adversarial term, a perceptual
//! distance under a frozen feature tower, a discriminator feature-matching
//! distance, and plain L1 — a weighted sum with configurable weights.

use crate::error::{Error, Result};
use crate::image::{NUM_KEYPOINTS, NUM_LABELS};
use crate::nn::loss::{l1_mean, l1_mean_grad, GanForm};
use crate::nn::models::{
    GeneratorConfig, HeadKind, MultiScaleDiscriminator, PerceptualExtractor, ResnetGenerator,
    DISC_LAYERS, DISC_SCALES, PERCEPTUAL_TAPS,
};
use crate::nn::{concat_channels, concat_samples, dims4, Param};
use ndarray::{Array3, Array4, Axis, Slice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator input channels: C_w (3) + I_without_clothes (3) + pose (18)
/// + parsing (20).
pub const WARP_GEN_CHANNELS: usize = 3 + 3 + NUM_KEYPOINTS + NUM_LABELS;
/// Discriminator input: image (3) + the generator conditioning stack.
pub const WARP_DISC_CHANNELS: usize = 3 + WARP_GEN_CHANNELS;
/// Discriminator feature taps used by the feature-matching term.
pub const FEATURE_LAYERS: usize = 3;

/// Weighted-sum coefficients for the stage-II generator objective, plus
/// per-tap weights of the perceptual and feature terms. Deeper perceptual
/// taps weigh more (`alpha_i = 1 / 2^(4-i)`); feature-tap weights default
/// to 1.
#[derive(Debug, Clone)]
pub struct WarpLossWeights {
    pub adversarial: f64,
    pub perceptual: f64,
    pub feature: f64,
    pub l1: f64,
    pub alphas: [f64; PERCEPTUAL_TAPS],
    pub gammas: [f64; FEATURE_LAYERS],
}

impl Default for WarpLossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            perceptual: 10.0,
            feature: 10.0,
            l1: 10.0,
            alphas: [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0],
            gammas: [1.0; FEATURE_LAYERS],
        }
    }
}

/// Named components of one stage-II generator pass.
#[derive(Debug, Clone, Copy)]
pub struct WarpGenLosses {
    pub total: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub feature: f64,
    pub l1: f64,
}

/// Weighted sum of the four components.
pub fn warp_generator_total(
    adversarial: f64,
    perceptual: f64,
    feature: f64,
    l1: f64,
    w: &WarpLossWeights,
) -> f64 {
    w.adversarial * adversarial + w.perceptual * perceptual + w.feature * feature + w.l1 * l1
}

/// Perceptual distance: per-tap mean absolute feature difference, weighted
/// and summed. Pure evaluation (no gradients).
pub fn perceptual_loss(
    extractor: &mut PerceptualExtractor,
    candidate: &Array4<f64>,
    reference: &Array4<f64>,
    alphas: &[f64; PERCEPTUAL_TAPS],
) -> f64 {
    assert_eq!(candidate.shape(), reference.shape());
    let ref_taps = extractor.forward_taps(reference);
    let cand_taps = extractor.forward_taps(candidate);
    let mut total = 0.0;
    for i in 0..PERCEPTUAL_TAPS {
        total += alphas[i] * l1_mean(&cand_taps[i], &ref_taps[i]);
    }
    total
}

/// Perceptual distance plus its gradient with respect to the candidate.
pub fn perceptual_loss_with_grad(
    extractor: &mut PerceptualExtractor,
    candidate: &Array4<f64>,
    reference: &Array4<f64>,
    alphas: &[f64; PERCEPTUAL_TAPS],
    scale: f64,
) -> (f64, Array4<f64>) {
    // reference taps first: the extractor caches the most recent forward,
    // and the backward pass must flow through the candidate's caches
    let ref_taps = extractor.forward_taps(reference);
    let cand_taps = extractor.forward_taps(candidate);
    let mut total = 0.0;
    let mut d_taps: Vec<Option<Array4<f64>>> = Vec::with_capacity(PERCEPTUAL_TAPS);
    for i in 0..PERCEPTUAL_TAPS {
        total += alphas[i] * l1_mean(&cand_taps[i], &ref_taps[i]);
        d_taps.push(Some(l1_mean_grad(
            &cand_taps[i],
            &ref_taps[i],
            scale * alphas[i],
        )));
    }
    let d_candidate = extractor.backward_taps(&d_taps);
    (total, d_candidate)
}

/// Stage-II generator/discriminator pair plus the frozen perceptual tower.
pub struct WarpStage {
    pub generator: ResnetGenerator,
    pub discriminator: MultiScaleDiscriminator,
    pub extractor: PerceptualExtractor,
    pub gan_form: GanForm,
}

/// One training batch for the warp stage.
#[derive(Debug, Clone)]
pub struct WarpBatch {
    /// `(N, 44, H, W)`: warped clothes, de-clothed reference, pose, parsing.
    pub input: Array4<f64>,
    /// `(N, 3, H, W)` ground-truth target image.
    pub target: Array4<f64>,
    /// Per-sample bottleneck sampling grids from the parsing-pair matcher.
    pub bottleneck_grids: Option<Vec<Array3<f64>>>,
}

impl WarpStage {
    pub fn new(rng: &mut ChaCha8Rng, width_factor: usize, extractor_seed: u64) -> Self {
        let base = (64 / width_factor).max(1);
        let generator = ResnetGenerator::new(
            "warp_g",
            rng,
            GeneratorConfig::deep(WARP_GEN_CHANNELS, 3, base, HeadKind::Sigmoid),
        );
        let discriminator = MultiScaleDiscriminator::new("warp_d", rng, WARP_DISC_CHANNELS, base);
        // the extractor has its own fixed seed so it is identical across
        // stages and runs
        let mut ext_rng = rand_chacha::ChaCha8Rng::seed_from_u64(extractor_seed);
        let extractor = PerceptualExtractor::new(&mut ext_rng, base);
        Self {
            generator,
            discriminator,
            extractor,
            gan_form: GanForm::LeastSquares,
        }
    }

    /// Coarse synthesis: bounded RGB output at the input resolution.
    pub fn synthesize(
        &mut self,
        input: &Array4<f64>,
        bottleneck_grids: Option<&[Array3<f64>]>,
        train: bool,
    ) -> Result<Array4<f64>> {
        let (_, c, _, _) = dims4(input);
        if c != WARP_GEN_CHANNELS {
            return Err(Error::shape(format!(
                "warp generator expects {WARP_GEN_CHANNELS} input channels, got {c}"
            )));
        }
        Ok(self.generator.forward_warped(input, train, bottleneck_grids))
    }

    /// Discriminator feature-matching distance between a candidate and a
    /// reference under identical conditioning (pure evaluation).
    pub fn feature_matching_loss(
        &mut self,
        candidate: &Array4<f64>,
        reference: &Array4<f64>,
        conditioning: &Array4<f64>,
        gammas: &[f64; FEATURE_LAYERS],
    ) -> f64 {
        let n = candidate.shape()[0];
        let cand_stack = concat_channels(&[candidate, conditioning]);
        let ref_stack = concat_channels(&[reference, conditioning]);
        let both = concat_samples(&cand_stack, &ref_stack);
        let outs = self.discriminator.forward(&both, false);
        let mut total = 0.0;
        for out in &outs {
            for (i, g) in gammas.iter().enumerate() {
                let f = &out.features[i];
                let fc = f.slice_axis(Axis(0), Slice::from(..n)).to_owned();
                let fr = f.slice_axis(Axis(0), Slice::from(n..)).to_owned();
                total += g * l1_mean(&fc, &fr);
            }
        }
        total / DISC_SCALES as f64
    }

    /// Full generator objective with gradients accumulated into the
    /// generator. Returns every component unweighted plus the total.
    pub fn generator_losses_with_grads(
        &mut self,
        batch: &WarpBatch,
        weights: &WarpLossWeights,
    ) -> Result<WarpGenLosses> {
        let coarse = self.synthesize(
            &batch.input,
            batch.bottleneck_grids.as_deref(),
            true,
        )?;
        let n = coarse.shape()[0];

        // perceptual term
        let (percep, d_coarse_percep) = perceptual_loss_with_grad(
            &mut self.extractor,
            &coarse,
            &batch.target,
            &weights.alphas,
            weights.perceptual,
        );

        // L1 term
        let l1 = l1_mean(&coarse, &batch.target);
        let d_coarse_l1 = l1_mean_grad(&coarse, &batch.target, weights.l1);

        // adversarial + feature matching share one discriminator pass over
        // [fake; real]
        let fake_stack = concat_channels(&[&coarse, &batch.input]);
        let real_stack = concat_channels(&[&batch.target, &batch.input]);
        let both = concat_samples(&fake_stack, &real_stack);
        let outs = self.discriminator.forward(&both, true);

        let fake_patches: Vec<_> = outs
            .iter()
            .map(|o| o.patch.slice_axis(Axis(0), Slice::from(..n)).to_owned())
            .collect();
        let (adv, d_patches) = self.gan_form.generator_loss(&fake_patches);

        let mut feature = 0.0;
        let mut grads = Vec::with_capacity(outs.len());
        for (o, dp) in outs.iter().zip(d_patches) {
            // patch gradient only on the fake half
            let real_half = Array4::zeros(dp.raw_dim());
            let d_patch = concat_samples(&(dp * weights.adversarial), &real_half);
            let mut d_feats: [Option<Array4<f64>>; DISC_LAYERS] = Default::default();
            for (i, g) in weights.gammas.iter().enumerate() {
                let f = &o.features[i];
                let fc = f.slice_axis(Axis(0), Slice::from(..n)).to_owned();
                let fr = f.slice_axis(Axis(0), Slice::from(n..)).to_owned();
                feature += g * l1_mean(&fc, &fr) / DISC_SCALES as f64;
                let scale = weights.feature * g / DISC_SCALES as f64;
                let d_fake = l1_mean_grad(&fc, &fr, scale);
                let d_real = l1_mean_grad(&fr, &fc, scale);
                d_feats[i] = Some(concat_samples(&d_fake, &d_real));
            }
            grads.push((Some(d_patch), d_feats));
        }
        let d_both = self.discriminator.backward(grads);
        let d_coarse_disc = d_both
            .slice_axis(Axis(0), Slice::from(..n))
            .slice_axis(Axis(1), Slice::from(..3))
            .to_owned();

        let d_coarse = d_coarse_percep + d_coarse_l1 + d_coarse_disc;
        self.generator.backward(&d_coarse);

        Ok(WarpGenLosses {
            total: warp_generator_total(adv, percep, feature, l1, weights),
            adversarial: adv,
            perceptual: percep,
            feature,
            l1,
        })
    }

    /// Discriminator objective; `coarse` is constant with respect to the
    /// generator.
    pub fn discriminator_loss_with_grads(
        &mut self,
        batch: &WarpBatch,
        coarse: &Array4<f64>,
    ) -> Result<f64> {
        let real_stack = concat_channels(&[&batch.target, &batch.input]);
        let fake_stack = concat_channels(&[coarse, &batch.input]);
        let n = real_stack.shape()[0];
        let both = concat_samples(&real_stack, &fake_stack);
        let outs = self.discriminator.forward(&both, true);
        let mut real_patches = Vec::new();
        let mut fake_patches = Vec::new();
        for o in &outs {
            real_patches.push(o.patch.slice_axis(Axis(0), Slice::from(..n)).to_owned());
            fake_patches.push(o.patch.slice_axis(Axis(0), Slice::from(n..)).to_owned());
        }
        let (loss, d_real, d_fake) = self
            .gan_form
            .discriminator_loss(&real_patches, &fake_patches);
        let grads: Vec<_> = d_real
            .into_iter()
            .zip(d_fake)
            .map(|(r, f)| (Some(concat_samples(&r, &f)), Default::default()))
            .collect();
        self.discriminator.backward(grads);
        Ok(loss)
    }

    pub fn visit_generator_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.generator.visit_params(f);
    }

    pub fn visit_discriminator_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.discriminator.visit_params(f);
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.generator.visit_params(f);
        self.discriminator.visit_params(f);
        self.extractor.visit_params(f);
    }
}
