//! Stage I: conditional human-parsing synthesis.
//!
//! A ResNet generator maps the conditioning stack (hair mask, face mask,
//! body shape, clothes image, pose heatmap — 24 channels) to 20-channel
//! label logits, trained against the ground-truth parsing with an
//! adversarial term, an L1 term between per-pixel probabilities and the
//! one-hot encoding, and a pixel-wise softmax cross-entropy.

use crate::error::{Error, Result};
use crate::image::{BodyMasks, Image, PoseHeatmap, NUM_KEYPOINTS, NUM_LABELS};
use crate::nn::loss::{l1_mean, l1_mean_grad, softmax_backward, softmax_channels, softmax_cross_entropy, GanForm};
use crate::nn::models::{GeneratorConfig, HeadKind, MultiScaleDiscriminator, ResnetGenerator};
use crate::nn::{concat_channels, concat_samples, dims4, Param};
use ndarray::{Array3, Array4, Axis, Slice};
use rand_chacha::ChaCha8Rng;

/// Conditioning channels: M_h (1) + M_f (1) + M_b (1) + clothes (3) + pose (18).
pub const COND_CHANNELS: usize = 24;
/// Discriminator input: parsing (20) + conditioning (24).
pub const DISC_CHANNELS: usize = COND_CHANNELS + NUM_LABELS;

/// Relative weights of the three generator loss terms. The objective's
/// expectation terms carry no weights in the source formulation; these
/// defaults treat them equally and stay configurable.
#[derive(Debug, Clone, Copy)]
pub struct ParsingLossWeights {
    pub adversarial: f64,
    pub l1: f64,
    pub cross_entropy: f64,
}

impl Default for ParsingLossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            l1: 1.0,
            cross_entropy: 1.0,
        }
    }
}

/// Named loss components of one generator pass.
#[derive(Debug, Clone, Copy)]
pub struct ParsingGenLosses {
    pub total: f64,
    pub adversarial: f64,
    pub l1: f64,
    pub cross_entropy: f64,
}

/// One training batch for the conditional parsing stage.
#[derive(Debug, Clone)]
pub struct ParsingBatch {
    /// `(N, 24, H, W)` conditioning stack.
    pub cond: Array4<f64>,
    /// `(N, 20, H, W)` one-hot ground truth.
    pub target_onehot: Array4<f64>,
    /// `(N, H, W)` label map consistent with the one-hot encoding.
    pub target_labels: Array3<u8>,
}

/// Assemble the `(24, H, W)` conditioning stack for one sample.
pub fn build_condition(
    masks: &BodyMasks,
    clothes: &Image,
    pose: &PoseHeatmap,
) -> Result<Array3<f64>> {
    let (h, w) = (clothes.height(), clothes.width());
    if masks.hair.shape() != [h, w] || pose.height() != h || pose.width() != w {
        return Err(Error::shape(format!(
            "conditioning inputs disagree on resolution ({h}x{w})"
        )));
    }
    let mut out = Array3::zeros((COND_CHANNELS, h, w));
    out.index_axis_mut(Axis(0), 0).assign(&masks.hair);
    out.index_axis_mut(Axis(0), 1).assign(&masks.face);
    out.index_axis_mut(Axis(0), 2).assign(&masks.body_shape);
    for c in 0..3 {
        out.index_axis_mut(Axis(0), 3 + c)
            .assign(&clothes.data.index_axis(Axis(0), c));
    }
    for k in 0..NUM_KEYPOINTS {
        out.index_axis_mut(Axis(0), 6 + k)
            .assign(&pose.channels.index_axis(Axis(0), k));
    }
    Ok(out)
}

/// Stage-I generator/discriminator pair.
pub struct ParsingStage {
    pub generator: ResnetGenerator,
    pub discriminator: MultiScaleDiscriminator,
    pub gan_form: GanForm,
}

impl ParsingStage {
    pub fn new(rng: &mut ChaCha8Rng, width_factor: usize) -> Self {
        let base = (64 / width_factor).max(1);
        let generator = ResnetGenerator::new(
            "parse_g",
            rng,
            GeneratorConfig::deep(COND_CHANNELS, NUM_LABELS, base, HeadKind::Logits),
        );
        let discriminator =
            MultiScaleDiscriminator::new("parse_d", rng, DISC_CHANNELS, base);
        Self {
            generator,
            discriminator,
            gan_form: GanForm::LeastSquares,
        }
    }

    /// Forward pass: label logits and per-pixel softmax probabilities.
    pub fn generate(
        &mut self,
        cond: &Array4<f64>,
        train: bool,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        let (_, c, _, _) = dims4(cond);
        if c != COND_CHANNELS {
            return Err(Error::shape(format!(
                "parsing generator expects {COND_CHANNELS} conditioning channels, got {c}"
            )));
        }
        let logits = self.generator.forward(cond, train);
        let probs = softmax_channels(&logits);
        Ok((logits, probs))
    }

    /// Generator objective: adversarial + L1(probabilities, one-hot) +
    /// pixel-wise cross-entropy. Accumulates gradients into the generator
    /// (and, incidentally, the discriminator, whose gradients the caller
    /// zeroes before its own update).
    pub fn generator_losses_with_grads(
        &mut self,
        batch: &ParsingBatch,
        weights: &ParsingLossWeights,
    ) -> Result<ParsingGenLosses> {
        let (logits, probs) = self.generate(&batch.cond, true)?;

        // adversarial term through the discriminator
        let fake_stack = concat_channels(&[&probs, &batch.cond]);
        let outs = self.discriminator.forward(&fake_stack, true);
        let patches: Vec<_> = outs.into_iter().map(|o| o.patch).collect();
        let (adv, d_patches) = self.gan_form.generator_loss(&patches);
        let scaled: Vec<_> = d_patches
            .into_iter()
            .map(|g| (Some(g * weights.adversarial), Default::default()))
            .collect();
        let d_fake_stack = self.discriminator.backward(scaled);
        let d_probs_adv = d_fake_stack
            .slice_axis(Axis(1), Slice::from(..NUM_LABELS))
            .to_owned();

        // L1 between probabilities and the one-hot target
        let l1 = l1_mean(&probs, &batch.target_onehot);
        let d_probs_l1 = l1_mean_grad(&probs, &batch.target_onehot, weights.l1);

        // pixel-wise softmax cross-entropy on the logits
        let (ce, d_logits_ce) = softmax_cross_entropy(&logits, &batch.target_labels);

        let d_probs = d_probs_adv + d_probs_l1;
        let d_logits = softmax_backward(&probs, &d_probs) + d_logits_ce * weights.cross_entropy;
        self.generator.backward(&d_logits);

        Ok(ParsingGenLosses {
            total: weights.adversarial * adv + weights.l1 * l1 + weights.cross_entropy * ce,
            adversarial: adv,
            l1,
            cross_entropy: ce,
        })
    }

    /// Discriminator objective on a real/fake pair. `fake_probs` is
    /// treated as a constant (no gradient flows back to the generator).
    pub fn discriminator_loss_with_grads(
        &mut self,
        batch: &ParsingBatch,
        fake_probs: &Array4<f64>,
    ) -> Result<f64> {
        let real_stack = concat_channels(&[&batch.target_onehot, &batch.cond]);
        let fake_stack = concat_channels(&[fake_probs, &batch.cond]);
        let n = real_stack.shape()[0];
        // one forward over [real; fake] keeps layer caches consistent for
        // a single backward (instance-norm discriminators do not couple
        // samples)
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
    }
}
