//! Network architectures shared by the pipeline stages: the
//! encoder/resnet/decoder generator, the multi-scale patch discriminator,
//! and the frozen perceptual feature tower.

use super::layers::{BatchNorm2d, Conv2d, InstanceNorm2d, LeakyRelu, NearestUpsample2, Relu, Sigmoid};
use super::{avg_pool2, avg_pool2_backward, dims4, Layer, Param, Sequential};
use crate::tps::{grid_sample, grid_sample_backward};
use ndarray::{Array3, Array4, Axis, Slice};
use rand_chacha::ChaCha8Rng;

/// Residual block of three conv/norm/relu stages with an (optionally
/// projected) skip connection.
pub struct ResidualBlock {
    body: Sequential,
    proj: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Self {
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        let mut cur = in_ch;
        for i in 0..3 {
            layers.push(Box::new(Conv2d::new(
                &format!("{name}.conv{i}"),
                rng,
                cur,
                out_ch,
                3,
                1,
                1,
            )));
            layers.push(Box::new(BatchNorm2d::new(
                &format!("{name}.bn{i}"),
                rng,
                out_ch,
            )));
            layers.push(Box::new(Relu::new()));
            cur = out_ch;
        }
        let proj = (in_ch != out_ch)
            .then(|| Conv2d::new(&format!("{name}.proj"), rng, in_ch, out_ch, 1, 1, 0));
        Self {
            body: Sequential::new(layers),
            proj,
        }
    }
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let branch = self.body.forward(x, train);
        match &mut self.proj {
            Some(p) => p.forward(x, train) + branch,
            None => x + &branch,
        }
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let d_branch = self.body.backward(grad_out);
        match &mut self.proj {
            Some(p) => p.backward(grad_out) + d_branch,
            None => grad_out + &d_branch,
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_params(f);
        if let Some(p) = &mut self.proj {
            p.visit_params(f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Raw logits (per-pixel classification heads).
    Logits,
    /// Sigmoid-squashed output in (0, 1) (images, composition masks).
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Filters of the first downsample layer; doubles per downsample, and
    /// the residual trunk runs at `base_width << n_down`.
    pub base_width: usize,
    pub n_down: usize,
    pub n_blocks: usize,
    pub head: HeadKind,
}

impl GeneratorConfig {
    /// The deep stage-I/stage-II skeleton: 3 down, 9 residual blocks,
    /// 3 up. With `base_width = 64` the filter schedule is
    /// 64,128,256,512x9,256,128,64.
    pub fn deep(in_channels: usize, out_channels: usize, base_width: usize, head: HeadKind) -> Self {
        Self {
            in_channels,
            out_channels,
            base_width,
            n_down: 3,
            n_blocks: 9,
            head,
        }
    }

    /// Shallower stage-III skeleton: 2 down, 4 residual blocks, 2 up.
    pub fn shallow(
        in_channels: usize,
        out_channels: usize,
        base_width: usize,
        head: HeadKind,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            base_width,
            n_down: 2,
            n_blocks: 4,
            head,
        }
    }
}

/// Encoder / residual trunk / decoder generator.
///
/// Inputs of arbitrary size are zero-padded on the bottom/right up to a
/// multiple of `2^n_down` and the output is cropped back. The bottleneck
/// feature grid (encoder output) can be warped in-place with per-sample
/// sampling grids before the residual trunk runs.
pub struct ResnetGenerator {
    pub cfg: GeneratorConfig,
    encoder: Sequential,
    blocks: Vec<ResidualBlock>,
    decoder: Sequential,
    orig_hw: Option<(usize, usize)>,
    warp_ctx: Option<(Array4<f64>, Vec<Array3<f64>>)>,
}

impl ResnetGenerator {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, cfg: GeneratorConfig) -> Self {
        let mut enc: Vec<Box<dyn Layer>> = Vec::new();
        let mut cur = cfg.in_channels;
        for i in 0..cfg.n_down {
            let out = cfg.base_width << i;
            enc.push(Box::new(Conv2d::new(
                &format!("{name}.down{i}"),
                rng,
                cur,
                out,
                3,
                2,
                1,
            )));
            enc.push(Box::new(BatchNorm2d::new(
                &format!("{name}.down{i}_bn"),
                rng,
                out,
            )));
            enc.push(Box::new(Relu::new()));
            cur = out;
        }
        let trunk_width = cfg.base_width << cfg.n_down;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            blocks.push(ResidualBlock::new(
                &format!("{name}.res{i}"),
                rng,
                if i == 0 { cur } else { trunk_width },
                trunk_width,
            ));
        }
        let mut dec: Vec<Box<dyn Layer>> = Vec::new();
        let mut cur = trunk_width;
        for i in 0..cfg.n_down {
            let out = cur / 2;
            dec.push(Box::new(NearestUpsample2::new()));
            dec.push(Box::new(Conv2d::new(
                &format!("{name}.up{i}"),
                rng,
                cur,
                out,
                3,
                1,
                1,
            )));
            dec.push(Box::new(BatchNorm2d::new(
                &format!("{name}.up{i}_bn"),
                rng,
                out,
            )));
            dec.push(Box::new(Relu::new()));
            cur = out;
        }
        dec.push(Box::new(Conv2d::new(
            &format!("{name}.head"),
            rng,
            cur,
            cfg.out_channels,
            3,
            1,
            1,
        )));
        if cfg.head == HeadKind::Sigmoid {
            dec.push(Box::new(Sigmoid::new()));
        }
        Self {
            cfg,
            encoder: Sequential::new(enc),
            blocks,
            decoder: Sequential::new(dec),
            orig_hw: None,
            warp_ctx: None,
        }
    }

    fn factor(&self) -> usize {
        1 << self.cfg.n_down
    }

    /// Bottleneck spatial size for an input of `(h, w)` (after padding).
    pub fn bottleneck_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = self.factor();
        (h.div_ceil(f), w.div_ceil(f))
    }

    fn pad_input(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dims4(x);
        let f = self.factor();
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        if (ph, pw) == (h, w) {
            return x.clone();
        }
        let mut out = Array4::zeros((n, c, ph, pw));
        out.slice_mut(ndarray::s![.., .., ..h, ..w]).assign(x);
        out
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        self.forward_warped(x, train, None)
    }

    /// Forward pass, optionally warping the bottleneck features with one
    /// sampling grid per batch sample (grids in bottleneck pixel units).
    pub fn forward_warped(
        &mut self,
        x: &Array4<f64>,
        train: bool,
        grids: Option<&[Array3<f64>]>,
    ) -> Array4<f64> {
        let (n, _, h, w) = dims4(x);
        self.orig_hw = Some((h, w));
        let padded = self.pad_input(x);
        let mut feat = self.encoder.forward(&padded, train);
        self.warp_ctx = None;
        if let Some(grids) = grids {
            assert_eq!(grids.len(), n, "one warp grid per sample required");
            let pre = feat.clone();
            for (i, grid) in grids.iter().enumerate() {
                let warped = grid_sample(&pre.index_axis(Axis(0), i), grid);
                feat.index_axis_mut(Axis(0), i).assign(&warped);
            }
            self.warp_ctx = Some((pre, grids.to_vec()));
        }
        let mut cur = feat;
        for b in &mut self.blocks {
            cur = b.forward(&cur, train);
        }
        let out = self.decoder.forward(&cur, train);
        out.slice_axis(Axis(2), Slice::from(..h))
            .slice_axis(Axis(3), Slice::from(..w))
            .to_owned()
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let (h, w) = self.orig_hw.take().expect("generator backward without forward");
        let (n, c, gh, gw) = dims4(grad_out);
        let f = self.factor();
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        assert_eq!((gh, gw), (h, w), "output gradient shape mismatch");
        let mut g = Array4::zeros((n, c, ph, pw));
        g.slice_mut(ndarray::s![.., .., ..h, ..w]).assign(grad_out);
        let mut g = self.decoder.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        if let Some((pre, grids)) = self.warp_ctx.take() {
            let mut unwarped = Array4::zeros(g.raw_dim());
            for (i, grid) in grids.iter().enumerate() {
                let (d_in, _d_grid) =
                    grid_sample_backward(&pre.index_axis(Axis(0), i), grid, &g.index_axis(Axis(0), i));
                unwarped.index_axis_mut(Axis(0), i).assign(&d_in);
            }
            g = unwarped;
        }
        let dx = self.encoder.backward(&g);
        dx.slice_axis(Axis(2), Slice::from(..h))
            .slice_axis(Axis(3), Slice::from(..w))
            .to_owned()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.decoder.visit_params(f);
    }
}

/// One patch discriminator: four stride-2 4x4 conv blocks (instance norm
/// after the first) and a 1-channel patch head. Block outputs are exposed
/// for the feature-matching loss.
pub struct PatchDiscriminator {
    blocks: Vec<Sequential>,
    head: Conv2d,
}

/// Per-layer feature maps plus patch logits from one discriminator scale.
pub struct DiscOutput {
    pub features: Vec<Array4<f64>>,
    pub patch: Array4<f64>,
}

pub const DISC_LAYERS: usize = 4;

impl PatchDiscriminator {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_channels: usize, base_width: usize) -> Self {
        let mut blocks = Vec::with_capacity(DISC_LAYERS);
        let mut cur = in_channels;
        for i in 0..DISC_LAYERS {
            let out = base_width << i;
            let mut layers: Vec<Box<dyn Layer>> = vec![Box::new(Conv2d::new(
                &format!("{name}.d{i}"),
                rng,
                cur,
                out,
                4,
                2,
                2,
            ))];
            if i > 0 {
                layers.push(Box::new(InstanceNorm2d::new(
                    &format!("{name}.d{i}_in"),
                    rng,
                    out,
                )));
            }
            layers.push(Box::new(LeakyRelu::new(0.2)));
            blocks.push(Sequential::new(layers));
            cur = out;
        }
        let head = Conv2d::new(&format!("{name}.head"), rng, cur, 1, 4, 1, 2);
        Self { blocks, head }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> DiscOutput {
        let mut features = Vec::with_capacity(DISC_LAYERS);
        let mut cur = x.clone();
        for b in &mut self.blocks {
            cur = b.forward(&cur, train);
            features.push(cur.clone());
        }
        let patch = self.head.forward(&cur, train);
        DiscOutput { features, patch }
    }

    /// Backpropagate gradients injected at the patch output and/or any of
    /// the four feature taps; returns the input gradient.
    pub fn backward(
        &mut self,
        d_patch: Option<&Array4<f64>>,
        d_features: &[Option<Array4<f64>>; DISC_LAYERS],
    ) -> Array4<f64> {
        let mut g = match d_patch {
            Some(dp) => Some(self.head.backward(dp)),
            None => None,
        };
        for i in (0..DISC_LAYERS).rev() {
            let mut gi = match (g.take(), &d_features[i]) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b.clone(),
                (None, None) => panic!("discriminator backward with no gradient source"),
            };
            gi = self.blocks[i].backward(&gi);
            g = Some(gi);
        }
        g.unwrap()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
}

/// pix2pixHD-style two-scale discriminator; scale 1 sees a 2x
/// average-pooled input.
pub struct MultiScaleDiscriminator {
    pub scales: Vec<PatchDiscriminator>,
    in_hw: Option<(usize, usize)>,
}

pub const DISC_SCALES: usize = 2;

impl MultiScaleDiscriminator {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_channels: usize, base_width: usize) -> Self {
        let scales = (0..DISC_SCALES)
            .map(|s| PatchDiscriminator::new(&format!("{name}.s{s}"), rng, in_channels, base_width))
            .collect();
        Self {
            scales,
            in_hw: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Vec<DiscOutput> {
        let (_, _, h, w) = dims4(x);
        self.in_hw = Some((h, w));
        let mut outs = Vec::with_capacity(DISC_SCALES);
        let mut cur = x.clone();
        for (s, d) in self.scales.iter_mut().enumerate() {
            if s > 0 {
                cur = avg_pool2(&cur);
            }
            outs.push(d.forward(&cur, train));
        }
        outs
    }

    /// Per-scale gradient injection mirroring [`PatchDiscriminator::backward`].
    pub fn backward(
        &mut self,
        grads: Vec<(Option<Array4<f64>>, [Option<Array4<f64>>; DISC_LAYERS])>,
    ) -> Array4<f64> {
        assert_eq!(grads.len(), DISC_SCALES);
        let (h, w) = self.in_hw.take().expect("ms-disc backward without forward");
        let mut total: Option<Array4<f64>> = None;
        for (s, (dp, df)) in grads.into_iter().enumerate() {
            if dp.is_none() && df.iter().all(|d| d.is_none()) {
                continue;
            }
            let mut g = self.scales[s].backward(dp.as_ref(), &df);
            // undo the pooling chain in front of scale s
            for _ in 0..s {
                let (gh, gw) = {
                    let d = dims4(&g);
                    (d.2 * 2, d.3 * 2)
                };
                g = avg_pool2_backward(&g, gh, gw);
            }
            // pooled sizes may have dropped odd trailing rows; re-embed
            let mut full = Array4::zeros((dims4(&g).0, dims4(&g).1, h, w));
            let (_, _, gh, gw) = dims4(&g);
            full.slice_mut(ndarray::s![.., .., ..gh, ..gw]).assign(&g);
            total = Some(match total {
                Some(t) => t + full,
                None => full,
            });
        }
        total.expect("ms-disc backward with no gradient source")
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for d in &mut self.scales {
            d.visit_params(f);
        }
    }
}

/// Frozen feature tower standing in for a pretrained perceptual network.
///
/// Five conv blocks with taps after each rectification; parameters are
/// drawn once from the seeded RNG and never trained. Substituting real
/// pretrained weights means loading different values into the same blocks.
/// Leaky rectification keeps tap values off exact zero, so L1 distances
/// between taps stay away from the |0 - 0| kink and finite-difference
/// checks of perceptual losses hold tightly.
pub struct PerceptualExtractor {
    blocks: Vec<Sequential>,
}

pub const PERCEPTUAL_TAPS: usize = 5;

impl PerceptualExtractor {
    pub fn new(rng: &mut ChaCha8Rng, base_width: usize) -> Self {
        let widths = [
            base_width,
            base_width * 2,
            base_width * 4,
            base_width * 8,
            base_width * 8,
        ];
        let mut blocks = Vec::with_capacity(PERCEPTUAL_TAPS);
        let mut cur = 3;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let layers: Vec<Box<dyn Layer>> = vec![
                Box::new(Conv2d::new(&format!("phi.b{i}"), rng, cur, w, 3, stride, 1)),
                Box::new(LeakyRelu::new(0.2)),
            ];
            blocks.push(Sequential::new(layers));
            cur = w;
        }
        let mut ext = Self { blocks };
        // freeze everything
        ext.visit_params(&mut |p| p.trainable = false);
        ext
    }

    pub fn forward_taps(&mut self, x: &Array4<f64>) -> Vec<Array4<f64>> {
        let mut taps = Vec::with_capacity(PERCEPTUAL_TAPS);
        let mut cur = x.clone();
        for b in &mut self.blocks {
            cur = b.forward(&cur, false);
            taps.push(cur.clone());
        }
        taps
    }

    /// Backward from tap gradients to the input image. Uses the caches of
    /// the most recent `forward_taps` call.
    pub fn backward_taps(&mut self, d_taps: &[Option<Array4<f64>>]) -> Array4<f64> {
        assert_eq!(d_taps.len(), PERCEPTUAL_TAPS);
        let mut g: Option<Array4<f64>> = None;
        for i in (0..PERCEPTUAL_TAPS).rev() {
            let gi = match (g.take(), &d_taps[i]) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b.clone(),
                (None, None) => continue,
            };
            g = Some(self.blocks[i].backward(&gi));
        }
        g.expect("extractor backward with no gradient source")
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }
}
