//! Shared loss math: mean-L1, adversarial objectives, pixel-wise softmax
//! cross-entropy. Every function returns both the scalar and whatever
//! gradient its callers need, so stages stay free of duplicated backward
//! formulas.

use super::dims4;
use ndarray::{Array3, Array4};

/// Mean absolute difference over all elements.
pub fn l1_mean(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Sign with the L1 subgradient convention `sign(0) = 0`
/// (`f64::signum(0.0)` is 1, which would push exactly-equal pixels apart).
#[inline]
pub fn sign0(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

/// Gradient of `scale * l1_mean(a, b)` with respect to `a`.
pub fn l1_mean_grad(a: &Array4<f64>, b: &Array4<f64>, scale: f64) -> Array4<f64> {
    let n = a.len() as f64;
    let mut g = Array4::zeros(a.raw_dim());
    for ((ga, x), y) in g.iter_mut().zip(a.iter()).zip(b.iter()) {
        *ga = scale * sign0(x - y) / n;
    }
    g
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adversarial objective form. Least-squares is the default (the
/// discriminator architecture follows pix2pixHD, which trains with it);
/// the logistic form is the non-saturating variant of the original
/// minimax objective and stays available behind configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanForm {
    LeastSquares,
    NonSaturatingLog,
}

impl GanForm {
    /// Generator-side adversarial loss over per-scale patch logits,
    /// averaged across scales. Returns the loss and the gradient per
    /// patch map. Both forms are bounded below by zero.
    pub fn generator_loss(&self, fake_patches: &[Array4<f64>]) -> (f64, Vec<Array4<f64>>) {
        let s = fake_patches.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(fake_patches.len());
        for p in fake_patches {
            let n = p.len() as f64;
            let mut g = Array4::zeros(p.raw_dim());
            let mut acc = 0.0;
            for (gv, &v) in g.iter_mut().zip(p.iter()) {
                match self {
                    GanForm::LeastSquares => {
                        acc += (v - 1.0) * (v - 1.0);
                        *gv = 2.0 * (v - 1.0) / (n * s);
                    }
                    GanForm::NonSaturatingLog => {
                        acc += softplus(-v);
                        *gv = -sigmoid(-v) / (n * s);
                    }
                }
            }
            total += acc / n;
            grads.push(g);
        }
        (total / s, grads)
    }

    /// Discriminator loss (real -> 1, fake -> 0), averaged across scales.
    /// Returns the loss and the gradients per real/fake patch map.
    #[allow(clippy::type_complexity)]
    pub fn discriminator_loss(
        &self,
        real_patches: &[Array4<f64>],
        fake_patches: &[Array4<f64>],
    ) -> (f64, Vec<Array4<f64>>, Vec<Array4<f64>>) {
        assert_eq!(real_patches.len(), fake_patches.len());
        let s = real_patches.len() as f64;
        let mut total = 0.0;
        let mut d_real = Vec::new();
        let mut d_fake = Vec::new();
        for (r, f) in real_patches.iter().zip(fake_patches.iter()) {
            let nr = r.len() as f64;
            let nf = f.len() as f64;
            let mut gr = Array4::zeros(r.raw_dim());
            let mut gf = Array4::zeros(f.raw_dim());
            let mut acc = 0.0;
            match self {
                GanForm::LeastSquares => {
                    for (gv, &v) in gr.iter_mut().zip(r.iter()) {
                        acc += 0.5 * (v - 1.0) * (v - 1.0) / nr;
                        *gv = (v - 1.0) / (nr * s);
                    }
                    for (gv, &v) in gf.iter_mut().zip(f.iter()) {
                        acc += 0.5 * v * v / nf;
                        *gv = v / (nf * s);
                    }
                }
                GanForm::NonSaturatingLog => {
                    for (gv, &v) in gr.iter_mut().zip(r.iter()) {
                        acc += softplus(-v) / nr;
                        *gv = -sigmoid(-v) / (nr * s);
                    }
                    for (gv, &v) in gf.iter_mut().zip(f.iter()) {
                        acc += softplus(v) / nf;
                        *gv = sigmoid(v) / (nf * s);
                    }
                }
            }
            total += acc;
            d_real.push(gr);
            d_fake.push(gf);
        }
        (total / s, d_real, d_fake)
    }
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = dims4(logits);
    let mut out = Array4::zeros(logits.raw_dim());
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut maxv = f64::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(logits[[bn, ch, y, x]]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    z += (logits[[bn, ch, y, x]] - maxv).exp();
                }
                for ch in 0..c {
                    out[[bn, ch, y, x]] = (logits[[bn, ch, y, x]] - maxv).exp() / z;
                }
            }
        }
    }
    out
}

/// Mean per-pixel cross-entropy between channel logits and integer labels.
/// Returns the loss and its gradient with respect to the logits
/// (`(softmax - onehot) / num_pixels`).
pub fn softmax_cross_entropy(
    logits: &Array4<f64>,
    labels: &Array3<u8>,
) -> (f64, Array4<f64>) {
    let (n, c, h, w) = dims4(logits);
    assert_eq!(labels.shape(), &[n, h, w]);
    let probs = softmax_channels(logits);
    let m = (n * h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros(logits.raw_dim());
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let lbl = labels[[bn, y, x]] as usize;
                debug_assert!(lbl < c);
                loss -= probs[[bn, lbl, y, x]].max(1e-300).ln();
                for ch in 0..c {
                    let onehot = if ch == lbl { 1.0 } else { 0.0 };
                    grad[[bn, ch, y, x]] = (probs[[bn, ch, y, x]] - onehot) / m;
                }
            }
        }
    }
    (loss / m, grad)
}

/// Gradient of the per-pixel softmax given the gradient of its output.
pub fn softmax_backward(probs: &Array4<f64>, grad_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = dims4(probs);
    let mut grad = Array4::zeros(probs.raw_dim());
    for bn in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += grad_out[[bn, ch, y, x]] * probs[[bn, ch, y, x]];
                }
                for ch in 0..c {
                    grad[[bn, ch, y, x]] =
                        probs[[bn, ch, y, x]] * (grad_out[[bn, ch, y, x]] - dot);
                }
            }
        }
    }
    grad
}
