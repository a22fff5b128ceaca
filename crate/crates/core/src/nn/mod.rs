//! Minimal f64 neural-network engine with explicit layer-level backprop.
//!
//! Everything runs in double precision with deterministic, single-threaded
//! kernels so that finite-difference gradient checks hold tightly and a
//! fixed seed reproduces training bit-for-bit. Convolutions lower to
//! im2col + GEMM through `ndarray::dot`.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod models;

pub use adam::Adam;
pub use checkpoint::Checkpoint;

use ndarray::{Array4, ArrayD};

/// A named parameter block with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    /// Non-trainable blocks (normalization statistics, frozen towers) are
    /// checkpointed but skipped by the optimizer.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// One differentiable stage of a network.
///
/// `forward` caches whatever `backward` needs; `backward` consumes the
/// output gradient, accumulates parameter gradients, and returns the input
/// gradient. Calls must pair up (one backward per forward).
pub trait Layer {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64>;
    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64>;
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

/// Straight-line composition of layers.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Self { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }
}

/// Zero every gradient reachable from `visit`.
pub fn zero_grads(mut visit: impl FnMut(&mut dyn FnMut(&mut Param))) {
    visit(&mut |p: &mut Param| p.zero_grad());
}

/// Collect `(name, shape)` pairs for debugging and tests.
pub fn param_inventory(mut visit: impl FnMut(&mut dyn FnMut(&mut Param))) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    visit(&mut |p: &mut Param| out.push((p.name.clone(), p.value.shape().to_vec())));
    out
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
pub fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, oh, ow));
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[[bn, ch, y, xx]] = 0.25
                        * (x[[bn, ch, 2 * y, 2 * xx]]
                            + x[[bn, ch, 2 * y, 2 * xx + 1]]
                            + x[[bn, ch, 2 * y + 1, 2 * xx]]
                            + x[[bn, ch, 2 * y + 1, 2 * xx + 1]]);
                }
            }
        }
    }
    out
}

/// Gradient of [`avg_pool2`] with respect to its input.
pub fn avg_pool2_backward(grad_out: &Array4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (n, c, oh, ow) = dims4(grad_out);
    let mut out = Array4::zeros((n, c, in_h, in_w));
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = 0.25 * grad_out[[bn, ch, y, xx]];
                    out[[bn, ch, 2 * y, 2 * xx]] += g;
                    out[[bn, ch, 2 * y, 2 * xx + 1]] += g;
                    out[[bn, ch, 2 * y + 1, 2 * xx]] += g;
                    out[[bn, ch, 2 * y + 1, 2 * xx + 1]] += g;
                }
            }
        }
    }
    out
}

#[inline]
pub fn dims4(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Stack per-sample `(C, H, W)` maps into a batch.
pub fn stack_batch(samples: &[ndarray::Array3<f64>]) -> Array4<f64> {
    assert!(!samples.is_empty());
    let s = samples[0].shape();
    let mut out = Array4::zeros((samples.len(), s[0], s[1], s[2]));
    for (i, sample) in samples.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(sample);
    }
    out
}

/// Concatenate batches along the channel axis.
pub fn concat_channels(parts: &[&Array4<f64>]) -> Array4<f64> {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).expect("channel concat shape mismatch")
}

/// Concatenate two batches along the sample axis.
pub fn concat_samples(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .expect("sample concat shape mismatch")
}
