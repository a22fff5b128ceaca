//! Central-finite-difference verification of analytic parameter gradients.

use super::Param;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Anything whose loss can be recomputed and whose parameters can be
/// visited. `loss_with_grads` must zero old gradients, run forward and
/// backward, and leave fresh gradients in the parameters; `loss` is a pure
/// forward evaluation of the same deterministic objective.
pub trait GradCheckTarget {
    fn loss_with_grads(&mut self) -> f64;
    fn loss(&mut self) -> f64;
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_coordinate: String,
}

impl GradCheckResult {
    pub fn passes(&self, min_checked: usize, tol: f64) -> bool {
        self.checked >= min_checked && self.max_rel_err <= tol
    }
}

/// Compare analytic gradients against central differences at randomly
/// sampled trainable coordinates.
///
/// Coordinates where both the analytic and numeric gradients are below
/// `1e-6` carry no signal against finite-difference noise and are skipped;
/// sampling continues until `samples` informative coordinates have been
/// checked (or candidates run out).
pub fn check_gradients(
    target: &mut dyn GradCheckTarget,
    samples: usize,
    eps: f64,
    seed: u64,
) -> GradCheckResult {
    let base = target.loss_with_grads();
    assert!(base.is_finite(), "loss must be finite, got {base}");

    // Snapshot the analytic gradients and the coordinate space.
    let mut names: Vec<(String, usize)> = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    target.visit_params(&mut |p| {
        if p.trainable {
            names.push((p.name.clone(), p.value.len()));
            grads.push(p.grad.iter().cloned().collect());
        }
    });
    let total: usize = names.iter().map(|(_, n)| n).sum();
    assert!(total > 0, "no trainable parameters to check");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = GradCheckResult {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst_coordinate: String::new(),
    };
    let mut tried = std::collections::HashSet::new();
    let budget = (samples * 40).min(total.max(samples));

    while result.checked < samples && tried.len() < budget {
        let flat = rng.gen_range(0..total);
        if !tried.insert(flat) {
            continue;
        }
        // Locate (param, coordinate).
        let mut rem = flat;
        let mut pi = 0;
        while rem >= names[pi].1 {
            rem -= names[pi].1;
            pi += 1;
        }
        let coord = rem;
        let analytic = grads[pi][coord];

        let perturb = |target: &mut dyn GradCheckTarget, delta: f64| {
            let mut hit = 0usize;
            target.visit_params(&mut |p| {
                if p.trainable && p.name == names[pi].0 {
                    *p.value.iter_mut().nth(coord).unwrap() += delta;
                    hit += 1;
                }
            });
            assert_eq!(hit, 1, "parameter name {} not unique", names[pi].0);
        };

        perturb(target, eps);
        let lp = target.loss();
        perturb(target, -2.0 * eps);
        let lm = target.loss();
        perturb(target, eps);

        let fd = (lp - lm) / (2.0 * eps);
        let scale = analytic.abs().max(fd.abs());
        if scale < 1e-6 {
            result.skipped += 1;
            continue;
        }
        let rel = (analytic - fd).abs() / scale;
        if rel > result.max_rel_err {
            result.max_rel_err = rel;
            result.worst_coordinate = format!(
                "{}[{coord}] analytic={analytic:.6e} fd={fd:.6e}",
                names[pi].0
            );
        }
        result.checked += 1;
    }
    result
}
