// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference check of the analytic SAE gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{forward, loss_and_grads, SaeParams};
use super::SaeModel;

/// Number of parameters sampled per check.
pub const GRAD_CHECK_SAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameters actually compared.
    pub checked: usize,
    /// Sampled parameters skipped because the TopK support moved under ±eps.
    pub skipped_unstable: usize,
}

fn support(p: &SaeParams<f64>, sae: &SaeModel, x: &Array2<f64>) -> Vec<bool> {
    forward(p, &sae.variant, x.view())
        .f
        .iter()
        .map(|&v| v > 0.0)
        .collect()
}

/// Compares analytic gradients of the total loss against central finite
/// differences at up to 50 randomly chosen parameters, in `f64`.
///
/// A parameter is skipped if either perturbation changes which features are
/// active, since the loss is not differentiable across that boundary.
pub fn grad_check(sae: &SaeModel, x: &Array2<f32>, epsilon: f64, seed: u64) -> GradCheck {
    let mut p = sae.params.cast::<f64>();
    let x = x.mapv(f64::from);
    let (_, grads, _) = loss_and_grads(&p, &sae.variant, x.view(), None, None);
    let base_support = support(&p, sae, &x);
    let n = p.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, n, GRAD_CHECK_SAMPLES.min(n));

    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_unstable: 0,
    };
    for i in picks {
        let orig = p.flat(i);
        *p.flat_mut(i) = orig + epsilon;
        let up_support = support(&p, sae, &x);
        let up = loss_and_grads(&p, &sae.variant, x.view(), None, None).0.total;
        *p.flat_mut(i) = orig - epsilon;
        let down_support = support(&p, sae, &x);
        let down = loss_and_grads(&p, &sae.variant, x.view(), None, None).0.total;
        *p.flat_mut(i) = orig;
        if up_support != base_support || down_support != base_support {
            out.skipped_unstable += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grads.flat(i);
        let scale = numeric.abs().max(analytic.abs());
        let rel = if scale < 1e-10 {
            0.0
        } else {
            (numeric - analytic).abs() / scale
        };
        out.max_rel_error = out.max_rel_error.max(rel);
        out.checked += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{init_sae, Variant};
    use rand::Rng;

    fn randomized(variant: Variant, seed: u64) -> (SaeModel, Array2<f32>) {
        let mut sae = init_sae(8, 2, variant, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        sae.params.b_enc.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        sae.params.b_dec.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        let x = Array2::from_shape_fn((12, 8), |_| rng.random_range(-1.0f32..1.0));
        (sae, x)
    }

    #[test]
    fn vanilla_gradients_agree() {
        let (sae, x) = randomized(Variant::Vanilla { l1_coeff: 0.05 }, 1);
        let r = grad_check(&sae, &x, 1e-3, 0);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked >= 45);
    }

    #[test]
    fn topk_gradients_agree_on_stable_support() {
        let (sae, x) = randomized(Variant::TopK { k: 3 }, 2);
        let r = grad_check(&sae, &x, 1e-3, 0);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > 0);
    }

    #[test]
    fn exact_fit_has_vanishing_mse_gradient() {
        let sae = SaeModel::from_dictionary(&Array2::eye(4), Variant::TopK { k: 4 }).unwrap();
        let x = Array2::<f32>::zeros((3, 4));
        let p = sae.params.cast::<f64>();
        let (parts, g, _) = loss_and_grads(&p, &sae.variant, x.mapv(f64::from).view(), None, None);
        assert_eq!(parts.mse, 0.0);
        for i in 0..p.n_params() {
            assert_eq!(g.flat(i), 0.0);
        }
    }
}
