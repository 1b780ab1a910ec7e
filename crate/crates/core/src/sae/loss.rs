// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, losses and hand-written backward pass.
//!
//! Generic over the float type so training runs in `f32` while gradient
//! checks run the identical code in `f64`.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat, Zip};

use super::Variant;

/// Exponent cap on the ghost path; beyond it the gradient is treated as zero.
const GHOST_EXP_CAP: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T> {
    /// `[d_model, d_sae]`
    pub w_enc: Array2<T>,
    /// `[d_sae]`
    pub b_enc: Array1<T>,
    /// `[d_sae, d_model]`
    pub w_dec: Array2<T>,
    /// `[d_model]`, subtracted before encoding and added after decoding.
    pub b_dec: Array1<T>,
}

impl<T: NdFloat> SaeParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            w_enc: Array2::zeros(self.w_enc.raw_dim()),
            b_enc: Array1::zeros(self.b_enc.raw_dim()),
            w_dec: Array2::zeros(self.w_dec.raw_dim()),
            b_dec: Array1::zeros(self.b_dec.raw_dim()),
        }
    }

    pub fn cast<U: NdFloat>(&self) -> SaeParams<U> {
        let c = |v: &T| U::from(*v).expect("float cast");
        SaeParams {
            w_enc: self.w_enc.map(c),
            b_enc: self.b_enc.map(c),
            w_dec: self.w_dec.map(c),
            b_dec: self.b_dec.map(c),
        }
        .standard_layout()
    }

    /// Same values, every array in row-major layout.
    pub fn standard_layout(self) -> Self {
        Self {
            w_enc: self.w_enc.as_standard_layout().into_owned(),
            b_enc: self.b_enc.as_standard_layout().into_owned(),
            w_dec: self.w_dec.as_standard_layout().into_owned(),
            b_dec: self.b_dec.as_standard_layout().into_owned(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w_enc.len() + self.b_enc.len() + self.w_dec.len() + self.b_dec.len()
    }

    /// Flat mutable access in the order W_enc, b_enc, W_dec, b_dec.
    pub fn flat_mut(&mut self, i: usize) -> &mut T {
        let mut i = i;
        for slice in [
            self.w_enc.as_slice_mut(),
            self.b_enc.as_slice_mut(),
            self.w_dec.as_slice_mut(),
            self.b_dec.as_slice_mut(),
        ] {
            let slice = slice.expect("standard layout");
            if i < slice.len() {
                return &mut slice[i];
            }
            i -= slice.len();
        }
        panic!("parameter index out of range");
    }

    pub fn flat(&self, i: usize) -> T {
        let mut i = i;
        for slice in [
            self.w_enc.as_slice(),
            self.b_enc.as_slice(),
            self.w_dec.as_slice(),
            self.b_dec.as_slice(),
        ] {
            let slice = slice.expect("standard layout");
            if i < slice.len() {
                return slice[i];
            }
            i -= slice.len();
        }
        panic!("parameter index out of range");
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub xc: Array2<T>,
    pub pre: Array2<T>,
    pub f: Array2<T>,
    pub x_hat: Array2<T>,
}

/// Zeroes all but the `k` largest positive entries of `row`, lower index
/// winning ties.
pub(crate) fn topk_mask_row<T: NdFloat>(row: &mut [T], k: usize) {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i] > T::zero()).collect();
    if idx.len() > k {
        let order = |a: &usize, b: &usize| {
            row[*b]
                .partial_cmp(&row[*a])
                .expect("finite pre-activations")
                .then(a.cmp(b))
        };
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    let mut keep = vec![false; row.len()];
    for i in idx {
        keep[i] = true;
    }
    for (v, k) in row.iter_mut().zip(keep) {
        if !k {
            *v = T::zero();
        }
    }
}

pub fn activate<T: NdFloat>(pre: &Array2<T>, variant: &Variant) -> Array2<T> {
    match *variant {
        Variant::Vanilla { .. } => pre.mapv(|v| if v > T::zero() { v } else { T::zero() }),
        Variant::TopK { k } => {
            let mut f = pre.as_standard_layout().into_owned();
            for mut row in f.outer_iter_mut() {
                topk_mask_row(row.as_slice_mut().expect("contiguous row"), k);
            }
            f
        }
    }
}

pub fn forward<T: NdFloat>(p: &SaeParams<T>, variant: &Variant, x: ArrayView2<'_, T>) -> ForwardPass<T> {
    let xc = &x - &p.b_dec;
    let pre = xc.dot(&p.w_enc) + &p.b_enc;
    let f = activate(&pre, variant);
    let x_hat = f.dot(&p.w_dec) + &p.b_dec;
    ForwardPass { xc, pre, f, x_hat }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
    pub ghost: f64,
}

/// Scale factors of the ghost term, treated as constants by the gradient.
#[derive(Debug, Clone)]
pub struct GhostScales<T> {
    /// Per-row rescaling of the ghost reconstruction.
    pub alpha: Array1<T>,
    /// Rescaling that makes the ghost term match the MSE.
    pub rho: T,
}

fn to_f64<T: NdFloat>(v: T) -> f64 {
    v.to_f64().expect("float")
}

/// Mean over the batch of squared row norms of `x − x̂`.
pub fn mse<T: NdFloat>(x: ArrayView2<'_, T>, x_hat: &Array2<T>) -> f64 {
    let b = x.nrows().max(1) as f64;
    let mut acc = 0.0;
    Zip::from(x).and(x_hat).for_each(|&a, &h| {
        let d = to_f64(a - h);
        acc += d * d;
    });
    acc / b
}

/// Loss terms only, no gradients.
pub fn loss<T: NdFloat>(
    x: ArrayView2<'_, T>,
    x_hat: &Array2<T>,
    f: &Array2<T>,
    variant: &Variant,
) -> LossParts {
    let mse = mse(x, x_hat);
    let l1 = match variant {
        Variant::Vanilla { l1_coeff } => {
            let b = x.nrows().max(1) as f64;
            *l1_coeff as f64 * f.iter().map(|v| to_f64(v.abs())).sum::<f64>() / b
        }
        Variant::TopK { .. } => 0.0,
    };
    LossParts {
        total: mse + l1,
        mse,
        l1,
        ghost: 0.0,
    }
}

/// Total loss and its gradient with respect to every parameter.
///
/// `dead` marks features that receive the ghost-grads auxiliary term. When
/// `frozen` is given, the ghost scale factors are taken from it instead of
/// being recomputed, which makes the ghost term a smooth function of the
/// parameters for finite-difference checks.
pub fn loss_and_grads<T: NdFloat>(
    p: &SaeParams<T>,
    variant: &Variant,
    x: ArrayView2<'_, T>,
    dead: Option<&[bool]>,
    frozen: Option<&GhostScales<T>>,
) -> (LossParts, SaeParams<T>, ForwardPass<T>) {
    let fwd = forward(p, variant, x);
    let mut parts = loss(x, &fwd.x_hat, &fwd.f, variant);
    let b = T::from(x.nrows().max(1)).unwrap();
    let two = T::from(2.0).unwrap();

    // d mse / d x̂
    let dx_hat = (&fwd.x_hat - &x) * (two / b);
    let mut g = p.zeros_like();
    g.w_dec = fwd.f.t().dot(&dx_hat);
    g.b_dec = dx_hat.sum_axis(Axis(0));

    let mut df = dx_hat.dot(&p.w_dec.t());
    if let Variant::Vanilla { l1_coeff } = *variant {
        let c = T::from(l1_coeff).unwrap() / b;
        Zip::from(&mut df).and(&fwd.f).for_each(|d, &fv| {
            if fv > T::zero() {
                *d += c;
            }
        });
    }
    // Both activations pass gradient exactly where the output is positive.
    Zip::from(&mut df).and(&fwd.f).for_each(|d, &fv| {
        if fv <= T::zero() {
            *d = T::zero();
        }
    });
    let dpre = df;
    g.w_enc = fwd.xc.t().dot(&dpre);
    g.b_enc = dpre.sum_axis(Axis(0));
    let dxc = dpre.dot(&p.w_enc.t());
    g.b_dec = &g.b_dec - &dxc.sum_axis(Axis(0));

    if let Some(dead) = dead {
        let dead_idx: Vec<usize> = dead
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| d.then_some(i))
            .collect();
        if !dead_idx.is_empty() && parts.mse > 0.0 {
            parts.ghost = ghost_term(p, &fwd, x, &dead_idx, parts.mse, frozen, &mut g);
        }
    }
    parts.total = parts.mse + parts.l1 + parts.ghost;
    (parts, g, fwd)
}

/// Ghost-grads auxiliary term: dead features try to reconstruct the current
/// residual through an exponential activation; the result is rescaled to the
/// magnitude of the MSE. Adds its gradient into `g` (dead features only).
fn ghost_term<T: NdFloat>(
    p: &SaeParams<T>,
    fwd: &ForwardPass<T>,
    x: ArrayView2<'_, T>,
    dead_idx: &[usize],
    mse: f64,
    frozen: Option<&GhostScales<T>>,
    g: &mut SaeParams<T>,
) -> f64 {
    let bt = T::from(x.nrows().max(1)).unwrap();
    let resid = &x - &fwd.x_hat;
    let (ghost_out, e, capped) = ghost_out(p, &fwd.pre, dead_idx);
    let w_dead = p.w_dec.select(Axis(0), dead_idx);

    let scales = match frozen {
        Some(s) => s.clone(),
        None => compute_scales(&ghost_out, &resid, mse),
    };
    let alpha_col = scales.alpha.view().insert_axis(Axis(1));
    let scaled = &ghost_out * &alpha_col;
    let raw = self::mse(resid.view(), &scaled);

    // d ghost / d ghost_out
    let dg = (&scaled - &resid) * (T::from(2.0).unwrap() * scales.rho / bt) * &alpha_col;
    let dw_dead = e.t().dot(&dg);
    let mut dpre = dg.dot(&w_dead.t()) * &e;
    Zip::from(&mut dpre).and(&capped).for_each(|d, &c| {
        if c {
            *d = T::zero();
        }
    });
    let dw_enc = fwd.xc.t().dot(&dpre);
    let db_enc = dpre.sum_axis(Axis(0));
    for (col, &j) in dead_idx.iter().enumerate() {
        let mut row = g.w_dec.row_mut(j);
        row += &dw_dead.row(col);
        let mut c = g.w_enc.column_mut(j);
        c += &dw_enc.column(col);
        g.b_enc[j] += db_enc[col];
    }
    to_f64(scales.rho) * raw
}

fn compute_scales<T: NdFloat>(ghost_out: &Array2<T>, resid: &Array2<T>, mse: f64) -> GhostScales<T> {
    let eps = T::from(1e-6).unwrap();
    let two = T::from(2.0).unwrap();
    let alpha = Array1::from_iter(
        ghost_out
            .outer_iter()
            .zip(resid.outer_iter())
            .map(|(go, r)| r.dot(&r).sqrt() / (two * go.dot(&go).sqrt() + eps)),
    );
    let scaled = ghost_out * &alpha.view().insert_axis(Axis(1));
    let raw = self::mse(resid.view(), &scaled);
    GhostScales {
        alpha,
        rho: T::from(mse / (raw + 1e-6)).unwrap(),
    }
}

fn ghost_out<T: NdFloat>(p: &SaeParams<T>, pre: &Array2<T>, dead_idx: &[usize]) -> (Array2<T>, Array2<T>, Array2<bool>) {
    let cap = T::from(GHOST_EXP_CAP).unwrap();
    let pre_dead = pre.select(Axis(1), dead_idx);
    let capped = pre_dead.mapv(|v| v > cap);
    let e = pre_dead.mapv(|v| if v > cap { cap.exp() } else { v.exp() });
    let out = e.dot(&p.w_dec.select(Axis(0), dead_idx));
    (out, e, capped)
}

/// Recomputes the ghost scale factors at `p` so they can be frozen.
pub fn ghost_scales<T: NdFloat>(
    p: &SaeParams<T>,
    variant: &Variant,
    x: ArrayView2<'_, T>,
    dead: &[bool],
) -> Option<GhostScales<T>> {
    let fwd = forward(p, variant, x);
    let dead_idx: Vec<usize> = dead
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| d.then_some(i))
        .collect();
    let m = mse(x, &fwd.x_hat);
    if dead_idx.is_empty() || m <= 0.0 {
        return None;
    }
    let resid = &x - &fwd.x_hat;
    let (out, _, _) = ghost_out(p, &fwd.pre, &dead_idx);
    Some(compute_scales(&out, &resid, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::init_sae;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_reconstruction_zero_loss() {
        let sae = crate::sae::SaeModel::from_dictionary(&Array::eye(3), Variant::Vanilla { l1_coeff: 0.5 })
            .unwrap();
        let x = Array2::<f32>::zeros((4, 3));
        let (parts, g, _) = loss_and_grads(&sae.params, &sae.variant, x.view(), None, None);
        assert_eq!(parts.total, 0.0);
        assert!(g.w_dec.iter().chain(g.w_enc.iter()).all(|&v| v == 0.0));
        assert!(g.b_dec.iter().chain(g.b_enc.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_l1_is_pure_mse() {
        let sae = init_sae(6, 2, Variant::Vanilla { l1_coeff: 0.0 }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((7, 6), |_| rng.random_range(-1.0f32..1.0));
        let fwd = forward(&sae.params, &sae.variant, x.view());
        let parts = loss(x.view(), &fwd.x_hat, &fwd.f, &sae.variant);
        assert_eq!(parts.l1, 0.0);
        assert_eq!(parts.total, parts.mse);
        assert!(parts.mse > 0.0);
    }

    #[test]
    fn ghost_term_matches_mse_and_touches_only_dead() {
        let sae = init_sae(6, 3, Variant::Vanilla { l1_coeff: 1e-3 }, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((9, 6), |_| rng.random_range(-1.0f64..1.0));
        let p = sae.params.cast::<f64>();
        let dead: Vec<bool> = (0..18).map(|j| j % 4 == 1).collect();
        let (with, g_with, _) = loss_and_grads(&p, &sae.variant, x.view(), Some(&dead), None);
        let (without, g_without, _) = loss_and_grads(&p, &sae.variant, x.view(), None, None);
        assert!((with.ghost - with.mse).abs() < 1e-3 * with.mse);
        assert_eq!(with.mse, without.mse);
        for j in 0..18 {
            let changed = g_with.w_dec.row(j) != g_without.w_dec.row(j)
                || g_with.w_enc.column(j) != g_without.w_enc.column(j)
                || g_with.b_enc[j] != g_without.b_enc[j];
            if !dead[j] {
                assert!(!changed, "live feature {j} received ghost gradient");
            }
        }
        assert_eq!(g_with.b_dec, g_without.b_dec);
    }

    #[test]
    fn ghost_gradient_matches_finite_differences_with_frozen_scales() {
        // Dead features are held inactive, so perturbing their parameters
        // changes only the ghost term and the comparison is exact.
        let sae = init_sae(5, 2, Variant::Vanilla { l1_coeff: 1e-2 }, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0f64..1.0));
        let mut p = sae.params.cast::<f64>();
        let dead: Vec<bool> = (0..10).map(|j| j % 3 == 0).collect();
        for (j, v) in p.b_enc.iter_mut().enumerate() {
            *v = if dead[j] { -4.0 } else { rng.random_range(-0.3..0.3) };
        }
        let scales = ghost_scales(&p, &sae.variant, x.view(), &dead).unwrap();
        let (_, g, fwd) = loss_and_grads(&p, &sae.variant, x.view(), Some(&dead), Some(&scales));
        for (j, col) in fwd.f.axis_iter(Axis(1)).enumerate() {
            if dead[j] {
                assert!(col.iter().all(|&v| v == 0.0));
            }
        }
        let (d_model, d_sae) = p.w_enc.dim();
        let mut dead_params = Vec::new();
        for j in (0..d_sae).filter(|&j| dead[j]) {
            dead_params.extend((0..d_model).map(|i| i * d_sae + j));
            dead_params.push(d_model * d_sae + j);
            let dec0 = d_model * d_sae + d_sae + j * d_model;
            dead_params.extend(dec0..dec0 + d_model);
        }
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in dead_params {
            let orig = p.flat(i);
            *p.flat_mut(i) = orig + eps;
            let up = loss_and_grads(&p, &sae.variant, x.view(), Some(&dead), Some(&scales)).0.total;
            *p.flat_mut(i) = orig - eps;
            let down = loss_and_grads(&p, &sae.variant, x.view(), Some(&dead), Some(&scales)).0.total;
            *p.flat_mut(i) = orig;
            let num = (up - down) / (2.0 * eps);
            let ana = g.flat(i);
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
