// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam and the warmup + cosine-annealing learning-rate schedule.

use ndarray::{ArrayViewMut, Dimension, Zip};

use super::loss::SaeParams;

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`. Steps are counted from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f32,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f32 {
        if step <= self.warmup {
            return self.peak * step as f32 / self.warmup.max(1) as f32;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        (self.peak as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: SaeParams<f32>,
    v: SaeParams<f32>,
}

impl Adam {
    pub fn new(like: &SaeParams<f32>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut SaeParams<f32>, grads: &SaeParams<f32>, lr: f32) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let h = Hyper {
            b1: self.beta1,
            b2: self.beta2,
            eps: self.eps,
            lr,
            c1,
            c2,
        };
        update(&h, params.w_enc.view_mut(), grads.w_enc.view(), self.m.w_enc.view_mut(), self.v.w_enc.view_mut());
        update(&h, params.b_enc.view_mut(), grads.b_enc.view(), self.m.b_enc.view_mut(), self.v.b_enc.view_mut());
        update(&h, params.w_dec.view_mut(), grads.w_dec.view(), self.m.w_dec.view_mut(), self.v.w_dec.view_mut());
        update(&h, params.b_dec.view_mut(), grads.b_dec.view(), self.m.b_dec.view_mut(), self.v.b_dec.view_mut());
    }
}

struct Hyper {
    b1: f32,
    b2: f32,
    eps: f32,
    lr: f32,
    c1: f32,
    c2: f32,
}

fn update<D: Dimension>(
    h: &Hyper,
    p: ArrayViewMut<'_, f32, D>,
    g: ndarray::ArrayView<'_, f32, D>,
    m: ArrayViewMut<'_, f32, D>,
    v: ArrayViewMut<'_, f32, D>,
) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = h.b1 * *m + (1.0 - h.b1) * g;
        *v = h.b2 * *v + (1.0 - h.b2) * g * g;
        let m_hat = *m / h.c1;
        let v_hat = *v / h.c2;
        *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};

    #[test]
    fn schedule_peaks_after_warmup_and_decays_to_zero() {
        let s = LrSchedule {
            peak: 1e-3,
            warmup: 200,
            total: 2000,
        };
        assert_eq!(s.at(200), 1e-3);
        assert!(s.at(100) < s.at(200));
        assert!(s.at(2000).abs() < 1e-9);
        assert!(s.at(1100) > s.at(1500));
        for t in 201..2000 {
            assert!(s.at(t + 1) <= s.at(t));
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = SaeParams {
            w_enc: Array2::<f32>::zeros((1, 2)),
            b_enc: Array1::zeros(2),
            w_dec: Array2::zeros((2, 1)),
            b_dec: array![1.0f32],
        };
        let mut g = p.zeros_like();
        g.b_dec = array![0.3f32];
        g.w_enc = array![[-2.0f32, 0.0]];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.01);
        assert!((p.b_dec[0] - 0.99).abs() < 1e-6);
        assert!((p.w_enc[[0, 0]] - 0.01).abs() < 1e-6);
        assert_eq!(p.w_enc[[0, 1]], 0.0);
    }
}
