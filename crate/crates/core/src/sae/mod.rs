// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder model, losses, optimizer and training loop.
//!
//! ```text
//! encode:  f = act((x - b_dec) · W_enc + b_enc)      act = ReLU | TopK
//! decode:  x̂ = f · W_dec + b_dec                      rows of W_dec unit-norm
//! ```

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod train;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation_store::check_finite;
use crate::error::{Error, Result};

pub use loss::SaeParams;
pub use train::{train, StepRecord, TrainConfig, TrainLog};

/// Sparsity mechanism of an SAE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// ReLU encoder with an L1 penalty on activations.
    Vanilla { l1_coeff: f32 },
    /// Keep the `k` largest positive pre-activations per token.
    TopK { k: usize },
}

impl Variant {
    pub fn l1_coeff(&self) -> f32 {
        match *self {
            Self::Vanilla { l1_coeff } => l1_coeff,
            Self::TopK { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub params: SaeParams<f32>,
    pub variant: Variant,
}

impl SaeModel {
    /// Wraps explicit parameters, checking shapes against each other.
    pub fn from_params(params: SaeParams<f32>, variant: Variant) -> Result<Self> {
        let params = params.standard_layout();
        let (d_model, d_sae) = params.w_enc.dim();
        if params.w_dec.dim() != (d_sae, d_model)
            || params.b_enc.len() != d_sae
            || params.b_dec.len() != d_model
        {
            return Err(Error::shape(format!(
                "inconsistent SAE parameter shapes: W_enc {:?}, b_enc {}, W_dec {:?}, b_dec {}",
                params.w_enc.dim(),
                params.b_enc.len(),
                params.w_dec.dim(),
                params.b_dec.len()
            )));
        }
        if let Variant::TopK { k } = variant {
            if k == 0 {
                return Err(Error::invalid("TopK k must be positive"));
            }
        }
        Ok(Self { params, variant })
    }

    /// A dictionary whose decoder rows are `dictionary`'s rows (normalised)
    /// and whose encoder is their transpose.
    pub fn from_dictionary(dictionary: &Array2<f32>, variant: Variant) -> Result<Self> {
        let mut w_dec = dictionary.clone();
        normalize_rows(&mut w_dec);
        let (d_sae, d_model) = w_dec.dim();
        Self::from_params(
            SaeParams {
                w_enc: w_dec.t().to_owned(),
                b_enc: Array1::zeros(d_sae),
                w_dec,
                b_dec: Array1::zeros(d_model),
            },
            variant,
        )
    }

    pub fn d_model(&self) -> usize {
        self.params.w_enc.nrows()
    }

    pub fn d_sae(&self) -> usize {
        self.params.w_enc.ncols()
    }

    pub fn encode(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        self.check_input(x)?;
        Ok(loss::forward(&self.params, &self.variant, x).f)
    }

    pub fn decode(&self, f: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        if f.ncols() != self.d_sae() {
            return Err(Error::shape(format!(
                "feature width {} != d_sae {}",
                f.ncols(),
                self.d_sae()
            )));
        }
        Ok(f.dot(&self.params.w_dec) + &self.params.b_dec)
    }

    fn check_input(&self, x: ArrayView2<'_, f32>) -> Result<()> {
        if x.ncols() != self.d_model() {
            return Err(Error::shape(format!(
                "input width {} != d_model {}",
                x.ncols(),
                self.d_model()
            )));
        }
        check_finite(x.iter().copied())
    }

    /// Largest deviation of a decoder row norm from 1.
    pub fn max_decoder_norm_error(&self) -> f32 {
        self.params
            .w_dec
            .outer_iter()
            .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
            .fold(0.0, f32::max)
    }
}

pub(crate) fn normalize_rows(m: &mut Array2<f32>) {
    for mut row in m.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

/// Seeded initialisation: unit-norm Gaussian decoder rows, encoder = decoder
/// transpose, zero biases.
pub fn init_sae(d_model: usize, expansion_factor: usize, variant: Variant, seed: u64) -> Result<SaeModel> {
    if d_model == 0 || expansion_factor == 0 {
        return Err(Error::invalid("d_model and expansion_factor must be positive"));
    }
    let d_sae = d_model * expansion_factor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_dec = Array2::from_shape_fn((d_sae, d_model), |_| rng.sample::<f32, _>(StandardNormal));
    normalize_rows(&mut w_dec);
    SaeModel::from_params(
        SaeParams {
            w_enc: w_dec.t().to_owned(),
            b_enc: Array1::zeros(d_sae),
            w_dec,
            b_dec: Array1::zeros(d_model),
        },
        variant,
    )
}

/// Anything that maps activations to reconstructions of the same width.
///
/// Evaluation and splicing work against this trait so that the identity and
/// zero maps can stand in for a trained SAE.
pub trait Reconstruct: Sync {
    fn width(&self) -> usize;
    fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>>;
}

impl Reconstruct for SaeModel {
    fn width(&self) -> usize {
        self.d_model()
    }

    fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        self.check_input(x)?;
        Ok(loss::forward(&self.params, &self.variant, x).x_hat)
    }
}

/// `x̂ = x`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap(pub usize);

impl Reconstruct for IdentityMap {
    fn width(&self) -> usize {
        self.0
    }

    fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        Ok(x.to_owned())
    }
}

/// `x̂ = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroMap(pub usize);

impl Reconstruct for ZeroMap {
    fn width(&self) -> usize {
        self.0
    }

    fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        Ok(Array2::zeros(x.raw_dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn identity3(variant: Variant) -> SaeModel {
        SaeModel::from_dictionary(&Array::eye(3), variant).unwrap()
    }

    #[test]
    fn init_has_unit_rows_and_tied_encoder() {
        let sae = init_sae(8, 4, Variant::TopK { k: 3 }, 11).unwrap();
        assert_eq!(sae.d_sae(), 32);
        assert!(sae.max_decoder_norm_error() < 1e-6);
        for i in 0..8 {
            for j in 0..32 {
                assert_eq!(sae.params.w_enc[[i, j]], sae.params.w_dec[[j, i]]);
            }
        }
        assert_eq!(sae, init_sae(8, 4, Variant::TopK { k: 3 }, 11).unwrap());
        assert_ne!(sae, init_sae(8, 4, Variant::TopK { k: 3 }, 12).unwrap());
    }

    #[test]
    fn vanilla_encode_is_relu() {
        let sae = identity3(Variant::Vanilla { l1_coeff: 0.0 });
        let f = sae.encode(array![[1.0f32, -2.0, 3.0]].view()).unwrap();
        assert_eq!(f, array![[1.0f32, 0.0, 3.0]]);
    }

    #[test]
    fn topk_keeps_largest_positive() {
        let sae = SaeModel::from_dictionary(&Array::eye(4), Variant::TopK { k: 2 }).unwrap();
        let f = sae.encode(array![[0.5f32, 0.1, 0.9, 0.2]].view()).unwrap();
        assert_eq!(f, array![[0.5f32, 0.0, 0.9, 0.0]]);
        let f = sae.encode(array![[-0.5f32, 0.3, -0.9, -0.2]].view()).unwrap();
        assert_eq!(f, array![[0.0f32, 0.3, 0.0, 0.0]]);
        // ties go to the lower index
        let f = sae.encode(array![[0.7f32, 0.7, 0.7, 0.1]].view()).unwrap();
        assert_eq!(f, array![[0.7f32, 0.7, 0.0, 0.0]]);
    }

    #[test]
    fn decode_cases() {
        let mut sae = init_sae(4, 2, Variant::TopK { k: 2 }, 3).unwrap();
        sae.params.b_dec = array![0.1f32, -0.2, 0.3, 0.0];
        let zero = Array2::<f32>::zeros((1, 8));
        assert_eq!(sae.decode(zero.view()).unwrap().row(0), sae.params.b_dec);
        let mut one = Array2::<f32>::zeros((1, 8));
        one[[0, 5]] = 2.5;
        let x = sae.decode(one.view()).unwrap();
        let expect = &sae.params.w_dec.row(5) * 2.5 + &sae.params.b_dec;
        for (a, b) in x.row(0).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(sae.decode(Array2::<f32>::zeros((1, 7)).view()).is_err());
    }

    #[test]
    fn encode_rejects_non_finite_and_bad_width() {
        let sae = identity3(Variant::Vanilla { l1_coeff: 0.0 });
        assert!(matches!(
            sae.encode(array![[1.0f32, f32::INFINITY, 0.0]].view()),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            sae.encode(array![[1.0f32, 0.0]].view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tied_bias_fixed_point() {
        let mut sae = init_sae(5, 2, Variant::Vanilla { l1_coeff: 1e-3 }, 4).unwrap();
        sae.params.b_dec = array![0.5f32, -1.0, 2.0, 0.0, 0.25];
        let x = sae.params.b_dec.clone().insert_axis(ndarray::Axis(0));
        assert_eq!(sae.reconstruct(x.view()).unwrap(), x);
    }
}
