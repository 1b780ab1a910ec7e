// SPDX-License-Identifier: MIT OR Apache-2.0

//! A toy model, its synthetic data and a calibrated vocabulary head, bundled.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::data::{
    calibration_images, group_images, overlay_text, synth_vision_dataset, PatternBank, SynthVisionSpec, VisionData, VisionSample,
};
use super::head::{VocabularyHead, DEFAULT_LOGIT_SCALE};
use super::vit::{stack, ToyVit, ToyVitConfig};
use crate::activation_store::{random_unit_rows, ActivationDataset, Sublayer};
use crate::error::{Error, Result};

const CALIBRATION_PER_CLASS: usize = 64;
const AMPLITUDE_PROBE_IMAGES: usize = 200;
const AMPLITUDE_BISECTIONS: usize = 24;

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub model: ToyVit,
    pub spec: SynthVisionSpec,
    pub data: VisionData,
    /// Full vocabulary; rows `0..n_classes` are the class concepts.
    pub head: VocabularyHead,
}

impl ToyWorld {
    /// Builds the model, calibrates the head and, if requested, the attribute
    /// amplitude, then generates the data.
    pub fn build(model: ToyVitConfig, mut spec: SynthVisionSpec, vocab_size: usize) -> Result<Self> {
        spec.validate()?;
        let model = ToyVit::new(model)?;
        let bank = PatternBank::new(&spec, model.config.patch_dim(), spec.seed);
        let head = build_vocabulary(&model, &spec, &bank, vocab_size)?;
        if let Some(target) = spec.target_attribute_group_accuracy {
            let classes = head.restrict(&(0..spec.n_classes).collect::<Vec<_>>())?;
            spec.attribute_amplitude = calibrate_attribute_amplitude(&model, &classes, &spec, &bank, target)?;
        }
        let data = synth_vision_dataset(&spec, &model.config)?;
        Ok(Self {
            model,
            spec,
            data,
            head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    /// Head restricted to the class concepts, index `c` ↔ class `c`.
    pub fn class_head(&self) -> Result<VocabularyHead> {
        self.head.restrict(&(0..self.n_classes()).collect::<Vec<_>>())
    }

    /// Residual-stream (or MLP-output) activations of every layer for
    /// `samples`, one dataset per layer.
    pub fn activations(&self, samples: &[VisionSample], sublayer: Sublayer) -> Result<Vec<ActivationDataset>> {
        if samples.is_empty() {
            return Err(Error::EmptySelection("no samples to run".into()));
        }
        let traces = samples
            .par_iter()
            .map(|s| self.model.forward(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let meta: Vec<_> = samples.iter().map(|s| s.meta.clone()).collect();
        (0..self.model.n_layers())
            .map(|l| {
                let per_image: Vec<Array2<f32>> = traces
                    .iter()
                    .map(|t| match sublayer {
                        Sublayer::ResidPost => t.resid_post[l].clone(),
                        Sublayer::MlpOut => t.mlp_out[l].clone(),
                    })
                    .collect();
                ActivationDataset::new(l as u32, sublayer, stack(&per_image)?, meta.clone())
            })
            .collect()
    }
}

/// Seeded random unit concepts, with the first `n_classes` rows replaced by
/// class directions measured on the model.
///
/// A class direction is the class-mean embedding minus the grand mean, with
/// the grand-mean direction projected out so that the shared component of all
/// embeddings carries no class preference. With a positive
/// `text_concept_weight` each class concept also leans toward the embedding
/// shift caused by overlaying that class's text, the way a joint image-text
/// embedding answers to a written class name.
pub fn build_vocabulary(
    model: &ToyVit,
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    vocab_size: usize,
) -> Result<VocabularyHead> {
    let n_classes = spec.n_classes;
    if vocab_size < n_classes || vocab_size < 2 {
        return Err(Error::invalid(format!(
            "vocabulary of {vocab_size} cannot hold {n_classes} classes"
        )));
    }
    let d_out = model.config.d_out;
    let images = calibration_images(spec, bank, &model.config, CALIBRATION_PER_CLASS);
    let embeddings = images
        .par_iter()
        .map(|(_, img)| model.forward(img).map(|t| t.embedding))
        .collect::<Result<Vec<_>>>()?;
    let mut class_means = Array2::<f32>::zeros((n_classes, d_out));
    for ((c, _), e) in images.iter().zip(&embeddings) {
        let mut row = class_means.row_mut(*c);
        row.scaled_add(1.0 / CALIBRATION_PER_CLASS as f32, e);
    }
    let grand: Array1<f32> = class_means.mean_axis(Axis(0)).expect("n_classes > 0");
    let g2 = grand.dot(&grand);

    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ spec.seed.rotate_left(17));
    let mut vocab = random_unit_rows(&mut rng, vocab_size, d_out);
    for c in 0..n_classes {
        let mut dir = &class_means.row(c) - &grand;
        if g2 > 0.0 {
            let along = dir.dot(&grand) / g2;
            dir.scaled_add(-along, &grand);
        }
        if dir.dot(&dir) == 0.0 {
            return Err(Error::Degenerate(format!("class {c} has no distinct embedding")));
        }
        vocab.row_mut(c).assign(&(&dir / dir.dot(&dir).sqrt()));
    }
    if spec.text_concept_weight > 0.0 {
        let mut basis: Vec<Array1<f32>> = vec![grand.clone()];
        basis.extend((0..n_classes).map(|c| &class_means.row(c) - &grand));
        let shifts = text_directions(model, spec, bank, &images, &embeddings, &orthonormalize(basis))?;
        for c in 0..n_classes {
            let mut row = vocab.row_mut(c);
            row.scaled_add(spec.text_concept_weight, &shifts.row(c));
        }
    }
    let names = (0..vocab_size)
        .map(|i| {
            if i < n_classes {
                format!("class_{i}")
            } else {
                format!("concept_{i:04}")
            }
        })
        .collect();
    VocabularyHead::new(vocab, names, DEFAULT_LOGIT_SCALE)
}

fn orthonormalize(vectors: Vec<Array1<f32>>) -> Vec<Array1<f32>> {
    let mut out: Vec<Array1<f32>> = Vec::new();
    for mut v in vectors {
        for b in &out {
            let along = v.dot(b);
            v.scaled_add(-along, b);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            out.push(v / n);
        }
    }
    out
}

/// Per class, the unit mean embedding shift caused by overlaying that class's
/// text. The shift shared by all classes is removed, and so is everything in
/// `visual`, so that clean images carry no class preference along it.
fn text_directions(
    model: &ToyVit,
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    images: &[(usize, ndarray::Array3<f32>)],
    clean: &[Array1<f32>],
    visual: &[Array1<f32>],
) -> Result<Array2<f32>> {
    let n_classes = spec.n_classes;
    let mut shifts = Array2::<f32>::zeros((n_classes, model.config.d_out));
    for c in 0..n_classes {
        let with_text = images
            .par_iter()
            .map(|(_, img)| model.forward(&overlay_text(img, spec, bank, &model.config, c)).map(|t| t.embedding))
            .collect::<Result<Vec<_>>>()?;
        let mut row = shifts.row_mut(c);
        for (t, e) in with_text.iter().zip(clean) {
            row += &(t - e);
        }
    }
    let shared: Array1<f32> = shifts.mean_axis(Axis(0)).expect("n_classes > 0");
    for (c, mut row) in shifts.outer_iter_mut().enumerate() {
        row -= &shared;
        for b in visual {
            let along = row.dot(b);
            row.scaled_add(-along, b);
        }
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate(format!("text of class {c} does not move the embedding")));
        }
        row /= n;
    }
    Ok(shifts)
}

/// Bisects the attribute amplitude until class-0 images carrying the
/// attribute are classified correctly at rate `target`.
///
/// Accuracy falls as the amplitude grows; the search range is
/// `[0, 10 · class_amplitude]` and the returned amplitude is the midpoint of
/// the final bracket.
pub fn calibrate_attribute_amplitude(
    model: &ToyVit,
    class_head: &VocabularyHead,
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    target: f64,
) -> Result<f32> {
    let accuracy = |amp: f32| -> Result<f64> {
        let probe = SynthVisionSpec {
            attribute_amplitude: amp,
            ..spec.clone()
        };
        let images = group_images(&probe, bank, &model.config, 0, true, AMPLITUDE_PROBE_IMAGES);
        let correct = images
            .par_iter()
            .map(|img| {
                let e = model.forward(img)?.embedding;
                Ok((class_head.predict(e.view())? == 0) as usize)
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(correct.iter().sum::<usize>() as f64 / AMPLITUDE_PROBE_IMAGES as f64)
    };
    let (mut lo, mut hi) = (0.0f32, 10.0 * spec.class_amplitude.max(1.0));
    if accuracy(hi)? > target {
        return Err(Error::Degenerate(
            "the attribute cannot pull class-0 accuracy down to the target".into(),
        ));
    }
    for _ in 0..AMPLITUDE_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if accuracy(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
