// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic images with a planted class signal, a spurious attribute and an
//! optional typographic overlay.
//!
//! Each image is a grid of patches. Central patches carry the class pattern
//! plus two randomly chosen detail patterns; border patches carry the
//! attribute texture when the attribute is present. The attribute texture
//! leans towards the class-1 pattern, so a model that sees it is pulled
//! towards class 1 regardless of the true label.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vit::ToyVitConfig;
use crate::activation_store::{random_unit_rows, SampleMeta, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthVisionSpec {
    pub n_classes: usize,
    /// `ρ`: on the train split `P(A | Y = 1) = ρ` and `P(A | Y ≠ 1) = 1 − ρ`.
    pub spurious_correlation_strength: f64,
    /// Put the class signal in the central patches rather than at random
    /// positions.
    pub center_bias: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub class_amplitude: f32,
    pub detail_amplitude: f32,
    pub n_details: usize,
    pub attribute_amplitude: f32,
    /// Weight of the class-1 pattern inside the attribute texture.
    pub attribute_class_bias: f32,
    pub text_amplitude: f32,
    /// Weight of the target-class pattern inside each text overlay.
    pub text_class_bias: f32,
    /// Weight of the measured text direction inside each class concept of
    /// the vocabulary head. At zero the head only knows the visual pattern.
    pub text_concept_weight: f32,
    pub pixel_noise: f32,
    /// When set, `attribute_amplitude` is replaced by the amplitude at which
    /// the zero-shot head scores this accuracy on class-0 images carrying
    /// the attribute.
    pub target_attribute_group_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for SynthVisionSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            spurious_correlation_strength: 0.9,
            center_bias: true,
            n_train: 2000,
            n_val: 1000,
            n_test: 1000,
            class_amplitude: 3.0,
            detail_amplitude: 2.0,
            n_details: 8,
            attribute_amplitude: 3.0,
            attribute_class_bias: 1.0,
            text_amplitude: 6.0,
            text_class_bias: 1.0,
            text_concept_weight: 0.0,
            pixel_noise: 0.3,
            target_attribute_group_accuracy: Some(0.10),
            seed: 0,
        }
    }
}

impl SynthVisionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.spurious_correlation_strength) {
            return Err(Error::invalid(format!(
                "spurious_correlation_strength {} is not a probability",
                self.spurious_correlation_strength
            )));
        }
        if self.n_details < 2 {
            return Err(Error::invalid("n_details must be at least 2"));
        }
        let amps = [
            self.class_amplitude,
            self.detail_amplitude,
            self.attribute_amplitude,
            self.attribute_class_bias,
            self.text_amplitude,
            self.text_class_bias,
            self.text_concept_weight,
            self.pixel_noise,
        ];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid("amplitudes must be finite and non-negative"));
        }
        if let Some(t) = self.target_attribute_group_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("target accuracy {t} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Patch-space patterns shared by every image of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    /// `[n_classes, patch_dim]`, unit rows.
    pub class_patterns: Array2<f32>,
    pub detail_patterns: Array2<f32>,
    /// Unit texture marking the spurious attribute.
    pub attribute_texture: Array1<f32>,
    /// Unit overlay per target class.
    pub text_patterns: Array2<f32>,
}

fn blend(base: Array1<f32>, lean: ndarray::ArrayView1<'_, f32>, weight: f32) -> Array1<f32> {
    // Remove any accidental overlap first so `weight` alone sets the lean.
    let mut v = &base - &(&lean * base.dot(&lean));
    let n = v.dot(&v).sqrt();
    v /= n;
    v.scaled_add(weight, &lean);
    let n = v.dot(&v).sqrt();
    v / n
}

impl PatternBank {
    pub fn new(spec: &SynthVisionSpec, patch_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class_patterns = random_unit_rows(&mut rng, spec.n_classes, patch_dim);
        let detail_patterns = random_unit_rows(&mut rng, spec.n_details, patch_dim);
        let raw = random_unit_rows(&mut rng, 1, patch_dim).row(0).to_owned();
        let attribute_texture = blend(raw, class_patterns.row(1), spec.attribute_class_bias);
        let raw_text = random_unit_rows(&mut rng, spec.n_classes, patch_dim);
        let mut text_patterns = Array2::zeros((spec.n_classes, patch_dim));
        for k in 0..spec.n_classes {
            let t = blend(raw_text.row(k).to_owned(), class_patterns.row(k), spec.text_class_bias);
            text_patterns.row_mut(k).assign(&t);
        }
        Self {
            class_patterns,
            detail_patterns,
            attribute_texture,
            text_patterns,
        }
    }
}

/// One image and its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionSample {
    /// `[H, W, C]`
    pub image: Array3<f32>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionData {
    pub bank: PatternBank,
    pub train: Vec<VisionSample>,
    pub val: Vec<VisionSample>,
    pub test: Vec<VisionSample>,
}

impl VisionData {
    pub fn split(&self, split: Split) -> &[VisionSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Row-major patch indices of the central block: the middle half of the grid
/// in each direction (at least one row and column).
pub fn central_patches(rows: usize, cols: usize) -> Vec<usize> {
    let span = |n: usize| {
        let lo = n / 4;
        let hi = (n - n / 4).max(lo + 1);
        lo..hi
    };
    let mut out = Vec::new();
    for r in span(rows) {
        for c in span(cols) {
            out.push(r * cols + c);
        }
    }
    out
}

/// Row-major indices of the four corner patches.
pub fn corner_patches(rows: usize, cols: usize) -> Vec<usize> {
    let mut v = vec![0, cols - 1, (rows - 1) * cols, rows * cols - 1];
    v.sort_unstable();
    v.dedup();
    v
}

struct Geometry {
    rows: usize,
    cols: usize,
    patch: usize,
    channels: usize,
}

impl Geometry {
    fn of(cfg: &ToyVitConfig) -> Self {
        Self {
            rows: cfg.grid_rows,
            cols: cfg.grid_cols,
            patch: cfg.patch_size,
            channels: cfg.channels,
        }
    }

    fn add_patch(&self, image: &mut Array3<f32>, index: usize, pattern: ndarray::ArrayView1<'_, f32>, amp: f32) {
        let (r, c) = (index / self.cols, index % self.cols);
        let p = self.patch;
        let mut k = 0;
        for i in 0..p {
            for j in 0..p {
                for ch in 0..self.channels {
                    image[[r * p + i, c * p + j, ch]] += amp * pattern[k];
                    k += 1;
                }
            }
        }
    }
}

fn render(
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    geo: &Geometry,
    label: usize,
    attribute: bool,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let shape = (geo.rows * geo.patch, geo.cols * geo.patch, geo.channels);
    let mut image = Array3::from_shape_fn(shape, |_| spec.pixel_noise * rng.sample::<f32, _>(StandardNormal));
    let n_patches = geo.rows * geo.cols;
    let center = central_patches(geo.rows, geo.cols);
    let signal_at: Vec<usize> = if spec.center_bias {
        center.clone()
    } else {
        rand::seq::index::sample(rng, n_patches, center.len()).into_vec()
    };
    for &i in &signal_at {
        let amp = spec.class_amplitude * rng.random_range(0.8..1.2);
        geo.add_patch(&mut image, i, bank.class_patterns.row(label), amp);
        for d in rand::seq::index::sample(rng, spec.n_details, 2) {
            let amp = spec.detail_amplitude * rng.random_range(0.5..1.0);
            geo.add_patch(&mut image, i, bank.detail_patterns.row(d), amp);
        }
    }
    if attribute {
        for i in (0..n_patches).filter(|i| !signal_at.contains(i)) {
            let amp = spec.attribute_amplitude * rng.random_range(0.8..1.2);
            geo.add_patch(&mut image, i, bank.attribute_texture.view(), amp);
        }
    }
    image
}

fn attribute_probability(spec: &SynthVisionSpec, split: Split, label: usize) -> f64 {
    match split {
        Split::Train if label == 1 => spec.spurious_correlation_strength,
        Split::Train => 1.0 - spec.spurious_correlation_strength,
        Split::Val | Split::Test => 0.5,
    }
}

fn generate_split(
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    geo: &Geometry,
    split: Split,
    n: usize,
    first_id: u64,
) -> Vec<VisionSample> {
    let stream = match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    (0..n)
        .map(|i| {
            let label = rng.random_range(0..spec.n_classes);
            let attribute = rng.random_bool(attribute_probability(spec, split, label));
            let image = render(spec, bank, geo, label, attribute, &mut rng);
            VisionSample {
                image,
                meta: SampleMeta {
                    sample_id: first_id + i as u64,
                    class_label: label as i64,
                    attribute_flag: attribute,
                    split_tag: split,
                    grid_rows: geo.rows as u16,
                    grid_cols: geo.cols as u16,
                },
            }
        })
        .collect()
}

/// Train, validation and test splits with disjoint sample ids.
pub fn synth_vision_dataset(spec: &SynthVisionSpec, model: &ToyVitConfig) -> Result<VisionData> {
    spec.validate()?;
    model.validate()?;
    let geo = Geometry::of(model);
    let bank = PatternBank::new(spec, model.patch_dim(), spec.seed);
    let train = generate_split(spec, &bank, &geo, Split::Train, spec.n_train, 0);
    let val = generate_split(spec, &bank, &geo, Split::Val, spec.n_val, spec.n_train as u64);
    let test = generate_split(
        spec,
        &bank,
        &geo,
        Split::Test,
        spec.n_test,
        (spec.n_train + spec.n_val) as u64,
    );
    Ok(VisionData {
        bank,
        train,
        val,
        test,
    })
}

/// Class-signal images without the attribute, used to calibrate the head.
pub(crate) fn calibration_images(
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    model: &ToyVitConfig,
    per_class: usize,
) -> Vec<(usize, Array3<f32>)> {
    let geo = Geometry::of(model);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(4);
    let mut out = Vec::with_capacity(per_class * spec.n_classes);
    for c in 0..spec.n_classes {
        for _ in 0..per_class {
            out.push((c, render(spec, bank, &geo, c, false, &mut rng)));
        }
    }
    out
}

/// `n` images of one `(label, attribute)` group from a dedicated stream.
pub(crate) fn group_images(
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    model: &ToyVitConfig,
    label: usize,
    attribute: bool,
    n: usize,
) -> Vec<Array3<f32>> {
    let geo = Geometry::of(model);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(5);
    (0..n)
        .map(|_| render(spec, bank, &geo, label, attribute, &mut rng))
        .collect()
}

/// Overlays the text pattern of class `(y + 1) mod n` on the bottom row of
/// each image and marks the sample as attacked. Labels are unchanged.
pub fn typographic_attack(
    samples: &[VisionSample],
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    model: &ToyVitConfig,
) -> Vec<VisionSample> {
    samples
        .iter()
        .map(|s| {
            let target = attack_target(s.meta.class_label as usize, spec.n_classes);
            let image = overlay_text(&s.image, spec, bank, model, target);
            let mut meta = s.meta.clone();
            meta.attribute_flag = true;
            VisionSample { image, meta }
        })
        .collect()
}

/// `image` with the text pattern of `class` on every bottom-row patch.
pub(crate) fn overlay_text(
    image: &Array3<f32>,
    spec: &SynthVisionSpec,
    bank: &PatternBank,
    model: &ToyVitConfig,
    class: usize,
) -> Array3<f32> {
    let geo = Geometry::of(model);
    let mut out = image.clone();
    for i in (geo.rows - 1) * geo.cols..geo.rows * geo.cols {
        geo.add_patch(&mut out, i, bank.text_patterns.row(class), spec.text_amplitude);
    }
    out
}

/// Target class of the typographic overlay for a sample of class `label`.
pub fn attack_target(label: usize, n_classes: usize) -> usize {
    (label + 1) % n_classes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rho: f64) -> SynthVisionSpec {
        SynthVisionSpec {
            spurious_correlation_strength: rho,
            n_train: 4000,
            n_val: 50,
            n_test: 50,
            seed: 9,
            ..SynthVisionSpec::default()
        }
    }

    fn correlation(samples: &[VisionSample]) -> f64 {
        let n = samples.len() as f64;
        let y: Vec<f64> = samples.iter().map(|s| (s.meta.class_label == 1) as u8 as f64).collect();
        let a: Vec<f64> = samples.iter().map(|s| s.meta.attribute_flag as u8 as f64).collect();
        let my = y.iter().sum::<f64>() / n;
        let ma = a.iter().sum::<f64>() / n;
        let cov = y.iter().zip(&a).map(|(y, a)| (y - my) * (a - ma)).sum::<f64>() / n;
        let sy = (y.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
        let sa = (a.iter().map(|a| (a - ma).powi(2)).sum::<f64>() / n).sqrt();
        cov / (sy * sa)
    }

    #[test]
    fn perfect_correlation_on_train() {
        let d = synth_vision_dataset(&small(1.0), &ToyVitConfig::default()).unwrap();
        for s in &d.train {
            assert_eq!(s.meta.attribute_flag, s.meta.class_label == 1);
        }
    }

    #[test]
    fn half_correlation_is_uncorrelated() {
        let d = synth_vision_dataset(&small(0.5), &ToyVitConfig::default()).unwrap();
        assert!(correlation(&d.train).abs() < 0.05);
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let spec = small(0.9);
        let a = synth_vision_dataset(&spec, &ToyVitConfig::default()).unwrap();
        let b = synth_vision_dataset(&spec, &ToyVitConfig::default()).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<u64> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|s| s.meta.sample_id)
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(a.test.iter().all(|s| s.meta.split_tag == Split::Test));
    }

    #[test]
    fn patch_layout_helpers() {
        assert_eq!(central_patches(4, 4), vec![5, 6, 9, 10]);
        assert_eq!(corner_patches(4, 4), vec![0, 3, 12, 15]);
        assert_eq!(central_patches(1, 1), vec![0]);
    }

    #[test]
    fn attack_marks_and_changes_bottom_row_only() {
        let spec = small(0.9);
        let cfg = ToyVitConfig::default();
        let d = synth_vision_dataset(&spec, &cfg).unwrap();
        let attacked = typographic_attack(&d.val[..3], &spec, &d.bank, &cfg);
        for (a, c) in attacked.iter().zip(&d.val) {
            assert!(a.meta.attribute_flag);
            assert_eq!(a.meta.class_label, c.meta.class_label);
            let diff = &a.image - &c.image;
            let top = diff.slice(ndarray::s![..12, .., ..]);
            assert!(top.iter().all(|&v| v == 0.0));
            assert!(diff.iter().any(|&v| v != 0.0));
        }
    }
}
