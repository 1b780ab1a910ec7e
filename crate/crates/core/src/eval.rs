// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE evaluation: explained variance, L0 statistics, reconstruction cosines,
//! cross-entropy splice tests and max-activating samples.

use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::activation_store::{selected_rows, ActivationDataset, TokenFilter};
use crate::error::{Error, Result};
use crate::sae::{Reconstruct, SaeModel};
use crate::toy::{ToyVit, VocabularyHead};

/// Rows encoded per chunk when sweeping a whole dataset.
const CHUNK_ROWS: usize = 4096;

/// Denominator below which CE recovered is undefined.
pub const CE_DENOMINATOR_EPS: f64 = 1e-9;

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(CHUNK_ROWS).map(move |lo| lo..(lo + CHUNK_ROWS).min(n))
}

/// Feature activations of every token, `[n_samples · n_tokens, d_sae]` in
/// sample-major order.
pub fn encode_all(sae: &SaeModel, dataset: &ActivationDataset) -> Result<Array2<f32>> {
    let x = dataset.rows(TokenFilter::All);
    let mut out = Array2::zeros((x.nrows(), sae.d_sae()));
    for r in chunks(x.nrows()) {
        let f = sae.encode(x.slice(s![r.clone(), ..]))?;
        out.slice_mut(s![r, ..]).assign(&f);
    }
    Ok(out)
}

fn check_width(sae: &dyn Reconstruct, dataset: &ActivationDataset) -> Result<()> {
    if sae.width() != dataset.d_model() {
        return Err(Error::shape(format!(
            "SAE width {} != dataset d_model {}",
            sae.width(),
            dataset.d_model()
        )));
    }
    Ok(())
}

/// `1 − E‖x − x̂‖² / E‖x − x̄‖²` over the selected tokens.
pub fn explained_variance(dataset: &ActivationDataset, sae: &dyn Reconstruct, filter: TokenFilter) -> Result<f64> {
    check_width(sae, dataset)?;
    let rows = selected_rows(dataset, filter);
    if rows.is_empty() {
        return Err(Error::EmptySelection("no tokens selected".into()));
    }
    let x = dataset.gather(&rows);
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty").mapv(f64::from);
    let mut resid = 0.0f64;
    let mut total = 0.0f64;
    for r in chunks(x.nrows()) {
        let xs = x.slice(s![r, ..]);
        let xh = sae.reconstruct(xs)?;
        for (row, hat) in xs.outer_iter().zip(xh.outer_iter()) {
            for ((&a, &b), &m) in row.iter().zip(hat.iter()).zip(mean.iter()) {
                let (a, b) = (f64::from(a), f64::from(b));
                resid += (a - b) * (a - b);
                total += (a - m) * (a - m);
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Degenerate("activations have zero variance".into()));
    }
    Ok(1.0 - resid / total)
}

/// Mean and quartiles of a sample of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: 0.0,
                q1: 0.0,
                median: 0.0,
                q3: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L0Report {
    /// Mean L0 of each spatial patch position, `[grid_rows, grid_cols]`.
    pub per_patch_mean: Array2<f64>,
    pub cls: Summary,
    pub spatial: Summary,
    /// Sum of spatial-token L0 per image, averaged over images.
    pub avg_img_l0: f64,
    pub avg_cls_l0: f64,
}

impl L0Report {
    /// The per-patch map as a CSV grid without header.
    pub fn per_patch_csv(&self) -> String {
        let mut out = String::new();
        for row in self.per_patch_mean.outer_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Mean L0 over the given row-major patch indices.
    pub fn mean_over_patches(&self, patches: &[usize]) -> f64 {
        let cols = self.per_patch_mean.ncols();
        let sum: f64 = patches
            .iter()
            .map(|&p| self.per_patch_mean[[p / cols, p % cols]])
            .sum();
        sum / patches.len() as f64
    }
}

/// Counts features with activation above `threshold` per token (`0.0` means
/// strictly positive) and aggregates by patch position, CLS and spatial pools.
pub fn l0_stats(dataset: &ActivationDataset, sae: &SaeModel, threshold: f32) -> Result<L0Report> {
    check_width(sae, dataset)?;
    let (rows, cols) = dataset
        .grid()
        .ok_or_else(|| Error::MetaInconsistent("dataset has no patch grid".into()))?;
    let f = encode_all(sae, dataset)?;
    let t = dataset.n_tokens();
    let l0: Vec<f64> = f
        .outer_iter()
        .map(|r| r.iter().filter(|&&v| v > threshold).count() as f64)
        .collect();
    let n = dataset.n_samples();
    let mut per_patch = Array2::<f64>::zeros((rows, cols));
    let mut cls = Vec::with_capacity(n);
    let mut spatial = Vec::with_capacity(n * (t - 1));
    let mut img_sums = Vec::with_capacity(n);
    for i in 0..n {
        let tok = &l0[i * t..(i + 1) * t];
        cls.push(tok[0]);
        let mut sum = 0.0;
        for (p, &v) in tok[1..].iter().enumerate() {
            per_patch[[p / cols, p % cols]] += v;
            spatial.push(v);
            sum += v;
        }
        img_sums.push(sum);
    }
    per_patch /= n.max(1) as f64;
    let cls = Summary::of(&cls);
    Ok(L0Report {
        per_patch_mean: per_patch,
        avg_cls_l0: cls.mean,
        cls,
        spatial: Summary::of(&spatial),
        avg_img_l0: Summary::of(&img_sums).mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CeReport {
    pub ce_clean: f64,
    pub ce_recon: f64,
    pub ce_zero_abl: f64,
    /// `None` when zero ablation is no worse than the clean model.
    pub ce_recovered_pct: Option<f64>,
}

impl CeReport {
    pub fn degenerate(&self) -> bool {
        self.ce_recovered_pct.is_none()
    }
}

/// `100 · (zero − recon) / (zero − clean)`, undefined for a vanishing
/// denominator.
pub fn ce_recovered(ce_clean: f64, ce_recon: f64, ce_zero_abl: f64) -> Option<f64> {
    let denom = ce_zero_abl - ce_clean;
    (denom.abs() > CE_DENOMINATOR_EPS).then(|| 100.0 * (ce_zero_abl - ce_recon) / denom)
}

fn label_index(label: i64, head: &VocabularyHead) -> Result<usize> {
    usize::try_from(label)
        .ok()
        .filter(|&l| l < head.len())
        .ok_or_else(|| Error::invalid(format!("label {label} not covered by a head of {} concepts", head.len())))
}

/// Mean cross-entropy of the head on labels after resuming the model from
/// `edit(activations)` at the dataset's layer.
pub fn spliced_cross_entropy<F>(
    model: &ToyVit,
    dataset: &ActivationDataset,
    head: &VocabularyHead,
    edit: F,
) -> Result<f64>
where
    F: Fn(ArrayView2<'_, f32>) -> Result<Array2<f32>> + Sync,
{
    let layer = dataset.layer();
    let total: f64 = (0..dataset.n_samples())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let label = label_index(dataset.meta[i].class_label, head)?;
            let acts = edit(dataset.sample(i))?;
            let e = model.forward_from_layer(acts.view(), layer)?;
            let p = head.zero_shot_probs(e.view())?;
            Ok(-p[label].max(f64::MIN_POSITIVE).ln())
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / dataset.n_samples() as f64)
}

/// Cross-entropy with clean, reconstructed and zeroed activations at the
/// dataset's layer, replacing every token.
pub fn ce_suite(
    model: &ToyVit,
    sae: &dyn Reconstruct,
    dataset: &ActivationDataset,
    head: &VocabularyHead,
) -> Result<CeReport> {
    check_width(sae, dataset)?;
    if dataset.n_samples() == 0 {
        return Err(Error::EmptySelection("empty dataset".into()));
    }
    let ce_clean = spliced_cross_entropy(model, dataset, head, |x| Ok(x.to_owned()))?;
    let ce_recon = spliced_cross_entropy(model, dataset, head, |x| sae.reconstruct(x))?;
    let ce_zero_abl = spliced_cross_entropy(model, dataset, head, |x| Ok(Array2::zeros(x.raw_dim())))?;
    Ok(CeReport {
        ce_clean,
        ce_recon,
        ce_zero_abl,
        ce_recovered_pct: ce_recovered(ce_clean, ce_recon, ce_zero_abl),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CosineReport {
    /// Mean `cos(x, x̂)` over tokens.
    pub token_cos: f64,
    /// Mean over images of `cos(mean_t x, mean_t x̂)`.
    pub pooled_cos: f64,
    /// Tokens or images skipped for having a zero-norm vector.
    pub skipped_tokens: usize,
    pub skipped_images: usize,
}

fn cosine(a: ndarray::ArrayView1<'_, f32>, b: ndarray::ArrayView1<'_, f32>) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| ab / (aa.sqrt() * bb.sqrt()))
}

/// Reconstruction cosine per token and per image after mean-pooling tokens.
pub fn cosine_metrics(dataset: &ActivationDataset, sae: &dyn Reconstruct) -> Result<CosineReport> {
    check_width(sae, dataset)?;
    let (mut tok_sum, mut tok_n, mut tok_skip) = (0.0, 0usize, 0usize);
    let (mut img_sum, mut img_n, mut img_skip) = (0.0, 0usize, 0usize);
    for i in 0..dataset.n_samples() {
        let x = dataset.sample(i);
        let xh = sae.reconstruct(x)?;
        for (a, b) in x.outer_iter().zip(xh.outer_iter()) {
            match cosine(a, b) {
                Some(c) => {
                    tok_sum += c;
                    tok_n += 1;
                }
                None => tok_skip += 1,
            }
        }
        let pa: Array1<f32> = x.mean_axis(ndarray::Axis(0)).expect("tokens > 0");
        let pb: Array1<f32> = xh.mean_axis(ndarray::Axis(0)).expect("tokens > 0");
        match cosine(pa.view(), pb.view()) {
            Some(c) => {
                img_sum += c;
                img_n += 1;
            }
            None => img_skip += 1,
        }
    }
    if tok_n == 0 || img_n == 0 {
        return Err(Error::Degenerate("every row has zero norm".into()));
    }
    Ok(CosineReport {
        token_cos: tok_sum / tok_n as f64,
        pooled_cos: img_sum / img_n as f64,
        skipped_tokens: tok_skip,
        skipped_images: img_skip,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Activation {
    pub sample_id: u64,
    pub token: usize,
    pub value: f32,
}

/// The `top_n` strongest positive activations of one feature, sorted by value
/// descending, then `(sample_id, token)` ascending. A dead feature yields an
/// empty list.
pub fn max_activating_samples(
    dataset: &ActivationDataset,
    sae: &SaeModel,
    feature: usize,
    top_n: usize,
) -> Result<Vec<Activation>> {
    if feature >= sae.d_sae() {
        return Err(Error::invalid(format!(
            "feature {feature} out of range for d_sae {}",
            sae.d_sae()
        )));
    }
    check_width(sae, dataset)?;
    let f = encode_all(sae, dataset)?;
    let t = dataset.n_tokens();
    let mut hits: Vec<Activation> = f
        .column(feature)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(r, &value)| Activation {
            sample_id: dataset.meta[r / t].sample_id,
            token: r % t,
            value,
        })
        .collect();
    hits.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.sample_id.cmp(&b.sample_id))
            .then(a.token.cmp(&b.token))
    });
    hits.truncate(top_n);
    Ok(hits)
}

/// Everything reported for one SAE on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub layer: usize,
    pub explained_variance: f64,
    pub l0: L0Report,
    pub cosine: CosineReport,
    pub ce: Option<CeReport>,
}

impl EvalReport {
    /// One `metric,value` row per scalar.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(out, "{k},{v}");
        };
        row("layer", self.layer.to_string());
        row("explained_variance", self.explained_variance.to_string());
        row("avg_img_l0", self.l0.avg_img_l0.to_string());
        row("avg_cls_l0", self.l0.avg_cls_l0.to_string());
        row("spatial_l0_mean", self.l0.spatial.mean.to_string());
        row("spatial_l0_median", self.l0.spatial.median.to_string());
        row("cls_l0_median", self.l0.cls.median.to_string());
        row("cos_sim", self.cosine.token_cos.to_string());
        row("pooled_cos_sim", self.cosine.pooled_cos.to_string());
        if let Some(ce) = &self.ce {
            row("ce_clean", ce.ce_clean.to_string());
            row("ce_recon", ce.ce_recon.to_string());
            row("ce_zero_abl", ce.ce_zero_abl.to_string());
            row(
                "ce_recovered_pct",
                ce.ce_recovered_pct.map_or_else(|| "undefined".into(), |v| v.to_string()),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_store::{synth_dictionary_dataset, SampleMeta, Split, Sublayer, SynthDictSpec};
    use crate::sae::{init_sae, IdentityMap, Variant, ZeroMap};
    use ndarray::{array, Array3};

    fn data() -> ActivationDataset {
        synth_dictionary_dataset(&SynthDictSpec {
            n_true_features: 12,
            d_model: 6,
            tokens_per_sample: 5,
            n_samples: 10,
            active_per_token: 2,
            noise_sigma: 0.0,
            seed: 2,
        })
        .unwrap()
        .0
    }

    struct MeanMap(Array1<f32>);

    impl Reconstruct for MeanMap {
        fn width(&self) -> usize {
            self.0.len()
        }
        fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
            Ok(Array2::from_shape_fn(x.raw_dim(), |(_, j)| self.0[j]))
        }
    }

    #[test]
    fn explained_variance_bounds() {
        let ds = data();
        assert_eq!(explained_variance(&ds, &IdentityMap(6), TokenFilter::All).unwrap(), 1.0);
        let mean = ds.rows(TokenFilter::All).mean_axis(ndarray::Axis(0)).unwrap();
        let ev = explained_variance(&ds, &MeanMap(mean), TokenFilter::All).unwrap();
        assert!(ev.abs() < 1e-6, "{ev}");
        assert!(explained_variance(&ds, &IdentityMap(5), TokenFilter::All).is_err());
    }

    #[test]
    fn zero_variance_is_an_error() {
        let meta = vec![SampleMeta {
            sample_id: 0,
            class_label: 0,
            attribute_flag: false,
            split_tag: Split::Train,
            grid_rows: 1,
            grid_cols: 1,
        }];
        let ds = ActivationDataset::new(0, Sublayer::ResidPost, Array3::ones((1, 2, 3)), meta).unwrap();
        assert!(matches!(
            explained_variance(&ds, &IdentityMap(3), TokenFilter::All),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ce_recovered_formula() {
        assert_eq!(ce_recovered(1.0, 1.0, 3.0), Some(100.0));
        assert_eq!(ce_recovered(1.0, 3.0, 3.0), Some(0.0));
        assert_eq!(ce_recovered(2.0, 2.5, 2.0), None);
        let r = ce_recovered(3.412, 3.501, 4.339).unwrap();
        assert!((r - 90.35).abs() < 0.2, "{r}");
    }

    #[test]
    fn l0_of_topk_and_zero_encoder() {
        let ds = data();
        let sae = init_sae(6, 4, Variant::TopK { k: 3 }, 1).unwrap();
        let rep = l0_stats(&ds, &sae, 0.0).unwrap();
        assert!(rep.spatial.q3 <= 3.0 && rep.cls.mean <= 3.0);
        assert_eq!(rep.per_patch_mean.dim(), (2, 2));
        assert_eq!(rep.per_patch_csv().lines().count(), 2);

        let mut dead = init_sae(6, 4, Variant::Vanilla { l1_coeff: 0.0 }, 1).unwrap();
        dead.params.w_enc.fill(0.0);
        let rep = l0_stats(&ds, &dead, 0.0).unwrap();
        assert_eq!(rep.avg_img_l0, 0.0);
        assert_eq!(rep.avg_cls_l0, 0.0);
    }

    #[test]
    fn cosine_extremes() {
        let ds = data();
        let c = cosine_metrics(&ds, &IdentityMap(6)).unwrap();
        assert!((c.token_cos - 1.0).abs() < 1e-9 && (c.pooled_cos - 1.0).abs() < 1e-9);

        struct Neg;
        impl Reconstruct for Neg {
            fn width(&self) -> usize {
                6
            }
            fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
                Ok(-x.to_owned())
            }
        }
        let c = cosine_metrics(&ds, &Neg).unwrap();
        assert!((c.token_cos + 1.0).abs() < 1e-9);
        assert!(matches!(cosine_metrics(&ds, &ZeroMap(6)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn max_activating_order_and_dead_feature() {
        let ds = data();
        let sae = SaeModel::from_dictionary(&Array2::eye(6), Variant::Vanilla { l1_coeff: 0.0 }).unwrap();
        let all = max_activating_samples(&ds, &sae, 2, usize::MAX).unwrap();
        for w in all.windows(2) {
            assert!(w[0].value >= w[1].value);
        }
        let top = max_activating_samples(&ds, &sae, 2, 3).unwrap();
        assert_eq!(&all[..3], &top[..]);

        let mut dead = sae.clone();
        dead.params.b_enc[4] = -1e6;
        assert!(max_activating_samples(&ds, &dead, 4, 10).unwrap().is_empty());
        assert!(max_activating_samples(&ds, &sae, 6, 1).is_err());
    }

    #[test]
    fn ties_break_by_sample_then_token() {
        let meta = (0..2)
            .map(|i| SampleMeta {
                sample_id: 10 - i,
                class_label: 0,
                attribute_flag: false,
                split_tag: Split::Test,
                grid_rows: 1,
                grid_cols: 1,
            })
            .collect();
        let acts = Array3::from_shape_vec((2, 2, 1), vec![1.0f32, 1.0, 1.0, 0.5]).unwrap();
        let ds = ActivationDataset::new(0, Sublayer::ResidPost, acts, meta).unwrap();
        let sae = SaeModel::from_dictionary(&array![[1.0f32]], Variant::Vanilla { l1_coeff: 0.0 }).unwrap();
        let got: Vec<(u64, usize)> = max_activating_samples(&ds, &sae, 0, 10)
            .unwrap()
            .iter()
            .map(|a| (a.sample_id, a.token))
            .collect();
        assert_eq!(got, vec![(9, 0), (10, 0), (10, 1), (9, 1)]);
    }
}
