// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature and neuron steering against a vocabulary head, and the
//! steerability metrics built on the resulting probability shifts.
//!
//! ```text
//! Δ̄      = mean_i (P̃_i − P_i)                 mean shift over images
//! ΔP_f   = ½ Σ_v |Δ̄_v|                         probability mass moved
//! S_f    = Σ_v Δ̄_v²                            steerability, 1/n_c for a
//!                                               uniform shift onto n_c concepts
//! D_f    = Σ_v P(v|f) ‖t_v − μ_V‖              distance of promoted concepts
//! ```

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_store::ActivationDataset;
use crate::error::{Error, Result};
use crate::sae::SaeModel;
use crate::toy::head::argmax;
use crate::toy::{ToyVit, VocabularyHead};

pub const DEFAULT_STRENGTHS: [f32; 12] = [0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 35.0, 50.0, 75.0, 100.0, 125.0, 150.0];
pub const DEFAULT_GAMMA: f64 = 0.10;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerConfig {
    /// Ascending, starting at 0.
    pub strengths: Vec<f32>,
    pub gamma: f64,
    pub beta: f64,
    /// Restrict to these sample ids; all samples when `None`.
    pub sample_ids: Option<Vec<u64>>,
    /// Concepts listed per strength in sweep reports.
    pub top_concepts: usize,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            strengths: DEFAULT_STRENGTHS.to_vec(),
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            sample_ids: None,
            top_concepts: 3,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strengths.is_empty() {
            return Err(Error::invalid("strengths must not be empty"));
        }
        if self.strengths[0] != 0.0 {
            return Err(Error::invalid("strengths must start at 0"));
        }
        if self.strengths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("strengths must be strictly ascending"));
        }
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Dataset indices of the configured sample ids, or every sample.
    pub fn images(&self, dataset: &ActivationDataset) -> Result<Vec<usize>> {
        let idx: Vec<usize> = match &self.sample_ids {
            None => (0..dataset.n_samples()).collect(),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    dataset
                        .meta
                        .iter()
                        .position(|m| m.sample_id == *id)
                        .ok_or_else(|| Error::invalid(format!("sample id {id} not in dataset")))
                })
                .collect::<Result<_>>()?,
        };
        if idx.is_empty() {
            return Err(Error::EmptySelection("no images to steer".into()));
        }
        Ok(idx)
    }
}

/// What gets overwritten on every token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Feature,
    Neuron,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Feature => "feature",
            Self::Neuron => "neuron",
        }
    }
}

/// The steering space: an SAE's features or the raw residual coordinates.
#[derive(Debug, Clone, Copy)]
pub enum Space<'a> {
    Sae(&'a SaeModel),
    Neurons,
}

impl Space<'_> {
    pub fn kind(&self) -> TargetKind {
        match self {
            Self::Sae(_) => TargetKind::Feature,
            Self::Neurons => TargetKind::Neuron,
        }
    }

    pub fn dimension(&self, d_model: usize) -> usize {
        match self {
            Self::Sae(sae) => sae.d_sae(),
            Self::Neurons => d_model,
        }
    }

    fn check(&self, dataset: &ActivationDataset, id: usize) -> Result<()> {
        if let Self::Sae(sae) = self {
            if sae.d_model() != dataset.d_model() {
                return Err(Error::shape(format!(
                    "SAE d_model {} != dataset d_model {}",
                    sae.d_model(),
                    dataset.d_model()
                )));
            }
        }
        let dim = self.dimension(dataset.d_model());
        if id >= dim {
            return Err(Error::invalid(format!(
                "{} {id} out of range for dimension {dim}",
                self.kind().as_str()
            )));
        }
        Ok(())
    }

    /// Sets the target to `strength` on every token. Feature edits keep the
    /// reconstruction error: `x' = x + (s − f_j(x))·W_dec[j]`.
    pub fn steer(&self, acts: ndarray::ArrayView2<'_, f32>, id: usize, strength: f32) -> Result<Array2<f32>> {
        let mut out = acts.to_owned();
        match self {
            Self::Sae(sae) => {
                let f = sae.encode(acts)?;
                let dir = sae.params.w_dec.row(id);
                for (mut row, fj) in out.outer_iter_mut().zip(f.column(id).iter()) {
                    row.scaled_add(strength - fj, &dir);
                }
            }
            Self::Neurons => out.column_mut(id).fill(strength),
        }
        Ok(out)
    }
}

fn probs_from(
    model: &ToyVit,
    head: &VocabularyHead,
    layer: usize,
    acts: ndarray::ArrayView2<'_, f32>,
) -> Result<Array1<f64>> {
    let e = model.forward_from_layer(acts, layer)?;
    head.zero_shot_probs(e.view())
}

/// Head distribution per image with the dataset's layer left untouched.
pub fn clean_probs(
    model: &ToyVit,
    head: &VocabularyHead,
    dataset: &ActivationDataset,
    images: &[usize],
) -> Result<Vec<Array1<f64>>> {
    images
        .par_iter()
        .map(|&i| probs_from(model, head, dataset.layer(), dataset.sample(i)))
        .collect()
}

/// `P̃_i` for each image after steering target `id` to `strength`.
pub fn steer_forward(
    model: &ToyVit,
    head: &VocabularyHead,
    space: Space<'_>,
    dataset: &ActivationDataset,
    id: usize,
    strength: f32,
    images: &[usize],
) -> Result<Vec<Array1<f64>>> {
    space.check(dataset, id)?;
    images
        .par_iter()
        .map(|&i| {
            let edited = space.steer(dataset.sample(i), id, strength)?;
            probs_from(model, head, dataset.layer(), edited.view())
        })
        .collect()
}

/// `mean_i(P̃_i − P_i)`.
pub fn mean_shift(clean: &[Array1<f64>], steered: &[Array1<f64>]) -> Result<Array1<f64>> {
    if clean.len() != steered.len() || clean.is_empty() {
        return Err(Error::shape(format!(
            "{} clean vs {} steered distributions",
            clean.len(),
            steered.len()
        )));
    }
    let width = clean[0].len();
    let mut acc = Array1::<f64>::zeros(width);
    for (p, q) in clean.iter().zip(steered) {
        if p.len() != width || q.len() != width {
            return Err(Error::shape("distributions of unequal width".to_string()));
        }
        acc += q;
        acc -= p;
    }
    Ok(acc / clean.len() as f64)
}

fn mean_probs(probs: &[Array1<f64>]) -> Array1<f64> {
    let views: Vec<_> = probs.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views)
        .expect("equal widths")
        .mean_axis(Axis(0))
        .expect("non-empty")
}

/// Total variation of the mean shift.
pub fn delta_p(clean: &[Array1<f64>], steered: &[Array1<f64>]) -> Result<f64> {
    Ok(delta_p_of(mean_shift(clean, steered)?.view()))
}

pub fn delta_p_of(shift: ArrayView1<'_, f64>) -> f64 {
    0.5 * shift.iter().map(|v| v.abs()).sum::<f64>()
}

/// Squared L2 norm of the mean shift.
pub fn steerability(clean: &[Array1<f64>], steered: &[Array1<f64>]) -> Result<f64> {
    Ok(steerability_of(mean_shift(clean, steered)?.view()))
}

pub fn steerability_of(shift: ArrayView1<'_, f64>) -> f64 {
    shift.iter().map(|v| v * v).sum()
}

/// `Σ_v p_v ‖t_v − μ_V‖`.
pub fn concept_distance(head: &VocabularyHead, probs: ArrayView1<'_, f64>) -> Result<f64> {
    if probs.len() != head.len() {
        return Err(Error::shape(format!(
            "distribution over {} concepts for a head of {}",
            probs.len(),
            head.len()
        )));
    }
    let mu = head.mean_embedding();
    Ok(head
        .embeddings
        .outer_iter()
        .zip(probs.iter())
        .map(|(t, &p)| {
            let d = &t - &mu;
            p * f64::from(d.dot(&d)).sqrt()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteerReport {
    pub strength: f32,
    pub mean_shift: Array1<f64>,
    pub delta_p: f64,
    pub steerability: f64,
    pub d_f: f64,
    /// Concept index, name and mean steered probability, most probable first.
    pub top_concepts: Vec<(usize, String, f64)>,
}

impl SteerReport {
    /// Concept receiving the largest share of the mean shift.
    pub fn promoted_concept(&self) -> usize {
        argmax(self.mean_shift.view())
    }
}

fn report(
    head: &VocabularyHead,
    clean: &[Array1<f64>],
    steered: &[Array1<f64>],
    strength: f32,
    top_n: usize,
) -> Result<SteerReport> {
    let shift = mean_shift(clean, steered)?;
    let mean = mean_probs(steered);
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    let top_concepts = order
        .iter()
        .take(top_n)
        .map(|&v| (v, head.names[v].clone(), mean[v]))
        .collect();
    Ok(SteerReport {
        strength,
        delta_p: delta_p_of(shift.view()),
        steerability: steerability_of(shift.view()),
        d_f: concept_distance(head, mean.view())?,
        mean_shift: shift,
        top_concepts,
    })
}

/// One report per configured strength for a single target.
pub fn asymptotic_sweep(
    model: &ToyVit,
    head: &VocabularyHead,
    space: Space<'_>,
    dataset: &ActivationDataset,
    id: usize,
    config: &SteerConfig,
) -> Result<Vec<SteerReport>> {
    config.validate()?;
    space.check(dataset, id)?;
    let images = config.images(dataset)?;
    let clean = clean_probs(model, head, dataset, &images)?;
    config
        .strengths
        .iter()
        .map(|&s| {
            let steered = steer_forward(model, head, space, dataset, id, s, &images)?;
            report(head, &clean, &steered, s, config.top_concepts)
        })
        .collect()
}

/// Neuron sweep: sets residual coordinate `dim` to each strength.
pub fn neuron_sweep(
    model: &ToyVit,
    head: &VocabularyHead,
    dataset: &ActivationDataset,
    dim: usize,
    config: &SteerConfig,
) -> Result<Vec<SteerReport>> {
    asymptotic_sweep(model, head, Space::Neurons, dataset, dim, config)
}

/// Steerability of one target at a single strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetScore {
    pub id: usize,
    pub steerability: f64,
    pub delta_p: f64,
    /// Concept receiving the largest share of the mean shift.
    pub promoted: usize,
}

/// Scores every target in `ids` at `strength` against shared clean
/// distributions.
pub fn scan(
    model: &ToyVit,
    head: &VocabularyHead,
    space: Space<'_>,
    dataset: &ActivationDataset,
    ids: &[usize],
    strength: f32,
    images: &[usize],
) -> Result<Vec<TargetScore>> {
    let clean = clean_probs(model, head, dataset, images)?;
    ids.iter()
        .map(|&id| {
            let steered = steer_forward(model, head, space, dataset, id, strength, images)?;
            let shift = mean_shift(&clean, &steered)?;
            Ok(TargetScore {
                id,
                steerability: steerability_of(shift.view()),
                delta_p: delta_p_of(shift.view()),
                promoted: argmax(shift.view()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerMetrics {
    /// Mean `S_f`.
    pub average: f64,
    /// Targets with `S_f > γ`.
    pub steerable_count: usize,
    pub steerable_proportion: f64,
    /// Targets with `S_f > β`.
    pub concept_count: usize,
    /// Distinct promoted concepts among targets with `S_f > β`.
    pub distinct_concepts: usize,
}

pub fn layer_metrics(scores: &[TargetScore], gamma: f64, beta: f64) -> Result<LayerMetrics> {
    if scores.is_empty() {
        return Err(Error::EmptySelection("no steering scores".into()));
    }
    let n = scores.len();
    let steerable_count = scores.iter().filter(|s| s.steerability > gamma).count();
    let strong: Vec<&TargetScore> = scores.iter().filter(|s| s.steerability > beta).collect();
    let mut concepts: Vec<usize> = strong.iter().map(|s| s.promoted).collect();
    concepts.sort_unstable();
    concepts.dedup();
    Ok(LayerMetrics {
        average: scores.iter().map(|s| s.steerability).sum::<f64>() / n as f64,
        steerable_count,
        steerable_proportion: steerable_count as f64 / n as f64,
        concept_count: strong.len(),
        distinct_concepts: concepts.len(),
    })
}

/// Log-spaced histogram of positive values between `lo` and `hi`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values at or below the first edge.
    pub underflow: usize,
}

impl LogHistogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || bins == 0 {
            return Err(Error::invalid("histogram needs 0 < lo < hi and bins > 0"));
        }
        let (llo, lhi) = (lo.log10(), hi.log10());
        let edges: Vec<f64> = (0..=bins)
            .map(|i| 10f64.powf(llo + (lhi - llo) * i as f64 / bins as f64))
            .collect();
        let mut counts = vec![0; bins];
        let mut underflow = 0;
        for &v in values {
            if !(v > lo) {
                underflow += 1;
                continue;
            }
            let pos = ((v.log10() - llo) / (lhi - llo) * bins as f64).ceil() as usize;
            counts[pos.clamp(1, bins) - 1] += 1;
        }
        Ok(Self {
            edges,
            counts,
            underflow,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,count\n");
        let _ = writeln!(out, "0,{},{}", self.edges[0], self.underflow);
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }
}

pub const SWEEP_CSV_HEADER: &str = "target_kind,layer,id,strength,delta_p,steerability,d_f,\
top1_concept,top1_prob,top2_concept,top2_prob,top3_concept,top3_prob";

/// Sweep rows in the fixed CSV layout, without header.
pub fn sweep_csv_rows(kind: TargetKind, layer: usize, id: usize, reports: &[SteerReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = write!(
            out,
            "{},{layer},{id},{},{},{},{}",
            kind.as_str(),
            r.strength,
            r.delta_p,
            r.steerability,
            r.d_f
        );
        for k in 0..3 {
            match r.top_concepts.get(k) {
                Some((_, name, p)) => {
                    let _ = write!(out, ",{name},{p}");
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-concept mean shift rows (`target_kind,layer,id,strength,concept,shift`)
/// so alternative reductions can be recomputed downstream.
pub fn shift_csv_rows(kind: TargetKind, layer: usize, id: usize, head: &VocabularyHead, reports: &[SteerReport]) -> String {
    let mut out = String::new();
    for r in reports {
        for (v, s) in r.mean_shift.iter().enumerate() {
            let _ = writeln!(out, "{},{layer},{id},{},{},{s}", kind.as_str(), r.strength, head.names[v]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn uniform(n: usize) -> Array1<f64> {
        Array1::from_elem(n, 1.0 / n as f64)
    }

    #[test]
    fn no_shift_is_zero() {
        let p = vec![uniform(5), uniform(5)];
        assert_eq!(delta_p(&p, &p).unwrap(), 0.0);
        assert_eq!(steerability(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn moving_mass_between_two_concepts() {
        let p = vec![array![0.5, 0.3, 0.2]; 4];
        let q = vec![array![0.5, 0.0, 0.5]; 4];
        assert!((delta_p(&p, &q).unwrap() - 0.3).abs() < 1e-12);
        assert!((steerability(&p, &q).unwrap() - 0.18).abs() < 1e-12);
    }

    #[test]
    fn full_shift_from_uniform() {
        let n = 500;
        let mut one = Array1::zeros(n);
        one[7] = 1.0;
        let d = delta_p(&[uniform(n)], &[one.clone()]).unwrap();
        let expect = 0.5 * ((1.0 - 1.0 / n as f64) + (n - 1) as f64 / n as f64);
        assert!((d - expect).abs() < 1e-12);
        let n = 5000;
        let mut one = Array1::zeros(n);
        one[0] = 1.0;
        let s = steerability(&[uniform(n)], &[one]).unwrap();
        let expect = (1.0 - 1.0 / n as f64).powi(2) + (n - 1) as f64 / (n as f64).powi(2);
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_metrics_literal_values() {
        let scores: Vec<TargetScore> = [0.05, 0.2, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &s)| TargetScore {
                id: i,
                steerability: s,
                delta_p: 0.0,
                promoted: i,
            })
            .collect();
        let m = layer_metrics(&scores, 0.1, 0.5).unwrap();
        assert_eq!(m.steerable_count, 2);
        assert!((m.steerable_proportion - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.concept_count, 1);
        assert_eq!(m.distinct_concepts, 1);
        assert!(layer_metrics(&[], 0.1, 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SteerConfig::default().validate().is_ok());
        let bad = |f: fn(&mut SteerConfig)| {
            let mut c = SteerConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.strengths.clear()));
        assert!(bad(|c| c.strengths = vec![1.0, 2.0]));
        assert!(bad(|c| c.strengths = vec![0.0, 2.0, 2.0]));
        assert!(bad(|c| c.gamma = 0.0));
        assert!(bad(|c| c.beta = 1.5));
    }

    #[test]
    fn concept_distance_cases() {
        let head = VocabularyHead::new(
            array![[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.0]],
            vec!["a".into(), "b".into(), "c".into()],
            1.0,
        )
        .unwrap();
        let mu = head.mean_embedding();
        let d1 = concept_distance(&head, array![0.0, 1.0, 0.0].view()).unwrap();
        let t1 = &head.embeddings.row(1) - &mu;
        assert!((d1 - f64::from(t1.dot(&t1)).sqrt()).abs() < 1e-6);

        let same = VocabularyHead::new(
            array![[1.0f32, 1.0], [2.0, 2.0]],
            vec!["x".into(), "y".into()],
            1.0,
        )
        .unwrap();
        assert!(concept_distance(&same, array![0.3, 0.7].view()).unwrap().abs() < 1e-7);
    }

    #[test]
    fn histogram_bins_are_log_spaced() {
        let h = LogHistogram::new(&[0.0, 1e-4, 0.01, 0.5, 2.0], 1e-6, 2.0, 8).unwrap();
        assert_eq!(h.underflow, 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        let r1 = h.edges[1] / h.edges[0];
        let r2 = h.edges[8] / h.edges[7];
        assert!((r1 - r2).abs() < 1e-9);
        assert_eq!(*h.counts.last().unwrap(), 2);
    }
}
