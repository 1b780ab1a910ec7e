// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribute-aligned feature selection and zero ablation for group-robust
//! zero-shot classification.
//!
//! ```text
//! F(τ)  = { j : mean_{D_A} f_j > mean_{D_Ā} f_j + τ }
//! F*(λ) = F ∪ { j : max_{m ∈ F} cos(W_dec[j], W_dec[m]) > λ }
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_store::ActivationDataset;
use crate::error::{Error, Result};
use crate::eval::encode_all;
use crate::sae::SaeModel;
use crate::steering::Space;
use crate::toy::{ToyVit, VocabularyHead};

pub const DEFAULT_TAU_POINTS: usize = 25;
pub const DEFAULT_RELAXED_DROP_PP: f64 = 4.0;
pub const TYPOGRAPHIC_LAMBDA: f32 = 0.2;
pub const TYPOGRAPHIC_TAU: f64 = 1.0;

/// How a feature set was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Threshold { tau: f64 },
    Expanded { tau: f64, lambda: f32 },
    Random { seed: u64, size: usize },
    BaseNeuron { tau: f64 },
    /// No ablation.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub layer: usize,
    /// Sorted, unique.
    pub indices: Vec<usize>,
    pub provenance: Provenance,
}

impl FeatureSet {
    pub fn new(layer: usize, mut indices: Vec<usize>, provenance: Provenance) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self {
            layer,
            indices,
            provenance,
        }
    }

    pub fn empty(layer: usize) -> Self {
        Self::new(layer, Vec::new(), Provenance::Baseline)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// Token pooling for the per-sample activation means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every token, CLS included.
    #[default]
    AllTokens,
    Cls,
}

/// Mean activation of every feature (or residual coordinate) over the
/// pooled tokens of a dataset.
pub fn activation_means(space: Space<'_>, dataset: &ActivationDataset, pooling: Pooling) -> Result<Array1<f64>> {
    if dataset.n_samples() == 0 {
        return Err(Error::EmptySelection("empty dataset".into()));
    }
    let t = dataset.n_tokens();
    let values: Array2<f32> = match space {
        Space::Sae(sae) => encode_all(sae, dataset)?,
        Space::Neurons => dataset.rows(crate::activation_store::TokenFilter::All),
    };
    let mut acc = Array1::<f64>::zeros(values.ncols());
    let mut n = 0usize;
    for (r, row) in values.outer_iter().enumerate() {
        if pooling == Pooling::Cls && r % t != 0 {
            continue;
        }
        acc.zip_mut_with(&row, |a, &v| *a += f64::from(v));
        n += 1;
    }
    Ok(acc / n as f64)
}

/// Indices with `mean_a > mean_abar + tau`.
pub fn select_from_means(mean_a: &Array1<f64>, mean_abar: &Array1<f64>, tau: f64) -> Vec<usize> {
    mean_a
        .iter()
        .zip(mean_abar.iter())
        .enumerate()
        .filter(|(_, (&a, &b))| a > b + tau)
        .map(|(j, _)| j)
        .collect()
}

fn check_layers(a: &ActivationDataset, b: &ActivationDataset) -> Result<()> {
    if a.header.layer_id != b.header.layer_id || a.header.sublayer != b.header.sublayer {
        return Err(Error::MetaInconsistent(format!(
            "datasets come from different hooks: layer {} vs {}",
            a.header.layer_id, b.header.layer_id
        )));
    }
    Ok(())
}

/// SAE features more active on `d_a` than on `d_abar` by more than `tau`.
pub fn select_features(
    sae: &SaeModel,
    d_a: &ActivationDataset,
    d_abar: &ActivationDataset,
    tau: f64,
    pooling: Pooling,
) -> Result<FeatureSet> {
    check_layers(d_a, d_abar)?;
    let a = activation_means(Space::Sae(sae), d_a, pooling)?;
    let b = activation_means(Space::Sae(sae), d_abar, pooling)?;
    Ok(FeatureSet::new(
        d_a.layer(),
        select_from_means(&a, &b, tau),
        Provenance::Threshold { tau },
    ))
}

/// The same criterion applied to raw residual coordinates.
pub fn select_neurons(
    d_a: &ActivationDataset,
    d_abar: &ActivationDataset,
    tau: f64,
    pooling: Pooling,
) -> Result<FeatureSet> {
    check_layers(d_a, d_abar)?;
    let a = activation_means(Space::Neurons, d_a, pooling)?;
    let b = activation_means(Space::Neurons, d_abar, pooling)?;
    Ok(FeatureSet::new(
        d_a.layer(),
        select_from_means(&a, &b, tau),
        Provenance::BaseNeuron { tau },
    ))
}

/// Accuracy per `(label, attribute)` group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAccuracy {
    pub overall: f64,
    #[serde(serialize_with = "groups_as_list")]
    pub per_group: BTreeMap<(i64, bool), f64>,
    pub worst: f64,
}

#[derive(Serialize)]
struct GroupEntry {
    label: i64,
    attribute: bool,
    accuracy: f64,
}

fn groups_as_list<S: serde::Serializer>(
    groups: &BTreeMap<(i64, bool), f64>,
    ser: S,
) -> std::result::Result<S::Ok, S::Error> {
    ser.collect_seq(groups.iter().map(|(&(label, attribute), &accuracy)| GroupEntry {
        label,
        attribute,
        accuracy,
    }))
}

impl GroupAccuracy {
    pub fn from_predictions(labels: &[i64], attributes: &[bool], predictions: &[i64]) -> Result<Self> {
        if labels.is_empty() || labels.len() != attributes.len() || labels.len() != predictions.len() {
            return Err(Error::shape("labels, attributes and predictions must align and be non-empty".to_string()));
        }
        let mut tally: BTreeMap<(i64, bool), (usize, usize)> = BTreeMap::new();
        let mut correct = 0usize;
        for ((&y, &a), &p) in labels.iter().zip(attributes).zip(predictions) {
            let e = tally.entry((y, a)).or_default();
            e.1 += 1;
            if y == p {
                e.0 += 1;
                correct += 1;
            }
        }
        let per_group: BTreeMap<_, _> = tally
            .into_iter()
            .map(|(g, (c, n))| (g, c as f64 / n as f64))
            .collect();
        let worst = per_group.values().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            overall: correct as f64 / labels.len() as f64,
            per_group,
            worst,
        })
    }

    /// The group with the lowest accuracy (first in key order on ties).
    pub fn worst_group(&self) -> (i64, bool) {
        *self
            .per_group
            .iter()
            .find(|(_, &v)| v == self.worst)
            .expect("non-empty")
            .0
    }
}

/// Zeroes `set` in `space` for every token of one image. Feature ablation
/// keeps the reconstruction error: `x' = x − Σ_{j∈F} f_j(x)·W_dec[j]`.
pub fn ablate(space: Space<'_>, acts: ArrayView2<'_, f32>, set: &FeatureSet) -> Result<Array2<f32>> {
    let mut out = acts.to_owned();
    if set.is_empty() {
        return Ok(out);
    }
    match space {
        Space::Sae(sae) => {
            let f = sae.encode(acts)?;
            for &j in &set.indices {
                let dir = sae.params.w_dec.row(j);
                for (mut row, &fj) in out.outer_iter_mut().zip(f.column(j).iter()) {
                    if fj != 0.0 {
                        row.scaled_add(-fj, &dir);
                    }
                }
            }
        }
        Space::Neurons => {
            for &j in &set.indices {
                out.column_mut(j).fill(0.0);
            }
        }
    }
    Ok(out)
}

fn check_set(space: Space<'_>, set: &FeatureSet, dataset: &ActivationDataset) -> Result<()> {
    let dim = space.dimension(dataset.d_model());
    if let Some(&bad) = set.indices.iter().find(|&&j| j >= dim) {
        return Err(Error::invalid(format!("index {bad} out of range for dimension {dim}")));
    }
    if set.layer != dataset.layer() {
        return Err(Error::MetaInconsistent(format!(
            "feature set for layer {} applied to layer {}",
            set.layer,
            dataset.layer()
        )));
    }
    Ok(())
}

/// Class predictions after ablating `set` at the dataset's layer. `head`
/// index `c` must correspond to class label `c`.
pub fn predict_with_ablation(
    model: &ToyVit,
    space: Space<'_>,
    set: &FeatureSet,
    dataset: &ActivationDataset,
    head: &VocabularyHead,
) -> Result<Vec<i64>> {
    check_set(space, set, dataset)?;
    (0..dataset.n_samples())
        .into_par_iter()
        .map(|i| {
            let acts = ablate(space, dataset.sample(i), set)?;
            let e = model.forward_from_layer(acts.view(), dataset.layer())?;
            Ok(head.predict(e.view())? as i64)
        })
        .collect()
}

pub fn ablate_and_eval(
    model: &ToyVit,
    space: Space<'_>,
    set: &FeatureSet,
    dataset: &ActivationDataset,
    head: &VocabularyHead,
) -> Result<GroupAccuracy> {
    let preds = predict_with_ablation(model, space, set, dataset, head)?;
    let labels: Vec<i64> = dataset.meta.iter().map(|m| m.class_label).collect();
    let attrs: Vec<bool> = dataset.meta.iter().map(|m| m.attribute_flag).collect();
    GroupAccuracy::from_predictions(&labels, &attrs, &preds)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn tau_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

pub fn default_tau_grid() -> Vec<f64> {
    tau_grid(DEFAULT_TAU_POINTS, 1e-6, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Highest overall accuracy, then highest worst-group accuracy.
    Strict,
    /// Highest worst-group accuracy with every other group within
    /// `max_drop_pp` percentage points of its baseline.
    Relaxed { max_drop_pp: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauCandidate {
    pub tau: f64,
    pub set: FeatureSet,
    pub accuracy: GroupAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauSearch {
    pub baseline: GroupAccuracy,
    /// Every grid point, in grid order.
    pub candidates: Vec<TauCandidate>,
    /// Winner; `None` when no grid point beats the baseline.
    pub chosen: Option<TauCandidate>,
}

impl TauSearch {
    pub fn chosen_set(&self, layer: usize) -> FeatureSet {
        self.chosen
            .as_ref()
            .map_or_else(|| FeatureSet::empty(layer), |c| c.set.clone())
    }

    pub fn chosen_accuracy(&self) -> &GroupAccuracy {
        self.chosen.as_ref().map_or(&self.baseline, |c| &c.accuracy)
    }
}

fn admissible(mode: SelectionMode, baseline: &GroupAccuracy, acc: &GroupAccuracy) -> bool {
    match mode {
        SelectionMode::Strict => true,
        SelectionMode::Relaxed { max_drop_pp } => {
            let worst = baseline.worst_group();
            baseline.per_group.iter().all(|(g, &base)| {
                *g == worst || 100.0 * (base - acc.per_group.get(g).copied().unwrap_or(0.0)) <= max_drop_pp + 1e-9
            })
        }
    }
}

/// Higher is better.
fn score(mode: SelectionMode, acc: &GroupAccuracy) -> (f64, f64) {
    match mode {
        SelectionMode::Strict => (acc.overall, acc.worst),
        SelectionMode::Relaxed { .. } => (acc.worst, acc.overall),
    }
}

/// Grid search over `τ` on a validation set.
///
/// Selection uses `(d_a, d_abar)`, scoring uses `val`. Ties go to the smaller
/// set, then the smaller `τ`; the baseline (no ablation) wins unless some
/// candidate strictly beats it.
#[allow(clippy::too_many_arguments)]
pub fn grid_search_tau(
    model: &ToyVit,
    space: Space<'_>,
    d_a: &ActivationDataset,
    d_abar: &ActivationDataset,
    val: &ActivationDataset,
    head: &VocabularyHead,
    grid: &[f64],
    mode: SelectionMode,
    pooling: Pooling,
) -> Result<TauSearch> {
    check_layers(d_a, d_abar)?;
    check_layers(d_a, val)?;
    let mean_a = activation_means(space, d_a, pooling)?;
    let mean_b = activation_means(space, d_abar, pooling)?;
    let baseline = ablate_and_eval(model, space, &FeatureSet::empty(val.layer()), val, head)?;

    let mut cache: HashMap<Vec<usize>, GroupAccuracy> = HashMap::new();
    let mut candidates = Vec::with_capacity(grid.len());
    for &tau in grid {
        let provenance = match space {
            Space::Sae(_) => Provenance::Threshold { tau },
            Space::Neurons => Provenance::BaseNeuron { tau },
        };
        let set = FeatureSet::new(val.layer(), select_from_means(&mean_a, &mean_b, tau), provenance);
        let accuracy = match cache.get(&set.indices) {
            Some(a) => a.clone(),
            None => {
                let a = ablate_and_eval(model, space, &set, val, head)?;
                cache.insert(set.indices.clone(), a.clone());
                a
            }
        };
        candidates.push(TauCandidate { tau, set, accuracy });
    }

    let mut chosen: Option<&TauCandidate> = None;
    let mut best = score(mode, &baseline);
    let mut best_len = 0usize;
    for c in &candidates {
        if c.set.is_empty() || !admissible(mode, &baseline, &c.accuracy) {
            continue;
        }
        let s = score(mode, &c.accuracy);
        let better = s > best || (s == best && chosen.is_some() && c.set.len() < best_len);
        if better {
            best = s;
            best_len = c.set.len();
            chosen = Some(c);
        }
    }
    let chosen = chosen.cloned();
    Ok(TauSearch {
        baseline,
        candidates,
        chosen,
    })
}

/// Uniform random subset of `0..dimension` of the given size.
pub fn random_control(layer: usize, dimension: usize, size: usize, seed: u64) -> Result<FeatureSet> {
    if size > dimension {
        return Err(Error::invalid(format!(
            "cannot draw {size} indices from {dimension}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, dimension, size).into_vec();
    Ok(FeatureSet::new(layer, idx, Provenance::Random { seed, size }))
}

/// Adds every feature whose decoder row has cosine above `lambda` with some
/// member of `base`.
pub fn expand_feature_set(sae: &SaeModel, base: &FeatureSet, lambda: f32) -> FeatureSet {
    let tau = match base.provenance {
        Provenance::Threshold { tau } | Provenance::BaseNeuron { tau } | Provenance::Expanded { tau, .. } => tau,
        _ => f64::NAN,
    };
    let provenance = Provenance::Expanded { tau, lambda };
    if base.is_empty() {
        return FeatureSet::new(base.layer, Vec::new(), provenance);
    }
    let w = &sae.params.w_dec;
    let norms: Vec<f32> = w.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let members = w.select(Axis(0), &base.indices);
    let dots = w.dot(&members.t());
    let mut out = base.indices.clone();
    for j in 0..w.nrows() {
        if base.contains(j) {
            continue;
        }
        let hit = base.indices.iter().enumerate().any(|(c, &m)| {
            let denom = norms[j] * norms[m];
            denom > 0.0 && dots[[j, c]] / denom > lambda
        });
        if hit {
            out.push(j);
        }
    }
    FeatureSet::new(base.layer, out, provenance)
}

/// Attacked and clean activations of the same images at one layer.
#[derive(Debug, Clone, Copy)]
pub struct PairedSplit<'a> {
    pub clean: &'a ActivationDataset,
    pub attacked: &'a ActivationDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypographicReport {
    pub base: FeatureSet,
    pub expanded: FeatureSet,
    pub attacked_before: f64,
    pub attacked_after: f64,
    pub clean_before: f64,
    pub clean_after: f64,
}

impl TypographicReport {
    /// Percentage points of attacked-split accuracy regained.
    pub fn recovery_pp(&self) -> f64 {
        100.0 * (self.attacked_after - self.attacked_before)
    }

    /// Percentage points of clean-split accuracy lost.
    pub fn clean_drop_pp(&self) -> f64 {
        100.0 * (self.clean_before - self.clean_after)
    }
}

/// Selects features on `select`, expands them by decoder cosine and reports
/// accuracy on `evaluate` before and after ablating the expanded set.
#[allow(clippy::too_many_arguments)]
pub fn typographic_pipeline(
    model: &ToyVit,
    sae: &SaeModel,
    select: PairedSplit<'_>,
    evaluate: PairedSplit<'_>,
    head: &VocabularyHead,
    tau: f64,
    lambda: f32,
    pooling: Pooling,
) -> Result<TypographicReport> {
    let base = select_features(sae, select.attacked, select.clean, tau, pooling)?;
    let expanded = expand_feature_set(sae, &base, lambda);
    let empty = FeatureSet::empty(evaluate.clean.layer());
    let space = Space::Sae(sae);
    let acc = |set: &FeatureSet, ds: &ActivationDataset| ablate_and_eval(model, space, set, ds, head).map(|a| a.overall);
    Ok(TypographicReport {
        attacked_before: acc(&empty, evaluate.attacked)?,
        attacked_after: acc(&expanded, evaluate.attacked)?,
        clean_before: acc(&empty, evaluate.clean)?,
        clean_after: acc(&expanded, evaluate.clean)?,
        base,
        expanded,
    })
}

/// One layer of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub layer: usize,
    pub neuron: GroupAccuracy,
    pub neuron_size: usize,
    pub sae: GroupAccuracy,
    pub sae_size: usize,
}

fn cell(value: f64, baseline: f64) -> String {
    let s = format!("{:.2}", 100.0 * value);
    if value > baseline {
        format!("**{s}**")
    } else {
        s
    }
}

/// Markdown table with a baseline row; values strictly above the baseline
/// are bold.
pub fn table_markdown(title: &str, baseline: &GroupAccuracy, rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "### {title}\n");
    out.push_str("| Layer | Neuron overall | Neuron worst | \\|F\\| neurons | SAE overall | SAE worst | \\|F\\| features |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    let _ = writeln!(
        out,
        "| baseline | {:.2} | {:.2} | 0 | {:.2} | {:.2} | 0 |",
        100.0 * baseline.overall,
        100.0 * baseline.worst,
        100.0 * baseline.overall,
        100.0 * baseline.worst
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.layer,
            cell(r.neuron.overall, baseline.overall),
            cell(r.neuron.worst, baseline.worst),
            r.neuron_size,
            cell(r.sae.overall, baseline.overall),
            cell(r.sae.worst, baseline.worst),
            r.sae_size
        );
    }
    out
}

pub const TABLE_CSV_HEADER: &str =
    "table,layer,neuron_overall,neuron_worst,neuron_size,sae_overall,sae_worst,sae_size";

pub fn table_csv_rows(table: &str, baseline: &GroupAccuracy, rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{table},baseline,{},{},0,{},{},0",
        baseline.overall, baseline.worst, baseline.overall, baseline.worst
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{table},{},{},{},{},{},{},{}",
            r.layer, r.neuron.overall, r.neuron.worst, r.neuron_size, r.sae.overall, r.sae.worst, r.sae_size
        );
    }
    out
}

/// Random-ablation control summary for one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomControl {
    pub layer: usize,
    pub size: usize,
    pub seeds: usize,
    pub worst_mean: f64,
    pub worst_min: f64,
    pub worst_max: f64,
    pub overall_mean: f64,
}

/// Ablates `seeds` random sets of `size` indices and summarises accuracy.
pub fn random_controls(
    model: &ToyVit,
    space: Space<'_>,
    dataset: &ActivationDataset,
    head: &VocabularyHead,
    size: usize,
    seeds: usize,
    seed0: u64,
) -> Result<RandomControl> {
    if seeds == 0 {
        return Err(Error::invalid("at least one seed is required"));
    }
    let dim = space.dimension(dataset.d_model());
    let accs = (0..seeds as u64)
        .map(|s| {
            let set = random_control(dataset.layer(), dim, size, seed0 + s)?;
            ablate_and_eval(model, space, &set, dataset, head)
        })
        .collect::<Result<Vec<_>>>()?;
    let worst: Vec<f64> = accs.iter().map(|a| a.worst).collect();
    Ok(RandomControl {
        layer: dataset.layer(),
        size,
        seeds,
        worst_mean: worst.iter().sum::<f64>() / seeds as f64,
        worst_min: worst.iter().copied().fold(f64::INFINITY, f64::min),
        worst_max: worst.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        overall_mean: accs.iter().map(|a| a.overall).sum::<f64>() / seeds as f64,
    })
}

pub fn random_control_markdown(baseline: &GroupAccuracy, rows: &[RandomControl]) -> String {
    let mut out = String::from("### Random ablation control\n\n");
    out.push_str("| Layer | \\|F\\| | Seeds | Overall (mean) | Worst (mean) | Worst (min) | Worst (max) |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    let _ = writeln!(
        out,
        "| baseline | 0 | - | {:.2} | {:.2} | - | - |",
        100.0 * baseline.overall,
        100.0 * baseline.worst
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.2} | {:.2} |",
            r.layer,
            r.size,
            r.seeds,
            cell(r.overall_mean, baseline.overall),
            cell(r.worst_mean, baseline.worst),
            100.0 * r.worst_min,
            100.0 * r.worst_max
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn threshold_examples() {
        let a = array![0.5, 0.5];
        let b = array![0.1, 0.4];
        assert_eq!(select_from_means(&a, &b, 0.2), vec![0]);
        assert!(select_from_means(&a, &b, 0.5).is_empty());
    }

    #[test]
    fn group_accuracy_worst_is_min() {
        let g = GroupAccuracy::from_predictions(
            &[0, 0, 1, 1, 1],
            &[false, true, false, true, true],
            &[0, 1, 1, 1, 0],
        )
        .unwrap();
        assert_eq!(g.per_group[&(0, true)], 0.0);
        assert_eq!(g.per_group[&(1, true)], 0.5);
        assert_eq!(g.worst, 0.0);
        assert_eq!(g.worst_group(), (0, true));
        assert!((g.overall - 0.6).abs() < 1e-12);
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = default_tau_grid();
        assert_eq!(g.len(), 25);
        assert!((g[0] - 1e-6).abs() < 1e-18);
        assert!((g[24] - 1.0).abs() < 1e-12);
        assert!((g[4] - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn random_control_cases() {
        assert!(random_control(0, 10, 0, 1).unwrap().is_empty());
        assert_eq!(random_control(0, 10, 4, 1).unwrap(), random_control(0, 10, 4, 1).unwrap());
        assert!(random_control(0, 3, 4, 1).is_err());
        assert_eq!(random_control(0, 5, 5, 2).unwrap().indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn expansion_edges() {
        let sae = crate::sae::init_sae(4, 3, crate::sae::Variant::TopK { k: 2 }, 5).unwrap();
        let base = FeatureSet::new(0, vec![1, 7], Provenance::Threshold { tau: 1.0 });
        assert_eq!(expand_feature_set(&sae, &base, 1.0).indices, base.indices);
        assert_eq!(expand_feature_set(&sae, &base, -1.0).len(), 12);
        assert!(expand_feature_set(&sae, &FeatureSet::empty(0), -1.0).is_empty());
    }

    #[test]
    fn relaxed_admissibility_uses_non_worst_groups() {
        let base = GroupAccuracy::from_predictions(&[0, 0, 1, 1], &[false, true, false, true], &[0, 1, 1, 1]).unwrap();
        let mode = SelectionMode::Relaxed { max_drop_pp: 4.0 };
        // worst group (0, true) may change freely, others may not drop
        let same_others = GroupAccuracy::from_predictions(&[0, 0, 1, 1], &[false, true, false, true], &[0, 0, 1, 1]).unwrap();
        assert!(admissible(mode, &base, &same_others));
        let drop = GroupAccuracy::from_predictions(&[0, 0, 1, 1], &[false, true, false, true], &[0, 0, 0, 1]).unwrap();
        assert!(!admissible(mode, &base, &drop));
    }

    #[test]
    fn markdown_bolds_strict_improvements() {
        let base = GroupAccuracy::from_predictions(&[0, 1], &[false, true], &[0, 0]).unwrap();
        let better = GroupAccuracy::from_predictions(&[0, 1], &[false, true], &[0, 1]).unwrap();
        let md = table_markdown(
            "t",
            &base,
            &[TableRow {
                layer: 2,
                neuron: base.clone(),
                neuron_size: 1,
                sae: better,
                sae_size: 3,
            }],
        );
        assert!(md.contains("| baseline |"));
        assert!(md.contains("| 2 | 50.00 | 0.00 | 1 | **100.00** | **100.00** | 3 |"), "{md}");
    }
}
