// SPDX-License-Identifier: MIT OR Apache-2.0

//! The subcommands. Each reads its inputs from the run directory, writes its
//! outputs next to them and finishes with a manifest.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use anyhow::Context;
use ndarray::Array2;
use serde::Serialize;

use sae_lab::activation_store::{decode_shard, encode_shard, ActivationDataset, Split, TokenFilter};
use sae_lab::eval::{ce_suite, cosine_metrics, encode_all, explained_variance, l0_stats, CeReport, CosineReport, EvalReport};
use sae_lab::sae::checkpoint::{decode_checkpoint, encode_checkpoint};
use sae_lab::sae::{train, IdentityMap, Reconstruct, SaeModel, TrainConfig, Variant, ZeroMap};
use sae_lab::steering::{
    asymptotic_sweep, layer_metrics, scan, shift_csv_rows, sweep_csv_rows, LayerMetrics, LogHistogram, Space,
    TargetScore, SWEEP_CSV_HEADER,
};
use sae_lab::suppression::{
    ablate_and_eval, grid_search_tau, random_control_markdown, random_controls, table_csv_rows, table_markdown,
    tau_grid, typographic_pipeline, FeatureSet, GroupAccuracy, PairedSplit, RandomControl, SelectionMode, TableRow,
    TauSearch, TypographicReport, TABLE_CSV_HEADER,
};
use sae_lab::toy::data::typographic_attack;
use sae_lab::toy::head::{decode_head, encode_head};
use sae_lab::toy::{SynthVisionSpec, ToyVit, ToyVitConfig, ToyWorld, VocabularyHead};

use crate::config::{config_error, RunConfig, SuppressTask};
use crate::manifest::Recorder;
use crate::{Fixture, VariantArg};

/// A required input is missing or unusable; exit code 3.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

// ---------------------------------------------------------------------------
// Run-directory layout
// ---------------------------------------------------------------------------

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    fn shard(&self, layer: usize, split: Split, attacked: bool) -> PathBuf {
        let suffix = if attacked { "_attacked" } else { "" };
        self.root
            .join("data")
            .join(format!("layer{layer}_{}{suffix}.shard", split.as_str()))
    }

    fn head(&self) -> PathBuf {
        self.root.join("data").join("head.bin")
    }

    fn world(&self) -> PathBuf {
        self.root.join("data").join("world.json")
    }

    fn checkpoint(&self, variant: VariantArg, layer: usize) -> PathBuf {
        self.root.join("sae").join(format!("{}_layer{layer}.ckpt", variant.name()))
    }

    fn train_log(&self, variant: VariantArg, layer: usize) -> PathBuf {
        self.root.join("sae").join(format!("{}_layer{layer}_train.csv", variant.name()))
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn read_input(path: &Path, rec: &mut Recorder) -> anyhow::Result<Vec<u8>> {
    if !path.exists() {
        return Err(DataError(format!("missing input {}", path.display())).into());
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    rec.input(path);
    Ok(bytes)
}

fn load_shard(layout: &Layout, layer: usize, split: Split, attacked: bool, rec: &mut Recorder) -> anyhow::Result<ActivationDataset> {
    let path = layout.shard(layer, split, attacked);
    let bytes = read_input(&path, rec)?;
    decode_shard(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn load_head(layout: &Layout, rec: &mut Recorder) -> anyhow::Result<VocabularyHead> {
    let path = layout.head();
    let bytes = read_input(&path, rec)?;
    decode_head(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn load_class_head(layout: &Layout, cfg: &RunConfig, rec: &mut Recorder) -> anyhow::Result<VocabularyHead> {
    let n = cfg.data.vision.n_classes;
    Ok(load_head(layout, rec)?.restrict(&(0..n).collect::<Vec<_>>())?)
}

fn load_checkpoint(layout: &Layout, variant: VariantArg, layer: usize, rec: &mut Recorder) -> anyhow::Result<SaeModel> {
    let path = layout.checkpoint(variant, layer);
    if !path.exists() {
        return Err(DataError(format!(
            "no {} checkpoint for layer {layer}: expected {} (run train-sae --variant {} first)",
            variant.name(),
            path.display(),
            variant.name()
        ))
        .into());
    }
    let bytes = read_input(&path, rec)?;
    decode_checkpoint(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn model(cfg: &RunConfig) -> anyhow::Result<ToyVit> {
    Ok(ToyVit::new(cfg.model.clone())?)
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn finish(rec: Recorder, cfg: &RunConfig) -> anyhow::Result<()> {
    let path = rec.finish(cfg)?;
    println!("manifest: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WorldInfo<'a> {
    model: &'a ToyVitConfig,
    /// With the calibrated attribute amplitude filled in.
    vision: &'a SynthVisionSpec,
    vocab_size: usize,
    n_tokens: usize,
    typographic: bool,
}

/// Offset applied to the sample ids of attacked copies mixed into the
/// training shards.
const ATTACKED_ID_OFFSET: u64 = 1 << 32;

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let layout = Layout::new(cfg);
    let mut rec = Recorder::new(&layout.root, "gen-data");
    let world = ToyWorld::build(cfg.model.clone(), cfg.data.vision.clone(), cfg.data.vocab_size)?;
    let (spec, bank, mcfg) = (&world.spec, &world.data.bank, &world.model.config);

    for split in SPLITS {
        let clean = world.data.split(split);
        let mut samples = clean.to_vec();
        if cfg.data.typographic && split == Split::Train {
            let half = clean.len() / 2;
            samples.extend(typographic_attack(&clean[..half], spec, bank, mcfg).into_iter().map(|mut s| {
                s.meta.sample_id += ATTACKED_ID_OFFSET;
                s
            }));
        }
        for ds in world.activations(&samples, cfg.data.sublayer)? {
            rec.write(&layout.shard(ds.layer(), split, false), encode_shard(&ds)?)?;
        }
        if cfg.data.typographic && split != Split::Train {
            let attacked = typographic_attack(clean, spec, bank, mcfg);
            for ds in world.activations(&attacked, cfg.data.sublayer)? {
                rec.write(&layout.shard(ds.layer(), split, true), encode_shard(&ds)?)?;
            }
        }
    }
    rec.write(&layout.head(), encode_head(&world.head)?)?;
    let info = WorldInfo {
        model: mcfg,
        vision: spec,
        vocab_size: world.head.len(),
        n_tokens: mcfg.n_tokens(),
        typographic: cfg.data.typographic,
    };
    rec.write(&layout.world(), json(&info)?)?;
    println!(
        "gen-data: {} layers x {} splits, {} train / {} val / {} test images, attribute amplitude {:.4}",
        world.model.n_layers(),
        SPLITS.len(),
        world.data.train.len(),
        world.data.val.len(),
        world.data.test.len(),
        spec.attribute_amplitude
    );
    finish(rec, cfg)
}

// ---------------------------------------------------------------------------
// train-sae
// ---------------------------------------------------------------------------

fn train_config(cfg: &RunConfig, variant: VariantArg) -> TrainConfig {
    let variant = match variant {
        VariantArg::Vanilla => Variant::Vanilla {
            l1_coeff: cfg.sae.vanilla_l1_coeff,
        },
        VariantArg::Topk => Variant::TopK { k: cfg.sae.topk_k },
    };
    TrainConfig {
        variant,
        ..cfg.train.clone()
    }
}

/// Mean number of strictly positive features per token.
fn mean_l0(sae: &SaeModel, ds: &ActivationDataset) -> anyhow::Result<f64> {
    let f = encode_all(sae, ds)?;
    let active = f.iter().filter(|&&v| v > 0.0).count();
    Ok(active as f64 / f.nrows().max(1) as f64)
}

fn max_l0(f: &Array2<f32>) -> usize {
    f.outer_iter()
        .map(|r| r.iter().filter(|&&v| v > 0.0).count())
        .max()
        .unwrap_or(0)
}

pub fn train_sae(cfg: &RunConfig, variant: VariantArg, resume: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = resume {
        return Err(config_error(format!(
            "resuming from a checkpoint is not supported (got --resume {}); rerun train-sae without it",
            path.display()
        )));
    }
    let layout = Layout::new(cfg);
    let mut rec = Recorder::new(&layout.root, &format!("train-sae-{}", variant.name()));
    let tc = train_config(cfg, variant);
    tc.validate().map_err(|e| config_error(format!("train: {e}")))?;
    for &layer in &cfg.sae.layers {
        let ds = load_shard(&layout, layer, Split::Train, false, &mut rec)?;
        let (sae, log) = train(&ds, &tc).with_context(|| format!("training layer {layer}"))?;
        rec.write(&layout.checkpoint(variant, layer), encode_checkpoint(&sae))?;
        rec.write(&layout.train_log(variant, layer), log.to_csv())?;
        let ev = explained_variance(&ds, &sae, TokenFilter::All)?;
        println!(
            "train-sae {} layer {layer}: {} steps, final EV {ev:.4}, mean L0 {:.2}",
            variant.name(),
            log.records.len(),
            mean_l0(&sae, &ds)?
        );
    }
    finish(rec, cfg)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FixtureReport {
    fixture: &'static str,
    layer: usize,
    explained_variance: f64,
    cosine: CosineReport,
    ce: CeReport,
}

impl FixtureReport {
    fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "layer,{}", self.layer);
        let _ = writeln!(out, "explained_variance,{}", self.explained_variance);
        let _ = writeln!(out, "cos_sim,{}", self.cosine.token_cos);
        let _ = writeln!(out, "pooled_cos_sim,{}", self.cosine.pooled_cos);
        let _ = writeln!(out, "ce_clean,{}", self.ce.ce_clean);
        let _ = writeln!(out, "ce_recon,{}", self.ce.ce_recon);
        let _ = writeln!(out, "ce_zero_abl,{}", self.ce.ce_zero_abl);
        let rec = self.ce.ce_recovered_pct.map_or_else(|| "undefined".into(), |v| v.to_string());
        let _ = writeln!(out, "ce_recovered_pct,{rec}");
        out
    }
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(config_error(format!("unknown split {other:?}; expected train, val or test"))),
    }
}

fn ce_text(ce: &CeReport) -> String {
    ce.ce_recovered_pct
        .map_or_else(|| "undefined".into(), |v| format!("{v:.2}"))
}

/// Structural checks on a trained SAE; one `(passed, line)` per check.
fn self_checks(sae: &SaeModel, ds: &ActivationDataset, report: &EvalReport) -> anyhow::Result<Vec<(bool, String)>> {
    let mut out = Vec::new();
    let norm_err = sae.max_decoder_norm_error();
    out.push((norm_err <= 1e-4, format!("decoder rows unit norm (max error {norm_err:.2e})")));
    if let Variant::TopK { k } = sae.variant {
        let worst = max_l0(&encode_all(sae, ds)?);
        out.push((worst <= k, format!("L0 <= {k} (max per token {worst})")));
    }
    out.push((
        report.explained_variance.is_finite(),
        format!("explained variance finite ({:.4})", report.explained_variance),
    ));
    let ce_ok = report
        .ce
        .as_ref()
        .is_some_and(|c| c.ce_clean.is_finite() && c.ce_recon.is_finite() && c.ce_zero_abl.is_finite());
    out.push((ce_ok, "cross-entropy values finite".into()));
    Ok(out)
}

pub fn eval(cfg: &RunConfig, variant: VariantArg, fixture: Option<Fixture>, self_check: bool, split: &str) -> anyhow::Result<()> {
    let split = parse_split(split)?;
    if self_check && fixture.is_some() {
        return Err(config_error("--self-check applies to trained checkpoints, not fixtures"));
    }
    let layout = Layout::new(cfg);
    let name = match fixture {
        Some(Fixture::Identity) => "identity",
        Some(Fixture::Zero) => "zero",
        None => variant.name(),
    };
    let mut rec = Recorder::new(&layout.root, &format!("eval-{name}"));
    let head = load_class_head(&layout, cfg, &mut rec)?;
    let model = model(cfg)?;
    let dir = layout.dir("eval");
    let mut failures = 0usize;
    for &layer in &cfg.sae.layers {
        let ds = load_shard(&layout, layer, split, false, &mut rec)?;
        let stem = dir.join(format!("{name}_layer{layer}_{}", split.as_str()));
        match fixture {
            Some(f) => {
                let d = ds.d_model();
                let map: Box<dyn Reconstruct> = match f {
                    Fixture::Identity => Box::new(IdentityMap(d)),
                    Fixture::Zero => Box::new(ZeroMap(d)),
                };
                let report = FixtureReport {
                    fixture: name,
                    layer,
                    explained_variance: explained_variance(&ds, map.as_ref(), TokenFilter::All)?,
                    cosine: cosine_metrics(&ds, map.as_ref())?,
                    ce: ce_suite(&model, map.as_ref(), &ds, &head)?,
                };
                rec.write(&stem.with_extension("csv"), report.to_csv())?;
                rec.write(&stem.with_extension("json"), json(&report)?)?;
                println!(
                    "eval {name} layer {layer}: EV {:.4}, CE recovered {}",
                    report.explained_variance,
                    ce_text(&report.ce)
                );
            }
            None => {
                let sae = load_checkpoint(&layout, variant, layer, &mut rec)?;
                let report = EvalReport {
                    layer,
                    explained_variance: explained_variance(&ds, &sae, TokenFilter::All)?,
                    l0: l0_stats(&ds, &sae, 0.0)?,
                    cosine: cosine_metrics(&ds, &sae)?,
                    ce: Some(ce_suite(&model, &sae, &ds, &head)?),
                };
                rec.write(&stem.with_extension("csv"), report.to_csv())?;
                rec.write(&stem.with_extension("json"), json(&report)?)?;
                let grid = dir.join(format!("{name}_layer{layer}_{}_per_patch.csv", split.as_str()));
                rec.write(&grid, report.l0.per_patch_csv())?;
                println!(
                    "eval {name} layer {layer}: EV {:.4}, avg image L0 {:.1}, CLS L0 {:.1}, cos {:.4}, CE recovered {}",
                    report.explained_variance,
                    report.l0.avg_img_l0,
                    report.l0.avg_cls_l0,
                    report.cosine.token_cos,
                    report.ce.as_ref().map_or_else(|| "-".into(), ce_text)
                );
                if self_check {
                    for (ok, line) in self_checks(&sae, &ds, &report)? {
                        println!("  self-check {}: {line}", if ok { "PASS" } else { "FAIL" });
                        failures += usize::from(!ok);
                    }
                }
            }
        }
    }
    finish(rec, cfg)?;
    if failures > 0 {
        anyhow::bail!("{failures} self-check(s) failed");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SteerSummary {
    layer: usize,
    n_images: usize,
    scan_strength: f32,
    gamma: f64,
    beta: f64,
    features_scanned: usize,
    features: LayerMetrics,
    neurons: LayerMetrics,
}

fn feature_ids(cfg: &RunConfig, d_sae: usize) -> anyhow::Result<Vec<usize>> {
    match &cfg.steer.features {
        Some(ids) => {
            if let Some(bad) = ids.iter().find(|&&j| j >= d_sae) {
                return Err(config_error(format!(
                    "steer.features names feature {bad} but the SAE has {d_sae} features"
                )));
            }
            if ids.is_empty() {
                return Err(config_error("steer.features must not be empty"));
            }
            Ok(ids.clone())
        }
        None => Ok((0..cfg.steer.feature_subset.unwrap_or(d_sae).min(d_sae)).collect()),
    }
}

fn scores_csv(out: &mut String, kind: &str, layer: usize, head: &VocabularyHead, scores: &[TargetScore]) {
    for s in scores {
        let _ = writeln!(
            out,
            "{kind},{layer},{},{},{},{}",
            s.id, s.steerability, s.delta_p, head.names[s.promoted]
        );
    }
}

fn most_steerable(scores: &[TargetScore], n: usize) -> Vec<usize> {
    let mut order: Vec<&TargetScore> = scores.iter().collect();
    order.sort_by(|a, b| b.steerability.total_cmp(&a.steerability).then(a.id.cmp(&b.id)));
    order.iter().take(n).map(|s| s.id).collect()
}

pub fn steer(cfg: &RunConfig, variant: VariantArg) -> anyhow::Result<()> {
    let layout = Layout::new(cfg);
    let mut rec = Recorder::new(&layout.root, &format!("steer-{}", variant.name()));
    let head = load_head(&layout, &mut rec)?;
    let model = model(cfg)?;
    let dir = layout.dir("steer");
    let st = &cfg.steer;
    let mut summaries = Vec::new();
    let mut score_rows = String::from("target_kind,layer,id,steerability,delta_p,promoted_concept\n");
    for &layer in &cfg.sae.layers {
        let ds = load_shard(&layout, layer, Split::Val, false, &mut rec)?;
        let sae = load_checkpoint(&layout, variant, layer, &mut rec)?;
        let mut sweep = st.sweep.clone();
        if sweep.sample_ids.is_none() {
            if let Some(n) = st.n_images {
                sweep.sample_ids = Some(ds.meta.iter().take(n).map(|m| m.sample_id).collect());
            }
        }
        let images = sweep.images(&ds)?;
        let ids = feature_ids(cfg, sae.d_sae())?;
        let neurons: Vec<usize> = (0..ds.d_model()).collect();
        let f_scores = scan(&model, &head, Space::Sae(&sae), &ds, &ids, st.scan_strength, &images)?;
        let n_scores = scan(&model, &head, Space::Neurons, &ds, &neurons, st.scan_strength, &images)?;
        scores_csv(&mut score_rows, "feature", layer, &head, &f_scores);
        scores_csv(&mut score_rows, "neuron", layer, &head, &n_scores);

        for (kind, scores) in [("features", &f_scores), ("neurons", &n_scores)] {
            let values: Vec<f64> = scores.iter().map(|s| s.steerability).collect();
            let hist = LogHistogram::new(&values, st.histogram_lo, st.histogram_hi, st.histogram_bins)
                .map_err(|e| config_error(format!("steer histogram: {e}")))?;
            rec.write(
                &dir.join(format!("{}_layer{layer}_hist_{kind}.csv", variant.name())),
                hist.to_csv(),
            )?;
        }

        let mut sweep_rows = format!("{SWEEP_CSV_HEADER}\n");
        let mut shift_rows = String::from("target_kind,layer,id,strength,concept,shift\n");
        for (space, scores) in [(Space::Sae(&sae), &f_scores), (Space::Neurons, &n_scores)] {
            for id in most_steerable(scores, st.sweep_top) {
                let reports = asymptotic_sweep(&model, &head, space, &ds, id, &sweep)?;
                sweep_rows.push_str(&sweep_csv_rows(space.kind(), layer, id, &reports));
                shift_rows.push_str(&shift_csv_rows(space.kind(), layer, id, &head, &reports));
            }
        }
        rec.write(&dir.join(format!("{}_layer{layer}_sweep.csv", variant.name())), sweep_rows)?;
        rec.write(&dir.join(format!("{}_layer{layer}_shifts.csv", variant.name())), shift_rows)?;

        let summary = SteerSummary {
            layer,
            n_images: images.len(),
            scan_strength: st.scan_strength,
            gamma: sweep.gamma,
            beta: sweep.beta,
            features_scanned: ids.len(),
            features: layer_metrics(&f_scores, sweep.gamma, sweep.beta)?,
            neurons: layer_metrics(&n_scores, sweep.gamma, sweep.beta)?,
        };
        println!(
            "steer {} layer {layer}: features avg S {:.4}, steerable {:.1}%, distinct concepts {}; \
             neurons avg S {:.4}, steerable {:.1}%, distinct concepts {}",
            variant.name(),
            summary.features.average,
            100.0 * summary.features.steerable_proportion,
            summary.features.distinct_concepts,
            summary.neurons.average,
            100.0 * summary.neurons.steerable_proportion,
            summary.neurons.distinct_concepts
        );
        summaries.push(summary);
    }
    rec.write(&dir.join(format!("{}_scores.csv", variant.name())), score_rows)?;
    let mut metrics = String::from(
        "layer,target_kind,average,steerable_count,steerable_proportion,concept_count,distinct_concepts\n",
    );
    for s in &summaries {
        for (kind, m) in [("feature", &s.features), ("neuron", &s.neurons)] {
            let _ = writeln!(
                metrics,
                "{},{kind},{},{},{},{},{}",
                s.layer, m.average, m.steerable_count, m.steerable_proportion, m.concept_count, m.distinct_concepts
            );
        }
    }
    rec.write(&dir.join(format!("{}_layer_metrics.csv", variant.name())), metrics)?;
    rec.write(&dir.join(format!("{}_layer_metrics.json", variant.name())), json(&summaries)?)?;
    finish(rec, cfg)
}

// ---------------------------------------------------------------------------
// suppress
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SearchRecord {
    layer: usize,
    mode: SelectionMode,
    sae: TauSearch,
    neuron: TauSearch,
}

#[derive(Serialize)]
struct SuppressSummary {
    baseline: GroupAccuracy,
    strict: Vec<TableRow>,
    relaxed: Vec<TableRow>,
    random_sae: Vec<RandomControl>,
    random_neuron: Vec<RandomControl>,
}

const TAU_LO: f64 = 1e-6;
const TAU_HI: f64 = 1.0;

fn random_control_csv(out: &mut String, space: &str, rows: &[RandomControl]) {
    for r in rows {
        let _ = writeln!(
            out,
            "{space},{},{},{},{},{},{},{}",
            r.layer, r.size, r.seeds, r.overall_mean, r.worst_mean, r.worst_min, r.worst_max
        );
    }
}

pub fn suppress(cfg: &RunConfig, variant: VariantArg) -> anyhow::Result<()> {
    match cfg.suppress.task {
        SuppressTask::Spurious => suppress_spurious(cfg, variant),
        SuppressTask::Typographic => suppress_typographic(cfg, variant),
    }
}

fn suppress_spurious(cfg: &RunConfig, variant: VariantArg) -> anyhow::Result<()> {
    let layout = Layout::new(cfg);
    let mut rec = Recorder::new(&layout.root, &format!("suppress-{}", variant.name()));
    let head = load_class_head(&layout, cfg, &mut rec)?;
    let model = model(cfg)?;
    let sp = &cfg.suppress;
    let grid = tau_grid(sp.tau_points, TAU_LO, TAU_HI);
    let modes = [
        SelectionMode::Strict,
        SelectionMode::Relaxed {
            max_drop_pp: sp.relaxed_max_drop_pp,
        },
    ];

    // Checkpoints first, so a missing one fails before any work is done.
    let saes = cfg
        .sae
        .layers
        .iter()
        .map(|&l| load_checkpoint(&layout, variant, l, &mut rec))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut baseline = None;
    let mut tables: [Vec<TableRow>; 2] = [Vec::new(), Vec::new()];
    let (mut random_sae, mut random_neuron) = (Vec::new(), Vec::new());
    let mut searches = Vec::new();
    for (&layer, sae) in cfg.sae.layers.iter().zip(&saes) {
        let train = load_shard(&layout, layer, Split::Train, false, &mut rec)?;
        let val = load_shard(&layout, layer, Split::Val, false, &mut rec)?;
        let test = load_shard(&layout, layer, Split::Test, false, &mut rec)?;
        let d_a = train.subset(|m| m.attribute_flag)?;
        let d_abar = train.subset(|m| !m.attribute_flag)?;
        if d_a.n_samples() == 0 || d_abar.n_samples() == 0 {
            return Err(DataError(format!(
                "layer {layer} training shard needs samples with and without the attribute"
            ))
            .into());
        }
        let empty = FeatureSet::empty(layer);
        let base = ablate_and_eval(&model, Space::Neurons, &empty, &test, &head)?;
        for (table, &mode) in tables.iter_mut().zip(&modes) {
            let search = |space| grid_search_tau(&model, space, &d_a, &d_abar, &val, &head, &grid, mode, sp.pooling);
            let sae_search = search(Space::Sae(sae))?;
            let neuron_search = search(Space::Neurons)?;
            let sae_set = sae_search.chosen_set(layer);
            let neuron_set = neuron_search.chosen_set(layer);
            table.push(TableRow {
                layer,
                neuron: ablate_and_eval(&model, Space::Neurons, &neuron_set, &test, &head)?,
                neuron_size: neuron_set.len(),
                sae: ablate_and_eval(&model, Space::Sae(sae), &sae_set, &test, &head)?,
                sae_size: sae_set.len(),
            });
            if mode == SelectionMode::Strict {
                let seed0 = cfg.seed.wrapping_add(1000);
                random_sae.push(random_controls(
                    &model,
                    Space::Sae(sae),
                    &test,
                    &head,
                    sae_set.len(),
                    sp.random_seeds,
                    seed0,
                )?);
                random_neuron.push(random_controls(
                    &model,
                    Space::Neurons,
                    &test,
                    &head,
                    neuron_set.len(),
                    sp.random_seeds,
                    seed0,
                )?);
            }
            searches.push(SearchRecord {
                layer,
                mode,
                sae: sae_search,
                neuron: neuron_search,
            });
        }
        println!(
            "suppress {} layer {layer}: strict |F| = {}, relaxed |F| = {}",
            variant.name(),
            tables[0].last().map_or(0, |r| r.sae_size),
            tables[1].last().map_or(0, |r| r.sae_size)
        );
        baseline.get_or_insert(base);
    }
    let baseline = baseline.expect("sae.layers is non-empty");
    let [strict, relaxed] = tables;

    let dir = layout.dir("suppress");
    let name = variant.name();
    let mut csv = format!("{TABLE_CSV_HEADER}\n");
    csv.push_str(&table_csv_rows("strict", &baseline, &strict));
    csv.push_str(&table_csv_rows("relaxed", &baseline, &relaxed));
    rec.write(&dir.join(format!("{name}_table.csv")), csv)?;
    let mut rc = String::from("space,layer,size,seeds,overall_mean,worst_mean,worst_min,worst_max\n");
    random_control_csv(&mut rc, "sae", &random_sae);
    random_control_csv(&mut rc, "neuron", &random_neuron);
    rec.write(&dir.join(format!("{name}_random_controls.csv")), rc)?;
    rec.write(&dir.join(format!("{name}_searches.json")), json(&searches)?)?;

    if cfg.report.markdown {
        let title = &cfg.report.title;
        let mut md = format!("# {title}\n\n");
        md.push_str(&table_markdown(&format!("{title}: strict selection"), &baseline, &strict));
        md.push('\n');
        md.push_str(&table_markdown(
            &format!(
                "{title}: relaxed selection (other groups within {} pp)",
                sp.relaxed_max_drop_pp
            ),
            &baseline,
            &relaxed,
        ));
        md.push_str("\n#### SAE features\n\n");
        md.push_str(&random_control_markdown(&baseline, &random_sae));
        md.push_str("\n#### Base neurons\n\n");
        md.push_str(&random_control_markdown(&baseline, &random_neuron));
        rec.write(&dir.join(format!("{name}_tables.md")), &md)?;
        print!("{md}");
    }
    let summary = SuppressSummary {
        baseline,
        strict,
        relaxed,
        random_sae,
        random_neuron,
    };
    rec.write(&dir.join(format!("{name}_summary.json")), json(&summary)?)?;
    finish(rec, cfg)
}

#[derive(Serialize)]
struct TypographicRow {
    layer: usize,
    tau: f64,
    lambda: f32,
    report: TypographicReport,
}

fn suppress_typographic(cfg: &RunConfig, variant: VariantArg) -> anyhow::Result<()> {
    let layout = Layout::new(cfg);
    let mut rec = Recorder::new(&layout.root, &format!("suppress-typographic-{}", variant.name()));
    let head = load_class_head(&layout, cfg, &mut rec)?;
    let model = model(cfg)?;
    let sp = &cfg.suppress;
    let saes = cfg
        .sae
        .layers
        .iter()
        .map(|&l| load_checkpoint(&layout, variant, l, &mut rec))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (&layer, sae) in cfg.sae.layers.iter().zip(&saes) {
        let mut shard = |split, attacked| load_shard(&layout, layer, split, attacked, &mut rec);
        let (val_clean, val_attacked) = (shard(Split::Val, false)?, shard(Split::Val, true)?);
        let (test_clean, test_attacked) = (shard(Split::Test, false)?, shard(Split::Test, true)?);
        let report = typographic_pipeline(
            &model,
            sae,
            PairedSplit {
                clean: &val_clean,
                attacked: &val_attacked,
            },
            PairedSplit {
                clean: &test_clean,
                attacked: &test_attacked,
            },
            &head,
            sp.typographic_tau,
            sp.typographic_lambda,
            sp.typographic_pooling,
        )?;
        println!(
            "suppress typographic {} layer {layer}: |F| = {} -> {}, attacked {:.2}% -> {:.2}%, clean {:.2}% -> {:.2}%",
            variant.name(),
            report.base.len(),
            report.expanded.len(),
            100.0 * report.attacked_before,
            100.0 * report.attacked_after,
            100.0 * report.clean_before,
            100.0 * report.clean_after
        );
        rows.push(TypographicRow {
            layer,
            tau: sp.typographic_tau,
            lambda: sp.typographic_lambda,
            report,
        });
    }

    let dir = layout.dir("suppress");
    let name = variant.name();
    let mut csv = String::from(
        "layer,tau,lambda,base_size,expanded_size,attacked_before,attacked_after,clean_before,clean_after,recovery_pp,clean_drop_pp\n",
    );
    let mut md = format!(
        "# {}: typographic attack\n\n| Layer | \\|F\\| | \\|F*\\| | Attacked before | Attacked after | Clean before | Clean after |\n|---|---|---|---|---|---|---|\n",
        cfg.report.title
    );
    for r in &rows {
        let t = &r.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.layer,
            r.tau,
            r.lambda,
            t.base.len(),
            t.expanded.len(),
            t.attacked_before,
            t.attacked_after,
            t.clean_before,
            t.clean_after,
            t.recovery_pp(),
            t.clean_drop_pp()
        );
        let bold = |after: f64, before: f64| {
            let s = format!("{:.2}", 100.0 * after);
            if after > before {
                format!("**{s}**")
            } else {
                s
            }
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.2} | {} | {:.2} | {} |",
            r.layer,
            t.base.len(),
            t.expanded.len(),
            100.0 * t.attacked_before,
            bold(t.attacked_after, t.attacked_before),
            100.0 * t.clean_before,
            bold(t.clean_after, t.clean_before)
        );
    }
    rec.write(&dir.join(format!("{name}_typographic.csv")), csv)?;
    rec.write(&dir.join(format!("{name}_typographic.json")), json(&rows)?)?;
    if cfg.report.markdown {
        rec.write(&dir.join(format!("{name}_typographic.md")), &md)?;
        print!("{md}");
    }
    finish(rec, cfg)
}
