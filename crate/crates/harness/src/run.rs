//! Experiment orchestration: resolve the configured data source, train the
//! requested algorithm next to its same-seed source-only baseline, and emit
//! result rows keyed by the config fingerprint.

use std::path::Path;

use shiftbench_core::adversarial::{
    adda_adapt, adda_pretrain, adda_test, dann_train, AddaConfig, AddaState, DannConfig,
};
use shiftbench_core::autodial::{autodial_classifier, autodial_train, AutodialConfig};
use shiftbench_core::loss::accuracy;
use shiftbench_core::mkmmd::{dan_train, DanConfig};
use shiftbench_core::net::{forward, Mode, NetworkSpec, Parameters};
use shiftbench_core::optim::OptimizerState;
use shiftbench_core::tensor::Tensor;
use shiftbench_core::train::{
    eval_accuracy, mlp_classifier, source_only_train, stream_rng, LabeledSet, Stream, TrainLog,
};
use shiftbench_cueint::{rgbd_pipeline, Cue, CueArtifacts, SvmConfig};
use shiftbench_depthcolor::{colorize, ColorImage, DepthImage, Method, SnPlusConfig};

use crate::config::{Algorithm, DataSource, ExperimentConfig, Modality};
use crate::error::{HarnessError, Result};
use crate::manifest::{apply_filters, ingest, DatasetManifest, ManifestRecord, SplitPolicy};
use crate::results::ResultTable;
use crate::synth::synth_shift_dataset;

/// Null-pixel threshold applied before every split: a depth image with
/// strictly more than this fraction of null pixels is dropped.
pub const NULL_THRESHOLD: f64 = 0.75;

/// Side of the square pooling grid used to turn images into vectors.
const POOL: usize = 8;

/// Resolved data for one single-cue experiment. Target labels are carried
/// for evaluation only; adaptation never reads them.
pub struct PreparedData {
    pub source: LabeledSet,
    pub adapt: LabeledSet,
    pub test: LabeledSet,
    /// Median object distance (mm) per test row, when depth stats exist.
    pub test_distances: Option<Vec<f64>>,
    pub classes: usize,
}

/// A trained model ready for evaluation.
pub enum TrainedModel {
    Classifier { spec: NetworkSpec, params: Parameters },
    Adda(Box<AddaState>),
}

impl TrainedModel {
    pub fn target_accuracy(&mut self, set: &LabeledSet) -> Result<f64> {
        match self {
            TrainedModel::Classifier { spec, params } => {
                Ok(eval_accuracy(spec, params, set, Mode::EvalTarget)?)
            }
            TrainedModel::Adda(state) => Ok(adda_test(state, set)?),
        }
    }

    pub fn source_accuracy(&mut self, set: &LabeledSet) -> Result<f64> {
        match self {
            TrainedModel::Classifier { spec, params } => {
                Ok(eval_accuracy(spec, params, set, Mode::EvalSource)?)
            }
            TrainedModel::Adda(state) => {
                let (mspec, mparams) = (&state.source_map.0, &mut state.source_map.1);
                let feats = forward(mspec, mparams, &set.x, Mode::EvalSource)?.output().clone();
                let (cspec, cparams) = (&state.classifier.0, &mut state.classifier.1);
                let trace = forward(cspec, cparams, &feats, Mode::EvalSource)?;
                Ok(accuracy(trace.output(), &set.y))
            }
        }
    }
}

fn optimizer(config: &ExperimentConfig) -> OptimizerState {
    OptimizerState::new(config.lr, config.lr_schedule.to_policy())
        .with_momentum(config.momentum)
}

/// Train `algorithm` on prepared data. `seed` drives every random choice.
pub fn train_algorithm(
    algorithm: Algorithm,
    data: &PreparedData,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(TrainedModel, TrainLog)> {
    let in_dim = data.source.x.cols();
    let mut opt = optimizer(config);
    let test = Some(&data.test);
    match algorithm {
        Algorithm::SourceOnly => {
            let spec = mlp_classifier(in_dim, config.hidden, data.classes)?;
            let mut params = Parameters::init(&spec, &mut stream_rng(seed, Stream::Init));
            let log = source_only_train(
                &spec,
                &mut params,
                &data.source,
                test,
                config.epochs,
                config.batch_size,
                &mut opt,
                seed,
            )?;
            Ok((TrainedModel::Classifier { spec, params }, log))
        }
        Algorithm::Dan => {
            let spec = mlp_classifier(in_dim, config.hidden, data.classes)?;
            let mut params = Parameters::init(&spec, &mut stream_rng(seed, Stream::Init));
            let cfg = DanConfig {
                lambda: config.loss_weight,
                epochs: config.epochs,
                batch_size: config.batch_size,
                ..DanConfig::default()
            };
            let log =
                dan_train(&spec, &mut params, &data.source, &data.adapt.x, test, &cfg, &mut opt, seed)?;
            Ok((TrainedModel::Classifier { spec, params }, log))
        }
        Algorithm::Dann => {
            let spec = mlp_classifier(in_dim, config.hidden, data.classes)?;
            let mut params = Parameters::init(&spec, &mut stream_rng(seed, Stream::Init));
            let cfg = DannConfig {
                lambda_d: config.loss_weight,
                epochs: config.epochs,
                batch_size: config.batch_size,
                ..DannConfig::default()
            };
            let log = dann_train(
                &spec,
                &mut params,
                &data.source,
                &data.adapt.x,
                test,
                &cfg,
                &mut opt,
                seed,
            )?;
            Ok((TrainedModel::Classifier { spec, params }, log))
        }
        Algorithm::Autodial => {
            let spec = autodial_classifier(in_dim, config.hidden, data.classes, None)?;
            let mut params = Parameters::init(&spec, &mut stream_rng(seed, Stream::Init));
            let cfg = AutodialConfig {
                lambda: config.loss_weight,
                epochs: config.epochs,
                batch_size: config.batch_size,
            };
            let log = autodial_train(
                &spec,
                &mut params,
                &data.source,
                &data.adapt.x,
                test,
                &cfg,
                &mut opt,
                seed,
            )?;
            Ok((TrainedModel::Classifier { spec, params }, log))
        }
        Algorithm::Adda => {
            let spec = mlp_classifier(in_dim, config.hidden, data.classes)?;
            let cfg = AddaConfig {
                pretrain_epochs: config.epochs,
                adapt_epochs: config.epochs,
                batch_size: config.batch_size,
                ..AddaConfig::default()
            };
            let (mut state, _) = adda_pretrain(&spec, &data.source, &cfg, &mut opt, seed)?;
            // The two-player game needs a gentler step than supervised
            // pretraining or the target map collapses; run it at lr / 5.
            let mut d_opt = OptimizerState::new(config.lr / 5.0, config.lr_schedule.to_policy())
                .with_momentum(config.momentum);
            let mut m_opt = OptimizerState::new(config.lr / 5.0, config.lr_schedule.to_policy())
                .with_momentum(config.momentum);
            let log = adda_adapt(
                &mut state,
                &data.source,
                &data.adapt.x,
                &cfg,
                &mut d_opt,
                &mut m_opt,
                seed,
            )?;
            Ok((TrainedModel::Adda(Box::new(state)), log))
        }
    }
}

/// Run one experiment. The same-seed source-only baseline is always
/// computed alongside the requested algorithm; a training abort is
/// recorded as a `failed` row instead of discarding the table.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    let fp = config.fingerprint();
    let seed = config.effective_seed();
    let mut table = ResultTable::default();
    match config.modality {
        Modality::Rgbd => run_rgbd(config, seed, &fp, &mut table)?,
        _ => run_single(config, seed, &fp, &mut table)?,
    }
    Ok(table)
}

fn record_failure(table: &mut ResultTable, fp: &str, err: &HarnessError) {
    table.push(fp, "failed", 1.0);
    // The message is not a number, so it travels as a zero-valued row
    // whose metric name carries the reason.
    table.push(fp, &format!("failure[{err}]"), 0.0);
}

fn run_single(
    config: &ExperimentConfig,
    seed: u64,
    fp: &str,
    table: &mut ResultTable,
) -> Result<()> {
    let data = prepare(config, seed)?;
    let baseline = match train_algorithm(Algorithm::SourceOnly, &data, config, seed) {
        Ok((mut model, _)) => {
            let src = model.source_accuracy(&data.source)?;
            let tgt = model.target_accuracy(&data.test)?;
            table.push(fp, "baseline_source_acc", src);
            table.push(fp, "baseline_target_acc", tgt);
            Some((src, tgt))
        }
        Err(e) => {
            record_failure(table, fp, &e);
            None
        }
    };
    if config.algorithm == Algorithm::SourceOnly {
        if let Some((src, tgt)) = baseline {
            table.push(fp, "source_acc", src);
            table.push(fp, "target_acc", tgt);
        }
        return Ok(());
    }
    match train_algorithm(config.algorithm, &data, config, seed) {
        Ok((mut model, log)) => {
            table.push(fp, "source_acc", model.source_accuracy(&data.source)?);
            table.push(fp, "target_acc", model.target_accuracy(&data.test)?);
            if !log.warnings.is_empty() {
                table.push(fp, "warnings", log.warnings.len() as f64);
            }
        }
        Err(e) => record_failure(table, fp, &e),
    }
    Ok(())
}

fn run_rgbd(
    config: &ExperimentConfig,
    seed: u64,
    fp: &str,
    table: &mut ResultTable,
) -> Result<()> {
    if config.algorithm == Algorithm::Adda {
        return Err(HarnessError::InvalidConfig(
            "rgbd integration needs a single adapted network per cue; \
             the split-network algorithm is not supported here"
                .into(),
        ));
    }
    let (rgb, depth) = prepare_cues(config, seed)?;
    let source_labels = rgb.source.y.clone();
    let target_labels = rgb.test.y.clone();
    let mut cues = Vec::new();
    for (cue, data) in [(Cue::Rgb, &rgb), (Cue::Depth, &depth)] {
        match train_algorithm(config.algorithm, data, config, seed) {
            Ok((TrainedModel::Classifier { spec, params }, _)) => cues.push(CueArtifacts {
                cue,
                spec,
                params,
                source_x: data.source.x.clone(),
                target_x: data.test.x.clone(),
                layer_activation: None,
            }),
            Ok((TrainedModel::Adda(_), _)) => unreachable!("rejected above"),
            Err(e) => {
                record_failure(table, fp, &e);
                return Ok(());
            }
        }
    }
    let outcome = rgbd_pipeline(
        &mut cues,
        &source_labels,
        &target_labels,
        &[1.0, 1.0],
        &SvmConfig::default(),
    )?;
    for (cue, acc) in &outcome.per_cue_target_acc {
        table.push(fp, &format!("{}_target_acc", cue.tag()), *acc);
    }
    let best_single =
        outcome.per_cue_target_acc.iter().map(|(_, a)| *a).fold(f64::MIN, f64::max);
    table.push(fp, "baseline_target_acc", best_single);
    table.push(fp, "target_acc", outcome.combined_target_acc);
    Ok(())
}

/// Evaluate one trained model on progressively restricted subsets of the
/// test set. `distances` gives the per-row median object distance (mm);
/// a range producing an empty subset is skipped and noted.
pub fn distance_sweep(
    model: &mut TrainedModel,
    test: &LabeledSet,
    distances: &[f64],
    ranges: &[(f64, f64)],
    fp: &str,
) -> Result<(ResultTable, Vec<String>)> {
    if distances.len() != test.len() {
        return Err(HarnessError::InvalidArgument(
            "one distance per test row required".into(),
        ));
    }
    let mut table = ResultTable::default();
    let mut notes = Vec::new();
    for &(lo, hi) in ranges {
        let idx: Vec<usize> = distances
            .iter()
            .enumerate()
            .filter(|(_, &d)| d >= lo && d < hi)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            notes.push(format!("range [{lo}, {hi}) mm is empty, skipped"));
            continue;
        }
        let subset = subset_labeled(test, &idx)?;
        table.push(fp, &format!("target_acc@{lo}-{hi}mm"), model.target_accuracy(&subset)?);
    }
    Ok((table, notes))
}

fn subset_labeled(set: &LabeledSet, idx: &[usize]) -> Result<LabeledSet> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| set.x.row(i)).collect();
    Ok(LabeledSet::new(
        Tensor::from_rows(&rows)?,
        idx.iter().map(|&i| set.y[i]).collect(),
    )?)
}

/// Split a labeled target set into (adaptation, test) index lists.
fn split_indices(y: &[usize], policy: &SplitPolicy) -> Result<(Vec<usize>, Vec<usize>)> {
    match policy {
        SplitPolicy::Group1 => {
            let all: Vec<usize> = (0..y.len()).collect();
            Ok((all.clone(), all))
        }
        SplitPolicy::Group2ByInstance { .. } => Err(HarnessError::SplitInfeasible(
            "synthetic data has no instance structure".into(),
        )),
        SplitPolicy::Group2FixedCount { test_per_class, seed } => {
            use rand::seq::SliceRandom;
            let mut classes: Vec<usize> = y.to_vec();
            classes.sort_unstable();
            classes.dedup();
            let mut rng = stream_rng(*seed, Stream::Data);
            let mut adapt = Vec::new();
            let mut test = Vec::new();
            for c in classes {
                let mut idx: Vec<usize> =
                    (0..y.len()).filter(|&i| y[i] == c).collect();
                if idx.len() <= *test_per_class {
                    return Err(HarnessError::SplitInfeasible(format!(
                        "class {c} has {} samples, cannot hold out {test_per_class}",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut rng);
                test.extend_from_slice(&idx[..*test_per_class]);
                adapt.extend_from_slice(&idx[*test_per_class..]);
            }
            adapt.sort_unstable();
            test.sort_unstable();
            Ok((adapt, test))
        }
    }
}

fn split_labeled(target: &LabeledSet, policy: &SplitPolicy) -> Result<(LabeledSet, LabeledSet)> {
    let (adapt, test) = split_indices(&target.y, policy)?;
    Ok((subset_labeled(target, &adapt)?, subset_labeled(target, &test)?))
}

/// Resolve the configured data source into tensors for one cue.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    match &config.data {
        DataSource::Synth(params) => {
            let pair = synth_shift_dataset(params, seed)?;
            let classes = count_classes(&pair.source.y, &pair.target.y);
            let (adapt, test) = split_labeled(&pair.target, &config.split)?;
            Ok(PreparedData {
                source: pair.source,
                adapt,
                test,
                test_distances: None,
                classes,
            })
        }
        DataSource::Ingest { source_root, target_root } => {
            let [data] = prepare_ingested(config, source_root, target_root, &[one_cue(config)?])?;
            Ok(data)
        }
    }
}

fn one_cue(config: &ExperimentConfig) -> Result<Cue> {
    match config.modality {
        Modality::Rgb => Ok(Cue::Rgb),
        Modality::Depth => Ok(Cue::Depth),
        Modality::Rgbd => Err(HarnessError::InvalidConfig(
            "rgbd resolves to two cues, not one".into(),
        )),
    }
}

/// Resolve the rgbd data source into aligned per-cue data. For synthetic
/// sources the two cues are independent draws of the same labeled process,
/// so their label vectors align row by row.
fn prepare_cues(config: &ExperimentConfig, seed: u64) -> Result<(PreparedData, PreparedData)> {
    match &config.data {
        DataSource::Synth(params) => {
            let a = synth_shift_dataset(params, seed)?;
            let b = synth_shift_dataset(params, seed ^ 0x5eed_cafe)?;
            debug_assert_eq!(a.source.y, b.source.y);
            let classes = count_classes(&a.source.y, &a.target.y);
            let (adapt_idx, test_idx) = split_indices(&a.target.y, &config.split)?;
            let cue = |pair: crate::synth::SynthPair| -> Result<PreparedData> {
                Ok(PreparedData {
                    adapt: subset_labeled(&pair.target, &adapt_idx)?,
                    test: subset_labeled(&pair.target, &test_idx)?,
                    source: pair.source,
                    test_distances: None,
                    classes,
                })
            };
            Ok((cue(a)?, cue(b)?))
        }
        DataSource::Ingest { source_root, target_root } => {
            let [rgb, depth] =
                prepare_ingested(config, source_root, target_root, &[Cue::Rgb, Cue::Depth])?;
            Ok((rgb, depth))
        }
    }
}

fn count_classes(a: &[usize], b: &[usize]) -> usize {
    a.iter().chain(b).max().map_or(0, |m| m + 1)
}

/// Ingest both roots, filter, split the target, and featurize each cue
/// over the same record sets so cue rows stay aligned.
fn prepare_ingested<const N: usize>(
    config: &ExperimentConfig,
    source_root: &Path,
    target_root: &Path,
    cues: &[Cue; N],
) -> Result<[PreparedData; N]> {
    let source_m = apply_filters(&ingest(source_root)?, NULL_THRESHOLD, None)?;
    let target_m = apply_filters(&ingest(target_root)?, NULL_THRESHOLD, None)?;
    let mut class_names: Vec<String> = source_m
        .classes()
        .into_iter()
        .chain(target_m.classes())
        .collect();
    class_names.sort();
    class_names.dedup();
    let (adapt_m, test_m) = crate::manifest::make_splits(&target_m, &config.split)?;
    let test_distances: Vec<f64> = test_m
        .records
        .iter()
        .map(|r| r.median_distance_mm.unwrap_or(f64::INFINITY))
        .collect();
    let mut out = Vec::with_capacity(N);
    for &cue in cues {
        out.push(PreparedData {
            source: featurize_manifest(&source_m, cue, &class_names)?,
            adapt: featurize_manifest(&adapt_m, cue, &class_names)?,
            test: featurize_manifest(&test_m, cue, &class_names)?,
            test_distances: Some(test_distances.clone()),
            classes: class_names.len(),
        });
    }
    Ok(out.try_into().ok().expect("one entry per cue"))
}

fn featurize_manifest(
    manifest: &DatasetManifest,
    cue: Cue,
    class_names: &[String],
) -> Result<LabeledSet> {
    let mut rows = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        rows.push(featurize_record(r, cue)?);
        let label = class_names
            .iter()
            .position(|c| c == &r.class)
            .ok_or_else(|| HarnessError::Dataset(format!("unknown class '{}'", r.class)))?;
        labels.push(label);
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(LabeledSet::new(Tensor::from_rows(&refs)?, labels)?)
}

/// Fixed-size descriptor for one record: mean-pooled grayscale for the
/// color image, mean-pooled colorized surface normals for the depth image.
fn featurize_record(record: &ManifestRecord, cue: Cue) -> Result<Vec<f64>> {
    match cue {
        Cue::Rgb => {
            let path = record.rgb_path.as_ref().ok_or_else(|| {
                HarnessError::Dataset(format!("record {} has no color image", record.id))
            })?;
            let img = ColorImage::read_ppm(path)?;
            Ok(pool_gray(&img))
        }
        Cue::Depth => {
            let path = record.depth_path.as_ref().ok_or_else(|| {
                HarnessError::Dataset(format!("record {} has no depth image", record.id))
            })?;
            let depth = DepthImage::read_pgm(path)?;
            let color = colorize(&depth, Method::Sn, &SnPlusConfig::default())?;
            Ok(pool_rgb(&color))
        }
        Cue::Combined => Err(HarnessError::InvalidArgument(
            "combined features come from concatenation, not extraction".into(),
        )),
    }
}

fn cell_bounds(c: usize, len: usize) -> (usize, usize) {
    let lo = (c * len / POOL).min(len - 1);
    let hi = (((c + 1) * len / POOL).max(lo + 1)).min(len);
    (lo, hi.max(lo + 1))
}

fn pool_gray(img: &ColorImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(POOL * POOL);
    for cy in 0..POOL {
        for cx in 0..POOL {
            let (x0, x1) = cell_bounds(cx, img.width());
            let (y0, y1) = cell_bounds(cy, img.height());
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let [r, g, b] = img.pixel(x, y);
                    sum += (r as f64 + g as f64 + b as f64) / 3.0;
                }
            }
            out.push(sum / (((x1 - x0) * (y1 - y0)) as f64 * 255.0));
        }
    }
    out
}

fn pool_rgb(img: &ColorImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(POOL * POOL * 3);
    for cy in 0..POOL {
        for cx in 0..POOL {
            let (x0, x1) = cell_bounds(cx, img.width());
            let (y0, y1) = cell_bounds(cy, img.height());
            let mut sum = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.pixel(x, y);
                    for ch in 0..3 {
                        sum[ch] += p[ch] as f64;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64 * 255.0;
            out.extend(sum.iter().map(|s| s / n));
        }
    }
    out
}
