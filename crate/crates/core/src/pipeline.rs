//! End-to-end pipeline: load -> preprocess -> features -> trial classifier
//! -> aggregation -> evaluation, driven by a single JSON config.
//!
//! Stage-2 training histograms come from inner cross-fitting of the stage-1
//! classifier within the training split, so the aggregator and the decision
//! threshold never see optimistically overfit scores. All randomness is
//! derived from the config seed per (fold, purpose), and parallel sections
//! only ever collect in index order, so results do not depend on the thread
//! count. Intermediates are cached under `<out>/cache` keyed by the content
//! hash of their upstream config, and every producer round-trips its output
//! through the cache encoding so cached reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregator_input, score_histogram, train_aggregator_mlp, AggregationMethod, AggregatorMlp,
    AggregatorOptions, ElectrodeAggregator, ElectrodeVerdict,
};
use crate::cache::{key_of, Cache};
use crate::dataset::{derive_labels, load_dataset, manifest_bytes, Dataset, ElectrodeLabel, Task};
use crate::error::{Error, Result};
use crate::eval::{
    make_folds, metrics::metrics_with_decisions, pr_curve, roc_curve, select_threshold_max_f1,
    EvalReport, FoldElectrode, FoldMeanMetrics, FoldReport, Metrics, ValidationMode,
};
use crate::features::{
    assemble_trial_features, region_one_hot, ElectrodeGraphMetrics, FeatureMask, FeatureScaler,
    CENTRALITY_IDX, CLUSTERING_IDX, FEATURE_DIM, MEAN_ACTIVITY_IDX, NMF_RANGE, REGION_RANGE,
    STRENGTH_IDX,
};
use crate::graph::{node_metrics, trial_connectivity};
use crate::models::{train_classifier, ClassifierSpec, TrainedModel};
use crate::nmf::{fit_nmf, NmfModel, NmfOptions};
use crate::seed;
use crate::signal::{
    common_average_reference, epoch_and_normalize, epoch_len, high_gamma_envelope, SignalKind,
    TrialEpoch, TrialOnset,
};

const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 1000;

/// Full configuration of one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_signal")]
    pub signal: SignalKind,
    #[serde(default = "FeatureMask::all")]
    pub features: FeatureMask,
    #[serde(default = "default_classifier")]
    pub classifier: ClassifierSpec,
    #[serde(default = "default_aggregation")]
    pub aggregation: AggregationMethod,
    #[serde(default = "default_validation")]
    pub validation: ValidationMode,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub nmf: NmfOptions,
    #[serde(default)]
    pub aggregator: AggregatorOptions,
    /// Inner cross-fitting folds for stage-2 training scores.
    #[serde(default = "default_inner_folds")]
    pub inner_folds: usize,
    #[serde(default = "default_cache")]
    pub cache: bool,
}

fn default_signal() -> SignalKind {
    SignalKind::HighGamma
}
fn default_classifier() -> ClassifierSpec {
    ClassifierSpec::new(crate::models::ClassifierKind::LinearSvm)
}
fn default_aggregation() -> AggregationMethod {
    AggregationMethod::Average
}
fn default_validation() -> ValidationMode {
    ValidationMode::Loo
}
fn default_inner_folds() -> usize {
    4
}
fn default_cache() -> bool {
    true
}

impl PipelineConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            signal: default_signal(),
            features: FeatureMask::all(),
            classifier: default_classifier(),
            aggregation: default_aggregation(),
            validation: default_validation(),
            seed: 0,
            threads: 0,
            nmf: NmfOptions::default(),
            aggregator: AggregatorOptions::default(),
            inner_folds: default_inner_folds(),
            cache: default_cache(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.inner_folds < 2 {
            return Err(Error::Config(format!(
                "inner cross-fitting needs at least 2 folds, got {}",
                self.inner_folds
            )));
        }
        Ok(())
    }
}

/// How far a run should go; CLI subcommands stop after their stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RunStage {
    Preprocess,
    Features,
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// preprocessing

/// Per-subject preprocessed trials: epochs plus the fold-independent
/// feature ingredients (mean activity and the three graph metrics).
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub subject_id: String,
    pub electrode_ids: Vec<u32>,
    pub regions: Vec<usize>,
    /// `Some(is_critical)` for tested electrodes, `None` for untested.
    pub labels: Vec<Option<bool>>,
    pub n_trials: usize,
    pub epochs: Array3<f64>,
    pub mean_activity: Array2<f64>,
    pub strength: Array2<f64>,
    pub centrality: Array2<f64>,
    pub clustering: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct SubjectMeta {
    subject_id: String,
    electrode_ids: Vec<u32>,
    regions: Vec<usize>,
    labels: Vec<Option<bool>>,
    n_trials: usize,
    epoch_len: usize,
}

fn preprocess_subject(
    dataset: &Dataset,
    subject_idx: usize,
    signal: SignalKind,
) -> Result<SubjectData> {
    let subject = &dataset.subjects[subject_idx];
    let fs = dataset.sample_rate;
    let m = epoch_len(fs);
    let valid = subject.valid_electrodes();
    let rows: Vec<usize> = valid.iter().map(|(r, _)| *r).collect();
    let electrode_ids: Vec<u32> = valid.iter().map(|(_, e)| e.id).collect();
    let regions: Vec<usize> = valid.iter().map(|(_, e)| e.region_index).collect();
    let l = rows.len();
    if l < 2 {
        return Err(Error::Validation(format!(
            "subject {}: fewer than 2 valid electrodes",
            subject.id
        )));
    }

    let label_map = derive_labels(&subject.esm, &subject.electrodes)?;
    let labels: Vec<Option<bool>> = electrode_ids
        .iter()
        .map(|id| match label_map[id] {
            ElectrodeLabel::Critical => Some(true),
            ElectrodeLabel::NonCritical => Some(false),
            ElectrodeLabel::Untested => None,
        })
        .collect();

    // per-recording preprocessing; trials concatenate across recordings
    let mut per_electrode_epochs: Vec<Vec<TrialEpoch>> = vec![Vec::new(); l];
    for rec in &subject.recordings {
        let full = rec.samples.mapv(|v| v as f64);
        let sub = full.select(Axis(0), &rows);
        let car = common_average_reference(sub.view())?;
        let sig = match signal {
            SignalKind::Raw => car,
            SignalKind::HighGamma => high_gamma_envelope(car.view(), fs)?,
        };
        let onsets: Vec<TrialOnset> = rec
            .events
            .iter()
            .map(|e| TrialOnset {
                trial_id: e.trial_id,
                onset_sample: e.onset_sample,
            })
            .collect();
        for (row_idx, channel) in sig.outer_iter().enumerate() {
            let channel = channel.to_vec();
            let epochs = epoch_and_normalize(
                electrode_ids[row_idx],
                &channel,
                &onsets,
                fs,
            )?;
            per_electrode_epochs[row_idx].extend(epochs);
        }
    }

    let n_trials = per_electrode_epochs[0].len();
    let mut epochs = Array3::zeros((n_trials, l, m));
    for (e, trials) in per_electrode_epochs.iter().enumerate() {
        for (t, epoch) in trials.iter().enumerate() {
            epochs
                .slice_mut(s![t, e, ..])
                .assign(&ndarray::ArrayView1::from(&epoch.samples[..]));
        }
    }

    let mut mean_activity = Array2::zeros((n_trials, l));
    for t in 0..n_trials {
        for e in 0..l {
            mean_activity[[t, e]] =
                crate::features::mean_activity(epochs.slice(s![t, e, ..]).as_slice().unwrap());
        }
    }

    // one connectivity graph per trial over all valid electrodes
    let metric_rows: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let graph = trial_connectivity(epochs.slice(s![t, .., ..]))?;
            let m = node_metrics(&graph, POWER_ITER_TOL, POWER_ITER_MAX)?;
            Ok((m.strength, m.centrality, m.clustering))
        })
        .collect();
    let mut strength = Array2::zeros((n_trials, l));
    let mut centrality = Array2::zeros((n_trials, l));
    let mut clustering = Array2::zeros((n_trials, l));
    for (t, row) in metric_rows.into_iter().enumerate() {
        let (s_row, ec_row, cc_row) = row?;
        for e in 0..l {
            strength[[t, e]] = s_row[e];
            centrality[[t, e]] = ec_row[e];
            clustering[[t, e]] = cc_row[e];
        }
    }

    Ok(SubjectData {
        subject_id: subject.id.as_str().to_string(),
        electrode_ids,
        regions,
        labels,
        n_trials,
        epochs,
        mean_activity,
        strength,
        centrality,
        clustering,
    })
}

fn subjects_to_blob(data: &[SubjectData]) -> (Vec<SubjectMeta>, Vec<f64>) {
    let mut metas = Vec::with_capacity(data.len());
    let mut blob = Vec::new();
    for d in data {
        metas.push(SubjectMeta {
            subject_id: d.subject_id.clone(),
            electrode_ids: d.electrode_ids.clone(),
            regions: d.regions.clone(),
            labels: d.labels.clone(),
            n_trials: d.n_trials,
            epoch_len: d.epochs.shape()[2],
        });
        blob.extend(d.epochs.iter());
        blob.extend(d.mean_activity.iter());
        blob.extend(d.strength.iter());
        blob.extend(d.centrality.iter());
        blob.extend(d.clustering.iter());
    }
    (metas, blob)
}

fn subjects_from_blob(metas: Vec<SubjectMeta>, blob: Vec<f64>) -> Option<Vec<SubjectData>> {
    let mut out = Vec::with_capacity(metas.len());
    let mut off = 0;
    for meta in metas {
        let l = meta.electrode_ids.len();
        let (t, m) = (meta.n_trials, meta.epoch_len);
        let take = |off: &mut usize, n: usize| -> Option<Vec<f64>> {
            let s = blob.get(*off..*off + n)?.to_vec();
            *off += n;
            Some(s)
        };
        let epochs = Array3::from_shape_vec((t, l, m), take(&mut off, t * l * m)?).ok()?;
        let mean_activity = Array2::from_shape_vec((t, l), take(&mut off, t * l)?).ok()?;
        let strength = Array2::from_shape_vec((t, l), take(&mut off, t * l)?).ok()?;
        let centrality = Array2::from_shape_vec((t, l), take(&mut off, t * l)?).ok()?;
        let clustering = Array2::from_shape_vec((t, l), take(&mut off, t * l)?).ok()?;
        out.push(SubjectData {
            subject_id: meta.subject_id,
            electrode_ids: meta.electrode_ids,
            regions: meta.regions,
            labels: meta.labels,
            n_trials: meta.n_trials,
            epochs,
            mean_activity,
            strength,
            centrality,
            clustering,
        });
    }
    (off == blob.len()).then_some(out)
}

fn preprocess_all(
    dataset: &Dataset,
    signal: SignalKind,
    cache: &Cache,
    epochs_key: u64,
) -> Result<Vec<SubjectData>> {
    if let Some((metas, blob)) = cache.load::<Vec<SubjectMeta>>("epochs", epochs_key) {
        if let Some(data) = subjects_from_blob(metas, blob) {
            return Ok(data);
        }
    }
    let results: Vec<Result<SubjectData>> = (0..dataset.subjects.len())
        .into_par_iter()
        .map(|i| preprocess_subject(dataset, i, signal))
        .collect();
    let mut data = Vec::with_capacity(results.len());
    for r in results {
        data.push(r?);
    }
    let (metas, blob) = subjects_to_blob(&data);
    cache.store("epochs", epochs_key, &metas, &blob)?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// fold-level computation

/// One labeled electrode addressed globally.
#[derive(Debug, Clone, Copy)]
pub struct LabeledElectrode {
    pub subject: usize,
    pub row: usize,
    pub electrode_id: u32,
    pub label: bool,
    pub region: usize,
}

fn labeled_electrodes(data: &[SubjectData]) -> Vec<LabeledElectrode> {
    let mut out = Vec::new();
    for (si, d) in data.iter().enumerate() {
        for (row, label) in d.labels.iter().enumerate() {
            if let Some(label) = *label {
                out.push(LabeledElectrode {
                    subject: si,
                    row,
                    electrode_id: d.electrode_ids[row],
                    label,
                    region: d.regions[row],
                });
            }
        }
    }
    out
}

/// Round-robin stratified fold assignment after a seeded shuffle per class.
fn stratified_assignment(labels: &[bool], k: usize, seed_value: u64) -> Vec<usize> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_value);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut assignment = vec![0usize; labels.len()];
    for (j, &i) in pos.iter().chain(neg.iter()).enumerate() {
        assignment[i] = j % k;
    }
    assignment
}

struct FoldFeatures {
    /// Unscaled rows, train electrodes' trials first, then test electrodes'.
    x: Array2<f64>,
    /// Per electrode (train then test): its row range in `x`.
    spans: Vec<Range<usize>>,
    n_train_rows: usize,
}

#[derive(Serialize, Deserialize)]
struct FeatureCacheMeta {
    fold: usize,
    n_rows: usize,
    n_train_rows: usize,
    spans: Vec<(usize, usize)>,
}

#[allow(clippy::too_many_arguments)]
fn build_fold_features(
    data: &[SubjectData],
    labeled: &[LabeledElectrode],
    electrodes: &[usize],
    n_train: usize,
    cfg: &PipelineConfig,
    fold_id: usize,
    cache: &Cache,
    features_key: u64,
) -> Result<FoldFeatures> {
    if let Some((meta, blob)) = cache.load::<FeatureCacheMeta>("features", features_key) {
        if meta.fold == fold_id && blob.len() == meta.n_rows * FEATURE_DIM {
            let x = Array2::from_shape_vec((meta.n_rows, FEATURE_DIM), blob)
                .expect("size checked");
            return Ok(FoldFeatures {
                x,
                spans: meta.spans.iter().map(|&(a, b)| a..b).collect(),
                n_train_rows: meta.n_train_rows,
            });
        }
    }

    let m = data[labeled[electrodes[0]].subject].epochs.shape()[2];

    // prototype basis from training trials only (clamped nonnegative)
    let nmf_model: Option<NmfModel> = if cfg.features.nmf {
        let n_train_rows: usize = electrodes[..n_train]
            .iter()
            .map(|&e| data[labeled[e].subject].n_trials)
            .sum();
        let mut x = Array2::zeros((m, n_train_rows));
        let mut col = 0;
        for &e in &electrodes[..n_train] {
            let le = labeled[e];
            let d = &data[le.subject];
            for t in 0..d.n_trials {
                let epoch = d.epochs.slice(s![t, le.row, ..]);
                for (i, &v) in epoch.iter().enumerate() {
                    x[[i, col]] = v.max(0.0);
                }
                col += 1;
            }
        }
        let mut model = fit_nmf(
            x.view(),
            &cfg.nmf,
            seed::derive_indexed(cfg.seed, "nmf", fold_id as u64),
        )?;
        // serialization precision is part of the model contract
        model.quantize_to_f32();
        let basis: Vec<f64> = model.basis().iter().copied().collect();
        cache.store(
            "nmf",
            features_key,
            &(model.epoch_len(), model.components(), model.iterations),
            &basis,
        )?;
        Some(model)
    } else {
        None
    };

    let n_rows: usize = electrodes
        .iter()
        .map(|&e| data[labeled[e].subject].n_trials)
        .sum();
    let mut x = Array2::zeros((n_rows, FEATURE_DIM));
    let mut spans = Vec::with_capacity(electrodes.len());
    let mut row_idx = 0;
    let mut n_train_rows = 0;
    for (pos, &e) in electrodes.iter().enumerate() {
        let le = labeled[e];
        let d = &data[le.subject];
        let start = row_idx;
        for t in 0..d.n_trials {
            let samples = d.epochs.slice(s![t, le.row, ..]).to_vec();
            let epoch = TrialEpoch {
                electrode: le.electrode_id,
                trial_id: t as u32,
                samples,
            };
            let metrics = ElectrodeGraphMetrics {
                electrode: le.electrode_id,
                trial_id: t as u32,
                strength: d.strength[[t, le.row]],
                centrality: d.centrality[[t, le.row]],
                clustering: d.clustering[[t, le.row]],
            };
            let fv = assemble_trial_features(
                &epoch,
                nmf_model.as_ref(),
                &metrics,
                le.region,
                cfg.features,
            )?;
            x.row_mut(row_idx)
                .assign(&ndarray::ArrayView1::from(&fv.values[..]));
            row_idx += 1;
        }
        spans.push(start..row_idx);
        if pos + 1 == n_train {
            n_train_rows = row_idx;
        }
    }

    let meta = FeatureCacheMeta {
        fold: fold_id,
        n_rows,
        n_train_rows,
        spans: spans.iter().map(|r| (r.start, r.end)).collect(),
    };
    cache.store(
        "features",
        features_key,
        &meta,
        x.as_slice().expect("contiguous"),
    )?;
    Ok(FoldFeatures {
        x,
        spans,
        n_train_rows,
    })
}

#[derive(Serialize, Deserialize)]
struct ScoreCacheMeta {
    fold: usize,
    n_train_rows: usize,
    n_test_rows: usize,
}

struct Stage1Scores {
    /// Cross-fitted probabilities for training electrodes' rows.
    crossfit: Vec<f64>,
    /// Final-model probabilities for test electrodes' rows.
    test: Vec<f64>,
    /// Present when the scores were computed in this run.
    final_model: Option<TrainedModel>,
}

#[allow(clippy::too_many_arguments)]
fn stage1_scores(
    features: &FoldFeatures,
    row_labels: &[bool],
    electrode_labels: &[bool],
    spans: &[Range<usize>],
    n_train: usize,
    cfg: &PipelineConfig,
    fold_id: usize,
    cache: &Cache,
    scores_key: u64,
) -> Result<Stage1Scores> {
    let n_test_rows = features.x.nrows() - features.n_train_rows;
    if let Some((meta, blob)) = cache.load::<ScoreCacheMeta>("scores", scores_key) {
        if meta.fold == fold_id
            && meta.n_train_rows == features.n_train_rows
            && meta.n_test_rows == n_test_rows
            && blob.len() == features.n_train_rows + n_test_rows
        {
            let (crossfit, test) = blob.split_at(features.n_train_rows);
            return Ok(Stage1Scores {
                crossfit: crossfit.to_vec(),
                test: test.to_vec(),
                final_model: None,
            });
        }
    }

    let train_labels = &electrode_labels[..n_train];
    let n_pos = train_labels.iter().filter(|&&b| b).count();
    let n_neg = n_train - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::Training(format!(
            "fold {fold_id}: cross-fitting needs >= 2 electrodes per class in the training split \
             (got {n_pos} critical, {n_neg} non-critical)"
        )));
    }
    let k = cfg.inner_folds.min(n_pos).min(n_neg);
    let assignment = stratified_assignment(
        train_labels,
        k,
        seed::derive_indexed(cfg.seed, "inner", fold_id as u64),
    );

    let mut crossfit = vec![0.0; features.n_train_rows];
    for inner in 0..k {
        let mut fit_rows = Vec::new();
        let mut fit_labels = Vec::new();
        let mut holdout_rows = Vec::new();
        for (ei, span) in spans.iter().take(n_train).enumerate() {
            if assignment[ei] == inner {
                holdout_rows.extend(span.clone());
            } else {
                fit_rows.extend(span.clone());
                fit_labels.extend(std::iter::repeat_n(electrode_labels[ei], span.len()));
            }
        }
        let x_fit = features.x.select(Axis(0), &fit_rows);
        let spec = cfg
            .classifier
            .with_seed(seed::derive(cfg.seed, &["clf", &fold_id.to_string(), &inner.to_string()]));
        let model = train_classifier(&spec, x_fit.view(), &fit_labels)?;
        let x_hold = features.x.select(Axis(0), &holdout_rows);
        let scores = model.predict(x_hold.view())?;
        for (r, s) in holdout_rows.iter().zip(scores) {
            crossfit[*r] = s;
        }
    }

    let x_train = features.x.slice(s![..features.n_train_rows, ..]);
    let spec = cfg
        .classifier
        .with_seed(seed::derive(cfg.seed, &["clf", &fold_id.to_string(), "final"]));
    let final_model = train_classifier(&spec, x_train, &row_labels[..features.n_train_rows])?;
    let x_test = features.x.slice(s![features.n_train_rows.., ..]);
    let test = final_model.predict(x_test)?;

    let mut blob = crossfit.clone();
    blob.extend(&test);
    cache.store(
        "scores",
        scores_key,
        &ScoreCacheMeta {
            fold: fold_id,
            n_train_rows: features.n_train_rows,
            n_test_rows,
        },
        &blob,
    )?;
    Ok(Stage1Scores {
        crossfit,
        test,
        final_model: Some(final_model),
    })
}

struct FoldArtifacts {
    fold: usize,
    threshold: f64,
    verdicts: Vec<ElectrodeVerdict>,
    test_labels: Vec<bool>,
    metrics: Option<Metrics>,
    final_model: Option<TrainedModel>,
    features: Option<FoldFeatures>,
    electrode_order: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    data: &[SubjectData],
    labeled: &[LabeledElectrode],
    train: &[usize],
    test: &[usize],
    cfg: &PipelineConfig,
    fold_id: usize,
    cache: &Cache,
    epochs_key: u64,
    keep_intermediates: bool,
) -> Result<FoldArtifacts> {
    let electrodes: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
    let n_train = train.len();

    let features_key = key_of(&[
        &"features",
        &epochs_key,
        &cfg.features,
        &cfg.nmf,
        &cfg.validation,
        &cfg.seed,
        &fold_id,
    ]);
    let features = build_fold_features(
        data, labeled, &electrodes, n_train, cfg, fold_id, cache, features_key,
    )
    .map_err(Error::in_stage("features"))?;

    // z-score continuous dims on training rows only
    let electrode_labels: Vec<bool> = electrodes.iter().map(|&e| labeled[e].label).collect();
    let mut row_labels = Vec::with_capacity(features.x.nrows());
    for (ei, span) in features.spans.iter().enumerate() {
        row_labels.extend(std::iter::repeat_n(electrode_labels[ei], span.len()));
    }
    let scaler = FeatureScaler::fit(
        features.x.slice(s![..features.n_train_rows, ..]),
        cfg.features,
    )
    .map_err(Error::in_stage("features"))?;
    let mut scaled = features.x.clone();
    scaler.transform(scaled.view_mut());
    let scaled_features = FoldFeatures {
        x: scaled,
        spans: features.spans.clone(),
        n_train_rows: features.n_train_rows,
    };

    let scores_key = key_of(&[
        &"scores",
        &features_key,
        &cfg.classifier,
        &cfg.inner_folds,
    ]);
    let stage1 = stage1_scores(
        &scaled_features,
        &row_labels,
        &electrode_labels,
        &features.spans,
        n_train,
        cfg,
        fold_id,
        cache,
        scores_key,
    )
    .map_err(Error::in_stage("stage1"))?;

    // stage 2: aggregate per electrode
    let train_labels: Vec<bool> = electrode_labels[..n_train].to_vec();
    let trial_scores_of = |ei: usize, scores: &[f64], offset: usize| -> Vec<f64> {
        let span = &features.spans[ei];
        scores[span.start - offset..span.end - offset].to_vec()
    };

    let aggregator_model: Option<AggregatorMlp> = if cfg.aggregation.uses_mlp() {
        let mut rows = Array2::zeros((n_train, crate::aggregate::AGGREGATOR_INPUT_DIM));
        for ei in 0..n_train {
            let scores = trial_scores_of(ei, &stage1.crossfit, 0);
            let hist = score_histogram(&scores).map_err(Error::in_stage("stage2"))?;
            let region = region_one_hot(labeled[electrodes[ei]].region)
                .map_err(Error::in_stage("stage2"))?;
            let input = aggregator_input(
                &hist,
                cfg.aggregation.uses_region().then_some(&region),
            );
            rows.row_mut(ei)
                .assign(&ndarray::ArrayView1::from(&input[..]));
        }
        Some(
            train_aggregator_mlp(
                rows.view(),
                &train_labels,
                &cfg.aggregator,
                seed::derive_indexed(cfg.seed, "agg", fold_id as u64),
            )
            .map_err(Error::in_stage("stage2"))?,
        )
    } else {
        None
    };
    let aggregator = match &aggregator_model {
        Some(model) => ElectrodeAggregator::Mlp {
            model,
            use_region: cfg.aggregation.uses_region(),
        },
        None => ElectrodeAggregator::Average,
    };

    // threshold from cross-fitted training electrode scores
    let mut train_electrode_scores = Vec::with_capacity(n_train);
    for ei in 0..n_train {
        let scores = trial_scores_of(ei, &stage1.crossfit, 0);
        let region = region_one_hot(labeled[electrodes[ei]].region)
            .map_err(Error::in_stage("stage2"))?;
        let s = crate::aggregate::electrode_score(&aggregator, &scores, &region)
            .map_err(Error::in_stage("stage2"))?;
        train_electrode_scores.push(s);
    }
    let threshold = select_threshold_max_f1(&train_electrode_scores, &train_labels)
        .map_err(Error::in_stage("stage2"))?;

    let mut verdicts = Vec::with_capacity(test.len());
    let mut test_labels = Vec::with_capacity(test.len());
    for (pos, &e) in test.iter().enumerate() {
        let ei = n_train + pos;
        let le = labeled[e];
        let scores = trial_scores_of(ei, &stage1.test, features.n_train_rows);
        let region =
            region_one_hot(le.region).map_err(Error::in_stage("stage2"))?;
        let verdict = crate::aggregate::predict_electrode(
            &aggregator,
            &scores,
            &region,
            threshold,
            &data[le.subject].subject_id,
            le.electrode_id,
            fold_id,
        )
        .map_err(Error::in_stage("stage2"))?;
        verdicts.push(verdict);
        test_labels.push(le.label);
    }

    let fold_scores: Vec<f64> = verdicts.iter().map(|v| v.score).collect();
    let has_both = test_labels.iter().any(|&b| b) && test_labels.iter().any(|&b| !b);
    let metrics = if has_both {
        Some(
            crate::eval::compute_metrics(&fold_scores, &test_labels, threshold)
                .map_err(Error::in_stage("metrics"))?,
        )
    } else {
        None
    };

    Ok(FoldArtifacts {
        fold: fold_id,
        threshold,
        verdicts,
        test_labels,
        metrics,
        final_model: stage1.final_model,
        features: keep_intermediates.then_some(features),
        electrode_order: electrodes,
    })
}

// ---------------------------------------------------------------------------
// run orchestration

pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<EvalReport> {
    run_until(cfg, out_dir, RunStage::Eval).map(|r| r.expect("eval stage returns a report"))
}

/// Run the pipeline up to `stage`, writing that stage's artifacts under
/// `out_dir`. Only `RunStage::Eval` produces a report.
pub fn run_until(
    cfg: &PipelineConfig,
    out_dir: &Path,
    stage: RunStage,
) -> Result<Option<EvalReport>> {
    cfg.validate()?;
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run_inner(cfg, out_dir, stage))
    } else {
        run_inner(cfg, out_dir, stage)
    }
}

fn run_inner(cfg: &PipelineConfig, out_dir: &Path, stage: RunStage) -> Result<Option<EvalReport>> {
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let cache = Cache::new(out_dir.join("cache"), cfg.cache);

    let dataset = load_dataset(&cfg.dataset).map_err(Error::in_stage("load"))?;
    let manifest_hash = crate::seed::hash_bytes(&manifest_bytes(&cfg.dataset)?);
    let epochs_key = key_of(&[&"epochs", &manifest_hash, &cfg.signal]);
    let data = preprocess_all(&dataset, cfg.signal, &cache, epochs_key)
        .map_err(Error::in_stage("preprocess"))?;

    if stage == RunStage::Preprocess {
        let summary = serde_json::json!({
            "subjects": data.len(),
            "electrodes": data.iter().map(|d| d.electrode_ids.len()).sum::<usize>(),
            "trials": data.iter().map(|d| d.n_trials).sum::<usize>(),
            "signal": cfg.signal,
        });
        write_text(
            &out_dir.join("preprocess.json"),
            &serde_json::to_string_pretty(&summary).expect("json"),
        )?;
        return Ok(None);
    }

    let labeled = labeled_electrodes(&data);
    let fold_electrodes: Vec<FoldElectrode> = labeled
        .iter()
        .map(|le| FoldElectrode {
            subject_idx: le.subject,
            label: le.label,
        })
        .collect();
    let plan = make_folds(&fold_electrodes, cfg.validation, cfg.seed)
        .map_err(Error::in_stage("folds"))?;

    let keep_intermediates = stage == RunStage::Features || stage == RunStage::Train;
    let fold_results: Vec<Result<FoldArtifacts>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(fold_id, fold)| {
            run_fold(
                &data,
                &labeled,
                &fold.train,
                &fold.test,
                cfg,
                fold_id,
                &cache,
                epochs_key,
                keep_intermediates,
            )
        })
        .collect();
    let mut artifacts = Vec::with_capacity(fold_results.len());
    for r in fold_results {
        artifacts.push(r?);
    }

    if stage == RunStage::Features {
        for art in &artifacts {
            if let Some(features) = &art.features {
                export_features_csv(
                    &out_dir.join(format!("features_fold{}.csv", art.fold)),
                    features,
                    &art.electrode_order,
                    &labeled,
                    &data,
                )?;
            }
        }
        return Ok(None);
    }

    if stage == RunStage::Train {
        for art in &artifacts {
            if let Some(model) = &art.final_model {
                model.save(&out_dir.join(format!("model_fold{}", art.fold)))?;
            }
        }
        return Ok(None);
    }

    // pooled over concatenated held-out verdicts, in fold order
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut decisions = Vec::new();
    for art in &artifacts {
        for (v, &l) in art.verdicts.iter().zip(&art.test_labels) {
            scores.push(v.score);
            labels.push(l);
            decisions.push(v.decision);
        }
    }
    let pooled = metrics_with_decisions(&scores, &labels, &decisions)
        .map_err(Error::in_stage("metrics"))?;

    let defined: Vec<&Metrics> = artifacts.iter().filter_map(|a| a.metrics.as_ref()).collect();
    let fold_mean = if defined.is_empty() {
        None
    } else {
        Some(FoldMeanMetrics {
            roc_auc: defined.iter().map(|m| m.roc_auc).sum::<f64>() / defined.len() as f64,
            pr_auc: defined.iter().map(|m| m.pr_auc).sum::<f64>() / defined.len() as f64,
            n_folds_used: defined.len(),
        })
    };

    let report = EvalReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(cfg).expect("serializable config"),
        mode: cfg.validation,
        n_electrodes: labeled.len(),
        n_critical: labeled.iter().filter(|le| le.label).count(),
        folds: artifacts
            .iter()
            .map(|a| FoldReport {
                fold: a.fold,
                n_test: a.test_labels.len(),
                n_test_critical: a.test_labels.iter().filter(|&&b| b).count(),
                threshold: a.threshold,
                metrics: a.metrics,
            })
            .collect(),
        pooled,
        fold_mean,
    };

    write_text(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&report).expect("serializable report"),
    )?;
    write_verdicts_csv(
        &out_dir.join("verdicts.csv"),
        artifacts.iter().flat_map(|a| a.verdicts.iter()),
    )?;
    write_curve_csv(
        &out_dir.join("roc_points.csv"),
        "fpr,tpr",
        &roc_curve(&scores, &labels).map_err(Error::in_stage("metrics"))?,
    )?;
    write_curve_csv(
        &out_dir.join("pr_points.csv"),
        "recall,precision",
        &pr_curve(&scores, &labels).map_err(Error::in_stage("metrics"))?,
    )?;

    Ok(Some(report))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn write_verdicts_csv<'a>(
    path: &Path,
    verdicts: impl Iterator<Item = &'a ElectrodeVerdict>,
) -> Result<()> {
    let mut out = String::from("subject,electrode,score,decision,threshold,n_trials,fold\n");
    for v in verdicts {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            v.subject, v.electrode, v.score, v.decision, v.threshold, v.n_trials, v.fold
        ));
    }
    write_text(path, &out)
}

fn write_curve_csv(path: &Path, header: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for (a, b) in points {
        out.push_str(&format!("{a},{b}\n"));
    }
    write_text(path, &out)
}

fn export_features_csv(
    path: &Path,
    features: &FoldFeatures,
    electrode_order: &[usize],
    labeled: &[LabeledElectrode],
    data: &[SubjectData],
) -> Result<()> {
    let mut header = vec![
        "subject".to_string(),
        "electrode".to_string(),
        "trial".to_string(),
        "label".to_string(),
        "split".to_string(),
    ];
    header.extend((NMF_RANGE.start..NMF_RANGE.end).map(|k| format!("nmf_corr_{k}")));
    header.push("mean_activity".to_string());
    header.extend((0..REGION_RANGE.len()).map(|r| format!("region_{r:02}")));
    header.push("strength".to_string());
    header.push("eigenvector_centrality".to_string());
    header.push("clustering_coefficient".to_string());
    debug_assert_eq!(header.len(), 5 + FEATURE_DIM);
    debug_assert_eq!(MEAN_ACTIVITY_IDX, 5);
    debug_assert_eq!(STRENGTH_IDX, 32);
    debug_assert_eq!(CENTRALITY_IDX, 33);
    debug_assert_eq!(CLUSTERING_IDX, 34);

    let mut out = header.join(",");
    out.push('\n');
    for (ei, span) in features.spans.iter().enumerate() {
        let le = labeled[electrode_order[ei]];
        let split = if span.start < features.n_train_rows {
            "train"
        } else {
            "test"
        };
        for (t, row) in span.clone().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}",
                data[le.subject].subject_id, le.electrode_id, t, le.label as u8, split
            ));
            for v in features.x.row(row) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    write_text(path, &out)
}

// ---------------------------------------------------------------------------
// ablation grid

/// Axes of the ablation grid; the default grid reproduces the feature-set,
/// classifier and aggregation comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridAxes {
    #[serde(default = "default_grid_masks")]
    pub masks: Vec<FeatureMask>,
    #[serde(default = "default_grid_classifiers")]
    pub classifiers: Vec<ClassifierSpec>,
    #[serde(default = "default_grid_aggregations")]
    pub aggregations: Vec<AggregationMethod>,
}

fn default_grid_masks() -> Vec<FeatureMask> {
    vec![
        FeatureMask::all(),
        FeatureMask::region_connectivity(),
        FeatureMask::region_only(),
        FeatureMask::connectivity_only(),
    ]
}

fn default_grid_classifiers() -> Vec<ClassifierSpec> {
    use crate::models::ClassifierKind::*;
    vec![
        ClassifierSpec::new(LinearSvm),
        ClassifierSpec::new(RbfSvm),
        ClassifierSpec::new(Logreg),
        ClassifierSpec::new(Mlp2),
    ]
}

fn default_grid_aggregations() -> Vec<AggregationMethod> {
    vec![
        AggregationMethod::Average,
        AggregationMethod::MlpHist,
        AggregationMethod::MlpHistRegion,
    ]
}

impl Default for GridAxes {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub mask: String,
    pub classifier: String,
    pub aggregation: String,
    pub pooled: Metrics,
    pub fold_mean: Option<FoldMeanMetrics>,
}

/// Run the cross-product of the grid axes; every cell shares the base
/// config (and therefore the folds and the preprocessing cache).
pub fn run_grid(base: &PipelineConfig, axes: &GridAxes, out_dir: &Path) -> Result<Vec<GridCell>> {
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut cells = Vec::new();
    for mask in &axes.masks {
        for classifier in &axes.classifiers {
            for aggregation in &axes.aggregations {
                let mut cfg = base.clone();
                cfg.features = *mask;
                cfg.classifier = *classifier;
                cfg.aggregation = *aggregation;
                let cell_dir = out_dir.join(format!(
                    "mask={}_clf={}_agg={}",
                    mask.label(),
                    classifier.kind.label(),
                    aggregation.label()
                ));
                let report = run_pipeline(&cfg, &cell_dir)?;
                cells.push(GridCell {
                    mask: mask.label(),
                    classifier: classifier.kind.label().to_string(),
                    aggregation: aggregation.label().to_string(),
                    pooled: report.pooled,
                    fold_mean: report.fold_mean,
                });
            }
        }
    }

    write_text(
        &out_dir.join("grid.json"),
        &serde_json::to_string_pretty(&cells).expect("serializable grid"),
    )?;
    let mut csv = String::from(
        "mask,classifier,aggregation,pooled_roc_auc,pooled_pr_auc,pooled_f1,fold_mean_roc_auc\n",
    );
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.mask,
            c.classifier,
            c.aggregation,
            c.pooled.roc_auc,
            c.pooled.pr_auc,
            c.pooled.f1,
            c.fold_mean.as_ref().map_or(f64::NAN, |m| m.roc_auc),
        ));
    }
    write_text(&out_dir.join("grid.csv"), &csv)?;
    Ok(cells)
}

// ---------------------------------------------------------------------------
// connectivity dump

/// Connectivity matrix of one preprocessed trial, for CSV export.
pub fn trial_connectivity_matrix(
    cfg: &PipelineConfig,
    subject: &str,
    task: Task,
    trial_id: u32,
) -> Result<(Vec<u32>, Array2<f64>)> {
    let dataset = load_dataset(&cfg.dataset)?;
    let subject_idx = dataset
        .subjects
        .iter()
        .position(|s| s.id.as_str() == subject)
        .ok_or_else(|| Error::Validation(format!("unknown subject '{subject}'")))?;
    let data = preprocess_subject(&dataset, subject_idx, cfg.signal)?;

    // flat trial index: recordings in manifest order, events in file order
    let mut flat = 0usize;
    let mut found = None;
    for rec in &dataset.subjects[subject_idx].recordings {
        for e in &rec.events {
            if rec.task == task && e.trial_id == trial_id {
                found = Some(flat);
            }
            flat += 1;
        }
    }
    let t = found.ok_or_else(|| {
        Error::Validation(format!("subject {subject}: no trial {trial_id} in task {task}"))
    })?;
    let graph = trial_connectivity(data.epochs.slice(s![t, .., ..]))?;
    Ok((data.electrode_ids.clone(), graph.weights().clone()))
}

/// Labels of every valid electrode per subject, exposed for tests and tools.
pub fn dataset_labels(dataset: &Dataset) -> Result<Vec<BTreeMap<u32, ElectrodeLabel>>> {
    dataset
        .subjects
        .iter()
        .map(|s| derive_labels(&s.esm, &s.electrodes))
        .collect()
}
