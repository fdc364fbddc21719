//! Stage-2 aggregation of trial scores into one electrode-level verdict.
//!
//! Two strategies: plain averaging of trial probabilities, and a 10-bin
//! score histogram (optionally concatenated with the electrode's region
//! one-hot) fed to a 2-layer MLP trained with focal loss against the class
//! imbalance.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::N_REGIONS;
use crate::models::mlp::{clamp_prob, BinaryLoss, DenseNet, TrainOptions};

pub const HISTOGRAM_BINS: usize = 10;
/// Aggregator input: 10 histogram bins + 26 region encodings.
pub const AGGREGATOR_INPUT_DIM: usize = HISTOGRAM_BINS + N_REGIONS;

/// Aggregation strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Average,
    MlpHist,
    MlpHistRegion,
}

impl AggregationMethod {
    pub fn label(&self) -> &'static str {
        match self {
            AggregationMethod::Average => "average",
            AggregationMethod::MlpHist => "mlp_hist",
            AggregationMethod::MlpHistRegion => "mlp_hist_region",
        }
    }

    pub fn uses_mlp(&self) -> bool {
        !matches!(self, AggregationMethod::Average)
    }

    pub fn uses_region(&self) -> bool {
        matches!(self, AggregationMethod::MlpHistRegion)
    }
}

/// Mean of the trial probabilities.
pub fn aggregate_by_average(trial_scores: &[f64]) -> Result<f64> {
    if trial_scores.is_empty() {
        return Err(Error::InvalidInput(
            "cannot aggregate an empty score list".into(),
        ));
    }
    Ok(trial_scores.iter().sum::<f64>() / trial_scores.len() as f64)
}

/// Normalized 10-bin histogram over `[0, 1]`; bin `k` covers
/// `[k/10, (k+1)/10)` with the last bin closed at 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram {
    counts: [f64; HISTOGRAM_BINS],
}

impl ScoreHistogram {
    pub fn counts(&self) -> &[f64; HISTOGRAM_BINS] {
        &self.counts
    }
}

pub fn score_histogram(trial_scores: &[f64]) -> Result<ScoreHistogram> {
    if trial_scores.is_empty() {
        return Err(Error::InvalidInput(
            "cannot histogram an empty score list".into(),
        ));
    }
    let mut counts = [0.0; HISTOGRAM_BINS];
    for &s in trial_scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidInput(format!(
                "trial score {s} outside [0, 1]"
            )));
        }
        let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1.0;
    }
    let n = trial_scores.len() as f64;
    for c in counts.iter_mut() {
        *c /= n;
    }
    Ok(ScoreHistogram { counts })
}

/// Focal loss parameters; `alpha` weights the positive class.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalParams {
    #[serde(default = "default_focal_gamma")]
    pub gamma: f64,
    #[serde(default = "default_focal_alpha")]
    pub alpha: f64,
}

fn default_focal_gamma() -> f64 {
    2.0
}
// Positive-class weight of 5/6 matches the roughly 1:5 imbalance.
fn default_focal_alpha() -> f64 {
    0.83
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: default_focal_gamma(),
            alpha: default_focal_alpha(),
        }
    }
}

/// Focal loss of a single prediction:
/// `y=1: -alpha (1-p)^gamma ln p`, `y=0: -(1-alpha) p^gamma ln(1-p)`.
pub fn focal_loss(p: f64, y: bool, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

impl BinaryLoss for FocalParams {
    fn value(&self, p: f64, y: bool) -> f64 {
        focal_loss(p, y, self.gamma, self.alpha)
    }

    fn grad_logit(&self, p: f64, y: bool) -> f64 {
        let p = clamp_prob(p);
        let (gamma, alpha) = (self.gamma, self.alpha);
        if y {
            alpha * (1.0 - p).powf(gamma) * (gamma * p * p.ln() - (1.0 - p))
        } else {
            (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * (1.0 - p).ln())
        }
    }
}

/// Training options for the aggregator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregatorOptions {
    #[serde(default = "default_agg_epochs")]
    pub epochs: usize,
    #[serde(default = "default_agg_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_agg_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub focal: FocalParams,
}

fn default_agg_epochs() -> usize {
    20
}
fn default_agg_lr() -> f64 {
    1e-3
}
fn default_agg_batch() -> usize {
    32
}

impl Default for AggregatorOptions {
    fn default() -> Self {
        Self {
            epochs: default_agg_epochs(),
            learning_rate: default_agg_lr(),
            batch_size: default_agg_batch(),
            focal: FocalParams::default(),
        }
    }
}

/// 36 -> 64 -> 32 -> 1 network over histogram + region inputs.
#[derive(Debug, Clone)]
pub struct AggregatorMlp {
    pub net: DenseNet,
    pub focal: FocalParams,
    pub loss_trace: Vec<f64>,
}

/// Build one aggregator input row; the region block is zeroed when the
/// method ignores anatomy so the input width stays fixed.
pub fn aggregator_input(
    hist: &ScoreHistogram,
    region_one_hot: Option<&[f64; N_REGIONS]>,
) -> [f64; AGGREGATOR_INPUT_DIM] {
    let mut row = [0.0; AGGREGATOR_INPUT_DIM];
    row[..HISTOGRAM_BINS].copy_from_slice(hist.counts());
    if let Some(region) = region_one_hot {
        row[HISTOGRAM_BINS..].copy_from_slice(region);
    }
    row
}

/// Train the aggregator on `[E x 36]` rows with focal loss and Adam.
pub fn train_aggregator_mlp(
    x: ArrayView2<f64>,
    labels: &[bool],
    opts: &AggregatorOptions,
    seed: u64,
) -> Result<AggregatorMlp> {
    if x.ncols() != AGGREGATOR_INPUT_DIM {
        return Err(Error::InvalidInput(format!(
            "aggregator input must be {AGGREGATOR_INPUT_DIM}-dimensional, got {}",
            x.ncols()
        )));
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Training(
            "aggregator training labels contain a single class".into(),
        ));
    }
    let mut net = DenseNet::new(&[AGGREGATOR_INPUT_DIM, 64, 32, 1], seed);
    let loss_trace = net.train(
        x,
        labels,
        &opts.focal,
        &TrainOptions {
            epochs: opts.epochs,
            learning_rate: opts.learning_rate,
            batch_size: opts.batch_size,
            seed,
        },
    )?;
    Ok(AggregatorMlp {
        net,
        focal: opts.focal,
        loss_trace,
    })
}

impl AggregatorMlp {
    pub fn score(&self, input: &[f64; AGGREGATOR_INPUT_DIM]) -> Result<f64> {
        let x = Array2::from_shape_vec((1, AGGREGATOR_INPUT_DIM), input.to_vec())
            .expect("fixed shape");
        Ok(self.net.predict_proba(x.view())?[0])
    }
}

/// Either aggregation path, ready to score electrodes.
pub enum ElectrodeAggregator<'a> {
    Average,
    Mlp {
        model: &'a AggregatorMlp,
        use_region: bool,
    },
}

/// Per-electrode aggregated score, decision and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElectrodeVerdict {
    pub subject: String,
    pub electrode: u32,
    pub score: f64,
    pub decision: bool,
    pub threshold: f64,
    pub n_trials: usize,
    pub fold: usize,
}

/// Aggregate one electrode's trial scores into a verdict.
#[allow(clippy::too_many_arguments)]
pub fn predict_electrode(
    aggregator: &ElectrodeAggregator,
    trial_scores: &[f64],
    region_one_hot: &[f64; N_REGIONS],
    threshold: f64,
    subject: &str,
    electrode: u32,
    fold: usize,
) -> Result<ElectrodeVerdict> {
    let score = electrode_score(aggregator, trial_scores, region_one_hot)?;
    Ok(ElectrodeVerdict {
        subject: subject.to_string(),
        electrode,
        score,
        decision: score >= threshold,
        threshold,
        n_trials: trial_scores.len(),
        fold,
    })
}

/// The aggregated electrode score without the thresholded decision.
pub fn electrode_score(
    aggregator: &ElectrodeAggregator,
    trial_scores: &[f64],
    region_one_hot: &[f64; N_REGIONS],
) -> Result<f64> {
    match aggregator {
        ElectrodeAggregator::Average => aggregate_by_average(trial_scores),
        ElectrodeAggregator::Mlp { model, use_region } => {
            let hist = score_histogram(trial_scores)?;
            let region = use_region.then_some(region_one_hot);
            model.score(&aggregator_input(&hist, region))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::region_one_hot;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn average_examples() {
        assert!((aggregate_by_average(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(aggregate_by_average(&[0.73]).unwrap(), 0.73);
        assert!(aggregate_by_average(&[]).is_err());
    }

    #[test]
    fn average_matches_kahan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        // compensated-summation oracle
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &s in &scores {
            let y = s - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let kahan_mean = sum / scores.len() as f64;
        assert!((aggregate_by_average(&scores).unwrap() - kahan_mean).abs() < 1e-12);
    }

    #[test]
    fn average_is_permutation_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scores: Vec<f64> = (0..37).map(|_| rng.random::<f64>()).collect();
        let a = aggregate_by_average(&scores).unwrap();
        scores.reverse();
        let b = aggregate_by_average(&scores).unwrap();
        assert!((a - b).abs() < 1e-12);
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(a >= lo && a <= hi);
    }

    #[test]
    fn histogram_examples() {
        let h = score_histogram(&[0.0, 0.0]).unwrap();
        assert_eq!(h.counts()[0], 1.0);

        let h = score_histogram(&[1.0]).unwrap();
        assert_eq!(h.counts()[9], 1.0);

        let h = score_histogram(&[0.05, 0.15, 0.15, 0.95]).unwrap();
        let mut expect = [0.0; 10];
        expect[0] = 0.25;
        expect[1] = 0.5;
        expect[9] = 0.25;
        assert_eq!(h.counts(), &expect);
    }

    #[test]
    fn histogram_mass_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 7, 100] {
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let h = score_histogram(&scores).unwrap();
            let mass: f64 = h.counts().iter().sum();
            assert!((mass - 1.0).abs() < 1e-9);
            assert!(h.counts().iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn histogram_rejects_out_of_range() {
        assert!(score_histogram(&[0.5, 1.2]).is_err());
        assert!(score_histogram(&[-0.1]).is_err());
    }

    #[test]
    fn focal_reduces_to_half_bce_at_gamma_zero() {
        for &(p, y) in &[(0.3, true), (0.3, false), (0.9, true), (0.02, false)] {
            let focal = focal_loss(p, y, 0.0, 0.5);
            let bce = if y {
                -clamp_prob(p).ln()
            } else {
                -(1.0 - clamp_prob(p)).ln()
            };
            assert!((focal - 0.5 * bce).abs() < 1e-12, "p={p} y={y}");
        }
    }

    #[test]
    fn focal_hand_value() {
        // p=0.5, y=1, gamma=2, alpha=1 -> 0.25 * ln 2
        let v = focal_loss(0.5, true, 2.0, 1.0);
        assert!((v - 0.25 * 2.0_f64.ln()).abs() < 1e-12);
        assert!((v - 0.17328679).abs() < 1e-6);
    }

    #[test]
    fn focal_vanishes_for_confident_correct() {
        assert!(focal_loss(1.0 - 1e-9, true, 2.0, 0.83) < 1e-6);
        assert!(focal_loss(1e-9, false, 2.0, 0.83) < 1e-6);
    }

    #[test]
    fn focal_nonnegative_and_monotone_in_p_for_positives() {
        let params = FocalParams { gamma: 2.0, alpha: 0.83 };
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let v = focal_loss(p, true, params.gamma, params.alpha);
            assert!(v >= 0.0);
            assert!(v <= prev, "focal loss not decreasing in p at {p}");
            prev = v;
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let params = FocalParams { gamma: 2.0, alpha: 0.7 };
        let h = 1e-6;
        for &(z, y) in &[(0.4, true), (-1.3, false), (2.0, true), (0.0, false)] {
            let p = crate::models::mlp::sigmoid(z);
            let analytic = params.grad_logit(p, y);
            let up = params.value(crate::models::mlp::sigmoid(z + h), y);
            let down = params.value(crate::models::mlp::sigmoid(z - h), y);
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() / numeric.abs().max(1e-6) < 1e-4,
                "z={z} y={y}: {analytic} vs {numeric}"
            );
        }
    }

    fn separable_histograms(n: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
        // positives carry mass in high bins, negatives in low bins
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, AGGREGATOR_INPUT_DIM));
        let mut y = Vec::with_capacity(n);
        for (i, mut row) in x.outer_iter_mut().enumerate() {
            let pos = i % 4 == 0;
            let spread: f64 = rng.random::<f64>() * 0.2;
            if pos {
                row[8] = 0.8 - spread;
                row[9] = 0.2 + spread;
                row[HISTOGRAM_BINS + 3] = 1.0;
            } else {
                row[0] = 0.8 - spread;
                row[1] = 0.2 + spread;
                row[HISTOGRAM_BINS + 11] = 1.0;
            }
            y.push(pos);
        }
        (x, y)
    }

    #[test]
    fn aggregator_learns_separable_histograms() {
        let (x, y) = separable_histograms(160, 4);
        let model = train_aggregator_mlp(x.view(), &y, &AggregatorOptions::default(), 7).unwrap();
        let probs = model.net.predict_proba(x.view()).unwrap();
        let acc = probs
            .iter()
            .zip(&y)
            .filter(|(p, &yi)| (**p >= 0.5) == yi)
            .count() as f64
            / y.len() as f64;
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn aggregator_on_shuffled_labels_is_chance_level() {
        // train on shuffled labels, evaluate on held-out rows; mean over
        // three shuffle seeds to keep the chance-level check stable
        let (x, y) = separable_histograms(240, 5);
        let train = x.slice(ndarray::s![..160, ..]);
        let test = x.slice(ndarray::s![160.., ..]);
        let mut aucs = Vec::new();
        for seed in [97u64, 98, 99] {
            let mut shuffled = y.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let model =
                train_aggregator_mlp(train, &shuffled[..160], &AggregatorOptions::default(), 7)
                    .unwrap();
            let probs = model.net.predict_proba(test).unwrap();
            aucs.push(crate::eval::roc_auc(&probs, &shuffled[160..]).unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "permutation control aucs {aucs:?}");
    }

    #[test]
    fn aggregator_gradients_match_finite_differences() {
        let (x, y) = separable_histograms(24, 6);
        let model = train_aggregator_mlp(
            x.view(),
            &y,
            &AggregatorOptions {
                epochs: 2,
                ..AggregatorOptions::default()
            },
            3,
        )
        .unwrap();
        let focal = model.focal;
        let (_, grad) = model.net.loss_and_flat_grad(x.view(), &y, &focal);
        let params = model.net.flat_params();
        let mut probe = model.net.clone();
        let err = crate::models::mlp::finite_difference_check(&params, &grad, |p| {
            probe.set_flat_params(p);
            probe.loss(x.view(), &y, &focal)
        });
        assert!(err < 1e-4, "relative gradient error {err}");
    }

    #[test]
    fn aggregator_rejects_wrong_width() {
        let x = Array2::zeros((4, 35));
        let y = vec![true, false, true, false];
        assert!(matches!(
            train_aggregator_mlp(x.view(), &y, &AggregatorOptions::default(), 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn predict_electrode_averaging_paths() {
        let region = region_one_hot(3).unwrap();
        let v = predict_electrode(
            &ElectrodeAggregator::Average,
            &[1.0, 1.0, 1.0],
            &region,
            0.5,
            "s00",
            4,
            0,
        )
        .unwrap();
        assert!(v.decision);
        assert_eq!(v.n_trials, 3);

        let v = predict_electrode(
            &ElectrodeAggregator::Average,
            &[0.0, 0.0],
            &region,
            0.5,
            "s00",
            4,
            0,
        )
        .unwrap();
        assert!(!v.decision);
        assert_eq!(v.score, 0.0);
    }

    #[test]
    fn predict_electrode_mlp_path_is_deterministic() {
        let (x, y) = separable_histograms(80, 8);
        let run = || {
            let model =
                train_aggregator_mlp(x.view(), &y, &AggregatorOptions::default(), 11).unwrap();
            let agg = ElectrodeAggregator::Mlp {
                model: &model,
                use_region: true,
            };
            let region = region_one_hot(3).unwrap();
            predict_electrode(&agg, &[0.0, 0.05, 0.02], &region, 0.5, "s01", 9, 2)
                .unwrap()
                .score
        };
        let (a, b) = (run(), run());
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
