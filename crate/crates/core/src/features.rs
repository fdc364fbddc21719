//! Per-electrode-per-trial feature vectors.
//!
//! Fixed 35-dimensional layout:
//!
//! ```text
//! [0..5)    correlations with the 5 prototype components
//! [5]       mean activity over the trial window
//! [6..32)   anatomical region one-hot (26 regions)
//! [32]      node strength
//! [33]      eigenvector centrality
//! [34]      clustering coefficient
//! ```
//!
//! Masked-out families stay zero and are excluded from scaler fitting, so
//! ablations keep a constant vector shape.

use std::ops::Range;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmf::NmfModel;
use crate::signal::TrialEpoch;

pub const FEATURE_DIM: usize = 35;
pub const N_REGIONS: usize = 26;
pub const NMF_RANGE: Range<usize> = 0..5;
pub const MEAN_ACTIVITY_IDX: usize = 5;
pub const REGION_RANGE: Range<usize> = 6..32;
pub const STRENGTH_IDX: usize = 32;
pub const CENTRALITY_IDX: usize = 33;
pub const CLUSTERING_IDX: usize = 34;

const SCALER_EPS: f64 = 1e-8;

/// One of the four feature families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Nmf,
    MeanActivity,
    Region,
    Connectivity,
}

/// Which families are populated. Serialized as a list of family names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<FeatureFamily>", into = "Vec<FeatureFamily>")]
pub struct FeatureMask {
    pub nmf: bool,
    pub mean_activity: bool,
    pub region: bool,
    pub connectivity: bool,
}

impl FeatureMask {
    pub fn all() -> Self {
        Self {
            nmf: true,
            mean_activity: true,
            region: true,
            connectivity: true,
        }
    }

    pub fn region_connectivity() -> Self {
        Self {
            nmf: false,
            mean_activity: false,
            region: true,
            connectivity: true,
        }
    }

    pub fn region_only() -> Self {
        Self {
            nmf: false,
            mean_activity: false,
            region: true,
            connectivity: false,
        }
    }

    pub fn connectivity_only() -> Self {
        Self {
            nmf: false,
            mean_activity: false,
            region: false,
            connectivity: true,
        }
    }

    pub fn families(&self) -> Vec<FeatureFamily> {
        let mut out = Vec::new();
        if self.nmf {
            out.push(FeatureFamily::Nmf);
        }
        if self.mean_activity {
            out.push(FeatureFamily::MeanActivity);
        }
        if self.region {
            out.push(FeatureFamily::Region);
        }
        if self.connectivity {
            out.push(FeatureFamily::Connectivity);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        !(self.nmf || self.mean_activity || self.region || self.connectivity)
    }

    /// Continuous dimensions subject to z-scoring under this mask.
    pub fn continuous_dims(&self) -> Vec<usize> {
        let mut dims = Vec::new();
        if self.nmf {
            dims.extend(NMF_RANGE);
        }
        if self.mean_activity {
            dims.push(MEAN_ACTIVITY_IDX);
        }
        if self.connectivity {
            dims.extend([STRENGTH_IDX, CENTRALITY_IDX, CLUSTERING_IDX]);
        }
        dims
    }

    /// Short label for reports, e.g. `region+connectivity`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = self
            .families()
            .iter()
            .map(|f| match f {
                FeatureFamily::Nmf => "nmf",
                FeatureFamily::MeanActivity => "mean_activity",
                FeatureFamily::Region => "region",
                FeatureFamily::Connectivity => "connectivity",
            })
            .collect();
        if names.len() == 4 {
            "all".to_string()
        } else {
            names.join("+")
        }
    }
}

impl From<Vec<FeatureFamily>> for FeatureMask {
    fn from(families: Vec<FeatureFamily>) -> Self {
        let mut mask = Self {
            nmf: false,
            mean_activity: false,
            region: false,
            connectivity: false,
        };
        for f in families {
            match f {
                FeatureFamily::Nmf => mask.nmf = true,
                FeatureFamily::MeanActivity => mask.mean_activity = true,
                FeatureFamily::Region => mask.region = true,
                FeatureFamily::Connectivity => mask.connectivity = true,
            }
        }
        mask
    }
}

impl From<FeatureMask> for Vec<FeatureFamily> {
    fn from(mask: FeatureMask) -> Self {
        mask.families()
    }
}

/// Arithmetic mean over the full trial window.
pub fn mean_activity(epoch: &[f64]) -> f64 {
    crate::stats::mean(epoch)
}

/// One-hot encoding of an anatomical region index.
pub fn region_one_hot(region_index: usize) -> Result<[f64; N_REGIONS]> {
    if region_index >= N_REGIONS {
        return Err(Error::InvalidInput(format!(
            "region index {region_index} outside [0, {})",
            N_REGIONS - 1
        )));
    }
    let mut v = [0.0; N_REGIONS];
    v[region_index] = 1.0;
    Ok(v)
}

/// Graph metrics for one electrode in one trial, tagged with provenance so
/// assembly can reject mismatched inputs.
#[derive(Debug, Clone, Copy)]
pub struct ElectrodeGraphMetrics {
    pub electrode: u32,
    pub trial_id: u32,
    pub strength: f64,
    pub centrality: f64,
    pub clustering: f64,
}

/// The assembled 35-dimensional feature vector for one electrode-trial.
#[derive(Debug, Clone)]
pub struct TrialFeatureVector {
    pub values: [f64; FEATURE_DIM],
    pub electrode: u32,
    pub trial_id: u32,
}

/// Assemble one feature row. All inputs must come from the same
/// electrode-trial; masked families are left at zero.
pub fn assemble_trial_features(
    epoch: &TrialEpoch,
    nmf_model: Option<&NmfModel>,
    graph: &ElectrodeGraphMetrics,
    region_index: usize,
    mask: FeatureMask,
) -> Result<TrialFeatureVector> {
    if epoch.electrode != graph.electrode || epoch.trial_id != graph.trial_id {
        return Err(Error::Validation(format!(
            "feature inputs disagree: epoch is electrode {}/trial {}, graph metrics are electrode {}/trial {}",
            epoch.electrode, epoch.trial_id, graph.electrode, graph.trial_id
        )));
    }
    let mut values = [0.0; FEATURE_DIM];
    if mask.nmf {
        let model = nmf_model.ok_or_else(|| {
            Error::InvalidInput("nmf family requested but no fitted model supplied".into())
        })?;
        let corr = crate::nmf::nmf_correlations(model, &epoch.samples)?;
        if corr.len() != NMF_RANGE.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} prototype components, model has {}",
                NMF_RANGE.len(),
                corr.len()
            )));
        }
        values[NMF_RANGE].copy_from_slice(&corr);
    }
    if mask.mean_activity {
        values[MEAN_ACTIVITY_IDX] = mean_activity(&epoch.samples);
    }
    if mask.region {
        let one_hot = region_one_hot(region_index)?;
        values[REGION_RANGE].copy_from_slice(&one_hot);
    } else {
        // still validate the index so bad data fails loudly in ablations
        region_one_hot(region_index)?;
    }
    if mask.connectivity {
        values[STRENGTH_IDX] = graph.strength;
        values[CENTRALITY_IDX] = graph.centrality;
        values[CLUSTERING_IDX] = graph.clustering;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite feature for electrode {} trial {}",
            epoch.electrode, epoch.trial_id
        )));
    }
    Ok(TrialFeatureVector {
        values,
        electrode: epoch.electrode,
        trial_id: epoch.trial_id,
    })
}

/// Z-score statistics for the continuous dimensions, fit on the training
/// split only. One-hot dimensions and masked families are untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureScaler {
    dims: Vec<usize>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureScaler {
    /// Fit on training rows (`[n x 35]`).
    pub fn fit(train: ArrayView2<f64>, mask: FeatureMask) -> Result<Self> {
        if train.ncols() != FEATURE_DIM {
            return Err(Error::InvalidInput(format!(
                "feature matrix has {} columns, expected {FEATURE_DIM}",
                train.ncols()
            )));
        }
        if train.nrows() == 0 {
            return Err(Error::InvalidInput("cannot fit scaler on zero rows".into()));
        }
        let dims = mask.continuous_dims();
        let n = train.nrows() as f64;
        let mut mean = Vec::with_capacity(dims.len());
        let mut std = Vec::with_capacity(dims.len());
        for &d in &dims {
            let col = train.column(d);
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(var.sqrt().max(SCALER_EPS));
        }
        Ok(Self { dims, mean, std })
    }

    /// Standardize the continuous dimensions in place using the fitted
    /// training statistics.
    pub fn transform(&self, mut x: ArrayViewMut2<f64>) {
        for (slot, &d) in self.dims.iter().enumerate() {
            let mu = self.mean[slot];
            let sd = self.std[slot];
            for v in x.column_mut(d).iter_mut() {
                *v = (*v - mu) / sd;
            }
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn epoch(electrode: u32, trial: u32, samples: Vec<f64>) -> TrialEpoch {
        TrialEpoch {
            electrode,
            trial_id: trial,
            samples,
        }
    }

    fn metrics(electrode: u32, trial: u32) -> ElectrodeGraphMetrics {
        ElectrodeGraphMetrics {
            electrode,
            trial_id: trial,
            strength: 0.4,
            centrality: 0.3,
            clustering: 0.2,
        }
    }

    #[test]
    fn mean_activity_examples() {
        assert_eq!(mean_activity(&[1.0; 10]), 1.0);
        assert_eq!(mean_activity(&[-1.0, 1.0, -1.0, 1.0]), 0.0);
        // two-pass summation oracle on a random epoch
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..101).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let naive = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean_activity(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn one_hot_bounds() {
        let lo = region_one_hot(0).unwrap();
        assert_eq!(lo[0], 1.0);
        assert_eq!(lo.iter().sum::<f64>(), 1.0);
        let hi = region_one_hot(25).unwrap();
        assert_eq!(hi[25], 1.0);
        assert!(region_one_hot(26).is_err());
    }

    #[test]
    fn assemble_all_families() {
        let samples: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let x = Array2::from_shape_fn((8, 6), |(i, j)| 0.1 + ((i + j) as f64 * 0.37).sin().abs());
        let model = crate::nmf::fit_nmf(x.view(), &crate::nmf::NmfOptions { components: 5, max_iters: 30, tol: 0.0 }, 1).unwrap();
        let fv = assemble_trial_features(
            &epoch(2, 9, samples),
            Some(&model),
            &metrics(2, 9),
            4,
            FeatureMask::all(),
        )
        .unwrap();
        assert_eq!(fv.values.len(), FEATURE_DIM);
        assert_eq!(fv.values[REGION_RANGE][4], 1.0);
        assert_eq!(fv.values[REGION_RANGE].iter().sum::<f64>(), 1.0);
        assert_eq!(fv.values[STRENGTH_IDX], 0.4);
        assert!(fv.values[MEAN_ACTIVITY_IDX] > 0.0);
    }

    #[test]
    fn assemble_region_connectivity_zeroes_signal_families() {
        let fv = assemble_trial_features(
            &epoch(0, 0, vec![1.0, 2.0, 3.0]),
            None,
            &metrics(0, 0),
            7,
            FeatureMask::region_connectivity(),
        )
        .unwrap();
        assert!(fv.values[NMF_RANGE].iter().all(|&v| v == 0.0));
        assert_eq!(fv.values[MEAN_ACTIVITY_IDX], 0.0);
        assert_eq!(fv.values[REGION_RANGE][7], 1.0);
        assert_eq!(fv.values[STRENGTH_IDX], 0.4);
    }

    #[test]
    fn assemble_region_only_single_nonzero() {
        let fv = assemble_trial_features(
            &epoch(0, 0, vec![5.0; 4]),
            None,
            &metrics(0, 0),
            0,
            FeatureMask::region_only(),
        )
        .unwrap();
        assert_eq!(fv.values.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(fv.values[REGION_RANGE.start], 1.0);
    }

    #[test]
    fn assemble_rejects_mismatched_inputs() {
        let err = assemble_trial_features(
            &epoch(1, 2, vec![0.0; 4]),
            None,
            &metrics(1, 3),
            0,
            FeatureMask::region_only(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn scaler_standardizes_training_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = FeatureMask::all();
        let mut x = Array2::zeros((200, FEATURE_DIM));
        for mut row in x.outer_iter_mut() {
            for d in mask.continuous_dims() {
                row[d] = rng.random::<f64>() * 3.0 + 1.0;
            }
            row[REGION_RANGE.start + 3] = 1.0;
        }
        let scaler = FeatureScaler::fit(x.view(), mask).unwrap();
        scaler.transform(x.view_mut());
        for d in mask.continuous_dims() {
            let col = x.column(d);
            let mu = col.sum() / 200.0;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 200.0;
            assert!(mu.abs() < 1e-6, "dim {d} mean {mu}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "dim {d} std {}", var.sqrt());
        }
        // one-hot column untouched
        assert!(x.column(REGION_RANGE.start + 3).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scaler_uses_training_statistics_on_test_rows() {
        let mask = FeatureMask::region_connectivity();
        let mut train = Array2::zeros((50, FEATURE_DIM));
        for (i, mut row) in train.outer_iter_mut().enumerate() {
            row[STRENGTH_IDX] = i as f64;
        }
        let scaler = FeatureScaler::fit(train.view(), mask).unwrap();
        let mut test = Array2::zeros((1, FEATURE_DIM));
        test[[0, STRENGTH_IDX]] = 24.5; // the training mean
        scaler.transform(test.view_mut());
        assert!(test[[0, STRENGTH_IDX]].abs() < 1e-9);
        // masked family dims are not in the scaler at all
        assert!(!scaler.dims().contains(&MEAN_ACTIVITY_IDX));
        assert!(!scaler.dims().contains(&NMF_RANGE.start));
    }

    #[test]
    fn scaler_clamps_zero_variance() {
        let train = Array2::zeros((10, FEATURE_DIM));
        let scaler = FeatureScaler::fit(train.view(), FeatureMask::all()).unwrap();
        let mut test = Array2::from_elem((1, FEATURE_DIM), 0.0);
        scaler.transform(test.view_mut());
        assert!(test.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_serde_round_trip() {
        let mask = FeatureMask::region_connectivity();
        let json = serde_json::to_string(&mask).unwrap();
        assert_eq!(json, r#"["region","connectivity"]"#);
        let back: FeatureMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, mask);
    }
}
