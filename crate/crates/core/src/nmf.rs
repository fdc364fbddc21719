//! Nonnegative matrix factorization of trial signals into prototype
//! temporal patterns, and per-trial correlation features against them.
//!
//! The data matrix holds one column per electrode-trial; multiplicative
//! updates minimize the Frobenius reconstruction error. Only the basis is
//! kept after fitting; trials are featurized by Pearson correlation with
//! each basis column.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::pearson;

/// Stabilization floor inside update denominators and on factor entries.
const NMF_EPS: f64 = 1e-12;

/// Fitting options. `tol` is the relative per-iteration improvement below
/// which the fit stops early.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NmfOptions {
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_components() -> usize {
    5
}
fn default_max_iters() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-5
}

impl Default for NmfOptions {
    fn default() -> Self {
        Self {
            components: default_components(),
            max_iters: default_max_iters(),
            tol: default_tol(),
        }
    }
}

/// Fitted prototype basis, `[M x K]` nonnegative.
#[derive(Debug, Clone)]
pub struct NmfModel {
    basis: Array2<f64>,
    pub iterations: usize,
    pub frobenius_error: f64,
    /// Frobenius loss after every iteration, for convergence diagnostics.
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NmfModelMeta {
    samples: usize,
    components: usize,
    iterations: usize,
    frobenius_error: f64,
}

impl NmfModel {
    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn epoch_len(&self) -> usize {
        self.basis.nrows()
    }

    /// Write `<base>.json` + `<base>.f32` (row-major little-endian basis).
    pub fn save(&self, base: &Path) -> Result<()> {
        let meta = NmfModelMeta {
            samples: self.basis.nrows(),
            components: self.basis.ncols(),
            iterations: self.iterations,
            frobenius_error: self.frobenius_error,
        };
        let json_path = base.with_extension("json");
        let bin_path = base.with_extension("f32");
        fs::write(
            &json_path,
            serde_json::to_string_pretty(&meta).expect("serializable meta"),
        )
        .map_err(Error::io(&json_path))?;
        let mut bytes = Vec::with_capacity(self.basis.len() * 4);
        for &v in self.basis.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&bin_path, bytes).map_err(Error::io(&bin_path))?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let json_path = base.with_extension("json");
        let bin_path = base.with_extension("f32");
        let meta: NmfModelMeta = serde_json::from_str(
            &fs::read_to_string(&json_path).map_err(Error::io(&json_path))?,
        )
        .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
        let bytes = fs::read(&bin_path).map_err(Error::io(&bin_path))?;
        let expect = meta.samples * meta.components * 4;
        if bytes.len() != expect {
            return Err(Error::Format(format!(
                "{}: expected {expect} bytes for {}x{} basis, found {}",
                bin_path.display(),
                meta.samples,
                meta.components,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let basis = Array2::from_shape_vec((meta.samples, meta.components), values)
            .expect("shape checked above");
        Ok(Self {
            basis,
            iterations: meta.iterations,
            frobenius_error: meta.frobenius_error,
            loss_trace: Vec::new(),
        })
    }

    /// Round the basis through its float32 serialization in memory, so
    /// results are identical whether the model came fresh or from cache.
    pub fn quantize_to_f32(&mut self) {
        self.basis.mapv_inplace(|v| v as f32 as f64);
    }
}

fn frobenius(x: &ArrayView2<f64>, t: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let diff = x - &t.dot(h);
    diff.mapv(|v| v * v).sum().sqrt()
}

/// Factorize nonnegative `x` (`[M x N]`, one column per trial) into `K`
/// prototype components by Lee-Seung multiplicative updates on the
/// Frobenius objective.
pub fn fit_nmf(x: ArrayView2<f64>, opts: &NmfOptions, seed: u64) -> Result<NmfModel> {
    let (m, n) = x.dim();
    let k = opts.components;
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidInput(format!(
            "component count {k} must be in [1, min(M={m}, N={n})]"
        )));
    }
    if let Some(neg) = x.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "data matrix entries must be finite and nonnegative, found {neg}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Uniform(0, 1] so no factor entry starts at zero.
    let mut t = Array2::from_shape_fn((m, k), |_| 1.0 - rng.random::<f64>());
    let mut h = Array2::from_shape_fn((k, n), |_| 1.0 - rng.random::<f64>());

    let mut loss_trace = Vec::new();
    let mut prev = frobenius(&x, &t, &h);
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        // H <- H .* (T'X) ./ (T'T H + eps)
        let tt = t.t().dot(&t);
        let num_h = t.t().dot(&x);
        let den_h = tt.dot(&h) + NMF_EPS;
        h = (&h * &num_h) / &den_h;
        h.mapv_inplace(|v| v.max(NMF_EPS));

        // T <- T .* (X H') ./ (T H H' + eps)
        let hh = h.dot(&h.t());
        let num_t = x.dot(&h.t());
        let den_t = t.dot(&hh) + NMF_EPS;
        t = (&t * &num_t) / &den_t;
        t.mapv_inplace(|v| v.max(NMF_EPS));

        debug_assert!(t.iter().all(|&v| v >= 0.0), "basis left the nonnegative orthant");
        debug_assert!(h.iter().all(|&v| v >= 0.0), "coefficients left the nonnegative orthant");

        let loss = frobenius(&x, &t, &h);
        loss_trace.push(loss);
        iterations += 1;
        let improvement = (prev - loss) / prev.max(NMF_EPS);
        prev = loss;
        if improvement.abs() < opts.tol {
            break;
        }
    }

    Ok(NmfModel {
        basis: t,
        iterations,
        frobenius_error: prev,
        loss_trace,
    })
}

/// Correlate one epoch with every basis column. Constant epochs or columns
/// yield 0 by the zero-variance convention.
pub fn nmf_correlations(model: &NmfModel, epoch: &[f64]) -> Result<Vec<f64>> {
    if epoch.len() != model.epoch_len() {
        return Err(Error::InvalidInput(format!(
            "epoch length {} does not match basis length {}",
            epoch.len(),
            model.epoch_len()
        )));
    }
    Ok((0..model.components())
        .map(|k| {
            let col = model.basis.column(k);
            pearson(epoch, col.as_slice().unwrap_or(&col.to_vec()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn opts(k: usize, iters: usize, tol: f64) -> NmfOptions {
        NmfOptions {
            components: k,
            max_iters: iters,
            tol,
        }
    }

    #[test]
    fn rank_one_matrix_recovered() {
        let t = Array1::from_vec((0..30).map(|i| 0.1 + (i as f64 * 0.3).sin().abs()).collect());
        let h = Array1::from_vec((0..20).map(|i| 0.2 + (i as f64 * 0.7).cos().abs()).collect());
        let mut x = Array2::zeros((30, 20));
        for i in 0..30 {
            for j in 0..20 {
                x[[i, j]] = t[i] * h[j];
            }
        }
        let model = fit_nmf(x.view(), &opts(1, 500, 0.0), 42).unwrap();
        let norm_x = x.mapv(|v| v * v).sum().sqrt();
        assert!(
            model.frobenius_error / norm_x < 1e-3,
            "relative error {}",
            model.frobenius_error / norm_x
        );
    }

    #[test]
    fn zero_matrix_converges_to_zero_error() {
        let x = Array2::zeros((10, 8));
        let model = fit_nmf(x.view(), &opts(2, 300, 0.0), 1).unwrap();
        assert!(model.frobenius_error < 1e-6);
        // epsilon floor keeps every basis column nonzero
        for k in 0..2 {
            assert!(model.basis().column(k).iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn loss_is_monotone_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((384, 500), |_| rng.random::<f64>());
        let model = fit_nmf(x.view(), &opts(5, 200, 0.0), 3).unwrap();
        assert_eq!(model.loss_trace.len(), 200);
        for w in model.loss_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-10 * w[0].max(1.0),
                "loss increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((20, 15), |_| rng.random::<f64>());
        let a = fit_nmf(x.view(), &opts(3, 50, 0.0), 5).unwrap();
        let b = fit_nmf(x.view(), &opts(3, 50, 0.0), 5).unwrap();
        assert_eq!(a.basis(), b.basis());
    }

    #[test]
    fn rejects_negative_input() {
        let mut x = Array2::zeros((4, 4));
        x[[1, 2]] = -0.5;
        assert!(matches!(
            fit_nmf(x.view(), &opts(2, 10, 0.0), 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn rejects_oversized_rank() {
        let x = Array2::zeros((4, 3));
        assert!(matches!(
            fit_nmf(x.view(), &opts(4, 10, 0.0), 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn correlation_with_own_basis_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array2::from_shape_fn((24, 30), |_| rng.random::<f64>());
        let model = fit_nmf(x.view(), &opts(3, 200, 1e-7), 2).unwrap();
        let col: Vec<f64> = model.basis().column(0).to_vec();
        let corr = nmf_correlations(&model, &col).unwrap();
        assert!((corr[0] - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = col.iter().map(|v| -v).collect();
        let corr_neg = nmf_correlations(&model, &neg).unwrap();
        assert!((corr_neg[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_epoch_correlates_to_zero() {
        let x = Array2::from_elem((8, 6), 0.5)
            + Array2::from_shape_fn((8, 6), |(i, j)| 0.01 * ((i * 7 + j) as f64).sin().abs());
        let model = fit_nmf(x.view(), &opts(2, 50, 0.0), 4).unwrap();
        let corr = nmf_correlations(&model, &vec![3.0; 8]).unwrap();
        assert!(corr.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn correlations_are_shift_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((16, 12), |_| rng.random::<f64>());
        let model = fit_nmf(x.view(), &opts(2, 100, 0.0), 6).unwrap();
        let epoch: Vec<f64> = (0..16).map(|i| (i as f64 * 0.9).sin()).collect();
        let scaled: Vec<f64> = epoch.iter().map(|v| 2.5 * v + 7.0).collect();
        let a = nmf_correlations(&model, &epoch).unwrap();
        let b = nmf_correlations(&model, &scaled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let x = Array2::from_elem((8, 6), 0.5);
        let model = fit_nmf(x.view(), &opts(2, 10, 0.0), 0).unwrap();
        assert!(matches!(
            nmf_correlations(&model, &[1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_fn((12, 9), |_| rng.random::<f64>());
        let mut model = fit_nmf(x.view(), &opts(2, 50, 0.0), 8).unwrap();
        model.quantize_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("nmf");
        model.save(&base).unwrap();
        let loaded = NmfModel::load(&base).unwrap();
        assert_eq!(loaded.basis(), model.basis());
        assert_eq!(loaded.iterations, model.iterations);
    }
}
