//! Logistic regression trained by full-batch gradient descent on
//! class-weighted cross-entropy.

use ndarray::{Array1, ArrayView2};

use crate::error::{Error, Result};
use crate::models::mlp::{clamp_prob, sigmoid};

#[derive(Debug, Clone)]
pub struct LogregModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    /// Mean weighted cross-entropy after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Mean class-weighted cross-entropy of a linear model; weights are
/// normalized by the total sample weight.
pub fn logreg_loss(
    weights: &Array1<f64>,
    bias: f64,
    x: ArrayView2<f64>,
    y: &[bool],
    class_weights: (f64, f64),
) -> f64 {
    let (w_pos, w_neg) = class_weights;
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (row, &yi) in x.outer_iter().zip(y) {
        let p = clamp_prob(sigmoid(row.dot(weights) + bias));
        let w = if yi { w_pos } else { w_neg };
        total += w * if yi { -p.ln() } else { -(1.0 - p).ln() };
        weight_sum += w;
    }
    total / weight_sum
}

/// Gradient of [`logreg_loss`] with respect to `(weights, bias)`.
pub fn logreg_grad(
    weights: &Array1<f64>,
    bias: f64,
    x: ArrayView2<f64>,
    y: &[bool],
    class_weights: (f64, f64),
) -> (Array1<f64>, f64) {
    let (w_pos, w_neg) = class_weights;
    let mut gw = Array1::zeros(weights.len());
    let mut gb = 0.0;
    let mut weight_sum = 0.0;
    for (row, &yi) in x.outer_iter().zip(y) {
        let p = clamp_prob(sigmoid(row.dot(weights) + bias));
        let w = if yi { w_pos } else { w_neg };
        let d = w * (p - if yi { 1.0 } else { 0.0 });
        gw = gw + &(&row * d);
        gb += d;
        weight_sum += w;
    }
    (gw / weight_sum, gb / weight_sum)
}

pub fn train_logreg(
    x: ArrayView2<f64>,
    y: &[bool],
    class_weights: (f64, f64),
    learning_rate: f64,
    epochs: usize,
) -> Result<LogregModel> {
    if epochs == 0 {
        return Err(Error::Config("logreg needs at least one epoch".into()));
    }
    let mut weights = Array1::zeros(x.ncols());
    let mut bias = 0.0;
    let mut loss_trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (gw, gb) = logreg_grad(&weights, bias, x, y, class_weights);
        weights = weights - &(gw * learning_rate);
        bias -= learning_rate * gb;
        loss_trace.push(logreg_loss(&weights, bias, x, y, class_weights));
    }
    Ok(LogregModel {
        weights,
        bias,
        loss_trace,
    })
}

impl LogregModel {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.weights.len() {
            return Err(Error::InvalidInput(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.weights.len()
            )));
        }
        Ok(x.outer_iter()
            .map(|row| sigmoid(row.dot(&self.weights) + self.bias))
            .collect())
    }
}
