//! Platt scaling: maps raw SVM decision values to calibrated probabilities
//! through a fitted sigmoid `p = sigmoid(a*f + b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::mlp::sigmoid;

const MAX_NEWTON_ITERS: usize = 100;
const GRAD_TOL: f64 = 1e-8;
const RIDGE: f64 = 1e-12;

/// Fitted sigmoid parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
    /// False when Newton iterations were exhausted; the best iterate is
    /// still returned.
    pub converged: bool,
    pub iterations: usize,
}

impl PlattParams {
    /// Identity calibration used by models that already emit probabilities
    /// through a logistic output (`sigmoid(1.0 * f + 0.0)` on a logit).
    pub fn identity() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            converged: true,
            iterations: 0,
        }
    }

    pub fn apply(&self, decision_value: f64) -> f64 {
        sigmoid(self.a * decision_value + self.b)
    }
}

fn objective(decisions: &[f64], targets: &[f64], a: f64, b: f64) -> f64 {
    let mut obj = 0.0;
    for (&f, &t) in decisions.iter().zip(targets) {
        let z = a * f + b;
        // -[t ln p + (1-t) ln(1-p)] written against the logit for stability
        obj += if z >= 0.0 {
            (1.0 - t) * z + (1.0 + (-z).exp()).ln()
        } else {
            -t * z + (1.0 + z.exp()).ln()
        };
    }
    obj
}

/// Fit the sigmoid by Newton iterations on the regularized log-loss with
/// Platt's smoothed targets `(N+ + 1)/(N+ + 2)` and `1/(N- + 2)`.
pub fn fit_platt(decision_values: &[f64], labels: &[bool]) -> Result<PlattParams> {
    if decision_values.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} decision values but {} labels",
            decision_values.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Training(
            "probability calibration needs both classes".into(),
        ));
    }

    let t_pos = (n_pos as f64 + 1.0) / (n_pos as f64 + 2.0);
    let t_neg = 1.0 / (n_neg as f64 + 2.0);
    let targets: Vec<f64> = labels
        .iter()
        .map(|&y| if y { t_pos } else { t_neg })
        .collect();

    let mut a = 0.0;
    let mut b = ((n_pos as f64 + 1.0) / (n_neg as f64 + 1.0)).ln();
    let mut obj = objective(decision_values, &targets, a, b);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_NEWTON_ITERS {
        iterations += 1;
        let mut ga = 0.0;
        let mut gb = 0.0;
        let mut haa = RIDGE;
        let mut hab = 0.0;
        let mut hbb = RIDGE;
        for (&f, &t) in decision_values.iter().zip(&targets) {
            let p = sigmoid(a * f + b);
            let d = p - t;
            let w = (p * (1.0 - p)).max(1e-12);
            ga += d * f;
            gb += d;
            haa += w * f * f;
            hab += w * f;
            hbb += w;
        }
        if ga.abs().max(gb.abs()) < GRAD_TOL {
            converged = true;
            break;
        }
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det);

        // backtracking so the objective never increases
        let mut stepped = false;
        for _ in 0..30 {
            let trial = objective(decision_values, &targets, a - da, b - db);
            if trial <= obj {
                a -= da;
                b -= db;
                obj = trial;
                stepped = true;
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !stepped {
            break;
        }
    }

    Ok(PlattParams {
        a,
        b,
        converged,
        iterations,
    })
}
