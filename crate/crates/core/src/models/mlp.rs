//! Small fully-connected network with ReLU hidden layers, a single logistic
//! output, and an Adam training loop. Shared by the trial-level MLP
//! classifier and the electrode-level aggregator.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Probabilities are clamped away from {0, 1} before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss on a single predicted probability. `grad_logit` is the derivative
/// with respect to the pre-sigmoid logit.
pub trait BinaryLoss {
    fn value(&self, p: f64, y: bool) -> f64;
    fn grad_logit(&self, p: f64, y: bool) -> f64;
}

/// Class-weighted binary cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct WeightedBce {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl WeightedBce {
    pub fn uniform() -> Self {
        Self { w_pos: 1.0, w_neg: 1.0 }
    }
}

impl BinaryLoss for WeightedBce {
    fn value(&self, p: f64, y: bool) -> f64 {
        let p = clamp_prob(p);
        if y {
            -self.w_pos * p.ln()
        } else {
            -self.w_neg * (1.0 - p).ln()
        }
    }

    fn grad_logit(&self, p: f64, y: bool) -> f64 {
        let p = clamp_prob(p);
        if y {
            self.w_pos * (p - 1.0)
        } else {
            self.w_neg * p
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: Array2<f64>, // [in x out]
    b: Array1<f64>, // [out]
}

/// Training options for the Adam loop.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Fully-connected net; hidden activations are ReLU, the output layer emits
/// one raw logit per row.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Layer>,
    dims: Vec<usize>,
}

impl DenseNet {
    /// He-uniform initialization from a seeded stream; `dims` runs from the
    /// input width to the single output unit, e.g. `[36, 64, 32, 1]`.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(*dims.last().unwrap(), 1, "single-logit output expected");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                (rng.random::<f64>() * 2.0 - 1.0) * limit
            });
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Self {
            layers,
            dims: dims.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn forward_logits(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w) + &layer.b;
            if l + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a.index_axis(Axis(1), 0).to_owned()
    }

    /// Per-row probability of the positive class.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(self.forward_logits(x).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Mean loss over the batch.
    pub fn loss(&self, x: ArrayView2<f64>, y: &[bool], loss: &dyn BinaryLoss) -> f64 {
        let logits = self.forward_logits(x);
        logits
            .iter()
            .zip(y)
            .map(|(&z, &yi)| loss.value(sigmoid(z), yi))
            .sum::<f64>()
            / y.len() as f64
    }

    /// Mean loss and its gradient with respect to every parameter, flattened
    /// in the same order as [`flat_params`](Self::flat_params).
    pub fn loss_and_flat_grad(
        &self,
        x: ArrayView2<f64>,
        y: &[bool],
        loss: &dyn BinaryLoss,
    ) -> (f64, Vec<f64>) {
        let n = y.len();
        let mut acts: Vec<Array2<f64>> = vec![x.to_owned()];
        let mut zs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = acts[l].dot(&layer.w) + &layer.b;
            zs.push(z.clone());
            let a = if l + 1 < self.layers.len() {
                z.mapv(|v| v.max(0.0))
            } else {
                z
            };
            acts.push(a);
        }
        let logits = acts.last().unwrap().index_axis(Axis(1), 0);

        let mut total = 0.0;
        let mut dz = Array2::zeros((n, 1));
        for (i, (&z, &yi)) in logits.iter().zip(y).enumerate() {
            let p = sigmoid(z);
            total += loss.value(p, yi);
            dz[[i, 0]] = loss.grad_logit(p, yi) / n as f64;
        }
        let mean_loss = total / n as f64;

        let mut grads_w: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut grads_b: Vec<Array1<f64>> = vec![Array1::zeros(0); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            grads_w[l] = acts[l].t().dot(&dz);
            grads_b[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                let da = dz.dot(&self.layers[l].w.t());
                dz = da * zs[l - 1].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            }
        }

        let mut flat = Vec::with_capacity(self.n_params());
        for l in 0..self.layers.len() {
            flat.extend(grads_w[l].iter());
            flat.extend(grads_b[l].iter());
        }
        (mean_loss, flat)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            flat.extend(l.w.iter());
            flat.extend(l.b.iter());
        }
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut off = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[off];
                off += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
    }

    /// Mini-batch Adam on the given loss. Returns the mean loss over the
    /// full set after each epoch.
    pub fn train(
        &mut self,
        x: ArrayView2<f64>,
        y: &[bool],
        loss: &dyn BinaryLoss,
        opts: &TrainOptions,
    ) -> Result<Vec<f64>> {
        let n = y.len();
        if x.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "{} rows but {} labels",
                x.nrows(),
                n
            )));
        }
        if n == 0 {
            return Err(Error::Training("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::new(self.n_params(), opts.learning_rate);
        let mut order: Vec<usize> = (0..n).collect();
        let batch = opts.batch_size.max(1).min(n);
        let mut trace = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let xb = x.select(Axis(0), chunk);
                let yb: Vec<bool> = chunk.iter().map(|&i| y[i]).collect();
                let (_, grad) = self.loss_and_flat_grad(xb.view(), &yb, loss);
                let mut params = self.flat_params();
                adam.step(&mut params, &grad);
                self.set_flat_params(&params);
            }
            trace.push(self.loss(x, y, loss));
        }
        Ok(trace)
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Relative error between an analytic gradient and central finite
/// differences; used by gradient-check tests for every trainable model.
pub fn finite_difference_check<F>(params: &[f64], analytic: &[f64], mut loss_at: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss_at(&probe);
        probe[i] = params[i] - h;
        let down = loss_at(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toy_data(n: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 6), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y: Vec<bool> = x
            .outer_iter()
            .map(|r| r[0] + 0.5 * r[1] - 0.2 * r[2] > 0.0)
            .collect();
        (x, y)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (x, y) = toy_data(24, 5);
        let net = DenseNet::new(&[6, 8, 5, 1], 11);
        let loss = WeightedBce { w_pos: 1.5, w_neg: 0.7 };
        let (_, grad) = net.loss_and_flat_grad(x.view(), &y, &loss);
        let params = net.flat_params();
        let mut probe_net = net.clone();
        let err = finite_difference_check(&params, &grad, |p| {
            probe_net.set_flat_params(p);
            probe_net.loss(x.view(), &y, &loss)
        });
        assert!(err < 1e-4, "relative gradient error {err}");
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let (x, y) = toy_data(200, 7);
        let mut net = DenseNet::new(&[6, 16, 8, 1], 3);
        let loss = WeightedBce::uniform();
        let before = net.loss(x.view(), &y, &loss);
        let trace = net
            .train(
                x.view(),
                &y,
                &loss,
                &TrainOptions {
                    epochs: 60,
                    learning_rate: 1e-2,
                    batch_size: 32,
                    seed: 1,
                },
            )
            .unwrap();
        assert!(trace.last().unwrap() < &before);
        let probs = net.predict_proba(x.view()).unwrap();
        let acc = probs
            .iter()
            .zip(&y)
            .filter(|(p, &yi)| (**p >= 0.5) == yi)
            .count() as f64
            / y.len() as f64;
        assert!(acc > 0.9, "training accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = toy_data(64, 9);
        let opts = TrainOptions {
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 42,
        };
        let mut a = DenseNet::new(&[6, 8, 4, 1], 2);
        let mut b = DenseNet::new(&[6, 8, 4, 1], 2);
        a.train(x.view(), &y, &WeightedBce::uniform(), &opts).unwrap();
        b.train(x.view(), &y, &WeightedBce::uniform(), &opts).unwrap();
        let (pa, pb) = (
            a.predict_proba(x.view()).unwrap(),
            b.predict_proba(x.view()).unwrap(),
        );
        for (u, v) in pa.iter().zip(pb.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn wrong_input_width_rejected() {
        let net = DenseNet::new(&[6, 4, 1], 0);
        let x = Array2::zeros((2, 5));
        assert!(net.predict_proba(x.view()).is_err());
    }
}
