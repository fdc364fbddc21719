//! Trial-level classifiers: linear SVM, RBF SVM, logistic regression, and a
//! 2-layer MLP, all exposing calibrated probabilities so the aggregation
//! stage can treat them interchangeably.

pub mod logreg;
pub mod mlp;
pub mod platt;
pub mod svm;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use logreg::LogregModel;
pub use mlp::{BinaryLoss, DenseNet, TrainOptions, WeightedBce};
pub use platt::{fit_platt, PlattParams};
pub use svm::{exact_kkt_gap, train_svm, KernelKind, SmoOptions, SvmModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    LinearSvm,
    RbfSvm,
    Logreg,
    Mlp2,
}

impl ClassifierKind {
    pub fn label(&self) -> &'static str {
        match self {
            ClassifierKind::LinearSvm => "linear_svm",
            ClassifierKind::RbfSvm => "rbf_svm",
            ClassifierKind::Logreg => "logreg",
            ClassifierKind::Mlp2 => "mlp2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    InverseFrequency,
    None,
}

/// Hyperparameters for one trial-level classifier.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// SVM box constraint.
    #[serde(default = "default_c")]
    pub c: f64,
    /// RBF width; `None` selects `1 / feature_dim`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_hidden")]
    pub hidden: [usize; 2],
    #[serde(default = "default_class_weight")]
    pub class_weight: ClassWeight,
    #[serde(default)]
    pub seed: u64,
}

fn default_c() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    100
}
fn default_hidden() -> [usize; 2] {
    [64, 32]
}
fn default_class_weight() -> ClassWeight {
    ClassWeight::InverseFrequency
}

impl ClassifierSpec {
    pub fn new(kind: ClassifierKind) -> Self {
        Self {
            kind,
            c: default_c(),
            gamma: None,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            hidden: default_hidden(),
            class_weight: default_class_weight(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.c <= 0.0 {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if let Some(g) = self.gamma {
            if g <= 0.0 {
                return Err(Error::Config(format!("gamma must be positive, got {g}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trial-level MLP classifier (logistic output is its own calibration).
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    pub net: DenseNet,
    pub loss_trace: Vec<f64>,
}

/// A fitted trial-level classifier with probability output in `[0, 1]`.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    LinearSvm(SvmModel),
    RbfSvm(SvmModel),
    Logreg(LogregModel),
    Mlp2(MlpClassifier),
}

/// Inverse-frequency class weights `(w_pos, w_neg)` with `w_c = n/(2 n_c)`.
pub fn inverse_frequency_weights(labels: &[bool]) -> (f64, f64) {
    let n = labels.len() as f64;
    let n_pos = labels.iter().filter(|&&b| b).count() as f64;
    let n_neg = n - n_pos;
    (n / (2.0 * n_pos), n / (2.0 * n_neg))
}

fn resolve_weights(spec: &ClassifierSpec, labels: &[bool]) -> (f64, f64) {
    match spec.class_weight {
        ClassWeight::InverseFrequency => inverse_frequency_weights(labels),
        ClassWeight::None => (1.0, 1.0),
    }
}

/// Train the classifier described by `spec` on trial feature rows.
pub fn train_classifier(
    spec: &ClassifierSpec,
    x: ArrayView2<f64>,
    y: &[bool],
) -> Result<TrainedModel> {
    spec.validate()?;
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            n
        )));
    }
    if n < 2 {
        return Err(Error::Training(format!("need at least 2 rows, got {n}")));
    }
    let n_pos = y.iter().filter(|&&b| b).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::Training(
            "training labels contain a single class".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "feature matrix contains non-finite values".into(),
        ));
    }

    let weights = resolve_weights(spec, y);
    match spec.kind {
        ClassifierKind::LinearSvm => Ok(TrainedModel::LinearSvm(train_svm(
            x,
            y,
            KernelKind::Linear,
            spec.c,
            weights,
            &SmoOptions::default(),
        )?)),
        ClassifierKind::RbfSvm => {
            let gamma = spec.gamma.unwrap_or(1.0 / x.ncols() as f64);
            Ok(TrainedModel::RbfSvm(train_svm(
                x,
                y,
                KernelKind::Rbf { gamma },
                spec.c,
                weights,
                &SmoOptions::default(),
            )?))
        }
        ClassifierKind::Logreg => Ok(TrainedModel::Logreg(logreg::train_logreg(
            x,
            y,
            weights,
            spec.learning_rate,
            spec.epochs,
        )?)),
        ClassifierKind::Mlp2 => {
            let dims = [x.ncols(), spec.hidden[0], spec.hidden[1], 1];
            let mut net = DenseNet::new(&dims, spec.seed);
            let loss = WeightedBce {
                w_pos: weights.0,
                w_neg: weights.1,
            };
            let loss_trace = net.train(
                x,
                y,
                &loss,
                &TrainOptions {
                    epochs: spec.epochs,
                    learning_rate: spec.learning_rate,
                    batch_size: 32,
                    seed: spec.seed,
                },
            )?;
            Ok(TrainedModel::Mlp2(MlpClassifier { net, loss_trace }))
        }
    }
}

impl TrainedModel {
    /// Per-row probability that the electrode-trial is critical.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        match self {
            TrainedModel::LinearSvm(m) | TrainedModel::RbfSvm(m) => m.predict_proba(x),
            TrainedModel::Logreg(m) => m.predict_proba(x),
            TrainedModel::Mlp2(m) => m.net.predict_proba(x),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            TrainedModel::LinearSvm(_) => ClassifierKind::LinearSvm,
            TrainedModel::RbfSvm(_) => ClassifierKind::RbfSvm,
            TrainedModel::Logreg(_) => ClassifierKind::Logreg,
            TrainedModel::Mlp2(_) => ClassifierKind::Mlp2,
        }
    }

    /// Write `<base>.json` (scalars, shapes) + `<base>.f32` (weights or
    /// support coefficients).
    pub fn save(&self, base: &Path) -> Result<()> {
        let (meta, values): (ModelMeta, Vec<f64>) = match self {
            TrainedModel::LinearSvm(m) | TrainedModel::RbfSvm(m) => {
                let mut values: Vec<f64> = m.support_x().iter().copied().collect();
                values.extend_from_slice(m.coeff());
                (
                    ModelMeta {
                        kind: self.kind(),
                        dim: m.dim(),
                        kernel: Some(m.kind),
                        bias: Some(m.bias()),
                        platt: Some(m.platt),
                        n_support: Some(m.n_support()),
                        dims: None,
                    },
                    values,
                )
            }
            TrainedModel::Logreg(m) => (
                ModelMeta {
                    kind: self.kind(),
                    dim: m.weights.len(),
                    kernel: None,
                    bias: Some(m.bias),
                    platt: None,
                    n_support: None,
                    dims: None,
                },
                m.weights.to_vec(),
            ),
            TrainedModel::Mlp2(m) => (
                ModelMeta {
                    kind: self.kind(),
                    dim: m.net.input_dim(),
                    kernel: None,
                    bias: None,
                    platt: None,
                    n_support: None,
                    dims: Some(m.net.dims().to_vec()),
                },
                m.net.flat_params(),
            ),
        };
        let json_path = base.with_extension("json");
        fs::write(
            &json_path,
            serde_json::to_string_pretty(&meta).expect("serializable meta"),
        )
        .map_err(Error::io(&json_path))?;
        let bin_path = base.with_extension("f32");
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&bin_path, bytes).map_err(Error::io(&bin_path))?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let json_path = base.with_extension("json");
        let meta: ModelMeta = serde_json::from_str(
            &fs::read_to_string(&json_path).map_err(Error::io(&json_path))?,
        )
        .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
        let bin_path = base.with_extension("f32");
        let bytes = fs::read(&bin_path).map_err(Error::io(&bin_path))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format(format!(
                "{}: byte count {} not a multiple of 4",
                bin_path.display(),
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();

        match meta.kind {
            ClassifierKind::LinearSvm | ClassifierKind::RbfSvm => {
                let n_sv = meta.n_support.ok_or_else(|| bad_meta(&json_path, "n_support"))?;
                let kernel = meta.kernel.ok_or_else(|| bad_meta(&json_path, "kernel"))?;
                let expect = n_sv * meta.dim + n_sv;
                if values.len() != expect {
                    return Err(Error::Format(format!(
                        "{}: expected {expect} values, found {}",
                        bin_path.display(),
                        values.len()
                    )));
                }
                let support_x =
                    Array2::from_shape_vec((n_sv, meta.dim), values[..n_sv * meta.dim].to_vec())
                        .expect("shape checked");
                let coeff = values[n_sv * meta.dim..].to_vec();
                let model = SvmModel::from_parts(
                    kernel,
                    support_x,
                    coeff,
                    meta.bias.ok_or_else(|| bad_meta(&json_path, "bias"))?,
                    meta.platt.ok_or_else(|| bad_meta(&json_path, "platt"))?,
                );
                Ok(match meta.kind {
                    ClassifierKind::LinearSvm => TrainedModel::LinearSvm(model),
                    _ => TrainedModel::RbfSvm(model),
                })
            }
            ClassifierKind::Logreg => {
                if values.len() != meta.dim {
                    return Err(Error::Format(format!(
                        "{}: expected {} weights, found {}",
                        bin_path.display(),
                        meta.dim,
                        values.len()
                    )));
                }
                Ok(TrainedModel::Logreg(LogregModel {
                    weights: Array1::from_vec(values),
                    bias: meta.bias.ok_or_else(|| bad_meta(&json_path, "bias"))?,
                    loss_trace: Vec::new(),
                }))
            }
            ClassifierKind::Mlp2 => {
                let dims = meta.dims.ok_or_else(|| bad_meta(&json_path, "dims"))?;
                let mut net = DenseNet::new(&dims, 0);
                if values.len() != net.n_params() {
                    return Err(Error::Format(format!(
                        "{}: expected {} parameters, found {}",
                        bin_path.display(),
                        net.n_params(),
                        values.len()
                    )));
                }
                net.set_flat_params(&values);
                Ok(TrainedModel::Mlp2(MlpClassifier {
                    net,
                    loss_trace: Vec::new(),
                }))
            }
        }
    }
}

fn bad_meta(path: &Path, field: &str) -> Error {
    Error::Format(format!("{}: missing field '{field}'", path.display()))
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: ClassifierKind,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<KernelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    platt: Option<PlattParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_support: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dims: Option<Vec<usize>>,
}
