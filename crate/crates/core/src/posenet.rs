//! The pose regression network: architecture from a hyperparameter vector,
//! training on a dataset with normalized labels, and per-component error
//! reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_labels, Dataset, DatasetError, LabelScaler};
use crate::nn::{
    self, Activation, History, LayerSpec, Model, NnError, Shape, Tensor, TrainConfig,
};
use crate::pose::{ObjectType, Pose};
use crate::sim::TactileImage;
use crate::tpe::{Dimension, ParamValue, Point, SearchSpace};

#[derive(Debug, thiserror::Error)]
pub enum PoseNetError {
    #[error("hyperparameter {name} = {value} outside its range")]
    Hyperparam { name: &'static str, value: String },
    #[error("{n_conv} convolution blocks do not fit a {input_size}x{input_size} input")]
    Infeasible { n_conv: usize, input_size: usize },
    #[error("search point is missing or mistypes {0}")]
    Point(String),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("object types differ: model {model}, data {data}")]
    ObjectMismatch { model: String, data: String },
    #[error("image size {got} does not match the model input {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("{path}: {reason}")]
    Export { path: String, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub const FILTER_CHOICES: [usize; 9] = [2, 4, 8, 16, 32, 64, 128, 256, 512];
pub const BATCH_CHOICES: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_conv: usize,
    pub n_filters: usize,
    pub n_dense: usize,
    pub n_units: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub l1: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub use_batchnorm: bool,
}

impl Hyperparams {
    /// Published optimum for the surface task.
    pub fn published_surface() -> Self {
        Self {
            n_conv: 5,
            n_filters: 512,
            n_dense: 1,
            n_units: 16,
            activation: Activation::Relu,
            dropout: 0.001,
            l1: 0.001,
            l2: 0.064,
            batch_size: 32,
            use_batchnorm: false,
        }
    }

    /// Published optimum for the edge task.
    pub fn published_edge() -> Self {
        Self {
            n_conv: 5,
            n_filters: 256,
            n_dense: 2,
            n_units: 512,
            activation: Activation::Relu,
            dropout: 0.203,
            l1: 0.0001,
            l2: 0.0003,
            batch_size: 16,
            use_batchnorm: false,
        }
    }

    pub fn validate(&self) -> Result<(), PoseNetError> {
        let bad = |name, value: String| Err(PoseNetError::Hyperparam { name, value });
        if !(1..=5).contains(&self.n_conv) {
            return bad("n_conv", self.n_conv.to_string());
        }
        if !FILTER_CHOICES.contains(&self.n_filters) {
            return bad("n_filters", self.n_filters.to_string());
        }
        if !(1..=5).contains(&self.n_dense) {
            return bad("n_dense", self.n_dense.to_string());
        }
        if !FILTER_CHOICES.contains(&self.n_units) {
            return bad("n_units", self.n_units.to_string());
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return bad("dropout", self.dropout.to_string());
        }
        if !(1e-4..=1e-1).contains(&self.l1) {
            return bad("l1", self.l1.to_string());
        }
        if !(1e-4..=1e-1).contains(&self.l2) {
            return bad("l2", self.l2.to_string());
        }
        if !BATCH_CHOICES.contains(&self.batch_size) {
            return bad("batch_size", self.batch_size.to_string());
        }
        Ok(())
    }

    pub fn to_point(&self) -> Point {
        let mut p = Point::new();
        p.insert("n_conv".into(), ParamValue::Number(self.n_conv as f64));
        p.insert("n_filters".into(), ParamValue::Number(self.n_filters as f64));
        p.insert("n_dense".into(), ParamValue::Number(self.n_dense as f64));
        p.insert("n_units".into(), ParamValue::Number(self.n_units as f64));
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
        };
        p.insert("activation".into(), ParamValue::Text(act.into()));
        p.insert("dropout".into(), ParamValue::Number(self.dropout));
        p.insert("l1".into(), ParamValue::Number(self.l1));
        p.insert("l2".into(), ParamValue::Number(self.l2));
        p.insert("batch_size".into(), ParamValue::Number(self.batch_size as f64));
        p.insert("use_batchnorm".into(), ParamValue::Text(self.use_batchnorm.to_string()));
        p
    }

    pub fn from_point(point: &Point) -> Result<Self, PoseNetError> {
        let num = |k: &str| match point.get(k) {
            Some(ParamValue::Number(v)) => Ok(*v),
            _ => Err(PoseNetError::Point(k.to_string())),
        };
        let text = |k: &str| match point.get(k) {
            Some(ParamValue::Text(v)) => Ok(v.as_str()),
            _ => Err(PoseNetError::Point(k.to_string())),
        };
        let hp = Self {
            n_conv: num("n_conv")? as usize,
            n_filters: num("n_filters")? as usize,
            n_dense: num("n_dense")? as usize,
            n_units: num("n_units")? as usize,
            activation: text("activation")?
                .parse()
                .map_err(|_| PoseNetError::Point("activation".into()))?,
            dropout: num("dropout")?,
            l1: num("l1")?,
            l2: num("l2")?,
            batch_size: num("batch_size")? as usize,
            use_batchnorm: match text("use_batchnorm")? {
                "true" => true,
                "false" => false,
                _ => return Err(PoseNetError::Point("use_batchnorm".into())),
            },
        };
        hp.validate()?;
        Ok(hp)
    }
}

fn ordinal(choices: &[usize]) -> Dimension {
    Dimension::Ordinal {
        choices: choices.iter().map(|&c| c as f64).collect(),
    }
}

/// The full hyperparameter search space.
pub fn search_space() -> SearchSpace {
    search_space_capped(512, 5)
}

/// The search space with filter and unit counts capped at `max_width` and
/// layer counts at `max_layers`, for desk-scale searches.
pub fn search_space_capped(max_width: usize, max_layers: usize) -> SearchSpace {
    let widths: Vec<usize> = FILTER_CHOICES.iter().copied().filter(|&c| c <= max_width).collect();
    let layers: Vec<usize> = (1..=max_layers.clamp(1, 5)).collect();
    SearchSpace::new(vec![
        ("n_conv".into(), ordinal(&layers)),
        ("n_filters".into(), ordinal(&widths)),
        ("n_dense".into(), ordinal(&layers)),
        ("n_units".into(), ordinal(&widths)),
        (
            "activation".into(),
            Dimension::Categorical {
                choices: vec!["relu".into(), "elu".into()],
            },
        ),
        ("dropout".into(), Dimension::Uniform { lo: 0.0, hi: 0.5 }),
        ("l1".into(), Dimension::LogUniform { lo: 1e-4, hi: 1e-1 }),
        ("l2".into(), Dimension::LogUniform { lo: 1e-4, hi: 1e-1 }),
        ("batch_size".into(), ordinal(&BATCH_CHOICES)),
        (
            "use_batchnorm".into(),
            Dimension::Categorical {
                choices: vec!["true".into(), "false".into()],
            },
        ),
    ])
    .expect("static search space is valid")
}

/// Spatial size left after `n_conv` conv+pool blocks, if every block fits.
pub fn feature_size(input_size: usize, n_conv: usize) -> Option<usize> {
    let mut s = input_size;
    for _ in 0..n_conv {
        if s < 4 {
            return None;
        }
        s = (s - 2) / 2;
    }
    Some(s)
}

/// Layer chain: conv blocks, flatten, dense blocks with dropout on their
/// inputs, then dropout and the linear output.
pub fn layer_specs(hp: &Hyperparams, n_out: usize) -> Vec<LayerSpec> {
    let act = LayerSpec::Activation {
        function: hp.activation,
    };
    let mut specs = Vec::new();
    for _ in 0..hp.n_conv {
        specs.push(LayerSpec::Conv3x3 {
            filters: hp.n_filters,
        });
        if hp.use_batchnorm {
            specs.push(LayerSpec::BatchNorm);
        }
        specs.push(act);
        specs.push(LayerSpec::MaxPool2x2);
    }
    specs.push(LayerSpec::Flatten);
    for _ in 0..hp.n_dense {
        specs.push(LayerSpec::Dropout { rate: hp.dropout });
        specs.push(LayerSpec::Dense { units: hp.n_units });
        specs.push(act);
    }
    specs.push(LayerSpec::Dropout { rate: hp.dropout });
    specs.push(LayerSpec::LinearOutput { units: n_out });
    specs
}

pub fn build(hp: &Hyperparams, n_out: usize, input_size: usize, seed: u64) -> Result<Model, PoseNetError> {
    hp.validate()?;
    if feature_size(input_size, hp.n_conv).is_none() {
        return Err(PoseNetError::Infeasible {
            n_conv: hp.n_conv,
            input_size,
        });
    }
    Ok(Model::new(
        Shape::new(1, input_size, input_size),
        &layer_specs(hp, n_out),
        seed,
    )?)
}

/// A trained network together with everything needed to map images to
/// poses in physical units.
#[derive(Debug, Clone)]
pub struct PoseNet {
    pub model: Model,
    pub object_type: ObjectType,
    pub scaler: LabelScaler,
    pub hyperparams: Hyperparams,
    pub image_size: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    object_type: ObjectType,
    scales: Vec<f64>,
    hyperparams: Hyperparams,
    image_size: usize,
}

impl PoseNet {
    pub fn predict_images(&self, images: &[&TactileImage]) -> Result<Vec<Vec<f64>>, PoseNetError> {
        if let Some(img) = images.iter().find(|i| i.size() != self.image_size) {
            return Err(PoseNetError::ImageSize {
                expected: self.image_size,
                got: img.size(),
            });
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = images_tensor(chunk.iter().copied());
            let y = self.model.predict(&x)?;
            for i in 0..chunk.len() {
                out.push(self.scaler.denormalize(y.row(i)));
            }
        }
        Ok(out)
    }

    pub fn predict_pose(&self, image: &TactileImage) -> Result<Pose, PoseNetError> {
        let v = self.predict_images(&[image])?.remove(0);
        Ok(Pose::from_slice(self.object_type, &v).expect("output width matches object type"))
    }

    pub fn save(&self, path: &Path) -> Result<(), PoseNetError> {
        let meta = CheckpointMeta {
            object_type: self.object_type,
            scales: self.scaler.scales.clone(),
            hyperparams: self.hyperparams.clone(),
            image_size: self.image_size,
        };
        let value = serde_json::to_value(meta).expect("metadata serializes");
        Ok(nn::save_checkpoint(&self.model, &value, path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PoseNetError> {
        let ck = nn::load_checkpoint(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(ck.metadata).map_err(|e| NnError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("pose metadata: {e}"),
            })?;
        Ok(Self {
            model: ck.model,
            object_type: meta.object_type,
            scaler: LabelScaler { scales: meta.scales },
            hyperparams: meta.hyperparams,
            image_size: meta.image_size,
        })
    }
}

/// Stack binary images into a `[n, 1, size, size]` tensor.
pub fn images_tensor<'a>(images: impl IntoIterator<Item = &'a TactileImage>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut size = 0;
    for img in images {
        size = img.size();
        data.extend(img.pixels().iter().map(|&p| p as f64));
        n += 1;
    }
    Tensor::new(vec![n, 1, size, size], data)
}

fn dataset_tensors(d: &Dataset) -> Result<(Tensor, Tensor, LabelScaler), PoseNetError> {
    let (labels, scaler) = normalize_labels(d).map_err(DatasetError::from)?;
    let x = images_tensor(d.samples.iter().map(|s| &s.image));
    Ok((x, Tensor::from_rows(&labels), scaler))
}

/// Training settings that are not searched over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 1e-6,
            patience_epochs: 10,
            max_epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub net: PoseNet,
    pub history: History,
    /// Validation MSE on normalized labels at the best epoch.
    pub val_loss: f64,
}

/// Train a network for `hp` on `train` with early stopping on `val`.
/// Labels are scaled into [-1, 1] per component, which is the same as
/// weighting the squared error by `1 / max^2`.
pub fn fit(hp: &Hyperparams, train: &Dataset, val: &Dataset, opts: &FitOptions) -> Result<FitOutcome, PoseNetError> {
    fit_with_progress(hp, train, val, opts, |_, _, _| {})
}

pub fn fit_with_progress(
    hp: &Hyperparams,
    train: &Dataset,
    val: &Dataset,
    opts: &FitOptions,
    progress: impl FnMut(usize, f64, f64),
) -> Result<FitOutcome, PoseNetError> {
    if train.object_type() != val.object_type() {
        return Err(PoseNetError::ObjectMismatch {
            model: train.object_type().name().into(),
            data: val.object_type().name().into(),
        });
    }
    if train.image_size() != val.image_size() {
        return Err(PoseNetError::ImageSize {
            expected: train.image_size(),
            got: val.image_size(),
        });
    }
    let object = train.object_type();
    let size = train.image_size();
    let mut model = build(hp, object.n_out(), size, opts.seed)?;
    let (tx, ty, scaler) = dataset_tensors(train)?;
    let (vx, _, _) = dataset_tensors(val)?;
    // Validation labels are scaled with the training scaler so both losses
    // share units.
    let vy = Tensor::from_rows(
        &val.samples
            .iter()
            .map(|s| scaler.normalize(&s.label.to_vec()))
            .collect::<Vec<_>>(),
    );
    let cfg = TrainConfig {
        learning_rate: opts.learning_rate,
        lr_decay: opts.lr_decay,
        batch_size: hp.batch_size.min(train.len()),
        patience_epochs: opts.patience_epochs,
        max_epochs: opts.max_epochs,
        l1_coeff: hp.l1,
        l2_coeff: hp.l2,
        seed: opts.seed,
        loss_weights: None,
    };
    let history = nn::train_with_progress(&mut model, &tx, &ty, &vx, &vy, &cfg, progress)?;
    let val_loss = history.best_val_loss;
    Ok(FitOutcome {
        net: PoseNet {
            model,
            object_type: object,
            scaler,
            hyperparams: hp.clone(),
            image_size: size,
        },
        history,
        val_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub unit: String,
    pub mae: f64,
    /// Labels in ascending order.
    pub sorted_labels: Vec<f64>,
    /// Predictions reordered to follow `sorted_labels`.
    pub sorted_predictions: Vec<f64>,
    /// Moving average of `sorted_predictions`.
    pub smoothed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub object_type: ObjectType,
    pub n_samples: usize,
    pub window: usize,
    pub ids: Vec<u64>,
    pub labels: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<f64>>,
    pub components: Vec<ComponentReport>,
}

/// Centred moving average of width `window`, truncated at both ends so the
/// output has the input's length.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let window = window.clamp(1, n.max(1));
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let before = (window - 1) / 2;
    let after = window - 1 - before;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Build a report from predictions already in physical units.
pub fn report_from_predictions(
    object: ObjectType,
    ids: Vec<u64>,
    labels: Vec<Vec<f64>>,
    predictions: Vec<Vec<f64>>,
) -> Result<EvalReport, PoseNetError> {
    let n = labels.len();
    if n == 0 {
        return Err(PoseNetError::EmptyTestSet);
    }
    let window = n.min(100);
    let components = object
        .components()
        .iter()
        .enumerate()
        .map(|(c, comp)| {
            let mae = labels
                .iter()
                .zip(&predictions)
                .map(|(l, p)| (p[c] - l[c]).abs())
                .sum::<f64>()
                / n as f64;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| labels[a][c].total_cmp(&labels[b][c]).then(a.cmp(&b)));
            let sorted_labels: Vec<f64> = order.iter().map(|&i| labels[i][c]).collect();
            let sorted_predictions: Vec<f64> = order.iter().map(|&i| predictions[i][c]).collect();
            let smoothed = moving_average(&sorted_predictions, window);
            ComponentReport {
                component: comp.name().into(),
                unit: comp.unit().into(),
                mae,
                sorted_labels,
                sorted_predictions,
                smoothed,
            }
        })
        .collect();
    Ok(EvalReport {
        object_type: object,
        n_samples: n,
        window,
        ids,
        labels,
        predictions,
        components,
    })
}

pub fn evaluate(net: &PoseNet, test: &Dataset) -> Result<EvalReport, PoseNetError> {
    if test.is_empty() {
        return Err(PoseNetError::EmptyTestSet);
    }
    if test.object_type() != net.object_type {
        return Err(PoseNetError::ObjectMismatch {
            model: net.object_type.name().into(),
            data: test.object_type().name().into(),
        });
    }
    let images: Vec<&TactileImage> = test.samples.iter().map(|s| &s.image).collect();
    let predictions = net.predict_images(&images)?;
    report_from_predictions(
        net.object_type,
        test.samples.iter().map(|s| s.id).collect(),
        test.labels(),
        predictions,
    )
}

impl EvalReport {
    pub fn mae(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.mae).collect()
    }

    /// JSON summary: object type, sample count, window and MAE per component.
    pub fn summary_json(&self) -> serde_json::Value {
        let mae: serde_json::Map<String, serde_json::Value> = self
            .components
            .iter()
            .map(|c| (c.component.clone(), serde_json::json!(c.mae)))
            .collect();
        let units: serde_json::Map<String, serde_json::Value> = self
            .components
            .iter()
            .map(|c| (c.component.clone(), serde_json::json!(c.unit)))
            .collect();
        serde_json::json!({
            "object_type": self.object_type,
            "n_samples": self.n_samples,
            "smoothing_window": self.window,
            "mae": mae,
            "units": units,
        })
    }

    /// Per-sample CSV: id, then label, prediction and absolute error for
    /// each component.
    pub fn write_csv(&self, path: &Path) -> Result<(), PoseNetError> {
        let err = |e: csv::Error| PoseNetError::Export {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["id".to_string()];
        for c in &self.components {
            header.push(format!("{}_label", c.component));
            header.push(format!("{}_pred", c.component));
            header.push(format!("{}_abs_err", c.component));
        }
        w.write_record(&header).map_err(err)?;
        for ((id, l), p) in self.ids.iter().zip(&self.labels).zip(&self.predictions) {
            let mut row = vec![id.to_string()];
            for c in 0..self.components.len() {
                row.push(format!("{}", l[c]));
                row.push(format!("{}", p[c]));
                row.push(format!("{}", (p[c] - l[c]).abs()));
            }
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| PoseNetError::Export {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), PoseNetError> {
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("summary serializes");
        std::fs::write(path, text + "\n").map_err(|e| PoseNetError::Export {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_edges() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(moving_average(&v, 1), v.to_vec());
        assert_eq!(moving_average(&v, 3), vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        assert_eq!(moving_average(&v, 100), vec![2.0, 2.5, 3.0, 3.5, 4.0]);
    }

    #[test]
    fn feature_sizes() {
        assert_eq!(feature_size(128, 5), Some(2));
        assert_eq!(feature_size(128, 6), None);
        assert_eq!(feature_size(64, 4), Some(2));
        assert_eq!(feature_size(64, 5), None);
    }
}
