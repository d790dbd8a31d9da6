//! CNN detector: `conv 3x3 (32) -> relu -> maxpool 2 -> conv 3x3 (64) -> relu
//! -> maxpool 2 -> flatten -> dense 256 -> relu -> dropout -> dense k -> softmax`.

use serde::{Deserialize, Serialize};
use synthbalance_tensor::{
    LayerSpec, Mode, Padding, ParamSet, Real, RmspropState, Rng, Sequential, Tape, Tensor, Var,
    PROB_FLOOR,
};

use crate::batch::stack_images;
use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::generator::check_params;
use crate::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnArch {
    pub image_size: usize,
    pub class_count: usize,
    pub conv_filters: [usize; 2],
    pub hidden_units: usize,
    pub dropout_rate: f64,
}

impl CnnArch {
    pub fn new(image_size: usize, class_count: usize) -> Self {
        Self {
            image_size,
            class_count,
            conv_filters: [32, 64],
            hidden_units: 256,
            dropout_rate: ClfTrainConfig::default().dropout_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClfTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            dropout_rate: 0.5,
            epochs: 100,
            seed: 0,
        }
    }
}

impl ClfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "classifier learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("classifier batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "classifier dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    arch: CnnArch,
    net: Sequential,
    params: ParamSet,
}

fn network(arch: &CnnArch) -> Result<Sequential> {
    let s = arch.image_size;
    if s < 4 || s % 4 != 0 {
        return Err(Error::Config(format!(
            "image size must be a positive multiple of 4, got {s}"
        )));
    }
    if arch.class_count < 2 {
        return Err(Error::Config(format!(
            "classifier needs at least 2 classes, got {}",
            arch.class_count
        )));
    }
    let conv = |filters| LayerSpec::Conv2d {
        filters,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
    };
    let pool = LayerSpec::MaxPool2d {
        window: 2,
        stride: 2,
    };
    Ok(Sequential::new(
        &[1, s, s],
        vec![
            conv(arch.conv_filters[0]),
            LayerSpec::Relu,
            pool.clone(),
            conv(arch.conv_filters[1]),
            LayerSpec::Relu,
            pool,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: arch.hidden_units,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout {
                rate: arch.dropout_rate,
            },
            LayerSpec::Dense {
                units: arch.class_count,
            },
            LayerSpec::Softmax,
        ],
    )?)
}

pub fn build_cnn(image_size: usize, class_count: usize, seed: u64) -> Result<CnnModel> {
    CnnModel::init(CnnArch::new(image_size, class_count), seed)
}

impl CnnModel {
    pub fn init(arch: CnnArch, seed: u64) -> Result<Self> {
        let net = network(&arch)?;
        let mut rng = Rng::derive(seed, "cnn/init");
        let params = ParamSet::from_entries(net.init_params("classifier", &mut rng)?)?;
        Ok(Self { arch, net, params })
    }

    pub fn from_params(arch: CnnArch, params: ParamSet) -> Result<Self> {
        let net = network(&arch)?;
        check_params(&net.param_shapes("classifier"), &params)?;
        Ok(Self { arch, net, params })
    }

    pub fn arch(&self) -> &CnnArch {
        &self.arch
    }

    pub fn image_size(&self) -> usize {
        self.arch.image_size
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    /// Width of the flattened features entering the dense head.
    pub fn feature_width(&self) -> usize {
        self.net.shapes().expect("validated")[7][0]
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        let arch = CnnArch {
            dropout_rate: rate,
            ..self.arch
        };
        self.net = network(&arch)?;
        self.net.layers().iter().try_for_each(|l| l.validate())?;
        self.arch = arch;
        Ok(())
    }

    /// Class probabilities `[b, k]` for `x [b, 1, s, s]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        Ok(self.net.forward(tape, x, params, mode)?)
    }
}

/// Per-image class distributions and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const INFER_CHUNK: usize = 64;

/// Inference-mode prediction (dropout disabled).
pub fn predict(model: &CnnModel, images: &[&GrayImage]) -> Result<Prediction> {
    let k = model.class_count();
    let mut probs = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let x = stack_images::<f32>(chunk, model.image_size())?;
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false);
        let xv = tape.constant(x);
        let p = model.forward(&mut tape, &vars, xv, &mut Mode::Infer)?;
        probs.extend(tape.value(p)?.data().chunks(k).map(<[f32]>::to_vec));
    }
    let labels = probs.iter().map(|p| argmax(p)).collect();
    Ok(Prediction { probs, labels })
}

/// Mean cross-entropy and accuracy of `model` on `ds`, inference mode.
pub fn evaluate_loss_accuracy(model: &CnnModel, ds: &ImageDataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict(model, &ds.images())?;
    let mut loss = 0.0;
    let mut correct = 0;
    for ((p, &y), &yhat) in pred.probs.iter().zip(&ds.labels()).zip(&pred.labels) {
        loss -= f64::from(p[y]).max(PROB_FLOOR).ln();
        correct += usize::from(y == yhat);
    }
    let n = ds.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Batch-size-weighted mean over the epoch's training steps.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

fn check_labels(model: &CnnModel, ds: &ImageDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Dataset(format!("{what} set is empty")));
    }
    if let Some(&bad) = ds.labels().iter().find(|&&l| l >= model.class_count()) {
        return Err(Error::Tensor(synthbalance_tensor::TensorError::LabelOutOfRange {
            label: bad,
            classes: model.class_count(),
        }));
    }
    Ok(())
}

/// Minimizes categorical cross-entropy with RMSprop. Validation metrics, when
/// a set is given, are measured in inference mode after every epoch.
pub fn train_classifier(
    model: &mut CnnModel,
    train: &ImageDataset,
    cfg: &ClfTrainConfig,
    validation: Option<&ImageDataset>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    check_labels(model, train, "training")?;
    if let Some(v) = validation {
        check_labels(model, v, "validation")?;
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    model.set_dropout_rate(cfg.dropout_rate)?;
    let s = model.image_size();
    let data = stack_images::<f32>(&train.images(), s)?;
    let labels = train.labels();
    let per_image = s * s;
    let mut order_rng = Rng::derive(cfg.seed, "cnn/order");
    let mut drop_rng = Rng::derive(cfg.seed, "cnn/dropout");
    let mut opt = RmspropState::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut buf = Vec::with_capacity(batch.len() * per_image);
            for &i in batch {
                buf.extend_from_slice(&data.data()[i * per_image..(i + 1) * per_image]);
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = Tensor::from_vec(&[batch.len(), 1, s, s], buf)?;
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, true);
            let xv = tape.constant(x);
            let probs = model.forward(&mut tape, &vars, xv, &mut Mode::Train(&mut drop_rng))?;
            let loss = tape.categorical_cross_entropy(probs, &y)?;
            let k = model.class_count();
            for (row, &t) in tape.value(probs)?.data().chunks(k).zip(&y) {
                correct += usize::from(argmax(row) == t);
            }
            loss_sum += f64::from(tape.value(loss)?.item()?) * batch.len() as f64;
            let grads = tape.backward(loss)?.take_all(&vars)?;
            opt.step(&mut model.params.tensors_mut(), &grads)?;
        }
        let n = train.len() as f64;
        let (val_loss, val_accuracy) = match validation {
            Some(v) => {
                let (l, a) = evaluate_loss_accuracy(model, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_layer_and_flatten_width() {
        let m = build_cnn(256, 2, 0).unwrap();
        assert_eq!(m.network().output_shape(), vec![2]);
        let m = build_cnn(64, 2, 0).unwrap();
        assert_eq!(m.feature_width(), 64 * 16 * 16);
        assert!(build_cnn(64, 1, 0).is_err());
        assert!(build_cnn(62, 2, 0).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn untrained_distribution_sums_to_one() {
        let m = build_cnn(8, 3, 2).unwrap();
        let img = GrayImage::filled(8, 8, 0.3).unwrap();
        let p = predict(&m, &[&img, &img]).unwrap();
        for row in &p.probs {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(p.probs[0], p.probs[1]);
        assert_eq!(predict(&m, &[&img]).unwrap().probs[0], p.probs[0]);
    }
}
