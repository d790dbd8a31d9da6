//! Convolutional variational autoencoder trained on the images of one class.
//!
//! Encoder: two `conv 3x3 -> relu -> maxpool 2 -> dropout` blocks (16 then 32
//! filters), flatten, and two dense heads for `mu` and `logvar`. Decoder:
//! dense to `32 x s/4 x s/4`, relu, then two `upsample x2 -> conv 3x3 -> relu`
//! blocks (32 then 16 filters) and a final single-filter conv with a sigmoid.

use serde::{Deserialize, Serialize};
use synthbalance_tensor::{
    LayerSpec, LossTerms, Mode, Padding, ParamSet, Real, RmspropState, Rng, Sequential, Tape,
    Tensor, Var, PROB_FLOOR,
};

use crate::batch::{stack_images, unstack_images};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeArch {
    pub image_size: usize,
    pub latent_dim: usize,
    pub encoder_filters: [usize; 2],
    pub dropout_rate: f64,
}

impl CvaeArch {
    pub fn new(image_size: usize, latent_dim: usize) -> Self {
        Self {
            image_size,
            latent_dim,
            encoder_filters: [16, 32],
            dropout_rate: GenTrainConfig::default().dropout_rate,
        }
    }
}

/// Latent width used when none is configured: 16 at 64 px, 64 at 256 px.
pub fn default_latent_dim(image_size: usize) -> usize {
    (image_size / 4).clamp(2, 64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            dropout_rate: 0.1,
            epochs: 2000,
            seed: 0,
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "generator learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("generator batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "generator dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    arch: CvaeArch,
    encoder: Sequential,
    mu_head: Sequential,
    logvar_head: Sequential,
    decoder: Sequential,
    params: ParamSet,
}

struct Stacks {
    encoder: Sequential,
    mu_head: Sequential,
    logvar_head: Sequential,
    decoder: Sequential,
}

fn conv(filters: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
    }
}

fn stacks(arch: &CvaeArch) -> Result<Stacks> {
    let s = arch.image_size;
    if s < 4 || s % 4 != 0 {
        return Err(Error::Config(format!(
            "image size must be a positive multiple of 4, got {s}"
        )));
    }
    if arch.latent_dim == 0 {
        return Err(Error::Config("latent_dim must be >= 1".into()));
    }
    let [f1, f2] = arch.encoder_filters;
    let pool = LayerSpec::MaxPool2d {
        window: 2,
        stride: 2,
    };
    let drop = LayerSpec::Dropout {
        rate: arch.dropout_rate,
    };
    let encoder = Sequential::new(
        &[1, s, s],
        vec![
            conv(f1),
            LayerSpec::Relu,
            pool.clone(),
            drop.clone(),
            conv(f2),
            LayerSpec::Relu,
            pool,
            drop,
            LayerSpec::Flatten,
        ],
    )?;
    let features = encoder.output_shape();
    let head = || {
        Sequential::new(
            &features,
            vec![LayerSpec::Dense {
                units: arch.latent_dim,
            }],
        )
    };
    let q = s / 4;
    let decoder = Sequential::new(
        &[arch.latent_dim],
        vec![
            LayerSpec::Dense { units: f2 * q * q },
            LayerSpec::Unflatten {
                channels: f2,
                height: q,
                width: q,
            },
            LayerSpec::UpsampleNearest { factor: 2 },
            conv(f2),
            LayerSpec::Relu,
            LayerSpec::UpsampleNearest { factor: 2 },
            conv(f1),
            LayerSpec::Relu,
            conv(1),
            LayerSpec::Sigmoid,
        ],
    )?;
    Ok(Stacks {
        encoder,
        mu_head: head()?,
        logvar_head: head()?,
        decoder,
    })
}

/// Graph handles produced by one forward pass of the autoencoder objective.
pub struct ElboVars {
    pub mu: Var,
    pub logvar: Var,
    pub reconstruction: Var,
    pub l1: Var,
    pub l2: Var,
    pub total: Var,
}

/// Builds a freshly initialized autoencoder for `image_size x image_size`
/// inputs. `image_size` must be divisible by 4.
pub fn build_cvae(image_size: usize, latent_dim: usize, seed: u64) -> Result<CvaeModel> {
    CvaeModel::init(CvaeArch::new(image_size, latent_dim), seed)
}

impl CvaeModel {
    pub fn init(arch: CvaeArch, seed: u64) -> Result<Self> {
        let st = stacks(&arch)?;
        let mut rng = Rng::derive(seed, "cvae/init");
        let mut params = ParamSet::new();
        params.extend(st.encoder.init_params("encoder", &mut rng)?)?;
        params.extend(st.mu_head.init_params("mu", &mut rng)?)?;
        params.extend(st.logvar_head.init_params("logvar", &mut rng)?)?;
        params.extend(st.decoder.init_params("decoder", &mut rng)?)?;
        Ok(Self::assemble(arch, st, params))
    }

    fn assemble(arch: CvaeArch, st: Stacks, params: ParamSet) -> Self {
        Self {
            arch,
            encoder: st.encoder,
            mu_head: st.mu_head,
            logvar_head: st.logvar_head,
            decoder: st.decoder,
            params,
        }
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(arch: CvaeArch, params: ParamSet) -> Result<Self> {
        let st = stacks(&arch)?;
        let expected: Vec<(String, Vec<usize>)> = st
            .encoder
            .param_shapes("encoder")
            .into_iter()
            .chain(st.mu_head.param_shapes("mu"))
            .chain(st.logvar_head.param_shapes("logvar"))
            .chain(st.decoder.param_shapes("decoder"))
            .collect();
        check_params(&expected, &params)?;
        Ok(Self::assemble(arch, st, params))
    }

    pub fn arch(&self) -> &CvaeArch {
        &self.arch
    }

    pub fn image_size(&self) -> usize {
        self.arch.image_size
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Flattened feature width entering the latent heads.
    pub fn feature_width(&self) -> usize {
        self.encoder.output_shape()[0]
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        let arch = CvaeArch {
            dropout_rate: rate,
            ..self.arch
        };
        let st = stacks(&arch)?;
        st.encoder.layers().iter().try_for_each(|l| l.validate())?;
        self.arch = arch;
        self.encoder = st.encoder;
        Ok(())
    }

    fn segments(&self) -> [usize; 4] {
        [
            self.encoder.param_shapes("").len(),
            self.mu_head.param_shapes("").len(),
            self.logvar_head.param_shapes("").len(),
            self.decoder.param_shapes("").len(),
        ]
    }

    fn split<'a>(&self, vars: &'a [Var]) -> Result<[&'a [Var]; 4]> {
        let [a, b, c, d] = self.segments();
        if vars.len() != a + b + c + d {
            return Err(Error::Config(format!(
                "autoencoder needs {} parameter tensors, got {}",
                a + b + c + d,
                vars.len()
            )));
        }
        let (enc, rest) = vars.split_at(a);
        let (mu, rest) = rest.split_at(b);
        let (lv, dec) = rest.split_at(c);
        debug_assert_eq!(dec.len(), d);
        Ok([enc, mu, lv, dec])
    }

    /// `(mu, logvar)` for an image batch `x [b, 1, s, s]` on `tape`.
    pub fn encode_vars<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let [enc, mu_p, lv_p, _] = self.split(params)?;
        let h = self.encoder.forward(tape, x, enc, mode)?;
        let mu = self.mu_head.forward(tape, h, mu_p, mode)?;
        let lv = self.logvar_head.forward(tape, h, lv_p, mode)?;
        Ok((mu, lv))
    }

    /// Decoder probabilities `[b, 1, s, s]` for latent codes `z [b, d]`.
    pub fn decode_vars<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        z: Var,
    ) -> Result<Var> {
        let [_, _, _, dec] = self.split(params)?;
        Ok(self.decoder.forward(tape, z, dec, &mut Mode::Infer)?)
    }

    /// The full objective for a fixed noise draw `eps [b, d]`.
    pub fn elbo<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: &Tensor<T>,
        eps: &Tensor<T>,
        mode: &mut Mode<'_>,
    ) -> Result<ElboVars> {
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_vars(tape, params, xv, mode)?;
        let z = tape.reparameterize_with(mu, logvar, eps)?;
        let reconstruction = self.decode_vars(tape, params, z)?;
        let l1 = tape.reconstruction_loss(reconstruction, x)?;
        let l2 = tape.kl_gaussian(mu, logvar)?;
        let total = tape.add(l1, l2)?;
        Ok(ElboVars {
            mu,
            logvar,
            reconstruction,
            l1,
            l2,
            total,
        })
    }
}

pub(crate) fn check_params(expected: &[(String, Vec<usize>)], params: &ParamSet) -> Result<()> {
    if expected.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
        if name != got_name || shape.as_slice() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

const INFER_CHUNK: usize = 64;

/// Posterior `(mu, logvar)` of each image, inference mode.
pub fn encode(model: &CvaeModel, images: &[&GrayImage]) -> Result<(Tensor, Tensor)> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot encode zero images".into()));
    }
    let d = model.latent_dim();
    let (mut mus, mut lvs) = (Vec::new(), Vec::new());
    for chunk in images.chunks(INFER_CHUNK) {
        let x = stack_images::<f32>(chunk, model.image_size())?;
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false);
        let xv = tape.constant(x);
        let (mu, lv) = model.encode_vars(&mut tape, &vars, xv, &mut Mode::Infer)?;
        mus.extend_from_slice(tape.value(mu)?.data());
        lvs.extend_from_slice(tape.value(lv)?.data());
    }
    let n = images.len();
    Ok((
        Tensor::from_vec(&[n, d], mus)?,
        Tensor::from_vec(&[n, d], lvs)?,
    ))
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, 1)` drawn from `rng`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (m, l) = (tape.constant(mu.clone()), tape.constant(logvar.clone()));
    let z = tape.reparameterize(m, l, rng)?;
    Ok(tape.value(z)?.clone())
}

/// Decoder output for `z [b, d]`, clamped into the open unit interval.
pub fn decode(model: &CvaeModel, z: &Tensor) -> Result<Tensor> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != model.latent_dim() {
        return Err(Error::Config(format!(
            "latent batch must be [b, {}], got {shape:?}",
            model.latent_dim()
        )));
    }
    let s = model.image_size();
    let mut out = Vec::with_capacity(shape[0] * s * s);
    for start in (0..shape[0]).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(shape[0]);
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false);
        let zv = tape.constant(z.slice_batch(start, end)?);
        let p = model.decode_vars(&mut tape, &vars, zv)?;
        let floor = PROB_FLOOR as f32;
        out.extend(
            tape.value(p)?
                .data()
                .iter()
                .map(|&v| v.clamp(floor, 1.0 - floor)),
        );
    }
    Ok(Tensor::from_vec(&[shape[0], 1, s, s], out)?)
}

/// `decode(mu)` for each image: the deterministic reconstruction.
pub fn reconstruct(model: &CvaeModel, images: &[&GrayImage]) -> Result<Vec<GrayImage>> {
    let (mu, _) = encode(model, images)?;
    unstack_images(&decode(model, &mu)?)
}

/// `n` images decoded from `z ~ N(0, I)`.
pub fn sample_images(model: &CvaeModel, n: usize, rng: &mut Rng) -> Result<Vec<GrayImage>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = model.latent_dim();
    let z: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
    unstack_images(&decode(model, &Tensor::from_vec(&[n, d], z)?)?)
}

/// Trains on `images` (one class, preprocessed to the model's size) and
/// returns the epoch-mean loss terms.
pub fn train_cvae(
    model: &mut CvaeModel,
    images: &[&GrayImage],
    cfg: &GenTrainConfig,
) -> Result<Vec<LossTerms>> {
    train_cvae_with(model, images, cfg, |_, _, _| Ok(()))
}

/// [`train_cvae`] calling `on_epoch(epoch, model, terms)` after every epoch,
/// with `epoch` counted from 1.
pub fn train_cvae_with<F>(
    model: &mut CvaeModel,
    images: &[&GrayImage],
    cfg: &GenTrainConfig,
    mut on_epoch: F,
) -> Result<Vec<LossTerms>>
where
    F: FnMut(usize, &CvaeModel, &LossTerms) -> Result<()>,
{
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("cannot train a generator on zero images".into()));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    model.set_dropout_rate(cfg.dropout_rate)?;
    let data = stack_images::<f32>(images, model.image_size())?;
    let mut order_rng = Rng::derive(cfg.seed, "cvae/order");
    let mut drop_rng = Rng::derive(cfg.seed, "cvae/dropout");
    let mut noise_rng = Rng::derive(cfg.seed, "cvae/noise");
    let mut opt = RmspropState::new(cfg.learning_rate);
    let d = model.latent_dim();
    let per_image = data.len() / images.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut parts = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut buf = Vec::with_capacity(batch.len() * per_image);
            for &i in batch {
                buf.extend_from_slice(&data.data()[i * per_image..(i + 1) * per_image]);
            }
            let s = model.image_size();
            let x = Tensor::from_vec(&[batch.len(), 1, s, s], buf)?;
            let eps_data = (0..batch.len() * d)
                .map(|_| noise_rng.normal() as f32)
                .collect();
            let eps = Tensor::from_vec(&[batch.len(), d], eps_data)?;
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, true);
            let out = model.elbo(&mut tape, &vars, &x, &eps, &mut Mode::Train(&mut drop_rng))?;
            let terms = LossTerms::new(
                tape.value(out.l1)?.item()?.into(),
                tape.value(out.l2)?.item()?.into(),
            );
            let grads = tape.backward(out.total)?.take_all(&vars)?;
            opt.step(&mut model.params.tensors_mut(), &grads)?;
            parts.push((terms, batch.len()));
        }
        let terms = LossTerms::weighted_mean(&parts);
        if !terms.total.is_finite() {
            return Err(Error::Tensor(synthbalance_tensor::TensorError::NonFinite {
                op: "cvae training loss",
            }));
        }
        on_epoch(epoch, model, &terms)?;
        history.push(terms);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_must_divide_by_four() {
        assert!(build_cvae(30, 4, 0).is_err());
        assert!(build_cvae(16, 0, 0).is_err());
        assert!(build_cvae(16, 4, 0).is_ok());
    }

    #[test]
    fn feature_width_at_64() {
        let m = build_cvae(64, 16, 0).unwrap();
        assert_eq!(m.feature_width(), 32 * 16 * 16);
        assert_eq!(default_latent_dim(64), 16);
        assert_eq!(default_latent_dim(256), 64);
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(build_cvae(16, 4, 3).unwrap(), build_cvae(16, 4, 3).unwrap());
        assert_ne!(
            build_cvae(16, 4, 3).unwrap().params(),
            build_cvae(16, 4, 4).unwrap().params()
        );
    }

    #[test]
    fn decode_shapes_and_range() {
        let m = build_cvae(16, 4, 1).unwrap();
        let z = Tensor::zeros(&[1, 4]).unwrap();
        let x = decode(&m, &z).unwrap();
        assert_eq!(x.shape(), &[1, 1, 16, 16]);
        assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(decode(&m, &Tensor::zeros(&[1, 5]).unwrap()).is_err());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut m = build_cvae(8, 2, 0).unwrap();
        let before = m.clone();
        let img = GrayImage::filled(8, 8, 0.5).unwrap();
        let cfg = GenTrainConfig {
            epochs: 0,
            ..GenTrainConfig::default()
        };
        assert!(train_cvae(&mut m, &[&img, &img], &cfg).unwrap().is_empty());
        assert_eq!(m, before);
        assert!(train_cvae(&mut m, &[], &cfg).is_err());
    }
}
