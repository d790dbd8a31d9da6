//! Split, balance, train and evaluate.
//!
//! Every random choice draws from a stream derived from the run seed and a
//! component label, so the baseline and framework arms of one seed share the
//! same split, classifier initialization and batch order.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use synthbalance_tensor::rng::derive_seed;
use synthbalance_tensor::{LossTerms, Rng};

use crate::classifier::{build_cnn, predict, train_classifier, ClfTrainConfig, CnnModel, EpochStats};
use crate::config::{DataSource, Mode, RunConfig};
use crate::dataset::{dataset_hash, load_dataset_dir, ImageDataset, Origin, Sample};
use crate::error::{Error, Result};
use crate::generator::{build_cvae, sample_images, train_cvae_with, CvaeModel, GenTrainConfig};
use crate::image::{minmax_normalize, preprocess};
use crate::metrics::{confusion, metrics, MetricsReport};
use crate::synthdata::generate_blob_dataset;

/// Stratified split: each class with `n` samples puts `max(1, floor(fraction * n))`
/// of them, chosen by a seeded shuffle, into the training half. Both halves
/// keep the original sample order.
pub fn split_dataset(
    ds: &ImageDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..ds.class_count() {
        let mut idx = ds.indices_of(c);
        let n = idx.len();
        if n < 2 {
            return Err(Error::Dataset(format!(
                "class {:?} has {n} samples; splitting needs at least 2",
                ds.class_names()[c]
            )));
        }
        let k = ((train_fraction * n as f64).floor() as usize).max(1);
        Rng::derive(seed, &format!("split/{c}")).shuffle(&mut idx);
        train_idx.extend_from_slice(&idx[..k]);
        test_idx.extend_from_slice(&idx[k..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Resizes and min-max normalizes every image.
pub fn preprocess_dataset(ds: &ImageDataset, resolution: usize) -> Result<ImageDataset> {
    ds.map_images(|img| preprocess(img, resolution))
}

/// A generator trained on one class.
#[derive(Clone, Debug)]
pub struct ClassGenerator {
    pub class: usize,
    pub model: CvaeModel,
    pub config: GenTrainConfig,
    pub history: Vec<LossTerms>,
    /// Dataset indices of the images the model was trained on.
    pub sources: Vec<usize>,
    pub seconds: f64,
}

/// Generator settings for class `class` of a run seeded with `seed`.
pub fn generator_config(base: &GenTrainConfig, seed: u64, class: usize) -> GenTrainConfig {
    GenTrainConfig {
        seed: derive_seed(seed, &format!("generator/{class}")),
        ..base.clone()
    }
}

/// Trains the generator of class `class` on that class's images only,
/// calling `on_epoch` as [`train_cvae_with`] does.
#[allow(clippy::too_many_arguments)]
pub fn train_class_generator_with<F>(
    train: &ImageDataset,
    class: usize,
    base: &GenTrainConfig,
    latent_dim: usize,
    resolution: usize,
    seed: u64,
    on_epoch: F,
) -> Result<ClassGenerator>
where
    F: FnMut(usize, &CvaeModel, &LossTerms) -> Result<()>,
{
    let sources = train.indices_of(class);
    let images: Vec<_> = sources.iter().map(|&i| &train.items()[i].image).collect();
    let config = generator_config(base, seed, class);
    let start = Instant::now();
    let mut model = build_cvae(resolution, latent_dim, config.seed)?;
    let history = train_cvae_with(&mut model, &images, &config, on_epoch)?;
    Ok(ClassGenerator {
        class,
        model,
        config,
        history,
        sources,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains one generator per class flagged in `needed`.
pub fn train_class_generators(
    train: &ImageDataset,
    needed: &[bool],
    base: &GenTrainConfig,
    latent_dim: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<Option<ClassGenerator>>> {
    (0..train.class_count())
        .map(|c| {
            if !needed.get(c).copied().unwrap_or(false) {
                return Ok(None);
            }
            train_class_generator_with(train, c, base, latent_dim, resolution, seed, |_, _, _| Ok(()))
                .map(Some)
        })
        .collect()
}

fn check_target(train: &ImageDataset, target: usize) -> Result<()> {
    let counts = train.counts();
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n > target) {
        return Err(Error::Config(format!(
            "target {target} per class is below the {n} images of class {:?}",
            train.class_names()[c]
        )));
    }
    Ok(())
}

/// Borrowed models of trained generators, by class.
pub fn models(generators: &[Option<ClassGenerator>]) -> Vec<Option<&CvaeModel>> {
    generators.iter().map(|g| g.as_ref().map(|g| &g.model)).collect()
}

/// Appends `target - count` generated images to every class. Generated
/// images are min-max normalized like real ones. Draws for class `c` come
/// from a stream derived from `(seed, c)`, so a larger target extends the
/// generated set of a smaller one.
pub fn synthesize_balanced(
    train: &ImageDataset,
    generators: &[Option<&CvaeModel>],
    target: usize,
    seed: u64,
) -> Result<ImageDataset> {
    check_target(train, target)?;
    let mut out = train.clone();
    for (c, &n) in train.counts().iter().enumerate() {
        let need = target - n;
        if need == 0 {
            continue;
        }
        let model = generators
            .get(c)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Config(format!("no generator for class {c}")))?;
        let mut rng = Rng::derive(seed, &format!("generate/{c}"));
        for (index, img) in sample_images(model, need, &mut rng)?.into_iter().enumerate() {
            out.push(Sample {
                image: minmax_normalize(&img),
                label: c,
                origin: Origin::Synthetic { class: c, index },
            })?;
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct BalanceOutcome {
    pub dataset: ImageDataset,
    /// Indexed by class; `None` where the class needed no generated images.
    pub generators: Vec<Option<ClassGenerator>>,
}

/// Trains a generator for every class below `target` and tops each class up
/// to exactly `target` images, keeping all originals.
pub fn balance_dataset(
    train: &ImageDataset,
    target: usize,
    gen_cfg: &GenTrainConfig,
    latent_dim: usize,
    resolution: usize,
    seed: u64,
) -> Result<BalanceOutcome> {
    check_target(train, target)?;
    let needed: Vec<bool> = train.counts().iter().map(|&n| n < target).collect();
    let generators = train_class_generators(train, &needed, gen_cfg, latent_dim, resolution, seed)?;
    let dataset = synthesize_balanced(train, &models(&generators), target, seed)?;
    Ok(BalanceOutcome {
        dataset,
        generators,
    })
}

/// Wall-clock training time of one run, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub generator_seconds: f64,
    pub classifier_seconds: f64,
    pub total_seconds: f64,
}

/// Training time of one run, tagged with its mode and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub mode: Mode,
    pub seed: u64,
    #[serde(flatten)]
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub target_per_class: Option<usize>,
    pub train_counts: Vec<usize>,
    pub balanced_counts: Vec<usize>,
    pub test_hash: String,
    pub metrics: MetricsReport,
    pub history: Vec<EpochStats>,
    pub generator_histories: Vec<Option<Vec<LossTerms>>>,
}

impl RunOutcome {
    pub fn timing_record(&self) -> TimingRecord {
        TimingRecord {
            mode: self.record.mode,
            seed: self.record.seed,
            timing: self.timing,
        }
    }
}

pub struct RunOutcome {
    pub record: RunRecord,
    /// Kept out of the record so that records of repeated runs compare equal.
    pub timing: Timing,
    pub classifier: CnnModel,
    pub balanced: Option<BalanceOutcome>,
}

/// Settings for the classifier of a run seeded with `seed`.
pub fn classifier_config(base: &ClfTrainConfig, seed: u64) -> ClfTrainConfig {
    ClfTrainConfig {
        seed: derive_seed(seed, "classifier"),
        ..base.clone()
    }
}

/// Index of the positive class: the configured name, else the last class.
pub fn positive_index(ds: &ImageDataset, name: Option<&str>) -> Result<usize> {
    match name {
        None => Ok(ds.class_count().saturating_sub(1)),
        Some(n) => ds
            .class_names()
            .iter()
            .position(|c| c == n)
            .ok_or_else(|| Error::Config(format!("unknown positive class {n:?}"))),
    }
}

/// Metrics of `model` on `test`.
pub fn evaluate(model: &CnnModel, test: &ImageDataset, positive: usize) -> Result<MetricsReport> {
    let pred = predict(model, &test.images())?;
    metrics(&confusion(&test.labels(), &pred.labels, positive, test.class_count())?)
}

/// A classifier trained on `train` with the run's derived seeds. Returns the
/// model, its per-epoch curves, the settings used and the wall-clock seconds.
pub fn fit_classifier(
    cfg: &RunConfig,
    train: &ImageDataset,
    validation: Option<&ImageDataset>,
    seed: u64,
) -> Result<(CnnModel, Vec<EpochStats>, ClfTrainConfig, f64)> {
    let clf_cfg = classifier_config(&cfg.classifier, seed);
    let start = Instant::now();
    let mut model = build_cnn(cfg.resolution, train.class_count(), derive_seed(seed, "classifier/init"))?;
    let history = train_classifier(&mut model, train, &clf_cfg, validation)?;
    Ok((model, history, clf_cfg, start.elapsed().as_secs_f64()))
}

fn fit_and_score(
    cfg: &RunConfig,
    train: &ImageDataset,
    test: &ImageDataset,
    seed: u64,
) -> Result<(CnnModel, Vec<EpochStats>, MetricsReport, f64)> {
    let (model, history, _, seconds) = fit_classifier(cfg, train, Some(test), seed)?;
    let positive = positive_index(test, cfg.positive_class.as_deref())?;
    let report = evaluate(&model, test, positive)?;
    Ok((model, history, report, seconds))
}

/// One arm of the comparison on an existing preprocessed split. The test
/// split doubles as the validation set for the per-epoch curves; it never
/// influences training.
pub fn run_on_split(
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let (fit_set, balanced, gen_seconds) = match mode {
        Mode::Baseline => (train.clone(), None, 0.0),
        Mode::Framework => {
            let b = balance_dataset(
                train,
                cfg.target_per_class,
                &cfg.generator,
                cfg.latent_dim(),
                cfg.resolution,
                seed,
            )?;
            let secs = b.generators.iter().flatten().map(|g| g.seconds).sum();
            (b.dataset.clone(), Some(b), secs)
        }
    };
    let (classifier, history, report, clf_seconds) = fit_and_score(cfg, &fit_set, test, seed)?;
    let record = RunRecord {
        mode,
        seed,
        target_per_class: (mode == Mode::Framework).then_some(cfg.target_per_class),
        train_counts: train.counts(),
        balanced_counts: fit_set.counts(),
        test_hash: dataset_hash(test),
        metrics: report,
        history,
        generator_histories: balanced
            .as_ref()
            .map(|b| {
                b.generators
                    .iter()
                    .map(|g| g.as_ref().map(|g| g.history.clone()))
                    .collect()
            })
            .unwrap_or_default(),
    };
    Ok(RunOutcome {
        record,
        timing: Timing {
            generator_seconds: gen_seconds,
            classifier_seconds: clf_seconds,
            total_seconds: gen_seconds + clf_seconds,
        },
        classifier,
        balanced,
    })
}

/// Preprocessed `(train, test)` for `seed`: a stratified split of a dataset
/// directory, or independently drawn synthetic sets.
pub fn prepare_split(cfg: &RunConfig, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
    match &cfg.data {
        DataSource::Directory { path } => {
            let raw = load_dataset_dir(path)?.dataset;
            let ds = preprocess_dataset(&raw, cfg.resolution)?;
            split_dataset(&ds, cfg.train_fraction, derive_seed(seed, "split"))
        }
        DataSource::Synthetic {
            spec,
            train_positive,
            train_negative,
            test_positive,
            test_negative,
        } => {
            let train_spec = crate::synthdata::BlobSpec {
                seed: derive_seed(seed, "blobs/train"),
                ..spec.clone()
            };
            let test_spec = crate::synthdata::BlobSpec {
                seed: derive_seed(seed, "blobs/test"),
                ..spec.clone()
            };
            let train = generate_blob_dataset(*train_positive, *train_negative, &train_spec)?;
            let test = generate_blob_dataset(*test_positive, *test_negative, &test_spec)?;
            Ok((
                preprocess_dataset(&train, cfg.resolution)?,
                preprocess_dataset(&test, cfg.resolution)?,
            ))
        }
    }
}

/// Preprocesses and splits `raw`, then runs one arm.
pub fn run_experiment(raw: &ImageDataset, cfg: &RunConfig, mode: Mode, seed: u64) -> Result<RunOutcome> {
    let ds = preprocess_dataset(raw, cfg.resolution)?;
    let (train, test) = split_dataset(&ds, cfg.train_fraction, derive_seed(seed, "split"))?;
    run_on_split(&train, &test, cfg, mode, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub metrics: MetricsReport,
}

fn check_targets(targets: &[usize]) -> Result<()> {
    if targets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep targets must be ascending".into()));
    }
    Ok(())
}

/// Classes that need generated images for some target in `targets`.
pub fn classes_needing_generation(train: &ImageDataset, targets: &[usize]) -> Vec<bool> {
    let largest = targets.iter().copied().max().unwrap_or(0);
    train.counts().iter().map(|&n| n < largest).collect()
}

/// One framework run per target over a shared split, drawing from already
/// trained per-class generators.
pub fn sweep_with_models(
    train: &ImageDataset,
    test: &ImageDataset,
    targets: &[usize],
    generators: &[Option<&CvaeModel>],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    check_targets(targets)?;
    if let Some(&first) = targets.first() {
        check_target(train, first)?;
    }
    targets
        .iter()
        .map(|&target| {
            let balanced = synthesize_balanced(train, generators, target, seed)?;
            let (model, _, _, _) = fit_classifier(cfg, &balanced, None, seed)?;
            let positive = positive_index(test, cfg.positive_class.as_deref())?;
            let report = evaluate(&model, test, positive)?;
            Ok(SweepRow {
                target,
                seed,
                accuracy: report.accuracy,
                metrics: report,
            })
        })
        .collect()
}

/// [`sweep_with_models`] with generators trained once per class and reused
/// for every target.
pub fn sweep_generated_samples(
    train: &ImageDataset,
    test: &ImageDataset,
    targets: &[usize],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    check_targets(targets)?;
    if let Some(&first) = targets.first() {
        check_target(train, first)?;
    }
    let needed = classes_needing_generation(train, targets);
    let generators = train_class_generators(
        train,
        &needed,
        &cfg.generator,
        cfg.latent_dim(),
        cfg.resolution,
        seed,
    )?;
    sweep_with_models(train, test, targets, &models(&generators), cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;

    fn toy(counts: &[usize]) -> ImageDataset {
        let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let mut ds = ImageDataset::new(names).unwrap();
        let mut v = 0.0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                v += 1.0;
                ds.push(Sample {
                    image: GrayImage::filled(4, 4, v).unwrap(),
                    label: c,
                    origin: Origin::Real {
                        source: String::new(),
                    },
                })
                .unwrap();
            }
        }
        ds
    }

    #[test]
    fn split_floor_rule() {
        let ds = toy(&[5, 5]);
        let (tr, te) = split_dataset(&ds, 0.5, 1).unwrap();
        assert_eq!(tr.counts(), vec![2, 2]);
        assert_eq!(te.counts(), vec![3, 3]);
        let ds = toy(&[155, 98]);
        let (tr, te) = split_dataset(&ds, 0.7, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (176, 77));
        assert!(split_dataset(&toy(&[1, 5]), 0.5, 0).is_err());
        assert!(split_dataset(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_and_exact() {
        let ds = toy(&[7, 9]);
        let a = split_dataset(&ds, 0.6, 3).unwrap();
        let b = split_dataset(&ds, 0.6, 3).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<f32> = a
            .0
            .items()
            .iter()
            .chain(a.1.items())
            .map(|s| s.image.pixels()[0])
            .collect();
        all.sort_by(f32::total_cmp);
        let expect: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn no_op_balance() {
        let ds = toy(&[3, 3]);
        let out = balance_dataset(&ds, 3, &GenTrainConfig::default(), 2, 4, 0).unwrap();
        assert_eq!(out.dataset, ds);
        assert!(out.generators.iter().all(Option::is_none));
        assert!(balance_dataset(&ds, 2, &GenTrainConfig::default(), 2, 4, 0).is_err());
    }

    #[test]
    fn positive_class_lookup() {
        let ds = toy(&[1, 1]);
        assert_eq!(positive_index(&ds, None).unwrap(), 1);
        assert_eq!(positive_index(&ds, Some("c0")).unwrap(), 0);
        assert!(positive_index(&ds, Some("x")).is_err());
    }
}
