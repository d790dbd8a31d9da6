use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use synthbalance::checkpoint::Checkpoint;
use synthbalance::config::{Mode, RunConfig};
use synthbalance::dataset::{load_dataset_dir, write_dataset_dir, ImageDataset, Origin};
use synthbalance::generator::{sample_images, CvaeModel};
use synthbalance::image::GrayImage;
use synthbalance::metrics::MetricsReport;
use synthbalance::pipeline::{
    classes_needing_generation, classifier_config, evaluate, fit_classifier, models, positive_index, prepare_split,
    preprocess_dataset, run_on_split, sweep_generated_samples, sweep_with_models, synthesize_balanced,
    train_class_generator_with, RunOutcome, SweepRow, TimingRecord,
};
use synthbalance::report::{
    classifier_history_csv, confusion_table, generator_history_csv, metrics_table, mode_name,
    sweep_means, sweep_table, timing_table, to_json, write_file, write_json, write_sample_grid,
};
use synthbalance::synthdata::{generate_blob_dataset, BlobSpec};
use synthbalance::tensor::Rng;

use crate::args::SynthArgs;

const GRID_SAMPLES: usize = 16;
const GRID_COLUMNS: usize = 4;

/// Output directory of a command: `--out` as given, else `<root>/<name>`.
pub fn out_dir(out: Option<&Path>, root: &Path, name: &str) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| root.join(name))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_file(path, text.as_bytes())?)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    Ok(write_json(&dir.join("config.json"), cfg)?)
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

pub fn ingest(path: &Path, out: &Path) -> Result<()> {
    let loaded = load_dataset_dir(path)?;
    let ds = &loaded.dataset;
    for w in &loaded.warnings {
        eprintln!("warning: skipped {}: {}", w.path.display(), w.message);
    }
    let mut text = format!("{}\n", path.display());
    for (name, n) in ds.class_names().iter().zip(ds.counts()) {
        text.push_str(&format!("  {name}: {n}\n"));
    }
    text.push_str("resolutions:\n");
    for ((h, w), n) in ds.resolution_histogram() {
        text.push_str(&format!("  {h}x{w}: {n}\n"));
    }
    if !loaded.warnings.is_empty() {
        text.push_str(&format!("unreadable files: {}\n", loaded.warnings.len()));
    }
    print!("{text}");

    create_dir(out)?;
    let summary = json!({
        "path": path,
        "classes": ds.class_names().iter().zip(ds.counts())
            .map(|(name, count)| json!({"name": name, "count": count}))
            .collect::<Vec<_>>(),
        "resolutions": ds.resolution_histogram().into_iter()
            .map(|((h, w), n)| json!({"height": h, "width": w, "count": n}))
            .collect::<Vec<_>>(),
        "warnings": loaded.warnings.iter()
            .map(|w| json!({"path": w.path, "message": w.message}))
            .collect::<Vec<_>>(),
    });
    write_json(&out.join("ingest.json"), &summary)?;
    write_text(&out.join("ingest.txt"), &text)?;
    write_json(&out.join("config.json"), &json!({ "command": "ingest", "path": path }))?;
    Ok(())
}

pub fn synth(args: &SynthArgs, out: &Path) -> Result<()> {
    let mut spec = BlobSpec {
        image_size: args.size,
        seed: args.seed,
        ..BlobSpec::default()
    };
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.delta {
        spec.delta = v;
    }
    if let Some(v) = args.disk_level {
        spec.disk_level = v;
    }
    if let Some(v) = args.disk_radius_fraction {
        spec.disk_radius_fraction = v;
    }
    let ds = generate_blob_dataset(args.positive, args.negative, &spec)?;
    if ds.is_empty() {
        eprintln!("warning: no images requested; {} holds empty class directories", out.display());
    }
    create_dir(out)?;
    write_dataset_dir(&ds, out, 255.0)?;
    write_json(
        &out.join("config.json"),
        &json!({ "command": "synth", "positive": args.positive, "negative": args.negative, "spec": spec }),
    )?;
    println!(
        "wrote {} positive and {} negative images to {}",
        args.positive,
        args.negative,
        out.display()
    );
    Ok(())
}

/// Epochs at which sample grids are written: 100, 300, 1700 and 2000 of a
/// 2000-epoch schedule, scaled proportionally to shorter ones, plus the final
/// epoch of longer ones.
pub fn milestones(epochs: usize) -> Vec<usize> {
    const BASE: [usize; 4] = [100, 300, 1700, 2000];
    let mut out: Vec<usize> = if epochs >= 2000 {
        BASE.to_vec()
    } else {
        BASE.iter()
            .map(|&m| ((m * epochs + 1000) / 2000).max(1))
            .collect()
    };
    out.push(epochs);
    out.retain(|&e| e >= 1 && e <= epochs);
    out.sort_unstable();
    out.dedup();
    out
}

/// The same latent draws at every milestone, so grids are comparable.
fn grid_samples(model: &CvaeModel, seed: u64, class: usize) -> synthbalance::Result<Vec<GrayImage>> {
    let mut rng = Rng::derive(seed, &format!("grid/{class}"));
    sample_images(model, GRID_SAMPLES, &mut rng)
}

pub fn train_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seed = first_seed(cfg);
    let (train, _) = prepare_split(cfg, seed)?;
    create_dir(out)?;
    write_config(out, cfg)?;
    let marks = milestones(cfg.generator.epochs);
    for (class, name) in train.class_names().iter().enumerate() {
        let gen = train_class_generator_with(
            &train,
            class,
            &cfg.generator,
            cfg.latent_dim(),
            cfg.resolution,
            seed,
            |epoch, model, _| {
                if marks.contains(&epoch) {
                    write_sample_grid(
                        &out.join(format!("{name}_epoch_{epoch:05}.pgm")),
                        &grid_samples(model, seed, class)?,
                        GRID_COLUMNS,
                    )?;
                }
                Ok(())
            },
        )?;
        let ckpt = Checkpoint::from_cvae(&gen.model, &gen.config, gen.history.len(), Some(name.clone()))?;
        ckpt.save(&out.join(format!("{name}.ckpt")))?;
        write_text(
            &out.join(format!("{name}_history.csv")),
            &generator_history_csv(&gen.history),
        )?;
        match gen.history.last() {
            Some(last) => println!(
                "{name}: {} images, {} epochs, final loss {:.3} ({:.1}s)",
                gen.sources.len(),
                gen.history.len(),
                last.total,
                gen.seconds
            ),
            None => println!("{name}: {} images, no training epochs", gen.sources.len()),
        }
    }
    Ok(())
}

fn load_generator(dir: &Path, name: &str, cfg: &RunConfig) -> Result<CvaeModel> {
    let path = dir.join(format!("{name}.ckpt"));
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.manifest.class_name.as_deref() != Some(name) {
        bail!("{} was trained for class {:?}", path.display(), ckpt.manifest.class_name);
    }
    let model = ckpt.to_cvae()?;
    if model.image_size() != cfg.resolution {
        bail!(
            "{} generates {} px images but the resolution is {}",
            path.display(),
            model.image_size(),
            cfg.resolution
        );
    }
    Ok(model)
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    split: &'static str,
    class: String,
    origin: Origin,
}

fn manifest_entries(
    ds: &ImageDataset,
    paths: &[PathBuf],
    root: &Path,
    split: &'static str,
) -> Vec<ManifestEntry> {
    ds.items()
        .iter()
        .zip(paths)
        .map(|(s, p)| ManifestEntry {
            file: p
                .strip_prefix(root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/"),
            split,
            class: ds.class_names()[s.label].clone(),
            origin: s.origin.clone(),
        })
        .collect()
}

pub fn balance(cfg: &RunConfig, generators: &Path, out: &Path) -> Result<()> {
    let seed = first_seed(cfg);
    let (train, test) = prepare_split(cfg, seed)?;
    let target = cfg.target_per_class;
    let mut loaded = Vec::new();
    for (c, name) in train.class_names().iter().enumerate() {
        loaded.push(if train.counts()[c] < target {
            Some(load_generator(generators, name, cfg)?)
        } else {
            None
        });
    }
    let refs: Vec<Option<&CvaeModel>> = loaded.iter().map(Option::as_ref).collect();
    let balanced = synthesize_balanced(&train, &refs, target, seed)?;

    create_dir(out)?;
    write_config(out, cfg)?;
    let train_paths = write_dataset_dir(&balanced, &out.join("train"), 255.0)?;
    let test_paths = write_dataset_dir(&test, &out.join("test"), 255.0)?;
    let real: Vec<usize> = train.counts();
    let synthetic: Vec<usize> = balanced
        .counts()
        .iter()
        .zip(&real)
        .map(|(b, r)| b - r)
        .collect();
    let mut files = manifest_entries(&balanced, &train_paths, out, "train");
    files.extend(manifest_entries(&test, &test_paths, out, "test"));
    write_json(
        &out.join("manifest.json"),
        &json!({
            "target_per_class": target,
            "seed": seed,
            "classes": balanced.class_names(),
            "real_counts": real,
            "synthetic_counts": synthetic,
            "test_counts": test.counts(),
            "files": files,
        }),
    )?;
    for (c, name) in balanced.class_names().iter().enumerate() {
        println!("{name}: {} real + {} generated", real[c], synthetic[c]);
    }
    println!("test split: {} images", test.len());
    Ok(())
}

fn load_preprocessed(dir: &Path, resolution: usize) -> Result<ImageDataset> {
    let loaded = load_dataset_dir(dir)?;
    for w in &loaded.warnings {
        eprintln!("warning: skipped {}: {}", w.path.display(), w.message);
    }
    Ok(preprocess_dataset(&loaded.dataset, resolution)?)
}

pub fn train_clf(cfg: &RunConfig, train_dir: &Path, validation_dir: Option<&Path>, out: &Path) -> Result<()> {
    let seed = first_seed(cfg);
    let train = load_preprocessed(train_dir, cfg.resolution)?;
    let validation = validation_dir
        .map(|d| load_preprocessed(d, cfg.resolution))
        .transpose()?;
    if let Some(v) = &validation {
        if v.class_names() != train.class_names() {
            bail!("validation classes {:?} differ from training classes {:?}", v.class_names(), train.class_names());
        }
    }
    let (model, history, clf_cfg, seconds) = fit_classifier(cfg, &train, validation.as_ref(), seed)?;
    create_dir(out)?;
    write_config(out, cfg)?;
    Checkpoint::from_cnn(&model, &clf_cfg, history.len())?.save(&out.join("classifier.ckpt"))?;
    write_text(&out.join("history.csv"), &classifier_history_csv(&history))?;
    write_json(&out.join("classes.json"), train.class_names())?;
    if let Some(last) = history.last() {
        println!(
            "{} epochs on {} images: train loss {:.4}, train accuracy {:.4} ({:.1}s)",
            history.len(),
            train.len(),
            last.train_loss,
            last.train_accuracy,
            seconds
        );
    }
    Ok(())
}

fn metrics_text(name: &str, m: &MetricsReport, classes: &[String]) -> String {
    format!(
        "{}\nnormalized confusion matrix\n{}",
        metrics_table(&[(name.to_owned(), m)]),
        confusion_table(m, classes)
    )
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, test_dir: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ckpt.to_cnn()?;
    let test = load_preprocessed(test_dir, model.image_size())?;
    if test.class_count() != model.class_count() {
        bail!(
            "{} has {} classes but the classifier predicts {}",
            test_dir.display(),
            test.class_count(),
            model.class_count()
        );
    }
    let positive = positive_index(&test, cfg.positive_class.as_deref())?;
    let report = evaluate(&model, &test, positive)?;
    create_dir(out)?;
    write_config(out, cfg)?;
    write_json(&out.join("metrics.json"), &report)?;
    let text = metrics_text("classifier", &report, test.class_names());
    write_text(&out.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct ModeSummary {
    mode: Mode,
    runs: usize,
    mean_accuracy: f64,
    mean_precision: f64,
    mean_recall: f64,
    mean_f1: f64,
}

fn summarize(mode: Mode, reports: &[&MetricsReport]) -> ModeSummary {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|m| f(m)).sum::<f64>() / n;
    ModeSummary {
        mode,
        runs: reports.len(),
        mean_accuracy: mean(|m| m.accuracy),
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_f1: mean(|m| m.f1),
    }
}

fn write_run(dir: &Path, outcome: &RunOutcome, classes: &[String]) -> Result<()> {
    create_dir(dir)?;
    let r = &outcome.record;
    write_json(&dir.join("record.json"), r)?;
    write_json(&dir.join("metrics.json"), &r.metrics)?;
    write_text(&dir.join("metrics.txt"), &metrics_text(mode_name(r.mode), &r.metrics, classes))?;
    write_text(&dir.join("history.csv"), &classifier_history_csv(&r.history))?;
    if let Some(b) = &outcome.balanced {
        for g in b.generators.iter().flatten() {
            let name = &classes[g.class];
            Checkpoint::from_cvae(&g.model, &g.config, g.history.len(), Some(name.clone()))?
                .save(&dir.join(format!("generator_{name}.ckpt")))?;
            write_text(
                &dir.join(format!("generator_{name}_history.csv")),
                &generator_history_csv(&g.history),
            )?;
            write_sample_grid(
                &dir.join(format!("samples_{name}.pgm")),
                &grid_samples(&g.model, r.seed, g.class)?,
                GRID_COLUMNS,
            )?;
        }
    }
    Ok(())
}

pub fn experiment(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_config(out, cfg)?;
    let mut records = Vec::new();
    let mut timings: Vec<TimingRecord> = Vec::new();
    let mut sweep: Vec<SweepRow> = Vec::new();
    let mut skipped_targets = Vec::new();
    for &seed in &cfg.seeds {
        let (train, test) = prepare_split(cfg, seed)?;
        let classes = train.class_names().to_vec();
        let seed_dir = out.join(format!("seed_{seed}"));
        let mut framework = None;
        for mode in [Mode::Baseline, Mode::Framework] {
            let outcome = run_on_split(&train, &test, cfg, mode, seed)?;
            println!(
                "seed {seed} {:<9} accuracy {:.4} ({:.1}s)",
                mode_name(mode),
                outcome.record.metrics.accuracy,
                outcome.timing.total_seconds
            );
            let dir = seed_dir.join(mode_name(mode));
            write_run(&dir, &outcome, &classes)?;
            Checkpoint::from_cnn(
                &outcome.classifier,
                &classifier_config(&cfg.classifier, seed),
                outcome.record.history.len(),
            )?
            .save(&dir.join("classifier.ckpt"))?;
            timings.push(outcome.timing_record());
            records.push(outcome.record.clone());
            if mode == Mode::Framework {
                framework = Some(outcome);
            }
        }

        let largest = train.counts().into_iter().max().unwrap_or(0);
        let (targets, skipped): (Vec<usize>, Vec<usize>) =
            cfg.sweep_targets.iter().partition(|&&t| t >= largest);
        skipped_targets.extend(skipped.iter().map(|&t| (seed, t)));
        if targets.is_empty() {
            continue;
        }
        let needed = classes_needing_generation(&train, &targets);
        let reused = framework.as_ref().and_then(|f| f.balanced.as_ref()).and_then(|b| {
            let ms = models(&b.generators);
            needed
                .iter()
                .zip(&ms)
                .all(|(&need, m)| !need || m.is_some())
                .then_some(ms)
        });
        let rows = match reused {
            Some(ms) => sweep_with_models(&train, &test, &targets, &ms, cfg, seed)?,
            None => sweep_generated_samples(&train, &test, &targets, cfg, seed)?,
        };
        sweep.extend(rows);
    }

    let by_mode = |mode: Mode| records.iter().filter(|r| r.mode == mode).map(|r| &r.metrics).collect::<Vec<_>>();
    let summaries = [
        summarize(Mode::Baseline, &by_mode(Mode::Baseline)),
        summarize(Mode::Framework, &by_mode(Mode::Framework)),
    ];
    let rows: Vec<(String, &MetricsReport)> = records
        .iter()
        .map(|r| (format!("seed {} {}", r.seed, mode_name(r.mode)), &r.metrics))
        .collect();
    let mut text = metrics_table(&rows);
    text.push('\n');
    for s in &summaries {
        text.push_str(&format!(
            "mean {:<9}  accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  ({} runs)\n",
            mode_name(s.mode),
            s.mean_accuracy,
            s.mean_precision,
            s.mean_recall,
            s.mean_f1,
            s.runs
        ));
    }
    write_text(&out.join("metrics.txt"), &text)?;
    write_json(&out.join("summary.json"), &json!({ "modes": summaries, "runs": records }))?;
    print!("{text}");

    let timing = timing_table(&timings);
    write_text(&out.join("timing.txt"), &timing)?;
    write_json(&out.join("timing.json"), &timings)?;
    print!("\n{timing}");

    let mut sweep_text = sweep_table(&sweep);
    for (seed, t) in &skipped_targets {
        sweep_text.push_str(&format!(
            "skipped target {t} for seed {seed}: below an existing class count\n"
        ));
    }
    write_text(&out.join("sweep.txt"), &sweep_text)?;
    let means: Vec<_> = sweep_means(&sweep)
        .into_iter()
        .map(|(target, accuracy, runs)| json!({"target": target, "mean_accuracy": accuracy, "runs": runs}))
        .collect();
    write_file(
        &out.join("sweep.json"),
        to_json(&json!({ "rows": sweep, "means": means }))?.as_bytes(),
    )?;
    print!("\n{sweep_text}");
    Ok(())
}
