//! Plain-text tables, JSON reports, loss-curve files and sample grids.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use synthbalance_tensor::LossTerms;

use crate::classifier::EpochStats;
use crate::error::{Error, Result};
use crate::image::{encode_pgm, GrayImage};
use crate::metrics::MetricsReport;
use crate::config::Mode;
use crate::pipeline::{SweepRow, TimingRecord};

/// Creates parent directories and writes `bytes` to `path`.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value)?.as_bytes())
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// One row per named report: the four metrics plus the binary counts.
pub fn metrics_table(rows: &[(String, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>5}  {:>5}  {:>5}  {:>5}\n",
        "system", "accuracy", "precision", "recall", "f1", "tp", "tn", "fp", "fn"
    );
    for (name, m) in rows {
        let flag = |v: f64, undefined: bool| {
            if undefined {
                format!("{}*", pct(v))
            } else {
                pct(v)
            }
        };
        let c = &m.confusion;
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>5}  {:>5}  {:>5}  {:>5}",
            name,
            pct(m.accuracy),
            flag(m.precision, m.precision_undefined),
            flag(m.recall, m.recall_undefined),
            flag(m.f1, m.f1_undefined),
            c.tp,
            c.tn,
            c.fp,
            c.fn_
        );
    }
    if rows.iter().any(|(_, m)| m.precision_undefined || m.recall_undefined || m.f1_undefined) {
        s.push_str("* zero denominator, reported as 0\n");
    }
    s
}

/// Row-normalized confusion grid with class names.
pub fn confusion_table(m: &MetricsReport, class_names: &[String]) -> String {
    let width = class_names.iter().map(String::len).max().unwrap_or(0).max(10);
    let mut s = format!("{:<width$}", "true\\pred");
    for n in class_names {
        let _ = write!(s, "  {n:>width$}");
    }
    s.push('\n');
    for (name, row) in class_names.iter().zip(&m.normalized_confusion) {
        let _ = write!(s, "{name:<width$}");
        for v in row {
            let _ = write!(s, "  {v:>width$.4}");
        }
        s.push('\n');
    }
    s
}

/// Mean and spread of training time per mode.
pub fn timing_table(records: &[TimingRecord]) -> String {
    let mut s = format!(
        "{:<10}  {:>5}  {:>14}  {:>15}  {:>12}\n",
        "mode", "runs", "generator_s", "classifier_s", "total_s"
    );
    for mode in [Mode::Baseline, Mode::Framework] {
        let rs: Vec<_> = records.iter().filter(|r| r.mode == mode).collect();
        if rs.is_empty() {
            continue;
        }
        let mean = |f: fn(&TimingRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
        let _ = writeln!(
            s,
            "{:<10}  {:>5}  {:>14.3}  {:>15.3}  {:>12.3}",
            mode_name(mode),
            rs.len(),
            mean(|r| r.timing.generator_seconds),
            mean(|r| r.timing.classifier_seconds),
            mean(|r| r.timing.total_seconds)
        );
    }
    s
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "baseline",
        Mode::Framework => "framework",
    }
}

/// `(target, mean accuracy, runs)` in ascending target order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(usize, f64, usize)> {
    let mut targets: Vec<usize> = rows.iter().map(|r| r.target).collect();
    targets.sort_unstable();
    targets.dedup();
    targets
        .into_iter()
        .map(|t| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.target == t).map(|r| r.accuracy).collect();
            (t, accs.iter().sum::<f64>() / accs.len() as f64, accs.len())
        })
        .collect()
}

/// One row per target with the seed-averaged accuracy.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>8}  {:>5}  {:>13}\n", "target", "runs", "mean_accuracy");
    for (t, acc, n) in sweep_means(rows) {
        let _ = writeln!(s, "{t:>8}  {n:>5}  {:>13}", pct(acc));
    }
    s
}

const CLF_HEADER: &str = "epoch,train_loss,train_accuracy,val_loss,val_accuracy";
const GEN_HEADER: &str = "epoch,reconstruction,kl,total";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV of classifier curves. Floats use shortest round-trip formatting, so
/// [`parse_classifier_history`] recovers the exact values.
pub fn classifier_history_csv(history: &[EpochStats]) -> String {
    let mut s = format!("{CLF_HEADER}\n");
    for e in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            opt(e.val_loss),
            opt(e.val_accuracy)
        );
    }
    s
}

fn csv_rows<'a>(text: &'a str, header: &str, fields: usize) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Metrics(format!("expected CSV header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() == fields {
                Ok(cols)
            } else {
                Err(Error::Metrics(format!(
                    "line {}: expected {fields} fields, found {}",
                    i + 2,
                    cols.len()
                )))
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Metrics(format!("bad number {s:?} in CSV")))
}

fn opt_num(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}

pub fn parse_classifier_history(text: &str) -> Result<Vec<EpochStats>> {
    csv_rows(text, CLF_HEADER, 5)?
        .into_iter()
        .map(|c| {
            Ok(EpochStats {
                epoch: num(c[0])?,
                train_loss: num(c[1])?,
                train_accuracy: num(c[2])?,
                val_loss: opt_num(c[3])?,
                val_accuracy: opt_num(c[4])?,
            })
        })
        .collect()
}

/// CSV of per-epoch generator loss terms, epochs counted from 1.
pub fn generator_history_csv(history: &[LossTerms]) -> String {
    let mut s = format!("{GEN_HEADER}\n");
    for (i, t) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, t.l1, t.l2, t.total);
    }
    s
}

pub fn parse_generator_history(text: &str) -> Result<Vec<LossTerms>> {
    csv_rows(text, GEN_HEADER, 4)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if num::<usize>(c[0])? != i + 1 {
                return Err(Error::Metrics(format!("epoch column out of order at row {}", i + 1)));
            }
            Ok(LossTerms {
                l1: num(c[1])?,
                l2: num(c[2])?,
                total: num(c[3])?,
            })
        })
        .collect()
}

/// Tiles equally sized images row-major into `columns` columns separated by
/// one-pixel white lines. Pixels are clamped to `[0, 1]`.
pub fn sample_grid(images: &[GrayImage], columns: usize) -> Result<GrayImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::Metrics("sample grid needs at least one image".into()))?;
    let (h, w) = (first.height(), first.width());
    if images.iter().any(|i| i.height() != h || i.width() != w) {
        return Err(Error::Metrics("sample grid images differ in size".into()));
    }
    let cols = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let gh = rows * (h + 1) + 1;
    let gw = cols * (w + 1) + 1;
    let mut px = vec![1.0f32; gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                px[(oy + y) * gw + ox + x] = img.get(y, x).clamp(0.0, 1.0);
            }
        }
    }
    GrayImage::new(gh, gw, px)
}

/// Writes [`sample_grid`] of unit-range images as an 8-bit PGM.
pub fn write_sample_grid(path: &Path, images: &[GrayImage], columns: usize) -> Result<()> {
    write_file(path, &encode_pgm(&sample_grid(images, columns)?.scaled(255.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let a = GrayImage::filled(2, 3, 0.0).unwrap();
        let b = GrayImage::filled(2, 3, 0.5).unwrap();
        let g = sample_grid(&[a.clone(), b, a], 2).unwrap();
        assert_eq!((g.height(), g.width()), (7, 9));
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(1, 1), 0.0);
        assert_eq!(g.get(1, 5), 0.5);
        assert_eq!(g.get(4, 1), 0.0);
        assert_eq!(g.get(4, 5), 1.0);
        assert!(sample_grid(&[], 3).is_err());
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(parse_classifier_history("nope\n").is_err());
        assert!(parse_classifier_history(&format!("{CLF_HEADER}\n1,2\n")).is_err());
        assert!(parse_generator_history(&format!("{GEN_HEADER}\n2,1,1,2\n")).is_err());
        assert!(parse_generator_history(&format!("{GEN_HEADER}\n1,x,1,2\n")).is_err());
    }

    #[test]
    fn history_round_trip() {
        let h = vec![
            EpochStats {
                epoch: 1,
                train_loss: 0.1 + 0.2,
                train_accuracy: 1.0 / 3.0,
                val_loss: None,
                val_accuracy: Some(0.7),
            },
            EpochStats {
                epoch: 2,
                train_loss: 1e-300,
                train_accuracy: 0.0,
                val_loss: Some(12345.678901234567),
                val_accuracy: None,
            },
        ];
        assert_eq!(parse_classifier_history(&classifier_history_csv(&h)).unwrap(), h);
        let g = vec![LossTerms {
            l1: 2800.125,
            l2: 1.0 / 7.0,
            total: 2800.125 + 1.0 / 7.0,
        }];
        assert_eq!(parse_generator_history(&generator_history_csv(&g)).unwrap(), g);
    }
}
