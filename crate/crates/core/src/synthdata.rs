//! Procedural stand-in for a brain MRI detection set.
//!
//! Every image is a bright disk ("brain") on a dark background with additive
//! Gaussian noise. Positive images add one to three brighter ellipses
//! ("tumors") of random count, shape, orientation and position, always fully
//! inside the disk. [`oracle_label`] recovers the class from pixels alone.

use serde::{Deserialize, Serialize};
use synthbalance_tensor::Rng;

use crate::dataset::{ImageDataset, Origin, Sample};
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

pub fn class_names() -> Vec<String> {
    vec!["negative".into(), "positive".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub image_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    /// Disk radius as a fraction of half the image size.
    pub disk_radius_fraction: f64,
    pub disk_level: f64,
    /// Semi-axis range of each ellipse, as fractions of the image size.
    pub tumor_axis_range: [f64; 2],
    /// Ellipse brightness above the disk.
    pub delta: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            noise_sigma: 0.01,
            disk_radius_fraction: 0.7,
            disk_level: 0.3,
            tumor_axis_range: [0.06, 0.14],
            delta: 0.6,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("blob spec: {m}")));
        if self.image_size < 8 {
            return bad(format!("image_size {} below 8", self.image_size));
        }
        if !(0.0..=0.1).contains(&self.noise_sigma) {
            return bad(format!("noise_sigma {} outside [0, 0.1]", self.noise_sigma));
        }
        if !(0.3..=0.6).contains(&self.delta) {
            return bad(format!("delta {} outside [0.3, 0.6]", self.delta));
        }
        if self.delta / 2.0 < 3.0 * self.noise_sigma {
            return bad("delta / 2 must be at least 3 noise_sigma".into());
        }
        if !(self.disk_level > 0.0 && self.disk_level + self.delta <= 1.0) {
            return bad(format!(
                "disk_level {} must be positive with disk_level + delta <= 1",
                self.disk_level
            ));
        }
        if !(self.disk_radius_fraction > 0.0 && self.disk_radius_fraction <= 1.0) {
            return bad(format!(
                "disk_radius_fraction {} outside (0, 1]",
                self.disk_radius_fraction
            ));
        }
        let [lo, hi] = self.tumor_axis_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("tumor_axis_range [{lo}, {hi}] is not increasing"));
        }
        if self.min_axis() < 1.0 {
            return bad("smallest tumor axis is below one pixel".into());
        }
        if self.max_axis() + 1.0 >= self.disk_radius() {
            return bad("largest tumor does not fit inside the disk".into());
        }
        Ok(())
    }

    fn size(&self) -> f64 {
        self.image_size as f64
    }

    pub fn disk_radius(&self) -> f64 {
        self.disk_radius_fraction * self.size() / 2.0
    }

    pub fn min_axis(&self) -> f64 {
        self.tumor_axis_range[0] * self.size()
    }

    pub fn max_axis(&self) -> f64 {
        self.tumor_axis_range[1] * self.size()
    }

    /// Area of the smallest possible ellipse, in pixels.
    pub fn min_tumor_area(&self) -> f64 {
        std::f64::consts::PI * self.min_axis() * self.min_axis()
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn random_ellipse(spec: &BlobSpec, rng: &mut Rng) -> Ellipse {
    let (lo, hi) = (spec.min_axis(), spec.max_axis());
    let a = rng.uniform_range(lo, hi);
    let b = rng.uniform_range(lo, hi);
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    // the bounding circle of radius max(a, b) stays inside the disk
    let reach = spec.disk_radius() - a.max(b) - 1.0;
    let r = reach * rng.uniform().sqrt();
    let phi = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let c = spec.size() / 2.0;
    Ellipse {
        cx: c + r * phi.cos(),
        cy: c + r * phi.sin(),
        a,
        b,
        cos: theta.cos(),
        sin: theta.sin(),
    }
}

fn in_disk(spec: &BlobSpec, x: f64, y: f64) -> bool {
    let c = spec.size() / 2.0;
    (x - c).powi(2) + (y - c).powi(2) <= spec.disk_radius().powi(2)
}

/// One image with pixel values in `[0, 1]`.
pub fn render_blob(spec: &BlobSpec, positive: bool, rng: &mut Rng) -> Result<GrayImage> {
    spec.validate()?;
    let tumors: Vec<Ellipse> = if positive {
        let count = 1 + rng.below(3);
        (0..count).map(|_| random_ellipse(spec, rng)).collect()
    } else {
        Vec::new()
    };
    let s = spec.image_size;
    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.0;
            if in_disk(spec, px, py) {
                v = spec.disk_level;
            }
            if tumors.iter().any(|t| t.contains(px, py)) {
                v = spec.disk_level + spec.delta;
            }
            v += spec.noise_sigma * rng.normal();
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(s, s, pixels)
}

/// `n_negative` negatives followed by `n_positive` positives, each drawn
/// from its own seed stream.
pub fn generate_blob_dataset(
    n_positive: usize,
    n_negative: usize,
    spec: &BlobSpec,
) -> Result<ImageDataset> {
    spec.validate()?;
    let mut ds = ImageDataset::new(class_names())?;
    for (label, n) in [(NEGATIVE, n_negative), (POSITIVE, n_positive)] {
        let name = &class_names()[label];
        for i in 0..n {
            let mut rng = Rng::derive(spec.seed, &format!("blob/{name}/{i}"));
            ds.push(Sample {
                image: render_blob(spec, label == POSITIVE, &mut rng)?,
                label,
                origin: Origin::Real {
                    source: format!("blob:{name}:{i}"),
                },
            })?;
        }
    }
    Ok(ds)
}

/// Positive iff more than half the smallest tumor area lies above
/// `median(disk) + delta / 2`. The disk geometry is taken from `spec`,
/// rescaled to the image's extents.
pub fn oracle_label(img: &GrayImage, spec: &BlobSpec) -> usize {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let scale = (h * w).sqrt() / spec.size();
    let (cx, cy) = (w / 2.0, h / 2.0);
    let r2 = (spec.disk_radius() * scale).powi(2);
    let mut disk = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - cx).powi(2) + (py - cy).powi(2) <= r2 {
                disk.push(img.get(y, x));
            }
        }
    }
    if disk.is_empty() {
        return NEGATIVE;
    }
    disk.sort_by(f32::total_cmp);
    let median = f64::from(disk[disk.len() / 2]);
    let threshold = median + spec.delta / 2.0;
    let bright = disk.iter().filter(|&&p| f64::from(p) > threshold).count();
    let min_area = 0.5 * spec.min_tumor_area() * scale * scale;
    if bright as f64 > min_area {
        POSITIVE
    } else {
        NEGATIVE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::minmax_normalize;

    #[test]
    fn empty_request() {
        let ds = generate_blob_dataset(0, 0, &BlobSpec::default()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.class_count(), 2);
    }

    #[test]
    fn spec_validation() {
        let mut s = BlobSpec {
            delta: 0.65,
            ..BlobSpec::default()
        };
        assert!(s.validate().is_err());
        s.delta = 0.3;
        s.disk_level = 0.4;
        s.noise_sigma = 0.06;
        assert!(s.validate().is_err());
        s.noise_sigma = 0.04;
        assert!(s.validate().is_ok());
        s.tumor_axis_range = [0.2, 0.4];
        assert!(s.validate().is_err());
    }

    #[test]
    fn deterministic_and_in_range() {
        let spec = BlobSpec {
            seed: 5,
            ..BlobSpec::default()
        };
        let a = generate_blob_dataset(10, 10, &spec).unwrap();
        let b = generate_blob_dataset(10, 10, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts(), vec![10, 10]);
        for s in a.items() {
            assert!(s.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn zeros_negative_max_ellipse_positive() {
        let spec = BlobSpec {
            delta: 0.6,
            noise_sigma: 0.0,
            ..BlobSpec::default()
        };
        assert_eq!(oracle_label(&GrayImage::filled(64, 64, 0.0).unwrap(), &spec), NEGATIVE);
        let s = spec.image_size;
        let e = Ellipse {
            cx: 32.0,
            cy: 32.0,
            a: spec.max_axis(),
            b: spec.max_axis(),
            cos: 1.0,
            sin: 0.0,
        };
        let mut px = Vec::new();
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let v = if e.contains(fx, fy) {
                    1.0
                } else if in_disk(&spec, fx, fy) {
                    0.4
                } else {
                    0.0
                };
                px.push(v);
            }
        }
        let img = GrayImage::new(s, s, px).unwrap();
        assert_eq!(oracle_label(&img, &spec), POSITIVE);
    }

    #[test]
    fn oracle_matches_ground_truth() {
        let spec = BlobSpec {
            seed: 11,
            ..BlobSpec::default()
        };
        let ds = generate_blob_dataset(100, 100, &spec).unwrap();
        for s in ds.items() {
            assert_eq!(oracle_label(&minmax_normalize(&s.image), &spec), s.label);
        }
    }
}
