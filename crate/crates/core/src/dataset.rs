//! Labelled image collections and the on-disk `<root>/<class>/*.{pgm,png}` layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{decode_image, encode_pgm, GrayImage, ImageFormat};

/// Where a sample came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Real { source: String },
    Synthetic { class: usize, index: usize },
}

impl Origin {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, Origin::Synthetic { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageDataset {
    items: Vec<Sample>,
    class_names: Vec<String>,
}

impl ImageDataset {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        let mut seen = class_names.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != class_names.len() {
            return Err(Error::Dataset(format!(
                "class names must be unique: {class_names:?}"
            )));
        }
        Ok(Self {
            items: Vec::new(),
            class_names,
        })
    }

    pub fn from_samples(class_names: Vec<String>, items: Vec<Sample>) -> Result<Self> {
        let mut ds = Self::new(class_names)?;
        for s in items {
            ds.push(s)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.label >= self.class_names.len() {
            return Err(Error::Dataset(format!(
                "label {} out of range for {} classes",
                sample.label,
                self.class_names.len()
            )));
        }
        self.items.push(sample);
        Ok(())
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|s| s.label).collect()
    }

    pub fn images(&self) -> Vec<&GrayImage> {
        self.items.iter().map(|s| &s.image).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_names.len()];
        for s in &self.items {
            c[s.label] += 1;
        }
        c
    }

    /// Indices of the samples with `label`, in dataset order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].label == label)
            .collect()
    }

    /// A dataset with the same classes holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn map_images<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&GrayImage) -> Result<GrayImage>,
    {
        let items = self
            .items
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: f(&s.image)?,
                    label: s.label,
                    origin: s.origin.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            items,
            class_names: self.class_names.clone(),
        })
    }

    /// `(height, width) -> count` over all images.
    pub fn resolution_histogram(&self) -> BTreeMap<(usize, usize), usize> {
        let mut h = BTreeMap::new();
        for s in &self.items {
            *h.entry((s.image.height(), s.image.width())).or_insert(0) += 1;
        }
        h
    }
}

/// SHA-256 over one image's extents and pixel bits.
pub fn image_hash(img: &GrayImage) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    for p in img.pixels() {
        h.update(p.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Order-sensitive digest of a dataset's images and labels, as lowercase hex.
pub fn dataset_hash(ds: &ImageDataset) -> String {
    let mut h = Sha256::new();
    for name in ds.class_names() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
    }
    for s in ds.items() {
        h.update((s.label as u64).to_le_bytes());
        h.update(image_hash(&s.image));
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A file that could not be decoded during [`load_dataset_dir`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub dataset: ImageDataset,
    pub warnings: Vec<LoadWarning>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn image_format(path: &Path) -> Option<ImageFormat> {
    path.extension()
        .and_then(|e| e.to_str())
        .and_then(ImageFormat::from_extension)
}

/// Reads `<root>/<class>/*.{pgm,png}`. Classes are the subdirectories in
/// lexicographic order; files within a class are read in name order. Files
/// that fail to decode become warnings. A missing or empty root, or a class
/// with no readable image, is an error naming the offending path.
pub fn load_dataset_dir(root: &Path) -> Result<LoadedDataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let names = class_dirs
        .iter()
        .map(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(str::to_owned)
                .ok_or_else(|| Error::Dataset(format!("non UTF-8 class name {}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = ImageDataset::new(names)?;
    let mut warnings = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut loaded = 0;
        for path in sorted_entries(dir)? {
            let Some(format) = image_format(&path) else {
                continue;
            };
            if !path.is_file() {
                continue;
            }
            let decoded = fs::read(&path)
                .map_err(|e| Error::io(&path, e))
                .and_then(|bytes| decode_image(&bytes, format));
            match decoded {
                Ok(image) => {
                    ds.push(Sample {
                        image,
                        label,
                        origin: Origin::Real {
                            source: path.display().to_string(),
                        },
                    })?;
                    loaded += 1;
                }
                Err(e) => warnings.push(LoadWarning {
                    path: path.clone(),
                    message: e.to_string(),
                }),
            }
        }
        if loaded == 0 {
            return Err(Error::Dataset(format!(
                "class directory {} holds no readable images",
                dir.display()
            )));
        }
    }
    Ok(LoadedDataset {
        dataset: ds,
        warnings,
    })
}

/// Writes every sample as an 8-bit PGM under `<root>/<class>/`. Images are
/// scaled by `scale` before quantization (255 for unit-range images). Returns
/// the written paths in dataset order.
pub fn write_dataset_dir(ds: &ImageDataset, root: &Path, scale: f32) -> Result<Vec<PathBuf>> {
    for name in ds.class_names() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut per_class = vec![0usize; ds.class_count()];
    let mut paths = Vec::with_capacity(ds.len());
    for s in ds.items() {
        let n = per_class[s.label];
        per_class[s.label] += 1;
        let stem = if s.origin.is_synthetic() { "syn" } else { "img" };
        let path = root
            .join(&ds.class_names()[s.label])
            .join(format!("{stem}_{n:05}.pgm"));
        fs::write(&path, encode_pgm(&s.image.scaled(scale))).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
