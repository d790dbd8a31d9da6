use synthbalance_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Stacks square `size x size` images into a `[n, 1, size, size]` tensor.
pub fn stack_images<T: Real>(images: &[&GrayImage], size: usize) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot batch zero images".into()));
    }
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.height() != size || img.width() != size {
            return Err(Error::Dataset(format!(
                "expected {size}x{size} image, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.pixels().iter().map(|&p| T::from_f64(f64::from(p))));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, size, size], data)?)
}

/// Splits a `[n, 1, h, w]` tensor back into images.
pub fn unstack_images<T: Real>(t: &Tensor<T>) -> Result<Vec<GrayImage>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Dataset(format!(
            "expected a [n, 1, h, w] tensor, got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    t.data()
        .chunks(h * w)
        .map(|c| GrayImage::new(h, w, c.iter().map(|v| v.to_f64() as f32).collect()))
        .collect()
}
