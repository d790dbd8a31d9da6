//! Grayscale image decoding, resizing and intensity normalization.
//!
//! Raw images carry intensities on the 8-bit scale `[0, 255]`; after
//! [`minmax_normalize`] they live in `[0, 1]`. [`preprocess`] fixes the order:
//! resize first, then normalize.

use std::io::Cursor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    /// Format implied by a file extension, case-insensitively.
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "pgm" => Some(ImageFormat::Pgm),
            "png" => Some(ImageFormat::Png),
            _ => None,
        }
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Decode(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Decode(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if !pixels.iter().all(|p| p.is_finite()) {
            return Err(Error::Decode("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            })
    }

    /// Multiplies every pixel by `factor` (e.g. 255 to go from unit to 8-bit scale).
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| p * factor).collect(),
        }
    }
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<GrayImage> {
    match format {
        ImageFormat::Pgm => decode_pgm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

struct PgmHeader {
    binary: bool,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(Error::Decode("not a PGM file (expected P2 or P5)".into())),
    };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Decode("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode("malformed PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode("PGM header value out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from binary data
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("truncated PGM header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Decode(format!("empty PGM image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedDepth(format!("PGM maxval {maxval}")));
    }
    Ok(PgmHeader {
        binary,
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data_start: pos + 1,
    })
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_pgm_header(bytes)?;
    let n = h.width * h.height;
    let scale = 255.0 / h.maxval as f32;
    let data = &bytes[h.data_start.min(bytes.len())..];
    let raw: Vec<u32> = if h.binary {
        let wide = h.maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < need {
            return Err(Error::Decode(format!(
                "truncated PGM data: need {need} bytes, have {}",
                data.len()
            )));
        }
        if wide {
            data[..need]
                .chunks_exact(2)
                .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
                .collect()
        } else {
            data[..n].iter().map(|&b| u32::from(b)).collect()
        }
    } else {
        let text = std::str::from_utf8(data)
            .map_err(|_| Error::Decode("non-ASCII data in plain PGM".into()))?;
        let values: Vec<u32> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Decode("bad sample in plain PGM".into()))?;
        if values.len() < n {
            return Err(Error::Decode(format!(
                "truncated PGM data: need {n} samples, have {}",
                values.len()
            )));
        }
        values
    };
    if let Some(v) = raw.iter().find(|&&v| v > h.maxval) {
        return Err(Error::Decode(format!("sample {v} exceeds maxval {}", h.maxval)));
    }
    let pixels = if h.maxval == 255 {
        raw.into_iter().map(|v| v as f32).collect()
    } else {
        raw.into_iter().map(|v| v as f32 * scale).collect()
    };
    GrayImage::new(h.height, h.width, pixels)
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let err = |e: png::DecodingError| Error::Decode(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Decode("png: palette was not expanded".into()))
        }
    };
    // alpha is dropped; color channels are averaged
    let color = if channels >= 3 { 3 } else { 1 };
    let sample = |row: &[u8], i: usize| -> f32 {
        match info.bit_depth {
            png::BitDepth::Eight => f32::from(row[i]),
            png::BitDepth::Sixteen => {
                f32::from(u16::from_be_bytes([row[2 * i], row[2 * i + 1]])) * 255.0 / 65535.0
            }
            _ => f32::NAN,
        }
    };
    if !matches!(info.bit_depth, png::BitDepth::Eight | png::BitDepth::Sixteen) {
        return Err(Error::UnsupportedDepth(format!("png {:?}", info.bit_depth)));
    }
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let base = x * channels;
            let sum: f32 = (0..color).map(|c| sample(row, base + c)).sum();
            pixels.push(sum / color as f32);
        }
    }
    GrayImage::new(h, w, pixels)
}

/// Binary 8-bit PGM. Pixels are rounded and clamped to `[0, 255]`.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8));
    out
}

/// 8-bit grayscale PNG. Pixels are rounded and clamped to `[0, 255]`.
pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Decode(format!("png encode: {e}")))?;
        let data: Vec<u8> = img
            .pixels
            .iter()
            .map(|&p| p.round().clamp(0.0, 255.0) as u8)
            .collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Decode(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel-centred sample positions and
/// edge clamping. Outputs stay within the input's intensity range.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, img.height);
    let xs = taps(out_w, img.width);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
            let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
            pixels.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    GrayImage::new(out_h, out_w, pixels)
}

/// Per-image `(x - min) / (max - min)`; constant images become all zeros.
pub fn minmax_normalize(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img.min_max();
    let range = hi - lo;
    let pixels = if range > 0.0 {
        img.pixels
            .iter()
            .map(|&p| ((p - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; img.pixels.len()]
    };
    GrayImage {
        height: img.height,
        width: img.width,
        pixels,
    }
}

/// Resize to `size x size`, then min-max normalize.
pub fn preprocess(img: &GrayImage, size: usize) -> Result<GrayImage> {
    Ok(minmax_normalize(&resize_bilinear(img, size, size)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, px: &[f32]) -> GrayImage {
        GrayImage::new(h, w, px.to_vec()).unwrap()
    }

    #[test]
    fn ascii_pgm() {
        let g = decode_image(b"P2 2 2 255\n0 64 128 255\n", ImageFormat::Pgm).unwrap();
        assert_eq!((g.height(), g.width()), (2, 2));
        assert_eq!(g.pixels(), &[0.0, 64.0, 128.0, 255.0]);
    }

    #[test]
    fn pgm_comments_and_maxval_rescale() {
        let g = decode_image(b"P2\n# made by hand\n2 1\n# depth\n15\n0 15\n", ImageFormat::Pgm)
            .unwrap();
        assert_eq!(g.pixels(), &[0.0, 255.0]);
    }

    #[test]
    fn sixteen_bit_binary_pgm() {
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend([0x00, 0x00, 0xff, 0xff]);
        let g = decode_image(&bytes, ImageFormat::Pgm).unwrap();
        assert_eq!(g.pixels(), &[0.0, 255.0]);
    }

    #[test]
    fn truncated_pgm_is_an_error() {
        assert!(decode_image(b"P5 4 4 255\n\x01\x02", ImageFormat::Pgm).is_err());
        assert!(decode_image(b"P2 2 2 255\n0 1 2", ImageFormat::Pgm).is_err());
        assert!(decode_image(b"P5 4", ImageFormat::Pgm).is_err());
        assert!(decode_image(b"", ImageFormat::Pgm).is_err());
        assert!(decode_image(b"P6 1 1 255\n\0\0\0", ImageFormat::Pgm).is_err());
    }

    #[test]
    fn bad_depth() {
        assert!(matches!(
            decode_image(b"P2 1 1 70000\n1\n", ImageFormat::Pgm),
            Err(Error::UnsupportedDepth(_))
        ));
        assert!(matches!(
            decode_image(b"P2 1 1 0\n0\n", ImageFormat::Pgm),
            Err(Error::UnsupportedDepth(_))
        ));
    }

    #[test]
    fn pgm_round_trip() {
        let g = img(2, 3, &[0.0, 1.0, 2.0, 127.0, 254.0, 255.0]);
        assert_eq!(decode_image(&encode_pgm(&g), ImageFormat::Pgm).unwrap(), g);
    }

    #[test]
    fn png_round_trip_and_color_average() {
        let g = img(2, 2, &[0.0, 10.0, 200.0, 255.0]);
        let bytes = encode_png(&g).unwrap();
        assert_eq!(decode_image(&bytes, ImageFormat::Png).unwrap(), g);

        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[30, 60, 90]).unwrap();
        }
        let c = decode_image(&out, ImageFormat::Png).unwrap();
        assert_eq!(c.pixels(), &[60.0]);
        assert!(decode_image(&out[..out.len() / 2], ImageFormat::Png).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let g = img(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resize_bilinear(&g, 2, 2).unwrap(), g);
        let c = GrayImage::filled(5, 7, 42.0).unwrap();
        let r = resize_bilinear(&c, 13, 3).unwrap();
        assert!(r.pixels().iter().all(|&p| (p - 42.0).abs() < 1e-4));
        assert!(resize_bilinear(&c, 0, 3).is_err());
    }

    #[test]
    fn resize_ramp_two_by_four() {
        let g = img(2, 2, &[0.0, 255.0, 0.0, 255.0]);
        let r = resize_bilinear(&g, 2, 4).unwrap();
        // sample centres map to source x = -0.25, 0.25, 0.75, 1.25 (clamped)
        let expect = [0.0, 63.75, 191.25, 255.0];
        for row in r.pixels().chunks(4) {
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() < 1e-4);
            }
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn normalize_examples() {
        let n = minmax_normalize(&img(1, 2, &[0.0, 255.0]));
        assert_eq!(n.pixels(), &[0.0, 1.0]);
        let n = minmax_normalize(&img(1, 3, &[10.0, 20.0, 30.0]));
        assert_eq!(n.pixels(), &[0.0, 0.5, 1.0]);
        let n = minmax_normalize(&GrayImage::filled(3, 3, 37.0).unwrap());
        assert!(n.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn preprocess_constant_is_zero() {
        let c = GrayImage::filled(10, 6, 99.0).unwrap();
        let p = preprocess(&c, 4).unwrap();
        assert_eq!((p.height(), p.width()), (4, 4));
        assert!(p.pixels().iter().all(|&v| v == 0.0));
    }
}
