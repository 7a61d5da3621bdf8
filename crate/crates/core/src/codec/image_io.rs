//! 8-bit RGB images: binary PPM (P6) by hand, PNG through `image`.

use std::path::Path;

use crate::error::{ClicError, Result};
use crate::tensor::{FeatureGrid, Real};

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ClicError::Image(format!("empty image {width}×{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(ClicError::Image(format!(
                "{} bytes for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    /// Planar `[3, H, W]` grid with values in `[0, 255]`.
    pub fn to_grid<T: Real>(&self) -> FeatureGrid<T> {
        FeatureGrid::from_fn(3, self.height, self.width, |c, y, x| {
            T::of(self.data[(y * self.width + x) * 3 + c] as f64)
        })
    }

    /// Inverse of [`RgbImage::to_grid`] for a `[3, H, W]` grid in `[0, 1]`:
    /// scales by 255, rounds and clamps.
    pub fn from_unit_grid<T: Real>(grid: &FeatureGrid<T>) -> Result<Self> {
        let (c, h, w) = grid.dims();
        if c != 3 {
            return Err(ClicError::shape("rgb grid", 3, c));
        }
        let mut data = vec![0u8; h * w * 3];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = grid.at(ch, y, x).f64() * 255.0;
                    let v = if v.is_nan() {
                        0.0
                    } else {
                        v.round().clamp(0.0, 255.0)
                    };
                    data[(y * w + x) * 3 + ch] = v as u8;
                }
            }
        }
        RgbImage::new(w, h, data)
    }
}

/// PSNR in dB between two equally sized images (infinite when identical).
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(ClicError::shape(
            "psnr",
            format!("{}×{}", a.width, a.height),
            format!("{}×{}", b.width, b.height),
        ));
    }
    let se: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let mse = se / a.data.len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ClicError::Image("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ClicError::Image(format!("bad PPM {what}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(ClicError::Image("not a binary PPM (P6)".into()));
    }
    let width = ppm_number(bytes, &mut pos, "width")?;
    let height = ppm_number(bytes, &mut pos, "height")?;
    let maxval = ppm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ClicError::Image(format!("unsupported PPM maxval {maxval}")));
    }
    // exactly one whitespace byte before the raster
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| ClicError::Image("PPM dimensions overflow".into()))?;
    let raster = pos
        .checked_add(need)
        .and_then(|end| bytes.get(pos..end))
        .ok_or_else(|| ClicError::Image(format!("PPM raster needs {need} bytes")))?;
    RgbImage::new(width, height, raster.to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ClicError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| ClicError::Image("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ClicError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Reads a PPM or PNG file, chosen by content.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

/// Writes PNG for a `.png` extension and PPM otherwise.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        encode_png(img)?
    } else {
        encode_ppm(img)
    };
    std::fs::write(path, bytes)?;
    Ok(())
}
