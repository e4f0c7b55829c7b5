//! Binary PPM (P6, 8-bit) images; samples map to `[0, 1]` as `v / maxval`.

use std::path::Path;

use crate::error::{HitError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn format_err(msg: impl Into<String>) -> HitError {
    HitError::Format(msg.into())
}

/// Parses a P6 image with `maxval <= 255`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut at = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(format_err("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| format_err("bad header"))?);
    }
    if fields[0] != "P6" {
        return Err(format_err(format!("unsupported PPM magic {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad header field {s}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(format_err(format!("unsupported PPM geometry {w}x{h} maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    at += 1;
    let n = w * h * 3;
    let raster = bytes
        .get(at..at + n)
        .ok_or_else(|| format_err("truncated PPM raster"))?;
    let scale = T::c(maxval as f64);
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| T::c(b as f64) / scale).collect())
}

/// Quantizes to 8 bits: `round(clamp(v, 0, 1) * 255)`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(format_err(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Reads PPM, or PNG when built with the `png` feature.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        #[cfg(feature = "png")]
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| format_err(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            Tensor::new(
                vec![h as usize, w as usize, 3],
                img.into_raw().into_iter().map(|b| T::c(b as f64 / 255.0)).collect(),
            )
        }
        _ => read_ppm(path),
    }
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm") | Some("png")
    )
}
