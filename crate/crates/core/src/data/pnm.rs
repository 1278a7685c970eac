//! Binary portable pixmaps (P6) and graymaps (P5).
//!
//! Colour images are `[3, H, W]` tensors with values in `[0, 1)`. A sample
//! `q` of a map with maximum value `M` decodes to `q / (M + 1)`; writing uses
//! `M = 65535` and `q = floor(v * 65536)`, so any value of the form
//! `q / 65536` survives a round trip exactly.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEVELS: f64 = 65536.0;

/// Snaps a value in `[0, 1)` to the nearest lower 16-bit level.
pub fn quantize(v: f64) -> f64 {
    to_u16(v) as f64 / LEVELS
}

fn to_u16(v: f64) -> u16 {
    (v * LEVELS).floor().clamp(0.0, 65535.0) as u16
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape {
            op: "encode_ppm",
            detail: format!("expected [3, H, W], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n65535\n").into_bytes();
    out.reserve(h * w * 6);
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.extend_from_slice(&to_u16(d[c * h * w + p]).to_be_bytes());
        }
    }
    Ok(out)
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad header number")?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing separator after header".into()),
    }
    if fields[0] == 0 || fields[1] == 0 || fields[2] == 0 || fields[2] > 65535 {
        return Err(format!("unsupported header values {fields:?}"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        offset: pos,
    })
}

fn read_samples(bytes: &[u8], header: &Header, count: usize, path: &str) -> Result<Vec<f64>> {
    let wide = header.maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    let body = &bytes[header.offset..];
    if body.len() != need {
        return Err(Error::Integrity(format!(
            "{path}: expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    let scale = (header.maxval + 1) as f64;
    Ok(if wide {
        body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale).collect()
    } else {
        body.iter().map(|&b| b as f64 / scale).collect()
    })
}

pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<Tensor> {
    let header = parse_header(bytes).map_err(|e| Error::Integrity(format!("{path}: {e}")))?;
    if &header.magic != b"P6" {
        return Err(Error::Integrity(format!("{path}: not a binary pixmap")));
    }
    let (h, w) = (header.height, header.width);
    let interleaved = read_samples(bytes, &header, h * w * 3, path)?;
    let mut planar = vec![0.0; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            planar[c * h * w + p] = interleaved[p * 3 + c];
        }
    }
    Tensor::new(&[3, h, w], planar)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

/// 8-bit graymap of an `[H, W]` plane, linearly rescaled so its minimum maps
/// to 0 and its maximum to 255 (a constant plane maps to 0).
pub fn encode_pgm_rescaled(plane: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if plane.len() != height * width || plane.is_empty() {
        return Err(Error::Shape {
            op: "encode_pgm",
            detail: format!("{} values for a {height}x{width} plane", plane.len()),
        });
    }
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm_rescaled(path: &Path, plane: &[f64], height: usize, width: usize) -> Result<()> {
    let bytes = encode_pgm_rescaled(plane, height, width)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a P5 graymap to `(height, width, raw sample values)`.
pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<u32>)> {
    let header = parse_header(bytes).map_err(|e| Error::Integrity(format!("{path}: {e}")))?;
    if &header.magic != b"P5" {
        return Err(Error::Integrity(format!("{path}: not a binary graymap")));
    }
    let count = header.height * header.width;
    let scale = (header.maxval + 1) as f64;
    let raw = read_samples(bytes, &header, count, path)?
        .into_iter()
        .map(|v| (v * scale).round() as u32)
        .collect();
    Ok((header.height, header.width, raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_levels() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| quantize((i as f64 * 0.137) % 1.0)).collect();
        let img = Tensor::new(&[3, 4, 5], data).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap(), "mem").unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([0, 128, 255]);
        let img = decode_ppm(&bytes, "mem").unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 255.0 / 256.0]);
    }

    #[test]
    fn truncated_ppm_is_an_integrity_error() {
        let img = Tensor::full(&[3, 2, 2], 0.5);
        let mut bytes = encode_ppm(&img).unwrap();
        bytes.pop();
        assert!(matches!(decode_ppm(&bytes, "x.ppm"), Err(Error::Integrity(_))));
    }

    #[test]
    fn pgm_rescales_to_full_range() {
        let bytes = encode_pgm_rescaled(&[1.0, 1.25, 1.5, 2.0], 2, 2).unwrap();
        let (h, w, raw) = decode_pgm(&bytes, "mem").unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(raw, vec![0, 64, 128, 255]);
    }
}
