//! Binary PPM (P6) images and PGM (P5) label maps.
//!
//! Only maxval 255 images and maxval ≤ 255 label maps are accepted. Header
//! comments (`#` to end of line) are skipped.

use std::fs;
use std::path::Path;

use linattn_core::{Error, Result, Scalar, Tensor};

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    /// Offset of the first payload byte.
    data_start: usize,
}

fn data_err(offset: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("byte {offset}: {msg}"))
}

fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                    pos += 1;
                }
            }
            _ => return pos,
        }
    }
}

fn read_uint(bytes: &[u8], pos: usize) -> Result<(usize, usize)> {
    let start = skip_space(bytes, pos);
    let end = start + bytes[start.min(bytes.len())..].iter().take_while(|b| b.is_ascii_digit()).count();
    if end == start {
        return Err(data_err(start, "expected an unsigned integer in header"));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let v = text.parse().map_err(|_| data_err(start, format!("header value {text} is out of range")))?;
    Ok((v, end))
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(data_err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let (width, pos) = read_uint(bytes, 2)?;
    let (height, pos) = read_uint(bytes, pos)?;
    let (maxval, pos) = read_uint(bytes, pos)?;
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(data_err(pos, "expected a single whitespace byte after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(data_err(2, format!("image size {width}×{height} is empty")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(data_err(
            bytes.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(data_err(h.data_start + need, format!("{} trailing bytes", have - need)));
    }
    Ok(&bytes[h.data_start..])
}

/// Decodes a P6 image into a `3×H×W` tensor with values `v/255`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes, b"P6")?;
    if h.maxval != 255 {
        return Err(data_err(2, format!("maxval must be 255, got {}", h.maxval)));
    }
    let data = payload(bytes, &h, 3)?;
    let plane = h.width * h.height;
    Tensor::from_vec(
        &[3, h.height, h.width],
        (0..3 * plane).map(|i| T::of(data[(i % plane) * 3 + i / plane] as f64 / 255.0)).collect(),
    )
}

/// Decodes a P5 label map; each gray value is a class index.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<usize>)> {
    let h = parse_header(bytes, b"P5")?;
    if h.maxval == 0 || h.maxval > 255 {
        return Err(data_err(2, format!("maxval must be in 1..=255, got {}", h.maxval)));
    }
    let data = payload(bytes, &h, 1)?;
    if let Some(i) = data.iter().position(|&v| v as usize > h.maxval) {
        return Err(data_err(h.data_start + i, format!("value {} exceeds maxval {}", data[i], h.maxval)));
    }
    Ok((h.height, h.width, data.iter().map(|&v| v as usize).collect()))
}

/// Encodes a `3×H×W` tensor in `[0,1]` as P6, rounding to the nearest level.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension {
            op: "encode_ppm",
            detail: format!("expected 3×H×W, got {s:?}"),
        });
    }
    let (hgt, wid) = (s[1], s[2]);
    let plane = hgt * wid;
    let mut out = format!("P6\n{wid} {hgt}\n255\n").into_bytes();
    let data = image.data();
    for p in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + p].as_f64();
            if !v.is_finite() {
                return Err(Error::Numeric {
                    op: "encode_ppm",
                    detail: format!("non-finite pixel {v}"),
                });
            }
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn encode_pgm(height: usize, width: usize, labels: &[usize]) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::Dimension {
            op: "encode_pgm",
            detail: format!("{} labels for a {height}×{width} map", labels.len()),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Data(format!("label {l} does not fit in one byte")));
    }
    let maxval = labels.iter().copied().max().unwrap_or(0).max(1);
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend(labels.iter().map(|&l| l as u8));
    Ok(out)
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    decode_pgm(&fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn save_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn save_labels(path: &Path, height: usize, width: usize, labels: &[usize]) -> Result<()> {
    fs::write(path, encode_pgm(height, width, labels)?)?;
    Ok(())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    }
}
