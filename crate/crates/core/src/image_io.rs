//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Images load as 1×C×H×W tensors on the 0–255 scale. Saving clamps to
//! [0,255] and rounds half away from zero.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        digits.parse().map_err(|_| format_err(format!("missing or invalid {what} in header")))
    }
}

/// Decode a P5 or P6 byte stream.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err("not a binary PGM/PPM file (expected P5 or P6)")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(format!("empty image {width}×{height}")));
    }
    if maxval != 255 {
        return Err(Error::Unsupported(format!("maxval {maxval}; only 255 is supported")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("header must end with a single whitespace byte"));
    }
    let payload = &bytes[h.pos + 1..];
    let n = width * height * channels;
    if payload.len() != n {
        return Err(format_err(format!("expected {n} payload bytes, found {}", payload.len())));
    }
    // interleaved RGB on disk, planar in memory
    let hw = width * height;
    let mut data = vec![0.0f32; n];
    for (i, &b) in payload.iter().enumerate() {
        data[(i % channels) * hw + i / channels] = b as f32;
    }
    Tensor::new(&[1, channels, height, width], data)
}

fn to_byte<T: Real>(v: T) -> u8 {
    let v = v.as_f64();
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, 255.0).round() as u8
}

/// Encode a 1×1×H×W or 1×3×H×W tensor.
pub fn encode<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4()?;
    let magic = match (n, c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(shape_err!("can only save one 1- or 3-channel image, got {n}×{c}")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    let d = image.data();
    out.reserve(c * hw);
    for i in 0..hw {
        for ch in 0..c {
            out.push(to_byte(d[ch * hw + i]));
        }
    }
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}

pub fn save_image<T: Real>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

/// Whether a path has a `.pgm` or `.ppm` extension.
pub fn is_netpbm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
}
