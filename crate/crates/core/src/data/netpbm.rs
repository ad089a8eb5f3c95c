//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::path::Path;

use crate::error::{Result, SirError};
use crate::tensor::Tensor;

fn parse_err(offset: usize, detail: impl Into<String>) -> SirError {
    SirError::ImageParse {
        offset,
        detail: detail.into(),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Parses a decimal field, returning it with its starting offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map(|v| (v, start))
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a P5/P6 byte stream into a `1×c×h×w` tensor scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_err(0, "missing P5/P6 magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => return Err(parse_err(1, format!("unsupported format P{}", other as char))),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let (width, _) = r.number("width")?;
    let (height, _) = r.number("height")?;
    let (maxval, maxval_at) = r.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_at, "zero image extent"));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(parse_err(r.pos, "expected a single whitespace byte after maxval")),
    }
    let start = r.pos;
    let need = width * height * channels;
    let available = bytes.len() - start;
    if available < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {available}"),
        ));
    }
    let payload = &bytes[start..start + need];
    let plane = width * height;
    let mut data = vec![0.0; need];
    for (i, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = f64::from(b) / 255.0;
        }
    }
    Tensor::new([1, channels, height, width], data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `1×1×h×w` (P5) or `1×3×h×w` (P6) tensor, values clamped to `[0, 1]`.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    let magic = match (n, c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => {
            return Err(SirError::shape(
                "encode_image",
                format!("expected 1×1×h×w or 1×3×h×w, got {:?}", image.shape()),
            ))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(plane * c);
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

/// Encodes an interleaved 8-bit RGB raster as P6.
pub fn encode_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(SirError::shape(
            "encode_rgb8",
            format!("{}×{} raster needs {} bytes, got {}", width, height, width * height * 3, rgb.len()),
        ));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| SirError::io(path, e))?;
    decode(&bytes)
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode(image)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| SirError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| SirError::io(path, e))
}
