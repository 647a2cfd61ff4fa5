//! Portable pixmap codec: P2/P5 (gray) and P3/P6 (RGB), any maxval up to 65535.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn unreadable(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'2' | b'3' | b'5' | b'6') {
        return Err(unreadable(path, "not a P2/P3/P5/P6 pixmap"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| unreadable(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(unreadable(path, "malformed header"));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(unreadable(
            path,
            format!("unsupported geometry {w}x{h} maxval {maxval}"),
        ));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width: w as usize,
        height: h as usize,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes to `[3, h, w]` in `[0, 1]`; gray images are replicated to 3 channels.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let hd = parse_header(bytes, path)?;
    let channels = if matches!(hd.magic[1], b'3' | b'6') {
        3
    } else {
        1
    };
    let count = hd.width * hd.height * channels;
    let body = &bytes[hd.data_start..];
    let samples: Vec<u32> = match hd.magic[1] {
        b'5' | b'6' => {
            let wide = hd.maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            if body.len() < need {
                return Err(unreadable(path, "truncated pixel data"));
            }
            if wide {
                body[..need]
                    .chunks(2)
                    .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
                    .collect()
            } else {
                body[..need].iter().map(|&b| u32::from(b)).collect()
            }
        }
        _ => {
            let text = std::str::from_utf8(body)
                .map_err(|_| unreadable(path, "non-ASCII plain pixmap"))?;
            let v: Vec<u32> = text
                .split_ascii_whitespace()
                .take(count)
                .map(|t| {
                    t.parse()
                        .map_err(|_| unreadable(path, format!("bad sample `{t}`")))
                })
                .collect::<Result<_>>()?;
            if v.len() < count {
                return Err(unreadable(path, "truncated pixel data"));
            }
            v
        }
    };
    if samples.iter().any(|&s| s > hd.maxval) {
        return Err(unreadable(path, "sample exceeds maxval"));
    }
    let maxval = hd.maxval as f32;
    let plane = hd.width * hd.height;
    let mut data = vec![0f32; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let s = if channels == 3 {
                samples[i * 3 + c]
            } else {
                samples[i]
            };
            data[c * plane + i] = s as f32 / maxval;
        }
    }
    Tensor::from_vec(&[3, hd.height, hd.width], data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 encoding of a `[3, h, w]` image in `[0, 1]`.
pub fn encode_ppm(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    out
}

/// Binary P5 encoding of 8-bit gray values.
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}
