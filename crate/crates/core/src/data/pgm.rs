//! Binary greyscale PGM (`P5`) images with maxval 255 or 65535, mapped to
//! `(1, h, w)` tensors with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Pgm {
            offset: 0,
            reason: "missing P5 magic".into(),
        });
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each header field.
        let ws_start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == ws_start {
            return Err(Error::Pgm {
                offset: pos,
                reason: "expected whitespace".into(),
            });
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Pgm {
                offset: start,
                reason: format!("expected {}", ["width", "height", "maxval"][i]),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Pgm {
                offset: start,
                reason: "number out of range".into(),
            })?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Pgm {
            offset: pos,
            reason: "expected a single whitespace byte before pixel data".into(),
        });
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Pgm {
            offset: 2,
            reason: format!("empty image {width}x{height}"),
        });
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Pgm {
            offset: pos - 1,
            reason: format!("unsupported maxval {maxval}"),
        });
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data_offset: pos + 1,
    })
}

/// Image size `(width, height)` from the header alone.
pub fn pgm_dims(bytes: &[u8]) -> Result<(usize, usize)> {
    let h = parse_header(bytes)?;
    Ok((h.width, h.height))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let depth = if h.maxval > 255 { 2 } else { 1 };
    let need = h.width * h.height * depth;
    let payload = &bytes[h.data_offset..];
    if payload.len() < need {
        return Err(Error::Pgm {
            offset: bytes.len(),
            reason: format!("pixel data truncated: {} of {need} bytes", payload.len()),
        });
    }
    let scale = 1.0 / h.maxval as f32;
    let data = if depth == 1 {
        payload[..need].iter().map(|&b| b as f32 * scale).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f32 * scale)
            .collect()
    };
    Tensor::new(vec![1, h.height, h.width], data)
}

/// Encodes a `(1, h, w)` tensor, clamping to `[0, 1]` and rounding to
/// `maxval` levels.
pub fn encode_pgm(image: &Tensor, maxval: u32) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("PGM needs one channel, got {c}")));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::invalid(format!("unsupported maxval {maxval}")));
    }
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) as f64 * maxval as f64).round() as u32;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

/// Writes a 16-bit PGM.
pub fn save_pgm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(image, 65535)?)?;
    Ok(())
}
