//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded header plus pixel bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Parses a P5 or P6 buffer. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::format(path, "missing magic"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported magic `{}`", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut field = |name: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos)
            .ok_or_else(|| Error::format(path, format!("truncated header: missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(path, format!("bad {name} `{}`", String::from_utf8_lossy(tok))))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported (need 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            path,
            format!("raster truncated: need {need} bytes, have {}", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after raster", raster.len() - need),
        ));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        pixels: raster.to_vec(),
    })
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
