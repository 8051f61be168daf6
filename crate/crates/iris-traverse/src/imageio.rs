//! Image files: a dependency-free binary PGM codec and PNG export.
//!
//! PGM is the working format — trivially diffable, byte-stable, and the
//! reader below is strict enough to fuzz. PNG rides on the `image` crate
//! for anything that wants to open in a browser.

use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

const MAX_SIDE: usize = 1 << 15;
const MAX_PIXELS: usize = 1 << 26;

/// Quantize unit-range pixels to bytes: `round(255·clamp(p, 0, 1))`.
pub fn quantize(image: &Array) -> Result<(usize, usize, Vec<u8>)> {
    let [h, w] = match image.shape() {
        [h, w] => [*h, *w],
        other => {
            return Err(Error::domain(
                "quantize",
                format!("expected an H×W image, got {other:?}"),
            ))
        }
    };
    let bytes = image
        .data()
        .iter()
        .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
        .collect();
    Ok((h, w, bytes))
}

// ── PGM ──────────────────────────────────────────────────────────────────

/// Write a binary (P5) PGM: `P5\n{width} {height}\n255\n` + raw rows.
pub fn write_pgm<W: std::io::Write>(mut out: W, image: &Array) -> Result<()> {
    let (h, w, bytes) = quantize(image)?;
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(&bytes)?;
    Ok(())
}

/// Strict binary-PGM reader: P5 only, 8-bit maxval, comments allowed in the
/// header, exactly one whitespace byte after the maxval, no trailing bytes.
/// Pixels come back as f64 in `[0, 1]` (scaled by the declared maxval).
/// Never panics on arbitrary input.
pub fn parse_pgm(bytes: &[u8]) -> Result<Array> {
    let bad = |msg: &str| Error::format("pgm", msg.to_string());
    let mut pos = 0usize;

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    pos += 2;

    let next_token = |pos: &mut usize| -> Result<usize> {
        // Skip whitespace and `#` comments that run to end of line.
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while let Some(b) = bytes.get(*pos) {
                        *pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = *pos;
        while let Some(b) = bytes.get(*pos) {
            if b.is_ascii_digit() {
                *pos += 1;
            } else {
                break;
            }
        }
        if *pos == start || *pos - start > 8 {
            return Err(bad("malformed header number"));
        }
        let mut value = 0usize;
        for &b in &bytes[start..*pos] {
            value = value * 10 + (b - b'0') as usize;
        }
        Ok(value)
    };

    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(bad("image dimensions out of range"));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(bad("image too large"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("expected single whitespace after maxval")),
    }

    let n = width * height;
    let rest = &bytes[pos..];
    if rest.len() < n {
        return Err(bad("pixel data truncated"));
    }
    if rest.len() > n {
        return Err(bad("trailing bytes after pixel data"));
    }
    let scale = 1.0 / maxval as f64;
    let data = rest.iter().map(|&b| b as f64 * scale).collect();
    Array::new(vec![height, width], data)
}

pub fn read_pgm_from_path(path: &Path) -> Result<Array> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn write_pgm_to_path(path: &Path, image: &Array) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_pgm(std::io::BufWriter::new(file), image)
}

// ── PNG ──────────────────────────────────────────────────────────────────

pub fn write_png_to_path(path: &Path, image: &Array) -> Result<()> {
    let (h, w, bytes) = quantize(image)?;
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer sized from the image");
    buf.save(path)
        .map_err(|e| Error::format("png", e.to_string()))
}

pub fn read_png_from_path(path: &Path) -> Result<Array> {
    let img = image::open(path)
        .map_err(|e| Error::format("png", e.to_string()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Array::new(vec![h, w], data)
}

// ── Extension-dispatched conveniences ────────────────────────────────────

fn extension_of(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| {
            Error::format(
                "image",
                format!("cannot tell the format of '{}' (no extension)", path.display()),
            )
        })
}

/// Write by extension: `.pgm` or `.png`.
pub fn write_image(path: &Path, image: &Array) -> Result<()> {
    match extension_of(path)?.as_str() {
        "pgm" => write_pgm_to_path(path, image),
        "png" => write_png_to_path(path, image),
        other => Err(Error::format(
            "image",
            format!("unsupported image extension '.{other}' (use .pgm or .png)"),
        )),
    }
}

/// Read by extension: `.pgm` or `.png`.
pub fn read_image(path: &Path) -> Result<Array> {
    match extension_of(path)?.as_str() {
        "pgm" => read_pgm_from_path(path),
        "png" => read_png_from_path(path),
        other => Err(Error::format(
            "image",
            format!("unsupported image extension '.{other}' (use .pgm or .png)"),
        )),
    }
}

/// Export a soft mask as hard black/white, thresholded at 0.5.
pub fn write_mask(path: &Path, mask: &Array) -> Result<()> {
    let hard = Array::new(
        mask.shape().to_vec(),
        mask.data()
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    write_image(path, &hard)
}
