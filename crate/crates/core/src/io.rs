//! Raster file formats: binary PGM (P5, 8 or 16 bit) and grayscale PNG.
//!
//! Values are normalised to [0,1] on load (`/255` or `/65535`) and
//! quantised with rounding on save.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{PalError, Result};
use crate::types::{BinaryMask, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_value(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn quantize_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Encodes a raster as binary PGM.
pub fn encode_pgm(grid: &Grid<f32>, depth: BitDepth) -> Vec<u8> {
    let mut out = format!(
        "P5\n{} {}\n{}\n",
        grid.width(),
        grid.height(),
        depth.max_value() as u32
    )
    .into_bytes();
    match depth {
        BitDepth::Eight => out.extend(grid.data().iter().map(|&v| quantize_u8(v))),
        // 16-bit samples are big-endian per the netpbm format.
        BitDepth::Sixteen => {
            for &v in grid.data() {
                out.extend_from_slice(&quantize_u16(v).to_be_bytes());
            }
        }
    }
    out
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
    if start == *pos {
        return Err(PalError::InvalidData("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PalError::InvalidData("bad number in PGM header".into()))
}

/// Decodes binary PGM; returns the normalised raster and its bit depth.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Grid<f32>, BitDepth)> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != b"P5" {
        return Err(PalError::InvalidData("not a binary PGM (P5)".into()));
    }
    let width = pgm_number(bytes, &mut pos)?;
    let height = pgm_number(bytes, &mut pos)?;
    let maxval = pgm_number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(PalError::InvalidData(format!("PGM maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let depth = if maxval < 256 {
        BitDepth::Eight
    } else {
        BitDepth::Sixteen
    };
    let bytes_per = if depth == BitDepth::Eight { 1 } else { 2 };
    let body = bytes
        .get(pos..pos + n * bytes_per)
        .ok_or_else(|| PalError::InvalidData("truncated PGM raster".into()))?;
    let scale = maxval as f32;
    let data: Vec<f32> = match depth {
        BitDepth::Eight => body.iter().map(|&b| (b as f32 / scale).min(1.0)).collect(),
        BitDepth::Sixteen => body
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / scale).min(1.0))
            .collect(),
    };
    Ok((Grid::from_vec(height, width, data)?, depth))
}

pub fn write_pgm(path: impl AsRef<Path>, grid: &Grid<f32>, depth: BitDepth) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(grid, depth))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    Ok(decode_pgm(&fs::read(path)?)?.0)
}

pub fn write_png(path: impl AsRef<Path>, grid: &Grid<f32>, depth: BitDepth) -> Result<()> {
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    match depth {
        BitDepth::Eight => {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_vec(w, h, grid.data().iter().map(|&v| quantize_u8(v)).collect())
                    .expect("buffer size matches dimensions");
            buf.save(path)?;
        }
        BitDepth::Sixteen => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_vec(w, h, grid.data().iter().map(|&v| quantize_u16(v)).collect())
                    .expect("buffer size matches dimensions");
            buf.save(path)?;
        }
    }
    Ok(())
}

/// Reads a grayscale PNG, 8 or 16 bit.
pub fn read_png(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        image::DynamicImage::ImageLuma8(buf) => {
            buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        other => {
            return Err(PalError::InvalidData(format!(
                "expected a grayscale PNG, got {:?}",
                other.color()
            )))
        }
    };
    Grid::from_vec(h, w, data)
}

/// Reads `.pgm` or `.png` by extension.
pub fn read_gray(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        _ => read_png(path),
    }
}

/// Writes `.pgm` or `.png` by extension.
pub fn write_gray(path: impl AsRef<Path>, grid: &Grid<f32>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => write_pgm(path, grid, depth),
        _ => write_png(path, grid, depth),
    }
}

/// Masks are stored as 8-bit 0/255 images.
pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_gray(path, &mask.to_unit(), BitDepth::Eight)
}

/// Any pixel brighter than mid-gray is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(read_gray(path)?.map(|&v| v > 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Grid<f32> {
        Grid::from_fn(h, w, |r, c| ((r * w + c) % 256) as f32 / 255.0)
    }

    #[test]
    fn pgm8_roundtrip_exact_on_quantized_values() {
        let g = ramp(9, 13);
        let (back, depth) = decode_pgm(&encode_pgm(&g, BitDepth::Eight)).unwrap();
        assert_eq!(depth, BitDepth::Eight);
        assert_eq!(back, g);
    }

    #[test]
    fn pgm16_keeps_fine_levels() {
        let g = Grid::from_fn(4, 4, |r, c| (r * 4 + c) as f32 / 65535.0);
        let (back, depth) = decode_pgm(&encode_pgm(&g, BitDepth::Sixteen)).unwrap();
        assert_eq!(depth, BitDepth::Sixteen);
        for (a, b) in back.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let (g, _) = decode_pgm(&bytes).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_pgm_rejected() {
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00\x01").is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn png_roundtrip_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        let g = ramp(8, 8);
        for (name, depth) in [("a.png", BitDepth::Eight), ("b.png", BitDepth::Sixteen)] {
            let p = dir.path().join(name);
            write_png(&p, &g, depth).unwrap();
            let back = read_png(&p).unwrap();
            for (a, b) in back.data().iter().zip(g.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let m = g.map(|&v| v > 0.3);
        let p = dir.path().join("m.pgm");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }
}
