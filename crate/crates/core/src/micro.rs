//! Two-phase microstructure images and their binary PGM encoding.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Square image with pixels in `[-1, 1]`. The binary view puts a pixel in
/// phase B when it is strictly positive and in phase A otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Microstructure {
    side: usize,
    pixels: Vec<f32>,
}

impl Microstructure {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(CoreError::invalid(format!(
                "microstructure of side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(CoreError::invalid(format!("pixel value {p} outside [-1, 1]")));
        }
        Ok(Self { side, pixels })
    }

    /// Builds a binary image from phase flags (`true` = phase B).
    pub fn from_phases(side: usize, phases: &[bool]) -> Result<Self> {
        Self::new(side, phases.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn phase(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.side + col] > 0.0
    }

    pub fn phases(&self) -> impl Iterator<Item = bool> + '_ {
        self.pixels.iter().map(|&p| p > 0.0)
    }

    /// Same image snapped to ±1 by sign.
    pub fn binarized(&self) -> Self {
        Self {
            side: self.side,
            pixels: self.phases().map(|b| if b { 1.0 } else { -1.0 }).collect(),
        }
    }

    pub fn rotated90(&self) -> Self {
        let s = self.side;
        let mut out = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                out[c * s + (s - 1 - r)] = self.pixels[r * s + c];
            }
        }
        Self { side: s, pixels: out }
    }

    pub fn mirrored(&self) -> Self {
        let s = self.side;
        let mut out = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                out[r * s + (s - 1 - c)] = self.pixels[r * s + c];
            }
        }
        Self { side: s, pixels: out }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm_raw(path, self.side, self.side, &self.phases().map(|b| if b { 255 } else { 0 }).collect::<Vec<u8>>())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (w, h, bytes) = read_pgm_raw(path)?;
        if w != h {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                reason: format!("image is {w}×{h}, expected square"),
            });
        }
        Self::from_phases(w, &bytes.iter().map(|&b| b >= 128).collect::<Vec<_>>())
    }
}

/// Writes an 8-bit binary (`P5`) PGM.
pub fn write_pgm_raw(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    assert_eq!(bytes.len(), width * height);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

/// Reads an 8-bit binary PGM, returning `(width, height, pixels)`.
pub fn read_pgm_raw(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| CoreError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let raw = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < raw.len() && (raw[pos].is_ascii_whitespace() || raw[pos] == b'#') {
            if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = raw.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.to_vec()))
}

/// Lays images side by side in one PGM row separated by mid-gray gutters.
pub fn write_grid(path: &Path, images: &[Microstructure], gutter: usize) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(CoreError::invalid("image grid needs at least one image"));
    };
    let s = first.side();
    if images.iter().any(|m| m.side() != s) {
        return Err(CoreError::invalid("grid images must share a side"));
    }
    let width = images.len() * s + (images.len() - 1) * gutter;
    let mut bytes = vec![128u8; width * s];
    for (i, m) in images.iter().enumerate() {
        let x0 = i * (s + gutter);
        for r in 0..s {
            for c in 0..s {
                bytes[r * width + x0 + c] = if m.phase(r, c) { 255 } else { 0 };
            }
        }
    }
    write_pgm_raw(path, width, s, &bytes)
}
