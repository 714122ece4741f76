//! Grayscale rasters, binary masks and PGM input/output.
//!
//! Intensities are `f64` in `[0, 1]` with 0 = ink and 1 = paper. Boxes are
//! half-open: a [`BBox`] covers columns `x0..x1` and rows `y0..y1`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::arg(format!(
                "pixel buffer has {} values, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Fraction of pixels darker than 0.5.
    pub fn ink_fraction(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.pixels.iter().filter(|&&v| v < 0.5).count() as f64 / self.pixels.len() as f64
    }

    /// Quantizes to 8 bits, 255 = paper.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::arg("byte buffer does not match dimensions"));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    /// Binary (P5) PGM encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_u8());
        out
    }

    /// Plain (P2) PGM encoding.
    pub fn to_pgm_plain(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.to_u8().chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_pgm(&bytes)
    }

    /// Decodes a P2 or P5 PGM. 16-bit P5 samples are big-endian.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = pgm_token(bytes, &mut pos)?;
        let plain = match magic.as_str() {
            "P2" => true,
            "P5" => false,
            other => return Err(Error::parse(1, format!("not a PGM file (magic {other:?})"))),
        };
        let width = pgm_number(bytes, &mut pos)?;
        let height = pgm_number(bytes, &mut pos)?;
        let maxval = pgm_number(bytes, &mut pos)?;
        if width == 0 || height == 0 {
            return Err(Error::parse(1, "PGM has zero dimension"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::parse(1, format!("PGM maxval {maxval} out of range")));
        }
        let n = width * height;
        let scale = maxval as f64;
        let mut pixels = Vec::with_capacity(n);
        if plain {
            for _ in 0..n {
                let v = pgm_number(bytes, &mut pos)?;
                if v > maxval {
                    return Err(Error::parse(1, "PGM sample exceeds maxval"));
                }
                pixels.push(v as f64 / scale);
            }
        } else {
            // exactly one whitespace byte after maxval
            pos += 1;
            let bpp = if maxval > 255 { 2 } else { 1 };
            let data = bytes
                .get(pos..pos + n * bpp)
                .ok_or_else(|| Error::parse(1, "PGM raster truncated"))?;
            if bpp == 1 {
                pixels.extend(data.iter().map(|&b| (b as f64 / scale).min(1.0)));
            } else {
                pixels.extend(
                    data.chunks_exact(2)
                        .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0)),
                );
            }
        }
        GrayImage::from_pixels(width, height, pixels)
    }
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(1, "unexpected end of PGM header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn pgm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::parse(1, format!("bad PGM number {tok:?}")))
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Self {
        BitMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::arg("mask length does not match dimensions"));
        }
        Ok(BitMask {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let px = BBox::new(x, y, x + 1, y + 1);
                    bb = Some(bb.map_or(px, |b| b.union(&px)));
                }
            }
        }
        bb
    }

    pub fn intersection_count(&self, other: &BitMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &BitMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// One ballot mark crop at encoder input size.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkImage {
    pub image: GrayImage,
    pub mark_id: String,
    pub ballot_id: String,
}

impl MarkImage {
    pub fn new(image: GrayImage, mark_id: impl Into<String>, ballot_id: impl Into<String>) -> Self {
        MarkImage {
            image,
            mark_id: mark_id.into(),
            ballot_id: ballot_id.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn pixels(&self) -> &[f64] {
        self.image.pixels()
    }
}
