use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale pixel grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub const MIN_SIDE: usize = 8;
    pub const MAX_SIDE: usize = 32;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if !(Self::MIN_SIDE..=Self::MAX_SIDE).contains(&height) || !(Self::MIN_SIDE..=Self::MAX_SIDE).contains(&width) {
            return Err(Error::Contract(format!(
                "image side must be in {}..={}, got {height}x{width}",
                Self::MIN_SIDE,
                Self::MAX_SIDE
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} needs {} pixels, got {}", height * width, pixels.len()),
            ));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Clamps arbitrary values into range (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        1
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn negative(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| 1.0 - p).collect(),
        }
    }

    /// Rounds every pixel to the nearest 8-bit level, matching what a PGM
    /// round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| to_byte(p) as f32 / 255.0).collect(),
        }
    }

    /// Model-space representation: `[H, W]` tensor with values in `[-1, 1]`.
    pub fn to_model_space(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.pixels.iter().map(|p| 2.0 * p - 1.0).collect(),
        )
        .expect("consistent shape")
    }

    /// Inverse of [`ImageBuffer::to_model_space`], clamped to `[0, 1]`.
    pub fn from_model_space(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] => (*h, *w),
            other => return Err(Error::shape("from_model_space", format!("{other:?}"))),
        };
        let vals: Vec<f32> = t.data().iter().map(|v| (v + 1.0) * 0.5).collect();
        Self::from_clamped(h, w, &vals)
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| to_byte(p)));
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        // Header: magic, width, height, maxval separated by whitespace, then
        // exactly one whitespace byte before the raster.
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format {
                    offset: pos as u64,
                    message: "truncated PGM header".into(),
                });
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Format {
                offset: 0,
                message: format!("expected P5 magic, got {:?}", fields[0]),
            });
        }
        let num = |i: usize| {
            fields[i].parse::<usize>().map_err(|_| Error::Format {
                offset: 0,
                message: format!("bad PGM header field {:?}", fields[i]),
            })
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported maxval {maxval}"),
            });
        }
        let raster = bytes.get(pos..pos + width * height).ok_or(Error::Format {
            offset: bytes.len() as u64,
            message: format!("raster needs {} bytes", width * height),
        })?;
        Self::new(height, width, raster.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes)
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn to_byte(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}
