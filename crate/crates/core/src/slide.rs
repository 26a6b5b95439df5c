//! Slide rasters and their on-disk forms.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit raster, grayscale (1 channel) or RGB (3 channels), row-major and
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "raster must have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster is empty"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster data has {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Raster::new(width, height, 1, data)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Raster {
            width,
            height,
            channels: 1,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// Grayscale intensity at (x, y). RGB uses ITU-R 601 luminance weights
    /// in fixed-point so the result is bit-exact everywhere.
    #[inline]
    pub fn gray_at(&self, x: usize, y: usize) -> u8 {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            self.data[i]
        } else {
            luminance(self.data[i], self.data[i + 1], self.data[i + 2])
        }
    }

    /// Whole raster converted to grayscale bytes.
    pub fn to_gray(&self) -> Vec<u8> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| luminance(p[0], p[1], p[2]))
            .collect()
    }

    /// Grayscale crop scaled to `[0, 1]`, row-major.
    pub fn crop_unit(&self, x: usize, y: usize, size: usize) -> Result<Vec<f64>> {
        self.crop_unit_resized(x, y, size, size)
    }

    /// Grayscale `size`-pixel crop box-averaged down to `out × out`;
    /// `size` must be a multiple of `out`.
    pub fn crop_unit_resized(&self, x: usize, y: usize, size: usize, out: usize) -> Result<Vec<f64>> {
        if x + size > self.width || y + size > self.height {
            return Err(Error::invalid(format!(
                "crop ({x},{y}) size {size} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        if out == 0 || size % out != 0 {
            return Err(Error::invalid(format!("crop size {size} is not a multiple of {out}")));
        }
        let f = size / out;
        let norm = 255.0 * (f * f) as f64;
        let mut res = Vec::with_capacity(out * out);
        for oy in 0..out {
            for ox in 0..out {
                let mut sum = 0u32;
                for yy in y + oy * f..y + (oy + 1) * f {
                    for xx in x + ox * f..x + (ox + 1) * f {
                        sum += u32::from(self.gray_at(xx, yy));
                    }
                }
                res.push(f64::from(sum) / norm);
            }
        }
        Ok(res)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(format!("{}: {other}", path.display())),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(buf) => Raster::new(w, h, 1, buf.into_raw()),
            other => Raster::new(w, h, 3, other.into_rgb8().into_raw()),
        }
    }

    /// Writes a binary PGM (grayscale) or PPM (RGB).
    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut bytes = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.data);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

#[inline]
fn luminance(r: u8, g: u8, b: u8) -> u8 {
    let v = 299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b);
    ((v + 500) / 1000) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Magnification {
    X20,
    X40,
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Magnification::X20 => write!(f, "x20"),
            Magnification::X40 => write!(f, "x40"),
        }
    }
}

impl FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x20" | "20x" | "20" => Ok(Magnification::X20),
            "x40" | "40x" | "40" => Ok(Magnification::X40),
            other => Err(Error::invalid(format!("unknown magnification {other:?}"))),
        }
    }
}

/// A labeled slide: 0 = normal, 1 = diseased.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub id: String,
    pub raster: Raster,
    pub magnification: Magnification,
    pub label: u8,
}

impl SlideRecord {
    pub fn new(id: impl Into<String>, raster: Raster, magnification: Magnification, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::invalid(format!("slide label must be 0 or 1, got {label}")));
        }
        Ok(SlideRecord {
            id: id.into(),
            raster,
            magnification,
            label,
        })
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }
}
