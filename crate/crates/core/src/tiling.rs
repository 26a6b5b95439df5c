//! Tissue detection and patch manifests.
//!
//! Background glass is bright and stained tissue is dark, so a pixel counts
//! as tissue when its grayscale value is at or below the slide's Otsu
//! threshold. The threshold is computed per slide. A sliding window then
//! keeps every window whose tissue share reaches `min_tissue_fraction`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide::{Raster, SlideRecord};

pub const DEFAULT_PATCH_SIZE: usize = 512;
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub min_tissue_fraction: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_PATCH_SIZE,
            min_tissue_fraction: DEFAULT_MIN_TISSUE_FRACTION,
        }
    }
}

impl TilingConfig {
    /// Non-overlapping windows of the given size at the default 50% tissue cut.
    pub fn with_patch_size(patch_size: usize) -> Self {
        TilingConfig {
            patch_size,
            stride: patch_size,
            ..TilingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::invalid(format!(
                "stride must satisfy 0 < stride <= patch_size ({}), got {}",
                self.patch_size, self.stride
            )));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::invalid(format!(
                "min_tissue_fraction must lie in [0, 1], got {}",
                self.min_tissue_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifestEntry {
    pub x: usize,
    pub y: usize,
    pub tissue_fraction: f64,
}

/// Tissue-qualified windows of one slide, sorted by `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchManifest {
    pub slide_id: String,
    pub entries: Vec<ManifestEntry>,
    pub config: TilingConfig,
}

impl PatchManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Line-oriented text form: a `slide_id,patch_size,stride,min_tissue_fraction`
    /// line followed by one `x,y,tissue_fraction` row per entry.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "{},{},{},{:.6}\n",
            self.slide_id, c.patch_size, c.stride, c.min_tissue_fraction
        );
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{:.6}", e.x, e.y, e.tissue_fraction);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("manifest is empty"))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!("bad manifest header {header:?}")));
        }
        let config = TilingConfig {
            patch_size: parse_field(fields[1], "patch_size")?,
            stride: parse_field(fields[2], "stride")?,
            min_tissue_fraction: parse_field(fields[3], "min_tissue_fraction")?,
        };
        config.validate()?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::format(format!("bad manifest row {}: {line:?}", i + 1)));
            }
            entries.push(ManifestEntry {
                x: parse_field(f[0], "x")?,
                y: parse_field(f[1], "y")?,
                tissue_fraction: parse_field(f[2], "tissue_fraction")?,
            });
        }
        Ok(PatchManifest {
            slide_id: fields[0].to_string(),
            entries,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PatchManifest::parse(&text)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(format!("cannot parse {name} from {s:?}")))
}

/// 256-bin intensity histogram of the slide's grayscale rendering.
pub fn gray_histogram(raster: &Raster) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for y in 0..raster.height() {
        for x in 0..raster.width() {
            hist[raster.gray_at(x, y) as usize] += 1;
        }
    }
    hist
}

/// Otsu's threshold: the `t` maximizing between-class variance of
/// `{v <= t}` against `{v > t}`, smallest `t` on ties.
///
/// The criterion is evaluated as `(N·S₀ − S·n₀)² / (n₀·n₁)`, which is the
/// between-class variance times `N²`, from exact integer sums; equal
/// partitions therefore score bit-identically. If all mass sits in one bin
/// that bin is returned.
pub fn otsu_threshold(histogram: &[u64]) -> Result<u8> {
    if histogram.len() != 256 {
        return Err(Error::invalid(format!(
            "histogram must have 256 bins, got {}",
            histogram.len()
        )));
    }
    let total: u128 = histogram.iter().map(|&c| u128::from(c)).sum();
    if total == 0 {
        return Err(Error::invalid("histogram is empty"));
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| histogram[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0] as u8);
    }
    let weighted_total: u128 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * u128::from(c))
        .sum();

    let mut best_t = 0usize;
    let mut best = f64::NEG_INFINITY;
    let mut n0: u128 = 0;
    let mut s0: u128 = 0;
    for (t, &count) in histogram.iter().enumerate() {
        n0 += u128::from(count);
        s0 += t as u128 * u128::from(count);
        let n1 = total - n0;
        let score = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            let a = total * s0;
            let b = weighted_total * n0;
            let diff = a.abs_diff(b) as f64;
            diff * diff / (n0 as f64 * n1 as f64)
        };
        if score > best {
            best = score;
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

/// Binary tissue mask, 1 = tissue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub threshold: u8,
    pub data: Vec<u8>,
}

impl TissueMask {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Marks pixels at or below the slide's Otsu threshold as tissue.
///
/// A slide whose pixels all share one value thresholds at that value, so
/// the whole raster (even a blank white one) comes back as tissue.
pub fn tissue_mask(slide: &SlideRecord) -> Result<TissueMask> {
    let raster = &slide.raster;
    let gray = raster.to_gray();
    let mut hist = [0u64; 256];
    for &g in &gray {
        hist[g as usize] += 1;
    }
    let threshold = otsu_threshold(&hist)?;
    let data = gray.iter().map(|&g| u8::from(g <= threshold)).collect();
    Ok(TissueMask {
        width: raster.width(),
        height: raster.height(),
        threshold,
        data,
    })
}

/// Summed-area table with a zero guard row/column.
struct IntegralImage {
    stride: usize,
    sums: Vec<u64>,
}

impl IntegralImage {
    fn new(mask: &TissueMask) -> Self {
        let stride = mask.width + 1;
        let mut sums = vec![0u64; stride * (mask.height + 1)];
        for y in 0..mask.height {
            let mut row = 0u64;
            for x in 0..mask.width {
                row += u64::from(mask.get(x, y));
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        IntegralImage { stride, sums }
    }

    fn window(&self, x: usize, y: usize, size: usize) -> u64 {
        let s = self.stride;
        let (x1, y1) = (x + size, y + size);
        self.sums[y1 * s + x1] + self.sums[y * s + x] - self.sums[y * s + x1] - self.sums[y1 * s + x]
    }
}

/// Window origins along one axis: `0, stride, 2·stride, ...` while the
/// window still fits.
pub fn window_origins(extent: usize, patch_size: usize, stride: usize) -> Vec<usize> {
    if extent < patch_size {
        return Vec::new();
    }
    (0..=(extent - patch_size) / stride).map(|i| i * stride).collect()
}

/// Tissue share of a window, as stored in manifests.
#[inline]
pub fn tissue_fraction(tissue_pixels: u64, patch_size: usize) -> f64 {
    tissue_pixels as f64 / (patch_size * patch_size) as f64
}

/// Builds the patch manifest of a slide against a precomputed mask.
pub fn manifest_from_mask(slide_id: &str, mask: &TissueMask, cfg: &TilingConfig) -> Result<PatchManifest> {
    cfg.validate()?;
    if mask.width < cfg.patch_size || mask.height < cfg.patch_size {
        return Err(Error::invalid(format!(
            "slide {slide_id} ({}x{}) is smaller than patch size {}",
            mask.width, mask.height, cfg.patch_size
        )));
    }
    let integral = IntegralImage::new(mask);
    let xs = window_origins(mask.width, cfg.patch_size, cfg.stride);
    let ys = window_origins(mask.height, cfg.patch_size, cfg.stride);
    // rows evaluated in parallel; collect keeps (y, x) order
    let entries: Vec<ManifestEntry> = ys
        .par_iter()
        .flat_map_iter(|&y| {
            let integral = &integral;
            xs.iter().filter_map(move |&x| {
                let frac = tissue_fraction(integral.window(x, y, cfg.patch_size), cfg.patch_size);
                (frac >= cfg.min_tissue_fraction).then_some(ManifestEntry {
                    x,
                    y,
                    tissue_fraction: frac,
                })
            })
        })
        .collect();
    Ok(PatchManifest {
        slide_id: slide_id.to_string(),
        entries,
        config: *cfg,
    })
}

/// Otsu mask plus sliding window: the manifest of tissue-bearing patches.
/// Zero qualifying windows yield an empty manifest.
pub fn extract_manifest(slide: &SlideRecord, cfg: &TilingConfig) -> Result<PatchManifest> {
    cfg.validate()?;
    if slide.width() < cfg.patch_size || slide.height() < cfg.patch_size {
        return Err(Error::invalid(format!(
            "slide {} ({}x{}) is smaller than patch size {}",
            slide.id,
            slide.width(),
            slide.height(),
            cfg.patch_size
        )));
    }
    let mask = tissue_mask(slide)?;
    manifest_from_mask(&slide.id, &mask, cfg)
}
