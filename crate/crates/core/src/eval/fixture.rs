//! Synthetic slides with planted disease.
//!
//! A slide is a grid of `patch_size` cells on bright glass. Cells inside a
//! random ellipse are tissue: a mid-gray base carrying a fixed number of
//! small dark dots. Normal cells scatter their dots at least
//! `min_separation` apart. Planted ("diseased") cells group the same number
//! of dots into tight 2×2 clusters with `cluster_spacing` pitch. Both
//! textures have the same intensity histogram and the same 3×3
//! neighbourhood statistics; they differ only in how dots co-occur at
//! coarser scales, so neither the Otsu mask nor the first encoder block can
//! separate them.
//!
//! Normal slides hold no planted cells. Diseased slides plant a fixed share
//! of their tissue cells, at least one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::slide::{Magnification, Raster, SlideRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub n_slides: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    /// Share of slides labeled diseased.
    pub diseased_fraction: f64,
    /// Share of a diseased slide's tissue cells that carry the planted texture.
    pub planted_fraction: f64,
    /// Dots per tissue cell; a multiple of 4 so planted cells form whole clusters.
    pub dots_per_patch: usize,
    pub cluster_spacing: usize,
    pub min_separation: usize,
    pub background_intensity: u8,
    pub tissue_intensity: u8,
    pub dot_intensity: u8,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            n_slides: 60,
            width: 896,
            height: 896,
            patch_size: 64,
            diseased_fraction: 0.5,
            planted_fraction: 0.55,
            dots_per_patch: 20,
            cluster_spacing: 5,
            min_separation: 9,
            background_intensity: 240,
            tissue_intensity: 170,
            dot_intensity: 60,
            noise_std: 5.0,
            seed: 0,
        }
    }
}

/// Keeps dots (radius 1) far enough from the cell edge that no 3×3
/// window reaching past the edge ever touches one.
const EDGE_MARGIN: usize = 3;

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.width < self.patch_size || self.height < self.patch_size {
            return Err(Error::invalid(format!(
                "fixture slides ({}x{}) must be at least one patch ({}) wide and high",
                self.width, self.height, self.patch_size
            )));
        }
        if self.n_slides == 0 {
            return Err(Error::invalid("fixture needs at least one slide"));
        }
        for (name, v) in [
            ("diseased_fraction", self.diseased_fraction),
            ("planted_fraction", self.planted_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.dots_per_patch % 4 != 0 {
            return Err(Error::invalid("dots_per_patch must be a multiple of 4"));
        }
        if self.cluster_spacing < 5 || self.min_separation < self.cluster_spacing {
            return Err(Error::invalid(
                "need cluster_spacing >= 5 and min_separation >= cluster_spacing",
            ));
        }
        if self.patch_size < 2 * EDGE_MARGIN + self.cluster_spacing + 1 {
            return Err(Error::invalid("patch_size too small for dot clusters"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        if self.dot_intensity >= self.tissue_intensity || self.tissue_intensity >= self.background_intensity {
            return Err(Error::invalid("need dot < tissue < background intensity"));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        (self.width / self.patch_size, self.height / self.patch_size)
    }
}

/// Planted cell origins per diseased slide.
pub type PlantedMap = BTreeMap<String, BTreeSet<(usize, usize)>>;

#[derive(Debug, Clone)]
pub struct Fixture {
    pub slides: Vec<SlideRecord>,
    /// Origins of every tissue cell, per slide, in `(y, x)` order.
    pub tissue: BTreeMap<String, Vec<(usize, usize)>>,
    pub planted: PlantedMap,
}

impl Fixture {
    pub fn is_planted(&self, slide_id: &str, x: usize, y: usize) -> bool {
        self.planted
            .get(slide_id)
            .is_some_and(|cells| cells.contains(&(x, y)))
    }

    /// `slide_id,x,y,planted` for every tissue cell.
    pub fn ground_truth_csv(&self) -> String {
        let mut s = String::from("slide_id,x,y,planted\n");
        for (id, cells) in &self.tissue {
            for &(x, y) in cells {
                let _ = writeln!(s, "{id},{x},{y},{}", u8::from(self.is_planted(id, x, y)));
            }
        }
        s
    }

    /// Writes `slides/<id>.pgm`, `slides.csv` and `ground_truth.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let slides_dir = dir.join("slides");
        fs::create_dir_all(&slides_dir).map_err(|e| Error::io(&slides_dir, e))?;
        let mut index = String::from("slide_id,file,label,magnification\n");
        for s in &self.slides {
            let file = format!("slides/{}.pgm", s.id);
            s.raster.save_pnm(&dir.join(&file))?;
            let _ = writeln!(index, "{},{file},{},{}", s.id, s.label, s.magnification);
        }
        let p = dir.join("slides.csv");
        fs::write(&p, index).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("ground_truth.csv");
        fs::write(&p, self.ground_truth_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// Parses a ground-truth CSV back into a planted map.
pub fn parse_ground_truth(text: &str) -> Result<PlantedMap> {
    let mut map = PlantedMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(format!("ground truth line {}: bad number {s:?}", i + 1)))
        };
        if f.len() != 4 {
            return Err(Error::format(format!("ground truth line {} has {} fields", i + 1, f.len())));
        }
        if parse(f[3])? == 1 {
            map.entry(f[0].to_string())
                .or_default()
                .insert((parse(f[1])?, parse(f[2])?));
        }
    }
    Ok(map)
}

/// Random sequential placement of `count` points in `[lo, hi]²` with
/// pairwise Chebyshev distance at least `sep`.
fn scatter(rng: &mut ChaCha8Rng, count: usize, lo: usize, hi: usize, sep: usize) -> Result<Vec<(usize, usize)>> {
    for _ in 0..200 {
        let mut pts: Vec<(usize, usize)> = Vec::with_capacity(count);
        let mut tries = 0;
        while pts.len() < count && tries < 20_000 {
            tries += 1;
            let p = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
            if pts
                .iter()
                .all(|q| p.0.abs_diff(q.0).max(p.1.abs_diff(q.1)) >= sep)
            {
                pts.push(p);
            }
        }
        if pts.len() == count {
            return Ok(pts);
        }
    }
    Err(Error::invalid(format!(
        "cannot place {count} dots {sep}px apart in a {}px cell",
        hi - lo + 1 + 2 * EDGE_MARGIN
    )))
}

/// Dot centers of one cell, relative to the cell origin.
fn cell_dots(rng: &mut ChaCha8Rng, spec: &FixtureSpec, planted: bool) -> Result<Vec<(usize, usize)>> {
    let lo = EDGE_MARGIN;
    let hi = spec.patch_size - 1 - EDGE_MARGIN;
    if !planted {
        return scatter(rng, spec.dots_per_patch, lo, hi, spec.min_separation);
    }
    let pitch = spec.cluster_spacing;
    let origins = scatter(
        rng,
        spec.dots_per_patch / 4,
        lo,
        hi - pitch,
        pitch + spec.min_separation,
    )?;
    Ok(origins
        .iter()
        .flat_map(|&(x, y)| [(x, y), (x + pitch, y), (x, y + pitch), (x + pitch, y + pitch)])
        .collect())
}

/// Darkening of the 3×3 dot footprint, as a share of (tissue − dot).
const DOT_PROFILE: [[f64; 3]; 3] = [[0.3, 0.6, 0.3], [0.6, 1.0, 0.6], [0.3, 0.6, 0.3]];

struct SlidePlan {
    slide: SlideRecord,
    tissue: Vec<(usize, usize)>,
    planted: BTreeSet<(usize, usize)>,
}

fn render_slide(spec: &FixtureSpec, index: usize, label: u8, slide_seed: u64) -> Result<SlidePlan> {
    let mut rng = seed::rng(slide_seed);
    let (gx, gy) = spec.grid();
    let (w, h, ps) = (spec.width, spec.height, spec.patch_size);

    // tissue ellipse over cell centers, in cell units
    let cx = gx as f64 / 2.0 + rng.gen_range(-0.5..0.5);
    let cy = gy as f64 / 2.0 + rng.gen_range(-0.5..0.5);
    let rx = gx as f64 * rng.gen_range(0.44..0.5);
    let ry = gy as f64 * rng.gen_range(0.44..0.5);
    let mut tissue: Vec<(usize, usize)> = Vec::new();
    for j in 0..gy {
        for i in 0..gx {
            let dx = (i as f64 + 0.5 - cx) / rx;
            let dy = (j as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                tissue.push((i * ps, j * ps));
            }
        }
    }
    if tissue.is_empty() {
        tissue.push(((gx / 2) * ps, (gy / 2) * ps));
    }

    let mut planted = BTreeSet::new();
    if label == 1 {
        let count = ((spec.planted_fraction * tissue.len() as f64).round() as usize).clamp(1, tissue.len());
        let mut order = tissue.clone();
        order.shuffle(&mut rng);
        planted.extend(order.into_iter().take(count));
    }

    let mut field = vec![f64::from(spec.background_intensity); w * h];
    for &(ox, oy) in &tissue {
        for y in oy..oy + ps {
            field[y * w + ox..y * w + ox + ps].fill(f64::from(spec.tissue_intensity));
        }
        let depth = f64::from(spec.tissue_intensity) - f64::from(spec.dot_intensity);
        for (dx, dy) in cell_dots(&mut rng, spec, planted.contains(&(ox, oy)))? {
            for (ky, row) in DOT_PROFILE.iter().enumerate() {
                for (kx, &share) in row.iter().enumerate() {
                    let (x, y) = (ox + dx + kx - 1, oy + dy + ky - 1);
                    field[y * w + x] -= depth * share;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let data: Vec<u8> = field
        .iter()
        .map(|&v| {
            let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();

    let id = format!("slide_{index:03}");
    let raster = Raster::gray(w, h, data)?;
    Ok(SlidePlan {
        slide: SlideRecord::new(id, raster, Magnification::X20, label)?,
        tissue,
        planted,
    })
}

/// Generates the fixture; identical specs give identical slides.
pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let n_diseased = (spec.diseased_fraction * spec.n_slides as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_slides).collect();
    order.shuffle(&mut seed::rng(seed::derive(spec.seed, "fixture-labels")));
    let mut labels = vec![0u8; spec.n_slides];
    for &i in order.iter().take(n_diseased) {
        labels[i] = 1;
    }
    let slide_root = seed::derive(spec.seed, "fixture-slides");
    let plans: Vec<SlidePlan> = (0..spec.n_slides)
        .into_par_iter()
        .map(|i| render_slide(spec, i, labels[i], seed::derive_index(slide_root, i as u64)))
        .collect::<Result<_>>()?;

    let mut fixture = Fixture {
        slides: Vec::with_capacity(plans.len()),
        tissue: BTreeMap::new(),
        planted: PlantedMap::new(),
    };
    for p in plans {
        if !p.planted.is_empty() {
            fixture.planted.insert(p.slide.id.clone(), p.planted);
        }
        fixture.tissue.insert(p.slide.id.clone(), p.tissue);
        fixture.slides.push(p.slide);
    }
    Ok(fixture)
}
