//! Stage orchestration over an on-disk layout.
//!
//! ```text
//! <slides_dir>/slides.csv          slide_id,file,label,magnification
//! <slides_dir>/ground_truth.csv    planted cells (synthetic fixtures only)
//! <store_dir>/features.histoftr    frozen features, encoded or imported
//! <output_dir>/manifests/<id>.csv  tissue patches per slide
//! <output_dir>/...                 models, logs and stage CSVs
//! ```
//!
//! Every stage reads and validates all of its inputs before it writes
//! anything, holds a lock file in the directory it writes to, and derives
//! its seed from the single top-level seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cka::{block_similarity, DiagonalSummary, DEFAULT_SAMPLES};
use crate::encoder::{tap_blocks, truncate, EncoderConfig, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::fixture::parse_ground_truth;
use crate::eval::{auc, generate_fixture, split, FixtureSpec, PlantedMap, Split, SplitSpec};
use crate::feature_store::{read_encoder_params, read_store, read_store_file, write_encoder_params, write_store, FeatureMatrix};
use crate::finetune::{finetune, sample_bag, selection_precision, slide_scores, FinetuneConfig, SlidePatches};
use crate::linalg::Matrix;
use crate::mil_head::{evaluate_auc, log_csv, train_head, AttentionParams, TrainConfig};
use crate::seed;
use crate::slide::{Magnification, Raster, SlideRecord};
use crate::tiling::{extract_manifest, PatchManifest, TilingConfig};

pub const SLIDE_TABLE: &str = "slides.csv";
pub const GROUND_TRUTH: &str = "ground_truth.csv";
pub const FEATURE_STORE: &str = "features.histoftr";
pub const MANIFEST_DIR: &str = "manifests";
pub const ENCODER_SPEC: &str = "encoder.toml";
pub const ENCODER_FROZEN: &str = "encoder_frozen.params";
pub const ENCODER_TUNED: &str = "encoder_tuned.params";
pub const HEAD_FROZEN: &str = "head.histohed";
pub const HEAD_TUNED: &str = "head_tuned.histohed";
pub const SPLIT_CSV: &str = "split.csv";
pub const HEAD_LOG: &str = "head_log.csv";
pub const HEAD_EVAL: &str = "head_eval.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const FINETUNE_EVAL: &str = "finetune_eval.csv";
pub const CKA_STEM: &str = "cka";
pub const TRUNCATION_CSV: &str = "truncation.csv";
pub const REPORT_CSV: &str = "report.csv";
const LOCK_FILE: &str = ".wsi-mil.lock";

/// Environment variables that override configured paths.
pub const ENV_SLIDES_DIR: &str = "WSI_MIL_SLIDES_DIR";
pub const ENV_STORE_DIR: &str = "WSI_MIL_STORE_DIR";
pub const ENV_OUTPUT_DIR: &str = "WSI_MIL_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub slides_dir: PathBuf,
    pub store_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            slides_dir: "data/slides".into(),
            store_dir: "data/store".into(),
            output_dir: "data/out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSection {
    pub n_slides: usize,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub diseased_fraction: f64,
    pub planted_fraction: f64,
    pub noise_std: f64,
}

impl Default for FixtureSection {
    fn default() -> Self {
        let d = FixtureSpec::default();
        FixtureSection {
            n_slides: d.n_slides,
            width: d.width,
            height: d.height,
            patch_size: d.patch_size,
            diseased_fraction: d.diseased_fraction,
            planted_fraction: d.planted_fraction,
            noise_std: d.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingSection {
    pub patch_size: usize,
    /// Defaults to `patch_size`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub min_tissue_fraction: f64,
}

impl Default for TilingSection {
    /// Tiles at the toy encoder's input size rather than the 512-pixel
    /// tiling default, so patches reach the encoder unresampled.
    fn default() -> Self {
        TilingSection {
            patch_size: crate::encoder::TOY_INPUT_SIZE,
            stride: None,
            min_tissue_fraction: TilingConfig::default().min_tissue_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub name: String,
    pub input_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub downsample: usize,
    pub truncate_k: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderSpec::toy(0).to_config();
        EncoderSection {
            name: c.name,
            input_size: c.input_size,
            in_channels: c.in_channels,
            channels: c.channels,
            downsample: c.downsample,
            truncate_k: c.truncate_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            hidden: d.hidden,
            patience: d.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub static_topk: bool,
    pub max_grad_norm: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        FinetuneSection {
            k: d.k,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            static_topk: d.static_topk,
            max_grad_norm: d.max_grad_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub fractions: [f64; 3],
    pub stratified: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitSpec::default();
        SplitSection {
            fractions: d.fractions,
            stratified: d.stratified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CkaSection {
    pub samples: usize,
}

impl Default for CkaSection {
    fn default() -> Self {
        CkaSection {
            samples: DEFAULT_SAMPLES,
        }
    }
}

/// Whole-run configuration. Sections carry no seeds of their own; every
/// stage seed is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(with = "crate::seed::toml_bits")]
    pub seed: u64,
    pub paths: PathsConfig,
    pub fixture: FixtureSection,
    pub tiling: TilingSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub split: SplitSection,
    pub cka: CkaSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the path environment variables, reading through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, slot) in [
            (ENV_SLIDES_DIR, &mut self.paths.slides_dir),
            (ENV_STORE_DIR, &mut self.paths.store_dir),
            (ENV_OUTPUT_DIR, &mut self.paths.output_dir),
        ] {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                *slot = PathBuf::from(v);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fixture_spec().validate()?;
        self.tiling_config().validate()?;
        self.encoder_spec()?;
        self.train_config().validate()?;
        self.finetune_config().validate()?;
        self.split_spec().validate()?;
        if self.cka.samples < 2 {
            return Err(Error::invalid("cka.samples must be at least 2"));
        }
        Ok(())
    }

    pub fn fixture_spec(&self) -> FixtureSpec {
        let f = &self.fixture;
        FixtureSpec {
            n_slides: f.n_slides,
            width: f.width,
            height: f.height,
            patch_size: f.patch_size,
            diseased_fraction: f.diseased_fraction,
            planted_fraction: f.planted_fraction,
            noise_std: f.noise_std,
            seed: seed::derive(self.seed, "fixture"),
            ..FixtureSpec::default()
        }
    }

    pub fn tiling_config(&self) -> TilingConfig {
        TilingConfig {
            patch_size: self.tiling.patch_size,
            stride: self.tiling.stride.unwrap_or(self.tiling.patch_size),
            min_tissue_fraction: self.tiling.min_tissue_fraction,
        }
    }

    /// The full (untruncated) encoder is `truncate(spec, 0)`; the spec
    /// returned here carries the configured `truncate_k`.
    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let e = &self.encoder;
        EncoderSpec::from_config(&EncoderConfig {
            name: e.name.clone(),
            input_size: e.input_size,
            in_channels: e.in_channels,
            channels: e.channels.clone(),
            downsample: e.downsample,
            truncate_k: e.truncate_k,
            seed: seed::derive(self.seed, "encoder"),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            seed: seed::derive(self.seed, "train-head"),
            hidden: t.hidden,
            patience: t.patience,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            k: f.k,
            learning_rate: f.learning_rate,
            epochs: f.epochs,
            seed: seed::derive(self.seed, "finetune"),
            static_topk: f.static_topk,
            max_grad_norm: f.max_grad_norm,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            fractions: self.split.fractions,
            seed: seed::derive(self.seed, "split"),
            stratified: self.split.stratified,
        }
    }

    fn slides_dir(&self) -> &Path {
        &self.paths.slides_dir
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }

    fn store_path(&self) -> PathBuf {
        self.paths.store_dir.join(FEATURE_STORE)
    }

    fn manifest_path(&self, slide_id: &str) -> PathBuf {
        self.paths.output_dir.join(MANIFEST_DIR).join(format!("{slide_id}.csv"))
    }
}

/// One row of `slides.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideEntry {
    pub id: String,
    /// Relative to the slides directory.
    pub file: PathBuf,
    pub label: u8,
    pub magnification: Magnification,
}

fn check_slide_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("slide id {id:?} must be [A-Za-z0-9_.-]+")))
    }
}

pub fn parse_slide_table(text: &str) -> Result<Vec<SlideEntry>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().trim();
    if header != "slide_id,file,label,magnification" {
        return Err(Error::format(format!("unexpected slide table header {header:?}")));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::format(format!("slide table line {} has {} fields", i + 2, f.len())));
        }
        check_slide_id(f[0])?;
        if !seen.insert(f[0].to_string()) {
            return Err(Error::invalid(format!("duplicate slide id {}", f[0])));
        }
        let label = match f[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::invalid(format!("slide {}: label {other:?} is not 0 or 1", f[0]))),
        };
        out.push(SlideEntry {
            id: f[0].to_string(),
            file: PathBuf::from(f[1]),
            label,
            magnification: f[3].parse()?,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid("slide table lists no slides"));
    }
    Ok(out)
}

pub fn read_slide_table(slides_dir: &Path) -> Result<Vec<SlideEntry>> {
    let p = slides_dir.join(SLIDE_TABLE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    parse_slide_table(&text)
}

fn load_slides(cfg: &PipelineConfig, table: &[SlideEntry]) -> Result<Vec<SlideRecord>> {
    table
        .par_iter()
        .map(|e| {
            let raster = Raster::load(&cfg.slides_dir().join(&e.file))?;
            SlideRecord::new(e.id.clone(), raster, e.magnification, e.label)
        })
        .collect()
}

fn load_manifests(cfg: &PipelineConfig, table: &[SlideEntry]) -> Result<Vec<PatchManifest>> {
    table
        .iter()
        .map(|e| {
            let m = PatchManifest::load(&cfg.manifest_path(&e.id))?;
            if m.slide_id != e.id {
                return Err(Error::data(format!("manifest for {} names slide {}", e.id, m.slide_id)));
            }
            Ok(m)
        })
        .collect()
}

fn load_patches(cfg: &PipelineConfig, table: &[SlideEntry], input_size: usize) -> Result<BTreeMap<String, SlidePatches>> {
    let manifests = load_manifests(cfg, table)?;
    let slides = load_slides(cfg, table)?;
    slides
        .iter()
        .zip(&manifests)
        .map(|(s, m)| Ok((s.id.clone(), SlidePatches::from_manifest(s, m, input_size)?)))
        .collect()
}

fn labels_of(table: &[SlideEntry]) -> Vec<(String, u8)> {
    table.iter().map(|e| (e.id.clone(), e.label)).collect()
}

fn split_csv(s: &Split) -> String {
    let mut rows: Vec<(&str, &str)> = Vec::new();
    for (name, ids) in ["train", "val", "test"].iter().zip(s.parts()) {
        rows.extend(ids.iter().map(|id| (id.as_str(), *name)));
    }
    rows.sort();
    let mut out = String::from("slide_id,split\n");
    for (id, name) in rows {
        let _ = writeln!(out, "{id},{name}");
    }
    out
}

/// Exclusive claim on a directory; released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |x| format!("{x:.6}"))
}

fn scores_auc(scores: &[(f64, u8)]) -> Result<Option<f64>> {
    if scores.iter().any(|s| s.1 == 1) && scores.iter().any(|s| s.1 == 0) {
        Ok(Some(auc(scores)?))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSummary {
    pub slides: usize,
    pub diseased: usize,
    pub planted_cells: usize,
}

/// Writes a synthetic slide set into the slides directory.
pub fn run_fixture(cfg: &PipelineConfig) -> Result<FixtureSummary> {
    let spec = cfg.fixture_spec();
    spec.validate()?;
    let fixture = generate_fixture(&spec)?;
    let _lock = DirLock::acquire(cfg.slides_dir())?;
    fixture.write(cfg.slides_dir())?;
    Ok(FixtureSummary {
        slides: fixture.slides.len(),
        diseased: fixture.slides.iter().filter(|s| s.label == 1).count(),
        planted_cells: fixture.planted.values().map(BTreeSet::len).sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSummary {
    pub slides: usize,
    pub patches: usize,
    pub empty_slides: usize,
}

/// Writes one patch manifest per slide.
pub fn run_tile(cfg: &PipelineConfig) -> Result<TileSummary> {
    let tiling = cfg.tiling_config();
    tiling.validate()?;
    let table = read_slide_table(cfg.slides_dir())?;
    let slides = load_slides(cfg, &table)?;
    let manifests = slides
        .par_iter()
        .map(|s| extract_manifest(s, &tiling))
        .collect::<Result<Vec<_>>>()?;
    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    for m in &manifests {
        write(&cfg.manifest_path(&m.slide_id), m.to_text())?;
    }
    Ok(TileSummary {
        slides: manifests.len(),
        patches: manifests.iter().map(PatchManifest::len).sum(),
        empty_slides: manifests.iter().filter(|m| m.is_empty()).count(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeSummary {
    pub encoder: String,
    pub dim: usize,
    pub slides: usize,
    pub patches: usize,
    /// Slides left out of the store for having no patches.
    pub skipped: usize,
}

/// Encodes every manifest patch with the seeded toy encoder and writes
/// the feature store, the encoder spec and its parameters.
pub fn run_encode(cfg: &PipelineConfig) -> Result<EncodeSummary> {
    let spec = cfg.encoder_spec()?;
    let table = read_slide_table(cfg.slides_dir())?;
    let patches = load_patches(cfg, &table, spec.input_size)?;
    let params = EncoderParams::init(&spec);
    let name = spec.display_name();
    let records = table
        .iter()
        .filter(|e| !patches[&e.id].is_empty())
        .map(|e| {
            Ok(FeatureMatrix {
                slide_id: e.id.clone(),
                label: e.label,
                encoder_name: name.clone(),
                data: crate::encoder::encode(&spec, &params, &patches[&e.id].patches)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    fs::create_dir_all(&cfg.paths.store_dir).map_err(|e| Error::io(&cfg.paths.store_dir, e))?;
    write_store(&records, &cfg.store_path())?;
    spec.save(&cfg.out(ENCODER_SPEC))?;
    write_encoder_params(&name, &params, &cfg.out(ENCODER_FROZEN))?;
    Ok(EncodeSummary {
        encoder: name,
        dim: spec.output_dim(),
        slides: records.len(),
        patches: records.iter().map(FeatureMatrix::n_patches).sum(),
        skipped: table.len() - records.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportSummary {
    pub encoder: String,
    pub dim: usize,
    pub slides: usize,
}

/// Validates an externally written store against the slide table and
/// manifests, then installs it as the run's feature store.
pub fn run_import(cfg: &PipelineConfig, store: &Path) -> Result<ImportSummary> {
    let file = read_store_file(store)?;
    let table = read_slide_table(cfg.slides_dir())?;
    let by_id: BTreeMap<&str, &SlideEntry> = table.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut seen = BTreeSet::new();
    for r in &file.records {
        let entry = by_id
            .get(r.slide_id.as_str())
            .ok_or_else(|| Error::data(format!("store slide {} is not in the slide table", r.slide_id)))?;
        if !seen.insert(r.slide_id.as_str()) {
            return Err(Error::data(format!("store lists slide {} twice", r.slide_id)));
        }
        if entry.label != r.label {
            return Err(Error::data(format!(
                "slide {}: store label {} but slide table says {}",
                r.slide_id, r.label, entry.label
            )));
        }
        let m = PatchManifest::load(&cfg.manifest_path(&r.slide_id))?;
        if m.len() != r.n_patches() {
            return Err(Error::data(format!(
                "slide {}: store has {} rows, manifest has {} entries",
                r.slide_id,
                r.n_patches(),
                m.len()
            )));
        }
    }
    let bytes = fs::read(store).map_err(|e| Error::io(store, e))?;
    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    write(&cfg.store_path(), bytes)?;
    Ok(ImportSummary {
        encoder: file.encoder_name,
        dim: file.dim,
        slides: file.records.len(),
    })
}

fn split_records(records: Vec<FeatureMatrix>, s: &Split) -> [Vec<FeatureMatrix>; 3] {
    let mut by_id: BTreeMap<String, FeatureMatrix> = records.into_iter().map(|r| (r.slide_id.clone(), r)).collect();
    s.parts()
        .map(|ids| ids.iter().filter_map(|id| by_id.remove(id)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSummary {
    pub encoder: String,
    pub best_epoch: usize,
    pub train_auc: Option<f64>,
    pub val_auc: Option<f64>,
    pub test_auc: Option<f64>,
}

/// Trains the attention head on the feature store and evaluates it on
/// the train, validation and test splits.
pub fn run_train_head(cfg: &PipelineConfig) -> Result<HeadSummary> {
    let tc = cfg.train_config();
    tc.validate()?;
    let table = read_slide_table(cfg.slides_dir())?;
    let records = read_store(&cfg.store_path())?;
    let encoder = records.first().map(|r| r.encoder_name.clone()).unwrap_or_default();
    let sp = split(&labels_of(&table), &cfg.split_spec())?;
    let [train, val, test] = split_records(records, &sp);
    let trained = train_head(&train, &val, &tc)?;
    let train_auc = evaluate_auc(&trained.params, &train)?;
    let val_auc = evaluate_auc(&trained.params, &val)?;
    let test_auc = evaluate_auc(&trained.params, &test)?;

    let mut eval = String::from("split,n_slides,auc\n");
    for (name, bags, a) in [("train", &train, train_auc), ("val", &val, val_auc), ("test", &test, test_auc)] {
        let _ = writeln!(eval, "{name},{},{}", bags.len(), fmt_opt(a));
    }
    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    write(&cfg.out(SPLIT_CSV), split_csv(&sp))?;
    trained.params.save(&cfg.out(HEAD_FROZEN))?;
    write(&cfg.out(HEAD_LOG), log_csv(&trained.log))?;
    write(&cfg.out(HEAD_EVAL), eval)?;
    Ok(HeadSummary {
        encoder,
        best_epoch: trained.best_epoch,
        train_auc,
        val_auc,
        test_auc,
    })
}

/// The toy encoder written by `encode`, checked against the store.
fn load_toy_encoder(cfg: &PipelineConfig) -> Result<(EncoderSpec, EncoderParams)> {
    let spec = EncoderSpec::load(&cfg.out(ENCODER_SPEC))?;
    let (name, params) = read_encoder_params(&cfg.out(ENCODER_FROZEN))?;
    params.check_compatible(&spec)?;
    if name != spec.display_name() {
        return Err(Error::data(format!(
            "encoder parameters belong to {name}, spec is {}",
            spec.display_name()
        )));
    }
    let store = read_store_file(&cfg.store_path())?;
    if store.encoder_name != name {
        return Err(Error::invalid(format!(
            "feature store was produced by {}; fine-tuning needs the toy encoder {name} (run `encode`)",
            store.encoder_name
        )));
    }
    Ok((spec, params))
}

fn read_planted(cfg: &PipelineConfig) -> Result<Option<PlantedMap>> {
    let p = cfg.slides_dir().join(GROUND_TRUTH);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    parse_ground_truth(&text).map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSummary {
    pub frozen_test_auc: Option<f64>,
    pub tuned_test_auc: Option<f64>,
    pub frozen_precision: Option<f64>,
    pub tuned_precision: Option<f64>,
    pub final_val_auc: Option<f64>,
    pub skipped: usize,
}

/// Jointly fine-tunes the toy encoder and the head on top-k sub-bags and
/// compares the result with the frozen stage on the test split.
pub fn run_finetune(cfg: &PipelineConfig) -> Result<FinetuneSummary> {
    let fc = cfg.finetune_config();
    fc.validate()?;
    let (spec, encoder) = load_toy_encoder(cfg)?;
    let head = AttentionParams::load(&cfg.out(HEAD_FROZEN))?;
    let table = read_slide_table(cfg.slides_dir())?;
    let planted = read_planted(cfg)?;
    let patches = load_patches(cfg, &table, spec.input_size)?;
    let sp = split(&labels_of(&table), &cfg.split_spec())?;
    let [train, val, test] = sp.parts().map(|ids| ids.iter().map(|id| patches[id].clone()).collect::<Vec<_>>());

    let result = finetune(&spec, &encoder, &head, &train, &val, &fc)?;
    let precision = |enc: &EncoderParams, hd: &AttentionParams| -> Result<Option<f64>> {
        let Some(planted) = &planted else { return Ok(None) };
        let bags = test
            .iter()
            .filter(|s| s.label == 1 && !s.is_empty())
            .map(|s| sample_bag(&spec, enc, hd, s, fc.k))
            .collect::<Result<Vec<_>>>()?;
        Ok(selection_precision(&bags, planted))
    };
    let summary = FinetuneSummary {
        frozen_test_auc: scores_auc(&slide_scores(&spec, &encoder, &head, &test)?)?,
        tuned_test_auc: scores_auc(&slide_scores(&spec, &result.encoder, &result.head, &test)?)?,
        frozen_precision: precision(&encoder, &head)?,
        tuned_precision: precision(&result.encoder, &result.head)?,
        final_val_auc: result.log.last().and_then(|e| e.val_auc),
        skipped: result.skipped,
    };

    let mut eval = String::from("metric,value\n");
    for (k, v) in [
        ("frozen_test_auc", fmt_opt(summary.frozen_test_auc)),
        ("tuned_test_auc", fmt_opt(summary.tuned_test_auc)),
        (&*format!("frozen_top{}_precision", fc.k), fmt_opt(summary.frozen_precision)),
        (&*format!("tuned_top{}_precision", fc.k), fmt_opt(summary.tuned_precision)),
        ("skipped_slides", summary.skipped.to_string()),
    ] {
        let _ = writeln!(eval, "{k},{v}");
    }
    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    write_encoder_params(&spec.display_name(), &result.encoder, &cfg.out(ENCODER_TUNED))?;
    result.head.save(&cfg.out(HEAD_TUNED))?;
    write(&cfg.out(FINETUNE_LOG), result.log_csv())?;
    write(&cfg.out(FINETUNE_EVAL), eval)?;
    Ok(summary)
}

/// Seeded sample of up to `n` patches from `slides`, in (slide, index) order.
fn sample_patches(slides: &[SlidePatches], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let all: Vec<&Vec<f64>> = slides.iter().flat_map(|s| s.patches.iter()).collect();
    if all.len() <= n {
        return all.into_iter().cloned().collect();
    }
    let mut idx = sample(&mut seed::rng(seed), all.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i].clone()).collect()
}

/// Block-by-block CKA between the frozen and fine-tuned encoders on a
/// seeded sample of validation patches.
pub fn run_cka(cfg: &PipelineConfig) -> Result<DiagonalSummary> {
    if cfg.cka.samples < 2 {
        return Err(Error::invalid("cka.samples must be at least 2"));
    }
    let (spec, frozen) = load_toy_encoder(cfg)?;
    let (name, tuned) = read_encoder_params(&cfg.out(ENCODER_TUNED))?;
    tuned.check_compatible(&spec)?;
    let table = read_slide_table(cfg.slides_dir())?;
    let sp = split(&labels_of(&table), &cfg.split_spec())?;
    let val_table: Vec<SlideEntry> = table.iter().filter(|e| sp.val.contains(&e.id)).cloned().collect();
    let patches = load_patches(cfg, &val_table, spec.input_size)?;
    let val: Vec<SlidePatches> = val_table.iter().map(|e| patches[&e.id].clone()).collect();
    let sample = sample_patches(&val, cfg.cka.samples, seed::derive(cfg.seed, "cka"));
    if sample.len() < 2 {
        return Err(Error::invalid("validation slides hold fewer than two patches"));
    }
    let a = tap_blocks(&spec, &frozen, &sample)?;
    let b = tap_blocks(&spec, &tuned, &sample)?;
    let report = block_similarity(&format!("{name}-frozen"), &a, &format!("{name}-tuned"), &b)?;
    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    report.save(&cfg.paths.output_dir, CKA_STEM)?;
    Ok(report.summary())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationRow {
    pub encoder: String,
    pub truncate_k: usize,
    pub dim: usize,
    pub val_auc: Option<f64>,
    pub test_auc: Option<f64>,
}

pub fn truncation_csv(rows: &[TruncationRow]) -> String {
    let mut s = String::from("encoder,truncate_k,dim,val_auc,test_auc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.encoder,
            r.truncate_k,
            r.dim,
            fmt_opt(r.val_auc),
            fmt_opt(r.test_auc)
        );
    }
    s
}

/// Retrains the head on every truncation level of the frozen toy encoder.
/// All levels come from one tapped forward pass, since a truncated
/// encoder's output is the corresponding block tap of the full one.
pub fn run_truncate_eval(cfg: &PipelineConfig) -> Result<Vec<TruncationRow>> {
    let tc = cfg.train_config();
    tc.validate()?;
    let (spec, params) = load_toy_encoder(cfg)?;
    let full = truncate(&spec, 0)?;
    let table = read_slide_table(cfg.slides_dir())?;
    let patches = load_patches(cfg, &table, full.input_size)?;
    let sp = split(&labels_of(&table), &cfg.split_spec())?;
    let taps: BTreeMap<&str, _> = table
        .iter()
        .filter(|e| !patches[&e.id].is_empty())
        .map(|e| Ok((e.id.as_str(), tap_blocks(&full, &params, &patches[&e.id].patches)?)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(full.blocks.len());
    for k in 0..full.blocks.len() {
        let t = truncate(&full, k)?;
        let block = t.retained_blocks().last().expect("at least one block").index;
        let bags = |ids: &[String]| -> Vec<FeatureMatrix> {
            ids.iter()
                .filter_map(|id| {
                    let m: &Matrix = taps.get(id.as_str())?.block(block)?;
                    Some(FeatureMatrix {
                        slide_id: id.clone(),
                        label: patches[id].label,
                        encoder_name: t.display_name(),
                        data: m.clone(),
                    })
                })
                .collect()
        };
        let (train, val, test) = (bags(&sp.train), bags(&sp.val), bags(&sp.test));
        let trained = train_head(&train, &val, &tc)?;
        rows.push(TruncationRow {
            encoder: t.display_name(),
            truncate_k: k,
            dim: t.output_dim(),
            val_auc: evaluate_auc(&trained.params, &val)?,
            test_auc: evaluate_auc(&trained.params, &test)?,
        });
    }
    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    write(&cfg.out(TRUNCATION_CSV), truncation_csv(&rows))?;
    Ok(rows)
}

/// Merges every stage CSV present in the output directory into
/// `section,key,value` rows.
pub fn run_report(cfg: &PipelineConfig) -> Result<String> {
    let read = |name: &str| -> Result<Option<String>> {
        let p = cfg.out(name);
        match fs::read_to_string(&p) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&p, e)),
        }
    };
    let mut out = String::from("section,key,value\n");
    let mut found = false;
    if let Some(t) = read(HEAD_EVAL)? {
        found = true;
        for line in t.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 3 {
                let _ = writeln!(out, "frozen,{}_auc,{}", f[0], f[2]);
            }
        }
    }
    if let Some(t) = read(FINETUNE_EVAL)? {
        found = true;
        for line in t.lines().skip(1) {
            let _ = writeln!(out, "finetune,{line}");
        }
    }
    if let Some(t) = read(&format!("{CKA_STEM}.json"))? {
        found = true;
        let s: DiagonalSummary = serde_json::from_str(&t).map_err(|e| Error::format(format!("cka.json: {e}")))?;
        for (b, v) in s.blocks.iter().zip(&s.diagonal) {
            let _ = writeln!(out, "cka,block{b},{v:.9}");
        }
    }
    if let Some(t) = read(TRUNCATION_CSV)? {
        found = true;
        for line in t.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 5 {
                let _ = writeln!(out, "truncation,{}_test_auc,{}", f[0], f[4]);
            }
        }
    }
    if !found {
        return Err(Error::invalid(format!(
            "no stage outputs in {} to report on",
            cfg.paths.output_dir.display()
        )));
    }
    let _lock = DirLock::acquire(&cfg.paths.output_dir)?;
    write(&cfg.out(REPORT_CSV), &out)?;
    Ok(out)
}
