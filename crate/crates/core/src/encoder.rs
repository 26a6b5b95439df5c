//! Block-structured patch encoders.
//!
//! An encoder is a chain of blocks, each `conv 3×3 (zero padding) → ReLU →
//! f×f average downsample`, followed by global average pooling of the last
//! retained block. Truncating removes trailing blocks; the retained prefix
//! keeps its parameters, so a truncated encoder computes exactly the
//! earlier taps of the full one.
//!
//! Activations are stored channel-last (`(y·W + x)·C + c`) so the inner
//! loops run over contiguous output channels.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed;

pub const TOY_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const TOY_INPUT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// 1-based position in the full encoder.
    pub index: usize,
    pub out_channels: usize,
    pub spatial_downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub name: String,
    pub input_size: usize,
    pub in_channels: usize,
    /// All blocks of the full architecture; the last `truncate_k` are inactive.
    pub blocks: Vec<BlockSpec>,
    pub truncate_k: usize,
    pub seed: u64,
}

/// On-disk form of [`EncoderSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub name: String,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub channels: Vec<usize>,
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    #[serde(default)]
    pub truncate_k: usize,
    #[serde(default)]
    #[serde(with = "crate::seed::toml_bits")]
    pub seed: u64,
}

fn default_input_size() -> usize {
    TOY_INPUT_SIZE
}

fn default_in_channels() -> usize {
    1
}

fn default_downsample() -> usize {
    2
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderSpec::toy(0).to_config()
    }
}

impl EncoderSpec {
    /// Builds and validates a spec from per-block channel counts.
    pub fn new(
        name: impl Into<String>,
        input_size: usize,
        in_channels: usize,
        channels: &[usize],
        downsample: usize,
        seed: u64,
    ) -> Result<Self> {
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| BlockSpec {
                index: i + 1,
                out_channels: c,
                spatial_downsample: downsample,
            })
            .collect();
        let spec = EncoderSpec {
            name: name.into(),
            input_size,
            in_channels,
            blocks,
            truncate_k: 0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The desk-scale encoder: four blocks of (16, 32, 64, 128) channels on
    /// 64×64 grayscale input.
    pub fn toy(seed: u64) -> Self {
        EncoderSpec::new("toy-cnn", TOY_INPUT_SIZE, 1, &TOY_CHANNELS, 2, seed)
            .expect("toy spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("encoder has no blocks"));
        }
        if self.truncate_k >= self.blocks.len() {
            return Err(Error::invalid(format!(
                "truncate_k {} would remove all {} blocks",
                self.truncate_k,
                self.blocks.len()
            )));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(Error::invalid("encoder input must be non-empty"));
        }
        let mut size = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.index != i + 1 {
                return Err(Error::invalid("block indices must run 1, 2, ... in order"));
            }
            if b.out_channels == 0 {
                return Err(Error::invalid(format!("block {} has zero channels", b.index)));
            }
            if b.spatial_downsample == 0 || size % b.spatial_downsample != 0 {
                return Err(Error::invalid(format!(
                    "block {} cannot downsample {size}px by {}",
                    b.index, b.spatial_downsample
                )));
            }
            size /= b.spatial_downsample;
        }
        Ok(())
    }

    pub fn retained_blocks(&self) -> &[BlockSpec] {
        &self.blocks[..self.blocks.len() - self.truncate_k]
    }

    pub fn output_dim(&self) -> usize {
        self.retained_blocks().last().map_or(0, |b| b.out_channels)
    }

    /// Name with a `-minusK` suffix when truncated.
    pub fn display_name(&self) -> String {
        if self.truncate_k == 0 {
            self.name.clone()
        } else {
            format!("{}-minus{}", self.name, self.truncate_k)
        }
    }

    pub fn patch_len(&self) -> usize {
        self.input_size * self.input_size * self.in_channels
    }

    pub fn to_config(&self) -> EncoderConfig {
        EncoderConfig {
            name: self.name.clone(),
            input_size: self.input_size,
            in_channels: self.in_channels,
            channels: self.blocks.iter().map(|b| b.out_channels).collect(),
            downsample: self.blocks.first().map_or(2, |b| b.spatial_downsample),
            truncate_k: self.truncate_k,
            seed: self.seed,
        }
    }

    pub fn from_config(cfg: &EncoderConfig) -> Result<Self> {
        let mut spec = EncoderSpec::new(
            cfg.name.clone(),
            cfg.input_size,
            cfg.in_channels,
            &cfg.channels,
            cfg.downsample,
            cfg.seed,
        )?;
        spec.truncate_k = cfg.truncate_k;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(&self.to_config())
            .map_err(|e| Error::format(format!("cannot serialize encoder spec: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: EncoderConfig =
            toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        EncoderSpec::from_config(&cfg)
    }
}

/// Removes the last `k` blocks of the full architecture.
pub fn truncate(spec: &EncoderSpec, k: usize) -> Result<EncoderSpec> {
    if k >= spec.blocks.len() {
        return Err(Error::invalid(format!(
            "cannot remove {k} of {} blocks",
            spec.blocks.len()
        )));
    }
    let mut out = spec.clone();
    out.truncate_k = k;
    Ok(out)
}

/// Weights `[ky][kx][in][out]` and biases of one 3×3 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            weight: vec![0.0; 9 * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        9 * self.in_channels
    }

    #[inline]
    pub fn w(&self, ky: usize, kx: usize, ic: usize, oc: usize) -> f64 {
        self.weight[((ky * 3 + kx) * self.in_channels + ic) * self.out_channels + oc]
    }
}

/// Per-block convolution parameters. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

impl EncoderParams {
    pub fn zeros(spec: &EncoderSpec) -> Self {
        let mut in_ch = spec.in_channels;
        let layers = spec
            .blocks
            .iter()
            .map(|b| {
                let layer = ConvLayer::zeros(in_ch, b.out_channels);
                in_ch = b.out_channels;
                layer
            })
            .collect();
        EncoderParams { layers }
    }

    /// Uniform in `[-s, s]`, `s = 1/√fan_in`, weights then bias per block,
    /// drawn from `spec.seed`.
    pub fn init(spec: &EncoderSpec) -> Self {
        let mut params = EncoderParams::zeros(spec);
        let mut rng = seed::rng(seed::derive(spec.seed, "encoder-init"));
        for layer in &mut params.layers {
            let s = 1.0 / (layer.fan_in() as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.gen_range(-s..=s);
            }
            for b in &mut layer.bias {
                *b = rng.gen_range(-s..=s);
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.in_channels, l.out_channels))
                .collect(),
        }
    }

    /// Checks that the first `blocks` layers match the spec's shapes.
    pub fn check_compatible(&self, spec: &EncoderSpec) -> Result<()> {
        let retained = spec.retained_blocks();
        if self.layers.len() < retained.len() {
            return Err(Error::invalid(format!(
                "encoder params have {} blocks, spec needs {}",
                self.layers.len(),
                retained.len()
            )));
        }
        let mut in_ch = spec.in_channels;
        for (b, layer) in retained.iter().zip(&self.layers) {
            if layer.in_channels != in_ch
                || layer.out_channels != b.out_channels
                || layer.weight.len() != 9 * in_ch * b.out_channels
                || layer.bias.len() != b.out_channels
            {
                return Err(Error::invalid(format!(
                    "block {} params do not match spec shape {in_ch}->{}",
                    b.index, b.out_channels
                )));
            }
            in_ch = b.out_channels;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &mut self.layers {
            v.extend(l.weight.iter_mut());
            v.extend(l.bias.iter_mut());
        }
        v
    }

    /// `self -= lr · grad`.
    pub fn descend(&mut self, grad: &EncoderParams, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in l.weight.iter_mut().zip(&g.weight) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (l, g) in self.layers.iter_mut().zip(&other.layers) {
            for (w, gw) in l.weight.iter_mut().zip(&g.weight) {
                *w += gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b += gb;
            }
        }
    }
}

/// Pooled activations of every retained block, one matrix per block with a
/// row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockActivations {
    pub blocks: Vec<(usize, Matrix)>,
}

impl BlockActivations {
    pub fn block(&self, index: usize) -> Option<&Matrix> {
        self.blocks.iter().find(|(i, _)| *i == index).map(|(_, m)| m)
    }

    pub fn rows(&self) -> usize {
        self.blocks.first().map_or(0, |(_, m)| m.rows())
    }

    /// Keeps the listed rows of every block.
    pub fn select_rows(&self, indices: &[usize]) -> BlockActivations {
        BlockActivations {
            blocks: self
                .blocks
                .iter()
                .map(|(i, m)| (*i, m.select_rows(indices)))
                .collect(),
        }
    }
}

/// What one block kept from a forward pass for backpropagation.
struct BlockTrace {
    size: usize,
    input: Vec<f64>,
    pre: Vec<f64>,
}

/// Forward-pass record of a single patch.
pub struct PatchTrace {
    blocks: Vec<BlockTrace>,
    out_size: usize,
    features: Vec<f64>,
}

impl PatchTrace {
    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

fn conv3x3_forward(input: &[f64], size: usize, layer: &ConvLayer, out: &mut [f64]) {
    let (ic, oc) = (layer.in_channels, layer.out_channels);
    for y in 0..size {
        for x in 0..size {
            let dst = &mut out[(y * size + x) * oc..(y * size + x + 1) * oc];
            dst.copy_from_slice(&layer.bias);
            for ky in 0..3 {
                let iy = y + ky;
                if iy == 0 || iy > size {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..3 {
                    let ix = x + kx;
                    if ix == 0 || ix > size {
                        continue;
                    }
                    let ix = ix - 1;
                    let src = &input[(iy * size + ix) * ic..(iy * size + ix + 1) * ic];
                    let wbase = (ky * 3 + kx) * ic * oc;
                    for (c, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &layer.weight[wbase + c * oc..wbase + (c + 1) * oc];
                        for (d, &w) in dst.iter_mut().zip(wrow) {
                            *d += v * w;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients into `grad` and, when requested,
/// writes the input gradient into `d_input` (overwritten).
fn conv3x3_backward(
    input: &[f64],
    size: usize,
    layer: &ConvLayer,
    d_out: &[f64],
    grad: &mut ConvLayer,
    mut d_input: Option<&mut [f64]>,
) {
    let (ic, oc) = (layer.in_channels, layer.out_channels);
    if let Some(d) = d_input.as_deref_mut() {
        d.fill(0.0);
    }
    for y in 0..size {
        for x in 0..size {
            let g = &d_out[(y * size + x) * oc..(y * size + x + 1) * oc];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, &gv) in grad.bias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..3 {
                let iy = y + ky;
                if iy == 0 || iy > size {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..3 {
                    let ix = x + kx;
                    if ix == 0 || ix > size {
                        continue;
                    }
                    let ix = ix - 1;
                    let pix = (iy * size + ix) * ic;
                    let wbase = (ky * 3 + kx) * ic * oc;
                    for c in 0..ic {
                        let v = input[pix + c];
                        let range = wbase + c * oc..wbase + (c + 1) * oc;
                        if v != 0.0 {
                            for (gw, &gv) in grad.weight[range.clone()].iter_mut().zip(g) {
                                *gw += v * gv;
                            }
                        }
                        if let Some(d) = d_input.as_deref_mut() {
                            let wrow = &layer.weight[range];
                            let mut acc = 0.0;
                            for (&w, &gv) in wrow.iter().zip(g) {
                                acc += w * gv;
                            }
                            d[pix + c] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn relu_pool(pre: &[f64], size: usize, channels: usize, factor: usize) -> Vec<f64> {
    let out_size = size / factor;
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; out_size * out_size * channels];
    for oy in 0..out_size {
        for ox in 0..out_size {
            let dst = &mut out[(oy * out_size + ox) * channels..(oy * out_size + ox + 1) * channels];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = ((oy * factor + dy) * size + ox * factor + dx) * channels;
                    for (d, &v) in dst.iter_mut().zip(&pre[p..p + channels]) {
                        if v > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
    }
    out
}

fn global_mean(map: &[f64], size: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for px in map.chunks_exact(channels).take(size * size) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (size * size) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn check_patch(spec: &EncoderSpec, patch: &[f64]) -> Result<()> {
    if patch.len() != spec.patch_len() {
        return Err(Error::invalid(format!(
            "patch has {} values, encoder expects {}x{}x{}",
            patch.len(),
            spec.input_size,
            spec.input_size,
            spec.in_channels
        )));
    }
    Ok(())
}

/// Runs one patch through the retained blocks. Returns the pooled tap of
/// every block and, when `keep` is set, the trace for backpropagation.
fn forward_patch(
    spec: &EncoderSpec,
    params: &EncoderParams,
    patch: &[f64],
    keep: bool,
) -> (Vec<Vec<f64>>, Option<PatchTrace>) {
    let mut size = spec.input_size;
    let mut act = patch.to_vec();
    let mut taps = Vec::with_capacity(spec.retained_blocks().len());
    let mut traces = Vec::new();
    for (b, layer) in spec.retained_blocks().iter().zip(&params.layers) {
        let mut pre = vec![0.0; size * size * layer.out_channels];
        conv3x3_forward(&act, size, layer, &mut pre);
        let pooled = relu_pool(&pre, size, layer.out_channels, b.spatial_downsample);
        let next_size = size / b.spatial_downsample;
        taps.push(global_mean(&pooled, next_size, layer.out_channels));
        let input = std::mem::replace(&mut act, pooled);
        if keep {
            traces.push(BlockTrace { size, input, pre });
        }
        size = next_size;
    }
    let trace = keep.then(|| PatchTrace {
        blocks: traces,
        out_size: size,
        features: taps.last().cloned().unwrap_or_default(),
    });
    (taps, trace)
}

fn check_inputs(spec: &EncoderSpec, params: &EncoderParams, patches: &[Vec<f64>]) -> Result<()> {
    spec.validate()?;
    params.check_compatible(spec)?;
    patches.iter().try_for_each(|p| check_patch(spec, p))
}

/// Feature matrix (`n × output_dim`) of a patch batch.
pub fn encode(spec: &EncoderSpec, params: &EncoderParams, patches: &[Vec<f64>]) -> Result<Matrix> {
    check_inputs(spec, params, patches)?;
    let d = spec.output_dim();
    let rows: Vec<Vec<f64>> = patches
        .par_iter()
        .map(|p| forward_patch(spec, params, p, false).0.pop().unwrap_or_default())
        .collect();
    let mut data = Vec::with_capacity(rows.len() * d);
    rows.iter().for_each(|r| data.extend_from_slice(r));
    Matrix::from_vec(rows.len(), d, data)
}

/// Pooled activations of every retained block; the last equals [`encode`].
pub fn tap_blocks(spec: &EncoderSpec, params: &EncoderParams, patches: &[Vec<f64>]) -> Result<BlockActivations> {
    check_inputs(spec, params, patches)?;
    let per_patch: Vec<Vec<Vec<f64>>> = patches
        .par_iter()
        .map(|p| forward_patch(spec, params, p, false).0)
        .collect();
    let blocks = spec
        .retained_blocks()
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let mut data = Vec::with_capacity(patches.len() * b.out_channels);
            per_patch.iter().for_each(|taps| data.extend_from_slice(&taps[bi]));
            let m = Matrix::from_vec(patches.len(), b.out_channels, data).expect("tap shape");
            (b.index, m)
        })
        .collect();
    Ok(BlockActivations { blocks })
}

/// Forward pass of one patch keeping what [`backward_patch`] needs.
pub fn forward_traced(spec: &EncoderSpec, params: &EncoderParams, patch: &[f64]) -> Result<PatchTrace> {
    spec.validate()?;
    params.check_compatible(spec)?;
    check_patch(spec, patch)?;
    Ok(forward_patch(spec, params, patch, true).1.expect("trace kept"))
}

/// Backpropagates `d_features` (gradient of a scalar w.r.t. the patch's
/// feature vector) and accumulates parameter gradients into `grad`.
pub fn backward_patch(
    spec: &EncoderSpec,
    params: &EncoderParams,
    trace: &PatchTrace,
    d_features: &[f64],
    grad: &mut EncoderParams,
) {
    let retained = spec.retained_blocks();
    let last = retained.len() - 1;
    let c_last = retained[last].out_channels;
    debug_assert_eq!(d_features.len(), c_last);

    // global mean pool: every output pixel gets d / (H·W)
    let n = (trace.out_size * trace.out_size) as f64;
    let mut d_pooled: Vec<f64> = (0..trace.out_size * trace.out_size)
        .flat_map(|_| d_features.iter().map(move |g| g / n))
        .collect();

    for bi in (0..=last).rev() {
        let b = &retained[bi];
        let layer = &params.layers[bi];
        let t = &trace.blocks[bi];
        let oc = layer.out_channels;
        let f = b.spatial_downsample;
        let out_size = t.size / f;
        let scale = 1.0 / (f * f) as f64;

        // through average pool and ReLU (gradient 0 at exactly 0)
        let mut d_pre = vec![0.0; t.size * t.size * oc];
        for oy in 0..out_size {
            for ox in 0..out_size {
                let g = &d_pooled[(oy * out_size + ox) * oc..(oy * out_size + ox + 1) * oc];
                for dy in 0..f {
                    for dx in 0..f {
                        let p = ((oy * f + dy) * t.size + ox * f + dx) * oc;
                        for c in 0..oc {
                            if t.pre[p + c] > 0.0 {
                                d_pre[p + c] = g[c] * scale;
                            }
                        }
                    }
                }
            }
        }

        if bi == 0 {
            conv3x3_backward(&t.input, t.size, layer, &d_pre, &mut grad.layers[bi], None);
        } else {
            let mut d_in = vec![0.0; t.input.len()];
            conv3x3_backward(&t.input, t.size, layer, &d_pre, &mut grad.layers[bi], Some(&mut d_in));
            d_pooled = d_in;
        }
    }
}
