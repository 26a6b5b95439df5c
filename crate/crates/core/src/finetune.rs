//! Second stage: joint fine-tuning of encoder and head on the top-k
//! attended patches of each slide.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward_patch, encode, forward_traced, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::{auc, PlantedMap};
use crate::linalg::Matrix;
use crate::mil_head::{attend_backward, attend_forward, AttentionParams};
use crate::seed;
use crate::slide::SlideRecord;
use crate::tiling::PatchManifest;

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;

/// Patches per task when accumulating encoder gradients; fixed so the
/// summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Select patches once from the initial parameters instead of at the
    /// start of every epoch.
    pub static_topk: bool,
    /// Joint gradient norm above which a step is rescaled; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            k: DEFAULT_K,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 2,
            seed: 0,
            static_topk: false,
            max_grad_norm: 1.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(Error::invalid("max_grad_norm must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Every manifest patch of one slide, cropped to encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePatches {
    pub slide_id: String,
    pub label: u8,
    /// Patch origins, in manifest order.
    pub positions: Vec<(usize, usize)>,
    pub patches: Vec<Vec<f64>>,
}

impl SlidePatches {
    /// Crops each manifest window and box-averages it to `input_size`.
    pub fn from_manifest(slide: &SlideRecord, manifest: &PatchManifest, input_size: usize) -> Result<Self> {
        if manifest.slide_id != slide.id {
            return Err(Error::invalid(format!(
                "manifest for {} paired with slide {}",
                manifest.slide_id, slide.id
            )));
        }
        let size = manifest.config.patch_size;
        let patches = manifest
            .entries
            .iter()
            .map(|e| slide.raster.crop_unit_resized(e.x, e.y, size, input_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(SlidePatches {
            slide_id: slide.id.clone(),
            label: slide.label,
            positions: manifest.entries.iter().map(|e| (e.x, e.y)).collect(),
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// The top-k sub-bag of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBag {
    pub slide_id: String,
    pub label: u8,
    /// Manifest indices by descending attention, ties by ascending index.
    pub indices: Vec<usize>,
    pub positions: Vec<(usize, usize)>,
    pub patches: Vec<Vec<f64>>,
}

/// Indices of the `k` largest weights (all of them if `k ≥ n`), ordered
/// by descending weight then ascending index.
pub fn top_k_select(weights: &[f64], k: usize) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::invalid("no weights to select from"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(Error::data("attention weights are not finite"));
    }
    let by_weight = |a: &usize, b: &usize| -> Ordering { weights[*b].total_cmp(&weights[*a]).then(a.cmp(b)) };
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_weight);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_weight);
    Ok(idx)
}

/// Encodes every patch of a slide and keeps the `k` most attended.
pub fn sample_bag(
    spec: &EncoderSpec,
    encoder: &EncoderParams,
    head: &AttentionParams,
    slide: &SlidePatches,
    k: usize,
) -> Result<SampledBag> {
    let features = encode(spec, encoder, &slide.patches)?;
    let state = attend_forward(head, &features)?;
    let indices = top_k_select(&state.weights, k)?;
    Ok(SampledBag {
        slide_id: slide.slide_id.clone(),
        label: slide.label,
        positions: indices.iter().map(|&i| slide.positions[i]).collect(),
        patches: indices.iter().map(|&i| slide.patches[i].clone()).collect(),
        indices,
    })
}

#[derive(Debug, Clone)]
pub struct JointGradient {
    pub loss: f64,
    pub encoder: EncoderParams,
    pub head: AttentionParams,
}

impl JointGradient {
    pub fn norm(&self) -> f64 {
        let sq = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
        (sq(self.encoder.flat()) + sq(self.head.flat())).sqrt()
    }
}

/// Loss of one bag of raw patches through encoder and head, with its
/// gradient with respect to both parameter sets.
pub fn joint_gradient(
    spec: &EncoderSpec,
    encoder: &EncoderParams,
    head: &AttentionParams,
    patches: &[Vec<f64>],
    label: u8,
) -> Result<JointGradient> {
    let traces = patches
        .par_iter()
        .map(|p| forward_traced(spec, encoder, p))
        .collect::<Result<Vec<_>>>()?;
    let d = spec.output_dim();
    let mut data = Vec::with_capacity(traces.len() * d);
    traces.iter().for_each(|t| data.extend_from_slice(t.features()));
    let h = Matrix::from_vec(traces.len(), d, data)?;
    let g = attend_backward(head, &h, label)?;

    let partials: Vec<EncoderParams> = traces
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc = encoder.zeros_like();
            for (j, t) in chunk.iter().enumerate() {
                backward_patch(spec, encoder, t, g.features.row(c * GRAD_CHUNK + j), &mut acc);
            }
            acc
        })
        .collect();
    let mut enc_grad = encoder.zeros_like();
    partials.iter().for_each(|p| enc_grad.add_assign(p));
    Ok(JointGradient {
        loss: g.loss,
        encoder: enc_grad,
        head: g.params,
    })
}

/// Full-bag slide probabilities paired with labels; empty slides skipped.
pub fn slide_scores(
    spec: &EncoderSpec,
    encoder: &EncoderParams,
    head: &AttentionParams,
    slides: &[SlidePatches],
) -> Result<Vec<(f64, u8)>> {
    slides
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let h = encode(spec, encoder, &s.patches)?;
            Ok((attend_forward(head, &h)?.probability, s.label))
        })
        .collect()
}

fn scores_auc(scores: &[(f64, u8)]) -> Result<Option<f64>> {
    if scores.iter().any(|s| s.1 == 1) && scores.iter().any(|s| s.1 == 0) {
        Ok(Some(auc(scores)?))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub encoder: EncoderParams,
    pub head: AttentionParams,
    pub log: Vec<FinetuneEpoch>,
    /// Training slides skipped for having no patches.
    pub skipped: usize,
}

impl FinetuneResult {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_auc\n");
        for e in &self.log {
            let auc = e.val_auc.map_or("nan".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(s, "{},{:.6},{auc}", e.epoch, e.train_loss);
        }
        s
    }
}

/// Fine-tunes encoder and head jointly, one gradient step per training
/// slide on its top-k sub-bag. Steps whose joint gradient norm exceeds
/// `max_grad_norm` are shortened to that norm. Selection is recomputed
/// from the current parameters at the start of each epoch unless
/// `static_topk` is set.
/// Slides are visited in a seeded order over slide ids; the log records
/// validation AUC on full bags after every epoch.
pub fn finetune(
    spec: &EncoderSpec,
    encoder: &EncoderParams,
    head: &AttentionParams,
    train: &[SlidePatches],
    val: &[SlidePatches],
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    spec.validate()?;
    encoder.check_compatible(spec)?;
    head.validate()?;
    if head.dim != spec.output_dim() {
        return Err(Error::invalid(format!(
            "head expects d = {}, encoder {} produces {}",
            head.dim,
            spec.display_name(),
            spec.output_dim()
        )));
    }

    let mut slides: Vec<&SlidePatches> = train.iter().filter(|s| !s.is_empty()).collect();
    let skipped = train.len() - slides.len();
    slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));

    let mut enc = encoder.clone();
    let mut hd = head.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let order_seed = seed::derive(cfg.seed, "finetune-order");
    let mut bags: Vec<SampledBag> = Vec::new();
    for epoch in 1..=cfg.epochs {
        if epoch == 1 || !cfg.static_topk {
            bags = slides
                .iter()
                .map(|s| sample_bag(spec, &enc, &hd, s, cfg.k))
                .collect::<Result<_>>()?;
        }
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_index(order_seed, epoch as u64)));
        let mut loss = 0.0;
        for &i in &order {
            let g = joint_gradient(spec, &enc, &hd, &bags[i].patches, bags[i].label)?;
            loss += g.loss;
            let norm = g.norm();
            let step = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                cfg.learning_rate * cfg.max_grad_norm / norm
            } else {
                cfg.learning_rate
            };
            enc.descend(&g.encoder, step);
            hd.descend(&g.head, step);
        }
        if !(enc.flat().iter().all(|v| v.is_finite()) && hd.flat().iter().all(|v| v.is_finite())) {
            return Err(Error::data(format!("fine-tuning diverged in epoch {epoch}")));
        }
        let val_auc = scores_auc(&slide_scores(spec, &enc, &hd, val)?)?;
        log.push(FinetuneEpoch {
            epoch,
            train_loss: if bags.is_empty() { 0.0 } else { loss / bags.len() as f64 },
            val_auc,
        });
    }
    Ok(FinetuneResult {
        encoder: enc,
        head: hd,
        log,
        skipped,
    })
}

/// Fraction of selected patches on diseased slides that are planted
/// positives; `None` when no diseased bag has a selection.
pub fn selection_precision(bags: &[SampledBag], planted: &PlantedMap) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for b in bags.iter().filter(|b| b.label == 1) {
        let set = planted.get(&b.slide_id);
        total += b.positions.len();
        hits += b
            .positions
            .iter()
            .filter(|p| set.is_some_and(|s| s.contains(p)))
            .count();
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> EncoderSpec {
        EncoderSpec::new("tiny", 8, 1, &[2, 3], 2, 7).unwrap()
    }

    fn slide(id: &str, label: u8, n: usize, offset: f64) -> SlidePatches {
        SlidePatches {
            slide_id: id.into(),
            label,
            positions: (0..n).map(|i| (i * 8, 0)).collect(),
            patches: (0..n)
                .map(|i| (0..64).map(|p| ((p * 7 + i * 13) % 11) as f64 / 11.0 + offset).collect())
                .collect(),
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_select(&[0.5, 0.3, 0.2], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_select(&[0.2, 0.5, 0.3], 9).unwrap(), vec![1, 2, 0]);
        assert_eq!(top_k_select(&[0.25, 0.5, 0.25], 2).unwrap(), vec![1, 0]);
        assert!(top_k_select(&[], 1).is_err());
        assert!(top_k_select(&[1.0], 0).is_err());
    }

    #[test]
    fn zero_epochs_and_zero_rate_are_identity() {
        let spec = small_spec();
        let enc = EncoderParams::init(&spec);
        let head = AttentionParams::init(3, 4, 1);
        let train = vec![slide("a", 1, 5, 0.0), slide("b", 0, 4, 0.2)];
        for cfg in [
            FinetuneConfig { epochs: 0, k: 2, ..Default::default() },
            FinetuneConfig { epochs: 2, k: 2, learning_rate: 0.0, ..Default::default() },
        ] {
            let r = finetune(&spec, &enc, &head, &train, &train, &cfg).unwrap();
            assert_eq!(r.encoder, enc);
            assert_eq!(r.head, head);
            assert_eq!(r.log.len(), cfg.epochs);
        }
    }

    #[test]
    fn empty_slides_are_skipped() {
        let spec = small_spec();
        let enc = EncoderParams::init(&spec);
        let mut head = AttentionParams::init(3, 4, 1);
        head.wc = vec![1.0, -1.0, 0.5];
        let train = vec![slide("a", 1, 3, 0.0), slide("e", 0, 0, 0.0)];
        let cfg = FinetuneConfig { epochs: 1, k: 2, learning_rate: 1e-3, ..Default::default() };
        let r = finetune(&spec, &enc, &head, &train, &[], &cfg).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.log[0].val_auc, None);
        assert_ne!(r.encoder, enc);
    }

    #[test]
    fn finetune_is_deterministic() {
        let spec = small_spec();
        let enc = EncoderParams::init(&spec);
        let mut head = AttentionParams::init(3, 4, 1);
        head.wc = vec![1.0, -1.0, 0.5];
        let train = vec![slide("a", 1, 5, 0.0), slide("b", 0, 4, 0.2), slide("c", 1, 3, 0.1)];
        let cfg = FinetuneConfig { epochs: 2, k: 2, learning_rate: 1e-2, ..Default::default() };
        let r1 = finetune(&spec, &enc, &head, &train, &train, &cfg).unwrap();
        let mut reversed = train.clone();
        reversed.reverse();
        let r2 = finetune(&spec, &enc, &head, &reversed, &train, &cfg).unwrap();
        assert_ne!(r1.encoder, enc);
        assert_eq!(r1.encoder, r2.encoder);
        assert_eq!(r1.head, r2.head);
    }

    #[test]
    fn rejects_mismatched_head() {
        let spec = small_spec();
        let enc = EncoderParams::init(&spec);
        let head = AttentionParams::init(5, 4, 1);
        let cfg = FinetuneConfig::default();
        assert!(finetune(&spec, &enc, &head, &[], &[], &cfg).is_err());
    }

    #[test]
    fn precision_counts_diseased_bags_only() {
        let mut planted = PlantedMap::new();
        planted.insert("d".into(), [(0, 0), (64, 0)].into_iter().collect());
        let bag = |id: &str, label, positions: Vec<(usize, usize)>| SampledBag {
            slide_id: id.into(),
            label,
            indices: (0..positions.len()).collect(),
            patches: vec![],
            positions,
        };
        let bags = [
            bag("d", 1, vec![(0, 0), (64, 0), (128, 0), (192, 0)]),
            bag("n", 0, vec![(0, 0)]),
        ];
        assert_eq!(selection_precision(&bags, &planted), Some(0.5));
        assert_eq!(selection_precision(&bags[1..], &planted), None);
    }
}
