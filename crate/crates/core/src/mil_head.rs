//! Attention-based MIL pooling head.
//!
//! For a bag `H` (one row per patch):
//!
//! ```text
//! e_i   = w2 · tanh(W1 h_i + b1) + b2
//! a     = softmax(e)
//! z     = Σ a_i h_i
//! logit = wc · z + bc,   p = sigmoid(logit)
//! ```
//!
//! trained with binary cross-entropy. Every reduction over patches runs in
//! a canonical row order (rows sorted by value), so permuting a bag leaves
//! `a` permuted and `z`, `p` bit-identical.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auc;
use crate::feature_store::FeatureMatrix;
use crate::linalg::Matrix;
use crate::seed;

pub const DEFAULT_HIDDEN: usize = 128;
const HEAD_MAGIC: &[u8; 8] = b"HISTOHED";
const HEAD_VERSION: u32 = 1;

/// Head parameters; gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dim: usize,
    pub hidden: usize,
    /// `hidden × dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub wc: Vec<f64>,
    pub bc: f64,
}

impl AttentionParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        AttentionParams {
            dim,
            hidden,
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            wc: vec![0.0; dim],
            bc: 0.0,
        }
    }

    /// Attention weights uniform in `±1/√fan_in`, biases and classifier
    /// zero. A zero classifier starts every slide at p = 0.5, so the first
    /// updates move it along the class-mean difference.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = AttentionParams::zeros(dim, hidden);
        let mut rng = seed::rng(seed::derive(seed, "head-init"));
        let s1 = 1.0 / (dim.max(1) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-s1..=s1));
        let s2 = 1.0 / (hidden.max(1) as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-s2..=s2));
        p
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.dim, self.hidden);
        if h == 0 || d == 0 {
            return Err(Error::invalid("head needs dim >= 1 and hidden >= 1"));
        }
        if self.w1.len() != h * d || self.b1.len() != h || self.w2.len() != h || self.wc.len() != d {
            return Err(Error::invalid("head parameter shapes are inconsistent"));
        }
        if !self.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::data("head parameters are not finite"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1 + self.wc.len() + 1
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v.extend_from_slice(&self.wc);
        v.push(self.bc);
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        let mut v: Vec<&mut f64> = Vec::with_capacity(self.num_params());
        v.extend(self.w1.iter_mut());
        v.extend(self.b1.iter_mut());
        v.extend(self.w2.iter_mut());
        v.push(&mut self.b2);
        v.extend(self.wc.iter_mut());
        v.push(&mut self.bc);
        v
    }

    /// `self -= lr · grad`.
    pub fn descend(&mut self, grad: &AttentionParams, lr: f64) {
        for (p, g) in self.flat_mut().into_iter().zip(grad.flat()) {
            *p -= lr * g;
        }
    }

    pub fn add_assign(&mut self, other: &AttentionParams) {
        for (p, g) in self.flat_mut().into_iter().zip(other.flat()) {
            *p += g;
        }
    }

    /// Versioned little-endian binary: magic, version, dim, hidden, then
    /// W1, b1, w2, b2, wc, bc as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + 8 * self.num_params());
        buf.extend_from_slice(HEAD_MAGIC);
        buf.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for v in self.flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != HEAD_MAGIC {
            return Err(Error::format("not an attention head file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(8) != HEAD_VERSION as usize {
            return Err(Error::format(format!("unsupported head version {}", word(8))));
        }
        let mut p = AttentionParams::zeros(word(12), word(16));
        let expected = 20 + 8 * p.num_params();
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "head file has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        for (i, slot) in p.flat_mut().into_iter().enumerate() {
            let o = 20 + 8 * i;
            *slot = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        AttentionParams::from_bytes(&bytes)
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    /// Per-patch attention, in input row order.
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

/// Gradient of the bag loss.
#[derive(Debug, Clone)]
pub struct HeadGradient {
    pub loss: f64,
    pub params: AttentionParams,
    /// d loss / d H, same shape as the bag.
    pub features: Matrix,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`, computed
/// without forming the probability.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    softplus - label * logit
}

/// Row indices sorted by row contents. Equal rows are interchangeable in
/// every reduction, so their relative order does not matter.
fn canonical_order(h: &Matrix) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..h.rows()).collect();
    idx.sort_by(|&a, &b| {
        h.row(a)
            .iter()
            .zip(h.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

struct ForwardCache {
    order: Vec<usize>,
    /// tanh activations, `n × hidden`.
    t: Vec<f64>,
    state: AttentionState,
}

fn check_bag(params: &AttentionParams, h: &Matrix) -> Result<()> {
    if h.rows() == 0 {
        return Err(Error::invalid("bag has no patches"));
    }
    if h.cols() != params.dim {
        return Err(Error::invalid(format!(
            "bag has d = {}, head expects {}",
            h.cols(),
            params.dim
        )));
    }
    if !h.all_finite() {
        return Err(Error::data("bag holds non-finite features"));
    }
    Ok(())
}

fn forward_cached(params: &AttentionParams, h: &Matrix) -> ForwardCache {
    let (n, d, hid) = (h.rows(), params.dim, params.hidden);
    let order = canonical_order(h);

    let mut t = vec![0.0; n * hid];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let row = h.row(i);
        let ti = &mut t[i * hid..(i + 1) * hid];
        let mut e = params.b2;
        for j in 0..hid {
            let w = &params.w1[j * d..(j + 1) * d];
            let mut u = params.b1[j];
            for (wk, hk) in w.iter().zip(row) {
                u += wk * hk;
            }
            ti[j] = u.tanh();
            e += params.w2[j] * ti[j];
        }
        scores[i] = e;
    }

    let max = order.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|&e| (e - max).exp()).collect();
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    weights.iter_mut().for_each(|a| *a /= total);

    let mut embedding = vec![0.0; d];
    for &i in &order {
        let a = weights[i];
        for (z, hk) in embedding.iter_mut().zip(h.row(i)) {
            *z += a * hk;
        }
    }
    let mut logit = params.bc;
    for (w, z) in params.wc.iter().zip(&embedding) {
        logit += w * z;
    }
    ForwardCache {
        order,
        t,
        state: AttentionState {
            weights,
            embedding,
            logit,
            probability: sigmoid(logit),
        },
    }
}

/// Attention weights, bag embedding and probability of one bag.
pub fn attend_forward(params: &AttentionParams, h: &Matrix) -> Result<AttentionState> {
    params.validate()?;
    check_bag(params, h)?;
    Ok(forward_cached(params, h).state)
}

/// Exact gradient of the bag's cross-entropy with respect to every head
/// parameter and to the bag itself.
pub fn attend_backward(params: &AttentionParams, h: &Matrix, label: u8) -> Result<HeadGradient> {
    params.validate()?;
    check_bag(params, h)?;
    if label > 1 {
        return Err(Error::invalid(format!("label {label} is not binary")));
    }
    let (n, d, hid) = (h.rows(), params.dim, params.hidden);
    let cache = forward_cached(params, h);
    let st = &cache.state;
    let y = f64::from(label);
    let g = st.probability - y;

    let mut grad = AttentionParams::zeros(d, hid);
    grad.bc = g;
    for (gw, z) in grad.wc.iter_mut().zip(&st.embedding) {
        *gw = g * z;
    }
    let dz: Vec<f64> = params.wc.iter().map(|w| g * w).collect();

    // da_i = dz · h_i, de_i = a_i (da_i − Σ_j a_j da_j)
    let da: Vec<f64> = (0..n)
        .map(|i| dz.iter().zip(h.row(i)).map(|(a, b)| a * b).sum())
        .collect();
    let mean_da: f64 = cache.order.iter().map(|&i| st.weights[i] * da[i]).sum();

    let mut d_h = Matrix::zeros(n, d);
    for &i in &cache.order {
        let a = st.weights[i];
        let de = a * (da[i] - mean_da);
        let ti = &cache.t[i * hid..(i + 1) * hid];
        let row = h.row(i);
        let dh = d_h.row_mut(i);
        for (dst, z) in dh.iter_mut().zip(&dz) {
            *dst = a * z;
        }
        grad.b2 += de;
        for j in 0..hid {
            grad.w2[j] += de * ti[j];
            let du = de * params.w2[j] * (1.0 - ti[j] * ti[j]);
            if du == 0.0 {
                continue;
            }
            grad.b1[j] += du;
            let w = &params.w1[j * d..(j + 1) * d];
            let gw = &mut grad.w1[j * d..(j + 1) * d];
            for k in 0..d {
                gw[k] += du * row[k];
                dh[k] += du * w[k];
            }
        }
    }

    Ok(HeadGradient {
        loss: bce_with_logit(st.logit, y),
        params: grad,
        features: d_h,
    })
}

/// Per-feature standardization fitted on training patches.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    /// Mean and standard deviation over every row of every bag; constant
    /// features get unit scale.
    pub fn fit<'a>(bags: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let bags: Vec<&Matrix> = bags.into_iter().collect();
        for m in &bags {
            let d = *dim.get_or_insert(m.cols());
            if m.cols() != d {
                return Err(Error::invalid("bags disagree on feature dimension"));
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
                sq = vec![0.0; d];
            }
            for row in m.row_iter() {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            count += m.rows();
        }
        if count == 0 {
            return Err(Error::invalid("no rows to fit a feature scaler"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for m in &bags {
            for row in m.row_iter() {
                for ((q, v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (v - mu) * (v - mu);
                }
            }
        }
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| {
                let s = (q / count as f64).sqrt();
                if s > 0.0 && s > 1e-9 * mu.abs() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn transform(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / s;
            }
        }
        out
    }

    /// Expresses a head trained on standardized features as an equivalent
    /// head on raw features. Exact in real arithmetic because attention
    /// weights sum to one, so `z` standardizes like a single row.
    pub fn fold(&self, p: &AttentionParams) -> AttentionParams {
        let d = p.dim;
        let mut out = p.clone();
        for j in 0..p.hidden {
            let mut shift = 0.0;
            for k in 0..d {
                let w = p.w1[j * d + k] / self.std[k];
                out.w1[j * d + k] = w;
                shift += w * self.mean[k];
            }
            out.b1[j] = p.b1[j] - shift;
        }
        let mut shift = 0.0;
        for k in 0..d {
            out.wc[k] = p.wc[k] / self.std[k];
            shift += out.wc[k] * self.mean[k];
        }
        out.bc = p.bc - shift;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Step size in standardized feature coordinates.
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Epochs without validation-AUC improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_auc\n");
    for e in log {
        let auc = e.val_auc.map_or("nan".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(s, "{},{:.6},{auc}", e.epoch, e.train_loss);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    /// Parameters on raw (unstandardized) features.
    pub params: AttentionParams,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
}

fn check_bags(bags: &[FeatureMatrix], dim: usize, what: &str) -> Result<()> {
    for b in bags {
        if b.dim() != dim {
            return Err(Error::invalid(format!(
                "{what} slide {} has d = {}, expected {dim}",
                b.slide_id,
                b.dim()
            )));
        }
        if b.n_patches() == 0 {
            return Err(Error::invalid(format!("{what} slide {} has no patches", b.slide_id)));
        }
        if b.label > 1 {
            return Err(Error::invalid(format!("{what} slide {} label {}", b.slide_id, b.label)));
        }
        if !b.data.all_finite() {
            return Err(Error::data(format!("{what} slide {} holds non-finite features", b.slide_id)));
        }
    }
    Ok(())
}

/// Slide probabilities paired with labels.
pub fn predict(params: &AttentionParams, bags: &[FeatureMatrix]) -> Result<Vec<(f64, u8)>> {
    bags.iter()
        .map(|b| Ok((attend_forward(params, &b.data)?.probability, b.label)))
        .collect()
}

/// AUC of a head over labeled bags; `None` unless both classes are present.
pub fn evaluate_auc(params: &AttentionParams, bags: &[FeatureMatrix]) -> Result<Option<f64>> {
    let scored = predict(params, bags)?;
    if scored.iter().any(|s| s.1 == 1) && scored.iter().any(|s| s.1 == 0) {
        Ok(Some(auc(&scored)?))
    } else {
        Ok(None)
    }
}

/// The parameters `train_head` starts from, on raw features.
pub fn initial_params(train: &[FeatureMatrix], cfg: &TrainConfig) -> Result<AttentionParams> {
    let dim = train.first().map_or(0, FeatureMatrix::dim);
    let scaler = FeatureScaler::fit(train.iter().map(|b| &b.data))?;
    Ok(scaler.fold(&AttentionParams::init(dim, cfg.hidden, cfg.seed)))
}

/// Trains the head on frozen features, one gradient step per slide.
///
/// Features are standardized with statistics of the training patches and
/// the result is folded back onto raw features. Each epoch visits the
/// training slides in an order drawn from the seed (over slides sorted by
/// id, so the caller's ordering is irrelevant). The returned parameters
/// are those of the epoch with the best validation AUC, or of the last
/// epoch when validation cannot be scored.
pub fn train_head(train: &[FeatureMatrix], val: &[FeatureMatrix], cfg: &TrainConfig) -> Result<TrainedHead> {
    cfg.validate()?;
    let dim = train
        .first()
        .map(FeatureMatrix::dim)
        .ok_or_else(|| Error::invalid("no training slides"))?;
    check_bags(train, dim, "training")?;
    check_bags(val, dim, "validation")?;
    if !(train.iter().any(|b| b.label == 1) && train.iter().any(|b| b.label == 0)) {
        return Err(Error::invalid("training split needs slides of both classes"));
    }

    let scaler = FeatureScaler::fit(train.iter().map(|b| &b.data))?;
    let init = AttentionParams::init(dim, cfg.hidden, cfg.seed);
    if cfg.epochs == 0 {
        return Ok(TrainedHead {
            params: scaler.fold(&init),
            log: Vec::new(),
            best_epoch: 0,
        });
    }

    let scale_bags = |bags: &[FeatureMatrix]| -> Vec<FeatureMatrix> {
        bags.iter()
            .map(|b| FeatureMatrix {
                data: scaler.transform(&b.data),
                ..b.clone()
            })
            .collect()
    };
    let mut train_s = scale_bags(train);
    train_s.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let val_s = scale_bags(val);

    let order_seed = seed::derive(cfg.seed, "head-order");
    let mut params = init;
    let mut best = (params.clone(), f64::NEG_INFINITY, 0usize);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_s.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_index(order_seed, epoch as u64)));
        let mut loss = 0.0;
        for &i in &order {
            let g = attend_backward(&params, &train_s[i].data, train_s[i].label)?;
            loss += g.loss;
            params.descend(&g.params, cfg.learning_rate);
        }
        if !params.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::data(format!("head training diverged in epoch {epoch}")));
        }
        let val_auc = evaluate_auc(&params, &val_s)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss / train_s.len() as f64,
            val_auc,
        });
        match val_auc {
            Some(a) if a > best.1 => {
                best = (params.clone(), a, epoch);
                stale = 0;
            }
            Some(_) => stale += 1,
            None => best = (params.clone(), f64::NEG_INFINITY, epoch),
        }
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }
    Ok(TrainedHead {
        params: scaler.fold(&best.0),
        log,
        best_epoch: best.2,
    })
}
