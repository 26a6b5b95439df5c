//! Independent oracles and the checks built on them. Each check returns a
//! one-line detail on success and the first failure otherwise; the focused
//! test files assert on them and the acceptance target prints them.

#![allow(dead_code)]

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use wsi_mil::cka::linear_cka;
use wsi_mil::encoder::{self, EncoderParams, EncoderSpec};
use wsi_mil::eval::auc;
use wsi_mil::finetune::{joint_gradient, top_k_select};
use wsi_mil::mil_head::{attend_backward, attend_forward, bce_with_logit, AttentionParams};
use wsi_mil::seed;
use wsi_mil::slide::{Magnification, Raster, SlideRecord};
use wsi_mil::tiling::{extract_manifest, otsu_threshold, TilingConfig};
use wsi_mil::Matrix;

pub type Check = Result<String, String>;

pub fn rng(s: u64) -> ChaCha8Rng {
    seed::rng(s)
}

// ---------------------------------------------------------------- Otsu

/// Exhaustive Otsu over all 256 thresholds with the between-class variance
/// kept as an exact fraction `num / den` and compared by cross-multiplying.
/// Bin counts must stay below ~1000 for the products to fit in `u128`.
pub fn otsu_oracle(hist: &[u64; 256]) -> u8 {
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return occupied[0] as u8;
    }
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let mut best = (0usize, 0u128, 1u128);
    for t in 0..256 {
        let n0: u128 = hist[..=t].iter().map(|&c| c as u128).sum();
        let s0: u128 = hist[..=t].iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
        let n1 = n - n0;
        let (num, den) = if n0 == 0 || n1 == 0 {
            (0, 1)
        } else {
            let d = (n * s0).abs_diff(s * n0);
            (d * d, n0 * n1)
        };
        if num * best.2 > best.1 * den {
            best = (t, num, den);
        }
    }
    best.0 as u8
}

pub fn random_histogram(rng: &mut ChaCha8Rng) -> [u64; 256] {
    let mut h = [0u64; 256];
    match rng.gen_range(0..5) {
        0 => h.iter_mut().for_each(|c| *c = rng.gen_range(0..1000)),
        1 => {
            for _ in 0..rng.gen_range(2..6) {
                h[rng.gen_range(0..256)] = rng.gen_range(1..1000);
            }
        }
        2 => {
            // two bumps
            for _ in 0..2 {
                let (mu, w) = (rng.gen_range(0..256) as f64, rng.gen_range(2.0..40.0));
                for (i, c) in h.iter_mut().enumerate() {
                    let z = (i as f64 - mu) / w;
                    *c += (600.0 * (-0.5 * z * z).exp()) as u64;
                }
            }
            if h.iter().all(|&c| c == 0) {
                h[0] = 1;
            }
        }
        3 => h[rng.gen_range(0..256)] = rng.gen_range(1..1000),
        _ => {
            // symmetric mass, the usual source of exact ties
            let c = rng.gen_range(1..500);
            let (a, b) = (rng.gen_range(0..128), rng.gen_range(128..256));
            h[a] = c;
            h[b] = c;
            let m = rng.gen_range(0..256);
            h[m] += rng.gen_range(0..3) * c;
        }
    }
    h
}

pub fn check_otsu(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    for i in 0..n {
        let h = random_histogram(&mut r);
        let got = otsu_threshold(&h).map_err(|e| format!("histogram {i}: {e}"))?;
        let want = otsu_oracle(&h);
        if got != want {
            return Err(format!("histogram {i}: threshold {got}, exhaustive search {want}"));
        }
    }
    Ok(format!("{n} histograms, all thresholds equal"))
}

// ---------------------------------------------------------------- tiling

fn luma(px: &[u8]) -> u8 {
    if px.len() == 1 {
        px[0]
    } else {
        ((299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32 + 500) / 1000) as u8
    }
}

/// Manifest text recomputed by brute force: gray conversion, exhaustive
/// Otsu, and a full recount of every window.
pub fn naive_manifest_text(slide: &SlideRecord, cfg: &TilingConfig) -> String {
    let r = &slide.raster;
    let (w, h, ch) = (r.width(), r.height(), r.channels());
    let bytes = r.as_bytes();
    let gray: Vec<u8> = bytes.chunks(ch).map(luma).collect();
    let mut hist = [0u64; 256];
    gray.iter().for_each(|&g| hist[g as usize] += 1);
    let t = otsu_oracle(&hist);
    let p = cfg.patch_size;
    let mut out = format!("{},{},{},{:.6}\n", slide.id, p, cfg.stride, cfg.min_tissue_fraction);
    let mut y = 0;
    while y + p <= h {
        let mut x = 0;
        while x + p <= w {
            let mut count = 0u64;
            for yy in y..y + p {
                for xx in x..x + p {
                    count += u64::from(gray[yy * w + xx] <= t);
                }
            }
            let frac = count as f64 / (p * p) as f64;
            if frac >= cfg.min_tissue_fraction {
                let _ = writeln!(out, "{x},{y},{frac:.6}");
            }
            x += cfg.stride;
        }
        y += cfg.stride;
    }
    out
}

/// Bright noisy glass with a few dark blobs, gray or RGB.
pub fn random_slide(rng: &mut ChaCha8Rng, id: &str, w: usize, h: usize) -> SlideRecord {
    let ch = if rng.gen_bool(0.5) { 1 } else { 3 };
    let mut data = vec![0u8; w * h * ch];
    let blobs: Vec<(f64, f64, f64, u8)> = (0..rng.gen_range(0..6))
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(4.0..(w.min(h) as f64 / 2.0).max(5.0)),
                rng.gen_range(60..180),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut v: u8 = 235;
            for &(cx, cy, rad, dark) in &blobs {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= rad * rad {
                    v = v.min(dark);
                }
            }
            for c in 0..ch {
                let n: i32 = rng.gen_range(-12..=12);
                data[(y * w + x) * ch + c] = (v as i32 + n).clamp(0, 255) as u8;
            }
        }
    }
    let raster = Raster::new(w, h, ch, data).expect("shape");
    SlideRecord::new(id, raster, Magnification::X20, 0).expect("label")
}

pub fn random_tiling(rng: &mut ChaCha8Rng, max_patch: usize) -> TilingConfig {
    let patch_size = rng.gen_range(8..=max_patch);
    let stride = rng.gen_range(1..=patch_size);
    let min_tissue_fraction = match rng.gen_range(0..4) {
        0 => 0.0,
        1 => 1.0,
        2 => 0.5,
        _ => rng.gen_range(0.0..=1.0),
    };
    TilingConfig {
        patch_size,
        stride,
        min_tissue_fraction,
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

pub fn check_tiling(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    let mut windows = 0;
    for i in 0..n {
        let (w, h) = (r.gen_range(64..320), r.gen_range(64..320));
        let slide = random_slide(&mut r, &format!("slide_{i:03}"), w, h);
        let cfg = random_tiling(&mut r, 64);
        let want = naive_manifest_text(&slide, &cfg);
        let one = in_pool(1, || extract_manifest(&slide, &cfg)).map_err(|e| format!("slide {i}: {e}"))?;
        let four = in_pool(4, || extract_manifest(&slide, &cfg)).map_err(|e| format!("slide {i}: {e}"))?;
        if one.to_text() != want {
            return Err(format!("slide {i} ({w}x{h}, {cfg:?}): manifest differs from recount"));
        }
        if four.to_text() != want {
            return Err(format!("slide {i}: manifest changes with 4 threads"));
        }
        windows += one.len();
    }
    Ok(format!("{n} slides, {windows} kept windows, byte-identical at 1 and 4 threads"))
}

// ---------------------------------------------------------------- encoder

/// Channel-first scalar forward pass. Returns the pooled tap of every
/// retained block and the sign of every pre-activation (for kink checks).
pub fn reference_forward(spec: &EncoderSpec, params: &EncoderParams, patch: &[f64]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut size = spec.input_size;
    let mut ch = spec.in_channels;
    // act[c][y][x]
    let mut act: Vec<Vec<Vec<f64>>> = (0..ch)
        .map(|c| (0..size).map(|y| (0..size).map(|x| patch[(y * size + x) * ch + c]).collect()).collect())
        .collect();
    let mut taps = Vec::new();
    let mut signs = Vec::new();
    for (b, layer) in spec.retained_blocks().iter().zip(&params.layers) {
        let oc = layer.out_channels;
        let f = b.spatial_downsample;
        let next = size / f;
        let mut pooled = vec![vec![vec![0.0; next]; next]; oc];
        let mut tap = vec![0.0; oc];
        for o in 0..oc {
            let mut pre = vec![vec![0.0; size]; size];
            for y in 0..size {
                for x in 0..size {
                    let mut v = layer.bias[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= size as isize || ix >= size as isize {
                                continue;
                            }
                            for c in 0..ch {
                                v += layer.w(ky, kx, c, o) * act[c][iy as usize][ix as usize];
                            }
                        }
                    }
                    signs.push(v > 0.0);
                    pre[y][x] = v.max(0.0);
                }
            }
            for py in 0..next {
                for px in 0..next {
                    let mut sum = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            sum += pre[py * f + dy][px * f + dx];
                        }
                    }
                    pooled[o][py][px] = sum / (f * f) as f64;
                    tap[o] += pooled[o][py][px];
                }
            }
            tap[o] /= (next * next) as f64;
        }
        taps.push(tap);
        act = pooled;
        ch = oc;
        size = next;
    }
    (taps, signs)
}

pub fn random_encoder(rng: &mut ChaCha8Rng) -> (EncoderSpec, EncoderParams) {
    let blocks = rng.gen_range(1..=3);
    let input_size = 1 << blocks << rng.gen_range(0..=2);
    let channels: Vec<usize> = (0..blocks).map(|_| rng.gen_range(1..=4)).collect();
    let in_ch = rng.gen_range(1..=3);
    let spec = EncoderSpec::new("ref", input_size, in_ch, &channels, 2, rng.gen()).expect("spec");
    let params = EncoderParams::init(&spec);
    (spec, params)
}

pub fn random_patch(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn check_encoder_reference(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    let mut worst = 0.0f64;
    for i in 0..n {
        let (spec, params) = random_encoder(&mut r);
        let patches: Vec<Vec<f64>> = (0..r.gen_range(1..5)).map(|_| random_patch(&mut r, spec.patch_len())).collect();
        let taps = encoder::tap_blocks(&spec, &params, &patches).map_err(|e| e.to_string())?;
        for (p, patch) in patches.iter().enumerate() {
            let (want, _) = reference_forward(&spec, &params, patch);
            for (bi, (_, m)) in taps.blocks.iter().enumerate() {
                for (c, &v) in m.row(p).iter().enumerate() {
                    let w = want[bi][c];
                    worst = worst.max((v - w).abs());
                    if !close(v, w, 1e-12) {
                        return Err(format!("encoder {i}, patch {p}, block {}: {v} vs reference {w}", bi + 1));
                    }
                }
            }
        }
    }
    Ok(format!("{n} encoders, max abs deviation {worst:.1e}"))
}

/// Truncated encoders reproduce the full encoder's earlier taps bit for bit.
pub fn check_truncation_prefix(spec: &EncoderSpec, params: &EncoderParams, patches: &[Vec<f64>]) -> Check {
    let full = encoder::tap_blocks(spec, params, patches).map_err(|e| e.to_string())?;
    for k in 0..spec.blocks.len() {
        let t = encoder::truncate(spec, k).map_err(|e| e.to_string())?;
        let out = encoder::encode(&t, params, patches).map_err(|e| e.to_string())?;
        let prefix: Vec<_> = params.layers[..spec.blocks.len() - k].to_vec();
        let out_prefix = encoder::encode(&t, &EncoderParams { layers: prefix }, patches).map_err(|e| e.to_string())?;
        let block = spec.blocks.len() - k;
        let tap = full.block(block).ok_or("missing tap")?;
        if &out != tap || out_prefix != out {
            return Err(format!("minus{k} output differs from block {block} of the full encoder"));
        }
    }
    Ok(format!("{} truncation levels bit-identical to prefix taps", spec.blocks.len()))
}

pub fn check_truncation_prefix_random(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    for _ in 0..n {
        let (spec, params) = random_encoder(&mut r);
        let patches: Vec<Vec<f64>> = (0..3).map(|_| random_patch(&mut r, spec.patch_len())).collect();
        check_truncation_prefix(&spec, &params, &patches)?;
    }
    let spec = EncoderSpec::toy(s);
    let params = EncoderParams::init(&spec);
    let patches: Vec<Vec<f64>> = (0..4).map(|_| random_patch(&mut r, spec.patch_len())).collect();
    check_truncation_prefix(&spec, &params, &patches)?;
    Ok(format!("{n} random encoders and the toy encoder"))
}

// ---------------------------------------------------------------- gradients

/// Relative error with a floor so that near-zero gradients are compared
/// absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Matrix {
    let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Matrix::from_vec(n, d, data).expect("shape")
}

pub fn random_head(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> AttentionParams {
    let mut p = AttentionParams::zeros(dim, hidden);
    for v in p.flat_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    p
}

fn head_loss(p: &AttentionParams, h: &Matrix, label: u8) -> f64 {
    bce_with_logit(attend_forward(p, h).expect("forward").logit, f64::from(label))
}

pub fn check_head_gradients(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for i in 0..n {
        let (dim, hidden, rows) = (r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=8));
        let h = random_matrix(&mut r, rows, dim, 2.0);
        let p = random_head(&mut r, dim, hidden);
        let label = r.gen_range(0..=1u8);
        let g = attend_backward(&p, &h, label).map_err(|e| e.to_string())?;
        let analytic = g.params.flat();
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            *plus.flat_mut()[j] += FD_STEP;
            let mut minus = p.clone();
            *minus.flat_mut()[j] -= FD_STEP;
            let num = (head_loss(&plus, &h, label) - head_loss(&minus, &h, label)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*a, num));
            coords += 1;
        }
        for k in 0..rows * dim {
            let mut hp = h.clone();
            hp.as_mut_slice()[k] += FD_STEP;
            let mut hm = h.clone();
            hm.as_mut_slice()[k] -= FD_STEP;
            let num = (head_loss(&p, &hp, label) - head_loss(&p, &hm, label)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.features.as_slice()[k], num));
            coords += 1;
        }
        if worst >= 1e-4 {
            return Err(format!("instance {i}: relative error {worst:.2e}"));
        }
    }
    Ok(format!("{n} bags, {coords} coordinates, max relative error {worst:.2e}"))
}

fn joint_loss(spec: &EncoderSpec, enc: &EncoderParams, head: &AttentionParams, patches: &[Vec<f64>], label: u8) -> f64 {
    let feats: Vec<Vec<f64>> = patches.iter().map(|p| reference_forward(spec, enc, p).0.pop().unwrap()).collect();
    let h = Matrix::from_rows(&feats).expect("shape");
    head_loss(head, &h, label)
}

fn relu_pattern(spec: &EncoderSpec, enc: &EncoderParams, patches: &[Vec<f64>]) -> Vec<bool> {
    patches.iter().flat_map(|p| reference_forward(spec, enc, p).1).collect()
}

/// Joint encoder + head gradient of a k = 4 bag against central
/// differences of the reference forward pass. A coordinate whose ±step
/// flips any ReLU is skipped: the loss has a kink inside the stencil.
pub fn check_joint_gradients(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    let mut worst = 0.0f64;
    let (mut coords, mut kinks) = (0usize, 0usize);
    for i in 0..n {
        let blocks = r.gen_range(1..=2);
        let channels: Vec<usize> = (0..blocks).map(|_| r.gen_range(1..=3)).collect();
        let spec = EncoderSpec::new("grad", 8, 1, &channels, 2, r.gen()).map_err(|e| e.to_string())?;
        let enc = EncoderParams::init(&spec);
        let hidden = r.gen_range(1..=4);
        let head = random_head(&mut r, spec.output_dim(), hidden);
        let patches: Vec<Vec<f64>> = (0..4).map(|_| random_patch(&mut r, spec.patch_len())).collect();
        let label = r.gen_range(0..=1u8);
        let g = joint_gradient(&spec, &enc, &head, &patches, label).map_err(|e| e.to_string())?;

        for (j, a) in g.encoder.flat().iter().enumerate() {
            let mut plus = enc.clone();
            *plus.flat_mut()[j] += FD_STEP;
            let mut minus = enc.clone();
            *minus.flat_mut()[j] -= FD_STEP;
            coords += 1;
            if relu_pattern(&spec, &plus, &patches) != relu_pattern(&spec, &minus, &patches) {
                kinks += 1;
                continue;
            }
            let num = (joint_loss(&spec, &plus, &head, &patches, label) - joint_loss(&spec, &minus, &head, &patches, label))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*a, num));
        }
        for (j, a) in g.head.flat().iter().enumerate() {
            let mut plus = head.clone();
            *plus.flat_mut()[j] += FD_STEP;
            let mut minus = head.clone();
            *minus.flat_mut()[j] -= FD_STEP;
            let num = (joint_loss(&spec, &enc, &plus, &patches, label) - joint_loss(&spec, &enc, &minus, &patches, label))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*a, num));
            coords += 1;
        }
        if worst >= 1e-4 {
            return Err(format!("instance {i}: relative error {worst:.2e}"));
        }
    }
    if kinks * 20 > coords {
        return Err(format!("{kinks} of {coords} coordinates straddle a ReLU kink"));
    }
    Ok(format!("{n} bags, {coords} coordinates ({kinks} kinks skipped), max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- attention

pub fn random_bag(rng: &mut ChaCha8Rng) -> Matrix {
    let (n, d) = (rng.gen_range(1..=40), rng.gen_range(1..=10));
    let scale = [0.1, 1.0, 10.0, 50.0][rng.gen_range(0..4)];
    let mut m = random_matrix(rng, n, d, scale);
    // duplicated rows
    for _ in 0..rng.gen_range(0..3) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let row = m.row(a).to_vec();
        m.row_mut(b).copy_from_slice(&row);
    }
    m
}

pub fn check_attention(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    let mut worst = 0.0f64;
    for i in 0..n {
        let h = random_bag(&mut r);
        let hidden = r.gen_range(1..=8);
        let p = random_head(&mut r, h.cols(), hidden);
        let st = attend_forward(&p, &h).map_err(|e| e.to_string())?;
        let total: f64 = st.weights.iter().sum();
        worst = worst.max((total - 1.0).abs());
        if (total - 1.0).abs() > 1e-9 || st.weights.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(format!("bag {i}: weights sum to {total}"));
        }
        let mut perm: Vec<usize> = (0..h.rows()).collect();
        perm.shuffle(&mut r);
        let hp = h.select_rows(&perm);
        let sp = attend_forward(&p, &hp).map_err(|e| e.to_string())?;
        let weights_permuted = perm.iter().enumerate().all(|(j, &src)| sp.weights[j].to_bits() == st.weights[src].to_bits());
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if sp.probability.to_bits() != st.probability.to_bits()
            || sp.logit.to_bits() != st.logit.to_bits()
            || !same(&sp.embedding, &st.embedding)
            || !weights_permuted
        {
            return Err(format!("bag {i}: prediction changes under row permutation"));
        }
        let label = r.gen_range(0..=1u8);
        let g = attend_backward(&p, &h, label).map_err(|e| e.to_string())?;
        let gp = attend_backward(&p, &hp, label).map_err(|e| e.to_string())?;
        if !same(&g.params.flat(), &gp.params.flat()) || g.loss.to_bits() != gp.loss.to_bits() {
            return Err(format!("bag {i}: parameter gradient changes under row permutation"));
        }
    }
    Ok(format!("{n} bags, max |sum a - 1| = {worst:.1e}, permutation bit-exact"))
}

// ---------------------------------------------------------------- CKA

type Dense = Vec<Vec<f64>>;

fn to_dense(m: &Matrix) -> Dense {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn gram(x: &Dense) -> Dense {
    x.iter().map(|a| x.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum()).collect()).collect()
}

/// `H K H` with `H = I - 11ᵀ/n`.
fn center_gram(k: &Dense) -> Dense {
    let n = k.len();
    let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let col: Vec<f64> = (0..n).map(|j| k.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let all: f64 = row.iter().sum::<f64>() / n as f64;
    (0..n).map(|i| (0..n).map(|j| k[i][j] - row[i] - col[j] + all).collect()).collect()
}

fn hsic(kc: &Dense, lc: &Dense) -> f64 {
    kc.iter().zip(lc).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>()).sum()
}

/// CKA through centered Gram matrices.
pub fn gram_cka(x: &Matrix, y: &Matrix) -> f64 {
    let kc = center_gram(&gram(&to_dense(x)));
    let lc = center_gram(&gram(&to_dense(y)));
    hsic(&kc, &lc) / (hsic(&kc, &kc) * hsic(&lc, &lc)).sqrt()
}

/// Random orthogonal matrix by Gram–Schmidt on a Gaussian-ish draw.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let mut q: Dense = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.iter().map(|a| a / norm).collect());
        }
    }
    Matrix::from_rows(&q).expect("shape")
}

pub fn check_cka(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    let (mut worst_oracle, mut worst_inv) = (0.0f64, 0.0f64);
    for i in 0..n {
        let rows = r.gen_range(5..=60);
        let (dx, dy) = (r.gen_range(1..=12), r.gen_range(1..=12));
        let x = random_matrix(&mut r, rows, dx, 1.0);
        let y = if r.gen_bool(0.5) {
            random_matrix(&mut r, rows, dy, 1.0)
        } else {
            let a = random_matrix(&mut r, dx, dy, 1.0);
            let noise = random_matrix(&mut r, rows, dy, 0.1);
            let mut m = x.matmul(&a).unwrap();
            m.as_mut_slice().iter_mut().zip(noise.as_slice()).for_each(|(v, e)| *v += e);
            m
        };
        let c = linear_cka(&x, &y).map_err(|e| format!("pair {i}: {e}"))?;
        let self_c = linear_cka(&x, &x).map_err(|e| e.to_string())?;
        if (self_c - 1.0).abs() > 1e-6 {
            return Err(format!("pair {i}: self-similarity {self_c}"));
        }
        if !(0.0..=1.0 + 1e-9).contains(&c) {
            return Err(format!("pair {i}: CKA {c} outside [0, 1]"));
        }
        let sym = linear_cka(&y, &x).map_err(|e| e.to_string())?;
        let oracle = gram_cka(&x, &y);
        worst_oracle = worst_oracle.max((c - oracle).abs());
        if (c - oracle).abs() > 1e-9 || (c - sym).abs() > 1e-9 {
            return Err(format!("pair {i}: CKA {c}, Gram/HSIC oracle {oracle}, swapped {sym}"));
        }
        let q = random_orthogonal(&mut r, dx);
        let rotated = linear_cka(&x.matmul(&q).unwrap(), &y).map_err(|e| e.to_string())?;
        let k = r.gen_range(-3.0f64..3.0).exp();
        let scaled = linear_cka(&x.scale(k), &y.scale(1.0 / k)).map_err(|e| e.to_string())?;
        let dev = (rotated - c).abs().max((scaled - c).abs());
        worst_inv = worst_inv.max(dev);
        if dev > 1e-9 {
            return Err(format!("pair {i}: orthogonal/scale transform moves CKA by {dev:.2e}"));
        }
    }
    Ok(format!(
        "{n} pairs, oracle deviation {worst_oracle:.1e}, invariance deviation {worst_inv:.1e}"
    ))
}

// ---------------------------------------------------------------- AUC

/// Pairwise Mann–Whitney count: two points per correctly ranked pair, one
/// per tie.
pub fn pairwise_auc(scores: &[(f64, u8)]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for &(sp, lp) in scores {
        for &(sn, ln) in scores {
            if lp == 1 && ln == 0 {
                pairs += 1;
                twice += if sp > sn {
                    2
                } else if sp == sn {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

pub fn random_scores(rng: &mut ChaCha8Rng) -> Vec<(f64, u8)> {
    let n = rng.gen_range(2..=120);
    let levels = [2, 3, 5, 10, 1000][rng.gen_range(0..5)];
    let mut v: Vec<(f64, u8)> = (0..n)
        .map(|_| (rng.gen_range(0..levels) as f64 / levels as f64, rng.gen_range(0..=1u8)))
        .collect();
    v[0].1 = 0;
    v[1].1 = 1;
    v.shuffle(rng);
    v
}

pub fn check_auc(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    for i in 0..n {
        let scores = random_scores(&mut r);
        let got = auc(&scores).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&scores);
        if got.to_bits() != want.to_bits() {
            return Err(format!("set {i}: AUC {got}, pairwise count {want}"));
        }
    }
    Ok(format!("{n} score sets with ties, all exactly equal"))
}

// ---------------------------------------------------------------- top-k

pub fn top_k_oracle(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn check_top_k(n: usize, s: u64) -> Check {
    let mut r = rng(s);
    for i in 0..n {
        let len = r.gen_range(1..=200);
        let levels = [1, 3, 20, 1_000_000][r.gen_range(0..4)];
        let w: Vec<f64> = (0..len).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let k = r.gen_range(1..=len + 3);
        let got = top_k_select(&w, k).map_err(|e| e.to_string())?;
        if got != top_k_oracle(&w, k) {
            return Err(format!("vector {i} (len {len}, k {k}): selection differs from full sort"));
        }
    }
    Ok(format!("{n} weight vectors with ties"))
}
