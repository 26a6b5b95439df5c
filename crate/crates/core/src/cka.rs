//! Linear centered kernel alignment between block representations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::BlockActivations;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Patches sampled for a similarity report.
pub const DEFAULT_SAMPLES: usize = 512;

/// Linear CKA of two representations of the same `n` samples:
/// `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F · ‖Ycᵀ Yc‖_F)` on column-centered inputs.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::invalid(format!(
            "representations cover {} and {} samples",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::invalid("linear CKA needs at least two samples"));
    }
    if !(x.all_finite() && y.all_finite()) {
        return Err(Error::data("representation holds non-finite values"));
    }
    let xc = x.center_columns();
    let yc = y.center_columns();
    for (raw, c) in [(x, &xc), (y, &yc)] {
        if c.frobenius() <= 1e-12 * raw.frobenius() || c.frobenius() == 0.0 {
            return Err(Error::degenerate("representation is constant across samples"));
        }
    }
    let cross = yc.t_matmul(&xc)?.frobenius_sq();
    let den = xc.t_matmul(&xc)?.frobenius() * yc.t_matmul(&yc)?.frobenius();
    if den == 0.0 {
        return Err(Error::degenerate("zero CKA denominator"));
    }
    Ok(cross / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub encoder_a: String,
    pub encoder_b: String,
    pub blocks_a: Vec<usize>,
    pub blocks_b: Vec<usize>,
    /// `matrix[i][j]` compares block `blocks_a[i]` with `blocks_b[j]`.
    pub matrix: Vec<Vec<f64>>,
    pub n_samples: usize,
}

/// Diagonal summary written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalSummary {
    pub encoder_a: String,
    pub encoder_b: String,
    pub n_samples: usize,
    pub blocks: Vec<usize>,
    pub diagonal: Vec<f64>,
}

impl SimilarityReport {
    /// Same-block entries, for blocks present on both sides.
    pub fn diagonal(&self) -> Vec<(usize, f64)> {
        self.blocks_a
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                let j = self.blocks_b.iter().position(|c| c == b)?;
                Some((*b, self.matrix[i][j]))
            })
            .collect()
    }

    pub fn summary(&self) -> DiagonalSummary {
        let (blocks, diagonal) = self.diagonal().into_iter().unzip();
        DiagonalSummary {
            encoder_a: self.encoder_a.clone(),
            encoder_b: self.encoder_b.clone(),
            n_samples: self.n_samples,
            blocks,
            diagonal,
        }
    }

    /// `block_a,block_b,cka` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block_a,block_b,cka\n");
        for (i, a) in self.blocks_a.iter().enumerate() {
            for (j, b) in self.blocks_b.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{:.9}", self.matrix[i][j]);
            }
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.summary()).map_err(|e| Error::format(e.to_string()))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// CKA between every block of `frozen` and every block of `tuned`.
/// Both must be taps of the same patches in the same order.
pub fn block_similarity(
    encoder_a: &str,
    frozen: &BlockActivations,
    encoder_b: &str,
    tuned: &BlockActivations,
) -> Result<SimilarityReport> {
    if frozen.rows() != tuned.rows() {
        return Err(Error::invalid(format!(
            "activations cover {} and {} patches",
            frozen.rows(),
            tuned.rows()
        )));
    }
    let matrix = frozen
        .blocks
        .iter()
        .map(|(_, a)| tuned.blocks.iter().map(|(_, b)| linear_cka(a, b)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(SimilarityReport {
        encoder_a: encoder_a.to_string(),
        encoder_b: encoder_b.to_string(),
        blocks_a: frozen.blocks.iter().map(|b| b.0).collect(),
        blocks_b: tuned.blocks.iter().map(|b| b.0).collect(),
        matrix,
        n_samples: frozen.rows(),
    })
}
