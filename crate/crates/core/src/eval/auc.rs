use crate::error::{Error, Result};

/// Area under the ROC curve as the Mann–Whitney statistic: the share of
/// (positive, negative) pairs ranked correctly, a tied pair counting half.
///
/// Pair counts are accumulated as integers (two per win, one per tie), so
/// the only rounding is the final division.
pub fn auc(scores: &[(f64, u8)]) -> Result<f64> {
    if let Some(&(s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not a number")));
    }
    if let Some(&(_, l)) = scores.iter().find(|(_, l)| *l > 1) {
        return Err(Error::invalid(format!("label {l} is not binary")));
    }
    let n_pos = scores.iter().filter(|(_, l)| *l == 1).count() as u64;
    let n_neg = scores.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs at least one positive and one negative"));
    }

    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 == 1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos_g * neg_below + pos_g * neg_g;
        neg_below += neg_g;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * u128::from(n_pos) * u128::from(n_neg)) as f64)
}
