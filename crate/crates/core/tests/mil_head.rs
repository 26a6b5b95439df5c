mod common;

use common::*;
use proptest::prelude::*;
use wsi_mil::mil_head::{attend_forward, AttentionParams};
use wsi_mil::Matrix;

#[test]
fn head_gradient_matches_finite_differences() {
    check_head_gradients(100, 31).unwrap();
}

#[test]
fn joint_gradient_matches_finite_differences() {
    check_joint_gradients(100, 32).unwrap();
}

#[test]
fn attention_sums_to_one_and_ignores_order() {
    check_attention(1000, 33).unwrap();
}

#[test]
fn head_file_round_trips() {
    let mut r = rng(34);
    let p = random_head(&mut r, 5, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.histohed");
    p.save(&path).unwrap();
    assert_eq!(AttentionParams::load(&path).unwrap(), p);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    assert!(AttentionParams::from_bytes(&bytes).is_err());
}

proptest! {
    #[test]
    fn single_patch_bag_embeds_that_patch(row in prop::collection::vec(-5.0f64..5.0, 1..8), seed in 0u64..500) {
        let mut r = rng(seed);
        let p = random_head(&mut r, row.len(), 3);
        let h = Matrix::from_rows(&[row.clone()]).unwrap();
        let st = attend_forward(&p, &h).unwrap();
        prop_assert_eq!(st.weights, vec![1.0]);
        prop_assert_eq!(st.embedding, row);
    }

    #[test]
    fn embedding_lies_in_the_bag_hull(seed in 0u64..500) {
        let mut r = rng(seed);
        let h = random_bag(&mut r);
        let p = random_head(&mut r, h.cols(), 4);
        let st = attend_forward(&p, &h).unwrap();
        for c in 0..h.cols() {
            let col: Vec<f64> = (0..h.rows()).map(|i| h.get(i, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
            prop_assert!(st.embedding[c] >= lo - slack && st.embedding[c] <= hi + slack);
        }
        prop_assert!((0.0..=1.0).contains(&st.probability));
    }
}
