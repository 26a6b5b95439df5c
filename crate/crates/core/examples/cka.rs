//! Block-wise linear CKA between an encoder and a perturbed copy. Later
//! blocks compound the perturbation, so similarity falls with depth.
//!
//! cargo run --example cka

use rand::Rng;
use wsi_mil::cka::{block_similarity, linear_cka};
use wsi_mil::encoder::{tap_blocks, EncoderParams, EncoderSpec};
use wsi_mil::seed;

fn main() -> wsi_mil::Result<()> {
    let spec = EncoderSpec::toy(0);
    let base = EncoderParams::init(&spec);
    let mut rng = seed::rng(2);
    let mut moved = base.clone();
    for w in moved.flat_mut() {
        *w *= 1.0 + rng.gen_range(-0.3..0.3);
    }

    let patches: Vec<Vec<f64>> = (0..256)
        .map(|_| (0..spec.patch_len()).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let a = tap_blocks(&spec, &base, &patches)?;
    let b = tap_blocks(&spec, &moved, &patches)?;
    let report = block_similarity("base", &a, "perturbed", &b)?;
    for (block, v) in report.diagonal() {
        println!("block {block}: CKA {v:.6}");
    }
    let x = a.block(4).expect("block 4");
    println!("self-similarity of block 4: {:.12}", linear_cka(x, x)?);
    print!("{}", report.to_csv().lines().take(5).collect::<Vec<_>>().join("\n"));
    println!("\n...");
    Ok(())
}
