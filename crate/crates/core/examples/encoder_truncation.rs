//! The toy block encoder: per-block taps, truncation to "minus-k"
//! variants, and the prefix property that ties them together.
//!
//! cargo run --example encoder_truncation

use rand::Rng;
use wsi_mil::encoder::{encode, tap_blocks, truncate, EncoderParams, EncoderSpec};
use wsi_mil::seed;

fn main() -> wsi_mil::Result<()> {
    let spec = EncoderSpec::toy(0);
    let params = EncoderParams::init(&spec);
    println!("{}: {} parameters", spec.display_name(), params.num_params());

    let mut rng = seed::rng(1);
    let patches: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..spec.patch_len()).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let taps = tap_blocks(&spec, &params, &patches)?;

    for k in 0..spec.blocks.len() {
        let t = truncate(&spec, k)?;
        let features = encode(&t, &params, &patches)?;
        let block = spec.blocks.len() - k;
        let same = taps.block(block) == Some(&features);
        println!(
            "{:<16} d = {:>3}, equals block {block} tap of the full encoder: {same}",
            t.display_name(),
            t.output_dim()
        );
    }
    Ok(())
}
