//! Second stage: fine-tune encoder and head end to end on the top-k most
//! attended patches of each slide, and measure how often the selection
//! hits the planted diseased cells.
//!
//! cargo run --release --example finetune

use wsi_mil::encoder::{encode, EncoderParams, EncoderSpec};
use wsi_mil::eval::{generate_fixture, FixtureSpec};
use wsi_mil::feature_store::FeatureMatrix;
use wsi_mil::finetune::{finetune, sample_bag, selection_precision, FinetuneConfig, SlidePatches};
use wsi_mil::mil_head::{train_head, AttentionParams, TrainConfig};
use wsi_mil::tiling::{extract_manifest, TilingConfig};

const K: usize = 16;

fn precision(spec: &EncoderSpec, enc: &EncoderParams, head: &AttentionParams, slides: &[SlidePatches], planted: &wsi_mil::eval::PlantedMap) -> wsi_mil::Result<f64> {
    let bags = slides
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| sample_bag(spec, enc, head, s, K))
        .collect::<wsi_mil::Result<Vec<_>>>()?;
    Ok(selection_precision(&bags, planted).unwrap_or(0.0))
}

fn main() -> wsi_mil::Result<()> {
    let fixture = generate_fixture(&FixtureSpec { n_slides: 16, width: 448, height: 448, seed: 4, ..FixtureSpec::default() })?;
    let spec = EncoderSpec::toy(0);
    let encoder = EncoderParams::init(&spec);
    let tiling = TilingConfig::with_patch_size(64);
    let slides = fixture
        .slides
        .iter()
        .map(|s| SlidePatches::from_manifest(s, &extract_manifest(s, &tiling)?, spec.input_size))
        .collect::<wsi_mil::Result<Vec<_>>>()?;
    let (train, val) = slides.split_at(12);

    let bags = |set: &[SlidePatches], enc: &EncoderParams| -> wsi_mil::Result<Vec<FeatureMatrix>> {
        set.iter()
            .map(|s| {
                Ok(FeatureMatrix {
                    slide_id: s.slide_id.clone(),
                    label: s.label,
                    encoder_name: spec.display_name(),
                    data: encode(&spec, enc, &s.patches)?,
                })
            })
            .collect()
    };
    let head = train_head(&bags(train, &encoder)?, &bags(val, &encoder)?, &TrainConfig::default())?.params;
    println!("frozen top-{K} precision {:.3}", precision(&spec, &encoder, &head, &slides, &fixture.planted)?);

    let cfg = FinetuneConfig { k: K, epochs: 1, ..FinetuneConfig::default() };
    let tuned = finetune(&spec, &encoder, &head, train, val, &cfg)?;
    for e in &tuned.log {
        println!("epoch {}: loss {:.4}, val AUC {:?}", e.epoch, e.train_loss, e.val_auc);
    }
    let shift = encoder
        .flat()
        .iter()
        .zip(tuned.encoder.flat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("largest encoder weight change {shift:.2e}");
    println!("tuned top-{K} precision {:.3}", precision(&spec, &tuned.encoder, &tuned.head, &slides, &fixture.planted)?);
    Ok(())
}
