//! Frozen-feature stage: tile a synthetic cohort, encode every patch with
//! the toy encoder, and train the attention-MIL head on slide labels.
//!
//! cargo run --release --example train_head

use std::collections::BTreeMap;

use wsi_mil::encoder::{encode, EncoderParams, EncoderSpec};
use wsi_mil::eval::{generate_fixture, split, FixtureSpec, SplitSpec};
use wsi_mil::feature_store::FeatureMatrix;
use wsi_mil::finetune::SlidePatches;
use wsi_mil::mil_head::{attend_forward, evaluate_auc, train_head, TrainConfig};
use wsi_mil::tiling::{extract_manifest, TilingConfig};

fn main() -> wsi_mil::Result<()> {
    let fixture = generate_fixture(&FixtureSpec { n_slides: 24, width: 512, height: 512, ..FixtureSpec::default() })?;
    let spec = EncoderSpec::toy(0);
    let params = EncoderParams::init(&spec);
    let tiling = TilingConfig::with_patch_size(64);

    let mut bags = BTreeMap::new();
    for s in &fixture.slides {
        let patches = SlidePatches::from_manifest(s, &extract_manifest(s, &tiling)?, spec.input_size)?;
        let data = encode(&spec, &params, &patches.patches)?;
        bags.insert(
            s.id.clone(),
            FeatureMatrix { slide_id: s.id.clone(), label: s.label, encoder_name: spec.display_name(), data },
        );
    }
    let labels: Vec<(String, u8)> = fixture.slides.iter().map(|s| (s.id.clone(), s.label)).collect();
    let parts = split(&labels, &SplitSpec::default())?;
    let [train, val, test] = parts.parts().map(|ids| ids.iter().map(|id| bags[id].clone()).collect::<Vec<_>>());
    println!("{} train / {} val / {} test slides", train.len(), val.len(), test.len());

    let trained = train_head(&train, &val, &TrainConfig::default())?;
    for e in &trained.log {
        println!("epoch {:>2}: loss {:.4}, val AUC {:?}", e.epoch, e.train_loss, e.val_auc);
    }
    println!("best epoch {}, test AUC {:?}", trained.best_epoch, evaluate_auc(&trained.params, &test)?);

    let diseased = test.iter().find(|b| b.label == 1).expect("a diseased test slide");
    let state = attend_forward(&trained.params, &diseased.data)?;
    let (top, w) = state
        .weights
        .iter()
        .enumerate()
        .fold((0, 0.0), |best, (i, &w)| if w > best.1 { (i, w) } else { best });
    println!("{}: p = {:.3}, most attended patch {top} (weight {w:.3})", diseased.slide_id, state.probability);
    Ok(())
}
