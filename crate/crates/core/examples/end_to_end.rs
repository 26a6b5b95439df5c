//! The whole workflow through the pipeline stages, as the CLI runs it:
//! fixture, tile, encode, train-head, finetune, cka, truncate-eval, report.
//!
//! cargo run --release --example end_to_end [-- <work dir>]

use std::path::PathBuf;

use wsi_mil::pipeline::{self, PipelineConfig};

fn main() -> wsi_mil::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("wsi-mil-end-to-end"));
    let mut cfg = PipelineConfig::default();
    cfg.paths.slides_dir = root.join("slides");
    cfg.paths.store_dir = root.join("store");
    cfg.paths.output_dir = root.join("out");

    let f = pipeline::run_fixture(&cfg)?;
    println!("fixture: {} slides, {} diseased", f.slides, f.diseased);
    let t = pipeline::run_tile(&cfg)?;
    println!("tile: {} patches", t.patches);
    let e = pipeline::run_encode(&cfg)?;
    println!("encode: {} d = {}", e.encoder, e.dim);
    let h = pipeline::run_train_head(&cfg)?;
    println!("train-head: test AUC {:?}", h.test_auc);
    let ft = pipeline::run_finetune(&cfg)?;
    println!("finetune: test AUC {:?}, top-64 precision {:?}", ft.tuned_test_auc, ft.tuned_precision);
    let c = pipeline::run_cka(&cfg)?;
    println!("cka diagonal {:?}", c.diagonal);
    for r in pipeline::run_truncate_eval(&cfg)? {
        println!("{:<16} test AUC {:?}", r.encoder, r.test_auc);
    }
    pipeline::run_report(&cfg)?;
    println!("outputs in {}", cfg.paths.output_dir.display());
    Ok(())
}
