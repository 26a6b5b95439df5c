//! Otsu tissue detection and sliding-window patch extraction on one
//! synthetic slide.
//!
//! cargo run --example tiling

use wsi_mil::eval::{generate_fixture, FixtureSpec};
use wsi_mil::tiling::{extract_manifest, gray_histogram, otsu_threshold, TilingConfig};

fn main() -> wsi_mil::Result<()> {
    let fixture = generate_fixture(&FixtureSpec { n_slides: 1, diseased_fraction: 1.0, ..FixtureSpec::default() })?;
    let slide = &fixture.slides[0];
    let t = otsu_threshold(&gray_histogram(&slide.raster))?;
    println!("{} ({}x{}): Otsu threshold {t}", slide.id, slide.width(), slide.height());

    for cfg in [
        TilingConfig::with_patch_size(64),
        TilingConfig { patch_size: 64, stride: 32, min_tissue_fraction: 0.9 },
        TilingConfig { patch_size: 128, stride: 128, min_tissue_fraction: 0.5 },
    ] {
        let m = extract_manifest(slide, &cfg)?;
        let mean = m.entries.iter().map(|e| e.tissue_fraction).sum::<f64>() / m.len().max(1) as f64;
        println!(
            "patch {:>3} stride {:>3} min {:.2}: {:>3} patches, mean tissue {mean:.3}",
            cfg.patch_size,
            cfg.stride,
            cfg.min_tissue_fraction,
            m.len()
        );
    }

    let m = extract_manifest(slide, &TilingConfig::with_patch_size(64))?;
    print!("{}", m.to_text().lines().take(4).collect::<Vec<_>>().join("\n"));
    println!("\n...");
    Ok(())
}
