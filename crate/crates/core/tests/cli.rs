mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use common::naive_manifest_text;
use wsi_mil::cli::run_with;
use wsi_mil::pipeline::read_slide_table;
use wsi_mil::slide::{Raster, SlideRecord};
use wsi_mil::tiling::TilingConfig;

fn no_env(_: &str) -> Option<String> {
    None
}

fn run(root: &Path, args: &[&str]) -> (i32, String) {
    let mut argv = vec![
        "wsi-mil".to_string(),
        "--slides-dir".into(),
        root.join("slides").display().to_string(),
        "--store-dir".into(),
        root.join("store").display().to_string(),
        "--output-dir".into(),
        root.join("out").display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let code = run_with(argv, &no_env, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(tree(&p));
        } else {
            v.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    v.sort();
    v
}

#[test]
fn fixture_is_reproducible_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--seed", "7", "fixture", "--n-slides", "6"];
    assert_eq!(run(a.path(), &args).0, 0);
    assert_eq!(run(b.path(), &args).0, 0);
    assert_eq!(tree(&a.path().join("slides")), tree(&b.path().join("slides")));
    let c = tempfile::tempdir().unwrap();
    run(c.path(), &["--seed", "8", "fixture", "--n-slides", "6"]);
    assert_ne!(tree(&a.path().join("slides")), tree(&c.path().join("slides")));
}

#[test]
fn tile_output_matches_naive_recount() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(run(root, &["--seed", "7", "fixture", "--n-slides", "4"]).0, 0);
    let (code, text) = run(root, &["tile", "--patch-size", "48", "--stride", "40", "--min-tissue-fraction", "0.3"]);
    assert_eq!(code, 0, "{text}");
    let cfg = TilingConfig { patch_size: 48, stride: 40, min_tissue_fraction: 0.3 };
    for e in read_slide_table(&root.join("slides")).unwrap() {
        let raster = Raster::load(&root.join("slides").join(&e.file)).unwrap();
        let slide = SlideRecord::new(e.id.clone(), raster, e.magnification, e.label).unwrap();
        let got = fs::read_to_string(root.join("out/manifests").join(format!("{}.csv", e.id))).unwrap();
        assert_eq!(got, naive_manifest_text(&slide, &cfg));
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_wsi-mil");
    let dir = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| Command::new(bin).args(args).current_dir(dir.path()).stdout(Stdio::null()).stderr(Stdio::null()).status().unwrap().code();
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["tile", "--stride", "0"]), Some(1));
    assert_eq!(status(&["no-such-command"]), Some(1));
    assert_eq!(status(&["tile"]), Some(2));
    assert_eq!(status(&["report"]), Some(1));
}
