//! Writing and reading a HISTOFTR feature store, including the optional
//! encoder parameters section.
//!
//! cargo run --example feature_store

use wsi_mil::encoder::{EncoderParams, EncoderSpec};
use wsi_mil::feature_store::{
    encoder_tensors, read_encoder_params, read_store, read_store_file, write_encoder_params, write_store, FeatureMatrix,
};
use wsi_mil::Matrix;

fn main() -> wsi_mil::Result<()> {
    let dir = std::env::temp_dir().join(format!("wsi-mil-store-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| wsi_mil::Error::Io { path: dir.clone(), source: e })?;

    let records: Vec<FeatureMatrix> = (0..3)
        .map(|i| FeatureMatrix {
            slide_id: format!("slide_{i}"),
            label: (i % 2) as u8,
            encoder_name: "demo".into(),
            data: Matrix::from_vec(i + 1, 4, (0..(i + 1) * 4).map(|v| v as f64 * 0.25).collect()).unwrap(),
        })
        .collect();
    let path = dir.join("features.histoftr");
    write_store(&records, &path)?;
    let back = read_store(&path)?;
    println!("{} records, round trip identical: {}", back.len(), back == records);
    println!("file size {} bytes", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let spec = EncoderSpec::toy(3);
    let params = EncoderParams::init(&spec);
    let params_path = dir.join("encoder.params");
    write_encoder_params(&spec.display_name(), &params, &params_path)?;
    let file = read_store_file(&params_path)?;
    for t in file.params.as_deref().unwrap_or_default() {
        println!("tensor {:<8} dims {:?}", t.name, t.dims);
    }
    let (name, loaded) = read_encoder_params(&params_path)?;
    println!("{name}: parameters identical: {}", loaded == params);
    println!("{} tensors", encoder_tensors(&params).len());

    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
