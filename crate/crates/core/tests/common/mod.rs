#![allow(dead_code)]

use std::path::{Path, PathBuf};

use faultsim::campaign::DeviceSettings;
use faultsim::cnn::{load_idx, load_model, CompiledModel, Dataset, Model};
use faultsim::simt::DeviceConfig;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn lenet() -> Model {
    load_model(fixtures().join("lenet-small.json")).expect("shipped model loads")
}

pub fn digits() -> Dataset {
    let d = fixtures();
    load_idx(d.join("digits-images.idx"), d.join("digits-labels.idx")).expect("shipped digits load")
}

/// The default campaign device sized for `model`, with an unbounded budget.
pub fn device_for(model: &Model) -> DeviceConfig {
    let words = CompiledModel::compile(model).unwrap().memory_words();
    DeviceSettings::default().device(words, u64::MAX)
}

/// Writes a campaign config into `dir` pointing at the shipped fixtures.
pub fn write_config(dir: &Path, faults: &Path, image_count: usize, parallelism: usize) -> PathBuf {
    let f = fixtures();
    let cfg = serde_json::json!({
        "model": f.join("lenet-small.json"),
        "images": f.join("digits-images.idx"),
        "labels": f.join("digits-labels.idx"),
        "image_count": image_count,
        "faults": faults,
        "seed": 11,
        "parallelism": parallelism,
        "output_dir": "out",
    });
    let path = dir.join("campaign.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}
