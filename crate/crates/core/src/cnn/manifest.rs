//! Model manifests: a JSON layer list plus a raw little-endian binary32
//! weight blob. Offsets and lengths count `f32` elements.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CnnError, LayerKind, LayerSpec, Model, Shape};

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    input_shape: [usize; 3],
    layers: Vec<LayerEntry>,
    weights_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    kind: KindName,
    #[serde(default)]
    params: Params,
    #[serde(default)]
    weight_offset: usize,
    #[serde(default)]
    weight_len: usize,
    #[serde(default)]
    bias_offset: usize,
    #[serde(default)]
    bias_len: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindName {
    Conv,
    MaxPool,
    Dense,
    Relu,
    Softmax,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Params {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
}

impl LayerEntry {
    fn layer_kind(&self, layer: usize) -> Result<LayerKind, CnnError> {
        let p = &self.params;
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| CnnError::Format(format!("layer {layer}: missing param `{name}`")))
        };
        Ok(match self.kind {
            KindName::Conv => LayerKind::Conv {
                out_channels: need(p.out_channels, "out_channels")?,
                kernel_size: need(p.kernel_size, "kernel_size")?,
                stride: p.stride.unwrap_or(1),
                padding: p.padding.unwrap_or(0),
            },
            KindName::MaxPool => {
                let size = need(p.size, "size")?;
                LayerKind::MaxPool {
                    size,
                    stride: p.stride.unwrap_or(size),
                }
            }
            KindName::Dense => LayerKind::Dense {
                out_features: need(p.out_features, "out_features")?,
            },
            KindName::Relu => LayerKind::Relu,
            KindName::Softmax => LayerKind::Softmax,
        })
    }
}

fn entry_parts(kind: LayerKind) -> (KindName, Params) {
    match kind {
        LayerKind::Conv {
            out_channels,
            kernel_size,
            stride,
            padding,
        } => (
            KindName::Conv,
            Params {
                out_channels: Some(out_channels),
                kernel_size: Some(kernel_size),
                stride: Some(stride),
                padding: Some(padding),
                ..Params::default()
            },
        ),
        LayerKind::MaxPool { size, stride } => (
            KindName::MaxPool,
            Params {
                size: Some(size),
                stride: Some(stride),
                ..Params::default()
            },
        ),
        LayerKind::Dense { out_features } => (
            KindName::Dense,
            Params {
                out_features: Some(out_features),
                ..Params::default()
            },
        ),
        LayerKind::Relu => (KindName::Relu, Params::default()),
        LayerKind::Softmax => (KindName::Softmax, Params::default()),
    }
}

fn slice(blob: &[f32], offset: usize, len: usize, what: &str, layer: usize) -> Result<Vec<f32>, CnnError> {
    blob.get(offset..offset + len)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| {
            CnnError::Format(format!(
                "layer {layer}: {what} [{offset}, {}) beyond weight blob of {} values",
                offset + len,
                blob.len()
            ))
        })
}

/// Parses a manifest whose weight blob has already been read.
pub fn model_from_manifest(json: &str, weights: &[u8]) -> Result<Model, CnnError> {
    let m: Manifest =
        serde_json::from_str(json).map_err(|e| CnnError::Format(format!("manifest: {e}")))?;
    if !weights.len().is_multiple_of(4) {
        return Err(CnnError::Format(format!(
            "weight blob length {} is not a multiple of 4",
            weights.len()
        )));
    }
    let blob: Vec<f32> = weights
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let layers = m
        .layers
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(LayerSpec {
                kind: e.layer_kind(i)?,
                weights: slice(&blob, e.weight_offset, e.weight_len, "weights", i)?,
                bias: slice(&blob, e.bias_offset, e.bias_len, "bias", i)?,
            })
        })
        .collect::<Result<Vec<_>, CnnError>>()?;
    let [c, h, w] = m.input_shape;
    let model = Model {
        name: m.name,
        input_shape: Shape::Chw(c, h, w),
        layers,
    };
    model.shapes()?;
    Ok(model)
}

pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Model, CnnError> {
    let path = manifest_path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| CnnError::io(path, e))?;
    let m: Manifest =
        serde_json::from_str(&json).map_err(|e| CnnError::Format(format!("manifest: {e}")))?;
    let weights_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&m.weights_file);
    let weights = std::fs::read(&weights_path).map_err(|e| CnnError::io(&weights_path, e))?;
    model_from_manifest(&json, &weights)
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.weights.bin`; returns the manifest path.
pub fn save_model(model: &Model, dir: impl AsRef<Path>, stem: &str) -> Result<std::path::PathBuf, CnnError> {
    model.shapes()?;
    let Shape::Chw(c, h, w) = model.input_shape else {
        return Err(CnnError::Format("input shape must be (C,H,W)".into()));
    };
    let mut blob: Vec<u8> = Vec::new();
    let mut layers = Vec::new();
    let mut cursor = 0usize;
    for layer in &model.layers {
        let weight_offset = cursor;
        cursor += layer.weights.len();
        let bias_offset = cursor;
        cursor += layer.bias.len();
        for v in layer.weights.iter().chain(&layer.bias) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let has_params = !layer.weights.is_empty() || !layer.bias.is_empty();
        let (kind, params) = entry_parts(layer.kind);
        layers.push(LayerEntry {
            kind,
            params,
            weight_offset: if has_params { weight_offset } else { 0 },
            weight_len: layer.weights.len(),
            bias_offset: if has_params { bias_offset } else { 0 },
            bias_len: layer.bias.len(),
        });
    }
    let weights_file = format!("{stem}.weights.bin");
    let manifest = Manifest {
        name: model.name.clone(),
        input_shape: [c, h, w],
        layers,
        weights_file: weights_file.clone(),
    };
    let dir = dir.as_ref();
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_path = dir.join(format!("{stem}.json"));
    std::fs::write(&manifest_path, json + "\n").map_err(|e| CnnError::io(&manifest_path, e))?;
    let wp = dir.join(weights_file);
    std::fs::write(&wp, blob).map_err(|e| CnnError::io(&wp, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
        "name": "tiny",
        "input_shape": [1, 2, 2],
        "layers": [
            {"kind": "dense", "params": {"out_features": 2}, "weight_offset": 0, "weight_len": 8, "bias_offset": 8, "bias_len": 2},
            {"kind": "softmax"}
        ],
        "weights_file": "tiny.bin"
    }"#;

    fn blob(n: usize) -> Vec<u8> {
        (0..n).flat_map(|i| (i as f32).to_le_bytes()).collect()
    }

    #[test]
    fn parses_manifest() {
        let m = model_from_manifest(TINY, &blob(10)).unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.layers[0].bias, vec![8.0, 9.0]);
        assert_eq!(m.output_len().unwrap(), 2);
    }

    #[test]
    fn dense_weight_count_off_by_one() {
        let json = TINY.replace("\"weight_len\": 8", "\"weight_len\": 7");
        assert!(matches!(
            model_from_manifest(&json, &blob(10)),
            Err(CnnError::ShapeMismatch {
                layer: 0,
                expected: 8,
                found: 7
            })
        ));
    }

    #[test]
    fn missing_param() {
        let json = TINY.replace("\"params\": {\"out_features\": 2}, ", "");
        assert!(matches!(
            model_from_manifest(&json, &blob(10)),
            Err(CnnError::Format(_))
        ));
    }

    #[test]
    fn empty_layer_list() {
        let json = r#"{"name":"x","input_shape":[1,2,2],"layers":[],"weights_file":"w"}"#;
        assert!(matches!(
            model_from_manifest(json, &[]),
            Err(CnnError::Format(_))
        ));
    }

    #[test]
    fn blob_too_short() {
        assert!(matches!(
            model_from_manifest(TINY, &blob(9)),
            Err(CnnError::Format(_))
        ));
        assert!(matches!(
            model_from_manifest(TINY, &[0, 0, 0]),
            Err(CnnError::Format(_))
        ));
    }

    #[test]
    fn save_then_load() {
        let m = model_from_manifest(TINY, &blob(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_model(&m, dir.path(), "tiny").unwrap();
        assert_eq!(load_model(path).unwrap(), m);
        assert!(matches!(
            load_model(dir.path().join("missing.json")),
            Err(CnnError::Io { .. })
        ));
    }
}
