//! Small CNN models compiled to mini-SASS kernels, plus the sequential
//! reference implementation they are checked against.

mod compile;
mod idx;
mod manifest;
mod reference;
pub mod zoo;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::simt::SimError;

pub use compile::{
    compile_layer, compile_layer_at, infer, CompiledLayer, CompiledModel, Inference, LaunchedKernel, LayerLayout,
    Region, THREADS_PER_BLOCK,
};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use manifest::{load_model, save_model};
pub use reference::{reference_infer, reference_layer};

/// `log2(e)` rounded to binary32; softmax computes `exp(x)` as `exp2(x * LOG2_E)`.
pub const LOG2_E_BITS: u32 = 0x3FB8_AA3B;

#[derive(Debug, thiserror::Error)]
pub enum CnnError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("layer {layer}: expected {expected} values, found {found}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("bad IDX magic 0x{found:08X}, expected 0x{expected:08X}")]
    BadMagic { expected: u32, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl CnnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CnnError {
        CnnError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Activation shape: a feature map or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Chw(c, h, w) => write!(f, "({c},{h},{w})"),
            Shape::Flat(n) => write!(f, "({n},)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    /// Row-major, channel-outermost.
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Tensor, CnnError> {
        if data.len() != shape.len() {
            return Err(CnnError::Format(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn bits(&self) -> Vec<u32> {
        self.data.iter().map(|x| x.to_bits()).collect()
    }

    /// Index of the largest component; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value, lowest index on ties. NaN never wins over a
/// number.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] || (v[best].is_nan() && !x.is_nan()) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerSpec {
    pub fn relu() -> LayerSpec {
        LayerSpec::plain(LayerKind::Relu)
    }

    pub fn softmax() -> LayerSpec {
        LayerSpec::plain(LayerKind::Softmax)
    }

    pub fn max_pool(size: usize, stride: usize) -> LayerSpec {
        LayerSpec::plain(LayerKind::MaxPool { size, stride })
    }

    fn plain(kind: LayerKind) -> LayerSpec {
        LayerSpec {
            kind,
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    /// Output shape for `input`, or why the layer cannot consume it.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, CnnError> {
        let unsupported = |m: String| Err(CnnError::UnsupportedShape(m));
        match (self.kind, input) {
            (
                LayerKind::Conv {
                    out_channels,
                    kernel_size,
                    stride,
                    padding,
                },
                Shape::Chw(_, h, w),
            ) => {
                if out_channels == 0 || kernel_size == 0 || stride == 0 {
                    return unsupported("conv parameters must be positive".into());
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if kernel_size > ph || kernel_size > pw {
                    return unsupported(format!(
                        "conv kernel {kernel_size} larger than padded input {input}"
                    ));
                }
                Ok(Shape::Chw(
                    out_channels,
                    (ph - kernel_size) / stride + 1,
                    (pw - kernel_size) / stride + 1,
                ))
            }
            (LayerKind::MaxPool { size, stride }, Shape::Chw(c, h, w)) => {
                if size == 0 || stride == 0 || size > h || size > w {
                    return unsupported(format!("max-pool {size}/{stride} on {input}"));
                }
                Ok(Shape::Chw(c, (h - size) / stride + 1, (w - size) / stride + 1))
            }
            (LayerKind::Conv { .. } | LayerKind::MaxPool { .. }, Shape::Flat(_)) => {
                unsupported(format!("spatial layer on flat input {input}"))
            }
            (LayerKind::Dense { out_features }, _) if out_features > 0 => {
                Ok(Shape::Flat(out_features))
            }
            (LayerKind::Dense { .. }, _) => unsupported("dense layer with 0 outputs".into()),
            (LayerKind::Relu, s) => Ok(s),
            (LayerKind::Softmax, s) => Ok(Shape::Flat(s.len())),
        }
    }

    /// `(weights, bias)` element counts this layer needs for `input`.
    pub fn parameter_counts(&self, input: Shape) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv {
                out_channels,
                kernel_size,
                ..
            } => {
                let in_c = match input {
                    Shape::Chw(c, _, _) => c,
                    Shape::Flat(_) => 0,
                };
                (out_channels * in_c * kernel_size * kernel_size, out_channels)
            }
            LayerKind::Dense { out_features } => (out_features * input.len(), out_features),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

impl Model {
    /// Checks the shape chain and parameter counts; returns per-layer input
    /// shapes followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, CnnError> {
        if self.layers.is_empty() {
            return Err(CnnError::Format("model has no layers".into()));
        }
        if !matches!(self.input_shape, Shape::Chw(..)) || self.input_shape.is_empty() {
            return Err(CnnError::Format(format!(
                "input shape {} must be a non-empty (C,H,W)",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape];
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind == LayerKind::Softmax && i + 1 != self.layers.len() {
                return Err(CnnError::Format(format!(
                    "softmax at layer {i} is not the final layer"
                )));
            }
            let input = shapes[i];
            let (nw, nb) = layer.parameter_counts(input);
            if layer.weights.len() != nw {
                return Err(CnnError::ShapeMismatch {
                    layer: i,
                    expected: nw,
                    found: layer.weights.len(),
                });
            }
            if layer.bias.len() != nb {
                return Err(CnnError::ShapeMismatch {
                    layer: i,
                    expected: nb,
                    found: layer.bias.len(),
                });
            }
            shapes.push(layer.output_shape(input)?);
        }
        Ok(shapes)
    }

    pub fn output_len(&self) -> Result<usize, CnnError> {
        Ok(self.shapes()?.last().map(Shape::len).unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
