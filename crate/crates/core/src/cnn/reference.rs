//! Sequential binary32 reference implementation.
//!
//! Written directly from the layer definitions, not from the generated
//! kernels, but it honors the same arithmetic contract: reductions run in
//! ascending index order starting from the bias (or the first element), the
//! multiply-accumulate is fused, and exp is `exp2(x * log2e)` rounded from
//! binary64. Simulated inference must match it bit for bit.

use super::{CnnError, LayerKind, LayerSpec, Model, Shape, Tensor, LOG2_E_BITS};

fn sfu(x: f32, g: fn(f64) -> f64) -> f32 {
    g(x as f64) as f32
}

pub fn reference_layer(layer: &LayerSpec, input: &Tensor) -> Result<Tensor, CnnError> {
    let out_shape = layer.output_shape(input.shape)?;
    let x = &input.data;
    let data = match (layer.kind, input.shape, out_shape) {
        (
            LayerKind::Conv {
                kernel_size: k,
                stride: s,
                padding: p,
                ..
            },
            Shape::Chw(c, h, w),
            Shape::Chw(oc, oh, ow),
        ) => {
            let mut out = Vec::with_capacity(out_shape.len());
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.bias[o];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    let inside = (0..h as isize).contains(&iy)
                                        && (0..w as isize).contains(&ix);
                                    let v = if inside {
                                        x[(ic * h + iy as usize) * w + ix as usize]
                                    } else {
                                        0.0
                                    };
                                    let wt = layer.weights[((o * c + ic) * k + ky) * k + kx];
                                    acc = v.mul_add(wt, acc);
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
            out
        }
        (
            LayerKind::MaxPool { size, stride },
            Shape::Chw(_, h, w),
            Shape::Chw(c, oh, ow),
        ) => {
            let mut out = Vec::with_capacity(out_shape.len());
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let at = |ky: usize, kx: usize| {
                            x[(ch * h + oy * stride + ky) * w + ox * stride + kx]
                        };
                        let mut m = at(0, 0);
                        for ky in 0..size {
                            for kx in 0..size {
                                if (ky, kx) != (0, 0) {
                                    m = m.max(at(ky, kx));
                                }
                            }
                        }
                        out.push(m);
                    }
                }
            }
            out
        }
        (LayerKind::Dense { out_features }, _, _) => {
            let n = x.len();
            (0..out_features)
                .map(|o| {
                    let row = &layer.weights[o * n..(o + 1) * n];
                    x.iter()
                        .zip(row)
                        .fold(layer.bias[o], |acc, (v, wt)| v.mul_add(*wt, acc))
                })
                .collect()
        }
        (LayerKind::Relu, _, _) => x.iter().map(|v| v.max(0.0)).collect(),
        (LayerKind::Softmax, _, _) => {
            // the kernel multiplies by -1.0 rather than flipping the sign bit
            #[allow(clippy::neg_multiply)]
            let neg_max = x[1..].iter().fold(x[0], |m, v| m.max(*v)) * -1.0;
            let log2e = f32::from_bits(LOG2_E_BITS);
            let e: Vec<f32> = x
                .iter()
                .map(|v| sfu((v + neg_max) * log2e, f64::exp2))
                .collect();
            let sum = e.iter().fold(0.0f32, |a, v| a + v);
            let r = sfu(sum, |s| 1.0 / s);
            e.iter().map(|v| v * r).collect()
        }
        _ => {
            return Err(CnnError::UnsupportedShape(format!(
                "{:?} on {}",
                layer.kind, input.shape
            )))
        }
    };
    Tensor::new(out_shape, data)
}

/// Runs the model layer by layer; the final layer's output.
pub fn reference_infer(model: &Model, image: &Tensor) -> Result<Tensor, CnnError> {
    model.shapes()?;
    if image.shape != model.input_shape {
        return Err(CnnError::Format(format!(
            "image shape {} does not match model input {}",
            image.shape, model.input_shape
        )));
    }
    let mut t = image.clone();
    for layer in &model.layers {
        t = reference_layer(layer, &t)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_gives_uniform_probabilities() {
        let model = Model {
            name: "zeros".into(),
            input_shape: Shape::Chw(1, 4, 4),
            layers: vec![
                LayerSpec {
                    kind: LayerKind::Dense { out_features: 10 },
                    weights: vec![0.0; 160],
                    bias: vec![0.0; 10],
                },
                LayerSpec::softmax(),
            ],
        };
        let p = reference_infer(&model, &Tensor::zeros(Shape::Chw(1, 4, 4))).unwrap();
        assert_eq!(p.shape, Shape::Flat(10));
        for v in &p.data {
            assert!((v - 0.1).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn identity_conv_then_softmax() {
        let model = Model {
            name: "id".into(),
            input_shape: Shape::Chw(1, 2, 2),
            layers: vec![
                LayerSpec {
                    kind: LayerKind::Conv {
                        out_channels: 1,
                        kernel_size: 1,
                        stride: 1,
                        padding: 0,
                    },
                    weights: vec![1.0],
                    bias: vec![0.0],
                },
                LayerSpec::softmax(),
            ],
        };
        let img = Tensor::new(Shape::Chw(1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = reference_infer(&model, &img).unwrap();
        let z: f64 = (0..4).map(|i| (i as f64).exp()).sum();
        for (i, v) in p.data.iter().enumerate() {
            assert!((*v as f64 - (i as f64).exp() / z).abs() < 1e-6);
        }
        assert_eq!(p.argmax(), 3);
    }

    #[test]
    fn padded_conv_reads_zeros() {
        let layer = LayerSpec {
            kind: LayerKind::Conv {
                out_channels: 1,
                kernel_size: 3,
                stride: 1,
                padding: 1,
            },
            weights: vec![1.0; 9],
            bias: vec![0.0],
        };
        let img = Tensor::new(Shape::Chw(1, 2, 2), vec![1.0; 4]).unwrap();
        let out = reference_layer(&layer, &img).unwrap();
        assert_eq!(out.data, vec![4.0; 4]);
    }

    #[test]
    fn wrong_image_shape() {
        let model = Model {
            name: "r".into(),
            input_shape: Shape::Chw(1, 2, 2),
            layers: vec![LayerSpec::relu()],
        };
        assert!(reference_infer(&model, &Tensor::zeros(Shape::Chw(1, 3, 2))).is_err());
    }
}
