//! Built-in model and data generators used for fixtures and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use super::{
    reference_infer, save_model, write_idx_images, write_idx_labels, CnnError, Dataset,
    LayerKind, LayerSpec, Model, Shape, Tensor,
};

/// Seed of the shipped `lenet-small` weights.
pub const LENET_SEED: u64 = 2024;
/// Seed and size of the shipped digits dataset.
pub const DIGITS_SEED: u64 = 7;
pub const DIGITS_COUNT: usize = 64;

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn conv(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize) -> LayerSpec {
    let fan_in = (in_c * k * k) as f32;
    LayerSpec {
        kind: LayerKind::Conv {
            out_channels: out_c,
            kernel_size: k,
            stride: 1,
            padding: 0,
        },
        weights: uniform(rng, out_c * in_c * k * k, (6.0 / fan_in).sqrt()),
        bias: uniform(rng, out_c, 0.1),
    }
}

/// LeNet-scale classifier for 1×28×28 inputs:
/// Conv 1→4 k5, Relu, MaxPool 2, Conv 4→8 k5, Relu, MaxPool 2, Dense 10, Softmax.
/// Weights come from a seeded He-style uniform initializer.
pub fn lenet_small(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = conv(&mut rng, 1, 4, 5);
    let c2 = conv(&mut rng, 4, 8, 5);
    let fan_in = 8 * 4 * 4;
    let dense = LayerSpec {
        kind: LayerKind::Dense { out_features: 10 },
        weights: uniform(&mut rng, 10 * fan_in, (6.0 / fan_in as f32).sqrt()),
        bias: uniform(&mut rng, 10, 0.1),
    };
    Model {
        name: "lenet-small".into(),
        input_shape: Shape::Chw(1, 28, 28),
        layers: vec![
            c1,
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            c2,
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            dense,
            LayerSpec::softmax(),
        ],
    }
}

// Seven-segment layout on a 5-wide, 9-tall grid: a, b, c, d, e, f, g.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Seeded 28×28 digit-like images: seven-segment glyphs with random
/// placement, stroke intensity and background noise. Returns raw
/// pixel bytes and labels, ready for IDX encoding.
pub fn synthetic_digits(seed: u64, count: usize) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let digit = rng.gen_range(0..10u8);
        let scale = 2;
        let (gw, gh) = (5 * scale, 9 * scale + 2);
        let x0 = rng.gen_range(2..=(28 - gw - 2));
        let y0 = rng.gen_range(1..=(28 - gh - 1));
        let ink = rng.gen_range(170..=255u32);
        let mut px: Vec<u8> = (0..784).map(|_| rng.gen_range(0..24u8)).collect();
        let mut stroke = |x: usize, y: usize| {
            if x < 28 && y < 28 {
                px[y * 28 + x] = ink as u8;
            }
        };
        let seg = SEGMENTS[digit as usize];
        let top = y0;
        let mid = y0 + gh / 2;
        let bot = y0 + gh - 1;
        let right = x0 + gw - 1;
        for t in 0..2 {
            for x in x0..=right {
                if seg[0] {
                    stroke(x, top + t);
                }
                if seg[6] {
                    stroke(x, mid + t);
                }
                if seg[3] {
                    stroke(x, bot - t);
                }
            }
            for y in top..=mid {
                if seg[5] {
                    stroke(x0 + t, y);
                }
                if seg[1] {
                    stroke(right - t, y);
                }
            }
            for y in mid..=bot {
                if seg[4] {
                    stroke(x0 + t, y);
                }
                if seg[2] {
                    stroke(right - t, y);
                }
            }
        }
        images.push(px);
        labels.push(digit);
    }
    (images, labels)
}

/// [`synthetic_digits`] as a normalized [`Dataset`].
pub fn synthetic_dataset(seed: u64, count: usize) -> Dataset {
    let (images, labels) = synthetic_digits(seed, count);
    Dataset {
        images: images
            .into_iter()
            .map(|px| Tensor {
                shape: Shape::Chw(1, 28, 28),
                data: px.iter().map(|&p| p as f32 / 255.0).collect(),
            })
            .collect(),
        labels,
    }
}

/// Writes the shipped fixture set into `dir`: `lenet-small.json`,
/// `lenet-small.weights.bin`, `digits-images.idx`, `digits-labels.idx` and
/// `golden-0.json` (the reference output for image 0, as bit patterns).
pub fn write_fixtures(dir: &Path) -> Result<(), CnnError> {
    std::fs::create_dir_all(dir).map_err(|e| CnnError::io(dir, e))?;
    let model = lenet_small(LENET_SEED);
    save_model(&model, dir, "lenet-small")?;
    let (pixels, labels) = synthetic_digits(DIGITS_SEED, DIGITS_COUNT);
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| CnnError::io(&p, e))
    };
    write("digits-images.idx", write_idx_images(28, 28, &pixels))?;
    write("digits-labels.idx", write_idx_labels(&labels))?;
    let image0 = &synthetic_dataset(DIGITS_SEED, 1).images[0];
    let probs = reference_infer(&model, image0)?;
    let bits: Vec<String> = probs.bits().iter().map(|b| format!("0x{b:08X}")).collect();
    let doc = serde_json::json!({ "image": 0, "bits": bits, "probs": probs.data });
    write(
        "golden-0.json",
        (serde_json::to_string_pretty(&doc).expect("json") + "\n").into_bytes(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_small_shapes() {
        let m = lenet_small(1);
        assert_eq!(m.layers.len(), 8);
        let shapes = m.shapes().unwrap();
        assert_eq!(shapes[3], Shape::Chw(4, 12, 12));
        assert_eq!(shapes[6], Shape::Chw(8, 4, 4));
        assert_eq!(m.output_len().unwrap(), 10);
        assert_eq!(m, lenet_small(1));
        assert_ne!(m, lenet_small(2));
    }

    #[test]
    fn digits_are_deterministic_and_normalized() {
        let (a, la) = synthetic_digits(3, 20);
        let (b, lb) = synthetic_digits(3, 20);
        assert_eq!((a, la), (b, lb));
        let ds = synthetic_dataset(3, 20);
        assert_eq!(ds.len(), 20);
        assert!(ds.labels.iter().all(|l| *l < 10));
        for img in &ds.images {
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.data.iter().any(|v| *v > 0.6));
        }
    }
}
