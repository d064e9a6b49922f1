//! VGG-16 convolutional features for perceptual losses.

pub mod sgsw;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
pub use sgsw::{load_sgsw, read_sgsw, write_sgsw, SgswError};

/// `(name, in_channels, out_channels)` of the 13 convolutions, in order.
pub const VGG16: [(&str, usize, usize); 13] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv5_1", 512, 512),
    ("conv5_2", 512, 512),
    ("conv5_3", 512, 512),
];

/// Layers followed by a 2×2 max pool.
const POOL_AFTER: [&str; 4] = ["conv1_2", "conv2_2", "conv3_3", "conv4_3"];

/// Relu outputs of blocks conv2 and conv3.
pub const DEFAULT_LAYERS: [&str; 5] = ["conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3"];

/// Input sizes are cropped to a multiple of this.
pub const SIZE_MULTIPLE: usize = 16;
pub const MIN_SIZE: usize = 32;

pub fn layer_index(name: &str) -> Option<usize> {
    VGG16.iter().position(|(n, _, _)| *n == name)
}

/// Layers in the same block as `block` (e.g. `"conv3"`).
pub fn block_layers(block: &str) -> Vec<&'static str> {
    VGG16
        .iter()
        .map(|(n, _, _)| *n)
        .filter(|n| n.split('_').next() == Some(block))
        .collect()
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Weights(#[from] SgswError),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("image {height}x{width} is smaller than {MIN_SIZE}x{MIN_SIZE}")]
    TooSmall { height: usize, width: usize },
    #[error("image must be [3,H,W], got {0:?}")]
    NotRgb(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-channel input standardization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `[out, in, 3, 3]`
    pub weight: Tensor<f32>,
    /// `[out]`
    pub bias: Tensor<f32>,
}

/// The 13 convolutions of VGG-16 in network order.
#[derive(Debug, Clone)]
pub struct ConvNetWeights {
    layers: Vec<ConvLayer>,
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` with 24 bits, addressed by `(seed, stream, index)`.
fn hash_uniform(seed: u64, stream: u64, index: u64) -> f32 {
    let key = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream << 40) ^ index;
    (splitmix64(key) >> 40) as f32 / 16_777_216.0
}

impl ConvNetWeights {
    /// Validates names and shapes; extra or missing tensors are errors.
    pub fn from_named(tensors: Vec<(String, Tensor<f32>)>) -> Result<Self, SgswError> {
        let mut map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(SgswError::Duplicate(name));
            }
        }
        let mut layers = Vec::with_capacity(VGG16.len());
        for &(layer, cin, cout) in &VGG16 {
            let mut take = |name: String, expected: Vec<usize>| {
                let t = map.remove(&name).ok_or_else(|| SgswError::Missing(name.clone()))?;
                if t.shape() != expected.as_slice() {
                    return Err(SgswError::Shape {
                        name,
                        expected,
                        got: t.shape().to_vec(),
                    });
                }
                Ok(t)
            };
            let weight = take(weight_name(layer), vec![cout, cin, 3, 3])?;
            let bias = take(bias_name(layer), vec![cout])?;
            layers.push(ConvLayer { weight, bias });
        }
        if let Some(extra) = map.into_keys().next() {
            return Err(SgswError::Unexpected(extra));
        }
        Ok(Self { layers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SgswError> {
        Self::from_named(load_sgsw(path)?)
    }

    pub fn to_sgsw(&self) -> Vec<u8> {
        let names: Vec<(String, String)> =
            VGG16.iter().map(|(l, _, _)| (weight_name(l), bias_name(l))).collect();
        let mut items = Vec::new();
        for ((w, b), layer) in names.iter().zip(&self.layers) {
            items.push((w.as_str(), &layer.weight));
            items.push((b.as_str(), &layer.bias));
        }
        write_sgsw(items)
    }

    /// Deterministic He-uniform weights and small uniform biases.
    ///
    /// Stream `2·i` fills the weight of layer `i`, stream `2·i + 1` its bias.
    pub fn synthetic(seed: u64) -> Self {
        let layers = VGG16
            .iter()
            .enumerate()
            .map(|(i, &(_, cin, cout))| {
                let bound = (6.0 / (cin * 9) as f64).sqrt() as f32;
                let stream = 2 * i as u64;
                let weight = Tensor::from_fn([cout, cin, 3, 3], |j| {
                    (2.0 * hash_uniform(seed, stream, j as u64) - 1.0) * bound
                });
                let bias = Tensor::from_fn([cout], |j| {
                    (2.0 * hash_uniform(seed, stream + 1, j as u64) - 1.0) * 0.05
                });
                ConvLayer { weight, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayer> {
        layer_index(name).map(|i| &self.layers[i])
    }
}

/// Activations keyed by layer name, each `[C, h, w]`.
pub type FeatureSet = BTreeMap<String, Tensor<f32>>;

/// Crops `[C,H,W]` symmetrically so both sides are multiples of 16.
pub fn center_crop<T: Real>(tape: &mut Tape<T>, image: Var) -> Result<Var, FeatureError> {
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(FeatureError::NotRgb(s));
    }
    let (h, w) = (s[1], s[2]);
    let (ch, cw) = (h / SIZE_MULTIPLE * SIZE_MULTIPLE, w / SIZE_MULTIPLE * SIZE_MULTIPLE);
    if ch < MIN_SIZE || cw < MIN_SIZE {
        return Err(FeatureError::TooSmall { height: h, width: w });
    }
    let mut x = image;
    if ch != h {
        x = tape.slice(x, 1, (h - ch) / 2, ch)?;
    }
    if cw != w {
        x = tape.slice(x, 2, (w - cw) / 2, cw)?;
    }
    Ok(x)
}

fn normalize<T: Real>(tape: &mut Tape<T>, image: Var, norm: &Normalization) -> Result<Var, TensorError> {
    let channels = (0..3)
        .map(|c| {
            let ch = tape.slice(image, 0, c, 1)?;
            let ch = tape.add_scalar(ch, T::lit(-norm.mean[c]))?;
            tape.mul_scalar(ch, T::lit(1.0 / norm.std[c]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    tape.concat(&channels, 0)
}

/// Records the network up to the deepest requested layer and returns the
/// post-relu activation of each requested layer, in request order.
pub fn extract_on_tape<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    weights: &ConvNetWeights,
    layers: &[&str],
    norm: &Normalization,
) -> Result<Vec<Var>, FeatureError> {
    let wanted: Vec<usize> = layers
        .iter()
        .map(|l| layer_index(l).ok_or_else(|| FeatureError::UnknownLayer(l.to_string())))
        .collect::<Result<_, _>>()?;
    let Some(&deepest) = wanted.iter().max() else {
        return Ok(Vec::new());
    };
    let cropped = center_crop(tape, image)?;
    let mut x = normalize(tape, cropped, norm)?;
    let mut outputs = vec![None; VGG16.len()];
    for (i, &(name, _, _)) in VGG16.iter().enumerate().take(deepest + 1) {
        let layer = &weights.layers[i];
        let k = tape.constant(layer.weight.cast());
        let b = tape.constant(layer.bias.cast());
        let conv = tape.conv2d(x, k, Some(b))?;
        x = tape.relu(conv)?;
        outputs[i] = Some(x);
        if POOL_AFTER.contains(&name) && i < deepest {
            x = tape.maxpool2(x)?;
        }
    }
    Ok(wanted.iter().map(|&i| outputs[i].unwrap()).collect())
}

/// Forward-only extraction.
pub fn extract(
    image: &Tensor<f32>,
    weights: &ConvNetWeights,
    layers: &[&str],
    norm: &Normalization,
) -> Result<FeatureSet, FeatureError> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(image.clone());
    let vars = extract_on_tape(&mut tape, x, weights, layers, norm)?;
    Ok(layers
        .iter()
        .zip(vars)
        .map(|(name, v)| (name.to_string(), tape.value(v).clone()))
        .collect())
}
