//! Labelled image sets with activation-coded pixels.
//!
//! File layout (little endian): magic `FSDS`, sample count u32, height u16,
//! width u16, channels u16, classes u16, then per sample `h·w·c` pixel codes
//! (HWC) followed by a u16 label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{float_logits, Precision};
use super::EngineError;
use crate::model::{ModelParams, NetworkSpec, Shape3};

const MAGIC: &[u8; 4] = b"FSDS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, classes: usize, samples: Vec<Sample>) -> Self {
        Self { height, width, channels, classes, samples }
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `fraction` of the samples.
    pub fn split(mut self, fraction: f64) -> (Dataset, Dataset) {
        let keep = self.samples.len() - (self.samples.len() as f64 * fraction).round() as usize;
        let tail = self.samples.split_off(keep);
        let other = Dataset { samples: tail, ..self.clone() };
        (self, other)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.samples.len() * (self.shape().len() + 2));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for v in [self.height, self.width, self.channels, self.classes] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&s.image);
            out.extend_from_slice(&s.label.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let bad = |m: &str| EngineError::ShapeMismatch(format!("dataset: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let (h, w, c, classes) = (u16_at(8), u16_at(10), u16_at(12), u16_at(14));
        let stride = h * w * c + 2;
        if bytes.len() != 16 + count * stride {
            return Err(bad("length does not match header"));
        }
        let samples = bytes[16..]
            .chunks_exact(stride)
            .map(|chunk| {
                let (image, label) = chunk.split_at(stride - 2);
                let label = u16::from_le_bytes([label[0], label[1]]);
                if label as usize >= classes {
                    return Err(bad("label out of range"));
                }
                Ok(Sample { image: image.to_vec(), label })
            })
            .collect::<Result<_, _>>()?;
        Ok(Dataset::new(h, w, c, classes, samples))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, EngineError> {
        let bytes = std::fs::read(path).map_err(crate::model::ModelError::from)?;
        Self::from_bytes(&bytes)
    }
}

fn random_image(rng: &mut ChaCha8Rng, len: usize, max_code: u8) -> Vec<u8> {
    (0..len).map(|_| rng.gen_range(0..=max_code)).collect()
}

/// Uniformly random images and labels.
pub fn random(shape: Shape3, classes: usize, count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| Sample { image: random_image(&mut rng, shape.len(), 64), label: rng.gen_range(0..classes) as u16 })
        .collect();
    Dataset::new(shape.height, shape.width, shape.channels, classes, samples)
}

/// Random images labelled by the float argmax of a teacher network.
pub fn teacher_labelled(net: &NetworkSpec, teacher: &ModelParams, count: usize, seed: u64) -> Dataset {
    let shape = net.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let image = random_image(&mut rng, shape.len(), 64);
            let logits = float_logits(net, teacher, Precision::Float, &image);
            let label = argmax(&logits) as u16;
            Sample { image, label }
        })
        .collect();
    Dataset::new(shape.height, shape.width, shape.channels, net.class_count, samples)
}

/// `classes` noisy prototypes: each class lights a different channel/column
/// band, so a small network separates them easily.
pub fn prototypes(shape: Shape3, classes: usize, count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|i| {
            let label = i % classes;
            let mut image = random_image(&mut rng, shape.len(), 12);
            for y in 0..shape.height {
                for x in 0..shape.width {
                    for c in 0..shape.channels {
                        let band = (x * classes / shape.width.max(1) + c) % classes;
                        if band == label {
                            image[(y * shape.width + x) * shape.channels + c] += 40;
                        }
                    }
                }
            }
            Sample { image, label: label as u16 }
        })
        .collect();
    Dataset::new(shape.height, shape.width, shape.channels, classes, samples)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
