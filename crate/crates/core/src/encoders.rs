//! Frozen image and text encoders.
//!
//! Downstream code only sees the [`ImageEncoder`] / [`TextEncoder`] traits.
//! The toy encoders are deterministic, dependency-free stand-ins; real
//! backbones register constructors under their own names in an
//! [`EncoderRegistry`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::params::hex_digest;
use crate::tensor::Matrix;

/// `height x width` grid of `dim`-dimensional patch features, stored as a
/// `(height*width) x dim` matrix with row index `i * width + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub values: Matrix,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, values: Matrix) -> Result<Self> {
        if values.rows != height * width {
            return Err(Error::shape(format!(
                "{} feature rows for a {height}x{width} grid",
                values.rows
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numeric {
                stage: "feature grid".into(),
            });
        }
        Ok(FeatureGrid {
            height,
            width,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        self.values.row(i * self.width + j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub class_token: Vec<f64>,
    /// Full token sequence, one row per token. Only the class token is used
    /// by the grounding head.
    pub tokens: Matrix,
    pub source: String,
}

pub trait ImageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode(&self, image: &RgbImage) -> Result<FeatureGrid>;
    /// Digest of all weights; must never change over the encoder's life.
    fn checksum(&self) -> String;
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<TextEmbedding>;
    fn checksum(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image: String,
    pub text: String,
    pub seed: u64,
    pub dim: usize,
    pub text_dim: usize,
    pub patch: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image: "toy".into(),
            text: "toy".into(),
            seed: 0,
            dim: 32,
            text_dim: 32,
            patch: 14,
        }
    }
}

/// Patch mean-pool followed by a fixed random linear map to `dim` channels.
/// Pixel values are centered at zero before pooling so that feature
/// directions, not just magnitudes, differ between colors.
pub struct ToyImageEncoder {
    patch: usize,
    projection: Matrix,
}

impl ToyImageEncoder {
    pub fn new(seed: u64, patch: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f1f_0000_0000_0001);
        ToyImageEncoder {
            patch,
            projection: Matrix::randn(3, dim, 1.0, &mut rng),
        }
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn dim(&self) -> usize {
        self.projection.cols
    }

    fn encode(&self, image: &RgbImage) -> Result<FeatureGrid> {
        let p = self.patch;
        if image.width % p != 0 || image.height % p != 0 || image.width == 0 || image.height == 0 {
            return Err(Error::shape(format!(
                "image {}x{} is not divisible by patch size {p}",
                image.width, image.height
            )));
        }
        let (h, w) = (image.height / p, image.width / p);
        let mut pooled = Matrix::zeros(h * w, 3);
        let norm = 1.0 / (p * p) as f64;
        for i in 0..h {
            for j in 0..w {
                let mut acc = [0.0; 3];
                for y in i * p..(i + 1) * p {
                    for x in j * p..(j + 1) * p {
                        let px = image.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += px[c] - 0.5;
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    pooled.set(i * w + j, c, a * norm);
                }
            }
        }
        FeatureGrid::new(h, w, pooled.matmul(&self.projection))
    }

    fn checksum(&self) -> String {
        digest_matrix("toy-image", &self.projection)
    }
}

/// Whitespace tokenizer plus a seeded embedding per token; the class token
/// is the mean of the token embeddings.
pub struct ToyTextEncoder {
    seed: u64,
    dim: usize,
}

impl ToyTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        ToyTextEncoder { seed, dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        Matrix::randn(1, self.dim, 1.0, &mut rng).data
    }
}

impl TextEncoder for ToyTextEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        let lowered = text.trim().to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::validation("cannot encode empty text"));
        }
        let mut seq = Matrix::zeros(tokens.len(), self.dim);
        let mut class_token = vec![0.0; self.dim];
        for (r, tok) in tokens.iter().enumerate() {
            let v = self.token_vector(tok);
            for (c, x) in class_token.iter_mut().zip(&v) {
                *c += x / tokens.len() as f64;
            }
            seq.row_mut(r).copy_from_slice(&v);
        }
        Ok(TextEmbedding {
            class_token,
            tokens: seq,
            source: text.to_string(),
        })
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"toy-text");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.dim as u64).to_le_bytes());
        hex_digest(hasher)
    }
}

fn digest_matrix(tag: &str, m: &Matrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    for v in &m.data {
        hasher.update(v.to_le_bytes());
    }
    hex_digest(hasher)
}

type ImageCtor = Box<dyn Fn(&EncoderConfig) -> Result<Box<dyn ImageEncoder>> + Send + Sync>;
type TextCtor = Box<dyn Fn(&EncoderConfig) -> Result<Box<dyn TextEncoder>> + Send + Sync>;

/// Name-keyed encoder constructors. `toy` is always registered.
pub struct EncoderRegistry {
    image: BTreeMap<String, ImageCtor>,
    text: BTreeMap<String, TextCtor>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut reg = EncoderRegistry {
            image: BTreeMap::new(),
            text: BTreeMap::new(),
        };
        reg.register_image("toy", |cfg| {
            Ok(Box::new(ToyImageEncoder::new(cfg.seed, cfg.patch, cfg.dim)))
        });
        reg.register_text("toy", |cfg| {
            Ok(Box::new(ToyTextEncoder::new(cfg.seed, cfg.text_dim)))
        });
        reg
    }
}

impl EncoderRegistry {
    pub fn register_image<F>(&mut self, name: &str, ctor: F)
    where
        F: Fn(&EncoderConfig) -> Result<Box<dyn ImageEncoder>> + Send + Sync + 'static,
    {
        self.image.insert(name.to_string(), Box::new(ctor));
    }

    pub fn register_text<F>(&mut self, name: &str, ctor: F)
    where
        F: Fn(&EncoderConfig) -> Result<Box<dyn TextEncoder>> + Send + Sync + 'static,
    {
        self.text.insert(name.to_string(), Box::new(ctor));
    }

    pub fn image_encoder(&self, cfg: &EncoderConfig) -> Result<Box<dyn ImageEncoder>> {
        let ctor = self.image.get(&cfg.image).ok_or_else(|| {
            Error::Config(format!(
                "image encoder `{}` is not registered (available: {})",
                cfg.image,
                self.image.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        ctor(cfg)
    }

    pub fn text_encoder(&self, cfg: &EncoderConfig) -> Result<Box<dyn TextEncoder>> {
        let ctor = self.text.get(&cfg.text).ok_or_else(|| {
            Error::Config(format!(
                "text encoder `{}` is not registered (available: {})",
                cfg.text,
                self.text.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        ctor(cfg)
    }
}
