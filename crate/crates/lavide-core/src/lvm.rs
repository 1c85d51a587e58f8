//! Language-vision backend interface plus the deterministic toy backend
//! used for offline training and tests.
//!
//! The toy text encoder hashes whitespace tokens with FNV-1a, expands each
//! hash into a SplitMix64 stream of uniform [-1, 1) entries, and returns the
//! L2-normalized mean over tokens. The toy image encoder is a frozen stack
//! of five stride-2 3x3 convolutions with tanh, L2-normalized per position.
//! Both are pure functions of (input, seed, embed_dim), so an external
//! script can reproduce them number for number.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_dims, im2col};
use crate::error::{Error, Result};
use crate::rng::{fnv1a64, SplitMix64};
use crate::types::{EmbeddingMap, SatImage};

/// A language-vision model: a text encoder and a spatial image encoder.
///
/// `text_encode` must be pure and return unit-norm vectors; `image_encode`
/// returns a 1/32-resolution grid of unit-norm vectors.
pub trait LvmBackend: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn text_encode(&self, prompt: &str) -> Array1<f64>;
    fn image_encode(&self, image: &SatImage) -> Result<EmbeddingMap>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyLvmConfig {
    pub seed: u64,
    pub embed_dim: usize,
}

impl Default for ToyLvmConfig {
    fn default() -> Self {
        Self { seed: 0, embed_dim: 64 }
    }
}

const IMAGE_ENCODER_LAYERS: usize = 5;
const MIN_IMAGE_SIDE: usize = 32;

/// Frozen toy backend. Weights are generated once from the seed and never
/// change; it plays the role of the pretrained teacher.
pub struct ToyLvm {
    cfg: ToyLvmConfig,
    // Per layer: (weights (9*cin, cout), bias (cout)).
    conv: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ToyLvm {
    pub fn new(cfg: ToyLvmConfig) -> Result<Self> {
        if cfg.embed_dim == 0 {
            return Err(Error::Config("lvm.embed_dim must be positive".into()));
        }
        let d = cfg.embed_dim;
        let mut rng = SplitMix64::tagged("toy-image-encoder", cfg.seed);
        let mut conv = Vec::with_capacity(IMAGE_ENCODER_LAYERS);
        let mut cin = 3;
        for _ in 0..IMAGE_ENCODER_LAYERS {
            let bound = (6.0 / (9.0 * (cin + d) as f64)).sqrt();
            let n = 9 * cin * d;
            let w: Vec<f64> = (0..n).map(|_| rng.range(-bound, bound)).collect();
            let w = Array2::from_shape_vec((9 * cin, d), w).unwrap();
            let b: Vec<f64> = (0..d).map(|_| rng.range(-0.1, 0.1)).collect();
            conv.push((w, Array1::from_vec(b)));
            cin = d;
        }
        Ok(Self { cfg, conv })
    }

    pub fn config(&self) -> ToyLvmConfig {
        self.cfg
    }

    /// Snapshot of the frozen weights, for teacher-immutability checks.
    pub fn weight_snapshot(&self) -> Vec<f64> {
        self.conv
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

impl LvmBackend for ToyLvm {
    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn text_encode(&self, prompt: &str) -> Array1<f64> {
        let d = self.cfg.embed_dim;
        let lower = prompt.to_lowercase();
        let tokens: Vec<&str> = lower.split_whitespace().collect();
        let mut sum = Array1::<f64>::zeros(d);
        let count = if tokens.is_empty() {
            sum += &token_embedding("", self.cfg.seed, d);
            1
        } else {
            for tok in &tokens {
                sum += &token_embedding(tok, self.cfg.seed, d);
            }
            tokens.len()
        };
        let mean = sum / count as f64;
        normalize(mean)
    }

    fn image_encode(&self, image: &SatImage) -> Result<EmbeddingMap> {
        let (h, w) = (image.height(), image.width());
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image {h}x{w} too small for the toy encoder; needs at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        let mut x = image.0.clone();
        for (w_mat, b) in &self.conv {
            x = conv_tanh(&x, w_mat, b);
        }
        let (oh, ow, d) = x.dim();
        for py in 0..oh {
            for px in 0..ow {
                let norm = x
                    .slice(ndarray::s![py, px, ..])
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm < 1e-12 {
                    // Unreachable in practice (biases keep activations away
                    // from zero) but preserves the unit-norm postcondition.
                    x[(py, px, 0)] = 1.0;
                    for c in 1..d {
                        x[(py, px, c)] = 0.0;
                    }
                } else {
                    for c in 0..d {
                        x[(py, px, c)] /= norm;
                    }
                }
            }
        }
        Ok(x)
    }
}

fn token_embedding(token: &str, seed: u64, d: usize) -> Array1<f64> {
    let mut rng = SplitMix64::keyed(fnv1a64(token.as_bytes()), seed);
    Array1::from_shape_fn(d, |_| rng.symmetric())
}

fn normalize(v: Array1<f64>) -> Array1<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut e = Array1::zeros(v.len());
        e[0] = 1.0;
        e
    } else {
        v / norm
    }
}

fn conv_tanh(x: &Array3<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (h, wd, _cin) = x.dim();
    let (ho, wo) = conv_out_dims(h, wd, 3, 2, 1);
    let cols = im2col(&x.view(), 3, 2, 1);
    let mut y = cols.dot(w);
    for mut row in y.rows_mut() {
        row += b;
    }
    y.mapv_inplace(f64::tanh);
    crate::autodiff::to_standard(y).into_shape_with_order((ho, wo, b.len())).unwrap()
}

/// Backend selection: `lvm.backend` is "toy" or "external"; only the toy
/// backend ships here, external ones plug in behind [`LvmBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LvmConfig {
    pub backend: String,
    pub seed: u64,
    pub embed_dim: usize,
}

impl Default for LvmConfig {
    fn default() -> Self {
        Self { backend: "toy".into(), seed: 0, embed_dim: 64 }
    }
}

pub fn backend_from_config(cfg: &LvmConfig) -> Result<Arc<dyn LvmBackend>> {
    match cfg.backend.as_str() {
        "toy" => Ok(Arc::new(ToyLvm::new(ToyLvmConfig { seed: cfg.seed, embed_dim: cfg.embed_dim })?)),
        "external" => Err(Error::Config(
            "lvm.backend=external requires an adapter implementing LvmBackend; none is registered".into(),
        )),
        other => Err(Error::Config(format!("unknown lvm.backend '{other}' (expected toy or external)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64, d: usize) -> ToyLvm {
        ToyLvm::new(ToyLvmConfig { seed, embed_dim: d }).unwrap()
    }

    #[test]
    fn text_encode_is_pure() {
        let b = toy(0, 64);
        assert_eq!(b.text_encode("the forest"), b.text_encode("the forest"));
    }

    #[test]
    fn text_encode_is_order_invariant() {
        let b = toy(0, 64);
        assert_eq!(b.text_encode("the forest"), b.text_encode("forest the"));
    }

    #[test]
    fn text_encode_unit_norm() {
        let b = toy(7, 32);
        for s in ["water", "", "  ", "A photo of the urban area."] {
            let v = b.text_encode(s);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm} for {s:?}");
        }
    }

    #[test]
    fn empty_prompt_uses_null_token() {
        let b = toy(0, 16);
        let empty = b.text_encode("");
        let spaces = b.text_encode("   \t ");
        assert_eq!(empty, spaces);
    }

    #[test]
    fn case_insensitive() {
        let b = toy(0, 16);
        assert_eq!(b.text_encode("Forest"), b.text_encode("forest"));
    }

    #[test]
    fn image_encode_shape_and_norm() {
        let b = toy(0, 64);
        let img = SatImage::new(Array3::from_elem((64, 64, 3), 0.5)).unwrap();
        let e = b.image_encode(&img).unwrap();
        assert_eq!(e.dim(), (2, 2, 64));
        for py in 0..2 {
            for px in 0..2 {
                let n = e.slice(ndarray::s![py, px, ..]).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn image_encode_ceil_dims() {
        let b = toy(0, 8);
        let img = SatImage::new(Array3::from_elem((33, 40, 3), 0.1)).unwrap();
        let e = b.image_encode(&img).unwrap();
        // ceil(33/32) = 2, ceil(40/32) = 2
        assert_eq!(e.dim(), (2, 2, 8));
    }

    #[test]
    fn image_encode_rejects_small_images() {
        let b = toy(0, 8);
        let img = SatImage::new(Array3::from_elem((16, 64, 3), 0.1)).unwrap();
        assert!(matches!(b.image_encode(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn image_encode_deterministic() {
        let b1 = toy(3, 16);
        let b2 = toy(3, 16);
        let img = SatImage::new(Array3::from_shape_fn((32, 32, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 10) as f64 / 10.0
        }))
        .unwrap();
        assert_eq!(b1.image_encode(&img).unwrap(), b2.image_encode(&img).unwrap());
    }

    // Frozen values computed by an independent script (integer FNV/SplitMix
    // arithmetic plus numpy float ops).
    #[test]
    fn text_encode_matches_external_oracle() {
        let b = toy(0, 64);
        let v = b.text_encode("forest");
        let expect = [
            -0.22142227348900217,
            -0.080323306223658283,
            0.1872232798817442,
            -0.0072472806109368853,
            -0.0049705183232551997,
            0.053723438132688643,
        ];
        for (i, e) in expect.iter().enumerate() {
            assert!((v[i] - e).abs() < 1e-12, "component {i}: {} vs {e}", v[i]);
        }
    }

    #[test]
    fn image_encode_matches_external_oracle_on_zero_image() {
        let b = toy(0, 64);
        let img = SatImage::new(Array3::zeros((64, 64, 3))).unwrap();
        let e = b.image_encode(&img).unwrap();
        assert_eq!(e.dim(), (2, 2, 64));
        let at00 = [
            -0.15866903311132299,
            -0.076659704199364964,
            -0.14692306210262054,
            0.031035464093085482,
        ];
        let at11 = [
            -0.098892426446670692,
            -0.10077462213235652,
            -0.022410900047763877,
            0.014441975498401987,
        ];
        for c in 0..4 {
            assert!((e[(0, 0, c)] - at00[c]).abs() < 1e-10, "pos (0,0) ch {c}");
            assert!((e[(1, 1, c)] - at11[c]).abs() < 1e-10, "pos (1,1) ch {c}");
        }
    }

    #[test]
    fn distinct_tokens_distinct_embeddings() {
        let b = toy(0, 64);
        let a = b.text_encode("water");
        let c = b.text_encode("forest");
        assert!((&a - &c).iter().map(|v| v.abs()).sum::<f64>() > 1e-3);
    }

    #[test]
    fn backend_factory() {
        assert!(backend_from_config(&LvmConfig::default()).is_ok());
        let ext = LvmConfig { backend: "external".into(), ..Default::default() };
        assert!(matches!(backend_from_config(&ext), Err(Error::Config(_))));
        let bad = LvmConfig { backend: "nope".into(), ..Default::default() };
        assert!(matches!(backend_from_config(&bad), Err(Error::Config(_))));
    }
}
