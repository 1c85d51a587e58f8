//! Image branch: hierarchical four-scale vision encoder and the feature
//! distillation head aligning the final scale with the language-vision
//! teacher feature.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear_resize, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, DwConvLayer, LinearLayer, MlpLayer, NormLayer, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::types::EmbeddingMap;

pub const NUM_SCALES: usize = 4;
pub const SCALE_STRIDES: [usize; NUM_SCALES] = [4, 8, 16, 32];
pub const DEFAULT_CHANNELS: [usize; NUM_SCALES] = [16, 32, 64, 128];

/// One mixing block: depthwise 3x3 spatial mixing and a per-position MLP,
/// each pre-normalized with a residual connection.
struct MixBlock {
    norm1: NormLayer,
    dw: DwConvLayer,
    norm2: NormLayer,
    mlp: MlpLayer,
}

impl MixBlock {
    fn init(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, c: usize) -> Self {
        Self {
            norm1: NormLayer::init(store, &format!("{name}.norm1"), c),
            dw: DwConvLayer::init(store, rng, &format!("{name}.dw"), c),
            norm2: NormLayer::init(store, &format!("{name}.norm2"), c),
            mlp: MlpLayer::init(store, rng, &format!("{name}.mlp"), c, 2 * c, c),
        }
    }

    fn apply(&self, s: &mut Session, x: Var) -> Var {
        let y = self.norm1.apply(s, x);
        let y = self.dw.apply(s, y);
        let x = s.graph.add(x, y);
        let y = self.norm2.apply(s, x);
        let y = self.mlp.apply(s, y);
        s.graph.add(x, y)
    }
}

struct Stage {
    down: Conv2dLayer,
    blocks: [MixBlock; 2],
}

/// Hierarchical encoder producing four scales at strides 4, 8, 16, 32.
pub struct VisionEncoder {
    stages: Vec<Stage>,
    pub channels: [usize; NUM_SCALES],
}

impl VisionEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, channels: [usize; NUM_SCALES]) -> Self {
        let mut stages = Vec::with_capacity(NUM_SCALES);
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("vision.stage{}", i + 1);
            let stride = if i == 0 { 4 } else { 2 };
            let down =
                Conv2dLayer::init(store, rng, &format!("{name}.down"), cin, c, stride, stride, 0);
            let blocks = [
                MixBlock::init(store, rng, &format!("{name}.block1"), c),
                MixBlock::init(store, rng, &format!("{name}.block2"), c),
            ];
            stages.push(Stage { down, blocks });
            cin = c;
        }
        Self { stages, channels }
    }

    /// Encode an image node into the four pyramid scales.
    pub fn apply(&self, s: &mut Session, image: Var) -> Result<[Var; NUM_SCALES]> {
        let (h, w, c) = s.graph.dims3(image);
        if c != 3 {
            return Err(Error::Shape(format!("vision encoder expects 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
            return Err(Error::Shape(format!(
                "image dims {h}x{w} must be multiples of 32; pad to {ph}x{pw}"
            )));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(NUM_SCALES);
        for stage in &self.stages {
            x = stage.down.apply(s, x);
            for b in &stage.blocks {
                x = b.apply(s, x);
            }
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// How the teacher feature supervises the final scale: against the spatial
/// 1/32 teacher map, or against mean-pooled global vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Spatial,
    Pooled,
}

impl Default for DistillMode {
    fn default() -> Self {
        DistillMode::Spatial
    }
}

/// Trainable 1x1 projection bridging the encoder's final width to the
/// teacher embedding width.
pub struct DistillHead {
    pub proj: LinearLayer,
}

impl DistillHead {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, c4: usize, d: usize) -> Self {
        Self { proj: LinearLayer::init(store, rng, "distill.head", c4, d) }
    }
}

/// Correlation distillation loss: project the final-scale feature to the
/// teacher width and take the mean over positions of (1 - cosine). The
/// teacher map enters as a constant, so no gradient reaches it. Returns the
/// loss node and the count of zero-norm positions encountered.
pub fn distill_features(
    s: &mut Session,
    final_feature: Var,
    teacher: &EmbeddingMap,
    head: &DistillHead,
    mode: DistillMode,
) -> Result<(Var, usize)> {
    let (h, w, _) = s.graph.dims3(final_feature);
    let projected = head.proj.apply(s, final_feature);
    let (_, _, d) = s.graph.dims3(projected);
    if teacher.dim().2 != d {
        return Err(Error::Shape(format!(
            "teacher width {} does not match distill head output {d}",
            teacher.dim().2
        )));
    }
    let teacher_aligned: Array3<f64> = if teacher.dim().0 == h && teacher.dim().1 == w {
        teacher.clone()
    } else {
        bilinear_resize(&teacher.view(), h, w)
    };
    match mode {
        DistillMode::Spatial => Ok(s.graph.cosine_distance_to(projected, teacher_aligned)),
        DistillMode::Pooled => {
            let pooled = s.graph.avg_pool(projected, h, w);
            let teacher_pooled = {
                let mut acc = Array3::zeros((1, 1, d));
                for py in 0..h {
                    for px in 0..w {
                        for c in 0..d {
                            acc[(0, 0, c)] += teacher_aligned[(py, px, c)];
                        }
                    }
                }
                acc / (h * w) as f64
            };
            Ok(s.graph.cosine_distance_to(pooled, teacher_pooled))
        }
    }
}
