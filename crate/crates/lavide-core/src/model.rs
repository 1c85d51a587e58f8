//! Model assembly: the full map/image change detector, the color-encoded
//! variant, and the semantic-segmentation baseline, all over one parameter
//! store so checkpoints and ablations can reason about the parameter tree.

use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{view3, Var};
use crate::baselines::{render_map_color, ColorPalette};
use crate::data::DataSample;
use crate::error::{Error, Result};
use crate::losses::{change_loss, contrast_loss, total_loss, ContrastProjections, LossBreakdown, LossConfig};
use crate::lvm::{backend_from_config, LvmBackend, LvmConfig};
use crate::map_branch::{build_text_map, convert_map_to_text, ObjectEncoder, Ocopt, PromptMode};
use crate::moe::{downsample_text_embedding, ExpertBank, FuseClassifier, MoeConfig};
use crate::nn::{LinearLayer, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::types::{CategoricalMap, CategoryVocabulary, ChangeMap, EmbeddingMap, SatImage};
use crate::vision_branch::{
    distill_features, DistillHead, DistillMode, VisionEncoder, NUM_SCALES,
};

/// Which pipeline the model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Language-vision discrimination: text-encoded maps.
    Lavide,
    /// Color-encoded maps through a trainable 1x1 lift; everything
    /// downstream is identical.
    LavideColor,
    /// Semantic segmentation head for the category-discrimination baseline.
    CategorySeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub lvm: LvmConfig,
    pub d_obj: usize,
    pub prompt_mode: PromptMode,
    pub vision_channels: [usize; NUM_SCALES],
    pub distill_mode: DistillMode,
    pub use_distill: bool,
    pub use_ocopt: bool,
    pub moe: MoeConfig,
    pub d_fuse: usize,
    pub loss: LossConfig,
    /// Palette for the color-encoded variant; taken from the dataset.
    pub palette: Option<Vec<[u8; 3]>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lavide,
            lvm: LvmConfig::default(),
            d_obj: 32,
            prompt_mode: PromptMode::Ensemble,
            vision_channels: crate::vision_branch::DEFAULT_CHANNELS,
            distill_mode: DistillMode::Spatial,
            use_distill: true,
            use_ocopt: true,
            moe: MoeConfig::default(),
            d_fuse: 64,
            loss: LossConfig::default(),
            palette: None,
        }
    }
}

/// The assembled network plus its parameter store.
pub struct LavideModel {
    pub config: ModelConfig,
    pub vocab: CategoryVocabulary,
    pub store: ParamStore,
    backend: Arc<dyn LvmBackend>,
    palette: Option<ColorPalette>,
    object_encoder: Option<ObjectEncoder>,
    ocopt: Option<Ocopt>,
    color_lift: Option<LinearLayer>,
    vision: VisionEncoder,
    distill_head: Option<DistillHead>,
    banks: Vec<ExpertBank>,
    fuse: Option<FuseClassifier>,
    contrast: Option<ContrastProjections>,
    seg_head: Option<LinearLayer>,
}

/// A sample with all frozen per-sample features precomputed: the text (or
/// color) embedding input, the one-hot map and the teacher feature.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub stem: String,
    pub one_hot: Array3<f64>,
    pub embed_input: Array3<f64>,
    pub image: Array3<f64>,
    pub teacher: Option<EmbeddingMap>,
    pub gt: ChangeMap,
    pub post_map: Option<CategoricalMap>,
    pub pre_map: CategoricalMap,
}

/// All graph nodes the losses need, plus the session that owns them.
pub struct ForwardPass<'a> {
    pub session: Session<'a>,
    pub logits: Var,
    pub g_t: Var,
    pub pyramid: [Var; NUM_SCALES],
    pub route_weights: [Var; NUM_SCALES],
    pub teacher: Option<EmbeddingMap>,
}

pub struct SegForwardPass<'a> {
    pub session: Session<'a>,
    pub logits: Var,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.loss.margin) {
            return Err(Error::Config(format!(
                "loss.margin {} must be in [0, 1)",
                self.loss.margin
            )));
        }
        if self.loss.lambda1 < 0.0 || self.loss.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.moe.num_experts == 0 {
            return Err(Error::Config("moe.num_experts must be at least 1".into()));
        }
        if self.d_obj == 0 || self.d_fuse == 0 || self.moe.d_diff == 0 || self.moe.hidden == 0 {
            return Err(Error::Config("module widths must be positive".into()));
        }
        Ok(())
    }
}

impl LavideModel {
    pub fn new(config: ModelConfig, vocab: CategoryVocabulary, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let backend = backend_from_config(&config.lvm)?;
        let d = backend.embed_dim();
        let k = vocab.len();
        let mut rng = SplitMix64::tagged("model-init", init_seed);
        let mut store = ParamStore::new();

        let palette = match config.kind {
            ModelKind::LavideColor => {
                let colors = config.palette.clone().ok_or_else(|| {
                    Error::Config("color-encoded variant needs a palette".into())
                })?;
                let p = ColorPalette::new(colors)?;
                if p.len() != k {
                    return Err(Error::Config(format!(
                        "palette has {} colors but vocabulary has {k} categories",
                        p.len()
                    )));
                }
                Some(p)
            }
            _ => None,
        };

        // Map-side embedding producer.
        let color_lift = match config.kind {
            ModelKind::LavideColor => Some(LinearLayer::init(&mut store, &mut rng, "map.lift", 3, d)),
            _ => None,
        };
        let (object_encoder, ocopt) = match config.kind {
            ModelKind::CategorySeg => (None, None),
            _ if config.use_ocopt => (
                Some(ObjectEncoder::init(&mut store, &mut rng, k, config.d_obj)),
                Some(Ocopt::init(&mut store, &mut rng, config.d_obj, d)),
            ),
            _ => (None, None),
        };

        let vision = VisionEncoder::init(&mut store, &mut rng, config.vision_channels);
        let c4 = config.vision_channels[NUM_SCALES - 1];

        let (distill_head, banks, fuse, contrast, seg_head) = match config.kind {
            ModelKind::CategorySeg => {
                let total_c: usize = config.vision_channels.iter().sum();
                let seg = LinearLayer::init(&mut store, &mut rng, "seg.head", total_c, k);
                (None, Vec::new(), None, None, Some(seg))
            }
            _ => {
                let distill_head = if config.use_distill {
                    Some(DistillHead::init(&mut store, &mut rng, c4, d))
                } else {
                    None
                };
                let banks = (0..NUM_SCALES)
                    .map(|i| {
                        ExpertBank::init(
                            &mut store,
                            &mut rng,
                            i,
                            d + config.vision_channels[i],
                            &config.moe,
                        )
                    })
                    .collect();
                let fuse = FuseClassifier::init(&mut store, &mut rng, config.moe.d_diff, config.d_fuse);
                let contrast = ContrastProjections::init(&mut store, &mut rng, d, c4, d);
                (distill_head, banks, Some(fuse), Some(contrast), None)
            }
        };

        Ok(Self {
            config,
            vocab,
            store,
            backend,
            palette,
            object_encoder,
            ocopt,
            color_lift,
            vision,
            distill_head,
            banks,
            fuse,
            contrast,
            seg_head,
        })
    }

    pub fn backend(&self) -> &Arc<dyn LvmBackend> {
        &self.backend
    }

    pub fn embed_dim(&self) -> usize {
        self.backend.embed_dim()
    }

    /// Precompute the frozen per-sample features.
    pub fn prepare(&self, sample: &DataSample) -> Result<PreparedSample> {
        self.prepare_parts(
            &sample.pre_map,
            &sample.image,
            sample.change.clone(),
            sample.post_map.clone(),
            sample.stem.clone(),
        )
    }

    fn prepare_parts(
        &self,
        pre_map: &CategoricalMap,
        image: &SatImage,
        gt: ChangeMap,
        post_map: Option<CategoricalMap>,
        stem: String,
    ) -> Result<PreparedSample> {
        if pre_map.num_categories() != self.vocab.len() {
            return Err(Error::Config(format!(
                "map has {} categories, model was built for {}",
                pre_map.num_categories(),
                self.vocab.len()
            )));
        }
        if (pre_map.height(), pre_map.width()) != (image.height(), image.width()) {
            return Err(Error::Shape(format!(
                "map {}x{} vs image {}x{}",
                pre_map.height(),
                pre_map.width(),
                image.height(),
                image.width()
            )));
        }
        let embed_input = match self.config.kind {
            ModelKind::Lavide => {
                let grid = convert_map_to_text(pre_map, &self.vocab)?;
                build_text_map(&grid, &self.vocab, self.backend.as_ref(), self.config.prompt_mode)?
            }
            ModelKind::LavideColor => {
                let palette = self.palette.as_ref().expect("color variant keeps a palette");
                render_map_color(pre_map, palette)?.0
            }
            ModelKind::CategorySeg => Array3::zeros((0, 0, 0)),
        };
        let teacher = if self.config.kind != ModelKind::CategorySeg && self.config.use_distill {
            Some(self.backend.image_encode(image)?)
        } else {
            None
        };
        Ok(PreparedSample {
            stem,
            one_hot: pre_map.to_one_hot(),
            embed_input,
            image: image.0.clone(),
            teacher,
            gt,
            post_map,
            pre_map: pre_map.clone(),
        })
    }

    /// Full pipeline on a prepared sample. Errors are annotated with the
    /// stage they came from.
    pub fn forward_prepared(&self, prep: &PreparedSample) -> Result<ForwardPass<'_>> {
        if self.config.kind == ModelKind::CategorySeg {
            return Err(Error::Config(
                "the segmentation baseline has no change forward; use forward_seg".into(),
            ));
        }
        let mut s = Session::new(&self.store);
        let (h, w, _) = prep.image.dim();

        // Map branch.
        let embed_in = s.input(prep.embed_input.clone().into_dyn());
        let t_embed = match &self.color_lift {
            Some(lift) => lift.apply(&mut s, embed_in),
            None => embed_in,
        };
        let g_t = match (&self.object_encoder, &self.ocopt) {
            (Some(enc), Some(ocopt)) => {
                let one_hot = s.input(prep.one_hot.clone().into_dyn());
                let objects = enc
                    .apply(&mut s, one_hot)
                    .map_err(|e| stage(e, "object encoder"))?;
                ocopt.apply(&mut s, objects, t_embed).map_err(|e| stage(e, "ocopt"))?
            }
            _ => t_embed,
        };

        // Image branch.
        let image = s.input(prep.image.clone().into_dyn());
        let pyramid = self.vision.apply(&mut s, image).map_err(|e| stage(e, "vision encoder"))?;

        // MoE discrimination per scale.
        let mut diffs = Vec::with_capacity(NUM_SCALES);
        let mut weights = Vec::with_capacity(NUM_SCALES);
        for i in 0..NUM_SCALES {
            let (sh, sw, _) = s.graph.dims3(pyramid[i]);
            let g_t_i = downsample_text_embedding(&mut s, g_t, (sh, sw))
                .map_err(|e| stage(e, "text downsampling"))?;
            let (d_i, w_i) = self.banks[i]
                .moe_difference_with_weights(&mut s, g_t_i, pyramid[i])
                .map_err(|e| stage(e, "moe discriminator"))?;
            diffs.push(d_i);
            weights.push(w_i);
        }
        let diffs: [Var; NUM_SCALES] = [diffs[0], diffs[1], diffs[2], diffs[3]];
        let route_weights: [Var; NUM_SCALES] = [weights[0], weights[1], weights[2], weights[3]];

        let logits = self
            .fuse
            .as_ref()
            .expect("change models have a classifier")
            .apply(&mut s, &diffs, (h, w))
            .map_err(|e| stage(e, "fusion"))?;

        Ok(ForwardPass {
            session: s,
            logits,
            g_t,
            pyramid,
            route_weights,
            teacher: prep.teacher.clone(),
        })
    }

    /// Forward from raw inputs: map and image in, all loss inputs out.
    pub fn forward(&self, pre_map: &CategoricalMap, image: &SatImage) -> Result<ForwardPass<'_>> {
        let placeholder = ChangeMap::new(ndarray::Array2::zeros((image.height(), image.width())))?;
        let prep = self.prepare_parts(pre_map, image, placeholder, None, String::new())?;
        self.forward_prepared(&prep)
    }

    /// Compose the three losses over a finished forward pass. Returns the
    /// total-loss node, the per-component values and the count of zero-norm
    /// distillation positions.
    pub fn losses(&self, fp: &mut ForwardPass<'_>, gt: &ChangeMap) -> Result<(Var, LossBreakdown, usize)> {
        let cfg = &self.config.loss;
        let l_change = change_loss(&mut fp.session, fp.logits, gt, cfg.class_weights)
            .map_err(|e| stage(e, "change loss"))?;
        let (l_distill, zero_count) = match (&self.distill_head, &fp.teacher) {
            (Some(head), Some(teacher)) => {
                let (l, zeros) = distill_features(
                    &mut fp.session,
                    fp.pyramid[NUM_SCALES - 1],
                    teacher,
                    head,
                    self.config.distill_mode,
                )
                .map_err(|e| stage(e, "distillation"))?;
                (Some(l), zeros)
            }
            _ => (None, 0),
        };
        let l_contrast = contrast_loss(
            &mut fp.session,
            fp.g_t,
            fp.pyramid[NUM_SCALES - 1],
            gt,
            cfg,
            self.contrast.as_ref().expect("change models have contrast projections"),
        )
        .map_err(|e| stage(e, "contrast loss"))?;
        let total = total_loss(&mut fp.session, l_change, l_distill, l_contrast, cfg)?;
        let breakdown = LossBreakdown {
            total: fp.session.graph.scalar_value(total),
            change: fp.session.graph.scalar_value(l_change),
            distill: l_distill.map_or(0.0, |v| fp.session.graph.scalar_value(v)),
            contrast: fp.session.graph.scalar_value(l_contrast),
        };
        Ok((total, breakdown, zero_count))
    }

    /// Change prediction: argmax over the two logits.
    pub fn predict_prepared(&self, prep: &PreparedSample) -> Result<ChangeMap> {
        match self.config.kind {
            ModelKind::CategorySeg => {
                let seg = self.predict_seg_prepared(prep)?;
                crate::baselines::category_discriminate(&seg, &prep.pre_map)
            }
            _ => {
                let fp = self.forward_prepared(prep)?;
                let logits = view3(fp.session.graph.value(fp.logits));
                let (h, w, _) = logits.dim();
                let mut out = ndarray::Array2::zeros((h, w));
                for y in 0..h {
                    for x in 0..w {
                        out[(y, x)] = u8::from(logits[(y, x, 1)] > logits[(y, x, 0)]);
                    }
                }
                ChangeMap::new(out)
            }
        }
    }

    pub fn predict(&self, pre_map: &CategoricalMap, image: &SatImage) -> Result<ChangeMap> {
        let placeholder = ChangeMap::new(ndarray::Array2::zeros((image.height(), image.width())))?;
        let prep = self.prepare_parts(pre_map, image, placeholder, None, String::new())?;
        self.predict_prepared(&prep)
    }

    /// Segmentation forward (baseline): fused pyramid features through a
    /// per-position K-class head, upsampled to image resolution.
    pub fn forward_seg(&self, image: &Array3<f64>) -> Result<SegForwardPass<'_>> {
        let seg_head = self.seg_head.as_ref().ok_or_else(|| {
            Error::Config("this model has no segmentation head; build it with kind=category-seg".into())
        })?;
        let mut s = Session::new(&self.store);
        let (h, w, _) = image.dim();
        let img = s.input(image.clone().into_dyn());
        let pyramid = self.vision.apply(&mut s, img).map_err(|e| stage(e, "vision encoder"))?;
        let (h1, w1, _) = s.graph.dims3(pyramid[0]);
        let mut ups = vec![pyramid[0]];
        for &p in &pyramid[1..] {
            ups.push(s.graph.resize_bilinear(p, h1, w1));
        }
        let cat = s.graph.concat_c(&ups);
        let logits = seg_head.apply(&mut s, cat);
        let logits = s.graph.resize_bilinear(logits, h, w);
        Ok(SegForwardPass { session: s, logits })
    }

    pub fn predict_seg_prepared(&self, prep: &PreparedSample) -> Result<CategoricalMap> {
        let fp = self.forward_seg(&prep.image)?;
        let logits = fp.session.graph.value(fp.logits).clone();
        let arr3 = logits.into_dimensionality::<ndarray::Ix3>().expect("seg logits are 3-d");
        CategoricalMap::from_one_hot(&arr3)
    }

    /// Parameter names whose prefix marks the map-side embedding producer.
    pub fn map_side_prefixes() -> [&'static str; 3] {
        ["map.lift", "map.object_encoder", "map.ocopt"]
    }
}

fn stage(e: Error, name: &str) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("[{name}] {m}")),
        Error::Config(m) => Error::Config(format!("[{name}] {m}")),
        Error::Data(m) => Error::Data(format!("[{name}] {m}")),
        Error::Numeric(m) => Error::Numeric(format!("[{name}] {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            lvm: LvmConfig { backend: "toy".into(), seed: 0, embed_dim: 16 },
            d_obj: 8,
            vision_channels: [4, 8, 16, 32],
            moe: MoeConfig { num_experts: 2, d_diff: 8, hidden: 8 },
            d_fuse: 16,
            ..ModelConfig::default()
        }
    }

    fn scene() -> crate::data::SceneQuad {
        generate_scene(&SceneConfig { seed: 1, ..SceneConfig::default() }).unwrap()
    }

    #[test]
    fn forward_shape_contracts() {
        let q = scene();
        let vocab = crate::data::default_vocabulary(4);
        let model = LavideModel::new(small_config(), vocab, 0).unwrap();
        let fp = model.forward(&q.pre_map, &q.image).unwrap();
        assert_eq!(fp.session.graph.shape(fp.logits), &[64, 64, 2]);
        assert_eq!(fp.session.graph.shape(fp.g_t), &[64, 64, 16]);
        assert_eq!(fp.session.graph.shape(fp.pyramid[0]), &[16, 16, 4]);
        assert_eq!(fp.session.graph.shape(fp.pyramid[3]), &[2, 2, 32]);
        assert_eq!(fp.session.graph.shape(fp.route_weights[0]), &[16, 16, 2]);
    }

    #[test]
    fn forward_is_deterministic() {
        let q = scene();
        let vocab = crate::data::default_vocabulary(4);
        let model = LavideModel::new(small_config(), vocab, 0).unwrap();
        let a = model.forward(&q.pre_map, &q.image).unwrap();
        let b = model.forward(&q.pre_map, &q.image).unwrap();
        assert_eq!(a.session.graph.value(a.logits), b.session.graph.value(b.logits));
    }

    #[test]
    fn predict_is_binary() {
        let q = scene();
        let vocab = crate::data::default_vocabulary(4);
        let model = LavideModel::new(small_config(), vocab, 0).unwrap();
        let pred = model.predict(&q.pre_map, &q.image).unwrap();
        assert_eq!(pred.data().dim(), (64, 64));
        assert!(pred.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn color_variant_parameter_diff_is_the_lift() {
        let vocab = crate::data::default_vocabulary(4);
        let lang = LavideModel::new(small_config(), vocab.clone(), 0).unwrap();
        let mut color_cfg = small_config();
        color_cfg.kind = ModelKind::LavideColor;
        color_cfg.palette = Some(ColorPalette::default_for(4).colors().to_vec());
        let color = LavideModel::new(color_cfg, vocab, 0).unwrap();

        let names = |m: &LavideModel| -> std::collections::BTreeMap<String, Vec<usize>> {
            m.store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
        };
        let a = names(&lang);
        let b = names(&color);
        for (n, shape) in &b {
            match a.get(n) {
                Some(s) => assert_eq!(s, shape, "shape mismatch for {n}"),
                None => assert!(
                    n.starts_with("map.lift"),
                    "unexpected extra parameter {n} outside the map-side producer"
                ),
            }
        }
        for n in a.keys() {
            assert!(b.contains_key(n), "parameter {n} missing from color variant");
        }
    }

    #[test]
    fn ocopt_off_shrinks_only_the_map_subtree() {
        let vocab = crate::data::default_vocabulary(4);
        let with = LavideModel::new(small_config(), vocab.clone(), 0).unwrap();
        let mut cfg = small_config();
        cfg.use_ocopt = false;
        let without = LavideModel::new(cfg, vocab, 0).unwrap();
        let diff = with.store.total_len() - without.store.total_len();
        let subtree =
            with.store.subtree_len("map.object_encoder") + with.store.subtree_len("map.ocopt");
        assert_eq!(diff, subtree);
    }

    #[test]
    fn seg_baseline_predicts_valid_maps() {
        let q = scene();
        let vocab = crate::data::default_vocabulary(4);
        let mut cfg = small_config();
        cfg.kind = ModelKind::CategorySeg;
        let model = LavideModel::new(cfg, vocab, 0).unwrap();
        let prep = model
            .prepare(&crate::data::DataSample {
                stem: "s".into(),
                pre_map: q.pre_map.clone(),
                image: q.image.clone(),
                change: q.change.clone(),
                post_map: Some(q.post_map.clone()),
            })
            .unwrap();
        let seg = model.predict_seg_prepared(&prep).unwrap();
        assert_eq!(seg.indices().dim(), (64, 64));
        assert!(seg.indices().iter().all(|&v| v < 4));
        let change = model.predict_prepared(&prep).unwrap();
        assert_eq!(change.data().dim(), (64, 64));
    }

    /// Stage-by-stage oracle: composing the public module operations by
    /// hand must reproduce the pipeline forward bit for bit.
    #[test]
    fn forward_matches_stagewise_composition() {
        let q = generate_scene(&SceneConfig {
            height: 32,
            width: 32,
            seed: 2,
            ..SceneConfig::default()
        })
        .unwrap();
        let vocab = crate::data::default_vocabulary(4);
        let model = LavideModel::new(small_config(), vocab, 3).unwrap();
        let prep = model
            .prepare(&crate::data::DataSample {
                stem: "s".into(),
                pre_map: q.pre_map.clone(),
                image: q.image.clone(),
                change: q.change.clone(),
                post_map: None,
            })
            .unwrap();
        let fp = model.forward_prepared(&prep).unwrap();

        let mut s = Session::new(&model.store);
        let t = s.input(prep.embed_input.clone().into_dyn());
        let one_hot = s.input(prep.one_hot.clone().into_dyn());
        let objects = model.object_encoder.as_ref().unwrap().apply(&mut s, one_hot).unwrap();
        let g_t = model.ocopt.as_ref().unwrap().apply(&mut s, objects, t).unwrap();
        let image = s.input(prep.image.clone().into_dyn());
        let pyramid = model.vision.apply(&mut s, image).unwrap();
        let mut diffs = Vec::new();
        for i in 0..NUM_SCALES {
            let (sh, sw, _) = s.graph.dims3(pyramid[i]);
            let g_t_i = downsample_text_embedding(&mut s, g_t, (sh, sw)).unwrap();
            diffs.push(model.banks[i].moe_difference(&mut s, g_t_i, pyramid[i]).unwrap());
        }
        let arr = [diffs[0], diffs[1], diffs[2], diffs[3]];
        let logits = model.fuse.as_ref().unwrap().apply(&mut s, &arr, (32, 32)).unwrap();

        assert_eq!(fp.session.graph.value(fp.logits), s.graph.value(logits));
        assert_eq!(fp.session.graph.value(fp.g_t), s.graph.value(g_t));
    }

    #[test]
    fn losses_compose() {
        let q = scene();
        let vocab = crate::data::default_vocabulary(4);
        let model = LavideModel::new(small_config(), vocab, 0).unwrap();
        let prep = model
            .prepare(&crate::data::DataSample {
                stem: "s".into(),
                pre_map: q.pre_map.clone(),
                image: q.image.clone(),
                change: q.change.clone(),
                post_map: None,
            })
            .unwrap();
        let mut fp = model.forward_prepared(&prep).unwrap();
        let (_, breakdown, _) = model.losses(&mut fp, &prep.gt).unwrap();
        assert!(breakdown.total.is_finite());
        assert!(breakdown.change > 0.0);
        assert!(breakdown.distill >= 0.0 && breakdown.distill <= 2.0);
        assert!(breakdown.contrast >= 0.0);
        let expect = breakdown.change + breakdown.distill + breakdown.contrast;
        assert!((breakdown.total - expect).abs() < 1e-12);
    }
}
