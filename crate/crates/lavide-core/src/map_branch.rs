//! Map branch: category-to-text conversion, prompt-ensembled text
//! embeddings, the per-pixel text embedding map T, the object encoder O and
//! the object context optimization module producing G_t.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::lvm::LvmBackend;
use crate::nn::{ConvBlock, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::types::{CategoricalMap, CategoryVocabulary, EmbeddingMap, TextGrid};

pub const NUM_PROMPTS: usize = 7;

/// The seven fixed prompt templates wrapping a category name.
pub fn build_prompt_set(category: &str) -> [String; NUM_PROMPTS] {
    [
        format!("There is the {category} in the scene."),
        format!("A photo of the {category} in the scene."),
        format!("A photo of the {category}."),
        format!("The {category}."),
        format!("The {category} in the scene."),
        format!("A satellite photo of the {category} in the scene."),
        format!("A satellite photo of the {category}."),
    ]
}

/// Which prompts feed the text embedding: the full 7-prompt ensemble or a
/// single template (0-based index), used by the prompt-design ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    Ensemble,
    Single(usize),
}

impl Default for PromptMode {
    fn default() -> Self {
        PromptMode::Ensemble
    }
}

impl PromptMode {
    /// Parse "ensemble" or "P1".."P7" (case-insensitive).
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_lowercase();
        if lower == "ensemble" {
            return Ok(PromptMode::Ensemble);
        }
        if let Some(num) = lower.strip_prefix('p') {
            if let Ok(i) = num.parse::<usize>() {
                if (1..=NUM_PROMPTS).contains(&i) {
                    return Ok(PromptMode::Single(i - 1));
                }
            }
        }
        Err(Error::Config(format!("invalid prompt mode '{s}' (expected P1..P7 or ensemble)")))
    }
}

/// Arithmetic mean of the 7 prompt embeddings. The mean is not
/// re-normalized, so cross-prompt agreement keeps its magnitude.
pub fn ensemble_text_embedding(category: &str, backend: &dyn LvmBackend) -> Array1<f64> {
    let mut sum = Array1::zeros(backend.embed_dim());
    for prompt in build_prompt_set(category) {
        sum += &backend.text_encode(&prompt);
    }
    sum / NUM_PROMPTS as f64
}

/// Embedding for one category under the selected prompt mode.
pub fn category_embedding(category: &str, mode: PromptMode, backend: &dyn LvmBackend) -> Array1<f64> {
    match mode {
        PromptMode::Ensemble => ensemble_text_embedding(category, backend),
        PromptMode::Single(i) => backend.text_encode(&build_prompt_set(category)[i]),
    }
}

/// Map each pixel to the name of its argmax category; ties resolve to the
/// lowest index.
pub fn convert_map_to_text(map: &CategoricalMap, vocab: &CategoryVocabulary) -> Result<TextGrid> {
    if map.num_categories() != vocab.len() {
        return Err(Error::Config(format!(
            "map has {} categories but vocabulary has {}",
            map.num_categories(),
            vocab.len()
        )));
    }
    let names = map.indices().mapv(|i| vocab.name(i).to_string());
    Ok(TextGrid::new(names))
}

/// Gather per-pixel text embeddings. The K category embeddings are encoded
/// once and broadcast, so the encoder is called O(K) times, not O(HW).
pub fn build_text_map(
    grid: &TextGrid,
    vocab: &CategoryVocabulary,
    backend: &dyn LvmBackend,
    mode: PromptMode,
) -> Result<EmbeddingMap> {
    let d = backend.embed_dim();
    let table: Vec<Array1<f64>> =
        vocab.names().iter().map(|n| category_embedding(n, mode, backend)).collect();
    let (h, w) = (grid.height(), grid.width());
    let mut out = Array3::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let name = &grid.names()[(y, x)];
            let k = vocab.index_of(name).ok_or_else(|| {
                Error::Data(format!("unknown category '{name}' at pixel ({y}, {x})"))
            })?;
            out.slice_mut(ndarray::s![y, x, ..]).assign(&table[k]);
        }
    }
    Ok(out)
}

/// Shallow object encoder: three conv blocks at full resolution,
/// K -> 32 -> 32 -> d_obj channels.
pub struct ObjectEncoder {
    blocks: [ConvBlock; 3],
    pub in_channels: usize,
    pub d_obj: usize,
}

impl ObjectEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, k: usize, d_obj: usize) -> Self {
        let name = "map.object_encoder";
        let blocks = [
            ConvBlock::init(store, rng, &format!("{name}.block1"), k, 32),
            ConvBlock::init(store, rng, &format!("{name}.block2"), 32, 32),
            ConvBlock::init(store, rng, &format!("{name}.block3"), 32, d_obj),
        ];
        Self { blocks, in_channels: k, d_obj }
    }

    /// `one_hot` is the (H, W, K) one-hot map.
    pub fn apply(&self, s: &mut Session, one_hot: Var) -> Result<Var> {
        let (_, _, c) = s.graph.dims3(one_hot);
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "object encoder expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut x = one_hot;
        for b in &self.blocks {
            x = b.apply(s, x);
        }
        Ok(x)
    }
}

/// Object context optimization: fuses O into T. Three conv blocks over the
/// channel concatenation O || T, with the first block's output added to the
/// third's to retain the original text features.
pub struct Ocopt {
    blocks: [ConvBlock; 3],
    pub d_obj: usize,
    pub d: usize,
}

impl Ocopt {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, d_obj: usize, d: usize) -> Self {
        let name = "map.ocopt";
        let blocks = [
            ConvBlock::init(store, rng, &format!("{name}.block1"), d_obj + d, d),
            ConvBlock::init(store, rng, &format!("{name}.block2"), d, d),
            ConvBlock::init(store, rng, &format!("{name}.block3"), d, d),
        ];
        Self { blocks, d_obj, d }
    }

    pub fn apply(&self, s: &mut Session, objects: Var, text: Var) -> Result<Var> {
        let (oh, ow, oc) = s.graph.dims3(objects);
        let (th, tw, tc) = s.graph.dims3(text);
        if (oh, ow) != (th, tw) {
            return Err(Error::Shape(format!(
                "ocopt spatial mismatch: objects {oh}x{ow} vs text {th}x{tw}"
            )));
        }
        if oc != self.d_obj || tc != self.d {
            return Err(Error::Shape(format!(
                "ocopt channel mismatch: got ({oc}, {tc}), expected ({}, {})",
                self.d_obj, self.d
            )));
        }
        let x = s.graph.concat_c(&[objects, text]);
        let y1 = self.blocks[0].apply(s, x);
        let y2 = self.blocks[1].apply(s, y1);
        let y3 = self.blocks[2].apply(s, y2);
        Ok(s.graph.add(y1, y3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lvm::{ToyLvm, ToyLvmConfig};
    use ndarray::{arr2, Array2};

    fn toy(seed: u64, d: usize) -> ToyLvm {
        ToyLvm::new(ToyLvmConfig { seed, embed_dim: d }).unwrap()
    }

    #[test]
    fn prompt_templates_verbatim() {
        let p = build_prompt_set("forest");
        assert_eq!(p[0], "There is the forest in the scene.");
        assert_eq!(p[1], "A photo of the forest in the scene.");
        assert_eq!(p[2], "A photo of the forest.");
        assert_eq!(p[3], "The forest.");
        assert_eq!(p[4], "The forest in the scene.");
        assert_eq!(p[5], "A satellite photo of the forest in the scene.");
        assert_eq!(p[6], "A satellite photo of the forest.");
        assert_eq!(p.len(), 7);
    }

    #[test]
    fn prompt_mode_parsing() {
        assert_eq!(PromptMode::parse("ensemble").unwrap(), PromptMode::Ensemble);
        assert_eq!(PromptMode::parse("P1").unwrap(), PromptMode::Single(0));
        assert_eq!(PromptMode::parse("p7").unwrap(), PromptMode::Single(6));
        assert!(PromptMode::parse("P8").is_err());
        assert!(PromptMode::parse("P0").is_err());
        assert!(PromptMode::parse("xyz").is_err());
    }

    /// Backend stub returning a fixed vector per distinct prompt.
    struct StubLvm {
        dim: usize,
        table: std::collections::HashMap<String, Array1<f64>>,
    }

    impl crate::lvm::LvmBackend for StubLvm {
        fn embed_dim(&self) -> usize {
            self.dim
        }
        fn text_encode(&self, prompt: &str) -> Array1<f64> {
            self.table[prompt].clone()
        }
        fn image_encode(&self, _: &crate::types::SatImage) -> crate::error::Result<crate::types::EmbeddingMap> {
            unimplemented!("text-only stub")
        }
    }

    #[test]
    fn ensemble_of_identical_embeddings_is_that_embedding() {
        let v = Array1::from_vec(vec![0.3, -0.4, 0.5]);
        let table = build_prompt_set("x").iter().map(|p| (p.clone(), v.clone())).collect();
        let backend = StubLvm { dim: 3, table };
        let got = ensemble_text_embedding("x", &backend);
        for (a, b) in got.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_of_orthonormal_embeddings_has_norm_sqrt7_over_7() {
        let table = build_prompt_set("x")
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut e = Array1::zeros(7);
                e[i] = 1.0;
                (p.clone(), e)
            })
            .collect();
        let backend = StubLvm { dim: 7, table };
        let got = ensemble_text_embedding("x", &backend);
        let norm = got.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 7f64.sqrt() / 7.0).abs() < 1e-12, "norm {norm}");
    }

    #[test]
    fn ensemble_matches_per_prompt_average() {
        let backend = toy(0, 64);
        let mut sum = Array1::<f64>::zeros(64);
        for p in build_prompt_set("water") {
            sum += &backend.text_encode(&p);
        }
        let expected = sum / 7.0;
        let got = ensemble_text_embedding("water", &backend);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    // Frozen values from an independent script that encodes each of the
    // seven prompts separately and averages.
    #[test]
    fn ensemble_matches_external_oracle() {
        let backend = toy(0, 64);
        let got = ensemble_text_embedding("water", &backend);
        let expect = [
            0.036550310556843026,
            -0.084961486346559631,
            0.074978184330314307,
            -0.1790076387861021,
        ];
        for (i, e) in expect.iter().enumerate() {
            assert!((got[i] - e).abs() < 1e-12, "component {i}: {} vs {e}", got[i]);
        }
    }

    #[test]
    fn ensemble_is_prompt_order_invariant() {
        // The mean over a fixed prompt set does not depend on the order the
        // prompts are encoded in.
        let backend = toy(1, 32);
        let mut prompts = build_prompt_set("urban area").to_vec();
        let mut sum_fwd = Array1::<f64>::zeros(32);
        for p in &prompts {
            sum_fwd += &backend.text_encode(p);
        }
        prompts.reverse();
        let mut sum_rev = Array1::<f64>::zeros(32);
        for p in &prompts {
            sum_rev += &backend.text_encode(p);
        }
        for (a, b) in sum_fwd.iter().zip(sum_rev.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn convert_argmax_and_ties() {
        let vocab =
            CategoryVocabulary::new(vec!["water".into(), "forest".into(), "urban".into()]).unwrap();
        let mut data = ndarray::Array3::zeros((1, 2, 3));
        data[(0, 0, 1)] = 1.0; // one-hot forest
        data[(0, 1, 0)] = 0.5; // tie water/forest -> water
        data[(0, 1, 1)] = 0.5;
        let map = CategoricalMap::from_one_hot(&data).unwrap();
        let grid = convert_map_to_text(&map, &vocab).unwrap();
        assert_eq!(grid.names()[(0, 0)], "forest");
        assert_eq!(grid.names()[(0, 1)], "water");
    }

    #[test]
    fn convert_rejects_k_mismatch() {
        let vocab = CategoryVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let map = CategoricalMap::new(Array2::zeros((2, 2)), 3).unwrap();
        assert!(matches!(convert_map_to_text(&map, &vocab), Err(Error::Config(_))));
    }

    #[test]
    fn single_category_map() {
        let vocab = CategoryVocabulary::new(vec!["land".into()]).unwrap();
        let map = CategoricalMap::new(Array2::zeros((2, 2)), 1).unwrap();
        let grid = convert_map_to_text(&map, &vocab).unwrap();
        assert!(grid.names().iter().all(|n| n == "land"));
    }

    #[test]
    fn text_map_gather_consistency() {
        let backend = toy(0, 16);
        let vocab = CategoryVocabulary::new(vec!["water".into(), "forest".into()]).unwrap();
        let map = CategoricalMap::new(arr2(&[[0usize, 1], [1, 0]]), 2).unwrap();
        let grid = convert_map_to_text(&map, &vocab).unwrap();
        let t = build_text_map(&grid, &vocab, &backend, PromptMode::Ensemble).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let expect = ensemble_text_embedding(vocab.name(map.indices()[(y, x)]), &backend);
                for c in 0..16 {
                    assert!((t[(y, x, c)] - expect[c]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn text_map_checkerboard_has_two_distinct_vectors() {
        let backend = toy(0, 16);
        let vocab = CategoryVocabulary::new(vec!["water".into(), "forest".into()]).unwrap();
        let map = CategoricalMap::new(arr2(&[[0usize, 1], [1, 0]]), 2).unwrap();
        let grid = convert_map_to_text(&map, &vocab).unwrap();
        let t = build_text_map(&grid, &vocab, &backend, PromptMode::Ensemble).unwrap();
        assert_eq!(t.slice(ndarray::s![0, 0, ..]), t.slice(ndarray::s![1, 1, ..]));
        assert_ne!(t.slice(ndarray::s![0, 0, ..]), t.slice(ndarray::s![0, 1, ..]));
    }

    #[test]
    fn text_map_unknown_name_is_data_error() {
        let backend = toy(0, 8);
        let vocab = CategoryVocabulary::new(vec!["water".into()]).unwrap();
        let grid = TextGrid::new(Array2::from_elem((1, 1), "lava".to_string()));
        match build_text_map(&grid, &vocab, &backend, PromptMode::Ensemble) {
            Err(Error::Data(msg)) => assert!(msg.contains("lava") && msg.contains("(0, 0)")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn object_encoder_shape_contract() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(0);
        let enc = ObjectEncoder::init(&mut store, &mut rng, 4, 32);
        let mut s = Session::new(&store);
        let x = s.input(ndarray::Array3::<f64>::zeros((6, 5, 4)).into_dyn());
        let y = enc.apply(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[6, 5, 32]);
    }

    #[test]
    fn ocopt_shape_and_skip_isolation() {
        let (d_obj, d) = (3, 5);
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let ocopt = Ocopt::init(&mut store, &mut rng, d_obj, d);

        // Zero blocks 2 and 3 entirely: the output must equal block 1's.
        let mut zeroed = store.clone();
        for i in 0..zeroed.len() {
            let id = crate::nn::ParamId(i);
            let name = zeroed.name(id).to_string();
            if name.contains("block2") || name.contains("block3") {
                zeroed.value_mut(id).fill(0.0);
            }
        }

        let o = ndarray::Array3::from_shape_fn((4, 4, d_obj), |(y, x, c)| {
            ((y + 2 * x + 3 * c) % 5) as f64 / 5.0 - 0.3
        });
        let t = ndarray::Array3::from_shape_fn((4, 4, d), |(y, x, c)| {
            ((3 * y + x + c) % 7) as f64 / 7.0 - 0.2
        });

        let mut s = Session::new(&zeroed);
        let ov = s.input(o.clone().into_dyn());
        let tv = s.input(t.clone().into_dyn());
        let out = ocopt.apply(&mut s, ov, tv).unwrap();
        assert_eq!(s.graph.shape(out), &[4, 4, d]);

        // Recompute block 1 alone on the same inputs.
        let mut s2 = Session::new(&zeroed);
        let ov2 = s2.input(o.into_dyn());
        let tv2 = s2.input(t.into_dyn());
        let cat = s2.graph.concat_c(&[ov2, tv2]);
        let y1 = ocopt.blocks[0].apply(&mut s2, cat);
        assert_eq!(s.graph.value(out), s2.graph.value(y1));
    }

    #[test]
    fn ocopt_rejects_spatial_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let ocopt = Ocopt::init(&mut store, &mut rng, 2, 3);
        let mut s = Session::new(&store);
        let o = s.input(ndarray::Array3::<f64>::zeros((4, 4, 2)).into_dyn());
        let t = s.input(ndarray::Array3::<f64>::zeros((2, 4, 3)).into_dyn());
        assert!(matches!(ocopt.apply(&mut s, o, t), Err(Error::Shape(_))));
    }
}
