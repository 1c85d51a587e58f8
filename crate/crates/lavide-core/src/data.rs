//! Synthetic scene generation and dataset serialization.
//!
//! Scenes are built object-first: rectangles and ellipses stamped over a
//! background category form the pre-change map, object categories flip
//! independently with the configured probability to form the post-change
//! map, and the observed image is rendered from the post-change state
//! (base color per category, value-noise texture, Gaussian pixel noise).

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::baselines::ColorPalette;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::types::{CategoricalMap, CategoryVocabulary, ChangeMap, SatImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_categories: usize,
    pub num_objects: usize,
    pub change_rate: f64,
    pub noise_sigma: f64,
    pub texture_level: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_categories: 4,
            num_objects: 6,
            change_rate: 0.5,
            noise_sigma: 0.02,
            texture_level: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "scene dims {}x{} must be multiples of 32 and at least 32",
                self.height, self.width
            )));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("num_categories must be positive".into()));
        }
        if self.num_categories < 2 && self.change_rate > 0.0 {
            return Err(Error::Config(
                "change injection needs at least 2 categories".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.change_rate) {
            return Err(Error::Config(format!("change_rate {} not in [0, 1]", self.change_rate)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_level) {
            return Err(Error::Config(format!(
                "texture_level {} not in [0, 1]",
                self.texture_level
            )));
        }
        Ok(())
    }
}

/// One generated sample: pre-change map, post-change observation, the latent
/// post-change map and the change mask.
#[derive(Debug, Clone)]
pub struct SceneQuad {
    pub pre_map: CategoricalMap,
    pub image: SatImage,
    pub post_map: CategoricalMap,
    pub change: ChangeMap,
}

#[derive(Debug, Clone, Copy)]
enum StampShape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Stamp {
    shape: StampShape,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    pre_cat: usize,
    post_cat: usize,
}

impl Stamp {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        match self.shape {
            StampShape::Rect => dx.abs() <= self.rx && dy.abs() <= self.ry,
            StampShape::Ellipse => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0,
        }
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneQuad> {
    let palette = ColorPalette::default_for(cfg.num_categories);
    generate_scene_with_palette(cfg, &palette)
}

/// Like [`generate_scene`] but with a shared palette so every scene of a
/// dataset renders categories identically.
pub fn generate_scene_with_palette(cfg: &SceneConfig, palette: &ColorPalette) -> Result<SceneQuad> {
    cfg.validate()?;
    if palette.len() != cfg.num_categories {
        return Err(Error::Config(format!(
            "palette has {} colors but scene has {} categories",
            palette.len(),
            cfg.num_categories
        )));
    }
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_categories);

    // Objects. With a single category there is nothing to stamp.
    let mut obj_rng = SplitMix64::tagged("scene-objects", cfg.seed);
    let mut flip_rng = SplitMix64::tagged("scene-flips", cfg.seed);
    let max_half = (h.min(w) / 4) as f64;
    let mut stamps = Vec::with_capacity(cfg.num_objects);
    if k >= 2 {
        for _ in 0..cfg.num_objects {
            let shape = if obj_rng.below(2) == 0 { StampShape::Rect } else { StampShape::Ellipse };
            let cx = obj_rng.range(0.0, w as f64);
            let cy = obj_rng.range(0.0, h as f64);
            let rx = obj_rng.range(4.0, max_half.max(5.0));
            let ry = obj_rng.range(4.0, max_half.max(5.0));
            let pre_cat = 1 + obj_rng.below(k - 1);
            let flip = flip_rng.uniform() < cfg.change_rate;
            let alt = flip_rng.below(k - 1);
            let post_cat = if flip {
                if alt >= pre_cat {
                    alt + 1
                } else {
                    alt
                }
            } else {
                pre_cat
            };
            stamps.push(Stamp { shape, cx, cy, rx, ry, pre_cat, post_cat });
        }
    }

    // Rasterize: background category 0, later stamps overwrite earlier ones.
    let mut pre = Array2::zeros((h, w));
    let mut post = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            for s in &stamps {
                if s.covers(y, x) {
                    pre[(y, x)] = s.pre_cat;
                    post[(y, x)] = s.post_cat;
                }
            }
        }
    }

    let mut change = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            change[(y, x)] = u8::from(pre[(y, x)] != post[(y, x)]);
        }
    }

    let post_map = CategoricalMap::new(post, k)?;
    let image = render_image(cfg, &post_map, palette)?;

    Ok(SceneQuad {
        pre_map: CategoricalMap::new(pre, k)?,
        image,
        post_map,
        change: ChangeMap::new(change)?,
    })
}

const TEXTURE_CELL: usize = 8;
const TEXTURE_AMPLITUDE: f64 = 0.15;

/// Value noise lattice for one category: random corner values, bilinearly
/// interpolated across 8-pixel cells.
struct ValueNoise {
    lattice: Array2<f64>,
}

impl ValueNoise {
    fn new(seed: u64, category: usize, h: usize, w: usize) -> Self {
        let mut rng = SplitMix64::tagged(&format!("scene-texture-{category}"), seed);
        let lattice = Array2::from_shape_fn(
            (h / TEXTURE_CELL + 2, w / TEXTURE_CELL + 2),
            |_| rng.symmetric(),
        );
        Self { lattice }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / TEXTURE_CELL as f64;
        let fx = x as f64 / TEXTURE_CELL as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
        let v00 = self.lattice[(y0, x0)];
        let v01 = self.lattice[(y0, x0 + 1)];
        let v10 = self.lattice[(y0 + 1, x0)];
        let v11 = self.lattice[(y0 + 1, x0 + 1)];
        v00 * (1.0 - wy) * (1.0 - wx) + v01 * (1.0 - wy) * wx + v10 * wy * (1.0 - wx) + v11 * wy * wx
    }
}

fn render_image(cfg: &SceneConfig, map: &CategoricalMap, palette: &ColorPalette) -> Result<SatImage> {
    let (h, w) = (cfg.height, cfg.width);
    let textures: Vec<ValueNoise> =
        (0..cfg.num_categories).map(|c| ValueNoise::new(cfg.seed, c, h, w)).collect();
    let mut noise_rng = SplitMix64::tagged("scene-noise", cfg.seed);
    let mut img = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let cat = map.indices()[(y, x)];
            let base = palette.color(cat);
            let tex = textures[cat].at(y, x) * TEXTURE_AMPLITUDE * cfg.texture_level;
            for c in 0..3 {
                let v = base[c] as f64 / 255.0 + tex + noise_rng.normal() * cfg.noise_sigma;
                img[(y, x, c)] = v.clamp(0.0, 1.0);
            }
        }
    }
    SatImage::new(img)
}

/// Category names for generated datasets: a fixed land-cover list, then
/// numbered classes.
pub fn default_vocabulary(k: usize) -> CategoryVocabulary {
    const NAMES: [&str; 10] = [
        "background", "water", "forest", "urban area", "agricultural field", "road", "bare soil",
        "grassland", "wetland", "sand",
    ];
    let names = (0..k)
        .map(|i| NAMES.get(i).map_or_else(|| format!("class {i}"), |s| s.to_string()))
        .collect();
    CategoryVocabulary::new(names).expect("default names are unique")
}

/// A dataset ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: CategoryVocabulary,
    pub palette: Option<ColorPalette>,
    pub samples: Vec<DataSample>,
}

#[derive(Debug, Clone)]
pub struct DataSample {
    pub stem: String,
    pub pre_map: CategoricalMap,
    pub image: SatImage,
    pub change: ChangeMap,
    pub post_map: Option<CategoricalMap>,
}

/// Generate `scenes` quads with per-sample seeds `cfg.seed + i` and a
/// palette shared across the dataset.
pub fn generate_dataset(cfg: &SceneConfig, scenes: usize) -> Result<(Vec<SceneQuad>, CategoryVocabulary, ColorPalette)> {
    cfg.validate()?;
    let palette = ColorPalette::default_for(cfg.num_categories);
    let vocab = default_vocabulary(cfg.num_categories);
    let mut quads = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let mut c = *cfg;
        c.seed = cfg.seed.wrapping_add(i as u64);
        quads.push(generate_scene_with_palette(&c, &palette)?);
    }
    Ok((quads, vocab, palette))
}

fn stem_for(i: usize) -> String {
    format!("scene_{i:04}")
}

/// On-disk layout: categories.json, palette.json, maps/, images/, labels/
/// (0 = unchanged, 255 = changed) and post_maps/.
pub fn write_dataset(
    quads: &[SceneQuad],
    vocab: &CategoryVocabulary,
    palette: &ColorPalette,
    dir: &Path,
) -> Result<()> {
    if vocab.len() > 256 {
        return Err(Error::Config("8-bit map format supports at most 256 categories".into()));
    }
    std::fs::create_dir_all(dir)?;
    for sub in ["maps", "images", "labels", "post_maps"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let cats = serde_json::to_string_pretty(vocab.names()).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(dir.join("categories.json"), cats)?;
    palette.write_json(&dir.join("palette.json"))?;

    for (i, q) in quads.iter().enumerate() {
        let stem = stem_for(i);
        write_index_png(&dir.join("maps").join(format!("{stem}.png")), q.pre_map.indices())?;
        write_index_png(&dir.join("post_maps").join(format!("{stem}.png")), q.post_map.indices())?;
        write_rgb_png(&dir.join("images").join(format!("{stem}.png")), &q.image)?;
        write_mask_png(&dir.join("labels").join(format!("{stem}.png")), &q.change)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let cats_path = dir.join("categories.json");
    let cats = std::fs::read_to_string(&cats_path)
        .map_err(|e| Error::Data(format!("{}: {e}", cats_path.display())))?;
    let names: Vec<String> =
        serde_json::from_str(&cats).map_err(|e| Error::Data(format!("categories.json: {e}")))?;
    let vocab = CategoryVocabulary::new(names)?;
    let k = vocab.len();

    let palette_path = dir.join("palette.json");
    let palette =
        if palette_path.exists() { Some(ColorPalette::read_json(&palette_path)?) } else { None };

    let maps_dir = dir.join("maps");
    let mut stems = BTreeSet::new();
    for entry in std::fs::read_dir(&maps_dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    if stems.is_empty() {
        return Err(Error::Data(format!("no map files found in {}", maps_dir.display())));
    }

    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let map_path = dir.join("maps").join(format!("{stem}.png"));
        let img_path = dir.join("images").join(format!("{stem}.png"));
        let lbl_path = dir.join("labels").join(format!("{stem}.png"));
        if !img_path.exists() {
            return Err(Error::Data(format!("sample '{stem}' is missing its image file")));
        }
        if !lbl_path.exists() {
            return Err(Error::Data(format!("sample '{stem}' is missing its mask file")));
        }
        let pre_map = read_index_png(&map_path, k, &stem)?;
        let image = read_rgb_png(&img_path, &stem)?;
        let change = read_mask_png(&lbl_path, &stem)?;
        if change.data().dim() != pre_map.indices().dim() {
            return Err(Error::Data(format!("sample '{stem}': mask and map dims differ")));
        }
        let post_path = dir.join("post_maps").join(format!("{stem}.png"));
        let post_map =
            if post_path.exists() { Some(read_index_png(&post_path, k, &stem)?) } else { None };
        samples.push(DataSample { stem, pre_map, image, change, post_map });
    }
    Ok(Dataset { vocab, palette, samples })
}

fn write_index_png(path: &Path, indices: &Array2<usize>) -> Result<()> {
    let (h, w) = indices.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([indices[(y, x)] as u8]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn read_index_png(path: &Path, k: usize, stem: &str) -> Result<CategoricalMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut indices = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x, y).0[0] as usize;
            if v >= k {
                return Err(Error::Data(format!(
                    "sample '{stem}': map index {v} out of range for {k} categories"
                )));
            }
            indices[(y as usize, x as usize)] = v;
        }
    }
    CategoricalMap::new(indices, k)
}

fn write_rgb_png(path: &Path, image: &SatImage) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                (image.0[(y, x, 0)] * 255.0).round() as u8,
                (image.0[(y, x, 1)] * 255.0).round() as u8,
                (image.0[(y, x, 2)] * 255.0).round() as u8,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

fn read_rgb_png(path: &Path, _stem: &str) -> Result<SatImage> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y).0;
            for c in 0..3 {
                data[(y as usize, x as usize, c)] = px[c] as f64 / 255.0;
            }
        }
    }
    SatImage::new(data)
}

fn write_mask_png(path: &Path, mask: &ChangeMap) -> Result<()> {
    let (h, w) = mask.data().dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([mask.data()[(y, x)] * 255]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn read_mask_png(path: &Path, stem: &str) -> Result<ChangeMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            data[(y as usize, x as usize)] = match img.get_pixel(x, y).0[0] {
                0 => 0,
                255 => 1,
                v => {
                    return Err(Error::Data(format!(
                        "sample '{stem}': mask value {v} is neither 0 nor 255"
                    )))
                }
            };
        }
    }
    ChangeMap::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_change_rate_means_no_change() {
        let cfg = SceneConfig { change_rate: 0.0, seed: 5, ..SceneConfig::default() };
        let q = generate_scene(&cfg).unwrap();
        assert_eq!(q.pre_map, q.post_map);
        assert!(q.change.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn no_objects_means_uniform_background() {
        let cfg = SceneConfig { num_objects: 0, seed: 1, ..SceneConfig::default() };
        let q = generate_scene(&cfg).unwrap();
        assert!(q.pre_map.indices().iter().all(|&v| v == 0));
        assert!(q.change.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SceneConfig { seed: 42, ..SceneConfig::default() };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.pre_map, b.pre_map);
        assert_eq!(a.post_map, b.post_map);
        assert_eq!(a.image, b.image);
        assert_eq!(a.change, b.change);
    }

    #[test]
    fn change_mask_matches_argmax_inequality() {
        let cfg = SceneConfig { seed: 9, change_rate: 0.7, ..SceneConfig::default() };
        let q = generate_scene(&cfg).unwrap();
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let expect = u8::from(q.pre_map.indices()[(y, x)] != q.post_map.indices()[(y, x)]);
                assert_eq!(q.change.data()[(y, x)], expect);
            }
        }
    }

    #[test]
    fn rejects_single_category_with_changes() {
        let cfg = SceneConfig { num_categories: 1, change_rate: 0.5, ..SceneConfig::default() };
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn image_values_in_unit_range() {
        let cfg = SceneConfig { seed: 11, noise_sigma: 0.3, texture_level: 1.0, ..SceneConfig::default() };
        let q = generate_scene(&cfg).unwrap();
        assert!(q.image.0.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_roundtrip() {
        let cfg = SceneConfig { seed: 3, ..SceneConfig::default() };
        let (quads, vocab, palette) = generate_dataset(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&quads, &vocab, &palette, dir.path()).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.vocab, vocab);
        for (q, s) in quads.iter().zip(ds.samples.iter()) {
            // Masks and maps are lossless.
            assert_eq!(&q.change, &s.change);
            assert_eq!(&q.pre_map, &s.pre_map);
            assert_eq!(q.post_map, *s.post_map.as_ref().unwrap());
            // Images quantize to 8 bits.
            let max_err = q
                .image
                .0
                .iter()
                .zip(s.image.0.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 1.0 / 255.0, "max error {max_err}");
        }
    }

    #[test]
    fn missing_mask_names_the_stem() {
        let cfg = SceneConfig { seed: 3, ..SceneConfig::default() };
        let (quads, vocab, palette) = generate_dataset(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&quads, &vocab, &palette, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("labels/scene_0000.png")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("scene_0000"), "message: {msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
