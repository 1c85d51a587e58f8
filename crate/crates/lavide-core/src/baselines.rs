//! Reference formulations: the category-equivalence comparison, the color
//! map visualizer used by vision discrimination, segmentation-head training
//! for the category baseline, and helpers shared with the color-encoded
//! model variant.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{CategoricalMap, ChangeMap, SatImage};

/// K distinct RGB triples, one per category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorPalette {
    colors: Vec<[u8; 3]>,
}

impl ColorPalette {
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::Config("palette must contain at least one color".into()));
        }
        for (i, c) in colors.iter().enumerate() {
            if colors[..i].contains(c) {
                return Err(Error::Config(format!(
                    "palette colors must be distinct; {c:?} appears twice"
                )));
            }
        }
        Ok(Self { colors })
    }

    /// Deterministic default palette: evenly spaced hues with alternating
    /// value so neighbouring categories stay visually distinct.
    pub fn default_for(k: usize) -> Self {
        let mut colors = Vec::with_capacity(k);
        for i in 0..k {
            let h = (i as f64 + 0.5) / k as f64;
            let v = if i % 2 == 0 { 0.80 } else { 0.55 };
            let mut c = hsv_to_rgb(h, 0.65, v);
            // Nudge until distinct; only triggers for very large K.
            while colors.contains(&c) {
                c[0] = c[0].wrapping_add(1);
            }
            colors.push(c);
        }
        Self { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, index: usize) -> [u8; 3] {
        self.colors[index]
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn index_of(&self, color: [u8; 3]) -> Option<usize> {
        self.colors.iter().position(|&c| c == color)
    }

    /// JSON array of K [r, g, b] byte triples.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let data = serde_json::to_string_pretty(&self.colors)
            .map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, data)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path)?;
        let colors: Vec<[u8; 3]> = serde_json::from_str(&data)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::new(colors)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Map visualizer: paint each pixel with its category's palette color.
pub fn render_map_color(map: &CategoricalMap, palette: &ColorPalette) -> Result<SatImage> {
    if palette.len() != map.num_categories() {
        return Err(Error::Config(format!(
            "palette has {} colors but map has {} categories",
            palette.len(),
            map.num_categories()
        )));
    }
    let (h, w) = (map.height(), map.width());
    let mut img = ndarray::Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let c = palette.color(map.indices()[(y, x)]);
            for ch in 0..3 {
                img[(y, x, ch)] = c[ch] as f64 / 255.0;
            }
        }
    }
    SatImage::new(img)
}

/// Inverse of [`render_map_color`]: recover indices by exact color lookup.
pub fn parse_map_color(image: &SatImage, palette: &ColorPalette) -> Result<CategoricalMap> {
    let (h, w) = (image.height(), image.width());
    let mut indices = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let c = [
                (image.0[(y, x, 0)] * 255.0).round() as u8,
                (image.0[(y, x, 1)] * 255.0).round() as u8,
                (image.0[(y, x, 2)] * 255.0).round() as u8,
            ];
            indices[(y, x)] = palette.index_of(c).ok_or_else(|| {
                Error::Data(format!("color {c:?} at ({y}, {x}) not found in palette"))
            })?;
        }
    }
    CategoricalMap::new(indices, palette.len())
}

/// Category-equivalence comparison: a pixel changed iff the predicted
/// category differs from the map category.
pub fn category_discriminate(
    pred_seg: &CategoricalMap,
    pre_map: &CategoricalMap,
) -> Result<ChangeMap> {
    if pred_seg.indices().dim() != pre_map.indices().dim() {
        return Err(Error::Shape(format!(
            "segmentation {}x{} vs map {}x{}",
            pred_seg.height(),
            pred_seg.width(),
            pre_map.height(),
            pre_map.width()
        )));
    }
    if pred_seg.num_categories() != pre_map.num_categories() {
        return Err(Error::Shape(format!(
            "category counts differ: {} vs {}",
            pred_seg.num_categories(),
            pre_map.num_categories()
        )));
    }
    let (h, w) = pred_seg.indices().dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[(y, x)] = u8::from(pred_seg.indices()[(y, x)] != pre_map.indices()[(y, x)]);
        }
    }
    ChangeMap::new(out)
}

/// Train the category-discrimination baseline: the shared vision encoder
/// with a per-position K-class head, supervised by post-change labels.
/// The returned model's change predictions run F_seg then the category
/// comparison against the pre-change map.
pub fn train_seg_head(
    base_config: &crate::model::ModelConfig,
    dataset: &crate::data::Dataset,
    train_cfg: &crate::training::TrainConfig,
) -> Result<crate::training::TrainState> {
    if dataset.samples.iter().any(|s| s.post_map.is_none()) {
        let missing = dataset
            .samples
            .iter()
            .find(|s| s.post_map.is_none())
            .map(|s| s.stem.clone())
            .unwrap_or_default();
        return Err(Error::Data(format!(
            "segmentation baseline needs post_maps/ for every sample; '{missing}' has none"
        )));
    }
    let mut cfg = base_config.clone();
    cfg.kind = crate::model::ModelKind::CategorySeg;
    cfg.palette = None;
    let model = crate::model::LavideModel::new(cfg, dataset.vocab.clone(), train_cfg.seed)?;
    let samples: Vec<crate::model::PreparedSample> =
        dataset.samples.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let mut state = crate::training::TrainState::new(model, train_cfg);
    crate::training::train(&mut state, &samples, train_cfg, false, |_| {})?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn palette_rejects_duplicates() {
        assert!(ColorPalette::new(vec![[0, 0, 0], [0, 0, 0]]).is_err());
        assert!(ColorPalette::new(vec![]).is_err());
    }

    #[test]
    fn default_palette_is_injective() {
        for k in 1..=16 {
            let p = ColorPalette::default_for(k);
            assert_eq!(p.len(), k);
            for i in 0..k {
                for j in 0..i {
                    assert_ne!(p.color(i), p.color(j));
                }
            }
        }
    }

    #[test]
    fn binary_palette_renders_layout() {
        let palette = ColorPalette::new(vec![[0, 0, 0], [255, 255, 255]]).unwrap();
        let map = CategoricalMap::new(arr2(&[[0usize, 1], [1, 0]]), 2).unwrap();
        let img = render_map_color(&map, &palette).unwrap();
        assert_eq!(img.0[(0, 0, 0)], 0.0);
        assert_eq!(img.0[(0, 1, 0)], 1.0);
        assert_eq!(img.0[(1, 0, 1)], 1.0);
    }

    #[test]
    fn render_parse_roundtrip_is_identity() {
        let palette = ColorPalette::default_for(5);
        let map = CategoricalMap::new(arr2(&[[0usize, 3, 4], [2, 1, 0]]), 5).unwrap();
        let img = render_map_color(&map, &palette).unwrap();
        let back = parse_map_color(&img, &palette).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn constant_map_renders_constant_image() {
        let palette = ColorPalette::default_for(3);
        let map = CategoricalMap::new(Array2::from_elem((3, 3), 1usize), 3).unwrap();
        let img = render_map_color(&map, &palette).unwrap();
        let first = [img.0[(0, 0, 0)], img.0[(0, 0, 1)], img.0[(0, 0, 2)]];
        for y in 0..3 {
            for x in 0..3 {
                for c in 0..3 {
                    assert_eq!(img.0[(y, x, c)], first[c]);
                }
            }
        }
    }

    #[test]
    fn palette_size_mismatch_is_config_error() {
        let palette = ColorPalette::default_for(2);
        let map = CategoricalMap::new(Array2::zeros((2, 2)), 3).unwrap();
        assert!(matches!(render_map_color(&map, &palette), Err(Error::Config(_))));
    }

    #[test]
    fn discriminate_identity_and_single_pixel() {
        let a = CategoricalMap::new(arr2(&[[0usize, 1], [2, 0]]), 3).unwrap();
        let same = category_discriminate(&a, &a).unwrap();
        assert!(same.data().iter().all(|&v| v == 0));

        let mut idx = a.indices().clone();
        idx[(0, 1)] = 2;
        let b = CategoricalMap::new(idx, 3).unwrap();
        let diff = category_discriminate(&b, &a).unwrap();
        assert_eq!(diff.data().iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(diff.data()[(0, 1)], 1);
    }

    #[test]
    fn discriminate_is_symmetric() {
        let a = CategoricalMap::new(arr2(&[[0usize, 1], [2, 0]]), 3).unwrap();
        let b = CategoricalMap::new(arr2(&[[1usize, 1], [2, 2]]), 3).unwrap();
        assert_eq!(category_discriminate(&a, &b).unwrap(), category_discriminate(&b, &a).unwrap());
    }

    #[test]
    fn discriminate_rejects_dim_mismatch() {
        let a = CategoricalMap::new(Array2::zeros((2, 2)), 2).unwrap();
        let b = CategoricalMap::new(Array2::zeros((2, 3)), 2).unwrap();
        assert!(matches!(category_discriminate(&a, &b), Err(Error::Shape(_))));
    }
}
