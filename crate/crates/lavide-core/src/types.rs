//! Core domain types: categorical maps, images, change masks, embedding maps.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial grid of embedding vectors, shape (H, W, C).
pub type EmbeddingMap = Array3<f64>;

/// Ordered set of ground-object category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocabulary {
    names: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("vocabulary must contain at least one category".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("category {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate category name '{n}'")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Pre- or post-change map: per-pixel category indices plus the category count.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalMap {
    indices: Array2<usize>,
    num_categories: usize,
}

impl CategoricalMap {
    pub fn new(indices: Array2<usize>, num_categories: usize) -> Result<Self> {
        if num_categories == 0 {
            return Err(Error::Config("map needs at least one category".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&v| v >= num_categories) {
            return Err(Error::Data(format!(
                "map index {bad} out of range for {num_categories} categories"
            )));
        }
        Ok(Self { indices, num_categories })
    }

    /// Resolve an H×W×K score map to indices; ties go to the lowest index.
    pub fn from_one_hot(data: &Array3<f64>) -> Result<Self> {
        let (h, w, k) = data.dim();
        if k == 0 {
            return Err(Error::Shape("one-hot map has zero channels".into()));
        }
        let mut indices = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_v = data[(y, x, 0)];
                for c in 1..k {
                    if data[(y, x, c)] > best_v {
                        best_v = data[(y, x, c)];
                        best = c;
                    }
                }
                indices[(y, x)] = best;
            }
        }
        Ok(Self { indices, num_categories: k })
    }

    pub fn to_one_hot(&self) -> Array3<f64> {
        let (h, w) = self.indices.dim();
        let mut out = Array3::zeros((h, w, self.num_categories));
        for y in 0..h {
            for x in 0..w {
                out[(y, x, self.indices[(y, x)])] = 1.0;
            }
        }
        out
    }

    pub fn indices(&self) -> &Array2<usize> {
        &self.indices
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn height(&self) -> usize {
        self.indices.dim().0
    }

    pub fn width(&self) -> usize {
        self.indices.dim().1
    }
}

/// RGB raster with values in [0, 1], shape (H, W, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct SatImage(pub Array3<f64>);

impl SatImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {}", data.dim().2)));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Data("image values must be finite and in [0, 1]".into()));
        }
        Ok(Self(data))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }
}

/// Binary change mask: 1 = changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMap(Array2<u8>);

impl ChangeMap {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("change mask values must be 0 or 1, got {bad}")));
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    /// Fraction of changed pixels.
    pub fn changed_fraction(&self) -> f64 {
        let total = self.0.len();
        if total == 0 {
            return 0.0;
        }
        self.0.iter().map(|&v| v as usize).sum::<usize>() as f64 / total as f64
    }

    /// Coarsen by non-overlapping max pooling: a cell is changed if any
    /// covered pixel changed.
    pub fn max_pool(&self, fh: usize, fw: usize) -> Result<ChangeMap> {
        let (h, w) = self.0.dim();
        if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
            return Err(Error::Shape(format!(
                "pool factors ({fh}, {fw}) must divide mask dims ({h}, {w})"
            )));
        }
        let mut out = Array2::zeros((h / fh, w / fw));
        for y in 0..h {
            for x in 0..w {
                if self.0[(y, x)] == 1 {
                    out[(y / fh, x / fw)] = 1;
                }
            }
        }
        Ok(ChangeMap(out))
    }
}

/// Per-pixel category names produced by the map-to-text converter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextGrid {
    names: Array2<String>,
}

impl TextGrid {
    pub fn new(names: Array2<String>) -> Self {
        Self { names }
    }

    pub fn names(&self) -> &Array2<String> {
        &self.names
    }

    pub fn height(&self) -> usize {
        self.names.dim().0
    }

    pub fn width(&self) -> usize {
        self.names.dim().1
    }
}
