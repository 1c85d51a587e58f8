//! Training objectives: change cross-entropy, cosine-hinge contrastive loss
//! over map/image embeddings, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{LinearLayer, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::types::ChangeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the distillation loss.
    pub lambda1: f64,
    /// Weight of the contrastive loss.
    pub lambda2: f64,
    /// Hinge margin for changed positions.
    pub margin: f64,
    /// Optional (unchanged, changed) class weights for the change loss.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, margin: 0.2, class_weights: None }
    }
}

/// Mean per-pixel binary cross-entropy between change logits (H, W, 2) and
/// the ground-truth mask.
pub fn change_loss(
    s: &mut Session,
    logits: Var,
    gt: &ChangeMap,
    class_weights: Option<[f64; 2]>,
) -> Result<Var> {
    let (h, w, k) = s.graph.dims3(logits);
    if k != 2 {
        return Err(Error::Shape(format!("change logits must have 2 channels, got {k}")));
    }
    if (gt.height(), gt.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "logits {h}x{w} vs ground truth {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    let target = gt.data().mapv(|v| v as usize);
    Ok(s.graph.cross_entropy(logits, target, class_weights.map(|w| w.to_vec())))
}

/// Per-branch 1x1 projections used by the contrastive loss.
pub struct ContrastProjections {
    pub proj_t: LinearLayer,
    pub proj_v: LinearLayer,
}

impl ContrastProjections {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, d_t: usize, c_v: usize, d: usize) -> Self {
        Self {
            proj_t: LinearLayer::init(store, rng, "contrast.proj_t", d_t, d),
            proj_v: LinearLayer::init(store, rng, "contrast.proj_v", c_v, d),
        }
    }
}

/// Contrastive alignment at the coarsest scale: G_t is average-pooled to the
/// dims of G_v^4, the ground truth is max-pooled (a coarse cell is changed
/// if any covered pixel changed), both embeddings are projected and
/// normalized per position, then unchanged cells pull together via
/// (1 - cos) and changed cells push apart via max(0, cos - margin).
pub fn contrast_loss(
    s: &mut Session,
    g_t: Var,
    g_v4: Var,
    gt: &ChangeMap,
    cfg: &LossConfig,
    projections: &ContrastProjections,
) -> Result<Var> {
    let (vh, vw, _) = s.graph.dims3(g_v4);
    let (th, tw, _) = s.graph.dims3(g_t);
    if th % vh != 0 || tw % vw != 0 {
        return Err(Error::Shape(format!(
            "G_t dims {th}x{tw} not divisible by G_v4 dims {vh}x{vw}"
        )));
    }
    if gt.height() % vh != 0 || gt.width() % vw != 0 {
        return Err(Error::Shape(format!(
            "ground truth dims {}x{} not divisible by G_v4 dims {vh}x{vw}",
            gt.height(),
            gt.width()
        )));
    }
    let pooled_t = s.graph.avg_pool(g_t, th / vh, tw / vw);
    let coarse_gt = gt.max_pool(gt.height() / vh, gt.width() / vw)?;
    let a = projections.proj_t.apply(s, pooled_t);
    let b = projections.proj_v.apply(s, g_v4);
    Ok(s.graph.contrast_cos(a, b, coarse_gt.data().clone(), cfg.margin))
}

/// Components of the total objective, as plain numbers for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub change: f64,
    pub distill: f64,
    pub contrast: f64,
}

/// Total objective: change + lambda1 * distill + lambda2 * contrast.
/// A non-finite component aborts with an error naming it.
pub fn total_loss(
    s: &mut Session,
    l_change: Var,
    l_distill: Option<Var>,
    l_contrast: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    for (name, var) in [("change", Some(l_change)), ("distill", l_distill), ("contrast", Some(l_contrast))]
    {
        if let Some(v) = var {
            let value = s.graph.scalar_value(v);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss component '{name}' is {value}")));
            }
        }
    }
    let mut terms = vec![(1.0, l_change)];
    if let Some(d) = l_distill {
        terms.push((cfg.lambda1, d));
    }
    terms.push((cfg.lambda2, l_contrast));
    Ok(s.graph.weighted_sum(&terms))
}
