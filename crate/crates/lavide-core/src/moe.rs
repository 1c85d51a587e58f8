//! Mixture-of-experts discriminative module: per-scale expert banks compare
//! text and vision embeddings, a change-specific router weights the expert
//! differences, and the fused multi-scale difference feeds a binary
//! classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{DwConvLayer, LinearLayer, MlpLayer, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::vision_branch::NUM_SCALES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub d_diff: usize,
    pub hidden: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self { num_experts: 10, d_diff: 32, hidden: 64 }
    }
}

/// Change-specific route function: depthwise 3x3 over the concatenated
/// embeddings followed by a 1x1 projection to one logit per expert; softmax
/// turns the logits into simplex weights.
pub struct Router {
    dw: DwConvLayer,
    pw: LinearLayer,
    pub num_experts: usize,
}

/// N per-position difference experts plus the router, for one scale.
pub struct ExpertBank {
    experts: Vec<MlpLayer>,
    router: Router,
    pub in_channels: usize,
}

impl ExpertBank {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        scale: usize,
        in_channels: usize,
        cfg: &MoeConfig,
    ) -> Self {
        assert!(cfg.num_experts >= 1, "need at least one expert");
        let base = format!("moe.scale{scale}");
        let experts = (0..cfg.num_experts)
            .map(|j| {
                MlpLayer::init(
                    store,
                    rng,
                    &format!("{base}.expert{j}"),
                    in_channels,
                    cfg.hidden,
                    cfg.d_diff,
                )
            })
            .collect();
        let router = Router {
            dw: DwConvLayer::init(store, rng, &format!("{base}.router.dw"), in_channels),
            pw: LinearLayer::init(store, rng, &format!("{base}.router.pw"), in_channels, cfg.num_experts),
            num_experts: cfg.num_experts,
        };
        Self { experts, router, in_channels }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn check_dims(&self, s: &Session, g_t_i: Var, g_v_i: Var) -> Result<()> {
        let (th, tw, tc) = s.graph.dims3(g_t_i);
        let (vh, vw, vc) = s.graph.dims3(g_v_i);
        if (th, tw) != (vh, vw) {
            return Err(Error::Shape(format!(
                "moe inputs spatial mismatch: {th}x{tw} vs {vh}x{vw}"
            )));
        }
        if tc + vc != self.in_channels {
            return Err(Error::Config(format!(
                "expert bank built for {} input channels, got {}",
                self.in_channels,
                tc + vc
            )));
        }
        Ok(())
    }

    /// Per-position routing weights W^i: softmax over N router logits.
    pub fn route_weights(&self, s: &mut Session, g_t_i: Var, g_v_i: Var) -> Result<Var> {
        self.check_dims(s, g_t_i, g_v_i)?;
        let x = s.graph.concat_c(&[g_t_i, g_v_i]);
        let y = self.router.dw.apply(s, x);
        let logits = self.router.pw.apply(s, y);
        Ok(s.graph.softmax_c(logits))
    }

    /// Difference D_j^i seen by expert j.
    pub fn expert_difference(&self, s: &mut Session, g_t_i: Var, g_v_i: Var, j: usize) -> Result<Var> {
        self.check_dims(s, g_t_i, g_v_i)?;
        let x = s.graph.concat_c(&[g_t_i, g_v_i]);
        Ok(self.experts[j].apply(s, x))
    }

    /// Router-weighted sum of expert differences, D^i.
    pub fn moe_difference(&self, s: &mut Session, g_t_i: Var, g_v_i: Var) -> Result<Var> {
        Ok(self.moe_difference_with_weights(s, g_t_i, g_v_i)?.0)
    }

    /// Like [`Self::moe_difference`] but also returns the routing weight map,
    /// so callers can check the simplex invariant.
    pub fn moe_difference_with_weights(
        &self,
        s: &mut Session,
        g_t_i: Var,
        g_v_i: Var,
    ) -> Result<(Var, Var)> {
        self.check_dims(s, g_t_i, g_v_i)?;
        let x = s.graph.concat_c(&[g_t_i, g_v_i]);
        let y = self.router.dw.apply(s, x);
        let logits = self.router.pw.apply(s, y);
        let weights = s.graph.softmax_c(logits);
        let mut acc: Option<Var> = None;
        for (j, expert) in self.experts.iter().enumerate() {
            let d_j = expert.apply(s, x);
            let w_j = s.graph.slice_c(weights, j);
            let term = s.graph.mul_chan(d_j, w_j);
            acc = Some(match acc {
                None => term,
                Some(a) => s.graph.add(a, term),
            });
        }
        Ok((acc.expect("bank has at least one expert"), weights))
    }
}

/// Downsample G_t to a scale's spatial dims by non-overlapping average
/// pooling. Target dims must divide the source dims.
pub fn downsample_text_embedding(s: &mut Session, g_t: Var, target: (usize, usize)) -> Result<Var> {
    let (h, w, _) = s.graph.dims3(g_t);
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Shape(format!(
            "target dims {th}x{tw} must divide source dims {h}x{w}"
        )));
    }
    Ok(s.graph.avg_pool(g_t, h / th, w / tw))
}

/// Multi-scale fusion and binary classification: upsample all difference
/// maps to the finest scale, concatenate, apply a per-position linear layer
/// (the fused feature D), classify to 2 logits and upsample to image
/// resolution.
pub struct FuseClassifier {
    fuse: LinearLayer,
    classifier: LinearLayer,
    pub d_fuse: usize,
}

impl FuseClassifier {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, d_diff: usize, d_fuse: usize) -> Self {
        let fuse = LinearLayer::init(store, rng, "fuse.linear", NUM_SCALES * d_diff, d_fuse);
        let classifier = LinearLayer::init(store, rng, "fuse.classifier", d_fuse, 2);
        Self { fuse, classifier, d_fuse }
    }

    pub fn apply(
        &self,
        s: &mut Session,
        diffs: &[Var; NUM_SCALES],
        out_dims: (usize, usize),
    ) -> Result<Var> {
        let (h1, w1, _) = s.graph.dims3(diffs[0]);
        let mut upsampled = Vec::with_capacity(NUM_SCALES);
        upsampled.push(diffs[0]);
        for &d in &diffs[1..] {
            upsampled.push(s.graph.resize_bilinear(d, h1, w1));
        }
        let cat = s.graph.concat_c(&upsampled);
        let fused = self.fuse.apply(s, cat);
        let logits = self.classifier.apply(s, fused);
        Ok(s.graph.resize_bilinear(logits, out_dims.0, out_dims.1))
    }
}
