//! Central finite-difference verification of analytic gradients.
//!
//! Used by the per-module gradient tests and by the acceptance suite: every
//! trainable module's backward pass is compared coordinate-by-coordinate
//! against (f(x+eps) - f(x-eps)) / 2 eps at 64-bit precision.

use ndarray::{Array2, Array3};

use crate::autodiff::Tensor;
use crate::data::{generate_scene, DataSample, SceneConfig};
use crate::losses::{change_loss, contrast_loss, ContrastProjections, LossConfig};
use crate::lvm::LvmConfig;
use crate::map_branch::{ObjectEncoder, Ocopt};
use crate::model::{LavideModel, ModelConfig};
use crate::moe::{ExpertBank, FuseClassifier, MoeConfig};
use crate::nn::{LinearLayer, ParamId, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::types::ChangeMap;
use crate::vision_branch::{distill_features, DistillHead, DistillMode, VisionEncoder};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between `analytic` and central differences of
/// `eval`, over every coordinate of every parameter (or a sampled subset).
pub fn worst_param_grad_err(
    store: &mut ParamStore,
    analytic: &[Tensor],
    mut eval: impl FnMut(&ParamStore) -> f64,
    sample: Option<(usize, u64)>,
) -> f64 {
    assert_eq!(analytic.len(), store.len());
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for i in 0..store.len() {
        for c in 0..store.value(ParamId(i)).len() {
            coords.push((i, c));
        }
    }
    if let Some((n, seed)) = sample {
        let mut rng = SplitMix64::new(seed);
        coords = (0..n).map(|_| coords[rng.below(coords.len())]).collect();
    }
    let mut worst = 0.0f64;
    for (i, c) in coords {
        let id = ParamId(i);
        let original = *store.value(id).iter().nth(c).unwrap();
        let eps = 1e-6 * (1.0 + original.abs());
        *store.value_mut(id).iter_mut().nth(c).unwrap() = original + eps;
        let plus = eval(store);
        *store.value_mut(id).iter_mut().nth(c).unwrap() = original - eps;
        let minus = eval(store);
        *store.value_mut(id).iter_mut().nth(c).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = *analytic[i].iter().nth(c).unwrap();
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}

fn rand3(rng: &mut SplitMix64, h: usize, w: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((h, w, c), |_| rng.symmetric())
}

fn rand_mask(rng: &mut SplitMix64, h: usize, w: usize) -> ChangeMap {
    ChangeMap::new(Array2::from_shape_fn((h, w), |_| rng.below(2) as u8)).unwrap()
}

/// The full per-module gradient suite. Returns (module name, worst relative
/// error) for: object encoder, ocopt, vision encoder, router + experts,
/// fusion/classifier, and the three losses. Each should stay within 1e-4.
pub fn module_gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    // Object encoder, all parameters.
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(10);
        let enc = ObjectEncoder::init(&mut store, &mut rng, 3, 4);
        let input = rand3(&mut rng, 4, 4, 3).mapv(f64::abs);
        let coeff = rand3(&mut rng, 4, 4, 4).into_dyn();
        let run = |store: &ParamStore, want_grads: bool| {
            let mut s = Session::new(store);
            let x = s.input(input.clone().into_dyn());
            let y = enc.apply(&mut s, x).unwrap();
            let o = s.graph.dot_const(y, coeff.clone());
            if want_grads {
                (0.0, Some(s.param_grads(o)))
            } else {
                (s.graph.scalar_value(o), None)
            }
        };
        let analytic = run(&store, true).1.unwrap();
        let worst = worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None);
        out.push(("object_encoder", worst));
    }

    // Object context optimization, all parameters.
    {
        let (d_obj, d) = (3, 5);
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(11);
        let ocopt = Ocopt::init(&mut store, &mut rng, d_obj, d);
        let objects = rand3(&mut rng, 4, 4, d_obj);
        let text = rand3(&mut rng, 4, 4, d);
        let coeff = rand3(&mut rng, 4, 4, d).into_dyn();
        let run = |store: &ParamStore, want_grads: bool| {
            let mut s = Session::new(store);
            let o = s.input(objects.clone().into_dyn());
            let t = s.input(text.clone().into_dyn());
            let y = ocopt.apply(&mut s, o, t).unwrap();
            let out = s.graph.dot_const(y, coeff.clone());
            if want_grads {
                (0.0, Some(s.param_grads(out)))
            } else {
                (s.graph.scalar_value(out), None)
            }
        };
        let analytic = run(&store, true).1.unwrap();
        let worst = worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None);
        out.push(("ocopt", worst));
    }

    // Vision encoder on a 32x32 input, all parameters, all scales probed.
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(12);
        let enc = VisionEncoder::init(&mut store, &mut rng, [2, 4, 8, 8]);
        let image = Array3::from_shape_fn((32, 32, 3), |_| rng.uniform());
        let coeffs: Vec<Tensor> = vec![
            rand3(&mut rng, 8, 8, 2).into_dyn(),
            rand3(&mut rng, 4, 4, 4).into_dyn(),
            rand3(&mut rng, 2, 2, 8).into_dyn(),
            rand3(&mut rng, 1, 1, 8).into_dyn(),
        ];
        let run = |store: &ParamStore, want_grads: bool| {
            let mut s = Session::new(store);
            let x = s.input(image.clone().into_dyn());
            let pyr = enc.apply(&mut s, x).unwrap();
            let dots: Vec<_> = pyr
                .iter()
                .zip(coeffs.iter())
                .map(|(&p, c)| (1.0, s.graph.dot_const(p, c.clone())))
                .collect();
            let o = s.graph.weighted_sum(&dots);
            if want_grads {
                (0.0, Some(s.param_grads(o)))
            } else {
                (s.graph.scalar_value(o), None)
            }
        };
        let analytic = run(&store, true).1.unwrap();
        let worst = worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None);
        out.push(("vision_encoder", worst));
    }

    // Router and experts, all parameters.
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(13);
        let cfg = MoeConfig { num_experts: 3, d_diff: 4, hidden: 5 };
        let bank = ExpertBank::init(&mut store, &mut rng, 0, 6, &cfg);
        let g_t = rand3(&mut rng, 3, 3, 2);
        let g_v = rand3(&mut rng, 3, 3, 4);
        let coeff = rand3(&mut rng, 3, 3, 4).into_dyn();
        let run = |store: &ParamStore, want_grads: bool| {
            let mut s = Session::new(store);
            let t = s.input(g_t.clone().into_dyn());
            let v = s.input(g_v.clone().into_dyn());
            let d = bank.moe_difference(&mut s, t, v).unwrap();
            let o = s.graph.dot_const(d, coeff.clone());
            if want_grads {
                (0.0, Some(s.param_grads(o)))
            } else {
                (s.graph.scalar_value(o), None)
            }
        };
        let analytic = run(&store, true).1.unwrap();
        let worst = worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None);
        out.push(("router_and_experts", worst));
    }

    // Fusion plus classifier, all parameters.
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(14);
        let fc = FuseClassifier::init(&mut store, &mut rng, 3, 6);
        let diffs: Vec<Array3<f64>> = vec![
            rand3(&mut rng, 8, 8, 3),
            rand3(&mut rng, 4, 4, 3),
            rand3(&mut rng, 2, 2, 3),
            rand3(&mut rng, 1, 1, 3),
        ];
        let coeff = rand3(&mut rng, 32, 32, 2).into_dyn();
        let run = |store: &ParamStore, want_grads: bool| {
            let mut s = Session::new(store);
            let vars: Vec<_> = diffs.iter().map(|d| s.input(d.clone().into_dyn())).collect();
            let arr = [vars[0], vars[1], vars[2], vars[3]];
            let logits = fc.apply(&mut s, &arr, (32, 32)).unwrap();
            let o = s.graph.dot_const(logits, coeff.clone());
            if want_grads {
                (0.0, Some(s.param_grads(o)))
            } else {
                (s.graph.scalar_value(o), None)
            }
        };
        let analytic = run(&store, true).1.unwrap();
        let worst = worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None);
        out.push(("fusion_classifier", worst));
    }

    // Change loss through a logit head.
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(15);
        let head = LinearLayer::init(&mut store, &mut rng, "head", 3, 2);
        let feat = rand3(&mut rng, 4, 4, 3);
        let gt = rand_mask(&mut rng, 4, 4);
        let run = |store: &ParamStore, want_grads: bool| {
            let mut s = Session::new(store);
            let x = s.input(feat.clone().into_dyn());
            let logits = head.apply(&mut s, x);
            let loss = change_loss(&mut s, logits, &gt, Some([1.0, 2.0])).unwrap();
            if want_grads {
                (0.0, Some(s.param_grads(loss)))
            } else {
                (s.graph.scalar_value(loss), None)
            }
        };
        let analytic = run(&store, true).1.unwrap();
        let worst = worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None);
        out.push(("change_loss", worst));
    }

    // Distillation loss through its head, both modes.
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(16);
        let head = DistillHead::init(&mut store, &mut rng, 5, 4);
        let feat = rand3(&mut rng, 2, 3, 5);
        let teacher = rand3(&mut rng, 2, 3, 4);
        let mut worst = 0.0f64;
        for mode in [DistillMode::Spatial, DistillMode::Pooled] {
            let run = |store: &ParamStore, want_grads: bool| {
                let mut s = Session::new(store);
                let x = s.input(feat.clone().into_dyn());
                let (loss, _) = distill_features(&mut s, x, &teacher, &head, mode).unwrap();
                if want_grads {
                    (0.0, Some(s.param_grads(loss)))
                } else {
                    (s.graph.scalar_value(loss), None)
                }
            };
            let analytic = run(&store, true).1.unwrap();
            worst =
                worst.max(worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None));
        }
        out.push(("distill_loss", worst));
    }

    // Contrastive loss through its projections.
    {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(17);
        let proj = ContrastProjections::init(&mut store, &mut rng, 4, 6, 5);
        let g_t = rand3(&mut rng, 8, 8, 4);
        let g_v4 = rand3(&mut rng, 2, 2, 6);
        let gt = rand_mask(&mut rng, 8, 8);
        let cfg = LossConfig::default();
        let run = |store: &ParamStore, want_grads: bool| {
            let mut s = Session::new(store);
            let t = s.input(g_t.clone().into_dyn());
            let v = s.input(g_v4.clone().into_dyn());
            let loss = contrast_loss(&mut s, t, v, &gt, &cfg, &proj).unwrap();
            if want_grads {
                (0.0, Some(s.param_grads(loss)))
            } else {
                (s.graph.scalar_value(loss), None)
            }
        };
        let analytic = run(&store, true).1.unwrap();
        let worst = worst_param_grad_err(&mut store, &analytic, |st| run(st, false).0, None);
        out.push(("contrast_loss", worst));
    }

    out
}

/// Composed whole-model check on a 32x32 instance: analytic versus central
/// differences of the total loss over `samples` randomly chosen parameters.
pub fn whole_model_gradient_err(samples: usize, seed: u64) -> f64 {
    let scene =
        generate_scene(&SceneConfig { height: 32, width: 32, seed: 3, ..SceneConfig::default() })
            .unwrap();
    let vocab = crate::data::default_vocabulary(4);
    let config = ModelConfig {
        lvm: LvmConfig { backend: "toy".into(), seed: 0, embed_dim: 64 },
        ..ModelConfig::default()
    };
    let mut model = LavideModel::new(config, vocab, 5).unwrap();
    let prep = model
        .prepare(&DataSample {
            stem: "fd".into(),
            pre_map: scene.pre_map.clone(),
            image: scene.image.clone(),
            change: scene.change.clone(),
            post_map: None,
        })
        .unwrap();

    let analytic = {
        let mut fp = model.forward_prepared(&prep).unwrap();
        let (total, _, _) = model.losses(&mut fp, &prep.gt).unwrap();
        fp.session.param_grads(total)
    };
    let run = |model: &LavideModel| {
        let mut fp = model.forward_prepared(&prep).unwrap();
        let (total, _, _) = model.losses(&mut fp, &prep.gt).unwrap();
        fp.session.graph.scalar_value(total)
    };

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for i in 0..model.store.len() {
        for c in 0..model.store.value(ParamId(i)).len() {
            coords.push((i, c));
        }
    }
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (i, c) = coords[rng.below(coords.len())];
        let id = ParamId(i);
        let original = *model.store.value(id).iter().nth(c).unwrap();
        let eps = 1e-6 * (1.0 + original.abs());
        *model.store.value_mut(id).iter_mut().nth(c).unwrap() = original + eps;
        let plus = run(&model);
        *model.store.value_mut(id).iter_mut().nth(c).unwrap() = original - eps;
        let minus = run(&model);
        *model.store.value_mut(id).iter_mut().nth(c).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = *analytic[i].iter().nth(c).unwrap();
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}
