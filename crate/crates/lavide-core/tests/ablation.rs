//! Ablation harness behaviour at toy scale: row counts per axis, the
//! parameter-count oracle for the object-context axis, and config
//! derivation.

use lavide_core::data::{generate_dataset, DataSample, Dataset, SceneConfig};
use lavide_core::eval::{derive_model_config, run_ablation, AblationAxis, AblationSpec};
use lavide_core::lvm::LvmConfig;
use lavide_core::model::{LavideModel, ModelConfig};
use lavide_core::moe::MoeConfig;
use lavide_core::training::TrainConfig;

fn tiny_dataset(scenes: usize) -> Dataset {
    let cfg = SceneConfig { seed: 0, ..SceneConfig::default() };
    let (quads, vocab, palette) = generate_dataset(&cfg, scenes).unwrap();
    Dataset {
        vocab,
        palette: Some(palette),
        samples: quads
            .iter()
            .enumerate()
            .map(|(i, q)| DataSample {
                stem: format!("scene_{i:04}"),
                pre_map: q.pre_map.clone(),
                image: q.image.clone(),
                change: q.change.clone(),
                post_map: Some(q.post_map.clone()),
            })
            .collect(),
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        lvm: LvmConfig { backend: "toy".into(), seed: 0, embed_dim: 8 },
        d_obj: 4,
        vision_channels: [4, 8, 8, 16],
        moe: MoeConfig { num_experts: 2, d_diff: 4, hidden: 4 },
        d_fuse: 8,
        ..ModelConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        max_iters: 2,
        batch_size: 2,
        learning_rate: 1e-3,
        threads: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn experts_axis_emits_one_row_per_value() {
    let dataset = tiny_dataset(2);
    let spec = AblationSpec {
        axis: AblationAxis::Experts,
        values: vec!["1".into(), "3".into()],
    };
    let report = run_ablation(&spec, &dataset, &tiny_model(), &tiny_train(), |_, _| {}).unwrap();
    assert_eq!(report.axis, "experts");
    assert_eq!(report.rows.len(), 2);
    for row in &report.rows {
        for v in [row.f1, row.iou, row.recall, row.precision] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn ocopt_axis_parameter_count_difference_is_the_subtree() {
    let dataset = tiny_dataset(1);
    let base = tiny_model();
    let with_cfg = derive_model_config(&base, AblationAxis::Ocopt, "with", &dataset).unwrap();
    let without_cfg = derive_model_config(&base, AblationAxis::Ocopt, "without", &dataset).unwrap();
    let with = LavideModel::new(with_cfg, dataset.vocab.clone(), 0).unwrap();
    let without = LavideModel::new(without_cfg, dataset.vocab.clone(), 0).unwrap();
    let diff = with.store.total_len() - without.store.total_len();
    let subtree =
        with.store.subtree_len("map.object_encoder") + with.store.subtree_len("map.ocopt");
    assert_eq!(diff, subtree, "parameter difference must equal the removed subtree");

    let spec = AblationSpec {
        axis: AblationAxis::Ocopt,
        values: vec!["with".into(), "without".into()],
    };
    let report = run_ablation(&spec, &dataset, &base, &tiny_train(), |_, _| {}).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].value, "with");
    assert_eq!(report.rows[1].value, "without");
}

#[test]
fn prompts_axis_enumerates_eight_rows() {
    let dataset = tiny_dataset(1);
    let spec = AblationSpec {
        axis: AblationAxis::Prompts,
        values: ["P1", "P2", "P3", "P4", "P5", "P6", "P7", "ensemble"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let mut cfg = tiny_train();
    cfg.max_iters = 1;
    cfg.batch_size = 1;
    let report = run_ablation(&spec, &dataset, &tiny_model(), &cfg, |_, _| {}).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.to_text_table().lines().count(), 9);
}

#[test]
fn map_encoding_axis_switches_kind_and_distill_axis_drops_head() {
    let dataset = tiny_dataset(1);
    let base = tiny_model();
    let color = derive_model_config(&base, AblationAxis::MapEncoding, "color", &dataset).unwrap();
    assert_eq!(color.kind, lavide_core::model::ModelKind::LavideColor);
    assert!(color.palette.is_some());
    let lang = derive_model_config(&base, AblationAxis::MapEncoding, "language", &dataset).unwrap();
    assert_eq!(lang.kind, lavide_core::model::ModelKind::Lavide);

    let no_distill = derive_model_config(&base, AblationAxis::Distill, "without", &dataset).unwrap();
    let with = LavideModel::new(base.clone(), dataset.vocab.clone(), 0).unwrap();
    let without = LavideModel::new(no_distill, dataset.vocab.clone(), 0).unwrap();
    let diff = with.store.total_len() - without.store.total_len();
    assert_eq!(diff, with.store.subtree_len("distill.head"));
}

#[test]
fn invalid_values_fail_before_training() {
    let dataset = tiny_dataset(1);
    let spec = AblationSpec { axis: AblationAxis::Experts, values: vec!["0".into()] };
    assert!(spec.validate().is_err());
    let spec = AblationSpec { axis: AblationAxis::Prompts, values: vec!["P9".into()] };
    assert!(run_ablation(&spec, &dataset, &tiny_model(), &tiny_train(), |_, _| {}).is_err());
}
