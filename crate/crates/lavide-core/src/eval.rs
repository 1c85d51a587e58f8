//! Confusion-matrix metrics, model evaluation and the ablation harness.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::map_branch::PromptMode;
use crate::model::{LavideModel, ModelConfig, ModelKind, PreparedSample};
use crate::training::{train, TrainConfig, TrainState};
use crate::types::ChangeMap;

/// Pixel counts over the changed class (1 = positive).
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn accumulate(&mut self, pred: &ChangeMap, gt: &ChangeMap) -> Result<()> {
        if pred.data().dim() != gt.data().dim() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
            match (p, g) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fp += 1,
                (0, 1) => self.fn_ += 1,
                (0, 0) => self.tn += 1,
                _ => return Err(Error::Data("confusion inputs must be binary".into())),
            }
        }
        Ok(())
    }

    /// Field-wise addition, so evaluation shards merge associatively.
    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision, recall, F1 and IoU over the changed class; 0/0 ratios are 0.
pub fn metrics(counts: ConfusionCounts) -> Metrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let iou = ratio(counts.tp, counts.tp + counts.fp + counts.fn_);
    Metrics { f1, iou, recall, precision }
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("no NaN in rank input"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Metrics report written by the eval command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub samples: usize,
    pub counts: ConfusionCounts,
}

/// Evaluate a model over prepared samples.
pub fn evaluate_model(model: &LavideModel, samples: &[PreparedSample]) -> Result<MetricReport> {
    let mut counts = ConfusionCounts::default();
    for prep in samples {
        let pred = model.predict_prepared(prep)?;
        counts.accumulate(&pred, &prep.gt)?;
    }
    let m = metrics(counts);
    Ok(MetricReport {
        f1: m.f1,
        iou: m.iou,
        recall: m.recall,
        precision: m.precision,
        samples: samples.len(),
        counts,
    })
}

/// Pixel accuracy of the segmentation baseline against post-change labels.
pub fn seg_pixel_accuracy(model: &LavideModel, samples: &[PreparedSample]) -> Result<f64> {
    let mut correct = 0u64;
    let mut total = 0u64;
    for prep in samples {
        let post = prep.post_map.as_ref().ok_or_else(|| {
            Error::Data(format!("sample '{}' has no post-change map", prep.stem))
        })?;
        let seg = model.predict_seg_prepared(prep)?;
        for (p, g) in seg.indices().iter().zip(post.indices().iter()) {
            correct += u64::from(p == g);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Experts,
    Prompts,
    MapEncoding,
    Ocopt,
    Distill,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(Self::Experts),
            "prompts" => Ok(Self::Prompts),
            "map_encoding" => Ok(Self::MapEncoding),
            "ocopt" => Ok(Self::Ocopt),
            "distill" => Ok(Self::Distill),
            other => Err(Error::Config(format!(
                "unknown ablation axis '{other}' (expected experts, prompts, map_encoding, ocopt or distill)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Experts => "experts",
            Self::Prompts => "prompts",
            Self::MapEncoding => "map_encoding",
            Self::Ocopt => "ocopt",
            Self::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub values: Vec<String>,
}

impl AblationSpec {
    /// Check every value against the axis before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("ablation needs at least one value".into()));
        }
        for v in &self.values {
            self.check_value(v)?;
        }
        Ok(())
    }

    fn check_value(&self, value: &str) -> Result<()> {
        match self.axis {
            AblationAxis::Experts => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::Config(format!("expert count '{value}' is not a positive integer")))?;
                if n == 0 {
                    return Err(Error::Config("expert count must be at least 1".into()));
                }
            }
            AblationAxis::Prompts => {
                PromptMode::parse(value)?;
            }
            AblationAxis::MapEncoding => {
                if value != "language" && value != "color" {
                    return Err(Error::Config(format!(
                        "map encoding '{value}' must be 'language' or 'color'"
                    )));
                }
            }
            AblationAxis::Ocopt | AblationAxis::Distill => {
                if value != "with" && value != "without" {
                    return Err(Error::Config(format!(
                        "'{value}' must be 'with' or 'without' for axis {}",
                        self.axis.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Derive per-value model configs: identical except the ablated component.
pub fn derive_model_config(
    base: &ModelConfig,
    axis: AblationAxis,
    value: &str,
    dataset: &Dataset,
) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::Experts => {
            cfg.moe.num_experts = value.parse().expect("validated");
        }
        AblationAxis::Prompts => {
            cfg.prompt_mode = PromptMode::parse(value)?;
        }
        AblationAxis::MapEncoding => {
            if value == "color" {
                cfg.kind = ModelKind::LavideColor;
                let palette = dataset.palette.as_ref().ok_or_else(|| {
                    Error::Config("color map encoding needs palette.json in the dataset".into())
                })?;
                cfg.palette = Some(palette.colors().to_vec());
            } else {
                cfg.kind = ModelKind::Lavide;
                cfg.palette = None;
            }
        }
        AblationAxis::Ocopt => cfg.use_ocopt = value == "with",
        AblationAxis::Distill => cfg.use_distill = value == "with",
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub f1: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Aligned plain-text table.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.value.len())
            .chain([self.axis.len()])
            .max()
            .unwrap_or(8)
            .max(8);
        out.push_str(&format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            self.axis, "F1", "IoU", "Rec", "Pre"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}\n",
                r.value, r.f1, r.iou, r.recall, r.precision
            ));
        }
        out
    }
}

/// Train one model per axis value under identical seeds and configs except
/// the ablated component, evaluating each on the given dataset. Forward
/// invariants are validated throughout training.
pub fn run_ablation(
    spec: &AblationSpec,
    dataset: &Dataset,
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_progress: impl FnMut(&str, &crate::training::IterLog),
) -> Result<AblationReport> {
    spec.validate()?;
    train_cfg.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let model_cfg = derive_model_config(base_model, spec.axis, value, dataset)?;
        let model = LavideModel::new(model_cfg, dataset.vocab.clone(), train_cfg.seed)?;
        let samples: Vec<PreparedSample> =
            dataset.samples.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
        let mut state = TrainState::new(model, train_cfg);
        train(&mut state, &samples, train_cfg, true, |log| on_progress(value, log))?;
        let report = evaluate_model(&state.model, &samples)?;
        rows.push(AblationRow {
            value: value.clone(),
            f1: report.f1,
            iou: report.iou,
            recall: report.recall,
            precision: report.precision,
        });
    }
    Ok(AblationReport { axis: spec.axis.name().to_string(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn identity_prediction_counts() {
        let mut gt_data = ndarray::Array2::zeros((10, 10));
        for i in 0..5 {
            gt_data[(0, i)] = 1;
        }
        let gt = ChangeMap::new(gt_data).unwrap();
        let mut c = ConfusionCounts::default();
        c.accumulate(&gt, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 0, 0, 95));
    }

    #[test]
    fn null_predictor_counts() {
        let gt = ChangeMap::new(arr2(&[[1u8, 1, 0, 0]])).unwrap();
        let pred = ChangeMap::new(arr2(&[[0u8, 0, 0, 0]])).unwrap();
        let mut c = ConfusionCounts::default();
        c.accumulate(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 2));
        let m = metrics(c);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.iou, 0.0);
    }

    #[test]
    fn hand_counted_case() {
        let pred = ChangeMap::new(arr2(&[[1u8, 0], [0, 0]])).unwrap();
        let gt = ChangeMap::new(arr2(&[[1u8, 1], [0, 0]])).unwrap();
        let mut c = ConfusionCounts::default();
        c.accumulate(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 0, 1, 2));
        let m = metrics(c);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.iou, 0.5);
    }

    #[test]
    fn perfect_prediction_is_all_ones() {
        let gt = ChangeMap::new(arr2(&[[1u8, 0], [0, 1]])).unwrap();
        let mut c = ConfusionCounts::default();
        c.accumulate(&gt, &gt).unwrap();
        let m = metrics(c);
        assert_eq!((m.f1, m.iou, m.recall, m.precision), (1.0, 1.0, 1.0, 1.0));
    }

    /// Published (F1 %, IoU %) pairs for this method family; each must
    /// satisfy IoU = F1 / (2 - F1) up to rounding.
    pub const REPORTED_PAIRS: [(f64, f64); 13] = [
        (36.5, 22.3),
        (65.2, 48.4),
        (72.5, 56.9),
        (69.1, 52.9),
        (33.7, 20.3),
        (36.5, 22.3),
        (34.0, 20.5),
        (34.1, 20.6),
        (34.7, 21.0),
        (35.7, 21.7),
        (36.5, 22.3),
        (34.8, 21.1),
        (36.5, 22.3),
    ];

    #[test]
    fn metric_identity_on_reported_values() {
        for (f1, iou) in REPORTED_PAIRS {
            let implied = 100.0 * (f1 / 100.0) / (2.0 - f1 / 100.0);
            assert!(
                (implied - iou).abs() <= 0.25,
                "F1 {f1} implies IoU {implied:.2}, reported {iou}"
            );
        }
    }

    #[test]
    fn merge_is_fieldwise_addition() {
        let a = ConfusionCounts { tp: 1, fp: 2, fn_: 3, tn: 4 };
        let b = ConfusionCounts { tp: 10, fp: 20, fn_: 30, tn: 40 };
        let m = a.merge(b);
        assert_eq!(m, ConfusionCounts { tp: 11, fp: 22, fn_: 33, tn: 44 });
        assert_eq!(m.total(), 110);
    }

    #[test]
    fn accumulate_is_order_independent() {
        let gt1 = ChangeMap::new(arr2(&[[1u8, 0]])).unwrap();
        let gt2 = ChangeMap::new(arr2(&[[0u8, 0]])).unwrap();
        let p1 = ChangeMap::new(arr2(&[[1u8, 1]])).unwrap();
        let p2 = ChangeMap::new(arr2(&[[0u8, 1]])).unwrap();
        let mut a = ConfusionCounts::default();
        a.accumulate(&p1, &gt1).unwrap();
        a.accumulate(&p2, &gt2).unwrap();
        let mut b = ConfusionCounts::default();
        b.accumulate(&p2, &gt2).unwrap();
        b.accumulate(&p1, &gt1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spearman_monotone_is_one() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 20.0, 25.0, 90.0];
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let inv = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&xs, &inv) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn axis_validation() {
        assert!(AblationAxis::parse("experts").is_ok());
        assert!(AblationAxis::parse("bogus").is_err());
        let spec = AblationSpec {
            axis: AblationAxis::Experts,
            values: vec!["1".into(), "5".into(), "10".into()],
        };
        assert!(spec.validate().is_ok());
        let bad = AblationSpec { axis: AblationAxis::Experts, values: vec!["x".into()] };
        assert!(bad.validate().is_err());
        let prompts = AblationSpec {
            axis: AblationAxis::Prompts,
            values: ["P1", "P2", "P3", "P4", "P5", "P6", "P7", "ensemble"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        assert!(prompts.validate().is_ok());
        let bad_mode = AblationSpec { axis: AblationAxis::Ocopt, values: vec!["maybe".into()] };
        assert!(bad_mode.validate().is_err());
    }

    #[test]
    fn report_table_shape() {
        let report = AblationReport {
            axis: "experts".into(),
            rows: vec![
                AblationRow { value: "1".into(), f1: 0.5, iou: 0.33, recall: 0.5, precision: 0.5 },
                AblationRow { value: "10".into(), f1: 0.6, iou: 0.43, recall: 0.6, precision: 0.6 },
            ],
        };
        let text = report.to_text_table();
        assert_eq!(text.lines().count(), 3);
        let json = serde_json::to_string(&report).unwrap();
        let parsed: AblationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.rows.len(), 2);
    }
}
