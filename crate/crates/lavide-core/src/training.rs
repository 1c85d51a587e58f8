//! Optimization loop and checkpointing.
//!
//! Batches are drawn cyclically from the sample list so a resumed run sees
//! exactly the batches an uninterrupted run would. Per-sample forward and
//! backward passes may run on worker threads; gradients are reduced in
//! sample order, so results do not depend on the thread count.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{view3, Tensor};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{LavideModel, ModelConfig, ModelKind, PreparedSample};
use crate::nn::{AdamW, LrSchedule, ParamStore};
use crate::types::CategoryVocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Fraction of max_iters spent in linear warmup.
    pub warmup_frac: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Worker-thread cap; 0 defers to LAVIDE_NUM_THREADS, then to the
    /// available parallelism.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-5,
            warmup_frac: 0.1,
            poly_power: 1.0,
            batch_size: 4,
            max_iters: 500,
            weight_decay: 0.01,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_iters == 0 {
            return Err(Error::Config("batch_size and max_iters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            warmup_iters: (self.warmup_frac * self.max_iters as f64).floor() as usize,
            max_iters: self.max_iters,
            power: self.poly_power,
        }
    }

    pub fn effective_threads(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        if let Ok(v) = std::env::var("LAVIDE_NUM_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n > 0 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// Model, optimizer moments and the iteration counter.
pub struct TrainState {
    pub model: LavideModel,
    pub opt: AdamW,
    pub iter: usize,
}

impl TrainState {
    pub fn new(model: LavideModel, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&model.store, cfg.weight_decay);
        Self { model, opt, iter: 0 }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub change: f64,
    pub distill: f64,
    pub contrast: f64,
}

fn batch_indices(iter: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch).map(|j| (iter * batch + j) % n).collect()
}

type SampleResult = (LossBreakdown, Vec<Tensor>);

fn forward_backward(model: &LavideModel, prep: &PreparedSample) -> Result<SampleResult> {
    match model.config.kind {
        ModelKind::CategorySeg => {
            let post = prep.post_map.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "sample '{}' has no post-change map; the segmentation baseline needs post_maps/",
                    prep.stem
                ))
            })?;
            let mut fp = model.forward_seg(&prep.image)?;
            let target = post.indices().clone();
            let loss = fp.session.graph.cross_entropy(fp.logits, target, None);
            let value = fp.session.graph.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("segmentation loss is {value}")));
            }
            let grads = fp.session.param_grads(loss);
            Ok((LossBreakdown { total: value, change: value, distill: 0.0, contrast: 0.0 }, grads))
        }
        _ => {
            let mut fp = model.forward_prepared(prep)?;
            let (total, breakdown, _zeros) = model.losses(&mut fp, &prep.gt)?;
            let grads = fp.session.param_grads(total);
            Ok((breakdown, grads))
        }
    }
}

/// Validate the per-forward invariants the ablation harness watches:
/// routing weights form a simplex and the logits have the right shape.
fn validate_forward(model: &LavideModel, prep: &PreparedSample) -> Result<()> {
    if model.config.kind == ModelKind::CategorySeg {
        return Ok(());
    }
    let fp = model.forward_prepared(prep)?;
    let (h, w, _) = prep.image.dim();
    let shape = fp.session.graph.shape(fp.logits);
    if shape != [h, w, 2] {
        return Err(Error::Shape(format!("logits shape {shape:?}, expected [{h}, {w}, 2]")));
    }
    for (i, &wv) in fp.route_weights.iter().enumerate() {
        let wmap = view3(fp.session.graph.value(wv));
        let (wh, ww, n) = wmap.dim();
        if n != model.config.moe.num_experts {
            return Err(Error::Config(format!(
                "router at scale {i} emits {n} weights, expected {}",
                model.config.moe.num_experts
            )));
        }
        for y in 0..wh {
            for x in 0..ww {
                let row = wmap.slice(ndarray::s![y, x, ..]);
                if row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Numeric(format!("negative route weight at scale {i}")));
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Numeric(format!(
                        "route weights at scale {i} sum to {sum}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One optimization step over a batch. Gradients are averaged over the
/// batch; the teacher is outside the parameter store and never updated.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&PreparedSample],
    schedule: &LrSchedule,
    threads: usize,
) -> Result<LossBreakdown> {
    let lr = schedule.lr_at(state.iter);
    let model = &state.model;
    let mut results: Vec<Option<Result<SampleResult>>> = Vec::new();
    results.resize_with(batch.len(), || None);

    let workers = threads.max(1).min(batch.len());
    if workers <= 1 {
        for (slot, prep) in results.iter_mut().zip(batch.iter()) {
            *slot = Some(forward_backward(model, prep));
        }
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in batch
                .iter()
                .enumerate()
                .collect::<Vec<_>>()
                .chunks((batch.len() + workers - 1) / workers)
            {
                let chunk: Vec<(usize, &&PreparedSample)> = chunk.to_vec();
                handles.push(scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, prep)| (i, forward_backward(model, prep)))
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("worker thread panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }

    // Reduce in sample order so the result is independent of threading.
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor> =
        state.model.store.iter().map(|(_, t)| Tensor::zeros(t.raw_dim())).collect();
    let mut sum = LossBreakdown { total: 0.0, change: 0.0, distill: 0.0, contrast: 0.0 };
    for r in results.into_iter() {
        let (breakdown, sample_grads) = r.expect("all batch slots filled")?;
        for (acc, g) in grads.iter_mut().zip(sample_grads.into_iter()) {
            *acc += &g;
        }
        sum.total += breakdown.total;
        sum.change += breakdown.change;
        sum.distill += breakdown.distill;
        sum.contrast += breakdown.contrast;
    }
    for g in &mut grads {
        g.mapv_inplace(|v| v * inv_b);
    }
    let breakdown = LossBreakdown {
        total: sum.total * inv_b,
        change: sum.change * inv_b,
        distill: sum.distill * inv_b,
        contrast: sum.contrast * inv_b,
    };

    let step = state.iter + 1;
    state.opt.update(&mut state.model.store, &grads, lr, step);
    state.iter += 1;
    Ok(breakdown)
}

/// Run the loop until `cfg.max_iters`, invoking `on_iter` after each step.
/// With `validate` set, the forward invariants are checked after every
/// parameter update (the ablation harness runs with this on).
pub fn train(
    state: &mut TrainState,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    validate: bool,
    mut on_iter: impl FnMut(&IterLog),
) -> Result<Vec<IterLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let schedule = cfg.schedule();
    let threads = cfg.effective_threads();
    let mut logs = Vec::with_capacity(cfg.max_iters.saturating_sub(state.iter));
    while state.iter < cfg.max_iters {
        let idx = batch_indices(state.iter, cfg.batch_size, samples.len());
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let lr = schedule.lr_at(state.iter);
        let breakdown = train_step(state, &batch, &schedule, threads)?;
        if validate {
            validate_forward(&state.model, batch[0])?;
        }
        let log = IterLog {
            iter: state.iter - 1,
            lr,
            total: breakdown.total,
            change: breakdown.change,
            distill: breakdown.distill,
            contrast: breakdown.contrast,
        };
        on_iter(&log);
        logs.push(log);
    }
    Ok(logs)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LVCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model_config: ModelConfig,
    vocab: Vec<String>,
    iteration: usize,
    weight_decay: f64,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Single-file binary checkpoint: magic, version, JSON manifest, then the
/// raw little-endian f64 data for parameters and both Adam moments.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model_config: state.model.config.clone(),
        vocab: state.model.vocab.names().to_vec(),
        iteration: state.iter,
        weight_decay: state.opt.weight_decay,
        params: state
            .model
            .store
            .iter()
            .map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    let (m, v) = state.opt.moments();
    for tensors in [
        &state.model.store.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
        &m.to_vec(),
        &v.to_vec(),
    ] {
        for t in tensors.iter() {
            for value in t.iter() {
                file.write_all(&value.to_le_bytes())?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

/// Rebuild the full training state. Truncated or mismatched files error out
/// before any state is constructed.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| truncated(path))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint file", path.display())));
    }
    let mut ver = [0u8; 4];
    file.read_exact(&mut ver).map_err(|_| truncated(path))?;
    let version = u32::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint format version {version} is not supported (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(|_| truncated(path))?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(|_| truncated(path))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| Error::Data(format!("bad checkpoint manifest: {e}")))?;

    let vocab = CategoryVocabulary::new(header.vocab)?;
    let model = LavideModel::new(header.model_config, vocab, 0)?;

    // The freshly built model must declare exactly the manifest parameters.
    let built: Vec<(String, Vec<usize>)> =
        model.store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    if built.len() != header.params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model defines {}",
            header.params.len(),
            built.len()
        )));
    }
    for (entry, (name, shape)) in header.params.iter().zip(built.iter()) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Data(format!(
                "checkpoint parameter '{}' {:?} does not match model '{}' {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }

    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != total * 3 * 8 {
        return Err(truncated(path));
    }
    let mut values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));

    let mut state = TrainState {
        opt: AdamW::new(&model.store, header.weight_decay),
        model,
        iter: header.iteration,
    };
    fill_store(&mut state.model.store, &mut values);
    let mut m = Vec::new();
    let mut v = Vec::new();
    for entry in &header.params {
        m.push(read_tensor(&mut values, &entry.shape));
    }
    for entry in &header.params {
        v.push(read_tensor(&mut values, &entry.shape));
    }
    state.opt.restore_moments(m, v);
    Ok(state)
}

fn truncated(path: &Path) -> Error {
    Error::Data(format!("checkpoint {} is truncated or corrupt", path.display()))
}

fn fill_store(store: &mut ParamStore, values: &mut impl Iterator<Item = f64>) {
    for i in 0..store.len() {
        let t = store.value_mut(crate::nn::ParamId(i));
        for slot in t.iter_mut() {
            *slot = values.next().expect("length checked");
        }
    }
}

fn read_tensor(values: &mut impl Iterator<Item = f64>, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = values.take(n).collect();
    Tensor::from_shape_vec(ndarray::IxDyn(shape), data).expect("length checked")
}
