//! Trainable-parameter plumbing: named parameter store, graph sessions that
//! bind parameters to tape leaves, layer building blocks, the AdamW update
//! and the warmup + polynomial-decay learning-rate schedule.

use ndarray::{Array1, Array2};

use crate::autodiff::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat store of named parameter tensors. Construction order is the
/// checkpoint serialization order.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn subtree_len(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }
}

/// A tape plus the parameter-to-leaf bindings made while building it.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<(ParamId, Var)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: Vec::new() }
    }

    /// Bind a parameter as a tape leaf (memoized per session).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.graph.leaf(self.store.value(id).clone());
        self.bound.push((id, v));
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.leaf(value)
    }

    /// Run backward from `loss` and collect parameter gradients, densely
    /// indexed by parameter id (zeros where a parameter was unused).
    pub fn param_grads(&self, loss: Var) -> Vec<Tensor> {
        let grads = self.graph.backward(loss);
        let mut out: Vec<Tensor> =
            self.store.values.iter().map(|t| Tensor::zeros(t.raw_dim())).collect();
        for &(pid, var) in &self.bound {
            if let Some(g) = self.graph.grad_of(&grads, var) {
                out[pid.0] += &g;
            }
        }
        out
    }
}

fn init_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / (fan_in as f64 + cols as f64)).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.range(-bound, bound)).into_dyn()
}

/// 2-d convolution layer (kernel, stride, pad fixed at init).
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let w = store.add(format!("{name}.w"), init_matrix(rng, fan_in, cout, fan_in));
        let b = store.add(format!("{name}.b"), Array1::<f64>::zeros(cout).into_dyn());
        Self { w, b, kernel, stride, pad }
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.graph.conv2d(x, w, b, self.kernel, self.stride, self.pad)
    }
}

/// Depthwise 3x3 convolution layer (stride 1, pad 1).
pub struct DwConvLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl DwConvLayer {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, channels: usize) -> Self {
        let w = store.add(format!("{name}.w"), init_matrix(rng, channels, 9, 9));
        let b = store.add(format!("{name}.b"), Array1::<f64>::zeros(channels).into_dyn());
        Self { w, b }
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.graph.dw_conv3x3(x, w, b)
    }
}

/// Per-position linear layer.
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add(format!("{name}.w"), init_matrix(rng, cin, cout, cin));
        let b = store.add(format!("{name}.b"), Array1::<f64>::zeros(cout).into_dyn());
        Self { w, b }
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.graph.linear(x, w, b)
    }
}

/// Per-position channel normalization with learnable gain and bias.
pub struct NormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array1::<f64>::ones(channels).into_dyn());
        let bias = store.add(format!("{name}.bias"), Array1::<f64>::zeros(channels).into_dyn());
        Self { gain, bias }
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Var {
        let gain = s.param(self.gain);
        let bias = s.param(self.bias);
        s.graph.chan_norm(x, gain, bias)
    }
}

/// conv -> norm -> gelu, the block shape shared by the object encoder and
/// the object context optimization module.
pub struct ConvBlock {
    pub conv: Conv2dLayer,
    pub norm: NormLayer,
}

impl ConvBlock {
    pub fn init(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, cin: usize, cout: usize) -> Self {
        let conv = Conv2dLayer::init(store, rng, &format!("{name}.conv"), cin, cout, 3, 1, 1);
        let norm = NormLayer::init(store, &format!("{name}.norm"), cout);
        Self { conv, norm }
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Var {
        let y = self.conv.apply(s, x);
        let y = self.norm.apply(s, y);
        s.graph.gelu(y)
    }
}

/// Per-position two-layer perceptron with a GELU in between.
pub struct MlpLayer {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl MlpLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
    ) -> Self {
        let fc1 = LinearLayer::init(store, rng, &format!("{name}.fc1"), cin, hidden);
        let fc2 = LinearLayer::init(store, rng, &format!("{name}.fc2"), hidden, cout);
        Self { fc1, fc2 }
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Var {
        let y = self.fc1.apply(s, x);
        let y = s.graph.gelu(y);
        self.fc2.apply(s, y)
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.values.iter().map(|t| Tensor::zeros(t.raw_dim())).collect(),
            v: store.values.iter().map(|t| Tensor::zeros(t.raw_dim())).collect(),
        }
    }

    /// One update; `step` is the 1-based step count used for bias correction.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, step: usize) {
        assert_eq!(grads.len(), store.len());
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Tensor>, v: Vec<Tensor>) {
        self.m = m;
        self.v = v;
    }
}

/// Linear warmup to the peak rate, then polynomial decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.warmup_iters > 0 && iter < self.warmup_iters {
            return self.peak * iter as f64 / self.warmup_iters as f64;
        }
        let span = (self.max_iters - self.warmup_iters).max(1);
        let progress = (iter - self.warmup_iters) as f64 / span as f64;
        self.peak * (1.0 - progress.min(1.0)).powf(self.power)
    }
}
