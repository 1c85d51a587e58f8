//! Minimal reverse-mode autodiff over f64 tensors.
//!
//! Values are computed eagerly as nodes are appended; `backward` walks the
//! tape in reverse. Feature maps use (H, W, C) layout, losses are 0-d
//! tensors. Convolutions go through im2col + GEMM so the heavy lifting runs
//! on `matrixmultiply` via `ndarray::dot`.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Ix3};

pub type Tensor = ArrayD<f64>;

const NORM_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize },
    DwConv3x3 { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    ChanNorm { x: Var, gain: Var, bias: Var },
    Gelu { x: Var },
    Tanh { x: Var },
    SoftmaxC { x: Var },
    ConcatC { inputs: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    MulChan { x: Var, weight: Var },
    SliceC { x: Var, channel: usize },
    AvgPool { x: Var, fh: usize, fw: usize },
    ResizeBilinear { x: Var },
    SumAll { x: Var },
    DotConst { x: Var, coeff: Tensor },
    WeightedSum { terms: Vec<(f64, Var)> },
    CrossEntropy { logits: Var, target: Array2<usize>, weights: Option<Vec<f64>>, weight_total: f64 },
    CosineTo { x: Var, target: Array3<f64> },
    ContrastCos { a: Var, b: Var, changed: Array2<u8>, margin: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eager tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub fn view3(t: &Tensor) -> ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("expected a (H, W, C) tensor")
}

pub fn view2(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("tensor is not in standard layout")
}

pub fn scalar(t: &Tensor) -> f64 {
    debug_assert_eq!(t.len(), 1);
    *t.iter().next().unwrap()
}

fn scalar_tensor(v: f64) -> Tensor {
    ArrayD::from_elem(ndarray::IxDyn(&[]), v)
}

// `dot` may hand back an F-order result (it picks the fastest memory order
// for the operand layouts), so force C order before reshaping or slicing.
pub(crate) fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn reshape3(a: Array2<f64>, h: usize, w: usize, c: usize) -> Tensor {
    to_standard(a).into_shape_with_order((h, w, c)).unwrap().into_dyn()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        scalar(self.value(v))
    }

    /// Insert a leaf node (input, parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn dims3(&self, v: Var) -> (usize, usize, usize) {
        let s = self.shape(v);
        debug_assert_eq!(s.len(), 3);
        (s[0], s[1], s[2])
    }

    /// 2-d convolution; `w` is (k*k*cin, cout), `b` is (cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (h, wd, cin) = self.dims3(x);
        let wshape = self.shape(w);
        assert_eq!(wshape[0], kernel * kernel * cin, "conv weight rows mismatch");
        let cout = wshape[1];
        let (ho, wo) = conv_out_dims(h, wd, kernel, stride, pad);
        let cols = im2col(&view3(self.value(x)), kernel, stride, pad);
        let wmat = view2(self.value(w), kernel * kernel * cin, cout);
        let mut y = cols.dot(&wmat);
        let bias = self.value(b);
        for mut row in y.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += bias[[c]];
            }
        }
        let y3 = reshape3(y, ho, wo, cout);
        self.push(y3, Op::Conv2d { x, w, b, kernel, stride, pad })
    }

    /// Depthwise 3x3 convolution, stride 1, pad 1; `w` is (c, 9), `b` is (c).
    pub fn dw_conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (h, wd, c) = self.dims3(x);
        let xv = view3(self.value(x));
        let wm = view2(self.value(w), c, 9);
        let bias = self.value(b).clone();
        let mut y = Array3::zeros((h, wd, c));
        for oy in 0..h {
            for ox in 0..wd {
                for ch in 0..c {
                    let mut acc = bias[[ch]];
                    for ky in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wm[(ch, ky * 3 + kx)] * xv[(iy as usize, ix as usize, ch)];
                        }
                    }
                    y[(oy, ox, ch)] = acc;
                }
            }
        }
        self.push(y.into_dyn(), Op::DwConv3x3 { x, w, b })
    }

    /// Per-position linear map; `w` is (cin, cout), `b` is (cout).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (h, wd, cin) = self.dims3(x);
        let wshape = self.shape(w);
        assert_eq!(wshape[0], cin, "linear weight rows mismatch");
        let cout = wshape[1];
        let xm = view2(self.value(x), h * wd, cin);
        let wm = view2(self.value(w), cin, cout);
        let mut y = xm.dot(&wm);
        let bias = self.value(b);
        for mut row in y.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += bias[[c]];
            }
        }
        let y3 = reshape3(y, h, wd, cout);
        self.push(y3, Op::Linear { x, w, b })
    }

    /// Per-position normalization over the channel axis with learnable
    /// per-channel gain and bias.
    pub fn chan_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (h, w, c) = self.dims3(x);
        let xv = view3(self.value(x));
        let g = self.value(gain).clone();
        let b = self.value(bias).clone();
        let mut y = Array3::zeros((h, w, c));
        for p in 0..h * w {
            let (py, px) = (p / w, p % w);
            let row = xv.slice(ndarray::s![py, px, ..]);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            for ch in 0..c {
                y[(py, px, ch)] = (row[ch] - mean) * inv_std * g[[ch]] + b[[ch]];
            }
        }
        self.push(y.into_dyn(), Op::ChanNorm { x, gain, bias })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(gelu_fwd);
        self.push(y, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(f64::tanh);
        self.push(y, Op::Tanh { x })
    }

    /// Softmax over the channel axis of a (H, W, C) map.
    pub fn softmax_c(&mut self, x: Var) -> Var {
        let (h, w, c) = self.dims3(x);
        let xv = view3(self.value(x));
        let mut y = Array3::zeros((h, w, c));
        for py in 0..h {
            for px in 0..w {
                let row = xv.slice(ndarray::s![py, px, ..]);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (row[ch] - m).exp();
                    y[(py, px, ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    y[(py, px, ch)] /= z;
                }
            }
        }
        self.push(y.into_dyn(), Op::SoftmaxC { x })
    }

    /// Concatenate maps along the channel axis.
    pub fn concat_c(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty());
        let (h, w, _) = self.dims3(inputs[0]);
        let total: usize = inputs.iter().map(|&v| self.dims3(v).2).sum();
        let mut y = Array3::zeros((h, w, total));
        let mut offset = 0;
        for &v in inputs {
            let (vh, vw, vc) = self.dims3(v);
            assert_eq!((vh, vw), (h, w), "concat spatial dims mismatch");
            let xv = view3(self.value(v));
            y.slice_mut(ndarray::s![.., .., offset..offset + vc]).assign(&xv);
            offset += vc;
        }
        self.push(y.into_dyn(), Op::ConcatC { inputs: inputs.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).mapv(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    /// Broadcast-multiply a (H, W, C) map by a (H, W, 1) weight map.
    pub fn mul_chan(&mut self, x: Var, weight: Var) -> Var {
        let (h, w, c) = self.dims3(x);
        let (wh, ww, wc) = self.dims3(weight);
        assert_eq!((wh, ww, wc), (h, w, 1), "mul_chan weight must be (H, W, 1)");
        let xv = view3(self.value(x));
        let wv = view3(self.value(weight));
        let mut y = Array3::zeros((h, w, c));
        for py in 0..h {
            for px in 0..w {
                let s = wv[(py, px, 0)];
                for ch in 0..c {
                    y[(py, px, ch)] = xv[(py, px, ch)] * s;
                }
            }
        }
        self.push(y.into_dyn(), Op::MulChan { x, weight })
    }

    /// Extract one channel as a (H, W, 1) map.
    pub fn slice_c(&mut self, x: Var, channel: usize) -> Var {
        let (h, w, c) = self.dims3(x);
        assert!(channel < c);
        let xv = view3(self.value(x));
        let mut y = Array3::zeros((h, w, 1));
        for py in 0..h {
            for px in 0..w {
                y[(py, px, 0)] = xv[(py, px, channel)];
            }
        }
        self.push(y.into_dyn(), Op::SliceC { x, channel })
    }

    /// Non-overlapping average pooling; factors must divide the dims.
    pub fn avg_pool(&mut self, x: Var, fh: usize, fw: usize) -> Var {
        let (h, w, c) = self.dims3(x);
        assert!(fh > 0 && fw > 0 && h % fh == 0 && w % fw == 0, "pool factor must divide dims");
        let xv = view3(self.value(x));
        let (ho, wo) = (h / fh, w / fw);
        let inv = 1.0 / (fh * fw) as f64;
        let mut y = Array3::zeros((ho, wo, c));
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..fh {
                        for dx in 0..fw {
                            acc += xv[(oy * fh + dy, ox * fw + dx, ch)];
                        }
                    }
                    y[(oy, ox, ch)] = acc * inv;
                }
            }
        }
        self.push(y.into_dyn(), Op::AvgPool { x, fh, fw })
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = view3(self.value(x));
        let y = bilinear_resize(&xv, out_h, out_w);
        self.push(y.into_dyn(), Op::ResizeBilinear { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(scalar_tensor(s), Op::SumAll { x })
    }

    /// Scalar dot product with a fixed coefficient tensor.
    pub fn dot_const(&mut self, x: Var, coeff: Tensor) -> Var {
        assert_eq!(self.shape(x), coeff.shape());
        let s = self.value(x).iter().zip(coeff.iter()).map(|(a, b)| a * b).sum();
        self.push(scalar_tensor(s), Op::DotConst { x, coeff })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let s = terms.iter().map(|&(k, v)| k * self.scalar_value(v)).sum();
        self.push(scalar_tensor(s), Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Mean per-pixel K-class cross-entropy with optional class weights.
    /// `logits` is (H, W, K); `target` holds class indices.
    pub fn cross_entropy(&mut self, logits: Var, target: Array2<usize>, weights: Option<Vec<f64>>) -> Var {
        let (h, w, k) = self.dims3(logits);
        assert_eq!(target.dim(), (h, w), "target dims mismatch");
        if let Some(ws) = &weights {
            assert_eq!(ws.len(), k, "class weight count mismatch");
        }
        let lv = view3(self.value(logits));
        let mut total = 0.0;
        let mut weight_total = 0.0;
        for py in 0..h {
            for px in 0..w {
                let t = target[(py, px)];
                debug_assert!(t < k);
                let row = lv.slice(ndarray::s![py, px, ..]);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let wgt = weights.as_ref().map_or(1.0, |ws| ws[t]);
                total += wgt * (lse - row[t]);
                weight_total += wgt;
            }
        }
        let loss = if weight_total > 0.0 { total / weight_total } else { 0.0 };
        self.push(scalar_tensor(loss), Op::CrossEntropy { logits, target, weights, weight_total })
    }

    /// Mean over positions of (1 - cosine) against a constant target map.
    /// Positions where either side has (near-)zero norm contribute 1 and are
    /// counted; returns (loss, zero_position_count).
    pub fn cosine_distance_to(&mut self, x: Var, target: Array3<f64>) -> (Var, usize) {
        let (h, w, d) = self.dims3(x);
        assert_eq!(target.dim(), (h, w, d), "cosine target dims mismatch");
        let xv = view3(self.value(x));
        let mut total = 0.0;
        let mut zeros = 0;
        for py in 0..h {
            for px in 0..w {
                let a = xv.slice(ndarray::s![py, px, ..]);
                let b = target.slice(ndarray::s![py, px, ..]);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = if na < COS_EPS || nb < COS_EPS {
                    zeros += 1;
                    0.0
                } else {
                    a.iter().zip(b.iter()).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
                };
                total += 1.0 - cos;
            }
        }
        let loss = total / (h * w) as f64;
        (self.push(scalar_tensor(loss), Op::CosineTo { x, target }), zeros)
    }

    /// Cosine contrastive objective over two maps: unchanged positions
    /// contribute (1 - cos), changed positions a hinge max(0, cos - margin);
    /// the result is the mean over positions. Inputs are normalized
    /// internally, so the loss is scale-invariant per position.
    pub fn contrast_cos(&mut self, a: Var, b: Var, changed: Array2<u8>, margin: f64) -> Var {
        let (h, w, d) = self.dims3(a);
        assert_eq!(self.dims3(b), (h, w, d), "contrast input dims mismatch");
        assert_eq!(changed.dim(), (h, w), "contrast mask dims mismatch");
        let av = view3(self.value(a));
        let bv = view3(self.value(b));
        let mut total = 0.0;
        for py in 0..h {
            for px in 0..w {
                let ap = av.slice(ndarray::s![py, px, ..]);
                let bp = bv.slice(ndarray::s![py, px, ..]);
                let cos = cosine(&ap, &bp);
                total += if changed[(py, px)] == 0 { 1.0 - cos } else { (cos - margin).max(0.0) };
            }
        }
        let loss = total / (h * w) as f64;
        self.push(scalar_tensor(loss), Op::ContrastCos { a, b, changed, margin })
    }

    /// Reverse pass from a scalar node; returns per-node gradients (leaves
    /// keep theirs, interior gradients are consumed).
    pub fn backward(&self, out: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(scalar_tensor(1.0));
        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        grads
    }

    pub fn grad_of(&self, grads: &[Option<Tensor>], v: Var) -> Option<Tensor> {
        grads[v.0].clone()
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, kernel, stride, pad } => {
                let (h, wd, cin) = self.dims3(*x);
                let cout = self.shape(*w)[1];
                let (ho, wo) = conv_out_dims(h, wd, *kernel, *stride, *pad);
                let gm = view2(g, ho * wo, cout);
                let cols = im2col(&view3(self.value(*x)), *kernel, *stride, *pad);
                let dw = cols.t().dot(&gm);
                let mut db = Array1::zeros(cout);
                for row in gm.rows() {
                    for (c, v) in row.iter().enumerate() {
                        db[c] += v;
                    }
                }
                let wmat = view2(self.value(*w), kernel * kernel * cin, cout);
                let dcols = to_standard(gm.dot(&wmat.t()));
                let dx = col2im(&dcols, h, wd, cin, *kernel, *stride, *pad);
                accumulate(grads, x.0, dx.into_dyn());
                accumulate(grads, w.0, dw.into_dyn());
                accumulate(grads, b.0, db.into_dyn());
            }
            Op::DwConv3x3 { x, w, b } => {
                let (h, wd, c) = self.dims3(*x);
                let xv = view3(self.value(*x));
                let wm = view2(self.value(*w), c, 9);
                let gv = view3(g);
                let mut dx = Array3::zeros((h, wd, c));
                let mut dw = Array2::zeros((c, 9));
                let mut db = Array1::zeros(c);
                for oy in 0..h {
                    for ox in 0..wd {
                        for ch in 0..c {
                            let go = gv[(oy, ox, ch)];
                            db[ch] += go;
                            for ky in 0..3usize {
                                let iy = oy as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ix = ox as isize + kx as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    dw[(ch, ky * 3 + kx)] += go * xv[(iy, ix, ch)];
                                    dx[(iy, ix, ch)] += go * wm[(ch, ky * 3 + kx)];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
                accumulate(grads, w.0, dw.into_dyn());
                accumulate(grads, b.0, db.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let (h, wd, cin) = self.dims3(*x);
                let cout = self.shape(*w)[1];
                let gm = view2(g, h * wd, cout);
                let xm = view2(self.value(*x), h * wd, cin);
                let wm = view2(self.value(*w), cin, cout);
                let dw = xm.t().dot(&gm);
                let dx = gm.dot(&wm.t());
                let mut db = Array1::zeros(cout);
                for row in gm.rows() {
                    for (c, v) in row.iter().enumerate() {
                        db[c] += v;
                    }
                }
                let dx3 = reshape3(dx, h, wd, cin);
                accumulate(grads, x.0, dx3);
                accumulate(grads, w.0, dw.into_dyn());
                accumulate(grads, b.0, db.into_dyn());
            }
            Op::ChanNorm { x, gain, bias } => {
                let (h, w, c) = self.dims3(*x);
                let xv = view3(self.value(*x));
                let gn = self.value(*gain);
                let gv = view3(g);
                let mut dx = Array3::zeros((h, w, c));
                let mut dgain = Array1::zeros(c);
                let mut dbias = Array1::zeros(c);
                for py in 0..h {
                    for px in 0..w {
                        let row = xv.slice(ndarray::s![py, px, ..]);
                        let mean = row.sum() / c as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; c];
                        let mut dxhat = vec![0.0; c];
                        for ch in 0..c {
                            xhat[ch] = (row[ch] - mean) * inv_std;
                            let go = gv[(py, px, ch)];
                            dgain[ch] += go * xhat[ch];
                            dbias[ch] += go;
                            dxhat[ch] = go * gn[[ch]];
                            mean_dxhat += dxhat[ch];
                            mean_dxhat_xhat += dxhat[ch] * xhat[ch];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for ch in 0..c {
                            dx[(py, px, ch)] =
                                inv_std * (dxhat[ch] - mean_dxhat - xhat[ch] * mean_dxhat_xhat);
                        }
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
                accumulate(grads, gain.0, dgain.into_dyn());
                accumulate(grads, bias.0, dbias.into_dyn());
            }
            Op::Gelu { x } => {
                let dx = self.value(*x).mapv(gelu_bwd) * g;
                accumulate(grads, x.0, dx);
            }
            Op::Tanh { x } => {
                let y = &self.nodes[idx].value;
                let dx = y.mapv(|t| 1.0 - t * t) * g;
                accumulate(grads, x.0, dx);
            }
            Op::SoftmaxC { x } => {
                let (h, w, c) = self.dims3(*x);
                let yv = view3(&self.nodes[idx].value);
                let gv = view3(g);
                let mut dx = Array3::zeros((h, w, c));
                for py in 0..h {
                    for px in 0..w {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += gv[(py, px, ch)] * yv[(py, px, ch)];
                        }
                        for ch in 0..c {
                            dx[(py, px, ch)] = yv[(py, px, ch)] * (gv[(py, px, ch)] - dot);
                        }
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
            }
            Op::ConcatC { inputs } => {
                let gv = view3(g);
                let mut offset = 0;
                for &v in inputs {
                    let (h, w, vc) = self.dims3(v);
                    let part = gv.slice(ndarray::s![.., .., offset..offset + vc]).to_owned();
                    debug_assert_eq!(part.dim(), (h, w, vc));
                    accumulate(grads, v.0, part.into_dyn());
                    offset += vc;
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, a.0, g.clone());
                accumulate(grads, b.0, g.clone());
            }
            Op::Scale { x, factor } => {
                accumulate(grads, x.0, g.mapv(|v| v * factor));
            }
            Op::MulChan { x, weight } => {
                let (h, w, c) = self.dims3(*x);
                let xv = view3(self.value(*x));
                let wv = view3(self.value(*weight));
                let gv = view3(g);
                let mut dx = Array3::zeros((h, w, c));
                let mut dw = Array3::zeros((h, w, 1));
                for py in 0..h {
                    for px in 0..w {
                        let s = wv[(py, px, 0)];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            dx[(py, px, ch)] = gv[(py, px, ch)] * s;
                            acc += gv[(py, px, ch)] * xv[(py, px, ch)];
                        }
                        dw[(py, px, 0)] = acc;
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
                accumulate(grads, weight.0, dw.into_dyn());
            }
            Op::SliceC { x, channel } => {
                let (h, w, c) = self.dims3(*x);
                let gv = view3(g);
                let mut dx = Array3::zeros((h, w, c));
                for py in 0..h {
                    for px in 0..w {
                        dx[(py, px, *channel)] = gv[(py, px, 0)];
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
            }
            Op::AvgPool { x, fh, fw } => {
                let (h, w, c) = self.dims3(*x);
                let gv = view3(g);
                let inv = 1.0 / (fh * fw) as f64;
                let mut dx = Array3::zeros((h, w, c));
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            dx[(y, xx, ch)] = gv[(y / fh, xx / fw, ch)] * inv;
                        }
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
            }
            Op::ResizeBilinear { x } => {
                let (h, w, c) = self.dims3(*x);
                let gv = view3(g);
                let (oh, ow, _) = (gv.dim().0, gv.dim().1, gv.dim().2);
                let mut dx = Array3::zeros((h, w, c));
                for oy in 0..oh {
                    let (y0, y1, wy) = bilinear_axis(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = bilinear_axis(ox, ow, w);
                        for ch in 0..c {
                            let go = gv[(oy, ox, ch)];
                            dx[(y0, x0, ch)] += go * (1.0 - wy) * (1.0 - wx);
                            dx[(y0, x1, ch)] += go * (1.0 - wy) * wx;
                            dx[(y1, x0, ch)] += go * wy * (1.0 - wx);
                            dx[(y1, x1, ch)] += go * wy * wx;
                        }
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
            }
            Op::SumAll { x } => {
                let go = scalar(g);
                let dx = Tensor::from_elem(self.value(*x).raw_dim(), go);
                accumulate(grads, x.0, dx);
            }
            Op::DotConst { x, coeff } => {
                let go = scalar(g);
                accumulate(grads, x.0, coeff.mapv(|v| v * go));
            }
            Op::WeightedSum { terms } => {
                let go = scalar(g);
                for &(k, v) in terms {
                    accumulate(grads, v.0, scalar_tensor(k * go));
                }
            }
            Op::CrossEntropy { logits, target, weights, weight_total } => {
                let go = scalar(g);
                let (h, w, k) = self.dims3(*logits);
                let lv = view3(self.value(*logits));
                let mut dl = Array3::zeros((h, w, k));
                if *weight_total > 0.0 {
                    let norm = go / weight_total;
                    for py in 0..h {
                        for px in 0..w {
                            let t = target[(py, px)];
                            let wgt = weights.as_ref().map_or(1.0, |ws| ws[t]);
                            let row = lv.slice(ndarray::s![py, px, ..]);
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                            for ch in 0..k {
                                let p = (row[ch] - m).exp() / z;
                                let ind = if ch == t { 1.0 } else { 0.0 };
                                dl[(py, px, ch)] = norm * wgt * (p - ind);
                            }
                        }
                    }
                }
                accumulate(grads, logits.0, dl.into_dyn());
            }
            Op::CosineTo { x, target } => {
                let go = scalar(g);
                let (h, w, d) = self.dims3(*x);
                let xv = view3(self.value(*x));
                let inv_p = 1.0 / (h * w) as f64;
                let mut dx = Array3::zeros((h, w, d));
                for py in 0..h {
                    for px in 0..w {
                        let a = xv.slice(ndarray::s![py, px, ..]);
                        let b = target.slice(ndarray::s![py, px, ..]);
                        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if na < COS_EPS || nb < COS_EPS {
                            continue;
                        }
                        let dot: f64 = a.iter().zip(b.iter()).map(|(p, q)| p * q).sum();
                        let cos = dot / (na * nb);
                        for ch in 0..d {
                            let dcos = b[ch] / (na * nb) - cos * a[ch] / (na * na);
                            dx[(py, px, ch)] = -go * inv_p * dcos;
                        }
                    }
                }
                accumulate(grads, x.0, dx.into_dyn());
            }
            Op::ContrastCos { a, b, changed, margin } => {
                let go = scalar(g);
                let (h, w, d) = self.dims3(*a);
                let av = view3(self.value(*a));
                let bv = view3(self.value(*b));
                let inv_p = 1.0 / (h * w) as f64;
                let mut da = Array3::zeros((h, w, d));
                let mut db = Array3::zeros((h, w, d));
                for py in 0..h {
                    for px in 0..w {
                        let ap = av.slice(ndarray::s![py, px, ..]);
                        let bp = bv.slice(ndarray::s![py, px, ..]);
                        let na = ap.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb = bp.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if na < COS_EPS || nb < COS_EPS {
                            continue;
                        }
                        let dot: f64 = ap.iter().zip(bp.iter()).map(|(p, q)| p * q).sum();
                        let cos = dot / (na * nb);
                        let dcontrib = if changed[(py, px)] == 0 {
                            -1.0
                        } else if cos > *margin {
                            1.0
                        } else {
                            0.0
                        };
                        if dcontrib == 0.0 {
                            continue;
                        }
                        let f = go * inv_p * dcontrib;
                        for ch in 0..d {
                            da[(py, px, ch)] += f * (bp[ch] / (na * nb) - cos * ap[ch] / (na * na));
                            db[(py, px, ch)] += f * (ap[ch] / (na * nb) - cos * bp[ch] / (nb * nb));
                        }
                    }
                }
                accumulate(grads, a.0, da.into_dyn());
                accumulate(grads, b.0, db.into_dyn());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn cosine(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COS_EPS || nb < COS_EPS {
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
}

fn gelu_fwd(x: f64) -> f64 {
    const A: f64 = 0.044715;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const A: f64 = 0.044715;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * A * x * x)
}

pub fn conv_out_dims(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1)
}

/// Unroll conv patches: output row (oy*Wo+ox), column ((ky*k+kx)*Cin + c).
pub fn im2col(x: &ArrayView3<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (h, w, cin) = x.dim();
    let (ho, wo) = conv_out_dims(h, w, kernel, stride, pad);
    let mut cols = Array2::zeros((ho * wo, kernel * kernel * cin));
    let xs = x.as_slice().expect("input map must be contiguous");
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            let mut crow = cols.row_mut(row);
            let crow = crow.as_slice_mut().unwrap();
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = (ky * kernel + kx) * cin;
                    crow[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// Transpose of im2col: scatter-add column gradients back onto the input.
pub fn col2im(
    dcols: &Array2<f64>,
    h: usize,
    w: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (ho, wo) = conv_out_dims(h, w, kernel, stride, pad);
    let mut dx = Array3::zeros((h, w, cin));
    let dxs = dx.as_slice_mut().unwrap();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = dcols.row(oy * wo + ox);
            let row = row.as_slice().unwrap();
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = (ky * kernel + kx) * cin;
                    for c in 0..cin {
                        dxs[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    dx
}

fn bilinear_axis(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel centers (plain function, shared with
/// non-differentiable paths like teacher feature alignment).
pub fn bilinear_resize(x: &ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut y = Array3::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let (y0, y1, wy) = bilinear_axis(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, wx) = bilinear_axis(ox, out_w, w);
            for ch in 0..c {
                y[(oy, ox, ch)] = x[(y0, x0, ch)] * (1.0 - wy) * (1.0 - wx)
                    + x[(y0, x1, ch)] * (1.0 - wy) * wx
                    + x[(y1, x0, ch)] * wy * (1.0 - wx)
                    + x[(y1, x1, ch)] * wy * wx;
            }
        }
    }
    y
}
