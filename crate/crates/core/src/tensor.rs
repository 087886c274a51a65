//! Dense `f64` tensors, a reverse-mode tape and the parameter store.
//!
//! Every model in the crate is a single-sample computation recorded on a [`Tape`]. Feature
//! maps use the `[channels, H, W]` layout; point sets use `[channels, n]`.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?} vs {} values", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (channel) axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all axes after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.cols()), &self.data).unwrap()
    }
}

fn matmul_into(a: ArrayView2<f64>, b: ArrayView2<f64>, out: &mut [f64]) {
    let mut view = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), out).unwrap();
    ndarray::linalg::general_mat_mul(1.0, &a, &b, 1.0, &mut view);
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type Backward = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Node {
    value: Rc<Tensor>,
    backward: Option<Backward>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros of `len` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; len])
    }
}

/// Reverse-mode recording of a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_S * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, backward: Option<Backward>) -> Var {
        self.nodes.push(Node { value: Rc::new(value), backward });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Leaf node; its gradient is available after [`Self::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Leaf bound to parameter `id` of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        let v = self.push(store.get(id).clone(), None);
        self.params.insert(id.0, v);
        v
    }

    /// Accumulated gradients of `loss` (which must be a single-element tensor).
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let Some(bw) = &self.nodes[idx].backward {
                for (parent, pg) in bw(&g) {
                    match &mut grads[parent] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Parameter gradients in store order; parameters the loss does not touch get zeros.
    pub fn param_grads(&self, store: &ParamStore, grads: &Grads) -> Vec<Vec<f64>> {
        (0..store.len())
            .map(|id| match self.params.get(&id) {
                Some(&v) => grads.get_or_zeros(v, store.tensors[id].len()),
                None => vec![0.0; store.tensors[id].len()],
            })
            .collect()
    }

    // ----- elementwise -----

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let (ia, ib) = (a.0, b.0);
        self.push(Tensor::new(shape, out), Some(Box::new(move |g| vec![(ia, g.to_vec()), (ib, g.to_vec())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out: Vec<f64> = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let (ia, ib) = (a.0, b.0);
        self.push(
            Tensor::new(shape, out),
            Some(Box::new(move |g| vec![(ia, g.to_vec()), (ib, g.iter().map(|v| -v).collect())])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (va, vb) = (self.rc(a), self.rc(b));
        let out: Vec<f64> = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let shape = va.shape.clone();
        let (ia, ib) = (a.0, b.0);
        self.push(
            Tensor::new(shape, out),
            Some(Box::new(move |g| {
                let ga = g.iter().zip(&vb.data).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(&va.data).map(|(g, x)| g * x).collect();
                vec![(ia, ga), (ib, gb)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x * s).collect());
        let ia = a.0;
        self.push(out, Some(Box::new(move |g| vec![(ia, g.iter().map(|v| v * s).collect())])))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let va = self.rc(a);
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        let ia = a.0;
        self.push(
            out,
            Some(Box::new(move |g| vec![(ia, g.iter().zip(&va.data).map(|(g, &x)| g * df(x)).collect())])),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, gelu_grad)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x + s).collect());
        let ia = a.0;
        self.push(out, Some(Box::new(move |g| vec![(ia, g.to_vec())])))
    }

    /// `s / d` where `d > eps`, zero elsewhere.
    pub fn safe_div(&mut self, s: Var, d: Var, eps: f64) -> Var {
        self.same_shape(s, d, "safe_div");
        let (vs, vd) = (self.rc(s), self.rc(d));
        let out: Vec<f64> =
            vs.data.iter().zip(&vd.data).map(|(&s, &d)| if d > eps { s / d } else { 0.0 }).collect();
        let (is, id) = (s.0, d.0);
        self.push(
            Tensor::new(vs.shape.clone(), out),
            Some(Box::new(move |g| {
                let mut gs = vec![0.0; g.len()];
                let mut gd = vec![0.0; g.len()];
                for k in 0..g.len() {
                    let d = vd.data[k];
                    if d > eps {
                        gs[k] = g[k] / d;
                        gd[k] = -g[k] * vs.data[k] / (d * d);
                    }
                }
                vec![(is, gs), (id, gd)]
            })),
        )
    }

    // ----- structural -----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a);
        assert_eq!(shape.iter().product::<usize>(), v.len(), "reshape size mismatch");
        let out = Tensor::new(shape, v.data.clone());
        let ia = a.0;
        self.push(out, Some(Box::new(move |g| vec![(ia, g.to_vec())])))
    }

    /// Concatenation along the leading axis; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape[1..], &tail[..], "concat: trailing shape mismatch");
            spans.push((p.0, data.len(), v.len()));
            data.extend_from_slice(&v.data);
            rows += v.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g| spans.iter().map(|&(id, start, len)| (id, g[start..start + len].to_vec())).collect())),
        )
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.rc(a);
        let cols = v.cols();
        let total = v.len();
        let mut shape = v.shape.clone();
        shape[0] = len;
        let data = v.data[start * cols..(start + len) * cols].to_vec();
        let ia = a.0;
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g| {
                let mut full = vec![0.0; total];
                full[start * cols..(start + len) * cols].copy_from_slice(g);
                vec![(ia, full)]
            })),
        )
    }

    /// Mean over the leading axis, keeping it with size one.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.rc(a);
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; c];
        for row in 0..r {
            for (o, x) in out.iter_mut().zip(v.row(row)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let mut shape = v.shape.clone();
        shape[0] = 1;
        let ia = a.0;
        self.push(
            Tensor::new(shape, out),
            Some(Box::new(move |g| {
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.iter().map(|x| x / r as f64));
                }
                vec![(ia, ga)]
            })),
        )
    }

    /// Sum of `a ⊙ w` with constant weights; handy as a scalar probe.
    pub fn weighted_sum(&mut self, a: Var, w: &[f64]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), w.len());
        let s: f64 = v.data.iter().zip(w).map(|(x, y)| x * y).sum();
        let w = w.to_vec();
        let ia = a.0;
        self.push(Tensor::new(vec![1], vec![s]), Some(Box::new(move |g| vec![(ia, w.iter().map(|x| x * g[0]).collect())])))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len();
        let s: f64 = v.data.iter().sum::<f64>() / n as f64;
        let ia = a.0;
        self.push(Tensor::new(vec![1], vec![s]), Some(Box::new(move |g| vec![(ia, vec![g[0] / n as f64; n])])))
    }

    // ----- linear maps -----

    /// Pointwise linear map over the leading axis: `w · x + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw) = (self.rc(x), self.rc(w));
        let vb = self.value(b);
        let (cout, cin) = (vw.shape[0], vw.shape[1]);
        assert_eq!(vx.rows(), cin, "linear: input has {} channels, weight expects {cin}", vx.rows());
        assert_eq!(vb.len(), cout, "linear: bias length");
        let n = vx.cols();
        let mut out = vec![0.0; cout * n];
        for (o, bias) in vb.data.iter().enumerate() {
            out[o * n..(o + 1) * n].fill(*bias);
        }
        matmul_into(vw.as_matrix(), vx.as_matrix(), &mut out);
        let mut shape = vx.shape.clone();
        shape[0] = cout;
        let (ix, iw, ib) = (x.0, w.0, b.0);
        self.push(
            Tensor::new(shape, out),
            Some(Box::new(move |g| {
                let gm = ArrayView2::from_shape((cout, n), g).unwrap();
                let mut gx = vec![0.0; cin * n];
                matmul_into(vw.as_matrix().t(), gm, &mut gx);
                let mut gw = vec![0.0; cout * cin];
                matmul_into(gm, vx.as_matrix().t(), &mut gw);
                let gb = (0..cout).map(|o| g[o * n..(o + 1) * n].iter().sum()).collect();
                vec![(ix, gx), (iw, gw), (ib, gb)]
            })),
        )
    }

    /// Applies a fixed linear operator given by its forward and adjoint actions.
    pub fn fixed_linear(
        &mut self,
        x: Var,
        out: Tensor,
        adjoint: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Var {
        let ix = x.0;
        self.push(out, Some(Box::new(move |g| vec![(ix, adjoint(g))])))
    }

    /// Records a custom node whose backward maps the output gradient to parent gradients.
    pub fn custom(&mut self, out: Tensor, backward: impl Fn(&[f64]) -> Vec<(Var, Vec<f64>)> + 'static) -> Var {
        self.push(
            out,
            Some(Box::new(move |g| backward(g).into_iter().map(|(v, gv)| (v.0, gv)).collect())),
        )
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<Tensor> {
        self.rc(v)
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named model parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; `decay` selects it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor, decay: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        self.decay.push(decay);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let decay = if store.decay[id] { self.weight_decay } else { 0.0 };
            let p = &mut store.tensors[id].data;
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * p[k]);
            }
        }
    }
}
