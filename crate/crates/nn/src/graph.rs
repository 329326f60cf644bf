//! Tape-based reverse-mode differentiation over [`Tensor`] values.

use crate::conv::{self, ConvGeom};
use crate::params::{Gradients, ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Upsample2(Var),
    Concat(Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
}

/// Records a forward pass so it can be differentiated afterwards.
pub struct Graph<'p, S> {
    params: &'p ParamSet<S>,
    nodes: Vec<Node<S>>,
}

/// Gradients of the graph inputs after [`Graph::backward`].
pub struct NodeGrads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S> NodeGrads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

impl<'p, S: Real> Graph<'p, S> {
    pub fn new(params: &'p ParamSet<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> Var {
        let bias = b.map(|id| self.params.get(id));
        let y = conv::forward(self.value(x), self.params.get(w), bias, &geom);
        self.push(y, Op::Conv { x, w, b, geom })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = S::from_f64_lossy(slope);
        let y = self.value(x).map(|v| if v > S::zero() { v } else { v * s });
        self.push(y, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(S::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(y, Op::Sigmoid(x))
    }

    /// Nearest-neighbour ×2 upsampling on every axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [d, h, w] = src.dims;
        let c = src.channels;
        let od = [2 * d, 2 * h, 2 * w];
        let mut y = Tensor::zeros(od, c);
        for z in 0..od[0] {
            for r in 0..od[1] {
                for q in 0..od[2] {
                    let s = ((z / 2) * h + r / 2) * w + q / 2;
                    let t = (z * od[1] + r) * od[2] + q;
                    y.data[t * c..(t + 1) * c].copy_from_slice(&src.data[s * c..(s + 1) * c]);
                }
            }
        }
        self.push(y, Op::Upsample2(x))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.dims, tb.dims, "concat spatial mismatch");
        let (ca, cb) = (ta.channels, tb.channels);
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for v in 0..ta.voxels() {
            data.extend_from_slice(&ta.data[v * ca..(v + 1) * ca]);
            data.extend_from_slice(&tb.data[v * cb..(v + 1) * cb]);
        }
        let y = Tensor::from_vec(ta.dims, ca + cb, data);
        self.push(y, Op::Concat(a, b))
    }

    /// Back-propagates `grad` (d loss / d `out`).
    ///
    /// Parameter gradients are accumulated into `param_grads` when given;
    /// otherwise parameters are treated as constants. Gradients for graph
    /// inputs are computed only when `want_inputs` is set.
    pub fn backward(
        &self,
        out: Var,
        grad: Tensor<S>,
        param_grads: Option<&mut Gradients<S>>,
        want_inputs: bool,
    ) -> NodeGrads<S> {
        self.backward_many(vec![(out, grad)], param_grads, want_inputs)
    }

    /// Like [`Graph::backward`] for a loss that depends on several nodes.
    pub fn backward_many(
        &self,
        seeds: Vec<(Var, Tensor<S>)>,
        mut param_grads: Option<&mut Gradients<S>>,
        want_inputs: bool,
    ) -> NodeGrads<S> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let is_input = |v: Var| matches!(self.nodes[v.0].op, Op::Input);
        let acc = |grads: &mut Vec<Option<Tensor<S>>>, v: Var, g: Tensor<S>| match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let Some(last) = seeds.iter().map(|(v, _)| v.0).max() else {
            return NodeGrads { grads };
        };
        for (v, g) in seeds {
            assert!(
                g.same_shape(self.value(v)),
                "output gradient shape mismatch"
            );
            acc(&mut grads, v, g);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Conv { x, w, b, geom } => {
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let (dw, db) = conv::backward_weight(self.value(*x), &g, geom, b.is_some());
                        pg.accumulate(*w, &dw);
                        if let (Some(bid), Some(db)) = (b, db) {
                            pg.accumulate(*bid, &db);
                        }
                    }
                    if want_inputs || !is_input(*x) {
                        let dx = conv::backward_input(
                            &g,
                            self.params.get(*w),
                            geom,
                            self.value(*x).dims,
                        );
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = S::from_f64_lossy(*slope);
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        if v <= S::zero() {
                            *d = *d * s;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        if v <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data.iter_mut().zip(&node.value.data) {
                        *d = *d * y * (S::one() - y);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let xv = self.value(*x);
                    let [d, h, w] = xv.dims;
                    let c = xv.channels;
                    let od = node.value.dims;
                    let mut dx = Tensor::zeros(xv.dims, c);
                    for z in 0..od[0] {
                        for r in 0..od[1] {
                            for q in 0..od[2] {
                                let s = ((z / 2) * h + r / 2) * w + q / 2;
                                let t = (z * od[1] + r) * od[2] + q;
                                for k in 0..c {
                                    dx.data[s * c + k] += g.data[t * c + k];
                                }
                            }
                        }
                    }
                    let _ = d;
                    acc(&mut grads, *x, dx);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).channels, self.value(*b).channels);
                    let dims = g.dims;
                    let vox = g.voxels();
                    let mut da = Vec::with_capacity(vox * ca);
                    let mut db = Vec::with_capacity(vox * cb);
                    for v in 0..vox {
                        let row = &g.data[v * (ca + cb)..(v + 1) * (ca + cb)];
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut grads, *a, Tensor::from_vec(dims, ca, da));
                    acc(&mut grads, *b, Tensor::from_vec(dims, cb, db));
                }
            }
        }
        NodeGrads { grads }
    }
}
