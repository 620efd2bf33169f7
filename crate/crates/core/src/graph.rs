//! Execution backends for the layer primitives.
//!
//! Network code is written once against [`Ops`]. [`Graph`] records a tape and
//! provides reverse-mode gradients; [`Eval`] runs the same code without
//! recording, so intermediate maps are freed as soon as they go out of scope.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ChannelNormCache, ConvSpec};
use crate::tensor::{Real, Tensor};

/// Smallest magnitude used when differentiating fractional powers at zero.
const POW_GRAD_FLOOR: f64 = 1e-6;

pub trait Ops<T: Real> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    /// A constant that never receives gradient.
    fn input(&mut self, t: Tensor<T>) -> Self::V;

    /// A named trainable leaf.
    fn param(&mut self, name: &str, t: &Tensor<T>) -> Self::V;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, spec: ConvSpec) -> Result<Self::V>;

    fn channel_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V, eps: f64) -> Result<Self::V>;

    /// Leaky rectifier with a single learned negative slope.
    fn prelu(&mut self, x: &Self::V, slope: &Self::V) -> Result<Self::V>;

    fn relu(&mut self, x: &Self::V) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    /// Concatenation along the channel axis.
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;

    /// `sign(x)·|x|^γ`.
    fn signed_pow(&mut self, x: &Self::V, gamma: f64) -> Self::V;

    /// `x·scale + shift` with one coefficient pair per (batch, channel);
    /// planes flagged in `clamp` are clamped to [0, 1]. Coefficients are
    /// constants.
    fn channel_affine(&mut self, x: &Self::V, scale: Vec<T>, shift: Vec<T>, clamp: Vec<bool>) -> Result<Self::V>;

    fn max_pool2(&mut self, x: &Self::V) -> Result<Self::V>;

    fn upsample(&mut self, x: &Self::V, height: usize, width: usize) -> Self::V;

    fn clamp01(&mut self, x: &Self::V) -> Self::V;
}

fn concat_values<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::EmptyInput)?;
    let [b, _, h, w] = first.dims();
    for p in parts {
        let [pb, _, ph, pw] = p.dims();
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::ShapeMismatch(format!("concat {:?} with {:?}", first.dims(), p.dims())));
        }
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(b * c * h * w);
    for ib in 0..b {
        for p in parts {
            data.extend_from_slice(p.sample(ib));
        }
    }
    Tensor::from_vec([b, c, h, w], data)
}

fn prelu_value<T: Real>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    if slope.numel() != 1 {
        return Err(Error::ShapeMismatch(format!("prelu slope has {} values", slope.numel())));
    }
    let a = slope.data()[0];
    Ok(x.map(|v| if v >= T::zero() { v } else { a * v }))
}

fn add_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_dims(b, "add")?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

fn signed_pow_value<T: Real>(x: &Tensor<T>, gamma: f64) -> Tensor<T> {
    let g = T::of(gamma);
    x.map(|v| if v >= T::zero() { v.powf(g) } else { -(-v).powf(g) })
}

fn affine_check<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T], clamp: &[bool]) -> Result<()> {
    let n = x.batch() * x.channels();
    if scale.len() != n || shift.len() != n || clamp.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "affine coefficients {}/{} for {n} planes",
            scale.len(),
            shift.len()
        )));
    }
    Ok(())
}

fn affine_value<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T], clamp: &[bool]) -> Tensor<T> {
    let n = x.plane_len();
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(n).enumerate() {
        let (s, t, c) = (scale[i], shift[i], clamp[i]);
        for v in plane {
            let z = *v * s + t;
            *v = if c { z.max(T::zero()).min(T::one()) } else { z };
        }
    }
    out
}

fn clamp_value<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()).min(T::one()))
}

/// Tape-free evaluation.
#[derive(Default)]
pub struct Eval;

impl<T: Real> Ops<T> for Eval {
    type V = Rc<Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn input(&mut self, t: Tensor<T>) -> Self::V {
        Rc::new(t)
    }

    fn param(&mut self, _name: &str, t: &Tensor<T>) -> Self::V {
        Rc::new(t.clone())
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, spec: ConvSpec) -> Result<Self::V> {
        Ok(Rc::new(kernels::conv2d_forward(x, w, b.map(|b| &**b), spec)?))
    }

    fn channel_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V, eps: f64) -> Result<Self::V> {
        Ok(Rc::new(kernels::channel_norm_forward(x, gain, bias, eps)?.0))
    }

    fn prelu(&mut self, x: &Self::V, slope: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(prelu_value(x, slope)?))
    }

    fn relu(&mut self, x: &Self::V) -> Self::V {
        Rc::new(x.map(|v| v.max(T::zero())))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(add_values(a, b)?))
    }

    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &**p).collect();
        Ok(Rc::new(concat_values(&refs)?))
    }

    fn signed_pow(&mut self, x: &Self::V, gamma: f64) -> Self::V {
        Rc::new(signed_pow_value(x, gamma))
    }

    fn channel_affine(&mut self, x: &Self::V, scale: Vec<T>, shift: Vec<T>, clamp: Vec<bool>) -> Result<Self::V> {
        affine_check(x, &scale, &shift, &clamp)?;
        Ok(Rc::new(affine_value(x, &scale, &shift, &clamp)))
    }

    fn max_pool2(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::max_pool2_forward(x)?.0))
    }

    fn upsample(&mut self, x: &Self::V, height: usize, width: usize) -> Self::V {
        Rc::new(kernels::upsample_bilinear_forward(x, height, width))
    }

    fn clamp01(&mut self, x: &Self::V) -> Self::V {
        Rc::new(clamp_value(x))
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Norm { x: Var, gain: Var, bias: Var, cache: ChannelNormCache<T> },
    PRelu { x: Var, slope: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    SignedPow { x: Var, gamma: f64 },
    Affine { x: Var, scale: Vec<T>, shift: Vec<T>, clamp: Vec<bool> },
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample { x: Var },
    Clamp { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            self.val(*v).same_dims(g, "seed gradient")?;
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv { x, w, b, spec } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.val(*x), self.val(*w), b.is_some(), *spec, &dy, self.needs(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        if self.needs(*b) {
                            accumulate(&mut grads, *b, db.reshaped(self.val(*b).dims()));
                        }
                    }
                }
                Op::Norm { x, gain, bias, cache } => {
                    let g = self.val(*gain);
                    let (dx, dg, db) = kernels::channel_norm_backward(self.val(*x).dims(), g, cache, &dy);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gain) {
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, db.reshaped(self.val(*bias).dims()));
                    }
                }
                Op::PRelu { x, slope } => {
                    let xv = self.val(*x);
                    let a = self.val(*slope).data()[0];
                    let mut dx = dy.clone();
                    let mut da = T::zero();
                    for ((d, &v), &g) in dx.data_mut().iter_mut().zip(xv.data()).zip(dy.data()) {
                        if v < T::zero() {
                            *d = g * a;
                            da += g * v;
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*slope) {
                        accumulate(&mut grads, *slope, Tensor::filled(self.val(*slope).dims(), da));
                    }
                }
                Op::Relu { x } => {
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.val(*x).data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Concat { parts } => {
                    let [bsz, _, h, w] = dy.dims();
                    let n = h * w;
                    let total_c = dy.channels();
                    let mut c0 = 0;
                    for p in parts {
                        let pc = self.val(*p).channels();
                        if self.needs(*p) {
                            let mut data = Vec::with_capacity(bsz * pc * n);
                            for ib in 0..bsz {
                                let start = (ib * total_c + c0) * n;
                                data.extend_from_slice(&dy.data()[start..start + pc * n]);
                            }
                            accumulate(&mut grads, *p, Tensor::from_vec([bsz, pc, h, w], data)?);
                        }
                        c0 += pc;
                    }
                }
                Op::SignedPow { x, gamma } => {
                    let g = T::of(*gamma);
                    let gm1 = T::of(*gamma - 1.0);
                    let floor = T::of(POW_GRAD_FLOOR);
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.val(*x).data()) {
                        let a = v.abs();
                        let deriv = if a == T::zero() && *gamma > 1.0 {
                            T::zero()
                        } else {
                            g * a.max(floor).powf(gm1)
                        };
                        *d *= deriv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Affine { x, scale, shift, clamp } => {
                    let n = dy.plane_len();
                    let xv = self.val(*x);
                    let mut dx = dy;
                    for (i, (dplane, xplane)) in
                        dx.data_mut().chunks_mut(n).zip(xv.data().chunks(n)).enumerate()
                    {
                        let (s, t) = (scale[i], shift[i]);
                        for (d, &v) in dplane.iter_mut().zip(xplane) {
                            let z = v * s + t;
                            if clamp[i] && (z < T::zero() || z > T::one()) {
                                *d = T::zero();
                            } else {
                                *d *= s;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, arg } => {
                    let dx = kernels::max_pool2_backward(self.val(*x).dims(), arg, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x } => {
                    let dx = kernels::upsample_bilinear_backward(self.val(*x).dims(), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Clamp { x } => {
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.val(*x).data()) {
                        if v < T::zero() || v > T::one() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        let mut by_name: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.val(*v).dims()));
            match by_name.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    by_name.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { by_name, leaves: grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Parameter gradients keyed by parameter name.
pub struct Gradients<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient reaching a leaf variable (e.g. an input created via
    /// [`Graph::leaf`]).
    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Graph<T> {
    /// A differentiable unnamed leaf (used to take gradients w.r.t. inputs).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }
}

impl<T: Real> Ops<T> for Graph<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d_forward(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), spec)?;
        let needs = self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(*b));
        Ok(self.push(out, Op::Conv { x: *x, w: *w, b: b.copied(), spec }, needs))
    }

    fn channel_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (out, cache) = kernels::channel_norm_forward(self.val(*x), self.val(*gain), self.val(*bias), eps)?;
        let needs = self.needs(*x) || self.needs(*gain) || self.needs(*bias);
        Ok(self.push(out, Op::Norm { x: *x, gain: *gain, bias: *bias, cache }, needs))
    }

    fn prelu(&mut self, x: &Var, slope: &Var) -> Result<Var> {
        let out = prelu_value(self.val(*x), self.val(*slope))?;
        let needs = self.needs(*x) || self.needs(*slope);
        Ok(self.push(out, Op::PRelu { x: *x, slope: *slope }, needs))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = self.val(*x).map(|v| v.max(T::zero()));
        let needs = self.needs(*x);
        self.push(out, Op::Relu { x: *x }, needs)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = add_values(self.val(*a), self.val(*b))?;
        let needs = self.needs(*a) || self.needs(*b);
        Ok(self.push(out, Op::Add { a: *a, b: *b }, needs))
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(*p)).collect();
        let out = concat_values(&refs)?;
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, needs))
    }

    fn signed_pow(&mut self, x: &Var, gamma: f64) -> Var {
        let out = signed_pow_value(self.val(*x), gamma);
        let needs = self.needs(*x);
        self.push(out, Op::SignedPow { x: *x, gamma }, needs)
    }

    fn channel_affine(&mut self, x: &Var, scale: Vec<T>, shift: Vec<T>, clamp: Vec<bool>) -> Result<Var> {
        affine_check(self.val(*x), &scale, &shift, &clamp)?;
        let out = affine_value(self.val(*x), &scale, &shift, &clamp);
        let needs = self.needs(*x);
        Ok(self.push(out, Op::Affine { x: *x, scale, shift, clamp }, needs))
    }

    fn max_pool2(&mut self, x: &Var) -> Result<Var> {
        let (out, arg) = kernels::max_pool2_forward(self.val(*x))?;
        let needs = self.needs(*x);
        Ok(self.push(out, Op::MaxPool { x: *x, arg }, needs))
    }

    fn upsample(&mut self, x: &Var, height: usize, width: usize) -> Var {
        let out = kernels::upsample_bilinear_forward(self.val(*x), height, width);
        let needs = self.needs(*x);
        self.push(out, Op::Upsample { x: *x }, needs)
    }

    fn clamp01(&mut self, x: &Var) -> Var {
        let out = clamp_value(self.val(*x));
        let needs = self.needs(*x);
        self.push(out, Op::Clamp { x: *x }, needs)
    }
}
