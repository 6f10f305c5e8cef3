use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations exposed through [`Tape::unary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Log,
    Reciprocal,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, S),
    ScaleBy(Var, Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Clamp(Var, S, S),
    /// Fused LSTM step; keeps the gate activations `[i; f; g; o]`.
    LstmCell {
        w: Var,
        b: Var,
        x: Var,
        h: Var,
        c: Var,
        gates: Vec<S>,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Nodes are appended in execution order, so reverse accumulation is a
/// single backwards sweep over the node list. Gradients persist on the tape
/// and `backward` adds into them; call [`Tape::zero_grad`] to reset.
#[derive(Clone, Debug, Default)]
pub struct Tape<S = f64> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient (a parameter or a probed input).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// `a[m×k] · b[k×n]`, or `a[m×k] · b[k]` giving a vector of length `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        if ash.len() != 2 || bsh.is_empty() || bsh.len() > 2 || ash[1] != bsh[0] {
            return Err(mismatch());
        }
        let (m, k) = (ash[0], ash[1]);
        let n = if bsh.len() == 2 { bsh[1] } else { 1 };
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = S::zero();
                for (p, &x) in row.iter().enumerate() {
                    acc += x * bd[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        let shape = if bsh.len() == 2 { vec![m, n] } else { vec![m] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = match op {
            Unary::Tanh => av.map(|x| x.tanh()),
            Unary::Sigmoid => av.map(sigmoid),
            Unary::Log => {
                if let Some(bad) = av.data().iter().find(|&&x| x <= S::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive operand {bad}"),
                    });
                }
                av.map(|x| x.ln())
            }
            Unary::Reciprocal => {
                if av.data().iter().any(|&x| x == S::zero()) {
                    return Err(Error::Domain {
                        op: "reciprocal",
                        detail: "zero operand".into(),
                    });
                }
                av.map(|x| x.recip())
            }
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unary(op, a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Reciprocal, a)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let k = sv.item();
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 1 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let max = av.data().iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = av.data().iter().map(|&x| (x - max).exp()).collect();
        let total: S = exps.iter().copied().sum();
        let out = Tensor::vector(exps.into_iter().map(|e| e / total).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Concatenate vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 1 || len == 0 || start + len > av.len() {
            return Err(Error::Shape {
                op: "slice",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let t = Tensor::vector(av.data()[start..start + len].to_vec());
        let rg = self.rg(a);
        Ok(self.push(t, Op::Slice(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// One LSTM step as a single node, returning `[h'; c']` of length `2H`.
    ///
    /// `w: [4H, I + H]` acts on `[x; h]`, `b: [4H]`; gate rows are ordered
    /// input, forget, candidate, output. Equivalent to composing the
    /// elementary ops, with a hand-written backward pass.
    pub fn lstm_cell(&mut self, w: Var, b: Var, x: Var, h: Var, c: Var) -> Result<Var> {
        let (wv, bv, xv, hv, cv) = (self.value(w), self.value(b), self.value(x), self.value(h), self.value(c));
        let hidden = hv.len();
        let input = xv.len();
        let ok = wv.shape() == [4 * hidden, input + hidden]
            && bv.shape() == [4 * hidden]
            && hv.shape() == [hidden]
            && cv.shape() == [hidden]
            && xv.shape() == [input];
        if !ok {
            return Err(Error::Shape {
                op: "lstm_cell",
                lhs: wv.shape().to_vec(),
                rhs: vec![input, hidden],
            });
        }
        let cols = input + hidden;
        let wd = wv.data();
        let mut gates = bv.data().to_vec();
        for (r, z) in gates.iter_mut().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut acc = S::zero();
            for (k, &xk) in xv.data().iter().enumerate() {
                acc += row[k] * xk;
            }
            for (k, &hk) in hv.data().iter().enumerate() {
                acc += row[input + k] * hk;
            }
            *z += acc;
        }
        for (r, z) in gates.iter_mut().enumerate() {
            *z = if r / hidden == 2 { z.tanh() } else { sigmoid(*z) };
        }
        let mut out = vec![S::zero(); 2 * hidden];
        for k in 0..hidden {
            let (i, f, g, o) = (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
            let c_new = f * cv.data()[k] + i * g;
            out[hidden + k] = c_new;
            out[k] = o * c_new.tanh();
        }
        let rg = [w, b, x, h, c].iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::vector(out), Op::LstmCell { w, b, x, h, c, gates }, rg))
    }

    /// Reverse accumulation from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(shape, S::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            match &mut self.grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor<S>, adj: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, t: Tensor<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.shape().len() == 2 { bv.shape()[1] } else { 1 };
                if self.rg(*a) {
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc += gd[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        let row = &av.data()[i * k..(i + 1) * k];
                        for (p, &x) in row.iter().enumerate() {
                            for j in 0..n {
                                db[p * n + j] += x * gd[i * n + j];
                            }
                        }
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, zip(g, bv, |x, y| x * y));
                }
                if self.rg(*b) {
                    send(*b, zip(g, av, |x, y| x * y));
                }
            }
            Op::Unary(op, a) => {
                let y = &node.value;
                let x = self.value(*a);
                let local = match op {
                    Unary::Tanh => zip(g, y, |g, t| g * (S::one() - t * t)),
                    Unary::Sigmoid => zip(g, y, |g, s| g * s * (S::one() - s)),
                    Unary::Log => zip(g, x, |g, x| g / x),
                    Unary::Reciprocal => zip(g, x, |g, x| -g / (x * x)),
                };
                send(*a, local);
            }
            Op::Scale(a, k) => send(*a, g.map(|x| x * *k)),
            Op::ScaleBy(a, s) => {
                let av = self.value(*a);
                let k = self.value(*s).item();
                if self.rg(*a) {
                    send(*a, g.map(|x| x * k));
                }
                if self.rg(*s) {
                    let d: S = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).sum();
                    send(*s, Tensor::scalar(d));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dot: S = gd.iter().zip(y.data()).map(|(&g, &y)| g * y).sum();
                send(*a, zip(g, y, |g, y| y * (g - dot)));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, Tensor::vector(gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let mut d = vec![S::zero(); self.value(*a).len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                send(*a, Tensor::vector(d));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                send(*a, Tensor::full(av.shape(), gd[0]));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                send(
                    *a,
                    zip(g, x, |g, x| if x >= *lo && x <= *hi { g } else { S::zero() }),
                );
            }
            Op::LstmCell { w, b, x, h, c, gates } => {
                let hidden = gates.len() / 4;
                let (xv, hv, cv) = (self.value(*x), self.value(*h), self.value(*c));
                let input = xv.len();
                let cols = input + hidden;
                let c_new = &node.value.data()[hidden..];
                let (dh, dc_out) = gd.split_at(hidden);
                let mut dz = vec![S::zero(); 4 * hidden];
                let mut dc_prev = vec![S::zero(); hidden];
                let one = S::one();
                for k in 0..hidden {
                    let (i, f, gg, o) = (gates[k], gates[hidden + k], gates[2 * hidden + k], gates[3 * hidden + k]);
                    let t = c_new[k].tanh();
                    let dc = dc_out[k] + dh[k] * o * (one - t * t);
                    dz[k] = dc * gg * i * (one - i);
                    dz[hidden + k] = dc * cv.data()[k] * f * (one - f);
                    dz[2 * hidden + k] = dc * i * (one - gg * gg);
                    dz[3 * hidden + k] = dh[k] * t * o * (one - o);
                    dc_prev[k] = dc * f;
                }
                if self.rg(*c) {
                    send(*c, Tensor::vector(dc_prev));
                }
                if self.rg(*b) {
                    send(*b, Tensor::vector(dz.clone()));
                }
                if self.rg(*w) {
                    let mut dw = vec![S::zero(); 4 * hidden * cols];
                    for (r, &d) in dz.iter().enumerate() {
                        let row = &mut dw[r * cols..(r + 1) * cols];
                        for (k, &xk) in xv.data().iter().enumerate() {
                            row[k] = d * xk;
                        }
                        for (k, &hk) in hv.data().iter().enumerate() {
                            row[input + k] = d * hk;
                        }
                    }
                    send(*w, Tensor::new(vec![4 * hidden, cols], dw).expect("shape"));
                }
                if self.rg(*x) || self.rg(*h) {
                    let wd = self.value(*w).data();
                    let mut dxh = vec![S::zero(); cols];
                    for (r, &d) in dz.iter().enumerate() {
                        let row = &wd[r * cols..(r + 1) * cols];
                        for (acc, &wv) in dxh.iter_mut().zip(row) {
                            *acc += d * wv;
                        }
                    }
                    let dh_prev = dxh.split_off(input);
                    if self.rg(*x) {
                        send(*x, Tensor::vector(dxh));
                    }
                    if self.rg(*h) {
                        send(*h, Tensor::vector(dh_prev));
                    }
                }
            }
        }
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
