//! Reverse-mode tape. Nodes are appended in evaluation order, so node ids
//! are already a topological order; `backward` walks them once, last to
//! first, and accumulates each node's vector-Jacobian product into its
//! parents.

use std::cell::RefCell;
use std::rc::Rc;

use super::ops::{self, Activation};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

type Vjp = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    vjp: Option<Vjp>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.value().shape())
    }
}

/// Source of one output row in [`Var::pick_rows`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowPick {
    First(usize),
    Second(usize),
    Zero,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that only evaluates; `backward` on it is a usage error.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, vjp: Option<Vjp>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (parents, vjp) = if self.record { (parents, vjp) } else { (Vec::new(), None) };
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            vjp,
        });
        Var { tape: self, id }
    }

    fn op(&self, value: Tensor, parents: &[Var<'_>], vjp: impl Fn(&Tensor) -> Vec<Tensor> + 'static) -> Var<'_> {
        let ids = parents.iter().map(|p| p.id).collect();
        let vjp: Option<Vjp> = if self.record { Some(Box::new(vjp)) } else { None };
        self.push(value, ids, vjp)
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Usage("backward on a tape that does not record".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(vjp) = &node.vjp {
                let parent_grads = vjp(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    grads[p] = Some(match grads[p].take() {
                        Some(acc) => ops::add(&acc, &pg).expect("gradient shapes agree"),
                        None => pg,
                    });
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    t.as_rows()
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let y = ops::add(&self.value(), &other.value())?;
        Ok(self.tape.op(y, &[self, other], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let y = ops::sub(&self.value(), &other.value())?;
        Ok(self.tape.op(y, &[self, other], |g| vec![g.clone(), ops::scale(g, -1.0)]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let y = ops::mul(&a, &b)?;
        Ok(self.tape.op(y, &[self, other], move |g| {
            vec![ops::mul(g, &b).expect("shape"), ops::mul(g, &a).expect("shape")]
        }))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let y = ops::scale(&self.value(), s);
        self.tape.op(y, &[self], move |g| vec![ops::scale(g, s)])
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let y = ops::add(&self.value(), c)?;
        Ok(self.tape.op(y, &[self], |g| vec![g.clone()]))
    }

    /// `c - self` for a scalar constant `c`.
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        let y = ops::map(&self.value(), |v| c - v);
        self.tape.op(y, &[self], |g| vec![ops::scale(g, -1.0)])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let y = ops::matmul(&a, &b)?;
        Ok(self.tape.op(y, &[self, other], move |g| {
            let ga = ops::matmul(g, &ops::transpose(&b).expect("rank 2")).expect("shape");
            let gb = ops::matmul(&ops::transpose(&a).expect("rank 2"), g).expect("shape");
            vec![ga, gb]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let y = ops::transpose(&self.value())?;
        Ok(self.tape.op(y, &[self], |g| vec![ops::transpose(g).expect("rank 2")]))
    }

    /// Adds `bias` to every row of the `[N, C]` view.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let y = ops::add_row(&self.value(), &bias.value())?;
        let bshape = bias.shape();
        Ok(self.tape.op(y, &[self, bias], move |g| {
            let (n, c) = rows_of(g);
            let mut gb = vec![0.0; c];
            for r in 0..n {
                for (acc, v) in gb.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *acc += v;
                }
            }
            vec![g.clone(), Tensor::from_parts(bshape.clone(), gb)]
        }))
    }

    /// `x·W (+ b)` on a `[N, C]` input.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    /// Scales row `i` of the `[N, C]` view by `s[i]`.
    pub fn mul_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        let (x, sv) = (self.value(), s.value());
        let (n, c) = rows_of(&x);
        if sv.numel() != n {
            return shape_err("mul_rows", x.shape(), sv.shape());
        }
        let mut y = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                y[r * c + j] = x.data()[r * c + j] * sv.data()[r];
            }
        }
        let sshape = sv.shape().to_vec();
        Ok(self.tape.op(Tensor::from_parts(x.shape().to_vec(), y), &[self, s], move |g| {
            let mut gx = vec![0.0; n * c];
            let mut gs = vec![0.0; n];
            for r in 0..n {
                for j in 0..c {
                    let gv = g.data()[r * c + j];
                    gx[r * c + j] = gv * sv.data()[r];
                    gs[r] += gv * x.data()[r * c + j];
                }
            }
            vec![
                Tensor::from_parts(x.shape().to_vec(), gx),
                Tensor::from_parts(sshape.clone(), gs),
            ]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(ops::softmax(&x, x.rank() - 1)?);
        let yv = y.clone();
        Ok(self.tape.op((*y).clone(), &[self], move |g| {
            let (n, c) = rows_of(g);
            let mut gx = vec![0.0; n * c];
            for r in 0..n {
                let yr = &yv.data()[r * c..(r + 1) * c];
                let gr = &g.data()[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Tensor::from_parts(g.shape().to_vec(), gx)]
        }))
    }

    pub fn layernorm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (gv, bv) = (gain.value(), bias.value());
        let (y, stats) = ops::layernorm_with_stats(&self.value(), gv.data(), bv.data(), eps)?;
        let shape = y.shape().to_vec();
        Ok(self.tape.op(y, &[self, gain, bias], move |g| {
            let (n, c) = rows_of(g);
            let gd = g.data();
            let mut gx = vec![0.0; n * c];
            let mut ggain = vec![0.0; c];
            let mut gbias = vec![0.0; c];
            for r in 0..n {
                let xh = &stats.xhat[r * c..(r + 1) * c];
                let gr = &gd[r * c..(r + 1) * c];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..c {
                    let d = gr[j] * gv.data()[j];
                    mean_d += d;
                    mean_dx += d * xh[j];
                    ggain[j] += gr[j] * xh[j];
                    gbias[j] += gr[j];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                for j in 0..c {
                    let d = gr[j] * gv.data()[j];
                    gx[r * c + j] = stats.rstd[r] * (d - mean_d - xh[j] * mean_dx);
                }
            }
            vec![
                Tensor::from_parts(shape.clone(), gx),
                Tensor::from_parts(vec![c], ggain),
                Tensor::from_parts(vec![c], gbias),
            ]
        }))
    }

    pub fn activation(self, act: Activation) -> Var<'t> {
        let x = self.value();
        let y = ops::activation(&x, act);
        self.tape.op(y, &[self], move |g| {
            let d = ops::map(&x, |v| act.derivative(v));
            vec![ops::mul(g, &d).expect("shape")]
        })
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let y = ops::map(&x, f64::abs);
        self.tape.op(y, &[self], move |g| {
            vec![ops::mul(g, &ops::map(&x, |v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })).expect("shape")]
        })
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let y = ops::map(&x, |v| v * v);
        self.tape.op(y, &[self], move |g| vec![ops::mul(g, &ops::scale(&x, 2.0)).expect("shape")])
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(Tensor::scalar(ops::compensated_sum(x.data().iter().copied())), &[self], move |g| vec![Tensor::full(&shape, g.data()[0])])
    }

    /// `sum(self ⊙ w)` for a constant `w`.
    pub fn dot_const(self, w: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != w.shape() {
            return shape_err("dot_const", x.shape(), w.shape());
        }
        let s = ops::compensated_sum(x.data().iter().zip(w.data()).map(|(a, b)| a * b));
        let w = w.clone();
        Ok(self.tape.op(Tensor::scalar(s), &[self], move |g| vec![ops::scale(&w, g.data()[0])]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let old = x.shape().to_vec();
        Ok(self.tape.op(y, &[self], move |g| vec![g.reshape(&old).expect("same numel")]))
    }

    /// Columns `start..start+len` of the `[N, C]` view.
    pub fn cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = rows_of(&x);
        if start + len > c {
            return shape_err("cols", x.shape(), &[start, len]);
        }
        let mut y = Vec::with_capacity(n * len);
        for r in 0..n {
            y.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
        }
        Ok(self.tape.op(Tensor::from_parts(vec![n, len], y), &[self], move |g| {
            let mut gx = vec![0.0; n * c];
            for r in 0..n {
                gx[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Tensor::from_parts(vec![n, c], gx)]
        }))
    }

    /// Concatenates `[N, C_i]` parts along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let n = rows_of(&values[0]).0;
        let widths: Vec<usize> = values.iter().map(|v| rows_of(v).1).collect();
        if values.iter().any(|v| rows_of(v).0 != n) {
            return shape_err("concat_cols", values[0].shape(), values[1].shape());
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(n * total);
        for r in 0..n {
            for (v, &w) in values.iter().zip(&widths) {
                y.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let tape = first.tape;
        Ok(tape.op(Tensor::from_parts(vec![n, total], y), parts, move |g| {
            let mut out = Vec::with_capacity(widths.len());
            let mut at = 0;
            for &w in &widths {
                let mut part = Vec::with_capacity(n * w);
                for r in 0..n {
                    part.extend_from_slice(&g.data()[r * total + at..r * total + at + w]);
                }
                out.push(Tensor::from_parts(vec![n, w], part));
                at += w;
            }
            out
        }))
    }

    /// Rows `start..start+len` of the `[N, C]` view.
    pub fn rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = rows_of(&x);
        if start + len > n || len == 0 {
            return shape_err("rows", x.shape(), &[start, len]);
        }
        let y = Tensor::from_parts(vec![len, c], x.data()[start * c..(start + len) * c].to_vec());
        Ok(self.tape.op(y, &[self], move |g| {
            let mut gx = vec![0.0; n * c];
            gx[start * c..(start + len) * c].copy_from_slice(g.data());
            vec![Tensor::from_parts(vec![n, c], gx)]
        }))
    }

    /// Stacks `[N_i, C]` parts along rows.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let c = rows_of(&values[0]).1;
        if let Some(bad) = values.iter().find(|v| rows_of(v).1 != c) {
            return shape_err("concat_rows", values[0].shape(), bad.shape());
        }
        let heights: Vec<usize> = values.iter().map(|v| rows_of(v).0).collect();
        let mut y = Vec::with_capacity(heights.iter().sum::<usize>() * c);
        for v in &values {
            y.extend_from_slice(v.data());
        }
        let total = y.len() / c;
        let tape = first.tape;
        Ok(tape.op(Tensor::from_parts(vec![total, c], y), parts, move |g| {
            let mut at = 0;
            heights
                .iter()
                .map(|&h| {
                    let part = Tensor::from_parts(vec![h, c], g.data()[at * c..(at + h) * c].to_vec());
                    at += h;
                    part
                })
                .collect()
        }))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(self, index: Rc<[Option<usize>]>) -> Result<Var<'t>> {
        let x = self.value();
        let y = ops::gather_rows(&x, &index)?;
        let (n, c) = rows_of(&x);
        Ok(self.tape.op(y, &[self], move |g| {
            let mut gx = vec![0.0; n * c];
            for (o, src) in index.iter().enumerate() {
                if let Some(i) = *src {
                    for j in 0..c {
                        gx[i * c + j] += g.data()[o * c + j];
                    }
                }
            }
            vec![Tensor::from_parts(vec![n, c], gx)]
        }))
    }

    /// Builds rows from two `[N, C]` sources according to `picks`.
    pub fn pick_rows(first: Var<'t>, second: Var<'t>, picks: Rc<[RowPick]>) -> Result<Var<'t>> {
        let (a, b) = (first.value(), second.value());
        let ((na, c), (nb, c2)) = (rows_of(&a), rows_of(&b));
        if c != c2 {
            return shape_err("pick_rows", a.shape(), b.shape());
        }
        let mut y = vec![0.0; picks.len() * c];
        for (o, p) in picks.iter().enumerate() {
            let src = match *p {
                RowPick::First(i) if i < na => &a.data()[i * c..(i + 1) * c],
                RowPick::Second(i) if i < nb => &b.data()[i * c..(i + 1) * c],
                RowPick::Zero => continue,
                _ => return Err(Error::Usage(format!("row pick {p:?} out of range"))),
            };
            y[o * c..(o + 1) * c].copy_from_slice(src);
        }
        let tape = first.tape;
        Ok(tape.op(Tensor::from_parts(vec![picks.len(), c], y), &[first, second], move |g| {
            let mut ga = vec![0.0; na * c];
            let mut gb = vec![0.0; nb * c];
            for (o, p) in picks.iter().enumerate() {
                let (dst, i) = match *p {
                    RowPick::First(i) => (&mut ga, i),
                    RowPick::Second(i) => (&mut gb, i),
                    RowPick::Zero => continue,
                };
                for j in 0..c {
                    dst[i * c + j] += g.data()[o * c + j];
                }
            }
            vec![Tensor::from_parts(vec![na, c], ga), Tensor::from_parts(vec![nb, c], gb)]
        }))
    }

    /// Weighted row mixing, see [`ops::mix_rows`].
    pub fn mix_rows(self, groups: Rc<Vec<Vec<(usize, f64)>>>) -> Result<Var<'t>> {
        let x = self.value();
        let y = ops::mix_rows(&x, &groups)?;
        let (n, c) = rows_of(&x);
        Ok(self.tape.op(y, &[self], move |g| {
            let mut gx = vec![0.0; n * c];
            for (o, terms) in groups.iter().enumerate() {
                for &(i, w) in terms {
                    for j in 0..c {
                        gx[i * c + j] += w * g.data()[o * c + j];
                    }
                }
            }
            vec![Tensor::from_parts(vec![n, c], gx)]
        }))
    }

    pub fn depthwise_conv3x3(self, weight: Var<'t>, batch: usize, h: usize, w: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), weight.value());
        let y = ops::depthwise_conv3x3(&x, &k, batch, h, w)?;
        let (n, c) = rows_of(&x);
        Ok(self.tape.op(y, &[self, weight], move |g| {
            let mut gx = vec![0.0; n * c];
            let mut gk = vec![0.0; 9 * c];
            for b in 0..batch {
                for i in 0..h {
                    for j in 0..w {
                        let o = (b * h + i) * w + j;
                        for t in 0..9 {
                            let (dy, dx) = ops::tap_offset(t);
                            let (yy, xx) = (i as isize + dy, j as isize + dx);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let src = (b * h + yy as usize) * w + xx as usize;
                            for ch in 0..c {
                                let gv = g.data()[o * c + ch];
                                gx[src * c + ch] += k.data()[t * c + ch] * gv;
                                gk[t * c + ch] += x.data()[src * c + ch] * gv;
                            }
                        }
                    }
                }
            }
            vec![Tensor::from_parts(vec![n, c], gx), Tensor::from_parts(vec![9, c], gk)]
        }))
    }
}
