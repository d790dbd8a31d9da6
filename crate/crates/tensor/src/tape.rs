//! Operation tape and reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during one forward pass. Each
//! operation appends a node that records its inputs by index, so nodes are
//! stored in topological order by construction and [`Tape::backward`] walks
//! them in exact reverse recording order.
//!
//! Parameters enter the tape as leaves created with `requires_grad = true`;
//! their gradients come back in a [`Gradients`] map. Intermediate gradients
//! are dropped once propagated.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Real;
use crate::tensor::{validate_shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        planes: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
    MaskMul {
        input: usize,
        mask: Vec<T>,
    },
    Reparam {
        mu: usize,
        logvar: usize,
        eps: Vec<T>,
    },
    BernoulliNll {
        probs: usize,
        target: Vec<T>,
        batch: usize,
    },
    KlGaussian {
        mu: usize,
        logvar: usize,
        batch: usize,
    },
    CrossEntropy {
        probs: usize,
        labels: Vec<usize>,
        classes: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
}

pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Finiteness checks at op boundaries default to on in debug builds.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    pub(crate) fn node_value(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub(crate) fn op_of(&self, i: usize) -> &Op<T> {
        &self.nodes[i].op
    }

    /// Appends a computed node; `inputs` decide whether gradient flows.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok((ia, ib))
    }

    fn zip_map(&self, ia: usize, ib: usize, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(a.shape().to_vec(), data)
    }

    fn map(&self, i: usize, f: impl Fn(T) -> T) -> Tensor<T> {
        let a = &self.nodes[i].value;
        Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shapes("add", a, b)?;
        let out = self.zip_map(ia, ib, |x, y| x + y);
        self.push("add", out, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shapes("sub", a, b)?;
        let out = self.zip_map(ia, ib, |x, y| x - y);
        self.push("sub", out, Op::Sub(ia, ib), &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shapes("mul", a, b)?;
        let out = self.zip_map(ia, ib, |x, y| x * y);
        self.push("mul", out, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.map(ia, |x| x * c);
        self.push("scale", out, Op::Scale(ia, c), &[ia])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.map(ia, |x| x.exp());
        self.push("exp", out, Op::Exp(ia), &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(ia), &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let len = validate_shape(shape)?;
        let v = &self.nodes[ia].value;
        if len != v.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: len,
                actual: v.len(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push("reshape", out, Op::Reshape(ia), &[ia])
    }

    /// Runs the reverse pass from a scalar `loss` and returns the gradient of
    /// every `requires_grad` leaf on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        let loss_value = &self.nodes[il].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(il + 1);
        grads.resize_with(il + 1, || None);
        grads[il] = Some(vec![T::ONE]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let tensors = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                n.requires_grad.then(|| {
                    let data = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![T::ZERO; n.value.len()]);
                    Tensor::from_parts(n.value.shape().to_vec(), data)
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            tensors,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |j: usize| self.nodes[j].needs_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in [a, b].iter() {
                    if wants(*j) {
                        accumulate(grads, *j, out.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, out.len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    accumulate(grads, *b, out.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if wants(*a) {
                    accumulate(grads, *a, out.len(), |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                            *d += g * y;
                        }
                    });
                }
                if wants(*b) {
                    accumulate(grads, *b, out.len(), |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, out.len(), |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)
            }),
            Op::Exp(a) => accumulate(grads, *a, out.len(), |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y;
                }
            }),
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(grads, *a, n, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                let s = g[0] / T::from_f64(n as f64);
                accumulate(grads, *a, n, |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::Reshape(a) => accumulate(grads, *a, out.len(), |d| add_into(d, g)),
            Op::Relu(a) => accumulate(grads, *a, out.len(), |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    if y > T::ZERO {
                        *d += g;
                    }
                }
            }),
            Op::Sigmoid(a) => accumulate(grads, *a, out.len(), |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y * (T::ONE - y);
                }
            }),
            Op::Softmax(a) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                accumulate(grads, *a, out.len(), |d| {
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                let (b, n, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if wants(*input) {
                    accumulate(grads, *input, b * n, |d| {
                        T::gemm(false, true, b, n, m, T::ONE, g, w.data(), T::ONE, d)
                    });
                }
                if wants(*weight) {
                    accumulate(grads, *weight, n * m, |d| {
                        T::gemm(true, false, n, m, b, T::ONE, x.data(), g, T::ONE, d)
                    });
                }
                if wants(*bias) {
                    accumulate(grads, *bias, m, |d| {
                        for row in g.chunks(m) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = kernels::conv2d_backward(
                    g,
                    self.nodes[*input].value.data(),
                    self.nodes[*weight].value.data(),
                    geom,
                    (wants(*input), wants(*weight), wants(*bias)),
                );
                for (j, part) in [(*input, cg.input), (*weight, cg.weight), (*bias, cg.bias)] {
                    if let Some(part) = part {
                        accumulate_owned(grads, j, part);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let n = self.nodes[*input].value.len();
                accumulate(grads, *input, n, |d| {
                    for (&src, &g) in argmax.iter().zip(g) {
                        d[src] += g;
                    }
                });
            }
            Op::Upsample {
                input,
                planes,
                h,
                w,
                factor,
            } => {
                let part = kernels::upsample_backward(g, *planes, *h, *w, *factor);
                accumulate_owned(grads, *input, part);
            }
            Op::MaskMul { input, mask } => accumulate(grads, *input, out.len(), |d| {
                for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::Reparam { mu, logvar, eps } => {
                if wants(*mu) {
                    accumulate(grads, *mu, out.len(), |d| add_into(d, g));
                }
                if wants(*logvar) {
                    let lv = self.nodes[*logvar].value.data();
                    let half = T::from_f64(0.5);
                    accumulate(grads, *logvar, out.len(), |d| {
                        for (((d, &g), &e), &l) in d.iter_mut().zip(g).zip(eps).zip(lv) {
                            *d += g * e * (l * half).exp() * half;
                        }
                    });
                }
            }
            Op::BernoulliNll {
                probs,
                target,
                batch,
            } => {
                let p = self.nodes[*probs].value.data();
                let s = g[0] / T::from_f64(*batch as f64);
                accumulate(grads, *probs, p.len(), |d| {
                    for ((d, &p), &x) in d.iter_mut().zip(p).zip(target) {
                        let pc = clamp_prob(p);
                        *d += s * (pc - x) / (pc * (T::ONE - pc));
                    }
                });
            }
            Op::KlGaussian { mu, logvar, batch } => {
                let s = g[0] / T::from_f64(*batch as f64);
                let half = T::from_f64(0.5);
                if wants(*mu) {
                    let m = self.nodes[*mu].value.data();
                    accumulate(grads, *mu, m.len(), |d| {
                        d.iter_mut().zip(m).for_each(|(d, &m)| *d += s * m)
                    });
                }
                if wants(*logvar) {
                    let lv = self.nodes[*logvar].value.data();
                    accumulate(grads, *logvar, lv.len(), |d| {
                        for (d, &l) in d.iter_mut().zip(lv) {
                            *d += s * half * (l.exp() - T::ONE);
                        }
                    });
                }
            }
            Op::CrossEntropy {
                probs,
                labels,
                classes,
            } => {
                let p = self.nodes[*probs].value.data();
                let s = g[0] / T::from_f64(labels.len() as f64);
                accumulate(grads, *probs, p.len(), |d| {
                    for (row, &label) in labels.iter().enumerate() {
                        let at = row * classes + label;
                        *d.get_mut(at).expect("label checked at record time") -=
                            s / p[at].max(T::from_f64(PROB_FLOOR));
                    }
                });
            }
        }
    }
}

/// Probabilities entering log-likelihood terms are clamped to
/// `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-7;

#[inline]
pub(crate) fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::from_f64(PROB_FLOOR);
    p.max(lo).min(T::ONE - lo)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    i: usize,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[i].get_or_insert_with(|| vec![T::ZERO; len]);
    f(slot);
}

/// Adds a freshly computed buffer, taking ownership when the slot is empty.
fn accumulate_owned<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, part: Vec<T>) {
    match &mut grads[i] {
        Some(slot) => add_into(slot, &part),
        empty => *empty = Some(part),
    }
}

/// Gradients of the `requires_grad` leaves of one tape.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    tape: u64,
    tensors: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.tensors.get(v.index).and_then(Option::as_ref)
    }

    /// Removes and returns the gradients of `vars` in order.
    pub fn take_all(&mut self, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
        vars.iter()
            .map(|v| {
                if v.tape != self.tape {
                    return Err(TensorError::ForeignVar);
                }
                self.tensors
                    .get_mut(v.index)
                    .and_then(Option::take)
                    .ok_or_else(|| {
                        TensorError::InvalidArgument(format!(
                            "no gradient recorded for variable {}",
                            v.index
                        ))
                    })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().filter(|t| t.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_w() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar(_))));

        let mut other = Tape::<f64>::new();
        let v = other.param(t(&[1], &[1.0]));
        let l = other.sum(v).unwrap();
        assert_eq!(tape.backward(l).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn unreached_param_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[2], &[5.0, 6.0]));
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn constants_get_no_grad_entry() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.param(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(
            tape.add(a, b),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn non_finite_detected_when_checking() {
        let mut tape = Tape::<f32>::new();
        tape.set_check_finite(true);
        let a = tape.constant(Tensor::from_vec(&[1], vec![100.0]).unwrap());
        assert_eq!(
            tape.exp(a).unwrap_err(),
            TensorError::NonFinite { op: "exp" }
        );
        tape.set_check_finite(false);
        assert!(tape.exp(a).is_ok());
    }

    #[test]
    fn linearity_of_backward() {
        // grad(f + g) == grad(f) + grad(g)
        let w0 = t(&[4], &[0.5, -0.2, 1.3, 0.7]);
        let run = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let w = tape.param(w0.clone());
            let e = tape.exp(w).unwrap();
            let f = tape.sum(e).unwrap();
            let sq = tape.mul(w, w).unwrap();
            let g = tape.mean(sq).unwrap();
            let loss = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            tape.backward(loss).unwrap().get(w).unwrap().data().to_vec()
        };
        let (f, g, fg) = (run(0), run(1), run(2));
        for i in 0..4 {
            assert!((f[i] + g[i] - fg[i]).abs() < 1e-12);
        }
    }
}
