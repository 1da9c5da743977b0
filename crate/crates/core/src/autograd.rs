//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Graphs are cheap and built fresh for every step.

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::{gemm, split_axis, MatRef, Real, Tensor};

/// Handle to a value on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type Grads<T> = Vec<Option<Tensor<T>>>;
type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Grads<T>>;

/// Inputs available to a backward closure.
pub struct BackCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// A graph that never records backward closures (inference).
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, parents: vec![], backward: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, parents: vec![], backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, overwriting previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackCtx {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = bw(&ctx);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match grads[p].as_mut() {
                        Some(acc) => acc.add_assign(&pg),
                        None => grads[p] = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{}: {:?} vs {:?}",
                op,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, &[a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(
            v,
            &[a],
            Box::new(move |c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > T::zero() { g } else { g * slope }))]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(
            v,
            &[a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.out, |g, y| g * (T::one() - y * y)))]),
        )
    }

    /// Multiplies by a constant tensor of the same shape (no gradient to the mask).
    pub fn mul_const(&mut self, a: Var, mask: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != mask.shape() {
            return Err(Error::Shape("mul_const mask shape".into()));
        }
        let v = self.value(a).zip_map(mask, |x, m| x * m);
        let mask = mask.clone();
        Ok(self.push(v, &[a], Box::new(move |c| vec![Some(c.grad.zip_map(&mask, |g, m| g * m))])))
    }

    // ---- reductions & reshaping ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            &[a],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let orig = self.shape(a).to_vec();
        Ok(self.push(
            v,
            &[a],
            Box::new(move |c| vec![Some(c.grad.clone().reshape(&orig).expect("reshape grad"))]),
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        if axis >= self.shape(a).len() || start + len > self.shape(a)[axis] {
            return Err(Error::Shape(format!(
                "narrow axis {} [{}, {}) of {:?}",
                axis,
                start,
                start + len,
                self.shape(a)
            )));
        }
        let v = self.value(a).narrow(axis, start, len);
        Ok(self.push(
            v,
            &[a],
            Box::new(move |c| {
                let full = c.inputs[0].dim(axis);
                vec![Some(pad_axis_tensor(c.grad, axis, start, full - start - len))]
            }),
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = values.iter().map(|t| t.dim(axis)).collect();
        Ok(self.push(
            v,
            parts,
            Box::new(move |c| {
                let mut start = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &len)| {
                        let g = c.needs[i].then(|| c.grad.narrow(axis, start, len));
                        start += len;
                        g
                    })
                    .collect()
            }),
        ))
    }

    /// Zero-pads along `axis`.
    pub fn pad_axis(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let v = pad_axis_tensor(self.value(a), axis, before, after);
        self.push(
            v,
            &[a],
            Box::new(move |c| vec![Some(c.grad.narrow(axis, before, c.grad.dim(axis) - before - after))]),
        )
    }

    /// Repeats a tensor whose trailing axes are all 1 up to `trailing` sizes.
    pub fn broadcast_trailing(&mut self, a: Var, trailing: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = trailing.len();
        if shape.len() < k || shape[shape.len() - k..].iter().any(|&d| d != 1) {
            return Err(Error::Shape(format!("broadcast_trailing {:?} -> {:?}", shape, trailing)));
        }
        let reps: usize = trailing.iter().product();
        let mut out_shape = shape[..shape.len() - k].to_vec();
        out_shape.extend_from_slice(trailing);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len() * reps);
        for &x in src {
            data.extend(std::iter::repeat_n(x, reps));
        }
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            v,
            &[a],
            Box::new(move |c| {
                let g: Vec<T> = c
                    .grad
                    .data()
                    .chunks(reps)
                    .map(|ch| ch.iter().fold(T::zero(), |s, &v| s + v))
                    .collect();
                vec![Some(Tensor::from_vec(&shape, g).expect("broadcast grad"))]
            }),
        ))
    }

    /// Mean over the last `k` axes, keeping them as size 1.
    pub fn mean_trailing(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if k > shape.len() {
            return Err(Error::Shape("mean_trailing rank".into()));
        }
        let block: usize = shape[shape.len() - k..].iter().product();
        let mut out_shape = shape[..shape.len() - k].to_vec();
        out_shape.extend(std::iter::repeat_n(1, k));
        let inv = T::one() / T::from_usize(block).unwrap();
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(block)
            .map(|ch| ch.iter().fold(T::zero(), |s, &v| s + v) * inv)
            .collect();
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            v,
            &[a],
            Box::new(move |c| {
                let mut g = Vec::with_capacity(c.grad.numel() * block);
                for &x in c.grad.data() {
                    g.extend(std::iter::repeat_n(x * inv, block));
                }
                vec![Some(Tensor::from_vec(&shape, g).expect("mean grad"))]
            }),
        ))
    }

    /// Applies a fixed linear map `m` (`[out_len, in_len]`) along `axis`.
    pub fn mix_axis(&mut self, a: Var, axis: usize, m: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        if m.ndim() != 2 || m.dim(1) != n {
            return Err(Error::Shape(format!("mix_axis matrix {:?} for axis len {}", m.shape(), n)));
        }
        let out_len = m.dim(0);
        let mut out_shape = shape.clone();
        out_shape[axis] = out_len;
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            let x = &self.value(a).data()[o * n * inner..(o + 1) * n * inner];
            let y = &mut out.data_mut()[o * out_len * inner..(o + 1) * out_len * inner];
            gemm(MatRef::new(m.data(), out_len, n), MatRef::new(x, n, inner), T::zero(), y);
        }
        let m = m.clone();
        Ok(self.push(
            out,
            &[a],
            Box::new(move |c| {
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let gy = &c.grad.data()[o * out_len * inner..(o + 1) * out_len * inner];
                    let gx = &mut dx.data_mut()[o * n * inner..(o + 1) * n * inner];
                    gemm(MatRef::new(m.data(), out_len, n).t(), MatRef::new(gy, out_len, inner), T::zero(), gx);
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ---- layers ------------------------------------------------------------

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let record = self.grad_enabled && (self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b)));
        let (y, cache) = conv::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec, record)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
                Ok(self.push(
            y,
            &parents,
            Box::new(move |c| {
                let cache = cache.as_ref().expect("conv cache");
                let need = [c.needs[0], c.needs[1], has_bias && c.needs[2]];
                let (dx, dw, db) = conv::conv_backward(cache, c.inputs[0], c.inputs[1], c.grad, need);
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(db);
                }
                out
            }),
        ))
    }

    pub fn max_pool(&mut self, x: Var, k: [usize; 3]) -> Result<Var> {
        let (y, arg) = conv::max_pool_forward(self.value(x), k)?;
        Ok(self.push(
            y,
            &[x],
            Box::new(move |c| {
                let mut dx = Tensor::zeros(c.inputs[0].shape());
                let d = dx.data_mut();
                for (&i, &g) in arg.iter().zip(c.grad.data()) {
                    d[i] += g;
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn upsample(&mut self, x: Var, f: [usize; 3]) -> Result<Var> {
        let y = conv::upsample_nearest(self.value(x), f)?;
        Ok(self.push(
            y,
            &[x],
            Box::new(move |c| vec![Some(conv::upsample_nearest_backward(c.grad, c.inputs[0].shape(), f))]),
        ))
    }

    /// `x [N, F] · wᵀ + b` with `w [O, F]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!("linear: x {:?}, w {:?}, b {:?}", xs, ws, bs)));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut y = Tensor::zeros(&[n, o]);
        gemm(MatRef::new(self.value(x).data(), n, f), MatRef::new(self.value(w).data(), o, f).t(), T::zero(), y.data_mut());
        for row in y.data_mut().chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(self.value(b).data()) {
                *v += bv;
            }
        }
        Ok(self.push(
            y,
            &[x, w, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let dx = c.needs[0].then(|| {
                    let mut dx = Tensor::zeros(&[n, f]);
                    gemm(MatRef::new(g, n, o), MatRef::new(c.inputs[1].data(), o, f), T::zero(), dx.data_mut());
                    dx
                });
                let dw = c.needs[1].then(|| {
                    let mut dw = Tensor::zeros(&[o, f]);
                    gemm(MatRef::new(g, n, o).t(), MatRef::new(c.inputs[0].data(), n, f), T::zero(), dw.data_mut());
                    dw
                });
                let db = c.needs[2].then(|| {
                    let mut db = Tensor::zeros(&[o]);
                    for row in g.chunks(o) {
                        for (a, &v) in db.data_mut().iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }),
        ))
    }

    // ---- losses ------------------------------------------------------------

    /// `Σ |a − target|` against a constant target.
    pub fn l1_to(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != target.shape() {
            return Err(Error::Shape(format!("l1: {:?} vs {:?}", self.shape(a), target.shape())));
        }
        let s = self.value(a).zip_map(target, |x, y| (x - y).abs()).sum();
        let target = target.clone();
        Ok(self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |c| {
                let g = c.grad.item();
                vec![Some(c.inputs[0].zip_map(&target, |x, y| {
                    if x > y {
                        g
                    } else if x < y {
                        -g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        ))
    }

    /// `Σ (1 − cos(a − target))`, a circular distance for phase.
    pub fn cos_distance_to(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != target.shape() {
            return Err(Error::Shape("cos distance shape".into()));
        }
        let s = self.value(a).zip_map(target, |x, y| T::one() - (x - y).cos()).sum();
        let target = target.clone();
        Ok(self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |c| {
                let g = c.grad.item();
                vec![Some(c.inputs[0].zip_map(&target, |x, y| g * (x - y).sin()))]
            }),
        ))
    }

    /// Elementwise `ln σ(x)`, computed stably.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(
            v,
            &[a],
            // d/dx ln σ(x) = σ(−x)
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * sigmoid(-x)))]),
        )
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::Shape(format!("cross entropy: logits {:?}, {} labels", s, labels.len())));
        }
        let (n, k) = (s[0], s[1]);
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = T::zero();
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z = row.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
            for (j, &v) in row.iter().enumerate() {
                probs.data_mut()[i * k + j] = (v - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let nf = T::from_usize(n).unwrap();
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss / nf),
            &[logits],
            Box::new(move |c| {
                let g = c.grad.item() / nf;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * k + l] -= T::one();
                }
                d.scale_inplace(g);
                vec![Some(d)]
            }),
        ))
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x) = −softplus(−x)` without overflow.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn pad_axis_tensor<T: Real>(t: &Tensor<T>, axis: usize, before: usize, after: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = n + before + after;
    let mut data = Vec::with_capacity(outer * shape[axis] * inner);
    for o in 0..outer {
        data.extend(std::iter::repeat_n(T::zero(), before * inner));
        data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        data.extend(std::iter::repeat_n(T::zero(), after * inner));
    }
    Tensor::from_vec(&shape, data).expect("pad shape")
}

/// Central finite-difference gradient checking.
pub mod gradcheck {
    use super::*;

    /// Per-parameter relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    #[derive(Debug, Clone)]
    pub struct GradReport {
        pub name: String,
        pub rel_error: f64,
        pub analytic_norm: f64,
    }

    /// Compares the tape's gradients of `f` against central differences with step `h`.
    ///
    /// `f` builds a scalar from leaves created for each entry of `params`.
    pub fn check<F>(params: &[(String, Tensor<f64>)], h: f64, f: F) -> Result<Vec<GradReport>>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::inference();
            let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(_, p)| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;

        let mut current: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
        let mut reports = Vec::new();
        for (pi, (name, p)) in params.iter().enumerate() {
            let analytic = g.grad(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
            let mut diff2 = 0.0;
            let mut num2 = 0.0;
            for j in 0..p.numel() {
                let orig = current[pi].data()[j];
                current[pi].data_mut()[j] = orig + h;
                let plus = eval(&current)?;
                current[pi].data_mut()[j] = orig - h;
                let minus = eval(&current)?;
                current[pi].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                diff2 += (numeric - analytic.data()[j]).powi(2);
                num2 += numeric * numeric;
            }
            let an = analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = an.max(num2.sqrt()).max(1e-300);
            reports.push(GradReport { name: name.clone(), rel_error: diff2.sqrt() / denom, analytic_norm: an });
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 20001) as f64 / 10000.0 - 1.0
        })
    }

    fn assert_close(reports: &[gradcheck::GradReport], tol: f64) {
        for r in reports {
            assert!(r.rel_error < tol, "{}: rel error {:e}", r.name, r.rel_error);
            assert!(r.analytic_norm > 0.0, "{}: zero gradient", r.name);
        }
    }

    #[test]
    fn conv_pool_upsample_chain_gradients() {
        let params = vec![
            ("x".to_string(), rnd(&[2, 2, 4, 5, 5], 1)),
            ("w".to_string(), rnd(&[3, 2, 3, 3, 3], 2)),
            ("b".to_string(), rnd(&[3], 3)),
        ];
        let reports = check(&params, 1e-6, |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), ConvSpec::new([1, 2, 2], [1, 1, 1]))?;
            let y = g.leaky_relu(y, 0.2);
            let y = g.max_pool(y, [2, 1, 1])?;
            let y = g.upsample(y, [1, 2, 1])?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_close(&reports, 1e-6);
    }

    #[test]
    fn shape_op_gradients() {
        let params = vec![
            ("a".to_string(), rnd(&[2, 3, 2, 1, 1], 4)),
            ("b".to_string(), rnd(&[2, 1, 2, 3, 4], 5)),
            ("m".to_string(), rnd(&[5, 2], 6)),
        ];
        let weights = rnd(&[2, 4, 5, 3, 4], 7);
        let reports = check(&params, 1e-6, |g, v| {
            let a = g.broadcast_trailing(v[0], &[3, 4])?;
            let c = g.concat(&[a, v[1]], 1)?;
            let c = g.narrow(c, 2, 0, 2)?;
            let m = g.mean_trailing(c, 2)?;
            let m = g.broadcast_trailing(m, &[3, 4])?;
            let prod = g.mul(c, m)?;
            let pad = g.pad_axis(prod, 2, 1, 2);
            let t = g.mul_const(pad, &weights)?;
            let s = g.sum(t);
            let extra = g.mix_axis(v[0], 2, &Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0])?)?;
            let e = g.sum(extra);
            let e = g.mul(e, e)?;
            let mm = g.mul(v[2], v[2])?;
            let mm = g.sum(mm);
            let s = g.add(s, e)?;
            g.add(s, mm)
        })
        .unwrap();
        assert_close(&reports, 1e-6);
    }

    #[test]
    fn loss_gradients() {
        let target = rnd(&[3, 4], 9);
        let params = vec![
            ("a".to_string(), rnd(&[3, 4], 8)),
            ("w".to_string(), rnd(&[3, 4], 10)),
            ("b".to_string(), rnd(&[3], 11)),
        ];
        let reports = check(&params, 1e-6, |g, v| {
            let l1 = g.l1_to(v[0], &target)?;
            let cd = g.cos_distance_to(v[0], &target)?;
            let lin = g.linear(v[0], v[1], v[2])?;
            let ce = g.softmax_cross_entropy(lin, &[0, 2, 1])?;
            let ls = g.log_sigmoid(lin);
            let ls = g.sum(ls);
            let a = g.add(l1, cd)?;
            let a = g.add(a, ce)?;
            g.sub(a, ls)
        })
        .unwrap();
        assert_close(&reports, 1e-6);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!(log_sigmoid(-800.0f64).is_finite());
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0f64).abs() < 1e-300);
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::<f32>::inference();
        let a = g.leaf(Tensor::full(&[2], 1.0));
        let b = g.relu(a);
        assert!(!g.requires_grad(b));
    }
}
