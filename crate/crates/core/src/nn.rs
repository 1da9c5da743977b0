//! Named parameters, initializers and small layer helpers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Learnable tensors keyed by dotted names, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn from_map(params: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { params }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Config(format!("missing parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    /// Parameters under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let p = format!("{}.", prefix);
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every entry of `other` under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in &other.params {
            self.params.insert(format!("{}.{}", prefix, k), v.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Places every parameter on `g`; trainable ones as gradient leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) { g.leaf(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars, prefix: String::new() }
    }

    pub fn bind_all(&self, g: &mut Graph<T>) -> Bound {
        self.bind(g, |_| true)
    }
}

/// Parameters placed on a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    prefix: String,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect(), prefix: String::new() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}{}", self.prefix, name) };
        self.vars.get(&full).copied().ok_or_else(|| Error::Config(format!("missing parameter {}", full)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(&format!("{}{}", self.prefix, name))
    }

    /// View rooted at `prefix.`.
    pub fn scope(&self, prefix: &str) -> Bound {
        Bound { vars: self.vars.clone(), prefix: format!("{}{}.", self.prefix, prefix) }
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}

/// He-normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * std)
    })
}

/// Registers `name.w` (`[co, ci, kd, kh, kw]`, He init) and optionally `name.b` (zeros).
pub fn init_conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    co: usize,
    ci: usize,
    k: [usize; 3],
    bias: bool,
    rng: &mut R,
) {
    let fan_in = ci * k[0] * k[1] * k[2];
    store.insert(format!("{}.w", name), he_normal(&[co, ci, k[0], k[1], k[2]], fan_in, rng));
    if bias {
        store.insert(format!("{}.b", name), Tensor::zeros(&[co]));
    }
}

pub fn init_linear<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, out: usize, inp: usize, rng: &mut R) {
    let std = (1.0 / inp.max(1) as f64).sqrt();
    store.insert(
        format!("{}.w", name),
        Tensor::from_fn(&[out, inp], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        }),
    );
    store.insert(format!("{}.b", name), Tensor::zeros(&[out]));
}

/// Applies the convolution registered under `name` (bias used when present).
pub fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = p.var(&format!("{}.w", name))?;
    let b = if p.has(&format!("{}.b", name)) { Some(p.var(&format!("{}.b", name))?) } else { None };
    g.conv(x, w, b, spec)
}

/// Convolution whose output length along each axis is `ceil(input / stride)`,
/// padding asymmetrically as needed.
pub fn conv_ceil<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: [usize; 3],
) -> Result<Var> {
    let w = p.var(&format!("{}.w", name))?;
    let b = if p.has(&format!("{}.b", name)) { Some(p.var(&format!("{}.b", name))?) } else { None };
    conv_ceil_vars(g, x, w, b, stride)
}

/// [`conv_ceil`] on explicit weight and bias handles.
pub fn conv_ceil_vars<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if shape.len() != 5 || ws.len() != 5 {
        return Err(Error::Shape(format!("conv input {:?} / weight {:?} must be 5-d", shape, ws)));
    }
    let kernel = [ws[2], ws[3], ws[4]];
    let mut x = x;
    for axis in 0..3 {
        let n = shape[2 + axis];
        let out = n.div_ceil(stride[axis]);
        let needed = ((out - 1) * stride[axis] + kernel[axis]).saturating_sub(n);
        if needed > 0 {
            let before = needed / 2;
            x = g.pad_axis(x, 2 + axis, before, needed - before);
        }
    }
    g.conv(x, w, b, ConvSpec::new(stride, [0, 0, 0]))
}

pub fn ceil_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_ceil_output_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        init_conv(&mut store, "c", 2, 1, [1, 1, 9], true, &mut rng);
        for (n, s) in [(2000, 2), (87_588, 4), (7, 5), (5, 5), (1, 4)] {
            let mut g = Graph::inference();
            let p = store.bind_all(&mut g);
            let x = g.constant(Tensor::zeros(&[1, 1, 1, 1, n]));
            let y = conv_ceil(&mut g, &p, "c", x, [1, 1, s]).unwrap();
            assert_eq!(g.shape(y)[4], n.div_ceil(s), "n={} s={}", n, s);
        }
    }

    #[test]
    fn he_init_has_expected_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = he_normal(&[20_000], 50, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / 20_000.0;
        assert!((var - 0.04).abs() < 0.002);
    }

    #[test]
    fn subset_and_merge_are_inverse() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.x", Tensor::zeros(&[1]));
        s.insert("b.y", Tensor::zeros(&[2]));
        let sub = s.subset("a");
        assert_eq!(sub.names().collect::<Vec<_>>(), vec!["x"]);
        let mut t = ParamStore::new();
        t.merge_prefixed("a", &sub);
        assert!(t.contains("a.x"));
    }
}
