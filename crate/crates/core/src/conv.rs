//! im2col convolution and pooling kernels over `[N, C, D, H, W]` tensors.
//!
//! One-dimensional (audio) and two-dimensional (spectrogram) layers reuse the
//! same kernels with singleton depth/height axes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvSpec { stride, pad }
    }

    /// Stride 1, "same" padding for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvSpec { stride: [1, 1, 1], pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2] }
    }

    pub fn out_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.pad[i];
            if padded < kernel[i] || self.stride[i] == 0 {
                return Err(Error::Shape(format!(
                    "kernel {:?} does not fit input {:?} with padding {:?}",
                    kernel, input, self.pad
                )));
            }
            out[i] = (padded - kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }
}

pub(crate) fn dims5(t: &Tensor<impl Real>) -> Result<[usize; 5]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("expected a 5-d tensor, got {:?}", t.shape())))
}

struct Geometry {
    c: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k[0] * self.k[1] * self.k[2]
    }

    fn cols(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    fn in_size(&self) -> usize {
        self.c * self.inp[0] * self.inp[1] * self.inp[2]
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.pad == [0, 0, 0]
    }
}

/// Input coordinate for output index `o` and kernel tap `k`, if inside the input.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        None
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let p = g.cols();
    let mut r = 0;
    for c in 0..g.c {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..g.k[0] {
            for b in 0..g.k[1] {
                for e in 0..g.k[2] {
                    let row = &mut cols[r * p..(r + 1) * p];
                    let mut j = 0;
                    for zd in 0..od {
                        let sd_ = src(zd, a, sd, pd, id);
                        for zh in 0..oh {
                            let sh_ = src(zh, b, sh, ph, ih);
                            match (sd_, sh_) {
                                (Some(d), Some(h)) => {
                                    let base = (d * ih + h) * iw;
                                    for zw in 0..ow {
                                        row[j] = match src(zw, e, sw, pw, iw) {
                                            Some(w) => xc[base + w],
                                            None => T::zero(),
                                        };
                                        j += 1;
                                    }
                                }
                                _ => {
                                    row[j..j + ow].fill(T::zero());
                                    j += ow;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.pad;
    let p = g.cols();
    let mut r = 0;
    for c in 0..g.c {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..g.k[0] {
            for b in 0..g.k[1] {
                for e in 0..g.k[2] {
                    let row = &cols[r * p..(r + 1) * p];
                    let mut j = 0;
                    for zd in 0..od {
                        let sd_ = src(zd, a, sd, pd, id);
                        for zh in 0..oh {
                            if let (Some(d), Some(h)) = (sd_, src(zh, b, sh, ph, ih)) {
                                let base = (d * ih + h) * iw;
                                for zw in 0..ow {
                                    if let Some(w) = src(zw, e, sw, pw, iw) {
                                        xc[base + w] += row[j];
                                    }
                                    j += 1;
                                }
                            } else {
                                j += ow;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Cached state needed by [`conv_backward`].
pub struct ConvCache<T> {
    cols: Vec<Vec<T>>,
    geometry_in: [usize; 5],
    spec: ConvSpec,
}

/// `y = conv(x, w) + b`. Shapes: x `[N,C,D,H,W]`, w `[Co,C,kd,kh,kw]`, b `[Co]`.
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: ConvSpec,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
    let [n, c, d, h, wd] = dims5(x)?;
    let [co, ci, kd, kh, kw] = dims5(w)?;
    if ci != c {
        return Err(Error::Shape(format!("conv expects {} input channels, got {}", ci, c)));
    }
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::Shape(format!("conv bias shape {:?}", b.shape())));
        }
    }
    let out = spec.out_dims([d, h, wd], [kd, kh, kw])?;
    let g = Geometry { c, inp: [d, h, wd], k: [kd, kh, kw], out, spec };
    let (rows, p) = (g.rows(), g.cols());
    let mut y = Tensor::zeros(&[n, co, out[0], out[1], out[2]]);
    let mut caches = Vec::new();
    for i in 0..n {
        let xi = &x.data()[i * g.in_size()..(i + 1) * g.in_size()];
        let yi = &mut y.data_mut()[i * co * p..(i + 1) * co * p];
        if g.is_pointwise() {
            gemm(MatRef::new(w.data(), co, rows), MatRef::new(xi, rows, p), T::zero(), yi);
            if keep_cache {
                caches.push(Vec::new());
            }
        } else {
            let mut cols = vec![T::zero(); rows * p];
            im2col(xi, &g, &mut cols);
            gemm(MatRef::new(w.data(), co, rows), MatRef::new(&cols, rows, p), T::zero(), yi);
            if keep_cache {
                caches.push(cols);
            }
        }
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in yi[o * p..(o + 1) * p].iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    let cache = keep_cache.then(|| ConvCache { cols: caches, geometry_in: [n, c, d, h, wd], spec });
    Ok((y, cache))
}

/// Gradients of [`conv_forward`] with respect to `(x, w, b)`.
pub fn conv_backward<T: Real>(
    cache: &ConvCache<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, d, h, wd] = cache.geometry_in;
    let ws = w.shape();
    let (co, k) = (ws[0], [ws[2], ws[3], ws[4]]);
    let ys = dy.shape();
    let g = Geometry { c, inp: [d, h, wd], k, out: [ys[2], ys[3], ys[4]], spec: cache.spec };
    let (rows, p) = (g.rows(), g.cols());

    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(ws));
    let mut db = need[2].then(|| Tensor::zeros(&[co]));
    let mut dcols = vec![T::zero(); if need[0] && !g.is_pointwise() { rows * p } else { 0 }];

    for i in 0..n {
        let dyi = &dy.data()[i * co * p..(i + 1) * co * p];
        let cols: &[T] = if g.is_pointwise() {
            &x.data()[i * g.in_size()..(i + 1) * g.in_size()]
        } else {
            &cache.cols[i]
        };
        if let Some(dw) = dw.as_mut() {
            gemm(MatRef::new(dyi, co, p), MatRef::new(cols, rows, p).t(), T::one(), dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.data_mut().iter_mut().enumerate() {
                *acc += dyi[o * p..(o + 1) * p].iter().fold(T::zero(), |s, &v| s + v);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * g.in_size()..(i + 1) * g.in_size()];
            if g.is_pointwise() {
                gemm(MatRef::new(w.data(), co, rows).t(), MatRef::new(dyi, co, p), T::zero(), dxi);
            } else {
                gemm(
                    MatRef::new(w.data(), co, rows).t(),
                    MatRef::new(dyi, co, p),
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, &g, dxi);
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling with window = stride; partial windows at the border are kept.
pub fn max_pool_forward<T: Real>(x: &Tensor<T>, k: [usize; 3]) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, d, h, w] = dims5(x)?;
    let out = [d.div_ceil(k[0]), h.div_ceil(k[1]), w.div_ceil(k[2])];
    let mut y = Tensor::zeros(&[n, c, out[0], out[1], out[2]]);
    let mut arg = vec![0usize; y.numel()];
    let xd = x.data();
    let mut j = 0;
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for zd in od * k[0]..((od + 1) * k[0]).min(d) {
                        for zh in oh * k[1]..((oh + 1) * k[1]).min(h) {
                            for zw in ow * k[2]..((ow + 1) * k[2]).min(w) {
                                let idx = base + (zd * h + zh) * w + zw;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_i = idx;
                                }
                            }
                        }
                    }
                    y.data_mut()[j] = best;
                    arg[j] = best_i;
                    j += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Nearest-neighbour upsampling by integer factors on (D, H, W).
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, f: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = dims5(x)?;
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut y = Tensor::zeros(&[n, c, od, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..n * c {
        let (xb, yb) = (plane * d * h * w, plane * od * oh * ow);
        for zd in 0..od {
            for zh in 0..oh {
                let row = xb + ((zd / f[0]) * h + zh / f[1]) * w;
                let out = yb + (zd * oh + zh) * ow;
                for zw in 0..ow {
                    yd[out + zw] = xd[row + zw / f[2]];
                }
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize], f: [usize; 3]) -> Tensor<T> {
    let (n, c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
    let mut dx = Tensor::zeros(in_shape);
    let yd = dy.data();
    let xd = dx.data_mut();
    for plane in 0..n * c {
        let (xb, yb) = (plane * d * h * w, plane * od * oh * ow);
        for zd in 0..od {
            for zh in 0..oh {
                let row = xb + ((zd / f[0]) * h + zh / f[1]) * w;
                let out = yb + (zd * oh + zh) * ow;
                for zw in 0..ow {
                    xd[row + zw / f[2]] += yd[out + zw];
                }
            }
        }
    }
    dx
}
