//! Forward and vector-Jacobian kernels. All loops run in a fixed order so
//! results are reproducible bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// Right operand is (1, c, 1, 1) or (n, c, 1, 1).
    PerChannel,
}

pub(crate) fn broadcast_kind(lhs: Shape, rhs: Shape, op: &str) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if rhs.is_scalar() {
        Ok(Broadcast::Scalar)
    } else if rhs.h() == 1
        && rhs.w() == 1
        && rhs.c() == lhs.c()
        && (rhs.n() == 1 || rhs.n() == lhs.n())
    {
        Ok(Broadcast::PerChannel)
    } else {
        Err(Error::Dimension(format!(
            "{op}: cannot combine shapes {lhs} and {rhs}"
        )))
    }
}

#[inline]
fn channel_slot(rhs: Shape, n: usize, c: usize) -> usize {
    if rhs.n() == 1 {
        c
    } else {
        n * rhs.c() + c
    }
}

pub(crate) fn zip_broadcast<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kind: Broadcast,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let s = x.shape();
    let data = match kind {
        Broadcast::Same => x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect(),
        Broadcast::Scalar => {
            let b = y.data()[0];
            x.data().iter().map(|&a| f(a, b)).collect()
        }
        Broadcast::PerChannel => {
            let mut out = Vec::with_capacity(s.numel());
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let b = y.data()[channel_slot(y.shape(), n, c)];
                    out.extend(x.plane(n, c).iter().map(|&a| f(a, b)));
                }
            }
            out
        }
    };
    Tensor::new(s, data).expect("broadcast preserves the left shape")
}

/// Sums a left-shaped gradient down to the right operand's shape.
pub(crate) fn reduce_broadcast<T: Real>(g: &Tensor<T>, rhs: Shape, kind: Broadcast) -> Tensor<T> {
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::scalar(g.sum()),
        Broadcast::PerChannel => {
            let s = g.shape();
            let mut out = Tensor::zeros(rhs);
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let acc: T = g.plane(n, c).iter().copied().sum();
                    let slot = channel_slot(rhs, n, c);
                    let d = out.data_mut();
                    d[slot] = d[slot] + acc;
                }
            }
            out
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.numel() == 0 {
        return Err(Error::Dimension(format!("cannot pool empty tensor {s}")));
    }
    let inv = T::lit(1.0 / s.plane() as f64);
    let mut out = Vec::with_capacity(s.n() * s.c());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let sum: T = x.plane(n, c).iter().copied().sum();
            out.push(sum * inv);
        }
    }
    Tensor::new(Shape::new(s.n(), s.c(), 1, 1), out)
}

pub(crate) fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?
        .shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(Error::Dimension(format!(
                "concat_channels: shape {s} does not match {first}"
            )));
        }
        c_total += s.c();
    }
    let out_shape = first.with_c(c_total);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n() {
        for p in parts {
            let per = p.shape().c() * first.plane();
            out.extend_from_slice(&p.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn narrow_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c() {
        return Err(Error::Index(format!(
            "channel range {start}..{} out of bounds for {s}",
            start + len
        )));
    }
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n() * len * p);
    for n in 0..s.n() {
        let base = (n * s.c() + start) * p;
        out.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::new(s.with_c(len), out)
}

pub(crate) fn narrow_backward<T: Real>(dy: &Tensor<T>, x_shape: Shape, start: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let len = dy.shape().c();
    for n in 0..x_shape.n() {
        for c in 0..len {
            dx.plane_mut(n, start + c).copy_from_slice(dy.plane(n, c));
        }
    }
    dx
}

/// Channel index lists used by gather. One list is shared by the whole batch;
/// otherwise there is one list per sample, all of equal length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelIndex {
    lists: Vec<Vec<usize>>,
}

impl ChannelIndex {
    pub fn shared(list: Vec<usize>) -> Self {
        ChannelIndex { lists: vec![list] }
    }

    pub fn per_sample(lists: Vec<Vec<usize>>) -> Result<Self> {
        let k = lists
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Index("per-sample index needs at least one list".into()))?;
        if lists.iter().any(|l| l.len() != k) {
            return Err(Error::Index("per-sample index lists differ in length".into()));
        }
        Ok(ChannelIndex { lists })
    }

    pub fn for_sample(&self, n: usize) -> &[usize] {
        if self.lists.len() == 1 {
            &self.lists[0]
        } else {
            &self.lists[n]
        }
    }

    pub fn len(&self) -> usize {
        self.lists[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists[0].is_empty()
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub(crate) fn validate(&self, s: Shape) -> Result<()> {
        if self.lists.len() != 1 && self.lists.len() != s.n() {
            return Err(Error::Index(format!(
                "{} index lists for batch of {}",
                self.lists.len(),
                s.n()
            )));
        }
        if self.is_empty() {
            return Err(Error::Index("empty channel index".into()));
        }
        for l in &self.lists {
            if let Some(&bad) = l.iter().find(|&&i| i >= s.c()) {
                return Err(Error::Index(format!(
                    "channel index {bad} out of range for {} channels",
                    s.c()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn gather_channels<T: Real>(x: &Tensor<T>, idx: &ChannelIndex) -> Result<Tensor<T>> {
    let s = x.shape();
    idx.validate(s)?;
    let mut out = Vec::with_capacity(s.n() * idx.len() * s.plane());
    for n in 0..s.n() {
        for &c in idx.for_sample(n) {
            out.extend_from_slice(x.plane(n, c));
        }
    }
    Tensor::new(s.with_c(idx.len()), out)
}

pub(crate) fn gather_backward<T: Real>(dy: &Tensor<T>, x_shape: Shape, idx: &ChannelIndex) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for n in 0..x_shape.n() {
        for (j, &c) in idx.for_sample(n).iter().enumerate() {
            let src = dy.plane(n, j);
            for (d, &g) in dx.plane_mut(n, c).iter_mut().zip(src) {
                *d = *d + g;
            }
        }
    }
    dx
}

pub(crate) fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    Tensor::from_fn(Shape::new(s.n(), s.c(), 2 * h, 2 * w), |n, c, y, xx| {
        x.at(n, c, y / 2, xx / 2)
    })
}

pub(crate) fn upsample2x_backward<T: Real>(dy: &Tensor<T>, x_shape: Shape) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let s = dy.shape();
    for n in 0..s.n() {
        for c in 0..s.c() {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for y in 0..s.h() {
                for xx in 0..s.w() {
                    let d = &mut dst[(y / 2) * x_shape.w() + xx / 2];
                    *d = *d + src[y * s.w() + xx];
                }
            }
        }
    }
    dx
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

pub(crate) fn reflect_pad<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if pad > 0 && (s.h() < 2 || s.w() < 2) {
        return Err(Error::Dimension(format!("reflect padding needs h,w >= 2, got {s}")));
    }
    let p = pad as isize;
    Ok(Tensor::from_fn(
        Shape::new(s.n(), s.c(), s.h() + 2 * pad, s.w() + 2 * pad),
        |n, c, y, xx| {
            x.at(
                n,
                c,
                reflect_index(y as isize - p, s.h()),
                reflect_index(xx as isize - p, s.w()),
            )
        },
    ))
}

pub(crate) fn reflect_pad_backward<T: Real>(dy: &Tensor<T>, x_shape: Shape, pad: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let s = dy.shape();
    let p = pad as isize;
    for n in 0..s.n() {
        for c in 0..s.c() {
            let src = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for y in 0..s.h() {
                let sy = reflect_index(y as isize - p, x_shape.h());
                for xx in 0..s.w() {
                    let sx = reflect_index(xx as isize - p, x_shape.w());
                    let d = &mut dst[sy * x_shape.w() + sx];
                    *d = *d + src[y * s.w() + xx];
                }
            }
        }
    }
    dx
}

/// Output positions `o` with `0 <= o*stride + k - pad < in_len`, as a half-open range.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if in_len + pad < k + 1 {
        return (lo, lo);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) struct ConvGeometry {
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geometry(
    x: Shape,
    w: Shape,
    bias: Option<Shape>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [_, ci, h, wd] = x.0;
    let [co, wci, kh, kw] = w.0;
    if ci != wci {
        return Err(Error::Dimension(format!(
            "conv2d: input {x} has {ci} channels, weight {w} expects {wci}"
        )));
    }
    if h == 0 || wd == 0 {
        return Err(Error::Dimension(format!("conv2d: empty spatial input {x}")));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d: stride must be positive".into()));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {x}"
        )));
    }
    if let Some(b) = bias {
        if b != Shape::new(1, co, 1, 1) {
            return Err(Error::Dimension(format!(
                "conv2d: bias shape {b}, expected (1, {co}, 1, 1)"
            )));
        }
    }
    Ok(ConvGeometry {
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

/// Output ranges per kernel tap along one axis.
fn tap_ranges(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..k).map(|t| valid_range(t, pad, stride, in_len, out_len)).collect()
}

#[inline]
fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn is_pointwise(w: Shape, stride: usize, pad: usize) -> bool {
    w.h() == 1 && w.w() == 1 && stride == 1 && pad == 0
}

pub(crate) fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ConvGeometry { oh, ow } = conv_geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), stride, pad)?;
    let [n, ci, h, wd] = x.shape().0;
    let [co, _, kh, kw] = w.shape().0;
    let mut out = vec![T::zero(); n * co * oh * ow];
    let (xd, wdat) = (x.data(), w.data());
    let pointwise = is_pointwise(w.shape(), stride, pad);
    let (ry, rx) = (tap_ranges(kh, pad, stride, h, oh), tap_ranges(kw, pad, stride, wd, ow));
    for b in 0..n {
        for o in 0..co {
            let obase = (b * co + o) * oh * ow;
            let plane = &mut out[obase..obase + oh * ow];
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias.data()[o]);
            }
            for i in 0..ci {
                let xp = &xd[(b * ci + i) * h * wd..(b * ci + i + 1) * h * wd];
                if pointwise {
                    axpy(plane, wdat[o * ci + i], xp);
                    continue;
                }
                for (ky, &(y0, y1)) in ry.iter().enumerate() {
                    for (kx, &(x0, x1)) in rx.iter().enumerate() {
                        let wv = wdat[((o * ci + i) * kh + ky) * kw + kx];
                        let ix0 = x0 * stride + kx - pad;
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xp[iy * wd..(iy + 1) * wd];
                            let orow = &mut plane[oy * ow + x0..oy * ow + x1];
                            if stride == 1 {
                                axpy(orow, wv, &xrow[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov = *ov + wv * xrow[ix0 + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(Shape::new(n, co, oh, ow), out)
}

pub(crate) struct ConvGrads<T: Real> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, ci, h, wd] = x.shape().0;
    let [co, _, kh, kw] = w.shape().0;
    let [_, _, oh, ow] = dy.shape().0;
    let mut dx = need[0].then(|| vec![T::zero(); x.shape().numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.shape().numel()]);
    let (xd, wdat, gd) = (x.data(), w.data(), dy.data());
    let pointwise = is_pointwise(w.shape(), stride, pad);
    let (ry, rx) = (tap_ranges(kh, pad, stride, h, oh), tap_ranges(kw, pad, stride, wd, ow));
    for b in 0..n {
        for o in 0..co {
            let gp = &gd[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for i in 0..ci {
                let xbase = (b * ci + i) * h * wd;
                if pointwise {
                    let widx = o * ci + i;
                    if let Some(dx) = dx.as_mut() {
                        axpy(&mut dx[xbase..xbase + h * wd], wdat[widx], gp);
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] = dw[widx] + dot(gp, &xd[xbase..xbase + h * wd]);
                    }
                    continue;
                }
                for (ky, &(y0, y1)) in ry.iter().enumerate() {
                    for (kx, &(x0, x1)) in rx.iter().enumerate() {
                        let widx = ((o * ci + i) * kh + ky) * kw + kx;
                        let wv = wdat[widx];
                        let ix0 = x0 * stride + kx - pad;
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gp[oy * ow + x0..oy * ow + x1];
                            let rbase = xbase + iy * wd + ix0;
                            if stride == 1 {
                                if let Some(dx) = dx.as_mut() {
                                    axpy(&mut dx[rbase..rbase + grow.len()], wv, grow);
                                }
                                if dw.is_some() {
                                    acc = acc + dot(grow, &xd[rbase..rbase + grow.len()]);
                                }
                                continue;
                            }
                            if let Some(dx) = dx.as_mut() {
                                for (j, &g) in grow.iter().enumerate() {
                                    let d = &mut dx[rbase + j * stride];
                                    *d = *d + wv * g;
                                }
                            }
                            if dw.is_some() {
                                for (j, &g) in grow.iter().enumerate() {
                                    acc = acc + g * xd[rbase + j * stride];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); co];
        for b in 0..n {
            for (o, d) in db.iter_mut().enumerate() {
                let s: T = gd[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow].iter().copied().sum();
                *d = *d + s;
            }
        }
        Tensor::new(Shape::new(1, co, 1, 1), db).expect("bias shape")
    });
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")),
        dw: dw.map(|d| Tensor::new(w.shape(), d).expect("dw shape")),
        db,
    }
}

/// Per-(sample, channel) mean and inverse standard deviation over the plane.
fn plane_stats<T: Real>(p: &[T], eps: f64) -> (T, T) {
    let inv_len = T::lit(1.0 / p.len() as f64);
    let mean = p.iter().copied().sum::<T>() * inv_len;
    let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
    (mean, T::one() / (var + T::lit(eps)).sqrt())
}

pub(crate) fn instance_norm<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let p = x.plane(n, c);
            let (mean, inv_std) = plane_stats(p, eps);
            out.extend(p.iter().map(|&v| (v - mean) * inv_std));
        }
    }
    Tensor::new(s, out).expect("shape preserved")
}

pub(crate) fn instance_norm_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, eps: f64) -> Tensor<T> {
    let s = x.shape();
    let inv_len = T::lit(1.0 / s.plane() as f64);
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let (_, inv_std) = plane_stats(x.plane(n, c), eps);
            let (yp, gp) = (y.plane(n, c), dy.plane(n, c));
            let mean_g = gp.iter().copied().sum::<T>() * inv_len;
            let mean_gy = gp.iter().zip(yp).map(|(&g, &yv)| g * yv).sum::<T>() * inv_len;
            out.extend(
                gp.iter()
                    .zip(yp)
                    .map(|(&g, &yv)| inv_std * (g - mean_g - yv * mean_gy)),
            );
        }
    }
    Tensor::new(s, out).expect("shape preserved")
}

fn plane_norm<T: Real>(p: &[T], eps: f64) -> T {
    p.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(eps))
}

/// Scales every channel plane to unit L2 norm.
pub(crate) fn l2_normalize<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let p = x.plane(n, c);
            let norm = plane_norm(p, eps);
            out.extend(p.iter().map(|&v| v / norm));
        }
    }
    Tensor::new(s, out).expect("shape preserved")
}

pub(crate) fn l2_normalize_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, eps: f64) -> Tensor<T> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let xp = x.plane(n, c);
            let raw = xp.iter().map(|&v| v * v).sum::<T>().sqrt();
            let norm = plane_norm(xp, eps);
            let gp = dy.plane(n, c);
            if raw > T::lit(eps) {
                let yp = y.plane(n, c);
                let dot = gp.iter().zip(yp).map(|(&g, &yv)| g * yv).sum::<T>();
                out.extend(gp.iter().zip(yp).map(|(&g, &yv)| (g - yv * dot) / norm));
            } else {
                out.extend(gp.iter().map(|&g| g / norm));
            }
        }
    }
    Tensor::new(s, out).expect("shape preserved")
}

pub(crate) fn check_heads(s: Shape, heads: usize, op: &str) -> Result<usize> {
    if heads == 0 || s.c() % heads != 0 {
        return Err(Error::Config(format!(
            "{op}: {heads} heads do not divide {} channels",
            s.c()
        )));
    }
    Ok(s.c() / heads)
}

/// Per-head channel Gram matrix `q·kᵀ` over flattened spatial positions,
/// shaped (n, heads, c/heads, c/heads).
pub(crate) fn channel_gram<T: Real>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = q.shape();
    if k.shape() != s {
        return Err(Error::Dimension(format!(
            "channel_gram: query {s} and key {} differ",
            k.shape()
        )));
    }
    let ch = check_heads(s, heads, "channel_gram")?;
    let mut out = Vec::with_capacity(s.n() * heads * ch * ch);
    for n in 0..s.n() {
        for hd in 0..heads {
            for i in 0..ch {
                let qp = q.plane(n, hd * ch + i);
                for j in 0..ch {
                    let kp = k.plane(n, hd * ch + j);
                    out.push(qp.iter().zip(kp).map(|(&a, &b)| a * b).sum());
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n(), heads, ch, ch), out)
}

pub(crate) fn channel_gram_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    dg: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Tensor<T>) {
    let s = q.shape();
    let ch = s.c() / heads;
    let mut dq = Tensor::zeros(s);
    let mut dk = Tensor::zeros(s);
    for n in 0..s.n() {
        for hd in 0..heads {
            for i in 0..ch {
                for j in 0..ch {
                    let g = dg.at(n, hd, i, j);
                    let kp = k.plane(n, hd * ch + j);
                    for (d, &kv) in dq.plane_mut(n, hd * ch + i).iter_mut().zip(kp) {
                        *d = *d + g * kv;
                    }
                    let qp = q.plane(n, hd * ch + i);
                    for (d, &qv) in dk.plane_mut(n, hd * ch + j).iter_mut().zip(qp) {
                        *d = *d + g * qv;
                    }
                }
            }
        }
    }
    (dq, dk)
}

/// Softmax along the last (width) axis.
pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let w = s.w();
    let mut out = Vec::with_capacity(s.numel());
    for row in x.data().chunks(w) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::new(s, out).expect("shape preserved")
}

pub(crate) fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let w = y.shape().w();
    let mut out = Vec::with_capacity(y.shape().numel());
    for (yr, gr) in y.data().chunks(w).zip(dy.data().chunks(w)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&yv, &g)| yv * (g - dot)));
    }
    Tensor::new(y.shape(), out).expect("shape preserved")
}

/// Applies per-head channel attention maps to the value channels.
pub(crate) fn channel_attend<T: Real>(attn: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = v.shape();
    let ch = check_heads(s, heads, "channel_attend")?;
    if attn.shape() != Shape::new(s.n(), heads, ch, ch) {
        return Err(Error::Dimension(format!(
            "channel_attend: attention {} does not fit values {s} with {heads} heads",
            attn.shape()
        )));
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n() {
        for hd in 0..heads {
            for i in 0..ch {
                for j in 0..ch {
                    let a = attn.at(n, hd, i, j);
                    let vp = v.plane(n, hd * ch + j).to_vec();
                    for (o, vv) in out.plane_mut(n, hd * ch + i).iter_mut().zip(vp) {
                        *o = *o + a * vv;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn channel_attend_backward<T: Real>(
    attn: &Tensor<T>,
    v: &Tensor<T>,
    dy: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Tensor<T>) {
    let s = v.shape();
    let ch = s.c() / heads;
    let mut da = Tensor::zeros(attn.shape());
    let mut dv = Tensor::zeros(s);
    for n in 0..s.n() {
        for hd in 0..heads {
            for i in 0..ch {
                let gp = dy.plane(n, hd * ch + i);
                for j in 0..ch {
                    let vp = v.plane(n, hd * ch + j);
                    let dot: T = gp.iter().zip(vp).map(|(&g, &vv)| g * vv).sum();
                    let slot = da.offset(n, hd, i, j);
                    da.data_mut()[slot] = dot;
                    let a = attn.at(n, hd, i, j);
                    for (d, &g) in dv.plane_mut(n, hd * ch + j).iter_mut().zip(gp) {
                        *d = *d + a * g;
                    }
                }
            }
        }
    }
    (da, dv)
}
