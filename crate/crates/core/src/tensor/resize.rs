//! Trilinear resampling with the half-pixel (align-corners = false) convention:
//! output index `o` samples source coordinate `(o + 0.5) * in / out - 0.5`,
//! clamped to the valid range.

use alloc::vec::Vec;

use super::{Spatial, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Real;

struct AxisTaps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<T>,
    w_hi: Vec<T>,
}

fn taps<T: Real>(n_in: usize, n_out: usize) -> AxisTaps<T> {
    let scale = n_in as f64 / n_out as f64;
    let mut t = AxisTaps {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        w_lo: Vec::with_capacity(n_out),
        w_hi: Vec::with_capacity(n_out),
    };
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (libm::floor(src) as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = if lo == hi { 0.0 } else { src - lo as f64 };
        t.lo.push(lo);
        t.hi.push(hi);
        t.w_lo.push(T::from_f64(1.0 - frac));
        t.w_hi.push(T::from_f64(frac));
    }
    t
}

/// Linear resampling of the middle axis of a `[outer, n_in, inner]` array.
fn resize_axis<T: Real>(src: &[T], outer: usize, n_in: usize, inner: usize, t: &AxisTaps<T>) -> Vec<T> {
    let n_out = t.lo.len();
    let mut out = Vec::with_capacity(outer * n_out * inner);
    for o in 0..outer {
        let base = o * n_in * inner;
        for k in 0..n_out {
            let lo = &src[base + t.lo[k] * inner..base + (t.lo[k] + 1) * inner];
            let hi = &src[base + t.hi[k] * inner..base + (t.hi[k] + 1) * inner];
            let (a, b) = (t.w_lo[k], t.w_hi[k]);
            out.extend(lo.iter().zip(hi).map(|(&l, &h)| a * l + b * h));
        }
    }
    out
}

/// Adjoint of [`resize_axis`].
fn resize_axis_adjoint<T: Real>(grad: &[T], outer: usize, n_in: usize, inner: usize, t: &AxisTaps<T>) -> Vec<T> {
    let n_out = t.lo.len();
    let mut out = alloc::vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let base = o * n_in * inner;
        for k in 0..n_out {
            let g = &grad[(o * n_out + k) * inner..(o * n_out + k + 1) * inner];
            let (a, b) = (t.w_lo[k], t.w_hi[k]);
            let lo = base + t.lo[k] * inner;
            for (d, &gv) in out[lo..lo + inner].iter_mut().zip(g) {
                *d += a * gv;
            }
            let hi = base + t.hi[k] * inner;
            for (d, &gv) in out[hi..hi + inner].iter_mut().zip(g) {
                *d += b * gv;
            }
        }
    }
    out
}

/// Separable trilinear resize: depth, then width, then height.
pub fn resize_trilinear<T: Real>(x: &Tensor<T>, target: Spatial) -> Result<Tensor<T>> {
    let [n, c, h, w, d] = x.dims5()?;
    if target.iter().any(|&e| e == 0) {
        return Err(shape_err!("resize target {:?} has a zero extent", target));
    }
    if target == [h, w, d] {
        return Ok(x.clone());
    }
    let [oh, ow, od] = target;
    let planes = n * c;
    let mut buf = x.data().to_vec();
    if od != d {
        buf = resize_axis(&buf, planes * h * w, d, 1, &taps(d, od));
    }
    if ow != w {
        buf = resize_axis(&buf, planes * h, w, od, &taps(w, ow));
    }
    if oh != h {
        buf = resize_axis(&buf, planes, h, ow * od, &taps(h, oh));
    }
    Tensor::new(&[n, c, oh, ow, od], buf)
}

/// Adjoint of [`resize_trilinear`] mapping an output-shaped gradient back to
/// `input_shape`.
pub fn resize_trilinear_backward<T: Real>(input_shape: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w, d] = match *input_shape {
        [a, b, e, f, g] => [a, b, e, f, g],
        _ => return Err(shape_err!("resize backward expects a 5-d input shape")),
    };
    let [gn, gc, oh, ow, od] = grad.dims5()?;
    if gn != n || gc != c {
        return Err(shape_err!(
            "resize backward: gradient {:?} vs input {:?}",
            grad.shape(),
            input_shape
        ));
    }
    if [oh, ow, od] == [h, w, d] {
        return Ok(grad.clone());
    }
    let planes = n * c;
    let mut buf = grad.data().to_vec();
    if oh != h {
        buf = resize_axis_adjoint(&buf, planes, h, ow * od, &taps(h, oh));
    }
    if ow != w {
        buf = resize_axis_adjoint(&buf, planes * h, w, od, &taps(w, ow));
    }
    if od != d {
        buf = resize_axis_adjoint(&buf, planes * h * w, d, 1, &taps(d, od));
    }
    Tensor::new(input_shape, buf)
}
