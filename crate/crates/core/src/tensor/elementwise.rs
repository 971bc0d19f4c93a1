use alloc::vec;
use alloc::vec::Vec;

use super::{ensure_same_shape, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Real;

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `(outer, channels, inner)` for a channel axis at position 1.
fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("channel ops need at least 2 axes, got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Softmax over axis 1.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, ch, inner) = channel_split(x.shape())?;
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for n in 0..outer {
        let base = n * ch * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for c in 0..ch {
                m = m.max(src[base + c * inner + i]);
            }
            let mut s = T::zero();
            for c in 0..ch {
                let e = (src[base + c * inner + i] - m).exp();
                out[base + c * inner + i] = e;
                s += e;
            }
            let inv = T::one() / s;
            for c in 0..ch {
                out[base + c * inner + i] *= inv;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Vector-Jacobian product of the channel softmax given its output `y`.
pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(y, grad, "softmax backward")?;
    let (outer, ch, inner) = channel_split(y.shape())?;
    let (p, g) = (y.data(), grad.data());
    let mut out = vec![T::zero(); y.len()];
    for n in 0..outer {
        let base = n * ch * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for c in 0..ch {
                let k = base + c * inner + i;
                dot += p[k] * g[k];
            }
            for c in 0..ch {
                let k = base + c * inner + i;
                out[k] = p[k] * (g[k] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out)
}

/// Concatenates along axis 1; all other axes must agree.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let (outer, _, inner) = channel_split(first.shape())?;
    let mut total = 0;
    for p in parts {
        let (o, c, i) = channel_split(p.shape())?;
        if o != outer || i != inner || p.shape()[2..] != first.shape()[2..] {
            return Err(shape_err!(
                "concat along channels: {:?} and {:?} disagree off the channel axis",
                first.shape(),
                p.shape()
            ));
        }
        total += c;
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for n in 0..outer {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[n * c * inner..(n + 1) * c * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    Tensor::new(&shape, out)
}

/// Channels `[start, start + count)` of axis 1.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    let (outer, ch, inner) = channel_split(x.shape())?;
    if count == 0 || start + count > ch {
        return Err(shape_err!(
            "channel slice [{}, {}) out of range for {:?}",
            start,
            start + count,
            x.shape()
        ));
    }
    let mut out = Vec::with_capacity(outer * count * inner);
    for n in 0..outer {
        let base = (n * ch + start) * inner;
        out.extend_from_slice(&x.data()[base..base + count * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = count;
    Tensor::new(&shape, out)
}

/// Concatenates along the last axis (depth for volumes).
pub fn concat_last<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("stack of zero tensors"))?;
    let nd = first.ndim();
    let lead = &first.shape()[..nd - 1];
    let mut total = 0;
    for p in parts {
        if p.ndim() != nd || &p.shape()[..nd - 1] != lead {
            return Err(shape_err!(
                "stack along last axis: {:?} and {:?} disagree",
                first.shape(),
                p.shape()
            ));
        }
        total += p.shape()[nd - 1];
    }
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let l = p.shape()[nd - 1];
            out.extend_from_slice(&p.data()[r * l..(r + 1) * l]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(&shape, out)
}

/// Entries `[start, start + count)` of the last axis.
pub fn slice_last<T: Real>(x: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let l = x.shape()[nd - 1];
    if count == 0 || start + count > l {
        return Err(shape_err!(
            "last-axis slice [{}, {}) out of range for {:?}",
            start,
            start + count,
            x.shape()
        ));
    }
    let rows = x.len() / l;
    let mut out = Vec::with_capacity(rows * count);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * l + start..r * l + start + count]);
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 1] = count;
    Tensor::new(&shape, out)
}

/// `matrix [R, C] * vector [C] -> [R]`.
pub fn matvec<T: Real>(matrix: &Tensor<T>, vector: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = match *matrix.shape() {
        [r, c] => (r, c),
        _ => return Err(shape_err!("matvec matrix must be 2-d, got {:?}", matrix.shape())),
    };
    if vector.len() != c {
        return Err(shape_err!(
            "matvec: matrix {:?} and vector {:?} are incompatible",
            matrix.shape(),
            vector.shape()
        ));
    }
    let m = matrix.data();
    let v = vector.data();
    let out = (0..r)
        .map(|i| m[i * c..(i + 1) * c].iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect();
    Tensor::new(&[r], out)
}

/// Returns `(grad_matrix, grad_vector)`. With `transposed_rule` the vector
/// gradient uses `M g` instead of `M^T g`, which is only useful as a mutation
/// probe for gradient checking.
pub fn matvec_backward<T: Real>(
    matrix: &Tensor<T>,
    vector: &Tensor<T>,
    grad: &Tensor<T>,
    transposed_rule: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (r, c) = (matrix.shape()[0], matrix.shape()[1]);
    let m = matrix.data();
    let g = grad.data();
    let gm = Tensor::from_fn(&[r, c], |k| g[k / c] * vector.data()[k % c])?;
    let gv = if transposed_rule {
        if r != c {
            return Err(shape_err!("transposed matvec rule needs a square matrix"));
        }
        Tensor::from_fn(&[c], |j| (0..r).map(|i| m[j * c + i] * g[i]).sum())?
    } else {
        Tensor::from_fn(&[c], |j| (0..r).map(|i| m[i * c + j] * g[i]).sum())?
    };
    Ok((gm, gv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f64>::full(&[2, 5, 3, 1, 2], 0.7).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f32>::from_fn(&[2, 4, 3, 2, 2], |i| ((i * 37) % 11) as f32 - 5.0).unwrap();
        let y = softmax_channels(&x).unwrap();
        for n in 0..2 {
            for i in 0..12 {
                let s: f32 = (0..4).map(|c| y.data()[(n * 4 + c) * 12 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 2, 2, 2], |i| i as f32).unwrap();
        let b = Tensor::<f32>::from_fn(&[2, 3, 2, 2, 2], |i| -(i as f32)).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape()[1], 5);
        assert_eq!(slice_channels(&c, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&c, 2, 3).unwrap(), b);
        let bad = Tensor::<f32>::zeros(&[2, 3, 2, 2, 1]).unwrap();
        let e = concat_channels(&[&a, &bad]).unwrap_err();
        let msg = alloc::format!("{e}");
        assert!(msg.contains("[2, 2, 2, 2, 2]") && msg.contains("[2, 3, 2, 2, 1]"));
    }

    #[test]
    fn depth_slices_stack_back() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 2, 3, 4], |i| i as f32).unwrap();
        let slices: Vec<_> = (0..4).map(|d| slice_last(&x, d, 1).unwrap()).collect();
        let refs: Vec<_> = slices.iter().collect();
        assert_eq!(concat_last(&refs).unwrap(), x);
    }

    #[test]
    fn identity_matvec() {
        let eye = Tensor::<f64>::from_fn(&[3, 3], |k| if k / 3 == k % 3 { 1.0 } else { 0.0 }).unwrap();
        let v = Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(matvec(&eye, &v).unwrap(), v);
        let bad = Tensor::<f64>::zeros(&[4]).unwrap();
        assert!(matvec(&eye, &bad).is_err());
    }

    #[test]
    fn relu_is_nonnegative_and_sigmoid_stable() {
        let x = Tensor::<f32>::new(&[4], vec![-3.0, 0.0, 2.0, -0.5]).unwrap();
        assert!(relu(&x).data().iter().all(|&v| v >= 0.0));
        let big = Tensor::<f32>::new(&[2], vec![-200.0, 200.0]).unwrap();
        let s = sigmoid(&big);
        assert!(s.data()[0] >= 0.0 && s.data()[0] < 1e-30 && s.data()[1] == 1.0);
    }
}
