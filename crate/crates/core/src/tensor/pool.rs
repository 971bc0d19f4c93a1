use alloc::vec::Vec;

use super::{Spatial, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Real;

pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index that produced each output value.
    pub argmax: Vec<usize>,
}

/// Max-pooling with floor semantics. Ties go to the lowest flat index.
pub fn maxpool3d<T: Real>(x: &Tensor<T>, window: Spatial, stride: Spatial) -> Result<PoolOutput<T>> {
    let [n, c, h, w, d] = x.dims5()?;
    let sp = [h, w, d];
    let mut out_sp = [0; 3];
    for a in 0..3 {
        if window[a] == 0 || stride[a] == 0 {
            return Err(invalid!("maxpool window and stride must be >= 1"));
        }
        if window[a] > sp[a] {
            return Err(shape_err!(
                "maxpool window {:?} exceeds spatial extent {:?}",
                window,
                sp
            ));
        }
        out_sp[a] = (sp[a] - window[a]) / stride[a] + 1;
    }
    let [oh, ow, od] = out_sp;
    let mut out = Vec::with_capacity(n * c * oh * ow * od);
    let mut argmax = Vec::with_capacity(out.capacity());
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w * d;
        for y in 0..oh {
            for xx in 0..ow {
                for z in 0..od {
                    let mut best = T::neg_infinity();
                    let mut arg = usize::MAX;
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            for e in 0..window[2] {
                                let k = base
                                    + ((y * stride[0] + a) * w + xx * stride[1] + b) * d
                                    + z * stride[2]
                                    + e;
                                if arg == usize::MAX || src[k] > best {
                                    best = src[k];
                                    arg = k;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(arg);
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(&[n, c, oh, ow, od], out)?,
        argmax,
    })
}

pub fn maxpool3d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape)?;
    for (&k, &g) in argmax.iter().zip(grad.data()) {
        dx.data_mut()[k] += g;
    }
    Ok(dx)
}
