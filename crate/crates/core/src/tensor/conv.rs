//! 3D cross-correlation through an im2col buffer and GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::{Spatial, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Real;

const AXES: [&str; 3] = ["height", "width", "depth"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: Spatial,
    pub kernel: Spatial,
    pub stride: Spatial,
    pub padding: Spatial,
    pub output: Spatial,
}

impl Conv3dGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: Spatial,
        padding: Spatial,
    ) -> Result<Self> {
        let [n, cin, h, w, d] = match *input_shape {
            [n, c, h, w, d] => [n, c, h, w, d],
            _ => return Err(shape_err!("conv3d input must be 5-d, got {:?}", input_shape)),
        };
        let [cout, kcin, kh, kw, kd] = match *kernel_shape {
            [a, b, c, e, f] => [a, b, c, e, f],
            _ => return Err(shape_err!("conv3d kernel must be 5-d, got {:?}", kernel_shape)),
        };
        if kcin != cin {
            return Err(shape_err!(
                "conv3d channel axis: kernel expects {} input channels, input has {}",
                kcin,
                cin
            ));
        }
        let input = [h, w, d];
        let kernel = [kh, kw, kd];
        let mut output = [0; 3];
        for axis in 0..3 {
            if stride[axis] == 0 {
                return Err(invalid!("conv3d stride along {} must be >= 1", AXES[axis]));
            }
            let padded = input[axis] + 2 * padding[axis];
            if padded < kernel[axis] {
                return Err(shape_err!(
                    "conv3d {} axis: kernel extent {} exceeds padded input extent {}",
                    AXES[axis],
                    kernel[axis],
                    padded
                ));
            }
            output[axis] = (padded - kernel[axis]) / stride[axis] + 1;
        }
        Ok(Self {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        [
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Valid output range along one axis for kernel offset `k`: output indices
    /// `o` with `0 <= o*stride + k - pad < in`.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis] as isize;
        let p = self.padding[axis] as isize;
        let n_in = self.input[axis] as isize;
        let n_out = self.output[axis] as isize;
        let off = k as isize - p;
        // o*s + off >= 0  =>  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // o*s + off <= n_in - 1  =>  o <= floor((n_in - 1 - off) / s)
        let hi_incl = if n_in - 1 - off < 0 {
            -1
        } else {
            (n_in - 1 - off) / s
        };
        let hi = (hi_incl + 1).min(n_out);
        let lo = lo.min(n_out);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Output rows per im2col tile, keeping a tile near `TILE_ELEMS` entries.
const TILE_ELEMS: usize = 1 << 18;

impl Conv3dGeometry {
    fn tile_rows(&self) -> usize {
        let per_row = self.patch_len() * self.output[1] * self.output[2];
        (TILE_ELEMS / per_row.max(1)).clamp(1, self.output[0])
    }
}

/// Scatters the receptive fields of output rows `y0..y1` of one sample into
/// `col` (`patch_len x (y1 - y0) * ow * od`).
fn im2col<T: Real>(g: &Conv3dGeometry, input: &[T], col: &mut [T], y0: usize, y1: usize) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [_, ow, od] = g.output;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.padding;
    let plane = ow * od;
    let tile = (y1 - y0) * plane;
    let zero = T::zero();
    let mut row = 0;
    for ci in 0..g.in_channels {
        let chan = &input[ci * h * w * d..(ci + 1) * h * w * d];
        for a in 0..kh {
            let (ha, hb) = g.valid_range(0, a);
            for b in 0..kw {
                let (wa, wb) = g.valid_range(1, b);
                for c in 0..kd {
                    let (da, db) = g.valid_range(2, c);
                    let dst = &mut col[row * tile..(row + 1) * tile];
                    for y in y0..y1 {
                        let seg = &mut dst[(y - y0) * plane..(y - y0 + 1) * plane];
                        if y < ha || y >= hb || wa >= wb || da >= db {
                            seg.fill(zero);
                            continue;
                        }
                        let iy = y * sh + a - ph;
                        seg[..wa * od].fill(zero);
                        seg[wb * od..].fill(zero);
                        for x in wa..wb {
                            let ix = x * sw + b - pw;
                            let src = &chan[(iy * w + ix) * d..(iy * w + ix + 1) * d];
                            let out = &mut seg[x * od..(x + 1) * od];
                            out[..da].fill(zero);
                            out[db..].fill(zero);
                            if sd == 1 {
                                let start = da + c - pd;
                                out[da..db].copy_from_slice(&src[start..start + (db - da)]);
                            } else {
                                for z in da..db {
                                    out[z] = src[z * sd + c - pd];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    debug_assert_eq!(row * tile, col.len());
}

/// Adjoint of [`im2col`]: accumulates a tile of `col` back into `grad_input`.
fn col2im<T: Real>(g: &Conv3dGeometry, col: &[T], grad_input: &mut [T], y0: usize, y1: usize) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [_, ow, od] = g.output;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.padding;
    let plane = ow * od;
    let tile = (y1 - y0) * plane;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let chan = &mut grad_input[ci * h * w * d..(ci + 1) * h * w * d];
        for a in 0..kh {
            let (ha, hb) = g.valid_range(0, a);
            for b in 0..kw {
                let (wa, wb) = g.valid_range(1, b);
                for c in 0..kd {
                    let (da, db) = g.valid_range(2, c);
                    let src = &col[row * tile..(row + 1) * tile];
                    for y in ha.max(y0)..hb.min(y1) {
                        let iy = y * sh + a - ph;
                        for x in wa..wb {
                            let ix = x * sw + b - pw;
                            let dst = &mut chan[(iy * w + ix) * d..(iy * w + ix + 1) * d];
                            let from = &src[(y - y0) * plane + x * od..(y - y0) * plane + (x + 1) * od];
                            if sd == 1 && da < db {
                                let start = da + c - pd;
                                for (o, &v) in dst[start..start + (db - da)].iter_mut().zip(&from[da..db]) {
                                    *o += v;
                                }
                            } else {
                                for z in da..db {
                                    dst[z * sd + c - pd] += from[z];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c` on row-major slices
/// with explicit leading dimensions; transposition by swapped strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    beta: T,
    c: (&mut [T], isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2));
    assert!(b.0.len() >= span(k, n, b.1, b.2));
    assert!(c.0.len() >= span(m, n, c.1, 1));
    // SAFETY: the assertions bound every element the kernel touches.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            1,
        );
    }
}

/// Cross-correlation of `input` `[N, Cin, H, W, D]` with `kernel`
/// `[Cout, Cin, kh, kw, kd]`, plus an optional per-output-channel bias.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: Spatial,
    padding: Spatial,
) -> Result<Tensor<T>> {
    let g = Conv3dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(shape_err!(
                "conv3d bias has {} entries for {} output channels",
                b.len(),
                g.out_channels
            ));
        }
    }
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let patch = g.patch_len();
    let cout = g.out_channels;
    let plane = g.output[1] * g.output[2];
    let rows = g.tile_rows();
    let mut out = vec![T::zero(); g.batch * cout * out_vol];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * rows * plane]
    };
    for n in 0..g.batch {
        let sample = &input.data()[n * g.in_channels * in_vol..(n + 1) * g.in_channels * in_vol];
        let dst = &mut out[n * cout * out_vol..(n + 1) * cout * out_vol];
        if g.is_pointwise() {
            gemm(
                cout,
                patch,
                out_vol,
                (kernel.data(), patch as isize, 1),
                (sample, out_vol as isize, 1),
                T::zero(),
                (dst, out_vol as isize),
            );
        } else {
            let mut y0 = 0;
            while y0 < g.output[0] {
                let y1 = (y0 + rows).min(g.output[0]);
                let tile = (y1 - y0) * plane;
                let cols = &mut col[..patch * tile];
                im2col(&g, sample, cols, y0, y1);
                gemm(
                    cout,
                    patch,
                    tile,
                    (kernel.data(), patch as isize, 1),
                    (cols, tile as isize, 1),
                    T::zero(),
                    (&mut dst[y0 * plane..], out_vol as isize),
                );
                y0 = y1;
            }
        }
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_exact_mut(out_vol).enumerate() {
                let bv = b.data()[co];
                for v in chunk {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&g.output_shape(), out)
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: Spatial,
    padding: Spatial,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Conv3dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(shape_err!(
            "conv3d backward: gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            g.output_shape()
        ));
    }
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let patch = g.patch_len();
    let cout = g.out_channels;
    let plane = g.output[1] * g.output[2];
    let rows = g.tile_rows();
    let mut grad_in = Tensor::zeros_like(input);
    let mut grad_k = Tensor::zeros_like(kernel);
    let mut grad_b = vec![T::zero(); cout];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * rows * plane]
    };
    for n in 0..g.batch {
        let sample = &input.data()[n * g.in_channels * in_vol..(n + 1) * g.in_channels * in_vol];
        let gout = &grad_out.data()[n * cout * out_vol..(n + 1) * cout * out_vol];
        for (co, chunk) in gout.chunks_exact(out_vol).enumerate() {
            grad_b[co] += chunk.iter().copied().sum::<T>();
        }
        let gin = &mut grad_in.data_mut()[n * g.in_channels * in_vol..(n + 1) * g.in_channels * in_vol];
        if g.is_pointwise() {
            // dK += gout [Cout, vol] x input^T [vol, Cin]
            gemm(
                cout,
                out_vol,
                patch,
                (gout, out_vol as isize, 1),
                (sample, 1, out_vol as isize),
                T::one(),
                (grad_k.data_mut(), patch as isize),
            );
            // dX = K^T [Cin, Cout] x gout [Cout, vol]
            gemm(
                patch,
                cout,
                out_vol,
                (kernel.data(), 1, patch as isize),
                (gout, out_vol as isize, 1),
                T::zero(),
                (gin, out_vol as isize),
            );
            continue;
        }
        let mut y0 = 0;
        while y0 < g.output[0] {
            let y1 = (y0 + rows).min(g.output[0]);
            let tile = (y1 - y0) * plane;
            let cols = &mut col[..patch * tile];
            im2col(&g, sample, cols, y0, y1);
            // dK += gout_tile [Cout, tile] x cols^T [tile, patch]
            gemm(
                cout,
                tile,
                patch,
                (&gout[y0 * plane..], out_vol as isize, 1),
                (cols, 1, tile as isize),
                T::one(),
                (grad_k.data_mut(), patch as isize),
            );
            // cols = K^T [patch, Cout] x gout_tile [Cout, tile]
            gemm(
                patch,
                cout,
                tile,
                (kernel.data(), 1, patch as isize),
                (&gout[y0 * plane..], out_vol as isize, 1),
                T::zero(),
                (cols, tile as isize),
            );
            col2im(&g, cols, gin, y0, y1);
            y0 = y1;
        }
    }
    Ok((grad_in, grad_k, Tensor::new(&[cout], grad_b)?))
}
