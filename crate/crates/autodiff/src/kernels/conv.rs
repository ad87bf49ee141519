//! 3D convolution (cross-correlation) via im2col + gemm.
//!
//! The column matrix for one sample has one row per `(c, kz, ky, kx)` tap and
//! one column per output voxel, so the forward pass is a single
//! `[K, C*kd*kh*kw] x [C*kd*kh*kw, D'*H'*W']` product. Backward recomputes
//! the columns rather than keeping them alive on the tape.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        const OP: &str = "conv3d";
        let [_, c, d, h, w] = match *input_shape {
            [n, c, d, h, w] => [n, c, d, h, w],
            _ => return Err(shape_err(OP, format!("input must be [N,C,D,H,W], got {input_shape:?}"))),
        };
        let [k, wc, kd, kh, kw] = match *weight_shape {
            [k, wc, kd, kh, kw] => [k, wc, kd, kh, kw],
            _ => return Err(shape_err(OP, format!("weight must be [K,C,kd,kh,kw], got {weight_shape:?}"))),
        };
        if wc != c {
            return Err(shape_err(
                OP,
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if stride.contains(&0) {
            return Err(crate::error::arg_err(OP, "stride components must be >= 1"));
        }
        let input = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding[a];
            if kernel[a] > padded {
                return Err(shape_err(
                    OP,
                    format!(
                        "kernel {:?} does not fit padded input {:?} on axis {a}",
                        kernel, input
                    ),
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeometry {
            in_channels: c,
            out_channels: k,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }
}

/// Range of output indices `o` for which `o * stride + k - pad` lands inside
/// `[0, len)`.
fn valid_range(len: usize, k: usize, stride: usize, pad: usize, out: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    let s = stride as isize;
    // o * s >= pad - k
    let lo_num = pad - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    // o * s <= len - 1 + pad - k
    let hi_num = len as isize - 1 + pad - k;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let lo = lo.min(out as isize);
    let hi = (hi + 1).clamp(lo, out as isize);
    (lo as usize, hi as usize)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (zlo, zhi) = valid_range(id, kz, sd, pd, od);
            for ky in 0..kh {
                let (ylo, yhi) = valid_range(ih, ky, sh, ph, oh);
                for kx in 0..kw {
                    let (xlo, xhi) = valid_range(iw, kx, sw, pw, ow);
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.fill(T::zero());
                    for oz in zlo..zhi {
                        let iz = oz * sd + kz - pd;
                        for oy in ylo..yhi {
                            let iy = oy * sh + ky - ph;
                            let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let out = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if sw == 1 {
                                let ix0 = xlo + kx - pw;
                                out[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    out[ox] = src[ox * sw + kx - pw];
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

fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (zlo, zhi) = valid_range(id, kz, sd, pd, od);
            for ky in 0..kh {
                let (ylo, yhi) = valid_range(ih, ky, sh, ph, oh);
                for kx in 0..kw {
                    let (xlo, xhi) = valid_range(iw, kx, sw, pw, ow);
                    let src = &col[row * p..(row + 1) * p];
                    for oz in zlo..zhi {
                        let iz = oz * sd + kz - pd;
                        for oy in ylo..yhi {
                            let iy = oy * sh + ky - ph;
                            let dst = &mut dxc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let s = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for ox in xlo..xhi {
                                dst[ox * sw + kx - pw] += s[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let k = g.out_channels;
    if let Some(b) = b {
        if b.shape() != [k] {
            return Err(shape_err(
                "conv3d",
                format!("bias shape {:?} does not match {k} output channels", b.shape()),
            ));
        }
    }
    let taps = g.taps();
    let p = g.out_voxels();
    let in_stride = g.in_channels * g.in_voxels();
    let mut out = vec![T::zero(); n * k * p];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); taps * p]
    };
    for s in 0..n {
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        let ys = &mut out[s * k * p..(s + 1) * k * p];
        T::gemm(k, taps, p, T::one(), w.data(), false, cols, false, T::zero(), ys);
        if let Some(b) = b {
            for (row, &bias) in ys.chunks_mut(p).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Tensor::from_vec(vec![n, k, g.output[0], g.output[1], g.output[2]], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeometry,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_x, need_w, need_b] = need;
    let n = x.shape()[0];
    let k = g.out_channels;
    let taps = g.taps();
    let p = g.out_voxels();
    let in_stride = g.in_channels * g.in_voxels();
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut db = need_b.then(|| vec![T::zero(); k]);
    let mut col = if g.is_pointwise() || !need_w {
        Vec::new()
    } else {
        vec![T::zero(); taps * p]
    };
    let mut dcol = if g.is_pointwise() || !need_x {
        Vec::new()
    } else {
        vec![T::zero(); taps * p]
    };
    for s in 0..n {
        let dys = &dy.data()[s * k * p..(s + 1) * k * p];
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            T::gemm(k, p, taps, T::one(), dys, false, cols, true, T::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            for (acc, row) in db.iter_mut().zip(dys.chunks(p)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_stride..(s + 1) * in_stride];
            if g.is_pointwise() {
                T::gemm(taps, k, p, T::one(), w.data(), true, dys, false, T::one(), dxs);
            } else {
                T::gemm(taps, k, p, T::one(), w.data(), true, dys, false, T::zero(), &mut dcol);
                col2im(&dcol, g, dxs);
            }
        }
    }
    let wrap = |v: Option<Vec<T>>, shape: &[usize]| {
        v.map(|d| Tensor::from_vec(shape.to_vec(), d).expect("gradient shape mirrors value"))
    };
    ConvGrads {
        input: wrap(dx, x.shape()),
        weight: wrap(dw, w.shape()),
        bias: wrap(db, &[k]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..7 {
            for ksize in 1..4 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        if ksize > len + 2 * pad {
                            continue;
                        }
                        let out = (len + 2 * pad - ksize) / stride + 1;
                        for k in 0..ksize {
                            let (lo, hi) = valid_range(len, k, stride, pad, out);
                            for o in 0..out {
                                let i = (o * stride + k) as isize - pad as isize;
                                let inside = i >= 0 && (i as usize) < len;
                                assert_eq!(inside, (lo..hi).contains(&o), "len {len} k {k} s {stride} p {pad} o {o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(&[1, 2, 16, 320, 320], &[4, 2, 3, 3, 3], [2, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(g.output, [8, 160, 160]);
        let g = ConvGeometry::new(&[1, 2, 5, 7, 9], &[4, 2, 3, 1, 3], [1, 2, 3], [0, 0, 1]).unwrap();
        assert_eq!(g.output, [3, 4, 3]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let err = ConvGeometry::new(&[1, 3, 4, 4, 4], &[2, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]).unwrap_err();
        assert!(matches!(err, crate::TensorError::ShapeMismatch { .. }));
    }
}
