//! Separable trilinear resampling with the half-pixel (align-corners-false)
//! convention: output index `i` samples input coordinate
//! `(i + 0.5) * in / out - 0.5`, clamped at the low edge.

use crate::error::{arg_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(in_len - 1);
            let h = (l + 1).min(in_len - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        AxisTable { lo, hi, frac }
    }
}

/// Interpolates along the middle axis of a `[outer, in_len, inner]` buffer.
fn interp_axis<T: Scalar>(src: &[T], outer: usize, in_len: usize, inner: usize, t: &AxisTable) -> Vec<T> {
    let out_len = t.lo.len();
    let mut dst = vec![T::zero(); outer * out_len * inner];
    let frac: Vec<T> = t.frac.iter().map(|&f| T::from_f64_lossy(f)).collect();
    for o in 0..outer {
        let s = &src[o * in_len * inner..(o + 1) * in_len * inner];
        let d = &mut dst[o * out_len * inner..(o + 1) * out_len * inner];
        for i in 0..out_len {
            let a = &s[t.lo[i] * inner..(t.lo[i] + 1) * inner];
            let b = &s[t.hi[i] * inner..(t.hi[i] + 1) * inner];
            let w = frac[i];
            for ((dv, &av), &bv) in d[i * inner..(i + 1) * inner].iter_mut().zip(a).zip(b) {
                // lerp in this form reproduces constants exactly
                *dv = av + w * (bv - av);
            }
        }
    }
    dst
}

/// Adjoint of [`interp_axis`].
fn interp_axis_adjoint<T: Scalar>(
    grad: &[T],
    outer: usize,
    in_len: usize,
    inner: usize,
    t: &AxisTable,
) -> Vec<T> {
    let out_len = t.lo.len();
    let mut dsrc = vec![T::zero(); outer * in_len * inner];
    let frac: Vec<T> = t.frac.iter().map(|&f| T::from_f64_lossy(f)).collect();
    for o in 0..outer {
        let g = &grad[o * out_len * inner..(o + 1) * out_len * inner];
        let d = &mut dsrc[o * in_len * inner..(o + 1) * in_len * inner];
        for i in 0..out_len {
            let w = frac[i];
            let gi = &g[i * inner..(i + 1) * inner];
            let (lo, hi) = (t.lo[i], t.hi[i]);
            for (j, &gv) in gi.iter().enumerate() {
                d[lo * inner + j] += (T::one() - w) * gv;
                d[hi * inner + j] += w * gv;
            }
        }
    }
    dsrc
}

fn tables(input: [usize; 3], output: [usize; 3]) -> [AxisTable; 3] {
    [
        AxisTable::new(input[0], output[0]),
        AxisTable::new(input[1], output[1]),
        AxisTable::new(input[2], output[2]),
    ]
}

/// Trilinear resize of `[N, C, D, H, W]` to the given spatial extent.
pub fn resize_trilinear<T: Scalar>(x: &Tensor<T>, output: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5("resize_trilinear")?;
    if output.contains(&0) {
        return Err(arg_err("resize_trilinear", "output extents must be positive"));
    }
    let [od, oh, ow] = output;
    let [td, th, tw] = tables([d, h, w], output);
    let nc = n * c;
    let step = interp_axis(x.data(), nc * d * h, w, 1, &tw);
    let step = interp_axis(&step, nc * d, h, ow, &th);
    let out = interp_axis(&step, nc, d, oh * ow, &td);
    Tensor::from_vec(vec![n, c, od, oh, ow], out)
}

pub(crate) fn resize_trilinear_backward<T: Scalar>(dy: &Tensor<T>, input: [usize; 3]) -> Tensor<T> {
    let [n, c, od, oh, ow] = dy.dims5("resize_trilinear").expect("gradient is 5-d");
    let [d, h, _w] = input;
    let [td, th, tw] = tables(input, [od, oh, ow]);
    let nc = n * c;
    let g = interp_axis_adjoint(dy.data(), nc, d, oh * ow, &td);
    let g = interp_axis_adjoint(&g, nc * d, h, ow, &th);
    let g = interp_axis_adjoint(&g, nc * d * h, input[2], 1, &tw);
    Tensor::from_vec(vec![n, c, input[0], input[1], input[2]], g).expect("adjoint shape")
}
