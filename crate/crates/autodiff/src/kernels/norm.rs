use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormOptions {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        BatchNormOptions {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Per-channel exponential moving averages used in eval mode.
///
/// Starts at mean 0 / variance 1; `updates` counts train-mode batches seen,
/// and eval mode refuses to run while it is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    fn update(&mut self, mean: &[T], var: &[T], momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = keep * *r + m * b;
        }
        self.updates += 1;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BnSaved<T> {
    pub mode: NormMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn layout(x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(shape_err("batch_norm3d", format!("need [N,C,...], got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let inner = x.shape()[2..].iter().product();
    Ok((n, c, inner))
}

pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: NormMode,
    running: &mut RunningStats<T>,
    opts: BatchNormOptions,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, inner) = layout(x)?;
    if gamma.shape() != [c] || beta.shape() != [c] || running.channels() != c {
        return Err(shape_err(
            "batch_norm3d",
            format!(
                "gamma {:?} / beta {:?} / running {} do not match {c} channels",
                gamma.shape(),
                beta.shape(),
                running.channels()
            ),
        ));
    }
    let eps = T::from_f64_lossy(opts.epsilon);
    let count = T::from_usize(n * inner).expect("count fits");
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    s += x.data()[off..off + inner].iter().copied().sum::<T>();
                }
                let mu = s / count;
                let mut q = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    for &v in &x.data()[off..off + inner] {
                        let d = v - mu;
                        q += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = q / count;
            }
            running.update(&mean, &var, opts.momentum);
            (mean, var)
        }
        NormMode::Eval => {
            if !running.is_initialized() {
                return Err(TensorError::UninitializedStatistics);
            }
            (running.mean.clone(), running.var.clone())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + inner {
                let h = (x.data()[i] - mu) * is;
                xhat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_vec(shape.clone(), y)?,
        BnSaved {
            mode,
            xhat: Tensor::from_vec(shape, xhat)?,
            inv_std,
        },
    ))
}

pub(crate) struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    dy: &Tensor<T>,
) -> BnGrads<T> {
    let (n, c, inner) = layout(dy).expect("gradient mirrors input");
    let xhat = saved.xhat.data();
    let g = dy.data();
    let count = T::from_usize(n * inner).expect("count fits");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            match saved.mode {
                NormMode::Eval => {
                    for i in off..off + inner {
                        dx[i] = g[i] * scale;
                    }
                }
                NormMode::Train => {
                    // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
                    let mean_dy = dbeta[ch] / count;
                    let mean_dy_xhat = dgamma[ch] / count;
                    for i in off..off + inner {
                        dx[i] = scale * (g[i] - mean_dy - xhat[i] * mean_dy_xhat);
                    }
                }
            }
        }
    }
    let shape = dy.shape().to_vec();
    BnGrads {
        input: Tensor::from_vec(shape, dx).expect("shape"),
        gamma: Tensor::from_vec(vec![c], dgamma).expect("shape"),
        beta: Tensor::from_vec(vec![c], dbeta).expect("shape"),
    }
}
