//! Soft Dice and cross-entropy on channel-softmax probabilities, and their
//! unweighted sum over supervised decoder levels.

use hemoseg_autodiff::{CustomOp, Graph, Scalar, Tensor, TensorError, Var};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ForwardOutput;

pub const DICE_EPSILON: f64 = 1e-5;
pub const CE_CLAMP: f64 = 1e-12;

/// Integer class labels for a batch, `[N, D, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub shape: [usize; 4],
    pub data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Tensor(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: shape.iter().product(),
                got: data.len(),
            }));
        }
        Ok(LabelBatch { shape, data })
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    /// `[N, classes, D, H, W]` one-hot encoding.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Result<Tensor<T>> {
        let [n, d, h, w] = self.shape;
        let inner = d * h * w;
        let mut out = vec![T::zero(); n * classes * inner];
        for b in 0..n {
            for (i, &l) in self.data[b * inner..(b + 1) * inner].iter().enumerate() {
                let l = l as usize;
                if l >= classes {
                    return Err(label_range(l, classes));
                }
                out[(b * classes + l) * inner + i] = T::one();
            }
        }
        Ok(Tensor::from_vec([n, classes, d, h, w], out)?)
    }
}

fn label_range(l: usize, classes: usize) -> Error {
    Error::Tensor(TensorError::InvalidArgument {
        op: "ce_loss",
        detail: format!("target index {l} outside 0..{classes}"),
    })
}

fn check_prob_shape(op: &'static str, prob: &[usize], spatial: [usize; 4]) -> Result<(usize, usize, usize)> {
    if prob.len() != 5 || prob[0] != spatial[0] || prob[2..] != spatial[1..] || prob[1] < 2 {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op,
            detail: format!("probabilities {prob:?} vs target [N,D,H,W] = {spatial:?}"),
        }));
    }
    Ok((prob[0], prob[1], prob[2] * prob[3] * prob[4]))
}

struct DiceOp {
    target: Vec<f64>,
    epsilon: f64,
    intersection: f64,
    denominator: f64,
}

impl<T: Scalar> CustomOp<T> for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> hemoseg_autodiff::Result<Vec<Option<Tensor<T>>>> {
        let prob = inputs[0];
        let s = prob.shape();
        let (n, c, inner) = (s[0], s[1], s[2] * s[3] * s[4]);
        let go = grad_output.item().as_f64();
        let den = self.denominator;
        let num = 2.0 * self.intersection + self.epsilon;
        let mut grad = vec![T::zero(); prob.len()];
        for b in 0..n {
            let off = (b * c + 1) * inner;
            for i in 0..inner {
                let g = self.target[b * inner + i];
                grad[off + i] = T::from_f64_lossy(-go * (2.0 * g * den - num) / (den * den));
            }
        }
        Ok(vec![Some(Tensor::from_vec(s.to_vec(), grad)?)])
    }
}

/// Batch soft Dice on channel 1:
/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` with sums over the whole
/// batch. `target_onehot` has the same shape as `prob`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, prob: Var, target_onehot: &Tensor<T>, epsilon: f64) -> Result<Var> {
    let p = g.value(prob);
    if p.shape() != target_onehot.shape() || p.rank() != 5 || p.shape()[1] < 2 {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "dice_loss",
            detail: format!("{:?} vs {:?}", p.shape(), target_onehot.shape()),
        }));
    }
    let s = p.shape();
    let (n, c, inner) = (s[0], s[1], s[2] * s[3] * s[4]);
    let mut target = Vec::with_capacity(n * inner);
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for b in 0..n {
        let off = (b * c + 1) * inner;
        for i in 0..inner {
            let pv = p.data()[off + i].as_f64();
            let gv = target_onehot.data()[off + i].as_f64();
            inter += pv * gv;
            sp += pv;
            sg += gv;
            target.push(gv);
        }
    }
    let den = sp + sg + epsilon;
    let value = 1.0 - (2.0 * inter + epsilon) / den;
    let op = DiceOp { target, epsilon, intersection: inter, denominator: den };
    Ok(g.custom(&[prob], Tensor::scalar(T::from_f64_lossy(value)), op)?)
}

struct CeOp {
    labels: Vec<u8>,
}

impl<T: Scalar> CustomOp<T> for CeOp {
    fn name(&self) -> &'static str {
        "ce_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> hemoseg_autodiff::Result<Vec<Option<Tensor<T>>>> {
        let prob = inputs[0];
        let s = prob.shape();
        let (n, c, inner) = (s[0], s[1], s[2] * s[3] * s[4]);
        let scale = grad_output.item().as_f64() / (n * inner) as f64;
        let mut grad = vec![T::zero(); prob.len()];
        for b in 0..n {
            for i in 0..inner {
                let idx = (b * c + self.labels[b * inner + i] as usize) * inner + i;
                let p = prob.data()[idx].as_f64();
                if p > CE_CLAMP {
                    grad[idx] = T::from_f64_lossy(-scale / p);
                }
            }
        }
        Ok(vec![Some(Tensor::from_vec(s.to_vec(), grad)?)])
    }
}

/// Mean over voxels of `-ln max(p[target], 1e-12)`.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, prob: Var, target: &LabelBatch) -> Result<Var> {
    let p = g.value(prob);
    let (n, c, inner) = check_prob_shape("ce_loss", p.shape(), target.shape)?;
    let mut acc = 0.0;
    for b in 0..n {
        for i in 0..inner {
            let l = target.data[b * inner + i] as usize;
            if l >= c {
                return Err(label_range(l, c));
            }
            acc -= p.data()[(b * c + l) * inner + i].as_f64().max(CE_CLAMP).ln();
        }
    }
    let value = acc / (n * inner) as f64;
    let op = CeOp { labels: target.data.clone() };
    Ok(g.custom(&[prob], Tensor::scalar(T::from_f64_lossy(value)), op)?)
}

/// Nearest-neighbour label downsampling by integer factors; output voxel
/// `i` takes input voxel `i * f + f / 2` (the centre of its cell).
pub fn downsample_nearest(labels: &LabelBatch, target: [usize; 3]) -> Result<LabelBatch> {
    let [n, d, h, w] = labels.shape;
    let src = [d, h, w];
    let mut f = [0; 3];
    for a in 0..3 {
        if target[a] == 0 || src[a] % target[a] != 0 {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "deep_supervision_loss",
                detail: format!("label extent {src:?} is not an integer multiple of {target:?}"),
            }));
        }
        f[a] = src[a] / target[a];
    }
    let [td, th, tw] = target;
    let mut out = Vec::with_capacity(n * td * th * tw);
    for b in 0..n {
        for z in 0..td {
            let sz = z * f[0] + f[0] / 2;
            for y in 0..th {
                let sy = y * f[1] + f[1] / 2;
                let row = ((b * d + sz) * h + sy) * w;
                for x in 0..tw {
                    out.push(labels.data[row + x * f[2] + f[2] / 2]);
                }
            }
        }
    }
    LabelBatch::new([n, td, th, tw], out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelLoss {
    pub level: usize,
    pub dice: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_level: Vec<LevelLoss>,
}

impl LossReport {
    pub fn final_dice(&self) -> f64 {
        self.per_level.iter().find(|l| l.level == 0).map_or(f64::NAN, |l| l.dice)
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .per_level
            .iter()
            .map(|l| format!("level {}: dice {:.6} ce {:.6}", l.level, l.dice, l.ce))
            .collect();
        format!("total {:.6} ({})", self.total, parts.join("; "))
    }
}

/// Dice + CE at the final head and every auxiliary head, summed without
/// weights. Auxiliary targets come from [`downsample_nearest`].
pub fn deep_supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    target: &LabelBatch,
) -> Result<(Var, LossReport)> {
    let mut heads = vec![(0, out.final_prob)];
    heads.extend(out.aux.iter().copied());
    let mut total: Option<Var> = None;
    let mut per_level = Vec::with_capacity(heads.len());
    for (level, prob) in heads {
        let s = g.value(prob).shape().to_vec();
        let spatial = [s[2], s[3], s[4]];
        let labels = if spatial == target.spatial() { target.clone() } else { downsample_nearest(target, spatial)? };
        let onehot = labels.one_hot::<T>(s[1])?;
        let dice = dice_loss(g, prob, &onehot, DICE_EPSILON)?;
        let ce = ce_loss(g, prob, &labels)?;
        per_level.push(LevelLoss {
            level,
            dice: g.value(dice).item().as_f64(),
            ce: g.value(ce).item().as_f64(),
        });
        let pair = g.add(dice, ce)?;
        total = Some(match total {
            Some(t) => g.add(t, pair)?,
            None => pair,
        });
    }
    let total = total.expect("at least the final head");
    let report = LossReport { total: g.value(total).item().as_f64(), per_level };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prob_of(fg: &[f64], shape: [usize; 4]) -> Tensor<f64> {
        let [n, d, h, w] = shape;
        let inner = d * h * w;
        let mut data = vec![0.0; n * 2 * inner];
        for b in 0..n {
            for i in 0..inner {
                data[(b * 2 + 1) * inner + i] = fg[b * inner + i];
                data[b * 2 * inner + i] = 1.0 - fg[b * inner + i];
            }
        }
        Tensor::from_vec([n, 2, d, h, w], data).unwrap()
    }

    #[test]
    fn dice_uniform_half_matches_formula() {
        let shape = [1, 2, 5, 10];
        let n = 100;
        let k = 17;
        let labels = LabelBatch::new(shape, (0..n).map(|i| u8::from(i < k)).collect()).unwrap();
        let mut g = Graph::new();
        let p = g.constant(prob_of(&vec![0.5; n], shape));
        let l = dice_loss(&mut g, p, &labels.one_hot(2).unwrap(), DICE_EPSILON).unwrap();
        let (k, n) = (k as f64, n as f64);
        let want = 1.0 - (k + DICE_EPSILON) / (0.5 * n + k + DICE_EPSILON);
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn ce_of_uniform_is_ln2() {
        let shape = [2, 1, 2, 3];
        let labels = LabelBatch::new(shape, vec![0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 0]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(prob_of(&[0.5; 12], shape));
        let l = ce_loss(&mut g, p, &labels).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let labels = LabelBatch::new([1, 1, 1, 2], vec![0, 2]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(prob_of(&[0.5; 2], [1, 1, 1, 2]));
        assert!(ce_loss(&mut g, p, &labels).is_err());
    }

    #[test]
    fn downsample_rejects_non_integer_ratio() {
        let labels = LabelBatch::new([1, 2, 4, 6], vec![0; 48]).unwrap();
        assert!(downsample_nearest(&labels, [1, 2, 4]).is_err());
        assert_eq!(downsample_nearest(&labels, [1, 2, 3]).unwrap().shape, [1, 1, 2, 3]);
    }
}
