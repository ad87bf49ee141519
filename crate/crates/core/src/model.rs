//! Residual 3D encoder-decoder with per-level output heads.
//!
//! Encoder level `i` is one residual block: conv(3x3x3, strided by
//! `factors[i-1]` when `i > 0`) -> BN -> ReLU -> conv(3x3x3) -> BN, added to
//! an identity or 1x1x1 projected shortcut, then ReLU. Decoder level `i`
//! upsamples level `i+1` trilinearly by `factors[i]`, projects channels with
//! a 1x1x1 conv, concatenates the encoder skip and runs a residual block
//! back to `channels[i]`. Heads are 1x1x1 convs followed by a channel
//! softmax.

use hemoseg_autodiff::{BatchNormOptions, Graph, NormMode, RunningStats, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::UNet3DConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
    shortcut: Option<Conv>,
    down: [usize; 3],
}

#[derive(Debug, Clone, Copy)]
struct DecoderLevel {
    up: [usize; 3],
    proj: Conv,
    block: ResBlock,
}

/// Network parameters, batch-norm statistics and the layer wiring.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: UNet3DConfig,
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    stat_names: Vec<String>,
    encoder: Vec<ResBlock>,
    /// Indexed by level, `0..levels-1`.
    decoder: Vec<DecoderLevel>,
    heads: Vec<(usize, Conv)>,
    bn: BatchNormOptions,
}

/// Output handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Softmax probabilities at full resolution, `[N, 2, D, H, W]`.
    pub final_prob: Var,
    /// `(level, probabilities)` for the other supervised decoder levels,
    /// ascending by level, each at that level's native resolution.
    pub aux: Vec<(usize, Var)>,
    /// Graph handles of the parameters, aligned with [`Model::params`].
    pub params: Vec<Var>,
}

struct Builder<'a, T: Scalar> {
    model: &'a mut Model<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.model.params.push(value);
        self.model.param_names.push(name);
        self.model.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        let fan_in = (cin * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..cout * cin * k * k * k)
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.rng)))
            .collect();
        let w = Tensor::from_vec([cout, cin, k, k, k], data).expect("weight shape");
        let w = self.param(format!("{name}.w"), w);
        let b = bias.then(|| self.param(format!("{name}.b"), Tensor::zeros([cout])));
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.param(format!("{name}.gamma"), Tensor::ones([c]));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros([c]));
        self.model.stats.push(RunningStats::new(c));
        self.model.stat_names.push(name.to_string());
        Norm { gamma, beta, stats: self.model.stats.len() - 1 }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, down: [usize; 3]) -> ResBlock {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, false);
        let bn1 = self.norm(&format!("{name}.bn1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, false);
        let bn2 = self.norm(&format!("{name}.bn2"), cout);
        let shortcut = (cin != cout || down != [1, 1, 1])
            .then(|| self.conv(&format!("{name}.shortcut"), cin, cout, 1, true));
        ResBlock { conv1, bn1, conv2, bn2, shortcut, down }
    }
}

/// Builds a network with He-normal weights drawn from `seed`.
pub fn build_unet<T: Scalar>(config: &UNet3DConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let c = &config.channels;
    let mut model = Model {
        config: config.clone(),
        params: Vec::new(),
        param_names: Vec::new(),
        stats: Vec::new(),
        stat_names: Vec::new(),
        encoder: Vec::new(),
        decoder: Vec::new(),
        heads: Vec::new(),
        bn: BatchNormOptions::default(),
    };
    let mut encoder = Vec::new();
    let mut decoder = Vec::new();
    let mut heads = Vec::new();
    {
        let mut b = Builder { model: &mut model, rng: ChaCha8Rng::seed_from_u64(seed) };
        for level in 0..config.levels {
            let (cin, down) = if level == 0 {
                (config.in_channels, [1, 1, 1])
            } else {
                (c[level - 1], config.factors[level - 1])
            };
            encoder.push(b.block(&format!("enc{level}"), cin, c[level], down));
        }
        for level in 0..config.levels - 1 {
            let proj = b.conv(&format!("dec{level}.proj"), c[level + 1], c[level], 1, true);
            let block = b.block(&format!("dec{level}"), 2 * c[level], c[level], [1, 1, 1]);
            decoder.push(DecoderLevel { up: config.factors[level], proj, block });
        }
        for &level in &config.deep_supervision {
            heads.push((level, b.conv(&format!("head{level}"), c[level], config.out_channels, 1, true)));
        }
    }
    model.encoder = encoder;
    model.decoder = decoder;
    model.heads = heads;
    Ok(model)
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &UNet3DConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Train-mode forward pass: parameters are registered as trainable
    /// leaves and batch-norm statistics are updated.
    pub fn forward_train(&mut self, g: &mut Graph<T>, input: Var) -> Result<ForwardOutput> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.run(g, input, NormMode::Train, &mut stats);
        self.stats = stats;
        out
    }

    /// Eval-mode forward pass over constant parameters.
    pub fn forward_eval(&self, g: &mut Graph<T>, input: Var) -> Result<ForwardOutput> {
        let mut stats = self.stats.clone();
        self.run(g, input, NormMode::Eval, &mut stats)
    }

    /// Eval-mode final probabilities for a `[N, C, D, H, W]` batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let out = self.forward_eval(&mut g, x)?;
        Ok(g.value(out.final_prob).clone())
    }

    /// Reads parameter gradients after `backward`, aligned with `params`.
    pub fn gradients(&self, g: &Graph<T>, out: &ForwardOutput) -> Vec<Option<Tensor<T>>> {
        out.params.iter().map(|&v| g.grad(v).cloned()).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let ok = shape.len() == 5 && shape[1] == cfg.in_channels && shape[2..] == cfg.patch;
        if ok {
            Ok(())
        } else {
            Err(Error::Tensor(hemoseg_autodiff::TensorError::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "expected [N, {}, {}, {}, {}], got {shape:?}",
                    cfg.in_channels, cfg.patch[0], cfg.patch[1], cfg.patch[2]
                ),
            }))
        }
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        input: Var,
        mode: NormMode,
        stats: &mut [RunningStats<T>],
    ) -> Result<ForwardOutput> {
        self.check_input(g.value(input).shape())?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| match mode {
                NormMode::Train => g.param(p.clone()),
                NormMode::Eval => g.constant(p.clone()),
            })
            .collect();
        let ctx = Ctx { params: &params, mode, bn: self.bn };

        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = input;
        for block in &self.encoder {
            h = ctx.block(g, block, h, stats)?;
            skips.push(h);
        }
        let mut features = vec![None; self.config.levels];
        features[self.config.levels - 1] = Some(h);
        for level in (0..self.decoder.len()).rev() {
            let dec = &self.decoder[level];
            let up = g.upsample_trilinear(h, dec.up)?;
            let up = ctx.conv(g, dec.proj, up, [1; 3], [0; 3])?;
            let cat = g.concat_channels(skips[level], up)?;
            h = ctx.block(g, &dec.block, cat, stats)?;
            features[level] = Some(h);
        }

        let mut final_prob = None;
        let mut aux = Vec::new();
        for &(level, head) in &self.heads {
            let feat = features[level].expect("head level has features");
            let logits = ctx.conv(g, head, feat, [1; 3], [0; 3])?;
            let prob = g.softmax_channels(logits)?;
            if level == 0 {
                final_prob = Some(prob);
            } else {
                aux.push((level, prob));
            }
        }
        Ok(ForwardOutput {
            final_prob: final_prob.expect("level 0 head is validated"),
            aux,
            params,
        })
    }
}

struct Ctx<'a> {
    params: &'a [Var],
    mode: NormMode,
    bn: BatchNormOptions,
}

impl Ctx<'_> {
    fn conv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        c: Conv,
        x: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        Ok(g.conv3d(x, self.params[c.w], c.b.map(|b| self.params[b]), stride, pad)?)
    }

    fn norm<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        n: Norm,
        x: Var,
        stats: &mut [RunningStats<T>],
    ) -> Result<Var> {
        Ok(g.batch_norm3d(
            x,
            self.params[n.gamma],
            self.params[n.beta],
            self.mode,
            &mut stats[n.stats],
            self.bn,
        )?)
    }

    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &ResBlock,
        x: Var,
        stats: &mut [RunningStats<T>],
    ) -> Result<Var> {
        let p = self.params;
        let h = if b.down == [1, 1, 1] {
            self.conv(g, b.conv1, x, [1; 3], [1; 3])?
        } else {
            g.conv3d_strided_down(x, p[b.conv1.w], None, b.down)?
        };
        let h = self.norm(g, b.bn1, h, stats)?;
        let h = g.relu(h)?;
        let h = self.conv(g, b.conv2, h, [1; 3], [1; 3])?;
        let h = self.norm(g, b.bn2, h, stats)?;
        let skip = match b.shortcut {
            Some(s) => g.conv3d_strided_down(x, p[s.w], s.b.map(|i| p[i]), b.down)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNet3DConfig {
        UNet3DConfig {
            levels: 2,
            channels: vec![2, 3],
            factors: vec![[1, 2, 2]],
            patch: [2, 4, 4],
            deep_supervision: [0].into(),
            ..UNet3DConfig::toy()
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = build_unet::<f32>(&tiny(), 7).unwrap();
        let b = build_unet::<f32>(&tiny(), 7).unwrap();
        let c = build_unet::<f32>(&tiny(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = build_unet::<f32>(&UNet3DConfig::toy(), 0).unwrap();
        let mut names = m.param_names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.params().len());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut m = build_unet::<f32>(&tiny(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 2, 4, 8]));
        assert!(m.forward_train(&mut g, x).is_err());
    }
}
