use std::io::Write;
use std::path::{Path, PathBuf};

use hemoseg_autodiff::{resize_trilinear, Graph, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CascadeConfig, KvFile};
use crate::data::augment::{augment, AugmentPolicy};
use crate::data::intensity::{hu_window_default, zscore_in_place};
use crate::data::{Case, SegMask, VolumeImage};
use crate::error::{config_err, ConfigError, Error, Result};
use crate::inference::RoiBox;
use crate::losses::{deep_supervision_loss, LabelBatch, LossReport};
use crate::model::{build_unet, Model};
use crate::training::checkpoint::{
    load_into, load_optimizer, load_scheduler, model_records, optimizer_records, scheduler_record, Checkpoint,
    Record,
};
use crate::training::optim::{AdamW, AdamWConfig};
use crate::training::schedule::CosineWarmRestarts;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: CosineWarmRestarts,
    pub adamw: AdamWConfig,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Standard augmentation policy when true, crop only otherwise.
    pub augment: bool,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 30,
            batch_size: 2,
            seed: 0,
            schedule: CosineWarmRestarts::default(),
            adamw: AdamWConfig::default(),
            checkpoint_every: 0,
            augment: true,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(ConfigError::Invalid("epochs, steps_per_epoch and batch_size must be positive".into()));
        }
        let s = &self.schedule;
        if !(s.eta_min >= 0.0 && s.eta_min <= s.eta_max && s.t_0 > 0.0 && s.t_mult >= 1.0) {
            return Err(ConfigError::Invalid(format!("invalid schedule {s:?}")));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile, base: &TrainConfig) -> std::result::Result<Self, ConfigError> {
        let cfg = TrainConfig {
            epochs: kv.get_parsed("epochs")?.unwrap_or(base.epochs),
            steps_per_epoch: kv.get_parsed("steps_per_epoch")?.unwrap_or(base.steps_per_epoch),
            batch_size: kv.get_parsed("batch_size")?.unwrap_or(base.batch_size),
            seed: kv.get_parsed("seed")?.unwrap_or(base.seed),
            schedule: CosineWarmRestarts {
                eta_max: kv.get_parsed("lr")?.unwrap_or(base.schedule.eta_max),
                eta_min: kv.get_parsed("eta_min")?.unwrap_or(base.schedule.eta_min),
                t_0: kv.get_parsed("t_0")?.unwrap_or(base.schedule.t_0),
                t_mult: kv.get_parsed("t_mult")?.unwrap_or(base.schedule.t_mult),
            },
            adamw: AdamWConfig {
                beta1: kv.get_parsed("beta1")?.unwrap_or(base.adamw.beta1),
                beta2: kv.get_parsed("beta2")?.unwrap_or(base.adamw.beta2),
                epsilon: kv.get_parsed("adam_epsilon")?.unwrap_or(base.adamw.epsilon),
                weight_decay: kv.get_parsed("weight_decay")?.unwrap_or(base.adamw.weight_decay),
            },
            checkpoint_every: kv.get_parsed("checkpoint_every")?.unwrap_or(base.checkpoint_every),
            augment: kv.get_parsed("augment")?.unwrap_or(base.augment),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.set("epochs", self.epochs);
        kv.set("steps_per_epoch", self.steps_per_epoch);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("lr", self.schedule.eta_max);
        kv.set("eta_min", self.schedule.eta_min);
        kv.set("t_0", self.schedule.t_0);
        kv.set("t_mult", self.schedule.t_mult);
        kv.set("beta1", self.adamw.beta1);
        kv.set("beta2", self.adamw.beta2);
        kv.set("adam_epsilon", self.adamw.epsilon);
        kv.set("weight_decay", self.adamw.weight_decay);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("augment", self.augment);
    }

    fn policy(&self, crop: Option<[usize; 3]>) -> AugmentPolicy {
        if self.augment {
            AugmentPolicy::standard(crop)
        } else {
            AugmentPolicy::none(crop)
        }
    }
}

/// RNG for batch slot `slot` of global step `step`; independent of any
/// earlier draw, so a resumed run sees the same samples.
pub fn sample_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 16) | slot as u64);
    rng
}

/// Produces normalized training patches and their labels.
pub trait PatchSampler {
    fn patch_shape(&self) -> [usize; 3];
    fn sample(&self, rng: &mut ChaCha8Rng, slot: usize) -> Result<(Vec<f32>, Vec<u8>)>;
}

struct Prepared {
    image: VolumeImage,
    mask: SegMask,
}

fn prepare(cases: &[Case]) -> Result<Vec<Prepared>> {
    if cases.is_empty() {
        return Err(config_err("dataset is empty"));
    }
    cases
        .iter()
        .map(|c| {
            c.mask.check_binary()?;
            if c.image.shape() != c.mask.shape() {
                return Err(Error::Data(format!("case {}: image and mask shapes differ", c.id)));
            }
            Ok(Prepared { image: hu_window_default(&c.image), mask: c.mask.clone() })
        })
        .collect()
}

/// Random augmented crops of whole volumes.
pub struct VolumeSampler {
    cases: Vec<Prepared>,
    policy: AugmentPolicy,
    patch: [usize; 3],
}

impl VolumeSampler {
    pub fn new(cases: &[Case], patch: [usize; 3], cfg: &TrainConfig) -> Result<Self> {
        Ok(VolumeSampler { cases: prepare(cases)?, policy: cfg.policy(Some(patch)), patch })
    }
}

impl PatchSampler for VolumeSampler {
    fn patch_shape(&self) -> [usize; 3] {
        self.patch
    }

    fn sample(&self, rng: &mut ChaCha8Rng, _slot: usize) -> Result<(Vec<f32>, Vec<u8>)> {
        let c = &self.cases[rng.random_range(0..self.cases.len())];
        let (img, msk) = augment(&c.image, &c.mask, rng, &self.policy)?;
        let mut x = img.into_data();
        zscore_in_place(&mut x);
        Ok((x, msk.into_data()))
    }
}

/// Ground-truth ROIs (margin plus per-side jitter) resized to the stage-2
/// input shape. Cases with an empty mask are skipped.
pub struct RoiSampler {
    cases: Vec<Prepared>,
    policy: AugmentPolicy,
    shape: [usize; 3],
    margin: f64,
    jitter: f64,
}

impl RoiSampler {
    pub fn new(cases: &[Case], cascade: &CascadeConfig, cfg: &TrainConfig) -> Result<Self> {
        let cases: Vec<Prepared> = prepare(cases)?.into_iter().filter(|p| p.mask.count() > 0).collect();
        if cases.is_empty() {
            return Err(config_err("no case has a non-empty mask for stage-2 training"));
        }
        Ok(RoiSampler {
            cases,
            policy: cfg.policy(None),
            shape: cascade.stage2_input_shape(),
            margin: cascade.roi_margin,
            jitter: cascade.roi_jitter,
        })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }
}

/// Tight box enlarged by `margin`, then each side moved by up to
/// `jitter * extent`, clamped to the volume.
pub fn jittered_box(mask: &SegMask, margin: f64, jitter: f64, rng: &mut ChaCha8Rng) -> Option<RoiBox> {
    let roi = RoiBox::around(mask, margin)?;
    if jitter == 0.0 {
        return Some(roi);
    }
    let (lo, hi) = mask.bounding_box()?;
    let shape = mask.shape();
    let mut out = roi;
    for a in 0..3 {
        let e = (hi[a] - lo[a]) as f64;
        let dl = (rng.random_range(-jitter..=jitter) * e).round() as isize;
        let dh = (rng.random_range(-jitter..=jitter) * e).round() as isize;
        let l = (roi.lo[a] as isize + dl).clamp(0, shape[a] as isize - 1) as usize;
        let h = (roi.hi[a] as isize + dh).clamp(l as isize + 1, shape[a] as isize) as usize;
        out.lo[a] = l;
        out.hi[a] = h;
    }
    Some(out)
}

/// Crop of `image` inside `roi`, trilinearly resized to `shape`.
pub fn resize_roi(image: &VolumeImage, roi: &RoiBox, shape: [usize; 3]) -> Result<Vec<f32>> {
    let crop = image.crop(roi.lo, roi.hi)?;
    let s = crop.shape();
    let t = Tensor::from_vec([1, 1, s[0], s[1], s[2]], crop.into_data())?;
    Ok(resize_trilinear(&t, shape)?.into_data())
}

impl PatchSampler for RoiSampler {
    fn patch_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn sample(&self, rng: &mut ChaCha8Rng, _slot: usize) -> Result<(Vec<f32>, Vec<u8>)> {
        let c = &self.cases[rng.random_range(0..self.cases.len())];
        let (img, msk) = augment(&c.image, &c.mask, rng, &self.policy)?;
        let (img, msk) = if msk.count() > 0 { (img, msk) } else { (c.image.clone(), c.mask.clone()) };
        let roi = jittered_box(&msk, self.margin, self.jitter, rng).expect("mask is non-empty");
        let mut x = resize_roi(&img, &roi, self.shape)?;
        zscore_in_place(&mut x);
        let m = resize_roi(&msk.map(f32::from), &roi, self.shape)?;
        Ok((x, m.into_iter().map(|v| u8::from(v >= 0.5)).collect()))
    }
}

/// Always the same patches: slot `i` gets `patches[i % len]`.
pub struct FixedSampler {
    pub patches: Vec<(Vec<f32>, Vec<u8>)>,
    pub shape: [usize; 3],
}

impl PatchSampler for FixedSampler {
    fn patch_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn sample(&self, _rng: &mut ChaCha8Rng, slot: usize) -> Result<(Vec<f32>, Vec<u8>)> {
        Ok(self.patches[slot % self.patches.len()].clone())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines file receiving one record per epoch.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr_last: f64,
    pub loss_mean: f64,
    pub dice_mean: f64,
    pub ce_mean: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// One entry per optimizer step run in this call.
    pub steps: Vec<LossReport>,
    pub epochs: Vec<EpochLog>,
}

/// Full training state as checkpoint records.
pub fn training_checkpoint(
    model: &Model<f32>,
    opt: &AdamW<f32>,
    cfg: &TrainConfig,
    next_epoch: usize,
) -> Checkpoint {
    let mut ckpt = Checkpoint { records: model_records(model) };
    ckpt.records.extend(optimizer_records(opt, model.param_names()));
    ckpt.push(scheduler_record(&cfg.schedule, next_epoch));
    let mut kv = KvFile::new();
    cfg.to_kv(&mut kv);
    ckpt.push(Record::text("train/config", &kv.to_text()));
    ckpt
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry).expect("serializable"))?;
    Ok(())
}

/// sample -> augment -> forward -> deep-supervision loss -> backward ->
/// AdamW, for `cfg.epochs` epochs (continuing from `resume` when given).
pub fn train_stage(
    model: &mut Model<f32>,
    sampler: &dyn PatchSampler,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    resume: Option<&Checkpoint>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let patch = sampler.patch_shape();
    if patch != model.config().patch {
        return Err(config_err(format!(
            "sampler patch {patch:?} differs from model patch {:?}",
            model.config().patch
        )));
    }
    let (mut opt, start_epoch) = match resume {
        Some(ckpt) => {
            load_into(model, ckpt)?;
            let opt = load_optimizer(ckpt, model.param_names())?;
            (opt, load_scheduler(ckpt)?.1)
        }
        None => (AdamW::new(cfg.adamw, model.params()), 0),
    };
    let spe = cfg.steps_per_epoch;
    let vox: usize = patch.iter().product();
    let mut report = TrainReport::default();
    let mut last: Option<LossReport> = None;
    for epoch in start_epoch..cfg.epochs {
        let (mut sum, mut dice, mut ce) = (0.0, 0.0, 0.0);
        let mut lr = cfg.schedule.eta_max;
        for s in 0..spe {
            let step = (epoch * spe + s) as u64;
            lr = cfg.schedule.lr(epoch as f64 + s as f64 / spe as f64);
            let mut xs = Vec::with_capacity(cfg.batch_size * vox);
            let mut ys = Vec::with_capacity(cfg.batch_size * vox);
            for slot in 0..cfg.batch_size {
                let (x, y) = sampler.sample(&mut sample_rng(cfg.seed, step, slot), slot)?;
                xs.extend(x);
                ys.extend(y);
            }
            let n = cfg.batch_size;
            let x = Tensor::from_vec([n, 1, patch[0], patch[1], patch[2]], xs)?;
            let labels = LabelBatch::new([n, patch[0], patch[1], patch[2]], ys)?;
            let diag = |e: Error, last: &Option<LossReport>| match e {
                Error::Tensor(TensorError::NonFinite { op }) => Error::NonFinite {
                    step,
                    lr,
                    components: format!(
                        "{op} produced a non-finite value; previous step: {}",
                        last.as_ref().map_or("none".into(), LossReport::describe)
                    ),
                },
                other => other,
            };

            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = model.forward_train(&mut g, xv).map_err(|e| diag(e, &last))?;
            let (loss, lr_report) = deep_supervision_loss(&mut g, &out, &labels).map_err(|e| diag(e, &last))?;
            if !lr_report.total.is_finite() {
                return Err(Error::NonFinite { step, lr, components: lr_report.describe() });
            }
            g.backward(loss)?;
            let grads = model.gradients(&g, &out);
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    lr,
                    components: format!("non-finite gradient; loss {}", lr_report.describe()),
                });
            }
            opt.step(model.params_mut(), &grads, lr)?;
            sum += lr_report.total;
            dice += lr_report.final_dice();
            ce += lr_report.per_level.first().map_or(0.0, |l| l.ce);
            report.steps.push(lr_report.clone());
            last = Some(lr_report);
        }
        let entry = EpochLog {
            epoch,
            steps: spe,
            lr_last: lr,
            loss_mean: sum / spe as f64,
            dice_mean: dice / spe as f64,
            ce_mean: ce / spe as f64,
        };
        if let Some(path) = &outputs.log {
            append_log(path, &entry)?;
        }
        report.epochs.push(entry);
        let done = epoch + 1;
        let due = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        if let Some(path) = &outputs.checkpoint {
            if due || done == cfg.epochs {
                training_checkpoint(model, &opt, cfg, done).write(path)?;
            }
        }
    }
    Ok(report)
}

pub struct CascadeModels {
    pub stage1: Model<f32>,
    pub stage2: Model<f32>,
    pub report1: TrainReport,
    pub report2: TrainReport,
}

/// Trains stage 1 on volume crops and stage 2 on ground-truth ROIs, with
/// independent weights. Writes `stage1.hsck` / `stage2.hsck` (and
/// `stage{1,2}.log.jsonl`) under `out_dir` when given.
pub fn train_cascade(
    cases: &[Case],
    cascade: &CascadeConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CascadeModels> {
    cascade.validate()?;
    let outputs = |stage: u8| TrainOutputs {
        checkpoint: out_dir.map(|d| d.join(format!("stage{stage}.hsck"))),
        log: out_dir.map(|d| d.join(format!("stage{stage}.log.jsonl"))),
    };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut stage1 = build_unet(&cascade.stage1, cfg.seed)?;
    let sampler1 = VolumeSampler::new(cases, cascade.stage1.patch, cfg)?;
    let report1 = train_stage(&mut stage1, &sampler1, cfg, &outputs(1), None)?;

    let cfg2 = TrainConfig { seed: cfg.seed.wrapping_add(1), ..cfg.clone() };
    let mut stage2 = build_unet(&cascade.stage2, cfg2.seed)?;
    let sampler2 = RoiSampler::new(cases, cascade, &cfg2)?;
    let report2 = train_stage(&mut stage2, &sampler2, &cfg2, &outputs(2), None)?;
    Ok(CascadeModels { stage1, stage2, report1, report2 })
}
