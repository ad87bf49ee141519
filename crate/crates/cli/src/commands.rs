use std::path::{Path, PathBuf};
use std::time::Instant;

use hemoseg::config::{parse_triple, CascadeConfig, KvFile};
use hemoseg::data::dataset::{generate_cases, image_path, mask_path, read_index, scan_ids, write_dataset};
use hemoseg::data::{load_dataset, rvol, LesionClass, PhantomSpec, SegMask, VolumeImage};
use hemoseg::inference::{cascade_infer, default_stride, sliding_window_predict, RoiBox};
use hemoseg::metrics::evaluate_cases;
use hemoseg::model::{build_unet, Model};
use hemoseg::training::trainer::{RoiSampler, VolumeSampler};
use hemoseg::training::{load_model, train_cascade, train_stage, Checkpoint, TrainConfig, TrainOutputs, TrainReport};
use hemoseg::volumetry::{compare_methods, tada_measure, tada_volume_ml, voxel_volume_ml, CaseVolumes};
use hemoseg::Error;
use serde::Serialize;

use crate::manifest::{manifest_path, with_suffix, write_json, ManifestBuilder};
use crate::{CliError, CompareArgs, EvalArgs, GenPhantomsArgs, InferArgs, Method, Stage, TrainArgs, VolumeArgs};

type CliResult = Result<(), CliError>;

pub fn load_config(path: Option<&Path>) -> Result<KvFile, CliError> {
    match path {
        None => Ok(KvFile::new()),
        Some(p) if !p.is_file() => Err(CliError::Usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Ok(KvFile::parse(&std::fs::read_to_string(p)?)?),
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn gen_phantoms(mut kv: KvFile, a: &GenPhantomsArgs) -> CliResult {
    let mut mb = ManifestBuilder::new("gen-phantoms");
    if let Some(p) = &a.spec {
        require_file(p, "phantom spec")?;
        kv.merge(&KvFile::parse(&std::fs::read_to_string(p)?)?);
        mb.inputs.push(p.clone());
    }
    if let Some(s) = a.seed {
        kv.set("seed", s);
    }
    let spec = PhantomSpec::from_kv(&kv, &PhantomSpec::default())?;
    let cases = generate_cases(&spec, a.count)?;
    write_dataset(&a.out, &cases)?;
    spec.to_kv(&mut mb.config);
    mb.config.set("count", a.count);
    mb.seed = Some(spec.seed);
    mb.outputs.push(a.out.clone());
    mb.write(&manifest_path(&a.out, true))?;
    println!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn summarize(stage: &str, r: &TrainReport) {
    if let Some(e) = r.epochs.last() {
        println!(
            "{stage}: epoch {} loss {:.4} dice {:.4} ce {:.4} lr {:.3e}",
            e.epoch, e.loss_mean, e.dice_mean, e.ce_mean, e.lr_last
        );
    }
}

fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.jsonl")
}

pub fn train(mut kv: KvFile, a: &TrainArgs) -> CliResult {
    require_dir(&a.data, "data directory")?;
    if a.stage == Stage::Two && a.stage1.is_none() {
        return Err(CliError::Usage("--stage 2 needs the paired stage-1 checkpoint via --stage1".into()));
    }
    if a.resume.is_some() && a.stage == Stage::Cascade {
        return Err(CliError::Usage("--resume applies to a single stage".into()));
    }
    if let Some(v) = a.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = a.steps_per_epoch {
        kv.set("steps_per_epoch", v);
    }
    if let Some(v) = a.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = a.seed {
        kv.set("seed", v);
    }
    if let Some(v) = a.lr {
        kv.set("lr", v);
    }
    let cascade = CascadeConfig::from_kv(&kv, &CascadeConfig::toy())?;
    let cfg = TrainConfig::from_kv(&kv, &TrainConfig::toy())?;
    let cases = load_dataset(&a.data)?;

    let mut mb = ManifestBuilder::new("train");
    cascade.to_kv(&mut mb.config);
    cfg.to_kv(&mut mb.config);
    mb.seed = Some(cfg.seed);
    mb.inputs.push(a.data.clone());
    let resume = a.resume.as_ref().map(Checkpoint::read).transpose()?;
    mb.inputs.extend(a.resume.clone());

    match a.stage {
        Stage::Cascade => {
            let models = train_cascade(&cases, &cascade, &cfg, Some(&a.out))?;
            summarize("stage 1", &models.report1);
            summarize("stage 2", &models.report2);
            mb.outputs.push(a.out.join("stage1.hsck"));
            mb.outputs.push(a.out.join("stage2.hsck"));
            mb.write(&manifest_path(&a.out, true))?;
        }
        Stage::One => {
            let mut model = build_unet(&cascade.stage1, cfg.seed)?;
            let sampler = VolumeSampler::new(&cases, cascade.stage1.patch, &cfg)?;
            let outputs = TrainOutputs { checkpoint: Some(a.out.clone()), log: Some(log_path(&a.out)) };
            summarize("stage 1", &train_stage(&mut model, &sampler, &cfg, &outputs, resume.as_ref())?);
            mb.outputs.push(a.out.clone());
            mb.write(&manifest_path(&a.out, false))?;
        }
        Stage::Two => {
            let s1 = a.stage1.as_ref().expect("checked above");
            require_file(s1, "stage-1 checkpoint")?;
            load_model(&Checkpoint::read(s1)?)?;
            mb.inputs.push(s1.clone());
            // same seed offset as the cascade trainer
            let cfg2 = TrainConfig { seed: cfg.seed.wrapping_add(1), ..cfg.clone() };
            let mut model = build_unet(&cascade.stage2, cfg2.seed)?;
            let sampler = RoiSampler::new(&cases, &cascade, &cfg2)?;
            let outputs = TrainOutputs { checkpoint: Some(a.out.clone()), log: Some(log_path(&a.out)) };
            summarize("stage 2", &train_stage(&mut model, &sampler, &cfg2, &outputs, resume.as_ref())?);
            mb.outputs.push(a.out.clone());
            mb.write(&manifest_path(&a.out, false))?;
        }
    }
    Ok(())
}

/// Per-prediction sidecar, `<mask>.json`.
#[derive(Debug, Serialize)]
pub struct InferSidecar {
    pub input: PathBuf,
    pub output: PathBuf,
    /// `single` or `cascade`.
    pub mode: String,
    pub seconds: f64,
    pub patches: usize,
    pub roi: Option<RoiBox>,
    pub foreground_voxels: usize,
    pub volume_ml: f64,
}

enum Predictor {
    Single(Model<f32>),
    Cascade(Model<f32>, Model<f32>, CascadeConfig),
}

impl Predictor {
    fn run(&self, image: &VolumeImage, stride: Option<[usize; 3]>) -> hemoseg::Result<(SegMask, usize, Option<RoiBox>)> {
        match self {
            Predictor::Single(m) => {
                let stride = stride.unwrap_or_else(|| default_stride(m.config().patch));
                let (prob, grid) = sliding_window_predict(m, image, stride)?;
                Ok((prob.argmax(image.spacing())?, grid.origins.len(), None))
            }
            Predictor::Cascade(s1, s2, cfg) => {
                let stride = stride.unwrap_or_else(|| default_stride(s1.config().patch));
                let out = cascade_infer(s1, s2, image, cfg, stride)?;
                Ok((out.mask, out.patches, out.roi))
            }
        }
    }

    fn mode(&self) -> &'static str {
        match self {
            Predictor::Single(_) => "single",
            Predictor::Cascade(..) => "cascade",
        }
    }
}

fn infer_one(p: &Predictor, stride: Option<[usize; 3]>, input: &Path, output: &Path) -> hemoseg::Result<InferSidecar> {
    let image = rvol::read_image(input)?;
    let start = Instant::now();
    let (mask, patches, roi) = p.run(&image, stride)?;
    let seconds = start.elapsed().as_secs_f64();
    rvol::write_mask(output, &mask)?;
    let sidecar = InferSidecar {
        input: input.to_path_buf(),
        output: output.to_path_buf(),
        mode: p.mode().into(),
        seconds,
        patches,
        roi,
        foreground_voxels: mask.count(),
        volume_ml: voxel_volume_ml(&mask),
    };
    write_json(&with_suffix(output, ".json"), &sidecar)?;
    Ok(sidecar)
}

pub fn infer(kv: KvFile, a: &InferArgs) -> CliResult {
    for m in &a.model {
        require_file(m, "checkpoint")?;
    }
    let stride = a.stride.as_deref().map(|s| parse_triple(s, "--stride")).transpose()?;
    let mut models = a.model.iter().map(|p| load_model(&Checkpoint::read(p)?)).collect::<hemoseg::Result<Vec<_>>>()?;
    let mut mb = ManifestBuilder::new("infer");
    let predictor = if models.len() == 2 {
        let s2 = models.pop().expect("two models");
        let s1 = models.pop().expect("two models");
        let base = CascadeConfig { stage1: s1.config().clone(), stage2: s2.config().clone(), ..CascadeConfig::toy() };
        let mut cfg = CascadeConfig::from_kv(&kv, &base)?;
        cfg.stage1 = s1.config().clone();
        cfg.stage2 = s2.config().clone();
        cfg.to_kv(&mut mb.config);
        Predictor::Cascade(s1, s2, cfg)
    } else {
        let m = models.pop().expect("one model");
        m.config().to_kv("", &mut mb.config);
        Predictor::Single(m)
    };
    if let Some(s) = stride {
        mb.config.set("stride", hemoseg::config::triple(s));
    }
    mb.inputs.extend(a.model.iter().cloned());
    mb.inputs.push(a.input.clone());

    if a.input.is_dir() {
        std::fs::create_dir_all(&a.output)?;
        let ids = scan_ids(&a.input, "img")?;
        for id in &ids {
            let out = mask_path(&a.output, id);
            let s = infer_one(&predictor, stride, &image_path(&a.input, id), &out)?;
            println!("{id}: {} voxels, {:.3} ml, {:.3} s", s.foreground_voxels, s.volume_ml, s.seconds);
            mb.outputs.push(out);
        }
        mb.write(&manifest_path(&a.output, true))?;
    } else {
        require_file(&a.input, "input image")?;
        let s = infer_one(&predictor, stride, &a.input, &a.output)?;
        println!("{} voxels, {:.3} ml, {:.3} s ({} mode)", s.foreground_voxels, s.volume_ml, s.seconds, s.mode);
        mb.outputs.push(a.output.clone());
        mb.outputs.push(with_suffix(&a.output, ".json"));
        mb.write(&manifest_path(&a.output, false))?;
    }
    Ok(())
}

/// Mask pairs for ids present in both directories; any id missing on
/// either side is an error.
fn paired_masks(pred: &Path, gt: &Path) -> Result<Vec<(String, SegMask, SegMask)>, CliError> {
    require_dir(pred, "prediction directory")?;
    require_dir(gt, "ground-truth directory")?;
    let p = scan_ids(pred, "msk")?;
    let g = scan_ids(gt, "msk")?;
    let only_pred: Vec<&String> = p.iter().filter(|id| !g.contains(id)).collect();
    let only_gt: Vec<&String> = g.iter().filter(|id| !p.contains(id)).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::Data(format!(
            "case ids differ: missing predictions for {only_gt:?}, missing ground truth for {only_pred:?}"
        ))
        .into());
    }
    if p.is_empty() {
        return Err(Error::Data(format!("no case masks in {}", pred.display())).into());
    }
    p.into_iter()
        .map(|id| {
            let pm = rvol::read_mask(mask_path(pred, &id))?;
            let gm = rvol::read_mask(mask_path(gt, &id))?;
            Ok((id, pm, gm))
        })
        .collect()
}

pub fn eval(_kv: KvFile, a: &EvalArgs) -> CliResult {
    let pairs = paired_masks(&a.pred, &a.gt)?;
    let refs: Vec<(String, &SegMask, &SegMask)> = pairs.iter().map(|(id, p, g)| (id.clone(), p, g)).collect();
    let report = evaluate_cases(&refs)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred.join("metrics.json"));
    write_json(&out, &report)?;
    let m = report.mean;
    println!(
        "{} cases: DSC {:.4} IoU {:.4} precision {:.4} recall {:.4}",
        report.cases.len(),
        m.dsc,
        m.iou,
        m.precision,
        m.recall
    );
    let mut mb = ManifestBuilder::new("eval");
    mb.inputs = vec![a.pred.clone(), a.gt.clone()];
    mb.outputs.push(out.clone());
    mb.write(&manifest_path(&out, false))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct VolumeReport {
    mask: PathBuf,
    method: &'static str,
    /// `ok`, or `no lesion` for an empty mask.
    status: &'static str,
    volume_ml: f64,
    foreground_voxels: usize,
    a_mm: Option<f64>,
    b_mm: Option<f64>,
    c_mm: Option<f64>,
    slice_index: Option<usize>,
}

pub fn volume(_kv: KvFile, a: &VolumeArgs) -> CliResult {
    require_file(&a.mask, "mask")?;
    let mask = rvol::read_mask(&a.mask)?;
    let voxels = mask.count();
    let mut report = VolumeReport {
        mask: a.mask.clone(),
        method: match a.method {
            Method::Voxel => "voxel",
            Method::Tada => "tada",
        },
        status: if voxels == 0 { "no lesion" } else { "ok" },
        volume_ml: 0.0,
        foreground_voxels: voxels,
        a_mm: None,
        b_mm: None,
        c_mm: None,
        slice_index: None,
    };
    match a.method {
        Method::Voxel => report.volume_ml = voxel_volume_ml(&mask),
        Method::Tada if voxels > 0 => {
            let t = tada_measure(&mask)?;
            report.volume_ml = tada_volume_ml(&t);
            report.a_mm = Some(t.a_mm);
            report.b_mm = Some(t.b_mm);
            report.c_mm = Some(t.c_mm);
            report.slice_index = Some(t.slice_index);
        }
        Method::Tada => {}
    }
    let out = a.out.clone().unwrap_or_else(|| a.mask.with_extension("volume.json"));
    write_json(&out, &report)?;
    println!("{}: {} ({:.4} ml)", report.method, report.status, report.volume_ml);
    let mut mb = ManifestBuilder::new("volume");
    mb.config.set("method", report.method);
    mb.inputs.push(a.mask.clone());
    mb.outputs.push(out.clone());
    mb.write(&manifest_path(&out, false))?;
    Ok(())
}

pub fn compare_tada(_kv: KvFile, a: &CompareArgs) -> CliResult {
    let pairs = paired_masks(&a.pred, &a.gt)?;
    let classes = read_index(&a.gt)?.map(|ix| ix.cases).unwrap_or_default();
    let class_of = |id: &str| classes.iter().find(|e| e.id == id).map_or(LesionClass::Solitary, |e| e.class);
    let seconds_of = |id: &str| -> f64 {
        let sidecar = with_suffix(&mask_path(&a.pred, id), ".json");
        std::fs::read_to_string(sidecar)
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v["seconds"].as_f64())
            .unwrap_or(0.0)
    };
    let rows: Vec<CaseVolumes> = pairs
        .iter()
        .map(|(id, p, g)| CaseVolumes { id: id.clone(), pred: p, gt: g, class: class_of(id), seconds: seconds_of(id) })
        .collect();
    let cmp = compare_methods(&rows)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred.join("compare.json"));
    write_json(&out, &cmp)?;
    print!("{}", cmp.to_table());
    let mut mb = ManifestBuilder::new("compare-tada");
    mb.inputs = vec![a.pred.clone(), a.gt.clone()];
    mb.outputs.push(out.clone());
    mb.write(&manifest_path(&out, false))?;
    Ok(())
}
