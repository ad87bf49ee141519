//! Sliding-window prediction with overlap averaging and two-stage cascade
//! inference (coarse mask -> ROI crop/resize -> fine prediction -> paste).

use std::time::Instant;

use hemoseg_autodiff::{resize_trilinear, Tensor};
use serde::Serialize;

use crate::config::CascadeConfig;
use crate::data::augment::PAD_VALUE;
use crate::data::intensity::{hu_window_default, zscore_in_place};
use crate::data::{SegMask, Volume, VolumeImage};
use crate::error::{config_err, data_err, Result};
use crate::model::Model;

/// Window origins tiling a volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatchGrid {
    pub volume: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(volume: usize, window: usize, stride: usize) -> Vec<usize> {
    if volume <= window {
        return vec![0];
    }
    let last = volume - window;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

/// Origins at multiples of `stride` along each axis, plus one final origin
/// flush with the far boundary. An axis shorter than the window gets a single
/// origin at 0 and the window is padded.
pub fn decompose(volume: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<PatchGrid> {
    for a in 0..3 {
        if volume[a] == 0 || window[a] == 0 || stride[a] == 0 || stride[a] > window[a] {
            return Err(config_err(format!(
                "need 0 < stride <= window and a non-empty volume; got volume {volume:?}, window {window:?}, stride {stride:?}"
            )));
        }
    }
    let [od, oh, ow] = [0, 1, 2].map(|a| axis_origins(volume[a], window[a], stride[a]));
    let mut origins = Vec::with_capacity(od.len() * oh.len() * ow.len());
    for &z in &od {
        for &y in &oh {
            for &x in &ow {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(PatchGrid { volume, window, stride, origins })
}

/// Per-voxel class probabilities, channel-major `[C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    pub shape: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ProbVolume {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n: usize = self.shape.iter().product();
        &self.data[c * n..(c + 1) * n]
    }

    /// Argmax over channels; ties go to the lower class index.
    pub fn argmax(&self, spacing: [f64; 3]) -> Result<SegMask> {
        let n: usize = self.shape.iter().product();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Volume::new(self.shape, spacing, labels)
    }
}

/// Mean of all patch predictions covering each voxel. `patches[i]` holds
/// `[C, window]` values for `grid.origins[i]`; voxels of a patch outside
/// the volume are discarded.
pub fn recompose_average(patches: &[Vec<f32>], grid: &PatchGrid, channels: usize) -> Result<ProbVolume> {
    if patches.len() != grid.origins.len() {
        return Err(data_err(format!("{} patches for {} grid origins", patches.len(), grid.origins.len())));
    }
    let [d, h, w] = grid.volume;
    let [wd, wh, ww] = grid.window;
    let n = d * h * w;
    let wn = wd * wh * ww;
    let mut sum = vec![0.0f64; channels * n];
    let mut count = vec![0u32; n];
    for (p, o) in patches.iter().zip(&grid.origins) {
        if p.len() != channels * wn {
            return Err(data_err(format!("patch has {} values, expected {}", p.len(), channels * wn)));
        }
        for z in 0..wd.min(d - o[0]) {
            for y in 0..wh.min(h - o[1]) {
                for x in 0..ww.min(w - o[2]) {
                    let dst = ((o[0] + z) * h + o[1] + y) * w + o[2] + x;
                    let src = (z * wh + y) * ww + x;
                    count[dst] += 1;
                    for c in 0..channels {
                        sum[c * n + dst] += f64::from(p[c * wn + src]);
                    }
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(data_err(format!("voxel {i} is not covered by any patch")));
    }
    let data = (0..channels * n).map(|i| (sum[i] / f64::from(count[i % n])) as f32).collect();
    Ok(ProbVolume { shape: grid.volume, channels, data })
}

/// Class probabilities for one normalized `[1, 1, D, H, W]` patch.
pub trait PatchPredictor {
    fn window(&self) -> [usize; 3];
    fn channels(&self) -> usize;
    fn predict_patch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchPredictor for Model<f32> {
    fn window(&self) -> [usize; 3] {
        self.config().patch
    }

    fn channels(&self) -> usize {
        self.config().out_channels
    }

    fn predict_patch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(x)
    }
}

/// Half-window stride, rounded up to at least one voxel.
pub fn default_stride(window: [usize; 3]) -> [usize; 3] {
    window.map(|w| (w / 2).max(1))
}

/// Windows the raw HU image, tiles it, z-scores and predicts each patch,
/// and averages overlaps.
pub fn sliding_window_predict(
    predictor: &dyn PatchPredictor,
    image: &VolumeImage,
    stride: [usize; 3],
) -> Result<(ProbVolume, PatchGrid)> {
    let windowed = hu_window_default(image);
    let window = predictor.window();
    let grid = decompose(image.shape(), window, stride)?;
    let mut patches = Vec::with_capacity(grid.origins.len());
    for o in &grid.origins {
        let mut x = windowed.crop_padded(o.map(|v| v as isize), window, PAD_VALUE)?.into_data();
        zscore_in_place(&mut x);
        let t = Tensor::from_vec([1, 1, window[0], window[1], window[2]], x)?;
        patches.push(predictor.predict_patch(&t)?.into_data());
    }
    Ok((recompose_average(&patches, &grid, predictor.channels())?, grid))
}

/// Per-axis `[lo, hi)` voxel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoiBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl RoiBox {
    /// Tight box of the nonzero voxels with `floor(lo - m*e)` and
    /// `ceil(hi + m*e)` per axis (`e = hi - lo`), clamped to the volume.
    pub fn around(mask: &SegMask, margin: f64) -> Option<RoiBox> {
        let (lo, hi) = mask.bounding_box()?;
        let shape = mask.shape();
        let mut out = RoiBox { lo, hi };
        for a in 0..3 {
            let e = (hi[a] - lo[a]) as f64;
            out.lo[a] = (lo[a] as f64 - margin * e).floor().max(0.0) as usize;
            out.hi[a] = ((hi[a] as f64 + margin * e).ceil() as usize).min(shape[a]);
        }
        Some(out)
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        (self.lo[0]..self.hi[0]).contains(&z) && (self.lo[1]..self.hi[1]).contains(&y) && (self.lo[2]..self.hi[2]).contains(&x)
    }
}

pub fn extract_roi(coarse: &SegMask, margin: f64) -> Result<Option<RoiBox>> {
    coarse.check_binary()?;
    Ok(RoiBox::around(coarse, margin))
}

/// 26-connected components of the foreground as lists of flat indices,
/// in order of their first voxel.
pub fn connected_components(mask: &SegMask) -> Vec<Vec<usize>> {
    let [d, h, w] = mask.shape();
    let data = mask.data();
    let mut label = vec![false; data.len()];
    let mut out = Vec::new();
    for seed in 0..data.len() {
        if data[seed] == 0 || label[seed] {
            continue;
        }
        label[seed] = true;
        let mut comp = vec![seed];
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            let (z, y, x) = (i / (h * w), i / w % h, i % w);
            for nz in z.saturating_sub(1)..(z + 2).min(d) {
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        let j = (nz * h + ny) * w + nx;
                        if data[j] != 0 && !label[j] {
                            label[j] = true;
                            comp.push(j);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Keeps the components holding at least `fraction` of the largest
/// component's voxels.
pub fn drop_small_components(mask: &SegMask, fraction: f64) -> SegMask {
    let comps = connected_components(mask);
    let largest = comps.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = mask.map(|_| 0u8);
    for c in comps.iter().filter(|c| c.len() as f64 >= fraction * largest as f64) {
        for &i in c {
            out.data_mut()[i] = 1;
        }
    }
    out
}

/// Stage-2 foreground probability for a resized, normalized ROI.
pub trait RoiPredictor {
    fn input_shape(&self) -> [usize; 3];
    /// `x` is `[1, 1, input_shape]`; returns foreground probabilities of the
    /// same spatial extent. `roi` locates the crop in the full volume.
    fn predict_roi(&self, x: &Tensor<f32>, roi: &RoiBox) -> Result<Vec<f32>>;
}

impl RoiPredictor for Model<f32> {
    fn input_shape(&self) -> [usize; 3] {
        self.config().patch
    }

    fn predict_roi(&self, x: &Tensor<f32>, _roi: &RoiBox) -> Result<Vec<f32>> {
        let p = self.predict(x)?;
        let n = x.len();
        Ok(p.data()[n..2 * n].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub mask: SegMask,
    pub coarse: SegMask,
    pub roi: Option<RoiBox>,
    pub patches: usize,
}

/// Stage-1 sliding window -> ROI around the significant coarse components
/// -> stage 2 -> paste into background.
pub fn cascade_infer(
    stage1: &dyn PatchPredictor,
    stage2: &dyn RoiPredictor,
    image: &VolumeImage,
    cfg: &CascadeConfig,
    stride: [usize; 3],
) -> Result<CascadeOutput> {
    let (prob, grid) = sliding_window_predict(stage1, image, stride)?;
    let coarse = prob.argmax(image.spacing())?;
    let mut mask = Volume::filled(image.shape(), image.spacing(), 0u8)?;
    let Some(roi) = extract_roi(&drop_small_components(&coarse, cfg.roi_min_component), cfg.roi_margin)? else {
        return Ok(CascadeOutput { mask, coarse, roi: None, patches: grid.origins.len() });
    };
    let s2 = stage2.input_shape();
    let e = roi.extent();
    let crop = hu_window_default(image).crop(roi.lo, roi.hi)?;
    let t = Tensor::from_vec([1, 1, e[0], e[1], e[2]], crop.into_data())?;
    let mut x = resize_trilinear(&t, s2)?.into_data();
    zscore_in_place(&mut x);
    let fg = stage2.predict_roi(&Tensor::from_vec([1, 1, s2[0], s2[1], s2[2]], x)?, &roi)?;
    let fg = resize_trilinear(&Tensor::from_vec([1, 1, s2[0], s2[1], s2[2]], fg)?, e)?;
    let block = Volume::new(e, image.spacing(), fg.data().iter().map(|&p| u8::from(p > 0.5)).collect())?;
    mask.paste(roi.lo, &block)?;
    Ok(CascadeOutput { mask, coarse, roi: Some(roi), patches: grid.origins.len() })
}

/// Runs `f` and returns its result with the elapsed wall time in seconds
/// (always positive).
pub fn timed_predict<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64().max(1e-9)))
}
