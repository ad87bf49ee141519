//! On-disk dataset layout: `case_<id>_img.rvol` and `case_<id>_msk.rvol`
//! pairs plus a `cases.json` index carrying each case's lesion class.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::phantom::{generate_phantom, LesionClass, PhantomSpec};
use crate::data::rvol::{read_image, read_mask, write_image, write_mask};
use crate::data::volume::{SegMask, VolumeImage};
use crate::error::{data_err, Result};

pub const INDEX_FILE: &str = "cases.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    /// Hounsfield units.
    pub image: VolumeImage,
    pub mask: SegMask,
    pub class: LesionClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub class: LesionClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub cases: Vec<IndexEntry>,
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("case_{id}_img.rvol"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("case_{id}_msk.rvol"))
}

pub fn case_id(index: usize) -> String {
    format!("{index:04}")
}

/// `count` phantoms with case specs derived from `spec.seed`.
pub fn generate_cases(spec: &PhantomSpec, count: usize) -> Result<Vec<Case>> {
    (0..count)
        .map(|i| {
            let p = generate_phantom(&spec.for_case(i as u64))?;
            Ok(Case { id: case_id(i), image: p.image, mask: p.mask, class: p.class })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, cases: &[Case]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in cases {
        write_image(image_path(dir, &c.id), &c.image)?;
        write_mask(mask_path(dir, &c.id), &c.mask)?;
    }
    let index = DatasetIndex {
        cases: cases.iter().map(|c| IndexEntry { id: c.id.clone(), class: c.class }).collect(),
    };
    std::fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index).expect("serializable"))?;
    Ok(())
}

/// Case ids present as `case_<id>_<suffix>.rvol` files, sorted.
pub fn scan_ids(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("case_").and_then(|r| r.strip_suffix(&format!("_{suffix}.rvol"))) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_index(dir: &Path) -> Result<Option<DatasetIndex>> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map(Some).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Loads every case listed in `cases.json`, or every image/mask pair found
/// when there is no index (class then defaults to solitary).
pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    if !dir.is_dir() {
        return Err(data_err(format!("{} is not a directory", dir.display())));
    }
    let entries = match read_index(dir)? {
        Some(index) => index.cases,
        None => scan_ids(dir, "img")?
            .into_iter()
            .map(|id| IndexEntry { id, class: LesionClass::Solitary })
            .collect(),
    };
    entries
        .into_iter()
        .map(|e| {
            let image = read_image(image_path(dir, &e.id))?;
            let mask = read_mask(mask_path(dir, &e.id))?;
            if image.shape() != mask.shape() || image.spacing() != mask.spacing() {
                return Err(data_err(format!("case {}: image and mask grids differ", e.id)));
            }
            Ok(Case { id: e.id, image, mask, class: e.class })
        })
        .collect()
}
