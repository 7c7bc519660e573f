//! On-disk dataset layout and loading.
//!
//! A training set is a directory of `phantom_<seed>/` subdirectories,
//! each holding `image.f32` (written by phantom generation). An
//! evaluation set is a directory of `pair_<id>/` subdirectories holding
//! `clean.f32`, `artifact.f32` and `mask.png`. Loaders sort entries by
//! name so every run sees the same order.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::io::{
    ensure_dir, read_f32_raster, read_mask_png, write_f32_raster, write_mask_png, write_png,
};

/// One clean training image.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    pub image: Image,
}

/// One artifact/clean evaluation pair with its injected-artifact mask.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub clean: Image,
    pub artifact: Image,
    pub mask: Mask,
}

pub(crate) fn subdirs_with_prefix(root: &Path, prefix: &str) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_dir() && name.starts_with(prefix) {
            dirs.push((name, path));
        }
    }
    dirs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(dirs)
}

/// Load every `phantom_*/image.f32` under `root`, sorted by directory name.
pub fn load_clean_images(root: &Path) -> Result<Vec<DatasetItem>> {
    let dirs = subdirs_with_prefix(root, "phantom_")?;
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "dataset: no phantom_* directories under {}",
            root.display()
        )));
    }
    dirs.into_iter()
        .map(|(id, path)| {
            let image = read_f32_raster(&path.join("image.f32"))?;
            Ok(DatasetItem { id, image })
        })
        .collect()
}

/// Write one evaluation pair under `root/pair_<id>/`. Rasters carry the
/// exact values; PNGs are 8-bit previews for quick inspection.
pub fn save_pair(root: &Path, id: &str, pair: &EvalPair) -> Result<PathBuf> {
    let dir = root.join(format!("pair_{id}"));
    ensure_dir(&dir)?;
    write_f32_raster(&dir.join("clean.f32"), &pair.clean)?;
    write_f32_raster(&dir.join("artifact.f32"), &pair.artifact)?;
    write_mask_png(&dir.join("mask.png"), &pair.mask)?;
    write_png(&dir.join("clean.png"), &pair.clean)?;
    write_png(&dir.join("artifact.png"), &pair.artifact)?;
    Ok(dir)
}

/// Load every `pair_*/` under `root`, sorted by directory name.
pub fn load_pairs(root: &Path) -> Result<Vec<EvalPair>> {
    let dirs = subdirs_with_prefix(root, "pair_")?;
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "dataset: no pair_* directories under {}",
            root.display()
        )));
    }
    dirs.into_iter()
        .map(|(name, path)| {
            let id = name.trim_start_matches("pair_").to_string();
            let clean = read_f32_raster(&path.join("clean.f32"))?;
            let artifact = read_f32_raster(&path.join("artifact.f32"))?;
            let mask = read_mask_png(&path.join("mask.png"))?;
            if mask.height != clean.height || mask.width != clean.width {
                return Err(Error::Validation(format!(
                    "pair {id}: mask {}x{} does not match image {}x{}",
                    mask.height, mask.width, clean.height, clean.width
                )));
            }
            Ok(EvalPair {
                id,
                clean,
                artifact,
                mask,
            })
        })
        .collect()
}
