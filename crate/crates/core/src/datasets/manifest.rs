//! Directory-of-images datasets described by a manifest file.
//!
//! The manifest has one record per line, `relative_path<TAB>class_id`.
//! Blank lines and lines starting with `#` are ignored. Images are decoded,
//! converted to RGB and resized to the configured square side on load, then
//! kept in memory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::source::ImageSource;
use super::{ClassId, SampleRef};
use crate::error::{Error, Result};
use crate::nn::ImageShape;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: ClassId,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, class) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "manifest line {}: expected `path<TAB>class_id`",
                no + 1
            ))
        })?;
        let class: u32 = class.trim().parse().map_err(|_| {
            Error::Data(format!(
                "manifest line {}: bad class id {:?}",
                no + 1,
                class
            ))
        })?;
        out.push(ManifestEntry {
            path: PathBuf::from(path),
            class: ClassId(class),
        });
    }
    Ok(out)
}

/// Fully decoded manifest dataset.
pub struct ManifestImages {
    shape: ImageShape,
    by_class: BTreeMap<ClassId, Vec<Vec<f32>>>,
}

pub(crate) fn to_chw(img: &image::DynamicImage, side: usize) -> Vec<f32> {
    let rgb = img
        .resize_exact(side as u32, side as u32, FilterType::Triangle)
        .to_rgb8();
    let plane = side * side;
    let mut out = vec![0.0f32; 3 * plane];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[c * plane + y as usize * side + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

impl ManifestImages {
    pub fn open(root: &Path, manifest: &Path, side: usize) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let entries = parse_manifest(&text)?;
        let mut by_class: BTreeMap<ClassId, Vec<Vec<f32>>> = BTreeMap::new();
        for e in entries {
            let full = root.join(&e.path);
            let img = image::open(&full)
                .map_err(|err| Error::Data(format!("{}: {err}", full.display())))?;
            by_class
                .entry(e.class)
                .or_default()
                .push(to_chw(&img, side));
        }
        Ok(ManifestImages {
            shape: ImageShape::new(3, side, side),
            by_class,
        })
    }
}

impl ImageSource for ManifestImages {
    fn shape(&self) -> ImageShape {
        self.shape
    }

    fn label_space(&self) -> Vec<ClassId> {
        self.by_class.keys().copied().collect()
    }

    fn class_len(&self, class: ClassId) -> usize {
        self.by_class.get(&class).map_or(0, Vec::len)
    }

    fn raw(&self, sample: SampleRef) -> Result<Vec<f32>> {
        self.by_class
            .get(&sample.class)
            .and_then(|v| v.get(sample.index as usize))
            .cloned()
            .ok_or_else(|| Error::Data(format!("no sample {:?} in manifest dataset", sample)))
    }

    fn name(&self) -> &str {
        "manifest"
    }
}
