//! CIFAR-100 binary archive layout (`train.bin` / `test.bin`).
//!
//! Each record is one coarse-label byte, one fine-label byte and 3072 pixel
//! bytes (red plane, green plane, blue plane, 32×32 each). Fine labels are
//! used as class ids; train and test records are pooled per class.

use std::collections::BTreeMap;
use std::path::Path;

use super::manifest::to_chw;
use super::source::ImageSource;
use super::{ClassId, SampleRef};
use crate::error::{Error, Result};
use crate::nn::ImageShape;

const RECORD: usize = 2 + 3072;

pub struct Cifar100 {
    side: usize,
    by_class: BTreeMap<ClassId, Vec<Vec<f32>>>,
}

pub fn parse_records(bytes: &[u8]) -> Result<Vec<(ClassId, Vec<u8>)>> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Data(format!(
            "CIFAR-100 archive length {} is not a multiple of {}",
            bytes.len(),
            RECORD
        )));
    }
    Ok(bytes
        .chunks(RECORD)
        .map(|r| (ClassId(r[1] as u32), r[2..].to_vec()))
        .collect())
}

impl Cifar100 {
    /// Load every `*.bin` archive named `train.bin`/`test.bin` under `dir`.
    pub fn open(dir: &Path, side: usize) -> Result<Self> {
        let mut by_class: BTreeMap<ClassId, Vec<Vec<f32>>> = BTreeMap::new();
        let mut found = false;
        for name in ["train.bin", "test.bin"] {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            found = true;
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            for (class, px) in parse_records(&bytes)? {
                let chw: Vec<f32> = if side == 32 {
                    px.iter().map(|&b| b as f32 / 255.0).collect()
                } else {
                    let mut rgb = image::RgbImage::new(32, 32);
                    for y in 0..32u32 {
                        for x in 0..32u32 {
                            let i = (y * 32 + x) as usize;
                            rgb.put_pixel(x, y, image::Rgb([px[i], px[1024 + i], px[2048 + i]]));
                        }
                    }
                    to_chw(&image::DynamicImage::ImageRgb8(rgb), side)
                };
                by_class.entry(class).or_default().push(chw);
            }
        }
        if !found {
            return Err(Error::Data(format!(
                "no train.bin/test.bin under {}",
                dir.display()
            )));
        }
        Ok(Cifar100 { side, by_class })
    }
}

impl ImageSource for Cifar100 {
    fn shape(&self) -> ImageShape {
        ImageShape::new(3, self.side, self.side)
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
            .ok_or_else(|| Error::Data(format!("no sample {:?} in CIFAR-100 archive", sample)))
    }

    fn name(&self) -> &str {
        "cifar100"
    }
}
