//! Dataset ingestion, the per-class split protocol, preprocessing,
//! augmentation and the synthetic ring corpus.

mod augment;
pub mod pnm;
mod resize;
mod split;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use augment::{augment, hflip, shift_brightness, shifted_crop, AugmentPolicy};
pub use resize::resize_bilinear;
pub use split::{make_split, DatasetSplit, Partition, DEFAULT_K_TEST, DEFAULT_VAL_FRACTION};
pub use synth::{
    signature, synth_corpus, synth_corpus_with_geometry, ClassSignature, RingGeometry, SynthParams,
    SIGNATURE_COUNT,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// An image `[3, h, w]` with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub class_id: usize,
    pub source_path: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<LabeledImage>,
    /// Class directory names; index is the class id.
    pub class_names: Vec<String>,
    /// Files that failed to decode (only when skipping was allowed).
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_pixmap(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "pnm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Reads `root/<class>/<image>.ppm|pgm`. Class ids follow the sorted class
/// directory names; images within a class follow sorted file names.
/// Undecodable files are an error unless `skip_unreadable` is set.
pub fn load_corpus(root: &Path, skip_unreadable: bool) -> Result<Corpus> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let mut images = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = Vec::new();
    for dir in class_dirs {
        let files: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_pixmap(p))
            .collect();
        if files.is_empty() {
            continue;
        }
        let class_id = class_names.len();
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        for file in files {
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            match pnm::decode(&bytes, &file) {
                Ok(pixels) => images.push(LabeledImage {
                    pixels,
                    class_id,
                    source_path: file.to_string_lossy().into_owned(),
                }),
                Err(Error::UnreadableImage { path, reason }) if skip_unreadable => {
                    skipped.push((path, reason))
                }
                Err(e) => return Err(e),
            }
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    Ok(Corpus {
        images,
        class_names,
        skipped,
    })
}

/// Writes images as `root/class_<id>/<n>.ppm`.
pub fn write_corpus(root: &Path, images: &[LabeledImage]) -> Result<()> {
    let mut counters = std::collections::BTreeMap::<usize, usize>::new();
    for img in images {
        let dir = root.join(format!("class_{:03}", img.class_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n = counters.entry(img.class_id).or_default();
        let path = dir.join(format!("{:03}.ppm", *n));
        *n += 1;
        fs::write(&path, pnm::encode_ppm(&img.pixels)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Resizes every image to `size × size` unless it already has that shape.
pub fn prepare(images: &[LabeledImage], size: usize) -> Result<Vec<LabeledImage>> {
    crate::par::try_map_range(images.len(), |i| {
        let img = &images[i];
        let s = img.pixels.shape();
        let pixels = if s[1] == size && s[2] == size {
            img.pixels.clone()
        } else {
            resize_bilinear(&img.pixels, size, size)?
        };
        Ok(LabeledImage {
            pixels,
            class_id: img.class_id,
            source_path: img.source_path.clone(),
        })
    })
}

/// Stacks images into a `[b, 3, h, w]` batch.
pub fn batch(images: &[&LabeledImage]) -> Result<Tensor> {
    let pixels: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
    Tensor::stack(&pixels)
}

/// Per-channel mean and standard deviation over a set of images, accumulated
/// in `f64`. A zero deviation is replaced by 1.
pub fn channel_stats(images: &[LabeledImage]) -> Result<(Vec<f32>, Vec<f32>)> {
    let first = images
        .first()
        .ok_or(Error::EmptySplit("no images for channel statistics"))?;
    let c = first.pixels.shape()[0];
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    let mut count = 0usize;
    for img in images {
        let plane = img.pixels.numel() / c;
        for (ch, chunk) in img.pixels.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let var = (q / n - (s / n).powi(2)).max(0.0);
            let sd = var.sqrt() as f32;
            if sd > 1e-6 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, std))
}
