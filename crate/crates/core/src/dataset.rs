//! Patch extraction from full-image sources and split bookkeeping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{load_images, ArchivedPatch, DatasetManifest, Split};
use crate::patch::{sample_patches_per_class, Annotation, Class, LesionMask, Patch, SamplingConfig, SamplingStats};
use crate::phantom::PhantomDataset;
use crate::raster::{fit_inside_dims, resize_bilinear, resize_to_target, GrayscaleImage};
use crate::rng;

/// A full image with its lesion annotations and assigned split.
#[derive(Debug, Clone)]
pub struct ImageSource {
    pub id: String,
    pub image: GrayscaleImage,
    pub annotations: Vec<Annotation>,
    pub split: Split,
}

pub fn sources_from_phantom(data: &PhantomDataset) -> Vec<ImageSource> {
    data.images
        .iter()
        .zip(&data.annotations)
        .zip(&data.manifest.records)
        .map(|((img, anns), r)| ImageSource { id: r.id.clone(), image: img.clone(), annotations: anns.clone(), split: r.split })
        .collect()
}

/// Load a full-image manifest. Each record's mask becomes one annotation,
/// malignant when the record is.
pub fn sources_from_manifest(manifest_path: &Path) -> Result<Vec<ImageSource>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    Ok(load_images(manifest_path, &manifest)?
        .into_iter()
        .map(|(r, image, mask)| {
            let annotations = mask
                .filter(|m| !m.is_empty())
                .map(|m| Annotation { mask: m.pixels().clone(), malignant: r.label == Class::Malignant })
                .into_iter()
                .collect();
            ImageSource { id: r.id, image, annotations, split: r.split }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub sampling: SamplingConfig,
    /// Patches kept per class per image.
    pub per_class: usize,
    /// Fit-inside resize box `(height, width)` applied before sampling.
    pub resize: Option<(usize, usize)>,
    /// Keep non-malignant patches only from images without malignant lesions.
    pub negatives_from_clean_images: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { sampling: SamplingConfig::default(), per_class: 1, resize: Some((1375, 750)), negatives_from_clean_images: false }
    }
}

/// Resize an annotation to `dims` and threshold it back to binary.
fn resize_annotation(a: &Annotation, dims: (usize, usize)) -> Annotation {
    let m = resize_bilinear(a.mask.view(), dims).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    Annotation { mask: m, malignant: a.malignant }
}

/// Sample patches from every source; each patch inherits its image's split.
pub fn extract_patches(sources: &[ImageSource], cfg: &ExtractionConfig, seed: u64) -> Result<(Vec<ArchivedPatch>, SamplingStats)> {
    let mut out = Vec::new();
    let mut total = SamplingStats::default();
    for (i, src) in sources.iter().enumerate() {
        let (image, annotations) = match cfg.resize {
            Some(target) => {
                let img = resize_to_target(&src.image, target)?;
                let dims = fit_inside_dims(src.image.dims(), target)?;
                (img, src.annotations.iter().map(|a| resize_annotation(a, dims)).collect())
            }
            None => (src.image.clone(), src.annotations.clone()),
        };
        let (patches, stats) = sample_patches_per_class(
            &image,
            &annotations,
            cfg.per_class,
            rng::derive_seed(seed, "patches", i as u64),
            &cfg.sampling,
            &src.id,
        )?;
        total.attempts += stats.attempts;
        total.tissue_accepted += stats.tissue_accepted;
        let clean = !annotations.iter().any(|a| a.malignant);
        for p in patches {
            if cfg.negatives_from_clean_images && !clean && p.label == Class::NonMalignant {
                continue;
            }
            out.push(ArchivedPatch { patch: p, split: src.split, generator_fingerprint: None });
        }
    }
    total.kept = out.len();
    Ok((out, total))
}

/// Patches grouped by split, in archive order.
#[derive(Debug, Clone, Default)]
pub struct PatchSplits {
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
    pub test: Vec<Patch>,
}

impl PatchSplits {
    pub fn from_archive(patches: Vec<ArchivedPatch>) -> Self {
        let mut s = Self::default();
        for ap in patches {
            match ap.split {
                Split::Train => s.train.push(ap.patch),
                Split::Val => s.val.push(ap.patch),
                Split::Test => s.test.push(ap.patch),
            }
        }
        s
    }
}

/// Non-empty lesion masks of malignant patches, usable as transplant donors.
pub fn donor_masks(patches: &[Patch]) -> Vec<LesionMask> {
    patches
        .iter()
        .filter(|p| p.label == Class::Malignant && !p.mask.is_empty())
        .map(|p| p.mask.clone())
        .collect()
}

/// Both classes must be present.
pub fn require_two_classes(patches: &[Patch], what: &str) -> Result<()> {
    let pos = patches.iter().filter(|p| p.label == Class::Malignant).count();
    if pos == 0 || pos == patches.len() {
        return Err(Error::Data(format!("{what}: need both classes, got {pos} malignant of {}", patches.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::make_phantom_dataset;

    fn patch_cfg(size: usize) -> ExtractionConfig {
        ExtractionConfig {
            sampling: SamplingConfig { patch_size: size, min_tissue_fraction: 0.5, ..Default::default() },
            per_class: 2,
            resize: None,
            negatives_from_clean_images: false,
        }
    }

    #[test]
    fn patches_inherit_split_and_are_deterministic() {
        let data = make_phantom_dataset(10, (96, 96), 0.5, 3).unwrap();
        let sources = sources_from_phantom(&data);
        let (a, stats) = extract_patches(&sources, &patch_cfg(32), 1).unwrap();
        let (b, _) = extract_patches(&sources, &patch_cfg(32), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats.kept, a.len());
        for ap in &a {
            let src = sources.iter().find(|s| s.id == ap.patch.source_id).unwrap();
            assert_eq!(ap.split, src.split);
        }
        assert!(a.iter().any(|p| p.patch.label == Class::Malignant));
    }

    #[test]
    fn clean_negatives_only() {
        let data = make_phantom_dataset(8, (96, 96), 0.5, 4).unwrap();
        let sources = sources_from_phantom(&data);
        let cfg = ExtractionConfig { negatives_from_clean_images: true, ..patch_cfg(32) };
        let (a, _) = extract_patches(&sources, &cfg, 2).unwrap();
        for ap in a.iter().filter(|p| p.patch.label == Class::NonMalignant) {
            let src = sources.iter().find(|s| s.id == ap.patch.source_id).unwrap();
            assert!(!src.annotations.iter().any(|x| x.malignant));
        }
    }

    #[test]
    fn resize_keeps_masks_binary() {
        let data = make_phantom_dataset(4, (192, 128), 1.0, 5).unwrap();
        let sources = sources_from_phantom(&data);
        let cfg = ExtractionConfig { resize: Some((96, 64)), ..patch_cfg(32) };
        let (a, _) = extract_patches(&sources, &cfg, 2).unwrap();
        assert!(!a.is_empty());
        for ap in &a {
            assert_eq!(ap.patch.size(), 32);
            assert!(ap.patch.mask.pixels().iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }
}
