//! Patches, lesion masks, tissue-gated patch sampling and the four-channel
//! conditioned generator input.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayscaleImage;
use crate::rng;

/// Patch side length used at full scale.
pub const PATCH_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Class {
    NonMalignant,
    Malignant,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::NonMalignant, Class::Malignant];

    /// Class planes: `[1, 0]` for non-malignant, `[0, 1]` for malignant.
    pub fn one_hot(self) -> [f32; 2] {
        match self {
            Class::NonMalignant => [1.0, 0.0],
            Class::Malignant => [0.0, 1.0],
        }
    }

    pub fn opposite(self) -> Class {
        match self {
            Class::NonMalignant => Class::Malignant,
            Class::Malignant => Class::NonMalignant,
        }
    }

    /// Binary target: 1 for malignant.
    pub fn target(self) -> f32 {
        match self {
            Class::NonMalignant => 0.0,
            Class::Malignant => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::NonMalignant => "non-malignant",
            Class::Malignant => "malignant",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-malignant" => Ok(Class::NonMalignant),
            "malignant" => Ok(Class::Malignant),
            other => Err(Error::Data(format!("unknown class label `{other}`"))),
        }
    }
}

/// Binary raster marking the infill region. May be all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMask {
    pixels: Array2<f32>,
}

impl LesionMask {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Ok(Self { pixels })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { pixels: Array2::zeros((height, width)) }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { pixels: Array2::ones((height, width)) }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.pixels.view()
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|v| **v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|v| *v == 0.0)
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &v) in self.pixels.indexed_iter() {
            if v == 1.0 {
                bb = Some(match bb {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
        bb
    }
}

/// Fixed-size square crop with its mask, label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: GrayscaleImage,
    pub mask: LesionMask,
    pub label: Class,
    /// Identifier of the source image.
    pub source_id: String,
    /// Position of this patch among those drawn from the source image.
    pub index: usize,
    pub synthetic: bool,
}

impl Patch {
    pub fn new(image: GrayscaleImage, mask: LesionMask, label: Class, source_id: impl Into<String>, index: usize) -> Result<Self> {
        let (h, w) = image.dims();
        if h != w {
            return Err(Error::invalid(format!("patch must be square, got {h}x{w}")));
        }
        if mask.dims() != image.dims() {
            return Err(Error::invalid(format!(
                "mask {:?} does not match patch {:?}",
                mask.dims(),
                image.dims()
            )));
        }
        Ok(Self { image, mask, label, source_id: source_id.into(), index, synthetic: false })
    }

    pub fn size(&self) -> usize {
        self.image.height()
    }

    /// Archive identifier `<source_id>_<index>`.
    pub fn id(&self) -> String {
        format!("{}_{}", self.source_id, self.index)
    }
}

/// Fraction of pixels whose intensity exceeds `threshold`.
pub fn tissue_fraction(pixels: ArrayView2<'_, f32>, threshold: f32) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::invalid("tissue fraction of an empty patch"));
    }
    if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::invalid("tissue fraction needs values in [0, 1]"));
    }
    let n = pixels.iter().filter(|v| **v > threshold).count();
    Ok(n as f64 / pixels.len() as f64)
}

/// A lesion segmentation in full-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub mask: Array2<f32>,
    pub malignant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub patch_size: usize,
    /// A patch is accepted only when its tissue fraction is strictly above this.
    pub min_tissue_fraction: f64,
    /// Pixels brighter than this count as tissue.
    pub tissue_threshold: f32,
    /// Random positions tried per image before giving up.
    pub max_attempts: usize,
    /// Fraction of a malignant lesion's area that must fall inside the patch
    /// for the patch to be labelled malignant; 0 means any overlap.
    pub min_lesion_overlap: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            min_tissue_fraction: 0.75,
            tissue_threshold: 0.05,
            max_attempts: 100_000,
            min_lesion_overlap: 0.0,
        }
    }
}

/// Summed-area table of a binary indicator.
struct Integral {
    sums: Vec<u32>,
    stride: usize,
}

impl Integral {
    fn new(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Self {
        let stride = w + 1;
        let mut sums = vec![0u32; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += on(y, x) as u32;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { sums, stride }
    }

    fn window(&self, y: usize, x: usize, size: usize) -> u32 {
        let s = self.stride;
        let (y1, x1) = (y + size, x + size);
        self.sums[y1 * s + x1] + self.sums[y * s + x] - self.sums[y * s + x1] - self.sums[y1 * s + x]
    }

    fn total(&self) -> u32 {
        *self.sums.last().unwrap_or(&0)
    }
}

/// Counts from a sampling run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplingStats {
    pub attempts: usize,
    pub tissue_accepted: usize,
    pub kept: usize,
}

impl SamplingStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.tissue_accepted as f64 / self.attempts as f64
        }
    }
}

struct Sampler<'a> {
    image: &'a GrayscaleImage,
    annotations: &'a [Annotation],
    tissue: Integral,
    lesions: Vec<Integral>,
    cfg: &'a SamplingConfig,
    source_id: &'a str,
}

impl<'a> Sampler<'a> {
    fn new(image: &'a GrayscaleImage, annotations: &'a [Annotation], cfg: &'a SamplingConfig, source_id: &'a str) -> Result<Self> {
        let (h, w) = image.dims();
        if cfg.patch_size == 0 || h < cfg.patch_size || w < cfg.patch_size {
            return Err(Error::invalid(format!(
                "image `{source_id}` ({h}x{w}) is smaller than the {} pixel patch",
                cfg.patch_size
            )));
        }
        for a in annotations {
            if a.mask.dim() != (h, w) {
                return Err(Error::invalid(format!("annotation on `{source_id}` does not match image dims")));
            }
        }
        let px = image.pixels();
        let tissue = Integral::new(h, w, |y, x| px[[y, x]] > cfg.tissue_threshold);
        let lesions = annotations
            .iter()
            .map(|a| Integral::new(h, w, |y, x| a.mask[[y, x]] > 0.5))
            .collect();
        Ok(Self { image, annotations, tissue, lesions, cfg, source_id })
    }

    fn draw_position(&self, rng: &mut impl Rng) -> (usize, usize) {
        let (h, w) = self.image.dims();
        let ps = self.cfg.patch_size;
        (rng.random_range(0..=h - ps), rng.random_range(0..=w - ps))
    }

    fn passes_tissue(&self, y: usize, x: usize) -> bool {
        let ps = self.cfg.patch_size;
        let frac = self.tissue.window(y, x, ps) as f64 / (ps * ps) as f64;
        frac > self.cfg.min_tissue_fraction
    }

    fn label_at(&self, y: usize, x: usize) -> Class {
        let ps = self.cfg.patch_size;
        let hit = self.annotations.iter().zip(&self.lesions).any(|(a, integral)| {
            if !a.malignant {
                return false;
            }
            let inside = integral.window(y, x, ps);
            inside > 0 && inside as f64 >= self.cfg.min_lesion_overlap * integral.total() as f64
        });
        if hit {
            Class::Malignant
        } else {
            Class::NonMalignant
        }
    }

    fn crop(&self, y: usize, x: usize, label: Class, index: usize) -> Result<Patch> {
        let ps = self.cfg.patch_size;
        let window = s![y..y + ps, x..x + ps];
        let image = GrayscaleImage::new(self.image.pixels().slice(window).to_owned())?;
        let want_malignant = label == Class::Malignant;
        let mut mask = Array2::<f32>::zeros((ps, ps));
        for a in self.annotations.iter().filter(|a| a.malignant == want_malignant) {
            mask.zip_mut_with(&a.mask.slice(window), |m, &v| {
                if v > 0.5 {
                    *m = 1.0;
                }
            });
        }
        Patch::new(image, LesionMask::new(mask)?, label, self.source_id, index)
    }

    fn starvation(&self, attempts: usize) -> Error {
        Error::SamplingStarvation { image: self.source_id.to_string(), attempts }
    }
}

/// Rejection-sample `count` patches whose tissue fraction exceeds the
/// configured minimum. A patch is malignant iff it overlaps a malignant
/// annotation; its mask is the union of the cropped annotations of its class.
pub fn sample_patches(
    image: &GrayscaleImage,
    annotations: &[Annotation],
    count: usize,
    rng_seed: u64,
    cfg: &SamplingConfig,
    source_id: &str,
) -> Result<Vec<Patch>> {
    Ok(sample_patches_with_stats(image, annotations, count, rng_seed, cfg, source_id)?.0)
}

pub fn sample_patches_with_stats(
    image: &GrayscaleImage,
    annotations: &[Annotation],
    count: usize,
    rng_seed: u64,
    cfg: &SamplingConfig,
    source_id: &str,
) -> Result<(Vec<Patch>, SamplingStats)> {
    let sampler = Sampler::new(image, annotations, cfg, source_id)?;
    let mut rng = rng::seeded(rng_seed);
    let mut stats = SamplingStats::default();
    let mut out = Vec::with_capacity(count);
    while out.len() < count && stats.attempts < cfg.max_attempts {
        stats.attempts += 1;
        let (y, x) = sampler.draw_position(&mut rng);
        if !sampler.passes_tissue(y, x) {
            continue;
        }
        stats.tissue_accepted += 1;
        let label = sampler.label_at(y, x);
        out.push(sampler.crop(y, x, label, out.len())?);
    }
    if count > 0 && out.is_empty() {
        return Err(sampler.starvation(stats.attempts));
    }
    stats.kept = out.len();
    Ok((out, stats))
}

/// Like [`sample_patches`] but keeps at most `per_class` patches of each
/// class, stopping once both quotas are met or attempts run out.
pub fn sample_patches_per_class(
    image: &GrayscaleImage,
    annotations: &[Annotation],
    per_class: usize,
    rng_seed: u64,
    cfg: &SamplingConfig,
    source_id: &str,
) -> Result<(Vec<Patch>, SamplingStats)> {
    let sampler = Sampler::new(image, annotations, cfg, source_id)?;
    let can_be_malignant = annotations.iter().any(|a| a.malignant);
    let mut rng = rng::seeded(rng_seed);
    let mut stats = SamplingStats::default();
    let mut out = Vec::new();
    let mut kept = [0usize; 2];
    let done = |kept: &[usize; 2]| kept[0] >= per_class && (kept[1] >= per_class || !can_be_malignant);
    while !done(&kept) && stats.attempts < cfg.max_attempts {
        stats.attempts += 1;
        let (y, x) = sampler.draw_position(&mut rng);
        if !sampler.passes_tissue(y, x) {
            continue;
        }
        stats.tissue_accepted += 1;
        let label = sampler.label_at(y, x);
        let slot = label as usize;
        if kept[slot] < per_class {
            kept[slot] += 1;
            out.push(sampler.crop(y, x, label, out.len())?);
        }
    }
    if per_class > 0 && out.is_empty() {
        return Err(sampler.starvation(stats.attempts));
    }
    stats.kept = out.len();
    Ok((out, stats))
}

/// Replace masked pixels with independent uniform draws from `[0, 1)`.
pub fn make_corrupted(patch: &Patch, mask: &LesionMask, rng_seed: u64) -> Result<Array2<f32>> {
    if mask.dims() != patch.image.dims() {
        return Err(Error::invalid(format!(
            "mask {:?} does not match patch {:?}",
            mask.dims(),
            patch.image.dims()
        )));
    }
    let mut rng = rng::seeded(rng_seed);
    let mut out = patch.image.pixels().clone();
    for (v, &m) in out.iter_mut().zip(mask.pixels().iter()) {
        if m == 1.0 {
            *v = rng.random::<f32>();
        }
    }
    Ok(out)
}

/// Four-channel generator input: corrupted image, mask, non-malignant
/// plane, malignant plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInput {
    pub channels: Array3<f32>,
    pub target_class: Class,
}

impl ConditionedInput {
    pub fn size(&self) -> usize {
        self.channels.dim().1
    }

    pub fn corrupted(&self) -> ArrayView2<'_, f32> {
        self.channels.index_axis(Axis(0), 0)
    }

    pub fn mask(&self) -> ArrayView2<'_, f32> {
        self.channels.index_axis(Axis(0), 1)
    }

    /// Same corrupted image and mask, other class planes.
    pub fn with_class(&self, class: Class) -> ConditionedInput {
        let mut channels = self.channels.clone();
        let [a, b] = class.one_hot();
        channels.index_axis_mut(Axis(0), 2).fill(a);
        channels.index_axis_mut(Axis(0), 3).fill(b);
        ConditionedInput { channels, target_class: class }
    }
}

pub fn build_conditioned_input(patch: &Patch, mask: &LesionMask, target_class: Class, rng_seed: u64) -> Result<ConditionedInput> {
    let corrupted = make_corrupted(patch, mask, rng_seed)?;
    let (h, w) = corrupted.dim();
    let [a, b] = target_class.one_hot();
    let mut channels = Array3::<f32>::zeros((4, h, w));
    channels.index_axis_mut(Axis(0), 0).assign(&corrupted);
    channels.index_axis_mut(Axis(0), 1).assign(mask.pixels());
    channels.index_axis_mut(Axis(0), 2).fill(a);
    channels.index_axis_mut(Axis(0), 3).fill(b);
    Ok(ConditionedInput { channels, target_class })
}

/// Stack conditioned inputs into an `(N, 4, S, S)` batch.
pub fn stack_inputs<'a>(inputs: impl IntoIterator<Item = &'a ConditionedInput>) -> Array4<f32> {
    let views: Vec<_> = inputs.into_iter().map(|c| c.channels.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("conditioned inputs share a shape")
}

/// Stack 2-D rasters into an `(N, 1, S, S)` batch.
pub fn stack_planes<'a>(planes: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Array4<f32> {
    let views: Vec<_> = planes.into_iter().map(|p| p.insert_axis(Axis(0)).insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("planes share a shape")
}
