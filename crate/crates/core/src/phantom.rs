//! Procedural mammogram-like phantoms: a smooth tissue silhouette with
//! optional bright elliptical lesions and exact ground-truth masks.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifest::{build_manifest, DatasetManifest, Record};
use crate::patch::{Annotation, Class};
use crate::raster::{self, GrayscaleImage};
use crate::rng;

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub images: Vec<GrayscaleImage>,
    /// One annotation per lesion, per image.
    pub annotations: Vec<Vec<Annotation>>,
    pub manifest: DatasetManifest,
}

pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:04}")
}

struct Wave {
    amp: f64,
    fy: f64,
    fx: f64,
    phase: f64,
}

fn tissue_background(h: usize, w: usize, rng: &mut impl Rng) -> Array2<f32> {
    let mut waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            amp: rng.random_range(0.2..1.0),
            fy: rng.random_range(0.3..2.5),
            fx: rng.random_range(0.3..2.5),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    for wv in &mut waves {
        wv.amp /= total;
    }
    let left = rng.random_bool(0.5);
    let cy = h as f64 * rng.random_range(0.45..0.55);
    let ry = h as f64 * rng.random_range(0.6..0.7);
    let rx = w as f64 * rng.random_range(0.95..1.1);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = if left { x as f64 } else { (w - 1 - x) as f64 };
        let dy = y as f64 - cy;
        if (dx / rx).powi(2) + (dy / ry).powi(2) > 1.0 {
            return 0.0;
        }
        let (ny, nx) = (y as f64 / h as f64, x as f64 / w as f64);
        let f: f64 = waves
            .iter()
            .map(|wv| wv.amp * (2.0 * PI * (wv.fy * ny + wv.fx * nx) + wv.phase).cos())
            .sum();
        (0.5 + 0.3 * f) as f32
    })
}

/// Adds one lesion in place and returns its mask.
fn add_lesion(img: &mut Array2<f32>, rng: &mut impl Rng) -> Array2<f32> {
    let (h, w) = img.dim();
    let m = h.min(w) as f64;
    let ry = m * rng.random_range(0.05..0.1);
    let rx = m * rng.random_range(0.05..0.1);
    let theta = rng.random_range(0.0..PI);
    let amp = rng.random_range(0.15..0.3);
    let (mut cy, mut cx) = (h as f64 / 2.0, w as f64 / 2.0);
    for _ in 0..1000 {
        let y = rng.random_range(ry.max(rx)..h as f64 - ry.max(rx));
        let x = rng.random_range(ry.max(rx)..w as f64 - ry.max(rx));
        if img[[y as usize, x as usize]] > 0.1 {
            (cy, cx) = (y, x);
            break;
        }
    }
    let (s, c) = theta.sin_cos();
    let mut mask = Array2::<f32>::zeros((h, w));
    for ((y, x), v) in img.indexed_iter_mut() {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let u = (c * dx + s * dy) / rx;
        let t = (-s * dx + c * dy) / ry;
        let r = (u * u + t * t).sqrt();
        if r >= 1.0 {
            continue;
        }
        mask[[y, x]] = 1.0;
        let profile = if r <= 0.5 { 1.0 } else { 0.5 * (1.0 + (PI * (r - 0.5) / 0.5).cos()) };
        *v = (*v as f64 + amp * profile).clamp(0.0, 1.0) as f32;
    }
    mask
}

/// Build `n_images` phantoms; exactly `round(lesion_rate * n)` of them get
/// one to three malignant lesions.
pub fn make_phantom_dataset(n_images: usize, image_size: (usize, usize), lesion_rate: f64, rng_seed: u64) -> Result<PhantomDataset> {
    if n_images == 0 {
        return Err(Error::invalid("phantom dataset needs at least one image"));
    }
    if !(0.0..=1.0).contains(&lesion_rate) {
        return Err(Error::invalid(format!("lesion rate {lesion_rate} outside [0, 1]")));
    }
    let (h, w) = image_size;
    if h < 16 || w < 16 {
        return Err(Error::invalid("phantom images must be at least 16x16"));
    }
    let n_lesioned = (lesion_rate * n_images as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut rng::stream(rng_seed, "phantom-lesioned", 0));
    let mut lesioned = vec![false; n_images];
    for &i in &order[..n_lesioned] {
        lesioned[i] = true;
    }

    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::with_capacity(n_images);
    let mut records = Vec::with_capacity(n_images);
    for (i, &has_lesion) in lesioned.iter().enumerate() {
        let mut rng = rng::stream(rng_seed, "phantom-image", i as u64);
        let mut px = tissue_background(h, w, &mut rng);
        let mut anns = Vec::new();
        if has_lesion {
            for _ in 0..rng.random_range(1..=3) {
                anns.push(Annotation { mask: add_lesion(&mut px, &mut rng), malignant: true });
            }
        }
        let id = phantom_id(i);
        let label = if has_lesion { Class::Malignant } else { Class::NonMalignant };
        let mask_path = has_lesion.then(|| format!("masks/{id}.png"));
        records.push(Record::new(id.clone(), format!("images/{id}.png"), mask_path, label));
        images.push(GrayscaleImage::new(px)?);
        annotations.push(anns);
    }
    let manifest = build_manifest(records, rng_seed)?;
    Ok(PhantomDataset { images, annotations, manifest })
}

/// Union of an image's lesion masks.
pub fn union_mask(annotations: &[Annotation], dims: (usize, usize)) -> Array2<f32> {
    let mut m = Array2::<f32>::zeros(dims);
    for a in annotations {
        m.zip_mut_with(&a.mask, |u, &v| *u = u.max(v));
    }
    m
}

/// Write `images/`, `masks/` and `manifest.jsonl` under `dir`.
pub fn write_phantom(dir: &Path, data: &PhantomDataset) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for ((rec, img), anns) in data.manifest.records.iter().zip(&data.images).zip(&data.annotations) {
        raster::save_png16(&dir.join(&rec.path), img.view())?;
        if let Some(mp) = &rec.mask_path {
            raster::save_mask_png(&dir.join(mp), union_mask(anns, img.dims()).view())?;
        }
    }
    let path = dir.join("manifest.jsonl");
    data.manifest.write(&path)?;
    Ok(path)
}
