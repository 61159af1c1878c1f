//! Dataset manifests (line-delimited JSON) and on-disk patch archives.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{Class, LesionMask, Patch};
use crate::raster::{self, GrayscaleImage};
use crate::rng;

pub const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// One manifest line. Synthetic records carry the source patch and the
/// generator checkpoint that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub path: String,
    pub mask_path: Option<String>,
    pub label: Class,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_fingerprint: Option<String>,
}

impl Record {
    pub fn new(id: impl Into<String>, path: impl Into<String>, mask_path: Option<String>, label: Class) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            mask_path,
            label,
            split: Split::Train,
            source_id: None,
            index: None,
            synthetic: false,
            generator_fingerprint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    seed: u64,
    split_fractions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub records: Vec<Record>,
}

/// Per-class split sizes. Train gets `round(0.8 n)`; the remainder is
/// halved, with odd remainders alternately favouring val then test across
/// classes so the global counts also stay balanced.
fn split_counts(n: usize, odd_seen: &mut usize) -> [usize; 3] {
    let train = ((n as f64) * SPLIT_FRACTIONS[0]).round() as usize;
    let train = train.min(n);
    let rest = n - train;
    let (val, test) = if rest % 2 == 0 {
        (rest / 2, rest / 2)
    } else {
        let favour_val = *odd_seen % 2 == 0;
        *odd_seen += 1;
        if favour_val {
            (rest / 2 + 1, rest / 2)
        } else {
            (rest / 2, rest / 2 + 1)
        }
    };
    [train, val, test]
}

/// Stratified 80/10/10 split assignment, deterministic per seed.
pub fn build_manifest(mut records: Vec<Record>, seed: u64) -> Result<DatasetManifest> {
    if records.is_empty() {
        return Err(Error::invalid("cannot build a manifest from zero records"));
    }
    let mut by_class: BTreeMap<Class, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut odd_seen = 0;
    for (class, mut idx) in by_class {
        let mut rng = rng::stream(seed, "manifest-split", class as u64);
        idx.shuffle(&mut rng);
        let [train, val, _] = split_counts(idx.len(), &mut odd_seen);
        for (pos, i) in idx.into_iter().enumerate() {
            records[i].split = if pos < train {
                Split::Train
            } else if pos < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(DatasetManifest { seed, split_fractions: SPLIT_FRACTIONS, records })
}

impl DatasetManifest {
    pub fn count(&self, split: Split, label: Option<Class>) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == split && label.is_none_or(|l| r.label == l))
            .count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = Header { seed: self.seed, split_fractions: self.split_fractions };
        serde_json::to_writer(&mut out, &header).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Data(format!("manifest `{}` is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::Data(format!("manifest `{}` header: {e}", path.display())))?;
        let sum: f64 = header.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("split fractions sum to {sum}, expected 1")));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("manifest `{}` line {}: {e}", path.display(), n + 2)))?;
            records.push(r);
        }
        Ok(Self { seed: header.seed, split_fractions: header.split_fractions, records })
    }
}

/// Resolve a manifest-relative path.
pub fn resolve(manifest_path: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A patch with its split and, for synthetic patches, metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedPatch {
    pub patch: Patch,
    pub split: Split,
    pub generator_fingerprint: Option<String>,
}

pub const ARCHIVE_MANIFEST: &str = "manifest.jsonl";

/// Write `<source_id>_<index>_{img,mask}.png` pairs plus `manifest.jsonl`.
pub fn write_patch_archive(dir: &Path, patches: &[ArchivedPatch], seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(patches.len());
    for ap in patches {
        let p = &ap.patch;
        let id = p.id();
        let img = format!("{id}_img.png");
        let mask = format!("{id}_mask.png");
        raster::save_png16(&dir.join(&img), p.image.view())?;
        raster::save_mask_png(&dir.join(&mask), p.mask.view())?;
        let mut r = Record::new(id, img, Some(mask), p.label);
        r.split = ap.split;
        r.source_id = Some(p.source_id.clone());
        r.index = Some(p.index);
        r.synthetic = p.synthetic;
        r.generator_fingerprint = ap.generator_fingerprint.clone();
        records.push(r);
    }
    let manifest = DatasetManifest { seed, split_fractions: SPLIT_FRACTIONS, records };
    let path = dir.join(ARCHIVE_MANIFEST);
    manifest.write(&path)?;
    Ok(path)
}

pub fn read_patch_archive(manifest_path: &Path) -> Result<Vec<ArchivedPatch>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    manifest
        .records
        .iter()
        .map(|r| {
            let image = raster::load_png(&resolve(manifest_path, &r.path))?;
            let mask = match &r.mask_path {
                Some(m) => LesionMask::new(raster::load_mask_png(&resolve(manifest_path, m))?)?,
                None => LesionMask::empty(image.height(), image.width()),
            };
            let (source, index) = match (&r.source_id, r.index) {
                (Some(s), Some(i)) => (s.clone(), i),
                _ => (r.id.clone(), 0),
            };
            let mut patch = Patch::new(image, mask, r.label, source, index)
                .map_err(|e| Error::Data(format!("patch `{}`: {e}", r.id)))?;
            patch.synthetic = r.synthetic;
            Ok(ArchivedPatch { patch, split: r.split, generator_fingerprint: r.generator_fingerprint.clone() })
        })
        .collect()
}

/// Load a full-image manifest's images and annotation masks.
pub fn load_images(manifest_path: &Path, manifest: &DatasetManifest) -> Result<Vec<(Record, GrayscaleImage, Option<LesionMask>)>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let img = raster::load_png(&resolve(manifest_path, &r.path))?;
            let mask = r
                .mask_path
                .as_ref()
                .map(|m| raster::load_mask_png(&resolve(manifest_path, m)).and_then(LesionMask::new))
                .transpose()?;
            Ok((r.clone(), img, mask))
        })
        .collect()
}
