//! Bidirectional dataset synthesis: lesions are infilled onto
//! non-malignant patches and removed from malignant ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{composite, Generator, NetworkParams};
use crate::patch::{build_conditioned_input, Class, LesionMask, Patch};
use crate::rng;

/// A donor mask placed into a target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Transplant {
    pub mask: LesionMask,
    pub donor: usize,
    /// Row and column shift applied to the donor's coordinates.
    pub offset: (i64, i64),
}

/// Shift that pulls an interval ending at `hi` back inside `0..frame`.
fn clamp_shift(hi: usize, frame: usize) -> i64 {
    if hi >= frame {
        frame as i64 - 1 - hi as i64
    } else {
        0
    }
}

/// Choose a donor uniformly and place it in a `frame × frame` target.
///
/// By default the donor keeps its own coordinates, shifted by the smallest
/// amount that brings its bounding box inside the frame. With `reposition`
/// the bounding box is moved to a uniformly random position instead.
pub fn place_donor(frame: (usize, usize), donors: &[LesionMask], rng_seed: u64, reposition: bool) -> Result<Transplant> {
    if donors.is_empty() {
        return Err(Error::invalid("transplant needs at least one donor mask"));
    }
    let mut rng = rng::seeded(rng_seed);
    let donor = rng.random_range(0..donors.len());
    let src = &donors[donor];
    let (y0, x0, y1, x1) = src
        .bounding_box()
        .ok_or_else(|| Error::invalid(format!("donor mask {donor} is empty")))?;
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let (fh, fw) = frame;
    if bh > fh || bw > fw {
        return Err(Error::invalid(format!("donor mask {donor} ({bh}x{bw}) does not fit a {fh}x{fw} frame")));
    }
    let (dy, dx) = if reposition {
        let ny = rng.random_range(0..=fh - bh) as i64;
        let nx = rng.random_range(0..=fw - bw) as i64;
        (ny - y0 as i64, nx - x0 as i64)
    } else {
        (clamp_shift(y1, fh), clamp_shift(x1, fw))
    };
    let mut out = ndarray::Array2::<f32>::zeros(frame);
    for ((y, x), &v) in src.pixels().indexed_iter() {
        if v == 1.0 {
            out[[(y as i64 + dy) as usize, (x as i64 + dx) as usize]] = 1.0;
        }
    }
    Ok(Transplant { mask: LesionMask::new(out)?, donor, offset: (dy, dx) })
}

/// Mask for a non-malignant `target`, taken from a uniformly chosen donor.
pub fn transplant_mask(target: &Patch, donors: &[LesionMask], rng_seed: u64) -> Result<LesionMask> {
    Ok(place_donor(target.image.dims(), donors, rng_seed, false)?.mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub reposition: bool,
    /// Patches generated per forward pass.
    pub batch_size: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { reposition: false, batch_size: 16 }
    }
}

/// One synthetic opposite-class patch per input patch, in input order.
/// Outside its mask each output is bit-identical to its source.
pub fn synthesize_dataset(
    patches: &[Patch],
    generator: &Generator,
    params: &NetworkParams,
    donors: &[LesionMask],
    config: &SynthesisConfig,
    seed: u64,
) -> Result<Vec<Patch>> {
    params.ensure_fingerprint(&generator.fingerprint())?;
    let mut jobs = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let i = i as u64;
        let (mask, target) = match p.label {
            Class::NonMalignant => {
                let t = place_donor(p.image.dims(), donors, rng::derive_seed(seed, "transplant", i), config.reposition)?;
                (t.mask, Class::Malignant)
            }
            Class::Malignant => {
                if p.mask.is_empty() {
                    return Err(Error::Data(format!("malignant patch `{}` has no lesion mask", p.id())));
                }
                (p.mask.clone(), Class::NonMalignant)
            }
        };
        let input = build_conditioned_input(p, &mask, target, rng::derive_seed(seed, "synthesis-noise", i))?;
        jobs.push((p, mask, target, input));
    }
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(config.batch_size.max(1)) {
        let inputs: Vec<_> = chunk.iter().map(|j| j.3.clone()).collect();
        let raw = generator.generate_batch(params, &inputs)?;
        for (b, (p, mask, target, _)) in chunk.iter().enumerate() {
            let r = raw.index_axis(ndarray::Axis(0), b).index_axis(ndarray::Axis(0), 0).to_owned();
            out.push(composite(&r, p, mask, *target)?);
        }
    }
    Ok(out)
}
