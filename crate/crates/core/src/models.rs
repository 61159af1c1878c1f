//! The cascaded multi-scale conditional generator and the convolutional
//! discriminator.

use cigan_nn::{Bound, ParamSet, Real, Tape, Var};
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch::{stack_inputs, stack_planes, Class, ConditionedInput, LesionMask, Patch};
use crate::raster::GrayscaleImage;
use crate::rng;

pub type Fingerprint = [u8; 32];

/// SHA-256 over a kind tag and the canonical JSON of a config.
pub fn fingerprint_of<C: Serialize>(kind: &str, config: &C) -> Fingerprint {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(config).expect("configs serialize"));
    h.finalize().into()
}

pub fn to_hex(fp: &Fingerprint) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named weights plus the fingerprint of the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub tensors: ParamSet<f32>,
    pub fingerprint: Fingerprint,
    pub iteration: u64,
}

impl NetworkParams {
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape())
    }

    pub fn ensure_fingerprint(&self, expected: &Fingerprint) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameters were built for config {} but {} was expected",
                to_hex(&self.fingerprint),
                to_hex(expected)
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Order-sensitive hash of every tensor's bytes.
    pub fn checksum(&self) -> Fingerprint {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)`).
pub(crate) fn init_weight(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound))
}

pub(crate) fn conv_params(params: &mut ParamSet<f32>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) {
    params.insert(format!("{name}.weight"), init_weight(rng, &[cout, cin, k, k], cin * k * k));
    params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
}

pub(crate) fn conv<T: Real>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var, padding: usize) -> Var {
    let w = bound.get(&format!("{name}.weight"));
    let b = bound.try_get(&format!("{name}.bias"));
    tape.conv2d(x, w, b, padding)
}

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

fn cast4<T: Real>(a: &Array4<f32>) -> Array4<T> {
    a.mapv(T::of_f32)
}

/// 2×2 box-filter downsampling.
pub fn downsample2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(b, ch, y, xx)| {
        let (y2, x2) = (2 * y, 2 * xx);
        0.25 * (x[[b, ch, y2, x2]] + x[[b, ch, y2, x2 + 1]] + x[[b, ch, y2 + 1, x2]] + x[[b, ch, y2 + 1, x2 + 1]])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_resolution: usize,
    pub final_resolution: usize,
    pub block_kernel_counts: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_resolution: 4,
            final_resolution: 256,
            block_kernel_counts: vec![128, 128, 64, 64, 32, 32, 32],
            kernel_size: 3,
        }
    }
}

/// Channels in the conditioned input stack.
pub const INPUT_CHANNELS: usize = 4;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, msg: String| Err(Error::config(format!("generator.{field}"), msg));
        if !is_pow2(self.base_resolution) || !is_pow2(self.final_resolution) {
            return cfg(
                "final_resolution",
                format!("resolutions must be powers of two, got {} and {}", self.base_resolution, self.final_resolution),
            );
        }
        if self.final_resolution < self.base_resolution {
            return cfg("base_resolution", "base resolution exceeds final resolution".into());
        }
        if self.kernel_size % 2 == 0 {
            return cfg("kernel_size", format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.block_kernel_counts.len() != self.n_blocks() {
            return cfg(
                "block_kernel_counts",
                format!("{} blocks need {} kernel counts, got {}", self.n_blocks(), self.n_blocks(), self.block_kernel_counts.len()),
            );
        }
        if self.block_kernel_counts.contains(&0) {
            return cfg("block_kernel_counts", "kernel counts must be positive".into());
        }
        Ok(())
    }

    /// `log2(final / base) + 1`.
    pub fn n_blocks(&self) -> usize {
        (self.final_resolution / self.base_resolution.max(1)).trailing_zeros() as usize + 1
    }

    /// Resolution of each block, coarsest first.
    pub fn scales(&self) -> Vec<usize> {
        (0..self.n_blocks()).map(|i| self.base_resolution << i).collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_of("generator", self)
    }
}

/// Cascaded refinement generator. Block `i` sees the previous block's
/// upsampled output concatenated with the input stack resized to its scale,
/// applies two convolutions with ReLU; a 1×1 head and a sigmoid produce the
/// full-frame grayscale output.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    fingerprint: Fingerprint,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let fingerprint = config.fingerprint();
        Ok(Self { config, fingerprint })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn build(&self, init_seed: u64) -> NetworkParams {
        let mut rng = rng::stream(init_seed, "generator-init", 0);
        let mut tensors = ParamSet::new();
        let k = self.config.kernel_size;
        let mut prev = 0;
        for (i, &kernels) in self.config.block_kernel_counts.iter().enumerate() {
            let block = i + 1;
            conv_params(&mut tensors, &mut rng, &format!("block{block}.conv1"), prev + INPUT_CHANNELS, kernels, k);
            conv_params(&mut tensors, &mut rng, &format!("block{block}.conv2"), kernels, kernels, k);
            prev = kernels;
        }
        conv_params(&mut tensors, &mut rng, "head", prev, 1, 1);
        NetworkParams { tensors, fingerprint: self.fingerprint, iteration: 0 }
    }

    /// Input stack at every block scale, coarsest first.
    pub fn input_pyramid<T: Real>(&self, batch: &Array4<f32>) -> Result<Vec<Array4<T>>> {
        let (_, c, h, w) = batch.dim();
        if c != INPUT_CHANNELS || h != self.config.final_resolution || w != h {
            return Err(Error::invalid(format!(
                "generator expects (N, {INPUT_CHANNELS}, {r}, {r}) input, got {:?}",
                batch.dim(),
                r = self.config.final_resolution
            )));
        }
        let mut levels = vec![batch.clone()];
        for _ in 1..self.config.n_blocks() {
            let next = downsample2(levels.last().expect("nonempty"));
            levels.push(next);
        }
        levels.reverse();
        Ok(levels.iter().map(cast4).collect())
    }

    /// Record the forward pass; returns the `(N, 1, S, S)` sigmoid output.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, pyramid: &[Array4<T>]) -> Var {
        let pad = self.config.kernel_size / 2;
        let mut h: Option<Var> = None;
        for (i, level) in pyramid.iter().enumerate() {
            let block = i + 1;
            let stack = tape.constant(level.clone());
            let x = match h {
                None => stack,
                Some(prev) => {
                    let up = tape.upsample2(prev);
                    tape.concat(up, stack)
                }
            };
            let x = conv(tape, bound, &format!("block{block}.conv1"), x, pad);
            let x = tape.relu(x);
            let x = conv(tape, bound, &format!("block{block}.conv2"), x, pad);
            h = Some(tape.relu(x));
        }
        let out = conv(tape, bound, "head", h.expect("at least one block"), 0);
        tape.sigmoid(out)
    }

    /// Raw full-frame outputs for a batch, `(N, 1, S, S)`.
    pub fn generate_batch(&self, params: &NetworkParams, inputs: &[ConditionedInput]) -> Result<Array4<f32>> {
        params.ensure_fingerprint(&self.fingerprint)?;
        if inputs.is_empty() {
            return Ok(Array4::zeros((0, 1, self.config.final_resolution, self.config.final_resolution)));
        }
        let pyramid = self.input_pyramid::<f32>(&stack_inputs(inputs))?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &params.tensors, false);
        let out = self.forward(&mut tape, &bound, &pyramid);
        Ok(tape.value(out).clone())
    }

    /// Raw full-frame output in `[0, 1]` for one input.
    pub fn generate(&self, params: &NetworkParams, input: &ConditionedInput) -> Result<Array2<f32>> {
        let out = self.generate_batch(params, std::slice::from_ref(input))?;
        Ok(out.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    }
}

/// `mask ⊙ raw + (1 − mask) ⊙ patch`, labelled with the conditioning
/// class and flagged synthetic. Pixels outside the mask are copied
/// bit-for-bit from `patch`.
pub fn composite(raw_output: &Array2<f32>, patch: &Patch, mask: &LesionMask, target_class: Class) -> Result<Patch> {
    if raw_output.dim() != patch.image.dims() || mask.dims() != patch.image.dims() {
        return Err(Error::invalid(format!(
            "composite shapes differ: raw {:?}, patch {:?}, mask {:?}",
            raw_output.dim(),
            patch.image.dims(),
            mask.dims()
        )));
    }
    let mut px = patch.image.pixels().clone();
    ndarray::Zip::from(&mut px).and(raw_output).and(mask.pixels()).for_each(|p, &r, &m| {
        if m == 1.0 {
            *p = r.clamp(0.0, 1.0);
        }
    });
    let mut out = patch.clone();
    out.image = GrayscaleImage::new(px)?;
    out.mask = mask.clone();
    out.label = target_class;
    out.synthetic = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub input_resolution: usize,
    pub first_kernels: usize,
    pub n_conv_layers: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { input_resolution: 256, first_kernels: 32, n_conv_layers: 5, kernel_size: 3, leaky_slope: 0.2 }
    }
}

/// Image channel plus the two class planes.
pub const DISCRIMINATOR_CHANNELS: usize = 3;

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, msg: String| Err(Error::config(format!("discriminator.{field}"), msg));
        if !is_pow2(self.input_resolution) {
            return cfg("input_resolution", format!("must be a power of two, got {}", self.input_resolution));
        }
        if self.n_conv_layers == 0 || self.input_resolution >> self.n_conv_layers == 0 {
            return cfg(
                "n_conv_layers",
                format!("{} pooling stages do not fit a {} input", self.n_conv_layers, self.input_resolution),
            );
        }
        if self.first_kernels == 0 {
            return cfg("first_kernels", "must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return cfg("kernel_size", format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return cfg("leaky_slope", format!("must be in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Kernel count per layer, doubling from `first_kernels`.
    pub fn kernel_counts(&self) -> Vec<usize> {
        (0..self.n_conv_layers).map(|i| self.first_kernels << i).collect()
    }

    /// Spatial side after the last pooling stage.
    pub fn final_spatial(&self) -> usize {
        self.input_resolution >> self.n_conv_layers
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_of("discriminator", self)
    }
}

/// Class planes `(N, 2, S, S)` for a batch.
pub fn class_planes<T: Real>(classes: &[Class], size: usize) -> Array4<T> {
    Array4::from_shape_fn((classes.len(), 2, size, size), |(b, c, _, _)| T::of_f32(classes[b].one_hot()[c]))
}

/// Conv + LeakyReLU + 2×2 max-pool stages, then a single sigmoid unit.
/// Class conditioning concatenates the two class planes to the image.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    fingerprint: Fingerprint,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let fingerprint = config.fingerprint();
        Ok(Self { config, fingerprint })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn build(&self, init_seed: u64) -> NetworkParams {
        let mut rng = rng::stream(init_seed, "discriminator-init", 0);
        let mut tensors = ParamSet::new();
        let k = self.config.kernel_size;
        let mut cin = DISCRIMINATOR_CHANNELS;
        for (i, kernels) in self.config.kernel_counts().into_iter().enumerate() {
            conv_params(&mut tensors, &mut rng, &format!("conv{}", i + 1), cin, kernels, k);
            cin = kernels;
        }
        let s = self.config.final_spatial();
        let flat = cin * s * s;
        tensors.insert("fc.weight".into(), init_weight(&mut rng, &[1, flat], flat));
        tensors.insert("fc.bias".into(), ArrayD::zeros(IxDyn(&[1])));
        NetworkParams { tensors, fingerprint: self.fingerprint, iteration: 0 }
    }

    /// Record the forward pass on `(N, 1, S, S)` images; returns `(N, 1, 1, 1)` probabilities.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, images: Var, classes: &[Class]) -> Var {
        let size = tape.value(images).dim().2;
        let planes = tape.constant(class_planes(classes, size));
        let mut x = tape.concat(images, planes);
        let pad = self.config.kernel_size / 2;
        let slope = T::lit(self.config.leaky_slope);
        for i in 0..self.config.n_conv_layers {
            x = conv(tape, bound, &format!("conv{}", i + 1), x, pad);
            x = tape.leaky_relu(x, slope);
            x = tape.max_pool2(x);
        }
        let logit = tape.dense(x, bound.get("fc.weight"), bound.get("fc.bias"));
        tape.sigmoid(logit)
    }

    fn check_image(&self, dims: (usize, usize)) -> Result<()> {
        let r = self.config.input_resolution;
        if dims != (r, r) {
            return Err(Error::invalid(format!("discriminator expects {r}x{r} images, got {dims:?}")));
        }
        Ok(())
    }

    /// Probabilities for a batch of `(N, 1, S, S)` images.
    pub fn discriminate_batch(&self, params: &NetworkParams, images: &Array4<f32>, classes: &[Class]) -> Result<Vec<f32>> {
        params.ensure_fingerprint(&self.fingerprint)?;
        self.check_image((images.dim().2, images.dim().3))?;
        if images.dim().0 != classes.len() {
            return Err(Error::invalid("one class per image is required"));
        }
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &params.tensors, false);
        let x = tape.constant(images.clone());
        let p = self.forward(&mut tape, &bound, x, classes);
        Ok(tape.value(p).iter().copied().collect())
    }

    pub fn discriminate(&self, params: &NetworkParams, image: &Array2<f32>, cond_class: Class) -> Result<f32> {
        self.check_image(image.dim())?;
        let batch = stack_planes([image.view()]);
        Ok(self.discriminate_batch(params, &batch, &[cond_class])?[0])
    }
}
