//! Downstream patch classifier, curriculum mixing of real and synthetic
//! data, traditional affine augmentation, and the three training schemes.

use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use cigan_nn::{Adam, AdamConfig, Bound, ParamSet, Real, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::losses::PROB_EPS;
use crate::models::{conv, conv_params, fingerprint_of, init_weight, Fingerprint, NetworkParams};
use crate::patch::{stack_planes, LesionMask, Patch};
use crate::raster::GrayscaleImage;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Conv/ReLU/max-pool blocks, global average pooling, sigmoid unit.
    SmallCnn,
    /// The same stages built from two-conv residual blocks with 1×1 projections.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ClassifierInit {
    SeededRandom,
    /// Start from a checkpoint holding every tensor of the built network.
    Pretrained { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub architecture: Architecture,
    pub init: ClassifierInit,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    pub input_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_decay: f64,
    pub decay_every: u64,
    pub val_every: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            init: ClassifierInit::SeededRandom,
            channels: vec![16, 32, 64, 128],
            input_size: 256,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            iterations: 10_000,
            lr_decay: 0.9,
            decay_every: 2_000,
            val_every: 500,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("classifier.{field}"), msg));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels", "need at least one positive channel count".into());
        }
        if self.input_size == 0 || self.input_size % (1 << self.channels.len()) != 0 {
            return bad(
                "input_size",
                format!("{} is not divisible by 2^{} pooling stages", self.input_size, self.channels.len()),
            );
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", format!("decay factor must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.decay_every == 0 || self.val_every == 0 {
            return bad("decay_every", "decay and validation cadences must be positive".into());
        }
        Ok(())
    }

    /// `lr · decay^floor(iteration / decay_every)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.learning_rate * self.lr_decay.powi((iteration / self.decay_every) as i32)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    /// Fingerprint of the network shape (optimizer settings excluded).
    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_of("classifier", &(self.architecture, &self.channels, self.input_size))
    }
}

/// Binary patch classifier producing `P(malignant)`.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    fingerprint: Fingerprint,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let fingerprint = config.fingerprint();
        Ok(Self { config, fingerprint })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn build(&self, init_seed: u64) -> NetworkParams {
        let mut rng = rng::stream(init_seed, "classifier-init", 0);
        let mut tensors = ParamSet::new();
        let mut cin = 1;
        for (i, &c) in self.config.channels.iter().enumerate() {
            let b = i + 1;
            match self.config.architecture {
                Architecture::SmallCnn => conv_params(&mut tensors, &mut rng, &format!("block{b}.conv"), cin, c, 3),
                Architecture::Residual => {
                    conv_params(&mut tensors, &mut rng, &format!("block{b}.conv1"), cin, c, 3);
                    conv_params(&mut tensors, &mut rng, &format!("block{b}.conv2"), c, c, 3);
                    conv_params(&mut tensors, &mut rng, &format!("block{b}.skip"), cin, c, 1);
                }
            }
            cin = c;
        }
        tensors.insert("fc.weight".into(), init_weight(&mut rng, &[1, cin], cin));
        tensors.insert("fc.bias".into(), ArrayD::zeros(IxDyn(&[1])));
        NetworkParams { tensors, fingerprint: self.fingerprint, iteration: 0 }
    }

    /// Initial weights according to `config.init`.
    pub fn initial_params(&self, seed: u64) -> Result<NetworkParams> {
        let built = self.build(seed);
        match &self.config.init {
            ClassifierInit::SeededRandom => Ok(built),
            ClassifierInit::Pretrained { path } => {
                let mut loaded = checkpoint::load_checkpoint(path, None)?;
                for (name, t) in &built.tensors {
                    if loaded.shape(name) != Some(t.shape()) {
                        return Err(Error::IncompatibleCheckpoint(format!(
                            "{}: tensor `{name}` should have shape {:?}, found {:?}",
                            path.display(),
                            t.shape(),
                            loaded.shape(name)
                        )));
                    }
                }
                loaded.tensors.retain(|k, _| built.tensors.contains_key(k));
                loaded.fingerprint = self.fingerprint;
                loaded.iteration = 0;
                Ok(loaded)
            }
        }
    }

    /// `(N, 1, 1, 1)` malignancy probabilities for `(N, 1, S, S)` images.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Var {
        let mut x = images;
        for b in 1..=self.config.channels.len() {
            x = match self.config.architecture {
                Architecture::SmallCnn => {
                    let y = conv(tape, bound, &format!("block{b}.conv"), x, 1);
                    tape.relu(y)
                }
                Architecture::Residual => {
                    let y = conv(tape, bound, &format!("block{b}.conv1"), x, 1);
                    let y = tape.relu(y);
                    let y = conv(tape, bound, &format!("block{b}.conv2"), y, 1);
                    let skip = conv(tape, bound, &format!("block{b}.skip"), x, 0);
                    let y = tape.add(y, skip);
                    tape.relu(y)
                }
            };
            x = tape.max_pool2(x);
        }
        let pooled = tape.global_avg_pool(x);
        let logit = tape.dense(pooled, bound.get("fc.weight"), bound.get("fc.bias"));
        tape.sigmoid(logit)
    }

    pub fn predict(&self, params: &NetworkParams, patches: &[Patch]) -> Result<Vec<f32>> {
        params.ensure_fingerprint(&self.fingerprint)?;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(64) {
            for p in chunk {
                if p.size() != self.config.input_size {
                    return Err(Error::invalid(format!(
                        "classifier expects {} pixel patches, `{}` is {}",
                        self.config.input_size,
                        p.id(),
                        p.size()
                    )));
                }
            }
            let mut tape = Tape::<f32>::new();
            let bound = Bound::new(&mut tape, &params.tensors, false);
            let x = tape.constant(stack_planes(chunk.iter().map(|p| p.image.view())));
            let prob = self.forward(&mut tape, &bound, x);
            out.extend(tape.value(prob).iter().copied());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Growth {
    /// `base · growth^k`.
    Multiplicative,
    /// `base + increment · k`.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub base_real_fraction: f64,
    pub step_every: u64,
    pub mode: Growth,
    pub growth: f64,
    pub increment: f64,
    pub cap: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self { base_real_fraction: 0.5, step_every: 1000, mode: Growth::Multiplicative, growth: 1.2, increment: 0.2, cap: 0.9 }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("curriculum.{field}"), msg));
        if !(0.0..=1.0).contains(&self.base_real_fraction) {
            return bad("base_real_fraction", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cap) {
            return bad("cap", "must lie in [0, 1]");
        }
        if self.step_every == 0 {
            return bad("step_every", "must be positive");
        }
        if self.growth < 1.0 || self.increment < 0.0 {
            return bad("growth", "schedule must be nondecreasing");
        }
        Ok(())
    }
}

/// Fraction of real examples in the batch at `iteration`.
pub fn real_fraction(iteration: u64, schedule: &CurriculumSchedule) -> f64 {
    let k = iteration / schedule.step_every;
    let raw = match schedule.mode {
        Growth::Multiplicative => schedule.base_real_fraction * schedule.growth.powi(k.min(i32::MAX as u64) as i32),
        Growth::Additive => schedule.base_real_fraction + schedule.increment * k as f64,
    };
    raw.min(schedule.cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Real,
    Synthetic,
}

/// Pool and index of each batch slot: `round(batch_size · fraction)` real
/// slots first, the remainder synthetic, each drawn uniformly with replacement.
pub fn curriculum_batch(
    real_len: usize,
    synthetic_len: usize,
    fraction: f64,
    batch_size: usize,
    iteration: u64,
    seed: u64,
) -> Result<Vec<(Pool, usize)>> {
    let n_real = (batch_size as f64 * fraction).round() as usize;
    let n_syn = batch_size - n_real.min(batch_size);
    if n_real > 0 && real_len == 0 {
        return Err(Error::config("data.train", "the real pool is empty"));
    }
    if n_syn > 0 && synthetic_len == 0 {
        return Err(Error::config("data.synthetic", "the synthetic pool is empty"));
    }
    let mut rng = rng::stream(seed, "classifier-batch", iteration);
    let mut out = Vec::with_capacity(batch_size);
    out.extend((0..n_real).map(|_| (Pool::Real, rng.random_range(0..real_len))));
    out.extend((0..n_syn).map(|_| (Pool::Synthetic, rng.random_range(0..synthetic_len))));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub max_rotation_deg: f64,
    pub flip_probability: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { max_rotation_deg: 30.0, flip_probability: 0.5, scale_min: 0.75, scale_max: 1.25 }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self { max_rotation_deg: 0.0, flip_probability: 0.0, scale_min: 1.0, scale_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0) || !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("augmentation", "rotation must be >= 0 and flip probability in [0, 1]"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config("augmentation.scale_min", "need 0 < scale_min <= scale_max"));
        }
        Ok(())
    }

    /// Draw one transform.
    pub fn sample(&self, seed: u64) -> AffineDraw {
        let mut rng = rng::seeded(seed);
        let r = self.max_rotation_deg;
        let angle_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let flip = self.flip_probability > 0.0 && rng.random_bool(self.flip_probability);
        let scale = if self.scale_max > self.scale_min { rng.random_range(self.scale_min..=self.scale_max) } else { self.scale_min };
        AffineDraw { angle_deg, flip, scale }
    }
}

/// Rotation (counter-clockwise as displayed), then horizontal flip, then
/// scaling, all about the patch centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    pub angle_deg: f64,
    pub flip: bool,
    pub scale: f64,
}

impl AffineDraw {
    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0 && !self.flip && self.scale == 1.0
    }

    /// Where source pixel `(y, x)` lands in an `n × n` frame.
    pub fn forward_point(&self, y: f64, x: f64, n: usize) -> (f64, f64) {
        let c = (n as f64 - 1.0) / 2.0;
        let (s, co) = (self.angle_deg * PI / 180.0).sin_cos();
        let (dx, dy) = (x - c, y - c);
        let (mut rx, ry) = (co * dx + s * dy, -s * dx + co * dy);
        if self.flip {
            rx = -rx;
        }
        (c + self.scale * ry, c + self.scale * rx)
    }

    fn inverse_point(&self, y: f64, x: f64, n: usize) -> (f64, f64) {
        let c = (n as f64 - 1.0) / 2.0;
        let (s, co) = (self.angle_deg * PI / 180.0).sin_cos();
        let (mut fx, fy) = ((x - c) / self.scale, (y - c) / self.scale);
        if self.flip {
            fx = -fx;
        }
        (c + s * fx + co * fy, c + co * fx - s * fy)
    }

    /// Bilinear resampling with zero fill outside the source frame.
    pub fn apply(&self, src: &Array2<f32>) -> Array2<f32> {
        let (n, _) = src.dim();
        let at = |y: i64, x: i64| -> f64 {
            if y < 0 || x < 0 || y >= n as i64 || x >= n as i64 {
                0.0
            } else {
                src[[y as usize, x as usize]] as f64
            }
        };
        Array2::from_shape_fn(src.dim(), |(y, x)| {
            let (sy, sx) = self.inverse_point(y as f64, x as f64, n);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
            v.clamp(0.0, 1.0) as f32
        })
    }

    /// Nearest-neighbour resampling for binary masks.
    pub fn apply_nearest(&self, src: &Array2<f32>) -> Array2<f32> {
        let (n, _) = src.dim();
        Array2::from_shape_fn(src.dim(), |(y, x)| {
            let (sy, sx) = self.inverse_point(y as f64, x as f64, n);
            let (yy, xx) = (sy.round(), sx.round());
            if yy < 0.0 || xx < 0.0 || yy >= n as f64 || xx >= n as f64 {
                0.0
            } else {
                src[[yy as usize, xx as usize]]
            }
        })
    }
}

/// One random rotation, flip and rescale of a patch and its mask; the
/// label is kept.
pub fn apply_traditional_augmentation(patch: &Patch, policy: &AugmentationPolicy, seed: u64) -> Result<Patch> {
    let draw = policy.sample(seed);
    if draw.is_identity() {
        return Ok(patch.clone());
    }
    let mut out = patch.clone();
    out.image = GrayscaleImage::new(draw.apply(patch.image.pixels()))?;
    out.mask = LesionMask::new(draw.apply_nearest(patch.mask.pixels()))?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    None,
    Traditional,
    Cigan,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::None, Scheme::Traditional, Scheme::Cigan];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::Traditional => "traditional",
            Scheme::Cigan => "cigan",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Scheme::None => "Baseline (no augmentation)",
            Scheme::Traditional => "Traditional augmentation",
            Scheme::Cigan => "ciGAN + Traditional aug",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "traditional" => Ok(Scheme::Traditional),
            "cigan" | "cigan+traditional" => Ok(Scheme::Cigan),
            other => Err(Error::invalid(format!("unknown scheme `{other}` (none, traditional, cigan)"))),
        }
    }
}

pub struct ClassifierData<'a> {
    pub train: &'a [Patch],
    pub val: &'a [Patch],
    pub synthetic: &'a [Patch],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMetrics {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub real_fraction: f64,
    pub val_auc: Option<f64>,
}

pub const CLASSIFIER_METRICS_HEADER: &str = "iteration,lr,loss,real_fraction,val_auc";

impl ClassifierMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration,
            self.lr,
            self.loss,
            self.real_fraction,
            self.val_auc.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierRun {
    pub best: NetworkParams,
    pub best_iteration: u64,
    pub best_val_auc: Option<f64>,
    pub last: NetworkParams,
    pub metrics: Vec<ClassifierMetrics>,
}

fn validation_auc(model: &Classifier, params: &NetworkParams, val: &[Patch]) -> Result<Option<f64>> {
    let pos = val.iter().filter(|p| p.label.target() == 1.0).count();
    if pos == 0 || pos == val.len() {
        return Ok(None);
    }
    let scores: Vec<f64> = model.predict(params, val)?.into_iter().map(f64::from).collect();
    let labels: Vec<u8> = val.iter().map(|p| p.label.target() as u8).collect();
    roc_auc(&scores, &labels).map(Some)
}

/// Train for `config.iterations` steps under `scheme`. The returned best
/// parameters are those with the highest validation AUC (latest on ties);
/// without a two-class validation set they are the final parameters.
pub fn train_classifier(
    model: &Classifier,
    scheme: Scheme,
    data: &ClassifierData<'_>,
    schedule: &CurriculumSchedule,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<ClassifierRun> {
    let cfg = model.config();
    schedule.validate()?;
    policy.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("data.train", "no training patches"));
    }
    if scheme == Scheme::Cigan && data.synthetic.is_empty() {
        return Err(Error::config("data.synthetic", "the cigan scheme needs a synthetic pool"));
    }
    let mut params = model.initial_params(rng::derive_seed(seed, "classifier", 0))?;
    let mut adam = Adam::<f32>::new(cfg.adam());
    let mut metrics = Vec::with_capacity(cfg.iterations as usize);
    let mut best: Option<(f64, u64, NetworkParams)> = None;
    for i in 0..cfg.iterations {
        let fraction = if scheme == Scheme::Cigan { real_fraction(i, schedule) } else { 1.0 };
        let slots = curriculum_batch(data.train.len(), data.synthetic.len(), fraction, cfg.batch_size, i, seed)?;
        let mut batch = Vec::with_capacity(slots.len());
        for (b, (pool, idx)) in slots.into_iter().enumerate() {
            let p = match pool {
                Pool::Real => &data.train[idx],
                Pool::Synthetic => &data.synthetic[idx],
            };
            let slot = i * cfg.batch_size as u64 + b as u64;
            batch.push(match scheme {
                Scheme::None => p.clone(),
                _ => apply_traditional_augmentation(p, policy, rng::derive_seed(seed, "augment", slot))?,
            });
        }
        let targets: Vec<f32> = batch.iter().map(|p| p.label.target()).collect();
        let lr = cfg.lr_at(i);
        let mut tape = Tape::<f32>::new();
        let bound = Bound::new(&mut tape, &params.tensors, true);
        let x = tape.constant(stack_planes(batch.iter().map(|p| p.image.view())));
        let prob = model.forward(&mut tape, &bound, x);
        let loss_var = tape.bce(prob, &targets, PROB_EPS as f32);
        let loss = tape.scalar(loss_var) as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: i + 1, what: format!("classifier loss is {loss}") });
        }
        let mut grads = tape.backward(loss_var);
        let g = bound.collect_grads(&mut grads, &params.tensors);
        adam.update(&mut params.tensors, &g, lr);
        params.iteration = i + 1;
        if !params.all_finite() {
            return Err(Error::Divergence { iteration: i + 1, what: "classifier weights became non-finite".into() });
        }
        let it = i + 1;
        let val_auc = if it % cfg.val_every == 0 || it == cfg.iterations {
            validation_auc(model, &params, data.val)?
        } else {
            None
        };
        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc >= *b) {
                best = Some((auc, it, params.clone()));
            }
        }
        let loss = format!("{}", loss as f32).parse().expect("float");
        metrics.push(ClassifierMetrics { iteration: it, lr, loss, real_fraction: fraction, val_auc });
    }
    let (best_val_auc, best_iteration, best_params) = match best {
        Some((a, i, p)) => (Some(a), i, p),
        None => (None, params.iteration, params.clone()),
    };
    Ok(ClassifierRun { best: best_params, best_iteration, best_val_auc, last: params, metrics })
}
