//! Two-phase adversarial training: feature-loss pretraining of the
//! generator, then threshold-gated alternation between the networks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cigan_nn::{Adam, AdamConfig, Bound, ParamSet, Tape};
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::place_donor;
use crate::checkpoint::{self, Container, TensorData};
use crate::error::{Error, Result};
use crate::losses::{boundary_weight, discriminator_objective, generator_objective, LossWeights, PerceptualExtractor};
use crate::models::{fingerprint_of, Discriminator, Fingerprint, Generator, NetworkParams};
use crate::patch::{build_conditioned_input, stack_inputs, stack_planes, Class, LesionMask, Patch};
use crate::rng;

pub const METRICS_HEADER: &str = "iteration,phase,active,g_loss,d_loss,feat,bound,adv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Network {
    Generator,
    Discriminator,
}

impl Network {
    pub fn other(self) -> Network {
        match self {
            Network::Generator => Network::Discriminator,
            Network::Discriminator => Network::Generator,
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Network::Generator => "generator",
            Network::Discriminator => "discriminator",
        })
    }
}

/// Which generator loss is compared against the switch threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateLoss {
    /// The adversarial term `-mean(log D(fake))`.
    Adversarial,
    /// The full weighted objective.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub pretrain_iters: u64,
    pub joint_iters: u64,
    pub switch_threshold: f64,
    /// Consecutive steps on one network after which a switch is forced.
    pub max_consecutive: u64,
    pub gate_loss: GateLoss,
    pub checkpoint_every: u64,
    pub boundary_sigma: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            pretrain_iters: 10_000,
            joint_iters: 100_000,
            switch_threshold: 0.3,
            max_consecutive: 500,
            gate_loss: GateLoss::Adversarial,
            checkpoint_every: 5_000,
            boundary_sigma: crate::losses::BOUNDARY_SIGMA,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("gan_training.{field}"), msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.switch_threshold > 0.0) {
            return bad("switch_threshold", format!("must be positive, got {}", self.switch_threshold));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be at least 1".into());
        }
        if !(self.boundary_sigma >= 0.0) {
            return bad("boundary_sigma", "must be non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn total_iters(&self) -> u64 {
        self.pretrain_iters + self.joint_iters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchReason {
    Threshold,
    /// The consecutive-step cap was reached.
    Cap,
}

/// Decides which network trains next. Starts on the discriminator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlternationGate {
    pub threshold: f64,
    pub cap: u64,
    pub active: Network,
    pub consecutive: u64,
}

impl AlternationGate {
    pub fn new(threshold: f64, cap: u64) -> Self {
        Self::starting_on(threshold, cap, Network::Discriminator)
    }

    pub fn starting_on(threshold: f64, cap: u64, active: Network) -> Self {
        Self { threshold, cap, active, consecutive: 0 }
    }

    /// Record the loss of the step just taken by the active network.
    pub fn observe(&mut self, active_loss: f64) -> Option<SwitchReason> {
        self.consecutive += 1;
        let reason = if active_loss < self.threshold {
            Some(SwitchReason::Threshold)
        } else if self.cap > 0 && self.consecutive >= self.cap {
            Some(SwitchReason::Cap)
        } else {
            None
        };
        if reason.is_some() {
            self.active = self.active.other();
            self.consecutive = 0;
        }
        reason
    }
}

/// One training batch; every array is `(N, C, S, S)`.
#[derive(Debug, Clone)]
pub struct GanBatch {
    pub inputs: Array4<f32>,
    pub real: Array4<f32>,
    pub masks: Array4<f32>,
    pub boundary: Array4<f32>,
    pub classes: Vec<Class>,
}

pub trait BatchSource {
    fn batch(&self, iteration: u64, size: usize) -> Result<GanBatch>;
}

/// Uniform sampling with replacement from training patches, seeded per
/// iteration. Malignant patches are infilled inside their own lesion;
/// non-malignant patches inside a mask transplanted from a malignant one.
pub struct PatchStream {
    patches: Vec<Patch>,
    donors: Vec<LesionMask>,
    own_weights: Vec<Option<Array2<f32>>>,
    donor_masks: Vec<(LesionMask, Array2<f32>)>,
    seed: u64,
}

impl PatchStream {
    pub fn new(patches: Vec<Patch>, seed: u64, sigma: f64) -> Result<Self> {
        let size = match patches.first() {
            Some(p) => p.size(),
            None => return Err(Error::config("data.train", "the train split holds no patches")),
        };
        if let Some(p) = patches.iter().find(|p| p.size() != size) {
            return Err(Error::Data(format!("patch `{}` is {} pixels, expected {size}", p.id(), p.size())));
        }
        for class in Class::ALL {
            if !patches.iter().any(|p| p.label == class) {
                return Err(Error::config(
                    "data.train",
                    format!("train split has no {class} patches; class conditioning needs both classes"),
                ));
            }
        }
        let mut donors = Vec::new();
        let mut own_weights = Vec::with_capacity(patches.len());
        for p in &patches {
            if p.label == Class::Malignant {
                if p.mask.is_empty() {
                    return Err(Error::Data(format!("malignant patch `{}` has no lesion mask", p.id())));
                }
                donors.push(p.mask.clone());
                own_weights.push(Some(boundary_weight(p.mask.view(), sigma)));
            } else {
                own_weights.push(None);
            }
        }
        let donor_masks = (0..donors.len())
            .map(|i| {
                let m = place_donor((size, size), &donors[i..=i], 0, false)?.mask;
                let w = boundary_weight(m.view(), sigma);
                Ok((m, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { patches, donors, own_weights, donor_masks, seed })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

impl BatchSource for PatchStream {
    fn batch(&self, iteration: u64, size: usize) -> Result<GanBatch> {
        let mut rng = rng::stream(self.seed, "gan-batch", iteration);
        let mut inputs = Vec::with_capacity(size);
        let mut real = Vec::with_capacity(size);
        let mut masks = Vec::with_capacity(size);
        let mut weights = Vec::with_capacity(size);
        let mut classes = Vec::with_capacity(size);
        for b in 0..size as u64 {
            let slot = iteration * size as u64 + b;
            let i = rng.random_range(0..self.patches.len());
            let p = &self.patches[i];
            let (mask, w) = match &self.own_weights[i] {
                Some(w) => (&p.mask, w),
                None => {
                    let frame = p.image.dims();
                    let d = place_donor(frame, &self.donors, rng::derive_seed(self.seed, "gan-donor", slot), false)?.donor;
                    let (m, w) = &self.donor_masks[d];
                    (m, w)
                }
            };
            inputs.push(build_conditioned_input(p, mask, p.label, rng::derive_seed(self.seed, "gan-noise", slot))?);
            real.push(p.image.view());
            masks.push(mask.view());
            weights.push(w.view());
            classes.push(p.label);
        }
        Ok(GanBatch {
            inputs: stack_inputs(&inputs),
            real: stack_planes(real),
            masks: stack_planes(masks),
            boundary: stack_planes(weights),
            classes,
        })
    }
}

/// Networks and losses shared by every step.
#[derive(Debug, Clone)]
pub struct GanModels {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: PerceptualExtractor,
    pub weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed optimizer steps over both phases.
    pub iteration: u64,
    pub gate: AlternationGate,
    pub last_g_loss: Option<f64>,
    pub last_d_loss: Option<f64>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
}

impl TrainState {
    pub fn new(config: &GanTrainConfig) -> Self {
        Self {
            phase: if config.pretrain_iters > 0 { Phase::Pretrain } else { Phase::Joint },
            iteration: 0,
            gate: AlternationGate::new(config.switch_threshold, config.max_consecutive),
            last_g_loss: None,
            last_d_loss: None,
            adam_g: Adam::new(config.adam()),
            adam_d: Adam::new(config.adam()),
        }
    }

    /// The network trained by the next joint step.
    pub fn active_network(&self) -> Option<Network> {
        (self.phase == Phase::Joint).then_some(self.gate.active)
    }
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub phase: Phase,
    pub active: Option<Network>,
    pub g_loss: f64,
    pub d_loss: Option<f64>,
    pub feat: f64,
    pub bound: Option<f64>,
    pub adv: Option<f64>,
    pub switch: Option<SwitchReason>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.phase,
            self.active.map(|a| a.to_string()).unwrap_or_default(),
            self.g_loss,
            opt(self.d_loss),
            self.feat,
            opt(self.bound),
            opt(self.adv)
        )
    }
}

fn finite_or_diverged(iteration: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { iteration, what: format!("{what} is {v}") })
    }
}

fn to_f64(v: f32) -> f64 {
    // Round-trip through the shortest decimal so logged values print compactly.
    v.to_string().parse().expect("f32 formats as a float")
}

/// Generator and discriminator weights with their optimizer state.
pub struct GanTrainer<'a> {
    pub models: &'a GanModels,
    pub config: GanTrainConfig,
    pub generator: NetworkParams,
    pub discriminator: NetworkParams,
    pub state: TrainState,
}

impl<'a> GanTrainer<'a> {
    pub fn new(models: &'a GanModels, config: GanTrainConfig) -> Result<Self> {
        config.validate()?;
        models.weights.validate()?;
        let generator = models.generator.build(rng::derive_seed(config.seed, "generator", 0));
        let discriminator = models.discriminator.build(rng::derive_seed(config.seed, "discriminator", 0));
        let state = TrainState::new(&config);
        Ok(Self { models, config, generator, discriminator, state })
    }

    pub fn with_params(
        models: &'a GanModels,
        config: GanTrainConfig,
        generator: NetworkParams,
        discriminator: NetworkParams,
    ) -> Result<Self> {
        config.validate()?;
        generator.ensure_fingerprint(&models.generator.fingerprint())?;
        discriminator.ensure_fingerprint(&models.discriminator.fingerprint())?;
        let state = TrainState::new(&config);
        Ok(Self { models, config, generator, discriminator, state })
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.total_iters()
    }

    /// Fingerprint of everything that must match for a resume to be exact.
    pub fn fingerprint(&self) -> Fingerprint {
        #[derive(Serialize)]
        struct Key<'k> {
            generator: String,
            discriminator: String,
            extractor: String,
            weights: &'k LossWeights,
            lr: f64,
            betas: (f64, f64, f64),
            batch_size: usize,
            threshold: f64,
            cap: u64,
            gate: GateLoss,
            sigma: f64,
            seed: u64,
        }
        let c = &self.config;
        let key = Key {
            generator: crate::models::to_hex(&self.models.generator.fingerprint()),
            discriminator: crate::models::to_hex(&self.models.discriminator.fingerprint()),
            extractor: crate::models::to_hex(&self.models.extractor.params().checksum()),
            weights: &self.models.weights,
            lr: c.learning_rate,
            betas: (c.beta1, c.beta2, c.adam_eps),
            batch_size: c.batch_size,
            threshold: c.switch_threshold,
            cap: c.max_consecutive,
            gate: c.gate_loss,
            sigma: c.boundary_sigma,
            seed: c.seed,
        };
        fingerprint_of("gan-trainer", &key)
    }

    /// Run one step, drawing the batch for the next iteration from `source`.
    pub fn step(&mut self, source: &dyn BatchSource) -> Result<StepMetrics> {
        let batch = source.batch(self.state.iteration, self.config.batch_size)?;
        if self.state.iteration < self.config.pretrain_iters {
            self.pretrain_step(&batch)
        } else {
            self.state.phase = Phase::Joint;
            self.joint_step(&batch)
        }
    }

    fn pretrain_step(&mut self, batch: &GanBatch) -> Result<StepMetrics> {
        let it = self.state.iteration + 1;
        let m = self.models;
        let mut tape = Tape::<f32>::new();
        let gb = Bound::new(&mut tape, &self.generator.tensors, true);
        let pyramid = m.generator.input_pyramid::<f32>(&batch.inputs)?;
        let raw = m.generator.forward(&mut tape, &gb, &pyramid);
        let s = tape.composite(raw, &batch.masks, &batch.real);
        let eb = m.extractor.bind(&mut tape);
        let terms = generator_objective(&mut tape, &m.extractor, &eb, &batch.real, s, None, None, &m.weights);
        let feat = finite_or_diverged(it, "feature loss", to_f64(tape.scalar(terms.feature)))?;
        let total = finite_or_diverged(it, "generator loss", to_f64(tape.scalar(terms.total)))?;
        let mut grads = tape.backward(terms.total);
        let g = gb.collect_grads(&mut grads, &self.generator.tensors);
        self.state.adam_g.update(&mut self.generator.tensors, &g, self.config.learning_rate);
        self.finish(it, Network::Generator)?;
        self.state.phase = if it < self.config.pretrain_iters { Phase::Pretrain } else { Phase::Joint };
        self.state.last_g_loss = Some(total);
        Ok(StepMetrics {
            iteration: it,
            phase: Phase::Pretrain,
            active: None,
            g_loss: total,
            d_loss: None,
            feat,
            bound: None,
            adv: None,
            switch: None,
        })
    }

    fn joint_step(&mut self, batch: &GanBatch) -> Result<StepMetrics> {
        let it = self.state.iteration + 1;
        let m = self.models;
        let active = self.state.gate.active;
        let mut tape = Tape::<f32>::new();
        let gb = Bound::new(&mut tape, &self.generator.tensors, active == Network::Generator);
        let db = Bound::new(&mut tape, &self.discriminator.tensors, active == Network::Discriminator);
        let pyramid = m.generator.input_pyramid::<f32>(&batch.inputs)?;
        let raw = m.generator.forward(&mut tape, &gb, &pyramid);
        let s = tape.composite(raw, &batch.masks, &batch.real);
        let r = tape.constant(batch.real.clone());
        let d_real = m.discriminator.forward(&mut tape, &db, r, &batch.classes);
        let d_fake = m.discriminator.forward(&mut tape, &db, s, &batch.classes);
        let d_loss_var = discriminator_objective(&mut tape, d_real, d_fake);
        let eb = m.extractor.bind(&mut tape);
        let terms = generator_objective(
            &mut tape,
            &m.extractor,
            &eb,
            &batch.real,
            s,
            Some(&batch.boundary),
            Some(d_fake),
            &m.weights,
        );
        let value = |v| to_f64(tape.scalar(v));
        let d_loss = finite_or_diverged(it, "discriminator loss", value(d_loss_var))?;
        let g_loss = finite_or_diverged(it, "generator loss", value(terms.total))?;
        let feat = value(terms.feature);
        let bound = terms.boundary.map(value);
        let adv = terms.adversarial.map(value).expect("adversarial term present");
        match active {
            Network::Generator => {
                let mut grads = tape.backward(terms.total);
                let g = gb.collect_grads(&mut grads, &self.generator.tensors);
                self.state.adam_g.update(&mut self.generator.tensors, &g, self.config.learning_rate);
            }
            Network::Discriminator => {
                let mut grads = tape.backward(d_loss_var);
                let g = db.collect_grads(&mut grads, &self.discriminator.tensors);
                self.state.adam_d.update(&mut self.discriminator.tensors, &g, self.config.learning_rate);
            }
        }
        self.finish(it, active)?;
        self.state.last_g_loss = Some(g_loss);
        self.state.last_d_loss = Some(d_loss);
        let gate_value = match (active, self.config.gate_loss) {
            (Network::Discriminator, _) => d_loss,
            (Network::Generator, GateLoss::Adversarial) => adv,
            (Network::Generator, GateLoss::Total) => g_loss,
        };
        let switch = self.state.gate.observe(gate_value);
        Ok(StepMetrics {
            iteration: it,
            phase: Phase::Joint,
            active: Some(active),
            g_loss,
            d_loss: Some(d_loss),
            feat,
            bound,
            adv: Some(adv),
            switch,
        })
    }

    fn finish(&mut self, it: u64, updated: Network) -> Result<()> {
        let params = match updated {
            Network::Generator => &mut self.generator,
            Network::Discriminator => &mut self.discriminator,
        };
        if !params.all_finite() {
            return Err(Error::Divergence { iteration: it, what: format!("{updated} weights became non-finite") });
        }
        self.generator.iteration = it;
        self.discriminator.iteration = it;
        self.state.iteration = it;
        Ok(())
    }

    /// Serialize optimizer moments and loop state.
    pub fn state_container(&self) -> Container {
        let mut tensors = BTreeMap::new();
        let mut put = |prefix: &str, set: &ParamSet<f32>| {
            for (k, v) in set {
                tensors.insert(format!("{prefix}/{k}"), TensorData::F32(v.clone()));
            }
        };
        put("adam_g.m", &self.state.adam_g.first_moment);
        put("adam_g.v", &self.state.adam_g.second_moment);
        put("adam_d.m", &self.state.adam_d.first_moment);
        put("adam_d.v", &self.state.adam_d.second_moment);
        let s = &self.state;
        let scalars = vec![
            if s.phase == Phase::Joint { 1.0 } else { 0.0 },
            if s.gate.active == Network::Generator { 1.0 } else { 0.0 },
            s.gate.consecutive as f64,
            s.last_g_loss.unwrap_or(f64::NAN),
            s.last_d_loss.unwrap_or(f64::NAN),
            s.adam_g.step as f64,
            s.adam_d.step as f64,
        ];
        tensors.insert("state".into(), TensorData::F64(ArrayD::from_shape_vec(IxDyn(&[7]), scalars).expect("7")));
        Container { fingerprint: self.fingerprint(), iteration: s.iteration, tensors }
    }

    pub fn restore_state(&mut self, c: Container) -> Result<()> {
        if c.fingerprint != self.fingerprint() {
            return Err(Error::IncompatibleCheckpoint(
                "trainer state was written for a different model, loss or optimizer configuration".into(),
            ));
        }
        let mut sets: BTreeMap<&str, ParamSet<f32>> = BTreeMap::new();
        let mut scalars = None;
        for (name, t) in c.tensors {
            match (name.split_once('/'), t) {
                (Some((prefix, key)), TensorData::F32(a)) => {
                    let prefix = match prefix {
                        "adam_g.m" => "adam_g.m",
                        "adam_g.v" => "adam_g.v",
                        "adam_d.m" => "adam_d.m",
                        "adam_d.v" => "adam_d.v",
                        other => return Err(Error::CorruptCheckpoint(format!("unexpected trainer tensor group `{other}`"))),
                    };
                    sets.entry(prefix).or_default().insert(key.to_string(), a);
                }
                (None, TensorData::F64(a)) if name == "state" && a.len() == 7 => scalars = Some(a),
                _ => return Err(Error::CorruptCheckpoint(format!("unexpected trainer tensor `{name}`"))),
            }
        }
        let s = scalars.ok_or_else(|| Error::CorruptCheckpoint("trainer state vector missing".into()))?;
        let s: Vec<f64> = s.iter().copied().collect();
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        let st = &mut self.state;
        st.iteration = c.iteration;
        st.phase = if s[0] == 1.0 { Phase::Joint } else { Phase::Pretrain };
        st.gate.active = if s[1] == 1.0 { Network::Generator } else { Network::Discriminator };
        st.gate.consecutive = s[2] as u64;
        st.last_g_loss = opt(s[3]);
        st.last_d_loss = opt(s[4]);
        st.adam_g.step = s[5] as u64;
        st.adam_d.step = s[6] as u64;
        st.adam_g.first_moment = sets.remove("adam_g.m").unwrap_or_default();
        st.adam_g.second_moment = sets.remove("adam_g.v").unwrap_or_default();
        st.adam_d.first_moment = sets.remove("adam_d.m").unwrap_or_default();
        st.adam_d.second_moment = sets.remove("adam_d.v").unwrap_or_default();
        Ok(())
    }
}

/// Run `config.pretrain_iters` feature-loss steps from `params`, returning
/// the trained weights and the per-iteration (unweighted) feature loss.
pub fn pretrain_generator(
    models: &GanModels,
    params: NetworkParams,
    source: &dyn BatchSource,
    config: &GanTrainConfig,
) -> Result<(NetworkParams, Vec<f64>)> {
    let cfg = GanTrainConfig { joint_iters: 0, ..config.clone() };
    let disc = models.discriminator.build(0);
    let mut t = GanTrainer::with_params(models, cfg, params, disc)?;
    let mut history = Vec::with_capacity(config.pretrain_iters as usize);
    while !t.is_done() {
        history.push(t.step(source)?.feat);
    }
    Ok((t.generator, history))
}

/// Paths written for one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSet {
    pub iteration: u64,
    pub generator: PathBuf,
    pub discriminator: PathBuf,
    pub trainer: PathBuf,
}

impl CheckpointSet {
    pub fn at(dir: &Path, iteration: u64) -> Self {
        Self {
            iteration,
            generator: dir.join(format!("generator_{iteration:08}.cign")),
            discriminator: dir.join(format!("discriminator_{iteration:08}.cign")),
            trainer: dir.join(format!("trainer_{iteration:08}.cign")),
        }
    }

    /// The set a trainer-state path belongs to.
    pub fn from_trainer_path(path: &Path) -> Result<Self> {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let it = stem
            .strip_prefix("trainer_")
            .and_then(|n| n.parse::<u64>().ok())
            .ok_or_else(|| Error::invalid(format!("`{}` is not a trainer checkpoint path", path.display())))?;
        Ok(Self::at(path.parent().unwrap_or(Path::new(".")), it))
    }
}

#[derive(Debug, Clone)]
pub struct GanRun {
    pub final_iteration: u64,
    pub checkpoints: Vec<CheckpointSet>,
    pub generator: NetworkParams,
    pub discriminator: NetworkParams,
    pub forced_switches: u64,
}

fn save_set(t: &GanTrainer<'_>, dir: &Path) -> Result<CheckpointSet> {
    let set = CheckpointSet::at(dir, t.state.iteration);
    checkpoint::save_checkpoint(&set.generator, &t.generator)?;
    checkpoint::save_checkpoint(&set.discriminator, &t.discriminator)?;
    checkpoint::save_container(&set.trainer, &t.state_container())?;
    Ok(set)
}

/// Keep the header and the first `rows` data rows of a metrics file.
fn truncate_metrics(path: &Path, rows: u64) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i as u64 > rows {
            break;
        }
        kept.push(line);
    }
    if kept.first().map(String::as_str) != Some(METRICS_HEADER) || kept.len() as u64 != rows + 1 {
        return Err(Error::Data(format!("{} does not hold {rows} metrics rows to resume from", path.display())));
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Drop event lines logged after `iteration`.
fn truncate_events(path: &Path, iteration: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let logged_at = |line: &str| {
        line.strip_prefix("iteration ")
            .and_then(|r| r.split(':').next())
            .and_then(|n| n.parse::<u64>().ok())
    };
    let kept: String = text
        .lines()
        .filter(|l| logged_at(l).is_some_and(|it| it <= iteration))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Train both phases, writing `metrics.csv`, `events.log` and
/// `checkpoints/` under `run_dir`. With `resume` (a trainer checkpoint
/// path) training continues from that iteration and later metrics rows
/// are identical to an uninterrupted run.
pub fn train_gan(
    models: &GanModels,
    config: &GanTrainConfig,
    source: &dyn BatchSource,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<GanRun> {
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = run_dir.join("metrics.csv");
    let events_path = run_dir.join("events.log");
    let mut trainer = match resume {
        None => {
            let t = GanTrainer::new(models, config.clone())?;
            fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
            fs::write(&events_path, "").map_err(|e| Error::io(&events_path, e))?;
            t
        }
        Some(path) => {
            let set = CheckpointSet::from_trainer_path(path)?;
            let g = checkpoint::load_checkpoint(&set.generator, Some(&models.generator.fingerprint()))?;
            let d = checkpoint::load_checkpoint(&set.discriminator, Some(&models.discriminator.fingerprint()))?;
            let mut t = GanTrainer::with_params(models, config.clone(), g, d)?;
            t.restore_state(checkpoint::load_container(&set.trainer)?)?;
            if t.generator.iteration != set.iteration || t.state.iteration != set.iteration {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "checkpoint files for iteration {} disagree on their iteration",
                    set.iteration
                )));
            }
            truncate_metrics(&metrics_path, set.iteration)?;
            truncate_events(&events_path, set.iteration)?;
            t
        }
    };
    let open = |p: &Path| OpenOptions::new().append(true).create(true).open(p).map_err(|e| Error::io(p, e));
    let mut metrics = BufWriter::new(open(&metrics_path)?);
    let mut events = BufWriter::new(open(&events_path)?);
    let mut checkpoints = Vec::new();
    let mut forced = 0;
    let total = config.total_iters();
    while !trainer.is_done() {
        let row = trainer.step(source)?;
        writeln!(metrics, "{}", row.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        if row.switch == Some(SwitchReason::Cap) {
            forced += 1;
            let from = row.active.expect("joint step");
            writeln!(
                events,
                "iteration {}: {} consecutive {from} steps without reaching {}; switching to {}",
                row.iteration,
                config.max_consecutive,
                config.switch_threshold,
                from.other()
            )
            .map_err(|e| Error::io(&events_path, e))?;
        }
        let it = trainer.state.iteration;
        if it % config.checkpoint_every == 0 || it == total || it == config.pretrain_iters {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            checkpoints.push(save_set(&trainer, &ckpt_dir)?);
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    events.flush().map_err(|e| Error::io(&events_path, e))?;
    checkpoint::save_checkpoint(&ckpt_dir.join("generator.cign"), &trainer.generator)?;
    checkpoint::save_checkpoint(&ckpt_dir.join("discriminator.cign"), &trainer.discriminator)?;
    Ok(GanRun {
        final_iteration: trainer.state.iteration,
        checkpoints,
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        forced_switches: forced,
    })
}

/// The `(N, 1, S, S)` slice of one batch element.
pub fn batch_item(a: &Array4<f32>, i: usize) -> Array2<f32> {
    a.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(losses: &[f64], start: Network, cap: u64) -> Vec<Network> {
        let mut g = AlternationGate::starting_on(0.3, cap, start);
        let mut seen = Vec::new();
        for &l in losses {
            seen.push(g.active);
            g.observe(l);
        }
        seen.push(g.active);
        seen
    }

    #[test]
    fn gate_follows_threshold() {
        use Network::*;
        assert_eq!(trace(&[0.5, 0.4, 0.2, 0.5, 0.1], Generator, 500), vec![
            Generator,
            Generator,
            Generator,
            Discriminator,
            Discriminator,
            Generator
        ]);
        assert_eq!(trace(&[0.25], Generator, 500), vec![Generator, Discriminator]);
        assert_eq!(trace(&[0.35], Generator, 500), vec![Generator, Generator]);
        assert_eq!(trace(&[0.3], Generator, 500), vec![Generator, Generator]);
    }

    #[test]
    fn gate_cap_forces_switch() {
        let mut g = AlternationGate::new(0.3, 3);
        assert_eq!(g.active, Network::Discriminator);
        assert_eq!(g.observe(1.0), None);
        assert_eq!(g.observe(1.0), None);
        assert_eq!(g.observe(1.0), Some(SwitchReason::Cap));
        assert_eq!(g.active, Network::Generator);
        assert_eq!(g.consecutive, 0);
        assert_eq!(g.observe(0.1), Some(SwitchReason::Threshold));
        assert_eq!(g.active, Network::Discriminator);
    }

    #[test]
    fn trainer_path_parsing() {
        let s = CheckpointSet::from_trainer_path(Path::new("/r/checkpoints/trainer_00000042.cign")).unwrap();
        assert_eq!(s.iteration, 42);
        assert_eq!(s.generator, Path::new("/r/checkpoints/generator_00000042.cign"));
        assert!(CheckpointSet::from_trainer_path(Path::new("x/generator_1.cign")).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GanTrainConfig::default().validate().is_ok());
        let bad = GanTrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = GanTrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
