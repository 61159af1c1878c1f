//! Feature, adversarial and boundary losses and their weighted sum.

use std::path::PathBuf;

use cigan_nn::{cast_params, Bound, Real, Tape, Var};
use ndarray::{Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::models::{conv, conv_params, fingerprint_of, Fingerprint, NetworkParams};
use crate::patch::stack_planes;
use crate::rng;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Standard deviation of the boundary blur.
pub const BOUNDARY_SIGMA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub feature: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adversarial: 1.0, feature: 10.0, boundary: 10000.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("adversarial", self.adversarial), ("feature", self.feature), ("boundary", self.boundary)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("losses.weights.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Output channels of the three conv + pool stages.
    pub channels: [usize; 3],
    pub kernel_size: usize,
    /// Channels the extractor expects; grayscale is replicated to fill them.
    pub input_channels: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64], kernel_size: 3, input_channels: 3 }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("losses.extractor.channels", "channel counts must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("losses.extractor.kernel_size", "kernel size must be odd"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("losses.extractor.input_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_of("extractor", self)
    }
}

/// Where the extractor's frozen weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ExtractorSource {
    SeededRandom { seed: u64 },
    /// A checkpoint with `stage{1,2,3}.weight` / `.bias` tensors of the
    /// configured shapes (for example converted classification backbone weights).
    Pretrained { path: PathBuf },
}

impl Default for ExtractorSource {
    fn default() -> Self {
        Self::SeededRandom { seed: 0 }
    }
}

/// Frozen three-stage conv/ReLU/max-pool network. Taps are the post-pool
/// outputs of each stage.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    config: ExtractorConfig,
    source: ExtractorSource,
    params: NetworkParams,
}

impl PerceptualExtractor {
    pub fn seeded_random(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "extractor-init", 0);
        let mut tensors = cigan_nn::ParamSet::new();
        let mut cin = config.input_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            conv_params(&mut tensors, &mut rng, &format!("stage{}", i + 1), cin, c, config.kernel_size);
            cin = c;
        }
        let params = NetworkParams { tensors, fingerprint: config.fingerprint(), iteration: 0 };
        Ok(Self { config, source: ExtractorSource::SeededRandom { seed }, params })
    }

    pub fn from_params(config: ExtractorConfig, params: NetworkParams, path: PathBuf) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut cin = config.input_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let expect_w = [c, cin, k, k];
            let got_w = params.shape(&format!("{name}.weight"));
            let got_b = params.shape(&format!("{name}.bias"));
            if got_w != Some(&expect_w[..]) || got_b != Some(&[c][..]) {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "extractor weights for {name}: expected weight {expect_w:?} and bias [{c}], found {got_w:?} and {got_b:?}"
                )));
            }
            cin = c;
        }
        if !params.all_finite() {
            return Err(Error::CorruptCheckpoint("extractor weights are not finite".into()));
        }
        Ok(Self { config, source: ExtractorSource::Pretrained { path }, params })
    }

    pub fn load(config: ExtractorConfig, source: &ExtractorSource) -> Result<Self> {
        match source {
            ExtractorSource::SeededRandom { seed } => Self::seeded_random(config, *seed),
            ExtractorSource::Pretrained { path } => {
                let params = checkpoint::load_checkpoint(path, None)?;
                Self::from_params(config, params, path.clone())
            }
        }
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn source(&self) -> &ExtractorSource {
        &self.source
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    /// Record the frozen weights on a tape.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        Bound::new(tape, &cast_params(&self.params.tensors), false)
    }

    /// Tap outputs for `(N, 1, H, W)` images, shallowest first.
    pub fn taps<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> [Var; 3] {
        let pad = self.config.kernel_size / 2;
        let mut x = tape.repeat_channels(images, self.config.input_channels);
        let mut out = [x; 3];
        for (i, slot) in out.iter_mut().enumerate() {
            x = conv(tape, bound, &format!("stage{}", i + 1), x, pad);
            x = tape.relu(x);
            x = tape.max_pool2(x);
            *slot = x;
        }
        out
    }

    /// Feature values at each tap for a single image.
    pub fn features(&self, image: ArrayView2<'_, f32>) -> [Array4<f64>; 3] {
        let mut tape = Tape::<f64>::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(stack_planes([image]).mapv(f64::from));
        self.taps(&mut tape, &bound, x).map(|v| tape.value(v).clone())
    }
}

/// Sum over taps of the mean absolute feature difference, recorded on a tape.
/// `real` is treated as a constant.
pub fn feature_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    extractor: &PerceptualExtractor,
    bound: &Bound,
    real: &Array4<T>,
    generated: Var,
) -> Var {
    let r = tape.constant(real.clone());
    let real_taps = extractor.taps(tape, bound, r);
    let gen_taps = extractor.taps(tape, bound, generated);
    let mut total: Option<Var> = None;
    for (a, b) in gen_taps.into_iter().zip(real_taps) {
        let d = tape.mean_abs_diff(a, b);
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d),
        });
    }
    total.expect("three taps")
}

fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: shapes differ, {a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn feature_loss(extractor: &PerceptualExtractor, real: ArrayView2<'_, f32>, generated: ArrayView2<'_, f32>) -> Result<f64> {
    check_same_dims(real.dim(), generated.dim(), "feature loss")?;
    let mut tape = Tape::<f64>::new();
    let bound = extractor.bind(&mut tape);
    let r = stack_planes([real]).mapv(f64::from);
    let g = tape.constant(stack_planes([generated]).mapv(f64::from));
    let loss = feature_loss_on_tape(&mut tape, extractor, &bound, &r, g);
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("feature loss is {v}")));
    }
    Ok(v)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `(d_loss, g_loss)`: `-mean(log D(real)) - mean(log(1 - D(fake)))` and the
/// non-saturating `-mean(log D(fake))`.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::invalid("adversarial losses need nonempty probability batches"));
    }
    if d_real.iter().chain(d_fake).any(|p| !p.is_finite()) {
        return Err(Error::Numeric("discriminator probabilities are not finite".into()));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&p| f(clamp_prob(p))).sum::<f64>() / xs.len() as f64;
    let d_loss = -mean(d_real, &|p| p.ln()) - mean(d_fake, &|p| (1.0 - p).ln());
    let g_loss = -mean(d_fake, &|p| p.ln());
    Ok((d_loss, g_loss))
}

/// 3×3 dilation minus erosion. Pixels outside the frame count as 0.
pub fn morphological_gradient(mask: ArrayView2<'_, f32>) -> Array2<f32> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut lo = 1.0f32;
        let mut hi = 0.0f32;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                let v = if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    0.0
                } else {
                    mask[[yy as usize, xx as usize]]
                };
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        hi - lo
    })
}

/// Mirror an out-of-range index back into `0..n` (edge sample repeated,
/// `d c b a | a b c d`), folding as many times as needed.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable normalized Gaussian blur, radius `ceil(3σ)`, reflective padding.
pub fn gaussian_blur(src: ArrayView2<'_, f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let (h, w) = src.dim();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            rows[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[[y, reflect(x as i64 + j as i64 - r, w)]] as f64)
                .sum();
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * rows[[reflect(y as i64 + j as i64 - r, h), x]])
            .sum::<f64>() as f32
    })
}

/// Blurred mask boundary used to weight the seam loss.
pub fn boundary_weight(mask: ArrayView2<'_, f32>, sigma: f64) -> Array2<f32> {
    gaussian_blur(morphological_gradient(mask).view(), sigma)
}

/// `Σ |w ⊙ (real − generated)|`.
pub fn boundary_loss(real: ArrayView2<'_, f32>, generated: ArrayView2<'_, f32>, w: ArrayView2<'_, f32>) -> Result<f64> {
    check_same_dims(real.dim(), generated.dim(), "boundary loss")?;
    check_same_dims(real.dim(), w.dim(), "boundary loss weight")?;
    let mut s = 0.0f64;
    ndarray::Zip::from(real).and(generated).and(w).for_each(|&r, &g, &k| {
        s += (k as f64 * (r as f64 - g as f64)).abs();
    });
    Ok(s)
}

pub fn total_generator_loss(adv: f64, feat: f64, bound: f64, weights: &LossWeights) -> Result<f64> {
    if !(adv.is_finite() && feat.is_finite() && bound.is_finite()) {
        return Err(Error::Numeric(format!("loss terms not finite: adv {adv}, feat {feat}, bound {bound}")));
    }
    Ok(weights.adversarial * adv + weights.feature * feat + weights.boundary * bound)
}

/// Loss nodes of one generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub total: Var,
    pub feature: Var,
    pub boundary: Option<Var>,
    pub adversarial: Option<Var>,
}

/// Weighted generator objective on a tape. The boundary term is included
/// when `boundary_w` is given and the adversarial term when `d_fake` (the
/// discriminator's probabilities on `generated`) is given.
pub fn generator_objective<T: Real>(
    tape: &mut Tape<T>,
    extractor: &PerceptualExtractor,
    ext_bound: &Bound,
    real: &Array4<T>,
    generated: Var,
    boundary_w: Option<&Array4<T>>,
    d_fake: Option<Var>,
    weights: &LossWeights,
) -> GeneratorTerms {
    let feature = feature_loss_on_tape(tape, extractor, ext_bound, real, generated);
    let mut total = tape.scale(feature, T::lit(weights.feature));
    let boundary = boundary_w.map(|w| {
        let r = tape.constant(real.clone());
        tape.weighted_l1(r, generated, w)
    });
    if let Some(b) = boundary {
        let t = tape.scale(b, T::lit(weights.boundary));
        total = tape.add(total, t);
    }
    let adversarial = d_fake.map(|p| tape.neg_mean_log(p, T::lit(PROB_EPS), false));
    if let Some(a) = adversarial {
        let t = tape.scale(a, T::lit(weights.adversarial));
        total = tape.add(total, t);
    }
    GeneratorTerms { total, feature, boundary, adversarial }
}

/// Discriminator objective `-mean(log D(real)) - mean(log(1 - D(fake)))`.
pub fn discriminator_objective<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Var {
    let eps = T::lit(PROB_EPS);
    let a = tape.neg_mean_log(d_real, eps, false);
    let b = tape.neg_mean_log(d_fake, eps, true);
    tape.add(a, b)
}
