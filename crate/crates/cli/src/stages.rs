use std::fs;
use std::path::{Path, PathBuf};

use cigan_core::augment::synthesize_dataset;
use cigan_core::checkpoint::{load_checkpoint, save_checkpoint};
use cigan_core::classifier::{train_classifier as fit_classifier, Classifier, ClassifierData, Scheme, CLASSIFIER_METRICS_HEADER};
use cigan_core::config::ExperimentConfig;
use cigan_core::dataset::{donor_masks, extract_patches, sources_from_manifest, PatchSplits};
use cigan_core::eval::{build_report, read_scores, roc_curve, save_roc_png, write_scores, ScoreRow, BEST_CHECKPOINT, SCORES_FILE};
use cigan_core::figures::save_synthesis_grid;
use cigan_core::losses::PerceptualExtractor;
use cigan_core::manifest::{read_patch_archive, write_patch_archive, ArchivedPatch, Split};
use cigan_core::models::{to_hex, Discriminator, Generator};
use cigan_core::phantom::{make_phantom_dataset, write_phantom};
use cigan_core::trainer::{self, GanModels, PatchStream};
use cigan_core::{Error, Result};

/// Rows in emitted sample grids.
const GRID_ROWS: usize = 8;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

/// Create `out`, refusing a non-empty directory unless `force` clears it.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(io(out))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::InvalidInput(format!(
                    "output directory `{}` is not empty; pass --force to overwrite it",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(io(out))?;
        }
    }
    fs::create_dir_all(out).map_err(io(out))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    let seed = seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| config_error(field, "required by this stage"))
}

fn load_splits(cfg: &ExperimentConfig) -> Result<PatchSplits> {
    Ok(PatchSplits::from_archive(read_patch_archive(required(&cfg.data.patches, "data.patches")?)?))
}

fn gan_models(cfg: &ExperimentConfig) -> Result<GanModels> {
    Ok(GanModels {
        generator: Generator::new(cfg.generator.clone())?,
        discriminator: Discriminator::new(cfg.discriminator.clone())?,
        extractor: PerceptualExtractor::load(cfg.extractor.clone(), &cfg.extractor_source)?,
        weights: cfg.loss,
    })
}

pub fn phantom(n: usize, size: (usize, usize), lesion_rate: f64, seed: u64, out: &Path, force: bool) -> Result<()> {
    let data = make_phantom_dataset(n, size, lesion_rate, seed)?;
    prepare_out(out, force)?;
    let manifest = write_phantom(out, &data)?;
    println!("wrote {} images to {}", n, manifest.display());
    Ok(())
}

pub struct PatchOptions<'a> {
    pub count_per_class: usize,
    pub config: Option<&'a Path>,
    pub patch_size: Option<usize>,
    pub no_resize: bool,
}

pub fn patches(manifest: &Path, opts: PatchOptions<'_>, seed: u64, out: &Path, force: bool) -> Result<()> {
    let mut cfg = match opts.config {
        Some(p) => ExperimentConfig::load(p)?.extraction,
        None => Default::default(),
    };
    cfg.per_class = opts.count_per_class;
    if let Some(s) = opts.patch_size {
        cfg.sampling.patch_size = s;
    }
    if opts.no_resize {
        cfg.resize = None;
    }
    let sources = sources_from_manifest(manifest)?;
    let (archived, stats) = extract_patches(&sources, &cfg, seed)?;
    prepare_out(out, force)?;
    let path = write_patch_archive(out, &archived, seed)?;
    let log = format!(
        "attempts {}\ntissue_accepted {}\nkept {}\nacceptance_rate {}\n",
        stats.attempts,
        stats.tissue_accepted,
        stats.kept,
        stats.acceptance_rate()
    );
    let log_path = out.join("extraction.log");
    fs::write(&log_path, &log).map_err(io(&log_path))?;
    println!("acceptance rate {:.4} ({} of {} positions); {} patches in {}", stats.acceptance_rate(), stats.tissue_accepted, stats.attempts, stats.kept, path.display());
    Ok(())
}

pub fn train_gan(config: &Path, seed: Option<u64>, resume: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let splits = load_splits(&cfg)?;
    let models = gan_models(&cfg)?;
    let source = PatchStream::new(splits.train.clone(), cfg.seed, cfg.gan_training.boundary_sigma)?;
    match resume {
        Some(_) => {
            let snap = ExperimentConfig::read_snapshot(out)?;
            if snap != cfg {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "the config differs from the snapshot in `{}`",
                    out.display()
                )));
            }
        }
        None => {
            prepare_out(out, force)?;
            cfg.write_snapshot(out)?;
        }
    }
    let run = trainer::train_gan(&models, &cfg.gan_training, &source, out, resume)?;
    let figures = out.join("figures");
    fs::create_dir_all(&figures).map_err(io(&figures))?;
    let sample: Vec<_> = splits.train.iter().take(GRID_ROWS).cloned().collect();
    let donors = donor_masks(&splits.train);
    if !donors.is_empty() {
        let syn = synthesize_dataset(&sample, &models.generator, &run.generator, &donors, &cfg.synthesis, cfg.seed)?;
        save_synthesis_grid(&figures.join("samples.png"), &sample, &syn, cfg.seed, GRID_ROWS)?;
    }
    println!("trained to iteration {} ({} cap-forced switches)", run.final_iteration, run.forced_switches);
    Ok(())
}

pub fn synthesize(config: &Path, seed: Option<u64>, generator: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let splits = load_splits(&cfg)?;
    let gen = Generator::new(cfg.generator.clone())?;
    let gen_path = match generator {
        Some(p) => p.to_path_buf(),
        None => required(&cfg.data.generator, "data.generator")?.to_path_buf(),
    };
    let params = load_checkpoint(&gen_path, Some(&gen.fingerprint()))?;
    let donors = donor_masks(&splits.train);
    let syn = synthesize_dataset(&splits.train, &gen, &params, &donors, &cfg.synthesis, cfg.seed)?;
    prepare_out(out, force)?;
    cfg.write_snapshot(out)?;
    let fp = to_hex(&gen.fingerprint());
    let archived: Vec<_> = syn
        .iter()
        .map(|p| ArchivedPatch { patch: p.clone(), split: Split::Train, generator_fingerprint: Some(fp.clone()) })
        .collect();
    let path = write_patch_archive(out, &archived, cfg.seed)?;
    let figures = out.join("figures");
    fs::create_dir_all(&figures).map_err(io(&figures))?;
    save_synthesis_grid(&figures.join("samples.png"), &splits.train, &syn, cfg.seed, GRID_ROWS)?;
    println!("wrote {} synthetic patches to {}", syn.len(), path.display());
    Ok(())
}

pub fn train_classifier(config: &Path, seed: Option<u64>, scheme: Option<Scheme>, out: &Path, force: bool) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    let scheme = scheme.or(cfg.scheme).ok_or_else(|| config_error("scheme", "pass --scheme or set `scheme`"))?;
    cfg.scheme = Some(scheme);
    let splits = load_splits(&cfg)?;
    let synthetic: Vec<_> = match (scheme, &cfg.data.synthetic) {
        (Scheme::Cigan, None) => return Err(config_error("data.synthetic", "the cigan scheme needs a synthetic pool")),
        (Scheme::Cigan, Some(p)) => read_patch_archive(p)?.into_iter().map(|a| a.patch).collect(),
        _ => Vec::new(),
    };
    if splits.test.is_empty() {
        return Err(Error::Data("the patch archive has no test split".into()));
    }
    let model = Classifier::new(cfg.classifier.clone())?;
    let data = ClassifierData { train: &splits.train, val: &splits.val, synthetic: &synthetic };
    let run = fit_classifier(&model, scheme, &data, &cfg.curriculum, &cfg.augmentation, cfg.seed)?;
    prepare_out(out, force)?;
    cfg.write_snapshot(out)?;
    let mut csv = format!("{CLASSIFIER_METRICS_HEADER}\n");
    for m in &run.metrics {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    let metrics = out.join("metrics.csv");
    fs::write(&metrics, csv).map_err(io(&metrics))?;
    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(io(&ckpt))?;
    save_checkpoint(&out.join(BEST_CHECKPOINT), &run.best)?;
    save_checkpoint(&ckpt.join("last.cign"), &run.last)?;
    let scores = model.predict(&run.best, &splits.test)?;
    let rows: Vec<ScoreRow> = splits
        .test
        .iter()
        .zip(scores)
        .map(|(p, s)| ScoreRow { id: p.id(), label: p.label.target() as u8, score: s as f64 })
        .collect();
    write_scores(&out.join(SCORES_FILE), &rows)?;
    let figures = out.join("figures");
    fs::create_dir_all(&figures).map_err(io(&figures))?;
    println!(
        "{scheme}: best validation AUC {} at iteration {}",
        run.best_val_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
        run.best_iteration
    );
    Ok(())
}

pub fn evaluate(runs: &[PathBuf], config: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let mut labelled = Vec::with_capacity(runs.len());
    for dir in runs {
        let scheme = ExperimentConfig::read_snapshot(dir)?
            .scheme
            .ok_or_else(|| Error::Data(format!("run `{}` does not record its scheme", dir.display())))?;
        if labelled.iter().any(|(s, _)| *s == scheme) {
            return Err(Error::InvalidInput(format!("scheme {scheme} given twice")));
        }
        labelled.push((scheme, dir.clone()));
    }
    labelled.sort_by_key(|(s, _)| Scheme::ALL.iter().position(|x| x == s));
    let report = build_report(&labelled)?;
    prepare_out(out, force)?;
    report.write(out)?;
    let figures = out.join("figures");
    fs::create_dir_all(&figures).map_err(io(&figures))?;
    for (scheme, dir) in &labelled {
        let rows = read_scores(&dir.join(SCORES_FILE))?;
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        save_roc_png(&figures.join(format!("roc_{scheme}.png")), &roc_curve(&scores, &labels)?, 256)?;
    }
    if let Some(path) = config {
        let cfg = ExperimentConfig::load(path)?;
        let splits = load_splits(&cfg)?;
        let gen = Generator::new(cfg.generator.clone())?;
        let params = load_checkpoint(required(&cfg.data.generator, "data.generator")?, Some(&gen.fingerprint()))?;
        let sample: Vec<_> = splits.test.iter().take(GRID_ROWS).cloned().collect();
        let donors = donor_masks(&splits.train);
        let syn = synthesize_dataset(&sample, &gen, &params, &donors, &cfg.synthesis, cfg.seed)?;
        save_synthesis_grid(&figures.join("samples.png"), &sample, &syn, cfg.seed, GRID_ROWS)?;
    }
    print!("{}", report.render_text());
    Ok(())
}
