//! ROC AUC, paired DeLong comparison, score files and comparison reports.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::checkpoint;
use crate::classifier::Scheme;
use crate::error::{Error, Result};
use crate::models::to_hex;
use crate::raster::save_png8;

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {s} is not finite")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!("AUC needs both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Midranks (1-based, ties share the average rank).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Per-observation structural components of one score list:
/// `(auc, v10 over positives, v01 over negatives)`.
fn structural_components(scores: &[f64], labels: &[u8]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let tz = midranks(&all);
    let tx = midranks(&pos);
    let ty = midranks(&neg);
    let v10: Vec<f64> = (0..pos.len()).map(|i| (tz[i] - tx[i]) / n).collect();
    let v01: Vec<f64> = (0..neg.len()).map(|j| 1.0 - (tz[pos.len() + j] - ty[j]) / m).collect();
    let auc = (tz[..pos.len()].iter().sum::<f64>() - m * (m + 1.0) / 2.0) / (m * n);
    (auc, v10, v01)
}

/// Sample covariance (n − 1 denominator); zero for a single observation.
fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

/// Area under the ROC curve: the fraction of (positive, negative) pairs in
/// which the positive scores higher, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores, labels)?;
    Ok(structural_components(scores, labels).0)
}

/// DeLong variance of a single AUC.
pub fn delong_variance(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores, labels)?;
    let (_, v10, v01) = structural_components(scores, labels);
    Ok(covariance(&v10, &v10) / v10.len() as f64 + covariance(&v01, &v01) / v01.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub covariance: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Paired two-sided DeLong test of `AUC(a) = AUC(b)` under the normal
/// approximation.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DelongResult> {
    let (pos, neg) = check_labels(scores_a, labels)?;
    check_labels(scores_b, labels)?;
    if pos + neg < 4 {
        return Err(Error::invalid(format!("DeLong test needs at least 4 observations, got {}", pos + neg)));
    }
    let (auc_a, a10, a01) = structural_components(scores_a, labels);
    let (auc_b, b10, b01) = structural_components(scores_b, labels);
    let (m, n) = (pos as f64, neg as f64);
    let var_a = covariance(&a10, &a10) / m + covariance(&a01, &a01) / n;
    let var_b = covariance(&b10, &b10) / m + covariance(&b01, &b01) / n;
    let cov = covariance(&a10, &b10) / m + covariance(&a01, &b01) / n;
    let var_diff = var_a + var_b - 2.0 * cov;
    let diff = auc_a - auc_b;
    let (z, p_value) = if var_diff <= f64::EPSILON * (var_a + var_b) || var_diff <= 0.0 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            return Err(Error::DegenerateStatistics(format!(
                "AUCs differ ({auc_a} vs {auc_b}) but the variance of their difference is {var_diff}"
            )));
        }
    } else {
        let z = diff / var_diff.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
    };
    Ok(DelongResult { auc_a, auc_b, var_a, var_b, covariance: cov, z, p_value })
}

/// ROC operating points `(fpr, tpr)` from the strictest threshold down,
/// starting at (0, 0) and ending at (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Draw an ROC curve on a white square with the chance diagonal in grey.
pub fn save_roc_png(path: &Path, points: &[(f64, f64)], size: usize) -> Result<()> {
    let mut img = Array2::<f32>::ones((size, size));
    let last = (size - 1) as f64;
    let mut plot = |fx: f64, fy: f64, v: f32| {
        let x = (fx * last).round() as usize;
        let y = ((1.0 - fy) * last).round() as usize;
        img[[y.min(size - 1), x.min(size - 1)]] = v;
    };
    for k in 0..size * 2 {
        let t = k as f64 / (size * 2 - 1) as f64;
        plot(t, t, 0.7);
    }
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let steps = (((x1 - x0).abs().max((y1 - y0).abs())) * last * 2.0).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            plot(x0 + t * (x1 - x0), y0 + t * (y1 - y0), 0.0);
        }
    }
    save_png8(path, img.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "scores file not found")));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let rows: Vec<ScoreRow> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))?;
    if let Some(bad) = rows.iter().find(|r| r.label > 1 || !r.score.is_finite()) {
        return Err(Error::Data(format!("{}: bad row for `{}`", path.display(), bad.id)));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Data(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub scheme: Scheme,
    pub auc: f64,
    pub variance: f64,
    /// Hex fingerprint of the evaluated checkpoint.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub a: Scheme,
    pub b: Scheme,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pos: usize,
    pub n_neg: usize,
    pub schemes: Vec<SchemeResult>,
    pub pairwise: Vec<PairwiseResult>,
}

/// Name of the scores file and the evaluated checkpoint inside a run directory.
pub const SCORES_FILE: &str = "scores.csv";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.cign";

/// Compare schemes from their run directories. Every directory must hold
/// scores for the same set of ids with the same labels.
pub fn build_report(runs: &[(Scheme, PathBuf)]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::invalid("no run directories given"));
    }
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut reference: Option<Vec<(String, u8)>> = None;
    let mut fingerprints = Vec::new();
    for (scheme, dir) in runs {
        let mut rows = read_scores(&dir.join(SCORES_FILE))?;
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let keys: Vec<(String, u8)> = rows.iter().map(|r| (r.id.clone(), r.label)).collect();
        match &reference {
            None => reference = Some(keys),
            Some(k) if *k != keys => {
                return Err(Error::Data(format!(
                    "scores of scheme {scheme} in {} cover different test patches",
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        let container = checkpoint::load_container(&dir.join(BEST_CHECKPOINT))?;
        fingerprints.push(to_hex(&container.fingerprint));
        columns.push(rows.iter().map(|r| r.score).collect());
    }
    let labels: Vec<u8> = reference.expect("at least one run").into_iter().map(|(_, l)| l).collect();
    let (n_pos, n_neg) = check_labels(&columns[0], &labels)?;
    let mut schemes = Vec::new();
    for (((scheme, _), col), fp) in runs.iter().zip(&columns).zip(fingerprints) {
        schemes.push(SchemeResult {
            scheme: *scheme,
            auc: roc_auc(col, &labels)?,
            variance: delong_variance(col, &labels)?,
            fingerprint: fp,
        });
    }
    let mut pairwise = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let d = delong_test(&columns[i], &columns[j], &labels)?;
            pairwise.push(PairwiseResult { a: runs[i].0, b: runs[j].0, z: d.z, p_value: d.p_value });
        }
    }
    Ok(EvalReport { n_pos, n_neg, schemes, pairwise })
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let head = "Data augmentation scheme";
        let w = self.schemes.iter().map(|s| s.scheme.label().len()).chain([head.len()]).max().unwrap_or(0);
        let mut out = format!("{head:<w$}  {:>7}  {:>10}\n", "AUC", "variance");
        out.push_str(&format!("{}\n", "-".repeat(w + 21)));
        for s in &self.schemes {
            out.push_str(&format!("{:<w$}  {:>7.4}  {:>10.3e}\n", s.scheme.label(), s.auc, s.variance));
        }
        out.push_str(&format!("\ntest patches: {} malignant, {} non-malignant\n", self.n_pos, self.n_neg));
        if !self.pairwise.is_empty() {
            out.push_str("\nDeLong paired comparisons\n");
            for p in &self.pairwise {
                out.push_str(&format!("  {} vs {}: z = {:.3}, p = {:.4}\n", p.a, p.b, p.z, p.p_value));
            }
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("scheme,label,auc,variance,n_pos,n_neg,fingerprint\n");
        for s in &self.schemes {
            out.push_str(&format!(
                "{},\"{}\",{},{},{},{},{}\n",
                s.scheme, s.scheme.label(), s.auc, s.variance, self.n_pos, self.n_neg, s.fingerprint
            ));
        }
        out
    }

    pub fn render_pairwise_csv(&self) -> String {
        let mut out = String::from("scheme_a,scheme_b,z,p_value\n");
        for p in &self.pairwise {
            out.push_str(&format!("{},{},{},{}\n", p.a, p.b, p.z, p.p_value));
        }
        out
    }

    /// Write `report.txt`, `report.csv`, `pairwise.csv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("report.txt", self.render_text())?;
        put("report.csv", self.render_csv())?;
        put("pairwise.csv", self.render_pairwise_csv())?;
        put("report.json", serde_json::to_string_pretty(self).expect("report serializes"))
    }
}
