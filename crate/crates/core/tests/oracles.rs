//! Independent reimplementations checked against the library.

use cigan_core::eval::{delong_variance, roc_auc};
use cigan_core::losses::{feature_loss, ExtractorConfig, PerceptualExtractor};
use ndarray::{Array2, Array3, ArrayD};

/// Same-padded direct convolution, then ReLU and 2x2 max pooling.
fn naive_stage(x: &Array3<f64>, w: &ArrayD<f32>, b: &ArrayD<f32>) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut conv = Array3::<f64>::zeros((cout, h, wd));
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = f64::from(b[[o]]);
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += f64::from(w[[o, c, ky, kx]]) * x[[c, sy as usize, sx as usize]];
                            }
                        }
                    }
                }
                conv[[o, y, xx]] = acc.max(0.0);
            }
        }
    }
    Array3::from_shape_fn((cout, h / 2, wd / 2), |(o, y, xx)| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                m = m.max(conv[[o, 2 * y + dy, 2 * xx + dx]]);
            }
        }
        m
    })
}

fn naive_taps(ext: &PerceptualExtractor, img: &Array2<f32>) -> Vec<Array3<f64>> {
    let cfg = ext.config();
    let mut x = Array3::from_shape_fn((cfg.input_channels, img.nrows(), img.ncols()), |(_, y, xx)| f64::from(img[[y, xx]]));
    let t = &ext.params().tensors;
    let mut out = Vec::new();
    for s in 1..=3 {
        x = naive_stage(&x, &t[&format!("stage{s}.weight")], &t[&format!("stage{s}.bias")]);
        out.push(x.clone());
    }
    out
}

#[test]
fn feature_loss_matches_direct_convolution() {
    let ext = PerceptualExtractor::seeded_random(ExtractorConfig::default(), 0).unwrap();
    let zeros = Array2::<f32>::zeros((64, 64));
    let ones = Array2::<f32>::ones((64, 64));
    let ramp = Array2::from_shape_fn((64, 64), |(y, x)| ((y * 64 + x) % 97) as f32 / 96.0);
    for (a, b) in [(&zeros, &ones), (&ramp, &ones), (&zeros, &ramp)] {
        let expected: f64 = naive_taps(&ext, a)
            .iter()
            .zip(naive_taps(&ext, b))
            .map(|(p, q)| (p - &q).mapv(f64::abs).mean().unwrap())
            .sum();
        let got = feature_loss(&ext, a.view(), b.view()).unwrap();
        assert!((got - expected).abs() <= 1e-6 * expected.max(1.0), "{got} vs {expected}");
    }
    assert_eq!(feature_loss(&ext, ramp.view(), ramp.view()).unwrap(), 0.0);
}

/// Structural components from the explicit pair kernel.
fn pairwise_variance(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    let psi = |x: f64, y: f64| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let v10: Vec<f64> = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / n).collect();
    let v01: Vec<f64> = neg.iter().map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / m).collect();
    let auc = v10.iter().sum::<f64>() / m;
    let s10 = if m > 1.0 { v10.iter().map(|v| (v - auc).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    let s01 = if n > 1.0 { v01.iter().map(|v| (v - auc).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    s10 / m + s01 / n
}

#[test]
fn delong_variance_matches_pair_kernel_for_all_small_arrangements() {
    let pools: [&[f64]; 2] = [&[0.3, 1.2, -0.7, 2.5, 0.9, -1.4], &[1.0, 0.0, 1.0, 2.0, 0.0, 1.0]];
    for n in 4..=6usize {
        for scores in pools {
            let scores = &scores[..n];
            for bits in 1u32..(1 << n) - 1 {
                let labels: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
                let got = delong_variance(scores, &labels).unwrap();
                let want = pairwise_variance(scores, &labels);
                assert!((got - want).abs() < 1e-12, "n {n} labels {labels:?}: {got} vs {want}");
                assert!(roc_auc(scores, &labels).is_ok());
            }
        }
    }
}
