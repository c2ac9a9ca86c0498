//! Dataset diagnostics in the frozen model's feature space: Fréchet
//! distance between feature distributions, pairwise perceptual diversity,
//! and Pearson/Spearman correlation reports relating those properties to
//! prompting gains.

use crate::backbone::FrozenBackbone;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;

/// First two moments of a feature set: mean[D] and unbiased covariance
/// [D,D] stored row-major. The covariance is exactly symmetric.
#[derive(Debug, Clone)]
pub struct FeatureDistribution {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub dim: usize,
    pub n_samples: usize,
}

/// Moments of the backbone's penultimate features over a seeded sample of
/// min(N, sample_cap) images (all of them, in order, when the cap covers
/// the set).
pub fn feature_moments(
    backbone: &FrozenBackbone,
    dataset: &LabeledDataset,
    sample_cap: usize,
    seed: u64,
) -> Result<FeatureDistribution> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::TooFewSamples {
            op: "feature_moments",
            need: 2,
            got: n,
        });
    }
    let take = sample_cap.min(n).max(2);
    let idx: Vec<usize> = if take == n {
        (0..n).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx.truncate(take);
        idx
    };
    let subset = dataset.subset(&idx);
    let feats = backbone.penultimate_features(&subset.normalized_all())?;
    moments_of(&feats)
}

/// Two-pass mean and unbiased covariance in f64.
pub fn moments_of(feats: &Tensor) -> Result<FeatureDistribution> {
    let n = feats.shape()[0];
    let d = feats.shape()[1];
    if n < 2 {
        return Err(Error::TooFewSamples {
            op: "moments_of",
            need: 2,
            got: n,
        });
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for e in 0..d {
            mean[e] += feats.data()[i * d + e] as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        let row = &feats.data()[i * d..(i + 1) * d];
        for a in 0..d {
            let da = row[a] as f64 - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] as f64 - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(FeatureDistribution {
        mean,
        cov,
        dim: d,
        n_samples: n,
    })
}

const EIGEN_TOL: f64 = 1e-6;

/// PSD square root by eigendecomposition; eigenvalues below -tol are a
/// hard error, small negatives from rounding clip to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIGEN_TOL {
            return Err(Error::NotPositiveSemiDefinite { eigenvalue: *v });
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^1/2), with the square-root
/// trace computed from the symmetrized product Sa^1/2 Sb Sa^1/2.
pub fn frechet_distance(a: &FeatureDistribution, b: &FeatureDistribution) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            detail: format!("feature dims {} vs {}", a.dim, b.dim),
        });
    }
    let d = a.dim;
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();

    let sa_half = sqrt_psd(&sa)?;
    let mut inner = &sa_half * &sb * &sa_half;
    // rounding can leave the product slightly asymmetric
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut sqrt_trace = 0.0f64;
    for &v in eig.eigenvalues.iter() {
        if v < -EIGEN_TOL {
            return Err(Error::NotPositiveSemiDefinite { eigenvalue: v });
        }
        sqrt_trace += v.max(0.0).sqrt();
    }
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * sqrt_trace;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "frechet_distance",
        });
    }
    // exact-zero distances can round a hair below zero
    Ok(value.max(0.0))
}

/// Mean (1 - cosine) over explicit feature-row pairs.
pub fn diversity_over_pairs(feats: &Tensor, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty { what: "pair list" });
    }
    let d = feats.shape()[1];
    let mut total = 0.0f64;
    for &(i, j) in pairs {
        let fi = &feats.data()[i * d..(i + 1) * d];
        let fj = &feats.data()[j * d..(j + 1) * d];
        let (mut dot, mut ni, mut nj) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in fi.iter().zip(fj) {
            dot += x as f64 * y as f64;
            ni += (x as f64) * (x as f64);
            nj += (y as f64) * (y as f64);
        }
        if ni == 0.0 || nj == 0.0 {
            return Err(Error::ZeroNorm {
                what: "penultimate feature",
            });
        }
        total += 1.0 - dot / (ni.sqrt() * nj.sqrt());
    }
    Ok(total / pairs.len() as f64)
}

/// Mean feature-space distance (1 - cosine of penultimate features) over
/// num_pairs seeded random distinct index pairs; the desk-scale stand-in
/// for a perceptual image distance.
pub fn perceptual_diversity(
    backbone: &FrozenBackbone,
    dataset: &LabeledDataset,
    num_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(Error::TooFewSamples {
            op: "perceptual_diversity",
            need: 2,
            got: dataset.len(),
        });
    }
    if num_pairs == 0 {
        return Err(Error::Empty { what: "pair list" });
    }
    let feats = backbone.penultimate_features(&dataset.normalized_all())?;
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(usize, usize)> = (0..num_pairs)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();
    diversity_over_pairs(&feats, &pairs)
}

#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    /// The paired observations, for plotting.
    pub table: Vec<(f64, f64)>,
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        sx += (a - mx) * (a - mx);
        sy += (b - my) * (b - my);
    }
    if sx == 0.0 {
        return Err(Error::ZeroVariance { series: "x" });
    }
    if sy == 0.0 {
        return Err(Error::ZeroVariance { series: "y" });
    }
    Ok(cov / (sx.sqrt() * sy.sqrt()))
}

/// Average ranks, with ties sharing the mean of their rank range.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0f64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn correlation_report(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::BadSeries {
            x_len: x.len(),
            y_len: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "correlation_report",
        });
    }
    let pearson_r = pearson(x, y)?;
    let spearman = pearson(&ranks(x), &ranks(y))?;
    Ok(CorrelationReport {
        pearson: pearson_r,
        spearman,
        table: x.iter().copied().zip(y.iter().copied()).collect(),
    })
}

/// One dataset's joined diagnostics for the gain analysis.
#[derive(Debug, Clone)]
pub struct AnalysisRow {
    pub dataset: String,
    pub fid_to_pretrain: f64,
    pub diversity: f64,
    pub zero_shot_acc: f64,
    pub vp_acc: f64,
}

impl AnalysisRow {
    pub fn gain(&self) -> f64 {
        self.vp_acc - self.zero_shot_acc
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.dataset,
            self.fid_to_pretrain,
            self.diversity,
            self.zero_shot_acc,
            self.vp_acc,
            self.gain()
        )
    }
}

pub const ANALYSIS_CSV_HEADER: &str =
    "dataset,fid_to_pretrain,diversity,zero_shot_acc,vp_acc,gain";

pub fn write_analysis_csv(path: &Path, rows: &[AnalysisRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{ANALYSIS_CSV_HEADER}")?;
    for row in rows {
        writeln!(file, "{}", row.csv_row())?;
    }
    Ok(())
}
