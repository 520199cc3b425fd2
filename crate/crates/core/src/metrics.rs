//! Fréchet distance between feature distributions, dataset-level mIoU and
//! the synthetic-only training protocol.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{synthesize_bank, AugmentationScheme, BankConfig, SyntheticBank};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelGrid};
use crate::rng::{fill_normal, keyed_rng};
use crate::schedule::NoiseSchedule;
use crate::segmentor::{evaluate_miou, init_segmentor, train_segmentor, SegTrainConfig, SegmentorConfig};
use crate::shapesworld::Dataset;

/// Fixed image-to-feature map standing in for a pretrained embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureExtractor {
    /// Per-channel mean and variance over a 4×4 grid of cells.
    #[default]
    PooledPixels,
    /// Seeded Gaussian projection of the flattened pixels.
    RandomProjection { dim: usize, seed: u64 },
}

const POOL_GRID: usize = 4;

fn pooled_pixels(img: &ImageGrid) -> Vec<f64> {
    let (c, h, w) = img.shape();
    let mut out = Vec::with_capacity(c * POOL_GRID * POOL_GRID * 2);
    for ch in 0..c {
        for gy in 0..POOL_GRID {
            for gx in 0..POOL_GRID {
                let (y0, y1) = (gy * h / POOL_GRID, (gy + 1) * h / POOL_GRID);
                let (x0, x1) = (gx * w / POOL_GRID, (gx + 1) * w / POOL_GRID);
                let n = ((y1 - y0) * (x1 - x0)).max(1) as f64;
                let mut sum = 0.0;
                let mut sq = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = img.get(ch, y, x);
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / n;
                out.push(mean);
                out.push((sq / n - mean * mean).max(0.0));
            }
        }
    }
    out
}

fn projection(dim: usize, seed: u64, inputs: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * inputs];
    fill_normal(&mut keyed_rng(seed, "random-projection", &[dim as u64, inputs as u64]), &mut m);
    let scale = 1.0 / (inputs as f64).sqrt();
    m.iter_mut().for_each(|v| *v *= scale);
    m
}

/// Feature matrix with one row per image.
pub fn extract_features(images: &[&ImageGrid], extractor: FeatureExtractor) -> Result<DMatrix<f64>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no images to featurise".into()))?;
    for img in images {
        first.ensure_same_shape(img)?;
    }
    let rows: Vec<Vec<f64>> = match extractor {
        FeatureExtractor::PooledPixels => images.par_iter().map(|img| pooled_pixels(img)).collect(),
        FeatureExtractor::RandomProjection { dim, seed } => {
            if dim == 0 {
                return Err(Error::InvalidArgument("projection dimension must be positive".into()));
            }
            let p = first.len();
            let m = projection(dim, seed, p);
            images
                .par_iter()
                .map(|img| {
                    (0..dim)
                        .map(|r| m[r * p..(r + 1) * p].iter().zip(img.data()).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect()
        }
    };
    let d = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetric to 1e-9 and PSD up to −1e-8.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.shape() != (d, d) {
            return Err(Error::shape((d, d), self.cov.shape()));
        }
        let asym = (&self.cov - self.cov.transpose()).abs().max();
        if asym > 1e-9 {
            return Err(Error::Numerical(format!("covariance asymmetric by {asym:e}")));
        }
        let eig = SymmetricEigen::try_new(self.cov.clone(), 1e-15, 10_000)
            .ok_or_else(|| Error::Numerical("covariance eigendecomposition did not converge".into()))?;
        let min = eig.eigenvalues.min();
        if min < -1e-8 {
            return Err(Error::Numerical(format!("covariance not PSD (eigenvalue {min:e})")));
        }
        Ok(())
    }
}

/// Mean and unbiased, symmetrised covariance of the rows.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<GaussianMoments> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let s = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&s + s.transpose()) * 0.5;
    Ok(GaussianMoments { mean, cov })
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, 1e-15, 10_000).ok_or_else(|| Error::Numerical("matrix square root did not converge".into()))
}

const EIG_FLOOR: f64 = 1e-10;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen((m + m.transpose()) * 0.5)?;
    let roots = e.eigenvalues.map(|v| if v < EIG_FLOOR { 0.0 } else { v.sqrt() });
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// `Tr((Σ_a Σ_b)^{1/2})` computed as `Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let ra = psd_sqrt(a)?;
    let m = &ra * b * &ra;
    let e = eigen((&m + m.transpose()) * 0.5)?;
    Ok(e.eigenvalues.iter().map(|&v| if v < EIG_FLOOR { 0.0 } else { v.sqrt() }).sum())
}

/// Squared Fréchet distance between two Gaussians, clamped at zero.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    a.validate()?;
    b.validate()?;
    let dm = (&a.mean - &b.mean).norm_squared();
    let tr = trace_sqrt_product(&a.cov, &b.cov)?;
    let d2 = dm + a.cov.trace() + b.cov.trace() - 2.0 * tr;
    Ok(d2.max(0.0))
}

/// Fréchet distance between two image sets under `extractor`.
pub fn image_fd(a: &[&ImageGrid], b: &[&ImageGrid], extractor: FeatureExtractor) -> Result<f64> {
    let fa = fit_gaussian(&extract_features(a, extractor)?)?;
    let fb = fit_gaussian(&extract_features(b, extractor)?)?;
    frechet_distance(&fa, &fb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from both predictions and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Dataset-level mean IoU from globally accumulated intersections and unions.
pub fn miou_detailed(preds: &[&LabelGrid], gts: &[&LabelGrid], num_classes: usize) -> Result<MiouResult> {
    if preds.len() != gts.len() {
        return Err(Error::shape(gts.len(), preds.len()));
    }
    let counts = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| {
            if p.shape() != g.shape() {
                return Err(Error::shape(g.shape(), p.shape()));
            }
            let mut inter = vec![0u64; num_classes];
            let mut union = vec![0u64; num_classes];
            for (&a, &b) in p.data().iter().zip(g.data()) {
                for v in [a, b] {
                    if v < 0 || v as usize >= num_classes {
                        return Err(Error::InvalidArgument(format!("class id {v} outside [0, {num_classes})")));
                    }
                }
                let (a, b) = (a as usize, b as usize);
                if a == b {
                    inter[a] += 1;
                    union[a] += 1;
                } else {
                    union[a] += 1;
                    union[b] += 1;
                }
            }
            Ok((inter, union))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (i, u) in counts {
        for k in 0..num_classes {
            inter[k] += i[k];
            union[k] += u[k];
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouResult { miou, per_class })
}

pub fn miou(preds: &[&LabelGrid], gts: &[&LabelGrid], num_classes: usize) -> Result<f64> {
    Ok(miou_detailed(preds, gts, num_classes)?.miou)
}

/// Trains a segmentor on the `lambda` column of `bank` alone and scores it
/// on the real validation scenes.
pub fn synthetic_only_eval_with_bank(
    dataset: &Dataset,
    bank: &SyntheticBank,
    val: &Dataset,
    lambda: f64,
    seg: &SegmentorConfig,
    train: &SegTrainConfig,
    seed: u64,
) -> Result<f64> {
    let model = init_segmentor(seg, seed)?;
    let scheme = AugmentationScheme::SyntheticOnly { lambda };
    let (model, _) = train_segmentor(model, dataset, Some(bank), &scheme, train, seed, None)?;
    evaluate_miou(&model, val)
}

/// Synthesises a one-column bank at `lambda` and runs the synthetic-only
/// protocol on it.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_only_eval(
    d: &Denoiser,
    s: &NoiseSchedule,
    dataset: &Dataset,
    val: &Dataset,
    seg: &SegmentorConfig,
    train: &SegTrainConfig,
    lambda: f64,
    bank_cfg: &BankConfig,
    seed: u64,
) -> Result<f64> {
    let bank = synthesize_bank(d, s, dataset, &[lambda], bank_cfg, seed, "")?;
    synthetic_only_eval_with_bank(dataset, &bank, val, lambda, seg, train, seed)
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numerical("spearman of a constant series is undefined".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// One reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Writes `records` to `<stem>.csv` and `<stem>.json`.
pub fn write_metric_records(stem: &Path, records: &[MetricRecord]) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::json(&json_path, e))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}
