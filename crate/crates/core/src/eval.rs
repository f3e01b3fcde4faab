//! Quantitative evaluation of generated batches.
//!
//! Images are embedded with a frozen random nonlinear projection; batches
//! are summarized by Gaussian statistics and compared with the Fréchet
//! distance. On worlds small enough to enumerate, generated samples are
//! scored directly against the exact sequence distribution with total
//! variation and KL. A mean pairwise feature distance serves as the
//! diversity proxy for reward ablations.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::stream_rng;
use crate::smallnet::{checkpoint, NetError};
use crate::token_world::{
    exact_statistics, sequence_index, Image, TokenSequence, WorldError, WorldSpec,
};

/// Feature dimension of the frozen embedding.
pub const EMBED_DIM: usize = 32;

/// Diagonal jitter added to fitted covariances.
const COV_JITTER: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} images, got {got}")]
    TooFewImages { need: usize, got: usize },
    #[error("feature dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    File(#[from] NetError),
    #[error("stats file integrity hash mismatch")]
    BadHash,
    #[error("stats file is missing entry '{0}'")]
    MissingEntry(String),
    #[error("stats file entry '{key}' has malformed value '{value}'")]
    BadEntry { key: String, value: String },
}

/// Frozen nonlinear feature map: tanh(W·pixels + b) with W, b drawn once
/// from a seeded stream (weights row-major then biases, standard normal;
/// weights scaled by 1/√input).
#[derive(Debug, Clone)]
pub struct Embedder {
    weights: Vec<f64>,
    bias: Vec<f64>,
    input_dim: usize,
    seed: u64,
}

impl Embedder {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[21]);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = (0..EMBED_DIM * input_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        let bias = (0..EMBED_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.2
            })
            .collect();
        Self { weights, bias, input_dim, seed }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Embed one image into the D-dimensional feature space.
    pub fn embed(&self, image: &Image) -> Vec<f64> {
        let x = image.flat();
        assert_eq!(x.len(), self.input_dim, "image size mismatch");
        let mut out = Vec::with_capacity(EMBED_DIM);
        for d in 0..EMBED_DIM {
            let row = &self.weights[d * self.input_dim..(d + 1) * self.input_dim];
            let z: f64 = row.iter().zip(x).map(|(w, p)| w * p).sum();
            out.push((z + self.bias[d]).tanh());
        }
        out
    }

    /// Embed a batch; order-preserving and worker-count independent.
    pub fn embed_batch(&self, images: &[Image]) -> Vec<Vec<f64>> {
        images.par_iter().map(|im| self.embed(im)).collect()
    }
}

/// Gaussian summary of a feature batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major D×D covariance.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of feature vectors, plus diagonal
/// jitter.
pub fn fit_feature_stats(features: &[Vec<f64>]) -> Result<GaussianStats, EvalError> {
    if features.len() < 2 {
        return Err(EvalError::TooFewImages { need: 2, got: features.len() });
    }
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        debug_assert_eq!(f.len(), d);
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
        cov[i * d + i] += COV_JITTER;
    }
    Ok(GaussianStats { mean, cov, count: n })
}

/// Embed a batch and fit its Gaussian statistics.
pub fn fit_stats(embedder: &Embedder, images: &[Image]) -> Result<GaussianStats, EvalError> {
    if images.len() < 2 {
        return Err(EvalError::TooFewImages { need: 2, got: images.len() });
    }
    fit_feature_stats(&embedder.embed_batch(images))
}

/// Squared Fréchet distance between two Gaussians:
/// |μa−μb|² + Tr(Σa + Σb − 2·(ΣaΣb)^½), the matrix square root taken via
/// eigendecomposition of the symmetrized product ½(ΣaΣb + ΣbΣa) with
/// negative eigenvalues clamped. Small negative results are clamped to 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    let d = a.dim();
    if b.dim() != d {
        return Err(EvalError::DimMismatch { a: d, b: b.dim() });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let prod = &sa * &sb;
    let sym = (&prod + prod.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d2 = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0))
}

/// Divergences of an empirical sample set against the exact sequence law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergences {
    /// Total variation ½·Σ|p̂ − p|.
    pub tv: f64,
    /// KL(exact ‖ empirical) with add-one smoothing on the empirical side.
    pub kl: f64,
}

/// Compare samples against the enumerated class-marginal law of `spec`.
pub fn exact_divergence(
    samples: &[TokenSequence],
    spec: &WorldSpec,
) -> Result<Divergences, EvalError> {
    let table = exact_statistics(spec)?;
    let outcomes = table.marginal.len();
    let mut counts = vec![0usize; outcomes];
    for s in samples {
        counts[sequence_index(s.tokens(), spec.codebook_size)] += 1;
    }
    let n = samples.len();
    let mut tv = 0.0;
    let mut kl = 0.0;
    let smooth_denom = (n + outcomes) as f64;
    for (idx, &p) in table.marginal.iter().enumerate() {
        let emp = counts[idx] as f64 / n.max(1) as f64;
        tv += (emp - p).abs();
        if p > 0.0 {
            let smoothed = (counts[idx] + 1) as f64 / smooth_denom;
            kl += p * (p / smoothed).ln();
        }
    }
    Ok(Divergences { tv: tv / 2.0, kl })
}

/// Mean pairwise Euclidean distance in feature space.
pub fn diversity_metric(embedder: &Embedder, images: &[Image]) -> Result<f64, EvalError> {
    if images.len() < 2 {
        return Err(EvalError::TooFewImages { need: 2, got: images.len() });
    }
    let feats = embedder.embed_batch(images);
    let n = feats.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = feats[i]
                .iter()
                .zip(&feats[j])
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            total += d2.sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Reference statistics bundle: the Gaussian summary plus the identity of
/// the embedding it was computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStats {
    pub stats: GaussianStats,
    pub embed_seed: u64,
    pub embed_input_dim: usize,
}

fn stats_digest(r: &ReferenceStats) -> String {
    let mut hasher = Sha256::new();
    hasher.update((r.stats.dim() as u64).to_le_bytes());
    hasher.update((r.stats.count as u64).to_le_bytes());
    hasher.update(r.embed_seed.to_le_bytes());
    hasher.update((r.embed_input_dim as u64).to_le_bytes());
    for &x in r.stats.mean.iter().chain(&r.stats.cov) {
        hasher.update(x.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Write reference statistics with an integrity hash.
pub fn save_reference(path: &Path, r: &ReferenceStats) -> Result<(), EvalError> {
    let mut meta = BTreeMap::new();
    meta.insert("dim".to_string(), r.stats.dim().to_string());
    meta.insert("count".to_string(), r.stats.count.to_string());
    meta.insert("embed_seed".to_string(), r.embed_seed.to_string());
    meta.insert("embed_input_dim".to_string(), r.embed_input_dim.to_string());
    meta.insert("hash".to_string(), stats_digest(r));
    checkpoint::save(
        path,
        &meta,
        &[
            checkpoint::Section::raw("mean", r.stats.mean.clone()),
            checkpoint::Section::raw("cov", r.stats.cov.clone()),
        ],
    )?;
    Ok(())
}

/// Load reference statistics, verifying the integrity hash.
pub fn load_reference(path: &Path) -> Result<ReferenceStats, EvalError> {
    let (meta, sections) = checkpoint::load(path)?;
    let get = |key: &str| {
        meta.get(key).cloned().ok_or_else(|| EvalError::MissingEntry(key.to_string()))
    };
    let parse = |key: &str| -> Result<u64, EvalError> {
        let v = get(key)?;
        v.parse().map_err(|_| EvalError::BadEntry { key: key.into(), value: v })
    };
    let section = |name: &str| {
        sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.params.clone())
            .ok_or_else(|| EvalError::MissingEntry(name.to_string()))
    };
    let r = ReferenceStats {
        stats: GaussianStats {
            mean: section("mean")?,
            cov: section("cov")?,
            count: parse("count")? as usize,
        },
        embed_seed: parse("embed_seed")?,
        embed_input_dim: parse("embed_input_dim")? as usize,
    };
    let dim = parse("dim")? as usize;
    if r.stats.dim() != dim || r.stats.cov.len() != dim * dim {
        return Err(EvalError::DimMismatch { a: r.stats.dim(), b: dim });
    }
    if stats_digest(&r) != get("hash")? {
        return Err(EvalError::BadHash);
    }
    Ok(r)
}
