//! Context vector for density selection: local uncertainty, PCA-compressed
//! text/vision embeddings, clip relevance and spectral complexity.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CalibratedDistribution, TokenTensor};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("need at least {need} vectors, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("target dimension must be >= 1")]
    ZeroDim,
    #[error("text embedding has zero norm")]
    ZeroTextEmbedding,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Mean-centred principal directions of a set of D-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// D×d, row-major; columns are orthonormal (or zero when padded).
    pub components: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Non-increasing.
    pub explained_variance: Vec<f64>,
    /// Fewer than d directions carried variance; trailing columns are zero.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn component(&self, k: usize) -> Vec<f64> {
        (0..self.input_dim)
            .map(|i| self.components[i * self.output_dim + k])
            .collect()
    }

    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if h.len() != self.input_dim {
            return Err(FeatureError::DimMismatch {
                expected: self.input_dim,
                got: h.len(),
            });
        }
        let d = self.output_dim;
        let mut z = vec![0.0; d];
        for (i, (&x, &m)) in h.iter().zip(&self.mean).enumerate() {
            let c = x - m;
            let row = &self.components[i * d..(i + 1) * d];
            for (zk, &p) in z.iter_mut().zip(row) {
                *zk += p * c;
            }
        }
        Ok(z)
    }
}

// Eigenvalues below this fraction of the largest are treated as zero.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-12;

pub fn fit_pca(vectors: &[Vec<f64>], d: usize) -> Result<PcaModel, FeatureError> {
    if d == 0 {
        return Err(FeatureError::ZeroDim);
    }
    if vectors.len() < d + 1 {
        return Err(FeatureError::TooFewSamples {
            need: d + 1,
            got: vectors.len(),
        });
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(FeatureError::EmptyInput);
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(FeatureError::DimMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite("pca input"));
    }
    let n = vectors.len();
    let mean = mean_rows(vectors.iter().map(|v| v.as_slice()), dim);
    let centered = DMatrix::from_fn(n, dim, |r, c| vectors[r][c] - mean[c]);
    let scale = 1.0 / (n as f64 - 1.0);

    // Eigenpairs of the covariance, largest first. With fewer samples than
    // dimensions the n×n Gram matrix has the same nonzero spectrum.
    let mut pairs: Vec<(f64, Vec<f64>)> = if n <= dim {
        let gram = &centered * centered.transpose() * scale;
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .map(|k| {
                let lambda = eig.eigenvalues[k];
                let v = eig.eigenvectors.column(k);
                let w = centered.transpose() * v;
                let norm = w.norm();
                let dir = if norm > 0.0 {
                    (w / norm).iter().copied().collect()
                } else {
                    vec![0.0; dim]
                };
                (lambda, dir)
            })
            .collect()
    } else {
        let cov = centered.transpose() * &centered * scale;
        let eig = SymmetricEigen::new(cov);
        (0..dim)
            .map(|k| {
                (
                    eig.eigenvalues[k],
                    eig.eigenvectors.column(k).iter().copied().collect(),
                )
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map(|p| p.0).unwrap_or(0.0).max(0.0);
    let floor = top * RELATIVE_EIGEN_FLOOR;

    let mut components = vec![0.0; dim * d];
    let mut explained_variance = vec![0.0; d];
    let mut rank_deficient = false;
    for k in 0..d {
        let usable = pairs
            .get(k)
            .filter(|(lambda, _)| top > 0.0 && *lambda > floor);
        let Some((lambda, dir)) = usable else {
            rank_deficient = true;
            continue;
        };
        let pivot = dir
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            })
            .0;
        let sign = if dir[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, &v) in dir.iter().enumerate() {
            components[i * d + k] = sign * v;
        }
        explained_variance[k] = *lambda;
    }
    Ok(PcaModel {
        mean,
        components,
        input_dim: dim,
        output_dim: d,
        explained_variance,
        rank_deficient,
    })
}

fn mean_rows<'a, T>(rows: impl Iterator<Item = &'a [T]>, dim: usize) -> Vec<f64>
where
    T: Copy + Into<f64> + 'a,
{
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v.into();
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

/// Mean of the question-token embeddings.
pub fn pool_text(rows: &[Vec<f32>]) -> Result<Vec<f64>, FeatureError> {
    let first = rows.first().ok_or(FeatureError::EmptyInput)?;
    let dim = first.len();
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(FeatureError::DimMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    Ok(mean_rows(rows.iter().map(|r| r.as_slice()), dim))
}

/// Global average of every vision token.
pub fn pool_vision(tokens: &TokenTensor) -> Result<Vec<f64>, FeatureError> {
    if tokens.num_tokens() == 0 {
        return Err(FeatureError::EmptyInput);
    }
    Ok(mean_rows(tokens.tokens(), tokens.dim))
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f32]) -> f64 {
    let na = norm(a.iter().copied());
    let nb = norm(b.iter().map(|&x| x as f64));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRelevance {
    /// Summed token/text cosine per clip.
    pub scores: Vec<f64>,
    pub s_max: f64,
    pub s_mean: f64,
    /// Tokens with zero norm, counted as similarity 0.
    pub zero_norm_tokens: usize,
}

pub fn clip_relevance(h_txt: &[f64], tokens: &TokenTensor) -> Result<ClipRelevance, FeatureError> {
    if h_txt.len() != tokens.dim {
        return Err(FeatureError::DimMismatch {
            expected: tokens.dim,
            got: h_txt.len(),
        });
    }
    if norm(h_txt.iter().copied()) == 0.0 {
        return Err(FeatureError::ZeroTextEmbedding);
    }
    if tokens.num_tokens() == 0 {
        return Err(FeatureError::EmptyInput);
    }
    let mut zero_norm_tokens = 0;
    let scores: Vec<f64> = (0..tokens.num_clips())
        .map(|t| {
            tokens
                .clip_tokens(t)
                .map(|j| {
                    let tok = tokens.token(j);
                    if tok.iter().all(|&v| v == 0.0) {
                        zero_norm_tokens += 1;
                    }
                    cosine(h_txt, tok)
                })
                .sum()
        })
        .collect();
    let s_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s_mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(ClipRelevance {
        scores,
        s_max,
        s_mean,
        zero_norm_tokens,
    })
}

/// The min(rows, dim) singular values of the `rows × dim` matrix `x`
/// (row-major), from the eigenvalues of its smaller Gram matrix, sorted
/// descending.
pub fn singular_values_gram(x: &[f32], rows: usize, dim: usize) -> Vec<f64> {
    let m = DMatrix::from_fn(rows, dim, |r, c| x[r * dim + c] as f64);
    let gram = if rows <= dim {
        &m * m.transpose()
    } else {
        m.transpose() * &m
    };
    let trace = gram.trace();
    let eig = SymmetricEigen::new(gram);
    let mut sv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < RELATIVE_EIGEN_FLOOR * trace {
                0.0
            } else {
                l.sqrt()
            }
        })
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Shannon entropy (nats) of the normalized singular-value spectrum divided
/// by ln J, J = min(rows, dim). Zero for all-zero or rank-1 inputs.
pub fn normalized_spectral_entropy(x: &[f32], rows: usize, dim: usize) -> f64 {
    let j = rows.min(dim);
    if j < 2 {
        return 0.0;
    }
    let sv = singular_values_gram(x, rows, dim);
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let h: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    (h / (j as f64).ln()).clamp(0.0, 1.0)
}

/// Indices of the `k` highest-scoring clips, ties to the earlier clip.
pub fn top_clips(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order
}

/// Mean normalized spectral entropy over the top-`k` clips by relevance.
pub fn spectral_complexity(
    tokens: &TokenTensor,
    scores: &[f64],
    k: usize,
) -> Result<f64, FeatureError> {
    let clips = tokens.num_clips();
    if clips == 0 || k == 0 {
        return Err(FeatureError::EmptyInput);
    }
    if scores.len() != clips {
        return Err(FeatureError::DimMismatch {
            expected: clips,
            got: scores.len(),
        });
    }
    let chosen = top_clips(scores, k);
    let total: f64 = chosen
        .iter()
        .map(|&t| {
            let range = tokens.clip_tokens(t);
            let rows = range.len();
            let x = &tokens.data[range.start * tokens.dim..range.end * tokens.dim];
            normalized_spectral_entropy(x, rows, tokens.dim)
        })
        .sum();
    Ok(total / chosen.len() as f64)
}

/// Bandit context in field order
/// `[n, κ, δ, H, z_txt.., z_vis.., s_max, s_mean, s_cplx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub n_frames: f64,
    pub kappa: f64,
    pub margin: f64,
    pub entropy: f64,
    pub z_txt: Vec<f64>,
    pub z_vis: Vec<f64>,
    pub s_max: f64,
    pub s_mean: f64,
    pub s_cplx: f64,
}

impl ContextVector {
    pub fn len_for(pca_dim: usize) -> usize {
        4 + 2 * pca_dim + 3
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(7 + self.z_txt.len() + self.z_vis.len());
        v.extend([self.n_frames, self.kappa, self.margin, self.entropy]);
        v.extend(&self.z_txt);
        v.extend(&self.z_vis);
        v.extend([self.s_max, self.s_mean, self.s_cplx]);
        v
    }

    pub fn from_slice(v: &[f64], pca_dim: usize) -> Result<Self, FeatureError> {
        if v.len() != Self::len_for(pca_dim) {
            return Err(FeatureError::DimMismatch {
                expected: Self::len_for(pca_dim),
                got: v.len(),
            });
        }
        let d = pca_dim;
        Ok(Self {
            n_frames: v[0],
            kappa: v[1],
            margin: v[2],
            entropy: v[3],
            z_txt: v[4..4 + d].to_vec(),
            z_vis: v[4 + d..4 + 2 * d].to_vec(),
            s_max: v[4 + 2 * d],
            s_mean: v[5 + 2 * d],
            s_cplx: v[6 + 2 * d],
        })
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite("context vector"));
        }
        Ok(())
    }
}

/// Everything the device has after local inference.
#[derive(Debug, Clone, Copy)]
pub struct LocalArtifacts<'a> {
    pub n_frames: usize,
    pub dist: &'a CalibratedDistribution,
    pub question_embeddings: &'a [Vec<f32>],
    pub tokens: &'a TokenTensor,
}

pub fn build_context(
    local: LocalArtifacts<'_>,
    pca_txt: &PcaModel,
    pca_vis: &PcaModel,
    top_k: usize,
) -> Result<ContextVector, FeatureError> {
    let h_txt = pool_text(local.question_embeddings)?;
    let h_vis = pool_vision(local.tokens)?;
    let rel = clip_relevance(&h_txt, local.tokens)?;
    let s_cplx = spectral_complexity(local.tokens, &rel.scores, top_k)?;
    let ctx = ContextVector {
        n_frames: local.n_frames as f64,
        kappa: local.dist.confidence,
        margin: local.dist.margin,
        entropy: local.dist.entropy_norm,
        z_txt: pca_txt.project(&h_txt)?,
        z_vis: pca_vis.project(&h_vis)?,
        s_max: rel.s_max,
        s_mean: rel.s_mean,
        s_cplx,
    };
    ctx.validate()?;
    Ok(ctx)
}
