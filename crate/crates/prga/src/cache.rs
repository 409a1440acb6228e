//! Key-value cache: learnable keys over one-hot class values, sharpened
//! cosine affinity, and residual fusion with zero-shot classifier logits.

use crate::embank::{l2_normalize, ClassifierWeights, EmbeddingBank};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Tolerance for the unit-norm precondition on affinity queries.
const NORM_TOL: f64 = 1e-6;

/// Learnable cache keys plus frozen one-hot values and classifier prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheModel {
    /// M x d learnable keys, rows kept L2-normalized.
    pub theta: Mat,
    /// M x N fixed one-hot label rows.
    pub values: Mat,
    /// N x d frozen zero-shot classifier rows.
    pub classifier: Mat,
    /// Residual weight between cache and zero-shot streams.
    pub alpha: f64,
    /// Affinity sharpness.
    pub beta: f64,
}

impl CacheModel {
    pub fn keys(&self) -> usize {
        self.theta.rows()
    }

    pub fn dim(&self) -> usize {
        self.theta.cols()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    /// Re-normalize every key row; called after each optimizer step.
    pub fn renormalize_keys(&mut self) -> Result<()> {
        for r in 0..self.theta.rows() {
            let row = l2_normalize(self.theta.row(r))?;
            self.theta.row_mut(r).copy_from_slice(&row);
        }
        Ok(())
    }
}

/// Initialize keys from the normalized support globals, in bank order, with
/// one-hot values at each item's label.
pub fn build_cache(
    bank: &EmbeddingBank,
    classifier: &ClassifierWeights,
    alpha: f64,
    beta: f64,
) -> Result<CacheModel> {
    let n = bank.class_count();
    if classifier.classes() != n || classifier.dim() != bank.dim() {
        return Err(Error::dim(
            "build_cache",
            format!(
                "classifier is {}x{}, bank has {} classes of dim {}",
                classifier.classes(),
                classifier.dim(),
                n,
                bank.dim()
            ),
        ));
    }
    if beta <= 0.0 || alpha < 0.0 {
        return Err(Error::Config(format!(
            "need alpha >= 0 and beta > 0, got alpha={alpha}, beta={beta}"
        )));
    }
    let groups = bank.items_by_class();
    let k = bank.item_count() / n;
    for (class, items) in groups.iter().enumerate() {
        if items.is_empty() || items.len() != k || k == 0 {
            return Err(Error::ClassCoverage {
                class,
                found: items.len(),
                expected: k.max(1),
            });
        }
    }

    let m = bank.item_count();
    let mut theta = Mat::zeros(m, bank.dim());
    let mut values = Mat::zeros(m, n);
    for i in 0..m {
        let g = l2_normalize(&bank.global_f64(i))?;
        theta.row_mut(i).copy_from_slice(&g);
        values[(i, bank.label(i))] = 1.0;
    }
    Ok(CacheModel {
        theta,
        values,
        classifier: classifier.to_mat(),
        alpha,
        beta,
    })
}

/// Sharpened cosine affinity of a unit query against every key:
/// `A[m] = exp(-beta * (1 - <f_q, theta_m>))`.
pub fn affinity(f_q: &[f64], theta: &Mat, beta: f64) -> Result<Vec<f64>> {
    if f_q.len() != theta.cols() {
        return Err(Error::dim(
            "affinity",
            format!("query has dim {}, keys have dim {}", f_q.len(), theta.cols()),
        ));
    }
    let norm = f_q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(Error::NotNormalized { norm });
    }
    let out = (0..theta.rows())
        .map(|m| {
            let sim: f64 = theta.row(m).iter().zip(f_q).map(|(a, b)| a * b).sum();
            (-beta * (1.0 - sim)).exp()
        })
        .collect();
    Ok(out)
}

/// Training-time logits for a graph-refined, normalized query:
/// `alpha * (A L_train) + f W_c^T`.
pub fn train_logits(f_hat: &[f64], cache: &CacheModel) -> Result<Vec<f64>> {
    if f_hat.len() != cache.dim() {
        return Err(Error::dim(
            "train_logits",
            format!("query has dim {}, cache has dim {}", f_hat.len(), cache.dim()),
        ));
    }
    let aff = affinity(f_hat, &cache.theta, cache.beta)?;
    let f = Mat::row_vec(f_hat);
    let cache_term = Mat::row_vec(&aff).matmul(&cache.values);
    let zero_shot = f.matmul_nt(&cache.classifier);
    Ok(cache_term
        .scale(cache.alpha)
        .add(&zero_shot)
        .data()
        .to_vec())
}

/// Inference logits for a raw global embedding: normalize, then fuse cache
/// retrieval with the zero-shot stream. No graph computation on this path.
pub fn infer_logits(f_test: &[f64], cache: &CacheModel) -> Result<Vec<f64>> {
    let f = l2_normalize(f_test)?;
    if cache.alpha == 0.0 {
        // exact zero-shot reduction, independent of keys and beta
        return Ok(Mat::row_vec(&f).matmul_nt(&cache.classifier).data().to_vec());
    }
    train_logits(&f, cache)
}

/// Argmax with ties broken by the lowest class index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
