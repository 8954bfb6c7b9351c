//! Linear leakage probe: L2-regularized logistic regression on standardized
//! features, fitted by accelerated gradient descent with a fixed budget.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{auroc, AuditError};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub train_fraction: f64,
    pub l2: f64,
    pub iterations: usize,
    pub min_per_class: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            l2: 1e-3,
            iterations: 300,
            min_per_class: 20,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows with a trailing constant 1 for the bias.
struct Design {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl Design {
    fn dot(&self, i: usize, w: &[f64]) -> f64 {
        self.rows[i].iter().zip(w).map(|(a, b)| a * b).sum()
    }

    /// Gradient of the mean logistic loss plus `l2/2 |w_features|^2`.
    fn gradient(&self, y: &[u8], w: &[f64], l2: f64) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let mut g = vec![0.0; self.dim];
        for (i, row) in self.rows.iter().enumerate() {
            let r = sigmoid(self.dot(i, w)) - y[i] as f64;
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj += r * xj / n;
            }
        }
        for j in 0..self.dim - 1 {
            g[j] += l2 * w[j];
        }
        g
    }

    /// Largest eigenvalue of `X^T X / n` by power iteration.
    fn gram_norm(&self) -> f64 {
        let n = self.rows.len() as f64;
        let mut v = vec![1.0 / (self.dim as f64).sqrt(); self.dim];
        let mut lambda = 0.0;
        for _ in 0..100 {
            let mut u = vec![0.0; self.dim];
            for (i, row) in self.rows.iter().enumerate() {
                let s = self.dot(i, &v);
                for (uj, xj) in u.iter_mut().zip(row) {
                    *uj += s * xj / n;
                }
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v = u.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }
}

/// Held-out AUROC of a linear probe predicting `labels` from `features`.
///
/// The split is stratified by label: within each class the order is
/// shuffled with `split_seed` and the first `train_fraction` (rounded) go
/// to training. Standardization statistics come from the training rows.
pub fn probe_leakage(
    features: &[Vec<f64>],
    labels: &[u8],
    split_seed: u64,
    opts: &ProbeOptions,
) -> Result<f64, AuditError> {
    if features.len() != labels.len() {
        return Err(AuditError::Length(features.len(), labels.len()));
    }
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(AuditError::Mismatch("feature vectors differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(split_seed, &[seeds::tag::PROBE]));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..2u8 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < opts.min_per_class {
            return Err(AuditError::ClassTooSmall {
                class,
                have: idx.len(),
                need: opts.min_per_class,
            });
        }
        idx.shuffle(&mut rng);
        let k = (opts.train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let nt = train.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| train.iter().map(|&i| features[i][j]).sum::<f64>() / nt)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let v = train.iter().map(|&i| (features[i][j] - mean[j]).powi(2)).sum::<f64>() / nt;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let design = |idx: &[usize]| Design {
        rows: idx
            .iter()
            .map(|&i| {
                let mut r: Vec<f64> = (0..dim).map(|j| (features[i][j] - mean[j]) / std[j]).collect();
                r.push(1.0);
                r
            })
            .collect(),
        dim: dim + 1,
    };
    let xtr = design(&train);
    let ytr: Vec<u8> = train.iter().map(|&i| labels[i]).collect();

    let lipschitz = 0.25 * xtr.gram_norm() + opts.l2;
    let step = 1.0 / lipschitz;
    let mut w = vec![0.0; dim + 1];
    let mut w_prev = w.clone();
    for k in 0..opts.iterations {
        let momentum = k as f64 / (k as f64 + 3.0);
        let y: Vec<f64> = w.iter().zip(&w_prev).map(|(a, b)| a + momentum * (a - b)).collect();
        let g = xtr.gradient(&ytr, &y, opts.l2);
        w_prev = w;
        w = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
    }

    let xte = design(&test);
    let scores: Vec<f64> = (0..test.len()).map(|i| xte.dot(i, &w)).collect();
    let yte: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
    auroc(&scores, &yte)
}
