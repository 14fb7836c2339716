// SPDX-License-Identifier: Apache-2.0

//! Frozen-encoder evaluation with labels: k-nearest-neighbour vote and a
//! closed-form ridge linear probe. Also home of the small symmetric
//! eigenvalue routine used for PSD checks.

use serde::{Deserialize, Serialize};

use crate::data::Anchor;
use crate::encoder::{forward_batch, Params};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbeMethod {
    Knn { k: usize },
    Linear { ridge: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub method: ProbeMethod,
}

/// `H × n` representations of the anchor points (not their views).
pub fn embed(theta: &Params, anchors: &[Anchor]) -> Result<Matrix> {
    let h = theta.arch().output_dim();
    if anchors.is_empty() {
        return Ok(Matrix::zeros(h, 0));
    }
    let rows: Vec<&[f64]> = anchors.iter().map(|a| a.sample.point.as_slice()).collect();
    forward_batch(theta, &Matrix::from_rows(&rows)?)
}

fn labels(anchors: &[Anchor]) -> Vec<usize> {
    anchors.iter().map(|a| a.label).collect()
}

fn require_nonempty(train: &[Anchor], test: &[Anchor]) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("evaluation needs non-empty train and test sets"));
    }
    Ok(())
}

/// k-NN on embedding columns. Ties in the vote go to the class with the
/// smallest mean distance among its voters, then to the lowest class index.
pub fn knn_predict(train: &Matrix, train_labels: &[usize], query: &Matrix, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > train.cols() {
        return Err(Error::invalid(format!("k must be in 1..={}, got {k}", train.cols())));
    }
    if train.rows() != query.rows() {
        return Err(Error::shape("train and query embeddings differ in dimension"));
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut preds = Vec::with_capacity(query.cols());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train.cols());
    for q in 0..query.cols() {
        dists.clear();
        for t in 0..train.cols() {
            let d: f64 = (0..train.rows()).map(|r| (train[(r, t)] - query[(r, q)]).powi(2)).sum();
            dists.push((d.sqrt(), t));
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut dist_sum = vec![0.0; classes];
        for &(d, t) in &dists[..k] {
            votes[train_labels[t]] += 1;
            dist_sum[train_labels[t]] += d;
        }
        let best = (0..classes)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then((dist_sum[a] / votes[a] as f64).total_cmp(&(dist_sum[b] / votes[b] as f64)))
                    .then(a.cmp(&b))
            })
            .unwrap();
        preds.push(best);
    }
    Ok(preds)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

pub fn knn_accuracy(theta: &Params, train: &[Anchor], test: &[Anchor], k: usize) -> Result<ProbeResult> {
    require_nonempty(train, test)?;
    let pred = knn_predict(&embed(theta, train)?, &labels(train), &embed(theta, test)?, k)?;
    Ok(ProbeResult {
        accuracy: accuracy(&pred, &labels(test)),
        method: ProbeMethod::Knn { k },
    })
}

/// One-vs-all ridge regression on one-hot targets with a bias feature.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    /// `(H + 1) × C`, last row is the bias.
    pub weights: Matrix,
    /// `‖A W − B‖_F / max(‖B‖_F, 1e-300)` for the normal equations `A W = B`.
    pub relative_residual: f64,
}

fn with_bias(features: &Matrix) -> Matrix {
    // columns are samples; output rows are samples with a trailing 1
    let (h, n) = features.shape();
    let mut out = Matrix::zeros(n, h + 1);
    for s in 0..n {
        for r in 0..h {
            out[(s, r)] = features[(r, s)];
        }
        out[(s, h)] = 1.0;
    }
    out
}

/// Solves `(FᵀF/n + ridge·I) W = FᵀY/n`. Scaling by `n` makes the fit
/// invariant to duplicating the training set.
pub fn ridge_fit(features: &Matrix, labels: &[usize], classes: usize, ridge: f64) -> Result<RidgeFit> {
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("ridge must be >= 0, got {ridge}")));
    }
    let f = with_bias(features);
    let n = f.rows() as f64;
    let mut y = Matrix::zeros(f.rows(), classes);
    for (s, &l) in labels.iter().enumerate() {
        y[(s, l)] = 1.0;
    }
    let ft = f.transpose();
    let mut a = ft.matmul(&f)?;
    a.scale_in_place(1.0 / n);
    for i in 0..a.rows() {
        a[(i, i)] += ridge;
    }
    let mut b = ft.matmul(&y)?;
    b.scale_in_place(1.0 / n);
    let w = solve(&a, &b).map_err(|e| match e {
        Error::Singular(m) => Error::Singular(format!("{m}; use a ridge strength > 0")),
        other => other,
    })?;
    let resid = a.matmul(&w)?.sub(&b)?.frobenius_norm() / b.frobenius_norm().max(1e-300);
    Ok(RidgeFit {
        weights: w,
        relative_residual: resid,
    })
}

pub fn linear_predict(fit: &RidgeFit, features: &Matrix) -> Result<Vec<usize>> {
    let scores = with_bias(features).matmul(&fit.weights)?;
    Ok((0..scores.rows())
        .map(|s| {
            let row = scores.row(s);
            // first index wins ties
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn linear_probe_accuracy(theta: &Params, train: &[Anchor], test: &[Anchor], ridge: f64) -> Result<ProbeResult> {
    require_nonempty(train, test)?;
    let train_labels = labels(train);
    let test_labels = labels(test);
    let classes = train_labels.iter().chain(&test_labels).max().unwrap() + 1;
    let fit = ridge_fit(&embed(theta, train)?, &train_labels, classes, ridge)?;
    let pred = linear_predict(&fit, &embed(theta, test)?)?;
    Ok(ProbeResult {
        accuracy: accuracy(&pred, &test_labels),
        method: ProbeMethod::Linear { ridge },
    })
}

/// Gaussian elimination with partial pivoting for `A X = B`.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() || b.rows() != n {
        return Err(Error::shape(format!(
            "cannot solve {}x{} system with {}x{} right-hand side",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let m = b.cols();
    let mut a = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap();
        if a[(pivot, col)].abs() <= 1e-12 * scale {
            return Err(Error::Singular(format!("normal matrix is singular at column {col}")));
        }
        if pivot != col {
            for k in 0..n {
                let t = a[(col, k)];
                a[(col, k)] = a[(pivot, k)];
                a[(pivot, k)] = t;
            }
            for k in 0..m {
                let t = x[(col, k)];
                x[(col, k)] = x[(pivot, k)];
                x[(pivot, k)] = t;
            }
        }
        for row in col + 1..n {
            let factor = a[(row, col)] / a[(col, col)];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[(row, k)] -= factor * a[(col, k)];
            }
            for k in 0..m {
                x[(row, k)] -= factor * x[(col, k)];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..m {
            let mut v = x[(col, k)];
            for j in col + 1..n {
                v -= a[(col, j)] * x[(j, k)];
            }
            x[(col, k)] = v / a[(col, col)];
        }
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
/// Intended for small matrices (H ≤ 16).
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::shape("eigenvalues need a square matrix"));
    }
    let n = m.rows();
    let mut a = crate::numerics::sym_part(m)?;
    let norm = a.frobenius_norm();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnchorSample;
    use crate::encoder::{init_params, EncoderArch};
    use crate::numerics::{gaussian_matrix, Purpose, RngStream};

    fn rng(seed: u64) -> RngStream {
        RngStream::for_purpose(seed, Purpose::Test)
    }

    fn anchor(id: usize, label: usize, point: Vec<f64>) -> Anchor {
        Anchor {
            label,
            sample: AnchorSample {
                id,
                point,
                views: vec![],
            },
        }
    }

    /// `tanh(x)` with unit weights: near-identity for small inputs.
    fn identity_encoder(d: usize) -> Params {
        let arch = EncoderArch::new(vec![d, d]).unwrap();
        let mut v = vec![0.0; arch.param_count()];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        Params::new(arch, v).unwrap()
    }

    fn clusters(per_class: usize, spread: f64, seed: u64, id0: usize) -> Vec<Anchor> {
        let centers = [[0.6, 0.0], [0.0, 0.6], [-0.6, -0.6]];
        let mut r = rng(seed);
        let mut out = Vec::new();
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let p = c.iter().map(|&x| x + spread * r.normal()).collect();
                out.push(anchor(id0 + out.len(), label, p));
            }
        }
        out
    }

    #[test]
    fn embed_matches_forward_and_permutes() {
        let theta = init_params(&EncoderArch::new(vec![2, 4, 3]).unwrap(), 1.0, &mut rng(1)).unwrap();
        let anchors = clusters(2, 0.1, 2, 0);
        let e = embed(&theta, &anchors).unwrap();
        let mut rev = anchors.clone();
        rev.reverse();
        let er = embed(&theta, &rev).unwrap();
        for i in 0..anchors.len() {
            assert_eq!(e.column(i), er.column(anchors.len() - 1 - i));
        }
        let zero = Params::zeros(theta.arch().clone());
        assert_eq!(embed(&zero, &anchors).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn knn_exact_match() {
        let theta = identity_encoder(2);
        let train = clusters(5, 0.2, 3, 0);
        let test = vec![train[7].clone()];
        assert_eq!(knn_accuracy(&theta, &train, &test, 1).unwrap().accuracy, 1.0);
    }

    #[test]
    fn knn_separable_clusters_perfect() {
        let theta = identity_encoder(2);
        let train = clusters(20, 0.05, 4, 0);
        let test = clusters(10, 0.05, 5, 100);
        assert_eq!(knn_accuracy(&theta, &train, &test, 5).unwrap().accuracy, 1.0);
    }

    #[test]
    fn knn_random_labels_is_chance() {
        let theta = identity_encoder(2);
        let mut r = rng(6);
        let train: Vec<Anchor> = (0..400).map(|i| anchor(i, r.index(2), vec![r.normal(), r.normal()])).collect();
        let test: Vec<Anchor> = (0..2000).map(|i| anchor(i, r.index(2), vec![r.normal(), r.normal()])).collect();
        let acc = knn_accuracy(&theta, &train, &test, 5).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn knn_tie_breaks() {
        // k = 2 with one vote each: the closer class wins
        let train = Matrix::from_columns(&[[0.0], [3.0]]).unwrap();
        let q = Matrix::from_columns(&[[1.0]]).unwrap();
        assert_eq!(knn_predict(&train, &[1, 0], &q, 2).unwrap(), vec![1]);
        // equal distances: lowest class index
        let q = Matrix::from_columns(&[[1.5]]).unwrap();
        assert_eq!(knn_predict(&train, &[1, 0], &q, 2).unwrap(), vec![0]);
        assert!(knn_predict(&train, &[1, 0], &q, 3).is_err());
    }

    #[test]
    fn knn_invariant_to_rotation() {
        let theta = identity_encoder(2);
        let train = clusters(10, 0.3, 8, 0);
        let test = clusters(10, 0.3, 9, 100);
        let a = embed(&theta, &train).unwrap();
        let b = embed(&theta, &test).unwrap();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = Matrix::from_rows(&[[c, -s], [s, c]]).unwrap();
        let labels_train: Vec<usize> = train.iter().map(|a| a.label).collect();
        let p1 = knn_predict(&a, &labels_train, &b, 3).unwrap();
        let p2 = knn_predict(&rot.matmul(&a).unwrap(), &labels_train, &rot.matmul(&b).unwrap(), 3).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn linear_probe_separable() {
        let theta = identity_encoder(2);
        let train = clusters(20, 0.05, 10, 0);
        let test = clusters(10, 0.05, 11, 100);
        assert_eq!(linear_probe_accuracy(&theta, &train, &test, 1e-6).unwrap().accuracy, 1.0);
    }

    #[test]
    fn linear_probe_zero_embeddings() {
        let theta = Params::zeros(EncoderArch::new(vec![2, 2]).unwrap());
        let mut train = clusters(3, 0.1, 12, 0);
        train.push(anchor(50, 1, vec![0.0, 0.6]));
        let test = clusters(4, 0.1, 13, 100);
        let res = linear_probe_accuracy(&theta, &train, &test, 1e-3).unwrap();
        // class 1 is the training majority; test is balanced over 3 classes
        assert!((res.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(linear_probe_accuracy(&theta, &train, &test, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn linear_probe_duplicate_invariance() {
        let theta = identity_encoder(2);
        let train = clusters(8, 0.4, 14, 0);
        let test = clusters(8, 0.4, 15, 100);
        let mut doubled = train.clone();
        doubled.extend(train.iter().cloned());
        let f1 = ridge_fit(&embed(&theta, &train).unwrap(), &labels(&train), 3, 0.1).unwrap();
        let f2 = ridge_fit(&embed(&theta, &doubled).unwrap(), &labels(&doubled), 3, 0.1).unwrap();
        assert!(f1.weights.sub(&f2.weights).unwrap().max_abs() < 1e-12);
        assert!(f1.relative_residual < 1e-8);
        let a1 = linear_probe_accuracy(&theta, &train, &test, 0.1).unwrap();
        let a2 = linear_probe_accuracy(&theta, &doubled, &test, 0.1).unwrap();
        assert_eq!(a1.accuracy, a2.accuracy);
    }

    #[test]
    fn eigenvalues_of_known_matrices() {
        let m = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&m).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
        for seed in 0..5 {
            let g = gaussian_matrix(6, 6, 1.0, &mut rng(seed)).unwrap();
            let s = crate::numerics::sym_part(&g).unwrap();
            let e = symmetric_eigenvalues(&s).unwrap();
            assert!((e.iter().sum::<f64>() - s.trace()).abs() < 1e-10);
            let fro2: f64 = e.iter().map(|x| x * x).sum();
            assert!((fro2 - s.frobenius_norm().powi(2)).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_sets_rejected() {
        let theta = identity_encoder(2);
        let train = clusters(2, 0.1, 1, 0);
        assert!(knn_accuracy(&theta, &train, &[], 1).is_err());
        assert!(linear_probe_accuracy(&theta, &[], &train, 0.1).is_err());
    }
}
