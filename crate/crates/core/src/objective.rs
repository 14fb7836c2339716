// SPDX-License-Identifier: Apache-2.0

//! Spectral contrastive loss in correlation-matrix form.
//!
//! The global objective over the union of client data is
//!
//! ```text
//! L(θ) = −Σⱼ qⱼ Tr{Rⱼ⁺(θ)} + ½ ‖Σⱼ qⱼ Rⱼ(θ)‖²_F
//! ```
//!
//! where `Rⱼ = E[z zᵀ]` and `Rⱼ⁺ = E[z(x) z(x⁺)ᵀ]` over client `j`'s anchors
//! and their augmentation kernel. Each client trains on
//!
//! ```text
//! L̂ⱼ = −Tr{R̂ⱼ⁺} + ½ αⱼ ‖R̂ⱼ‖²_F + (1 − αⱼ) Tr{R̂ⱼ R̄₋ⱼ}
//! ```
//!
//! with `R̄₋ⱼ` held constant. With `αⱼ = qⱼ`, exact expectations and the exact
//! complement `R₋ⱼ`, the weighted local gradients sum to the global gradient.

use serde::{Deserialize, Serialize};

use crate::data::{AnchorSample, ClientDataset, KernelMode};
use crate::encoder::{forward_batch, forward_pass, Params};
use crate::error::{Error, Result};
use crate::numerics::{sym_part, Matrix};

/// An `H × H` second-moment matrix of representations.
///
/// Matrices estimated from representations are symmetrised on construction.
/// Released (noised) matrices may carry an asymmetric noise component; see
/// [`CorrMatrix::from_release`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrMatrix(Matrix);

impl CorrMatrix {
    /// Symmetrises `m`.
    pub fn symmetric(m: Matrix) -> Result<Self> {
        Ok(Self(sym_part(&m)?))
    }

    /// Wraps a released matrix as is. Only squareness is checked.
    pub fn from_release(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::shape(format!("correlation matrix must be square, got {}x{}", m.rows(), m.cols())));
        }
        Ok(Self(m))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(Matrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.frobenius_norm()
    }
}

/// Exact `(R⁺ⱼ, Rⱼ)` for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCorrelations {
    pub positive: CorrMatrix,
    pub full: CorrMatrix,
}

/// Per-client terms of the three-way split of the global loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientTerms {
    /// `−Tr{Rⱼ⁺}`
    pub contraction: f64,
    /// `½ qⱼ ‖Rⱼ‖²_F`
    pub intra_contrast: f64,
    /// `½ (1 − qⱼ) Tr{Rⱼ R₋ⱼ}`
    pub inter_contrast: f64,
}

impl ClientTerms {
    pub fn sum(&self) -> f64 {
        self.contraction + self.intra_contrast + self.inter_contrast
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<ClientTerms>,
}

fn check_views(z_views: &[Matrix]) -> Result<(usize, usize, usize)> {
    if z_views.len() < 2 || !z_views.len().is_multiple_of(2) {
        return Err(Error::shape(format!(
            "need an even number (>= 2) of view matrices, got {}",
            z_views.len()
        )));
    }
    let (h, b) = z_views[0].shape();
    if b == 0 {
        return Err(Error::shape("empty batch"));
    }
    if let Some(bad) = z_views.iter().find(|z| z.shape() != (h, b)) {
        return Err(Error::shape(format!(
            "view matrices must all be {h}x{b}, found {}x{}",
            bad.rows(),
            bad.cols()
        )));
    }
    Ok((h, b, z_views.len() / 2))
}

/// `R̂ = (1/2BV) Σ_{v=1}^{2V} Z_v Z_vᵀ`
pub fn empirical_correlation(z_views: &[Matrix]) -> Result<CorrMatrix> {
    let (h, b, v) = check_views(z_views)?;
    let mut acc = Matrix::zeros(h, h);
    for z in z_views {
        acc.axpy(1.0, &z.matmul(&z.transpose())?)?;
    }
    acc.scale_in_place(1.0 / (2 * b * v) as f64);
    CorrMatrix::symmetric(acc)
}

/// `R̂⁺ = (1/2BV) Σ_{v=1}^{V} [Z_v Z_{v+V}ᵀ + Z_{v+V} Z_vᵀ]`
pub fn empirical_positive_correlation(z_views: &[Matrix]) -> Result<CorrMatrix> {
    let (h, b, v) = check_views(z_views)?;
    let mut acc = Matrix::zeros(h, h);
    for i in 0..v {
        let cross = z_views[i].matmul(&z_views[i + v].transpose())?;
        acc.axpy(1.0, &cross)?;
        acc.axpy(1.0, &cross.transpose())?;
    }
    acc.scale_in_place(1.0 / (2 * b * v) as f64);
    CorrMatrix::symmetric(acc)
}

fn require_finite(client: &ClientDataset) -> Result<usize> {
    if client.kernel().mode != KernelMode::Finite {
        return Err(Error::KernelMode(format!(
            "client {} uses a stochastic kernel; exact expectations need finite mode",
            client.id
        )));
    }
    if client.is_empty() {
        return Err(Error::invalid(format!("client {} has no data", client.id)));
    }
    let k = client.views_per_anchor();
    if k == 0 || client.samples().iter().any(|s| s.views.len() != k) {
        return Err(Error::invalid(format!(
            "client {} must store the same positive number of views for every anchor",
            client.id
        )));
    }
    Ok(k)
}

/// Exact `Rⱼ⁺(θ)` and `Rⱼ(θ)` under the finite kernel: `Rⱼ` averages `z zᵀ`
/// over anchors and views, `Rⱼ⁺` averages `m mᵀ` with `m` the mean view
/// representation of an anchor.
pub fn exact_client_correlations(theta: &Params, client: &ClientDataset) -> Result<ClientCorrelations> {
    let k = require_finite(client)?;
    let rows: Vec<&[f64]> = client
        .samples()
        .iter()
        .flat_map(|s| s.views.iter().map(Vec::as_slice))
        .collect();
    let z = forward_batch(theta, &Matrix::from_rows(&rows)?)?;
    let h = z.rows();
    let n = client.len();
    let mut full = z.matmul(&z.transpose())?;
    full.scale_in_place(1.0 / (n * k) as f64);
    let mut positive = Matrix::zeros(h, h);
    let mut mean = vec![0.0; h];
    for a in 0..n {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for v in 0..k {
            for (r, m) in mean.iter_mut().enumerate() {
                *m += z[(r, a * k + v)];
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        positive.axpy(1.0, &Matrix::outer(&mean))?;
    }
    positive.scale_in_place(1.0 / n as f64);
    Ok(ClientCorrelations {
        positive: CorrMatrix::symmetric(positive)?,
        full: CorrMatrix::symmetric(full)?,
    })
}

pub fn all_client_correlations(theta: &Params, clients: &[ClientDataset]) -> Result<Vec<ClientCorrelations>> {
    clients.iter().map(|c| exact_client_correlations(theta, c)).collect()
}

fn weights_of(clients: &[ClientDataset]) -> Result<Vec<f64>> {
    if clients.is_empty() {
        return Err(Error::invalid("no clients"));
    }
    Ok(clients.iter().map(ClientDataset::weight).collect())
}

/// `Σⱼ qⱼ Rⱼ`
pub fn weighted_sum(mats: &[&CorrMatrix], weights: &[f64]) -> Result<CorrMatrix> {
    let h = mats.first().map(|m| m.dim()).ok_or_else(|| Error::invalid("no matrices"))?;
    let mut acc = Matrix::zeros(h, h);
    for (m, &q) in mats.iter().zip(weights) {
        acc.axpy(q, m.matrix())?;
    }
    CorrMatrix::from_release(acc)
}

/// Global loss from precomputed exact correlations.
pub fn global_loss_from_correlations(corrs: &[ClientCorrelations], weights: &[f64]) -> Result<f64> {
    let contraction: f64 = corrs.iter().zip(weights).map(|(c, q)| q * c.positive.trace()).sum();
    let fulls: Vec<&CorrMatrix> = corrs.iter().map(|c| &c.full).collect();
    let pooled = weighted_sum(&fulls, weights)?;
    Ok(-contraction + 0.5 * pooled.frobenius_norm().powi(2))
}

/// `L = −Σⱼ qⱼ Tr{Rⱼ⁺} + ½ ‖Σⱼ qⱼ Rⱼ‖²_F` with exact finite-kernel expectations.
pub fn global_sc_loss(theta: &Params, clients: &[ClientDataset]) -> Result<f64> {
    let weights = weights_of(clients)?;
    global_loss_from_correlations(&all_client_correlations(theta, clients)?, &weights)
}

/// Single-client objective `−Tr{R⁺} + ½ ‖R‖²_F` evaluated exactly.
pub fn local_sc_loss(theta: &Params, client: &ClientDataset) -> Result<f64> {
    let c = exact_client_correlations(theta, client)?;
    Ok(-c.positive.trace() + 0.5 * c.full.frobenius_norm().powi(2))
}

/// `R₋ⱼ = (1/(1−qⱼ)) Σ_{j'≠j} q_{j'} R_{j'}`, from exact matrices.
pub fn exact_complement(fulls: &[&CorrMatrix], weights: &[f64], j: usize) -> Result<CorrMatrix> {
    let qj = weights[j];
    if qj >= 1.0 {
        return Err(Error::SingleClient);
    }
    let h = fulls[j].dim();
    let mut acc = Matrix::zeros(h, h);
    for (i, (m, &q)) in fulls.iter().zip(weights).enumerate() {
        if i != j {
            acc.axpy(q, m.matrix())?;
        }
    }
    acc.scale_in_place(1.0 / (1.0 - qj));
    CorrMatrix::symmetric(acc)
}

/// Three-way split of the global loss per client. With one client the
/// inter-client term is zero.
pub fn decomposed_global_loss(theta: &Params, clients: &[ClientDataset]) -> Result<LossBreakdown> {
    let weights = weights_of(clients)?;
    let corrs = all_client_correlations(theta, clients)?;
    decompose(&corrs, &weights)
}

pub fn decompose(corrs: &[ClientCorrelations], weights: &[f64]) -> Result<LossBreakdown> {
    let fulls: Vec<&CorrMatrix> = corrs.iter().map(|c| &c.full).collect();
    let mut terms = Vec::with_capacity(corrs.len());
    let mut total = 0.0;
    for (j, c) in corrs.iter().enumerate() {
        let q = weights[j];
        let inter_contrast = match exact_complement(&fulls, weights, j) {
            Ok(rest) => 0.5 * (1.0 - q) * c.full.matrix().frobenius_dot(rest.matrix())?,
            Err(Error::SingleClient) => 0.0,
            Err(e) => return Err(e),
        };
        let t = ClientTerms {
            contraction: -c.positive.trace(),
            intra_contrast: 0.5 * q * c.full.frobenius_norm().powi(2),
            inter_contrast,
        };
        total += q * t.sum();
        terms.push(t);
    }
    Ok(LossBreakdown { total, terms })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_r_bar(r_bar: &CorrMatrix, h: usize) -> Result<()> {
    if r_bar.dim() != h {
        return Err(Error::shape(format!("R̄ is {0}x{0}, representations have dimension {h}", r_bar.dim())));
    }
    Ok(())
}

/// `L̂ⱼ = −Tr{R̂⁺} + ½ α ‖R̂‖²_F + (1−α) Tr{R̂ R̄}` on representation batches.
pub fn local_batch_loss_from_reprs(z_views: &[Matrix], r_bar: &CorrMatrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (h, _, _) = check_views(z_views)?;
    check_r_bar(r_bar, h)?;
    let r_pos = empirical_positive_correlation(z_views)?;
    let r = empirical_correlation(z_views)?;
    let inter = if alpha < 1.0 {
        (1.0 - alpha) * r.matrix().frobenius_dot(&r_bar.matrix().transpose())?
    } else {
        0.0
    };
    Ok(-r_pos.trace() + 0.5 * alpha * r.frobenius_norm().powi(2) + inter)
}

/// [`local_batch_loss_from_reprs`] after encoding each of the `2V` input batches.
pub fn local_batch_loss(theta: &Params, x_views: &[Matrix], r_bar: &CorrMatrix, alpha: f64) -> Result<f64> {
    let z: Vec<Matrix> = x_views.iter().map(|x| forward_batch(theta, x)).collect::<Result<_>>()?;
    local_batch_loss_from_reprs(&z, r_bar, alpha)
}

/// Loss and exact gradient of the local batch objective with respect to θ.
///
/// All `2V` batches go through one stacked forward pass. With
/// `c = 1/(2BV)` and `M = α R̂ + (1−α) sym(R̄)`, the representation gradient
/// of view `v` is `c · (2 M Z_v − 2 Z_pair(v))`.
pub fn local_batch_loss_and_grad(
    theta: &Params,
    x_views: &[Matrix],
    r_bar: &CorrMatrix,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    check_alpha(alpha)?;
    if x_views.len() < 2 || !x_views.len().is_multiple_of(2) {
        return Err(Error::shape(format!(
            "need an even number (>= 2) of view batches, got {}",
            x_views.len()
        )));
    }
    let (b, d) = x_views[0].shape();
    if b == 0 || x_views.iter().any(|x| x.shape() != (b, d)) {
        return Err(Error::shape("view batches must share one non-empty shape"));
    }
    let n_views = x_views.len();
    let half = n_views / 2;
    let mut stacked = Vec::with_capacity(n_views * b * d);
    for x in x_views {
        stacked.extend_from_slice(x.as_slice());
    }
    let stacked = Matrix::from_vec(n_views * b, d, stacked)?;
    let pass = forward_pass(theta, &stacked)?;
    let z = pass.output();
    let h = z.rows();
    check_r_bar(r_bar, h)?;
    let c = 1.0 / (n_views * b) as f64;

    let mut r_hat = z.matmul(&z.transpose())?;
    r_hat.scale_in_place(c);
    let r_hat = sym_part(&r_hat)?;
    let col_pair = |col: usize| {
        let (v, i) = (col / b, col % b);
        ((v + half) % n_views) * b + i
    };
    let mut pos_trace = 0.0;
    for col in 0..n_views * b {
        let p = col_pair(col);
        for r in 0..h {
            pos_trace += z[(r, col)] * z[(r, p)];
        }
    }
    // each unordered pair appears twice in the column sweep, matching Z_v Z_{v+V}ᵀ + its transpose
    pos_trace *= c;

    let r_bar_sym = sym_part(r_bar.matrix())?;
    let mut inter = 0.0;
    let mut m = r_hat.scale(alpha);
    if alpha < 1.0 {
        inter = (1.0 - alpha) * r_hat.frobenius_dot(&r_bar_sym)?;
        m.axpy(1.0 - alpha, &r_bar_sym)?;
    }
    let loss = -pos_trace + 0.5 * alpha * r_hat.frobenius_norm().powi(2) + inter;

    let mut dz = m.matmul(&z)?;
    dz.scale_in_place(2.0 * c);
    for col in 0..n_views * b {
        let p = col_pair(col);
        for r in 0..h {
            dz[(r, col)] -= 2.0 * c * z[(r, p)];
        }
    }
    let grad = pass.backward(theta, &dz)?;
    Ok((loss, grad))
}

/// Exact gradient of the local batch objective; `R̄` is a constant.
pub fn local_batch_grad(theta: &Params, x_views: &[Matrix], r_bar: &CorrMatrix, alpha: f64) -> Result<Vec<f64>> {
    Ok(local_batch_loss_and_grad(theta, x_views, r_bar, alpha)?.1)
}

/// Full-batch view set realising exact expectations: every ordered pair
/// `(a, b)` of stored views for every anchor, so `V = K²` and `B = |Dⱼ|`.
pub fn enumerated_pair_views(client: &ClientDataset) -> Result<Vec<Matrix>> {
    require_finite(client)?;
    let samples: Vec<&AnchorSample> = client.samples().iter().collect();
    enumerated_pair_views_of(&samples)
}

/// [`enumerated_pair_views`] restricted to a batch of anchors.
pub fn enumerated_pair_views_of(samples: &[&AnchorSample]) -> Result<Vec<Matrix>> {
    let k = samples.first().map_or(0, |s| s.views.len());
    if k == 0 || samples.iter().any(|s| s.views.len() != k) {
        return Err(Error::invalid("enumeration needs the same positive number of stored views per anchor"));
    }
    let mut out = Vec::with_capacity(2 * k * k);
    for second in [false, true] {
        for a in 0..k {
            for b in 0..k {
                let idx = if second { b } else { a };
                let rows: Vec<&[f64]> = samples.iter().map(|s| s.views[idx].as_slice()).collect();
                out.push(Matrix::from_rows(&rows)?);
            }
        }
    }
    Ok(out)
}

/// Gradient of client `j`'s exact local objective.
pub fn exact_local_grad(theta: &Params, client: &ClientDataset, r_bar: &CorrMatrix, alpha: f64) -> Result<Vec<f64>> {
    local_batch_grad(theta, &enumerated_pair_views(client)?, r_bar, alpha)
}

/// Gradient of [`global_sc_loss`], assembled as `Σⱼ qⱼ ∇L̂ⱼ` with `αⱼ = qⱼ`
/// and the exact complement `R₋ⱼ(θ)`.
pub fn global_sc_grad(theta: &Params, clients: &[ClientDataset]) -> Result<Vec<f64>> {
    let weights = weights_of(clients)?;
    let corrs = all_client_correlations(theta, clients)?;
    let fulls: Vec<&CorrMatrix> = corrs.iter().map(|c| &c.full).collect();
    let h = theta.arch().output_dim();
    let mut grad = vec![0.0; theta.len()];
    for (j, client) in clients.iter().enumerate() {
        let (r_bar, alpha) = match exact_complement(&fulls, &weights, j) {
            Ok(r) => (r, weights[j]),
            Err(Error::SingleClient) => (CorrMatrix::zeros(h), 1.0),
            Err(e) => return Err(e),
        };
        let g = exact_local_grad(theta, client, &r_bar, alpha)?;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += weights[j] * gi;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Anchor, AugmentationKernel};
    use crate::encoder::{init_params, EncoderArch};
    use crate::numerics::{finite_diff_grad, gaussian_matrix, relative_l2_error, Purpose, RngStream};

    fn rng(seed: u64) -> RngStream {
        RngStream::for_purpose(seed, Purpose::Test)
    }

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_columns(&[v]).unwrap()
    }

    fn m2(rows: [[f64; 2]; 2]) -> Matrix {
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn empirical_correlation_examples() {
        let z = [col(&[1.0, 0.0]), col(&[0.0, 1.0])];
        assert_eq!(empirical_correlation(&z).unwrap().matrix(), &Matrix::identity(2).scale(0.5));
        assert_eq!(
            empirical_positive_correlation(&z).unwrap().matrix(),
            &m2([[0.0, 0.5], [0.5, 0.0]])
        );
        assert_eq!(empirical_positive_correlation(&z).unwrap().trace(), 0.0);

        let zero = [Matrix::zeros(2, 3), Matrix::zeros(2, 3)];
        assert_eq!(empirical_correlation(&zero).unwrap(), CorrMatrix::zeros(2));

        let v = [0.6, -0.8, 0.1];
        let same = vec![col(&v); 4];
        let expected = Matrix::outer(&v);
        let r = empirical_correlation(&same).unwrap();
        assert!(r.matrix().sub(&expected).unwrap().max_abs() < 1e-15);
        let rp = empirical_positive_correlation(&same).unwrap();
        assert!(rp.matrix().sub(r.matrix()).unwrap().max_abs() < 1e-15);

        assert!(empirical_correlation(&[col(&[1.0, 0.0])]).is_err());
        assert!(empirical_correlation(&[col(&[1.0, 0.0]), col(&[1.0])]).is_err());
    }

    #[test]
    fn local_loss_examples() {
        let z = [col(&[1.0, 0.0]), col(&[0.0, 1.0])];
        // α = 0, R̂⁺ has zero trace, R̂ = I/2, R̄ = I → Tr{I/2} = 1
        let l = local_batch_loss_from_reprs(&z, &CorrMatrix::symmetric(Matrix::identity(2)).unwrap(), 0.0).unwrap();
        assert!((l - 1.0).abs() < 1e-15);

        let zp = [col(&[1.0, 0.0]), col(&[0.6, 0.8])];
        let rp = empirical_positive_correlation(&zp).unwrap();
        let r = empirical_correlation(&zp).unwrap();
        let bar = CorrMatrix::symmetric(m2([[3.0, 1.0], [1.0, -2.0]])).unwrap();
        let l1 = local_batch_loss_from_reprs(&zp, &bar, 1.0).unwrap();
        assert!((l1 - (-rp.trace() + 0.5 * r.frobenius_norm().powi(2))).abs() < 1e-15);
        let l0 = local_batch_loss_from_reprs(&zp, &CorrMatrix::zeros(2), 0.0).unwrap();
        assert!((l0 + rp.trace()).abs() < 1e-15);

        assert!(local_batch_loss_from_reprs(&zp, &bar, 1.5).is_err());
        assert!(local_batch_loss_from_reprs(&zp, &bar, -0.1).is_err());
    }

    fn client_from_views(id: usize, views: Vec<Vec<Vec<f64>>>, weight: f64) -> ClientDataset {
        let anchors = views
            .into_iter()
            .enumerate()
            .map(|(i, vs)| Anchor {
                label: 0,
                sample: AnchorSample {
                    id: i,
                    point: vs[0].clone(),
                    views: vs,
                },
            })
            .collect();
        ClientDataset::new(id, anchors, weight, AugmentationKernel::finite(0.0))
    }

    /// Encoder `z = tanh(W x)` with a single linear layer and no bias, so
    /// that inputs can be chosen to hit target representations.
    fn linear_identity(h: usize) -> Params {
        let arch = EncoderArch::new(vec![h, h]).unwrap();
        let mut v = vec![0.0; arch.param_count()];
        for i in 0..h {
            v[i * h + i] = 1.0;
        }
        Params::new(arch, v).unwrap()
    }

    fn atanh_vec(z: &[f64]) -> Vec<f64> {
        z.iter().map(|x| x.atanh()).collect()
    }

    #[test]
    fn exact_correlations_examples() {
        let theta = linear_identity(2);
        let z = [0.6, 0.8];
        let one = client_from_views(0, vec![vec![atanh_vec(&z)]], 1.0);
        let c = exact_client_correlations(&theta, &one).unwrap();
        let zz = Matrix::outer(&z);
        assert!(c.full.matrix().sub(&zz).unwrap().max_abs() < 1e-12);
        assert!(c.positive.matrix().sub(&zz).unwrap().max_abs() < 1e-12);

        let a = [0.5, 0.0];
        let b = [0.0, 0.5];
        let two_views = client_from_views(0, vec![vec![atanh_vec(&a), atanh_vec(&b)]], 1.0);
        let c = exact_client_correlations(&theta, &two_views).unwrap();
        let expected_full = Matrix::outer(&a).add(&Matrix::outer(&b)).unwrap().scale(0.5);
        let expected_pos = Matrix::outer(&[0.25, 0.25]);
        assert!(c.full.matrix().sub(&expected_full).unwrap().max_abs() < 1e-12);
        assert!(c.positive.matrix().sub(&expected_pos).unwrap().max_abs() < 1e-12);

        let dup = client_from_views(
            0,
            vec![vec![atanh_vec(&a), atanh_vec(&b)], vec![atanh_vec(&a), atanh_vec(&b)]],
            1.0,
        );
        let d = exact_client_correlations(&theta, &dup).unwrap();
        assert!(d.full.matrix().sub(c.full.matrix()).unwrap().max_abs() < 1e-15);
        assert!(d.positive.matrix().sub(c.positive.matrix()).unwrap().max_abs() < 1e-15);

        let stochastic = ClientDataset::new(0, one.labeled_anchors(), 1.0, AugmentationKernel::stochastic(0.1));
        assert!(matches!(exact_client_correlations(&theta, &stochastic), Err(Error::KernelMode(_))));
    }

    #[test]
    fn global_loss_examples() {
        let theta = linear_identity(2);
        let unit = client_from_views(0, vec![vec![atanh_vec(&[0.6, 0.8])]], 1.0);
        let l = global_sc_loss(&theta, std::slice::from_ref(&unit)).unwrap();
        assert!((l + 0.5).abs() < 1e-12, "{l}");

        let zero = Params::zeros(theta.arch().clone());
        assert_eq!(global_sc_loss(&zero, &[unit]).unwrap(), 0.0);
        assert!(global_sc_loss(&theta, &[]).is_err());
    }

    #[test]
    fn scalar_case_minimised_at_one() {
        // H = 1, single deterministic view: L(r) = −r + r²/2 with r = z²
        let theta = linear_identity(1);
        let loss = |z: f64| {
            let c = client_from_views(0, vec![vec![vec![z.atanh()]]], 1.0);
            global_sc_loss(&theta, &[c]).unwrap()
        };
        for r in [0.25f64, 0.5, 0.81] {
            let expected = -r + r * r / 2.0;
            assert!((loss(r.sqrt()) - expected).abs() < 1e-12);
        }
        assert!(loss(0.9) < loss(0.5));
    }

    #[test]
    fn single_client_breakdown() {
        let theta = linear_identity(2);
        let c = client_from_views(0, vec![vec![atanh_vec(&[0.3, 0.4]), atanh_vec(&[-0.2, 0.5])]], 1.0);
        let corr = exact_client_correlations(&theta, &c).unwrap();
        let b = decomposed_global_loss(&theta, std::slice::from_ref(&c)).unwrap();
        assert_eq!(b.terms.len(), 1);
        assert!((b.terms[0].contraction + corr.positive.trace()).abs() < 1e-15);
        assert!((b.terms[0].intra_contrast - 0.5 * corr.full.frobenius_norm().powi(2)).abs() < 1e-15);
        assert_eq!(b.terms[0].inter_contrast, 0.0);
        assert!((b.total - local_sc_loss(&theta, &c).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn identical_clients_decompose_exactly() {
        let theta = linear_identity(2);
        let views = vec![vec![atanh_vec(&[0.3, -0.1]), atanh_vec(&[0.2, 0.7])]];
        let clients = [client_from_views(0, views.clone(), 0.5), client_from_views(1, views, 0.5)];
        let b = decomposed_global_loss(&theta, &clients).unwrap();
        let g = global_sc_loss(&theta, &clients).unwrap();
        assert!((b.total - g).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_clients_show_the_gap() {
        // R₁ = e₁e₁ᵀ, R₂ = e₂e₂ᵀ with unit deterministic views, so contraction terms cancel
        let s = 0.999_999_f64;
        let theta = linear_identity(2);
        let c1 = client_from_views(0, vec![vec![atanh_vec(&[s, 0.0])]], 0.5);
        let c2 = client_from_views(1, vec![vec![atanh_vec(&[0.0, s])]], 0.5);
        let global = global_sc_loss(&theta, &[c1.clone(), c2.clone()]).unwrap();
        let local_avg = 0.5 * local_sc_loss(&theta, &c1).unwrap() + 0.5 * local_sc_loss(&theta, &c2).unwrap();
        assert!(((global - local_avg).abs() - 0.25).abs() < 1e-5);
    }

    #[test]
    fn local_gradient_matches_finite_differences() {
        let arch = EncoderArch::new(vec![3, 6, 2]).unwrap();
        for seed in 0..5 {
            let theta = init_params(&arch, 1.0, &mut rng(seed)).unwrap();
            let views: Vec<Matrix> = (0..4).map(|v| gaussian_matrix(5, 3, 1.0, &mut rng(100 * seed + v)).unwrap()).collect();
            let bar = CorrMatrix::symmetric(gaussian_matrix(2, 2, 0.5, &mut rng(seed + 7)).unwrap()).unwrap();
            let alpha = 0.3;
            let (loss, g) = local_batch_loss_and_grad(&theta, &views, &bar, alpha).unwrap();
            let direct = local_batch_loss(&theta, &views, &bar, alpha).unwrap();
            assert!((loss - direct).abs() < 1e-12);
            let f = |v: &[f64]| local_batch_loss(&theta.with_values(v.to_vec()).unwrap(), &views, &bar, alpha).unwrap();
            let fd = finite_diff_grad(f, theta.values(), 1e-4).unwrap();
            assert!(relative_l2_error(&g, &fd, 1e-12) < 1e-6);
        }
    }

    #[test]
    fn zero_params_zero_gradient() {
        let arch = EncoderArch::new(vec![3, 4, 2]).unwrap();
        let theta = Params::zeros(arch);
        let views: Vec<Matrix> = (0..2).map(|v| gaussian_matrix(3, 3, 1.0, &mut rng(v)).unwrap()).collect();
        let g = local_batch_grad(&theta, &views, &CorrMatrix::zeros(2), 0.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn alpha_one_ignores_r_bar() {
        let arch = EncoderArch::new(vec![3, 4, 2]).unwrap();
        let theta = init_params(&arch, 1.0, &mut rng(1)).unwrap();
        let views: Vec<Matrix> = (0..4).map(|v| gaussian_matrix(3, 3, 1.0, &mut rng(v + 9)).unwrap()).collect();
        let a = local_batch_grad(&theta, &views, &CorrMatrix::zeros(2), 1.0).unwrap();
        let big = CorrMatrix::symmetric(Matrix::identity(2).scale(100.0)).unwrap();
        let b = local_batch_grad(&theta, &views, &big, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn enumerated_views_reproduce_exact_correlations() {
        let theta = init_params(&EncoderArch::new(vec![2, 3]).unwrap(), 1.0, &mut rng(3)).unwrap();
        let views = vec![
            vec![vec![0.1, 0.2], vec![-0.4, 0.3], vec![0.9, -0.1]],
            vec![vec![1.0, 1.0], vec![0.0, -1.0], vec![0.5, 0.5]],
        ];
        let client = client_from_views(0, views, 1.0);
        let exact = exact_client_correlations(&theta, &client).unwrap();
        let x = enumerated_pair_views(&client).unwrap();
        let z: Vec<Matrix> = x.iter().map(|m| forward_batch(&theta, m).unwrap()).collect();
        let r = empirical_correlation(&z).unwrap();
        let rp = empirical_positive_correlation(&z).unwrap();
        assert!(r.matrix().sub(exact.full.matrix()).unwrap().max_abs() < 1e-14);
        assert!(rp.matrix().sub(exact.positive.matrix()).unwrap().max_abs() < 1e-14);
    }
}
