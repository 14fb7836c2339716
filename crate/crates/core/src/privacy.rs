// SPDX-License-Identifier: Apache-2.0

//! Clipped, Gaussian-noised release of a client's correlation matrix and the
//! Rényi-DP accountant for repeated releases.
//!
//! Each representation is clipped to `‖ž‖² ≤ μ`, so one anchor moves the
//! averaged matrix by at most `μ/|Dⱼ|` in Frobenius norm. A release with
//! per-entry noise `σ` is then `(α, α μ² / (2σ²|Dⱼ|²))`-RDP, releases compose
//! additively, and the best RDP→DP conversion over `α` has a closed form.

use serde::{Deserialize, Serialize};

use crate::data::{views_of, AnchorSample, ClientDataset, ViewDraw};
use crate::encoder::{forward_batch, Params};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, sym_part, Matrix, RngStream};
use crate::objective::CorrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Clip bound on `‖z‖²`; representations are clipped to norm `√μ`.
    pub mu: f64,
    /// Per-entry noise standard deviation. Zero disables noise.
    pub sigma: f64,
    /// Views per anchor when computing the shared matrix.
    pub share_views: ViewDraw,
    /// Add `(N + Nᵀ)/2` instead of `N`. Halves off-diagonal noise variance.
    pub symmetric_noise: bool,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            mu: 5.0,
            sigma: 0.0,
            share_views: ViewDraw::Sample(5),
            symmetric_noise: false,
        }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.share_views == ViewDraw::Sample(0) {
            return Err(Error::invalid("share views must be >= 1"));
        }
        Ok(())
    }

    /// True when `μ ≤ A0²`: clipping can bind, and the convergence analysis'
    /// precondition `μ > A0²` does not hold.
    pub fn clipping_can_bind(&self, output_bound: f64) -> bool {
        self.mu <= output_bound * output_bound
    }
}

/// `z · min(1, bound/‖z‖)`
pub fn norm_clip(z: &[f64], bound: f64) -> Result<Vec<f64>> {
    if !(bound > 0.0) {
        return Err(Error::invalid(format!("clip bound must be positive, got {bound}")));
    }
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= bound {
        return Ok(z.to_vec());
    }
    let s = bound / norm;
    Ok(z.iter().map(|x| x * s).collect())
}

/// Unnormalised clipped second moment `Σ_x̄ (1/V) Σ_v ž_v ž_vᵀ`.
///
/// Views for anchor `x̄` come from `rng.fork(x̄.id)`, so an anchor's draws do
/// not depend on which other anchors are present.
pub fn clipped_outer_sum(
    theta: &Params,
    samples: &[AnchorSample],
    kernel: crate::data::AugmentationKernel,
    params: &PrivacyParams,
    rng: &RngStream,
) -> Result<Matrix> {
    let h = theta.arch().output_dim();
    let bound = params.mu.sqrt();
    let mut acc = Matrix::zeros(h, h);
    for s in samples {
        let views = views_of(s, params.share_views, kernel, &mut rng.fork(s.id as u64))?;
        let x = Matrix::from_rows(&views)?;
        let z = forward_batch(theta, &x)?;
        let inv_v = 1.0 / views.len() as f64;
        for c in 0..z.cols() {
            let clipped = norm_clip(&z.column(c), bound)?;
            acc.axpy(inv_v, &Matrix::outer(&clipped))?;
        }
    }
    Ok(acc)
}

/// One DP release and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Release {
    /// Clipped correlation before noise: symmetric PSD with trace ≤ μ.
    pub pre_noise: CorrMatrix,
    pub noise: Matrix,
    pub released: CorrMatrix,
}

/// Noise stream index, distinct from any anchor id.
const NOISE_LANE: u64 = u64::MAX;

/// Clips, averages and noises client `j`'s correlation matrix, and records
/// the release in the ledger.
pub fn dp_cal_r(
    theta: &Params,
    client: &ClientDataset,
    params: &PrivacyParams,
    rng: &RngStream,
    ledger: &mut PrivacyLedger,
) -> Result<Release> {
    params.validate()?;
    if client.is_empty() {
        return Err(Error::invalid(format!("client {} has no data to share", client.id)));
    }
    let n = client.len();
    let mut sum = clipped_outer_sum(theta, client.samples(), client.kernel(), params, rng)?;
    sum.scale_in_place(1.0 / n as f64);
    let pre_noise = CorrMatrix::symmetric(sum)?;
    let h = pre_noise.dim();
    let mut noise = gaussian_matrix(h, h, params.sigma, &mut rng.fork(NOISE_LANE))?;
    if params.symmetric_noise {
        noise = sym_part(&noise)?;
    }
    let released = CorrMatrix::from_release(pre_noise.matrix().add(&noise)?)?;
    ledger.record_share(client.id, n, params.mu, params.sigma)?;
    Ok(Release {
        pre_noise,
        noise,
        released,
    })
}

/// Frobenius sensitivity `μ/n` of the clipped average under removal of one anchor.
pub fn sensitivity_bound(mu: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    Ok(mu / n as f64)
}

fn check_mechanism(mu: f64, sigma: f64, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("mu must be positive, got {mu}")));
    }
    if sigma == 0.0 {
        return Err(Error::UnboundedPrivacyLoss);
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// RDP of order `alpha` after `shares` releases: `T α μ² / (2 σ² n²)`.
pub fn rdp_epsilon(alpha: f64, shares: u64, mu: f64, sigma: f64, n: usize) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::invalid(format!("RDP order must be > 1, got {alpha}")));
    }
    check_mechanism(mu, sigma, n)?;
    let n = n as f64;
    Ok(shares as f64 * alpha * mu * mu / (2.0 * sigma * sigma * n * n))
}

/// An `(ε, δ)` guarantee and the RDP order that attains it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
}

/// `ε = Tμ²/(2σ²n²) + √(2Tμ² log(1/δ) / (σ²n²))`, the minimum over `α > 1`
/// of `rdp_epsilon(α) + log(1/δ)/(α − 1)`, attained at
/// `α* = 1 + √(2σ²n² log(1/δ) / (Tμ²))`.
pub fn dp_from_rdp(shares: u64, mu: f64, sigma: f64, n: usize, delta: f64) -> Result<DpGuarantee> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    if shares == 0 {
        return Err(Error::invalid("at least one release is needed for an RDP conversion"));
    }
    check_mechanism(mu, sigma, n)?;
    let log_inv_delta = (1.0 / delta).ln();
    let t = shares as f64;
    let n = n as f64;
    let scale = t * mu * mu / (sigma * sigma * n * n);
    Ok(DpGuarantee {
        epsilon: 0.5 * scale + (2.0 * scale * log_inv_delta).sqrt(),
        delta,
        alpha: 1.0 + (2.0 * log_inv_delta / scale).sqrt(),
    })
}

/// Privacy loss of one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Epsilon {
    Finite(f64),
    /// Releases were made without noise.
    Unbounded,
}

impl Epsilon {
    /// `f64::INFINITY` for [`Epsilon::Unbounded`].
    pub fn value(&self) -> f64 {
        match *self {
            Epsilon::Finite(e) => e,
            Epsilon::Unbounded => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub shares: u64,
    pub size: usize,
    /// Mechanism parameters, fixed by the first release.
    pub mechanism: Option<(f64, f64)>,
}

/// Per-client count of releases and the mechanism they used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new(clients: &[ClientDataset]) -> Self {
        Self {
            entries: clients
                .iter()
                .map(|c| LedgerEntry {
                    shares: 0,
                    size: c.len(),
                    mechanism: None,
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn shares(&self, client: usize) -> u64 {
        self.entries.get(client).map_or(0, |e| e.shares)
    }

    pub fn record_share(&mut self, client: usize, size: usize, mu: f64, sigma: f64) -> Result<()> {
        if client >= self.entries.len() {
            self.entries.resize(
                client + 1,
                LedgerEntry {
                    shares: 0,
                    size: 0,
                    mechanism: None,
                },
            );
        }
        let e = &mut self.entries[client];
        match e.mechanism {
            None => e.mechanism = Some((mu, sigma)),
            Some((m, s)) if m.to_bits() == mu.to_bits() && s.to_bits() == sigma.to_bits() => {}
            Some((m, s)) => {
                return Err(Error::Ledger(format!(
                    "client {client} released with (mu, sigma) = ({m}, {s}); cannot switch to ({mu}, {sigma})"
                )))
            }
        }
        if e.shares > 0 && e.size != size {
            return Err(Error::Ledger(format!(
                "client {client} dataset size changed from {} to {size}",
                e.size
            )));
        }
        e.size = size;
        e.shares += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientPrivacy {
    pub client: usize,
    pub shares: u64,
    pub epsilon: Epsilon,
    pub delta: f64,
}

/// `(ε, δ)` per client from its release count.
pub fn privacy_spent(ledger: &PrivacyLedger, delta: f64) -> Result<Vec<ClientPrivacy>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    ledger
        .entries
        .iter()
        .enumerate()
        .map(|(client, e)| {
            let epsilon = match e.mechanism {
                _ if e.shares == 0 => Epsilon::Finite(0.0),
                None => Epsilon::Finite(0.0),
                Some((mu, sigma)) => match dp_from_rdp(e.shares, mu, sigma, e.size, delta) {
                    Ok(g) => Epsilon::Finite(g.epsilon),
                    Err(Error::UnboundedPrivacyLoss) => Epsilon::Unbounded,
                    Err(err) => return Err(err),
                },
            };
            Ok(ClientPrivacy {
                client,
                shares: e.shares,
                epsilon,
                delta,
            })
        })
        .collect()
}

/// Largest ε across clients.
pub fn max_epsilon(spent: &[ClientPrivacy]) -> Epsilon {
    spent.iter().fold(Epsilon::Finite(0.0), |acc, c| match (acc, c.epsilon) {
        (Epsilon::Unbounded, _) | (_, Epsilon::Unbounded) => Epsilon::Unbounded,
        (Epsilon::Finite(a), Epsilon::Finite(b)) => Epsilon::Finite(a.max(b)),
    })
}

/// A named DP configuration: clip bound, noise, sharing schedule and the
/// `(ε, δ)` target it is labelled with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpPreset {
    pub name: &'static str,
    pub mu: f64,
    pub sigma: f64,
    /// Sharing happens in rounds `t ≥ share_start_round` with `(t − start) % share_period == 0`.
    pub share_start_round: usize,
    pub share_period: usize,
    pub dataset_size: usize,
    pub target_epsilon: f64,
    pub delta: f64,
}

const fn preset(
    name: &'static str,
    mu: f64,
    sigma: f64,
    share_start_round: usize,
    share_period: usize,
    dataset_size: usize,
    target_epsilon: f64,
    delta: f64,
) -> DpPreset {
    DpPreset {
        name,
        mu,
        sigma,
        share_start_round,
        share_period,
        dataset_size,
        target_epsilon,
        delta,
    }
}

/// Full-participation settings for the image benchmarks. `t > 100` maps to a
/// start round of 101; `t > 100, t % 2 = 0` to start 102 with period 2.
pub const DP_PRESETS: [DpPreset; 12] = [
    preset("svhn-eps3-delta1e-2", 2.0, 0.0034, 101, 1, 10_000, 3.0, 1e-2),
    preset("svhn-eps6-delta1e-2", 2.0, 0.0018, 101, 1, 10_000, 6.0, 1e-2),
    preset("svhn-eps3-delta1e-4", 2.0, 0.0048, 101, 1, 10_000, 3.0, 1e-4),
    preset("svhn-eps8-delta1e-4", 2.0, 0.0018, 101, 1, 10_000, 8.0, 1e-4),
    preset("cifar10-eps3-delta1e-2", 4.0, 0.01, 151, 1, 5_000, 3.0, 1e-2),
    preset("cifar10-eps6-delta1e-2", 4.0, 0.0052, 102, 2, 5_000, 6.0, 1e-2),
    preset("cifar10-eps3-delta1e-4", 4.0, 0.012, 151, 1, 5_000, 3.0, 1e-4),
    preset("cifar10-eps8-delta1e-4", 4.0, 0.0051, 102, 2, 5_000, 8.0, 1e-4),
    preset("cifar100-eps6-delta1e-2", 5.0, 0.013, 102, 2, 2_500, 6.0, 1e-2),
    preset("cifar100-eps12-delta1e-2", 5.0, 0.0075, 102, 2, 2_500, 12.0, 1e-2),
    preset("cifar100-eps3-delta1e-4", 5.0, 0.04, 102, 2, 2_500, 3.0, 1e-4),
    preset("cifar100-eps8-delta1e-4", 5.0, 0.013, 102, 2, 2_500, 8.0, 1e-4),
];

pub fn dp_preset(name: &str) -> Result<&'static DpPreset> {
    DP_PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = DP_PRESETS.iter().map(|p| p.name).collect();
        Error::invalid(format!("unknown DP preset {name:?}; known presets: {}", names.join(", ")))
    })
}

/// Number of sharing rounds in `1..=rounds` under a start/period schedule.
pub fn share_count(rounds: usize, share_start_round: usize, share_period: usize) -> u64 {
    if share_period == 0 || rounds < share_start_round {
        return 0;
    }
    ((rounds - share_start_round) / share_period + 1) as u64
}
