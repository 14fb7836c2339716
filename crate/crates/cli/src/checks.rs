// SPDX-License-Identifier: Apache-2.0

//! Identity and oracle suites runnable from the command line.
//!
//! Each suite compares a library result with an independent computation and
//! reports the worst error against its tolerance.

use std::fmt;

use fedsc_core::data::{Anchor, AnchorSample, AugmentationKernel, ClientDataset};
use fedsc_core::encoder::{backward_batch, forward_batch, forward_one, init_params, EncoderArch, Params};
use fedsc_core::numerics::{finite_diff_grad, relative_l2_error, Matrix, Purpose, RngStream, FD_STEP};
use fedsc_core::objective::{
    decomposed_global_loss, enumerated_pair_views, global_sc_loss, local_batch_grad, local_batch_loss, CorrMatrix,
};
use fedsc_core::privacy::{clipped_outer_sum, dp_from_rdp, rdp_epsilon, sensitivity_bound, PrivacyParams};

/// Deliberate faults for checking that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negate `R̄₋ⱼ` inside the local gradient, flipping the inter-client term.
    InterClientSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub measure: &'static str,
    pub observed: f64,
    pub tolerance: f64,
    /// True when `observed` must be at least `tolerance` rather than at most.
    pub lower_bound: bool,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        if !self.observed.is_finite() {
            return false;
        }
        if self.lower_bound {
            self.observed >= self.tolerance
        } else {
            self.observed <= self.tolerance
        }
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<26} {}: {:.3e} (tolerance {} {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measure,
            self.observed,
            if self.lower_bound { ">=" } else { "<=" },
            self.tolerance
        )
    }
}

fn rng(seed: u64) -> RngStream {
    RngStream::for_purpose(seed, Purpose::Test)
}

fn random_clients(r: &mut RngStream, j: usize, d: usize) -> Vec<ClientDataset> {
    let k = 2 + r.index(2);
    let raw: Vec<f64> = (0..j).map(|_| 0.2 + r.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let mut id = 0;
    (0..j)
        .map(|c| {
            let n = 2 + r.index(4);
            let anchors = (0..n)
                .map(|_| {
                    let point: Vec<f64> = (0..d).map(|_| r.normal()).collect();
                    let views = (0..k).map(|_| point.iter().map(|p| p + 0.3 * r.normal()).collect()).collect();
                    id += 1;
                    Anchor {
                        label: c,
                        sample: AnchorSample { id: id - 1, point, views },
                    }
                })
                .collect();
            ClientDataset::new(c, anchors, raw[c] / total, AugmentationKernel::finite(0.3))
        })
        .collect()
}

/// Per-client `(Σ_a m mᵀ / n, Σ z zᵀ / nK)` from single-sample forward passes.
fn direct_corrs(theta: &Params, client: &ClientDataset) -> (Matrix, Matrix) {
    let h = theta.arch().output_dim();
    let n = client.len() as f64;
    let mut pos = Matrix::zeros(h, h);
    let mut full = Matrix::zeros(h, h);
    for s in client.samples() {
        let k = s.views.len() as f64;
        let z: Vec<Vec<f64>> = s.views.iter().map(|v| forward_one(theta, v).unwrap()).collect();
        let m: Vec<f64> = (0..h).map(|i| z.iter().map(|v| v[i]).sum::<f64>() / k).collect();
        pos.axpy(1.0 / n, &Matrix::outer(&m)).unwrap();
        for v in &z {
            full.axpy(1.0 / (n * k), &Matrix::outer(v)).unwrap();
        }
    }
    (pos, full)
}

fn direct_global(theta: &Params, clients: &[ClientDataset]) -> (f64, Matrix) {
    let h = theta.arch().output_dim();
    let mut r = Matrix::zeros(h, h);
    let mut contraction = 0.0;
    for c in clients {
        let (pos, full) = direct_corrs(theta, c);
        contraction += c.weight() * pos.trace();
        r.axpy(c.weight(), &full).unwrap();
    }
    (-contraction + 0.5 * r.frobenius_norm().powi(2), r)
}

/// `∇L` by backpropagating `∂L/∂z = qⱼ/(nⱼK) · (2 R z − 2 m)`.
fn direct_global_grad(theta: &Params, clients: &[ClientDataset]) -> Vec<f64> {
    let (_, r) = direct_global(theta, clients);
    let mut grad = vec![0.0; theta.len()];
    for c in clients {
        let k = c.views_per_anchor();
        let w = c.weight() / (c.len() * k) as f64;
        let rows: Vec<&[f64]> = c.samples().iter().flat_map(|s| s.views.iter().map(Vec::as_slice)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let z = forward_batch(theta, &x).unwrap();
        let mut dz = r.matmul(&z).unwrap();
        for a in 0..c.len() {
            for row in 0..z.rows() {
                let m = (0..k).map(|v| z[(row, a * k + v)]).sum::<f64>() / k as f64;
                for v in 0..k {
                    let col = a * k + v;
                    let cur = dz[(row, col)];
                    dz.as_mut_slice()[row * z.cols() + col] = w * (2.0 * cur - 2.0 * m);
                }
            }
        }
        let g = backward_batch(theta, &x, &dz).unwrap();
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn decomposition_suite() -> SuiteResult {
    let mut worst: f64 = 0.0;
    for i in 0..40u64 {
        let mut r = rng(10_000 + i);
        let (j, h, d) = (2 + r.index(4), 2 + r.index(3), 3 + r.index(4));
        let clients = random_clients(&mut r, j, d);
        let theta = init_params(&EncoderArch::new(vec![d, 5, h]).unwrap(), 1.5, &mut r).unwrap();
        let global = global_sc_loss(&theta, &clients).unwrap();
        let split = decomposed_global_loss(&theta, &clients).unwrap();
        let (direct, _) = direct_global(&theta, &clients);
        let scale = 1.0 + direct.abs();
        worst = worst
            .max((split.total - direct).abs() / scale)
            .max((global - direct).abs() / scale);
    }
    SuiteResult {
        name: "decomposition_identity",
        measure: "max |split − direct| / (1 + |L|)",
        observed: worst,
        tolerance: 1e-9,
        lower_bound: false,
    }
}

pub fn alignment_suite(fault: Fault) -> SuiteResult {
    let mut worst: f64 = 0.0;
    for i in 0..12u64 {
        let mut r = rng(20_000 + i);
        let (j, h, d) = (2 + r.index(3), 2 + r.index(3), 3 + r.index(3));
        let clients = random_clients(&mut r, j, d);
        let theta = init_params(&EncoderArch::new(vec![d, 5, h]).unwrap(), 1.5, &mut r).unwrap();
        let fulls: Vec<Matrix> = clients.iter().map(|c| direct_corrs(&theta, c).1).collect();
        let mut assembled = vec![0.0; theta.len()];
        for c in &clients {
            let q = c.weight();
            let mut rest = Matrix::zeros(h, h);
            for (o, f) in clients.iter().zip(&fulls).filter(|(o, _)| o.id != c.id) {
                rest.axpy(o.weight() / (1.0 - q), f).unwrap();
            }
            if fault == Fault::InterClientSign {
                rest.scale_in_place(-1.0);
            }
            let r_bar = CorrMatrix::from_release(rest).unwrap();
            let g = local_batch_grad(&theta, &enumerated_pair_views(c).unwrap(), &r_bar, q).unwrap();
            assembled.iter_mut().zip(g).for_each(|(a, b)| *a += q * b);
        }
        let direct = direct_global_grad(&theta, &clients);
        let diff: Vec<f64> = assembled.iter().zip(&direct).map(|(a, b)| a - b).collect();
        worst = worst.max(l2(&diff) / (1.0 + l2(&direct)));
    }
    SuiteResult {
        name: "gradient_alignment",
        measure: "max ‖Σq∇L̂ − ∇L‖ / (1 + ‖∇L‖)",
        observed: worst,
        tolerance: 1e-8,
        lower_bound: false,
    }
}

pub fn finite_difference_suite() -> SuiteResult {
    let mut worst: f64 = 0.0;
    for i in 0..12u64 {
        let mut r = rng(30_000 + i);
        let (d, h, hidden) = (2 + r.index(4), 2 + r.index(3), 3 + r.index(5));
        let theta = init_params(&EncoderArch::new(vec![d, hidden, h]).unwrap(), 1.5, &mut r).unwrap();
        let (b, v) = (2 + r.index(4), 1 + r.index(2));
        let views: Vec<Matrix> = (0..2 * v)
            .map(|_| Matrix::from_vec(b, d, (0..b * d).map(|_| r.normal()).collect()).unwrap())
            .collect();
        let r_bar = CorrMatrix::from_release(Matrix::from_vec(h, h, (0..h * h).map(|_| 0.3 * r.normal()).collect()).unwrap()).unwrap();
        let alpha = r.uniform();
        let analytic = local_batch_grad(&theta, &views, &r_bar, alpha).unwrap();
        let loss = |p: &[f64]| local_batch_loss(&theta.with_values(p.to_vec()).unwrap(), &views, &r_bar, alpha).unwrap();
        worst = worst.max(relative_l2_error(&analytic, &finite_diff_grad(loss, theta.values(), FD_STEP).unwrap(), 1e-12));

        // encoder reverse pass against a linear functional of the output
        let w = Matrix::from_vec(h, b, (0..h * b).map(|_| r.normal()).collect()).unwrap();
        let back = backward_batch(&theta, &views[0], &w).unwrap();
        let f = |p: &[f64]| {
            let z = forward_batch(&theta.with_values(p.to_vec()).unwrap(), &views[0]).unwrap();
            z.frobenius_dot(&w).unwrap()
        };
        worst = worst.max(relative_l2_error(&back, &finite_diff_grad(f, theta.values(), FD_STEP).unwrap(), 1e-12));
    }
    SuiteResult {
        name: "finite_differences",
        measure: "max relative l2 error",
        observed: worst,
        tolerance: 1e-4,
        lower_bound: false,
    }
}

/// Remove-one sensitivity of the clipped average, normalised by `μ/n`.
/// Returns (worst excess over the bound, best attained fraction of it).
fn sensitivity_probe() -> (f64, f64) {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut best_ratio: f64 = 0.0;
    for i in 0..20u64 {
        let mut r = rng(40_000 + i);
        let saturated = i % 5 == 0;
        let (d, h) = (3, 4);
        let n = 3 + r.index(6);
        let (theta, mu) = if saturated {
            let arch = EncoderArch::new(vec![d, h]).unwrap();
            let mut values = vec![50.0; d * h];
            values.extend(vec![0.0; h]);
            (Params::new(arch, values).unwrap(), 2.0)
        } else {
            (init_params(&EncoderArch::new(vec![d, 6, h]).unwrap(), 3.0, &mut r).unwrap(), 0.5 + 4.0 * r.uniform())
        };
        let samples: Vec<AnchorSample> = (0..n)
            .map(|id| {
                let point: Vec<f64> = (0..d).map(|_| if saturated { 1.0 + r.uniform() } else { r.normal() }).collect();
                let views = (0..3).map(|_| point.iter().map(|p| p + 0.1 * r.uniform()).collect()).collect();
                AnchorSample { id, point, views }
            })
            .collect();
        let params = PrivacyParams {
            mu,
            ..PrivacyParams::default()
        };
        let kernel = AugmentationKernel::finite(0.1);
        let stream = rng(40_500 + i);
        let full = clipped_outer_sum(&theta, &samples, kernel, &params, &stream).unwrap();
        let bound = sensitivity_bound(mu, n).unwrap();
        for drop in 0..n {
            let rest: Vec<AnchorSample> = samples.iter().filter(|s| s.id != drop).cloned().collect();
            let reduced = clipped_outer_sum(&theta, &rest, kernel, &params, &stream).unwrap();
            let diff = full.sub(&reduced).unwrap().frobenius_norm() / n as f64;
            worst_excess = worst_excess.max(diff - bound);
            best_ratio = best_ratio.max(diff / bound);
        }
    }
    (worst_excess, best_ratio)
}

pub fn sensitivity_suites() -> [SuiteResult; 2] {
    let (excess, ratio) = sensitivity_probe();
    [
        SuiteResult {
            name: "sensitivity_bound",
            measure: "max (‖ΔR‖_F − μ/n)",
            observed: excess,
            tolerance: 1e-12,
            lower_bound: false,
        },
        SuiteResult {
            name: "sensitivity_tightness",
            measure: "max ‖ΔR‖_F / (μ/n)",
            observed: ratio,
            tolerance: 0.9,
            lower_bound: true,
        },
    ]
}

pub fn accountant_suite() -> SuiteResult {
    let delta: f64 = 1e-5;
    let log_inv = (1.0 / delta).ln();
    let mut worst: f64 = 0.0;
    for t in [1u64, 10, 100] {
        for sigma in [0.5, 1.0, 4.0] {
            for n in [10usize, 100, 1000] {
                let mu = 2.0;
                let closed = dp_from_rdp(t, mu, sigma, n, delta).unwrap().epsilon;
                let f = |a: f64| rdp_epsilon(a, t, mu, sigma, n).unwrap() + log_inv / (a - 1.0);
                let (mut lo, mut hi) = (-8.0_f64, 10.0_f64);
                let mut best = (f64::INFINITY, 0.0);
                for _ in 0..60 {
                    best = (f64::INFINITY, 0.0);
                    for s in 0..=200 {
                        let e = lo + (hi - lo) * s as f64 / 200.0;
                        let v = f(1.0 + 10f64.powf(e));
                        if v < best.0 {
                            best = (v, e);
                        }
                    }
                    let step = (hi - lo) / 100.0;
                    lo = best.1 - step;
                    hi = best.1 + step;
                }
                worst = worst.max((closed - best.0).abs() / best.0);
            }
        }
    }
    SuiteResult {
        name: "accountant_grid_search",
        measure: "max relative |closed form − grid min|",
        observed: worst,
        tolerance: 1e-6,
        lower_bound: false,
    }
}

pub fn run_checks(fault: Fault) -> Vec<SuiteResult> {
    let mut out = vec![decomposition_suite(), alignment_suite(fault), finite_difference_suite()];
    out.extend(sensitivity_suites());
    out.push(accountant_suite());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for s in run_checks(Fault::None) {
            assert!(s.passed(), "{s}");
        }
    }

    #[test]
    fn sign_fault_breaks_alignment() {
        let s = alignment_suite(Fault::InterClientSign);
        assert!(!s.passed(), "{s}");
    }

    #[test]
    fn non_finite_observations_fail() {
        let s = SuiteResult {
            name: "x",
            measure: "y",
            observed: f64::NAN,
            tolerance: 1.0,
            lower_bound: false,
        };
        assert!(!s.passed());
        assert!(s.to_string().starts_with("FAIL"));
    }
}
