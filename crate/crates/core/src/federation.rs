// SPDX-License-Identifier: Apache-2.0

//! Server/client protocol: FedSC with correlation-matrix sharing, and the
//! FedAvg + SC baseline that trains each client on its own SC loss.
//!
//! A round `t` of FedSC:
//!
//! 1. the server samples participants `𝒥ᵗ` (uniform, without replacement);
//! 2. on sharing rounds, clients release `R̃ⱼ` through the DP mechanism. The
//!    first sharing round collects from every client; later ones only from
//!    participants, and the server keeps `R̃ = Σⱼ qⱼ R̃ⱼ` by replacing one
//!    client's contribution at a time;
//! 3. each participant forms `R̃₋ⱼ = (R̃ − qⱼ R̃ⱼ)/(1 − qⱼ)` and runs local SGD
//!    on its objective with `R̃₋ⱼ` frozen;
//! 4. the server averages the returned weights.
//!
//! All randomness comes from streams addressed by `(round, client, purpose)`,
//! so client updates can run concurrently and resumed runs replay exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{positive_pair, Anchor, AnchorSample, ClientDataset, KernelMode, ViewDraw};
use crate::encoder::Params;
use crate::error::{Error, Result};
use crate::eval::{knn_accuracy, linear_probe_accuracy};
use crate::numerics::{Matrix, Purpose, RngStream, StreamId};
use crate::objective::{
    all_client_correlations, enumerated_pair_views_of, global_loss_from_correlations, local_batch_grad, CorrMatrix,
};
use crate::privacy::{dp_cal_r, max_epsilon, privacy_spent, Epsilon, PrivacyLedger, PrivacyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    FedSc,
    FedAvgSc,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::FedSc => "fedsc",
            Method::FedAvgSc => "fedavg_sc",
        }
    }
}

/// Weight on the intra-client contrast term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaSchedule {
    /// `αⱼ = qⱼ`
    Fixed,
    /// Shared by all clients, decaying linearly from 1 at round 0 to 0.2 at round T.
    Linear,
}

/// `α` at round `t` of `T`, given the client's weight for the fixed schedule.
pub fn alpha_schedule(t: usize, rounds: usize, mode: AlphaSchedule, q_j: f64) -> f64 {
    match mode {
        AlphaSchedule::Fixed => q_j,
        AlphaSchedule::Linear if rounds == 0 => 1.0,
        AlphaSchedule::Linear => 1.0 - 0.8 * (t.min(rounds) as f64) / rounds as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// `θᵗ = (1/|𝒥ᵗ|) Σ θⱼ`
    Uniform,
    /// `qⱼ`-weighted over participants, renormalised.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Positive pairs per anchor in a training batch (`V`), or every ordered pair of stored views.
    pub train_views: ViewDraw,
    pub learning_rate: f64,
    /// Clients per round, `|𝒥|`.
    pub participation: usize,
    pub alpha: AlphaSchedule,
    pub privacy: PrivacyParams,
    /// First round in which correlation matrices are shared.
    pub share_start_round: usize,
    /// Rounds between shares once sharing has started.
    pub share_period: usize,
    pub aggregation: Aggregation,
    /// Run client updates on the rayon pool.
    pub parallel: bool,
    /// `δ` for reported privacy loss.
    pub delta: f64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 150,
            local_epochs: 2,
            batch_size: 32,
            train_views: ViewDraw::Sample(2),
            learning_rate: 0.05,
            participation: 4,
            alpha: AlphaSchedule::Linear,
            privacy: PrivacyParams::default(),
            share_start_round: 1,
            share_period: 1,
            aggregation: Aggregation::Uniform,
            parallel: false,
            delta: 1e-2,
            seed: 0,
        }
    }
}

impl FedConfig {
    /// Checks the config against a set of clients.
    pub fn validate(&self, clients: &[ClientDataset]) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if clients.is_empty() {
            return bad("no clients".into());
        }
        if self.participation == 0 || self.participation > clients.len() {
            return bad(format!(
                "participation must be in 1..={}, got {}",
                clients.len(),
                self.participation
            ));
        }
        let min_size = clients.iter().map(ClientDataset::len).min().unwrap();
        if self.batch_size == 0 || self.batch_size > min_size {
            return bad(format!(
                "batch size must be in 1..={min_size} (smallest client), got {}",
                self.batch_size
            ));
        }
        if self.share_period == 0 {
            return bad("share period must be >= 1".into());
        }
        if self.train_views == ViewDraw::Sample(0) {
            return bad("training views must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must be in (0, 1), got {}", self.delta));
        }
        self.privacy.validate()
    }

    fn is_sharing_round(&self, t: usize) -> bool {
        t >= self.share_start_round && (t - self.share_start_round).is_multiple_of(self.share_period)
    }
}

/// `R̃ − qⱼ R̃ⱼ^old + qⱼ R̃ⱼ^new`
pub fn update_global_corr(r_tilde: &CorrMatrix, q_j: f64, old: &CorrMatrix, new: &CorrMatrix) -> Result<CorrMatrix> {
    let mut m = r_tilde.matrix().clone();
    m.axpy(-q_j, old.matrix())?;
    m.axpy(q_j, new.matrix())?;
    CorrMatrix::from_release(m)
}

/// `(R̃ − qⱼ R̃ⱼ) / (1 − qⱼ)`. Fails with [`Error::SingleClient`] when `qⱼ = 1`.
pub fn corr_minus_j(r_tilde: &CorrMatrix, q_j: f64, r_j: &CorrMatrix) -> Result<CorrMatrix> {
    if q_j >= 1.0 {
        return Err(Error::SingleClient);
    }
    let mut m = r_tilde.matrix().clone();
    m.axpy(-q_j, r_j.matrix())?;
    m.scale_in_place(1.0 / (1.0 - q_j));
    CorrMatrix::from_release(m)
}

/// Mean of the parameter vectors, optionally weighted (weights are renormalised).
pub fn aggregate_weights(thetas: &[Params], weights: Option<&[f64]>) -> Result<Params> {
    let first = thetas.first().ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if let Some(bad) = thetas.iter().find(|p| p.arch() != first.arch()) {
        return Err(Error::shape(format!(
            "architecture mismatch: {:?} vs {:?}",
            first.arch().widths(),
            bad.arch().widths()
        )));
    }
    let coeffs: Vec<f64> = match weights {
        None => vec![1.0 / thetas.len() as f64; thetas.len()],
        Some(w) => {
            if w.len() != thetas.len() {
                return Err(Error::shape("one weight per parameter vector is required"));
            }
            let total: f64 = w.iter().sum();
            w.iter().map(|x| x / total).collect()
        }
    };
    let mut out = vec![0.0; first.len()];
    for (p, c) in thetas.iter().zip(coeffs) {
        for (o, v) in out.iter_mut().zip(p.values()) {
            *o += c * v;
        }
    }
    first.with_values(out)
}

/// Participants of round `t`: all clients, or `count` drawn uniformly
/// without replacement, sorted by id.
pub fn sample_participants(seed: u64, round: usize, clients: usize, count: usize) -> Vec<usize> {
    if count >= clients {
        return (0..clients).collect();
    }
    let mut rng = RngStream::new(seed, StreamId::new(round as u64, StreamId::SERVER, Purpose::ClientSampling));
    let mut picked = sample_indices(&mut rng, clients, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Builds the `2V` view batches for a set of anchors.
fn batch_views(batch: &[&AnchorSample], client: &ClientDataset, draw: ViewDraw, rng: &mut RngStream) -> Result<Vec<Matrix>> {
    match draw {
        ViewDraw::Enumerate => {
            if client.kernel().mode != KernelMode::Finite {
                return Err(Error::KernelMode("enumerated training views need a finite kernel".into()));
            }
            enumerated_pair_views_of(batch)
        }
        ViewDraw::Sample(v) => {
            let d = batch[0].point.len();
            let mut first: Vec<Vec<f64>> = vec![Vec::with_capacity(batch.len() * d); v];
            let mut second: Vec<Vec<f64>> = vec![Vec::with_capacity(batch.len() * d); v];
            for s in batch {
                for i in 0..v {
                    let (a, b) = positive_pair(s, client.kernel(), rng);
                    first[i].extend_from_slice(&a);
                    second[i].extend_from_slice(&b);
                }
            }
            first
                .into_iter()
                .chain(second)
                .map(|data| Matrix::from_vec(batch.len(), d, data))
                .collect()
        }
    }
}

/// Local SGD for one client: `E` epochs of shuffled, full-size batches with
/// `R̄` and `α` frozen. A trailing partial batch is dropped.
pub fn client_local_update(
    theta_in: &Params,
    client: &ClientDataset,
    r_bar: &CorrMatrix,
    alpha: f64,
    cfg: &FedConfig,
    rng: &mut RngStream,
) -> Result<Params> {
    let n = client.len();
    if cfg.batch_size == 0 || cfg.batch_size > n {
        return Err(Error::invalid(format!(
            "batch size {} does not fit client {} with {n} anchors",
            cfg.batch_size, client.id
        )));
    }
    let mut theta = theta_in.clone();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.local_epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<&AnchorSample> = chunk.iter().map(|&i| &client.samples()[i]).collect();
            let views = batch_views(&batch, client, cfg.train_views, rng)?;
            let grad = local_batch_grad(&theta, &views, r_bar, alpha)?;
            for (p, g) in theta.values_mut().iter_mut().zip(grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    Ok(theta)
}

/// Labelled anchors for downstream evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalData {
    pub train: Vec<Anchor>,
    pub test: Vec<Anchor>,
    pub knn_k: usize,
    pub ridge: f64,
    /// Evaluate every this many rounds (and always at the last round).
    pub every: usize,
}

impl EvalData {
    /// Training anchors are the union of the clients' data.
    pub fn from_clients(clients: &[ClientDataset], test: Vec<Anchor>, knn_k: usize, ridge: f64, every: usize) -> Self {
        let mut train: Vec<Anchor> = clients.iter().flat_map(ClientDataset::labeled_anchors).collect();
        train.sort_by_key(|a| a.sample.id);
        Self {
            train,
            test,
            knn_k,
            ridge,
            every,
        }
    }
}

/// Metrics after one round. Round 0 is the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Exact global SC loss (finite kernel only).
    pub global_loss: Option<f64>,
    /// Exact single-client SC loss per client (finite kernel only).
    pub client_losses: Vec<f64>,
    pub knn_accuracy: Option<f64>,
    pub linear_accuracy: Option<f64>,
    /// Largest privacy loss across clients so far.
    pub epsilon: Epsilon,
    /// Shared `α` used this round; `None` under the fixed `αⱼ = qⱼ` schedule.
    pub alpha: Option<f64>,
    /// `‖θᵗ − θᵗ⁻¹‖₂`
    pub weight_drift: f64,
    pub participants: Vec<usize>,
    /// Clients that released a correlation matrix this round.
    pub sharers: Vec<usize>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

impl TrainingTrace {
    pub fn last(&self) -> &RoundRecord {
        self.records.last().expect("trace always holds round 0")
    }

    /// Equality of everything except wall-clock timings, bit for bit.
    pub fn same_trajectory(&self, other: &TrainingTrace) -> bool {
        let strip = |t: &TrainingTrace| {
            let mut t = t.clone();
            t.records.iter_mut().for_each(|r| r.wall_time_secs = 0.0);
            serde_json::to_string(&t).expect("trace serialises")
        };
        strip(self) == strip(other)
    }
}

/// Server-side state between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Last completed round.
    pub round: usize,
    pub theta: Params,
    /// `R̃ = Σⱼ qⱼ R̃ⱼ`, present once sharing has started.
    pub r_tilde: Option<CorrMatrix>,
    /// Latest release of each client.
    pub cached: Vec<Option<CorrMatrix>>,
    pub ledger: PrivacyLedger,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run. Random streams are addressed by
/// round, so the seed and round number fix every future draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub method: Method,
    pub config: FedConfig,
    pub state: ServerState,
    pub trace: TrainingTrace,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                line: 1,
                message: format!(
                    "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                    ckpt.format_version
                ),
            });
        }
        Ok(ckpt)
    }
}

/// A run in progress.
pub struct Simulation<'a> {
    method: Method,
    cfg: &'a FedConfig,
    clients: &'a [ClientDataset],
    eval: Option<&'a EvalData>,
    state: ServerState,
    trace: TrainingTrace,
}

impl<'a> Simulation<'a> {
    pub fn new(
        method: Method,
        cfg: &'a FedConfig,
        clients: &'a [ClientDataset],
        theta0: Params,
        eval: Option<&'a EvalData>,
    ) -> Result<Self> {
        cfg.validate(clients)?;
        if method == Method::FedSc && clients.len() > 1 && cfg.privacy.clipping_can_bind(theta0.arch().output_bound()) {
            log::warn!(
                "mu = {} <= A0^2 = {}: clipping can bind and the convergence precondition mu > A0^2 fails",
                cfg.privacy.mu,
                theta0.arch().output_dim()
            );
        }
        let mut sim = Self {
            method,
            cfg,
            clients,
            eval,
            state: ServerState {
                round: 0,
                theta: theta0,
                r_tilde: None,
                cached: vec![None; clients.len()],
                ledger: PrivacyLedger::new(clients),
            },
            trace: TrainingTrace {
                method,
                seed: cfg.seed,
                records: Vec::new(),
            },
        };
        let start = Instant::now();
        let record = sim.record(0, 0.0, Vec::new(), Vec::new(), start)?;
        sim.trace.records.push(record);
        Ok(sim)
    }

    /// Continues from a checkpoint. The config must match the one it was written with.
    pub fn resume(
        ckpt: Checkpoint,
        cfg: &'a FedConfig,
        clients: &'a [ClientDataset],
        eval: Option<&'a EvalData>,
    ) -> Result<Self> {
        cfg.validate(clients)?;
        if &ckpt.config != cfg {
            return Err(Error::invalid("checkpoint was written with a different federation config"));
        }
        if ckpt.state.cached.len() != clients.len() {
            return Err(Error::invalid("checkpoint client count does not match"));
        }
        Ok(Self {
            method: ckpt.method,
            cfg,
            clients,
            eval,
            state: ckpt.state,
            trace: ckpt.trace,
        })
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn trace(&self) -> &TrainingTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.state.round >= self.cfg.rounds
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            method: self.method,
            config: self.cfg.clone(),
            state: self.state.clone(),
            trace: self.trace.clone(),
        }
    }

    pub fn into_parts(self) -> (TrainingTrace, ServerState) {
        (self.trace, self.state)
    }

    fn stream(&self, round: usize, client: usize, purpose: Purpose) -> RngStream {
        RngStream::new(self.cfg.seed, StreamId::new(round as u64, client as u64, purpose))
    }

    fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(ClientDataset::weight).collect()
    }

    /// Releases for `sharers` and folds them into `R̃`.
    fn share(&mut self, t: usize, sharers: &[usize]) -> Result<()> {
        let weights = self.weights();
        for &j in sharers {
            let rng = self.stream(t, j, Purpose::ShareViews);
            let release = dp_cal_r(&self.state.theta, &self.clients[j], &self.cfg.privacy, &rng, &mut self.state.ledger)?;
            let new = release.released;
            if let (Some(r), Some(old)) = (&self.state.r_tilde, &self.state.cached[j]) {
                self.state.r_tilde = Some(update_global_corr(r, weights[j], old, &new)?);
            }
            self.state.cached[j] = Some(new);
        }
        if self.state.r_tilde.is_none() {
            let h = self.state.theta.arch().output_dim();
            let mut acc = Matrix::zeros(h, h);
            for (j, c) in self.state.cached.iter().enumerate() {
                let c = c.as_ref().ok_or_else(|| Error::invalid("first sharing round must include every client"))?;
                acc.axpy(weights[j], c.matrix())?;
            }
            self.state.r_tilde = Some(CorrMatrix::from_release(acc)?);
        }
        Ok(())
    }

    /// Frozen `(R̄₋ⱼ, α)` for client `j` this round.
    fn local_target(&self, t: usize, j: usize) -> Result<(CorrMatrix, f64)> {
        let h = self.state.theta.arch().output_dim();
        let q = self.clients[j].weight();
        let inactive = (CorrMatrix::zeros(h), 1.0);
        if self.method == Method::FedAvgSc {
            return Ok(inactive);
        }
        match (&self.state.r_tilde, &self.state.cached[j]) {
            (Some(r), Some(rj)) => match corr_minus_j(r, q, rj) {
                Ok(rest) => Ok((rest, alpha_schedule(t, self.cfg.rounds, self.cfg.alpha, q))),
                Err(Error::SingleClient) => Ok(inactive),
                Err(e) => Err(e),
            },
            _ => Ok(inactive),
        }
    }

    /// Runs the next round.
    pub fn step(&mut self) -> Result<()> {
        let start = Instant::now();
        let t = self.state.round + 1;
        let participants = sample_participants(self.cfg.seed, t, self.clients.len(), self.cfg.participation);

        let mut sharers = Vec::new();
        if self.method == Method::FedSc && self.clients.len() > 1 && self.cfg.is_sharing_round(t) {
            sharers = if self.state.r_tilde.is_none() {
                (0..self.clients.len()).collect()
            } else {
                participants.clone()
            };
            self.share(t, &sharers)?;
        }

        let targets = participants
            .iter()
            .map(|&j| self.local_target(t, j))
            .collect::<Result<Vec<_>>>()?;
        let theta = &self.state.theta;
        let update = |(&j, (r_bar, alpha)): (&usize, &(CorrMatrix, f64))| {
            let mut rng = self.stream(t, j, Purpose::LocalTraining);
            client_local_update(theta, &self.clients[j], r_bar, *alpha, self.cfg, &mut rng)
        };
        let local: Vec<Params> = if self.cfg.parallel {
            participants.par_iter().zip(targets.par_iter()).map(update).collect::<Result<_>>()?
        } else {
            participants.iter().zip(targets.iter()).map(update).collect::<Result<_>>()?
        };

        let weights: Option<Vec<f64>> = match self.cfg.aggregation {
            Aggregation::Uniform => None,
            Aggregation::Weighted => Some(participants.iter().map(|&j| self.clients[j].weight()).collect()),
        };
        let next = aggregate_weights(&local, weights.as_deref())?;
        if !next.is_finite() {
            return Err(Error::Diverged { round: t });
        }
        let drift = next.distance(&self.state.theta);
        self.state.theta = next;
        self.state.round = t;
        let record = self.record(t, drift, participants, sharers, start)?;
        self.trace.records.push(record);
        Ok(())
    }

    fn record(&self, t: usize, drift: f64, participants: Vec<usize>, sharers: Vec<usize>, start: Instant) -> Result<RoundRecord> {
        let theta = &self.state.theta;
        let finite = self.clients.iter().all(|c| c.kernel().mode == KernelMode::Finite);
        let (global_loss, client_losses) = if finite {
            let corrs = all_client_correlations(theta, self.clients)?;
            let global = global_loss_from_correlations(&corrs, &self.weights())?;
            let locals = corrs
                .iter()
                .map(|c| -c.positive.trace() + 0.5 * c.full.frobenius_norm().powi(2))
                .collect();
            (Some(global), locals)
        } else {
            (None, Vec::new())
        };
        let (knn, linear) = match self.eval {
            Some(e) if t.is_multiple_of(e.every.max(1)) || t == self.cfg.rounds => (
                Some(knn_accuracy(theta, &e.train, &e.test, e.knn_k)?.accuracy),
                Some(linear_probe_accuracy(theta, &e.train, &e.test, e.ridge)?.accuracy),
            ),
            _ => (None, None),
        };
        let alpha = match (self.method, self.cfg.alpha) {
            (Method::FedAvgSc, _) => Some(1.0),
            (Method::FedSc, AlphaSchedule::Fixed) => None,
            (Method::FedSc, AlphaSchedule::Linear) => Some(alpha_schedule(t, self.cfg.rounds, AlphaSchedule::Linear, 1.0)),
        };
        Ok(RoundRecord {
            round: t,
            global_loss,
            client_losses,
            knn_accuracy: knn,
            linear_accuracy: linear,
            epsilon: max_epsilon(&privacy_spent(&self.state.ledger, self.cfg.delta)?),
            alpha,
            weight_drift: drift,
            participants,
            sharers,
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Like [`run_to_end`](Self::run_to_end), writing a checkpoint every
    /// `every` rounds into `dir` as `checkpoint-<method>-<round>.json`.
    pub fn run_with_checkpoints(&mut self, every: usize, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        while !self.is_done() {
            self.step()?;
            if every > 0 && (self.state.round.is_multiple_of(every) || self.is_done()) {
                let path = dir.join(format!("checkpoint-{}-{:05}.json", self.method.name(), self.state.round));
                self.checkpoint().save(&path)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

pub fn run_method(
    method: Method,
    cfg: &FedConfig,
    clients: &[ClientDataset],
    theta0: Params,
    eval: Option<&EvalData>,
) -> Result<(TrainingTrace, ServerState)> {
    let mut sim = Simulation::new(method, cfg, clients, theta0, eval)?;
    sim.run_to_end()?;
    Ok(sim.into_parts())
}

pub fn run_fedsc(cfg: &FedConfig, clients: &[ClientDataset], theta0: Params, eval: Option<&EvalData>) -> Result<TrainingTrace> {
    Ok(run_method(Method::FedSc, cfg, clients, theta0, eval)?.0)
}

pub fn run_fedavg_sc(cfg: &FedConfig, clients: &[ClientDataset], theta0: Params, eval: Option<&EvalData>) -> Result<TrainingTrace> {
    Ok(run_method(Method::FedAvgSc, cfg, clients, theta0, eval)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{holdout_split, make_dataset, partition_noniid, DataConfig};
    use crate::encoder::{init_params, EncoderArch};

    fn mat(rows: [[f64; 2]; 2]) -> CorrMatrix {
        CorrMatrix::symmetric(Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    fn eye(s: f64) -> CorrMatrix {
        CorrMatrix::symmetric(Matrix::identity(2).scale(s)).unwrap()
    }

    fn small_setup(seed: u64) -> (Vec<ClientDataset>, Params) {
        let cfg = DataConfig {
            dim: 4,
            classes: 4,
            anchors_per_class: 12,
            clients: 4,
            classes_per_client: 1,
            noise: 0.2,
            views: 3,
            kernel: KernelMode::Finite,
            holdout: 0.0,
        };
        let anchors = make_dataset(&cfg, &mut RngStream::for_purpose(seed, Purpose::Dataset)).unwrap();
        let (train, _) = holdout_split(anchors, 0.0, &mut RngStream::for_purpose(seed, Purpose::Holdout)).unwrap();
        let clients = partition_noniid(train, 4, 1, cfg.kernel(), &mut RngStream::for_purpose(seed, Purpose::Partition)).unwrap();
        let arch = EncoderArch::new(vec![4, 8, 2]).unwrap();
        let theta = init_params(&arch, 1.0, &mut RngStream::for_purpose(seed, Purpose::Init)).unwrap();
        (clients, theta)
    }

    fn fed(rounds: usize) -> FedConfig {
        FedConfig {
            rounds,
            local_epochs: 1,
            batch_size: 4,
            train_views: ViewDraw::Sample(2),
            learning_rate: 0.05,
            participation: 4,
            ..FedConfig::default()
        }
    }

    #[test]
    fn alpha_schedule_examples() {
        assert_eq!(alpha_schedule(0, 100, AlphaSchedule::Linear, 0.3), 1.0);
        assert!((alpha_schedule(100, 100, AlphaSchedule::Linear, 0.3) - 0.2).abs() < 1e-15);
        assert!((alpha_schedule(50, 100, AlphaSchedule::Linear, 0.3) - 0.6).abs() < 1e-15);
        assert_eq!(alpha_schedule(7, 100, AlphaSchedule::Fixed, 0.3), 0.3);
    }

    #[test]
    fn global_corr_update_examples() {
        let r = eye(1.0);
        assert_eq!(update_global_corr(&r, 0.5, &eye(1.0), &eye(1.0)).unwrap(), r);
        assert_eq!(update_global_corr(&r, 0.5, &eye(1.0), &eye(3.0)).unwrap(), eye(2.0));

        // replacing every client once equals recomputing the weighted sum
        let q = [0.2, 0.5, 0.3];
        let old = [mat([[1.0, 0.2], [0.2, 0.5]]), mat([[0.3, -0.1], [-0.1, 0.9]]), mat([[0.0, 0.0], [0.0, 2.0]])];
        let new = [mat([[0.4, 0.1], [0.1, 0.1]]), mat([[2.0, 0.5], [0.5, 1.0]]), mat([[1.5, -0.3], [-0.3, 0.2]])];
        let sum = |ms: &[CorrMatrix; 3]| {
            let mut acc = Matrix::zeros(2, 2);
            for (m, w) in ms.iter().zip(q) {
                acc.axpy(w, m.matrix()).unwrap();
            }
            acc
        };
        let mut r = CorrMatrix::from_release(sum(&old)).unwrap();
        for j in 0..3 {
            r = update_global_corr(&r, q[j], &old[j], &new[j]).unwrap();
        }
        assert!(r.matrix().sub(&sum(&new)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn corr_minus_j_examples() {
        assert_eq!(corr_minus_j(&eye(2.0), 0.5, &eye(1.0)).unwrap(), eye(3.0));
        let r = mat([[0.7, 0.1], [0.1, 0.4]]);
        let back = corr_minus_j(&r, 0.3, &r).unwrap();
        assert!(back.matrix().sub(r.matrix()).unwrap().max_abs() < 1e-15);

        let (a, b) = (mat([[1.0, 0.0], [0.0, 0.0]]), mat([[0.2, 0.3], [0.3, 0.9]]));
        let (qa, qb) = (0.25, 0.75);
        let total = CorrMatrix::from_release(a.matrix().scale(qa).add(&b.matrix().scale(qb)).unwrap()).unwrap();
        let rest = corr_minus_j(&total, qa, &a).unwrap();
        assert!(rest.matrix().sub(b.matrix()).unwrap().max_abs() < 1e-15);
        let recon = a.matrix().scale(qa).add(&rest.matrix().scale(1.0 - qa)).unwrap();
        assert!(recon.sub(total.matrix()).unwrap().max_abs() < 1e-15);

        assert!(matches!(corr_minus_j(&r, 1.0, &r), Err(Error::SingleClient)));
    }

    #[test]
    fn aggregation_examples() {
        let arch = EncoderArch::new(vec![2, 1]).unwrap();
        let p = Params::new(arch.clone(), vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(aggregate_weights(&[p.clone(), p.clone(), p.clone()], None).unwrap(), p);
        let zero = Params::zeros(arch.clone());
        let half = aggregate_weights(&[zero.clone(), p.clone()], None).unwrap();
        assert_eq!(half.values(), &[0.5, -1.0, 0.25]);
        let other = Params::new(arch, vec![3.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            aggregate_weights(&[p.clone(), other.clone(), zero.clone()], None).unwrap(),
            aggregate_weights(&[zero, other, p.clone()], None).unwrap()
        );
        let wrong = Params::zeros(EncoderArch::new(vec![3, 1]).unwrap());
        assert!(matches!(aggregate_weights(&[p, wrong], None), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (clients, theta) = small_setup(1);
        let cfg = FedConfig {
            learning_rate: 0.0,
            ..fed(1)
        };
        let mut rng = RngStream::for_purpose(0, Purpose::Test);
        let out = client_local_update(&theta, &clients[0], &CorrMatrix::zeros(2), 1.0, &cfg, &mut rng).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn local_update_deterministic() {
        let (clients, theta) = small_setup(2);
        let cfg = fed(1);
        let run = || {
            let mut rng = RngStream::new(5, StreamId::new(1, 0, Purpose::LocalTraining));
            client_local_update(&theta, &clients[0], &eye(0.3), 0.5, &cfg, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
        let too_big = FedConfig {
            batch_size: 100,
            ..cfg
        };
        let mut rng = RngStream::for_purpose(0, Purpose::Test);
        assert!(client_local_update(&theta, &clients[0], &eye(0.3), 0.5, &too_big, &mut rng).is_err());
    }

    #[test]
    fn zero_rounds_trace() {
        let (clients, theta) = small_setup(3);
        let trace = run_fedsc(&fed(0), &clients, theta.clone(), None).unwrap();
        assert_eq!(trace.records.len(), 1);
        let (_, state) = run_method(Method::FedSc, &fed(0), &clients, theta.clone(), None).unwrap();
        assert_eq!(state.theta, theta);
    }

    #[test]
    fn single_client_matches_fedavg() {
        let (clients, theta) = small_setup(4);
        let mut all: Vec<Anchor> = clients.iter().flat_map(ClientDataset::labeled_anchors).collect();
        all.sort_by_key(|a| a.sample.id);
        let one = vec![ClientDataset::new(0, all, 1.0, clients[0].kernel())];
        let cfg = FedConfig {
            participation: 1,
            alpha: AlphaSchedule::Fixed,
            ..fed(3)
        };
        let a = run_fedsc(&cfg, &one, theta.clone(), None).unwrap();
        let b = run_fedavg_sc(&cfg, &one, theta, None).unwrap();
        assert_eq!(a.records.len(), 4);
        let strip = |t: &TrainingTrace| {
            t.records
                .iter()
                .map(|r| (r.global_loss.unwrap().to_bits(), r.weight_drift.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn ledger_counts_shares() {
        let (clients, theta) = small_setup(5);
        let cfg = FedConfig {
            participation: 2,
            privacy: PrivacyParams {
                sigma: 0.01,
                ..PrivacyParams::default()
            },
            ..fed(6)
        };
        let (trace, state) = run_method(Method::FedSc, &cfg, &clients, theta, None).unwrap();
        for j in 0..clients.len() {
            let n = trace.records.iter().filter(|r| r.sharers.contains(&j)).count() as u64;
            assert_eq!(state.ledger.shares(j), n);
        }
        assert_eq!(trace.records[1].sharers, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sharing_gate_delays_inter_client_term() {
        let (clients, theta) = small_setup(6);
        let cfg = FedConfig {
            share_start_round: 3,
            share_period: 2,
            ..fed(6)
        };
        let fedsc = run_fedsc(&cfg, &clients, theta.clone(), None).unwrap();
        let fedavg = run_fedavg_sc(&cfg, &clients, theta, None).unwrap();
        // identical until sharing starts
        for t in 0..=2 {
            assert_eq!(fedsc.records[t].global_loss, fedavg.records[t].global_loss);
        }
        assert_ne!(fedsc.records[3].global_loss, fedavg.records[3].global_loss);
        let share_rounds: Vec<usize> = fedsc.records.iter().filter(|r| !r.sharers.is_empty()).map(|r| r.round).collect();
        assert_eq!(share_rounds, vec![3, 5]);
    }

    #[test]
    fn participants_are_uniform_subsets() {
        let p = sample_participants(9, 4, 5, 2);
        assert_eq!(p.len(), 2);
        assert!(p[0] < p[1] && p[1] < 5);
        assert_eq!(p, sample_participants(9, 4, 5, 2));
        assert_eq!(sample_participants(9, 4, 5, 5), vec![0, 1, 2, 3, 4]);
    }
}
