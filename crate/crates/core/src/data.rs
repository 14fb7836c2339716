// SPDX-License-Identifier: Apache-2.0

//! Synthetic labelled anchors with a finite augmentation kernel, plus
//! non-i.i.d. partitioning across clients.
//!
//! Labels live on [`Anchor`] and in [`ClientDataset::labels`]. Training code
//! only ever sees [`AnchorSample`], which carries no label.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// How views are produced from an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelMode {
    /// Uniform over the K views stored with each anchor.
    Finite,
    /// Fresh `anchor + N(0, s² I)` on every draw.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationKernel {
    pub mode: KernelMode,
    /// Per-coordinate standard deviation `s` of a view around its anchor.
    pub noise: f64,
}

impl AugmentationKernel {
    pub fn finite(noise: f64) -> Self {
        Self {
            mode: KernelMode::Finite,
            noise,
        }
    }

    pub fn stochastic(noise: f64) -> Self {
        Self {
            mode: KernelMode::Stochastic,
            noise,
        }
    }
}

/// The label-free part of an anchor: its point and its stored views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSample {
    pub id: usize,
    pub point: Vec<f64>,
    pub views: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    /// Class index. Evaluation only.
    pub label: usize,
    pub sample: AnchorSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dim: usize,
    pub classes: usize,
    pub anchors_per_class: usize,
    pub clients: usize,
    pub classes_per_client: usize,
    /// View noise `s`. Anchors scatter around their class center with `s/2`.
    pub noise: f64,
    /// Stored views per anchor (K).
    pub views: usize,
    pub kernel: KernelMode,
    /// Fraction of each class held out for evaluation.
    pub holdout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            classes: 4,
            anchors_per_class: 85,
            clients: 4,
            classes_per_client: 1,
            noise: 0.2,
            views: 4,
            kernel: KernelMode::Finite,
            holdout: 0.25,
        }
    }
}

impl DataConfig {
    pub fn kernel(&self) -> AugmentationKernel {
        AugmentationKernel {
            mode: self.kernel,
            noise: self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.dim == 0 {
            return bad("data.dim must be >= 1");
        }
        if self.classes == 0 {
            return bad("data.classes must be >= 1");
        }
        if self.anchors_per_class == 0 {
            return bad("data.anchors_per_class must be >= 1");
        }
        if self.views == 0 {
            return bad("data.views must be >= 1");
        }
        if self.clients == 0 {
            return bad("data.clients must be >= 1");
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.classes {
            return bad("data.classes_per_client must be in 1..=data.classes");
        }
        if self.clients * self.classes_per_client < self.classes {
            return bad("data.clients * data.classes_per_client must cover every class");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("data.noise must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("data.holdout must be in [0, 1)");
        }
        Ok(())
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub id: usize,
    samples: Vec<AnchorSample>,
    labels: Vec<usize>,
    weight: f64,
    kernel: AugmentationKernel,
}

impl ClientDataset {
    /// Builds a dataset with an explicit weight. Use [`assign_weights`] to
    /// derive weights from sizes.
    pub fn new(id: usize, anchors: Vec<Anchor>, weight: f64, kernel: AugmentationKernel) -> Self {
        let (labels, samples) = anchors.into_iter().map(|a| (a.label, a.sample)).unzip();
        Self {
            id,
            samples,
            labels,
            weight,
            kernel,
        }
    }

    pub fn samples(&self) -> &[AnchorSample] {
        &self.samples
    }

    /// Class labels aligned with [`samples`](Self::samples). Evaluation only.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labeled_anchors(&self) -> Vec<Anchor> {
        self.samples
            .iter()
            .zip(&self.labels)
            .map(|(s, &label)| Anchor {
                label,
                sample: s.clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `q_j = |D_j| / Σ |D_j'|`
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn kernel(&self) -> AugmentationKernel {
        self.kernel
    }

    /// Views per anchor in finite mode.
    pub fn views_per_anchor(&self) -> usize {
        self.samples.first().map_or(0, |s| s.views.len())
    }
}

/// Sets `q_j = n_j / N` from integer counts.
pub fn assign_weights(clients: &mut [ClientDataset]) {
    let total: usize = clients.iter().map(ClientDataset::len).sum();
    for c in clients.iter_mut() {
        c.weight = if total == 0 {
            0.0
        } else {
            c.len() as f64 / total as f64
        };
    }
}

const MAX_CENTER_ATTEMPTS: usize = 10_000;

fn random_unit_vector(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..i {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Class centers on the unit sphere with pairwise distance greater than `6 s`.
pub fn class_centers(cfg: &DataConfig, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    let required = 6.0 * cfg.noise;
    if cfg.classes > 1 && required >= 2.0 {
        return Err(Error::Generation(format!(
            "noise {} needs center separation {required} but unit-sphere points are at most 2 apart",
            cfg.noise
        )));
    }
    for _ in 0..MAX_CENTER_ATTEMPTS {
        let centers: Vec<Vec<f64>> = (0..cfg.classes).map(|_| random_unit_vector(cfg.dim, rng)).collect();
        if cfg.classes < 2 || min_pairwise_distance(&centers) > required {
            return Ok(centers);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} centers in dimension {} with separation > {required} after {MAX_CENTER_ATTEMPTS} attempts",
        cfg.classes, cfg.dim
    )))
}

/// Draws class centers, anchors around them, and K stored views per anchor.
/// Anchors are ordered class by class; ids are positions in that order.
pub fn make_dataset(cfg: &DataConfig, rng: &mut RngStream) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    let centers = class_centers(cfg, rng)?;
    let s = cfg.noise;
    let mut anchors = Vec::with_capacity(cfg.classes * cfg.anchors_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..cfg.anchors_per_class {
            let point: Vec<f64> = center.iter().map(|&c| c + 0.5 * s * rng.normal()).collect();
            let views = (0..cfg.views)
                .map(|_| point.iter().map(|&p| p + s * rng.normal()).collect())
                .collect();
            anchors.push(Anchor {
                label,
                sample: AnchorSample {
                    id: anchors.len(),
                    point,
                    views,
                },
            });
        }
    }
    Ok(anchors)
}

fn group_by_class(anchors: Vec<Anchor>) -> Vec<Vec<Anchor>> {
    let classes = anchors.iter().map(|a| a.label + 1).max().unwrap_or(0);
    let mut groups: Vec<Vec<Anchor>> = (0..classes).map(|_| Vec::new()).collect();
    for a in anchors {
        groups[a.label].push(a);
    }
    groups
}

/// Stratified split: `round(fraction · n_c)` anchors of each class go to the
/// held-out set. Returns `(train, held_out)`, each sorted by id.
pub fn holdout_split(anchors: Vec<Anchor>, fraction: f64, rng: &mut RngStream) -> Result<(Vec<Anchor>, Vec<Anchor>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("holdout fraction must be in [0, 1), got {fraction}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in group_by_class(anchors) {
        group.shuffle(rng);
        let n_test = (fraction * group.len() as f64).round() as usize;
        let rest = group.split_off(n_test);
        test.extend(group);
        train.extend(rest);
    }
    train.sort_by_key(|a| a.sample.id);
    test.sort_by_key(|a| a.sample.id);
    Ok((train, test))
}

/// Class slots for each client: client `j` holds classes
/// `(j·c .. (j+1)·c) mod C` for `c` classes per client.
pub fn class_assignment(classes: usize, clients: usize, classes_per_client: usize) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::Partition(format!(
            "classes per client must be in 1..={classes}, got {classes_per_client}"
        )));
    }
    if clients * classes_per_client < classes {
        return Err(Error::Partition(format!(
            "{clients} clients x {classes_per_client} classes cannot cover {classes} classes"
        )));
    }
    Ok((0..clients)
        .map(|j| {
            (j * classes_per_client..(j + 1) * classes_per_client)
                .map(|slot| slot % classes)
                .collect()
        })
        .collect())
}

/// Splits anchors so that each client only holds its assigned classes. When
/// a class is assigned to several clients its anchors are shuffled and dealt
/// out in near-equal contiguous chunks.
pub fn partition_noniid(
    anchors: Vec<Anchor>,
    clients: usize,
    classes_per_client: usize,
    kernel: AugmentationKernel,
    rng: &mut RngStream,
) -> Result<Vec<ClientDataset>> {
    let groups = group_by_class(anchors);
    let assignment = class_assignment(groups.len(), clients, classes_per_client)?;
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    for (j, classes) in assignment.iter().enumerate() {
        for &c in classes {
            holders[c].push(j);
        }
    }
    let mut per_client: Vec<Vec<Anchor>> = (0..clients).map(|_| Vec::new()).collect();
    for (class, mut group) in groups.into_iter().enumerate() {
        let owners = &holders[class];
        if group.len() < owners.len() {
            return Err(Error::Partition(format!(
                "class {class} has {} anchors but {} clients hold it",
                group.len(),
                owners.len()
            )));
        }
        if owners.len() > 1 {
            group.shuffle(rng);
        }
        let n = group.len();
        let mut it = group.into_iter();
        for (k, &j) in owners.iter().enumerate() {
            let take = (k + 1) * n / owners.len() - k * n / owners.len();
            per_client[j].extend(it.by_ref().take(take));
        }
    }
    finish_clients(per_client, kernel)
}

/// Every client gets the same class mixture: each class is shuffled and dealt
/// round-robin.
pub fn partition_iid(anchors: Vec<Anchor>, clients: usize, kernel: AugmentationKernel, rng: &mut RngStream) -> Result<Vec<ClientDataset>> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let mut per_client: Vec<Vec<Anchor>> = (0..clients).map(|_| Vec::new()).collect();
    let mut next = 0;
    for mut group in group_by_class(anchors) {
        group.shuffle(rng);
        for a in group {
            per_client[next % clients].push(a);
            next += 1;
        }
    }
    finish_clients(per_client, kernel)
}

fn finish_clients(per_client: Vec<Vec<Anchor>>, kernel: AugmentationKernel) -> Result<Vec<ClientDataset>> {
    if let Some(j) = per_client.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!("client {j} received no anchors")));
    }
    let mut out: Vec<ClientDataset> = per_client
        .into_iter()
        .enumerate()
        .map(|(j, mut anchors)| {
            anchors.sort_by_key(|a| a.sample.id);
            ClientDataset::new(j, anchors, 0.0, kernel)
        })
        .collect();
    assign_weights(&mut out);
    Ok(out)
}

/// How many views to take from an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewDraw {
    /// Every stored view exactly once, in index order (finite mode only).
    Enumerate,
    /// `m` independent draws.
    Sample(usize),
}

/// Draws views of an anchor under the given kernel.
pub fn views_of(
    sample: &AnchorSample,
    draw: ViewDraw,
    kernel: AugmentationKernel,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    match (draw, kernel.mode) {
        (ViewDraw::Sample(0), _) => Err(Error::invalid("view count must be >= 1")),
        (ViewDraw::Enumerate, KernelMode::Finite) => Ok(sample.views.clone()),
        (ViewDraw::Enumerate, KernelMode::Stochastic) => Err(Error::KernelMode(
            "cannot enumerate views of a stochastic kernel".into(),
        )),
        (ViewDraw::Sample(m), KernelMode::Finite) => {
            if sample.views.is_empty() {
                return Err(Error::invalid(format!("anchor {} has no stored views", sample.id)));
            }
            Ok((0..m).map(|_| sample.views[rng.index(sample.views.len())].clone()).collect())
        }
        (ViewDraw::Sample(m), KernelMode::Stochastic) => Ok((0..m).map(|_| perturb(&sample.point, kernel.noise, rng)).collect()),
    }
}

fn perturb(point: &[f64], noise: f64, rng: &mut RngStream) -> Vec<f64> {
    point.iter().map(|&p| p + noise * rng.normal()).collect()
}

/// A positive pair: two views of the same anchor. In finite mode with at
/// least two stored views the two indices are distinct.
pub fn positive_pair<'a>(
    sample: &'a AnchorSample,
    kernel: AugmentationKernel,
    rng: &mut RngStream,
) -> (std::borrow::Cow<'a, [f64]>, std::borrow::Cow<'a, [f64]>) {
    use std::borrow::Cow;
    match kernel.mode {
        KernelMode::Finite => {
            let k = sample.views.len();
            let a = rng.index(k);
            let b = if k >= 2 {
                let b = rng.index(k - 1);
                if b >= a {
                    b + 1
                } else {
                    b
                }
            } else {
                a
            };
            (Cow::Borrowed(&sample.views[a]), Cow::Borrowed(&sample.views[b]))
        }
        KernelMode::Stochastic => (
            Cow::Owned(perturb(&sample.point, kernel.noise, rng)),
            Cow::Owned(perturb(&sample.point, kernel.noise, rng)),
        ),
    }
}

const DUMP_HEADER: &str = "fedsc-dataset v1";

/// Writes clients and held-out anchors as a flat table, one row per view:
/// `client,anchor,view,label,x0,...`. The anchor point itself is the row with
/// view `-1`; held-out anchors use client `-1`.
pub fn dump_dataset(path: &Path, clients: &[ClientDataset], held_out: &[Anchor]) -> Result<()> {
    let kernel = clients
        .first()
        .map(ClientDataset::kernel)
        .ok_or_else(|| Error::invalid("no clients to dump"))?;
    let mut out = String::new();
    let mode = match kernel.mode {
        KernelMode::Finite => "finite",
        KernelMode::Stochastic => "stochastic",
    };
    writeln!(out, "# {DUMP_HEADER} kernel={mode} noise={:e}", kernel.noise).unwrap();
    let mut write_anchor = |client: i64, a: &Anchor| {
        let mut row = |view: i64, x: &[f64]| {
            write!(out, "{client},{},{view},{}", a.sample.id, a.label).unwrap();
            for v in x {
                write!(out, ",{v:e}").unwrap();
            }
            out.push('\n');
        };
        row(-1, &a.sample.point);
        for (k, v) in a.sample.views.iter().enumerate() {
            row(k as i64, v);
        }
    };
    for c in clients {
        for a in c.labeled_anchors() {
            write_anchor(c.id as i64, &a);
        }
    }
    for a in held_out {
        write_anchor(-1, a);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Inverse of [`dump_dataset`]. Weights are recomputed from counts.
pub fn load_dataset(path: &Path) -> Result<(Vec<ClientDataset>, Vec<Anchor>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let fmt_err = |line: usize, message: String| Error::Format { line: line + 1, message };
    let (_, header) = lines.next().ok_or_else(|| fmt_err(0, "empty file".into()))?;
    let header = header
        .strip_prefix("# ")
        .and_then(|h| h.strip_prefix(DUMP_HEADER))
        .ok_or_else(|| fmt_err(0, format!("expected header '# {DUMP_HEADER}'")))?;
    let mut mode = None;
    let mut noise = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("kernel", "finite")) => mode = Some(KernelMode::Finite),
            Some(("kernel", "stochastic")) => mode = Some(KernelMode::Stochastic),
            Some(("noise", v)) => noise = v.parse::<f64>().ok(),
            _ => return Err(fmt_err(0, format!("unknown header field '{field}'"))),
        }
    }
    let kernel = AugmentationKernel {
        mode: mode.ok_or_else(|| fmt_err(0, "missing kernel".into()))?,
        noise: noise.ok_or_else(|| fmt_err(0, "missing noise".into()))?,
    };

    // (client, anchor) -> anchor under construction, in file order
    let mut order: Vec<(i64, Anchor)> = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 5 {
            return Err(fmt_err(ln, "expected at least 5 columns".into()));
        }
        let int = |s: &str, what: &str| s.parse::<i64>().map_err(|_| fmt_err(ln, format!("bad {what} '{s}'")));
        let client = int(cols[0], "client")?;
        let anchor = int(cols[1], "anchor")? as usize;
        let view = int(cols[2], "view")?;
        let label = int(cols[3], "label")? as usize;
        let coords = cols[4..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| fmt_err(ln, format!("bad coordinate '{s}'"))))
            .collect::<Result<Vec<f64>>>()?;
        if view < 0 {
            order.push((
                client,
                Anchor {
                    label,
                    sample: AnchorSample {
                        id: anchor,
                        point: coords,
                        views: Vec::new(),
                    },
                },
            ));
        } else {
            let (c, a) = order
                .last_mut()
                .ok_or_else(|| fmt_err(ln, "view row before its anchor row".into()))?;
            if *c != client || a.sample.id != anchor || a.sample.views.len() != view as usize {
                return Err(fmt_err(ln, "view row out of order".into()));
            }
            a.sample.views.push(coords);
        }
    }

    let client_ids: BTreeSet<i64> = order.iter().map(|(c, _)| *c).filter(|&c| c >= 0).collect();
    let mut per_client: Vec<Vec<Anchor>> = vec![Vec::new(); client_ids.len()];
    let mut held_out = Vec::new();
    for (c, a) in order {
        if c < 0 {
            held_out.push(a);
        } else {
            let idx = client_ids.range(..c).count();
            per_client[idx].push(a);
        }
    }
    let mut clients: Vec<ClientDataset> = per_client
        .into_iter()
        .zip(client_ids)
        .map(|(anchors, id)| ClientDataset::new(id as usize, anchors, 0.0, kernel))
        .collect();
    assign_weights(&mut clients);
    Ok((clients, held_out))
}
