// SPDX-License-Identifier: Apache-2.0

//! Fully connected tanh encoder `z(x; θ): ℝᵈ → ℝᴴ` with a hand-written
//! reverse pass.
//!
//! The output layer is tanh as well, so every coordinate lies in (−1, 1) and
//! `‖z‖₂ ≤ √H` for all inputs and parameters.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    widths: Vec<usize>,
}

impl EncoderArch {
    /// `widths` runs from the input dimension to the representation dimension.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("an encoder needs at least an input and an output width"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid(format!("layer widths must be positive, got {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Bound `A0` on `‖z‖₂`, i.e. `√H` for a tanh output layer.
    pub fn output_bound(&self) -> f64 {
        (self.output_dim() as f64).sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Offset of layer `l`'s weight block; its bias follows the `out × in` weights.
    fn layer_offset(&self, l: usize) -> usize {
        self.widths[..=l].windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Flat parameter vector: per layer, an `out × in` row-major weight block then `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    arch: EncoderArch,
    values: Vec<f64>,
}

impl Params {
    pub fn new(arch: EncoderArch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "architecture {:?} needs {} parameters, got {}",
                arch.widths,
                arch.param_count(),
                values.len()
            )));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: EncoderArch) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            values: vec![0.0; n],
        }
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same architecture, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `‖self − other‖₂`
    pub fn distance(&self, other: &Params) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.arch.widths[l], self.arch.widths[l + 1]);
        let off = self.arch.layer_offset(l);
        let w = &self.values[off..off + n_in * n_out];
        let b = &self.values[off + n_in * n_out..off + (n_in + 1) * n_out];
        (w, b)
    }

    /// Plain-text form: a header with widths and activations, then one value per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("fedsc-params v1\n");
        let widths: Vec<String> = self.arch.widths.iter().map(usize::to_string).collect();
        writeln!(out, "widths {}", widths.join(" ")).unwrap();
        writeln!(out, "activations {}", vec!["tanh"; self.arch.layers()].join(" ")).unwrap();
        for v in &self.values {
            writeln!(out, "{v:e}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, message: &str| Error::Format {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some("fedsc-params v1") {
            return Err(err(1, "expected 'fedsc-params v1'"));
        }
        let widths = lines
            .next()
            .and_then(|l| l.strip_prefix("widths "))
            .ok_or_else(|| err(2, "expected 'widths ...'"))?
            .split_whitespace()
            .map(|w| w.parse::<usize>().map_err(|_| err(2, "bad width")))
            .collect::<Result<Vec<_>>>()?;
        let arch = EncoderArch::new(widths)?;
        let acts: Vec<&str> = lines
            .next()
            .and_then(|l| l.strip_prefix("activations "))
            .ok_or_else(|| err(3, "expected 'activations ...'"))?
            .split_whitespace()
            .collect();
        if acts.len() != arch.layers() || acts.iter().any(|&a| a != "tanh") {
            return Err(err(3, "only tanh activations, one per layer, are supported"));
        }
        let values = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| err(i + 4, "bad parameter value")))
            .collect::<Result<Vec<_>>>()?;
        Params::new(arch, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Weights uniform in `±scale/√fan_in`, biases zero.
pub fn init_params(arch: &EncoderArch, scale: f64, rng: &mut RngStream) -> Result<Params> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("init scale must be positive, got {scale}")));
    }
    let mut values = Vec::with_capacity(arch.param_count());
    for w in arch.widths.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let bound = scale / (n_in as f64).sqrt();
        values.extend((0..n_in * n_out).map(|_| bound * (2.0 * rng.uniform() - 1.0)));
        values.extend(std::iter::repeat_n(0.0, n_out));
    }
    Params::new(arch.clone(), values)
}

/// Activations of one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[l]` is `n × widths[l]`; index 0 is the input.
    activations: Vec<Matrix>,
}

impl ForwardPass {
    /// Representations as an `H × n` matrix, one column per input row.
    pub fn output(&self) -> Matrix {
        self.activations.last().unwrap().transpose()
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }

    /// Gradient of `Σᵢ ⟨dL_dZ[:, i], z(xᵢ; θ)⟩` with respect to θ.
    pub fn backward(&self, theta: &Params, dl_dz: &Matrix) -> Result<Vec<f64>> {
        let arch = theta.arch();
        let n = self.batch_size();
        if dl_dz.shape() != (arch.output_dim(), n) {
            return Err(Error::shape(format!(
                "output gradient is {}x{}, expected {}x{n}",
                dl_dz.rows(),
                dl_dz.cols(),
                arch.output_dim()
            )));
        }
        let mut grad = vec![0.0; arch.param_count()];
        // dL/d(activation) for the current layer, n × width
        let mut upstream = dl_dz.transpose();
        for l in (0..arch.layers()).rev() {
            let (n_in, n_out) = (arch.widths[l], arch.widths[l + 1]);
            let input = &self.activations[l];
            let out = &self.activations[l + 1];
            let (w, _) = theta.layer(l);
            let off = arch.layer_offset(l);
            let mut downstream = Matrix::zeros(n, n_in);
            for s in 0..n {
                let x = input.row(s);
                let a = out.row(s);
                let up = upstream.row(s);
                let down = downstream.row_mut(s);
                for o in 0..n_out {
                    let delta = up[o] * (1.0 - a[o] * a[o]);
                    if delta == 0.0 {
                        continue;
                    }
                    let w_row = &w[o * n_in..(o + 1) * n_in];
                    let g_row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for i in 0..n_in {
                        g_row[i] += delta * x[i];
                        down[i] += delta * w_row[i];
                    }
                    grad[off + n_in * n_out + o] += delta;
                }
            }
            upstream = downstream;
        }
        Ok(grad)
    }
}

/// Forward pass over the rows of `x` (`n × d`), keeping activations.
pub fn forward_pass(theta: &Params, x: &Matrix) -> Result<ForwardPass> {
    let arch = theta.arch();
    if x.cols() != arch.input_dim() {
        return Err(Error::shape(format!(
            "input has {} columns, encoder expects {}",
            x.cols(),
            arch.input_dim()
        )));
    }
    let n = x.rows();
    let mut activations = Vec::with_capacity(arch.layers() + 1);
    activations.push(x.clone());
    for l in 0..arch.layers() {
        let (n_in, n_out) = (arch.widths[l], arch.widths[l + 1]);
        let (w, b) = theta.layer(l);
        let input = &activations[l];
        let mut out = Matrix::zeros(n, n_out);
        for s in 0..n {
            let xr = input.row(s);
            let or = out.row_mut(s);
            for o in 0..n_out {
                let w_row = &w[o * n_in..(o + 1) * n_in];
                let pre: f64 = b[o] + w_row.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
                or[o] = pre.tanh();
            }
        }
        activations.push(out);
    }
    Ok(ForwardPass { activations })
}

/// `H × n` matrix whose column `i` is `z(xᵢ; θ)`.
pub fn forward_batch(theta: &Params, x: &Matrix) -> Result<Matrix> {
    Ok(forward_pass(theta, x)?.output())
}

/// Representation of a single input.
pub fn forward_one(theta: &Params, x: &[f64]) -> Result<Vec<f64>> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(forward_pass(theta, &m)?.activations.pop().unwrap().into_vec())
}

/// Exact gradient of `Σᵢ ⟨dL_dZ[:, i], z(xᵢ; θ)⟩` with respect to θ.
pub fn backward_batch(theta: &Params, x: &Matrix, dl_dz: &Matrix) -> Result<Vec<f64>> {
    forward_pass(theta, x)?.backward(theta, dl_dz)
}
