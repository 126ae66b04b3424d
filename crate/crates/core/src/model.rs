//! Layered random trigonometric feature banks with Student's-t posteriors
//! over the bank frequencies ω and the mixing matrices W.
//!
//! Layer l maps h (d_in) to (1/K) Σ_j W_j φ(h), where φ_s = ξ(h; ω_s) for a
//! bank of S frequency vectors and W_j ∈ ℝ^{η×S}. Training draws ω and W from
//! the escorts of the posteriors; prediction draws them from the posteriors.
//! Because the map is linear in W, averaging K draws of W_j φ equals W̄ φ with
//! W̄ = μ_W + σ_W ⊙ mean(ε); the batched kernels use that form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_bt_into, Tensor};
use crate::numerics::{Graph, RngStream, Var};
use crate::par::Execution;
use crate::tdist::{draw_std_t_matrix, DiagStudentT};

/// ξ(x; ω) = ½cos(ωᵀx) + ½sin(ωᵀx).
pub fn feature(x: &[f64], omega: &[f64]) -> Result<f64> {
    if x.len() != omega.len() {
        return Err(Error::Usage(format!(
            "feature: input has {} entries, frequency has {}",
            x.len(),
            omega.len()
        )));
    }
    let z: f64 = x.iter().zip(omega).map(|(a, b)| a * b).sum();
    Ok(xi(z))
}

#[inline]
fn xi(z: f64) -> f64 {
    let (s, c) = z.sin_cos();
    0.5 * (c + s)
}

/// One realization of a layer's bank and W draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLayer {
    /// S x d_in, one frequency vector per row.
    pub omega_bank: Tensor,
    /// K matrices of shape η x S.
    pub w_draws: Vec<Tensor>,
}

impl SampledLayer {
    fn check(&self) -> Result<(usize, usize, usize)> {
        let (s, d) = (self.omega_bank.rows(), self.omega_bank.cols());
        let first = self
            .w_draws
            .first()
            .ok_or_else(|| Error::Usage("a sampled layer needs at least one W draw".into()))?;
        let eta = first.rows();
        for w in &self.w_draws {
            if w.shape() != [eta, s] {
                return Err(Error::Usage(format!(
                    "W draw has shape {:?}, expected [{eta}, {s}]",
                    w.shape()
                )));
            }
        }
        Ok((s, d, eta))
    }

    fn w_mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.w_draws[0].numel()];
        for w in &self.w_draws {
            acc.iter_mut().zip(w.data()).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / self.w_draws.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

/// Single-example layer map: φ = [ξ(h; ω_s)]_s, output = (1/K) Σ_j W_j φ.
pub fn layer_forward(h: &[f64], sampled: &SampledLayer) -> Result<Vec<f64>> {
    let (s, d, eta) = sampled.check()?;
    if h.len() != d {
        return Err(Error::Usage(format!("layer input has {} entries, bank expects {d}", h.len())));
    }
    let phi: Vec<f64> = (0..s).map(|i| xi(dot(h, sampled.omega_bank.row(i)))).collect();
    let mut out = vec![0.0; eta];
    for w in &sampled.w_draws {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(w.row(r), &phi);
        }
    }
    let inv = 1.0 / sampled.w_draws.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batched layer map for an input matrix (B x d_in), given the bank and the
/// already averaged W̄ (η x S, flat).
fn layer_forward_batch(h: &Tensor, bank: &Tensor, w_mean: &[f64], eta: usize) -> Tensor {
    let (b, d) = (h.rows(), h.cols());
    let s = bank.rows();
    let mut z = vec![0.0; b * s];
    matmul_bt_into(h.data(), bank.data(), &mut z, b, d, s);
    z.iter_mut().for_each(|v| *v = xi(*v));
    let mut out = vec![0.0; b * eta];
    matmul_bt_into(&z, w_mean, &mut out, b, s, eta);
    Tensor::matrix(b, eta, out).expect("layer output shape")
}

/// Likelihood head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Regression { sigma_y2: f64, out_dim: usize },
    Classification { num_classes: usize },
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Regression { out_dim, .. } => out_dim,
            Task::Classification { num_classes } => num_classes,
        }
    }
}

/// Where a layer's bank frequencies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaSource {
    /// Drawn from the inferred posterior q(ω).
    #[default]
    Inferred,
    /// Drawn once from the prior at construction and kept fixed.
    FrozenPrior,
    /// Redrawn from the prior for every pass; never trained.
    ResampledPrior,
}

/// Variational state of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub q_omega: DiagStudentT,
    pub q_w: DiagStudentT,
    pub d_in: usize,
    pub eta: usize,
    pub bank_size: usize,
    /// S x d_in prior draws, present under [`OmegaSource::FrozenPrior`].
    pub frozen_bank: Option<Tensor>,
}

impl LayerParams {
    /// Posteriors equal to the prior t(0, I, ν).
    pub fn from_prior(d_in: usize, eta: usize, bank_size: usize, prior_nu: f64) -> Result<Self> {
        if d_in == 0 || eta == 0 || bank_size == 0 {
            return Err(Error::Usage(format!(
                "layer dimensions must be positive (d_in={d_in}, eta={eta}, S={bank_size})"
            )));
        }
        Ok(Self {
            q_omega: DiagStudentT::standard(d_in, prior_nu)?,
            q_w: DiagStudentT::standard(eta * bank_size, prior_nu)?,
            d_in,
            eta,
            bank_size,
            frozen_bank: None,
        })
    }
}

/// Layer count L, hidden width η and bank size S.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub layers: usize,
    pub eta: usize,
    pub bank_size: usize,
}

impl Structure {
    /// (d_in, η) for every layer; the last layer emits the task's output size.
    pub fn layer_dims(&self, input_dim: usize, task: &Task) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { self.eta };
                let eta = if l + 1 == self.layers { task.output_dim() } else { self.eta };
                (d_in, eta)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<LayerParams>,
    pub task: Task,
    pub prior_nu: f64,
    #[serde(default)]
    pub omega_source: OmegaSource,
}

impl Network {
    /// A network whose posteriors all equal the prior.
    pub fn from_prior(structure: Structure, input_dim: usize, task: Task, prior_nu: f64) -> Result<Self> {
        if structure.layers == 0 {
            return Err(Error::Usage("a network needs at least one layer (L >= 1)".into()));
        }
        let layers = structure
            .layer_dims(input_dim, &task)
            .into_iter()
            .map(|(d, e)| LayerParams::from_prior(d, e, structure.bank_size, prior_nu))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            task,
            prior_nu,
            omega_source: OmegaSource::Inferred,
        })
    }

    /// Switches to prior-drawn banks; `FrozenPrior` draws and stores them now.
    pub fn with_prior_banks(mut self, source: OmegaSource, rng: &mut RngStream) -> Self {
        self.omega_source = source;
        for layer in &mut self.layers {
            layer.frozen_bank = match source {
                OmegaSource::FrozenPrior => {
                    Some(draw_std_t_matrix(rng, self.prior_nu, layer.bank_size, layer.d_in))
                }
                _ => None,
            };
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.task.output_dim()
    }

    /// Whether q(ω) is a trained quantity.
    pub fn infers_omega(&self) -> bool {
        self.omega_source == OmegaSource::Inferred
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Usage(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Parameter-free noise for one training pass of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    /// S x d_in escort noise for ω, or the prior bank itself when banks are
    /// redrawn from the prior each pass.
    pub omega: Tensor,
    /// K x (η·S) escort noise for vec(W).
    pub w: Tensor,
}

impl LayerNoise {
    /// All-zero noise: the pass then uses ω_s = μ_ω and W = μ_W.
    pub fn zeros(layer: &LayerParams, k: usize) -> Self {
        Self {
            omega: Tensor::zeros(vec![layer.bank_size, layer.d_in]),
            w: Tensor::zeros(vec![k, layer.eta * layer.bank_size]),
        }
    }
}

/// Escort noise for a training pass: ε ~ std-t(ν+2) for every draw.
pub fn draw_train_noise(net: &Network, rng: &mut RngStream, k: usize) -> Vec<LayerNoise> {
    net.layers
        .iter()
        .map(|layer| {
            let omega = match net.omega_source {
                OmegaSource::Inferred => layer.q_omega.draw_noise(rng, layer.bank_size),
                OmegaSource::ResampledPrior => draw_std_t_matrix(rng, net.prior_nu, layer.bank_size, layer.d_in),
                OmegaSource::FrozenPrior => Tensor::zeros(vec![0, layer.d_in]),
            };
            let w = layer.q_w.draw_noise(rng, k);
            LayerNoise { omega, w }
        })
        .collect()
}

fn check_noise(net: &Network, noise: &[LayerNoise]) -> Result<()> {
    if noise.len() != net.layers.len() {
        return Err(Error::Usage(format!(
            "noise for {} layers, network has {}",
            noise.len(),
            net.layers.len()
        )));
    }
    for (l, (layer, n)) in net.layers.iter().zip(noise).enumerate() {
        if net.omega_source != OmegaSource::FrozenPrior && n.omega.shape() != [layer.bank_size, layer.d_in] {
            return Err(Error::Usage(format!(
                "layer {l}: omega noise shape {:?}, expected [{}, {}]",
                n.omega.shape(),
                layer.bank_size,
                layer.d_in
            )));
        }
        if n.w.rows() == 0 || n.w.cols() != layer.eta * layer.bank_size || n.w.shape().len() != 2 {
            return Err(Error::Usage(format!(
                "layer {l}: W noise shape {:?}, expected [K, {}]",
                n.w.shape(),
                layer.eta * layer.bank_size
            )));
        }
    }
    Ok(())
}

/// Training-time forward pass with explicit escort samples.
///
/// Returns the final-layer output (B x η: means for regression, logits for
/// classification) and the realized banks and W draws.
pub fn forward_train(x: &Tensor, net: &Network, noise: &[LayerNoise]) -> Result<(Tensor, Vec<SampledLayer>)> {
    net.check_input(x)?;
    check_noise(net, noise)?;
    let mut h = x.clone();
    let mut sampled = Vec::with_capacity(net.layers.len());
    for (layer, n) in net.layers.iter().zip(noise) {
        let omega_bank = match net.omega_source {
            OmegaSource::Inferred => {
                let mut rows = Vec::with_capacity(layer.bank_size * layer.d_in);
                for s in 0..layer.bank_size {
                    rows.extend(layer.q_omega.reparam_sample(n.omega.row(s))?);
                }
                Tensor::matrix(layer.bank_size, layer.d_in, rows)?
            }
            OmegaSource::ResampledPrior => n.omega.clone(),
            OmegaSource::FrozenPrior => frozen(layer)?.clone(),
        };
        let w_draws = (0..n.w.rows())
            .map(|j| Tensor::matrix(layer.eta, layer.bank_size, layer.q_w.reparam_sample(n.w.row(j))?))
            .collect::<Result<Vec<_>>>()?;
        let s = SampledLayer { omega_bank, w_draws };
        h = layer_forward_batch(&h, &s.omega_bank, &s.w_mean(), layer.eta);
        sampled.push(s);
    }
    Ok((h, sampled))
}

fn frozen(layer: &LayerParams) -> Result<&Tensor> {
    layer
        .frozen_bank
        .as_ref()
        .ok_or_else(|| Error::Usage("frozen prior bank missing from layer".into()))
}

/// Tape nodes for the constrained parameters of one posterior: location,
/// scale σ (not σ²) and scalar degrees of freedom.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu: Var,
    pub sigma: Var,
    pub nu: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    /// `None` when ω is not inferred.
    pub omega: Option<PosteriorVars>,
    pub w: PosteriorVars,
}

/// Escort reparameterization on the tape: μ + (ν/(ν+2))^½ σ ⊙ ε, with ε a
/// constant (rows x dim) tensor.
fn escort_draw(g: &mut Graph, p: PosteriorVars, eps: Tensor) -> Var {
    let nu2 = g.add_scalar(p.nu, 2.0);
    let ratio = g.div(p.nu, nu2);
    let c = g.sqrt(ratio);
    let scale = g.mul(p.sigma, c);
    let e = g.leaf(eps);
    let spread = g.mul(e, scale);
    g.add(spread, p.mu)
}

/// Differentiable counterpart of [`forward_train`]; returns the B x η output
/// node.
pub fn forward_train_graph(
    g: &mut Graph,
    x: Var,
    net: &Network,
    vars: &[LayerVars],
    noise: &[LayerNoise],
) -> Result<Var> {
    check_noise(net, noise)?;
    if vars.len() != net.layers.len() {
        return Err(Error::Usage(format!(
            "parameter nodes for {} layers, network has {}",
            vars.len(),
            net.layers.len()
        )));
    }
    let mut h = x;
    for ((layer, lv), n) in net.layers.iter().zip(vars).zip(noise) {
        let bank = match (net.omega_source, lv.omega) {
            (OmegaSource::Inferred, Some(p)) => escort_draw(g, p, n.omega.clone()),
            (OmegaSource::Inferred, None) => {
                return Err(Error::Usage("inferred frequencies need parameter nodes".into()))
            }
            (OmegaSource::ResampledPrior, _) => g.leaf(n.omega.clone()),
            (OmegaSource::FrozenPrior, _) => g.leaf(frozen(layer)?.clone()),
        };
        let eps_bar = mean_rows(&n.w);
        let w_flat = escort_draw(g, lv.w, eps_bar);
        let w = g.reshape(w_flat, vec![layer.eta, layer.bank_size]);
        let z = g.matmul_bt(h, bank);
        let phi = g.feature(z);
        h = g.matmul_bt(phi, w);
    }
    Ok(h)
}

fn mean_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        out.iter_mut().zip(t.row(i)).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / r as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Tensor::matrix(1, c, out).expect("mean shape")
}

/// Isotropic Gaussian log-density −(m/2) ln(2πσ²) − ‖y − mean‖²/(2σ²).
pub fn log_lik_regression(y: &[f64], mean: &[f64], sigma_y2: f64) -> Result<f64> {
    if !(sigma_y2 > 0.0) || !sigma_y2.is_finite() {
        return Err(Error::domain("log_lik_regression", format!("sigma_y2 = {sigma_y2} must be positive")));
    }
    if y.len() != mean.len() {
        return Err(Error::Usage(format!(
            "target has {} entries, prediction has {}",
            y.len(),
            mean.len()
        )));
    }
    let sq: f64 = y.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI * sigma_y2).ln() - sq / (2.0 * sigma_y2))
}

/// Log softmax probability of `label`.
pub fn log_lik_classification(label: usize, logits: &[f64]) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Usage(format!("label {label} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(logits[label] - lse)
}

/// Targets for a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<'a> {
    Regression(&'a Tensor),
    Classification(&'a [usize]),
}

/// Mean per-example log-likelihood of a batch output node.
pub fn batch_log_lik_graph(g: &mut Graph, out: Var, targets: &Targets<'_>, task: &Task) -> Result<Var> {
    let b = g.value(out).rows();
    match (targets, task) {
        (Targets::Regression(y), Task::Regression { sigma_y2, out_dim }) => {
            if y.rows() != b || y.cols() != *out_dim {
                return Err(Error::Usage(format!(
                    "targets have shape {:?}, output is {b} x {out_dim}",
                    y.shape()
                )));
            }
            let yv = g.leaf((*y).clone());
            let diff = g.sub(out, yv);
            let sq = g.square(diff);
            let total = g.sum(sq);
            let scaled = g.mul_scalar(total, -1.0 / (2.0 * sigma_y2 * b as f64));
            let norm = -0.5 * *out_dim as f64 * (2.0 * std::f64::consts::PI * sigma_y2).ln();
            Ok(g.add_scalar(scaled, norm))
        }
        (Targets::Classification(labels), Task::Classification { num_classes }) => {
            if labels.len() != b {
                return Err(Error::Usage(format!("{} labels for {b} rows", labels.len())));
            }
            if let Some(l) = labels.iter().find(|l| **l >= *num_classes) {
                return Err(Error::Usage(format!("label {l} out of range for {num_classes} classes")));
            }
            let picked = g.log_softmax_pick(out, labels);
            let total = g.sum(picked);
            Ok(g.mul_scalar(total, 1.0 / b as f64))
        }
        _ => Err(Error::Usage("targets do not match the network's task".into())),
    }
}

/// Posterior-expectation prediction for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prediction {
    Regression { mean: Tensor },
    Classification { probs: Tensor, labels: Vec<usize> },
}

/// One posterior draw of a layer: ω = μ + σ ⊙ ε with ε ~ std-t(ν).
fn posterior_layer(net: &Network, layer: &LayerParams, rng: &mut RngStream, k: usize) -> (Tensor, Vec<f64>) {
    let bank = match net.omega_source {
        OmegaSource::Inferred => {
            let eps = layer.q_omega.draw_posterior_noise(rng, layer.bank_size);
            location_scale_rows(&layer.q_omega, &eps)
        }
        OmegaSource::ResampledPrior => draw_std_t_matrix(rng, net.prior_nu, layer.bank_size, layer.d_in),
        OmegaSource::FrozenPrior => layer.frozen_bank.clone().expect("validated frozen bank"),
    };
    let eps_w = layer.q_w.draw_posterior_noise(rng, k);
    let w_mean = location_scale_rows(&layer.q_w, &mean_rows(&eps_w)).into_data();
    (bank, w_mean)
}

fn location_scale_rows(q: &DiagStudentT, eps: &Tensor) -> Tensor {
    let sd: Vec<f64> = q.sigma2().iter().map(|s| s.sqrt()).collect();
    let mut out = eps.clone();
    for row in out.data_mut().chunks_mut(sd.len()) {
        for ((v, m), s) in row.iter_mut().zip(q.mu()).zip(&sd) {
            *v = m + s * *v;
        }
    }
    out
}

/// Averages `mc_rounds` forward passes with ω and W drawn from the
/// posteriors (K = `k_eval` W draws per layer and round). Regression returns
/// the mean output; classification averages softmax probabilities.
pub fn forward_predict(
    x: &Tensor,
    net: &Network,
    rng: &RngStream,
    mc_rounds: usize,
    k_eval: usize,
    exec: Execution,
) -> Result<Prediction> {
    if mc_rounds == 0 || k_eval == 0 {
        return Err(Error::Usage("mc_rounds and K_eval must be at least 1".into()));
    }
    net.check_input(x)?;
    if net.omega_source == OmegaSource::FrozenPrior {
        for layer in &net.layers {
            frozen(layer)?;
        }
    }
    let classify = matches!(net.task, Task::Classification { .. });
    let rounds = exec.map_indexed(mc_rounds, |r| {
        let mut stream = rng.split(r as u64);
        let mut h = x.clone();
        for layer in &net.layers {
            let (bank, w_mean) = posterior_layer(net, layer, &mut stream, k_eval);
            h = layer_forward_batch(&h, &bank, &w_mean, layer.eta);
        }
        if classify {
            softmax_rows(&mut h);
        }
        h
    });
    let mut acc = Tensor::zeros(vec![x.rows(), net.output_dim()]);
    for r in &rounds {
        acc.data_mut().iter_mut().zip(r.data()).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / mc_rounds as f64;
    acc.data_mut().iter_mut().for_each(|a| *a *= inv);
    if !acc.is_finite() {
        return Err(Error::Numerical("posterior prediction produced non-finite outputs".into()));
    }
    Ok(if classify {
        let labels = (0..acc.rows()).map(|i| argmax(acc.row(i))).collect();
        Prediction::Classification { probs: acc, labels }
    } else {
        Prediction::Regression { mean: acc }
    })
}

/// The forward pass at ω_s = μ_ω and W = μ_W (or the prior bank when ω is not
/// inferred; a resampled-prior network uses `rng` for its bank).
pub fn mean_forward(x: &Tensor, net: &Network, rng: &mut RngStream) -> Result<Tensor> {
    let noise: Vec<LayerNoise> = net
        .layers
        .iter()
        .map(|l| {
            let mut n = LayerNoise::zeros(l, 1);
            if net.omega_source == OmegaSource::ResampledPrior {
                n.omega = draw_std_t_matrix(rng, net.prior_nu, l.bank_size, l.d_in);
            }
            n
        })
        .collect();
    Ok(forward_train(x, net, &noise)?.0)
}

fn softmax_rows(t: &mut Tensor) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn random_tensor(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.std_normal()).collect()).unwrap()
    }

    fn random_net(rng: &mut RngStream, task: Task, structure: Structure, input_dim: usize) -> Network {
        let mut net = Network::from_prior(structure, input_dim, task, 2.1).unwrap();
        for layer in &mut net.layers {
            let perturb = |q: &DiagStudentT, rng: &mut RngStream| {
                let n = q.dim();
                DiagStudentT::new(
                    (0..n).map(|_| 0.5 * rng.std_normal()).collect(),
                    (0..n).map(|_| 0.2 + rng.uniform_open()).collect(),
                    2.0 + 3.0 * rng.uniform_open(),
                )
                .unwrap()
            };
            layer.q_omega = perturb(&layer.q_omega, rng);
            layer.q_w = perturb(&layer.q_w, rng);
        }
        net
    }

    #[test]
    fn feature_examples() {
        assert!((feature(&[0.0], &[3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((feature(&[PI], &[1.0]).unwrap() + 0.5).abs() < 1e-15);
        assert!((feature(&[PI / 4.0], &[1.0]).unwrap() - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(feature(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn layer_forward_examples() {
        let s = 4;
        let sampled = SampledLayer {
            omega_bank: Tensor::zeros(vec![s, 2]),
            w_draws: vec![Tensor::full(vec![1, s], 1.0 / s as f64)],
        };
        assert!((layer_forward(&[0.3, -2.0], &sampled).unwrap()[0] - 0.5).abs() < 1e-15);
        let zero = SampledLayer {
            omega_bank: Tensor::full(vec![s, 2], 0.7),
            w_draws: vec![Tensor::zeros(vec![3, s])],
        };
        assert_eq!(layer_forward(&[1.0, 1.0], &zero).unwrap(), vec![0.0; 3]);
        assert!(layer_forward(&[1.0], &zero).is_err());
    }

    #[test]
    fn layer_forward_averages_draws() {
        let mut rng = RngStream::new(3);
        let (s, d, eta) = (6, 3, 2);
        let bank = random_tensor(&mut rng, s, d, 1.0);
        let draws: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, eta, s, 1.0)).collect();
        let h = [0.2, -0.4, 1.1];
        let got = layer_forward(&h, &SampledLayer { omega_bank: bank.clone(), w_draws: draws.clone() }).unwrap();
        let mut want = vec![0.0; eta];
        for w in &draws {
            for r in 0..eta {
                for c in 0..s {
                    let z: f64 = (0..d).map(|i| h[i] * bank.get2(c, i)).sum();
                    want[r] += w.get2(r, c) * (0.5 * z.cos() + 0.5 * z.sin()) / 3.0;
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        let batch = layer_forward_batch(
            &Tensor::matrix(1, d, h.to_vec()).unwrap(),
            &bank,
            &SampledLayer { omega_bank: bank.clone(), w_draws: draws }.w_mean(),
            eta,
        );
        for (a, b) in batch.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_noise_gives_mean_network() {
        let mut rng = RngStream::new(5);
        let st = Structure { layers: 2, eta: 3, bank_size: 7 };
        let net = random_net(&mut rng, Task::Regression { sigma_y2: 0.1, out_dim: 1 }, st, 4);
        let x = random_tensor(&mut rng, 5, 4, 1.0);
        let noise: Vec<LayerNoise> = net.layers.iter().map(|l| LayerNoise::zeros(l, 2)).collect();
        let (out, sampled) = forward_train(&x, &net, &noise).unwrap();
        for (layer, s) in net.layers.iter().zip(&sampled) {
            for r in 0..layer.bank_size {
                assert_eq!(s.omega_bank.row(r), layer.q_omega.mu());
            }
            for w in &s.w_draws {
                assert_eq!(w.data(), layer.q_w.mu());
            }
        }
        assert_eq!(out, forward_train(&x, &net, &noise).unwrap().0);
    }

    #[test]
    fn prior_init_outputs_zero() {
        let net = Network::from_prior(
            Structure { layers: 1, eta: 2, bank_size: 5 },
            3,
            Task::Regression { sigma_y2: 0.1, out_dim: 1 },
            2.1,
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap();
        let noise = vec![LayerNoise::zeros(&net.layers[0], 1)];
        let (out, _) = forward_train(&x, &net, &noise).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn graph_forward_matches_plain() {
        let mut rng = RngStream::new(11);
        let st = Structure { layers: 2, eta: 3, bank_size: 6 };
        let net = random_net(&mut rng, Task::Classification { num_classes: 3 }, st, 4);
        let x = random_tensor(&mut rng, 5, 4, 1.0);
        let noise = draw_train_noise(&net, &mut rng, 4);
        let (plain, _) = forward_train(&x, &net, &noise).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let vars = leaf_vars(&mut g, &net);
        let out = forward_train_graph(&mut g, xv, &net, &vars, &noise).unwrap();
        for (a, b) in g.value(out).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn leaf_vars(g: &mut Graph, net: &Network) -> Vec<LayerVars> {
        let post = |g: &mut Graph, q: &DiagStudentT| PosteriorVars {
            mu: g.leaf(Tensor::vector(q.mu().to_vec())),
            sigma: g.leaf(Tensor::vector(q.sigma2().iter().map(|s| s.sqrt()).collect())),
            nu: g.scalar(q.nu()),
        };
        net.layers
            .iter()
            .map(|l| LayerVars {
                omega: Some(post(g, &l.q_omega)),
                w: post(g, &l.q_w),
            })
            .collect()
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(17);
        let st = Structure { layers: 2, eta: 2, bank_size: 5 };
        let task = Task::Regression { sigma_y2: 0.3, out_dim: 1 };
        let net = random_net(&mut rng, task, st, 3);
        let x = random_tensor(&mut rng, 4, 3, 1.0);
        let y = random_tensor(&mut rng, 4, 1, 1.0);
        let noise = draw_train_noise(&net, &mut rng, 2);
        let eval = |net: &Network| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let vars = leaf_vars(&mut g, net);
            let out = forward_train_graph(&mut g, xv, net, &vars, &noise).unwrap();
            let ll = batch_log_lik_graph(&mut g, out, &Targets::Regression(&y), &net.task).unwrap();
            (g, vars, ll)
        };
        let (g, vars, ll) = eval(&net);
        let grads = g.backward(ll).unwrap();
        let h = 1e-6;
        for l in 0..2 {
            for i in 0..net.layers[l].d_in {
                let shift = |d: f64| {
                    let mut n = net.clone();
                    let q = &n.layers[l].q_omega;
                    let mut mu = q.mu().to_vec();
                    mu[i] += d;
                    n.layers[l].q_omega = DiagStudentT::new(mu, q.sigma2().to_vec(), q.nu()).unwrap();
                    let (g, _, ll) = eval(&n);
                    g.item(ll)
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                let an = grads.wrt(vars[l].omega.unwrap().mu).data()[i];
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "layer {l} mu_omega[{i}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn degenerate_posterior_predicts_mean_network() {
        let mut rng = RngStream::new(23);
        let st = Structure { layers: 2, eta: 3, bank_size: 8 };
        let mut net = random_net(&mut rng, Task::Regression { sigma_y2: 0.1, out_dim: 1 }, st, 3);
        for layer in &mut net.layers {
            for q in [&mut layer.q_omega, &mut layer.q_w] {
                *q = DiagStudentT::new(q.mu().to_vec(), vec![1e-24; q.dim()], q.nu()).unwrap();
            }
        }
        let x = random_tensor(&mut rng, 6, 3, 1.0);
        let mean = mean_forward(&x, &net, &mut rng).unwrap();
        let pred = forward_predict(&x, &net, &RngStream::new(1), 5, 10, Execution::Sequential).unwrap();
        let Prediction::Regression { mean: p } = pred else { panic!() };
        for (a, b) in p.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn classification_probabilities_normalized() {
        let mut rng = RngStream::new(29);
        let st = Structure { layers: 2, eta: 3, bank_size: 8 };
        let net = random_net(&mut rng, Task::Classification { num_classes: 4 }, st, 3);
        let x = random_tensor(&mut rng, 6, 3, 1.0);
        let pred = forward_predict(&x, &net, &RngStream::new(2), 20, 5, Execution::Parallel).unwrap();
        let Prediction::Classification { probs, labels } = pred else { panic!() };
        for i in 0..6 {
            let row = probs.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(labels[i], argmax(row));
        }
    }

    #[test]
    fn prediction_independent_of_execution() {
        let mut rng = RngStream::new(31);
        let st = Structure { layers: 2, eta: 2, bank_size: 5 };
        let net = random_net(&mut rng, Task::Regression { sigma_y2: 0.1, out_dim: 1 }, st, 3);
        let x = random_tensor(&mut rng, 4, 3, 1.0);
        let a = forward_predict(&x, &net, &RngStream::new(9), 16, 3, Execution::Sequential).unwrap();
        let b = forward_predict(&x, &net, &RngStream::new(9), 16, 3, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_converges() {
        let mut rng = RngStream::new(37);
        let st = Structure { layers: 1, eta: 1, bank_size: 4 };
        let net = random_net(&mut rng, Task::Regression { sigma_y2: 0.1, out_dim: 1 }, st, 2);
        let x = Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap();
        let run = |rounds, seed| {
            let Prediction::Regression { mean } =
                forward_predict(&x, &net, &RngStream::new(seed), rounds, 1, Execution::Parallel).unwrap()
            else {
                panic!()
            };
            mean.item()
        };
        let big = run(10_000, 1);
        let small: Vec<f64> = (0..8).map(|s| run(1_000, 100 + s)).collect();
        let m = small.iter().sum::<f64>() / 8.0;
        let sd = (small.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 7.0).sqrt();
        for v in &small {
            assert!((v - big).abs() < 5.0 * sd + 1e-12, "{v} vs {big} (sd {sd})");
        }
        assert!((m - big).abs() < 4.0 * sd / 8f64.sqrt() + 1e-12);
    }

    #[test]
    fn log_lik_examples() {
        let s2 = (-2f64).exp();
        let v = log_lik_regression(&[0.4], &[0.4], s2).unwrap();
        assert!((v - 0.081_061_466_795_327_3).abs() < 1e-12);
        let a = log_lik_regression(&[1.0], &[0.0], s2).unwrap();
        let b = log_lik_regression(&[2f64.sqrt()], &[0.0], s2).unwrap();
        assert!(((a - b) - 1.0 / (2.0 * s2)).abs() < 1e-12);
        let three = log_lik_regression(&[1.0, 2.0, 3.0], &[0.5, 0.0, 3.5], 0.7).unwrap();
        let parts: f64 = [(1.0, 0.5), (2.0, 0.0), (3.0, 3.5)]
            .iter()
            .map(|(y, m)| log_lik_regression(&[*y], &[*m], 0.7).unwrap())
            .sum();
        assert!((three - parts).abs() < 1e-12);
        assert!(log_lik_regression(&[1.0], &[1.0], 0.0).is_err());

        assert!((log_lik_classification(2, &[0.3; 5]).unwrap() + 5f64.ln()).abs() < 1e-15);
        assert!(log_lik_classification(0, &[1e6, 0.0]).unwrap().abs() < 1e-300);
        assert!(log_lik_classification(2, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn graph_log_lik_matches_plain() {
        let mut rng = RngStream::new(41);
        let out = random_tensor(&mut rng, 5, 3, 2.0);
        let labels = [0, 2, 1, 1, 0];
        let mut g = Graph::new();
        let o = g.leaf(out.clone());
        let ll = batch_log_lik_graph(&mut g, o, &Targets::Classification(&labels), &Task::Classification { num_classes: 3 })
            .unwrap();
        let want: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, l)| log_lik_classification(*l, out.row(i)).unwrap())
            .sum::<f64>()
            / 5.0;
        assert!((g.item(ll) - want).abs() < 1e-12);
    }

    #[test]
    fn frozen_prior_banks_are_used() {
        let st = Structure { layers: 2, eta: 2, bank_size: 4 };
        let net = Network::from_prior(st, 3, Task::Regression { sigma_y2: 0.1, out_dim: 1 }, 2.1)
            .unwrap()
            .with_prior_banks(OmegaSource::FrozenPrior, &mut RngStream::new(4));
        let mut rng = RngStream::new(5);
        let noise = draw_train_noise(&net, &mut rng, 2);
        let (_, sampled) = forward_train(&Tensor::zeros(vec![1, 3]), &net, &noise).unwrap();
        for (l, s) in net.layers.iter().zip(&sampled) {
            assert_eq!(Some(&s.omega_bank), l.frozen_bank.as_ref());
        }
    }

    proptest! {
        #[test]
        fn feature_is_bounded(x in proptest::collection::vec(-1e3..1e3f64, 3), w in proptest::collection::vec(-1e3..1e3f64, 3)) {
            prop_assert!(feature(&x, &w).unwrap().abs() <= FRAC_1_SQRT_2 + 1e-15);
        }

        #[test]
        fn bank_relabeling_is_invariant(seed in 0u64..1000) {
            let mut rng = RngStream::new(seed);
            let (s, d, eta) = (5, 3, 2);
            let bank = random_tensor(&mut rng, s, d, 1.0);
            let w = random_tensor(&mut rng, eta, s, 1.0);
            let perm = rng.permutation(s);
            let bank_p = bank.select_rows(&perm);
            let wt = w.transpose().unwrap().select_rows(&perm).transpose().unwrap();
            let h = [0.1, -0.7, 2.0];
            let a = layer_forward(&h, &SampledLayer { omega_bank: bank, w_draws: vec![w] }).unwrap();
            let b = layer_forward(&h, &SampledLayer { omega_bank: bank_p, w_draws: vec![wt] }).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
