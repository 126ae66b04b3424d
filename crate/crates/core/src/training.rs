//! Variational objective, Adam on unconstrained parameters, and the fit loop.
//!
//! Each posterior is stored as (μ, ρ, ρ_ν) with σ = softplus(ρ) (so
//! σ² = softplus(ρ)²) and ν = softplus(ρ_ν) + [`NU_FLOOR`]. The loss of a
//! minibatch of size B is
//!
//! ```text
//! Σ_layers [D(q_ω) + D(q_W)] − Λ · (1/B) Σ_batch log p(y | x)
//! ```
//!
//! with Λ = N or Λ = B depending on [`LikelihoodScale`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    batch_log_lik_graph, draw_train_noise, forward_train_graph, LayerNoise, LayerVars, Network, OmegaSource,
    PosteriorVars, Structure, Targets,
};
use crate::numerics::special::{softplus, softplus_inv};
use crate::numerics::{Graph, RngStream, Tensor, Var};
use crate::tdist::DiagStudentT;
use crate::tdivergence::dt_closed_graph;

/// Lower bound added to softplus(ρ_ν).
pub const NU_FLOOR: f64 = 0.1;

/// Number of unconstrained parameter groups per layer.
pub const GROUPS_PER_LAYER: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodScale {
    /// Λ = N: the minibatch mean is scaled to the full dataset.
    #[default]
    FullDataset,
    /// Λ = B.
    BatchMean,
}

/// How the posterior degrees of freedom are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DofMode {
    /// ν_θ stays at the prior value.
    #[default]
    Tied,
    /// ν_θ is optimized with the other parameters.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Bank size S.
    pub bank_size: usize,
    pub k_train: usize,
    pub k_eval: usize,
    /// Posterior Monte-Carlo rounds at prediction time.
    pub mc_rounds: usize,
    pub prior_nu: f64,
    pub sigma_y2: f64,
    pub seed: u64,
    pub likelihood_scale: LikelihoodScale,
    pub dof: DofMode,
    /// Training stops once the best epoch objective has not improved by
    /// this fraction for `early_stop_window` consecutive epochs.
    pub early_stop_tol: f64,
    /// Patience in epochs; 0 disables early stopping.
    pub early_stop_window: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bank_size: 100,
            k_train: 10,
            k_eval: 100,
            mc_rounds: 20,
            prior_nu: 2.1,
            sigma_y2: (-2f64).exp(),
            seed: 0,
            likelihood_scale: LikelihoodScale::FullDataset,
            dof: DofMode::Tied,
            early_stop_tol: 1e-4,
            early_stop_window: 20,
        }
    }
}

impl FitConfig {
    /// One message per violated field.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut positive_count = |name: &str, x: usize| {
            if x == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        };
        positive_count("batch_size", self.batch_size);
        positive_count("bank_size", self.bank_size);
        positive_count("k_train", self.k_train);
        positive_count("k_eval", self.k_eval);
        positive_count("mc_rounds", self.mc_rounds);
        let mut positive = |name: &str, x: f64| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} = {x} must be positive and finite"));
            }
        };
        positive("learning_rate", self.learning_rate);
        positive("adam_eps", self.adam_eps);
        positive("prior_nu", self.prior_nu);
        positive("sigma_y2", self.sigma_y2);
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.early_stop_tol >= 0.0) {
            v.push(format!("early_stop_tol = {} must be nonnegative", self.early_stop_tol));
        }
        v
    }
}

/// Unconstrained parameters, [`GROUPS_PER_LAYER`] groups per layer in the
/// order μ_ω, ρ_ω, ρ_νω, μ_W, ρ_W, ρ_νW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawParams {
    pub groups: Vec<Vec<f64>>,
}

/// Names of the groups within a layer, in storage order.
pub const GROUP_NAMES: [&str; GROUPS_PER_LAYER] = ["mu_omega", "rho_omega", "rho_nu_omega", "mu_w", "rho_w", "rho_nu_w"];

impl RawParams {
    pub fn from_network(net: &Network) -> Self {
        let raw = |q: &DiagStudentT| {
            [
                q.mu().to_vec(),
                q.sigma2().iter().map(|s| softplus_inv(s.sqrt())).collect(),
                vec![softplus_inv(q.nu() - NU_FLOOR)],
            ]
        };
        let groups = net
            .layers
            .iter()
            .flat_map(|l| raw(&l.q_omega).into_iter().chain(raw(&l.q_w)))
            .collect();
        Self { groups }
    }

    /// Writes the constrained values into a copy of `template`.
    pub fn to_network(&self, template: &Network, dof: DofMode) -> Result<Network> {
        let mut net = template.clone();
        let post = |g: &[Vec<f64>]| -> Result<DiagStudentT> {
            let nu = match dof {
                DofMode::Tied => template.prior_nu,
                DofMode::Learned => softplus(g[2][0]) + NU_FLOOR,
            };
            let s2 = g[1].iter().map(|r| softplus(*r).powi(2)).collect();
            DiagStudentT::new(g[0].clone(), s2, nu)
                .map_err(|e| Error::Numerical(format!("parameters left the valid region: {e}")))
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let g = &self.groups[l * GROUPS_PER_LAYER..(l + 1) * GROUPS_PER_LAYER];
            if template.infers_omega() {
                layer.q_omega = post(&g[0..3])?;
            }
            layer.q_w = post(&g[3..6])?;
        }
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self.groups.iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A network whose posteriors equal the prior t(0, I, ν).
pub fn init_from_prior(structure: Structure, input_dim: usize, task: crate::model::Task, cfg: &FitConfig) -> Result<Network> {
    Network::from_prior(structure, input_dim, task, cfg.prior_nu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &RawParams) -> Self {
        let z = params.zeros_like().groups;
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut RawParams, grads: &RawParams, state: &mut AdamState, cfg: &FitConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.adam_beta1.powi(t);
    let c2 = 1.0 - cfg.adam_beta2.powi(t);
    for (((p, g), m), v) in params
        .groups
        .iter_mut()
        .zip(&grads.groups)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Loss, its two components, and the gradient for every raw group.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub divergence: f64,
    /// Mean per-example log-likelihood of the batch.
    pub log_lik: f64,
    pub grads: RawParams,
}

/// Evaluates the minibatch objective at `raw`, with `noise` fixed.
///
/// `template` supplies the structure, task and bank source; `n_total` is N
/// for the full-dataset likelihood scale.
pub fn objective(
    raw: &RawParams,
    template: &Network,
    x: &Tensor,
    targets: &Targets<'_>,
    noise: &[LayerNoise],
    cfg: &FitConfig,
    n_total: usize,
) -> Result<ObjectiveEval> {
    let b = x.rows();
    if b == 0 {
        return Err(Error::Usage("objective needs a nonempty batch".into()));
    }
    let mut g = Graph::new();
    let mut leaves: Vec<Option<Var>> = vec![None; raw.groups.len()];
    let mut post = |g: &mut Graph, base: usize| {
        let mu = g.leaf(Tensor::vector(raw.groups[base].clone()));
        let rho = g.leaf(Tensor::vector(raw.groups[base + 1].clone()));
        let sigma = g.softplus(rho);
        leaves[base] = Some(mu);
        leaves[base + 1] = Some(rho);
        let nu = match cfg.dof {
            DofMode::Tied => g.scalar(template.prior_nu),
            DofMode::Learned => {
                let r = g.leaf(Tensor::vector(raw.groups[base + 2].clone()));
                leaves[base + 2] = Some(r);
                let sp = g.softplus(r);
                g.add_scalar(sp, NU_FLOOR)
            }
        };
        PosteriorVars { mu, sigma, nu }
    };
    let mut vars = Vec::with_capacity(template.layers.len());
    let mut div_terms = Vec::new();
    for l in 0..template.layers.len() {
        let base = l * GROUPS_PER_LAYER;
        let omega = if template.infers_omega() {
            let p = post(&mut g, base);
            div_terms.push(dt_closed_graph(&mut g, p.mu, p.sigma, p.nu, template.prior_nu));
            Some(p)
        } else {
            None
        };
        let w = post(&mut g, base + 3);
        div_terms.push(dt_closed_graph(&mut g, w.mu, w.sigma, w.nu, template.prior_nu));
        vars.push(LayerVars { omega, w });
    }
    let mut div = div_terms[0];
    for d in &div_terms[1..] {
        div = g.add(div, *d);
    }
    let xv = g.leaf(x.clone());
    let out = forward_train_graph(&mut g, xv, template, &vars, noise)?;
    let ll = batch_log_lik_graph(&mut g, out, targets, &template.task)?;
    let scale = match cfg.likelihood_scale {
        LikelihoodScale::FullDataset => n_total as f64,
        LikelihoodScale::BatchMean => b as f64,
    };
    let data_term = g.mul_scalar(ll, -scale);
    let loss = g.add(div, data_term);

    let (dv, lv) = (g.item(div), g.item(ll));
    if !dv.is_finite() || !lv.is_finite() {
        let node = g
            .first_non_finite()
            .map_or(String::new(), |(i, op)| format!("; first non-finite node {i} ({op})"));
        return Err(Error::Numerical(format!(
            "non-finite objective: divergence {dv}, mean log-likelihood {lv}{node}"
        )));
    }
    let adj = g.backward(loss)?;
    let mut grads = raw.zeros_like();
    for (slot, leaf) in grads.groups.iter_mut().zip(&leaves) {
        if let Some(v) = leaf {
            if let Some(a) = adj.wrt_slice(*v) {
                slot.copy_from_slice(a);
            }
        }
    }
    Ok(ObjectiveEval {
        loss: g.item(loss),
        divergence: dv,
        log_lik: lv,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-iteration loss.
    pub objective: Vec<f64>,
    /// Per-iteration divergence sum.
    pub divergence: Vec<f64>,
    /// Per-iteration mean batch log-likelihood.
    pub log_lik: Vec<f64>,
    /// Mean loss of each completed epoch.
    pub epoch_objective: Vec<f64>,
    pub iterations: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Iterations whose loss was non-finite and skipped.
    pub skipped_iterations: Vec<usize>,
    pub wall_seconds: f64,
}

/// Trains a network on a standardized dataset.
pub fn fit(train: &Dataset, cfg: &FitConfig, structure: Structure, source: OmegaSource) -> Result<(Network, TrainReport)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if train.is_empty() {
        return Err(Error::Usage("cannot fit an empty dataset".into()));
    }
    let started = Instant::now();
    let root = RngStream::new(cfg.seed);
    let mut shuffle = root.split(1);
    let mut noise_rng = root.split(2);
    let mut bank_rng = root.split(3);

    let task = train.task(cfg.sigma_y2);
    let init = init_from_prior(structure, train.dim(), task, cfg)?;
    let template = match source {
        OmegaSource::Inferred => init,
        other => init.with_prior_banks(other, &mut bank_rng),
    };
    let mut raw = RawParams::from_network(&template);
    let mut adam = AdamState::new(&raw);
    let mut net = template.clone();

    let n = train.len();
    let b = cfg.batch_size.min(n);
    let mut report = TrainReport {
        objective: Vec::new(),
        divergence: Vec::new(),
        log_lik: Vec::new(),
        epoch_objective: Vec::new(),
        iterations: 0,
        epochs_run: 0,
        stopped_early: false,
        skipped_iterations: Vec::new(),
        wall_seconds: 0.0,
    };
    let mut consecutive_bad = 0;
    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    'epochs: for epoch in 0..cfg.epochs {
        let perm = shuffle.permutation(n);
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for chunk in perm.chunks(b) {
            let batch = train.select(chunk);
            let noise = draw_train_noise(&net, &mut noise_rng, cfg.k_train);
            let iteration = report.iterations;
            report.iterations += 1;
            match objective(&raw, &template, &batch.features, &batch.targets(), &noise, cfg, n) {
                Ok(eval) => {
                    consecutive_bad = 0;
                    report.objective.push(eval.loss);
                    report.divergence.push(eval.divergence);
                    report.log_lik.push(eval.log_lik);
                    epoch_sum += eval.loss;
                    epoch_count += 1;
                    adam_step(&mut raw, &eval.grads, &mut adam, cfg);
                    net = raw.to_network(&template, cfg.dof)?;
                }
                Err(Error::Numerical(msg)) => {
                    consecutive_bad += 1;
                    report.skipped_iterations.push(iteration);
                    log::warn!("iteration {iteration}: {msg}");
                    if consecutive_bad >= 2 {
                        let last = report.objective.last().map_or("none".to_string(), |v| format!("{v:e}"));
                        return Err(Error::Numerical(format!(
                            "training diverged at epoch {epoch}, iteration {iteration} (two consecutive \
                             non-finite losses; last finite loss {last}): {msg}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        report.epochs_run += 1;
        if epoch_count > 0 {
            report.epoch_objective.push(epoch_sum / epoch_count as f64);
        }
        if epoch_count > 0 && cfg.early_stop_window > 0 {
            let current = epoch_sum / epoch_count as f64;
            if !best.is_finite() || current < best - cfg.early_stop_tol * best.abs() {
                best = current;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_window {
                    report.stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((net, report))
}
