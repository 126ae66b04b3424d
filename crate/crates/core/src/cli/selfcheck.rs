//! Quick numerical property checks run by `dtbks selfcheck`.

use crate::error::Result;
use crate::model::{draw_train_noise, Network, Structure, Targets, Task};
use crate::numerics::quadrature::integrate_real_line;
use crate::numerics::special::{digamma, ln_gamma};
use crate::numerics::{RngStream, Tensor};
use crate::tdist::DiagStudentT;
use crate::tdivergence::{dt_closed, dt_quadrature, t_of};
use crate::training::{objective, DofMode, FitConfig, RawParams, GROUPS_PER_LAYER, GROUP_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

fn density_mass(q: &DiagStudentT) -> Result<f64> {
    let s = q.sigma2()[0].sqrt();
    let r = integrate_real_line(|h| q.pdf(&[h]).unwrap_or(f64::NAN), q.mu()[0], s, q.nu() + 1.0, &[], 1e-10)?;
    Ok(r.value)
}

/// Central differences of `f` for every coordinate of `raw`.
pub fn finite_difference(raw: &RawParams, h: f64, f: impl Fn(&RawParams) -> Result<f64>) -> Result<RawParams> {
    let mut out = raw.zeros_like();
    let mut probe = raw.clone();
    for g in 0..raw.groups.len() {
        for i in 0..raw.groups[g].len() {
            let x0 = raw.groups[g][i];
            probe.groups[g][i] = x0 + h;
            let up = f(&probe)?;
            probe.groups[g][i] = x0 - h;
            let down = f(&probe)?;
            probe.groups[g][i] = x0;
            out.groups[g][i] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Worst per-group relative gap ‖analytic − fd‖∞ / ‖fd‖∞ on a small network
/// with learned degrees of freedom, and the name of that group.
pub fn gradient_gap(seed: u64) -> Result<(f64, String)> {
    let mut rng = RngStream::new(seed);
    let structure = Structure { layers: 2, eta: 2, bank_size: 5 };
    let task = Task::Regression { sigma_y2: 0.3, out_dim: 1 };
    let template = Network::from_prior(structure, 3, task, 2.1)?;
    let mut raw = RawParams::from_network(&template);
    for g in &mut raw.groups {
        g.iter_mut().for_each(|v| *v += 0.3 * rng.std_normal());
    }
    let cfg = FitConfig { dof: DofMode::Learned, ..FitConfig::default() };
    let net = raw.to_network(&template, cfg.dof)?;
    let noise = draw_train_noise(&net, &mut rng, 2);
    let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.std_normal()).collect())?;
    let y = Tensor::matrix(4, 1, (0..4).map(|_| rng.std_normal()).collect())?;
    let t = Targets::Regression(&y);
    let eval = objective(&raw, &template, &x, &t, &noise, &cfg, 4)?;
    let fd = finite_difference(&raw, 1e-5, |p| Ok(objective(p, &template, &x, &t, &noise, &cfg, 4)?.loss))?;
    let mut worst = (0.0, String::new());
    for (g, (a, b)) in eval.grads.groups.iter().zip(&fd.groups).enumerate() {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let gap = a.iter().zip(b).fold(0.0f64, |m, (u, v)| m.max((u - v).abs())) / scale;
        if gap >= worst.0 {
            worst = (gap, format!("layer {} {}", g / GROUPS_PER_LAYER, GROUP_NAMES[g % GROUPS_PER_LAYER]));
        }
    }
    Ok(worst)
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("lgamma recurrence", || {
            let mut worst = 0.0f64;
            let mut x = 0.05;
            while x < 60.0 {
                let lhs = ln_gamma(x + 1.0)?;
                worst = worst.max((lhs - ln_gamma(x)? - x.ln()).abs() / lhs.abs().max(1.0));
                x += 0.173;
            }
            Ok((worst < 1e-12, format!("max relative gap {worst:.2e}")))
        }),
        check("digamma is the derivative of lgamma", || {
            let mut worst = 0.0f64;
            for x in [0.2, 1.0, 2.1, 7.3, 40.0] {
                let h = 1e-5 * f64::max(x, 1.0);
                let fd = (ln_gamma(x + h)? - ln_gamma(x - h)?) / (2.0 * h);
                worst = worst.max((fd - digamma(x)?).abs());
            }
            Ok((worst < 1e-6, format!("max gap {worst:.2e}")))
        }),
        check("densities and escorts integrate to one", || {
            let mut worst = 0.0f64;
            for nu in [0.5, 2.1, 5.0, 50.0] {
                let q = DiagStudentT::new(vec![0.4], vec![1.7], nu)?;
                worst = worst.max((density_mass(&q)? - 1.0).abs());
                worst = worst.max((density_mass(&q.escort())? - 1.0).abs());
            }
            Ok((worst < 1e-6, format!("max mass error {worst:.2e}")))
        }),
        check("reparameterization at zero noise", || {
            let q = DiagStudentT::new(vec![0.3, -2.0], vec![0.5, 4.0], 2.1)?;
            let at_zero = q.reparam_sample(&[0.0, 0.0])?;
            Ok((at_zero == q.mu(), format!("{at_zero:?}")))
        }),
        check("divergence vanishes at the prior", || {
            let d = dt_closed(&DiagStudentT::standard(7, 2.1)?, 2.1)?.total;
            Ok((d.abs() <= 1e-10, format!("D = {d:.2e}")))
        }),
        check("closed form matches quadrature with shared dof", || {
            let mut worst = 0.0f64;
            for (mu, s2) in [(0.0, 1.0), (1.5, 0.3), (-2.0, 6.0)] {
                let q = DiagStudentT::new(vec![mu], vec![s2], 2.1)?;
                let c = dt_closed(&q, 2.1)?.total;
                let n = dt_quadrature(&q, &DiagStudentT::standard(1, 2.1)?, t_of(2.1)?)?;
                worst = worst.max((c - n).abs() / n.abs().max(1e-12));
            }
            Ok((worst < 1e-4, format!("max relative gap {worst:.2e}")))
        }),
        check("objective gradient matches finite differences", || {
            let (gap, group) = gradient_gap(11)?;
            Ok((gap < 1e-4, format!("worst group {group}: {gap:.2e}")))
        }),
        check("Gaussian limit", || {
            let q = DiagStudentT::new(vec![0.0], vec![1.0], 1e6)?;
            let mut worst = 0.0f64;
            for i in 0..=1000 {
                let x = -5.0 + 0.01 * f64::from(i);
                let normal = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                worst = worst.max((q.pdf(&[x])? - normal).abs());
            }
            Ok((worst < 1e-5, format!("sup gap {worst:.2e}")))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
