//! Diagonal multivariate Student's-t distributions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::check_df;
use crate::numerics::special::ln_gamma_unchecked;
use crate::numerics::{RngStream, Tensor};

/// Threshold on |t - 1| below which [`t_log`] uses the natural logarithm.
pub const T_LOG_UNIT_BAND: f64 = 1e-9;

/// t(μ, diag(σ²), ν) over ℝ^δ with a single scalar degrees-of-freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagStudentT {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
    nu: f64,
}

impl DiagStudentT {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>, nu: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::domain("DiagStudentT", "dimension must be at least 1"));
        }
        if mu.len() != sigma2.len() {
            return Err(Error::Usage(format!(
                "location has {} entries but scale has {}",
                mu.len(),
                sigma2.len()
            )));
        }
        if let Some((i, s)) = sigma2.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::domain("DiagStudentT", format!("scale[{i}] = {s} is not positive")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("DiagStudentT", "location must be finite"));
        }
        if !(nu > 0.0) || nu.is_nan() {
            return Err(Error::domain("DiagStudentT", format!("degrees of freedom {nu} must be positive")));
        }
        Ok(Self { mu, sigma2, nu })
    }

    /// The standard prior t(0, I, ν).
    pub fn standard(dim: usize, nu: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim], nu)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    fn check_dim(&self, len: usize, what: &str) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::Usage(format!("{what} has dimension {len}, distribution has {}", self.dim())))
        }
    }

    /// Squared Mahalanobis distance Σ (y_i - μ_i)² / σ²_i.
    pub fn mahalanobis(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y.len(), "point")?;
        Ok(y
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma2)
            .map(|((y, m), s)| (y - m) * (y - m) / s)
            .sum())
    }

    pub fn log_pdf(&self, y: &[f64]) -> Result<f64> {
        let d = self.mahalanobis(y)?;
        let delta = self.dim() as f64;
        let nu = self.nu;
        let log_det: f64 = self.sigma2.iter().map(|s| s.ln()).sum();
        Ok(ln_gamma_unchecked(0.5 * (nu + delta)) - ln_gamma_unchecked(0.5 * nu)
            - 0.5 * log_det
            - 0.5 * delta * (PI * nu).ln()
            - 0.5 * (nu + delta) * (d / nu).ln_1p())
    }

    pub fn pdf(&self, y: &[f64]) -> Result<f64> {
        self.log_pdf(y).map(f64::exp)
    }

    /// The escort t(μ, ν/(ν+2)·diag(σ²), ν+2), proportional to q^t with
    /// t = 1 + 2/(ν+1) in one dimension.
    pub fn escort(&self) -> Self {
        let f = self.nu / (self.nu + 2.0);
        Self {
            mu: self.mu.clone(),
            sigma2: self.sigma2.iter().map(|s| f * s).collect(),
            nu: self.nu + 2.0,
        }
    }

    /// μ + (ν/(ν+2))^½ σ ⊙ ε: a draw from the escort when ε is standard-t
    /// noise with ν + 2 degrees of freedom.
    pub fn reparam_sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(eps.len(), "noise")?;
        let c = (self.nu / (self.nu + 2.0)).sqrt();
        Ok(self
            .mu
            .iter()
            .zip(&self.sigma2)
            .zip(eps)
            .map(|((m, s), e)| m + c * s.sqrt() * e)
            .collect())
    }

    /// μ + σ ⊙ ε: a draw from the distribution itself when ε is standard-t
    /// noise with ν degrees of freedom.
    pub fn location_scale_sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(eps.len(), "noise")?;
        Ok(self
            .mu
            .iter()
            .zip(&self.sigma2)
            .zip(eps)
            .map(|((m, s), e)| m + s.sqrt() * e)
            .collect())
    }

    /// `n` noise vectors (rows of an n x δ tensor) of independent unit-scale
    /// Student's-t components with ν + 2 degrees of freedom, for use with
    /// [`DiagStudentT::reparam_sample`].
    pub fn draw_noise(&self, rng: &mut RngStream, n: usize) -> Tensor {
        draw_std_t_matrix(rng, self.nu + 2.0, n, self.dim())
    }

    /// `n` noise rows with ν degrees of freedom, for posterior draws.
    pub fn draw_posterior_noise(&self, rng: &mut RngStream, n: usize) -> Tensor {
        draw_std_t_matrix(rng, self.nu, n, self.dim())
    }
}

pub(crate) fn draw_std_t_matrix(rng: &mut RngStream, df: f64, rows: usize, cols: usize) -> Tensor {
    debug_assert!(check_df(df).is_ok());
    let data = (0..rows * cols).map(|_| rng.std_t(df)).collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}

/// Deformed logarithm (x^(1-t) - 1)/(1 - t), equal to ln x at t = 1.
pub fn t_log(x: f64, t: f64) -> Result<f64> {
    if !(x > 0.0) || x.is_nan() {
        return Err(Error::domain("t_log", format!("argument {x} must be positive")));
    }
    Ok(t_log_unchecked(x, t))
}

pub(crate) fn t_log_unchecked(x: f64, t: f64) -> f64 {
    if (t - 1.0).abs() < T_LOG_UNIT_BAND {
        x.ln()
    } else {
        let a = 1.0 - t;
        (a * x.ln()).exp_m1() / a
    }
}
