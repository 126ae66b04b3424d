//! The t-divergence between a diagonal Student's-t posterior and the standard
//! prior t(0, I, ν).
//!
//! [`dt_closed`] is the per-dimension closed form used as the training
//! regularizer, [`dt_closed_graph`] is the same expression on the tape, and
//! [`dt_quadrature`] evaluates the defining integral
//! ∫ q̃ log_t q − ∫ q̃ log_t p directly in one dimension.
//!
//! The closed form is exact when the posterior and prior share the same
//! degrees of freedom. When they differ it is a different quantity from the
//! integral (and can be negative); [`oracle_sweep`] measures how far apart the
//! two are over a parameter box.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::quadrature::integrate_real_line;
use crate::numerics::special::ln_gamma_unchecked;
use crate::numerics::{Graph, RngStream, Var};
use crate::par::Execution;
use crate::tdist::{t_log_unchecked, DiagStudentT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceTerms {
    pub total: f64,
    pub per_dimension: Vec<f64>,
    pub t_used: f64,
    pub psi_q: Vec<f64>,
    pub psi_p: f64,
}

fn check_positive(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} = {v} must be positive and finite")))
    }
}

/// t = 2/(1 + ν_θ) + 1.
pub fn t_of(nu_theta: f64) -> Result<f64> {
    check_positive("t_of", "nu_theta", nu_theta)?;
    Ok(2.0 / (1.0 + nu_theta) + 1.0)
}

/// ln of the Student's-t normalizer Γ((ν+1)/2) / (Γ(ν/2) (πν)^½).
fn ln_t_normalizer(nu: f64) -> f64 {
    ln_gamma_unchecked(0.5 * (nu + 1.0)) - ln_gamma_unchecked(0.5 * nu) - 0.5 * (PI * nu).ln()
}

/// Ψ_q for one dimension with scale σ (a standard deviation, not a variance).
pub fn psi_q(nu_theta: f64, sigma: f64) -> Result<f64> {
    check_positive("psi_q", "nu_theta", nu_theta)?;
    check_positive("psi_q", "sigma", sigma)?;
    Ok((-2.0 / (nu_theta + 1.0) * (ln_t_normalizer(nu_theta) - sigma.ln())).exp())
}

/// Ψ_p for the unit-scale prior.
pub fn psi_p(nu: f64) -> Result<f64> {
    check_positive("psi_p", "nu", nu)?;
    Ok((-2.0 / (nu + 1.0) * ln_t_normalizer(nu)).exp())
}

/// Closed-form t-divergence of `q` from t(0, I, `prior_nu`), with t taken from
/// the posterior degrees of freedom.
pub fn dt_closed(q: &DiagStudentT, prior_nu: f64) -> Result<DivergenceTerms> {
    let nu_q = q.nu();
    let t = t_of(nu_q)?;
    let pp = psi_p(prior_nu)?;
    let inv_one_minus_t = 1.0 / (1.0 - t);
    let mut psi = Vec::with_capacity(q.dim());
    let mut per = Vec::with_capacity(q.dim());
    for (m, s2) in q.mu().iter().zip(q.sigma2()) {
        let pq = psi_q(nu_q, s2.sqrt())?;
        let term = inv_one_minus_t * (pq * (1.0 + 1.0 / nu_q) - pp * (1.0 + (s2 + m * m) / prior_nu));
        psi.push(pq);
        per.push(term);
    }
    Ok(DivergenceTerms {
        total: per.iter().sum(),
        per_dimension: per,
        t_used: t,
        psi_q: psi,
        psi_p: pp,
    })
}

/// [`dt_closed`] on the tape. `sigma` holds standard deviations (a vector),
/// `nu` is a scalar node; returns the scalar total.
pub fn dt_closed_graph(g: &mut Graph, mu: Var, sigma: Var, nu: Var, prior_nu: f64) -> Var {
    let pp = psi_p(prior_nu).expect("prior degrees of freedom validated by caller");
    // ln normalizer of q (scalar)
    let nu_p1 = g.add_scalar(nu, 1.0);
    let half_nu_p1 = g.mul_scalar(nu_p1, 0.5);
    let half_nu = g.mul_scalar(nu, 0.5);
    let lg_a = g.lgamma(half_nu_p1);
    let lg_b = g.lgamma(half_nu);
    let pi_nu = g.mul_scalar(nu, PI);
    let ln_pi_nu = g.ln(pi_nu);
    let half_ln_pi_nu = g.mul_scalar(ln_pi_nu, 0.5);
    let lc = g.sub(lg_a, lg_b);
    let lc = g.sub(lc, half_ln_pi_nu);
    // Ψ_qi = exp(-2/(ν+1) · (lc - ln σ_i))
    let ln_sigma = g.ln(sigma);
    let inner = g.sub(lc, ln_sigma);
    let inv_nu_p1 = g.pow_scalar(nu_p1, -1.0);
    let expo = g.mul_scalar(inv_nu_p1, -2.0);
    let ln_psi = g.mul(inner, expo);
    let psi = g.exp(ln_psi);
    // Ψ_qi (1 + 1/ν) - Ψ_p (1 + (σ² + μ²)/ν_prior)
    let inv_nu = g.pow_scalar(nu, -1.0);
    let a = g.add_scalar(inv_nu, 1.0);
    let left = g.mul(psi, a);
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let moment = g.add(s2, m2);
    let right = g.mul_scalar(moment, pp / prior_nu);
    let right = g.add_scalar(right, pp);
    let diff = g.sub(left, right);
    // 1/(1 - t) = -(ν + 1)/2
    let coef = g.mul_scalar(nu_p1, -0.5);
    let terms = g.mul(diff, coef);
    g.sum(terms)
}

/// Decay exponent α of |h|^-α for q̃ (log_t q − log_t p) in one dimension.
fn divergence_tail_exponent(nu_q: f64, nu_p: f64, t: f64) -> f64 {
    (nu_q + 1.0) * t - (nu_q.max(nu_p) + 1.0) * (t - 1.0)
}

/// Definitional t-divergence between two one-dimensional Student's-t
/// densities, by quadrature over the real line (absolute tolerance 1e-8).
pub fn dt_quadrature(q: &DiagStudentT, p: &DiagStudentT, t: f64) -> Result<f64> {
    if q.dim() != 1 || p.dim() != 1 {
        return Err(Error::Usage(format!(
            "dt_quadrature needs one-dimensional densities, got {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    if !(t > 1.0) || !t.is_finite() {
        return Err(Error::domain("dt_quadrature", format!("t = {t} must exceed 1")));
    }
    let (mq, sq) = (q.mu()[0], q.sigma2()[0].sqrt());
    let (mp, sp) = (p.mu()[0], p.sigma2()[0].sqrt());
    let spread = sq.max(sp).max((mp - mq).abs());
    let ln_q = |h: f64| q.log_pdf(&[h]).expect("1-d");
    let ln_p = |h: f64| p.log_pdf(&[h]).expect("1-d");

    let peak = (t * ln_q(mq)).exp() * sq;
    let z = integrate_real_line(
        |h| (t * ln_q(h)).exp(),
        mq,
        spread,
        (q.nu() + 1.0) * t,
        &[mp],
        1e-11 * peak,
    )
    .map_err(|e| Error::Numerical(format!("escort normalizer for q={q:?}: {e}")))?;

    let alpha = divergence_tail_exponent(q.nu(), p.nu(), t);
    let num = integrate_real_line(
        |h| {
            let lq = ln_q(h);
            let lp = ln_p(h);
            (t * lq).exp() * (t_log_unchecked(lq.exp(), t) - t_log_from_ln(lp, t))
        },
        mq,
        spread,
        alpha,
        &[mp],
        1e-9 * z.value,
    )
    .map_err(|e| {
        Error::Numerical(format!(
            "t-divergence integral for q={q:?}, p={p:?}, t={t} (tail exponent {alpha:.4}): {e}"
        ))
    })?;
    Ok(num.value / z.value)
}

/// log_t evaluated from ln x, valid where x itself underflows.
fn t_log_from_ln(ln_x: f64, t: f64) -> f64 {
    if (t - 1.0).abs() < crate::tdist::T_LOG_UNIT_BAND {
        ln_x
    } else {
        let a = 1.0 - t;
        (a * ln_x).exp_m1() / a
    }
}

/// One case of a closed-form versus quadrature comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCase {
    pub mu: f64,
    pub sigma2: f64,
    pub nu_theta: f64,
    pub prior_nu: f64,
    pub closed: f64,
    /// `None` when the defining integral diverges or fails to converge.
    pub quadrature: Option<f64>,
    pub quadrature_error: Option<String>,
    pub rel_error: f64,
}

/// Box of posterior parameters swept by [`oracle_sweep`].
#[derive(Debug, Clone, Copy)]
pub struct SweepBox {
    pub mu: (f64, f64),
    pub sigma2: (f64, f64),
    pub nu_theta: (f64, f64),
    pub prior_nu: f64,
}

impl SweepBox {
    /// μ ∈ [−3, 3], σ² ∈ [0.1, 10], ν_θ ∈ [0.5, 50] against a ν = 2.1 prior.
    pub const STANDARD: Self = Self {
        mu: (-3.0, 3.0),
        sigma2: (0.1, 10.0),
        nu_theta: (0.5, 50.0),
        prior_nu: 2.1,
    };
}

/// Closed form against quadrature over `n` random one-dimensional posteriors.
pub fn oracle_sweep(bounds: SweepBox, n: usize, seed: u64, exec: Execution) -> Vec<OracleCase> {
    let root = RngStream::new(seed);
    exec.map_indexed(n, |i| {
        let mut rng = root.split(i as u64);
        let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.uniform_open();
        let mu = draw(bounds.mu);
        let sigma2 = draw(bounds.sigma2);
        let nu_theta = draw(bounds.nu_theta);
        oracle_case(mu, sigma2, nu_theta, bounds.prior_nu)
    })
}

pub fn oracle_case(mu: f64, sigma2: f64, nu_theta: f64, prior_nu: f64) -> OracleCase {
    let q = DiagStudentT::new(vec![mu], vec![sigma2], nu_theta).expect("sweep bounds are valid");
    let p = DiagStudentT::standard(1, prior_nu).expect("prior is valid");
    let closed = dt_closed(&q, prior_nu).expect("valid").total;
    let t = t_of(nu_theta).expect("valid");
    let (quadrature, quadrature_error, rel_error) = match dt_quadrature(&q, &p, t) {
        Ok(v) => (Some(v), None, (closed - v).abs() / v.abs().max(1e-300)),
        Err(e) => (None, Some(e.to_string()), f64::INFINITY),
    };
    OracleCase {
        mu,
        sigma2,
        nu_theta,
        prior_nu,
        closed,
        quadrature,
        quadrature_error,
        rel_error,
    }
}

/// Summary of where a sweep's closed form and quadrature disagree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub cases: usize,
    pub agreeing: usize,
    pub tolerance: f64,
    pub divergent_integrals: usize,
    pub max_rel_error_finite: f64,
    /// Smallest and largest ν_θ among disagreeing cases.
    pub disagreement_nu_range: Option<(f64, f64)>,
    /// Largest |ν_θ − ν_prior| among agreeing cases.
    pub agreement_max_nu_gap: Option<f64>,
    pub negative_closed: usize,
    pub most_negative_closed: f64,
}

impl DiscrepancyReport {
    pub fn from_cases(cases: &[OracleCase], tolerance: f64) -> Self {
        let agreeing: Vec<&OracleCase> = cases.iter().filter(|c| c.rel_error <= tolerance).collect();
        let bad: Vec<&OracleCase> = cases.iter().filter(|c| c.rel_error > tolerance).collect();
        let range = |v: &[&OracleCase]| {
            if v.is_empty() {
                None
            } else {
                let lo = v.iter().map(|c| c.nu_theta).fold(f64::INFINITY, f64::min);
                let hi = v.iter().map(|c| c.nu_theta).fold(f64::NEG_INFINITY, f64::max);
                Some((lo, hi))
            }
        };
        Self {
            cases: cases.len(),
            agreeing: agreeing.len(),
            tolerance,
            divergent_integrals: cases.iter().filter(|c| c.quadrature.is_none()).count(),
            max_rel_error_finite: cases
                .iter()
                .filter(|c| c.quadrature.is_some())
                .map(|c| c.rel_error)
                .fold(0.0, f64::max),
            disagreement_nu_range: range(&bad),
            agreement_max_nu_gap: agreeing
                .iter()
                .map(|c| (c.nu_theta - c.prior_nu).abs())
                .reduce(f64::max),
            negative_closed: cases.iter().filter(|c| c.closed < 0.0).count(),
            most_negative_closed: cases.iter().map(|c| c.closed).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn all_agree(&self) -> bool {
        self.agreeing == self.cases
    }
}

impl std::fmt::Display for DiscrepancyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{} cases within {:e} relative; {} integrals divergent; max finite rel error {:.3e}",
            self.agreeing, self.cases, self.tolerance, self.divergent_integrals, self.max_rel_error_finite
        )?;
        if let Some((lo, hi)) = self.disagreement_nu_range {
            write!(f, "; disagreement for nu_theta in [{lo:.4}, {hi:.4}]")?;
        }
        if let Some(gap) = self.agreement_max_nu_gap {
            write!(f, "; agreement only with |nu_theta - nu_prior| <= {gap:.3e}")?;
        }
        write!(
            f,
            "; closed form negative in {} cases (min {:.4})",
            self.negative_closed, self.most_negative_closed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uni(mu: f64, s2: f64, nu: f64) -> DiagStudentT {
        DiagStudentT::new(vec![mu], vec![s2], nu).unwrap()
    }

    #[test]
    fn t_of_examples() {
        assert!((t_of(2.1).unwrap() - 1.645_161_290_322_580_6).abs() < 1e-12);
        assert_eq!(t_of(1.0).unwrap(), 2.0);
        assert!((t_of(1e12).unwrap() - 1.0).abs() < 1e-11);
        assert!(t_of(0.0).is_err());
    }

    #[test]
    fn psi_examples() {
        assert!((psi_q(1.0, 1.0).unwrap() - PI).abs() < 1e-12);
        assert!((psi_p(1.0).unwrap() - PI).abs() < 1e-12);
        // Independent 40-digit evaluation of the Γ-ratio expression.
        assert!((psi_q(2.1, 1.0).unwrap() - 1.948_932_396_796_959_4).abs() < 1e-12);
        assert_eq!(psi_p(2.1).unwrap(), psi_q(2.1, 1.0).unwrap());
        let ratio = psi_q(2.1, 2.0).unwrap() / psi_q(2.1, 1.0).unwrap();
        assert!((ratio - 2f64.powf(2.0 / 3.1)).abs() < 1e-12);
        for nu in [1e3, 1e4, 1e5] {
            let v = psi_p(nu).unwrap();
            assert!(v.is_finite() && v > 0.0);
        }
        assert!(psi_q(1.0, 0.0).is_err());
        assert!(psi_p(-1.0).is_err());
    }

    #[test]
    fn closed_is_zero_at_prior() {
        for nu in [0.5, 2.1, 7.0] {
            let q = DiagStudentT::standard(4, nu).unwrap();
            let d = dt_closed(&q, nu).unwrap();
            assert!(d.total.abs() <= 1e-12, "nu={nu}: {}", d.total);
            assert_eq!(d.per_dimension.len(), 4);
            assert!((d.total - d.per_dimension.iter().sum::<f64>()).abs() == 0.0);
        }
    }

    #[test]
    fn closed_matches_quadrature_with_shared_dof() {
        let q = uni(0.0, 4.0, 2.1);
        let p = DiagStudentT::standard(1, 2.1).unwrap();
        let closed = dt_closed(&q, 2.1).unwrap().total;
        let quad = dt_quadrature(&q, &p, t_of(2.1).unwrap()).unwrap();
        // Independent reference from a separate adaptive-quadrature package.
        assert!((quad - 1.800_806_721_661_430_5).abs() < 1e-7, "{quad}");
        assert!(((closed - quad) / quad).abs() < 1e-4);
    }

    #[test]
    fn quadrature_identity_and_asymmetry() {
        let q = uni(0.3, 1.7, 2.1);
        let t = t_of(2.1).unwrap();
        assert!(dt_quadrature(&q, &q, t).unwrap().abs() < 1e-8);

        let wide = uni(0.0, 4.0, 2.1);
        let narrow = uni(0.0, 1.0, 2.1);
        let a = dt_quadrature(&wide, &narrow, t).unwrap();
        let b = dt_quadrature(&narrow, &wide, t).unwrap();
        assert!((a - b).abs() > 1e-3, "{a} vs {b}");

        // A pure location shift with equal scales is symmetric.
        let s1 = uni(0.0, 1.0, 2.1);
        let s2 = uni(0.5, 1.0, 2.1);
        let c = dt_quadrature(&s1, &s2, t).unwrap();
        let d = dt_quadrature(&s2, &s1, t).unwrap();
        assert!((c - d).abs() < 1e-8);
        assert!((c - 0.359_624_430_361_737_8).abs() < 1e-7);
    }

    #[test]
    fn quadrature_reports_divergent_integral() {
        // With ν_θ = 0.5 against a ν = 2.1 prior, q̃ log_t p decays too slowly.
        let q = uni(0.0, 1.0, 0.5);
        let p = DiagStudentT::standard(1, 2.1).unwrap();
        let e = dt_quadrature(&q, &p, t_of(0.5).unwrap());
        assert!(matches!(e, Err(Error::Numerical(ref m)) if m.contains("diverges")), "{e:?}");
    }

    #[test]
    fn quadrature_domain() {
        let q = uni(0.0, 1.0, 2.1);
        assert!(dt_quadrature(&q, &q, 1.0).is_err());
        let two = DiagStudentT::standard(2, 2.1).unwrap();
        assert!(matches!(dt_quadrature(&two, &q, 1.5), Err(Error::Usage(_))));
    }

    #[test]
    fn graph_matches_plain_and_finite_differences() {
        let mu = vec![0.3, -1.2, 0.0];
        let s2 = vec![0.5, 2.0, 1.3];
        let nu = 3.7;
        let prior = 2.1;
        let eval = |mu: &[f64], sigma: &[f64], nu: f64| {
            let mut g = Graph::new();
            let m = g.leaf(crate::numerics::Tensor::vector(mu.to_vec()));
            let s = g.leaf(crate::numerics::Tensor::vector(sigma.to_vec()));
            let n = g.scalar(nu);
            let out = dt_closed_graph(&mut g, m, s, n, prior);
            (g, m, s, n, out)
        };
        let sigma: Vec<f64> = s2.iter().map(|v: &f64| v.sqrt()).collect();
        let (g, m, s, n, out) = eval(&mu, &sigma, nu);
        let plain = dt_closed(&DiagStudentT::new(mu.clone(), s2.clone(), nu).unwrap(), prior).unwrap();
        assert!((g.item(out) - plain.total).abs() < 1e-12 * plain.total.abs().max(1.0));

        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        let check = |an: f64, up: f64, dn: f64| {
            let fd = (up - dn) / (2.0 * h);
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{an} vs {fd}");
        };
        for i in 0..3 {
            let mut a = mu.clone();
            a[i] += h;
            let mut b = mu.clone();
            b[i] -= h;
            let (ga, _, _, _, oa) = eval(&a, &sigma, nu);
            let (gb, _, _, _, ob) = eval(&b, &sigma, nu);
            check(grads.wrt(m).data()[i], ga.item(oa), gb.item(ob));
            let mut a = sigma.clone();
            a[i] += h;
            let mut b = sigma.clone();
            b[i] -= h;
            let (ga, _, _, _, oa) = eval(&mu, &a, nu);
            let (gb, _, _, _, ob) = eval(&mu, &b, nu);
            check(grads.wrt(s).data()[i], ga.item(oa), gb.item(ob));
        }
        let (ga, _, _, _, oa) = eval(&mu, &sigma, nu + h);
        let (gb, _, _, _, ob) = eval(&mu, &sigma, nu - h);
        check(grads.wrt(n).item(), ga.item(oa), gb.item(ob));
    }

    proptest! {
        #[test]
        fn closed_is_additive(mu in proptest::collection::vec(-3.0..3.0f64, 1..5), nu in 0.5..50.0f64, s in 0.1..10.0f64) {
            let s2 = vec![s; mu.len()];
            let q = DiagStudentT::new(mu.clone(), s2, nu).unwrap();
            let total = dt_closed(&q, 2.1).unwrap().total;
            let parts: f64 = mu
                .iter()
                .map(|m| dt_closed(&uni(*m, s, nu), 2.1).unwrap().total)
                .sum();
            prop_assert!((total - parts).abs() <= 1e-10 * total.abs().max(1.0));
        }

        #[test]
        fn closed_nonnegative_with_shared_dof(mu in proptest::collection::vec(-3.0..3.0f64, 1..5), nu in 0.5..50.0f64, s in 0.1..10.0f64) {
            let q = DiagStudentT::new(mu.clone(), vec![s; mu.len()], nu).unwrap();
            prop_assert!(dt_closed(&q, nu).unwrap().total >= -1e-9);
        }
    }
}
