//! Seeded random streams and the samplers built on them.
//!
//! Every stream is a ChaCha8 generator. Child streams for workers, repeats or
//! layers are derived with [`RngStream::split`], which selects a distinct
//! ChaCha stream id under the same seed, so results never depend on how work
//! is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// An independent child stream. The same `(seed, stream, index)` always
    /// yields the same child, regardless of how much of `self` was consumed.
    pub fn split(&self, index: u64) -> Self {
        let mixed = splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self::with_stream(self.seed, mixed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.inner.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn std_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// One Gamma(shape, 1) variate (Marsaglia-Tsang squeeze; shape < 1 is
    /// boosted through Gamma(shape + 1) * U^(1/shape)).
    fn gamma_unit(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let g = self.gamma_unit(shape + 1.0);
            let log_u = self.uniform_open().ln();
            let v = g.ln() + log_u / shape;
            return v.exp().max(f64::MIN_POSITIVE);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.std_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// One standard Student's-t variate (unit scale) with `df` degrees of freedom.
    pub(crate) fn std_t(&mut self, df: f64) -> f64 {
        let z = self.std_normal();
        let g = 2.0 * self.gamma_unit(0.5 * df);
        z / (g / df).sqrt()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` i.i.d. standard normal variates as a vector tensor.
pub fn sample_std_normal(rng: &mut RngStream, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.std_normal()).collect())
}

/// `n` i.i.d. Gamma(k, scale) variates.
pub fn sample_gamma(rng: &mut RngStream, k: f64, scale: f64, n: usize) -> Result<Tensor> {
    if !(k > 0.0 && k.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain(
            "sample_gamma",
            format!("shape {k} and scale {scale} must be positive and finite"),
        ));
    }
    Ok(Tensor::vector((0..n).map(|_| scale * rng.gamma_unit(k)).collect()))
}

/// `n` i.i.d. standard (unit scale) Student's-t variates, Z / sqrt(G / df)
/// with G chi-square on `df` degrees of freedom.
pub fn sample_std_t(rng: &mut RngStream, df: f64, n: usize) -> Result<Tensor> {
    check_df(df)?;
    Ok(Tensor::vector((0..n).map(|_| rng.std_t(df)).collect()))
}

pub(crate) fn check_df(df: f64) -> Result<()> {
    if df > 0.0 && df.is_finite() {
        Ok(())
    } else {
        Err(Error::domain("sample_std_t", format!("degrees of freedom {df} must be positive")))
    }
}
