//! Diagonal Gaussians parameterised by mean and log-variance.

use std::f64::consts::PI;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A diagonal Gaussian (or a batch of them, one per row) living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    pub fn new(mu: Var<'t>, log_var: Var<'t>) -> Result<Self> {
        let (a, b) = (mu.shape(), log_var.shape());
        if a != b {
            return Err(Error::shape(format!("mu {a:?} vs log_var {b:?}")));
        }
        Ok(Self { mu, log_var })
    }

    /// `N(0, I)` with the same shape as `self`.
    pub fn standard_like(&self) -> Self {
        let tape = self.mu.tape();
        let s = self.mu.shape();
        Self {
            mu: tape.constant(Tensor::zeros(&s)),
            log_var: tape.constant(Tensor::zeros(&s)),
        }
    }

    /// Latent dimension (the trailing axis).
    pub fn dim(&self) -> usize {
        *self.mu.shape().last().expect("non-scalar")
    }

    pub fn params(&self) -> GaussianParams {
        GaussianParams {
            mu: self.mu.value().data().to_vec(),
            log_var: self.log_var.value().data().to_vec(),
        }
    }

    /// Parameters of row `i` of a batch.
    pub fn row(&self, i: usize) -> GaussianParams {
        let d = self.dim();
        let mu = self.mu.value();
        let lv = self.log_var.value();
        GaussianParams {
            mu: mu.data()[i * d..(i + 1) * d].to_vec(),
            log_var: lv.data()[i * d..(i + 1) * d].to_vec(),
        }
    }
}

/// Plain (off-tape) diagonal Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::DimMismatch(mu.len(), log_var.len()));
        }
        if mu.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self { mu, log_var })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            log_var: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn on_tape<'t>(&self, tape: &'t crate::Tape) -> DiagGaussian<'t> {
        DiagGaussian {
            mu: tape.leaf(Tensor::vector(self.mu.clone())),
            log_var: tape.leaf(Tensor::vector(self.log_var.clone())),
        }
    }
}

/// `KL(q || p)`, summed over every element (so over the batch as well when
/// the Gaussians are batched).
pub fn kl_diag<'t>(q: &DiagGaussian<'t>, p: &DiagGaussian<'t>) -> Result<Var<'t>> {
    let (dq, dp) = (q.mu.shape(), p.mu.shape());
    if dq != dp {
        return Err(Error::DimMismatch(
            dq.iter().product(),
            dp.iter().product(),
        ));
    }
    let log_ratio = p.log_var.sub(q.log_var)?.scale(0.5);
    let num = q.log_var.exp().add(q.mu.sub(p.mu)?.square())?;
    let den = p.log_var.exp().scale(2.0);
    let terms = log_ratio.add(num.div(den)?)?.add_scalar(-0.5);
    Ok(terms.sum())
}

/// `KL(q || N(0, I))`.
pub fn kl_to_standard<'t>(q: &DiagGaussian<'t>) -> Var<'t> {
    kl_diag(q, &q.standard_like()).expect("same shape by construction")
}

/// `z = mu + exp(log_var / 2) * eps`; `eps` is a constant.
pub fn reparam_sample<'t>(q: &DiagGaussian<'t>, eps: &Tensor) -> Result<Var<'t>> {
    let tape = q.mu.tape();
    let d = q.dim();
    let ed = *eps.shape().last().ok_or(Error::DimMismatch(0, d))?;
    if ed != d {
        return Err(Error::DimMismatch(ed, d));
    }
    let sigma = q.log_var.scale(0.5).exp();
    // eps may hold more rows than q (several draws from one posterior)
    let e = tape.constant(eps.clone());
    e.mul(sigma)?.add(q.mu)
}

/// Log-density of a diagonal Gaussian at `z`.
pub fn log_pdf(q: &GaussianParams, z: &[f64]) -> Result<f64> {
    if z.len() != q.dim() {
        return Err(Error::DimMismatch(z.len(), q.dim()));
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    Ok(q.mu
        .iter()
        .zip(&q.log_var)
        .zip(z)
        .map(|((m, lv), z)| -half_log_2pi - 0.5 * lv - (z - m).powi(2) / (2.0 * lv.exp()))
        .sum())
}
