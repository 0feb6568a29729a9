//! Independent numerical oracles: central finite differences, Monte-Carlo
//! KL estimates, Gauss-Hermite quadrature of the conditional log-marginal
//! `log p(s|x)` and of the variational bound, and a check of the
//! reparameterised gradient estimator.
//!
//! Apart from running the model forward, everything here uses its own
//! loops: no log-softmax, KL or Gaussian density is borrowed from the rest
//! of the crate.

use std::f64::consts::PI;

mod reference;

pub use reference::{Plane, ReferenceNet, SignPattern};

use crate::autograd::Tape;
use crate::distributions::GaussianParams;
use crate::error::{Error, Result};
use crate::model::{Batch, CvaeModel};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Central differences `(f(t + h e_i) - f(t - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut t = theta.to_vec();
    let mut g = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let orig = t[i];
        t[i] = orig + h;
        let fp = f(&t)?;
        t[i] = orig - h;
        let fm = f(&t)?;
        t[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// Comparison of an analytic gradient against a numerical one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
}

/// Denominator floor for relative gradient errors. Coordinates smaller than
/// this sit near the round-off resolution of central differences and are
/// judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradComparison {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradComparison {
        max_rel: 0.0,
        max_abs: 0.0,
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        out.max_abs = out.max_abs.max(abs);
        if rel > out.max_rel || rel.is_nan() {
            out.max_rel = rel;
            out.worst_index = i;
        }
    }
    out
}

/// Monte-Carlo estimate of `KL(q || p)` with its standard error, from `n`
/// draws `z = mu_q + sigma_q * eps`.
pub fn mc_kl(q: &GaussianParams, p: &GaussianParams, n: usize, seed: u64) -> Result<(f64, f64)> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch(q.dim(), p.dim()));
    }
    if n < 1000 {
        return Err(Error::Config("mc_kl needs at least 1000 draws".into()));
    }
    let d = q.dim();
    let sq: Vec<f64> = q.log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
    let mut rng = SplitMix64::derive(seed, &[0x6b6c]);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n {
        let mut diff = 0.0;
        for i in 0..d {
            let e = rng.normal();
            let z = q.mu[i] + sq[i] * e;
            // log q(z) - log p(z); the 2*pi terms cancel
            let lq = -0.5 * q.log_var[i] - 0.5 * e * e;
            let lp = -0.5 * p.log_var[i] - (z - p.mu[i]).powi(2) / (2.0 * p.log_var[i].exp());
            diff += lq - lp;
        }
        sum += diff;
        sum2 += diff * diff;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}

/// Physicists' Gauss-Hermite rule: `int exp(-t^2) f(t) dt ~ sum w_i f(t_i)`.
/// Nodes are returned in decreasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PIM4, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Tensor-product rule for `E[f(z)]` under a diagonal Gaussian: returns
/// `(z_k, log weight_k)` with weights summing to one.
fn gaussian_grid(g: &GaussianParams, nodes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = g.dim();
    if d > 2 {
        return Err(Error::DimTooLarge(d));
    }
    let (t, w) = gauss_hermite(nodes);
    let m = nodes.pow(d as u32);
    let mut zs = Vec::with_capacity(m * d);
    let mut lw = Vec::with_capacity(m);
    let log_norm = -0.5 * d as f64 * PI.ln();
    for k in 0..m {
        let mut rem = k;
        let mut acc = log_norm;
        for i in 0..d {
            let j = rem % nodes;
            rem /= nodes;
            let sigma = (0.5 * g.log_var[i]).exp();
            zs.push(g.mu[i] + std::f64::consts::SQRT_2 * sigma * t[j]);
            acc += w[j].ln();
        }
        lw.push(acc);
    }
    Ok((zs, lw))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn gauss_log_density(g: &GaussianParams, z: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..g.dim() {
        s += -0.5 * (2.0 * PI).ln()
            - 0.5 * g.log_var[i]
            - (z[i] - g.mu[i]).powi(2) / (2.0 * g.log_var[i].exp());
    }
    s
}

/// Everything about one `(x, s)` pair the integrals need.
struct Instance<'a> {
    net: ReferenceNet<'a>,
    local: Plane,
    targets: Vec<u8>,
    prior: GaussianParams,
    posterior: GaussianParams,
}

fn single(batch: &Batch) -> Result<()> {
    if batch.len() != 1 {
        return Err(Error::shape("quadrature oracles take a single sample"));
    }
    Ok(())
}

impl<'a> Instance<'a> {
    fn new(model: &'a CvaeModel, batch: &Batch) -> Result<Self> {
        single(batch)?;
        let net = ReferenceNet {
            arch: &model.arch,
            params: &model.params,
        };
        let trunk = net.trunk(batch.x.data())?;
        let (mu_p, lv_p) = net.image_gaussian(&trunk)?;
        let (mu_q, lv_q) = net.seg_gaussian(&batch.labels)?;
        let (h, m) = (model.arch.input_size, model.arch.lr_size());
        let mut targets = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                targets.push(batch.labels[((2 * i + 1) * h / (2 * m)) * h + (2 * j + 1) * h / (2 * m)]);
            }
        }
        Ok(Self {
            local: net.local_branch(&trunk)?,
            net,
            targets,
            prior: GaussianParams::new(mu_p, lv_p)?,
            posterior: GaussianParams::new(mu_q, lv_q)?,
        })
    }

    /// `log p(s | z_k, x)` for each row of `zs`.
    fn log_lik(&self, zs: &[f64]) -> Result<Vec<f64>> {
        let d = self.prior.dim();
        zs.chunks(d)
            .map(|z| self.net.log_lik(z, &self.local, &self.targets, None))
            .collect()
    }

    /// Whether every `z`-dependent ReLU keeps its state across all nodes
    /// that contribute more than `exp(-50)` of the largest term, i.e. the
    /// integrand is analytic where it matters.
    fn smooth_over(&self, g: &GaussianParams, nodes: usize) -> Result<bool> {
        let d = g.dim();
        let (zs, lw) = gaussian_grid(g, nodes)?;
        let mut terms = Vec::with_capacity(lw.len());
        let mut patterns = Vec::with_capacity(lw.len());
        for (z, w) in zs.chunks(d).zip(&lw) {
            let mut sp = SignPattern::new();
            terms.push(w + self.net.log_lik(z, &self.local, &self.targets, Some(&mut sp))?);
            patterns.push(sp);
        }
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut significant = terms.iter().zip(&patterns).filter(|(t, _)| **t >= top - 50.0);
        let first = significant.next().map(|(_, p)| p.clone());
        Ok(significant.all(|(_, p)| Some(p) == first.as_ref()))
    }
}

/// Whether the quadrature integrands under both `p(z|x)` and `q(z|s)` are
/// free of ReLU kinks over their significant nodes. Gauss-Hermite rules
/// converge only algebraically across a kink.
pub fn integrand_is_smooth(model: &CvaeModel, batch: &Batch, nodes_per_dim: usize) -> Result<bool> {
    let d = model.arch.latent_dim;
    if d > 2 {
        return Err(Error::DimTooLarge(d));
    }
    let inst = Instance::new(model, batch)?;
    Ok(inst.smooth_over(&inst.prior, nodes_per_dim)? && inst.smooth_over(&inst.posterior, nodes_per_dim)?)
}

/// Image- and segmentation-encoder Gaussians as computed by the reference
/// forward pass.
pub fn reference_gaussians(model: &CvaeModel, batch: &Batch) -> Result<(GaussianParams, GaussianParams)> {
    let inst = Instance::new(model, batch)?;
    Ok((inst.prior, inst.posterior))
}

/// `log p(s|z,x)` by the reference forward pass.
pub fn reference_log_lik(model: &CvaeModel, batch: &Batch, z: &[f64]) -> Result<f64> {
    let inst = Instance::new(model, batch)?;
    if z.len() != model.arch.latent_dim {
        return Err(Error::DimMismatch(z.len(), model.arch.latent_dim));
    }
    Ok(inst.log_lik(z)?[0])
}

/// `log p(s|x) = log int p(z|x) p(s|z,x) dz` by Gauss-Hermite quadrature
/// against the image encoder's Gaussian.
pub fn quadrature_log_marginal(model: &CvaeModel, batch: &Batch, nodes_per_dim: usize) -> Result<f64> {
    let d = model.arch.latent_dim;
    if d > 2 {
        return Err(Error::DimTooLarge(d));
    }
    if nodes_per_dim < 32 {
        return Err(Error::Config("quadrature needs at least 32 nodes per dimension".into()));
    }
    let inst = Instance::new(model, batch)?;
    let (zs, lw) = gaussian_grid(&inst.prior, nodes_per_dim)?;
    let ll = inst.log_lik(&zs)?;
    let terms: Vec<f64> = lw.iter().zip(&ll).map(|(w, l)| w + l).collect();
    Ok(log_sum_exp(&terms))
}

/// Components of the variational bound evaluated by quadrature under
/// `q(z|s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureElbo {
    /// `E_q[log p(s|z,x)]`.
    pub expected_log_lik: f64,
    /// `E_q[log q(z|s) - log p(z|x)]`.
    pub kl: f64,
    pub elbo: f64,
}

pub fn quadrature_elbo(model: &CvaeModel, batch: &Batch, nodes_per_dim: usize) -> Result<QuadratureElbo> {
    let d = model.arch.latent_dim;
    if d > 2 {
        return Err(Error::DimTooLarge(d));
    }
    let inst = Instance::new(model, batch)?;
    let (zs, lw) = gaussian_grid(&inst.posterior, nodes_per_dim)?;
    let ll = inst.log_lik(&zs)?;
    let (mut e_ll, mut kl) = (0.0, 0.0);
    for (k, (w, l)) in lw.iter().zip(&ll).enumerate() {
        let wk = w.exp();
        let z = &zs[k * d..(k + 1) * d];
        e_ll += wk * l;
        kl += wk * (gauss_log_density(&inst.posterior, z) - gauss_log_density(&inst.prior, z));
    }
    Ok(QuadratureElbo {
        expected_log_lik: e_ll,
        kl,
        elbo: e_ll - kl,
    })
}

/// `E_q[log p(s|z,x)]` by quadrature, as a function of the model parameters.
pub fn quadrature_expected_log_lik(model: &CvaeModel, batch: &Batch, nodes_per_dim: usize) -> Result<f64> {
    Ok(quadrature_elbo(model, batch, nodes_per_dim)?.expected_log_lik)
}

/// The segmentation-encoder head parameters probed by the estimator check.
pub const SGVB_PARAMS: [&str; 4] = [
    "seg_enc/mu/b",
    "seg_enc/logvar/b",
    "seg_enc/mu/w",
    "seg_enc/logvar/w",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SgvbCoordinate {
    pub param: String,
    pub index: usize,
    /// Mean reparameterised gradient of `E_q[log p(s|z,x)]`.
    pub estimate: f64,
    pub std_error: f64,
    /// Finite-difference gradient of the quadrature expectation.
    pub reference: f64,
}

impl SgvbCoordinate {
    pub fn within(&self, k: f64) -> bool {
        (self.estimate - self.reference).abs() <= k * self.std_error
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgvbReport {
    pub n_samples: usize,
    pub coordinates: Vec<SgvbCoordinate>,
}

impl SgvbReport {
    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(|c| c.within(3.0))
    }

    pub fn max_z_score(&self) -> f64 {
        self.coordinates
            .iter()
            .map(|c| {
                let diff = (c.estimate - c.reference).abs();
                if diff == 0.0 {
                    0.0
                } else {
                    diff / c.std_error
                }
            })
            .fold(0.0, f64::max)
    }
}

fn sgvb_coords(model: &CvaeModel) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for name in SGVB_PARAMS {
        let n = model.params.value(name)?.len();
        out.extend((0..n).map(|i| (name.to_string(), i)));
    }
    Ok(out)
}

/// Draw-chunk size for the batch-means standard error.
const SGVB_CHUNK: usize = 100;

/// Compare the averaged reparameterised gradient of the reconstruction term
/// against finite differences of its quadrature value, on a single sample.
pub fn sgvb_gradient_check(
    model: &CvaeModel,
    batch: &Batch,
    n_samples: usize,
    seed: u64,
) -> Result<SgvbReport> {
    let d = model.arch.latent_dim;
    if d > 2 {
        return Err(Error::DimTooLarge(d));
    }
    single(batch)?;
    if n_samples < 10_000 {
        return Err(Error::Config("sgvb check needs at least 10^4 draws".into()));
    }
    let coords = sgvb_coords(model)?;

    let mut probe = model.clone();
    probe
        .params
        .set_trainable_where(|n| SGVB_PARAMS.contains(&n));
    let trunk_t = {
        let tape = Tape::inference();
        let t = model.trunk(&tape, tape.constant(batch.x.clone()))?;
        (*t.block2.value()).clone()
    };
    let ts = trunk_t.shape().to_vec();
    let targets: Vec<u8> = model.lr_targets(batch).repeat(SGVB_CHUNK);

    let chunks = n_samples / SGVB_CHUNK;
    let mut rng = SplitMix64::derive(seed, &[0x5367]);
    let mut means: Vec<Vec<f64>> = vec![Vec::with_capacity(chunks); coords.len()];
    for _ in 0..chunks {
        let tape = Tape::new();
        let q = probe.encode_segmentation(&tape, &batch.labels, 1)?;
        let eps = Tensor::new(&[SGVB_CHUNK, d], rng.normals(SGVB_CHUNK * d))?;
        let z = crate::distributions::reparam_sample(&q, &eps)?;
        let mut rep = Vec::with_capacity(SGVB_CHUNK * trunk_t.len());
        for _ in 0..SGVB_CHUNK {
            rep.extend_from_slice(trunk_t.data());
        }
        let trunk = tape.constant(Tensor::new(&[SGVB_CHUNK, ts[1], ts[2], ts[3]], rep)?);
        let logits = probe.decode_from_trunk(&tape, z, Some(trunk))?.logits;
        let (nll, _) = logits.softmax_ce_pixelwise(&targets)?;
        // gradient of the mean log-likelihood over the chunk
        let ll = nll.neg();
        let mut grads: std::collections::HashMap<&str, &Tensor> = Default::default();
        let g = match tape.backward(ll) {
            Ok(g) => Some(g),
            Err(Error::NoTape) => None,
            Err(e) => return Err(e),
        };
        if let Some(g) = &g {
            for (name, t) in g.params() {
                grads.insert(name, t);
            }
        }
        for (k, (name, idx)) in coords.iter().enumerate() {
            let v = grads.get(name.as_str()).map_or(0.0, |t| t.data()[*idx]);
            means[k].push(v);
        }
    }

    let nodes = 64;
    let h = 1e-5;
    let mut coordinates = Vec::with_capacity(coords.len());
    for (k, (name, idx)) in coords.iter().enumerate() {
        let m = &means[k];
        let cf = m.len() as f64;
        let mean = m.iter().sum::<f64>() / cf;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (cf - 1.0);
        let std_error = (var / cf).sqrt();

        let mut shifted = model.clone();
        let orig = shifted.params.value(name)?.data()[*idx];
        shifted.params.value_mut(name)?.data_mut()[*idx] = orig + h;
        let fp = quadrature_expected_log_lik(&shifted, batch, nodes)?;
        shifted.params.value_mut(name)?.data_mut()[*idx] = orig - h;
        let fm = quadrature_expected_log_lik(&shifted, batch, nodes)?;
        coordinates.push(SgvbCoordinate {
            param: name.clone(),
            index: *idx,
            estimate: mean,
            std_error,
            reference: (fp - fm) / (2.0 * h),
        });
    }
    Ok(SgvbReport {
        n_samples: chunks * SGVB_CHUNK,
        coordinates,
    })
}
