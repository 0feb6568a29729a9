//! The oracle verification suite behind `cvaeseg verify`: gradient checks,
//! KL oracle, variational bound and reparameterised-gradient checks on tiny
//! randomly initialised models.

use serde::Serialize;

use crate::autograd::{concat, Tape, Var};
use crate::distributions::{kl_diag, reparam_sample, DiagGaussian, GaussianParams};
use crate::error::Result;
use crate::model::{ArchConfig, Batch, CvaeModel};
use crate::oracle::{self, compare_gradients};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Tolerance on the per-coordinate relative gradient error.
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const BOUND_SLACK: f64 = 1e-6;
pub const REFINE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured error (or statistic) across the instances.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn le(name: impl Into<String>, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

type PrimFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Input domain for a primitive's random arguments.
#[derive(Clone, Copy)]
enum Domain {
    Signed,
    Positive,
    /// Bounded away from zero, for kinked functions.
    AwayFromZero,
}

struct Primitive {
    name: &'static str,
    inputs: &'static [(&'static [usize], Domain)],
    f: PrimFn,
}

fn pattern(shape: &[usize], k: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (k * (i as f64 + 1.0)).sin()).collect()).expect("shape")
}

fn pattern_labels(n: usize, c: usize) -> Vec<u8> {
    (0..n).map(|i| ((i * 7 + 1) % c) as u8).collect()
}

use Domain::*;

const PRIMITIVES: &[Primitive] = &[
    Primitive { name: "add", inputs: &[(&[3, 4], Signed), (&[3, 4], Signed)], f: |_, v| v[0].add(v[1]) },
    Primitive { name: "add_broadcast", inputs: &[(&[2, 3, 4], Signed), (&[4], Signed)], f: |_, v| v[0].add(v[1]) },
    Primitive { name: "sub", inputs: &[(&[3, 4], Signed), (&[3, 1], Signed)], f: |_, v| v[0].sub(v[1]) },
    Primitive { name: "mul", inputs: &[(&[3, 4], Signed), (&[3, 4], Signed)], f: |_, v| v[0].mul(v[1]) },
    Primitive { name: "mul_broadcast", inputs: &[(&[2, 3, 4], Signed), (&[3, 1], Signed)], f: |_, v| v[0].mul(v[1]) },
    Primitive { name: "div", inputs: &[(&[3, 4], Signed), (&[4], Positive)], f: |_, v| v[0].div(v[1]) },
    Primitive { name: "exp", inputs: &[(&[5], Signed)], f: |_, v| Ok(v[0].exp()) },
    Primitive { name: "log", inputs: &[(&[5], Positive)], f: |_, v| v[0].log() },
    Primitive { name: "neg", inputs: &[(&[5], Signed)], f: |_, v| Ok(v[0].neg()) },
    Primitive { name: "square", inputs: &[(&[5], Signed)], f: |_, v| Ok(v[0].square()) },
    Primitive { name: "sqrt", inputs: &[(&[5], Positive)], f: |_, v| v[0].sqrt() },
    Primitive { name: "scale", inputs: &[(&[5], Signed)], f: |_, v| Ok(v[0].scale(-1.7)) },
    Primitive { name: "add_scalar", inputs: &[(&[5], Signed)], f: |_, v| Ok(v[0].add_scalar(0.3)) },
    Primitive { name: "matmul", inputs: &[(&[3, 4], Signed), (&[4, 2], Signed)], f: |_, v| v[0].matmul(v[1]) },
    Primitive { name: "reduce_sum", inputs: &[(&[2, 3, 4], Signed)], f: |_, v| v[0].reduce_sum(Some(&[1])) },
    Primitive { name: "sum", inputs: &[(&[2, 3], Signed)], f: |_, v| Ok(v[0].sum()) },
    Primitive { name: "reshape", inputs: &[(&[2, 6], Signed)], f: |_, v| v[0].reshape(&[3, 4]) },
    Primitive { name: "concat", inputs: &[(&[2, 3, 2, 2], Signed), (&[2, 1, 2, 2], Signed)], f: |_, v| concat(&[v[0], v[1]], 1) },
    Primitive {
        name: "conv2d",
        inputs: &[(&[2, 2, 5, 5], Signed), (&[3, 2, 3, 3], Signed), (&[3], Signed)],
        f: |_, v| v[0].conv2d(v[1], v[2], 1, 1),
    },
    Primitive {
        name: "conv2d_strided",
        inputs: &[(&[1, 2, 6, 6], Signed), (&[2, 2, 3, 3], Signed), (&[2], Signed)],
        f: |_, v| v[0].conv2d(v[1], v[2], 2, 0),
    },
    Primitive { name: "maxpool2d", inputs: &[(&[2, 2, 4, 4], Signed)], f: |_, v| v[0].maxpool2d(2, 2) },
    Primitive { name: "upsample_nearest", inputs: &[(&[1, 2, 3, 3], Signed)], f: |_, v| v[0].upsample_nearest(2) },
    Primitive {
        name: "affine",
        inputs: &[(&[3, 4], Signed), (&[4, 2], Signed), (&[2], Signed)],
        f: |_, v| v[0].affine(v[1], v[2]),
    },
    Primitive { name: "relu", inputs: &[(&[6], AwayFromZero)], f: |_, v| Ok(v[0].relu()) },
    Primitive { name: "flatten", inputs: &[(&[2, 2, 2, 2], Signed)], f: |_, v| v[0].flatten() },
    Primitive {
        name: "softmax_ce_pixelwise",
        inputs: &[(&[2, 3, 2, 2], Signed)],
        f: |_, v| Ok(v[0].softmax_ce_pixelwise(&pattern_labels(8, 3))?.0),
    },
    Primitive {
        name: "kl_diag",
        inputs: &[(&[2, 3], Signed), (&[2, 3], Signed), (&[2, 3], Signed), (&[2, 3], Signed)],
        f: |_, v| kl_diag(&DiagGaussian::new(v[0], v[1])?, &DiagGaussian::new(v[2], v[3])?),
    },
    Primitive {
        name: "reparam_sample",
        inputs: &[(&[1, 3], Signed), (&[1, 3], Signed)],
        f: |_, v| reparam_sample(&DiagGaussian::new(v[0], v[1])?, &pattern(&[4, 3], 0.9)),
    },
];

pub fn primitive_names() -> Vec<&'static str> {
    PRIMITIVES.iter().map(|p| p.name).collect()
}

fn draw_input(rng: &mut SplitMix64, shape: &[usize], dom: Domain) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match dom {
            Signed => rng.uniform(-1.0, 1.0),
            Positive => rng.uniform(0.5, 2.0),
            AwayFromZero => {
                let m = rng.uniform(0.1, 1.0);
                if rng.bernoulli(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// `sum(f(inputs) * weights)` and, optionally, its gradient w.r.t. every input.
fn weighted_output(prim: &Primitive, inputs: &[Tensor], weights: &mut Option<Tensor>, grad: bool) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| if grad { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = (prim.f)(&tape, &vars)?;
    let w = weights.get_or_insert_with(|| pattern(&out.shape(), 1.3)).clone();
    let loss = out.mul(tape.constant(w))?.sum();
    let value = loss.item();
    if !grad {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss)?;
    let flat = vars.iter().flat_map(|v| g.wrt(*v).into_data()).collect();
    Ok((value, flat))
}

fn split_flat(inputs: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut at = 0;
    inputs
        .iter()
        .map(|t| {
            let n = t.len();
            at += n;
            Tensor::new(t.shape(), flat[at - n..at].to_vec()).expect("shape")
        })
        .collect()
}

/// Worst relative gradient error of one primitive over the given seeds.
pub fn primitive_gradient_error(name: &str, seeds: &[u64]) -> Result<f64> {
    let prim = PRIMITIVES
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| crate::Error::Config(format!("unknown primitive `{name}`")))?;
    let mut worst = 0.0f64;
    for &seed in seeds {
        let mut rng = SplitMix64::derive(seed, &[0x6772]);
        let inputs: Vec<Tensor> = prim
            .inputs
            .iter()
            .map(|(s, d)| draw_input(&mut rng, s, *d))
            .collect();
        let mut weights = None;
        let (_, analytic) = weighted_output(prim, &inputs, &mut weights, true)?;
        let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let numeric = oracle::finite_diff_grad(
            |th| Ok(weighted_output(prim, &split_flat(&inputs, th), &mut weights, false)?.0),
            &theta,
            FD_STEP,
        )?;
        worst = worst.max(compare_gradients(&analytic, &numeric).max_rel);
    }
    Ok(worst)
}

/// Which model objective a gradient check runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Cvae,
    Fcn,
    Vae,
    ImageEncoder,
    Hr,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [Self::Cvae, Self::Fcn, Self::Vae, Self::ImageEncoder, Self::Hr];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cvae => "cvae_loss",
            Self::Fcn => "fcn_loss",
            Self::Vae => "vae_loss",
            Self::ImageEncoder => "image_encoder_loss",
            Self::Hr => "hr_loss",
        }
    }
}

/// Random single-sample instance for the tiny architecture.
pub fn tiny_instance(latent_dim: usize, seed: u64) -> Result<(CvaeModel, Batch)> {
    let arch = ArchConfig::tiny(latent_dim);
    let mut model = CvaeModel::new(arch.clone(), seed)?;
    model.add_hr_head(seed)?;
    // zero biases over all-zero inputs put ReLUs exactly on their kink, and
    // the zero HR projection blocks gradient to the rest of the head
    let mut rng = SplitMix64::derive(seed, &[0x7469]);
    for (name, p) in model.params.iter_mut() {
        let spread = if name == "hr_head/classifier/w" { 0.5 } else if name.ends_with("/b") { 0.2 } else { 0.0 };
        for v in p.value.data_mut() {
            *v += rng.uniform(-spread, spread);
        }
    }
    let s = arch.input_size;
    let x = Tensor::new(&[1, 1, s, s], (0..s * s).map(|_| rng.next_f64()).collect())?;
    let labels = (0..s * s).map(|_| rng.below(arch.classes as u64) as u8).collect();
    Ok((model, Batch::new(x, labels)?))
}

/// Layers of the decoder whose ReLUs see `z`.
const LATENT_PATH: [&str; 4] = [
    "decoder/global_fc",
    "decoder/global_conv",
    "decoder/fuse_conv",
    "decoder/fuse_1x1",
];

/// A random tiny instance whose decoder is analytic in `z` over the
/// quadrature support: the latent-path ReLUs are kept active by a positive
/// offset on the first layer and non-negative weights after it, while the
/// first layer and the classifier stay signed. Candidates are redrawn until
/// [`oracle::integrand_is_smooth`] certifies them.
pub fn smooth_tiny_instance(latent_dim: usize, seed: u64) -> Result<(CvaeModel, Batch)> {
    const NODES: usize = 128;
    for attempt in 0..100u64 {
        let (mut model, batch) = tiny_instance(latent_dim, seed ^ (attempt << 40))?;
        let mut rng = SplitMix64::derive(seed, &[0x736d, attempt]);
        for (k, layer) in LATENT_PATH.iter().enumerate() {
            for v in model.params.value_mut(&format!("{layer}/w"))?.data_mut() {
                *v = if k == 0 { 0.5 * *v } else { 0.3 * v.abs() };
            }
            for v in model.params.value_mut(&format!("{layer}/b"))?.data_mut() {
                *v = if k == 0 { 3.0 + rng.uniform(-0.5, 0.5) } else { rng.uniform(0.0, 0.2) };
            }
        }
        if oracle::integrand_is_smooth(&model, &batch, NODES)? {
            return Ok((model, batch));
        }
    }
    Err(crate::Error::Config("no smooth tiny instance found".into()))
}

fn eval_loss(model: &CvaeModel, batch: &Batch, kind: LossKind, eps: &[Tensor], tape: &Tape) -> Result<f64> {
    let (loss, _) = loss_on_tape(model, batch, kind, eps, tape)?;
    Ok(loss.item())
}

fn loss_on_tape<'t>(
    model: &CvaeModel,
    batch: &Batch,
    kind: LossKind,
    eps: &[Tensor],
    tape: &'t Tape,
) -> Result<(Var<'t>, crate::LossBreakdown)> {
    match kind {
        LossKind::Cvae => model.loss_cvae(tape, batch, eps),
        LossKind::Fcn => model.loss_fcn(tape, batch),
        LossKind::Vae => model.loss_vae(tape, batch, eps),
        LossKind::ImageEncoder => model.loss_image_encoder(tape, batch, eps),
        LossKind::Hr => model.loss_hr(tape, batch),
    }
}

/// Worst relative error between backward and central differences over all
/// model parameters for one objective, tiny architecture with `d = 2`.
pub fn loss_gradient_error(kind: LossKind, seeds: &[u64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for &seed in seeds {
        let (mut model, batch) = tiny_instance(2, seed)?;
        let mut rng = SplitMix64::derive(seed, &[0x6570]);
        let eps = vec![Tensor::new(&[1, 2], rng.normals(2))?];
        let tape = Tape::new();
        let (loss, _) = loss_on_tape(&model, &batch, kind, &eps, &tape)?;
        model.params.zero_grad();
        tape.backward_into(loss, &mut model.params)?;
        let analytic = model.params.flatten_grads();
        let theta = model.params.flatten();
        let mut probe = CvaeModel {
            arch: model.arch.clone(),
            params: model.params.clone(),
        };
        let numeric = oracle::finite_diff_grad(
            |th| {
                probe.params.assign_flat(th)?;
                eval_loss(&probe, &batch, kind, &eps, &Tape::inference())
            },
            &theta,
            FD_STEP,
        )?;
        worst = worst.max(compare_gradients(&analytic, &numeric).max_rel);
    }
    Ok(worst)
}

pub fn gradient_checks(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for p in PRIMITIVES {
        let e = primitive_gradient_error(p.name, seeds)?;
        out.push(CheckResult::le(
            format!("grad/{}", p.name),
            e,
            GRAD_REL_TOL,
            format!("{} seeds", seeds.len()),
        ));
    }
    for kind in LossKind::ALL {
        let e = loss_gradient_error(kind, seeds)?;
        out.push(CheckResult::le(
            format!("grad/{}", kind.name()),
            e,
            GRAD_REL_TOL,
            format!("{} seeds, 8x8 input, d=2", seeds.len()),
        ));
    }
    Ok(out)
}

/// Closed-form KL under test.
pub type KlFn = fn(&GaussianParams, &GaussianParams) -> Result<f64>;

pub fn library_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    let tape = Tape::inference();
    Ok(kl_diag(&q.on_tape(&tape), &p.on_tape(&tape))?.item())
}

fn random_gaussian(rng: &mut SplitMix64, d: usize) -> GaussianParams {
    GaussianParams::new(
        (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .expect("matching lengths")
}

/// KL closed form against Monte Carlo on `pairs` random pairs with `d <= 8`,
/// plus the hand case `KL(N(1,1) || N(0,1)) = 1/2`.
pub fn kl_checks(kl: KlFn, pairs: usize, draws: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::derive(seed, &[0x4b4c]);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let d = 1 + (i % 8);
        let q = random_gaussian(&mut rng, d);
        let p = random_gaussian(&mut rng, d);
        let closed = kl(&q, &p)?;
        let (est, se) = oracle::mc_kl(&q, &p, draws, rng.next_u64())?;
        worst = worst.max((closed - est).abs() / se);
    }
    let hand = kl(
        &GaussianParams::new(vec![1.0], vec![0.0])?,
        &GaussianParams::standard(1),
    )?;
    Ok(vec![
        CheckResult::le(
            "kl/monte_carlo",
            worst,
            3.0,
            format!("max |closed - mc| / se over {pairs} pairs, {draws} draws"),
        ),
        CheckResult::le(
            "kl/hand_case",
            (hand - 0.5).abs(),
            1e-12,
            format!("KL(N(1,1) || N(0,1)) = {hand}"),
        ),
    ])
}

/// Result of the variational bound comparison on one tiny model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInstance {
    pub latent_dim: usize,
    pub elbo: f64,
    pub log_marginal: f64,
    pub log_marginal_refined: f64,
}

pub fn bound_instances(models: usize, seed: u64) -> Result<Vec<BoundInstance>> {
    (0..models)
        .map(|i| {
            let d = 1 + i % 2;
            let (model, batch) = smooth_tiny_instance(d, seed.wrapping_add(i as u64))?;
            let elbo = oracle::quadrature_elbo(&model, &batch, if d == 1 { 128 } else { 64 })?.elbo;
            Ok(BoundInstance {
                latent_dim: d,
                elbo,
                log_marginal: oracle::quadrature_log_marginal(&model, &batch, 64)?,
                log_marginal_refined: oracle::quadrature_log_marginal(&model, &batch, 128)?,
            })
        })
        .collect()
}

pub fn bound_checks(models: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let inst = bound_instances(models, seed)?;
    let gap = inst
        .iter()
        .map(|b| b.elbo - b.log_marginal_refined)
        .fold(f64::NEG_INFINITY, f64::max);
    let refine = inst
        .iter()
        .map(|b| (b.log_marginal - b.log_marginal_refined).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        CheckResult::le(
            "elbo/bound",
            gap,
            BOUND_SLACK,
            format!("max (elbo - log p(s|x)) over {models} models, d in {{1,2}}"),
        ),
        CheckResult::le(
            "elbo/refinement",
            refine,
            REFINE_TOL,
            "max |log p(s|x) at 64 nodes - at 128 nodes|".into(),
        ),
    ])
}

/// Zero the global-branch fusion weights so the decoder ignores `z`.
pub fn ignore_latent(model: &mut CvaeModel) -> Result<()> {
    let dc = model.arch.decoder_channels;
    let w = model.params.value_mut("decoder/fuse_conv/w")?;
    let s = w.shape().to_vec();
    let (cout, cin, kk) = (s[0], s[1], s[2] * s[3]);
    let d = w.data_mut();
    for o in 0..cout {
        for i in 0..dc.min(cin) {
            d[(o * cin + i) * kk..(o * cin + i + 1) * kk].fill(0.0);
        }
    }
    Ok(())
}

pub fn sgvb_checks(draws: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let (model, batch) = smooth_tiny_instance(2, seed)?;
    let full = oracle::sgvb_gradient_check(&model, &batch, draws, seed)?;
    let half = oracle::sgvb_gradient_check(&model, &batch, draws / 2, seed ^ 0x68)?;
    let mut flat = model.clone();
    ignore_latent(&mut flat)?;
    let constant = oracle::sgvb_gradient_check(&flat, &batch, draws / 10, seed)?;
    let const_z = constant.max_z_score();
    let const_ref = constant
        .coordinates
        .iter()
        .map(|c| c.reference.abs())
        .fold(0.0, f64::max);

    let ratios: Vec<f64> = full
        .coordinates
        .iter()
        .zip(&half.coordinates)
        .filter(|(f, _)| f.std_error > 0.0)
        .map(|(f, h)| (h.std_error / f.std_error).powi(2))
        .collect();
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    Ok(vec![
        CheckResult::le(
            "sgvb/unbiased",
            full.max_z_score(),
            3.0,
            format!("max |estimate - reference| / se over {} coordinates, {} draws", full.coordinates.len(), full.n_samples),
        ),
        CheckResult {
            name: "sgvb/constant_integrand".into(),
            passed: const_z <= 3.0 && const_ref == 0.0,
            measured: const_z,
            tolerance: 3.0,
            detail: format!("decoder ignores z; max |reference| = {const_ref:e}"),
        },
        CheckResult {
            name: "sgvb/se_scaling".into(),
            passed: (1.5..=2.5).contains(&mean_ratio),
            measured: mean_ratio,
            tolerance: 2.5,
            detail: "mean se^2(n/2) / se^2(n), expected in [1.5, 2.5]".into(),
        },
    ])
}

/// Sizes of the verification runs.
#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub grad_seeds: Vec<u64>,
    pub kl_pairs: usize,
    pub kl_draws: usize,
    pub bound_models: usize,
    pub sgvb_draws: usize,
    pub seed: u64,
    pub kl: KlFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            grad_seeds: (0..20).collect(),
            kl_pairs: 20,
            kl_draws: 1_000_000,
            bound_models: 20,
            sgvb_draws: 100_000,
            seed: 0,
            kl: library_kl,
        }
    }
}

pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = gradient_checks(&opts.grad_seeds)?;
    checks.extend(kl_checks(opts.kl, opts.kl_pairs, opts.kl_draws, opts.seed)?);
    checks.extend(bound_checks(opts.bound_models, opts.seed)?);
    checks.extend(sgvb_checks(opts.sgvb_draws, opts.seed)?);
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn negated(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
        library_kl(q, p).map(|v| -v)
    }

    #[test]
    fn kl_checks_catch_a_sign_error() {
        let good = kl_checks(library_kl, 4, 20_000, 1).unwrap();
        assert!(good.iter().all(|c| c.passed), "{good:?}");
        let bad = kl_checks(negated, 4, 20_000, 1).unwrap();
        assert!(bad.iter().all(|c| !c.passed));
        let report = VerifyReport { checks: bad };
        assert_eq!(report.first_failure().unwrap().name, "kl/monte_carlo");
        assert!(!report.passed());
    }

    #[test]
    fn bound_holds_on_tiny_models() {
        for b in bound_instances(2, 3).unwrap() {
            assert!(b.elbo <= b.log_marginal_refined + BOUND_SLACK, "{b:?}");
            assert!((b.log_marginal - b.log_marginal_refined).abs() <= REFINE_TOL);
        }
    }

    #[test]
    fn primitive_list_is_checked() {
        let names = primitive_names();
        assert!(names.contains(&"kl_diag") && names.contains(&"conv2d"));
        assert!(primitive_gradient_error("matmul", &[0, 1]).unwrap() <= GRAD_REL_TOL);
    }

    #[test]
    fn ignoring_latent_makes_decoder_constant_in_z() {
        let (mut model, batch) = smooth_tiny_instance(2, 0).unwrap();
        ignore_latent(&mut model).unwrap();
        let tape = Tape::inference();
        let at = |z: Vec<f64>| {
            let z = tape.constant(Tensor::new(&[1, 2], z).unwrap());
            model.decode(&tape, z, &batch.x).unwrap().value().data().to_vec()
        };
        assert_eq!(at(vec![0.0, 0.0]), at(vec![3.0, -2.0]));
    }
}
