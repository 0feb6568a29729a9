//! The conditional VAE: shared trunk, image encoder `p(z|x)`, segmentation
//! encoder `q(z|s)`, hybrid decoder `p(s|z,x)`, the disposable FCN head used
//! for trunk pretraining, and the optional high-resolution head.
//!
//! Parameter names are `group/layer/{w,b}`; the group is one of
//! [`GROUPS`].

use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Tape, Var};
use crate::distributions::{kl_diag, kl_to_standard, reparam_sample, DiagGaussian};
use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const GROUPS: [&str; 6] = ["trunk", "img_enc", "seg_enc", "decoder", "fcn_head", "hr_head"];

/// Bias of the log-variance heads at initialisation.
pub const LOG_VAR_BIAS_INIT: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Square input side `H = W`.
    pub input_size: usize,
    pub classes: usize,
    pub latent_dim: usize,
    pub trunk_channels: [usize; 2],
    pub encoder_channels: usize,
    /// Side of the downsampled one-hot mask fed to the segmentation encoder.
    pub seg_size: usize,
    pub seg_channels: [usize; 2],
    /// Channels of the global feature map produced by the decoder's affine layer.
    pub global_channels: usize,
    pub decoder_channels: usize,
    pub hr_channels: usize,
    pub hr_input_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            classes: 2,
            latent_dim: 16,
            trunk_channels: [16, 32],
            encoder_channels: 64,
            seg_size: 16,
            seg_channels: [16, 32],
            global_channels: 64,
            decoder_channels: 32,
            hr_channels: 16,
            hr_input_channels: 8,
        }
    }
}

impl ArchConfig {
    /// A very small network on 8x8 inputs for gradient and quadrature checks.
    pub fn tiny(latent_dim: usize) -> Self {
        Self {
            input_size: 8,
            classes: 2,
            latent_dim,
            trunk_channels: [2, 3],
            encoder_channels: 3,
            seg_size: 4,
            seg_channels: [2, 3],
            global_channels: 3,
            decoder_channels: 3,
            hr_channels: 2,
            hr_input_channels: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return bad("input_size must be a positive multiple of 8");
        }
        if self.seg_size == 0 || self.seg_size % 4 != 0 || self.seg_size > self.input_size {
            return bad("seg_size must be a positive multiple of 4 no larger than input_size");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.classes > 256 {
            return bad("classes must fit in a byte");
        }
        let widths = [
            self.latent_dim,
            self.trunk_channels[0],
            self.trunk_channels[1],
            self.encoder_channels,
            self.seg_channels[0],
            self.seg_channels[1],
            self.global_channels,
            self.decoder_channels,
            self.hr_channels,
            self.hr_input_channels,
        ];
        if widths.contains(&0) {
            return bad("all widths must be positive");
        }
        Ok(())
    }

    /// Side of the low-resolution prediction (`H / 4`).
    pub fn lr_size(&self) -> usize {
        self.input_size / 4
    }
}

/// Images `N x 1 x H x W` with label masks `N x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(x: Tensor, labels: Vec<u8>) -> Result<Self> {
        match x.shape() {
            &[n, 1, h, w] if labels.len() == n * h * w => Ok(Self { x, labels }),
            s => Err(Error::shape(format!(
                "batch images {s:?} with {} labels",
                labels.len()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.x.shape()[2], self.x.shape()[3])
    }
}

/// Nearest-neighbour resampling of label masks `N x H x W` to
/// `N x size x size`: output pixel `i` reads source pixel
/// `floor((i + 0.5) * H / size)`.
pub fn downsample_labels(labels: &[u8], n: usize, h: usize, w: usize, size: usize) -> Vec<u8> {
    let src = |i: usize, len: usize| (((i as f64 + 0.5) * len as f64) / size as f64).floor() as usize;
    let mut out = Vec::with_capacity(n * size * size);
    for s in 0..n {
        for i in 0..size {
            let y = src(i, h).min(h - 1);
            for j in 0..size {
                let x = src(j, w).min(w - 1);
                out.push(labels[(s * h + y) * w + x]);
            }
        }
    }
    out
}

/// Downsample then expand to one-hot channels: `N x C x size x size`.
pub fn one_hot_downsample(
    labels: &[u8],
    n: usize,
    h: usize,
    w: usize,
    size: usize,
    classes: usize,
) -> Result<Tensor> {
    if size > h || size > w || size == 0 {
        return Err(Error::shape(format!("cannot downsample {h}x{w} to {size}")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label: l as usize,
            classes,
        });
    }
    let small = downsample_labels(labels, n, h, w, size);
    let plane = size * size;
    let mut data = vec![0.0; n * classes * plane];
    for s in 0..n {
        for p in 0..plane {
            let l = small[s * plane + p] as usize;
            data[(s * classes + l) * plane + p] = 1.0;
        }
    }
    Tensor::new(&[n, classes, size, size], data)
}

/// Scalar parts of the objective being minimised (the negated bound).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub kl: f64,
    pub recon_nll: f64,
    pub objective: f64,
}

/// Output of the hybrid decoder.
pub struct Decoded<'t> {
    /// Penultimate `decoder_channels` feature map at `H/4`.
    pub features: Var<'t>,
    pub logits: Var<'t>,
}

pub struct TrunkOut<'t> {
    /// After the first conv/pool block (`H/2`).
    pub block1: Var<'t>,
    /// After the second block (`H/4`).
    pub block2: Var<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    Mean,
    Sample(u64),
}

pub struct Prediction {
    /// Argmax labels `N x h x w`.
    pub labels: Vec<u8>,
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    pub arch: ArchConfig,
    pub params: ParamRegistry,
}

fn glorot(rng: &mut SplitMix64, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

struct Init<'a> {
    reg: &'a mut ParamRegistry,
    seed: u64,
}

impl Init<'_> {
    fn rng(&self, name: &str) -> SplitMix64 {
        let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        });
        SplitMix64::derive(self.seed, &[tag])
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let mut r = self.rng(name);
        let w = glorot(&mut r, &[cout, cin, k, k], cin * k * k, cout * k * k);
        self.reg.insert(format!("{name}/w"), w)?;
        self.reg.insert(format!("{name}/b"), Tensor::zeros(&[cout]))
    }

    fn affine(&mut self, name: &str, din: usize, dout: usize, bias: f64) -> Result<()> {
        let mut r = self.rng(name);
        let w = glorot(&mut r, &[din, dout], din, dout);
        self.reg.insert(format!("{name}/w"), w)?;
        self.reg.insert(format!("{name}/b"), Tensor::full(&[dout], bias))
    }
}

impl CvaeModel {
    /// Randomly initialised model without the high-resolution head.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let a = &arch;
        let mut reg = ParamRegistry::new();
        let mut init = Init {
            reg: &mut reg,
            seed,
        };
        let [t0, t1] = a.trunk_channels;
        let [s0, s1] = a.seg_channels;
        let (d, dc, c) = (a.latent_dim, a.decoder_channels, a.classes);
        let h8 = a.input_size / 8;
        let s4 = a.seg_size / 4;

        init.conv("trunk/conv1", 1, t0, 3)?;
        init.conv("trunk/conv2", t0, t1, 3)?;

        init.conv("img_enc/conv", t1, a.encoder_channels, 3)?;
        let flat = a.encoder_channels * h8 * h8;
        init.affine("img_enc/mu", flat, d, 0.0)?;
        init.affine("img_enc/logvar", flat, d, LOG_VAR_BIAS_INIT)?;

        init.conv("seg_enc/conv1", c, s0, 3)?;
        init.conv("seg_enc/conv2", s0, s1, 3)?;
        init.affine("seg_enc/mu", s1 * s4 * s4, d, 0.0)?;
        init.affine("seg_enc/logvar", s1 * s4 * s4, d, LOG_VAR_BIAS_INIT)?;

        init.affine("decoder/global_fc", d, a.global_channels * h8 * h8, 0.0)?;
        init.conv("decoder/global_conv", a.global_channels, dc, 3)?;
        init.conv("decoder/local_conv", t1, dc, 3)?;
        init.conv("decoder/fuse_conv", 2 * dc, dc, 3)?;
        init.conv("decoder/fuse_1x1", dc, dc, 1)?;
        init.conv("decoder/classifier", dc, c, 1)?;

        init.conv("fcn_head/conv", t1, dc, 3)?;
        init.conv("fcn_head/classifier", dc, c, 1)?;

        Ok(Self { arch, params: reg })
    }

    /// Attach the high-resolution head. Its output projection starts at zero
    /// so the head initially reproduces the upsampled low-resolution logits.
    pub fn add_hr_head(&mut self, seed: u64) -> Result<()> {
        let a = self.arch.clone();
        let mut init = Init {
            reg: &mut self.params,
            seed: seed ^ 0x4852,
        };
        let (hc, hi) = (a.hr_channels, a.hr_input_channels);
        init.conv("hr_head/skip1_conv", a.decoder_channels + a.trunk_channels[0], hc, 3)?;
        init.conv("hr_head/input_conv", 1, hi, 3)?;
        init.conv("hr_head/skip2_conv", hc + hi, hc, 3)?;
        init.conv("hr_head/classifier", hc, a.classes, 1)?;
        let w = self.params.value_mut("hr_head/classifier/w")?;
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    pub fn has_hr_head(&self) -> bool {
        self.params.contains("hr_head/classifier/w")
    }

    /// Rebuild from stored parameters. Names, order and shapes must be
    /// exactly those `new` (plus `add_hr_head`, if present) would create.
    pub fn from_parts(arch: ArchConfig, params: ParamRegistry) -> Result<Self> {
        let mut layout = Self::new(arch.clone(), 0)?;
        if params.contains("hr_head/classifier/w") {
            layout.add_hr_head(0)?;
        }
        let expected: Vec<(&str, &[usize])> =
            layout.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != found {
            let first = expected
                .iter()
                .zip(&found)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| format!("expected {} parameters, found {}", expected.len(), found.len()));
            return Err(Error::ManifestCorrupt(format!("parameter layout: {first}")));
        }
        Ok(Self { arch, params })
    }

    fn p<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        tape.param(&self.params, name)
    }

    fn conv<'t>(&self, tape: &'t Tape, x: Var<'t>, layer: &str, pad: usize) -> Result<Var<'t>> {
        let w = self.p(tape, &format!("{layer}/w"))?;
        let b = self.p(tape, &format!("{layer}/b"))?;
        x.conv2d(w, b, 1, pad)
    }

    fn affine<'t>(&self, tape: &'t Tape, x: Var<'t>, layer: &str) -> Result<Var<'t>> {
        let w = self.p(tape, &format!("{layer}/w"))?;
        let b = self.p(tape, &format!("{layer}/b"))?;
        x.affine(w, b)
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = self.arch.input_size;
        match x.shape() {
            &[_, 1, h, w] if h == s && w == s => Ok(()),
            other => Err(Error::shape(format!(
                "expected N x 1 x {s} x {s} images, got {other:?}"
            ))),
        }
    }

    /// Shared conv/pool blocks.
    pub fn trunk<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<TrunkOut<'t>> {
        let block1 = self.conv(tape, x, "trunk/conv1", 1)?.relu().maxpool2d(2, 2)?;
        let block2 = self.conv(tape, block1, "trunk/conv2", 1)?.relu().maxpool2d(2, 2)?;
        Ok(TrunkOut { block1, block2 })
    }

    /// Image-encoder layers above the shared trunk.
    pub fn encode_image_from_trunk<'t>(
        &self,
        tape: &'t Tape,
        trunk: Var<'t>,
    ) -> Result<DiagGaussian<'t>> {
        let h = self.conv(tape, trunk, "img_enc/conv", 1)?.relu().maxpool2d(2, 2)?;
        let flat = h.flatten()?;
        DiagGaussian::new(
            self.affine(tape, flat, "img_enc/mu")?,
            self.affine(tape, flat, "img_enc/logvar")?,
        )
    }

    /// `p(z|x)` as a batch of `N` Gaussians.
    pub fn encode_image<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<DiagGaussian<'t>> {
        self.check_images(x)?;
        let t = self.trunk(tape, tape.constant(x.clone()))?;
        self.encode_image_from_trunk(tape, t.block2)
    }

    /// `q(z|s)` from full-resolution label masks `N x H x W`.
    pub fn encode_segmentation<'t>(
        &self,
        tape: &'t Tape,
        labels: &[u8],
        n: usize,
    ) -> Result<DiagGaussian<'t>> {
        let a = &self.arch;
        let h = a.input_size;
        if labels.len() != n * h * h {
            return Err(Error::shape(format!(
                "{} labels for {n} masks of {h}x{h}",
                labels.len()
            )));
        }
        let oh = one_hot_downsample(labels, n, h, h, a.seg_size, a.classes)?;
        let x = tape.constant(oh);
        let h1 = self.conv(tape, x, "seg_enc/conv1", 1)?.relu().maxpool2d(2, 2)?;
        let h2 = self.conv(tape, h1, "seg_enc/conv2", 1)?.relu().maxpool2d(2, 2)?;
        let flat = h2.flatten()?;
        DiagGaussian::new(
            self.affine(tape, flat, "seg_enc/mu")?,
            self.affine(tape, flat, "seg_enc/logvar")?,
        )
    }

    /// Hybrid decoder. With `trunk = None` the local branch is replaced by
    /// zeros, giving the z-only decoder used for segmentation-VAE
    /// pretraining and image-encoder-only predictions.
    pub fn decode_from_trunk<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        trunk: Option<Var<'t>>,
    ) -> Result<Decoded<'t>> {
        let a = &self.arch;
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != a.latent_dim {
            return Err(Error::shape(format!(
                "latent codes must be N x {}, got {zs:?}",
                a.latent_dim
            )));
        }
        let n = zs[0];
        let h8 = a.input_size / 8;
        let g = self
            .affine(tape, z, "decoder/global_fc")?
            .relu()
            .reshape(&[n, a.global_channels, h8, h8])?
            .upsample_nearest(2)?;
        let global = self.conv(tape, g, "decoder/global_conv", 1)?.relu();
        let local = match trunk {
            Some(t) => {
                if t.shape()[0] != n {
                    return Err(Error::shape("latent and image batch sizes differ"));
                }
                self.conv(tape, t, "decoder/local_conv", 1)?.relu()
            }
            None => tape.constant(Tensor::zeros(&global.shape())),
        };
        let fused = concat(&[global, local], 1)?;
        let f = self.conv(tape, fused, "decoder/fuse_conv", 1)?.relu();
        let features = self.conv(tape, f, "decoder/fuse_1x1", 0)?.relu();
        let logits = self.conv(tape, features, "decoder/classifier", 0)?;
        Ok(Decoded { features, logits })
    }

    /// `p(s|z,x)` logits at `H/4`.
    pub fn decode<'t>(&self, tape: &'t Tape, z: Var<'t>, x: &Tensor) -> Result<Var<'t>> {
        self.check_images(x)?;
        let t = self.trunk(tape, tape.constant(x.clone()))?;
        Ok(self.decode_from_trunk(tape, z, Some(t.block2))?.logits)
    }

    /// Disposable classifier over the trunk used for FCN pretraining.
    pub fn fcn_logits<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<Var<'t>> {
        self.check_images(x)?;
        let t = self.trunk(tape, tape.constant(x.clone()))?;
        let h = self.conv(tape, t.block2, "fcn_head/conv", 1)?.relu();
        self.conv(tape, h, "fcn_head/classifier", 0)
    }

    /// Labels downsampled to the decoder resolution.
    pub fn lr_targets(&self, batch: &Batch) -> Vec<u8> {
        let (h, w) = batch.size();
        downsample_labels(&batch.labels, batch.len(), h, w, self.arch.lr_size())
    }

    /// Minimised objective `KL(q(z|s) || p(z|x)) - E_q[log p(s|z,x)]`,
    /// batch-averaged, with the expectation estimated from one
    /// reparameterised draw per entry of `eps` (each `N x d`).
    pub fn loss_cvae<'t>(
        &self,
        tape: &'t Tape,
        batch: &Batch,
        eps: &[Tensor],
    ) -> Result<(Var<'t>, LossBreakdown)> {
        if eps.is_empty() {
            return Err(Error::Config("at least one latent draw (L >= 1) is required".into()));
        }
        self.check_images(&batch.x)?;
        let n = batch.len();
        let q = self.encode_segmentation(tape, &batch.labels, n)?;
        let t = self.trunk(tape, tape.constant(batch.x.clone()))?;
        let p = self.encode_image_from_trunk(tape, t.block2)?;
        self.assemble_cvae_loss(tape, batch, &q, &p, t.block2, eps)
    }

    /// The objective from already-computed encoder outputs and trunk
    /// features; exposed so callers can route the trunk differently per path.
    pub fn assemble_cvae_loss<'t>(
        &self,
        tape: &'t Tape,
        batch: &Batch,
        q: &DiagGaussian<'t>,
        p: &DiagGaussian<'t>,
        decoder_trunk: Var<'t>,
        eps: &[Tensor],
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let n = batch.len();
        let targets = self.lr_targets(batch);
        let kl = kl_diag(q, p)?.scale(1.0 / n as f64);
        let recon = self.recon_nll(tape, q, Some(decoder_trunk), &targets, eps)?;
        breakdown(kl, recon)
    }

    /// `-E_q[log p(s|z, .)]` averaged over the draws in `eps`, batch-averaged.
    fn recon_nll<'t>(
        &self,
        tape: &'t Tape,
        q: &DiagGaussian<'t>,
        trunk: Option<Var<'t>>,
        targets: &[u8],
        eps: &[Tensor],
    ) -> Result<Var<'t>> {
        if eps.is_empty() {
            return Err(Error::Config("at least one latent draw (L >= 1) is required".into()));
        }
        let n = q.mu.shape()[0];
        let mut recon: Option<Var<'t>> = None;
        for e in eps {
            if e.shape() != [n, self.arch.latent_dim] {
                return Err(Error::shape(format!("eps block {:?}", e.shape())));
            }
            let z = reparam_sample(q, e)?;
            let logits = self.decode_from_trunk(tape, z, trunk)?.logits;
            let (nll, _) = logits.softmax_ce_pixelwise(targets)?;
            recon = Some(match recon {
                None => nll,
                Some(r) => r.add(nll)?,
            });
        }
        Ok(recon.expect("eps non-empty").scale(1.0 / eps.len() as f64))
    }

    /// Trunk pretraining objective: pixelwise cross-entropy of the FCN head.
    pub fn loss_fcn<'t>(&self, tape: &'t Tape, batch: &Batch) -> Result<(Var<'t>, LossBreakdown)> {
        let logits = self.fcn_logits(tape, &batch.x)?;
        let (nll, _) = logits.softmax_ce_pixelwise(&self.lr_targets(batch))?;
        breakdown(tape.constant(Tensor::scalar(0.0)), nll)
    }

    /// Segmentation VAE objective: `KL(q(z|s) || N(0, I))` plus the
    /// reconstruction NLL through the z-only decoder.
    pub fn loss_vae<'t>(
        &self,
        tape: &'t Tape,
        batch: &Batch,
        eps: &[Tensor],
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let n = batch.len();
        let q = self.encode_segmentation(tape, &batch.labels, n)?;
        let kl = kl_to_standard(&q).scale(1.0 / n as f64);
        let recon = self.recon_nll(tape, &q, None, &self.lr_targets(batch), eps)?;
        breakdown(kl, recon)
    }

    /// Image-encoder alignment objective: `KL(q(z|s) || p(z|x))` plus the
    /// reconstruction NLL of the z-only decoder at `z ~ q(z|s)`.
    pub fn loss_image_encoder<'t>(
        &self,
        tape: &'t Tape,
        batch: &Batch,
        eps: &[Tensor],
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let n = batch.len();
        let q = self.encode_segmentation(tape, &batch.labels, n)?;
        let p = self.encode_image(tape, &batch.x)?;
        let kl = kl_diag(&q, &p)?.scale(1.0 / n as f64);
        let recon = self.recon_nll(tape, &q, None, &self.lr_targets(batch), eps)?;
        breakdown(kl, recon)
    }

    /// Full-resolution cross-entropy of the HR head, with `z` the mean of
    /// `p(z|x)`.
    pub fn loss_hr<'t>(&self, tape: &'t Tape, batch: &Batch) -> Result<(Var<'t>, LossBreakdown)> {
        let logits = self.hr_logits(tape, &batch.x, PredictMode::Mean)?;
        let (nll, _) = logits.softmax_ce_pixelwise(&batch.labels)?;
        breakdown(tape.constant(Tensor::scalar(0.0)), nll)
    }

    /// Test-time path: `z` from `p(z|x)`, then the hybrid decoder.
    pub fn predict(&self, x: &Tensor, mode: PredictMode) -> Result<Prediction> {
        let tape = Tape::inference();
        self.check_images(x)?;
        let t = self.trunk(&tape, tape.constant(x.clone()))?;
        let p = self.encode_image_from_trunk(&tape, t.block2)?;
        let z = self.test_code(&p, mode)?;
        let logits = self.decode_from_trunk(&tape, z, Some(t.block2))?.logits;
        Ok(argmax_prediction(&logits.value()))
    }

    fn test_code<'t>(&self, p: &DiagGaussian<'t>, mode: PredictMode) -> Result<Var<'t>> {
        match mode {
            PredictMode::Mean => Ok(p.mu),
            PredictMode::Sample(seed) => {
                let shape = p.mu.shape();
                let mut rng = SplitMix64::derive(seed, &[0x5a]);
                let eps = Tensor::new(&shape, rng.normals(shape.iter().product()))?;
                reparam_sample(p, &eps)
            }
        }
    }

    /// Decode from the mean of `p(z|x)` through the z-only decoder.
    pub fn predict_image_encoder_only(&self, x: &Tensor) -> Result<Prediction> {
        let tape = Tape::inference();
        let p = self.encode_image(&tape, x)?;
        let logits = self.decode_from_trunk(&tape, p.mu, None)?.logits;
        Ok(argmax_prediction(&logits.value()))
    }

    pub fn predict_fcn(&self, x: &Tensor) -> Result<Prediction> {
        let tape = Tape::inference();
        let logits = self.fcn_logits(&tape, x)?;
        Ok(argmax_prediction(&logits.value()))
    }

    /// Full-resolution logits: the upsampled low-resolution logits plus a
    /// correction computed from skip connections to the trunk's first block
    /// and to a convolution of the raw input.
    pub fn hr_logits<'t>(&self, tape: &'t Tape, x: &Tensor, mode: PredictMode) -> Result<Var<'t>> {
        if !self.has_hr_head() {
            return Err(Error::MissingHRHead);
        }
        self.check_images(x)?;
        let xin = tape.constant(x.clone());
        let t = self.trunk(tape, xin)?;
        let p = self.encode_image_from_trunk(tape, t.block2)?;
        let z = self.test_code(&p, mode)?;
        let dec = self.decode_from_trunk(tape, z, Some(t.block2))?;
        let u1 = concat(&[dec.features.upsample_nearest(2)?, t.block1], 1)?;
        let a = self.conv(tape, u1, "hr_head/skip1_conv", 1)?.relu();
        let raw = self.conv(tape, xin, "hr_head/input_conv", 1)?.relu();
        let u2 = concat(&[a.upsample_nearest(2)?, raw], 1)?;
        let b = self.conv(tape, u2, "hr_head/skip2_conv", 1)?.relu();
        let refine = self.conv(tape, b, "hr_head/classifier", 0)?;
        dec.logits.upsample_nearest(4)?.add(refine)
    }

    pub fn predict_hr(&self, x: &Tensor) -> Result<Prediction> {
        let tape = Tape::inference();
        let logits = self.hr_logits(&tape, x, PredictMode::Mean)?;
        Ok(argmax_prediction(&logits.value()))
    }
}

fn breakdown<'t>(kl: Var<'t>, recon: Var<'t>) -> Result<(Var<'t>, LossBreakdown)> {
    let objective = kl.add(recon)?;
    Ok((
        objective,
        LossBreakdown {
            kl: kl.item(),
            recon_nll: recon.item(),
            objective: objective.item(),
        },
    ))
}

/// Per-pixel argmax over the channel axis of `N x C x h x w` logits; ties go
/// to the lowest class.
pub fn argmax_prediction(logits: &Tensor) -> Prediction {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut labels = Vec::with_capacity(n * hw);
    for i in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(i * c + ch) * hw + px] > d[(i * c + best) * hw + px] {
                    best = ch;
                }
            }
            labels.push(best as u8);
        }
    }
    Prediction {
        labels,
        logits: logits.clone(),
    }
}

/// Softmax over the channel axis of `N x C x h x w` logits.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = vec![0.0; d.len()];
    for i in 0..n {
        for px in 0..hw {
            let m = (0..c)
                .map(|ch| d[(i * c + ch) * hw + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (d[(i * c + ch) * hw + px] - m).exp()).sum();
            for ch in 0..c {
                let j = (i * c + ch) * hw + px;
                out[j] = (d[j] - m).exp() / z;
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}
