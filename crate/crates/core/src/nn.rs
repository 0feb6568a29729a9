//! Differentiable layers over `N x C x H x W` tensors.

use crate::autograd::{Op, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

pub(crate) struct Conv2dRecord {
    pub x: usize,
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_hw: (usize, usize),
    /// Per-sample im2col buffers (`K x P` each), kept only when the weight
    /// needs a gradient.
    pub cols: Option<Vec<f64>>,
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::shape(format!("{what}: expected rank-4, got {s:?}"))),
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation with zero padding and a per-channel bias.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&w);
        self.same_tape(&b);
        if stride < 1 {
            return Err(Error::InvalidStride);
        }
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let [n, cin, h, wd] = dims4(&xv, "conv2d input")?;
        let [cout, wcin, kh, kw] = dims4(&wv, "conv2d weight")?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if bv.shape() != [cout] {
            return Err(Error::shape(format!("conv2d bias {:?}", bv.shape())));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        let g = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (g.k(), g.p());
        let keep_cols = w.requires_grad();
        let mut cols_all = if keep_cols { vec![0.0; n * k * p] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; k * p] };
        let mut out = vec![0.0; n * cout * p];
        let wm = MatRef::row_major(wv.data(), cout, k);
        for s in 0..n {
            let xs = &xv.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            let cols: &mut [f64] = if keep_cols {
                &mut cols_all[s * k * p..(s + 1) * k * p]
            } else {
                &mut scratch
            };
            im2col(xs, &g, cols);
            let os = &mut out[s * cout * p..(s + 1) * cout * p];
            for (c, chunk) in os.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv.data()[c]);
            }
            gemm(1.0, wm, MatRef::row_major(cols, k, p), 1.0, os);
        }
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        let rec = Conv2dRecord {
            x: self.id(),
            w: w.id(),
            b: b.id(),
            stride,
            pad,
            out_hw: (g.oh, g.ow),
            cols: keep_cols.then_some(cols_all),
        };
        Ok(self.tape().push(
            Tensor::from_parts(vec![n, cout, g.oh, g.ow], out),
            Op::Conv2d(rec),
            rg,
        ))
    }

    /// Max pooling with window `k` and stride `s`. Ties go to the first
    /// element in row-major scan order.
    pub fn maxpool2d(self, k: usize, s: usize) -> Result<Var<'t>> {
        if k < 1 || s < 1 {
            return Err(Error::InvalidStride);
        }
        let xv = self.value();
        let [n, c, h, w] = dims4(&xv, "maxpool2d")?;
        if h < k || w < k {
            return Err(Error::shape(format!("maxpool2d window {k} over {h}x{w}")));
        }
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let xd = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = base + oy * s * w + ox * s;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oy * s + i) * w + ox * s + j;
                            if xd[idx] > best {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        Ok(self.tape().push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool {
                x: self.id(),
                argmax,
            },
            self.requires_grad(),
        ))
    }

    /// Nearest-neighbour upsampling: every element becomes a
    /// `factor x factor` block.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        if factor < 1 {
            return Err(Error::InvalidFactor);
        }
        let xv = self.value();
        let [n, c, h, w] = dims4(&xv, "upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        Ok(self.tape().push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample {
                x: self.id(),
                factor,
            },
            self.requires_grad(),
        ))
    }

    /// `x W + b` for `x: N x D`, `W: D x M`, `b: M`.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let bs = b.shape();
        let ws = w.shape();
        if ws.len() != 2 || bs != [ws[1]] {
            return Err(Error::shape(format!("affine weight {ws:?} bias {bs:?}")));
        }
        self.matmul(w)?.add(b)
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| if v > 0.0 { v } else { 0.0 });
        self.tape()
            .push(out, Op::Relu { x: self.id() }, self.requires_grad())
    }

    /// Flatten all but the leading (batch) dimension.
    pub fn flatten(self) -> Result<Var<'t>> {
        let s = self.shape();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(&[n, rest])
    }

    /// Pixelwise softmax cross-entropy over the channel axis.
    ///
    /// Returns the loss `-(1/N) * sum_n sum_pixels log softmax(logits)[label]`
    /// together with the (non-differentiable) log-probabilities.
    pub fn softmax_ce_pixelwise(self, labels: &[u8]) -> Result<(Var<'t>, Tensor)> {
        let lv = self.value();
        let [n, c, h, w] = dims4(&lv, "softmax_ce_pixelwise")?;
        if c < 2 {
            return Err(Error::shape("softmax_ce_pixelwise needs at least 2 classes"));
        }
        if labels.len() != n * h * w {
            return Err(Error::shape(format!(
                "labels have {} entries, logits need {}",
                labels.len(),
                n * h * w
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: c,
            });
        }
        let hw = h * w;
        let ld = lv.data();
        let mut logp = vec![0.0; ld.len()];
        let mut dlogits = vec![0.0; ld.len()];
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        for s in 0..n {
            let base = s * c * hw;
            for px in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(ld[base + ch * hw + px]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    z += (ld[base + ch * hw + px] - m).exp();
                }
                let lse = m + z.ln();
                let label = labels[s * hw + px] as usize;
                for ch in 0..c {
                    let i = base + ch * hw + px;
                    logp[i] = ld[i] - lse;
                    let prob = logp[i].exp();
                    dlogits[i] = (prob - if ch == label { 1.0 } else { 0.0 }) * inv_n;
                }
                total -= logp[base + label * hw + px];
            }
        }
        let loss = self.tape().push(
            Tensor::scalar(total * inv_n),
            Op::SoftmaxCe {
                logits: self.id(),
                dlogits,
            },
            self.requires_grad(),
        );
        Ok((loss, Tensor::from_parts(lv.shape().to_vec(), logp)))
    }
}

pub(crate) fn conv2d_backward(
    rec: &Conv2dRecord,
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    want: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let [n, cin, h, wd] = dims4(x, "").expect("checked in forward");
    let [cout, _, kh, kw] = dims4(w, "").expect("checked in forward");
    let geom = ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride: rec.stride,
        pad: rec.pad,
        oh: rec.out_hw.0,
        ow: rec.out_hw.1,
    };
    let (k, p) = (geom.k(), geom.p());
    let gd = g.data();

    let gb = want[2].then(|| {
        let mut db = vec![0.0; cout];
        for s in 0..n {
            for (c, d) in db.iter_mut().enumerate() {
                let off = (s * cout + c) * p;
                *d += gd[off..off + p].iter().sum::<f64>();
            }
        }
        Tensor::from_parts(vec![cout], db)
    });

    let gw = want[1].then(|| {
        let cols = rec.cols.as_ref().expect("cols saved when weight needs grad");
        let mut dw = vec![0.0; cout * k];
        for s in 0..n {
            gemm(
                1.0,
                MatRef::row_major(&gd[s * cout * p..(s + 1) * cout * p], cout, p),
                MatRef::row_major(&cols[s * k * p..(s + 1) * k * p], k, p).t(),
                1.0,
                &mut dw,
            );
        }
        Tensor::from_parts(w.shape().to_vec(), dw)
    });

    let gx = want[0].then(|| {
        let mut dx = vec![0.0; x.len()];
        let mut dcols = vec![0.0; k * p];
        let wt = MatRef::row_major(w.data(), cout, k).t();
        let plane = cin * h * wd;
        for s in 0..n {
            gemm(
                1.0,
                wt,
                MatRef::row_major(&gd[s * cout * p..(s + 1) * cout * p], cout, p),
                0.0,
                &mut dcols,
            );
            col2im_add(&dcols, &geom, &mut dx[s * plane..(s + 1) * plane]);
        }
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    (gx, gw, gb)
}

pub(crate) fn upsample_backward(x_shape: &[usize], factor: usize, g: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let planes = x_shape[0] * x_shape[1];
    let mut dx = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / factor) * w + x / factor] += src[y * ow + x];
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}
