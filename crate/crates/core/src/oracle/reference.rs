//! A loop-by-loop re-implementation of the single-sample forward pass, used
//! by the quadrature oracles so that they share nothing with the tape
//! kernels except the stored parameter values.

use crate::error::Result;
use crate::model::ArchConfig;
use crate::params::ParamRegistry;

/// One feature map `c x h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0.0
        } else {
            self.data[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

pub struct ReferenceNet<'a> {
    pub arch: &'a ArchConfig,
    pub params: &'a ParamRegistry,
}

/// Which ReLU units were active; used to detect kinks of the integrand.
pub type SignPattern = Vec<bool>;

fn relu(v: &mut [f64], signs: Option<&mut SignPattern>) {
    if let Some(s) = signs {
        s.extend(v.iter().map(|&x| x > 0.0));
    }
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn maxpool2(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let mut data = Vec::with_capacity(p.c * h * w);
    for c in 0..p.c {
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(p.data[(c * p.h + 2 * y + dy) * p.w + 2 * x + dx]);
                    }
                }
                data.push(m);
            }
        }
    }
    Plane { c: p.c, h, w, data }
}

fn upsample2(p: &Plane) -> Plane {
    let (h, w) = (p.h * 2, p.w * 2);
    let mut data = Vec::with_capacity(p.c * h * w);
    for c in 0..p.c {
        for y in 0..h {
            for x in 0..w {
                data.push(p.data[(c * p.h + y / 2) * p.w + x / 2]);
            }
        }
    }
    Plane { c: p.c, h, w, data }
}

impl ReferenceNet<'_> {
    fn raw(&self, name: &str) -> Result<&[f64]> {
        Ok(self.params.value(name)?.data())
    }

    /// Stride-1 square convolution with zero padding `k / 2`.
    fn conv(&self, x: &Plane, layer: &str) -> Result<Plane> {
        let ws = self.params.value(&format!("{layer}/w"))?.shape().to_vec();
        let w = self.raw(&format!("{layer}/w"))?;
        let b = self.raw(&format!("{layer}/b"))?;
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(cin, x.c, "{layer}");
        let pad = (k / 2) as isize;
        let mut data = Vec::with_capacity(cout * x.h * x.w);
        for o in 0..cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let v = x.at(i, y + ky as isize - pad, xx + kx as isize - pad);
                                acc += w[((o * cin + i) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                    data.push(acc);
                }
            }
        }
        Ok(Plane {
            c: cout,
            h: x.h,
            w: x.w,
            data,
        })
    }

    fn affine(&self, x: &[f64], layer: &str) -> Result<Vec<f64>> {
        let w = self.raw(&format!("{layer}/w"))?;
        let b = self.raw(&format!("{layer}/b"))?;
        let dout = b.len();
        let mut out = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * w[i * dout + j];
            }
        }
        Ok(out)
    }

    fn conv_relu_pool(&self, x: &Plane, layer: &str) -> Result<Plane> {
        let mut h = self.conv(x, layer)?;
        relu(&mut h.data, None);
        Ok(maxpool2(&h))
    }

    /// Trunk output for one `H x W` image.
    pub fn trunk(&self, image: &[f64]) -> Result<Plane> {
        let s = self.arch.input_size;
        let x = Plane {
            c: 1,
            h: s,
            w: s,
            data: image.to_vec(),
        };
        let b1 = self.conv_relu_pool(&x, "trunk/conv1")?;
        self.conv_relu_pool(&b1, "trunk/conv2")
    }

    /// `(mu, log_var)` of `p(z|x)`.
    pub fn image_gaussian(&self, trunk: &Plane) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.conv_relu_pool(trunk, "img_enc/conv")?;
        Ok((self.affine(&h.data, "img_enc/mu")?, self.affine(&h.data, "img_enc/logvar")?))
    }

    /// `(mu, log_var)` of `q(z|s)` for one full-resolution mask.
    pub fn seg_gaussian(&self, labels: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = self.arch;
        let (h, m) = (a.input_size, a.seg_size);
        let mut data = vec![0.0; a.classes * m * m];
        for i in 0..m {
            let y = ((2 * i + 1) * h) / (2 * m);
            for j in 0..m {
                let x = ((2 * j + 1) * h) / (2 * m);
                let l = labels[y * h + x] as usize;
                data[(l * m + i) * m + j] = 1.0;
            }
        }
        let x = Plane {
            c: a.classes,
            h: m,
            w: m,
            data,
        };
        let h1 = self.conv_relu_pool(&x, "seg_enc/conv1")?;
        let h2 = self.conv_relu_pool(&h1, "seg_enc/conv2")?;
        Ok((self.affine(&h2.data, "seg_enc/mu")?, self.affine(&h2.data, "seg_enc/logvar")?))
    }

    /// The decoder's local branch, which does not depend on `z`.
    pub fn local_branch(&self, trunk: &Plane) -> Result<Plane> {
        let mut l = self.conv(trunk, "decoder/local_conv")?;
        relu(&mut l.data, None);
        Ok(l)
    }

    /// `log p(s|z,x)` summed over the low-resolution pixels, optionally
    /// recording the activity of every ReLU that depends on `z`.
    pub fn log_lik(
        &self,
        z: &[f64],
        local: &Plane,
        targets: &[u8],
        mut signs: Option<&mut SignPattern>,
    ) -> Result<f64> {
        let a = self.arch;
        let h8 = a.input_size / 8;
        let mut g = self.affine(z, "decoder/global_fc")?;
        relu(&mut g, signs.as_deref_mut());
        let g = upsample2(&Plane {
            c: a.global_channels,
            h: h8,
            w: h8,
            data: g,
        });
        let mut global = self.conv(&g, "decoder/global_conv")?;
        relu(&mut global.data, signs.as_deref_mut());
        let mut fused = global.data;
        fused.extend_from_slice(&local.data);
        let fused = Plane {
            c: global.c + local.c,
            h: local.h,
            w: local.w,
            data: fused,
        };
        let mut f = self.conv(&fused, "decoder/fuse_conv")?;
        relu(&mut f.data, signs.as_deref_mut());
        let mut f = self.conv(&f, "decoder/fuse_1x1")?;
        relu(&mut f.data, signs.as_deref_mut());
        let logits = self.conv(&f, "decoder/classifier")?;
        let hw = logits.h * logits.w;
        let mut ll = 0.0;
        for (px, &t) in targets.iter().enumerate().take(hw) {
            let at = |c: usize| logits.data[c * hw + px];
            let m = (0..logits.c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..logits.c).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
            ll += at(t as usize) - lse;
        }
        Ok(ll)
    }
}
