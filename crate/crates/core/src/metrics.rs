//! Segmentation metrics: pixel accuracy, IoU, superpixel accuracy with
//! majority voting over grid superpixels, and corner-aligned bilinear
//! resizing of probability maps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::softmax_channels;
use crate::tensor::Tensor;

fn same_len(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("pred has {} pixels, gt {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn pixel_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_len(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Intersection and union pixel counts for one class.
pub fn intersection_union(pred: &[u8], gt: &[u8], cls: u8) -> Result<(usize, usize)> {
    same_len(pred, gt)?;
    let (mut inter, mut union) = (0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == cls, g == cls);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok((inter, union))
}

/// `|pred = cls and gt = cls| / |pred = cls or gt = cls|`, 1 when both are empty.
pub fn iou(pred: &[u8], gt: &[u8], cls: u8) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt, cls)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Mean IoU over the classes present in `gt`.
pub fn mean_iou(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64> {
    same_len(pred, gt)?;
    let present: Vec<u8> = (0..classes as u8).filter(|c| gt.contains(c)).collect();
    let mut s = 0.0;
    for &c in &present {
        s += iou(pred, gt, c)?;
    }
    Ok(s / present.len() as f64)
}

/// Corner-aligned bilinear resize of a `C x h x w` map: output pixel `i`
/// samples input coordinate `i * (h - 1) / (H - 1)`.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = map.shape() else {
        return Err(Error::shape(format!("expected C x h x w, got {:?}", map.shape())));
    };
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("bilinear resize needs h, w >= 2, got {h}x{w}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("output size must be positive"));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let t = if dst == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (t.floor() as usize).min(src - 2);
        (lo, lo + 1, t - lo as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let (y0, y1, fy) = coord(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1, fx) = coord(j, w, out_w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// `n x n` balanced grid: pixel row `r` falls in tile row `floor(r n / H)`.
/// Ids are row-major.
pub fn grid_superpixels(h: usize, w: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > h.min(w) {
        return Err(Error::InvalidGrid(format!("n = {n} for a {h}x{w} image")));
    }
    let mut ids = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            ids.push((r * n / h) * n + col * n / w);
        }
    }
    Ok(ids)
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Per-superpixel `(matches, total)` of majority labels; ties go to the
/// lowest label.
pub fn superpixel_votes(pred: &[u8], gt: &[u8], sp: &[usize]) -> Result<(usize, usize)> {
    same_len(pred, gt)?;
    if sp.len() != gt.len() {
        return Err(Error::shape("superpixel map size differs from masks"));
    }
    let n_sp = sp.iter().max().map_or(0, |m| m + 1);
    let n_lab = pred.iter().chain(gt).max().map_or(0, |&m| m as usize + 1);
    let mut pc = vec![0usize; n_sp * n_lab];
    let mut gc = vec![0usize; n_sp * n_lab];
    let mut seen = vec![false; n_sp];
    for ((&p, &g), &s) in pred.iter().zip(gt).zip(sp) {
        pc[s * n_lab + p as usize] += 1;
        gc[s * n_lab + g as usize] += 1;
        seen[s] = true;
    }
    let mut matches = 0;
    let mut total = 0;
    for s in (0..n_sp).filter(|&s| seen[s]) {
        let r = s * n_lab..(s + 1) * n_lab;
        matches += (majority(&pc[r.clone()]) == majority(&gc[r])) as usize;
        total += 1;
    }
    Ok((matches, total))
}

/// Fraction of superpixels whose majority predicted label matches the
/// majority ground-truth label.
pub fn superpixel_average_precision(pred: &[u8], gt: &[u8], sp: &[usize]) -> Result<f64> {
    let (m, t) = superpixel_votes(pred, gt, sp)?;
    Ok(m as f64 / t as f64)
}

/// Labels at `H x W` from low-resolution logits `N x C x h x w`: softmax,
/// bilinear resize of the probabilities, then argmax (ties to the lowest
/// class).
pub fn upsample_prediction(logits: &Tensor, out_h: usize, out_w: usize) -> Result<Vec<u8>> {
    let s = logits.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let probs = softmax_channels(logits);
    let mut labels = Vec::with_capacity(n * out_h * out_w);
    for i in 0..n {
        let m = Tensor::new(&[c, h, w], probs.data()[i * c * h * w..(i + 1) * c * h * w].to_vec())?;
        let r = bilinear_resize(&m, out_h, out_w)?;
        let d = r.data();
        let plane = out_h * out_w;
        for px in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * plane + px] > d[best * plane + px] {
                    best = ch;
                }
            }
            labels.push(best as u8);
        }
    }
    Ok(labels)
}

/// Dataset-level accumulation of the metric counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsAccumulator {
    classes: usize,
    grid: usize,
    correct: usize,
    pixels: usize,
    inter: Vec<usize>,
    union: Vec<usize>,
    present: Vec<bool>,
    sp_match: usize,
    sp_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    pub sap: f64,
    pub per_class_iou: Vec<f64>,
    pub images: usize,
}

impl MetricsReport {
    /// IoU of class 1 in the binary task.
    pub fn foreground_iou(&self) -> f64 {
        self.per_class_iou.get(1).copied().unwrap_or(f64::NAN)
    }
}

impl MetricsAccumulator {
    pub fn new(classes: usize, grid: usize) -> Self {
        Self {
            classes,
            grid,
            correct: 0,
            pixels: 0,
            inter: vec![0; classes],
            union: vec![0; classes],
            present: vec![false; classes],
            sp_match: 0,
            sp_total: 0,
        }
    }

    /// Add one `h x w` image.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
        same_len(pred, gt)?;
        if gt.len() != h * w {
            return Err(Error::shape("mask size differs from h x w"));
        }
        if let Some(&l) = pred.iter().chain(gt).find(|&&l| l as usize >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: self.classes,
            });
        }
        self.correct += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        self.pixels += gt.len();
        for c in 0..self.classes {
            let (i, u) = intersection_union(pred, gt, c as u8)?;
            self.inter[c] += i;
            self.union[c] += u;
            self.present[c] |= gt.contains(&(c as u8));
        }
        let sp = grid_superpixels(h, w, self.grid)?;
        let (m, t) = superpixel_votes(pred, gt, &sp)?;
        self.sp_match += m;
        self.sp_total += t;
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.pixels == 0 {
            return Err(Error::EmptyDataset);
        }
        let per_class: Vec<f64> = (0..self.classes)
            .map(|c| {
                if self.union[c] == 0 {
                    1.0
                } else {
                    self.inter[c] as f64 / self.union[c] as f64
                }
            })
            .collect();
        let present: Vec<f64> = (0..self.classes)
            .filter(|&c| self.present[c])
            .map(|c| per_class[c])
            .collect();
        Ok(MetricsReport {
            pixel_accuracy: self.correct as f64 / self.pixels as f64,
            mean_iou: present.iter().sum::<f64>() / present.len().max(1) as f64,
            sap: self.sp_match as f64 / self.sp_total as f64,
            per_class_iou: per_class,
            images: self.sp_total / (self.grid * self.grid),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_examples() {
        let gt = [0, 1, 1, 0];
        assert_eq!(pixel_accuracy(&gt, &gt).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&[1, 0, 0, 1], &gt).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&[0, 1, 0, 1], &gt).unwrap(), 0.5);
        assert_eq!(iou(&[0, 1, 0, 0], &gt, 1).unwrap(), 0.5);
        assert_eq!(iou(&[1, 0, 0, 0], &[0, 1, 0, 0], 1).unwrap(), 0.0);
        assert_eq!(iou(&[0, 0], &[0, 0], 1).unwrap(), 1.0);
        assert!(matches!(pixel_accuracy(&[0], &[0, 1]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bilinear_hand_case() {
        let m = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = bilinear_resize(&m, 2, 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
        assert_eq!(bilinear_resize(&m, 2, 2).unwrap(), m);
        let c = Tensor::full(&[2, 3, 3], 0.3);
        assert!(bilinear_resize(&c, 7, 5).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(bilinear_resize(&Tensor::zeros(&[1, 1, 3]), 4, 4).is_err());
    }

    #[test]
    fn grids() {
        assert!(grid_superpixels(8, 8, 1).unwrap().iter().all(|&i| i == 0));
        assert_eq!(grid_superpixels(4, 4, 4).unwrap(), (0..16).collect::<Vec<_>>());
        let g = grid_superpixels(10, 7, 3).unwrap();
        let mut area = [0usize; 9];
        g.iter().for_each(|&i| area[i] += 1);
        let rows: Vec<usize> = (0..3).map(|t| (0..10).filter(|r| r * 3 / 10 == t).count()).collect();
        assert!(rows.iter().max().unwrap() - rows.iter().min().unwrap() <= 1);
        assert!(matches!(grid_superpixels(4, 4, 5), Err(Error::InvalidGrid(_))));
        assert!(matches!(grid_superpixels(4, 4, 0), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn sap_ties_and_identity() {
        let sp = vec![0; 4];
        assert_eq!(superpixel_average_precision(&[1, 1, 0, 0], &[0, 0, 0, 1], &sp).unwrap(), 1.0);
        assert_eq!(superpixel_average_precision(&[1, 1, 1, 0], &[0, 0, 0, 1], &sp).unwrap(), 0.0);
        let sp1 = grid_superpixels(2, 2, 2).unwrap();
        let (p, g) = ([0, 1, 1, 0], [0, 1, 0, 0]);
        assert_eq!(
            superpixel_average_precision(&p, &g, &sp1).unwrap(),
            pixel_accuracy(&p, &g).unwrap()
        );
    }
}
