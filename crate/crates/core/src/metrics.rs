//! Segmentation-map synthesis, mIoU and label-set similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::softmax_columns;
use crate::tensor::bilinear_resize_slice;

/// Per-pixel class scores on the mask grid and the upsampled argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub grid: usize,
    pub classes: usize,
    /// `[grid, grid, C]`.
    pub scores: Vec<f64>,
    pub side: usize,
    /// `[side, side]`, values in `[0, C)`.
    pub argmax: Vec<usize>,
}

/// Inference-time class probabilities `[C, N]` from logits `[rows, N]`:
/// softmax over all rows, then the no-object row (the last) is dropped when
/// present.
pub fn class_probabilities(p: &[f64], rows: usize, n: usize, has_no_object: bool) -> Vec<f64> {
    let probs = softmax_columns(p, rows, n);
    let c = if has_no_object { rows - 1 } else { rows };
    probs[..c * n].to_vec()
}

/// `S[x, c] = Σ_n sigmoid(M[x, n]) · prob[c, n]`, upsampled to `side x side`
/// and reduced by per-pixel argmax (lowest index wins ties).
pub fn segmentation_map(
    m: &[f64],
    grid: usize,
    p: &[f64],
    rows: usize,
    has_no_object: bool,
    side: usize,
) -> Result<SegmentationMap> {
    let cells = grid * grid;
    if cells == 0 || !m.len().is_multiple_of(cells) {
        return Err(Error::dim(format!(
            "{} mask logits do not tile a {grid}x{grid} grid",
            m.len()
        )));
    }
    let n = m.len() / cells;
    if p.len() != rows * n {
        return Err(Error::dim(format!(
            "{} class logits for {rows} rows and {n} proposals",
            p.len()
        )));
    }
    let probs = class_probabilities(p, rows, n, has_no_object);
    let c = probs.len() / n.max(1);
    let mut scores = vec![0.0; cells * c];
    for x in 0..cells {
        for q in 0..n {
            let s = 1.0 / (1.0 + (-m[x * n + q].clamp(-30.0, 30.0)).exp());
            for k in 0..c {
                scores[x * c + k] += s * probs[k * n + q];
            }
        }
    }
    let up = bilinear_resize_slice(&scores, grid, grid, c, side, side);
    let argmax = up
        .chunks(c.max(1))
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(SegmentationMap {
        grid,
        classes: c,
        scores,
        side,
        argmax,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU per class; `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// Confusion counts accumulated over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub correct: u64,
    pub total: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            correct: 0,
            total: 0,
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize], ignore: usize) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            if p >= self.classes {
                return Err(Error::usage(format!(
                    "predicted class {p} out of range for {} classes",
                    self.classes
                )));
            }
            if g >= self.classes {
                return Err(Error::usage(format!(
                    "ground-truth class {g} out of range for {} classes",
                    self.classes
                )));
            }
            self.total += 1;
            if p == g {
                self.tp[p] += 1;
                self.correct += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport {
            per_class,
            miou,
            pixel_accuracy: if self.total == 0 {
                0.0
            } else {
                self.correct as f64 / self.total as f64
            },
        }
    }
}

/// Dataset-level mIoU over paired label maps.
pub fn miou(preds: &[Vec<usize>], gts: &[Vec<usize>], classes: usize, ignore: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut conf = Confusion::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        conf.add(p, g, ignore)?;
    }
    Ok(conf.report())
}

fn unit_rows(e: &[f64], d: usize) -> Vec<Vec<f64>> {
    e.chunks(d)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// `min(s(A→B), s(B→A))` with `s(X→Y) = min_x max_y cos(x, y)`.
pub fn labelset_similarity(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    if d == 0 || a.is_empty() || b.is_empty() || !a.len().is_multiple_of(d) || !b.len().is_multiple_of(d) {
        return Err(Error::usage(
            "label-set similarity needs two non-empty sets of d-dimensional rows",
        ));
    }
    let (ua, ub) = (unit_rows(a, d), unit_rows(b, d));
    let directed = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter()
            .map(|u| {
                y.iter()
                    .map(|v| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    };
    Ok(directed(&ua, &ub).min(directed(&ub, &ua)).clamp(-1.0, 1.0))
}
