//! Targets, matching cost and the segmentation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::hungarian_match;
use crate::tensor::{Float, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub dice: f64,
    pub bce: f64,
    pub cls: f64,
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 5.0,
            bce: 5.0,
            cls: 2.0,
            no_object_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.dice, self.bce, self.cls, self.no_object_weight]
            .iter()
            .all(|w| *w > 0.0 && w.is_finite())
        {
            Ok(())
        } else {
            Err(Error::config(format!("loss weights must be positive: {self:?}")))
        }
    }
}

/// Ground-truth segments on the mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub grid: usize,
    /// `G` binary masks of `grid * grid` cells.
    pub masks: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Downsamples a `side x side` label map to `grid x grid`: a cell belongs
    /// to class `c` when `c` covers at least half of its pixels. One target per
    /// class with a non-empty cell mask, in class order.
    pub fn from_label_map(labels: &[u8], side: usize, grid: usize, n_classes: usize, ignore: u8) -> Result<Self> {
        if labels.len() != side * side || grid == 0 || !side.is_multiple_of(grid) {
            return Err(Error::dim(format!(
                "label map of {} pixels cannot be pooled from side {side} to grid {grid}",
                labels.len()
            )));
        }
        let cell = side / grid;
        let mut masks = vec![vec![0.0; grid * grid]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for gy in 0..grid {
            for gx in 0..grid {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in gy * cell..(gy + 1) * cell {
                    for &l in &labels[y * side + gx * cell..y * side + (gx + 1) * cell] {
                        if l == ignore {
                            continue;
                        }
                        let l = l as usize;
                        if l >= n_classes {
                            return Err(Error::usage(format!("label {l} out of range for {n_classes} classes")));
                        }
                        counts[l] += 1;
                    }
                }
                for (c, &k) in counts.iter().enumerate() {
                    if 2 * k >= cell * cell {
                        masks[c][gy * grid + gx] = 1.0;
                    }
                }
            }
        }
        let (mut out_masks, mut out_labels) = (Vec::new(), Vec::new());
        for (c, m) in masks.into_iter().enumerate() {
            if m.iter().any(|&v| v > 0.0) {
                out_masks.push(m);
                out_labels.push(c);
            }
        }
        Ok(TargetSet {
            grid,
            masks: out_masks,
            labels: out_labels,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-30.0, 30.0)).exp())
}

/// Stable per-pixel logit cross-entropy.
pub fn bce_scalar(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// `1 - (2 Σ s t + 1) / (Σ s + Σ t + 1)` with `s = sigmoid(x)`.
pub fn dice_scalar(logits: &[f64], target: &[f64]) -> f64 {
    let (mut st, mut s_sum, mut t_sum) = (0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(target) {
        let s = sigmoid(x);
        st += s * t;
        s_sum += s;
        t_sum += t;
    }
    1.0 - (2.0 * st + 1.0) / (s_sum + t_sum + 1.0)
}

/// Column-wise softmax of a row-major `[rows, cols]` matrix.
pub fn softmax_columns(p: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for n in 0..cols {
        let m = (0..rows).map(|c| p[c * cols + n]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..rows).map(|c| (p[c * cols + n] - m).exp()).sum();
        for c in 0..rows {
            out[c * cols + n] = (p[c * cols + n] - m).exp() / z;
        }
    }
    out
}

/// `[N, G]` matching cost from class logits `[C+1, N]` and mask logits
/// `[cells, N]`, both given as plain values.
pub fn matching_cost(
    class_logits: &[f64],
    n_classes_plus_one: usize,
    mask_logits: &[f64],
    targets: &TargetSet,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    let rows = n_classes_plus_one;
    let n = class_logits.len() / rows.max(1);
    let cells = targets.grid * targets.grid;
    if class_logits.len() != rows * n || mask_logits.len() != cells * n {
        return Err(Error::dim(format!(
            "inconsistent shapes: {} class logits over {rows} rows, {} mask logits over {cells} cells",
            class_logits.len(),
            mask_logits.len()
        )));
    }
    if let Some(&l) = targets.labels.iter().find(|&&l| l + 1 >= rows) {
        return Err(Error::usage(format!(
            "target label {l} out of range for {} classes",
            rows - 1
        )));
    }
    let probs = softmax_columns(class_logits, rows, n);
    let g = targets.len();
    let mut cost = vec![0.0; n * g];
    let mut column = vec![0.0; cells];
    for q in 0..n {
        for (p, v) in column.iter_mut().enumerate() {
            *v = mask_logits[p * n + q];
        }
        for (j, (mask, &label)) in targets.masks.iter().zip(&targets.labels).enumerate() {
            let bce = column.iter().zip(mask).map(|(&x, &t)| bce_scalar(x, t)).sum::<f64>() / cells as f64;
            cost[q * g + j] =
                -weights.cls * probs[label * n + q] + weights.dice * dice_scalar(&column, mask) + weights.bce * bce;
        }
    }
    Ok(cost)
}

/// Dice loss of a flat logit map against a binary target.
pub fn dice_loss<'t, T: Float>(logits: Var<'t, T>, target: &[T]) -> Result<Var<'t, T>> {
    let tape = logits.tape();
    let t = tape.constant_from(logits.shape(), target.to_vec())?;
    let s = logits.sigmoid();
    let inter = s.mul(t)?.sum().scale(2.0).add_scalar(1.0);
    let t_sum: f64 = target.iter().map(|v| v.as_f64()).sum();
    let denom = s.sum().add_scalar(t_sum + 1.0);
    Ok(inter.div(denom)?.neg().add_scalar(1.0))
}

/// Mean stable binary cross-entropy over all pixels.
pub fn bce_loss<'t, T: Float>(logits: Var<'t, T>, target: &[T]) -> Result<Var<'t, T>> {
    Ok(logits.bce_with_logits(target)?.mean())
}

/// Loss value and per-term breakdown.
#[derive(Clone, Debug)]
pub struct LossTerms<'t, T: Float> {
    pub total: Var<'t, T>,
    /// Unweighted term values.
    pub dice: f64,
    pub bce: f64,
    pub cls: f64,
    /// The class term as a var, for routing checks.
    pub cls_var: Var<'t, T>,
    pub mask_var: Option<Var<'t, T>>,
}

/// `λ1·dice + λ2·bce + λ3·ce` for class logits `[C+1, N]` and mask logits
/// `[g, g, N]`. Mask terms average over matched pairs; the class term is a
/// weighted mean over all proposals, unmatched ones targeting no-object.
pub fn total_loss<'t, T: Float>(
    p: Var<'t, T>,
    m: Var<'t, T>,
    targets: &TargetSet,
    assignment: &[(usize, usize)],
    weights: &LossWeights,
) -> Result<LossTerms<'t, T>> {
    let ps = p.shape();
    let ms = m.shape();
    let (rows, n) = (ps[0], ps[1]);
    let cells = targets.grid * targets.grid;
    if ms.len() != 3 || ms[0] * ms[1] != cells || ms[2] != n {
        return Err(Error::dim(format!(
            "mask logits {ms:?} do not match {n} proposals on grid {}",
            targets.grid
        )));
    }
    let tape = p.tape();
    let no_object = rows - 1;
    let mut class_of = vec![no_object; n];
    let mut w = vec![weights.no_object_weight; n];
    for &(q, j) in assignment {
        class_of[q] = targets.labels[j];
        w[q] = 1.0;
    }
    let logp = p.log_softmax(0)?;
    let picked = logp.pick(&(0..n).map(|q| class_of[q] * n + q).collect::<Vec<_>>())?;
    let w_sum: f64 = w.iter().sum();
    let wv = tape.constant_from([n], w.iter().map(|&v| T::from_f64(v)).collect())?;
    let cls = picked.mul(wv)?.sum().scale(-1.0 / w_sum);

    let mut total = cls.scale(weights.cls);
    let (mut dice_v, mut bce_v, mut mask_var) = (0.0, 0.0, None);
    if !assignment.is_empty() {
        let per_query = m.reshape([cells, n])?.transpose()?;
        let mut dice_terms = Vec::with_capacity(assignment.len());
        let mut bce_terms = Vec::with_capacity(assignment.len());
        for &(q, j) in assignment {
            let logits = per_query.slice(0, q, 1)?.reshape([cells])?;
            let t: Vec<T> = targets.masks[j].iter().map(|&v| T::from_f64(v)).collect();
            dice_terms.push(dice_loss(logits, &t)?.reshape([1])?);
            bce_terms.push(bce_loss(logits, &t)?.reshape([1])?);
        }
        let dice = Var::concat(&dice_terms, 0)?.mean();
        let bce = Var::concat(&bce_terms, 0)?.mean();
        dice_v = dice.item().as_f64();
        bce_v = bce.item().as_f64();
        let mask = dice.scale(weights.dice).add(bce.scale(weights.bce))?;
        total = total.add(mask)?;
        mask_var = Some(mask);
    }
    Ok(LossTerms {
        total,
        dice: dice_v,
        bce: bce_v,
        cls: cls.item().as_f64(),
        cls_var: cls,
        mask_var,
    })
}

/// Matches with the cost of the current values and returns the loss.
pub fn matched_loss<'t, T: Float>(
    p: Var<'t, T>,
    m: Var<'t, T>,
    targets: &TargetSet,
    weights: &LossWeights,
) -> Result<(LossTerms<'t, T>, Vec<(usize, usize)>)> {
    let pv: Vec<f64> = p.value().iter().map(|v| v.as_f64()).collect();
    let mv: Vec<f64> = m.value().iter().map(|v| v.as_f64()).collect();
    let rows = p.shape()[0];
    let n = p.shape()[1];
    let cost = matching_cost(&pv, rows, &mv, targets, weights)?;
    let assignment = hungarian_match(&cost, n, targets.len())?;
    Ok((total_loss(p, m, targets, &assignment, weights)?, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn bce_at_zero_is_ln2() {
        assert!((bce_scalar(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_scalar(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_scalar(30.0, 1.0) < 1e-9);
    }

    #[test]
    fn dice_perfect_and_empty() {
        let t = [1.0, 0.0, 1.0, 0.0];
        let x: Vec<f64> = t.iter().map(|&v| if v > 0.0 { 30.0 } else { -30.0 }).collect();
        assert!(dice_scalar(&x, &t) < 1e-3);
        assert!(dice_scalar(&[-30.0; 4], &[0.0; 4]) < 1e-3);
    }

    #[test]
    fn dice_var_matches_scalar() {
        let x = [0.3, -1.2, 2.0, 0.1];
        let t = [1.0, 0.0, 1.0, 1.0];
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64([4], &x).unwrap());
        let d = dice_loss(v, &t).unwrap().item();
        assert!((d - dice_scalar(&x, &t)).abs() < 1e-15);
    }

    #[test]
    fn downsampling_uses_half_coverage() {
        // 4x4 map, grid 2: class 1 covers 2 of 4 pixels in the top-left cell.
        let labels = [1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let t = TargetSet::from_label_map(&labels, 4, 2, 2, 255).unwrap();
        assert_eq!(t.labels, vec![0, 1]);
        assert_eq!(t.masks[1], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.masks[0], vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn label_out_of_range_is_a_usage_error() {
        let t = TargetSet {
            grid: 1,
            masks: vec![vec![1.0]],
            labels: vec![5],
        };
        let err = matching_cost(&[0.0; 3], 3, &[0.0], &t, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn empty_image_is_weighted_ce_only() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64([3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, 0.0]).unwrap());
        let m = tape.zeros([1, 1, 2]);
        let t = TargetSet {
            grid: 1,
            masks: vec![],
            labels: vec![],
        };
        let w = LossWeights::default();
        let terms = total_loss(p, m, &t, &[], &w).unwrap();
        let probs = softmax_columns(&p.value(), 3, 2);
        let ce = -(probs[4].ln() + probs[5].ln()) / 2.0;
        assert!((terms.total.item() - w.cls * ce).abs() < 1e-12);
    }
}
