//! Evaluation metrics: mask IoU / mIoU for prompted images and the
//! region-plus-boundary J&F pair for video masklets.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tracker::Masklet;
use crate::Tensor;

/// Intersection over union of two binary masks; two empty masks count as a
/// perfect match.
pub fn iou(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x_on, y_on) = (x > 0.5, y > 0.5);
        if x_on && y_on {
            inter += 1;
        }
        if x_on || y_on {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU over index-paired prediction/target masks.
pub fn eval_miou(preds: &[Tensor], gts: &[Tensor]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Precondition(format!(
            "mIoU needs matched nonempty lists, got {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    let sum: f64 = preds.iter().zip(gts).map(|(p, t)| iou(p, t)).sum();
    Ok(sum / preds.len() as f64)
}

/// 1-pixel morphological boundary: on-cells with at least one off
/// 4-neighbour (map edges count as off).
pub fn boundary(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            if mask.at(&[y, x]) <= 0.5 {
                continue;
            }
            let edge = y == 0
                || y == h - 1
                || x == 0
                || x == w - 1
                || mask.at(&[y - 1, x]) <= 0.5
                || mask.at(&[y + 1, x]) <= 0.5
                || mask.at(&[y, x - 1]) <= 0.5
                || mask.at(&[y, x + 1]) <= 0.5;
            if edge {
                out.set(&[y, x], 1.0);
            }
        }
    }
    out
}

fn dilate_chebyshev1(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            if mask.at(&[y, x]) <= 0.5 {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        out.set(&[ny as usize, nx as usize], 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Boundary F-measure with a tolerance radius of one pixel.
pub fn boundary_f(pred: &Tensor, gt: &Tensor) -> f64 {
    let pb = boundary(pred);
    let gb = boundary(gt);
    let n_p: usize = pb.data().iter().filter(|&&v| v > 0.5).count();
    let n_g: usize = gb.data().iter().filter(|&&v| v > 0.5).count();
    if n_p == 0 && n_g == 0 {
        return 1.0;
    }
    if n_p == 0 || n_g == 0 {
        return 0.0;
    }
    let gb_tol = dilate_chebyshev1(&gb);
    let pb_tol = dilate_chebyshev1(&pb);
    let hit_p = pb
        .data()
        .iter()
        .zip(gb_tol.data())
        .filter(|(&p, &g)| p > 0.5 && g > 0.5)
        .count();
    let hit_g = gb
        .data()
        .iter()
        .zip(pb_tol.data())
        .filter(|(&g, &p)| g > 0.5 && p > 0.5)
        .count();
    let precision = hit_p as f64 / n_p as f64;
    let recall = hit_g as f64 / n_g as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn first_frame(m: &Masklet) -> Option<usize> {
    m.frames.keys().next().copied()
}

/// Region similarity J, boundary F, and their mean over matched masklets.
/// Predictions are matched to ground truth by best IoU at each ground-truth
/// object's first frame, one to one.
pub fn eval_jf(preds: &[Masklet], gts: &[Masklet]) -> Result<(f64, f64, f64)> {
    if gts.is_empty() {
        return Err(Error::Precondition("eval_jf without ground truth".to_string()));
    }
    let mut used: Vec<bool> = vec![false; preds.len()];
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for gt in gts {
        let ff = match first_frame(gt) {
            Some(f) => f,
            None => continue,
        };
        let gt_first = &gt.frames[&ff];
        // Best unused prediction by first-frame IoU.
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in preds.iter().enumerate() {
            if used[i] {
                continue;
            }
            let cand = match p.frames.get(&ff) {
                Some(m) => iou(m, gt_first),
                None => 0.0,
            };
            if best.map_or(true, |(_, b)| cand > b) {
                best = Some((i, cand));
            }
        }
        let matched = best.map(|(i, _)| i);
        if let Some(i) = matched {
            used[i] = true;
        }
        let mut frames: BTreeSet<usize> = gt.frames.keys().copied().collect();
        if let Some(i) = matched {
            frames.extend(preds[i].frames.keys().copied());
        }
        let empty = Tensor::zeros(gt_first.shape());
        let mut j_obj = 0.0;
        let mut f_obj = 0.0;
        let mut n = 0usize;
        for t in frames {
            let g = gt.frames.get(&t).unwrap_or(&empty);
            let p = matched
                .and_then(|i| preds[i].frames.get(&t))
                .unwrap_or(&empty);
            let g_on = g.data().iter().any(|&v| v > 0.5);
            let p_on = p.data().iter().any(|&v| v > 0.5);
            if !g_on && !p_on {
                continue;
            }
            j_obj += iou(p, g);
            f_obj += boundary_f(p, g);
            n += 1;
        }
        if n > 0 {
            j_sum += j_obj / n as f64;
            f_sum += f_obj / n as f64;
        } else {
            // Ground truth had only empty frames: vacuous perfect object.
            j_sum += 1.0;
            f_sum += 1.0;
        }
    }
    let j = j_sum / gts.len() as f64;
    let f = f_sum / gts.len() as f64;
    Ok((j, f, 0.5 * (j + f)))
}
