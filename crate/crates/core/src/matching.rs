//! Bipartite matching between student and teacher mask sets.
//!
//! The solver is an exact subset-DP over columns rather than a
//! potential-based Hungarian: the contract here demands exact total equality
//! with brute-force enumeration and a deterministic lexicographic tie-break,
//! neither of which survives float rounding in dual updates. At the instance
//! counts this pipeline sees (n <= 20 after padding) the DP is also cheap.
//! Totals are accumulated bottom row first, so the reconstruction's equality
//! tests compare bit-identical sums.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{dice_loss, focal_loss, LossWeights};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

const MAX_DP_SIZE: usize = 20;
const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<S> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
}

impl<S: Scalar> CostMatrix<S> {
    pub fn new(rows: usize, cols: usize, values: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                op: "cost_matrix",
                msg: "empty matrix".to_string(),
            });
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidShape {
                op: "cost_matrix",
                msg: format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < S::zero()) {
            return Err(Error::NonFinite {
                context: "cost_matrix entries must be finite and non-negative".to_string(),
            });
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> S {
        self.values[row * self.cols + col]
    }
}

/// Where a student row ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchTarget {
    Teacher(usize),
    /// Paired with a virtual empty teacher (rectangular padding).
    Unmatched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<S> {
    /// One entry per student row.
    pub targets: Vec<MatchTarget>,
    /// Total cost over real (student, teacher) pairs, bottom row first.
    pub total: S,
}

/// Sum of `cost[i][cols[i]]` accumulated from the last row up; this is the
/// exact quantity both solvers compare.
pub fn assignment_total<S: Scalar>(cost: &CostMatrix<S>, cols: &[usize]) -> S {
    let mut acc = S::zero();
    for (i, &c) in cols.iter().enumerate().rev() {
        acc = cost.at(i, c) + acc;
    }
    acc
}

/// Exact minimum-cost square assignment with lexicographically smallest
/// optimal vector. `cost` is a flat `n*n` row-major slice.
fn solve_square<S: Scalar>(cost: &[S], n: usize) -> (Vec<usize>, S) {
    let size = 1usize << n;
    let mut dp = vec![S::infinity(); size];
    dp[0] = S::zero();
    for mask in 1..size {
        let k = (mask as u64).count_ones() as usize;
        let row = n - k;
        let mut best = S::infinity();
        for c in 0..n {
            let bit = 1usize << c;
            if mask & bit != 0 {
                let v = cost[row * n + c] + dp[mask ^ bit];
                if v < best {
                    best = v;
                }
            }
        }
        dp[mask] = best;
    }
    let total = dp[size - 1];
    // Reconstruct row by row, taking the smallest column that achieves the
    // stored optimum; equality is exact because both sides are the same sum.
    let mut assignment = Vec::with_capacity(n);
    let mut mask = size - 1;
    for row in 0..n {
        for c in 0..n {
            let bit = 1usize << c;
            if mask & bit != 0 && cost[row * n + c] + dp[mask ^ bit] == dp[mask] {
                assignment.push(c);
                mask ^= bit;
                break;
            }
        }
    }
    debug_assert_eq!(assignment.len(), n);
    (assignment, total)
}

/// Globally optimal assignment of student rows to teacher columns.
///
/// Rectangular inputs are padded to square with `10 * max entry`; students
/// assigned to a virtual column come back as [`MatchTarget::Unmatched`].
/// Ties break toward the lexicographically smallest assignment vector.
pub fn min_cost_assignment<S: Scalar>(cost: &CostMatrix<S>) -> Result<Assignment<S>> {
    let n = cost.rows.max(cost.cols);
    if n > MAX_DP_SIZE {
        return Err(Error::Config(format!(
            "assignment size {n} exceeds the supported maximum {MAX_DP_SIZE}"
        )));
    }
    let max_entry = cost
        .values
        .iter()
        .fold(S::zero(), |acc, &v| acc.max(v));
    let pad = if max_entry > S::zero() {
        max_entry * sc::<S>(10.0)
    } else {
        S::one()
    };
    let mut padded = vec![pad; n * n];
    for r in 0..cost.rows {
        for c in 0..cost.cols {
            padded[r * n + c] = cost.at(r, c);
        }
    }
    let (assignment, _) = solve_square(&padded, n);
    let targets: Vec<MatchTarget> = assignment[..cost.rows]
        .iter()
        .map(|&c| {
            if c < cost.cols {
                MatchTarget::Teacher(c)
            } else {
                MatchTarget::Unmatched
            }
        })
        .collect();
    // Total over real pairs only, same bottom-first accumulation.
    let mut total = S::zero();
    for (i, t) in targets.iter().enumerate().rev() {
        if let MatchTarget::Teacher(c) = t {
            total = cost.at(i, *c) + total;
        }
    }
    Ok(Assignment { targets, total })
}

/// Test oracle: exhaustive permutation search, square matrices only,
/// `n <= 8`. Same total accumulation and tie-break as the solver.
pub fn brute_force_match<S: Scalar>(cost: &CostMatrix<S>) -> Result<Assignment<S>> {
    if cost.rows != cost.cols {
        return Err(Error::InvalidShape {
            op: "brute_force_match",
            msg: format!("requires square input, got {}x{}", cost.rows, cost.cols),
        });
    }
    let n = cost.rows;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Config(format!(
            "brute_force_match supports n <= {BRUTE_FORCE_MAX}, got {n}"
        )));
    }
    let mut best: Option<(Vec<usize>, S)> = None;
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    // Recursive lexicographic enumeration; strict `<` keeps the first
    // (lexicographically smallest) optimum.
    fn recurse<S: Scalar>(
        cost: &CostMatrix<S>,
        row: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        best: &mut Option<(Vec<usize>, S)>,
    ) {
        let n = cost.rows();
        if row == n {
            let total = assignment_total(cost, current);
            match best {
                Some((_, bt)) if !(total < *bt) => {}
                _ => *best = Some((current.clone(), total)),
            }
            return;
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                current.push(c);
                recurse(cost, row + 1, used, current, best);
                current.pop();
                used[c] = false;
            }
        }
    }
    recurse(cost, 0, &mut used, &mut current, &mut best);
    let (cols, total) = best.expect("n >= 1 always yields a permutation");
    Ok(Assignment {
        targets: cols.iter().map(|&c| MatchTarget::Teacher(c)).collect(),
        total,
    })
}

/// Pairwise mask-matching costs: `dice + focal(logit(p), t)` computed with
/// the loss module itself so tests can recompute entries independently.
pub fn mask_cost<S: Scalar>(
    student_probs: &[Tensor<S>],
    teacher_masks: &[Tensor<S>],
    w: &LossWeights,
) -> Result<CostMatrix<S>> {
    if student_probs.is_empty() || teacher_masks.is_empty() {
        return Err(Error::InvalidShape {
            op: "mask_cost",
            msg: "empty mask list".to_string(),
        });
    }
    let shape = student_probs[0].shape().to_vec();
    for m in student_probs.iter().chain(teacher_masks.iter()) {
        if m.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "mask_cost",
                lhs: shape,
                rhs: m.shape().to_vec(),
            });
        }
    }
    let mut values = Vec::with_capacity(student_probs.len() * teacher_masks.len());
    for s in student_probs {
        let logits = prob_to_logit(s);
        for t in teacher_masks {
            let mut tape = Tape::new();
            let p = tape.constant(s.clone());
            let x = tape.constant(logits.clone());
            let tgt = tape.constant(t.clone());
            let d = dice_loss(&mut tape, p, tgt, w.dice_eps)?;
            let f = focal_loss(&mut tape, x, tgt, w.focal_alpha, w.focal_gamma)?;
            values.push(tape.value(d).item()? + tape.value(f).item()?);
        }
    }
    CostMatrix::new(student_probs.len(), teacher_masks.len(), values)
}

/// Inverse sigmoid with probability clamped away from {0, 1}.
pub fn prob_to_logit<S: Scalar>(probs: &Tensor<S>) -> Tensor<S> {
    let lo = sc::<S>(1e-7);
    let hi = S::one() - lo;
    let data = probs
        .data()
        .iter()
        .map(|&p| {
            let p = p.max(lo).min(hi);
            (p / (S::one() - p)).ln()
        })
        .collect();
    Tensor::from_vec(probs.shape().to_vec(), data).expect("same shape")
}
