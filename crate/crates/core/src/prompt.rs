//! Geometric prompts and the disagreement-driven refinement primitives.
//!
//! Masks handled here are binary tensors; prompt coordinates are (x, y)
//! pixel positions in whatever resolution the mask lives at. The stage-1
//! loop samples initial prompts at image resolution and corrective points at
//! feature resolution, scaling the latter up with [`to_image_coords`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    PositivePoint,
    NegativePoint,
    Box,
}

/// One geometric prompt. Points store `(x, y)` duplicated into the second
/// pair; boxes store inclusive corners `(x1, y1, x2, y2)` with `x1 < x2`,
/// `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub kind: PromptKind,
    pub coords: [f64; 4],
    pub order_index: usize,
}

impl Prompt {
    pub fn point(&self) -> (f64, f64) {
        (self.coords[0], self.coords[1])
    }

    pub fn box_coords(&self) -> [f64; 4] {
        self.coords
    }

    pub fn new_point(kind: PromptKind, x: f64, y: f64) -> Self {
        debug_assert!(kind != PromptKind::Box);
        Prompt {
            kind,
            coords: [x, y, x, y],
            order_index: 0,
        }
    }

    pub fn new_box(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Config(format!(
                "degenerate box ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(Prompt {
            kind: PromptKind::Box,
            coords: [x1, y1, x2, y2],
            order_index: 0,
        })
    }

    pub fn validate_bounds(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        let ok = match self.kind {
            PromptKind::Box => {
                let [x1, y1, x2, y2] = self.coords;
                x1 < x2 && y1 < y2 && x1 >= 0.0 && y1 >= 0.0 && x2 < w && y2 < h
            }
            _ => {
                let (x, y) = self.point();
                (0.0..w).contains(&x) && (0.0..h).contains(&y)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "prompt {:?} outside {width}x{height}",
                self.coords
            )))
        }
    }
}

/// Ordered prompts plus the concept prompt; refinement points append.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
    pub concept_id: usize,
}

impl PromptSet {
    pub fn new(initial: Prompt, concept_id: usize) -> Self {
        let mut initial = initial;
        initial.order_index = 0;
        PromptSet {
            prompts: vec![initial],
            concept_id,
        }
    }

    pub fn push(&mut self, mut prompt: Prompt) {
        prompt.order_index = self.prompts.len();
        self.prompts.push(prompt);
    }
}

fn mask_dims(mask: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if mask.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("mask must be rank 2, got {:?}", mask.shape()),
        });
    }
    Ok((mask.shape()[0], mask.shape()[1]))
}

fn is_on(mask: &Tensor, y: usize, x: usize) -> bool {
    mask.at(&[y, x]) > 0.5
}

pub fn mask_area(mask: &Tensor) -> usize {
    mask.data().iter().filter(|&&v| v > 0.5).count()
}

/// Tight bounding box `(x1, y1, x2, y2)` (inclusive corners) of the on
/// pixels; `None` for an empty mask.
pub fn mask_bbox(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if is_on(mask, y, x) {
                any = true;
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
            }
        }
    }
    any.then_some((x1, y1, x2, y2))
}

/// Largest 4-connected component, as a same-shape binary mask.
fn largest_component(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut label = vec![usize::MAX; h * w];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if label[start] != usize::MAX || mask.data()[start] <= 0.5 {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        stack.push(start);
        label[start] = id;
        while let Some(p) = stack.pop() {
            sizes[id] += 1;
            let (y, x) = (p / w, p % w);
            let mut try_push = |yy: usize, xx: usize| {
                let q = yy * w + xx;
                if label[q] == usize::MAX && mask.data()[q] > 0.5 {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                try_push(y - 1, x);
            }
            if y + 1 < h {
                try_push(y + 1, x);
            }
            if x > 0 {
                try_push(y, x - 1);
            }
            if x + 1 < w {
                try_push(y, x + 1);
            }
        }
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    let data: Vec<f64> = label
        .iter()
        .map(|&l| if Some(l) == best { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(mask.shape().to_vec(), data).expect("same shape")
}

/// Center point of a mask: centroid of the largest connected component,
/// snapped to the nearest interior pixel when the centroid falls outside.
pub fn mask_center(mask: &Tensor) -> Result<(usize, usize)> {
    let (_, w) = mask_dims(mask, "mask_center")?;
    if mask_area(mask) == 0 {
        return Err(Error::Precondition("mask_center on empty mask".to_string()));
    }
    let comp = largest_component(mask);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0.0;
    for (i, &v) in comp.data().iter().enumerate() {
        if v > 0.5 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            n += 1.0;
        }
    }
    let (cx, cy) = (sx / n, sy / n);
    let (rx, ry) = (cx.round() as usize, cy.round() as usize);
    if ry < comp.shape()[0] && rx < w && is_on(&comp, ry, rx) {
        return Ok((rx, ry));
    }
    // Nearest component pixel to the (unrounded) centroid; ties toward the
    // smallest (y, x).
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for (i, &v) in comp.data().iter().enumerate() {
        if v > 0.5 {
            let (y, x) = (i / w, i % w);
            let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if d < best.0 {
                best = (d, y, x);
            }
        }
    }
    Ok((best.2, best.1))
}

/// Initial geometric prompt for an instance mask: tight box or center point
/// with equal probability; degenerate boxes fall back to the point.
pub fn initial_prompt(mask: &Tensor, rng: &mut ChaCha8Rng) -> Result<Prompt> {
    mask_dims(mask, "initial_prompt")?;
    if mask_area(mask) == 0 {
        return Err(Error::Precondition(
            "initial_prompt on empty mask".to_string(),
        ));
    }
    let use_box = rng.gen_bool(0.5);
    if use_box {
        let (x1, y1, x2, y2) = mask_bbox(mask).expect("nonempty");
        if x1 < x2 && y1 < y2 {
            return Prompt::new_box(x1 as f64, y1 as f64, x2 as f64, y2 as f64);
        }
    }
    let (x, y) = mask_center(mask)?;
    Ok(Prompt::new_point(
        PromptKind::PositivePoint,
        x as f64,
        y as f64,
    ))
}

/// Teacher/student disagreement at a threshold: false negatives are teacher
/// pixels the student misses, false positives the reverse. The regions are
/// disjoint by construction.
pub fn disagreement(
    student_probs: &Tensor,
    teacher_mask: &Tensor,
    threshold: f64,
) -> Result<(Tensor, Tensor)> {
    if student_probs.shape() != teacher_mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "disagreement",
            lhs: student_probs.shape().to_vec(),
            rhs: teacher_mask.shape().to_vec(),
        });
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0,1)")));
    }
    let mut fn_data = Vec::with_capacity(student_probs.numel());
    let mut fp_data = Vec::with_capacity(student_probs.numel());
    for (&s, &t) in student_probs.data().iter().zip(teacher_mask.data()) {
        let s_on = s >= threshold;
        let t_on = t > 0.5;
        fn_data.push(f64::from(t_on && !s_on));
        fp_data.push(f64::from(!t_on && s_on));
    }
    Ok((
        Tensor::from_vec(student_probs.shape().to_vec(), fn_data)?,
        Tensor::from_vec(student_probs.shape().to_vec(), fp_data)?,
    ))
}

/// L1 distance of every in-region cell to the nearest cell outside the
/// region, counting off-map as outside. Zero outside the region.
pub fn boundary_distance(region: &Tensor) -> Vec<u32> {
    let (h, w) = (region.shape()[0], region.shape()[1]);
    let mut dist = vec![u32::MAX; h * w];
    let mut queue = std::collections::VecDeque::new();
    for (i, &v) in region.data().iter().enumerate() {
        if v <= 0.5 {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    // Map edges: any region cell on the border is one step from outside.
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        if dist[i] != 0 && (y == 0 || y == h - 1 || x == 0 || x == w - 1) {
            dist[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(p) = queue.pop_front() {
        let (y, x) = (p / w, p % w);
        let d = dist[p];
        let mut relax = |q: usize| {
            if dist[q] > d + 1 {
                dist[q] = d + 1;
                queue.push_back(q);
            }
        };
        if y > 0 {
            relax(p - w);
        }
        if y + 1 < h {
            relax(p + w);
        }
        if x > 0 {
            relax(p - 1);
        }
        if x + 1 < w {
            relax(p + 1);
        }
    }
    for d in &mut dist {
        if *d == u32::MAX {
            // Region covers the whole map and has no border cells; cannot
            // happen once edges seed the queue, but keep it defined.
            *d = 0;
        }
    }
    dist
}

/// Next corrective prompt from the disagreement regions at their native
/// resolution: interior-most pixel of the larger region (ties toward false
/// negatives); `None` when both regions are empty (converged).
pub fn corrective_point(
    fn_region: &Tensor,
    fp_region: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Prompt>> {
    if fn_region.shape() != fp_region.shape() {
        return Err(Error::ShapeMismatch {
            op: "corrective_point",
            lhs: fn_region.shape().to_vec(),
            rhs: fp_region.shape().to_vec(),
        });
    }
    let n_fn = mask_area(fn_region);
    let n_fp = mask_area(fp_region);
    if n_fn == 0 && n_fp == 0 {
        return Ok(None);
    }
    let (region, kind) = if n_fn >= n_fp {
        (fn_region, PromptKind::PositivePoint)
    } else {
        (fp_region, PromptKind::NegativePoint)
    };
    let w = region.shape()[1];
    let dist = boundary_distance(region);
    let best = region
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| dist[i])
        .max()
        .expect("region nonempty");
    let candidates: Vec<usize> = region
        .data()
        .iter()
        .enumerate()
        .filter(|(i, &v)| v > 0.5 && dist[*i] == best)
        .map(|(i, _)| i)
        .collect();
    let pick = candidates[rng.gen_range(0..candidates.len())];
    Ok(Some(Prompt::new_point(
        kind,
        (pick % w) as f64,
        (pick / w) as f64,
    )))
}

/// Maps a feature-resolution point prompt to image coordinates at the
/// center of its cell.
pub fn to_image_coords(prompt: &Prompt, stride: usize) -> Prompt {
    let s = stride as f64;
    let (x, y) = prompt.point();
    Prompt::new_point(prompt.kind, x * s + s / 2.0, y * s + s / 2.0)
}
