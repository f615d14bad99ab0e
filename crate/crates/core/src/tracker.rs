//! Identity-agnostic detection with presence gating and the
//! detect/propagate/merge masklet state machine.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{
    concept_embedding, decode_queries, presence_logit, student_features, Graph, Student,
    FEATURE_STRIDE,
};
use crate::prompt::mask_bbox;
use crate::sim::{rasterize_mask, SyntheticScene};
use crate::Tensor;

pub const DEFAULT_TTL: u32 = 3;
pub const SPAWN_SCORE: f64 = 0.5;

/// One concept-conditioned detection on a frame. The final score is the
/// product of the global presence score and the per-instance localization
/// score, so it can never exceed either factor.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Binary mask at feature resolution.
    pub mask: Tensor,
    /// Tight box in image coordinates, inclusive corners.
    pub bbox: (f64, f64, f64, f64),
    pub presence: f64,
    pub loc_score: f64,
    pub final_score: f64,
}

impl Detection {
    pub fn new(mask: Tensor, presence: f64, loc_score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&presence) || !(0.0..=1.0).contains(&loc_score) {
            return Err(Error::Config(format!(
                "scores must lie in [0,1]: presence {presence}, loc {loc_score}"
            )));
        }
        let bbox = mask_bbox(&mask)
            .map(|(x1, y1, x2, y2)| {
                let s = FEATURE_STRIDE as f64;
                (x1 as f64 * s, y1 as f64 * s, (x2 + 1) as f64 * s - 1.0, (y2 + 1) as f64 * s - 1.0)
            })
            .unwrap_or((0.0, 0.0, 0.0, 0.0));
        Ok(Detection {
            mask,
            bbox,
            presence,
            loc_score,
            final_score: presence * loc_score,
        })
    }
}

/// A tracked object: per-frame masks (gaps allowed), identity, liveness.
#[derive(Debug, Clone)]
pub struct Masklet {
    pub identity: u32,
    pub concept_id: usize,
    pub frames: BTreeMap<usize, Tensor>,
    pub alive: bool,
    pub ttl: u32,
}

impl Masklet {
    pub fn new(identity: u32, concept_id: usize, frame: usize, mask: Tensor) -> Self {
        let mut frames = BTreeMap::new();
        frames.insert(frame, mask);
        Masklet {
            identity,
            concept_id,
            frames,
            alive: true,
            ttl: DEFAULT_TTL,
        }
    }
}

/// Detection source: exact ground truth or the trained student heads.
pub enum Detector<'a> {
    Oracle { scene: &'a SyntheticScene },
    Model { student: &'a Student },
}

/// Concept-conditioned detection on one frame: a global presence score and
/// identity-agnostic instance detections gated by it.
pub fn detect(
    detector: &Detector,
    image: &Tensor,
    concept_id: usize,
) -> Result<(f64, Vec<Detection>)> {
    match detector {
        Detector::Oracle { scene } => {
            let mut dets = Vec::new();
            for inst in &scene.instances {
                if inst.concept_id == concept_id {
                    let mask = rasterize_mask(&inst.mask, FEATURE_STRIDE)?;
                    if mask.data().iter().any(|&v| v > 0.5) {
                        dets.push(Detection::new(mask, 1.0, 1.0)?);
                    }
                }
            }
            let presence = f64::from(!dets.is_empty());
            Ok((presence, dets))
        }
        Detector::Model { student } => {
            let frozen = BTreeSet::new();
            let mut g = Graph::new(&student.params, &frozen, false);
            let feat = student_features(&mut g, image)?;
            let concept = concept_embedding(&mut g, &student.cfg, concept_id)?;
            let p_logit = presence_logit(&mut g, &student.cfg, feat, concept)?;
            let presence = sigmoid(g.tape.value(p_logit).item()?);
            let queries = decode_queries(&mut g, &student.cfg, feat, concept)?;
            let mut dets = Vec::new();
            for (mask_logits, loc_logit) in queries {
                let loc = sigmoid(g.tape.value(loc_logit).item()?);
                let mask_data: Vec<f64> = g
                    .tape
                    .value(mask_logits)
                    .data()
                    .iter()
                    .map(|&v| f64::from(v >= 0.0))
                    .collect();
                let mask = Tensor::from_vec(
                    vec![student.cfg.feat_h(), student.cfg.feat_w()],
                    mask_data,
                )?;
                if mask.data().iter().any(|&v| v > 0.5) {
                    dets.push(Detection::new(mask, presence, loc)?);
                }
            }
            Ok((presence, dets))
        }
    }
}

/// Greedy score-ordered merge of fresh detections into propagated masklets.
///
/// Every alive masklet must already hold its propagated mask for `frame`.
/// Matched masklets take the detection's mask and reset their TTL;
/// unmatched detections above [`SPAWN_SCORE`] spawn new identities;
/// unmatched masklets keep the propagated mask and lose one TTL, dying at
/// zero.
pub fn merge(
    masklets: &mut Vec<Masklet>,
    detections: &[Detection],
    frame: usize,
    iou_threshold: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Config(format!(
            "iou_threshold {iou_threshold} outside [0,1]"
        )));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .final_score
            .partial_cmp(&detections[a].final_score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut taken: Vec<bool> = masklets.iter().map(|m| !m.alive).collect();
    let mut det_matched = vec![false; detections.len()];
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (mi, m) in masklets.iter().enumerate() {
            if taken[mi] || !m.alive {
                continue;
            }
            let prop = match m.frames.get(&frame) {
                Some(p) => p,
                None => continue,
            };
            let v = crate::metrics::iou(&det.mask, prop);
            let better = match best {
                Some((bmi, bv)) => v > bv || (v == bv && masklets[bmi].identity > m.identity),
                None => true,
            };
            if better {
                best = Some((mi, v));
            }
        }
        if let Some((mi, v)) = best {
            if v >= iou_threshold {
                taken[mi] = true;
                det_matched[di] = true;
                masklets[mi].frames.insert(frame, det.mask.clone());
                masklets[mi].ttl = DEFAULT_TTL;
            }
        }
    }
    // Unmatched alive masklets decay.
    for (mi, m) in masklets.iter_mut().enumerate() {
        if m.alive && !taken[mi] && m.frames.contains_key(&frame) {
            m.ttl = m.ttl.saturating_sub(1);
            if m.ttl == 0 {
                m.alive = false;
            }
        }
    }
    // Confident unmatched detections spawn fresh identities.
    let mut next_id = masklets.iter().map(|m| m.identity + 1).max().unwrap_or(0);
    for (di, det) in detections.iter().enumerate() {
        if !det_matched[di] && det.final_score > SPAWN_SCORE {
            let mut m = Masklet::new(next_id, usize::MAX, frame, det.mask.clone());
            m.concept_id = usize::MAX;
            masklets.push(m);
            next_id += 1;
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid_scalar(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_scene, GenConfig};

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for &(y, x) in on {
            t.set(&[y, x], 1.0);
        }
        t
    }

    #[test]
    fn oracle_detect_returns_ground_truth_with_unit_scores() {
        let cfg = GenConfig::default();
        let scene = gen_scene(&cfg, 42).unwrap();
        let concept = scene.instances[0].concept_id;
        let det = Detector::Oracle { scene: &scene };
        let (presence, dets) = detect(&det, &scene.image, concept).unwrap();
        assert_eq!(presence, 1.0);
        assert!(!dets.is_empty());
        for d in &dets {
            assert_eq!(d.final_score, 1.0);
        }
        // Absent concept: presence 0, no detections.
        let present: std::collections::BTreeSet<usize> =
            scene.instances.iter().map(|i| i.concept_id).collect();
        let absent = (0..cfg.concepts().len())
            .find(|c| !present.contains(c))
            .unwrap();
        let (presence, dets) = detect(&det, &scene.image, absent).unwrap();
        assert_eq!(presence, 0.0);
        assert!(dets.is_empty());
    }

    #[test]
    fn gating_inequality_holds_by_construction() {
        let m = mask(4, 4, &[(1, 1)]);
        for (p, l) in [(0.5, 0.8), (0.0, 0.9), (1.0, 1.0), (0.3, 0.2)] {
            let d = Detection::new(m.clone(), p, l).unwrap();
            assert!(d.final_score <= d.presence.min(d.loc_score));
        }
        let d = Detection::new(m, 0.5, 0.8).unwrap();
        assert!((d.final_score - 0.4).abs() < 1e-12);
    }

    #[test]
    fn merge_without_detections_decays_ttl() {
        let m0 = mask(4, 4, &[(0, 0)]);
        let mut masklets = vec![Masklet::new(0, 1, 0, m0.clone())];
        for frame in 1..=DEFAULT_TTL as usize {
            // Propagate: copy previous mask into this frame.
            let prev = masklets[0].frames[&(frame - 1)].clone();
            masklets[0].frames.insert(frame, prev);
            merge(&mut masklets, &[], frame, 0.5).unwrap();
        }
        assert!(!masklets[0].alive);
        // Propagated masks were kept along the way.
        assert!(masklets[0].frames.contains_key(&(DEFAULT_TTL as usize)));
    }

    #[test]
    fn merge_identical_detection_refreshes_identity() {
        let m0 = mask(4, 4, &[(1, 1), (1, 2)]);
        let mut masklets = vec![Masklet::new(5, 1, 0, m0.clone())];
        masklets[0].frames.insert(1, m0.clone());
        let det = Detection::new(m0.clone(), 1.0, 1.0).unwrap();
        merge(&mut masklets, &[det.clone()], 1, 0.5).unwrap();
        assert_eq!(masklets.len(), 1);
        assert_eq!(masklets[0].identity, 5);
        assert_eq!(masklets[0].ttl, DEFAULT_TTL);
        // Idempotence: merging the same detections again changes nothing.
        let snapshot: Vec<(u32, bool, u32)> =
            masklets.iter().map(|m| (m.identity, m.alive, m.ttl)).collect();
        merge(&mut masklets, &[det], 1, 0.5).unwrap();
        let after: Vec<(u32, bool, u32)> =
            masklets.iter().map(|m| (m.identity, m.alive, m.ttl)).collect();
        assert_eq!(snapshot, after);
        assert_eq!(masklets[0].frames[&1].data(), m0.data());
    }

    #[test]
    fn greedy_merge_follows_score_order_on_crossed_ious() {
        // Detection A (score .9) overlaps masklet X strongly (0.9) and Y
        // weakly; detection B (score .8) overlaps X 0.3, Y 0.8. Greedy takes
        // (A,X) then (B,Y).
        let x_prop = mask(8, 8, &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (1, 0), (1, 1)]);
        let y_prop = mask(8, 8, &[(5, 0), (5, 1), (5, 2), (5, 3), (5, 4), (6, 0), (6, 1), (6, 2), (6, 3), (6, 4)]);
        let det_a = {
            // 9/10 overlap with X.
            let m = mask(8, 8, &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (1, 0), (2, 7)]);
            Detection::new(m, 1.0, 0.9).unwrap()
        };
        let det_b = {
            // 8/10-ish overlap with Y, some with X.
            let m = mask(8, 8, &[(5, 0), (5, 1), (5, 2), (5, 3), (5, 4), (6, 0), (6, 1), (6, 2), (7, 7), (0, 0)]);
            Detection::new(m, 1.0, 0.8).unwrap()
        };
        let mut masklets = vec![Masklet::new(0, 1, 0, x_prop.clone()), Masklet::new(1, 1, 0, y_prop.clone())];
        masklets[0].frames.insert(1, x_prop);
        masklets[1].frames.insert(1, y_prop);
        merge(&mut masklets, &[det_b.clone(), det_a.clone()], 1, 0.5).unwrap();
        // X took A's mask, Y took B's mask.
        assert_eq!(masklets[0].frames[&1].data(), det_a.mask.data());
        assert_eq!(masklets[1].frames[&1].data(), det_b.mask.data());
    }

    #[test]
    fn unmatched_confident_detections_spawn_identities() {
        let mut masklets: Vec<Masklet> = Vec::new();
        let det = Detection::new(mask(4, 4, &[(2, 2)]), 1.0, 0.9).unwrap();
        let weak = Detection::new(mask(4, 4, &[(0, 0)]), 1.0, 0.3).unwrap();
        merge(&mut masklets, &[det, weak], 0, 0.5).unwrap();
        assert_eq!(masklets.len(), 1);
        assert_eq!(masklets[0].identity, 0);
    }
}
