//! Stage 3: end-to-end concept fine-tuning over mixed image/clip batches.
//! Images supervise the presence head (with sampled hard negatives) and
//! query masks matched against ground truth; clips reuse the stage-2
//! temporal machinery.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::VarId;
use crate::error::{Error, Result};
use crate::losses::{dice_loss, focal_loss, score_bce, LossWeights};
use crate::matching::{mask_cost, min_cost_assignment, MatchTarget};
use crate::memory::{clip_loss_terms, mean_of, Stage2Opts};
use crate::model::{
    apply_grads, concept_embedding, decode_queries, exemplar_embedding, presence_logit,
    student_features, Graph, StepBreakdown, Student, TeacherOracle, FEATURE_STRIDE,
};
use crate::prompt::mask_bbox;
use crate::sim::{rasterize_mask, resize_nearest, Clip, ConceptSet, SyntheticScene};
use crate::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Stage3Opts {
    /// Negative concepts sampled per image.
    pub n_negatives: usize,
    /// Probability of augmenting the concept prompt with an exemplar crop.
    pub exemplar_prob: f64,
    pub clip_opts: Stage2Opts,
}

impl Default for Stage3Opts {
    fn default() -> Self {
        Stage3Opts {
            n_negatives: 1,
            exemplar_prob: 0.3,
            clip_opts: Stage2Opts::default(),
        }
    }
}

pub enum MixedItem<'a> {
    Scene(&'a SyntheticScene),
    Clip(&'a Clip),
}

/// Exemplar crop for a concept instance: bbox crop resized to a fixed
/// encoder-friendly square.
pub fn exemplar_crop(scene: &SyntheticScene, instance_idx: usize) -> Result<Tensor> {
    let inst = scene
        .instances
        .get(instance_idx)
        .ok_or_else(|| Error::Precondition("exemplar instance out of range".to_string()))?;
    let (x1, y1, x2, y2) = mask_bbox(&inst.mask)
        .ok_or_else(|| Error::Precondition("exemplar instance has an empty mask".to_string()))?;
    let crop = scene.image.slice(&[y1..y2 + 1, x1..x2 + 1, 0..3])?;
    resize_nearest(&crop, 64, 64)
}

fn scene_terms(
    g: &mut Graph,
    student_cfg: &crate::model::ModelConfig,
    scene: &SyntheticScene,
    concepts: &ConceptSet,
    w: &LossWeights,
    opts: &Stage3Opts,
    rng: &mut ChaCha8Rng,
    task_terms: &mut Vec<VarId>,
    score_terms: &mut Vec<VarId>,
) -> Result<()> {
    if scene.instances.is_empty() {
        return Err(Error::Precondition(format!(
            "scene {} has no instances",
            scene.id
        )));
    }
    let feat = student_features(g, &scene.image)?;
    let present: Vec<usize> = {
        let mut ids: Vec<usize> = scene.instances.iter().map(|i| i.concept_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let positive = present[rng.gen_range(0..present.len())];

    // Concept prompt, optionally blended with an exemplar embedding.
    let mut concept_row = concept_embedding(g, student_cfg, positive)?;
    if rng.gen_bool(opts.exemplar_prob) {
        let candidates: Vec<usize> = scene
            .instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.concept_id == positive)
            .map(|(k, _)| k)
            .collect();
        let pick = candidates[rng.gen_range(0..candidates.len())];
        let crop = exemplar_crop(scene, pick)?;
        let emb = exemplar_embedding(g, &crop)?;
        let sum = g.tape.add(concept_row, emb)?;
        concept_row = g.tape.mul_scalar(sum, 0.5)?;
    }

    // Presence: positive target 1, sampled negatives target 0.
    let one = g.constant(Tensor::from_vec(vec![1], vec![1.0])?);
    let zero = g.constant(Tensor::from_vec(vec![1], vec![0.0])?);
    let p_logit = presence_logit(g, student_cfg, feat, concept_row)?;
    score_terms.push(score_bce(&mut g.tape, p_logit, one)?);
    let absent: Vec<usize> = (0..concepts.len())
        .filter(|c| !present.contains(c))
        .collect();
    for _ in 0..opts.n_negatives {
        if absent.is_empty() {
            break;
        }
        let hard: Vec<usize> = concepts
            .hard_negatives(positive)
            .into_iter()
            .filter(|c| absent.contains(c))
            .collect();
        let neg = if !hard.is_empty() {
            hard[rng.gen_range(0..hard.len())]
        } else {
            absent[rng.gen_range(0..absent.len())]
        };
        let neg_row = concept_embedding(g, student_cfg, neg)?;
        let n_logit = presence_logit(g, student_cfg, feat, neg_row)?;
        score_terms.push(score_bce(&mut g.tape, n_logit, zero)?);
    }

    // Query decode supervised against the positive concept's instances.
    let gt_masks: Vec<Tensor> = scene
        .instances
        .iter()
        .filter(|i| i.concept_id == positive)
        .map(|i| rasterize_mask(&i.mask, FEATURE_STRIDE))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|m| m.data().iter().any(|&v| v > 0.5))
        .collect();
    let queries = decode_queries(g, student_cfg, feat, concept_row)?;
    if !gt_masks.is_empty() {
        let mut prob_vars = Vec::with_capacity(queries.len());
        let mut prob_values = Vec::with_capacity(queries.len());
        for (mask_logits, _) in &queries {
            let p = g.tape.sigmoid(*mask_logits)?;
            prob_values.push(g.tape.value(p).clone());
            prob_vars.push(p);
        }
        let cost = mask_cost(&prob_values, &gt_masks, w)?;
        let assignment = min_cost_assignment(&cost)?;
        for (qi, (mask_logits, loc_logit)) in queries.iter().enumerate() {
            match assignment.targets[qi] {
                MatchTarget::Teacher(j) => {
                    let tv = g.constant(gt_masks[j].clone());
                    let d = dice_loss(&mut g.tape, prob_vars[qi], tv, w.dice_eps)?;
                    let f =
                        focal_loss(&mut g.tape, *mask_logits, tv, w.focal_alpha, w.focal_gamma)?;
                    task_terms.push(g.tape.add(d, f)?);
                    score_terms.push(score_bce(&mut g.tape, *loc_logit, one)?);
                }
                MatchTarget::Unmatched => {
                    score_terms.push(score_bce(&mut g.tape, *loc_logit, zero)?);
                }
            }
        }
    }
    Ok(())
}

/// One stage-3 step over a mixed batch. Accumulates concept-conditioned
/// mask losses, presence BCE with negatives, and clip tracking losses, then
/// writes gradients (encoder gradients are suppressed unless unfrozen).
pub fn stage3_step(
    student: &mut Student,
    teacher: &TeacherOracle,
    batch: &[MixedItem],
    concepts: &ConceptSet,
    w: &LossWeights,
    opts: &Stage3Opts,
    trainable: &BTreeSet<String>,
    rng: &mut ChaCha8Rng,
) -> Result<StepBreakdown> {
    w.validate()?;
    if batch.is_empty() {
        return Err(Error::Precondition("empty stage-3 batch".to_string()));
    }
    let cfg = student.cfg.clone();
    let (breakdown, grads) = {
        let mut g = Graph::new(&student.params, trainable, true);
        let mut task_terms: Vec<VarId> = Vec::new();
        let mut score_terms: Vec<VarId> = Vec::new();
        let mut clip_mask_terms: Vec<VarId> = Vec::new();
        let mut feat_terms: Vec<VarId> = Vec::new();
        for item in batch {
            match item {
                MixedItem::Scene(scene) => scene_terms(
                    &mut g,
                    &cfg,
                    scene,
                    concepts,
                    w,
                    opts,
                    rng,
                    &mut task_terms,
                    &mut score_terms,
                )?,
                MixedItem::Clip(clip) => {
                    let terms =
                        clip_loss_terms(&mut g, &cfg, teacher, clip, w, &opts.clip_opts, rng)?;
                    clip_mask_terms.extend(terms.mask);
                    score_terms.extend(terms.score);
                    feat_terms.extend(terms.feat);
                }
            }
        }
        if task_terms.is_empty() && score_terms.is_empty() && clip_mask_terms.is_empty() {
            return Err(Error::Precondition(
                "stage-3 batch produced no positive or negative supervision".to_string(),
            ));
        }
        let mut total: Option<VarId> = None;
        let mut add_part = |g: &mut Graph, part: Option<VarId>| -> Result<()> {
            if let Some(p) = part {
                total = Some(match total {
                    Some(t) => g.tape.add(t, p)?,
                    None => p,
                });
            }
            Ok(())
        };
        let task_mean = if task_terms.is_empty() {
            None
        } else {
            Some(mean_of(&mut g.tape, &task_terms)?)
        };
        let clip_mean = if clip_mask_terms.is_empty() {
            None
        } else {
            Some(mean_of(&mut g.tape, &clip_mask_terms)?)
        };
        let score_mean = if score_terms.is_empty() {
            None
        } else {
            Some(mean_of(&mut g.tape, &score_terms)?)
        };
        let feat_mean = if feat_terms.is_empty() {
            None
        } else {
            Some(mean_of(&mut g.tape, &feat_terms)?)
        };
        add_part(&mut g, task_mean)?;
        add_part(&mut g, clip_mean)?;
        add_part(&mut g, score_mean)?;
        if let Some(f) = feat_mean {
            let weighted = g.tape.mul_scalar(f, opts.clip_opts.readout_feat_weight)?;
            add_part(&mut g, Some(weighted))?;
        }
        let total = total.expect("at least one term group");
        let value_of = |g: &Graph, v: Option<VarId>| -> Result<f64> {
            v.map_or(Ok(0.0), |id| g.tape.value(id).item())
        };
        let breakdown = StepBreakdown {
            total: g.tape.value(total).item()?,
            task: value_of(&g, task_mean)?,
            feat: value_of(&g, feat_mean)?,
            mask: value_of(&g, clip_mean)?,
            score: value_of(&g, score_mean)?,
        };
        g.tape.backward(total)?;
        (breakdown, g.into_grads())
    };
    apply_grads(&mut student.params, &grads)?;
    Ok(breakdown)
}
