//! Evaluation paths: prompted-instance mIoU on scenes, semi-supervised
//! propagation J&F on clips (with selectable memory mode), and the
//! presence/gating probe used after stage 3.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::{memory_encode, register_compressor, spatial_compress, track_decode};
use crate::metrics::{eval_jf, eval_miou};
use crate::model::{
    concept_embedding, presence_logit, student_features, Graph, Student, FEATURE_STRIDE,
};
use crate::prompt::{initial_prompt, PromptSet};
use crate::rng::substream;
use crate::sim::{rasterize_mask, Clip, ConceptSet, SyntheticScene};
use crate::stage1::eval_decode_instance;
use crate::tensor::sigmoid_scalar;
use crate::tracker::{detect, Detector, Masklet};
use crate::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct SceneScore {
    pub id: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MiouReport {
    pub metric: String,
    pub per_scene: Vec<SceneScore>,
    pub aggregate: f64,
}

/// Prompted mIoU: each instance decodes once from a seeded initial prompt;
/// predictions compare against the (oracle-teacher) feature-resolution
/// masks. The aggregate is the mean of per-scene values.
pub fn eval_prompted_miou(
    student: &Student,
    scenes: &[SyntheticScene],
    seed: u64,
) -> Result<MiouReport> {
    if scenes.is_empty() {
        return Err(Error::Precondition("no scenes to evaluate".to_string()));
    }
    let mut rng = substream(seed, "eval-prompt");
    let mut per_scene = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for inst in &scene.instances {
            let gt = rasterize_mask(&inst.mask, FEATURE_STRIDE)?;
            if gt.data().iter().all(|&v| v <= 0.5) {
                continue;
            }
            let prompt = initial_prompt(&inst.mask, &mut rng)?;
            let prompts = PromptSet::new(prompt, inst.concept_id);
            preds.push(eval_decode_instance(student, &scene.image, &prompts)?);
            gts.push(gt);
        }
        if preds.is_empty() {
            continue;
        }
        per_scene.push(SceneScore {
            id: scene.id.clone(),
            value: eval_miou(&preds, &gts)?,
        });
    }
    if per_scene.is_empty() {
        return Err(Error::Precondition(
            "no evaluable instances in any scene".to_string(),
        ));
    }
    let aggregate = per_scene.iter().map(|s| s.value).sum::<f64>() / per_scene.len() as f64;
    Ok(MiouReport {
        metric: "miou".to_string(),
        per_scene,
        aggregate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// Compressed latent memory (the student path).
    Perceiver,
    /// Raw bank tokens, no compression (the dense baseline).
    Dense,
    /// The learned no-memory token only.
    NoMemory,
}

#[derive(Debug, Clone, Serialize)]
pub struct JfReport {
    pub metric: String,
    pub per_clip: Vec<SceneScore>,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Semi-supervised propagation over one clip: each object's memory starts
/// from its first-frame ground truth, later frames decode through the
/// selected memory mode and feed their own binarized prediction back in.
pub fn propagate_clip(
    student: &Student,
    clip: &Clip,
    mode: MemoryMode,
) -> Result<(Vec<Masklet>, Vec<Masklet>)> {
    let cfg = &student.cfg;
    let t_len = clip.frames.len();
    if t_len < 2 {
        return Err(Error::Precondition("clip too short".to_string()));
    }
    let objects = crate::memory::clip_object_masks(clip, cfg)?;
    let frozen = BTreeSet::new();
    let mut g = Graph::new(&student.params, &frozen, false);
    let vars = register_compressor(&mut g)?;
    let latents = g.param("perceiver.latents")?;
    let frame_feats: Vec<_> = clip
        .frames
        .iter()
        .map(|f| student_features(&mut g, &f.image))
        .collect::<Result<Vec<_>>>()?;

    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (id, concept_id, masks) in &objects {
        // Ground-truth masklet keeps nonempty frames only (gaps = absence).
        let mut gt = Masklet::new(*id, *concept_id, 0, masks[0].clone());
        for (t, m) in masks.iter().enumerate().skip(1) {
            if m.data().iter().any(|&v| v > 0.5) {
                gt.frames.insert(t, m.clone());
            }
        }
        gts.push(gt);

        let concept_row = concept_embedding(&mut g, cfg, *concept_id)?;
        let mut pred = Masklet::new(*id, *concept_id, 0, masks[0].clone());
        let mut bank: Vec<crate::autodiff::VarId> = Vec::new();
        let mut current_mask = masks[0].clone();
        for t in 0..t_len - 1 {
            if mode != MemoryMode::NoMemory {
                let entry = memory_encode(&mut g, frame_feats[t], &current_mask)?;
                let tokens = match mode {
                    MemoryMode::Perceiver => {
                        spatial_compress(&mut g, cfg, &vars, latents, entry, None)?
                    }
                    MemoryMode::Dense => {
                        let n = cfg.n_tokens();
                        g.tape.reshape(entry, &[n, cfg.feat_c])?
                    }
                    MemoryMode::NoMemory => unreachable!(),
                };
                bank.push(tokens);
                if bank.len() > cfg.bank_capacity {
                    bank.remove(0);
                }
            }
            let mem = if bank.is_empty() {
                None
            } else {
                Some(g.tape.concat(&bank, 0)?)
            };
            let (mask_logits, _score, _) =
                track_decode(&mut g, cfg, frame_feats[t + 1], concept_row, mem)?;
            let data: Vec<f64> = g
                .tape
                .value(mask_logits)
                .data()
                .iter()
                .map(|&v| f64::from(v >= 0.0))
                .collect();
            let mask = Tensor::from_vec(vec![cfg.feat_h(), cfg.feat_w()], data)?;
            pred.frames.insert(t + 1, mask.clone());
            current_mask = mask;
        }
        preds.push(pred);
    }
    Ok((preds, gts))
}

pub fn eval_vos(student: &Student, clips: &[Clip], mode: MemoryMode) -> Result<JfReport> {
    if clips.is_empty() {
        return Err(Error::Precondition("no clips to evaluate".to_string()));
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for clip in clips {
        let (preds, gts) = propagate_clip(student, clip, mode)?;
        let (j, f, jf) = eval_jf(&preds, &gts)?;
        j_sum += j;
        f_sum += f;
        per_clip.push(SceneScore {
            id: clip.id.clone(),
            value: jf,
        });
    }
    let j = j_sum / clips.len() as f64;
    let f = f_sum / clips.len() as f64;
    Ok(JfReport {
        metric: "jf".to_string(),
        per_clip,
        j,
        f,
        jf: 0.5 * (j + f),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PresenceReport {
    pub bce: f64,
    pub pairs: usize,
    pub gating_violations: usize,
}

fn bce_value(logit: f64, target: f64) -> f64 {
    crate::tensor::softplus_scalar(logit) - logit * target
}

/// Presence BCE over (positive, hard-negative) concept pairs plus a check
/// of the gating inequality on every detection of the positive concept.
pub fn eval_presence_gating(
    student: &Student,
    scenes: &[SyntheticScene],
    concepts: &ConceptSet,
    seed: u64,
) -> Result<PresenceReport> {
    if scenes.is_empty() {
        return Err(Error::Precondition("no scenes to evaluate".to_string()));
    }
    let mut rng = substream(seed, "eval-presence");
    let mut bce_sum = 0.0;
    let mut pairs = 0usize;
    let mut violations = 0usize;
    for scene in scenes {
        let present: Vec<usize> = {
            let mut ids: Vec<usize> = scene.instances.iter().map(|i| i.concept_id).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        if present.is_empty() {
            continue;
        }
        let positive = present[rng.gen_range(0..present.len())];
        let hard: Vec<usize> = concepts
            .hard_negatives(positive)
            .into_iter()
            .filter(|c| !present.contains(c))
            .collect();
        if hard.is_empty() {
            continue;
        }
        let negative = hard[rng.gen_range(0..hard.len())];
        let frozen = BTreeSet::new();
        let mut g = Graph::new(&student.params, &frozen, false);
        let feat = student_features(&mut g, &scene.image)?;
        let pos_row = concept_embedding(&mut g, &student.cfg, positive)?;
        let neg_row = concept_embedding(&mut g, &student.cfg, negative)?;
        let pos_id = presence_logit(&mut g, &student.cfg, feat, pos_row)?;
        let neg_id = presence_logit(&mut g, &student.cfg, feat, neg_row)?;
        let pos_logit = g.tape.value(pos_id).item()?;
        let neg_logit = g.tape.value(neg_id).item()?;
        bce_sum += bce_value(pos_logit, 1.0) + bce_value(neg_logit, 0.0);
        pairs += 2;

        let (presence, dets) = detect(&Detector::Model { student }, &scene.image, positive)?;
        for d in &dets {
            if d.final_score > d.presence.min(d.loc_score) {
                violations += 1;
            }
        }
        let _ = presence;
    }
    if pairs == 0 {
        return Err(Error::Precondition(
            "no evaluable concept pairs".to_string(),
        ));
    }
    Ok(PresenceReport {
        bce: bce_sum / pairs as f64,
        pairs,
        gating_violations: violations,
    })
}

/// Sigmoid of a raw score logit, for reports.
pub fn score_prob(logit: f64) -> f64 {
    sigmoid_scalar(logit)
}
