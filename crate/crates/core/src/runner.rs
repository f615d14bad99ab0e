//! The training loop shared by all stages: deterministic batch sampling,
//! the per-stage step function, AdamW with the schedule, EMA, JSON-lines
//! metrics, and checkpointing. Frozen module groups are hash-checked after
//! the run.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::memory::{stage2_step, Stage2Opts};
use crate::model::{ParamStore, StepBreakdown, Student, TeacherMode, TeacherOracle};
use crate::optim::{optimizer_step, AdamHyper};
use crate::rng::substream;
use crate::schedule::{ema_update, freezing_policy, lr_at, StageConfig};
use crate::sim::Dataset;
use crate::stage1::{make_distill_image, stage1_step, DistillImage};
use crate::stage3::{stage3_step, MixedItem, Stage3Opts};
use crate::{cache::TeacherCache, Tensor};

/// One metrics-log line; field order is part of the format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_feat: f64,
    pub loss_mask: f64,
    pub loss_task: f64,
    pub loss_score: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub steps: usize,
}

/// Builds the teacher described by a stage config.
pub fn build_teacher(cfg: &StageConfig) -> Result<TeacherOracle> {
    let teacher = TeacherOracle::new(&cfg.model, cfg.teacher_seed)?;
    if cfg.teacher_mode == TeacherMode::Trained {
        let path = cfg
            .teacher_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("trained teacher needs a checkpoint".to_string()))?;
        let loaded = load_checkpoint(Path::new(path))?;
        if loaded.student.cfg != cfg.model {
            return Err(Error::Config(
                "teacher checkpoint model config differs from the run's model".to_string(),
            ));
        }
        return Ok(teacher.with_trained(loaded.student.params));
    }
    Ok(teacher)
}

fn sample_stage1_batch(
    cfg: &StageConfig,
    data: &Dataset,
    teacher: &TeacherOracle,
    fingerprint: &str,
    data_rng: &mut rand_chacha::ChaCha8Rng,
    prompt_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<DistillImage>> {
    if data.scenes.is_empty() {
        return Err(Error::Precondition("dataset has no scenes".to_string()));
    }
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut attempts = 0;
    while batch.len() < cfg.batch_size {
        attempts += 1;
        if attempts > cfg.batch_size * 50 {
            return Err(Error::Precondition(
                "could not assemble a stage-1 batch from the dataset".to_string(),
            ));
        }
        let idx = data_rng.gen_range(0..data.scenes.len());
        if let Some(img) = make_distill_image(
            &data.scenes[idx],
            teacher,
            fingerprint,
            cfg.max_instances,
            prompt_rng,
        )? {
            batch.push(img);
        }
    }
    Ok(batch)
}

fn mean_breakdown(parts: &[StepBreakdown]) -> StepBreakdown {
    let n = parts.len() as f64;
    let mut out = StepBreakdown::default();
    for p in parts {
        out.total += p.total / n;
        out.task += p.task / n;
        out.feat += p.feat / n;
        out.mask += p.mask / n;
        out.score += p.score / n;
    }
    out
}

/// Runs one full stage. Stages 2 and 3 require the previous stage's
/// checkpoint. Returns paths to the final checkpoint and the metrics log.
pub fn run_stage(
    cfg: &StageConfig,
    data: &Dataset,
    from_checkpoint: Option<&Path>,
    out_dir: &Path,
    cache_root: Option<&Path>,
) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.stage >= 2 && from_checkpoint.is_none() {
        return Err(Error::Precondition(format!(
            "stage {} requires the previous stage's checkpoint",
            cfg.stage
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let (mut student, loaded_opt, loaded_ema) = match from_checkpoint {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.student.cfg != cfg.model {
                return Err(Error::Config(
                    "checkpoint model config differs from the run's model config".to_string(),
                ));
            }
            let same_stage = loaded.meta.stage == cfg.stage;
            (
                loaded.student,
                if same_stage { loaded.opt } else { None },
                loaded.ema,
            )
        }
        None => (Student::new(cfg.model.clone(), cfg.seed)?, None, None),
    };
    let teacher = build_teacher(cfg)?;
    let trainable = match &cfg.trainable_modules {
        Some(list) => list.iter().cloned().collect(),
        None => freezing_policy(cfg.stage, cfg.unfreeze_encoder)?,
    };
    let frozen_hashes: Vec<(String, u64)> = student
        .params
        .modules()
        .into_iter()
        .filter(|m| !trainable.contains(m))
        .map(|m| {
            let h = student.params.group_hash(&m);
            (m, h)
        })
        .collect();

    let cache_dir = cache_root
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join("teacher_cache"));
    let cache = TeacherCache::new(cache_dir)?;
    let fingerprint = format!(
        "{}|teacher{}|{:?}",
        data.config.fingerprint(),
        cfg.teacher_seed,
        cfg.teacher_mode
    );

    let mut opt_state = loaded_opt.unwrap_or_default();
    let hyper = AdamHyper::default();
    let mut ema: Option<ParamStore> = match (cfg.ema_decay, loaded_ema) {
        (Some(_), Some(e)) => Some(e),
        (Some(_), None) => Some(student.params.clone()),
        (None, _) => None,
    };

    let mut data_rng = substream(cfg.seed, "data");
    let mut step_rng = substream(cfg.seed, "prompt-sampling");
    let concepts = data.config.concepts();

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?,
    );

    let mut first_loss = None;
    let mut last_loss = None;
    for step in 0..cfg.total_steps {
        let wall = Instant::now();
        let lr = lr_at(step, cfg)?;
        student.params.zero_grads();
        let breakdown = match cfg.stage {
            1 => {
                let batch = sample_stage1_batch(
                    cfg,
                    data,
                    &teacher,
                    &fingerprint,
                    &mut data_rng,
                    &mut step_rng,
                )?;
                stage1_step(
                    &mut student,
                    &teacher,
                    &cache,
                    &batch,
                    &cfg.loss_weights,
                    cfg.refinement_loops,
                    &trainable,
                    &mut step_rng,
                )?
            }
            2 => {
                if data.clips.is_empty() {
                    return Err(Error::Precondition("dataset has no clips".to_string()));
                }
                let opts = Stage2Opts {
                    readout_feat_weight: cfg.readout_feat_weight,
                    dropout: true,
                };
                let mut parts = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let idx = data_rng.gen_range(0..data.clips.len());
                    parts.push(stage2_step(
                        &mut student,
                        &teacher,
                        &data.clips[idx],
                        &cfg.loss_weights,
                        &opts,
                        &trainable,
                        &mut step_rng,
                    )?);
                }
                mean_breakdown(&parts)
            }
            3 => {
                if data.scenes.is_empty() {
                    return Err(Error::Precondition("dataset has no scenes".to_string()));
                }
                let opts = Stage3Opts {
                    n_negatives: cfg.n_negatives,
                    exemplar_prob: cfg.exemplar_prob,
                    clip_opts: Stage2Opts {
                        readout_feat_weight: cfg.readout_feat_weight,
                        dropout: true,
                    },
                };
                let mut scene_idx = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    scene_idx.push(data_rng.gen_range(0..data.scenes.len()));
                }
                let mut clip_idx = Vec::new();
                if !data.clips.is_empty() {
                    for _ in 0..cfg.mixed_clips {
                        clip_idx.push(data_rng.gen_range(0..data.clips.len()));
                    }
                }
                let mut batch: Vec<MixedItem> = scene_idx
                    .iter()
                    .map(|&i| MixedItem::Scene(&data.scenes[i]))
                    .collect();
                batch.extend(clip_idx.iter().map(|&i| MixedItem::Clip(&data.clips[i])));
                stage3_step(
                    &mut student,
                    &teacher,
                    &batch,
                    &concepts,
                    &cfg.loss_weights,
                    &opts,
                    &trainable,
                    &mut step_rng,
                )?
            }
            s => return Err(Error::Config(format!("unknown stage {s}"))),
        };
        optimizer_step(
            &mut student.params,
            &mut opt_state,
            lr,
            cfg.weight_decay_encoder,
            cfg.weight_decay_other,
            cfg.clip_norm,
            &hyper,
        )?;
        if let (Some(decay), Some(e)) = (cfg.ema_decay, ema.as_mut()) {
            ema_update(&student.params, e, decay)?;
        }
        let record = MetricsRecord {
            stage: cfg.stage,
            step,
            lr,
            loss_total: breakdown.total,
            loss_feat: breakdown.feat,
            loss_mask: breakdown.mask,
            loss_task: breakdown.task,
            loss_score: breakdown.score,
            wall_ms: wall.elapsed().as_secs_f64() * 1e3,
        };
        let line = serde_json::to_string(&record)?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        first_loss.get_or_insert(breakdown.total);
        last_loss = Some(breakdown.total);
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.total_steps {
                let dir = checkpoint_path(out_dir, &format!("step_{:06}", step + 1));
                save_checkpoint(
                    &dir,
                    &student,
                    Some(&opt_state),
                    ema.as_ref(),
                    cfg.stage,
                    step + 1,
                    cfg.seed,
                )?;
            }
        }
    }
    metrics
        .flush()
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    // Frozen groups must be bit-identical after the run.
    for (module, before) in &frozen_hashes {
        let after = student.params.group_hash(module);
        if after != *before {
            return Err(Error::Precondition(format!(
                "frozen module {module} changed during stage {}",
                cfg.stage
            )));
        }
    }

    let final_dir = checkpoint_path(out_dir, "final");
    save_checkpoint(
        &final_dir,
        &student,
        Some(&opt_state),
        ema.as_ref(),
        cfg.stage,
        cfg.total_steps,
        cfg.seed,
    )?;
    Ok(RunSummary {
        final_checkpoint: final_dir,
        metrics_path,
        first_loss,
        last_loss,
        steps: cfg.total_steps,
    })
}

/// Reads a metrics log back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Metrics records with wall-clock stripped, for determinism comparisons.
pub fn metrics_without_wall(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records
        .iter()
        .map(|r| MetricsRecord {
            wall_ms: 0.0,
            ..r.clone()
        })
        .collect()
}

/// Tensor digest of a dataset image, used in tests.
pub fn image_digest(t: &Tensor) -> u64 {
    crate::checkpoint::tensor_hash(t)
}
