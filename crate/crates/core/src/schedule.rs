//! Stage orchestration data: per-stage configs with paper-scale and
//! desk-scale presets, warmup+cosine learning-rate schedule, the freezing
//! policy, EMA updates, and the model-zoo registry.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, ParamStore, TeacherMode};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: u8,
    pub base_lr: f64,
    pub weight_decay_encoder: f64,
    pub weight_decay_other: f64,
    /// Linear warmup length; `None` means `min(1000, total_steps / 10)`.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    /// Images per step (stages 1/3) or clips per step (stage 2).
    pub batch_size: usize,
    /// Clips mixed into each stage-3 batch.
    pub mixed_clips: usize,
    pub loss_weights: LossWeights,
    /// Explicit override of the freezing policy, by module tag.
    pub trainable_modules: Option<Vec<String>>,
    pub clip_norm: Option<f64>,
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub refinement_loops: usize,
    pub max_instances: usize,
    pub unfreeze_encoder: bool,
    pub model: ModelConfig,
    pub teacher_seed: u64,
    pub teacher_mode: TeacherMode,
    pub teacher_checkpoint: Option<String>,
    pub readout_feat_weight: f64,
    pub exemplar_prob: f64,
    pub n_negatives: usize,
    pub checkpoint_every: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: 1,
            base_lr: 1e-4,
            weight_decay_encoder: 0.05,
            weight_decay_other: 0.01,
            warmup_steps: None,
            total_steps: 1000,
            batch_size: 2,
            mixed_clips: 1,
            loss_weights: LossWeights::default(),
            trainable_modules: None,
            clip_norm: Some(1.0),
            ema_decay: None,
            seed: 42,
            refinement_loops: 1,
            max_instances: 16,
            unfreeze_encoder: false,
            model: ModelConfig::default(),
            teacher_seed: 42,
            teacher_mode: TeacherMode::Oracle,
            teacher_checkpoint: None,
            readout_feat_weight: 0.0,
            exemplar_prob: 0.3,
            n_negatives: 1,
            checkpoint_every: None,
        }
    }
}

impl StageConfig {
    /// Hyperparameters at the scale the method was described for. Batch
    /// sizes and step counts are aspirational on a laptop; see
    /// [`StageConfig::desk_preset`].
    pub fn paper_preset(stage: u8) -> Result<Self> {
        let mut cfg = StageConfig {
            stage,
            max_instances: 16,
            ..Default::default()
        };
        match stage {
            1 => {
                cfg.base_lr = 1e-4;
                cfg.batch_size = 64;
                cfg.total_steps = 20_000;
                cfg.warmup_steps = Some(1000);
            }
            2 => {
                cfg.base_lr = 5e-5;
                cfg.batch_size = 16;
                cfg.total_steps = 10_000;
                cfg.readout_feat_weight = 0.0;
            }
            3 => {
                cfg.base_lr = 2e-5;
                cfg.batch_size = 32;
                cfg.mixed_clips = 8;
                cfg.total_steps = 10_000;
                cfg.ema_decay = Some(0.999);
            }
            s => return Err(Error::Config(format!("unknown stage {s}"))),
        }
        Ok(cfg)
    }

    /// Laptop-scale preset used by default; model and data sizes shrink but
    /// the recipe shape is unchanged.
    pub fn desk_preset(stage: u8) -> Result<Self> {
        let mut cfg = StageConfig {
            stage,
            max_instances: 4,
            ..Default::default()
        };
        match stage {
            1 => {
                cfg.base_lr = 3e-4;
                cfg.batch_size = 2;
                cfg.total_steps = 2000;
                cfg.warmup_steps = Some(100);
            }
            2 => {
                cfg.base_lr = 2e-4;
                cfg.batch_size = 1;
                cfg.total_steps = 1000;
                cfg.warmup_steps = Some(50);
            }
            3 => {
                cfg.base_lr = 1e-4;
                cfg.batch_size = 2;
                cfg.mixed_clips = 1;
                cfg.total_steps = 400;
                cfg.warmup_steps = Some(40);
                cfg.ema_decay = Some(0.99);
            }
            s => return Err(Error::Config(format!("unknown stage {s}"))),
        }
        Ok(cfg)
    }

    pub fn effective_warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| 1000.min(self.total_steps / 10))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("unknown stage {}", self.stage)));
        }
        if self.total_steps > 0 && self.effective_warmup() >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than total_steps {}",
                self.effective_warmup(),
                self.total_steps
            )));
        }
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("bad base_lr {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay {d} outside [0,1)")));
            }
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if self.teacher_mode == TeacherMode::Trained && self.teacher_checkpoint.is_none() {
            return Err(Error::Config(
                "trained teacher mode needs teacher_checkpoint".to_string(),
            ));
        }
        self.loss_weights.validate()?;
        self.model.validate()
    }
}

/// Learning rate at a step: linear warmup to `base_lr`, then cosine decay
/// to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &StageConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Precondition(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let warmup = cfg.effective_warmup();
    if step < warmup {
        return Ok(cfg.base_lr * step as f64 / warmup as f64);
    }
    let span = (cfg.total_steps - warmup) as f64;
    if span == 0.0 {
        return Ok(cfg.base_lr);
    }
    let progress = (step - warmup) as f64 / span;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Trainable module tags per stage. The teacher is never trainable; the
/// concept table opens up in stage 3; the encoder can be unfrozen
/// explicitly.
pub fn freezing_policy(stage: u8, unfreeze_encoder: bool) -> Result<BTreeSet<String>> {
    let tags: &[&str] = match stage {
        1 => &["enc", "proj", "dec"],
        2 => &["memenc", "perceiver", "track"],
        3 => &["memenc", "perceiver", "dec", "presence", "concept"],
        s => return Err(Error::Config(format!("unknown stage {s}"))),
    };
    let mut set: BTreeSet<String> = tags.iter().map(|s| s.to_string()).collect();
    if unfreeze_encoder {
        set.insert("enc".to_string());
        set.insert("proj".to_string());
    }
    Ok(set)
}

/// `ema <- decay * ema + (1 - decay) * model`, elementwise over all
/// parameters. EMA tensors never carry gradients.
pub fn ema_update(model: &ParamStore, ema: &mut ParamStore, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay {decay} outside [0,1)")));
    }
    for (name, p) in model.iter() {
        let e = ema.get_mut(name)?;
        if e.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: e.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
    Ok(())
}

/// One student variant: nominal size from the published table plus the toy
/// encoder widths standing in for it at desk scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ZooEntry {
    pub name: &'static str,
    pub family: &'static str,
    pub nominal_params_m: f64,
    pub enc_widths: [usize; 4],
}

pub fn model_zoo() -> Vec<ZooEntry> {
    vec![
        ZooEntry { name: "ES-RV-S", family: "RepViT", nominal_params_m: 5.1, enc_widths: [10, 20, 40, 80] },
        ZooEntry { name: "ES-RV-M", family: "RepViT", nominal_params_m: 6.8, enc_widths: [11, 22, 44, 88] },
        ZooEntry { name: "ES-RV-L", family: "RepViT", nominal_params_m: 8.2, enc_widths: [12, 24, 48, 96] },
        ZooEntry { name: "ES-TV-S", family: "TinyViT", nominal_params_m: 5.4, enc_widths: [10, 20, 40, 84] },
        ZooEntry { name: "ES-TV-M", family: "TinyViT", nominal_params_m: 11.0, enc_widths: [14, 28, 56, 112] },
        ZooEntry { name: "ES-TV-L", family: "TinyViT", nominal_params_m: 21.0, enc_widths: [18, 36, 72, 144] },
        ZooEntry { name: "ES-EV-S", family: "EfficientViT", nominal_params_m: 0.7, enc_widths: [4, 8, 16, 32] },
        ZooEntry { name: "ES-EV-M", family: "EfficientViT", nominal_params_m: 4.8, enc_widths: [9, 18, 36, 72] },
        ZooEntry { name: "ES-EV-L", family: "EfficientViT", nominal_params_m: 15.0, enc_widths: [16, 32, 64, 128] },
    ]
}

pub fn zoo_entry(name: &str) -> Result<ZooEntry> {
    model_zoo()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Config(format!("unknown model zoo entry {name}")))
}

/// Parameter count of a toy encoder with these widths (3x3 convs + biases).
pub fn toy_encoder_params(widths: &[usize; 4]) -> usize {
    let mut c_in = 3;
    let mut total = 0;
    for &w in widths {
        total += w * c_in * 9 + w;
        c_in = w;
    }
    total
}

/// Applies a zoo entry to a model config.
pub fn apply_zoo_entry(cfg: &mut ModelConfig, name: &str) -> Result<()> {
    let entry = zoo_entry(name)?;
    cfg.zoo_name = entry.name.to_string();
    cfg.enc_widths = entry.enc_widths;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_student;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn lr_hits_base_at_warmup_end_and_zero_at_edges() {
        let cfg = StageConfig {
            base_lr: 1e-4,
            warmup_steps: Some(1000),
            total_steps: 20_000,
            ..StageConfig::paper_preset(1).unwrap()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(1000, &cfg).unwrap(), 1e-4);
        // Midpoint of the cosine span decays to exactly half.
        let mid = 1000 + (20_000 - 1000) / 2;
        let lr_mid = lr_at(mid, &cfg).unwrap();
        assert!((lr_mid - 5e-5).abs() < 1e-12, "{lr_mid}");
        let lr_end = lr_at(20_000, &cfg).unwrap();
        assert!(lr_end.abs() < 1e-18);
        assert!(lr_at(20_001, &cfg).is_err());
    }

    #[test]
    fn lr_is_continuous_and_non_negative() {
        let cfg = StageConfig {
            warmup_steps: Some(7),
            total_steps: 100,
            ..Default::default()
        };
        let mut prev = lr_at(0, &cfg).unwrap();
        for step in 1..=100 {
            let lr = lr_at(step, &cfg).unwrap();
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() < cfg.base_lr * 0.2, "jump at {step}");
            prev = lr;
        }
    }

    #[test]
    fn warmup_default_resolves_the_shorter_rule() {
        let short = StageConfig {
            warmup_steps: None,
            total_steps: 2000,
            ..Default::default()
        };
        assert_eq!(short.effective_warmup(), 200);
        let long = StageConfig {
            warmup_steps: None,
            total_steps: 50_000,
            ..Default::default()
        };
        assert_eq!(long.effective_warmup(), 1000);
    }

    #[test]
    fn freezing_policy_matches_the_stage_plan() {
        let s1 = freezing_policy(1, false).unwrap();
        assert!(s1.contains("enc") && s1.contains("proj") && s1.contains("dec"));
        assert!(!s1.contains("perceiver") && !s1.contains("concept"));
        let s2 = freezing_policy(2, false).unwrap();
        assert!(s2.contains("perceiver") && s2.contains("track") && s2.contains("memenc"));
        assert!(!s2.contains("enc"));
        let s3 = freezing_policy(3, false).unwrap();
        assert!(s3.contains("concept") && s3.contains("presence") && s3.contains("dec"));
        assert!(!s3.contains("enc"));
        let s3u = freezing_policy(3, true).unwrap();
        assert!(s3u.contains("enc"));
        assert!(freezing_policy(4, false).is_err());
    }

    #[test]
    fn ema_closed_form_over_five_steps() {
        let cfg = crate::model::ModelConfig {
            image_h: 32,
            image_w: 32,
            enc_widths: [2, 2, 2, 4],
            teacher_widths: [2, 2, 4, 8],
            feat_c: 8,
            dk: 4,
            hidden: 8,
            latents: crate::model::LatentConfig { k: 4, k_global: 2, grid: 1 },
            ..Default::default()
        };
        let mut model = init_student(&cfg, 1).unwrap();
        let mut ema = model.clone();
        let decay = 0.99;
        let mut rng = substream(4, "ema");
        // Record model snapshots m_1..m_5 after each perturbation.
        let mut snapshots: Vec<ParamStore> = Vec::new();
        for _ in 0..5 {
            for (_, t) in model.iter_mut() {
                for v in t.data_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
            }
            snapshots.push(model.clone());
            ema_update(&model, &mut ema, decay).unwrap();
        }
        // Closed form: ema_5 = d^5 e_0 + (1-d) sum_i d^(5-i) m_i.
        let e0 = init_student(&cfg, 1).unwrap();
        for (name, got) in ema.iter() {
            let base = e0.get(name).unwrap();
            for (j, &g) in got.data().iter().enumerate() {
                let mut expect = decay.powi(5) * base.data()[j];
                for (i, snap) in snapshots.iter().enumerate() {
                    expect +=
                        (1.0 - decay) * decay.powi(4 - i as i32) * snap.get(name).unwrap().data()[j];
                }
                assert!((g - expect).abs() < 1e-12, "{name}[{j}]: {g} vs {expect}");
            }
        }
    }

    #[test]
    fn ema_limits() {
        let cfg = crate::model::ModelConfig {
            image_h: 32,
            image_w: 32,
            enc_widths: [2, 2, 2, 4],
            teacher_widths: [2, 2, 4, 8],
            feat_c: 8,
            dk: 4,
            hidden: 8,
            latents: crate::model::LatentConfig { k: 4, k_global: 2, grid: 1 },
            ..Default::default()
        };
        let model = init_student(&cfg, 2).unwrap();
        let mut ema = init_student(&cfg, 3).unwrap();
        ema_update(&model, &mut ema, 0.0).unwrap();
        for (name, t) in model.iter() {
            assert_eq!(t.data(), ema.get(name).unwrap().data());
        }
        let mut ema2 = init_student(&cfg, 3).unwrap();
        let before = ema2.get("dec.mask_tok").unwrap().data().to_vec();
        ema_update(&model, &mut ema2, 1.0 - 1e-12).unwrap();
        for (a, b) in before.iter().zip(ema2.get("dec.mask_tok").unwrap().data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(ema_update(&model, &mut ema2, 1.0).is_err());
    }

    #[test]
    fn zoo_has_nine_entries_ordered_within_families() {
        let zoo = model_zoo();
        assert_eq!(zoo.len(), 9);
        for family in ["RepViT", "TinyViT", "EfficientViT"] {
            let members: Vec<&ZooEntry> = zoo.iter().filter(|e| e.family == family).collect();
            assert_eq!(members.len(), 3);
            for pair in members.windows(2) {
                // Table order is S < M < L in nominal params; toy counts
                // must be strictly ordered the same way.
                assert!(pair[0].nominal_params_m < pair[1].nominal_params_m);
                assert!(
                    toy_encoder_params(&pair[0].enc_widths)
                        < toy_encoder_params(&pair[1].enc_widths),
                    "{} vs {}",
                    pair[0].name,
                    pair[1].name
                );
            }
        }
        assert!(zoo_entry("ES-TV-M").is_ok());
        assert!(zoo_entry("ES-XX-9").is_err());
    }

    #[test]
    fn presets_validate() {
        for stage in 1..=3u8 {
            StageConfig::paper_preset(stage).unwrap().validate().unwrap();
            StageConfig::desk_preset(stage).unwrap().validate().unwrap();
        }
        assert!(StageConfig::paper_preset(4).is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let json = r#"{"stage": 1, "total_steps": 10, "learning_rate_typo": 3.0}"#;
        let parsed: std::result::Result<StageConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }
}
