//! Procedural scenes and clips: colored shapes on a noisy background with
//! per-identity linear motion and scripted occlusion/reappearance events.
//! Stands in for the real datasets at desk scale; everything is
//! bit-deterministic per (config, seed).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, substream};
use crate::tensor::{load_tensor, save_tensor};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.20, 0.30, 0.85]),
    ("yellow", [0.85, 0.80, 0.15]),
    ("magenta", [0.80, 0.20, 0.75]),
    ("cyan", [0.15, 0.75, 0.80]),
];

/// A concept is a (shape, color) pair; ids enumerate the cross product.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConceptInfo {
    pub id: usize,
    pub shape: ShapeKind,
    pub color_name: String,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub concepts: Vec<ConceptInfo>,
    n_colors: usize,
}

impl ConceptSet {
    pub fn new(n_colors: usize) -> Result<Self> {
        if n_colors == 0 || n_colors > PALETTE.len() {
            return Err(Error::Config(format!(
                "n_colors {n_colors} outside 1..={}",
                PALETTE.len()
            )));
        }
        let mut concepts = Vec::new();
        for (si, &shape) in SHAPES.iter().enumerate() {
            for (ci, (name, rgb)) in PALETTE.iter().take(n_colors).enumerate() {
                concepts.push(ConceptInfo {
                    id: si * n_colors + ci,
                    shape,
                    color_name: name.to_string(),
                    rgb: *rgb,
                });
            }
        }
        Ok(ConceptSet { concepts, n_colors })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&ConceptInfo> {
        self.concepts
            .get(id)
            .ok_or_else(|| Error::Config(format!("concept id {id} out of range")))
    }

    /// Confusable concepts: share the shape or the color, but not both.
    pub fn hard_negatives(&self, id: usize) -> Vec<usize> {
        let target = &self.concepts[id];
        self.concepts
            .iter()
            .filter(|c| {
                c.id != id && (c.shape == target.shape || c.color_name == target.color_name)
            })
            .map(|c| c.id)
            .collect()
    }

    pub fn n_colors(&self) -> usize {
        self.n_colors
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub n_scenes: usize,
    pub n_clips: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub n_colors: usize,
    pub allow_occlusion: bool,
    pub clip_len_min: usize,
    pub clip_len_max: usize,
    pub speed_max: f64,
    pub occlusion_prob: f64,
    pub noise: f64,
    /// Minimum visible pixels per instance; scenes are resampled below it.
    pub min_visible: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_h: 128,
            image_w: 128,
            n_scenes: 160,
            n_clips: 32,
            instances_min: 2,
            instances_max: 4,
            radius_min: 18.0,
            radius_max: 40.0,
            n_colors: 4,
            allow_occlusion: true,
            clip_len_min: 4,
            clip_len_max: 8,
            speed_max: 4.0,
            occlusion_prob: 0.3,
            noise: 0.05,
            min_visible: 256,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return Err(Error::Config("bad instance count range".to_string()));
        }
        if self.instances_max > 16 {
            return Err(Error::Config(
                "instances_max > 16 is not supported".to_string(),
            ));
        }
        let max_fit = (self.image_h.min(self.image_w) as f64 / 2.0) - 1.0;
        if self.radius_min <= 2.0 || self.radius_min > self.radius_max || self.radius_max > max_fit
        {
            return Err(Error::Config(format!(
                "radius range [{}, {}] does not fit a {}x{} image",
                self.radius_min, self.radius_max, self.image_h, self.image_w
            )));
        }
        if self.clip_len_min < 2 || self.clip_len_min > self.clip_len_max {
            return Err(Error::Config("bad clip length range".to_string()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("occlusion_prob outside [0,1]".to_string()));
        }
        ConceptSet::new(self.n_colors)?;
        // A conservative packing check so impossible configs fail fast.
        let area = (self.image_h * self.image_w) as f64;
        let min_shape_area = std::f64::consts::PI * self.radius_min * self.radius_min;
        if !self.allow_occlusion && self.instances_max as f64 * min_shape_area > 0.55 * area {
            return Err(Error::Config(
                "too many instances to place without occlusion".to_string(),
            ));
        }
        Ok(())
    }

    pub fn concepts(&self) -> ConceptSet {
        ConceptSet::new(self.n_colors).expect("validated")
    }

    /// Fingerprint for teacher-cache keys; changes when preprocessing does.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable config");
        format!("{:016x}", fnv1a64(&bytes))
    }
}

#[derive(Debug, Clone)]
pub struct SceneInstance {
    pub mask: Tensor,
    pub concept_id: usize,
    pub identity: u32,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub id: String,
    pub image: Tensor,
    pub instances: Vec<SceneInstance>,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<SyntheticScene>,
    /// Per-identity (vx, vy) in pixels per frame.
    pub velocities: BTreeMap<u32, (f64, f64)>,
    pub concept_of: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    pub clips: Vec<Clip>,
    pub concepts: Vec<ConceptInfo>,
    pub config: GenConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct ShapeSpec {
    concept_id: usize,
    shape: ShapeKind,
    rgb: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
}

fn member(spec: &ShapeSpec, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - spec.cx, y - spec.cy);
    let r = spec.radius;
    match spec.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Triangle => {
            // Upward triangle: apex (cx, cy-r), base corners (cx +- r, cy + r).
            if dy < -r || dy > r {
                return false;
            }
            let half_width = (dy + r) / 2.0;
            dx.abs() <= half_width
        }
    }
}

/// Renders shape specs (later entries on top) into an image plus per-spec
/// visible masks.
fn render(
    cfg: &GenConfig,
    specs: &[ShapeSpec],
    identities: &[u32],
    rng: &mut ChaCha8Rng,
    id: String,
) -> SyntheticScene {
    let (h, w) = (cfg.image_h, cfg.image_w);
    let mut image = Tensor::zeros(&[h, w, 3]);
    let mut masks: Vec<Tensor> = specs.iter().map(|_| Tensor::zeros(&[h, w])).collect();
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let mut color = [0.12, 0.12, 0.12];
            let mut owner: Option<usize> = None;
            for (i, spec) in specs.iter().enumerate() {
                if member(spec, xf, yf) {
                    owner = Some(i);
                    color = spec.rgb;
                }
            }
            if let Some(i) = owner {
                masks[i].set(&[y, x], 1.0);
            }
            for (c, &v) in color.iter().enumerate() {
                image.set(&[y, x, c], v);
            }
        }
    }
    // Deterministic pixel noise after geometry.
    if cfg.noise > 0.0 {
        for v in image.data_mut() {
            let n = rng.gen_range(-cfg.noise..cfg.noise);
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    let instances = specs
        .iter()
        .zip(masks)
        .zip(identities)
        .filter(|((_, m), _)| m.data().iter().any(|&v| v > 0.5))
        .map(|((spec, mask), &identity)| SceneInstance {
            mask,
            concept_id: spec.concept_id,
            identity,
        })
        .collect();
    SyntheticScene {
        id,
        image,
        instances,
    }
}

fn sample_specs(cfg: &GenConfig, concepts: &ConceptSet, rng: &mut ChaCha8Rng) -> Result<Vec<ShapeSpec>> {
    let n = rng.gen_range(cfg.instances_min..=cfg.instances_max);
    let mut specs: Vec<ShapeSpec> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..64 {
            let concept_id = rng.gen_range(0..concepts.len());
            let info = concepts.get(concept_id)?;
            let radius = rng.gen_range(cfg.radius_min..=cfg.radius_max);
            let cx = rng.gen_range(radius..(cfg.image_w as f64 - 1.0 - radius));
            let cy = rng.gen_range(radius..(cfg.image_h as f64 - 1.0 - radius));
            let candidate = ShapeSpec {
                concept_id,
                shape: info.shape,
                rgb: info.rgb,
                cx,
                cy,
                radius,
            };
            let overlaps = specs.iter().any(|s| {
                let d2 = (s.cx - cx).powi(2) + (s.cy - cy).powi(2);
                d2 < (s.radius + radius).powi(2)
            });
            if cfg.allow_occlusion || !overlaps {
                specs.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(
                "could not place instances without occlusion".to_string(),
            ));
        }
    }
    Ok(specs)
}

fn scene_ok(cfg: &GenConfig, scene: &SyntheticScene, expected: usize) -> bool {
    scene.instances.len() == expected
        && scene
            .instances
            .iter()
            .all(|i| i.mask.data().iter().filter(|&&v| v > 0.5).count() >= cfg.min_visible)
}

/// One still scene; deterministic per (config, seed).
pub fn gen_scene(cfg: &GenConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let concepts = cfg.concepts();
    let mut rng = substream(seed, "scene");
    for _attempt in 0..100 {
        let specs = sample_specs(cfg, &concepts, &mut rng)?;
        let identities: Vec<u32> = (0..specs.len() as u32).collect();
        let scene = render(cfg, &specs, &identities, &mut rng, format!("scene_{seed:08x}"));
        if scene_ok(cfg, &scene, specs.len()) {
            return Ok(scene);
        }
    }
    Err(Error::Config(
        "scene generation failed to satisfy visibility constraints".to_string(),
    ))
}

/// A short clip with per-identity linear motion, border bouncing, and
/// scripted occlusion intervals; deterministic per (config, seed).
pub fn gen_clip(cfg: &GenConfig, seed: u64) -> Result<Clip> {
    cfg.validate()?;
    let concepts = cfg.concepts();
    let mut rng = substream(seed, "clip");
    let t_len = rng.gen_range(cfg.clip_len_min..=cfg.clip_len_max);
    let specs = sample_specs(cfg, &concepts, &mut rng)?;
    let identities: Vec<u32> = (0..specs.len() as u32).collect();
    let mut velocities = BTreeMap::new();
    let mut hidden: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for &id in &identities {
        let vx = rng.gen_range(-cfg.speed_max..=cfg.speed_max);
        let vy = rng.gen_range(-cfg.speed_max..=cfg.speed_max);
        velocities.insert(id, (vx, vy));
        if t_len >= 4 && rng.gen_bool(cfg.occlusion_prob) {
            let start = rng.gen_range(1..=t_len - 3);
            let len = rng.gen_range(1..=2usize);
            hidden.insert(id, (start, len));
        }
    }
    let concept_of: BTreeMap<u32, usize> = identities
        .iter()
        .map(|&i| (i, specs[i as usize].concept_id))
        .collect();

    let mut frames = Vec::with_capacity(t_len);
    let mut centers: Vec<(f64, f64)> = specs.iter().map(|s| (s.cx, s.cy)).collect();
    for t in 0..t_len {
        let mut frame_specs = Vec::new();
        let mut frame_ids = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            let id = identities[i];
            if let Some(&(start, len)) = hidden.get(&id) {
                if t >= start && t < start + len {
                    continue;
                }
            }
            frame_specs.push(ShapeSpec {
                cx: centers[i].0,
                cy: centers[i].1,
                ..*spec
            });
            frame_ids.push(id);
        }
        frames.push(render(
            cfg,
            &frame_specs,
            &frame_ids,
            &mut rng,
            format!("clip_{seed:08x}_f{t:02}"),
        ));
        // Advance with bouncing so shapes stay fully in frame.
        for (i, spec) in specs.iter().enumerate() {
            let (vx, vy) = velocities[&identities[i]];
            let (lo_x, hi_x) = (spec.radius, cfg.image_w as f64 - 1.0 - spec.radius);
            let (lo_y, hi_y) = (spec.radius, cfg.image_h as f64 - 1.0 - spec.radius);
            let mut nx = centers[i].0 + vx;
            let mut ny = centers[i].1 + vy;
            if nx < lo_x {
                nx = 2.0 * lo_x - nx;
            }
            if nx > hi_x {
                nx = 2.0 * hi_x - nx;
            }
            if ny < lo_y {
                ny = 2.0 * lo_y - ny;
            }
            if ny > hi_y {
                ny = 2.0 * hi_y - ny;
            }
            centers[i] = (nx, ny);
        }
    }
    Ok(Clip {
        id: format!("clip_{seed:08x}"),
        frames,
        velocities,
        concept_of,
    })
}

fn item_seed(root: u64, kind: &str, index: usize) -> u64 {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&root.to_le_bytes());
    bytes.extend_from_slice(kind.as_bytes());
    bytes.extend_from_slice(&(index as u64).to_le_bytes());
    fnv1a64(&bytes)
}

pub fn gen_dataset(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let mut scene = gen_scene(cfg, item_seed(seed, "scene", i))?;
        scene.id = format!("scene_{i:04}");
        scenes.push(scene);
    }
    let mut clips = Vec::with_capacity(cfg.n_clips);
    for i in 0..cfg.n_clips {
        let mut clip = gen_clip(cfg, item_seed(seed, "clip", i))?;
        let clip_id = format!("clip_{i:04}");
        for (t, f) in clip.frames.iter_mut().enumerate() {
            f.id = format!("{clip_id}_f{t:02}");
        }
        clip.id = clip_id;
        clips.push(clip);
    }
    Ok(Dataset {
        scenes,
        clips,
        concepts: cfg.concepts().concepts,
        config: cfg.clone(),
        seed,
    })
}

/// Nearest-neighbour resize of an `(H, W, 3)` image.
pub fn resize_nearest(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(Error::InvalidShape {
            op: "resize_nearest",
            msg: format!("expected (H, W, 3), got {:?}", img.shape()),
        });
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Tensor::zeros(&[out_h, out_w, 3]);
    for oy in 0..out_h {
        let sy = (oy * h) / out_h;
        for ox in 0..out_w {
            let sx = (ox * w) / out_w;
            for c in 0..3 {
                out.set(&[oy, ox, c], img.at(&[sy, sx, c]));
            }
        }
    }
    Ok(out)
}

/// Downsamples a binary image-resolution mask to feature resolution by
/// block-mean thresholding at 0.5.
pub fn rasterize_mask(mask: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidShape {
            op: "rasterize_mask",
            msg: format!("{h}x{w} not divisible by stride {stride}"),
        });
    }
    let (fh, fw) = (h / stride, w / stride);
    let mut out = Tensor::zeros(&[fh, fw]);
    for fy in 0..fh {
        for fx in 0..fw {
            let mut on = 0usize;
            for y in 0..stride {
                for x in 0..stride {
                    if mask.at(&[fy * stride + y, fx * stride + x]) > 0.5 {
                        on += 1;
                    }
                }
            }
            if 2 * on >= stride * stride {
                out.set(&[fy, fx], 1.0);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset directory format: manifest.json plus one tensor file per image and
// per instance mask.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    concept_id: usize,
    identity: u32,
    mask_file: String,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    image_file: String,
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
struct ClipRecord {
    id: String,
    frames: Vec<SceneRecord>,
    velocities: BTreeMap<u32, (f64, f64)>,
    concept_of: BTreeMap<u32, usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    config: GenConfig,
    seed: u64,
    concepts: Vec<ConceptInfo>,
    scenes: Vec<SceneRecord>,
    clips: Vec<ClipRecord>,
}

fn save_scene(scene: &SyntheticScene, root: &Path, rel_dir: &str) -> Result<SceneRecord> {
    let dir = root.join(rel_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let image_file = format!("{rel_dir}/image.tensor");
    save_tensor(&scene.image, &root.join(&image_file))?;
    let mut instances = Vec::new();
    for (k, inst) in scene.instances.iter().enumerate() {
        let mask_file = format!("{rel_dir}/mask_{k:02}.tensor");
        save_tensor(&inst.mask, &root.join(&mask_file))?;
        instances.push(InstanceRecord {
            concept_id: inst.concept_id,
            identity: inst.identity,
            mask_file,
        });
    }
    Ok(SceneRecord {
        id: scene.id.clone(),
        image_file,
        instances,
    })
}

fn load_scene(rec: &SceneRecord, root: &Path) -> Result<SyntheticScene> {
    let image = load_tensor(&root.join(&rec.image_file))?;
    let mut instances = Vec::new();
    for ir in &rec.instances {
        instances.push(SceneInstance {
            mask: load_tensor(&root.join(&ir.mask_file))?,
            concept_id: ir.concept_id,
            identity: ir.identity,
        });
    }
    Ok(SyntheticScene {
        id: rec.id.clone(),
        image,
        instances,
    })
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut scenes = Vec::new();
    for s in &ds.scenes {
        scenes.push(save_scene(s, dir, &format!("scenes/{}", s.id))?);
    }
    let mut clips = Vec::new();
    for c in &ds.clips {
        let mut frames = Vec::new();
        for (t, f) in c.frames.iter().enumerate() {
            frames.push(save_scene(f, dir, &format!("clips/{}/frame_{t:02}", c.id))?);
        }
        clips.push(ClipRecord {
            id: c.id.clone(),
            frames,
            velocities: c.velocities.clone(),
            concept_of: c.concept_of.clone(),
        });
    }
    let manifest = DatasetManifest {
        config: ds.config.clone(),
        seed: ds.seed,
        concepts: ds.concepts.clone(),
        scenes,
        clips,
    };
    let path = dir.join("manifest.json");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let file = std::fs::File::open(&path).map_err(|e| {
        Error::Precondition(format!("dataset manifest missing at {}: {e}", path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_reader(file)?;
    let mut scenes = Vec::new();
    for rec in &manifest.scenes {
        scenes.push(load_scene(rec, dir)?);
    }
    let mut clips = Vec::new();
    for cr in &manifest.clips {
        let mut frames = Vec::new();
        for fr in &cr.frames {
            frames.push(load_scene(fr, dir)?);
        }
        clips.push(Clip {
            id: cr.id.clone(),
            frames,
            velocities: cr.velocities.clone(),
            concept_of: cr.concept_of.clone(),
        });
    }
    Ok(Dataset {
        scenes,
        clips,
        concepts: manifest.concepts,
        config: manifest.config,
        seed: manifest.seed,
    })
}
