//! Model plumbing shared by every stage: the named parameter store, the
//! per-step graph wrapper that registers parameters as tape leaves, weight
//! init, the toy conv encoders, the prompt-conditioned mask decoder, the
//! detector-query decoder, the presence head, and the oracle teacher.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::VarId;
use crate::error::{Error, Result};
use crate::prompt::{Prompt, PromptKind, PromptSet};
use crate::rng::{fnv1a64, normal, substream};
use crate::{Tape, Tensor};

/// Latent partition for the memory compressor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    /// Total latent count.
    pub k: usize,
    /// Latents attending to the full token set; the rest split across
    /// `grid x grid` local windows.
    pub k_global: usize,
    pub grid: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        // 16 global + 112 local over a 4x4 window grid.
        LatentConfig {
            k: 128,
            k_global: 16,
            grid: 4,
        }
    }
}

impl LatentConfig {
    pub fn k_local(&self) -> usize {
        self.k - self.k_global
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_global < 1 || self.k <= self.k_global && self.k != self.k_global {
            return Err(Error::Config(format!(
                "latent split k={} k_global={} invalid",
                self.k, self.k_global
            )));
        }
        if self.k_global > self.k {
            return Err(Error::Config("k_global exceeds k".to_string()));
        }
        if self.grid == 0 {
            return Err(Error::Config("window grid must be >= 1".to_string()));
        }
        let windows = self.grid * self.grid;
        if self.k_local() > 0 && self.k_local() % windows != 0 {
            return Err(Error::Config(format!(
                "k_local {} not divisible by {} windows",
                self.k_local(),
                windows
            )));
        }
        Ok(())
    }
}

/// Architecture description; sizes come from the model-zoo entry plus the
/// scene geometry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub zoo_name: String,
    pub image_h: usize,
    pub image_w: usize,
    /// Student encoder widths for the four stride-2 stages.
    pub enc_widths: [usize; 4],
    /// Teacher encoder widths; output channel count is the aligned width.
    pub teacher_widths: [usize; 4],
    /// Aligned feature channels (teacher output and decoder width).
    pub feat_c: usize,
    /// Attention key/query width.
    pub dk: usize,
    /// MLP hidden width.
    pub hidden: usize,
    pub n_concepts: usize,
    pub n_queries: usize,
    pub latents: LatentConfig,
    pub bank_capacity: usize,
    /// Dropout used only inside the memory compressor.
    pub dropout_p: f64,
}

/// Spatial reduction of the conv encoders (four stride-2 stages).
pub const FEATURE_STRIDE: usize = 16;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            zoo_name: "ES-EV-S".to_string(),
            image_h: 128,
            image_w: 128,
            enc_widths: [4, 8, 16, 32],
            teacher_widths: [16, 32, 64, 64],
            feat_c: 64,
            dk: 32,
            hidden: 64,
            n_concepts: 12,
            n_queries: 6,
            latents: LatentConfig {
                k: 24,
                k_global: 8,
                grid: 2,
            },
            bank_capacity: 7,
            dropout_p: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn feat_h(&self) -> usize {
        self.image_h / FEATURE_STRIDE
    }

    pub fn feat_w(&self) -> usize {
        self.image_w / FEATURE_STRIDE
    }

    pub fn n_tokens(&self) -> usize {
        self.feat_h() * self.feat_w()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h % FEATURE_STRIDE != 0 || self.image_w % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a multiple of {FEATURE_STRIDE}",
                self.image_h, self.image_w
            )));
        }
        if self.teacher_widths[3] != self.feat_c {
            return Err(Error::Config(
                "teacher output width must equal feat_c".to_string(),
            ));
        }
        if self.n_concepts == 0 || self.n_queries == 0 || self.bank_capacity == 0 {
            return Err(Error::Config("zero-sized model dimension".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} invalid", self.dropout_p)));
        }
        self.latents.validate()?;
        let grid = self.latents.grid;
        if self.feat_h() % grid != 0 || self.feat_w() % grid != 0 {
            return Err(Error::Config(format!(
                "feature map {}x{} not divisible by window grid {grid}",
                self.feat_h(),
                self.feat_w()
            )));
        }
        Ok(())
    }
}

/// Named parameters, deterministically ordered.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Precondition(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.set_grad(None);
        }
    }

    /// Module tag of a parameter name (`enc.conv0.w` -> `enc`).
    pub fn module_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    /// Digest of all parameters under a module prefix; used by the
    /// freezing checks.
    pub fn group_hash(&self, prefix: &str) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in &self.map {
            if Self::module_of(name) == prefix {
                bytes.extend_from_slice(name.as_bytes());
                for &d in t.shape() {
                    bytes.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fnv1a64(&bytes)
    }

    pub fn modules(&self) -> BTreeSet<String> {
        self.map
            .keys()
            .map(|n| Self::module_of(n).to_string())
            .collect()
    }
}

/// Per-step graph: a tape plus lazy parameter registration, so a parameter
/// used several times in one step shares a single leaf and its gradients
/// accumulate.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: &'a BTreeSet<String>,
    vars: HashMap<String, VarId>,
    pub train_mode: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a BTreeSet<String>, train_mode: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            trainable,
            vars: HashMap::new(),
            train_mode,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<VarId> {
        if let Some(&id) = self.vars.get(name) {
            return Ok(id);
        }
        let tensor = self.store.get(name)?;
        let trainable = self.trainable.contains(ParamStore::module_of(name));
        let id = self.tape.leaf(tensor.clone().with_requires_grad(trainable));
        self.vars.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.tape.constant(t)
    }

    /// Extracts the accumulated parameter gradients, consuming the graph so
    /// the store borrow ends.
    pub fn into_grads(self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .filter_map(|(name, &id)| self.tape.grad(id).map(|g| (name.clone(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Accumulates extracted gradients into the store.
pub fn apply_grads(store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
    for (name, g) in grads {
        store.get_mut(name)?.accumulate_grad(g.data());
    }
    Ok(())
}

fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn init_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize) {
    let std = he_std(c_in * k * k);
    store.insert(&format!("{name}.w"), init_normal(rng, &[c_out, c_in, k, k], std));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]));
}

fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) {
    let std = he_std(c_in);
    store.insert(&format!("{name}.w"), init_normal(rng, &[c_in, c_out], std));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]));
}

fn init_attn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize, dk: usize, with_out: bool) {
    let std = he_std(c);
    store.insert(&format!("{prefix}.wq"), init_normal(rng, &[c, dk], std));
    store.insert(&format!("{prefix}.wk"), init_normal(rng, &[c, dk], std));
    store.insert(&format!("{prefix}.wv"), init_normal(rng, &[c, c], std));
    if with_out {
        store.insert(&format!("{prefix}.wo"), init_normal(rng, &[c, c], std));
    }
}

fn init_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize, hidden: usize) {
    init_linear(store, rng, &format!("{prefix}.fc1"), c, hidden);
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, c);
}

/// Builds every student parameter group from one init substream.
pub fn init_student(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = substream(seed, "init");
    let rng = &mut rng;
    let mut store = ParamStore::new();
    let c = cfg.feat_c;

    let mut c_in = 3;
    for (i, &w) in cfg.enc_widths.iter().enumerate() {
        init_conv(&mut store, rng, &format!("enc.conv{i}"), w, c_in, 3);
        c_in = w;
    }
    init_conv(&mut store, rng, "proj.fc", c, cfg.enc_widths[3], 1);

    store.insert("concept.table", init_normal(rng, &[cfg.n_concepts, c], 0.02));

    // Prompt-conditioned mask decoder.
    store.insert("dec.type_emb", init_normal(rng, &[4, c], 0.02));
    init_linear(&mut store, rng, "dec.coord", c, c);
    store.insert("dec.mask_tok", init_normal(rng, &[1, c], 0.02));
    store.insert("dec.score_tok", init_normal(rng, &[1, c], 0.02));
    store.insert("dec.pos_emb", init_normal(rng, &[cfg.n_tokens(), c], 0.02));
    init_attn(&mut store, rng, "dec.t2f", c, cfg.dk, true);
    init_mlp(&mut store, rng, "dec.tmlp", c, cfg.hidden);
    init_attn(&mut store, rng, "dec.f2t", c, cfg.dk, true);
    init_mlp(&mut store, rng, "dec.fmlp", c, cfg.hidden);
    init_linear(&mut store, rng, "dec.pix", c, c);
    init_linear(&mut store, rng, "dec.tok", c, c);
    init_linear(&mut store, rng, "dec.score", c, 1);
    store.insert("dec.queries", init_normal(rng, &[cfg.n_queries, c], 0.02));
    init_linear(&mut store, rng, "dec.cproj", c, c);

    // Presence head.
    init_attn(&mut store, rng, "presence.pool", c, cfg.dk, false);
    init_linear(&mut store, rng, "presence.fc1", 2 * c, cfg.hidden);
    init_linear(&mut store, rng, "presence.fc2", cfg.hidden, 1);

    // Memory encoder.
    init_conv(&mut store, rng, "memenc.conv0", c, c + 1, 3);
    init_conv(&mut store, rng, "memenc.conv1", c, c, 3);

    // Latent compressor.
    store.insert(
        "perceiver.latents",
        init_normal(rng, &[cfg.latents.k, c], 1.0 / (c as f64).sqrt()),
    );
    init_attn(&mut store, rng, "perceiver", c, cfg.dk, false);

    // Tracking head.
    init_attn(&mut store, rng, "track.read", c, cfg.dk, false);
    store.insert("track.pos_emb", init_normal(rng, &[cfg.n_tokens(), c], 0.02));
    init_mlp(&mut store, rng, "track.fmlp", c, cfg.hidden);
    init_linear(&mut store, rng, "track.pix", c, c);
    init_linear(&mut store, rng, "track.tok", c, c);
    init_linear(&mut store, rng, "track.score1", 2 * c, cfg.hidden);
    init_linear(&mut store, rng, "track.score2", cfg.hidden, 1);
    store.insert("track.no_mem", init_normal(rng, &[1, c], 0.02));

    Ok(store)
}

/// `x (n,c_in) @ w + b`.
pub fn linear(g: &mut Graph, x: VarId, prefix: &str) -> Result<VarId> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add_bias(y, b)
}

pub fn mlp(g: &mut Graph, x: VarId, prefix: &str) -> Result<VarId> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.tape.relu(h)?;
    let out = linear(g, h, &format!("{prefix}.fc2"))?;
    g.tape.add(x, out)
}

/// Single-head cross attention `queries -> keys/values`, residual added by
/// the caller when wanted.
pub fn cross_attention(
    g: &mut Graph,
    queries: VarId,
    kv: VarId,
    prefix: &str,
    dk: usize,
    with_out: bool,
) -> Result<VarId> {
    let wq = g.param(&format!("{prefix}.wq"))?;
    let wk = g.param(&format!("{prefix}.wk"))?;
    let wv = g.param(&format!("{prefix}.wv"))?;
    let q = g.tape.matmul(queries, wq)?;
    let k = g.tape.matmul(kv, wk)?;
    let v = g.tape.matmul(kv, wv)?;
    let kt = g.tape.transpose(k)?;
    let scores = g.tape.matmul(q, kt)?;
    let scores = g.tape.mul_scalar(scores, 1.0 / (dk as f64).sqrt())?;
    let attn = g.tape.row_softmax(scores)?;
    let out = g.tape.matmul(attn, v)?;
    if with_out {
        let wo = g.param(&format!("{prefix}.wo"))?;
        g.tape.matmul(out, wo)
    } else {
        Ok(out)
    }
}

fn conv_block(g: &mut Graph, x: VarId, name: &str, stride: usize) -> Result<VarId> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.tape.conv2d(x, w, Some(b), stride, 1)?;
    g.tape.relu(y)
}

/// Four stride-2 conv stages over a `(3,H,W)` input.
pub fn conv_encoder(g: &mut Graph, image_chw: VarId, prefix: &str) -> Result<VarId> {
    let mut x = image_chw;
    for i in 0..4 {
        x = conv_block(g, x, &format!("{prefix}.conv{i}"), 2)?;
    }
    Ok(x)
}

/// Student features aligned to the teacher width: encoder + 1x1 projection,
/// returned as `(feat_c, hf, wf)`.
pub fn student_features(g: &mut Graph, image_hwc: &Tensor) -> Result<VarId> {
    let img = g.constant(image_hwc.clone());
    let chw = g.tape.permute(img, &[2, 0, 1])?;
    let enc = conv_encoder(g, chw, "enc")?;
    let w = g.param("proj.fc.w")?;
    let b = g.param("proj.fc.b")?;
    g.tape.conv2d(enc, w, Some(b), 1, 0)
}

/// `(C,hf,wf)` feature map to `(hf*wf, C)` token matrix.
pub fn feature_tokens(g: &mut Graph, feat_chw: VarId) -> Result<VarId> {
    let shape = g.tape.value(feat_chw).shape().to_vec();
    let (c, hf, wf) = (shape[0], shape[1], shape[2]);
    let flat = g.tape.reshape(feat_chw, &[c, hf * wf])?;
    g.tape.transpose(flat)
}

/// Fixed sinusoidal embedding of a normalized position, shared by feature
/// cells and prompt coordinates so attention can align them geometrically.
pub fn fourier_features(x_norm: f64, y_norm: f64, c: usize) -> Vec<f64> {
    let n_freq = (c / 4).max(1);
    let mut out = Vec::with_capacity(4 * n_freq);
    for k in 0..n_freq {
        let f = (k + 1) as f64 * std::f64::consts::PI;
        out.push((f * x_norm).sin());
        out.push((f * x_norm).cos());
        out.push((f * y_norm).sin());
        out.push((f * y_norm).cos());
    }
    out.resize(c, 0.0);
    out
}

/// Fixed positional features for every feature cell, `(n_tokens, C)`.
pub fn cell_position_features(cfg: &ModelConfig) -> Tensor {
    let (hf, wf) = (cfg.feat_h(), cfg.feat_w());
    let mut data = Vec::with_capacity(hf * wf * cfg.feat_c);
    for y in 0..hf {
        for x in 0..wf {
            let xn = (x as f64 + 0.5) / wf as f64;
            let yn = (y as f64 + 0.5) / hf as f64;
            data.extend(fourier_features(xn, yn, cfg.feat_c));
        }
    }
    Tensor::from_vec(vec![hf * wf, cfg.feat_c], data).expect("pe shape")
}

fn coord_token(g: &mut Graph, cfg: &ModelConfig, type_idx: usize, x: f64, y: f64) -> Result<VarId> {
    let xn = x / cfg.image_w as f64;
    let yn = y / cfg.image_h as f64;
    let pe = g.constant(Tensor::from_vec(
        vec![1, cfg.feat_c],
        fourier_features(xn, yn, cfg.feat_c),
    )?);
    let proj = linear(g, pe, "dec.coord")?;
    let table = g.param("dec.type_emb")?;
    let type_row = g.tape.slice(table, &[type_idx..type_idx + 1, 0..cfg.feat_c])?;
    g.tape.add(proj, type_row)
}

/// Prompt tokens: points become one token, boxes two corner tokens, each a
/// positional embedding plus a learned type embedding.
fn prompt_tokens(g: &mut Graph, cfg: &ModelConfig, prompt: &Prompt) -> Result<Vec<VarId>> {
    match prompt.kind {
        PromptKind::PositivePoint => {
            let (x, y) = prompt.point();
            Ok(vec![coord_token(g, cfg, 0, x, y)?])
        }
        PromptKind::NegativePoint => {
            let (x, y) = prompt.point();
            Ok(vec![coord_token(g, cfg, 1, x, y)?])
        }
        PromptKind::Box => {
            let [x1, y1, x2, y2] = prompt.box_coords();
            Ok(vec![
                coord_token(g, cfg, 2, x1, y1)?,
                coord_token(g, cfg, 3, x2, y2)?,
            ])
        }
    }
}

/// Row of the concept embedding table.
pub fn concept_embedding(g: &mut Graph, cfg: &ModelConfig, concept_id: usize) -> Result<VarId> {
    if concept_id >= cfg.n_concepts {
        return Err(Error::Config(format!(
            "concept id {concept_id} out of range {}",
            cfg.n_concepts
        )));
    }
    let table = g.param("concept.table")?;
    g.tape
        .slice(table, &[concept_id..concept_id + 1, 0..cfg.feat_c])
}

/// Two-way decoder core: tokens attend features, then features attend
/// tokens. Returns the refined `(tokens, features)` pair.
fn decoder_blocks(g: &mut Graph, cfg: &ModelConfig, tokens: VarId, feats: VarId) -> Result<(VarId, VarId)> {
    let a = cross_attention(g, tokens, feats, "dec.t2f", cfg.dk, true)?;
    let tokens = g.tape.add(tokens, a)?;
    let tokens = mlp(g, tokens, "dec.tmlp")?;
    let b = cross_attention(g, feats, tokens, "dec.f2t", cfg.dk, true)?;
    let feats = g.tape.add(feats, b)?;
    let feats = mlp(g, feats, "dec.fmlp")?;
    Ok((tokens, feats))
}

fn positioned_tokens(g: &mut Graph, cfg: &ModelConfig, feats_tokens: VarId) -> Result<VarId> {
    let fixed = g.constant(cell_position_features(cfg));
    let with_fixed = g.tape.add(feats_tokens, fixed)?;
    let pos = g.param("dec.pos_emb")?;
    g.tape.add(with_fixed, pos)
}

/// Per-pixel mask logits from refined features and one query row.
pub(crate) fn mask_from_token(
    g: &mut Graph,
    cfg: &ModelConfig,
    feats: VarId,
    token_row: VarId,
    pix_prefix: &str,
    tok_prefix: &str,
) -> Result<VarId> {
    let m = linear(g, feats, pix_prefix)?;
    let q = linear(g, token_row, tok_prefix)?;
    let qt = g.tape.transpose(q)?;
    let logits = g.tape.matmul(m, qt)?;
    g.tape.reshape(logits, &[cfg.feat_h(), cfg.feat_w()])
}

/// Prompt-conditioned decode: geometric prompts plus the concept embedding
/// produce mask logits at feature resolution and a score logit.
pub fn decode_prompted(
    g: &mut Graph,
    cfg: &ModelConfig,
    feat_chw: VarId,
    prompts: &PromptSet,
) -> Result<(VarId, VarId)> {
    if prompts.prompts.is_empty() {
        return Err(Error::Precondition("empty prompt set".to_string()));
    }
    let mask_tok = g.param("dec.mask_tok")?;
    let score_tok = g.param("dec.score_tok")?;
    let concept = concept_embedding(g, cfg, prompts.concept_id)?;
    let mut rows = vec![mask_tok, score_tok, concept];
    for p in &prompts.prompts {
        rows.extend(prompt_tokens(g, cfg, p)?);
    }
    let tokens = g.tape.concat(&rows, 0)?;
    let feats = feature_tokens(g, feat_chw)?;
    let feats = positioned_tokens(g, cfg, feats)?;
    let (tokens, feats) = decoder_blocks(g, cfg, tokens, feats)?;
    let mask_row = g.tape.slice(tokens, &[0..1, 0..cfg.feat_c])?;
    let score_row = g.tape.slice(tokens, &[1..2, 0..cfg.feat_c])?;
    let mask = mask_from_token(g, cfg, feats, mask_row, "dec.pix", "dec.tok")?;
    let score = linear(g, score_row, "dec.score")?;
    let score = g.tape.reshape(score, &[1])?;
    Ok((mask, score))
}

/// Detector decode: learned object queries conditioned on a concept
/// embedding; one `(mask logits, localization logit)` pair per query.
pub fn decode_queries(
    g: &mut Graph,
    cfg: &ModelConfig,
    feat_chw: VarId,
    concept_row: VarId,
) -> Result<Vec<(VarId, VarId)>> {
    let cvec = linear(g, concept_row, "dec.cproj")?;
    let cvec = g.tape.reshape(cvec, &[cfg.feat_c])?;
    let queries = g.param("dec.queries")?;
    let tokens = g.tape.add_bias(queries, cvec)?;
    let feats = feature_tokens(g, feat_chw)?;
    let feats = positioned_tokens(g, cfg, feats)?;
    let (tokens, feats) = decoder_blocks(g, cfg, tokens, feats)?;
    let mut out = Vec::with_capacity(cfg.n_queries);
    for qi in 0..cfg.n_queries {
        let row = g.tape.slice(tokens, &[qi..qi + 1, 0..cfg.feat_c])?;
        let mask = mask_from_token(g, cfg, feats, row, "dec.pix", "dec.tok")?;
        let loc = linear(g, row, "dec.score")?;
        let loc = g.tape.reshape(loc, &[1])?;
        out.push((mask, loc));
    }
    Ok(out)
}

/// Global presence logit for a concept: concept-queried attention pooling
/// over the feature tokens, then a small MLP.
pub fn presence_logit(
    g: &mut Graph,
    cfg: &ModelConfig,
    feat_chw: VarId,
    concept_row: VarId,
) -> Result<VarId> {
    let feats = feature_tokens(g, feat_chw)?;
    let wq = g.param("presence.pool.wq")?;
    let wk = g.param("presence.pool.wk")?;
    let q = g.tape.matmul(concept_row, wq)?;
    let k = g.tape.matmul(feats, wk)?;
    let kt = g.tape.transpose(k)?;
    let scores = g.tape.matmul(q, kt)?;
    let scores = g.tape.mul_scalar(scores, 1.0 / (cfg.dk as f64).sqrt())?;
    let attn = g.tape.row_softmax(scores)?;
    let pooled = g.tape.matmul(attn, feats)?;
    let h = g.tape.concat(&[pooled, concept_row], 1)?;
    let h = linear(g, h, "presence.fc1")?;
    let h = g.tape.relu(h)?;
    let logit = linear(g, h, "presence.fc2")?;
    g.tape.reshape(logit, &[1])
}

/// Pooled exemplar embedding: crop features mean-pooled to one `(1,C)` row;
/// averaged with the concept-table row by the caller.
pub fn exemplar_embedding(g: &mut Graph, crop_hwc: &Tensor) -> Result<VarId> {
    let feat = student_features(g, crop_hwc)?;
    let tokens = feature_tokens(g, feat)?;
    let n = g.tape.value(tokens).shape()[0];
    let ones = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    g.tape.matmul(ones, tokens)
}

/// Student model: architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct Student {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Student {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_student(&cfg, seed)?;
        Ok(Student { cfg, params })
    }
}

/// Per-step loss summary logged by every stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepBreakdown {
    pub total: f64,
    pub task: f64,
    pub feat: f64,
    pub mask: f64,
    pub score: f64,
}

/// How the stage-2/3 teacher behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Frozen seeded random encoder; masks and presence come from the
    /// synthetic ground truth.
    Oracle,
    /// Teacher masks decoded by a previously trained checkpoint.
    Trained,
}

/// Deterministic stand-in for the big teacher: a frozen seeded conv stack
/// for features plus exact mask/presence targets.
pub struct TeacherOracle {
    params: ParamStore,
    cfg: ModelConfig,
    pub mode: TeacherMode,
    /// Checkpoint-backed student weights for `TeacherMode::Trained`.
    trained: Option<ParamStore>,
}

impl TeacherOracle {
    pub fn new(cfg: &ModelConfig, teacher_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(teacher_seed, "teacher");
        let rng = &mut rng;
        let mut params = ParamStore::new();
        let mut c_in = 3;
        for (i, &w) in cfg.teacher_widths.iter().enumerate() {
            init_conv(&mut params, rng, &format!("teacher.conv{i}"), w, c_in, 3);
            c_in = w;
        }
        Ok(TeacherOracle {
            params,
            cfg: cfg.clone(),
            mode: TeacherMode::Oracle,
            trained: None,
        })
    }

    pub fn with_trained(mut self, student_params: ParamStore) -> Self {
        self.mode = TeacherMode::Trained;
        self.trained = Some(student_params);
        self
    }

    pub fn trained_params(&self) -> Option<&ParamStore> {
        self.trained.as_ref()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params_hash(&self) -> u64 {
        self.params.group_hash("teacher")
    }

    /// Teacher encoder features `(feat_c, hf, wf)`; pure value computation,
    /// no gradients can flow here. In trained mode the checkpoint's own
    /// encoder + projection produce the features.
    pub fn features(&self, image_hwc: &Tensor) -> Result<Tensor> {
        let frozen = BTreeSet::new();
        match (&self.mode, &self.trained) {
            (TeacherMode::Trained, Some(params)) => {
                let mut g = Graph::new(params, &frozen, false);
                let out = student_features(&mut g, image_hwc)?;
                Ok(g.tape.value(out).clone())
            }
            _ => {
                let mut g = Graph::new(&self.params, &frozen, false);
                let img = g.constant(image_hwc.clone());
                let chw = g.tape.permute(img, &[2, 0, 1])?;
                let out = conv_encoder(&mut g, chw, "teacher")?;
                Ok(g.tape.value(out).clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_default_is_128_split_16_112() {
        let l = LatentConfig::default();
        assert_eq!(l.k, 128);
        assert_eq!(l.k_global, 16);
        assert_eq!(l.k_local(), 112);
        assert!(l.validate().is_ok());
        // 112 local over a 4x4 grid -> 7 per window.
        assert_eq!(l.k_local() % (l.grid * l.grid), 0);
    }

    #[test]
    fn default_config_validates() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feat_h(), 8);
        assert_eq!(cfg.n_tokens(), 64);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        let a = init_student(&cfg, 42).unwrap();
        let b = init_student(&cfg, 42).unwrap();
        let c = init_student(&cfg, 43).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "{name}");
        }
        assert_ne!(
            a.get("enc.conv0.w").unwrap().data(),
            c.get("enc.conv0.w").unwrap().data()
        );
    }

    #[test]
    fn teacher_features_are_deterministic_and_frozen() {
        let cfg = ModelConfig::default();
        let teacher = TeacherOracle::new(&cfg, 42).unwrap();
        let img = Tensor::full(&[128, 128, 3], 0.25);
        let h_before = teacher.params_hash();
        let a = teacher.features(&img).unwrap();
        let b = teacher.features(&img).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[64, 8, 8]);
        assert_eq!(teacher.params_hash(), h_before);
    }

    #[test]
    fn graph_shares_a_leaf_per_parameter() {
        let cfg = ModelConfig::default();
        let store = init_student(&cfg, 1).unwrap();
        let trainable: BTreeSet<String> = ["dec".to_string()].into();
        let mut g = Graph::new(&store, &trainable, true);
        let a = g.param("dec.mask_tok").unwrap();
        let b = g.param("dec.mask_tok").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grads_flow_only_into_trainable_modules() {
        let cfg = ModelConfig::default();
        let mut store = init_student(&cfg, 1).unwrap();
        let trainable: BTreeSet<String> = ["dec".to_string()].into();
        let mut g = Graph::new(&store, &trainable, true);
        let mask_tok = g.param("dec.mask_tok").unwrap();
        let latents = g.param("perceiver.latents").unwrap();
        let lat_row = g.tape.slice(latents, &[0..1, 0..cfg.feat_c]).unwrap();
        let s = g.tape.add(mask_tok, lat_row).unwrap();
        let sq = g.tape.mul(s, s).unwrap();
        let loss = g.tape.sum(sq).unwrap();
        g.tape.backward(loss).unwrap();
        let grads = g.into_grads();
        apply_grads(&mut store, &grads).unwrap();
        assert!(store.get("dec.mask_tok").unwrap().grad().is_some());
        assert!(store.get("perceiver.latents").unwrap().grad().is_none());
    }
}
