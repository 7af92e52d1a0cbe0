//! Objective, optimizer and the staged training loop.
//!
//! Every loss component is a sum over its valid positions divided by
//! `max(1, N / R)`, where `N` is the global count of that component over all
//! `R` simulated ranks. Averaging the per-rank losses then gives the global
//! per-token mean regardless of how the batch was split.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, SegLossParams, Var};
use crate::geometry::{quantize_coord, quantize_size, BinaryMask, Center, QuantConfig, RgbImage, Size2D};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Model, ModelConfig, ModelError, Sample};
use crate::seqformat::{apply_loss_mask, pack, serialize_sample, BlockPositions, MaskMode, QueryInput, SerializeOptions, TokenSequence, Vocab};
use crate::synthdata::Example;
use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("sequence: {0}")]
    Seq(String),
    #[error("instance {0} has no mask")]
    MissingMask(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset for stage {0}")]
    EmptyDataset(u8),
    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {}", .checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    Diverged { step: usize, loss: f64, checkpoint: Option<PathBuf> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log: {0}")]
    Log(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_dice: f64,
    pub beta_focal: f64,
    pub lambda_gram: f64,
    pub focal_gamma: f64,
    /// Positive-class weight of the focal term; negatives get `1 - focal_alpha`.
    pub focal_alpha: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_dice: 10.0, beta_focal: 200.0, lambda_gram: 0.1, focal_gamma: 2.0, focal_alpha: 0.25, dice_smooth: 1.0 }
    }
}

impl LossWeights {
    pub fn seg_params(&self) -> SegLossParams {
        SegLossParams { alpha_dice: self.alpha_dice, beta_focal: self.beta_focal, gamma: self.focal_gamma, focal_alpha: self.focal_alpha, smooth: self.dice_smooth }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_dice, self.beta_focal, self.lambda_gram, self.focal_gamma, self.focal_alpha, self.dice_smooth];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) || self.focal_alpha > 1.0 {
            return Err(TrainError::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Normalized loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub lm: f64,
    pub coord: f64,
    pub size: f64,
    pub seg: f64,
    pub gram: f64,
}

impl LossParts {
    fn add_scaled(&mut self, o: &LossParts, s: f64) {
        self.lm += s * o.lm;
        self.coord += s * o.coord;
        self.size += s * o.size;
        self.seg += s * o.seg;
        self.gram += s * o.gram;
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.lm + parts.coord + parts.size + parts.seg + w.lambda_gram * parts.gram
}

/// Valid-position counts of one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub text: usize,
    pub coord: usize,
    pub size: usize,
    pub seg: usize,
    pub gram: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.text += o.text;
        self.coord += o.coord;
        self.size += o.size;
        self.seg += o.seg;
        self.gram += o.gram;
    }
}

/// One simulated data-parallel rank: its counts and normalized losses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RankSlice {
    pub rank: usize,
    pub counts: Counts,
    pub losses: LossParts,
}

/// `max(1, global / R)`.
pub fn normalizer(global: usize, ranks: usize) -> f64 {
    (global as f64 / ranks.max(1) as f64).max(1.0)
}

#[derive(Debug, Clone, Copy)]
struct Norms {
    text: f64,
    coord: f64,
    size: f64,
    seg: f64,
    gram: f64,
}

impl Norms {
    fn new(global: &Counts, ranks: usize) -> Self {
        Self {
            text: normalizer(global.text, ranks),
            coord: normalizer(global.coord, ranks),
            size: normalizer(global.size, ranks),
            seg: normalizer(global.seg, ranks),
            gram: normalizer(global.gram, ranks),
        }
    }
}

/// Globally normalized token CE; one `(logits, labels)` pair per rank.
pub fn lm_loss(ranks: &[(&Tensor<f64>, &[Option<u32>])]) -> f64 {
    let r = ranks.len().max(1);
    let global: usize = ranks.iter().map(|(_, l)| l.iter().flatten().count()).sum();
    let norm = normalizer(global, r);
    ranks
        .iter()
        .map(|(logits, labels)| {
            let mut g = Graph::new();
            let x = g.constant((*logits).clone());
            let ce = g.cross_entropy(x, Arc::new(labels.to_vec()), norm);
            g.value(ce).item() / r as f64
        })
        .sum()
}

fn bin_loss(ranks: &[(&Tensor<f64>, Vec<[u32; 2]>)]) -> f64 {
    let r = ranks.len().max(1);
    let global: usize = ranks.iter().map(|(_, t)| t.len()).sum();
    let norm = normalizer(global, r);
    ranks
        .iter()
        .map(|(logits, t)| {
            if t.is_empty() {
                return 0.0;
            }
            let flat: Vec<Option<u32>> = t.iter().flat_map(|b| [Some(b[0]), Some(b[1])]).collect();
            let mut g = Graph::new();
            let x = g.constant((*logits).clone());
            let ce = g.cross_entropy(x, Arc::new(flat), norm);
            g.value(ce).item() / r as f64
        })
        .sum()
}

/// Per-axis CE over coordinate bins; logits are `2n x B`, x row then y row.
pub fn coord_loss(ranks: &[(&Tensor<f64>, &[Center])], q: QuantConfig) -> Result<f64> {
    let mut prepared = Vec::with_capacity(ranks.len());
    for (l, cs) in ranks {
        let t = cs.iter().map(|c| quantize_coord(*c, q)).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| TrainError::Seq(e.to_string()))?;
        prepared.push((*l, t));
    }
    Ok(bin_loss(&prepared))
}

pub fn size_loss(ranks: &[(&Tensor<f64>, &[Size2D])], q: QuantConfig) -> Result<f64> {
    let mut prepared = Vec::with_capacity(ranks.len());
    for (l, ss) in ranks {
        let t = ss.iter().map(|s| quantize_size(*s, q)).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| TrainError::Seq(e.to_string()))?;
        prepared.push((*l, t));
    }
    Ok(bin_loss(&prepared))
}

fn mask_bytes<'a>(masks: impl Iterator<Item = &'a BinaryMask>) -> Vec<u8> {
    masks.flat_map(|m| m.bits().iter().map(|&b| b as u8)).collect()
}

/// `beta * mean focal + alpha * dice` per instance; logits are `n x HW`.
pub fn seg_loss(ranks: &[(&Tensor<f64>, &[&BinaryMask])], w: &LossWeights) -> f64 {
    let r = ranks.len().max(1);
    let global: usize = ranks.iter().map(|(_, m)| m.len()).sum();
    let norm = normalizer(global, r);
    ranks
        .iter()
        .map(|(logits, masks)| {
            if masks.is_empty() {
                return 0.0;
            }
            let mut g = Graph::new();
            let x = g.constant((*logits).clone());
            let l = g.seg_loss(x, Arc::new(mask_bytes(masks.iter().copied())), w.seg_params(), norm);
            g.value(l).item() / r as f64
        })
        .sum()
}

/// `||(Fs Fs^T - Ft Ft^T) * (M M^T)||_F^2 / max(1, sum M M^T)` with rows
/// normalized first.
pub fn gram_loss(fs: &Tensor<f64>, ft: &Tensor<f64>, valid: &[bool]) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(fs.clone());
    let a = g.row_normalize(a);
    let b = g.constant(ft.clone());
    let b = g.row_normalize(b);
    let target = matmul(g.value(b), false, g.value(b), true);
    let m: Vec<f64> = valid.iter().map(|&v| v as u8 as f64).collect();
    let k: f64 = m.iter().sum();
    let l = g.gram_loss(a, Arc::new(target), Arc::new(m), (k * k).max(1.0));
    g.value(l).item()
}

/// Learning rate for width `d_target` given one tuned at `d_ref`.
pub fn mup_lr_transfer(lr_ref: f64, d_ref: usize, d_target: usize) -> f64 {
    lr_ref * (d_target as f64 / d_ref as f64).sqrt()
}

/// One image with its serialized sequence and optional Gram teacher rows.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub image: &'a RgbImage,
    pub seq: TokenSequence,
    /// Row-normalized teacher patch features, one row per image token.
    pub teacher: Option<Arc<Tensor<f32>>>,
}

/// Multipliers of each component inside the differentiated objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    pub lm: f64,
    pub coord: f64,
    pub size: f64,
    pub seg: f64,
    pub gram: f64,
}

impl Terms {
    pub fn total(w: &LossWeights) -> Self {
        Self { lm: 1.0, coord: 1.0, size: 1.0, seg: 1.0, gram: w.lambda_gram }
    }

    pub fn only(component: usize) -> Self {
        let mut t = [0.0; 5];
        t[component] = 1.0;
        Self { lm: t[0], coord: t[1], size: t[2], seg: t[3], gram: t[4] }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub terms: Terms,
    pub mode: MaskMode,
    pub upsample_factor: usize,
    pub with_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Objective<S: Scalar> {
    pub loss: f64,
    pub parts: LossParts,
    /// Focal and dice shares of `parts.seg`.
    pub seg_split: [f64; 2],
    pub ranks: Vec<RankSlice>,
    pub grads: Vec<Tensor<S>>,
}

fn item_counts(it: &TrainItem<'_>) -> Counts {
    use crate::seqformat::Role;
    let s = &it.seq;
    Counts {
        text: s.labels.iter().flatten().count(),
        coord: s.roles.iter().filter(|r| **r == Role::Coord).count(),
        size: s.roles.iter().filter(|r| **r == Role::Size).count(),
        seg: s.roles.iter().filter(|r| **r == Role::Seg).count(),
        gram: it.teacher.is_some() as usize,
    }
}

/// Loss and gradients of a batch split into ranks. The loss is the mean of
/// the rank losses and the gradient the mean of rank gradients.
pub fn objective<S: Scalar>(model: &Model<S>, ranks: &[Vec<TrainItem<'_>>], cfg: &ObjectiveConfig) -> Result<Objective<S>> {
    let r = ranks.len().max(1);
    let mut global = Counts::default();
    let mut rank_counts = Vec::with_capacity(ranks.len());
    for items in ranks {
        let mut c = Counts::default();
        for it in items {
            c.add(&item_counts(it));
        }
        global.add(&c);
        rank_counts.push(c);
    }
    let norms = Norms::new(&global, r);
    let mut grads: Vec<Tensor<S>> = if cfg.with_grad { model.params.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect() } else { Vec::new() };
    let mut parts = LossParts::default();
    let mut seg_split = [0.0; 2];
    let mut slices = Vec::with_capacity(ranks.len());
    for (ri, items) in ranks.iter().enumerate() {
        let mut rank_parts = LossParts::default();
        let lengths: Vec<usize> = items.iter().map(|it| it.seq.len()).collect();
        let packs = if items.is_empty() { Vec::new() } else { pack(&lengths, model.cfg.max_len).map_err(|e| TrainError::Seq(e.to_string()))? };
        for pb in packs {
            let members: Vec<&TrainItem<'_>> = pb.members.iter().map(|&i| &items[i]).collect();
            let (p, split) = pack_objective(model, &members, cfg, &norms, r, &mut grads)?;
            rank_parts.add_scaled(&p, 1.0);
            seg_split[0] += split[0] / r as f64;
            seg_split[1] += split[1] / r as f64;
        }
        parts.add_scaled(&rank_parts, 1.0 / r as f64);
        slices.push(RankSlice { rank: ri, counts: rank_counts[ri], losses: rank_parts });
    }
    let t = cfg.terms;
    let loss = t.lm * parts.lm + t.coord * parts.coord + t.size * parts.size + t.seg * parts.seg + t.gram * parts.gram;
    Ok(Objective { loss, parts, seg_split, ranks: slices, grads })
}

fn pack_objective<S: Scalar>(
    model: &Model<S>,
    items: &[&TrainItem<'_>],
    cfg: &ObjectiveConfig,
    norms: &Norms,
    ranks: usize,
    grads: &mut [Tensor<S>],
) -> Result<(LossParts, [f64; 2])> {
    let samples: Vec<Sample<'_>> = items.iter().map(|it| Sample { image: it.image, seq: &it.seq }).collect();
    let prep = model.prepare(&samples, cfg.mode)?;
    let mut g = Graph::new();
    let pv = if cfg.with_grad { model.bind(&mut g) } else { model.bind_frozen(&mut g) };
    let heads = model.forward_graph(&mut g, &pv, &prep)?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut parts = LossParts::default();
    let mut split = [0.0; 2];
    let inv_r = 1.0 / ranks as f64;
    let t = cfg.terms;
    if !prep.lm_rows.is_empty() {
        let l = g.cross_entropy(heads.lm, Arc::new(prep.lm_targets.clone()), norms.text);
        parts.lm = g.value(l).item().as_f64();
        terms.push((l, t.lm * inv_r));
    }
    if !prep.coord_rows.is_empty() {
        let flat: Vec<Option<u32>> = prep.coord_targets.iter().flat_map(|b| [Some(b[0]), Some(b[1])]).collect();
        let l = g.cross_entropy(heads.coord, Arc::new(flat), norms.coord);
        parts.coord = g.value(l).item().as_f64();
        terms.push((l, t.coord * inv_r));
    }
    if !prep.size_rows.is_empty() {
        let flat: Vec<Option<u32>> = prep.size_targets.iter().flat_map(|b| [Some(b[0]), Some(b[1])]).collect();
        let l = g.cross_entropy(heads.size, Arc::new(flat), norms.size);
        parts.size = g.value(l).item().as_f64();
        terms.push((l, t.size * inv_r));
    }
    let images: Vec<&RgbImage> = items.iter().map(|it| it.image).collect();
    if let Some(logits) = model.mask_logits_graph(&mut g, &pv, &prep, &heads, &images, cfg.upsample_factor)? {
        let mut bytes = Vec::with_capacity(g.value(logits).len());
        for &(s, k) in &prep.seg_instances {
            let m = items[s].seq.instances[k].mask.as_deref().ok_or(TrainError::MissingMask(k))?;
            bytes.extend(m.bits().iter().map(|&b| b as u8));
        }
        let l = g.seg_loss(logits, Arc::new(bytes), cfg.weights.seg_params(), norms.seg);
        parts.seg = g.value(l).item().as_f64();
        let (sp, aux) = (cfg.weights.seg_params(), g.aux(l));
        split = [sp.beta_focal * aux[0] / norms.seg, sp.alpha_dice * aux[1] / norms.seg];
        terms.push((l, t.seg * inv_r));
    }
    let mut offset = 0;
    let mut gram_terms = Vec::new();
    for (s, it) in items.iter().enumerate() {
        let n = prep.image_counts[s];
        if let Some(teacher) = &it.teacher {
            if teacher.rows != n {
                return Err(TrainError::Config(format!("teacher has {} rows for {} image tokens", teacher.rows, n)));
            }
            let f = g.slice_rows(heads.v_out, offset, n);
            let f = g.row_normalize(f);
            let target = matmul(&teacher.cast::<S>(), false, &teacher.cast::<S>(), true);
            let w = Arc::new(vec![S::one(); n]);
            let l = g.gram_loss(f, Arc::new(target), w, ((n * n) as f64).max(1.0) * norms.gram);
            parts.gram += g.value(l).item().as_f64();
            gram_terms.push(l);
        }
        offset += n;
    }
    for l in gram_terms {
        terms.push((l, t.gram * inv_r));
    }
    if cfg.with_grad && !terms.is_empty() {
        let root = g.weighted_sum(&terms);
        g.backward(root);
        for (i, &v) in pv.iter().enumerate() {
            if let Some(gr) = g.take_grad(v) {
                grads[i].add_assign(&gr);
            }
        }
    }
    Ok((parts, split))
}

/// Row-normalized `V_out` of a frozen model on the image alone.
pub fn teacher_features(model: &Model<f32>, image: &RgbImage) -> Result<Tensor<f32>> {
    let p = model.cfg.patch;
    let grid = (image.height / p, image.width / p);
    let seq = serialize_sample(grid, &[], &model.vocab, &SerializeOptions::default()).map_err(|e| TrainError::Seq(e.to_string()))?;
    let out = model.forward(&[Sample { image, seq: &seq }], MaskMode::QueryMasked)?;
    let mut g = Graph::new();
    let v = g.constant(out.v_out);
    let v = g.row_normalize(v);
    Ok(g.value(v).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

/// Pluggable update rule.
pub trait Optimizer {
    fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64);
}

/// Adaptive moments with decoupled weight decay on matrices.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &[Tensor<f32>]) -> Self {
        let z = |p: &Tensor<f32>| Tensor::zeros(p.rows, p.cols);
        Self { cfg, m: params.iter().map(z).collect(), v: params.iter().map(z).collect(), t: 0 }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let b1 = c.beta1 as f32;
        let b2 = c.beta2 as f32;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (lr / bc1) as f32;
        let bc2s = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.rows > 1 { (lr * c.weight_decay) as f32 } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                p.data[k] -= step * m.data[k] / (v.data[k].sqrt() / bc2s + eps) + decay * p.data[k];
            }
        }
    }
}

pub fn grad_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().map(|g| g.data.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sum::<f64>().sqrt()
}

/// Linear warmup to `start`, then inverse-square-root decay reaching `end`
/// at the last step. `start == end` gives a constant rate after warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub warmup: usize,
    pub steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.start * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup + 1);
        if span == 0 || self.start <= self.end {
            return if span == 0 { self.start } else { self.start + (self.end - self.start) * (step - self.warmup) as f64 / span as f64 };
        }
        let k = ((self.start / self.end).powi(2) - 1.0) / span as f64;
        self.start / (1.0 + k * (step - self.warmup).min(span) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Regular,
    Dense,
    /// Dense scenes interleaved with regular ones.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: usize,
    /// Maximum instances serialized per sample.
    pub mask_cap: usize,
    pub mode: MaskMode,
    pub prompt_loss: bool,
    pub lr_start: f64,
    pub lr_end: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_queries")]
    pub queries_per_sample: usize,
    #[serde(default = "default_source")]
    pub data: DataSource,
    /// Overrides the model's upsample factor for this stage.
    #[serde(default)]
    pub upsample_factor: Option<usize>,
}

fn default_batch() -> usize {
    8
}
fn default_queries() -> usize {
    4
}
fn default_source() -> DataSource {
    DataSource::Regular
}

impl StageConfig {
    /// The recipe's caps, masking modes, prompt loss and rate endpoints.
    pub fn recipe(stage: u8, steps: usize) -> Self {
        let (mask_cap, mode, prompt_loss, lr_start, lr_end, data) = match stage {
            1 => (100, MaskMode::FullAr, true, 4e-4, 1e-4, DataSource::Regular),
            2 => (150, MaskMode::QueryMasked, false, 1e-4, 4e-6, DataSource::Regular),
            _ => (600, MaskMode::QueryMasked, false, 1e-6, 1e-6, DataSource::Dense),
        };
        Self { stage, steps, mask_cap, mode, prompt_loss, lr_start, lr_end, warmup: 0, batch_size: default_batch(), queries_per_sample: default_queries(), data, upsample_factor: None }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { start: self.lr_start, end: self.lr_end, warmup: self.warmup, steps: self.steps }
    }

    pub fn positions(&self) -> BlockPositions {
        match self.mode {
            MaskMode::FullAr => BlockPositions::Sequential,
            MaskMode::QueryMasked => BlockPositions::RestartPerBlock,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub ranks: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Checkpoint period in steps; `0` writes only at stage ends.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Abort when the loss exceeds this or turns non-finite.
    #[serde(default = "default_diverge")]
    pub divergence_threshold: f64,
}

fn one() -> usize {
    1
}
fn default_log_every() -> usize {
    10
}
fn default_diverge() -> f64 {
    1e4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stages: vec![StageConfig::recipe(1, 1000), StageConfig::recipe(2, 1000), StageConfig::recipe(3, 200)],
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            ranks: 1,
            log_every: default_log_every(),
            checkpoint_every: 0,
            divergence_threshold: default_diverge(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe that fits stages 1 and 2 in about half an hour on
    /// one core. Coarser bins, a smoother Fourier basis and higher learning
    /// rates than the full-scale schedule.
    pub fn toy() -> Self {
        let mut model = ModelConfig::default();
        model.bins = 64;
        model.fourier_sigma = 1.0;
        model.upsample_factor = 2;
        let stage = |s: u8, steps: usize, lr_start: f64, lr_end: f64, warmup: usize| StageConfig { lr_start, lr_end, warmup, queries_per_sample: 8, ..StageConfig::recipe(s, steps) };
        Self {
            model,
            stages: vec![stage(1, 2500, 2e-3, 5e-4, 100), stage(2, 5000, 1e-3, 4e-5, 0), stage(3, 200, 1e-5, 1e-5, 0)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.stages.is_empty() {
            return Err(TrainError::Config("no stages".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].stage <= w[0].stage {
                return Err(TrainError::Config("stages must be strictly increasing".into()));
            }
            if w[1].mask_cap < w[0].mask_cap {
                return Err(TrainError::Config("mask caps must not decrease across stages".into()));
            }
        }
        for s in &self.stages {
            if !(1..=3).contains(&s.stage) {
                return Err(TrainError::Config(format!("stage {} not in 1..=3", s.stage)));
            }
            if s.batch_size == 0 || s.queries_per_sample == 0 {
                return Err(TrainError::Config("batch_size and queries_per_sample must be positive".into()));
            }
            if !(s.lr_start >= 0.0 && s.lr_end >= 0.0) {
                return Err(TrainError::Config("learning rates must be nonnegative".into()));
            }
            if let Some(f) = s.upsample_factor {
                crate::model::check_factor(f, self.model.patch)?;
            }
        }
        if self.ranks == 0 {
            return Err(TrainError::Config("ranks must be positive".into()));
        }
        Ok(())
    }

    /// Reads TOML or JSON by extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?
        };
        Ok(cfg)
    }
}

/// Picks up to `qps` queries with as many absent as present ones, drops
/// queries that would push the sample past `cap` instances, and serializes.
pub fn build_sequence(ex: &Example, stage: &StageConfig, grid: (usize, usize), vocab: &Vocab, bins: usize, rng: &mut ChaCha8Rng) -> Result<TokenSequence> {
    let mut pos: Vec<usize> = (0..ex.queries.len()).filter(|&i| !ex.queries[i].instances.is_empty()).collect();
    let mut neg: Vec<usize> = (0..ex.queries.len()).filter(|&i| ex.queries[i].instances.is_empty()).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let half = (stage.queries_per_sample / 2).max(1);
    let k = pos.len().min(neg.len()).min(half);
    let mut chosen: Vec<usize> = pos[..k].iter().chain(&neg[..k]).copied().collect();
    if chosen.is_empty() {
        chosen.extend(pos.first().or(neg.first()));
    }
    chosen.shuffle(rng);
    let mut total = 0;
    let mut inputs = Vec::with_capacity(chosen.len());
    for i in chosen {
        let q = &ex.queries[i];
        if total + q.instances.len() > stage.mask_cap {
            continue;
        }
        total += q.instances.len();
        inputs.push(QueryInput { prompt: &q.prompt, instances: &q.instances });
    }
    let opts = SerializeOptions { instance_cap: stage.mask_cap, positions: stage.positions(), raster: QuantConfig { bins } };
    let mut seq = serialize_sample(grid, &inputs, vocab, &opts).map_err(|e| TrainError::Seq(e.to_string()))?;
    apply_loss_mask(&mut seq, if stage.prompt_loss { 1 } else { 2 }, vocab);
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub lm: f64,
    pub coord: f64,
    pub size: f64,
    pub seg: f64,
    pub gram: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: AdamW,
    /// Global step count across stages.
    pub step: usize,
    teacher_model: Model<f32>,
    teachers: HashMap<String, Arc<Tensor<f32>>>,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let opt = AdamW::new(cfg.optim, &model.params);
        Ok(Self { teacher_model: model.clone(), cfg, model, opt, step: 0, teachers: HashMap::new(), log: Vec::new() })
    }

    /// Restores parameters, moments and the step counter.
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if ck.config != t.cfg.model {
            return Err(TrainError::Config("checkpoint model config differs from the run config".into()));
        }
        t.model = Model::from_checkpoint(ck)?;
        for (i, name) in t.model.names.clone().iter().enumerate() {
            if let (Some(m), Some(v)) = (ck.get(&format!("opt.m.{name}")), ck.get(&format!("opt.v.{name}"))) {
                t.opt.m[i] = m.clone();
                t.opt.v[i] = v.clone();
            }
        }
        t.opt.t = ck.meta["opt_t"].as_u64().unwrap_or(0);
        t.step = ck.meta["step"].as_u64().unwrap_or(0) as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "step": self.step, "opt_t": self.opt.t, "stage": self.stage_at(self.step).map(|(s, _)| s.stage) });
        let mut ck = self.model.to_checkpoint(meta);
        for (i, name) in self.model.names.iter().enumerate() {
            ck.tensors.push((format!("opt.m.{name}"), self.opt.m[i].clone()));
            ck.tensors.push((format!("opt.v.{name}"), self.opt.v[i].clone()));
        }
        ck
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.stages.iter().map(|s| s.steps).sum()
    }

    /// Stage and stage-local step of a global step.
    pub fn stage_at(&self, step: usize) -> Option<(&StageConfig, usize)> {
        let mut start = 0;
        for s in &self.cfg.stages {
            if step < start + s.steps {
                return Some((s, step - start));
            }
            start += s.steps;
        }
        None
    }

    fn teacher(&mut self, ex: &Example) -> Result<Arc<Tensor<f32>>> {
        if let Some(t) = self.teachers.get(&ex.id) {
            return Ok(t.clone());
        }
        let t = Arc::new(teacher_features(&self.teacher_model, &ex.image)?);
        self.teachers.insert(ex.id.clone(), t.clone());
        Ok(t)
    }

    /// Samples the batch for `step` deterministically from the seed.
    pub fn batch_for(&mut self, step: usize, regular: &[Example], dense: &[Example]) -> Result<Vec<(usize, bool, TokenSequence)>> {
        let (stage, _) = self.stage_at(step).ok_or_else(|| TrainError::Config(format!("step {step} past the last stage")))?;
        let stage = stage.clone();
        let mut rng = step_rng(self.cfg.seed, step);
        let mut picks = Vec::with_capacity(stage.batch_size);
        for b in 0..stage.batch_size {
            let use_dense = match stage.data {
                DataSource::Regular => false,
                DataSource::Dense => true,
                DataSource::Mixed => b % 2 == 0,
            };
            let pool = if use_dense && !dense.is_empty() { dense } else { regular };
            if pool.is_empty() {
                return Err(TrainError::EmptyDataset(stage.stage));
            }
            let idx = rand::Rng::random_range(&mut rng, 0..pool.len());
            let ex = &pool[idx];
            let grid = (ex.image.height / self.cfg.model.patch, ex.image.width / self.cfg.model.patch);
            let seq = build_sequence(ex, &stage, grid, &self.model.vocab, self.cfg.model.bins, &mut rng)?;
            picks.push((idx, use_dense && !dense.is_empty(), seq));
        }
        Ok(picks)
    }

    /// Loss and gradients at the current parameters for `step`'s batch.
    pub fn evaluate_step(&mut self, step: usize, regular: &[Example], dense: &[Example]) -> Result<Objective<f32>> {
        let picks = self.batch_for(step, regular, dense)?;
        let stage = self.stage_at(step).unwrap().0.clone();
        let use_gram = self.cfg.weights.lambda_gram > 0.0;
        let mut items = Vec::with_capacity(picks.len());
        for (idx, d, seq) in picks {
            let ex = if d { &dense[idx] } else { &regular[idx] };
            let teacher = if use_gram { Some(self.teacher(ex)?) } else { None };
            items.push((ex, seq, teacher));
        }
        let r = self.cfg.ranks;
        let per = items.len().div_ceil(r);
        let mut ranks: Vec<Vec<TrainItem<'_>>> = (0..r).map(|_| Vec::new()).collect();
        for (i, (ex, seq, teacher)) in items.into_iter().enumerate() {
            ranks[i / per.max(1)].push(TrainItem { image: &ex.image, seq, teacher });
        }
        let cfg = ObjectiveConfig {
            weights: self.cfg.weights,
            terms: Terms::total(&self.cfg.weights),
            mode: stage.mode,
            upsample_factor: stage.upsample_factor.unwrap_or(self.cfg.model.upsample_factor),
            with_grad: true,
        };
        objective(&self.model, &ranks, &cfg)
    }

    /// One optimizer step. Returns the log row.
    pub fn train_step(&mut self, regular: &[Example], dense: &[Example]) -> Result<LogRow> {
        let t0 = Instant::now();
        let step = self.step;
        let (stage, local) = self.stage_at(step).ok_or_else(|| TrainError::Config("no steps left".into()))?;
        let (stage_id, lr) = (stage.stage, stage.schedule().at(local));
        let mut obj = self.evaluate_step(step, regular, dense)?;
        let gn = grad_norm(&obj.grads);
        if !obj.loss.is_finite() || obj.loss > self.cfg.divergence_threshold || !gn.is_finite() {
            return Err(TrainError::Diverged { step, loss: obj.loss, checkpoint: None });
        }
        let clip = self.cfg.optim.grad_clip;
        if clip > 0.0 && gn > clip {
            let s = (clip / gn) as f32;
            for gr in &mut obj.grads {
                for x in &mut gr.data {
                    *x *= s;
                }
            }
        }
        self.opt.step(&mut self.model.params, &obj.grads, lr);
        self.step += 1;
        let p = obj.parts;
        let row = LogRow {
            step,
            stage: stage_id,
            lr,
            lm: p.lm,
            coord: p.coord,
            size: p.size,
            seg: p.seg,
            gram: p.gram,
            total: obj.loss,
            grad_norm: gn,
            seconds: t0.elapsed().as_secs_f64(),
        };
        self.log.push(row.clone());
        Ok(row)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory for the CSV log and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Stop after this global step (exclusive).
    pub stop_at: Option<usize>,
    /// Wall-clock budget in seconds; the run stops early when exceeded.
    pub time_budget: Option<f64>,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Log(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| TrainError::Log(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the remaining steps of every stage. On divergence the parameters
/// from before the failing step are written to `last_good.ckpt`.
pub fn run(trainer: &mut Trainer, regular: &[Example], dense: &[Example], opts: &RunOptions) -> Result<()> {
    if regular.is_empty() && dense.is_empty() {
        return Err(TrainError::EmptyDataset(trainer.cfg.stages[0].stage));
    }
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d)?;
    }
    let t0 = Instant::now();
    let end = opts.stop_at.unwrap_or(usize::MAX).min(trainer.total_steps());
    let log_every = trainer.cfg.log_every.max(1);
    while trainer.step < end {
        if opts.time_budget.is_some_and(|b| t0.elapsed().as_secs_f64() > b) {
            log::warn!("time budget reached at step {}", trainer.step);
            break;
        }
        let before = if opts.out_dir.is_some() { Some(trainer.model.params.clone()) } else { None };
        match trainer.train_step(regular, dense) {
            Ok(row) => {
                if row.step % log_every == 0 {
                    log::info!(
                        "step {} stage {} lr {:.2e} total {:.4} lm {:.4} coord {:.4} size {:.4} seg {:.4} gram {:.4} |g| {:.3} ({:.2}s)",
                        row.step, row.stage, row.lr, row.total, row.lm, row.coord, row.size, row.seg, row.gram, row.grad_norm, row.seconds
                    );
                }
            }
            Err(TrainError::Diverged { step, loss, .. }) => {
                let checkpoint = match (&opts.out_dir, before) {
                    (Some(d), Some(p)) => {
                        let mut good = trainer.model.clone();
                        good.params = p;
                        let path = d.join("last_good.ckpt");
                        save_checkpoint(&path, &good.to_checkpoint(serde_json::json!({ "step": step })))?;
                        Some(path)
                    }
                    _ => None,
                };
                if let Some(d) = &opts.out_dir {
                    write_log(&d.join("train_log.csv"), &trainer.log)?;
                }
                return Err(TrainError::Diverged { step, loss, checkpoint });
            }
            Err(e) => return Err(e),
        }
        let s = trainer.step;
        let stage_end = trainer.stage_at(s - 1).map(|(st, local)| local + 1 == st.steps).unwrap_or(false);
        if let Some(d) = &opts.out_dir {
            let periodic = trainer.cfg.checkpoint_every > 0 && s % trainer.cfg.checkpoint_every == 0;
            if periodic || stage_end || s == end {
                save_checkpoint(&d.join("checkpoint.ckpt"), &trainer.checkpoint())?;
                write_log(&d.join("train_log.csv"), &trainer.log)?;
            }
        }
    }
    if let Some(d) = &opts.out_dir {
        save_checkpoint(&d.join("checkpoint.ckpt"), &trainer.checkpoint())?;
        write_log(&d.join("train_log.csv"), &trainer.log)?;
    }
    Ok(())
}

/// Loads a trainer from `dir/checkpoint.ckpt` when present.
pub fn resume_or_new(cfg: TrainConfig, dir: &Path) -> Result<Trainer> {
    let path = dir.join("checkpoint.ckpt");
    if path.exists() {
        let ck = load_checkpoint(&path)?;
        let mut t = Trainer::resume(cfg, &ck)?;
        if let Ok(mut r) = csv::Reader::from_path(dir.join("train_log.csv")) {
            t.log = r.deserialize().filter_map(|x| x.ok()).filter(|row: &LogRow| row.step < t.step).collect();
        }
        Ok(t)
    } else {
        Trainer::new(cfg)
    }
}
