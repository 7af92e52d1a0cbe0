//! The dense early-fusion transformer, its heads and the feature upsampler.
//!
//! One packed stream holds every sample of a batch. Image rows carry patch
//! embeddings plus a Fourier encoding of the patch center; the row after a
//! `<coord>` carries the projected Fourier encoding of that coordinate, and
//! the row after a `<size>` the projected encoding of that size. All other
//! rows look up the token table.

mod checkpoint;
mod decode;
mod upsample;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use decode::{resize_for_model, resize_mask, resize_nearest, DecodeMode, DecodeOptions, DecodedInstance, DecodedPrompt, Decoder, ResizeMode, Temperatures};
pub use upsample::{bilinear_map, local_table, pixel_inputs};

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AttnLayout, AttnSegment, Graph, Var};
use crate::geometry::{quantize_coord, quantize_size, QuantConfig, RgbImage};
use crate::posenc::{FourierEncoder, RopeConfig};
use crate::seqformat::{AttentionSpec, MaskMode, Role, TokenSequence, Vocab};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: usize },
    #[error("missing continuous target at position {0}")]
    MissingTarget(usize),
    #[error("image {got:?} does not match the token grid {expected:?}")]
    ImageShape { got: (usize, usize), expected: (usize, usize) },
    #[error("batch of {len} rows exceeds capacity {cap}")]
    Capacity { len: usize, cap: usize },
    #[error("upsample factor {0} not in {{1,2,4,8,16}} or larger than the patch")]
    UpsampleFactor(usize),
    #[error("parameter {name}: expected {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub bins: usize,
    pub patch: usize,
    pub image_size: usize,
    pub upsample_factor: usize,
    pub pixel_hidden: usize,
    pub key_dim: usize,
    pub rope_base: f64,
    pub rope_base_2d: f64,
    pub fourier_sigma: f64,
    pub fourier_seed: u64,
    pub init_seed: u64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            bins: 1024,
            patch: 8,
            image_size: 64,
            upsample_factor: 8,
            pixel_hidden: 32,
            key_dim: 16,
            rope_base: 10_000.0,
            rope_base_2d: 100.0,
            fourier_sigma: crate::posenc::DEFAULT_SIGMA,
            fourier_seed: 17,
            init_seed: 0,
            max_len: 4096,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn quant(&self) -> QuantConfig {
        QuantConfig { bins: self.bins }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return bad("layers, width and heads must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.head_dim() % 4 != 0 {
            return bad(format!("head_dim {} must be a multiple of 4", self.head_dim()));
        }
        if self.bins < 2 {
            return bad("bins must be at least 2".into());
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        check_factor(self.upsample_factor, self.patch)?;
        if self.pixel_hidden == 0 || self.key_dim == 0 || self.ffn_mult == 0 {
            return bad("pixel_hidden, key_dim and ffn_mult must be positive".into());
        }
        Ok(())
    }
}

pub fn check_factor(f: usize, patch: usize) -> Result<()> {
    if !matches!(f, 1 | 2 | 4 | 8 | 16) || f > patch || patch % f != 0 {
        return Err(ModelError::UpsampleFactor(f));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub norm1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct MlpHeadIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Positions of every parameter tensor in [`Model::params`].
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub tok_emb: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub coord_proj_w: usize,
    pub coord_proj_b: usize,
    pub size_proj_w: usize,
    pub size_proj_b: usize,
    pub blocks: Vec<BlockIds>,
    pub final_norm: usize,
    pub lm_w: usize,
    pub lm_b: usize,
    pub coord_head: MlpHeadIds,
    pub size_head: MlpHeadIds,
    pub seg_w: usize,
    pub seg_b: usize,
    pub pix_w1: usize,
    pub pix_b1: usize,
    pub pix_w2: usize,
    pub pix_b2: usize,
    pub up_wq: usize,
    pub up_qpos: usize,
    pub up_wk: usize,
    pub up_wv: usize,
    pub up_bias: usize,
}

/// Parameter name, shape and init std (`0` means ones for gains, zeros for
/// biases).
struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> (Vec<Spec>, ParamIds) {
    let d = cfg.width;
    let v = Vocab::default().size();
    let pd = cfg.patch * cfg.patch * 3;
    let f = d; // Fourier feature width
    let hid = d * cfg.ffn_mult;
    let mut specs = Vec::new();
    let mut add = |name: &str, rows: usize, cols: usize, init: Init| {
        specs.push(Spec { name: name.to_string(), rows, cols, init });
        specs.len() - 1
    };
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    let tok_emb = add("tok_emb", v, d, Init::Normal(1.0));
    let patch_w = add("patch_w", pd, d, fan(pd));
    let patch_b = add("patch_b", 1, d, Init::Zeros);
    let coord_proj_w = add("coord_proj_w", f, d, fan(f));
    let coord_proj_b = add("coord_proj_b", 1, d, Init::Zeros);
    let size_proj_w = add("size_proj_w", f, d, fan(f));
    let size_proj_b = add("size_proj_b", 1, d, Init::Zeros);
    let mut blocks = Vec::new();
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        blocks.push(BlockIds {
            norm1: add(&p("norm1"), 1, d, Init::Ones),
            wq: add(&p("wq"), d, d, fan(d)),
            wk: add(&p("wk"), d, d, fan(d)),
            wv: add(&p("wv"), d, d, fan(d)),
            wo: add(&p("wo"), d, d, Init::Normal(out_scale / (d as f64).sqrt())),
            norm2: add(&p("norm2"), 1, d, Init::Ones),
            w1: add(&p("w1"), d, hid, fan(d)),
            b1: add(&p("b1"), 1, hid, Init::Zeros),
            w2: add(&p("w2"), hid, d, Init::Normal(out_scale / (hid as f64).sqrt())),
            b2: add(&p("b2"), 1, d, Init::Zeros),
        });
    }
    let final_norm = add("final_norm", 1, d, Init::Ones);
    let lm_w = add("lm_w", d, v, fan(d));
    let lm_b = add("lm_b", 1, v, Init::Zeros);
    let small = Init::Normal(0.1 / (d as f64).sqrt());
    let coord_head = MlpHeadIds {
        w1: add("coord_head.w1", d, d, fan(d)),
        b1: add("coord_head.b1", 1, d, Init::Zeros),
        w2: add("coord_head.w2", d, 2 * cfg.bins, small),
        b2: add("coord_head.b2", 1, 2 * cfg.bins, Init::Zeros),
    };
    let size_head = MlpHeadIds {
        w1: add("size_head.w1", d, d, fan(d)),
        b1: add("size_head.b1", 1, d, Init::Zeros),
        w2: add("size_head.w2", d, 2 * cfg.bins, small),
        b2: add("size_head.b2", 1, 2 * cfg.bins, Init::Zeros),
    };
    let seg_w = add("seg_w", d, d, fan(d));
    let seg_b = add("seg_b", 1, d, Init::Zeros);
    let ph = cfg.pixel_hidden;
    let pix_w1 = add("up.pix_w1", 3, ph, Init::Normal(1.0));
    let pix_b1 = add("up.pix_b1", 1, ph, Init::Zeros);
    let pix_w2 = add("up.pix_w2", ph, d, fan(ph));
    let pix_b2 = add("up.pix_b2", 1, d, Init::Zeros);
    let up_wq = add("up.wq", d, cfg.key_dim, fan(d));
    let up_qpos = add("up.qpos", f, cfg.key_dim, fan(f));
    let up_wk = add("up.wk", d, cfg.key_dim, fan(d));
    let up_wv = add("up.wv", d, d, fan(d));
    let up_bias = add("up.bias", cfg.patch * cfg.patch, 9, Init::Zeros);
    let ids = ParamIds {
        tok_emb,
        patch_w,
        patch_b,
        coord_proj_w,
        coord_proj_b,
        size_proj_w,
        size_proj_b,
        blocks,
        final_norm,
        lm_w,
        lm_b,
        coord_head,
        size_head,
        seg_w,
        seg_b,
        pix_w1,
        pix_b1,
        pix_w2,
        pix_b2,
        up_wq,
        up_qpos,
        up_wk,
        up_wv,
        up_bias,
    };
    (specs, ids)
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<S>>,
    pub ids: ParamIds,
    pub fourier: FourierEncoder,
    pub rope: RopeConfig,
    pub vocab: Vocab,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (specs, ids) = layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(s.rows, s.cols),
                Init::Ones => Tensor::from_vec(s.rows, s.cols, vec![S::one(); s.rows * s.cols]),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_vec(s.rows, s.cols, (0..s.rows * s.cols).map(|_| S::lit(n.sample(&mut rng))).collect())
                }
            })
            .collect();
        let names = specs.iter().map(|s| s.name.clone()).collect();
        Self::assemble(cfg, names, params, ids)
    }

    fn assemble(cfg: ModelConfig, names: Vec<String>, params: Vec<Tensor<S>>, ids: ParamIds) -> Result<Self> {
        let fourier = FourierEncoder::new(cfg.width, cfg.fourier_sigma, cfg.fourier_seed)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let rope = RopeConfig::new(cfg.head_dim(), cfg.rope_base, cfg.rope_base_2d)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Self { cfg, names, params, ids, fourier, rope, vocab: Vocab::default() })
    }

    /// Builds a model from named tensors, checking every name and shape.
    pub fn from_named(cfg: ModelConfig, named: &[(String, Tensor<S>)]) -> Result<Self> {
        cfg.validate()?;
        let (specs, ids) = layout(&cfg);
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = named
                .iter()
                .find(|(n, _)| n == &s.name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| ModelError::MissingParam(s.name.clone()))?;
            if (t.rows, t.cols) != (s.rows, s.cols) {
                return Err(ModelError::ParamShape { name: s.name.clone(), expected: (s.rows, s.cols), found: (t.rows, t.cols) });
            }
            params.push(t);
        }
        let names = specs.iter().map(|s| s.name.clone()).collect();
        Self::assemble(cfg, names, params, ids)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
            ids: self.ids.clone(),
            fourier: self.fourier.clone(),
            rope: self.rope.clone(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub(crate) fn fourier_rows(&self, points: &[[f64; 2]]) -> Tensor<S> {
        let d = self.fourier.dim();
        let mut data = Vec::with_capacity(points.len() * d);
        for p in points {
            let f = self.fourier.encode(*p).expect("finite point");
            data.extend(f.into_iter().map(S::lit));
        }
        Tensor::from_vec(points.len(), d, data)
    }
}

/// One image and its serialized sequence.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a RgbImage,
    pub seq: &'a TokenSequence,
}

/// Host-side tensors and row bookkeeping for one packed forward pass.
#[derive(Debug, Clone)]
pub struct Prepared<S: Scalar> {
    pub rows: usize,
    pub patches: Tensor<S>,
    pub patch_fourier: Tensor<S>,
    pub token_ids: Arc<Vec<u32>>,
    pub coord_inject: Tensor<S>,
    pub size_inject: Tensor<S>,
    pub perm: Arc<Vec<u32>>,
    pub cos: Arc<Vec<S>>,
    pub sin: Arc<Vec<S>>,
    pub layout: Arc<AttnLayout>,
    pub sample_ranges: Vec<Range<usize>>,
    /// Stream rows of image tokens, sample by sample.
    pub image_rows: Arc<Vec<u32>>,
    pub image_counts: Vec<usize>,
    pub lm_rows: Arc<Vec<u32>>,
    pub lm_targets: Vec<Option<u32>>,
    pub lm_sample: Vec<u32>,
    pub coord_rows: Arc<Vec<u32>>,
    pub coord_targets: Vec<[u32; 2]>,
    pub size_rows: Arc<Vec<u32>>,
    pub size_targets: Vec<[u32; 2]>,
    pub seg_rows: Arc<Vec<u32>>,
    /// `(sample, instance)` for every `<seg>` row.
    pub seg_instances: Vec<(usize, usize)>,
    /// `(sample, instance)` for every `<coord>`/`<size>` row.
    pub box_instances: Vec<(usize, usize)>,
}

pub fn patch_vectors<S: Scalar>(image: &RgbImage, patch: usize) -> Tensor<S> {
    let (rows, cols) = (image.height / patch, image.width / patch);
    let pd = patch * patch * 3;
    let mut data = Vec::with_capacity(rows * cols * pd);
    for r in 0..rows {
        for c in 0..cols {
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = image.pixel(r * patch + dy, c * patch + dx);
                    for ch in px {
                        data.push(S::lit(ch as f64 / 255.0 - 0.5));
                    }
                }
            }
        }
    }
    Tensor::from_vec(rows * cols, pd, data)
}

impl<S: Scalar> Model<S> {
    /// Lays out a packed stream for `samples`. Sequences must already carry
    /// their stage-specific labels.
    pub fn prepare(&self, samples: &[Sample<'_>], mode: MaskMode) -> Result<Prepared<S>> {
        let p = self.cfg.patch;
        let q = self.cfg.quant();
        let total: usize = samples.iter().map(|s| s.seq.len()).sum();
        if total > self.cfg.max_len {
            return Err(ModelError::Capacity { len: total, cap: self.cfg.max_len });
        }
        let mut patches = Vec::new();
        let mut patch_pts = Vec::new();
        let mut token_ids = Vec::new();
        let mut coord_pts = Vec::new();
        let mut size_pts = Vec::new();
        // (part, index) per stream row; parts: 0 image, 1 token, 2 coord, 3 size.
        let mut src: Vec<(u8, usize)> = Vec::with_capacity(total);
        let half = self.rope.half();
        let mut cos = Vec::with_capacity(total * half);
        let mut sin = Vec::with_capacity(total * half);
        let mut segments = Vec::new();
        let mut sample_ranges = Vec::new();
        let mut image_rows = Vec::new();
        let mut image_counts = Vec::new();
        let mut lm_rows = Vec::new();
        let mut lm_targets = Vec::new();
        let mut lm_sample = Vec::new();
        let (mut coord_rows, mut coord_targets) = (Vec::new(), Vec::new());
        let (mut size_rows, mut size_targets) = (Vec::new(), Vec::new());
        let (mut seg_rows, mut seg_instances, mut box_instances) = (Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (si, s) in samples.iter().enumerate() {
            let seq = s.seq;
            let (gr, gc) = seq.grid;
            if (s.image.height, s.image.width) != (gr * p, gc * p) {
                return Err(ModelError::ImageShape { got: (s.image.height, s.image.width), expected: (gr * p, gc * p) });
            }
            let pv = patch_vectors::<S>(s.image, p);
            patches.push(pv);
            let mut n_img = 0;
            for i in 0..seq.len() {
                let row = offset + i;
                let grid = seq.grid_pos[i].map(|g| [g[0] as f64, g[1] as f64]);
                for a in self.rope.angles(seq.positions[i] as f64, grid) {
                    let (sn, cs) = a.sin_cos();
                    cos.push(S::lit(cs));
                    sin.push(S::lit(sn));
                }
                match seq.roles[i] {
                    Role::Image => {
                        let g = seq.grid_pos[i].expect("image rows carry grid positions");
                        patch_pts.push([(g[0] as f64 + 0.5) / gc as f64, (g[1] as f64 + 0.5) / gr as f64]);
                        src.push((0, patch_pts.len() - 1));
                        image_rows.push(row as u32);
                        n_img += 1;
                    }
                    role => {
                        let prev = if i > 0 { Some((seq.roles[i - 1], seq.targets[i - 1])) } else { None };
                        match prev {
                            Some((Role::Coord, t)) => {
                                let k = t.ok_or(ModelError::MissingTarget(i - 1))?;
                                let c = seq.instances[k].center;
                                coord_pts.push([c.x, c.y]);
                                src.push((2, coord_pts.len() - 1));
                            }
                            Some((Role::Size, t)) => {
                                let k = t.ok_or(ModelError::MissingTarget(i - 1))?;
                                let sz = seq.instances[k].size;
                                size_pts.push([sz.w, sz.h]);
                                src.push((3, size_pts.len() - 1));
                            }
                            _ => {
                                token_ids.push(seq.tokens[i]);
                                src.push((1, token_ids.len() - 1));
                            }
                        }
                        if let Some(label) = seq.labels[i] {
                            lm_rows.push(row as u32);
                            lm_targets.push(Some(label));
                            lm_sample.push(si as u32);
                        }
                        let target = seq.targets[i];
                        match role {
                            Role::Coord | Role::Size | Role::Seg => {
                                let k = target.ok_or(ModelError::MissingTarget(i))?;
                                let inst = &seq.instances[k];
                                match role {
                                    Role::Coord => {
                                        coord_rows.push(row as u32);
                                        coord_targets.push(quantize_coord(inst.center, q).map_err(|e| ModelError::Config(e.to_string()))?);
                                        box_instances.push((si, k));
                                    }
                                    Role::Size => {
                                        size_rows.push(row as u32);
                                        size_targets.push(quantize_size(inst.size, q).map_err(|e| ModelError::Config(e.to_string()))?);
                                    }
                                    _ => {
                                        seg_rows.push(row as u32);
                                        seg_instances.push((si, k));
                                    }
                                }
                            }
                            _ => {}
                        }
                    }
                }
            }
            image_counts.push(n_img);
            let spec = AttentionSpec::single(seq, mode);
            segments.push(AttnSegment { start: offset, len: seq.len(), mask: spec.dense() });
            sample_ranges.push(offset..offset + seq.len());
            offset += seq.len();
        }
        let n_patch = patch_pts.len();
        let n_tok = token_ids.len();
        let n_coord = coord_pts.len();
        let base = [0, n_patch, n_patch + n_tok, n_patch + n_tok + n_coord];
        let perm = src.iter().map(|&(part, i)| (base[part as usize] + i) as u32).collect();
        let pd = p * p * 3;
        let mut pdata = Vec::with_capacity(n_patch * pd);
        for t in patches {
            pdata.extend(t.data);
        }
        Ok(Prepared {
            rows: total,
            patches: Tensor::from_vec(n_patch, pd, pdata),
            patch_fourier: self.fourier_rows(&patch_pts),
            token_ids: Arc::new(token_ids),
            coord_inject: self.fourier_rows(&coord_pts),
            size_inject: self.fourier_rows(&size_pts),
            perm: Arc::new(perm),
            cos: Arc::new(cos),
            sin: Arc::new(sin),
            layout: Arc::new(AttnLayout { segments }),
            sample_ranges,
            image_rows: Arc::new(image_rows),
            image_counts,
            lm_rows: Arc::new(lm_rows),
            lm_targets,
            lm_sample,
            coord_rows: Arc::new(coord_rows),
            coord_targets,
            size_rows: Arc::new(size_rows),
            size_targets,
            seg_rows: Arc::new(seg_rows),
            seg_instances,
            box_instances,
        })
    }
}

/// Graph handles for the backbone and head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub hidden: Var,
    pub lm: Var,
    /// `2n x B`: x then y logits for every `<coord>` row.
    pub coord: Var,
    pub size: Var,
    pub seg_query: Var,
    pub v_out: Var,
}

pub(crate) fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

impl<S: Scalar> Model<S> {
    pub(crate) fn embed_rows(
        &self,
        g: &mut Graph<S>,
        pv: &[Var],
        patches: &Tensor<S>,
        patch_fourier: &Tensor<S>,
    ) -> Var {
        let ids = &self.ids;
        let px = g.constant(patches.clone());
        let pe = linear(g, px, pv[ids.patch_w], pv[ids.patch_b]);
        let pf = g.constant(patch_fourier.clone());
        let pp = linear(g, pf, pv[ids.coord_proj_w], pv[ids.coord_proj_b]);
        g.add(pe, pp)
    }

    /// Input embedding stream for a prepared batch.
    pub fn embed(&self, g: &mut Graph<S>, pv: &[Var], prep: &Prepared<S>) -> Var {
        let ids = &self.ids;
        let mut parts = Vec::new();
        if prep.patches.rows > 0 {
            parts.push(self.embed_rows(g, pv, &prep.patches, &prep.patch_fourier));
        }
        if !prep.token_ids.is_empty() {
            parts.push(g.gather_rows(pv[ids.tok_emb], prep.token_ids.clone()));
        }
        if prep.coord_inject.rows > 0 {
            let c = g.constant(prep.coord_inject.clone());
            parts.push(linear(g, c, pv[ids.coord_proj_w], pv[ids.coord_proj_b]));
        }
        if prep.size_inject.rows > 0 {
            let s = g.constant(prep.size_inject.clone());
            parts.push(linear(g, s, pv[ids.size_proj_w], pv[ids.size_proj_b]));
        }
        let all = g.concat_rows(&parts);
        g.gather_rows(all, prep.perm.clone())
    }

    /// One pre-norm block; `layout` decides who sees whom.
    pub(crate) fn block(
        &self,
        g: &mut Graph<S>,
        pv: &[Var],
        l: usize,
        x: Var,
        cos: &Arc<Vec<S>>,
        sin: &Arc<Vec<S>>,
        layout: &Arc<AttnLayout>,
    ) -> Var {
        let b = &self.ids.blocks[l];
        let hd = self.cfg.head_dim();
        let h = g.rms_norm(x, pv[b.norm1], 1e-6);
        let q = g.matmul(h, pv[b.wq]);
        let k = g.matmul(h, pv[b.wk]);
        let v = g.matmul(h, pv[b.wv]);
        let q = g.rope(q, cos.clone(), sin.clone(), hd);
        let k = g.rope(k, cos.clone(), sin.clone(), hd);
        let a = g.attention(q, k, v, self.cfg.heads, layout.clone());
        let o = g.matmul(a, pv[b.wo]);
        let x = g.add(x, o);
        let h2 = g.rms_norm(x, pv[b.norm2], 1e-6);
        let f = linear(g, h2, pv[b.w1], pv[b.b1]);
        let f = g.gelu(f);
        let f = linear(g, f, pv[b.w2], pv[b.b2]);
        g.add(x, f)
    }

    pub(crate) fn mlp_head(&self, g: &mut Graph<S>, pv: &[Var], h: &MlpHeadIds, x: Var) -> Var {
        let y = linear(g, x, pv[h.w1], pv[h.b1]);
        let y = g.gelu(y);
        linear(g, y, pv[h.w2], pv[h.b2])
    }

    /// Backbone plus heads.
    pub fn forward_graph(&self, g: &mut Graph<S>, pv: &[Var], prep: &Prepared<S>) -> Result<HeadVars> {
        let ids = &self.ids;
        let mut x = self.embed(g, pv, prep);
        for l in 0..self.cfg.layers {
            x = self.block(g, pv, l, x, &prep.cos, &prep.sin, &prep.layout);
            if !g.value(x).all_finite() {
                return Err(ModelError::NonFinite { layer: l });
            }
        }
        let hidden = g.rms_norm(x, pv[ids.final_norm], 1e-6);
        let lm_h = g.gather_rows(hidden, prep.lm_rows.clone());
        let lm = linear(g, lm_h, pv[ids.lm_w], pv[ids.lm_b]);
        let b = self.cfg.bins;
        let ch = g.gather_rows(hidden, prep.coord_rows.clone());
        let coord = self.mlp_head(g, pv, &ids.coord_head, ch);
        let coord = g.reshape(coord, 2 * prep.coord_rows.len(), b);
        let sh = g.gather_rows(hidden, prep.size_rows.clone());
        let size = self.mlp_head(g, pv, &ids.size_head, sh);
        let size = g.reshape(size, 2 * prep.size_rows.len(), b);
        let sq = g.gather_rows(hidden, prep.seg_rows.clone());
        let seg_query = linear(g, sq, pv[ids.seg_w], pv[ids.seg_b]);
        let v_out = g.gather_rows(hidden, prep.image_rows.clone());
        Ok(HeadVars { hidden, lm, coord, size, seg_query, v_out })
    }

    /// Mask logits at image resolution for every `<seg>` row, instance-major.
    /// `images[s]` is the image of sample `s`.
    pub fn mask_logits_graph(
        &self,
        g: &mut Graph<S>,
        pv: &[Var],
        prep: &Prepared<S>,
        heads: &HeadVars,
        images: &[&RgbImage],
        factor: usize,
    ) -> Result<Option<Var>> {
        if prep.seg_rows.is_empty() {
            return Ok(None);
        }
        check_factor(factor, self.cfg.patch)?;
        // Only images with at least one instance go through the upsampler.
        let mut used: Vec<usize> = prep.seg_instances.iter().map(|&(s, _)| s).collect();
        used.dedup();
        let vstar = upsample::upsample_graph(self, g, pv, prep, heads.v_out, images, &used, factor)?;
        let mut pieces = Vec::new();
        let mut row = 0;
        for (ui, &s) in used.iter().enumerate() {
            let n = prep.seg_instances[row..].iter().take_while(|x| x.0 == s).count();
            let q = g.slice_rows(heads.seg_query, row, n);
            let v = g.slice_rows(vstar.features, vstar.offsets[ui], vstar.pixels[ui]);
            let m = g.matmul_t(q, false, v, true);
            let m = g.scale(m, 1.0 / (self.cfg.width as f64).sqrt());
            let m = match &vstar.resample[ui] {
                Some(map) => g.resample(m, map.clone()),
                None => m,
            };
            pieces.push(m);
            row += n;
        }
        Ok(Some(g.concat_rows(&pieces)))
    }
}

/// Plain-value head outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct HeadOutputs<S: Scalar> {
    pub hidden: Tensor<S>,
    pub lm: Tensor<S>,
    pub coord: Tensor<S>,
    pub size: Tensor<S>,
    pub seg_query: Tensor<S>,
    pub v_out: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    /// Forward pass over one packed batch without gradient tracking.
    pub fn forward(&self, samples: &[Sample<'_>], mode: MaskMode) -> Result<HeadOutputs<S>> {
        let prep = self.prepare(samples, mode)?;
        let mut g = Graph::new();
        let pv = self.bind_frozen(&mut g);
        let h = self.forward_graph(&mut g, &pv, &prep)?;
        Ok(HeadOutputs {
            hidden: g.value(h.hidden).clone(),
            lm: g.value(h.lm).clone(),
            coord: g.value(h.coord).clone(),
            size: g.value(h.size).clone(),
            seg_query: g.value(h.seg_query).clone(),
            v_out: g.value(h.v_out).clone(),
        })
    }
}
