//! Grammar-constrained autoregressive decoding with a key/value cache.
//!
//! Appending rows never changes earlier rows (image rows only see image
//! rows, everything else is causal), so caching per-layer keys and values
//! is exact. Each prompt is decoded in its own `image + prompt` stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::evalkit::{InstanceRecord, PredLine};
use crate::geometry::{dequantize_coord, dequantize_size, rle_encode, BinaryMask, Center, RgbImage, Size2D};
use crate::seqformat::{attends, AttentionSpec, BlockId, MaskMode, Role, Special, TokenId};
use crate::tensor::Tensor;

use super::{check_factor, linear, Model, ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub lang: f64,
    pub coord: f64,
    pub size: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { lang: 0.7, coord: 0.7, size: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub temps: Temperatures,
    pub max_instances: usize,
    pub boxes_only: bool,
    pub upsample_factor: usize,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temps: Temperatures::default(),
            max_instances: 100,
            boxes_only: false,
            upsample_factor: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedInstance {
    pub center: Center,
    pub size: Size2D,
    pub mask: Option<BinaryMask>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPrompt {
    pub prompt: String,
    pub present: bool,
    pub presence_prob: f64,
    pub instances: Vec<DecodedInstance>,
    /// Set when `max_instances` cut the stream before `<eoq>`.
    pub truncated: bool,
    /// Emitted stream after the image, for grammar checks.
    pub tokens: Vec<TokenId>,
}

#[derive(Clone)]
struct Cache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    spec: AttentionSpec,
}

impl Cache {
    fn len(&self) -> usize {
        self.spec.roles.len()
    }
}

struct Row {
    embed: Vec<f32>,
    role: Role,
    block: BlockId,
    t: f64,
    grid: Option<[f64; 2]>,
}

/// Draws an index from `logits` restricted to `allowed`; zero temperature
/// or greedy mode takes the arg max (lowest index on ties).
fn pick(logits: &[f32], allowed: &[usize], temp: f64, greedy: bool, rng: &mut ChaCha8Rng) -> (usize, Vec<f64>) {
    let mx = allowed.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = {
        let e: Vec<f64> = allowed.iter().map(|&i| (logits[i] as f64 - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    };
    let argmax = || {
        let mut best = 0;
        for k in 1..allowed.len() {
            if logits[allowed[k]] > logits[allowed[best]] {
                best = k;
            }
        }
        best
    };
    if greedy || temp <= 0.0 {
        return (allowed[argmax()], probs);
    }
    let scaled: Vec<f64> = allowed.iter().map(|&i| ((logits[i] as f64 - mx) / temp).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in scaled.iter().enumerate() {
        if u < *w {
            return (allowed[k], probs);
        }
        u -= w;
    }
    (allowed[argmax()], probs)
}

pub struct Decoder<'m> {
    model: &'m Model<f32>,
    g: Graph<f32>,
    pv: Vec<Var>,
    base: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model<f32>) -> Self {
        let mut g = Graph::new();
        let pv = model.bind_frozen(&mut g);
        let base = g.len();
        Self { model, g, pv, base }
    }

    fn empty_cache(&self) -> Cache {
        let l = self.model.cfg.layers;
        Cache {
            k: vec![Vec::new(); l],
            v: vec![Vec::new(); l],
            spec: AttentionSpec { sample: Vec::new(), roles: Vec::new(), blocks: Vec::new(), mode: MaskMode::QueryMasked },
        }
    }

    /// Runs new rows through every layer, extending the cache; returns the
    /// final-norm hidden states of the new rows.
    fn step(&mut self, cache: &mut Cache, rows: &[Row]) -> Tensor<f32> {
        let m = self.model;
        let d = m.cfg.width;
        let hd = m.cfg.head_dim();
        let heads = m.cfg.heads;
        let n = rows.len();
        let start = cache.len();
        let mut cos = Vec::with_capacity(n * hd / 2);
        let mut sin = Vec::with_capacity(n * hd / 2);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            for a in m.rope.angles(r.t, r.grid) {
                let (s, c) = a.sin_cos();
                cos.push(c as f32);
                sin.push(s as f32);
            }
            data.extend_from_slice(&r.embed);
            cache.spec.sample.push(0);
            cache.spec.roles.push(r.role);
            cache.spec.blocks.push(r.block);
        }
        let (cos, sin) = (std::sync::Arc::new(cos), std::sync::Arc::new(sin));
        let g = &mut self.g;
        let pv = &self.pv;
        let mut x = g.constant(Tensor::from_vec(n, d, data));
        let scale = 1.0 / (hd as f32).sqrt();
        for l in 0..m.cfg.layers {
            let b = &m.ids.blocks[l];
            let h = g.rms_norm(x, pv[b.norm1], 1e-6);
            let q = g.matmul(h, pv[b.wq]);
            let k = g.matmul(h, pv[b.wk]);
            let v = g.matmul(h, pv[b.wv]);
            let q = g.rope(q, cos.clone(), sin.clone(), hd);
            let k = g.rope(k, cos.clone(), sin.clone(), hd);
            cache.k[l].extend_from_slice(&g.value(k).data);
            cache.v[l].extend_from_slice(&g.value(v).data);
            let total = start + n;
            let qv = g.value(q);
            let (kc, vc) = (&cache.k[l], &cache.v[l]);
            let mut out = vec![0f32; n * d];
            let mut w = vec![0f32; total];
            for i in 0..n {
                let gi = start + i;
                let visible: Vec<usize> = (0..total).filter(|&j| attends(&cache.spec, gi, j).unwrap_or(false)).collect();
                for hh in 0..heads {
                    let qo = &qv.data[i * d + hh * hd..i * d + (hh + 1) * hd];
                    let mut mx = f32::NEG_INFINITY;
                    for &j in &visible {
                        let ko = &kc[j * d + hh * hd..j * d + (hh + 1) * hd];
                        let s: f32 = qo.iter().zip(ko).map(|(a, b)| a * b).sum::<f32>() * scale;
                        w[j] = s;
                        mx = mx.max(s);
                    }
                    let mut sum = 0f32;
                    for &j in &visible {
                        w[j] = (w[j] - mx).exp();
                        sum += w[j];
                    }
                    let o = &mut out[i * d + hh * hd..i * d + (hh + 1) * hd];
                    for &j in &visible {
                        let p = w[j] / sum;
                        for (oo, &vv) in o.iter_mut().zip(&vc[j * d + hh * hd..j * d + (hh + 1) * hd]) {
                            *oo += p * vv;
                        }
                    }
                }
            }
            let a = g.constant(Tensor::from_vec(n, d, out));
            let o = g.matmul(a, pv[b.wo]);
            x = g.add(x, o);
            let h2 = g.rms_norm(x, pv[b.norm2], 1e-6);
            let f = linear(g, h2, pv[b.w1], pv[b.b1]);
            let f = g.gelu(f);
            let f = linear(g, f, pv[b.w2], pv[b.b2]);
            x = g.add(x, f);
        }
        let hidden = g.rms_norm(x, pv[m.ids.final_norm], 1e-6);
        let out = g.value(hidden).clone();
        g.truncate(self.base);
        out
    }

    fn apply<F>(&mut self, input: Tensor<f32>, f: F) -> Tensor<f32>
    where
        F: FnOnce(&Model<f32>, &mut Graph<f32>, &[Var], Var) -> Var,
    {
        let x = self.g.constant(input);
        let y = f(self.model, &mut self.g, &self.pv, x);
        let out = self.g.value(y).clone();
        self.g.truncate(self.base);
        out
    }

    fn token_row(&self, id: TokenId) -> Vec<f32> {
        self.model.params[self.model.ids.tok_emb].row(id as usize).to_vec()
    }

    fn inject(&mut self, point: [f64; 2], coord: bool) -> Vec<f32> {
        let f = self.model.fourier_rows(&[point]);
        let ids = &self.model.ids;
        let (w, b) = if coord { (ids.coord_proj_w, ids.coord_proj_b) } else { (ids.size_proj_w, ids.size_proj_b) };
        self.apply(f, |_, g, pv, x| linear(g, x, pv[w], pv[b])).data
    }

    fn lm_logits(&mut self, h: &[f32]) -> Vec<f32> {
        let (w, b) = (self.model.ids.lm_w, self.model.ids.lm_b);
        self.apply(Tensor::from_vec(1, h.len(), h.to_vec()), |_, g, pv, x| linear(g, x, pv[w], pv[b])).data
    }

    fn box_logits(&mut self, h: &[f32], coord: bool) -> Vec<f32> {
        self.apply(Tensor::from_vec(1, h.len(), h.to_vec()), |m, g, pv, x| {
            let ids = if coord { &m.ids.coord_head } else { &m.ids.size_head };
            m.mlp_head(g, pv, ids, x)
        })
        .data
    }

    fn seg_query(&mut self, h: &[f32]) -> Tensor<f32> {
        let (w, b) = (self.model.ids.seg_w, self.model.ids.seg_b);
        self.apply(Tensor::from_vec(1, h.len(), h.to_vec()), |_, g, pv, x| linear(g, x, pv[w], pv[b]))
    }

    /// Encodes the image prefix once; returns its cache and `V_out`.
    fn encode_image(&mut self, image: &RgbImage) -> Result<(Cache, Tensor<f32>)> {
        let m = self.model;
        let p = m.cfg.patch;
        if image.height % p != 0 || image.width % p != 0 || image.height == 0 || image.width == 0 {
            return Err(ModelError::ImageShape { got: (image.height, image.width), expected: (image.height / p * p, image.width / p * p) });
        }
        let (gr, gc) = (image.height / p, image.width / p);
        let patches = super::patch_vectors::<f32>(image, p);
        let mut pts = Vec::with_capacity(gr * gc);
        for r in 0..gr {
            for c in 0..gc {
                pts.push([(c as f64 + 0.5) / gc as f64, (r as f64 + 0.5) / gr as f64]);
            }
        }
        let pf = m.fourier_rows(&pts);
        let emb = {
            let e = m.embed_rows(&mut self.g, &self.pv, &patches, &pf);
            let v = self.g.value(e).clone();
            self.g.truncate(self.base);
            v
        };
        let rows: Vec<Row> = (0..gr * gc)
            .map(|i| Row {
                embed: emb.row(i).to_vec(),
                role: Role::Image,
                block: BlockId::IMAGE,
                t: i as f64,
                grid: Some([(i % gc) as f64, (i / gc) as f64]),
            })
            .collect();
        let mut cache = self.empty_cache();
        let v_out = self.step(&mut cache, &rows);
        Ok((cache, v_out))
    }

    /// Prediction lines for one image: candidate 0 decoded with `opts`, then
    /// `samples` sampled candidates with seeds `opts.seed + 1..`.
    pub fn predict_lines(&mut self, image_id: &str, image: &RgbImage, prompts: &[&str], opts: &DecodeOptions, samples: usize) -> Result<Vec<PredLine>> {
        let mut out = Vec::with_capacity(prompts.len() * (samples + 1));
        for c in 0..=samples {
            let o = if c == 0 { opts.clone() } else { DecodeOptions { mode: DecodeMode::Sample, seed: opts.seed.wrapping_add(c as u64), ..opts.clone() } };
            for d in self.decode(image, prompts, &o)? {
                out.push(PredLine { image_id: image_id.to_string(), phrase: d.prompt.clone(), candidate: c, instances: d.instances.iter().map(instance_record).collect() });
            }
        }
        Ok(out)
    }

    /// Decodes each prompt independently against the same image.
    pub fn decode(&mut self, image: &RgbImage, prompts: &[&str], opts: &DecodeOptions) -> Result<Vec<DecodedPrompt>> {
        if !opts.boxes_only {
            check_factor(opts.upsample_factor, self.model.cfg.patch)?;
        }
        let vocab = self.model.vocab.clone();
        let (image_cache, v_out) = self.encode_image(image)?;
        let n_img = image_cache.len();
        let mut vstar: Option<Tensor<f32>> = None;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let greedy = opts.mode == DecodeMode::Greedy;
        let bins = self.model.cfg.bins;
        let q = self.model.cfg.quant();
        let sp = |s: Special| vocab.special(s);
        let p = self.model.cfg.patch;
        let f = opts.upsample_factor;
        let src = (image.height / p * f, image.width / p * f);
        let mut out = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            let ids = vocab.encode_text(prompt).map_err(|e| ModelError::Config(e.to_string()))?;
            let mut cache = image_cache.clone();
            let block = BlockId(1);
            let mut t = n_img as f64;
            let mut tokens = ids.clone();
            let mut rows = Vec::with_capacity(ids.len());
            for &id in &ids {
                rows.push(Row { embed: self.token_row(id), role: Role::Text, block, t, grid: None });
                t += 1.0;
            }
            let h = self.step(&mut cache, &rows);
            let last = h.row(h.rows - 1).to_vec();
            let logits = self.lm_logits(&last);
            let (choice, probs) = pick(&logits, &[sp(Special::Present) as usize, sp(Special::Absent) as usize], opts.temps.lang, greedy, &mut rng);
            let presence_prob = probs[0];
            let mut result = DecodedPrompt {
                prompt: prompt.to_string(),
                present: choice == sp(Special::Present) as usize,
                presence_prob,
                instances: Vec::new(),
                truncated: false,
                tokens: Vec::new(),
            };
            if !result.present {
                tokens.extend([sp(Special::Absent), sp(Special::Eoq)]);
                result.tokens = tokens;
                out.push(result);
                continue;
            }
            tokens.push(sp(Special::Present));
            let mut feed = vec![Row { embed: self.token_row(sp(Special::Present)), role: Role::Control, block, t, grid: None }];
            t += 1.0;
            let mut cont_prob = 1.0;
            loop {
                if result.instances.len() >= opts.max_instances {
                    result.truncated = true;
                    break;
                }
                feed.push(Row { embed: self.token_row(sp(Special::Coord)), role: Role::Coord, block, t, grid: None });
                t += 1.0;
                tokens.push(sp(Special::Coord));
                let h = self.step(&mut cache, &feed);
                let hc = h.row(h.rows - 1).to_vec();
                let cl = self.box_logits(&hc, true);
                let all: Vec<usize> = (0..bins).collect();
                let (bx, _) = pick(&cl[..bins], &all, opts.temps.coord, greedy, &mut rng);
                let (by, _) = pick(&cl[bins..], &all, opts.temps.coord, greedy, &mut rng);
                let center = dequantize_coord([bx as u32, by as u32], q).expect("bin in range");
                let emb = self.inject([center.x, center.y], true);
                let h = self.step(&mut cache, &[Row { embed: emb, role: Role::Size, block, t, grid: None }]);
                t += 1.0;
                tokens.push(sp(Special::Size));
                let hs = h.row(0).to_vec();
                let sl = self.box_logits(&hs, false);
                let (sx, _) = pick(&sl[..bins], &all, opts.temps.size, greedy, &mut rng);
                let (sy, _) = pick(&sl[bins..], &all, opts.temps.size, greedy, &mut rng);
                let size = dequantize_size([sx as u32, sy as u32], q).expect("bin in range");
                let emb = self.inject([size.w, size.h], false);
                let h = self.step(&mut cache, &[Row { embed: emb, role: Role::Seg, block, t, grid: None }]);
                t += 1.0;
                tokens.push(sp(Special::Seg));
                let hseg = h.row(0).to_vec();
                let mask = if opts.boxes_only {
                    None
                } else {
                    if vstar.is_none() {
                        vstar = Some(self.model.upsample_features(&v_out, image, f)?);
                    }
                    let sq = self.seg_query(&hseg);
                    let logits = self.model.predict_mask(&sq, vstar.as_ref().unwrap(), src, (image.height, image.width));
                    let bits = logits.data.iter().map(|&x| x > 0.0).collect();
                    Some(BinaryMask::new(image.height, image.width, bits).expect("mask dims"))
                };
                result.instances.push(DecodedInstance { center, size, mask, score: presence_prob * cont_prob });
                let ll = self.lm_logits(&hseg);
                let (next, probs) = pick(&ll, &[sp(Special::Coord) as usize, sp(Special::Eoq) as usize], opts.temps.lang, greedy, &mut rng);
                if next == sp(Special::Eoq) as usize {
                    break;
                }
                cont_prob = probs[0];
                feed = Vec::new();
            }
            if !result.truncated {
                tokens.push(sp(Special::Eoq));
            }
            result.tokens = tokens;
            out.push(result);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Square `side x side` regardless of aspect ratio.
    Fixed,
    /// Longer side to `side`, shorter side scaled and rounded to the patch.
    Adaptive,
}

/// Nearest-neighbor resize to model input dimensions.
pub fn instance_record(d: &DecodedInstance) -> InstanceRecord {
    InstanceRecord { bbox: [d.center.x, d.center.y, d.size.w, d.size.h], mask: d.mask.as_ref().map(rle_encode), score: Some(d.score) }
}

pub fn resize_for_model(image: &RgbImage, mode: ResizeMode, side: usize, patch: usize) -> RgbImage {
    let (h, w) = match mode {
        ResizeMode::Fixed => (side, side),
        ResizeMode::Adaptive => {
            let long = image.height.max(image.width) as f64;
            let snap = |x: usize| ((x as f64 * side as f64 / long / patch as f64).round() as usize).max(1) * patch;
            (snap(image.height), snap(image.width))
        }
    };
    resize_nearest(image, h, w)
}

pub fn resize_nearest(image: &RgbImage, h: usize, w: usize) -> RgbImage {
    if (image.height, image.width) == (h, w) {
        return image.clone();
    }
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for r in 0..h {
        let sr = (r * image.height) / h;
        for c in 0..w {
            let sc = (c * image.width) / w;
            out.put(r, c, image.pixel(sr, sc));
        }
    }
    out
}

pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    if (mask.height(), mask.width()) == (h, w) {
        return mask.clone();
    }
    let mut out = BinaryMask::zeros(h, w);
    for r in 0..h {
        let sr = (r * mask.height()) / h;
        for c in 0..w {
            out.set(r, c, mask.get(sr, (c * mask.width()) / w));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Instance;
    use crate::model::{ModelConfig, Sample};
    use crate::seqformat::{serialize_sample, BlockPositions, QueryInput, SerializeOptions};

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 2, width: 16, heads: 2, bins: 32, image_size: 16, patch: 8, upsample_factor: 2, pixel_hidden: 4, key_dim: 4, ..Default::default() }
    }

    fn image() -> RgbImage {
        let mut img = RgbImage::filled(16, 16, [20, 40, 60]);
        for r in 3..9 {
            for c in 5..12 {
                img.put(r, c, [250, 10, 10]);
            }
        }
        img
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let img = image();
        let v = m.vocab.clone();
        let inst = Instance { center: Center { x: 0.5, y: 0.4 }, size: Size2D { w: 0.4, h: 0.3 }, mask: None };
        let opts = SerializeOptions { positions: BlockPositions::RestartPerBlock, ..Default::default() };
        let seq = serialize_sample((2, 2), &[QueryInput { prompt: "red", instances: &[inst.clone()] }], &v, &opts).unwrap();
        let full = m.forward(&[Sample { image: &img, seq: &seq }], MaskMode::QueryMasked).unwrap();

        let mut dec = Decoder::new(&m);
        let (mut cache, v_out) = dec.encode_image(&img).unwrap();
        for r in 0..4 {
            for c in 0..16 {
                assert!((v_out.at(r, c) - full.hidden.at(r, c)).abs() < 1e-4);
            }
        }
        // Feed the remaining rows one at a time, with the same injections.
        let mut prev_role = None;
        for i in 4..seq.len() - 1 {
            let embed = match prev_role {
                Some(Role::Coord) => dec.inject([inst.center.x, inst.center.y], true),
                Some(Role::Size) => dec.inject([inst.size.w, inst.size.h], false),
                _ => dec.token_row(seq.tokens[i]),
            };
            let row = Row { embed, role: seq.roles[i], block: seq.blocks[i], t: seq.positions[i] as f64, grid: None };
            let h = dec.step(&mut cache, &[row]);
            for c in 0..16 {
                assert!((h.at(0, c) - full.hidden.at(i, c)).abs() < 1e-4, "row {i} col {c}");
            }
            prev_role = Some(seq.roles[i]);
        }
    }

    #[test]
    fn greedy_is_deterministic_and_grammatical() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let img = image();
        let mut dec = Decoder::new(&m);
        let opts = DecodeOptions { max_instances: 3, upsample_factor: 2, ..Default::default() };
        let a = dec.decode(&img, &["red", "blue"], &opts).unwrap();
        let b = dec.decode(&img, &["red", "blue"], &opts).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.instances.len() <= 3);
            if p.present {
                for inst in &p.instances {
                    assert_eq!(inst.mask.as_ref().unwrap().height(), 16);
                }
            }
        }
    }

    #[test]
    fn zero_temperature_sampling_equals_greedy() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let img = image();
        let mut dec = Decoder::new(&m);
        let greedy = DecodeOptions { max_instances: 2, upsample_factor: 2, ..Default::default() };
        let cold = DecodeOptions { mode: DecodeMode::Sample, temps: Temperatures { lang: 0.0, coord: 0.0, size: 0.0 }, seed: 9, ..greedy.clone() };
        assert_eq!(dec.decode(&img, &["red"], &greedy).unwrap(), dec.decode(&img, &["red"], &cold).unwrap());
    }

    #[test]
    fn boxes_only_skips_masks() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let mut dec = Decoder::new(&m);
        let mut m2 = m.clone();
        // Force presence so at least one instance is decoded.
        let present = m2.vocab.special(Special::Present) as usize;
        let b = m2.ids.lm_b;
        m2.params[b].data[present] = 50.0;
        let mut dec2 = Decoder::new(&m2);
        let opts = DecodeOptions { boxes_only: true, max_instances: 2, ..Default::default() };
        let out = dec2.decode(&image(), &["red"], &opts).unwrap();
        assert!(out[0].present && !out[0].instances.is_empty());
        assert!(out[0].instances.iter().all(|i| i.mask.is_none()));
        let _ = dec.decode(&image(), &["red"], &opts).unwrap();
    }

    #[test]
    fn max_instances_truncates_with_flag() {
        let mut m = Model::<f32>::new(tiny()).unwrap();
        let present = m.vocab.special(Special::Present) as usize;
        let coord = m.vocab.special(Special::Coord) as usize;
        let b = m.ids.lm_b;
        m.params[b].data[present] = 50.0;
        m.params[b].data[coord] = 50.0;
        let mut dec = Decoder::new(&m);
        let opts = DecodeOptions { boxes_only: true, max_instances: 4, ..Default::default() };
        let out = dec.decode(&image(), &["red"], &opts).unwrap();
        assert!(out[0].truncated);
        assert_eq!(out[0].instances.len(), 4);
    }

    #[test]
    fn resize_modes() {
        let img = RgbImage::filled(30, 20, [1, 2, 3]);
        let f = resize_for_model(&img, ResizeMode::Fixed, 64, 8);
        assert_eq!((f.height, f.width), (64, 64));
        let a = resize_for_model(&img, ResizeMode::Adaptive, 64, 8);
        assert_eq!((a.height, a.width), (40, 64));
    }
}
