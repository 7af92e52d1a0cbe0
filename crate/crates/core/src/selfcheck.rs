//! Numerical self-verification: finite-difference gradients, rank-partition
//! invariance, packed vs. per-sample forward, and the matcher oracle.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{with_fault, Fault};
use crate::evalkit::{brute_force_match, hungarian_match};
use crate::geometry::{BinaryMask, Instance, RgbImage};
use crate::model::{Model, ModelConfig, Sample};
use crate::seqformat::{serialize_sample, BlockPositions, MaskMode, QueryInput, SerializeOptions, TokenSequence};
use crate::tensor::{Scalar, Tensor};
use crate::training::{objective, teacher_features, LossWeights, Objective, ObjectiveConfig, Terms, TrainItem};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub value: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), passed: value.is_finite() && value < tolerance, value, tolerance }
    }
}

/// Small model and batch shared by the gradient and partition checks.
pub struct Fixture {
    pub model: Model<f64>,
    pub images: Vec<RgbImage>,
    pub seqs: Vec<TokenSequence>,
    pub teachers: Vec<Arc<Tensor<f32>>>,
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig { layers: 2, width: 16, heads: 2, bins: 16, image_size: 32, patch: 8, upsample_factor: 4, pixel_hidden: 4, key_dim: 4, ..Default::default() }
}

fn rect(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize) -> Instance {
    let mut m = BinaryMask::zeros(h, w);
    for r in r0..r0 + rh {
        for c in c0..c0 + rw {
            m.set(r, c, true);
        }
    }
    Instance::from_mask(m).expect("nonempty rectangle")
}

fn noise_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    let data = (0..h * w * 3).map(|_| rng.random::<u8>()).collect();
    RgbImage { width: w, height: h, data }
}

impl Fixture {
    /// `samples` images; even ones carry a two-instance query and an absent
    /// one, odd ones a single-instance query. Two samples hold three
    /// instances.
    pub fn new(samples: usize, seed: u64) -> Self {
        let cfg = tiny_config();
        let model = Model::<f64>::new(cfg.clone()).expect("tiny config");
        let teacher_model = Model::<f32>::new(ModelConfig { init_seed: seed + 1, ..cfg.clone() }).expect("tiny config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        let grid = cfg.grid();
        let opts = SerializeOptions { positions: BlockPositions::RestartPerBlock, raster: cfg.quant(), ..Default::default() };
        let (mut images, mut seqs, mut teachers) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..samples {
            let img = noise_image(&mut rng, s, s);
            let o = rng.random_range(0..4);
            let seq = if i % 2 == 0 {
                let pos = [rect(s, s, 2 + o, 3, 9, 7), rect(s, s, 18, 15 + o, 6, 11)];
                let q = [QueryInput { prompt: "red square", instances: &pos }, QueryInput { prompt: "blue circle", instances: &[] }];
                serialize_sample(grid, &q, &model.vocab, &opts)
            } else {
                let pos = [rect(s, s, 5, 10 + o, 13, 10)];
                serialize_sample(grid, &[QueryInput { prompt: "green", instances: &pos }], &model.vocab, &opts)
            }
            .expect("fixture sequence");
            teachers.push(Arc::new(teacher_features(&teacher_model, &img).expect("teacher")));
            images.push(img);
            seqs.push(seq);
        }
        Self { model, images, seqs, teachers }
    }

    pub fn items(&self) -> Vec<TrainItem<'_>> {
        self.images.iter().zip(&self.seqs).zip(&self.teachers).map(|((image, seq), t)| TrainItem { image, seq: seq.clone(), teacher: Some(t.clone()) }).collect()
    }
}

pub const COMPONENTS: [&str; 7] = ["lm", "coord", "size", "seg.focal", "seg.dice", "gram", "total"];

fn component_config(c: usize, base: &LossWeights, with_grad: bool) -> ObjectiveConfig {
    let (weights, terms) = match c {
        0..=2 => (*base, Terms::only(c)),
        3 => (LossWeights { alpha_dice: 0.0, ..*base }, Terms::only(3)),
        4 => (LossWeights { beta_focal: 0.0, ..*base }, Terms::only(3)),
        5 => (*base, Terms::only(4)),
        _ => (*base, Terms::total(base)),
    };
    ObjectiveConfig { weights, terms, mode: MaskMode::QueryMasked, upsample_factor: tiny_config().upsample_factor, with_grad }
}

fn component_values<S: Scalar>(o: &Objective<S>, w: &LossWeights) -> [f64; 7] {
    let p = o.parts;
    [p.lm, p.coord, p.size, o.seg_split[0], o.seg_split[1], p.gram, p.lm + p.coord + p.size + p.seg + w.lambda_gram * p.gram]
}

/// Analytic gradients of every component against central differences over
/// every parameter, in double precision. Reports the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-6)` per component.
pub fn gradient_check(fault: Option<Fault>) -> Vec<CheckResult> {
    let fx = Fixture::new(2, 3);
    let items = fx.items();
    let ranks = [items];
    let w = LossWeights::default();
    let analytic: Vec<Vec<Tensor<f64>>> = (0..COMPONENTS.len())
        .map(|c| {
            let run = || objective(&fx.model, &ranks, &component_config(c, &w, true)).expect("objective").grads;
            match fault {
                Some(f) => with_fault(f, run),
                None => run(),
            }
        })
        .collect();
    let mut model = fx.model.clone();
    let eval_cfg = component_config(6, &w, false);
    let h = 1e-5;
    let mut worst = [0.0f64; 7];
    for i in 0..model.params.len() {
        for k in 0..model.params[i].data.len() {
            let x0 = model.params[i].data[k];
            model.params[i].data[k] = x0 + h;
            let plus = component_values(&objective(&model, &ranks, &eval_cfg).expect("objective"), &w);
            model.params[i].data[k] = x0 - h;
            let minus = component_values(&objective(&model, &ranks, &eval_cfg).expect("objective"), &w);
            model.params[i].data[k] = x0;
            for c in 0..COMPONENTS.len() {
                let n = (plus[c] - minus[c]) / (2.0 * h);
                let a = analytic[c][i].data[k];
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                worst[c] = worst[c].max(if rel.is_nan() { f64::INFINITY } else { rel });
            }
        }
    }
    COMPONENTS.iter().zip(worst).map(|(name, e)| CheckResult::new(format!("grad.{name}"), e, 1e-3)).collect()
}

/// Loss and gradients over R in {1, 2, 4} contiguous splits of one batch.
/// Reports the largest absolute deviation from the single-rank result.
pub fn partition_check(fault: Option<Fault>) -> CheckResult {
    let fx = Fixture::new(8, 11);
    let w = LossWeights::default();
    let cfg = component_config(6, &w, true);
    let run = |r: usize| {
        let items = fx.items();
        let per = items.len() / r;
        let mut ranks: Vec<Vec<TrainItem<'_>>> = vec![Vec::new(); r];
        for (i, it) in items.into_iter().enumerate() {
            ranks[i / per].push(it);
        }
        let go = || objective(&fx.model, &ranks, &cfg).expect("objective");
        match fault {
            Some(f) => with_fault(f, go),
            None => go(),
        }
    };
    let base = run(1);
    let mut dev = 0.0f64;
    for r in [2, 4] {
        let o = run(r);
        dev = dev.max((o.loss - base.loss).abs());
        for (a, b) in o.grads.iter().zip(&base.grads) {
            for (x, y) in a.data.iter().zip(&b.data) {
                dev = dev.max((x - y).abs());
            }
        }
    }
    CheckResult::new("partition", dev, 1e-10)
}

fn random_sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig, vocab: &crate::seqformat::Vocab, positions: BlockPositions) -> TokenSequence {
    let s = cfg.image_size;
    let words = ["red", "blue circle", "green square", "leftmost yellow triangle"];
    let nq = rng.random_range(1..=3);
    let mut owned: Vec<(String, Vec<Instance>)> = Vec::new();
    for _ in 0..nq {
        let n = rng.random_range(0..=3);
        let insts = (0..n)
            .map(|_| {
                let (rh, rw) = (rng.random_range(3..16), rng.random_range(3..16));
                rect(s, s, rng.random_range(0..s - rh), rng.random_range(0..s - rw), rh, rw)
            })
            .collect();
        owned.push((words[rng.random_range(0..words.len())].to_string(), insts));
    }
    let q: Vec<QueryInput<'_>> = owned.iter().map(|(p, i)| QueryInput { prompt: p, instances: i }).collect();
    let opts = SerializeOptions { positions, raster: cfg.quant(), ..Default::default() };
    serialize_sample(cfg.grid(), &q, vocab, &opts).expect("random sequence")
}

/// Packed forward against one forward per sample on random packings, in
/// single precision. Reports the largest absolute difference over all head
/// outputs.
pub fn packing_check(trials: usize, seed: u64) -> CheckResult {
    let cfg = ModelConfig { image_size: 32, ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg.clone()).expect("default config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = 0.0f64;
    for _ in 0..trials {
        let mode = if rng.random_bool(0.5) { MaskMode::FullAr } else { MaskMode::QueryMasked };
        let positions = if mode == MaskMode::QueryMasked && rng.random_bool(0.5) { BlockPositions::RestartPerBlock } else { BlockPositions::Sequential };
        let n = rng.random_range(1..=4);
        let images: Vec<RgbImage> = (0..n).map(|_| noise_image(&mut rng, cfg.image_size, cfg.image_size)).collect();
        let seqs: Vec<TokenSequence> = (0..n).map(|_| random_sequence(&mut rng, &cfg, &model.vocab, positions)).collect();
        let samples: Vec<Sample<'_>> = images.iter().zip(&seqs).map(|(image, seq)| Sample { image, seq }).collect();
        let packed = model.forward(&samples, mode).expect("packed forward");
        let singles: Vec<_> = samples.iter().map(|s| model.forward(std::slice::from_ref(s), mode).expect("forward")).collect();
        let cat = |f: &dyn Fn(&crate::model::HeadOutputs<f32>) -> &Tensor<f32>| -> Vec<f32> { singles.iter().flat_map(|o| f(o).data.iter().copied()).collect() };
        let pairs: [(&Tensor<f32>, Vec<f32>); 6] = [
            (&packed.hidden, cat(&|o| &o.hidden)),
            (&packed.lm, cat(&|o| &o.lm)),
            (&packed.coord, cat(&|o| &o.coord)),
            (&packed.size, cat(&|o| &o.size)),
            (&packed.seg_query, cat(&|o| &o.seg_query)),
            (&packed.v_out, cat(&|o| &o.v_out)),
        ];
        for (p, s) in pairs {
            if p.data.len() != s.len() {
                return CheckResult::new("packing", f64::INFINITY, 1e-5);
            }
            for (a, b) in p.data.iter().zip(&s) {
                dev = dev.max((a - b).abs() as f64);
            }
        }
    }
    CheckResult::new("packing", dev, 1e-5)
}

/// Hungarian matching against exhaustive search on random IoU matrices with
/// `min(N, M) <= 6`. Reports the number of disagreements.
pub fn matcher_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..trials {
        let (mut n, mut m) = (rng.random_range(0..=8), rng.random_range(0..=8));
        if n.min(m) > 6 {
            if rng.random_bool(0.5) {
                n = 6;
            } else {
                m = 6;
            }
        }
        let w: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random::<f64>()).collect()).collect();
        if hungarian_match(&w).ok() != Some(brute_force_match(&w)) {
            mismatches += 1;
        }
    }
    CheckResult::new("matcher", mismatches as f64, 0.5)
}

/// Every check; `fault` corrupts the analytic gradients.
pub fn run_all(fault: Option<Fault>) -> Vec<CheckResult> {
    let mut out = gradient_check(fault);
    out.push(partition_check(fault));
    out.push(packing_check(100, 5));
    out.push(matcher_check(500, 7));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matcher_and_packing_pass() {
        assert!(matcher_check(50, 1).passed);
        let r = packing_check(5, 2);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn partition_is_invariant() {
        let r = partition_check(None);
        assert!(r.passed, "{r:?}");
    }
}
