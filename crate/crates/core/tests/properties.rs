use proptest::prelude::*;

use unidense::evalkit::{brute_force_match, evaluate, evaluate_pass_at_k, hungarian_match, pmf1, EvalRecord, InstanceRecord};
use unidense::geometry::*;
use unidense::posenc::{apply_ggrope_2d, apply_rope_1d, apply_rope_3d, FourierEncoder, RopeConfig};
use unidense::seqformat::*;
use unidense::synthdata::{evaluate_prompt, generate_queries, generate_scene, Level, Polarity, SceneSpec, TRAIN_LEVELS};

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap()))
}

fn pair_masks() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=16usize, 1..=16usize).prop_flat_map(|(h, w)| {
        let v = proptest::collection::vec(any::<bool>(), h * w);
        (v.clone(), v).prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    })
}

fn rect(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize) -> Instance {
    let mut m = BinaryMask::zeros(h, w);
    for r in r0..(r0 + rh).min(h) {
        for c in c0..(c0 + rw).min(w) {
            m.set(r, c, true);
        }
    }
    Instance::from_mask(m).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bin_roundtrip_is_identity(bins in prop::sample::select(vec![2usize, 16, 1024]), a in 0u32..1024, b in 0u32..1024) {
        let q = QuantConfig::new(bins).unwrap();
        let idx = [a % bins as u32, b % bins as u32];
        prop_assert_eq!(quantize_coord(dequantize_coord(idx, q).unwrap(), q).unwrap(), idx);
        prop_assert_eq!(quantize_size(dequantize_size(idx, q).unwrap(), q).unwrap(), idx);
    }

    #[test]
    fn coord_quantization_error_bounded(bins in 2usize..2048, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let q = QuantConfig::new(bins).unwrap();
        let c = Center::new(x, y).unwrap();
        let back = dequantize_coord(quantize_coord(c, q).unwrap(), q).unwrap();
        let tol = 0.5 / (bins as f64 - 1.0) + 1e-12;
        prop_assert!((back.x - x).abs() <= tol && (back.y - y).abs() <= tol);
    }

    #[test]
    fn mask_iou_bounds_and_symmetry((a, b) in pair_masks()) {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        if !a.is_empty() {
            prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn rle_roundtrip(m in mask_strategy(64)) {
        let rle = rle_encode(&m);
        prop_assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), m.height() * m.width());
        prop_assert_eq!(rle_decode(&rle).unwrap(), m);
    }

    #[test]
    fn box_corners_in_unit_square(x in 0.0f64..=1.0, y in 0.0f64..=1.0, w in 0.0f64..=1.0, h in 0.0f64..=1.0) {
        let b = box_corners(Center::new(x, y).unwrap(), Size2D::new(w, h).unwrap());
        for v in [b.x0, b.y0, b.x1, b.y1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(b.x0 <= b.x1 && b.y0 <= b.y1);
    }

    #[test]
    fn rope_1d_depends_on_offset_only(q in proptest::collection::vec(-1.0f64..1.0, 8), k in proptest::collection::vec(-1.0f64..1.0, 8), t1 in 0.0f64..500.0, t2 in 0.0f64..500.0, s in -200.0f64..200.0) {
        let cfg = RopeConfig::new(16, 10_000.0, 100.0).unwrap();
        let a = dot(&apply_rope_1d(&q, t1, &cfg).unwrap(), &apply_rope_1d(&k, t2, &cfg).unwrap());
        let b = dot(&apply_rope_1d(&q, t1 + s, &cfg).unwrap(), &apply_rope_1d(&k, t2 + s, &cfg).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ggrope_translation_invariant(q in proptest::collection::vec(-1.0f64..1.0, 8), k in proptest::collection::vec(-1.0f64..1.0, 8), p in prop::array::uniform2(0.0f64..32.0), r in prop::array::uniform2(0.0f64..32.0), d in prop::array::uniform2(-16.0f64..16.0)) {
        let cfg = RopeConfig::new(16, 10_000.0, 100.0).unwrap();
        let a = dot(&apply_ggrope_2d(&q, p, &cfg).unwrap(), &apply_ggrope_2d(&k, r, &cfg).unwrap());
        let b = dot(&apply_ggrope_2d(&q, [p[0] + d[0], p[1] + d[1]], &cfg).unwrap(), &apply_ggrope_2d(&k, [r[0] + d[0], r[1] + d[1]], &cfg).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn text_positions_get_no_spatial_rotation(v in proptest::collection::vec(-1.0f64..1.0, 16), t in 0.0f64..100.0) {
        let cfg = RopeConfig::new(16, 10_000.0, 100.0).unwrap();
        let out = apply_rope_3d(&v, t, None, &cfg).unwrap();
        prop_assert_eq!(&out[8..], &v[8..]);
    }

    #[test]
    fn fourier_norm_identity(x in -2.0f64..2.0, y in -2.0f64..2.0, seed in 0u64..100) {
        let e = FourierEncoder::new(32, 10.0, seed).unwrap();
        let g = e.encode([x, y]).unwrap();
        prop_assert!((dot(&g, &g) - 16.0).abs() < 1e-9);
    }

    #[test]
    fn hungarian_matches_brute_force(n in 1usize..=6, m in 1usize..=6, vals in proptest::collection::vec(0.0f64..1.0, 36)) {
        let w: Vec<Vec<f64>> = (0..n).map(|i| (0..m).map(|j| vals[i * 6 + j]).collect()).collect();
        let total = |p: &[(usize, usize)]| p.iter().map(|&(i, j)| w[i][j]).sum::<f64>();
        let h = hungarian_match(&w).unwrap();
        prop_assert_eq!(h.len(), n.min(m));
        prop_assert!((total(&h) - total(&brute_force_match(&w))).abs() < 1e-9);
    }
}

fn record_strategy() -> impl Strategy<Value = EvalRecord> {
    let inst = (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.3, 0.05f64..0.3).prop_map(|(x, y, w, h)| InstanceRecord { bbox: [x, y, w, h], mask: None, score: None });
    let set = proptest::collection::vec(inst, 0..4);
    (proptest::collection::vec(set.clone(), 1..4), set).prop_map(|(candidates, ground_truth)| EvalRecord {
        image_id: "img".into(),
        phrase: "circle".into(),
        split: "s".into(),
        candidates,
        ground_truth,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pmf1_non_increasing_in_threshold(recs in proptest::collection::vec(record_strategy(), 1..8)) {
        let p = pmf1(&recs).unwrap();
        let vals: Vec<f64> = p.per_threshold.iter().flatten().copied().collect();
        for w in vals.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_to_prediction_order(recs in proptest::collection::vec(record_strategy(), 1..8)) {
        let rev: Vec<EvalRecord> = recs.iter().map(|r| {
            let mut r = r.clone();
            for c in &mut r.candidates { c.reverse(); }
            r
        }).collect();
        let (a, b) = (evaluate(&recs).unwrap(), evaluate(&rev).unwrap());
        prop_assert_eq!(a.pmf1_per_threshold, b.pmf1_per_threshold);
        match (a.macro_f1, b.macro_f1) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn pass_at_k_monotone(recs in proptest::collection::vec(record_strategy(), 1..8)) {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=3 {
            let r = evaluate_pass_at_k(&recs, k).unwrap();
            let v = r.macro_f1.unwrap_or(0.0);
            prop_assert!(v >= prev - 1e-12);
            prev = v;
        }
    }
}

fn sample_strategy() -> impl Strategy<Value = Vec<(String, Vec<(usize, usize, usize, usize)>)>> {
    let prompt = prop::sample::select(vec!["circle", "red square", "leftmost triangle", "blue"]).prop_map(String::from);
    let boxes = proptest::collection::vec((0usize..12, 0usize..12, 1usize..5, 1usize..5), 0..4);
    proptest::collection::vec((prompt, boxes), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_predicate_invariants(spec in sample_strategy(), query_masked in any::<bool>()) {
        let insts: Vec<(String, Vec<Instance>)> = spec.iter().map(|(p, b)| (p.clone(), b.iter().map(|&(r, c, h, w)| rect(16, 16, r, c, h, w)).collect())).collect();
        let inputs: Vec<QueryInput> = insts.iter().map(|(p, i)| QueryInput { prompt: p, instances: i }).collect();
        let seq = serialize_sample((2, 2), &inputs, &Vocab::default(), &SerializeOptions::default()).unwrap();
        let mode = if query_masked { MaskMode::QueryMasked } else { MaskMode::FullAr };
        let a = AttentionSpec::single(&seq, mode);
        for i in 0..seq.len() {
            for j in 0..seq.len() {
                let ok = attends(&a, i, j).unwrap();
                let (ri, rj) = (seq.roles[i], seq.roles[j]);
                if ri != Role::Image && rj != Role::Image && ok {
                    prop_assert!(j <= i);
                }
                if query_masked && ri != Role::Image && rj != Role::Image && seq.blocks[i] != seq.blocks[j] && seq.blocks[j] != BlockId::SHARED {
                    prop_assert!(!ok);
                }
            }
        }
        for q in &seq.queries {
            prop_assert!(q.instances.len() <= 100);
        }
    }

    #[test]
    fn packed_samples_never_cross(lens in proptest::collection::vec(1usize..20, 1..6), mode in prop::sample::select(vec![MaskMode::FullAr, MaskMode::QueryMasked])) {
        let v = Vocab::default();
        let seqs: Vec<TokenSequence> = lens.iter().map(|&n| {
            let p: String = "ab".repeat(n).chars().take(n).collect();
            serialize_sample((1, 2), &[QueryInput { prompt: &p, instances: &[] }], &v, &SerializeOptions::default()).unwrap()
        }).collect();
        let cap = seqs.iter().map(TokenSequence::len).max().unwrap() * 2;
        for b in pack(&seqs.iter().map(TokenSequence::len).collect::<Vec<_>>(), cap).unwrap() {
            let spec = b.attention_spec(&seqs, mode);
            for i in 0..spec.len() {
                for j in 0..spec.len() {
                    if spec.sample[i] != spec.sample[j] {
                        prop_assert!(!attends(&spec, i, j).unwrap());
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_queries_agree_with_predicate(seed in 0u64..100_000) {
        let scene = generate_scene(&SceneSpec::regular(seed)).unwrap();
        let (qs, _) = generate_queries(&scene, &TRAIN_LEVELS, 2, seed);
        for level in [Level::L0, Level::L1, Level::L3] {
            let at: Vec<_> = qs.iter().filter(|q| q.level == level).collect();
            let pos = at.iter().filter(|q| q.polarity == Polarity::Positive).count();
            prop_assert_eq!(pos * 2, at.len());
        }
        for q in &qs {
            let mut got = evaluate_prompt(&scene, &q.prompt).unwrap();
            let mut want = q.targets.clone();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
            prop_assert_eq!(q.polarity == Polarity::Positive, !q.targets.is_empty());
        }
    }

    #[test]
    fn scene_masks_cover_foreground(seed in 0u64..100_000) {
        let scene = generate_scene(&SceneSpec::regular(seed)).unwrap();
        let (h, w) = (scene.image.height, scene.image.width);
        for r in 0..h {
            for c in 0..w {
                let covered = scene.objects.iter().any(|o| o.mask().get(r, c));
                prop_assert_eq!(covered, scene.image.pixel(r, c) != scene.background);
            }
        }
    }
}

#[test]
fn dense_scenes_concentrate_one_class() {
    use unidense::synthdata::{dense_queries, make_example};
    for seed in 0..10 {
        let scene = generate_scene(&SceneSpec::dense(seed)).unwrap();
        let (qs, _) = dense_queries(&scene, seed);
        assert!(qs.iter().any(|q| q.targets.len() >= 24), "seed {seed}");
        let ex = make_example(&SceneSpec::dense(seed), &TRAIN_LEVELS, 2).unwrap();
        assert!(ex.queries.iter().all(|q| q.split == "dense"));
    }
}
