//! Deterministic colored-shape scenes with leveled prompts.
//!
//! Level 0 prompts name a class, level 1 a color and class, level 3 an
//! extreme position and class ("leftmost circle"). Every scene gets as
//! many absent prompts as present ones.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{GtLine, InstanceRecord};
use crate::geometry::{rle_decode, rle_encode, BinaryMask, Instance, RgbImage};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(String),
    #[error("json at {file}:{line}: {msg}")]
    Json { file: String, line: usize, msg: String },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place {wanted} shapes after {tries} attempts")]
    Placement { wanted: usize, tries: usize },
    #[error("dataset: {0}")]
    Dataset(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [235, 220, 40],
            Color::Purple => [160, 50, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Side length range in pixels for regular scenes.
    pub min_side: usize,
    pub max_side: usize,
    pub classes: Vec<ShapeClass>,
    pub colors: Vec<Color>,
    pub allow_overlap: bool,
    /// Crowded layout: one class fills most cells of a jittered grid.
    pub dense: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            min_shapes: 2,
            max_shapes: 3,
            min_side: 18,
            max_side: 28,
            classes: ShapeClass::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            allow_overlap: false,
            dense: false,
        }
    }
}

impl SceneSpec {
    pub fn regular(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    /// 24 to 48 shapes; all but up to four share the dominant class.
    pub fn dense(seed: u64) -> Self {
        Self { seed, min_shapes: 24, max_shapes: 48, min_side: 5, max_side: 7, dense: true, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.colors.is_empty() {
            return Err(SynthError::Spec("classes and colors must be nonempty".into()));
        }
        if self.min_shapes > self.max_shapes || self.min_side == 0 || self.min_side > self.max_side {
            return Err(SynthError::Spec("empty shape count or side range".into()));
        }
        if self.max_side > self.width.min(self.height) {
            return Err(SynthError::Spec("shapes larger than the canvas".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: ShapeClass,
    pub color: Color,
    pub instance: Instance,
}

impl SceneObject {
    pub fn mask(&self) -> &BinaryMask {
        self.instance.mask.as_deref().expect("scene objects carry masks")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub dense: bool,
    pub background: [u8; 3],
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

/// Pixel-center rasterization of a shape with top-left `(r0, c0)`.
pub fn rasterize(class: ShapeClass, side: usize, r0: usize, c0: usize, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    let s = side as f64;
    for dr in 0..side {
        for dc in 0..side {
            let (y, x) = (dr as f64 + 0.5, dc as f64 + 0.5);
            let inside = match class {
                ShapeClass::Square => true,
                ShapeClass::Circle => (x - s / 2.0).powi(2) + (y - s / 2.0).powi(2) <= (s / 2.0).powi(2),
                ShapeClass::Triangle => (x - s / 2.0).abs() <= y / 2.0,
            };
            if inside && r0 + dr < h && c0 + dc < w {
                m.set(r0 + dr, c0 + dc, true);
            }
        }
    }
    m
}

fn id_for(seed: u64, dense: bool) -> String {
    format!("{}{seed:08}", if dense { "d" } else { "s" })
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let g = rng.random_range(20..=60u8);
    let background = [g, g, g];
    let mut image = RgbImage::filled(w, h, background);
    let n = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut placed: Vec<(ShapeClass, Color, usize, usize, usize)> = Vec::with_capacity(n);
    if spec.dense {
        let cell = spec.max_side + 1;
        let (gr, gc) = (h / cell, w / cell);
        if gr * gc < n {
            return Err(SynthError::Placement { wanted: n, tries: 0 });
        }
        let mut cells: Vec<usize> = (0..gr * gc).collect();
        cells.shuffle(&mut rng);
        let main = spec.classes[rng.random_range(0..spec.classes.len())];
        let others = rng.random_range(0..=4usize.min(n - spec.min_shapes.min(n)));
        let alt: Vec<ShapeClass> = spec.classes.iter().copied().filter(|&c| c != main).collect();
        let alt = alt.get(rng.random_range(0..alt.len().max(1))).copied().unwrap_or(main);
        for (k, &cidx) in cells.iter().take(n).enumerate() {
            let side = rng.random_range(spec.min_side..=spec.max_side);
            let (r0, c0) = ((cidx / gc) * cell + rng.random_range(0..=cell - side), (cidx % gc) * cell + rng.random_range(0..=cell - side));
            let class = if k < others { alt } else { main };
            let color = spec.colors[rng.random_range(0..spec.colors.len())];
            placed.push((class, color, side, r0, c0));
        }
    } else {
        // Crowded draws can paint themselves into a corner; start over a few
        // times before giving up.
        let tries = 200 * n.max(1);
        let mut attempts = 0;
        let mut restarts = 0;
        while placed.len() < n {
            attempts += 1;
            if attempts > tries {
                restarts += 1;
                if restarts > 20 {
                    return Err(SynthError::Placement { wanted: n, tries });
                }
                placed.clear();
                attempts = 0;
                continue;
            }
            let side = rng.random_range(spec.min_side..=spec.max_side);
            let r0 = rng.random_range(0..=h - side);
            let c0 = rng.random_range(0..=w - side);
            // One pixel of clearance between boxes keeps masks disjoint and separable.
            let clash = !spec.allow_overlap
                && placed.iter().any(|&(_, _, s, r, c)| r0 < r + s + 1 && r < r0 + side + 1 && c0 < c + s + 1 && c < c0 + side + 1);
            if clash {
                continue;
            }
            let class = spec.classes[rng.random_range(0..spec.classes.len())];
            let color = spec.colors[rng.random_range(0..spec.colors.len())];
            placed.push((class, color, side, r0, c0));
        }
    }
    let mut objects = Vec::with_capacity(placed.len());
    for (class, color, side, r0, c0) in placed {
        let mut mask = rasterize(class, side, r0, c0, h, w);
        for r in 0..h {
            for c in 0..w {
                if mask.get(r, c) {
                    image.put(r, c, color.rgb());
                }
            }
        }
        // Later shapes occlude earlier ones.
        if spec.allow_overlap {
            for o in objects.iter_mut() {
                let o: &mut SceneObject = o;
                let mut m = o.mask().clone();
                for r in 0..h {
                    for c in 0..w {
                        if mask.get(r, c) {
                            m.set(r, c, false);
                        }
                    }
                }
                o.instance.mask = Some(Arc::new(m));
            }
        }
        if mask.is_empty() {
            mask.set(r0.min(h - 1), c0.min(w - 1), true);
        }
        let instance = Instance::from_mask(mask).map_err(|e| SynthError::Spec(e.to_string()))?;
        objects.push(SceneObject { class, color, instance });
    }
    if spec.allow_overlap {
        objects.retain(|o| !o.mask().is_empty());
        for o in objects.iter_mut() {
            let m = o.mask().clone();
            o.instance = Instance::from_mask(m).map_err(|e| SynthError::Spec(e.to_string()))?;
        }
    }
    Ok(Scene { id: id_for(spec.seed, spec.dense), seed: spec.seed, dense: spec.dense, background, image, objects })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    /// Class nouns.
    L0,
    /// Color plus class.
    L1,
    /// Reserved: rendered text.
    L2,
    /// Extreme position plus class.
    L3,
    /// Reserved: relations between objects.
    L4,
}

impl Level {
    pub fn split_name(self) -> &'static str {
        match self {
            Level::L0 => "level0",
            Level::L1 => "level1",
            Level::L2 => "level2",
            Level::L3 => "level3",
            Level::L4 => "level4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeKind {
    /// Class absent from the scene.
    Semantic,
    /// Class present, but not in this color.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub level: Level,
    pub prompt: String,
    pub polarity: Polarity,
    pub targets: Vec<usize>,
    pub negative: Option<NegativeKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skip {
    pub level: Level,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Leftmost,
    Rightmost,
    Topmost,
}

impl Extreme {
    pub const ALL: [Extreme; 3] = [Extreme::Leftmost, Extreme::Rightmost, Extreme::Topmost];

    pub fn word(self) -> &'static str {
        match self {
            Extreme::Leftmost => "leftmost",
            Extreme::Rightmost => "rightmost",
            Extreme::Topmost => "topmost",
        }
    }
}

/// Index of the unique extreme object of `class`, or `None` when absent or
/// tied.
pub fn extreme_of(scene: &Scene, class: ShapeClass, e: Extreme) -> Option<usize> {
    let key = |o: &SceneObject| match e {
        Extreme::Leftmost => o.instance.center.x,
        Extreme::Rightmost => -o.instance.center.x,
        Extreme::Topmost => o.instance.center.y,
    };
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (i, o) in scene.objects.iter().enumerate().filter(|(_, o)| o.class == class) {
        let k = key(o);
        match best {
            None => best = Some((i, k)),
            Some((_, b)) if k < b => {
                best = Some((i, k));
                tied = false;
            }
            Some((_, b)) if k == b => tied = true,
            _ => {}
        }
    }
    if tied {
        None
    } else {
        best.map(|b| b.0)
    }
}

/// Up to `max_per_level` positive and as many negative prompts per level.
/// A level is skipped when it cannot mint at least one of each.
pub fn generate_queries(scene: &Scene, levels: &[Level], max_per_level: usize, seed: u64) -> (Vec<QuerySpec>, Vec<Skip>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::new();
    let mut skips = Vec::new();
    let classes_present: Vec<ShapeClass> = ShapeClass::ALL.iter().copied().filter(|c| scene.objects.iter().any(|o| o.class == *c)).collect();
    let of_class = |c: ShapeClass| -> Vec<usize> { scene.objects.iter().enumerate().filter(|(_, o)| o.class == c).map(|(i, _)| i).collect() };
    for &level in levels {
        let mut pos: Vec<QuerySpec> = Vec::new();
        let mut neg: Vec<QuerySpec> = Vec::new();
        let mk = |prompt: String, targets: Vec<usize>, negative: Option<NegativeKind>| QuerySpec {
            level,
            prompt,
            polarity: if targets.is_empty() { Polarity::Negative } else { Polarity::Positive },
            targets,
            negative,
        };
        match level {
            Level::L0 => {
                for c in ShapeClass::ALL {
                    let t = of_class(c);
                    if t.is_empty() {
                        neg.push(mk(c.name().into(), t, Some(NegativeKind::Semantic)));
                    } else {
                        pos.push(mk(c.name().into(), t, None));
                    }
                }
            }
            Level::L1 => {
                for c in ShapeClass::ALL {
                    for col in Color::ALL {
                        let t: Vec<usize> = scene.objects.iter().enumerate().filter(|(_, o)| o.class == c && o.color == col).map(|(i, _)| i).collect();
                        let prompt = format!("{} {}", col.name(), c.name());
                        if !t.is_empty() {
                            pos.push(mk(prompt, t, None));
                        } else if classes_present.contains(&c) {
                            neg.push(mk(prompt, t, Some(NegativeKind::Hard)));
                        } else {
                            neg.push(mk(prompt, t, Some(NegativeKind::Semantic)));
                        }
                    }
                }
            }
            Level::L3 => {
                for c in ShapeClass::ALL {
                    for e in Extreme::ALL {
                        let prompt = format!("{} {}", e.word(), c.name());
                        if !classes_present.contains(&c) {
                            neg.push(mk(prompt, Vec::new(), Some(NegativeKind::Semantic)));
                        } else if of_class(c).len() >= 2 {
                            if let Some(i) = extreme_of(scene, c, e) {
                                pos.push(mk(prompt, vec![i], None));
                            }
                        }
                    }
                }
            }
            Level::L2 | Level::L4 => {
                skips.push(Skip { level, reason: "level not synthesized".into() });
                continue;
            }
        }
        // Hard negatives first so they survive the cap.
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        neg.sort_by_key(|q| q.negative != Some(NegativeKind::Hard));
        let k = pos.len().min(neg.len()).min(max_per_level);
        if k == 0 {
            let reason = if pos.is_empty() { "no satisfiable prompt" } else { "no unsatisfiable prompt" };
            skips.push(Skip { level, reason: reason.into() });
            continue;
        }
        out.extend(pos.into_iter().take(k));
        out.extend(neg.into_iter().take(k));
    }
    (out, skips)
}

/// Independent predicate check: which objects satisfy `prompt`.
pub fn evaluate_prompt(scene: &Scene, prompt: &str) -> Option<Vec<usize>> {
    let words: Vec<&str> = prompt.split(' ').collect();
    let class = ShapeClass::ALL.into_iter().find(|c| Some(&c.name()) == words.last())?;
    match words.len() {
        1 => Some((0..scene.objects.len()).filter(|&i| scene.objects[i].class == class).collect()),
        2 => {
            if let Some(col) = Color::ALL.into_iter().find(|c| c.name() == words[0]) {
                return Some((0..scene.objects.len()).filter(|&i| scene.objects[i].class == class && scene.objects[i].color == col).collect());
            }
            let e = Extreme::ALL.into_iter().find(|e| e.word() == words[0])?;
            let idx: Vec<usize> = (0..scene.objects.len()).filter(|&i| scene.objects[i].class == class).collect();
            if idx.is_empty() {
                return Some(Vec::new());
            }
            let coord = |i: usize| {
                let c = scene.objects[i].instance.center;
                match e {
                    Extreme::Leftmost => c.x,
                    Extreme::Rightmost => -c.x,
                    Extreme::Topmost => c.y,
                }
            };
            let best = idx.iter().map(|&i| coord(i)).fold(f64::INFINITY, f64::min);
            Some(idx.into_iter().filter(|&i| coord(i) == best).collect())
        }
        _ => None,
    }
}

/// Training/eval view of one image and its prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: RgbImage,
    pub queries: Vec<ExampleQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleQuery {
    pub prompt: String,
    pub split: String,
    pub instances: Vec<Instance>,
}

impl Example {
    pub fn from_scene(scene: &Scene, queries: &[QuerySpec]) -> Self {
        let queries = queries
            .iter()
            .map(|q| ExampleQuery {
                prompt: q.prompt.clone(),
                split: if scene.dense { "dense".into() } else { q.level.split_name().into() },
                instances: q.targets.iter().map(|&i| scene.objects[i].instance.clone()).collect(),
            })
            .collect();
        Self { id: scene.id.clone(), image: scene.image.clone(), queries }
    }

    /// Ground-truth lines in the evaluation schema.
    pub fn gt_lines(&self) -> Vec<GtLine> {
        self.queries
            .iter()
            .map(|q| GtLine {
                image_id: self.id.clone(),
                phrase: q.prompt.clone(),
                split: Some(q.split.clone()),
                instances: q.instances.iter().map(instance_record).collect(),
            })
            .collect()
    }
}

pub fn instance_record(i: &Instance) -> InstanceRecord {
    InstanceRecord { bbox: [i.center.x, i.center.y, i.size.w, i.size.h], mask: i.mask.as_deref().map(rle_encode), score: None }
}

/// Levels used for regular scenes.
pub const TRAIN_LEVELS: [Level; 3] = [Level::L0, Level::L1, Level::L3];

/// Scene plus prompts with the default per-level cap.
pub fn make_example(spec: &SceneSpec, levels: &[Level], max_per_level: usize) -> Result<Example> {
    let scene = generate_scene(spec)?;
    let (q, _) = if scene.dense { dense_queries(&scene, spec.seed) } else { generate_queries(&scene, levels, max_per_level, spec.seed) };
    Ok(Example::from_scene(&scene, &q))
}

/// Dominant-class prompt plus one absent class for a crowded scene.
pub fn dense_queries(scene: &Scene, seed: u64) -> (Vec<QuerySpec>, Vec<Skip>) {
    let mut counts: BTreeMap<ShapeClass, Vec<usize>> = BTreeMap::new();
    for (i, o) in scene.objects.iter().enumerate() {
        counts.entry(o.class).or_default().push(i);
    }
    let Some((class, targets)) = counts.iter().max_by_key(|(_, v)| v.len()).map(|(c, v)| (*c, v.clone())) else {
        return (Vec::new(), vec![Skip { level: Level::L0, reason: "empty scene".into() }]);
    };
    let mut out = vec![QuerySpec { level: Level::L0, prompt: class.name().into(), polarity: Polarity::Positive, targets, negative: None }];
    let absent: Vec<ShapeClass> = ShapeClass::ALL.iter().copied().filter(|c| !counts.contains_key(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5_4a32_d192_ed03);
    if let Some(c) = absent.choose(&mut rng) {
        out.push(QuerySpec { level: Level::L0, prompt: c.name().into(), polarity: Polarity::Negative, targets: Vec::new(), negative: Some(NegativeKind::Semantic) });
        (out, Vec::new())
    } else {
        let skip = Skip { level: Level::L0, reason: "every class present; no negative".into() };
        out.clear();
        (out, vec![skip])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// SplitMix64 finalizer; stable across platforms and releases.
fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed-hash split: `val_percent` of seeds land in validation.
pub fn split_of(seed: u64, val_percent: u64) -> Split {
    if mix(seed) % 100 < val_percent {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub images: usize,
    pub queries: usize,
    pub positives: usize,
    pub negatives: usize,
    pub instances: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub val_percent: u64,
    pub max_per_level: usize,
    pub splits: BTreeMap<String, SplitManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneLine {
    image_id: String,
    seed: u64,
    dense: bool,
    objects: Vec<ObjectLine>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectLine {
    class: ShapeClass,
    color: Color,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: crate::geometry::Rle,
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| SynthError::Png(e.to_string()))?;
    w.write_image_data(&image.data).map_err(|e| SynthError::Png(e.to_string()))?;
    w.finish().map_err(|e| SynthError::Png(e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let f = fs::File::open(path)?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| SynthError::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| SynthError::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| SynthError::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf[..w * h * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(SynthError::Png("palette not expanded".into())),
    };
    Ok(RgbImage { width: w, height: h, data })
}

fn write_lines<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).expect("serializable"));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes `<out>/<split>/{images/*.png, gt.jsonl, scenes.jsonl}` for every
/// spec and a top-level `manifest.json`. Seeds are split by hash.
pub fn emit_dataset(specs: &[SceneSpec], out_dir: &Path, val_percent: u64, max_per_level: usize) -> Result<Manifest> {
    let mut by_split: BTreeMap<&'static str, (Vec<GtLine>, Vec<SceneLine>, SplitManifest)> = BTreeMap::new();
    for spec in specs {
        let split = split_of(spec.seed, val_percent).name();
        let dir = out_dir.join(split).join("images");
        fs::create_dir_all(&dir)?;
        let scene = generate_scene(spec)?;
        let (queries, _) = if scene.dense { dense_queries(&scene, spec.seed) } else { generate_queries(&scene, &TRAIN_LEVELS, max_per_level, spec.seed) };
        write_png(&dir.join(format!("{}.png", scene.id)), &scene.image)?;
        let ex = Example::from_scene(&scene, &queries);
        let entry = by_split.entry(split).or_insert_with(|| {
            (Vec::new(), Vec::new(), SplitManifest { images: 0, queries: 0, positives: 0, negatives: 0, instances: 0, seeds: Vec::new() })
        });
        entry.2.images += 1;
        entry.2.queries += queries.len();
        entry.2.positives += queries.iter().filter(|q| q.polarity == Polarity::Positive).count();
        entry.2.negatives += queries.iter().filter(|q| q.polarity == Polarity::Negative).count();
        entry.2.instances += scene.objects.len();
        entry.2.seeds.push(spec.seed);
        entry.0.extend(ex.gt_lines());
        entry.1.push(SceneLine {
            image_id: scene.id.clone(),
            seed: scene.seed,
            dense: scene.dense,
            objects: scene
                .objects
                .iter()
                .map(|o| {
                    let i = &o.instance;
                    ObjectLine { class: o.class, color: o.color, bbox: [i.center.x, i.center.y, i.size.w, i.size.h], mask: rle_encode(o.mask()) }
                })
                .collect(),
        });
    }
    let mut manifest = Manifest { val_percent, max_per_level, splits: BTreeMap::new() };
    for (split, (gt, scenes, m)) in by_split {
        let dir = out_dir.join(split);
        write_lines(&dir.join("gt.jsonl"), &gt)?;
        write_lines(&dir.join("scenes.jsonl"), &scenes)?;
        manifest.splits.insert(split.to_string(), m);
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("serializable") + "\n")?;
    Ok(manifest)
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

/// Reads a split directory back into examples, in `gt.jsonl` order.
pub fn load_examples(dir: &Path) -> Result<Vec<Example>> {
    let gt_path = dir.join("gt.jsonl");
    let text = fs::read_to_string(&gt_path)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<ExampleQuery>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: GtLine = serde_json::from_str(line).map_err(|e| SynthError::Json { file: gt_path.display().to_string(), line: i + 1, msg: e.to_string() })?;
        let mut instances = Vec::with_capacity(g.instances.len());
        for r in &g.instances {
            let rle = r.mask.as_ref().ok_or_else(|| SynthError::Dataset(format!("{}: gt mask missing", g.image_id)))?;
            let m = rle_decode(rle).map_err(|e| SynthError::Dataset(e.to_string()))?;
            instances.push(Instance::from_mask(m).map_err(|e| SynthError::Dataset(e.to_string()))?);
        }
        if !by_id.contains_key(&g.image_id) {
            order.push(g.image_id.clone());
        }
        by_id.entry(g.image_id.clone()).or_default().push(ExampleQuery { prompt: g.phrase, split: g.split.unwrap_or_else(|| "all".into()), instances });
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let image = read_png(&dir.join("images").join(format!("{id}.png")))?;
        let queries = by_id.remove(&id).unwrap_or_default();
        out.push(Example { id, image, queries });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible() {
        let a = generate_scene(&SceneSpec::regular(5)).unwrap();
        let b = generate_scene(&SceneSpec::regular(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneSpec::regular(6)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn requested_classes_are_honored() {
        let spec = SceneSpec { seed: 3, min_shapes: 3, max_shapes: 3, classes: vec![ShapeClass::Circle], ..Default::default() };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.objects.len(), 3);
        assert!(s.objects.iter().all(|o| o.class == ShapeClass::Circle));
    }

    #[test]
    fn union_of_masks_is_foreground() {
        for seed in 0..20 {
            let s = generate_scene(&SceneSpec::regular(seed)).unwrap();
            for r in 0..64 {
                for c in 0..64 {
                    let fg = s.image.pixel(r, c) != s.background;
                    let covered = s.objects.iter().filter(|o| o.mask().get(r, c)).count();
                    assert_eq!(fg, covered == 1, "seed {seed} ({r},{c})");
                    assert!(covered <= 1);
                }
            }
        }
    }

    #[test]
    fn absent_color_is_negative() {
        let spec = SceneSpec { seed: 1, classes: vec![ShapeClass::Circle], colors: vec![Color::Red], ..Default::default() };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(evaluate_prompt(&s, "blue circle"), Some(vec![]));
        let (q, _) = generate_queries(&s, &[Level::L1], 10, 1);
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].prompt, "red circle");
        // The only circle color is red, so the negative is a recolored circle.
        assert!(q[1].prompt.ends_with(" circle") && q[1].prompt != "red circle");
        assert_eq!(q[1].negative, Some(NegativeKind::Hard));
    }

    #[test]
    fn leftmost_is_min_center_x() {
        for seed in 0..30 {
            let s = generate_scene(&SceneSpec::regular(seed)).unwrap();
            let (qs, _) = generate_queries(&s, &[Level::L3], 10, seed);
            for q in qs.iter().filter(|q| q.prompt.starts_with("leftmost") && q.polarity == Polarity::Positive) {
                let t = q.targets[0];
                let class = s.objects[t].class;
                for o in s.objects.iter().filter(|o| o.class == class) {
                    assert!(s.objects[t].instance.center.x < o.instance.center.x || std::ptr::eq(o, &s.objects[t]));
                }
            }
        }
    }

    #[test]
    fn balanced_and_consistent_queries() {
        for seed in 0..50 {
            let s = generate_scene(&SceneSpec::regular(seed)).unwrap();
            let (qs, _) = generate_queries(&s, &TRAIN_LEVELS, 3, seed);
            let pos = qs.iter().filter(|q| q.polarity == Polarity::Positive).count();
            assert_eq!(2 * pos, qs.len());
            for q in &qs {
                let mut truth = evaluate_prompt(&s, &q.prompt).unwrap();
                truth.sort_unstable();
                let mut t = q.targets.clone();
                t.sort_unstable();
                assert_eq!(t, truth, "{}", q.prompt);
            }
        }
    }

    #[test]
    fn dense_scenes_are_crowded() {
        for seed in 0..10 {
            let s = generate_scene(&SceneSpec::dense(seed)).unwrap();
            let (q, skips) = dense_queries(&s, seed);
            if skips.is_empty() {
                assert!(q[0].targets.len() >= 24, "{}", q[0].targets.len());
                assert!(q[1].targets.is_empty());
            }
        }
    }

    #[test]
    fn reserved_levels_skip() {
        let s = generate_scene(&SceneSpec::regular(0)).unwrap();
        let (q, skips) = generate_queries(&s, &[Level::L2], 3, 0);
        assert!(q.is_empty());
        assert_eq!(skips[0].level, Level::L2);
    }

    #[test]
    fn emit_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let specs: Vec<SceneSpec> = (0..12).map(SceneSpec::regular).chain((100..102).map(SceneSpec::dense)).collect();
        let m = emit_dataset(&specs, dir.path(), 25, 2).unwrap();
        let total: usize = m.splits.values().map(|s| s.images).sum();
        assert_eq!(total, specs.len());
        for (name, sm) in &m.splits {
            let ex = load_examples(&dir.path().join(name)).unwrap();
            assert_eq!(ex.len(), sm.images);
            assert_eq!(ex.iter().map(|e| e.queries.len()).sum::<usize>(), sm.queries);
            assert_eq!(fs::read_dir(dir.path().join(name).join("images")).unwrap().count(), sm.images);
        }
        let first = load_examples(&dir.path().join("train")).unwrap();
        let s = generate_scene(&specs.iter().find(|s| split_of(s.seed, 25) == Split::Train).unwrap().clone()).unwrap();
        assert_eq!(first[0].image, s.image);
        let again = tempfile::tempdir().unwrap();
        emit_dataset(&specs, again.path(), 25, 2).unwrap();
        for f in ["manifest.json", "train/gt.jsonl", "train/scenes.jsonl"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }
}
