//! Instance-level evaluation: optimal matching, positive micro-F1 over IoU
//! thresholds, image-level MCC on the presence decision, their product, a
//! per-sample macro-F1, and best-of-k aggregation over stored candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::geometry::{box_corners, box_iou, mask_iou, rle_decode, BinaryMask, Center, Rle, Size2D};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {msg}")]
    Schema { file: String, line: usize, msg: String },
    #[error("negative IoU entry {0}")]
    NegativeEntry(f64),
    #[error("unmatched records: {}", .0.join(", "))]
    Join(Vec<String>),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("serialize: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Maximum-total-weight one-to-one assignment of size `min(N, M)`.
///
/// Returns `(row, col)` pairs sorted by row. Entries must be nonnegative.
pub fn hungarian_match(w: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let n = w.len();
    let m = w.first().map_or(0, |r| r.len());
    for row in w {
        assert_eq!(row.len(), m, "ragged IoU matrix");
        if let Some(&x) = row.iter().find(|x| **x < 0.0 || x.is_nan()) {
            return Err(EvalError::NegativeEntry(x));
        }
    }
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let cost = |i: usize, j: usize| if transpose { -w[j][i] } else { -w[i][j] };
    // Shortest augmenting path with potentials; 1-based with a dummy column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| p[j] != 0)
        .map(|j| if transpose { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Exhaustive maximum assignment; ties go to the lexicographically smallest
/// column sequence. Exponential, meant for small oracles.
pub fn brute_force_match(w: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = w.len();
    let m = w.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| w[i][j]).collect()).collect();
        let mut out: Vec<(usize, usize)> = brute_force_match(&t).into_iter().map(|(a, b)| (b, a)).collect();
        out.sort_unstable();
        return out;
    }
    fn rec(w: &[Vec<f64>], i: usize, used: &mut [bool], cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if i == w.len() {
            let total: f64 = cur.iter().enumerate().map(|(r, &c)| w[r][c]).sum();
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(w, i + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    rec(w, 0, &mut vec![false; m], &mut Vec::new(), &mut best);
    best.1.into_iter().enumerate().collect()
}

/// A box `[cx, cy, w, h]` in normalized units plus an optional RLE mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(deserialize_with = "required_nullable")]
    pub mask: Option<Rle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn required_nullable<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Rle>, D::Error> {
    Option::<Rle>::deserialize(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredLine {
    pub image_id: String,
    pub phrase: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub candidate: usize,
    pub instances: Vec<InstanceRecord>,
}

fn is_zero(x: &usize) -> bool {
    *x == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtLine {
    pub image_id: String,
    pub phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub instances: Vec<InstanceRecord>,
}

/// One (image, phrase) datapoint with its stored prediction candidates.
/// Candidate 0 is the primary (greedy) prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub phrase: String,
    pub split: String,
    pub candidates: Vec<Vec<InstanceRecord>>,
    pub ground_truth: Vec<InstanceRecord>,
}

impl EvalRecord {
    pub fn gt_present(&self) -> bool {
        !self.ground_truth.is_empty()
    }

    pub fn with_candidate(&self, k: usize) -> EvalRecord {
        EvalRecord { candidates: vec![self.candidates.get(k).cloned().unwrap_or_default()], ..self.clone() }
    }
}

fn decode(rle: &Rle) -> Result<BinaryMask> {
    rle_decode(rle).map_err(|e| EvalError::Mask(e.to_string()))
}

/// IoU of two instances: masks when both carry one, boxes otherwise.
pub fn instance_iou(a: &InstanceRecord, b: &InstanceRecord) -> Result<f64> {
    match (&a.mask, &b.mask) {
        (Some(ma), Some(mb)) => mask_iou(&decode(ma)?, &decode(mb)?).map_err(|e| EvalError::Mask(e.to_string())),
        _ => {
            let c = |r: &InstanceRecord| box_corners(Center { x: r.bbox[0], y: r.bbox[1] }, Size2D { w: r.bbox[2], h: r.bbox[3] });
            Ok(box_iou(c(a), c(b)))
        }
    }
}

/// Per-threshold TP/FP/FN of one prediction set against one ground truth.
pub fn local_counts(pred: &[InstanceRecord], gt: &[InstanceRecord]) -> Result<[[u64; 3]; 10]> {
    let decoded_p: Vec<Option<BinaryMask>> = pred.iter().map(|p| p.mask.as_ref().map(decode).transpose()).collect::<Result<_>>()?;
    let decoded_g: Vec<Option<BinaryMask>> = gt.iter().map(|p| p.mask.as_ref().map(decode).transpose()).collect::<Result<_>>()?;
    let mut w = vec![vec![0.0; gt.len()]; pred.len()];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            w[i][j] = match (&decoded_p[i], &decoded_g[j]) {
                (Some(a), Some(b)) => mask_iou(a, b).map_err(|e| EvalError::Mask(e.to_string()))?,
                _ => instance_iou(&InstanceRecord { mask: None, ..p.clone() }, g)?,
            };
        }
    }
    let pairs = hungarian_match(&w)?;
    let mut out = [[0u64; 3]; 10];
    for (t, tau) in thresholds().iter().enumerate() {
        let tp = pairs.iter().filter(|&&(i, j)| w[i][j] >= *tau).count() as u64;
        out[t] = [tp, pred.len() as u64 - tp, gt.len() as u64 - tp];
    }
    Ok(out)
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// Accumulated counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pmf1 {
    pub mean: Option<f64>,
    pub per_threshold: Vec<Option<f64>>,
    pub counts: Vec<Counts>,
}

/// Positive micro-F1: counts pooled over records with ground truth.
pub fn pmf1(records: &[EvalRecord]) -> Result<Pmf1> {
    let mut acc = [[0u64; 3]; 10];
    let mut positives = 0;
    for r in records.iter().filter(|r| r.gt_present()) {
        positives += 1;
        let pred = r.candidates.first().map(Vec::as_slice).unwrap_or(&[]);
        let c = local_counts(pred, &r.ground_truth)?;
        for t in 0..10 {
            for k in 0..3 {
                acc[t][k] += c[t][k];
            }
        }
    }
    let counts = acc.iter().map(|c| Counts { tp: c[0], fp: c[1], fn_: c[2] }).collect();
    if positives == 0 {
        return Ok(Pmf1 { mean: None, per_threshold: vec![None; 10], counts });
    }
    let per: Vec<f64> = acc.iter().map(|c| f1(c[0], c[1], c[2])).collect();
    Ok(Pmf1 { mean: Some(per.iter().sum::<f64>() / 10.0), per_threshold: per.into_iter().map(Some).collect(), counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

pub fn mcc(c: Confusion) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

pub fn presence_confusion(records: &[EvalRecord]) -> Confusion {
    let mut c = Confusion::default();
    for r in records {
        let pred = r.candidates.first().is_some_and(|p| !p.is_empty());
        match (r.gt_present(), pred) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    c
}

/// Image-level MCC of the "predicted anything" decision.
pub fn il_mcc(records: &[EvalRecord]) -> f64 {
    mcc(presence_confusion(records))
}

pub fn cgf1(pmf1: f64, mcc: f64) -> f64 {
    pmf1 * mcc
}

/// Per-sample score: mean local F1 over thresholds for positives with
/// predictions, one for true negatives, zero for presence errors.
pub fn sample_score(pred: &[InstanceRecord], gt: &[InstanceRecord]) -> Result<f64> {
    Ok(match (gt.is_empty(), pred.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let c = local_counts(pred, gt)?;
            c.iter().map(|c| f1(c[0], c[1], c[2])).sum::<f64>() / 10.0
        }
    })
}

pub fn macro_f1(records: &[EvalRecord]) -> Result<Option<f64>> {
    if records.is_empty() {
        return Ok(None);
    }
    let mut s = 0.0;
    for r in records {
        s += sample_score(r.candidates.first().map(Vec::as_slice).unwrap_or(&[]), &r.ground_truth)?;
    }
    Ok(Some(s / records.len() as f64))
}

/// Mean over samples of the best of the first `k` candidate scores.
/// Samples with fewer than `k` candidates use what they have.
pub fn pass_at_k(scores: &[Vec<f64>], k: usize) -> Option<f64> {
    if scores.is_empty() || k == 0 {
        return None;
    }
    let total: f64 = scores.iter().map(|s| s.iter().take(k).copied().fold(f64::NEG_INFINITY, f64::max).max(0.0)).sum();
    Some(total / scores.len() as f64)
}

/// Per-record candidate scores, in candidate order.
pub fn candidate_scores(records: &[EvalRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| {
            if r.candidates.is_empty() {
                return Ok(vec![sample_score(&[], &r.ground_truth)?]);
            }
            r.candidates.iter().map(|c| sample_score(c, &r.ground_truth)).collect()
        })
        .collect()
}

/// Replaces each record's candidates with its best of the first `k`
/// (earliest on ties), so micro metrics can be computed on the selection.
pub fn select_best_of_k(records: &[EvalRecord], k: usize) -> Result<Vec<EvalRecord>> {
    let scores = candidate_scores(records)?;
    Ok(records
        .iter()
        .zip(&scores)
        .map(|(r, s)| {
            let mut best = 0;
            for (i, &x) in s.iter().enumerate().take(k.max(1)) {
                if x > s[best] {
                    best = i;
                }
            }
            r.with_candidate(best)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: usize,
    pub positives: usize,
    pub pmf1: Option<f64>,
    pub pmf1_per_threshold: Vec<Option<f64>>,
    pub counts: Vec<Counts>,
    pub il_mcc: f64,
    pub presence: Confusion,
    pub cgf1: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Present when the report was built from best-of-k selections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_at_k: Option<usize>,
}

impl MetricReport {
    /// Fraction of ground-truth instances left unmatched at threshold index
    /// `t`; `None` without ground truth.
    pub fn fn_rate(&self, t: usize) -> Option<f64> {
        let c = self.counts[t];
        let gt = c.tp + c.fn_;
        (gt > 0).then(|| c.fn_ as f64 / gt as f64)
    }
}

pub fn evaluate(records: &[EvalRecord]) -> Result<MetricReport> {
    let p = pmf1(records)?;
    let presence = presence_confusion(records);
    let m = mcc(presence);
    Ok(MetricReport {
        records: records.len(),
        positives: records.iter().filter(|r| r.gt_present()).count(),
        pmf1: p.mean,
        pmf1_per_threshold: p.per_threshold,
        counts: p.counts,
        il_mcc: m,
        presence,
        cgf1: p.mean.map(|x| cgf1(x, m)),
        macro_f1: macro_f1(records)?,
        pass_at_k: None,
    })
}

/// Metrics on the best-of-k selection; `k = 1` equals [`evaluate`].
pub fn evaluate_pass_at_k(records: &[EvalRecord], k: usize) -> Result<MetricReport> {
    let sel = select_best_of_k(records, k)?;
    let mut r = evaluate(&sel)?;
    r.pass_at_k = Some(k);
    Ok(r)
}

/// Aggregate report first, then one per split in name order.
pub fn evaluate_splits(records: &[EvalRecord], k: usize) -> Result<Vec<(String, MetricReport)>> {
    let mut out = vec![("all".to_string(), evaluate_pass_at_k(records, k)?)];
    let mut by: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        by.entry(r.split.as_str()).or_default().push(r.clone());
    }
    if by.len() > 1 || by.keys().next().is_some_and(|s| *s != "all") {
        for (s, rs) in by {
            out.push((s.to_string(), evaluate_pass_at_k(&rs, k)?));
        }
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let f = fs::File::open(path)?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| EvalError::Schema { file: name.clone(), line: i + 1, msg: e.to_string() })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

fn check_instances(file: &str, line: usize, insts: &[InstanceRecord], need_mask: bool) -> Result<()> {
    for inst in insts {
        if inst.bbox.iter().any(|x| !x.is_finite()) {
            return Err(EvalError::Schema { file: file.into(), line, msg: "non-finite box".into() });
        }
        match &inst.mask {
            Some(m) => {
                decode(m).map_err(|e| EvalError::Schema { file: file.into(), line, msg: e.to_string() })?;
            }
            None if need_mask => return Err(EvalError::Schema { file: file.into(), line, msg: "ground-truth mask is null".into() }),
            None => {}
        }
    }
    Ok(())
}

/// Joins prediction and ground-truth JSONL on `(image_id, phrase)`.
pub fn load_records(pred_path: &Path, gt_path: &Path) -> Result<Vec<EvalRecord>> {
    let preds: Vec<(usize, PredLine)> = read_jsonl(pred_path)?;
    let gts: Vec<(usize, GtLine)> = read_jsonl(gt_path)?;
    let pname = pred_path.display().to_string();
    let gname = gt_path.display().to_string();
    let mut by_key: BTreeMap<(String, String), BTreeMap<usize, Vec<InstanceRecord>>> = BTreeMap::new();
    for (line, p) in preds {
        check_instances(&pname, line, &p.instances, false)?;
        let slot = by_key.entry((p.image_id.clone(), p.phrase.clone())).or_default();
        if slot.insert(p.candidate, p.instances).is_some() {
            return Err(EvalError::Schema { file: pname.clone(), line, msg: format!("duplicate candidate {} for {}/{}", p.candidate, p.image_id, p.phrase) });
        }
    }
    let mut records = Vec::with_capacity(gts.len());
    let mut seen = BTreeSet::new();
    let mut orphans = Vec::new();
    for (line, g) in gts {
        check_instances(&gname, line, &g.instances, true)?;
        let key = (g.image_id.clone(), g.phrase.clone());
        if !seen.insert(key.clone()) {
            return Err(EvalError::Schema { file: gname.clone(), line, msg: format!("duplicate record {}/{}", g.image_id, g.phrase) });
        }
        match by_key.remove(&key) {
            Some(c) => {
                let candidates = c.into_values().collect();
                records.push(EvalRecord { image_id: g.image_id, phrase: g.phrase, split: g.split.unwrap_or_else(|| "all".into()), candidates, ground_truth: g.instances });
            }
            None => orphans.push(format!("gt {}/{}", key.0, key.1)),
        }
    }
    orphans.extend(by_key.into_keys().map(|(i, p)| format!("pred {i}/{p}")));
    if !orphans.is_empty() {
        return Err(EvalError::Join(orphans));
    }
    Ok(records)
}

/// In-memory join of predictions and ground truth on `(image_id, phrase)`.
pub fn join_records(preds: &[PredLine], gts: &[GtLine]) -> Result<Vec<EvalRecord>> {
    let mut by_key: BTreeMap<(&str, &str), BTreeMap<usize, Vec<InstanceRecord>>> = BTreeMap::new();
    for p in preds {
        by_key.entry((&p.image_id, &p.phrase)).or_default().insert(p.candidate, p.instances.clone());
    }
    let mut records = Vec::with_capacity(gts.len());
    let mut orphans = Vec::new();
    for g in gts {
        match by_key.remove(&(g.image_id.as_str(), g.phrase.as_str())) {
            Some(c) => records.push(EvalRecord {
                image_id: g.image_id.clone(),
                phrase: g.phrase.clone(),
                split: g.split.clone().unwrap_or_else(|| "all".into()),
                candidates: c.into_values().collect(),
                ground_truth: g.instances.clone(),
            }),
            None => orphans.push(format!("gt {}/{}", g.image_id, g.phrase)),
        }
    }
    orphans.extend(by_key.into_keys().map(|(i, p)| format!("pred {i}/{p}")));
    if !orphans.is_empty() {
        return Err(EvalError::Join(orphans));
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).map_err(|e| EvalError::Serialize(e.to_string()))?);
        s.push('\n');
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_report(reports: &[(String, MetricReport)], path: &Path) -> Result<()> {
    let map: BTreeMap<&str, &MetricReport> = reports.iter().map(|(s, r)| (s.as_str(), r)).collect();
    let json = serde_json::to_string_pretty(&map).map_err(|e| EvalError::Serialize(e.to_string()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<BTreeMap<String, MetricReport>> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| EvalError::Schema { file: path.display().to_string(), line: e.line(), msg: e.to_string() })
}

pub fn format_table(reports: &[(String, MetricReport)]) -> String {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>6}", "split", "cgF1", "pmF1", "pmF1@50", "MCC", "macroF1", "records", "pos");
    for (name, r) in reports {
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>7} {:>7} {:>7.2} {:>7} {:>8} {:>6}",
            name,
            opt(r.cgf1),
            opt(r.pmf1),
            opt(r.pmf1_per_threshold[0]),
            r.il_mcc,
            opt(r.macro_f1),
            r.records,
            r.positives
        );
    }
    s
}
