//! Chain-of-Perception serialization and the attention/loss mask machinery.
//!
//! A sample is laid out as
//!
//! ```text
//! [img x N] expr_1 <present> (<coord> <size> <seg>)+ <eoq> expr_2 <absent> <eoq> ... <eos>
//! ```
//!
//! Image tokens are placeholders; their content comes from patch embeddings.
//! Every non-image position carries a next-token label (or `None` for
//! IGNORE), a query-block id, and a 1D rotary index. Image positions carry
//! a 2D grid position instead of a label.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{quantize_coord, BinaryMask, Center, Instance, QuantConfig, Size2D};

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqError {
    #[error("positive query {0:?} has no instances")]
    EmptyPositive(String),
    #[error("query {prompt:?} has {count} instances, above the cap of {cap}")]
    AboveCap {
        prompt: String,
        count: usize,
        cap: usize,
    },
    #[error("character {0:?} is not in the prompt alphabet")]
    BadChar(char),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("sample of length {len} exceeds capacity {cap}")]
    Oversized { len: usize, cap: usize },
    #[error("position {pos} out of range (len {len})")]
    OutOfRange { pos: usize, len: usize },
    #[error("instance center outside [0,1]^2")]
    BadCenter,
}

/// Special tokens, placed after the text alphabet in id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Image,
    Present,
    Absent,
    Coord,
    Size,
    Seg,
    Eoq,
    Eos,
}

impl Special {
    pub const ALL: [Special; 8] = [
        Special::Image,
        Special::Present,
        Special::Absent,
        Special::Coord,
        Special::Size,
        Special::Seg,
        Special::Eoq,
        Special::Eos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Image => "<img>",
            Special::Present => "<present>",
            Special::Absent => "<absent>",
            Special::Coord => "<coord>",
            Special::Size => "<size>",
            Special::Seg => "<seg>",
            Special::Eoq => "<eoq>",
            Special::Eos => "<eos>",
        }
    }
}

/// Character-level prompt vocabulary plus the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    alphabet: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new("abcdefghijklmnopqrstuvwxyz ")
    }
}

impl Vocab {
    pub fn new(alphabet: &str) -> Self {
        Self {
            alphabet: alphabet.chars().collect(),
        }
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn text_len(&self) -> usize {
        self.alphabet.len()
    }

    pub fn size(&self) -> usize {
        self.alphabet.len() + Special::ALL.len()
    }

    pub fn special(&self, s: Special) -> TokenId {
        let idx = Special::ALL.iter().position(|&x| x == s).unwrap();
        (self.alphabet.len() + idx) as TokenId
    }

    pub fn as_special(&self, id: TokenId) -> Option<Special> {
        (id as usize)
            .checked_sub(self.alphabet.len())
            .and_then(|i| Special::ALL.get(i).copied())
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        (id as usize) < self.alphabet.len()
    }

    pub fn char_id(&self, c: char) -> Result<TokenId, SeqError> {
        self.alphabet
            .iter()
            .position(|&a| a == c)
            .map(|i| i as TokenId)
            .ok_or(SeqError::BadChar(c))
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>, SeqError> {
        if text.is_empty() {
            return Err(SeqError::EmptyPrompt);
        }
        text.chars().map(|c| self.char_id(c)).collect()
    }

    pub fn token_name(&self, id: TokenId) -> String {
        if let Some(s) = self.as_special(id) {
            s.name().to_string()
        } else if let Some(c) = self.alphabet.get(id as usize) {
            c.to_string()
        } else {
            format!("<unk:{id}>")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Image,
    Text,
    Coord,
    Size,
    Seg,
    Control,
}

/// Query-block id. Image positions use [`BlockId::IMAGE`]; blocks marked
/// [`BlockId::SHARED`] are visible to every block even under query masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BlockId(pub u32);

impl BlockId {
    pub const IMAGE: BlockId = BlockId(0);
    pub const SHARED: BlockId = BlockId(u32::MAX);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    FullAr,
    QueryMasked,
}

/// How 1D rotary indices are assigned to query blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockPositions {
    /// Indices run on through the whole sample.
    Sequential,
    /// Every query block restarts right after the image, so a block looks
    /// exactly like a stand-alone `image + query` sequence.
    RestartPerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerializeOptions {
    pub instance_cap: usize,
    pub positions: BlockPositions,
    pub raster: QuantConfig,
}

impl Default for SerializeOptions {
    fn default() -> Self {
        Self {
            instance_cap: 100,
            positions: BlockPositions::Sequential,
            raster: QuantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMeta {
    pub prompt: String,
    pub present: bool,
    pub block: BlockId,
    pub instances: std::ops::Range<usize>,
}

/// One serialized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub grid: (usize, usize),
    pub tokens: Vec<TokenId>,
    pub roles: Vec<Role>,
    pub blocks: Vec<BlockId>,
    /// `(x, y)` = `(col, row)` patch index, image positions only.
    pub grid_pos: Vec<Option<[u32; 2]>>,
    pub positions: Vec<u32>,
    pub labels: Vec<Option<TokenId>>,
    /// Index into `instances` for coord/size/seg positions.
    pub targets: Vec<Option<usize>>,
    pub instances: Vec<Instance>,
    pub queries: Vec<QueryMeta>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.roles.iter().filter(|&&r| r == Role::Image).count()
    }

    pub fn positions_with_role(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(move |(_, &r)| r == role)
            .map(|(i, _)| i)
    }

    /// One JSON object per position, for golden-file comparisons.
    pub fn debug_jsonl(&self, vocab: &Vocab) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            pos: usize,
            id: TokenId,
            token: &'a str,
            role: Role,
            block: u32,
            grid: Option<[u32; 2]>,
            label: Option<TokenId>,
        }
        let mut out = String::new();
        for i in 0..self.len() {
            let name = vocab.token_name(self.tokens[i]);
            let line = Line {
                pos: i,
                id: self.tokens[i],
                token: &name,
                role: self.roles[i],
                block: self.blocks[i].0,
                grid: self.grid_pos[i],
                label: self.labels[i],
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        out
    }
}

/// Stable sort by quantized center row, then column.
pub fn raster_order(instances: &[Instance], q: QuantConfig) -> Result<Vec<Instance>, SeqError> {
    let mut keyed = Vec::with_capacity(instances.len());
    for inst in instances {
        let [bx, by] = quantize_coord(inst.center, q).map_err(|_| SeqError::BadCenter)?;
        keyed.push(((by, bx), inst.clone()));
    }
    keyed.sort_by_key(|(k, _)| *k);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

pub struct QueryInput<'a> {
    pub prompt: &'a str,
    pub instances: &'a [Instance],
}

pub fn serialize_sample(
    grid: (usize, usize),
    queries: &[QueryInput<'_>],
    vocab: &Vocab,
    opts: &SerializeOptions,
) -> Result<TokenSequence, SeqError> {
    let (rows, cols) = grid;
    let n_img = rows * cols;
    let mut seq = TokenSequence {
        grid,
        tokens: Vec::new(),
        roles: Vec::new(),
        blocks: Vec::new(),
        grid_pos: Vec::new(),
        positions: Vec::new(),
        labels: Vec::new(),
        targets: Vec::new(),
        instances: Vec::new(),
        queries: Vec::new(),
    };
    for r in 0..rows {
        for c in 0..cols {
            seq.tokens.push(vocab.special(Special::Image));
            seq.roles.push(Role::Image);
            seq.blocks.push(BlockId::IMAGE);
            seq.grid_pos.push(Some([c as u32, r as u32]));
            seq.positions.push((r * cols + c) as u32);
            seq.targets.push(None);
        }
    }
    let mut t = n_img as u32;
    let push = |seq: &mut TokenSequence, t: &mut u32, id, role, block, target| {
        seq.tokens.push(id);
        seq.roles.push(role);
        seq.blocks.push(block);
        seq.grid_pos.push(None);
        seq.positions.push(*t);
        seq.targets.push(target);
        *t += 1;
    };
    for (qi, q) in queries.iter().enumerate() {
        let block = BlockId(qi as u32 + 1);
        if opts.positions == BlockPositions::RestartPerBlock {
            t = n_img as u32;
        }
        if q.instances.len() > opts.instance_cap {
            return Err(SeqError::AboveCap {
                prompt: q.prompt.to_string(),
                count: q.instances.len(),
                cap: opts.instance_cap,
            });
        }
        for id in vocab.encode_text(q.prompt)? {
            push(&mut seq, &mut t, id, Role::Text, block, None);
        }
        let start = seq.instances.len();
        if q.instances.is_empty() {
            push(&mut seq, &mut t, vocab.special(Special::Absent), Role::Control, block, None);
        } else {
            push(&mut seq, &mut t, vocab.special(Special::Present), Role::Control, block, None);
            for inst in raster_order(q.instances, opts.raster)? {
                let k = seq.instances.len();
                seq.instances.push(inst);
                push(&mut seq, &mut t, vocab.special(Special::Coord), Role::Coord, block, Some(k));
                push(&mut seq, &mut t, vocab.special(Special::Size), Role::Size, block, Some(k));
                push(&mut seq, &mut t, vocab.special(Special::Seg), Role::Seg, block, Some(k));
            }
        }
        push(&mut seq, &mut t, vocab.special(Special::Eoq), Role::Control, block, None);
        seq.queries.push(QueryMeta {
            prompt: q.prompt.to_string(),
            present: !q.instances.is_empty(),
            block,
            instances: start..seq.instances.len(),
        });
    }
    let eos_block = BlockId(queries.len() as u32 + 1);
    if opts.positions == BlockPositions::RestartPerBlock {
        t = n_img as u32;
    }
    push(&mut seq, &mut t, vocab.special(Special::Eos), Role::Control, eos_block, None);

    let n = seq.tokens.len();
    seq.labels = (0..n)
        .map(|i| {
            if seq.roles[i] == Role::Image || i + 1 == n {
                None
            } else {
                Some(seq.tokens[i + 1])
            }
        })
        .collect();
    Ok(seq)
}

/// Supervised label positions for a training stage. Stage 1 supervises all
/// text and control labels; later stages drop labels whose target is a
/// prompt character. Image positions are never supervised.
pub fn loss_mask(seq: &TokenSequence, stage: u8, vocab: &Vocab) -> Vec<bool> {
    (0..seq.len())
        .map(|i| match seq.labels[i] {
            None => false,
            Some(_) if seq.roles[i] == Role::Image => false,
            Some(target) => stage <= 1 || !vocab.is_text(target),
        })
        .collect()
}

pub fn apply_loss_mask(seq: &mut TokenSequence, stage: u8, vocab: &Vocab) {
    let keep = loss_mask(seq, stage, vocab);
    for (label, keep) in seq.labels.iter_mut().zip(keep) {
        if !keep {
            *label = None;
        }
    }
}

/// Mask predicate inputs for one packed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub sample: Vec<u32>,
    pub roles: Vec<Role>,
    pub blocks: Vec<BlockId>,
    pub mode: MaskMode,
}

impl AttentionSpec {
    pub fn single(seq: &TokenSequence, mode: MaskMode) -> Self {
        Self {
            sample: vec![0; seq.len()],
            roles: seq.roles.clone(),
            blocks: seq.blocks.clone(),
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Dense row-major `len x len` boolean mask.
    pub fn dense(&self) -> Vec<bool> {
        let n = self.len();
        let mut out = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.allowed(i, j);
            }
        }
        out
    }

    fn allowed(&self, i: usize, j: usize) -> bool {
        if self.sample[i] != self.sample[j] {
            return false;
        }
        if self.roles[i] == Role::Image {
            return self.roles[j] == Role::Image;
        }
        if self.roles[j] == Role::Image {
            return true;
        }
        j <= i
            && (self.mode == MaskMode::FullAr
                || self.blocks[i] == self.blocks[j]
                || self.blocks[j] == BlockId::SHARED)
    }
}

/// Whether position `i` may attend to position `j`.
pub fn attends(spec: &AttentionSpec, i: usize, j: usize) -> Result<bool, SeqError> {
    let len = spec.len();
    for pos in [i, j] {
        if pos >= len {
            return Err(SeqError::OutOfRange { pos, len });
        }
    }
    Ok(spec.allowed(i, j))
}

/// Samples concatenated into one fixed-capacity sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub capacity: usize,
    /// Indices into the packed input list, in packing order.
    pub members: Vec<usize>,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl PackedBatch {
    pub fn total_len(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn attention_spec(&self, seqs: &[TokenSequence], mode: MaskMode) -> AttentionSpec {
        let mut spec = AttentionSpec {
            sample: Vec::new(),
            roles: Vec::new(),
            blocks: Vec::new(),
            mode,
        };
        for (slot, &m) in self.members.iter().enumerate() {
            let s = &seqs[m];
            spec.sample.extend(std::iter::repeat_n(slot as u32, s.len()));
            spec.roles.extend_from_slice(&s.roles);
            spec.blocks.extend_from_slice(&s.blocks);
        }
        spec
    }
}

/// First-fit packing that keeps input order within each batch.
pub fn pack(lengths: &[usize], capacity: usize) -> Result<Vec<PackedBatch>, SeqError> {
    let mut batches: Vec<PackedBatch> = Vec::new();
    for (idx, &len) in lengths.iter().enumerate() {
        if len > capacity {
            return Err(SeqError::Oversized { len, cap: capacity });
        }
        let slot = batches.iter().position(|b| b.total_len() + len <= capacity);
        let batch = match slot {
            Some(s) => &mut batches[s],
            None => {
                batches.push(PackedBatch {
                    capacity,
                    members: Vec::new(),
                    offsets: Vec::new(),
                    lengths: Vec::new(),
                });
                batches.last_mut().unwrap()
            }
        };
        batch.offsets.push(batch.total_len());
        batch.members.push(idx);
        batch.lengths.push(len);
    }
    Ok(batches)
}

/// Output of a head at a coord/size/seg position, fed back when parsing.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadPick {
    Coord(Center),
    Size(Size2D),
    Seg(Option<std::sync::Arc<BinaryMask>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    TextOrEos,
    TextOrPresence,
    Coord,
    Size,
    Seg,
    CoordOrEoq,
    Eoq,
    End,
    HeadPick,
}

impl fmt::Display for Expected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Expected::TextOrEos => "text-or-eos-expected",
            Expected::TextOrPresence => "text-or-presence-expected",
            Expected::Coord => "coord-expected",
            Expected::Size => "size-expected",
            Expected::Seg => "seg-expected",
            Expected::CoordOrEoq => "coord-or-eoq-expected",
            Expected::Eoq => "eoq-expected",
            Expected::End => "end-expected",
            Expected::HeadPick => "head-pick-expected",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{expected} at token {position} (found {found})")]
pub struct ParseError {
    pub position: usize,
    pub expected: Expected,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuery {
    pub prompt_id: usize,
    pub prompt: String,
    pub present: bool,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSample {
    pub queries: Vec<ParsedQuery>,
    /// False when the stream ended before `<eos>`.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParseState {
    Start,
    Text,
    AfterPresent,
    AfterCoord,
    AfterSize,
    AfterSeg,
    AfterAbsent,
    Done,
}

/// Inverse of [`serialize_sample`]: rebuilds the query structure from a
/// token stream plus the head outputs at each coord/size/seg position.
/// Leading image placeholders are skipped.
pub fn parse_generated(
    tokens: &[TokenId],
    picks: &[HeadPick],
    vocab: &Vocab,
) -> Result<ParsedSample, ParseError> {
    let mut state = ParseState::Start;
    let mut queries: Vec<ParsedQuery> = Vec::new();
    let mut picks = picks.iter();
    let mut text = String::new();
    let mut center = None;
    let mut size = None;
    let img = vocab.special(Special::Image);
    let start = tokens.iter().take_while(|&&t| t == img).count();

    for (pos, &tok) in tokens.iter().enumerate().skip(start) {
        let err = |expected| ParseError {
            position: pos,
            expected,
            found: vocab.token_name(tok),
        };
        let special = vocab.as_special(tok);
        let is_text = vocab.is_text(tok);
        state = match state {
            ParseState::Start => {
                if is_text {
                    text.clear();
                    text.push(vocab.alphabet()[tok as usize]);
                    ParseState::Text
                } else if special == Some(Special::Eos) {
                    ParseState::Done
                } else {
                    return Err(err(Expected::TextOrEos));
                }
            }
            ParseState::Text => match special {
                _ if is_text => {
                    text.push(vocab.alphabet()[tok as usize]);
                    ParseState::Text
                }
                Some(Special::Present) | Some(Special::Absent) => {
                    let present = special == Some(Special::Present);
                    queries.push(ParsedQuery {
                        prompt_id: queries.len(),
                        prompt: std::mem::take(&mut text),
                        present,
                        instances: Vec::new(),
                    });
                    if present {
                        ParseState::AfterPresent
                    } else {
                        ParseState::AfterAbsent
                    }
                }
                _ => return Err(err(Expected::TextOrPresence)),
            },
            ParseState::AfterPresent | ParseState::AfterSeg => match special {
                Some(Special::Coord) => {
                    match picks.next() {
                        Some(HeadPick::Coord(c)) => center = Some(*c),
                        _ => return Err(err(Expected::HeadPick)),
                    }
                    ParseState::AfterCoord
                }
                Some(Special::Eoq) if state == ParseState::AfterSeg => ParseState::Start,
                _ if state == ParseState::AfterSeg => return Err(err(Expected::CoordOrEoq)),
                _ => return Err(err(Expected::Coord)),
            },
            ParseState::AfterCoord => match special {
                Some(Special::Size) => {
                    match picks.next() {
                        Some(HeadPick::Size(s)) => size = Some(*s),
                        _ => return Err(err(Expected::HeadPick)),
                    }
                    ParseState::AfterSize
                }
                _ => return Err(err(Expected::Size)),
            },
            ParseState::AfterSize => match special {
                Some(Special::Seg) => {
                    let mask = match picks.next() {
                        Some(HeadPick::Seg(m)) => m.clone(),
                        _ => return Err(err(Expected::HeadPick)),
                    };
                    let q = queries.last_mut().expect("query open");
                    q.instances.push(Instance {
                        center: center.take().expect("coord parsed"),
                        size: size.take().expect("size parsed"),
                        mask,
                    });
                    ParseState::AfterSeg
                }
                _ => return Err(err(Expected::Seg)),
            },
            ParseState::AfterAbsent => match special {
                Some(Special::Eoq) => ParseState::Start,
                _ => return Err(err(Expected::Eoq)),
            },
            ParseState::Done => return Err(err(Expected::End)),
        };
    }
    if state == ParseState::AfterSize {
        // Box resolved but no seg token yet: keep it as a box-only instance.
        if let (Some(q), Some(c), Some(s)) = (queries.last_mut(), center, size) {
            q.instances.push(Instance {
                center: c,
                size: s,
                mask: None,
            });
        }
    }
    Ok(ParsedSample {
        queries,
        complete: state == ParseState::Done,
    })
}

/// Head picks for a teacher-forced sequence, taken from its own targets.
pub fn teacher_picks(seq: &TokenSequence) -> Vec<HeadPick> {
    let mut out = Vec::new();
    for i in 0..seq.len() {
        let Some(k) = seq.targets[i] else { continue };
        let inst = &seq.instances[k];
        out.push(match seq.roles[i] {
            Role::Coord => HeadPick::Coord(inst.center),
            Role::Size => HeadPick::Size(inst.size),
            Role::Seg => HeadPick::Seg(inst.mask.clone()),
            _ => continue,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(x: f64, y: f64) -> Instance {
        Instance {
            center: Center { x, y },
            size: Size2D { w: 0.1, h: 0.1 },
            mask: None,
        }
    }

    fn centers(v: &[Instance]) -> Vec<(f64, f64)> {
        v.iter().map(|i| (i.center.x, i.center.y)).collect()
    }

    #[test]
    fn raster_order_examples() {
        let q = QuantConfig::default();
        assert!(raster_order(&[], q).unwrap().is_empty());
        let input = [inst(0.9, 0.1), inst(0.1, 0.1), inst(0.1, 0.9)];
        assert_eq!(
            centers(&raster_order(&input, q).unwrap()),
            vec![(0.1, 0.1), (0.9, 0.1), (0.1, 0.9)]
        );
        let mut a = inst(0.5, 0.5);
        a.size.w = 0.2;
        let b = inst(0.5, 0.5);
        let out = raster_order(&[a.clone(), b.clone()], q).unwrap();
        assert_eq!(out, vec![a, b]);
    }

    fn count(seq: &TokenSequence, vocab: &Vocab, s: Special) -> usize {
        seq.tokens.iter().filter(|&&t| t == vocab.special(s)).count()
    }

    #[test]
    fn serialize_negative_query() {
        let v = Vocab::default();
        let seq = serialize_sample(
            (2, 2),
            &[QueryInput { prompt: "cat", instances: &[] }],
            &v,
            &SerializeOptions::default(),
        )
        .unwrap();
        let names: Vec<String> = seq.tokens.iter().map(|&t| v.token_name(t)).collect();
        assert_eq!(
            names,
            ["<img>", "<img>", "<img>", "<img>", "c", "a", "t", "<absent>", "<eoq>", "<eos>"]
        );
        assert_eq!(seq.grid_pos[3], Some([1, 1]));
        assert!(seq.grid_pos[4..].iter().all(|g| g.is_none()));
        assert_eq!(seq.labels[3], None);
        assert_eq!(seq.labels[6], Some(v.special(Special::Absent)));
        assert_eq!(seq.labels[9], None);
    }

    #[test]
    fn serialize_positive_structure() {
        let v = Vocab::default();
        let insts = [inst(0.7, 0.2), inst(0.2, 0.2)];
        let seq = serialize_sample(
            (2, 2),
            &[
                QueryInput { prompt: "red", instances: &insts },
                QueryInput { prompt: "dog", instances: &[] },
            ],
            &v,
            &SerializeOptions::default(),
        )
        .unwrap();
        assert_eq!(count(&seq, &v, Special::Coord), 2);
        assert_eq!(count(&seq, &v, Special::Size), 2);
        assert_eq!(count(&seq, &v, Special::Seg), 2);
        assert_eq!(count(&seq, &v, Special::Eoq), 2);
        assert_eq!(count(&seq, &v, Special::Eos), 1);
        // First triplet is the leftmost instance (same row).
        let first_coord = seq.positions_with_role(Role::Coord).next().unwrap();
        assert_eq!(seq.instances[seq.targets[first_coord].unwrap()].center.x, 0.2);
        // Roles follow coord -> size -> seg for each instance.
        let roles: Vec<Role> = seq.roles.iter().copied().filter(|r| matches!(r, Role::Coord | Role::Size | Role::Seg)).collect();
        assert_eq!(roles, [Role::Coord, Role::Size, Role::Seg, Role::Coord, Role::Size, Role::Seg]);
    }

    #[test]
    fn serialize_errors() {
        let v = Vocab::default();
        let opts = SerializeOptions { instance_cap: 1, ..Default::default() };
        let two = [inst(0.1, 0.1), inst(0.2, 0.2)];
        assert!(matches!(
            serialize_sample((1, 1), &[QueryInput { prompt: "a", instances: &two }], &v, &opts),
            Err(SeqError::AboveCap { .. })
        ));
        assert!(matches!(
            serialize_sample((1, 1), &[QueryInput { prompt: "A", instances: &[] }], &v, &opts),
            Err(SeqError::BadChar('A'))
        ));
    }

    #[test]
    fn restart_positions_per_block() {
        let v = Vocab::default();
        let opts = SerializeOptions { positions: BlockPositions::RestartPerBlock, ..Default::default() };
        let seq = serialize_sample(
            (1, 2),
            &[QueryInput { prompt: "ab", instances: &[] }, QueryInput { prompt: "cd", instances: &[] }],
            &v,
            &opts,
        )
        .unwrap();
        // img img a b <absent> <eoq> c d <absent> <eoq> <eos>
        assert_eq!(seq.positions, vec![0, 1, 2, 3, 4, 5, 2, 3, 4, 5, 2]);
    }

    #[test]
    fn loss_mask_by_stage() {
        let v = Vocab::default();
        let insts = [inst(0.5, 0.5)];
        let seq = serialize_sample(
            (2, 2),
            &[QueryInput { prompt: "cat", instances: &insts }, QueryInput { prompt: "dog", instances: &[] }],
            &v,
            &SerializeOptions::default(),
        )
        .unwrap();
        let s1 = loss_mask(&seq, 1, &v);
        let s2 = loss_mask(&seq, 2, &v);
        for i in 0..seq.len() {
            if seq.roles[i] == Role::Image {
                assert!(!s1[i] && !s2[i]);
            }
            if let Some(t) = seq.labels[i] {
                if v.is_text(t) && seq.roles[i] != Role::Image {
                    assert!(s1[i], "stage 1 supervises text label at {i}");
                    assert!(!s2[i], "stage 2 ignores text label at {i}");
                }
            }
        }
        // The presence decision at the last prompt char stays supervised.
        let last_char = 4 + 2;
        assert_eq!(seq.labels[last_char], Some(v.special(Special::Present)));
        assert!(s2[last_char]);
    }

    fn toy_spec(mode: MaskMode) -> AttentionSpec {
        // image image | block1: t c | block2: t c | block3: t
        AttentionSpec {
            sample: vec![0; 7],
            roles: vec![Role::Image, Role::Image, Role::Text, Role::Control, Role::Text, Role::Control, Role::Text],
            blocks: [0, 0, 1, 1, 2, 2, 3].iter().map(|&b| BlockId(b)).collect(),
            mode,
        }
    }

    #[test]
    fn attends_examples() {
        let s = toy_spec(MaskMode::QueryMasked);
        assert!(attends(&s, 0, 1).unwrap());
        assert!(attends(&s, 1, 0).unwrap());
        assert!(attends(&s, 2, 0).unwrap());
        assert!(!attends(&s, 0, 2).unwrap());
        assert!(!attends(&s, 4, 2).unwrap());
        assert!(!attends(&s, 4, 3).unwrap());
        assert!(attends(&s, 5, 4).unwrap());
        assert!(!attends(&s, 2, 3).unwrap());
        let f = toy_spec(MaskMode::FullAr);
        assert!(attends(&f, 4, 2).unwrap());
        assert!(attends(&f, 6, 3).unwrap());
        assert!(!attends(&f, 2, 4).unwrap());
        assert!(attends(&s, 7, 0).is_err());
    }

    #[test]
    fn shared_block_is_visible_under_query_masking() {
        let mut s = toy_spec(MaskMode::QueryMasked);
        s.blocks[3] = BlockId::SHARED;
        assert!(attends(&s, 4, 3).unwrap());
        assert!(!attends(&s, 4, 2).unwrap());
    }

    #[test]
    fn attends_respects_sample_boundary() {
        let mut s = toy_spec(MaskMode::FullAr);
        s.sample = vec![0, 0, 0, 0, 1, 1, 1];
        assert!(!attends(&s, 4, 0).unwrap());
        assert!(!attends(&s, 4, 3).unwrap());
        assert!(attends(&s, 5, 4).unwrap());
    }

    #[test]
    fn pack_examples() {
        let b = pack(&[10, 10, 10], 25).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].lengths, vec![10, 10]);
        assert_eq!(b[0].offsets, vec![0, 10]);
        assert_eq!(b[1].members, vec![2]);
        assert_eq!(pack(&[7], 25).unwrap().len(), 1);
        assert_eq!(pack(&[26], 25), Err(SeqError::Oversized { len: 26, cap: 25 }));
        // First fit backfills earlier batches.
        let b = pack(&[20, 10, 5], 25).unwrap();
        assert_eq!(b[0].members, vec![0, 2]);
        assert_eq!(b[1].members, vec![1]);
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        let v = Vocab::default();
        let insts = [inst(0.3, 0.4), inst(0.6, 0.4)];
        let seq = serialize_sample(
            (2, 2),
            &[QueryInput { prompt: "box", instances: &insts }, QueryInput { prompt: "cup", instances: &[] }],
            &v,
            &SerializeOptions::default(),
        )
        .unwrap();
        let parsed = parse_generated(&seq.tokens, &teacher_picks(&seq), &v).unwrap();
        assert!(parsed.complete);
        assert_eq!(parsed.queries.len(), 2);
        assert_eq!(parsed.queries[0].prompt, "box");
        assert_eq!(parsed.queries[0].instances.len(), 2);
        assert!(!parsed.queries[1].present);

        let bad = [v.char_id('a').unwrap(), v.special(Special::Present), v.special(Special::Size)];
        let e = parse_generated(&bad, &[], &v).unwrap_err();
        assert_eq!(e.expected, Expected::Coord);
        assert_eq!(e.to_string(), "coord-expected at token 2 (found <size>)");

        let cut = &seq.tokens[..seq.len() - 3];
        let partial = parse_generated(cut, &teacher_picks(&seq), &v).unwrap();
        assert!(!partial.complete);
        assert_eq!(partial.queries.len(), 1);
        assert_eq!(partial.queries[0].instances.len(), 2);
    }
}
