//! Shared domain types and corpus validation.
//!
//! Every type here is immutable once built. Cross-references between
//! manifests, QA items, labels and embedding rows are opaque string ids so
//! that composites can splice frames from several source videos.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of answer options every question carries.
pub const NUM_OPTIONS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("values length {got} does not match count {count} x dim {dim}")]
    ValuesLength { got: usize, count: usize, dim: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in row {id:?}")]
    NonFinite { id: String },
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("invalid projector: {0}")]
    Projector(String),
}

/// Dense row-major store of embedding vectors keyed by unique string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ZeroDim);
        }
        if values.len() != ids.len() * dim {
            return Err(ModelError::ValuesLength {
                got: values.len(),
                count: ids.len(),
                dim,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(ModelError::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                id: ids[pos / dim].clone(),
            });
        }
        Ok(Self {
            dim,
            ids,
            values,
            index,
        })
    }

    /// Builds a matrix from `(id, vector)` pairs. All vectors must share `dim`.
    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (id, v) in rows {
            let id = id.into();
            if v.len() != dim {
                return Err(ModelError::ValuesLength {
                    got: v.len(),
                    count: 1,
                    dim,
                });
            }
            ids.push(id);
            values.extend_from_slice(&v);
        }
        Self::new(dim, ids, values)
    }

    pub fn empty(dim: usize) -> Result<Self, ModelError> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Copies the named rows, in the given order, into a new matrix.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, ModelError> {
        let mut out_ids = Vec::with_capacity(ids.len());
        let mut values = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let id = id.as_ref();
            let row = self
                .position(id)
                .ok_or_else(|| ModelError::UnknownId(id.to_string()))?;
            out_ids.push(id.to_string());
            values.extend_from_slice(self.row(row));
        }
        Self::new(self.dim, out_ids, values)
    }
}

/// A source video sampled into `n_frames` uniformly spaced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoManifest {
    pub video_id: String,
    pub n_frames: usize,
    pub fps: f64,
    pub frame_ids: Vec<String>,
}

impl VideoManifest {
    /// Frame ids are `<prefix><index>` with the index zero-padded to the
    /// number of decimal digits in `n_frames`.
    pub fn with_prefix(video_id: impl Into<String>, n_frames: usize, fps: f64, prefix: &str) -> Self {
        let width = frame_index_width(n_frames);
        let frame_ids = (0..n_frames)
            .map(|i| format!("{prefix}{i:0width$}"))
            .collect();
        Self {
            video_id: video_id.into(),
            n_frames,
            fps,
            frame_ids,
        }
    }

    /// Timestamp of a frame in seconds under uniform sampling.
    pub fn timestamp(&self, frame_index: usize) -> f64 {
        frame_index as f64 / self.fps
    }

    /// Recovers the prefix if the frame ids follow the `<prefix><index>` scheme.
    pub fn frame_id_prefix(&self) -> Option<&str> {
        let width = frame_index_width(self.n_frames);
        let first = self.frame_ids.first()?;
        let prefix = first.get(..first.len().checked_sub(width)?)?;
        let matches = self
            .frame_ids
            .iter()
            .enumerate()
            .all(|(i, id)| id.strip_prefix(prefix) == Some(&format!("{i:0width$}")));
        (matches && self.frame_ids.len() == self.n_frames).then_some(prefix)
    }
}

pub(crate) fn frame_index_width(n_frames: usize) -> usize {
    n_frames.max(1).to_string().len()
}

/// A multiple-choice question attached to one video.
#[derive(Debug, Clone, PartialEq)]
pub struct QAItem {
    pub question_id: String,
    pub video_id: String,
    pub question_text: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    pub question_embedding_id: String,
    pub option_embedding_ids: Vec<String>,
}

/// Ground-truth frame for a question. The index is global when the
/// question's video belongs to a composite, local otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct LocalizationLabel {
    pub question_id: String,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub video_id: String,
    pub start_global: usize,
    pub n_frames: usize,
}

impl Segment {
    pub fn end_global(&self) -> usize {
        self.start_global + self.n_frames
    }

    pub fn contains(&self, global: usize) -> bool {
        global >= self.start_global && global < self.end_global()
    }
}

/// Whole source videos spliced end to end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeVideo {
    pub composite_id: String,
    pub segments: Vec<Segment>,
    pub total_frames: usize,
}

impl CompositeVideo {
    pub fn segment(&self, video_id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.video_id == video_id)
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|s| s.video_id.as_str())
    }

    /// Describes the first tiling defect, if any.
    pub fn tiling_error(&self) -> Option<String> {
        let mut next = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.n_frames == 0 {
                return Some(format!("segment {i} is empty"));
            }
            if s.start_global != next {
                return Some(format!(
                    "segment {i} starts at {} but previous ends at {next}",
                    s.start_global
                ));
            }
            next = s.end_global();
        }
        (next != self.total_frames)
            .then(|| format!("segments end at {next} but total_frames is {}", self.total_frames))
    }
}

/// Scores of frames (rows) against questions (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    pub frame_ids: Vec<String>,
    pub question_ids: Vec<String>,
    scores: Vec<f64>,
}

impl RelevanceMatrix {
    /// `scores` is row-major, one row per frame. Entries are clamped to [-1, 1].
    pub fn new(
        frame_ids: Vec<String>,
        question_ids: Vec<String>,
        mut scores: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if scores.len() != frame_ids.len() * question_ids.len() {
            return Err(ModelError::ValuesLength {
                got: scores.len(),
                count: frame_ids.len(),
                dim: question_ids.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(ModelError::NonFinite {
                id: "relevance score".into(),
            });
        }
        for s in &mut scores {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self {
            frame_ids,
            question_ids,
            scores,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn n_questions(&self) -> usize {
        self.question_ids.len()
    }

    pub fn get(&self, frame: usize, question: usize) -> f64 {
        self.scores[frame * self.question_ids.len() + question]
    }

    pub fn frame_row(&self, frame: usize) -> &[f64] {
        let m = self.question_ids.len();
        &self.scores[frame * m..(frame + 1) * m]
    }

    pub fn question_index(&self, question_id: &str) -> Option<usize> {
        self.question_ids.iter().position(|q| q == question_id)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Linear map `h = W z + b` from visual-feature space to token space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_out x d_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Projector {
    pub fn new(d_in: usize, d_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, ModelError> {
        let p = Self {
            d_in,
            d_out,
            weights,
            bias,
        };
        p.check()?;
        Ok(p)
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            d_in: dim,
            d_out: dim,
            weights,
            bias: vec![0.0; dim],
        }
    }

    /// Re-checks invariants, e.g. after deserialization.
    pub fn check(&self) -> Result<(), ModelError> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(ModelError::Projector("dimensions must be positive".into()));
        }
        if self.weights.len() != self.d_in * self.d_out || self.bias.len() != self.d_out {
            return Err(ModelError::Projector("weight or bias length mismatch".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(ModelError::Projector("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.d_in + inp]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceProfile {
    pub question_id: String,
    pub influences: Vec<f64>,
    pub predicted_key_frame: usize,
}

/// One record per broken invariant or dangling reference.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl Violation {
    fn new(subject: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Everything a manifest file describes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub videos: Vec<VideoManifest>,
    pub qa: Vec<QAItem>,
    pub labels: Vec<LocalizationLabel>,
    pub composites: Vec<CompositeVideo>,
}

impl Corpus {
    pub fn video(&self, video_id: &str) -> Option<&VideoManifest> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn question(&self, question_id: &str) -> Option<&QAItem> {
        self.qa.iter().find(|q| q.question_id == question_id)
    }

    /// The unique composite containing `video_id`, if any.
    pub fn composite_of(&self, video_id: &str) -> Option<&CompositeVideo> {
        self.composites
            .iter()
            .find(|c| c.segment(video_id).is_some())
    }

    /// Frame ids a question is localized over: the whole composite when its
    /// video is spliced into one, otherwise the video itself.
    pub fn search_frames(&self, qa: &QAItem) -> Option<Vec<&str>> {
        match self.composite_of(&qa.video_id) {
            Some(c) => {
                let mut ids = Vec::with_capacity(c.total_frames);
                for s in &c.segments {
                    ids.extend(self.video(&s.video_id)?.frame_ids.iter().map(String::as_str));
                }
                Some(ids)
            }
            None => Some(
                self.video(&qa.video_id)?
                    .frame_ids
                    .iter()
                    .map(String::as_str)
                    .collect(),
            ),
        }
    }
}

/// Checks every invariant and cross-reference. Embedding checks run only
/// when a matrix is supplied. The result is sorted and deduplicated, so it
/// does not depend on input order.
pub fn validate_corpus(corpus: &Corpus, embeddings: Option<&EmbeddingMatrix>) -> Vec<Violation> {
    let mut out = BTreeSet::new();
    let mut push = |subject: &str, message: String| {
        out.insert(Violation::new(subject, message));
    };

    let mut video_counts: HashMap<&str, usize> = HashMap::new();
    for v in &corpus.videos {
        *video_counts.entry(&v.video_id).or_default() += 1;
    }
    let mut frame_owner: HashMap<&str, &str> = HashMap::new();
    for v in &corpus.videos {
        let subject = format!("video {}", v.video_id);
        if video_counts[v.video_id.as_str()] > 1 {
            push(&subject, "duplicate video_id".into());
        }
        if v.n_frames == 0 {
            push(&subject, "n_frames must be positive".into());
        }
        if v.n_frames != v.frame_ids.len() {
            push(
                &subject,
                format!("n_frames {} != frame_ids.count {}", v.n_frames, v.frame_ids.len()),
            );
        }
        if !(v.fps.is_finite() && v.fps > 0.0) {
            push(&subject, format!("fps must be positive, got {}", v.fps));
        }
        for fid in &v.frame_ids {
            if let Some(prev) = frame_owner.insert(fid, &v.video_id) {
                if prev != v.video_id || video_counts[v.video_id.as_str()] == 1 {
                    push(&subject, format!("frame id {fid:?} is not unique"));
                }
            }
            check_embedding(embeddings, &subject, "frame", fid, &mut push);
        }
    }

    let mut question_counts: HashMap<&str, usize> = HashMap::new();
    for q in &corpus.qa {
        *question_counts.entry(&q.question_id).or_default() += 1;
    }
    for q in &corpus.qa {
        let subject = format!("question {}", q.question_id);
        if question_counts[q.question_id.as_str()] > 1 {
            push(&subject, "duplicate question_id".into());
        }
        if !video_counts.contains_key(q.video_id.as_str()) {
            push(&subject, format!("unknown video {:?}", q.video_id));
        }
        if q.options.len() != NUM_OPTIONS {
            push(&subject, format!("options.count != 4 (got {})", q.options.len()));
        }
        if q.option_embedding_ids.len() != NUM_OPTIONS {
            push(
                &subject,
                format!(
                    "option_embedding_ids.count != 4 (got {})",
                    q.option_embedding_ids.len()
                ),
            );
        }
        if q.correct_index >= NUM_OPTIONS {
            push(&subject, format!("correct_index {} out of range", q.correct_index));
        }
        check_embedding(embeddings, &subject, "question", &q.question_embedding_id, &mut push);
        for oid in &q.option_embedding_ids {
            check_embedding(embeddings, &subject, "option", oid, &mut push);
        }
    }

    let mut composite_counts: HashMap<&str, usize> = HashMap::new();
    let mut membership: HashMap<&str, usize> = HashMap::new();
    for c in &corpus.composites {
        *composite_counts.entry(&c.composite_id).or_default() += 1;
        let mut seen = HashSet::new();
        for s in &c.segments {
            if seen.insert(s.video_id.as_str()) {
                *membership.entry(&s.video_id).or_default() += 1;
            }
        }
    }
    for c in &corpus.composites {
        let subject = format!("composite {}", c.composite_id);
        if composite_counts[c.composite_id.as_str()] > 1 {
            push(&subject, "duplicate composite_id".into());
        }
        if c.segments.len() < 2 {
            push(&subject, "needs at least 2 videos".into());
        }
        if let Some(e) = c.tiling_error() {
            push(&subject, e);
        }
        let mut seen = HashSet::new();
        for s in &c.segments {
            if !seen.insert(s.video_id.as_str()) {
                push(&subject, format!("video {:?} appears twice", s.video_id));
            }
            match corpus.video(&s.video_id) {
                None => push(&subject, format!("unknown video {:?}", s.video_id)),
                Some(v) if v.n_frames != s.n_frames => push(
                    &subject,
                    format!(
                        "segment {:?} has {} frames but video has {}",
                        s.video_id, s.n_frames, v.n_frames
                    ),
                ),
                Some(_) => {}
            }
            if membership[s.video_id.as_str()] > 1 {
                push(&subject, format!("video {:?} belongs to several composites", s.video_id));
            }
        }
    }

    let mut label_counts: HashMap<&str, usize> = HashMap::new();
    for l in &corpus.labels {
        *label_counts.entry(&l.question_id).or_default() += 1;
    }
    for l in &corpus.labels {
        let subject = format!("label {}", l.question_id);
        if label_counts[l.question_id.as_str()] > 1 {
            push(&subject, "duplicate label".into());
        }
        let Some(q) = corpus.question(&l.question_id) else {
            push(&subject, "unknown question".into());
            continue;
        };
        let limit = match corpus.composite_of(&q.video_id) {
            Some(c) => Some(c.total_frames),
            None => corpus.video(&q.video_id).map(|v| v.n_frames),
        };
        if let Some(limit) = limit {
            if l.frame_index >= limit {
                push(
                    &subject,
                    format!("label out of range: frame_index {} >= {limit}", l.frame_index),
                );
            }
        }
    }

    out.into_iter().collect()
}

fn check_embedding(
    embeddings: Option<&EmbeddingMatrix>,
    subject: &str,
    role: &str,
    id: &str,
    push: &mut impl FnMut(&str, String),
) {
    let Some(m) = embeddings else { return };
    match m.get(id) {
        None => push(subject, format!("{role} embedding {id:?} does not resolve")),
        Some(v) if v.iter().all(|x| *x == 0.0) => {
            push(subject, format!("{role} embedding {id:?} has zero norm"))
        }
        Some(_) => {}
    }
}
