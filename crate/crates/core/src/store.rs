//! Persistence: the `TLE1` binary embedding format and the line-oriented
//! manifest format.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! offset  size          field
//! 0       4             magic "TLE1"
//! 4       4             version (u32) = 1
//! 8       4             dim (u32)
//! 12      8             count (u64)
//! 20      count*dim*4   f32 values, row-major
//! ..      ..            count id records: u16 byte length + UTF-8 bytes
//! ```
//!
//! Manifest records, one per line (`#` starts a comment):
//!
//! ```text
//! VIDEO <video_id> <n_frames> <fps> <frame_id_prefix>
//! QA <question_id> <video_id> <correct_index> <q_embed_id> <opt_id0> .. <opt_id3> | <question> | <opt0> | .. | <opt3>
//! LABEL <question_id> <frame_index>
//! COMPOSITE <composite_id> <video_id,...>
//! PRED <question_id> <index>
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::composite;
use crate::datamodel::{
    frame_index_width, validate_corpus, Corpus, EmbeddingMatrix, LocalizationLabel,
    ModelError, QAItem, RelevanceMatrix, VideoManifest, Violation,
};

pub const MAGIC: &[u8; 4] = b"TLE1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after last id record")]
    TrailingBytes(usize),
    #[error("id {0:?} is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("id record {0} is not valid UTF-8")]
    BadId(usize),
    #[error("invalid matrix: {0}")]
    Matrix(#[from] ModelError),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{record}: missing or invalid field {field} (line {line})")]
    Field {
        line: usize,
        record: String,
        field: &'static str,
    },
    #[error("corpus has {} violation(s), first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("cannot serialize {0}")]
    Unrepresentable(String),
}

/// Writes `m` in the `TLE1` layout and returns the number of bytes written.
pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<u64, StoreError> {
    let bytes = encode_embeddings(m)?;
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(bytes.len() as u64)
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>, StoreError> {
    let id_bytes: usize = m.ids().iter().map(|id| 2 + id.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + m.values().len() * 4 + id_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let dim = u32::try_from(m.dim()).map_err(|_| StoreError::Unrepresentable("dim".into()))?;
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(m.count() as u64).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in m.ids() {
        let len = u16::try_from(id.len()).map_err(|_| StoreError::IdTooLong(id.clone()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    Ok(out)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, StoreError> {
    decode_embeddings(&fs::read(path)?)
}

/// Parses a `TLE1` buffer. The declared count is checked against the
/// buffer length before anything proportional to it is allocated.
pub fn decode_embeddings(buf: &[u8]) -> Result<EmbeddingMatrix, StoreError> {
    if buf.len() < HEADER_LEN {
        let mut magic = [0u8; 4];
        let n = buf.len().min(4);
        magic[..n].copy_from_slice(&buf[..n]);
        if magic[..n] != MAGIC[..n] {
            return Err(StoreError::BadMagic(magic));
        }
        return Err(StoreError::Truncated(format!("header needs 20 bytes, file has {}", buf.len())));
    }
    let magic: [u8; 4] = buf[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(buf[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(ModelError::ZeroDim.into());
    }

    let rest = &buf[HEADER_LEN..];
    let value_bytes = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(dim))
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= rest.len())
        .ok_or_else(|| {
            StoreError::Truncated(format!(
                "header declares {count} x {dim} values but only {} payload bytes remain",
                rest.len()
            ))
        })?;
    let count = count as usize;
    // every id record takes at least its 2-byte length prefix
    if count.saturating_mul(2) > rest.len() - value_bytes {
        return Err(StoreError::Truncated(format!("{count} id records do not fit")));
    }

    let values: Vec<f32> = rest[..value_bytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let mut cursor = &rest[value_bytes..];
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        if cursor.len() < 2 {
            return Err(StoreError::Truncated(format!("id record {i} length")));
        }
        let len = u16::from_le_bytes([cursor[0], cursor[1]]) as usize;
        cursor = &cursor[2..];
        if cursor.len() < len {
            return Err(StoreError::Truncated(format!("id record {i} bytes")));
        }
        let id = std::str::from_utf8(&cursor[..len]).map_err(|_| StoreError::BadId(i))?;
        ids.push(id.to_string());
        cursor = &cursor[len..];
    }
    if !cursor.is_empty() {
        return Err(StoreError::TrailingBytes(cursor.len()));
    }
    Ok(EmbeddingMatrix::new(dim, ids, values)?)
}

/// Parses a manifest and rejects it if any structural invariant fails.
/// Embedding references are checked separately, once a matrix is loaded.
pub fn read_manifest_set(path: impl AsRef<Path>) -> Result<Corpus, StoreError> {
    let corpus = parse_manifest(&fs::read_to_string(path)?)?;
    let violations = validate_corpus(&corpus, None);
    if violations.is_empty() {
        Ok(corpus)
    } else {
        Err(StoreError::Invalid(violations))
    }
}

/// Parses manifest text without validating it. Record order does not
/// matter: composites are resolved after every VIDEO line is read.
pub fn parse_manifest(text: &str) -> Result<Corpus, StoreError> {
    let mut corpus = Corpus::default();
    let mut pending_composites = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (tag, body) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
        match tag {
            "VIDEO" => corpus.videos.push(parse_video(body, line)?),
            "QA" => corpus.qa.push(parse_qa(body, line)?),
            "LABEL" => {
                let (qid, idx) = parse_pair(body, line, "LABEL", "frame_index")?;
                corpus.labels.push(LocalizationLabel {
                    question_id: qid,
                    frame_index: idx,
                });
            }
            "COMPOSITE" => {
                let toks: Vec<&str> = body.split_whitespace().collect();
                if toks.len() != 2 {
                    return Err(StoreError::Syntax {
                        line,
                        msg: "COMPOSITE expects <composite_id> <video_id,...>".into(),
                    });
                }
                let videos: Vec<String> = toks[1].split(',').map(str::to_string).collect();
                pending_composites.push((line, toks[0].to_string(), videos));
            }
            "PRED" => {}
            other => {
                return Err(StoreError::Syntax {
                    line,
                    msg: format!("unknown record type {other:?}"),
                })
            }
        }
    }

    for (line, id, video_ids) in pending_composites {
        let mut videos = Vec::with_capacity(video_ids.len());
        for vid in &video_ids {
            let v = corpus.video(vid).ok_or_else(|| StoreError::Syntax {
                line,
                msg: format!("composite {id} references unknown video {vid:?}"),
            })?;
            videos.push(v.clone());
        }
        let c = composite::build_composite(&id, &videos).map_err(|e| StoreError::Syntax {
            line,
            msg: format!("composite {id}: {e}"),
        })?;
        corpus.composites.push(c);
    }
    Ok(corpus)
}

fn parse_video(body: &str, line: usize) -> Result<VideoManifest, StoreError> {
    let toks: Vec<&str> = body.split_whitespace().collect();
    let Some(&video_id) = toks.first() else {
        return Err(StoreError::Syntax {
            line,
            msg: "VIDEO record without video_id".into(),
        });
    };
    let record = format!("VIDEO {video_id}");
    let field = |field| StoreError::Field {
        line,
        record: record.clone(),
        field,
    };
    let n_frames: usize = toks.get(1).and_then(|t| t.parse().ok()).ok_or_else(|| field("n_frames"))?;
    let fps: f64 = toks.get(2).and_then(|t| t.parse().ok()).ok_or_else(|| field("fps"))?;
    // an empty prefix is written as a bare trailing space, so it may be absent
    let prefix = toks.get(3).copied().unwrap_or("");
    if toks.len() > 4 {
        return Err(StoreError::Syntax {
            line,
            msg: format!("{record}: too many fields"),
        });
    }
    Ok(VideoManifest::with_prefix(video_id, n_frames, fps, prefix))
}

fn parse_qa(body: &str, line: usize) -> Result<QAItem, StoreError> {
    let mut parts = body.split('|').map(str::trim);
    let head: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
    let texts: Vec<&str> = parts.collect();
    let Some(&question_id) = head.first() else {
        return Err(StoreError::Syntax {
            line,
            msg: "QA record without question_id".into(),
        });
    };
    let record = format!("QA {question_id}");
    let field = |field| StoreError::Field {
        line,
        record: record.clone(),
        field,
    };
    let video_id = head.get(1).ok_or_else(|| field("video_id"))?;
    let correct_index: usize = head
        .get(2)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| field("correct_index"))?;
    let question_embedding_id = head.get(3).ok_or_else(|| field("q_embed_id"))?;
    let option_embedding_ids: Vec<String> = head[4.min(head.len())..].iter().map(|s| s.to_string()).collect();
    if option_embedding_ids.is_empty() {
        return Err(field("option ids"));
    }
    let (question_text, options) = texts.split_first().ok_or_else(|| field("question text"))?;
    Ok(QAItem {
        question_id: question_id.to_string(),
        video_id: video_id.to_string(),
        question_text: question_text.to_string(),
        options: options.iter().map(|s| s.to_string()).collect(),
        correct_index,
        question_embedding_id: question_embedding_id.to_string(),
        option_embedding_ids,
    })
}

fn parse_pair(body: &str, line: usize, tag: &str, what: &'static str) -> Result<(String, usize), StoreError> {
    let toks: Vec<&str> = body.split_whitespace().collect();
    let Some(&qid) = toks.first() else {
        return Err(StoreError::Syntax {
            line,
            msg: format!("{tag} record without question_id"),
        });
    };
    let field = || StoreError::Field {
        line,
        record: format!("{tag} {qid}"),
        field: what,
    };
    if toks.len() != 2 {
        return Err(field());
    }
    let idx = toks[1].parse().map_err(|_| field())?;
    Ok((qid.to_string(), idx))
}

fn check_token(s: &str, what: &str) -> Result<(), StoreError> {
    if s.is_empty() && what != "frame id prefix" || s.chars().any(|c| c.is_whitespace() || c == '|') {
        return Err(StoreError::Unrepresentable(format!("{what} {s:?}")));
    }
    Ok(())
}

fn check_text(s: &str) -> Result<(), StoreError> {
    if s.contains('|') || s.contains('\n') || s.contains('\r') {
        return Err(StoreError::Unrepresentable(format!("text {s:?}")));
    }
    Ok(())
}

/// Renders a corpus in manifest syntax: videos, questions, composites, labels.
pub fn format_manifest(corpus: &Corpus) -> Result<String, StoreError> {
    let mut out = String::new();
    for v in &corpus.videos {
        check_token(&v.video_id, "video id")?;
        let prefix = v
            .frame_id_prefix()
            .ok_or_else(|| StoreError::Unrepresentable(format!("frame ids of video {}", v.video_id)))?;
        check_token(prefix, "frame id prefix")?;
        debug_assert!(frame_index_width(v.n_frames) > 0);
        writeln!(out, "VIDEO {} {} {} {}", v.video_id, v.n_frames, v.fps, prefix).unwrap();
    }
    for q in &corpus.qa {
        for t in [&q.question_id, &q.video_id, &q.question_embedding_id]
            .into_iter()
            .chain(&q.option_embedding_ids)
        {
            check_token(t, "id")?;
        }
        write!(
            out,
            "QA {} {} {} {} {}",
            q.question_id,
            q.video_id,
            q.correct_index,
            q.question_embedding_id,
            q.option_embedding_ids.join(" ")
        )
        .unwrap();
        for t in std::iter::once(&q.question_text).chain(&q.options) {
            check_text(t)?;
            write!(out, " | {t}").unwrap();
        }
        out.push('\n');
    }
    for c in &corpus.composites {
        check_token(&c.composite_id, "composite id")?;
        let ids: Vec<&str> = c.video_ids().collect();
        writeln!(out, "COMPOSITE {} {}", c.composite_id, ids.join(",")).unwrap();
    }
    for l in &corpus.labels {
        writeln!(out, "LABEL {} {}", l.question_id, l.frame_index).unwrap();
    }
    Ok(out)
}

pub fn write_manifest(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), StoreError> {
    fs::write(path, format_manifest(corpus)?)?;
    Ok(())
}

/// Predictions, keyed by question id. Values are frame indices or option
/// indices depending on the metric that consumes them.
pub type Predictions = BTreeMap<String, usize>;

/// Reads `PRED` lines; every other record type is ignored.
pub fn parse_predictions(text: &str) -> Result<Predictions, StoreError> {
    let mut out = Predictions::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if let Some(body) = trimmed.strip_prefix("PRED") {
            if !body.starts_with(char::is_whitespace) {
                continue;
            }
            let (qid, value) = parse_pair(body, line, "PRED", "index")?;
            if out.insert(qid.clone(), value).is_some() {
                return Err(StoreError::Syntax {
                    line,
                    msg: format!("duplicate prediction for {qid}"),
                });
            }
        }
    }
    Ok(out)
}

pub fn format_predictions(preds: &Predictions) -> String {
    preds.iter().map(|(q, v)| format!("PRED {q} {v}\n")).collect()
}

/// Relevance scores as TSV: a header of question ids, one row per frame,
/// six decimals.
pub fn format_relevance_tsv(r: &RelevanceMatrix) -> String {
    let mut out = String::from("frame_id");
    for q in &r.question_ids {
        out.push('\t');
        out.push_str(q);
    }
    out.push('\n');
    for (i, f) in r.frame_ids.iter().enumerate() {
        out.push_str(f);
        for s in r.frame_row(i) {
            write!(out, "\t{s:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`format_relevance_tsv`] up to the six-decimal rounding.
pub fn parse_relevance_tsv(text: &str) -> Result<RelevanceMatrix, StoreError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(StoreError::Syntax {
        line: 1,
        msg: "empty relevance table".into(),
    })?;
    let question_ids: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let mut frame_ids = Vec::new();
    let mut scores = Vec::new();
    let mut seen = HashMap::new();
    for (idx, row) in lines {
        let mut cells = row.split('\t');
        let fid = cells.next().unwrap_or_default().to_string();
        let before = scores.len();
        for c in cells {
            scores.push(c.parse::<f64>().map_err(|_| StoreError::Syntax {
                line: idx + 1,
                msg: format!("bad score {c:?}"),
            })?);
        }
        if scores.len() - before != question_ids.len() || seen.insert(fid.clone(), ()).is_some() {
            return Err(StoreError::Syntax {
                line: idx + 1,
                msg: "malformed relevance row".into(),
            });
        }
        frame_ids.push(fid);
    }
    Ok(RelevanceMatrix::new(frame_ids, question_ids, scores)?)
}
