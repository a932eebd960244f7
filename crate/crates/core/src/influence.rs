//! Leave-frame-out influence over a pluggable answer scorer.
//!
//! The margin of a frame set is the correct option's score minus the best
//! incorrect option's score. A frame's influence is how much the margin
//! drops when that single frame is removed; the predicted key frame is the
//! first frame of largest influence.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use thiserror::Error;

use crate::datamodel::{Corpus, EmbeddingMatrix, InfluenceProfile, QAItem, NUM_OPTIONS};
use crate::relevance::norm;

/// Margin assigned to the empty frame set, which is never scored.
pub const MARGIN_FLOOR: f64 = 0.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScorerError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("empty frame set")]
    NoFrames,
    #[error("option {0} has zero norm")]
    ZeroNormOption(usize),
    #[error("scorer timed out after {0:?}")]
    Timeout(Duration),
    #[error("unparseable scorer response {0:?}")]
    BadResponse(String),
    #[error("scorer process: {0}")]
    Process(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum InfluenceError {
    #[error("question {question}: no frames to score")]
    NoFrames { question: String },
    #[error("question {question}: unresolved embedding {id:?}")]
    Unresolved { question: String, id: String },
    #[error("question {question}: expected 4 options, got {got}")]
    OptionCount { question: String, got: usize },
    #[error("question {question}: correct_index {index} out of range")]
    CorrectIndex { question: String, index: usize },
    #[error("question {question}: unknown video {video:?}")]
    UnknownVideo { question: String, video: String },
    #[error("question {question}, scoring without frame {frame:?}: {source}")]
    Scorer {
        question: String,
        /// `None` when the full frame set was being scored.
        frame: Option<usize>,
        source: ScorerError,
    },
}

/// Everything a scorer sees for one evaluation.
#[derive(Debug, Clone)]
pub struct ScoreRequest<'a> {
    pub question_id: &'a str,
    pub frame_ids: Vec<&'a str>,
    pub frames: Vec<&'a [f32]>,
    pub question: &'a [f32],
    pub option_ids: [&'a str; NUM_OPTIONS],
    pub options: [&'a [f32]; NUM_OPTIONS],
}

/// Deterministic map from (frames, question, options) to one score per option.
pub trait AnswerScorer: Sync {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<[f64; NUM_OPTIONS], ScorerError>;

    /// Whether `score` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Offline stand-in for a video LLM: cosine between the mean frame and
/// each option. A zero mean scores every option 0.
#[derive(Debug, Default, Clone, Copy)]
pub struct SurrogateScorer;

impl AnswerScorer for SurrogateScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<[f64; NUM_OPTIONS], ScorerError> {
        let first = request.frames.first().ok_or(ScorerError::NoFrames)?;
        let dim = first.len();
        let mut mean = vec![0.0f64; dim];
        for f in &request.frames {
            if f.len() != dim {
                return Err(ScorerError::DimMismatch(dim, f.len()));
            }
            for (m, x) in mean.iter_mut().zip(f.iter()) {
                *m += *x as f64;
            }
        }
        let n = request.frames.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mean_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();

        let mut scores = [0.0; NUM_OPTIONS];
        for (j, opt) in request.options.iter().enumerate() {
            if opt.len() != dim {
                return Err(ScorerError::DimMismatch(dim, opt.len()));
            }
            if mean_norm == 0.0 {
                continue;
            }
            let on = norm(opt);
            if on == 0.0 {
                return Err(ScorerError::ZeroNormOption(j));
            }
            let d: f64 = mean.iter().zip(opt.iter()).map(|(m, o)| m * *o as f64).sum();
            scores[j] = (d / (mean_norm * on)).clamp(-1.0, 1.0);
        }
        Ok(scores)
    }
}

/// Talks to a child process over its standard streams.
///
/// Request, one line: `<question_id> <frame_id,...> <opt_id0,...,opt_id3>`.
/// Response, one line: four decimal scores separated by whitespace.
pub struct ExecScorer {
    inner: Mutex<ExecState>,
    timeout: Duration,
}

struct ExecState {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    // set after a timeout: a late reply would desynchronize later requests
    broken: bool,
}

impl ExecScorer {
    /// Starts `command` through `sh -c`.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, ScorerError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScorerError::Process(e.to_string()))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            inner: Mutex::new(ExecState {
                child,
                stdin,
                lines: rx,
                broken: false,
            }),
            timeout,
        })
    }
}

pub fn format_scorer_request(request: &ScoreRequest<'_>) -> String {
    format!(
        "{} {} {}\n",
        request.question_id,
        request.frame_ids.join(","),
        request.option_ids.join(",")
    )
}

pub fn parse_scorer_response(line: &str) -> Result<[f64; NUM_OPTIONS], ScorerError> {
    let bad = || ScorerError::BadResponse(line.to_string());
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(bad)?;
    values.try_into().map_err(|_| bad())
}

impl AnswerScorer for ExecScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<[f64; NUM_OPTIONS], ScorerError> {
        let mut state = self.inner.lock().map_err(|_| ScorerError::Process("poisoned".into()))?;
        if state.broken {
            return Err(ScorerError::Process("scorer is out of sync after an earlier timeout".into()));
        }
        let io_err = |e: std::io::Error| ScorerError::Process(e.to_string());
        state
            .stdin
            .write_all(format_scorer_request(request).as_bytes())
            .map_err(io_err)?;
        state.stdin.flush().map_err(io_err)?;
        match state.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => parse_scorer_response(&line),
            Ok(Err(e)) => Err(io_err(e)),
            Err(RecvTimeoutError::Timeout) => {
                state.broken = true;
                Err(ScorerError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(ScorerError::Process("scorer closed its output".into()))
            }
        }
    }

    fn concurrent(&self) -> bool {
        false
    }
}

impl Drop for ExecScorer {
    fn drop(&mut self) {
        if let Ok(state) = self.inner.get_mut() {
            let _ = state.child.kill();
            let _ = state.child.wait();
        }
    }
}

fn margin(scores: &[f64; NUM_OPTIONS], correct: usize) -> f64 {
    let best_wrong = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != correct)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    scores[correct] - best_wrong
}

/// Influence of every frame on the correct-answer margin.
///
/// Calls the scorer `n + 1` times for `n >= 2` frames and once for a
/// single frame, whose removal leaves the empty set at [`MARGIN_FLOOR`].
pub fn leave_frame_out(
    scorer: &dyn AnswerScorer,
    frame_ids: &[&str],
    qa: &QAItem,
    embeddings: &EmbeddingMatrix,
) -> Result<InfluenceProfile, InfluenceError> {
    let question = qa.question_id.clone();
    if frame_ids.is_empty() {
        return Err(InfluenceError::NoFrames { question });
    }
    if qa.option_embedding_ids.len() != NUM_OPTIONS {
        return Err(InfluenceError::OptionCount {
            question,
            got: qa.option_embedding_ids.len(),
        });
    }
    if qa.correct_index >= NUM_OPTIONS {
        return Err(InfluenceError::CorrectIndex {
            question,
            index: qa.correct_index,
        });
    }
    let lookup = |id: &str| {
        embeddings.get(id).ok_or_else(|| InfluenceError::Unresolved {
            question: qa.question_id.clone(),
            id: id.to_string(),
        })
    };
    let frames: Vec<&[f32]> = frame_ids.iter().map(|id| lookup(id)).collect::<Result<_, _>>()?;
    let question_vec = lookup(&qa.question_embedding_id)?;
    let mut options: [&[f32]; NUM_OPTIONS] = [&[]; NUM_OPTIONS];
    let mut option_ids: [&str; NUM_OPTIONS] = [""; NUM_OPTIONS];
    for (j, id) in qa.option_embedding_ids.iter().enumerate() {
        options[j] = lookup(id)?;
        option_ids[j] = id;
    }

    let run = |skip: Option<usize>| {
        let keep = |i: &usize| Some(*i) != skip;
        let request = ScoreRequest {
            question_id: &qa.question_id,
            frame_ids: (0..frame_ids.len()).filter(keep).map(|i| frame_ids[i]).collect(),
            frames: (0..frames.len()).filter(keep).map(|i| frames[i]).collect(),
            question: question_vec,
            option_ids,
            options,
        };
        scorer
            .score(&request)
            .map(|s| margin(&s, qa.correct_index))
            .map_err(|source| InfluenceError::Scorer {
                question: qa.question_id.clone(),
                frame: skip,
                source,
            })
    };

    let full = run(None)?;
    let influences: Vec<f64> = if frames.len() == 1 {
        vec![full - MARGIN_FLOOR]
    } else {
        (0..frames.len())
            .map(|i| run(Some(i)).map(|m| full - m))
            .collect::<Result<_, _>>()?
    };
    let predicted_key_frame = first_argmax(&influences);
    Ok(InfluenceProfile {
        question_id: qa.question_id.clone(),
        influences,
        predicted_key_frame,
    })
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs [`leave_frame_out`] for every question, over the frames the
/// question is localized in (its composite if it has one). Errors stay per
/// item. Runs in parallel only when the scorer allows it.
pub fn batch_influence(
    scorer: &dyn AnswerScorer,
    corpus: &Corpus,
    embeddings: &EmbeddingMatrix,
) -> Vec<Result<InfluenceProfile, InfluenceError>> {
    let one = |qa: &QAItem| {
        let frames = corpus
            .search_frames(qa)
            .ok_or_else(|| InfluenceError::UnknownVideo {
                question: qa.question_id.clone(),
                video: qa.video_id.clone(),
            })?;
        leave_frame_out(scorer, &frames, qa, embeddings)
    };
    if scorer.concurrent() {
        corpus.qa.par_iter().map(one).collect()
    } else {
        corpus.qa.iter().map(one).collect()
    }
}
