//! Generated corpora with a planted key frame per question.
//!
//! `TopCosine` plants, for every question, one frame that is a positive
//! multiple of the question vector; every other frame is Gaussian noise.
//! `OrthogonalOptions` uses the first four basis vectors as answer options,
//! plants the correct option's vector as one frame and keeps every other
//! frame orthogonal to all options. Labels are the planted local indices.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::datamodel::{Corpus, EmbeddingMatrix, LocalizationLabel, QAItem, VideoManifest, NUM_OPTIONS};
use crate::relevance::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantKind {
    TopCosine,
    OrthogonalOptions,
}

impl std::str::FromStr for PlantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "top-cosine" => Ok(Self::TopCosine),
            "orthogonal" => Ok(Self::OrthogonalOptions),
            other => Err(format!("unknown corpus kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub kind: PlantKind,
    pub videos: usize,
    pub questions_per_video: usize,
    pub frames: usize,
    pub dim: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: PlantKind::TopCosine,
            videos: 10,
            questions_per_video: 1,
            frames: 100,
            dim: 64,
            fps: 3.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("need at least one video, question and frame")]
    Empty,
    #[error("{questions} questions per video need as many distinct frames, have {frames}")]
    TooManyQuestions { questions: usize, frames: usize },
    #[error("orthogonal construction needs dim > {NUM_OPTIONS} and one question per video")]
    Orthogonal,
    #[error("could not plant a unique maximum after many attempts")]
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub embeddings: EmbeddingMatrix,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn basis(dim: usize, i: usize) -> Vec<f32> {
    let mut e = vec![0.0; dim];
    e[i] = 1.0;
    e
}

/// True when `planted` is the first index of strictly maximal cosine with
/// `query` among `frames`, checked by scanning every frame.
pub fn is_unique_top(frames: &[Vec<f32>], query: &[f32], planted: usize) -> bool {
    let target = cosine(&frames[planted], query).unwrap_or(f64::NEG_INFINITY);
    frames
        .iter()
        .enumerate()
        .all(|(i, f)| i == planted || cosine(f, query).map_or(true, |c| c < target))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    if cfg.videos == 0 || cfg.questions_per_video == 0 || cfg.frames == 0 || cfg.dim == 0 {
        return Err(SynthError::Empty);
    }
    if cfg.questions_per_video > cfg.frames {
        return Err(SynthError::TooManyQuestions {
            questions: cfg.questions_per_video,
            frames: cfg.frames,
        });
    }
    if cfg.kind == PlantKind::OrthogonalOptions && (cfg.dim <= NUM_OPTIONS || cfg.questions_per_video != 1) {
        return Err(SynthError::Orthogonal);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = Corpus::default();
    let mut rows: Vec<(String, Vec<f32>)> = Vec::new();

    for v in 0..cfg.videos {
        let video_id = format!("v{v:04}");
        let video = VideoManifest::with_prefix(&video_id, cfg.frames, cfg.fps, &format!("{video_id}_f"));
        let mut frames: Vec<Vec<f32>> = (0..cfg.frames)
            .map(|_| {
                let mut f = gaussian(&mut rng, cfg.dim);
                if cfg.kind == PlantKind::OrthogonalOptions {
                    f[..NUM_OPTIONS].fill(0.0);
                }
                f
            })
            .collect();
        let planted = sample(&mut rng, cfg.frames, cfg.questions_per_video).into_vec();

        let mut questions = Vec::new();
        for (j, &p) in planted.iter().enumerate() {
            let qid = format!("q{v:04}_{j}");
            let correct_index = rng.gen_range(0..NUM_OPTIONS);
            let scale = rng.gen_range(0.5f32..2.0);
            let (qvec, options) = match cfg.kind {
                PlantKind::TopCosine => {
                    let options: Vec<Vec<f32>> = (0..NUM_OPTIONS).map(|_| gaussian(&mut rng, cfg.dim)).collect();
                    (gaussian(&mut rng, cfg.dim), options)
                }
                PlantKind::OrthogonalOptions => {
                    let options: Vec<Vec<f32>> = (0..NUM_OPTIONS).map(|k| basis(cfg.dim, k)).collect();
                    (basis(cfg.dim, correct_index), options)
                }
            };
            frames[p] = qvec.iter().map(|x| x * scale).collect();
            questions.push((qid, p, correct_index, qvec, options));
        }

        for (qid, p, correct_index, qvec, options) in questions {
            if !is_unique_top(&frames, &qvec, p) {
                return Err(SynthError::Degenerate);
            }
            let option_ids: Vec<String> = (0..NUM_OPTIONS).map(|k| format!("{qid}_o{k}")).collect();
            rows.push((format!("{qid}_emb"), qvec));
            for (id, o) in option_ids.iter().zip(options) {
                rows.push((id.clone(), o));
            }
            corpus.qa.push(QAItem {
                question_id: qid.clone(),
                video_id: video_id.clone(),
                question_text: format!("synthetic question {qid}"),
                options: (0..NUM_OPTIONS).map(|k| format!("option {k}")).collect(),
                correct_index,
                question_embedding_id: format!("{qid}_emb"),
                option_embedding_ids: option_ids,
            });
            corpus.labels.push(LocalizationLabel {
                question_id: qid,
                frame_index: p,
            });
        }
        for (id, f) in video.frame_ids.iter().zip(frames) {
            rows.push((id.clone(), f));
        }
        corpus.videos.push(video);
    }

    let embeddings = EmbeddingMatrix::from_rows(cfg.dim, rows).expect("generated ids are unique");
    Ok(SynthCorpus { corpus, embeddings })
}
