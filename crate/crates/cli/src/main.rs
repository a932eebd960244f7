//! `tomloc` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use tomloc::composite::{generate_tomloc_labels, group_into_composites, local_to_global};
use tomloc::evalkit::{
    config_hash, localization_accuracy_segment, localization_accuracy_strict, localization_tolerance,
    qa_accuracy, random_qa_baseline, random_strict_baseline, render_report, EvalReport, ReportFormat,
};
use tomloc::influence::{batch_influence, AnswerScorer, ExecScorer, SurrogateScorer};
use tomloc::relevance::{localize_top1, normalized_objective, relevance_matrix, select_frames, SelectionMethod};
use tomloc::store::{
    format_manifest, format_predictions, format_relevance_tsv, parse_manifest, parse_predictions,
    read_embeddings, read_manifest_set, write_embeddings, Predictions,
};
use tomloc::synth::{generate, PlantKind, SynthConfig};
use tomloc::{validate_corpus, Corpus, EmbeddingMatrix, LocalizationLabel, QAItem, RelevanceMatrix};

#[derive(Parser)]
#[command(name = "tomloc", version, about = "Frame localization over precomputed video embeddings")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and its embeddings; exits 1 on any violation.
    Validate { manifest: PathBuf, embeddings: PathBuf },
    /// Splice videos into composites by seeded shuffling.
    BuildComposite {
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        group_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "comp")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace labels with the median frame of each question's segment.
    GenLabels {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write frame-by-question cosine tables, one block per search scope.
    Score {
        manifest: PathBuf,
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the top-1 frame for every question.
    Localize {
        manifest: PathBuf,
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick k frames per search scope covering its questions.
    Select {
        manifest: PathBuf,
        embeddings: PathBuf,
        #[arg(short = 'k', long)]
        k: usize,
        #[arg(long, default_value = "greedy")]
        method: SelectionMethod,
    },
    /// Leave-frame-out influence; predicts the most influential frame.
    Lfo {
        manifest: PathBuf,
        embeddings: PathBuf,
        /// `surrogate` or `exec:<command>`.
        #[arg(long, default_value = "surrogate")]
        scorer: String,
        /// Per-request timeout for an external scorer, in seconds.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a ridge projector from paired embedding files (paired by id).
    FitProjector {
        inputs: PathBuf,
        targets: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        ridge: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a manifest.
    Eval {
        predictions: PathBuf,
        manifest: PathBuf,
        /// Comma separated: qa, strict, segment, tol:<T>.
        #[arg(long, default_value = "strict")]
        metrics: String,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Monte-Carlo random-guess baseline.
    Baseline {
        #[arg(long, value_parser = ["qa", "strict"])]
        metric: String,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Frames per video for `strict`.
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Generate a planted synthetic corpus.
    #[command(hide = true)]
    GenSynthetic {
        #[arg(long, default_value = "top-cosine")]
        kind: PlantKind,
        #[arg(long, default_value_t = 10)]
        videos: usize,
        #[arg(long, default_value_t = 1)]
        questions_per_video: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_manifest: PathBuf,
        #[arg(long)]
        out_embeddings: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_manifest_set(path).with_context(|| format!("reading {}", path.display()))
}

fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    read_embeddings(path).with_context(|| format!("reading {}", path.display()))
}

/// Loads both inputs and refuses to go on if they do not line up.
fn load_checked(manifest: &Path, embeddings: &Path) -> Result<(Corpus, EmbeddingMatrix)> {
    let corpus = load_corpus(manifest)?;
    let emb = load_embeddings(embeddings)?;
    let v = validate_corpus(&corpus, Some(&emb));
    if let Some(first) = v.first() {
        bail!("{} violations, first: {first}", v.len());
    }
    Ok((corpus, emb))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A search scope: the frames a group of questions is localized over.
struct Scope<'a> {
    id: String,
    frames: Vec<&'a str>,
    questions: Vec<&'a QAItem>,
}

fn scopes(corpus: &Corpus) -> Result<Vec<Scope<'_>>> {
    let mut out: Vec<Scope> = Vec::new();
    for q in &corpus.qa {
        let id = corpus
            .composite_of(&q.video_id)
            .map_or_else(|| q.video_id.clone(), |c| c.composite_id.clone());
        match out.iter_mut().find(|s| s.id == id) {
            Some(s) => s.questions.push(q),
            None => {
                let frames = corpus
                    .search_frames(q)
                    .ok_or_else(|| anyhow!("video {} of {} not found", q.video_id, q.question_id))?;
                out.push(Scope {
                    id,
                    frames,
                    questions: vec![q],
                });
            }
        }
    }
    Ok(out)
}

fn scope_relevance(scope: &Scope, emb: &EmbeddingMatrix) -> Result<RelevanceMatrix> {
    let frames = emb.select(&scope.frames)?;
    let qemb: Vec<&str> = scope.questions.iter().map(|q| q.question_embedding_id.as_str()).collect();
    let questions = EmbeddingMatrix::new(
        emb.dim(),
        scope.questions.iter().map(|q| q.question_id.clone()).collect(),
        emb.select(&qemb)?.values().to_vec(),
    )?;
    Ok(relevance_matrix(&frames, &questions)?)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Validate { manifest, embeddings } => {
            let text = fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let corpus = parse_manifest(&text)?;
            let emb = load_embeddings(&embeddings)?;
            let v = validate_corpus(&corpus, Some(&emb));
            for x in &v {
                println!("{x}");
            }
            println!("{} violations", v.len());
            return Ok(if v.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::BuildComposite {
            manifest,
            group_size,
            seed,
            prefix,
            out,
        } => {
            let mut corpus = load_corpus(&manifest)?;
            if !corpus.composites.is_empty() {
                bail!("{} already has composites", manifest.display());
            }
            corpus.composites = group_into_composites(&corpus.videos, group_size, seed, &prefix)?;
            // existing labels are local to their video; move them to composite coordinates
            let mut labels = std::mem::take(&mut corpus.labels);
            for l in &mut labels {
                let q = corpus
                    .question(&l.question_id)
                    .ok_or_else(|| anyhow!("label for unknown question {}", l.question_id))?;
                if let Some(c) = corpus.composite_of(&q.video_id) {
                    l.frame_index = local_to_global(c, &q.video_id, l.frame_index)?;
                }
            }
            corpus.labels = labels;
            write(&out, &format_manifest(&corpus)?)?;
            eprintln!("{} composites", corpus.composites.len());
        }
        Command::GenLabels { manifest, out } => {
            let mut corpus = load_corpus(&manifest)?;
            corpus.labels = generate_tomloc_labels(&corpus.composites, &corpus.qa)?;
            write(&out, &format_manifest(&corpus)?)?;
        }
        Command::Score {
            manifest,
            embeddings,
            out,
        } => {
            let (corpus, emb) = load_checked(&manifest, &embeddings)?;
            let mut text = String::new();
            for s in scopes(&corpus)? {
                text.push_str(&format!("# {}\n", s.id));
                text.push_str(&format_relevance_tsv(&scope_relevance(&s, &emb)?));
            }
            write(&out, &text)?;
        }
        Command::Localize {
            manifest,
            embeddings,
            out,
        } => {
            let (corpus, emb) = load_checked(&manifest, &embeddings)?;
            let mut preds = Predictions::new();
            for s in scopes(&corpus)? {
                let r = scope_relevance(&s, &emb)?;
                for q in &s.questions {
                    preds.insert(q.question_id.clone(), localize_top1(&r, &q.question_id)?);
                }
            }
            write(&out, &format_predictions(&preds))?;
        }
        Command::Select {
            manifest,
            embeddings,
            k,
            method,
        } => {
            let (corpus, emb) = load_checked(&manifest, &embeddings)?;
            println!("scope\tframes\tobjective");
            for s in scopes(&corpus)? {
                let r = scope_relevance(&s, &emb)?;
                let picked = select_frames(&r, k, method)?;
                let list: Vec<String> = picked.iter().map(usize::to_string).collect();
                println!("{}\t{}\t{:.6}", s.id, list.join(","), normalized_objective(&r, &picked));
            }
        }
        Command::Lfo {
            manifest,
            embeddings,
            scorer,
            timeout,
            out,
        } => {
            let (corpus, emb) = load_checked(&manifest, &embeddings)?;
            let scorer: Box<dyn AnswerScorer> = match scorer.as_str() {
                "surrogate" => Box::new(SurrogateScorer),
                s => match s.strip_prefix("exec:") {
                    Some(cmd) if !cmd.trim().is_empty() => Box::new(ExecScorer::spawn(cmd, Duration::from_secs(timeout))?),
                    _ => bail!("unknown scorer {s:?}; expected surrogate or exec:<command>"),
                },
            };
            let mut preds = Predictions::new();
            let mut failed = 0;
            for (q, r) in corpus.qa.iter().zip(batch_influence(scorer.as_ref(), &corpus, &emb)) {
                match r {
                    Ok(p) => {
                        preds.insert(q.question_id.clone(), p.predicted_key_frame);
                    }
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: {e}", q.question_id);
                    }
                }
            }
            write(&out, &format_predictions(&preds))?;
            if failed > 0 {
                eprintln!("{failed} questions failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::FitProjector {
            inputs,
            targets,
            ridge,
            out,
        } => {
            let z = load_embeddings(&inputs)?;
            let h = load_embeddings(&targets)?;
            let h = h.select(z.ids()).context("targets must contain every input id")?;
            let p = tomloc::relevance::fit_projector(&z, &h, ridge)?;
            write(&out, &serde_json::to_string_pretty(&p)?)?;
        }
        Command::Eval {
            predictions,
            manifest,
            metrics,
            format,
        } => {
            let pred_text = fs::read_to_string(&predictions)
                .with_context(|| format!("reading {}", predictions.display()))?;
            let preds = parse_predictions(&pred_text)?;
            let manifest_text =
                fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let corpus = load_corpus(&manifest)?;
            let labels: &[LocalizationLabel] = &corpus.labels;
            let mut entries = Vec::new();
            for m in metrics.split(',').map(str::trim) {
                let e = match m {
                    "qa" => qa_accuracy(&preds, &corpus.qa)?,
                    "strict" => localization_accuracy_strict(&preds, labels)?,
                    "segment" => localization_accuracy_segment(&preds, &corpus.composites, &corpus.qa)?,
                    _ => match m.strip_prefix("tol:").map(str::parse::<usize>) {
                        Some(Ok(t)) => localization_tolerance(&preds, labels, t)?,
                        _ => bail!("unknown metric {m:?}"),
                    },
                };
                entries.push(e);
            }
            let report = EvalReport {
                entries,
                provenance: config_hash([pred_text.as_str(), manifest_text.as_str(), metrics.as_str()]),
            };
            print!("{}", render_report(&report, format)?);
        }
        Command::Baseline {
            metric,
            trials,
            seed,
            frames,
            format,
        } => {
            if trials == 0 || frames == 0 {
                bail!("trials and frames must be positive");
            }
            let entry = match metric.as_str() {
                "qa" => random_qa_baseline(trials, seed),
                _ => random_strict_baseline(trials, frames, seed),
            };
            let report = EvalReport {
                entries: vec![entry],
                provenance: config_hash([
                    "baseline".to_string(),
                    metric,
                    trials.to_string(),
                    seed.to_string(),
                    frames.to_string(),
                ]),
            };
            print!("{}", render_report(&report, format)?);
        }
        Command::GenSynthetic {
            kind,
            videos,
            questions_per_video,
            frames,
            dim,
            seed,
            out_manifest,
            out_embeddings,
        } => {
            let s = generate(&SynthConfig {
                kind,
                videos,
                questions_per_video,
                frames,
                dim,
                seed,
                ..Default::default()
            })?;
            write(&out_manifest, &format_manifest(&s.corpus)?)?;
            write_embeddings(&s.embeddings, &out_embeddings)
                .with_context(|| format!("writing {}", out_embeddings.display()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
