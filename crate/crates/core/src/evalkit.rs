//! Accuracy metrics, Monte-Carlo random baselines and report rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::composite::{build_composite, segment_label};
use crate::datamodel::{CompositeVideo, LocalizationLabel, QAItem, VideoManifest, NUM_OPTIONS};
use crate::store::Predictions;

/// Seed used by baselines unless the caller picks one.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("question {question:?}: option index {index} out of range")]
    OptionOutOfRange { question: String, index: usize },
    #[error("prediction for unknown question {0:?}")]
    UnknownQuestion(String),
    #[error("question {0:?} is not part of any composite")]
    NoComposite(String),
    #[error("report needs at least one entry")]
    EmptyReport,
    #[error("malformed report line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricEntry {
    pub name: String,
    pub numerator: usize,
    pub denominator: usize,
    /// Questions without a prediction; already counted as wrong.
    pub missing: usize,
}

impl MetricEntry {
    pub fn value(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 / self.denominator as f64
        }
    }

    /// No question had a usable prediction, so the value means nothing.
    pub fn not_available(&self) -> bool {
        self.denominator == 0 || self.missing == self.denominator
    }

    /// `"47.15%"`, or `"N/A"`.
    pub fn percent(&self) -> String {
        if self.not_available() {
            "N/A".to_string()
        } else {
            format!("{:.2}%", 100.0 * self.value())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalReport {
    pub entries: Vec<MetricEntry>,
    pub provenance: String,
}

/// SHA-256 over length-prefixed parts, hex encoded.
pub fn config_hash<I, B>(parts: I) -> String
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn check_known(preds: &Predictions, known: impl Fn(&str) -> bool) -> Result<(), EvalError> {
    match preds.keys().find(|q| !known(q)) {
        Some(q) => Err(EvalError::UnknownQuestion(q.clone())),
        None => Ok(()),
    }
}

/// Fraction of questions answered with the correct option.
pub fn qa_accuracy(preds: &Predictions, qa: &[QAItem]) -> Result<MetricEntry, EvalError> {
    let by_id: HashMap<&str, &QAItem> = qa.iter().map(|q| (q.question_id.as_str(), q)).collect();
    check_known(preds, |q| by_id.contains_key(q))?;
    let mut hits = 0;
    let mut missing = 0;
    for q in qa {
        match preds.get(&q.question_id) {
            None => missing += 1,
            Some(&p) if p >= NUM_OPTIONS => {
                return Err(EvalError::OptionOutOfRange {
                    question: q.question_id.clone(),
                    index: p,
                })
            }
            Some(&p) => hits += usize::from(p == q.correct_index),
        }
    }
    Ok(MetricEntry {
        name: "qa".into(),
        numerator: hits,
        denominator: qa.len(),
        missing,
    })
}

fn label_hits(
    name: String,
    preds: &Predictions,
    labels: &[LocalizationLabel],
    hit: impl Fn(usize, usize) -> bool,
) -> Result<MetricEntry, EvalError> {
    let known: HashMap<&str, usize> = labels
        .iter()
        .map(|l| (l.question_id.as_str(), l.frame_index))
        .collect();
    check_known(preds, |q| known.contains_key(q))?;
    let mut hits = 0;
    let mut missing = 0;
    for l in labels {
        match preds.get(&l.question_id) {
            None => missing += 1,
            Some(&p) => hits += usize::from(hit(p, l.frame_index)),
        }
    }
    Ok(MetricEntry {
        name,
        numerator: hits,
        denominator: labels.len(),
        missing,
    })
}

/// Fraction of predicted frames equal to the label frame.
pub fn localization_accuracy_strict(
    preds: &Predictions,
    labels: &[LocalizationLabel],
) -> Result<MetricEntry, EvalError> {
    label_hits("strict".into(), preds, labels, |p, l| p == l)
}

/// Fraction of predicted frames within `tol` frames of the label.
pub fn localization_tolerance(
    preds: &Predictions,
    labels: &[LocalizationLabel],
    tol: usize,
) -> Result<MetricEntry, EvalError> {
    label_hits(format!("tol:{tol}"), preds, labels, |p, l| p.abs_diff(l) <= tol)
}

/// Fraction of predicted global frames inside the question's source-video
/// segment of its composite.
pub fn localization_accuracy_segment(
    preds: &Predictions,
    composites: &[CompositeVideo],
    qa: &[QAItem],
) -> Result<MetricEntry, EvalError> {
    let owner: HashMap<&str, &CompositeVideo> = composites
        .iter()
        .flat_map(|c| c.video_ids().map(move |v| (v, c)))
        .collect();
    let by_id: HashMap<&str, &QAItem> = qa.iter().map(|q| (q.question_id.as_str(), q)).collect();
    check_known(preds, |q| by_id.contains_key(q))?;
    let mut hits = 0;
    let mut missing = 0;
    for q in qa {
        let c = owner
            .get(q.video_id.as_str())
            .ok_or_else(|| EvalError::NoComposite(q.question_id.clone()))?;
        let (start, end) =
            segment_label(c, &q.video_id).map_err(|_| EvalError::NoComposite(q.question_id.clone()))?;
        match preds.get(&q.question_id) {
            None => missing += 1,
            Some(&p) => hits += usize::from(p >= start && p < end),
        }
    }
    Ok(MetricEntry {
        name: "segment".into(),
        numerator: hits,
        denominator: qa.len(),
        missing,
    })
}

fn synthetic_question(i: usize, correct_index: usize) -> QAItem {
    let id = format!("q{i}");
    QAItem {
        question_id: id.clone(),
        video_id: format!("v{i}"),
        question_text: String::new(),
        options: vec![String::new(); NUM_OPTIONS],
        correct_index,
        question_embedding_id: format!("{id}e"),
        option_embedding_ids: (0..NUM_OPTIONS).map(|j| format!("{id}o{j}")).collect(),
    }
}

/// Uniform guessing over four options on `trials` synthetic questions.
pub fn random_qa_baseline(trials: usize, seed: u64) -> MetricEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qa = Vec::with_capacity(trials);
    let mut preds = Predictions::new();
    for i in 0..trials {
        let q = synthetic_question(i, rng.gen_range(0..NUM_OPTIONS));
        preds.insert(q.question_id.clone(), rng.gen_range(0..NUM_OPTIONS));
        qa.push(q);
    }
    let mut e = qa_accuracy(&preds, &qa).expect("synthetic predictions are in range");
    e.name = "random qa".into();
    e
}

fn random_labels(rng: &mut ChaCha8Rng, trials: usize, n_frames: usize) -> (Vec<LocalizationLabel>, Predictions) {
    let mut labels = Vec::with_capacity(trials);
    let mut preds = Predictions::new();
    for i in 0..trials {
        let question_id = format!("q{i}");
        preds.insert(question_id.clone(), rng.gen_range(0..n_frames));
        labels.push(LocalizationLabel {
            question_id,
            frame_index: rng.gen_range(0..n_frames),
        });
    }
    (labels, preds)
}

/// Uniform frame guessing against uniform labels over `n_frames`-frame videos.
pub fn random_strict_baseline(trials: usize, n_frames: usize, seed: u64) -> MetricEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, preds) = random_labels(&mut rng, trials, n_frames.max(1));
    let mut e = localization_accuracy_strict(&preds, &labels).expect("ids match");
    e.name = "random strict".into();
    e
}

pub fn random_tolerance_baseline(trials: usize, n_frames: usize, tol: usize, seed: u64) -> MetricEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, preds) = random_labels(&mut rng, trials, n_frames.max(1));
    let mut e = localization_tolerance(&preds, &labels, tol).expect("ids match");
    e.name = format!("random tol:{tol}");
    e
}

/// Uniform global-frame guessing over a composite of `segments` videos of
/// `segment_frames` frames each; each question targets a random video.
pub fn random_segment_baseline(trials: usize, segments: usize, segment_frames: usize, seed: u64) -> MetricEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let videos: Vec<VideoManifest> = (0..segments.max(2))
        .map(|i| VideoManifest::with_prefix(format!("v{i}"), segment_frames.max(1), 1.0, &format!("v{i}_")))
        .collect();
    let c = build_composite("random", &videos).expect("distinct non-empty videos");
    let mut qa = Vec::with_capacity(trials);
    let mut preds = Predictions::new();
    for i in 0..trials {
        let mut q = synthetic_question(i, 0);
        q.video_id = videos[rng.gen_range(0..videos.len())].video_id.clone();
        preds.insert(q.question_id.clone(), rng.gen_range(0..c.total_frames));
        qa.push(q);
    }
    let mut e = localization_accuracy_segment(&preds, std::slice::from_ref(&c), &qa).expect("all videos spliced");
    e.name = "random segment".into();
    e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Tsv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Renders entries sorted by name. Percentages carry two decimals.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String, EvalError> {
    if report.entries.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut entries: Vec<&MetricEntry> = report.entries.iter().collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            writeln!(out, "# provenance {}", report.provenance).unwrap();
            let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(6);
            for e in entries {
                let counts = format!("{}/{}", e.numerator, e.denominator);
                writeln!(
                    out,
                    "{:<width$}  {:>13}  {:>9} missing  {:>7}",
                    e.name,
                    counts,
                    e.missing,
                    e.percent()
                )
                .unwrap();
            }
        }
        ReportFormat::Tsv => {
            writeln!(out, "#provenance\t{}", report.provenance).unwrap();
            out.push_str("metric\tvalue\tnumerator\tdenominator\tmissing\n");
            for e in entries {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    e.name,
                    e.percent(),
                    e.numerator,
                    e.denominator,
                    e.missing
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}

/// Reads back the TSV form of [`render_report`].
pub fn parse_tsv_report(text: &str) -> Result<EvalReport, EvalError> {
    let mut provenance = String::new();
    let mut entries = Vec::new();
    let mut seen = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let err = |msg: &str| EvalError::Parse {
            line: idx + 1,
            msg: msg.to_string(),
        };
        if let Some(p) = line.strip_prefix("#provenance\t") {
            provenance = p.to_string();
            continue;
        }
        if line.is_empty() || line.starts_with("metric\t") {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 5 {
            return Err(err("expected 5 columns"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad count"));
        let e = MetricEntry {
            name: cells[0].to_string(),
            numerator: int(cells[2])?,
            denominator: int(cells[3])?,
            missing: int(cells[4])?,
        };
        if e.percent() != cells[1] {
            return Err(err("value disagrees with counts"));
        }
        if seen.insert(e.name.clone(), ()).is_some() {
            return Err(err("duplicate metric"));
        }
        entries.push(e);
    }
    Ok(EvalReport { entries, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa_items(correct: &[usize]) -> Vec<QAItem> {
        correct.iter().enumerate().map(|(i, c)| synthetic_question(i, *c)).collect()
    }

    fn preds(pairs: &[(&str, usize)]) -> Predictions {
        pairs.iter().map(|(q, v)| (q.to_string(), *v)).collect()
    }

    fn labels(frames: &[usize]) -> Vec<LocalizationLabel> {
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| LocalizationLabel {
                question_id: format!("q{i}"),
                frame_index: *f,
            })
            .collect()
    }

    #[test]
    fn qa_all_correct_and_missing() {
        let qa = qa_items(&[0, 3, 2]);
        let e = qa_accuracy(&preds(&[("q0", 0), ("q1", 3), ("q2", 2)]), &qa).unwrap();
        assert_eq!(e.value(), 1.0);
        assert_eq!(e.percent(), "100.00%");

        let ten = qa_items(&[1; 10]);
        let e = qa_accuracy(&Predictions::new(), &ten).unwrap();
        assert_eq!(e.value(), 0.0);
        assert_eq!(e.missing, 10);
        assert_eq!(e.percent(), "N/A");
    }

    #[test]
    fn qa_rejects_bad_predictions() {
        let qa = qa_items(&[0]);
        assert!(matches!(
            qa_accuracy(&preds(&[("q0", 4)]), &qa),
            Err(EvalError::OptionOutOfRange { index: 4, .. })
        ));
        assert!(matches!(
            qa_accuracy(&preds(&[("zz", 1)]), &qa),
            Err(EvalError::UnknownQuestion(_))
        ));
    }

    #[test]
    fn strict_and_tolerance() {
        let l = labels(&[5, 50, 99]);
        let exact = preds(&[("q0", 5), ("q1", 50), ("q2", 99)]);
        assert_eq!(localization_accuracy_strict(&exact, &l).unwrap().value(), 1.0);
        let off = preds(&[("q0", 6), ("q1", 49), ("q2", 98)]);
        assert_eq!(localization_accuracy_strict(&off, &l).unwrap().value(), 0.0);
        assert_eq!(localization_tolerance(&off, &l, 0).unwrap().numerator, 0);
        assert_eq!(localization_tolerance(&off, &l, 1).unwrap().numerator, 3);
        let l = labels(&[50]);
        assert_eq!(localization_tolerance(&preds(&[("q0", 47)]), &l, 3).unwrap().numerator, 1);
        assert_eq!(localization_tolerance(&preds(&[("q0", 47)]), &l, 2).unwrap().numerator, 0);
    }

    #[test]
    fn segment_hits_are_half_open() {
        let vs: Vec<VideoManifest> = (0..2)
            .map(|i| VideoManifest::with_prefix(format!("v{i}"), 40 + 20 * i, 1.0, &format!("v{i}_")))
            .collect();
        let c = build_composite("c", &vs).unwrap();
        let qa = qa_items(&[0, 0]);
        // q0 -> v0 [0, 40), q1 -> v1 [40, 100)
        let e = localization_accuracy_segment(&preds(&[("q0", 39), ("q1", 100)]), std::slice::from_ref(&c), &qa).unwrap();
        assert_eq!((e.numerator, e.denominator), (1, 2));
        let e = localization_accuracy_segment(&preds(&[("q0", 40), ("q1", 40)]), std::slice::from_ref(&c), &qa).unwrap();
        assert_eq!(e.numerator, 1);
        let orphan = qa_items(&[0, 0, 0]);
        assert!(matches!(
            localization_accuracy_segment(&Predictions::new(), &[c], &orphan),
            Err(EvalError::NoComposite(_))
        ));
    }

    #[test]
    fn baselines_are_seeded() {
        assert_eq!(random_qa_baseline(1000, 3), random_qa_baseline(1000, 3));
        assert_ne!(random_qa_baseline(1000, 3), random_qa_baseline(1000, 4));
        assert_eq!(random_strict_baseline(10, 1, 0).value(), 1.0);
    }

    #[test]
    fn report_formatting() {
        let e = MetricEntry {
            name: "qa".into(),
            numerator: 4715,
            denominator: 10000,
            missing: 0,
        };
        let r = EvalReport {
            entries: vec![e],
            provenance: "abc".into(),
        };
        let text = render_report(&r, ReportFormat::Text).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with("qa") && line.ends_with("47.15%"), "{line:?}");
        assert!(matches!(
            render_report(&EvalReport { entries: vec![], provenance: String::new() }, ReportFormat::Text),
            Err(EvalError::EmptyReport)
        ));
    }

    #[test]
    fn report_order_and_tsv_round_trip() {
        let a = MetricEntry {
            name: "strict".into(),
            numerator: 1,
            denominator: 3,
            missing: 1,
        };
        let b = MetricEntry {
            name: "qa".into(),
            numerator: 0,
            denominator: 2,
            missing: 2,
        };
        let r1 = EvalReport {
            entries: vec![a.clone(), b.clone()],
            provenance: "p".into(),
        };
        let r2 = EvalReport {
            entries: vec![b, a],
            provenance: "p".into(),
        };
        for f in [ReportFormat::Text, ReportFormat::Tsv] {
            assert_eq!(render_report(&r1, f).unwrap(), render_report(&r2, f).unwrap());
        }
        let tsv = render_report(&r1, ReportFormat::Tsv).unwrap();
        assert!(tsv.contains("qa\tN/A\t0\t2\t2"));
        let back = parse_tsv_report(&tsv).unwrap();
        assert_eq!(back.provenance, "p");
        let mut expect = r2.entries.clone();
        expect.sort_by(|x, y| x.name.cmp(&y.name));
        assert_eq!(back.entries, expect);
        for (x, y) in back.entries.iter().zip(&expect) {
            assert_eq!(x.value(), y.value());
        }
    }

    #[test]
    fn hash_is_stable_and_boundary_sensitive() {
        assert_eq!(config_hash(["ab", "c"]), config_hash(["ab", "c"]));
        assert_ne!(config_hash(["ab", "c"]), config_hash(["a", "bc"]));
        assert_eq!(config_hash(["x"]).len(), 64);
    }
}
