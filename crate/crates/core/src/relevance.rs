//! Frame relevance scoring and frame-subset selection.
//!
//! The relevance of frame `f` to question `q` is the cosine similarity of
//! their embeddings. Selecting a frame subset `S` of size `k` maximizes the
//! facility-location objective
//!
//! ```text
//! F(S) = sum over questions q of  max over f in S of  R(f, q)
//! ```
//!
//! which is monotone and submodular, so the greedy solver is within a
//! factor (1 - 1/e) of the optimum once the objective is measured from its
//! empty-set floor (every score is at least -1).

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::datamodel::{EmbeddingMatrix, ModelError, Projector, RelevanceMatrix};

/// Largest number of subsets the exact solver will enumerate.
pub const EXACT_SUBSET_LIMIT: u128 = 1_000_000;

/// Score assigned to a question before any frame covers it.
pub const SCORE_FLOOR: f64 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum RelevanceError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("frame {frame:?} / question {question:?}: {source}")]
    Pair {
        frame: String,
        question: String,
        source: Box<RelevanceError>,
    },
    #[error("unknown question {0:?}")]
    UnknownQuestion(String),
    #[error("k must be at least 1")]
    ZeroBudget,
    #[error("exact selection would enumerate {0} subsets (limit {EXACT_SUBSET_LIMIT})")]
    TooManySubsets(u128),
    #[error("projector fit needs matching, non-empty sample sets ({0} inputs, {1} targets)")]
    SampleMismatch(usize, usize),
    #[error("ridge must be a finite non-negative number")]
    BadRidge,
    #[error("normal equations are singular; retry with ridge > 0")]
    Singular,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Exact,
    Greedy,
}

impl std::str::FromStr for SelectionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "greedy" => Ok(Self::Greedy),
            other => Err(format!("unknown selection method {other:?}")),
        }
    }
}

/// Dot product accumulated in f64 over independent lanes.
pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let uc = u.chunks_exact(LANES);
    let vc = v.chunks_exact(LANES);
    let tail: f64 = uc
        .remainder()
        .iter()
        .zip(vc.remainder())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum();
    for (a, b) in uc.zip(vc) {
        for l in 0..LANES {
            acc[l] += a[l] as f64 * b[l] as f64;
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub(crate) fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

fn cosine_with_norms(u: &[f32], nu: f64, v: &[f32], nv: f64) -> f64 {
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, RelevanceError> {
    if u.len() != v.len() {
        return Err(RelevanceError::DimMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(RelevanceError::ZeroNorm);
    }
    Ok(cosine_with_norms(u, nu, v, nv))
}

fn checked_norms(m: &EmbeddingMatrix, role: &str) -> Result<Vec<f64>, RelevanceError> {
    m.rows()
        .zip(m.ids())
        .map(|(row, id)| {
            let n = norm(row);
            if n == 0.0 {
                let (frame, question) = if role == "frame" {
                    (id.clone(), String::new())
                } else {
                    (String::new(), id.clone())
                };
                Err(RelevanceError::Pair {
                    frame,
                    question,
                    source: Box::new(RelevanceError::ZeroNorm),
                })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Scores every frame against every question. Rows are computed in
/// parallel; each cell is produced independently, so the result does not
/// depend on the thread count.
pub fn relevance_matrix(
    frames: &EmbeddingMatrix,
    questions: &EmbeddingMatrix,
) -> Result<RelevanceMatrix, RelevanceError> {
    if frames.dim() != questions.dim() {
        return Err(RelevanceError::DimMismatch(frames.dim(), questions.dim()));
    }
    let frame_norms = checked_norms(frames, "frame")?;
    let question_norms = checked_norms(questions, "question")?;
    let m = questions.count();
    let mut scores = vec![0.0f64; frames.count() * m];
    if m > 0 {
        scores
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, out)| {
                let f = frames.row(i);
                for (j, cell) in out.iter_mut().enumerate() {
                    *cell = cosine_with_norms(f, frame_norms[i], questions.row(j), question_norms[j]);
                }
            });
    }
    Ok(RelevanceMatrix::new(
        frames.ids().to_vec(),
        questions.ids().to_vec(),
        scores,
    )?)
}

/// Index of the highest-scoring frame for `question_id`; the first one wins ties.
pub fn localize_top1(r: &RelevanceMatrix, question_id: &str) -> Result<usize, RelevanceError> {
    let q = r
        .question_index(question_id)
        .ok_or_else(|| RelevanceError::UnknownQuestion(question_id.to_string()))?;
    let mut best = None;
    for i in 0..r.n_frames() {
        let s = r.get(i, q);
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| RelevanceError::UnknownQuestion(question_id.to_string()))
}

/// Facility-location value of a frame set. An empty set scores every
/// question at [`SCORE_FLOOR`].
pub fn objective(r: &RelevanceMatrix, frames: &[usize]) -> f64 {
    (0..r.n_questions())
        .map(|q| {
            frames
                .iter()
                .map(|&f| r.get(f, q))
                .fold(SCORE_FLOOR, f64::max)
        })
        .sum()
}

/// Objective measured from its empty-set value, so it is non-negative and
/// zero on the empty set.
pub fn normalized_objective(r: &RelevanceMatrix, frames: &[usize]) -> f64 {
    objective(r, frames) - SCORE_FLOOR * r.n_questions() as f64
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Chooses `min(k, n)` frames maximizing [`objective`].
///
/// `Exact` enumerates subsets in lexicographic order and keeps the first
/// optimum; the result is ascending. `Greedy` repeatedly adds the frame of
/// largest marginal gain (lowest index on ties) and returns frames in the
/// order they were picked.
pub fn select_frames(
    r: &RelevanceMatrix,
    k: usize,
    method: SelectionMethod,
) -> Result<Vec<usize>, RelevanceError> {
    if k == 0 {
        return Err(RelevanceError::ZeroBudget);
    }
    let n = r.n_frames();
    let k = k.min(n);
    match method {
        SelectionMethod::Exact => select_exact(r, k),
        SelectionMethod::Greedy => Ok(select_greedy(r, k)),
    }
}

fn select_exact(r: &RelevanceMatrix, k: usize) -> Result<Vec<usize>, RelevanceError> {
    let n = r.n_frames();
    let total = binomial(n, k);
    if total > EXACT_SUBSET_LIMIT {
        return Err(RelevanceError::TooManySubsets(total));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut current: Vec<usize> = (0..k).collect();
    let mut best = current.clone();
    let mut best_value = objective(r, &current);
    // advance to the next combination in lexicographic order
    while let Some(pos) = (0..k).rev().find(|&i| current[i] < n - k + i) {
        current[pos] += 1;
        for i in pos + 1..k {
            current[i] = current[i - 1] + 1;
        }
        let value = objective(r, &current);
        if value > best_value {
            best_value = value;
            best.copy_from_slice(&current);
        }
    }
    Ok(best)
}

fn select_greedy(r: &RelevanceMatrix, k: usize) -> Vec<usize> {
    let n = r.n_frames();
    let mut covered = vec![SCORE_FLOOR; r.n_questions()];
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for f in (0..n).filter(|&f| !chosen[f]) {
            let gain: f64 = r
                .frame_row(f)
                .iter()
                .zip(&covered)
                .map(|(s, c)| (s - c).max(0.0))
                .sum();
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((f, gain));
            }
        }
        let Some((f, _)) = best else { break };
        chosen[f] = true;
        order.push(f);
        for (c, s) in covered.iter_mut().zip(r.frame_row(f)) {
            *c = c.max(*s);
        }
    }
    order
}

/// Closed-form ridge regression of `targets` on `inputs`, paired by row
/// position. The bias is not penalized.
pub fn fit_projector(
    inputs: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
    ridge: f64,
) -> Result<Projector, RelevanceError> {
    let n = inputs.count();
    if n == 0 || n != targets.count() {
        return Err(RelevanceError::SampleMismatch(n, targets.count()));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(RelevanceError::BadRidge);
    }
    let (d_in, d_out) = (inputs.dim(), targets.dim());
    let z = DMatrix::from_row_iterator(n, d_in, inputs.values().iter().map(|v| *v as f64));
    let h = DMatrix::from_row_iterator(n, d_out, targets.values().iter().map(|v| *v as f64));
    let z_mean = z.row_mean();
    let h_mean = h.row_mean();
    let mut zc = z;
    let mut hc = h;
    for mut row in zc.row_iter_mut() {
        row -= &z_mean;
    }
    for mut row in hc.row_iter_mut() {
        row -= &h_mean;
    }

    let mut gram = zc.tr_mul(&zc);
    for i in 0..d_in {
        gram[(i, i)] += ridge;
    }
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = gram.cholesky().ok_or(RelevanceError::Singular)?;
    let pivot_min = chol.l_dirty().diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if pivot_min <= 1e-12 * scale {
        return Err(RelevanceError::Singular);
    }
    // W^T = G^{-1} Zc^T Hc
    let wt = chol.solve(&zc.tr_mul(&hc));
    let bias = h_mean - z_mean * &wt;

    let mut weights = Vec::with_capacity(d_out * d_in);
    for o in 0..d_out {
        for i in 0..d_in {
            weights.push(wt[(i, o)]);
        }
    }
    Ok(Projector::new(d_in, d_out, weights, bias.iter().copied().collect())?)
}

/// Maps every row through `h = W z + b`, keeping row ids.
pub fn apply_projector(p: &Projector, z: &EmbeddingMatrix) -> Result<EmbeddingMatrix, RelevanceError> {
    if z.dim() != p.d_in {
        return Err(RelevanceError::DimMismatch(z.dim(), p.d_in));
    }
    let mut values = Vec::with_capacity(z.count() * p.d_out);
    for row in z.rows() {
        for o in 0..p.d_out {
            let w = &p.weights[o * p.d_in..(o + 1) * p.d_in];
            let acc: f64 = w.iter().zip(row).map(|(w, x)| w * *x as f64).sum();
            values.push((acc + p.bias[o]) as f32);
        }
    }
    Ok(EmbeddingMatrix::new(p.d_out, z.ids().to_vec(), values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f32]], prefix: &str) -> EmbeddingMatrix {
        let dim = rows[0].len();
        EmbeddingMatrix::from_rows(
            dim,
            rows.iter().enumerate().map(|(i, r)| (format!("{prefix}{i}"), r.to_vec())),
        )
        .unwrap()
    }

    fn scores(n: usize, m: usize, s: Vec<f64>) -> RelevanceMatrix {
        RelevanceMatrix::new(
            (0..n).map(|i| format!("f{i}")).collect(),
            (0..m).map(|j| format!("q{j}")).collect(),
            s,
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(RelevanceError::ZeroNorm));
        assert_eq!(cosine(&[1.0], &[1.0, 0.0]), Err(RelevanceError::DimMismatch(1, 2)));
    }

    #[test]
    fn dot_handles_tails() {
        let u: Vec<f32> = (0..19).map(|i| i as f32).collect();
        let expect: f64 = (0..19).map(|i| (i * i) as f64).sum();
        assert_eq!(dot(&u, &u), expect);
    }

    #[test]
    fn relevance_matrix_examples() {
        let f = matrix(&[&[0.3, 0.4]], "f");
        let q = matrix(&[&[0.3, 0.4]], "q");
        assert!((relevance_matrix(&f, &q).unwrap().get(0, 0) - 1.0).abs() < 1e-12);

        let f = matrix(&[&[1.0, 0.0], &[0.0, 1.0]], "f");
        let q = matrix(&[&[1.0, 0.0]], "q");
        assert_eq!(relevance_matrix(&f, &q).unwrap().scores(), &[1.0, 0.0]);
    }

    #[test]
    fn relevance_matrix_names_zero_norm_row() {
        let f = matrix(&[&[1.0, 0.0], &[0.0, 0.0]], "f");
        let q = matrix(&[&[1.0, 0.0]], "q");
        let err = relevance_matrix(&f, &q).unwrap_err();
        assert!(err.to_string().contains("\"f1\""), "{err}");
        let q3 = matrix(&[&[1.0, 0.0, 0.0]], "q");
        assert_eq!(relevance_matrix(&f, &q3), Err(RelevanceError::DimMismatch(2, 3)));
    }

    #[test]
    fn top1_tie_breaks_to_first() {
        let r = scores(3, 1, vec![0.2, 0.9, 0.9]);
        assert_eq!(localize_top1(&r, "q0").unwrap(), 1);
        let single = scores(1, 1, vec![-0.5]);
        assert_eq!(localize_top1(&single, "q0").unwrap(), 0);
        assert!(matches!(localize_top1(&r, "nope"), Err(RelevanceError::UnknownQuestion(_))));
    }

    #[test]
    fn selection_budget_edge_cases() {
        let r = scores(3, 2, vec![0.1, 0.2, 0.9, -0.3, 0.4, 0.4]);
        assert_eq!(select_frames(&r, 0, SelectionMethod::Greedy), Err(RelevanceError::ZeroBudget));
        assert_eq!(select_frames(&r, 5, SelectionMethod::Exact).unwrap(), vec![0, 1, 2]);
        let mut g = select_frames(&r, 3, SelectionMethod::Greedy).unwrap();
        g.sort();
        assert_eq!(g, vec![0, 1, 2]);
        // k = 1 picks the best row sum: 0.3, 0.6, 0.8
        assert_eq!(select_frames(&r, 1, SelectionMethod::Exact).unwrap(), vec![2]);
        assert_eq!(select_frames(&r, 1, SelectionMethod::Greedy).unwrap(), vec![2]);
    }

    #[test]
    fn exact_prefers_lexicographically_smallest_optimum() {
        // frames 0 and 2 are identical, so {0,1} and {1,2} tie
        let r = scores(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(select_frames(&r, 2, SelectionMethod::Exact).unwrap(), vec![0, 1]);
        assert_eq!(select_frames(&r, 2, SelectionMethod::Greedy).unwrap(), vec![0, 1]);
    }

    #[test]
    fn exact_guard() {
        let r = scores(40, 1, vec![0.0; 40]);
        assert!(matches!(
            select_frames(&r, 10, SelectionMethod::Exact),
            Err(RelevanceError::TooManySubsets(_))
        ));
        assert_eq!(binomial(8, 2), 28);
        assert_eq!(binomial(100, 3), 161_700);
    }

    #[test]
    fn projector_identity_fit() {
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|i| (0..3).map(|j| ((i * 7 + j * 3) % 11) as f32 - 5.0).collect())
            .collect();
        let z = EmbeddingMatrix::from_rows(3, rows.iter().enumerate().map(|(i, r)| (format!("z{i}"), r.clone())))
            .unwrap();
        let p = fit_projector(&z, &z, 0.0).unwrap();
        for o in 0..3 {
            for i in 0..3 {
                let expect = if o == i { 1.0 } else { 0.0 };
                assert!((p.weight(o, i) - expect).abs() < 1e-6);
            }
            assert!(p.bias[o].abs() < 1e-6);
        }
    }

    #[test]
    fn projector_single_sample_needs_ridge() {
        let z = matrix(&[&[1.0, 2.0]], "z");
        let h = matrix(&[&[3.0]], "h");
        assert_eq!(fit_projector(&z, &h, 0.0), Err(RelevanceError::Singular));
        let p = fit_projector(&z, &h, 1.0).unwrap();
        assert!(p.weights.iter().chain(&p.bias).all(|v| v.is_finite()));
        let out = apply_projector(&p, &z).unwrap();
        assert!((out.row(0)[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn projector_errors() {
        let z = matrix(&[&[1.0, 2.0], &[2.0, 1.0]], "z");
        let h = matrix(&[&[3.0]], "h");
        assert_eq!(fit_projector(&z, &h, 0.1), Err(RelevanceError::SampleMismatch(2, 1)));
        assert_eq!(fit_projector(&z, &z, -1.0), Err(RelevanceError::BadRidge));
        assert_eq!(
            apply_projector(&Projector::identity(3), &z),
            Err(RelevanceError::DimMismatch(2, 3))
        );
    }

    #[test]
    fn apply_projector_examples() {
        let z = matrix(&[&[1.0, -2.0], &[0.5, 4.0]], "z");
        assert_eq!(apply_projector(&Projector::identity(2), &z).unwrap(), z);
        let p = Projector::new(2, 3, vec![0.0; 6], vec![1.0, -1.0, 2.5]).unwrap();
        let out = apply_projector(&p, &z).unwrap();
        assert_eq!(out.ids(), z.ids());
        for row in out.rows() {
            assert_eq!(row, &[1.0, -1.0, 2.5]);
        }
    }
}
