//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Thresholds and time limits are fixed here.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomloc::composite::{build_composite, global_to_local, local_to_global, median_frame_label, segment_label};
use tomloc::influence::{batch_influence, SurrogateScorer};
use tomloc::relevance::{objective, relevance_matrix, select_frames, SelectionMethod};
use tomloc::store::{read_embeddings, write_embeddings};
use tomloc::synth::{generate, PlantKind, SynthConfig};
use tomloc::{EmbeddingMatrix, Projector, RelevanceMatrix, VideoManifest};

const BIN: &str = env!("CARGO_BIN_EXE_tomloc");

struct Outcome {
    pass: bool,
    detail: String,
}

fn tomloc(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Percentage from the last line of a text report, e.g. `25.08%`.
fn reported_percent(report: &str) -> Result<f64, String> {
    let last = report.lines().last().ok_or("empty report")?;
    let tok = last.split_whitespace().last().ok_or("empty line")?;
    tok.trim_end_matches('%').parse().map_err(|_| format!("no percentage in {last:?}"))
}

fn baseline(metric: &str, target: f64, tol: f64) -> Result<Outcome, String> {
    let out = tomloc(&["baseline", "--metric", metric, "--trials", "100000", "--seed", "7", "--frames", "100"])?;
    let v = reported_percent(&out)?;
    Ok(Outcome {
        pass: (v - target).abs() <= tol,
        detail: format!("{v:.2}% (want {target:.2} +/- {tol})"),
    })
}

fn brute_force(r: &RelevanceMatrix, k: usize) -> f64 {
    let n = r.n_frames();
    let mut best = f64::NEG_INFINITY;
    for mask in 1u32..(1 << n) {
        if mask.count_ones() as usize != k.min(n) {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        best = best.max(objective(r, &set));
    }
    best
}

fn greedy_versus_exact() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bound, mut equal, mut oracle_ok) = (0, 0, 0);
    let instances = 200;
    for _ in 0..instances {
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=5);
        let scores = (0..n * m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = RelevanceMatrix::new(
            (0..n).map(|i| format!("f{i}")).collect(),
            (0..m).map(|j| format!("q{j}")).collect(),
            scores,
        )
        .map_err(|e| e.to_string())?;
        let exact = objective(&r, &select_frames(&r, k, SelectionMethod::Exact).map_err(|e| e.to_string())?);
        let greedy = objective(&r, &select_frames(&r, k, SelectionMethod::Greedy).map_err(|e| e.to_string())?);
        if (exact - brute_force(&r, k)).abs() < 1e-12 {
            oracle_ok += 1;
        }
        if greedy >= (1.0 - (-1.0f64).exp()) * exact - 1e-12 {
            bound += 1;
        }
        if (greedy - exact).abs() < 1e-12 {
            equal += 1;
        }
    }
    Ok(Outcome {
        pass: oracle_ok == instances && bound == instances && equal * 10 >= instances * 9,
        detail: format!(
            "bound {bound}/{instances}, equal {equal}/{instances} (want >= 90%), exact = brute force {oracle_ok}/{instances}"
        ),
    })
}

fn planted_recovery(dir: &Path) -> Result<Outcome, String> {
    // top-1 cosine through the CLI: 100 videos x 10 questions
    let m = dir.join("planted.txt");
    let e = dir.join("planted.tle");
    let p = dir.join("planted.pred");
    let (ms, es, ps) = (m.to_str().unwrap(), e.to_str().unwrap(), p.to_str().unwrap());
    tomloc(&[
        "gen-synthetic", "--kind", "top-cosine", "--videos", "100", "--questions-per-video", "10",
        "--frames", "100", "--dim", "64", "--seed", "7", "--out-manifest", ms, "--out-embeddings", es,
    ])?;
    tomloc(&["localize", ms, es, "--out", ps])?;
    let strict = reported_percent(&tomloc(&["eval", ps, ms, "--metrics", "strict"])?)?;

    let s = generate(&SynthConfig {
        kind: PlantKind::OrthogonalOptions,
        videos: 1000,
        questions_per_video: 1,
        frames: 100,
        dim: 16,
        seed: 7,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let profiles = batch_influence(&SurrogateScorer, &s.corpus, &s.embeddings);
    let recovered = profiles
        .iter()
        .zip(&s.corpus.labels)
        .filter(|(p, l)| p.as_ref().is_ok_and(|p| p.predicted_key_frame == l.frame_index))
        .count();
    Ok(Outcome {
        pass: strict == 100.0 && recovered == 1000,
        detail: format!("top-1 strict {strict:.2}% over 1000, leave-frame-out {recovered}/1000"),
    })
}

fn composites() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = 0;
    let mut frames_checked = 0usize;
    for c in 0..1000 {
        let videos: Vec<VideoManifest> = (0..rng.gen_range(2..=5))
            .map(|i| VideoManifest::with_prefix(format!("c{c}v{i}"), rng.gen_range(1..=200), 3.0, &format!("c{c}v{i}_")))
            .collect();
        let comp = build_composite(&format!("c{c}"), &videos).map_err(|e| e.to_string())?;
        let mut ok = comp.total_frames == videos.iter().map(|v| v.n_frames).sum::<usize>();
        for g in 0..comp.total_frames {
            frames_checked += 1;
            ok &= match global_to_local(&comp, g) {
                Ok((v, l)) => local_to_global(&comp, v, l).ok() == Some(g),
                Err(_) => false,
            };
        }
        ok &= global_to_local(&comp, comp.total_frames).is_err();
        for v in &videos {
            for l in 0..v.n_frames {
                ok &= local_to_global(&comp, &v.video_id, l).is_ok_and(|g| {
                    global_to_local(&comp, g).ok() == Some((v.video_id.as_str(), l))
                });
            }
            let span = segment_label(&comp, &v.video_id).map_err(|e| e.to_string())?;
            ok &= median_frame_label(span).is_ok_and(|m| m >= span.0 && m < span.1);
        }
        if !ok {
            failures += 1;
        }
    }
    Ok(Outcome {
        pass: failures == 0,
        detail: format!("{} composites failed, {frames_checked} global frames checked", failures),
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, count: usize, dim: usize, prefix: &str) -> EmbeddingMatrix {
    let values = (0..count * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(dim, (0..count).map(|i| format!("{prefix}{i}")).collect(), values).unwrap()
}

fn round_trip_and_throughput(dir: &Path) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames = random_matrix(&mut rng, 10_000, 512, "f");
    let path = dir.join("big.tle");
    write_embeddings(&frames, &path).map_err(|e| e.to_string())?;
    let back = read_embeddings(&path).map_err(|e| e.to_string())?;
    let identical = back.ids() == frames.ids()
        && back.values().len() == frames.values().len()
        && back.values().iter().zip(frames.values()).all(|(a, b)| a.to_bits() == b.to_bits());

    let questions = random_matrix(&mut rng, 1_000, 512, "q");
    let t = Instant::now();
    let r = relevance_matrix(&frames, &questions).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let shape = r.n_frames() == 10_000 && r.n_questions() == 1_000;
    Ok(Outcome {
        pass: identical && shape && secs < 10.0,
        detail: format!("bit-identical {identical}, relevance 10000x1000x512 in {secs:.2}s (limit 10s)"),
    })
}

fn projector(dir: &Path) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let noise = rand_distr::Normal::new(0.0, 1e-3).unwrap();
    let (mut z, mut h) = (Vec::new(), Vec::new());
    for i in 0..500 {
        let x: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let y: Vec<f32> = (0..4)
            .map(|o| ((0..4).map(|j| a[o * 4 + j] * x[j] as f64).sum::<f64>() + rng.sample(noise)) as f32)
            .collect();
        z.push((format!("s{i}"), x));
        h.push((format!("s{i}"), y));
    }
    let (zp, hp, out) = (dir.join("z.tle"), dir.join("h.tle"), dir.join("proj.json"));
    write_embeddings(&EmbeddingMatrix::from_rows(4, z).unwrap(), &zp).map_err(|e| e.to_string())?;
    write_embeddings(&EmbeddingMatrix::from_rows(4, h).unwrap(), &hp).map_err(|e| e.to_string())?;
    tomloc(&[
        "fit-projector", zp.to_str().unwrap(), hp.to_str().unwrap(), "--ridge", "0", "--out", out.to_str().unwrap(),
    ])?;
    let p: Projector = serde_json::from_str(&std::fs::read_to_string(&out).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let frob = p.weights.iter().zip(&a).map(|(w, a)| (w - a).powi(2)).sum::<f64>().sqrt();
    Ok(Outcome {
        pass: p.d_in == 4 && p.d_out == 4 && frob < 1e-2,
        detail: format!("Frobenius error {frob:.2e} (limit 1e-2)"),
    })
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    type Check<'a> = Box<dyn Fn() -> Result<Outcome, String> + 'a>;
    let criteria: Vec<(&str, Duration, Check)> = vec![
        ("random QA baseline 25.00% +/- 0.5%", Duration::from_secs(5), Box::new(|| baseline("qa", 25.0, 0.5))),
        (
            "random strict baseline 1.00% +/- 0.2% over 100 frames",
            Duration::from_secs(5),
            Box::new(|| baseline("strict", 1.0, 0.2)),
        ),
        ("greedy versus exhaustive selection, 200 instances", Duration::from_secs(30), Box::new(greedy_versus_exact)),
        ("planted key-frame recovery, 1000 questions", Duration::from_secs(10), Box::new(|| planted_recovery(d))),
        ("composite bijection and median labels, 1000 composites", Duration::from_secs(10), Box::new(composites)),
        (
            "10000x512 embedding round trip and relevance throughput",
            Duration::from_secs(60),
            Box::new(|| round_trip_and_throughput(d)),
        ),
        ("4x4 projector recovery at sigma 1e-3", Duration::from_secs(10), Box::new(|| projector(d))),
    ];

    let mut failed = 0;
    for (name, limit, check) in &criteria {
        let t = Instant::now();
        let result = check();
        let elapsed = t.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= *limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {detail}; {:.2}s (limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
