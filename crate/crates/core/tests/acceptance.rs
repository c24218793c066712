//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (written directly so it shows even when output is captured).

use std::io::Write as _;
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sigdrift::cpd::{calibrate_frequency_threshold, detect_events, EventConfig};
use sigdrift::datagen::{build_corpus, CorpusConfig};
use sigdrift::detect::{sliding_window_detect, DetectorThresholds, Verdict};
use sigdrift::eval::{self, ConfusionCounts, ExperimentConfig, ExperimentReport, SensitivityPoint, Summary};
use sigdrift::model::{QosSeries, Signature, TimeGrid, TrialExperience};
use sigdrift::noisegen::{inject, snr, NoiseKind, NoiseSpec};
use sigdrift::similarity::{cosine, euclidean, normalize, pcc, rmse, SimilarityMethod};

const SEED: u64 = 42;
const DESK_SIZES: [usize; 5] = [100, 200, 300, 400, 500];
const DETECTORS: [&str; 3] = ["sw", "snr", "cusum"];
const LEVELS: [f64; 3] = [0.5, 0.25, 0.0];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {id:>2} {:<4} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// --- 1. metrics ------------------------------------------------------------

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Recounts from an expanded outcome list; F1 as the harmonic mean of
/// precision and recall.
fn brute_metrics(c: &ConfusionCounts) -> [Option<f64>; 4] {
    let mut outcomes = Vec::new();
    outcomes.extend(std::iter::repeat_n((true, true), c.tp as usize));
    outcomes.extend(std::iter::repeat_n((false, true), c.fp as usize));
    outcomes.extend(std::iter::repeat_n((false, false), c.tn as usize));
    outcomes.extend(std::iter::repeat_n((true, false), c.fn_ as usize));
    let count = |actual: bool, flagged: bool| outcomes.iter().filter(|&&o| o == (actual, flagged)).count() as u64;
    let (tp, fp, tn, fn_) = (
        count(true, true),
        count(false, true),
        count(false, false),
        count(true, false),
    );
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    [ratio(fp, fp + tn), recall, ratio(tp + tn, outcomes.len() as u64), f1]
}

fn lib_metrics(c: &ConfusionCounts) -> [Option<f64>; 4] {
    [eval::fp_rate(c), eval::tp_rate(c), eval::accuracy(c), eval::f1(c)]
}

fn close_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

#[test]
fn criterion_01_metric_oracle() {
    let mut r = rng(1);
    let mut cases: Vec<ConfusionCounts> = (0..50)
        .map(|_| {
            ConfusionCounts::new(
                r.random_range(0..60),
                r.random_range(0..60),
                r.random_range(0..60),
                r.random_range(0..60),
            )
        })
        .collect();
    cases.push(ConfusionCounts::new(3, 1, 5, 1));
    let mismatches = cases
        .iter()
        .filter(|c| {
            !lib_metrics(c)
                .iter()
                .zip(brute_metrics(c))
                .all(|(a, b)| close_opt(*a, b, 1e-12))
        })
        .count();
    let fixture = lib_metrics(&ConfusionCounts::new(3, 1, 5, 1));
    let expected = [1.0 / 6.0, 0.75, 0.8, 0.75];
    let fixture_ok = fixture.iter().zip(expected).all(|(a, b)| close_opt(*a, Some(b), 1e-12));
    report(
        1,
        "metric oracle",
        mismatches == 0 && fixture_ok,
        &format!(
            "{} matrices, {mismatches} mismatches; fixture (3,1,5,1) → {fixture:.4?}",
            cases.len()
        ),
    );
}

// --- 2. similarity ---------------------------------------------------------

fn brute_pcc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma).powi(2);
        db += (b[i] - mb).powi(2);
    }
    (num / (da.sqrt() * db.sqrt())).clamp(-1.0, 1.0)
}

fn brute_euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn brute_rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn criterion_02_similarity_oracle() {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..=512);
        let scale = r.random_range(0.1..100.0);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        let b: Vec<f64> = (0..n)
            .map(|_| r.random_range(-1.0..1.0) * scale + r.random_range(0.0..1.0))
            .collect();
        worst = worst
            .max((pcc(&a, &b).unwrap() - brute_pcc(&a, &b)).abs())
            .max((cosine(&a, &b).unwrap() - brute_cosine(&a, &b)).abs())
            .max((euclidean(&a, &b).unwrap() - brute_euclidean(&a, &b)).abs() / scale)
            .max((rmse(&a, &b).unwrap() - brute_rmse(&a, &b)).abs() / scale);
    }
    let mut identities = Vec::new();
    for _ in 0..100 {
        let n = r.random_range(2..=512);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let tripled: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
        identities.push(pcc(&a, &a).unwrap() == 1.0);
        identities.push(euclidean(&a, &a).unwrap() == 0.0);
        identities.push(rmse(&a, &a).unwrap() == 0.0);
        identities.push(cosine(&a, &tripled).unwrap() == 1.0);
    }
    identities.push(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap() == 0.0);
    identities.push(pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() == -1.0);
    identities.push(euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap() == 5.0);
    let broken = identities.iter().filter(|ok| !**ok).count();
    report(
        2,
        "similarity oracle",
        worst <= 1e-9 && broken == 0,
        &format!(
            "1000 random pairs, max deviation {worst:.2e}; {broken}/{} identities broken",
            identities.len()
        ),
    );
}

// --- 3. AWGN calibration ---------------------------------------------------

#[test]
fn criterion_03_noise_calibration() {
    let grid = TimeGrid::days(360).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut within = 0;
    let mut worst: f64 = 0.0;
    for s in 0..100u64 {
        let mut r = rng(1000 + s);
        let raw: Vec<f64> = (0..360).map(|_| 3.0 + normal.sample(&mut r)).collect();
        let row = QosSeries::new("throughput", normalize(&raw).unwrap()).unwrap();
        let sig = Signature::new("p", grid.clone(), vec![row]).unwrap();
        let noisy = inject(&sig, &NoiseSpec::Distortion { target_snr_db: 20.0 }, s).unwrap();
        let (e, n) = (&sig.rows()[0].values, &noisy.rows()[0].values);
        let residual: Vec<f64> = e.iter().zip(n).map(|(a, b)| a - b).collect();
        let db = snr(e, &residual).unwrap().db().unwrap();
        worst = worst.max((db - 20.0).abs());
        within += usize::from((db - 20.0).abs() <= 1.0);
    }
    report(
        3,
        "AWGN calibration",
        within >= 95,
        &format!("{within}/100 seeds within ±1 dB of 20 dB (worst deviation {worst:.2} dB)"),
    );
}

// --- 4. spike recovery -----------------------------------------------------

#[test]
fn criterion_04_spike_recovery() {
    let config = ExperimentConfig::default();
    let bases = config.base_signatures().unwrap();
    let corpus_cfg = CorpusConfig {
        n_changed: 0,
        n_noisy: 200,
        distortion_fraction: 0.0,
        attenuation_share: 0.0,
        ..config.corpus.clone()
    };
    let corpus = build_corpus(&bases, &corpus_cfg, SEED).unwrap();
    let th = DetectorThresholds::default();
    let mut recovered = 0;
    for pair in &corpus {
        let Some(NoiseSpec::Spike { position, width, .. }) = pair.provenance.noise else {
            panic!("pair {} is not a spike pair", pair.provenance.index);
        };
        let out = sliding_window_detect(&pair.existing, &pair.recomputed, &th).unwrap();
        let overlaps = out
            .diagnostics
            .removed_window_start
            .is_some_and(|s| s < position + width && position < s + th.window);
        recovered += usize::from(out.verdict == Verdict::Noise(NoiseKind::Spike) && overlaps);
    }
    let share = recovered as f64 / corpus.len() as f64;
    report(
        4,
        "spike recovery",
        corpus.len() == 200 && share >= 0.95,
        &format!(
            "{recovered}/{} spike pairs classified as spike with overlapping window",
            corpus.len()
        ),
    );
}

// --- 5–8. desk-scale orderings -----------------------------------------------

fn desk_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.corpus.n_changed = 300;
    c.corpus.n_noisy = 300;
    c.repeats = 10;
    c.sample_sizes = DESK_SIZES.to_vec();
    c
}

fn sensitivity() -> &'static [SensitivityPoint] {
    static POINTS: OnceLock<Vec<SensitivityPoint>> = OnceLock::new();
    POINTS.get_or_init(|| eval::sensitivity_analysis(&desk_config(), &LEVELS, SEED).unwrap())
}

fn default_level() -> &'static ExperimentReport {
    &sensitivity()[0].report
}

/// Mean over sample-size cells of the per-cell repeat means, and the mean
/// per-cell repeat variance.
fn overall(rep: &ExperimentReport, det: &str, metric: &str) -> (f64, f64) {
    let cells: Vec<Summary> = DESK_SIZES
        .iter()
        .map(|&n| rep.summary(det, n, metric).unwrap())
        .collect();
    let k = cells.len() as f64;
    let mean = cells.iter().map(|s| s.mean.unwrap()).sum::<f64>() / k;
    let var = cells.iter().map(|s| s.std.unwrap_or(0.0).powi(2)).sum::<f64>() / k;
    (mean, var)
}

fn describe(rep: &ExperimentReport, metric: &str) -> String {
    DETECTORS
        .iter()
        .map(|d| {
            let (m, v) = overall(rep, d, metric);
            format!("{d} {m:.3}±{:.3}", v.sqrt())
        })
        .collect::<Vec<_>>()
        .join(", ")
}

#[test]
fn criterion_05_fp_rate_ordering() {
    let rep = default_level();
    let fp = |d| overall(rep, d, "fp_rate");
    let gap_ok = |lo: (f64, f64), hi: (f64, f64)| hi.0 - lo.0 > ((lo.1 + hi.1) / 2.0).sqrt();
    let (sw, snr, cusum) = (fp("sw"), fp("snr"), fp("cusum"));
    report(
        5,
        "FP rate SW < SNR < CUSUM, gaps > pooled std",
        gap_ok(sw, snr) && gap_ok(snr, cusum),
        &describe(rep, "fp_rate"),
    );
}

#[test]
fn criterion_06_tp_rate_ordering() {
    let rep = default_level();
    let tp = |d| overall(rep, d, "tp_rate").0;
    report(
        6,
        "TP rate CUSUM > SNR > SW",
        tp("cusum") > tp("snr") && tp("snr") > tp("sw"),
        &describe(rep, "tp_rate"),
    );
}

#[test]
fn criterion_07_f1_and_accuracy_ordering() {
    let rep = default_level();
    let f1 = |d| overall(rep, d, "f1").0;
    let sw_first = DESK_SIZES
        .iter()
        .filter(|&&n| {
            let acc = |d| rep.summary(d, n, "accuracy").unwrap().mean.unwrap();
            DETECTORS.iter().all(|d| *d == "sw" || acc("sw") > acc(d))
        })
        .count();
    report(
        7,
        "F1 SNR > SW > CUSUM; SW most accurate in most cells",
        f1("snr") > f1("sw") && f1("sw") > f1("cusum") && 2 * sw_first > DESK_SIZES.len(),
        &format!(
            "f1 {}; SW accuracy first in {sw_first}/{} cells",
            describe(rep, "f1"),
            DESK_SIZES.len()
        ),
    );
}

#[test]
fn criterion_08_sensitivity() {
    let rows: Vec<(f64, f64, f64)> = sensitivity()
        .iter()
        .map(|p| {
            (
                p.distortion_fraction,
                overall(&p.report, "snr", "f1").0,
                overall(&p.report, "sw", "f1").0,
            )
        })
        .collect();
    let detail = rows
        .iter()
        .map(|(l, snr, sw)| format!("level {l}: snr {snr:.3} vs sw {sw:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    report(
        8,
        "SNR F1 > SW F1 at every distortion level",
        rows.iter().all(|(_, snr, sw)| snr > sw),
        &detail,
    );
}

// --- 9. event detection ----------------------------------------------------

fn brute_events(flags: &[(usize, bool)], wl: usize, f: usize) -> Vec<(usize, usize)> {
    let Some(last) = flags.last() else { return Vec::new() };
    (0..=last.0 / wl)
        .filter_map(|w| {
            let count = flags
                .iter()
                .filter(|(i, a)| *a && *i >= w * wl && *i < (w + 1) * wl)
                .count();
            (count > f).then_some((w * wl + wl - 1, count))
        })
        .collect()
}

#[test]
fn criterion_09_event_oracle() {
    let mut r = rng(9);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = r.random_range(0..2000);
        let density = r.random_range(0.0..1.0);
        let mut idx = 0;
        let flags: Vec<(usize, bool)> = (0..len)
            .map(|_| {
                idx += r.random_range(0..3);
                (idx, r.random_bool(density))
            })
            .collect();
        let config = EventConfig::new(r.random_range(1..60), r.random_range(1..20)).unwrap();
        let got: Vec<(usize, usize)> = detect_events(&flags, &config)
            .iter()
            .map(|c| (c.grid_index, c.anomaly_count))
            .collect();
        mismatches += usize::from(got != brute_events(&flags, config.window_length, config.frequency_threshold));
    }

    // Five past users share the least similarity within one trial period.
    let grid = TimeGrid::days(60).unwrap();
    let raw: Vec<f64> = (0..60).map(|t| (t as f64 / 5.0).sin() + 0.1 * t as f64).collect();
    let sig = Signature::new(
        "p",
        grid,
        vec![QosSeries::new("throughput", normalize(&raw).unwrap()).unwrap()],
    )
    .unwrap();
    let slice = |s: usize| sig.rows()[0].values[s..s + 10].to_vec();
    let mut past = Vec::new();
    for u in 0..5 {
        let reversed: Vec<f64> = slice(5).into_iter().rev().collect();
        past.push(TrialExperience::new(format!("worst{u}"), "throughput", 5, reversed).unwrap());
    }
    for u in 0..3 {
        past.push(TrialExperience::new(format!("ok{u}"), "throughput", 35 + u, slice(35 + u)).unwrap());
    }
    let t_s = sigdrift::cpd::calibrate_similarity_threshold(&past, &sig, SimilarityMethod::Pcc).unwrap();
    let f_thresh = calibrate_frequency_threshold(&past, &sig, &t_s, 30)
        .unwrap()
        .frequency_threshold;
    let stream: Vec<(usize, bool)> = (0..30)
        .map(|i| (i, i < 5))
        .chain((30..60).map(|i| (i, i < 36)))
        .collect();
    let events = detect_events(&stream, &EventConfig::new(30, f_thresh).unwrap());
    let example_ok = f_thresh == 5 && events.len() == 1 && events[0].window_start == 30 && events[0].anomaly_count == 6;
    report(
        9,
        "event detection oracle",
        mismatches == 0 && example_ok,
        &format!("1000 random streams, {mismatches} mismatches; F_thresh initialized to {f_thresh}, events {events:?}"),
    );
}

// --- 10. determinism ---------------------------------------------------------

fn evaluate_bytes(dir: &std::path::Path, name: &str, jobs: &str) -> Vec<u8> {
    let out = dir.join(name);
    let status = Command::new(env!("CARGO_BIN_EXE_sigdrift"))
        .args([
            "evaluate",
            "--seed",
            "42",
            "--jobs",
            jobs,
            "--n-changed",
            "300",
            "--n-noisy",
            "300",
        ])
        .args(["--repeats", "3", "--sample-sizes", "100,300"])
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    std::fs::read(out).unwrap()
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let first = evaluate_bytes(dir.path(), "a.json", "4");
    let second = evaluate_bytes(dir.path(), "b.json", "1");
    report(
        10,
        "evaluate --seed 42 is byte-identical across runs",
        !first.is_empty() && first == second,
        &format!(
            "{} vs {} bytes, identical: {}",
            first.len(),
            second.len(),
            first == second
        ),
    );
}
