//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! Runs as a plain binary (`harness = false`) and exits non-zero when any
//! criterion fails. Criteria 5 to 7 train small networks and take minutes.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

#[path = "../../core/tests/gradcheck/mod.rs"]
mod gradcheck;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use magloc_core::alignment::{
    apply_alignment, build_alignment_set, fit_deep, fit_linear, positioned_samples, residual_rms, AlignmentPair,
    AlignmentTransform, DeepFitConfig,
};
use magloc_core::imaging::{
    encode_trial, gadf_matrix, gasf_matrix, mtf_matrix, quantile_bins, recurrence_matrix, transition_matrix,
    ChannelLayout, ImagingConfig, Metric, WindowConfig,
};
use magloc_core::ingest::Trial;
use magloc_core::landmarks::{build_map, extract_landmarks, label_windows, LandmarkConfig};
use magloc_core::models::{
    evaluate, evaluate_trials, fn_regressor_spec, rnn_regressor_spec, stack_tensor, train_regressor_fn,
    train_regressor_rnn, ArchConfig, SequenceData, TrainConfig,
};
use magloc_core::neuralnet::Tensor;
use magloc_core::synth::{CorridorScenario, LandmarkScenario, TwoRobotScenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, v: Verdict) -> Verdict {
    match v {
        Verdict::Pass(d) if elapsed.as_secs_f64() > limit_s => {
            Verdict::Fail(format!("{d}; runtime over the {limit_s} s budget"))
        }
        v => v,
    }
}

fn random_segment(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = rng.random_range(8..=64);
    let base = rng.random_range(-60.0..60.0);
    match rng.random_range(0..4) {
        0 => (0..m).map(|_| base + rng.random_range(0..4) as f64).collect(),
        1 => (0..m).map(|i| base + (i as f64 * 0.3).sin() * 5.0).collect(),
        _ => (0..m).map(|_| base + rng.random_range(-10.0..10.0)).collect(),
    }
}

// ---------------------------------------------------------------------------

fn transform_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    let mut bin_mismatch = 0;
    for _ in 0..1000 {
        let v = random_segment(&mut rng);
        for metric in Metric::ALL {
            let got = recurrence_matrix(&v, metric).unwrap();
            worst = worst.max(oracle::max_abs_diff(&oracle::recurrence(&v, metric.name()), &got.data));
        }
        worst = worst.max(oracle::max_abs_diff(&oracle::gasf(&v), &gasf_matrix(&v).unwrap().data));
        worst = worst.max(oracle::max_abs_diff(&oracle::gadf(&v), &gadf_matrix(&v).unwrap().data));
        for q in [2, 4, 8] {
            if quantile_bins(&v, q) != oracle::bins(&v, q) {
                bin_mismatch += 1;
            }
            worst = worst.max(oracle::max_abs_diff(&oracle::markov(&v, q), &mtf_matrix(&v, q).unwrap().data));
        }
    }
    check(
        worst <= 1e-12 && bin_mismatch == 0,
        format!("1000 segments, max abs diff {worst:.2e} (tol 1e-12), {bin_mismatch} bin mismatches"),
    )
}

fn transform_invariants() -> Verdict {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut violations = 0usize;
    let mut count = |bad: bool| violations += bad as usize;
    for n in 0..10_000 {
        let v = random_segment(&mut rng);
        let m = v.len();
        let metric = Metric::ALL[n % Metric::ALL.len()];
        let rp = recurrence_matrix(&v, metric).unwrap();
        let gs = gasf_matrix(&v).unwrap();
        let gd = gadf_matrix(&v).unwrap();
        let q = 2 + n % 7;
        let w = transition_matrix(&quantile_bins(&v, q), q);
        let mtf = mtf_matrix(&v, q).unwrap();
        for i in 0..m {
            count(rp.get(i, i) != 1.0);
            count(gd.get(i, i).abs() > TOL);
            for j in 0..m {
                let r = rp.get(i, j);
                count(!(0.0..=1.0).contains(&r) || (r - rp.get(j, i)).abs() > TOL);
                count((gs.get(i, j) - gs.get(j, i)).abs() > TOL);
                count((gd.get(i, j) + gd.get(j, i)).abs() > TOL);
                count(!(0.0..=1.0).contains(&mtf.get(i, j)));
            }
        }
        for row in w.chunks(q) {
            count((row.iter().sum::<f64>() - 1.0).abs() > TOL || row.iter().any(|x| !(0.0..=1.0).contains(x)));
        }
    }
    check(violations == 0, format!("10000 segments, {violations} violations"))
}

fn gradient_checks() -> Verdict {
    let mut lines = Vec::new();
    let mut all = true;
    for (name, run) in gradcheck::families() {
        let mut total = gradcheck::Stats::default();
        for seed in 0..gradcheck::INSTANCES {
            total.merge(run(seed));
        }
        all &= total.passed();
        lines.push(format!("{name} {:.1e}", total.worst));
    }
    check(all, format!("{} instances per family, worst rel err: {}", gradcheck::INSTANCES, lines.join(", ")))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    oracle::axis_angle([a[0] / n, a[1] / n, a[2] / n], rng.random_range(0.1..3.0))
}

fn rotation_pairs(r: &[[f64; 3]; 3], noise: f64, rng: &mut ChaCha8Rng) -> Vec<AlignmentPair> {
    let normal = rand_distr::Normal::new(0.0, noise.max(1e-300)).unwrap();
    (0..200)
        .map(|_| {
            let m: [f64; 3] = std::array::from_fn(|_| rng.random_range(-50.0..50.0));
            let mut dst = oracle::mat_vec(r, m);
            if noise > 0.0 {
                for v in &mut dst {
                    *v += rand_distr::Distribution::sample(&normal, rng);
                }
            }
            AlignmentPair { m_src: m, m_dst: dst, pos_src: [0.0; 2], pos_dst: [0.0; 2] }
        })
        .collect()
}

fn rotation_recovery() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let r = random_rotation(&mut rng);
    let clean = fit_linear(&rotation_pairs(&r, 0.0, &mut rng)).unwrap();
    let err = oracle::frobenius(&clean.matrix().unwrap(), &r);
    let noisy_pairs = rotation_pairs(&r, 0.1, &mut rng);
    let rms = residual_rms(&fit_linear(&noisy_pairs).unwrap(), &noisy_pairs);
    check(err < 1e-6 && rms < 0.3, format!("noiseless Frobenius {err:.2e} (< 1e-6), noisy rms {rms:.4} uT (< 0.3)"))
}

// ---------------------------------------------------------------------------
// Learning criteria: shared small architecture and schedule.

const SIDE: usize = 16;

fn arch() -> ArchConfig {
    ArchConfig { conv_channels: vec![8, 16], kernel: 3, pool: 2, fc: 32, gru_hidden: 32, gru_layers: 2 }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, base_lr: 1e-3, max_lr: 1e-2, step_size: 100, momentum: 0.9, seed: 7, ..TrainConfig::default() }
}

fn sequences(trials: &[Trial], window: &WindowConfig, cfg: &ImagingConfig) -> Vec<SequenceData> {
    trials
        .iter()
        .map(|t| {
            let st = encode_trial(t, window, cfg).unwrap();
            SequenceData {
                id: t.id.clone(),
                inputs: st.stacks.iter().map(stack_tensor).collect(),
                positions: st.anchors().unwrap(),
                times: st.windows.iter().map(|w| w.t_end).collect(),
            }
        })
        .collect()
}

fn flatten(seqs: &[SequenceData]) -> (Vec<Tensor>, Vec<[f64; 2]>) {
    (
        seqs.iter().flat_map(|s| s.inputs.iter().cloned()).collect(),
        seqs.iter().flat_map(|s| s.positions.iter().copied()).collect(),
    )
}

fn imaging(n: usize) -> ImagingConfig {
    ImagingConfig { side: SIDE, layout: ChannelLayout::from_count(n).unwrap(), ..ImagingConfig::default() }
}

fn alignment_ordering() -> Verdict {
    let data = TwoRobotScenario::default().generate(11).unwrap();
    let icfg = imaging(12);
    let window = WindowConfig { size: 5.0, step: 0.5 };
    let (xs, ys) = flatten(&sequences(&data.r1, &window, &icfg));
    let (model, _) = train_regressor_fn(&xs, &ys, &fn_regressor_spec(12, SIDE, &arch()), &train_cfg(40)).unwrap();
    let d1: Vec<_> = data.r1_common.iter().flat_map(|t| positioned_samples(t).unwrap()).collect();
    let d2: Vec<_> = data.r2_common.iter().flat_map(|t| positioned_samples(t).unwrap()).collect();
    let pairs = build_alignment_set(&d1, &d2, 3, 0.5).unwrap();
    let linear = fit_linear(&pairs).unwrap();
    let deep = fit_deep(&pairs, &DeepFitConfig::default()).unwrap();
    let error = |g: &AlignmentTransform| {
        let aligned: Vec<Trial> = data.r2.iter().map(|t| apply_alignment(g, t)).collect();
        let (x2, y2) = flatten(&sequences(&aligned, &window, &icfg));
        let est: Vec<[f64; 2]> = x2.iter().map(|x| model.predict(x).unwrap()).collect();
        evaluate(&est, &y2).unwrap()
    };
    let (none, lin, dp) = (error(&AlignmentTransform::Identity), error(&linear), error(&deep));
    check(
        none > 5.0 * lin && lin >= dp,
        format!("error none {none:.3} m, linear {lin:.3} m, deep {dp:.3} m on {} pairs (need none > 5 x linear, linear >= deep)", pairs.len()),
    )
}

fn channel_ablation() -> Verdict {
    let sc = CorridorScenario::default().with_ablation_markers();
    let train = sc.generate(24, 1).unwrap();
    let test = sc.generate(8, 2).unwrap();
    let window = WindowConfig::default();
    let mut errors = Vec::new();
    for n in [1, 3, 9, 12] {
        let icfg = imaging(n);
        let (xs, ys) = flatten(&sequences(&train, &window, &icfg));
        let (model, _) = train_regressor_fn(&xs, &ys, &fn_regressor_spec(n, SIDE, &arch()), &train_cfg(40)).unwrap();
        let (e, _) = evaluate_trials(&model, &sequences(&test, &window, &icfg), 0.0, 3).unwrap();
        errors.push((n, e));
    }
    let mut inversions = 0;
    let mut bad = false;
    for w in errors.windows(2) {
        if w[1].1 > w[0].1 {
            inversions += 1;
            bad |= w[1].1 > 1.05 * w[0].1;
        }
    }
    let detail = errors.iter().map(|(n, e)| format!("N={n} {e:.3} m")).collect::<Vec<_>>().join(", ");
    check(inversions <= 1 && !bad, format!("{detail}; {inversions} inversion(s)"))
}

fn context_disambiguation() -> Verdict {
    let sc = CorridorScenario::default();
    let window = WindowConfig::default();
    let icfg = imaging(12);
    let train = sequences(&sc.generate(24, 1).unwrap(), &window, &icfg);
    let test = sequences(&sc.generate(8, 2).unwrap(), &window, &icfg);
    let cfg = train_cfg(20);
    let (xs, ys) = flatten(&train);
    let (fnm, _) = train_regressor_fn(&xs, &ys, &fn_regressor_spec(12, SIDE, &arch()), &cfg).unwrap();
    let (fn_err, _) = evaluate_trials(&fnm, &test, 0.0, 3).unwrap();
    let (rnn, _) = train_regressor_rnn(&train, &rnn_regressor_spec(12, SIDE, &arch()), &cfg).unwrap();
    let (rnn_err, _) = evaluate_trials(&rnn, &test, 3.0, 3).unwrap();
    check(
        rnn_err < 0.5 * fn_err,
        format!("CNN+RNN {rnn_err:.3} m (start sigma 3 m) vs CNN+FN {fn_err:.3} m, ratio {:.3} (< 0.5)", rnn_err / fn_err),
    )
}

fn landmark_pipeline() -> Verdict {
    let sc = LandmarkScenario::default();
    let map = build_map(&[sc.generate(1).unwrap()], 1.0).unwrap();
    let lms = extract_landmarks(&map, &LandmarkConfig::default()).unwrap();
    let recovered = sc
        .anomalies
        .iter()
        .filter(|a| lms.iter().any(|l| (l.pos[0] - a.center[0]).hypot(l.pos[1] - a.center[1]) <= map.resolution))
        .count();
    let mut rng = ChaCha8Rng::seed_from_u64(8008);
    let anchors: Vec<[f64; 2]> =
        (0..10_000).map(|_| [rng.random_range(-5.0..30.0), rng.random_range(-5.0..30.0)]).collect();
    let sites: Vec<[f64; 2]> = lms.iter().map(|l| l.pos).collect();
    let labels = label_windows(&anchors, &lms).unwrap();
    let mismatches = anchors.iter().zip(&labels).filter(|(a, &l)| oracle::nearest(**a, &sites) != l).count();
    check(
        lms.len() == 4 && recovered == 4 && mismatches == 0,
        format!("{} landmarks, {recovered}/4 planted within 1 cell, {mismatches}/10000 label mismatches", lms.len()),
    )
}

fn magpie() -> Verdict {
    let Ok(dir) = std::env::var("MAGPIE_DIR") else {
        return Verdict::Skip("MAGPIE_DIR not set".into());
    };
    let dir = Path::new(&dir);
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let cfg = "[ingest]\nformat = \"magpie\"\n[model]\nkind = \"rnn_regressor\"\n";
    fs::write(w.join("cfg.toml"), cfg).unwrap();
    let steps: [Vec<String>; 5] = [
        vec!["transform".into(), "--input".into(), dir.join("train").display().to_string(), "--out".into(), "st_train".into()],
        vec!["transform".into(), "--input".into(), dir.join("test").display().to_string(), "--out".into(), "st_test".into()],
        vec!["train".into(), "--stacks".into(), "st_train".into(), "--out".into(), "model.json".into()],
        vec!["predict".into(), "--model".into(), "model.json".into(), "--stacks".into(), "st_test".into(), "--out".into(), "pred.csv".into()],
        vec!["eval".into(), "--predictions".into(), "pred.csv".into(), "--out".into(), "metrics.json".into()],
    ];
    for s in &steps {
        if let Err(e) = run_cli(w, &[&["-c".to_string(), "cfg.toml".to_string()][..], s].concat()) {
            return Verdict::Fail(e);
        }
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join("metrics.json")).unwrap()).unwrap();
    let e = m["mean_error_m"].as_f64().unwrap_or(f64::INFINITY);
    match e {
        e if e <= 0.60 => Verdict::Pass(format!("mean error {e:.3} m (<= 0.60)")),
        e if e <= 1.0 => Verdict::Pass(format!("SOFT PASS, flagged: mean error {e:.3} m (<= 1.0, > 0.60)")),
        e => Verdict::Fail(format!("mean error {e:.3} m (> 1.0)")),
    }
}

fn run_cli(dir: &Path, args: &[String]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_magloc")).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("magloc {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

const PIPELINE: &str = r#"
[ingest]
rate = 10.0

[imaging]
side = 12

[model]
kind = "rnn_regressor"

[model.arch]
conv_channels = [4, 8]
fc = 16
gru_hidden = 16
gru_layers = 2

[model.train]
epochs = 4
batch_size = 16
base_lr = 0.001
max_lr = 0.01
momentum = 0.9
seed = 3

[synth]
seed = 21
train = 6
val = 1
test = 3
reverse = true
"#;

fn pipeline(dir: &Path) -> Result<Vec<u8>, String> {
    fs::write(dir.join("cfg.toml"), PIPELINE).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 6] = [
        &["synth", "--out", "data"],
        &["transform", "--input", "data/train", "--out", "st_train"],
        &["transform", "--input", "data/test", "--out", "st_test"],
        &["train", "--stacks", "st_train", "--out", "model.json"],
        &["predict", "--model", "model.json", "--stacks", "st_test", "--out", "pred.csv"],
        &["eval", "--predictions", "pred.csv", "--out", "metrics.json"],
    ];
    for s in steps {
        let args: Vec<String> = ["-c", "cfg.toml"].iter().chain(s).map(|a| a.to_string()).collect();
        run_cli(dir, &args)?;
    }
    fs::read(dir.join("metrics.json")).map_err(|e| e.to_string())
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => check(x == y, format!("metrics JSON {} bytes, identical: {}", x.len(), x == y)),
        (Err(e), _) | (_, Err(e)) => Verdict::Fail(e),
    }
}

fn main() {
    type Criterion = (u32, &'static str, f64, fn() -> Verdict);
    let criteria: [Criterion; 10] = [
        (1, "transform oracle equivalence", 10.0, transform_oracles),
        (2, "transform invariant suite", f64::INFINITY, transform_invariants),
        (3, "gradient checks", 60.0, gradient_checks),
        (4, "rotation recovery", 5.0, rotation_recovery),
        (5, "alignment ordering", 1800.0, alignment_ordering),
        (6, "channel ablation ordering", 3600.0, channel_ablation),
        (7, "context disambiguation", 3600.0, context_disambiguation),
        (8, "landmark pipeline", f64::INFINITY, landmark_pipeline),
        (9, "MagPIE reproduction", f64::INFINITY, magpie),
        (10, "determinism", f64::INFINITY, determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let v = run();
        let elapsed = t0.elapsed();
        let (tag, detail) = match within(elapsed, limit, v) {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id:>2} {tag} {name}: {detail} [{:.1} s]", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
