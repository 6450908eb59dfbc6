//! Subcommand implementations. Each takes the resolved configuration and
//! explicit paths and prints a one-line summary.

use std::fs;
use std::path::Path;

use magloc_core::alignment::{
    apply_alignment, build_alignment_set, fit_affine, fit_deep, fit_linear, positioned_samples, residual_rms,
    AlignmentPair, AlignmentTransform, PositionedSample,
};
use magloc_core::imaging::encode_trial;
use magloc_core::ingest::{reverse_augment, Trial};
use magloc_core::landmarks::{build_map, extract_landmarks, label_windows};
use magloc_core::models::{
    classifier_spec, fn_regressor_spec, noisy_start, rnn_regressor_spec, train_classifier, train_regressor_fn,
    train_regressor_rnn, Model, ModelKind,
};
use magloc_core::neuralnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{CliError, Context, Result};
use crate::images::{write_image, DumpFormat};
use crate::outputs::{self, AlignmentRow, AlignmentSummary, PredictionRow};
use crate::stacks::{self, StackMeta, StackedTrial};
use crate::trials::{load_dir, write_canonical};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_trials(dir: &Path, trials: &[Trial]) -> Result<()> {
    create_dir(dir)?;
    trials.iter().try_for_each(|t| write_canonical(t, &dir.join(format!("{}.csv", t.id))))
}

fn load(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<Trial>> {
    load_dir(dir, cfg.ingest.format, cfg.ingest.rate, &cfg.ingest.source())
}

// ---------------------------------------------------------------------------
// synth

/// Writes a synthetic dataset of canonical CSV trials under `out`.
pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let s = &cfg.synth;
    let seed = s.seed;
    // Any failure to generate means the scenario itself is invalid.
    let scenario_err = |e: magloc_core::Error| CliError::Config(format!("{} scenario: {e}", s.scenario));
    match s.scenario.as_str() {
        "corridor" => {
            let mut sc = s.corridor.clone();
            if s.ablation_markers {
                sc = sc.with_ablation_markers();
            }
            let mut train = sc.generate(s.train, seed).map_err(scenario_err)?;
            if s.reverse {
                let rev: Vec<Trial> = train.iter().map(reverse_augment).collect();
                train.extend(rev);
            }
            let val = sc.generate(s.val, seed.wrapping_add(1)).map_err(scenario_err)?;
            let test = sc.generate(s.test, seed.wrapping_add(2)).map_err(scenario_err)?;
            write_trials(&out.join("train"), &train)?;
            write_trials(&out.join("val"), &val)?;
            write_trials(&out.join("test"), &test)?;
            println!("corridor: {} train, {} val, {} test trials in {}", train.len(), val.len(), test.len(), out.display());
        }
        "two_robot" => {
            let d = s.two_robot.generate(seed).map_err(scenario_err)?;
            for (name, trials) in [("r1", &d.r1), ("r2", &d.r2), ("r1_common", &d.r1_common), ("r2_common", &d.r2_common)] {
                write_trials(&out.join(name), trials)?;
            }
            println!("two_robot: {} r1, {} r2, {} common passes in {}", d.r1.len(), d.r2.len(), d.r1_common.len(), out.display());
        }
        "landmark" => {
            let t = s.landmark.generate(seed).map_err(scenario_err)?;
            write_trials(&out.join("train"), std::slice::from_ref(&t))?;
            println!("landmark: 1 sweep of {} samples in {}", t.len(), out.display());
        }
        other => return Err(CliError::Config(format!("unknown scenario `{other}`"))),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// transform

pub fn encode_dir(cfg: &PipelineConfig, input: &Path) -> Result<(StackMeta, Vec<magloc_core::imaging::TrialStacks>)> {
    let icfg = cfg.imaging.to_core()?;
    let trials = load(cfg, input)?;
    let encoded = trials
        .iter()
        .map(|t| encode_trial(t, &cfg.window, &icfg).context(|| format!("trial `{}`", t.id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((StackMeta::new(&icfg, cfg.window, cfg.ingest.rate), encoded))
}

/// Encodes every trial of `input` into stacks under `out`, optionally
/// dumping every channel image under `out/images/<trial>/`.
pub fn transform(cfg: &PipelineConfig, input: &Path, out: &Path, dump: Option<DumpFormat>) -> Result<()> {
    let (meta, encoded) = encode_dir(cfg, input)?;
    stacks::write_stacks(out, &meta, &encoded)?;
    if let Some(fmt) = dump {
        for t in &encoded {
            let dir = out.join("images").join(&t.trial_id);
            create_dir(&dir)?;
            for (k, stack) in t.stacks.iter().enumerate() {
                for (img, (tag, &(kind, _))) in stack.channels.iter().zip(meta.channels.iter().zip(&stack.layout)) {
                    let path = dir.join(format!("w{k:04}_{tag}.{}", fmt.extension()));
                    write_image(&path, img, kind, fmt)?;
                }
            }
        }
    }
    let windows: usize = encoded.iter().map(|t| t.stacks.len()).sum();
    println!("{} trials, {} windows of {} channels at {}px", encoded.len(), windows, meta.layout, meta.side);
    Ok(())
}

// ---------------------------------------------------------------------------
// landmarks

pub fn landmarks(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<()> {
    let trials = load(cfg, input)?;
    let lcfg = cfg.landmarks.to_core();
    let map = build_map(&trials, lcfg.resolution).context(|| "building the magnetic map".into())?;
    let found = extract_landmarks(&map, &lcfg).context(|| "extracting landmarks".into())?;
    create_dir(out)?;
    outputs::write_map(&out.join("map.csv"), &map)?;
    outputs::write_landmarks(&out.join("landmarks.csv"), &found)?;
    println!("{} landmarks from a {}x{} map", found.len(), map.nx, map.ny);
    Ok(())
}

// ---------------------------------------------------------------------------
// train / predict / eval

fn check_layout(cfg: &PipelineConfig, meta: &StackMeta, what: &str) -> Result<()> {
    if cfg.imaging.layout != meta.layout || cfg.imaging.side != meta.side {
        return Err(CliError::Compatibility(format!(
            "configuration asks for {} channels at {}px, {what} has {} channels at {}px",
            cfg.imaging.layout, cfg.imaging.side, meta.layout, meta.side
        )));
    }
    Ok(())
}

fn flatten(trials: &[StackedTrial]) -> Result<(Vec<Tensor>, Vec<[f64; 2]>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in trials {
        let s = t.sequence()?;
        xs.extend(s.inputs);
        ys.extend(s.positions);
    }
    if xs.is_empty() {
        return Err(CliError::Data("no windows to train on".into()));
    }
    Ok((xs, ys))
}

/// Trains on a stack directory; also writes `<out>.curve.csv` with the
/// per-epoch loss.
pub fn train(cfg: &PipelineConfig, stack_dir: &Path, out: &Path, landmarks: Option<&Path>) -> Result<Model> {
    let (meta, trials) = stacks::read_stacks(stack_dir)?;
    check_layout(cfg, &meta, &format!("{}", stack_dir.display()))?;
    let arch = &cfg.model.arch;
    let tc = &cfg.model.train;
    let (model, report) = match cfg.model.kind()? {
        ModelKind::Classifier => {
            let path = landmarks.ok_or_else(|| CliError::Config("the classifier needs --landmarks".into()))?;
            let lms = outputs::read_landmarks(path)?;
            let (xs, anchors) = flatten(&trials)?;
            let labels = label_windows(&anchors, &lms).context(|| "labelling windows".into())?;
            let class_pos: Vec<[f64; 2]> = lms.iter().map(|l| l.pos).collect();
            let spec = classifier_spec(meta.layout, meta.side, arch, lms.len());
            train_classifier(&xs, &labels, &class_pos, &spec, tc).context(|| "training the classifier".into())?
        }
        ModelKind::FnRegressor => {
            let (xs, ys) = flatten(&trials)?;
            let spec = fn_regressor_spec(meta.layout, meta.side, arch);
            train_regressor_fn(&xs, &ys, &spec, tc).context(|| "training the CNN+FN regressor".into())?
        }
        ModelKind::RnnRegressor => {
            let seqs = trials.iter().map(StackedTrial::sequence).collect::<Result<Vec<_>>>()?;
            let spec = rnn_regressor_spec(meta.layout, meta.side, arch);
            train_regressor_rnn(&seqs, &spec, tc).context(|| "training the CNN+RNN regressor".into())?
        }
    };
    outputs::write_model(out, &model, &meta)?;
    let mut curve = out.as_os_str().to_owned();
    curve.push(".curve.csv");
    outputs::write_training_curve(Path::new(&curve), &report)?;
    for id in &report.skipped {
        eprintln!("skipped trial `{id}`: no windows");
    }
    println!(
        "{} trained for {} epochs, final loss {:.6}",
        model.kind.name(),
        report.epoch_loss.len(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

/// Position estimates for every window of every trial, in manifest order.
/// Recurrent models start from the first anchor plus seeded noise.
pub fn predict_rows(cfg: &PipelineConfig, model: &Model, trials: &[StackedTrial]) -> Result<Vec<PredictionRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.eval_seed);
    let mut rows = Vec::new();
    for t in trials {
        let est: Vec<[f64; 2]> = if model.kind == ModelKind::RnnRegressor {
            let first = t.windows[0]
                .anchor
                .ok_or_else(|| CliError::Data(format!("trial `{}` has no start anchor for the recurrent model", t.id)))?;
            let start = noisy_start(first, cfg.model.train.start_noise, &mut rng);
            model
                .predict_sequence(&t.inputs, &t.times(), Some(start))
                .context(|| format!("trial `{}`", t.id))?
                .iter()
                .map(|e| e.pos)
                .collect()
        } else {
            t.inputs
                .iter()
                .enumerate()
                .map(|(k, x)| model.predict(x).context(|| format!("trial `{}` window {k}", t.id)))
                .collect::<Result<_>>()?
        };
        for (k, (p, w)) in est.iter().zip(&t.windows).enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(CliError::Numerical(format!("non-finite estimate for `{}` window {k}", t.id)));
            }
            rows.push(PredictionRow {
                trial_id: t.id.clone(),
                window: k,
                t: w.t_end,
                x_pred: p[0],
                y_pred: p[1],
                x_gt: w.anchor.map(|a| a[0]),
                y_gt: w.anchor.map(|a| a[1]),
            });
        }
    }
    Ok(rows)
}

pub fn predict(cfg: &PipelineConfig, model_path: &Path, stack_dir: &Path, out: &Path) -> Result<()> {
    let (model, trained_on) = outputs::read_model(model_path)?;
    let (meta, trials) = stacks::read_stacks(stack_dir)?;
    if model.channels() != meta.layout || model.side() != meta.side {
        return Err(CliError::Compatibility(format!(
            "model expects {} channels at {}px, {} has {} channels at {}px",
            model.channels(),
            model.side(),
            stack_dir.display(),
            meta.layout,
            meta.side
        )));
    }
    check_layout(cfg, &meta, &format!("{}", stack_dir.display()))?;
    if let Some(t) = trained_on {
        if t.channels != meta.channels || t.window != meta.window || t.metric != meta.metric || t.bins != meta.bins {
            return Err(CliError::Compatibility(format!(
                "{} was encoded differently from the model's training stacks",
                stack_dir.display()
            )));
        }
    }
    let rows = predict_rows(cfg, &model, &trials)?;
    outputs::write_predictions(out, &rows)?;
    println!("{} estimates over {} trials", rows.len(), trials.len());
    Ok(())
}

pub fn eval(predictions: &Path, out: &Path) -> Result<f64> {
    let rows = outputs::read_predictions(predictions)?;
    let m = outputs::metrics(&rows)?;
    outputs::write_metrics(out, &m)?;
    println!("mean localization error {:.4} m over {} windows", m.mean_error_m, m.windows);
    Ok(m.mean_error_m)
}

// ---------------------------------------------------------------------------
// align

/// Inputs of the alignment command.
pub struct AlignInputs<'a> {
    /// Train-robot (R1) trials.
    pub train: &'a Path,
    /// Test-robot (R2) trials.
    pub test: &'a Path,
    /// Optional common segment driven by both robots.
    pub common: Option<(&'a Path, &'a Path)>,
    pub out: &'a Path,
    /// Where to write the aligned test trials.
    pub apply_out: Option<&'a Path>,
}

fn samples(trials: &[Trial]) -> Result<Vec<PositionedSample>> {
    let mut out = Vec::new();
    for t in trials {
        out.extend(positioned_samples(t).context(|| format!("trial `{}`", t.id))?);
    }
    Ok(out)
}

fn fit(kind: &str, pairs: &[AlignmentPair], cfg: &PipelineConfig) -> Result<AlignmentTransform> {
    let r = match kind {
        "none" => Ok(AlignmentTransform::Identity),
        "linear" => fit_linear(pairs),
        "affine" => fit_affine(pairs),
        "deep" => fit_deep(pairs, &cfg.alignment.deep.to_core()),
        other => return Err(CliError::Config(format!("unknown alignment kind `{other}`"))),
    };
    r.context(|| format!("fitting the {kind} alignment"))
}

/// Fits the configured transform on the alignment split and reports the
/// residual of no, linear and deep alignment on the fit pairs and on the
/// held-out pairs.
///
/// With a common segment the fit pairs come from it and every test trial is
/// held out. Otherwise the first `alignment.fraction` of the test-robot
/// trials (at least one) form the alignment split.
pub fn align(cfg: &PipelineConfig, io: &AlignInputs) -> Result<AlignmentSummary> {
    let a = &cfg.alignment;
    let train = load(cfg, io.train)?;
    let test = load(cfg, io.test)?;
    let train_samples = samples(&train)?;
    let (fit_src, fit_dst, holdout) = match io.common {
        Some((c_train, c_test)) => (samples(&load(cfg, c_test)?)?, samples(&load(cfg, c_train)?)?, test),
        None => {
            let n_fit = ((a.fraction * test.len() as f64).ceil() as usize).clamp(1, test.len());
            let mut rest = test;
            let fit_part: Vec<Trial> = rest.drain(..n_fit).collect();
            (samples(&fit_part)?, train_samples.clone(), rest)
        }
    };
    let pairs = build_alignment_set(&fit_dst, &fit_src, a.k, a.eps).context(|| "building the alignment split".into())?;
    let holdout_pairs = if holdout.is_empty() {
        Vec::new()
    } else {
        build_alignment_set(&train_samples, &samples(&holdout)?, a.k, a.eps).unwrap_or_default()
    };
    let chosen = fit(&a.kind, &pairs, cfg)?;
    let mut kinds = vec!["none", "linear", "deep"];
    if !kinds.contains(&a.kind.as_str()) {
        kinds.push(a.kind.as_str());
    }
    let mut rows = Vec::new();
    for kind in kinds {
        let g = if kind == a.kind { chosen.clone() } else { fit(kind, &pairs, cfg)? };
        let rms_fit = residual_rms(&g, &pairs);
        if !rms_fit.is_finite() {
            return Err(CliError::Numerical(format!("{kind} alignment produced a non-finite residual")));
        }
        rows.push(AlignmentRow {
            kind: kind.into(),
            rms_fit,
            rms_holdout: (!holdout_pairs.is_empty()).then(|| residual_rms(&g, &holdout_pairs)),
            matrix: g.matrix(),
        });
    }
    create_dir(io.out)?;
    outputs::write_transform(&io.out.join("transform.json"), &chosen)?;
    let summary = AlignmentSummary {
        chosen: a.kind.clone(),
        fit_pairs: pairs.len(),
        holdout_pairs: holdout_pairs.len(),
        rms_before: residual_rms(&AlignmentTransform::Identity, &pairs),
        rms_after: residual_rms(&chosen, &pairs),
        rows,
    };
    outputs::write_alignment_report(&io.out.join("alignment_report.json"), &summary)?;
    if let Some(dir) = io.apply_out {
        let aligned: Vec<Trial> = holdout.iter().map(|t| apply_alignment(&chosen, t)).collect();
        write_trials(dir, &aligned)?;
    }
    println!(
        "{} alignment on {} pairs: rms {:.4} -> {:.4} uT",
        summary.chosen, summary.fit_pairs, summary.rms_before, summary.rms_after
    );
    Ok(summary)
}
