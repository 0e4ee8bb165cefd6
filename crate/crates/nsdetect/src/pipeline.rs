//! Orchestration: patient-level cross-validation, the config-driven
//! experiment grid (sensitivity target, lambda, student iterations and
//! labeled-fraction sweeps), artifact persistence and summary tables.

pub mod config;
pub mod io;

pub use config::{
    CorpusSource, CvConfig, DetectorConfig, ExperimentConfig, SweepConfig, TuningTarget,
};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cropnet::CropNetModel;
use crate::error::{Error, Result};
use crate::froc::{
    afp_at_sensitivity, default_sensitivity_grid, evaluate_model, mean_curve, FrocCurve,
};
use crate::logdet::{detect_candidates, tune_detector, Candidate};
use crate::noise::{derive_seed, seeded_rng};
use crate::nstrain::{
    build_sample_pools, calibrate_threshold, pseudo_label, train_student, train_teacher,
    CalibrationResult, RoiSource, SamplePools, StepLog, TrainConfig, NEG_EXCLUSION_MM,
};
use crate::phantom::{generate_corpus, Corpus};
use crate::volgrid::{normalize_intensity, resample_isotropic, Annotation, Volume};

/// Partitions patients (not exams) into `folds` groups as evenly as
/// possible, deterministically under the seed.
pub fn split_cv(patient_ids: &[String], folds: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let unique: BTreeSet<&String> = patient_ids.iter().collect();
    if unique.len() < folds {
        return Err(Error::InvalidParameter(format!(
            "{} patients cannot fill {folds} folds",
            unique.len()
        )));
    }
    let mut ordered: Vec<String> = unique.into_iter().cloned().collect();
    let mut rng = seeded_rng(derive_seed(seed, 0xcf));
    ordered.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (i, p) in ordered.into_iter().enumerate() {
        out[i % folds].push(p);
    }
    Ok(out)
}

/// Keeps `ceil(fraction * n)` whole patients, deterministically.
pub fn subset_patients(patients: &[String], fraction: f64, seed: u64) -> Vec<String> {
    let mut ordered: Vec<String> = patients.to_vec();
    ordered.sort();
    let keep = ((fraction * ordered.len() as f64).ceil() as usize).clamp(1, ordered.len());
    let mut rng = seeded_rng(derive_seed(seed, 0xf8ac));
    ordered.shuffle(&mut rng);
    ordered.truncate(keep);
    ordered.sort();
    ordered
}

/// Corpus with every volume normalized and resampled to 1 mm isotropic.
pub struct PreparedCorpus {
    pub labeled: Vec<(Volume, Annotation)>,
    pub unlabeled: Vec<Volume>,
}

pub fn prepare_corpus(corpus: Corpus) -> Result<PreparedCorpus> {
    let labeled: Vec<(Volume, Annotation)> = corpus
        .labeled
        .into_par_iter()
        .map(|exam| {
            let v = resample_isotropic(&normalize_intensity(&exam.volume)?, 1.0)?;
            exam.annotation.validate(&v)?;
            Ok((v, exam.annotation))
        })
        .collect::<Result<_>>()?;
    let unlabeled: Vec<Volume> = corpus
        .unlabeled
        .into_par_iter()
        .map(|v| resample_isotropic(&normalize_intensity(&v)?, 1.0))
        .collect::<Result<_>>()?;
    Ok(PreparedCorpus { labeled, unlabeled })
}

fn load_or_generate_corpus(source: &CorpusSource, seed: u64) -> Result<Corpus> {
    match source {
        CorpusSource::Phantom {
            spec,
            labeled_patients,
            unlabeled_patients,
            exams_per_patient,
        } => {
            let mut rng = seeded_rng(derive_seed(seed, 0xc0));
            generate_corpus(
                spec,
                *labeled_patients,
                *unlabeled_patients,
                exams_per_patient,
                &mut rng,
            )
        }
        CorpusSource::Directory { path } => io::load_corpus_dir(path),
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ts: f64,
    pub lambda: f64,
    pub student_iterations: usize,
    pub labeled_fraction: f64,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        format!(
            "ts{:.2}_lam{:.2}_it{}_frac{:.2}",
            self.ts, self.lambda, self.student_iterations, self.labeled_fraction
        )
    }
}

fn sweep_grid(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let one = |v: &Vec<f64>, def: f64| if v.is_empty() { vec![def] } else { v.clone() };
    let ts = one(&cfg.sweep.ts, cfg.train.target_sensitivity);
    let lambda = one(&cfg.sweep.lambda, cfg.train.lambda);
    let iters = if cfg.sweep.student_iterations.is_empty() {
        vec![cfg.train.student_iterations]
    } else {
        cfg.sweep.student_iterations.clone()
    };
    let fracs = one(&cfg.sweep.labeled_fraction, 1.0);
    let mut grid = Vec::new();
    for &labeled_fraction in &fracs {
        for &t in &ts {
            for &l in &lambda {
                for &it in &iters {
                    grid.push(SweepPoint {
                        ts: t,
                        lambda: l,
                        student_iterations: it,
                        labeled_fraction,
                    });
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageArtifacts {
    pub stage: String,
    pub checkpoint: String,
    pub froc_csv: String,
    pub loss_csv: String,
    pub calibration: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub detector: String,
    pub train_exams: usize,
    pub test_exams: usize,
    pub stages: Vec<StageArtifacts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPointReport {
    pub point: SweepPoint,
    pub label: String,
    pub folds: Vec<FoldReport>,
    /// Mean-curve CSV per stage name.
    pub mean_curves: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_label: String,
    pub stage: String,
    pub sensitivity: f64,
    /// Mean-over-folds AFP; absent when the sensitivity is unattainable in
    /// some fold.
    pub afp: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFailure {
    pub sweep_label: String,
    pub fold: Option<usize>,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub sweep_points: Vec<SweepPointReport>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<StageFailure>,
    pub summary_csv: String,
    pub summary_long_csv: String,
}

/// Per-(fold, fraction) shared work: the tuned detector, candidates for
/// every exam, and the trained teacher. Sweep points over ts/lambda/
/// iterations reuse these.
struct FoldBase {
    fold: usize,
    fraction_idx: usize,
    detector_json: serde_json::Value,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
    candidates: HashMap<String, Vec<Candidate>>,
    teacher: CropNetModel,
    teacher_logs: Vec<StepLog>,
    teacher_froc: FrocCurve,
}

struct StageResult {
    name: String,
    model: CropNetModel,
    logs: Vec<StepLog>,
    calibration: Option<CalibrationResult>,
    froc: FrocCurve,
}

/// Runs the full experiment: for each fold and sweep point, tunes the
/// detector on the training bin, trains the teacher, calibrates and
/// pseudo-labels, trains the student chain, and evaluates every stage on
/// the test bin. Artifacts are written as they are produced; stage failures
/// are recorded in the manifest and do not abort other points.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;

    let corpus = load_or_generate_corpus(&cfg.corpus, cfg.train.seed)?;
    let prepared = prepare_corpus(corpus)?;

    let patient_of = |v: &Volume| v.patient_id.clone();
    let labeled_patients: Vec<String> =
        prepared.labeled.iter().map(|(v, _)| patient_of(v)).collect();
    let folds = split_cv(&labeled_patients, cfg.cv.folds, cfg.cv.split_seed)?;

    let grid = sweep_grid(cfg);
    let fractions: Vec<f64> = {
        let mut f: Vec<f64> = grid.iter().map(|p| p.labeled_fraction).collect();
        f.dedup_by(|a, b| a == b);
        let mut seen = Vec::new();
        for x in f {
            if !seen.contains(&x) {
                seen.push(x);
            }
        }
        seen
    };

    // Phase 1: per (fold, fraction): tune, detect, train + evaluate teacher.
    let mut base_jobs = Vec::new();
    for fold in 0..cfg.cv.folds {
        for (fraction_idx, &fraction) in fractions.iter().enumerate() {
            base_jobs.push((fold, fraction_idx, fraction));
        }
    }
    let mut failures: Vec<StageFailure> = Vec::new();
    let base_results: Vec<(usize, usize, Result<FoldBase>)> = base_jobs
        .par_iter()
        .map(|&(fold, fraction_idx, fraction)| {
            let result = build_fold_base(cfg, &prepared, &folds, fold, fraction_idx, fraction);
            (fold, fraction_idx, result)
        })
        .collect();

    let mut bases: HashMap<(usize, usize), FoldBase> = HashMap::new();
    for (fold, fraction_idx, result) in base_results {
        match result {
            Ok(base) => {
                bases.insert((fold, fraction_idx), base);
            }
            Err(e) => failures.push(StageFailure {
                sweep_label: format!("fold{fold}_frac{fraction_idx}"),
                fold: Some(fold),
                stage: "fold-base".into(),
                message: e.to_string(),
            }),
        }
    }

    // Phase 2: per (sweep point, fold): student chain + evaluation.
    let mut point_jobs = Vec::new();
    for (pi, point) in grid.iter().enumerate() {
        let fraction_idx = fractions
            .iter()
            .position(|&f| f == point.labeled_fraction)
            .expect("fraction in axis");
        for fold in 0..cfg.cv.folds {
            point_jobs.push((pi, *point, fold, fraction_idx));
        }
    }
    #[allow(clippy::type_complexity)]
    let point_results: Vec<((usize, usize), Result<Vec<StageResult>>)> = point_jobs
        .par_iter()
        .map(|&(pi, point, fold, fraction_idx)| {
            let result = match bases.get(&(fold, fraction_idx)) {
                Some(base) => run_point_on_fold(cfg, &prepared, base, &point, pi),
                None => Err(Error::Stage {
                    stage: "fold-base".into(),
                    source: Box::new(Error::EmptyInput("fold base unavailable".into())),
                }),
            };
            ((pi, fold), result)
        })
        .collect();
    let mut stage_results: HashMap<(usize, usize), Vec<StageResult>> = HashMap::new();
    for ((pi, fold), result) in point_results {
        match result {
            Ok(stages) => {
                stage_results.insert((pi, fold), stages);
            }
            Err(e) => failures.push(StageFailure {
                sweep_label: grid[pi].label(),
                fold: Some(fold),
                stage: "student-chain".into(),
                message: e.to_string(),
            }),
        }
    }

    // Phase 3: persistence and aggregation, in deterministic order.
    let mut sweep_reports = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    for (pi, point) in grid.iter().enumerate() {
        let label = point.label();
        let point_dir = out_dir.join(&label);
        let fraction_idx = fractions
            .iter()
            .position(|&f| f == point.labeled_fraction)
            .expect("fraction in axis");

        let mut fold_reports = Vec::new();
        let mut curves_per_stage: Vec<(String, Vec<FrocCurve>)> = Vec::new();
        for fold in 0..cfg.cv.folds {
            let Some(base) = bases.get(&(fold, fraction_idx)) else {
                continue;
            };
            let Some(stages) = stage_results.get(&(pi, fold)) else {
                continue;
            };
            let fold_dir = point_dir.join(format!("fold{fold}"));
            fs::create_dir_all(&fold_dir)?;
            let detector_path = fold_dir.join("detector.json");
            fs::write(
                &detector_path,
                serde_json::to_vec_pretty(&base.detector_json)?,
            )?;

            let mut stage_artifacts = Vec::new();
            for stage in stages {
                let ckpt = fold_dir.join(format!("{}.ckpt", stage.name));
                io::save_checkpoint(&stage.model, &ckpt)?;
                let froc_path = fold_dir.join(format!("{}_froc.csv", stage.name));
                io::save_froc(&stage.froc, &froc_path)?;
                let loss_path = fold_dir.join(format!("{}_loss.csv", stage.name));
                save_loss_log(&stage.logs, &loss_path)?;
                let calibration = match &stage.calibration {
                    Some(cal) => {
                        let p = fold_dir.join(format!("{}_calibration.json", stage.name));
                        fs::write(&p, serde_json::to_vec_pretty(cal)?)?;
                        Some(rel(out_dir, &p))
                    }
                    None => None,
                };
                stage_artifacts.push(StageArtifacts {
                    stage: stage.name.clone(),
                    checkpoint: rel(out_dir, &ckpt),
                    froc_csv: rel(out_dir, &froc_path),
                    loss_csv: rel(out_dir, &loss_path),
                    calibration,
                });
                match curves_per_stage.iter_mut().find(|(n, _)| n == &stage.name) {
                    Some((_, curves)) => curves.push(stage.froc.clone()),
                    None => curves_per_stage.push((stage.name.clone(), vec![stage.froc.clone()])),
                }
            }
            fold_reports.push(FoldReport {
                fold,
                detector: rel(out_dir, &detector_path),
                train_exams: base.train_ids.len(),
                test_exams: base.test_ids.len(),
                stages: stage_artifacts,
            });
        }

        // Fold-mean curves and the summary numbers.
        let grid_sens = default_sensitivity_grid();
        let mut mean_paths = Vec::new();
        for (stage_name, curves) in &curves_per_stage {
            if curves.len() != cfg.cv.folds {
                // Incomplete folds: no mean curve for this stage.
                for &s in &cfg.eval_sensitivities {
                    summary.push(SummaryRow {
                        sweep_label: label.clone(),
                        stage: stage_name.clone(),
                        sensitivity: s,
                        afp: None,
                    });
                }
                continue;
            }
            let mean = mean_curve(curves, &grid_sens)?;
            let mean_path = point_dir.join(format!("mean_{stage_name}_froc.csv"));
            io::save_froc(&mean, &mean_path)?;
            mean_paths.push((stage_name.clone(), rel(out_dir, &mean_path)));
            for &s in &cfg.eval_sensitivities {
                let afp = curves
                    .iter()
                    .map(|c| afp_at_sensitivity(c, s))
                    .collect::<Result<Vec<f64>>>()
                    .ok()
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64);
                summary.push(SummaryRow {
                    sweep_label: label.clone(),
                    stage: stage_name.clone(),
                    sensitivity: s,
                    afp,
                });
            }
        }
        sweep_reports.push(SweepPointReport {
            point: *point,
            label,
            folds: fold_reports,
            mean_curves: mean_paths,
        });
    }

    // Summary CSVs.
    let summary_long_path = out_dir.join("summary_long.csv");
    save_summary_long(&summary, &grid, &summary_long_path)?;
    let summary_path = out_dir.join("summary.csv");
    save_summary_pivot(&summary, cfg, &summary_path)?;

    let manifest = RunManifest {
        format_version: 1,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        sweep_points: sweep_reports,
        summary,
        failures,
        summary_csv: rel(out_dir, &summary_path),
        summary_long_csv: rel(out_dir, &summary_long_path),
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .to_string_lossy()
        .into_owned()
}

fn build_fold_base(
    cfg: &ExperimentConfig,
    prepared: &PreparedCorpus,
    folds: &[Vec<String>],
    fold: usize,
    fraction_idx: usize,
    fraction: f64,
) -> Result<FoldBase> {
    let test_patients: BTreeSet<&String> = folds[fold].iter().collect();
    let mut train_patients: Vec<String> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != fold)
        .flat_map(|(_, f)| f.iter().cloned())
        .collect();
    train_patients.sort();
    let kept: BTreeSet<String> = subset_patients(
        &train_patients,
        fraction,
        derive_seed(cfg.cv.split_seed, 0xf00d + fold as u64),
    )
    .into_iter()
    .collect();

    let train_bin: Vec<(&Volume, &Annotation)> = prepared
        .labeled
        .iter()
        .filter(|(v, _)| kept.contains(&v.patient_id))
        .map(|(v, a)| (v, a))
        .collect();
    let test_bin: Vec<(&Volume, &Annotation)> = prepared
        .labeled
        .iter()
        .filter(|(v, _)| test_patients.contains(&v.patient_id))
        .map(|(v, a)| (v, a))
        .collect();
    if train_bin.is_empty() || test_bin.is_empty() {
        return Err(Error::EmptyInput(format!(
            "fold {fold}: empty train or test bin"
        )));
    }

    // Stage: detector (tuned on the training bin only).
    let (detector, detector_json) = match &cfg.detector.tuning {
        Some(t) => {
            let report = tune_detector(&train_bin, &cfg.detector.base, t.target_capture, t.budget)
                .map_err(|e| Error::Stage {
                    stage: "tune-detector".into(),
                    source: Box::new(e),
                })?;
            let json = serde_json::to_value(&report)?;
            (report.params, json)
        }
        None => (
            cfg.detector.base.clone(),
            serde_json::to_value(&cfg.detector.base)?,
        ),
    };

    // Stage: candidates for every exam this fold touches.
    let mut all_exams: Vec<&Volume> = train_bin.iter().map(|(v, _)| *v).collect();
    all_exams.extend(test_bin.iter().map(|(v, _)| *v));
    all_exams.extend(prepared.unlabeled.iter());
    let candidate_lists: Vec<(String, Vec<Candidate>)> = all_exams
        .par_iter()
        .map(|v| {
            detect_candidates(v, &detector).map(|c| (v.exam_id.clone(), c))
        })
        .collect::<Result<_>>()
        .map_err(|e| Error::Stage {
            stage: "detect".into(),
            source: Box::new(e),
        })?;
    let candidates: HashMap<String, Vec<Candidate>> = candidate_lists.into_iter().collect();

    // Stage: teacher.
    let annotations: Vec<&Annotation> = train_bin.iter().map(|(_, a)| *a).collect();
    let pools = build_sample_pools(&annotations, &candidates, NEG_EXCLUSION_MM);
    let source_volumes = train_bin
        .iter()
        .map(|(v, _)| *v)
        .chain(prepared.unlabeled.iter());
    let source = RoiSource::new(source_volumes, cfg.teacher.input_edge_mm as f64);
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.train.seed, 0x7e00 + (fold as u64) * 31 + fraction_idx as u64),
        ..cfg.train.clone()
    };
    let (teacher, teacher_logs) =
        train_teacher(&cfg.teacher, &pools, &source, &train_cfg, &cfg.noise).map_err(|e| {
            Error::Stage {
                stage: "train-teacher".into(),
                source: Box::new(e),
            }
        })?;
    let teacher_froc =
        evaluate_model(&teacher, &test_bin, &candidates).map_err(|e| Error::Stage {
            stage: "evaluate-teacher".into(),
            source: Box::new(e),
        })?;

    Ok(FoldBase {
        fold,
        fraction_idx,
        detector_json,
        train_ids: train_bin.iter().map(|(v, _)| v.exam_id.clone()).collect(),
        test_ids: test_bin.iter().map(|(v, _)| v.exam_id.clone()).collect(),
        candidates,
        teacher,
        teacher_logs,
        teacher_froc,
    })
}

/// Runs the student chain of one sweep point on one fold, reusing the
/// fold's tuned detector, candidates and teacher.
fn run_point_on_fold(
    cfg: &ExperimentConfig,
    prepared: &PreparedCorpus,
    base: &FoldBase,
    point: &SweepPoint,
    point_idx: usize,
) -> Result<Vec<StageResult>> {
    let train_ids: BTreeSet<&String> = base.train_ids.iter().collect();
    let test_ids: BTreeSet<&String> = base.test_ids.iter().collect();
    let train_bin: Vec<(&Volume, &Annotation)> = prepared
        .labeled
        .iter()
        .filter(|(v, _)| train_ids.contains(&v.exam_id))
        .map(|(v, a)| (v, a))
        .collect();
    let test_bin: Vec<(&Volume, &Annotation)> = prepared
        .labeled
        .iter()
        .filter(|(v, _)| test_ids.contains(&v.exam_id))
        .map(|(v, a)| (v, a))
        .collect();
    let unlabeled: Vec<&Volume> = prepared.unlabeled.iter().collect();

    let mut stages = vec![StageResult {
        name: "teacher".into(),
        model: base.teacher.clone(),
        logs: base.teacher_logs.clone(),
        calibration: None,
        froc: base.teacher_froc.clone(),
    }];

    let annotations: Vec<&Annotation> = train_bin.iter().map(|(_, a)| *a).collect();
    let labeled_pools = build_sample_pools(&annotations, &base.candidates, NEG_EXCLUSION_MM);
    let source_volumes = train_bin
        .iter()
        .map(|(v, _)| *v)
        .chain(unlabeled.iter().copied());
    let source = RoiSource::new(source_volumes, cfg.student.input_edge_mm as f64);

    for iteration in 1..=point.student_iterations {
        let current = &stages.last().expect("non-empty").model;
        let calibration = calibrate_threshold(current, &train_bin, &base.candidates, point.ts)
            .map_err(|e| Error::Stage {
                stage: format!("calibrate-stage{iteration}"),
                source: Box::new(e),
            })?;
        let pseudo = pseudo_label(current, &unlabeled, &base.candidates, calibration.mu)
            .map_err(|e| Error::Stage {
                stage: format!("pseudo-label-stage{iteration}"),
                source: Box::new(e),
            })?;
        let pools: SamplePools = labeled_pools.clone().with_pseudo_from(pseudo);
        let train_cfg = TrainConfig {
            lambda: point.lambda,
            target_sensitivity: point.ts,
            seed: derive_seed(
                cfg.train.seed,
                0x5700
                    + (base.fold as u64)
                    + 31 * base.fraction_idx as u64
                    + 997 * point_idx as u64,
            ),
            ..cfg.train.clone()
        };
        let (student, logs) = train_student(
            &cfg.student,
            &pools,
            &source,
            &train_cfg,
            &cfg.noise,
            iteration,
        )
        .map_err(|e| Error::Stage {
            stage: format!("train-student{iteration}"),
            source: Box::new(e),
        })?;
        let froc = evaluate_model(&student, &test_bin, &base.candidates).map_err(|e| {
            Error::Stage {
                stage: format!("evaluate-student{iteration}"),
                source: Box::new(e),
            }
        })?;
        stages.push(StageResult {
            name: format!("student{iteration}"),
            model: student,
            logs,
            calibration: Some(calibration),
            froc,
        });
    }
    Ok(stages)
}

fn save_loss_log(logs: &[StepLog], path: &Path) -> Result<()> {
    let mut out = String::from("step,labeled_loss,pseudo_loss,total\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            l.step, l.labeled_loss, l.pseudo_loss, l.total_loss
        );
    }
    fs::write(path, out)?;
    Ok(())
}

fn save_summary_long(rows: &[SummaryRow], grid: &[SweepPoint], path: &Path) -> Result<()> {
    let by_label: HashMap<String, &SweepPoint> =
        grid.iter().map(|p| (p.label(), p)).collect();
    let mut out =
        String::from("sweep,ts,lambda,student_iterations,labeled_fraction,stage,sensitivity,afp\n");
    for r in rows {
        let p = by_label.get(&r.sweep_label).expect("known label");
        let afp = match r.afp {
            Some(v) => v.to_string(),
            None => "unattainable".to_string(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.sweep_label,
            p.ts,
            p.lambda,
            p.student_iterations,
            p.labeled_fraction,
            r.stage,
            r.sensitivity,
            afp
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pivot summary mirroring the report tables: one row per evaluation
/// sensitivity, one column per (sweep point, model variant).
fn save_summary_pivot(rows: &[SummaryRow], cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut columns: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.sweep_label.clone(), r.stage.clone());
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    let mut out = String::from("sensitivity");
    for (label, stage) in &columns {
        let _ = write!(out, ",{label}:{stage}");
    }
    out.push('\n');
    for &s in &cfg.eval_sensitivities {
        let _ = write!(out, "{s}");
        for (label, stage) in &columns {
            let cell = rows
                .iter()
                .find(|r| {
                    &r.sweep_label == label && &r.stage == stage && r.sensitivity == s
                })
                .and_then(|r| r.afp);
            match cell {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push_str(",unattainable"),
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Emits a simple SVG of AFP (x) versus sensitivity (y) for one or more
/// curves.
pub fn plot_froc_svg(curves: &[(String, FrocCurve)], path: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::EmptyInput("no curves to plot".into()));
    }
    let (w, h, ml, mb) = (640.0, 480.0, 60.0, 50.0);
    let max_afp = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter())
        .filter(|p| p.threshold.is_finite() || p.afp > 0.0)
        .map(|p| p.afp)
        .fold(1.0f64, f64::max);
    let x = |afp: f64| ml + (afp / max_afp) * (w - ml - 20.0);
    let y = |sens: f64| (h - mb) - sens * (h - mb - 20.0);

    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{ml}" y1="20" x2="{ml}" y2="{}" stroke="black"/>
<text x="{}" y="{}" font-size="14" text-anchor="middle">false positives per exam</text>
<text x="18" y="{}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {})">sensitivity</text>
"#,
        h - mb,
        w - 20.0,
        h - mb,
        h - mb,
        (w + ml) / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0,
    );
    for i in 0..=5 {
        let sens = i as f64 / 5.0;
        let afp = max_afp * i as f64 / 5.0;
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.1}</text>
<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{:.1}</text>
"#,
            ml - 6.0,
            y(sens) + 4.0,
            sens,
            x(afp),
            h - mb + 16.0,
            afp,
        );
    }
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = palette[i % palette.len()];
        let mut d = String::new();
        let mut first = true;
        for p in curve.points.iter().rev() {
            if !p.afp.is_finite() || !p.sensitivity.is_finite() {
                continue;
            }
            let _ = write!(
                d,
                "{}{:.2},{:.2} ",
                if first { "M" } else { "L" },
                x(p.afp),
                y(p.sensitivity)
            );
            first = false;
        }
        let _ = write!(
            svg,
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.8"/>
<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{label}</text>
"#,
            ml + 12.0,
            34.0 + i as f64 * 16.0,
        );
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_cv_is_even_and_patient_exclusive() {
        let patients: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let folds = split_cv(&patients, 2, 7).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].len(), 5);
        assert_eq!(folds[1].len(), 5);
        let all: BTreeSet<&String> = folds.iter().flatten().collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn split_cv_keeps_multi_exam_patients_whole() {
        // Three exams of one patient all land in a single fold: the split is
        // over unique patient ids.
        let patients = vec![
            "a".to_string(),
            "a".to_string(),
            "a".to_string(),
            "b".to_string(),
            "c".to_string(),
            "d".to_string(),
        ];
        let folds = split_cv(&patients, 2, 1).unwrap();
        let in_fold0 = folds[0].contains(&"a".to_string());
        let in_fold1 = folds[1].contains(&"a".to_string());
        assert!(in_fold0 ^ in_fold1);
        assert_eq!(folds[0].len() + folds[1].len(), 4);
    }

    #[test]
    fn split_cv_seed_changes_permutation_not_sizes() {
        let patients: Vec<String> = (0..11).map(|i| format!("p{i}")).collect();
        let a = split_cv(&patients, 2, 1).unwrap();
        let b = split_cv(&patients, 2, 2).unwrap();
        let sizes = |f: &Vec<Vec<String>>| {
            let mut s: Vec<usize> = f.iter().map(|x| x.len()).collect();
            s.sort();
            s
        };
        assert_eq!(sizes(&a), vec![5, 6]);
        assert_eq!(sizes(&a), sizes(&b));
        assert_ne!(a, b, "different seeds should permute differently");
        assert_eq!(a, split_cv(&patients, 2, 1).unwrap());
    }

    #[test]
    fn split_cv_rejects_too_few_patients() {
        let patients = vec!["a".to_string()];
        assert!(split_cv(&patients, 2, 0).is_err());
    }

    #[test]
    fn subset_keeps_whole_patients_with_ceil() {
        let patients: Vec<String> = (0..79).map(|i| format!("p{i:03}")).collect();
        let kept75 = subset_patients(&patients, 0.75, 3);
        assert_eq!(kept75.len(), 60);
        let kept50 = subset_patients(&patients, 0.5, 3);
        assert_eq!(kept50.len(), 40);
        // Nested determinism: same seed, same subset.
        assert_eq!(kept50, subset_patients(&patients, 0.5, 3));
        // Subsets contain only known patients.
        let all: BTreeSet<&String> = patients.iter().collect();
        assert!(kept75.iter().all(|p| all.contains(p)));
    }

    #[test]
    fn sweep_grid_defaults_to_single_point() {
        let cfg = ExperimentConfig::default();
        let grid = sweep_grid(&cfg);
        assert_eq!(grid.len(), 1);
        assert_eq!(grid[0].ts, cfg.train.target_sensitivity);
        assert_eq!(grid[0].lambda, cfg.train.lambda);
        assert_eq!(grid[0].labeled_fraction, 1.0);
    }

    #[test]
    fn sweep_grid_is_cartesian() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.ts = vec![0.8, 0.85, 0.9];
        cfg.sweep.labeled_fraction = vec![1.0, 0.75];
        let grid = sweep_grid(&cfg);
        assert_eq!(grid.len(), 6);
        let labels: BTreeSet<String> = grid.iter().map(|p| p.label()).collect();
        assert_eq!(labels.len(), 6, "labels must be unique");
    }

    #[test]
    fn plot_writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let curve = FrocCurve {
            points: vec![
                crate::froc::FrocPoint {
                    threshold: f64::INFINITY,
                    sensitivity: 0.0,
                    afp: 0.0,
                },
                crate::froc::FrocPoint {
                    threshold: 0.5,
                    sensitivity: 0.8,
                    afp: 3.0,
                },
            ],
        };
        let path = dir.path().join("froc.svg");
        plot_froc_svg(&[("teacher".into(), curve)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("sensitivity"));
    }
}
