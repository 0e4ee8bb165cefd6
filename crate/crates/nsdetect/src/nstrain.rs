//! The training engine: sample pools, paired batch sampling, teacher
//! training on labeled ROIs, sensitivity-calibrated response thresholding,
//! pseudo-labeling of unlabeled candidates, lambda-weighted student training,
//! and the iterative teacher/student loop.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::cropnet::{
    adam_step, backward, build_cropnet, forward_eval, CropNetConfig, CropNetModel, OptState,
};
use crate::error::{Error, Result};
use crate::froc::MATCH_RADIUS_MM;
use crate::logdet::{dist2, Candidate};
use crate::noise::{derive_seed, fork_rng, noise_pipeline, seeded_rng, NoiseConfig, Rng};
use crate::volgrid::{extract_roi, Annotation, Roi, Volume};

/// A reference to one trainable ROI: the source exam and world-space center.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRef {
    pub exam_id: String,
    pub center_mm: [f64; 3],
}

/// Indexed positive/negative (and pseudo-positive/pseudo-negative) ROI
/// references. Pseudo pools come only from unlabeled exams.
#[derive(Debug, Clone, Default)]
pub struct SamplePools {
    pub pos: Vec<SampleRef>,
    pub neg: Vec<SampleRef>,
    pub pseudo_pos: Vec<SampleRef>,
    pub pseudo_neg: Vec<SampleRef>,
}

impl SamplePools {
    /// Moves the pseudo pools of `other` into `self`.
    pub fn with_pseudo_from(mut self, other: SamplePools) -> Self {
        self.pseudo_pos = other.pseudo_pos;
        self.pseudo_neg = other.pseudo_neg;
        self
    }
}

/// Exact per-pool batch counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub pos: usize,
    pub neg: usize,
    pub pseudo_pos: usize,
    pub pseudo_neg: usize,
}

impl BatchComposition {
    pub fn labeled(pos: usize, neg: usize) -> Self {
        Self {
            pos,
            neg,
            pseudo_pos: 0,
            pseudo_neg: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.pos + self.neg + self.pseudo_pos + self.pseudo_neg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Batch-training iterations, without early stopping.
    pub iterations: usize,
    pub teacher_batch: BatchComposition,
    pub student_batch: BatchComposition,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the pseudo-labeled half of the student loss.
    pub lambda: f64,
    /// Teacher sensitivity target used to calibrate the pseudo-label
    /// threshold.
    pub target_sensitivity: f64,
    pub student_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 12_000,
            teacher_batch: BatchComposition::labeled(150, 150),
            student_batch: BatchComposition {
                pos: 75,
                neg: 75,
                pseudo_pos: 75,
                pseudo_neg: 75,
            },
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: 1.0,
            target_sensitivity: 0.90,
            student_iterations: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.student_iterations == 0 {
            return Err(Error::InvalidParameter(
                "iteration counts must be positive".into(),
            ));
        }
        if self.teacher_batch.pos == 0 || self.teacher_batch.neg == 0 {
            return Err(Error::InvalidParameter(
                "teacher batch halves must be positive".into(),
            ));
        }
        if self.student_batch.pos == 0 || self.student_batch.neg == 0 {
            return Err(Error::InvalidParameter(
                "student labeled batch halves must be positive".into(),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(0.0 < self.target_sensitivity && self.target_sensitivity <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "target sensitivity {} outside (0, 1]",
                self.target_sensitivity
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidParameter("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// ROI extraction over a set of prepared (normalized, isotropic) volumes.
pub struct RoiSource<'a> {
    volumes: HashMap<&'a str, &'a Volume>,
    edge_mm: f64,
}

impl<'a> RoiSource<'a> {
    pub fn new(volumes: impl IntoIterator<Item = &'a Volume>, edge_mm: f64) -> Self {
        Self {
            volumes: volumes
                .into_iter()
                .map(|v| (v.exam_id.as_str(), v))
                .collect(),
            edge_mm,
        }
    }

    pub fn extract(&self, sample: &SampleRef) -> Result<Roi> {
        let v = self.volumes.get(sample.exam_id.as_str()).ok_or_else(|| {
            Error::InvalidParameter(format!("unknown exam `{}`", sample.exam_id))
        })?;
        Ok(extract_roi(v, sample.center_mm, self.edge_mm))
    }
}

/// Builds labeled pools: positives are the annotated lesion centers,
/// negatives are candidates farther than the exclusion radius from every
/// lesion center of their exam. Pseudo pools start empty.
pub fn build_sample_pools(
    annotations: &[&Annotation],
    candidates: &HashMap<String, Vec<Candidate>>,
    neg_exclusion_mm: f64,
) -> SamplePools {
    static NO_CANDS: Vec<Candidate> = Vec::new();
    let excl2 = neg_exclusion_mm * neg_exclusion_mm;
    let mut pools = SamplePools::default();
    for ann in annotations {
        for lesion in &ann.lesions {
            pools.pos.push(SampleRef {
                exam_id: ann.exam_id.clone(),
                center_mm: lesion.center_mm,
            });
        }
        let cands = candidates.get(&ann.exam_id).unwrap_or(&NO_CANDS);
        for c in cands {
            let near_lesion = ann
                .lesions
                .iter()
                .any(|l| dist2(c.pos_mm, l.center_mm) <= excl2);
            if !near_lesion {
                pools.neg.push(SampleRef {
                    exam_id: ann.exam_id.clone(),
                    center_mm: c.pos_mm,
                });
            }
        }
    }
    pools
}

/// One batch element: the ROI reference, its binary label, and whether it
/// came from a labeled or pseudo-labeled pool.
#[derive(Debug, Clone)]
pub struct BatchEntry {
    pub sample: SampleRef,
    pub label: u8,
    pub pseudo: bool,
}

/// Uniform with-replacement sampling with exact per-pool counts, in pool
/// order (pos, neg, pseudo_pos, pseudo_neg). Requesting from an empty pool
/// is an error naming the pool.
pub fn sample_paired_batch(
    pools: &SamplePools,
    comp: &BatchComposition,
    rng: &mut Rng,
) -> Result<Vec<BatchEntry>> {
    let mut out = Vec::with_capacity(comp.total());
    let mut draw = |pool: &[SampleRef],
                    count: usize,
                    name: &'static str,
                    label: u8,
                    pseudo: bool,
                    rng: &mut Rng|
     -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        if pool.is_empty() {
            return Err(Error::EmptyPool {
                pool: name,
                requested: count,
            });
        }
        for _ in 0..count {
            let idx = rng.gen_range(0..pool.len());
            out.push(BatchEntry {
                sample: pool[idx].clone(),
                label,
                pseudo,
            });
        }
        Ok(())
    };
    draw(&pools.pos, comp.pos, "pos", 1, false, rng)?;
    draw(&pools.neg, comp.neg, "neg", 0, false, rng)?;
    draw(&pools.pseudo_pos, comp.pseudo_pos, "pseudo_pos", 1, true, rng)?;
    draw(&pools.pseudo_neg, comp.pseudo_neg, "pseudo_neg", 0, true, rng)?;
    Ok(out)
}

/// Extracts and noises the batch ROIs, one forked rng per sample so the
/// result is deterministic regardless of scheduling.
pub fn noised_batch_rois(
    entries: &[BatchEntry],
    source: &RoiSource,
    noise_cfg: &NoiseConfig,
    rng: &mut Rng,
) -> Result<Vec<Roi>> {
    let mut sample_rngs = Vec::with_capacity(entries.len());
    for _ in 0..entries.len() {
        sample_rngs.push(fork_rng(rng));
    }
    entries
        .par_iter()
        .zip(sample_rngs.into_par_iter())
        .map(|(entry, mut srng)| {
            let roi = source.extract(&entry.sample)?;
            Ok(noise_pipeline(&roi, noise_cfg, &mut srng))
        })
        .collect()
}

/// Per-step loss record: the labeled and pseudo-labeled halves and the
/// lambda-weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub labeled_loss: f64,
    pub pseudo_loss: f64,
    pub total_loss: f64,
}

/// Per-sample loss weights for one batch: labeled samples are averaged over
/// the labeled count, pseudo samples over the pseudo count scaled by lambda.
pub fn batch_weights(entries: &[BatchEntry], lambda: f64) -> Vec<f32> {
    let n_labeled = entries.iter().filter(|e| !e.pseudo).count();
    let n_pseudo = entries.len() - n_labeled;
    entries
        .iter()
        .map(|e| {
            if e.pseudo {
                (lambda / n_pseudo as f64) as f32
            } else {
                (1.0 / n_labeled as f64) as f32
            }
        })
        .collect()
}

struct TrainOutcome {
    model: CropNetModel,
    logs: Vec<StepLog>,
}

/// Shared training loop: paired batches, per-sample noising, weighted
/// backprop, Adam. Deterministic under the seed.
fn train_loop(
    arch: &CropNetConfig,
    pools: &SamplePools,
    comp: &BatchComposition,
    source: &RoiSource,
    cfg: &TrainConfig,
    noise_cfg: &NoiseConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    noise_cfg.validate()?;
    let mut master = seeded_rng(seed);
    let init_seed: u64 = master.gen();
    let mut model = build_cropnet::<f32>(arch, init_seed)?;
    let mut opt = OptState::new(&model, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);

    let mut logs = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let entries = sample_paired_batch(pools, comp, &mut master)?;
        let mut noise_rng = fork_rng(&mut master);
        let rois = noised_batch_rois(&entries, source, noise_cfg, &mut noise_rng)?;
        let roi_refs: Vec<&Roi> = rois.iter().collect();
        let labels: Vec<u8> = entries.iter().map(|e| e.label).collect();
        let weights = batch_weights(&entries, cfg.lambda);

        let mut step_rng = fork_rng(&mut master);
        let out = backward(&model, &roi_refs, &labels, &weights, true, &mut step_rng)?;
        adam_step(&mut model, &out.grads, &mut opt)?;

        logs.push(loss_log(step, &entries, &out.preds, cfg.lambda));
    }
    Ok(TrainOutcome { model, logs })
}

fn loss_log(step: usize, entries: &[BatchEntry], preds: &[f32], lambda: f64) -> StepLog {
    let mut labeled = (0.0f64, 0usize);
    let mut pseudo = (0.0f64, 0usize);
    for (e, &p) in entries.iter().zip(preds) {
        let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
        let term = if e.label == 1 { -p.ln() } else { -(1.0 - p).ln() };
        if e.pseudo {
            pseudo.0 += term;
            pseudo.1 += 1;
        } else {
            labeled.0 += term;
            labeled.1 += 1;
        }
    }
    let labeled_loss = labeled.0 / labeled.1.max(1) as f64;
    let pseudo_loss = pseudo.0 / pseudo.1.max(1) as f64;
    StepLog {
        step,
        labeled_loss,
        pseudo_loss,
        total_loss: labeled_loss + lambda * pseudo_loss,
    }
}

/// Trains the teacher on data-noised labeled ROIs with exactly balanced
/// batches, for the configured iteration count (no early stopping).
pub fn train_teacher(
    arch: &CropNetConfig,
    pools: &SamplePools,
    source: &RoiSource,
    cfg: &TrainConfig,
    noise_cfg: &NoiseConfig,
) -> Result<(CropNetModel, Vec<StepLog>)> {
    if pools.pos.is_empty() || pools.neg.is_empty() {
        return Err(Error::EmptyPool {
            pool: if pools.pos.is_empty() { "pos" } else { "neg" },
            requested: 1,
        });
    }
    let out = train_loop(
        arch,
        pools,
        &cfg.teacher_batch,
        source,
        cfg,
        noise_cfg,
        derive_seed(cfg.seed, 0x7eac),
    )?;
    Ok((out.model, out.logs))
}

/// Trains the student on labeled plus pseudo-labeled ROIs; the pseudo half
/// of the loss is weighted by lambda. With `lambda == 0` empty pseudo pools
/// are permitted and the objective reduces to the teacher objective.
pub fn train_student(
    arch: &CropNetConfig,
    pools: &SamplePools,
    source: &RoiSource,
    cfg: &TrainConfig,
    noise_cfg: &NoiseConfig,
    stage: usize,
) -> Result<(CropNetModel, Vec<StepLog>)> {
    if pools.pos.is_empty() || pools.neg.is_empty() {
        return Err(Error::EmptyPool {
            pool: if pools.pos.is_empty() { "pos" } else { "neg" },
            requested: 1,
        });
    }
    let mut comp = cfg.student_batch;
    let pseudo_missing = pools.pseudo_pos.is_empty() || pools.pseudo_neg.is_empty();
    if pseudo_missing {
        if cfg.lambda > 0.0 {
            return Err(Error::EmptyPool {
                pool: if pools.pseudo_pos.is_empty() {
                    "pseudo_pos"
                } else {
                    "pseudo_neg"
                },
                requested: comp.pseudo_pos.max(comp.pseudo_neg),
            });
        }
        comp.pseudo_pos = 0;
        comp.pseudo_neg = 0;
    }
    let out = train_loop(
        arch,
        pools,
        &comp,
        source,
        cfg,
        noise_cfg,
        derive_seed(cfg.seed, 0x57ed + stage as u64),
    )?;
    Ok((out.model, out.logs))
}

/// Eval-mode responses of a model on the candidates of one exam.
pub fn candidate_responses(
    model: &CropNetModel,
    volume: &Volume,
    candidates: &[Candidate],
) -> Result<Vec<f64>> {
    let edge = model.config.input_edge_mm as f64;
    let rois: Vec<Roi> = candidates
        .iter()
        .map(|c| extract_roi(volume, c.pos_mm, edge))
        .collect();
    let refs: Vec<&Roi> = rois.iter().collect();
    Ok(forward_eval(model, &refs)?
        .into_iter()
        .map(|p| p as f64)
        .collect())
}

/// Calibrated pseudo-label threshold and the sensitivities around it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub mu: f64,
    pub target_sensitivity: f64,
    pub achieved_sensitivity: f64,
    /// Max eval-mode response over the candidates within the match radius,
    /// per lesion; unreachable lesions carry -inf.
    pub per_lesion_max_response: Vec<f64>,
}

/// Pure calibration rule: sort per-lesion maxima descending, take
/// `k = ceil(ts * M)`, and put the threshold immediately below the k-th
/// response so exactly the top-k lesions (plus ties) pass `response > mu`.
pub fn calibrate_from_responses(
    per_lesion_max: Vec<f64>,
    target_sensitivity: f64,
) -> Result<CalibrationResult> {
    let total = per_lesion_max.len();
    if total == 0 {
        return Err(Error::EmptyInput("no lesions to calibrate against".into()));
    }
    if !(0.0 < target_sensitivity && target_sensitivity <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target sensitivity {target_sensitivity} outside (0, 1]"
        )));
    }
    let mut sorted = per_lesion_max.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("responses are not NaN"));
    if !sorted[0].is_finite() {
        return Err(Error::NoCapturableLesion);
    }
    let k = (target_sensitivity * total as f64).ceil() as usize;
    let kth = sorted[k.clamp(1, total) - 1];
    // If the target reaches into unreachable lesions, fall back to the
    // lowest capturable one.
    let mu = if kth.is_finite() {
        kth.next_down()
    } else {
        let lowest_finite = sorted
            .iter()
            .rev()
            .find(|r| r.is_finite())
            .copied()
            .expect("checked above");
        lowest_finite.next_down()
    };
    let achieved = per_lesion_max.iter().filter(|&&r| r > mu).count() as f64 / total as f64;
    Ok(CalibrationResult {
        mu,
        target_sensitivity,
        achieved_sensitivity: achieved,
        per_lesion_max_response: per_lesion_max,
    })
}

/// Learns the response threshold that attains the target lesion sensitivity
/// on the training exams, under the detection rule `response > mu` within
/// 1.5 mm of a lesion center.
pub fn calibrate_threshold(
    model: &CropNetModel,
    exams: &[(&Volume, &Annotation)],
    candidates: &HashMap<String, Vec<Candidate>>,
    target_sensitivity: f64,
) -> Result<CalibrationResult> {
    static NO_CANDS: Vec<Candidate> = Vec::new();
    let r2 = MATCH_RADIUS_MM * MATCH_RADIUS_MM;
    let per_exam: Vec<Vec<f64>> = exams
        .par_iter()
        .map(|(v, _)| {
            let cands = candidates.get(&v.exam_id).unwrap_or(&NO_CANDS);
            candidate_responses(model, v, cands)
        })
        .collect::<Result<_>>()?;

    let mut per_lesion = Vec::new();
    for ((v, ann), responses) in exams.iter().zip(&per_exam) {
        let cands = candidates.get(&v.exam_id).unwrap_or(&NO_CANDS);
        for lesion in &ann.lesions {
            let best = cands
                .iter()
                .zip(responses)
                .filter(|(c, _)| dist2(c.pos_mm, lesion.center_mm) <= r2)
                .map(|(_, &r)| r)
                .fold(f64::NEG_INFINITY, f64::max);
            per_lesion.push(best);
        }
    }
    calibrate_from_responses(per_lesion, target_sensitivity)
}

/// Hard pseudo-labels for unlabeled candidates: positive iff the teacher
/// response strictly exceeds mu. The pools partition the candidate set.
pub fn pseudo_label(
    model: &CropNetModel,
    unlabeled: &[&Volume],
    candidates: &HashMap<String, Vec<Candidate>>,
    mu: f64,
) -> Result<SamplePools> {
    static NO_CANDS: Vec<Candidate> = Vec::new();
    let per_exam: Vec<(usize, Vec<f64>)> = unlabeled
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let cands = candidates.get(&v.exam_id).unwrap_or(&NO_CANDS);
            Ok((i, candidate_responses(model, v, cands)?))
        })
        .collect::<Result<_>>()?;

    let mut pools = SamplePools::default();
    for (i, responses) in per_exam {
        let v = unlabeled[i];
        let cands = candidates.get(&v.exam_id).unwrap_or(&NO_CANDS);
        for (c, &r) in cands.iter().zip(&responses) {
            let sample = SampleRef {
                exam_id: v.exam_id.clone(),
                center_mm: c.pos_mm,
            };
            if r > mu {
                pools.pseudo_pos.push(sample);
            } else {
                pools.pseudo_neg.push(sample);
            }
        }
    }
    Ok(pools)
}

/// One stage of the noisy-student loop: the trained model, the calibration
/// that produced its pseudo-labels (absent for the initial teacher), and
/// the per-step loss log.
pub struct NsStage {
    pub model: CropNetModel,
    pub calibration: Option<CalibrationResult>,
    pub logs: Vec<StepLog>,
}

/// Inputs to the iterative loop: prepared labeled/unlabeled volumes and the
/// per-exam candidates for all of them.
pub struct TrainingData<'a> {
    pub labeled: Vec<(&'a Volume, &'a Annotation)>,
    pub unlabeled: Vec<&'a Volume>,
    pub candidates: &'a HashMap<String, Vec<Candidate>>,
}

/// Runs the full loop: stage 0 trains the teacher on labeled data; each
/// subsequent stage calibrates the current model, pseudo-labels the
/// unlabeled candidates, trains a student, and promotes it to teacher.
/// Returns all stages in order.
pub fn ns_iterate(
    data: &TrainingData,
    teacher_arch: &CropNetConfig,
    student_arch: &CropNetConfig,
    cfg: &TrainConfig,
    noise_cfg: &NoiseConfig,
) -> Result<Vec<NsStage>> {
    cfg.validate()?;
    let labeled_pools = build_sample_pools(
        &data.labeled.iter().map(|(_, a)| *a).collect::<Vec<_>>(),
        data.candidates,
        NEG_EXCLUSION_MM,
    );
    let all_volumes = data
        .labeled
        .iter()
        .map(|(v, _)| *v)
        .chain(data.unlabeled.iter().copied());
    let source = RoiSource::new(all_volumes, teacher_arch.input_edge_mm as f64);

    let (teacher, logs) = train_teacher(teacher_arch, &labeled_pools, &source, cfg, noise_cfg)?;
    let mut stages = vec![NsStage {
        model: teacher,
        calibration: None,
        logs,
    }];

    for iteration in 1..=cfg.student_iterations {
        let current = &stages.last().expect("non-empty").model;
        let calibration = calibrate_threshold(
            current,
            &data.labeled,
            data.candidates,
            cfg.target_sensitivity,
        )?;
        let pseudo = pseudo_label(current, &data.unlabeled, data.candidates, calibration.mu)?;
        let pools = labeled_pools.clone().with_pseudo_from(pseudo);
        let (student, logs) =
            train_student(student_arch, &pools, &source, cfg, noise_cfg, iteration)?;
        stages.push(NsStage {
            model: student,
            calibration: Some(calibration),
            logs,
        });
    }
    Ok(stages)
}

/// Default exclusion radius separating negatives from lesion centers;
/// deliberately above the 1.5 mm match radius so near-miss candidates do
/// not enter the negative pool.
pub const NEG_EXCLUSION_MM: f64 = 3.0;
