//! Experiment configuration: one JSON-serializable document drives corpus
//! sourcing, detector tuning, training, cross-validation and the sweep
//! grids.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::cropnet::CropNetConfig;
use crate::error::{Error, Result};
use crate::logdet::DetectorParams;
use crate::noise::NoiseConfig;
use crate::nstrain::{BatchComposition, TrainConfig};
use crate::phantom::{ExamCountDist, PhantomSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorpusSource {
    Phantom {
        spec: PhantomSpec,
        labeled_patients: usize,
        unlabeled_patients: usize,
        exams_per_patient: ExamCountDist,
    },
    Directory {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningTarget {
    pub target_capture: f64,
    pub budget: usize,
}

impl Default for TuningTarget {
    fn default() -> Self {
        Self {
            target_capture: 0.95,
            budget: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub base: DetectorParams,
    /// When present, the score threshold is tuned per fold on the training
    /// bin; otherwise `base.score_threshold` is used as-is.
    pub tuning: Option<TuningTarget>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            base: DetectorParams::default(),
            tuning: Some(TuningTarget::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub split_seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 2,
            split_seed: 0,
        }
    }
}

/// Sweep axes; an empty axis means "the single value from the train
/// config". The grid is the cartesian product of all four axes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ts: Vec<f64>,
    pub lambda: Vec<f64>,
    pub student_iterations: Vec<usize>,
    pub labeled_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub detector: DetectorConfig,
    pub noise: NoiseConfig,
    pub teacher: CropNetConfig,
    pub student: CropNetConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub sweep: SweepConfig,
    /// Sensitivities reported in the summary tables.
    pub eval_sensitivities: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::Phantom {
                spec: PhantomSpec::default(),
                labeled_patients: 20,
                unlabeled_patients: 80,
                exams_per_patient: ExamCountDist::fixed(1),
            },
            detector: DetectorConfig::default(),
            noise: NoiseConfig::default(),
            teacher: CropNetConfig::desk(2),
            student: CropNetConfig::desk(4),
            train: TrainConfig {
                iterations: 1500,
                teacher_batch: BatchComposition::labeled(8, 8),
                student_batch: BatchComposition {
                    pos: 4,
                    neg: 4,
                    pseudo_pos: 4,
                    pseudo_neg: 4,
                },
                lr: 2e-4,
                ..TrainConfig::default()
            },
            cv: CvConfig::default(),
            sweep: SweepConfig::default(),
            eval_sensitivities: vec![0.80, 0.85, 0.90],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.noise.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        if self.cv.folds < 2 {
            return Err(Error::InvalidParameter("cv.folds must be >= 2".into()));
        }
        for &f in &self.sweep.labeled_fraction {
            if !(0.0 < f && f <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "labeled fraction {f} outside (0, 1]"
                )));
            }
        }
        for &s in &self.eval_sensitivities {
            if !(0.0 < s && s <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "eval sensitivity {s} outside (0, 1]"
                )));
            }
        }
        if let Some(t) = &self.detector.tuning {
            if !(0.0 < t.target_capture && t.target_capture <= 1.0) || t.budget == 0 {
                return Err(Error::InvalidParameter(
                    "detector tuning target must be in (0, 1] with a positive budget".into(),
                ));
            }
        }
        if let CorpusSource::Phantom { spec, labeled_patients, unlabeled_patients, .. } =
            &self.corpus
        {
            spec.validate()?;
            if *labeled_patients < self.cv.folds {
                return Err(Error::InvalidParameter(format!(
                    "{labeled_patients} labeled patients cannot fill {} folds",
                    self.cv.folds
                )));
            }
            if *unlabeled_patients == 0 {
                return Err(Error::InvalidParameter(
                    "at least one unlabeled patient required".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable hex fingerprint of the serialized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:08x}", crc32fast::hash(&bytes))
    }
}
