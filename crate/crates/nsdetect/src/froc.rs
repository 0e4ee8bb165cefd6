//! Detection evaluation: center matching at 1.5 mm, FROC curve construction
//! (sensitivity and average false positives per exam as the response
//! threshold sweeps), AFP-at-sensitivity queries and cross-fold mean curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::cropnet::{forward_eval, CropNetModel};
use crate::error::{Error, Result};
use crate::logdet::{dist2, Candidate};
use crate::volgrid::{extract_roi, Annotation, Volume};

/// A detection counts as a hit up to (and including) this distance from the
/// lesion center.
pub const MATCH_RADIUS_MM: f64 = 1.5;

/// Per-exam model responses at candidate locations, plus the ground-truth
/// lesion centers of that exam.
#[derive(Debug, Clone)]
pub struct ExamResponses {
    pub exam_id: String,
    /// (position, response), NMS-separated candidate locations.
    pub entries: Vec<([f64; 3], f64)>,
    pub truth_centers: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub afp: f64,
}

/// Operating points sorted by descending threshold; sensitivity and AFP are
/// non-decreasing as the threshold decreases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

impl FrocCurve {
    pub fn max_sensitivity(&self) -> f64 {
        self.points.iter().map(|p| p.sensitivity).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp_lesions: usize,
    pub fp_detections: usize,
}

/// Matches detections to lesion centers: a lesion is detected if at least one
/// detection lies within `radius_mm` (inclusive); every detection that is not
/// within the radius of any lesion counts as one false positive. Multiple
/// detections on one lesion count it once and add no false positives.
pub fn match_detections(
    detections: &[[f64; 3]],
    truths: &[[f64; 3]],
    radius_mm: f64,
) -> MatchCounts {
    let r2 = radius_mm * radius_mm;
    let mut detected = vec![false; truths.len()];
    let mut fp = 0usize;
    for d in detections {
        let mut hit = false;
        for (i, t) in truths.iter().enumerate() {
            if dist2(*d, *t) <= r2 {
                detected[i] = true;
                hit = true;
            }
        }
        if !hit {
            fp += 1;
        }
    }
    MatchCounts {
        tp_lesions: detected.iter().filter(|&&d| d).count(),
        fp_detections: fp,
    }
}

/// Builds the FROC curve over a set of exams. Operating points are emitted
/// at +inf, at every distinct response value (descending), and at -inf, with
/// detections defined by `response > threshold`. Sensitivity pools lesions
/// across exams; AFP is total false positives divided by the exam count.
pub fn froc_curve(exams: &[ExamResponses]) -> Result<FrocCurve> {
    if exams.is_empty() {
        return Err(Error::EmptyInput("froc_curve needs at least one exam".into()));
    }
    let total_lesions: usize = exams.iter().map(|e| e.truth_centers.len()).sum();
    if total_lesions == 0 {
        return Err(Error::EmptyInput(
            "froc_curve needs at least one lesion (sensitivity undefined)".into(),
        ));
    }
    let n_exams = exams.len() as f64;
    let r2 = MATCH_RADIUS_MM * MATCH_RADIUS_MM;

    // Flatten entries; each carries the global indices of lesions it covers.
    struct Flat {
        response: f64,
        lesions: Vec<usize>,
    }
    let mut flat: Vec<Flat> = Vec::new();
    let mut lesion_base = 0usize;
    for exam in exams {
        for &(pos, response) in &exam.entries {
            if !response.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite response in exam {}",
                    exam.exam_id
                )));
            }
            let lesions: Vec<usize> = exam
                .truth_centers
                .iter()
                .enumerate()
                .filter(|(_, t)| dist2(pos, **t) <= r2)
                .map(|(i, _)| lesion_base + i)
                .collect();
            flat.push(Flat { response, lesions });
        }
        lesion_base += exam.truth_centers.len();
    }
    flat.sort_by(|a, b| b.response.partial_cmp(&a.response).expect("finite"));

    let mut detected = vec![false; total_lesions];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = vec![FrocPoint {
        threshold: f64::INFINITY,
        sensitivity: 0.0,
        afp: 0.0,
    }];

    let mut i = 0;
    while i < flat.len() {
        let value = flat[i].response;
        // Entries activated so far are exactly those with response > value.
        points.push(FrocPoint {
            threshold: value,
            sensitivity: tp as f64 / total_lesions as f64,
            afp: fp as f64 / n_exams,
        });
        while i < flat.len() && flat[i].response == value {
            if flat[i].lesions.is_empty() {
                fp += 1;
            } else {
                for &l in &flat[i].lesions {
                    if !detected[l] {
                        detected[l] = true;
                        tp += 1;
                    }
                }
            }
            i += 1;
        }
    }
    points.push(FrocPoint {
        threshold: f64::NEG_INFINITY,
        sensitivity: tp as f64 / total_lesions as f64,
        afp: fp as f64 / n_exams,
    });
    Ok(FrocCurve { points })
}

/// Smallest AFP among operating points with sensitivity >= `s`; requested
/// sensitivities beyond the curve maximum are reported as unattainable.
pub fn afp_at_sensitivity(curve: &FrocCurve, s: f64) -> Result<f64> {
    operating_point_at(curve, s).map(|p| p.afp)
}

fn operating_point_at(curve: &FrocCurve, s: f64) -> Result<FrocPoint> {
    if !(0.0 < s && s <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity query must be in (0, 1], got {s}"
        )));
    }
    curve
        .points
        .iter()
        .filter(|p| p.sensitivity >= s)
        .min_by(|a, b| a.afp.partial_cmp(&b.afp).expect("finite afp"))
        .copied()
        .ok_or(Error::UnattainableSensitivity {
            requested: s,
            max: curve.max_sensitivity(),
        })
}

/// Default sensitivity grid for fold-mean curves: 0.50 to 0.98, step 0.01.
pub fn default_sensitivity_grid() -> Vec<f64> {
    (50..=98).map(|i| i as f64 / 100.0).collect()
}

/// Averages fold curves on a sensitivity grid: each fold is resampled via
/// the AFP-at-sensitivity rule and AFP (and threshold) are averaged
/// pointwise. Grid sensitivities unattainable in any fold are dropped.
pub fn mean_curve(folds: &[FrocCurve], grid: &[f64]) -> Result<FrocCurve> {
    if folds.is_empty() {
        return Err(Error::EmptyInput("mean_curve needs at least one fold".into()));
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("mean_curve needs a non-empty grid".into()));
    }
    let mut points = Vec::new();
    for &s in grid {
        let mut afp_sum = 0.0;
        let mut thr_sum = 0.0;
        let mut ok = true;
        for fold in folds {
            match operating_point_at(fold, s) {
                Ok(p) => {
                    afp_sum += p.afp;
                    thr_sum += p.threshold;
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            points.push(FrocPoint {
                threshold: thr_sum / folds.len() as f64,
                sensitivity: s,
                afp: afp_sum / folds.len() as f64,
            });
        }
    }
    // Grid points ascend in sensitivity, so thresholds descend.
    points.reverse();
    Ok(FrocCurve { points })
}

/// Runs eval-mode inference on every candidate ROI of every exam and builds
/// the FROC curve against the exam annotations.
pub fn evaluate_model(
    model: &CropNetModel,
    exams: &[(&Volume, &Annotation)],
    candidates: &HashMap<String, Vec<Candidate>>,
) -> Result<FrocCurve> {
    let responses: Vec<ExamResponses> = exams
        .par_iter()
        .map(|(v, ann)| exam_responses(model, v, ann, candidates))
        .collect::<Result<_>>()?;
    froc_curve(&responses)
}

fn exam_responses(
    model: &CropNetModel,
    v: &Volume,
    ann: &Annotation,
    candidates: &HashMap<String, Vec<Candidate>>,
) -> Result<ExamResponses> {
    static NO_CANDS: Vec<Candidate> = Vec::new();
    let cands = candidates.get(&v.exam_id).unwrap_or(&NO_CANDS);
    let edge = model.config.input_edge_mm as f64;
    let rois: Vec<_> = cands
        .iter()
        .map(|c| extract_roi(v, c.pos_mm, edge))
        .collect();
    let roi_refs: Vec<&_> = rois.iter().collect();
    let preds = forward_eval(model, &roi_refs)?;
    Ok(ExamResponses {
        exam_id: v.exam_id.clone(),
        entries: cands
            .iter()
            .zip(&preds)
            .map(|(c, &p)| (c.pos_mm, p as f64))
            .collect(),
        truth_centers: ann.lesions.iter().map(|l| l.center_mm).collect(),
    })
}

/// Exhaustive per-threshold recomputation of a FROC curve; quadratic and
/// intended as a test oracle for small instances.
pub fn froc_curve_brute_force(exams: &[ExamResponses]) -> Result<FrocCurve> {
    if exams.is_empty() {
        return Err(Error::EmptyInput("no exams".into()));
    }
    let total_lesions: usize = exams.iter().map(|e| e.truth_centers.len()).sum();
    if total_lesions == 0 {
        return Err(Error::EmptyInput("no lesions".into()));
    }
    let mut thresholds: Vec<f64> = exams
        .iter()
        .flat_map(|e| e.entries.iter().map(|&(_, r)| r))
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut all = vec![f64::INFINITY];
    all.extend(thresholds);
    all.push(f64::NEG_INFINITY);

    let points = all
        .into_iter()
        .map(|t| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            for exam in exams {
                let detections: Vec<[f64; 3]> = exam
                    .entries
                    .iter()
                    .filter(|&&(_, r)| r > t)
                    .map(|&(p, _)| p)
                    .collect();
                let counts = match_detections(&detections, &exam.truth_centers, MATCH_RADIUS_MM);
                tp += counts.tp_lesions;
                fp += counts.fp_detections;
            }
            FrocPoint {
                threshold: t,
                sensitivity: tp as f64 / total_lesions as f64,
                afp: fp as f64 / exams.len() as f64,
            }
        })
        .collect();
    Ok(FrocCurve { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng;

    #[test]
    fn match_examples() {
        let truth = [[10.0, 10.0, 10.0]];
        // Exactly at the center.
        let m = match_detections(&[[10.0, 10.0, 10.0]], &truth, MATCH_RADIUS_MM);
        assert_eq!(m, MatchCounts { tp_lesions: 1, fp_detections: 0 });

        // Exactly at 1.5 mm: inclusive boundary.
        let m = match_detections(&[[11.5, 10.0, 10.0]], &truth, MATCH_RADIUS_MM);
        assert_eq!(m, MatchCounts { tp_lesions: 1, fp_detections: 0 });

        // Two detections on one lesion plus one far away.
        let m = match_detections(
            &[[10.5, 10.0, 10.0], [9.5, 10.0, 10.0], [20.0, 10.0, 10.0]],
            &truth,
            MATCH_RADIUS_MM,
        );
        assert_eq!(m, MatchCounts { tp_lesions: 1, fp_detections: 1 });
    }

    #[test]
    fn match_is_order_independent() {
        let truth = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let dets = [
            [0.5, 0.0, 0.0],
            [10.2, 0.0, 0.0],
            [5.0, 5.0, 5.0],
            [0.4, 0.0, 0.0],
        ];
        let a = match_detections(&dets, &truth, MATCH_RADIUS_MM);
        let mut rev = dets;
        rev.reverse();
        let b = match_detections(&rev, &truth, MATCH_RADIUS_MM);
        assert_eq!(a, b);
    }

    fn crafted_exams() -> Vec<ExamResponses> {
        vec![
            ExamResponses {
                exam_id: "a".into(),
                entries: vec![
                    ([0.0, 0.0, 0.0], 0.9),
                    ([10.0, 0.0, 0.0], 0.7),
                    ([20.0, 0.0, 0.0], 0.5),
                    ([30.0, 0.0, 0.0], 0.5),
                ],
                truth_centers: vec![[0.0, 0.0, 0.0], [10.0, 0.5, 0.0], [40.0, 0.0, 0.0]],
            },
            ExamResponses {
                exam_id: "b".into(),
                entries: vec![([1.0, 1.0, 1.0], 0.8), ([9.0, 9.0, 9.0], 0.3)],
                truth_centers: vec![[1.0, 1.0, 1.5]],
            },
        ]
    }

    #[test]
    fn curve_matches_brute_force_on_crafted_exams() {
        let exams = crafted_exams();
        let fast = froc_curve(&exams).unwrap();
        let brute = froc_curve_brute_force(&exams).unwrap();
        assert_eq!(fast.points.len(), brute.points.len());
        for (f, b) in fast.points.iter().zip(&brute.points) {
            assert_eq!(f.threshold, b.threshold);
            assert_eq!(f.sensitivity, b.sensitivity);
            assert_eq!(f.afp, b.afp);
        }
    }

    #[test]
    fn curve_endpoints() {
        let exams = crafted_exams();
        let curve = froc_curve(&exams).unwrap();
        let first = curve.points.first().unwrap();
        assert_eq!(first.threshold, f64::INFINITY);
        assert_eq!((first.sensitivity, first.afp), (0.0, 0.0));

        // At -inf everything fires: capture = 3/4 lesions (one unreachable),
        // FP = 2 in exam a + 1 in exam b.
        let last = curve.points.last().unwrap();
        assert_eq!(last.threshold, f64::NEG_INFINITY);
        assert_eq!(last.sensitivity, 0.75);
        assert_eq!(last.afp, 1.5);
    }

    #[test]
    fn curve_is_monotone() {
        let exams = crafted_exams();
        let curve = froc_curve(&exams).unwrap();
        for w in curve.points.windows(2) {
            assert!(w[0].threshold >= w[1].threshold);
            assert!(w[0].sensitivity <= w[1].sensitivity);
            assert!(w[0].afp <= w[1].afp);
        }
    }

    #[test]
    fn curve_rejects_degenerate_inputs() {
        assert!(froc_curve(&[]).is_err());
        let no_lesions = vec![ExamResponses {
            exam_id: "a".into(),
            entries: vec![([0.0; 3], 0.5)],
            truth_centers: vec![],
        }];
        assert!(froc_curve(&no_lesions).is_err());
    }

    #[test]
    fn curve_matches_brute_force_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n_exams = rng.gen_range(1..4);
            let exams: Vec<ExamResponses> = (0..n_exams)
                .map(|e| {
                    let n_truth = if e == 0 { rng.gen_range(1..5) } else { rng.gen_range(0..5) };
                    let truth_centers: Vec<[f64; 3]> = (0..n_truth)
                        .map(|_| {
                            [
                                rng.gen_range(0.0..30.0),
                                rng.gen_range(0.0..30.0),
                                rng.gen_range(0.0..30.0),
                            ]
                        })
                        .collect();
                    let n_entries = rng.gen_range(0..20);
                    let entries = (0..n_entries)
                        .map(|_| {
                            let pos = if rng.gen_bool(0.4) && !truth_centers.is_empty() {
                                let t = truth_centers[rng.gen_range(0..truth_centers.len())];
                                [t[0] + rng.gen_range(-1.0..1.0), t[1], t[2]]
                            } else {
                                [
                                    rng.gen_range(0.0..30.0),
                                    rng.gen_range(0.0..30.0),
                                    rng.gen_range(0.0..30.0),
                                ]
                            };
                            // Quantized responses force tie cases.
                            let r = (rng.gen_range(0.0..1.0f64) * 8.0).round() / 8.0;
                            (pos, r)
                        })
                        .collect();
                    ExamResponses {
                        exam_id: format!("e{e}"),
                        entries,
                        truth_centers,
                    }
                })
                .collect();
            let fast = froc_curve(&exams).unwrap();
            let brute = froc_curve_brute_force(&exams).unwrap();
            assert_eq!(fast.points, brute.points);
        }
    }

    #[test]
    fn afp_query_examples() {
        let curve = FrocCurve {
            points: vec![
                FrocPoint { threshold: 0.9, sensitivity: 0.5, afp: 1.0 },
                FrocPoint { threshold: 0.5, sensitivity: 0.9, afp: 8.44 },
                FrocPoint { threshold: 0.1, sensitivity: 0.95, afp: 20.0 },
            ],
        };
        assert_eq!(afp_at_sensitivity(&curve, 0.9).unwrap(), 8.44);
        // Lowest positive sensitivity on the curve.
        assert_eq!(afp_at_sensitivity(&curve, 0.5).unwrap(), 1.0);
        // No credit between operating points.
        let step = FrocCurve {
            points: vec![
                FrocPoint { threshold: 0.8, sensitivity: 0.8, afp: 2.0 },
                FrocPoint { threshold: 0.2, sensitivity: 0.9, afp: 5.0 },
            ],
        };
        assert_eq!(afp_at_sensitivity(&step, 0.85).unwrap(), 5.0);
        // Unattainable sensitivity is a distinct error.
        assert!(matches!(
            afp_at_sensitivity(&curve, 0.99),
            Err(Error::UnattainableSensitivity { .. })
        ));
    }

    #[test]
    fn afp_query_is_monotone_in_sensitivity() {
        let exams = crafted_exams();
        let curve = froc_curve(&exams).unwrap();
        let mut prev = 0.0;
        for s in [0.1, 0.25, 0.5, 0.75] {
            let afp = afp_at_sensitivity(&curve, s).unwrap();
            assert!(afp >= prev);
            prev = afp;
        }
    }

    #[test]
    fn mean_curve_examples() {
        let exams = crafted_exams();
        let fold = froc_curve(&exams).unwrap();
        let grid = [0.25, 0.5, 0.75];

        // Identical folds: mean equals each fold on the grid.
        let mean = mean_curve(&[fold.clone(), fold.clone()], &grid).unwrap();
        for p in &mean.points {
            let expected = afp_at_sensitivity(&fold, p.sensitivity).unwrap();
            assert_eq!(p.afp, expected);
        }

        // Simple arithmetic: AFP 2 and 4 at the same sensitivity average to 3.
        let a = FrocCurve {
            points: vec![FrocPoint { threshold: 0.5, sensitivity: 0.85, afp: 2.0 }],
        };
        let b = FrocCurve {
            points: vec![FrocPoint { threshold: 0.3, sensitivity: 0.85, afp: 4.0 }],
        };
        let m = mean_curve(&[a, b], &[0.85]).unwrap();
        assert_eq!(m.points.len(), 1);
        assert_eq!(m.points[0].afp, 3.0);
        assert_eq!(m.points[0].threshold, 0.4);
    }

    #[test]
    fn mean_curve_matches_pointwise_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let folds: Vec<FrocCurve> = (0..3)
            .map(|_| {
                let exams: Vec<ExamResponses> = (0..2)
                    .map(|e| ExamResponses {
                        exam_id: format!("e{e}"),
                        entries: (0..10)
                            .map(|_| {
                                (
                                    [
                                        rng.gen_range(0.0..20.0),
                                        rng.gen_range(0.0..20.0),
                                        rng.gen_range(0.0..20.0),
                                    ],
                                    rng.gen_range(0.0..1.0),
                                )
                            })
                            .collect(),
                        truth_centers: vec![[5.0, 5.0, 5.0], [15.0, 15.0, 15.0]],
                    })
                    .collect();
                froc_curve(&exams).unwrap()
            })
            .collect();
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let mean = mean_curve(&folds, &grid).unwrap();
        for p in &mean.points {
            let per_fold: Vec<f64> = folds
                .iter()
                .map(|f| afp_at_sensitivity(f, p.sensitivity).unwrap())
                .collect();
            let expected = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
            assert!((p.afp - expected).abs() < 1e-12);
        }
        // Points the oracle drops are dropped here too.
        for &s in &grid {
            let attainable = folds.iter().all(|f| afp_at_sensitivity(f, s).is_ok());
            let present = mean.points.iter().any(|p| p.sensitivity == s);
            assert_eq!(attainable, present);
        }
    }

    #[test]
    fn mean_curve_rejects_empty_grid() {
        let fold = froc_curve(&crafted_exams()).unwrap();
        assert!(mean_curve(&[fold], &[]).is_err());
        assert!(mean_curve(&[], &[0.5]).is_err());
    }
}
