//! Synthetic corpus generator: brain-like volumes (smooth background inside
//! an ellipsoidal mask, curvilinear vessel mimics) with implanted spherical
//! Gaussian lesions whose size statistics follow the configured truncated
//! normal. Vessel mimics are deliberately blob-like enough to produce real
//! false positives downstream.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::noise::{fork_rng, Rng};
use crate::volgrid::{Annotation, Lesion, Volume};

/// FWHM of a Gaussian profile per unit sigma.
pub const FWHM_FACTOR: f64 = 2.354_820_045_030_949;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub volume_edge_mm: usize,
    /// Poisson mean of the per-exam lesion count.
    pub lesion_count_mean: f64,
    /// Normal diameter distribution, clamped to the clip range.
    pub lesion_diameter_mean_mm: f64,
    pub lesion_diameter_sd_mm: f64,
    pub lesion_diameter_clip_mm: [f64; 2],
    /// Peak intensity of a lesion above its local background.
    pub lesion_contrast_range: [f64; 2],
    /// Number of vessel-like distractor tubes.
    pub distractor_count_range: [usize; 2],
    pub background_smoothness_mm: f64,
    pub min_lesion_separation_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            volume_edge_mm: 96,
            lesion_count_mean: 4.29,
            lesion_diameter_mean_mm: 5.45,
            lesion_diameter_sd_mm: 2.67,
            lesion_diameter_clip_mm: [2.0, 14.0],
            lesion_contrast_range: [0.1, 0.4],
            distractor_count_range: [10, 18],
            background_smoothness_mm: 12.0,
            min_lesion_separation_mm: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.lesion_diameter_clip_mm;
        if !(0.0 < lo && lo <= hi && hi < 15.0) {
            return Err(Error::InvalidParameter(format!(
                "diameter clip [{lo}, {hi}] must lie inside (0, 15)"
            )));
        }
        if self.min_lesion_separation_mm <= 3.0 {
            return Err(Error::InvalidParameter(
                "lesion separation must exceed twice the match radius".into(),
            ));
        }
        if self.volume_edge_mm < 32 {
            return Err(Error::InvalidParameter("volume edge too small".into()));
        }
        if !(self.lesion_count_mean > 0.0) {
            return Err(Error::InvalidParameter("lesion count mean must be positive".into()));
        }
        Ok(())
    }

    fn ellipsoid_semi_axes(&self) -> [f64; 3] {
        let e = self.volume_edge_mm as f64;
        [0.40 * e, 0.37 * e, 0.34 * e]
    }

    fn center(&self) -> [f64; 3] {
        let c = (self.volume_edge_mm as f64 - 1.0) / 2.0;
        [c, c, c]
    }
}

/// Squared ellipsoid coordinate: <= 1 inside the mask.
fn mask_coord(spec: &PhantomSpec, p: [f64; 3]) -> f64 {
    let c = spec.center();
    let a = spec.ellipsoid_semi_axes();
    ((p[0] - c[0]) / a[0]).powi(2) + ((p[1] - c[1]) / a[1]).powi(2) + ((p[2] - c[2]) / a[2]).powi(2)
}

struct Tube {
    points: Vec<[f64; 3]>,
    radius_mm: f64,
    intensity: f64,
}

/// Generates one exam: smooth background inside the brain mask, vessel-like
/// tubes, and rejection-sampled lesions recorded in the annotation.
pub fn generate_phantom(spec: &PhantomSpec, rng: &mut Rng) -> Result<(Volume, Annotation)> {
    spec.validate()?;
    let n = spec.volume_edge_mm;

    // Draw everything before rasterizing so the draw order is stable.
    let background = background_field(spec, rng, n);
    let tubes = draw_tubes(spec, rng);
    let lesions = draw_lesions(spec, rng, &tubes)?;

    let mut data = vec![0.0f32; n * n * n];
    let mut i = 0;
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let p = [ix as f64, iy as f64, iz as f64];
                let m = mask_coord(spec, p);
                if m <= 1.0 {
                    // Soft falloff near the mask boundary.
                    let rim = ((1.0 - m) / 0.35).min(1.0);
                    data[i] = (background[i] as f64 * rim) as f32;
                } else if iz < 6 {
                    // Bright fat-like slab under the head: the brightest
                    // tissue in the image, so robust normalization cannot
                    // saturate compact lesion and vessel peaks into
                    // plateaus. Constant along its faces, it is
                    // tie-degenerate and yields almost no blob maxima.
                    data[i] = 0.78;
                }
                i += 1;
            }
        }
    }
    for tube in &tubes {
        rasterize_tube(&mut data, n, tube);
    }
    for (lesion, contrast) in &lesions {
        rasterize_lesion(&mut data, n, lesion, *contrast);
    }

    let volume = Volume::new([n, n, n], [1.0; 3], [0.0; 3], data, "", "")?;
    let annotation = Annotation {
        exam_id: String::new(),
        lesions: lesions.iter().map(|(l, _)| *l).collect(),
    };
    Ok((volume, annotation))
}

/// Smooth random background: Gaussian-filtered white noise, standardized to
/// a gentle intensity variation around the base level. A C^2-smooth field
/// keeps large-lesion response peaks from being dragged off-center.
fn background_field(spec: &PhantomSpec, rng: &mut Rng, n: usize) -> Vec<f32> {
    let mut field: Vec<f32> = (0..n * n * n)
        .map(|_| rng.gen_range(-1.0..1.0f32))
        .collect();
    let sigma = (spec.background_smoothness_mm / 2.0).max(1.0);
    field = crate::logdet::gaussian_smooth(&field, [n, n, n], sigma);

    let mean = field.iter().map(|&x| x as f64).sum::<f64>() / field.len() as f64;
    let var = field
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / field.len() as f64;
    let scale = if var > 0.0 { 0.015 / var.sqrt() } else { 0.0 };
    for x in field.iter_mut() {
        *x = (0.31 + scale * (*x as f64 - mean)).clamp(0.22, 0.4) as f32;
    }
    field
}

fn draw_tubes(spec: &PhantomSpec, rng: &mut Rng) -> Vec<Tube> {
    let [lo, hi] = spec.distractor_count_range;
    let count = rng.gen_range(lo..=hi);
    let c = spec.center();
    let axes = spec.ellipsoid_semi_axes();
    (0..count)
        .map(|_| {
            // Random smooth walk inside the mask.
            let mut p = [
                c[0] + rng.gen_range(-0.7..0.7) * axes[0],
                c[1] + rng.gen_range(-0.7..0.7) * axes[1],
                c[2] + rng.gen_range(-0.7..0.7) * axes[2],
            ];
            let mut dir = random_unit(rng);
            let steps = rng.gen_range(12..30);
            let step_mm = 2.5;
            let mut points = Vec::with_capacity(steps);
            for _ in 0..steps {
                points.push(p);
                for a in 0..3 {
                    dir[a] += rng.gen_range(-0.45..0.45);
                }
                dir = normalize(dir);
                for a in 0..3 {
                    p[a] += dir[a] * step_mm;
                }
                if mask_coord(spec, p) > 0.85 {
                    break;
                }
            }
            Tube {
                points,
                radius_mm: rng.gen_range(0.5..1.5),
                intensity: rng.gen_range(0.12..0.38),
            }
        })
        .collect()
}

#[allow(clippy::type_complexity)]
fn draw_lesions(spec: &PhantomSpec, rng: &mut Rng, tubes: &[Tube]) -> Result<Vec<(Lesion, f64)>> {
    let requested = Poisson::new(spec.lesion_count_mean)
        .expect("positive mean")
        .sample(rng) as usize;
    let mut placed: Vec<(Lesion, f64)> = Vec::with_capacity(requested);
    let c = spec.center();
    let axes = spec.ellipsoid_semi_axes();
    let max_attempts = 200 * requested.max(1);
    let mut attempts = 0;
    while placed.len() < requested {
        if attempts >= max_attempts {
            return Err(Error::LesionPlacement {
                requested,
                placed: placed.len(),
                attempts,
            });
        }
        attempts += 1;
        let diameter = {
            let d =
                spec.lesion_diameter_mean_mm + spec.lesion_diameter_sd_mm * normal_draw(rng);
            d.clamp(spec.lesion_diameter_clip_mm[0], spec.lesion_diameter_clip_mm[1])
        };
        let pos = [
            c[0] + rng.gen_range(-1.0..1.0) * axes[0],
            c[1] + rng.gen_range(-1.0..1.0) * axes[1],
            c[2] + rng.gen_range(-1.0..1.0) * axes[2],
        ];
        // Keep the whole lesion inside the mask interior.
        if mask_coord(spec, pos) > 0.4 {
            continue;
        }
        if placed
            .iter()
            .any(|(l, _)| dist(l.center_mm, pos) < spec.min_lesion_separation_mm)
        {
            continue;
        }
        // Lesions do not sit on vessels; a tube through a lesion would both
        // shift its response peak and suppress its candidate.
        if tubes.iter().any(|t| {
            t.points
                .windows(2)
                .any(|seg| point_segment_distance(pos, seg[0], seg[1]) < 6.0 + t.radius_mm)
        }) {
            continue;
        }
        let contrast =
            rng.gen_range(spec.lesion_contrast_range[0]..=spec.lesion_contrast_range[1]);
        placed.push((
            Lesion {
                center_mm: pos,
                diameter_mm: diameter,
            },
            contrast,
        ));
    }
    Ok(placed)
}

/// Standard normal via Box-Muller, two uniform draws per call.
fn normal_draw(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

fn random_unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-4 && n2 <= 1.0 {
            return normalize(v);
        }
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    crate::logdet::dist2(a, b).sqrt()
}

/// Adds a tube as capsule segments with a Gaussian cross-section.
fn rasterize_tube(data: &mut [f32], n: usize, tube: &Tube) {
    let sigma = tube.radius_mm / 1.6;
    let reach = (3.0 * sigma).ceil();
    for seg in tube.points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let lo = |ax: usize| ((a[ax].min(b[ax]) - reach).floor().max(0.0)) as usize;
        let hi = |ax: usize| ((a[ax].max(b[ax]) + reach).ceil().min(n as f64 - 1.0)) as usize;
        for iz in lo(2)..=hi(2) {
            for iy in lo(1)..=hi(1) {
                for ix in lo(0)..=hi(0) {
                    let p = [ix as f64, iy as f64, iz as f64];
                    let d = point_segment_distance(p, a, b);
                    if d <= reach {
                        let add = tube.intensity * (-d * d / (2.0 * sigma * sigma)).exp();
                        let idx = (iz * n + iy) * n + ix;
                        let base = data[idx];
                        if base > 0.0 {
                            data[idx] = (base as f64 + add).min(1.0) as f32;
                        }
                    }
                }
            }
        }
    }
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dist(p, q)
}

/// Adds an isotropic Gaussian intensity bump whose FWHM equals the lesion
/// diameter.
fn rasterize_lesion(data: &mut [f32], n: usize, lesion: &Lesion, contrast: f64) {
    let sigma = lesion.diameter_mm / FWHM_FACTOR;
    let reach = (3.5 * sigma).ceil();
    let c = lesion.center_mm;
    let lo = |ax: usize| ((c[ax] - reach).floor().max(0.0)) as usize;
    let hi = |ax: usize| ((c[ax] + reach).ceil().min(n as f64 - 1.0)) as usize;
    for iz in lo(2)..=hi(2) {
        for iy in lo(1)..=hi(1) {
            for ix in lo(0)..=hi(0) {
                let p = [ix as f64, iy as f64, iz as f64];
                let d2 = crate::logdet::dist2(p, c);
                let add = contrast * (-d2 / (2.0 * sigma * sigma)).exp();
                let idx = (iz * n + iy) * n + ix;
                data[idx] = (data[idx] as f64 + add).min(1.0) as f32;
            }
        }
    }
}

/// A labeled exam: the volume plus its lesion annotation.
#[derive(Debug, Clone)]
pub struct LabeledExam {
    pub volume: Volume,
    pub annotation: Annotation,
}

/// Synthetic corpus with disjoint labeled/unlabeled patient groups. Ground
/// truth for the unlabeled exams is retained separately, for diagnostics
/// only; the training pipeline never reads it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labeled: Vec<LabeledExam>,
    pub unlabeled: Vec<Volume>,
    pub unlabeled_truth: Vec<Annotation>,
    /// exam id -> patient id.
    pub patients: HashMap<String, String>,
}

/// How many exams a synthetic patient gets: counts with mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamCountDist {
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ExamCountDist {
    pub fn fixed(n: usize) -> Self {
        Self {
            counts: vec![n],
            weights: vec![1.0],
        }
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.gen_range(0.0..total);
        for (&c, &w) in self.counts.iter().zip(&self.weights) {
            if u < w {
                return c.max(1);
            }
            u -= w;
        }
        self.counts.last().copied().unwrap_or(1).max(1)
    }
}

/// Generates a full corpus: labeled and unlabeled patients are disjoint by
/// construction, and each exam is an independent phantom.
pub fn generate_corpus(
    spec: &PhantomSpec,
    n_labeled_patients: usize,
    n_unlabeled_patients: usize,
    exams_per_patient: &ExamCountDist,
    rng: &mut Rng,
) -> Result<Corpus> {
    if n_labeled_patients == 0 || n_unlabeled_patients == 0 {
        return Err(Error::InvalidParameter(
            "corpus needs at least one labeled and one unlabeled patient".into(),
        ));
    }
    // Plan patients/exams and fork per-exam rngs in a fixed order so exam
    // generation can run in parallel deterministically.
    struct ExamPlan {
        exam_id: String,
        patient_id: String,
        labeled: bool,
        rng: Rng,
    }
    let mut plans = Vec::new();
    for p in 0..n_labeled_patients {
        let patient_id = format!("lp{p:04}");
        for e in 0..exams_per_patient.sample(rng) {
            plans.push(ExamPlan {
                exam_id: format!("{patient_id}e{e}"),
                patient_id: patient_id.clone(),
                labeled: true,
                rng: fork_rng(rng),
            });
        }
    }
    for p in 0..n_unlabeled_patients {
        let patient_id = format!("up{p:04}");
        for e in 0..exams_per_patient.sample(rng) {
            plans.push(ExamPlan {
                exam_id: format!("{patient_id}e{e}"),
                patient_id: patient_id.clone(),
                labeled: false,
                rng: fork_rng(rng),
            });
        }
    }

    use rayon::prelude::*;
    let generated: Vec<(bool, Volume, Annotation)> = plans
        .into_par_iter()
        .map(|mut plan| {
            let (mut volume, mut annotation) = generate_phantom(spec, &mut plan.rng)?;
            volume.exam_id = plan.exam_id.clone();
            volume.patient_id = plan.patient_id.clone();
            annotation.exam_id = plan.exam_id;
            Ok((plan.labeled, volume, annotation))
        })
        .collect::<Result<_>>()?;

    let mut corpus = Corpus {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        unlabeled_truth: Vec::new(),
        patients: HashMap::new(),
    };
    for (labeled, volume, annotation) in generated {
        corpus
            .patients
            .insert(volume.exam_id.clone(), volume.patient_id.clone());
        if labeled {
            corpus.labeled.push(LabeledExam { volume, annotation });
        } else {
            corpus.unlabeled.push(volume);
            corpus.unlabeled_truth.push(annotation);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::seeded_rng;
    use rayon::prelude::*;


    /// A spec whose lesion load fits comfortably in a small test volume.
    fn small_spec(edge: usize) -> PhantomSpec {
        PhantomSpec {
            volume_edge_mm: edge,
            lesion_count_mean: 1.5,
            min_lesion_separation_mm: 6.0,
            distractor_count_range: [3, 6],
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let spec = small_spec(64);
        let (v1, a1) = generate_phantom(&spec, &mut seeded_rng(9)).unwrap();
        let (v2, a2) = generate_phantom(&spec, &mut seeded_rng(9)).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(a1, a2);
        let (v3, _) = generate_phantom(&spec, &mut seeded_rng(10)).unwrap();
        assert_ne!(v1, v3);
    }

    #[test]
    fn lesions_respect_mask_and_separation() {
        let spec = PhantomSpec::default();
        for seed in 0..12 {
            let (v, ann) = generate_phantom(&spec, &mut seeded_rng(seed)).unwrap();
            ann.validate(&v).unwrap();
            for (i, a) in ann.lesions.iter().enumerate() {
                assert!(mask_coord(&spec, a.center_mm) <= 1.0);
                for b in ann.lesions.iter().skip(i + 1) {
                    assert!(
                        dist(a.center_mm, b.center_mm) >= spec.min_lesion_separation_mm,
                        "seed {seed}"
                    );
                }
            }
            assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn lesion_statistics_match_configuration() {
        // 500 exams: empirical mean count within 0.5 of 4.29, mean diameter
        // within 0.4 of 5.45 mm.
        let spec = PhantomSpec::default();
        let stats: Vec<(usize, f64)> = (0..500u64)
            .into_par_iter()
            .map(|seed| {
                let mut rng = seeded_rng(1000 + seed);
                let lesions = draw_lesions(&spec, &mut rng, &[]).unwrap();
                let count = lesions.len();
                let dsum: f64 = lesions.iter().map(|(l, _)| l.diameter_mm).sum();
                (count, dsum)
            })
            .collect();
        let total: usize = stats.iter().map(|(c, _)| c).sum();
        let mean_count = total as f64 / 500.0;
        let mean_diameter = stats.iter().map(|(_, d)| d).sum::<f64>() / total as f64;
        assert!(
            (mean_count - 4.29).abs() <= 0.5,
            "mean lesion count {mean_count}"
        );
        assert!(
            (mean_diameter - 5.45).abs() <= 0.4,
            "mean diameter {mean_diameter}"
        );
    }

    #[test]
    fn corpus_patient_sets_are_disjoint() {
        let spec = small_spec(48);
        let corpus = generate_corpus(
            &spec,
            4,
            6,
            &ExamCountDist::fixed(1),
            &mut seeded_rng(3),
        )
        .unwrap();
        assert_eq!(corpus.labeled.len(), 4);
        assert_eq!(corpus.unlabeled.len(), 6);
        let labeled_patients: std::collections::HashSet<_> = corpus
            .labeled
            .iter()
            .map(|e| e.volume.patient_id.clone())
            .collect();
        let unlabeled_patients: std::collections::HashSet<_> = corpus
            .unlabeled
            .iter()
            .map(|v| v.patient_id.clone())
            .collect();
        assert!(labeled_patients.is_disjoint(&unlabeled_patients));
        assert_eq!(corpus.patients.len(), 10);
    }

    #[test]
    fn exam_count_mixture_statistics() {
        let dist = ExamCountDist {
            counts: vec![1, 2],
            weights: vec![0.7, 0.3],
        };
        let mut rng = seeded_rng(5);
        let n = 1000;
        let total: usize = (0..n).map(|_| dist.sample(&mut rng)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 1.3).abs() <= 0.05, "mean exams/patient {mean}");
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let spec = small_spec(48);
        let dist = ExamCountDist {
            counts: vec![1, 2],
            weights: vec![0.7, 0.3],
        };
        let a = generate_corpus(&spec, 2, 2, &dist, &mut seeded_rng(11)).unwrap();
        let b = generate_corpus(&spec, 2, 2, &dist, &mut seeded_rng(11)).unwrap();
        assert_eq!(a.labeled.len(), b.labeled.len());
        for (x, y) in a.labeled.iter().zip(&b.labeled) {
            assert_eq!(x.volume, y.volume);
            assert_eq!(x.annotation, y.annotation);
        }
        for (x, y) in a.unlabeled.iter().zip(&b.unlabeled) {
            assert_eq!(x, y);
        }
    }
}
