//! Scale-space Laplacian-of-Gaussian candidate detection: per-scale blob
//! responses, 3D+scale local maxima, greedy non-maximum suppression, and
//! capture-rate threshold tuning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::froc::MATCH_RADIUS_MM;
use crate::volgrid::{Annotation, Volume};

/// A proposed lesion location: world-space point, maximizing scale and
/// scale-normalized response.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub exam_id: String,
    pub pos_mm: [f64; 3],
    pub scale_mm: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    BrightBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Strictly ascending LoG scales in mm.
    pub scales_mm: Vec<f64>,
    pub score_threshold: f64,
    pub nms_radius_mm: f64,
    pub max_candidates_per_exam: usize,
    pub polarity: Polarity,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            // Geometric ladder covering lesion radii up to ~7.5 mm.
            scales_mm: vec![1.0, 1.5, 2.25, 3.4, 5.0],
            score_threshold: 0.0,
            nms_radius_mm: 1.5,
            max_candidates_per_exam: 5000,
            polarity: Polarity::BrightBlob,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self, voxel_pitch_mm: f64) -> Result<()> {
        if self.scales_mm.is_empty() {
            return Err(Error::InvalidParameter(
                "scales_mm must be non-empty".into(),
            ));
        }
        if self.scales_mm.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter(
                "scales_mm must be strictly ascending".into(),
            ));
        }
        if self.nms_radius_mm < voxel_pitch_mm {
            return Err(Error::InvalidParameter(format!(
                "nms_radius_mm {} below voxel pitch {voxel_pitch_mm}",
                self.nms_radius_mm
            )));
        }
        if self.max_candidates_per_exam == 0 {
            return Err(Error::InvalidParameter(
                "max_candidates_per_exam must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn isotropic_pitch(v: &Volume) -> Result<f64> {
    let s = v.spacing_mm();
    if (s[0] - s[1]).abs() > 1e-9 || (s[0] - s[2]).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "volume must be isotropic, spacing {s:?}"
        )));
    }
    Ok(s[0])
}

/// Scale-normalized LoG response of a bright-blob detector at one scale.
///
/// Computed as separable Gaussian smoothing followed by a discrete 6-point
/// Laplacian, sign-flipped so bright blobs score positive, and normalized by
/// `sigma^2.5`: in 3D this puts the response peak of an isotropic Gaussian
/// blob of width `sigma0` at scale `sigma = sigma0` (a `sigma^2` factor
/// would shift it to `sqrt(2/3) * sigma0`).
pub fn log_response(v: &Volume, sigma_mm: f64) -> Result<Vec<f32>> {
    let pitch = isotropic_pitch(v)?;
    if sigma_mm < 0.5 * pitch {
        return Err(Error::InvalidParameter(format!(
            "sigma {sigma_mm} mm undersampled for voxel pitch {pitch} mm"
        )));
    }
    let dims = [v.nz(), v.ny(), v.nx()];
    let smoothed = gaussian_smooth(v.data(), dims, sigma_mm / pitch);
    let mut lap = laplacian(&smoothed, dims);
    // The discrete Laplacian is per voxel^2; express it per mm^2 before
    // scale normalization so responses are comparable across pitches.
    let norm = (sigma_mm.powf(2.5) / (pitch * pitch)) as f32;
    for x in lap.iter_mut() {
        *x *= -norm;
    }
    Ok(lap)
}

/// Separable Gaussian smoothing with replicated borders; sigma in voxels.
pub(crate) fn gaussian_smooth(data: &[f32], dims: [usize; 3], sigma_vox: f64) -> Vec<f32> {
    let radius = (3.0 * sigma_vox).ceil().max(1.0) as usize;
    let mut kernel: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma_vox * sigma_vox)).exp() as f32
        })
        .collect();
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= sum);

    let mut a = data.to_vec();
    let mut b = vec![0.0f32; data.len()];
    smooth_x(&a, &mut b, dims, &kernel);
    smooth_plane_axis(&b, &mut a, dims, &kernel, 1);
    smooth_plane_axis(&a, &mut b, dims, &kernel, 0);
    b
}

/// Convolution along x (contiguous): shifted in-row accumulation.
fn smooth_x(src: &[f32], dst: &mut [f32], dims: [usize; 3], kernel: &[f32]) {
    let [nz, ny, nx] = dims;
    let radius = kernel.len() / 2;
    dst.fill(0.0);
    for row in 0..nz * ny {
        let s = &src[row * nx..(row + 1) * nx];
        let d = &mut dst[row * nx..(row + 1) * nx];
        for (k, &w) in kernel.iter().enumerate() {
            let shift = k as isize - radius as isize;
            // Clamped-border head and tail around a vectorizable middle.
            let lo = ((-shift).max(0) as usize).min(nx);
            let hi = ((nx as isize - shift).max(0) as usize).min(nx);
            for x in 0..lo {
                d[x] += w * s[0];
            }
            for x in lo..hi {
                d[x] += w * s[(x as isize + shift) as usize];
            }
            for x in hi..nx {
                d[x] += w * s[nx - 1];
            }
        }
    }
}

/// Convolution along y (`axis == 1`) or z (`axis == 0`): whole rows or planes
/// are accumulated at once, with clamped indices at the borders.
fn smooth_plane_axis(src: &[f32], dst: &mut [f32], dims: [usize; 3], kernel: &[f32], axis: usize) {
    let [nz, ny, nx] = dims;
    let radius = kernel.len() / 2;
    dst.fill(0.0);
    if axis == 1 {
        for iz in 0..nz {
            for iy in 0..ny {
                let d_start = (iz * ny + iy) * nx;
                for (k, &w) in kernel.iter().enumerate() {
                    let sy = (iy as isize + k as isize - radius as isize)
                        .clamp(0, ny as isize - 1) as usize;
                    let s_start = (iz * ny + sy) * nx;
                    let (s, d) = (&src[s_start..s_start + nx], &mut dst[d_start..d_start + nx]);
                    for x in 0..nx {
                        d[x] += w * s[x];
                    }
                }
            }
        }
    } else {
        let plane = ny * nx;
        for iz in 0..nz {
            let d_start = iz * plane;
            for (k, &w) in kernel.iter().enumerate() {
                let sz =
                    (iz as isize + k as isize - radius as isize).clamp(0, nz as isize - 1) as usize;
                let s_start = sz * plane;
                let (s, d) = (
                    &src[s_start..s_start + plane],
                    &mut dst[d_start..d_start + plane],
                );
                for x in 0..plane {
                    d[x] += w * s[x];
                }
            }
        }
    }
}

/// 6-point discrete Laplacian with replicated borders (zero contribution
/// across each face).
pub(crate) fn laplacian(src: &[f32], dims: [usize; 3]) -> Vec<f32> {
    let [nz, ny, nx] = dims;
    let plane = ny * nx;
    let mut out = vec![0.0f32; src.len()];
    for iz in 0..nz {
        let zm = iz.saturating_sub(1);
        let zp = (iz + 1).min(nz - 1);
        for iy in 0..ny {
            let ym = iy.saturating_sub(1);
            let yp = (iy + 1).min(ny - 1);
            let row = iz * plane + iy * nx;
            for x in 0..nx {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(nx - 1);
                out[row + x] = src[iz * plane + ym * nx + x]
                    + src[iz * plane + yp * nx + x]
                    + src[zm * plane + iy * nx + x]
                    + src[zp * plane + iy * nx + x]
                    + src[row + xm]
                    + src[row + xp]
                    - 6.0 * src[row + x];
            }
        }
    }
    out
}

/// Detects 3D+scale local maxima above the score threshold, greedily
/// suppresses neighbors within the NMS radius by descending score, truncates
/// to the per-exam budget and returns candidates sorted by descending score.
pub fn detect_candidates(v: &Volume, p: &DetectorParams) -> Result<Vec<Candidate>> {
    let pitch = isotropic_pitch(v)?;
    p.validate(pitch)?;

    let responses: Vec<Vec<f32>> = p
        .scales_mm
        .iter()
        .map(|&s| log_response(v, s))
        .collect::<Result<_>>()?;

    let maxima = scale_space_maxima(&responses, [v.nz(), v.ny(), v.nx()], p.score_threshold);

    let mut order: Vec<usize> = (0..maxima.len()).collect();
    order.sort_by(|&a, &b| {
        maxima[b]
            .score
            .partial_cmp(&maxima[a].score)
            .expect("finite scores")
            .then(maxima[a].idx.cmp(&maxima[b].idx))
    });

    let accepted = greedy_nms(&maxima, &order, p.nms_radius_mm / pitch);

    let mut out = Vec::with_capacity(accepted.len().min(p.max_candidates_per_exam));
    for &i in accepted.iter().take(p.max_candidates_per_exam) {
        let m = &maxima[i];
        out.push(Candidate {
            exam_id: v.exam_id.clone(),
            pos_mm: v.index_to_world(m.pos[0], m.pos[1], m.pos[2]),
            scale_mm: p.scales_mm[m.scale],
            score: m.score as f64,
        });
    }
    Ok(out)
}

struct Maximum {
    idx: usize,
    scale: usize,
    /// `[ix, iy, iz]`
    pos: [usize; 3],
    score: f32,
}

/// Strict local maxima over the 26 spatial neighbors, per scale. One-voxel
/// spatial borders are skipped.
///
/// Scale selection happens in the joint NMS rather than by comparing
/// adjacent scale planes voxelwise: on textured backgrounds the largest
/// scale accumulates enough smooth-structure response to veto genuine
/// small-blob maxima, which caps the lesion capture rate well below target.
/// Per-scale maxima keep every blob reachable, and NMS keeps the strongest
/// scale at each location.
fn scale_space_maxima(responses: &[Vec<f32>], dims: [usize; 3], threshold: f64) -> Vec<Maximum> {
    let [nz, ny, nx] = dims;
    let mut out = Vec::new();
    if nz < 3 || ny < 3 || nx < 3 {
        return out;
    }
    let plane = ny * nx;
    let offsets: Vec<i64> = {
        let mut o = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dz != 0 || dy != 0 || dx != 0 {
                        o.push(dz * plane as i64 + dy * nx as i64 + dx);
                    }
                }
            }
        }
        o
    };
    for (si, resp) in responses.iter().enumerate() {
        for iz in 1..nz - 1 {
            for iy in 1..ny - 1 {
                'voxel: for ix in 1..nx - 1 {
                    let idx = iz * plane + iy * nx + ix;
                    let r = resp[idx];
                    if !(r as f64 > threshold) {
                        continue;
                    }
                    for &off in &offsets {
                        if !(r > resp[(idx as i64 + off) as usize]) {
                            continue 'voxel;
                        }
                    }
                    out.push(Maximum {
                        idx,
                        scale: si,
                        pos: [ix, iy, iz],
                        score: r,
                    });
                }
            }
        }
    }
    out
}

/// Greedy NMS over pre-sorted indices with a uniform-grid spatial hash;
/// radius in voxels. Accepted points have pairwise distance > radius.
fn greedy_nms(maxima: &[Maximum], order: &[usize], radius_vox: f64) -> Vec<usize> {
    let cell = radius_vox.max(1.0);
    let r2 = radius_vox * radius_vox;
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let key = |p: [usize; 3]| {
        (
            (p[0] as f64 / cell) as i64,
            (p[1] as f64 / cell) as i64,
            (p[2] as f64 / cell) as i64,
        )
    };
    let mut accepted = Vec::new();
    'next: for &i in order {
        let p = maxima[i].pos;
        let (cx, cy, cz) = key(p);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            let q = maxima[j].pos;
                            let d2 = (p[0] as f64 - q[0] as f64).powi(2)
                                + (p[1] as f64 - q[1] as f64).powi(2)
                                + (p[2] as f64 - q[2] as f64).powi(2);
                            if d2 <= r2 {
                                continue 'next;
                            }
                        }
                    }
                }
            }
        }
        grid.entry((cx, cy, cz)).or_default().push(i);
        accepted.push(i);
    }
    accepted
}

/// Tuning outcome: concrete detector parameters plus capture diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningReport {
    pub params: DetectorParams,
    pub target_capture: f64,
    /// Fraction of lesions with a candidate within the match radius at the
    /// tuned threshold.
    pub achieved_capture: f64,
    /// Geometric ceiling: fraction of lesions reachable at any threshold.
    pub capturable_fraction: f64,
    pub mean_candidates_per_exam: f64,
    pub total_lesions: usize,
}

/// Sweeps the score threshold so that at least `target_capture` of the
/// corpus lesions keep a candidate within 1.5 mm, subject to the per-exam
/// budget. If the target is geometrically unreachable the best achievable
/// threshold is returned, with diagnostics distinguishing the case.
pub fn tune_detector(
    corpus: &[(&Volume, &Annotation)],
    base: &DetectorParams,
    target_capture: f64,
    budget: usize,
) -> Result<TuningReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("tune_detector corpus".into()));
    }
    if !(0.0 < target_capture && target_capture <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target_capture must be in (0, 1], got {target_capture}"
        )));
    }
    let mut open = base.clone();
    open.score_threshold = f64::NEG_INFINITY;
    open.max_candidates_per_exam = budget;

    let per_exam: Vec<Vec<Candidate>> = corpus
        .par_iter()
        .map(|(v, _)| detect_candidates(v, &open))
        .collect::<Result<_>>()?;

    // Best candidate score within the match radius, per lesion.
    let mut best: Vec<f64> = Vec::new();
    for ((_, ann), cands) in corpus.iter().zip(&per_exam) {
        for lesion in &ann.lesions {
            let b = cands
                .iter()
                .filter(|c| dist2(c.pos_mm, lesion.center_mm) <= MATCH_RADIUS_MM * MATCH_RADIUS_MM)
                .map(|c| c.score)
                .fold(f64::NEG_INFINITY, f64::max);
            best.push(b);
        }
    }
    let total = best.len();
    if total == 0 {
        return Err(Error::EmptyInput("corpus has no lesions".into()));
    }

    let mut sorted = best.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("no NaN scores"));
    let k = (target_capture * total as f64).ceil() as usize;
    let kth = sorted[k.clamp(1, total) - 1];
    let capturable = sorted.iter().filter(|s| s.is_finite()).count();

    // Largest threshold keeping >= k lesions strictly above it; if the k-th
    // lesion is unreachable, fall back to the lowest finite best score.
    let threshold = if kth.is_finite() {
        kth.next_down()
    } else if capturable > 0 {
        sorted[capturable - 1].next_down()
    } else {
        return Err(Error::NoCapturableLesion);
    };

    let achieved = best.iter().filter(|&&b| b > threshold).count() as f64 / total as f64;
    let mean_cands = per_exam
        .iter()
        .map(|c| c.iter().filter(|c| c.score > threshold).count() as f64)
        .sum::<f64>()
        / per_exam.len() as f64;

    let mut params = base.clone();
    params.score_threshold = threshold;
    params.max_candidates_per_exam = budget;
    Ok(TuningReport {
        params,
        target_capture,
        achieved_capture: achieved,
        capturable_fraction: capturable as f64 / total as f64,
        mean_candidates_per_exam: mean_cands,
        total_lesions: total,
    })
}

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// FWHM-to-sigma factor for a Gaussian profile.
    pub(crate) const FWHM_TO_SIGMA: f64 = 2.354_820_045;

    pub(crate) fn blob_volume(n: usize, centers: &[([f64; 3], f64, f32)]) -> Volume {
        // centers: (position mm, sigma mm, amplitude)
        let mut data = vec![0.0f32; n * n * n];
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    let p = [ix as f64, iy as f64, iz as f64];
                    let mut v = 0.0f64;
                    for &(c, s, a) in centers {
                        v += a as f64 * (-dist2(p, c) / (2.0 * s * s)).exp();
                    }
                    data[(iz * n + iy) * n + ix] = v as f32;
                }
            }
        }
        Volume::new([n, n, n], [1.0; 3], [0.0; 3], data, "e0", "p0").unwrap()
    }

    #[test]
    fn constant_volume_has_zero_response_and_no_candidates() {
        let v = Volume::new(
            [24, 24, 24],
            [1.0; 3],
            [0.0; 3],
            vec![0.5; 24 * 24 * 24],
            "e",
            "p",
        )
        .unwrap();
        let r = log_response(&v, 2.0).unwrap();
        assert!(r.iter().all(|&x| x.abs() < 1e-5));

        let p = DetectorParams {
            score_threshold: 1e-4,
            ..Default::default()
        };
        assert!(detect_candidates(&v, &p).unwrap().is_empty());
    }

    #[test]
    fn response_is_linear_in_intensity() {
        let v = blob_volume(32, &[([16.0, 16.0, 16.0], 2.5, 0.4)]);
        let scaled_data: Vec<f32> = v.data().iter().map(|x| x * 2.5).collect();
        let scaled = Volume::new(v.dims(), v.spacing_mm(), v.origin_mm(), scaled_data, "e", "p")
            .unwrap();
        let r1 = log_response(&v, 2.0).unwrap();
        let r2 = log_response(&scaled, 2.0).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert!((2.5 * a - b).abs() <= 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn rejects_undersampled_sigma() {
        let v = blob_volume(16, &[]);
        assert!(log_response(&v, 0.4).is_err());
        assert!(log_response(&v, 0.5).is_ok());
    }

    #[test]
    fn blob_center_response_peaks_at_matching_scale() {
        // Gaussian blob of sigma0 = 3 mm; center response across
        // {1.5, 2, 3, 4.5} mm must be maximized at 3 mm.
        let n = 49;
        let c = 24.0;
        let v = blob_volume(n, &[([c, c, c], 3.0, 0.5)]);
        let scales = [1.5, 2.0, 3.0, 4.5];
        let center_idx = (24 * n + 24) * n + 24;
        let responses: Vec<f32> = scales
            .iter()
            .map(|&s| log_response(&v, s).unwrap()[center_idx])
            .collect();
        let argmax = responses
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2, "responses {responses:?}");
    }

    #[test]
    fn single_sphere_yields_single_top_candidate() {
        // 6 mm diameter = FWHM; flat background. A generic (non-grid-
        // symmetric) center, since exact response ties are not maxima.
        let n = 48;
        let c = [23.3, 23.6, 22.9];
        let sigma = 6.0 / FWHM_TO_SIGMA;
        let v = blob_volume(n, &[(c, sigma, 0.5)]);
        let p = DetectorParams {
            score_threshold: 1e-3,
            ..Default::default()
        };
        let cands = detect_candidates(&v, &p).unwrap();
        assert_eq!(cands.len(), 1, "{cands:?}");
        assert!(dist2(cands[0].pos_mm, c).sqrt() <= 1.5);
    }

    #[test]
    fn two_spheres_yield_two_candidates() {
        let n = 56;
        let sigma = 6.0 / FWHM_TO_SIGMA;
        let a = [17.3, 27.6, 27.2];
        let b = [37.4, 27.8, 27.1];
        let v = blob_volume(n, &[(a, sigma, 0.5), (b, sigma, 0.5)]);
        let p = DetectorParams {
            score_threshold: 1e-3,
            nms_radius_mm: 3.0,
            ..Default::default()
        };
        let cands = detect_candidates(&v, &p).unwrap();
        assert_eq!(cands.len(), 2, "{cands:?}");
        let d0 = dist2(cands[0].pos_mm, a).min(dist2(cands[0].pos_mm, b)).sqrt();
        let d1 = dist2(cands[1].pos_mm, a).min(dist2(cands[1].pos_mm, b)).sqrt();
        assert!(d0 <= 1.5 && d1 <= 1.5);
        assert!(dist2(cands[0].pos_mm, cands[1].pos_mm).sqrt() > 3.0);
    }

    #[test]
    fn nms_respects_pairwise_distance_and_determinism() {
        let n = 40;
        let sigma = 2.0;
        let v = blob_volume(
            n,
            &[
                ([12.0, 12.0, 12.0], sigma, 0.5),
                ([16.0, 12.0, 12.0], sigma, 0.45),
                ([28.0, 26.0, 22.0], sigma, 0.3),
            ],
        );
        let p = DetectorParams {
            score_threshold: 1e-4,
            nms_radius_mm: 5.0,
            ..Default::default()
        };
        let cands = detect_candidates(&v, &p).unwrap();
        for i in 0..cands.len() {
            for j in i + 1..cands.len() {
                assert!(
                    dist2(cands[i].pos_mm, cands[j].pos_mm).sqrt() > 5.0,
                    "{:?} {:?}",
                    cands[i],
                    cands[j]
                );
            }
        }
        assert!(cands.windows(2).all(|w| w[0].score >= w[1].score));
        let again = detect_candidates(&v, &p).unwrap();
        assert_eq!(cands, again);
    }

    #[test]
    fn candidate_count_non_increasing_in_threshold() {
        let n = 40;
        let v = blob_volume(
            n,
            &[
                ([12.0, 12.0, 12.0], 2.0, 0.5),
                ([28.0, 26.0, 22.0], 2.5, 0.3),
                ([20.0, 30.0, 12.0], 1.5, 0.2),
            ],
        );
        let mut prev = usize::MAX;
        for thr in [1e-4, 0.05, 0.2, 0.5, 2.0] {
            let p = DetectorParams {
                score_threshold: thr,
                ..Default::default()
            };
            let n_cands = detect_candidates(&v, &p).unwrap().len();
            assert!(n_cands <= prev);
            prev = n_cands;
        }
    }

    fn small_corpus(n_exams: usize) -> Vec<(Volume, Annotation)> {
        let n = 40;
        (0..n_exams)
            .map(|e| {
                let cx = 12.0 + (e % 3) as f64 * 6.0;
                let centers = [
                    ([cx, 14.0, 14.0], 2.2, 0.4f32),
                    ([28.0, 26.0, 24.0], 1.6, 0.3),
                ];
                let mut v = blob_volume(n, &centers);
                v.exam_id = format!("e{e}");
                let ann = Annotation {
                    exam_id: format!("e{e}"),
                    lesions: centers
                        .iter()
                        .map(|&(c, s, _)| crate::volgrid::Lesion {
                            center_mm: c,
                            diameter_mm: (s * FWHM_TO_SIGMA).min(14.0),
                        })
                        .collect(),
                };
                (v, ann)
            })
            .collect()
    }

    #[test]
    fn tuning_reaches_target_capture() {
        let corpus = small_corpus(6);
        let refs: Vec<(&Volume, &Annotation)> = corpus.iter().map(|(v, a)| (v, a)).collect();
        let report = tune_detector(&refs, &DetectorParams::default(), 0.95, 5000).unwrap();
        assert!(
            report.achieved_capture >= 0.95,
            "achieved {}",
            report.achieved_capture
        );

        // Brute-force check of the capture at the tuned threshold.
        let mut captured = 0usize;
        let mut total = 0usize;
        for (v, ann) in &corpus {
            let cands = detect_candidates(v, &report.params).unwrap();
            for lesion in &ann.lesions {
                total += 1;
                if cands
                    .iter()
                    .any(|c| dist2(c.pos_mm, lesion.center_mm).sqrt() <= MATCH_RADIUS_MM)
                {
                    captured += 1;
                }
            }
        }
        assert_eq!(captured as f64 / total as f64, report.achieved_capture);
    }

    #[test]
    fn tuning_threshold_monotone_in_target() {
        let corpus = small_corpus(5);
        let refs: Vec<(&Volume, &Annotation)> = corpus.iter().map(|(v, a)| (v, a)).collect();
        let base = DetectorParams::default();
        let mut prev = f64::INFINITY;
        for target in [0.5, 0.7, 0.9, 1.0] {
            let report = tune_detector(&refs, &base, target, 5000).unwrap();
            assert!(
                report.params.score_threshold <= prev,
                "threshold rose at target {target}"
            );
            prev = report.params.score_threshold;
        }
    }

    #[test]
    fn tuning_rejects_empty_corpus() {
        assert!(tune_detector(&[], &DetectorParams::default(), 0.9, 100).is_err());
    }
}
