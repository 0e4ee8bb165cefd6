//! Volumetric grid types, isotropic resampling, intensity normalization and
//! ROI extraction.
//!
//! Conventions used throughout the crate:
//! - grid storage is z-major: `idx = (iz * ny + iy) * nx + ix`
//! - world coordinates, spacings and origins are `[x, y, z]` in millimetres
//! - a voxel with index `(ix, iy, iz)` is centered at
//!   `origin + [ix*sx, iy*sy, iz*sz]`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D scalar grid with per-axis spacing and exam/patient identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    data: Vec<f32>,
    pub exam_id: String,
    pub patient_id: String,
}

impl Volume {
    /// Builds a volume, validating spacing, dimensions and sample finiteness.
    ///
    /// `dims` is `[nz, ny, nx]` (storage order); `spacing_mm` and `origin_mm`
    /// are `[x, y, z]`.
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        data: Vec<f32>,
        exam_id: impl Into<String>,
        patient_id: impl Into<String>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "grid dimensions must be >= 1 per axis, got {dims:?}"
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing components must be positive, got {spacing_mm:?}"
            )));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume("origin must be finite".into()));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims:?} ({expected})",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite sample".into()));
        }
        Ok(Self {
            dims,
            spacing_mm,
            origin_mm,
            data,
            exam_id: exam_id.into(),
            patient_id: patient_id.into(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn nz(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims[1]
    }

    pub fn nx(&self) -> usize {
        self.dims[2]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, iz: usize, iy: usize, ix: usize) -> f32 {
        self.data[(iz * self.dims[1] + iy) * self.dims[2] + ix]
    }

    /// World position of the voxel center at `(ix, iy, iz)`.
    pub fn index_to_world(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + ix as f64 * self.spacing_mm[0],
            self.origin_mm[1] + iy as f64 * self.spacing_mm[1],
            self.origin_mm[2] + iz as f64 * self.spacing_mm[2],
        ]
    }

    /// Continuous grid coordinates `[ux, uy, uz]` of a world point.
    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin_mm[0]) / self.spacing_mm[0],
            (p[1] - self.origin_mm[1]) / self.spacing_mm[1],
            (p[2] - self.origin_mm[2]) / self.spacing_mm[2],
        ]
    }

    /// True when the world point lies within the voxel-center bounding box.
    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        let u = self.world_to_index(p);
        u[0] >= 0.0
            && u[0] <= (self.nx() - 1) as f64
            && u[1] >= 0.0
            && u[1] <= (self.ny() - 1) as f64
            && u[2] >= 0.0
            && u[2] <= (self.nz() - 1) as f64
    }

    /// Trilinear sample at a world point; positions outside the grid read as
    /// `pad`.
    pub fn sample_world(&self, p: [f64; 3], pad: f32) -> f32 {
        let u = self.world_to_index(p);
        self.sample_index(u, pad)
    }

    /// Trilinear sample at continuous grid coordinates `[ux, uy, uz]`.
    pub fn sample_index(&self, u: [f64; 3], pad: f32) -> f32 {
        trilinear(
            &self.data,
            [self.nz(), self.ny(), self.nx()],
            [u[2], u[1], u[0]],
            pad,
        )
    }
}

/// Trilinear interpolation on a z-major grid at continuous coordinates given
/// in storage order `[uz, uy, ux]`; out-of-range corners read as `pad`.
pub(crate) fn trilinear(data: &[f32], dims: [usize; 3], u: [f64; 3], pad: f32) -> f32 {
    let [nz, ny, nx] = dims;
    let fz = u[0].floor();
    let fy = u[1].floor();
    let fx = u[2].floor();
    let tz = (u[0] - fz) as f32;
    let ty = (u[1] - fy) as f32;
    let tx = (u[2] - fx) as f32;
    let iz = fz as isize;
    let iy = fy as isize;
    let ix = fx as isize;

    let fetch = |z: isize, y: isize, x: isize| -> f32 {
        if z < 0 || y < 0 || x < 0 || z >= nz as isize || y >= ny as isize || x >= nx as isize {
            pad
        } else {
            data[(z as usize * ny + y as usize) * nx + x as usize]
        }
    };

    let c000 = fetch(iz, iy, ix);
    let c001 = fetch(iz, iy, ix + 1);
    let c010 = fetch(iz, iy + 1, ix);
    let c011 = fetch(iz, iy + 1, ix + 1);
    let c100 = fetch(iz + 1, iy, ix);
    let c101 = fetch(iz + 1, iy, ix + 1);
    let c110 = fetch(iz + 1, iy + 1, ix);
    let c111 = fetch(iz + 1, iy + 1, ix + 1);

    let c00 = c000 + (c001 - c000) * tx;
    let c01 = c010 + (c011 - c010) * tx;
    let c10 = c100 + (c101 - c100) * tx;
    let c11 = c110 + (c111 - c110) * tx;
    let c0 = c00 + (c01 - c00) * ty;
    let c1 = c10 + (c11 - c10) * ty;
    c0 + (c1 - c0) * tz
}

/// A single annotated lesion: world-space center and diameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
}

/// All lesion annotations for one exam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub exam_id: String,
    pub lesions: Vec<Lesion>,
}

impl Annotation {
    /// Checks the inclusion criteria: diameters positive and below 15 mm,
    /// centers inside the volume bounds.
    pub fn validate(&self, volume: &Volume) -> Result<()> {
        for (i, lesion) in self.lesions.iter().enumerate() {
            if !(lesion.diameter_mm > 0.0 && lesion.diameter_mm < 15.0) {
                return Err(Error::InvalidParameter(format!(
                    "lesion {i} of exam {}: diameter {} mm outside (0, 15)",
                    self.exam_id, lesion.diameter_mm
                )));
            }
            if !volume.contains_world(lesion.center_mm) {
                return Err(Error::InvalidParameter(format!(
                    "lesion {i} of exam {}: center {:?} outside volume bounds",
                    self.exam_id, lesion.center_mm
                )));
            }
        }
        Ok(())
    }
}

/// Cubic isotropic patch at 1 mm/voxel, the classifier input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub edge: usize,
    /// z-major, `edge^3` values in `[0, 1]`.
    pub data: Vec<f32>,
    pub center_mm: [f64; 3],
    pub source_exam: String,
}

impl Roi {
    #[inline]
    pub fn at(&self, iz: usize, iy: usize, ix: usize) -> f32 {
        self.data[(iz * self.edge + iy) * self.edge + ix]
    }

    #[inline]
    pub fn at_mut(&mut self, iz: usize, iy: usize, ix: usize) -> &mut f32 {
        &mut self.data[(iz * self.edge + iy) * self.edge + ix]
    }
}

/// Robust [0, 1] rescaling: affine map of the p1..p99 percentile range with
/// clamping. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let (p1, p99) = robust_range(v.data());
    let mut out = v.clone();
    if p99 - p1 <= f32::EPSILON * p99.abs().max(p1.abs()).max(1.0) {
        out.data.iter_mut().for_each(|x| *x = 0.0);
        return Ok(out);
    }
    let scale = 1.0 / (p99 - p1);
    for x in out.data.iter_mut() {
        *x = ((*x - p1) * scale).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// (p1, p99) of the samples, with linear interpolation between order
/// statistics.
fn robust_range(data: &[f32]) -> (f32, f32) {
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    (percentile(&sorted, 0.01), percentile(&sorted, 0.99))
}

/// Percentile of pre-sorted data: rank `p * (n - 1)` with linear
/// interpolation.
pub fn percentile(sorted: &[f32], p: f64) -> f32 {
    assert!(!sorted.is_empty());
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let t = (h - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

/// Resamples onto an isotropic grid of pitch `target_mm` with trilinear
/// interpolation. Output dims are `round(dim * spacing / target)` per axis;
/// the origin is preserved. Already-isotropic input at the target pitch is
/// returned unchanged.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "target spacing must be positive, got {target_mm}"
        )));
    }
    let s = v.spacing_mm();
    if s == [target_mm; 3] {
        return Ok(v.clone());
    }
    let out_nx = ((v.nx() as f64 * s[0] / target_mm).round() as usize).max(1);
    let out_ny = ((v.ny() as f64 * s[1] / target_mm).round() as usize).max(1);
    let out_nz = ((v.nz() as f64 * s[2] / target_mm).round() as usize).max(1);

    let mut data = vec![0.0f32; out_nz * out_ny * out_nx];
    for iz in 0..out_nz {
        let uz = iz as f64 * target_mm / s[2];
        for iy in 0..out_ny {
            let uy = iy as f64 * target_mm / s[1];
            for ix in 0..out_nx {
                let ux = ix as f64 * target_mm / s[0];
                data[(iz * out_ny + iy) * out_nx + ix] = v.sample_index([ux, uy, uz], 0.0);
            }
        }
    }
    Volume::new(
        [out_nz, out_ny, out_nx],
        [target_mm; 3],
        v.origin_mm(),
        data,
        v.exam_id.clone(),
        v.patient_id.clone(),
    )
}

pub const DEFAULT_ROI_EDGE_MM: f64 = 16.0;

/// Extracts a cubic ROI of edge `edge_mm` at 1 mm pitch, trilinearly sampled
/// and centered on `center_mm`; samples outside the volume read as 0. Sample
/// positions are symmetric about the center. The input is expected to be
/// normalized; outputs are clamped to [0, 1].
pub fn extract_roi(v: &Volume, center_mm: [f64; 3], edge_mm: f64) -> Roi {
    let edge = (edge_mm / 1.0).round().max(1.0) as usize;
    let half = (edge as f64 - 1.0) / 2.0;
    let mut data = vec![0.0f32; edge * edge * edge];
    let mut i = 0;
    for iz in 0..edge {
        let pz = center_mm[2] + (iz as f64 - half);
        for iy in 0..edge {
            let py = center_mm[1] + (iy as f64 - half);
            for ix in 0..edge {
                let px = center_mm[0] + (ix as f64 - half);
                data[i] = v.sample_world([px, py, pz], 0.0).clamp(0.0, 1.0);
                i += 1;
            }
        }
    }
    Roi {
        edge,
        data,
        center_mm,
        source_exam: v.exam_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(n: usize) -> Volume {
        let data: Vec<f32> = (0..n * n * n).map(|i| i as f32).collect();
        Volume::new([n, n, n], [1.0; 3], [0.0; 3], data, "e0", "p0").unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume::new([0, 4, 4], [1.0; 3], [0.0; 3], vec![], "e", "p").is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], [0.0; 3], vec![1.0], "e", "p").is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![f32::NAN], "e", "p").is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 7], "e", "p").is_err());
    }

    #[test]
    fn normalize_constant_maps_to_zero() {
        let v = Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![7.0; 8], "e", "p").unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_two_value_maps_to_endpoints() {
        let mut data = vec![0.0f32; 64];
        for x in data.iter_mut().skip(32) {
            *x = 100.0;
        }
        let v = Volume::new([4, 4, 4], [1.0; 3], [0.0; 3], data, "e", "p").unwrap();
        let n = normalize_intensity(&v).unwrap();
        for (i, &x) in n.data().iter().enumerate() {
            let expected = if i < 32 { 0.0 } else { 1.0 };
            assert_eq!(x, expected, "sample {i}");
        }
    }

    #[test]
    fn normalize_ramp_matches_percentile_oracle() {
        let n = 10;
        let v = ramp_volume(n);
        let normalized = normalize_intensity(&v).unwrap();

        // Independent sort-based oracle.
        let mut sorted = v.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p1 = percentile(&sorted, 0.01);
        let p99 = percentile(&sorted, 0.99);
        for (raw, got) in v.data().iter().zip(normalized.data()) {
            let expected = ((raw - p1) / (p99 - p1)).clamp(0.0, 1.0);
            assert!((got - expected).abs() <= 1e-6, "{got} vs {expected}");
        }
        assert!(normalized.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn normalize_idempotent_on_spanning_data() {
        // Data whose p1 is exactly 0 and p99 exactly 1: 5% zeros, 5% ones,
        // the rest strictly inside (0, 1).
        let n = 12;
        let total = n * n * n;
        let data: Vec<f32> = (0..total)
            .map(|i| {
                let t = i as f32 / (total - 1) as f32;
                if t < 0.05 {
                    0.0
                } else if t > 0.95 {
                    1.0
                } else {
                    (t - 0.05) / 0.9
                }
            })
            .collect();
        let v = Volume::new([n, n, n], [1.0; 3], [0.0; 3], data, "e", "p").unwrap();
        let once = normalize_intensity(&v).unwrap();
        for (a, b) in v.data().iter().zip(once.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        let twice = normalize_intensity(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let v = ramp_volume(8);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(v, r);
    }

    #[test]
    fn resample_dims_follow_spacing() {
        // dims [nz, ny, nx] = [32, 64, 64] with spacing [x, y, z] = [0.5, 0.5, 1.0].
        let dims = [32usize, 64, 64];
        let data = vec![0.25f32; dims[0] * dims[1] * dims[2]];
        let v = Volume::new(dims, [0.5, 0.5, 1.0], [0.0; 3], data, "e", "p").unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [32, 32, 32]);
        assert_eq!(r.spacing_mm(), [1.0; 3]);
    }

    #[test]
    fn resample_reproduces_linear_field() {
        // Linear-in-x intensity: trilinear interpolation is exact on it.
        let dims = [8usize, 8, 16];
        let spacing = [0.5f64, 1.0, 1.0];
        let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
        for iz in 0..dims[0] {
            for iy in 0..dims[1] {
                for ix in 0..dims[2] {
                    let x_mm = ix as f64 * spacing[0];
                    data[(iz * dims[1] + iy) * dims[2] + ix] = (3.0 + 2.0 * x_mm) as f32;
                }
            }
        }
        let v = Volume::new(dims, spacing, [0.0; 3], data, "e", "p").unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        for iz in 0..r.nz() {
            for iy in 0..r.ny() {
                for ix in 0..r.nx() {
                    let [x_mm, _, _] = r.index_to_world(ix, iy, iz);
                    if x_mm <= (dims[2] - 1) as f64 * spacing[0] {
                        let expected = (3.0 + 2.0 * x_mm) as f32;
                        assert!(
                            (r.at(iz, iy, ix) - expected).abs() <= 1e-5,
                            "at ({ix},{iy},{iz}): {} vs {expected}",
                            r.at(iz, iy, ix)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn roi_interior_equals_index_slice() {
        let v = ramp_volume(32);
        // Voxel-center aligned: offsets from the center land on integer indices.
        let center = [15.5, 15.5, 15.5];
        let roi = extract_roi(&v, center, 16.0);
        assert_eq!(roi.edge, 16);
        for iz in 0..16 {
            for iy in 0..16 {
                for ix in 0..16 {
                    let direct = v.at(iz + 8, iy + 8, ix + 8).clamp(0.0, 1.0);
                    assert_eq!(roi.at(iz, iy, ix), direct);
                }
            }
        }
    }

    #[test]
    fn roi_pads_outside_with_zero() {
        let n = 24;
        let v = Volume::new(
            [n, n, n],
            [1.0; 3],
            [0.0; 3],
            vec![0.5f32; n * n * n],
            "e",
            "p",
        )
        .unwrap();
        // Center 2 mm outside the x = 0 face.
        let center = [-2.0, 12.0, 12.0];
        let roi = extract_roi(&v, center, 16.0);

        // Brute-force per-voxel sampler.
        let half = 7.5;
        for iz in 0..16 {
            for iy in 0..16 {
                for ix in 0..16 {
                    let p = [
                        center[0] + ix as f64 - half,
                        center[1] + iy as f64 - half,
                        center[2] + iz as f64 - half,
                    ];
                    let expected = v.sample_world(p, 0.0).clamp(0.0, 1.0);
                    assert_eq!(roi.at(iz, iy, ix), expected);
                }
            }
        }
        // The exterior slab is fully padded.
        assert_eq!(roi.at(8, 8, 0), 0.0);
        assert_eq!(roi.at(8, 8, 15), 0.5);
    }

    #[test]
    fn roi_constant_volume_is_constant_inside() {
        let n = 40;
        let v = Volume::new(
            [n, n, n],
            [1.0; 3],
            [0.0; 3],
            vec![0.5f32; n * n * n],
            "e",
            "p",
        )
        .unwrap();
        let roi = extract_roi(&v, [20.0, 20.0, 20.0], 16.0);
        assert!(roi.data.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn roi_translation_consistency() {
        let v = ramp_volume(32);
        let a = extract_roi(&v, [12.25, 13.75, 14.5], 8.0);
        let b = extract_roi(&v, [15.25, 13.75, 14.5], 8.0);
        // Shift of +3 mm in x moves the window by +3 voxels, exactly.
        for iz in 0..8 {
            for iy in 0..8 {
                for ix in 0..5 {
                    assert_eq!(a.at(iz, iy, ix + 3), b.at(iz, iy, ix));
                }
            }
        }
    }

    #[test]
    fn annotation_validation() {
        let v = ramp_volume(16);
        let good = Annotation {
            exam_id: "e0".into(),
            lesions: vec![Lesion {
                center_mm: [8.0, 8.0, 8.0],
                diameter_mm: 5.0,
            }],
        };
        assert!(good.validate(&v).is_ok());

        let too_big = Annotation {
            exam_id: "e0".into(),
            lesions: vec![Lesion {
                center_mm: [8.0, 8.0, 8.0],
                diameter_mm: 15.0,
            }],
        };
        assert!(too_big.validate(&v).is_err());

        let outside = Annotation {
            exam_id: "e0".into(),
            lesions: vec![Lesion {
                center_mm: [99.0, 8.0, 8.0],
                diameter_mm: 5.0,
            }],
        };
        assert!(outside.validate(&v).is_err());
    }
}
