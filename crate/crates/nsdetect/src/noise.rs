//! Data noising for ROIs: elastic deformation, gamma correction, rotation and
//! axis flips, composed in that order. Every stage is deterministic under a
//! seeded rng, and every output stays within [0, 1] and the input shape.

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{trilinear, Roi};

/// Deterministic pseudo-random stream used across the crate. Identical seed
/// and draw order yield identical outputs.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Splits off an independent child stream. Forking per sample keeps batch
/// assembly deterministic regardless of scheduling.
pub fn fork_rng(rng: &mut Rng) -> Rng {
    Rng::seed_from_u64(rng.gen())
}

/// Stable seed derivation for named sub-streams (splitmix64 step).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    pub grid_spacing_mm: f64,
    pub amplitude_mm: f64,
    pub smooth_sigma_mm: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    /// `[lo, hi]` with `0 < lo <= 1 <= hi`.
    pub range: [f64; 2],
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationConfig {
    pub max_angle_deg: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipConfig {
    pub per_axis_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub elastic: ElasticConfig,
    pub gamma: GammaConfig,
    pub rotation: RotationConfig,
    pub flip: FlipConfig,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            elastic: ElasticConfig {
                grid_spacing_mm: 8.0,
                amplitude_mm: 1.5,
                smooth_sigma_mm: 2.0,
                probability: 0.5,
            },
            gamma: GammaConfig {
                range: [0.8, 1.25],
                probability: 0.5,
            },
            rotation: RotationConfig {
                max_angle_deg: 15.0,
                probability: 0.5,
            },
            flip: FlipConfig {
                per_axis_probability: 0.5,
            },
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.elastic.probability,
            self.gamma.probability,
            self.rotation.probability,
            self.flip.per_axis_probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("probability outside [0, 1]".into()));
        }
        if !(self.elastic.amplitude_mm >= 0.0 && self.elastic.amplitude_mm.is_finite()) {
            return Err(Error::InvalidParameter(
                "elastic amplitude must be finite and >= 0".into(),
            ));
        }
        if !(self.elastic.grid_spacing_mm > 0.0 && self.elastic.smooth_sigma_mm > 0.0) {
            return Err(Error::InvalidParameter(
                "elastic grid spacing and smoothing sigma must be positive".into(),
            ));
        }
        let [lo, hi] = self.gamma.range;
        if !(0.0 < lo && lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::InvalidParameter(format!(
                "gamma range must satisfy 0 < lo <= 1 <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(0.0..=180.0).contains(&self.rotation.max_angle_deg) {
            return Err(Error::InvalidParameter(
                "rotation max angle outside [0, 180]".into(),
            ));
        }
        Ok(())
    }

    /// A configuration every stage of which is the identity.
    pub fn disabled() -> Self {
        Self {
            elastic: ElasticConfig {
                grid_spacing_mm: 8.0,
                amplitude_mm: 0.0,
                smooth_sigma_mm: 2.0,
                probability: 0.0,
            },
            gamma: GammaConfig {
                range: [1.0, 1.0],
                probability: 0.0,
            },
            rotation: RotationConfig {
                max_angle_deg: 0.0,
                probability: 0.0,
            },
            flip: FlipConfig {
                per_axis_probability: 0.0,
            },
        }
    }
}

/// Voxel-resolution displacement field over an ROI, in mm (= voxels at 1 mm
/// pitch). Component `c` of the displacement at voxel `(iz, iy, ix)` is
/// `comp[c][(iz*edge + iy)*edge + ix]` with `c` in x, y, z order.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub edge: usize,
    pub comp: [Vec<f32>; 3],
}

impl DisplacementField {
    /// Largest voxelwise displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        let n = self.comp[0].len();
        (0..n)
            .map(|i| {
                let dx = self.comp[0][i] as f64;
                let dy = self.comp[1][i] as f64;
                let dz = self.comp[2][i] as f64;
                (dx * dx + dy * dy + dz * dz).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Draws the coarse control-point field (component uniform in +/-amplitude),
/// Gaussian-smooths it, and trilinearly upsamples to voxel resolution.
///
/// Smoothing and upsampling are both convex averages, so no component ever
/// exceeds the amplitude in magnitude.
pub fn elastic_displacement_field(
    edge: usize,
    cfg: &ElasticConfig,
    rng: &mut Rng,
) -> DisplacementField {
    let spacing = cfg.grid_spacing_mm;
    let ncp = if edge <= 1 {
        2
    } else {
        ((edge - 1) as f64 / spacing).ceil() as usize + 1
    }
    .max(2);
    let amp = cfg.amplitude_mm;

    // Coarse field, one grid per component, drawn in fixed order.
    let mut coarse: [Vec<f32>; 3] = [
        vec![0.0; ncp * ncp * ncp],
        vec![0.0; ncp * ncp * ncp],
        vec![0.0; ncp * ncp * ncp],
    ];
    for grid in coarse.iter_mut() {
        for v in grid.iter_mut() {
            *v = rng.gen_range(-amp..=amp) as f32;
        }
    }

    let sigma_cp = cfg.smooth_sigma_mm / spacing;
    for grid in coarse.iter_mut() {
        smooth_normalized(grid, ncp, sigma_cp);
    }

    let mut comp: [Vec<f32>; 3] = [
        vec![0.0; edge * edge * edge],
        vec![0.0; edge * edge * edge],
        vec![0.0; edge * edge * edge],
    ];
    for (c, out) in comp.iter_mut().enumerate() {
        let mut i = 0;
        for iz in 0..edge {
            let uz = iz as f64 / spacing;
            for iy in 0..edge {
                let uy = iy as f64 / spacing;
                for ix in 0..edge {
                    let ux = ix as f64 / spacing;
                    out[i] = trilinear(&coarse[c], [ncp, ncp, ncp], [uz, uy, ux], 0.0);
                    i += 1;
                }
            }
        }
    }
    DisplacementField { edge, comp }
}

/// Separable Gaussian smoothing on a cubic grid with border renormalization,
/// so the result stays a convex combination of the inputs.
fn smooth_normalized(grid: &mut [f32], n: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();

    let mut tmp = vec![0.0f32; grid.len()];
    // axis: 0 = z, 1 = y, 2 = x in storage order
    for axis in 0..3 {
        let stride: isize = match axis {
            0 => (n * n) as isize,
            1 => n as isize,
            _ => 1,
        };
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    let along = match axis {
                        0 => iz,
                        1 => iy,
                        _ => ix,
                    } as isize;
                    let base = (iz * n + iy) * n + ix;
                    let mut acc = 0.0f64;
                    let mut wsum = 0.0f64;
                    for (k, &w) in kernel.iter().enumerate() {
                        let j = along + k as isize - radius;
                        if j < 0 || j >= n as isize {
                            continue;
                        }
                        let idx = (base as isize + (j - along) * stride) as usize;
                        acc += w * grid[idx] as f64;
                        wsum += w;
                    }
                    tmp[base] = (acc / wsum) as f32;
                }
            }
        }
        grid.copy_from_slice(&tmp);
    }
}

/// Backward-warps the ROI through a random smooth displacement field.
/// Outputs are 0-padded outside the cube and clamped to [0, 1].
pub fn elastic_deform(roi: &Roi, cfg: &ElasticConfig, rng: &mut Rng) -> Roi {
    let field = elastic_displacement_field(roi.edge, cfg, rng);
    warp(roi, &field)
}

fn warp(roi: &Roi, field: &DisplacementField) -> Roi {
    let e = roi.edge;
    let mut out = roi.clone();
    let mut i = 0;
    for iz in 0..e {
        for iy in 0..e {
            for ix in 0..e {
                let ux = ix as f64 + field.comp[0][i] as f64;
                let uy = iy as f64 + field.comp[1][i] as f64;
                let uz = iz as f64 + field.comp[2][i] as f64;
                out.data[i] = trilinear(&roi.data, [e, e, e], [uz, uy, ux], 0.0).clamp(0.0, 1.0);
                i += 1;
            }
        }
    }
    out
}

/// Per-voxel `v -> v^gamma`. Requires values in [0, 1]; `gamma == 1` is a
/// bit-exact identity.
pub fn gamma_correct(roi: &Roi, gamma: f64) -> Result<Roi> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(roi.clone());
    }
    let g = gamma as f32;
    let mut out = roi.clone();
    for v in out.data.iter_mut() {
        *v = v.powf(g);
    }
    Ok(out)
}

/// Rotation about the cube center with trilinear resampling and 0 padding.
/// The axis must be unit-length within 1e-6; `angle == 0` short-circuits to a
/// bit-exact copy.
pub fn rotate(roi: &Roi, axis: [f64; 3], angle_deg: f64) -> Result<Roi> {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!(
            "rotation axis must be a unit vector, |axis| = {norm}"
        )));
    }
    if angle_deg == 0.0 {
        return Ok(roi.clone());
    }

    // Backward map: sample the input at R(-angle) * (p - c) + c.
    let m = rotation_matrix(axis, -angle_deg.to_radians());
    let e = roi.edge;
    let c = (e as f64 - 1.0) / 2.0;
    let mut out = roi.clone();
    let mut i = 0;
    for iz in 0..e {
        let pz = iz as f64 - c;
        for iy in 0..e {
            let py = iy as f64 - c;
            for ix in 0..e {
                let px = ix as f64 - c;
                let sx = m[0][0] * px + m[0][1] * py + m[0][2] * pz + c;
                let sy = m[1][0] * px + m[1][1] * py + m[1][2] * pz + c;
                let sz = m[2][0] * px + m[2][1] * py + m[2][2] * pz + c;
                out.data[i] = trilinear(&roi.data, [e, e, e], [sz, sy, sx], 0.0).clamp(0.0, 1.0);
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Rodrigues rotation matrix for a unit axis and angle in radians.
fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    X,
    Y,
    Z,
}

/// Exact index reversal along one axis.
pub fn flip(roi: &Roi, axis: FlipAxis) -> Roi {
    let e = roi.edge;
    let mut out = roi.clone();
    for iz in 0..e {
        for iy in 0..e {
            for ix in 0..e {
                let (sz, sy, sx) = match axis {
                    FlipAxis::X => (iz, iy, e - 1 - ix),
                    FlipAxis::Y => (iz, e - 1 - iy, ix),
                    FlipAxis::Z => (e - 1 - iz, iy, ix),
                };
                *out.at_mut(iz, iy, ix) = roi.at(sz, sy, sx);
            }
        }
    }
    out
}

/// Applies elastic deformation, gamma correction, rotation and flips in that
/// order, each gated by its configured probability. Deterministic under a
/// fixed rng.
pub fn noise_pipeline(roi: &Roi, cfg: &NoiseConfig, rng: &mut Rng) -> Roi {
    let mut out = roi.clone();

    if rng.gen_range(0.0..1.0) < cfg.elastic.probability {
        out = elastic_deform(&out, &cfg.elastic, rng);
    }
    if rng.gen_range(0.0..1.0) < cfg.gamma.probability {
        let [lo, hi] = cfg.gamma.range;
        let gamma = rng.gen_range(lo..=hi);
        out = gamma_correct(&out, gamma).expect("validated gamma range");
    }
    if rng.gen_range(0.0..1.0) < cfg.rotation.probability {
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let max = cfg.rotation.max_angle_deg;
        let angle = rng.gen_range(-max..=max);
        out = rotate(&out, axis, angle).expect("unit axis");
    }
    for axis in [FlipAxis::X, FlipAxis::Y, FlipAxis::Z] {
        if rng.gen_range(0.0..1.0) < cfg.flip.per_axis_probability {
            out = flip(&out, axis);
        }
    }
    out
}
