//! On-disk persistence: volumes (JSON header + raw little-endian f32
//! payload with CRC32), annotations (JSON), candidate lists and FROC curves
//! (CSV). Every round trip is lossless; corrupted or truncated payloads are
//! reported as distinct errors.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::froc::{FrocCurve, FrocPoint};
use crate::logdet::Candidate;
use crate::volgrid::{Annotation, Lesion, Volume};

pub use crate::cropnet::checkpoint::{load_checkpoint, save_checkpoint};

pub const VOLUME_FORMAT_VERSION: u32 = 1;

/// `header.json` next to `data.raw`. Dims are in storage order (z, y, x);
/// spacing and origin are world order (x, y, z).
#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    format_version: u32,
    dims_zyx: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    exam_id: String,
    patient_id: String,
    payload_crc32: u32,
}

/// Writes `header.json` and `data.raw` (little-endian f32, z-major) into
/// `dir`, creating it if needed.
pub fn save_volume(v: &Volume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    let header = VolumeHeader {
        format_version: VOLUME_FORMAT_VERSION,
        dims_zyx: v.dims(),
        spacing_mm: v.spacing_mm(),
        origin_mm: v.origin_mm(),
        exam_id: v.exam_id.clone(),
        patient_id: v.patient_id.clone(),
        payload_crc32: crc32fast::hash(&payload),
    };
    fs::write(dir.join("header.json"), serde_json::to_vec_pretty(&header)?)?;
    fs::write(dir.join("data.raw"), payload)?;
    Ok(())
}

pub fn load_volume(dir: &Path) -> Result<Volume> {
    let header: VolumeHeader =
        serde_json::from_slice(&fs::read(dir.join("header.json"))?)?;
    if header.format_version != VOLUME_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            expected: VOLUME_FORMAT_VERSION,
            found: header.format_version,
        });
    }
    let payload = fs::read(dir.join("data.raw"))?;
    let expected = header.dims_zyx.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return Err(Error::Truncated(format!(
            "data.raw has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let computed = crc32fast::hash(&payload);
    if computed != header.payload_crc32 {
        return Err(Error::ChecksumMismatch {
            stored: header.payload_crc32,
            computed,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(
        header.dims_zyx,
        header.spacing_mm,
        header.origin_mm,
        data,
        header.exam_id,
        header.patient_id,
    )
}

/// Annotation file: a JSON array of `{center_mm: [x, y, z], diameter_mm}`.
/// The exam identity lives in the enclosing directory.
pub fn save_annotation(ann: &Annotation, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(&ann.lesions)?)?;
    Ok(())
}

pub fn load_annotation(path: &Path, exam_id: &str) -> Result<Annotation> {
    let lesions: Vec<Lesion> = serde_json::from_slice(&fs::read(path)?)?;
    Ok(Annotation {
        exam_id: exam_id.to_string(),
        lesions,
    })
}

/// Candidate CSV: `exam_id,x_mm,y_mm,z_mm,scale_mm,score` with one header
/// line. Floats use the shortest round-trip representation.
pub fn save_candidates(candidates: &[Candidate], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "exam_id,x_mm,y_mm,z_mm,scale_mm,score")?;
    for c in candidates {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.exam_id, c.pos_mm[0], c.pos_mm[1], c.pos_mm[2], c.scale_mm, c.score
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("exam_id,x_mm,y_mm,z_mm,scale_mm,score") => {}
        other => {
            return Err(Error::Malformed(format!(
                "bad candidates header: {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Malformed(format!(
                "candidates line {}: expected 6 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Malformed(format!("bad number `{s}` on line {}", i + 2)))
        };
        out.push(Candidate {
            exam_id: fields[0].to_string(),
            pos_mm: [num(fields[1])?, num(fields[2])?, num(fields[3])?],
            scale_mm: num(fields[4])?,
            score: num(fields[5])?,
        });
    }
    Ok(out)
}

/// FROC CSV: `threshold,sensitivity,afp` with one header line.
pub fn save_froc(curve: &FrocCurve, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "threshold,sensitivity,afp")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.sensitivity, p.afp)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_froc(path: &Path) -> Result<FrocCurve> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("threshold,sensitivity,afp") => {}
        other => return Err(Error::Malformed(format!("bad froc header: {other:?}"))),
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Malformed(format!(
                "froc line {}: expected 3 fields",
                i + 2
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Malformed(format!("bad number `{s}` on line {}", i + 2)))
        };
        points.push(FrocPoint {
            threshold: num(fields[0])?,
            sensitivity: num(fields[1])?,
            afp: num(fields[2])?,
        });
    }
    Ok(FrocCurve { points })
}

/// Saves one exam of a corpus directory tree:
/// `<root>/labeled/<exam>/` holds the volume files and `annotation.json`,
/// `<root>/unlabeled/<exam>/` holds volume files only (ground truth, when
/// provided for diagnostics, goes under `<root>/diagnostics/`).
pub fn save_labeled_exam(root: &Path, v: &Volume, ann: &Annotation) -> Result<()> {
    let dir = root.join("labeled").join(&v.exam_id);
    save_volume(v, &dir)?;
    save_annotation(ann, &dir.join("annotation.json"))
}

pub fn save_unlabeled_exam(root: &Path, v: &Volume, truth: Option<&Annotation>) -> Result<()> {
    let dir = root.join("unlabeled").join(&v.exam_id);
    save_volume(v, &dir)?;
    if let Some(ann) = truth {
        save_annotation(
            ann,
            &root
                .join("diagnostics")
                .join(format!("{}_truth.json", v.exam_id)),
        )?;
    }
    Ok(())
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads a corpus directory tree written by `save_labeled_exam` /
/// `save_unlabeled_exam`. Exams are ordered by id.
pub fn load_corpus_dir(root: &Path) -> Result<crate::phantom::Corpus> {
    let mut corpus = crate::phantom::Corpus {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        unlabeled_truth: Vec::new(),
        patients: std::collections::HashMap::new(),
    };
    let labeled_dir = root.join("labeled");
    if labeled_dir.is_dir() {
        for dir in sorted_subdirs(&labeled_dir)? {
            let volume = load_volume(&dir)?;
            let annotation = load_annotation(&dir.join("annotation.json"), &volume.exam_id)?;
            corpus
                .patients
                .insert(volume.exam_id.clone(), volume.patient_id.clone());
            corpus
                .labeled
                .push(crate::phantom::LabeledExam { volume, annotation });
        }
    }
    let unlabeled_dir = root.join("unlabeled");
    if unlabeled_dir.is_dir() {
        for dir in sorted_subdirs(&unlabeled_dir)? {
            let volume = load_volume(&dir)?;
            corpus
                .patients
                .insert(volume.exam_id.clone(), volume.patient_id.clone());
            corpus.unlabeled.push(volume);
        }
    }
    if corpus.labeled.is_empty() && corpus.unlabeled.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no exams under {}",
            root.display()
        )));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::froc::FrocPoint;

    fn sample_volume() -> Volume {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| i as f32 * 0.25 - 3.0).collect();
        Volume::new([3, 4, 5], [0.5, 1.0, 2.0], [1.0, -2.0, 3.0], data, "e7", "p3").unwrap()
    }

    #[test]
    fn volume_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        save_volume(&v, dir.path()).unwrap();
        let loaded = load_volume(dir.path()).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn volume_corruption_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        save_volume(&v, dir.path()).unwrap();
        let raw = dir.path().join("data.raw");

        let mut bytes = std::fs::read(&raw).unwrap();
        bytes[8] ^= 0x40;
        std::fs::write(&raw, &bytes).unwrap();
        match load_volume(dir.path()) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }

        bytes[8] ^= 0x40;
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&raw, &bytes).unwrap();
        match load_volume(dir.path()) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn annotation_and_candidates_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ann = Annotation {
            exam_id: "e1".into(),
            lesions: vec![Lesion {
                center_mm: [1.5, -2.25, 3.75],
                diameter_mm: 4.5,
            }],
        };
        let path = dir.path().join("annotation.json");
        save_annotation(&ann, &path).unwrap();
        assert_eq!(load_annotation(&path, "e1").unwrap(), ann);

        let cands = vec![
            Candidate {
                exam_id: "e1".into(),
                pos_mm: [0.1, 0.2, 0.3],
                scale_mm: 1.5,
                score: 0.123456789,
            },
            Candidate {
                exam_id: "e2".into(),
                pos_mm: [9.0, 8.0, 7.0],
                scale_mm: 5.0,
                score: -0.25,
            },
        ];
        let cpath = dir.path().join("c.csv");
        save_candidates(&cands, &cpath).unwrap();
        assert_eq!(load_candidates(&cpath).unwrap(), cands);
    }

    #[test]
    fn froc_round_trip_including_sentinels() {
        let dir = tempfile::tempdir().unwrap();
        let curve = FrocCurve {
            points: vec![
                FrocPoint {
                    threshold: f64::INFINITY,
                    sensitivity: 0.0,
                    afp: 0.0,
                },
                FrocPoint {
                    threshold: 0.5,
                    sensitivity: 0.75,
                    afp: 2.25,
                },
                FrocPoint {
                    threshold: f64::NEG_INFINITY,
                    sensitivity: 1.0,
                    afp: 10.5,
                },
            ],
        };
        let path = dir.path().join("froc.csv");
        save_froc(&curve, &path).unwrap();
        assert_eq!(load_froc(&path).unwrap(), curve);
    }

    #[test]
    fn checkpoint_reexport_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = crate::cropnet::build_cropnet::<f32>(
            &crate::cropnet::CropNetConfig {
                input_edge_mm: 8,
                blocks_per_level: 1,
                levels: 2,
                channel_schedule: vec![2, 4],
                dropout_rate: 0.1,
            },
            5,
        )
        .unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }
}
