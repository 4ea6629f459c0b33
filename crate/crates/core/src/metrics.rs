//! Evaluation metrics: Chamfer distance, expected-occupancy BCE, IoU,
//! stability-threshold classification and a static penetration diagnostic.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sq::Scene;
use crate::{Error, Result};

/// Bidirectional Chamfer distance in meters: mean nearest-neighbor distance
/// from `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(directed_mean_nn(a, b) + directed_mean_nn(b, a))
}

fn directed_mean_nn(from: &[Point3<f64>], to: &[Point3<f64>]) -> f64 {
    let mins: Vec<f64> = from
        .par_iter()
        .map(|p| {
            to.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    mins.iter().map(|d| d.sqrt()).sum::<f64>() / from.len() as f64
}

/// Probability clamp for the BCE so single-sample evaluation stays finite.
pub const BCE_CLAMP: f64 = 1e-6;

/// Binary cross entropy of the expected occupancy: the per-voxel probability
/// is the mean over `samples`, clamped to `[1e-6, 1 - 1e-6]`, scored against
/// the ground-truth occupancy and averaged over the grid.
pub fn expected_occupancy_bce(samples: &[Vec<bool>], gt: &[bool]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("need at least one occupancy sample".into()));
    }
    for s in samples {
        if s.len() != gt.len() {
            return Err(Error::DimMismatch(format!("sample has {} voxels, gt {}", s.len(), gt.len())));
        }
    }
    let n = gt.len();
    let s = samples.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let p_raw = samples.iter().filter(|smp| smp[i]).count() as f64 / s;
        let p = p_raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= if gt[i] { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / n as f64)
}

/// Intersection over union of thresholded occupancy probabilities against a
/// binary ground truth. Both-empty counts as 1.
pub fn iou(pred: &[f64], gt: &[bool], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch(format!("pred has {} voxels, gt {}", pred.len(), gt.len())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, &y) in pred.iter().zip(gt) {
        let occ = *p >= threshold;
        inter += (occ && y) as usize;
        union += (occ || y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Mean occupancy probability across sample grids.
pub fn occupancy_probability(samples: &[Vec<bool>]) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let n = samples[0].len();
    let s = samples.len() as f64;
    (0..n)
        .map(|i| samples.iter().filter(|smp| smp[i]).count() as f64 / s)
        .collect()
}

/// Per-object motion after an external stability simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectMotion {
    pub object_id: u32,
    pub displacement_m: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
        })
    }
}

/// A stack is stable when no object center moved more than 20 cm and every
/// orientation change stays within 30 degrees (both bounds inclusive).
pub fn stability_classify(motions: &[ObjectMotion]) -> Stability {
    let ok = motions
        .iter()
        .all(|m| m.displacement_m <= 0.20 && m.rotation_deg <= 30.0);
    if ok {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

/// Parse a displacement table: CSV rows `object_id,displacement_m,rotation_deg`
/// with an optional header line.
pub fn read_displacement_csv<P: AsRef<Path>>(path: P) -> Result<Vec<ObjectMotion>> {
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("line {}: expected 3 fields, got {}", ln + 1, fields.len())));
        }
        if ln == 0 && fields[0].parse::<u32>().is_err() {
            continue; // header
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("line {}: bad {what} {s:?}", ln + 1)))
        };
        out.push(ObjectMotion {
            object_id: fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad object_id {:?}", ln + 1, fields[0])))?,
            displacement_m: parse_f(fields[1], "displacement")?,
            rotation_deg: parse_f(fields[2], "rotation")?,
        });
    }
    Ok(out)
}

/// Static physical-plausibility diagnostic of a scene: summed pairwise
/// collision losses plus floor losses over seeded surface samples. Zero for a
/// well-settled scene.
pub fn penetration_metric(scene: &Scene, samples_per_object: usize) -> f64 {
    if scene.objects.is_empty() {
        return 0.0;
    }
    let samples: Vec<Vec<Point3<f64>>> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(k, sq)| sq.sample_surface(samples_per_object, 0x5EED_0000 + k as u64))
        .collect();
    let mut total = 0.0;
    for (i, sq) in scene.objects.iter().enumerate() {
        for (j, pts) in samples.iter().enumerate() {
            if i != j {
                total += crate::refine::collision_loss(sq, pts);
            }
        }
        total += crate::refine::floor_loss(&samples[i]);
    }
    total
}

/// Shape-space Chamfer between two superquadric surfaces: mean distance from
/// `n` samples of each surface to the other surface. Distances use radial
/// projection (exact for star-shaped solids), so identical shapes score ~0
/// with no finite-sampling floor.
pub fn superquadric_chamfer(a: &crate::sq::Superquadric, b: &crate::sq::Superquadric, n: usize) -> f64 {
    let dir = |from: &crate::sq::Superquadric, to: &crate::sq::Superquadric, seed: u64| -> f64 {
        let pts = from.sample_surface(n, seed);
        pts.iter()
            .map(|p| to.radial_surface_distance(p).unwrap_or(to.max_scale()))
            .sum::<f64>()
            / pts.len() as f64
    };
    dir(a, b, 1000) + dir(b, a, 1001)
}

/// One metric result as emitted by the CLI: `{metric, value, params}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub params: serde_json::Value,
}

impl MetricRecord {
    pub fn new(metric: &str, value: f64, params: serde_json::Value) -> Self {
        MetricRecord { metric: metric.to_string(), value, params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chamfer_basics() {
        let a = vec![Point3::new(0.0, 0.0, 0.0)];
        let b = vec![Point3::new(0.0, 0.0, 1.0)];
        assert_relative_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rnd_pts = |n: usize| -> Vec<Point3<f64>> {
            (0..n)
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                .collect()
        };
        let a = rnd_pts(200);
        let b = rnd_pts(150);

        // Independent quadratic oracle.
        let mut expect = 0.0;
        for p in &a {
            let mut best = f64::INFINITY;
            for q in &b {
                best = best.min((p - q).norm());
            }
            expect += best / a.len() as f64;
        }
        for q in &b {
            let mut best = f64::INFINITY;
            for p in &a {
                best = best.min((q - p).norm());
            }
            expect += best / b.len() as f64;
        }
        let got = chamfer(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert_relative_eq!(got, chamfer(&b, &a).unwrap());

        // Joint translation leaves it unchanged.
        let shift = Vector3::new(0.3, -0.2, 0.9);
        let a2: Vec<_> = a.iter().map(|p| p + shift).collect();
        let b2: Vec<_> = b.iter().map(|p| p + shift).collect();
        assert!((chamfer(&a2, &b2).unwrap() - got).abs() < 1e-9);
    }

    #[test]
    fn bce_cases() {
        let gt = vec![true, false, true, false];
        // Perfect single sample: only the clamp keeps it from zero.
        let v = expected_occupancy_bce(&[gt.clone()], &gt).unwrap();
        assert!(v > 0.0 && v < 2e-5, "clamped perfect score {v}");

        // Two samples disagreeing on one voxel: p = 0.5 there.
        let mut s2 = gt.clone();
        s2[0] = false;
        let v = expected_occupancy_bce(&[gt.clone(), s2], &gt).unwrap();
        let expect = 2.0_f64.ln() / 4.0;
        assert!((v - expect).abs() < 1e-5, "{v} vs {expect}");

        // All-wrong single sample: every voxel at the clamp.
        let wrong: Vec<bool> = gt.iter().map(|b| !b).collect();
        let v = expected_occupancy_bce(&[wrong], &gt).unwrap();
        assert_relative_eq!(v, -(BCE_CLAMP.ln()), max_relative = 1e-9);
        assert!((v - 13.8).abs() < 0.1);
    }

    #[test]
    fn bce_improves_with_a_corrected_sample() {
        let gt = vec![true, true, false, false, true];
        let wrong: Vec<bool> = gt.iter().map(|b| !b).collect();
        let worse = expected_occupancy_bce(&[gt.clone(), wrong], &gt).unwrap();
        let better = expected_occupancy_bce(&[gt.clone(), gt.clone()], &gt).unwrap();
        assert!(better < worse);
    }

    #[test]
    fn iou_cases() {
        let gt = vec![true, true, false, false];
        let same = vec![1.0, 1.0, 0.0, 0.0];
        assert_relative_eq!(iou(&same, &gt, 0.5).unwrap(), 1.0);
        let disjoint = vec![0.0, 0.0, 1.0, 1.0];
        assert_relative_eq!(iou(&disjoint, &gt, 0.5).unwrap(), 0.0);
        // Half-overlapping equal-size boxes: 1 shared of 3 in the union.
        let half = vec![0.0, 1.0, 1.0, 0.0];
        assert_relative_eq!(iou(&half, &gt, 0.5).unwrap(), 1.0 / 3.0);
        let empty = vec![false, false];
        assert_relative_eq!(iou(&[0.0, 0.0], &empty, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn stability_thresholds_are_inclusive() {
        let ok = vec![
            ObjectMotion { object_id: 0, displacement_m: 0.05, rotation_deg: 10.0 },
            ObjectMotion { object_id: 1, displacement_m: 0.05, rotation_deg: 10.0 },
            ObjectMotion { object_id: 2, displacement_m: 0.05, rotation_deg: 10.0 },
        ];
        assert_eq!(stability_classify(&ok), Stability::Stable);

        let mut moved = ok.clone();
        moved[1].displacement_m = 0.25;
        assert_eq!(stability_classify(&moved), Stability::Unstable);

        let boundary = vec![ObjectMotion { object_id: 0, displacement_m: 0.20, rotation_deg: 30.0 }];
        assert_eq!(stability_classify(&boundary), Stability::Stable);
        let over = vec![ObjectMotion { object_id: 0, displacement_m: 0.20, rotation_deg: 30.0001 }];
        assert_eq!(stability_classify(&over), Stability::Unstable);
    }

    #[test]
    fn displacement_csv_parses_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "object_id,displacement_m,rotation_deg\n0,0.05,3.2\n1,0.31,12.0\n").unwrap();
        let rows = read_displacement_csv(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].object_id, 1);
        assert_relative_eq!(rows[1].displacement_m, 0.31);
        assert_eq!(stability_classify(&rows), Stability::Unstable);

        std::fs::write(&path, "0,0.05,3.2\n").unwrap();
        assert_eq!(read_displacement_csv(&path).unwrap().len(), 1);
    }

    #[test]
    fn penetration_zero_for_separated_positive_for_overlap() {
        use crate::sq::Superquadric;
        let apart = Scene {
            objects: vec![
                Superquadric::sphere(0.1, Point3::new(0.0, 0.0, 0.5)),
                Superquadric::sphere(0.1, Point3::new(0.5, 0.0, 0.5)),
            ],
            seed: None,
        };
        assert_eq!(penetration_metric(&apart, 500), 0.0);

        // Overlap depth sweep: the metric grows with penetration.
        let mut last = 0.0;
        for overlap in [0.02, 0.05, 0.08] {
            let scene = Scene {
                objects: vec![
                    Superquadric::sphere(0.1, Point3::new(0.0, 0.0, 0.5)),
                    Superquadric::sphere(0.1, Point3::new(0.2 - overlap, 0.0, 0.5)),
                ],
                seed: None,
            };
            let m = penetration_metric(&scene, 500);
            assert!(m > last, "overlap {overlap}: {m} <= {last}");
            last = m;
        }
    }
}
