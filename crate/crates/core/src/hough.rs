//! Class-agnostic 3D instance segmentation by Hough voting.
//!
//! Every occupied voxel casts a ray along its center-vote vector through a
//! grid at 10x the voxel resolution; cells crossed by many rays are object
//! center candidates, clustered by mean shift, and voxels are then assigned
//! to the center that best matches their vote direction and proximity.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use nalgebra::{Point3, Unit, Vector3};
use rayon::prelude::*;

use crate::dda::GridRay;
use crate::grid::{GridSpec, InstanceLabels, TsdfGrid, VectorField};
use crate::parallel::map_reduce_chunks;
use crate::{Error, Result};

/// Resolution multiplier of the vote accumulator.
pub const FINE_FACTOR: usize = 10;

/// Ray-traversal counts on the fine grid. Counts can only accumulate inside
/// the occupied region, so storage covers the fine-resolution bounding box of
/// the occupied voxels; cells outside it read as zero.
pub struct VoteGrid {
    pub spec: GridSpec,
    pub fine_dims: [usize; 3],
    window_lo: [usize; 3],
    window_dims: [usize; 3],
    counts: Vec<u32>,
}

impl VoteGrid {
    fn empty(spec: GridSpec) -> Self {
        let fine_dims = [
            spec.dims[0] * FINE_FACTOR,
            spec.dims[1] * FINE_FACTOR,
            spec.dims[2] * FINE_FACTOR,
        ];
        VoteGrid { spec, fine_dims, window_lo: [0; 3], window_dims: [0; 3], counts: Vec::new() }
    }

    /// Fine-cell edge length, meters.
    pub fn fine_size(&self) -> f64 {
        self.spec.voxel_size / FINE_FACTOR as f64
    }

    /// Traversal count of a fine cell.
    pub fn count(&self, fine: [usize; 3]) -> u32 {
        let mut local = [0usize; 3];
        for a in 0..3 {
            if fine[a] < self.window_lo[a] || fine[a] >= self.window_lo[a] + self.window_dims[a] {
                return 0;
            }
            local[a] = fine[a] - self.window_lo[a];
        }
        self.counts[(local[2] * self.window_dims[1] + local[1]) * self.window_dims[0] + local[0]]
    }

    /// World position of a fine-cell center.
    pub fn fine_center(&self, fine: [usize; 3]) -> Point3<f64> {
        let h = self.fine_size();
        self.spec.origin
            + Vector3::new(
                (fine[0] as f64 + 0.5) * h,
                (fine[1] as f64 + 0.5) * h,
                (fine[2] as f64 + 0.5) * h,
            )
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// March a ray from every occupied voxel's center along its vote vector,
/// counting each traversed fine cell once per ray. Rays stop at the first
/// unoccupied coarse voxel or the grid edge. Vote vectors are normalized on
/// input; occupied voxels with a vanishing vote cast nothing.
pub fn cast_votes(votes: &VectorField, occupancy: &[bool]) -> Result<VoteGrid> {
    let spec = votes.spec;
    if occupancy.len() != spec.len() {
        return Err(Error::DimMismatch(format!(
            "{} occupancy entries for a {:?} grid",
            occupancy.len(),
            spec.dims
        )));
    }

    // Fine window over the occupied bounding box.
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for idx in 0..spec.len() {
        if occupancy[idx] {
            any = true;
            let c = spec.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Ok(VoteGrid::empty(spec));
    }
    let window_lo = [lo[0] * FINE_FACTOR, lo[1] * FINE_FACTOR, lo[2] * FINE_FACTOR];
    let window_dims = [
        (hi[0] - lo[0] + 1) * FINE_FACTOR,
        (hi[1] - lo[1] + 1) * FINE_FACTOR,
        (hi[2] - lo[2] + 1) * FINE_FACTOR,
    ];
    let n_cells = window_dims[0] * window_dims[1] * window_dims[2];
    let counts: Vec<AtomicU32> = (0..n_cells).map(|_| AtomicU32::new(0)).collect();

    let occupied: Vec<usize> = (0..spec.len()).filter(|&i| occupancy[i]).collect();
    occupied.par_iter().for_each(|&idx| {
        let v = votes.vectors[idx];
        let norm = v.norm();
        if norm < 1e-12 {
            return;
        }
        let dir = v / norm;
        let c = spec.coords(idx);
        // The coarse-voxel center in fine-cell units.
        let start = [
            (c[0] * FINE_FACTOR + FINE_FACTOR / 2) as f64,
            (c[1] * FINE_FACTOR + FINE_FACTOR / 2) as f64,
            (c[2] * FINE_FACTOR + FINE_FACTOR / 2) as f64,
        ];
        let mut ray = GridRay::new(start, [dir.x, dir.y, dir.z]);
        loop {
            let cell = ray.cell();
            let mut coarse = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                if cell[a] < 0 || cell[a] as usize >= spec.dims[a] * FINE_FACTOR {
                    inside = false;
                    break;
                }
                coarse[a] = cell[a] as usize / FINE_FACTOR;
            }
            if !inside || !occupancy[spec.index(coarse[0], coarse[1], coarse[2])] {
                break;
            }
            let local = [
                cell[0] as usize - window_lo[0],
                cell[1] as usize - window_lo[1],
                cell[2] as usize - window_lo[2],
            ];
            let flat = (local[2] * window_dims[1] + local[1]) * window_dims[0] + local[0];
            counts[flat].fetch_add(1, Ordering::Relaxed);
            ray.advance();
        }
    });

    let counts = counts.into_iter().map(|a| a.into_inner()).collect();
    Ok(VoteGrid {
        spec,
        fine_dims: [
            spec.dims[0] * FINE_FACTOR,
            spec.dims[1] * FINE_FACTOR,
            spec.dims[2] * FINE_FACTOR,
        ],
        window_lo,
        window_dims,
        counts,
    })
}

/// Centers of fine cells whose traversal count exceeds `mu`, in fine-index
/// order.
pub fn select_votes(grid: &VoteGrid, mu: u32) -> Vec<Point3<f64>> {
    let mut out = Vec::new();
    let [wx, wy, wz] = grid.window_dims;
    for z in 0..wz {
        for y in 0..wy {
            for x in 0..wx {
                if grid.counts[(z * wy + y) * wx + x] > mu {
                    out.push(grid.fine_center([
                        grid.window_lo[0] + x,
                        grid.window_lo[1] + y,
                        grid.window_lo[2] + z,
                    ]));
                }
            }
        }
    }
    out
}

/// Flat-kernel mean shift: every input point seeds an iteration toward the
/// mean of the points within `bandwidth`, run to movement below 1e-5 m or
/// 100 iterations. Modes closer than half the bandwidth merge into the one
/// reached by more seeds (ties to the lexicographically smaller position);
/// the result is sorted lexicographically.
pub fn mean_shift(points: &[Point3<f64>], bandwidth: f64) -> Vec<Point3<f64>> {
    assert!(bandwidth > 0.0, "mean_shift bandwidth must be positive");
    if points.is_empty() {
        return Vec::new();
    }
    const MOVE_TOL: f64 = 1e-5;
    const MAX_ITERS: usize = 100;

    // Bucket grid over the data for neighbor queries.
    let inv = 1.0 / bandwidth;
    let key_of = |p: &Point3<f64>| -> (i64, i64, i64) {
        ((p.x * inv).floor() as i64, (p.y * inv).floor() as i64, (p.z * inv).floor() as i64)
    };
    let mut buckets: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry(key_of(p)).or_default().push(i as u32);
    }
    let local_mean = |p: &Point3<f64>| -> Point3<f64> {
        let (kx, ky, kz) = key_of(p);
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(ids) = buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in ids {
                            let q = points[i as usize];
                            if (q - p).norm() <= bandwidth {
                                sum += q.coords;
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
        if n == 0 { *p } else { Point3::from(sum / n as f64) }
    };

    // Iterate seeds, merging identical trajectories between rounds.
    let mut active: Vec<(Point3<f64>, usize)> = points.iter().map(|p| (*p, 1usize)).collect();
    let mut modes: Vec<(Point3<f64>, usize)> = Vec::new();
    for _ in 0..MAX_ITERS {
        if active.is_empty() {
            break;
        }
        let moved: Vec<(Point3<f64>, usize, bool)> = active
            .par_iter()
            .map(|(p, mult)| {
                let m = local_mean(p);
                let done = (m - p).norm() < MOVE_TOL;
                (m, *mult, done)
            })
            .collect();
        let mut still: HashMap<[u64; 3], (Point3<f64>, usize)> = HashMap::new();
        for (p, mult, done) in moved {
            if done {
                modes.push((p, mult));
            } else {
                let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
                still.entry(key).and_modify(|e| e.1 += mult).or_insert((p, mult));
            }
        }
        let mut next: Vec<(Point3<f64>, usize)> = still.into_values().collect();
        next.sort_by(|a, b| lex_cmp(&a.0, &b.0));
        active = next;
    }
    modes.extend(active); // seeds still moving at the cap count as modes

    // Merge modes closer than bandwidth / 2.
    let mut pooled: HashMap<[u64; 3], (Point3<f64>, usize)> = HashMap::new();
    for (p, mult) in modes {
        let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        pooled.entry(key).and_modify(|e| e.1 += mult).or_insert((p, mult));
    }
    let mut ranked: Vec<(Point3<f64>, usize)> = pooled.into_values().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| lex_cmp(&a.0, &b.0)));
    let mut kept: Vec<Point3<f64>> = Vec::new();
    for (p, _) in ranked {
        if kept.iter().all(|q| (q - p).norm() >= bandwidth / 2.0) {
            kept.push(p);
        }
    }
    kept.sort_by(lex_cmp);
    kept
}

fn lex_cmp(a: &Point3<f64>, b: &Point3<f64>) -> std::cmp::Ordering {
    a.x.partial_cmp(&b.x)
        .unwrap()
        .then_with(|| a.y.partial_cmp(&b.y).unwrap())
        .then_with(|| a.z.partial_cmp(&b.z).unwrap())
}

/// Assign each occupied voxel to the center minimizing
/// `|arccos(vote . dir_to_center)| + gamma * distance / grid_extent`;
/// ties go to the lowest center index. Free voxels stay 0.
pub fn allocate_voxels(
    votes: &VectorField,
    occupancy: &[bool],
    centers: &[Point3<f64>],
    gamma: f64,
) -> Result<InstanceLabels> {
    let spec = votes.spec;
    if occupancy.len() != spec.len() {
        return Err(Error::DimMismatch("occupancy mask size".into()));
    }
    let any_occupied = occupancy.iter().any(|&o| o);
    if centers.is_empty() {
        if any_occupied {
            return Err(Error::NoCenters);
        }
        return Ok(InstanceLabels::zeros(spec));
    }
    let extent = spec.max_extent();
    let labels: Vec<u32> = map_reduce_chunks(
        spec.len(),
        |range| {
            let mut out = Vec::with_capacity(range.len());
            for idx in range {
                if !occupancy[idx] {
                    out.push(0u32);
                    continue;
                }
                let c = spec.coords(idx);
                let x = spec.voxel_center(c[0], c[1], c[2]);
                let v = votes.vectors[idx];
                let vn = v.norm();
                let vote = if vn < 1e-12 { Vector3::z() } else { v / vn };
                let mut best = f64::INFINITY;
                let mut best_n = 0usize;
                for (n, center) in centers.iter().enumerate() {
                    let to = center - x;
                    let dist = to.norm();
                    let dir = if dist < 1e-12 { vote } else { to / dist };
                    let cosang = vote.dot(&dir).clamp(-1.0, 1.0);
                    let cost = cosang.acos().abs() + gamma * dist / extent;
                    if cost < best {
                        best = cost;
                        best_n = n;
                    }
                }
                out.push(best_n as u32 + 1);
            }
            out
        },
        |mut a, b| {
            a.extend(b);
            a
        },
    )
    .unwrap_or_default();
    Ok(InstanceLabels { spec, labels })
}

/// Hyperparameters of the segmentation stage. `mu` and `gamma` carry the
/// reference values; the mean-shift bandwidth sits below the smallest object
/// scale so nearby objects stay separate.
#[derive(Debug, Clone, Copy)]
pub struct HoughParams {
    pub mu: u32,
    pub gamma: f64,
    pub bandwidth: f64,
}

impl Default for HoughParams {
    fn default() -> Self {
        HoughParams { mu: 10, gamma: 0.1, bandwidth: 0.06 }
    }
}

/// End-to-end instance segmentation of a TSDF plus center-vote field:
/// occupancy, vote casting, vote selection, mean shift, allocation.
/// Returns the labels and the found centers.
pub fn segment_instances(
    tsdf: &TsdfGrid,
    votes: &VectorField,
    params: &HoughParams,
) -> Result<(InstanceLabels, Vec<Point3<f64>>)> {
    tsdf.spec.ensure_compatible(&votes.spec)?;
    let occupancy = tsdf.occupancy();
    if !occupancy.iter().any(|&o| o) {
        return Ok((InstanceLabels::zeros(tsdf.spec), Vec::new()));
    }
    let grid = cast_votes(votes, &occupancy)?;
    let candidates = select_votes(&grid, params.mu);
    let centers = mean_shift(&candidates, params.bandwidth);
    let labels = allocate_voxels(votes, &occupancy, &centers, params.gamma)?;
    Ok((labels, centers))
}


/// Fraction of voxels whose labels agree under the best one-to-one matching
/// of label ids (free space must agree exactly). Used by tests and the
/// acceptance suite; segmentation is class-agnostic so ids are arbitrary.
pub fn label_accuracy(gt: &[u32], pred: &[u32]) -> f64 {
    assert_eq!(gt.len(), pred.len());
    let n_gt = gt.iter().copied().max().unwrap_or(0) as usize;
    let n_pred = pred.iter().copied().max().unwrap_or(0) as usize;
    let mut overlap = vec![vec![0usize; n_pred + 1]; n_gt + 1];
    let mut occupied = 0usize;
    let mut free_agree = 0usize;
    let mut free = 0usize;
    for (&g, &p) in gt.iter().zip(pred) {
        if g == 0 {
            free += 1;
            free_agree += (p == 0) as usize;
        } else {
            occupied += 1;
            overlap[g as usize][p as usize] += 1;
        }
    }
    // Greedy best bijection over label pairs, largest overlaps first.
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for g in 1..=n_gt {
        for p in 1..=n_pred {
            if overlap[g][p] > 0 {
                pairs.push((overlap[g][p], g, p));
            }
        }
    }
    pairs.sort_unstable_by(|a, b| b.cmp(a));
    let mut used_g = vec![false; n_gt + 1];
    let mut used_p = vec![false; n_pred + 1];
    let mut matched = 0usize;
    for (count, g, p) in pairs {
        if !used_g[g] && !used_p[p] {
            used_g[g] = true;
            used_p[p] = true;
            matched += count;
        }
    }
    if occupied + free == 0 {
        return 1.0;
    }
    (matched + free_agree) as f64 / (occupied + free) as f64
}
