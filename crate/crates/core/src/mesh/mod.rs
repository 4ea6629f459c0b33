//! Triangle meshes: isosurface extraction, surface sampling, visibility and
//! point segmentation.

mod tables;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use nalgebra::{Point3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::grid::{Camera, InstanceLabels, TsdfGrid};
use crate::{Error, Result};
use tables::{CUBE_CORNERS, CUBE_EDGES, TRIANGLE_TABLE};

/// Indexed triangle mesh in world coordinates (meters).
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for t in &self.triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::InvalidInput(format!("triangle {t:?} indexes past {n} vertices")));
            }
        }
        if self.vertices.iter().any(|v| !v.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("non-finite vertex".into()));
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn mean_edge_length(&self) -> f64 {
        if self.triangles.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for t in &self.triangles {
            for k in 0..3 {
                let a = self.vertices[t[k] as usize];
                let b = self.vertices[t[(k + 1) % 3] as usize];
                sum += (b - a).norm();
            }
        }
        sum / (3 * self.triangles.len()) as f64
    }
}

/// Minimum triangle area kept by extraction, square meters.
const DEGENERATE_AREA: f64 = 1e-12;

/// Extract the `iso` level set of a TSDF with standard 256-case marching
/// cubes and linear edge interpolation.
///
/// Triangles are wound so normals point toward the positive (outside) side.
/// Cells touching voxels marked unobserved by the grid's mask are skipped, so
/// partially observed grids mesh only their measured surface. Output order is
/// canonical (cell index, then table order) regardless of thread count.
pub fn marching_cubes(tsdf: &TsdfGrid, iso: f64) -> TriMesh {
    let spec = &tsdf.spec;
    let [nx, ny, nz] = spec.dims;
    let cells_per_slab = (nx - 1) * (ny - 1);

    // Phase 1: per-slab triangle lists as global edge keys, in parallel.
    // An edge key is (node index) * 3 + axis of the edge leaving that node.
    let edge_key = |x: usize, y: usize, z: usize, axis: usize| -> u64 {
        ((spec.index(x, y, z) * 3) + axis) as u64
    };
    let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris: Vec<[u64; 3]> = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    let mut case = 0usize;
                    let mut skip = false;
                    for (ci, &(dx, dy, dz)) in CUBE_CORNERS.iter().enumerate() {
                        let idx = spec.index(x + dx, y + dy, z + dz);
                        if let Some(mask) = &tsdf.observed {
                            if !mask[idx] {
                                skip = true;
                                break;
                            }
                        }
                        if tsdf.values[idx] <= iso {
                            case |= 1 << ci;
                        }
                    }
                    if skip || case == 0 || case == 255 {
                        continue;
                    }
                    let row = &TRIANGLE_TABLE[case];
                    let mut k = 0;
                    while row[k] >= 0 {
                        let mut keys = [0u64; 3];
                        for (t, key) in keys.iter_mut().enumerate() {
                            let e = row[k + t] as usize;
                            let (c0, c1) = CUBE_EDGES[e];
                            let (d0, d1) = (CUBE_CORNERS[c0], CUBE_CORNERS[c1]);
                            let axis = if d0.0 != d1.0 { 0 } else if d0.1 != d1.1 { 1 } else { 2 };
                            let base = (d0.0.min(d1.0), d0.1.min(d1.1), d0.2.min(d1.2));
                            *key = edge_key(x + base.0, y + base.1, z + base.2, axis);
                        }
                        tris.push(keys);
                        k += 3;
                    }
                }
            }
            let _ = cells_per_slab;
            tris
        })
        .collect();

    // Phase 2: sequential vertex numbering in first-use order.
    let mut mesh = TriMesh::default();
    let mut vertex_of_edge: HashMap<u64, u32> = HashMap::new();
    let interp = |key: u64| -> Point3<f64> {
        let axis = (key % 3) as usize;
        let node = (key / 3) as usize;
        let [x, y, z] = spec.coords(node);
        let mut o = [x, y, z];
        o[axis] += 1;
        let v0 = tsdf.values[spec.index(x, y, z)];
        let v1 = tsdf.values[spec.index(o[0], o[1], o[2])];
        let t = if (v1 - v0).abs() < 1e-30 { 0.5 } else { ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0) };
        let p0 = spec.voxel_center(x, y, z);
        let p1 = spec.voxel_center(o[0], o[1], o[2]);
        p0 + (p1 - p0) * t
    };
    for slab in slabs {
        for keys in slab {
            let mut tri = [0u32; 3];
            for (t, &key) in keys.iter().enumerate() {
                let next = vertex_of_edge.len() as u32;
                let idx = *vertex_of_edge.entry(key).or_insert(next);
                if idx == next {
                    mesh.vertices.push(interp(key));
                }
                tri[t] = idx;
            }
            // Table order gives inward-facing winding for "inside <= iso";
            // swap to put normals on the positive TSDF side.
            mesh.triangles.push([tri[0], tri[2], tri[1]]);
        }
    }
    mesh.triangles.retain(|t| {
        let (a, b, c) = (
            mesh.vertices[t[0] as usize],
            mesh.vertices[t[1] as usize],
            mesh.vertices[t[2] as usize],
        );
        0.5 * (b - a).cross(&(c - a)).norm() > DEGENERATE_AREA
    });
    mesh
}

/// Draw `n` points uniformly by area from the mesh surface; triangles are
/// chosen proportional to area, positions by uniform barycentric sampling.
pub fn sample_mesh_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Point3<f64>>> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cumulative.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let r = rng.random_range(0.0..acc);
            let t = cumulative.partition_point(|&c| c <= r).min(mesh.triangles.len() - 1);
            let [a, b, c] = mesh.triangles[t];
            let (a, b, c) = (
                mesh.vertices[a as usize],
                mesh.vertices[b as usize],
                mesh.vertices[c as usize],
            );
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            Point3::from(a.coords * (1.0 - s) + b.coords * (s * (1.0 - r2)) + c.coords * (s * r2))
        })
        .collect())
}

/// Watertight-enough ray/triangle intersection (Moller-Trumbore).
/// Returns the ray parameter t of the hit.
fn ray_triangle(
    origin: &Point3<f64>,
    dir: &Unit<Vector3<f64>>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-9).then_some(t)
}

/// Uniform-grid ray accelerator over mesh triangles.
struct TriGrid {
    lo: Point3<f64>,
    cell: Vector3<f64>,
    dims: [usize; 3],
    bins: Vec<Vec<u32>>,
}

impl TriGrid {
    fn build(mesh: &TriMesh) -> Option<TriGrid> {
        if mesh.triangles.is_empty() {
            return None;
        }
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &mesh.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let pad = 1e-9 + 1e-6 * (hi - lo).norm().max(1.0);
        lo -= Vector3::repeat(pad);
        hi += Vector3::repeat(pad);
        let res = ((2.0 * mesh.triangles.len() as f64).cbrt().ceil() as usize).clamp(4, 64);
        let dims = [res, res, res];
        let cell = (hi - lo).map(|e| e / res as f64);
        let mut bins = vec![Vec::new(); res * res * res];
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let mut tlo = [usize::MAX; 3];
            let mut thi = [0usize; 3];
            for &vi in t {
                let v = mesh.vertices[vi as usize];
                for a in 0..3 {
                    let c = (((v[a] - lo[a]) / cell[a]) as usize).min(res - 1);
                    tlo[a] = tlo[a].min(c);
                    thi[a] = thi[a].max(c);
                }
            }
            for z in tlo[2]..=thi[2] {
                for y in tlo[1]..=thi[1] {
                    for x in tlo[0]..=thi[0] {
                        bins[(z * res + y) * res + x].push(ti as u32);
                    }
                }
            }
        }
        Some(TriGrid { lo, cell, dims, bins })
    }

    /// First triangle hit by the ray, if any.
    fn first_hit(&self, mesh: &TriMesh, origin: &Point3<f64>, dir: &Unit<Vector3<f64>>) -> Option<(u32, f64)> {
        // Clip the ray to the accelerator box.
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / dir[a];
            let lo = self.lo[a];
            let hi = self.lo[a] + self.cell[a] * self.dims[a] as f64;
            let (ta, tb) = ((lo - origin[a]) * inv, (hi - origin[a]) * inv);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        if t0 > t1 {
            return None;
        }
        let start = origin + dir.into_inner() * (t0 + 1e-12);
        let mut cell = [0usize; 3];
        for a in 0..3 {
            cell[a] = (((start[a] - self.lo[a]) / self.cell[a]) as usize).min(self.dims[a] - 1);
        }
        let mut t_max = [0.0_f64; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0isize; 3];
        for a in 0..3 {
            if dir[a] > 0.0 {
                step[a] = 1;
                let next = self.lo[a] + (cell[a] + 1) as f64 * self.cell[a];
                t_max[a] = (next - origin[a]) / dir[a];
                t_delta[a] = self.cell[a] / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                let next = self.lo[a] + cell[a] as f64 * self.cell[a];
                t_max[a] = (next - origin[a]) / dir[a];
                t_delta[a] = -self.cell[a] / dir[a];
            } else {
                t_max[a] = f64::INFINITY;
            }
        }
        let mut best: Option<(u32, f64)> = None;
        loop {
            let bin = &self.bins[(cell[2] * self.dims[1] + cell[1]) * self.dims[0] + cell[0]];
            for &ti in bin {
                let [a, b, c] = mesh.triangles[ti as usize];
                if let Some(t) = ray_triangle(
                    origin,
                    dir,
                    &mesh.vertices[a as usize],
                    &mesh.vertices[b as usize],
                    &mesh.vertices[c as usize],
                ) {
                    if best.is_none_or(|(_, bt)| t < bt) {
                        best = Some((ti, t));
                    }
                }
            }
            // March one cell; stop when the best hit precedes the next cell.
            let axis = if t_max[0] < t_max[1] {
                if t_max[0] < t_max[2] { 0 } else { 2 }
            } else if t_max[1] < t_max[2] {
                1
            } else {
                2
            };
            if let Some((_, bt)) = best {
                if bt <= t_max[axis] {
                    return best;
                }
            }
            if t_max[axis] > t1 {
                return best;
            }
            let next = cell[axis] as isize + step[axis];
            if next < 0 || next as usize >= self.dims[axis] {
                return best;
            }
            cell[axis] = next as usize;
            t_max[axis] += t_delta[axis];
        }
    }
}

/// Indices of triangles whose surface is the first hit of at least one pixel
/// ray, in ascending order.
pub fn visible_faces(mesh: &TriMesh, camera: &Camera) -> Vec<usize> {
    let Some(grid) = TriGrid::build(mesh) else {
        return Vec::new();
    };
    let origin = camera.position();
    let rows: Vec<Vec<u32>> = (0..camera.height)
        .into_par_iter()
        .map(|v| {
            let mut hits = Vec::new();
            for u in 0..camera.width {
                let dir = camera.pixel_ray(u as f64, v as f64);
                if let Some((ti, _)) = grid.first_hit(mesh, &origin, &dir) {
                    hits.push(ti);
                }
            }
            hits
        })
        .collect();
    let mut seen = vec![false; mesh.triangles.len()];
    for row in rows {
        for ti in row {
            seen[ti as usize] = true;
        }
    }
    seen.iter().enumerate().filter_map(|(i, &s)| s.then_some(i)).collect()
}

/// Split points by the instance label of their containing voxel (half-open
/// voxel intervals). Points on label 0 or outside the grid are dropped.
/// Returns `(label, points)` pairs in ascending label order.
pub fn segment_points(points: &[Point3<f64>], labels: &InstanceLabels) -> Vec<(u32, Vec<Point3<f64>>)> {
    let mut by_label: HashMap<u32, Vec<Point3<f64>>> = HashMap::new();
    for p in points {
        if let Some([x, y, z]) = labels.spec.voxel_of(p) {
            let l = labels.labels[labels.spec.index(x, y, z)];
            if l > 0 {
                by_label.entry(l).or_default().push(*p);
            }
        }
    }
    let mut out: Vec<(u32, Vec<Point3<f64>>)> = by_label.into_iter().collect();
    out.sort_by_key(|(l, _)| *l);
    out
}

/// Write a mesh as ASCII OBJ (`v`/`f` records, 1-based indices).
pub fn write_obj<P: AsRef<Path>>(mesh: &TriMesh, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an ASCII OBJ mesh; only `v` and `f` records are used, faces must be
/// triangles.
pub fn read_obj<P: AsRef<Path>>(path: P) -> Result<TriMesh> {
    let mut mesh = TriMesh::default();
    for (ln, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0f64; 3];
                for x in c.iter_mut() {
                    *x = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad vertex at line {}", ln + 1)))?;
                }
                mesh.vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = [0u32; 3];
                for x in idx.iter_mut() {
                    let tok = it.next().ok_or_else(|| Error::Format(format!("bad face at line {}", ln + 1)))?;
                    let first = tok.split('/').next().unwrap_or(tok);
                    let i: i64 = first
                        .parse()
                        .map_err(|_| Error::Format(format!("bad face index at line {}", ln + 1)))?;
                    if i < 1 {
                        return Err(Error::Format(format!("face index {i} at line {}", ln + 1)));
                    }
                    *x = (i - 1) as u32;
                }
                if it.next().is_some() {
                    return Err(Error::Format(format!("face at line {} is not a triangle", ln + 1)));
                }
                mesh.triangles.push(idx);
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::sq::{rasterize_scene, Scene, Superquadric};

    fn sphere_grid(r: f64) -> TsdfGrid {
        let spec = GridSpec::default();
        let scene = Scene {
            objects: vec![Superquadric::sphere(r, Point3::new(0.32, 0.32, 0.32))],
            seed: None,
        };
        rasterize_scene(&scene, &spec).unwrap().0
    }

    #[test]
    fn all_positive_grid_gives_empty_mesh() {
        let g = TsdfGrid::filled(GridSpec::default(), 0.05);
        let mesh = marching_cubes(&g, 0.0);
        assert!(mesh.triangles.is_empty());
        assert!(mesh.vertices.is_empty());
    }

    #[test]
    fn sphere_mesh_radius_and_orientation() {
        let r = 0.1;
        let mesh = marching_cubes(&sphere_grid(r), 0.0);
        assert!(!mesh.triangles.is_empty());
        let center = Point3::new(0.32, 0.32, 0.32);
        for v in &mesh.vertices {
            let d = (v - center).norm();
            assert!((d - r).abs() <= 0.01, "vertex at distance {d}");
        }
        // Outward normals: cross product points away from the center.
        let mut outward = 0usize;
        for t in &mesh.triangles {
            let (a, b, c) = (
                mesh.vertices[t[0] as usize],
                mesh.vertices[t[1] as usize],
                mesh.vertices[t[2] as usize],
            );
            let n = (b - a).cross(&(c - a));
            let to_out = (a + (b - a) / 3.0 + (c - a) / 3.0) - center;
            if n.dot(&to_out) > 0.0 {
                outward += 1;
            }
        }
        assert_eq!(outward, mesh.triangles.len(), "all triangles must face outward");
    }

    #[test]
    fn sphere_mesh_vertices_sit_on_interpolated_zero_set() {
        let g = sphere_grid(0.1);
        let mesh = marching_cubes(&g, 0.0);
        for v in &mesh.vertices {
            let s = g.sample_trilinear(v).unwrap();
            assert!(s.abs() < 1e-4, "vertex off the zero set by {s}");
        }
    }

    #[test]
    fn interior_sphere_mesh_is_watertight() {
        let mesh = marching_cubes(&sphere_grid(0.1), 0.0);
        let mut edge_count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        for (e, c) in edge_count {
            assert_eq!(c, 2, "edge {e:?} shared by {c} triangles");
        }
    }

    #[test]
    fn masked_cells_are_skipped() {
        let mut g = sphere_grid(0.1);
        let n = g.spec.len();
        g.observed = Some(vec![true; n]);
        let full = marching_cubes(&g, 0.0).triangles.len();
        // Hide the half-space x < 32.
        let mask: Vec<bool> = (0..n).map(|i| g.spec.coords(i)[0] >= 32).collect();
        g.observed = Some(mask);
        let half = marching_cubes(&g, 0.0);
        assert!(half.triangles.len() < full);
        assert!(half.triangles.len() > full / 4);
        for v in &half.vertices {
            assert!(v.x >= 0.32 - 0.011, "vertex {v:?} in the masked half");
        }
    }

    #[test]
    fn mesh_sampling_is_area_weighted() {
        // Two triangles with areas 1:9.
        let mesh = TriMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(5.0, 0.0, 0.0),
                Point3::new(8.0, 0.0, 0.0),
                Point3::new(5.0, 3.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let pts = sample_mesh_surface(&mesh, 10_000, 7).unwrap();
        let in_big = pts.iter().filter(|p| p.x >= 4.0).count();
        let frac = in_big as f64 / pts.len() as f64;
        assert!((frac - 0.9).abs() < 0.03, "big triangle got {frac}");
        assert_eq!(pts, sample_mesh_surface(&mesh, 10_000, 7).unwrap());
    }

    #[test]
    fn single_triangle_sampling_stays_inside() {
        let mesh = TriMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
        };
        for p in sample_mesh_surface(&mesh, 500, 1).unwrap() {
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x + p.y <= 1.0 + 1e-12 && p.z == 0.0);
        }
        assert!(matches!(sample_mesh_surface(&TriMesh::default(), 10, 0), Err(Error::EmptyMesh)));
    }

    fn camera_towards(eye: Point3<f64>, target: Point3<f64>, width: usize, height: usize) -> Camera {
        let mut cam = Camera::default_vga().look_at(eye, target);
        cam.width = width;
        cam.height = height;
        cam.fx = 0.75 * width as f64;
        cam.fy = 0.75 * width as f64;
        cam.cx = width as f64 / 2.0;
        cam.cy = height as f64 / 2.0;
        cam
    }

    #[test]
    fn visible_faces_sees_facing_triangle_and_occlusion() {
        // Two coaxial triangles; the near one hides the far one.
        let near = [
            Point3::new(-1.0, -1.0, 0.5),
            Point3::new(1.0, -1.0, 0.5),
            Point3::new(0.0, 1.5, 0.5),
        ];
        let far = [
            Point3::new(-1.0, -1.0, 1.0),
            Point3::new(1.0, -1.0, 1.0),
            Point3::new(0.0, 1.5, 1.0),
        ];
        let mesh = TriMesh {
            vertices: near.into_iter().chain(far).collect(),
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let cam = camera_towards(Point3::new(0.0, 0.0, -1.0), Point3::new(0.0, 0.0, 1.0), 64, 48);
        assert_eq!(visible_faces(&mesh, &cam), vec![0]);
    }

    fn unit_box_mesh(half: f64, center: Point3<f64>) -> TriMesh {
        let spec = GridSpec::new(
            [40, 40, 40],
            0.02,
            Point3::from(center.coords - Vector3::repeat(0.4)),
            0.08,
        )
        .unwrap();
        let sq = Superquadric {
            scales: Vector3::repeat(half),
            exponents: Vector3::repeat(100.0),
            rotation: nalgebra::Rotation3::identity(),
            translation: center.coords,
        };
        let (tsdf, _, _) = rasterize_scene(&Scene { objects: vec![sq], seed: None }, &spec).unwrap();
        marching_cubes(&tsdf, 0.0)
    }

    #[test]
    fn box_viewed_from_x_shows_only_that_face() {
        let center = Point3::new(0.0, 0.0, 0.0);
        let mesh = unit_box_mesh(0.15, center);
        let cam = camera_towards(Point3::new(1.0, 0.0, 0.0), center, 96, 96);
        let vis = visible_faces(&mesh, &cam);
        assert!(!vis.is_empty());
        for ti in &vis {
            let [a, b, c] = mesh.triangles[*ti];
            for vi in [a, b, c] {
                let v = mesh.vertices[vi as usize];
                assert!(v.x > 0.10, "vertex {v:?} of visible triangle {ti} is not on the +x side");
            }
        }
        // Brute-force oracle: every pixel ray against every triangle.
        let origin = cam.position();
        let mut oracle = vec![false; mesh.triangles.len()];
        for v in 0..cam.height {
            for u in 0..cam.width {
                let dir = cam.pixel_ray(u as f64, v as f64);
                let mut best: Option<(usize, f64)> = None;
                for (ti, t) in mesh.triangles.iter().enumerate() {
                    if let Some(hit) = ray_triangle(
                        &origin,
                        &dir,
                        &mesh.vertices[t[0] as usize],
                        &mesh.vertices[t[1] as usize],
                        &mesh.vertices[t[2] as usize],
                    ) {
                        if best.is_none_or(|(_, bt)| hit < bt) {
                            best = Some((ti, hit));
                        }
                    }
                }
                if let Some((ti, _)) = best {
                    oracle[ti] = true;
                }
            }
        }
        let oracle_vis: Vec<usize> =
            oracle.iter().enumerate().filter_map(|(i, &s)| s.then_some(i)).collect();
        assert_eq!(vis, oracle_vis);
    }

    #[test]
    fn halving_resolution_with_intrinsics_never_adds_faces() {
        let center = Point3::new(0.0, 0.0, 0.0);
        let mesh = unit_box_mesh(0.15, center);
        let hi = camera_towards(Point3::new(0.8, 0.5, 0.4), center, 128, 128);
        let mut lo = hi.clone();
        lo.width = 64;
        lo.height = 64;
        lo.fx /= 2.0;
        lo.fy /= 2.0;
        lo.cx /= 2.0;
        lo.cy /= 2.0;
        let hi_vis = visible_faces(&mesh, &hi);
        let lo_vis = visible_faces(&mesh, &lo);
        for ti in &lo_vis {
            assert!(hi_vis.contains(ti), "face {ti} appears only at low resolution");
        }
    }

    #[test]
    fn segment_points_by_labels() {
        let spec = GridSpec::default();
        let mut labels = InstanceLabels::zeros(spec);
        // Label voxel (10,10,10) as 1 and (20,20,20) as 2.
        let a = spec.index(10, 10, 10);
        let b = spec.index(20, 20, 20);
        labels.labels[a] = 1;
        labels.labels[b] = 2;
        let pts = vec![
            spec.voxel_center(10, 10, 10),
            spec.voxel_center(10, 10, 10) + Vector3::new(0.004, 0.0, 0.0),
            spec.voxel_center(20, 20, 20),
            spec.voxel_center(40, 40, 40), // label 0: dropped
            // Exactly on the boundary between voxel 10 and 11 in x: half-open
            // intervals assign it to voxel 11, which is unlabeled.
            Point3::new(0.11, 0.105, 0.105),
        ];
        let segs = segment_points(&pts, &labels);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].0, 1);
        assert_eq!(segs[0].1.len(), 2);
        assert_eq!(segs[1].0, 2);
        assert_eq!(segs[1].1.len(), 1);
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = marching_cubes(&sphere_grid(0.08), 0.0);
        let path = dir.path().join("m.obj");
        write_obj(&mesh, &path).unwrap();
        let back = read_obj(&path).unwrap();
        assert_eq!(mesh.triangles, back.triangles);
        assert_eq!(mesh.vertices, back.vertices);
    }

    #[test]
    fn two_independent_samplings_agree_within_chamfer_bound() {
        let mesh = marching_cubes(&sphere_grid(0.1), 0.0);
        let a = sample_mesh_surface(&mesh, 1000, 1).unwrap();
        let b = sample_mesh_surface(&mesh, 1000, 2).unwrap();
        let d = crate::metrics::chamfer(&a, &b).unwrap();
        assert!(d < 2.0 * mesh.mean_edge_length(), "chamfer {d}");
    }
}
