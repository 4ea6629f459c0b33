//! Depth-image fusion into partial TSDFs and the synthetic depth oracle.
//!
//! Each pixel ray is traversed through the grid with exact DDA; every voxel
//! it crosses stores the projective signed distance to the observed surface,
//! clamped to the truncation band. Across rays a voxel keeps the value of
//! smallest magnitude (ties to the smaller signed value), so fusion of any
//! number of views is order-independent. Voxels more than one truncation
//! band behind a surface stay unobserved: occluded space remains unknown.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;

use crate::dda::GridRay;
use crate::grid::{Camera, DepthView, GridSpec, TsdfGrid};
use crate::parallel::map_reduce_chunks;
use crate::sq::Scene;
use crate::{Error, Result};

struct Accumulator {
    values: Vec<f64>,
    observed: Vec<bool>,
    hits: usize,
}

impl Accumulator {
    fn new(spec: &GridSpec) -> Self {
        Accumulator {
            values: vec![spec.truncation; spec.len()],
            observed: vec![false; spec.len()],
            hits: 0,
        }
    }

    /// Keep the smaller-magnitude value; break magnitude ties toward the
    /// smaller signed value. Commutative and associative.
    #[inline]
    fn deposit(&mut self, idx: usize, v: f64) {
        if !self.observed[idx] {
            self.observed[idx] = true;
            self.values[idx] = v;
            return;
        }
        let cur = self.values[idx];
        if v.abs() < cur.abs() || (v.abs() == cur.abs() && v < cur) {
            self.values[idx] = v;
        }
    }

    fn merge(mut self, other: Accumulator) -> Accumulator {
        for i in 0..self.values.len() {
            if other.observed[i] {
                self.deposit(i, other.values[i]);
            }
        }
        self.hits += other.hits;
        self
    }
}

fn integrate_ray(acc: &mut Accumulator, spec: &GridSpec, camera: &Camera, u: usize, v: usize, depth: f64) {
    let origin = camera.position();
    let dir = camera.pixel_ray(u as f64, v as f64).into_inner();

    // Rays ending on the workspace floor plane carry free-space evidence
    // only: without this, grazing floor hits leave slightly negative values
    // in the bottom voxel layer and marching cubes grows a floor sheet that
    // is not scene content. Mirrors floor-plane segmentation of real depth.
    let hit_z = origin.z + dir.z * depth;
    let floor_hit = hit_z < 0.5 * spec.voxel_size;
    let value_floor = if floor_hit { 0.5 * spec.voxel_size } else { f64::NEG_INFINITY };

    // Clip to the grid volume.
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let lo = spec.origin[a];
        let hi = spec.origin[a] + spec.extent()[a];
        if dir[a] == 0.0 {
            if origin[a] < lo || origin[a] > hi {
                return;
            }
        } else {
            let (ta, tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    // March only out to one truncation band behind the surface.
    let t_end = t1.min(depth + spec.truncation);
    if t0 > t_end {
        return;
    }

    let start = origin + dir * t0;
    let start_cells = [
        (start.x - spec.origin.x) / spec.voxel_size,
        (start.y - spec.origin.y) / spec.voxel_size,
        (start.z - spec.origin.z) / spec.voxel_size,
    ];
    let velocity = [
        dir.x / spec.voxel_size,
        dir.y / spec.voxel_size,
        dir.z / spec.voxel_size,
    ];
    let mut ray = GridRay::new(start_cells, velocity);
    let mut any = false;
    loop {
        let c = ray.cell();
        if c.iter().enumerate().all(|(a, &ci)| ci >= 0 && (ci as usize) < spec.dims[a]) {
            let (x, y, z) = (c[0] as usize, c[1] as usize, c[2] as usize);
            let center = spec.voxel_center(x, y, z);
            // Projective signed distance along this ray.
            let t_vox = (center - origin).dot(&dir);
            let sdf = (depth - t_vox).clamp(-spec.truncation, spec.truncation).max(value_floor);
            acc.deposit(spec.index(x, y, z), sdf);
            any = true;
        }
        ray.advance();
        if t0 + ray.t_entry() > t_end {
            break;
        }
    }
    if any {
        acc.hits += 1;
    }
}

fn integrate_view(spec: &GridSpec, view: &DepthView, acc: &mut Accumulator) {
    let cam = &view.camera;
    for v in 0..cam.height {
        for u in 0..cam.width {
            let d = view.at(u, v) as f64;
            if d > 0.0 {
                integrate_ray(acc, spec, cam, u, v, d);
            }
        }
    }
}

/// Fuse one or more depth views into a partial TSDF with an observed mask.
/// The per-voxel rule is the minimum-magnitude signed distance over all rays
/// of all views; the observed mask is their union.
pub fn fuse_views(views: &[DepthView], spec: &GridSpec) -> Result<TsdfGrid> {
    if views.is_empty() {
        return Err(Error::InvalidInput("no views to fuse".into()));
    }
    spec.validate()?;
    for view in views {
        view.camera.validate()?;
    }

    // Deterministic parallelism: fixed row-band chunks over all views.
    let total_rows: usize = views.iter().map(|v| v.camera.height).sum();
    let row_of = |mut k: usize| -> (usize, usize) {
        for (vi, view) in views.iter().enumerate() {
            if k < view.camera.height {
                return (vi, k);
            }
            k -= view.camera.height;
        }
        unreachable!()
    };
    let acc = map_reduce_chunks(
        total_rows,
        |rows| {
            let mut acc = Accumulator::new(spec);
            for k in rows {
                let (vi, row) = row_of(k);
                let view = &views[vi];
                for u in 0..view.camera.width {
                    let d = view.at(u, row) as f64;
                    if d > 0.0 {
                        integrate_ray(&mut acc, spec, &view.camera, u, row, d);
                    }
                }
            }
            acc
        },
        Accumulator::merge,
    )
    .expect("at least one row");

    if acc.hits == 0 {
        return Err(Error::EmptyObservation);
    }
    Ok(TsdfGrid { spec: *spec, values: acc.values, observed: Some(acc.observed) })
}

/// Convert a single depth view into a partial TSDF by inverse ray tracing.
pub fn depth_to_partial_tsdf(view: &DepthView, spec: &GridSpec) -> Result<TsdfGrid> {
    fuse_views(std::slice::from_ref(view), spec)
}

/// Hit tolerance of the analytic sphere tracer, meters.
const HIT_EPS: f64 = 1e-6;
/// Sphere-trace step scale; the approximate distance can overestimate.
const STEP_SCALE: f64 = 0.5;
const MAX_TRACE_T: f64 = 50.0;
const MAX_TRACE_STEPS: usize = 4096;

fn scene_distance(scene: &Scene, p: &Point3<f64>) -> f64 {
    let mut d = p.z; // floor plane
    for sq in &scene.objects {
        let od = sq.approx_distance(p).unwrap_or(-sq.max_scale());
        d = d.min(od);
    }
    d
}

/// Render a depth view of an analytic scene (objects plus the floor plane)
/// by sphere tracing the minimum approximate distance with a conservative
/// step scale. Pixels that miss everything hold 0.
pub fn render_scene_depth(scene: &Scene, camera: &Camera) -> DepthView {
    let origin = camera.position();
    let rows: Vec<Vec<f32>> = {
        use rayon::prelude::*;
        (0..camera.height)
            .into_par_iter()
            .map(|v| {
                let mut row = vec![0f32; camera.width];
                for (u, out) in row.iter_mut().enumerate() {
                    let dir = camera.pixel_ray(u as f64, v as f64).into_inner();
                    *out = trace_pixel(scene, &origin, &dir) as f32;
                }
                row
            })
            .collect()
    };
    let depth = rows.concat();
    DepthView { camera: camera.clone(), depth }
}

fn trace_pixel(scene: &Scene, origin: &Point3<f64>, dir: &Vector3<f64>) -> f64 {
    // Per-object bounding radii for cheap lower-bound steps.
    let bounds: Vec<(Point3<f64>, f64)> =
        scene.objects.iter().map(|sq| (sq.centroid(), sq.scales.norm())).collect();
    let mut t = 0.0_f64;
    let mut t_prev = 0.0_f64;
    for _ in 0..MAX_TRACE_STEPS {
        let p = origin + dir * t;
        // The floor distance is exact, so the full step is safe; object
        // steps use the scaled approximate distance only when the cheap
        // center-sphere bound says the object is close.
        let mut step = p.z;
        let mut d_min = p.z;
        for (k, sq) in scene.objects.iter().enumerate() {
            let lower = (p - bounds[k].0).norm() - bounds[k].1;
            if lower > 1e-3 {
                step = step.min(lower);
                d_min = d_min.min(lower);
            } else {
                let d = sq.approx_distance(&p).unwrap_or(-sq.max_scale());
                step = step.min(STEP_SCALE * d);
                d_min = d_min.min(d);
            }
        }
        if d_min < 0.0 {
            // Overshot through a surface: bisect the crossing.
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if scene_distance(scene, &(origin + dir * mid)) < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return 0.5 * (lo + hi);
        }
        if d_min < HIT_EPS {
            return t;
        }
        t_prev = t;
        t += step.max(1e-5);
        if t > MAX_TRACE_T {
            return 0.0;
        }
    }
    0.0
}

/// Draw a camera pose from the training distribution: lateral offsets within
/// (-1 m, 1 m) of the scene center, height within (10 cm, 1 m), re-drawn
/// until at least 0.5 m from the scene center, looking at the center with
/// zero roll.
pub fn sample_training_camera<R: Rng>(rng: &mut R, scene_center: Point3<f64>) -> Camera {
    loop {
        let x = scene_center.x + rng.random_range(-1.0..1.0);
        let y = scene_center.y + rng.random_range(-1.0..1.0);
        let z = rng.random_range(0.1..1.0);
        let eye = Point3::new(x, y, z);
        if (eye - scene_center).norm() >= 0.5 {
            return Camera::default_vga().look_at(eye, scene_center);
        }
    }
}

// --- Depth file formats ---------------------------------------------------

/// Write a depth image as a little-endian grayscale PFM (bottom-to-top rows,
/// negative scale marks little-endian).
pub fn write_pfm<P: AsRef<Path>>(path: P, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::DimMismatch(format!("{} pixels for {width}x{height}", data.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    for row in (0..height).rev() {
        for u in 0..width {
            w.write_all(&data[row * width + u].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a grayscale PFM depth image; returns (width, height, row-major
/// top-down pixels).
pub fn read_pfm<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<f32>)> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("truncated PFM header at {what}")));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(Error::Format(format!("PFM magic {magic:?}, expected \"Pf\" (grayscale)")));
    }
    let width: usize = token("width")?.parse().map_err(|_| Error::Format("bad PFM width".into()))?;
    let height: usize = token("height")?.parse().map_err(|_| Error::Format("bad PFM height".into()))?;
    let scale: f64 = token("scale")?.parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    pos += 1; // single whitespace after the scale
    let want = width * height * 4;
    if buf.len() - pos < want {
        return Err(Error::Format(format!("PFM payload holds {} of {want} bytes", buf.len() - pos)));
    }
    let le = scale < 0.0;
    let mut data = vec![0f32; width * height];
    for row_file in 0..height {
        let row = height - 1 - row_file; // stored bottom-to-top
        for u in 0..width {
            let off = pos + (row_file * width + u) * 4;
            let raw: [u8; 4] = buf[off..off + 4].try_into().unwrap();
            data[row * width + u] = if le { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        }
    }
    Ok((width, height, data))
}

const DPT_MAGIC: [u8; 4] = *b"DPT1";

/// Write a depth image in the raw `DPT1` format: 16-byte header (magic,
/// width, height, reserved), then row-major top-down f32 little-endian.
pub fn write_dpt<P: AsRef<Path>>(path: P, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::DimMismatch(format!("{} pixels for {width}x{height}", data.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DPT_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for d in data {
        w.write_all(&d.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `DPT1` depth image.
pub fn read_dpt<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<f32>)> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    if buf.len() < 16 || buf[0..4] != DPT_MAGIC {
        return Err(Error::Format("not a DPT1 file".into()));
    }
    let width = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let want = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("DPT1 dims overflow".into()))?;
    if buf.len() - 16 != want {
        return Err(Error::Format(format!("DPT1 payload holds {} of {want} bytes", buf.len() - 16)));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, data))
}

/// Read a depth image of either supported format, sniffing the magic bytes.
pub fn read_depth_auto<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<f32>)> {
    let mut head = [0u8; 4];
    {
        let mut f = File::open(&path)?;
        f.read_exact(&mut head)?;
    }
    if head == DPT_MAGIC {
        read_dpt(path)
    } else if &head[0..2] == b"Pf" {
        read_pfm(path)
    } else {
        Err(Error::Format(format!("unrecognized depth file magic {head:?}")))
    }
}
