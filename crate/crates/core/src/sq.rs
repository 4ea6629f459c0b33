//! Superquadric shapes and randomized scenes of them.
//!
//! A superquadric is the convex solid `|x/a1|^r + |y/a2|^s + |z/a3|^t <= 1`
//! in its object frame, posed in the world by a rotation and translation.
//! Scenes are ordered collections of superquadrics resting above the floor
//! plane z = 0. Synthesis replaces a physics engine with a deterministic
//! drop-and-settle pass; rasterization produces the ground-truth TSDF,
//! center-vote field and instance labels on a voxel grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{GridSpec, InstanceLabels, TsdfGrid, VectorField};
use crate::{Error, Result};

/// Floor of the implicit value when evaluating the distance ratio; keeps the
/// approximate distance finite deep inside high-exponent shapes.
pub(crate) const MIN_IMPLICIT: f64 = 1e-30;

/// Convex superquadric: per-axis scales (meters), per-axis exponents, and an
/// object-to-world pose.
#[derive(Debug, Clone)]
pub struct Superquadric {
    pub scales: Vector3<f64>,
    pub exponents: Vector3<f64>,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct SuperquadricJson {
    scale: [f64; 3],
    exponents: [f64; 3],
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Superquadric {
    pub fn new(
        scales: Vector3<f64>,
        exponents: Vector3<f64>,
        rotation: Rotation3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if scales.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidInput(format!("scales {scales:?} must be positive")));
        }
        if exponents.iter().any(|&e| !(e >= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "exponents {exponents:?} must be >= 1 for convexity"
            )));
        }
        Ok(Superquadric { scales, exponents, rotation, translation })
    }

    pub fn sphere(radius: f64, center: Point3<f64>) -> Self {
        Superquadric {
            scales: Vector3::repeat(radius),
            exponents: Vector3::repeat(2.0),
            rotation: Rotation3::identity(),
            translation: center.coords,
        }
    }

    /// Object centroid in world coordinates.
    pub fn centroid(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    /// Map a world point into the object frame.
    #[inline]
    pub fn to_object(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p.coords - self.translation)
    }

    /// Implicit value `f = |x/a1|^r + |y/a2|^s + |z/a3|^t` in the object
    /// frame: f < 1 inside, f = 1 on the surface, f > 1 outside.
    pub fn implicit_value(&self, p: &Point3<f64>) -> f64 {
        let q = self.to_object(p);
        let mut f = 0.0;
        for a in 0..3 {
            f += (q[a].abs() / self.scales[a]).powf(self.exponents[a]);
        }
        f
    }

    /// Approximate signed Euclidean distance to the surface:
    /// `d = |O->P| * (f - 1) / f`. Negative inside, positive outside, zero on
    /// the surface; away from the surface it overestimates the true distance.
    pub fn approx_distance(&self, p: &Point3<f64>) -> Result<f64> {
        let q = self.to_object(p);
        let rho = q.norm();
        if rho <= 1e-9 {
            return Err(Error::DegeneratePoint);
        }
        let mut f = 0.0;
        for a in 0..3 {
            f += (q[a].abs() / self.scales[a]).powf(self.exponents[a]);
        }
        Ok(rho * (1.0 - 1.0 / f.max(MIN_IMPLICIT)))
    }

    /// Largest object-frame half-extent; the shape fits in the box `[-a, a]`.
    pub fn max_scale(&self) -> f64 {
        self.scales.iter().fold(0.0_f64, |m, &a| m.max(a))
    }

    /// World positions of the 8 corners of the object-frame bounding box.
    pub fn bounding_corners(&self) -> [Point3<f64>; 8] {
        let a = self.scales;
        let mut out = [Point3::origin(); 8];
        for (k, corner) in out.iter_mut().enumerate() {
            let s = Vector3::new(
                if k & 1 == 0 { -a.x } else { a.x },
                if k & 2 == 0 { -a.y } else { a.y },
                if k & 4 == 0 { -a.z } else { a.z },
            );
            *corner = Point3::from(self.rotation * s + self.translation);
        }
        out
    }

    /// Intersection of the object-frame ray along unit direction `u` with the
    /// surface.
    fn radial_surface_point(&self, u: &Vector3<f64>) -> Vector3<f64> {
        // Largest radius at which any single axis term reaches 1; the surface
        // radius lies in (0, r_max] so the powers below never overflow.
        let mut r_max = f64::INFINITY;
        for a in 0..3 {
            if u[a] != 0.0 {
                r_max = r_max.min(self.scales[a] / u[a].abs());
            }
        }
        let mut c = [0.0_f64; 3];
        for a in 0..3 {
            c[a] = (r_max * u[a].abs() / self.scales[a]).powf(self.exponents[a]);
        }
        // g(t) = sum c_a t^e_a is convex and increasing with g(1) >= 1, so
        // Newton from t = 1 descends monotonically onto the root.
        let mut t = 1.0_f64;
        for _ in 0..64 {
            let mut g = -1.0;
            let mut dg = 0.0;
            for a in 0..3 {
                if c[a] > 0.0 {
                    let p = c[a] * t.powf(self.exponents[a]);
                    g += p;
                    dg += self.exponents[a] * p / t;
                }
            }
            if g.abs() < 1e-13 {
                break;
            }
            t -= g / dg;
        }
        u * (r_max * t)
    }

    /// World surface point in the object-frame unit direction `u`.
    pub fn surface_point(&self, u: &Vector3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * self.radial_surface_point(u) + self.translation)
    }

    /// Distance from `p` to its radial projection onto the surface (the
    /// surface point along the center ray through `p`). The shape is
    /// star-shaped, so this upper-bounds the true distance to the surface
    /// and, unlike nearest-neighbor distances between finite samplings, has
    /// no sampling floor.
    pub fn radial_surface_distance(&self, p: &Point3<f64>) -> Result<f64> {
        let q = self.to_object(p);
        let n = q.norm();
        if n <= 1e-9 {
            return Err(Error::DegeneratePoint);
        }
        Ok((self.surface_point(&(q / n)) - p).norm())
    }

    /// Draw `n` approximately area-uniform surface samples, in world
    /// coordinates. Deterministic for a fixed seed.
    ///
    /// Candidate points come from a direction lattice solved radially onto the
    /// surface (so flat faces of box-like shapes are covered), then `n` of
    /// them are drawn with probability proportional to the local area element
    /// estimated from lattice-neighbor cross products.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Point3<f64>> {
        assert!(n >= 1, "sample_surface needs n >= 1");
        const OVERSAMPLE: usize = 100;
        let n_eta = (((OVERSAMPLE * n) as f64 / 2.0).sqrt().ceil() as usize).max(16);
        let n_omega = 2 * n_eta;

        // Object-frame lattice of surface points, eta rows in parallel.
        let rows: Vec<Vec<Vector3<f64>>> = (0..n_eta)
            .into_par_iter()
            .map(|i| {
                let eta = -std::f64::consts::FRAC_PI_2
                    + std::f64::consts::PI * (i as f64 + 0.5) / n_eta as f64;
                (0..n_omega)
                    .map(|j| {
                        let omega = -std::f64::consts::PI
                            + 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / n_omega as f64;
                        let u = Vector3::new(
                            eta.cos() * omega.cos(),
                            eta.cos() * omega.sin(),
                            eta.sin(),
                        );
                        self.radial_surface_point(&u)
                    })
                    .collect()
            })
            .collect();

        // Area element per node from central differences; omega wraps, eta is
        // one-sided at the poles.
        let mut weights = vec![0.0_f64; n_eta * n_omega];
        for i in 0..n_eta {
            let i_lo = i.saturating_sub(1);
            let i_hi = (i + 1).min(n_eta - 1);
            for j in 0..n_omega {
                let j_lo = (j + n_omega - 1) % n_omega;
                let j_hi = (j + 1) % n_omega;
                let d_eta = rows[i_hi][j] - rows[i_lo][j];
                let d_omega = rows[i][j_hi] - rows[i][j_lo];
                weights[i * n_omega + j] = d_eta.cross(&d_omega).norm();
            }
        }
        let mut cumulative = weights;
        let mut acc = 0.0;
        for w in cumulative.iter_mut() {
            acc += *w;
            *w = acc;
        }
        let total = acc;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r = rng.random_range(0.0..total);
                let k = cumulative.partition_point(|&c| c <= r).min(n_eta * n_omega - 1);
                let q = rows[k / n_omega][k % n_omega];
                Point3::from(self.rotation * q + self.translation)
            })
            .collect()
    }

    fn to_json(&self) -> SuperquadricJson {
        let m = self.rotation.matrix();
        let mut rotation = [0f64; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = m[(r, c)];
            }
        }
        SuperquadricJson {
            scale: [self.scales.x, self.scales.y, self.scales.z],
            exponents: [self.exponents.x, self.exponents.y, self.exponents.z],
            rotation,
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }

    fn from_json(j: &SuperquadricJson) -> Result<Self> {
        let m = Matrix3::from_row_slice(&j.rotation);
        let err = (m.transpose() * m - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::Format(format!("rotation is not orthonormal (deviation {err:.2e})")));
        }
        Superquadric::new(
            Vector3::new(j.scale[0], j.scale[1], j.scale[2]),
            Vector3::new(j.exponents[0], j.exponents[1], j.exponents[2]),
            Rotation3::from_matrix_unchecked(m),
            Vector3::new(j.translation[0], j.translation[1], j.translation[2]),
        )
    }
}

/// Ordered collection of superquadrics above the floor plane z = 0.
#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<Superquadric>,
    /// Seed that synthesized the scene; `None` for scenes produced by fitting.
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    objects: Vec<SuperquadricJson>,
    seed: Option<u64>,
}

impl Scene {
    pub fn to_json_string(&self) -> Result<String> {
        let j = SceneJson {
            objects: self.objects.iter().map(|o| o.to_json()).collect(),
            seed: self.seed,
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let j: SceneJson = serde_json::from_str(s)?;
        let objects = j.objects.iter().map(Superquadric::from_json).collect::<Result<_>>()?;
        Ok(Scene { objects, seed: j.seed })
    }

    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json_string()?.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut s = String::new();
        use std::io::Read as _;
        BufReader::new(File::open(path)?).read_to_string(&mut s)?;
        Scene::from_json_str(&s)
    }
}

/// Ranges and knobs for randomized scene synthesis. Defaults follow the
/// training-set recipe: 3-4 objects, scales 5-30 cm, exponents 2-100
/// (log-uniform).
#[derive(Debug, Clone)]
pub struct SynthesisParams {
    pub min_objects: usize,
    pub max_objects: usize,
    pub scale_range: (f64, f64),
    pub exponent_range: (f64, f64),
    /// Workspace extent; objects must land inside `[0, extent]` per axis.
    pub extent: Vector3<f64>,
    /// Surface samples per object used by the settle pass.
    pub surface_samples: usize,
    /// Placement attempts per object before synthesis fails.
    pub max_attempts: usize,
    /// Clearance margin to the workspace walls.
    pub wall_margin: f64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        let extent = GridSpec::default().extent();
        SynthesisParams {
            min_objects: 3,
            max_objects: 4,
            scale_range: (0.05, 0.30),
            exponent_range: (2.0, 100.0),
            extent,
            surface_samples: 500,
            max_attempts: 400,
            wall_margin: 0.01,
        }
    }
}

/// Contact threshold for the settle pass, meters.
const CONTACT_CLEARANCE: f64 = 1e-3;

struct PlacedObject {
    sq: Superquadric,
    samples: Vec<Point3<f64>>,
}

/// Randomly place and settle superquadrics into a stable stack.
///
/// Objects are placed one at a time at a uniform (x, y) in the central half
/// of the workspace with a random axis-aligned base orientation plus uniform
/// yaw, then lowered from above in 1 mm steps until the minimum approximate
/// distance from their surface samples to the floor and to previously placed
/// objects first drops below 1 mm; a final bisection lands the object just in
/// contact without penetration. Deterministic for a fixed seed.
pub fn synthesize_scene(seed: u64, params: &SynthesisParams) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if params.min_objects < 1 || params.max_objects < params.min_objects {
        return Err(Error::InvalidInput("object count range is empty".into()));
    }
    let n_objects = rng.random_range(params.min_objects..=params.max_objects);

    let base_rotations: Vec<Rotation3<f64>> = {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mut v = vec![Rotation3::identity()];
        for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
            v.push(Rotation3::from_axis_angle(&axis, half_pi));
            v.push(Rotation3::from_axis_angle(&axis, -half_pi));
        }
        v
    };

    let (x_lo, x_hi) = (params.extent.x * 0.25, params.extent.x * 0.75);
    let (y_lo, y_hi) = (params.extent.y * 0.25, params.extent.y * 0.75);

    let mut placed: Vec<PlacedObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut ok = false;
        for _attempt in 0..params.max_attempts {
            let scales = Vector3::new(
                rng.random_range(params.scale_range.0..=params.scale_range.1),
                rng.random_range(params.scale_range.0..=params.scale_range.1),
                rng.random_range(params.scale_range.0..=params.scale_range.1),
            );
            let (e_lo, e_hi) = (params.exponent_range.0.ln(), params.exponent_range.1.ln());
            let exponents = Vector3::new(
                rng.random_range(e_lo..=e_hi).exp(),
                rng.random_range(e_lo..=e_hi).exp(),
                rng.random_range(e_lo..=e_hi).exp(),
            );
            let base = base_rotations[rng.random_range(0..base_rotations.len())];
            let yaw =
                Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..std::f64::consts::TAU));
            let rotation = yaw * base;
            let x = rng.random_range(x_lo..x_hi);
            let y = rng.random_range(y_lo..y_hi);
            let sample_seed: u64 = rng.random();

            let proto = Superquadric::new(scales, exponents, rotation, Vector3::new(x, y, 0.0))?;
            // Object-frame samples rotated once; settling only shifts z.
            let local: Vec<Vector3<f64>> = Superquadric { translation: Vector3::zeros(), ..proto.clone() }
                .sample_surface(params.surface_samples, sample_seed)
                .iter()
                .map(|p| p.coords)
                .collect();

            if let Some(sq) = settle(&proto, &local, &placed) {
                if inside_workspace(&sq, params) {
                    let samples = local.iter().map(|s| Point3::from(s + sq.translation)).collect();
                    placed.push(PlacedObject { sq, samples });
                    ok = true;
                    break;
                }
            }
        }
        if !ok {
            return Err(Error::Synthesis(format!(
                "no valid placement for object {} after {} attempts (seed {seed})",
                placed.len(),
                params.max_attempts
            )));
        }
    }

    Ok(Scene { objects: placed.into_iter().map(|p| p.sq).collect(), seed: Some(seed) })
}

fn inside_workspace(sq: &Superquadric, params: &SynthesisParams) -> bool {
    let m = params.wall_margin;
    sq.bounding_corners().iter().all(|c| {
        c.x >= m
            && c.x <= params.extent.x - m
            && c.y >= m
            && c.y <= params.extent.y - m
            && c.z <= params.extent.z - m
    })
}

/// Minimum clearance of the candidate object at height `z`: distance of its
/// samples to the floor and to existing objects, and of existing objects'
/// samples to it. Penetration shows up as a negative value.
fn clearance(proto: &Superquadric, local: &[Vector3<f64>], z: f64, placed: &[PlacedObject]) -> f64 {
    let translation = Vector3::new(proto.translation.x, proto.translation.y, z);
    let candidate = Superquadric { translation, ..proto.clone() };
    let mut min_c = f64::INFINITY;
    for s in local {
        let w = s + translation;
        min_c = min_c.min(w.z);
        if min_c < 0.0 {
            return min_c;
        }
        for other in placed {
            // Cheap sphere bound before the exact distance.
            let bound = (w - other.sq.translation).norm() - other.sq.scales.norm();
            if bound > 0.05 {
                continue;
            }
            match other.sq.approx_distance(&Point3::from(w)) {
                Ok(d) => min_c = min_c.min(d),
                Err(_) => return f64::NEG_INFINITY,
            }
            if min_c < 0.0 {
                return min_c;
            }
        }
    }
    for other in placed {
        let bound =
            (other.sq.translation - translation).norm() - other.sq.scales.norm() - candidate.scales.norm();
        if bound > 0.05 {
            continue;
        }
        for s in &other.samples {
            match candidate.approx_distance(s) {
                Ok(d) => min_c = min_c.min(d),
                Err(_) => return f64::NEG_INFINITY,
            }
            if min_c < 0.0 {
                return min_c;
            }
        }
    }
    min_c
}

fn settle(proto: &Superquadric, local: &[Vector3<f64>], placed: &[PlacedObject]) -> Option<Superquadric> {
    let bottom = local.iter().map(|s| s.z).fold(f64::INFINITY, f64::min);
    let top_of_stack = placed
        .iter()
        .flat_map(|p| p.samples.iter().map(|s| s.z))
        .fold(0.0_f64, f64::max);
    // Start with the object's lowest sample just above everything placed.
    let start = top_of_stack - bottom + 2.0 * CONTACT_CLEARANCE;
    if clearance(proto, local, start, placed) < CONTACT_CLEARANCE {
        return None;
    }
    let step = 1e-3;
    let z_floor = -bottom - 0.05;
    let mut z_hi = start;
    loop {
        let z_next = z_hi - step;
        if z_next < z_floor {
            return None;
        }
        if clearance(proto, local, z_next, placed) < CONTACT_CLEARANCE {
            break;
        }
        z_hi = z_next;
    }
    // Bisect to the lowest height that still keeps 1 mm of clearance.
    let mut lo = z_hi - step;
    let mut hi = z_hi;
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if clearance(proto, local, mid, placed) < CONTACT_CLEARANCE {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let translation = Vector3::new(proto.translation.x, proto.translation.y, hi);
    Some(Superquadric { translation, ..proto.clone() })
}

/// Rasterize a scene into its ground-truth grids.
///
/// Per voxel: the TSDF holds the clamped minimum approximate distance over
/// all objects; voxels with non-positive distance get the index of the
/// nearest object (ties to the lowest index) and a unit vote vector from the
/// voxel center to that object's centroid. A voxel exactly on a centroid
/// votes +z.
pub fn rasterize_scene(scene: &Scene, spec: &GridSpec) -> Result<(TsdfGrid, VectorField, InstanceLabels)> {
    if scene.objects.is_empty() {
        return Err(Error::InvalidInput("scene has no objects".into()));
    }
    spec.validate()?;
    let n = spec.len();
    let trunc = spec.truncation;
    let slab = spec.dims[0] * spec.dims[1];

    let mut values = vec![0.0_f64; n];
    let mut vectors = vec![Vector3::zeros(); n];
    let mut labels = vec![0u32; n];

    values
        .par_chunks_mut(slab)
        .zip(vectors.par_chunks_mut(slab))
        .zip(labels.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(z, ((vals, vecs), labs))| {
            for y in 0..spec.dims[1] {
                for x in 0..spec.dims[0] {
                    let i = y * spec.dims[0] + x;
                    let center = spec.voxel_center(x, y, z);
                    let mut best = f64::INFINITY;
                    let mut best_obj = 0usize;
                    for (k, sq) in scene.objects.iter().enumerate() {
                        // A voxel on the centroid is as inside as it gets.
                        let d = sq.approx_distance(&center).unwrap_or(-trunc);
                        if d < best {
                            best = d;
                            best_obj = k;
                        }
                    }
                    vals[i] = best.clamp(-trunc, trunc);
                    if best <= 0.0 {
                        labs[i] = best_obj as u32 + 1;
                        let to_center = scene.objects[best_obj].centroid() - center;
                        let norm = to_center.norm();
                        vecs[i] = if norm < 1e-12 { Vector3::z() } else { to_center / norm };
                    }
                }
            }
        });

    Ok((
        TsdfGrid { spec: *spec, values, observed: None },
        VectorField { spec: *spec, vectors },
        InstanceLabels { spec: *spec, labels },
    ))
}
