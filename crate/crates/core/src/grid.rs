//! Dense voxel grids, cameras and depth views.
//!
//! All grids share one memory order: row-major with x fastest,
//! `idx = (z * dimY + y) * dimX + x`, so the `VXG1` binary format is
//! unambiguous across languages. World placement is carried by [`GridSpec`]:
//! `origin` is the corner of voxel `(0,0,0)` and voxel centers sit at
//! `origin + (i + 0.5) * voxel_size`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Geometry of a dense voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Voxel counts per axis, each at least 2.
    pub dims: [usize; 3],
    /// Edge length of one voxel in meters.
    pub voxel_size: f64,
    /// World position of the corner of voxel (0,0,0), meters.
    pub origin: Point3<f64>,
    /// Half-width of the signed-distance clamp band, meters.
    pub truncation: f64,
}

impl Default for GridSpec {
    /// 64^3 grid of 1 cm voxels (0.64 m extent) with a 5 cm truncation band,
    /// floor plane on the grid's bottom face at z = 0.
    fn default() -> Self {
        GridSpec {
            dims: [64, 64, 64],
            voxel_size: 0.01,
            origin: Point3::origin(),
            truncation: 0.05,
        }
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: Point3<f64>, truncation: f64) -> Result<Self> {
        let spec = GridSpec { dims, voxel_size, origin, truncation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput(format!("grid dims {:?} must all be >= 2", self.dims)));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidInput(format!("voxel size {} must be positive", self.voxel_size)));
        }
        if self.truncation < self.voxel_size {
            return Err(Error::InvalidInput(format!(
                "truncation {} must be at least one voxel ({})",
                self.truncation, self.voxel_size
            )));
        }
        Ok(())
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of voxel (x, y, z); x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    /// World position of the center of voxel (x, y, z).
    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point3<f64> {
        self.origin
            + Vector3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Physical extent per axis in meters.
    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.dims[0] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
            self.dims[2] as f64 * self.voxel_size,
        )
    }

    /// Largest physical extent, used to normalize distances.
    pub fn max_extent(&self) -> f64 {
        self.extent().iter().fold(0.0_f64, |a, &b| a.max(b))
    }

    /// Voxel containing a world point under half-open intervals `[lo, hi)`,
    /// or `None` outside the grid volume.
    pub fn voxel_of(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        let local = (p - self.origin) / self.voxel_size;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = local[a].floor();
            if v < 0.0 || v >= self.dims[a] as f64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    }

    /// Continuous lattice coordinates of a point: integer values fall on voxel
    /// centers. Errors when the point leaves the span of voxel centers.
    fn lattice_coords(&self, p: &Point3<f64>) -> Result<Vector3<f64>> {
        let local = (p - self.origin) / self.voxel_size - Vector3::repeat(0.5);
        for a in 0..3 {
            if !(local[a] >= 0.0 && local[a] <= (self.dims[a] - 1) as f64) {
                return Err(Error::OutOfDomain(p.x, p.y, p.z));
            }
        }
        Ok(local)
    }

    /// Whether a point lies inside the trilinear interpolation domain.
    pub fn in_interpolation_domain(&self, p: &Point3<f64>) -> bool {
        self.lattice_coords(p).is_ok()
    }

    /// Grids are exchangeable when dims match and the physical metadata agrees
    /// at file precision (`VXG1` stores it as f32).
    pub fn compatible(&self, other: &GridSpec) -> bool {
        self.dims == other.dims
            && (self.voxel_size as f32) == (other.voxel_size as f32)
            && (self.truncation as f32) == (other.truncation as f32)
            && (0..3).all(|a| (self.origin[a] as f32) == (other.origin[a] as f32))
    }

    pub(crate) fn ensure_compatible(&self, other: &GridSpec) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!("{:?} vs {:?}", self, other)))
        }
    }
}

/// Result of sampling a grid with derivatives: the interpolated value, the
/// eight lattice nodes with their weights (`weight = d value / d node`), and
/// the spatial gradient `d value / d p`.
#[derive(Debug, Clone)]
pub struct TrilinearSample {
    pub value: f64,
    pub nodes: [(usize, f64); 8],
    pub gradient: Vector3<f64>,
}

/// Dense truncated-signed-distance grid, meters.
///
/// Fused grids additionally carry an observed mask distinguishing voxels that
/// were actually measured from voxels left at the `+truncation`
/// initialization; the mask never touches the `VXG1` payload.
#[derive(Debug, Clone)]
pub struct TsdfGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub observed: Option<Vec<bool>>,
}

impl TsdfGrid {
    /// Grid with every voxel at `value`.
    pub fn filled(spec: GridSpec, value: f64) -> Self {
        let n = spec.len();
        TsdfGrid { spec, values: vec![value; n], observed: None }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for a {:?} grid",
                values.len(),
                spec.dims
            )));
        }
        Ok(TsdfGrid { spec, values, observed: None })
    }

    /// Check the TSDF invariants: finite values inside the truncation band.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let band = self.spec.truncation;
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() || v.abs() > band + 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "voxel {i} holds {v}, outside the truncation band +-{band}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn value_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.spec.index(x, y, z)]
    }

    /// Trilinear interpolation of the eight voxel values around `p`.
    pub fn sample_trilinear(&self, p: &Point3<f64>) -> Result<f64> {
        Ok(self.sample_with_gradient(p)?.value)
    }

    /// Trilinear interpolation with node weights and the spatial gradient.
    pub fn sample_with_gradient(&self, p: &Point3<f64>) -> Result<TrilinearSample> {
        let local = self.spec.lattice_coords(p)?;
        let dims = self.spec.dims;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            // Clamp so a point exactly on the far boundary uses the last cell.
            let cell = (local[a].floor() as usize).min(dims[a] - 2);
            base[a] = cell;
            frac[a] = local[a] - cell as f64;
        }
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);

        let idx = |dx: usize, dy: usize, dz: usize| {
            self.spec.index(base[0] + dx, base[1] + dy, base[2] + dz)
        };
        let nodes_idx = [
            idx(0, 0, 0),
            idx(1, 0, 0),
            idx(0, 1, 0),
            idx(1, 1, 0),
            idx(0, 0, 1),
            idx(1, 0, 1),
            idx(0, 1, 1),
            idx(1, 1, 1),
        ];
        let weights = [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ];
        let v: Vec<f64> = nodes_idx.iter().map(|&i| self.values[i]).collect();
        let value: f64 = weights.iter().zip(&v).map(|(w, x)| w * x).sum();

        let inv = 1.0 / self.spec.voxel_size;
        let gradient = Vector3::new(
            ((v[1] - v[0]) * gy * gz + (v[3] - v[2]) * fy * gz + (v[5] - v[4]) * gy * fz + (v[7] - v[6]) * fy * fz) * inv,
            ((v[2] - v[0]) * gx * gz + (v[3] - v[1]) * fx * gz + (v[6] - v[4]) * gx * fz + (v[7] - v[5]) * fx * fz) * inv,
            ((v[4] - v[0]) * gx * gy + (v[5] - v[1]) * fx * gy + (v[6] - v[2]) * gx * fy + (v[7] - v[3]) * fx * fy) * inv,
        );

        let mut nodes = [(0usize, 0f64); 8];
        for i in 0..8 {
            nodes[i] = (nodes_idx[i], weights[i]);
        }
        Ok(TrilinearSample { value, nodes, gradient })
    }

    /// Per-voxel occupancy: 1 where the TSDF is <= 0, else 0.
    pub fn occupancy(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v <= 0.0).collect()
    }

    /// Export the observed mask as a labels grid (1 = observed). All voxels
    /// count as observed when no mask is attached.
    pub fn observed_as_labels(&self) -> InstanceLabels {
        let labels = match &self.observed {
            Some(mask) => mask.iter().map(|&m| m as u32).collect(),
            None => vec![1; self.spec.len()],
        };
        InstanceLabels { spec: self.spec, labels }
    }

    pub fn write_vxg<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, KIND_TSDF, &self.spec)?;
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_vxg<P: AsRef<Path>>(path: P) -> Result<Self> {
        match read_grid(path)? {
            AnyGrid::Tsdf(g) => Ok(g),
            other => Err(Error::Format(format!("expected a TSDF grid, found {}", other.kind_name()))),
        }
    }
}

/// Per-voxel 3-vectors holding center votes: unit vectors on occupied voxels,
/// zero elsewhere.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub spec: GridSpec,
    pub vectors: Vec<Vector3<f64>>,
}

impl VectorField {
    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.len();
        VectorField { spec, vectors: vec![Vector3::zeros(); n] }
    }

    /// Check the unit-norm invariant against a companion occupancy mask.
    pub fn validate(&self, occupancy: &[bool]) -> Result<()> {
        if occupancy.len() != self.vectors.len() {
            return Err(Error::DimMismatch("occupancy mask size".into()));
        }
        for (i, (v, &occ)) in self.vectors.iter().zip(occupancy).enumerate() {
            if occ {
                let n = v.norm();
                if (n - 1.0).abs() > 1e-5 {
                    return Err(Error::InvalidInput(format!("vote at occupied voxel {i} has norm {n}")));
                }
            } else if v.norm() != 0.0 {
                return Err(Error::InvalidInput(format!("vote at free voxel {i} is nonzero")));
            }
        }
        Ok(())
    }

    pub fn write_vxg<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, KIND_VECTOR, &self.spec)?;
        for v in &self.vectors {
            for a in 0..3 {
                w.write_all(&(v[a] as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_vxg<P: AsRef<Path>>(path: P) -> Result<Self> {
        match read_grid(path)? {
            AnyGrid::Vectors(g) => Ok(g),
            other => Err(Error::Format(format!("expected a vector field, found {}", other.kind_name()))),
        }
    }
}

/// Per-voxel object index; 0 marks free space, k >= 1 marks object k.
#[derive(Debug, Clone)]
pub struct InstanceLabels {
    pub spec: GridSpec,
    pub labels: Vec<u32>,
}

impl InstanceLabels {
    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.len();
        InstanceLabels { spec, labels: vec![0; n] }
    }

    pub fn write_vxg<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, KIND_LABELS, &self.spec)?;
        for &l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_vxg<P: AsRef<Path>>(path: P) -> Result<Self> {
        match read_grid(path)? {
            AnyGrid::Labels(g) => Ok(g),
            other => Err(Error::Format(format!("expected instance labels, found {}", other.kind_name()))),
        }
    }
}

/// Any of the three grid kinds stored in a `VXG1` file.
#[derive(Debug, Clone)]
pub enum AnyGrid {
    Tsdf(TsdfGrid),
    Vectors(VectorField),
    Labels(InstanceLabels),
}

impl AnyGrid {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyGrid::Tsdf(_) => "tsdf",
            AnyGrid::Vectors(_) => "vector",
            AnyGrid::Labels(_) => "labels",
        }
    }

    pub fn spec(&self) -> &GridSpec {
        match self {
            AnyGrid::Tsdf(g) => &g.spec,
            AnyGrid::Vectors(g) => &g.spec,
            AnyGrid::Labels(g) => &g.spec,
        }
    }

    pub fn write_vxg<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        match self {
            AnyGrid::Tsdf(g) => g.write_vxg(path),
            AnyGrid::Vectors(g) => g.write_vxg(path),
            AnyGrid::Labels(g) => g.write_vxg(path),
        }
    }
}

const VXG_MAGIC: [u8; 4] = *b"VXG1";
const KIND_TSDF: u8 = 1;
const KIND_VECTOR: u8 = 2;
const KIND_LABELS: u8 = 3;

fn write_header<W: Write>(w: &mut W, kind: u8, spec: &GridSpec) -> Result<()> {
    w.write_all(&VXG_MAGIC)?;
    w.write_all(&[kind])?;
    for a in 0..3 {
        let d = u32::try_from(spec.dims[a])
            .map_err(|_| Error::Format(format!("dim {} exceeds u32", spec.dims[a])))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&(spec.voxel_size as f32).to_le_bytes())?;
    for a in 0..3 {
        w.write_all(&(spec.origin[a] as f32).to_le_bytes())?;
    }
    w.write_all(&(spec.truncation as f32).to_le_bytes())?;
    Ok(())
}

/// Read any `VXG1` grid file.
pub fn read_grid<P: AsRef<Path>>(path: P) -> Result<AnyGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    read_grid_bytes(&buf)
}

/// Decode a `VXG1` grid from bytes.
pub fn read_grid_bytes(buf: &[u8]) -> Result<AnyGrid> {
    const HEADER: usize = 4 + 1 + 12 + 4 + 12 + 4;
    if buf.len() < HEADER {
        return Err(Error::Format(format!("file too short for a VXG1 header ({} bytes)", buf.len())));
    }
    if buf[0..4] != VXG_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"VXG1\"", &buf[0..4])));
    }
    let kind = buf[4];
    let u32_at = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    let dims_u32 = [u32_at(5), u32_at(9), u32_at(13)];
    let voxel_size = f32_at(17) as f64;
    let origin = Point3::new(f32_at(21) as f64, f32_at(25) as f64, f32_at(29) as f64);
    let truncation = f32_at(33) as f64;

    let mut n: usize = 1;
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = dims_u32[a] as usize;
        n = n
            .checked_mul(dims[a])
            .ok_or_else(|| Error::Format(format!("dims {:?} overflow", dims_u32)))?;
    }
    let spec = GridSpec { dims, voxel_size, origin, truncation };
    spec.validate().map_err(|e| Error::Format(format!("bad header: {e}")))?;

    let elem = match kind {
        KIND_TSDF => 4,
        KIND_VECTOR => 12,
        KIND_LABELS => 4,
        k => return Err(Error::Format(format!("unknown grid kind {k}"))),
    };
    let want = n
        .checked_mul(elem)
        .ok_or_else(|| Error::Format(format!("payload for dims {dims:?} overflows")))?;
    let payload = &buf[HEADER..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header promises {} ({:?} x {} bytes)",
            payload.len(),
            want,
            dims,
            elem
        )));
    }

    let f32s = |bytes: &[u8]| -> Vec<f64> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Ok(match kind {
        KIND_TSDF => AnyGrid::Tsdf(TsdfGrid { spec, values: f32s(payload), observed: None }),
        KIND_VECTOR => {
            let flat = f32s(payload);
            let vectors = flat
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect();
            AnyGrid::Vectors(VectorField { spec, vectors })
        }
        KIND_LABELS => {
            let labels = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyGrid::Labels(InstanceLabels { spec, labels })
        }
        _ => unreachable!(),
    })
}

/// Pinhole camera with a world-from-camera pose. Camera frame: x right,
/// y down, z forward; a pixel ray passes through integer pixel coordinates,
/// so the pixel at `(cx, cy)` looks exactly along the optical axis.
#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Camera {
    /// VGA camera with Kinect-like focal lengths, placed at the identity pose.
    pub fn default_vga() -> Self {
        Camera {
            fx: 525.0,
            fy: 525.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Place the camera at `eye` looking at `target` with zero roll
    /// (image up aligned with world +z as far as possible).
    pub fn look_at(mut self, eye: Point3<f64>, target: Point3<f64>) -> Self {
        let forward = Unit::new_normalize(target - eye);
        let world_up = Vector3::z();
        let mut right = forward.cross(&world_up);
        if right.norm() < 1e-9 {
            // Looking straight up or down; any horizontal right vector works.
            right = Vector3::x();
        }
        let right = Unit::new_normalize(right);
        let down = Unit::new_normalize(forward.cross(&right));
        let m = Matrix3::from_columns(&[right.into_inner(), down.into_inner(), forward.into_inner()]);
        self.rotation = Rotation3::from_matrix_unchecked(m);
        self.translation = eye.coords;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        let m = self.rotation.matrix();
        let err = (m.transpose() * m - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::InvalidInput(format!("rotation is not orthonormal (deviation {err:.2e})")));
        }
        Ok(())
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    /// World-space unit direction of the ray through pixel (u, v).
    pub fn pixel_ray(&self, u: f64, v: f64) -> Unit<Vector3<f64>> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Unit::new_normalize(self.rotation * d)
    }

    /// World point at along-ray distance `range` through pixel (u, v).
    pub fn backproject(&self, u: f64, v: f64, range: f64) -> Point3<f64> {
        self.position() + self.pixel_ray(u, v).into_inner() * range
    }

    /// Map a world point into the camera frame.
    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation.inverse() * Point3::from(p.coords - self.translation)
    }

    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let m = self.rotation.matrix();
        let mut rotation = [0f64; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = m[(r, c)];
            }
        }
        let json = CameraJson {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation,
            translation: [self.translation.x, self.translation.y, self.translation.z],
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &json)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let json: CameraJson = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let m = Matrix3::from_row_slice(&json.rotation);
        let cam = Camera {
            fx: json.fx,
            fy: json.fy,
            cx: json.cx,
            cy: json.cy,
            width: json.width,
            height: json.height,
            rotation: Rotation3::from_matrix_unchecked(m),
            translation: Vector3::new(json.translation[0], json.translation[1], json.translation[2]),
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// A float depth image (meters, along-ray range) with its camera. Invalid
/// pixels hold 0.
#[derive(Debug, Clone)]
pub struct DepthView {
    pub camera: Camera,
    pub depth: Vec<f32>,
}

impl DepthView {
    pub fn new(camera: Camera, depth: Vec<f32>) -> Result<Self> {
        if depth.len() != camera.width * camera.height {
            return Err(Error::DimMismatch(format!(
                "{} depth pixels for a {}x{} camera",
                depth.len(),
                camera.width,
                camera.height
            )));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidInput("depth must be finite and non-negative".into()));
        }
        Ok(DepthView { camera, depth })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.camera.width + u]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_field_grid() -> TsdfGrid {
        // f(x,y,z) = 2x + 3y - z over a small grid, generous truncation so the
        // values stay legal.
        let spec = GridSpec::new([8, 8, 8], 0.01, Point3::new(-0.04, -0.04, -0.04), 1.0).unwrap();
        let mut g = TsdfGrid::filled(spec, 0.0);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let c = spec.voxel_center(x, y, z);
                    g.values[spec.index(x, y, z)] = 2.0 * c.x + 3.0 * c.y - c.z;
                }
            }
        }
        g
    }

    #[test]
    fn sample_at_voxel_center_returns_stored_value() {
        let spec = GridSpec::default();
        let mut g = TsdfGrid::filled(spec, 0.02);
        g.values[spec.index(10, 20, 30)] = -0.013;
        let p = spec.voxel_center(10, 20, 30);
        assert_eq!(g.sample_trilinear(&p).unwrap(), -0.013);

        let s = g.sample_with_gradient(&p).unwrap();
        let mut w_at_node = 0.0;
        for (idx, w) in s.nodes {
            if idx == spec.index(10, 20, 30) {
                w_at_node = w;
            } else {
                assert_eq!(w, 0.0);
            }
        }
        assert_eq!(w_at_node, 1.0);
    }

    #[test]
    fn sample_at_edge_midpoint_averages_endpoints() {
        let spec = GridSpec::default();
        let mut g = TsdfGrid::filled(spec, 0.0);
        g.values[spec.index(5, 5, 5)] = 0.04;
        g.values[spec.index(6, 5, 5)] = -0.02;
        let a = spec.voxel_center(5, 5, 5);
        let b = spec.voxel_center(6, 5, 5);
        let mid = nalgebra::center(&a, &b);
        assert_relative_eq!(g.sample_trilinear(&mid).unwrap(), (0.04 - 0.02) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn trilinear_reproduces_linear_field() {
        let g = linear_field_grid();
        let spec = g.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = Point3::new(
                rng.random_range(spec.origin.x + 0.5 * spec.voxel_size..spec.origin.x + 7.5 * spec.voxel_size),
                rng.random_range(spec.origin.y + 0.5 * spec.voxel_size..spec.origin.y + 7.5 * spec.voxel_size),
                rng.random_range(spec.origin.z + 0.5 * spec.voxel_size..spec.origin.z + 7.5 * spec.voxel_size),
            );
            let s = g.sample_with_gradient(&p).unwrap();
            let expected = 2.0 * p.x + 3.0 * p.y - p.z;
            assert!((s.value - expected).abs() < 1e-6, "value {} vs {}", s.value, expected);
            assert!((s.gradient - Vector3::new(2.0, 3.0, -1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn node_weights_match_finite_differences() {
        let spec = GridSpec::new([6, 6, 6], 0.01, Point3::origin(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = TsdfGrid::filled(spec, 0.0);
        for v in g.values.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for _ in 0..100 {
            let p = Point3::new(
                rng.random_range(0.005..0.055),
                rng.random_range(0.005..0.055),
                rng.random_range(0.005..0.055),
            );
            let s = g.sample_with_gradient(&p).unwrap();
            for (idx, w) in s.nodes {
                let h = 1e-4;
                let orig = g.values[idx];
                let mut gp = g.clone();
                gp.values[idx] = orig + h;
                let mut gm = g.clone();
                gm.values[idx] = orig - h;
                let fd = (gp.sample_trilinear(&p).unwrap() - gm.sample_trilinear(&p).unwrap()) / (2.0 * h);
                let denom = w.abs().max(1e-9);
                assert!((fd - w).abs() / denom < 1e-6, "weight {w} vs fd {fd}");
            }
        }
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let g = TsdfGrid::filled(GridSpec::default(), 0.0);
        // Inside the grid volume but outside the span of voxel centers.
        let p = Point3::new(0.002, 0.32, 0.32);
        assert!(matches!(g.sample_trilinear(&p), Err(Error::OutOfDomain(..))));
        let q = Point3::new(-1.0, 0.0, 0.0);
        assert!(matches!(g.sample_trilinear(&q), Err(Error::OutOfDomain(..))));
    }

    #[test]
    fn occupancy_thresholds() {
        let spec = GridSpec::new([2, 2, 2], 0.01, Point3::origin(), 0.05).unwrap();
        let mut g = TsdfGrid::filled(spec, 0.0);
        g.values = vec![0.03, -0.01, 0.0, 0.05, -0.05, 0.001, -0.0001, 0.0];
        let occ = g.occupancy();
        assert_eq!(
            occ,
            vec![false, true, true, false, true, false, true, true]
        );
    }

    #[test]
    fn occupancy_sign_flip_flips_all_but_exact_zeros() {
        let spec = GridSpec::new([4, 4, 4], 0.01, Point3::origin(), 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = TsdfGrid::filled(spec, 0.0);
        for v in g.values.iter_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
        g.values[7] = 0.0;
        let occ = g.occupancy();
        let mut flipped = g.clone();
        for v in flipped.values.iter_mut() {
            *v = -*v;
        }
        let occ_f = flipped.occupancy();
        for i in 0..g.values.len() {
            if g.values[i] == 0.0 {
                assert!(occ[i] && occ_f[i]);
            } else {
                assert_ne!(occ[i], occ_f[i], "voxel {i}");
            }
        }
    }

    #[test]
    fn vxg_round_trip_is_bit_exact_for_all_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);

        let mut tsdf = TsdfGrid::filled(spec, 0.0);
        for v in tsdf.values.iter_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
        let mut votes = VectorField::zeros(spec);
        for v in votes.vectors.iter_mut() {
            *v = Vector3::new(rng.random(), rng.random(), rng.random());
        }
        let mut labels = InstanceLabels::zeros(spec);
        for l in labels.labels.iter_mut() {
            *l = rng.random_range(0..5);
        }

        for (name, grid) in [
            ("t.vxg", AnyGrid::Tsdf(tsdf)),
            ("v.vxg", AnyGrid::Vectors(votes)),
            ("l.vxg", AnyGrid::Labels(labels)),
        ] {
            let p1 = dir.path().join(name);
            let p2 = dir.path().join(format!("rt_{name}"));
            grid.write_vxg(&p1).unwrap();
            let back = read_grid(&p1).unwrap();
            back.write_vxg(&p2).unwrap();
            let b1 = std::fs::read(&p1).unwrap();
            let b2 = std::fs::read(&p2).unwrap();
            assert_eq!(b1, b2, "round trip for {name}");
        }
    }

    #[test]
    fn vxg_rejects_bad_magic_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::default();
        let path = dir.path().join("g.vxg");
        TsdfGrid::filled(spec, 0.01).write_vxg(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_grid_bytes(&bad_magic), Err(Error::Format(_))));

        // Header says 64^3 but the payload only holds 63^3 values.
        bytes.truncate(37 + 63 * 63 * 63 * 4);
        assert!(matches!(read_grid_bytes(&bytes), Err(Error::Format(_))));

        assert!(matches!(read_grid_bytes(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn camera_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cam = Camera::default_vga().look_at(Point3::new(0.9, 0.2, 0.6), Point3::new(0.32, 0.32, 0.2));
        cam.validate().unwrap();
        let path = dir.path().join("cam.json");
        cam.write_json(&path).unwrap();
        let back = Camera::read_json(&path).unwrap();
        assert_eq!(cam.fx, back.fx);
        assert!((cam.rotation.matrix() - back.rotation.matrix()).norm() < 1e-15);
        assert_eq!(cam.translation, back.translation);
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let eye = Point3::new(1.0, 0.5, 0.8);
        let target = Point3::new(0.32, 0.32, 0.1);
        let cam = Camera::default_vga().look_at(eye, target);
        let ray = cam.pixel_ray(cam.cx, cam.cy);
        let expect = Unit::new_normalize(target - eye);
        assert!((ray.into_inner() - expect.into_inner()).norm() < 1e-12);
        // Zero roll: the image x axis has no world-z component.
        assert!(cam.rotation.matrix().column(0)[2].abs() < 1e-12);
    }
}
