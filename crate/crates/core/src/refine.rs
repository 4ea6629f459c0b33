//! Superquadric recovery: per-instance fitting of the mean-distortion
//! objective and joint multi-object refinement with collision and floor
//! penalties, both minimized by a dogleg method with rectangular trust
//! regions and box-bounded shape parameters.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Rotation3, Vector3};
use rayon::prelude::*;

use crate::grid::{InstanceLabels, TsdfGrid};
use crate::mesh::{marching_cubes, sample_mesh_surface, segment_points};
use crate::sq::{Scene, Superquadric};
use crate::{Error, Result};

/// Box bounds keeping fitted shapes convex and non-degenerate.
pub const SCALE_BOUNDS: (f64, f64) = (0.01, 0.5);
pub const EXPONENT_BOUNDS: (f64, f64) = (1.0, 150.0);

/// Parameters of one superquadric as a flat vector:
/// scales (3), exponents (3), axis-angle rotation (3), translation (3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams(pub [f64; PARAMS_PER_OBJECT]);

impl FitParams {
    pub fn from_superquadric(sq: &Superquadric) -> Self {
        let w = sq.rotation.scaled_axis();
        FitParams([
            sq.scales.x,
            sq.scales.y,
            sq.scales.z,
            sq.exponents.x,
            sq.exponents.y,
            sq.exponents.z,
            w.x,
            w.y,
            w.z,
            sq.translation.x,
            sq.translation.y,
            sq.translation.z,
        ])
    }

    pub fn to_superquadric(&self) -> Result<Superquadric> {
        let p = &self.0;
        Superquadric::new(
            Vector3::new(p[0], p[1], p[2]),
            Vector3::new(p[3], p[4], p[5]),
            Rotation3::from_scaled_axis(Vector3::new(p[6], p[7], p[8])),
            Vector3::new(p[9], p[10], p[11]),
        )
    }
}

/// Term weights of the joint refinement objective.
#[derive(Debug, Clone, Copy)]
pub struct RefineWeights {
    pub lambda_dist: f64,
    pub lambda_coll: f64,
    pub lambda_floor: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        RefineWeights { lambda_dist: 100.0, lambda_coll: 10.0, lambda_floor: 1.0 }
    }
}

/// Mean distortion of a point set under a superquadric:
/// `(1/N) * sum sqrt(a1 a2 a3) * d^2` with `d` the approximate distance.
pub fn mean_distortion(sq: &Superquadric, points: &[Point3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let vol = (sq.scales.x * sq.scales.y * sq.scales.z).sqrt();
    let mut sum = 0.0;
    for p in points {
        let d = sq.approx_distance(p)?;
        sum += d * d;
    }
    Ok(vol * sum / points.len() as f64)
}

/// Collision cost of `points` (samples of another object) against `sq`:
/// `(1/N) * sum 1[d < 0] * d^2`. Only penetrating points contribute.
pub fn collision_loss(sq: &Superquadric, points: &[Point3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for p in points {
        // A point on the exact center is as penetrating as possible; score it
        // by the nearest axis radius instead of erroring.
        let d = sq
            .approx_distance(p)
            .unwrap_or_else(|_| -sq.scales.iter().cloned().fold(f64::INFINITY, f64::min));
        if d < 0.0 {
            sum += d * d;
        }
    }
    sum / points.len() as f64
}

/// Floor intrusion cost: mean over points of `1[z < 0] * z^2`.
pub fn floor_loss(points: &[Point3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().map(|p| if p.z < 0.0 { p.z * p.z } else { 0.0 }).sum::<f64>() / points.len() as f64
}

/// Fewest points accepted by [`fit_single`].
pub const MIN_FIT_POINTS: usize = 50;

/// Result of a fit: the shape, whether the optimizer converged before the
/// iteration cap, and the final objective value.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub sq: Superquadric,
    pub converged: bool,
    pub final_loss: f64,
    pub iterations: usize,
}

// ---------------------------------------------------------------------------
// Dogleg trust-region machinery.
//
// The state is a list of superquadrics; a step is a concatenation of
// per-object 11-vectors (scale, exponent, local-rotation, translation
// increments). The trust region is rectangular: each coordinate has its own
// half-width, adapted by the usual gain-ratio rules, and the step is further
// confined to the scale/exponent boxes.
// ---------------------------------------------------------------------------

const PARAMS_PER_OBJECT: usize = 12;

/// Nominal parameter ranges used to size the initial trust region (10% of
/// each). Rotation and translation are unbounded; their entries are the
/// full-turn angle and the default workspace extent.
const NOMINAL_RANGE: [f64; PARAMS_PER_OBJECT] = [
    SCALE_BOUNDS.1 - SCALE_BOUNDS.0,
    SCALE_BOUNDS.1 - SCALE_BOUNDS.0,
    SCALE_BOUNDS.1 - SCALE_BOUNDS.0,
    EXPONENT_BOUNDS.1 - EXPONENT_BOUNDS.0,
    EXPONENT_BOUNDS.1 - EXPONENT_BOUNDS.0,
    EXPONENT_BOUNDS.1 - EXPONENT_BOUNDS.0,
    std::f64::consts::PI,
    std::f64::consts::PI,
    std::f64::consts::PI,
    0.64,
    0.64,
    0.64,
];

trait ResidualProblem {
    fn n_objects(&self) -> usize;
    fn residuals(&self, sqs: &[Superquadric]) -> DVector<f64>;
    fn jacobian(&self, sqs: &[Superquadric], residuals: &DVector<f64>) -> DMatrix<f64>;
}

/// Apply a feasible step: additive on scales, exponents and translation,
/// right-multiplied rotation increment.
fn apply_step(sqs: &[Superquadric], step: &DVector<f64>) -> Vec<Superquadric> {
    sqs.iter()
        .enumerate()
        .map(|(k, sq)| {
            let b = k * PARAMS_PER_OBJECT;
            let scales = Vector3::new(
                (sq.scales.x + step[b]).clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1),
                (sq.scales.y + step[b + 1]).clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1),
                (sq.scales.z + step[b + 2]).clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1),
            );
            let exponents = Vector3::new(
                (sq.exponents.x + step[b + 3]).clamp(EXPONENT_BOUNDS.0, EXPONENT_BOUNDS.1),
                (sq.exponents.y + step[b + 4]).clamp(EXPONENT_BOUNDS.0, EXPONENT_BOUNDS.1),
                (sq.exponents.z + step[b + 5]).clamp(EXPONENT_BOUNDS.0, EXPONENT_BOUNDS.1),
            );
            let dw = Vector3::new(step[b + 6], step[b + 7], step[b + 8]);
            let rotation = sq.rotation * Rotation3::from_scaled_axis(dw);
            let translation = sq.translation + Vector3::new(step[b + 9], step[b + 10], step[b + 11]);
            Superquadric { scales, exponents, rotation, translation }
        })
        .collect()
}

/// Per-coordinate step interval allowed by the box bounds at the current
/// state (trust region aside).
fn box_intervals(sqs: &[Superquadric]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(sqs.len() * PARAMS_PER_OBJECT);
    for sq in sqs {
        for a in 0..3 {
            out.push((SCALE_BOUNDS.0 - sq.scales[a], SCALE_BOUNDS.1 - sq.scales[a]));
        }
        for a in 0..3 {
            out.push((EXPONENT_BOUNDS.0 - sq.exponents[a], EXPONENT_BOUNDS.1 - sq.exponents[a]));
        }
        for _ in 0..6 {
            out.push((f64::NEG_INFINITY, f64::INFINITY));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct DoglegOptions {
    max_iterations: usize,
    gradient_tol: f64,
    step_tol: f64,
    loss_tol: f64,
}

impl Default for DoglegOptions {
    fn default() -> Self {
        DoglegOptions { max_iterations: 500, gradient_tol: 1e-12, step_tol: 1e-12, loss_tol: 1e-18 }
    }
}

struct DoglegOutcome {
    sqs: Vec<Superquadric>,
    loss: f64,
    converged: bool,
    iterations: usize,
}

/// Largest `s` in [0, 1] such that `s * step` satisfies per-coordinate
/// interval constraints.
fn max_feasible_scale(step: &DVector<f64>, intervals: &[(f64, f64)]) -> f64 {
    let mut s = 1.0_f64;
    for i in 0..step.len() {
        let d = step[i];
        if d > 0.0 {
            s = s.min(intervals[i].1 / d);
        } else if d < 0.0 {
            s = s.min(intervals[i].0 / d);
        }
    }
    s.clamp(0.0, 1.0)
}

fn dogleg_minimize(
    problem: &dyn ResidualProblem,
    init: Vec<Superquadric>,
    opts: &DoglegOptions,
) -> DoglegOutcome {
    let n_params = problem.n_objects() * PARAMS_PER_OBJECT;

    // Initial rectangular trust region: 10% of each parameter's range.
    let mut radius: DVector<f64> = DVector::from_fn(n_params, |i, _| 0.1 * NOMINAL_RANGE[i % PARAMS_PER_OBJECT]);
    let radius_cap: DVector<f64> = DVector::from_fn(n_params, |i, _| NOMINAL_RANGE[i % PARAMS_PER_OBJECT]);

    let mut sqs = init;
    let mut residuals = problem.residuals(&sqs);
    let mut loss = residuals.norm_squared();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        if loss < opts.loss_tol {
            converged = true;
            break;
        }
        let jac = problem.jacobian(&sqs, &residuals);
        let grad = jac.transpose() * &residuals; // Half the loss gradient.
        if grad.amax() < opts.gradient_tol {
            converged = true;
            break;
        }

        // Gauss-Newton step by damped normal equations.
        let jtj = jac.transpose() * &jac;
        let mut lambda = 1e-12 * jtj.diagonal().amax().max(1e-300);
        let gn = loop {
            let damped = &jtj + DMatrix::identity(n_params, n_params) * lambda;
            if let Some(chol) = damped.cholesky() {
                break chol.solve(&(-&grad));
            }
            lambda *= 100.0;
            if !lambda.is_finite() {
                break -&grad;
            }
        };

        // Cauchy (steepest-descent) step.
        let jg = &jac * &grad;
        let jg2 = jg.norm_squared();
        let cauchy = if jg2 > 0.0 { -&grad * (grad.norm_squared() / jg2) } else { -&grad };

        // Feasible region: per-coordinate trust radius intersected with the
        // parameter boxes.
        let boxes = box_intervals(&sqs);
        let intervals: Vec<(f64, f64)> = (0..n_params)
            .map(|i| (boxes[i].0.max(-radius[i]), boxes[i].1.min(radius[i])))
            .collect();

        let inside =
            |v: &DVector<f64>| (0..n_params).all(|i| v[i] >= intervals[i].0 - 1e-15 && v[i] <= intervals[i].1 + 1e-15);

        let step: DVector<f64> = if inside(&gn) {
            gn.clone()
        } else {
            let sd_scale = max_feasible_scale(&cauchy, &intervals);
            if sd_scale < 1.0 {
                // Cauchy point already leaves the region: scaled descent step.
                &cauchy * sd_scale
            } else {
                // Walk the dogleg segment from the Cauchy point toward GN
                // until some coordinate hits its interval.
                let dir = &gn - &cauchy;
                let mut tau = 1.0_f64;
                for i in 0..n_params {
                    let d = dir[i];
                    if d > 0.0 {
                        tau = tau.min((intervals[i].1 - cauchy[i]) / d);
                    } else if d < 0.0 {
                        tau = tau.min((intervals[i].0 - cauchy[i]) / d);
                    }
                }
                &cauchy + dir * tau.clamp(0.0, 1.0)
            }
        };

        if step.amax() < opts.step_tol {
            converged = true;
            break;
        }

        let predicted = loss - (&residuals + &jac * &step).norm_squared();
        let candidate = apply_step(&sqs, &step);
        let cand_res = problem.residuals(&candidate);
        let cand_loss = cand_res.norm_squared();
        let actual = loss - cand_loss;
        let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };

        if actual > 0.0 {
            let rel = actual / loss.max(1e-300);
            sqs = candidate;
            residuals = cand_res;
            loss = cand_loss;
            if rel < 1e-12 {
                converged = true;
                break;
            }
        }

        // Rectangular trust-region update.
        if rho > 0.75 {
            for i in 0..n_params {
                radius[i] = (radius[i] * 2.0).min(radius_cap[i]);
            }
        } else if rho < 0.25 {
            let mut all_tiny = true;
            for i in 0..n_params {
                radius[i] *= 0.25;
                if radius[i] > 1e-14 * NOMINAL_RANGE[i % PARAMS_PER_OBJECT] {
                    all_tiny = false;
                }
            }
            if all_tiny {
                converged = true;
                break;
            }
        }
    }

    DoglegOutcome { sqs, loss, converged, iterations }
}

// ---------------------------------------------------------------------------
// Single-object fit.
// ---------------------------------------------------------------------------

struct SingleFitProblem<'a> {
    points: &'a [Point3<f64>],
}

/// Point-wise pieces of the distortion residual and its analytic derivatives
/// with respect to the object-frame point and the scales.
struct DistancePieces {
    d: f64,
    dd_dq: Vector3<f64>,
    dd_da: Vector3<f64>,
    q: Vector3<f64>,
}

fn distance_pieces(sq: &Superquadric, p: &Point3<f64>) -> DistancePieces {
    let q = sq.to_object(p);
    let rho = q.norm().max(1e-12);
    let mut terms = [0.0_f64; 3];
    let mut f = 0.0;
    for a in 0..3 {
        terms[a] = (q[a].abs() / sq.scales[a]).powf(sq.exponents[a]);
        f += terms[a];
    }
    if !f.is_finite() {
        // Far outside: d saturates at rho and the shape partials vanish.
        return DistancePieces { d: rho, dd_dq: q / rho, dd_da: Vector3::zeros(), q };
    }
    let f = f.max(crate::sq::MIN_IMPLICIT);
    let d = rho * (1.0 - 1.0 / f);
    let dd_df = rho / (f * f);
    let mut dd_dq = q * ((1.0 - 1.0 / f) / rho);
    let mut dd_da = Vector3::zeros();
    for a in 0..3 {
        if q[a] != 0.0 {
            let df_dq = sq.exponents[a] * terms[a] / q[a];
            dd_dq[a] += dd_df * df_dq;
        }
        dd_da[a] = dd_df * (-sq.exponents[a] * terms[a] / sq.scales[a]);
    }
    DistancePieces { d, dd_dq, dd_da, q }
}

/// Distance only, with exponent `m` displaced by `h` (for forward
/// differences).
fn distance_with_exponent(sq: &Superquadric, p: &Point3<f64>, m: usize, h: f64) -> f64 {
    let q = sq.to_object(p);
    let rho = q.norm().max(1e-12);
    let mut f = 0.0;
    for a in 0..3 {
        let e = if a == m { sq.exponents[a] + h } else { sq.exponents[a] };
        f += (q[a].abs() / sq.scales[a]).powf(e);
    }
    if !f.is_finite() {
        return rho;
    }
    rho * (1.0 - 1.0 / f.max(crate::sq::MIN_IMPLICIT))
}

impl ResidualProblem for SingleFitProblem<'_> {
    fn n_objects(&self) -> usize {
        1
    }

    fn residuals(&self, sqs: &[Superquadric]) -> DVector<f64> {
        let sq = &sqs[0];
        let c = (sq.scales.x * sq.scales.y * sq.scales.z).sqrt().sqrt()
            / (self.points.len() as f64).sqrt();
        DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| {
                let d = sq
                    .approx_distance(p)
                    .unwrap_or_else(|_| -sq.scales.iter().cloned().fold(f64::INFINITY, f64::min));
                c * d
            }),
        )
    }

    fn jacobian(&self, sqs: &[Superquadric], _residuals: &DVector<f64>) -> DMatrix<f64> {
        let sq = &sqs[0];
        let n = self.points.len();
        let vol4 = (sq.scales.x * sq.scales.y * sq.scales.z).sqrt().sqrt();
        let c = vol4 / (n as f64).sqrt();
        let rows: Vec<[f64; PARAMS_PER_OBJECT]> = self
            .points
            .par_iter()
            .map(|p| {
                let pieces = distance_pieces(sq, p);
                let mut row = [0.0_f64; PARAMS_PER_OBJECT];
                // Scales: through d and through the volume factor.
                for a in 0..3 {
                    row[a] = c * pieces.dd_da[a] + c * pieces.d / (4.0 * sq.scales[a]);
                }
                // Exponents by forward differences, h = 1e-4 * value.
                for a in 0..3 {
                    let h = 1e-4 * sq.exponents[a];
                    row[3 + a] = c * (distance_with_exponent(sq, p, a, h) - pieces.d) / h;
                }
                // Local rotation increment: dq/dw = [q]x, so dd/dw = dd_dq x q.
                let dd_dw = pieces.dd_dq.cross(&pieces.q);
                // Translation: dq/dt = -R^T.
                let dd_dt = -(sq.rotation * pieces.dd_dq);
                for a in 0..3 {
                    row[6 + a] = c * dd_dw[a];
                    row[9 + a] = c * dd_dt[a];
                }
                row
            })
            .collect();
        DMatrix::from_fn(n, PARAMS_PER_OBJECT, |r, col| rows[r][col])
    }
}

/// PCA-based initialization: centroid translation, eigenvector rotation
/// (sign-canonicalized, right-handed), scales at 1.1x the half-extent along
/// each axis, exponents at 2.
fn pca_init(points: &[Point3<f64>]) -> (Vector3<f64>, Matrix3<f64>, Vector3<f64>) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |m, p| m + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    // Sort eigenvectors by descending eigenvalue.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut basis = Matrix3::zeros();
    for (k, &o) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(o).into_owned();
        // Canonical sign: largest-magnitude component positive.
        let mut max_a = 0;
        for a in 1..3 {
            if col[a].abs() > col[max_a].abs() {
                max_a = a;
            }
        }
        if col[max_a] < 0.0 {
            col = -col;
        }
        basis.set_column(k, &col);
    }
    if basis.determinant() < 0.0 {
        let c = -basis.column(2).into_owned();
        basis.set_column(2, &c);
    }
    let mut half: Vector3<f64> = Vector3::zeros();
    for p in points {
        let d = p.coords - mean;
        for a in 0..3 {
            half[a] = half[a].max((basis.column(a).dot(&d)).abs());
        }
    }
    (mean, basis, half * 1.1)
}

/// Fit a superquadric to a point set by minimizing the mean distortion.
///
/// With an explicit `init` the optimizer starts there; otherwise a PCA
/// initialization is tried under several axis permutations and the best
/// final objective wins. At least [`MIN_FIT_POINTS`] points are required.
pub fn fit_single(points: &[Point3<f64>], init: Option<&Superquadric>) -> Result<FitResult> {
    if points.len() < MIN_FIT_POINTS {
        return Err(Error::Underdetermined(points.len(), MIN_FIT_POINTS));
    }
    let problem = SingleFitProblem { points };
    let opts = DoglegOptions::default();

    let run = |sq0: Superquadric| -> DoglegOutcome { dogleg_minimize(&problem, vec![sq0], &opts) };

    let outcome = match init {
        Some(sq0) => run(sq0.clone()),
        None => {
            let (mean, basis, half) = pca_init(points);
            // The PCA frame fixes directions, not the axis-to-axis pairing;
            // try all right-handed relabelings and keep the best fit.
            const PERMS: [[usize; 3]; 6] =
                [[0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]];
            let candidates: Vec<Superquadric> = PERMS
                .iter()
                .filter_map(|perm| {
                    let mut m = Matrix3::zeros();
                    let mut scales = Vector3::zeros();
                    for (k, &o) in perm.iter().enumerate() {
                        m.set_column(k, &basis.column(o).into_owned());
                        scales[k] = half[o].clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1);
                    }
                    if m.determinant() < 0.0 {
                        let c = -m.column(2).into_owned();
                        m.set_column(2, &c);
                    }
                    Superquadric::new(
                        scales,
                        Vector3::repeat(2.0),
                        Rotation3::from_matrix_unchecked(m),
                        mean,
                    )
                    .ok()
                })
                .collect();
            let mut outcomes: Vec<DoglegOutcome> =
                candidates.into_par_iter().map(|c| dogleg_minimize(&problem, vec![c], &opts)).collect();
            let best = outcomes
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.loss.partial_cmp(&b.loss).unwrap())
                .map(|(i, _)| i)
                .expect("at least one PCA candidate");
            outcomes.swap_remove(best)
        }
    };

    Ok(FitResult {
        sq: outcome.sqs.into_iter().next().unwrap(),
        converged: outcome.converged,
        final_loss: outcome.loss,
        iterations: outcome.iterations,
    })
}

// ---------------------------------------------------------------------------
// Joint refinement.
// ---------------------------------------------------------------------------

/// Surface samples per object for the collision and floor terms.
const JOINT_SURFACE_SAMPLES: usize = 200;

struct JointProblem<'a> {
    segments: &'a [Vec<Point3<f64>>],
    weights: RefineWeights,
    /// Frozen object-frame unit directions; surface points are re-solved
    /// radially at the current parameters so they move smoothly with them.
    directions: Vec<Vec<Vector3<f64>>>,
}

impl JointProblem<'_> {
    fn surface_points(&self, sqs: &[Superquadric]) -> Vec<Vec<Point3<f64>>> {
        sqs.iter()
            .zip(&self.directions)
            .map(|(sq, dirs)| dirs.iter().map(|u| sq.surface_point(u)).collect())
            .collect()
    }
}

impl ResidualProblem for JointProblem<'_> {
    fn n_objects(&self) -> usize {
        self.segments.len()
    }

    fn residuals(&self, sqs: &[Superquadric]) -> DVector<f64> {
        let q = sqs.len();
        let surf = self.surface_points(sqs);
        let mut out = Vec::new();
        for (i, sq) in sqs.iter().enumerate() {
            // Distortion against the fixed segment points.
            let c = self.weights.lambda_dist.sqrt()
                * (sq.scales.x * sq.scales.y * sq.scales.z).sqrt().sqrt()
                / (self.segments[i].len() as f64).sqrt();
            for p in &self.segments[i] {
                let d = sq
                    .approx_distance(p)
                    .unwrap_or_else(|_| -sq.scales.iter().cloned().fold(f64::INFINITY, f64::min));
                out.push(c * d);
            }
            // Collisions: samples of every other object against this one.
            for j in 0..q {
                if i == j {
                    continue;
                }
                let cc = (self.weights.lambda_coll / surf[j].len() as f64).sqrt();
                for p in &surf[j] {
                    let d = sq
                        .approx_distance(p)
                        .unwrap_or_else(|_| -sq.scales.iter().cloned().fold(f64::INFINITY, f64::min));
                    out.push(cc * d.min(0.0));
                }
            }
            // Floor: this object's own samples below z = 0.
            let cf = (self.weights.lambda_floor / surf[i].len() as f64).sqrt();
            for p in &surf[i] {
                out.push(cf * p.z.min(0.0));
            }
        }
        DVector::from_vec(out)
    }

    fn jacobian(&self, sqs: &[Superquadric], residuals: &DVector<f64>) -> DMatrix<f64> {
        // Forward differences over every parameter; the residual structure is
        // kept identical across evaluations (frozen directions), so the
        // quotient is clean.
        let n_params = sqs.len() * PARAMS_PER_OBJECT;
        let cols: Vec<DVector<f64>> = (0..n_params)
            .into_par_iter()
            .map(|col| {
                let obj = col / PARAMS_PER_OBJECT;
                let kind = col % PARAMS_PER_OBJECT;
                let mut h = match kind {
                    0..=2 => 1e-7,                                        // scales, meters
                    3..=5 => 1e-5 * sqs[obj].exponents[kind - 3].max(1.0),
                    _ => 1e-7,                                            // radians / meters
                };
                // Step away from an active box bound so the difference is
                // not clamped to nothing.
                match kind {
                    0..=2 if sqs[obj].scales[kind] + h > SCALE_BOUNDS.1 => h = -h,
                    3..=5 if sqs[obj].exponents[kind - 3] + h > EXPONENT_BOUNDS.1 => h = -h,
                    _ => {}
                }
                let mut step = DVector::zeros(n_params);
                step[col] = h;
                let bumped = apply_step(sqs, &step);
                (self.residuals(&bumped) - residuals) / h
            })
            .collect();
        let mut jac = DMatrix::zeros(residuals.len(), n_params);
        for (c, col) in cols.into_iter().enumerate() {
            jac.set_column(c, &col);
        }
        jac
    }
}

/// Total joint objective (for reporting and tests):
/// `sum_i [ lambda_dist L_dist_i + lambda_coll sum_j L_coll_ij
///          + lambda_floor L_floor_i ]`, with the collision and floor terms
/// evaluated on fresh seeded surface samples.
pub fn joint_objective(sqs: &[Superquadric], segments: &[Vec<Point3<f64>>], weights: &RefineWeights) -> f64 {
    let samples: Vec<Vec<Point3<f64>>> = sqs
        .iter()
        .enumerate()
        .map(|(k, sq)| sq.sample_surface(JOINT_SURFACE_SAMPLES, 0xD157_u64 ^ k as u64))
        .collect();
    let mut total = 0.0;
    for (i, sq) in sqs.iter().enumerate() {
        total += weights.lambda_dist * mean_distortion(sq, &segments[i]).unwrap_or(0.0);
        for (j, pts) in samples.iter().enumerate() {
            if i != j {
                total += weights.lambda_coll * collision_loss(sq, pts);
            }
        }
        total += weights.lambda_floor * floor_loss(&samples[i]);
    }
    total
}

/// Refine all objects together, penalizing inter-object collisions and floor
/// intrusion while staying close to each object's segment points. The total
/// objective never increases.
pub fn joint_refine(
    fits: &[Superquadric],
    segments: &[Vec<Point3<f64>>],
    weights: &RefineWeights,
) -> Result<Vec<FitResult>> {
    if fits.is_empty() || fits.len() != segments.len() {
        return Err(Error::InvalidInput(format!(
            "{} fits against {} segments",
            fits.len(),
            segments.len()
        )));
    }
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyPointSet);
    }

    // Freeze area-weighted sample directions at the initial shapes.
    let directions: Vec<Vec<Vector3<f64>>> = fits
        .iter()
        .enumerate()
        .map(|(k, sq)| {
            let local = Superquadric { translation: Vector3::zeros(), ..sq.clone() };
            local
                .sample_surface(JOINT_SURFACE_SAMPLES, 0xFACE_u64 ^ k as u64)
                .iter()
                .map(|p| {
                    let q = sq.rotation.inverse() * p.coords;
                    let n = q.norm();
                    if n > 0.0 { q / n } else { Vector3::z() }
                })
                .collect()
        })
        .collect();

    let problem = JointProblem { segments, weights: *weights, directions };
    let opts = DoglegOptions { max_iterations: 120, ..Default::default() };
    let outcome = dogleg_minimize(&problem, fits.to_vec(), &opts);

    Ok(outcome
        .sqs
        .into_iter()
        .map(|sq| FitResult {
            sq,
            converged: outcome.converged,
            final_loss: outcome.loss,
            iterations: outcome.iterations,
        })
        .collect())
}

/// Options for the end-to-end refinement of a labeled TSDF.
#[derive(Debug, Clone)]
pub struct RefineOptions {
    /// Mesh surface samples drawn per labeled instance.
    pub samples_per_object: usize,
    pub weights: RefineWeights,
    pub seed: u64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions { samples_per_object: 1500, weights: RefineWeights::default(), seed: 0 }
    }
}

/// What happened during [`refine_scene`].
#[derive(Debug, Clone, Default)]
pub struct RefineReport {
    /// Labels whose segments were too small to fit and were dropped.
    pub dropped_labels: Vec<u32>,
    /// Label, convergence flag and final loss per fitted object.
    pub fits: Vec<(u32, bool, f64)>,
}

/// Full refinement of a labeled TSDF into a parametric scene: marching cubes,
/// area-uniform mesh sampling, label segmentation, per-segment fits and a
/// joint refinement pass.
pub fn refine_scene(
    tsdf: &TsdfGrid,
    labels: &InstanceLabels,
    opts: &RefineOptions,
) -> Result<(Scene, RefineReport)> {
    tsdf.spec.ensure_compatible(&labels.spec)?;
    let mesh = marching_cubes(tsdf, 0.0);
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let n_labels = labels.labels.iter().copied().max().unwrap_or(0) as usize;
    let n_samples = (opts.samples_per_object * n_labels.max(1)).min(20_000);
    let points = sample_mesh_surface(&mesh, n_samples, opts.seed)?;
    let segments = segment_points(&points, labels);

    let mut report = RefineReport::default();
    let mut kept: Vec<(u32, Vec<Point3<f64>>)> = Vec::new();
    for (label, pts) in segments {
        if pts.len() < MIN_FIT_POINTS {
            report.dropped_labels.push(label);
        } else {
            kept.push((label, pts));
        }
    }
    if kept.is_empty() {
        return Err(Error::Underdetermined(0, MIN_FIT_POINTS));
    }

    let fits: Vec<FitResult> = kept
        .par_iter()
        .map(|(_, pts)| fit_single(pts, None))
        .collect::<Result<_>>()?;

    let init: Vec<Superquadric> = fits.iter().map(|f| f.sq.clone()).collect();
    let segs: Vec<Vec<Point3<f64>>> = kept.iter().map(|(_, p)| p.clone()).collect();
    let refined = joint_refine(&init, &segs, &opts.weights)?;

    for ((label, _), fit) in kept.iter().zip(&refined) {
        report.fits.push((*label, fit.converged, fit.final_loss));
    }
    let scene = Scene { objects: refined.into_iter().map(|f| f.sq).collect(), seed: None };
    Ok((scene, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> Superquadric {
        Superquadric::sphere(1.0, Point3::origin())
    }

    #[test]
    fn mean_distortion_cases() {
        let sq = unit_sphere();
        let on_surface = sq.sample_surface(200, 4);
        assert!(mean_distortion(&sq, &on_surface).unwrap() < 1e-12);

        let one = vec![Point3::new(2.0, 0.0, 0.0)];
        assert_relative_eq!(mean_distortion(&sq, &one).unwrap(), 2.25, epsilon = 1e-12);

        // Scaling the shape with points rescaled onto the new surface stays 0.
        let big = Superquadric::sphere(4.0, Point3::origin());
        let rescaled: Vec<_> = on_surface.iter().map(|p| Point3::from(p.coords * 4.0)).collect();
        assert!(mean_distortion(&big, &rescaled).unwrap() < 1e-10);

        assert!(mean_distortion(&sq, &[]).is_err());
        assert!(mean_distortion(&sq, &[Point3::origin()]).is_err());
    }

    #[test]
    fn collision_loss_cases() {
        let sq = unit_sphere();
        let outside = vec![Point3::new(3.0, 0.0, 0.0), Point3::new(0.0, 5.0, 0.0)];
        assert_eq!(collision_loss(&sq, &outside), 0.0);

        let inside = vec![Point3::new(0.5, 0.0, 0.0)];
        assert_relative_eq!(collision_loss(&sq, &inside), 2.25, epsilon = 1e-12);

        // Asymmetry: a small sphere poking into a large one.
        let small = Superquadric::sphere(0.1, Point3::new(1.05, 0.0, 0.0));
        let big_pts = unit_sphere().sample_surface(500, 1);
        let small_pts = small.sample_surface(500, 2);
        let l_ij = collision_loss(&unit_sphere(), &small_pts);
        let l_ji = collision_loss(&small, &big_pts);
        assert!((l_ij - l_ji).abs() > 1e-9, "losses unexpectedly equal: {l_ij} vs {l_ji}");
    }

    #[test]
    fn floor_loss_cases() {
        let above: Vec<_> = (0..100).map(|i| Point3::new(0.0, 0.0, i as f64 * 0.01)).collect();
        assert_eq!(floor_loss(&above), 0.0);

        let mut pts = above.clone();
        pts[0] = Point3::new(0.0, 0.0, -0.1);
        assert_relative_eq!(floor_loss(&pts), 1e-4, epsilon = 1e-15);

        let mut deeper = above.clone();
        deeper[0] = Point3::new(0.0, 0.0, -0.2);
        assert_relative_eq!(floor_loss(&deeper), 4.0 * floor_loss(&pts), epsilon = 1e-15);
    }

    #[test]
    fn mean_distortion_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let sq = Superquadric::new(
            Vector3::new(0.2, 0.1, 0.15),
            Vector3::new(3.0, 7.0, 2.0),
            Rotation3::from_euler_angles(0.3, -0.2, 1.1),
            Vector3::new(0.1, 0.2, 0.3),
        )
        .unwrap();
        let pts: Vec<Point3<f64>> = (0..200)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.3..0.5),
                    rng.random_range(-0.2..0.6),
                    rng.random_range(-0.1..0.7),
                )
            })
            .collect();
        let base = mean_distortion(&sq, &pts).unwrap();

        let rig = Rotation3::from_euler_angles(0.7, 0.2, -0.4);
        let shift = Vector3::new(-0.3, 0.8, 0.25);
        let moved_sq = Superquadric {
            rotation: rig * sq.rotation,
            translation: rig * sq.translation + shift,
            ..sq.clone()
        };
        let moved_pts: Vec<Point3<f64>> = pts.iter().map(|p| Point3::from(rig * p.coords + shift)).collect();
        let moved = mean_distortion(&moved_sq, &moved_pts).unwrap();
        assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let sq = Superquadric::new(
                Vector3::new(
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                ),
                Vector3::new(
                    rng.random_range(2.0..30.0),
                    rng.random_range(2.0..30.0),
                    rng.random_range(2.0..30.0),
                ),
                Rotation3::from_euler_angles(rng.random(), rng.random(), rng.random()),
                Vector3::new(0.3, 0.3, 0.3),
            )
            .unwrap();
            let points: Vec<Point3<f64>> = (0..4)
                .map(|_| {
                    Point3::new(
                        0.3 + rng.random_range(-0.4..0.4),
                        0.3 + rng.random_range(-0.4..0.4),
                        0.3 + rng.random_range(-0.4..0.4),
                    )
                })
                .filter(|p| (p.coords - sq.translation).norm() > 1e-3)
                .collect();
            if points.len() < 2 {
                continue;
            }
            let problem = SingleFitProblem { points: &points };
            let state = vec![sq.clone()];
            let res = problem.residuals(&state);
            let jac = problem.jacobian(&state, &res);

            // Central differences over scale and translation coordinates.
            for col in [0usize, 1, 2, 9, 10, 11] {
                let h = 1e-7;
                let mut plus = DVector::zeros(PARAMS_PER_OBJECT);
                plus[col] = h;
                let mut minus = DVector::zeros(PARAMS_PER_OBJECT);
                minus[col] = -h;
                let rp = problem.residuals(&apply_step(&state, &plus));
                let rm = problem.residuals(&apply_step(&state, &minus));
                for row in 0..res.len() {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    let an = jac[(row, col)];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "col {col} row {row}: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn fit_single_needs_enough_points() {
        let pts: Vec<Point3<f64>> = (0..49).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(fit_single(&pts, None), Err(Error::Underdetermined(49, 50))));
    }

    #[test]
    fn fit_single_at_ground_truth_is_a_fixed_point() {
        let truth = Superquadric::new(
            Vector3::new(0.12, 0.2, 0.08),
            Vector3::new(4.0, 2.5, 12.0),
            Rotation3::from_euler_angles(0.4, 0.1, -0.7),
            Vector3::new(0.32, 0.30, 0.25),
        )
        .unwrap();
        let pts = truth.sample_surface(1000, 9);
        let fit = fit_single(&pts, Some(&truth)).unwrap();
        assert!(mean_distortion(&fit.sq, &pts).unwrap() < 1e-8);
        assert!((fit.sq.scales - truth.scales).norm() < 1e-6);
        assert!((fit.sq.exponents - truth.exponents).norm() < 1e-6);
        assert!((fit.sq.translation - truth.translation).norm() < 1e-6);
        assert!((fit.sq.rotation.matrix() - truth.rotation.matrix()).norm() < 1e-6);
    }

    #[test]
    fn fit_single_recovers_shape_from_default_init() {
        let truth = Superquadric::new(
            Vector3::new(0.15, 0.09, 0.06),
            Vector3::new(6.0, 2.0, 15.0),
            Rotation3::from_euler_angles(0.3, -0.5, 0.9),
            Vector3::new(0.32, 0.30, 0.20),
        )
        .unwrap();
        let pts = truth.sample_surface(1000, 21);
        let fit = fit_single(&pts, None).unwrap();
        let cd = crate::metrics::superquadric_chamfer(&truth, &fit.sq, 800);
        assert!(cd < 0.02 * truth.max_scale(), "surface chamfer {cd}");
    }

    #[test]
    fn joint_refine_is_stable_at_an_optimum() {
        let sq = Superquadric::sphere(0.1, Point3::new(0.3, 0.3, 0.4));
        let seg = sq.sample_surface(400, 3);
        let out = joint_refine(&[sq.clone()], &[seg], &RefineWeights::default()).unwrap();
        let got = &out[0].sq;
        assert!((got.scales - sq.scales).norm() < 1e-6);
        assert!((got.translation - sq.translation).norm() < 1e-6);
    }

    #[test]
    fn joint_refine_resolves_overlap() {
        // Ground truth: two spheres in contact; inits pushed together by 2 cm.
        let t1 = Superquadric::sphere(0.1, Point3::new(0.22, 0.3, 0.3));
        let t2 = Superquadric::sphere(0.1, Point3::new(0.42, 0.3, 0.3));
        let seg1 = t1.sample_surface(400, 11);
        let seg2 = t2.sample_surface(400, 12);
        let init1 = Superquadric { translation: t1.translation + Vector3::new(0.01, 0.0, 0.0), ..t1.clone() };
        let init2 = Superquadric { translation: t2.translation - Vector3::new(0.01, 0.0, 0.0), ..t2.clone() };

        let coll_before = collision_loss(&init1, &init2.sample_surface(500, 5))
            + collision_loss(&init2, &init1.sample_surface(500, 6));
        assert!(coll_before > 0.0);

        let out = joint_refine(
            &[init1, init2],
            &[seg1.clone(), seg2.clone()],
            &RefineWeights::default(),
        )
        .unwrap();
        let (r1, r2) = (&out[0].sq, &out[1].sq);
        let coll_after =
            collision_loss(r1, &r2.sample_surface(500, 5)) + collision_loss(r2, &r1.sample_surface(500, 6));
        assert!(
            coll_after <= 0.1 * coll_before,
            "collision went {coll_before} -> {coll_after}"
        );
        // Distortion against the segments must stay sane (the inits were 1 cm
        // off, the refined shapes should not be worse).
        let d1 = mean_distortion(r1, &seg1).unwrap();
        let d2 = mean_distortion(r2, &seg2).unwrap();
        assert!(d1 < 1e-4 && d2 < 1e-4, "distortions {d1} {d2}");
    }

    #[test]
    fn joint_refine_lifts_object_out_of_floor() {
        let truth = Superquadric::sphere(0.1, Point3::new(0.3, 0.3, 0.1));
        let seg = truth.sample_surface(400, 2);
        let sunk = Superquadric { translation: truth.translation - Vector3::new(0.0, 0.0, 0.05), ..truth.clone() };
        let before = floor_loss(&sunk.sample_surface(500, 8));
        assert!(before > 0.0);
        let out = joint_refine(&[sunk], &[seg], &RefineWeights::default()).unwrap();
        let after = floor_loss(&out[0].sq.sample_surface(500, 8));
        assert!(after < 1e-6, "floor loss {before} -> {after}");
    }

    #[test]
    fn joint_refine_never_increases_the_objective() {
        let t1 = Superquadric::sphere(0.08, Point3::new(0.25, 0.3, 0.3));
        let t2 = Superquadric::sphere(0.08, Point3::new(0.40, 0.3, 0.3));
        let seg1 = t1.sample_surface(300, 1);
        let seg2 = t2.sample_surface(300, 2);
        let init1 = Superquadric { translation: t1.translation + Vector3::new(0.015, 0.0, 0.0), ..t1 };
        let init2 = Superquadric { translation: t2.translation - Vector3::new(0.015, 0.0, 0.0), ..t2 };
        let w = RefineWeights::default();
        let segs = [seg1, seg2];
        let before = joint_objective(&[init1.clone(), init2.clone()], &segs, &w);
        let out = joint_refine(&[init1, init2], &segs, &w).unwrap();
        let sqs: Vec<Superquadric> = out.iter().map(|f| f.sq.clone()).collect();
        let after = joint_objective(&sqs, &segs, &w);
        assert!(after <= before + 1e-9, "{before} -> {after}");
    }

}
