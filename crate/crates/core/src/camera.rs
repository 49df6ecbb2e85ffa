//! Weak-perspective projection and the camera block update.
//!
//! The feasible cameras are `s·Q` with `s ≥ 0` and `Q` a 2 × 3 matrix with
//! orthonormal rows. For a fixed viewing direction `n` (the unit normal of
//! the row space of `Q`) the best in-plane factor is the polar factor of
//! `M Eᵀ`, where `M = X Wᵀ` and `E` spans `n⊥`. That reduces the update to a
//! search over the unit sphere, with
//!
//! * `‖M Eᵀ‖_*² = ‖M‖² − ‖M n‖² + 2 |(m₁ × m₂)·n|`
//! * `‖Q W‖² = tr(W Wᵀ) − nᵀ W Wᵀ n`
//!
//! both independent of `P`. A coarse hemisphere grid followed by local
//! pattern search locates the global basin, then Newton steps on the
//! analytic gradient pin the stationary point down to working precision.

use std::sync::OnceLock;

use nalgebra::{Matrix2, Matrix2x3, Matrix2xX, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::pose::{CameraMatrix, Pose2D, Pose3D};

/// Relative threshold on the second singular value of `X Wᵀ`.
pub const DEGENERACY_TOL: f64 = 1e-12;

const GRID_POINTS: usize = 320;
const REFINE_CANDIDATES: usize = 4;
const TIE_TOL: f64 = 1e-9;
/// Pattern search hands over to Newton below this step.
const REFINE_STOP: f64 = 1e-6;
/// Step halvings from 0.08 down to `REFINE_STOP`.
const REFINE_LEVELS: usize = 17;

/// `X = R* Y + t 1ᵀ`.
pub fn project(y: &Pose3D, cam: &CameraMatrix, t: &Vector2<f64>) -> Pose2D {
    let mut joints: Matrix2xX<f64> = cam.matrix() * y.joints();
    for mut col in joints.column_iter_mut() {
        col += t;
    }
    Pose2D::new(joints).expect("projection of a finite pose is finite")
}

/// `½‖X − R* W‖²_F`.
pub fn data_term(x: &Pose2D, cam: &CameraMatrix, w: &Pose3D) -> f64 {
    0.5 * (x.joints() - cam.matrix() * w.joints()).norm_squared()
}

/// Options for [`update_camera_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct CameraUpdate<'a> {
    /// Restrict the feasible set to cameras with this row norm.
    pub fixed_scale: Option<f64>,
    /// Tie-break between equivalent optima by closeness to this camera.
    pub previous: Option<&'a CameraMatrix>,
}

/// Global minimizer of `½‖X − R* W‖²` over isotropic weak-perspective cameras.
pub fn update_camera(x: &Pose2D, w: &Pose3D) -> Result<CameraMatrix> {
    update_camera_with(x, w, &CameraUpdate::default())
}

pub fn update_camera_with(x: &Pose2D, w: &Pose3D, opts: &CameraUpdate<'_>) -> Result<CameraMatrix> {
    if x.num_joints() != w.num_joints() {
        return Err(Error::DimensionMismatch(format!(
            "2D pose has {} joints, reconstruction has {}",
            x.num_joints(),
            w.num_joints()
        )));
    }
    if let Some(s) = opts.fixed_scale {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::Config(format!("fixed camera scale {s} must be finite and >= 0")));
        }
    }
    let problem = Reduced::new(x.joints() * w.joints().transpose(), w.joints() * w.joints().transpose(), opts.fixed_scale)?;

    let mut seeds: Vec<Vector3<f64>> = Vec::with_capacity(REFINE_CANDIDATES + 2);
    seeds.push(problem.procrustes_normal());
    if let Some(prev) = opts.previous {
        let r = prev.matrix();
        let n = r.row(0).transpose().cross(&r.row(1).transpose());
        if n.norm() > 0.0 {
            seeds.push(n.normalize());
        }
    }
    seeds.extend(problem.grid_minima());

    let mut optima: Vec<(Vector3<f64>, f64)> = seeds
        .into_iter()
        .map(|n| problem.newton(problem.refine(n)))
        .collect();
    let best = optima.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    let slack = TIE_TOL * best.abs().max(problem.x_energy_hint());
    optima.retain(|o| o.1 <= best + slack);

    let mut cameras: Vec<(Matrix2x3<f64>, f64)> = optima.iter().map(|(n, _)| problem.camera_for(n)).collect();
    let chosen = match opts.previous {
        Some(prev) => cameras
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1 .0 * a.1 .1 - prev.matrix()).norm();
                let db = (b.1 .0 * b.1 .1 - prev.matrix()).norm();
                da.total_cmp(&db).then(a.0.cmp(&b.0))
            })
            .map(|(i, _)| i)
            .unwrap_or(0),
        None => 0,
    };
    let (q, s) = cameras.swap_remove(chosen);
    CameraMatrix::new(q * s)
}

/// The camera problem reduced to `M = X Wᵀ` and `G = W Wᵀ`.
struct Reduced {
    m: Matrix2x3<f64>,
    g: Matrix3<f64>,
    cross: Vector3<f64>,
    m_norm2: f64,
    g_trace: f64,
    fixed_scale: Option<f64>,
}

impl Reduced {
    fn new(m: Matrix2x3<f64>, g: Matrix3<f64>, fixed_scale: Option<f64>) -> Result<Self> {
        let sv = m.singular_values();
        let (s1, s2) = (sv[0].max(sv[1]), sv[0].min(sv[1]));
        if !(s1 > 0.0) || s2 <= DEGENERACY_TOL * s1 {
            return Err(Error::DegenerateGeometry(format!(
                "cross-product singular values ({s1:e}, {s2:e}) do not identify a camera"
            )));
        }
        let cross = m.row(0).transpose().cross(&m.row(1).transpose());
        Ok(Self {
            m,
            g,
            cross,
            m_norm2: m.norm_squared(),
            g_trace: g.trace(),
            fixed_scale,
        })
    }

    fn x_energy_hint(&self) -> f64 {
        // Scale of the merit values: nuclear norm squared over ‖QW‖².
        self.m_norm2 / self.g_trace.max(f64::MIN_POSITIVE)
    }

    /// Squared nuclear norm of `M Eᵀ` and `‖QW‖²` for viewing direction `n`.
    fn parts(&self, n: &Vector3<f64>) -> (f64, f64) {
        let mn = self.m * n;
        let nuclear2 = (self.m_norm2 - mn.norm_squared() + 2.0 * self.cross.dot(n).abs()).max(0.0);
        let energy = (self.g_trace - n.dot(&(self.g * n))).max(0.0);
        (nuclear2, energy)
    }

    /// Twice the objective minus `‖X‖²`, minimized over scale and in-plane rotation.
    fn merit(&self, n: &Vector3<f64>) -> f64 {
        let (nuclear2, energy) = self.parts(n);
        match self.fixed_scale {
            None if energy > 0.0 => -nuclear2 / energy,
            None => 0.0,
            Some(s) => -2.0 * s * nuclear2.sqrt() + s * s * energy,
        }
    }

    fn procrustes_normal(&self) -> Vector3<f64> {
        let svd = self.m.svd(true, true);
        let q = svd.u.unwrap() * svd.v_t.unwrap();
        q.row(0).transpose().cross(&q.row(1).transpose()).normalize()
    }

    fn grid_minima(&self) -> Vec<Vector3<f64>> {
        let grid = hemisphere_grid();
        let mut scored: Vec<(f64, usize)> = grid.iter().enumerate().map(|(i, n)| (self.merit(n), i)).collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        // the picks almost always come from the best few dozen points
        const HEAD: usize = 48;
        scored.select_nth_unstable_by(HEAD, order);
        scored[..HEAD].sort_unstable_by(order);
        let spacing = (2.0 * std::f64::consts::PI / GRID_POINTS as f64).sqrt();
        let mut picked: Vec<Vector3<f64>> = Vec::with_capacity(REFINE_CANDIDATES);
        for range in [0..HEAD, HEAD..scored.len()] {
            if range.start == HEAD {
                scored[HEAD..].sort_unstable_by(order);
            }
            for &(_, i) in &scored[range] {
                let n = grid[i];
                // n and -n are the same viewing direction
                if picked.iter().all(|p| p.dot(&n).abs() < (2.5 * spacing).cos()) {
                    picked.push(n);
                    if picked.len() == REFINE_CANDIDATES {
                        return picked;
                    }
                }
            }
        }
        picked
    }

    /// Derivative-free pattern search on the sphere around `start`.
    fn refine(&self, start: Vector3<f64>) -> (Vector3<f64>, f64) {
        let mut n = start.normalize();
        let mut f = self.merit(&n);
        let mut step = 0.08;
        let mut level = 0;
        while step > REFINE_STOP {
            let (e1, e2) = tangent_basis(&n);
            let mut best = (f, n);
            for &(sin, cos) in &compass()[level] {
                let cand = (n + (e1 * cos + e2 * sin) * step).normalize();
                let fc = self.merit(&cand);
                if fc < best.0 {
                    best = (fc, cand);
                }
            }
            if best.0 < f {
                f = best.0;
                n = best.1;
            } else {
                step *= 0.5;
                level += 1;
            }
        }
        (n, f)
    }

    fn gradient(&self, n: &Vector3<f64>) -> Vector3<f64> {
        let (nuclear2, energy) = self.parts(n);
        let d_nuclear2 = -2.0 * self.m.transpose() * (self.m * n) + 2.0 * self.cross.dot(n).signum() * self.cross;
        let d_energy = -2.0 * self.g * n;
        match self.fixed_scale {
            None if energy > 0.0 => -(d_nuclear2 * energy - d_energy * nuclear2) / (energy * energy),
            None => Vector3::zeros(),
            Some(_) if nuclear2 <= 0.0 => Vector3::zeros(),
            Some(s) => -s * d_nuclear2 / nuclear2.sqrt() + d_energy * (s * s),
        }
    }

    /// Riemannian gradient at unit `n`, in the coordinates of `e1`, `e2`.
    fn tangent_gradient(&self, n: &Vector3<f64>, e1: &Vector3<f64>, e2: &Vector3<f64>) -> Vector2<f64> {
        let g = self.gradient(n);
        let g = g - n * g.dot(n);
        Vector2::new(g.dot(e1), g.dot(e2))
    }

    /// Newton polish on the tangent plane. Works from the analytic gradient,
    /// so the stationary point is located to working precision even where
    /// the merit itself has flattened into rounding noise.
    fn newton(&self, (mut n, mut f): (Vector3<f64>, f64)) -> (Vector3<f64>, f64) {
        const H: f64 = 1e-5;
        for _ in 0..12 {
            let (e1, e2) = tangent_basis(&n);
            let g = self.tangent_gradient(&n, &e1, &e2);
            let mut hess = Matrix2::zeros();
            for (i, e) in [e1, e2].iter().enumerate() {
                let gp = self.tangent_gradient(&(n + e * H).normalize(), &e1, &e2);
                let gm = self.tangent_gradient(&(n - e * H).normalize(), &e1, &e2);
                hess.set_column(i, &((gp - gm) / (2.0 * H)));
            }
            let hess = (hess + hess.transpose()) * 0.5;
            if !(hess[(0, 0)] > 0.0 && hess.determinant() > 0.0) {
                break;
            }
            let Some(step) = hess.lu().solve(&(-g)) else { break };
            if !(step.norm() < 0.05) {
                break;
            }
            let cand = (n + e1 * step[0] + e2 * step[1]).normalize();
            let fc = self.merit(&cand);
            if fc > f + 1e-13 * f.abs() {
                break;
            }
            n = cand;
            f = fc.min(f);
            if step.norm() < 1e-15 {
                break;
            }
        }
        (n, f)
    }

    /// Row-orthonormal factor and scale realizing the merit at `n`.
    fn camera_for(&self, n: &Vector3<f64>) -> (Matrix2x3<f64>, f64) {
        let (e1, e2) = tangent_basis(n);
        let e = Matrix2x3::from_rows(&[e1.transpose(), e2.transpose()]);
        let a: Matrix2<f64> = self.m * e.transpose();
        let svd = a.svd(true, true);
        let t = svd.u.unwrap() * svd.v_t.unwrap();
        let q = t * e;
        let s = match self.fixed_scale {
            Some(s) => s,
            None => {
                let energy = (q * self.g * q.transpose()).trace();
                if energy > 0.0 {
                    (self.m.dot(&q) / energy).max(0.0)
                } else {
                    0.0
                }
            }
        };
        (q, s)
    }
}

fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.6 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Fibonacci lattice on the upper hemisphere.
/// Eight compass directions per step level, turned by the golden angle from
/// one level to the next.
fn compass() -> &'static [[(f64, f64); 8]; REFINE_LEVELS] {
    const GOLDEN: f64 = 2.399_963_229_728_653;
    static TABLE: OnceLock<[[(f64, f64); 8]; REFINE_LEVELS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        std::array::from_fn(|level| {
            let phase = level as f64 * GOLDEN;
            std::array::from_fn(|i| (phase + i as f64 * std::f64::consts::FRAC_PI_4).sin_cos())
        })
    })
}

fn hemisphere_grid() -> &'static [Vector3<f64>] {
    static GRID: OnceLock<Vec<Vector3<f64>>> = OnceLock::new();
    GRID.get_or_init(|| {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..GRID_POINTS)
            .map(|i| {
                let z = 1.0 - (i as f64 + 0.5) / GRID_POINTS as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect()
    })
}
