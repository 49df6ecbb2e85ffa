//! Block-alternating inference for the shape decomposition model.
//!
//! Minimizes
//!
//! ```text
//! ½‖X − R*(B_u c_u + B_v c_v)‖² + α‖c_u‖₁ + β‖c_v‖²
//! ```
//!
//! by cycling through the camera (exact weak-perspective fit), the sparse
//! code (FISTA) and the dense code (ridge closed form). The single-dictionary
//! sparse-representation baseline runs the same loop with the dense block
//! switched off.
//!
//! All Gram matrices are assembled from per-dictionary second moments: for a
//! camera `R*` with `S = R*ᵀR*`, `⟨R* A_i, R* B_j⟩ = Σ_ab S_ab Σ_p A_i[a,p] B_j[b,p]`,
//! so an outer iteration costs `O(k²)` regardless of how the camera moves.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix3xX, Rotation3, Vector3};

use crate::camera::{update_camera_with, CameraUpdate};
use crate::error::{Error, Result};
use crate::pose::{CameraMatrix, Codes, Pose2D, Pose3D, PoseDictionary, CENTER_TOL};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Sparsity weight on `c_u`.
    pub alpha: f64,
    /// Ridge weight on `c_v`.
    pub beta: f64,
    /// Stop once the reprojection residual norm falls to this value.
    pub tol: f64,
    pub max_iter: usize,
    /// Inner FISTA iterations per outer sweep.
    pub apg_iters: usize,
    pub apg_tol: f64,
    /// When set, the camera row norm is held at this value instead of
    /// being optimized.
    pub camera_scale: Option<f64>,
    /// Number of starting cameras, spread evenly in azimuth about the
    /// image vertical axis. The lowest final objective wins. `1` starts
    /// from the axis-drop camera only.
    pub restarts: usize,
    /// Outer iterations over which relative objective progress is measured.
    pub stall_window: usize,
    /// Relative objective decrease over `stall_window` below which the
    /// solve is declared stalled.
    pub stall_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 20.0,
            tol: 1e-6,
            max_iter: 10_000,
            apg_iters: 50,
            apg_tol: 1e-8,
            camera_scale: None,
            restarts: 1,
            stall_window: 20,
            stall_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a finite nonnegative number");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite nonnegative number");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter < 1 || self.apg_iters < 1 || self.restarts < 1 {
            return bad("max_iter, apg_iters and restarts must be at least 1");
        }
        if !(self.apg_tol > 0.0) {
            return bad("apg_tol must be positive");
        }
        if let Some(s) = self.camera_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("camera_scale must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Reprojection residual reached the tolerance.
    Converged,
    /// Iteration budget exhausted, or progress stalled (see `SolveReport::stalled`).
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub pose: Pose3D,
    pub camera: CameraMatrix,
    pub codes: Codes,
    pub objective_history: Vec<f64>,
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub stalled: bool,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// `sign(v)·max(|v| − λ, 0)` elementwise.
pub fn soft_threshold(v: &DVector<f64>, lambda: f64) -> DVector<f64> {
    v.map(|x| x.signum() * (x.abs() - lambda).max(0.0))
}

/// Second moments `Σ_p A_i[a,p] B_j[b,p]` of two dictionaries.
#[derive(Clone, Debug)]
struct Moments {
    /// Indexed by the six upper-triangle entries of a symmetric 3 × 3 matrix.
    parts: [DMatrix<f64>; 6],
}

const SYM_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

impl Moments {
    fn new(a: &PoseDictionary, b: &PoseDictionary) -> Self {
        let coords = |d: &PoseDictionary, axis: usize| {
            DMatrix::from_fn(d.size(), d.num_joints(), |j, p| d.atom(j).joints()[(axis, p)])
        };
        let ra = [coords(a, 0), coords(a, 1), coords(a, 2)];
        let rb = [coords(b, 0), coords(b, 1), coords(b, 2)];
        let parts = SYM_PAIRS.map(|(x, y)| {
            let mut m = &ra[x] * rb[y].transpose();
            if x != y {
                m += &ra[y] * rb[x].transpose();
            }
            m
        });
        Self { parts }
    }

    /// `[⟨R* A_i, R* B_j⟩]_{ij}`.
    fn gram(&self, cam: &Matrix2x3<f64>) -> DMatrix<f64> {
        let s: Matrix3<f64> = cam.transpose() * cam;
        let w = SYM_PAIRS.map(|(x, y)| s[(x, y)]);
        let mut out = &self.parts[0] * w[0];
        for (part, &wk) in self.parts.iter().zip(&w).skip(1) {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(part.as_slice()) {
                *o += wk * x;
            }
        }
        out
    }
}

/// `X Bᵀ_j` for every atom, so that `⟨R* B_j, X⟩ = ⟨R*, X Bᵀ_j⟩`.
fn correlations(x: &Pose2D, d: &PoseDictionary) -> Vec<Matrix2x3<f64>> {
    d.atoms()
        .iter()
        .map(|atom| x.joints() * atom.joints().transpose())
        .collect()
}

fn project_correlations(cam: &Matrix2x3<f64>, corr: &[Matrix2x3<f64>]) -> DVector<f64> {
    DVector::from_iterator(corr.len(), corr.iter().map(|c| cam.dot(c)))
}

fn stacked(d: &PoseDictionary) -> DMatrix<f64> {
    let rows = 3 * d.num_joints();
    DMatrix::from_fn(rows, d.size(), |r, j| d.atom(j).joints()[(r % 3, r / 3)])
}

/// `out = A v` for column-major `A`, four columns per pass over `out`.
fn mul_into(a: &DMatrix<f64>, v: &DVector<f64>, out: &mut DVector<f64>) {
    let n = a.nrows();
    let cols = a.as_slice();
    let out = out.as_mut_slice();
    out.fill(0.0);
    let mut blocks = cols.chunks_exact(4 * n).zip(v.as_slice().chunks_exact(4));
    for (block, w) in &mut blocks {
        let (c01, c23) = block.split_at(2 * n);
        let (c0, c1) = c01.split_at(n);
        let (c2, c3) = c23.split_at(n);
        for ((o, (x0, x1)), (x2, x3)) in out.iter_mut().zip(c0.iter().zip(c1)).zip(c2.iter().zip(c3)) {
            *o += x0 * w[0] + x1 * w[1] + x2 * w[2] + x3 * w[3];
        }
    }
    let done = 4 * (a.ncols() / 4);
    for (c, &vj) in cols[done * n..].chunks_exact(n).zip(&v.as_slice()[done..]) {
        for (o, x) in out.iter_mut().zip(c) {
            *o += x * vj;
        }
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration,
/// warm-started from `v`.
fn largest_eigenvalue(h: &DMatrix<f64>, v: &mut DVector<f64>) -> f64 {
    if v.len() != h.nrows() || v.norm() == 0.0 {
        *v = DVector::from_element(h.nrows(), 1.0);
    }
    let n0 = v.norm();
    *v /= n0;
    let mut estimate = 0.0;
    for _ in 0..500 {
        let hv = h * &*v;
        let next = hv.norm();
        if next == 0.0 {
            return 0.0;
        }
        *v = hv / next;
        if (next - estimate).abs() <= 1e-10 * next {
            estimate = next;
            break;
        }
        estimate = next;
    }
    estimate
}

/// Shared state for one 2D input and one dictionary pair.
struct Problem<'a> {
    x: &'a Pose2D,
    du: &'a PoseDictionary,
    dv: Option<&'a PoseDictionary>,
    uu: Moments,
    vv: Option<Moments>,
    uv: Option<Moments>,
    xu: Vec<Matrix2x3<f64>>,
    xv: Vec<Matrix2x3<f64>>,
    /// Atoms as columns of `3P × k` matrices.
    flat_u: DMatrix<f64>,
    flat_v: Option<DMatrix<f64>>,
    alpha: f64,
    beta: f64,
}

impl<'a> Problem<'a> {
    fn new(x: &'a Pose2D, du: &'a PoseDictionary, dv: Option<&'a PoseDictionary>, alpha: f64, beta: f64) -> Result<Self> {
        let p = x.num_joints();
        if du.num_joints() != p || dv.is_some_and(|d| d.num_joints() != p) {
            return Err(Error::DimensionMismatch(format!(
                "input has {p} joints, dictionaries have {} and {}",
                du.num_joints(),
                dv.map_or(du.num_joints(), |d| d.num_joints())
            )));
        }
        Ok(Self {
            x,
            du,
            dv,
            uu: Moments::new(du, du),
            vv: dv.map(|d| Moments::new(d, d)),
            uv: dv.map(|d| Moments::new(du, d)),
            xu: correlations(x, du),
            xv: dv.map(|d| correlations(x, d)).unwrap_or_default(),
            flat_u: stacked(du),
            flat_v: dv.map(stacked),
            alpha,
            beta,
        })
    }

    fn check_codes(&self, codes: &Codes) -> Result<()> {
        let kv = self.dv.map_or(codes.c_v.len(), |d| d.size());
        if codes.c_u.len() != self.du.size() || codes.c_v.len() != kv {
            return Err(Error::DimensionMismatch(format!(
                "codes of length ({}, {}) for dictionaries of size ({}, {kv})",
                codes.c_u.len(),
                codes.c_v.len(),
                self.du.size()
            )));
        }
        Ok(())
    }

    fn reconstruct(&self, c_u: &DVector<f64>, c_v: &DVector<f64>) -> Matrix3xX<f64> {
        let mut flat = &self.flat_u * c_u;
        if let Some(fv) = &self.flat_v {
            flat.gemv(1.0, fv, c_v, 1.0);
        }
        Matrix3xX::from_column_slice(flat.as_slice())
    }

    fn residual_norm(&self, cam: &Matrix2x3<f64>, w: &Matrix3xX<f64>) -> f64 {
        (self.x.joints() - cam * w).norm()
    }

    fn penalty(&self, c_u: &DVector<f64>, c_v: &DVector<f64>) -> f64 {
        let dense = if self.dv.is_some() { self.beta * c_v.norm_squared() } else { 0.0 };
        self.alpha * c_u.lp_norm(1) + dense
    }

    fn objective(&self, cam: &Matrix2x3<f64>, c_u: &DVector<f64>, c_v: &DVector<f64>) -> f64 {
        let w = self.reconstruct(c_u, c_v);
        let r = self.residual_norm(cam, &w);
        0.5 * r * r + self.penalty(c_u, c_v)
    }

    /// FISTA on the sparse block, started from `c_u`. Returns the iterate
    /// without any acceptance test.
    fn fista_cu(
        &self,
        cam: &Matrix2x3<f64>,
        c_u: &DVector<f64>,
        c_v: &DVector<f64>,
        iters: usize,
        tol: f64,
        eig_guess: &mut DVector<f64>,
    ) -> DVector<f64> {
        let h = self.uu.gram(cam);
        let mut b = project_correlations(cam, &self.xu);
        if let Some(uv) = &self.uv {
            b -= uv.gram(cam) * c_v;
        }
        // A small margin keeps the step safe when power iteration stops short.
        let lipschitz = largest_eigenvalue(&h, eig_guess) * (1.0 + 1e-6);
        if !(lipschitz > 0.0) {
            return c_u.clone();
        }
        let step = 1.0 / lipschitz;
        let shrink = self.alpha * step;
        let mut prev = c_u.clone();
        let mut next = c_u.clone();
        let mut y = c_u.clone();
        let mut hy = DVector::zeros(c_u.len());
        let mut t = 1.0f64;
        for _ in 0..iters {
            // next = soft(y − step·(H y − b))
            mul_into(&h, &y, &mut hy);
            for (((o, &yi), &hi), &bi) in next.iter_mut().zip(y.iter()).zip(hy.iter()).zip(b.iter()) {
                *o = yi - step * (hi - bi);
            }
            next.apply(|v| *v = v.signum() * (v.abs() - shrink).max(0.0));
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            let mut change2 = 0.0;
            for ((yi, &ni), &pi) in y.iter_mut().zip(next.iter()).zip(prev.iter()) {
                let d = ni - pi;
                change2 += d * d;
                *yi = ni + d * momentum;
            }
            std::mem::swap(&mut prev, &mut next);
            t = t_next;
            if change2.sqrt() <= tol * prev.norm().max(1.0) {
                break;
            }
        }
        prev
    }

    /// Normal-equation pieces for the dense block: `(ZᵀZ, Zᵀ(X − R* B_u c_u))`.
    fn ridge_system(&self, cam: &Matrix2x3<f64>, c_u: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let vv = self.vv.as_ref().expect("dense block requires a deformation dictionary");
        let uv = self.uv.as_ref().expect("dense block requires a deformation dictionary");
        let h = vv.gram(cam);
        let rhs = project_correlations(cam, &self.xv) - uv.gram(cam).tr_mul(c_u);
        (h, rhs)
    }

    /// Exact minimizer of the dense block. With `beta == 0` and a singular
    /// Gram matrix, returns `SingularSystem` unless `min_norm_fallback` is set,
    /// in which case the minimum-norm least-squares solution is used.
    fn solve_cv(&self, cam: &Matrix2x3<f64>, c_u: &DVector<f64>, min_norm_fallback: bool) -> Result<DVector<f64>> {
        let (mut h, rhs) = self.ridge_system(cam, c_u);
        if rhs.iter().all(|&v| v == 0.0) {
            return Ok(DVector::zeros(rhs.len()));
        }
        if self.beta > 0.0 {
            for i in 0..h.nrows() {
                h[(i, i)] += 2.0 * self.beta;
            }
            if let Some(chol) = h.clone().cholesky() {
                return Ok(chol.solve(&rhs));
            }
        }
        let eig = h.symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let cutoff = 1e-12 * top;
        let singular = !(top > 0.0) || eig.eigenvalues.iter().any(|&l| l <= cutoff);
        if singular && !min_norm_fallback {
            return Err(Error::SingularSystem(format!(
                "deformation Gram matrix is singular (eigenvalue ratio below {:e}) with beta = {}",
                1e-12, self.beta
            )));
        }
        let proj = eig.eigenvectors.transpose() * &rhs;
        let scaled = DVector::from_iterator(
            proj.len(),
            proj.iter()
                .zip(eig.eigenvalues.iter())
                .map(|(&p, &l)| if l > cutoff { p / l } else { 0.0 }),
        );
        Ok(&eig.eigenvectors * scaled)
    }
}

fn ensure_centered(x: &Pose2D) -> Result<()> {
    let scale = x.joints().amax().max(1.0);
    let mean = x.row_means().amax();
    if mean > CENTER_TOL * scale {
        return Err(Error::NotCentered(mean));
    }
    Ok(())
}

/// Sparse block update. The FISTA iterate replaces `codes.c_u` only if it
/// does not increase the block objective.
pub fn update_cu(
    x: &Pose2D,
    cam: &CameraMatrix,
    dict_u: &PoseDictionary,
    dict_v: &PoseDictionary,
    codes: &Codes,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    let problem = Problem::new(x, dict_u, Some(dict_v), cfg.alpha, cfg.beta)?;
    problem.check_codes(codes)?;
    let m = cam.matrix();
    let mut guess = DVector::zeros(0);
    let cand = problem.fista_cu(m, &codes.c_u, &codes.c_v, cfg.apg_iters, cfg.apg_tol, &mut guess);
    if problem.objective(m, &cand, &codes.c_v) <= problem.objective(m, &codes.c_u, &codes.c_v) {
        Ok(cand)
    } else {
        Ok(codes.c_u.clone())
    }
}

/// Dense block update, the exact minimizer `(ZᵀZ + 2βI)⁻¹ Zᵀ(X − R* B_u c_u)` with
/// `Z_j = vec(R* B_vj)`.
pub fn update_cv(
    x: &Pose2D,
    cam: &CameraMatrix,
    dict_u: &PoseDictionary,
    dict_v: &PoseDictionary,
    codes: &Codes,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    let problem = Problem::new(x, dict_u, Some(dict_v), cfg.alpha, cfg.beta)?;
    problem.check_codes(codes)?;
    problem.solve_cv(cam.matrix(), &codes.c_u, false)
}

/// `½‖X − R*(B_u c_u + B_v c_v)‖² + α‖c_u‖₁ + β‖c_v‖²`.
pub fn objective_sdm(
    x: &Pose2D,
    cam: &CameraMatrix,
    dict_u: &PoseDictionary,
    dict_v: &PoseDictionary,
    codes: &Codes,
    cfg: &SolverConfig,
) -> Result<f64> {
    let problem = Problem::new(x, dict_u, Some(dict_v), cfg.alpha, cfg.beta)?;
    problem.check_codes(codes)?;
    Ok(problem.objective(cam.matrix(), &codes.c_u, &codes.c_v))
}

/// Lifts a centered 2D pose with the shape decomposition model.
///
/// Without `init` the camera starts at the axis-drop camera (scaled to
/// `camera_scale` when that is fixed) and both codes at zero.
pub fn solve_sdm(
    x: &Pose2D,
    dict_u: &PoseDictionary,
    dict_v: &PoseDictionary,
    cfg: &SolverConfig,
    init: Option<(CameraMatrix, Codes)>,
) -> Result<SolveReport> {
    run(x, dict_u, Some(dict_v), cfg.alpha, cfg, init)
}

/// Single-dictionary sparse-representation baseline: the same loop with
/// the dense block removed. The reported `c_v` is all zeros.
pub fn solve_sr_baseline(x: &Pose2D, dict: &PoseDictionary, alpha: f64, cfg: &SolverConfig) -> Result<SolveReport> {
    run(x, dict, None, alpha, cfg, None)
}

fn run(
    x: &Pose2D,
    du: &PoseDictionary,
    dv: Option<&PoseDictionary>,
    alpha: f64,
    cfg: &SolverConfig,
    init: Option<(CameraMatrix, Codes)>,
) -> Result<SolveReport> {
    cfg.validate()?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config("alpha must be a finite nonnegative number".into()));
    }
    ensure_centered(x)?;
    let problem = Problem::new(x, du, dv, alpha, cfg.beta)?;
    let kv = dv.map_or(du.size(), |d| d.size());

    let starts = match init {
        Some((cam, codes)) => {
            problem.check_codes(&codes)?;
            vec![(cam, codes)]
        }
        None => {
            let scale = cfg.camera_scale.unwrap_or(1.0);
            (0..cfg.restarts)
                .map(|j| {
                    let azimuth = TAU * j as f64 / cfg.restarts as f64;
                    let turn = Rotation3::from_axis_angle(&Vector3::y_axis(), azimuth);
                    let cam = CameraMatrix::from_scale_rotation(scale, turn.matrix())?;
                    Ok((cam, Codes::zeros(du.size(), kv)))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let mut best: Option<SolveReport> = None;
    for (cam, codes) in starts {
        let report = descend(&problem, dv.is_some(), cfg, cam, codes)?;
        if best.as_ref().is_none_or(|b| report.final_objective() < b.final_objective()) {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Block-coordinate descent from one starting point.
fn descend(
    problem: &Problem<'_>,
    dense: bool,
    cfg: &SolverConfig,
    mut cam: CameraMatrix,
    mut codes: Codes,
) -> Result<SolveReport> {
    if !dense {
        codes.c_v = DVector::zeros(codes.c_v.len());
    }

    let mut objective = problem.objective(cam.matrix(), &codes.c_u, &codes.c_v);
    let mut objective_history = Vec::new();
    let mut residual_history = Vec::new();
    let mut eig_guess = DVector::zeros(0);
    let mut termination = Termination::MaxIter;
    let mut stalled = false;

    for iter in 0..cfg.max_iter {
        // camera
        let w = Pose3D::new(problem.reconstruct(&codes.c_u, &codes.c_v))?;
        let opts = CameraUpdate {
            fixed_scale: cfg.camera_scale,
            previous: Some(&cam),
        };
        if let Ok(next) = update_camera_with(problem.x, &w, &opts) {
            let f = problem.objective(next.matrix(), &codes.c_u, &codes.c_v);
            if f <= objective {
                cam = next;
                objective = f;
            }
        }
        let m = *cam.matrix();

        // sparse code
        let c_u = problem.fista_cu(&m, &codes.c_u, &codes.c_v, cfg.apg_iters, cfg.apg_tol, &mut eig_guess);
        let f = problem.objective(&m, &c_u, &codes.c_v);
        if f <= objective {
            codes.c_u = c_u;
            objective = f;
        }

        // dense code
        if dense {
            let c_v = problem.solve_cv(&m, &codes.c_u, true)?;
            let f = problem.objective(&m, &codes.c_u, &c_v);
            if f <= objective {
                codes.c_v = c_v;
                objective = f;
            }
        }

        let w = problem.reconstruct(&codes.c_u, &codes.c_v);
        let residual = problem.residual_norm(&m, &w);
        objective_history.push(objective);
        residual_history.push(residual);

        if residual <= cfg.tol {
            termination = Termination::Converged;
            break;
        }
        if iter >= cfg.stall_window {
            let past = objective_history[iter - cfg.stall_window];
            if past - objective <= cfg.stall_tol * past.abs() {
                stalled = true;
                break;
            }
        }
    }

    let pose = Pose3D::new(problem.reconstruct(&codes.c_u, &codes.c_v))?;
    Ok(SolveReport {
        pose,
        camera: cam,
        codes,
        iterations: objective_history.len(),
        objective_history,
        residual_history,
        termination,
        stalled,
    })
}
