//! Joint learning of the global-structure and deformation dictionaries.
//!
//! Minimizes over `B_u, B_v` (columns are flattened atoms) and the code
//! matrices `C_u, C_v` (one column per training pose):
//!
//! ```text
//! Σ_m ½‖D_m − B_u c_um − B_v c_vm‖² + γ‖C_u‖₁ + η‖C_v‖²_F
//! ```
//!
//! Each outer iteration takes one projected (or proximal, for `C_u`)
//! gradient step per block. Steps are `δ_i / L_i` with `L_i` the block
//! Lipschitz constant, halved until the loss does not increase.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{DictKind, Pose3D, PoseDictionary, CENTER_TOL};

const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictLearnConfig {
    /// ℓ1 weight on `C_u`.
    pub gamma: f64,
    /// Squared-ℓ2 weight on `C_v`.
    pub eta: f64,
    /// Atoms per dictionary.
    pub k: usize,
    /// Initial step multipliers for `C_u`, `C_v`, `B_u`, `B_v`, in units of
    /// the inverse block Lipschitz constant.
    pub steps: [f64; 4],
    /// Relative loss improvement over `window` iterations that ends training.
    pub tol: f64,
    pub window: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for DictLearnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            eta: 1.0,
            k: 32,
            steps: [1.0; 4],
            tol: 1e-6,
            window: 10,
            max_iter: 500,
            seed: 0,
        }
    }
}

impl DictLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("dictionary size k must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.eta >= 0.0) {
            return Err(Error::Config("gamma and eta must be nonnegative".into()));
        }
        if self.steps.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("all step sizes must be positive".into()));
        }
        if !(self.tol > 0.0) || self.window < 1 {
            return Err(Error::Config("tol must be positive and window at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeKind {
    Sparse,
    Dense,
}

/// Per-pose code vectors stored as the columns of a `k × N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix {
    pub columns: DMatrix<f64>,
    pub kind: CodeKind,
}

impl CodeMatrix {
    pub fn zeros(k: usize, n: usize, kind: CodeKind) -> Self {
        Self {
            columns: DMatrix::zeros(k, n),
            kind,
        }
    }

    pub fn code(&self, m: usize) -> DVector<f64> {
        self.columns.column(m).into_owned()
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub dict_u: PoseDictionary,
    pub dict_v: PoseDictionary,
    pub codes_u: CodeMatrix,
    pub codes_v: CodeMatrix,
    /// Loss at initialization followed by the loss after each iteration.
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Gradients of the smooth part of the loss. Dictionary gradients are
/// `3P × k`, laid out like [`PoseDictionary::basis`].
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub c_u: DMatrix<f64>,
    pub c_v: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_v: DMatrix<f64>,
}

fn data_matrix(train: &[Pose3D]) -> Result<DMatrix<f64>> {
    let Some(first) = train.first() else {
        return Err(Error::EmptyTrainingSet);
    };
    let p = first.num_joints();
    for pose in train {
        if pose.num_joints() != p {
            return Err(Error::DimensionMismatch(format!(
                "training poses have {} and {p} joints",
                pose.num_joints()
            )));
        }
        let mean = pose.row_means().amax();
        if mean > CENTER_TOL * pose.joints().amax().max(1.0) {
            return Err(Error::NotCentered(mean));
        }
    }
    Ok(DMatrix::from_fn(3 * p, train.len(), |r, m| train[m].as_slice()[r]))
}

/// Working state in matrix form.
struct State {
    bu: DMatrix<f64>,
    bv: DMatrix<f64>,
    cu: DMatrix<f64>,
    cv: DMatrix<f64>,
}

impl State {
    fn residual(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = d.clone();
        r.gemm(-1.0, &self.bu, &self.cu, 1.0);
        r.gemm(-1.0, &self.bv, &self.cv, 1.0);
        r
    }

    fn loss(&self, d: &DMatrix<f64>, gamma: f64, eta: f64) -> f64 {
        0.5 * self.residual(d).norm_squared() + gamma * self.cu.lp_norm(1) + eta * self.cv.norm_squared()
    }

    fn gradients(&self, d: &DMatrix<f64>, eta: f64) -> LossGradients {
        let r = self.residual(d);
        LossGradients {
            c_u: -(self.bu.transpose() * &r),
            c_v: -(self.bv.transpose() * &r) + &self.cv * (2.0 * eta),
            b_u: -(&r * self.cu.transpose()),
            b_v: -(&r * self.cv.transpose()),
        }
    }
}

fn check_shapes(d: &DMatrix<f64>, du: &PoseDictionary, dv: &PoseDictionary, cu: &CodeMatrix, cv: &CodeMatrix) -> Result<()> {
    let rows = d.nrows();
    if 3 * du.num_joints() != rows || 3 * dv.num_joints() != rows {
        return Err(Error::DimensionMismatch("dictionary and training joint counts differ".into()));
    }
    let n = d.ncols();
    if cu.columns.shape() != (du.size(), n) || cv.columns.shape() != (dv.size(), n) {
        return Err(Error::DimensionMismatch(format!(
            "code matrices {:?} and {:?} for dictionaries of size {} and {} over {n} poses",
            cu.columns.shape(),
            cv.columns.shape(),
            du.size(),
            dv.size()
        )));
    }
    Ok(())
}

fn state_of(du: &PoseDictionary, dv: &PoseDictionary, cu: &CodeMatrix, cv: &CodeMatrix) -> State {
    State {
        bu: du.basis(),
        bv: dv.basis(),
        cu: cu.columns.clone(),
        cv: cv.columns.clone(),
    }
}

/// `Σ_m ½‖D_m − Σ_j(B_uj c_ujm + B_vj c_vjm)‖² + γ‖C_u‖₁ + η‖C_v‖²`.
pub fn dictlearn_loss(
    train: &[Pose3D],
    dict_u: &PoseDictionary,
    dict_v: &PoseDictionary,
    codes_u: &CodeMatrix,
    codes_v: &CodeMatrix,
    cfg: &DictLearnConfig,
) -> Result<f64> {
    let d = data_matrix(train)?;
    check_shapes(&d, dict_u, dict_v, codes_u, codes_v)?;
    Ok(state_of(dict_u, dict_v, codes_u, codes_v).loss(&d, cfg.gamma, cfg.eta))
}

/// Gradients of the smooth part (everything except `γ‖C_u‖₁`).
pub fn loss_gradients(
    train: &[Pose3D],
    dict_u: &PoseDictionary,
    dict_v: &PoseDictionary,
    codes_u: &CodeMatrix,
    codes_v: &CodeMatrix,
    cfg: &DictLearnConfig,
) -> Result<LossGradients> {
    let d = data_matrix(train)?;
    check_shapes(&d, dict_u, dict_v, codes_u, codes_v)?;
    Ok(state_of(dict_u, dict_v, codes_u, codes_v).gradients(&d, cfg.eta))
}

/// Largest eigenvalue of the PSD matrix `a aᵀ` (or `aᵀ a`, same value).
fn spectral_norm_sq(a: &DMatrix<f64>) -> f64 {
    let gram = if a.nrows() <= a.ncols() { a * a.transpose() } else { a.transpose() * a };
    let mut v = DVector::from_element(gram.nrows(), 1.0);
    let mut estimate = 0.0;
    for _ in 0..1000 {
        let next = &gram * &v;
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = next / norm;
        if (norm - estimate).abs() <= 1e-10 * norm {
            return norm;
        }
        estimate = norm;
    }
    estimate
}

/// Euclidean projection of every column onto {centered, norm ≤ 1}.
fn project_columns(b: &mut DMatrix<f64>) {
    let p = b.nrows() / 3;
    for mut col in b.column_iter_mut() {
        for axis in 0..3 {
            let mean = (0..p).map(|i| col[3 * i + axis]).sum::<f64>() / p as f64;
            if mean.abs() > 1e-12 {
                for i in 0..p {
                    col[3 * i + axis] -= mean;
                }
            }
        }
        let norm = col.norm();
        if norm > 1.0 {
            col /= norm;
            while col.norm() > 1.0 {
                col *= 1.0 - f64::EPSILON;
            }
        }
    }
}

fn soft_threshold_matrix(m: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    m.map(|x| x.signum() * (x.abs() - lambda).max(0.0))
}

#[derive(Clone, Copy)]
enum Block {
    SparseCodes,
    DenseCodes,
    GlobalAtoms,
    DeformAtoms,
}

/// One backtracking step on `block`. Returns the new loss (unchanged if
/// every trial step increased it).
fn step_block(state: &mut State, d: &DMatrix<f64>, cfg: &DictLearnConfig, block: Block, loss: f64) -> f64 {
    let grads = state.gradients(d, cfg.eta);
    let (lipschitz, delta) = match block {
        Block::SparseCodes => (spectral_norm_sq(&state.bu), cfg.steps[0]),
        Block::DenseCodes => (spectral_norm_sq(&state.bv) + 2.0 * cfg.eta, cfg.steps[1]),
        Block::GlobalAtoms => (spectral_norm_sq(&state.cu), cfg.steps[2]),
        Block::DeformAtoms => (spectral_norm_sq(&state.cv), cfg.steps[3]),
    };
    if !(lipschitz > 0.0) {
        return loss;
    }
    let mut step = delta / lipschitz;
    for _ in 0..=MAX_HALVINGS {
        let mut trial = State {
            bu: state.bu.clone(),
            bv: state.bv.clone(),
            cu: state.cu.clone(),
            cv: state.cv.clone(),
        };
        match block {
            Block::SparseCodes => {
                trial.cu = soft_threshold_matrix(&(&state.cu - &grads.c_u * step), cfg.gamma * step);
            }
            Block::DenseCodes => trial.cv = &state.cv - &grads.c_v * step,
            Block::GlobalAtoms => {
                trial.bu = &state.bu - &grads.b_u * step;
                project_columns(&mut trial.bu);
            }
            Block::DeformAtoms => {
                trial.bv = &state.bv - &grads.b_v * step;
                project_columns(&mut trial.bv);
            }
        }
        let trial_loss = trial.loss(d, cfg.gamma, cfg.eta);
        if trial_loss <= loss {
            *state = trial;
            return trial_loss;
        }
        step *= 0.5;
    }
    loss
}

fn initialize(d: &DMatrix<f64>, cfg: &DictLearnConfig, warnings: &mut Vec<String>) -> State {
    let (rows, n) = d.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    if n < cfg.k {
        warnings.push(format!(
            "training set has {n} poses for {} atoms; atoms beyond {n} are perturbed repeats",
            cfg.k
        ));
    }

    let mut bu = DMatrix::zeros(rows, cfg.k);
    for j in 0..cfg.k {
        bu.set_column(j, &d.column(order[j % n]));
    }
    project_columns(&mut bu);
    if n < cfg.k {
        let jitter = Normal::new(0.0, 0.01 / (rows as f64).sqrt()).expect("valid std");
        for j in n..cfg.k {
            for r in 0..rows {
                bu[(r, j)] += jitter.sample(&mut rng);
            }
        }
        project_columns(&mut bu);
    }

    let mut norms: Vec<f64> = bu.column_iter().map(|c| c.norm()).collect();
    norms.sort_by(f64::total_cmp);
    let median = norms[norms.len() / 2];
    let sigma = 0.01 * median.max(f64::MIN_POSITIVE);
    let noise = Normal::new(0.0, sigma).expect("valid std");
    let mut bv = DMatrix::from_fn(rows, cfg.k, |_, _| noise.sample(&mut rng));
    project_columns(&mut bv);

    State {
        bu,
        bv,
        cu: DMatrix::zeros(cfg.k, n),
        cv: DMatrix::zeros(cfg.k, n),
    }
}

fn dictionary(b: &DMatrix<f64>, kind: DictKind) -> Result<PoseDictionary> {
    let atoms = b
        .column_iter()
        .map(|col| Pose3D::from_flat(col.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    PoseDictionary::with_tolerance(atoms, kind, CENTER_TOL)
}

/// Alternating projected-gradient training of both dictionaries.
pub fn learn_dictionaries(train: &[Pose3D], cfg: &DictLearnConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let d = data_matrix(train)?;
    let mut warnings = Vec::new();
    let mut state = initialize(&d, cfg, &mut warnings);
    let mut loss = state.loss(&d, cfg.gamma, cfg.eta);
    let mut loss_history = vec![loss];

    for iter in 0..cfg.max_iter {
        for block in [Block::SparseCodes, Block::DenseCodes, Block::GlobalAtoms, Block::DeformAtoms] {
            loss = step_block(&mut state, &d, cfg, block, loss);
        }
        loss_history.push(loss);
        if iter + 1 >= cfg.window {
            let past = loss_history[loss_history.len() - 1 - cfg.window];
            if past - loss <= cfg.tol * past.abs() {
                break;
            }
        }
    }

    Ok(TrainReport {
        dict_u: dictionary(&state.bu, DictKind::GlobalStructure)?,
        dict_v: dictionary(&state.bv, DictKind::Deformation)?,
        codes_u: CodeMatrix {
            columns: state.cu,
            kind: CodeKind::Sparse,
        },
        codes_v: CodeMatrix {
            columns: state.cv,
            kind: CodeKind::Dense,
        },
        iterations: loss_history.len() - 1,
        loss_history,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::center_pose;
    use nalgebra::Matrix3xX;
    use rand::Rng;

    fn random_pose(rng: &mut ChaCha8Rng, p: usize, scale: f64) -> Pose3D {
        let raw = Pose3D::new(Matrix3xX::from_fn(p, |_, _| rng.random_range(-scale..scale))).unwrap();
        center_pose(&raw).0
    }

    fn random_dict(rng: &mut ChaCha8Rng, k: usize, p: usize, kind: DictKind) -> PoseDictionary {
        let atoms = (0..k)
            .map(|_| {
                let a = random_pose(rng, p, 1.0);
                let n = a.norm();
                a.scaled(0.5 / n).unwrap()
            })
            .collect();
        PoseDictionary::new(atoms, kind).unwrap()
    }

    fn random_codes(rng: &mut ChaCha8Rng, k: usize, n: usize, kind: CodeKind) -> CodeMatrix {
        CodeMatrix {
            columns: DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0)),
            kind,
        }
    }

    fn perturbed(d: &PoseDictionary, j: usize, entry: usize, h: f64) -> PoseDictionary {
        let mut atoms = d.atoms().to_vec();
        let mut flat = atoms[j].as_slice().to_vec();
        flat[entry] += h;
        atoms[j] = Pose3D::from_flat(&flat).unwrap();
        PoseDictionary::with_tolerance(atoms, d.kind(), 1e-3).unwrap()
    }

    fn relative_gap(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
        (analytic - numeric).norm() / analytic.norm().max(numeric.norm()).max(1e-8)
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train: Vec<Pose3D> = (0..3).map(|_| random_pose(&mut rng, 4, 2.0)).collect();
        let du = random_dict(&mut rng, 2, 4, DictKind::GlobalStructure);
        let dv = random_dict(&mut rng, 2, 4, DictKind::Deformation);
        let cfg = DictLearnConfig { gamma: 0.3, eta: 0.7, ..Default::default() };

        let zero_u = CodeMatrix::zeros(2, 3, CodeKind::Sparse);
        let zero_v = CodeMatrix::zeros(2, 3, CodeKind::Dense);
        let energy: f64 = train.iter().map(|y| 0.5 * y.norm().powi(2)).sum();
        let got = dictlearn_loss(&train, &du, &dv, &zero_u, &zero_v, &cfg).unwrap();
        assert!((got - energy).abs() < 1e-12);

        let cu = random_codes(&mut rng, 2, 3, CodeKind::Sparse);
        let cv = random_codes(&mut rng, 2, 3, CodeKind::Dense);
        let mut data = 0.0;
        for m in 0..3 {
            for i in 0..4 {
                for a in 0..3 {
                    let mut v = train[m].joints()[(a, i)];
                    for j in 0..2 {
                        v -= du.atom(j).joints()[(a, i)] * cu.columns[(j, m)];
                        v -= dv.atom(j).joints()[(a, i)] * cv.columns[(j, m)];
                    }
                    data += v * v;
                }
            }
        }
        let l1: f64 = cu.columns.iter().map(|c| c.abs()).sum();
        let l2: f64 = cv.columns.iter().map(|c| c * c).sum();
        let expected = 0.5 * data + cfg.gamma * l1 + cfg.eta * l2;
        let got = dictlearn_loss(&train, &du, &dv, &cu, &cv, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);

        // Exact reconstruction with no penalties.
        let exact: Vec<Pose3D> = (0..3)
            .map(|m| {
                let a = du.weighted_sum(&cu.code(m)).unwrap();
                let b = dv.weighted_sum(&cv.code(m)).unwrap();
                Pose3D::new(a.joints() + b.joints()).unwrap()
            })
            .collect();
        let free = DictLearnConfig { gamma: 0.0, eta: 0.0, ..Default::default() };
        assert!(dictlearn_loss(&exact, &du, &dv, &cu, &cv, &free).unwrap() < 1e-24);
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let du = random_dict(&mut rng, 2, 4, DictKind::GlobalStructure);
        let dv = random_dict(&mut rng, 2, 4, DictKind::Deformation);
        let cu = CodeMatrix::zeros(2, 1, CodeKind::Sparse);
        let cv = CodeMatrix::zeros(2, 1, CodeKind::Dense);
        let cfg = DictLearnConfig::default();
        let shifted = Pose3D::new(random_pose(&mut rng, 4, 1.0).joints().add_scalar(1.0)).unwrap();
        assert!(matches!(
            dictlearn_loss(&[shifted], &du, &dv, &cu, &cv, &cfg),
            Err(Error::NotCentered(_))
        ));
        let ok = random_pose(&mut rng, 4, 1.0);
        let wide = CodeMatrix::zeros(2, 2, CodeKind::Sparse);
        assert!(matches!(
            dictlearn_loss(&[ok.clone()], &du, &dv, &wide, &cv, &cfg),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(dictlearn_loss(&[], &du, &dv, &cu, &cv, &cfg), Err(Error::EmptyTrainingSet)));
        assert!(matches!(learn_dictionaries(&[], &cfg), Err(Error::EmptyTrainingSet)));
        let bad = DictLearnConfig { k: 0, ..Default::default() };
        assert!(matches!(learn_dictionaries(&[ok], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_at_zero_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train: Vec<Pose3D> = (0..4).map(|_| random_pose(&mut rng, 5, 1.0)).collect();
        let du = random_dict(&mut rng, 3, 5, DictKind::GlobalStructure);
        let dv = random_dict(&mut rng, 2, 5, DictKind::Deformation);
        let cu = CodeMatrix::zeros(3, 4, CodeKind::Sparse);
        let cv = CodeMatrix::zeros(2, 4, CodeKind::Dense);
        let g = loss_gradients(&train, &du, &dv, &cu, &cv, &DictLearnConfig::default()).unwrap();
        assert!(g.b_u.iter().all(|&v| v == 0.0));
        assert!(g.b_v.iter().all(|&v| v == 0.0));
        for m in 0..4 {
            for j in 0..3 {
                let corr = du.atom(j).joints().dot(train[m].joints());
                assert!((g.c_u[(j, m)] + corr).abs() < 1e-12);
            }
            for j in 0..2 {
                let corr = dv.atom(j).joints().dot(train[m].joints());
                assert!((g.c_v[(j, m)] + corr).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_vanish_at_exact_fit_except_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let du = random_dict(&mut rng, 3, 5, DictKind::GlobalStructure);
        let dv = random_dict(&mut rng, 2, 5, DictKind::Deformation);
        let train = vec![du.atom(0).clone()];
        let mut cu = CodeMatrix::zeros(3, 1, CodeKind::Sparse);
        cu.columns[(0, 0)] = 1.0;
        let cv = CodeMatrix::zeros(2, 1, CodeKind::Dense);
        let cfg = DictLearnConfig { eta: 2.5, ..Default::default() };
        let g = loss_gradients(&train, &du, &dv, &cu, &cv, &cfg).unwrap();
        for m in [&g.c_u, &g.c_v, &g.b_u, &g.b_v] {
            assert!(m.amax() < 1e-15);
        }
        let cv = random_codes(&mut rng, 2, 1, CodeKind::Dense);
        let shifted: Vec<Pose3D> = vec![Pose3D::new(du.atom(0).joints() + dv.weighted_sum(&cv.code(0)).unwrap().joints()).unwrap()];
        let g = loss_gradients(&shifted, &du, &dv, &cu, &cv, &cfg).unwrap();
        assert!((&g.c_v - &cv.columns * (2.0 * cfg.eta)).amax() < 1e-12);
        assert!(g.c_u.amax() < 1e-12 && g.b_u.amax() < 1e-12 && g.b_v.amax() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let n = rng.random_range(1..=4);
            let k = rng.random_range(1..=3);
            let p = rng.random_range(2..=5);
            let train: Vec<Pose3D> = (0..n).map(|_| random_pose(&mut rng, p, 1.0)).collect();
            let du = random_dict(&mut rng, k, p, DictKind::GlobalStructure);
            let dv = random_dict(&mut rng, k, p, DictKind::Deformation);
            let cu = random_codes(&mut rng, k, n, CodeKind::Sparse);
            let cv = random_codes(&mut rng, k, n, CodeKind::Dense);
            let cfg = DictLearnConfig { gamma: 0.0, eta: rng.random_range(0.0..2.0), ..Default::default() };
            let g = loss_gradients(&train, &du, &dv, &cu, &cv, &cfg).unwrap();
            let loss = |du: &PoseDictionary, dv: &PoseDictionary, cu: &CodeMatrix, cv: &CodeMatrix| {
                dictlearn_loss(&train, du, dv, cu, cv, &cfg).unwrap()
            };

            let mut num_cu = DMatrix::zeros(k, n);
            let mut num_cv = DMatrix::zeros(k, n);
            for j in 0..k {
                for m in 0..n {
                    let mut plus = cu.clone();
                    let mut minus = cu.clone();
                    plus.columns[(j, m)] += h;
                    minus.columns[(j, m)] -= h;
                    num_cu[(j, m)] = (loss(&du, &dv, &plus, &cv) - loss(&du, &dv, &minus, &cv)) / (2.0 * h);
                    let mut plus = cv.clone();
                    let mut minus = cv.clone();
                    plus.columns[(j, m)] += h;
                    minus.columns[(j, m)] -= h;
                    num_cv[(j, m)] = (loss(&du, &dv, &cu, &plus) - loss(&du, &dv, &cu, &minus)) / (2.0 * h);
                }
            }
            let mut num_bu = DMatrix::zeros(3 * p, k);
            let mut num_bv = DMatrix::zeros(3 * p, k);
            for j in 0..k {
                for e in 0..3 * p {
                    num_bu[(e, j)] = (loss(&perturbed(&du, j, e, h), &dv, &cu, &cv)
                        - loss(&perturbed(&du, j, e, -h), &dv, &cu, &cv))
                        / (2.0 * h);
                    num_bv[(e, j)] = (loss(&du, &perturbed(&dv, j, e, h), &cu, &cv)
                        - loss(&du, &perturbed(&dv, j, e, -h), &cu, &cv))
                        / (2.0 * h);
                }
            }
            assert!(relative_gap(&g.c_u, &num_cu) < 1e-5);
            assert!(relative_gap(&g.c_v, &num_cv) < 1e-5);
            assert!(relative_gap(&g.b_u, &num_bu) < 1e-5);
            assert!(relative_gap(&g.b_v, &num_bv) < 1e-5);
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let train: Vec<Pose3D> = (0..6).map(|_| random_pose(&mut rng, 5, 100.0)).collect();
        let cfg = DictLearnConfig { k: 3, max_iter: 0, ..Default::default() };
        let report = learn_dictionaries(&train, &cfg).unwrap();
        assert_eq!(report.loss_history.len(), 1);
        assert_eq!(report.iterations, 0);
        assert!(report.codes_u.columns.iter().all(|&c| c == 0.0));
        assert!(report.codes_v.columns.iter().all(|&c| c == 0.0));
        let energy: f64 = train.iter().map(|y| 0.5 * y.norm().powi(2)).sum();
        assert!((report.loss_history[0] - energy).abs() < 1e-9 * energy);
        // Global atoms are normalized training poses.
        for atom in report.dict_u.atoms() {
            assert!((atom.norm() - 1.0).abs() < 1e-12);
            assert!(train.iter().any(|y| (y.joints() / y.norm() - atom.joints()).amax() < 1e-12));
        }
    }

    #[test]
    fn exact_fit_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let train: Vec<Pose3D> = (0..4).map(|_| random_pose(&mut rng, 6, 100.0)).collect();
        let cfg = DictLearnConfig {
            k: 4,
            gamma: 0.0,
            eta: 0.0,
            max_iter: 2000,
            tol: 1e-12,
            ..Default::default()
        };
        let report = learn_dictionaries(&train, &cfg).unwrap();
        let energy: f64 = train.iter().map(|y| 0.5 * y.norm().powi(2)).sum();
        assert!(*report.loss_history.last().unwrap() < 0.01 * energy);
    }

    #[test]
    fn training_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train: Vec<Pose3D> = (0..20).map(|_| random_pose(&mut rng, 8, 100.0)).collect();
        let cfg = DictLearnConfig { k: 5, max_iter: 60, ..Default::default() };
        let a = learn_dictionaries(&train, &cfg).unwrap();
        for w in a.loss_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(a.loss_history.len(), a.iterations + 1);
        assert_eq!(a.codes_u.columns.shape(), (5, 20));
        assert_eq!(a.codes_v.columns.shape(), (5, 20));
        assert_eq!(a.dict_u.kind(), DictKind::GlobalStructure);
        assert_eq!(a.dict_v.kind(), DictKind::Deformation);
        for d in [&a.dict_u, &a.dict_v] {
            PoseDictionary::new(d.atoms().to_vec(), d.kind()).unwrap();
        }
        let reported = dictlearn_loss(&train, &a.dict_u, &a.dict_v, &a.codes_u, &a.codes_v, &cfg).unwrap();
        assert!((reported - a.loss_history.last().unwrap()).abs() <= 1e-9 * reported);
        assert!(a.warnings.is_empty());

        let b = learn_dictionaries(&train, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.dict_u, b.dict_u);
        assert_eq!(a.dict_v, b.dict_v);
        assert_eq!(a.codes_u, b.codes_u);

        let other = learn_dictionaries(&train, &DictLearnConfig { seed: 9, ..cfg.clone() }).unwrap();
        assert_ne!(a.dict_u, other.dict_u);
    }

    #[test]
    fn small_training_set_warns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let train: Vec<Pose3D> = (0..3).map(|_| random_pose(&mut rng, 5, 100.0)).collect();
        let report = learn_dictionaries(&train, &DictLearnConfig { k: 6, max_iter: 5, ..Default::default() }).unwrap();
        assert_eq!(report.dict_u.size(), 6);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn stronger_sparsity_gives_more_zeros() {
        let zero_fraction = |gamma: f64| {
            let mut total = 0.0;
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let train: Vec<Pose3D> = (0..12).map(|_| random_pose(&mut rng, 6, 1.0)).collect();
                let cfg = DictLearnConfig { k: 6, gamma, max_iter: 100, seed, ..Default::default() };
                let r = learn_dictionaries(&train, &cfg).unwrap();
                let zeros = r.codes_u.columns.iter().filter(|c| c.abs() < 1e-6).count();
                total += zeros as f64 / r.codes_u.columns.len() as f64;
            }
            total / 10.0
        };
        let strong = zero_fraction(1.0);
        let weak = zero_fraction(0.001);
        assert!(strong >= weak, "{strong} < {weak}");
        assert!(strong > 0.0);
    }
}
