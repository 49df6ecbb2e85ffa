//! Dataset construction, batch solving and scoring shared by the commands.

use rayon::prelude::*;
use rayon::ThreadPool;

use sdm_core::dictlearn::{learn_dictionaries, DictLearnConfig, TrainReport};
use sdm_core::io::Labeled;
use sdm_core::metrics::{estimation_error, per_joint_error};
use sdm_core::solver::{solve_sdm, solve_sr_baseline, SolveReport, SolverConfig};
use sdm_core::synth::{add_noise, generate_family, mix_seed, orbit_project, Archetype, NoiseSpec};
use sdm_core::{center_pose2d, Error, Pose2D, Pose3D, PoseDictionary, Result};

use crate::config::{Config, Method};

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Labeled 3D train and test poses.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Labeled<Pose3D>>,
    pub test: Vec<Labeled<Pose3D>>,
}

fn family_index(a: Archetype) -> u64 {
    Archetype::ALL.iter().position(|&b| b == a).expect("listed") as u64
}

/// `count` poses per family with ids `family-NNNN`. A family's poses depend
/// only on `(seed, stream, family)`, not on which other families are listed.
pub fn generate_poses(families: &[Archetype], count: usize, seed: u64, stream: u64) -> Result<Vec<Labeled<Pose3D>>> {
    let mut out = Vec::with_capacity(families.len() * count);
    for &family in families {
        let family_seed = mix_seed(mix_seed(seed, stream), family_index(family));
        let poses = generate_family(&family.family(count, family_seed))?;
        out.extend(
            poses
                .into_iter()
                .enumerate()
                .map(|(i, pose)| Labeled::new(format!("{family}-{i:04}"), pose)),
        );
    }
    Ok(out)
}

pub fn generate_dataset(cfg: &Config) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_poses(&cfg.train_families()?, cfg.data.train_count, cfg.seed, TRAIN_STREAM)?,
        test: generate_poses(&cfg.test_families()?, cfg.data.test_count, cfg.seed, TEST_STREAM)?,
    })
}

/// Centered orbit views of every test pose, with ids `pose-id/vJ`.
///
/// The noise seed of a record does not depend on `sigma`, so files at
/// different noise levels share the same underlying draws.
pub fn project_views(test: &[Labeled<Pose3D>], views: usize, sigma: f64, seed: u64) -> Result<Vec<Labeled<Pose2D>>> {
    let noise_seed = mix_seed(seed, NOISE_STREAM);
    let mut out = Vec::with_capacity(test.len() * views);
    for record in test {
        for (j, x) in orbit_project(&record.pose, views).into_iter().enumerate() {
            let spec = NoiseSpec {
                sigma,
                seed: mix_seed(noise_seed, out.len() as u64),
            };
            let noisy = add_noise(&x, &spec)?;
            out.push(Labeled::new(format!("{}/v{j}", record.id), center_pose2d(&noisy).0));
        }
    }
    Ok(out)
}

/// The 3D pose id a view id was projected from.
pub fn view_source(id: &str) -> &str {
    id.rsplit_once("/v").map_or(id, |(base, _)| base)
}

/// Category of a pose id: the text before the first `-`.
pub fn category(id: &str) -> &str {
    id.split_once('-').map_or(id, |(head, _)| head)
}

/// Dictionaries for both methods.
#[derive(Clone, Debug)]
pub struct Learned {
    pub dict_u: PoseDictionary,
    pub dict_v: PoseDictionary,
    /// Single dictionary of the baseline.
    pub baseline: PoseDictionary,
}

impl Learned {
    pub fn from_reports(sdm: TrainReport, baseline: TrainReport) -> Self {
        Self {
            dict_u: sdm.dict_u,
            dict_v: sdm.dict_v,
            baseline: baseline.dict_u,
        }
    }
}

pub fn learn_both(train: &[Pose3D], sdm: &DictLearnConfig, baseline: &DictLearnConfig) -> Result<Learned> {
    Ok(Learned::from_reports(
        learn_dictionaries(train, sdm)?,
        learn_dictionaries(train, baseline)?,
    ))
}

/// What a batch of 2D poses is lifted with.
#[derive(Clone, Copy, Debug)]
pub enum Model<'a> {
    Baseline(&'a PoseDictionary),
    Decomposed {
        dict_u: &'a PoseDictionary,
        dict_v: &'a PoseDictionary,
    },
}

impl<'a> Model<'a> {
    pub fn from_learned(method: Method, learned: &'a Learned) -> Self {
        match method {
            Method::Sr => Model::Baseline(&learned.baseline),
            Method::Sdm => Model::Decomposed {
                dict_u: &learned.dict_u,
                dict_v: &learned.dict_v,
            },
        }
    }

    pub fn num_joints(&self) -> usize {
        match self {
            Model::Baseline(d) => d.num_joints(),
            Model::Decomposed { dict_u, .. } => dict_u.num_joints(),
        }
    }

    pub fn solve(&self, x: &Pose2D, cfg: &SolverConfig) -> Result<SolveReport> {
        match *self {
            Model::Baseline(d) => solve_sr_baseline(x, d, cfg.alpha, cfg),
            Model::Decomposed { dict_u, dict_v } => solve_sdm(x, dict_u, dict_v, cfg, None),
        }
    }
}

pub fn worker_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Maps `f` over `items` on the pool. Output order follows input order and
/// the first failing item (by index) decides the error.
pub fn par_map<T, U, F>(pool: &ThreadPool, items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    pool.install(|| items.par_iter().map(&f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

pub fn solve_batch(pool: &ThreadPool, model: Model<'_>, inputs: &[Pose2D], cfg: &SolverConfig) -> Result<Vec<SolveReport>> {
    cfg.validate()?;
    if let Some(x) = inputs.iter().find(|x| x.num_joints() != model.num_joints()) {
        return Err(Error::DimensionMismatch(format!(
            "input has {} joints, dictionary {}",
            x.num_joints(),
            model.num_joints()
        )));
    }
    par_map(pool, inputs, |x| model.solve(x, cfg))
}

/// Per-pose errors of a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scores {
    pub per_joint: Vec<f64>,
    pub estimation: Vec<f64>,
}

impl Scores {
    pub fn len(&self) -> usize {
        self.estimation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimation.is_empty()
    }

    pub fn mean_per_joint(&self) -> f64 {
        mean(&self.per_joint)
    }

    pub fn mean_estimation(&self) -> f64 {
        mean(&self.estimation)
    }

    pub fn select(&self, indices: &[usize]) -> Scores {
        Scores {
            per_joint: indices.iter().map(|&i| self.per_joint[i]).collect(),
            estimation: indices.iter().map(|&i| self.estimation[i]).collect(),
        }
    }
}

/// Scores `estimates[i]` against `truths[i]`. Both are taken as centered,
/// so the per-joint error needs no further alignment.
pub fn score_batch(pool: &ThreadPool, estimates: &[Pose3D], truths: &[&Pose3D]) -> Result<Scores> {
    if estimates.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if estimates.len() != truths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} ground-truth poses",
            estimates.len(),
            truths.len()
        )));
    }
    let pairs: Vec<(&Pose3D, &Pose3D)> = estimates.iter().zip(truths.iter().copied()).collect();
    let both = par_map(pool, &pairs, |(est, gt)| Ok((per_joint_error(est, gt)?, estimation_error(est, gt)?)))?;
    let (per_joint, estimation) = both.into_iter().unzip();
    Ok(Scores { per_joint, estimation })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Thresholds `step, 2·step, …` up to `max`.
pub fn cdf_thresholds(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (1..=n).map(|i| i as f64 * step).collect()
}

/// Percentage of `errors` strictly below each threshold.
pub fn cdf_percentages(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| 100.0 * errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64)
        .collect()
}
