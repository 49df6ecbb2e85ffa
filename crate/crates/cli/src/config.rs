//! Experiment configuration, read from a TOML file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use sdm_core::dictlearn::DictLearnConfig;
use sdm_core::solver::SolverConfig;
use sdm_core::synth::Archetype;
use sdm_core::{Error, Result};

/// Environment variable that overrides `out_dir` from the config file.
pub const OUT_DIR_ENV: &str = "SDM_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Single sparse dictionary.
    Sr,
    /// Sparse global structure plus dense deformation.
    Sdm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sr => "sr",
            Method::Sdm => "sdm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" => Ok(Method::Sr),
            "sdm" => Ok(Method::Sdm),
            other => Err(Error::Config(format!("unknown method '{other}' (expected sr or sdm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for batch solves; 0 uses every core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub learn: LearnSection,
    pub solve: SolveSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("sdm-out"),
            data: DataSection::default(),
            learn: LearnSection::default(),
            solve: SolveSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_families: Vec<String>,
    pub test_families: Vec<String>,
    /// Poses per family in the training set.
    pub train_count: usize,
    /// Poses per family in the test set.
    pub test_count: usize,
    /// Orbit views per test pose.
    pub views: usize,
    /// Noise levels (millimeters); one 2D test file per entry.
    pub noise: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        let all: Vec<String> = Archetype::ALL.iter().map(|a| a.name().to_string()).collect();
        Self {
            train_families: all.clone(),
            test_families: all,
            train_count: 60,
            test_count: 10,
            views: 4,
            noise: vec![0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnSection {
    pub k: usize,
    pub gamma: f64,
    pub eta: f64,
    pub steps: [f64; 4],
    pub tol: f64,
    pub window: usize,
    pub max_iter: usize,
    /// Weight on the deformation codes when learning the single-dictionary
    /// baseline. Large values pin those codes at zero.
    pub baseline_eta: f64,
}

impl Default for LearnSection {
    fn default() -> Self {
        let d = DictLearnConfig::default();
        Self {
            k: 64,
            gamma: d.gamma,
            eta: d.eta,
            steps: d.steps,
            tol: d.tol,
            window: d.window,
            max_iter: d.max_iter,
            baseline_eta: 1e9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub beta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub apg_iters: usize,
    pub apg_tol: f64,
    /// Fixed camera scale; leave unset to optimize it.
    pub camera_scale: Option<f64>,
    pub restarts: usize,
    pub stall_window: usize,
    pub stall_tol: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            methods: vec![Method::Sr, Method::Sdm],
            alpha: d.alpha,
            beta: d.beta,
            tol: d.tol,
            max_iter: d.max_iter,
            apg_iters: d.apg_iters,
            apg_tol: d.apg_tol,
            camera_scale: d.camera_scale,
            restarts: d.restarts,
            stall_window: d.stall_window,
            stall_tol: d.stall_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Also write the per-joint breakdown table.
    pub breakdown: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { breakdown: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Vec<Method>,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub noise: Vec<f64>,
    /// Noise level used for the parameter sweeps and the error CDF.
    pub sigma: f64,
    pub cdf_step: f64,
    pub cdf_max: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Sr, Method::Sdm],
            alpha_grid: vec![0.0, 0.1, 0.5, 1.0, 5.0],
            beta_grid: vec![0.0, 5.0, 10.0, 20.0],
            noise: vec![0.0, 2.0, 5.0, 10.0],
            sigma: 0.0,
            cdf_step: 10.0,
            cdf_max: 200.0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Config(format!("{}:{line}: {}", path.display(), e.message()))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn train_families(&self) -> Result<Vec<Archetype>> {
        parse_families("data.train_families", &self.data.train_families)
    }

    pub fn test_families(&self) -> Result<Vec<Archetype>> {
        parse_families("data.test_families", &self.data.test_families)
    }

    pub fn learn_config(&self) -> DictLearnConfig {
        let l = &self.learn;
        DictLearnConfig {
            gamma: l.gamma,
            eta: l.eta,
            k: l.k,
            steps: l.steps,
            tol: l.tol,
            window: l.window,
            max_iter: l.max_iter,
            seed: self.seed,
        }
    }

    /// Learning settings for the single-dictionary baseline.
    pub fn baseline_learn_config(&self) -> DictLearnConfig {
        DictLearnConfig {
            eta: self.learn.baseline_eta,
            ..self.learn_config()
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solve;
        SolverConfig {
            alpha: s.alpha,
            beta: s.beta,
            tol: s.tol,
            max_iter: s.max_iter,
            apg_iters: s.apg_iters,
            apg_tol: s.apg_tol,
            camera_scale: s.camera_scale,
            restarts: s.restarts,
            stall_window: s.stall_window,
            stall_tol: s.stall_tol,
        }
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        self.train_families()?;
        self.test_families()?;
        if self.data.views == 0 {
            return Err(Error::Config("data.views must be at least 1".into()));
        }
        check_sigmas("data.noise", &self.data.noise)?;
        self.learn_config().validate()?;
        self.baseline_learn_config().validate()?;
        self.solver_config().validate()?;
        Ok(())
    }

    pub fn validate_bench(&self) -> Result<()> {
        let b = &self.bench;
        if b.methods.is_empty() {
            return Err(Error::Config("bench.methods is empty".into()));
        }
        for (name, grid) in [("bench.alpha_grid", &b.alpha_grid), ("bench.beta_grid", &b.beta_grid)] {
            if grid.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{name} entries must be finite and >= 0")));
            }
        }
        check_sigmas("bench.noise", &b.noise)?;
        check_sigmas("bench.sigma", &[b.sigma])?;
        if !(b.cdf_step > 0.0 && b.cdf_max >= b.cdf_step && b.cdf_max.is_finite()) {
            return Err(Error::Config("bench.cdf_step must be positive and at most bench.cdf_max".into()));
        }
        Ok(())
    }
}

fn parse_families(key: &str, names: &[String]) -> Result<Vec<Archetype>> {
    if names.is_empty() {
        return Err(Error::Config(format!("{key} is empty")));
    }
    let mut out: Vec<Archetype> = Vec::new();
    for name in names {
        let a: Archetype = name.parse()?;
        if out.contains(&a) {
            return Err(Error::Config(format!("{key} lists '{name}' twice")));
        }
        out.push(a);
    }
    Ok(out)
}

fn check_sigmas(key: &str, sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::Config(format!("{key} is empty")));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("{key} entries must be finite and >= 0")));
    }
    let mut seen: Vec<u64> = sigmas.iter().map(|s| s.to_bits()).collect();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != sigmas.len() {
        return Err(Error::Config(format!("{key} has repeated entries")));
    }
    Ok(())
}
