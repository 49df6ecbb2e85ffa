//! The `gen`, `learn`, `lift`, `eval` and `bench` commands.
//!
//! Every command reads its inputs from and writes its outputs to
//! `config.out_dir`, and returns the lines it reports to the user.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;

use rayon::ThreadPool;

use sdm_core::io::{
    format_number, read_dictionary, read_poses, write_dictionary, write_poses, write_results, Labeled, LearnSummary,
    Table,
};
use sdm_core::dictlearn::learn_dictionaries;
use sdm_core::metrics::joint_breakdown;
use sdm_core::solver::{SolverConfig, Termination};
use sdm_core::synth::JOINT_NAMES;
use sdm_core::{Error, Pose2D, Pose3D, Result};

use crate::config::{Config, Method};
use crate::pipeline::{
    self, cdf_percentages, cdf_thresholds, generate_dataset, learn_both, project_views, score_batch, solve_batch,
    view_source, Learned, Model, Scores,
};

pub const TRAIN_FILE: &str = "train_3d.txt";
pub const TEST_FILE: &str = "test_3d.txt";
pub const DICTIONARY_FILE: &str = "dictionary.json";
pub const BASELINE_DICTIONARY_FILE: &str = "dictionary_sr.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const BREAKDOWN_FILE: &str = "breakdown.csv";
pub const BENCH_ALPHA_FILE: &str = "bench_alpha.csv";
pub const BENCH_BETA_FILE: &str = "bench_beta.csv";
pub const BENCH_NOISE_FILE: &str = "bench_noise.csv";
pub const BENCH_COMPARE_FILE: &str = "bench_compare.csv";
pub const BENCH_CDF_FILE: &str = "bench_cdf.csv";

/// Name of the 2D test set at noise level `sigma`, without extension.
pub fn views_dataset(sigma: f64) -> String {
    format!("test_2d_s{}", format_number(sigma))
}

pub fn views_file(sigma: f64) -> String {
    format!("{}.txt", views_dataset(sigma))
}

pub fn estimates_file(method: Method, sigma: f64) -> String {
    format!("estimates_{method}_s{}.txt", format_number(sigma))
}

pub fn lift_report_file(method: Method, sigma: f64) -> String {
    format!("lift_{method}_s{}.csv", format_number(sigma))
}

fn out_path(cfg: &Config, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn ensure_out_dir(cfg: &Config) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|source| Error::Io {
        path: cfg.out_dir.clone(),
        source,
    })
}

fn poses<T: Clone>(records: &[Labeled<T>]) -> Vec<T> {
    records.iter().map(|r| r.pose.clone()).collect()
}

/// Writes the train set, the test set and one 2D view file per noise level.
pub fn cmd_gen(cfg: &Config) -> Result<Vec<String>> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let data = generate_dataset(cfg)?;
    write_poses(out_path(cfg, TRAIN_FILE), &data.train)?;
    write_poses(out_path(cfg, TEST_FILE), &data.test)?;
    let mut report = vec![
        format!("train 3D poses: {}", data.train.len()),
        format!("test 3D poses: {}", data.test.len()),
    ];
    for &sigma in &cfg.data.noise {
        let views = project_views(&data.test, cfg.data.views, sigma, cfg.seed)?;
        let name = views_file(sigma);
        write_poses(out_path(cfg, &name), &views)?;
        report.push(format!("test 2D poses (sigma {}): {} -> {name}", format_number(sigma), views.len()));
    }
    Ok(report)
}

/// Learns the two-dictionary model and the single-dictionary baseline from
/// the train file.
pub fn cmd_learn(cfg: &Config) -> Result<Vec<String>> {
    cfg.validate()?;
    let train = read_poses::<Pose3D>(out_path(cfg, TRAIN_FILE))?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    ensure_out_dir(cfg)?;
    let train = poses(&train);
    let mut report = Vec::new();
    for (method, config, name) in [
        (Method::Sdm, cfg.learn_config(), DICTIONARY_FILE),
        (Method::Sr, cfg.baseline_learn_config(), BASELINE_DICTIONARY_FILE),
    ] {
        let run = learn_dictionaries(&train, &config)?;
        let s = LearnSummary {
            iterations: run.iterations,
            final_loss: run.loss_history.last().copied().unwrap_or(f64::NAN),
            config,
        };
        write_dictionary(out_path(cfg, name), &run.dict_u, &run.dict_v, Some(&s))?;
        report.push(format!(
            "{method}: k={} iterations={} final_loss={} -> {name}",
            run.dict_u.size(),
            s.iterations,
            format_number(s.final_loss)
        ));
        report.extend(run.warnings.iter().map(|w| format!("{method}: warning: {w}")));
    }
    Ok(report)
}

fn load_learned(cfg: &Config) -> Result<Learned> {
    let sdm = read_dictionary(out_path(cfg, DICTIONARY_FILE))?;
    let baseline = read_dictionary(out_path(cfg, BASELINE_DICTIONARY_FILE))?;
    Ok(Learned {
        dict_u: sdm.dict_u,
        dict_v: sdm.dict_v,
        baseline: baseline.dict_u,
    })
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::Converged => "converged",
        Termination::MaxIter => "max_iter",
    }
}

/// Lifts every 2D file with every configured method.
pub fn cmd_lift(cfg: &Config, pool: &ThreadPool) -> Result<Vec<String>> {
    cfg.validate()?;
    let learned = load_learned(cfg)?;
    let solver = cfg.solver_config();
    let mut report = Vec::new();
    for &sigma in &cfg.data.noise {
        let inputs = read_poses::<Pose2D>(out_path(cfg, &views_file(sigma)))?;
        for &method in &cfg.solve.methods {
            let solves = solve_batch(pool, Model::from_learned(method, &learned), &poses(&inputs), &solver)?;
            let estimates: Vec<Labeled<Pose3D>> = inputs
                .iter()
                .zip(&solves)
                .map(|(x, r)| Labeled::new(x.id.clone(), r.pose.clone()))
                .collect();
            write_poses(out_path(cfg, &estimates_file(method, sigma)), &estimates)?;

            let mut table = Table::new(["id", "termination", "stalled", "iterations", "residual", "objective"]);
            for (x, r) in inputs.iter().zip(&solves) {
                table.push(vec![
                    x.id.clone(),
                    termination_name(r.termination).into(),
                    r.stalled.to_string(),
                    r.iterations.to_string(),
                    format_number(r.final_residual()),
                    format_number(r.final_objective()),
                ])?;
            }
            write_results(out_path(cfg, &lift_report_file(method, sigma)), &table)?;
            let converged = solves.iter().filter(|r| r.termination == Termination::Converged).count();
            report.push(format!(
                "{method} sigma {}: {} poses lifted, {converged} converged -> {}",
                format_number(sigma),
                solves.len(),
                estimates_file(method, sigma)
            ));
        }
    }
    Ok(report)
}

/// Categories in order of first appearance, each with its member indices.
fn group_by_category(ids: &[&str]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let c = pipeline::category(id);
        match groups.iter_mut().find(|(name, _)| name == c) {
            Some((_, members)) => members.push(i),
            None => groups.push((c.to_string(), vec![i])),
        }
    }
    groups
}

/// Scores every estimate file against the test set.
pub fn cmd_eval(cfg: &Config, pool: &ThreadPool) -> Result<Vec<String>> {
    cfg.validate()?;
    let test = read_poses::<Pose3D>(out_path(cfg, TEST_FILE))?;
    let truth: HashMap<&str, &Pose3D> = test.iter().map(|r| (r.id.as_str(), &r.pose)).collect();
    let mut results = Table::new(["method", "dataset", "category", "metric", "value", "count"]);
    let mut breakdown = Table::new(["method", "dataset", "joint", "name", "error"]);
    let mut report = Vec::new();
    for &sigma in &cfg.data.noise {
        for &method in &cfg.solve.methods {
            let estimates = read_poses::<Pose3D>(out_path(cfg, &estimates_file(method, sigma)))?;
            let mut ids = Vec::with_capacity(estimates.len());
            let mut truths = Vec::with_capacity(estimates.len());
            for e in &estimates {
                let source = view_source(&e.id);
                let gt = truth.get(source).ok_or_else(|| {
                    Error::SchemaMismatch(format!("estimate '{}' has no ground-truth pose '{source}'", e.id))
                })?;
                ids.push(source);
                truths.push(*gt);
            }
            let scores = score_batch(pool, &poses(&estimates), &truths)?;
            let mut groups = group_by_category(&ids);
            groups.push(("all".into(), (0..ids.len()).collect()));
            for (name, members) in &groups {
                let s = scores.select(members);
                for (metric, value) in [("per_joint_error", s.mean_per_joint()), ("estimation_error", s.mean_estimation())] {
                    results.push(vec![
                        method.to_string(),
                        views_dataset(sigma),
                        name.clone(),
                        metric.into(),
                        format_number(value),
                        s.len().to_string(),
                    ])?;
                }
            }
            report.push(format!(
                "{method} sigma {}: per_joint_error={:.3} estimation_error={:.3} over {} poses",
                format_number(sigma),
                scores.mean_per_joint(),
                scores.mean_estimation(),
                scores.len()
            ));
            if cfg.eval.breakdown {
                let pairs: Vec<(Pose3D, Pose3D)> =
                    estimates.iter().zip(&truths).map(|(e, gt)| (e.pose.clone(), (*gt).clone())).collect();
                for (j, error) in joint_breakdown(&pairs)?.into_iter().enumerate() {
                    let name = JOINT_NAMES.get(j).copied().unwrap_or("");
                    breakdown.push(vec![
                        method.to_string(),
                        views_dataset(sigma),
                        j.to_string(),
                        name.into(),
                        format_number(error),
                    ])?;
                }
            }
        }
    }
    write_results(out_path(cfg, RESULTS_FILE), &results)?;
    report.push(format!("results -> {RESULTS_FILE}"));
    if cfg.eval.breakdown {
        write_results(out_path(cfg, BREAKDOWN_FILE), &breakdown)?;
        report.push(format!("joint breakdown -> {BREAKDOWN_FILE}"));
    }
    Ok(report)
}

type RunKey = (Method, u64, u64, u64);

/// Solves and scores bench runs, remembering each `(method, α, β, σ)`.
struct Bench<'a> {
    cfg: &'a Config,
    pool: &'a ThreadPool,
    learned: Learned,
    test: Vec<Labeled<Pose3D>>,
    views: BTreeMap<u64, (Vec<Pose2D>, Vec<usize>)>,
    runs: BTreeMap<RunKey, Scores>,
}

impl Bench<'_> {
    fn scores(&mut self, method: Method, alpha: f64, beta: f64, sigma: f64) -> Result<&Scores> {
        let key = (method, alpha.to_bits(), beta.to_bits(), sigma.to_bits());
        if !self.runs.contains_key(&key) {
            if !self.views.contains_key(&sigma.to_bits()) {
                let views = project_views(&self.test, self.cfg.data.views, sigma, self.cfg.seed)?;
                let index: HashMap<&str, usize> =
                    self.test.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
                let sources = views.iter().map(|v| index[view_source(&v.id)]).collect();
                self.views.insert(sigma.to_bits(), (poses(&views), sources));
            }
            let (inputs, sources) = &self.views[&sigma.to_bits()];
            let solver = SolverConfig {
                alpha,
                beta,
                ..self.cfg.solver_config()
            };
            let solves = solve_batch(self.pool, Model::from_learned(method, &self.learned), inputs, &solver)?;
            let estimates: Vec<Pose3D> = solves.into_iter().map(|r| r.pose).collect();
            let truths: Vec<&Pose3D> = sources.iter().map(|&i| &self.test[i].pose).collect();
            let scores = score_batch(self.pool, &estimates, &truths)?;
            self.runs.insert(key, scores);
        }
        Ok(&self.runs[&key])
    }
}

fn score_row(lead: Vec<String>, s: &Scores) -> Vec<String> {
    let mut row = lead;
    row.push(format_number(s.mean_per_joint()));
    row.push(format_number(s.mean_estimation()));
    row.push(s.len().to_string());
    row
}

/// Generates data and dictionaries in memory, then writes the parameter
/// sweeps, noise curves, method comparison and error CDF.
pub fn cmd_bench(cfg: &Config, pool: &ThreadPool) -> Result<Vec<String>> {
    cfg.validate()?;
    cfg.validate_bench()?;
    ensure_out_dir(cfg)?;
    let data = generate_dataset(cfg)?;
    let learned = learn_both(&poses(&data.train), &cfg.learn_config(), &cfg.baseline_learn_config())?;
    let b = &cfg.bench;
    let (alpha, beta) = (cfg.solve.alpha, cfg.solve.beta);
    let mut bench = Bench {
        cfg,
        pool,
        learned,
        test: data.test,
        views: BTreeMap::new(),
        runs: BTreeMap::new(),
    };
    let mut report = Vec::new();
    let metrics = ["mean_per_joint_error", "mean_estimation_error", "count"];

    let mut table = Table::new(["alpha", "beta", "sigma"].into_iter().chain(metrics));
    for &a in &b.alpha_grid {
        let s = bench.scores(Method::Sdm, a, beta, b.sigma)?;
        table.push(score_row(vec![format_number(a), format_number(beta), format_number(b.sigma)], s))?;
    }
    write_results(out_path(cfg, BENCH_ALPHA_FILE), &table)?;
    report.push(format!("alpha sweep ({} points) -> {BENCH_ALPHA_FILE}", b.alpha_grid.len()));

    let mut table = Table::new(["alpha", "beta", "sigma"].into_iter().chain(metrics));
    for &bt in &b.beta_grid {
        let s = bench.scores(Method::Sdm, alpha, bt, b.sigma)?;
        table.push(score_row(vec![format_number(alpha), format_number(bt), format_number(b.sigma)], s))?;
    }
    write_results(out_path(cfg, BENCH_BETA_FILE), &table)?;
    report.push(format!("beta sweep ({} points) -> {BENCH_BETA_FILE}", b.beta_grid.len()));

    let mut compare = Table::new(["method", "sigma"].into_iter().chain(metrics));
    let mut noise = Table::new(
        std::iter::once("sigma".to_string()).chain(b.methods.iter().map(|m| format!("{m}_estimation_error"))),
    );
    for &sigma in &b.noise {
        let mut curve = vec![format_number(sigma)];
        for &method in &b.methods {
            let s = bench.scores(method, alpha, beta, sigma)?;
            curve.push(format_number(s.mean_estimation()));
            compare.push(score_row(vec![method.to_string(), format_number(sigma)], s))?;
            report.push(format!(
                "{method} sigma {}: estimation_error={:.3}",
                format_number(sigma),
                s.mean_estimation()
            ));
        }
        noise.push(curve)?;
    }
    write_results(out_path(cfg, BENCH_COMPARE_FILE), &compare)?;
    write_results(out_path(cfg, BENCH_NOISE_FILE), &noise)?;
    report.push(format!("comparison -> {BENCH_COMPARE_FILE}, noise curves -> {BENCH_NOISE_FILE}"));

    let thresholds = cdf_thresholds(b.cdf_step, b.cdf_max);
    let mut columns = Vec::new();
    for &method in &b.methods {
        let s = bench.scores(method, alpha, beta, b.sigma)?;
        columns.push(cdf_percentages(&s.estimation, &thresholds));
    }
    let mut cdf = Table::new(std::iter::once("threshold".to_string()).chain(b.methods.iter().map(|m| m.to_string())));
    for (i, &t) in thresholds.iter().enumerate() {
        cdf.push(
            std::iter::once(format_number(t))
                .chain(columns.iter().map(|c| format_number(c[i])))
                .collect(),
        )?;
    }
    write_results(out_path(cfg, BENCH_CDF_FILE), &cdf)?;
    report.push(format!("error CDF ({} thresholds) -> {BENCH_CDF_FILE}", thresholds.len()));
    Ok(report)
}
