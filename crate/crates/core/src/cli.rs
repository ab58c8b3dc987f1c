//! Command-line front end: dataset generation, training runs, denoising,
//! gradient checks and the multi-condition experiments.
//!
//! Configs are flat `key=value` files (see [`crate::config`]). Every run
//! directory gets a `manifest.txt` holding the fully resolved config, which
//! can be fed back through `--config` to repeat the run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::baseline::{train_smoothed, SmoothedConfig};
use crate::config::KvConfig;
use crate::datagen::{self, gen_dataset, make_dtv, AmpMode, DataConfig, Dataset};
use crate::denoiser::{self, unrolled_grad_check, DenoiseConfig};
use crate::error::{Error, Result};
use crate::learner::{
    self, default_lambda_grid, match_columns, rescale_unit, sort_columns, worker_count, MatchReport, Projection,
    TrainConfig, TrainReport,
};
use crate::linalg::{Rng, Stream, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Files written into every training run directory.
pub const REPORT_FILES: [&str; 7] = [
    "train_loss.csv",
    "val_loss.csv",
    "references.csv",
    "D_hat.csv",
    "D_hat_sorted_rescaled.csv",
    "match_report.csv",
    "manifest.txt",
];

#[derive(Debug, Parser)]
#[command(name = "analysparse", version, about = "Learn analysis-sparsity dictionaries through an unrolled denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file (gen) or directory (everything else).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run independent conditions concurrently.
    #[arg(long, global = true)]
    pub parallel: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset file and its .cfg sidecar.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a dictionary with the unrolled dual FISTA denoiser.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Denoise one signal with a given dictionary.
    Denoise {
        #[command(flatten)]
        common: Common,
        /// Dictionary as a CSV matrix.
        #[arg(long)]
        dict: PathBuf,
        /// Signal as a one-column CSV.
        #[arg(long)]
        signal: PathBuf,
    },
    /// Compare unrolled gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        p: usize,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = GRADCHECK_TOL)]
        tol: f64,
    },
    /// Run a multi-condition experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// noise-sweep | ablation | baseline-compare | single-train
        #[arg(long)]
        kind: Option<String>,
    },
    /// Train the smoothed-l1 benchmark.
    BaselineTrain {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen { common } => cmd_gen(&common).map(|_| EXIT_OK),
        Command::Train { common } => {
            let out = require_out(&common)?;
            let cfg = load_run_config(&common)?;
            cmd_train(&cfg, &out).map(|_| EXIT_OK)
        }
        Command::BaselineTrain { common } => {
            let out = require_out(&common)?;
            let cfg = load_run_config(&common)?;
            cmd_baseline_train(&cfg, &out).map(|_| EXIT_OK)
        }
        Command::Denoise { common, dict, signal } => {
            let kv = match &common.config {
                Some(p) => KvConfig::load(p)?,
                None => KvConfig::default(),
            };
            check_keys(&kv)?;
            let eval = eval_config(&kv)?;
            eval.validate()?;
            let seed = common.seed.map_or_else(|| kv.get_or("train.seed", 0), Ok)?;
            let out = cmd_denoise(&dict, &signal, &eval, seed, common.out.as_deref())?;
            print!("{}", out.render());
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            common,
            p,
            m,
            iterations,
            seeds,
            tol,
        } => {
            let rows = cmd_gradcheck(p, m, iterations, common.seed.unwrap_or(0), seeds, tol)?;
            let table = render_gradcheck(&rows);
            print!("{table}");
            if let Some(out) = &common.out {
                create_dir(out)?;
                write_file(&out.join("gradcheck.csv"), &table)?;
            }
            Ok(if rows.iter().all(|r| r.pass) {
                EXIT_OK
            } else {
                EXIT_VALIDATION
            })
        }
        Command::Experiment { common, kind } => {
            let out = require_out(&common)?;
            let mut kv = match &common.config {
                Some(p) => KvConfig::load(p)?,
                None => {
                    return Err(Error::Config {
                        key: "--config".into(),
                        msg: "experiment needs a config file".into(),
                    })
                }
            };
            if let Some(k) = kind {
                kv.set("experiment.kind", k);
            }
            let exp = ExperimentConfig::from_kv(&kv, common.seed)?;
            let summary = cmd_experiment(&exp, &out, common.parallel)?;
            Ok(summary.exit_code())
        }
    }
}

fn require_out(common: &Common) -> Result<PathBuf> {
    common.out.clone().ok_or_else(|| Error::Config {
        key: "--out".into(),
        msg: "an output path is required".into(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Existing training set to use instead of generating one.
    pub data_file: Option<PathBuf>,
    pub val_l: usize,
    pub val_split: u64,
    pub val_file: Option<PathBuf>,
    pub train: TrainConfig,
    pub epsilon: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "data.p",
    "data.L",
    "data.n_jumps",
    "data.amp_mode",
    "data.sigma",
    "data.seed",
    "data.split",
    "data.file",
    "val.L",
    "val.split",
    "val.file",
    "train.m",
    "train.eta2",
    "train.max_itr2",
    "train.batch_sz",
    "train.projection",
    "train.init_std",
    "train.seed",
    "train.validation_every",
    "train.references",
    "train.lambda_grid",
    "train.threads",
    "denoise.eta1_safety",
    "denoise.tol",
    "denoise.max_itr1",
    "denoise.tape_budget",
    "eval.tol",
    "eval.max_itr1",
    "baseline.epsilon",
    "baseline.inner_tol",
    "baseline.inner_max_iter",
    "experiment.kind",
    "experiment.sigmas",
];

fn check_keys(kv: &KvConfig) -> Result<()> {
    for (k, _) in kv.iter() {
        let informational = k.starts_with("result.") || k.starts_with("manifest.");
        if !informational && !KNOWN_KEYS.contains(&k) {
            return Err(Error::Config {
                key: k.to_string(),
                msg: "unknown key".into(),
            });
        }
    }
    Ok(())
}

impl RunConfig {
    /// Reads a run config; `seed` overrides `data.seed` and `train.seed`.
    pub fn from_kv(kv: &KvConfig, seed: Option<u64>) -> Result<Self> {
        check_keys(kv)?;
        let data_file: Option<PathBuf> = kv.get("data.file")?;
        let data = match &data_file {
            Some(path) => {
                let mut d = datagen::load(path)?.config;
                d.seed = seed.unwrap_or(d.seed);
                d
            }
            None => DataConfig {
                p: kv.require("data.p")?,
                l: kv.require("data.L")?,
                n_jumps: kv.get_or("data.n_jumps", 4)?,
                amp_mode: kv.get_or("data.amp_mode", AmpMode::Fixed)?,
                sigma: kv.require("data.sigma")?,
                seed: seed.map_or_else(|| kv.get_or("data.seed", 0), Ok)?,
                split: kv.get_or("data.split", 0)?,
            },
        };
        let train_seed = seed.map_or_else(|| kv.get_or("train.seed", data.seed), Ok)?;
        let training = DenoiseConfig {
            eta1_safety: kv.get_or("denoise.eta1_safety", 0.95)?,
            tol: kv.get_or("denoise.tol", 1e-4)?,
            max_itr1: kv.get_or("denoise.max_itr1", 1000)?,
            tape_budget: kv.get("denoise.tape_budget")?,
            ..DenoiseConfig::training()
        };
        let eval = eval_config(kv)?;
        let train = TrainConfig {
            m: kv.get_or("train.m", data.p)?,
            eta2: kv.get_or("train.eta2", 1.0)?,
            max_itr2: kv.get_or("train.max_itr2", 100)?,
            batch_sz: kv.get_or("train.batch_sz", 64)?,
            projection: kv.get_or("train.projection", Projection::CenterColumns)?,
            denoise_cfg: training,
            eval_cfg: eval,
            init_std: kv.get_or("train.init_std", 1e-2)?,
            seed: train_seed,
            validation_every: kv.get_or("train.validation_every", 0)?,
            references: kv.get_or("train.references", true)?,
            lambda_grid: kv.get_list("train.lambda_grid")?.unwrap_or_else(default_lambda_grid),
            threads: kv.get("train.threads")?,
        };
        let cfg = RunConfig {
            data,
            data_file,
            val_l: kv.get_or("val.L", 256)?,
            val_split: kv.get_or("val.split", 1)?,
            val_file: kv.get("val.file")?,
            train,
            epsilon: kv.get_or("baseline.epsilon", 1e-3)?,
            inner_tol: kv.get_or("baseline.inner_tol", 1e-6)?,
            inner_max_iter: kv.get_or("baseline.inner_max_iter", 5000)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.smoothed().validate()
    }

    pub fn smoothed(&self) -> SmoothedConfig {
        SmoothedConfig {
            epsilon: self.epsilon,
            inner_tol: self.inner_tol,
            inner_max_iter: self.inner_max_iter,
            train: self.train.clone(),
        }
    }

    /// The resolved config; parsing it back gives an equal `RunConfig`.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        let d = &self.data;
        match &self.data_file {
            Some(f) => kv.set("data.file", f.display()),
            None => {
                kv.set("data.p", d.p);
                kv.set("data.L", d.l);
                kv.set("data.n_jumps", d.n_jumps);
                kv.set("data.amp_mode", d.amp_mode);
                kv.set("data.sigma", d.sigma);
                kv.set("data.seed", d.seed);
                kv.set("data.split", d.split);
            }
        }
        match &self.val_file {
            Some(f) => kv.set("val.file", f.display()),
            None => {
                kv.set("val.L", self.val_l);
                kv.set("val.split", self.val_split);
            }
        }
        let t = &self.train;
        kv.set("train.m", t.m);
        kv.set("train.eta2", t.eta2);
        kv.set("train.max_itr2", t.max_itr2);
        kv.set("train.batch_sz", t.batch_sz);
        kv.set("train.projection", t.projection);
        kv.set("train.init_std", t.init_std);
        kv.set("train.seed", t.seed);
        kv.set("train.validation_every", t.validation_every);
        kv.set("train.references", t.references);
        kv.set(
            "train.lambda_grid",
            t.lambda_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        if let Some(n) = t.threads {
            kv.set("train.threads", n);
        }
        kv.set("denoise.eta1_safety", t.denoise_cfg.eta1_safety);
        kv.set("denoise.tol", t.denoise_cfg.tol);
        kv.set("denoise.max_itr1", t.denoise_cfg.max_itr1);
        if let Some(b) = t.denoise_cfg.tape_budget {
            kv.set("denoise.tape_budget", b);
        }
        kv.set("eval.tol", t.eval_cfg.tol);
        kv.set("eval.max_itr1", t.eval_cfg.max_itr1);
        kv.set("baseline.epsilon", self.epsilon);
        kv.set("baseline.inner_tol", self.inner_tol);
        kv.set("baseline.inner_max_iter", self.inner_max_iter);
        kv
    }

    /// Training and validation sets, loaded or generated.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = match &self.data_file {
            Some(f) => datagen::load(f)?,
            None => gen_dataset(&self.data)?,
        };
        let val = match &self.val_file {
            Some(f) => datagen::load(f)?,
            None => gen_dataset(&DataConfig {
                l: self.val_l,
                split: self.val_split,
                ..train.config.clone()
            })?,
        };
        Ok((train, val))
    }
}

/// Inner solver settings for validation, references and `denoise`.
fn eval_config(kv: &KvConfig) -> Result<DenoiseConfig> {
    Ok(DenoiseConfig {
        eta1_safety: kv.get_or("denoise.eta1_safety", 0.95)?,
        tol: kv.get_or("eval.tol", 1e-4)?,
        max_itr1: kv.get_or("eval.max_itr1", 10_000)?,
        ..DenoiseConfig::evaluation()
    })
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| Error::Config {
        key: "--config".into(),
        msg: "a config file is required".into(),
    })?;
    RunConfig::from_kv(&KvConfig::load(path)?, common.seed)
}

/// `gen`: writes the dataset described by `data.*` to `--out`.
pub fn cmd_gen(common: &Common) -> Result<Dataset> {
    let path = common.config.as_ref().ok_or_else(|| Error::Config {
        key: "--config".into(),
        msg: "a config file is required".into(),
    })?;
    let out = require_out(common)?;
    let kv = KvConfig::load(path)?;
    let cfg = DataConfig {
        p: kv.require("data.p")?,
        l: kv.require("data.L")?,
        n_jumps: kv.get_or("data.n_jumps", 4)?,
        amp_mode: kv.get_or("data.amp_mode", AmpMode::Fixed)?,
        sigma: kv.require("data.sigma")?,
        seed: common.seed.map_or_else(|| kv.get_or("data.seed", 0), Ok)?,
        split: kv.get_or("data.split", 0)?,
    };
    let ds = gen_dataset(&cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    datagen::save(&ds, &out)?;
    Ok(ds)
}

/// Renders a matrix as CSV with a `c0,c1,...` header.
pub fn matrix_csv(d: &Tensor) -> String {
    let mut s = (0..d.cols()).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in d.data().chunks(d.cols().max(1)) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Reads a numeric CSV matrix; a non-numeric first row is taken as header.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Config {
        key: path.display().to_string(),
        msg,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(bad(format!("line {}: {e}", i + 1))),
        }
    }
    let Some(cols) = rows.first().map(Vec::len) else {
        return Err(bad("no numeric rows".into()));
    };
    if rows.iter().any(|r| r.len() != cols) {
        return Err(bad("rows have different lengths".into()));
    }
    let n = rows.len();
    Tensor::new(n, cols, rows.into_iter().flatten().collect())
}

/// Writes the seven report files of a training run and returns the match
/// against `D_TV`.
pub fn write_report(dir: &Path, report: &TrainReport, manifest: &KvConfig, p: usize) -> Result<MatchReport> {
    create_dir(dir)?;
    let mut s = String::from("iteration,loss,inner_iterations,max_abs_column_sum\n");
    for (i, ((l, it), cs)) in report
        .train_loss
        .iter()
        .zip(&report.inner_iterations)
        .zip(&report.col_sum_max)
        .enumerate()
    {
        let _ = writeln!(s, "{},{l},{it},{cs}", i + 1);
    }
    write_file(&dir.join("train_loss.csv"), &s)?;

    let mut s = String::from("iteration,loss\n");
    for (i, l) in &report.val_loss {
        let _ = writeln!(s, "{i},{l}");
    }
    write_file(&dir.join("val_loss.csv"), &s)?;

    let mut s = String::from("dictionary,lambda,loss\n");
    if let Some(r) = &report.references {
        let _ = writeln!(s, "zero,0,{}", r.zero);
        let _ = writeln!(s, "lambda_star_dtv,{},{}", r.lambda_star, r.tv);
    }
    if let Some(l) = report.final_val_loss() {
        let _ = writeln!(s, "learned,,{l}");
    }
    write_file(&dir.join("references.csv"), &s)?;

    write_file(&dir.join("D_hat.csv"), &matrix_csv(&report.final_d))?;
    let display = if report.final_d.is_all_zero() {
        report.final_d.clone()
    } else {
        rescale_unit(&sort_columns(&report.final_d))?
    };
    write_file(&dir.join("D_hat_sorted_rescaled.csv"), &matrix_csv(&display))?;

    let matched = match_columns(&report.final_d, &make_dtv(p))?;
    let mut s = String::from("learned_column,dtv_column,abs_cosine\n");
    for ((a, b), c) in matched.assignment.iter().zip(&matched.cosines) {
        let _ = writeln!(s, "{a},{b},{c}");
    }
    write_file(&dir.join("match_report.csv"), &s)?;

    let mut m = manifest.clone();
    m.set("manifest.dtv", "circulant");
    m.set("manifest.version", env!("CARGO_PKG_VERSION"));
    m.set("result.projection", report.projection);
    m.set("result.iterations", report.train_loss.len());
    m.set("result.mean_abs_cosine", matched.mean_abs_cosine);
    if let Some(l) = report.final_val_loss() {
        m.set("result.final_val_loss", l);
    }
    m.set("result.wall_time_s", format!("{:.3}", report.wall_time));
    write_file(&dir.join("manifest.txt"), &m.render())?;
    Ok(matched)
}

/// Outcome of one training run written to disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: TrainReport,
    pub matched: MatchReport,
}

/// `train`: trains with the unrolled denoiser and writes a report to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let (train, val) = cfg.datasets()?;
    train_on(cfg, &train, &val, out)
}

fn train_on(cfg: &RunConfig, train: &Dataset, val: &Dataset, out: &Path) -> Result<RunOutcome> {
    let report = learner::train(train, val, &cfg.train)?;
    let mut manifest = cfg.to_kv();
    manifest.set("manifest.command", "train");
    let matched = write_report(out, &report, &manifest, train.p())?;
    Ok(RunOutcome { report, matched })
}

/// `baseline-train`: trains the smoothed-l1 benchmark.
pub fn cmd_baseline_train(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let (train, val) = cfg.datasets()?;
    baseline_on(cfg, &train, &val, out)
}

fn baseline_on(cfg: &RunConfig, train: &Dataset, val: &Dataset, out: &Path) -> Result<RunOutcome> {
    let report = train_smoothed(train, val, &cfg.smoothed())?;
    let mut manifest = cfg.to_kv();
    manifest.set("manifest.command", "baseline-train");
    manifest.set("train.projection", Projection::None);
    let matched = write_report(out, &report, &manifest, train.p())?;
    Ok(RunOutcome { report, matched })
}

/// Result of `denoise`.
#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub w_hat: Tensor,
    pub iterations: usize,
    pub converged: bool,
    pub primal: f64,
    pub dual: f64,
    pub duality_gap: f64,
    pub relative_gap: f64,
}

impl DenoiseOutput {
    pub fn render(&self) -> String {
        format!(
            "iterations={}\nconverged={}\nprimal_objective={}\ndual_value={}\nduality_gap={}\nrelative_gap={}\n",
            self.iterations, self.converged, self.primal, self.dual, self.duality_gap, self.relative_gap
        )
    }
}

/// `denoise`: solves for one signal; writes `w_hat.csv` and
/// `diagnostics.txt` into `out` when given.
pub fn cmd_denoise(dict: &Path, signal: &Path, cfg: &DenoiseConfig, seed: u64, out: Option<&Path>) -> Result<DenoiseOutput> {
    let d = read_matrix_csv(dict)?;
    let y = read_matrix_csv(signal)?;
    let y = if y.cols() == 1 { y } else { Tensor::vector(y.into_data()) };
    let r = denoiser::denoise(&d, &y, cfg, &mut Rng::new(seed, Stream::Eval))?;
    let res = DenoiseOutput {
        iterations: r.iterations,
        converged: r.converged,
        primal: r.primal_objective,
        dual: r.half_sq_norm_y - r.dual_objective,
        duality_gap: r.duality_gap(),
        relative_gap: r.relative_gap(),
        w_hat: r.w_hat,
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut s = String::from("w_hat\n");
        for v in res.w_hat.data() {
            let _ = writeln!(s, "{v}");
        }
        write_file(&dir.join("w_hat.csv"), &s)?;
        write_file(&dir.join("diagnostics.txt"), &res.render())?;
    }
    Ok(res)
}

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_H: f64 = 1e-6;
pub const GRADCHECK_BAND: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
}

/// `gradcheck`: one row per seed in `first_seed..first_seed + seeds`, passing
/// when the error is at most `tol`.
pub fn cmd_gradcheck(
    p: usize,
    m: usize,
    iterations: usize,
    first_seed: u64,
    seeds: u64,
    tol: f64,
) -> Result<Vec<GradcheckRow>> {
    if p == 0 || m == 0 || iterations == 0 {
        return Err(Error::InvalidConfig("p, m and iterations must be positive".into()));
    }
    (first_seed..first_seed + seeds)
        .map(|seed| {
            let r = unrolled_grad_check(p, m, iterations, seed, GRADCHECK_H, GRADCHECK_BAND)?;
            Ok(GradcheckRow {
                seed,
                max_rel_error: r.max_rel_error,
                checked: r.checked,
                skipped: r.skipped.len(),
                pass: r.max_rel_error <= tol,
            })
        })
        .collect()
}

pub fn render_gradcheck(rows: &[GradcheckRow]) -> String {
    let mut s = String::from("seed,max_rel_error,checked,skipped,status\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{},{},{}",
            r.seed,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    NoiseSweep,
    Ablation,
    BaselineCompare,
    SingleTrain,
}

impl std::str::FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "noise-sweep" => Ok(Self::NoiseSweep),
            "ablation" => Ok(Self::Ablation),
            "baseline-compare" => Ok(Self::BaselineCompare),
            "single-train" => Ok(Self::SingleTrain),
            other => Err(format!(
                "unknown experiment `{other}` (noise-sweep | ablation | baseline-compare | single-train)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub base: RunConfig,
    /// Noise levels of a noise sweep.
    pub sigmas: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvConfig, seed: Option<u64>) -> Result<Self> {
        Ok(ExperimentConfig {
            kind: kv.require("experiment.kind")?,
            base: RunConfig::from_kv(kv, seed)?,
            sigmas: kv.get_list("experiment.sigmas")?.unwrap_or_else(|| vec![0.05, 1.0, 4.0]),
        })
    }
}

/// One row of `summary.csv`.
#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub name: String,
    pub outcome: std::result::Result<RunOutcome, String>,
    pub exit: i32,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub conditions: Vec<ConditionResult>,
}

impl ExperimentSummary {
    /// 0 when every condition completed, else the code of the first failure.
    pub fn exit_code(&self) -> i32 {
        self.conditions.iter().map(|c| c.exit).find(|&c| c != EXIT_OK).unwrap_or(EXIT_OK)
    }

    pub fn render(&self) -> String {
        let mut s = String::from(
            "condition,status,mean_abs_cosine,final_train_loss,final_val_loss,zero_loss,tv_loss,lambda_star\n",
        );
        for c in &self.conditions {
            match &c.outcome {
                Ok(o) => {
                    let r = &o.report;
                    let (zero, tv, lambda) = r
                        .references
                        .as_ref()
                        .map_or((String::new(), String::new(), String::new()), |x| {
                            (x.zero.to_string(), x.tv.to_string(), x.lambda_star.to_string())
                        });
                    let _ = writeln!(
                        s,
                        "{},ok,{},{},{},{zero},{tv},{lambda}",
                        c.name,
                        o.matched.mean_abs_cosine,
                        r.train_loss.last().map_or(String::new(), f64::to_string),
                        r.final_val_loss().map_or(String::new(), |v| v.to_string()),
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{},failed: {},,,,,,", c.name, e.replace([',', '\n'], ";"));
                }
            }
        }
        s
    }
}

enum Arm {
    Learner(RunConfig),
    Baseline(RunConfig),
}

/// `experiment`: runs each condition into its own subdirectory of `out`
/// and writes `summary.csv`. Failed conditions are recorded and the others
/// kept.
pub fn cmd_experiment(exp: &ExperimentConfig, out: &Path, parallel: bool) -> Result<ExperimentSummary> {
    create_dir(out)?;
    let base = &exp.base;
    let mut shared: Option<(Dataset, Dataset)> = None;
    let arms: Vec<(String, Arm)> = match exp.kind {
        ExperimentKind::SingleTrain => vec![("run".into(), Arm::Learner(base.clone()))],
        ExperimentKind::NoiseSweep => exp
            .sigmas
            .iter()
            .map(|&sigma| {
                let mut c = base.clone();
                c.data.sigma = sigma;
                c.data_file = None;
                c.val_file = None;
                (format!("sigma_{sigma}"), Arm::Learner(c))
            })
            .collect(),
        ExperimentKind::Ablation | ExperimentKind::BaselineCompare => {
            // both arms read the same files
            let (train, val) = base.datasets()?;
            let data_dir = out.join("data");
            create_dir(&data_dir)?;
            let (tf, vf) = (data_dir.join("train.adsl"), data_dir.join("val.adsl"));
            datagen::save(&train, &tf)?;
            datagen::save(&val, &vf)?;
            let mut c = base.clone();
            c.data = train.config.clone();
            c.data_file = Some(tf);
            c.val_file = Some(vf);
            shared = Some((train, val));
            let projected = RunConfig {
                train: TrainConfig {
                    projection: Projection::CenterColumns,
                    ..c.train.clone()
                },
                ..c.clone()
            };
            if exp.kind == ExperimentKind::Ablation {
                let unprojected = RunConfig {
                    train: TrainConfig {
                        projection: Projection::None,
                        ..c.train.clone()
                    },
                    ..c
                };
                vec![
                    ("projected".into(), Arm::Learner(projected)),
                    ("unprojected".into(), Arm::Learner(unprojected)),
                ]
            } else {
                vec![
                    ("projected".into(), Arm::Learner(projected)),
                    ("smoothed".into(), Arm::Baseline(c)),
                ]
            }
        }
    };

    let workers = worker_count(None);
    let per_arm = if parallel { (workers / arms.len().max(1)).max(1) } else { workers };
    let run_arm = |(name, arm): &(String, Arm)| -> ConditionResult {
        let dir = out.join(name);
        let result = match arm {
            Arm::Learner(c) | Arm::Baseline(c) => {
                let mut c = c.clone();
                c.train.threads = Some(c.train.threads.unwrap_or(per_arm));
                let sets = match &shared {
                    Some((t, v)) => Ok((t.clone(), v.clone())),
                    None => c.datasets(),
                };
                sets.and_then(|(t, v)| match arm {
                    Arm::Learner(_) => train_on(&c, &t, &v, &dir),
                    Arm::Baseline(_) => baseline_on(&c, &t, &v, &dir),
                })
            }
        };
        match result {
            Ok(o) => ConditionResult {
                name: name.clone(),
                outcome: Ok(o),
                exit: EXIT_OK,
            },
            Err(e) => ConditionResult {
                name: name.clone(),
                exit: exit_code(&e),
                outcome: Err(e.to_string()),
            },
        }
    };
    let conditions: Vec<ConditionResult> = if parallel {
        rayon::ThreadPoolBuilder::new()
            .num_threads(arms.len().max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?
            .install(|| arms.par_iter().map(run_arm).collect())
    } else {
        arms.iter().map(run_arm).collect()
    };

    let summary = ExperimentSummary { conditions };
    write_file(&out.join("summary.csv"), &summary.render())?;
    if exp.kind == ExperimentKind::BaselineCompare {
        write_overlay(out, &summary)?;
    }
    Ok(summary)
}

/// Training and validation curves of all arms side by side.
fn write_overlay(out: &Path, summary: &ExperimentSummary) -> Result<()> {
    let done: Vec<(&str, &TrainReport)> = summary
        .conditions
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|o| (c.name.as_str(), &o.report)))
        .collect();
    let header: Vec<&str> = done.iter().map(|(n, _)| *n).collect();

    let mut s = format!("iteration,{}\n", header.join(","));
    let n = done.iter().map(|(_, r)| r.train_loss.len()).max().unwrap_or(0);
    for i in 0..n {
        let cells: Vec<String> = done
            .iter()
            .map(|(_, r)| r.train_loss.get(i).map_or(String::new(), f64::to_string))
            .collect();
        let _ = writeln!(s, "{},{}", i + 1, cells.join(","));
    }
    write_file(&out.join("train_loss_overlay.csv"), &s)?;

    let mut s = format!("iteration,{}\n", header.join(","));
    if let Some((_, first)) = done.first() {
        for (k, (it, _)) in first.val_loss.iter().enumerate() {
            let cells: Vec<String> = done
                .iter()
                .map(|(_, r)| r.val_loss.get(k).map_or(String::new(), |v| v.1.to_string()))
                .collect();
            let _ = writeln!(s, "{it},{}", cells.join(","));
        }
    }
    write_file(&out.join("val_loss_overlay.csv"), &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_roundtrips_through_manifest() {
        let kv = KvConfig::parse("data.p=8\ndata.L=16\ndata.sigma=0.5\ntrain.eta2=0.1\ntrain.max_itr2=3\n").unwrap();
        let cfg = RunConfig::from_kv(&kv, Some(9)).unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.m, 8);
        let back = RunConfig::from_kv(&cfg.to_kv(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_missing_keys_are_config_errors() {
        let kv = KvConfig::parse("data.p=8\ndata.L=16\ndata.sigma=0.5\ntrain.eta=0.1\n").unwrap();
        let err = RunConfig::from_kv(&kv, None).unwrap_err();
        assert!(err.to_string().contains("train.eta"));
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        let kv = KvConfig::parse("data.p=8\ndata.sigma=0.5\n").unwrap();
        assert!(RunConfig::from_kv(&kv, None).unwrap_err().to_string().contains("data.L"));
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Tensor::from_rows(&[&[1.0, -0.1], &[1e-300, 3.0f64.sqrt()]]).unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, matrix_csv(&d)).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), d);
    }

    #[test]
    fn exit_codes() {
        let div = Error::Divergence {
            iteration: 3,
            reason: "x".into(),
        };
        assert_eq!(exit_code(&div), EXIT_DIVERGENCE);
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), EXIT_CONFIG);
        assert_eq!(main_with(["analysparse", "no-such-command"]), EXIT_CONFIG);
        assert_eq!(main_with(["analysparse", "train"]), EXIT_CONFIG);
    }
}
