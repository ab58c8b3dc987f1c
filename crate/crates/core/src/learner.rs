//! Supervised dictionary learning: minibatch MSE through the unrolled
//! denoiser, projected gradient steps on `D`, reference losses and
//! dictionary comparison tools.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::datagen::{make_dtv, Dataset};
use crate::denoiser::{self, step_size, DenoiseConfig};
use crate::error::{Error, Result};
use crate::linalg::{gaussian, Rng, Stream, Tensor};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ANALYSPARSE_THREADS";

/// Admissible set for the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    /// Columns are recentred to sum to zero after every step.
    CenterColumns,
    None,
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::CenterColumns => "center-columns",
            Projection::None => "none",
        })
    }
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "center-columns" => Ok(Projection::CenterColumns),
            "none" => Ok(Projection::None),
            other => Err(format!("unknown projection `{other}` (center-columns | none)")),
        }
    }
}

/// `{2^k : k = -10..=4}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-10..=4).map(|k| 2f64.powi(k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub m: usize,
    /// Outer step size, applied to the gradient of the per-entry mean
    /// squared error `||w_hat - w||^2 / p` averaged over the batch.
    pub eta2: f64,
    pub max_itr2: usize,
    pub batch_sz: usize,
    pub projection: Projection,
    /// Inner solver used while training.
    pub denoise_cfg: DenoiseConfig,
    /// Inner solver used for validation and reference losses.
    pub eval_cfg: DenoiseConfig,
    pub init_std: f64,
    pub seed: u64,
    /// Validation loss is computed before the first step, every
    /// `validation_every` steps and after the last one. 0 disables the
    /// intermediate evaluations.
    pub validation_every: usize,
    /// Compute the `D = 0` and `lambda* D_TV` validation references.
    pub references: bool,
    pub lambda_grid: Vec<f64>,
    /// Worker threads; `None` uses every core, capped by `ANALYSPARSE_THREADS`.
    pub threads: Option<usize>,
}

impl TrainConfig {
    pub fn new(m: usize, max_itr2: usize, seed: u64) -> Self {
        TrainConfig {
            m,
            eta2: 1.0,
            max_itr2,
            batch_sz: 64,
            projection: Projection::CenterColumns,
            denoise_cfg: DenoiseConfig::training(),
            eval_cfg: DenoiseConfig::evaluation(),
            init_std: 1e-2,
            seed,
            validation_every: 0,
            references: true,
            lambda_grid: default_lambda_grid(),
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.eta2 >= 0.0) || !self.eta2.is_finite() {
            return bad(format!("eta2 must be >= 0, got {}", self.eta2));
        }
        if self.batch_sz == 0 {
            return bad("batch_sz must be at least 1".into());
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(self.init_std > 0.0) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return bad("lambda grid must be nonempty with positive entries".into());
        }
        if !self.denoise_cfg.record {
            return bad("training inner solver must have record = true".into());
        }
        self.denoise_cfg.validate()?;
        self.eval_cfg.validate()
    }
}

/// Validation losses of the two fixed dictionaries.
#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub zero: f64,
    pub lambda_star: f64,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-item training loss of each step's batch.
    pub train_loss: Vec<f64>,
    /// `(steps taken, mean per-item validation loss)`.
    pub val_loss: Vec<(usize, f64)>,
    pub references: Option<References>,
    pub final_d: Tensor,
    pub wall_time: f64,
    /// Largest absolute column sum of `D` after each step.
    pub col_sum_max: Vec<f64>,
    /// Mean inner iterations per item for each step.
    pub inner_iterations: Vec<f64>,
    pub projection: Projection,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.val_loss.last().map(|&(_, l)| l)
    }
}

/// Inner solver plugged into the outer loop.
pub trait InnerSolver: Sync {
    /// Quantity shared by all items of a batch, typically a step size.
    fn prepare(&self, d: &Tensor) -> Result<f64>;

    /// Records the solve and returns the var holding the estimate and the
    /// number of inner iterations.
    fn record(&self, tape: &mut Tape, d: Var, y: &Tensor, prepared: f64, rng: &mut Rng) -> Result<(Var, usize)>;

    /// Plain solve used for validation.
    fn estimate(&self, d: &Tensor, y: &Tensor, rng: &mut Rng) -> Result<Tensor>;

    fn tape_budget(&self) -> Option<usize> {
        None
    }
}

/// The dual FISTA denoiser, recorded with `train` and evaluated with `eval`.
#[derive(Debug, Clone)]
pub struct Fista {
    pub train: DenoiseConfig,
    pub eval: DenoiseConfig,
}

impl InnerSolver for Fista {
    fn prepare(&self, d: &Tensor) -> Result<f64> {
        step_size(d, &self.train)
    }

    fn record(&self, tape: &mut Tape, d: Var, y: &Tensor, eta: f64, rng: &mut Rng) -> Result<(Var, usize)> {
        let (w, stats) = denoiser::denoise_recorded_with_step(tape, d, y, eta, &self.train, rng)?;
        Ok((w, stats.iterations))
    }

    fn estimate(&self, d: &Tensor, y: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        Ok(denoiser::denoise(d, y, &self.eval, rng)?.w_hat)
    }

    fn tape_budget(&self) -> Option<usize> {
        self.train.tape_budget
    }
}

/// Subtracts each column's mean from it.
pub fn center_columns(d: &Tensor) -> Tensor {
    let (p, m) = d.shape();
    let means: Vec<f64> = d.column_sums().iter().map(|s| s / p as f64).collect();
    let mut out = d.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (v, mean) in row.iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    out
}

fn max_abs_col_sum(d: &Tensor) -> f64 {
    d.column_sums().iter().fold(0.0, |a, s| a.max(s.abs()))
}

/// Number of workers: `requested`, else all cores, capped by
/// `ANALYSPARSE_THREADS` when set.
pub fn worker_count(requested: Option<usize>) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
    let n = requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match cap {
        Some(c) if c >= 1 => n.min(c),
        _ => n,
    }
    .max(1)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(threads))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loss and gradient of one item, on its own tape.
fn item_grad<S: InnerSolver>(
    solver: &S,
    d: &Tensor,
    prepared: f64,
    w: &Tensor,
    y: &Tensor,
    rng: &mut Rng,
) -> Result<(f64, Tensor, usize)> {
    let mut tape = match solver.tape_budget() {
        Some(b) => Tape::with_budget(b),
        None => Tape::new(),
    };
    let dv = tape.input(d.clone(), true);
    let (w_hat, iters) = solver.record(&mut tape, dv, y, prepared, rng)?;
    let loss = tape.sqdist(w_hat, w)?;
    let value = tape.value(loss).data()[0];
    let grad = tape.backward(loss)?.wrt(dv);
    Ok((value, grad, iters))
}

/// Summed loss and gradient of a batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Tensor,
    pub inner_iterations: usize,
}

/// Batch MSE and its gradient with respect to `D`. Items run in parallel,
/// each with its own tape and the random stream `rngs[i]`; results are
/// reduced in item order, so the output does not depend on scheduling.
pub fn batch_mse_with<S: InnerSolver>(
    solver: &S,
    d: &Tensor,
    batch: &[(&Tensor, &Tensor)],
    rngs: Vec<Rng>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let prepared = solver.prepare(d)?;
    let parts: Vec<Result<(f64, Tensor, usize)>> = batch
        .par_iter()
        .zip(rngs.into_par_iter())
        .map(|((w, y), mut rng)| item_grad(solver, d, prepared, w, y, &mut rng))
        .collect();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(d.rows(), d.cols());
    let mut inner_iterations = 0;
    for part in parts {
        let (l, g, it) = part?;
        loss += l;
        grad.axpy(1.0, &g)?;
        inner_iterations += it;
    }
    Ok(BatchLoss {
        loss,
        grad,
        inner_iterations,
    })
}

/// [`batch_mse_with`] for the dual FISTA denoiser with `seed`-derived item
/// streams.
pub fn batch_mse(d: &Tensor, batch: &[(&Tensor, &Tensor)], cfg: &DenoiseConfig, seed: u64) -> Result<BatchLoss> {
    let solver = Fista {
        train: cfg.clone(),
        eval: DenoiseConfig::evaluation(),
    };
    let root = Rng::new(seed, Stream::Batch);
    let rngs = (0..batch.len() as u64).map(|i| root.derive(i)).collect();
    batch_mse_with(&solver, d, batch, rngs)
}

/// Records the whole batch on one tape and returns the summed loss var.
/// Item `i` draws from `root.derive(i)`, matching [`batch_mse`].
pub fn batch_mse_recorded(
    tape: &mut Tape,
    d: Var,
    batch: &[(&Tensor, &Tensor)],
    cfg: &DenoiseConfig,
    seed: u64,
) -> Result<Var> {
    let eta = step_size(tape.value(d), cfg)?;
    let root = Rng::new(seed, Stream::Batch);
    let mut total: Option<Var> = None;
    for (i, (w, y)) in batch.iter().enumerate() {
        let (w_hat, _) = denoiser::denoise_recorded_with_step(tape, d, y, eta, cfg, &mut root.derive(i as u64))?;
        let l = tape.sqdist(w_hat, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::InvalidConfig("empty batch".into()))
}

/// Mean per-item `||w_hat - w||^2` of `solver` over `set`. Item `i` uses
/// the stream `(seed, eval).derive(i)`.
pub fn mean_loss_with<S: InnerSolver>(solver: &S, d: &Tensor, set: &Dataset, seed: u64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let root = Rng::new(seed, Stream::Eval);
    let losses: Vec<Result<f64>> = set
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, (w, y))| {
            let w_hat = solver.estimate(d, y, &mut root.derive(i as u64))?;
            Ok(w_hat.sub(w)?.sq_norm())
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / set.len() as f64)
}

/// Mean per-item loss of the dual FISTA denoiser with dictionary `d`.
pub fn mean_loss(d: &Tensor, set: &Dataset, cfg: &DenoiseConfig, seed: u64) -> Result<f64> {
    let solver = Fista {
        train: DenoiseConfig::training(),
        eval: cfg.clone(),
    };
    mean_loss_with(&solver, d, set, seed)
}

/// Best `lambda` in `grid` for the dictionary `lambda * d_base`. Ties go to
/// the smaller `lambda`.
pub fn grid_search_lambda(
    set: &Dataset,
    d_base: &Tensor,
    grid: &[f64],
    cfg: &DenoiseConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidConfig("lambda grid must be nonempty with positive entries".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NAN, f64::INFINITY);
    for &lambda in &sorted {
        let loss = mean_loss(&d_base.scale(lambda), set, cfg, seed)?;
        if loss < best.1 {
            best = (lambda, loss);
        }
    }
    Ok(best)
}

/// Validation losses of `D = 0` and of the best multiple of `D_TV`.
pub fn reference_losses(val: &Dataset, grid: &[f64], cfg: &DenoiseConfig, seed: u64) -> Result<References> {
    let p = val.p();
    let zero = mean_loss(&Tensor::zeros(p, p), val, cfg, seed)?;
    let (lambda_star, tv) = grid_search_lambda(val, &make_dtv(p), grid, cfg, seed)?;
    Ok(References { zero, lambda_star, tv })
}

fn check_sets(train: &Dataset, val: &Dataset, batch_sz: usize) -> Result<()> {
    if train.len() < batch_sz {
        return Err(Error::InvalidConfig(format!(
            "training set has {} pairs, fewer than one batch of {batch_sz}",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    if val.p() != train.p() {
        return Err(Error::InvalidConfig(format!(
            "training and validation signal lengths differ ({} vs {})",
            train.p(),
            val.p()
        )));
    }
    Ok(())
}

/// Sequential batches over a shuffled order that is redrawn at each wrap.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, rng: Rng) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: 0,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> &[usize] {
        if self.pos + size > self.order.len() {
            rand::seq::SliceRandom::shuffle(self.order.as_mut_slice(), self.rng.core());
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + size];
        self.pos += size;
        s
    }
}

/// Outer loop shared by every inner solver: `D0 ~ N(0, init_std^2)`, then
/// `D <- P(D - eta2 / (batch_sz * p) * grad)` for `max_itr2` steps, where
/// `grad` is the gradient of the summed squared error of the batch and `P`
/// is the configured projection.
pub fn train_with<S: InnerSolver>(solver: &S, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_sets(train, val, cfg.batch_sz)?;
    with_pool(cfg.threads, || run_outer(solver, train, val, cfg))?
}

fn run_outer<S: InnerSolver>(solver: &S, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let p = train.p();
    let project = |d: Tensor| match cfg.projection {
        Projection::CenterColumns => center_columns(&d),
        Projection::None => d,
    };
    let mut d = project(gaussian(p, cfg.m, 0.0, cfg.init_std, &mut Rng::new(cfg.seed, Stream::Init)));

    let references = if cfg.references {
        Some(reference_losses(val, &cfg.lambda_grid, &cfg.eval_cfg, cfg.seed)?)
    } else {
        None
    };

    let item_root = Rng::new(cfg.seed, Stream::Batch);
    let mut batcher = Batcher::new(train.len(), item_root.derive(u64::MAX));
    let mut train_loss = Vec::with_capacity(cfg.max_itr2);
    let mut col_sum_max = Vec::with_capacity(cfg.max_itr2);
    let mut inner_iterations = Vec::with_capacity(cfg.max_itr2);
    let mut val_loss = vec![(0, mean_loss_with(solver, &d, val, cfg.seed)?)];
    let step = cfg.eta2 / (cfg.batch_sz * p) as f64;

    for t in 0..cfg.max_itr2 {
        let idx = batcher.next(cfg.batch_sz);
        let batch: Vec<(&Tensor, &Tensor)> = idx.iter().map(|&i| (&train.pairs[i].0, &train.pairs[i].1)).collect();
        let base = (t * cfg.batch_sz) as u64;
        let rngs = (0..cfg.batch_sz as u64).map(|j| item_root.derive(base + j)).collect();
        let out = batch_mse_with(solver, &d, &batch, rngs).map_err(|e| at_iteration(e, t + 1))?;
        if !out.loss.is_finite() || !out.grad.all_finite() {
            return Err(Error::Divergence {
                iteration: t + 1,
                reason: format!("non-finite batch loss {}", out.loss),
            });
        }
        d.axpy(-step, &out.grad)?;
        d = project(d);
        if !d.all_finite() {
            return Err(Error::Divergence {
                iteration: t + 1,
                reason: "dictionary has non-finite entries".into(),
            });
        }
        train_loss.push(out.loss / cfg.batch_sz as f64);
        col_sum_max.push(max_abs_col_sum(&d));
        inner_iterations.push(out.inner_iterations as f64 / cfg.batch_sz as f64);

        let done = t + 1;
        if done == cfg.max_itr2 || (cfg.validation_every > 0 && done % cfg.validation_every == 0) {
            val_loss.push((done, mean_loss_with(solver, &d, val, cfg.seed)?));
        }
    }

    Ok(TrainReport {
        train_loss,
        val_loss,
        references,
        final_d: d,
        wall_time: start.elapsed().as_secs_f64(),
        col_sum_max,
        inner_iterations,
        projection: cfg.projection,
    })
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::Divergence { reason, iteration: inner } => Error::Divergence {
            iteration,
            reason: format!("inner solve diverged at inner iteration {inner}: {reason}"),
        },
        other => other,
    }
}

/// Trains with the unrolled dual FISTA denoiser.
pub fn train(train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let solver = Fista {
        train: cfg.denoise_cfg.clone(),
        eval: cfg.eval_cfg.clone(),
    };
    train_with(&solver, train_set, val_set, cfg)
}

/// Reorders columns by the row of their largest-magnitude entry; ties go to
/// the column with the larger norm, then to the lexicographically smaller
/// column. Only a display convention.
pub fn sort_columns(d: &Tensor) -> Tensor {
    let (p, m) = d.shape();
    let key = |c: usize| {
        let col = d.column(c);
        let mut arg = 0;
        for r in 1..p {
            if col[r].abs() > col[arg].abs() {
                arg = r;
            }
        }
        (arg, col.iter().map(|v| v * v).sum::<f64>())
    };
    let keys: Vec<(usize, f64)> = (0..m).map(key).collect();
    let mut perm: Vec<usize> = (0..m).collect();
    let lex = |a: usize, b: usize| {
        (0..p)
            .map(|r| d.get(r, a).total_cmp(&d.get(r, b)))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    perm.sort_by(|&a, &b| {
        keys[a]
            .0
            .cmp(&keys[b].0)
            .then(keys[b].1.total_cmp(&keys[a].1))
            .then_with(|| lex(a, b))
    });
    d.permute_columns(&perm)
}

/// Divides by the largest absolute entry so entries land in `[-1, 1]`.
pub fn rescale_unit(d: &Tensor) -> Result<Tensor> {
    let m = d.max_abs();
    if m == 0.0 {
        return Err(Error::ZeroOperator);
    }
    Ok(d.map(|v| v / m))
}

/// Greedy column matching between a learned and a reference dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    /// `(learned column, reference column)`.
    pub assignment: Vec<(usize, usize)>,
    /// `|cos|` of each assigned pair.
    pub cosines: Vec<f64>,
    pub mean_abs_cosine: f64,
}

fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).abs().min(1.0)
}

/// Pairs columns greedily by descending `|cosine|`; each column is used at
/// most once and `min(m_hat, m_ref)` pairs are formed.
pub fn match_columns(d_hat: &Tensor, d_ref: &Tensor) -> Result<MatchReport> {
    if d_hat.rows() != d_ref.rows() {
        return Err(Error::dim(
            "match_columns",
            format!("{} rows", d_ref.rows()),
            format!("{} rows", d_hat.rows()),
        ));
    }
    let (mh, mr) = (d_hat.cols(), d_ref.cols());
    let hat: Vec<Vec<f64>> = (0..mh).map(|c| d_hat.column(c)).collect();
    let rf: Vec<Vec<f64>> = (0..mr).map(|c| d_ref.column(c)).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(mh * mr);
    for (i, a) in hat.iter().enumerate() {
        for (j, b) in rf.iter().enumerate() {
            pairs.push((abs_cosine(a, b), i, j));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let n = mh.min(mr);
    let (mut used_h, mut used_r) = (vec![false; mh], vec![false; mr]);
    let mut assignment = Vec::with_capacity(n);
    let mut cosines = Vec::with_capacity(n);
    for (c, i, j) in pairs {
        if assignment.len() == n {
            break;
        }
        if !used_h[i] && !used_r[j] {
            used_h[i] = true;
            used_r[j] = true;
            assignment.push((i, j));
            cosines.push(c);
        }
    }
    let mean_abs_cosine = if n == 0 { 0.0 } else { cosines.iter().sum::<f64>() / n as f64 };
    Ok(MatchReport {
        assignment,
        cosines,
        mean_abs_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::datagen::{gen_dataset, DataConfig};
    use crate::linalg::Rng;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        gaussian(rows, cols, 0.0, 1.0, &mut Rng::new(seed, Stream::Init))
    }

    fn pairs(ds: &Dataset) -> Vec<(&Tensor, &Tensor)> {
        ds.pairs.iter().map(|(w, y)| (w, y)).collect()
    }

    #[test]
    fn center_columns_cases() {
        let d = Tensor::from_columns(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(center_columns(&d).column(0), vec![-1.0, 0.0, 1.0]);
        let tv = make_dtv(7);
        assert_eq!(center_columns(&tv), tv);
        let r = random(9, 5, 1);
        let once = center_columns(&r);
        let twice = center_columns(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * r.max_abs());
        }
    }

    proptest! {
        #[test]
        fn centering_is_the_euclidean_projection(seed in 0u64..1000, p in 2usize..10, m in 1usize..8) {
            let d = random(p, m, seed);
            let c = center_columns(&d);
            let tol = 1e-12 * p as f64 * d.max_abs().max(1.0);
            for s in c.column_sums() {
                prop_assert!(s.abs() <= tol);
            }
            // the residual of each column is constant, i.e. orthogonal to the
            // zero-sum subspace
            let r = d.sub(&c).unwrap();
            for col in 0..m {
                let v = r.column(col);
                for x in &v {
                    prop_assert!((x - v[0]).abs() <= 1e-12 * d.max_abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_item_gradients() {
        let ds = gen_dataset(&DataConfig::new(8, 2, 1.0, 3)).unwrap();
        let cfg = DenoiseConfig {
            max_itr1: 30,
            fixed_iterations: true,
            ..DenoiseConfig::training()
        };
        let d = random(8, 8, 4).scale(0.3);
        let batch = pairs(&ds);
        let joint = batch_mse(&d, &batch, &cfg, 5).unwrap();

        let mut tape = Tape::new();
        let dv = tape.input(d.clone(), true);
        let loss = batch_mse_recorded(&mut tape, dv, &batch, &cfg, 5).unwrap();
        assert_eq!(tape.value(loss).data()[0], joint.loss);
        let single_tape = tape.backward(loss).unwrap().wrt(dv);

        let root = Rng::new(5, Stream::Batch);
        let mut sum = Tensor::zeros(8, 8);
        for (i, item) in batch.iter().enumerate() {
            let one = batch_mse_with(
                &Fista {
                    train: cfg.clone(),
                    eval: cfg.clone(),
                },
                &d,
                &[*item],
                vec![root.derive(i as u64)],
            )
            .unwrap();
            sum.axpy(1.0, &one.grad).unwrap();
        }
        for ((a, b), c) in joint.grad.data().iter().zip(sum.data()).zip(single_tape.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn batch_loss_matches_plain_denoise() {
        let ds = gen_dataset(&DataConfig::new(8, 3, 0.0, 3)).unwrap();
        let d = random(8, 8, 6).scale(1e-2);
        let cfg = DenoiseConfig::training();
        let out = batch_mse(&d, &pairs(&ds), &cfg, 9).unwrap();
        let root = Rng::new(9, Stream::Batch);
        let eta = step_size(&d, &cfg).unwrap();
        let plain: f64 = ds
            .pairs
            .iter()
            .enumerate()
            .map(|(i, (w, y))| {
                let r = denoiser::denoise_with_step(&d, y, eta, &cfg, &mut root.derive(i as u64)).unwrap();
                r.w_hat.sub(w).unwrap().sq_norm()
            })
            .sum();
        assert_eq!(out.loss, plain);
    }

    #[test]
    fn training_gradient_matches_finite_differences() {
        let ds = gen_dataset(&DataConfig::new(8, 2, 1.0, 13)).unwrap();
        let cfg = DenoiseConfig {
            max_itr1: 50,
            fixed_iterations: true,
            ..DenoiseConfig::training()
        };
        let batch = pairs(&ds);
        let d = random(8, 8, 21).scale(0.4);
        // the step size is taken on raw values and is not differentiated, so
        // the finite differences must see it frozen too
        let eta = step_size(&d, &cfg).unwrap();
        let frozen = grad_check(
            |tape, dv| {
                let root = Rng::new(2, Stream::Batch);
                let mut total = None;
                for (i, (w, y)) in batch.iter().enumerate() {
                    let (wh, _) =
                        denoiser::denoise_recorded_with_step(tape, dv, y, eta, &cfg, &mut root.derive(i as u64))?;
                    let l = tape.sqdist(wh, w)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                Ok(total.unwrap())
            },
            &d,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(frozen.max_rel_error <= 1e-4, "{}", frozen.max_rel_error);
    }

    #[test]
    fn zero_step_leaves_projected_init() {
        let train_set = gen_dataset(&DataConfig::new(8, 16, 1.0, 1)).unwrap();
        let val = gen_dataset(&DataConfig { split: 1, ..DataConfig::new(8, 4, 1.0, 1) }).unwrap();
        let cfg = TrainConfig {
            eta2: 0.0,
            batch_sz: 4,
            references: false,
            threads: Some(1),
            ..TrainConfig::new(8, 3, 7)
        };
        let report = train(&train_set, &val, &cfg).unwrap();
        let d0 = center_columns(&gaussian(8, 8, 0.0, 1e-2, &mut Rng::new(7, Stream::Init)));
        // re-centring an already centred matrix may move entries by one rounding
        for (a, b) in report.final_d.data().iter().zip(d0.data()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * d0.max_abs());
        }
        assert_eq!(report.train_loss.len(), 3);
        assert!(report.col_sum_max.iter().all(|&s| s <= 1e-10));
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let train_set = gen_dataset(&DataConfig::new(8, 24, 1.0, 2)).unwrap();
        let val = gen_dataset(&DataConfig { split: 1, ..DataConfig::new(8, 4, 1.0, 2) }).unwrap();
        let mut cfg = TrainConfig {
            batch_sz: 8,
            eta2: 1.0,
            references: false,
            validation_every: 2,
            threads: Some(1),
            ..TrainConfig::new(8, 5, 3)
        };
        let a = train(&train_set, &val, &cfg).unwrap();
        let b = train(&train_set, &val, &cfg).unwrap();
        cfg.threads = Some(3);
        let c = train(&train_set, &val, &cfg).unwrap();
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.train_loss, c.train_loss);
        assert_eq!(a.final_d, c.final_d);
        assert_eq!(a.val_loss.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
    }

    #[test]
    fn unprojected_training_keeps_raw_steps() {
        let train_set = gen_dataset(&DataConfig::new(8, 16, 1.0, 2)).unwrap();
        let val = gen_dataset(&DataConfig { split: 1, ..DataConfig::new(8, 4, 1.0, 2) }).unwrap();
        let cfg = TrainConfig {
            batch_sz: 8,
            projection: Projection::None,
            references: false,
            threads: Some(1),
            ..TrainConfig::new(8, 2, 3)
        };
        let report = train(&train_set, &val, &cfg).unwrap();
        assert!(report.col_sum_max.iter().all(|&s| s > 1e-6));
    }

    #[test]
    fn too_small_training_set_is_rejected() {
        let ds = gen_dataset(&DataConfig::new(8, 3, 1.0, 2)).unwrap();
        let cfg = TrainConfig::new(8, 2, 3);
        assert!(matches!(train(&ds, &ds, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn grid_search_cases() {
        let clean = gen_dataset(&DataConfig::new(8, 6, 0.0, 4)).unwrap();
        let cfg = DenoiseConfig::evaluation();
        let grid = default_lambda_grid();
        let (l, _) = grid_search_lambda(&clean, &make_dtv(8), &grid, &cfg, 1).unwrap();
        assert_eq!(l, grid[0]);
        let (l, _) = grid_search_lambda(&clean, &make_dtv(8), &[0.5], &cfg, 1).unwrap();
        assert_eq!(l, 0.5);

        let noisy = gen_dataset(&DataConfig::new(8, 6, 1.0, 4)).unwrap();
        let (l, loss) = grid_search_lambda(&noisy, &make_dtv(8), &grid, &cfg, 1).unwrap();
        for &g in &grid {
            let other = mean_loss(&make_dtv(8).scale(g), &noisy, &cfg, 1).unwrap();
            assert!(loss <= other, "lambda {l} loss {loss} beaten by {g}: {other}");
        }
    }

    #[test]
    fn grid_ties_prefer_smaller_lambda() {
        // D = 0 direction: every lambda gives the same loss
        let ds = gen_dataset(&DataConfig {
            n_jumps: 2,
            ..DataConfig::new(4, 3, 1.0, 4)
        })
        .unwrap();
        let cfg = DenoiseConfig::evaluation();
        let (l, _) = grid_search_lambda(&ds, &Tensor::zeros(4, 4), &[4.0, 1.0, 2.0], &cfg, 1).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn sort_and_rescale() {
        // dominant diagonal: column c peaks at row c
        let mut banded = make_dtv(6);
        for c in 0..6 {
            banded.set(c, c, -1.5);
        }
        let perm = [3, 0, 5, 1, 4, 2];
        assert_eq!(sort_columns(&banded.permute_columns(&perm)), banded);
        // exact ties still give an order independent of the input order
        let tv = make_dtv(6);
        assert_eq!(sort_columns(&tv.permute_columns(&perm)), sort_columns(&tv));
        let single = random(5, 1, 2);
        assert_eq!(sort_columns(&single), single);
        assert_eq!(sort_columns(&Tensor::zeros(3, 3)), Tensor::zeros(3, 3));

        assert_eq!(rescale_unit(&tv.scale(5.0)).unwrap(), tv);
        let neg = Tensor::vector(vec![-4.0, 2.0, 0.0]);
        assert_eq!(rescale_unit(&neg).unwrap().data(), &[-1.0, 0.5, 0.0]);
        let r = rescale_unit(&random(4, 4, 3)).unwrap();
        assert_eq!(rescale_unit(&r).unwrap(), r);
        assert!(matches!(rescale_unit(&Tensor::zeros(2, 2)), Err(Error::ZeroOperator)));
    }

    #[test]
    fn match_invariant_to_permutation_and_scaling() {
        let tv = make_dtv(10);
        let perm = [9, 2, 4, 0, 1, 3, 8, 7, 5, 6];
        let mut d = tv.permute_columns(&perm);
        for c in 0..10 {
            let s = if c % 2 == 0 { -2.5 } else { 0.3 };
            let col: Vec<f64> = d.column(c).iter().map(|v| v * s).collect();
            d.set_column(c, &col);
        }
        let r = match_columns(&d, &tv).unwrap();
        assert!((r.mean_abs_cosine - 1.0).abs() < 1e-12);
        let mut hat: Vec<usize> = r.assignment.iter().map(|a| a.0).collect();
        let mut refs: Vec<usize> = r.assignment.iter().map(|a| a.1).collect();
        hat.sort_unstable();
        refs.sort_unstable();
        assert_eq!(hat, (0..10).collect::<Vec<_>>());
        assert_eq!(refs, (0..10).collect::<Vec<_>>());

        assert_eq!(match_columns(&Tensor::zeros(10, 10), &tv).unwrap().mean_abs_cosine, 0.0);
    }

    #[test]
    fn random_dictionaries_match_tv_poorly() {
        let tv = make_dtv(32);
        let mut mean = 0.0;
        for seed in 0..100 {
            let r = match_columns(&random(32, 32, seed), &tv).unwrap();
            assert!(r.cosines.iter().all(|c| (0.0..=1.0).contains(c)));
            mean += r.mean_abs_cosine / 100.0;
            assert!(r.mean_abs_cosine < 0.5);
        }
        assert!(mean < 0.5);
    }

    #[test]
    fn objective_is_permutation_invariant() {
        let ds = gen_dataset(&DataConfig::new(8, 3, 1.0, 8)).unwrap();
        let cfg = DenoiseConfig {
            tol: 1e-10,
            max_itr1: 20_000,
            ..DenoiseConfig::training()
        };
        let d = random(8, 8, 8).scale(0.5);
        let perm = [7, 1, 0, 4, 2, 6, 3, 5];
        let a = batch_mse(&d, &pairs(&ds), &cfg, 1).unwrap();
        let b = batch_mse(&d.permute_columns(&perm), &pairs(&ds), &cfg, 1).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-5, "{} vs {}", a.loss, b.loss);
    }

    #[test]
    fn worker_count_respects_request() {
        assert!(worker_count(Some(2)) >= 1);
        assert!(worker_count(Some(1)) == 1);
    }
}
