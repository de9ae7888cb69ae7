//! Trust-region quasi-Newton minimization with limited-memory SR1 curvature,
//! multi-start over Glorot seeds, and selection of the best converged run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use log::{debug, info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adjoint::ControlProblem;
use crate::controller::Theta;
use crate::error::{Error, Result};
use crate::parallel::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    TrustRegionSr1,
    /// Steepest descent with step halving. Meant for debugging.
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub max_iters: usize,
    /// Number of stored SR1 pairs.
    pub memory: usize,
    pub tr_radius0: f64,
    pub tr_max: f64,
    pub eta_accept: f64,
    pub shrink: f64,
    pub expand: f64,
    pub mae_tol: f64,
    /// Also stop (as converged) once the gradient norm falls below this.
    /// Off for control problems.
    pub grad_tol: Option<f64>,
    pub n_restarts: usize,
    pub seed0: u64,
    pub method: Method,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            max_iters: 100,
            memory: 10,
            tr_radius0: 1.0,
            tr_max: 100.0,
            eta_accept: 1e-4,
            shrink: 0.25,
            expand: 2.0,
            mae_tol: 1e-2,
            grad_tol: None,
            n_restarts: 1,
            seed0: 0,
            method: Method::TrustRegionSr1,
        }
    }
}

/// Smallest trust radius before the run gives up.
const MIN_RADIUS: f64 = 1e-12;
/// Relative threshold of the SR1 skip rule.
const SR1_SKIP: f64 = 1e-8;

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tr_radius0", self.tr_radius0),
            ("tr_max", self.tr_max),
            ("eta_accept", self.eta_accept),
            ("shrink", self.shrink),
            ("expand", self.expand),
            ("mae_tol", self.mae_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.shrink >= 1.0 || self.expand <= 1.0 {
            return Err(Error::Config("need shrink < 1 < expand".into()));
        }
        if self.tr_radius0 > self.tr_max {
            return Err(Error::Config("tr_radius0 exceeds tr_max".into()));
        }
        if self.memory == 0 || self.n_restarts == 0 {
            return Err(Error::Config("memory and n_restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Objective value and gradient at one point, plus the problem's own
/// progress measures.
#[derive(Debug, Clone)]
pub struct Sample {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Terminal error used for the convergence test, if the problem has one.
    pub mae: Option<f64>,
    pub alpha: Option<f64>,
}

pub trait Objective {
    fn sample(&self, x: &[f64]) -> Result<Sample>;
}

impl<F: Fn(&[f64]) -> Result<Sample>> Objective for F {
    fn sample(&self, x: &[f64]) -> Result<Sample> {
        self(x)
    }
}

impl Objective for ControlProblem {
    fn sample(&self, x: &[f64]) -> Result<Sample> {
        let eval = self.evaluate(&Theta(x.to_vec()), Execution::Sequential)?;
        Ok(Sample {
            value: eval.objective.total,
            gradient: eval.gradient,
            mae: Some(eval.metrics.terminal_mae),
            alpha: Some(eval.metrics.alpha),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    GradientTolerance,
    MaxIters,
    RadiusCollapsed,
    NumericFailure,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub last: Sample,
    pub iters: usize,
    pub stop: StopReason,
    pub grad_norm_initial: f64,
    /// Objective at the start and after every accepted step.
    pub accepted_values: Vec<f64>,
}

impl Outcome {
    pub fn converged(&self) -> bool {
        matches!(self.stop, StopReason::Converged | StopReason::GradientTolerance)
    }
}

/// Limited-memory SR1 approximation `B = γI + sum_j u_j u_jᵀ / (u_j·s_j)`.
#[derive(Debug, Clone)]
pub struct Lsr1 {
    memory: usize,
    gamma: f64,
    pairs: Vec<(DVector<f64>, DVector<f64>)>,
    terms: Vec<(DVector<f64>, f64)>,
}

impl Lsr1 {
    pub fn new(memory: usize) -> Self {
        Lsr1 {
            memory,
            gamma: 1.0,
            pairs: Vec::new(),
            terms: Vec::new(),
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.terms.len()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v * self.gamma;
        for (u, d) in &self.terms {
            out.axpy(u.dot(v) / d, u, 1.0);
        }
        out
    }

    /// Offers a new pair; returns whether it was kept.
    pub fn update(&mut self, s: DVector<f64>, y: DVector<f64>) -> bool {
        let r = &y - self.apply(&s);
        let denom = s.dot(&r);
        if denom.abs() <= SR1_SKIP * s.norm() * r.norm() || !denom.is_finite() {
            return false;
        }
        let sy = s.dot(&y);
        if sy.abs() > 0.0 {
            self.gamma = (y.norm_squared() / sy.abs()).clamp(1e-8, 1e8);
        }
        self.pairs.push((s, y));
        if self.pairs.len() > self.memory {
            self.pairs.remove(0);
        }
        self.rebuild();
        true
    }

    /// Recomputes the rank-one terms from the stored pairs in order.
    fn rebuild(&mut self) {
        self.terms.clear();
        for (s, y) in &self.pairs {
            let r = y - self.apply(s);
            let denom = s.dot(&r);
            if denom.abs() >= SR1_SKIP * s.norm() * r.norm() && denom != 0.0 {
                self.terms.push((r, denom));
            }
        }
    }

    /// Dense matrix of the current approximation.
    pub fn dense(&self, n: usize) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            m.set_column(j, &self.apply(&e));
        }
        m
    }
}

/// Positive root `τ` of `||z + τ d|| = radius`.
fn to_boundary(z: &DVector<f64>, d: &DVector<f64>, radius: f64) -> f64 {
    let a = d.norm_squared();
    let b = 2.0 * z.dot(d);
    let c = z.norm_squared() - radius * radius;
    (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
}

/// Approximate minimizer of `gᵀp + ½ pᵀBp` over `||p|| <= radius` by
/// truncated conjugate gradients.
pub fn steihaug(b: &Lsr1, g: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = g.len();
    let gnorm = g.norm();
    let tol = gnorm * gnorm.sqrt().min(0.5);
    let mut z = DVector::zeros(n);
    let mut r = g.clone();
    let mut d = -g;
    if gnorm == 0.0 {
        return z;
    }
    for _ in 0..2 * n.max(1) {
        let bd = b.apply(&d);
        let dbd = d.dot(&bd);
        if dbd <= 0.0 {
            let tau = to_boundary(&z, &d, radius);
            return z + d * tau;
        }
        let rr = r.dot(&r);
        let alpha = rr / dbd;
        let next = &z + &d * alpha;
        if next.norm() >= radius {
            let tau = to_boundary(&z, &d, radius);
            return z + d * tau;
        }
        z = next;
        r.axpy(alpha, &bd, 1.0);
        if r.norm() < tol {
            return z;
        }
        let beta = r.dot(&r) / rr;
        d = -&r + d * beta;
    }
    z
}

fn is_numeric(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteObjective | Error::InvariantBreach { .. } | Error::Eigen(_)
    )
}

/// Minimizes `f` from `x0`. Errors at `x0` are returned; numeric failures at
/// trial points end the run with [`StopReason::NumericFailure`].
pub fn minimize(f: &impl Objective, x0: &[f64], cfg: &OptConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut x = DVector::from_column_slice(x0);
    let mut cur = f.sample(x0)?;
    if !cur.value.is_finite() || cur.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    let mut g = DVector::from_vec(cur.gradient.clone());
    let grad_norm_initial = g.norm();
    let mut accepted_values = vec![cur.value];
    let mut model = Lsr1::new(cfg.memory);
    let mut radius = cfg.tr_radius0;

    let stop_check = |s: &Sample, gn: f64| -> Option<StopReason> {
        if s.mae.is_some_and(|m| m < cfg.mae_tol) {
            Some(StopReason::Converged)
        } else if cfg.grad_tol.is_some_and(|t| gn < t) {
            Some(StopReason::GradientTolerance)
        } else {
            None
        }
    };

    let mut iters = 0;
    let mut stop = stop_check(&cur, g.norm());
    while stop.is_none() {
        if iters >= cfg.max_iters {
            stop = Some(StopReason::MaxIters);
            break;
        }
        if radius < MIN_RADIUS {
            stop = Some(StopReason::RadiusCollapsed);
            break;
        }
        iters += 1;

        let p = match cfg.method {
            Method::TrustRegionSr1 => steihaug(&model, &g, radius),
            Method::GradientDescent => &g * (-radius / g.norm().max(f64::MIN_POSITIVE)),
        };
        let predicted = match cfg.method {
            Method::TrustRegionSr1 => -(g.dot(&p) + 0.5 * p.dot(&model.apply(&p))),
            Method::GradientDescent => -g.dot(&p),
        };
        let trial_x = &x + &p;
        let trial = match f.sample(trial_x.as_slice()) {
            Ok(s) if s.value.is_finite() && s.gradient.iter().all(|v| v.is_finite()) => s,
            Ok(_) => {
                warn!("non-finite objective at iteration {iters}");
                stop = Some(StopReason::NumericFailure);
                break;
            }
            Err(e) if is_numeric(&e) => {
                warn!("numeric failure at iteration {iters}: {e}");
                stop = Some(StopReason::NumericFailure);
                break;
            }
            Err(e) => return Err(e),
        };
        let actual = cur.value - trial.value;
        let ratio = if predicted > 0.0 {
            actual / predicted
        } else {
            f64::NEG_INFINITY
        };
        let g_new = DVector::from_vec(trial.gradient.clone());

        if cfg.method == Method::TrustRegionSr1 {
            model.update(p.clone(), &g_new - &g);
        }

        let accept = match cfg.method {
            Method::TrustRegionSr1 => ratio >= cfg.eta_accept && actual > 0.0,
            Method::GradientDescent => actual >= cfg.eta_accept * predicted && actual > 0.0,
        };
        match cfg.method {
            Method::TrustRegionSr1 => {
                if ratio < 0.25 {
                    radius *= cfg.shrink;
                } else if ratio > 0.75 && p.norm() >= 0.99 * radius {
                    radius = (radius * cfg.expand).min(cfg.tr_max);
                }
            }
            Method::GradientDescent => {
                radius = if accept {
                    (radius * cfg.expand).min(cfg.tr_max)
                } else {
                    radius * 0.5
                };
            }
        }
        debug!(
            "iter {iters}: f = {:.6e}, trial = {:.6e}, ratio = {ratio:.3}, radius = {radius:.3e}, accepted = {accept}",
            cur.value, trial.value
        );
        if accept {
            x = trial_x;
            cur = trial;
            g = g_new;
            accepted_values.push(cur.value);
            stop = stop_check(&cur, g.norm());
        }
    }

    let stop = stop.expect("loop exits with a reason");
    Ok(Outcome {
        x: x.as_slice().to_vec(),
        grad_norm_initial,
        last: cur,
        iters,
        stop,
        accepted_values,
    })
}

/// Result of one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub theta_final: Theta,
    /// Mean squared control cost.
    pub alpha: f64,
    /// Terminal mean absolute error.
    pub beta: f64,
    pub iters: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub objective: f64,
    pub grad_norm_initial: f64,
    pub grad_norm_final: f64,
    /// Objective at the start and after each accepted step.
    pub objective_history: Vec<f64>,
}

/// One restart of `problem` from the Glorot initialization for `seed`.
pub fn run_seed(problem: &ControlProblem, cfg: &OptConfig, seed: u64) -> Result<RunRecord> {
    let theta0 = problem.net.glorot_init(seed);
    let out = minimize(problem, &theta0, cfg)?;
    let gn = out.last.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    let record = RunRecord {
        seed,
        alpha: out.last.alpha.unwrap_or(f64::NAN),
        beta: out.last.mae.unwrap_or(f64::NAN),
        iters: out.iters,
        converged: out.converged(),
        stop_reason: out.stop,
        objective: out.last.value,
        grad_norm_initial: out.grad_norm_initial,
        grad_norm_final: gn,
        objective_history: out.accepted_values,
        theta_final: Theta(out.x),
    };
    info!(
        "seed {seed}: {:?} after {} iterations, beta = {:.4e}, alpha = {:.4e}",
        record.stop_reason, record.iters, record.beta, record.alpha
    );
    Ok(record)
}

pub fn read_ledger(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_ledger(path: &Path, records: &BTreeMap<u64, RunRecord>) -> Result<()> {
    let list: Vec<&RunRecord> = records.values().collect();
    let text = serde_json::to_string_pretty(&list).expect("records serialize");
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs seeds `seed0 .. seed0 + n_restarts` and returns their records in
/// seed order. With a ledger path, records are written after every finished
/// run and seeds already in the ledger are not rerun.
pub fn multistart(
    problem: &ControlProblem,
    cfg: &OptConfig,
    exec: Execution,
    ledger: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.n_restarts as u64).map(|i| cfg.seed0 + i).collect();
    let mut done = BTreeMap::new();
    if let Some(path) = ledger.filter(|p| p.exists()) {
        for r in read_ledger(path)? {
            done.insert(r.seed, r);
        }
        info!("resuming: {} runs already in {}", done.len(), path.display());
    }
    let todo: Vec<u64> = seeds.iter().copied().filter(|s| !done.contains_key(s)).collect();
    let done = Mutex::new(done);

    let results = exec.map(&todo, |&seed| -> Result<()> {
        let record = run_seed(problem, cfg, seed)?;
        let mut all = done.lock().expect("ledger lock");
        all.insert(seed, record);
        if let Some(path) = ledger {
            write_ledger(path, &all)?;
        }
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let all = done.into_inner().expect("ledger lock");
    Ok(seeds.iter().filter_map(|s| all.get(s).cloned()).collect())
}

/// Index (into `records`) of the converged run minimizing
/// `α̃² + β̃²` after min-max scaling over the converged runs.
pub fn select_best(records: &[RunRecord]) -> Result<usize> {
    let pool: Vec<usize> = (0..records.len()).filter(|&i| records[i].converged).collect();
    if pool.is_empty() {
        return Err(Error::NoConvergedRuns);
    }
    let scale = |get: fn(&RunRecord) -> f64| {
        let vals: Vec<f64> = pool.iter().map(|&i| get(&records[i])).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vals.into_iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let a = scale(|r| r.alpha);
    let b = scale(|r| r.beta);
    let best = (0..pool.len())
        .min_by(|&i, &j| {
            let si = a[i] * a[i] + b[i] * b[i];
            let sj = a[j] * a[j] + b[j] * b[j];
            let (ri, rj) = (&records[pool[i]], &records[pool[j]]);
            si.total_cmp(&sj)
                .then(ri.beta.total_cmp(&rj.beta))
                .then(ri.seed.cmp(&rj.seed))
        })
        .expect("pool is not empty");
    Ok(pool[best])
}
