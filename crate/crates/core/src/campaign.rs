//! Campaign configuration files, trajectory CSV export/import, and the
//! propagate / optimize / gradcheck workflows behind the command line.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::adjoint::{compare_gradients, ControlProblem, GradientCheck, Metrics, ObjectiveValue};
use crate::controller::{amplitudes, Checkpoint, NetConfig, Theta};
use crate::error::{Error, Result};
use crate::herm::{CMatrix, HermMatrix};
use crate::molsys::{bundled, load_system, orthogonalize, MolSystemRaw};
use crate::optimizer::{multistart, select_best, OptConfig, RunRecord};
use crate::parallel::Execution;
use crate::propagator::{InvariantReport, Trajectory};

/// Environment variable naming a directory searched for system files.
pub const DATA_DIR_ENV: &str = "TDHFC_DATA_DIR";

/// Initial or target density: diagonal occupations or a matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensitySpec {
    Diagonal(Vec<f64>),
    File(PathBuf),
}

/// Explicit density file: row-major real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub n: usize,
    pub re: Vec<f64>,
    #[serde(default)]
    pub im: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub system_file: PathBuf,
    pub p0: DensitySpec,
    pub pt: DensitySpec,
    pub dt: f64,
    #[serde(alias = "K")]
    pub n_steps: usize,
    pub rho: f64,
    #[serde(default)]
    pub rescale: bool,
    pub net: NetConfig,
    #[serde(default)]
    pub opt: OptConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A parsed configuration plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub base_dir: PathBuf,
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

impl Campaign {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Campaign { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Finds the system file: `$TDHFC_DATA_DIR/<file name>`, then the path
    /// relative to the config, then the copies compiled into the crate.
    pub fn system(&self) -> Result<MolSystemRaw> {
        let file = &self.config.system_file;
        let file_name = file.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            let candidate = Path::new(&dir).join(file_name);
            if candidate.exists() {
                return load_system(candidate);
            }
        }
        let local = self.resolve(file);
        if local.exists() {
            return load_system(local);
        }
        if bundled::contents(file_name).is_some() {
            return bundled::load(file_name);
        }
        Err(Error::Config(format!(
            "system file {} not found (also looked in ${DATA_DIR_ENV} and the bundled set)",
            file.display()
        )))
    }

    fn density(&self, spec: &DensitySpec, n: usize) -> Result<HermMatrix> {
        let p = match spec {
            DensitySpec::Diagonal(d) => {
                if d.len() != n {
                    return Err(Error::Config(format!(
                        "occupation list has {} entries, system has {n} orbitals",
                        d.len()
                    )));
                }
                HermMatrix::from_diagonal(d)
            }
            DensitySpec::File(f) => {
                let path = self.resolve(f);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let m: MatrixFile = serde_json::from_str(&text).map_err(|e| parse_err(&path, e))?;
                let im = if m.im.is_empty() { vec![0.0; m.re.len()] } else { m.im };
                if m.n != n || m.re.len() != n * n || im.len() != n * n {
                    return Err(Error::Config(format!(
                        "{}: expected a {n}x{n} matrix",
                        path.display()
                    )));
                }
                let raw = CMatrix::from_fn(n, n, |i, j| Complex64::new(m.re[i * n + j], im[i * n + j]));
                let herm = HermMatrix::new(raw.clone());
                if (&raw - herm.as_matrix()).norm() > 1e-10 {
                    return Err(Error::Config(format!("{}: matrix is not Hermitian", path.display())));
                }
                herm
            }
        };
        Ok(p)
    }

    pub fn problem(&self) -> Result<ControlProblem> {
        let sys = orthogonalize(self.system()?)?;
        let n = sys.n_basis();
        let p0 = self.density(&self.config.p0, n)?;
        let pt = self.density(&self.config.pt, n)?;
        let c = &self.config;
        ControlProblem::new(sys, c.net.clone(), p0, pt, c.dt, c.n_steps, c.rho, c.rescale)
    }

    pub fn out_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        match override_dir {
            Some(d) => d.to_path_buf(),
            None => self.resolve(&self.config.out_dir),
        }
    }
}

const AXES: [&str; 3] = ["x", "y", "z"];

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    parse_err(path, e)
}

/// Header of `traj.csv`: `k, t`, then `re_p_q_r, im_p_q_r` for every entry
/// in row-major order, then one `a_<axis>` column per active dipole.
pub fn traj_header(n: usize, axes: &[usize]) -> Vec<String> {
    let mut h = vec!["k".to_string(), "t".to_string()];
    for q in 0..n {
        for r in 0..n {
            h.push(format!("re_p_{q}_{r}"));
            h.push(format!("im_p_{q}_{r}"));
        }
    }
    h.extend(axes.iter().map(|&a| format!("a_{}", AXES[a])));
    h
}

/// Writes every state of `traj`. The final row's amplitudes are the
/// feedback law evaluated at `P^K`.
pub fn write_traj_csv(
    path: &Path,
    problem: &ControlProblem,
    theta: &Theta,
    traj: &Trajectory,
) -> Result<()> {
    let n = problem.sys.n_basis();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(traj_header(n, problem.sys.active_axes()))
        .map_err(|e| csv_err(path, e))?;
    let last_amps = amplitudes(&problem.basis, &problem.net, theta, traj.final_state())?;
    for (k, p) in traj.states.iter().enumerate() {
        let mut row = vec![k.to_string(), fmt(k as f64 * traj.dt)];
        for z in p.transpose().iter() {
            row.push(fmt(z.re));
            row.push(fmt(z.im));
        }
        let a = traj.amplitudes.get(k).unwrap_or(&last_amps);
        row.extend(a.iter().map(|&x| fmt(x)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `k, t, a_<axis>...` for the applied steps `k = 0 .. K-1`.
pub fn write_control_csv(path: &Path, problem: &ControlProblem, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend(problem.sys.active_axes().iter().map(|&a| format!("a_{}", AXES[a])));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (k, a) in traj.amplitudes.iter().enumerate() {
        let mut row = vec![k.to_string(), fmt(k as f64 * traj.dt)];
        row.extend(a.iter().map(|&x| fmt(x)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Contents of a `traj.csv` file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajTable {
    pub k: Vec<usize>,
    pub t: Vec<f64>,
    pub states: Vec<CMatrix>,
    pub amplitudes: Vec<Vec<f64>>,
}

pub fn read_traj_csv(path: &Path) -> Result<TrajTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n_entries = header.iter().filter(|h| h.starts_with("re_p_")).count();
    let n = (n_entries as f64).sqrt().round() as usize;
    if n * n != n_entries || n == 0 {
        return Err(parse_err(path, "density columns do not form a square matrix"));
    }
    let n_amp = header.len() - 2 - 2 * n_entries;
    let mut table = TrajTable {
        k: vec![],
        t: vec![],
        states: vec![],
        amplitudes: vec![],
    };
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| parse_err(path, e))
        };
        table.k.push(rec[0].parse().map_err(|e| parse_err(path, e))?);
        table.t.push(num(1)?);
        let mut m = CMatrix::zeros(n, n);
        for idx in 0..n_entries {
            m[(idx / n, idx % n)] = Complex64::new(num(2 + 2 * idx)?, num(3 + 2 * idx)?);
        }
        table.states.push(m);
        let first = 2 + 2 * n_entries;
        table
            .amplitudes
            .push((first..first + n_amp).map(num).collect::<Result<_>>()?);
    }
    Ok(table)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagateSummary {
    pub system: String,
    pub n_steps: usize,
    pub dt: f64,
    pub terminal_mae: f64,
    pub fidelity: f64,
    pub alpha: f64,
    pub objective: ObjectiveValue,
    pub invariants: InvariantReport,
}

/// Propagates with `theta` (zero field when `None`) and writes `traj.csv`
/// and `summary.json` into `out_dir`.
pub fn run_propagate(
    campaign: &Campaign,
    theta: Option<Theta>,
    out_dir: &Path,
) -> Result<PropagateSummary> {
    let problem = campaign.problem()?;
    let theta = theta.unwrap_or_else(|| Theta(vec![0.0; problem.n_params()]));
    let traj = problem.propagate(&theta)?;
    let Metrics {
        alpha,
        terminal_mae,
        fidelity,
    } = problem.metrics(&traj)?;
    let summary = PropagateSummary {
        system: problem.sys.name().to_string(),
        n_steps: problem.n_steps,
        dt: problem.dt,
        terminal_mae,
        fidelity,
        alpha,
        objective: problem.objective(&traj)?,
        invariants: traj.report,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_traj_csv(&out_dir.join("traj.csv"), &problem, &theta, &traj)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeReport {
    pub n_runs: usize,
    pub n_converged: usize,
    pub best_index: usize,
    pub best_seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub iters: usize,
    pub grad_norm_initial: f64,
    pub grad_norm_final: f64,
    pub fidelity: f64,
}

/// Multi-start optimization. Writes `ledger.json` as runs finish; on
/// success also `best_theta.json`, `traj.csv`, `control.csv` and
/// `report.json`.
pub fn run_optimize(
    campaign: &Campaign,
    seed0: Option<u64>,
    exec: Execution,
    out_dir: &Path,
) -> Result<(OptimizeReport, Vec<RunRecord>)> {
    let problem = campaign.problem()?;
    let mut opt = campaign.config.opt.clone();
    if let Some(s) = seed0 {
        opt.seed0 = s;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ledger = out_dir.join("ledger.json");
    let records = multistart(&problem, &opt, exec, Some(&ledger))?;
    let best = select_best(&records)?;
    let winner = &records[best];
    info!("selected seed {} (beta {:.3e})", winner.seed, winner.beta);

    let traj = problem.propagate(&winner.theta_final)?;
    Checkpoint::new(&problem.net, &winner.theta_final).save(out_dir.join("best_theta.json"))?;
    write_traj_csv(&out_dir.join("traj.csv"), &problem, &winner.theta_final, &traj)?;
    write_control_csv(&out_dir.join("control.csv"), &problem, &traj)?;
    let report = OptimizeReport {
        n_runs: records.len(),
        n_converged: records.iter().filter(|r| r.converged).count(),
        best_index: best,
        best_seed: winner.seed,
        alpha: winner.alpha,
        beta: winner.beta,
        iters: winner.iters,
        grad_norm_initial: winner.grad_norm_initial,
        grad_norm_final: winner.grad_norm_final,
        fidelity: problem.metrics(&traj)?.fidelity,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok((report, records))
}

/// Loads a checkpoint and checks it matches the campaign's network.
pub fn load_theta(path: &Path, net: &NetConfig) -> Result<Theta> {
    let (cfg, theta) = Checkpoint::load(path)?.into_parts()?;
    if &cfg != net {
        return Err(Error::Config(format!(
            "{}: checkpoint network {:?} differs from the campaign network {:?}",
            path.display(),
            cfg.layer_sizes,
            net.layer_sizes
        )));
    }
    Ok(theta)
}

/// Adjoint gradient versus central differences with step `fd_step` at the
/// Glorot initialization for `seed`.
pub fn run_gradcheck(
    campaign: &Campaign,
    seed: u64,
    n_steps: Option<usize>,
    fd_step: f64,
    corrupt_zeta_sign: bool,
    exec: Execution,
) -> Result<GradientCheck> {
    let mut problem = campaign.problem()?;
    if let Some(k) = n_steps {
        if k == 0 {
            return Err(Error::Config("step count must be at least 1".into()));
        }
        problem.n_steps = k;
    }
    if corrupt_zeta_sign {
        problem.zeta_sign = -1.0;
    }
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(Error::Config(format!("invalid finite-difference step {fd_step}")));
    }
    let theta = problem.net.glorot_init(seed);
    let analytic = problem.evaluate(&theta, exec)?.gradient;
    let fd = problem.finite_difference_gradient(&theta, fd_step, exec)?;
    Ok(compare_gradients(&analytic, &fd))
}
