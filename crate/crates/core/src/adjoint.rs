//! Discrete objective, backward adjoint sweep and the parameter gradient.
//!
//! The adjoint variables `λ^k` are total derivatives of the objective with
//! respect to `P^k` under the real inner product `Re <A, B>`. The sweep never
//! forms the 4-index coupling tensors: the exponential's Fréchet adjoint and
//! the factored `dV/dP` are applied directly, which keeps each step at
//! `O(N^3 + N^4)` work.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::controller::{vext_with_derivs, NetConfig, Theta, VextDerivs};
use crate::error::{Error, Result};
use crate::herm::{ip, CMatrix, HermBasis, HermMatrix, Tensor4, I};
use crate::matexp::{eigh, ExpKernel};
use crate::molsys::MolSystem;
use crate::parallel::Execution;
use crate::propagator::{ClosedLoop, Trajectory};

/// `tr(PK PT PK)`.
pub fn fidelity(pk: &HermMatrix, pt: &HermMatrix) -> f64 {
    (pk.as_matrix() * pt.as_matrix() * pk.as_matrix()).trace().re
}

/// Mean complex modulus of `PK - PT` over all `N^2` entries.
pub fn terminal_mae(pk: &HermMatrix, pt: &HermMatrix) -> f64 {
    let n = pk.dim();
    let total: f64 = pk
        .iter()
        .zip(pt.iter())
        .map(|(a, b)| (a - b).norm())
        .sum();
    total / (n * n) as f64
}

/// Gradient of `(ρ/2) F^2` with respect to `PK`, written as a sum over the
/// eigenvectors `v_j` of `PK PT PK`:
/// `ρ F sum_j (v_j v_j† PK PT + PT PK v_j v_j†)`.
pub fn fidelity_gradient(pk: &HermMatrix, pt: &HermMatrix, rho: f64) -> Result<CMatrix> {
    let f = fidelity(pk, pt);
    let n = pk.dim();
    if rho * f == 0.0 {
        return Ok(CMatrix::zeros(n, n));
    }
    let sandwich = HermMatrix::new(pk.as_matrix() * pt.as_matrix() * pk.as_matrix());
    let vecs = eigh(&sandwich)?.vectors;
    let proj = &vecs * vecs.adjoint();
    let kt = pk.as_matrix() * pt.as_matrix();
    let tk = pt.as_matrix() * pk.as_matrix();
    Ok((&proj * kt + tk * &proj) * Complex64::new(rho * f, 0.0))
}

/// Which density dependence of `H` enters the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Mean-field and feedback terms: the exact derivative of the discrete
    /// objective.
    #[default]
    Full,
    /// Only the feedback term. Drops the mean-field response, so gradients
    /// are approximate; kept for comparison.
    ExternalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub running_cost: f64,
    pub terminal_term: f64,
    pub rho: f64,
    pub rescaled: bool,
}

#[derive(Debug, Clone)]
pub struct AdjointSweep {
    /// `λ^1 ... λ^K`.
    pub lambda: Vec<CMatrix>,
    pub fidelity: f64,
    pub terminal_mae: f64,
}

/// Scalar diagnostics of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean squared control cost per step, divided by `N^2` when rescaling.
    pub alpha: f64,
    pub terminal_mae: f64,
    pub fidelity: f64,
}

/// Objective, gradient and diagnostics at one parameter vector.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: ObjectiveValue,
    pub gradient: Vec<f64>,
    pub metrics: Metrics,
}

/// Per-step quantities shared by the sweep and the parameter gradient.
struct StepData {
    vext: VextDerivs,
    kernel: ExpKernel,
}

/// A fully specified control problem, minus the parameters.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub sys: MolSystem,
    pub basis: HermBasis,
    pub net: NetConfig,
    pub p0: HermMatrix,
    pub target: HermMatrix,
    pub dt: f64,
    pub n_steps: usize,
    pub rho: f64,
    pub rescale: bool,
    pub coupling: Coupling,
    /// Multiplies the coupling terms of the backward sweep. Anything other
    /// than `1.0` gives a wrong gradient; used to check that the gradient
    /// check can fail.
    #[doc(hidden)]
    pub zeta_sign: f64,
}

impl ControlProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sys: MolSystem,
        net: NetConfig,
        p0: HermMatrix,
        target: HermMatrix,
        dt: f64,
        n_steps: usize,
        rho: f64,
        rescale: bool,
    ) -> Result<Self> {
        let n = sys.n_basis();
        net.validate()?;
        if net.n_inputs() != n * n {
            return Err(Error::Config(format!(
                "network takes {} inputs but the system needs N^2 = {}",
                net.n_inputs(),
                n * n
            )));
        }
        if net.n_outputs() != sys.n_active() {
            return Err(Error::Config(format!(
                "network has {} outputs but the system has {} active dipoles",
                net.n_outputs(),
                sys.n_active()
            )));
        }
        for (label, p) in [("initial", &p0), ("target", &target)] {
            if p.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: p.dim(),
                });
            }
            let want = sys.n_occupied() as f64;
            if (p.trace_re() - want).abs() > 1e-8 {
                return Err(Error::Config(format!(
                    "{label} density has trace {} but N_e/2 = {want}",
                    p.trace_re()
                )));
            }
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::Config("step count must be at least 1".into()));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be non-negative, got {rho}")));
        }
        Ok(ControlProblem {
            basis: HermBasis::build(n),
            sys,
            net,
            p0,
            target,
            dt,
            n_steps,
            rho,
            rescale,
            coupling: Coupling::Full,
            zeta_sign: 1.0,
        })
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn closed_loop<'a>(&'a self, theta: &'a Theta) -> ClosedLoop<'a> {
        ClosedLoop::new(&self.sys, &self.basis, &self.net, theta)
    }

    pub fn propagate(&self, theta: &Theta) -> Result<Trajectory> {
        self.check_theta(theta)?;
        self.closed_loop(theta).propagate(&self.p0, self.dt, self.n_steps)
    }

    fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Weight of the running cost: `1/(N^2 K)` when rescaling, else 1.
    pub fn running_scale(&self) -> f64 {
        if self.rescale {
            let n = self.sys.n_basis() as f64;
            1.0 / (n * n * self.n_steps as f64)
        } else {
            1.0
        }
    }

    /// Generator scale of `U^k`: `-i dt` for the first step, `-2i dt` after.
    pub fn generator_scale(&self, k: usize) -> Complex64 {
        if k == 0 {
            -I * self.dt
        } else {
            -I * (2.0 * self.dt)
        }
    }

    fn control_energy(&self, traj: &Trajectory) -> Result<f64> {
        traj.amplitudes.iter().try_fold(0.0, |acc, a| {
            Ok(acc + self.sys.external_potential(a)?.norm_squared())
        })
    }

    /// `s/2 sum_{k<K} ||V^k||^2 - (ρ/2) F(P^K, PT)^2`.
    pub fn objective(&self, traj: &Trajectory) -> Result<ObjectiveValue> {
        let running_cost = 0.5 * self.running_scale() * self.control_energy(traj)?;
        let f = fidelity(traj.final_state(), &self.target);
        let terminal_term = -0.5 * self.rho * f * f;
        Ok(ObjectiveValue {
            total: running_cost + terminal_term,
            running_cost,
            terminal_term,
            rho: self.rho,
            rescaled: self.rescale,
        })
    }

    pub fn metrics(&self, traj: &Trajectory) -> Result<Metrics> {
        let k = traj.n_steps() as f64;
        let n = self.sys.n_basis() as f64;
        let mean = self.control_energy(traj)? / k;
        Ok(Metrics {
            alpha: if self.rescale { mean / (n * n) } else { mean },
            terminal_mae: terminal_mae(traj.final_state(), &self.target),
            fidelity: fidelity(traj.final_state(), &self.target),
        })
    }

    /// Objective without the gradient.
    pub fn value(&self, theta: &Theta) -> Result<ObjectiveValue> {
        self.objective(&self.propagate(theta)?)
    }

    /// Dense coupling tensor `dH/dP` for the chosen [`Coupling`].
    fn coupling_tensor(&self, vext: &VextDerivs) -> Tensor4 {
        let dv = vext.dv_dp();
        match self.coupling {
            Coupling::ExternalOnly => dv,
            Coupling::Full => {
                let g = self.sys.fock_jacobian();
                let n = dv.dim();
                Tensor4::from_fn(n, |a, b, r, s| dv.get(a, b, r, s) + g.get(a, b, r, s))
            }
        }
    }

    /// `Y : conj(dH/dP)`.
    fn coupling_adjoint(&self, vext: &VextDerivs, y: &CMatrix) -> Result<CMatrix> {
        let dv = vext.dv_dp_adjoint(y);
        Ok(match self.coupling {
            Coupling::ExternalOnly => dv,
            Coupling::Full => dv + self.sys.fock_jacobian().contract_right_conj(y)?,
        })
    }

    /// Dense `ζ^{k,-}` and `ζ^{k,+}`: the exponential's Jacobian at
    /// `Z = c H(Pk)` and at `conj(c) H(Pk)`, composed with `dH/dP`.
    pub fn build_zetas(
        &self,
        theta: &Theta,
        pk: &HermMatrix,
        k: usize,
    ) -> Result<(Tensor4, Tensor4)> {
        let vext = vext_with_derivs(&self.sys, &self.basis, &self.net, theta, pk)?;
        let h = HermMatrix::new(self.sys.fock(pk)?.as_matrix() + vext.value.as_matrix());
        let kernel = ExpKernel::new(&h, self.generator_scale(k))?;
        let d = self.coupling_tensor(&vext);
        Ok((
            kernel.jacobian().compose(&d),
            kernel.conjugate().jacobian().compose(&d),
        ))
    }

    fn step_data(&self, traj: &Trajectory, theta: &Theta, exec: Execution) -> Result<Vec<StepData>> {
        exec.map_range(traj.n_steps(), |k| {
            let p = &traj.states[k];
            let vext = vext_with_derivs(&self.sys, &self.basis, &self.net, theta, p)?;
            let h = HermMatrix::new(self.sys.fock(p)?.as_matrix() + vext.value.as_matrix());
            let kernel = ExpKernel::new(&h, self.generator_scale(k))?;
            Ok(StepData { vext, kernel })
        })
        .into_iter()
        .collect()
    }

    pub fn adjoint_sweep(
        &self,
        traj: &Trajectory,
        theta: &Theta,
        exec: Execution,
    ) -> Result<AdjointSweep> {
        let steps = self.step_data(traj, theta, exec)?;
        self.sweep_with(traj, &steps)
    }

    fn sweep_with(&self, traj: &Trajectory, steps: &[StepData]) -> Result<AdjointSweep> {
        let kk = traj.n_steps();
        let n = self.sys.n_basis();
        let s = Complex64::new(self.running_scale(), 0.0);
        let mut lambda = vec![CMatrix::zeros(n, n); kk];
        lambda[kk - 1] = -fidelity_gradient(traj.final_state(), &self.target, self.rho)?;

        for k in (1..kk).rev() {
            let st = &steps[k];
            let u = &traj.propagators[k];
            let prev = traj.states[k - 1].as_matrix();
            let next = &lambda[k];

            let mut lam = st.vext.dv_dp_adjoint(st.vext.value.as_matrix()) * s;
            if k + 2 <= kk {
                let u1 = &traj.propagators[k + 1];
                lam += u1.adjoint() * &lambda[k + 1] * u1;
            }
            let w1 = next * u * prev;
            let w2 = prev * u.adjoint() * next;
            let c = st.kernel.scale();
            let y = st.kernel.frechet_adjoint(&w1) * c.conj()
                + st.kernel.conjugate().frechet_adjoint(&w2) * c;
            lam += self.coupling_adjoint(&st.vext, &y)? * Complex64::new(self.zeta_sign, 0.0);

            if lam.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::NonFiniteObjective);
            }
            lambda[k - 1] = lam;
        }

        Ok(AdjointSweep {
            lambda,
            fidelity: fidelity(traj.final_state(), &self.target),
            terminal_mae: terminal_mae(traj.final_state(), &self.target),
        })
    }

    /// Total derivative of the objective with respect to `θ`.
    pub fn theta_gradient(
        &self,
        traj: &Trajectory,
        sweep: &AdjointSweep,
        theta: &Theta,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        let steps = self.step_data(traj, theta, exec)?;
        Ok(self.gradient_with(traj, &steps, sweep, exec))
    }

    fn gradient_with(
        &self,
        traj: &Trajectory,
        steps: &[StepData],
        sweep: &AdjointSweep,
        exec: Execution,
    ) -> Vec<f64> {
        let m = self.n_params();
        let s = self.running_scale();
        let parts = exec.map_range(traj.n_steps(), |k| {
            let st = &steps[k];
            let u = &traj.propagators[k];
            let q = traj.states[k.saturating_sub(1)].as_matrix();
            let lam = &sweep.lambda[k];
            let c = st.kernel.scale();
            let ya = st.kernel.frechet_adjoint(&(lam * u * q));
            let yb = st.kernel.conjugate().frechet_adjoint(&(q * u.adjoint() * lam));
            let v = st.vext.value.as_matrix();
            let weights: Vec<Complex64> = st
                .vext
                .dipoles()
                .iter()
                .map(|mj| c * ip(&ya, mj) + c.conj() * ip(&yb, mj) + ip(v, mj) * s)
                .collect();
            let mut out = vec![0.0; m];
            st.vext.accumulate_weighted(&weights, &mut out);
            out
        });
        let mut grad = vec![0.0; m];
        for part in parts {
            for (g, x) in grad.iter_mut().zip(part) {
                *g += x;
            }
        }
        grad
    }

    /// Forward pass, backward sweep and gradient in one go.
    pub fn evaluate(&self, theta: &Theta, exec: Execution) -> Result<Evaluation> {
        let traj = self.propagate(theta)?;
        let objective = self.objective(&traj)?;
        if !objective.total.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        let steps = self.step_data(&traj, theta, exec)?;
        let sweep = self.sweep_with(&traj, &steps)?;
        let gradient = self.gradient_with(&traj, &steps, &sweep, exec);
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        Ok(Evaluation {
            objective,
            gradient,
            metrics: self.metrics(&traj)?,
        })
    }

    /// Central differences of the objective, one parameter at a time.
    pub fn finite_difference_gradient(
        &self,
        theta: &Theta,
        step: f64,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        exec.map_range(theta.len(), |t| {
            let mut plus = theta.clone();
            plus.0[t] += step;
            let mut minus = theta.clone();
            minus.0[t] -= step;
            let fp = self.value(&plus)?.total;
            let fm = self.value(&minus)?.total;
            Ok((fp - fm) / (2.0 * step))
        })
        .into_iter()
        .collect()
    }
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_error: f64,
    pub worst_index: usize,
}

/// Per-component relative error, except that components smaller than
/// `1e-8 ||fd||` are compared by absolute difference.
pub fn compare_gradients(analytic: &[f64], fd: &[f64]) -> GradientCheck {
    let norm = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = GradientCheck {
        max_error: 0.0,
        worst_index: 0,
    };
    for (t, (g, f)) in analytic.iter().zip(fd).enumerate() {
        let diff = (g - f).abs();
        let err = if f.abs() < 1e-8 * norm {
            diff
        } else {
            diff / f.abs()
        };
        if err > out.max_error || err.is_nan() {
            out = GradientCheck {
                max_error: err,
                worst_index: t,
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::OutputActivation;
    use crate::herm::max_abs_diff;
    use crate::molsys::{bundled, orthogonalize, MolSystemRaw};
    use crate::sampling;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    const DT: f64 = 8.268e-3;

    fn h2_problem(n_steps: usize, rho: f64) -> ControlProblem {
        let sys = orthogonalize(bundled::load(bundled::H2).unwrap()).unwrap();
        let net = NetConfig::new(vec![4, 4, 4, 1], OutputActivation::Identity).unwrap();
        ControlProblem::new(
            sys,
            net,
            HermMatrix::from_diagonal(&[0.0, 1.0]),
            HermMatrix::from_diagonal(&[1.0, 0.0]),
            DT,
            n_steps,
            rho,
            true,
        )
        .unwrap()
    }

    fn zeros(p: &ControlProblem) -> Theta {
        Theta(vec![0.0; p.n_params()])
    }

    #[test]
    fn fidelity_examples() {
        let a = HermMatrix::from_diagonal(&[1.0, 0.0]);
        let b = HermMatrix::from_diagonal(&[0.0, 1.0]);
        assert_eq!(fidelity(&a, &a), 1.0);
        assert_eq!(fidelity(&a, &b), 0.0);
        assert_eq!(fidelity_gradient(&a, &b, 1e4).unwrap(), CMatrix::zeros(2, 2));
    }

    #[test]
    fn mae_examples() {
        let a = HermMatrix::from_diagonal(&[0.0, 1.0]);
        let b = HermMatrix::from_diagonal(&[1.0, 0.0]);
        assert_eq!(terminal_mae(&a, &a), 0.0);
        assert_eq!(terminal_mae(&a, &b), 0.5);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let p = sampling::random_hermitian(&mut rng, 3);
        let q = sampling::random_hermitian(&mut rng, 3);
        let mut direct = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                direct += (p[(i, j)] - q[(i, j)]).norm();
            }
        }
        assert_relative_eq!(terminal_mae(&p, &q), direct / 9.0, max_relative = 1e-15);
    }

    #[test]
    fn fidelity_gradient_collapses_to_anticommutator() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        for n in [2, 4, 6] {
            let pk = sampling::random_hermitian(&mut rng, n);
            let pt = sampling::random_hermitian(&mut rng, n);
            let f = fidelity(&pk, &pt);
            let g = fidelity_gradient(&pk, &pt, 3.0).unwrap();
            let collapsed = (pk.as_matrix() * pt.as_matrix() + pt.as_matrix() * pk.as_matrix())
                * Complex64::new(3.0 * f, 0.0);
            assert!(max_abs_diff(&g, &collapsed) < 1e-12 * (1.0 + collapsed.norm()));
        }
    }

    #[test]
    fn fidelity_gradient_matches_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let pk = sampling::random_projector(&mut rng, 4, 2);
        let pt = sampling::random_projector(&mut rng, 4, 2);
        let rho = 7.0;
        let g = fidelity_gradient(&pk, &pt, rho).unwrap();
        let value = |p: &HermMatrix| 0.5 * rho * fidelity(p, &pt).powi(2);
        for _ in 0..5 {
            let e = sampling::random_hermitian(&mut rng, 4);
            let h = 1e-6;
            let plus = HermMatrix::new(pk.as_matrix() + e.as_matrix() * Complex64::new(h, 0.0));
            let minus = HermMatrix::new(pk.as_matrix() - e.as_matrix() * Complex64::new(h, 0.0));
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            let an = ip(&g, &e).re;
            assert!((an - fd).abs() < 1e-6 * fd.abs().max(1e-3), "{an} vs {fd}");
        }
    }

    #[test]
    fn objective_examples() {
        let p = h2_problem(20, 1e4);
        let free = p.value(&zeros(&p)).unwrap();
        assert_eq!(free.running_cost, 0.0);
        let traj = p.propagate(&zeros(&p)).unwrap();
        let f = fidelity(traj.final_state(), &p.target);
        assert_relative_eq!(free.total, -0.5 * 1e4 * f * f);

        let p = h2_problem(2, 0.0);
        let theta = p.net.glorot_init(3);
        let traj = p.propagate(&theta).unwrap();
        let obj = p.objective(&traj).unwrap();
        assert_eq!(obj.total, obj.running_cost);
        // Hand sum of the two per-step field energies.
        let mz = p.sys.dipole_co(2).as_matrix();
        let mut manual = 0.0;
        for k in 0..2 {
            let a = p.net.forward(&theta, &p.basis.unvec(&traj.states[k]).unwrap()).unwrap();
            manual += (mz * Complex64::new(a[0], 0.0)).norm_squared();
        }
        assert_relative_eq!(obj.running_cost, 0.5 * manual / 8.0, max_relative = 1e-13);
    }

    #[test]
    fn zetas_vanish_without_feedback_slope() {
        let p = h2_problem(5, 0.0).with_coupling(Coupling::ExternalOnly);
        let (zm, zp) = p.build_zetas(&zeros(&p), &p.p0, 3).unwrap();
        assert_eq!(zm, Tensor4::zeros(2));
        assert_eq!(zp, Tensor4::zeros(2));
    }

    #[test]
    fn zeta_minus_predicts_propagator_change() {
        let p = h2_problem(5, 0.0);
        let theta = p.net.glorot_init(4);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let pk = sampling::random_projector(&mut rng, 2, 1);
        let (zm, _) = p.build_zetas(&theta, &pk, 2).unwrap();
        let u_of = |q: &HermMatrix| -> CMatrix {
            let (h, _) = p.closed_loop(&theta).hamiltonian(q).unwrap();
            crate::matexp::expm_antihermitian(&h, p.generator_scale(2)).unwrap()
        };
        let e = sampling::random_hermitian(&mut rng, 2);
        let h = 1e-6;
        let plus = HermMatrix::new(pk.as_matrix() + e.as_matrix() * Complex64::new(h, 0.0));
        let minus = HermMatrix::new(pk.as_matrix() - e.as_matrix() * Complex64::new(h, 0.0));
        let fd = (u_of(&plus) - u_of(&minus)) / Complex64::new(2.0 * h, 0.0);
        let predicted = zm.contract_left(&e).unwrap() * p.generator_scale(2);
        let rel = (&predicted - &fd).norm() / fd.norm();
        assert!(rel < 1e-6, "relative error {rel}");

        // The feedback-only coupling misses the mean-field response.
        let q = p.clone().with_coupling(Coupling::ExternalOnly);
        let (zm_ext, _) = q.build_zetas(&theta, &pk, 2).unwrap();
        let predicted = zm_ext.contract_left(&e).unwrap() * p.generator_scale(2);
        assert!((&predicted - &fd).norm() / fd.norm() > 1e-3);
    }

    #[test]
    fn zeta_plus_is_conjugate_construction() {
        let p = h2_problem(5, 0.0);
        let theta = p.net.glorot_init(6);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let pk = sampling::random_projector(&mut rng, 2, 1);
        let (_, zp) = p.build_zetas(&theta, &pk, 1).unwrap();
        let (h, _) = p.closed_loop(&theta).hamiltonian(&pk).unwrap();
        let jm = crate::matexp::expm_with_jacobian(&h, p.generator_scale(1)).unwrap();
        let jp = crate::matexp::conjugate_jacobian(&jm);
        let vext = vext_with_derivs(&p.sys, &p.basis, &p.net, &theta, &pk).unwrap();
        let d = p.coupling_tensor(&vext);
        assert!(zp.max_abs_diff(&jp.jac.compose(&d)) < 1e-13);
    }

    #[test]
    fn sweep_trivial_cases() {
        let p = h2_problem(10, 0.0);
        let traj = p.propagate(&zeros(&p)).unwrap();
        let sweep = p.adjoint_sweep(&traj, &zeros(&p), Execution::Sequential).unwrap();
        assert_eq!(sweep.lambda.len(), 10);
        assert!(sweep.lambda.iter().all(|l| l.norm() == 0.0));

        let p = h2_problem(1, 1e4);
        let theta = p.net.glorot_init(8);
        let traj = p.propagate(&theta).unwrap();
        let sweep = p.adjoint_sweep(&traj, &theta, Execution::Sequential).unwrap();
        assert_eq!(sweep.lambda.len(), 1);
        let expected = -fidelity_gradient(traj.final_state(), &p.target, 1e4).unwrap();
        assert_eq!(sweep.lambda[0], expected);
        let herm = (&sweep.lambda[0] - sweep.lambda[0].adjoint()).norm();
        assert!(herm < 1e-10);
    }

    /// The same recursion built from the dense 4-index tensors.
    fn dense_sweep(p: &ControlProblem, traj: &Trajectory, theta: &Theta) -> Vec<CMatrix> {
        let kk = traj.n_steps();
        let s = Complex64::new(p.running_scale(), 0.0);
        let mut lambda = vec![CMatrix::zeros(2, 2); kk];
        lambda[kk - 1] = -fidelity_gradient(traj.final_state(), &p.target, p.rho).unwrap();
        for k in (1..kk).rev() {
            let (zm, zp) = p.build_zetas(theta, &traj.states[k], k).unwrap();
            let vext = vext_with_derivs(&p.sys, &p.basis, &p.net, theta, &traj.states[k]).unwrap();
            let u = &traj.propagators[k];
            let prev = traj.states[k - 1].as_matrix();
            let mut lam = vext.dv_dp().contract_right_conj(&vext.value).unwrap() * s;
            if k + 2 <= kk {
                let u1 = &traj.propagators[k + 1];
                lam += u1.adjoint() * &lambda[k + 1] * u1;
            }
            let two_i_dt = I * (2.0 * p.dt);
            lam += zm.contract_right_conj(&(&lambda[k] * u * prev)).unwrap() * two_i_dt;
            lam -= zp.contract_right_conj(&(prev * u.adjoint() * &lambda[k])).unwrap() * two_i_dt;
            lambda[k - 1] = lam;
        }
        lambda
    }

    #[test]
    fn factored_sweep_matches_dense_tensors() {
        for coupling in [Coupling::Full, Coupling::ExternalOnly] {
            let p = h2_problem(12, 1e4).with_coupling(coupling);
            let theta = p.net.glorot_init(9);
            let traj = p.propagate(&theta).unwrap();
            let sweep = p.adjoint_sweep(&traj, &theta, Execution::Sequential).unwrap();
            let dense = dense_sweep(&p, &traj, &theta);
            for (a, b) in sweep.lambda.iter().zip(&dense) {
                assert!(max_abs_diff(a, b) < 1e-9 * (1.0 + b.norm()));
            }
        }
    }

    fn fd_check(p: &ControlProblem, seed: u64) -> GradientCheck {
        let theta = p.net.glorot_init(seed);
        let eval = p.evaluate(&theta, Execution::Sequential).unwrap();
        let fd = p.finite_difference_gradient(&theta, 1e-6, Execution::Parallel).unwrap();
        compare_gradients(&eval.gradient, &fd)
    }

    #[test]
    fn gradient_matches_finite_differences_h2() {
        for rho in [0.0, 1e4] {
            let check = fd_check(&h2_problem(50, rho), 11);
            assert!(check.max_error < 1e-5, "rho {rho}: {check:?}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_first_step_only() {
        let check = fd_check(&h2_problem(1, 1e4), 12);
        assert!(check.max_error < 1e-5, "{check:?}");
    }

    #[test]
    fn feedback_only_coupling_gives_wrong_gradient() {
        let p = h2_problem(50, 1e4).with_coupling(Coupling::ExternalOnly);
        assert!(fd_check(&p, 11).max_error > 1e-3);
    }

    #[test]
    fn flipped_coupling_sign_is_detected() {
        let mut p = h2_problem(50, 1e4);
        p.zeta_sign = -1.0;
        assert!(fd_check(&p, 11).max_error > 1e-3);
    }

    #[test]
    fn gradient_is_affine_in_rho() {
        let p0 = h2_problem(30, 0.0);
        let theta = p0.net.glorot_init(13);
        let g0 = p0.evaluate(&theta, Execution::Sequential).unwrap().gradient;
        let g1 = p0.clone().with_rho(1e4).evaluate(&theta, Execution::Sequential).unwrap().gradient;
        let g2 = p0.clone().with_rho(3e3).evaluate(&theta, Execution::Sequential).unwrap().gradient;
        let scale = g1.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for t in 0..g0.len() {
            let predicted = g0[t] + 0.3 * (g1[t] - g0[t]);
            assert!((g2[t] - predicted).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn parallel_gradient_is_bit_identical() {
        let p = h2_problem(40, 1e4);
        let theta = p.net.glorot_init(14);
        let a = p.evaluate(&theta, Execution::Sequential).unwrap();
        let b = p.evaluate(&theta, Execution::Parallel).unwrap();
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn lih_gradient_matches_finite_differences() {
        let sys = orthogonalize(bundled::load(bundled::LIH).unwrap()).unwrap();
        let net = NetConfig::new(vec![36, 4, 3], OutputActivation::ScaledTanh(10.0)).unwrap();
        let mut occ = [0.0; 6];
        occ[0] = 1.0;
        occ[1] = 1.0;
        let mut tgt = [0.0; 6];
        tgt[0] = 1.0;
        tgt[2] = 1.0;
        let p = ControlProblem::new(
            sys,
            net,
            HermMatrix::from_diagonal(&occ),
            HermMatrix::from_diagonal(&tgt),
            8.268e-4,
            8,
            1e3,
            true,
        )
        .unwrap();
        // Tiny components drown in roundoff here (the objective is ~500), so
        // the comparison is norm-wise.
        let theta = p.net.glorot_init(15);
        let g = p.evaluate(&theta, Execution::Sequential).unwrap().gradient;
        let fd = p.finite_difference_gradient(&theta, 1e-4, Execution::Parallel).unwrap();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-7, "relative error {}", diff / norm);
    }

    /// One orbital, two electrons: `P = [1]` for all time, so only the
    /// running cost depends on the parameters.
    #[test]
    fn single_orbital_gradient_by_hand() {
        let json = r#"{"name":"toy","n_basis":1,"n_electrons":2,"units":"hartree_bohr",
            "overlap":[1.0],"hcore":[-1.0],"dipole_x":[0.0],"dipole_y":[0.0],
            "dipole_z":[0.3],"eri":[0.5]}"#;
        let sys = orthogonalize(MolSystemRaw::from_json_str(json).unwrap()).unwrap();
        let net = NetConfig::new(vec![1, 1], OutputActivation::Identity).unwrap();
        let one = HermMatrix::from_diagonal(&[1.0]);
        let p = ControlProblem::new(sys, net, one.clone(), one, 0.01, 5, 10.0, true).unwrap();
        let (w, b) = (0.7, -0.2);
        let eval = p.evaluate(&Theta(vec![w, b]), Execution::Sequential).unwrap();
        // cost = (1/5) * 1/2 * 5 * ((w + b) * 0.3)^2 - 10/2, since p = [1].
        let d = (w + b) * 0.09;
        assert_relative_eq!(eval.gradient[0], d, max_relative = 1e-12);
        assert_relative_eq!(eval.gradient[1], d, max_relative = 1e-12);
        assert_relative_eq!(
            eval.objective.total,
            0.5 * ((w + b) * 0.3_f64).powi(2) - 5.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn compare_gradients_rules() {
        let c = compare_gradients(&[1.0, 2.0, 1e-12], &[1.0, 2.00001, 0.0]);
        assert_eq!(c.worst_index, 1);
        assert_relative_eq!(c.max_error, 0.00001 / 2.00001, max_relative = 1e-6);
        let c = compare_gradients(&[1.0, 5e-9], &[1.0, 1e-9]);
        assert_eq!(c.worst_index, 1);
        assert!(c.max_error < 1e-8);
    }
}
