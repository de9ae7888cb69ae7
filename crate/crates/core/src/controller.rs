//! Dense feedforward feedback law `a(p; theta)` with softplus hidden layers,
//! its input and parameter Jacobians, and the induced external potential
//! `V(P; theta) = sum_j a_j(unvec(P); theta) M_j` with its derivatives.

use std::fmt;
use std::ops::Deref;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::herm::{ip, CMatrix, HermBasis, HermMatrix, Tensor4};
use crate::molsys::MolSystem;

/// Above this pre-activation softplus is taken to be the identity.
const SOFTPLUS_LINEAR_CUTOFF: f64 = 30.0;

/// Activation of the final layer; hidden layers always use softplus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Identity,
    /// `z -> c tanh(z)`.
    ScaledTanh(f64),
}

impl OutputActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => z,
            OutputActivation::ScaledTanh(c) => c * z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::ScaledTanh(c) => {
                let t = z.tanh();
                c * (1.0 - t * t)
            }
        }
    }
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputActivation::Identity => write!(f, "identity"),
            OutputActivation::ScaledTanh(c) => write!(f, "tanh{c}"),
        }
    }
}

impl FromStr for OutputActivation {
    type Err = Error;

    /// Accepts `"identity"` or `"tanh<c>"`, e.g. `"tanh10"`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(OutputActivation::Identity);
        }
        if let Some(rest) = s.strip_prefix("tanh") {
            let c: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad output activation {s:?}")))?;
            if c > 0.0 && c.is_finite() {
                return Ok(OutputActivation::ScaledTanh(c));
            }
        }
        Err(Error::Config(format!("bad output activation {s:?}")))
    }
}

impl Serialize for OutputActivation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OutputActivation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_CUTOFF {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Network architecture: widths `[n0, n1, ..., nL]` and output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
}

impl NetConfig {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Result<Self> {
        let cfg = NetConfig {
            layer_sizes,
            output_activation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total number of weights and biases.
    pub fn n_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets of `(weights, biases)` of each layer inside the flat vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let wo = at;
                let bo = at + w[0] * w[1];
                at = bo + w[1];
                (wo, bo)
            })
            .collect()
    }

    fn check(&self, theta: &Theta, p: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        if p.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_inputs(),
                got: p.len(),
            });
        }
        Ok(())
    }

    /// Glorot-uniform weights on `±sqrt(6 / (fan_in + fan_out))` drawn from
    /// xoshiro256++ seeded with `seed`; biases zero.
    pub fn glorot_init(&self, seed: u64) -> Theta {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut theta = vec![0.0; self.n_params()];
        for (w, (wo, _)) in self.layer_sizes.windows(2).zip(self.offsets()) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in &mut theta[wo..wo + fan_in * fan_out] {
                *x = rng.random_range(-limit..limit);
            }
        }
        Theta(theta)
    }

    /// Pre-activations and activations of every layer.
    fn trace(&self, theta: &Theta, p: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let nl = self.n_layers();
        let mut zs = Vec::with_capacity(nl);
        let mut hs = Vec::with_capacity(nl + 1);
        hs.push(p.to_vec());
        for (l, (w, (wo, bo))) in self.layer_sizes.windows(2).zip(self.offsets()).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let input = &hs[l];
            let z: Vec<f64> = (0..n_out)
                .map(|i| {
                    let row = &theta[wo + i * n_in..wo + (i + 1) * n_in];
                    theta[bo + i] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let h = if l + 1 == nl {
                z.iter().map(|&v| self.output_activation.apply(v)).collect()
            } else {
                z.iter().map(|&v| softplus(v)).collect()
            };
            zs.push(z);
            hs.push(h);
        }
        (zs, hs)
    }

    pub fn forward(&self, theta: &Theta, p: &[f64]) -> Result<Vec<f64>> {
        self.check(theta, p)?;
        let (_, mut hs) = self.trace(theta, p);
        Ok(hs.pop().unwrap())
    }

    /// Output together with `da/dp` (`N_a x n0`) and `da/dtheta`
    /// (`N_a x M`) by reverse accumulation, one sweep per output.
    pub fn jacobians(&self, theta: &Theta, p: &[f64]) -> Result<NetJacobians> {
        self.check(theta, p)?;
        let (zs, mut hs) = self.trace(theta, p);
        let nl = self.n_layers();
        let n_out = self.n_outputs();
        let offsets = self.offsets();
        let mut da_dp = DMatrix::zeros(n_out, self.n_inputs());
        let mut da_dtheta = DMatrix::zeros(n_out, self.n_params());
        for j in 0..n_out {
            let mut delta = vec![0.0; n_out];
            delta[j] = self.output_activation.derivative(zs[nl - 1][j]);
            for l in (0..nl).rev() {
                let (n_in, n_lo) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
                let (wo, bo) = offsets[l];
                let input = &hs[l];
                for i in 0..n_lo {
                    da_dtheta[(j, bo + i)] = delta[i];
                    for k in 0..n_in {
                        da_dtheta[(j, wo + i * n_in + k)] = delta[i] * input[k];
                    }
                }
                let mut back = vec![0.0; n_in];
                for i in 0..n_lo {
                    let row = &theta[wo + i * n_in..wo + (i + 1) * n_in];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += w * delta[i];
                    }
                }
                if l == 0 {
                    for (k, b) in back.into_iter().enumerate() {
                        da_dp[(j, k)] = b;
                    }
                } else {
                    delta = back
                        .into_iter()
                        .zip(&zs[l - 1])
                        .map(|(b, &z)| b * sigmoid(z))
                        .collect();
                }
            }
        }
        Ok(NetJacobians {
            output: hs.pop().unwrap(),
            da_dp,
            da_dtheta,
        })
    }
}

/// Flat parameter vector: per layer, weights (row-major, output x input)
/// followed by biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(pub Vec<f64>);

impl Deref for Theta {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Theta {
    fn from(v: Vec<f64>) -> Self {
        Theta(v)
    }
}

#[derive(Debug, Clone)]
pub struct NetJacobians {
    pub output: Vec<f64>,
    pub da_dp: DMatrix<f64>,
    pub da_dtheta: DMatrix<f64>,
}

/// External potential at one density with the pieces needed for its
/// derivatives. `dV/dP` factors as `sum_j M_j ⊗ C_j` with
/// `C_j[r][s] = sum_m (da/dp)[j][m] Rinv[m][r*N + s]`.
#[derive(Debug, Clone)]
pub struct VextDerivs {
    pub value: HermMatrix,
    pub amplitudes: Vec<f64>,
    pub da_dtheta: DMatrix<f64>,
    dipoles: Vec<HermMatrix>,
    couplings: Vec<CMatrix>,
}

impl VextDerivs {
    /// Dense `dV[j][l] / dP[r][s]`.
    pub fn dv_dp(&self) -> Tensor4 {
        let n = self.value.dim();
        Tensor4::from_fn(n, |j, l, r, s| {
            self.dipoles
                .iter()
                .zip(&self.couplings)
                .map(|(m, c)| m[(j, l)] * c[(r, s)])
                .sum()
        })
    }

    /// `dV : E`, the directional derivative of `V` along `E`.
    pub fn dv_dp_apply(&self, e: &CMatrix) -> CMatrix {
        let n = self.value.dim();
        let mut out = CMatrix::zeros(n, n);
        for (m, c) in self.dipoles.iter().zip(&self.couplings) {
            let coef: Complex64 = c.iter().zip(e.iter()).map(|(x, y)| x * y).sum();
            out += m.as_matrix() * coef;
        }
        out
    }

    /// `Y : conj(dV/dP)`.
    pub fn dv_dp_adjoint(&self, y: &CMatrix) -> CMatrix {
        let n = self.value.dim();
        let mut out = CMatrix::zeros(n, n);
        for (m, c) in self.dipoles.iter().zip(&self.couplings) {
            let coef = ip(m, y);
            out += c.map(|z| z.conj()) * coef;
        }
        out
    }

    /// `dV/dtheta_t = sum_j (da/dtheta)[j][t] M_j` for every parameter.
    pub fn dv_dtheta(&self) -> Vec<HermMatrix> {
        let n = self.value.dim();
        (0..self.da_dtheta.ncols())
            .map(|t| {
                let mut m = CMatrix::zeros(n, n);
                for (j, d) in self.dipoles.iter().enumerate() {
                    m += d.as_matrix() * Complex64::new(self.da_dtheta[(j, t)], 0.0);
                }
                HermMatrix::new(m)
            })
            .collect()
    }

    /// `Re <Y, dV/dtheta_t>` for every parameter `t`, accumulated into `out`
    /// with weight `scale`.
    pub fn accumulate_theta_projection(&self, y: &CMatrix, scale: f64, out: &mut [f64]) {
        for (j, m) in self.dipoles.iter().enumerate() {
            let w = ip(y, m).re * scale;
            if w == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(self.da_dtheta.row(j).iter()) {
                *o += w * d;
            }
        }
    }

    /// Same as [`Self::accumulate_theta_projection`] with a complex weight
    /// per dipole: adds `Re(sum_j w_j * (da/dtheta)[j][t])`.
    pub(crate) fn accumulate_weighted(&self, weights: &[Complex64], out: &mut [f64]) {
        for (j, w) in weights.iter().enumerate() {
            if w.re == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(self.da_dtheta.row(j).iter()) {
                *o += w.re * d;
            }
        }
    }

    pub fn dipoles(&self) -> &[HermMatrix] {
        &self.dipoles
    }
}

/// Evaluates the feedback field at density `p` and its derivatives.
pub fn vext_with_derivs(
    sys: &MolSystem,
    basis: &HermBasis,
    cfg: &NetConfig,
    theta: &Theta,
    p: &HermMatrix,
) -> Result<VextDerivs> {
    let coords = basis.unvec(p)?;
    let jac = cfg.jacobians(theta, &coords)?;
    if jac.output.len() != sys.n_active() {
        return Err(Error::DimensionMismatch {
            expected: sys.n_active(),
            got: jac.output.len(),
        });
    }
    let value = sys.external_potential(&jac.output)?;
    let n = p.dim();
    let rinv = basis.r_inv();
    let couplings = (0..jac.output.len())
        .map(|j| {
            CMatrix::from_fn(n, n, |r, s| {
                (0..n * n)
                    .map(|m| rinv[(m, r * n + s)] * jac.da_dp[(j, m)])
                    .sum()
            })
        })
        .collect();
    Ok(VextDerivs {
        value,
        amplitudes: jac.output,
        da_dtheta: jac.da_dtheta,
        dipoles: sys.active_dipoles().cloned().collect(),
        couplings,
    })
}

/// Amplitudes only, without derivatives.
pub fn amplitudes(
    basis: &HermBasis,
    cfg: &NetConfig,
    theta: &Theta,
    p: &HermMatrix,
) -> Result<Vec<f64>> {
    cfg.forward(theta, &basis.unvec(p)?)
}

/// Portable parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn new(cfg: &NetConfig, theta: &Theta) -> Self {
        Checkpoint {
            layer_sizes: cfg.layer_sizes.clone(),
            output_activation: cfg.output_activation,
            theta: theta.0.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(NetConfig, Theta)> {
        let cfg = NetConfig::new(self.layer_sizes, self.output_activation)?;
        if self.theta.len() != cfg.n_params() {
            return Err(Error::DimensionMismatch {
                expected: cfg.n_params(),
                got: self.theta.len(),
            });
        }
        Ok((cfg, Theta(self.theta)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
