//! Diagonal spectral representation of the state space.
//!
//! Fields on `[0, 1]` with Dirichlet boundary conditions are represented by
//! their coefficients in the sine basis `e_k(ξ) = √2 sin(kπξ)`, `k = 1..=N`.
//! Both `A` and `C` act diagonally in this basis, so the linear flow, the
//! stochastic convolution covariance and the invariant Gaussian covariance all
//! have closed forms mode by mode.
//!
//! The collocation grid is the uniform interior grid `ξ_j = j/(M+1)`,
//! `j = 1..=M`, with weight `1/(M+1)`. On this grid the discrete sine
//! transform is exactly orthonormal for `k ≤ M`, so analysis after synthesis
//! reproduces coefficients up to rounding.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};

/// Coefficients of a field in the eigenbasis of `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("state vector entry {i}"),
            });
        }
        Ok(Self(coeffs))
    }

    pub(crate) fn from_vec_unchecked(coeffs: Vec<f64>) -> Self {
        Self(coeffs)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Unit vector along mode `k` (zero-based).
    pub fn unit(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Pointwise values at the interior collocation nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField(Vec<f64>);

impl GridField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("grid field entry {i}"),
            });
        }
        Ok(Self(values))
    }

    pub fn constant(m: usize, value: f64) -> Self {
        Self(vec![value; m])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GridField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-mode variances of a centred Gaussian that is diagonal in the eigenbasis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagCovariance {
    pub variances: Vec<f64>,
}

impl DiagCovariance {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("variances", "must be finite and nonnegative"));
        }
        Ok(Self { variances })
    }

    pub fn trace(&self) -> f64 {
        self.variances.iter().sum()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.variances.iter().all(|v| *v > 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresetLabel {
    HeatDirichlet,
    ScaledIdentityHOneNoise,
    Custom,
}

/// Parameters selecting one of the model presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", deny_unknown_fields)]
pub enum ModelSpec {
    /// `A` = Dirichlet Laplacian on `[0, 1]`, `C = noise_scale · I`.
    HeatDirichlet {
        #[serde(default = "one")]
        noise_scale: f64,
    },
    /// `A = -½ I`, `C = (-B)^{-β}` with `B` the Dirichlet Laplacian. Requires `β > 2`.
    ScaledIdentityHOneNoise { beta: f64 },
    /// Arbitrary diagonal spectrum.
    Custom {
        eigenvalues: Vec<f64>,
        noise_coeffs: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l2: f64,
    pub sup_grid: f64,
    pub h1: f64,
}

/// Truncated diagonal representation of `(A, C)` plus its collocation grid.
#[derive(Clone, Debug)]
pub struct SpectralModel {
    eigenvalues: Vec<f64>,
    noise_coeffs: Vec<f64>,
    grid_size: usize,
    preset: PresetLabel,
    /// Row-major `M × N` synthesis matrix, `basis[j*N + k] = e_{k+1}(ξ_j)`.
    basis: Vec<f64>,
    nodes: Vec<f64>,
}

impl SpectralModel {
    pub fn build(spec: &ModelSpec, n_modes: usize, grid_size: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(invalid("n_modes", "must be at least 1"));
        }
        let (eigenvalues, noise_coeffs, preset) = match spec {
            ModelSpec::HeatDirichlet { noise_scale } => {
                if !(noise_scale.is_finite() && *noise_scale >= 0.0) {
                    return Err(invalid("noise_scale", "must be finite and nonnegative"));
                }
                let a = (1..=n_modes).map(|k| -(k as f64 * PI).powi(2)).collect();
                (a, vec![*noise_scale; n_modes], PresetLabel::HeatDirichlet)
            }
            ModelSpec::ScaledIdentityHOneNoise { beta } => {
                if !(beta.is_finite() && *beta > 2.0) {
                    return Err(invalid(
                        "beta",
                        format!("the H1 noise preset requires beta > 2, got {beta}"),
                    ));
                }
                let c = (1..=n_modes)
                    .map(|k| (k as f64 * PI).powf(-2.0 * beta))
                    .collect();
                (vec![-0.5; n_modes], c, PresetLabel::ScaledIdentityHOneNoise)
            }
            ModelSpec::Custom {
                eigenvalues,
                noise_coeffs,
            } => {
                check_len("custom eigenvalues", n_modes, eigenvalues.len())?;
                check_len("custom noise coefficients", n_modes, noise_coeffs.len())?;
                (eigenvalues.clone(), noise_coeffs.clone(), PresetLabel::Custom)
            }
        };
        Self::from_parts(eigenvalues, noise_coeffs, grid_size, preset)
    }

    /// Builds a custom model directly from a spectrum.
    pub fn custom(eigenvalues: Vec<f64>, noise_coeffs: Vec<f64>, grid_size: usize) -> Result<Self> {
        check_len("custom noise coefficients", eigenvalues.len(), noise_coeffs.len())?;
        if eigenvalues.is_empty() {
            return Err(invalid("n_modes", "must be at least 1"));
        }
        Self::from_parts(eigenvalues, noise_coeffs, grid_size, PresetLabel::Custom)
    }

    fn from_parts(
        eigenvalues: Vec<f64>,
        noise_coeffs: Vec<f64>,
        grid_size: usize,
        preset: PresetLabel,
    ) -> Result<Self> {
        let n = eigenvalues.len();
        if let Some(a) = eigenvalues.iter().find(|a| !(a.is_finite() && **a < 0.0)) {
            return Err(invalid(
                "eigenvalues",
                format!("all eigenvalues of A must be strictly negative, found {a}"),
            ));
        }
        if noise_coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(invalid("noise_coeffs", "must be finite and nonnegative"));
        }
        if grid_size < 2 * n {
            return Err(invalid(
                "grid_size",
                format!("need grid_size >= 2 * n_modes = {}, got {grid_size}", 2 * n),
            ));
        }
        let trace: f64 = eigenvalues
            .iter()
            .zip(&noise_coeffs)
            .map(|(a, c)| c / (-2.0 * a))
            .sum();
        if !trace.is_finite() {
            return Err(invalid("noise_coeffs", "stationary covariance is not trace class"));
        }

        let h = 1.0 / (grid_size as f64 + 1.0);
        let nodes: Vec<f64> = (1..=grid_size).map(|j| j as f64 * h).collect();
        let mut basis = vec![0.0; grid_size * n];
        for (j, xi) in nodes.iter().enumerate() {
            for k in 0..n {
                basis[j * n + k] = 2f64.sqrt() * ((k + 1) as f64 * PI * xi).sin();
            }
        }
        Ok(Self {
            eigenvalues,
            noise_coeffs,
            grid_size,
            preset,
            basis,
            nodes,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn preset(&self) -> PresetLabel {
        self.preset
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn noise_coeffs(&self) -> &[f64] {
        &self.noise_coeffs
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weight of every interior node.
    pub fn quadrature_weight(&self) -> f64 {
        1.0 / (self.grid_size as f64 + 1.0)
    }

    /// Largest (least negative) eigenvalue of `A`.
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Returns `Some(c)` when `C = c · I`.
    pub fn scalar_noise(&self) -> Option<f64> {
        let c0 = self.noise_coeffs[0];
        self.noise_coeffs
            .iter()
            .all(|c| (c - c0).abs() <= 1e-15 * c0.abs().max(1.0))
            .then_some(c0)
    }

    pub fn check_state(&self, v: &[f64]) -> Result<()> {
        check_len("state vector", self.n_modes(), v.len())
    }

    /// `e^{tA} v`.
    pub fn semigroup_apply(&self, t: f64, v: &[f64]) -> Result<StateVector> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(invalid("t", "time must be finite and nonnegative"));
        }
        self.check_state(v)?;
        Ok(StateVector(
            self.eigenvalues
                .iter()
                .zip(v)
                .map(|(a, x)| (a * t).exp() * x)
                .collect(),
        ))
    }

    /// Covariance of the stochastic convolution at time `t`,
    /// `∫₀ᵗ e^{sA} C e^{sA} ds`.
    pub fn covariance_qt(&self, t: f64) -> Result<DiagCovariance> {
        if !(t >= 0.0) {
            return Err(invalid("t", "time must be nonnegative"));
        }
        let variances = self
            .eigenvalues
            .iter()
            .zip(&self.noise_coeffs)
            .map(|(a, c)| {
                if t.is_infinite() {
                    c / (-2.0 * a)
                } else {
                    // -expm1(2at) = 1 - e^{2at}, accurate for small t.
                    c * -(2.0 * a * t).exp_m1() / (-2.0 * a)
                }
            })
            .collect();
        Ok(DiagCovariance { variances })
    }

    /// Stationary covariance `Q_∞ = ∫₀^∞ e^{sA} C e^{sA} ds`.
    pub fn covariance_qinf(&self) -> DiagCovariance {
        DiagCovariance {
            variances: self
                .eigenvalues
                .iter()
                .zip(&self.noise_coeffs)
                .map(|(a, c)| c / (-2.0 * a))
                .collect(),
        }
    }

    /// `n R(n, A) x`, the resolvent mollification of an initial datum.
    pub fn resolvent_mollify(&self, n: f64, x: &[f64]) -> Result<StateVector> {
        if !(n.is_finite() && n > 0.0) {
            return Err(invalid("n", "resolvent parameter must be positive"));
        }
        self.check_state(x)?;
        Ok(StateVector(
            self.eigenvalues
                .iter()
                .zip(x)
                .map(|(a, xk)| n / (n - a) * xk)
                .collect(),
        ))
    }

    pub fn to_grid(&self, v: &[f64]) -> Result<GridField> {
        self.check_state(v)?;
        let mut out = vec![0.0; self.grid_size];
        self.synthesize_into(v, &mut out);
        Ok(GridField(out))
    }

    pub fn from_grid(&self, f: &[f64]) -> Result<StateVector> {
        check_len("grid field", self.grid_size, f.len())?;
        let mut out = vec![0.0; self.n_modes()];
        self.analyze_into(f, &mut out);
        Ok(StateVector(out))
    }

    /// Sine synthesis without allocation. Lengths are the caller's contract.
    pub(crate) fn synthesize_into(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n_modes();
        for (row, o) in self.basis.chunks_exact(n).zip(out.iter_mut()) {
            *o = dot(row, v);
        }
    }

    /// Basis functions evaluated at node `j`.
    pub(crate) fn basis_row(&self, j: usize) -> &[f64] {
        let n = self.n_modes();
        &self.basis[j * n..(j + 1) * n]
    }

    /// Quadrature analysis without allocation.
    pub(crate) fn analyze_into(&self, f: &[f64], out: &mut [f64]) {
        let n = self.n_modes();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, fj) in self.basis.chunks_exact(n).zip(f) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += b * fj;
            }
        }
        let w = self.quadrature_weight();
        out.iter_mut().for_each(|o| *o *= w);
    }

    /// Grid quadrature of `∫₀¹ f g dξ`.
    pub fn grid_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.quadrature_weight() * dot(f, g)
    }

    pub fn norms(&self, v: &[f64]) -> Result<Norms> {
        self.check_state(v)?;
        let mut grid = vec![0.0; self.grid_size];
        self.synthesize_into(v, &mut grid);
        Ok(self.norms_with_grid(v, &grid))
    }

    pub(crate) fn norms_with_grid(&self, v: &[f64], grid: &[f64]) -> Norms {
        let h1 = v
            .iter()
            .enumerate()
            .map(|(k, x)| ((k + 1) as f64 * PI * x).powi(2))
            .sum::<f64>()
            .sqrt();
        Norms {
            l2: norm(v),
            sup_grid: grid.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
            h1,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
