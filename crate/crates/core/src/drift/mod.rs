//! Nonlinear drifts `F`, their dissipativity constants and the Yosida /
//! Mehler regularizing family.
//!
//! Every drift is written as `F = G + ζ₂ I` with `G` dissipative:
//!
//! * `Linear`: `G = 0`, so `F(x) = ζ₂ x`;
//! * `NemytskiiGradient`: `G(f) = -φ′∘f` evaluated pointwise on the grid and
//!   projected back onto the retained modes;
//! * `KernelCubic`: `G = P₃`, the cubic polynomial built from a symmetric
//!   nonpositive kernel.

mod kernel;
mod yosida;

pub use kernel::{kernel_apply, KernelSpec};
pub use yosida::{
    mehler_smooth, mehler_smooth_estimate, yosida_f, yosida_g, yosida_ladder,
    yosida_property_check, yosida_resolve, yosida_resolve_from, MehlerEstimate, YosidaReport,
};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::NoiseStream;
use crate::spectral::{dot, SpectralModel, StateVector};

/// Range on which monotonicity of `φ′` is certified.
const PHI_PRIME_LATTICE_HALF_WIDTH: f64 = 10.0;
const PHI_PRIME_LATTICE_POINTS: usize = 2001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DriftVariant {
    Zero,
    Linear,
    /// `phi_prime` holds the coefficients of `φ′` in increasing degree.
    NemytskiiGradient { phi_prime: Vec<f64> },
    KernelCubic { kernel: KernelSpec },
}

/// A drift together with its dissipativity constants.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSpec {
    variant: DriftVariant,
    zeta2: f64,
    zeta: f64,
    /// Coefficients of the rank-one kernel factor, when there is one.
    factor_coeffs: Option<Vec<f64>>,
}

impl DriftSpec {
    pub fn zero(model: &SpectralModel) -> Self {
        Self::assemble(model, DriftVariant::Zero, 0.0)
    }

    pub fn linear(model: &SpectralModel, zeta2: f64) -> Result<Self> {
        check_zeta2(zeta2)?;
        Ok(Self::assemble(model, DriftVariant::Linear, zeta2))
    }

    /// `F(f) = -φ′(f) + ζ₂ f`. Rejects `φ′` that fails to be nondecreasing on
    /// the certification lattice.
    pub fn nemytskii(model: &SpectralModel, phi_prime: Vec<f64>, zeta2: f64) -> Result<Self> {
        check_zeta2(zeta2)?;
        if phi_prime.iter().any(|c| !c.is_finite()) {
            return Err(invalid("phi_prime", "coefficients must be finite"));
        }
        if let Some(y) = first_decrease(&phi_prime) {
            return Err(invalid(
                "phi_prime",
                format!("phi' must be nondecreasing; it decreases near y = {y}"),
            ));
        }
        Ok(Self::assemble(
            model,
            DriftVariant::NemytskiiGradient { phi_prime },
            zeta2,
        ))
    }

    /// `F = P₃ + ζ₂ I`.
    pub fn kernel_cubic(model: &SpectralModel, kernel: KernelSpec, zeta2: f64) -> Result<Self> {
        check_zeta2(zeta2)?;
        kernel.check_model(model)?;
        Ok(Self::assemble(model, DriftVariant::KernelCubic { kernel }, zeta2))
    }

    /// Builds a drift without the structural checks. Used to construct
    /// counterexamples for the dissipativity diagnostics.
    pub fn unchecked(model: &SpectralModel, variant: DriftVariant, zeta2: f64) -> Self {
        Self::assemble(model, variant, zeta2)
    }

    fn assemble(model: &SpectralModel, variant: DriftVariant, zeta2: f64) -> Self {
        let factor_coeffs = match &variant {
            DriftVariant::KernelCubic {
                kernel: KernelSpec::RankOneProduct { factor },
            } if factor.len() == model.grid_size() => {
                let mut k = vec![0.0; model.n_modes()];
                model.analyze_into(factor, &mut k);
                Some(k)
            }
            _ => None,
        };
        Self {
            variant,
            zeta2,
            zeta: model.max_eigenvalue() + zeta2,
            factor_coeffs,
        }
    }

    pub fn variant(&self) -> &DriftVariant {
        &self.variant
    }

    /// One-sided Lipschitz constant of `F`.
    pub fn zeta2(&self) -> f64 {
        self.zeta2
    }

    /// Dissipativity constant of `A + F`.
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.variant, DriftVariant::Zero)
    }

    /// `F(x)` with scratch space supplied by the caller.
    pub(crate) fn eval_into(
        &self,
        model: &SpectralModel,
        x: &[f64],
        out: &mut [f64],
        grid: &mut Vec<f64>,
    ) {
        match &self.variant {
            DriftVariant::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            DriftVariant::Linear => {
                for (o, xk) in out.iter_mut().zip(x) {
                    *o = self.zeta2 * xk;
                }
            }
            DriftVariant::NemytskiiGradient { phi_prime } => {
                grid.resize(model.grid_size(), 0.0);
                model.synthesize_into(x, grid);
                for g in grid.iter_mut() {
                    *g = -poly_eval(phi_prime, *g);
                }
                model.analyze_into(grid, out);
                for (o, xk) in out.iter_mut().zip(x) {
                    *o += self.zeta2 * xk;
                }
            }
            DriftVariant::KernelCubic { kernel } => {
                if let Some(k) = &self.factor_coeffs {
                    let kx = dot(k, x);
                    let s = -kx * kx * kx;
                    for ((o, kk), xk) in out.iter_mut().zip(k).zip(x) {
                        *o = s * kk + self.zeta2 * xk;
                    }
                } else if let KernelSpec::FullTensor { m, values } = kernel {
                    grid.resize(model.grid_size(), 0.0);
                    model.synthesize_into(x, grid);
                    let p = kernel::tensor_contract(*m, values, grid, grid, grid, model.quadrature_weight());
                    model.analyze_into(&p, out);
                    for (o, xk) in out.iter_mut().zip(x) {
                        *o += self.zeta2 * xk;
                    }
                }
            }
        }
    }

    /// Jacobian `DF(x)` as a dense `N × N` matrix.
    pub fn jacobian(&self, model: &SpectralModel, x: &[f64]) -> Result<DMatrix<f64>> {
        model.check_state(x)?;
        let n = model.n_modes();
        let mut j = DMatrix::<f64>::identity(n, n) * self.zeta2;
        match &self.variant {
            DriftVariant::Zero => j.fill(0.0),
            DriftVariant::Linear => {}
            DriftVariant::NemytskiiGradient { phi_prime } => {
                let dphi = poly_derivative(phi_prime);
                let f = model.to_grid(x)?;
                let w = model.quadrature_weight();
                for (jj, fj) in f.iter().enumerate() {
                    let d = -w * poly_eval(&dphi, *fj);
                    if d == 0.0 {
                        continue;
                    }
                    let row = model.basis_row(jj);
                    for a in 0..n {
                        for b in 0..n {
                            j[(a, b)] += d * row[a] * row[b];
                        }
                    }
                }
            }
            DriftVariant::KernelCubic { kernel } => {
                if let Some(k) = &self.factor_coeffs {
                    let kx = dot(k, x);
                    let s = -3.0 * kx * kx;
                    for a in 0..n {
                        for b in 0..n {
                            j[(a, b)] += s * k[a] * k[b];
                        }
                    }
                } else {
                    for l in 0..n {
                        let e = StateVector::unit(n, l);
                        let col = kernel_apply(model, kernel, &e, x, x)?;
                        for a in 0..n {
                            j[(a, l)] += 3.0 * col[a];
                        }
                    }
                }
            }
        }
        Ok(j)
    }

    /// Pointwise `-φ′` on grid values (Nemytskii drifts only).
    pub fn nemytskii_grid(&self, f: &[f64]) -> Option<Vec<f64>> {
        match &self.variant {
            DriftVariant::NemytskiiGradient { phi_prime } => {
                Some(f.iter().map(|y| -poly_eval(phi_prime, *y)).collect())
            }
            _ => None,
        }
    }
}

fn check_zeta2(zeta2: f64) -> Result<()> {
    if zeta2.is_finite() {
        Ok(())
    } else {
        Err(invalid("zeta2", "must be finite"))
    }
}

/// Coefficients of `F(x)`.
pub fn drift_eval(model: &SpectralModel, drift: &DriftSpec, x: &[f64]) -> Result<StateVector> {
    model.check_state(x)?;
    let mut out = vec![0.0; model.n_modes()];
    let mut grid = Vec::new();
    drift.eval_into(model, x, &mut out, &mut grid);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("drift evaluation at a state of norm {:e}", crate::spectral::norm(x)),
        });
    }
    Ok(StateVector::from_vec_unchecked(out))
}

pub(crate) fn poly_eval(coeffs: &[f64], y: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * y + c)
}

pub(crate) fn poly_derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, c)| i as f64 * c)
        .collect()
}

pub(crate) fn poly_antiderivative(coeffs: &[f64]) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(coeffs.iter().enumerate().map(|(i, c)| c / (i as f64 + 1.0)))
        .collect()
}

/// First lattice point where `φ′` decreases, if any.
pub(crate) fn first_decrease(phi_prime: &[f64]) -> Option<f64> {
    let l = PHI_PRIME_LATTICE_HALF_WIDTH;
    let h = 2.0 * l / (PHI_PRIME_LATTICE_POINTS - 1) as f64;
    let mut prev = poly_eval(phi_prime, -l);
    for i in 1..PHI_PRIME_LATTICE_POINTS {
        let y = -l + i as f64 * h;
        let v = poly_eval(phi_prime, y);
        if v < prev - 1e-12 * prev.abs().max(1.0) {
            return Some(y);
        }
        prev = v;
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipativityReport {
    /// Largest sampled `⟨F(x)-F(y), x-y⟩ / ‖x-y‖²`.
    pub zeta2_hat: f64,
    pub n_pairs: usize,
    pub max_violation_pair: (StateVector, StateVector),
}

/// Empirical one-sided Lipschitz constant of `F` over seeded random pairs.
pub fn dissipativity_estimate(
    model: &SpectralModel,
    drift: &DriftSpec,
    n_pairs: usize,
    sampler_seed: u64,
) -> Result<DissipativityReport> {
    one_sided_lipschitz(model, n_pairs, sampler_seed, |x| drift_eval(model, drift, x))
}

/// Scales cycled through when sampling pairs, so both the small-amplitude
/// and the strongly nonlinear regimes are probed.
const PAIR_SCALES: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

/// The `i`-th sampled pair: even indices are far apart, odd ones are close.
pub(crate) fn sample_pair(n: usize, seed: u64, i: usize) -> (Vec<f64>, Vec<f64>) {
    let s = PAIR_SCALES[i % PAIR_SCALES.len()];
    let stream = NoiseStream::new(seed, i as u64);
    let mut x = vec![0.0; n];
    let mut z = vec![0.0; n];
    stream.at(0).fill_standard_normal(&mut x);
    stream.at(1).fill_standard_normal(&mut z);
    x.iter_mut().for_each(|v| *v *= s);
    let eps = if (i / PAIR_SCALES.len()) % 2 == 0 { s } else { 1e-2 * s };
    let y = x.iter().zip(&z).map(|(a, b)| a + eps * b).collect();
    (x, y)
}

pub(crate) fn one_sided_lipschitz<F>(
    model: &SpectralModel,
    n_pairs: usize,
    seed: u64,
    f: F,
) -> Result<DissipativityReport>
where
    F: Fn(&[f64]) -> Result<StateVector> + Sync,
{
    if n_pairs == 0 {
        return Err(invalid("n_pairs", "need at least one pair"));
    }
    let n = model.n_modes();
    let quotients: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let (x, y) = sample_pair(n, seed, i);
            let fx = f(&x)?;
            let fy = f(&y)?;
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let df: Vec<f64> = fx.iter().zip(fy.iter()).map(|(a, b)| a - b).collect();
            Ok((dot(&df, &d) / dot(&d, &d), x, y))
        })
        .collect::<Result<_>>()?;
    let (q, x, y) = quotients
        .into_iter()
        .fold(None::<(f64, Vec<f64>, Vec<f64>)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .expect("n_pairs >= 1");
    Ok(DissipativityReport {
        zeta2_hat: q,
        n_pairs,
        max_violation_pair: (
            StateVector::from_vec_unchecked(x),
            StateVector::from_vec_unchecked(y),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::ModelSpec;

    fn heat(n: usize) -> SpectralModel {
        SpectralModel::build(&ModelSpec::HeatDirichlet { noise_scale: 1.0 }, n, 3 * n).unwrap()
    }

    fn scalar_model() -> SpectralModel {
        SpectralModel::custom(vec![-1.0], vec![2.0], 2).unwrap()
    }

    #[test]
    fn zero_drift_is_zero() {
        let m = heat(4);
        let d = DriftSpec::zero(&m);
        let out = drift_eval(&m, &d, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nemytskii_pointwise_cube_on_constant_field() {
        let m = heat(4);
        let d = DriftSpec::nemytskii(&m, vec![0.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        let g = d.nemytskii_grid(&vec![2.0; m.grid_size()]).unwrap();
        assert!(g.iter().all(|v| *v == -8.0));
        // Projection of the constant -8 onto e_k is -8·√2·(1-(-1)^k)/(kπ)
        // up to the quadrature error of the interior rule.
        let p = m.from_grid(&g).unwrap();
        let exact = -8.0 * 2f64.sqrt() * 2.0 / std::f64::consts::PI;
        assert!((p[0] - exact).abs() < 0.05 * exact.abs());
        assert!(p[1].abs() < 1e-12);
    }

    #[test]
    fn rank_one_scalar_reduction() {
        let m = scalar_model();
        let k = KernelSpec::rank_one_from_state(&m, &[1.0]).unwrap();
        let d = DriftSpec::kernel_cubic(&m, k, 0.0).unwrap();
        let out = drift_eval(&m, &d, &[1.0]).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-14);
        let out = drift_eval(&m, &d, &[2.0]).unwrap();
        assert!((out[0] + 8.0).abs() < 1e-13);
    }

    #[test]
    fn kernel_cubic_is_homogeneous_of_degree_three() {
        let m = heat(4);
        let k = KernelSpec::rank_one_from_state(&m, &[0.8, -0.2, 0.1, 0.3]).unwrap();
        let KernelSpec::RankOneProduct { factor } = &k else { unreachable!() };
        for kernel in [k.clone(), KernelSpec::expand_rank_one(factor).unwrap()] {
            let d = DriftSpec::kernel_cubic(&m, kernel, 0.0).unwrap();
            let x = [0.3, -1.1, 0.4, 0.9];
            let lx: Vec<f64> = x.iter().map(|v| 1.7 * v).collect();
            let a = drift_eval(&m, &d, &x).unwrap();
            let b = drift_eval(&m, &d, &lx).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((1.7f64.powi(3) * u - v).abs() <= 1e-10 * v.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn rejects_decreasing_phi_prime() {
        let m = heat(2);
        let err = DriftSpec::nemytskii(&m, vec![0.0, 0.0, 0.0, -1.0], 0.0).unwrap_err();
        assert!(err.to_string().contains("nondecreasing"));
        assert!(DriftSpec::nemytskii(&m, vec![0.0, 1.0, 0.0, 1.0], 0.0).is_ok());
        assert!(DriftSpec::linear(&m, f64::NAN).is_err());
    }

    #[test]
    fn zeta_is_top_eigenvalue_plus_zeta2() {
        let m = heat(3);
        let d = DriftSpec::linear(&m, 0.5).unwrap();
        assert!((d.zeta() - (m.max_eigenvalue() + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn overflow_reported_as_non_finite() {
        let m = heat(2);
        let d = DriftSpec::nemytskii(&m, vec![0.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        let err = drift_eval(&m, &d, &[1e120, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = heat(4);
        let k = KernelSpec::rank_one_from_state(&m, &[0.5, 0.2, -0.1, 0.3]).unwrap();
        let KernelSpec::RankOneProduct { factor } = &k else { unreachable!() };
        let drifts = [
            DriftSpec::nemytskii(&m, vec![0.1, 1.0, 0.0, 1.0], -0.3).unwrap(),
            DriftSpec::kernel_cubic(&m, k.clone(), 0.2).unwrap(),
            DriftSpec::kernel_cubic(&m, KernelSpec::expand_rank_one(factor).unwrap(), 0.2).unwrap(),
            DriftSpec::linear(&m, -1.5).unwrap(),
        ];
        let x = [0.4, -0.7, 0.2, 0.9];
        let h = 1e-6;
        for d in &drifts {
            let j = d.jacobian(&m, &x).unwrap();
            for l in 0..4 {
                let mut xp = x;
                let mut xm = x;
                xp[l] += h;
                xm[l] -= h;
                let fp = drift_eval(&m, d, &xp).unwrap();
                let fm = drift_eval(&m, d, &xm).unwrap();
                for a in 0..4 {
                    let fd = (fp[a] - fm[a]) / (2.0 * h);
                    assert!((fd - j[(a, l)]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", j[(a, l)]);
                }
            }
        }
    }

    #[test]
    fn dissipativity_linear_is_exact() {
        let m = heat(4);
        let d = DriftSpec::linear(&m, -1.0).unwrap();
        let r = dissipativity_estimate(&m, &d, 50, 3).unwrap();
        assert!((r.zeta2_hat + 1.0).abs() < 1e-12);
        assert_eq!(r.n_pairs, 50);
    }

    #[test]
    fn dissipativity_cubic_nonpositive_and_seeded() {
        let m = heat(6);
        let d = DriftSpec::nemytskii(&m, vec![0.0, 0.0, 0.0, 1.0], 0.0).unwrap();
        let r = dissipativity_estimate(&m, &d, 400, 11).unwrap();
        assert!(r.zeta2_hat <= 1e-12, "{}", r.zeta2_hat);
        let again = dissipativity_estimate(&m, &d, 400, 11).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn dissipativity_rank_one_kernel_brute_force() {
        let m = heat(4);
        let k = KernelSpec::rank_one_from_state(&m, &[1.0, -0.5, 0.25, 0.5]).unwrap();
        let d = DriftSpec::kernel_cubic(&m, k, 0.0).unwrap();
        let r = dissipativity_estimate(&m, &d, 10_000, 5).unwrap();
        assert!(r.zeta2_hat <= 1e-12, "{}", r.zeta2_hat);
    }

    #[test]
    fn corrupted_sign_is_detected_with_witness() {
        let m = heat(4);
        let bad = DriftSpec::unchecked(
            &m,
            DriftVariant::NemytskiiGradient {
                phi_prime: vec![0.0, 0.0, 0.0, -1.0],
            },
            0.0,
        );
        let r = dissipativity_estimate(&m, &bad, 200, 1).unwrap();
        assert!(r.zeta2_hat > 0.0);
        let (x, y) = &r.max_violation_pair;
        assert_ne!(x, y);
    }

    #[test]
    fn polynomial_helpers() {
        let p = [1.0, 2.0, 0.0, 4.0];
        assert_eq!(poly_eval(&p, 2.0), 1.0 + 4.0 + 32.0);
        assert_eq!(poly_derivative(&p), vec![2.0, 0.0, 12.0]);
        assert_eq!(poly_antiderivative(&[0.0, 0.0, 0.0, 1.0]), vec![0.0, 0.0, 0.0, 0.0, 0.25]);
    }
}
