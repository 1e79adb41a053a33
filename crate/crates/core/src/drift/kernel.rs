//! Symmetric trilinear kernels for the cubic polynomial drift
//! `P₃(f)(ξ) = ∫∫∫ K(ξ₁,ξ₂,ξ₃,ξ) f(ξ₁) f(ξ₂) f(ξ₃)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::spectral::{GridField, SpectralModel, StateVector};

const TENSOR_MAGIC: &[u8; 4] = b"KTEN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", deny_unknown_fields)]
pub enum KernelSpec {
    /// `K(ξ₁,ξ₂,ξ₃,ξ) = -k(ξ₁)k(ξ₂)k(ξ₃)k(ξ)`.
    RankOneProduct { factor: GridField },
    /// Dense row-major `M⁴` tensor, index order `(ξ₁, ξ₂, ξ₃, ξ)`.
    FullTensor { m: usize, values: Vec<f64> },
}

impl KernelSpec {
    pub fn rank_one(factor: GridField) -> Self {
        KernelSpec::RankOneProduct { factor }
    }

    /// Rank-one kernel whose factor is the grid image of a coefficient vector.
    pub fn rank_one_from_state(model: &SpectralModel, k: &[f64]) -> Result<Self> {
        Ok(KernelSpec::RankOneProduct {
            factor: model.to_grid(k)?,
        })
    }

    /// Validates symmetry under argument permutation and nonpositivity.
    pub fn full_tensor(m: usize, values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| **v > 0.0) {
            return Err(invalid("kernel", format!("tensor must be nonpositive, found {v}")));
        }
        Self::symmetric_tensor(m, values)
    }

    fn symmetric_tensor(m: usize, values: Vec<f64>) -> Result<Self> {
        check_len("kernel tensor", m.pow(4), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel", "tensor entries must be finite"));
        }
        let idx = |a: usize, b: usize, c: usize, d: usize| ((a * m + b) * m + c) * m + d;
        // The adjacent transpositions generate every permutation of four slots.
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        let v = values[idx(a, b, c, d)];
                        let swaps = [idx(b, a, c, d), idx(a, c, b, d), idx(a, b, d, c)];
                        for s in swaps {
                            if (values[s] - v).abs() > 1e-12 * v.abs().max(1.0) {
                                return Err(invalid(
                                    "kernel",
                                    format!("tensor is not symmetric at ({a},{b},{c},{d})"),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(KernelSpec::FullTensor { m, values })
    }

    /// Dense tensor equal to the rank-one kernel with the given factor.
    ///
    /// A sign-changing factor gives entries of both signs; the sign condition
    /// `⟨V(h,x,x),h⟩ = -⟨k,h⟩²⟨k,x⟩² ≤ 0` holds regardless, so only symmetry
    /// is validated here.
    pub fn expand_rank_one(factor: &[f64]) -> Result<Self> {
        let m = factor.len();
        let mut values = Vec::with_capacity(m.pow(4));
        for a in factor {
            for b in factor {
                for c in factor {
                    for d in factor {
                        values.push(-a * b * c * d);
                    }
                }
            }
        }
        Self::symmetric_tensor(m, values)
    }

    pub(crate) fn check_model(&self, model: &SpectralModel) -> Result<()> {
        match self {
            KernelSpec::RankOneProduct { factor } => {
                check_len("kernel factor", model.grid_size(), factor.len())
            }
            KernelSpec::FullTensor { m, .. } => check_len("kernel tensor side", model.grid_size(), *m),
        }
    }

    /// Reads a tensor file: `"KTEN"`, `u32` side `M`, `u64` payload byte
    /// length, then `M⁴` little-endian `f64` in row-major order.
    pub fn read_tensor_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::Parse(format!("{}: missing KTEN header", path.display())));
        }
        let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload = &bytes[16..];
        if payload.len() != len || len != m.pow(4) * 8 {
            return Err(Error::Parse(format!(
                "{}: payload length {} does not match header (M = {m}, declared {len})",
                path.display(),
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::full_tensor(m, values)
    }

    pub fn write_tensor_file(&self, path: &Path) -> Result<()> {
        let KernelSpec::FullTensor { m, values } = self else {
            return Err(invalid("kernel", "only full tensors have a binary file form"));
        };
        let mut out = Vec::with_capacity(16 + values.len() * 8);
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(*m as u32).to_le_bytes());
        out.extend_from_slice(&((values.len() * 8) as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }
}

/// Coefficients of `V(f, g, h)`.
pub fn kernel_apply(
    model: &SpectralModel,
    kernel: &KernelSpec,
    f: &[f64],
    g: &[f64],
    h: &[f64],
) -> Result<StateVector> {
    kernel.check_model(model)?;
    for v in [f, g, h] {
        model.check_state(v)?;
    }
    let mut out = vec![0.0; model.n_modes()];
    match kernel {
        KernelSpec::RankOneProduct { factor } => {
            let kf = rank_one_projection(model, factor, f);
            let kg = rank_one_projection(model, factor, g);
            let kh = rank_one_projection(model, factor, h);
            model.analyze_into(factor, &mut out);
            let scale = -kf * kg * kh;
            out.iter_mut().for_each(|o| *o *= scale);
        }
        KernelSpec::FullTensor { m, values } => {
            let fg = model.to_grid(f)?;
            let gg = model.to_grid(g)?;
            let hg = model.to_grid(h)?;
            let grid = tensor_contract(*m, values, &fg, &gg, &hg, model.quadrature_weight());
            model.analyze_into(&grid, &mut out);
        }
    }
    Ok(StateVector::from_vec_unchecked(out))
}

/// `⟨k, f⟩` by grid quadrature.
pub(crate) fn rank_one_projection(model: &SpectralModel, factor: &[f64], f: &[f64]) -> f64 {
    let mut grid = vec![0.0; model.grid_size()];
    model.synthesize_into(f, &mut grid);
    model.grid_inner(factor, &grid)
}

pub(crate) fn tensor_contract(m: usize, values: &[f64], f: &[f64], g: &[f64], h: &[f64], w: f64) -> Vec<f64> {
    let mut out = vec![0.0; m];
    let w3 = w * w * w;
    for a in 0..m {
        for b in 0..m {
            let fab = f[a] * g[b];
            if fab == 0.0 {
                continue;
            }
            for c in 0..m {
                let coef = fab * h[c] * w3;
                if coef == 0.0 {
                    continue;
                }
                let base = ((a * m + b) * m + c) * m;
                for (o, k) in out.iter_mut().zip(&values[base..base + m]) {
                    *o += coef * k;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;

    fn model8() -> SpectralModel {
        SpectralModel::custom(vec![-1.0, -4.0, -9.0, -16.0], vec![1.0; 4], 8).unwrap()
    }

    fn random_state(seed: u64, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        NoiseStream::new(seed, 0).fill_standard_normal(&mut v);
        v
    }

    #[test]
    fn zero_argument_gives_zero() {
        let m = model8();
        let k = KernelSpec::rank_one_from_state(&m, &[1.0, 0.5, 0.0, -0.2]).unwrap();
        let x = random_state(1, 4);
        let z = vec![0.0; 4];
        let out = kernel_apply(&m, &k, &x, &z, &x).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rank_one_matches_dense_expansion() {
        let m = model8();
        let kcoef = [0.7, -0.3, 0.2, 0.1];
        let rank_one = KernelSpec::rank_one_from_state(&m, &kcoef).unwrap();
        let KernelSpec::RankOneProduct { factor } = &rank_one else { unreachable!() };
        let dense = KernelSpec::expand_rank_one(factor).unwrap();
        let (f, g, h) = (random_state(2, 4), random_state(3, 4), random_state(4, 4));
        let a = kernel_apply(&m, &rank_one, &f, &g, &h).unwrap();
        let b = kernel_apply(&m, &dense, &f, &g, &h).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
        // Separable identity: V(f,g,h) = -⟨k,f⟩⟨k,g⟩⟨k,h⟩ k, and ⟨k,f⟩ = k·f
        // for band-limited fields.
        let d = |u: &[f64]| kcoef.iter().zip(u).map(|(p, q)| p * q).sum::<f64>();
        let s = -d(&f) * d(&g) * d(&h);
        for (x, kc) in a.iter().zip(kcoef) {
            assert!((x - s * kc).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_symmetry() {
        let m = model8();
        let KernelSpec::RankOneProduct { factor } =
            KernelSpec::rank_one_from_state(&m, &[0.5, 0.5, -0.5, 0.25]).unwrap()
        else {
            unreachable!()
        };
        let dense = KernelSpec::expand_rank_one(&factor).unwrap();
        let (f, g, h) = (random_state(5, 4), random_state(6, 4), random_state(7, 4));
        let a = kernel_apply(&m, &dense, &f, &g, &h).unwrap();
        let b = kernel_apply(&m, &dense, &h, &g, &f).unwrap();
        let c = kernel_apply(&m, &dense, &g, &h, &f).unwrap();
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-12);
            assert!((a[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_asymmetric_and_positive_tensors() {
        let m = 2;
        let mut values = vec![-1.0; 16];
        values[1] = -2.0; // (0,0,0,1) differs from (1,0,0,0)
        assert!(KernelSpec::full_tensor(m, values).is_err());
        let mut values = vec![-1.0; 16];
        values[5] = 0.5;
        assert!(KernelSpec::full_tensor(m, values).is_err());
        assert!(KernelSpec::full_tensor(m, vec![-1.0; 15]).is_err());
        assert!(KernelSpec::full_tensor(m, vec![-1.0; 16]).is_ok());
    }

    #[test]
    fn tensor_file_round_trip_and_header_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.bin");
        let k = KernelSpec::expand_rank_one(&[0.5, 1.0, 0.25]).unwrap();
        k.write_tensor_file(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"KTEN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 81 * 8);
        assert_eq!(KernelSpec::read_tensor_file(&path).unwrap(), k);

        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(KernelSpec::read_tensor_file(&path).is_err());
        fs::write(&path, b"NOPE").unwrap();
        assert!(KernelSpec::read_tensor_file(&path).is_err());
    }
}
