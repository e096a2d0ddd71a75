//! Rotational invariant estimator of the population eigenvalues.
//!
//! For each sample eigenvalue λ the cleaned value is
//!
//! ```text
//! ξ(λ) = λ / |1 − q + q·λ·g(λ − iν)|²,   g(z) = (1/N) Σ_k 1/(z − λ_k)
//! ```
//!
//! where `g` is the Stieltjes transform (normalized resolvent trace) of the
//! sample spectrum and ν > 0 a small broadening.

use ndarray::Array1;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matcore::{eigen_sym, CorrelationMatrix, SymMatrix};

/// How the imaginary offset ν is chosen at each eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Broadening {
    /// ν = N^{-1/2} for every eigenvalue.
    Fixed,
    /// ν_i = λ_i · N^{-1/2}, i.e. the fixed offset in units of the local scale.
    /// Keeps the smallest eigenvalues from being swamped by the offset when
    /// the spectrum spans several orders of magnitude.
    #[default]
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RieConfig {
    /// Rescale the output to sum to N.
    pub rescale: bool,
    /// Drop the `k = i` pole from `g` when cleaning `λ_i`.
    pub leave_one_out: bool,
    pub broadening: Broadening,
}

impl Default for RieConfig {
    fn default() -> Self {
        Self {
            rescale: true,
            leave_one_out: false,
            broadening: Broadening::Relative,
        }
    }
}

/// `g(z)` evaluated at `z_real − i·z_imag`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StieltjesEval {
    pub z_real: f64,
    pub z_imag: f64,
    pub value: Complex64,
}

/// Cleaned spectrum in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cleaned {
    pub values: Vec<f64>,
    /// Adjacent descents found before the final sort.
    pub inversions: usize,
}

/// `(1/N) Σ_i 1/(z − λ_i)`.
pub fn stieltjes(spectrum: &[f64], z: Complex64) -> Result<Complex64> {
    if spectrum.is_empty() {
        return Err(Error::precondition("empty spectrum"));
    }
    if z.im == 0.0 && spectrum.contains(&z.re) {
        return Err(Error::Pole(z.re));
    }
    let sum: Complex64 = spectrum.iter().map(|&l| (z - l).inv()).sum();
    Ok(sum / spectrum.len() as f64)
}

/// `g` just below the real axis at `x`.
pub fn stieltjes_below(spectrum: &[f64], x: f64, nu: f64) -> Result<StieltjesEval> {
    if !(nu > 0.0) {
        return Err(Error::precondition(format!("broadening {nu} must be positive")));
    }
    let value = stieltjes(spectrum, Complex64::new(x, -nu))?;
    Ok(StieltjesEval {
        z_real: x,
        z_imag: nu,
        value,
    })
}

/// Cleans a sample spectrum for noise ratio `q`.
///
/// The input is sorted before use. A zero eigenvalue maps to zero.
pub fn rie_clean(sample_spectrum: &[f64], q: f64, cfg: &RieConfig) -> Result<Cleaned> {
    let n = sample_spectrum.len();
    if n == 0 {
        return Err(Error::precondition("empty spectrum"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::precondition(format!("noise ratio q = {q} must lie in (0, 1]")));
    }
    if let Some(v) = sample_spectrum.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::precondition(format!(
            "spectrum values must be finite and nonnegative, found {v}"
        )));
    }
    let mut lambda = sample_spectrum.to_vec();
    lambda.sort_by(f64::total_cmp);

    let base_nu = 1.0 / (n as f64).sqrt();
    let inv_n = 1.0 / n as f64;
    let mut xi: Vec<f64> = lambda
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l == 0.0 {
                return 0.0;
            }
            let nu = match cfg.broadening {
                Broadening::Fixed => base_nu,
                Broadening::Relative => l * base_nu,
            };
            let z = Complex64::new(l, -nu);
            let g: Complex64 = lambda
                .iter()
                .enumerate()
                .filter(|&(k, _)| !(cfg.leave_one_out && k == i))
                .map(|(_, &lk)| (z - lk).inv())
                .sum::<Complex64>()
                * inv_n;
            let denom = Complex64::new(1.0 - q, 0.0) + q * l * g;
            l / denom.norm_sqr()
        })
        .collect();

    let inversions = xi.windows(2).filter(|w| w[1] < w[0]).count();
    if cfg.rescale {
        let sum: f64 = xi.iter().sum();
        if sum > 0.0 {
            let scale = n as f64 / sum;
            xi.iter_mut().for_each(|v| *v *= scale);
        }
    }
    xi.sort_by(f64::total_cmp);
    Ok(Cleaned {
        values: xi,
        inversions,
    })
}

/// Rebuilds a correlation matrix from cleaned eigenvalues in the sample
/// eigenbasis: `U diag(cleaned) Uᵗ`, then rescaled to unit diagonal.
///
/// `cleaned[k]` pairs with the k-th smallest sample eigenvalue.
pub fn clean_matrix(s: &CorrelationMatrix, cleaned: &[f64]) -> Result<CorrelationMatrix> {
    let n = s.dim();
    if cleaned.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: cleaned.len(),
        });
    }
    if cleaned.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::precondition("cleaned eigenvalues must be nonnegative"));
    }
    let eig = eigen_sym(s.as_sym())?;
    let u = &eig.eigenvectors;
    let mut x = (u * &Array1::from(cleaned.to_vec())).dot(&u.t());
    let scale: Vec<f64> = x
        .diag()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    for ((i, j), v) in x.indexed_iter_mut() {
        *v *= scale[i] * scale[j];
    }
    for k in 0..n {
        x[[k, k]] = 1.0;
    }
    CorrelationMatrix::from_sym(SymMatrix::symmetrize(x)?)
}
