//! Noisy sample spectra from a population correlation matrix.
//!
//! Gaussian observations are drawn with the population as covariance, the
//! sample covariance is formed with `1/T` normalization and no centering,
//! and it is rescaled to unit diagonal. The Wishart log-density is provided
//! for checking the sampling law.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gen::{self, GeneratorTag, MethodMix, SpectrumSketch};
use crate::matcore::{eigen_sym, eigenvalues_sym, CorrelationMatrix, EigenDecomposition, SymMatrix};
use crate::rng::Rng;

pub const RECORD_FORMAT_VERSION: u32 = 1;

/// Eigenvalues above this magnitude but negative count as clipped.
const CLIP_REPORT: f64 = 1e-12;

/// Dimension `N`, sample count `T` and their ratio `q = N/T`, with `0 < q <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseRatio {
    n: usize,
    t: usize,
}

impl NoiseRatio {
    pub fn new(n: usize, t: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::precondition("dimension must be at least 1"));
        }
        if t < 2 || t < n {
            return Err(Error::precondition(format!(
                "sample count {t} must be at least max(2, n = {n}) so that q <= 1"
            )));
        }
        Ok(Self { n, t })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn q(&self) -> f64 {
        self.n as f64 / self.t as f64
    }
}

/// One `(sample spectrum, true spectrum, q)` example with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub format_version: u32,
    pub n: usize,
    pub t: usize,
    pub q: f64,
    pub generator_tag: GeneratorTag,
    pub seed: u64,
    /// Negative population eigenvalues were clipped to build the sampling factor.
    #[serde(default)]
    pub clipped: bool,
    pub true_spectrum: Vec<f64>,
    pub sample_spectrum: Vec<f64>,
}

impl SampleRecord {
    pub fn noise(&self) -> Result<NoiseRatio> {
        NoiseRatio::new(self.n, self.t)
    }

    /// Checks lengths, ordering, nonnegativity and the trace constraints
    /// (`1e-9·N` on the true spectrum, `1e-6·N` on the sample spectrum).
    pub fn validate(&self) -> Result<()> {
        let noise = self.noise()?;
        if self.q.to_bits() != noise.q().to_bits() {
            return Err(Error::precondition(format!(
                "record q = {} disagrees with n/t = {}",
                self.q,
                noise.q()
            )));
        }
        let n = self.n as f64;
        for (name, spectrum, tol) in [
            ("true", &self.true_spectrum, 1e-9),
            ("sample", &self.sample_spectrum, 1e-6),
        ] {
            if spectrum.len() != self.n {
                return Err(Error::DimensionMismatch {
                    expected: self.n,
                    found: spectrum.len(),
                });
            }
            if spectrum.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::precondition(format!("{name} spectrum has a negative entry")));
            }
            if spectrum.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::precondition(format!("{name} spectrum is not ascending")));
            }
            let sum: f64 = spectrum.iter().sum();
            if (sum - n).abs() > tol * n {
                return Err(Error::precondition(format!(
                    "{name} spectrum sums to {sum}, expected {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Sample correlation matrix plus whether the population factor was clipped.
#[derive(Debug, Clone)]
pub struct SampledCorrelation {
    pub matrix: CorrelationMatrix,
    pub clipped: bool,
}

/// Draws `t` observations with covariance `c` and returns their sample
/// correlation matrix.
///
/// The sampling factor is `V diag(sqrt(max(λ, 0)))` from the eigenvectors of
/// `c`; negative eigenvalues are clipped and reported.
pub fn sample_correlation(c: &CorrelationMatrix, t: usize, rng: &mut Rng) -> Result<SampledCorrelation> {
    let eig = eigen_sym(c.as_sym())?;
    sample_correlation_with(&eig, t, rng)
}

pub(crate) fn sample_correlation_with(eig: &EigenDecomposition, t: usize, rng: &mut Rng) -> Result<SampledCorrelation> {
    if t < 2 {
        return Err(Error::precondition(format!("need at least 2 samples, got {t}")));
    }
    let n = eig.eigenvalues.len();
    let clipped = eig.eigenvalues.iter().any(|&l| l < -CLIP_REPORT);
    let roots: Array1<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let factor = &eig.eigenvectors * &roots;
    let z = Array2::from_shape_fn((t, n), |_| rng.normal());
    let x = z.dot(&factor.t());
    let cov = x.t().dot(&x) / t as f64;
    let scale: Vec<f64> = cov
        .diag()
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
        .collect();
    let mut s = cov;
    for ((i, j), v) in s.indexed_iter_mut() {
        *v *= scale[i] * scale[j];
    }
    for k in 0..n {
        s[[k, k]] = 1.0;
    }
    let matrix = CorrelationMatrix::from_sym(SymMatrix::symmetrize(s)?)?;
    Ok(SampledCorrelation { matrix, clipped })
}

/// Sample eigenvalues computed from the spectrum alone.
///
/// Draws `t` observations with covariance `diag(spectrum)`, forms the `1/T`
/// sample covariance and rescales it to trace `N`. Because the Wishart law is
/// rotation invariant, these eigenvalues have the same distribution as the
/// trace-normalized sample covariance of any population with this spectrum.
pub fn sample_spectrum_direct(true_spectrum: &SpectrumSketch, t: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(Error::precondition(format!("need at least 2 samples, got {t}")));
    }
    let n = true_spectrum.len();
    let roots: Array1<f64> = true_spectrum.values().iter().map(|v| v.sqrt()).collect();
    let mut x = Array2::from_shape_fn((t, n), |_| rng.normal());
    x *= &roots.view().insert_axis(Axis(0));
    let mut cov = x.t().dot(&x) / t as f64;
    let trace = cov.diag().sum();
    if !(trace > 0.0) {
        return Err(Error::Domain("sample covariance has zero trace".into()));
    }
    cov *= n as f64 / trace;
    let eig = eigenvalues_sym(&SymMatrix::symmetrize(cov)?)?;
    Ok(clip_nonnegative(eig))
}

fn clip_nonnegative(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    v
}

/// Lower Cholesky factor, or a domain error if `a` is not positive definite.
fn cholesky(a: &SymMatrix, name: &str) -> Result<Array2<f64>> {
    let n = a.dim();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return Err(Error::Domain(format!("{name} is not positive definite")));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// `ln Γ_p(a) = p(p−1)/4 · ln π + Σ_{j=1..p} ln Γ(a + (1−j)/2)`.
pub fn ln_multivariate_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=p).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Log-density of `W_p(n, Σ)` at `m`:
/// `−(np/2) ln 2 − ln Γ_p(n/2) − (n/2) ln det Σ − tr(Σ⁻¹M)/2 + ((n−p−1)/2) ln det M`.
pub fn wishart_log_density(m: &SymMatrix, sigma: &SymMatrix, n_dof: usize) -> Result<f64> {
    let p = m.dim();
    if sigma.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: sigma.dim(),
        });
    }
    if n_dof < p {
        return Err(Error::Domain(format!(
            "degrees of freedom {n_dof} must be at least the dimension {p}"
        )));
    }
    let lm = cholesky(m, "M")?;
    let ls = cholesky(sigma, "Sigma")?;
    let log_det = |l: &Array2<f64>| 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();

    // tr(Σ⁻¹M) by forward then backward substitution on each column of M.
    let mut trace = 0.0;
    for col in 0..p {
        let mut y = vec![0.0; p];
        for i in 0..p {
            let mut s = m.get(i, col);
            for k in 0..i {
                s -= ls[[i, k]] * y[k];
            }
            y[i] = s / ls[[i, i]];
        }
        let mut w = vec![0.0; p];
        for i in (0..p).rev() {
            let mut s = y[i];
            for k in (i + 1)..p {
                s -= ls[[k, i]] * w[k];
            }
            w[i] = s / ls[[i, i]];
        }
        trace += w[col];
    }

    let (n, pf) = (n_dof as f64, p as f64);
    Ok(-(n * pf / 2.0) * std::f64::consts::LN_2 - ln_multivariate_gamma(p, n / 2.0) - (n / 2.0) * log_det(&ls)
        - 0.5 * trace
        + ((n - pf - 1.0) / 2.0) * log_det(&lm))
}

/// Builds one training or evaluation record, fully determined by its arguments.
///
/// Spectrum-sketch records go through [`sample_spectrum_direct`]; the other
/// generators build the population matrix and sample from it.
pub fn make_record(n: usize, t: usize, mix: &MethodMix, seed: u64) -> Result<SampleRecord> {
    let noise = NoiseRatio::new(n, t)?;
    let mut rng = Rng::new(seed);
    let tag = mix.choose(&mut rng);
    let (true_spectrum, sample_spectrum, clipped) = match tag {
        GeneratorTag::SpectrumSketch => {
            let sketch = if n >= 2 {
                gen::sketch_spectrum(n, &mut rng)?
            } else {
                SpectrumSketch::new(vec![1.0])?
            };
            let sample = sample_spectrum_direct(&sketch, t, &mut rng)?;
            (sketch.into_vec(), sample, false)
        }
        _ => {
            let c = gen::generate(tag, n, &mut rng)?;
            let eig = eigen_sym(c.as_sym())?;
            let truth = clip_nonnegative(eig.eigenvalues.clone());
            let sampled = sample_correlation_with(&eig, t, &mut rng)?;
            let sample = clip_nonnegative(eigenvalues_sym(sampled.matrix.as_sym())?);
            (truth, sample, sampled.clipped)
        }
    };
    let record = SampleRecord {
        format_version: RECORD_FORMAT_VERSION,
        n,
        t,
        q: noise.q(),
        generator_tag: tag,
        seed,
        clipped,
        true_spectrum,
        sample_spectrum,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// ln Γ(k/2) for integer k ≥ 1 from Γ(1) = 1, Γ(1/2) = √π and Γ(x+1) = xΓ(x).
    fn ln_gamma_half_integer(k: u32) -> f64 {
        let (mut x, mut acc) = if k.is_multiple_of(2) {
            (1.0, 0.0)
        } else {
            (0.5, 0.5 * std::f64::consts::PI.ln())
        };
        while x < k as f64 / 2.0 {
            acc += x.ln();
            x += 1.0;
        }
        acc
    }

    /// Scaled chi-square (gamma with shape n/2, scale 2σ) log-density at m.
    fn gamma_oracle(m: f64, sigma: f64, n: u32) -> f64 {
        let k = n as f64 / 2.0;
        -k * (2.0 * sigma).ln() - ln_gamma_half_integer(n) + (k - 1.0) * m.ln() - m / (2.0 * sigma)
    }

    fn scalar(x: f64) -> SymMatrix {
        SymMatrix::from_diagonal(&[x]).unwrap()
    }

    #[test]
    fn noise_ratio_bounds() {
        assert!(NoiseRatio::new(10, 9).is_err());
        assert!(NoiseRatio::new(0, 9).is_err());
        assert_eq!(NoiseRatio::new(180, 180).unwrap().q(), 1.0);
        assert!((NoiseRatio::new(180, 200).unwrap().q() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn chi_square_two_dof() {
        let v = wishart_log_density(&scalar(1.0), &scalar(1.0), 2).unwrap();
        assert!((v - (-(2f64.ln()) - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn scaled_chi_square_three_dof() {
        let v = wishart_log_density(&scalar(2.0), &scalar(2.0), 3).unwrap();
        assert!((v - gamma_oracle(2.0, 2.0, 3)).abs() < 1e-12);
    }

    #[test]
    fn scalar_reduction_random_triples() {
        let mut rng = Rng::new(404);
        for _ in 0..100 {
            let n = rng.int_inclusive(1, 30) as u32;
            let sigma = rng.uniform_range(0.1, 5.0);
            let m = rng.uniform_range(0.05, 20.0);
            let v = wishart_log_density(&scalar(m), &scalar(sigma), n as usize).unwrap();
            let o = gamma_oracle(m, sigma, n);
            assert!((v - o).abs() <= 1e-10, "n={n} sigma={sigma} m={m}: {v} vs {o}");
        }
    }

    #[test]
    fn scalar_density_has_unit_mass() {
        // Composite Simpson over (0, 50]; the chi-square(4) tail beyond 50 is
        // below 1e-9.
        let steps = 20_000;
        let h = 50.0 / steps as f64;
        let f = |m: f64| {
            if m == 0.0 {
                0.0
            } else {
                wishart_log_density(&scalar(m), &scalar(1.0), 4).unwrap().exp()
            }
        };
        let mut acc = f(0.0) + f(50.0);
        for k in 1..steps {
            acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let mass = acc * h / 3.0;
        assert!((mass - 1.0).abs() <= 1e-4, "{mass}");
    }

    #[test]
    fn wishart_rejects_bad_input() {
        let bad = SymMatrix::from_diagonal(&[1.0, -1.0]).unwrap();
        let id = SymMatrix::identity(2).unwrap();
        assert!(matches!(wishart_log_density(&bad, &id, 3), Err(Error::Domain(_))));
        assert!(matches!(wishart_log_density(&id, &bad, 3), Err(Error::Domain(_))));
        assert!(wishart_log_density(&id, &id, 1).is_err());
    }

    #[test]
    fn wishart_two_dim_matches_independent_factorization() {
        // Diagonal 2x2 case with every term written out by hand.
        let m = SymMatrix::from_diagonal(&[1.5, 0.7]).unwrap();
        let s = SymMatrix::from_diagonal(&[2.0, 0.5]).unwrap();
        let n = 5.0;
        let expected = -(n * 2.0 / 2.0) * 2f64.ln()
            - (0.5 * std::f64::consts::PI.ln() + ln_gamma_half_integer(5) + ln_gamma_half_integer(4))
            - (n / 2.0) * (1.0f64).ln()
            - 0.5 * (1.5 / 2.0 + 0.7 / 0.5)
            + ((n - 3.0) / 2.0) * (1.5f64 * 0.7).ln();
        let v = wishart_log_density(&m, &s, 5).unwrap();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn identity_population_converges() {
        let c = CorrelationMatrix::identity(4).unwrap();
        let s = sample_correlation(&c, 1_000_000, &mut Rng::new(1)).unwrap();
        for i in 0..4 {
            assert_eq!(s.matrix.get(i, i), 1.0);
            for j in 0..4 {
                if i != j {
                    assert!(s.matrix.get(i, j).abs() <= 0.01);
                }
            }
        }
        assert!(!s.clipped);
    }

    #[test]
    fn marchenko_pastur_edge_at_q_one() {
        let c = CorrelationMatrix::identity(180).unwrap();
        let mut rng = Rng::new(55);
        let hits = (0..100)
            .filter(|_| {
                let s = sample_correlation(&c, 180, &mut rng).unwrap();
                *eigenvalues_sym(s.matrix.as_sym()).unwrap().last().unwrap() > 3.0
            })
            .count();
        assert!(hits >= 95, "{hits}");
    }

    #[test]
    fn direct_path_consistent_for_large_t() {
        let s = SpectrumSketch::new(vec![1.0; 4]).unwrap();
        let eig = sample_spectrum_direct(&s, 100_000, &mut Rng::new(3)).unwrap();
        assert!(eig.iter().all(|v| (v - 1.0).abs() < 0.05), "{eig:?}");
        assert!((eig.iter().sum::<f64>() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn records_are_valid_and_deterministic() {
        let mix = MethodMix::new([0.25; 4]).unwrap();
        for seed in 0..40 {
            let r = make_record(40, 80, &mix, seed).unwrap();
            assert_eq!(r.true_spectrum.len(), 40);
            assert_eq!(r.sample_spectrum.len(), 40);
            r.validate().unwrap();
            let again = make_record(40, 80, &mix, seed).unwrap();
            assert_eq!(r, again);
        }
        assert!(make_record(40, 39, &mix, 0).is_err());
    }

    #[test]
    fn records_converge_for_large_t() {
        let mix = MethodMix::new([0.25; 4]).unwrap();
        for seed in 0..8 {
            let r = make_record(10, 100_000, &mix, seed).unwrap();
            let linf = r
                .true_spectrum
                .iter()
                .zip(&r.sample_spectrum)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(linf <= 0.05, "{:?}: {linf}", r.generator_tag);
        }
    }

    #[test]
    fn sample_eigenvalues_are_biased_outward() {
        // Extreme sample eigenvalues overshoot the population ones.
        let n = 40;
        let t = 44; // q ≈ 0.9
        let truth = SpectrumSketch::rescaled((0..n).map(|k| (-(k as f64) / 10.0).exp()).collect()).unwrap();
        let (c_min, c_max) = (truth.values()[0], truth.values()[n - 1]);
        let mut rng = Rng::new(77);
        let (mut lo, mut hi) = (0.0, 0.0);
        for _ in 0..200 {
            let s = sample_spectrum_direct(&truth, t, &mut rng).unwrap();
            lo += s[0];
            hi += s[n - 1];
        }
        assert!(hi / 200.0 > c_max);
        assert!(lo / 200.0 < c_min);
    }
}
