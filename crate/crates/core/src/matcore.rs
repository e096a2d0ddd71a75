//! Dense symmetric matrices and the spectral primitives everything else is
//! built on: a cyclic Jacobi eigensolver, a tridiagonal QL eigenvalue
//! routine, Haar-distributed orthogonal matrices and the diagonal-fixing
//! Givens rotation used to turn a matrix with a prescribed spectrum into a
//! correlation matrix.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Tolerance on the unit diagonal of a correlation matrix.
pub const DIAGONAL_TOLERANCE: f64 = 1e-8;
/// Smallest eigenvalue still accepted as positive semidefinite.
pub const PSD_TOLERANCE: f64 = 1e-8;

const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const QL_MAX_ITERATIONS: usize = 60;

/// Square matrix that is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Accepts `a` only if it is square, non-empty and exactly symmetric.
    pub fn new(a: Array2<f64>) -> Result<Self> {
        check_square(&a)?;
        let n = a.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if a[[i, j]] != a[[j, i]] {
                    return Err(Error::precondition(format!(
                        "matrix is not symmetric at ({i}, {j}): {} != {}",
                        a[[i, j]],
                        a[[j, i]]
                    )));
                }
            }
        }
        Ok(Self { data: a })
    }

    /// Replaces `a` by `(a + aᵗ) / 2`, mirrored so the result is exactly symmetric.
    pub fn symmetrize(mut a: Array2<f64>) -> Result<Self> {
        check_square(&a)?;
        let n = a.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (a[[i, j]] + a[[j, i]]);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        Ok(Self { data: a })
    }

    /// Builds from `f(i, j)`, evaluated on the upper triangle only.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::precondition("matrix dimension must be at least 1"));
        }
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        Ok(Self { data: a })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diagonal(values: &[f64]) -> Result<Self> {
        Self::from_fn(values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.data.diag().to_vec()
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }
}

fn check_square(a: &Array2<f64>) -> Result<()> {
    if a.nrows() == 0 {
        return Err(Error::precondition("matrix dimension must be at least 1"));
    }
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    Ok(())
}

/// Symmetric positive semidefinite matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    inner: SymMatrix,
}

impl CorrelationMatrix {
    /// Checks the unit diagonal and the `[-1, 1]` entry bound.
    ///
    /// Off-diagonal entries within `1e-10` outside the bound are clamped, and
    /// the diagonal is set to exactly one once it passes the tolerance check.
    /// Positive semidefiniteness costs an eigendecomposition and is checked
    /// separately by [`CorrelationMatrix::check_psd`].
    pub fn from_sym(sym: SymMatrix) -> Result<Self> {
        let n = sym.dim();
        let mut a = sym.into_array();
        for i in 0..n {
            let d = a[[i, i]];
            if !d.is_finite() || (d - 1.0).abs() > DIAGONAL_TOLERANCE {
                return Err(Error::precondition(format!(
                    "diagonal entry {i} is {d}, expected 1"
                )));
            }
            a[[i, i]] = 1.0;
            for j in (i + 1)..n {
                let v = a[[i, j]];
                if !v.is_finite() || v.abs() > 1.0 + 1e-10 {
                    return Err(Error::precondition(format!(
                        "off-diagonal entry ({i}, {j}) = {v} lies outside [-1, 1]"
                    )));
                }
                let v = v.clamp(-1.0, 1.0);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        Ok(Self {
            inner: SymMatrix { data: a },
        })
    }

    /// [`CorrelationMatrix::from_sym`] plus the eigenvalue check.
    pub fn from_sym_checked(sym: SymMatrix) -> Result<Self> {
        let c = Self::from_sym(sym)?;
        c.check_psd()?;
        Ok(c)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Ok(Self {
            inner: SymMatrix::identity(n)?,
        })
    }

    /// Returns the smallest eigenvalue, or an error if it is below `-1e-8`.
    pub fn check_psd(&self) -> Result<f64> {
        let min = eigenvalues_sym(&self.inner)?[0];
        if min < -PSD_TOLERANCE {
            return Err(Error::Singular {
                min_eigenvalue: min,
            });
        }
        Ok(min)
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.inner
    }

    pub fn as_array(&self) -> &Array2<f64> {
        self.inner.as_array()
    }

    pub fn into_sym(self) -> SymMatrix {
        self.inner
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        eigenvalues_sym(&self.inner)
    }
}

/// Eigenvalues in ascending order with matching eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Array2<f64>,
}

impl EigenDecomposition {
    /// `V diag(λ) Vᵗ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.eigenvectors * &ndarray::Array1::from(self.eigenvalues.clone());
        scaled.dot(&self.eigenvectors.t())
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
/// drops below `1e-12` times the Frobenius norm of `a`, for at most 100
/// sweeps.
pub fn eigen_sym(a: &SymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    let mut m: Vec<f64> = a.as_array().iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOLERANCE * total;
    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[i * n + j] * m[i * n + j];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut sweeps = 0;
    let mut off = off_norm(&m);
    while off > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + tau.hypot(1.0))
                } else {
                    -1.0 / (-tau + tau.hypot(1.0))
                };
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                jacobi_rotate(&mut m, &mut v, n, p, q, c, s, t);
            }
        }
        sweeps += 1;
        off = off_norm(&m);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[x * n + x].total_cmp(&m[y * n + y]));
    let eigenvalues = order.iter().map(|&k| m[k * n + k]).collect();
    let eigenvectors = Array2::from_shape_fn((n, n), |(row, col)| v[row * n + order[col]]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

#[allow(clippy::too_many_arguments)]
fn jacobi_rotate(m: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let apq = m[p * n + q];
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[k * n + p];
        let akq = m[k * n + q];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[k * n + p] = new_kp;
        m[p * n + k] = new_kp;
        m[k * n + q] = new_kq;
        m[q * n + k] = new_kq;
    }
    m[p * n + p] -= t * apq;
    m[q * n + q] += t * apq;
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

/// Ascending eigenvalues only, via Householder tridiagonalization followed
/// by implicit QL with Wilkinson shifts. Several times cheaper than
/// [`eigen_sym`]; used wherever eigenvectors are not needed.
pub fn eigenvalues_sym(a: &SymMatrix) -> Result<Vec<f64>> {
    let n = a.dim();
    let mut m: Vec<f64> = a.as_array().iter().copied().collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut m, n, &mut d, &mut e);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(f64::total_cmp);
    Ok(d)
}

fn tridiagonalize(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[i * n + k].abs()).sum();
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j * n + k] * a[i * n + k];
                    }
                    for k in (j + 1)..=l {
                        g += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g / h;
                    f += e[j] * a[i * n + j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        let _ = h;
    }
    e[0] = 0.0;
    for i in 0..n {
        d[i] = a[i * n + i];
    }
}

fn tridiagonal_ql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > QL_MAX_ITERATIONS {
                return Err(Error::NoConvergence {
                    sweeps: iterations,
                    residual: e[l].abs(),
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Haar-distributed random orthogonal matrix.
///
/// Householder QR of a matrix of independent standard normals, with the
/// columns of `Q` flipped so that `R` has a positive diagonal.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::precondition("orthogonal matrix dimension must be at least 1"));
    }
    let mut z = Array2::from_shape_fn((n, n), |_| rng.normal());
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r_signs = vec![1.0; n];

    for k in 0..n {
        let norm = (k..n).map(|i| z[[i, k]] * z[[i, k]]).sum::<f64>().sqrt();
        if k == n - 1 || norm == 0.0 {
            r_signs[k] = if z[[k, k]] < 0.0 { -1.0 } else { 1.0 };
            reflectors.push(Vec::new());
            continue;
        }
        let x0 = z[[k, k]];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| z[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            r_signs[k] = if x0 < 0.0 { -1.0 } else { 1.0 };
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for col in k..n {
            let dot: f64 = v.iter().enumerate().map(|(r, vr)| vr * z[[k + r, col]]).sum();
            for (r, vr) in v.iter().enumerate() {
                z[[k + r, col]] -= 2.0 * vr * dot;
            }
        }
        r_signs[k] = if alpha < 0.0 { -1.0 } else { 1.0 };
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{n-2}, applied to the identity from the right end.
    let mut q = Array2::<f64>::eye(n);
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for col in 0..n {
            let dot: f64 = v.iter().enumerate().map(|(r, vr)| vr * q[[k + r, col]]).sum();
            if dot == 0.0 {
                continue;
            }
            for (r, vr) in v.iter().enumerate() {
                q[[k + r, col]] -= 2.0 * vr * dot;
            }
        }
    }
    for (col, sign) in r_signs.iter().enumerate() {
        if *sign < 0.0 {
            q.column_mut(col).mapv_inplace(|x| -x);
        }
    }
    Ok(q)
}

/// Tangent of the Givens angle that sets entry `(i, i)` to one.
///
/// This is the root `(m_ij + sqrt(m_ij² − (m_ii − 1)(m_jj − 1))) / (m_jj − 1)`;
/// when `m_ij < 0` the same root is evaluated as
/// `(m_ii − 1) / (m_ij − sqrt(...))` to avoid cancellation.
pub(crate) fn givens_tangent(mii: f64, mij: f64, mjj: f64) -> Result<f64> {
    let di = mii - 1.0;
    let dj = mjj - 1.0;
    if dj == 0.0 {
        return Err(Error::precondition("givens rotation needs m[j][j] != 1"));
    }
    let disc = mij * mij - di * dj;
    if disc < 0.0 {
        return Err(Error::precondition(format!(
            "givens discriminant is negative: m_ij^2 = {} < (m_ii - 1)(m_jj - 1) = {}",
            mij * mij,
            di * dj
        )));
    }
    let root = disc.sqrt();
    if mij >= 0.0 {
        Ok((mij + root) / dj)
    } else {
        Ok(di / (mij - root))
    }
}

/// Applies the diagonal-fixing rotation in place on row-major `a`.
pub(crate) fn givens_in_place(a: &mut [f64], n: usize, i: usize, j: usize) -> Result<()> {
    let t = givens_tangent(a[i * n + i], a[i * n + j], a[j * n + j])?;
    let c = 1.0 / t.hypot(1.0);
    let s = c * t;
    for k in 0..n {
        let mi = a[i * n + k];
        let mj = a[j * n + k];
        a[i * n + k] = c * mi - s * mj;
        a[j * n + k] = s * mi + c * mj;
    }
    for k in 0..n {
        let mi = a[k * n + i];
        let mj = a[k * n + j];
        a[k * n + i] = c * mi - s * mj;
        a[k * n + j] = s * mi + c * mj;
    }
    let off = 0.5 * (a[i * n + j] + a[j * n + i]);
    a[i * n + j] = off;
    a[j * n + i] = off;
    a[i * n + i] = 1.0;
    Ok(())
}

/// Rotates `m` in the `(i, j)` plane so that entry `(i, i)` becomes one.
///
/// Requires `m[i][i]` and `m[j][j]` on opposite sides of one.
pub fn givens_fix(m: &SymMatrix, i: usize, j: usize) -> Result<SymMatrix> {
    let n = m.dim();
    if i >= n || j >= n || i == j {
        return Err(Error::precondition(format!(
            "givens indices ({i}, {j}) must be distinct and below {n}"
        )));
    }
    let (mii, mjj) = (m.get(i, i), m.get(j, j));
    if (mii - 1.0) * (mjj - 1.0) >= 0.0 {
        if mjj == 1.0 {
            return Err(Error::precondition("givens rotation needs m[j][j] != 1"));
        }
        return Err(Error::precondition(format!(
            "diagonal entries m[{i}][{i}] = {mii} and m[{j}][{j}] = {mjj} do not straddle 1"
        )));
    }
    let mut a: Vec<f64> = m.as_array().iter().copied().collect();
    givens_in_place(&mut a, n, i, j)?;
    Ok(SymMatrix {
        data: Array2::from_shape_vec((n, n), a).expect("shape preserved"),
    })
}

/// `λ_max / λ_min`; errors when `λ_min <= 0`.
pub fn condition_number(a: &SymMatrix) -> Result<f64> {
    let eig = eigenvalues_sym(a)?;
    let min = eig[0];
    let max = eig[eig.len() - 1];
    if min <= 0.0 {
        return Err(Error::Singular {
            min_eigenvalue: min,
        });
    }
    Ok(max / min)
}

/// Largest absolute entry of `a − b`.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
