//! Random correlation matrix generators.
//!
//! Four families are provided: prescribed spectrum (Haar rotation followed by
//! diagonal-fixing Givens rotations), Gram matrices of random unit vectors,
//! perturbed constant-correlation blocks and perturbed Toeplitz blocks. The
//! spectrum sketch draws the prescribed spectra used for training data.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{givens_in_place, random_orthogonal, CorrelationMatrix, SymMatrix};
use crate::rng::Rng;

/// Diagonal entries closer than this to one are considered fixed.
const GIVENS_CONVERGED: f64 = 1e-10;
/// Entries are only picked for rotation when they are at least this far from one.
const GIVENS_PICK: f64 = 1e-14;
const GROUP_SUM_FLOOR: f64 = 1e-12;
const MAX_BLOCKS: usize = 5;
const RHO_RANGE: (f64, f64) = (0.05, 0.9);
/// Fraction kept of an admissible open interval for ε.
const EPSILON_SHRINK: f64 = 0.99;

/// Nonnegative eigenvalues, ascending, summing to their count.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSketch {
    values: Vec<f64>,
}

impl SpectrumSketch {
    /// Validates the trace constraint (sum equal to the length within
    /// `1e-9 · n`) and nonnegativity, then sorts ascending.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::precondition("spectrum must not be empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::precondition(format!(
                "spectrum values must be finite and nonnegative, found {v}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - n as f64).abs() > 1e-9 * n as f64 {
            return Err(Error::precondition(format!(
                "spectrum sums to {sum}, expected {n}; rescale first"
            )));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    /// Scales `values` to sum to their count before validating.
    pub fn rescaled(values: Vec<f64>) -> Result<Self> {
        let n = values.len() as f64;
        let sum: f64 = values.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::precondition(format!(
                "cannot rescale a spectrum with sum {sum}"
            )));
        }
        Self::new(values.into_iter().map(|v| v * n / sum).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockStructure {
    ConstantBlocks,
    ToeplitzBlocks,
}

/// Parameters of the block generators.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    block_sizes: Vec<usize>,
    block_rhos: Vec<f64>,
    delta: f64,
    epsilon: f64,
    structure: BlockStructure,
}

impl BlockSpec {
    pub fn new(
        block_sizes: Vec<usize>,
        block_rhos: Vec<f64>,
        delta: f64,
        epsilon: f64,
        structure: BlockStructure,
    ) -> Result<Self> {
        if block_sizes.is_empty() || block_sizes.len() != block_rhos.len() {
            return Err(Error::precondition(format!(
                "need one correlation per block: {} sizes, {} correlations",
                block_sizes.len(),
                block_rhos.len()
            )));
        }
        if block_sizes.contains(&0) {
            return Err(Error::precondition("block sizes must be positive"));
        }
        if let Some(r) = block_rhos.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::precondition(format!(
                "block correlation {r} violates 0 <= rho_k < 1"
            )));
        }
        let spec = Self {
            block_sizes,
            block_rhos,
            delta,
            epsilon,
            structure,
        };
        let (rho_min, rho_max) = (spec.rho_min(), spec.rho_max());
        match structure {
            BlockStructure::ConstantBlocks => {
                if !(delta >= 0.0) {
                    return Err(Error::precondition(format!("delta {delta} violates 0 <= delta")));
                }
                // δ only enters between distinct groups.
                if spec.block_sizes.len() > 1 && !(delta < rho_min) {
                    return Err(Error::precondition(format!(
                        "delta {delta} violates delta < rho_min = {rho_min}"
                    )));
                }
                if !(epsilon >= 0.0 && epsilon < 1.0 - rho_max) {
                    return Err(Error::precondition(format!(
                        "epsilon {epsilon} violates 0 <= epsilon < 1 - rho_max = {}",
                        1.0 - rho_max
                    )));
                }
            }
            BlockStructure::ToeplitzBlocks => {
                let upper = (1.0 - rho_max) / (1.0 + rho_max);
                if !(epsilon > 0.0 && epsilon < upper) {
                    return Err(Error::precondition(format!(
                        "epsilon {epsilon} violates 0 < epsilon < (1 - rho_max)/(1 + rho_max) = {upper}"
                    )));
                }
            }
        }
        Ok(spec)
    }

    /// Parameters drawn uniformly over their admissible ranges: `K ~ U{1..5}`
    /// (capped at `n`), sizes by a uniform random composition of `n`,
    /// `ρ_k ~ U[0.05, 0.9)`, `δ ~ U[0, ρ_min)` and ε uniform over 99% of its
    /// admissible interval.
    pub fn random(n: usize, structure: BlockStructure, rng: &mut Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::precondition("dimension must be at least 1"));
        }
        let k = rng.int_inclusive(1, MAX_BLOCKS.min(n) as u64) as usize;
        let mut cuts: Vec<usize> = (1..n).collect();
        // Partial Fisher-Yates: the first k-1 entries become a uniform subset.
        for i in 0..(k - 1) {
            let j = i + rng.index(cuts.len() - i);
            cuts.swap(i, j);
        }
        let mut chosen: Vec<usize> = cuts[..k - 1].to_vec();
        chosen.sort_unstable();
        chosen.push(n);
        let mut sizes = Vec::with_capacity(k);
        let mut prev = 0;
        for c in chosen {
            sizes.push(c - prev);
            prev = c;
        }
        let rhos: Vec<f64> = (0..k)
            .map(|_| rng.uniform_range(RHO_RANGE.0, RHO_RANGE.1))
            .collect();
        let rho_min = rhos.iter().copied().fold(f64::INFINITY, f64::min);
        let rho_max = rhos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let delta = rng.uniform() * rho_min;
        let epsilon = match structure {
            BlockStructure::ConstantBlocks => rng.uniform() * EPSILON_SHRINK * (1.0 - rho_max),
            BlockStructure::ToeplitzBlocks => {
                rng.uniform_open() * EPSILON_SHRINK * (1.0 - rho_max) / (1.0 + rho_max)
            }
        };
        Self::new(sizes, rhos, delta, epsilon, structure)
    }

    pub fn dim(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn block_rhos(&self) -> &[f64] {
        &self.block_rhos
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn structure(&self) -> BlockStructure {
        self.structure
    }

    pub fn rho_min(&self) -> f64 {
        self.block_rhos.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn rho_max(&self) -> f64 {
        self.block_rhos.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Upper bound on the condition number of any matrix built from this spec.
    ///
    /// Constant blocks: `(n(1+ε) + 1) / (1 − ρ_max − ε)`.
    /// Toeplitz blocks: `((1+ρ_max)/(1−ρ_max) + (n−1)ε) / ((1−ρ_max)/(1+ρ_max) − ε)`.
    pub fn condition_bound(&self) -> f64 {
        let n = self.dim() as f64;
        let (rho, eps) = (self.rho_max(), self.epsilon);
        match self.structure {
            BlockStructure::ConstantBlocks => (n * (1.0 + eps) + 1.0) / (1.0 - rho - eps),
            BlockStructure::ToeplitzBlocks => {
                ((1.0 + rho) / (1.0 - rho) + (n - 1.0) * eps) / ((1.0 - rho) / (1.0 + rho) - eps)
            }
        }
    }

    fn group_of(&self) -> Vec<usize> {
        self.block_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &g)| std::iter::repeat_n(k, g))
            .collect()
    }
}

/// Which generator produced a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorTag {
    SpectrumSketch,
    UnitSphere,
    ConstantBlocks,
    ToeplitzBlocks,
}

impl GeneratorTag {
    pub const ALL: [GeneratorTag; 4] = [
        GeneratorTag::SpectrumSketch,
        GeneratorTag::UnitSphere,
        GeneratorTag::ConstantBlocks,
        GeneratorTag::ToeplitzBlocks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorTag::SpectrumSketch => "SpectrumSketch",
            GeneratorTag::UnitSphere => "UnitSphere",
            GeneratorTag::ConstantBlocks => "ConstantBlocks",
            GeneratorTag::ToeplitzBlocks => "ToeplitzBlocks",
        }
    }
}

impl fmt::Display for GeneratorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::precondition(format!("unknown generator tag {s:?}")))
    }
}

/// Probability weights over the four generators, in [`GeneratorTag::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMix {
    weights: [f64; 4],
}

impl MethodMix {
    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::precondition(format!(
                "mix weights must be nonnegative: {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::precondition(format!("mix weights sum to {sum}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn only(tag: GeneratorTag) -> Self {
        let mut weights = [0.0; 4];
        weights[tag as usize] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> [f64; 4] {
        self.weights
    }

    /// One categorical draw.
    pub fn choose(&self, rng: &mut Rng) -> GeneratorTag {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut last = GeneratorTag::SpectrumSketch;
        for (tag, w) in GeneratorTag::ALL.into_iter().zip(self.weights) {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            last = tag;
            if u < acc {
                return tag;
            }
        }
        last
    }
}

impl Default for MethodMix {
    /// Half spectrum sketches, the rest spread over the structured families.
    fn default() -> Self {
        Self {
            weights: [0.5, 0.1, 0.2, 0.2],
        }
    }
}

impl FromStr for MethodMix {
    type Err = Error;

    /// Four comma-separated weights, e.g. `0.5,0.1,0.2,0.2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::precondition(format!("bad mix weight {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let weights: [f64; 4] = parts.try_into().map_err(|p: Vec<f64>| {
            Error::precondition(format!("mix needs 4 weights, got {}", p.len()))
        })?;
        Self::new(weights)
    }
}

impl fmt::Display for MethodMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.weights;
        write!(f, "{},{},{},{}", w[0], w[1], w[2], w[3])
    }
}

/// Correlation matrix with the sketched eigenvalues.
///
/// Builds `M = Qᵗ diag(a) Q` for a Haar `Q`, then repeatedly rotates the
/// first diagonal entry below one against the last above one (or the
/// mirrored pair when that order is reversed) until every diagonal entry is
/// within `1e-10` of one, for at most `10 n²` rotations. The residue is then
/// assigned exactly.
pub fn corr_with_spectrum(sketch: &SpectrumSketch, rng: &mut Rng) -> Result<CorrelationMatrix> {
    let n = sketch.len();
    let total: f64 = sketch.values().iter().sum();
    let eig: Array1<f64> = sketch
        .values()
        .iter()
        .map(|v| v * n as f64 / total)
        .collect();
    let q = random_orthogonal(n, rng)?;
    let scaled = &q * &eig.view().insert_axis(ndarray::Axis(1));
    let m = q.t().dot(&scaled);
    let mut a: Vec<f64> = SymMatrix::symmetrize(m)?.into_array().into_iter().collect();

    let limit = 10 * n * n;
    let mut rotations = 0;
    loop {
        let worst = (0..n).map(|k| (a[k * n + k] - 1.0).abs()).fold(0.0, f64::max);
        if worst <= GIVENS_CONVERGED {
            break;
        }
        if rotations >= limit {
            return Err(Error::GivensNoConvergence {
                rotations,
                worst_deviation: worst,
            });
        }
        let diag: Vec<f64> = (0..n).map(|k| a[k * n + k]).collect();
        let smaller_first = diag.iter().position(|&d| d < 1.0 - GIVENS_PICK);
        let bigger_last = diag.iter().rposition(|&d| d > 1.0 + GIVENS_PICK);
        let (Some(mut i), Some(mut j)) = (smaller_first, bigger_last) else {
            return Err(Error::GivensNoConvergence {
                rotations,
                worst_deviation: worst,
            });
        };
        if i > j {
            i = diag.iter().position(|&d| d > 1.0 + GIVENS_PICK).expect("bigger exists");
            j = diag.iter().rposition(|&d| d < 1.0 - GIVENS_PICK).expect("smaller exists");
        }
        givens_in_place(&mut a, n, i, j)?;
        rotations += 1;
    }
    for k in 0..n {
        a[k * n + k] = 1.0;
    }
    let m = Array2::from_shape_vec((n, n), a).expect("square buffer");
    CorrelationMatrix::from_sym(SymMatrix::symmetrize(m)?)
}

/// Uniform point on the unit sphere in `n` dimensions.
pub(crate) fn unit_vector(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gram matrix of `n` independent uniform unit vectors in `n` dimensions.
fn unit_gram(n: usize, rng: &mut Rng) -> Array2<f64> {
    let mut rows = Array2::zeros((n, n));
    for i in 0..n {
        for (j, x) in unit_vector(n, rng).into_iter().enumerate() {
            rows[[i, j]] = x;
        }
    }
    rows.dot(&rows.t())
}

/// `AAᵗ` for `A` with independent uniform unit rows.
pub fn corr_unit_sphere(n: usize, rng: &mut Rng) -> Result<CorrelationMatrix> {
    if n == 0 {
        return Err(Error::precondition("dimension must be at least 1"));
    }
    let mut g = unit_gram(n, rng);
    for k in 0..n {
        g[[k, k]] = 1.0;
    }
    CorrelationMatrix::from_sym(SymMatrix::symmetrize(g)?)
}

/// Perturbed block correlation matrix.
///
/// With `G_ij = x_iᵗx_j` for random unit vectors, constant blocks give
/// `ρ_k + εG_ij` inside group `k` and `δ + εG_ij` across groups; Toeplitz
/// blocks give `Σ + ε(G − I)` with `Σ_ij = ρ_k^{|i−j|}` inside group `k` and
/// zero across groups.
pub fn corr_blocks(spec: &BlockSpec, rng: &mut Rng) -> Result<CorrelationMatrix> {
    let n = spec.dim();
    let gram = unit_gram(n, rng);
    let group = spec.group_of();
    let eps = spec.epsilon;
    let sym = SymMatrix::from_fn(n, |i, j| {
        if i == j {
            return 1.0;
        }
        let same = group[i] == group[j];
        let base = match spec.structure {
            BlockStructure::ConstantBlocks if same => spec.block_rhos[group[i]],
            BlockStructure::ConstantBlocks => spec.delta,
            BlockStructure::ToeplitzBlocks if same => {
                spec.block_rhos[group[i]].powi((j as i32 - i as i32).abs())
            }
            BlockStructure::ToeplitzBlocks => 0.0,
        };
        base + eps * gram[[i, j]]
    })?;
    CorrelationMatrix::from_sym(sym)
}

/// Draws a random spectrum: a fraction `p ~ U[0,1]` of the variance goes to
/// `l ~ U{1..n}` principal values, the rest to the other `n − l`; each group
/// is uniform on `[0,1]` scaled to its share, and the whole is scaled to sum
/// to `n`.
pub fn sketch_spectrum(n: usize, rng: &mut Rng) -> Result<SpectrumSketch> {
    if n < 2 {
        return Err(Error::precondition("spectrum sketch needs n >= 2"));
    }
    loop {
        let p = rng.uniform();
        let l = rng.int_inclusive(1, n as u64) as usize;
        if let Some(values) = sketch_from_draws(n, p, l, rng) {
            return SpectrumSketch::rescaled(values);
        }
    }
}

/// Steps 3 to 7 with `p` and `l` already drawn. Returns `None` when the
/// concatenated values sum to (nearly) zero, i.e. `l = n` with `p ≈ 0`.
pub(crate) fn sketch_from_draws(n: usize, p: f64, l: usize, rng: &mut Rng) -> Option<Vec<f64>> {
    let mut values = uniform_group(l, p, rng);
    values.extend(uniform_group(n - l, 1.0 - p, rng));
    let total: f64 = values.iter().sum();
    if total < GROUP_SUM_FLOOR {
        return None;
    }
    Some(values.into_iter().map(|v| v * n as f64 / total).collect())
}

fn uniform_group(count: usize, target: f64, rng: &mut Rng) -> Vec<f64> {
    if count == 0 {
        return Vec::new();
    }
    loop {
        let draws: Vec<f64> = (0..count).map(|_| rng.uniform()).collect();
        let sum: f64 = draws.iter().sum();
        if sum >= GROUP_SUM_FLOOR {
            return draws.into_iter().map(|v| v * target / sum).collect();
        }
    }
}

/// Runs the generator for `tag` with randomly drawn parameters.
pub fn generate(tag: GeneratorTag, n: usize, rng: &mut Rng) -> Result<CorrelationMatrix> {
    match tag {
        GeneratorTag::SpectrumSketch => {
            let sketch = if n >= 2 {
                sketch_spectrum(n, rng)?
            } else {
                SpectrumSketch::new(vec![1.0])?
            };
            corr_with_spectrum(&sketch, rng)
        }
        GeneratorTag::UnitSphere => corr_unit_sphere(n, rng),
        GeneratorTag::ConstantBlocks => {
            corr_blocks(&BlockSpec::random(n, BlockStructure::ConstantBlocks, rng)?, rng)
        }
        GeneratorTag::ToeplitzBlocks => {
            corr_blocks(&BlockSpec::random(n, BlockStructure::ToeplitzBlocks, rng)?, rng)
        }
    }
}

/// Picks a generator by `mix` and runs it.
pub fn random_corr(n: usize, mix: &MethodMix, rng: &mut Rng) -> Result<(CorrelationMatrix, GeneratorTag)> {
    let tag = mix.choose(rng);
    Ok((generate(tag, n, rng)?, tag))
}
