//! Vector decomposition of coupling matrices, orbit classification by rank,
//! evenly-distributed sign-pattern vector sets, and the stationarity
//! conditions that single out the ordinary system.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::matcore::{cholesky_psd, pair_index, pair_iter, CouplingMatrix, SquareMatrix};
use crate::{CoreError, Result};

/// Relative tolerance for eigenvalue-multiplicity decisions in rank
/// classification.
pub const RANK_EIG_TOL: f64 = 1e-8;

/// N vectors of equal length in C^r whose pairwise products encode a
/// coupling matrix via `i(ε_i|ε_j) = source_sign · L_ij`.
#[derive(Debug, Clone)]
pub struct EpsilonSet {
    /// r × N; column i is `|ε_i)`.
    pub vectors: DMatrix<Complex64>,
    /// Common squared length `(ε_i|ε_i)`.
    pub norm_sq: f64,
    /// +1 when the products reproduce L itself, -1 for its time reversal
    /// (the minimal-span factorization picks whichever extreme eigenvalue
    /// has the higher multiplicity, and the top side encodes -L).
    pub source_sign: i32,
}

impl EpsilonSet {
    pub fn rank(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    /// Gram matrix `(ε_i|ε_j)`.
    pub fn gram(&self) -> DMatrix<Complex64> {
        self.vectors.adjoint() * &self.vectors
    }

    /// The coupling matrix these vectors represent: `i(ε_i|ε_j)` off the
    /// diagonal.
    pub fn coupling(&self) -> Result<CouplingMatrix> {
        let g = self.gram();
        let n = self.len();
        let upper: Vec<Complex64> = pair_iter(n)
            .map(|(i, j)| Complex64::new(0.0, 1.0) * g[(i, j)])
            .collect();
        CouplingMatrix::from_upper(n, &upper)
    }
}

fn eigvals_ascending(h: &DMatrix<Complex64>) -> Vec<f64> {
    let mut v: Vec<f64> = h
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn extreme_multiplicities(vals: &[f64]) -> (usize, usize, f64) {
    let n = vals.len();
    let diam = (vals[n - 1] - vals[0]).max(f64::MIN_POSITIVE);
    let tol = RANK_EIG_TOL * diam;
    let mult_min = vals.iter().take_while(|&&v| v - vals[0] < tol).count();
    let mult_max = vals
        .iter()
        .rev()
        .take_while(|&&v| vals[n - 1] - v < tol)
        .count();
    (mult_min, mult_max, tol)
}

/// Minimal-span vector decomposition: shifts `±iL` by the extreme eigenvalue
/// magnitude on whichever side has the higher multiplicity and factors the
/// resulting positive semidefinite matrix.
pub fn decompose(l: &CouplingMatrix) -> Result<EpsilonSet> {
    let n = l.dim();
    let k = l.to_hermitian(); // K = -iL
    let vals = eigvals_ascending(&k);
    let (mult_min, mult_max, _) = extreme_multiplicities(&vals);
    // the bottom shift K - κ_min·1 encodes L itself; the top shift
    // κ_max·1 - K encodes -L. Prefer the bottom on ties.
    let (mat, shift, sign) = if mult_max > mult_min {
        (k.map(|z| -z), vals[n - 1], -1)
    } else {
        (k, -vals[0], 1)
    };
    let shifted = SquareMatrix::hermitian(mat + crate::matcore::identity(n).scale(shift))?;
    let pivot_tol = RANK_EIG_TOL * (n as f64) * shift.abs().max(1.0);
    let mut factor = cholesky_psd(&shifted, pivot_tol)?;
    factor.shift = shift;
    Ok(EpsilonSet {
        vectors: factor.cols,
        norm_sq: shift,
        source_sign: sign,
    })
}

/// Orbit rank: `N - max multiplicity of the extreme eigenvalues of -iL`,
/// cross-checked against the Cholesky factor rank of the shifted matrix.
pub fn rank_of(l: &CouplingMatrix) -> Result<usize> {
    let n = l.dim();
    let vals = eigvals_ascending(&l.to_hermitian());
    let (mult_min, mult_max, _) = extreme_multiplicities(&vals);
    let from_eigen = n - mult_min.max(mult_max);
    let from_cholesky = decompose(l)?.rank();
    if from_eigen != from_cholesky {
        return Err(CoreError::RankMismatch {
            from_eigen,
            from_cholesky,
        });
    }
    Ok(from_eigen)
}

/// Gauge-fixed ± sign pattern on the pairs: `L_ij = i g (-1)^{n_ij}` with the
/// whole first row fixed to `+`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignPattern {
    n: usize,
    /// Strict-upper-triangle bits in row-major pair order; `true` means the
    /// `-` sign. Entries `(0, j)` are always `false`.
    bits: Vec<bool>,
}

impl SignPattern {
    pub fn new(n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * (n - 1) / 2 {
            return Err(CoreError::DimensionMismatch {
                expected: n * (n - 1) / 2,
                got: bits.len(),
            });
        }
        for j in 1..n {
            if bits[pair_index(0, j, n)] {
                return Err(CoreError::InvalidInput(
                    "sign pattern is not gauge-fixed: first row must be +".into(),
                ));
            }
        }
        Ok(Self { n, bits })
    }

    /// Gauge-fixes an arbitrary bit assignment by flipping vertices so the
    /// first row becomes all `+` (the unique representative of its class).
    pub fn gauge_fixed_from(n: usize, raw: &[bool]) -> Result<Self> {
        if raw.len() != n * (n - 1) / 2 {
            return Err(CoreError::DimensionMismatch {
                expected: n * (n - 1) / 2,
                got: raw.len(),
            });
        }
        let mut flips = vec![false; n];
        for j in 1..n {
            flips[j] = raw[pair_index(0, j, n)];
        }
        let bits = pair_iter(n)
            .map(|(i, j)| raw[pair_index(i, j, n)] ^ flips[i] ^ flips[j])
            .collect();
        Self::new(n, bits)
    }

    /// Decodes the free bits (pairs not touching the first row) from an
    /// integer code; the enumeration order is row-major over pairs with
    /// `1 ≤ i < j`.
    pub fn from_code(n: usize, code: u64) -> Self {
        let mut bits = vec![false; n * (n - 1) / 2];
        let mut b = 0;
        for i in 1..n {
            for j in i + 1..n {
                bits[pair_index(i, j, n)] = (code >> b) & 1 == 1;
                b += 1;
            }
        }
        Self { n, bits }
    }

    pub fn free_bit_count(n: usize) -> u32 {
        ((n - 1) * (n - 2) / 2) as u32
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        debug_assert!(i != j);
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.bits[pair_index(a, b, self.n)]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// `L_ij = i g (-1)^{n_ij}`.
    pub fn coupling(&self, g: f64) -> CouplingMatrix {
        let upper: Vec<Complex64> = pair_iter(self.n)
            .map(|(i, j)| Complex64::new(0.0, if self.bit(i, j) { -g } else { g }))
            .collect();
        CouplingMatrix::from_upper(self.n, &upper).expect("pattern coupling is valid")
    }

    /// The real symmetric partner `K = -iL`: entries `±g`, zero diagonal.
    pub fn seidel(&self, g: f64) -> DMatrix<f64> {
        let n = self.n;
        let mut k = DMatrix::<f64>::zeros(n, n);
        for (i, j) in pair_iter(n) {
            let v = if self.bit(i, j) { -g } else { g };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k
    }
}

/// Iterative column construction of N real unit vectors with
/// `(e_i|e_j) = g (-1)^{n_ij}`; the non-pivoted Cholesky of the pattern Gram
/// matrix. Zero pivots flatten the packing into fewer dimensions; a negative
/// radicand means the pattern cannot be realized at this `g`.
pub fn build_even_vectors(n: usize, g: f64, pattern: &SignPattern) -> Result<EpsilonSet> {
    if !(0.0 < g && g < 1.0) {
        return Err(CoreError::InvalidInput("g must lie in (0, 1)".into()));
    }
    if pattern.dim() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: pattern.dim(),
        });
    }
    let gram = |i: usize, j: usize| -> f64 {
        if i == j {
            1.0
        } else if pattern.bit(i, j) {
            -g
        } else {
            g
        }
    };
    let tol = 1e-10;
    let mut e = DMatrix::<f64>::zeros(n, n); // component a of vector k at (a, k)
    let mut pivots: Vec<usize> = Vec::new(); // rows that carry a nonzero pivot
    for k in 0..n {
        // components along the established pivot rows
        for (row, &l) in pivots.clone().iter().enumerate() {
            let mut acc = gram(l, k);
            for r in 0..row {
                acc -= e[(r, l)] * e[(r, k)];
            }
            e[(row, k)] = acc / e[(row, l)];
        }
        let radicand = 1.0
            - (0..pivots.len())
                .map(|r| e[(r, k)] * e[(r, k)])
                .sum::<f64>();
        if radicand < -tol {
            return Err(CoreError::InfeasiblePattern(format!(
                "column {k} radicand {radicand:.3e} < 0 at g = {g}"
            )));
        }
        if radicand > tol {
            e[(pivots.len(), k)] = radicand.sqrt();
            pivots.push(k);
        }
        // radicand ≈ 0: the vector lies in the span built so far
    }
    let r = pivots.len();
    let vectors = DMatrix::from_fn(r, n, |a, k| Complex64::new(e[(a, k)], 0.0));
    // consistency: the realized Gram must reproduce the pattern
    let gm = vectors.adjoint() * &vectors;
    for i in 0..n {
        for j in 0..n {
            if (gm[(i, j)].re - gram(i, j)).abs() > 1e-8 || gm[(i, j)].im.abs() > 1e-12 {
                return Err(CoreError::InfeasiblePattern(format!(
                    "pattern Gram not realizable at g = {g} (entry ({i},{j}))"
                )));
            }
        }
    }
    Ok(EpsilonSet {
        vectors,
        norm_sq: 1.0,
        source_sign: 1,
    })
}

/// How a rank survey was conducted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanStrategy {
    Exhaustive {
        patterns: u64,
    },
    /// Uniform sample of gauge-fixed patterns. The all-plus pattern (the
    /// one-dimensional class) is always included and flagged here, since a
    /// uniform draw essentially never lands on a single specific pattern.
    Sampled {
        samples: u64,
        seed: u64,
        includes_zero_pattern: bool,
    },
}

/// Result of the rank survey over sign patterns at fixed g.
#[derive(Debug, Clone)]
pub struct RankScan {
    pub n: usize,
    pub g: f64,
    pub strategy: ScanStrategy,
    pub ranks: BTreeSet<usize>,
    pub counts: BTreeMap<usize, u64>,
    /// Lowest-code witness pattern per rank.
    pub witnesses: BTreeMap<usize, SignPattern>,
}

/// Seed used by the sampled branch of [`possible_ranks`].
pub const RANK_SCAN_SEED: u64 = 0x0c41_0c41;

/// Number of random patterns drawn for N in {9, 10, 11}.
pub const RANK_SCAN_SAMPLES: u64 = 1_000_000;

fn rank_of_seidel(k: &DMatrix<f64>) -> Result<usize> {
    let n = k.nrows();
    let mut vals: Vec<f64> = k.clone().symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mult_min, mult_max, _) = extreme_multiplicities(&vals);
    let from_eigen = n - mult_min.max(mult_max);

    // pivoted Cholesky cross-check on the better-conditioned shift
    let (mat, shift) = if mult_max > mult_min {
        (k.map(|x| -x), vals[n - 1])
    } else {
        (k.clone(), -vals[0])
    };
    let shifted = SquareMatrix::real_symmetric(mat + DMatrix::identity(n, n).scale(shift))?;
    let pivot_tol = RANK_EIG_TOL * (n as f64) * shift.abs().max(1.0);
    let from_cholesky = cholesky_psd(&shifted, pivot_tol)?.rank;
    if from_eigen != from_cholesky {
        return Err(CoreError::RankMismatch {
            from_eigen,
            from_cholesky,
        });
    }
    Ok(from_eigen)
}

#[derive(Default)]
struct ScanAccum {
    counts: BTreeMap<usize, u64>,
    witnesses: BTreeMap<usize, u64>, // rank -> lowest code
}

impl ScanAccum {
    fn add(&mut self, rank: usize, code: u64) {
        *self.counts.entry(rank).or_insert(0) += 1;
        self.witnesses
            .entry(rank)
            .and_modify(|c| *c = (*c).min(code))
            .or_insert(code);
    }

    fn merge(mut self, other: ScanAccum) -> ScanAccum {
        for (r, c) in other.counts {
            *self.counts.entry(r).or_insert(0) += c;
        }
        for (r, code) in other.witnesses {
            self.witnesses
                .entry(r)
                .and_modify(|c| *c = (*c).min(code))
                .or_insert(code);
        }
        self
    }
}

/// Surveys the ranks of sign-pattern couplings at g = 1/2: exhaustive over
/// the gauge-fixed patterns for N ≤ 8, a seeded uniform sample of 10^6
/// patterns (plus the all-plus pattern) for N in {9, 10, 11}.
///
/// The rank of a pattern coupling does not depend on g in (0, 1): the
/// partner matrix scales linearly with g, which leaves eigenvalue
/// multiplicities untouched.
pub fn possible_ranks(n: usize) -> Result<RankScan> {
    possible_ranks_with(n, RANK_SCAN_SAMPLES, RANK_SCAN_SEED)
}

/// As [`possible_ranks`] with an explicit sample budget and seed for the
/// sampled branch.
pub fn possible_ranks_with(n: usize, samples: u64, seed: u64) -> Result<RankScan> {
    if !(3..=11).contains(&n) {
        return Err(CoreError::InvalidInput(format!(
            "rank survey covers 3 ≤ N ≤ 11, got {n}"
        )));
    }
    let g = 0.5;
    let bits = SignPattern::free_bit_count(n);
    let rank_of_code =
        |code: u64| -> Result<usize> { rank_of_seidel(&SignPattern::from_code(n, code).seidel(g)) };

    let (accum, strategy) = if n <= 8 {
        let total: u64 = 1 << bits;
        let accum = (0..total)
            .into_par_iter()
            .try_fold(ScanAccum::default, |mut acc, code| -> Result<ScanAccum> {
                acc.add(rank_of_code(code)?, code);
                Ok(acc)
            })
            .try_reduce(ScanAccum::default, |a, b| Ok(a.merge(b)))?;
        (accum, ScanStrategy::Exhaustive { patterns: total })
    } else {
        let accum = (0..samples)
            .into_par_iter()
            .try_fold(ScanAccum::default, |mut acc, k| -> Result<ScanAccum> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k);
                let code = rng.gen::<u64>() & ((1u64 << bits) - 1);
                acc.add(rank_of_code(code)?, code);
                Ok(acc)
            })
            .try_reduce(ScanAccum::default, |a, b| Ok(a.merge(b)))?;
        let mut accum = accum;
        accum.add(rank_of_code(0)?, 0);
        (
            accum,
            ScanStrategy::Sampled {
                samples,
                seed,
                includes_zero_pattern: true,
            },
        )
    };

    let ranks: BTreeSet<usize> = accum.counts.keys().copied().collect();
    let witnesses = accum
        .witnesses
        .into_iter()
        .map(|(r, code)| (r, SignPattern::from_code(n, code)))
        .collect();
    Ok(RankScan {
        n,
        g,
        strategy,
        ranks,
        counts: accum.counts,
        witnesses,
    })
}

/// First stationarity condition: `Im((ε_i|ε_k)(ε_k|ε_j)(ε_j|ε_i)) = 0` for
/// all triples — satisfied exactly when the vectors are all parallel or all
/// gauge-equivalent to real.
pub fn first_derivative_stationary(eps: &EpsilonSet) -> bool {
    let g = eps.gram();
    let n = eps.len();
    let scale = eps.norm_sq.max(1.0);
    let tol = 1e-10 * scale * scale * scale;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let prod = g[(i, k)] * g[(k, j)] * g[(j, i)];
                if prod.im.abs() > tol {
                    return false;
                }
            }
        }
    }
    true
}

/// Second stationarity condition on sign patterns (N ≥ 4):
/// `n_ij + n_kl ≡ n_ik + n_jl ≡ n_il + n_kj (mod 2)` for every 4-subset —
/// equivalently, all cyclic sums agree, which is the ordinary-CM class and
/// its time reversal. Vacuous for N = 3.
pub fn second_derivative_stationary(pattern: &SignPattern) -> bool {
    let n = pattern.dim();
    let b = |i: usize, j: usize| pattern.bit(i, j) as u8;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let a = (b(i, j) + b(k, l)) % 2;
                    let c = (b(i, k) + b(j, l)) % 2;
                    let d = (b(i, l) + b(k, j)) % 2;
                    if a != c || c != d {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Result of translating an (E, F) pair into a coupling matrix.
#[derive(Debug, Clone)]
pub enum FeTranslation {
    /// `L = i(FE - g·1)` with the common diagonal g.
    Coupling { l: CouplingMatrix, g: f64 },
    /// Unequal diagonal products obstruct the translation; the spread
    /// `max_i c_i - min_i c_i` is reported.
    UnequalDiagonals { spread: f64 },
}

/// Translates Hermitian `FE` into a coupling matrix when all diagonal
/// products agree.
pub fn fe_to_coupling(
    e: &DMatrix<Complex64>,
    f: &DMatrix<Complex64>,
    tol: f64,
) -> Result<FeTranslation> {
    let g = f * e;
    let res = crate::matcore::hermiticity_residual(&g);
    if res > 1e-10 * (1.0 + crate::matcore::max_abs(&g)) {
        return Err(CoreError::ClassViolation(format!(
            "F·E is not Hermitian (residual {res:.3e})"
        )));
    }
    let n = g.nrows();
    let diag: Vec<f64> = (0..n).map(|i| g[(i, i)].re).collect();
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if dmax - dmin > tol {
        return Ok(FeTranslation::UnequalDiagonals {
            spread: dmax - dmin,
        });
    }
    let gval = 0.5 * (dmin + dmax);
    let upper: Vec<Complex64> = pair_iter(n)
        .map(|(i, j)| Complex64::new(0.0, 1.0) * g[(i, j)])
        .collect();
    Ok(FeTranslation::Coupling {
        l: CouplingMatrix::from_upper(n, &upper)?,
        g: gval,
    })
}

/// Whether L lies in the gauge class of the ordinary system (all magnitudes
/// equal and every cyclic sum at -π/2, or the time-reversed +π/2), decided
/// both through the fingerprint and through `rank_of(L) = 1`; disagreement
/// between the two routes is an error.
pub fn is_ordinary_cm(l: &CouplingMatrix) -> Result<bool> {
    let class = crate::gauge::triple_sums(l);
    let scale = class.magnitudes.iter().cloned().fold(0.0, f64::max);
    let mags_equal = class
        .magnitudes
        .iter()
        .all(|m| (m - scale).abs() <= 1e-8 * scale.max(1.0));
    let half_pi = std::f64::consts::FRAC_PI_2;
    let triples_pinned = [-half_pi, half_pi].iter().any(|&target| {
        class
            .triples
            .iter()
            .all(|t| t.map(|v| (v - target).abs() <= 1e-8).unwrap_or(false))
    }) || l.dim() < 3;
    let from_fingerprint = mags_equal && triples_pinned;
    let from_rank = rank_of(l)? == 1;
    if from_fingerprint != from_rank {
        return Err(CoreError::InvalidInput(format!(
            "ordinary-CM routes disagree: fingerprint {from_fingerprint}, rank {from_rank}"
        )));
    }
    Ok(from_rank)
}

/// Numerical rank of a Gram matrix by eigenvalue count, used to watch the
/// span of evolving vector sets.
pub fn gram_rank(g: &DMatrix<Complex64>, rel_tol: f64) -> usize {
    let vals = eigvals_ascending(g);
    let top = vals.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    vals.iter().filter(|&&v| v > rel_tol * top).count()
}
