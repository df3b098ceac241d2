//! Hermitian/real-symmetric matrix values, continuity-tracked
//! eigendecomposition, rank-revealing semidefinite Cholesky, commutators and
//! Pauli helpers.
//!
//! Everything here is an immutable value; every operation is a pure
//! function, so concurrent use needs no synchronization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::{CoreError, Result};

/// Relative Hermiticity residual accepted by validated constructors.
pub const HERMITICITY_TOL: f64 = 1e-12;

/// Default degeneracy tolerance, relative to the spectral diameter.
/// Below it eigenvector tracking attaches a warning instead of failing:
/// Calogero-Moser repulsion keeps generic trajectories non-degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Default pivot tolerance factor for the semidefinite Cholesky, applied to
/// the trace of the input.
pub const PIVOT_TOL_FACTOR: f64 = 1e-10;

/// Symmetry class of a matrix value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixClass {
    HermitianComplex,
    /// Real entries only; stays closed under every flow in this crate.
    RealSymmetric,
}

/// A validated Hermitian (or real-symmetric) square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    data: DMatrix<Complex64>,
    class: MatrixClass,
}

impl SquareMatrix {
    /// Validates the class invariants and wraps the data.
    pub fn new(data: DMatrix<Complex64>, class: MatrixClass) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(CoreError::DimensionMismatch {
                expected: data.nrows(),
                got: data.ncols(),
            });
        }
        let scale = 1.0 + max_abs(&data);
        let res = hermiticity_residual(&data);
        if res > HERMITICITY_TOL * scale {
            return Err(CoreError::ClassViolation(format!(
                "Hermiticity residual {res:.3e} exceeds {:.3e}",
                HERMITICITY_TOL * scale
            )));
        }
        if class == MatrixClass::RealSymmetric {
            let im = data.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
            if im > HERMITICITY_TOL * scale {
                return Err(CoreError::ClassViolation(format!(
                    "real-symmetric matrix has imaginary part {im:.3e}"
                )));
            }
        }
        Ok(Self { data, class })
    }

    pub fn hermitian(data: DMatrix<Complex64>) -> Result<Self> {
        Self::new(data, MatrixClass::HermitianComplex)
    }

    pub fn real_symmetric(data: DMatrix<f64>) -> Result<Self> {
        let c = data.map(|x| Complex64::new(x, 0.0));
        Self::new(c, MatrixClass::RealSymmetric)
    }

    /// Hermitian matrix from the real diagonal and the strict upper triangle
    /// (row-major ordering `(0,1), (0,2), …, (n-2,n-1)`).
    pub fn hermitian_from_upper(diag: &[f64], upper: &[Complex64]) -> Result<Self> {
        let n = diag.len();
        if upper.len() != n * (n - 1) / 2 {
            return Err(CoreError::DimensionMismatch {
                expected: n * (n - 1) / 2,
                got: upper.len(),
            });
        }
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(diag[i], 0.0);
        }
        for (idx, (i, j)) in pair_iter(n).enumerate() {
            m[(i, j)] = upper[idx];
            m[(j, i)] = upper[idx].conj();
        }
        Self::hermitian(m)
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn class(&self) -> MatrixClass {
        self.class
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.data
    }

    pub fn into_entries(self) -> DMatrix<Complex64> {
        self.data
    }
}

/// Anti-Hermitian coupling matrix with zero diagonal; the carrier of the
/// internal degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    data: DMatrix<Complex64>,
}

impl CouplingMatrix {
    /// Validates anti-Hermiticity and the vanishing diagonal.
    pub fn new(data: DMatrix<Complex64>) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(CoreError::DimensionMismatch {
                expected: data.nrows(),
                got: data.ncols(),
            });
        }
        let scale = 1.0 + max_abs(&data);
        let mut res: f64 = 0.0;
        for i in 0..data.nrows() {
            for j in 0..data.ncols() {
                res = res.max((data[(i, j)] + data[(j, i)].conj()).norm());
            }
        }
        if res > HERMITICITY_TOL * scale {
            return Err(CoreError::ClassViolation(format!(
                "anti-Hermiticity residual {res:.3e}"
            )));
        }
        let diag = (0..data.nrows())
            .map(|i| data[(i, i)].norm())
            .fold(0.0, f64::max);
        if diag > HERMITICITY_TOL * scale {
            return Err(CoreError::ClassViolation(format!(
                "coupling matrix diagonal {diag:.3e} is not zero"
            )));
        }
        Ok(Self { data })
    }

    /// Builds from the strict upper triangle, filling `L_ji = -conj(L_ij)`
    /// and an exactly zero diagonal.
    pub fn from_upper(n: usize, upper: &[Complex64]) -> Result<Self> {
        if upper.len() != n * (n - 1) / 2 {
            return Err(CoreError::DimensionMismatch {
                expected: n * (n - 1) / 2,
                got: upper.len(),
            });
        }
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for (idx, (i, j)) in pair_iter(n).enumerate() {
            m[(i, j)] = upper[idx];
            m[(j, i)] = -upper[idx].conj();
        }
        Ok(Self { data: m })
    }

    /// The ordinary-CM coupling `-i g (1 - |e><e|)` with `<e| = (1,…,1)`;
    /// all off-diagonal entries equal `i g`.
    pub fn ordinary_cm(n: usize, g: f64) -> Self {
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m[(i, j)] = Complex64::new(0.0, g);
                }
            }
        }
        Self { data: m }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.data
    }

    pub fn into_entries(self) -> DMatrix<Complex64> {
        self.data
    }

    /// `-Tr L^2 = 2 Σ_{i<j} |L_ij|^2`, conserved along every reduced flow.
    pub fn norm_sq_invariant(&self) -> f64 {
        let mut s = 0.0;
        for (i, j) in pair_iter(self.dim()) {
            s += self.data[(i, j)].norm_sqr();
        }
        2.0 * s
    }

    /// The Hermitian partner `K = -iL`.
    pub fn to_hermitian(&self) -> DMatrix<Complex64> {
        self.data.map(|z| Complex64::new(0.0, -1.0) * z)
    }
}

/// Iterator over strict-upper-triangle index pairs in row-major order.
pub fn pair_iter(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Position of the pair `(i, j)`, `i < j`, in row-major upper-triangle order.
pub fn pair_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn hermiticity_residual(m: &DMatrix<Complex64>) -> f64 {
    let mut res: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            res = res.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    res
}

/// Eigendecomposition of a Hermitian matrix with eigenvector continuity
/// bookkeeping across successive calls.
///
/// `u` satisfies `U M U^† = diag(values)`; its rows are the eigenvectors.
#[derive(Debug, Clone)]
pub struct TrackedEigen {
    pub values: DVector<f64>,
    pub u: DMatrix<Complex64>,
    /// Set when the minimal eigenvalue gap fell below the degeneracy
    /// tolerance while tracking was requested.
    pub degenerate: bool,
}

impl TrackedEigen {
    pub fn min_gap(&self) -> f64 {
        let mut sorted: Vec<f64> = self.values.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Diagonalizes a Hermitian matrix. Without `prev` the eigenvalues come out
/// ascending; with `prev` the eigenvectors are matched to the previous frame
/// by greedy maximal overlap and phased so that `diag(U_prev^† U)` is real
/// positive — the discrete version of the `A_ii = 0` gauge.
pub fn eig_tracked(m: &SquareMatrix, prev: Option<&TrackedEigen>) -> Result<TrackedEigen> {
    let n = m.dim();
    if let Some(p) = prev {
        if p.u.nrows() != n {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: p.u.nrows(),
            });
        }
    }
    let eig = m.entries().clone().symmetric_eigen();
    // columns of q are eigenvectors
    let mut q = eig.eigenvectors;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();

    // ascending order first
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let q0 = q.clone();
    let v0 = values.clone();
    for (slot, &src) in order.iter().enumerate() {
        q.set_column(slot, &q0.column(src));
        values[slot] = v0[src];
    }

    let mut degenerate = false;
    if let Some(p) = prev {
        let diam = values[n - 1] - values[0];
        let min_gap = values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if min_gap < DEGENERACY_TOL * diam.max(f64::MIN_POSITIVE) {
            degenerate = true;
        }
        // overlap of new eigenvectors against previous ones
        let prev_q = p.u.adjoint();
        let mut assigned_new = vec![false; n];
        let mut slot_of = vec![usize::MAX; n]; // new index -> previous slot
        let mut overlaps = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                overlaps[(i, j)] = prev_q.column(j).dotc(&q.column(i));
            }
        }
        let mut taken_prev = vec![false; n];
        for _ in 0..n {
            let mut best = (0usize, 0usize, -1.0f64);
            for i in 0..n {
                if assigned_new[i] {
                    continue;
                }
                for j in 0..n {
                    if taken_prev[j] {
                        continue;
                    }
                    let w = overlaps[(i, j)].norm();
                    if w > best.2 {
                        best = (i, j, w);
                    }
                }
            }
            assigned_new[best.0] = true;
            taken_prev[best.1] = true;
            slot_of[best.0] = best.1;
        }
        let mut q_new = DMatrix::<Complex64>::zeros(n, n);
        let mut v_new = vec![0.0; n];
        for i in 0..n {
            let j = slot_of[i];
            let w = overlaps[(i, j)];
            let phase = if w.norm() > 0.0 {
                w.conj() / w.norm()
            } else {
                Complex64::new(1.0, 0.0)
            };
            let col = q.column(i) * phase;
            q_new.set_column(j, &col);
            v_new[j] = values[i];
        }
        q = q_new;
        values = v_new;
    }

    Ok(TrackedEigen {
        values: DVector::from_vec(values),
        u: q.adjoint(),
        degenerate,
    })
}

/// Rank-revealing Cholesky factor of a positive semidefinite matrix.
///
/// `cols` is `rank × n`; column `i` is the vector attached to index `i`
/// of the input, so `cols^† cols` reconstructs `input + shift·1`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub rank: usize,
    pub cols: DMatrix<Complex64>,
    pub shift: f64,
}

impl CholeskyFactor {
    pub fn reconstruct(&self) -> DMatrix<Complex64> {
        self.cols.adjoint() * &self.cols
    }

    pub fn column(&self, i: usize) -> DVector<Complex64> {
        self.cols.column(i).into_owned()
    }
}

/// Default pivot tolerance for a given matrix: `1e-10 × |trace|`, floored at
/// `1e-10` for traceless inputs.
pub fn default_pivot_tol(m: &SquareMatrix) -> f64 {
    let tr: f64 = (0..m.dim()).map(|i| m.entries()[(i, i)].re).sum();
    (PIVOT_TOL_FACTOR * tr.abs()).max(PIVOT_TOL_FACTOR)
}

/// Diagonal-pivoted Cholesky factorization of a Hermitian positive
/// semidefinite matrix; rank = number of pivots above `pivot_tol`.
pub fn cholesky_psd(m: &SquareMatrix, pivot_tol: f64) -> Result<CholeskyFactor> {
    let n = m.dim();
    let eig = m.entries().clone().symmetric_eigen();
    let min_eig = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -pivot_tol {
        return Err(CoreError::NotPositiveSemidefinite {
            min_eig,
            tol: pivot_tol,
        });
    }

    let mut a = m.entries().clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::<Complex64>::zeros(n, n); // rows of the factor, pivoted order
    let mut rank = n;
    for k in 0..n {
        // largest remaining diagonal entry as pivot
        let mut p = k;
        let mut best = a[(k, k)].re;
        for i in k + 1..n {
            if a[(i, i)].re > best {
                best = a[(i, i)].re;
                p = i;
            }
        }
        if best <= pivot_tol {
            rank = k;
            break;
        }
        if p != k {
            a.swap_rows(k, p);
            a.swap_columns(k, p);
            l.swap_columns(k, p);
            perm.swap(k, p);
        }
        let piv = a[(k, k)].re.sqrt();
        l[(k, k)] = Complex64::new(piv, 0.0);
        for j in k + 1..n {
            l[(k, j)] = a[(k, j)] / piv;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let lki = l[(k, i)];
                let lkj = l[(k, j)];
                a[(i, j)] -= lki.conj() * lkj;
            }
        }
    }

    // de-permute columns back to original index order
    let mut cols = DMatrix::<Complex64>::zeros(rank, n);
    for j in 0..n {
        for i in 0..rank {
            cols[(i, perm[j])] = l[(i, j)];
        }
    }
    Ok(CholeskyFactor {
        rank,
        cols,
        shift: 0.0,
    })
}

pub fn commutator(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(CoreError::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    Ok(a * b - b * a)
}

pub fn anticommutator(
    a: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
) -> Result<DMatrix<Complex64>> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(CoreError::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    Ok(a * b + b * a)
}

pub fn identity(n: usize) -> DMatrix<Complex64> {
    DMatrix::identity(n, n)
}

/// `a0·1 + a·σ` over the Pauli basis; Hermitian iff all coefficients are real.
pub fn pauli_compose(a0: Complex64, a: [Complex64; 3]) -> DMatrix<Complex64> {
    let i = Complex64::new(0.0, 1.0);
    let mut m = DMatrix::<Complex64>::zeros(2, 2);
    m[(0, 0)] = a0 + a[2];
    m[(1, 1)] = a0 - a[2];
    m[(0, 1)] = a[0] - i * a[1];
    m[(1, 0)] = a[0] + i * a[1];
    m
}

/// Real-coefficient Pauli composition, guaranteed Hermitian.
pub fn pauli_hermitian(a0: f64, a: [f64; 3]) -> SquareMatrix {
    let c = |x: f64| Complex64::new(x, 0.0);
    SquareMatrix::hermitian(pauli_compose(c(a0), [c(a[0]), c(a[1]), c(a[2])]))
        .expect("real Pauli coefficients always compose to a Hermitian matrix")
}

/// Matrix exponential of `i·t·H` for Hermitian `H`, via eigendecomposition.
pub fn expi_hermitian(h: &DMatrix<Complex64>, t: f64) -> DMatrix<Complex64> {
    let eig = h.clone().symmetric_eigen();
    let n = h.nrows();
    let mut d = DMatrix::<Complex64>::zeros(n, n);
    for k in 0..n {
        let phi = eig.eigenvalues[k] * t;
        d[(k, k)] = Complex64::new(phi.cos(), phi.sin());
    }
    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

/// Eigenphases and eigenvectors of a unitary matrix, via simultaneous
/// diagonalization of its Hermitian and anti-Hermitian parts.
///
/// Returns `(phases in (-π, π], q)` with `X q_k = e^{i φ_k} q_k`
/// (`q_k` = column `k`).
pub fn eig_unitary(x: &DMatrix<Complex64>) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let n = x.nrows();
    let unit_res = (x.adjoint() * x - identity(n))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if unit_res > 1e-10 {
        return Err(CoreError::ClassViolation(format!(
            "matrix is not unitary (residual {unit_res:.3e})"
        )));
    }
    let a = (x + x.adjoint()).scale(0.5); // cos part
    let b = (x - x.adjoint()).map(|z| z / Complex64::new(0.0, 2.0)); // sin part
    let eig_a = a.symmetric_eigen();
    let mut q = eig_a.eigenvectors;
    let cos_vals: Vec<f64> = eig_a.eigenvalues.iter().copied().collect();

    // within clusters of equal cosine, rediagonalize the sin part
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| cos_vals[i].partial_cmp(&cos_vals[j]).unwrap());
    let mut phases = vec![0.0; n];
    let cluster_tol = 1e-9 * 2.0_f64;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (cos_vals[order[end]] - cos_vals[order[start]]).abs() < cluster_tol {
            end += 1;
        }
        let ids: Vec<usize> = order[start..end].to_vec();
        if ids.len() == 1 {
            let k = ids[0];
            let qk = q.column(k);
            let s = qk.dotc(&(&b * qk)).re;
            phases[k] = s.atan2(cos_vals[k]);
        } else {
            let m = ids.len();
            let mut sub = DMatrix::<Complex64>::zeros(m, m);
            for (r, &kr) in ids.iter().enumerate() {
                let bq = &b * q.column(kr);
                for (c, &kc) in ids.iter().enumerate() {
                    sub[(c, r)] = q.column(kc).dotc(&bq);
                }
            }
            let sub_eig = sub.symmetric_eigen();
            let mut new_cols = Vec::with_capacity(m);
            for c in 0..m {
                let mut col = DVector::<Complex64>::zeros(n);
                for (r, &kr) in ids.iter().enumerate() {
                    col += q.column(kr) * sub_eig.eigenvectors[(r, c)];
                }
                new_cols.push(col);
            }
            for (c, &kc) in ids.iter().enumerate() {
                q.set_column(kc, &new_cols[c]);
                phases[kc] = sub_eig.eigenvalues[c].atan2(cos_vals[kc]);
            }
        }
        start = end;
    }
    Ok((phases, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cx(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_hermitian(n: usize, seed: u64) -> SquareMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = cx(rng.gen_range(-1.0..1.0), 0.0);
            for j in i + 1..n {
                let z = cx(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
        SquareMatrix::hermitian(m).unwrap()
    }

    #[test]
    fn eig_of_diagonal_sorts_ascending() {
        let m = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            3.0, 1.0, 2.0,
        ])))
        .unwrap();
        let e = eig_tracked(&m, None).unwrap();
        assert_relative_eq!(e.values[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.values[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(e.values[2], 3.0, epsilon = 1e-12);
        // U is a permutation up to phases
        for i in 0..3 {
            let row = e.u.row(i);
            let big = row.iter().filter(|z| z.norm() > 0.5).count();
            assert_eq!(big, 1);
        }
    }

    #[test]
    fn pauli_x_spectrum() {
        let m = SquareMatrix::hermitian(pauli_compose(
            cx(0.0, 0.0),
            [cx(1.0, 0.0), cx(0.0, 0.0), cx(0.0, 0.0)],
        ))
        .unwrap();
        let e = eig_tracked(&m, None).unwrap();
        assert_relative_eq!(e.values[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(e.values[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eig_reconstruction_residual() {
        let m = random_hermitian(4, 7);
        let e = eig_tracked(&m, None).unwrap();
        let d = DMatrix::from_diagonal(&e.values.map(|x| cx(x, 0.0)));
        let res = (&e.u * m.entries() * e.u.adjoint() - d).norm();
        assert!(res <= 1e-10, "residual {res}");
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let mut m = DMatrix::<Complex64>::zeros(2, 2);
        m[(0, 1)] = cx(1.0, 0.0);
        assert!(SquareMatrix::hermitian(m).is_err());
    }

    #[test]
    fn tracking_continuity_along_linear_path() {
        // U(t_k) stays O(Δt / gap) away from U(t_{k-1})
        let x0 = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            0.0, 1.0, 2.0, 3.2,
        ])))
        .unwrap();
        let y0 = random_hermitian(4, 3);
        let dt = 1e-3;
        let mut prev = eig_tracked(&x0, None).unwrap();
        let mut max_jump: f64 = 0.0;
        for k in 1..=200 {
            let t = k as f64 * dt;
            let m = SquareMatrix::hermitian(x0.entries() + y0.entries().scale(t)).unwrap();
            let e = eig_tracked(&m, Some(&prev)).unwrap();
            assert!(!e.degenerate);
            max_jump = max_jump.max((&e.u - &prev.u).norm());
            prev = e;
        }
        let gap = 1.0 - 3.0 * dt * max_abs(y0.entries());
        let bound = 20.0 * dt / gap;
        assert!(max_jump < bound, "jump {max_jump} vs bound {bound}");
    }

    #[test]
    fn tracking_warns_on_degeneracy() {
        let m0 = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            0.0, 1.0, 2.0,
        ])))
        .unwrap();
        let prev = eig_tracked(&m0, None).unwrap();
        // gap 1e-13 against a spectral diameter of 1.5
        let m1 = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            0.5,
            0.5 + 1e-13,
            2.0,
        ])))
        .unwrap();
        let e = eig_tracked(&m1, Some(&prev)).unwrap();
        assert!(e.degenerate);
    }

    #[test]
    fn cholesky_identity_full_rank() {
        let m = SquareMatrix::real_symmetric(DMatrix::identity(3, 3)).unwrap();
        let f = cholesky_psd(&m, default_pivot_tol(&m)).unwrap();
        assert_eq!(f.rank, 3);
        assert!((f.reconstruct() - m.entries()).norm() < 1e-12);
    }

    #[test]
    fn cholesky_all_ones_rank_one() {
        let m = SquareMatrix::real_symmetric(DMatrix::from_element(3, 3, 1.0)).unwrap();
        let f = cholesky_psd(&m, default_pivot_tol(&m)).unwrap();
        assert_eq!(f.rank, 1);
        assert!((f.reconstruct() - m.entries()).norm() < 1e-9);
    }

    #[test]
    fn cholesky_shifted_ordinary_cm_is_rank_one() {
        // -i L0 + g·1 = g·(all ones); spectrum {N g, 0 × (N-1)}
        let n = 4;
        let g = 1.0;
        let l0 = CouplingMatrix::ordinary_cm(n, g);
        let shifted = SquareMatrix::hermitian(l0.to_hermitian() + identity(n).scale(g)).unwrap();
        let eig = eig_tracked(&shifted, None).unwrap();
        for k in 0..n - 1 {
            assert_relative_eq!(eig.values[k], 0.0, epsilon = 1e-10);
        }
        assert_relative_eq!(eig.values[n - 1], n as f64 * g, epsilon = 1e-10);
        let f = cholesky_psd(&shifted, default_pivot_tol(&shifted)).unwrap();
        assert_eq!(f.rank, 1);
        assert!((f.reconstruct() - shifted.entries()).norm() < 1e-9);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, -0.5,
        ])))
        .unwrap();
        match cholesky_psd(&m, 1e-10) {
            Err(CoreError::NotPositiveSemidefinite { .. }) => {}
            other => panic!("expected not-PSD error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_roundtrip_random_psd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..6);
            let a = DMatrix::<Complex64>::from_fn(n, n, |_, _| {
                cx(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let psd = SquareMatrix::hermitian(a.adjoint() * &a).unwrap();
            let f = cholesky_psd(&psd, default_pivot_tol(&psd)).unwrap();
            let rel = (f.reconstruct() - psd.entries()).norm() / (1.0 + psd.entries().norm());
            assert!(rel < 1e-9, "relative residual {rel}");
        }
    }

    #[test]
    fn commutator_algebra() {
        let a = random_hermitian(3, 1);
        assert!((commutator(a.entries(), a.entries()).unwrap()).norm() < 1e-14);

        let sz = pauli_compose(cx(0.0, 0.0), [cx(0.0, 0.0), cx(0.0, 0.0), cx(1.0, 0.0)]);
        let sx = pauli_compose(cx(0.0, 0.0), [cx(1.0, 0.0), cx(0.0, 0.0), cx(0.0, 0.0)]);
        let sy = pauli_compose(cx(0.0, 0.0), [cx(0.0, 0.0), cx(1.0, 0.0), cx(0.0, 0.0)]);
        let c = commutator(&sz, &sx).unwrap();
        assert!((c - sy.scale(2.0).map(|z| z * cx(0.0, 1.0))).norm() < 1e-14);

        // [Hermitian, Hermitian] is anti-Hermitian
        let b = random_hermitian(3, 2);
        let c = commutator(a.entries(), b.entries()).unwrap();
        assert!((c.adjoint() + &c).norm() < 1e-12);

        let bad = DMatrix::<Complex64>::zeros(2, 2);
        assert!(commutator(a.entries(), &bad).is_err());
    }

    #[test]
    fn commutator_of_ordinary_cm_seed() {
        // [X0, Y0] with the ordinary-CM construction equals -i g (1 - |e><e|)
        let n = 4;
        let g = 0.7;
        let x = [0.5, 1.3, 2.0, 3.1];
        let x0 = DMatrix::from_diagonal(&DVector::from_iterator(n, x.iter().map(|&v| cx(v, 0.0))));
        let mut y0 = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    y0[(i, j)] = cx(0.0, g) / cx(x[i] - x[j], 0.0);
                }
            }
        }
        let c = commutator(&x0, &y0).unwrap();
        let expected = CouplingMatrix::ordinary_cm(n, g);
        assert!((c - expected.entries()).norm() < 1e-12);
    }

    #[test]
    fn pauli_compose_examples() {
        let m = pauli_compose(cx(0.0, 0.0), [cx(0.0, 0.0), cx(0.0, 0.0), cx(1.0, 0.0)]);
        assert!(
            (m - DMatrix::from_diagonal(&DVector::from_vec(vec![cx(1.0, 0.0), cx(-1.0, 0.0)])))
                .norm()
                < 1e-15
        );

        let m = pauli_compose(cx(1.0, 0.0), [cx(0.0, 0.0); 3]);
        assert!((m - identity(2)).norm() < 1e-15);

        // x00·1 + x_z0·σz is Hermitian by construction
        let h = pauli_hermitian(0.4, [0.0, 0.0, 0.9]);
        assert_eq!(h.class(), MatrixClass::HermitianComplex);
        assert_relative_eq!(h.entries()[(0, 0)].re, 1.3, epsilon = 1e-15);
        assert_relative_eq!(h.entries()[(1, 1)].re, -0.5, epsilon = 1e-15);

        // complex coefficients break Hermiticity
        let nh = pauli_compose(cx(0.0, 1.0), [cx(0.0, 0.0); 3]);
        assert!(hermiticity_residual(&nh) > 1.0);
    }

    #[test]
    fn unitary_eigenphases() {
        let h = random_hermitian(5, 9);
        let x = expi_hermitian(h.entries(), 0.8);
        let (phases, q) = eig_unitary(&x).unwrap();
        for (k, phi) in phases.iter().enumerate() {
            let lam = Complex64::new(phi.cos(), phi.sin());
            let resid = (&x * q.column(k) - q.column(k) * lam).norm();
            assert!(resid < 1e-9, "eigenpair residual {resid}");
        }
    }

    #[test]
    fn pair_index_roundtrip() {
        let n = 6;
        for (idx, (i, j)) in pair_iter(n).enumerate() {
            assert_eq!(pair_index(i, j, n), idx);
        }
    }
}
