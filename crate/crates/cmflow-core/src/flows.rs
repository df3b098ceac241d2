//! Exact matrix-space solutions of every linear model, plus the reduction of
//! a matrix trajectory to the instantaneous eigenvalue frame. These closed
//! forms are the ground truth the reduced ODE systems are checked against.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::matcore::{
    self, anticommutator, commutator, eig_tracked, eig_unitary, expi_hermitian, identity,
    CouplingMatrix, MatrixClass, SquareMatrix, TrackedEigen,
};
use crate::{CoreError, Result};

/// A point of the linear model: the pair (X, Y) of Hermitian matrices.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub x: SquareMatrix,
    pub y: SquareMatrix,
}

impl PhasePoint {
    pub fn new(x: SquareMatrix, y: SquareMatrix) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: x.dim(),
                got: y.dim(),
            });
        }
        Ok(Self { x, y })
    }

    /// Class of linear combinations of the pair: real-symmetric only when
    /// both members are.
    fn combined_class(&self) -> MatrixClass {
        if self.x.class() == MatrixClass::RealSymmetric
            && self.y.class() == MatrixClass::RealSymmetric
        {
            MatrixClass::RealSymmetric
        } else {
            MatrixClass::HermitianComplex
        }
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    /// Initial condition with diagonal `X0 = diag(x)` and
    /// `Y0_ii = p_i`, `Y0_ij = L_ij / (x_i - x_j)`, so that the reduction at
    /// `t = 0` returns exactly `(x, p, L)`.
    pub fn seed_from_coupling(x: &[f64], p: &[f64], l: &CouplingMatrix) -> Result<Self> {
        let n = x.len();
        if p.len() != n || l.dim() != n {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: p.len().min(l.dim()),
            });
        }
        let x0 = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            x.iter().map(|&v| Complex64::new(v, 0.0)),
        ));
        let mut y0 = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            y0[(i, i)] = Complex64::new(p[i], 0.0);
            for j in 0..n {
                if i != j {
                    let dx = x[i] - x[j];
                    if dx.abs() < 1e-12 {
                        return Err(CoreError::InvalidInput(
                            "coincident positions in seed".into(),
                        ));
                    }
                    y0[(i, j)] = l.entries()[(i, j)] / Complex64::new(dx, 0.0);
                }
            }
        }
        Ok(Self {
            x: SquareMatrix::hermitian(x0)?,
            y: SquareMatrix::hermitian(y0)?,
        })
    }
}

/// Time-stamped reduction (D, V, L, U) of a phase point. `U X U^† = diag(d)`
/// and `V = U Y U^†`, `L = [diag(d), V]`.
#[derive(Debug, Clone)]
pub struct SpectralFrame {
    pub t: f64,
    pub d: DVector<f64>,
    pub v: SquareMatrix,
    pub l: CouplingMatrix,
    pub u: DMatrix<Complex64>,
    pub eigen: TrackedEigen,
}

impl SpectralFrame {
    pub fn positions(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn momenta(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.d.len(),
            (0..self.d.len()).map(|i| self.v.entries()[(i, i)].re),
        )
    }
}

/// Free flow: `X = X0 + t·Y0`, `Y = Y0`.
pub fn free_flow(p0: &PhasePoint, t: f64) -> PhasePoint {
    let class = p0.combined_class();
    let x = p0.x.entries() + p0.y.entries().scale(t);
    PhasePoint {
        x: SquareMatrix::new(x, class).expect("linear combination of Hermitian matrices"),
        y: p0.y.clone(),
    }
}

/// Harmonic flow: `X = X0 cos t + Y0 sin t`, `Y = Y0 cos t - X0 sin t`,
/// the solution of `Ẋ = Y`, `Ẏ = -X`. Period 2π for every initial point.
pub fn harmonic_flow(p0: &PhasePoint, t: f64) -> PhasePoint {
    let class = p0.combined_class();
    let (c, s) = (t.cos(), t.sin());
    let x = p0.x.entries().scale(c) + p0.y.entries().scale(s);
    let y = p0.y.entries().scale(c) - p0.x.entries().scale(s);
    PhasePoint {
        x: SquareMatrix::new(x, class).expect("rotation of Hermitian pair"),
        y: SquareMatrix::new(y, class).expect("rotation of Hermitian pair"),
    }
}

/// Flow on the unitary configuration space:
/// `X(t) = X0 exp(X0 Y0 t)`, `Y(t) = exp(-X0 Y0 t) Y0`; `X` stays unitary.
///
/// Preconditions: `X0` unitary and `(X0 Y0)^† = -X0 Y0`, both within 1e-10.
pub fn sutherland_flow(
    x0: &DMatrix<Complex64>,
    y0: &DMatrix<Complex64>,
    t: f64,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let n = x0.nrows();
    if y0.nrows() != n || y0.ncols() != n || x0.ncols() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: y0.nrows(),
        });
    }
    let unit_res = (x0.adjoint() * x0 - identity(n))
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if unit_res > 1e-10 {
        return Err(CoreError::ClassViolation(format!(
            "X0 is not unitary (residual {unit_res:.3e})"
        )));
    }
    let xy = x0 * y0;
    let anti_res = (xy.adjoint() + &xy)
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if anti_res > 1e-10 {
        return Err(CoreError::ClassViolation(format!(
            "X0·Y0 is not anti-Hermitian (residual {anti_res:.3e})"
        )));
    }
    // X0 Y0 = i K with K Hermitian
    let k = xy.map(|z| Complex64::new(0.0, -1.0) * z);
    let exp_plus = expi_hermitian(&k, t);
    let exp_minus = expi_hermitian(&k, -t);
    Ok((x0 * exp_plus, exp_minus * y0))
}

/// Eigenphases of a unitary trajectory sample, unwrapped by nearest-branch
/// continuation against the previous sample's phases.
pub fn eigenphases_tracked(x: &DMatrix<Complex64>, prev: Option<&[f64]>) -> Result<Vec<f64>> {
    let (mut phases, _) = eig_unitary(x)?;
    phases.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if let Some(prev) = prev {
        if prev.len() != phases.len() {
            return Err(CoreError::DimensionMismatch {
                expected: prev.len(),
                got: phases.len(),
            });
        }
        // phases are defined mod 2π; pick the branch nearest the last sample
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut out: Vec<f64> = Vec::with_capacity(phases.len());
        let mut used = vec![false; phases.len()];
        for &p_prev in prev {
            let mut best = (0usize, f64::INFINITY, 0.0f64);
            for (i, &ph) in phases.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let shift = ((p_prev - ph) / two_pi).round();
                let cand = ph + shift * two_pi;
                let d = (cand - p_prev).abs();
                if d < best.1 {
                    best = (i, d, cand);
                }
            }
            used[best.0] = true;
            out.push(best.2);
        }
        return Ok(out);
    }
    Ok(phases)
}

/// Extended phase-space point: (X, Y) plus rectangular vector blocks E (d×N)
/// and F (N×d) with coupling ξ. `Φ = F·E` must be Hermitian.
#[derive(Debug, Clone)]
pub struct ExtendedPoint {
    pub x: SquareMatrix,
    pub y: SquareMatrix,
    pub e: DMatrix<Complex64>,
    pub f: DMatrix<Complex64>,
    pub xi: f64,
}

impl ExtendedPoint {
    pub fn new(
        x: SquareMatrix,
        y: SquareMatrix,
        e: DMatrix<Complex64>,
        f: DMatrix<Complex64>,
        xi: f64,
    ) -> Result<Self> {
        let n = x.dim();
        if y.dim() != n || e.ncols() != n || f.nrows() != n || e.nrows() != f.ncols() {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: e.ncols(),
            });
        }
        let phi = &f * &e;
        let res = matcore::hermiticity_residual(&phi);
        if res > 1e-10 * (1.0 + matcore::max_abs(&phi)) {
            return Err(CoreError::ClassViolation(format!(
                "Φ = F·E is not Hermitian (residual {res:.3e})"
            )));
        }
        Ok(Self { x, y, e, f, xi })
    }

    /// Builds the point directly from a Hermitian Φ0, using the trivial
    /// factorization `E = 1`, `F = Φ0` (d = N).
    pub fn from_phi(x: SquareMatrix, y: SquareMatrix, phi: SquareMatrix, xi: f64) -> Result<Self> {
        let n = x.dim();
        let e = identity(n);
        let f = phi.entries().clone();
        Self::new(x, y, e, f, xi)
    }

    pub fn phi(&self) -> DMatrix<Complex64> {
        &self.f * &self.e
    }
}

/// State of the coupled flow at one time.
#[derive(Debug, Clone)]
pub struct EfState {
    pub x: SquareMatrix,
    pub y: SquareMatrix,
    pub phi: SquareMatrix,
    /// `[X, Y] - iΦ`, a constant of motion of this flow.
    pub conserved: DMatrix<Complex64>,
}

/// Flow of `H = ½ Tr((Y + ξ F E)²)`:
/// `Y` is constant, `Φ(t) = e^{iξY0t} Φ0 e^{-iξY0t}`, and
/// `X(t) = X0 + tY0 + ξ ∫_0^t e^{iξτY0} Φ0 e^{-iξτY0} dτ`, evaluated
/// entrywise in the eigenbasis of `Y0` where the integral is elementary:
/// the (i,j) entry gains `Φ0_ij f(ξ Δy_ij t)/Δy_ij` with
/// `f(τ) = sin τ + i(1 - cos τ)` and the removable `Δy → 0` limit `t ξ Φ0_ij`.
pub fn ef_flow(p0: &ExtendedPoint, t: f64) -> Result<EfState> {
    let n = p0.x.dim();
    let xi = p0.xi;
    let phi0 = p0.phi();
    let eig = eig_tracked(&p0.y, None)?;
    let q = eig.u.adjoint(); // columns are eigenvectors of Y0
    let x0b = eig.u.clone() * p0.x.entries() * &q;
    let phi0b = eig.u.clone() * &phi0 * &q;
    let mut xb = x0b.clone();
    for i in 0..n {
        for j in 0..n {
            let dy = eig.values[i] - eig.values[j];
            if i == j {
                xb[(i, j)] += Complex64::new(t * (eig.values[i] + xi * phi0b[(i, i)].re), 0.0);
            } else if dy.abs() < 1e-12 {
                xb[(i, j)] += Complex64::new(t * xi, 0.0) * phi0b[(i, j)];
            } else {
                let tau = xi * dy * t;
                let f = Complex64::new(tau.sin(), 1.0 - tau.cos());
                xb[(i, j)] += phi0b[(i, j)] * f / Complex64::new(dy, 0.0);
            }
        }
    }
    let x = &q * xb * &eig.u;
    let phi_t = {
        let y0 = p0.y.entries();
        let e_plus = expi_hermitian(y0, xi * t);
        let e_minus = expi_hermitian(y0, -xi * t);
        e_plus * &phi0 * e_minus
    };
    let x = SquareMatrix::hermitian(x)?;
    let conserved =
        commutator(x.entries(), p0.y.entries())? - phi_t.map(|z| Complex64::new(0.0, 1.0) * z);
    Ok(EfState {
        x,
        y: p0.y.clone(),
        phi: SquareMatrix::hermitian(phi_t)?,
        conserved,
    })
}

/// Closed-form N=2 solution with `X0 = x0 σz`, `Y0 = y0 (n̂y·σ)`,
/// `Φ0 = φ0 (n̂φ·σ)`: the commuting part of Φ0 boosts the straight-line
/// motion while the rest circulates at frequency 2ξy0, a spiral in matrix
/// space.
pub fn ef_flow_pauli_n2(
    x0: f64,
    y0: f64,
    n_y: [f64; 3],
    phi0: f64,
    n_phi: [f64; 3],
    xi: f64,
    t: f64,
) -> EfState {
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];

    let ny_x_nphi = cross(n_y, n_phi);
    let nperp = cross(ny_x_nphi, n_y); // component of n̂φ orthogonal to n̂y

    let th = xi * y0 * t;
    let mut d = [0.0, 0.0, x0];
    let lin = t * (1.0 + dot(n_y, n_phi) * xi * phi0 / y0) * y0;
    for k in 0..3 {
        d[k] += lin * n_y[k];
        d[k] += (phi0 / y0) * th.sin() * (-th.sin() * ny_x_nphi[k] + th.cos() * nperp[k]);
    }
    let x = matcore::pauli_hermitian(0.0, d);
    let y = matcore::pauli_hermitian(0.0, [y0 * n_y[0], y0 * n_y[1], y0 * n_y[2]]);

    let th2 = 2.0 * th;
    let np = dot(n_y, n_phi);
    let mut phiv = [0.0; 3];
    for k in 0..3 {
        phiv[k] = phi0 * (np * n_y[k] - th2.sin() * ny_x_nphi[k] + th2.cos() * nperp[k]);
    }
    let phi = matcore::pauli_hermitian(0.0, phiv);
    let conserved = commutator(x.entries(), y.entries()).unwrap()
        - phi.entries().map(|z| Complex64::new(0.0, 1.0) * z);
    EfState {
        x,
        y,
        phi,
        conserved,
    }
}

/// Orthonormal basis whose first column is `(1,…,1)/√N`.
#[derive(Debug, Clone)]
pub struct OnesProjectorBasis {
    b: DMatrix<Complex64>,
}

impl OnesProjectorBasis {
    pub fn new(n: usize) -> Self {
        // Householder reflection mapping the first standard basis vector
        // onto e0 = (1,…,1)/√N gives the complement columns for free.
        let mut v = DVector::<f64>::from_element(n, 1.0 / (n as f64).sqrt());
        v[0] -= 1.0;
        let norm2 = v.dot(&v);
        let mut b = DMatrix::<f64>::identity(n, n);
        if norm2 > 1e-30 {
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] -= 2.0 * v[i] * v[j] / norm2;
                }
            }
        }
        Self {
            b: b.map(|x| Complex64::new(x, 0.0)),
        }
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.b
    }

    pub fn to_basis(&self, m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        self.b.adjoint() * m * &self.b
    }

    pub fn from_basis(&self, m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        &self.b * m * self.b.adjoint()
    }
}

/// Element-sum linear flow: `X(t) = X0 + (t/2)[M, Y0]_+` with `M_ij = 1`;
/// `Y` constant.
pub fn elementsum_linear_flow(p0: &PhasePoint, t: f64) -> PhasePoint {
    let n = p0.dim();
    let m = DMatrix::<Complex64>::from_element(n, n, Complex64::new(1.0, 0.0));
    let ac = anticommutator(&m, p0.y.entries()).expect("dimensions match by construction");
    let x = p0.x.entries() + ac.scale(0.5 * t);
    PhasePoint {
        x: SquareMatrix::new(x, p0.combined_class()).expect("Hermitian combination"),
        y: p0.y.clone(),
    }
}

/// Element-sum harmonic flow. In the basis containing `e0 = (1,…,1)/√N` the
/// `(e0,e0)` entry rotates at frequency N, the `(e0, e_i)` entries at N/2,
/// and the orthogonal (N-1)×(N-1) block is constant.
pub fn elementsum_harmonic_flow(p0: &PhasePoint, t: f64) -> PhasePoint {
    let n = p0.dim();
    let basis = OnesProjectorBasis::new(n);
    let mut xb = basis.to_basis(p0.x.entries());
    let mut yb = basis.to_basis(p0.y.entries());

    let (cn, sn) = ((n as f64 * t).cos(), (n as f64 * t).sin());
    let (ch, sh) = ((n as f64 * t / 2.0).cos(), (n as f64 * t / 2.0).sin());

    let x00 = xb[(0, 0)];
    let y00 = yb[(0, 0)];
    xb[(0, 0)] = x00 * cn + y00 * sn;
    yb[(0, 0)] = y00 * cn - x00 * sn;
    for j in 1..n {
        let (x0j, y0j) = (xb[(0, j)], yb[(0, j)]);
        xb[(0, j)] = x0j * ch + y0j * sh;
        yb[(0, j)] = y0j * ch - x0j * sh;
        let (xj0, yj0) = (xb[(j, 0)], yb[(j, 0)]);
        xb[(j, 0)] = xj0 * ch + yj0 * sh;
        yb[(j, 0)] = yj0 * ch - xj0 * sh;
    }

    let x = basis.from_basis(&xb);
    let y = basis.from_basis(&yb);
    let class = p0.combined_class();
    PhasePoint {
        x: SquareMatrix::new(x, class).expect("Hermitian block rotation"),
        y: SquareMatrix::new(y, class).expect("Hermitian block rotation"),
    }
}

/// Reduces a phase point to the eigenvalue frame: `d` ascending at the first
/// call, continuity-tracked against `prev` afterwards; `V = U Y U^†`,
/// `L = [diag(d), V]` with an exactly zero diagonal.
pub fn reduce(point: &PhasePoint, t: f64, prev: Option<&SpectralFrame>) -> Result<SpectralFrame> {
    let eigen = eig_tracked(&point.x, prev.map(|f| &f.eigen))?;
    let n = point.dim();
    let v_raw = &eigen.u * point.y.entries() * eigen.u.adjoint();
    let mut l = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                l[(i, j)] = Complex64::new(eigen.values[i] - eigen.values[j], 0.0) * v_raw[(i, j)];
            }
        }
    }
    // the symmetrized constructor absorbs roundoff from the similarity
    let v = SquareMatrix::new(
        (v_raw.adjoint() + &v_raw).scale(0.5),
        MatrixClass::HermitianComplex,
    )?;
    let l = CouplingMatrix::new(l)?;
    Ok(SpectralFrame {
        t,
        d: eigen.values.clone(),
        v,
        l,
        u: eigen.u.clone(),
        eigen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn cx(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_hermitian(n: usize, seed: u64) -> SquareMatrix {
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

    /// Four-particle demo data: trap positions 1..4, large momenta, unequal
    /// couplings g = (1,2,3,1,2,1) on the pair list.
    pub(crate) fn demo_seed() -> PhasePoint {
        let x = [1.0, 2.0, 3.0, 4.0];
        let p = [50.0, -50.0, 15.0, -10.0];
        let g = [1.0, 2.0, 3.0, 1.0, 2.0, 1.0];
        let upper: Vec<Complex64> = g.iter().map(|&gi| cx(0.0, gi)).collect();
        let l = CouplingMatrix::from_upper(4, &upper).unwrap();
        PhasePoint::seed_from_coupling(&x, &p, &l).unwrap()
    }

    #[test]
    fn free_flow_basics() {
        let p0 = PhasePoint::new(
            SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
                0.0, 1.0,
            ])))
            .unwrap(),
            SquareMatrix::real_symmetric(DMatrix::zeros(2, 2)).unwrap(),
        )
        .unwrap();
        let p = free_flow(&p0, 5.0);
        assert!((p.x.entries() - p0.x.entries()).norm() < 1e-15);

        let p0 = PhasePoint::new(
            SquareMatrix::real_symmetric(DMatrix::zeros(2, 2)).unwrap(),
            SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
                1.0, -1.0,
            ])))
            .unwrap(),
        )
        .unwrap();
        let p = free_flow(&p0, 2.0);
        assert_relative_eq!(p.x.entries()[(0, 0)].re, 2.0);
        assert_relative_eq!(p.x.entries()[(1, 1)].re, -2.0);
    }

    #[test]
    fn harmonic_flow_period_and_quarter_turn() {
        let p0 = PhasePoint::new(random_hermitian(3, 5), random_hermitian(3, 6)).unwrap();
        let p = harmonic_flow(&p0, 2.0 * std::f64::consts::PI);
        assert!((p.x.entries() - p0.x.entries()).norm() < 1e-13);
        assert!((p.y.entries() - p0.y.entries()).norm() < 1e-13);

        let x0 = random_hermitian(3, 7);
        let p0 = PhasePoint::new(
            x0.clone(),
            SquareMatrix::hermitian(DMatrix::zeros(3, 3)).unwrap(),
        )
        .unwrap();
        let p = harmonic_flow(&p0, std::f64::consts::FRAC_PI_2);
        assert!(p.x.entries().norm() < 1e-14);
        assert!((p.y.entries() + x0.entries()).norm() < 1e-14);
    }

    #[test]
    fn harmonic_demo_data_is_periodic() {
        let p0 = demo_seed();
        let frame0 = reduce(&p0, 0.0, None).unwrap();
        let p = harmonic_flow(&p0, 2.0 * std::f64::consts::PI);
        let frame1 = reduce(&p, 0.0, None).unwrap();
        for i in 0..4 {
            assert_relative_eq!(frame0.d[i], frame1.d[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn flows_have_group_property() {
        let p0 = PhasePoint::new(random_hermitian(4, 8), random_hermitian(4, 9)).unwrap();
        for (s, t) in [(0.3, 0.9), (1.1, -0.4)] {
            let a = free_flow(&free_flow(&p0, s), t);
            let b = free_flow(&p0, s + t);
            assert!((a.x.entries() - b.x.entries()).norm() < 1e-10);

            let a = harmonic_flow(&harmonic_flow(&p0, s), t);
            let b = harmonic_flow(&p0, s + t);
            assert!((a.x.entries() - b.x.entries()).norm() < 1e-10);
            assert!((a.y.entries() - b.y.entries()).norm() < 1e-10);
        }
    }

    fn random_sutherland_pair(n: usize, seed: u64) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
        // X0 unitary; Y0 = X0^† (iK) with K Hermitian makes X0 Y0 anti-Hermitian
        let h = random_hermitian(n, seed);
        let x0 = expi_hermitian(h.entries(), 1.0);
        let k = random_hermitian(n, seed + 1);
        let y0 = x0.adjoint() * k.entries().map(|z| Complex64::new(0.0, 1.0) * z);
        (x0, y0)
    }

    #[test]
    fn sutherland_flow_basics() {
        let (x0, _) = random_sutherland_pair(3, 20);
        let y0 = DMatrix::<Complex64>::zeros(3, 3);
        let (x, y) = sutherland_flow(&x0, &y0, 2.7).unwrap();
        assert!((x - &x0).norm() < 1e-12);
        assert!(y.norm() < 1e-15);

        // commuting case: X0 = 1, X0 Y0 = i·diag(1,-1): phases advance linearly
        let x0 = identity(2);
        let y0 = DMatrix::from_diagonal(&DVector::from_vec(vec![cx(0.0, 1.0), cx(0.0, -1.0)]));
        let t = std::f64::consts::PI;
        let (x, _) = sutherland_flow(&x0, &y0, t).unwrap();
        assert!((x[(0, 0)] - cx(-1.0, 0.0)).norm() < 1e-12);
        assert!((x[(1, 1)] - cx(-1.0, 0.0)).norm() < 1e-12);
        let phases = eigenphases_tracked(&x, None).unwrap();
        assert_relative_eq!(phases[0].abs(), std::f64::consts::PI, epsilon = 1e-10);
    }

    #[test]
    fn sutherland_stays_unitary_with_continuous_phases() {
        let (x0, y0) = random_sutherland_pair(3, 33);
        let mut prev: Option<Vec<f64>> = None;
        for k in 0..=30 {
            let t = 0.01 * k as f64;
            let (x, _) = sutherland_flow(&x0, &y0, t).unwrap();
            let res = (x.adjoint() * &x - identity(3)).norm();
            assert!(res < 1e-10, "unitarity residual {res}");
            let phases = eigenphases_tracked(&x, prev.as_deref()).unwrap();
            if let Some(p) = &prev {
                for i in 0..3 {
                    assert!((phases[i] - p[i]).abs() < 0.2);
                }
            }
            prev = Some(phases);
        }
    }

    #[test]
    fn sutherland_group_property() {
        let (x0, y0) = random_sutherland_pair(3, 41);
        let (xs, ys) = sutherland_flow(&x0, &y0, 0.4).unwrap();
        let (xst, _) = sutherland_flow(&xs, &ys, 0.35).unwrap();
        let (xt, _) = sutherland_flow(&x0, &y0, 0.75).unwrap();
        assert!((xst - xt).norm() < 1e-10);
    }

    #[test]
    fn sutherland_rejects_bad_classes() {
        let (x0, _) = random_sutherland_pair(3, 50);
        let y_bad = random_hermitian(3, 51).into_entries();
        assert!(sutherland_flow(&x0, &y_bad, 0.1).is_err());
        let x_bad = random_hermitian(3, 52).into_entries();
        assert!(sutherland_flow(&x_bad, &DMatrix::zeros(3, 3), 0.1).is_err());
    }

    #[test]
    fn ef_flow_commuting_and_decoupled_cases() {
        // [Y0, Φ0] = 0 → X(t) = X0 + t(Y0 + ξΦ0)
        let y0 = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, -0.5, 0.2,
        ])))
        .unwrap();
        let phi0 = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            0.3, 0.9, -0.1,
        ])))
        .unwrap();
        let x0 = random_hermitian(3, 60);
        let xi = 0.7;
        let p0 = ExtendedPoint::from_phi(x0.clone(), y0.clone(), phi0.clone(), xi).unwrap();
        let t = 1.3;
        let s = ef_flow(&p0, t).unwrap();
        let expected = x0.entries() + (y0.entries() + phi0.entries().scale(xi)).scale(t);
        assert!((s.x.entries() - expected).norm() < 1e-10);

        // ξ = 0 → free flow
        let phi0 = random_hermitian(3, 61);
        let p0 = ExtendedPoint::from_phi(x0.clone(), y0.clone(), phi0, 0.0).unwrap();
        let s = ef_flow(&p0, t).unwrap();
        let free = free_flow(&PhasePoint::new(x0, y0).unwrap(), t);
        assert!((s.x.entries() - free.x.entries()).norm() < 1e-10);
    }

    #[test]
    fn ef_flow_matches_pauli_closed_form() {
        let (x0v, y0v, phi0v, xi) = (0.7, 1.3, 0.9, 0.8);
        let mut ny = [0.2f64, 0.5, 0.8];
        let mut nphi = [0.9, -0.1, 0.3];
        for v in [&mut ny, &mut nphi] {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.iter_mut().for_each(|c| *c /= n);
        }
        let x0 = matcore::pauli_hermitian(0.0, [0.0, 0.0, x0v]);
        let y0 = matcore::pauli_hermitian(0.0, [y0v * ny[0], y0v * ny[1], y0v * ny[2]]);
        let phi0 =
            matcore::pauli_hermitian(0.0, [phi0v * nphi[0], phi0v * nphi[1], phi0v * nphi[2]]);
        let p0 = ExtendedPoint::from_phi(x0, y0, phi0, xi).unwrap();
        for t in [0.0, 0.4, 1.37, 3.0] {
            let a = ef_flow(&p0, t).unwrap();
            let b = ef_flow_pauli_n2(x0v, y0v, ny, phi0v, nphi, xi, t);
            assert!((a.x.entries() - b.x.entries()).norm() < 1e-9);
            assert!((a.phi.entries() - b.phi.entries()).norm() < 1e-9);
        }
    }

    #[test]
    fn ef_flow_group_property() {
        // restarting from (X(s), Y, Φ(s)) and flowing t more lands on the
        // direct (s + t) solution
        let x0 = random_hermitian(3, 65);
        let y0 = random_hermitian(3, 66);
        let phi0 = random_hermitian(3, 67);
        let xi = 0.9;
        let p0 = ExtendedPoint::from_phi(x0, y0, phi0, xi).unwrap();
        let (s, t) = (0.7, 1.1);
        let mid = ef_flow(&p0, s).unwrap();
        let restarted = ExtendedPoint::from_phi(mid.x, mid.y, mid.phi, xi).unwrap();
        let a = ef_flow(&restarted, t).unwrap();
        let b = ef_flow(&p0, s + t).unwrap();
        assert!((a.x.entries() - b.x.entries()).norm() < 1e-10);
        assert!((a.phi.entries() - b.phi.entries()).norm() < 1e-10);
    }

    #[test]
    fn ef_flow_handles_degenerate_y_eigenvalues() {
        // a repeated Y0 eigenvalue switches the entrywise integral to its
        // removable limit: the degenerate block grows linearly with t·ξ·Φ0
        let y0 = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, 1.0, 2.5,
        ])))
        .unwrap();
        let x0 = random_hermitian(3, 68);
        let phi0 = random_hermitian(3, 69);
        let xi = 0.8;
        let p0 = ExtendedPoint::from_phi(x0.clone(), y0, phi0.clone(), xi).unwrap();
        let t = 1.4;
        let s = ef_flow(&p0, t).unwrap();
        // entries inside the degenerate block follow the commuting solution
        let expected_01 =
            x0.entries()[(0, 1)] + Complex64::new(t * xi, 0.0) * phi0.entries()[(0, 1)];
        assert!((s.x.entries()[(0, 1)] - expected_01).norm() < 1e-9);
        // and the conserved combination still holds
        let c0 = ef_flow(&p0, 0.0).unwrap().conserved;
        assert!((s.conserved - c0).norm() < 1e-9);
    }

    #[test]
    fn ef_flow_conserves_commutator_combination() {
        let x0 = random_hermitian(4, 70);
        let y0 = random_hermitian(4, 71);
        let phi0 = random_hermitian(4, 72);
        let p0 = ExtendedPoint::from_phi(x0, y0, phi0, 0.9).unwrap();
        let c0 = ef_flow(&p0, 0.0).unwrap().conserved;
        for t in [0.5, 1.0, 2.5] {
            let c = ef_flow(&p0, t).unwrap().conserved;
            assert!((c - &c0).norm() < 1e-9);
        }
    }

    #[test]
    fn ef_entry_oscillation_frequencies() {
        // in Y0's eigenbasis, entry (i,j) of X(t) oscillates at ω = ξ Δy_ij
        let n = 3;
        let y_vals = [0.4, 1.1, 2.3];
        let y0 = SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(
            y_vals.to_vec(),
        )))
        .unwrap();
        let x0 = random_hermitian(n, 80);
        let phi0 = random_hermitian(n, 81);
        let xi = 1.2;
        let p0 = ExtendedPoint::from_phi(x0, y0, phi0, xi).unwrap();

        let samples = 512;
        let t_total = 40.0;
        for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
            // collect the oscillating residual of the (i,j) entry
            let mut series = Vec::with_capacity(samples);
            for k in 0..samples {
                let t = t_total * k as f64 / samples as f64;
                let s = ef_flow(&p0, t).unwrap();
                series.push(s.x.entries()[(i, j)]);
            }
            // naive DFT peak; the entries are complex tones, so negative
            // frequencies land in the upper half of the spectrum
            let mut best = (0usize, 0.0f64);
            for m in 1..samples {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, z) in series.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (m * k) as f64 / samples as f64;
                    acc += z * Complex64::new(ang.cos(), ang.sin());
                }
                if acc.norm() > best.1 {
                    best = (m, acc.norm());
                }
            }
            let folded = best.0.min(samples - best.0);
            let omega_measured = 2.0 * std::f64::consts::PI * folded as f64 / t_total;
            let omega_expected = xi * (y_vals[i] - y_vals[j]).abs();
            let bin = 2.0 * std::f64::consts::PI / t_total;
            assert!(
                (omega_measured - omega_expected).abs() <= bin,
                "entry ({i},{j}): measured {omega_measured}, expected {omega_expected}"
            );
        }
    }

    #[test]
    fn elementsum_linear_cases() {
        let y0 = SquareMatrix::hermitian(DMatrix::zeros(3, 3)).unwrap();
        let x0 = random_hermitian(3, 90);
        let p0 = PhasePoint::new(x0.clone(), y0).unwrap();
        let p = elementsum_linear_flow(&p0, 4.0);
        assert!((p.x.entries() - x0.entries()).norm() < 1e-15);

        // N=2: X(t) = X0 + t(Y0 + y00 σx + y0x 1)
        let (y00, yv) = (0.4, [0.7, -0.2, 0.5]);
        let y0 = matcore::pauli_hermitian(y00, yv);
        let x0 = random_hermitian(2, 91);
        let p0 = PhasePoint::new(x0.clone(), y0.clone()).unwrap();
        let t = 0.9;
        let p = elementsum_linear_flow(&p0, t);
        let extra = matcore::pauli_hermitian(yv[0], [y00, 0.0, 0.0]);
        let expected = x0.entries() + (y0.entries() + extra.entries()).scale(t);
        assert!((p.x.entries() - expected).norm() < 1e-12);

        // entrywise ½[M,Y]+ = Y_ij + ½(row sum + col sum without the entry itself)
        let y0 = random_hermitian(5, 92);
        let x0 = SquareMatrix::hermitian(DMatrix::zeros(5, 5)).unwrap();
        let p = elementsum_linear_flow(&PhasePoint::new(x0, y0.clone()).unwrap(), 1.0);
        for i in 0..5 {
            for j in 0..5 {
                let row: Complex64 = (0..5).map(|k| y0.entries()[(i, k)]).sum();
                let col: Complex64 = (0..5).map(|k| y0.entries()[(k, j)]).sum();
                let expected = (row + col) * cx(0.5, 0.0);
                assert!((p.x.entries()[(i, j)] - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn elementsum_harmonic_matches_explicit_n2() {
        let (x00, xz0) = (0.4, 0.9);
        let (y00, yv) = (0.3, [0.7, -0.2, 0.5]);
        let x0 = matcore::pauli_hermitian(x00, [0.0, 0.0, xz0]);
        let y0 = matcore::pauli_hermitian(y00, yv);
        let p0 = PhasePoint::new(x0, y0).unwrap();

        let t = 0.77;
        let p = elementsum_harmonic_flow(&p0, t);

        let x0t = 0.5 * (x00 * (1.0 + (2.0 * t).cos()) + (y00 + yv[0]) * (2.0 * t).sin());
        let y0t = 0.5 * ((y00 + yv[0]) * (2.0 * t).cos() - x00 * (2.0 * t).sin() + y00 - yv[0]);
        let xbar = [x0t - x00, yv[1] * t.sin(), xz0 * t.cos() + yv[2] * t.sin()];
        let ybar = [
            y0t - y00 + yv[0],
            yv[1] * t.cos(),
            -xz0 * t.sin() + yv[2] * t.cos(),
        ];
        let xe = matcore::pauli_hermitian(x0t, xbar);
        let ye = matcore::pauli_hermitian(y0t, ybar);
        assert!((p.x.entries() - xe.entries()).norm() < 1e-12);
        assert!((p.y.entries() - ye.entries()).norm() < 1e-12);

        // (Tr X - x00)² + (Tr Y - y00 + y0x)² is a constant of motion
        let c_of = |pp: &PhasePoint| {
            let trx: Complex64 = (0..2).map(|i| pp.x.entries()[(i, i)]).sum();
            let tr_y: Complex64 = (0..2).map(|i| pp.y.entries()[(i, i)]).sum();
            (trx.re - x00).powi(2) + (tr_y.re - y00 + yv[0]).powi(2)
        };
        assert_relative_eq!(c_of(&p0), c_of(&p), epsilon = 1e-12);
        assert_relative_eq!(
            c_of(&p0),
            c_of(&elementsum_harmonic_flow(&p0, 2.3)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn elementsum_harmonic_identity_at_zero_and_block_constancy() {
        let p0 = PhasePoint::new(random_hermitian(4, 95), random_hermitian(4, 96)).unwrap();
        let p = elementsum_harmonic_flow(&p0, 0.0);
        assert!((p.x.entries() - p0.x.entries()).norm() < 1e-13);

        // only 2N-1 real degrees of freedom move; the inner block returns
        // bit-close to its initial value after the basis round trip
        let basis = OnesProjectorBasis::new(4);
        let xb0 = basis.to_basis(p0.x.entries());
        let p = elementsum_harmonic_flow(&p0, 1.234);
        let xb = basis.to_basis(p.x.entries());
        for i in 1..4 {
            for j in 1..4 {
                assert!((xb[(i, j)] - xb0[(i, j)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn reduce_diagonal_x_and_cm_seed() {
        // X already diagonal: U = 1, L_ij = (x_i - x_j) Y_ij
        let x = [0.3, 1.1, 2.4];
        let x0 =
            SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(x.to_vec())))
                .unwrap();
        let y0 = random_hermitian(3, 100);
        let p0 = PhasePoint::new(x0, y0.clone()).unwrap();
        let frame = reduce(&p0, 0.0, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let expected = cx(x[i] - x[j], 0.0) * y0.entries()[(i, j)];
                    assert!((frame.l.entries()[(i, j)] - expected).norm() < 1e-12);
                }
            }
        }

        // ordinary-CM seed: |L_ij| = g
        let g = 0.8;
        let l = CouplingMatrix::ordinary_cm(4, g);
        let p0 = PhasePoint::seed_from_coupling(&[0.0, 1.0, 2.0, 3.0], &[0.1, -0.2, 0.3, 0.0], &l)
            .unwrap();
        let frame = reduce(&p0, 0.0, None).unwrap();
        for (i, j) in matcore::pair_iter(4) {
            assert_relative_eq!(frame.l.entries()[(i, j)].norm(), g, epsilon = 1e-10);
        }
    }

    #[test]
    fn reduce_along_free_flow_conserves_tr_powers() {
        let p0 = PhasePoint::new(
            SquareMatrix::real_symmetric(DMatrix::from_diagonal(&DVector::from_vec(vec![
                0.0, 1.0, 2.0, 3.0,
            ])))
            .unwrap(),
            random_hermitian(4, 110),
        )
        .unwrap();
        let mut prev: Option<SpectralFrame> = None;
        let mut tr_l2_0 = None;
        let mut trv = [None::<f64>; 3];
        for k in 0..=10 {
            let t = 0.1 * k as f64;
            let frame = reduce(&free_flow(&p0, t), t, prev.as_ref()).unwrap();
            let l = frame.l.entries();
            let v = frame.v.entries();
            let tr_l2 = (l * l).trace().re;
            match tr_l2_0 {
                None => tr_l2_0 = Some(tr_l2),
                Some(x0) => assert!((tr_l2 - x0).abs() < 1e-10 * (1.0 + x0.abs())),
            }
            // Tr V^k, k = 2, 3, 4 are flow invariants
            let mut vp = v.clone();
            for (k2, slot) in trv.iter_mut().enumerate() {
                vp = &vp * v;
                let tr = vp.trace().re;
                match slot {
                    None => *slot = Some(tr),
                    Some(x0) => {
                        assert!(
                            (tr - *x0).abs() < 1e-8 * (1.0 + x0.abs()),
                            "Tr V^{} drift",
                            k2 + 2
                        )
                    }
                }
            }
            prev = Some(frame);
        }
    }
}
