//! Reachable-set analysis of coupling matrices: the l-vector picture of the
//! orthogonal setting with its conjugation homomorphism and canonical-form
//! reachability test, the N=3 spherical-cap characterization of the unitary
//! setting, and Monte Carlo sampling of trajectory images.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::matcore::{pair_iter, CouplingMatrix};
use crate::reduced::{integrate_cml_grid, CmlModel, ReducedState};
use crate::{CoreError, Result};

/// Angle tolerance for canonical-form decisions.
pub const ANGLE_TOL: f64 = 1e-8;

/// A real antisymmetric coupling flattened into the vector
/// `(l_12, l_13, …, l_{N-1,N})`.
#[derive(Debug, Clone)]
pub struct LVector {
    pub n: usize,
    pub data: DVector<f64>,
}

impl LVector {
    pub fn new(n: usize, data: DVector<f64>) -> Result<Self> {
        if data.len() != n * (n - 1) / 2 {
            return Err(CoreError::DimensionMismatch {
                expected: n * (n - 1) / 2,
                got: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    /// Flattens a real antisymmetric coupling matrix.
    pub fn from_coupling(l: &CouplingMatrix) -> Result<Self> {
        let m = l.entries();
        let im = m.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        if im > 1e-10 * (1.0 + crate::matcore::max_abs(m)) {
            return Err(CoreError::ClassViolation(
                "l-vector requires a real antisymmetric coupling".into(),
            ));
        }
        let n = l.dim();
        let data = DVector::from_iterator(n * (n - 1) / 2, pair_iter(n).map(|(i, j)| m[(i, j)].re));
        Ok(Self { n, data })
    }

    pub fn to_coupling(&self) -> CouplingMatrix {
        let upper: Vec<Complex64> = self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        CouplingMatrix::from_upper(self.n, &upper).expect("antisymmetric by construction")
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }
}

fn orthogonality_residual(o: &DMatrix<f64>) -> f64 {
    let n = o.nrows();
    (o.transpose() * o - DMatrix::identity(n, n)).amax()
}

/// Matrix of the conjugation action `L ↦ O L Oᵀ` on l-vectors: the entry at
/// (pair (i,j), pair (k,l)) is the 2×2 minor `O_ik O_jl - O_il O_jk`.
/// A group homomorphism from O(N) into O(N(N-1)/2).
pub fn m_of_o(o: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = o.nrows();
    if o.ncols() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: o.ncols(),
        });
    }
    let res = orthogonality_residual(o);
    if res > 1e-10 {
        return Err(CoreError::ClassViolation(format!(
            "input is not orthogonal (residual {res:.3e})"
        )));
    }
    let np = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = pair_iter(n).collect();
    let mut m = DMatrix::<f64>::zeros(np, np);
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (b, &(k, l)) in pairs.iter().enumerate() {
            m[(a, b)] = o[(i, k)] * o[(j, l)] - o[(i, l)] * o[(j, k)];
        }
    }
    let res = orthogonality_residual(&m);
    if res > 1e-9 {
        return Err(CoreError::ClassViolation(format!(
            "conjugation matrix lost orthogonality (residual {res:.3e})"
        )));
    }
    Ok(m)
}

/// Real canonical form of a special orthogonal matrix: rotation angles of
/// the 2×2 blocks plus the dimension of the fixed subspace.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    /// Nontrivial block angles in (0, π], sorted ascending.
    pub angles: Vec<f64>,
    /// Dimension of the eigenvalue-1 subspace.
    pub fixed_dim: usize,
    /// Orthogonal similarity: `m = q · block · qᵀ`.
    pub q: DMatrix<f64>,
    pub block: DMatrix<f64>,
}

/// Canonical 2×2-rotation-block form, computed from the symmetric part of
/// the matrix: eigenvectors of `(M + Mᵀ)/2` with eigenvalue `cos θ < 1` pair
/// up into invariant rotation planes.
pub fn canonical_angles(m: &DMatrix<f64>) -> Result<CanonicalForm> {
    let n = m.nrows();
    let res = orthogonality_residual(m);
    if res > 1e-9 {
        return Err(CoreError::ClassViolation(format!(
            "input is not orthogonal (residual {res:.3e})"
        )));
    }
    let det = m.determinant();
    if det < 0.0 {
        return Err(CoreError::ClassViolation(
            "canonical form expects a special orthogonal matrix (det = -1)".into(),
        ));
    }
    let s = (m + m.transpose()).scale(0.5);
    let eig = s.symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());

    let mut q_cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut blocks: Vec<(f64, bool)> = Vec::new(); // (angle, is_pair)
    let mut start = 0;
    while start < n {
        let c0 = eig.eigenvalues[idx[start]];
        let mut end = start + 1;
        while end < n && (eig.eigenvalues[idx[end]] - c0).abs() < 1e-7 {
            end += 1;
        }
        let c = c0.clamp(-1.0, 1.0);
        let theta = c.acos();
        if theta.abs() <= ANGLE_TOL {
            // fixed directions
            for &k in &idx[start..end] {
                q_cols.push(eig.eigenvectors.column(k).into_owned());
                blocks.push((0.0, false));
            }
        } else {
            // rotation planes: repeatedly take a vector u from the cluster
            // span, pair it with (Mu - c u)/sin θ, and deflate
            let mut basis: Vec<DVector<f64>> = idx[start..end]
                .iter()
                .map(|&k| eig.eigenvectors.column(k).into_owned())
                .collect();
            while let Some(mut u) = basis.pop() {
                let nu = u.norm();
                if nu < 1e-8 {
                    continue;
                }
                u /= nu;
                let mut v = m * &u - &u * c;
                let sv = v.norm();
                if sv < 1e-9 {
                    // θ ≈ π and Mu = -u exactly: pair arbitrary within cluster
                    match basis.pop() {
                        Some(mut w) => {
                            // orthogonalize w against u
                            let proj = u.dot(&w);
                            w -= &u * proj;
                            let nw = w.norm();
                            if nw < 1e-8 {
                                return Err(CoreError::InvalidInput(
                                    "degenerate π-rotation cluster".into(),
                                ));
                            }
                            w /= nw;
                            q_cols.push(u);
                            q_cols.push(w);
                            blocks.push((std::f64::consts::PI, true));
                        }
                        None => {
                            return Err(CoreError::InvalidInput(
                                "unpaired reflection direction in a special orthogonal matrix"
                                    .into(),
                            ))
                        }
                    }
                    continue;
                }
                v /= sv;
                // deflate the remaining cluster vectors against span{u, v}
                for w in basis.iter_mut() {
                    let pu = u.dot(w);
                    let pv = v.dot(w);
                    *w -= &u * pu;
                    *w -= &v * pv;
                }
                q_cols.push(u);
                q_cols.push(v);
                blocks.push((theta, true));
            }
        }
        start = end;
    }

    let q = DMatrix::from_columns(&q_cols);
    let mut block = DMatrix::<f64>::zeros(n, n);
    let mut pos = 0;
    let mut angles = Vec::new();
    for (theta, is_pair) in blocks {
        if is_pair {
            let (c, s) = (theta.cos(), theta.sin());
            // orientation: sign of sin θ in the (u, v) plane
            let u = q.column(pos);
            let v = q.column(pos + 1);
            let s_actual = v.dot(&(m * u));
            let s_signed = if s_actual >= 0.0 { s } else { -s };
            block[(pos, pos)] = c;
            block[(pos, pos + 1)] = -s_signed;
            block[(pos + 1, pos)] = s_signed;
            block[(pos + 1, pos + 1)] = c;
            angles.push(theta);
            pos += 2;
        } else {
            block[(pos, pos)] = 1.0;
            pos += 1;
        }
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let fixed_dim = n - 2 * angles.len();

    let recon = &q * &block * q.transpose();
    let resid = (recon - m).amax();
    if resid > 1e-9 {
        return Err(CoreError::InvalidInput(format!(
            "canonical form reconstruction residual {resid:.3e}"
        )));
    }
    Ok(CanonicalForm {
        angles,
        fixed_dim,
        q,
        block,
    })
}

/// Sorted rotation invariants of a real antisymmetric matrix: the positive
/// members a_i of its ±i a_i eigenvalue pairs, descending.
pub fn singular_pairs(l: &LVector) -> Vec<f64> {
    let m = l.to_coupling();
    let k = m.to_hermitian();
    let mut vals: Vec<f64> = k.symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // spectrum is symmetric: take the positive half
    vals.truncate(l.n / 2);
    vals
}

/// Pfaffian of the antisymmetric matrix behind an l-vector, by recursive
/// expansion along the first row (N is small here).
pub fn pfaffian(l: &LVector) -> f64 {
    fn pf(m: &DMatrix<f64>, rows: &[usize]) -> f64 {
        let k = rows.len();
        if k == 0 {
            return 1.0;
        }
        let i = rows[0];
        let mut acc = 0.0;
        let mut sign = 1.0;
        for (pos, &j) in rows.iter().enumerate().skip(1) {
            let rest: Vec<usize> = rows[1..].iter().copied().filter(|&r| r != j).collect();
            acc += sign * m[(i, j)] * pf(m, &rest);
            let _ = pos;
            sign = -sign;
        }
        acc
    }
    let n = l.n;
    if !n.is_multiple_of(2) {
        return 0.0;
    }
    let c = l.to_coupling();
    let m = c.entries().map(|z| z.re);
    let rows: Vec<usize> = (0..n).collect();
    pf(&m, &rows)
}

/// Whether l' is reachable from l under the conjugation flow of the
/// orthogonal setting.
///
/// A target is reachable exactly when some special orthogonal conjugation
/// links the two couplings, which the canonical form reduces to two checks:
/// the rotation invariants (the canonical block magnitudes a_i) must match,
/// and for even N with no zero block the orientation invariant (the
/// Pfaffian) must match as well. For N = 3 equal norms always suffice.
pub fn reachable_orthogonal(l: &LVector, lp: &LVector, tol: f64) -> Result<bool> {
    if l.n != lp.n {
        return Err(CoreError::DimensionMismatch {
            expected: l.n,
            got: lp.n,
        });
    }
    let scale = l.norm().max(lp.norm()).max(1.0);
    if (l.norm() - lp.norm()).abs() > tol * scale {
        return Ok(false);
    }
    let a = singular_pairs(l);
    let b = singular_pairs(lp);
    for (x, y) in a.iter().zip(&b) {
        if (x - y).abs() > tol * scale {
            return Ok(false);
        }
    }
    if l.n.is_multiple_of(2) {
        let min_pair = a.last().copied().unwrap_or(0.0);
        if min_pair > tol * scale {
            // full-rank even case: orientation class is a genuine invariant
            let (pa, pb) = (pfaffian(l), pfaffian(lp));
            let pf_scale = scale.powi((l.n / 2) as i32);
            if (pa - pb).abs() > tol * pf_scale {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Spherical-cap fingerprint of an N=3 unitary-setting coupling: the sphere
/// radius |l̄(0)| and the conserved characteristic-polynomial product
/// `cos(Φ₁₂₃) l₁₂ l₂₃ l₃₁`.
#[derive(Debug, Clone, Copy)]
pub struct CapSpec {
    pub radius: f64,
    pub product: f64,
}

/// Magnitudes of an N=3 coupling in the cycle order (l12, l23, l31).
pub fn l_triple(l: &CouplingMatrix) -> [f64; 3] {
    let m = l.entries();
    [m[(0, 1)].norm(), m[(1, 2)].norm(), m[(2, 0)].norm()]
}

/// Cyclic phase sum of the Hermitian partner `K = -iL` over the 1→2→3 cycle.
pub fn phi123(l: &CouplingMatrix) -> f64 {
    let k = l.to_hermitian();
    let phi = k[(0, 1)].arg() + k[(1, 2)].arg() + k[(2, 0)].arg();
    // wrap to (-π, π]
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = phi % two_pi;
    if x <= -std::f64::consts::PI {
        x += two_pi;
    } else if x > std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

/// `Re(K₁₂ K₂₃ K₃₁) = cos(Φ₁₂₃) l₁₂ l₂₃ l₃₁`, conserved along the flow.
pub fn cap_product(l: &CouplingMatrix) -> f64 {
    let k = l.to_hermitian();
    (k[(0, 1)] * k[(1, 2)] * k[(2, 0)]).re
}

impl CapSpec {
    pub fn new(radius: f64, product: f64) -> Result<Self> {
        if radius < 0.0 {
            return Err(CoreError::InvalidInput("cap radius must be ≥ 0".into()));
        }
        let bound = (radius / 3.0_f64.sqrt()).powi(3);
        if product.abs() > bound + 1e-9 * (1.0 + bound) {
            return Err(CoreError::InvalidInput(format!(
                "cap product {product:.3e} exceeds the sphere bound {bound:.3e}"
            )));
        }
        Ok(Self { radius, product })
    }

    pub fn from_coupling(l: &CouplingMatrix) -> Result<Self> {
        if l.dim() != 3 {
            return Err(CoreError::DimensionMismatch {
                expected: 3,
                got: l.dim(),
            });
        }
        let t = l_triple(l);
        let radius = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        Self::new(radius, cap_product(l))
    }

    /// N=3 coupling with magnitudes `l̄ = (l12, l23, l31)` and cyclic phase
    /// sum `phi` placed on the (1,2) leg.
    pub fn coupling_from_l(lbar: [f64; 3], phi: f64) -> Result<CouplingMatrix> {
        // K entries: K12 = l12 e^{iφ}, K23 = l23, K31 = l31
        // L = iK with K Hermitian
        let i = Complex64::new(0.0, 1.0);
        let k01 = Complex64::from_polar(lbar[0], phi);
        let k12 = Complex64::new(lbar[1], 0.0);
        let k20 = Complex64::new(lbar[2], 0.0);
        let upper = [i * k01, i * k20.conj(), i * k12];
        CouplingMatrix::from_upper(3, &upper)
    }
}

/// Membership in the reachable cap: on the sphere of the given radius with
/// `cos(Φ₁₂₃) l₁₂ l₂₃ l₃₁ ≥ product - tol` (the conserved product can only
/// be reached from level surfaces at or above the initial one).
pub fn cap_test_n3(spec: &CapSpec, candidate: &CouplingMatrix, tol: f64) -> Result<bool> {
    if candidate.dim() != 3 {
        return Err(CoreError::DimensionMismatch {
            expected: 3,
            got: candidate.dim(),
        });
    }
    let t = l_triple(candidate);
    let r = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
    if (r - spec.radius).abs() > tol {
        return Ok(false);
    }
    Ok(cap_product(candidate) >= spec.product - tol)
}

/// One sampled point of a trajectory image.
#[derive(Debug, Clone, Copy)]
pub struct SamplePoint {
    pub traj: u32,
    pub t: f64,
    pub l12: f64,
    pub l23: f64,
    pub l31: f64,
    pub phi123: f64,
}

/// Monte Carlo image of the coupling flow from a fixed L0 under random
/// positions and momenta.
#[derive(Debug, Clone)]
pub struct SampleCloud {
    pub spec: CapSpec,
    pub points: Vec<SamplePoint>,
    pub failures: usize,
    pub seed: u64,
}

impl SampleCloud {
    /// Largest angular distance of any sample from the cap center direction
    /// (1,1,1)/√3.
    pub fn max_cap_opening(&self) -> f64 {
        let c = 1.0 / 3.0_f64.sqrt();
        self.points
            .iter()
            .map(|p| {
                let r = (p.l12 * p.l12 + p.l23 * p.l23 + p.l31 * p.l31).sqrt();
                if r < 1e-300 {
                    return 0.0;
                }
                let cosang = (c * (p.l12 + p.l23 + p.l31) / r).clamp(-1.0, 1.0);
                cosang.acos()
            })
            .fold(0.0, f64::max)
    }
}

/// Draws `n_traj` random initial conditions (positions sorted uniform on
/// [-2, 2] with a 0.05 minimum gap; momenta standard normal scaled by 5),
/// integrates the reduced free flow from L0, and emits the l̄ samples on the
/// output grid. Per-trajectory random streams are derived from
/// (seed, trajectory index), so the result does not depend on scheduling.
pub fn sample_image(
    l0: &CouplingMatrix,
    n_traj: usize,
    t_grid: &[f64],
    seed: u64,
) -> Result<SampleCloud> {
    if l0.dim() != 3 {
        return Err(CoreError::DimensionMismatch {
            expected: 3,
            got: l0.dim(),
        });
    }
    let spec = CapSpec::from_coupling(l0)?;
    let results: Vec<std::result::Result<Vec<SamplePoint>, ()>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(traj as u64 + 1);
            let x = loop {
                let mut v: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if v.windows(2).all(|w| w[1] - w[0] >= 0.05) {
                    break v;
                }
            };
            let p: Vec<f64> = (0..3)
                .map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let s0 = match ReducedState::new(x, p, l0.clone(), CmlModel::free()) {
                Ok(s) => s,
                Err(_) => return Err(()),
            };
            match integrate_cml_grid(&s0, t_grid, 1e-10) {
                Ok(tr) => Ok(tr
                    .times
                    .iter()
                    .zip(&tr.states)
                    .map(|(&t, s)| {
                        let lt = l_triple(&s.l);
                        SamplePoint {
                            traj: traj as u32,
                            t,
                            l12: lt[0],
                            l23: lt[1],
                            l31: lt[2],
                            phi123: phi123(&s.l),
                        }
                    })
                    .collect()),
                Err(_) => Err(()),
            }
        })
        .collect();

    let mut points = Vec::new();
    let mut failures = 0;
    for r in results {
        match r {
            Ok(mut pts) => points.append(&mut pts),
            Err(()) => failures += 1,
        }
    }
    Ok(SampleCloud {
        spec,
        points,
        failures,
        seed,
    })
}
