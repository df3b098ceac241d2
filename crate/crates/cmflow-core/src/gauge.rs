//! Gauge-equivalence structure of coupling matrices: conjugation by diagonal
//! phase matrices leaves the magnitudes |L_ij| and the cyclic phase sums
//! Φ_ijk invariant, and together those two families are a complete
//! invariant.

use num_complex::Complex64;

use crate::matcore::{pair_index, pair_iter, CouplingMatrix};

/// Magnitudes below this are treated as zero couplings; triples touching
/// them carry no phase information.
pub const MAGNITUDE_TOL: f64 = 1e-12;

/// Tolerance for comparing triple sums, in radians.
pub const ANGLE_TOL: f64 = 1e-8;

/// Relative tolerance for comparing magnitudes.
pub const MAG_REL_TOL: f64 = 1e-8;

/// Gauge-invariant fingerprint of a coupling matrix: all |L_ij| for i<j and
/// the cyclic phase sums Φ_ijk for i<j<k (an independent spanning set is the
/// subfamily Φ_{1jk}; all triples are stored for convenience and for the
/// antisymmetry accessor).
#[derive(Debug, Clone)]
pub struct GaugeClass {
    pub n: usize,
    /// |L_ij| in row-major pair order.
    pub magnitudes: Vec<f64>,
    /// Φ_ijk in lexicographic triple order; `None` when any leg magnitude is
    /// below tolerance.
    pub triples: Vec<Option<f64>>,
}

fn wrap_angle(a: f64) -> f64 {
    // into (-π, π]
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x <= -std::f64::consts::PI {
        x += two_pi;
    } else if x > std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

/// Lexicographic triples i<j<k.
pub fn triple_iter(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).flat_map(move |j| (j + 1..n).map(move |k| (i, j, k))))
}

pub fn triple_index(i: usize, j: usize, k: usize, n: usize) -> usize {
    debug_assert!(i < j && j < k && k < n);
    // count triples before (i,j,k)
    let c3 = |m: usize| m * (m.saturating_sub(1)) * (m.saturating_sub(2)) / 6;
    let c2 = |m: usize| m * (m.saturating_sub(1)) / 2;
    c3(n) - c3(n - i) + (c2(n - i - 1) - c2(n - j)) + (k - j - 1)
}

impl GaugeClass {
    pub fn magnitude(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.magnitudes[pair_index(a, b, self.n)]
    }

    /// Φ for an arbitrary index triple; antisymmetric under odd permutations.
    pub fn triple(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let mut v = [i, j, k];
        let mut sign = 1.0;
        // sort with parity tracking
        for a in 0..2 {
            for b in 0..2 - a {
                if v[b] > v[b + 1] {
                    v.swap(b, b + 1);
                    sign = -sign;
                }
            }
        }
        self.triples[triple_index(v[0], v[1], v[2], self.n)].map(|phi| wrap_angle(sign * phi))
    }

    pub fn undefined_triples(&self) -> usize {
        self.triples.iter().filter(|t| t.is_none()).count()
    }
}

/// Extracts the gauge-invariant fingerprint: Φ_ijk = φ_ij + φ_jk + φ_ki with
/// φ the entry phases of L. Triples with any |L| below `MAGNITUDE_TOL`
/// (relative to the largest magnitude) are flagged undefined.
pub fn triple_sums(l: &CouplingMatrix) -> GaugeClass {
    let n = l.dim();
    let m = l.entries();
    let mags: Vec<f64> = pair_iter(n).map(|(i, j)| m[(i, j)].norm()).collect();
    let scale = mags.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let tol = MAGNITUDE_TOL * scale.max(1.0);
    let defined = |i: usize, j: usize| {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        mags[pair_index(a, b, n)] > tol
    };
    let triples = triple_iter(n)
        .map(|(i, j, k)| {
            if defined(i, j) && defined(j, k) && defined(k, i) {
                let phi = m[(i, j)].arg() + m[(j, k)].arg() + m[(k, i)].arg();
                Some(wrap_angle(phi))
            } else {
                None
            }
        })
        .collect();
    GaugeClass {
        n,
        magnitudes: mags,
        triples,
    }
}

fn angle_dist(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Supremum distances between two fingerprints: `(magnitude, triple)` parts.
/// Triples undefined on either side are skipped.
pub fn class_distance(a: &GaugeClass, b: &GaugeClass) -> (f64, f64) {
    let mag = a
        .magnitudes
        .iter()
        .zip(&b.magnitudes)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let tri = a
        .triples
        .iter()
        .zip(&b.triples)
        .filter_map(|(x, y)| match (x, y) {
            (Some(p), Some(q)) => Some(angle_dist(*p, *q)),
            _ => None,
        })
        .fold(0.0, f64::max);
    (mag, tri)
}

/// Decides gauge equivalence and, when equivalent, recovers explicit phases
/// with `L'_ij = L_ij e^{i(φ_i - φ_j)}` and `φ_1 = 0`.
///
/// The decision compares magnitudes (relative `MAG_REL_TOL`) and triple sums
/// (`ANGLE_TOL`), then verifies the reconstruction from chained phases; the
/// chain walks consecutive pairs where couplings are nonzero and spans the
/// nonzero graph by breadth-first search otherwise.
pub fn is_gauge_equivalent(l: &CouplingMatrix, lp: &CouplingMatrix) -> Option<Vec<f64>> {
    if l.dim() != lp.dim() {
        return None;
    }
    let n = l.dim();
    let ca = triple_sums(l);
    let cb = triple_sums(lp);
    let scale = ca
        .magnitudes
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(1e-300);
    for (x, y) in ca.magnitudes.iter().zip(&cb.magnitudes) {
        if (x - y).abs() > MAG_REL_TOL * scale.max(1.0) {
            return None;
        }
    }
    for (x, y) in ca.triples.iter().zip(&cb.triples) {
        match (x, y) {
            (Some(p), Some(q)) => {
                if angle_dist(*p, *q) > ANGLE_TOL {
                    return None;
                }
            }
            (None, None) => {}
            _ => return None,
        }
    }

    // phase recovery: α-differences chained over a spanning structure of the
    // nonzero-coupling graph
    let tol = MAGNITUDE_TOL * scale.max(1.0);
    let ml = l.entries();
    let mp = lp.entries();
    let mut phases = vec![0.0f64; n];
    let mut have = vec![false; n];
    have[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if have[j] || i == j {
                continue;
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if ca.magnitudes[pair_index(a, b, n)] <= tol {
                continue;
            }
            // L'_ij = L_ij e^{i(φ_i - φ_j)} → φ_j = φ_i - arg(L'_ij / L_ij)
            let alpha = (mp[(i, j)] / ml[(i, j)]).arg();
            phases[j] = phases[i] - alpha;
            have[j] = true;
            queue.push_back(j);
        }
    }
    // indices untouched by any coupling keep phase 0

    // verify the reconstruction on all nonzero entries
    for (i, j) in pair_iter(n) {
        if ca.magnitudes[pair_index(i, j, n)] <= tol {
            if cb.magnitudes[pair_index(i, j, n)] > tol {
                return None;
            }
            continue;
        }
        let rot = Complex64::from_polar(1.0, phases[i] - phases[j]);
        let rec = ml[(i, j)] * rot;
        if (rec - mp[(i, j)]).norm() > 1e-7 * scale.max(1.0) {
            return None;
        }
    }
    Some(phases)
}

/// Canonical gauge representative: phases chained so the first-row entries
/// sit at phase π/2 (the ordinary-CM alignment) wherever |L_1j| is nonzero.
/// Idempotent, bitwise.
pub fn canonical_rep(l: &CouplingMatrix) -> CouplingMatrix {
    let n = l.dim();
    let m = l.entries();
    let scale = crate::matcore::max_abs(m);
    let tol = MAGNITUDE_TOL * scale.max(1.0);
    let mut phases = vec![0.0f64; n];
    let mut fixed = vec![false; n];
    for j in 1..n {
        if m[(0, j)].norm() > tol {
            phases[j] = m[(0, j)].arg() - std::f64::consts::FRAC_PI_2;
            fixed[j] = true;
        }
    }
    let mut out = m.clone();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = phases[i] - phases[j];
                if d != 0.0 {
                    out[(i, j)] *= Complex64::from_polar(1.0, d);
                }
            }
        }
    }
    // pin the fixed first-row entries to exactly i·|L_0j|: `arg` of these is
    // then exactly π/2, which makes the map idempotent bit for bit
    for j in 1..n {
        if fixed[j] {
            let mag = out[(0, j)].norm();
            out[(0, j)] = Complex64::new(0.0, mag);
            out[(j, 0)] = Complex64::new(0.0, mag);
        }
    }
    CouplingMatrix::new(out).expect("diagonal conjugation preserves the coupling class")
}

/// Splits L into its real-antisymmetric and imaginary-symmetric parts,
/// orthogonal in the Hilbert-Schmidt sense.
pub fn setting_split(l: &CouplingMatrix) -> (CouplingMatrix, CouplingMatrix) {
    let m = l.entries();
    let real = m.map(|z| Complex64::new(z.re, 0.0));
    let imag = m.map(|z| Complex64::new(0.0, z.im));
    (
        CouplingMatrix::new(real).expect("real part of anti-Hermitian is antisymmetric"),
        CouplingMatrix::new(imag).expect("imaginary part of anti-Hermitian is symmetric"),
    )
}
