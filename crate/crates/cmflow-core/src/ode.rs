//! Embedded Runge-Kutta 5(4) integration (Dormand-Prince pair) with PI step
//! control. Step sizes are additionally capped by the system itself, which
//! is how close particle approaches are handled upstream.

use crate::{CoreError, Result};

/// Right-hand side of an autonomous-in-form ODE system plus the hooks the
/// integrator needs: a state-dependent step cap and a validity check.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn deriv(&self, t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()>;

    /// Upper bound on the step size from the current state; `INFINITY`
    /// when no cap applies.
    fn max_step(&self, _t: f64, _y: &[f64]) -> f64 {
        f64::INFINITY
    }

    /// Reports the quantity used in step-underflow diagnostics (the minimum
    /// particle gap for the particle systems).
    fn min_gap(&self, _y: &[f64]) -> f64 {
        f64::INFINITY
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
// difference between 5th- and 4th-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
// PI controller exponents for a 5(4) pair
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;

pub struct Integrator<'a, S: OdeSystem> {
    sys: &'a S,
    pub t: f64,
    pub y: Vec<f64>,
    tol: f64,
    h: f64,
    err_old: f64,
    k: Vec<Vec<f64>>,
    pub steps_taken: usize,
    pub steps_rejected: usize,
}

impl<'a, S: OdeSystem> Integrator<'a, S> {
    pub fn new(sys: &'a S, t0: f64, y0: Vec<f64>, tol: f64) -> Result<Self> {
        let n = sys.dim();
        if y0.len() != n {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: y0.len(),
            });
        }
        let mut k = vec![vec![0.0; n]; 7];
        sys.deriv(t0, &y0, &mut k[0])?;
        // crude initial step from the derivative scale
        let dnorm = k[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        let ynorm = y0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = (0.01 * (1.0 + ynorm) / (1.0 + dnorm)).min(0.1);
        Ok(Self {
            sys,
            t: t0,
            y: y0,
            tol,
            h,
            err_old: 1e-4,
            k,
            steps_taken: 0,
            steps_rejected: 0,
        })
    }

    /// Advances to exactly `t_target` (forward integration only).
    pub fn advance_to(&mut self, t_target: f64) -> Result<()> {
        let n = self.sys.dim();
        let mut y_stage = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        while self.t < t_target {
            let cap = self.sys.max_step(self.t, &self.y);
            let mut h = self.h.min(cap).min(t_target - self.t);
            if h <= 0.0 || !h.is_finite() || self.t + h == self.t {
                return Err(CoreError::StepUnderflow {
                    t: self.t,
                    h,
                    min_gap: self.sys.min_gap(&self.y),
                });
            }

            // stages 2..7 (k[0] holds f(t, y) from the previous step, FSAL)
            let mut stage_err: Option<CoreError> = None;
            for s in 0..6 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, kj) in self.k.iter().enumerate().take(s + 1) {
                        acc += A[s][j] * kj[i];
                    }
                    y_stage[i] = self.y[i] + h * acc;
                }
                if let Err(e) = self
                    .sys
                    .deriv(self.t + C[s] * h, &y_stage, &mut self.k[s + 1])
                {
                    stage_err = Some(e);
                    break;
                }
            }
            if let Some(e) = stage_err {
                // a stage stepped into an invalid region; retry smaller
                self.h = h * 0.25;
                self.steps_rejected += 1;
                if self.h < 1e-14 * (1.0 + self.t.abs()) {
                    return Err(e);
                }
                continue;
            }
            // 5th-order solution is the last stage evaluation point (FSAL form)
            y_new.copy_from_slice(&y_stage);

            // embedded error estimate
            let mut err = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for (j, kj) in self.k.iter().enumerate() {
                    e += E[j] * kj[i];
                }
                e *= h;
                let sc = self.tol + self.tol * self.y[i].abs().max(y_new[i].abs());
                err += (e / sc) * (e / sc);
            }
            err = (err / n as f64).sqrt();

            if err <= 1.0 {
                self.t += h;
                self.y.copy_from_slice(&y_new);
                self.k.swap(0, 6); // FSAL
                self.steps_taken += 1;
                let err_clamped = err.max(1e-10);
                let fac = SAFETY * err_clamped.powf(-ALPHA) * self.err_old.powf(BETA);
                self.h = h * fac.clamp(MIN_FACTOR, MAX_FACTOR);
                self.err_old = err_clamped;
            } else {
                self.steps_rejected += 1;
                let fac = SAFETY * err.powf(-0.2);
                h *= fac.clamp(MIN_FACTOR, 1.0);
                self.h = h;
                if h < 1e-14 * (1.0 + self.t.abs()) {
                    return Err(CoreError::StepUnderflow {
                        t: self.t,
                        h,
                        min_gap: self.sys.min_gap(&self.y),
                    });
                }
                // k[0] still holds f(t, y); retry
            }
        }
        Ok(())
    }
}

/// Integrates over `t_grid` (strictly increasing, starting at the initial
/// time) and calls `observe` with the state at every grid point, including
/// the first.
pub fn solve_on_grid<S: OdeSystem>(
    sys: &S,
    t_grid: &[f64],
    y0: Vec<f64>,
    tol: f64,
    mut observe: impl FnMut(f64, &[f64]) -> Result<()>,
) -> Result<()> {
    let mut integ = Integrator::new(sys, t_grid[0], y0, tol)?;
    observe(integ.t, &integ.y)?;
    for &t in &t_grid[1..] {
        integ.advance_to(t)?;
        observe(integ.t, &integ.y)?;
    }
    Ok(())
}

/// Uniform output grid on `[0, t_end]` with `n_out` intervals.
pub fn uniform_grid(t_end: f64, n_out: usize) -> Vec<f64> {
    (0..=n_out)
        .map(|k| t_end * k as f64 / n_out as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn deriv(&self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
            dydt[0] = -y[0];
            Ok(())
        }
    }

    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn deriv(&self, _t: f64, y: &[f64], dydt: &mut [f64]) -> Result<()> {
            dydt[0] = y[1];
            dydt[1] = -y[0];
            Ok(())
        }
    }

    #[test]
    fn exponential_decay_accuracy() {
        for tol in [1e-6, 1e-10] {
            let mut integ = Integrator::new(&Decay, 0.0, vec![1.0], tol).unwrap();
            integ.advance_to(5.0).unwrap();
            let err = (integ.y[0] - (-5.0f64).exp()).abs();
            assert!(err < 100.0 * tol, "tol {tol}: err {err}");
        }
    }

    #[test]
    fn oscillator_full_period() {
        let mut integ = Integrator::new(&Oscillator, 0.0, vec![1.0, 0.0], 1e-12).unwrap();
        integ.advance_to(2.0 * std::f64::consts::PI).unwrap();
        assert!((integ.y[0] - 1.0).abs() < 1e-9);
        assert!(integ.y[1].abs() < 1e-9);
    }

    #[test]
    fn grid_observation_hits_grid_points() {
        let grid = uniform_grid(1.0, 10);
        let mut seen = Vec::new();
        solve_on_grid(&Decay, &grid, vec![1.0], 1e-9, |t, y| {
            seen.push((t, y[0]));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 11);
        for (k, (t, y)) in seen.iter().enumerate() {
            assert!((t - grid[k]).abs() < 1e-15);
            assert!((y - (-t).exp()).abs() < 1e-7);
        }
    }

    struct Capped;
    impl OdeSystem for Capped {
        fn dim(&self) -> usize {
            1
        }
        fn deriv(&self, _t: f64, _y: &[f64], dydt: &mut [f64]) -> Result<()> {
            dydt[0] = 1.0;
            Ok(())
        }
        fn max_step(&self, _t: f64, _y: &[f64]) -> f64 {
            1e-3
        }
    }

    #[test]
    fn step_cap_is_respected() {
        let mut integ = Integrator::new(&Capped, 0.0, vec![0.0], 1e-6).unwrap();
        integ.advance_to(0.1).unwrap();
        assert!(integ.steps_taken >= 100);
    }
}
