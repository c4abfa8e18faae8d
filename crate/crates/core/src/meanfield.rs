//! First-moment equations of the linear system started from `(1, 0)` at
//! every site.
//!
//! By translation invariance `(E zeta_t(O), E theta_t(O))` solves
//! `f' = G f` with
//!
//! ```text
//! G = [ -1      gamma              ]
//!     [ 2d*lam  -(1 + gamma + delta) ]
//! ```
//!
//! Both eigenvalues of `G` have negative real part exactly when
//! `2d * lambda * gamma < 1 + gamma + delta`, which yields the lower bound
//! `(1 / 2d) (1 + (1 + delta) / gamma)` on the critical infection rate.

use num_complex::Complex64;

use crate::engine::ProcessParams;
use crate::error::{Error, Result};

/// Eigenvalues closer than this are treated as a repeated root.
pub const CONFLUENT_GAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentMatrix {
    /// Row-major; index 0 is the zeta moment, index 1 the theta moment.
    pub entries: [[f64; 2]; 2],
}

impl MomentMatrix {
    pub fn trace(&self) -> f64 {
        self.entries[0][0] + self.entries[1][1]
    }

    pub fn det(&self) -> f64 {
        let m = &self.entries;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, v: (f64, f64)) -> (f64, f64) {
        let m = &self.entries;
        (m[0][0] * v.0 + m[0][1] * v.1, m[1][0] * v.0 + m[1][1] * v.1)
    }

    /// Roots of `mu^2 - tr mu + det`, ordered by real part, largest first.
    pub fn eigenvalues(&self) -> [Complex64; 2] {
        let b = -self.trace();
        let c = self.det();
        let disc = b * b - 4.0 * c;
        let (r1, r2) = if disc >= 0.0 {
            // Citardauq form for the small root keeps it exact when c = 0.
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            if q == 0.0 {
                (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0))
            } else {
                (Complex64::new(q, 0.0), Complex64::new(c / q, 0.0))
            }
        } else {
            let im = 0.5 * (-disc).sqrt();
            (Complex64::new(-0.5 * b, im), Complex64::new(-0.5 * b, -im))
        };
        if r1.re >= r2.re {
            [r1, r2]
        } else {
            [r2, r1]
        }
    }

    /// `exp(t M) (1, 0)^T`.
    pub fn propagate_unit(&self, t: f64) -> (f64, f64) {
        let [c1, c2] = self.eigenvalues();
        let (a, g10) = (self.entries[0][0], self.entries[1][0]);
        if (c1 - c2).norm() < CONFLUENT_GAP {
            let c = 0.5 * (c1 + c2);
            let e = (c * t).exp();
            let zeta = e * (1.0 + t * (a - c));
            let theta = e * t * g10;
            (zeta.re, theta.re)
        } else {
            let (e1, e2) = ((c1 * t).exp(), (c2 * t).exp());
            let zeta = (e1 * (a - c2) - e2 * (a - c1)) / (c1 - c2);
            let theta = (e1 - e2) * g10 / (c1 - c2);
            (zeta.re, theta.re)
        }
    }
}

pub fn build_g(d: usize, p: &ProcessParams) -> MomentMatrix {
    MomentMatrix {
        entries: [
            [-1.0, p.gamma],
            [2.0 * d as f64 * p.lambda, -(1.0 + p.gamma + p.delta)],
        ],
    }
}

pub fn eigenvalues(g: &MomentMatrix) -> [Complex64; 2] {
    g.eigenvalues()
}

pub fn max_real_eigenvalue(d: usize, p: &ProcessParams) -> f64 {
    build_g(d, p).eigenvalues()[0].re
}

/// `2d * lambda * gamma < 1 + gamma + delta`.
pub fn is_subcritical(d: usize, p: &ProcessParams) -> bool {
    2.0 * d as f64 * p.lambda * p.gamma < 1.0 + p.gamma + p.delta
}

/// `(E zeta_t(O), E theta_t(O))` for the all-`(1, 0)` initial state.
pub fn solve_moments(d: usize, p: &ProcessParams, t: f64) -> Result<(f64, f64)> {
    if d == 0 {
        return Err(Error::Parameter("dimension must be at least 1".into()));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Parameter(format!("time {t} must be finite and >= 0")));
    }
    p.validate()?;
    Ok(build_g(d, p).propagate_unit(t))
}

/// `(1 / 2d) (1 + (1 + delta) / gamma)`.
pub fn lower_bound_lambda(d: usize, gamma: f64, delta: f64) -> f64 {
    (1.0 + (1.0 + delta) / gamma) / (2.0 * d as f64)
}

/// The limit of `2d * lambda_c` as `d` grows, `1 + (1 + delta) / gamma`.
pub fn scaled_target(gamma: f64, delta: f64) -> f64 {
    1.0 + (1.0 + delta) / gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn params(l: f64, g: f64, d: f64) -> ProcessParams {
        ProcessParams::new(l, g, d).unwrap()
    }

    #[test]
    fn g_entries() {
        let g = build_g(1, &params(1.0, 1.0, 1.0));
        assert_eq!(g.entries, [[-1.0, 1.0], [2.0, -3.0]]);
        let p = params(0.37, 2.5, 0.8);
        let g = build_g(4, &p);
        assert!((g.trace() + (2.0 + 2.5 + 0.8)).abs() < 1e-14);
        assert!((g.det() - ((1.0 + 2.5 + 0.8) - 8.0 * 0.37 * 2.5)).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_by_quadratic_formula() {
        let [c1, c2] = build_g(1, &params(1.0, 1.0, 1.0)).eigenvalues();
        let s3 = 3f64.sqrt();
        assert!((c1.re - (-2.0 + s3)).abs() < 1e-14 && c1.im == 0.0);
        assert!((c2.re - (-2.0 - s3)).abs() < 1e-14);
    }

    #[test]
    fn equality_point_has_zero_eigenvalue() {
        // 2 * 5 * 0.3 * 1 = 3 = 1 + 1 + 1
        assert!(max_real_eigenvalue(5, &params(0.3, 1.0, 1.0)).abs() < 1e-12);
        assert!(max_real_eigenvalue(5, &params(0.29, 1.0, 1.0)) < 0.0);
        assert!(max_real_eigenvalue(5, &params(0.31, 1.0, 1.0)) > 0.0);
    }

    #[test]
    fn complex_pair() {
        let m = MomentMatrix { entries: [[-1.0, -2.0], [2.0, -1.0]] };
        let [c1, c2] = m.eigenvalues();
        assert!((c1.re + 1.0).abs() < 1e-14 && (c1.im.abs() - 2.0).abs() < 1e-14);
        assert_eq!(c1.re, c2.re);
        // exp(tM)(1,0) = e^{-t} (cos 2t, sin 2t)
        let (z, th) = m.propagate_unit(0.7);
        assert!((z - (-0.7f64).exp() * (1.4f64).cos()).abs() < 1e-12);
        assert!((th - (-0.7f64).exp() * (1.4f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn confluent_branch() {
        let m = MomentMatrix { entries: [[-1.0, 0.0], [1.0, -1.0]] };
        let t: f64 = 1.3;
        let (z, th) = m.propagate_unit(t);
        assert!((z - (-t).exp()).abs() < 1e-14);
        assert!((th - t * (-t).exp()).abs() < 1e-14);
    }

    #[test]
    fn initial_value_and_slope() {
        let p = params(0.4, 1.7, 0.3);
        let d = 3;
        assert_eq!(solve_moments(d, &p, 0.0).unwrap(), (1.0, 0.0));
        let h = 1e-6;
        let (z, th) = solve_moments(d, &p, h).unwrap();
        assert!(((z - 1.0) / h + 1.0).abs() < 1e-5);
        assert!((th / h - 2.0 * d as f64 * 0.4).abs() < 1e-5);
    }

    #[test]
    fn subcritical_moments_vanish() {
        let p = params(0.29, 1.0, 1.0);
        let (z, th) = solve_moments(5, &p, 1000.0).unwrap();
        assert!(z.abs() < 1e-6 && th.abs() < 1e-6, "{z} {th}");
        // Decay is slow this close to the threshold: the leading rate is
        // about -0.025, so the moments are still O(0.1) at t = 50.
        let (z50, _) = solve_moments(5, &p, 50.0).unwrap();
        assert!(z50 > 0.1 && z50 < 0.3);
    }

    #[test]
    fn satisfies_ode_by_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..20 {
            let d = rng.random_range(1..12);
            let p = params(rng.random_range(0.01..1.0), rng.random_range(0.1..5.0), rng.random_range(0.0..3.0));
            let t = rng.random_range(0.1..10.0);
            let g = build_g(d, &p);
            let (zp, tp) = solve_moments(d, &p, t + h).unwrap();
            let (zm, tm) = solve_moments(d, &p, t - h).unwrap();
            let fd = ((zp - zm) / (2.0 * h), (tp - tm) / (2.0 * h));
            let rhs = g.apply(solve_moments(d, &p, t).unwrap());
            for (a, b) in [(fd.0, rhs.0), (fd.1, rhs.1)] {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn lower_bound_values() {
        assert!((lower_bound_lambda(5, 1.0, 1.0) - 0.3).abs() < 1e-15);
        for d in 1..20 {
            assert!((2.0 * d as f64 * lower_bound_lambda(d, 1.0, 1.0) - 3.0).abs() < 1e-14);
            // gamma -> infinity recovers the classic 1/(2d).
            assert!((lower_bound_lambda(d, 1e12, 1.0) - 0.5 / d as f64).abs() < 1e-10);
        }
        assert_eq!(scaled_target(1.0, 1.0), 3.0);
    }

    proptest! {
        #[test]
        fn sign_criterion(d in 1usize..20, lam in 0.0f64..2.0, gamma in 0.05f64..5.0, delta in 0.0f64..3.0) {
            let p = params(lam, gamma, delta);
            let top = max_real_eigenvalue(d, &p);
            if top.abs() > 1e-9 {
                prop_assert_eq!(top < 0.0, is_subcritical(d, &p));
            }
        }

        #[test]
        fn threshold_is_the_equality_point(d in 1usize..20, gamma in 0.05f64..5.0, delta in 0.0f64..3.0) {
            let lam = lower_bound_lambda(d, gamma, delta);
            let top = max_real_eigenvalue(d, &params(lam, gamma, delta));
            prop_assert!(top.abs() < 1e-12);
            prop_assert!(max_real_eigenvalue(d, &params(lam * 0.99, gamma, delta)) < 0.0);
            prop_assert!(max_real_eigenvalue(d, &params(lam * 1.01, gamma, delta)) > 0.0);
        }
    }
}
