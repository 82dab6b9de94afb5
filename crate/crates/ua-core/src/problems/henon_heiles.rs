//! Henon-Heiles oscillator with a stiff (q1, p1) pair, in the rotating
//! frame that filters the fast rotation. The filtered variable
//!
//!   w1 = cos(t/eps) q1 - sin(t/eps) p1,   w2 = q2,
//!   w3 = sin(t/eps) q1 + cos(t/eps) p1,   w4 = p2,
//!
//! satisfies dw/dt = f(t/eps, w) with the quadratic field implemented here.
//! The natural phase has period 2 pi, so the library sees
//! eps_lib = 2 pi eps and the formulas are sampled at 2 pi theta.
//!
//! The energy
//!
//!   H = p1^2/(2 eps) + p2^2/2 + q1^2/(2 eps) + q2^2/2 + q1^2 q2 - q2^3/2
//!
//! is conserved by the exact flow; Poincare sections live on the
//! hyperplane q1 = 0.

use std::f64::consts::PI;

use crate::field::PeriodicField;
use crate::state::{self, C64, State};
use crate::torus::ThetaGrid;

/// The filtered Henon-Heiles field (dimension 4). Stores cos/sin tables for
/// the grid it was built with; off-grid phases fall back to direct trig.
pub struct HenonHeiles {
    n_table: usize,
    cos_tab: Vec<f64>,
    sin_tab: Vec<f64>,
}

impl HenonHeiles {
    pub fn new(grid: &ThetaGrid) -> Self {
        let n = grid.len();
        let mut cos_tab = Vec::with_capacity(n);
        let mut sin_tab = Vec::with_capacity(n);
        for j in 0..n {
            let phase = 2.0 * PI * grid.node(j);
            cos_tab.push(phase.cos());
            sin_tab.push(phase.sin());
        }
        Self {
            n_table: n,
            cos_tab,
            sin_tab,
        }
    }

    #[inline]
    fn phase(&self, theta: f64) -> (f64, f64) {
        let theta = theta.rem_euclid(1.0);
        let jf = theta * self.n_table as f64;
        let j = jf.round() as usize % self.n_table;
        if (jf - jf.round()).abs() < 1e-13 {
            (self.cos_tab[j], self.sin_tab[j])
        } else {
            let p = 2.0 * PI * theta;
            (p.cos(), p.sin())
        }
    }
}

impl PeriodicField for HenonHeiles {
    fn dim(&self) -> usize {
        4
    }

    fn eval(&self, theta: f64, _t: f64, w: &[C64], out: &mut [C64]) {
        let (c, s) = self.phase(theta);
        let a = c * w[0] + s * w[2];
        out[0] = 2.0 * s * a * w[1];
        out[1] = w[3];
        out[2] = -2.0 * c * a * w[1];
        out[3] = -a * a + w[1] * w[1] - w[1];
    }

    fn dir_deriv(&self, theta: f64, _t: f64, w: &[C64], p: &[C64], out: &mut [C64]) {
        let (c, s) = self.phase(theta);
        let a = c * w[0] + s * w[2];
        let ap = c * p[0] + s * p[2];
        let cross = ap * w[1] + a * p[1];
        out[0] = 2.0 * s * cross;
        out[1] = p[3];
        out[2] = -2.0 * c * cross;
        out[3] = -2.0 * a * ap + 2.0 * w[1] * p[1] - p[1];
    }

    fn second_dir_deriv(
        &self,
        theta: f64,
        _t: f64,
        _w: &[C64],
        p: &[C64],
        q: &[C64],
        out: &mut [C64],
    ) {
        let (c, s) = self.phase(theta);
        let ap = c * p[0] + s * p[2];
        let aq = c * q[0] + s * q[2];
        let cross = ap * q[1] + aq * p[1];
        out[0] = 2.0 * s * cross;
        out[1] = C64::new(0.0, 0.0);
        out[2] = -2.0 * c * cross;
        out[3] = -2.0 * ap * aq + 2.0 * p[1] * q[1];
    }

    fn third_dir_deriv(
        &self,
        _theta: f64,
        _t: f64,
        _w: &[C64],
        _p: &[C64],
        _q: &[C64],
        _r: &[C64],
        out: &mut [C64],
    ) {
        out[..4].fill(C64::new(0.0, 0.0));
    }

    // contracted sweeps without scratch allocation; the evaluations are a
    // handful of multiplies, so avoiding the buffer round-trip matters here
    fn profile_contract(
        &self,
        grid: &ThetaGrid,
        _t: f64,
        u: &[C64],
        rows: &[&[f64]],
        outs: &mut [crate::state::State],
    ) {
        for out in outs.iter_mut() {
            out.fill(C64::new(0.0, 0.0));
        }
        let mut f = [C64::new(0.0, 0.0); 4];
        for j in 0..grid.len() {
            let (c, s) = self.phase(grid.node(j));
            let a = c * u[0] + s * u[2];
            f[0] = 2.0 * s * a * u[1];
            f[1] = u[3];
            f[2] = -2.0 * c * a * u[1];
            f[3] = -a * a + u[1] * u[1] - u[1];
            for (r, row) in rows.iter().enumerate() {
                let w = row[j];
                if w == 0.0 {
                    continue;
                }
                for k in 0..4 {
                    outs[r][k] += w * f[k];
                }
            }
        }
    }

    fn profile_dir_contract(
        &self,
        grid: &ThetaGrid,
        _t: f64,
        u: &[C64],
        p: &[C64],
        rows: &[&[f64]],
        outs: &mut [crate::state::State],
    ) {
        for out in outs.iter_mut() {
            out.fill(C64::new(0.0, 0.0));
        }
        let mut f = [C64::new(0.0, 0.0); 4];
        for j in 0..grid.len() {
            let (c, s) = self.phase(grid.node(j));
            let a = c * u[0] + s * u[2];
            let ap = c * p[0] + s * p[2];
            let cross = ap * u[1] + a * p[1];
            f[0] = 2.0 * s * cross;
            f[1] = p[3];
            f[2] = -2.0 * c * cross;
            f[3] = -2.0 * a * ap + 2.0 * u[1] * p[1] - p[1];
            for (r, row) in rows.iter().enumerate() {
                let w = row[j];
                if w == 0.0 {
                    continue;
                }
                for k in 0..4 {
                    outs[r][k] += w * f[k];
                }
            }
        }
    }

    fn profile_second_dir_contract(
        &self,
        grid: &ThetaGrid,
        _t: f64,
        _u: &[C64],
        p: &[C64],
        q: &[C64],
        rows: &[&[f64]],
        outs: &mut [crate::state::State],
    ) {
        for out in outs.iter_mut() {
            out.fill(C64::new(0.0, 0.0));
        }
        let mut f = [C64::new(0.0, 0.0); 4];
        for j in 0..grid.len() {
            let (c, s) = self.phase(grid.node(j));
            let ap = c * p[0] + s * p[2];
            let aq = c * q[0] + s * q[2];
            let cross = ap * q[1] + aq * p[1];
            f[0] = 2.0 * s * cross;
            f[1] = C64::new(0.0, 0.0);
            f[2] = -2.0 * c * cross;
            f[3] = -2.0 * ap * aq + 2.0 * p[1] * q[1];
            for (r, row) in rows.iter().enumerate() {
                let w = row[j];
                if w == 0.0 {
                    continue;
                }
                for k in 0..4 {
                    outs[r][k] += w * f[k];
                }
            }
        }
    }

    fn theta_deriv(&self, theta: f64, _t: f64, w: &[C64], out: &mut [C64]) {
        // d/dtheta with the 2 pi inner scaling
        let (c, s) = self.phase(theta);
        let tp = 2.0 * PI;
        let a = c * w[0] + s * w[2];
        let da = tp * (-s * w[0] + c * w[2]);
        out[0] = 2.0 * (tp * c * a + s * da) * w[1];
        out[1] = C64::new(0.0, 0.0);
        out[2] = -2.0 * (-tp * s * a + c * da) * w[1];
        out[3] = -2.0 * a * da;
    }
}

/// Rotate the filtered variables back to (q1, q2, p1, p2) at phase
/// phi = t / eps (problem units, period 2 pi).
pub fn unfilter(phi: f64, w: &[C64]) -> [f64; 4] {
    let (c, s) = (phi.cos(), phi.sin());
    let w1 = w[0].re;
    let w2 = w[1].re;
    let w3 = w[2].re;
    let w4 = w[3].re;
    [c * w1 + s * w3, w2, -s * w1 + c * w3, w4]
}

/// H(q1, q2, p1, p2) with the stiff pair weighted by 1/eps; reduces to the
/// classic Henon-Heiles energy at eps = 1. The cubic potential carries the
/// classic 1/3 so that the energy is a first integral of the filtered
/// field above (the pair must be generated by one Hamiltonian for the
/// geometric runs to mean anything).
pub fn hamiltonian(q: &[f64; 4], eps: f64) -> f64 {
    let [q1, q2, p1, p2] = *q;
    p1 * p1 / (2.0 * eps) + p2 * p2 / 2.0 + q1 * q1 / (2.0 * eps) + q2 * q2 / 2.0
        + q1 * q1 * q2
        - q2 * q2 * q2 / 3.0
}

/// Hamilton equations for (q1, q2, p1, p2); used by the Poincare crossing
/// interpolation.
pub fn hamilton_rhs(q: &[f64; 4], eps: f64) -> [f64; 4] {
    let [q1, q2, p1, p2] = *q;
    [
        p1 / eps,
        p2,
        -q1 / eps - 2.0 * q1 * q2,
        -q2 - q1 * q1 + q2 * q2,
    ]
}

/// Initial data of the Poincare/Hamiltonian experiments:
/// (q1, q2, p1, p2) = (0, 0, sqrt(2 eps H) sin(a pi/2), sqrt(2 H) cos(a pi/2)),
/// returned as the filtered state at t = 0 (where the rotation is the
/// identity).
pub fn section_initial_data(eps: f64, h_target: f64, angle: f64) -> State {
    let p1 = (2.0 * eps * h_target).sqrt() * (angle * PI / 2.0).sin();
    let p2 = (2.0 * h_target).sqrt() * (angle * PI / 2.0).cos();
    vec![
        state::real(0.0),
        state::real(0.0),
        state::real(p1),
        state::real(p2),
    ]
}

/// A section crossing: time and the full interpolated state, so consumers
/// can check energies honestly; q[0] is the residual q1 (<= 1e-10).
#[derive(Clone, Copy, Debug)]
pub struct Crossing {
    pub t: f64,
    pub q: [f64; 4],
}

/// Crossings of the hyperplane q1 = 0 with sign(p1) as requested, from a
/// trajectory of unfiltered states. Each bracketing interval is resolved by
/// bisection on the cubic Hermite interpolant (values plus Hamiltonian
/// derivatives at the interval ends) until |q1| <= 1e-10.
pub fn poincare_crossings(
    times: &[f64],
    unfiltered: &[[f64; 4]],
    eps: f64,
    positive_p1: bool,
) -> Vec<Crossing> {
    let mut cuts = Vec::new();
    let tol = 1e-10;
    for k in 0..times.len().saturating_sub(1) {
        let (y0, y1) = (unfiltered[k], unfiltered[k + 1]);
        if !(y0[0] == 0.0 || y0[0].signum() != y1[0].signum()) {
            continue;
        }
        let dt = times[k + 1] - times[k];
        let d0 = hamilton_rhs(&y0, eps);
        let d1 = hamilton_rhs(&y1, eps);
        let comp = |s: f64, i: usize| hermite(y0[i], y1[i], d0[i] * dt, d1[i] * dt, s);
        // bisection on the Hermite interpolant of q1
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut qlo = comp(lo, 0);
        if qlo == 0.0 {
            // crossing exactly at the node
        } else if qlo.signum() == comp(hi, 0).signum() {
            continue;
        }
        let mut mid = 0.5;
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let qm = comp(mid, 0);
            if qm.abs() <= tol {
                break;
            }
            if qm.signum() == qlo.signum() {
                lo = mid;
                qlo = qm;
            } else {
                hi = mid;
            }
        }
        let p1_here = comp(mid, 2);
        if (positive_p1 && p1_here > 0.0) || (!positive_p1 && p1_here < 0.0) {
            cuts.push(Crossing {
                t: times[k] + mid * dt,
                q: [comp(mid, 0), comp(mid, 1), p1_here, comp(mid, 3)],
            });
        }
    }
    cuts
}

/// The (q2, p2) projections of the crossings.
pub fn poincare_cuts(
    times: &[f64],
    unfiltered: &[[f64; 4]],
    eps: f64,
    positive_p1: bool,
) -> Vec<(f64, f64)> {
    poincare_crossings(times, unfiltered, eps, positive_p1)
        .into_iter()
        .map(|c| (c.q[1], c.q[3]))
        .collect()
}

fn hermite(y0: f64, y1: f64, m0: f64, m1: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0
        + (s3 - 2.0 * s2 + s) * m0
        + (-2.0 * s3 + 3.0 * s2) * y1
        + (s3 - s2) * m1
}
