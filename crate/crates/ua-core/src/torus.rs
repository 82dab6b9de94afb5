//! Spectral quadrature, averaging, antiderivatives and interpolation for
//! functions sampled on an equispaced grid of the unit torus T = R/Z.
//!
//! Samples stand for the unique trigonometric interpolant of degree < n/2,
//! with the Nyquist mode (m = n/2 on an even grid) split half-and-half
//! between +/- n/2 so that real data produce real interpolants. All
//! operations are exact on trigonometric polynomials resolved by the grid,
//! which is what makes the theta-integrals of the averaging maps exact for
//! the benchmark fields.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::state::{self, C64, State};

/// Relative tolerance on the residual mean below which an integrand is
/// accepted as mean-free by [`ThetaSamples::antiderivative_from_zero`].
pub const TOL_MEAN: f64 = 1e-10;

/// Equispaced grid theta_j = j / n_theta on the unit torus.
#[derive(Clone)]
pub struct ThetaGrid {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ThetaGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThetaGrid").field("n", &self.n).finish()
    }
}

impl PartialEq for ThetaGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
    }
}

impl ThetaGrid {
    pub fn new(n_theta: usize) -> Result<Self> {
        if n_theta < 2 || n_theta % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "n_theta must be even and >= 2, got {n_theta}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n: n_theta,
            fft: planner.plan_fft_forward(n_theta),
            ifft: planner.plan_fft_inverse(n_theta),
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// theta_j = j / n.
    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        j as f64 / self.n as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|j| self.node(j))
    }

    /// Signed frequency of FFT bin m; the Nyquist bin reports +n/2 and is
    /// handled explicitly by the mode-wise operations.
    #[inline]
    fn frequency(&self, m: usize) -> i64 {
        if m <= self.n / 2 {
            m as i64
        } else {
            m as i64 - self.n as i64
        }
    }

    fn fft_in_place(&self, buf: &mut [C64]) {
        self.fft.process(buf);
    }

    fn ifft_in_place(&self, buf: &mut [C64]) {
        self.ifft.process(buf);
    }
}

/// Values of a (vector-valued) function on a [`ThetaGrid`], node-major:
/// `values[j * dim + c]` is component `c` at node `j`.
#[derive(Clone, Debug)]
pub struct ThetaSamples {
    pub grid: ThetaGrid,
    pub dim: usize,
    pub values: Vec<C64>,
}

impl ThetaSamples {
    pub fn new(grid: ThetaGrid, dim: usize, values: Vec<C64>) -> Result<Self> {
        if dim == 0 || values.is_empty() {
            return Err(Error::EmptySamples);
        }
        if values.len() != grid.len() * dim {
            return Err(Error::SizeMismatch {
                expected: grid.len() * dim,
                got: values.len(),
            });
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: ThetaGrid, dim: usize) -> Self {
        let n = grid.len();
        Self {
            grid,
            dim,
            values: state::zeros(n * dim),
        }
    }

    /// Sample a closure theta -> state on the grid.
    pub fn from_fn(grid: ThetaGrid, dim: usize, mut f: impl FnMut(f64, &mut [C64])) -> Self {
        let n = grid.len();
        let mut values = state::zeros(n * dim);
        for j in 0..n {
            let theta = grid.node(j);
            f(theta, &mut values[j * dim..(j + 1) * dim]);
        }
        Self { grid, dim, values }
    }

    #[inline]
    pub fn node_values(&self, j: usize) -> &[C64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn node_values_mut(&mut self, j: usize) -> &mut [C64] {
        &mut self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// Average over the torus; equals the integral over [0,1] of the
    /// trigonometric interpolant exactly.
    pub fn average(&self) -> State {
        let n = self.grid.len() as f64;
        let mut acc = state::zeros(self.dim);
        for j in 0..self.grid.len() {
            let block = self.node_values(j);
            for c in 0..self.dim {
                acc[c] += block[c];
            }
        }
        state::scale(&mut acc, state::real(1.0 / n));
        acc
    }

    /// Fourier coefficients per component: `coeffs[m * dim + c]` with the
    /// convention v_j = sum_m coeffs[m] e^{2 pi i m theta_j}.
    pub fn coefficients(&self) -> Vec<C64> {
        let n = self.grid.len();
        let mut out = state::zeros(n * self.dim);
        let mut scratch = state::zeros(n);
        let inv_n = 1.0 / n as f64;
        for c in 0..self.dim {
            for j in 0..n {
                scratch[j] = self.values[j * self.dim + c];
            }
            self.grid.fft_in_place(&mut scratch);
            for m in 0..n {
                out[m * self.dim + c] = scratch[m] * inv_n;
            }
        }
        out
    }

    fn from_coefficients(grid: ThetaGrid, dim: usize, coeffs: &[C64]) -> Self {
        let n = grid.len();
        let mut values = state::zeros(n * dim);
        let mut scratch = state::zeros(n);
        for c in 0..dim {
            for m in 0..n {
                scratch[m] = coeffs[m * dim + c];
            }
            grid.ifft_in_place(&mut scratch);
            for j in 0..n {
                values[j * dim + c] = scratch[j];
            }
        }
        Self { grid, dim, values }
    }

    /// F(theta) = int_0^theta s(tau) dtau for a mean-free integrand, computed
    /// mode-wise (mode m divided by 2 pi i m) with the constant fixed so that
    /// F(0) = 0 exactly. Errors out when the residual mean exceeds
    /// [`TOL_MEAN`] relative to the sample norm: a non-mean-free integrand
    /// has no periodic antiderivative and signals a mis-projected term
    /// upstream.
    pub fn antiderivative_from_zero(&self) -> Result<ThetaSamples> {
        let mut out = ThetaSamples::zeros(self.grid.clone(), self.dim);
        let mut scratch = state::zeros(self.grid.len());
        self.antiderivative_into(&mut out, &mut scratch)?;
        Ok(out)
    }

    /// In-place variant writing into a preallocated buffer; the hot loops
    /// reuse `out` and `scratch` across calls.
    pub fn antiderivative_into(&self, out: &mut ThetaSamples, scratch: &mut Vec<C64>) -> Result<()> {
        let mean = self.average();
        let mean_norm = state::norm(&mean);
        // relative gate with an absolute round-off floor so identically
        // vanishing integrands (theta-independent fields) pass
        let scale = state::norm(&self.values);
        if mean_norm > TOL_MEAN * scale + 32.0 * f64::EPSILON {
            return Err(Error::NotMeanFree {
                residual: mean_norm,
                tolerance: TOL_MEAN,
            });
        }
        let n = self.grid.len();
        debug_assert_eq!(out.dim, self.dim);
        scratch.resize(n, C64::new(0.0, 0.0));
        // Per component: forward FFT over theta, scale the modes (mode 0 is
        // round-off and drops; the split Nyquist pair integrates to a sine
        // vanishing at every node), inverse FFT, pin F(0) = 0 exactly.
        for c in 0..self.dim {
            for j in 0..n {
                scratch[j] = self.values[j * self.dim + c];
            }
            self.grid.fft_in_place(scratch);
            let inv_n = 1.0 / n as f64;
            scratch[0] = C64::new(0.0, 0.0);
            for (m, z) in scratch.iter_mut().enumerate().skip(1) {
                let k = self.grid.frequency(m);
                *z *= if m == n / 2 {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(0.0, -inv_n / (2.0 * PI * k as f64))
                };
            }
            self.grid.ifft_in_place(scratch);
            let f0 = scratch[0];
            for j in 0..n {
                out.values[j * self.dim + c] = scratch[j] - f0;
            }
        }
        Ok(())
    }

    /// Exact integral of the trigonometric interpolant over [theta_a,
    /// theta_b]; the segment may span several periods and may be reversed
    /// (theta_a > theta_b flips the sign through the closed form).
    pub fn segment_integral(&self, theta_a: f64, theta_b: f64) -> State {
        let n = self.grid.len();
        let coeffs = self.coefficients();
        let mut out = state::zeros(self.dim);
        // mean mode
        let span = theta_b - theta_a;
        for c in 0..self.dim {
            out[c] = coeffs[c] * span;
        }
        for m in 1..n {
            let k = self.grid.frequency(m);
            if m == n / 2 {
                // split Nyquist: c * cos(pi n theta) integrates to
                // c * sin(pi n theta) / (pi n)
                let pn = PI * n as f64;
                let w = ((pn * theta_b).sin() - (pn * theta_a).sin()) / pn;
                for c in 0..self.dim {
                    out[c] += coeffs[m * self.dim + c] * w;
                }
            } else {
                let tpk = 2.0 * PI * k as f64;
                let eb = C64::new(0.0, tpk * theta_b).exp();
                let ea = C64::new(0.0, tpk * theta_a).exp();
                let w = (eb - ea) / C64::new(0.0, tpk);
                for c in 0..self.dim {
                    out[c] += coeffs[m * self.dim + c] * w;
                }
            }
        }
        out
    }

    /// Value of the trigonometric interpolant at theta (taken mod 1).
    pub fn interp_eval(&self, theta: f64) -> State {
        let mut out = state::zeros(self.dim);
        self.interp_eval_into(theta, &mut out);
        out
    }

    pub fn interp_eval_into(&self, theta: f64, out: &mut [C64]) {
        let n = self.grid.len();
        let theta = theta.rem_euclid(1.0);
        // at a grid node, return the stored values (exact round trip)
        let jf = theta * n as f64;
        let j = (jf.round() as usize) % n;
        if (jf - jf.round()).abs() < 1e-13 {
            out.copy_from_slice(self.node_values(j));
            return;
        }
        let coeffs = self.coefficients();
        for c in 0..self.dim {
            out[c] = coeffs[c];
        }
        for m in 1..n {
            let k = self.grid.frequency(m);
            let w = if m == n / 2 {
                state::real((PI * n as f64 * theta).cos())
            } else {
                C64::new(0.0, 2.0 * PI * k as f64 * theta).exp()
            };
            for c in 0..self.dim {
                out[c] += coeffs[m * self.dim + c] * w;
            }
        }
    }

    /// d/dtheta of the interpolant, sampled on the grid. The split Nyquist
    /// cosine differentiates to a sine that vanishes on the nodes.
    pub fn spectral_derivative(&self) -> ThetaSamples {
        let n = self.grid.len();
        let mut coeffs = self.coefficients();
        for m in 0..n {
            let k = self.grid.frequency(m);
            let factor = if m == n / 2 {
                C64::new(0.0, 0.0)
            } else {
                C64::new(0.0, 2.0 * PI * k as f64)
            };
            for c in 0..self.dim {
                coeffs[m * self.dim + c] *= factor;
            }
        }
        Self::from_coefficients(self.grid.clone(), self.dim, &coeffs)
    }

    /// values -= other.values
    pub fn sub_assign(&mut self, other: &ThetaSamples) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
    }

    /// Subtract a fixed state from every node (e.g. remove a mean).
    pub fn sub_state(&mut self, s: &[C64]) {
        let dim = self.dim;
        for j in 0..self.grid.len() {
            let block = &mut self.values[j * dim..(j + 1) * dim];
            for c in 0..dim {
                block[c] -= s[c];
            }
        }
    }

    pub fn scale(&mut self, alpha: C64) {
        state::scale(&mut self.values, alpha);
    }

    /// Max over nodes of the state norm.
    pub fn max_node_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|j| state::norm(self.node_values(j)))
            .fold(0.0, f64::max)
    }
}

/// Quadrature weights w such that `sum_s w[s] * v_s` equals the
/// antiderivative-from-zero of the interpolant evaluated at `theta`, for
/// any samples (the weights annihilate the mean mode, so a constant
/// contributes nothing). The pullback fixed-point engine needs many
/// single-point antiderivative reads per sweep and precomputes these rows.
pub fn antiderivative_weights_at(grid: &ThetaGrid, theta: f64) -> Vec<f64> {
    let n = grid.len();
    let mut weights = vec![0.0; n];
    for (s, w_out) in weights.iter_mut().enumerate() {
        // antiderivative of the unit sample at node s, read at theta;
        // closed form of the mode-wise operation (+-m terms are conjugate,
        // so the result is real)
        let mut w = C64::new(0.0, 0.0);
        for m in 1..n {
            let k = grid.frequency(m);
            if m == n / 2 {
                continue;
            }
            let tpk = 2.0 * PI * k as f64;
            let cm = C64::new(0.0, -tpk * grid.node(s)).exp() / n as f64;
            let em = C64::new(0.0, tpk * theta).exp() - C64::new(1.0, 0.0);
            w += cm * em / C64::new(0.0, tpk);
        }
        *w_out = w.re;
    }
    weights
}

/// Antiderivative weights for a grid node target.
pub fn antiderivative_node_weights(grid: &ThetaGrid, j_target: usize) -> Vec<f64> {
    antiderivative_weights_at(grid, grid.node(j_target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_samples(n: usize, f: impl Fn(f64) -> f64) -> ThetaSamples {
        let grid = ThetaGrid::new(n).unwrap();
        ThetaSamples::from_fn(grid, 1, |theta, out| out[0] = state::real(f(theta)))
    }

    #[test]
    fn grid_rejects_odd_or_tiny() {
        assert!(ThetaGrid::new(0).is_err());
        assert!(ThetaGrid::new(3).is_err());
        assert!(ThetaGrid::new(2).is_ok());
    }

    #[test]
    fn average_of_constant_is_constant() {
        let s = scalar_samples(16, |_| 2.5);
        assert!((s.average()[0].re - 2.5).abs() < 1e-15);
    }

    #[test]
    fn average_of_cosine_is_zero() {
        let s = scalar_samples(16, |t| (2.0 * PI * t).cos());
        assert!(s.average()[0].norm() < 1e-14);
    }

    #[test]
    fn average_of_trig_polynomial_matches_analytic_integral() {
        // int_0^1 (1 + 3 sin(4 pi t)) dt = 1
        let s = scalar_samples(16, |t| 1.0 + 3.0 * (4.0 * PI * t).sin());
        assert!((s.average()[0].re - 1.0).abs() < 1e-13);
    }

    #[test]
    fn antiderivative_of_cosine_is_scaled_sine() {
        let s = scalar_samples(32, |t| (2.0 * PI * t).cos());
        let f = s.antiderivative_from_zero().unwrap();
        for j in 0..32 {
            let theta = f.grid.node(j);
            let expect = (2.0 * PI * theta).sin() / (2.0 * PI);
            assert!((f.node_values(j)[0].re - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn antiderivative_of_sine_starts_at_zero() {
        let s = scalar_samples(32, |t| (2.0 * PI * t).sin());
        let f = s.antiderivative_from_zero().unwrap();
        assert_eq!(f.node_values(0)[0], C64::new(0.0, 0.0));
        for j in 0..32 {
            let theta = f.grid.node(j);
            let expect = (1.0 - (2.0 * PI * theta).cos()) / (2.0 * PI);
            assert!((f.node_values(j)[0].re - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn antiderivative_of_zero_is_zero() {
        let s = scalar_samples(8, |_| 0.0);
        let f = s.antiderivative_from_zero().unwrap();
        assert!(state::norm(&f.values) == 0.0);
    }

    #[test]
    fn antiderivative_rejects_nonzero_mean() {
        let s = scalar_samples(8, |t| 1.0 + (2.0 * PI * t).cos());
        match s.antiderivative_from_zero() {
            Err(Error::NotMeanFree { residual, .. }) => assert!(residual > 0.9),
            other => panic!("expected NotMeanFree, got {other:?}"),
        }
    }

    #[test]
    fn segment_integral_constant() {
        let s = scalar_samples(8, |_| 3.0);
        let v = s.segment_integral(0.0, 0.5);
        assert!((v[0].re - 1.5).abs() < 1e-14);
    }

    #[test]
    fn segment_integral_full_period_of_cosine_vanishes() {
        let s = scalar_samples(16, |t| (2.0 * PI * t).cos());
        let v = s.segment_integral(0.0, 1.0);
        assert!(v[0].norm() < 1e-14);
    }

    #[test]
    fn segment_integral_complex_exponential_half_period() {
        // int_0^{1/2} e^{2 pi i t} dt = (e^{i pi} - 1) / (2 pi i) = i / pi
        let grid = ThetaGrid::new(16).unwrap();
        let s = ThetaSamples::from_fn(grid, 1, |t, out| {
            out[0] = C64::new(0.0, 2.0 * PI * t).exp()
        });
        let v = s.segment_integral(0.0, 0.5);
        assert!((v[0] - C64::new(0.0, 1.0 / PI)).norm() < 1e-14);
    }

    #[test]
    fn segment_integral_is_additive() {
        let s = scalar_samples(16, |t| (2.0 * PI * t).cos() + 0.5 * (4.0 * PI * t).sin());
        let (a, b, c) = (0.13, 0.57, 1.92);
        let left = s.segment_integral(a, b)[0] + s.segment_integral(b, c)[0];
        let right = s.segment_integral(a, c)[0];
        assert!((left - right).norm() < 1e-13);
    }

    #[test]
    fn segment_integral_reversed_changes_sign() {
        let s = scalar_samples(16, |t| (2.0 * PI * t).cos() + 2.0);
        let fwd = s.segment_integral(0.1, 0.4)[0];
        let rev = s.segment_integral(0.4, 0.1)[0];
        assert!((fwd + rev).norm() < 1e-14);
    }

    #[test]
    fn interp_reproduces_grid_values() {
        let s = scalar_samples(8, |t| (2.0 * PI * t).sin() - 0.3 * (4.0 * PI * t).cos());
        for j in 0..8 {
            let v = s.interp_eval(s.grid.node(j));
            assert!((v[0] - s.node_values(j)[0]).norm() < 1e-14);
        }
    }

    #[test]
    fn interp_constant_everywhere() {
        let s = scalar_samples(8, |_| 4.2);
        for theta in [0.05, 0.333, 0.91, 2.7, -0.2] {
            assert!((s.interp_eval(theta)[0].re - 4.2).abs() < 1e-13);
        }
    }

    #[test]
    fn interp_exact_on_resolved_harmonics() {
        // n = 8 resolves sin(2 pi t); evaluate between nodes
        let s = scalar_samples(8, |t| (2.0 * PI * t).sin());
        let v = s.interp_eval(1.0 / 16.0);
        assert!((v[0].re - (PI / 8.0).sin()).abs() < 1e-14);
    }

    #[test]
    fn torus_ops_exact_on_resolved_trig_polynomials() {
        // degree 5 < n/2 = 8: average, antiderivative, segment, interp all
        // exact to 1e-12 relative
        let f = |t: f64| {
            0.7 + (2.0 * PI * t).cos() - 2.0 * (6.0 * PI * t).sin() + 0.1 * (10.0 * PI * t).cos()
        };
        let s = scalar_samples(16, f);
        assert!((s.average()[0].re - 0.7).abs() < 1e-12);

        let anti_expect = |t: f64| {
            (2.0 * PI * t).sin() / (2.0 * PI)
                + 2.0 * ((6.0 * PI * t).cos() - 1.0) / (6.0 * PI)
                + 0.1 * (10.0 * PI * t).sin() / (10.0 * PI)
        };
        let mut mean_free = s.clone();
        mean_free.sub_state(&s.average());
        let anti = mean_free.antiderivative_from_zero().unwrap();
        for j in 0..16 {
            let t = anti.grid.node(j);
            assert!((anti.node_values(j)[0].re - anti_expect(t)).abs() < 1e-12);
        }

        let seg = s.segment_integral(0.2, 0.9)[0].re;
        let seg_expect = 0.7 * 0.7 + anti_expect(0.9) - anti_expect(0.2);
        assert!((seg - seg_expect).abs() < 1e-12);

        for theta in [0.01, 0.37, 0.62] {
            assert!((s.interp_eval(theta)[0].re - f(theta)).abs() < 1e-12);
        }
    }

    #[test]
    fn antiderivative_inverts_spectral_derivative() {
        let s = scalar_samples(32, |t| (2.0 * PI * t).sin() + 0.25 * (8.0 * PI * t).cos());
        let ds = s.spectral_derivative();
        let back = ds.antiderivative_from_zero().unwrap();
        // identity minus value at zero
        let s0 = s.node_values(0)[0];
        for j in 0..32 {
            let expect = s.node_values(j)[0] - s0;
            assert!((back.node_values(j)[0] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn antiderivative_mean_matches_refined_quadrature() {
        let s = scalar_samples(16, |t| (2.0 * PI * t).cos() - (4.0 * PI * t).sin());
        let anti = s.antiderivative_from_zero().unwrap();
        let spectral_mean = anti.average()[0].re;
        // direct quadrature of the analytic antiderivative on a refined
        // grid (periodic, so trapezoid = rectangle rule)
        let analytic = |t: f64| {
            (2.0 * PI * t).sin() / (2.0 * PI) + ((4.0 * PI * t).cos() - 1.0) / (4.0 * PI)
        };
        let m = 1 << 14;
        let quad: f64 = (0..m).map(|j| analytic(j as f64 / m as f64)).sum::<f64>() / m as f64;
        assert!((spectral_mean - quad).abs() < 1e-12);
    }

    #[test]
    fn antiderivative_node_weights_match_direct_op() {
        let grid = ThetaGrid::new(16).unwrap();
        let s = ThetaSamples::from_fn(grid.clone(), 1, |t, out| {
            out[0] = state::real((2.0 * PI * t).cos() - 0.4 * (6.0 * PI * t).sin())
        });
        let anti = s.antiderivative_from_zero().unwrap();
        for j_target in [0, 3, 9, 15] {
            let w = antiderivative_node_weights(&grid, j_target);
            let via_weights: C64 = (0..16).map(|j| s.node_values(j)[0] * w[j]).sum();
            assert!((via_weights - anti.node_values(j_target)[0]).norm() < 1e-13);
        }
    }

    #[test]
    fn real_samples_stay_real_through_the_pipeline() {
        let s = scalar_samples(8, |t| (8.0 * PI * t).cos() + (2.0 * PI * t).sin());
        let anti = {
            let mut m = s.clone();
            m.sub_state(&s.average());
            m.antiderivative_from_zero().unwrap()
        };
        for j in 0..8 {
            assert!(anti.node_values(j)[0].im.abs() < 1e-14);
        }
        assert!(s.interp_eval(0.23)[0].im.abs() < 1e-14);
    }
}
