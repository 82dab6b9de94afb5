//! Flat complex state vectors and the handful of BLAS-1 style helpers the
//! solvers need. Real problems embed with zero imaginary parts.

use num_complex::Complex64;

pub type C64 = Complex64;

/// A point in the problem's phase space, length = problem dimension.
pub type State = Vec<C64>;

pub fn zeros(dim: usize) -> State {
    vec![C64::new(0.0, 0.0); dim]
}

/// Euclidean norm over complex components.
pub fn norm(u: &[C64]) -> f64 {
    u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dist(u: &[C64], v: &[C64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// out = u + alpha * v
pub fn add_scaled(u: &[C64], alpha: C64, v: &[C64], out: &mut [C64]) {
    for i in 0..u.len() {
        out[i] = u[i] + alpha * v[i];
    }
}

/// u += alpha * v
pub fn axpy(alpha: C64, v: &[C64], u: &mut [C64]) {
    for i in 0..u.len() {
        u[i] += alpha * v[i];
    }
}

pub fn scale(u: &mut [C64], alpha: C64) {
    for z in u.iter_mut() {
        *z *= alpha;
    }
}

pub fn sub(u: &[C64], v: &[C64]) -> State {
    u.iter().zip(v).map(|(a, b)| a - b).collect()
}

pub fn lin_comb(terms: &[(f64, &[C64])]) -> State {
    let dim = terms[0].1.len();
    let mut out = zeros(dim);
    for (w, v) in terms {
        for i in 0..dim {
            out[i] += *w * v[i];
        }
    }
    out
}

/// Relative scale used by the fixed-point stopping tests: never below 1 so
/// tolerances behave absolutely near the origin.
pub fn tol_scale(u: &[C64]) -> f64 {
    norm(u).max(1.0)
}

pub fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

pub fn imag(x: f64) -> C64 {
    C64::new(0.0, x)
}

pub fn max_abs(u: &[C64]) -> f64 {
    u.iter().map(|z| z.norm()).fold(0.0, f64::max)
}
