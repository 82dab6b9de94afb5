//! The abstract problem definition: a vector field f_theta(u), 1-periodic in
//! the fast phase theta on the unit torus, optionally with explicit slow-time
//! dependence f(theta, t, u), plus directional derivatives in u.
//!
//! First directional derivatives are a hard requirement (both benchmarks
//! have cheap exact Jacobian-vector products). Higher directional
//! derivatives are optional with central finite-difference fallbacks; the
//! order-3 change of variable consumes them.
//!
//! Problems whose natural phase has period 2 pi (both benchmarks oscillate
//! like cos(t/eps)) pre-scale to the unit torus: they register
//! eps_library = 2 pi * eps_problem and sample their formulas at 2 pi theta.

use crate::state::{self, C64};
use crate::torus::{ThetaGrid, ThetaSamples};

/// Stiffness parameter and damping switch. `epsilon` is in library units
/// (phase period 1); `problem_epsilon` is the problem's own value in (0, 1]
/// (identical for natively 1-periodic problems) and drives the damping.
#[derive(Clone, Copy, Debug)]
pub struct EpsilonParams {
    pub epsilon: f64,
    pub problem_epsilon: f64,
    pub damping_enabled: bool,
}

impl EpsilonParams {
    /// For problems natively 1-periodic in theta; requires eps in (0, 1].
    pub fn new(epsilon: f64) -> crate::Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(crate::Error::InvalidParameter(format!(
                "epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        Ok(Self {
            epsilon,
            problem_epsilon: epsilon,
            damping_enabled: true,
        })
    }

    /// For problems with natural phase period 2 pi: the problem's eps in
    /// (0, 1] maps to the library value 2 pi * eps.
    pub fn from_period_two_pi(eps_problem: f64) -> crate::Result<Self> {
        if !(eps_problem > 0.0 && eps_problem <= 1.0) {
            return Err(crate::Error::InvalidParameter(format!(
                "problem epsilon must lie in (0, 1], got {eps_problem}"
            )));
        }
        Ok(Self {
            epsilon: 2.0 * std::f64::consts::PI * eps_problem,
            problem_epsilon: eps_problem,
            damping_enabled: true,
        })
    }

    pub fn with_damping(mut self, enabled: bool) -> Self {
        self.damping_enabled = enabled;
        self
    }

    /// exp(-eps^2) in problem units when damping is enabled, else 1.
    /// Multiplies the midpoint change-of-variable fields g and h so their
    /// fixed points contract for eps near 1.
    pub fn damping_factor(&self) -> f64 {
        if self.damping_enabled {
            (-self.problem_epsilon * self.problem_epsilon).exp()
        } else {
            1.0
        }
    }
}

/// A periodic vector field with directional derivatives. Implementations
/// must be immutable after construction and re-entrant; `eval` must be
/// 1-periodic in theta and `dir_deriv` linear in the direction.
pub trait PeriodicField: Send + Sync {
    fn dim(&self) -> usize;

    /// f_theta(u); slow time t is ignored by autonomous-in-t problems.
    fn eval(&self, theta: f64, t: f64, u: &[C64], out: &mut [C64]);

    /// d_u f_theta(u) . p
    fn dir_deriv(&self, theta: f64, t: f64, u: &[C64], p: &[C64], out: &mut [C64]);

    /// d^2_u f_theta(u)(p, q); default falls back to central differences of
    /// `dir_deriv`.
    fn second_dir_deriv(
        &self,
        theta: f64,
        t: f64,
        u: &[C64],
        p: &[C64],
        q: &[C64],
        out: &mut [C64],
    ) {
        fd_second_dir_deriv(self, theta, t, u, p, q, out);
    }

    /// d^3_u f_theta(u)(p, q, r); default falls back to central differences
    /// of `second_dir_deriv`. Exact for fields of polynomial degree <= 3
    /// since the finite difference of a quadratic-in-step function is exact.
    fn third_dir_deriv(
        &self,
        theta: f64,
        t: f64,
        u: &[C64],
        p: &[C64],
        q: &[C64],
        r: &[C64],
        out: &mut [C64],
    ) {
        fd_third_dir_deriv(self, theta, t, u, p, q, r, out);
    }

    /// d_theta f_theta(u); default central difference in theta.
    fn theta_deriv(&self, theta: f64, t: f64, u: &[C64], out: &mut [C64]) {
        let h = 1e-6;
        let dim = self.dim();
        let mut plus = state::zeros(dim);
        let mut minus = state::zeros(dim);
        self.eval(theta + h, t, u, &mut plus);
        self.eval(theta - h, t, u, &mut minus);
        for c in 0..dim {
            out[c] = (plus[c] - minus[c]) / (2.0 * h);
        }
    }

    // -- batched sweeps over the theta grid at a frozen state ------------
    //
    // The averaging recursions and the pullback fixed points evaluate f and
    // its derivatives at every grid node with the state held fixed;
    // implementations can share per-state setup (FFTs, phase tables) across
    // the whole sweep. Defaults loop over nodes.

    /// out[j] = f_{theta_j}(u)
    fn profile(&self, grid: &ThetaGrid, t: f64, u: &[C64], out: &mut ThetaSamples) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.eval(theta, t, u, out.node_values_mut(j));
        }
    }

    /// out[j] = d_u f_{theta_j}(u) . p   (one fixed direction)
    fn profile_dir(&self, grid: &ThetaGrid, t: f64, u: &[C64], p: &[C64], out: &mut ThetaSamples) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.dir_deriv(theta, t, u, p, out.node_values_mut(j));
        }
    }

    /// out[j] = d_u f_{theta_j}(u) . dirs[j]   (per-node directions)
    fn profile_dir_per_node(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        dirs: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.dir_deriv(theta, t, u, dirs.node_values(j), out.node_values_mut(j));
        }
    }

    /// out[j] = d^2_u f_{theta_j}(u)(p, q) with p fixed and q per-node.
    fn profile_second_dir_per_node(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        p: &[C64],
        q_nodes: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.second_dir_deriv(theta, t, u, p, q_nodes.node_values(j), out.node_values_mut(j));
        }
    }

    /// out[j] = d^3_u f_{theta_j}(u)(p, q, r) with fixed directions.
    fn profile_third_dir(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        p: &[C64],
        q: &[C64],
        r: &[C64],
        out: &mut ThetaSamples,
    ) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.third_dir_deriv(theta, t, u, p, q, r, out.node_values_mut(j));
        }
    }

    // -- batched sweeps with a different state per node -------------------
    //
    // The averaging recursion evaluates f along theta -> Phi_theta(u), so
    // the state varies with the node while t stays frozen; implementations
    // can still share slow-time phase tables across the sweep.

    /// out[j] = f_{theta_j}(states[j])
    fn profile_states(&self, grid: &ThetaGrid, t: f64, states: &ThetaSamples, out: &mut ThetaSamples) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.eval(theta, t, states.node_values(j), out.node_values_mut(j));
        }
    }

    /// out[j] = d_u f_{theta_j}(states[j]) . dirs[j]
    fn profile_states_dir(
        &self,
        grid: &ThetaGrid,
        t: f64,
        states: &ThetaSamples,
        dirs: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.dir_deriv(theta, t, states.node_values(j), dirs.node_values(j), out.node_values_mut(j));
        }
    }

    /// out[j] = d^2_u f_{theta_j}(states[j])(p[j], q[j])
    fn profile_states_second_dir(
        &self,
        grid: &ThetaGrid,
        t: f64,
        states: &ThetaSamples,
        p_nodes: &ThetaSamples,
        q_nodes: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        for j in 0..grid.len() {
            let theta = grid.node(j);
            self.second_dir_deriv(
                theta,
                t,
                states.node_values(j),
                p_nodes.node_values(j),
                q_nodes.node_values(j),
                out.node_values_mut(j),
            );
        }
    }

    // -- contracted sweeps -------------------------------------------------
    //
    // The pullback recursions mostly need weighted theta-sums of sweeps
    // (quadrature rows), not the full samples; implementations can fold the
    // row into the sweep pass. Defaults run the full sweep into a scratch
    // buffer. `rows` are per-row weights over the grid nodes; `outs` is one
    // state per row, overwritten.

    /// outs[r] = sum_j rows[r][j] * f_{theta_j}(u)
    fn profile_contract(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        rows: &[&[f64]],
        outs: &mut [crate::state::State],
    ) {
        let mut sweep = ThetaSamples::zeros(grid.clone(), self.dim());
        self.profile(grid, t, u, &mut sweep);
        contract_rows(&sweep, rows, outs);
    }

    /// outs[r] = sum_j rows[r][j] * d_u f_{theta_j}(u) . p
    fn profile_dir_contract(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        p: &[C64],
        rows: &[&[f64]],
        outs: &mut [crate::state::State],
    ) {
        let mut sweep = ThetaSamples::zeros(grid.clone(), self.dim());
        self.profile_dir(grid, t, u, p, &mut sweep);
        contract_rows(&sweep, rows, outs);
    }

    /// outs[r] = sum_j rows[r][j] * d^2_u f_{theta_j}(u)(p, q) (fixed dirs)
    fn profile_second_dir_contract(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        p: &[C64],
        q: &[C64],
        rows: &[&[f64]],
        outs: &mut [crate::state::State],
    ) {
        let mut sweep = ThetaSamples::zeros(grid.clone(), self.dim());
        let mut q_nodes = ThetaSamples::zeros(grid.clone(), self.dim());
        for j in 0..grid.len() {
            q_nodes.node_values_mut(j).copy_from_slice(q);
        }
        self.profile_second_dir_per_node(grid, t, u, p, &q_nodes, &mut sweep);
        contract_rows(&sweep, rows, outs);
    }

    /// Generator of the slow-time gauge when the field's only slow-time
    /// dependence is the unitary conjugation f(theta, t, u) =
    /// e^{-tG} f0_theta(e^{tG} u) for a linear operator G; writes G u into
    /// `out` and returns true. Autonomous fields keep the default (false).
    ///
    /// With a gauge declared, the time derivative of any covariantly built
    /// map satisfies d_t Phi = -G Phi + d_u Phi [G u], which lets the
    /// averaging recursion absorb the slow-time transport exactly: it runs
    /// on the augmented field f + G u and the evolution equations subtract
    /// the plain drift G u afterwards.
    fn slow_gauge_apply(&self, _u: &[C64], out: &mut [C64]) -> bool {
        out.fill(C64::new(0.0, 0.0));
        false
    }
}

/// The augmented field f + G u of a gauge-covariant problem; the gauge term
/// is linear, so all second and higher directional derivatives delegate.
pub struct GaugeAugmentedField {
    pub inner: std::sync::Arc<dyn PeriodicField>,
}

impl GaugeAugmentedField {
    fn add_gauge(&self, u: &[C64], out: &mut [C64], scratch: &mut [C64]) {
        self.inner.slow_gauge_apply(u, scratch);
        for (o, g) in out.iter_mut().zip(scratch.iter()) {
            *o += g;
        }
    }
}

impl PeriodicField for GaugeAugmentedField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, theta: f64, t: f64, u: &[C64], out: &mut [C64]) {
        self.inner.eval(theta, t, u, out);
        let mut scratch = state::zeros(self.dim());
        self.add_gauge(u, out, &mut scratch);
    }

    fn dir_deriv(&self, theta: f64, t: f64, u: &[C64], p: &[C64], out: &mut [C64]) {
        self.inner.dir_deriv(theta, t, u, p, out);
        let mut scratch = state::zeros(self.dim());
        self.add_gauge(p, out, &mut scratch);
    }

    fn second_dir_deriv(
        &self,
        theta: f64,
        t: f64,
        u: &[C64],
        p: &[C64],
        q: &[C64],
        out: &mut [C64],
    ) {
        self.inner.second_dir_deriv(theta, t, u, p, q, out);
    }

    fn third_dir_deriv(
        &self,
        theta: f64,
        t: f64,
        u: &[C64],
        p: &[C64],
        q: &[C64],
        r: &[C64],
        out: &mut [C64],
    ) {
        self.inner.third_dir_deriv(theta, t, u, p, q, r, out);
    }

    fn theta_deriv(&self, theta: f64, t: f64, u: &[C64], out: &mut [C64]) {
        self.inner.theta_deriv(theta, t, u, out);
    }

    fn profile(&self, grid: &ThetaGrid, t: f64, u: &[C64], out: &mut ThetaSamples) {
        self.inner.profile(grid, t, u, out);
        let mut g = state::zeros(self.dim());
        self.inner.slow_gauge_apply(u, &mut g);
        for j in 0..grid.len() {
            let block = out.node_values_mut(j);
            for c in 0..g.len() {
                block[c] += g[c];
            }
        }
    }

    fn profile_dir(&self, grid: &ThetaGrid, t: f64, u: &[C64], p: &[C64], out: &mut ThetaSamples) {
        self.inner.profile_dir(grid, t, u, p, out);
        let mut g = state::zeros(self.dim());
        self.inner.slow_gauge_apply(p, &mut g);
        for j in 0..grid.len() {
            let block = out.node_values_mut(j);
            for c in 0..g.len() {
                block[c] += g[c];
            }
        }
    }

    fn profile_dir_per_node(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        dirs: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        self.inner.profile_dir_per_node(grid, t, u, dirs, out);
        let mut g = state::zeros(self.dim());
        for j in 0..grid.len() {
            self.inner.slow_gauge_apply(dirs.node_values(j), &mut g);
            let block = out.node_values_mut(j);
            for c in 0..g.len() {
                block[c] += g[c];
            }
        }
    }

    fn profile_second_dir_per_node(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        p: &[C64],
        q_nodes: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        self.inner.profile_second_dir_per_node(grid, t, u, p, q_nodes, out);
    }

    fn profile_third_dir(
        &self,
        grid: &ThetaGrid,
        t: f64,
        u: &[C64],
        p: &[C64],
        q: &[C64],
        r: &[C64],
        out: &mut ThetaSamples,
    ) {
        self.inner.profile_third_dir(grid, t, u, p, q, r, out);
    }

    fn profile_states(&self, grid: &ThetaGrid, t: f64, states: &ThetaSamples, out: &mut ThetaSamples) {
        self.inner.profile_states(grid, t, states, out);
        let mut g = state::zeros(self.dim());
        for j in 0..grid.len() {
            self.inner.slow_gauge_apply(states.node_values(j), &mut g);
            let block = out.node_values_mut(j);
            for c in 0..g.len() {
                block[c] += g[c];
            }
        }
    }

    fn profile_states_dir(
        &self,
        grid: &ThetaGrid,
        t: f64,
        states: &ThetaSamples,
        dirs: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        self.inner.profile_states_dir(grid, t, states, dirs, out);
        let mut g = state::zeros(self.dim());
        for j in 0..grid.len() {
            self.inner.slow_gauge_apply(dirs.node_values(j), &mut g);
            let block = out.node_values_mut(j);
            for c in 0..g.len() {
                block[c] += g[c];
            }
        }
    }

    fn profile_states_second_dir(
        &self,
        grid: &ThetaGrid,
        t: f64,
        states: &ThetaSamples,
        p_nodes: &ThetaSamples,
        q_nodes: &ThetaSamples,
        out: &mut ThetaSamples,
    ) {
        self.inner
            .profile_states_second_dir(grid, t, states, p_nodes, q_nodes, out);
    }

    // already augmented; never wrap twice
    fn slow_gauge_apply(&self, _u: &[C64], out: &mut [C64]) -> bool {
        out.fill(C64::new(0.0, 0.0));
        false
    }
}

/// Apply several weight rows to sweep samples.
pub fn contract_rows(sweep: &ThetaSamples, rows: &[&[f64]], outs: &mut [crate::state::State]) {
    let dim = sweep.dim;
    for (r, row) in rows.iter().enumerate() {
        for z in outs[r].iter_mut() {
            *z = C64::new(0.0, 0.0);
        }
        for (j, w) in row.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let block = sweep.node_values(j);
            for c in 0..dim {
                outs[r][c] += *w * block[c];
            }
        }
    }
}

/// Central finite difference of `dir_deriv` in direction q with step
/// h = max(1, |u|) * eps_machine^(1/3); symmetric in (p, q) up to O(h^2) for
/// true second derivatives.
pub fn fd_second_dir_deriv<F: PeriodicField + ?Sized>(
    field: &F,
    theta: f64,
    t: f64,
    u: &[C64],
    p: &[C64],
    q: &[C64],
    out: &mut [C64],
) {
    let dim = field.dim();
    let qn = state::norm(q);
    if qn == 0.0 {
        out[..dim].fill(C64::new(0.0, 0.0));
        return;
    }
    let h = state::norm(u).max(1.0) * f64::EPSILON.cbrt();
    let step = h / qn;
    let mut shifted = u.to_vec();
    state::axpy(state::real(step), q, &mut shifted);
    let mut plus = state::zeros(dim);
    field.dir_deriv(theta, t, &shifted, p, &mut plus);
    shifted.copy_from_slice(u);
    state::axpy(state::real(-step), q, &mut shifted);
    let mut minus = state::zeros(dim);
    field.dir_deriv(theta, t, &shifted, p, &mut minus);
    for c in 0..dim {
        out[c] = (plus[c] - minus[c]) / (2.0 * step);
    }
}

/// Central finite difference of `second_dir_deriv` in direction r.
pub fn fd_third_dir_deriv<F: PeriodicField + ?Sized>(
    field: &F,
    theta: f64,
    t: f64,
    u: &[C64],
    p: &[C64],
    q: &[C64],
    r: &[C64],
    out: &mut [C64],
) {
    let dim = field.dim();
    let rn = state::norm(r);
    if rn == 0.0 {
        out[..dim].fill(C64::new(0.0, 0.0));
        return;
    }
    let h = state::norm(u).max(1.0) * f64::EPSILON.cbrt().sqrt();
    let step = h / rn;
    let mut shifted = u.to_vec();
    state::axpy(state::real(step), r, &mut shifted);
    let mut plus = state::zeros(dim);
    field.second_dir_deriv(theta, t, &shifted, p, q, &mut plus);
    shifted.copy_from_slice(u);
    state::axpy(state::real(-step), r, &mut shifted);
    let mut minus = state::zeros(dim);
    field.second_dir_deriv(theta, t, &shifted, p, q, &mut minus);
    for c in 0..dim {
        out[c] = (plus[c] - minus[c]) / (2.0 * step);
    }
}

/// Simple fields used by unit tests and the scalar convergence model.
pub mod testing {
    use super::*;
    use std::f64::consts::PI;

    /// f_theta(u) = cos(2 pi theta) * u  (scalar, linear)
    pub struct ScalarCosField;

    impl PeriodicField for ScalarCosField {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, theta: f64, _t: f64, u: &[C64], out: &mut [C64]) {
            out[0] = state::real((2.0 * PI * theta).cos()) * u[0];
        }
        fn dir_deriv(&self, theta: f64, _t: f64, _u: &[C64], p: &[C64], out: &mut [C64]) {
            out[0] = state::real((2.0 * PI * theta).cos()) * p[0];
        }
        fn second_dir_deriv(
            &self,
            _theta: f64,
            _t: f64,
            _u: &[C64],
            _p: &[C64],
            _q: &[C64],
            out: &mut [C64],
        ) {
            out[0] = C64::new(0.0, 0.0);
        }
        fn third_dir_deriv(
            &self,
            _theta: f64,
            _t: f64,
            _u: &[C64],
            _p: &[C64],
            _q: &[C64],
            _r: &[C64],
            out: &mut [C64],
        ) {
            out[0] = C64::new(0.0, 0.0);
        }
    }

    /// f_theta(u) = (1 + cos(2 pi theta)) * u; the exact solution of the
    /// oscillatory model problem is u0 * exp(t + eps sin(2 pi t / eps)/(2 pi)).
    pub struct ScalarOnePlusCosField;

    impl PeriodicField for ScalarOnePlusCosField {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, theta: f64, _t: f64, u: &[C64], out: &mut [C64]) {
            out[0] = state::real(1.0 + (2.0 * PI * theta).cos()) * u[0];
        }
        fn dir_deriv(&self, theta: f64, _t: f64, _u: &[C64], p: &[C64], out: &mut [C64]) {
            out[0] = state::real(1.0 + (2.0 * PI * theta).cos()) * p[0];
        }
        fn second_dir_deriv(
            &self,
            _theta: f64,
            _t: f64,
            _u: &[C64],
            _p: &[C64],
            _q: &[C64],
            out: &mut [C64],
        ) {
            out[0] = C64::new(0.0, 0.0);
        }
        fn third_dir_deriv(
            &self,
            _theta: f64,
            _t: f64,
            _u: &[C64],
            _p: &[C64],
            _q: &[C64],
            _r: &[C64],
            out: &mut [C64],
        ) {
            out[0] = C64::new(0.0, 0.0);
        }
    }

    /// Theta-independent linear field f(u) = A u (dense matrix, row-major).
    pub struct LinearField {
        pub matrix: Vec<C64>,
        pub dim: usize,
    }

    impl PeriodicField for LinearField {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, _theta: f64, _t: f64, u: &[C64], out: &mut [C64]) {
            for r in 0..self.dim {
                let mut acc = C64::new(0.0, 0.0);
                for c in 0..self.dim {
                    acc += self.matrix[r * self.dim + c] * u[c];
                }
                out[r] = acc;
            }
        }
        fn dir_deriv(&self, theta: f64, t: f64, _u: &[C64], p: &[C64], out: &mut [C64]) {
            self.eval(theta, t, p, out);
        }
    }

    /// f(u) = u^2 componentwise, theta-independent.
    pub struct ComponentSquareField {
        pub dim: usize,
    }

    impl PeriodicField for ComponentSquareField {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, _theta: f64, _t: f64, u: &[C64], out: &mut [C64]) {
            for c in 0..self.dim {
                out[c] = u[c] * u[c];
            }
        }
        fn dir_deriv(&self, _theta: f64, _t: f64, u: &[C64], p: &[C64], out: &mut [C64]) {
            for c in 0..self.dim {
                out[c] = 2.0 * u[c] * p[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use crate::state::State;
    use super::*;

    #[test]
    fn epsilon_params_validation() {
        assert!(EpsilonParams::new(0.0).is_err());
        assert!(EpsilonParams::new(1.5).is_err());
        assert!(EpsilonParams::new(1.0).is_ok());
        let e = EpsilonParams::from_period_two_pi(1.0).unwrap();
        assert!((e.epsilon - 2.0 * std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn damping_factor_switches() {
        let on = EpsilonParams::new(0.5).unwrap();
        assert!((on.damping_factor() - (-0.25f64).exp()).abs() < 1e-15);
        let off = on.with_damping(false);
        assert_eq!(off.damping_factor(), 1.0);
    }

    #[test]
    fn fd_second_dir_deriv_vanishes_on_linear_field() {
        let field = LinearField {
            matrix: vec![
                state::real(1.0),
                state::real(2.0),
                state::real(-0.5),
                state::real(0.3),
            ],
            dim: 2,
        };
        let u = vec![state::real(0.4), state::real(-1.1)];
        let p = vec![state::real(1.0), state::real(0.5)];
        let q = vec![state::real(-0.2), state::real(0.9)];
        let mut out = state::zeros(2);
        fd_second_dir_deriv(&field, 0.3, 0.0, &u, &p, &q, &mut out);
        let h = state::norm(&u).max(1.0) * f64::EPSILON.cbrt();
        assert!(state::norm(&out) < 10.0 * h * h + 1e-9);
    }

    #[test]
    fn fd_second_dir_deriv_on_componentwise_square() {
        // f(u) = u^2 componentwise, p = q = e1 -> 2 e1
        let field = ComponentSquareField { dim: 3 };
        let u = vec![state::real(0.7), state::real(-0.2), state::real(1.3)];
        let mut e1 = state::zeros(3);
        e1[0] = state::real(1.0);
        let mut out = state::zeros(3);
        fd_second_dir_deriv(&field, 0.0, 0.0, &u, &e1, &e1, &mut out);
        assert!((out[0] - state::real(2.0)).norm() < 1e-7);
        assert!(out[1].norm() < 1e-7);
        assert!(out[2].norm() < 1e-7);
    }

    #[test]
    fn fd_second_dir_deriv_symmetric_on_smooth_field() {
        let field = ComponentSquareField { dim: 2 };
        let u = vec![state::real(0.3), state::real(0.8)];
        let p = vec![state::real(0.6), state::real(-0.1)];
        let q = vec![state::real(-0.4), state::real(1.2)];
        let mut pq = state::zeros(2);
        let mut qp = state::zeros(2);
        fd_second_dir_deriv(&field, 0.1, 0.0, &u, &p, &q, &mut pq);
        fd_second_dir_deriv(&field, 0.1, 0.0, &u, &q, &p, &mut qp);
        let h = f64::EPSILON.cbrt();
        assert!(state::dist(&pq, &qp) < 10.0 * h * h + 1e-9);
    }

    #[test]
    fn dir_deriv_matches_central_differences() {
        let field = ComponentSquareField { dim: 2 };
        let u = vec![state::real(0.9), state::real(-0.6)];
        let p = vec![state::real(0.2), state::real(0.7)];
        let h = 1e-5;
        let mut exact = state::zeros(2);
        field.dir_deriv(0.2, 0.0, &u, &p, &mut exact);
        let mut up = u.clone();
        state::axpy(state::real(h), &p, &mut up);
        let mut um = u.clone();
        state::axpy(state::real(-h), &p, &mut um);
        let mut fp = state::zeros(2);
        let mut fm = state::zeros(2);
        field.eval(0.2, 0.0, &up, &mut fp);
        field.eval(0.2, 0.0, &um, &mut fm);
        let fd: State = (0..2).map(|c| (fp[c] - fm[c]) / (2.0 * h)).collect();
        assert!(state::dist(&exact, &fd) / state::norm(&exact).max(1e-30) < 1e-6);
    }

    #[test]
    fn eval_is_periodic_in_theta() {
        let field = ScalarCosField;
        let u = vec![state::real(1.3)];
        for theta in [0.0, 0.21, 0.77] {
            let mut a = state::zeros(1);
            let mut b = state::zeros(1);
            field.eval(theta, 0.0, &u, &mut a);
            field.eval(theta + 1.0, 0.0, &u, &mut b);
            assert!((a[0] - b[0]).norm() < 1e-14);
        }
    }

    #[test]
    fn dir_deriv_linear_in_direction() {
        let field = ScalarCosField;
        let u = vec![state::real(0.5)];
        let p = vec![state::real(0.3)];
        let q = vec![state::real(-0.8)];
        let (alpha, beta) = (1.7, -0.4);
        let mut combined = state::zeros(1);
        let dir: State = vec![alpha * p[0] + beta * q[0]];
        field.dir_deriv(0.13, 0.0, &u, &dir, &mut combined);
        let mut dp = state::zeros(1);
        let mut dq = state::zeros(1);
        field.dir_deriv(0.13, 0.0, &u, &p, &mut dp);
        field.dir_deriv(0.13, 0.0, &u, &q, &mut dq);
        assert!((combined[0] - (alpha * dp[0] + beta * dq[0])).norm() < 1e-14);
    }

    #[test]
    fn default_profile_matches_pointwise_eval() {
        let field = ScalarCosField;
        let grid = crate::torus::ThetaGrid::new(8).unwrap();
        let u = vec![state::real(2.0)];
        let mut prof = crate::torus::ThetaSamples::zeros(grid.clone(), 1);
        field.profile(&grid, 0.0, &u, &mut prof);
        for j in 0..8 {
            let mut direct = state::zeros(1);
            field.eval(grid.node(j), 0.0, &u, &mut direct);
            assert_eq!(prof.node_values(j)[0], direct[0]);
        }
    }
}
