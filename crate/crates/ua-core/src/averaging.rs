//! Construction of the near-identity change of variable Phi^[n] and the
//! averaged field F^[n] by fixed-point iteration, for stroboscopic
//! (Phi^[n]_0 = id) and standard (<Phi^[n]> = id) averaging, together with
//! the defect diagnostic measuring how well the pair satisfies the
//! homological equation.
//!
//! The iteration, starting from Phi^[0] = id and F^[0] = <f>:
//!
//!   Phi^[k+1]_theta = id - eps G^[k+1]
//!                     + eps int_0^theta ( f_tau o Phi^[k]_tau - d_u Phi^[k]_tau F^[k] ) dtau
//!   F^[k]           = <d_u Phi^[k]>^{-1} <f o Phi^[k]>
//!
//! with G^[k+1] = 0 (stroboscopic) or the average of the integral term
//! (standard, which makes <Phi^[k+1]> = id and lets F^[k] collapse to
//! <f o Phi^[k]>). All theta-integrals are taken spectrally on the grid, so
//! they are exact for trig-polynomial fields resolved by it.
//!
//! Directional derivatives of Phi^[n] are propagated exactly through the
//! recursion (no finite differences): the chain for n = 3 consumes first,
//! second and third directional derivatives of f.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{EpsilonParams, PeriodicField};
use crate::state::{self, C64, State};
use crate::torus::{ThetaGrid, ThetaSamples};

/// Normalization choice for the change of variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AveragingFlavor {
    /// Phi^[n]_0 = id; geometric, used by the pullback method.
    Stroboscopic,
    /// <Phi^[n]> = id; simpler, used by the micro-macro method.
    Standard,
}

/// Tolerances for the near-identity fixed points of this module.
#[derive(Clone, Copy, Debug)]
pub struct FixedPointParams {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointParams {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
        }
    }
}

/// Below this eps the near-identity fixed points contract so hard that a
/// single sweep is already converged; short-circuit to avoid useless work.
const EPS_DEGENERATE: f64 = 1e-14;

/// A constructed change of variable Phi^[n] with its averaged field F^[n].
///
/// For fields whose slow-time dependence is a declared unitary gauge
/// (f(theta,t,u) = e^{-tG} f0(e^{tG} u)), the recursion runs on the
/// augmented field f + G u, which makes the construction solve the full
/// transport homological equation (1/eps) d_theta Phi + d_t Phi + d_u Phi F
/// = f o Phi; consumers then subtract the plain drift G v from the averaged
/// evolution. Autonomous fields are untouched.
#[derive(Clone)]
pub struct ChangeOfVariable {
    pub order: usize,
    pub flavor: AveragingFlavor,
    /// the field the recursion runs on (augmented when gauged)
    pub field: Arc<dyn PeriodicField>,
    /// the problem's own field (what the true dynamics follow)
    pub raw_field: Arc<dyn PeriodicField>,
    pub gauged: bool,
    pub eps: EpsilonParams,
    pub grid: ThetaGrid,
    pub fp: FixedPointParams,
}

/// Everything the micro-macro right-hand side needs about Phi^[n] at one
/// base point (t, u), sampled on the grid.
pub struct MapJet {
    pub order: usize,
    /// Phi^[n]_theta(u)
    pub phi: ThetaSamples,
    /// f_theta(Phi^[n]_theta(u))
    pub f_at_phi: ThetaSamples,
    /// (1/eps) d_theta Phi^[n]_theta(u); identically zero for order 0
    pub theta_deriv_over_eps: ThetaSamples,
    /// F^[n](u)
    pub cap_f: State,
    /// d_u Phi^[n]_theta(u) . F^[n](u)
    pub dphi_cap_f: ThetaSamples,
}

/// Max-over-grid defect norms per probe state.
#[derive(Clone, Debug)]
pub struct DefectReport {
    pub order: usize,
    pub theta_max_norm: f64,
    pub per_probe: Vec<(State, f64)>,
}

impl ChangeOfVariable {
    pub fn new(
        order: usize,
        flavor: AveragingFlavor,
        field: Arc<dyn PeriodicField>,
        eps: EpsilonParams,
        grid: ThetaGrid,
    ) -> Result<Self> {
        if order > 3 {
            return Err(Error::UnsupportedOrder(order));
        }
        let mut probe = state::zeros(field.dim());
        let gauged = field.slow_gauge_apply(&state::zeros(field.dim()), &mut probe);
        let work: Arc<dyn PeriodicField> = if gauged {
            Arc::new(crate::field::GaugeAugmentedField {
                inner: field.clone(),
            })
        } else {
            field.clone()
        };
        Ok(Self {
            order,
            flavor,
            field: work,
            raw_field: field,
            gauged,
            eps,
            grid,
            fp: FixedPointParams::default(),
        })
    }

    fn gamma(&self) -> f64 {
        match self.flavor {
            AveragingFlavor::Stroboscopic => 0.0,
            AveragingFlavor::Standard => 1.0,
        }
    }

    /// Samples of g_theta(u) = int_0^theta (f_tau(u) - <f>(u)) dtau, from
    /// the problem's own field (the gauge term is theta-constant and drops
    /// out anyway).
    pub fn g_samples(&self, t: f64, u: &[C64]) -> Result<ThetaSamples> {
        let dim = self.raw_field.dim();
        let mut f = ThetaSamples::zeros(self.grid.clone(), dim);
        self.raw_field.profile(&self.grid, t, u, &mut f);
        let mean = f.average();
        f.sub_state(&mean);
        f.antiderivative_from_zero()
    }

    /// Phi^[n]_theta(u) at an arbitrary phase.
    pub fn phi_eval(&self, theta: f64, t: f64, u: &[C64]) -> Result<State> {
        let build = Builder::new(self, t, u)?;
        Ok(build.levels[self.order].phi.interp_eval(theta))
    }

    /// d_theta Phi^[n]_theta(u), from the closed form
    /// d_theta Phi^[n] = eps ( f o Phi^[n-1] - d_u Phi^[n-1] F^[n-1] ).
    pub fn phi_theta_deriv(&self, theta: f64, t: f64, u: &[C64]) -> Result<State> {
        if self.order == 0 {
            return Ok(state::zeros(self.field.dim()));
        }
        let build = Builder::new(self, t, u)?;
        let mut v = build.levels[self.order - 1]
            .b
            .as_ref()
            .expect("integrand stored for every built level")
            .interp_eval(theta);
        state::scale(&mut v, state::real(self.eps.epsilon));
        Ok(v)
    }

    /// d_u Phi^[n]_theta(u) . p, propagated exactly through the recursion.
    pub fn phi_dir_deriv(&self, theta: f64, t: f64, u: &[C64], p: &[C64]) -> Result<State> {
        let build = Builder::new(self, t, u)?;
        Ok(build.dphi(self.order, p)?.interp_eval(theta))
    }

    /// Solve Phi^[n]_theta(v) = w for v by the near-identity fixed point
    /// v <- v + omega (w - Phi^[n]_theta(v)), starting from v = w. The
    /// relaxation weight backs off when the residual grows, which keeps the
    /// iteration in the contraction basin for strongly nonlinear fields at
    /// eps near 1.
    pub fn phi_inverse_at(&self, theta: f64, t: f64, w: &[C64]) -> Result<State> {
        let scale = state::tol_scale(w);
        let mut v = w.to_vec();
        let max_iter = if self.eps.epsilon < EPS_DEGENERATE {
            1
        } else {
            self.fp.max_iter
        };
        let mut omega = 1.0f64;
        let mut prev_res = f64::INFINITY;
        let mut residual = f64::INFINITY;
        for _ in 0..max_iter {
            let build = Builder::new(self, t, &v)?;
            let phi_v = build.levels[self.order].phi.interp_eval(theta);
            let gap: State = (0..v.len()).map(|c| w[c] - phi_v[c]).collect();
            residual = state::norm(&gap);
            if residual <= self.fp.tol * scale {
                return Ok(v);
            }
            if residual > prev_res {
                omega = (0.5 * omega).max(1.0 / 64.0);
            } else if residual < 0.25 * prev_res {
                omega = (1.5 * omega).min(1.0);
            }
            state::axpy(state::real(omega), &gap, &mut v);
            prev_res = residual;
        }
        if self.eps.epsilon < EPS_DEGENERATE {
            return Ok(v);
        }
        Err(Error::FixedPointDiverged {
            residual,
            iterations: max_iter,
        })
    }

    /// Max over the grid and the probe states of |delta^[n]_theta(u)| with
    ///
    ///   delta^[n] = (1/eps) d_theta Phi^[n] + d_u Phi^[n] F^[n] - f o Phi^[n].
    pub fn defect(&self, t: f64, probes: &[State]) -> Result<DefectReport> {
        let mut per_probe = Vec::with_capacity(probes.len());
        let mut theta_max = 0.0f64;
        for u in probes {
            let jet = self.map_jet(t, u)?;
            let mut worst = 0.0f64;
            for j in 0..self.grid.len() {
                let b = jet.theta_deriv_over_eps.node_values(j);
                let d = jet.dphi_cap_f.node_values(j);
                let f = jet.f_at_phi.node_values(j);
                let norm2: f64 = (0..b.len()).map(|c| (b[c] + d[c] - f[c]).norm_sqr()).sum();
                worst = worst.max(norm2.sqrt());
            }
            theta_max = theta_max.max(worst);
            per_probe.push((u.clone(), worst));
        }
        Ok(DefectReport {
            order: self.order,
            theta_max_norm: theta_max,
            per_probe,
        })
    }

    /// Build the full jet at (t, u): map samples, averaged field, exact
    /// theta- and F-directional derivatives.
    pub fn map_jet(&self, t: f64, u: &[C64]) -> Result<MapJet> {
        let mut build = Builder::new(self, t, u)?;
        let n = self.order;
        let dim = self.field.dim();
        let dphi_cap_f = {
            let cap_f = build.levels[n].cap_f.clone();
            build.dphi(n, &cap_f)?
        };
        let theta_deriv_over_eps = if n == 0 {
            ThetaSamples::zeros(self.grid.clone(), dim)
        } else {
            build.levels[n - 1]
                .b
                .take()
                .expect("integrand stored for every built level")
        };
        let top = build.levels.swap_remove(n);
        Ok(MapJet {
            order: n,
            phi: top.phi,
            f_at_phi: top.f_phi,
            theta_deriv_over_eps,
            cap_f: top.cap_f,
            dphi_cap_f,
        })
    }
}

/// Per-level data of the recursion at one base point.
struct Level {
    /// Phi^[k]_theta(u) on the grid
    phi: ThetaSamples,
    /// f_theta(Phi^[k]_theta(u))
    f_phi: ThetaSamples,
    /// F^[k](u)
    cap_f: State,
    /// integrand B_k = f o Phi^[k] - d_u Phi^[k] F^[k]; present once level
    /// k+1 has been built (and for the top level, built on demand)
    b: Option<ThetaSamples>,
}

struct Builder<'a> {
    cov: &'a ChangeOfVariable,
    t: f64,
    u: Vec<C64>,
    levels: Vec<Level>,
}

impl<'a> Builder<'a> {
    fn new(cov: &'a ChangeOfVariable, t: f64, u: &[C64]) -> Result<Self> {
        let dim = cov.field.dim();
        if u.len() != dim {
            return Err(Error::SizeMismatch {
                expected: dim,
                got: u.len(),
            });
        }
        let mut builder = Builder {
            cov,
            t,
            u: u.to_vec(),
            levels: Vec::with_capacity(cov.order + 1),
        };

        // level 0: Phi = id, F = <f>
        let phi0 = const_samples(&cov.grid, u);
        let mut f0 = ThetaSamples::zeros(cov.grid.clone(), dim);
        cov.field.profile(&cov.grid, t, u, &mut f0);
        let cap_f0 = f0.average();
        builder.levels.push(Level {
            phi: phi0,
            f_phi: f0,
            cap_f: cap_f0,
            b: None,
        });

        for k in 0..cov.order {
            builder.build_next_level(k)?;
        }
        // the top level's integrand backs the theta derivative; build it so
        // map_jet can hand it out for order >= 1 without redoing sweeps
        Ok(builder)
    }

    fn eps(&self) -> f64 {
        self.cov.eps.epsilon
    }

    fn dim(&self) -> usize {
        self.cov.field.dim()
    }

    /// Antiderivative-from-zero followed by the flavor projection: the
    /// standard flavor removes the mean so that <Phi> stays the identity.
    fn ap(&self, integrand: &ThetaSamples) -> Result<ThetaSamples> {
        let mut anti = integrand.antiderivative_from_zero()?;
        if self.cov.gamma() == 1.0 {
            let mean = anti.average();
            anti.sub_state(&mean);
        }
        Ok(anti)
    }

    /// Build level k+1 from level k: compute B_k, integrate, evaluate f on
    /// the new map samples and form F^[k+1].
    fn build_next_level(&mut self, k: usize) -> Result<()> {
        let dim = self.dim();
        let dphi_capf = self.dphi(k, &self.levels[k].cap_f.clone())?;
        let mut b = self.levels[k].f_phi.clone();
        b.sub_assign(&dphi_capf);
        let anti = self.ap(&b)?;
        self.levels[k].b = Some(b);

        let mut phi_next = const_samples(&self.cov.grid, &self.u);
        for (out, a) in phi_next.values.iter_mut().zip(&anti.values) {
            *out += self.eps() * a;
        }
        let mut f_next = ThetaSamples::zeros(self.cov.grid.clone(), dim);
        self.cov
            .field
            .profile_states(&self.cov.grid, self.t, &phi_next, &mut f_next);

        self.levels.push(Level {
            phi: phi_next,
            f_phi: f_next,
            cap_f: state::zeros(dim),
            b: None,
        });
        let cap_f = self.cap_f(k + 1)?;
        self.levels[k + 1].cap_f = cap_f;
        Ok(())
    }

    /// F^[k]: <f o Phi^[k]> for standard averaging (where <d_u Phi^[k]> is
    /// the identity by construction), and <d_u Phi^[k]>^{-1} <f o Phi^[k]>
    /// for stroboscopic, applied matrix-free by near-identity fixed point.
    fn cap_f(&self, k: usize) -> Result<State> {
        let b = self.levels[k].f_phi.average();
        match self.cov.flavor {
            AveragingFlavor::Standard => Ok(b),
            AveragingFlavor::Stroboscopic => self.solve_mean_dphi(k, &b),
        }
    }

    /// Solve <d_u Phi^[k]> x = b via x <- b - (<d_u Phi^[k]> - id) x.
    fn solve_mean_dphi(&self, k: usize, b: &State) -> Result<State> {
        if k == 0 {
            return Ok(b.clone());
        }
        let scale = state::tol_scale(b);
        let mut x = b.clone();
        let max_iter = if self.eps() < EPS_DEGENERATE {
            1
        } else {
            self.cov.fp.max_iter
        };
        let mut residual = f64::INFINITY;
        for _ in 0..max_iter {
            let t_x = self.dphi(k, &x)?.average();
            let mut x_next = x.clone();
            for c in 0..x.len() {
                x_next[c] = b[c] - (t_x[c] - x[c]);
            }
            residual = state::dist(&x_next, &x);
            x = x_next;
            if residual <= self.cov.fp.tol * scale {
                return Ok(x);
            }
        }
        if self.eps() < EPS_DEGENERATE {
            return Ok(x);
        }
        Err(Error::FixedPointDiverged {
            residual,
            iterations: max_iter,
        })
    }

    /// d_u F^[k](u) . p
    fn d_cap_f(&self, k: usize, p: &[C64]) -> Result<State> {
        let dphi_p = self.dphi(k, p)?;
        self.d_cap_f_with(k, p, &dphi_p)
    }

    /// d_u F^[k](u) . p with the tangent samples already computed.
    fn d_cap_f_with(&self, k: usize, p: &[C64], dphi_p: &ThetaSamples) -> Result<State> {
        let mut df = ThetaSamples::zeros(self.cov.grid.clone(), self.dim());
        self.cov
            .field
            .profile_states_dir(&self.cov.grid, self.t, &self.levels[k].phi, dphi_p, &mut df);
        let db = df.average();
        match self.cov.flavor {
            AveragingFlavor::Standard => Ok(db),
            AveragingFlavor::Stroboscopic => {
                // T dF = db - dT[p] F,  dT[p] x = <d2phi(x, p)>
                let dt_f = self.d2phi(k, &self.levels[k].cap_f.clone(), p)?.average();
                let rhs: State = (0..db.len()).map(|c| db[c] - dt_f[c]).collect();
                self.solve_mean_dphi(k, &rhs)
            }
        }
    }

    /// d^2_u F^[k](u)(a, b)
    fn d2_cap_f(&self, k: usize, a: &[C64], b_dir: &[C64]) -> Result<State> {
        let dphi_a = self.dphi(k, a)?;
        let dphi_b = self.dphi(k, b_dir)?;
        let d2phi_ab = self.d2phi(k, a, b_dir)?;
        let mut d2f = ThetaSamples::zeros(self.cov.grid.clone(), self.dim());
        self.cov.field.profile_states_second_dir(
            &self.cov.grid,
            self.t,
            &self.levels[k].phi,
            &dphi_a,
            &dphi_b,
            &mut d2f,
        );
        let mut df_d2phi = ThetaSamples::zeros(self.cov.grid.clone(), self.dim());
        self.cov.field.profile_states_dir(
            &self.cov.grid,
            self.t,
            &self.levels[k].phi,
            &d2phi_ab,
            &mut df_d2phi,
        );
        let mut d2b = d2f.average();
        let m = df_d2phi.average();
        for c in 0..d2b.len() {
            d2b[c] += m[c];
        }
        match self.cov.flavor {
            AveragingFlavor::Standard => Ok(d2b),
            AveragingFlavor::Stroboscopic => {
                // T d2F = d2b - d2T(a,b) F - dT[a] dF[b] - dT[b] dF[a]
                let cap_f = self.levels[k].cap_f.clone();
                let d2t_f = self.d3phi(k, &cap_f, a, b_dir)?.average();
                let df_a = self.d_cap_f(k, a)?;
                let df_b = self.d_cap_f(k, b_dir)?;
                let dt_a_dfb = self.d2phi(k, &df_b, a)?.average();
                let dt_b_dfa = self.d2phi(k, &df_a, b_dir)?.average();
                let rhs: State = (0..d2b.len())
                    .map(|c| d2b[c] - d2t_f[c] - dt_a_dfb[c] - dt_b_dfa[c])
                    .collect();
                self.solve_mean_dphi(k, &rhs)
            }
        }
    }

    /// d_u Phi^[k]_theta(u) . p on the grid.
    fn dphi(&self, k: usize, p: &[C64]) -> Result<ThetaSamples> {
        if k == 0 {
            return Ok(const_samples(&self.cov.grid, p));
        }
        let km = k - 1;
        let dphi_p = self.dphi(km, p)?;
        // dB_{k-1}[p] = df(Phi)[dphi p] - d2phi(F, p) - dphi[dF p]
        let mut db = ThetaSamples::zeros(self.cov.grid.clone(), self.dim());
        self.cov
            .field
            .profile_states_dir(&self.cov.grid, self.t, &self.levels[km].phi, &dphi_p, &mut db);
        let d2phi_fp = self.d2phi(km, &self.levels[km].cap_f.clone(), p)?;
        db.sub_assign(&d2phi_fp);
        let df_p = self.d_cap_f_with(km, p, &dphi_p)?;
        let dphi_dfp = self.dphi(km, &df_p)?;
        db.sub_assign(&dphi_dfp);

        let anti = self.ap(&db)?;
        let mut out = const_samples(&self.cov.grid, p);
        for (o, a) in out.values.iter_mut().zip(&anti.values) {
            *o += self.eps() * a;
        }
        Ok(out)
    }

    /// d^2_u Phi^[k]_theta(u)(a, b) on the grid.
    fn d2phi(&self, k: usize, a: &[C64], b_dir: &[C64]) -> Result<ThetaSamples> {
        let dim = self.dim();
        if k == 0 {
            return Ok(ThetaSamples::zeros(self.cov.grid.clone(), dim));
        }
        let km = k - 1;
        let phi = &self.levels[km].phi;
        let dphi_a = self.dphi(km, a)?;
        let dphi_b = self.dphi(km, b_dir)?;
        // dB'_{k-1}(a,b) = d2f(Phi)(dphi a, dphi b) + df(Phi)[d2phi(a,b)]
        //   - d3phi(F,a,b) - d2phi(dF[b], a) - d2phi(dF[a], b) - dphi[d2F(a,b)]
        let mut acc = ThetaSamples::zeros(self.cov.grid.clone(), dim);
        self.cov
            .field
            .profile_states_second_dir(&self.cov.grid, self.t, phi, &dphi_a, &dphi_b, &mut acc);
        let d2phi_ab = self.d2phi(km, a, b_dir)?;
        let mut df_d2phi = ThetaSamples::zeros(self.cov.grid.clone(), dim);
        self.cov
            .field
            .profile_states_dir(&self.cov.grid, self.t, phi, &d2phi_ab, &mut df_d2phi);
        for (o, v) in acc.values.iter_mut().zip(&df_d2phi.values) {
            *o += v;
        }
        let cap_f = self.levels[km].cap_f.clone();
        let d3 = self.d3phi(km, &cap_f, a, b_dir)?;
        acc.sub_assign(&d3);
        let df_b = self.d_cap_f(km, b_dir)?;
        let d2_dfb_a = self.d2phi(km, &df_b, a)?;
        acc.sub_assign(&d2_dfb_a);
        let df_a = self.d_cap_f(km, a)?;
        let d2_dfa_b = self.d2phi(km, &df_a, b_dir)?;
        acc.sub_assign(&d2_dfa_b);
        let d2f_ab = self.d2_cap_f(km, a, b_dir)?;
        let dphi_d2f = self.dphi(km, &d2f_ab)?;
        acc.sub_assign(&dphi_d2f);

        let mut anti = self.ap(&acc)?;
        anti.scale(state::real(self.eps()));
        Ok(anti)
    }

    /// d^3_u Phi^[k]_theta(u)(a, b, c) on the grid. Orders <= 3 only ever
    /// need k <= 1, where the level-0 chain collapses to third derivatives
    /// of f around the base point.
    fn d3phi(&self, k: usize, a: &[C64], b_dir: &[C64], c_dir: &[C64]) -> Result<ThetaSamples> {
        let dim = self.dim();
        if k == 0 {
            return Ok(ThetaSamples::zeros(self.cov.grid.clone(), dim));
        }
        if k > 1 {
            return Err(Error::UnsupportedOrder(k + 2));
        }
        // dB''_0(a,b,c) = d3f(u)(a,b,c) - <d3f(u)(a,b,c)>
        let mut d3f = ThetaSamples::zeros(self.cov.grid.clone(), dim);
        self.cov
            .field
            .profile_third_dir(&self.cov.grid, self.t, &self.u, a, b_dir, c_dir, &mut d3f);
        let mean = d3f.average();
        d3f.sub_state(&mean);
        let mut anti = self.ap(&d3f)?;
        anti.scale(state::real(self.eps()));
        Ok(anti)
    }
}

fn const_samples(grid: &ThetaGrid, s: &[C64]) -> ThetaSamples {
    let n = grid.len();
    let dim = s.len();
    let mut values = Vec::with_capacity(n * dim);
    for _ in 0..n {
        values.extend_from_slice(s);
    }
    ThetaSamples {
        grid: grid.clone(),
        dim,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::testing::{LinearField, ScalarCosField};
    use std::f64::consts::PI;

    fn cov(
        order: usize,
        flavor: AveragingFlavor,
        eps: f64,
        n_theta: usize,
        field: Arc<dyn PeriodicField>,
    ) -> ChangeOfVariable {
        ChangeOfVariable::new(
            order,
            flavor,
            field,
            EpsilonParams {
                epsilon: eps,
                problem_epsilon: eps,
                damping_enabled: true,
            },
            ThetaGrid::new(n_theta).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_order_above_three() {
        let r = ChangeOfVariable::new(
            4,
            AveragingFlavor::Standard,
            Arc::new(ScalarCosField),
            EpsilonParams::new(0.5).unwrap(),
            ThetaGrid::new(8).unwrap(),
        );
        assert!(matches!(r, Err(Error::UnsupportedOrder(4))));
    }

    #[test]
    fn g_samples_of_cosine_field_is_scaled_sine() {
        let c = cov(1, AveragingFlavor::Standard, 0.3, 16, Arc::new(ScalarCosField));
        let u = vec![state::real(1.7)];
        let g = c.g_samples(0.0, &u).unwrap();
        for j in 0..16 {
            let theta = g.grid.node(j);
            let expect = (2.0 * PI * theta).sin() / (2.0 * PI) * 1.7;
            assert!((g.node_values(j)[0].re - expect).abs() < 1e-13);
        }
        assert_eq!(g.node_values(0)[0], C64::new(0.0, 0.0));
    }

    #[test]
    fn g_samples_vanish_for_theta_independent_field() {
        let field = Arc::new(LinearField {
            matrix: vec![state::real(2.0)],
            dim: 1,
        });
        let c = cov(1, AveragingFlavor::Standard, 0.5, 8, field);
        let g = c.g_samples(0.0, &[state::real(3.0)]).unwrap();
        assert!(state::norm(&g.values) < 1e-13);
    }

    #[test]
    fn phi_is_identity_at_degenerate_eps() {
        for flavor in [AveragingFlavor::Standard, AveragingFlavor::Stroboscopic] {
            let c = cov(2, flavor, 0.0, 16, Arc::new(ScalarCosField));
            let u = vec![state::real(0.8)];
            for theta in [0.0, 0.3, 0.77] {
                let v = c.phi_eval(theta, 0.0, &u).unwrap();
                assert!((v[0] - u[0]).norm() < 1e-15);
            }
            let dt = c.phi_theta_deriv(0.4, 0.0, &u).unwrap();
            assert!(state::norm(&dt) < 1e-15);
            let p = vec![state::real(0.9)];
            let dp = c.phi_dir_deriv(0.4, 0.0, &u, &p).unwrap();
            assert!(state::dist(&dp, &p) < 1e-15);
            let inv = c.phi_inverse_at(0.4, 0.0, &u).unwrap();
            assert!(state::dist(&inv, &u) < 1e-15);
        }
    }

    #[test]
    fn stroboscopic_phi_at_zero_is_identity() {
        for order in 1..=3 {
            let c = cov(order, AveragingFlavor::Stroboscopic, 0.4, 16, Arc::new(ScalarCosField));
            let u = vec![state::real(1.1)];
            let v = c.phi_eval(0.0, 0.0, &u).unwrap();
            assert!((v[0] - u[0]).norm() < 1e-12, "order {order}");
        }
    }

    #[test]
    fn standard_phi_average_is_identity() {
        for order in 1..=3 {
            let c = cov(order, AveragingFlavor::Standard, 0.4, 16, Arc::new(ScalarCosField));
            let u = vec![state::real(-0.6)];
            let jet = c.map_jet(0.0, &u).unwrap();
            let mean = jet.phi.average();
            assert!(state::dist(&mean, &u) < 1e-10, "order {order}");
        }
    }

    #[test]
    fn order_one_standard_matches_explicit_formula() {
        // Phi^[1] = id + eps (g - <g>) for the scalar cosine field:
        // g = sin(2 pi theta) u / (2 pi), <g> = 0
        let eps = 0.37;
        let c = cov(1, AveragingFlavor::Standard, eps, 16, Arc::new(ScalarCosField));
        let u = vec![state::real(2.0)];
        for theta in [0.0, 0.21, 0.5, 0.83] {
            let v = c.phi_eval(theta, 0.0, &u).unwrap();
            let expect = 2.0 * (1.0 + eps * (2.0 * PI * theta).sin() / (2.0 * PI));
            assert!((v[0].re - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_deriv_matches_closed_form_and_spectral_derivative() {
        // n = 1 standard: d_theta Phi^[1] = eps (f_theta(u) - <f>(u))
        let eps = 0.29;
        let c = cov(1, AveragingFlavor::Standard, eps, 32, Arc::new(ScalarCosField));
        let u = vec![state::real(1.5)];
        for theta in [0.1, 0.37, 0.66] {
            let d = c.phi_theta_deriv(theta, 0.0, &u).unwrap();
            let expect = eps * (2.0 * PI * theta).cos() * 1.5;
            assert!((d[0].re - expect).abs() < 1e-12);
        }
        // cross-check against the spectral derivative of the sampled map
        let jet = c.map_jet(0.0, &u).unwrap();
        let spect = jet.phi.spectral_derivative();
        for j in 0..32 {
            let closed = jet.theta_deriv_over_eps.node_values(j)[0] * eps;
            assert!((spect.node_values(j)[0] - closed).norm() < 1e-9);
        }
    }

    #[test]
    fn near_identity_deviation_scales_linearly_in_eps() {
        let u = vec![state::real(1.0)];
        let dev = |eps: f64| {
            let c = cov(2, AveragingFlavor::Standard, eps, 16, Arc::new(ScalarCosField));
            let jet = c.map_jet(0.0, &u).unwrap();
            let mut m = jet.phi.clone();
            m.sub_state(&u);
            m.max_node_norm()
        };
        let d1 = dev(0.2);
        let d2 = dev(0.1);
        let ratio = d1 / d2;
        assert!((ratio - 2.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn phi_inverse_round_trip() {
        for flavor in [AveragingFlavor::Standard, AveragingFlavor::Stroboscopic] {
            let c = cov(2, flavor, 0.3, 16, Arc::new(ScalarCosField));
            let w = vec![state::real(0.9)];
            let v = c.phi_inverse_at(0.42, 0.0, &w).unwrap();
            let back = c.phi_eval(0.42, 0.0, &v).unwrap();
            assert!(state::dist(&back, &w) < 1e-11);
        }
    }

    #[test]
    fn stroboscopic_inverse_at_zero_is_identity() {
        let c = cov(2, AveragingFlavor::Stroboscopic, 0.5, 16, Arc::new(ScalarCosField));
        let w = vec![state::real(1.3)];
        let v = c.phi_inverse_at(0.0, 0.0, &w).unwrap();
        assert!(state::dist(&v, &w) < 1e-11);
    }

    #[test]
    fn defect_order_zero_is_field_minus_average() {
        let c = cov(0, AveragingFlavor::Standard, 0.3, 16, Arc::new(ScalarCosField));
        let u = vec![state::real(1.0)];
        let report = c.defect(0.0, &[u.clone()]).unwrap();
        // delta^[0]_theta = <f> - f_theta = -cos(2 pi theta) u; max norm 1
        assert!((report.theta_max_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn defect_vanishes_for_theta_independent_field() {
        let field = Arc::new(LinearField {
            matrix: vec![state::real(0.5)],
            dim: 1,
        });
        for order in 0..=3 {
            let c = cov(order, AveragingFlavor::Standard, 0.4, 8, field.clone());
            let report = c.defect(0.0, &[vec![state::real(2.0)]]).unwrap();
            assert!(report.theta_max_norm < 1e-12, "order {order}");
        }
    }

    #[test]
    fn dir_deriv_matches_finite_differences() {
        for flavor in [AveragingFlavor::Standard, AveragingFlavor::Stroboscopic] {
            for order in 1..=2 {
                let c = cov(order, flavor, 0.35, 16, Arc::new(ScalarCosField));
                let u = vec![state::real(0.7)];
                let p = vec![state::real(1.0)];
                let theta = 0.31;
                let exact = c.phi_dir_deriv(theta, 0.0, &u, &p).unwrap();
                let h = 1e-5;
                let mut up = u.clone();
                state::axpy(state::real(h), &p, &mut up);
                let mut um = u.clone();
                state::axpy(state::real(-h), &p, &mut um);
                let fp = c.phi_eval(theta, 0.0, &up).unwrap();
                let fm = c.phi_eval(theta, 0.0, &um).unwrap();
                let fd: State = (0..1).map(|c| (fp[c] - fm[c]) / (2.0 * h)).collect();
                assert!(
                    state::dist(&exact, &fd) < 1e-6,
                    "flavor {flavor:?} order {order}"
                );
            }
        }
    }

    #[test]
    fn dir_deriv_linear_in_direction() {
        let c = cov(2, AveragingFlavor::Standard, 0.4, 16, Arc::new(ScalarCosField));
        let u = vec![state::real(0.5)];
        let p = vec![state::real(0.8)];
        let q = vec![state::real(-0.3)];
        let combo: State = vec![1.3 * p[0] - 0.7 * q[0]];
        let d_combo = c.phi_dir_deriv(0.27, 0.0, &u, &combo).unwrap();
        let dp = c.phi_dir_deriv(0.27, 0.0, &u, &p).unwrap();
        let dq = c.phi_dir_deriv(0.27, 0.0, &u, &q).unwrap();
        let expect = 1.3 * dp[0] - 0.7 * dq[0];
        assert!((d_combo[0] - expect).norm() < 1e-11);
    }
}
