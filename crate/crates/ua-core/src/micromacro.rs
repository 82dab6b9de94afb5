//! Micro-macro decomposition under standard averaging: the solution is
//! sought as u(t) = Phi^[n]_{t/eps}(v(t)) + w(t) with
//!
//!   dv/dt = F^[n](v),                                   v(0) = (Phi^[n]_0)^{-1}(u0),
//!   dw/dt = f_{t/eps}(Phi^[n]_{t/eps}(v) + w)
//!           - ( (1/eps) d_theta Phi^[n]_{t/eps} + d_u Phi^[n]_{t/eps} F^[n] )(v),
//!                                                       w(0) = 0.
//!
//! The macro part is smooth and the micro corrector stays O(eps^{n+1}), so
//! any non-stiff scheme applied to the stacked system keeps its order
//! uniformly in eps. The stacked vector [v; w] is what the integrators see;
//! the theta-profile of dw/dt at frozen (t, v, w) is spectrally sampled so
//! the integral schemes take exact theta-integrals.

use crate::averaging::{AveragingFlavor, ChangeOfVariable};
use crate::error::{Error, Result};
use crate::field::EpsilonParams;
use crate::schemes::TransformedRhs;
use crate::state::{self, C64, State};
use crate::torus::ThetaSamples;

/// Macro variable v and micro corrector w, both of the problem dimension.
#[derive(Clone, Debug)]
pub struct MicroMacroState {
    pub v: State,
    pub w: State,
}

impl MicroMacroState {
    pub fn pack(&self) -> State {
        let mut s = self.v.clone();
        s.extend_from_slice(&self.w);
        s
    }

    pub fn unpack(stacked: &[C64]) -> Self {
        let d = stacked.len() / 2;
        Self {
            v: stacked[..d].to_vec(),
            w: stacked[d..].to_vec(),
        }
    }
}

/// The stacked micro-macro right-hand side for a standard-averaging change
/// of variable; implements [`TransformedRhs`] on [v; w] vectors.
pub struct MicroMacroSystem {
    pub cov: ChangeOfVariable,
}

impl MicroMacroSystem {
    /// The micro-macro split pairs with standard averaging; a stroboscopic
    /// map is rejected.
    pub fn new(cov: ChangeOfVariable) -> Result<Self> {
        if cov.flavor != AveragingFlavor::Standard {
            return Err(Error::FlavorMismatch);
        }
        Ok(Self { cov })
    }

    pub fn problem_dim(&self) -> usize {
        self.cov.field.dim()
    }

    /// v(0) = (Phi^[n]_0)^{-1}(u0), w(0) = 0, stacked.
    pub fn init(&self, u0: &[C64]) -> Result<State> {
        let v = self.cov.phi_inverse_at(0.0, 0.0, u0)?;
        let mut s = v;
        s.extend(state::zeros(u0.len()));
        Ok(s)
    }

    /// u(t) = Phi^[n]_{t/eps}(v) + w.
    pub fn reconstruct(&self, t: f64, stacked: &[C64]) -> Result<State> {
        let d = self.problem_dim();
        let theta = t / self.cov.eps.epsilon;
        let mut u = self.cov.phi_eval(theta, t, &stacked[..d])?;
        for c in 0..d {
            u[c] += stacked[d + c];
        }
        Ok(u)
    }

    /// The derivative (dv/dt, dw/dt) at slow time t, evaluated at the fast
    /// phase theta = t/eps.
    pub fn rhs(&self, t: f64, s: &MicroMacroState) -> Result<MicroMacroState> {
        let stacked = s.pack();
        let out = self.eval(t, &stacked)?;
        Ok(MicroMacroState::unpack(&out))
    }
}

impl TransformedRhs for MicroMacroSystem {
    fn dim(&self) -> usize {
        2 * self.problem_dim()
    }

    fn eps(&self) -> EpsilonParams {
        self.cov.eps
    }

    fn theta_profile(&self, t_frozen: f64, u_frozen: &[C64]) -> Result<ThetaSamples> {
        let d = self.problem_dim();
        let (v, w) = u_frozen.split_at(d);
        let jet = self.cov.map_jet(t_frozen, v)?;

        // f_theta(Phi_theta(v) + w) sampled on the grid, with the problem's
        // own field (the recursion may have run on the gauge-augmented one)
        let mut shifted = jet.phi.clone();
        for j in 0..shifted.grid.len() {
            let block = shifted.node_values_mut(j);
            for c in 0..d {
                block[c] += w[c];
            }
        }
        let mut f_shifted = ThetaSamples::zeros(self.cov.grid.clone(), d);
        self.cov
            .raw_field
            .profile_states(&self.cov.grid, t_frozen, &shifted, &mut f_shifted);

        // gauge corrections: dv/dt = F - G v,
        // dw/dt = f(Phi + w) - ( (1/eps) dtheta Phi + dphi F - G Phi )
        let mut gauge_v = state::zeros(d);
        let mut gauge_phi = ThetaSamples::zeros(self.cov.grid.clone(), d);
        if self.cov.gauged {
            self.cov.raw_field.slow_gauge_apply(v, &mut gauge_v);
            let mut g = state::zeros(d);
            for j in 0..self.cov.grid.len() {
                self.cov.raw_field.slow_gauge_apply(jet.phi.node_values(j), &mut g);
                gauge_phi.node_values_mut(j).copy_from_slice(&g);
            }
        }

        let n = self.cov.grid.len();
        let mut out = ThetaSamples::zeros(self.cov.grid.clone(), 2 * d);
        for j in 0..n {
            let fs = f_shifted.node_values(j);
            let b = jet.theta_deriv_over_eps.node_values(j);
            let dp = jet.dphi_cap_f.node_values(j);
            let gp = gauge_phi.node_values(j);
            let block = out.node_values_mut(j);
            for c in 0..d {
                block[c] = jet.cap_f[c] - gauge_v[c];
                block[d + c] = fs[c] - b[c] - dp[c] + gp[c];
            }
        }
        Ok(out)
    }
}
