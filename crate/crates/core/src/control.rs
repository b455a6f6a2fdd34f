//! Connected cruise control laws, the headway barrier functions, and the
//! min-form safety filter built on them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::{speed_policy, CavParams, CavState, CbfParams, LAG_FREE_THRESHOLD};
use crate::scalar::{lit, Scalar};

/// What the automated vehicle knows when it computes a command.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlSnapshot<T> {
    pub d0: T,
    pub v0: T,
    /// Speeds keyed by chain index (1 and every connected index).
    pub speeds: BTreeMap<usize, T>,
    /// Accelerations keyed by chain index, for acceleration feedback.
    pub accels: BTreeMap<usize, T>,
}

impl<T: Scalar> ControlSnapshot<T> {
    fn speed(&self, k: usize) -> Result<T> {
        self.speeds
            .get(&k)
            .copied()
            .ok_or_else(|| Error::Config(format!("no speed available for vehicle {k}")))
    }

    fn accel(&self, k: usize) -> Result<T> {
        self.accels
            .get(&k)
            .copied()
            .ok_or_else(|| Error::Config(format!("no acceleration available for vehicle {k}")))
    }
}

/// Result of passing a nominal command through the safety filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutcome<T> {
    pub u_applied: T,
    pub u_nominal: T,
    pub u_safe: T,
    /// Strictly modified; a tie reports `false`.
    pub filter_active: bool,
    pub h: T,
    pub h_e: T,
}

/// Nominal CCC: headway, relative speed to vehicle 1, and relative speed to
/// each connected vehicle. Acceleration gains are not used here.
pub fn ccc_nominal<T: Scalar>(snap: &ControlSnapshot<T>, p: &CavParams<T>) -> Result<T> {
    let w = |v: T| speed_policy(v, p.v_max);
    let mut u = p.a * (p.range_policy(snap.d0) - snap.v0) + p.b1 * (w(snap.speed(1)?) - snap.v0);
    for l in &p.links {
        u = u + l.b * (w(snap.speed(l.index)?) - snap.v0);
    }
    Ok(u)
}

/// Nominal CCC plus acceleration feedback on vehicle 1 and the connected vehicles.
/// Accelerations are only required for indices with a nonzero gain.
pub fn ccc_nominal_accel<T: Scalar>(snap: &ControlSnapshot<T>, p: &CavParams<T>) -> Result<T> {
    let mut u = ccc_nominal(snap, p)?;
    if p.c1 != T::zero() {
        u = u + p.c1 * snap.accel(1)?;
    }
    for l in p.links.iter().filter(|l| l.c != T::zero()) {
        u = u + l.c * snap.accel(l.index)?;
    }
    Ok(u)
}

/// Time-headway barrier `kappa_sf (D0 - D_sf) - v0`.
pub fn cbf_h<T: Scalar>(state: &CavState<T>, c: &CbfParams<T>) -> T {
    c.kappa_sf * (state.d0 - c.d_sf) - state.v0
}

/// Extended barrier `L_f h + gamma h`.
pub fn cbf_h_extended<T: Scalar>(state: &CavState<T>, c: &CbfParams<T>) -> T {
    c.kappa_sf * (state.v1 - state.v0) - state.a0 + c.gamma * cbf_h(state, c)
}

/// Gradient of `h` over `[D0, v0, a0, v1]`.
pub fn grad_h<T: Scalar>(c: &CbfParams<T>) -> [T; 4] {
    [c.kappa_sf, -T::one(), T::zero(), T::zero()]
}

/// Gradient of `h_e` over `[D0, v0, a0, v1]`.
pub fn grad_h_extended<T: Scalar>(c: &CbfParams<T>) -> [T; 4] {
    [c.gamma * c.kappa_sf, -c.kappa_sf - c.gamma, -T::one(), c.kappa_sf]
}

/// Lie derivatives `(L_f h_e, L_g h_e)` of the extended barrier along the lagged
/// vehicle model. `xi` must be positive.
pub fn extended_lie_derivatives<T: Scalar>(state: &CavState<T>, c: &CbfParams<T>, xi: T) -> (T, T) {
    let lf = c.kappa_sf * (state.a1 - state.a0)
        + state.a0 / xi
        + c.gamma * (c.kappa_sf * (state.v1 - state.v0) - state.a0);
    (lf, -T::one() / xi)
}

/// Largest command that keeps `dh_e/dt >= -gamma_e h_e`.
pub fn safe_input_ks<T: Scalar>(state: &CavState<T>, c: &CbfParams<T>, xi: T) -> T {
    let rel = c.kappa_sf * (state.v1 - state.v0) - state.a0;
    (T::one() - xi * c.kappa_sf) * state.a0
        + xi * c.kappa_sf * state.a1
        + xi * c.gamma * rel
        + xi * c.gamma_e * (rel + c.gamma * cbf_h(state, c))
}

/// Min-form safety filter. Refuses lags below the lag-free threshold, where the
/// input no longer enters the extended barrier's derivative through the lag.
pub fn safety_filter<T: Scalar>(
    u_nominal: T,
    state: &CavState<T>,
    c: &CbfParams<T>,
    xi: T,
) -> Result<FilterOutcome<T>> {
    if xi < lit(LAG_FREE_THRESHOLD) {
        return Err(Error::Config(format!(
            "safety filter needs a positive actuator lag (got xi = {xi}); run unfiltered or use a small lag such as 1e-3 s"
        )));
    }
    let u_safe = safe_input_ks(state, c, xi);
    let filter_active = u_safe < u_nominal;
    Ok(FilterOutcome {
        u_applied: if filter_active { u_safe } else { u_nominal },
        u_nominal,
        u_safe,
        filter_active,
        h: cbf_h(state, c),
        h_e: cbf_h_extended(state, c),
    })
}

/// General closed-form solution of the single-constraint QP
/// `min |u - u_d|^2  s.t.  L_f h + L_g h u >= -alpha_term` for a scalar input.
pub fn qp_closed_form<T: Scalar>(u_nominal: T, lf_h: T, lg_h: T, alpha_term: T) -> T {
    if lg_h == T::zero() {
        return u_nominal;
    }
    let eta = -lf_h - lg_h * u_nominal - alpha_term;
    u_nominal + eta.max(T::zero()) * lg_h / (lg_h * lg_h)
}
