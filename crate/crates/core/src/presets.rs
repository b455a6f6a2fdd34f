//! Reference parameter set for case studies: one speed limit and standstill
//! distance for every vehicle, identical human drivers, and two gain choices
//! for the automated vehicle (one provably safe, one not).

use crate::models::{CavParams, Chain, CbfParams, ConnectedLink, HvParams};
use crate::safety::SafetyEnvelope;
use crate::scalar::{lit, Scalar};

pub const V_MAX: f64 = 30.0;
pub const D_ST: f64 = 5.0;
/// Braking limit (m/s², magnitude).
pub const A_MIN: f64 = 7.0;
/// Acceleration limit (m/s²).
pub const A_MAX: f64 = 3.0;
pub const HV_TAU: f64 = 0.9;
pub const HV_KAPPA: f64 = 0.6;
pub const HV_A: f64 = 0.1;
pub const HV_B: f64 = 0.6;
pub const CAV_KAPPA: f64 = 0.6;
pub const SAFE_GAINS: (f64, f64, f64) = (0.6, 0.53, 0.03);
pub const UNSAFE_GAINS: (f64, f64, f64) = (0.6, 0.53, 0.5);
pub const D_SF: f64 = 1.0;
pub const KAPPA_SF: f64 = 0.6;
pub const V_BAR: f64 = 15.0;
pub const GAMMA: f64 = 1.0;
pub const GAMMA_E: f64 = 1.0;
/// Speed drop of the head vehicle in the brake-and-resume manoeuvre (m/s).
pub const V_PERT: f64 = 15.0;

pub fn reference_hv<T: Scalar>() -> HvParams<T> {
    HvParams {
        a: lit(HV_A),
        b: lit(HV_B),
        kappa: lit(HV_KAPPA),
        tau: lit(HV_TAU),
        d_st: lit(D_ST),
        v_max: lit(V_MAX),
    }
}

/// Automated vehicle with gains `(A, B_1, B_{n+1})`, connected to the head of
/// a chain with `n` human drivers. For `n = 0` the third gain is dropped.
pub fn cav_with_gains<T: Scalar>(n: usize, gains: (f64, f64, f64), xi: f64) -> CavParams<T> {
    let links = if n >= 1 {
        vec![ConnectedLink { index: n + 1, b: lit(gains.2), c: T::zero() }]
    } else {
        Vec::new()
    };
    CavParams {
        a: lit(gains.0),
        b1: lit(gains.1),
        c1: T::zero(),
        links,
        kappa: lit(CAV_KAPPA),
        xi: lit(xi),
        d_st: lit(D_ST),
        v_max: lit(V_MAX),
    }
}

pub fn reference_safe_gains<T: Scalar>(n: usize, xi: f64) -> CavParams<T> {
    cav_with_gains(n, SAFE_GAINS, xi)
}

pub fn reference_unsafe_gains<T: Scalar>(n: usize, xi: f64) -> CavParams<T> {
    cav_with_gains(n, UNSAFE_GAINS, xi)
}

pub fn reference_chain<T: Scalar>(n: usize, cav: CavParams<T>) -> Chain<T> {
    Chain { hvs: vec![reference_hv(); n], cav }
}

pub fn reference_cbf<T: Scalar>() -> CbfParams<T> {
    CbfParams { kappa_sf: lit(KAPPA_SF), d_sf: lit(D_SF), gamma: lit(GAMMA), gamma_e: lit(GAMMA_E) }
}

pub fn reference_envelope<T: Scalar>() -> SafetyEnvelope<T> {
    SafetyEnvelope { v_bar: lit(V_BAR), a_min: lit(A_MIN), a_bar: lit(A_MAX) }
}
