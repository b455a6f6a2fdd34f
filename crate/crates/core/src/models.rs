//! Vehicle dynamics, driver policies and the parameter sets that describe a chain.
//!
//! Indexing follows the chain from the tail: the automated vehicle is `0`, the
//! human-driven vehicles are `1..=n` (vehicle `1` directly ahead of it) and the
//! head vehicle is `n + 1`. All quantities are SI (m, s, m/s, m/s², 1/s).

use crate::error::{Error, Result};
use crate::scalar::{clamp, lit, Scalar};

/// Lags below this value (s) are treated as the lag-free two-state model.
pub const LAG_FREE_THRESHOLD: f64 = 1e-6;

/// Car-following parameters of one human-driven vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HvParams<T> {
    /// Headway gain (1/s).
    pub a: T,
    /// Relative-speed gain (1/s).
    pub b: T,
    /// Range-policy gradient (1/s).
    pub kappa: T,
    /// Driver reaction and powertrain delay (s).
    pub tau: T,
    /// Standstill distance (m).
    pub d_st: T,
    /// Speed limit (m/s).
    pub v_max: T,
}

impl<T: Scalar> HvParams<T> {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.a, self.b, self.kappa, self.tau, self.d_st, self.v_max];
        if fields.iter().any(|x| !x.is_finite() || *x < T::zero()) {
            return Err(Error::Config(format!(
                "HV parameters must be finite and nonnegative: {self:?}"
            )));
        }
        if self.tau <= T::zero() || self.v_max <= T::zero() || self.d_st <= T::zero() {
            return Err(Error::Config(
                "HV delay, speed limit and standstill distance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Range policy of this driver.
    pub fn range_policy(&self, gap: T) -> T {
        range_policy(gap, self.kappa, self.d_st, self.v_max)
    }
}

/// Gain pair for a vehicle farther ahead that broadcasts its motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectedLink<T> {
    /// Position in the chain, counted from the automated vehicle (`> 1`).
    pub index: usize,
    /// Speed gain (1/s).
    pub b: T,
    /// Acceleration gain (dimensionless).
    pub c: T,
}

/// Controller and actuator parameters of the automated vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct CavParams<T> {
    /// Headway gain (1/s).
    pub a: T,
    /// Speed gain on the vehicle directly ahead (1/s).
    pub b1: T,
    /// Acceleration gain on the vehicle directly ahead.
    pub c1: T,
    /// Connected vehicles farther ahead, sorted by index.
    pub links: Vec<ConnectedLink<T>>,
    /// Range-policy gradient (1/s).
    pub kappa: T,
    /// First-order actuator lag (s).
    pub xi: T,
    pub d_st: T,
    pub v_max: T,
}

impl<T: Scalar> CavParams<T> {
    /// Indices of the connected vehicles (the set usually written Φ).
    pub fn phi(&self) -> impl Iterator<Item = usize> + '_ {
        self.links.iter().map(|l| l.index)
    }

    /// Speed gain for chain index `k` (`k = 1` or a connected index); zero otherwise.
    pub fn b(&self, k: usize) -> T {
        if k == 1 {
            return self.b1;
        }
        self.link(k).map_or(T::zero(), |l| l.b)
    }

    /// Acceleration gain for chain index `k`; zero otherwise.
    pub fn c(&self, k: usize) -> T {
        if k == 1 {
            return self.c1;
        }
        self.link(k).map_or(T::zero(), |l| l.c)
    }

    pub fn link(&self, k: usize) -> Option<&ConnectedLink<T>> {
        self.links.iter().find(|l| l.index == k)
    }

    /// Sets the speed gain for index `k`, inserting a link if needed.
    pub fn set_b(&mut self, k: usize, b: T) {
        if k == 1 {
            self.b1 = b;
            return;
        }
        match self.links.iter_mut().find(|l| l.index == k) {
            Some(l) => l.b = b,
            None => {
                self.links.push(ConnectedLink { index: k, b, c: T::zero() });
                self.links.sort_by_key(|l| l.index);
            }
        }
    }

    /// Sum of the speed gains over the connected vehicles.
    pub fn connected_b_sum(&self) -> T {
        self.links.iter().fold(T::zero(), |acc, l| acc + l.b)
    }

    /// `A + B_1 + sum_k B_k`, the velocity coefficient of the linearised law.
    pub fn psi(&self) -> T {
        self.a + self.b1 + self.connected_b_sum()
    }

    pub fn has_accel_feedback(&self) -> bool {
        self.c1 != T::zero() || self.links.iter().any(|l| l.c != T::zero())
    }

    /// True when the lag is small enough for the two-state reduction.
    pub fn is_lag_free(&self) -> bool {
        self.xi < lit(LAG_FREE_THRESHOLD)
    }

    pub fn range_policy(&self, gap: T) -> T {
        range_policy(gap, self.kappa, self.d_st, self.v_max)
    }

    pub fn validate(&self) -> Result<()> {
        let mut gains = vec![self.a, self.b1];
        gains.extend(self.links.iter().map(|l| l.b));
        if gains.iter().any(|g| !g.is_finite() || *g < T::zero()) {
            return Err(Error::Config("CAV speed and headway gains must be nonnegative".into()));
        }
        if !self.c1.is_finite() || self.links.iter().any(|l| !l.c.is_finite()) {
            return Err(Error::Config("CAV acceleration gains must be finite".into()));
        }
        if !(self.xi >= T::zero()) || !self.xi.is_finite() {
            return Err(Error::Config("CAV lag must be finite and nonnegative".into()));
        }
        if !(self.kappa > T::zero()) || !(self.v_max > T::zero()) || !(self.d_st >= T::zero()) {
            return Err(Error::Config(
                "CAV range policy needs kappa > 0, v_max > 0, D_st >= 0".into(),
            ));
        }
        let mut prev = 1;
        for l in &self.links {
            if l.index <= prev {
                return Err(Error::Config(format!(
                    "connected indices must be strictly increasing and > 1 (got {})",
                    l.index
                )));
            }
            prev = l.index;
        }
        Ok(())
    }
}

/// Barrier-function parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbfParams<T> {
    /// Inverse safe time headway (1/s).
    pub kappa_sf: T,
    /// Safe standstill distance (m).
    pub d_sf: T,
    /// Slope of the class-K function of the headway barrier (1/s).
    pub gamma: T,
    /// Slope of the class-K function of the extended barrier (1/s).
    pub gamma_e: T,
}

impl<T: Scalar> CbfParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_sf > T::zero() && self.gamma > T::zero() && self.gamma_e > T::zero()) {
            return Err(Error::Config("kappa_sf, gamma and gamma_e must be positive".into()));
        }
        if !(self.d_sf >= T::zero()) {
            return Err(Error::Config("D_sf must be nonnegative".into()));
        }
        Ok(())
    }
}

/// State of the automated vehicle together with the lead-vehicle quantities
/// the barrier functions depend on.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CavState<T> {
    /// Gap to vehicle 1 (m).
    pub d0: T,
    pub v0: T,
    /// Realised acceleration.
    pub a0: T,
    /// Speed of vehicle 1.
    pub v1: T,
    /// Acceleration of vehicle 1.
    pub a1: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HvState<T> {
    /// Gap to the vehicle ahead (m).
    pub d: T,
    pub v: T,
}

/// The human-driven vehicles and the automated vehicle that follows them.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain<T> {
    /// `hvs[i - 1]` holds vehicle `i`.
    pub hvs: Vec<HvParams<T>>,
    pub cav: CavParams<T>,
}

impl<T: Scalar> Chain<T> {
    /// Number of human-driven vehicles between the automated and the head vehicle.
    pub fn n(&self) -> usize {
        self.hvs.len()
    }

    /// The shared HV parameters when every HV is identical (or `n = 0`, in which
    /// case `None` is returned and callers treat the HV product as 1).
    pub fn identical_hv(&self) -> Option<&HvParams<T>> {
        let first = self.hvs.first()?;
        self.hvs.iter().all(|h| h == first).then_some(first)
    }

    /// Speed gain on the head vehicle (index `n + 1`), zero when not connected.
    /// For `n = 0` the head vehicle is vehicle 1 and this is zero as well.
    pub fn head_gain(&self) -> T {
        if self.n() == 0 {
            return T::zero();
        }
        self.cav.b(self.n() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.cav.validate()?;
        for h in &self.hvs {
            h.validate()?;
        }
        if let Some(bad) = self.cav.phi().find(|&k| k > self.n() + 1) {
            return Err(Error::Config(format!(
                "connected index {bad} lies beyond the head vehicle (n + 1 = {})",
                self.n() + 1
            )));
        }
        Ok(())
    }
}

/// Range policy: zero up to the standstill distance, linear with gradient
/// `kappa`, saturated at `v_max`. Clamped below at zero.
pub fn range_policy<T: Scalar>(gap: T, kappa: T, d_st: T, v_max: T) -> T {
    clamp(kappa * (gap - d_st), T::zero(), v_max)
}

/// Speed policy: the broadcast speed, capped at the speed limit.
pub fn speed_policy<T: Scalar>(v: T, v_max: T) -> T {
    v.min(v_max)
}

/// Optimal velocity model: desired acceleration of a human driver.
pub fn ovm_desired_accel<T: Scalar>(gap: T, v: T, v_lead: T, p: &HvParams<T>) -> T {
    p.a * (p.range_policy(gap) - v) + p.b * (v_lead - v)
}

/// Right-hand side of one human-driven vehicle. `delayed_input` is the desired
/// acceleration evaluated one reaction delay in the past.
pub fn hv_derivatives<T: Scalar>(state: HvState<T>, v_lead: T, delayed_input: T) -> (T, T) {
    (v_lead - state.v, delayed_input)
}

/// Derivatives of the automated vehicle's states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavDerivatives<T> {
    pub d_gap: T,
    pub d_speed: T,
    /// `None` in the lag-free reduction, where the acceleration is the command itself.
    pub d_accel: Option<T>,
}

/// Automated vehicle with first-order actuator lag `xi`. For `xi` below
/// [`LAG_FREE_THRESHOLD`] the realised acceleration equals the command.
pub fn cav_derivatives<T: Scalar>(state: CavState<T>, u0: T, xi: T) -> CavDerivatives<T> {
    if xi < lit(LAG_FREE_THRESHOLD) {
        CavDerivatives { d_gap: state.v1 - state.v0, d_speed: u0, d_accel: None }
    } else {
        CavDerivatives {
            d_gap: state.v1 - state.v0,
            d_speed: state.a0,
            d_accel: Some((u0 - state.a0) / xi),
        }
    }
}

/// Gap at which the range policy returns `v_star` on its linear segment.
pub fn equilibrium_gap<T: Scalar>(v_star: T, kappa: T, d_st: T, v_max: T) -> Result<T> {
    if !(v_star >= T::zero()) {
        return Err(Error::Config(format!("equilibrium speed must be nonnegative, got {v_star}")));
    }
    if v_star >= v_max {
        return Err(Error::Config(format!(
            "equilibrium speed {v_star} is not below v_max = {v_max}; the saturated range policy has no unique gap"
        )));
    }
    Ok(v_star / kappa + d_st)
}
