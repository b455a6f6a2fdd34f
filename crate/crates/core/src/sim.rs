//! Fixed-step simulation of the closed-loop chain: human drivers with reaction
//! delay, the automated vehicle with actuator lag, and a prescribed head
//! vehicle (analytic brake-and-resume manoeuvre or measured speed data).
//!
//! Integration is classical RK4 on the uniform grid `t_k = k dt`. Delayed
//! driver inputs come from a [`HistoryBuffer`] that stores the desired
//! accelerations at grid times and interpolates them with a cubic Lagrange
//! stencil at every stage time, so the delayed channel keeps the scheme's
//! fourth order on smooth segments.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::control::{ccc_nominal, ccc_nominal_accel, cbf_h, cbf_h_extended, safety_filter, ControlSnapshot};
use crate::error::{Error, Result};
use crate::models::{equilibrium_gap, ovm_desired_accel, Chain, CavState, CbfParams, HvState};
use crate::scalar::{clamp, lit, Scalar};

/// Brake at `a_brake` from `v_eq` down by `v_pert`, then return to `v_eq` at
/// `a_resume`. Right-continuous at the phase changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrakeResume<T> {
    pub v_eq: T,
    pub v_pert: T,
    /// Braking magnitude (m/s²).
    pub a_brake: T,
    pub a_resume: T,
    pub t_start: T,
}

impl<T: Scalar> BrakeResume<T> {
    pub fn brake_end(&self) -> T {
        self.t_start + self.v_pert / self.a_brake
    }

    pub fn resume_end(&self) -> T {
        self.brake_end() + self.v_pert / self.a_resume
    }

    pub fn eval(&self, t: T) -> (T, T) {
        let (t1, t2) = (self.brake_end(), self.resume_end());
        if t < self.t_start || t >= t2 {
            (self.v_eq, T::zero())
        } else if t < t1 {
            (self.v_eq - self.a_brake * (t - self.t_start), -self.a_brake)
        } else {
            (self.v_eq - self.v_pert + self.a_resume * (t - t1), self.a_resume)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.a_brake > T::zero() && self.a_resume > T::zero()) {
            return Err(Error::Config("brake and resume accelerations must be positive".into()));
        }
        if !(self.v_pert >= T::zero() && self.v_pert <= self.v_eq) {
            return Err(Error::Config(format!(
                "speed drop v_pert = {} must lie in [0, v_eq = {}]",
                self.v_pert, self.v_eq
            )));
        }
        if !(self.t_start >= T::zero()) {
            return Err(Error::Config("manoeuvre start time must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Speed series sampled on the grid `k dt`, evaluated by linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries<T> {
    pub dt: T,
    pub samples: Vec<T>,
}

impl<T: Scalar> SpeedSeries<T> {
    /// Time covered by the samples.
    pub fn span(&self) -> T {
        self.dt * lit::<T>(self.samples.len().saturating_sub(1) as f64)
    }

    /// Interpolated speed and the slope of the interval containing `t`
    /// (intervals are closed on the left). Held constant outside the span.
    pub fn eval(&self, t: T) -> (T, T) {
        let m = self.samples.len();
        if m == 1 {
            return (self.samples[0], T::zero());
        }
        let q = (t / self.dt).max(T::zero());
        let j = q.floor().to_usize().unwrap_or(usize::MAX).min(m - 2);
        let frac = (q - lit::<T>(j as f64)).min(T::one());
        let (a, b) = (self.samples[j], self.samples[j + 1]);
        let slope = if q > lit::<T>((m - 1) as f64) { T::zero() } else { (b - a) / self.dt };
        (a + (b - a) * frac, slope)
    }
}

/// Measured speeds of the head vehicle and, optionally, of some human-driven
/// vehicles (keyed by chain index, 1 being directly ahead of the automated vehicle).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfiles<T> {
    pub head: SpeedSeries<T>,
    pub hvs: BTreeMap<usize, SpeedSeries<T>>,
}

impl<T: Scalar> SpeedProfiles<T> {
    pub fn span(&self) -> T {
        self.hvs.values().fold(self.head.span(), |acc, s| acc.min(s.span()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadProfile<T> {
    BrakeResume(BrakeResume<T>),
    DataDriven(SpeedProfiles<T>),
}

/// Head-vehicle speed and acceleration at `t`.
pub fn head_profile_eval<T: Scalar>(profile: &HeadProfile<T>, t: T) -> (T, T) {
    match profile {
        HeadProfile::BrakeResume(b) => b.eval(t),
        HeadProfile::DataDriven(d) => d.head.eval(t),
    }
}

/// Reads `t,v_head[,v_hv1,...]` and resamples every column onto the grid `k dt`
/// starting at `t = 0`. Rows are reported 1-based with the header as row 1.
pub fn load_speed_csv<T: Scalar>(path: &Path, dt: T) -> Result<SpeedProfiles<T>> {
    let shown = path.display().to_string();
    let parse_err = |row: usize, detail: String| Error::Parse { path: shown.clone(), row, detail };
    if !(dt > T::zero()) {
        return Err(Error::Config("resampling step must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io { path: shown.clone(), detail: e.to_string() })?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.get(0) != Some("t") || headers.get(1) != Some("v_head") {
        return Err(parse_err(1, "header must start with t,v_head".into()));
    }
    let mut hv_index = Vec::new();
    for name in headers.iter().skip(2) {
        let idx = name
            .strip_prefix("v_hv")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i >= 1)
            .ok_or_else(|| parse_err(1, format!("unexpected column {name:?}; expected v_hv<i> with i ≥ 1")))?;
        if hv_index.contains(&idx) {
            return Err(parse_err(1, format!("duplicate column {name:?}")));
        }
        hv_index.push(idx);
    }

    let width = headers.len();
    let mut times: Vec<f64> = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); width - 1];
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(row, format!("expected {width} fields, found {}", record.len())));
        }
        let mut values = Vec::with_capacity(width);
        for (field, name) in record.iter().zip(headers.iter()) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(row, format!("column {name}: {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("column {name}: non-finite value")));
            }
            values.push(v);
        }
        if let Some(&prev) = times.last() {
            if values[0] <= prev {
                return Err(parse_err(row, format!("time {} does not increase (previous {prev})", values[0])));
            }
        }
        if let Some((k, v)) = values.iter().enumerate().skip(1).find(|(_, v)| **v < 0.0) {
            return Err(parse_err(row, format!("negative speed {v} in column {}", &headers[k])));
        }
        times.push(values[0]);
        for (col, v) in columns.iter_mut().zip(&values[1..]) {
            col.push(*v);
        }
    }
    if times.len() < 2 {
        return Err(parse_err(times.len() + 1, "need at least two data rows".into()));
    }
    if times[0] > 0.0 {
        return Err(parse_err(2, format!("profile must start at t = 0 (starts at {})", times[0])));
    }

    let step = dt.as_f64();
    let last = *times.last().expect("two rows");
    let count = (last / step + 1e-9).floor() as usize + 1;
    let resample = |col: &[f64]| -> SpeedSeries<T> {
        let mut j = 0;
        let samples = (0..count)
            .map(|k| {
                let tk = k as f64 * step;
                while j + 2 < times.len() && times[j + 1] <= tk {
                    j += 1;
                }
                let w = ((tk - times[j]) / (times[j + 1] - times[j])).clamp(0.0, 1.0);
                lit(col[j] + (col[j + 1] - col[j]) * w)
            })
            .collect();
        SpeedSeries { dt, samples }
    };
    Ok(SpeedProfiles {
        head: resample(&columns[0]),
        hvs: hv_index.iter().zip(&columns[1..]).map(|(&i, c)| (i, resample(c))).collect(),
    })
}

/// State of every simulated vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState<T> {
    pub d0: T,
    pub v0: T,
    /// Realised acceleration (unused by the lag-free model).
    pub a0: T,
    /// `hvs[i - 1]` holds vehicle `i`.
    pub hvs: Vec<HvState<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition<T> {
    /// Uniform flow at `v_star`, every gap on its range policy.
    Equilibrium { v_star: T },
    Explicit(ChainState<T>),
}

/// Everything but the vehicles: head motion, initial state and time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub head: HeadProfile<T>,
    pub initial: InitialCondition<T>,
    pub t_final: T,
    pub dt: T,
    /// Optional saturation of the applied command to `[-a_min, a_max]`.
    pub input_clamp: Option<(T, T)>,
}

/// Which law drives the automated vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Controller {
    Nominal,
    NominalAccel,
    /// Nominal law (with acceleration feedback if configured) through the safety filter.
    Filtered,
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Controller::Nominal => "nominal",
            Controller::NominalAccel => "nominal-accel",
            Controller::Filtered => "filtered",
        }
    }
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Controller {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Controller::Nominal),
            "nominal-accel" => Ok(Controller::NominalAccel),
            "filtered" => Ok(Controller::Filtered),
            other => Err(Error::Config(format!(
                "unknown controller {other:?}; expected nominal, nominal-accel or filtered"
            ))),
        }
    }
}

/// Ring buffer of per-driver desired accelerations on the grid `k dt`, with a
/// constant prefill for negative times.
#[derive(Debug, Clone)]
pub struct HistoryBuffer<T> {
    dt: T,
    width: usize,
    cap: usize,
    data: Vec<T>,
    /// Grid index of the newest sample.
    newest: Option<usize>,
    prefill: Vec<T>,
}

impl<T: Scalar> HistoryBuffer<T> {
    /// Buffer that can look back at least `span` seconds.
    pub fn new(dt: T, span: T, prefill: Vec<T>) -> Self {
        let cap = (span / dt).ceil().to_usize().unwrap_or(0) + 8;
        let width = prefill.len();
        Self { dt, width, cap, data: vec![T::zero(); cap * width], newest: None, prefill }
    }

    /// Appends the samples for the next grid time.
    pub fn push(&mut self, values: &[T]) {
        debug_assert_eq!(values.len(), self.width);
        let k = self.newest.map_or(0, |m| m + 1);
        let slot = (k % self.cap) * self.width;
        self.data[slot..slot + self.width].copy_from_slice(values);
        self.newest = Some(k);
    }

    fn at(&self, k: usize, i: usize) -> T {
        self.data[(k % self.cap) * self.width + i]
    }

    /// Value of channel `i` at time `t`: the prefill for `t < 0`, otherwise a
    /// cubic Lagrange interpolant over four neighbouring samples that never
    /// reaches back across `t = 0`.
    pub fn sample(&self, i: usize, t: T) -> Result<T> {
        if t < T::zero() {
            return Ok(self.prefill[i]);
        }
        let m = self.newest.ok_or_else(|| Error::Integration { t: t.as_f64(), detail: "empty history".into() })?;
        let q = t / self.dt;
        let points = (m + 1).min(4);
        let j = q.floor().to_usize().unwrap_or(usize::MAX);
        let j0 = j.saturating_sub(1).min(m + 1 - points);
        if j0 + self.cap <= m || q > lit::<T>(m as f64) + lit(1e-9) {
            return Err(Error::Integration {
                t: t.as_f64(),
                detail: format!("delayed time outside stored history (newest index {m})"),
            });
        }
        let mut acc = T::zero();
        for a in 0..points {
            let xa = lit::<T>((j0 + a) as f64);
            let mut w = T::one();
            for b in (0..points).filter(|&b| b != a) {
                let xb = lit::<T>((j0 + b) as f64);
                w = w * (q - xb) / (xa - xb);
            }
            acc = acc + w * self.at(j0 + a, i);
        }
        Ok(acc)
    }
}

/// One RK4 step of `x' = f(t, x)`.
pub fn rk4_step<T: Scalar, F>(mut f: F, t: T, x: &mut [T], dt: T) -> Result<()>
where
    F: FnMut(T, &[T], &mut [T]) -> Result<()>,
{
    let n = x.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut tmp = vec![T::zero(); n];
    let half = dt * T::half();
    f(t, x, &mut k1)?;
    for i in 0..n {
        tmp[i] = x[i] + half * k1[i];
    }
    f(t + half, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + half * k2[i];
    }
    f(t + half, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    f(t + dt, &tmp, &mut k4)?;
    let sixth = dt / lit(6.0);
    for i in 0..n {
        x[i] = x[i] + sixth * (k1[i] + T::two() * (k2[i] + k3[i]) + k4[i]);
    }
    Ok(())
}

/// Equilibrium state at `v_star` and a history prefilled with zero desired acceleration.
pub fn equilibrium_init<T: Scalar>(v_star: T, chain: &Chain<T>, dt: T) -> Result<(ChainState<T>, HistoryBuffer<T>)> {
    let cav = &chain.cav;
    let hvs = chain
        .hvs
        .iter()
        .map(|h| Ok(HvState { d: equilibrium_gap(v_star, h.kappa, h.d_st, h.v_max)?, v: v_star }))
        .collect::<Result<Vec<_>>>()?;
    let state = ChainState { d0: equilibrium_gap(v_star, cav.kappa, cav.d_st, cav.v_max)?, v0: v_star, a0: T::zero(), hvs };
    let span = chain.hvs.iter().fold(T::zero(), |m, h| m.max(h.tau));
    Ok((state, HistoryBuffer::new(dt, span, vec![T::zero(); chain.n()])))
}

/// Uniformly sampled record of a run. Column vectors share the index of `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub dt: T,
    pub t: Vec<T>,
    pub d0: Vec<T>,
    pub v0: Vec<T>,
    pub a0: Vec<T>,
    pub u_nom: Vec<T>,
    /// Safe input of the filter; NaN when the run is unfiltered.
    pub u_safe: Vec<T>,
    pub u_app: Vec<T>,
    pub h: Vec<T>,
    pub h_e: Vec<T>,
    /// `hv_d[i - 1]` and `hv_v[i - 1]` hold vehicle `i`.
    pub hv_d: Vec<Vec<T>>,
    pub hv_v: Vec<Vec<T>>,
    pub v_head: Vec<T>,
    pub filter_active: Vec<bool>,
    /// Number of times a speed was floored at zero.
    pub floor_events: usize,
}

impl<T: Scalar> Trajectory<T> {
    fn with_capacity(n: usize, rows: usize, dt: T) -> Self {
        let col = || Vec::with_capacity(rows);
        Self {
            dt,
            t: col(),
            d0: col(),
            v0: col(),
            a0: col(),
            u_nom: col(),
            u_safe: col(),
            u_app: col(),
            h: col(),
            h_e: col(),
            hv_d: vec![col(); n],
            hv_v: vec![col(); n],
            v_head: col(),
            filter_active: Vec::with_capacity(rows),
            floor_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn min_h(&self) -> T {
        self.h.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn min_gap(&self) -> T {
        self.d0.iter().copied().fold(T::infinity(), T::min)
    }

    /// Total time with the filter strictly modifying the command (rows × dt).
    pub fn filter_active_duration(&self) -> T {
        self.dt * lit::<T>(self.filter_active.iter().filter(|a| **a).count() as f64)
    }

    /// Times at which the filter was active.
    pub fn filter_active_times(&self) -> impl Iterator<Item = T> + '_ {
        self.t.iter().zip(&self.filter_active).filter(|(_, a)| **a).map(|(t, _)| *t)
    }

    /// State columns (gaps and speeds of every vehicle plus `a0`) as rows.
    pub fn state_rows(&self) -> Vec<Vec<T>> {
        (0..self.len())
            .map(|k| {
                let mut row = vec![self.d0[k], self.v0[k], self.a0[k]];
                for (d, v) in self.hv_d.iter().zip(&self.hv_v) {
                    row.push(d[k]);
                    row.push(v[k]);
                }
                row
            })
            .collect()
    }

    /// Writes `t,D0,v0,a0,u_nom,u_safe,u_app,h,h_e,D1,v1,...,Dn,vn,v_head`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["t", "D0", "v0", "a0", "u_nom", "u_safe", "u_app", "h", "h_e"].iter().map(|s| s.to_string()).collect();
        for i in 1..=self.hv_d.len() {
            header.push(format!("D{i}"));
            header.push(format!("v{i}"));
        }
        header.push("v_head".into());
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for k in 0..self.len() {
            row.clear();
            for col in [&self.t, &self.d0, &self.v0, &self.a0, &self.u_nom, &self.u_safe, &self.u_app, &self.h, &self.h_e] {
                row.push(col[k].to_string());
            }
            for (d, v) in self.hv_d.iter().zip(&self.hv_v) {
                row.push(d[k].to_string());
                row.push(v[k].to_string());
            }
            row.push(self.v_head[k].to_string());
            w.write_record(&row)?;
        }
        w.flush()
    }
}

/// Control quantities evaluated with a state.
#[derive(Debug, Clone, Copy)]
struct StageRecord<T> {
    u_nom: T,
    u_safe: T,
    u_app: T,
    active: bool,
    h: T,
    h_e: T,
    v_head: T,
}

// Layout of the flat state vector: [D0, v0, a0, D1, v1, ..., Dn, vn].
const D0: usize = 0;
const V0: usize = 1;
const A0: usize = 2;
fn hv_d(i: usize) -> usize {
    1 + 2 * i
}
fn hv_v(i: usize) -> usize {
    2 + 2 * i
}

/// Stepwise integrator for one scenario. [`simulate`] drives it to the end.
pub struct Simulator<'a, T: Scalar> {
    chain: &'a Chain<T>,
    cbf: &'a CbfParams<T>,
    scenario: &'a Scenario<T>,
    controller: Controller,
    lag_free: bool,
    /// Indexed by chain position; entry 0 unused.
    prescribed: Vec<Option<&'a SpeedSeries<T>>>,
    history: HistoryBuffer<T>,
    x: Vec<T>,
    k: usize,
    steps: usize,
    floor_events: usize,
    // scratch for stage evaluations
    speeds: Vec<T>,
    accels: Vec<T>,
    snap: ControlSnapshot<T>,
}

impl<'a, T: Scalar> Simulator<'a, T> {
    pub fn new(scenario: &'a Scenario<T>, chain: &'a Chain<T>, cbf: &'a CbfParams<T>, controller: Controller) -> Result<Self> {
        chain.validate()?;
        cbf.validate()?;
        let n = chain.n();
        let cav = &chain.cav;
        let lag_free = cav.is_lag_free();
        let dt = scenario.dt;
        if !(dt > T::zero() && dt.is_finite()) || !(scenario.t_final > T::zero() && scenario.t_final.is_finite()) {
            return Err(Error::Config("dt and t_final must be positive and finite".into()));
        }
        let mut limit = chain.hvs.iter().fold(T::infinity(), |m, h| m.min(h.tau));
        if !lag_free {
            limit = limit.min(cav.xi);
        }
        if limit.is_finite() && dt > limit / lit(10.0) * (T::one() + lit(1e-9)) {
            return Err(Error::Config(format!(
                "dt = {dt} s is too coarse: need dt ≤ min(τ, ξ)/10 = {} s",
                limit / lit(10.0)
            )));
        }
        match controller {
            Controller::Filtered if lag_free => {
                return Err(Error::Config(format!(
                    "the safety filter needs a positive actuator lag (xi = {}); run unfiltered or use a small lag such as 1e-3 s",
                    cav.xi
                )))
            }
            Controller::Nominal if cav.has_accel_feedback() => {
                return Err(Error::Config(
                    "acceleration gains are set; use the nominal-accel or filtered controller".into(),
                ))
            }
            _ => {}
        }
        if let Some((lo, hi)) = scenario.input_clamp {
            if !(lo > T::zero() && hi > T::zero()) {
                return Err(Error::Config("input clamp limits must be positive magnitudes".into()));
            }
        }

        let mut prescribed = vec![None; n + 1];
        match &scenario.head {
            HeadProfile::BrakeResume(b) => b.validate()?,
            HeadProfile::DataDriven(d) => {
                if (d.head.dt - dt).abs() > dt * lit(1e-9) || d.hvs.values().any(|s| (s.dt - dt).abs() > dt * lit(1e-9)) {
                    return Err(Error::Config("speed profiles must be resampled at the simulation step".into()));
                }
                if d.span() < scenario.t_final - dt * lit(1e-6) {
                    return Err(Error::Config(format!(
                        "speed profile covers {} s, shorter than t_final = {} s",
                        d.span(),
                        scenario.t_final
                    )));
                }
                for (&i, s) in &d.hvs {
                    if i > n {
                        return Err(Error::Config(format!("speed profile for vehicle {i} but the chain has {n} drivers")));
                    }
                    prescribed[i] = Some(s);
                }
            }
        }

        let (state, _) = match &scenario.initial {
            InitialCondition::Equilibrium { v_star } => equilibrium_init(*v_star, chain, dt)?,
            InitialCondition::Explicit(s) => {
                if s.hvs.len() != n {
                    return Err(Error::Config(format!("initial state lists {} drivers, chain has {n}", s.hvs.len())));
                }
                (s.clone(), HistoryBuffer::new(dt, T::zero(), Vec::new()))
            }
        };
        let mut x = vec![T::zero(); 3 + 2 * n];
        x[D0] = state.d0;
        x[V0] = state.v0;
        x[A0] = if lag_free { T::zero() } else { state.a0 };
        for (i, h) in state.hvs.iter().enumerate() {
            x[hv_d(i + 1)] = h.d;
            x[hv_v(i + 1)] = h.v;
        }
        let (v_head0, _) = head_profile_eval(&scenario.head, T::zero());
        for (i, s) in prescribed.iter().enumerate() {
            if let Some(s) = s {
                x[hv_v(i)] = s.eval(T::zero()).0;
            }
        }
        if let InitialCondition::Equilibrium { v_star } = scenario.initial {
            if (v_head0 - v_star).abs() > lit(1e-9) {
                log::warn!("head vehicle starts at {v_head0} m/s, not at the equilibrium speed {v_star} m/s");
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial state must be finite".into()));
        }

        let steps = (scenario.t_final / dt + lit(1e-9)).floor().to_usize().unwrap_or(0);
        let mut sim = Self {
            chain,
            cbf,
            scenario,
            controller,
            lag_free,
            prescribed,
            history: HistoryBuffer::new(dt, T::zero(), Vec::new()),
            x,
            k: 0,
            steps,
            floor_events: 0,
            speeds: vec![T::zero(); n + 2],
            accels: vec![T::zero(); n + 2],
            snap: ControlSnapshot::default(),
        };
        // Prefill with the drivers' desired accelerations at the initial state:
        // zero at a consistent equilibrium, and continuous at t = 0 otherwise.
        let u0 = sim.driver_inputs(T::zero(), &sim.x.clone());
        let span = chain.hvs.iter().fold(T::zero(), |m, h| m.max(h.tau));
        sim.history = HistoryBuffer::new(dt, span, u0.clone());
        sim.history.push(&u0);
        Ok(sim)
    }

    pub fn time(&self) -> T {
        lit::<T>(self.k as f64) * self.scenario.dt
    }

    /// Current state of every simulated vehicle.
    pub fn state(&self) -> ChainState<T> {
        ChainState {
            d0: self.x[D0],
            v0: self.x[V0],
            a0: self.x[A0],
            hvs: (1..=self.chain.n()).map(|i| HvState { d: self.x[hv_d(i)], v: self.x[hv_v(i)] }).collect(),
        }
    }

    pub fn history(&self) -> &HistoryBuffer<T> {
        &self.history
    }

    /// Speed of vehicle `i + 1` (the leader of driver `i`) at `t`.
    fn leader_speed(&self, i: usize, t: T, x: &[T]) -> T {
        let n = self.chain.n();
        if i == n {
            head_profile_eval(&self.scenario.head, t).0
        } else if let Some(s) = self.prescribed[i + 1] {
            s.eval(t).0
        } else {
            x[hv_v(i + 1)]
        }
    }

    /// Desired accelerations of every driver at `t`.
    fn driver_inputs(&self, t: T, x: &[T]) -> Vec<T> {
        (1..=self.chain.n())
            .map(|i| {
                let h = &self.chain.hvs[i - 1];
                ovm_desired_accel(x[hv_d(i)], x[hv_v(i)], self.leader_speed(i, t, x), h)
            })
            .collect()
    }

    fn rhs(&mut self, t: T, x: &[T], dx: &mut [T]) -> Result<StageRecord<T>> {
        let n = self.chain.n();
        let cav = &self.chain.cav;
        self.speeds[0] = x[V0];
        for i in 1..=n {
            if let Some(s) = self.prescribed[i] {
                (self.speeds[i], self.accels[i]) = s.eval(t);
            } else {
                self.speeds[i] = x[hv_v(i)];
                self.accels[i] = self.history.sample(i - 1, t - self.chain.hvs[i - 1].tau)?;
            }
        }
        (self.speeds[n + 1], self.accels[n + 1]) = head_profile_eval(&self.scenario.head, t);

        for i in 1..=n {
            dx[hv_d(i)] = self.speeds[i + 1] - self.speeds[i];
            dx[hv_v(i)] = self.accels[i];
        }

        self.snap.d0 = x[D0];
        self.snap.v0 = x[V0];
        for k in std::iter::once(1).chain(cav.phi()) {
            self.snap.speeds.insert(k, self.speeds[k]);
            self.snap.accels.insert(k, self.accels[k]);
        }
        let u_nom = match self.controller {
            Controller::Nominal => ccc_nominal(&self.snap, cav)?,
            Controller::NominalAccel | Controller::Filtered => ccc_nominal_accel(&self.snap, cav)?,
        };
        let mut state = CavState { d0: x[D0], v0: x[V0], a0: x[A0], v1: self.speeds[1], a1: self.accels[1] };
        let (u_safe, mut u_app, active) = if self.controller == Controller::Filtered {
            let out = safety_filter(u_nom, &state, self.cbf, cav.xi)?;
            (out.u_safe, out.u_applied, out.filter_active)
        } else {
            (T::nan(), u_nom, false)
        };
        if let Some((a_min, a_max)) = self.scenario.input_clamp {
            u_app = clamp(u_app, -a_min, a_max);
        }

        dx[D0] = self.speeds[1] - x[V0];
        if self.lag_free {
            dx[V0] = u_app;
            dx[A0] = T::zero();
            state.a0 = u_app;
        } else {
            dx[V0] = x[A0];
            dx[A0] = (u_app - x[A0]) / cav.xi;
        }
        Ok(StageRecord {
            u_nom,
            u_safe,
            u_app,
            active,
            h: cbf_h(&state, self.cbf),
            h_e: cbf_h_extended(&state, self.cbf),
            v_head: self.speeds[n + 1],
        })
    }

    fn record(&self, traj: &mut Trajectory<T>, t: T, x: &[T], rec: &StageRecord<T>) {
        traj.t.push(t);
        traj.d0.push(x[D0]);
        traj.v0.push(x[V0]);
        traj.a0.push(if self.lag_free { rec.u_app } else { x[A0] });
        traj.u_nom.push(rec.u_nom);
        traj.u_safe.push(rec.u_safe);
        traj.u_app.push(rec.u_app);
        traj.h.push(rec.h);
        traj.h_e.push(rec.h_e);
        for i in 1..=self.chain.n() {
            traj.hv_d[i - 1].push(x[hv_d(i)]);
            traj.hv_v[i - 1].push(x[hv_v(i)]);
        }
        traj.v_head.push(rec.v_head);
        traj.filter_active.push(rec.active);
    }

    /// Advances one step and returns the control record of the state it started from.
    fn advance(&mut self) -> Result<StageRecord<T>> {
        let t = self.time();
        let dt = self.scenario.dt;
        let mut x = self.x.clone();
        let mut first = None;
        rk4_step(
            |ts, xs, dx| {
                let rec = self.rhs(ts, xs, dx)?;
                first.get_or_insert(rec);
                Ok(())
            },
            t,
            &mut x,
            dt,
        )?;
        self.k += 1;
        let t_next = self.time();
        for i in 1..=self.chain.n() {
            if let Some(s) = self.prescribed[i] {
                x[hv_v(i)] = s.eval(t_next).0;
            }
        }
        for i in std::iter::once(V0).chain((1..=self.chain.n()).map(hv_v)) {
            if x[i] < T::zero() {
                x[i] = T::zero();
                self.floor_events += 1;
                log::debug!("speed floored at zero at t = {t_next} s (state slot {i})");
            }
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Integration { t: t_next.as_f64(), detail: format!("non-finite state component {bad}") });
        }
        self.x = x;
        let u = self.driver_inputs(t_next, &self.x);
        self.history.push(&u);
        Ok(first.expect("rk4 evaluates the first stage"))
    }

    /// Advances one step.
    pub fn step(&mut self) -> Result<()> {
        self.advance().map(|_| ())
    }

    /// Runs to `t_final`, recording one row per grid time.
    pub fn run(mut self) -> Result<Trajectory<T>> {
        let mut traj = Trajectory::with_capacity(self.chain.n(), self.steps + 1, self.scenario.dt);
        while self.k < self.steps {
            let (t, x) = (self.time(), self.x.clone());
            let rec = self.advance()?;
            self.record(&mut traj, t, &x, &rec);
        }
        let (t, x) = (self.time(), self.x.clone());
        let mut scratch = vec![T::zero(); x.len()];
        let rec = self.rhs(t, &x, &mut scratch)?;
        self.record(&mut traj, t, &x, &rec);
        traj.floor_events = self.floor_events;
        Ok(traj)
    }
}

/// Runs the scenario with the chosen controller.
pub fn simulate<T: Scalar>(
    scenario: &Scenario<T>,
    chain: &Chain<T>,
    cbf: &CbfParams<T>,
    controller: Controller,
) -> Result<Trajectory<T>> {
    Simulator::new(scenario, chain, cbf, controller)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_abs_diff_eq;

    fn reference_manoeuvre() -> BrakeResume<f64> {
        BrakeResume { v_eq: 20.0, v_pert: 15.0, a_brake: 7.0, a_resume: 3.0, t_start: 5.0 }
    }

    #[test]
    fn brake_resume_phases() {
        let b = reference_manoeuvre();
        assert_eq!(b.eval(1.0), (20.0, 0.0));
        let mid = 5.0 + 15.0 / 14.0;
        let (v, a) = b.eval(mid);
        assert_abs_diff_eq!(v, 12.5, epsilon = 1e-12);
        assert_eq!(a, -7.0);
        assert_abs_diff_eq!(b.brake_end() - 5.0, 15.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.resume_end() - b.brake_end(), 5.0, epsilon = 1e-12);
        // right-continuous at the switches
        assert_eq!(b.eval(5.0).1, -7.0);
        assert_eq!(b.eval(b.brake_end()).1, 3.0);
        assert_eq!(b.eval(b.resume_end()), (20.0, 0.0));
    }

    #[test]
    fn speed_series_interpolates() {
        let s = SpeedSeries { dt: 1.0, samples: vec![0.0, 3.0, 6.0] };
        assert_eq!(s.eval(0.5), (1.5, 3.0));
        assert_eq!(s.eval(2.0), (6.0, 3.0));
        assert_eq!(s.eval(5.0), (6.0, 0.0));
        assert_eq!(s.span(), 2.0);
    }

    #[test]
    fn history_reproduces_cubics_and_prefill() {
        let dt = 0.1;
        let f = |t: f64| 1.0 + 2.0 * t - 0.5 * t * t + 0.25 * t * t * t;
        let mut h = HistoryBuffer::new(dt, 3.0, vec![f(0.0)]);
        let mut short = HistoryBuffer::new(dt, 1.0, vec![f(0.0)]);
        for k in 0..30 {
            h.push(&[f(k as f64 * dt)]);
            short.push(&[f(k as f64 * dt)]);
        }
        for q in [0.0, 0.05, 0.13, 1.234, 2.85, 2.9] {
            assert_abs_diff_eq!(h.sample(0, q).unwrap(), f(q), epsilon = 1e-12);
        }
        assert_eq!(h.sample(0, -0.3).unwrap(), f(0.0));
        assert!(h.sample(0, 3.5).is_err());
        // evicted from the shorter ring
        assert!(short.sample(0, 0.2).is_err());
        assert_abs_diff_eq!(short.sample(0, 2.5).unwrap(), f(2.5), epsilon = 1e-12);
    }

    #[test]
    fn equilibrium_init_examples() {
        let chain = presets::reference_chain::<f64>(2, presets::reference_safe_gains(2, 0.2));
        let (s, hist) = equilibrium_init(15.0, &chain, 0.01).unwrap();
        assert_abs_diff_eq!(s.d0, 30.0, epsilon = 1e-12);
        assert!(s.hvs.iter().all(|h| (h.d - 30.0).abs() < 1e-12 && h.v == 15.0));
        assert_eq!(hist.sample(1, -0.5).unwrap(), 0.0);
        let (s, _) = equilibrium_init(0.0, &chain, 0.01).unwrap();
        assert_eq!(s.d0, 5.0);
        assert!(equilibrium_init(30.0, &chain, 0.01).is_err());
    }

    #[test]
    fn rk4_lag_matches_exponential() {
        let (xi, u0, dt) = (0.2, 1.5, 1e-3);
        let mut x = [0.0_f64];
        for k in 0..1000 {
            rk4_step(
                |_, s, d| {
                    d[0] = (u0 - s[0]) / xi;
                    Ok(())
                },
                k as f64 * dt,
                &mut x,
                dt,
            )
            .unwrap();
        }
        let exact = u0 - u0 * (-1.0 / xi).exp();
        assert_abs_diff_eq!(x[0], exact, epsilon = 1e-8);
    }

    #[test]
    fn speed_csv_examples() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, body: &str| {
            let p = dir.path().join(name);
            std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
            p
        };
        let flat = load_speed_csv::<f64>(&write("flat.csv", "t,v_head\n0,10\n10,10\n"), 0.5).unwrap();
        assert_eq!(flat.head.samples.len(), 21);
        assert!(flat.head.samples.iter().all(|v| *v == 10.0));
        let ramp = load_speed_csv::<f64>(&write("ramp.csv", "t,v_head,v_hv1\n0,0,1\n5,15,1\n"), 0.1).unwrap();
        let (v, a) = ramp.head.eval(2.05);
        assert_abs_diff_eq!(v, 6.15, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 3.0, epsilon = 1e-9);
        assert!(ramp.hvs.contains_key(&1));

        let bad = load_speed_csv::<f64>(&write("bad.csv", "t,v_head\n0,10\n1,abc\n2,10\n"), 0.1).unwrap_err();
        assert!(matches!(bad, Error::Parse { row: 3, .. }), "{bad}");
        let back = load_speed_csv::<f64>(&write("back.csv", "t,v_head\n0,10\n2,10\n1,10\n"), 0.1).unwrap_err();
        assert!(matches!(back, Error::Parse { row: 4, .. }), "{back}");
        let neg = load_speed_csv::<f64>(&write("neg.csv", "t,v_head\n0,10\n1,-1\n"), 0.1).unwrap_err();
        assert!(matches!(neg, Error::Parse { row: 3, .. }));
        let cols = load_speed_csv::<f64>(&write("cols.csv", "time,v\n0,1\n1,1\n"), 0.1).unwrap_err();
        assert!(matches!(cols, Error::Parse { row: 1, .. }));
        let short = load_speed_csv::<f64>(&write("short.csv", "t,v_head,v_hv1\n0,1,1\n1,1\n"), 0.1).unwrap_err();
        assert!(matches!(short, Error::Parse { row: 3, .. }));
        let missing = load_speed_csv::<f64>(&dir.path().join("nope.csv"), 0.1).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }

    #[test]
    fn controller_names_roundtrip() {
        for c in [Controller::Nominal, Controller::NominalAccel, Controller::Filtered] {
            assert_eq!(c.name().parse::<Controller>().unwrap(), c);
        }
        assert!("safe".parse::<Controller>().is_err());
    }

    fn scenario(xi_dt: f64, t_final: f64) -> Scenario<f64> {
        Scenario {
            head: HeadProfile::BrakeResume(reference_manoeuvre()),
            initial: InitialCondition::Equilibrium { v_star: 20.0 },
            t_final,
            dt: xi_dt,
            input_clamp: None,
        }
    }

    #[test]
    fn rows_and_columns() {
        let chain = presets::reference_chain::<f64>(1, presets::reference_safe_gains(1, 0.2));
        let traj = simulate(&scenario(0.01, 1.005), &chain, &presets::reference_cbf(), Controller::Nominal).unwrap();
        assert_eq!(traj.len(), 101);
        assert!(traj.t.windows(2).all(|w| w[1] > w[0]));
        assert!(traj.u_safe.iter().all(|u| u.is_nan()));
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,D0,v0,a0,u_nom,u_safe,u_app,h,h_e,D1,v1,v_head");
        assert_eq!(text.lines().count(), 102);
    }

    #[test]
    fn scenario_preconditions() {
        let chain = presets::reference_chain::<f64>(1, presets::reference_safe_gains(1, 0.2));
        let cbf = presets::reference_cbf();
        assert!(matches!(simulate(&scenario(0.05, 1.0), &chain, &cbf, Controller::Nominal), Err(Error::Config(_))));
        let lag_free = presets::reference_chain::<f64>(1, presets::reference_safe_gains(1, 0.0));
        assert!(simulate(&scenario(0.01, 1.0), &lag_free, &cbf, Controller::Nominal).is_ok());
        assert!(matches!(simulate(&scenario(0.01, 1.0), &lag_free, &cbf, Controller::Filtered), Err(Error::Config(_))));
        let mut bad = scenario(0.01, 1.0);
        bad.head = HeadProfile::BrakeResume(BrakeResume { v_pert: 25.0, ..reference_manoeuvre() });
        assert!(simulate(&bad, &chain, &cbf, Controller::Nominal).is_err());
        let mut accel = chain.clone();
        accel.cav.c1 = 0.1;
        assert!(simulate(&scenario(0.01, 1.0), &accel, &cbf, Controller::Nominal).is_err());
        assert!(simulate(&scenario(0.01, 1.0), &accel, &cbf, Controller::NominalAccel).is_ok());
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_one_step() {
        let chain = presets::reference_chain::<f64>(2, presets::reference_safe_gains(2, 0.2));
        let sc = scenario(0.01, 1.0);
        let cbf = presets::reference_cbf();
        let mut sim = Simulator::new(&sc, &chain, &cbf, Controller::Filtered).unwrap();
        let before = sim.state();
        sim.step().unwrap();
        let after = sim.state();
        assert_abs_diff_eq!(before.d0, after.d0, epsilon = 1e-12);
        assert_abs_diff_eq!(before.v0, after.v0, epsilon = 1e-12);
        for (a, b) in before.hvs.iter().zip(&after.hvs) {
            assert_abs_diff_eq!(a.d, b.d, epsilon = 1e-12);
            assert_abs_diff_eq!(a.v, b.v, epsilon = 1e-12);
        }
    }
}
