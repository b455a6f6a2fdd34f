//! Frequency-domain analysis of the linearised chain: link and head-to-tail
//! transfer functions, plant and string stability, and the analytic boundary
//! curves in the two controller-gain planes.
//!
//! The linearisation is taken on the linear segments of the range and speed
//! policies. Boundary formulas assume identical human drivers and a single
//! connection to the head vehicle (`Φ ⊆ {n + 1}`) without acceleration feedback.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::models::{CavParams, Chain, HvParams};
use crate::scalar::{lit, Scalar};

/// Below this magnitude a transfer-function denominator counts as a pole.
const POLE_EPS: f64 = 1e-14;
/// Near-singular 2×2 boundary solves are skipped.
const SINGULAR_DET: f64 = 1e-10;
/// Local grid maxima that get a golden-section refinement.
const REFINED_PEAKS: usize = 3;
/// Margin below one that the peak gain must clear for the string flag.
const STRING_MARGIN: f64 = 1e-9;

fn pole<T: Scalar>(what: &'static str, s: Complex<T>) -> Error {
    Error::Pole { what, re: s.re.as_f64(), im: s.im.as_f64() }
}

fn divide<T: Scalar>(num: Complex<T>, den: Complex<T>, s: Complex<T>, what: &'static str) -> Result<Complex<T>> {
    if den.norm() < lit(POLE_EPS) {
        return Err(pole(what, s));
    }
    Ok(num / den)
}

fn effective_xi<T: Scalar>(p: &CavParams<T>) -> T {
    if p.is_lag_free() {
        T::zero()
    } else {
        p.xi
    }
}

/// `ξs³ + s² + Ψ₀s + Aκ`, the characteristic polynomial of the automated vehicle's loop.
pub fn cav_denominator<T: Scalar>(s: Complex<T>, p: &CavParams<T>) -> Complex<T> {
    let xi = effective_xi(p);
    s * s * (s * xi + T::one()) + s * p.psi() + Complex::from(p.a * p.kappa)
}

/// Link from vehicle 1 to the automated vehicle.
pub fn link_t01<T: Scalar>(s: Complex<T>, p: &CavParams<T>) -> Result<Complex<T>> {
    let num = s * s * p.c1 + s * p.b1 + Complex::from(p.a * p.kappa);
    divide(num, cav_denominator(s, p), s, "T01")
}

/// Link from connected vehicle `k` to the automated vehicle. Zero for indices
/// that are not connected.
pub fn link_t0k<T: Scalar>(s: Complex<T>, p: &CavParams<T>, k: usize) -> Result<Complex<T>> {
    let num = (s * p.c(k) + p.b(k)) * s;
    divide(num, cav_denominator(s, p), s, "T0k")
}

/// Link between two consecutive human-driven vehicles, including the delay factor.
pub fn link_thv<T: Scalar>(s: Complex<T>, h: &HvParams<T>) -> Result<Complex<T>> {
    let ak = h.a * h.kappa;
    let num = s * h.b + Complex::from(ak);
    let den = (s * h.tau).exp() * s * s + s * (h.a + h.b) + Complex::from(ak);
    divide(num, den, s, "Thv")
}

/// `T_hv(jω)ⁿ`, whose real and imaginary parts enter the boundary formulas.
pub fn hv_gamma<T: Scalar>(omega: T, h: &HvParams<T>, n: usize) -> Result<Complex<T>> {
    if n == 0 {
        return Ok(Complex::from(T::one()));
    }
    Ok(link_thv(Complex::new(T::zero(), omega), h)?.powu(n as u32))
}

/// `P_k = Π_{i=k..n} T_{i,i+1}(s)` for `k = 1..=n+1`; slot 0 is unused.
fn suffix_products<T: Scalar>(s: Complex<T>, hvs: &[HvParams<T>]) -> Result<Vec<Complex<T>>> {
    let n = hvs.len();
    let mut out = vec![Complex::from(T::one()); n + 2];
    if let Some(first) = hvs.first().filter(|f| hvs.iter().all(|h| h == *f)) {
        // identical drivers: one transcendental evaluation, then powers
        let t = link_thv(s, first)?;
        for (k, slot) in out.iter_mut().enumerate().take(n + 1).skip(1) {
            *slot = t.powu((n + 1 - k) as u32);
        }
    } else {
        for k in (1..=n).rev() {
            out[k] = link_thv(s, &hvs[k - 1])? * out[k + 1];
        }
    }
    Ok(out)
}

/// Numerator of the head-to-tail response over the loop denominator, given
/// the HV suffix products.
fn head_to_tail_numerator<T: Scalar>(s: Complex<T>, p: &CavParams<T>, suffix: &[Complex<T>]) -> Complex<T> {
    let mut num = (s * s * p.c1 + s * p.b1 + Complex::from(p.a * p.kappa)) * suffix[1];
    for l in &p.links {
        if let Some(pk) = suffix.get(l.index) {
            num = num + (s * l.c + l.b) * s * *pk;
        }
    }
    num
}

/// Head-to-tail transfer function from the head vehicle's speed to the
/// automated vehicle's speed.
pub fn head_to_tail_g<T: Scalar>(s: Complex<T>, chain: &Chain<T>) -> Result<Complex<T>> {
    let suffix = suffix_products(s, &chain.hvs)?;
    let num = head_to_tail_numerator(s, &chain.cav, &suffix);
    divide(num, cav_denominator(s, &chain.cav), s, "G")
}

/// `P(ω) = (|d|² − |n|²)/ω²` with `G = n/d`; positive exactly where `|G(jω)| < 1`.
pub fn p_criterion<T: Scalar>(omega: T, chain: &Chain<T>) -> Result<T> {
    if !(omega > T::zero()) {
        return Err(Error::Domain("P(ω) needs ω > 0; use p_criterion_zero_limit".into()));
    }
    let s = Complex::new(T::zero(), omega);
    let suffix = suffix_products(s, &chain.hvs)?;
    let num = head_to_tail_numerator(s, &chain.cav, &suffix);
    let den = cav_denominator(s, &chain.cav);
    Ok((den.norm_sqr() - num.norm_sqr()) / (omega * omega))
}

/// Checks the structure the closed-form boundaries are derived for and
/// returns the shared HV parameters (if any) and the head gain.
fn boundary_structure<T: Scalar>(chain: &Chain<T>) -> Result<Option<HvParams<T>>> {
    if chain.cav.has_accel_feedback() {
        return Err(Error::Domain("boundary formulas assume no acceleration feedback".into()));
    }
    let n = chain.n();
    if chain.cav.phi().any(|k| k != n + 1) {
        return Err(Error::Domain("boundary formulas assume the only connection is to the head vehicle".into()));
    }
    if n == 0 {
        return Ok(None);
    }
    let h = *chain
        .identical_hv()
        .ok_or_else(|| Error::Domain("boundary formulas need identical human drivers".into()))?;
    if !(h.a > T::zero()) {
        return Err(Error::Domain("boundary formulas need a positive HV headway gain".into()));
    }
    Ok(Some(h))
}

/// `L_h = lim (1 − |T_hv(jω)|^{2n})/ω² = n(A_h + 2B_h − 2κ_h)/(A_h κ_h²)`.
pub fn l_h<T: Scalar>(h: &HvParams<T>, n: usize) -> T {
    lit::<T>(n as f64) * (h.a + T::two() * h.b - T::two() * h.kappa) / (h.a * h.kappa * h.kappa)
}

/// `(L_h κ² + 1, nκ/κ_h + 1)`, the coefficients of the ω → 0 boundary.
fn zero_limit_coefficients<T: Scalar>(chain: &Chain<T>) -> Result<(T, T)> {
    let kappa = chain.cav.kappa;
    Ok(match boundary_structure(chain)? {
        None => (T::one(), T::one()),
        Some(h) => {
            let n = lit::<T>(chain.n() as f64);
            (l_h(&h, chain.n()) * kappa * kappa + T::one(), n * kappa / h.kappa + T::one())
        }
    })
}

/// Limit of `P(ω)` as ω → 0.
pub fn p_criterion_zero_limit<T: Scalar>(chain: &Chain<T>) -> Result<T> {
    let (lk, nk) = zero_limit_coefficients(chain)?;
    let p = &chain.cav;
    let bh = chain.head_gain();
    Ok(p.a * (p.a * lk + T::two() * p.b1 + T::two() * nk * bh - T::two() * p.kappa))
}

/// Whether the polynomial with the given coefficients (highest degree first)
/// has all roots strictly in the open left half-plane, by the Routh array.
pub fn hurwitz_stable<T: Scalar>(coeffs: &[T]) -> bool {
    let coeffs: Vec<T> = match coeffs.iter().position(|c| *c != T::zero()) {
        Some(i) => coeffs[i..].to_vec(),
        None => return false,
    };
    let lead_sign = coeffs[0].signum();
    if coeffs.iter().any(|c| *c * lead_sign <= T::zero() || !c.is_finite()) {
        return false;
    }
    let width = coeffs.len().div_ceil(2);
    let row = |start: usize| -> Vec<T> {
        (0..width).map(|i| coeffs.get(start + 2 * i).copied().unwrap_or_else(T::zero)).collect()
    };
    let (mut prev, mut cur) = (row(0), row(1));
    for _ in 2..coeffs.len() {
        if cur[0] * lead_sign <= T::zero() {
            return false;
        }
        let mut next = vec![T::zero(); width];
        for i in 0..width - 1 {
            next[i] = (cur[0] * prev[i + 1] - prev[0] * cur[i + 1]) / cur[0];
        }
        prev = cur;
        cur = next;
    }
    cur[0] * lead_sign > T::zero()
}

/// Coefficients of the loop's characteristic polynomial, highest degree first.
/// The lag-free loop is quadratic.
pub fn characteristic_coefficients<T: Scalar>(p: &CavParams<T>) -> Vec<T> {
    let tail = [T::one(), p.psi(), p.a * p.kappa];
    if p.is_lag_free() {
        tail.to_vec()
    } else {
        std::iter::once(p.xi).chain(tail).collect()
    }
}

/// Plant stability of the automated vehicle's loop (human drivers are assumed
/// plant stable). For the cubic this is `Ψ₀ > ξAκ` with positive coefficients.
pub fn plant_stable<T: Scalar>(p: &CavParams<T>) -> bool {
    hurwitz_stable(&characteristic_coefficients(p))
}

/// Log-spaced frequency grid for the peak-gain search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid<T> {
    pub omega_min: T,
    pub omega_max: T,
    pub points: usize,
    /// Golden-section iterations around the grid maximum.
    pub refine_iters: usize,
}

impl<T: Scalar> Default for FrequencyGrid<T> {
    fn default() -> Self {
        Self { omega_min: lit(1e-3), omega_max: lit(1e2), points: 800, refine_iters: 40 }
    }
}

impl<T: Scalar> FrequencyGrid<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_min > T::zero() && self.omega_max > self.omega_min) || self.points < 2 {
            return Err(Error::Config("frequency grid needs 0 < ω_min < ω_max and ≥ 2 points".into()));
        }
        Ok(())
    }

    pub fn omegas(&self) -> Vec<T> {
        let (lo, hi) = (self.omega_min.ln(), self.omega_max.ln());
        let last = lit::<T>((self.points - 1) as f64);
        (0..self.points)
            .map(|i| (lo + (hi - lo) * lit::<T>(i as f64) / last).exp())
            .collect()
    }
}

/// Stability classification of one gain choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityFlags<T> {
    pub plant_stable: bool,
    pub string_stable: bool,
    /// Peak of `|G(jω)|` over ω > 0; infinite when the plant is unstable or a
    /// pole was met on the grid.
    pub sup_gain: T,
    /// Frequency of the peak (NaN when `sup_gain` is infinite).
    pub omega_peak: T,
}

impl<T: Scalar> StabilityFlags<T> {
    fn unstable() -> Self {
        Self { plant_stable: false, string_stable: false, sup_gain: T::infinity(), omega_peak: T::nan() }
    }
}

/// HV part of the head-to-tail response tabulated on a frequency grid. It does
/// not depend on the automated vehicle's gains, so a chart sweep builds it once.
#[derive(Debug, Clone)]
pub struct ChainResponse<T> {
    hvs: Vec<HvParams<T>>,
    grid: FrequencyGrid<T>,
    omegas: Vec<T>,
    suffix: Vec<Vec<Complex<T>>>,
}

impl<T: Scalar> ChainResponse<T> {
    pub fn new(hvs: &[HvParams<T>], grid: FrequencyGrid<T>) -> Result<Self> {
        grid.validate()?;
        let omegas = grid.omegas();
        let suffix = omegas
            .iter()
            .map(|&w| suffix_products(Complex::new(T::zero(), w), hvs))
            .collect::<Result<Vec<_>>>()
            .inspect_err(|e| log::warn!("HV response has a pole on the scan grid: {e}"))?;
        Ok(Self { hvs: hvs.to_vec(), grid, omegas, suffix })
    }

    fn gain_at(&self, p: &CavParams<T>, omega: T, suffix: &[Complex<T>]) -> T {
        let s = Complex::new(T::zero(), omega);
        let den = cav_denominator(s, p);
        if den.norm() < lit(POLE_EPS) {
            return T::infinity();
        }
        (head_to_tail_numerator(s, p, suffix) / den).norm()
    }

    fn gain_direct(&self, p: &CavParams<T>, omega: T) -> T {
        match suffix_products(Complex::new(T::zero(), omega), &self.hvs) {
            Ok(sfx) => self.gain_at(p, omega, &sfx),
            Err(_) => T::infinity(),
        }
    }

    /// Peak gain and its frequency: grid scan, then golden-section refinement
    /// on `ln ω` between the neighbours of the grid maximum.
    pub fn sup_gain(&self, p: &CavParams<T>) -> (T, T) {
        let mut gains = Vec::with_capacity(self.omegas.len());
        for (&w, sfx) in self.omegas.iter().zip(&self.suffix) {
            let g = self.gain_at(p, w, sfx);
            if !g.is_finite() {
                return (T::infinity(), w);
            }
            gains.push(g);
        }
        let last = gains.len() - 1;
        let mut peaks: Vec<usize> = (0..=last)
            .filter(|&i| (i == 0 || gains[i] >= gains[i - 1]) && (i == last || gains[i] >= gains[i + 1]))
            .collect();
        peaks.sort_by(|&a, &b| gains[b].partial_cmp(&gains[a]).unwrap_or(std::cmp::Ordering::Equal));
        let mut best = (gains[peaks[0]], self.omegas[peaks[0]]);
        for &i in peaks.iter().take(REFINED_PEAKS) {
            let lo = self.omegas[i.saturating_sub(1)].ln();
            let hi = self.omegas[(i + 1).min(last)].ln();
            let (w, g) = golden_max(|x| self.gain_direct(p, x.exp()), lo, hi, self.grid.refine_iters);
            if g > best.0 {
                best = (g, w.exp());
            }
        }
        best
    }

    /// Plant and string classification of the automated vehicle's gains
    /// against this HV response.
    pub fn classify(&self, p: &CavParams<T>) -> StabilityFlags<T> {
        if !plant_stable(p) {
            return StabilityFlags::unstable();
        }
        let (sup_gain, omega_peak) = self.sup_gain(p);
        StabilityFlags {
            plant_stable: true,
            string_stable: sup_gain < T::one() - lit(STRING_MARGIN),
            sup_gain,
            omega_peak,
        }
    }
}

/// Maximises a unimodal-near-peak function on `[lo, hi]`.
fn golden_max<T: Scalar, F: Fn(T) -> T>(f: F, mut lo: T, mut hi: T, iters: usize) -> (T, T) {
    let r = (lit::<T>(5.0).sqrt() - T::one()) / T::two();
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Plant check followed by a peak-gain scan of `|G(jω)|`.
pub fn string_stable_numeric<T: Scalar>(chain: &Chain<T>, grid: FrequencyGrid<T>) -> Result<StabilityFlags<T>> {
    Ok(ChainResponse::new(&chain.hvs, grid)?.classify(&chain.cav))
}

/// Controller-gain plane of a chart or boundary family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    /// `x = A`, `y = B_1`, with the head gain `B_{n+1}` held fixed.
    AB1,
    /// `x = B_1`, `y = B_{n+1}`, with `A` held fixed.
    B1BN,
}

impl Plane {
    pub fn name(self) -> &'static str {
        match self {
            Plane::AB1 => "A-B1",
            Plane::B1BN => "B1-BN",
        }
    }

    /// Copy of `cav` with the plane's two gains set to `(x, y)` and the third to `fixed`.
    pub fn apply<T: Scalar>(self, cav: &CavParams<T>, n: usize, fixed: T, x: T, y: T) -> CavParams<T> {
        let mut p = cav.clone();
        match self {
            Plane::AB1 => {
                p.a = x;
                p.b1 = y;
                if n >= 1 {
                    p.set_b(n + 1, fixed);
                }
            }
            Plane::B1BN => {
                p.a = fixed;
                p.b1 = x;
                p.set_b(n + 1, y);
            }
        }
        p
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Plane {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A-B1" => Ok(Plane::AB1),
            "B1-BN" => Ok(Plane::B1BN),
            other => Err(Error::Config(format!("unknown plane {other:?}; expected A-B1 or B1-BN"))),
        }
    }
}

/// Straight line `a x + b y = c` in plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Scalar> Line<T> {
    /// Segment of the line inside the rectangle, if any.
    pub fn clip(&self, x: (T, T), y: (T, T)) -> Option<[(T, T); 2]> {
        let eps = lit::<T>(1e-12) * (T::one() + (x.1 - x.0).abs() + (y.1 - y.0).abs());
        let mut pts: Vec<(T, T)> = Vec::with_capacity(4);
        if self.b != T::zero() {
            for xe in [x.0, x.1] {
                let ye = (self.c - self.a * xe) / self.b;
                if ye >= y.0 - eps && ye <= y.1 + eps {
                    pts.push((xe, ye));
                }
            }
        }
        if self.a != T::zero() {
            for ye in [y.0, y.1] {
                let xe = (self.c - self.b * ye) / self.a;
                if xe >= x.0 - eps && xe <= x.1 + eps {
                    pts.push((xe, ye));
                }
            }
        }
        let first = *pts.first()?;
        let far = pts
            .iter()
            .copied()
            .max_by(|p, q| {
                let dp = (p.0 - first.0).hypot(p.1 - first.1);
                let dq = (q.0 - first.0).hypot(q.1 - first.1);
                dp.partial_cmp(&dq).unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(first);
        Some([first, far])
    }
}

/// Point on a parametric boundary curve. `omega` is the frequency Ω or ω and
/// `k` the wave number; both are `None` on straight lines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint<T> {
    pub x: T,
    pub y: T,
    pub omega: Option<T>,
    pub k: Option<T>,
}

/// Ordered boundary samples (one parametric curve, or one clipped line).
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline<T> {
    pub points: Vec<BoundaryPoint<T>>,
}

/// Straight lines plus parametric curves of one boundary family.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundarySet<T> {
    pub lines: Vec<Line<T>>,
    pub curves: Vec<Polyline<T>>,
}

/// String-stability boundary at ω → 0 in the requested plane. In the `A-B1`
/// plane the line `A = 0` is included.
pub fn string_boundary_w0<T: Scalar>(plane: Plane, fixed: T, chain: &Chain<T>) -> Result<Vec<Line<T>>> {
    let (lk, nk) = zero_limit_coefficients(chain)?;
    let kappa = chain.cav.kappa;
    let two = T::two();
    match plane {
        Plane::AB1 => {
            let bh = if chain.n() == 0 { T::zero() } else { fixed };
            Ok(vec![
                Line { a: T::one(), b: T::zero(), c: T::zero() },
                Line { a: lk, b: two, c: two * kappa - two * nk * bh },
            ])
        }
        Plane::B1BN => {
            require_head_link(chain)?;
            Ok(vec![Line { a: T::one(), b: nk, c: kappa - lk * fixed / two }])
        }
    }
}

fn require_head_link<T: Scalar>(chain: &Chain<T>) -> Result<()> {
    if chain.n() == 0 {
        return Err(Error::Domain("the B1-BN plane needs at least one human-driven vehicle".into()));
    }
    Ok(())
}

/// String-stability boundaries for ω > 0: for each wave number `K`, the gain
/// pairs where `G(jω) = e^{-jK}`, one curve per `K` ordered by ω.
pub fn string_boundary_wk<T: Scalar>(
    plane: Plane,
    fixed: T,
    chain: &Chain<T>,
    omegas: &[T],
    ks: &[T],
) -> Result<Vec<Polyline<T>>> {
    if ks.is_empty() || omegas.is_empty() {
        return Err(Error::Config("ω and K grids must be non-empty".into()));
    }
    let hv = boundary_structure(chain)?;
    if plane == Plane::B1BN {
        require_head_link(chain)?;
    }
    let n = chain.n();
    let kappa = chain.cav.kappa;
    let xi = effective_xi(&chain.cav);
    let bh = if n == 0 { T::zero() } else { fixed };
    let gammas = omegas
        .iter()
        .map(|&w| match &hv {
            Some(h) => hv_gamma(w, h, n),
            None => Ok(Complex::from(T::one())),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut curves = Vec::with_capacity(ks.len());
    let mut skipped = 0usize;
    for &k in ks {
        let (sin_k, cos_k) = k.sin_cos();
        let mut points = Vec::new();
        for (&w, g) in omegas.iter().zip(&gammas) {
            // E = Γ e^{jK}; the boundary condition (B1 s + Aκ)Γ + B s = e^{-jK} d(s)
            // splits into real and imaginary parts that are linear in the unknowns.
            let er = g.re * cos_k - g.im * sin_k;
            let ei = g.re * sin_k + g.im * cos_k;
            let qa = (kappa * (er - T::one()), kappa * ei - w);
            let qb1 = (-w * ei, w * (er - T::one()));
            let qbh = (-w * sin_k, w * (cos_k - T::one()));
            let cubic = (-w * w, -xi * w * w * w);
            let ((p1, p2), (q1, q2), (r1, r2)) = match plane {
                Plane::AB1 => (qa, qb1, (cubic.0 - bh * qbh.0, cubic.1 - bh * qbh.1)),
                Plane::B1BN => {
                    (qb1, qbh, (cubic.0 - fixed * qa.0, cubic.1 - fixed * qa.1))
                }
            };
            let det = p1 * q2 - p2 * q1;
            if det.abs() < lit(SINGULAR_DET) {
                skipped += 1;
                continue;
            }
            let x = (r1 * q2 - q1 * r2) / det;
            let y = (p1 * r2 - p2 * r1) / det;
            if x.is_finite() && y.is_finite() {
                points.push(BoundaryPoint { x, y, omega: Some(w), k: Some(k) });
            }
        }
        curves.push(Polyline { points });
    }
    if skipped > 0 {
        log::debug!("string boundary: skipped {skipped} near-singular (ω, K) samples");
    }
    Ok(curves)
}

/// Plant-stability boundary: a root crossing at `s = jΩ` (parametric curve in
/// the `A-B1` plane, a line in the `B1-BN` plane) plus the `s = 0` crossing `A = 0`.
pub fn plant_boundary<T: Scalar>(plane: Plane, fixed: T, chain: &Chain<T>, omegas: &[T]) -> Result<BoundarySet<T>> {
    let p = &chain.cav;
    if !(p.kappa > T::zero()) {
        return Err(Error::Domain("plant boundary needs κ > 0".into()));
    }
    let xi = effective_xi(p);
    match plane {
        Plane::AB1 => {
            let bh = if chain.n() == 0 { T::zero() } else { fixed };
            let points = omegas
                .iter()
                .map(|&w| {
                    let w2 = w * w;
                    BoundaryPoint { x: w2 / p.kappa, y: (xi - T::one() / p.kappa) * w2 - bh, omega: Some(w), k: None }
                })
                .collect();
            Ok(BoundarySet {
                lines: vec![Line { a: T::one(), b: T::zero(), c: T::zero() }],
                curves: vec![Polyline { points }],
            })
        }
        Plane::B1BN => {
            require_head_link(chain)?;
            Ok(BoundarySet {
                lines: vec![Line { a: T::one(), b: T::one(), c: fixed * (p.kappa * xi - T::one()) }],
                curves: Vec::new(),
            })
        }
    }
}

/// Writes boundary polylines as `plane,param1,param2,x,y`. Lines are clipped
/// to the viewport and tagged with their index in `param1`; curve points carry
/// Ω or (ω, K).
pub fn write_boundary_csv<T: Scalar, W: Write>(
    out: W,
    plane: Plane,
    set: &BoundarySet<T>,
    viewport: ((T, T), (T, T)),
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["plane", "param1", "param2", "x", "y"])?;
    let fmt = |v: Option<T>| v.map(|v| v.to_string()).unwrap_or_default();
    for (i, line) in set.lines.iter().enumerate() {
        if let Some(seg) = line.clip(viewport.0, viewport.1) {
            for (x, y) in seg {
                w.write_record([plane.name(), &i.to_string(), "", &x.to_string(), &y.to_string()])?;
            }
        }
    }
    for curve in &set.curves {
        for p in &curve.points {
            w.write_record([plane.name(), &fmt(p.omega), &fmt(p.k), &p.x.to_string(), &p.y.to_string()])?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_abs_diff_eq;

    fn jw(w: f64) -> Complex<f64> {
        Complex::new(0.0, w)
    }

    fn chain_p(n: usize, xi: f64) -> Chain<f64> {
        presets::reference_chain(n, presets::reference_safe_gains(n, xi))
    }

    #[test]
    fn links_at_zero_frequency() {
        let p = presets::reference_safe_gains::<f64>(1, 0.2);
        assert_abs_diff_eq!(link_t01(jw(0.0), &p).unwrap().re, 1.0, epsilon = 1e-15);
        assert_eq!(link_t0k(jw(0.0), &p, 2).unwrap(), Complex::new(0.0, 0.0));
        let mut z = p.clone();
        z.a = 0.0;
        assert!(matches!(link_t01(jw(0.0), &z), Err(Error::Pole { .. })));
        let h = presets::reference_hv::<f64>();
        assert_abs_diff_eq!(link_thv(jw(0.0), &h).unwrap().re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn unconnected_link_is_zero() {
        let p = presets::reference_safe_gains::<f64>(1, 0.2);
        for w in [0.1, 1.0, 3.0] {
            assert_eq!(link_t0k(jw(w), &p, 3).unwrap(), Complex::new(0.0, 0.0));
        }
    }

    #[test]
    fn delay_free_hv_is_rational() {
        let mut h = presets::reference_hv::<f64>();
        h.tau = 0.0;
        let s = jw(0.7);
        let want = (s * 0.6 + 0.06) / (s * s + s * 0.7 + 0.06);
        assert_abs_diff_eq!((link_thv(s, &h).unwrap() - want).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn head_to_tail_reductions() {
        let c = chain_p(1, 0.2);
        assert_abs_diff_eq!(head_to_tail_g(jw(0.0), &c).unwrap().re, 1.0, epsilon = 1e-15);
        let c0 = presets::reference_chain::<f64>(0, presets::cav_with_gains(0, (0.6, 0.5, 0.0), 0.2));
        let s = jw(0.8);
        assert_eq!(head_to_tail_g(s, &c0).unwrap(), link_t01(s, &c0.cav).unwrap());
    }

    #[test]
    fn identical_fast_path_matches_general_product() {
        let mut c = chain_p(3, 0.2);
        c.cav.set_b(4, 0.1);
        c.cav.set_b(3, 0.05);
        let s = jw(0.9);
        let fast = head_to_tail_g(s, &c).unwrap();
        // nudge one driver so the general branch runs, then undo the nudge's effect
        let mut slow_chain = c.clone();
        slow_chain.hvs[1].d_st += 1.0; // not part of the linear response
        let slow = head_to_tail_g(s, &slow_chain).unwrap();
        assert_abs_diff_eq!((fast - slow).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn routh_reference_cases() {
        let p = presets::reference_safe_gains::<f64>(1, 0.2);
        assert_eq!(characteristic_coefficients(&p), vec![0.2, 1.0, 1.16, 0.36]);
        assert!(plant_stable(&p));
        let mut z = p.clone();
        z.a = 0.0;
        assert!(!plant_stable(&z));
        // Ψ0 = ξAκ exactly: pair of roots on the imaginary axis
        assert!(!hurwitz_stable(&[1.0, 1.0, 2.0, 2.0]));
        assert!(hurwitz_stable(&[1.0, 3.0, 3.0, 1.0]));
        assert!(!hurwitz_stable(&[1.0, -1.0, 2.0]));
        assert!(hurwitz_stable(&[1.0, 4.0, 6.0, 4.0, 1.0]));
        assert!(!hurwitz_stable(&[1.0, 0.0, 1.0]));
    }

    #[test]
    fn reference_safe_gains_are_string_stable() {
        let f = string_stable_numeric(&chain_p(1, 0.2), FrequencyGrid::default()).unwrap();
        assert!(f.plant_stable && f.string_stable, "{f:?}");
        let mut c = chain_p(1, 0.2);
        c.cav.a = 0.0;
        let f = string_stable_numeric(&c, FrequencyGrid::default()).unwrap();
        assert!(!f.plant_stable && !f.string_stable);
    }

    #[test]
    fn l_h_and_zero_frequency_line() {
        let h = presets::reference_hv::<f64>();
        assert_abs_diff_eq!(l_h(&h, 1), 0.1 / 0.036, epsilon = 1e-12);
        let c = chain_p(1, 0.2);
        let lines = string_boundary_w0(Plane::B1BN, 0.6, &c).unwrap();
        // B1 + 2 B2 = 0.6 - 2.0 * 0.6 / 2
        assert_abs_diff_eq!(lines[0].a, 1.0);
        assert_abs_diff_eq!(lines[0].b, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lines[0].c, 0.0, epsilon = 1e-12);
        let ab = string_boundary_w0(Plane::AB1, 0.0, &c).unwrap();
        assert_eq!(ab.len(), 2);
        assert_eq!(ab[0], Line { a: 1.0, b: 0.0, c: 0.0 });
    }

    #[test]
    fn zero_frequency_line_without_drivers() {
        let c0 = presets::reference_chain::<f64>(0, presets::cav_with_gains(0, (0.6, 0.5, 0.0), 0.2));
        let lines = string_boundary_w0(Plane::AB1, 0.0, &c0).unwrap();
        // A + 2 B1 = 2κ
        assert_eq!(lines[1], Line { a: 1.0, b: 2.0, c: 1.2 });
        assert!(string_boundary_w0(Plane::B1BN, 0.6, &c0).is_err());
    }

    #[test]
    fn plant_boundary_examples() {
        let c = chain_p(1, 0.2);
        let set = plant_boundary(Plane::AB1, 0.03, &c, &[0.0, 0.5]).unwrap();
        let p0 = set.curves[0].points[0];
        assert_eq!((p0.x, p0.y), (0.0, -0.03));
        let set = plant_boundary(Plane::B1BN, 0.6, &c, &[]).unwrap();
        let l = set.lines[0];
        // B2 = -0.528 - B1
        assert_abs_diff_eq!(l.c, -0.528, epsilon = 1e-12);
        assert_eq!((l.a, l.b), (1.0, 1.0));
    }

    #[test]
    fn line_clipping() {
        let l = Line { a: 1.0, b: 1.0, c: 1.0 };
        let seg = l.clip((0.0, 2.0), (0.0, 2.0)).unwrap();
        assert!(seg.contains(&(0.0, 1.0)) && seg.contains(&(1.0, 0.0)));
        assert!(Line { a: 1.0, b: 0.0, c: 5.0 }.clip((0.0, 2.0), (0.0, 2.0)).is_none());
        let v = Line { a: 1.0, b: 0.0, c: 0.0 }.clip((0.0, 2.0), (-1.0, 1.0)).unwrap();
        assert!(v.contains(&(0.0, -1.0)) && v.contains(&(0.0, 1.0)));
    }

    #[test]
    fn plane_parsing() {
        assert_eq!("A-B1".parse::<Plane>().unwrap(), Plane::AB1);
        assert_eq!("B1-BN".parse::<Plane>().unwrap(), Plane::B1BN);
        assert!("B1-B2".parse::<Plane>().is_err());
    }

    #[test]
    fn golden_section_finds_peak() {
        let (x, fx) = golden_max(|x: f64| -(x - 0.3) * (x - 0.3), 0.0, 1.0, 60);
        assert_abs_diff_eq!(x, 0.3, epsilon = 1e-8);
        assert_abs_diff_eq!(fx, 0.0, epsilon = 1e-12);
    }
}
