//! Closed-form safe-gain regions for the headway barrier, the critical lag
//! beyond which no safe gains exist, and safety-chart classification over a
//! controller-gain plane.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{CavParams, Chain, CbfParams, LAG_FREE_THRESHOLD};
use crate::scalar::{lit, Scalar};
use crate::stability::{
    plant_boundary, string_boundary_w0, string_boundary_wk, BoundaryPoint, BoundarySet, ChainResponse,
    FrequencyGrid, Line, Plane, Polyline,
};

/// Bounds on the lead vehicle's motion under which the safe-gain region holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyEnvelope<T> {
    /// Bound on the speed difference to every vehicle the controller uses (m/s).
    pub v_bar: T,
    /// Braking limit of the lead vehicle, as a magnitude (m/s²).
    pub a_min: T,
    /// Symmetric acceleration bound used with acceleration feedback (m/s²).
    pub a_bar: T,
}

impl<T: Scalar> SafetyEnvelope<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_bar > T::zero() && self.a_min > T::zero() && self.a_bar > T::zero()) {
            return Err(Error::Config("v_bar, a_min and a_bar must be positive".into()));
        }
        Ok(())
    }
}

/// Interval of headway gains `A` that keep the barrier safe for the other gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeBounds<T> {
    pub a_lower: T,
    pub a_upper: T,
    pub feasible: bool,
}

impl<T: Scalar> SafeBounds<T> {
    fn new(a_lower: T, a_upper: T) -> Self {
        Self { a_lower, a_upper, feasible: a_lower <= a_upper }
    }

    pub fn contains(&self, a: T) -> bool {
        self.feasible && a >= self.a_lower && a <= self.a_upper
    }
}

/// Slope of the class-K function used in the upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GammaChoice<T> {
    /// `(1 − ξκ_sf)/(2ξ)`, which maximises the upper bound.
    #[default]
    Optimal,
    Value(T),
}

/// Which region to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundVariant {
    /// Speed and headway feedback; the lead vehicle brakes no harder than `a_min`.
    #[default]
    SpeedFeedback,
    /// Adds acceleration feedback; accelerations bounded by `±a_bar`.
    AccelFeedback,
}

/// `κ (D_st − D_sf)`, the denominator shared by every lower bound.
fn headway_margin<T: Scalar>(kappa: T, d_st: T, c: &CbfParams<T>) -> Result<T> {
    if !(d_st > c.d_sf) {
        return Err(Error::Domain(format!(
            "standstill distance D_st = {d_st} must exceed the safe standstill distance D_sf = {}",
            c.d_sf
        )));
    }
    if !(kappa > T::zero()) {
        return Err(Error::Domain("range-policy gradient κ must be positive".into()));
    }
    Ok(kappa * (d_st - c.d_sf))
}

fn check_hypotheses<T: Scalar>(p: &CavParams<T>, c: &CbfParams<T>, env: &SafetyEnvelope<T>) -> Result<T> {
    let margin = headway_margin(p.kappa, p.d_st, c)?;
    if c.kappa_sf < p.kappa {
        return Err(Error::Domain(format!(
            "the safe headway must not be shorter than the range policy's: need κ_sf ≥ κ (κ_sf = {}, κ = {})",
            c.kappa_sf, p.kappa
        )));
    }
    if !(p.xi > T::zero() && p.xi * c.kappa_sf < T::one()) {
        return Err(Error::Domain(format!(
            "lag ξ = {} outside (0, 1/κ_sf) = (0, {})",
            p.xi,
            T::one() / c.kappa_sf
        )));
    }
    env.validate().map_err(|e| Error::Domain(e.to_string()))?;
    Ok(margin)
}

/// `(1 − ξκ_sf)/(2ξ)`.
pub fn optimal_gamma<T: Scalar>(xi: T, kappa_sf: T) -> T {
    (T::one() - xi * kappa_sf) / (T::two() * xi)
}

/// Upper bound on `A`: `(1−ξκ_sf)²/(4ξ) − ξ(γ − (1−ξκ_sf)/(2ξ))²`.
pub fn upper_bound<T: Scalar>(xi: T, kappa_sf: T, gamma: GammaChoice<T>) -> T {
    let g_opt = optimal_gamma(xi, kappa_sf);
    let peak = (T::one() - xi * kappa_sf).powi(2) / (lit::<T>(4.0) * xi);
    match gamma {
        GammaChoice::Optimal => peak,
        GammaChoice::Value(g) => peak - xi * (g - g_opt).powi(2),
    }
}

/// Speed-gap coefficient `|κ_sf − ξκ_sf² − B_1| + Σ_k B_k`.
fn speed_coefficient<T: Scalar>(p: &CavParams<T>, xi: T, kappa_sf: T) -> T {
    (kappa_sf - xi * kappa_sf * kappa_sf - p.b1).abs() + p.connected_b_sum()
}

/// Acceleration coefficient `|ξκ_sf − C_1| + Σ_k |C_k|`.
fn accel_coefficient<T: Scalar>(p: &CavParams<T>, xi: T, kappa_sf: T) -> T {
    (xi * kappa_sf - p.c1).abs() + p.links.iter().fold(T::zero(), |acc, l| acc + l.c.abs())
}

/// Safe interval of `A` for the speed-feedback law, given the other gains.
pub fn speed_feedback_bounds<T: Scalar>(
    p: &CavParams<T>,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
    gamma: GammaChoice<T>,
) -> Result<SafeBounds<T>> {
    let margin = check_hypotheses(p, c, env)?;
    let lower = (speed_coefficient(p, p.xi, c.kappa_sf) * env.v_bar + p.xi * c.kappa_sf * env.a_min) / margin;
    Ok(SafeBounds::new(lower, upper_bound(p.xi, c.kappa_sf, gamma)))
}

/// Safe interval of `A` when the law also feeds back accelerations.
pub fn accel_feedback_bounds<T: Scalar>(
    p: &CavParams<T>,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
    gamma: GammaChoice<T>,
) -> Result<SafeBounds<T>> {
    let margin = check_hypotheses(p, c, env)?;
    let n1 = speed_coefficient(p, p.xi, c.kappa_sf);
    let n2 = accel_coefficient(p, p.xi, c.kappa_sf);
    let lower = (n1 * env.v_bar + n2 * env.a_bar) / margin;
    Ok(SafeBounds::new(lower, upper_bound(p.xi, c.kappa_sf, gamma)))
}

/// The bounds in the limit ξ → 0: the upper bound grows without limit under the
/// optimal γ and tends to γ for a fixed γ; the braking term drops out.
pub fn lag_free_limit_bounds<T: Scalar>(
    p: &CavParams<T>,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
    gamma: GammaChoice<T>,
    variant: BoundVariant,
) -> Result<SafeBounds<T>> {
    let margin = headway_margin(p.kappa, p.d_st, c)?;
    env.validate().map_err(|e| Error::Domain(e.to_string()))?;
    let zero = T::zero();
    let mut num = speed_coefficient(p, zero, c.kappa_sf) * env.v_bar;
    if variant == BoundVariant::AccelFeedback {
        num = num + accel_coefficient(p, zero, c.kappa_sf) * env.a_bar;
    }
    let upper = match gamma {
        GammaChoice::Optimal => T::infinity(),
        GammaChoice::Value(g) => g,
    };
    Ok(SafeBounds::new(num / margin, upper))
}

/// Dispatches to the strict bounds, or to the ξ → 0 limit for lag-free vehicles.
pub fn safe_bounds<T: Scalar>(
    p: &CavParams<T>,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
    gamma: GammaChoice<T>,
    variant: BoundVariant,
) -> Result<SafeBounds<T>> {
    if p.xi < lit(LAG_FREE_THRESHOLD) {
        return lag_free_limit_bounds(p, c, env, gamma, variant);
    }
    match variant {
        BoundVariant::SpeedFeedback => speed_feedback_bounds(p, c, env, gamma),
        BoundVariant::AccelFeedback => accel_feedback_bounds(p, c, env, gamma),
    }
}

/// `ρ = √(4κ_sf a_min / (κ(D_st − D_sf)))`.
pub fn rho<T: Scalar>(c: &CbfParams<T>, env: &SafetyEnvelope<T>, kappa: T, d_st: T) -> Result<T> {
    let margin = headway_margin(kappa, d_st, c)?;
    Ok((lit::<T>(4.0) * c.kappa_sf * env.a_min / margin).sqrt())
}

/// Largest lag for which the speed-feedback region is non-empty:
/// `1/(κ_sf + 2√(κ_sf a_min/(κ(D_st − D_sf))))`.
pub fn critical_lag<T: Scalar>(c: &CbfParams<T>, env: &SafetyEnvelope<T>, kappa: T, d_st: T) -> Result<T> {
    if !(c.kappa_sf > T::zero() && env.a_min > T::zero()) {
        return Err(Error::Domain("κ_sf and a_min must be positive".into()));
    }
    Ok(T::one() / (c.kappa_sf + rho(c, env, kappa, d_st)?))
}

/// What remains of the speed-feedback region as `v_bar` grows without bound:
/// `B_1` pinned so the speed-gap coefficient vanishes, connected gains zero,
/// and an interval of `A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnboundedSpeedGapSegment<T> {
    pub b1: T,
    pub a_lower: T,
    pub a_upper: T,
    pub feasible: bool,
}

impl<T: Scalar> UnboundedSpeedGapSegment<T> {
    pub fn length(&self) -> T {
        if self.feasible {
            self.a_upper - self.a_lower
        } else {
            T::zero()
        }
    }
}

pub fn unbounded_speed_gap_segment<T: Scalar>(
    xi: T,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
    kappa: T,
    d_st: T,
) -> Result<UnboundedSpeedGapSegment<T>> {
    let margin = headway_margin(kappa, d_st, c)?;
    if !(xi > T::zero() && xi * c.kappa_sf < T::one()) {
        return Err(Error::Domain(format!("lag ξ = {xi} outside (0, 1/κ_sf)")));
    }
    let a_lower = xi * c.kappa_sf * env.a_min / margin;
    let a_upper = upper_bound(xi, c.kappa_sf, GammaChoice::Optimal);
    Ok(UnboundedSpeedGapSegment {
        b1: c.kappa_sf - xi * c.kappa_sf * c.kappa_sf,
        a_lower,
        a_upper,
        feasible: a_lower <= a_upper,
    })
}

/// Rectangular sweep over a gain plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSpec<T> {
    pub plane: Plane,
    /// Head gain `B_{n+1}` in the `A-B1` plane, `A` in the `B1-BN` plane.
    pub fixed: T,
    pub x_range: (T, T),
    pub y_range: (T, T),
    pub nx: usize,
    pub ny: usize,
    pub variant: BoundVariant,
    pub gamma: GammaChoice<T>,
    pub freq: FrequencyGrid<T>,
    /// Frequencies of the boundary curves attached to the chart.
    pub boundary_omegas: Vec<T>,
    /// Wave numbers of the ω > 0 string-boundary family.
    pub boundary_ks: Vec<T>,
}

impl<T: Scalar> ChartSpec<T> {
    /// Chart with the default frequency grid, twelve wave numbers in `[0, 2π)`
    /// and 400 boundary frequencies on `[0.01, 10]` rad/s.
    pub fn new(plane: Plane, fixed: T, x_range: (T, T), y_range: (T, T), nx: usize, ny: usize) -> Self {
        let two_pi = T::two() * T::PI();
        Self {
            plane,
            fixed,
            x_range,
            y_range,
            nx,
            ny,
            variant: BoundVariant::SpeedFeedback,
            gamma: GammaChoice::Optimal,
            freq: FrequencyGrid::default(),
            boundary_omegas: FrequencyGrid { omega_min: lit(0.01), omega_max: lit(10.0), points: 400, refine_iters: 0 }
                .omegas(),
            boundary_ks: (0..12).map(|i| two_pi * lit::<T>(i as f64) / lit(12.0)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Config("chart resolution must be at least 2 per axis".into()));
        }
        if !(self.x_range.1 > self.x_range.0 && self.y_range.1 > self.y_range.0) {
            return Err(Error::Config("chart ranges must be increasing".into()));
        }
        self.freq.validate()
    }

    fn node(range: (T, T), count: usize, i: usize) -> T {
        range.0 + (range.1 - range.0) * lit::<T>(i as f64) / lit::<T>((count - 1) as f64)
    }

    pub fn x_at(&self, i: usize) -> T {
        Self::node(self.x_range, self.nx, i)
    }

    pub fn y_at(&self, j: usize) -> T {
        Self::node(self.y_range, self.ny, j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartCell<T> {
    pub x: T,
    pub y: T,
    pub plant: bool,
    pub string: bool,
    pub safe: bool,
    pub sup_gain: T,
}

/// Boundary polylines attached to a chart.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChartBoundaries<T> {
    pub plant: BoundarySet<T>,
    pub string_w0: BoundarySet<T>,
    pub string_wk: BoundarySet<T>,
    /// Outline of the safe region (closed polygon when non-empty).
    pub safe: Vec<Polyline<T>>,
}

/// Classified gain plane; cells are row-major with `y` outer and `x` inner.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartGrid<T> {
    pub spec: ChartSpec<T>,
    pub cells: Vec<ChartCell<T>>,
    pub boundaries: ChartBoundaries<T>,
    /// True when the safe flags come from the ξ → 0 limit of the bounds.
    pub lag_free_limit: bool,
}

impl<T: Scalar> ChartGrid<T> {
    pub fn safe_count(&self) -> usize {
        self.cells.iter().filter(|c| c.safe).count()
    }

    /// Safe cells that are not both plant and string stable.
    pub fn containment_violations(&self) -> usize {
        self.cells.iter().filter(|c| c.safe && !(c.plant && c.string)).count()
    }

    pub fn cell(&self, i: usize, j: usize) -> &ChartCell<T> {
        &self.cells[j * self.spec.nx + i]
    }

    /// Writes `x,y,plant,string,safe,sup_gain` with flags as 0/1.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "plant", "string", "safe", "sup_gain"])?;
        let flag = |b: bool| if b { "1" } else { "0" };
        for c in &self.cells {
            w.write_record([
                c.x.to_string().as_str(),
                &c.y.to_string(),
                flag(c.plant),
                flag(c.string),
                flag(c.safe),
                &c.sup_gain.to_string(),
            ])?;
        }
        w.flush()
    }

    /// Flat-colour SVG of the cells with the boundary polylines on top.
    pub fn write_svg<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let s = &self.spec;
        let (w, h, pad) = (600.0_f64, 600.0_f64, 40.0_f64);
        let (x0, x1) = (s.x_range.0.as_f64(), s.x_range.1.as_f64());
        let (y0, y1) = (s.y_range.0.as_f64(), s.y_range.1.as_f64());
        let px = |x: f64| pad + (x - x0) / (x1 - x0) * w;
        let py = |y: f64| pad + h - (y - y0) / (y1 - y0) * h;
        let (cw, ch) = (w / (s.nx - 1) as f64, h / (s.ny - 1) as f64);
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
            w + 2.0 * pad,
            h + 2.0 * pad,
            w + 2.0 * pad,
            h + 2.0 * pad
        )?;
        writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##)?;
        for c in &self.cells {
            let fill = match (c.safe, c.string, c.plant) {
                (true, _, _) => "#4caf50",
                (false, true, _) => "#bbdefb",
                (false, false, true) => "#eeeeee",
                _ => "#9e9e9e",
            };
            writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                px(c.x.as_f64()) - cw / 2.0,
                py(c.y.as_f64()) - ch / 2.0,
                cw,
                ch
            )?;
        }
        let viewport = (s.x_range, s.y_range);
        let mut poly = |pts: Vec<(f64, f64)>, color: &str, width: f64| -> std::io::Result<()> {
            if pts.len() < 2 {
                return Ok(());
            }
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
            writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
                path.join(" ")
            )
        };
        let family = [
            (&self.boundaries.plant, "#000000"),
            (&self.boundaries.string_w0, "#d32f2f"),
            (&self.boundaries.string_wk, "#ff9800"),
        ];
        for (set, color) in family {
            for l in &set.lines {
                if let Some(seg) = l.clip(viewport.0, viewport.1) {
                    poly(seg.iter().map(|(x, y)| (x.as_f64(), y.as_f64())).collect(), color, 2.0)?;
                }
            }
            for c in &set.curves {
                for run in clip_runs(&c.points, viewport) {
                    poly(run, color, 1.0)?;
                }
            }
        }
        for c in &self.boundaries.safe {
            poly(c.points.iter().map(|p| (p.x.as_f64(), p.y.as_f64())).collect(), "#1b5e20", 2.0)?;
        }
        writeln!(out, "</svg>")
    }
}

/// Splits a curve into runs of consecutive points inside the viewport.
fn clip_runs<T: Scalar>(points: &[BoundaryPoint<T>], viewport: ((T, T), (T, T))) -> Vec<Vec<(f64, f64)>> {
    let ((x0, x1), (y0, y1)) = viewport;
    let mut runs = vec![Vec::new()];
    for p in points {
        if p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1 {
            runs.last_mut().expect("non-empty").push((p.x.as_f64(), p.y.as_f64()));
        } else if !runs.last().expect("non-empty").is_empty() {
            runs.push(Vec::new());
        }
    }
    runs.retain(|r| r.len() >= 2);
    runs
}

/// Outline of the safe region in the chart's plane, clipped to its range.
///
/// The lower bound is `A ≥ (v̄ (|b* − B_1| + B_{n+1}) + e)/m` with `b*` the
/// pinned speed gain, `e` the acceleration term and `m = κ(D_st − D_sf)`, a
/// V in the `A-B1` plane and a triangle in the `B1-BN` plane.
fn safe_outline<T: Scalar>(
    spec: &ChartSpec<T>,
    base: &CavParams<T>,
    n: usize,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
) -> Result<Vec<Polyline<T>>> {
    // Evaluate at the pinned B_1 with zero head gain to recover b*, e/m and the upper bound.
    let xi = if base.is_lag_free() { T::zero() } else { base.xi };
    let b_star = c.kappa_sf - xi * c.kappa_sf * c.kappa_sf;
    let mut probe = spec.plane.apply(base, n, T::zero(), T::zero(), T::zero());
    probe.b1 = b_star;
    if n >= 1 {
        probe.set_b(n + 1, T::zero());
    }
    let at_vertex = safe_bounds(&probe, c, env, spec.gamma, spec.variant)?;
    let m = headway_margin(base.kappa, base.d_st, c)?;
    let slope = env.v_bar / m;
    let upper = at_vertex.a_upper.min(spec.x_range.1.max(spec.x_range.0));
    let pt = |x: T, y: T| BoundaryPoint { x, y, omega: None, k: None };
    let points = match spec.plane {
        Plane::AB1 => {
            let bh = if n >= 1 { spec.fixed } else { T::zero() };
            let a_vertex = at_vertex.a_lower + slope * bh;
            if a_vertex > upper {
                return Ok(Vec::new());
            }
            let half_width = (upper - a_vertex) / slope;
            vec![
                pt(upper, b_star - half_width),
                pt(a_vertex, b_star),
                pt(upper, b_star + half_width),
                pt(upper, b_star - half_width),
            ]
        }
        Plane::B1BN => {
            let a = spec.fixed;
            if a > at_vertex.a_upper || a < at_vertex.a_lower {
                return Ok(Vec::new());
            }
            let reach = (a - at_vertex.a_lower) / slope;
            vec![
                pt(b_star - reach, T::zero()),
                pt(b_star, reach),
                pt(b_star + reach, T::zero()),
                pt(b_star - reach, T::zero()),
            ]
        }
    };
    Ok(vec![Polyline { points }])
}

/// Classifies every node of the gain plane: plant stability, string stability
/// from the peak gain, and membership in the closed-form safe region.
/// The automated vehicle's other parameters (κ, ξ, connected gains outside the
/// plane) come from `chain.cav`.
pub fn classify_chart<T: Scalar>(
    spec: &ChartSpec<T>,
    chain: &Chain<T>,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
) -> Result<ChartGrid<T>> {
    spec.validate()?;
    let n = chain.n();
    if spec.plane == Plane::B1BN && n == 0 {
        return Err(Error::Config("the B1-BN plane needs at least one human-driven vehicle".into()));
    }
    let lag_free_limit = chain.cav.is_lag_free();
    if lag_free_limit {
        log::info!("lag-free chart: safe flags use the ξ → 0 limit of the bounds");
    }
    // Surface hypothesis violations once instead of per cell.
    safe_bounds(&chain.cav, c, env, spec.gamma, spec.variant)?;
    let response = ChainResponse::new(&chain.hvs, spec.freq)?;

    let cells = (0..spec.ny)
        .into_par_iter()
        .flat_map_iter(|j| {
            let response = &response;
            (0..spec.nx).map(move |i| {
                let (x, y) = (spec.x_at(i), spec.y_at(j));
                let p = spec.plane.apply(&chain.cav, n, spec.fixed, x, y);
                let flags = response.classify(&p);
                let safe = safe_bounds(&p, c, env, spec.gamma, spec.variant)
                    .map(|b| b.contains(p.a))
                    .unwrap_or(false);
                ChartCell { x, y, plant: flags.plant_stable, string: flags.string_stable, safe, sup_gain: flags.sup_gain }
            })
        })
        .collect();

    Ok(ChartGrid {
        spec: spec.clone(),
        cells,
        boundaries: chart_boundaries(spec, chain, c, env)?,
        lag_free_limit,
    })
}

fn chart_boundaries<T: Scalar>(
    spec: &ChartSpec<T>,
    chain: &Chain<T>,
    c: &CbfParams<T>,
    env: &SafetyEnvelope<T>,
) -> Result<ChartBoundaries<T>> {
    let plant = plant_boundary(spec.plane, spec.fixed, chain, &spec.boundary_omegas)?;
    // The string boundaries only exist in closed form for identical drivers
    // connected to the head vehicle alone; otherwise the chart carries none.
    let (string_w0, string_wk) = match (
        string_boundary_w0(spec.plane, spec.fixed, chain),
        string_boundary_wk(spec.plane, spec.fixed, chain, &spec.boundary_omegas, &spec.boundary_ks),
    ) {
        (Ok(lines), Ok(curves)) => (
            BoundarySet { lines, curves: Vec::new() },
            BoundarySet { lines: Vec::<Line<T>>::new(), curves },
        ),
        (Err(e), _) | (_, Err(e)) => {
            log::warn!("no analytic string boundaries for this chain: {e}");
            (BoundarySet::default(), BoundarySet::default())
        }
    };
    Ok(ChartBoundaries { plant, string_w0, string_wk, safe: safe_outline(spec, &chain.cav, chain.n(), c, env)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn env() -> SafetyEnvelope<f64> {
        presets::reference_envelope()
    }

    #[test]
    fn reference_safe_point_bounds() {
        let p = presets::reference_safe_gains::<f64>(1, 0.2);
        let b = speed_feedback_bounds(&p, &presets::reference_cbf(), &env(), GammaChoice::Optimal).unwrap();
        assert_abs_diff_eq!(b.a_upper, 0.968, epsilon = 1e-12);
        assert_abs_diff_eq!(b.a_lower, 0.55, epsilon = 1e-12);
        assert!(b.feasible && b.contains(0.6));
    }

    #[test]
    fn reference_unsafe_point_is_infeasible() {
        let q = presets::reference_unsafe_gains::<f64>(1, 0.2);
        let b = speed_feedback_bounds(&q, &presets::reference_cbf(), &env(), GammaChoice::Optimal).unwrap();
        assert_abs_diff_eq!(b.a_lower, (0.502 * 15.0 + 0.84) / 2.4, epsilon = 1e-12);
        assert!(!b.feasible && !b.contains(0.6));
    }

    #[test]
    fn accel_feedback_examples() {
        let c = presets::reference_cbf::<f64>();
        let mut p = presets::reference_safe_gains::<f64>(1, 0.2);
        let e = SafetyEnvelope { a_bar: 7.0, ..env() };
        let plain = speed_feedback_bounds(&p, &c, &e, GammaChoice::Optimal).unwrap();
        let with = accel_feedback_bounds(&p, &c, &e, GammaChoice::Optimal).unwrap();
        assert_abs_diff_eq!(plain.a_lower, with.a_lower, epsilon = 1e-12);

        p.c1 = 0.12;
        let zeroed = accel_feedback_bounds(&p, &c, &e, GammaChoice::Optimal).unwrap();
        assert_abs_diff_eq!(zeroed.a_lower, 0.032 * 15.0 / 2.4, epsilon = 1e-12);

        p.c1 = 0.3;
        p.links[0].c = 0.1;
        let b = accel_feedback_bounds(&p, &c, &env(), GammaChoice::Optimal).unwrap();
        assert_abs_diff_eq!(b.a_lower, (0.032 * 15.0 + 0.28 * 3.0) / 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(b.a_lower, 0.55, epsilon = 1e-12);
    }

    #[test]
    fn hypothesis_violations_are_domain_errors() {
        let c = presets::reference_cbf::<f64>();
        let mut p = presets::reference_safe_gains::<f64>(1, 0.2);
        p.d_st = 1.0;
        assert!(matches!(speed_feedback_bounds(&p, &c, &env(), GammaChoice::Optimal), Err(Error::Domain(_))));
        let mut p = presets::reference_safe_gains::<f64>(1, 0.0);
        assert!(speed_feedback_bounds(&p, &c, &env(), GammaChoice::Optimal).is_err());
        p.xi = 2.0;
        assert!(speed_feedback_bounds(&p, &c, &env(), GammaChoice::Optimal).is_err());
        let mut p = presets::reference_safe_gains::<f64>(1, 0.2);
        p.kappa = 0.8;
        assert!(speed_feedback_bounds(&p, &c, &env(), GammaChoice::Optimal).is_err());
    }

    #[test]
    fn fixed_gamma_upper_bound_matches_expanded_form() {
        for (xi, g) in [(0.2, 1.0), (0.1, 3.0), (0.3, 0.5)] {
            let want = g * (1.0 - xi * 0.6) - xi * g * g;
            assert_abs_diff_eq!(upper_bound(xi, 0.6, GammaChoice::Value(g)), want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            upper_bound(0.2, 0.6, GammaChoice::Value(optimal_gamma(0.2, 0.6))),
            upper_bound(0.2, 0.6, GammaChoice::Optimal),
            epsilon = 1e-12
        );
    }

    #[test]
    fn critical_lag_reference() {
        let c = presets::reference_cbf::<f64>();
        let x = critical_lag(&c, &env(), 0.6, 5.0).unwrap();
        assert_abs_diff_eq!(x, 1.0 / (0.6 + 2.0 * 1.75_f64.sqrt()), epsilon = 1e-15);
        assert_abs_diff_eq!(x, 0.3081, epsilon = 1e-4);
        assert!((x - 0.3).abs() < 0.01);
        assert!(critical_lag(&c, &env(), 0.6, 1.0).is_err());
        let hard = SafetyEnvelope { a_min: 1e12, ..env() };
        assert!(critical_lag(&c, &hard, 0.6, 5.0).unwrap() < 1e-5);
    }

    #[test]
    fn unbounded_segment_examples() {
        let c = presets::reference_cbf::<f64>();
        let s = unbounded_speed_gap_segment(0.2, &c, &env(), 0.6, 5.0).unwrap();
        assert_abs_diff_eq!(s.b1, 0.528, epsilon = 1e-12);
        assert_abs_diff_eq!(s.a_lower, 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(s.a_upper, 0.968, epsilon = 1e-12);
        let xcr = critical_lag(&c, &env(), 0.6, 5.0).unwrap();
        let near = unbounded_speed_gap_segment(xcr - 1e-9, &c, &env(), 0.6, 5.0).unwrap();
        assert!(near.feasible && near.length() < 1e-7);
        assert!(!unbounded_speed_gap_segment(xcr + 1e-6, &c, &env(), 0.6, 5.0).unwrap().feasible);
    }

    #[test]
    fn lag_free_limit_behaviour() {
        let c = presets::reference_cbf::<f64>();
        let p = presets::reference_safe_gains::<f64>(1, 0.0);
        let b = lag_free_limit_bounds(&p, &c, &env(), GammaChoice::Optimal, BoundVariant::SpeedFeedback).unwrap();
        assert!(b.a_upper.is_infinite());
        assert_abs_diff_eq!(b.a_lower, (0.07 + 0.03) * 15.0 / 2.4, epsilon = 1e-12);
        let b = lag_free_limit_bounds(&p, &c, &env(), GammaChoice::Value(1.0), BoundVariant::SpeedFeedback).unwrap();
        assert_eq!(b.a_upper, 1.0);
        // the strict bounds approach the limit as ξ → 0
        let tiny = presets::reference_safe_gains::<f64>(1, 1e-7);
        let strict = speed_feedback_bounds(&tiny, &c, &env(), GammaChoice::Value(1.0)).unwrap();
        assert_abs_diff_eq!(strict.a_lower, b.a_lower, epsilon = 1e-5);
        assert_abs_diff_eq!(strict.a_upper, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn tiny_chart_shape_and_order() {
        let chain = presets::reference_chain::<f64>(1, presets::reference_safe_gains(1, 0.2));
        let spec = ChartSpec::new(Plane::AB1, 0.03, (0.0, 1.0), (0.0, 1.0), 2, 3);
        let g = classify_chart(&spec, &chain, &presets::reference_cbf(), &env()).unwrap();
        assert_eq!(g.cells.len(), 6);
        assert_eq!((g.cells[1].x, g.cells[1].y), (1.0, 0.0));
        assert_eq!((g.cells[2].x, g.cells[2].y), (0.0, 0.5));
        assert_eq!(g.cell(1, 2).y, 1.0);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,plant,string,safe,sup_gain\n"));
        assert_eq!(text.lines().count(), 7);
        let bad = ChartSpec::new(Plane::AB1, 0.0, (0.0, 1.0), (0.0, 1.0), 1, 3);
        assert!(classify_chart(&bad, &chain, &presets::reference_cbf(), &env()).is_err());
    }

    #[test]
    fn safe_outline_vertices_sit_on_bound_equalities() {
        let chain = presets::reference_chain::<f64>(1, presets::reference_safe_gains(1, 0.2));
        let c = presets::reference_cbf();
        let spec = ChartSpec::new(Plane::B1BN, 0.8, (0.0, 1.5), (0.0, 1.0), 2, 2);
        let outline = safe_outline(&spec, &chain.cav, 1, &c, &env()).unwrap();
        for p in &outline[0].points {
            let cav = Plane::B1BN.apply(&chain.cav, 1, 0.8, p.x, p.y);
            let b = speed_feedback_bounds(&cav, &c, &env(), GammaChoice::Optimal).unwrap();
            assert_abs_diff_eq!(b.a_lower, 0.8, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn optimal_upper_bound_decreases_with_lag(a in 1e-3..1.0f64, b in 1e-3..1.0f64) {
            let top = 1.0 / 0.6;
            let (x1, x2) = (a.min(b) * top, a.max(b) * top);
            prop_assume!(x2 - x1 > 1e-9);
            prop_assert!(upper_bound(x1, 0.6, GammaChoice::Optimal) > upper_bound(x2, 0.6, GammaChoice::Optimal));
        }
    }
}
