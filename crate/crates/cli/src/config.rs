//! TOML run configuration. Every key is optional and defaults to the reference
//! case; unknown keys are rejected.

use std::path::{Path, PathBuf};

use ccc_core::models::ConnectedLink;
use ccc_core::sim::{BrakeResume, ChainState, Controller, HeadProfile, InitialCondition};
use ccc_core::stability::{FrequencyGrid, Plane};
use ccc_core::{
    BoundVariant, CavParams64, CbfParams64, Chain64, ChartSpec64, GammaChoice, HvParams64, HvState, Scenario64,
    SafetyEnvelope64,
};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vehicles: Limits,
    pub hv: HvSection,
    pub cav: CavSection,
    pub cbf: CbfSection,
    pub envelope: EnvelopeSection,
    pub scenario: ScenarioSection,
    pub chart: ChartSection,
    pub output: OutputSection,
}

/// Limits shared by every vehicle.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub v_max: f64,
    pub d_st: f64,
    /// Braking limit, as a positive magnitude.
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self { v_max: 30.0, d_st: 5.0, a_min: 7.0, a_max: 3.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HvSection {
    /// Number of human-driven vehicles between the automated and the head vehicle.
    pub count: usize,
    pub tau: f64,
    pub kappa: f64,
    pub a: f64,
    pub b: f64,
    /// Per-driver parameters, nearest first; replaces the shared values when present.
    pub drivers: Vec<DriverSection>,
}

impl Default for HvSection {
    fn default() -> Self {
        Self { count: 1, tau: 0.9, kappa: 0.6, a: 0.1, b: 0.6, drivers: Vec::new() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    pub tau: f64,
    pub kappa: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavSection {
    pub kappa: f64,
    pub xi: f64,
    pub a: f64,
    pub b1: f64,
    pub c1: f64,
    /// Speed gain on the head vehicle (index `count + 1`); ignored when `count = 0`.
    pub b_head: f64,
    /// Acceleration gain on the head vehicle.
    pub c_head: f64,
    /// Further connected vehicles.
    pub links: Vec<LinkSection>,
}

impl Default for CavSection {
    fn default() -> Self {
        Self { kappa: 0.6, xi: 0.2, a: 0.6, b1: 0.53, c1: 0.0, b_head: 0.03, c_head: 0.0, links: Vec::new() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub index: usize,
    pub b: f64,
    #[serde(default)]
    pub c: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbfSection {
    pub d_sf: f64,
    pub kappa_sf: f64,
    pub gamma: f64,
    pub gamma_e: f64,
}

impl Default for CbfSection {
    fn default() -> Self {
        Self { d_sf: 1.0, kappa_sf: 0.6, gamma: 1.0, gamma_e: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeSection {
    pub v_bar: f64,
    /// Lead-vehicle braking bound; defaults to `vehicles.a_min`.
    pub a_min: Option<f64>,
    /// Acceleration magnitude bound for acceleration feedback; defaults to `vehicles.a_max`.
    pub a_bar: Option<f64>,
}

impl Default for EnvelopeSection {
    fn default() -> Self {
        Self { v_bar: 15.0, a_min: None, a_bar: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub v_star: f64,
    pub t_final: f64,
    pub dt: f64,
    pub controllers: Vec<String>,
    /// Saturate the applied command to `[-a_min, a_max]`.
    pub input_clamp: bool,
    pub head: HeadSection,
    pub initial: Option<InitialSection>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            v_star: 20.0,
            t_final: 40.0,
            dt: 0.01,
            controllers: vec!["nominal".into(), "filtered".into()],
            input_clamp: false,
            head: HeadSection::default(),
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeadSection {
    BrakeResume {
        #[serde(default = "default_v_pert")]
        v_pert: f64,
        #[serde(default = "default_t_start")]
        t_start: f64,
        /// Defaults to `vehicles.a_min`.
        a_brake: Option<f64>,
        /// Defaults to `vehicles.a_max`.
        a_resume: Option<f64>,
    },
    /// Measured speeds: `t,v_head[,v_hv<i>...]`, relative paths resolved against the config file.
    Data { path: PathBuf },
}

fn default_v_pert() -> f64 {
    15.0
}

fn default_t_start() -> f64 {
    5.0
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection::BrakeResume { v_pert: default_v_pert(), t_start: default_t_start(), a_brake: None, a_resume: None }
    }
}

/// Explicit initial state instead of uniform flow at `v_star`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub d0: f64,
    pub v0: f64,
    #[serde(default)]
    pub a0: f64,
    /// Gaps of the human-driven vehicles, nearest first.
    pub hv_d: Vec<f64>,
    pub hv_v: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartSection {
    pub plane: String,
    /// `B_{n+1}` in the A-B1 plane, `A` in the B1-BN plane; defaults to 0.03 and 0.6.
    pub fixed: Option<f64>,
    /// Defaults to `[0, 2]` (A-B1) or `[0, 1.5]` (B1-BN).
    pub x_range: Option<[f64; 2]>,
    /// Defaults to `[0, 1.5]` (A-B1) or `[0, 1]` (B1-BN).
    pub y_range: Option<[f64; 2]>,
    pub resolution: [usize; 2],
    /// `nominal`/`filtered` use the speed-feedback bounds, `nominal-accel` the acceleration-feedback ones.
    pub variant: String,
    /// `"optimal"` or a number.
    pub gamma: GammaSetting,
    pub frequency: FrequencySection,
    pub boundary: BoundarySection,
}

impl Default for ChartSection {
    fn default() -> Self {
        Self {
            plane: "A-B1".into(),
            fixed: None,
            x_range: None,
            y_range: None,
            resolution: [200, 200],
            variant: "nominal".into(),
            gamma: GammaSetting::default(),
            frequency: FrequencySection::default(),
            boundary: BoundarySection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GammaSetting {
    Named(String),
    Value(f64),
}

impl Default for GammaSetting {
    fn default() -> Self {
        GammaSetting::Named("optimal".into())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencySection {
    pub omega_min: f64,
    pub omega_max: f64,
    pub points: usize,
    pub refine_iters: usize,
}

impl Default for FrequencySection {
    fn default() -> Self {
        let g = FrequencyGrid::<f64>::default();
        Self { omega_min: g.omega_min, omega_max: g.omega_max, points: g.points, refine_iters: g.refine_iters }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundarySection {
    pub omega_min: f64,
    pub omega_max: f64,
    pub points: usize,
    /// Wave numbers of the ω > 0 string boundaries; defaults to `2πi/12`, `i = 0..12`.
    pub ks: Option<Vec<f64>>,
}

impl Default for BoundarySection {
    fn default() -> Self {
        Self { omega_min: 0.01, omega_max: 10.0, points: 400, ks: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Parses a config file; `None` gives the reference configuration.
    pub fn load(path: Option<&Path>) -> Result<(Self, PathBuf), CliError> {
        let Some(path) = path else {
            return Ok((Self::default(), PathBuf::from(".")));
        };
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.into(), source })?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.chain()?;
        cfg.cbf().validate()?;
        cfg.envelope().validate()?;
        Ok((cfg, base))
    }

    pub fn hvs(&self) -> Result<Vec<HvParams64>, CliError> {
        let l = &self.vehicles;
        let hv = &self.hv;
        let make = |tau, kappa, a, b| HvParams64 { a, b, kappa, tau, d_st: l.d_st, v_max: l.v_max };
        if hv.drivers.is_empty() {
            return Ok(vec![make(hv.tau, hv.kappa, hv.a, hv.b); hv.count]);
        }
        if hv.drivers.len() != hv.count {
            return Err(invalid(format!("hv.count = {} but {} drivers are listed", hv.count, hv.drivers.len())));
        }
        Ok(hv.drivers.iter().map(|d| make(d.tau, d.kappa, d.a, d.b)).collect())
    }

    pub fn cav(&self) -> CavParams64 {
        let c = &self.cav;
        let n = self.hv.count;
        let mut links: Vec<ConnectedLink<f64>> =
            c.links.iter().map(|l| ConnectedLink { index: l.index, b: l.b, c: l.c }).collect();
        if n >= 1 && (c.b_head != 0.0 || c.c_head != 0.0) && !links.iter().any(|l| l.index == n + 1) {
            links.push(ConnectedLink { index: n + 1, b: c.b_head, c: c.c_head });
        }
        links.sort_by_key(|l| l.index);
        CavParams64 {
            a: c.a,
            b1: c.b1,
            c1: c.c1,
            links,
            kappa: c.kappa,
            xi: c.xi,
            d_st: self.vehicles.d_st,
            v_max: self.vehicles.v_max,
        }
    }

    pub fn chain(&self) -> Result<Chain64, CliError> {
        let chain = Chain64 { hvs: self.hvs()?, cav: self.cav() };
        chain.validate()?;
        Ok(chain)
    }

    pub fn cbf(&self) -> CbfParams64 {
        let c = &self.cbf;
        CbfParams64 { kappa_sf: c.kappa_sf, d_sf: c.d_sf, gamma: c.gamma, gamma_e: c.gamma_e }
    }

    pub fn envelope(&self) -> SafetyEnvelope64 {
        let e = &self.envelope;
        SafetyEnvelope64 {
            v_bar: e.v_bar,
            a_min: e.a_min.unwrap_or(self.vehicles.a_min),
            a_bar: e.a_bar.unwrap_or(self.vehicles.a_max),
        }
    }

    pub fn controllers(&self) -> Result<Vec<Controller>, CliError> {
        if self.scenario.controllers.is_empty() {
            return Err(invalid("scenario.controllers is empty"));
        }
        self.scenario.controllers.iter().map(|s| s.parse().map_err(CliError::from)).collect()
    }

    /// Scenario with data paths resolved against `base`.
    pub fn scenario(&self, base: &Path, dt: Option<f64>) -> Result<Scenario64, CliError> {
        let s = &self.scenario;
        let l = &self.vehicles;
        let dt = dt.unwrap_or(s.dt);
        let head = match &s.head {
            HeadSection::BrakeResume { v_pert, t_start, a_brake, a_resume } => HeadProfile::BrakeResume(BrakeResume {
                v_eq: s.v_star,
                v_pert: *v_pert,
                a_brake: a_brake.unwrap_or(l.a_min),
                a_resume: a_resume.unwrap_or(l.a_max),
                t_start: *t_start,
            }),
            HeadSection::Data { path } => {
                let path = if path.is_absolute() { path.clone() } else { base.join(path) };
                HeadProfile::DataDriven(ccc_core::sim::load_speed_csv(&path, dt)?)
            }
        };
        let initial = match &s.initial {
            None => InitialCondition::Equilibrium { v_star: s.v_star },
            Some(i) => {
                if i.hv_d.len() != i.hv_v.len() {
                    return Err(invalid("scenario.initial.hv_d and hv_v differ in length"));
                }
                InitialCondition::Explicit(ChainState {
                    d0: i.d0,
                    v0: i.v0,
                    a0: i.a0,
                    hvs: i.hv_d.iter().zip(&i.hv_v).map(|(&d, &v)| HvState { d, v }).collect(),
                })
            }
        };
        Ok(Scenario64 {
            head,
            initial,
            t_final: s.t_final,
            dt,
            input_clamp: s.input_clamp.then_some((l.a_min, l.a_max)),
        })
    }

    pub fn plane(&self, flag: Option<Plane>) -> Result<Plane, CliError> {
        match flag {
            Some(p) => Ok(p),
            None => Ok(self.chart.plane.parse()?),
        }
    }

    pub fn bound_variant(&self, flag: Option<Controller>) -> Result<BoundVariant, CliError> {
        let controller = match flag {
            Some(c) => c,
            None => self.chart.variant.parse()?,
        };
        Ok(match controller {
            Controller::NominalAccel => BoundVariant::AccelFeedback,
            Controller::Nominal | Controller::Filtered => BoundVariant::SpeedFeedback,
        })
    }

    pub fn gamma(&self) -> Result<GammaChoice<f64>, CliError> {
        match &self.chart.gamma {
            GammaSetting::Named(s) if s == "optimal" => Ok(GammaChoice::Optimal),
            GammaSetting::Named(s) => Err(invalid(format!("chart.gamma must be \"optimal\" or a number, got {s:?}"))),
            GammaSetting::Value(g) if *g > 0.0 => Ok(GammaChoice::Value(*g)),
            GammaSetting::Value(g) => Err(invalid(format!("chart.gamma must be positive, got {g}"))),
        }
    }

    /// Plane viewport `((x_min, x_max), (y_min, y_max))`.
    pub fn viewport(&self, plane: Plane) -> ((f64, f64), (f64, f64)) {
        let (dx, dy) = match plane {
            Plane::AB1 => ([0.0, 2.0], [0.0, 1.5]),
            Plane::B1BN => ([0.0, 1.5], [0.0, 1.0]),
        };
        let x = self.chart.x_range.unwrap_or(dx);
        let y = self.chart.y_range.unwrap_or(dy);
        ((x[0], x[1]), (y[0], y[1]))
    }

    pub fn fixed(&self, plane: Plane, flag: Option<f64>) -> f64 {
        flag.or(self.chart.fixed).unwrap_or(match plane {
            Plane::AB1 => self.cav.b_head,
            Plane::B1BN => self.cav.a,
        })
    }

    pub fn chart_spec(
        &self,
        plane: Plane,
        fixed: Option<f64>,
        resolution: Option<(usize, usize)>,
        variant: BoundVariant,
    ) -> Result<ChartSpec64, CliError> {
        let c = &self.chart;
        let (nx, ny) = resolution.unwrap_or((c.resolution[0], c.resolution[1]));
        let (x, y) = self.viewport(plane);
        let mut spec = ChartSpec64::new(plane, self.fixed(plane, fixed), x, y, nx, ny);
        spec.variant = variant;
        spec.gamma = self.gamma()?;
        let f = &c.frequency;
        spec.freq = FrequencyGrid {
            omega_min: f.omega_min,
            omega_max: f.omega_max,
            points: f.points,
            refine_iters: f.refine_iters,
        };
        let b = &c.boundary;
        spec.boundary_omegas = self.boundary_omegas()?;
        if let Some(ks) = &b.ks {
            spec.boundary_ks = ks.clone();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn boundary_omegas(&self) -> Result<Vec<f64>, CliError> {
        let b = &self.chart.boundary;
        let grid = FrequencyGrid { omega_min: b.omega_min, omega_max: b.omega_max, points: b.points, refine_iters: 0 };
        grid.validate()?;
        Ok(grid.omegas())
    }

    pub fn boundary_ks(&self) -> Vec<f64> {
        match &self.chart.boundary.ks {
            Some(ks) => ks.clone(),
            None => (0..12).map(|i| std::f64::consts::TAU * i as f64 / 12.0).collect(),
        }
    }
}
