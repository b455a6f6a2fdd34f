use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ccc_core::safety::{classify_chart, critical_lag as xi_critical};
use ccc_core::sim::simulate as run;
use ccc_core::stability::{plant_boundary, string_boundary_w0, string_boundary_wk, write_boundary_csv, BoundarySet, Plane};
use ccc_core::{BoundVariant, Controller, GammaChoice};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{BoundaryKind, Common};

/// Environment variable overriding `output.dir`.
pub const OUT_DIR_ENV: &str = "CCC_OUT_DIR";

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Write { path: dir.clone(), source })?;
    Ok(dir)
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let err = |source| CliError::Write { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    body(&mut w).and_then(|()| w.flush()).map_err(err)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn simulate(common: &Common, variant: Option<Controller>, dt: Option<f64>) -> Result<(), CliError> {
    let (cfg, base) = RunConfig::load(common.config.as_deref())?;
    let chain = cfg.chain()?;
    let cbf = cfg.cbf();
    let scenario = cfg.scenario(&base, dt)?;
    let controllers = match variant {
        Some(c) => vec![c],
        None => cfg.controllers()?,
    };
    let dir = out_dir(common, &cfg)?;
    for controller in controllers {
        let traj = run(&scenario, &chain, &cbf, controller)?;
        let path = dir.join(format!("trajectory_{}.csv", controller.name()));
        write_file(&path, |w| traj.write_csv(w))?;
        println!(
            "{}: min_h = {:.4} m/s, min_gap = {:.4} m, filter_active = {:.2} s, speed_floor_events = {}, csv = {}",
            controller.name(),
            traj.min_h(),
            traj.min_gap(),
            traj.filter_active_duration(),
            traj.floor_events,
            path.display()
        );
    }
    Ok(())
}

pub fn chart(
    common: &Common,
    plane: Option<Plane>,
    resolution: Option<(usize, usize)>,
    variant: Option<Controller>,
    fixed: Option<f64>,
    svg: bool,
) -> Result<(), CliError> {
    let (cfg, _) = RunConfig::load(common.config.as_deref())?;
    let chain = cfg.chain()?;
    let plane = cfg.plane(plane)?;
    let spec = cfg.chart_spec(plane, fixed, resolution, cfg.bound_variant(variant)?)?;
    let grid = classify_chart(&spec, &chain, &cfg.cbf(), &cfg.envelope())?;
    let dir = out_dir(common, &cfg)?;
    write_file(&dir.join("chart.csv"), |w| grid.write_csv(w))?;
    let viewport = (spec.x_range, spec.y_range);
    let b = &grid.boundaries;
    for (stem, set) in [("plant", &b.plant), ("string_w0", &b.string_w0), ("string_wK", &b.string_wk)] {
        write_file(&dir.join(format!("chart_boundary_{stem}.csv")), |w| write_boundary_csv(w, plane, set, viewport))?;
    }
    if svg {
        write_file(&dir.join("chart.svg"), |w| grid.write_svg(w))?;
    }
    write_file(&dir.join("chart_meta.csv"), |w| {
        writeln!(w, "key,value")?;
        writeln!(w, "plane,{plane}")?;
        writeln!(w, "fixed,{}", spec.fixed)?;
        writeln!(w, "xi,{}", chain.cav.xi)?;
        let bounds = match spec.variant {
            BoundVariant::SpeedFeedback => "speed-feedback",
            BoundVariant::AccelFeedback => "accel-feedback",
        };
        writeln!(w, "bounds,{bounds}")?;
        match spec.gamma {
            GammaChoice::Optimal => writeln!(w, "gamma,optimal")?,
            GammaChoice::Value(g) => writeln!(w, "gamma,{g}")?,
        }
        writeln!(w, "lag_free_limit,{}", grid.lag_free_limit)
    })?;
    if grid.lag_free_limit {
        println!("note: lag-free actuator; safe region uses the xi -> 0 limit of the bounds");
    }
    let cells = grid.cells.len();
    let count = |f: fn(&ccc_core::safety::ChartCell<f64>) -> bool| grid.cells.iter().filter(|c| f(c)).count();
    println!(
        "{} chart at fixed = {}: {} cells, {} plant stable, {} string stable, {} safe, {} safe but not string stable",
        plane,
        spec.fixed,
        cells,
        count(|c| c.plant),
        count(|c| c.string),
        grid.safe_count(),
        grid.containment_violations()
    );
    Ok(())
}

pub fn critical_lag(common: &Common, sweep: Option<(f64, f64, usize)>) -> Result<(), CliError> {
    let (cfg, _) = RunConfig::load(common.config.as_deref())?;
    let cbf = cfg.cbf();
    let env = cfg.envelope();
    let kappa = cfg.cav.kappa;
    match sweep {
        None => {
            let xi = xi_critical(&cbf, &env, kappa, cfg.vehicles.d_st)?;
            println!("xi_cr = {xi:.4} s");
            println!("xi_cr_s={xi}");
        }
        Some((start, end, n)) => {
            println!("d_st,xi_cr");
            for i in 0..n {
                let d_st = if n == 1 { start } else { start + (end - start) * i as f64 / (n - 1) as f64 };
                println!("{d_st},{}", xi_critical(&cbf, &env, kappa, d_st)?);
            }
        }
    }
    Ok(())
}

pub fn boundaries(
    common: &Common,
    kind: BoundaryKind,
    plane: Option<Plane>,
    fixed: Option<f64>,
) -> Result<(), CliError> {
    let (cfg, _) = RunConfig::load(common.config.as_deref())?;
    let chain = cfg.chain()?;
    let plane = cfg.plane(plane)?;
    let fixed = cfg.fixed(plane, fixed);
    let set = match kind {
        BoundaryKind::Plant => plant_boundary(plane, fixed, &chain, &cfg.boundary_omegas()?)?,
        BoundaryKind::StringW0 => {
            BoundarySet { lines: string_boundary_w0(plane, fixed, &chain)?, curves: Vec::new() }
        }
        BoundaryKind::StringWk => BoundarySet {
            lines: Vec::new(),
            curves: string_boundary_wk(plane, fixed, &chain, &cfg.boundary_omegas()?, &cfg.boundary_ks())?,
        },
    };
    let dir = out_dir(common, &cfg)?;
    let path = dir.join(format!("boundaries_{}.csv", kind.file_stem()));
    write_file(&path, |w| write_boundary_csv(w, plane, &set, cfg.viewport(plane)))?;
    println!(
        "{} boundary in {} at fixed = {}: {} lines, {} curves, csv = {}",
        kind.file_stem(),
        plane,
        fixed,
        set.lines.len(),
        set.curves.len(),
        path.display()
    );
    Ok(())
}
