use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ccc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("CCC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

/// Value following `key = ` in a summary line.
fn summary_value(line: &str, key: &str) -> f64 {
    let rest = line.split(&format!("{key} = ")).nth(1).unwrap_or_else(|| panic!("{key} missing in {line:?}"));
    rest.split([' ', ',']).next().unwrap().parse().unwrap()
}

fn read_csv(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

#[test]
fn filtered_run_with_unsafe_gains_stays_safe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("unsafe_gains.toml");
    let o = ccc(&["simulate", "--config", cfg.to_str().unwrap(), "--variant", "filtered"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("filtered:"), "{line}");
    assert!(summary_value(&line, "min_h") >= -1e-3, "{line}");
    assert!(summary_value(&line, "filter_active") > 0.0, "{line}");
    let (header, rows) = read_csv(&dir.path().join("trajectory_filtered.csv"));
    assert_eq!(header, "t,D0,v0,a0,u_nom,u_safe,u_app,h,h_e,D1,v1,v_head");
    assert_eq!(rows.len(), 4001);
}

#[test]
fn nominal_run_with_unsafe_gains_violates_the_barrier() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("unsafe_gains.toml");
    let o = ccc(&["simulate", "--config", cfg.to_str().unwrap(), "--variant", "nominal"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(summary_value(&stdout(&o), "min_h") < 0.0);
}

#[test]
fn missing_data_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scenario.head]\ntype = \"data\"\npath = \"no_such_head.csv\"\n");
    let o = ccc(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_head.csv"), "{}", stderr(&o));
}

#[test]
fn bundled_data_driven_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("data_driven.toml");
    let o = ccc(&["simulate", "--config", cfg.to_str().unwrap(), "--variant", "filtered"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(summary_value(&stdout(&o), "min_h") >= -1e-3);
}

#[test]
fn coarse_step_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["simulate", "--dt", "0.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dt"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[cav]\nkappa = 0.6\nbogus = 1\n");
    let o = ccc(&["critical-lag", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn two_by_two_chart_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["chart", "--resolution", "2x2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("chart.csv"));
    assert_eq!(header, "x,y,plant,string,safe,sup_gain");
    assert_eq!(rows.len(), 4);
    let corners: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(corners, [("0", "0"), ("2", "0"), ("0", "1.5"), ("2", "1.5")]);
}

#[test]
fn svg_is_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["chart", "--resolution", "8x6", "--svg"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("chart.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
}

#[test]
fn lag_free_chart_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("lag_free_chart.toml");
    let o = ccc(&["chart", "--config", cfg.to_str().unwrap(), "--resolution", "20x15"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("lag-free"));
    let meta = std::fs::read_to_string(dir.path().join("chart_meta.csv")).unwrap();
    assert!(meta.contains("lag_free_limit,true"), "{meta}");
    let (_, rows) = read_csv(&dir.path().join("chart.csv"));
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().any(|r| r[4] == "1"));
}

#[test]
fn b1_bn_chart_matches_closed_form_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["chart", "--plane", "B1-BN", "--fixed", "0.6", "--resolution", "31x21"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (xi, kappa_sf, v_bar, a_min) = (0.2, 0.6, 15.0, 7.0);
    let (kappa, d_st, d_sf) = (0.6, 5.0, 1.0);
    let margin = kappa * (d_st - d_sf);
    let upper = (1.0 - xi * kappa_sf) * (1.0f64 - xi * kappa_sf) / (4.0 * xi);
    let (_, rows) = read_csv(&dir.path().join("chart.csv"));
    assert_eq!(rows.len(), 31 * 21);
    let mut safe = 0;
    for r in &rows {
        let (b1, b2): (f64, f64) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        let n1 = (kappa_sf - xi * kappa_sf * kappa_sf - b1).abs() + b2;
        let lower = (n1 * v_bar + xi * kappa_sf * a_min) / margin;
        if (lower - 0.6).abs() < 1e-9 {
            continue;
        }
        let expected = lower <= 0.6 && 0.6 <= upper;
        assert_eq!(r[4] == "1", expected, "cell ({b1}, {b2}): lower {lower}");
        safe += usize::from(expected);
    }
    assert!(safe > 0);
}

#[test]
fn critical_lag_reference_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["critical-lag"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("xi_cr = 0.3081 s"), "{text}");
    let value: f64 = text.lines().find_map(|l| l.strip_prefix("xi_cr_s=")).unwrap().parse().unwrap();
    // 1/(κ_sf + 2√(κ_sf a_min / (κ (D_st − D_sf))))
    let expected = 1.0 / (0.6 + 2.0 * (0.6f64 * 7.0 / (0.6 * 4.0)).sqrt());
    assert!((value - expected).abs() < 1e-12);
}

#[test]
fn critical_lag_sweep_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["critical-lag", "--sweep-dst", "1.5:20:12"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("d_st,xi_cr"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 12);
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
}

#[test]
fn standstill_distance_equal_to_safe_distance_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[vehicles]\nd_st = 1.0\n");
    let o = ccc(&["critical-lag", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("D_sf"), "{}", stderr(&o));
}

#[test]
fn string_boundaries_have_twelve_wave_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["boundaries", "--type", "string-wK"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("boundaries_string_wK.csv"));
    assert_eq!(header, "plane,param1,param2,x,y");
    let mut ks: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    ks.dedup();
    ks.sort();
    ks.dedup();
    assert_eq!(ks.len(), 12);
}

#[test]
fn plant_boundary_in_b1_bn_plane_is_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccc(&["boundaries", "--type", "plant", "--plane", "B1-BN", "--fixed", "0.6"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1 lines, 0 curves"), "{}", stdout(&o));
}

#[test]
fn empty_wave_number_grid_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[chart.boundary]\nks = []\n");
    let o = ccc(&["boundaries", "--config", cfg.to_str().unwrap(), "--type", "string-wK"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        assert!(ccc(&["simulate"], dir.path()).status.success());
        assert!(ccc(&["chart", "--resolution", "24x16", "--svg"], dir.path()).status.success());
        assert!(ccc(&["boundaries", "--type", "string-w0"], dir.path()).status.success());
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 8);
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs");
    }
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ccc"))
        .args(["boundaries", "--type", "plant"])
        .env("CCC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("boundaries_plant.csv").exists());
}
