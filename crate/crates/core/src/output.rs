//! CSV tables and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::to_config_text;
use crate::error::Result;
use crate::harness::{ExperimentResult, ScenarioConfig};

pub const RMSE_CURVE_HEADER: &str = "k,filter_id,I_w,rmse_m";
pub const OVERALL_HEADER: &str = "filter_id,I_w,N_s,overall_rmse_m,time_per_step_ms,isolated_or_tl";
pub const DELTA_HEADER: &str = "delta_Iw,filter_id,delta_rmse_m";

/// Six significant digits, fixed notation for magnitudes in `[1e-5, 1e6)`,
/// scientific otherwise. Independent of locale.
pub fn fmt_sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .expect("exponent in scientific format");
    if (-5..6).contains(&exp) {
        format!("{:.*}", (5 - exp) as usize, x)
    } else {
        sci
    }
}

/// File names written into the output directory.
pub struct BundlePaths {
    pub rmse_curve: PathBuf,
    pub overall: PathBuf,
    pub delta: PathBuf,
    pub manifest: PathBuf,
}

impl BundlePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            rmse_curve: dir.join("rmse_curve.csv"),
            overall: dir.join("overall.csv"),
            delta: dir.join("delta.csv"),
            manifest: dir.join("run_manifest.txt"),
        }
    }
}

pub fn rmse_curve_csv(r: &ExperimentResult) -> String {
    let mut s = String::from(RMSE_CURVE_HEADER);
    s.push('\n');
    for c in &r.cells {
        let id = c.filter.id();
        let iw = fmt_sig6(c.i_w);
        for (k, v) in c.metrics.rmse_per_step.iter().enumerate() {
            s.push_str(&format!("{},{id},{iw},{}\n", k + 1, fmt_sig6(*v)));
        }
    }
    s
}

/// `timing = false` writes zeros in the time column so repeated runs are byte-identical.
pub fn overall_csv(r: &ExperimentResult, timing: bool) -> String {
    let mut s = String::from(OVERALL_HEADER);
    s.push('\n');
    for c in &r.cells {
        let n = c.filter.particles().map_or_else(String::new, |n| n.to_string());
        let t = if timing { c.metrics.time_per_step_ms } else { 0.0 };
        s.push_str(&format!(
            "{},{},{n},{},{},{}\n",
            c.filter.id(),
            fmt_sig6(c.i_w),
            fmt_sig6(c.metrics.overall_rmse),
            fmt_sig6(t),
            if c.filter.transfer { "tl" } else { "isolated" },
        ));
    }
    s
}

pub fn delta_csv(r: &ExperimentResult, i_star: f64) -> String {
    let mut s = String::from(DELTA_HEADER);
    s.push('\n');
    for (d, id, v) in r.deltas(i_star) {
        s.push_str(&format!("{},{id},{}\n", fmt_sig6(d), fmt_sig6(v)));
    }
    s
}

/// Config echo (parseable as a config file) preceded by provenance comments.
pub fn manifest_text(cfg: &ScenarioConfig, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    s.push_str(&format!("# tlpf {}\n", env!("CARGO_PKG_VERSION")));
    s.push_str(&format!("# code_version = {}\n", env!("CARGO_PKG_VERSION")));
    for (k, v) in extra {
        s.push_str(&format!("# {k} = {v}\n"));
    }
    s.push_str(&to_config_text(cfg));
    s
}

/// Writes the three CSV tables and the manifest into `dir`.
pub fn write_bundle(
    dir: &Path,
    cfg: &ScenarioConfig,
    r: &ExperimentResult,
    timing: bool,
    extra: &[(&str, String)],
) -> Result<BundlePaths> {
    fs::create_dir_all(dir)?;
    let p = BundlePaths::in_dir(dir);
    let write = |path: &Path, text: &str| -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
        Ok(())
    };
    write(&p.rmse_curve, &rmse_curve_csv(r))?;
    write(&p.overall, &overall_csv(r, timing))?;
    write(&p.delta, &delta_csv(r, cfg.i_source))?;
    write(&p.manifest, &manifest_text(cfg, extra))?;
    Ok(p)
}
