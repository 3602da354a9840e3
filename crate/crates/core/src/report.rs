//! Record, table, plot-series, and dump emission.
//!
//! `run` writes one JSON record plus one CSV per emitted table (columns
//! mirror the experiment's natural table layout), plot-ready data series,
//! and baseline distribution dumps. Human tables round to 6 significant
//! digits; record JSON keeps full 17-digit floats.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiments::{ExperimentRecord, ExperimentResults};
use crate::json;
use crate::model::OutputDistribution;

/// Plot-ready series: x values match the experiment grid exactly; `y_err`
/// is present iff the record averages more than one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub y_err: Option<Vec<f64>>,
    pub axis_labels: (String, String),
}

impl PlotSeries {
    fn to_dat(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.name);
        let _ = writeln!(out, "# x: {}  y: {}", self.axis_labels.0, self.axis_labels.1);
        for (i, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
            match &self.y_err {
                Some(err) => {
                    let _ = writeln!(out, "{x:.9e} {y:.9e} {:.9e}", err[i]);
                }
                None => {
                    let _ = writeln!(out, "{x:.9e} {y:.9e}");
                }
            }
        }
        out
    }

    fn file_name(&self) -> String {
        format!("{}.dat", self.name)
    }
}

/// Write the full record as JSON. Returns the file path.
pub fn write_record(record: &ExperimentRecord, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("record.json");
    json::write_file(record, &path)?;
    Ok(path)
}

/// Load a record written by [`write_record`].
pub fn load_record(path: &Path) -> Result<ExperimentRecord> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad record file: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Write the summary CSV tables for a record. Returns the written paths.
pub fn write_tables(record: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    match &record.results {
        ExperimentResults::EliminationSweep { summary, .. } => {
            let mut csv = String::from("epsilon,kl,js,regime\n");
            for row in summary {
                let _ = writeln!(
                    csv,
                    "{:.5e},{:.5e},{:.5e},{}",
                    row.epsilon, row.kl_mean, row.js_mean, row.regime
                );
            }
            let path = dir.join("elimination_summary.csv");
            write_text(&path, &csv)?;
            paths.push(path);
        }
        ExperimentResults::MutationSweep { summary, .. } => {
            let mut csv = String::from("scale,alpha,kl,js,rf\n");
            for row in summary {
                let _ = writeln!(
                    csv,
                    "{},{:.5e},{:.5e},{:.5e},{:.5e}",
                    row.scale, row.alpha, row.kl_mean, row.js_mean, row.rf_mean
                );
            }
            let path = dir.join("mutation_summary.csv");
            write_text(&path, &csv)?;
            paths.push(path);
        }
        ExperimentResults::RfComparison { summary, .. } => {
            let mut csv = String::from("mechanism,post_reset_divergence,rf\n");
            for row in summary {
                let _ = writeln!(
                    csv,
                    "{},{:.5e},{:.5e}",
                    row.mechanism, row.post_reset_divergence, row.rf
                );
            }
            let path = dir.join("rf_comparison.csv");
            write_text(&path, &csv)?;
            paths.push(path);
        }
        ExperimentResults::BaselineStability { sprints } => {
            let mut csv = String::from("sprint,mean_entropy,std_entropy,max_entropy\n");
            for row in sprints {
                let _ = writeln!(
                    csv,
                    "{},{:.5e},{:.5e},{:.5e}",
                    row.sprint, row.mean_entropy, row.std_entropy, row.max_entropy
                );
            }
            let path = dir.join("baseline_stability.csv");
            write_text(&path, &csv)?;
            paths.push(path);
        }
        ExperimentResults::ScaleSweep { summary, .. } => {
            let mut csv = String::from("scale,mechanism,recoverability_pct\n");
            for row in summary {
                let _ = writeln!(
                    csv,
                    "{},{},{:.5e}",
                    row.scale, row.mechanism, row.recoverability_pct
                );
            }
            let path = dir.join("scale_sweep.csv");
            write_text(&path, &csv)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Build the plot series a record supports, plus the names of any expected
/// series the record cannot fill.
pub fn plot_series(record: &ExperimentRecord) -> (Vec<PlotSeries>, Vec<String>) {
    let mut series = Vec::new();
    let mut missing = Vec::new();
    let multi_seed = record.spec.seeds.len() > 1;
    match &record.results {
        ExperimentResults::EliminationSweep { summary, .. } => {
            if summary.is_empty() {
                missing.push("kl_vs_epsilon".to_string());
                missing.push("js_vs_epsilon".to_string());
            } else {
                let x: Vec<f64> = summary.iter().map(|r| r.epsilon).collect();
                series.push(PlotSeries {
                    name: "kl_vs_epsilon".into(),
                    x: x.clone(),
                    y: summary.iter().map(|r| r.kl_mean).collect(),
                    y_err: multi_seed.then(|| summary.iter().map(|r| r.kl_std).collect()),
                    axis_labels: ("elimination rate".into(), "post-reset kl (nats)".into()),
                });
                series.push(PlotSeries {
                    name: "js_vs_epsilon".into(),
                    x,
                    y: summary.iter().map(|r| r.js_mean).collect(),
                    y_err: multi_seed.then(|| summary.iter().map(|r| r.js_std).collect()),
                    axis_labels: ("elimination rate".into(), "post-reset js (nats)".into()),
                });
            }
        }
        ExperimentResults::MutationSweep { summary, .. } => {
            if summary.is_empty() {
                missing.push("kl_vs_alpha_per_scale".to_string());
            }
            for tag in &record.spec.scales {
                let rows: Vec<_> = summary.iter().filter(|r| &r.scale == tag).collect();
                if rows.is_empty() {
                    missing.push(format!("kl_vs_alpha_{tag}"));
                    continue;
                }
                series.push(PlotSeries {
                    name: format!("kl_vs_alpha_{tag}"),
                    x: rows.iter().map(|r| r.alpha).collect(),
                    y: rows.iter().map(|r| r.kl_mean).collect(),
                    y_err: multi_seed.then(|| rows.iter().map(|r| r.kl_std).collect()),
                    axis_labels: ("mutation intensity".into(), "post-reset kl (nats)".into()),
                });
            }
        }
        ExperimentResults::RfComparison { .. } => {}
        ExperimentResults::BaselineStability { sprints } => {
            if sprints.is_empty() {
                missing.push("entropy_per_sprint".to_string());
            } else {
                series.push(PlotSeries {
                    name: "entropy_per_sprint".into(),
                    x: sprints.iter().map(|r| r.sprint as f64).collect(),
                    y: sprints.iter().map(|r| r.mean_entropy).collect(),
                    y_err: Some(sprints.iter().map(|r| r.std_entropy).collect()),
                    axis_labels: ("sprint".into(), "baseline entropy (nats)".into()),
                });
            }
        }
        ExperimentResults::ScaleSweep { summary, .. } => {
            if summary.is_empty() {
                missing.push("rf_per_scale".to_string());
            }
            for mech in crate::experiments::Mechanism::ALL {
                let rows: Vec<_> = summary.iter().filter(|r| r.mechanism == mech).collect();
                if rows.is_empty() {
                    missing.push(format!("rf_per_scale_{mech}"));
                    continue;
                }
                series.push(PlotSeries {
                    name: format!("rf_per_scale_{mech}"),
                    x: (0..rows.len()).map(|i| i as f64).collect(),
                    y: rows.iter().map(|r| r.recoverability_pct).collect(),
                    y_err: None,
                    axis_labels: (
                        format!("scale index ({})", record.spec.scales.join(", ")),
                        "recoverability (%)".into(),
                    ),
                });
            }
        }
    }
    (series, missing)
}

/// Write one delimited data file per plot series. Missing series are logged
/// and reported in the result.
pub fn emit_plot_data(record: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let (series, missing) = plot_series(record);
    if !missing.is_empty() {
        log::warn!("record incomplete; skipping plot series: {}", missing.join(", "));
    }
    let mut paths = Vec::new();
    for s in &series {
        let path = dir.join(s.file_name());
        write_text(&path, &s.to_dat())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Write baseline distribution dumps (one JSON file per scale).
pub fn write_dumps(record: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for info in &record.baselines {
        let path = dir.join(format!("dumps/baseline_{}.json", info.scale));
        json::write_file(&info.distributions, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Load a distribution dump written by [`write_dumps`] (a JSON array of
/// prompt_id / probs objects).
pub fn load_distributions(path: &Path) -> Result<Vec<OutputDistribution>> {
    let text = fs::read_to_string(path)?;
    let raw: Vec<OutputDistribution> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad dump file: {e}")))?;
    // Re-validate through the constructor so invariants hold for metrics.
    raw.into_iter()
        .map(|d| OutputDistribution::new(d.prompt_id, d.probs))
        .collect()
}

/// Write record, tables, plot data, and dumps. Returns all written paths.
pub fn write_outputs(record: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = vec![write_record(record, dir)?];
    paths.extend(write_tables(record, dir)?);
    paths.extend(emit_plot_data(record, dir)?);
    paths.extend(write_dumps(record, dir)?);
    Ok(paths)
}

/// Render a human-readable summary of a record.
pub fn render_report(record: &ExperimentRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", record.spec.kind);
    let _ = writeln!(out, "spec hash:  {}", record.spec_hash);
    for info in &record.baselines {
        let _ = writeln!(
            out,
            "baseline [{}]: fingerprint {}  mean entropy {:.6}",
            info.scale,
            &info.fingerprint[..16],
            info.mean_entropy
        );
    }
    let _ = writeln!(out);
    match &record.results {
        ExperimentResults::EliminationSweep {
            summary,
            epsilon_desk,
            ..
        } => {
            let _ = writeln!(out, "{:>9} {:>13} {:>13}  regime", "epsilon", "kl", "js");
            for row in summary {
                let _ = writeln!(
                    out,
                    "{:>9.3} {:>13.6e} {:>13.6e}  {}",
                    row.epsilon, row.kl_mean, row.js_mean, row.regime
                );
            }
            match epsilon_desk {
                Some(e) => {
                    let _ = writeln!(out, "exact regime from epsilon = {e}");
                }
                None => {
                    let _ = writeln!(out, "no exact regime reached on this grid");
                }
            }
        }
        ExperimentResults::MutationSweep { summary, .. } => {
            let _ = writeln!(
                out,
                "{:>6} {:>9} {:>13} {:>13} {:>6}",
                "scale", "alpha", "kl", "js", "rf"
            );
            for row in summary {
                let _ = writeln!(
                    out,
                    "{:>6} {:>9.4} {:>13.6e} {:>13.6e} {:>6.3}",
                    row.scale, row.alpha, row.kl_mean, row.js_mean, row.rf_mean
                );
            }
        }
        ExperimentResults::RfComparison { cells, summary } => {
            let _ = writeln!(out, "{:>10} {:>22} {:>6}", "mechanism", "post-reset kl", "rf");
            for row in summary {
                let _ = writeln!(
                    out,
                    "{:>10} {:>22.6e} {:>6.3}",
                    row.mechanism.to_string(),
                    row.post_reset_divergence,
                    row.rf
                );
            }
            let _ = writeln!(out);
            for cell in cells {
                let _ = writeln!(
                    out,
                    "seed {} {:<9} regime {:<8} ils_avg {:.6e} flags [{}]{}",
                    cell.seed,
                    cell.mechanism.to_string(),
                    cell.recoverability.regime.to_string(),
                    cell.ils.average,
                    cell.ils
                        .flags
                        .iter()
                        .cloned()
                        .collect::<Vec<_>>()
                        .join(", "),
                    match &cell.svar {
                        Some(s) => format!("  svar {:.6e}", s.mean_divergence),
                        None => String::new(),
                    }
                );
            }
        }
        ExperimentResults::BaselineStability { sprints } => {
            let _ = writeln!(
                out,
                "{:>6} {:>12} {:>12} {:>12} {:>14}",
                "sprint", "mean", "std", "max", "kl vs first"
            );
            for row in sprints {
                let _ = writeln!(
                    out,
                    "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>14.6e}",
                    row.sprint, row.mean_entropy, row.std_entropy, row.max_entropy, row.kl_vs_first
                );
            }
        }
        ExperimentResults::ScaleSweep { summary, .. } => {
            let _ = writeln!(out, "{:>6} {:>10} {:>18}", "scale", "mechanism", "recoverability %");
            for row in summary {
                let _ = writeln!(
                    out,
                    "{:>6} {:>10} {:>18.2}",
                    row.scale,
                    row.mechanism.to_string(),
                    row.recoverability_pct
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run, ExperimentKind, ExperimentSpec};

    fn tiny_elimination_record() -> ExperimentRecord {
        let mut spec = ExperimentSpec::new(ExperimentKind::EliminationSweep);
        spec.grid = vec![0.0, 0.5, 1.0];
        spec.seeds = vec![11, 23];
        spec.prompt_count = 16;
        spec.held_out = 4;
        spec.pretrain_steps = 40;
        spec.task_steps = 40;
        spec.objective_count = 3;
        run(&spec).unwrap()
    }

    #[test]
    fn csv_headers_and_x_grid() {
        let dir = tempfile::tempdir().unwrap();
        let record = tiny_elimination_record();
        let paths = write_tables(&record, dir.path()).unwrap();
        let csv = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(csv.starts_with("epsilon,kl,js,regime\n"));
        assert_eq!(csv.lines().count(), 4);

        let (series, missing) = plot_series(&record);
        assert!(missing.is_empty());
        assert_eq!(series[0].x, record.spec.grid);
        // Two seeds, so error bars exist.
        assert!(series[0].y_err.is_some());
    }

    #[test]
    fn single_seed_drops_error_bars() {
        let mut spec = ExperimentSpec::new(ExperimentKind::EliminationSweep);
        spec.grid = vec![0.0, 1.0];
        spec.seeds = vec![11];
        spec.prompt_count = 16;
        spec.held_out = 4;
        spec.pretrain_steps = 40;
        spec.task_steps = 40;
        spec.objective_count = 3;
        let record = run(&spec).unwrap();
        let (series, _) = plot_series(&record);
        assert!(series[0].y_err.is_none());
    }

    #[test]
    fn record_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let record = tiny_elimination_record();
        let path = write_record(&record, dir.path()).unwrap();
        let loaded = load_record(&path).unwrap();
        assert_eq!(record, loaded);
    }

    #[test]
    fn dumps_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let record = tiny_elimination_record();
        let paths = write_dumps(&record, dir.path()).unwrap();
        let loaded = load_distributions(&paths[0]).unwrap();
        assert_eq!(loaded, record.baselines[0].distributions);
    }

    #[test]
    fn report_renders_every_kind() {
        let record = tiny_elimination_record();
        let text = render_report(&record);
        assert!(text.contains("elimination_sweep"));
        assert!(text.contains("epsilon"));
    }
}
