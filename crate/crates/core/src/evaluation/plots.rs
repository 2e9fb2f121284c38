//! Plot artifacts: latent-space scatter and per-instance AP bars, each with
//! a machine-readable JSON sidecar so plots can be regenerated or consumed
//! without parsing pixels.

use super::{EvalError, EvalReport, PcaProjection};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Data behind a 3D latent scatter plot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentScatter {
    pub kind: String,
    /// One `[x, y, z]` triple per sample (zero-padded if the projection
    /// had fewer than three components).
    pub points: Vec<[f64; 3]>,
    /// Instance ID per sample (colors the scatter).
    pub labels: Vec<u32>,
    pub explained_variance: Vec<f64>,
}

impl LatentScatter {
    pub fn from_projection(projection: &PcaProjection, labels: &[u32]) -> Self {
        let points = projection
            .coords
            .rows()
            .into_iter()
            .map(|row| {
                let mut p = [0.0; 3];
                for (j, v) in row.iter().take(3).enumerate() {
                    p[j] = *v;
                }
                p
            })
            .collect();
        Self {
            kind: "latent_scatter".to_string(),
            points,
            labels: labels.to_vec(),
            explained_variance: projection.explained_variance.clone(),
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> EvalError {
    EvalError::PlotIo(e.to_string())
}

/// Registers the bundled font with the pure-Rust text backend (exactly once).
fn ensure_font() {
    static FONT: std::sync::Once = std::sync::Once::new();
    FONT.call_once(|| {
        let bytes: &'static [u8] = include_bytes!("../../assets/DejaVuSans.ttf");
        let _ = plotters::style::register_font("sans-serif", plotters::style::FontStyle::Normal, bytes);
    });
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Renders `latent_scatter.png` + `latent_scatter.json` into `out_dir`.
pub fn emit_latent_scatter(
    scatter: &LatentScatter,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), EvalError> {
    if scatter.points.is_empty() || scatter.points.len() != scatter.labels.len() {
        return Err(EvalError::Empty);
    }
    ensure_font();
    std::fs::create_dir_all(out_dir).map_err(io_err)?;
    let png_path = out_dir.join("latent_scatter.png");
    let json_path = out_dir.join("latent_scatter.json");

    {
        let root = BitMapBackend::new(&png_path, (900, 700)).into_drawing_area();
        root.fill(&WHITE).map_err(io_err)?;
        let xr = axis_range(scatter.points.iter().map(|p| p[0]));
        let yr = axis_range(scatter.points.iter().map(|p| p[1]));
        let zr = axis_range(scatter.points.iter().map(|p| p[2]));
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .caption("Latent space (PCA)", ("sans-serif", 24))
            .build_cartesian_3d(xr.0..xr.1, yr.0..yr.1, zr.0..zr.1)
            .map_err(io_err)?;
        chart.configure_axes().draw().map_err(io_err)?;

        let mut distinct: Vec<u32> = scatter.labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let color_of = |label: u32| {
            let idx = distinct.binary_search(&label).unwrap_or(0);
            Palette99::pick(idx).mix(0.9)
        };
        chart
            .draw_series(
                scatter
                    .points
                    .iter()
                    .zip(&scatter.labels)
                    .map(|(p, &l)| Circle::new((p[0], p[1], p[2]), 4, color_of(l).filled())),
            )
            .map_err(io_err)?;
        root.present().map_err(io_err)?;
    }

    let json = serde_json::to_string_pretty(scatter).map_err(io_err)?;
    std::fs::write(&json_path, json).map_err(io_err)?;
    Ok((png_path, json_path))
}

#[derive(Debug, Serialize)]
struct MapBarsSidecar<'a> {
    kind: &'a str,
    report: &'a EvalReport,
}

/// Renders `map_by_env.png` + `map_by_env.json` (per-instance AP bars with
/// the overall mAP in the caption).
pub fn emit_map_bars(report: &EvalReport, out_dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    if report.per_instance_ap.is_empty() {
        return Err(EvalError::Empty);
    }
    ensure_font();
    std::fs::create_dir_all(out_dir).map_err(io_err)?;
    let png_path = out_dir.join("map_by_env.png");
    let json_path = out_dir.join("map_by_env.json");

    {
        let root = BitMapBackend::new(&png_path, (900, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(io_err)?;
        let n = report.per_instance_ap.len();
        let caption = format!("Per-instance AP (mAP = {:.3})", report.map_score);
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .caption(caption, ("sans-serif", 22))
            .build_cartesian_2d(0f64..n as f64, 0f64..1.05f64)
            .map_err(io_err)?;
        chart
            .configure_mesh()
            .y_desc("AP")
            .x_desc("instance")
            .disable_x_mesh()
            .draw()
            .map_err(io_err)?;
        chart
            .draw_series(report.per_instance_ap.values().enumerate().map(|(i, &ap)| {
                Rectangle::new(
                    [(i as f64 + 0.15, 0.0), (i as f64 + 0.85, ap)],
                    BLUE.mix(0.6).filled(),
                )
            }))
            .map_err(io_err)?;
        root.present().map_err(io_err)?;
    }

    let sidecar = MapBarsSidecar {
        kind: "map_by_env",
        report,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(io_err)?;
    std::fs::write(&json_path, json).map_err(io_err)?;
    Ok((png_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn scatter_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let scatter = LatentScatter {
            kind: "latent_scatter".into(),
            points: vec![[0.0, 0.0, 0.0], [1.0, 2.0, -1.0], [0.5, -0.5, 0.2]],
            labels: vec![0, 1, 0],
            explained_variance: vec![1.0, 0.5, 0.1],
        };
        let (png, json) = emit_latent_scatter(&scatter, dir.path()).unwrap();
        assert!(png.exists() && json.exists());
        let parsed: LatentScatter =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(parsed.points.len(), 3);
        assert_eq!(parsed.kind, "latent_scatter");
    }

    #[test]
    fn empty_scatter_creates_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let scatter = LatentScatter {
            kind: "latent_scatter".into(),
            points: vec![],
            labels: vec![],
            explained_variance: vec![],
        };
        assert!(emit_latent_scatter(&scatter, dir.path()).is_err());
        assert!(!dir.path().join("latent_scatter.png").exists());
    }

    #[test]
    fn map_bars_written_from_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut per_instance_ap = BTreeMap::new();
        per_instance_ap.insert(0u32, 1.0);
        per_instance_ap.insert(1u32, 0.5);
        let report = EvalReport {
            map_score: 0.75,
            per_instance_ap,
            diff_instance_rate: 0.125,
            diff_class_rate: 0.125,
            success_rate: 0.75,
            trials: 1,
            k: 4,
            counts: super::super::EvalCounts {
                successes: 6,
                diff_instance: 1,
                diff_class: 1,
                total: 8,
            },
        };
        let (png, json) = emit_map_bars(&report, dir.path()).unwrap();
        assert!(png.exists());
        let text = std::fs::read_to_string(json).unwrap();
        assert!(text.contains("\"map_by_env\""));
        assert!(text.contains("\"map_score\""));
    }
}
