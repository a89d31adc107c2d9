use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::methods::{reconstruct, Method};
use super::report::{csv_error, ReconReport, Summary};
use super::evaluate;
use crate::data::PairedSample;
use crate::diffusion::Checkpoint;
use crate::error::{Error, Result};
use crate::sampler::SampleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    /// Grid over `w` for the first model.
    GuidanceWeight,
    /// Grid over the number of sampling steps for the first model.
    StepCount,
    /// Grid over sampling steps for a model with WTConv and one without.
    Wtconv,
}

impl AblationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationKind::GuidanceWeight => "guidance-weight",
            AblationKind::StepCount => "step-count",
            AblationKind::Wtconv => "wtconv",
        }
    }

    fn axis(&self) -> &'static str {
        match self {
            AblationKind::GuidanceWeight => "guidance weight w",
            AblationKind::StepCount | AblationKind::Wtconv => "sampling steps",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guidance-weight" => Ok(AblationKind::GuidanceWeight),
            "step-count" => Ok(AblationKind::StepCount),
            "wtconv" => Ok(AblationKind::Wtconv),
            _ => Err(Error::invalid(format!(
                "unknown ablation {s:?} (expected guidance-weight, step-count or wtconv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelEntry<'a> {
    pub label: &'a str,
    pub checkpoint: &'a Checkpoint,
}

pub struct AblationContext<'a> {
    pub models: Vec<ModelEntry<'a>>,
    pub test: &'a [PairedSample],
    /// Values not swept are taken from here.
    pub base: SampleConfig,
    /// Run reconstructions in parallel; timings are then not recorded.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: f64,
    pub model: String,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
    /// Full per-image report behind each row, same order.
    pub reports: Vec<ReconReport>,
}

fn step_count(v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::invalid(format!("step count must be a positive integer, got {v}")))
    }
}

/// Runs one reconstruction sweep over `grid`, scoring every configuration on
/// the whole test set.
pub fn ablate(kind: AblationKind, grid: &[f64], ctx: &AblationContext) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    if ctx.test.is_empty() {
        return Err(Error::invalid("ablation needs a non-empty test set"));
    }
    let models: Vec<ModelEntry> = match kind {
        AblationKind::GuidanceWeight | AblationKind::StepCount => {
            let first = ctx
                .models
                .first()
                .ok_or_else(|| Error::invalid(format!("{kind} ablation needs a trained checkpoint")))?;
            vec![*first]
        }
        AblationKind::Wtconv => {
            let on = ctx.models.iter().find(|m| m.checkpoint.config.model.wtconv);
            let off = ctx.models.iter().find(|m| !m.checkpoint.config.model.wtconv);
            match (on, off) {
                (Some(on), Some(off)) => vec![*on, *off],
                _ => {
                    return Err(Error::invalid(
                        "wtconv ablation needs two checkpoints, one trained with WTConv and one without",
                    ))
                }
            }
        }
    };
    let refs: Vec<_> = ctx.test.iter().map(|s| s.target.clone()).collect();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for entry in &models {
        let schedule = entry.checkpoint.schedule()?;
        for &value in grid {
            let cfg = match kind {
                AblationKind::GuidanceWeight => SampleConfig {
                    guidance_weight: value,
                    ..ctx.base
                },
                AblationKind::StepCount | AblationKind::Wtconv => SampleConfig {
                    n_steps: step_count(value)?,
                    ..ctx.base
                },
            };
            cfg.validate(&schedule)?;
            let method = Method::Diffusion {
                model: entry.checkpoint,
                schedule: &schedule,
                config: cfg,
            };
            let recon = reconstruct(&method, ctx.test, ctx.parallel)?;
            let label = format!("{}:{}={value}", entry.label, kind);
            let mut eval = evaluate(&recon.images, &refs, &label)?.with_seconds(recon.seconds.as_deref())?;
            eval.report.config = toml::Table::try_from(cfg).map_err(|e| Error::invalid(e.to_string()))?;
            rows.push(AblationRow {
                value,
                model: entry.label.to_string(),
                summary: eval.report.summary(),
            });
            reports.push(eval.report);
        }
    }
    Ok(AblationTable { kind, rows, reports })
}

const HEADER: [&str; 10] = [
    "kind",
    "value",
    "model",
    "count",
    "mean_psnr_db",
    "std_psnr_db",
    "mean_ssim",
    "std_ssim",
    "mean_seconds",
    "total_seconds",
];

impl AblationTable {
    pub fn rows_for<'s>(&'s self, model: &'s str) -> impl Iterator<Item = &'s AblationRow> + 's {
        self.rows.iter().filter(move |r| r.model == model)
    }

    pub fn row(&self, model: &str, value: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == model && r.value == value)
    }

    /// CSV with header `kind,value,model,count,mean_psnr_db,std_psnr_db,
    /// mean_ssim,std_ssim,mean_seconds,total_seconds`; time columns are empty
    /// for parallel runs.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(HEADER).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            let s = &r.summary;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                self.kind.to_string(),
                r.value.to_string(),
                r.model.clone(),
                s.count.to_string(),
                s.mean_psnr.to_string(),
                s.std_psnr.to_string(),
                s.mean_ssim.to_string(),
                s.std_ssim.to_string(),
                opt(s.mean_seconds),
                opt(s.mean_seconds.map(|m| m * s.count as f64)),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Mean PSNR against grid position, one line per model, as SVG.
    pub fn write_plot(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut grid: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !grid.contains(&r.value) {
                grid.push(r.value);
            }
        }
        let finite: Vec<f64> = self.rows.iter().map(|r| r.summary.mean_psnr).filter(|v| v.is_finite()).collect();
        let (lo, hi) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo <= hi { (lo - 1.0, hi + 1.0) } else { (0.0, 1.0) };
        let plot_err = |e: String| Error::format(path, e);

        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{} ablation", self.kind), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(-0.5f64..(grid.len() as f64 - 0.5), lo..hi)
            .map_err(|e| plot_err(e.to_string()))?;
        let labels = grid.clone();
        chart
            .configure_mesh()
            .x_desc(self.kind.axis())
            .y_desc("mean PSNR (dB)")
            .x_labels(grid.len())
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                    labels[i as usize].to_string()
                } else {
                    String::new()
                }
            })
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        let mut models: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        for (k, model) in models.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let pts: Vec<(f64, f64)> = self
                .rows_for(model)
                .filter(|r| r.summary.mean_psnr.is_finite())
                .map(|r| (grid.iter().position(|&g| g == r.value).unwrap() as f64, r.summary.mean_psnr))
                .collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(*model)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(|e| plot_err(e.to_string()))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64, model: &str, psnr: f64) -> AblationRow {
        AblationRow {
            value,
            model: model.into(),
            summary: Summary {
                count: 2,
                mean_psnr: psnr,
                std_psnr: 0.5,
                mean_ssim: 0.8,
                std_ssim: 0.01,
                mean_seconds: Some(0.25),
            },
        }
    }

    #[test]
    fn kind_parses_its_own_name() {
        for k in [AblationKind::GuidanceWeight, AblationKind::StepCount, AblationKind::Wtconv] {
            assert_eq!(k.to_string().parse::<AblationKind>().unwrap(), k);
        }
        assert!("steps".parse::<AblationKind>().is_err());
    }

    #[test]
    fn step_counts_must_be_integers() {
        assert_eq!(step_count(50.0).unwrap(), 50);
        assert!(step_count(0.0).is_err());
        assert!(step_count(2.5).is_err());
    }

    #[test]
    fn table_and_plot_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let table = AblationTable {
            kind: AblationKind::Wtconv,
            rows: vec![row(50.0, "on", 30.0), row(200.0, "on", 31.0), row(50.0, "off", 28.0), row(200.0, "off", 30.5)],
            reports: vec![],
        };
        let csv_path = dir.path().join("t.csv");
        table.write_csv(&csv_path).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with(&HEADER.join(",")));
        assert!(text.contains("wtconv,50,on,2,30,0.5,0.8,0.01,0.25,0.5"), "{text}");
        let svg = dir.path().join("t.svg");
        table.write_plot(&svg).unwrap();
        let s = fs::read_to_string(&svg).unwrap();
        assert!(s.starts_with("<svg") && s.contains("<polyline"), "{}", &s[..s.len().min(200)]);
        assert_eq!(table.row("off", 200.0).unwrap().summary.mean_psnr, 30.5);
        assert_eq!(table.rows_for("on").count(), 2);
    }
}
