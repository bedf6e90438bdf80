//! Ablation grids: one multimodal run per (cell, seed), all grown from the same stage-1
//! weights, with every evaluation row kept.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfusion_core::model::{Model, TowerVariant};
use xfusion_core::synth::MixRatio;
use xfusion_core::train::Trainer;

use crate::error::{CliError, CliResult};
use crate::metrics::{MetricsRow, HEADER};
use crate::plan::RunPlan;
use crate::session::{Session, Window};
use crate::svg::{LinePlot, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GridAxis {
    /// The four tower architectures.
    Variant,
    /// Noise limit on images inside image-to-text samples.
    Noise,
    /// T2I/I2T mixing ratio at matched T2I exposure.
    Ratio,
    /// Alignment regularizer off and on.
    Alignment,
    /// X-Fuse off and on.
    Xfuse,
}

impl GridAxis {
    pub fn name(self) -> &'static str {
        match self {
            GridAxis::Variant => "variant",
            GridAxis::Noise => "noise",
            GridAxis::Ratio => "ratio",
            GridAxis::Alignment => "alignment",
            GridAxis::Xfuse => "xfuse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub plan: RunPlan,
}

pub const NOISE_LIMITS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const RATIOS: [(u32, u32); 5] = [(100, 0), (66, 33), (50, 50), (33, 66), (0, 100)];

/// Scale applied to a ratio cell's step budget so that every cell with T2I samples draws
/// as many of them as the 66/33 cell does in `base.train.steps` steps.
pub fn exposure_scale(t2i: f64) -> f64 {
    if t2i > 0.0 {
        (2.0 / 3.0) / t2i
    } else {
        1.0
    }
}

fn ratio(t2i: u32, i2t: u32) -> MixRatio {
    match (t2i, i2t) {
        (66, 33) => MixRatio::default(),
        (33, 66) => MixRatio {
            t2i: 1.0 / 3.0,
            i2t: 2.0 / 3.0,
        },
        (a, b) => MixRatio {
            t2i: a as f64 / 100.0,
            i2t: b as f64 / 100.0,
        },
    }
}

/// The cells of `axis`, each a modification of `base`.
pub fn cells(axis: GridAxis, base: &RunPlan) -> Vec<Cell> {
    let with = |name: String, f: &dyn Fn(&mut RunPlan)| {
        let mut plan = base.clone();
        f(&mut plan);
        Cell { name, plan }
    };
    match axis {
        GridAxis::Variant => TowerVariant::ALL
            .iter()
            .map(|&v| {
                with(v.name().into(), &|p| {
                    p.model.variant = v;
                    p.model.x_fuse = false;
                    p.model.vision_dim = p.model.dim;
                })
            })
            .collect(),
        GridAxis::Noise => NOISE_LIMITS
            .iter()
            .map(|&t| with(format!("noise-{t}"), &|p| p.train.noise.t_max_i2t = t))
            .collect(),
        GridAxis::Ratio => RATIOS
            .iter()
            .map(|&(a, b)| {
                with(format!("ratio-{a}-{b}"), &|p| {
                    p.train.mix = ratio(a, b);
                    let k = exposure_scale(p.train.mix.t2i);
                    p.train.steps = (p.train.steps as f64 * k).round() as u64;
                    p.train.eval_every = ((p.train.eval_every as f64 * k).round() as u64).max(1);
                })
            })
            .collect(),
        GridAxis::Alignment => [false, true]
            .iter()
            .map(|&on| with(format!("align-{}", if on { "on" } else { "off" }), &|p| p.train.alignment = on))
            .collect(),
        GridAxis::Xfuse => [false, true]
            .iter()
            .map(|&on| {
                with(format!("xfuse-{}", if on { "on" } else { "off" }), &|p| {
                    p.model.variant = TowerVariant::DualTower;
                    p.model.x_fuse = on;
                })
            })
            .collect(),
    }
}

/// Rows of one (cell, seed) run, or the reason it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub error: Option<String>,
}

impl CellRun {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Trains `cell` from `stage1` with the given seed; eval rows are collected in memory.
pub fn run_cell(cell: &Cell, stage1: &Model<f32>, seed: u64, on_row: &mut dyn FnMut(&str, u64, &MetricsRow)) -> CellRun {
    let mut rows = Vec::new();
    let result = (|| -> CliResult<()> {
        let mut plan = cell.plan.clone();
        plan.train.seed = seed;
        plan.eval.seed = seed;
        plan.validate()?;
        let model = Model::multimodal(plan.model.clone(), stage1.params(), seed)?;
        let trainer = Trainer::new(plan.train.clone(), model)?;
        let mut s = Session::new(trainer, Some(stage1), plan.eval.clone(), Window::default())?;
        s.run(
            None,
            |_, _| {},
            |row, _| {
                on_row(&cell.name, seed, row);
                rows.push(row.clone());
                Ok(())
            },
        )?;
        Ok(())
    })();
    CellRun {
        cell: cell.name.clone(),
        seed,
        rows,
        error: result.err().map(|e| e.to_string()),
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    xs.retain(|x| x.is_finite());
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Median over seeds of a metric's final value, per cell.
pub fn final_medians(runs: &[CellRun], metric: &str) -> BTreeMap<String, Option<f64>> {
    let mut by_cell: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        let v = r.last().and_then(|row| row.value(metric));
        let entry = by_cell.entry(r.cell.clone()).or_default();
        if let (Some(v), None) = (v, &r.error) {
            entry.push(v);
        }
    }
    by_cell.into_iter().map(|(k, v)| (k, median(v))).collect()
}

pub const GRID_METRICS: [&str; 5] = ["caption_accuracy", "generation_accuracy", "l_dm", "l_ar", "text_divergence"];

/// Writes `<out>/<grid>.csv`, `<out>/<grid>/summary.csv`, `<out>/<grid>/<cell>/<metric>.svg`
/// and returns every path written.
pub fn write_report(out: &Path, axis: GridAxis, runs: &[CellRun]) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    let grid_dir = out.join(axis.name());
    std::fs::create_dir_all(&grid_dir).map_err(|e| CliError::io(&grid_dir, e))?;
    let csv_path = out.join(format!("{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["grid", "cell", "seed", "error"];
    header.extend(HEADER);
    w.write_record(&header)?;
    for r in runs {
        let prefix = [axis.name().to_string(), r.cell.clone(), r.seed.to_string()];
        if r.rows.is_empty() || r.error.is_some() {
            let mut rec: Vec<String> = prefix.to_vec();
            rec.push(r.error.clone().unwrap_or_else(|| "no rows".into()));
            rec.extend(HEADER.iter().map(|_| String::new()));
            w.write_record(&rec)?;
        }
        for row in &r.rows {
            let mut rec: Vec<String> = prefix.to_vec();
            rec.push(String::new());
            rec.extend(row.fields());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    written.push(csv_path);

    let summary_path = grid_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    let mut header = vec!["cell".to_string()];
    header.extend(GRID_METRICS.iter().map(|m| format!("median_{m}")));
    w.write_record(&header)?;
    let medians: Vec<BTreeMap<String, Option<f64>>> = GRID_METRICS.iter().map(|m| final_medians(runs, m)).collect();
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.cell.as_str()) {
            order.push(&r.cell);
        }
    }
    for cell in &order {
        let mut rec = vec![cell.to_string()];
        rec.extend(medians.iter().map(|m| m.get(*cell).copied().flatten().map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(&summary_path, e))?;
    written.push(summary_path);

    for cell in &order {
        let dir = grid_dir.join(cell);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for metric in GRID_METRICS {
            let series: Vec<Series> = runs
                .iter()
                .filter(|r| r.cell == *cell)
                .map(|r| Series {
                    name: format!("seed {}", r.seed),
                    points: r
                        .rows
                        .iter()
                        .filter_map(|row| row.value(metric).map(|v| (row.t2i_samples as f64, v)))
                        .collect(),
                })
                .filter(|s| !s.points.is_empty())
                .collect();
            if series.is_empty() {
                continue;
            }
            let plot = LinePlot {
                title: format!("{} / {cell}: {metric}", axis.name()),
                x_label: "T2I samples seen".into(),
                y_label: metric.into(),
                series,
            };
            let p = dir.join(format!("{metric}.svg"));
            std::fs::write(&p, plot.to_svg()).map_err(|e| CliError::io(&p, e))?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Lists every artifact under `out`, one relative path per line, in `out/index.txt`.
pub fn write_index(out: &Path) -> CliResult<PathBuf> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<String>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, acc)?;
            } else if let Ok(rel) = p.strip_prefix(root) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                if rel != "index.txt" {
                    acc.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(out, out, &mut acc).map_err(|e| CliError::io(out, e))?;
    let p = out.join("index.txt");
    std::fs::write(&p, acc.join("\n") + "\n").map_err(|e| CliError::io(&p, e))?;
    Ok(p)
}
