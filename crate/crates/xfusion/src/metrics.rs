//! The per-evaluation metrics log.

use std::fs::{File, OpenOptions};
use std::io::BufReader;
use std::path::Path;

use xfusion_core::eval::{EvalReport, ProbeResult};

use crate::error::{CliError, CliResult};

/// One evaluation point. Loss columns are means over the steps since the previous row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Samples of each kind drawn so far.
    pub t2i_samples: u64,
    pub i2t_samples: u64,
    pub text_samples: u64,
    pub l_ar: f64,
    pub l_dm: f64,
    pub l_align: f64,
    pub total: f64,
    pub text_divergence: Option<f64>,
    pub text_perplexity: f64,
    pub caption_accuracy: Option<f64>,
    pub generation_accuracy: Option<f64>,
    /// `layer/mode=accuracy` entries joined by `;`.
    pub probes: String,
    pub score_macs: u64,
    pub frozen_digest: String,
}

pub const HEADER: [&str; 15] = [
    "step",
    "t2i_samples",
    "i2t_samples",
    "text_samples",
    "l_ar",
    "l_dm",
    "l_align",
    "total",
    "text_divergence",
    "text_perplexity",
    "caption_accuracy",
    "generation_accuracy",
    "probes",
    "score_macs",
    "frozen_digest",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_probes(probes: &[ProbeResult]) -> String {
    probes
        .iter()
        .map(|p| format!("{}/{}/{}={}", p.layer, p.mode.name(), p.attribute.name(), p.accuracy))
        .collect::<Vec<_>>()
        .join(";")
}

impl MetricsRow {
    pub fn from_report(report: &EvalReport, exposure: [u64; 3], losses: [f64; 4], frozen_digest: String) -> Self {
        Self {
            step: report.step,
            t2i_samples: exposure[0],
            i2t_samples: exposure[1],
            text_samples: exposure[2],
            l_ar: losses[0],
            l_dm: losses[1],
            l_align: losses[2],
            total: losses[3],
            text_divergence: report.text_divergence,
            text_perplexity: report.text_perplexity,
            caption_accuracy: report.caption_accuracy,
            generation_accuracy: report.generation_accuracy,
            probes: format_probes(&report.probes),
            score_macs: report.score_macs,
            frozen_digest,
        }
    }

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.t2i_samples.to_string(),
            self.i2t_samples.to_string(),
            self.text_samples.to_string(),
            self.l_ar.to_string(),
            self.l_dm.to_string(),
            self.l_align.to_string(),
            self.total.to_string(),
            opt(self.text_divergence),
            self.text_perplexity.to_string(),
            opt(self.caption_accuracy),
            opt(self.generation_accuracy),
            self.probes.clone(),
            self.score_macs.to_string(),
            self.frozen_digest.clone(),
        ]
    }

    pub fn parse(fields: &[&str]) -> CliResult<Self> {
        if fields.len() != HEADER.len() {
            return Err(CliError::user(format!("metrics row has {} fields, expected {}", fields.len(), HEADER.len())));
        }
        let bad = |i: usize| CliError::user(format!("metrics column `{}` holds `{}`", HEADER[i], fields[i]));
        let u = |i: usize| fields[i].parse::<u64>().map_err(|_| bad(i));
        let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad(i));
        let o = |i: usize| match fields[i] {
            "" => Ok(None),
            s => s.parse::<f64>().map(Some).map_err(|_| bad(i)),
        };
        Ok(Self {
            step: u(0)?,
            t2i_samples: u(1)?,
            i2t_samples: u(2)?,
            text_samples: u(3)?,
            l_ar: f(4)?,
            l_dm: f(5)?,
            l_align: f(6)?,
            total: f(7)?,
            text_divergence: o(8)?,
            text_perplexity: f(9)?,
            caption_accuracy: o(10)?,
            generation_accuracy: o(11)?,
            probes: fields[12].to_string(),
            score_macs: u(13)?,
            frozen_digest: fields[14].to_string(),
        })
    }

    /// Value of a numeric column by header name.
    pub fn value(&self, column: &str) -> Option<f64> {
        match column {
            "step" => Some(self.step as f64),
            "t2i_samples" => Some(self.t2i_samples as f64),
            "i2t_samples" => Some(self.i2t_samples as f64),
            "text_samples" => Some(self.text_samples as f64),
            "l_ar" => Some(self.l_ar),
            "l_dm" => Some(self.l_dm),
            "l_align" => Some(self.l_align),
            "total" => Some(self.total),
            "text_divergence" => self.text_divergence,
            "text_perplexity" => Some(self.text_perplexity),
            "caption_accuracy" => self.caption_accuracy,
            "generation_accuracy" => self.generation_accuracy,
            "score_macs" => Some(self.score_macs as f64),
            _ => None,
        }
    }
}

/// Appends rows, writing the header when the file is new or empty.
pub fn append(path: &Path, rows: &[MetricsRow]) -> CliResult<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(HEADER)?;
    }
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn read(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::io(path, e)),
    };
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != HEADER {
        return Err(CliError::user(format!("{}: unexpected metrics header", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            MetricsRow::parse(&rec.iter().collect::<Vec<_>>())
        })
        .collect()
}

/// Rewrites the log keeping only rows up to and including `step`.
pub fn truncate_after(path: &Path, step: u64) -> CliResult<usize> {
    let rows: Vec<MetricsRow> = read(path)?.into_iter().filter(|r| r.step <= step).collect();
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| CliError::io(path, e))?;
    }
    append(path, &rows)?;
    Ok(rows.len())
}
