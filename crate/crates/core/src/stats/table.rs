use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Pair, PairedSample, WilcoxonResult, wilcoxon_one_sided};
use crate::error::Result;
use crate::gradflow::FlowMeasure;
use crate::sparsity::Architecture;

pub const COMPARISON_SCHEMA: &str = "# sparseflow comparison v1";
pub const CORRELATION_SCHEMA: &str = "# sparseflow correlation v1";

/// One cell of a comparison table: a paired sample and its test result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub row: String,
    pub col: String,
    pub pairs: usize,
    pub result: WilcoxonResult,
}

impl ComparisonCell {
    /// Networks behind the cell: two per pair.
    pub fn networks(&self) -> usize {
        2 * self.pairs
    }
}

/// p-values laid out on a row × column grid, e.g. optimizer × regularizer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<ComparisonCell>,
}

/// Runs the test on each `(row, col, sample)` and collects the cells. Row and
/// column orders follow first appearance.
pub fn comparison_table(
    title: impl Into<String>,
    samples: &[(String, String, PairedSample)],
) -> Result<ComparisonTable> {
    let mut table = ComparisonTable {
        title: title.into(),
        ..Default::default()
    };
    for (row, col, sample) in samples {
        if !table.rows.contains(row) {
            table.rows.push(row.clone());
        }
        if !table.cols.contains(col) {
            table.cols.push(col.clone());
        }
        let values: Vec<(f64, f64)> = sample.pairs.iter().map(Pair::values).collect();
        table.cells.push(ComparisonCell {
            row: row.clone(),
            col: col.clone(),
            pairs: sample.pairs.len(),
            result: wilcoxon_one_sided(&values)?,
        });
    }
    Ok(table)
}

impl ComparisonTable {
    pub fn cell(&self, row: &str, col: &str) -> Option<&ComparisonCell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut out = out;
        writeln!(out, "{COMPARISON_SCHEMA}").map_err(|e| crate::error::Error::io("writing CSV", e))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "row",
            "col",
            "pairs",
            "networks",
            "n_effective",
            "w_plus",
            "p_value",
            "method",
            "significant",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.row.clone(),
                c.col.clone(),
                c.pairs.to_string(),
                c.networks().to_string(),
                c.result.n_effective.to_string(),
                c.result.statistic.to_string(),
                format!("{:e}", c.result.p_value),
                c.result.method.to_string(),
                c.result.significant().to_string(),
            ])?;
        }
        w.flush().map_err(|e| crate::error::Error::io("writing CSV", e))?;
        Ok(())
    }

    /// HTML `<table>` fragment; cells are coloured by p-value and bolded when significant.
    pub fn to_html(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "<table class=\"sparseflow-comparison\">");
        let _ = writeln!(s, "<caption>{}</caption>", escape(&self.title));
        let _ = write!(s, "<tr><th></th>");
        for col in &self.cols {
            let _ = write!(s, "<th>{}</th>", escape(col));
        }
        let _ = writeln!(s, "</tr>");
        for row in &self.rows {
            let _ = write!(s, "<tr><th>{}</th>", escape(row));
            for col in &self.cols {
                match self.cell(row, col) {
                    Some(c) => {
                        let p = c.result.p_value;
                        let text = format!("{p:.3}");
                        let text = if c.result.significant() {
                            format!("<b>{text}</b>")
                        } else {
                            text
                        };
                        let _ = write!(
                            s,
                            "<td style=\"background-color:{}\" title=\"n={}, W+={}\">{text}</td>",
                            p_value_colour(p),
                            c.result.n_effective,
                            c.result.statistic
                        );
                    }
                    None => {
                        let _ = write!(s, "<td>&ndash;</td>");
                    }
                }
            }
            let _ = writeln!(s, "</tr>");
        }
        let _ = writeln!(s, "</table>");
        s
    }
}

/// Colour for a p-value: green at 0, yellow at 0.5, red at 1, linear in between.
///
/// ```
/// use sparseflow::stats::p_value_colour;
/// assert_eq!(p_value_colour(0.0), "#00ff00");
/// assert_eq!(p_value_colour(0.5), "#ffff00");
/// assert_eq!(p_value_colour(1.0), "#ff0000");
/// ```
pub fn p_value_colour(p: f64) -> String {
    let p = if p.is_nan() { 1.0 } else { p.clamp(0.0, 1.0) };
    let (r, g) = if p <= 0.5 {
        (255.0 * p / 0.5, 255.0)
    } else {
        (255.0, 255.0 * (1.0 - p) / 0.5)
    };
    format!("#{:02x}{:02x}00", r.round() as u8, g.round() as u8)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Loss,
    Accuracy,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Loss, Target::Accuracy];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Loss => "loss",
            Target::Accuracy => "accuracy",
        }
    }
}

/// Flow measures and test metrics of one run, sampled at the same epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub architecture: Architecture,
    pub measures: BTreeMap<FlowMeasure, Vec<f64>>,
    pub test_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
}

impl RunSeries {
    pub fn target(&self, t: Target) -> &[f64] {
        match t {
            Target::Loss => &self.test_loss,
            Target::Accuracy => &self.test_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub measure: FlowMeasure,
    pub architecture: Architecture,
    pub target: Target,
    /// Mean `|tau_b|`; `None` if no run had a defined tau.
    pub avg_abs_tau: Option<f64>,
    pub runs_used: usize,
    pub runs_total: usize,
}

/// Every measure × architecture × target combination, averaged over the runs of
/// that architecture.
pub fn correlation_report(runs: &[RunSeries]) -> Result<Vec<CorrelationRow>> {
    let mut rows = Vec::new();
    for measure in FlowMeasure::ALL {
        for arch in Architecture::ALL {
            let group: Vec<&RunSeries> = runs.iter().filter(|r| r.architecture == arch).collect();
            for target in Target::ALL {
                // Fewer than two points: tau undefined, counted as missing.
                let series: Vec<(&[f64], &[f64])> = group
                    .iter()
                    .filter_map(|r| r.measures.get(&measure).map(|m| (&m[..], r.target(target))))
                    .filter(|(m, _)| m.len() >= 2)
                    .collect();
                let avg = if series.is_empty() {
                    None
                } else {
                    super::avg_abs_correlation(&series)?
                };
                rows.push(CorrelationRow {
                    measure,
                    architecture: arch,
                    target,
                    avg_abs_tau: avg.map(|(m, _)| m),
                    runs_used: avg.map_or(0, |(_, u)| u),
                    runs_total: group.len(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_correlation_csv(rows: &[CorrelationRow], out: impl Write) -> Result<()> {
    let mut out = out;
    writeln!(out, "{CORRELATION_SCHEMA}").map_err(|e| crate::error::Error::io("writing CSV", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["measure", "architecture", "target", "avg_abs_tau", "runs_used", "runs_total"])?;
    for r in rows {
        w.write_record([
            r.measure.label().to_string(),
            r.architecture.to_string(),
            r.target.as_str().to_string(),
            r.avg_abs_tau.map_or(String::new(), |v| v.to_string()),
            r.runs_used.to_string(),
            r.runs_total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("writing CSV", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(diffs: &[f64]) -> PairedSample {
        PairedSample {
            config_id: "x".into(),
            pairs: diffs
                .iter()
                .enumerate()
                .map(|(i, &d)| Pair {
                    width: 10 * (i + 1),
                    seed: 0,
                    sparse: 0.5 + d,
                    dense: 0.5,
                })
                .collect(),
        }
    }

    #[test]
    fn colour_scale_is_linear() {
        assert_eq!(p_value_colour(0.25), "#80ff00");
        assert_eq!(p_value_colour(0.75), "#ff8000");
        assert_eq!(p_value_colour(-1.0), "#00ff00");
        assert_eq!(p_value_colour(f64::NAN), "#ff0000");
    }

    #[test]
    fn table_renders_csv_and_html() {
        let samples = vec![
            ("sgd".to_string(), "NR".to_string(), sample(&[0.1, 0.2, 0.3, 0.4, 0.5])),
            ("sgd".to_string(), "BN".to_string(), sample(&[-0.1, 0.2, -0.3])),
            ("adam".to_string(), "NR".to_string(), sample(&[0.0, 0.0])),
        ];
        let t = comparison_table("demo", &samples).unwrap();
        assert_eq!(t.rows, vec!["sgd", "adam"]);
        assert_eq!(t.cols, vec!["NR", "BN"]);
        let c = t.cell("sgd", "NR").unwrap();
        assert_eq!(c.result.p_value, 1.0 / 32.0);
        assert!(c.result.significant());
        assert_eq!(c.networks(), 10);

        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(COMPARISON_SCHEMA));
        assert!(lines.next().unwrap().starts_with("row,col,pairs"));
        assert_eq!(text.lines().count(), 5);

        let html = t.to_html();
        assert!(html.contains("<b>0.031</b>"));
        assert!(html.contains("&ndash;"));
        assert_eq!(html.matches("<b>").count(), 1);
    }

    #[test]
    fn correlation_report_covers_every_cell() {
        let mk = |arch, m: Vec<f64>, loss: Vec<f64>| RunSeries {
            architecture: arch,
            measures: FlowMeasure::ALL.iter().map(|&k| (k, m.clone())).collect(),
            test_accuracy: loss.iter().map(|l| 1.0 - l).collect(),
            test_loss: loss,
        };
        let runs = vec![
            mk(Architecture::Sparse, vec![3.0, 2.0, 1.0], vec![0.9, 0.5, 0.4]),
            mk(Architecture::Dense, vec![1.0, 2.0, 3.0], vec![0.9, 0.5, 0.4]),
        ];
        let rows = correlation_report(&runs).unwrap();
        assert_eq!(rows.len(), 16);
        assert!(rows.iter().all(|r| r.avg_abs_tau == Some(1.0) && r.runs_used == 1));

        let mut buf = Vec::new();
        write_correlation_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 18);
        assert!(text.contains("EGF_1,dense,loss,1,1,1"));
    }

    #[test]
    fn single_point_series_are_missing() {
        let run = RunSeries {
            architecture: Architecture::Sparse,
            measures: FlowMeasure::ALL.iter().map(|&k| (k, vec![1.0])).collect(),
            test_loss: vec![0.5],
            test_accuracy: vec![0.5],
        };
        let rows = correlation_report(&[run]).unwrap();
        assert!(rows.iter().all(|r| r.avg_abs_tau.is_none() && r.runs_used == 0));
        assert!(rows
            .iter()
            .filter(|r| r.architecture == Architecture::Sparse)
            .all(|r| r.runs_total == 1));
    }
}
