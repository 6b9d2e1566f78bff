//! Confusion counts, accuracy/precision/recall, and the view x input report.
//!
//! The positive class is `lame` throughout.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{BinaryLabel, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

pub fn confusion(predictions: &[BinaryLabel], labels: &[BinaryLabel]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to evaluate".into()));
    }
    let mut c = Confusion::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p.is_lame(), l.is_lame()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent, 0 to 100.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall are 0 when their denominator is empty.
pub fn metrics(c: &Confusion) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(Metrics {
        accuracy: 100.0 * (c.tp + c.tn) as f64 / total as f64,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    })
}

/// Classifier input variants compared in the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InputType {
    #[serde(rename = "RGB")]
    Rgb,
    Mask,
    Depth,
    SegmOverDepth,
}

impl InputType {
    pub const ALL: [InputType; 4] = [
        InputType::Rgb,
        InputType::Mask,
        InputType::Depth,
        InputType::SegmOverDepth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputType::Rgb => "RGB",
            InputType::Mask => "Mask",
            InputType::Depth => "Depth",
            InputType::SegmOverDepth => "SegmOverDepth",
        }
    }
}

impl fmt::Display for InputType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        InputType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown input type `{s}`")))
    }
}

/// Report rows list the top view first.
const REPORT_VIEWS: [View; 2] = [View::Top, View::Side];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub cells: BTreeMap<(View, InputType), Metrics>,
}

impl EvalReport {
    pub fn insert(&mut self, view: View, input: InputType, m: Metrics) {
        self.cells.insert((view, input), m);
    }

    pub fn get(&self, view: View, input: InputType) -> Option<&Metrics> {
        self.cells.get(&(view, input))
    }
}

const LABEL_W: usize = 14;
const VIEW_W: usize = 6;
const COL_W: usize = 15;

fn view_name(v: View) -> &'static str {
    match v {
        View::Top => "Top",
        View::Side => "Side",
    }
}

/// Aligned text table: rows are metric x view, columns are input types.
/// Missing cells are left blank.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:LABEL_W$}{:VIEW_W$}", "", "");
    for input in InputType::ALL {
        let _ = write!(out, "{:>COL_W$}", input.as_str());
    }
    out.push('\n');
    let rows: [(&str, fn(&Metrics) -> f64); 3] = [
        ("Accuracy (%)", |m| m.accuracy),
        ("Precision", |m| m.precision),
        ("Recall", |m| m.recall),
    ];
    for (name, value) in rows {
        for (i, &view) in REPORT_VIEWS.iter().enumerate() {
            let label = if i == 0 { name } else { "" };
            let _ = write!(out, "{label:LABEL_W$}{:VIEW_W$}", view_name(view));
            for input in InputType::ALL {
                match report.get(view, input) {
                    Some(m) => {
                        let _ = write!(out, "{:>COL_W$.2}", value(m));
                    }
                    None => {
                        let _ = write!(out, "{:>COL_W$}", "");
                    }
                }
            }
            out.truncate(out.trim_end().len());
            out.push('\n');
        }
    }
    out
}

/// Parse a table produced by [`render_report`]. Values come back at the
/// two-decimal precision of the text.
pub fn parse_report(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines();
    lines
        .next()
        .ok_or_else(|| Error::Format("empty report".into()))?;
    let mut acc: BTreeMap<(View, InputType), [Option<f64>; 3]> = BTreeMap::new();
    for (row, line) in lines.enumerate() {
        let metric = row / 2;
        if metric >= 3 {
            break;
        }
        let view = REPORT_VIEWS[row % 2];
        for (col, input) in InputType::ALL.into_iter().enumerate() {
            let start = LABEL_W + VIEW_W + col * COL_W;
            let cell = line.get(start..(start + COL_W).min(line.len())).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Format(format!("bad report cell `{cell}`")))?;
            acc.entry((view, input)).or_default()[metric] = Some(v);
        }
    }
    let mut report = EvalReport::default();
    for ((view, input), vals) in acc {
        match vals {
            [Some(accuracy), Some(precision), Some(recall)] => report.insert(
                view,
                input,
                Metrics {
                    accuracy,
                    precision,
                    recall,
                },
            ),
            _ => {
                return Err(Error::Format(format!(
                    "incomplete report cell {view}/{input}"
                )))
            }
        }
    }
    Ok(report)
}

pub const RECORDS_HEADER: &str = "view,input,accuracy,precision,recall";

/// One machine-readable line per populated cell, full precision.
pub fn render_records(report: &EvalReport) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for (&(view, input), m) in &report.cells {
        let _ = writeln!(
            out,
            "{view},{input},{},{},{}",
            m.accuracy, m.precision, m.recall
        );
    }
    out
}

pub fn parse_records(text: &str) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("report record line {}: `{line}`", i + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        report.insert(
            fields[0].parse()?,
            fields[1].parse()?,
            Metrics {
                accuracy: num(fields[2])?,
                precision: num(fields[3])?,
                recall: num(fields[4])?,
            },
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use BinaryLabel::{Healthy, Lame};

    #[test]
    fn confusion_counts() {
        let labels = [Lame, Lame, Lame, Healthy, Healthy];
        assert_eq!(confusion(&labels, &labels).unwrap(), Confusion::new(3, 0, 0, 2));

        let mut labels = vec![Lame; 56];
        labels.extend(vec![Healthy; 80]);
        let preds = vec![Healthy; 136];
        let c = confusion(&preds, &labels).unwrap();
        assert_eq!(c, Confusion::new(0, 0, 56, 80));
        let m = metrics(&c).unwrap();
        assert!((m.accuracy - 58.82).abs() < 0.005);
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
    }

    #[test]
    fn confusion_errors() {
        assert!(confusion(&[], &[]).is_err());
        assert!(confusion(&[Lame], &[Lame, Healthy]).is_err());
        assert!(metrics(&Confusion::default()).is_err());
    }

    #[test]
    fn reference_cells_from_counts() {
        let m = metrics(&Confusion::new(45, 10, 11, 70)).unwrap();
        assert_eq!(format!("{:.2}", m.accuracy), "84.56");
        assert_eq!(format!("{:.2}", m.precision), "0.82");
        assert_eq!(format!("{:.2}", m.recall), "0.80");

        let m = metrics(&Confusion::new(38, 14, 18, 66)).unwrap();
        assert_eq!(format!("{:.2}", m.accuracy), "76.47");
        assert_eq!(format!("{:.2}", m.precision), "0.73");
        assert_eq!(format!("{:.2}", m.recall), "0.68");
    }

    #[test]
    fn metrics_scale_free_and_perfect() {
        let c = Confusion::new(7, 3, 2, 11);
        let k = Confusion::new(21, 9, 6, 33);
        let (a, b) = (metrics(&c).unwrap(), metrics(&k).unwrap());
        assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        assert!((a.precision - b.precision).abs() < 1e-12);
        assert!((a.recall - b.recall).abs() < 1e-12);
        assert_eq!(metrics(&Confusion::new(4, 0, 0, 9)).unwrap().accuracy, 100.0);
    }

    fn sample_report() -> EvalReport {
        let mut r = EvalReport::default();
        r.insert(
            View::Side,
            InputType::Mask,
            Metrics {
                accuracy: 84.5588,
                precision: 0.8182,
                recall: 0.8036,
            },
        );
        r.insert(
            View::Top,
            InputType::Depth,
            Metrics {
                accuracy: 76.4706,
                precision: 0.7308,
                recall: 0.6786,
            },
        );
        r
    }

    #[test]
    fn report_layout_and_blanks() {
        let text = render_report(&sample_report());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].contains("RGB") && lines[0].ends_with("SegmOverDepth"));
        assert!(lines[1].starts_with("Accuracy (%)") && lines[1].contains("Top"));
        assert!(lines[2].contains("Side") && lines[2].contains("84.56"));
        assert!(lines[3].starts_with("Precision"));
        assert!(lines[5].starts_with("Recall"));

        let empty = render_report(&EvalReport::default());
        assert_eq!(empty.lines().count(), 7);
        assert!(parse_report(&empty).unwrap().cells.is_empty());
    }

    #[test]
    fn report_text_parses_back_at_two_decimals() {
        let report = sample_report();
        let back = parse_report(&render_report(&report)).unwrap();
        assert_eq!(back.cells.len(), 2);
        for (key, m) in &report.cells {
            let b = back.cells[key];
            assert!((b.accuracy - m.accuracy).abs() <= 0.005 + 1e-9);
            assert!((b.precision - m.precision).abs() <= 0.005 + 1e-9);
            assert!((b.recall - m.recall).abs() <= 0.005 + 1e-9);
        }
    }

    #[test]
    fn records_round_trip_exactly() {
        let report = sample_report();
        assert_eq!(parse_records(&render_records(&report)).unwrap(), report);
    }

    #[test]
    fn input_type_names() {
        for t in InputType::ALL {
            assert_eq!(t.as_str().parse::<InputType>().unwrap(), t);
        }
        assert!("ir".parse::<InputType>().is_err());
    }
}
