//! The `estimate` report and its text rendering.

use std::fmt::Write as _;

use caprec::closed_form::population_size;
use caprec::estimator::Diagnostics;
use caprec::{CapturePattern, CellTable, EstimatorKind, Fitted, Warning};
use serde::Serialize;

use crate::input::Format;

pub const SCHEMA_ID: &str = "caprec-estimate-report/1";

#[derive(Debug, Serialize)]
pub struct InputSummary {
    pub path: String,
    pub format: Format,
    pub k: usize,
    pub n: u64,
    pub counts: Vec<CellCount>,
    pub empty_cells: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct CellCount {
    pub pattern: String,
    pub count: u64,
}

#[derive(Debug, Serialize)]
pub struct ErrorEntry {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct Row {
    pub estimator: String,
    pub assumption: String,
    pub status: &'static str,
    pub psi: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_hat: Option<f64>,
    pub n_hat_lo: Option<f64>,
    pub n_hat_hi: Option<f64>,
    pub warnings: Vec<Warning>,
    pub diagnostics: Option<Diagnostics>,
    pub error: Option<ErrorEntry>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub input: InputSummary,
    pub level: f64,
    pub seed: u64,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn any_succeeded(&self) -> bool {
        self.rows.iter().any(|r| r.status == "ok")
    }
}

pub fn assumption_label(kind: &EstimatorKind) -> String {
    match kind {
        EstimatorKind::Linear => "linear no K-way interaction".into(),
        EstimatorKind::Independence { j1, j2 } => format!("independence of {j1},{j2}"),
        EstimatorKind::CondIndependence { j, m } => {
            format!("cond. independence of {j},{m}")
        }
        _ => "log-linear no K-way interaction".into(),
    }
}

pub fn input_summary(path: &str, format: Format, table: &CellTable) -> InputSummary {
    let k = table.k();
    let name = |i| CapturePattern::new(i, k).expect("index fits").to_string();
    InputSummary {
        path: path.to_string(),
        format,
        k,
        n: table.n(),
        counts: caprec::capture::cells(k)
            .map(|i| CellCount {
                pattern: name(i),
                count: table.count(i),
            })
            .collect(),
        empty_cells: table.empty_cells().into_iter().map(name).collect(),
    }
}

pub fn row(kind: EstimatorKind, n: u64, result: caprec::Result<Fitted>) -> Row {
    let mut row = Row {
        estimator: kind.to_string(),
        assumption: assumption_label(&kind),
        status: "ok",
        psi: None,
        se: None,
        ci_lo: None,
        ci_hi: None,
        n_hat: None,
        n_hat_lo: None,
        n_hat_hi: None,
        warnings: Vec::new(),
        diagnostics: None,
        error: None,
    };
    match result {
        Ok(f) => {
            let e = &f.estimate;
            row.psi = Some(e.psi);
            row.se = Some(e.se);
            row.ci_lo = Some(e.ci_lo);
            row.ci_hi = Some(e.ci_hi);
            if let Ok(size) = population_size(e, n) {
                row.n_hat = Some(size.n_hat);
                row.n_hat_lo = Some(size.ci_lo).filter(|v| v.is_finite());
                row.n_hat_hi = Some(size.ci_hi).filter(|v| v.is_finite());
            }
            row.warnings = e.warnings.clone();
            row.diagnostics = f.diagnostics;
        }
        Err(e) => {
            row.status = "error";
            row.error = Some(ErrorEntry {
                kind: e.kind().to_string(),
                message: e.to_string(),
            });
        }
    }
    row
}

fn num(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) => format!("{x:.digits$}"),
        None => "-".into(),
    }
}

fn diagnostics_note(d: &Diagnostics) -> String {
    match d {
        Diagnostics::Lasso {
            cv_lambda,
            lambda,
            lambdas_visited,
            met,
            ..
        } => format!(
            "lambda {lambda:.3e} (cv {cv_lambda:.3e}, {} steps{})",
            lambdas_visited.len() - 1,
            if *met { "" } else { ", criterion unmet" }
        ),
        Diagnostics::Tmle {
            initial_psi,
            iterations,
            exit,
            ..
        } => {
            let exit = serde_json::to_value(exit).ok();
            let exit = exit.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown");
            format!("initial {initial_psi:.4}, {iterations} iterations, exit {exit}")
        }
        Diagnostics::Glm { df, aic, bic, .. } => {
            format!("df {df}, AIC {aic:.3}, BIC {bic:.3}")
        }
    }
}

/// Fixed-width table of the report followed by numbered notes.
pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    let inp = &report.input;
    let pct = report.level * 100.0;
    writeln!(
        out,
        "input: {} ({}, K={}, n={})",
        inp.path, inp.format, inp.k, inp.n
    )
    .unwrap();
    if !inp.empty_cells.is_empty() {
        writeln!(out, "empty cells: {}", inp.empty_cells.join(" ")).unwrap();
    }
    writeln!(out).unwrap();
    writeln!(
        out,
        "{:<15} {:<32} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "estimator",
        "assumption",
        "psi",
        "se",
        format!("lo{pct:.0}"),
        format!("hi{pct:.0}"),
        "N",
        "N lo",
        "N hi"
    )
    .unwrap();
    let mut notes = Vec::new();
    for r in &report.rows {
        let mut marks = Vec::new();
        let mut note = |s: String| {
            notes.push(s);
            marks.push(notes.len().to_string());
        };
        if let Some(e) = &r.error {
            note(format!("{}: {}", r.estimator, e.message));
        }
        for w in &r.warnings {
            note(format!("{}: {w}", r.estimator));
        }
        if let Some(d) = &r.diagnostics {
            note(format!("{}: {}", r.estimator, diagnostics_note(d)));
        }
        let mark = if marks.is_empty() {
            String::new()
        } else {
            format!(" [{}]", marks.join(","))
        };
        if r.status == "ok" {
            writeln!(
                out,
                "{:<15} {:<32} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}{mark}",
                r.estimator,
                r.assumption,
                num(r.psi, 4),
                num(r.se, 4),
                num(r.ci_lo, 4),
                num(r.ci_hi, 4),
                num(r.n_hat, 1),
                num(r.n_hat_lo, 1),
                num(r.n_hat_hi, 1),
            )
            .unwrap();
        } else {
            writeln!(
                out,
                "{:<15} {:<32} {:>8}{mark}",
                r.estimator,
                r.assumption,
                r.error.as_ref().map(|e| e.kind.as_str()).unwrap_or("error")
            )
            .unwrap();
        }
    }
    if !notes.is_empty() {
        writeln!(out).unwrap();
        for (i, n) in notes.iter().enumerate() {
            writeln!(out, "[{}] {n}", i + 1).unwrap();
        }
    }
    out
}
