//! Evaluation result files and the summary table built from them.
//!
//! `evaluation.tsv` holds a stamp comment, a `window` line and one row per
//! scope (each fold, the fold mean, the fold ensemble). Undefined metrics
//! are written as `NA`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pecnn::metrics::{round_percent, ConfusionMatrix};
use pecnn::preprocess::HuWindow;
use pecnn::{Error, Result};

pub const EVALUATION_FILE: &str = "evaluation.tsv";
const HEADER: &str = "scope\ttp\ttn\tfp\tfn\taccuracy\tsensitivity\tspecificity\tauc";
pub const COLUMNS: [&str; 5] = ["HU", "Accuracy", "Sensitivity", "Specificity", "AUC"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub scope: String,
    /// Absent for rows averaged over folds.
    pub counts: Option<ConfusionMatrix>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

impl Row {
    pub fn from_matrix(scope: &str, cm: ConfusionMatrix, auc: Option<f64>) -> Self {
        Row {
            scope: scope.to_string(),
            counts: Some(cm),
            accuracy: cm.accuracy().ok(),
            sensitivity: cm.sensitivity().ok(),
            specificity: cm.specificity().ok(),
            auc,
        }
    }

    /// Per-metric mean over the rows where the metric is defined.
    pub fn mean(scope: &str, rows: &[Row]) -> Self {
        let avg = |f: fn(&Row) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Row {
            scope: scope.to_string(),
            counts: None,
            accuracy: avg(|r| r.accuracy),
            sensitivity: avg(|r| r.sensitivity),
            specificity: avg(|r| r.specificity),
            auc: avg(|r| r.auc),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub window: HuWindow,
    pub rows: Vec<Row>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

impl Evaluation {
    pub fn to_text(&self, stamp: &str) -> String {
        let mut out = format!(
            "# {stamp}\nwindow\t{}\t{}\n{HEADER}\n",
            self.window.lo(),
            self.window.hi()
        );
        for r in &self.rows {
            let counts = r.counts.map_or_else(
                || "-\t-\t-\t-".to_string(),
                |c| format!("{}\t{}\t{}\t{}", c.tp, c.tn, c.fp, c.fn_),
            );
            writeln!(
                out,
                "{}\t{counts}\t{}\t{}\t{}\t{}",
                r.scope,
                opt(r.accuracy),
                opt(r.sensitivity),
                opt(r.specificity),
                opt(r.auc)
            )
            .expect("write to string");
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |what: String| Error::Format(format!("{}: {what}", origin.display()));
        let mut lines = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let window = match lines.next().map(|l| l.split('\t').collect::<Vec<_>>()) {
            Some(f) if f.len() == 3 && f[0] == "window" => {
                let lo = f[1].parse().map_err(|_| bad(format!("bad window {f:?}")))?;
                let hi = f[2].parse().map_err(|_| bad(format!("bad window {f:?}")))?;
                HuWindow::new(lo, hi).map_err(|e| bad(e.to_string()))?
            }
            other => return Err(bad(format!("expected a window line, got {other:?}"))),
        };
        if lines.next() != Some(HEADER) {
            return Err(bad("missing column header".into()));
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields in {line:?}")));
            }
            let metric = |s: &str| -> Result<Option<f64>> {
                match s {
                    "NA" => Ok(None),
                    v => v
                        .parse()
                        .map(Some)
                        .map_err(|_| bad(format!("bad value {v:?}"))),
                }
            };
            let counts = if f[1] == "-" {
                None
            } else {
                let n = |s: &str| {
                    s.parse::<u64>()
                        .map_err(|_| bad(format!("bad count {s:?}")))
                };
                Some(ConfusionMatrix::new(n(f[1])?, n(f[2])?, n(f[3])?, n(f[4])?))
            };
            rows.push(Row {
                scope: f[0].to_string(),
                counts,
                accuracy: metric(f[5])?,
                sensitivity: metric(f[6])?,
                specificity: metric(f[7])?,
                auc: metric(f[8])?,
            });
        }
        Ok(Evaluation { window, rows })
    }
}

/// `dir/evaluation.tsv` and `dir/*/evaluation.tsv`, in path order.
fn result_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let own = dir.join(EVALUATION_FILE);
    if own.is_file() {
        files.push(own);
    }
    let entries =
        fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut subdirs = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
            .path();
        if path.join(EVALUATION_FILE).is_file() {
            subdirs.push(path.join(EVALUATION_FILE));
        }
    }
    subdirs.sort();
    files.extend(subdirs);
    Ok(files)
}

/// One `(window, row)` per result file, ordered by window.
pub fn collect(dir: &Path, scope: &str) -> Result<Vec<(HuWindow, Row)>> {
    let files = result_files(dir)?;
    if files.is_empty() {
        return Err(Error::Format(format!(
            "no {EVALUATION_FILE} found in {} or its subdirectories",
            dir.display()
        )));
    }
    let mut table = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let eval = Evaluation::parse(&text, &path)?;
        let row = eval
            .rows
            .into_iter()
            .find(|r| r.scope == scope)
            .ok_or_else(|| Error::Format(format!("{} has no {scope:?} row", path.display())))?;
        table.push((eval.window, row));
    }
    table.sort_by(|a, b| {
        (a.0.lo(), a.0.hi())
            .partial_cmp(&(b.0.lo(), b.0.hi()))
            .expect("finite windows")
    });
    Ok(table)
}

fn cells(window: &HuWindow, row: &Row) -> [String; 5] {
    let pct = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{}%", round_percent(x)));
    [
        window.to_string(),
        pct(row.accuracy),
        pct(row.sensitivity),
        pct(row.specificity),
        row.auc.map_or_else(|| "NA".into(), |a| format!("{a:.2}")),
    ]
}

pub fn render(table: &[(HuWindow, Row)], format: Format) -> String {
    let body: Vec<[String; 5]> = table.iter().map(|(w, r)| cells(w, r)).collect();
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str(&COLUMNS.join(","));
            out.push('\n');
            for row in &body {
                let plain: Vec<String> = row
                    .iter()
                    .map(|c| c.trim_end_matches('%').to_string())
                    .collect();
                out.push_str(&plain.join(","));
                out.push('\n');
            }
        }
        Format::Text => {
            let mut widths = COLUMNS.map(str::len);
            for row in &body {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.len());
                }
            }
            let line = |cols: &[String]| {
                let padded: Vec<String> = cols
                    .iter()
                    .zip(widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect();
                padded.join("  ").trim_end().to_string() + "\n"
            };
            out.push_str(&line(&COLUMNS.map(String::from)));
            for row in &body {
                out.push_str(&line(row));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Evaluation {
        let fold = Row::from_matrix("fold0", ConfusionMatrix::new(1, 16, 1, 2), Some(0.84));
        Evaluation {
            window: HuWindow::new(-1000.0, 130.0).unwrap(),
            rows: vec![fold.clone(), Row::mean("mean", &[fold])],
        }
    }

    #[test]
    fn evaluation_roundtrip() {
        let e = sample();
        let text = e.to_text("pecnn test");
        let back = Evaluation::parse(&text, Path::new("x")).unwrap();
        assert_eq!(back.window, e.window);
        assert_eq!(back.rows[0].counts, e.rows[0].counts);
        assert_eq!(back.rows[1].counts, None);
        assert!((back.rows[1].accuracy.unwrap() - 0.85).abs() < 1e-6);
    }

    #[test]
    fn table_row_matches_rounded_percentages() {
        let e = sample();
        let table = vec![(e.window, e.rows[0].clone())];
        let text = render(&table, Format::Text);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), COLUMNS);
        assert!(lines[1].starts_with("-1000 to +130"));
        assert!(lines[1].contains("85%") && lines[1].contains("33%") && lines[1].contains("94%"));
        let csv = render(&table, Format::Csv);
        assert_eq!(
            csv,
            "HU,Accuracy,Sensitivity,Specificity,AUC\n-1000 to +130,85,33,94,0.84\n"
        );
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(Evaluation::parse("nonsense", Path::new("x")).is_err());
        assert!(Evaluation::parse("window\t-1000\t130\nbad header", Path::new("x")).is_err());
    }
}
