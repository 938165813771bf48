//! Benchmark report rows, their CSV form, and the summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::Path;

use saea_core::SurrogateKind;

use crate::{BenchError, Result};

pub const HEADER: [&str; 10] = [
    "dataset",
    "d",
    "m",
    "surrogate",
    "h",
    "fit_seconds",
    "timeout",
    "train_seconds",
    "seed",
    "host",
];

pub const TIMEOUT_MARKER: &str = "TIMEOUT";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitTime {
    Seconds(f64),
    Timeout,
}

/// One `fit-bench` result.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dataset: String,
    pub d: usize,
    pub m: usize,
    pub surrogate: SurrogateKind,
    /// PLS components; `None` for plain Kriging.
    pub h: Option<usize>,
    pub fit: FitTime,
    /// Wall-clock budget in seconds, if one was set.
    pub timeout: Option<f64>,
    pub train_seconds: f64,
    pub seed: u64,
    pub host: String,
}

impl BenchRow {
    fn record(&self) -> [String; 10] {
        [
            self.dataset.clone(),
            self.d.to_string(),
            self.m.to_string(),
            self.surrogate.to_string(),
            self.h.map(|h| h.to_string()).unwrap_or_default(),
            match self.fit {
                FitTime::Seconds(s) => format!("{s:.3}"),
                FitTime::Timeout => TIMEOUT_MARKER.to_string(),
            },
            self.timeout.map(|t| format!("{t}")).unwrap_or_default(),
            format!("{:.3}", self.train_seconds),
            self.seed.to_string(),
            self.host.clone(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> std::result::Result<Self, String> {
        let field = |i: usize| rec.get(i).ok_or_else(|| format!("missing column `{}`", HEADER[i]));
        let num = |i: usize| -> std::result::Result<f64, String> {
            let v = field(i)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| format!("bad {} `{v}`", HEADER[i]))
        };
        let int = |i: usize| -> std::result::Result<u64, String> {
            let v = field(i)?;
            v.parse().map_err(|_| format!("bad {} `{v}`", HEADER[i]))
        };
        if rec.len() != HEADER.len() {
            return Err(format!("expected {} columns, found {}", HEADER.len(), rec.len()));
        }
        let surrogate: SurrogateKind = field(3)?.parse()?;
        let h = match field(4)? {
            "" => None,
            _ => Some(int(4)? as usize),
        };
        let fit = match field(5)? {
            TIMEOUT_MARKER => FitTime::Timeout,
            _ => FitTime::Seconds(num(5)?),
        };
        let timeout = match field(6)? {
            "" => None,
            _ => Some(num(6)?),
        };
        if fit == FitTime::Timeout && timeout.is_none() {
            return Err("TIMEOUT row without a budget".into());
        }
        Ok(Self {
            dataset: field(0)?.to_string(),
            d: int(1)? as usize,
            m: int(2)? as usize,
            surrogate,
            h,
            fit,
            timeout,
            train_seconds: num(7)?,
            seed: int(8)?,
            host: field(9)?.to_string(),
        })
    }
}

/// Appends `row`, writing the header first if the file is new or empty.
pub fn append_row(path: &Path, row: &BenchRow) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    if !fresh {
        // Refuse to append to a file with a different layout.
        read_rows(path)?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| BenchError::file(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(HEADER).map_err(|e| BenchError::file(path, e))?;
    }
    w.write_record(row.record()).map_err(|e| BenchError::file(path, e))?;
    w.flush().map_err(|e| BenchError::file(path, e))
}

pub fn to_csv_string(rows: &[BenchRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(r.record()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn read_rows(path: &Path) -> Result<Vec<BenchRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::file(path, e))?;
    parse_rows(&text).map_err(|m| BenchError::file(path, format!("schema mismatch: {m}")))
}

pub fn parse_rows(text: &str) -> std::result::Result<Vec<BenchRow>, String> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().ne(HEADER) {
        return Err(format!(
            "header `{}` is not `{}`",
            header.iter().collect::<Vec<_>>().join(","),
            HEADER.join(",")
        ));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| e.to_string())?;
            BenchRow::parse(&rec).map_err(|e| format!("row {}: {e}", i + 1))
        })
        .collect()
}

/// `HH:MM:SS` with hundredths of a second.
pub fn hms(seconds: f64) -> String {
    let cs = (seconds * 100.0).round() as u64;
    let (h, rem) = (cs / 360_000, cs % 360_000);
    let (m, rem) = (rem / 6000, rem % 6000);
    format!("{h:02}:{m:02}:{:02}.{:02}", rem / 100, rem % 100)
}

#[derive(Debug, Default, Clone, PartialEq)]
struct Line {
    d: usize,
    kpls: Option<BenchRow>,
    kriging: Option<BenchRow>,
}

/// Latest row per (dataset, surrogate), ordered by phenotype length.
fn collate(rows: &[BenchRow]) -> Vec<(String, Line)> {
    let mut by_name: BTreeMap<String, Line> = BTreeMap::new();
    for r in rows {
        let line = by_name.entry(r.dataset.clone()).or_default();
        line.d = r.d;
        match r.surrogate {
            SurrogateKind::Kpls => line.kpls = Some(r.clone()),
            SurrogateKind::Kriging => line.kriging = Some(r.clone()),
        }
    }
    let mut lines: Vec<_> = by_name.into_iter().collect();
    lines.sort_by(|a, b| a.1.d.cmp(&b.1.d).then_with(|| a.0.cmp(&b.0)));
    lines
}

fn cell(r: &Option<BenchRow>) -> String {
    match r {
        Some(BenchRow {
            fit: FitTime::Seconds(s),
            ..
        }) => hms(*s),
        _ => "-".to_string(),
    }
}

/// Text table with one line per dataset. Missing or timed-out fits show `-`.
pub fn render_table(rows: &[BenchRow]) -> String {
    let lines = collate(rows);
    let mut table = vec![[
        "Dataset".to_string(),
        "d".to_string(),
        "KPLS".to_string(),
        "Kriging".to_string(),
    ]];
    for (name, l) in &lines {
        table.push([name.clone(), l.d.to_string(), cell(&l.kpls), cell(&l.kriging)]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in table.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 6)).unwrap();
        }
    }
    let timeouts: Vec<String> = rows
        .iter()
        .filter(|r| r.fit == FitTime::Timeout)
        .map(|r| format!("{} {} (budget {} s)", r.dataset, r.surrogate, r.timeout.unwrap_or(0.0)))
        .collect();
    if !timeouts.is_empty() {
        writeln!(out, "\n- did not complete within budget: {}", timeouts.join(", ")).unwrap();
    }
    let hosts: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.host.as_str()).collect();
    for h in hosts {
        writeln!(out, "host: {h}").unwrap();
    }
    out
}

/// Long-form CSV for plotting: fit, training and their sum per row.
pub fn plot_csv(rows: &[BenchRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "d",
        "surrogate",
        "fit_seconds",
        "train_seconds",
        "total_seconds",
        "timed_out",
    ])
    .expect("in-memory write");
    for (_, line) in collate(rows) {
        for r in [line.kpls, line.kriging].into_iter().flatten() {
            let (fit, total) = match r.fit {
                FitTime::Seconds(s) => (format!("{s:.3}"), format!("{:.3}", s + r.train_seconds)),
                FitTime::Timeout => (String::new(), String::new()),
            };
            w.write_record([
                r.dataset.clone(),
                r.d.to_string(),
                r.surrogate.to_string(),
                fit,
                format!("{:.3}", r.train_seconds),
                total,
                (r.fit == FitTime::Timeout).to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, d: usize, kind: SurrogateKind, fit: FitTime) -> BenchRow {
        BenchRow {
            dataset: dataset.into(),
            d,
            m: 100,
            surrogate: kind,
            h: (kind == SurrogateKind::Kpls).then_some(2),
            fit,
            timeout: Some(7200.0),
            train_seconds: 1.5,
            seed: 0,
            host: "cpu, with comma (1 cores)".into(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            row("iris", 336, SurrogateKind::Kpls, FitTime::Seconds(0.25)),
            row("yeast", 1338, SurrogateKind::Kriging, FitTime::Timeout),
        ];
        let text = to_csv_string(&rows);
        assert!(text.starts_with("dataset,d,m,surrogate,h,fit_seconds,timeout,train_seconds,seed,host\n"));
        assert!(text.contains("TIMEOUT,7200,"));
        assert_eq!(parse_rows(&text).unwrap(), rows);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let err = parse_rows("dataset,d\niris,336\n").unwrap_err();
        assert!(err.contains("header"), "{err}");
    }

    #[test]
    fn timeout_needs_a_budget() {
        let mut r = row("a", 3, SurrogateKind::Kriging, FitTime::Timeout);
        r.timeout = None;
        assert!(parse_rows(&to_csv_string(&[r])).is_err());
    }

    #[test]
    fn hms_format() {
        assert_eq!(hms(0.0), "00:00:00.00");
        assert_eq!(hms(25.0), "00:00:25.00");
        assert_eq!(hms(6758.0), "01:52:38.00");
        assert_eq!(hms(638.456), "00:10:38.46");
    }

    #[test]
    fn single_kpls_row_gives_a_dash_for_kriging() {
        let t = render_table(&[row("iris", 336, SurrogateKind::Kpls, FitTime::Seconds(25.0))]);
        let line = t.lines().find(|l| l.starts_with("iris")).unwrap();
        assert!(line.contains("00:00:25.00"));
        assert!(line.trim_end().ends_with('-'));
    }

    #[test]
    fn table_is_ordered_by_phenotype_length_and_keeps_the_latest_row() {
        let rows = vec![
            row("abalone", 6264, SurrogateKind::Kpls, FitTime::Seconds(638.0)),
            row("iris", 336, SurrogateKind::Kpls, FitTime::Seconds(30.0)),
            row("iris", 336, SurrogateKind::Kpls, FitTime::Seconds(25.0)),
            row("iris", 336, SurrogateKind::Kriging, FitTime::Seconds(6758.0)),
        ];
        let t = render_table(&rows);
        let body: Vec<&str> = t.lines().skip(2).take(2).collect();
        assert!(body[0].starts_with("iris") && body[0].contains("00:00:25.00") && body[0].contains("01:52:38.00"));
        assert!(body[1].starts_with("abalone"));
        let plot = plot_csv(&rows);
        assert_eq!(plot.lines().count(), 4);
        assert!(plot.contains("iris,336,kpls,25.000,1.500,26.500,false"));
    }
}
