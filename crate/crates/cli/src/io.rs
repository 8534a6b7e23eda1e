//! Plain-text formats: data CSV, coefficient CSV and `#` comment headers.
//!
//! All floats are written with 17 significant digits, which reads back to the
//! identical `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use svar::{MultiSeries, VarModel};

use crate::error::{CliError, CliResult};

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// `# key: value` lines.
pub fn comment_block(lines: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in lines {
        for (n, part) in v.lines().enumerate() {
            if n == 0 {
                let _ = writeln!(out, "# {k}: {part}");
            } else {
                let _ = writeln!(out, "#   {part}");
            }
        }
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Parsed data file: optional column names and the `T x K` series.
#[derive(Debug, Clone)]
pub struct DataFile {
    pub names: Option<Vec<String>>,
    pub series: MultiSeries,
}

/// Reads a comma-separated numeric matrix. A first row in which no cell
/// parses as a number is taken as the header. Lines starting with `#` are
/// skipped. Errors name the line and column (both 1-based).
pub fn parse_data(text: &str, source: &str) -> CliResult<DataFile> {
    let mut names = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (n, rec) in reader(text).records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(format!("{source}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if n == 0 && rec.iter().all(|c| c.parse::<f64>().is_err()) {
            names = Some(rec.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(rec.len());
            continue;
        }
        let k = *width.get_or_insert(rec.len());
        if rec.len() != k {
            return Err(CliError::input(format!(
                "{source}: line {line} has {} fields, expected {k}",
                rec.len()
            )));
        }
        let mut row = Vec::with_capacity(k);
        for (c, cell) in rec.iter().enumerate() {
            let label = names
                .as_ref()
                .and_then(|h: &Vec<String>| h.get(c))
                .map(|h| format!(" ('{h}')"))
                .unwrap_or_default();
            let v: f64 = cell.parse().map_err(|_| {
                CliError::input(format!(
                    "{source}: line {line}, column {}{label}: cannot parse '{cell}' as a number",
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::input(format!(
                    "{source}: line {line}, column {}{label}: value '{cell}' is not finite",
                    c + 1
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{source}: no data rows")));
    }
    Ok(DataFile {
        names,
        series: MultiSeries::from_rows(&rows)?,
    })
}

pub fn read_data(path: &Path) -> CliResult<DataFile> {
    parse_data(&read_file(path)?, &path.display().to_string())
}

/// Header `y0,y1,...` followed by one row per time point.
pub fn format_data(series: &MultiSeries, comments: &str) -> String {
    let mut out = String::from(comments);
    let k = series.dim();
    let header: Vec<String> = (0..k).map(|i| format!("y{i}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in series.values().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| num(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Long format `param,lag,row,col,value` with `param` one of `A` (lag >= 1),
/// `Sigma` and `mu` (lag 0, col 0). Every entry is listed, zeros included.
pub fn format_coefficients(model: &VarModel, comments: &str) -> String {
    let k = model.dim();
    let mut out = String::from(comments);
    out.push_str("param,lag,row,col,value\n");
    for lag in 1..=model.order() {
        let a = model.coeff(lag);
        for i in 0..k {
            for j in 0..k {
                let _ = writeln!(out, "A,{lag},{i},{j},{}", num(a[(i, j)]));
            }
        }
    }
    let s = model.noise_cov();
    for i in 0..k {
        for j in 0..k {
            let _ = writeln!(out, "Sigma,0,{i},{j},{}", num(s[(i, j)]));
        }
    }
    for i in 0..k {
        let _ = writeln!(out, "mu,0,{i},0,{}", num(model.mean()[i]));
    }
    out
}

/// Inverse of [`format_coefficients`]. Missing `A` and `mu` entries are zero;
/// `Sigma` must be complete.
pub fn parse_coefficients(text: &str, source: &str) -> CliResult<VarModel> {
    let bad = |line: u64, msg: String| CliError::input(format!("{source}: line {line}: {msg}"));
    let mut a: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut sigma: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut mu: BTreeMap<usize, f64> = BTreeMap::new();
    let mut seen_header = false;
    for rec in reader(text).records() {
        let rec = rec.map_err(|e| CliError::input(format!("{source}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if !seen_header {
            seen_header = true;
            if rec.iter().collect::<Vec<_>>() == ["param", "lag", "row", "col", "value"] {
                continue;
            }
        }
        if rec.len() != 5 {
            return Err(bad(line, format!("expected 5 fields, found {}", rec.len())));
        }
        let index = |c: usize| -> CliResult<usize> {
            rec[c]
                .parse()
                .map_err(|_| bad(line, format!("column {}: '{}' is not a non-negative integer", c + 1, &rec[c])))
        };
        let (lag, row, col) = (index(1)?, index(2)?, index(3)?);
        let value: f64 = rec[4]
            .parse()
            .map_err(|_| bad(line, format!("column 5: cannot parse '{}' as a number", &rec[4])))?;
        let dup = match &rec[0] {
            "A" if lag >= 1 => a.insert((lag, row, col), value).is_some(),
            "A" => return Err(bad(line, "coefficient lags start at 1".into())),
            "Sigma" => sigma.insert((row, col), value).is_some(),
            "mu" if col == 0 => mu.insert(row, value).is_some(),
            "mu" => return Err(bad(line, "mu entries use col 0".into())),
            other => return Err(bad(line, format!("unknown param '{other}' (expected A, Sigma or mu)"))),
        };
        if dup {
            return Err(bad(line, "duplicate entry".into()));
        }
    }
    let k = sigma.keys().map(|(i, j)| i.max(j) + 1).max().unwrap_or(0);
    if k == 0 || sigma.len() != k * k {
        return Err(CliError::input(format!(
            "{source}: Sigma must list all K x K entries (found {} for K = {k})",
            sigma.len()
        )));
    }
    if let Some(((_, i, j), _)) = a.iter().find(|((_, i, j), _)| *i >= k || *j >= k) {
        return Err(CliError::input(format!("{source}: A entry ({i}, {j}) exceeds K = {k}")));
    }
    if let Some((i, _)) = mu.iter().find(|(i, _)| **i >= k) {
        return Err(CliError::input(format!("{source}: mu entry {i} exceeds K = {k}")));
    }
    let order = a.keys().map(|(l, _, _)| *l).max().unwrap_or(0);
    let coeffs = (1..=order)
        .map(|l| DMatrix::from_fn(k, k, |i, j| a.get(&(l, i, j)).copied().unwrap_or(0.0)))
        .collect();
    let noise = DMatrix::from_fn(k, k, |i, j| sigma[&(i, j)]);
    let mean = DVector::from_fn(k, |i, _| mu.get(&i).copied().unwrap_or(0.0));
    Ok(VarModel::new(coeffs, noise, mean)?)
}

/// A model from JSON or, for `.csv` paths, the coefficient format.
pub fn read_model(path: &Path) -> CliResult<VarModel> {
    let text = read_file(path)?;
    let source = path.display().to_string();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_coefficients(&text, &source)
    } else {
        VarModel::from_json(&text).map_err(|e| CliError::input(format!("{source}: {e}")))
    }
}
