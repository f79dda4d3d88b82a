//! Text formats: resistance matrices, frame reports and PGM heatmaps.

use super::{FrameReport, SensorGrid};
use crate::error::{Error, Result};

fn parse_header(line: &str, unit: &str) -> Option<(usize, usize)> {
    let mut rows = None;
    let mut cols = None;
    let mut unit_ok = false;
    for tok in line.trim_start_matches('#').split_whitespace() {
        match tok.split_once('=') {
            Some(("rows", v)) => rows = v.parse().ok(),
            Some(("cols", v)) => cols = v.parse().ok(),
            Some(("unit", v)) => unit_ok = v == unit,
            _ => {}
        }
    }
    match (rows, cols, unit_ok) {
        (Some(r), Some(c), true) => Some((r, c)),
        _ => None,
    }
}

/// Parses a CSV matrix with a `# rows=<n> cols=<m> unit=<unit>` header.
/// Other `#` lines and blank lines are ignored.
pub fn parse_matrix(text: &str, unit: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut shape = None;
    let mut values = Vec::new();
    let mut row_count = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if shape.is_none() {
                shape = parse_header(line, unit);
            }
            continue;
        }
        let Some((_, cols)) = shape else {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("data before `# rows=<n> cols=<m> unit={unit}` header"),
            });
        };
        let before = values.len();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("`{}` is not a number", cell.trim()),
            })?;
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {cols} values, found {}", values.len() - before),
            });
        }
        row_count += 1;
    }
    let (rows, cols) = shape.ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("missing `# rows=<n> cols=<m> unit={unit}` header"),
    })?;
    if row_count != rows {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: format!("expected {rows} rows, found {row_count}"),
        });
    }
    Ok((rows, cols, values))
}

fn write_matrix(rows: usize, cols: usize, values: &[f64], unit: &str, comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        s.push_str(&format!("# {c}\n"));
    }
    s.push_str(&format!("# rows={rows} cols={cols} unit={unit}\n"));
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

impl SensorGrid {
    /// Reads a resistance matrix and, optionally, a sibling capacitance file.
    pub fn from_csv(text: &str, capacitance: Option<&str>) -> Result<Self> {
        let (rows, cols, r) = parse_matrix(text, "ohm")?;
        let g = Self::new(rows, cols, r)?;
        match capacitance {
            None => Ok(g),
            Some(ct) => {
                let (cr, cc, c) = parse_matrix(ct, "F")?;
                if (cr, cc) != (rows, cols) {
                    return Err(Error::Config(format!(
                        "capacitance file is {cr}x{cc}, grid is {rows}x{cols}"
                    )));
                }
                g.with_capacitances(c)
            }
        }
    }

    pub fn to_csv(&self, comments: &[String]) -> String {
        write_matrix(self.rows, self.cols, &self.r, "ohm", comments)
    }
}

/// Writes a resistance matrix in the grid format.
pub fn matrix_csv(rows: usize, cols: usize, values: &[f64], comments: &[String]) -> String {
    write_matrix(rows, cols, values, "ohm", comments)
}

/// Affine map of log10(R) onto 0..=255.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSpan {
    pub lo: f64,
    pub hi: f64,
}

impl Default for LogSpan {
    fn default() -> Self {
        Self { lo: 20.0, hi: 500e3 }
    }
}

impl LogSpan {
    pub fn level(&self, r: f64) -> u8 {
        let t = (r.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10());
        (255.0 * t.clamp(0.0, 1.0)).round() as u8
    }
}

/// ASCII PGM (P2, maxval 255) of a row-major resistance map. Missing
/// values are written as 0.
pub fn pgm(rows: usize, cols: usize, values: &[Option<f64>], span: LogSpan, comments: &[String]) -> String {
    let mut s = String::from("P2\n");
    for c in comments {
        s.push_str(&format!("# {c}\n"));
    }
    s.push_str(&format!(
        "# value = round(255 * (log10(R) - log10({})) / (log10({}) - log10({}))), clamped to 0..255; missing = 0\n",
        span.lo, span.hi, span.lo
    ));
    s.push_str(&format!("{cols} {rows}\n255\n"));
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v.map_or(0, |x| span.level(x)).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or(String::new(), |x| format!("{x:.prec$}"))
}

impl FrameReport {
    /// Per-sensor rows in scan order. `extra` appends named columns, one
    /// value per sensor indexed row-major.
    pub fn to_csv(&self, g: &SensorGrid, comments: &[String], extra: &[(&str, Vec<Option<f64>>)]) -> String {
        let mut s = String::new();
        for c in comments {
            s.push_str(&format!("# {c}\n"));
        }
        s.push_str(&format!(
            "# policy={} f_exc={} frame_time={} elapsed={}\n",
            self.policy,
            self.f_exc,
            self.frame_time(),
            self.elapsed()
        ));
        s.push_str("row,col,r_true,r_meas,theta,flags");
        for (name, _) in extra {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for rd in &self.readings {
            let k = rd.row * self.cols + rd.col;
            s.push_str(&format!(
                "{},{},{},{},{},{}",
                rd.row,
                rd.col,
                g.r(rd.row, rd.col),
                opt(rd.r_meas(), 4),
                opt(rd.z.map(|z| z.arg()), 6),
                rd.flags.label()
            ));
            for (_, col) in extra {
                s.push(',');
                s.push_str(&opt(col[k], 6));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let g = SensorGrid::new(2, 3, vec![20.0, 1e3, 4.7e3, 12345.678, 5e5, 33.0]).unwrap();
        let text = g.to_csv(&["sample".into()]);
        assert!(text.contains("# rows=2 cols=3 unit=ohm\n"));
        assert_eq!(SensorGrid::from_csv(&text, None).unwrap(), g);
    }

    #[test]
    fn capacitance_sibling() {
        let g = SensorGrid::uniform(1, 2, 1e3).unwrap();
        let caps = "# rows=1 cols=2 unit=F\n1e-12,2e-12\n";
        let g2 = SensorGrid::from_csv(&g.to_csv(&[]), Some(caps)).unwrap();
        assert_eq!(g2.capacitances().unwrap(), &[1e-12, 2e-12]);
        assert!(SensorGrid::from_csv(&g.to_csv(&[]), Some("# rows=2 cols=1 unit=F\n1\n2\n")).is_err());
    }

    #[test]
    fn parse_errors_carry_line() {
        assert!(matches!(parse_matrix("1,2\n", "ohm"), Err(Error::Parse { line: 1, .. })));
        let bad = "# rows=2 cols=2 unit=ohm\n1,2\n3,x\n";
        assert!(matches!(parse_matrix(bad, "ohm"), Err(Error::Parse { line: 3, .. })));
        let short = "# rows=2 cols=2 unit=ohm\n1,2\n";
        assert!(parse_matrix(short, "ohm").is_err());
        assert!(parse_matrix("# rows=1 cols=1 unit=F\n1\n", "ohm").is_err());
    }

    #[test]
    fn pgm_levels_span_the_range() {
        let span = LogSpan::default();
        assert_eq!(span.level(20.0), 0);
        assert_eq!(span.level(500e3), 255);
        assert_eq!(span.level(1.0), 0);
        let text = pgm(1, 3, &[Some(20.0), None, Some(500e3)], span, &[]);
        assert!(text.starts_with("P2\n"));
        assert!(text.ends_with("3 1\n255\n0 0 255\n"));
    }
}
