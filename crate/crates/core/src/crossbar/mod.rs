//! Nodal model of an R×C resistive crossbar read through row and column
//! multiplexers, with sneak paths through the unselected elements.

mod format;
pub(crate) mod lu;
mod scan;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub use format::{matrix_csv, parse_matrix, pgm, LogSpan};
pub use scan::{scan_frame, Acquisition, FrameReport, ScanPlan, SensorReading, DEFAULT_T_MEAS};

/// Default array shape: 11 × 23 = 253 sensors.
pub const DEFAULT_ROWS: usize = 11;
pub const DEFAULT_COLS: usize = 23;
pub const DEFAULT_MUX_R_ON: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    rows: usize,
    cols: usize,
    r: Vec<f64>,
    c_par: Option<Vec<f64>>,
    /// Series resistance of each selected line's switch (ohm).
    pub mux_r_on: f64,
    /// Lumped capacitance from every line to ground (F).
    pub line_cap: f64,
}

impl SensorGrid {
    /// Row-major resistances with an ideal MUX and no parasitics.
    pub fn new(rows: usize, cols: usize, r: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("grid shape {rows}x{cols} is empty")));
        }
        if r.len() != rows * cols {
            return Err(Error::Config(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                r.len()
            )));
        }
        if let Some((k, &v)) = r.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!(
                "resistance at ({}, {}) must be positive, got {v}",
                k / cols,
                k % cols
            )));
        }
        Ok(Self {
            rows,
            cols,
            r,
            c_par: None,
            mux_r_on: 0.0,
            line_cap: 0.0,
        })
    }

    pub fn uniform(rows: usize, cols: usize, r: f64) -> Result<Self> {
        Self::new(rows, cols, vec![r; rows * cols])
    }

    pub fn with_mux_r_on(mut self, r_on: f64) -> Result<Self> {
        if !(r_on >= 0.0 && r_on.is_finite()) {
            return Err(crate::error::domain("mux_r_on", r_on));
        }
        self.mux_r_on = r_on;
        Ok(self)
    }

    pub fn with_line_cap(mut self, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(crate::error::domain("line_cap", c));
        }
        self.line_cap = c;
        Ok(self)
    }

    pub fn with_capacitances(mut self, c: Vec<f64>) -> Result<Self> {
        if c.len() != self.r.len() {
            return Err(Error::Config("capacitance matrix shape differs from grid".into()));
        }
        if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("capacitances must be non-negative".into()));
        }
        self.c_par = Some(c);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn r(&self, row: usize, col: usize) -> f64 {
        self.r[row * self.cols + col]
    }

    pub fn resistances(&self) -> &[f64] {
        &self.r
    }

    pub fn capacitances(&self) -> Option<&[f64]> {
        self.c_par.as_deref()
    }

    /// Same parasitics, new resistances.
    pub fn with_resistances(&self, r: Vec<f64>) -> Result<Self> {
        let mut g = Self::new(self.rows, self.cols, r)?;
        g.c_par = self.c_par.clone();
        g.mux_r_on = self.mux_r_on;
        g.line_cap = self.line_cap;
        Ok(g)
    }

    pub fn admittance(&self, row: usize, col: usize, omega: f64) -> Complex64 {
        let k = row * self.cols + col;
        let c = self.c_par.as_ref().map_or(0.0, |c| c[k]);
        Complex64::new(1.0 / self.r[k], omega * c)
    }

    fn line_name(&self, node: usize) -> String {
        if node < self.rows {
            format!("row {node}")
        } else {
            format!("col {}", node - self.rows)
        }
    }

    fn check_index(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::Config(format!(
                "selection ({row}, {col}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminationPolicy {
    /// Unselected lines left open.
    #[default]
    Floating,
    /// Unselected lines tied to 0 V.
    Grounded,
    /// Unselected lines tied to the drive potential.
    DrivenGuard,
}

impl TerminationPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Floating => "floating",
            Self::Grounded => "grounded",
            Self::DrivenGuard => "driven_guard",
        }
    }
}

impl fmt::Display for TerminationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerminationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floating" => Ok(Self::Floating),
            "grounded" => Ok(Self::Grounded),
            "driven_guard" => Ok(Self::DrivenGuard),
            other => Err(Error::Config(format!("unknown termination policy `{other}`"))),
        }
    }
}

/// Result of one nodal solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Drive voltage over sensed current.
    pub z: Complex64,
    /// Line potentials, rows first then columns.
    pub potentials: Vec<Complex64>,
    /// ‖G·v − i‖ / ‖i‖ of the solve.
    pub residual: f64,
}

const DRIVE: f64 = 1.0;
const RESIDUAL_LIMIT: f64 = 1e-9;

/// Potential a line is tied to, if any.
fn tie(g: &SensorGrid, node: usize, sel_row: usize, sel_col: usize, pol: TerminationPolicy) -> Option<f64> {
    if node == sel_row {
        return Some(DRIVE);
    }
    if node == g.rows + sel_col {
        return Some(0.0);
    }
    match pol {
        TerminationPolicy::Floating => None,
        TerminationPolicy::Grounded => Some(0.0),
        TerminationPolicy::DrivenGuard => Some(DRIVE),
    }
}

/// Full nodal solve for one selected element. Tied lines reach their
/// potential through `mux_r_on`; with an ideal MUX they are fixed nodes.
pub fn solve_selection(
    g: &SensorGrid,
    sel_row: usize,
    sel_col: usize,
    pol: TerminationPolicy,
    f: f64,
) -> Result<Selection> {
    g.check_index(sel_row, sel_col)?;
    let omega = TAU * f;
    let n_lines = g.rows + g.cols;
    let ideal = g.mux_r_on == 0.0;
    let y_mux = if ideal { 0.0 } else { 1.0 / g.mux_r_on };
    let y_cap = Complex64::new(0.0, omega * g.line_cap);
    let zero = Complex64::new(0.0, 0.0);

    // every line is an unknown unless tied through an ideal switch
    let ties: Vec<Option<f64>> = (0..n_lines).map(|k| tie(g, k, sel_row, sel_col, pol)).collect();
    let mut index = vec![usize::MAX; n_lines];
    let mut unknowns = Vec::new();
    for k in 0..n_lines {
        if !(ideal && ties[k].is_some()) {
            index[k] = unknowns.len();
            unknowns.push(k);
        }
    }
    let n = unknowns.len();
    let mut y = vec![zero; n * n];
    let mut b = vec![zero; n];
    let fixed = |k: usize| -> Complex64 { Complex64::new(ties[k].unwrap_or(0.0), 0.0) };

    for (u, &k) in unknowns.iter().enumerate() {
        y[u * n + u] += y_cap;
        if let Some(v) = ties[k] {
            y[u * n + u] += y_mux;
            b[u] += y_mux * v;
        }
    }
    for row in 0..g.rows {
        for col in 0..g.cols {
            let ye = g.admittance(row, col, omega);
            let (a, c) = (row, g.rows + col);
            match (index[a], index[c]) {
                (usize::MAX, usize::MAX) => {}
                (ia, usize::MAX) => {
                    y[ia * n + ia] += ye;
                    b[ia] += ye * fixed(c);
                }
                (usize::MAX, ic) => {
                    y[ic * n + ic] += ye;
                    b[ic] += ye * fixed(a);
                }
                (ia, ic) => {
                    y[ia * n + ia] += ye;
                    y[ic * n + ic] += ye;
                    y[ia * n + ic] -= ye;
                    y[ic * n + ia] -= ye;
                }
            }
        }
    }

    let (v, residual) = if n == 0 {
        (Vec::new(), 0.0)
    } else {
        let lu = lu::factor(y.clone(), n).map_err(|col| Error::Singular {
            line: g.line_name(unknowns[col]),
        })?;
        let mut v = lu.solve(&b);
        let b_norm = lu::norm(&b).max(f64::MIN_POSITIVE);
        let mut r: Vec<Complex64> = lu::mat_vec(&y, n, &v).iter().zip(&b).map(|(a, b)| a - b).collect();
        if lu::norm(&r) > RESIDUAL_LIMIT * b_norm {
            let dv = lu.solve(&r);
            v.iter_mut().zip(&dv).for_each(|(x, d)| *x -= d);
            r = lu::mat_vec(&y, n, &v).iter().zip(&b).map(|(a, b)| a - b).collect();
        }
        let residual = lu::norm(&r) / b_norm;
        if residual > RESIDUAL_LIMIT {
            let worst = (0..n).max_by(|&i, &j| r[i].norm().total_cmp(&r[j].norm())).unwrap_or(0);
            return Err(Error::Singular {
                line: g.line_name(unknowns[worst]),
            });
        }
        (v, residual)
    };

    let potentials: Vec<Complex64> = (0..n_lines)
        .map(|k| if index[k] == usize::MAX { fixed(k) } else { v[index[k]] })
        .collect();
    let sense = g.rows + sel_col;
    let current = if ideal {
        (0..g.rows)
            .map(|row| g.admittance(row, sel_col, omega) * (potentials[row] - potentials[sense]))
            .sum::<Complex64>()
    } else {
        potentials[sense] * y_mux
    };
    if current.norm() == 0.0 {
        return Err(Error::Singular {
            line: g.line_name(sense),
        });
    }
    Ok(Selection {
        z: Complex64::new(DRIVE, 0.0) / current,
        potentials,
        residual,
    })
}

/// Impedance seen between the selected row drive and column sense.
pub fn equivalent_impedance(
    g: &SensorGrid,
    sel_row: usize,
    sel_col: usize,
    pol: TerminationPolicy,
    f: f64,
) -> Result<Complex64> {
    solve_selection(g, sel_row, sel_col, pol, f).map(|s| s.z)
}

/// Equivalent impedance of every element, row-major.
///
/// With floating lines and no line capacitance the network between any two
/// lines is a two-terminal reduction of one Laplacian, so a single inverse
/// serves the whole frame; other cases fall back to one solve per element.
pub fn forward_impedances(g: &SensorGrid, pol: TerminationPolicy, f: f64) -> Result<Vec<Complex64>> {
    if pol == TerminationPolicy::Floating && g.line_cap == 0.0 {
        return floating_impedances(g, f);
    }
    let mut out = Vec::with_capacity(g.len());
    for row in 0..g.rows {
        for col in 0..g.cols {
            out.push(equivalent_impedance(g, row, col, pol, f)?);
        }
    }
    Ok(out)
}

fn floating_impedances(g: &SensorGrid, f: f64) -> Result<Vec<Complex64>> {
    let omega = TAU * f;
    let n_lines = g.rows + g.cols;
    // ground the last column line; the reduced Laplacian covers the rest
    let n = n_lines - 1;
    let zero = Complex64::new(0.0, 0.0);
    let mut l = vec![zero; n * n];
    for row in 0..g.rows {
        for col in 0..g.cols {
            let ye = g.admittance(row, col, omega);
            let c = g.rows + col;
            l[row * n + row] += ye;
            if c < n {
                l[c * n + c] += ye;
                l[row * n + c] -= ye;
                l[c * n + row] -= ye;
            }
        }
    }
    let x = if n == 0 {
        Vec::new()
    } else {
        lu::factor(l, n)
            .map_err(|col| Error::Singular {
                line: g.line_name(col),
            })?
            .inverse_columns()
    };
    let at = |i: usize, j: usize| if i == n || j == n { zero } else { x[j][i] };
    let series = Complex64::new(2.0 * g.mux_r_on, 0.0);
    let mut out = Vec::with_capacity(g.len());
    for row in 0..g.rows {
        for col in 0..g.cols {
            let c = g.rows + col;
            out.push(at(row, row) + at(c, c) - at(row, c) - at(c, row) + series);
        }
    }
    Ok(out)
}

/// Parallel-equivalent resistances from [`forward_impedances`].
pub fn forward_resistances(g: &SensorGrid, pol: TerminationPolicy, f: f64) -> Result<Vec<f64>> {
    Ok(forward_impedances(g, pol, f)?
        .into_iter()
        .map(crate::tdreadout::parallel_resistance)
        .collect())
}
