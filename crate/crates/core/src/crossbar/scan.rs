//! Frame scheduling and per-sensor acquisition over the array.

use std::collections::HashSet;

use num_complex::Complex64;
use rayon::prelude::*;

use super::{equivalent_impedance, forward_impedances, SensorGrid, TerminationPolicy};
use crate::chain::{Chain, Flags};
use crate::error::{Error, Result};
use crate::rng;
use crate::tdreadout::{parallel_resistance, Phasor};

/// Conversion time of one sensor: six excitation cycles at 125 kHz.
pub const DEFAULT_T_MEAS: f64 = 48e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPlan {
    pub ordering: Vec<(usize, usize)>,
    pub t_meas: f64,
}

impl ScanPlan {
    pub fn row_major(rows: usize, cols: usize, t_meas: f64) -> Self {
        Self {
            ordering: (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect(),
            t_meas,
        }
    }

    pub fn for_grid(g: &SensorGrid) -> Self {
        Self::row_major(g.rows(), g.cols(), DEFAULT_T_MEAS)
    }

    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    pub fn frame_time(&self) -> f64 {
        self.ordering.len() as f64 * self.t_meas
    }

    pub fn frame_rate(&self) -> f64 {
        1.0 / self.frame_time()
    }

    /// Checks that every element of `g` is visited exactly once.
    pub fn validate(&self, g: &SensorGrid) -> Result<()> {
        if !(self.t_meas > 0.0 && self.t_meas.is_finite()) {
            return Err(crate::error::domain("t_meas", self.t_meas));
        }
        let mut seen = HashSet::with_capacity(self.ordering.len());
        for &(r, c) in &self.ordering {
            if r >= g.rows() || c >= g.cols() {
                return Err(Error::Config(format!("scan visits ({r}, {c}) outside the grid")));
            }
            if !seen.insert((r, c)) {
                return Err(Error::Config(format!("scan visits ({r}, {c}) twice")));
            }
        }
        if seen.len() != g.len() {
            return Err(Error::Config(format!(
                "scan covers {} of {} sensors",
                seen.len(),
                g.len()
            )));
        }
        Ok(())
    }
}

/// How each sensor's impedance becomes a reading.
#[derive(Clone, Copy)]
pub enum Acquisition<'a> {
    /// The network impedance is recorded directly.
    Ideal,
    /// Each network impedance is measured through the acquisition chain.
    FullChain { chain: &'a Chain, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorReading {
    pub row: usize,
    pub col: usize,
    /// Impedance the network presents at this selection.
    pub z_network: Complex64,
    /// Reported impedance, absent when the channel flagged.
    pub z: Option<Complex64>,
    pub phasor: Option<Phasor>,
    pub flags: Flags,
    pub conversions: u32,
}

impl SensorReading {
    pub fn r_meas(&self) -> Option<f64> {
        self.z.map(parallel_resistance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub rows: usize,
    pub cols: usize,
    pub policy: TerminationPolicy,
    pub f_exc: f64,
    /// Readings in scan order.
    pub readings: Vec<SensorReading>,
    pub plan: ScanPlan,
}

impl FrameReport {
    /// Nominal frame time of the plan.
    pub fn frame_time(&self) -> f64 {
        self.plan.frame_time()
    }

    /// Model time including range retries.
    pub fn elapsed(&self) -> f64 {
        self.readings.iter().map(|r| r.conversions as f64).sum::<f64>() * self.plan.t_meas
    }

    /// Measured resistances in row-major order; flagged sensors are `None`.
    pub fn measured(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.rows * self.cols];
        for r in &self.readings {
            out[r.row * self.cols + r.col] = r.r_meas();
        }
        out
    }

    pub fn flagged(&self) -> usize {
        self.readings.iter().filter(|r| !r.flags.ok()).count()
    }
}

/// Scans every sensor in plan order. Per-sensor conditions are recorded as
/// flags; only configuration and solver failures abort the frame.
pub fn scan_frame(
    g: &SensorGrid,
    plan: &ScanPlan,
    pol: TerminationPolicy,
    f_exc: f64,
    acq: Acquisition<'_>,
) -> Result<FrameReport> {
    plan.validate(g)?;
    let network: Vec<Complex64> = if plan.len() == g.len() {
        let all = forward_impedances(g, pol, f_exc)?;
        plan.ordering.iter().map(|&(r, c)| all[r * g.cols() + c]).collect()
    } else {
        plan.ordering
            .iter()
            .map(|&(r, c)| equivalent_impedance(g, r, c, pol, f_exc))
            .collect::<Result<_>>()?
    };
    let readings = match acq {
        Acquisition::Ideal => plan
            .ordering
            .iter()
            .zip(&network)
            .map(|(&(row, col), &z)| SensorReading {
                row,
                col,
                z_network: z,
                z: Some(z),
                phasor: None,
                flags: Flags::default(),
                conversions: 1,
            })
            .collect(),
        Acquisition::FullChain { chain, seed } => plan
            .ordering
            .par_iter()
            .zip(network.par_iter())
            .map(|(&(row, col), &z)| {
                let m = chain.measure(z, rng::derive_seed(seed, &[row as u64, col as u64]))?;
                Ok(SensorReading {
                    row,
                    col,
                    z_network: z,
                    z: m.z,
                    phasor: m.phasor,
                    flags: m.flags,
                    conversions: m.attempts,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(FrameReport {
        rows: g.rows(),
        cols: g.cols(),
        policy: pol,
        f_exc,
        readings,
        plan: plan.clone(),
    })
}
