use rand_distr::{Distribution, Normal};

use crate::error::{domain, Error, Result};
use crate::rng;

/// Co-prime segmented current DAC: a coarse bank of unit elements weighted
/// `fine_units + 1` and a fine bank of unit-weight elements.
#[derive(Debug, Clone, PartialEq)]
pub struct CoPrimeDacSpec {
    pub coarse_units: usize,
    pub fine_units: usize,
    /// Nominal current of a weight-1 element, in amps.
    pub unit_current: f64,
    /// Relative standard deviation of each physical element.
    pub unit_mismatch_sigma: f64,
    /// Barrel-shift element selection per bank.
    pub dem_enabled: bool,
}

impl Default for CoPrimeDacSpec {
    fn default() -> Self {
        Self {
            coarse_units: 15,
            fine_units: 16,
            unit_current: 1e-6,
            unit_mismatch_sigma: 0.0,
            dem_enabled: true,
        }
    }
}

impl CoPrimeDacSpec {
    pub fn coarse_weight(&self) -> usize {
        self.fine_units + 1
    }

    pub fn levels(&self) -> usize {
        (self.coarse_units + 1) * (self.fine_units + 1)
    }

    pub fn max_code(&self) -> usize {
        self.levels() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_units == 0 || self.fine_units == 0 {
            return Err(Error::Config("DAC banks must be non-empty".into()));
        }
        if !(self.unit_current > 0.0) || !(self.unit_mismatch_sigma >= 0.0) {
            return Err(Error::Config("DAC unit current/mismatch invalid".into()));
        }
        Ok(())
    }

    /// Splits `code` into (coarse, fine) element counts.
    pub fn encode(&self, code: usize) -> Result<(usize, usize)> {
        if code > self.max_code() {
            return Err(domain("DAC code", code));
        }
        let w = self.coarse_weight();
        Ok((code / w, code % w))
    }
}

/// Maps `code` in `0..=271` to (coarse, fine) counts with
/// `code = 17 * coarse + fine`.
pub fn coprime_encode(code: usize) -> Result<(usize, usize)> {
    CoPrimeDacSpec::default().encode(code)
}

#[derive(Debug, Clone)]
struct Bank {
    weight: f64,
    errors: Vec<f64>,
    pointer: usize,
    usage: Vec<u64>,
}

impl Bank {
    fn select(&mut self, count: usize, rotate: bool) -> f64 {
        let n = self.errors.len();
        let start = if rotate { self.pointer } else { 0 };
        let mut sum = 0.0;
        for k in 0..count {
            let i = (start + k) % n;
            sum += self.weight * (1.0 + self.errors[i]);
            self.usage[i] += 1;
        }
        if rotate {
            self.pointer = (self.pointer + count) % n;
        }
        sum
    }
}

/// Stateful DAC instance. Element mismatch is frozen at construction; the
/// DEM pointers are the only state that changes across conversions.
#[derive(Debug, Clone)]
pub struct CoPrimeDac {
    spec: CoPrimeDacSpec,
    coarse: Bank,
    fine: Bank,
}

impl CoPrimeDac {
    pub fn new(spec: &CoPrimeDacSpec, mismatch_seed: u64) -> Result<Self> {
        spec.validate()?;
        let normal = Normal::new(0.0, spec.unit_mismatch_sigma)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng::stream(mismatch_seed, &[0xDAC]);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let coarse_err = draw(spec.coarse_units);
        let fine_err = draw(spec.fine_units);
        Ok(Self {
            coarse: Bank {
                weight: spec.coarse_weight() as f64,
                usage: vec![0; coarse_err.len()],
                errors: coarse_err,
                pointer: 0,
            },
            fine: Bank {
                weight: 1.0,
                usage: vec![0; fine_err.len()],
                errors: fine_err,
                pointer: 0,
            },
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &CoPrimeDacSpec {
        &self.spec
    }

    /// Output current for `code`, advancing the DEM pointers.
    pub fn convert(&mut self, code: usize) -> Result<f64> {
        let (c, f) = self.spec.encode(code)?;
        let rotate = self.spec.dem_enabled;
        let units = self.coarse.select(c, rotate) + self.fine.select(f, rotate);
        Ok(units * self.spec.unit_current)
    }

    pub fn nominal(&self, code: usize) -> f64 {
        code as f64 * self.spec.unit_current
    }

    /// Per-element selection counts: (coarse bank, fine bank).
    pub fn usage(&self) -> (&[u64], &[u64]) {
        (&self.coarse.usage, &self.fine.usage)
    }

    pub fn reset_usage(&mut self) {
        self.coarse.usage.iter_mut().for_each(|u| *u = 0);
        self.fine.usage.iter_mut().for_each(|u| *u = 0);
    }
}
