//! Excitation synthesis: phase-accumulator DDS with a quarter-wave sine LUT,
//! a co-prime segmented current DAC with dynamic element matching, and a
//! behavioral transimpedance filter.

mod dac;
mod excitation;
mod waveform;

pub use dac::{coprime_encode, CoPrimeDac, CoPrimeDacSpec};
pub use excitation::Excitation;
pub use waveform::{thd, ti_filter, Unit, Waveform};

use crate::error::{domain, Error, Result};

/// Number of programmable amplitude steps.
pub const AMP_STEPS: u32 = 64;
/// Peak-to-peak amplitude at the largest code, in volts.
pub const AMP_FULL_SCALE_PP: f64 = 1.0;

/// DDS configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationSpec {
    /// Excitation frequency in Hz.
    pub f_exc: f64,
    /// Amplitude code, `1..=64` (0 only in test mode).
    pub amp_code: u32,
    /// DDS and comparator clock in Hz.
    pub f_clk: f64,
    /// Quarter-wave LUT address width; `2^lut_bits` entries.
    pub lut_bits: u32,
    /// LUT word width.
    pub lut_amp_bits: u32,
    /// Clock phase count used by the interleaved readout.
    pub phases: u32,
    /// Reject frequencies outside 125 kHz..1 MHz.
    pub enforce_range: bool,
    /// Permit `amp_code = 0`.
    pub test_mode: bool,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self {
            f_exc: 125e3,
            amp_code: 64,
            f_clk: 64e6,
            lut_bits: 8,
            lut_amp_bits: 10,
            phases: 6,
            enforce_range: true,
            test_mode: false,
        }
    }
}

impl ExcitationSpec {
    pub fn with_amp_code(mut self, code: u32) -> Self {
        self.amp_code = code;
        self
    }

    /// Integer clock ticks per excitation period.
    pub fn ticks_per_period(&self) -> Result<u64> {
        ticks_per_period(self.f_clk, self.f_exc)
    }

    pub fn validate(&self) -> Result<()> {
        self.ticks_per_period()?;
        let lo = if self.test_mode { 0 } else { 1 };
        if self.amp_code < lo || self.amp_code > AMP_STEPS {
            return Err(domain("amp_code", self.amp_code));
        }
        if self.enforce_range && !(125e3..=1e6).contains(&self.f_exc) {
            return Err(Error::Config(format!(
                "f_exc = {} Hz outside 125 kHz..1 MHz",
                self.f_exc
            )));
        }
        if !(2..=16).contains(&self.lut_bits) || !(2..=16).contains(&self.lut_amp_bits) {
            return Err(Error::Config("LUT widths must be in 2..=16 bits".into()));
        }
        if self.phases == 0 {
            return Err(Error::Config("phases must be >= 1".into()));
        }
        Ok(())
    }

    /// Peak-to-peak output amplitude in volts.
    pub fn amplitude_pp(&self) -> f64 {
        amplitude_pp(self.amp_code)
    }

    /// Peak (zero-to-peak) amplitude in volts.
    pub fn amplitude_peak(&self) -> f64 {
        self.amplitude_pp() / 2.0
    }
}

pub fn amplitude_pp(amp_code: u32) -> f64 {
    amp_code as f64 * AMP_FULL_SCALE_PP / AMP_STEPS as f64
}

pub(crate) fn ticks_per_period(f_clk: f64, f_exc: f64) -> Result<u64> {
    if !(f_clk > 0.0 && f_exc > 0.0) || !f_clk.is_finite() || !f_exc.is_finite() {
        return Err(Error::Config("clock and excitation frequencies must be positive".into()));
    }
    let ratio = f_clk / f_exc;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "f_clk / f_exc = {ratio} is not an integer number of ticks"
        )));
    }
    if n < 8.0 {
        return Err(Error::Config(format!("only {n} ticks per period, need >= 8")));
    }
    Ok(n as u64)
}

/// Quarter-wave symmetric sine table.
#[derive(Debug, Clone)]
pub struct SineLut {
    quarter: Vec<u32>,
    full_scale: u32,
}

impl SineLut {
    pub fn new(lut_bits: u32, amp_bits: u32) -> Self {
        let len = 1usize << lut_bits;
        let full_scale = (1u32 << amp_bits) - 1;
        let quarter = (0..len)
            .map(|k| {
                let x = std::f64::consts::FRAC_PI_2 * k as f64 / len as f64;
                (full_scale as f64 * x.sin()).round() as u32
            })
            .collect();
        Self { quarter, full_scale }
    }

    /// Positions in one full wave.
    pub fn full_wave_len(&self) -> u64 {
        4 * self.quarter.len() as u64
    }

    pub fn full_scale(&self) -> u32 {
        self.full_scale
    }

    fn quarter_at(&self, k: usize) -> i64 {
        // index == len is the peak, which the table does not store
        self.quarter
            .get(k)
            .map_or(self.full_scale as i64, |&v| v as i64)
    }

    /// Signed table value at full-wave position `p`.
    pub fn value(&self, p: u64) -> i64 {
        let q = self.quarter.len();
        let p = (p % self.full_wave_len()) as usize;
        let (quadrant, r) = (p / q, p % q);
        match quadrant {
            0 => self.quarter_at(r),
            1 => self.quarter_at(q - r),
            2 => -self.quarter_at(r),
            _ => -self.quarter_at(q - r),
        }
    }
}

/// A configured DDS: phase accumulator plus LUT.
#[derive(Debug, Clone)]
pub struct Dds {
    spec: ExcitationSpec,
    lut: SineLut,
    ticks: u64,
}

impl Dds {
    pub fn new(spec: &ExcitationSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            lut: SineLut::new(spec.lut_bits, spec.lut_amp_bits),
            ticks: spec.ticks_per_period()?,
        })
    }

    pub fn spec(&self) -> &ExcitationSpec {
        &self.spec
    }

    pub fn ticks_per_period(&self) -> u64 {
        self.ticks
    }

    /// LUT output at `tick`, normalized to [-1, 1].
    pub fn normalized(&self, tick: u64) -> f64 {
        let phase = tick % self.ticks;
        let p = phase * self.lut.full_wave_len() / self.ticks;
        self.lut.value(p) as f64 / self.lut.full_scale() as f64
    }

    /// Amplitude-scaled output voltage at `tick`.
    pub fn sample(&self, tick: u64) -> f64 {
        self.normalized(tick) * self.spec.amplitude_peak()
    }
}

/// Amplitude-scaled, LUT-quantized sine at `tick`.
pub fn dds_sample(spec: &ExcitationSpec, tick: u64) -> Result<f64> {
    Ok(Dds::new(spec)?.sample(tick))
}
