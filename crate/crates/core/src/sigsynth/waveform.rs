use std::f64::consts::TAU;
use std::fmt::Write as _;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Volt,
    Amp,
}

impl Unit {
    pub fn tag(self) -> &'static str {
        match self {
            Unit::Volt => "V",
            Unit::Amp => "A",
        }
    }
}

/// Uniformly sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    /// Samples per second.
    pub rate: f64,
    pub unit: Unit,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, rate: f64, unit: Unit) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(domain("sample rate", rate));
        }
        Ok(Self {
            samples,
            rate,
            unit,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Two-column CSV `(tick, value)` preceded by a `# rate=.. unit=..` line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# rate={} unit={}\ntick,value\n", self.rate, self.unit.tag());
        for (i, v) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "{i},{v:e}");
        }
        out
    }

    /// Single-bin DFT projection at `freq`; returns the complex amplitude
    /// `a` such that the component is `Re(a * exp(j*2*pi*freq*t))`.
    pub fn project(&self, freq: f64) -> Complex64 {
        let n = self.samples.len();
        let step = freq / self.rate;
        let sum: Complex64 = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cycles = (step * i as f64).fract();
                x * Complex64::from_polar(1.0, -TAU * cycles)
            })
            .sum();
        sum * (2.0 / n as f64)
    }
}

fn single_pole(f: f64, cutoff: f64) -> Complex64 {
    1.0 / Complex64::new(1.0, f / cutoff)
}

/// Behavioral transimpedance filter: removes DC exactly, applies a
/// single-pole low-pass at `cutoff`, and rescales so the component at
/// `f_fund` passes with unit gain and zero phase.
///
/// The waveform must hold an integer number of periods of `f_fund`; the
/// response is evaluated as the periodic steady state.
pub fn ti_filter(w: &Waveform, f_fund: f64, cutoff: f64) -> Result<Waveform> {
    if !(cutoff > f_fund) {
        return Err(Error::Config(format!(
            "TI filter cutoff {cutoff} Hz must exceed the fundamental {f_fund} Hz"
        )));
    }
    let n = w.samples.len();
    if n == 0 {
        return Ok(w.clone());
    }
    let mut buf: Vec<Complex64> = w.samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);

    let h0 = single_pole(f_fund, cutoff);
    let df = w.rate / n as f64;
    buf[0] = Complex64::new(0.0, 0.0);
    for (k, x) in buf.iter_mut().enumerate().skip(1) {
        let g = if 2 * k == n {
            // Nyquist bin must stay real
            Complex64::new(single_pole(k as f64 * df, cutoff).norm() / h0.norm(), 0.0)
        } else if 2 * k < n {
            single_pole(k as f64 * df, cutoff) / h0
        } else {
            single_pole((k as f64 - n as f64) * df, cutoff) / h0.conj()
        };
        *x *= g;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let samples = buf.iter().map(|c| c.re / n as f64).collect();
    Waveform::new(samples, w.rate, w.unit)
}

/// Total harmonic distortion over harmonics `2..=n_harmonics` of `f_fund`,
/// using one DFT projection per harmonic. Harmonics at or above Nyquist are
/// skipped.
pub fn thd(w: &Waveform, f_fund: f64, n_harmonics: usize) -> Result<f64> {
    if n_harmonics < 2 {
        return Err(domain("n_harmonics", n_harmonics));
    }
    let a1 = w.project(f_fund).norm();
    let rms = (w.samples.iter().map(|x| x * x).sum::<f64>() / w.len().max(1) as f64).sqrt();
    if !(a1 > 1e-12 * rms) || a1 == 0.0 {
        return Err(Error::UndefinedThd);
    }
    let nyquist = w.rate / 2.0;
    let power: f64 = (2..=n_harmonics)
        .map(|k| k as f64 * f_fund)
        .take_while(|&f| f < nyquist)
        .map(|f| w.project(f).norm_sqr())
        .sum();
    Ok(power.sqrt() / a1)
}
