use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{CoPrimeDac, Dds, ExcitationSpec, Unit, Waveform};
use crate::error::{Error, Result};

/// Continuous-time excitation voltage, periodic over a window of `cycles`
/// excitation periods and stored as one-sided Fourier coefficients.
///
/// `v(t) = Re(a(t))` with the analytic signal
/// `a(t) = c[0] + 2 * sum_{k>=1} c[k] * exp(j*2*pi*k*t/T)`.
#[derive(Debug, Clone)]
pub struct Excitation {
    f_exc: f64,
    cycles: usize,
    coeffs: Vec<(usize, Complex64)>,
    v_peak: f64,
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

impl Excitation {
    /// Ideal sine `v_peak * sin(2*pi*f_exc*t)`.
    pub fn ideal(f_exc: f64, v_peak: f64) -> Self {
        Self {
            f_exc,
            cycles: 1,
            coeffs: vec![(1, Complex64::new(0.0, -v_peak / 2.0))],
            v_peak,
        }
    }

    /// Full generator path: LUT codes drive the co-prime DAC for `cycles`
    /// periods; the zero-order-held current passes through the TI filter
    /// whose gain and phase are trimmed so the nominal fundamental lands at
    /// `v_peak * sin(2*pi*f_exc*t)`.
    pub fn synthesize(
        spec: &ExcitationSpec,
        dac: &mut CoPrimeDac,
        cutoff: f64,
        cycles: usize,
    ) -> Result<Self> {
        if !(cutoff > spec.f_exc) {
            return Err(Error::Config(format!(
                "TI filter cutoff {cutoff} Hz must exceed f_exc"
            )));
        }
        if cycles == 0 {
            return Err(Error::Config("cycles must be >= 1".into()));
        }
        let dds = Dds::new(spec)?;
        let n0 = dds.ticks_per_period() as usize;
        let n = cycles * n0;
        let max_code = dac.spec().max_code();
        let mut buf = Vec::with_capacity(n);
        for tick in 0..n {
            let s = dds.normalized(tick as u64);
            let code = ((s + 1.0) / 2.0 * max_code as f64).round() as usize;
            buf.push(Complex64::new(dac.convert(code)?, 0.0));
        }
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);

        let v_peak = spec.amplitude_peak();
        let nominal_peak = max_code as f64 / 2.0 * dac.spec().unit_current;
        let df = spec.f_exc / cycles as f64;
        let response = |f: f64| -> Complex64 {
            let zoh = sinc(f / spec.f_clk) * Complex64::from_polar(1.0, -PI * f / spec.f_clk);
            zoh / Complex64::new(1.0, f / cutoff)
        };
        let trim = response(spec.f_exc);
        let floor = 1e-13 * nominal_peak * n as f64;
        let coeffs = (1..n.div_ceil(2))
            .filter(|&k| buf[k].norm() > floor)
            .map(|k| {
                let g = response(k as f64 * df) / trim * (v_peak / nominal_peak);
                (k, buf[k] / n as f64 * g)
            })
            .collect();
        Ok(Self {
            f_exc: spec.f_exc,
            cycles,
            coeffs,
            v_peak,
        })
    }

    pub fn f_exc(&self) -> f64 {
        self.f_exc
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    /// Nominal peak amplitude in volts.
    pub fn v_peak(&self) -> f64 {
        self.v_peak
    }

    fn window(&self) -> f64 {
        self.cycles as f64 / self.f_exc
    }

    /// Analytic excitation at time `t` (seconds from the DDS phase zero).
    pub fn analytic(&self, t: f64) -> Complex64 {
        let w = TAU / self.window();
        let t = t.rem_euclid(self.window());
        self.coeffs
            .iter()
            .map(|&(k, c)| 2.0 * c * Complex64::from_polar(1.0, w * k as f64 * t))
            .sum()
    }

    pub fn voltage(&self, t: f64) -> f64 {
        self.analytic(t).re
    }

    /// Complex amplitude of the fundamental, `Re(A * exp(j*w*t))`.
    pub fn fundamental(&self) -> Complex64 {
        self.coeffs
            .iter()
            .find(|&&(k, _)| k == self.cycles)
            .map_or(Complex64::new(0.0, 0.0), |&(_, c)| 2.0 * c)
    }

    /// Analytic signal and its time derivative on a uniform grid with
    /// `points_per_period` points per excitation period, covering the window.
    pub fn analytic_grid(&self, points_per_period: usize) -> (Vec<Complex64>, Vec<Complex64>) {
        let m = self.cycles * points_per_period;
        let w = TAU / self.window();
        let mut a = vec![Complex64::new(0.0, 0.0); m];
        let mut da = vec![Complex64::new(0.0, 0.0); m];
        for &(k, c) in &self.coeffs {
            if k < m {
                a[k] += 2.0 * c;
                da[k] += 2.0 * c * Complex64::new(0.0, w * k as f64);
            }
        }
        let mut planner = FftPlanner::new();
        let ifft = planner.plan_fft_inverse(m);
        ifft.process(&mut a);
        ifft.process(&mut da);
        (a, da)
    }

    /// Real voltage waveform sampled at `rate` over the window.
    pub fn to_waveform(&self, points_per_period: usize) -> Waveform {
        let (a, _) = self.analytic_grid(points_per_period);
        Waveform {
            samples: a.iter().map(|c| c.re).collect(),
            rate: self.f_exc * points_per_period as f64,
            unit: Unit::Volt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::{thd, CoPrimeDacSpec};

    #[test]
    fn ideal_is_a_sine() {
        let e = Excitation::ideal(125e3, 0.25);
        for i in 0..64 {
            let t = i as f64 / (125e3 * 64.0);
            assert!((e.voltage(t) - 0.25 * (TAU * 125e3 * t).sin()).abs() < 1e-14);
            assert!((e.analytic(t).im + 0.25 * (TAU * 125e3 * t).cos()).abs() < 1e-14);
        }
        let (grid, d) = e.analytic_grid(64);
        for (i, (a, da)) in grid.iter().zip(&d).enumerate() {
            let p = TAU * i as f64 / 64.0;
            assert!((a.re - 0.25 * p.sin()).abs() < 1e-14);
            assert!((da.re - 0.25 * TAU * 125e3 * p.cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn synthesized_fundamental_is_trimmed() {
        let spec = ExcitationSpec::default().with_amp_code(40);
        let mut dac = CoPrimeDac::new(&CoPrimeDacSpec::default(), 1).unwrap();
        let e = Excitation::synthesize(&spec, &mut dac, 250e3, 1).unwrap();
        let f = e.fundamental();
        let want = Complex64::new(0.0, -spec.amplitude_peak());
        assert!((f - want).norm() / want.norm() < 1e-3, "{f} vs {want}");
        let w = e.to_waveform(512);
        assert!(w.mean().abs() < 1e-12);
        let d = thd(&w, 125e3, 10).unwrap();
        assert!(d < 0.01, "thd {d}");
    }

    #[test]
    fn dem_window_spans_cycles() {
        let spec = ExcitationSpec::default();
        let dac_spec = CoPrimeDacSpec {
            unit_mismatch_sigma: 0.01,
            ..Default::default()
        };
        let mut dac = CoPrimeDac::new(&dac_spec, 5).unwrap();
        let e = Excitation::synthesize(&spec, &mut dac, 250e3, 6).unwrap();
        assert_eq!(e.cycles(), 6);
        assert!((e.fundamental().norm() - 0.5).abs() < 0.01);
    }
}
