//! Transconductance voltage driver: ideal voltage tracking onto the load, a
//! bias-limited soft saturation, an event-driven pre-saturation adaptive
//! bias loop, and programmable mirroring of the load current into the
//! readout comparator.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sigsynth::{thd, Unit, Waveform};

/// Available comparator-mirror ratios.
pub const MIRROR_STEPS: [u32; 5] = [1, 5, 10, 15, 25];

#[derive(Debug, Clone, PartialEq)]
pub struct DriverSpec {
    /// Quiescent bias current (A).
    pub i_bias_q: f64,
    /// Margin below the total bias at which the adaptive loop engages (A).
    pub i_limit: f64,
    /// Bias added per engage event (A).
    pub i_adp_step: f64,
    /// Largest number of stacked adaptive steps.
    pub max_adp_steps: u32,
    /// Disengage hysteresis (A); `None` means half a step.
    pub hysteresis: Option<f64>,
    pub adaptive_enabled: bool,
    pub mirror_ratio: u32,
    pub mirror_steps: Vec<u32>,
    /// Linear output-current capability per amp of total bias.
    pub lin_headroom: f64,
    pub supply_v: f64,
    /// Common-mode current on each comparator input (A).
    pub i_cm: f64,
    /// Time constant of the mirrored-current peak detector (s).
    pub peak_tau: f64,
}

impl Default for DriverSpec {
    fn default() -> Self {
        Self {
            i_bias_q: 74e-6,
            i_limit: 5e-6,
            i_adp_step: 34e-6,
            max_adp_steps: 5,
            hysteresis: None,
            adaptive_enabled: true,
            mirror_ratio: 1,
            mirror_steps: MIRROR_STEPS.to_vec(),
            lin_headroom: 10.0,
            supply_v: 1.2,
            i_cm: 15.75e-6,
            peak_tau: 32e-6,
        }
    }
}

impl DriverSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mirror_steps.len() != 5 || self.mirror_steps.iter().any(|&r| !(1..=25).contains(&r)) {
            return Err(Error::Config("mirror steps must be five values in 1..=25".into()));
        }
        if !self.mirror_steps.contains(&self.mirror_ratio) {
            return Err(Error::Config(format!(
                "mirror ratio {} not in {:?}",
                self.mirror_ratio, self.mirror_steps
            )));
        }
        if !(self.i_bias_q > 0.0) || !(self.i_limit < self.i_bias_q) || !(self.i_adp_step > 0.0) {
            return Err(Error::Config(
                "driver bias requires i_bias_q > 0, i_limit < i_bias_q, i_adp_step > 0".into(),
            ));
        }
        if !(self.lin_headroom > 0.0) || !(self.supply_v > 0.0) || !(self.peak_tau > 0.0) {
            return Err(Error::Config("driver headroom, supply and peak_tau must be positive".into()));
        }
        Ok(())
    }

    pub fn hysteresis(&self) -> f64 {
        self.hysteresis.unwrap_or(self.i_adp_step / 2.0)
    }

    pub fn with_mirror_ratio(mut self, ratio: u32) -> Self {
        self.mirror_ratio = ratio;
        self
    }

    pub fn with_adaptive(mut self, on: bool) -> Self {
        self.adaptive_enabled = on;
        self
    }

    /// Bias at adaptive level `level`.
    pub fn bias_at(&self, level: u32) -> f64 {
        self.i_bias_q + level as f64 * self.i_adp_step
    }

    /// Adaptive level a sustained peak current settles to.
    pub fn settled_level(&self, i_peak: f64) -> u32 {
        if !self.adaptive_enabled {
            return 0;
        }
        let mut level = 0;
        while level < self.max_adp_steps && i_peak > self.bias_at(level) - self.i_limit {
            level += 1;
        }
        level
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverState {
    pub adaptive_engaged: bool,
    pub i_bias_total: f64,
    pub event_count: u64,
    pub level: u32,
    /// Peak-detector output fed to the adaptive loop (A).
    pub peak_est: f64,
}

impl DriverState {
    pub fn idle(spec: &DriverSpec) -> Self {
        Self {
            adaptive_engaged: false,
            i_bias_total: spec.i_bias_q,
            event_count: 0,
            level: 0,
            peak_est: 0.0,
        }
    }
}

/// One driver evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSample {
    pub i_ideal: f64,
    pub i_load: f64,
    pub i_comp_plus: f64,
    pub i_comp_minus: f64,
    pub i_bias_total: f64,
}

impl DriveSample {
    pub fn diff(&self) -> f64 {
        self.i_comp_plus - self.i_comp_minus
    }

    /// Supply draw: bias plus the delivered load current.
    pub fn supply_current(&self) -> f64 {
        self.i_bias_total + self.i_load.abs()
    }
}

/// Event-driven bias update. Level `k` steps up when the peak estimate
/// exceeds `bias(k) - i_limit` and steps down when it falls below the
/// previous level's threshold minus the hysteresis. At most one change per
/// call.
pub fn adaptive_bias_step(spec: &DriverSpec, state: &DriverState, i_peak_est: f64) -> DriverState {
    let mut next = *state;
    if !spec.adaptive_enabled {
        return next;
    }
    let up = spec.bias_at(state.level) - spec.i_limit;
    if i_peak_est > up && state.level < spec.max_adp_steps {
        next.level += 1;
    } else if state.level > 0 {
        let down = spec.bias_at(state.level - 1) - spec.i_limit - spec.hysteresis();
        if i_peak_est < down {
            next.level -= 1;
        }
    }
    if next.level != state.level {
        next.event_count += 1;
        next.i_bias_total = spec.bias_at(next.level);
        next.adaptive_engaged = next.level > 0;
    }
    next
}

/// Linear output-current capability at a given total bias.
pub fn linear_capability(spec: &DriverSpec, i_bias_total: f64) -> f64 {
    spec.lin_headroom * i_bias_total
}

/// Drives one sample. `v_in` is the analytic excitation sample (its real
/// part is the instantaneous voltage) so that a complex load is evaluated as
/// the steady-state phasor response at the excitation frequency. `dt` is the
/// time since the previous sample, used by the peak detector.
pub fn drive_sample(
    spec: &DriverSpec,
    state: &DriverState,
    v_in: Complex64,
    z_load: Complex64,
    dt: f64,
) -> Result<(DriveSample, DriverState)> {
    if z_load.norm() == 0.0 {
        return Err(Error::ShortCircuit);
    }
    let i_ideal = (v_in / z_load).re;
    let i_lin = linear_capability(spec, state.i_bias_total);
    let i_load = i_lin * (i_ideal / i_lin).tanh();
    let half = 0.5 * i_load * spec.mirror_ratio as f64;
    let sample = DriveSample {
        i_ideal,
        i_load,
        i_comp_plus: spec.i_cm + half,
        i_comp_minus: spec.i_cm - half,
        i_bias_total: state.i_bias_total,
    };
    let mut tracked = *state;
    tracked.peak_est = i_load.abs().max(state.peak_est * (-dt / spec.peak_tau).exp());
    let next = adaptive_bias_step(spec, &tracked, tracked.peak_est);
    Ok((sample, next))
}

/// Stateful wrapper over [`drive_sample`] for one measurement stream.
#[derive(Debug, Clone)]
pub struct Driver {
    spec: DriverSpec,
    state: DriverState,
    dt: f64,
}

impl Driver {
    pub fn new(spec: &DriverSpec, sample_interval: f64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            state: DriverState::idle(spec),
            spec: spec.clone(),
            dt: sample_interval,
        })
    }

    pub fn spec(&self) -> &DriverSpec {
        &self.spec
    }

    pub fn state(&self) -> &DriverState {
        &self.state
    }

    pub fn drive(&mut self, v_in: Complex64, z_load: Complex64) -> Result<DriveSample> {
        let (s, next) = drive_sample(&self.spec, &self.state, v_in, z_load, self.dt)?;
        self.state = next;
        Ok(s)
    }
}

/// Supply power averaged over a trace of driver samples.
pub fn driver_power(spec: &DriverSpec, trace: &[DriveSample]) -> f64 {
    if trace.is_empty() {
        return spec.supply_v * spec.i_bias_q;
    }
    let mean = trace.iter().map(DriveSample::supply_current).sum::<f64>() / trace.len() as f64;
    spec.supply_v * mean
}

/// Sine-drive run used by the linearity and power characterisations.
#[derive(Debug, Clone)]
pub struct SineRun {
    pub trace: Vec<DriveSample>,
    pub states: Vec<DriverState>,
    /// Index of the first sample after warm-up.
    pub steady_from: usize,
}

pub const CHAR_FREQ: f64 = 125e3;
pub const CHAR_POINTS: usize = 512;
const WARMUP_PERIODS: usize = 4;
const MEASURE_PERIODS: usize = 4;

/// Drives a 1 Ohm load with a sine whose ideal current has peak `amplitude`.
pub fn run_sine(spec: &DriverSpec, amplitude: f64) -> Result<SineRun> {
    let dt = 1.0 / (CHAR_FREQ * CHAR_POINTS as f64);
    let mut drv = Driver::new(spec, dt)?;
    let total = (WARMUP_PERIODS + MEASURE_PERIODS) * CHAR_POINTS;
    let mut trace = Vec::with_capacity(total);
    let mut states = Vec::with_capacity(total);
    let z = Complex64::new(1.0, 0.0);
    for i in 0..total {
        let p = std::f64::consts::TAU * i as f64 / CHAR_POINTS as f64;
        let v = Complex64::new(p.sin(), -p.cos()) * amplitude;
        trace.push(drv.drive(v, z)?);
        states.push(*drv.state());
    }
    Ok(SineRun {
        trace,
        states,
        steady_from: WARMUP_PERIODS * CHAR_POINTS,
    })
}

/// THD of the steady-state load current for a sine of peak `amplitude`.
pub fn load_thd(spec: &DriverSpec, amplitude: f64) -> Result<f64> {
    let run = run_sine(spec, amplitude)?;
    let samples = run.trace[run.steady_from..].iter().map(|s| s.i_load).collect();
    let w = Waveform::new(samples, CHAR_FREQ * CHAR_POINTS as f64, Unit::Amp)?;
    thd(&w, CHAR_FREQ, 10)
}

/// Largest load-current amplitude whose steady-state THD stays at or below
/// `thd_limit`, taken as the first crossing of the limit on a rising sweep.
pub fn linear_range(spec: &DriverSpec, adaptive: bool, thd_limit: f64) -> Result<f64> {
    if !(thd_limit > 0.0 && thd_limit <= 0.2) {
        return Err(crate::error::domain("thd_limit", thd_limit));
    }
    let spec = spec.clone().with_adaptive(adaptive);
    let pass = |a: f64| -> Result<bool> { Ok(load_thd(&spec, a)? <= thd_limit) };

    let (mut lo, mut hi) = (0.0, 1e-7);
    while pass(hi)? {
        lo = hi;
        hi *= 1.05;
        if hi > 1.0 {
            return Ok(lo);
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if pass(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// One row of a THD-versus-amplitude sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThdPoint {
    pub amplitude: f64,
    pub thd: f64,
    pub adaptive: bool,
}

pub fn thd_sweep(spec: &DriverSpec, amplitudes: &[f64], adaptive: bool) -> Result<Vec<ThdPoint>> {
    let spec = spec.clone().with_adaptive(adaptive);
    amplitudes
        .iter()
        .map(|&a| {
            Ok(ThdPoint {
                amplitude: a,
                thd: load_thd(&spec, a)?,
                adaptive,
            })
        })
        .collect()
}
