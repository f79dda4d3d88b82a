//! Full acquisition chain for one load: synthesized excitation, driver,
//! interleaved comparator, count extraction, demodulation and impedance,
//! plus the range-selection policy.

use std::f64::consts::{PI, TAU};
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{linear_capability, Driver, DriverSpec};
use crate::rng;
use crate::sigsynth::{CoPrimeDac, CoPrimeDacSpec, Excitation, ExcitationSpec, AMP_STEPS};
use crate::tdreadout::{
    demodulate, extract_counts, midpoint_correction, parallel_resistance, sample_bits, to_impedance, wrap_phase, Phasor, ReadoutSpec,
    TdCounts, OFFSET_CODE_MAX,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExcitationPath {
    /// Pure sine at the nominal amplitude.
    Ideal,
    /// LUT, co-prime DAC and TI filter.
    Synthesized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangingSpec {
    pub enabled: bool,
    /// Lowest duty the policy will aim for.
    pub d_min: f64,
    /// Duty above which a measurement is considered over-range.
    pub d_max: f64,
    /// Preferred ceiling on the driver's peak load current (A).
    pub i_cap: f64,
    /// Highest load the probe sequence is sized to cover (ohm).
    pub r_max: f64,
    pub max_retries: u32,
}

impl Default for RangingSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            d_min: 0.15,
            d_max: 0.45,
            i_cap: 27.5e-6,
            r_max: 500e3,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub excitation: ExcitationSpec,
    pub dac: CoPrimeDacSpec,
    pub dac_seed: u64,
    /// TI filter cutoff as a multiple of the excitation frequency.
    pub ti_cutoff_ratio: f64,
    pub path: ExcitationPath,
    pub driver: DriverSpec,
    /// Driver output-current noise per comparator sample (A rms), referred
    /// to the load current before mirroring.
    pub driver_noise_sigma: f64,
    /// Input-referred driver voltage noise per comparator sample (V rms).
    pub driver_vnoise_sigma: f64,
    pub readout: ReadoutSpec,
    pub ranging: RangingSpec,
    /// Excitation periods run before the conversion starts.
    pub settle_periods: u32,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            excitation: ExcitationSpec::default(),
            dac: CoPrimeDacSpec::default(),
            dac_seed: 1,
            ti_cutoff_ratio: 2.0,
            path: ExcitationPath::Synthesized,
            driver: DriverSpec::default(),
            driver_noise_sigma: 0.0,
            driver_vnoise_sigma: 0.0,
            readout: ReadoutSpec::default(),
            ranging: RangingSpec::default(),
            settle_periods: 1,
        }
    }
}

impl ChainConfig {
    /// Default configuration with the calibrated noise sources enabled.
    pub fn noisy() -> Self {
        let mut cfg = Self::default();
        cfg.readout.noise_sigma = CALIBRATED_COMPARATOR_NOISE;
        cfg.readout.jitter_sigma = CALIBRATED_JITTER;
        cfg.driver_noise_sigma = CALIBRATED_DRIVER_NOISE;
        cfg.driver_vnoise_sigma = CALIBRATED_DRIVER_VNOISE;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.excitation.validate()?;
        self.dac.validate()?;
        self.driver.validate()?;
        self.readout.validate()?;
        if (self.readout.f_clk - self.excitation.f_clk).abs() > 1e-6 * self.excitation.f_clk {
            return Err(Error::Config("readout and DDS clocks differ".into()));
        }
        if self.readout.phases != self.excitation.phases {
            return Err(Error::Config("readout and DDS phase counts differ".into()));
        }
        if !(self.ti_cutoff_ratio > 1.0) {
            return Err(Error::Config("ti_cutoff_ratio must exceed 1".into()));
        }
        if !(self.driver_noise_sigma >= 0.0 && self.driver_vnoise_sigma >= 0.0) {
            return Err(Error::Config("driver noise must be non-negative".into()));
        }
        let r = &self.ranging;
        if !(0.0 < r.d_min && r.d_min < r.d_max && r.d_max < 0.5 && r.r_max > 0.0) {
            return Err(Error::Config("ranging needs 0 < d_min < d_max < 0.5 and r_max > 0".into()));
        }
        Ok(())
    }

    /// The fixed setting taken from the module specs.
    pub fn base_setting(&self) -> Setting {
        Setting {
            amp_code: self.excitation.amp_code,
            mirror_ratio: self.driver.mirror_ratio,
            offset_p: self.readout.offset_code_p,
            offset_n: self.readout.offset_code_n,
        }
    }
}

/// Noise constants of the default noisy chain. The comparator term sets the
/// mid-range plateau, the driver voltage term limits low loads and the
/// driver current term limits high loads.
pub const CALIBRATED_COMPARATOR_NOISE: f64 = 9e-9;
pub const CALIBRATED_DRIVER_NOISE: f64 = 0.5e-9;
pub const CALIBRATED_DRIVER_VNOISE: f64 = 3e-6;
pub const CALIBRATED_JITTER: f64 = 2e-12;

/// Programmable range state for one conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Setting {
    pub amp_code: u32,
    pub mirror_ratio: u32,
    pub offset_p: u32,
    pub offset_n: u32,
}

impl Setting {
    pub fn v_peak(&self) -> f64 {
        crate::sigsynth::amplitude_pp(self.amp_code) / 2.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub short_circuit: bool,
    pub saturated: bool,
    pub open_circuit: bool,
    pub inconsistent: bool,
    /// Best reachable setting still left the duty above `d_max`.
    pub range_limited: bool,
}

impl Flags {
    pub fn ok(&self) -> bool {
        !(self.short_circuit || self.saturated || self.open_circuit || self.inconsistent)
    }

    /// Compact `|`-separated list, `ok` when clear.
    pub fn label(&self) -> String {
        let mut v = Vec::new();
        if self.short_circuit {
            v.push("short");
        }
        if self.saturated {
            v.push("saturated");
        }
        if self.open_circuit {
            v.push("open");
        }
        if self.inconsistent {
            v.push("inconsistent");
        }
        if self.range_limited {
            v.push("range_limited");
        }
        if v.is_empty() {
            "ok".into()
        } else {
            v.join("|")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub setting: Setting,
    pub counts: Option<TdCounts>,
    pub phasor: Option<Phasor>,
    pub z: Option<Complex64>,
    pub flags: Flags,
    /// Conversions run, including range retries.
    pub attempts: u32,
    /// Mean driver supply current over the conversion (A).
    pub driver_current: f64,
    pub adaptive_events: u64,
}

impl Measurement {
    /// Parallel-equivalent resistance of the measured impedance.
    pub fn resistance(&self) -> Option<f64> {
        self.z.map(parallel_resistance)
    }

    fn empty(setting: Setting, flags: Flags) -> Self {
        Self {
            setting,
            counts: None,
            phasor: None,
            z: None,
            flags,
            attempts: 1,
            driver_current: 0.0,
            adaptive_events: 0,
        }
    }
}

struct ExcGrid {
    a: Vec<Complex64>,
    da: Vec<Complex64>,
}

/// A configured chain. Excitation waveforms are built lazily per amplitude
/// code and shared between threads.
pub struct Chain {
    cfg: ChainConfig,
    grids: Vec<OnceLock<Result<Arc<ExcGrid>>>>,
    ticks: u32,
}

impl Chain {
    pub fn new(cfg: ChainConfig) -> Result<Self> {
        cfg.validate()?;
        let ticks = cfg.excitation.ticks_per_period()? as u32;
        Ok(Self {
            grids: (0..=AMP_STEPS).map(|_| OnceLock::new()).collect(),
            cfg,
            ticks,
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.cfg
    }

    pub fn n0(&self) -> u32 {
        self.ticks * self.cfg.readout.phases
    }

    fn grid(&self, amp_code: u32) -> Result<Arc<ExcGrid>> {
        let slot = self
            .grids
            .get(amp_code as usize)
            .ok_or_else(|| crate::error::domain("amp_code", amp_code))?;
        slot.get_or_init(|| self.build_grid(amp_code).map(Arc::new)).clone()
    }

    fn build_grid(&self, amp_code: u32) -> Result<ExcGrid> {
        let spec = self.cfg.excitation.clone().with_amp_code(amp_code);
        spec.validate()?;
        let exc = match self.cfg.path {
            ExcitationPath::Ideal => Excitation::ideal(spec.f_exc, spec.amplitude_peak()),
            ExcitationPath::Synthesized => {
                let mut dac = CoPrimeDac::new(&self.cfg.dac, self.cfg.dac_seed)?;
                let cycles = if self.cfg.dac.dem_enabled && self.cfg.dac.unit_mismatch_sigma > 0.0 {
                    self.cfg.readout.cycles_per_meas as usize
                } else {
                    1
                };
                Excitation::synthesize(&spec, &mut dac, self.cfg.ti_cutoff_ratio * spec.f_exc, cycles)?
            }
        };
        let (a, da) = exc.analytic_grid(self.n0() as usize);
        Ok(ExcGrid { a, da })
    }

    /// One conversion at a fixed setting.
    pub fn measure_with(&self, setting: Setting, z_load: Complex64, seed: u64) -> Result<Measurement> {
        if z_load.norm() == 0.0 {
            return Ok(Measurement::empty(
                setting,
                Flags {
                    short_circuit: true,
                    ..Flags::default()
                },
            ));
        }
        let grid = self.grid(setting.amp_code)?;
        let driver_spec = self.cfg.driver.clone().with_mirror_ratio(setting.mirror_ratio);
        let readout = self.cfg.readout.clone().with_offsets(setting.offset_p, setting.offset_n);
        let f_exc = self.cfg.excitation.f_exc;
        let mut driver = Driver::new(&driver_spec, 1.0 / readout.f_clk)?;
        let phases = readout.phases as u64;
        let len = grid.a.len() as u64;

        for tick in 0..(self.cfg.settle_periods * self.ticks) as u64 {
            // settle on the phase-0 grid, ending where the conversion starts
            let u = (tick * phases) % len;
            driver.drive(grid.a[u as usize], z_load)?;
        }
        let events_before = driver.state().event_count;

        let drv_noise = Normal::new(0.0, self.cfg.driver_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let v_noise = Normal::new(0.0, self.cfg.driver_vnoise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let noisy = self.cfg.driver_noise_sigma > 0.0 || self.cfg.driver_vnoise_sigma > 0.0;
        let mut drv_rng = rng::stream(seed, &[1]);
        let mut cmp_rng = rng::stream(seed, &[0]);
        let ratio = setting.mirror_ratio as f64;
        let mut supply = 0.0;
        let mut count = 0u64;
        let mut fault = None;
        let bits = sample_bits(
            &readout,
            f_exc,
            |p| {
                let u = (p.fine_index % len) as usize;
                let mut v = grid.a[u] + grid.da[u] * p.jitter;
                let mut n = 0.0;
                if noisy {
                    v += v_noise.sample(&mut drv_rng);
                    n = drv_noise.sample(&mut drv_rng);
                }
                match driver.drive(v, z_load) {
                    Ok(s) => {
                        supply += s.supply_current();
                        count += 1;
                        s.diff() + ratio * n
                    }
                    Err(e) => {
                        fault.get_or_insert(e);
                        0.0
                    }
                }
            },
            &mut cmp_rng,
        )?;
        if let Some(e) = fault {
            return Err(e);
        }
        let counts = extract_counts(&bits, &readout)?;
        let mut m = Measurement {
            setting,
            counts: Some(counts),
            phasor: None,
            z: None,
            flags: Flags::default(),
            attempts: 1,
            driver_current: supply / count.max(1) as f64,
            adaptive_events: driver.state().event_count - events_before,
        };
        if counts.saturated {
            m.flags.saturated = true;
            return Ok(m);
        }
        match demodulate(&counts, readout.threshold()) {
            Ok(mut p) => {
                if readout.midpoint_phase {
                    p.theta = wrap_phase(p.theta + midpoint_correction(counts.n0));
                }
                m.phasor = Some(p);
                match to_impedance(&p, setting.v_peak(), setting.mirror_ratio, 0.0) {
                    Ok(z) => m.z = Some(z),
                    Err(_) => m.flags.open_circuit = true,
                }
            }
            Err(Error::OutOfRange(_)) => m.flags.saturated = true,
            Err(_) => m.flags.inconsistent = true,
        }
        if counts.duty() > self.cfg.ranging.d_max {
            m.flags.range_limited = true;
        }
        Ok(m)
    }

    /// One measurement; with ranging enabled the setting is chosen by
    /// probing and re-planning from the load-admittance estimate.
    pub fn measure(&self, z_load: Complex64, seed: u64) -> Result<Measurement> {
        if !self.cfg.ranging.enabled {
            return self.measure_with(self.cfg.base_setting(), z_load, seed);
        }
        let mut setting = Setting {
            amp_code: AMP_STEPS,
            mirror_ratio: self.min_ratio(),
            offset_p: 0,
            offset_n: OFFSET_CODE_MAX,
        };
        let mut y_hi = f64::INFINITY;
        let mut last_valid: Option<Measurement> = None;
        let mut attempts = 0;
        loop {
            let mut m = self.measure_with(setting, z_load, rng::derive_seed(seed, &[attempts as u64]))?;
            attempts += 1;
            m.attempts = attempts;
            if m.flags.short_circuit {
                return Ok(m);
            }
            let next = match m.phasor {
                Some(p) => {
                    let s = self.plan(p.i_m / (setting.mirror_ratio as f64 * setting.v_peak()));
                    last_valid = Some(m.clone());
                    s
                }
                None if m.flags.saturated => {
                    y_hi = y_hi.min(self.threshold_admittance(&setting));
                    self.probe_below(y_hi)
                }
                None => return Ok(m),
            };
            if next == setting || attempts > self.cfg.ranging.max_retries {
                return Ok(match (m.phasor, last_valid) {
                    (None, Some(mut v)) => {
                        v.attempts = attempts;
                        v
                    }
                    _ => m,
                });
            }
            setting = next;
        }
    }

    fn min_ratio(&self) -> u32 {
        *self.cfg.driver.mirror_steps.iter().min().unwrap_or(&1)
    }

    fn max_ratio(&self) -> u32 {
        *self.cfg.driver.mirror_steps.iter().max().unwrap_or(&1)
    }

    /// Load admittance at which the pulse just vanishes for `s`.
    fn threshold_admittance(&self, s: &Setting) -> f64 {
        let i_th = (s.offset_n as f64 - s.offset_p as f64) * self.cfg.readout.offset_lsb;
        i_th / (s.mirror_ratio as f64 * s.v_peak())
    }

    /// Probe covering admittances from `y_hi` down to the range floor: its
    /// threshold admittance sits just under the floor, or a decade-and-a-half
    /// under `y_hi` when that is lower. Among settings near the target the one
    /// with the largest signal gain wins.
    fn probe_below(&self, y_hi: f64) -> Setting {
        let floor = 1.0 / self.cfg.ranging.r_max;
        let target = (0.9 * floor).min(y_hi / 32.0);
        let mut best: Option<(f64, f64, Setting)> = None;
        for amp_code in 1..=AMP_STEPS {
            for &mirror_ratio in &self.cfg.driver.mirror_steps {
                for offset_n in 1..=OFFSET_CODE_MAX {
                    let s = Setting {
                        amp_code,
                        mirror_ratio,
                        offset_p: 0,
                        offset_n,
                    };
                    let y_th = self.threshold_admittance(&s);
                    if y_th > target {
                        continue;
                    }
                    let miss = (target / y_th).ln();
                    let gain = mirror_ratio as f64 * s.v_peak();
                    let better = match &best {
                        None => true,
                        Some((bm, bg, _)) => miss < bm - 1e-3 || (miss < bm + 1e-3 && gain > *bg),
                    };
                    if better {
                        best = Some((miss, gain, s));
                    }
                }
            }
        }
        best.map(|b| b.2).unwrap_or(Setting {
            amp_code: AMP_STEPS,
            mirror_ratio: self.max_ratio(),
            offset_p: 0,
            offset_n: 1,
        })
    }

    /// Repeated conversions at one setting, seeded `(seed, k)`.
    pub fn measure_repeated(&self, setting: Setting, z_load: Complex64, seed: u64, repeats: usize) -> Result<Vec<Measurement>> {
        (0..repeats)
            .into_par_iter()
            .map(|k| self.measure_with(setting, z_load, rng::derive_seed(seed, &[0x5EED, k as u64])))
            .collect()
    }

    /// Predicted relative resistance error for a candidate setting against a
    /// load of admittance magnitude `y`; `None` when the pulse would vanish
    /// or leave the duty window.
    pub fn predicted_error(&self, s: &Setting, y: f64) -> Option<f64> {
        let n0 = self.n0() as f64;
        let i_pk = s.v_peak() * y;
        let i_m = s.mirror_ratio as f64 * i_pk;
        let i_th = (s.offset_n as f64 - s.offset_p as f64) * self.cfg.readout.offset_lsb;
        if !(i_th > 0.0 && i_m > i_th) {
            return None;
        }
        let d = (i_th / i_m).acos() / PI;
        if d < self.cfg.ranging.d_min || d > self.cfg.ranging.d_max {
            return None;
        }
        let drv = &self.cfg.driver;
        let i_lin = linear_capability(drv, drv.bias_at(drv.settled_level(i_pk)));
        let compression = (i_th / (s.mirror_ratio as f64 * i_lin)).powi(2) / 3.0;
        let drv_i = s.mirror_ratio as f64 * self.cfg.driver_noise_sigma.hypot(self.cfg.driver_vnoise_sigma * y);
        let sigma_i = self.cfg.readout.noise_sigma.hypot(drv_i);
        let slope = i_m * TAU / n0 * (PI * d).sin();
        let sigma_pos = (sigma_i / slope).hypot(self.cfg.readout.jitter_sigma * self.cfg.excitation.f_exc * n0);
        let var_n1 = 2.0 * sigma_pos / PI.sqrt() + 1.0 / 6.0;
        let random = PI * (PI * d).tan() * var_n1.sqrt() / n0;
        Some(random.hypot(compression))
    }

    /// Chooses the setting with the lowest predicted error for a load of
    /// admittance magnitude `y`, preferring settings whose driver current
    /// stays under `i_cap`.
    pub fn plan(&self, y: f64) -> Setting {
        let mut best: Option<(bool, f64, f64, Setting)> = None;
        for amp_code in 1..=AMP_STEPS {
            for &mirror_ratio in &self.cfg.driver.mirror_steps {
                for offset_n in 1..=OFFSET_CODE_MAX {
                    let s = Setting {
                        amp_code,
                        mirror_ratio,
                        offset_p: 0,
                        offset_n,
                    };
                    let Some(err) = self.predicted_error(&s, y) else {
                        continue;
                    };
                    let i_pk = s.v_peak() * y;
                    let capped = i_pk <= self.cfg.ranging.i_cap;
                    let better = match &best {
                        None => true,
                        Some((bc, be, bi, _)) => {
                            (capped && !bc) || (capped == *bc && (err < *be * (1.0 - 1e-9) || (err <= *be * (1.0 + 1e-9) && i_pk < *bi)))
                        }
                    };
                    if better {
                        best = Some((capped, err, i_pk, s));
                    }
                }
            }
        }
        best.map(|b| b.3).unwrap_or_else(|| self.fallback(y))
    }

    /// Lowest-gain setting when the load is beyond the low-impedance end,
    /// highest-gain otherwise.
    fn fallback(&self, y: f64) -> Setting {
        let s = Setting {
            amp_code: 1,
            mirror_ratio: self.min_ratio(),
            offset_p: 0,
            offset_n: OFFSET_CODE_MAX,
        };
        if y > self.threshold_admittance(&s) {
            s
        } else {
            Setting {
                amp_code: AMP_STEPS,
                mirror_ratio: self.max_ratio(),
                offset_p: 0,
                offset_n: 1,
            }
        }
    }
}

/// Parallel R-C load impedance at `f`.
pub fn rc_load(r: f64, c: f64, f: f64) -> Complex64 {
    1.0 / Complex64::new(1.0 / r, TAU * f * c)
}
