//! TOML run configuration. Every section and key is optional; missing keys
//! take the defaults of the core model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tdz_core::chain::{self, ChainConfig, ExcitationPath, RangingSpec};
use tdz_core::crossbar::{self, TerminationPolicy};
use tdz_core::frontend::{DriverSpec, MIRROR_STEPS};
use tdz_core::metrics::{self, DEFAULT_FIXTURE_CAPACITANCE};
use tdz_core::recon::{Method, ReconSpec};
use tdz_core::sigsynth::{CoPrimeDacSpec, ExcitationSpec};
use tdz_core::tdreadout::{MergeRule, ReadoutSpec};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_OUT: &str = "tdzsim-out";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub excitation: ExcitationSection,
    pub dac: DacSection,
    pub driver: DriverSection,
    pub readout: ReadoutSection,
    pub noise: NoiseSection,
    pub ranging: RangingSection,
    pub grid: GridSection,
    pub recon: ReconSection,
    pub sweep: SweepSection,
    pub montecarlo: MonteCarloSection,
    pub thd: ThdSection,
    pub table: TableSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            out: DEFAULT_OUT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSection {
    pub f_exc: f64,
    pub amp_code: u32,
    pub f_clk: f64,
    pub lut_bits: u32,
    pub lut_amp_bits: u32,
    pub phases: u32,
    pub enforce_range: bool,
    /// "synthesized" or "ideal".
    pub path: String,
    pub ti_cutoff_ratio: f64,
    pub settle_periods: u32,
}

impl Default for ExcitationSection {
    fn default() -> Self {
        let e = ExcitationSpec::default();
        let c = ChainConfig::default();
        Self {
            f_exc: e.f_exc,
            amp_code: e.amp_code,
            f_clk: e.f_clk,
            lut_bits: e.lut_bits,
            lut_amp_bits: e.lut_amp_bits,
            phases: e.phases,
            enforce_range: e.enforce_range,
            path: "synthesized".into(),
            ti_cutoff_ratio: c.ti_cutoff_ratio,
            settle_periods: c.settle_periods,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DacSection {
    pub coarse_units: usize,
    pub fine_units: usize,
    pub unit_current: f64,
    pub unit_mismatch_sigma: f64,
    pub dem_enabled: bool,
    pub mismatch_seed: u64,
}

impl Default for DacSection {
    fn default() -> Self {
        let d = CoPrimeDacSpec::default();
        Self {
            coarse_units: d.coarse_units,
            fine_units: d.fine_units,
            unit_current: d.unit_current,
            unit_mismatch_sigma: d.unit_mismatch_sigma,
            dem_enabled: d.dem_enabled,
            mismatch_seed: ChainConfig::default().dac_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverSection {
    pub i_bias_q: f64,
    pub i_limit: f64,
    pub i_adp_step: f64,
    pub max_adp_steps: u32,
    /// Negative means half a step.
    pub hysteresis: f64,
    pub adaptive_enabled: bool,
    pub mirror_ratio: u32,
    pub mirror_steps: Vec<u32>,
    pub lin_headroom: f64,
    pub supply_v: f64,
    pub i_cm: f64,
    pub peak_tau: f64,
}

impl Default for DriverSection {
    fn default() -> Self {
        let d = DriverSpec::default();
        Self {
            i_bias_q: d.i_bias_q,
            i_limit: d.i_limit,
            i_adp_step: d.i_adp_step,
            max_adp_steps: d.max_adp_steps,
            hysteresis: d.hysteresis.unwrap_or(-1.0),
            adaptive_enabled: d.adaptive_enabled,
            mirror_ratio: d.mirror_ratio,
            mirror_steps: MIRROR_STEPS.to_vec(),
            lin_headroom: d.lin_headroom,
            supply_v: d.supply_v,
            i_cm: d.i_cm,
            peak_tau: d.peak_tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutSection {
    pub cycles_per_meas: u32,
    pub offset_code_p: u32,
    pub offset_code_n: u32,
    pub offset_lsb: f64,
    /// "majority" or "sum".
    pub merge: String,
    pub energy_per_edge: f64,
    pub gate_duty: f64,
    pub gating_enabled: bool,
    pub midpoint_phase: bool,
}

impl Default for ReadoutSection {
    fn default() -> Self {
        let r = ReadoutSpec::default();
        Self {
            cycles_per_meas: r.cycles_per_meas,
            offset_code_p: r.offset_code_p,
            offset_code_n: r.offset_code_n,
            offset_lsb: r.offset_lsb,
            merge: "majority".into(),
            energy_per_edge: r.energy_per_edge,
            gate_duty: r.gate_duty,
            gating_enabled: r.gating_enabled,
            midpoint_phase: r.midpoint_phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Applies the noise sources below to measure, frame and recon.
    pub enabled: bool,
    pub comparator_sigma: f64,
    pub jitter_sigma: f64,
    pub driver_current_sigma: f64,
    pub driver_voltage_sigma: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            enabled: false,
            comparator_sigma: chain::CALIBRATED_COMPARATOR_NOISE,
            jitter_sigma: chain::CALIBRATED_JITTER,
            driver_current_sigma: chain::CALIBRATED_DRIVER_NOISE,
            driver_voltage_sigma: chain::CALIBRATED_DRIVER_VNOISE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangingSection {
    pub enabled: bool,
    pub d_min: f64,
    pub d_max: f64,
    pub i_cap: f64,
    pub r_max: f64,
    pub max_retries: u32,
}

impl Default for RangingSection {
    fn default() -> Self {
        let r = RangingSpec::default();
        Self {
            enabled: r.enabled,
            d_min: r.d_min,
            d_max: r.d_max,
            i_cap: r.i_cap,
            r_max: r.r_max,
            max_retries: r.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Resistance matrix file, relative to the config file. Empty means
    /// none.
    pub path: String,
    /// Optional per-sensor capacitance matrix file.
    pub capacitance_path: String,
    /// "floating", "grounded" or "driven_guard".
    pub policy: String,
    pub mux_r_on: f64,
    pub line_cap: f64,
    pub t_meas: f64,
    /// "ideal" or "full_chain".
    pub acquisition: String,
    pub map_lo: f64,
    pub map_hi: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            path: String::new(),
            capacitance_path: String::new(),
            policy: "floating".into(),
            mux_r_on: crossbar::DEFAULT_MUX_R_ON,
            line_cap: 0.0,
            t_meas: crossbar::DEFAULT_T_MEAS,
            acquisition: "full_chain".into(),
            map_lo: 20.0,
            map_hi: 500e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    /// "fixed_point" or "gauss_newton".
    pub method: String,
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Reference resistance of the pressure map transfer r_ref / R.
    pub pressure_r_ref: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        let r = ReconSpec::default();
        Self {
            method: "fixed_point".into(),
            max_iters: r.max_iters,
            tol: r.tol,
            damping: r.damping,
            r_min: r.r_min,
            r_max: r.r_max,
            pressure_r_ref: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub c_fixture: f64,
    /// Ignore [noise] for the accuracy sweep.
    pub noiseless: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lo: 20.0,
            hi: 500e3,
            count: 25,
            c_fixture: DEFAULT_FIXTURE_CAPACITANCE,
            noiseless: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSection {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub repeats: usize,
    pub c_fixture: f64,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            lo: 20.0,
            hi: 500e3,
            count: 25,
            repeats: 1000,
            c_fixture: DEFAULT_FIXTURE_CAPACITANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThdSection {
    /// Peak load-current amplitudes of the sweep (A).
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub limit: f64,
}

impl Default for ThdSection {
    fn default() -> Self {
        Self {
            lo: 10e-6,
            hi: 2e-3,
            count: 40,
            limit: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSection {
    pub sensors: usize,
}

impl Default for TableSection {
    fn default() -> Self {
        Self {
            sensors: crossbar::DEFAULT_ROWS * crossbar::DEFAULT_COLS,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn one_of<'a>(key: &str, v: &str, allowed: &[&'a str]) -> Result<&'a str, CliError> {
    allowed
        .iter()
        .find(|a| **a == v)
        .copied()
        .ok_or_else(|| config_err(format!("{key} = `{v}`: expected one of {}", allowed.join(", "))))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.chain_config(false)?;
        cfg.policy()?;
        cfg.recon_spec()?;
        one_of("grid.acquisition", &cfg.grid.acquisition, &["ideal", "full_chain"])?;
        Ok(cfg)
    }

    /// Reads a config file; relative grid paths are resolved against its
    /// directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn chain_config(&self, noisy: bool) -> Result<ChainConfig, CliError> {
        let e = &self.excitation;
        let d = &self.driver;
        let r = &self.readout;
        let n = &self.noise;
        let rg = &self.ranging;
        let path = match one_of("excitation.path", &e.path, &["synthesized", "ideal"])? {
            "ideal" => ExcitationPath::Ideal,
            _ => ExcitationPath::Synthesized,
        };
        let merge = match one_of("readout.merge", &r.merge, &["majority", "sum"])? {
            "sum" => MergeRule::Sum,
            _ => MergeRule::Majority,
        };
        let cfg = ChainConfig {
            excitation: ExcitationSpec {
                f_exc: e.f_exc,
                amp_code: e.amp_code,
                f_clk: e.f_clk,
                lut_bits: e.lut_bits,
                lut_amp_bits: e.lut_amp_bits,
                phases: e.phases,
                enforce_range: e.enforce_range,
                test_mode: false,
            },
            dac: CoPrimeDacSpec {
                coarse_units: self.dac.coarse_units,
                fine_units: self.dac.fine_units,
                unit_current: self.dac.unit_current,
                unit_mismatch_sigma: self.dac.unit_mismatch_sigma,
                dem_enabled: self.dac.dem_enabled,
            },
            dac_seed: self.dac.mismatch_seed,
            ti_cutoff_ratio: e.ti_cutoff_ratio,
            path,
            driver: DriverSpec {
                i_bias_q: d.i_bias_q,
                i_limit: d.i_limit,
                i_adp_step: d.i_adp_step,
                max_adp_steps: d.max_adp_steps,
                hysteresis: (d.hysteresis >= 0.0).then_some(d.hysteresis),
                adaptive_enabled: d.adaptive_enabled,
                mirror_ratio: d.mirror_ratio,
                mirror_steps: d.mirror_steps.clone(),
                lin_headroom: d.lin_headroom,
                supply_v: d.supply_v,
                i_cm: d.i_cm,
                peak_tau: d.peak_tau,
            },
            driver_noise_sigma: if noisy { n.driver_current_sigma } else { 0.0 },
            driver_vnoise_sigma: if noisy { n.driver_voltage_sigma } else { 0.0 },
            readout: ReadoutSpec {
                f_clk: e.f_clk,
                phases: e.phases,
                cycles_per_meas: r.cycles_per_meas,
                offset_code_p: r.offset_code_p,
                offset_code_n: r.offset_code_n,
                offset_lsb: r.offset_lsb,
                noise_sigma: if noisy { n.comparator_sigma } else { 0.0 },
                jitter_sigma: if noisy { n.jitter_sigma } else { 0.0 },
                merge,
                energy_per_edge: r.energy_per_edge,
                gate_duty: r.gate_duty,
                gating_enabled: r.gating_enabled,
                midpoint_phase: r.midpoint_phase,
            },
            ranging: RangingSpec {
                enabled: rg.enabled,
                d_min: rg.d_min,
                d_max: rg.d_max,
                i_cap: rg.i_cap,
                r_max: rg.r_max,
                max_retries: rg.max_retries,
            },
            settle_periods: e.settle_periods,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        let n_ok = [n.comparator_sigma, n.jitter_sigma, n.driver_current_sigma, n.driver_voltage_sigma]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if !n_ok {
            return Err(config_err("noise sigmas must be non-negative"));
        }
        Ok(cfg)
    }

    pub fn policy(&self) -> Result<TerminationPolicy, CliError> {
        self.grid.policy.parse().map_err(|e: tdz_core::Error| config_err(e.to_string()))
    }

    pub fn recon_spec(&self) -> Result<ReconSpec, CliError> {
        let r = &self.recon;
        let method = match one_of("recon.method", &r.method, &["fixed_point", "gauss_newton"])? {
            "gauss_newton" => Method::GaussNewton,
            _ => Method::FixedPoint,
        };
        let spec = ReconSpec {
            method,
            max_iters: r.max_iters,
            tol: r.tol,
            damping: r.damping,
            r_min: r.r_min,
            r_max: r.r_max,
            f: self.excitation.f_exc,
        };
        spec.validate().map_err(|e| config_err(e.to_string()))?;
        if !(r.pressure_r_ref > 0.0) {
            return Err(config_err("recon.pressure_r_ref must be positive"));
        }
        Ok(spec)
    }

    pub fn sweep_loads(&self) -> Result<Vec<f64>, CliError> {
        loads("sweep", self.sweep.lo, self.sweep.hi, self.sweep.count)
    }

    pub fn montecarlo_loads(&self) -> Result<Vec<f64>, CliError> {
        loads("montecarlo", self.montecarlo.lo, self.montecarlo.hi, self.montecarlo.count)
    }
}

fn loads(section: &str, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, CliError> {
    if !(lo > 0.0 && hi >= lo && n >= 1) {
        return Err(config_err(format!("[{section}] needs 0 < lo <= hi and count >= 1")));
    }
    Ok(metrics::log_spaced(lo, hi, n))
}
