//! Evaluation arithmetic: SNR, ENOB, figure of merit, power budget, the
//! comparison table and the load error sweep.

use std::f64::consts::SQRT_2;

use rayon::prelude::*;

use crate::chain::{rc_load, Chain, Flags, Setting};
use crate::error::{Error, Result};
use crate::frontend::DriverSpec;
use crate::rng;
use crate::tdreadout::{readout_power, ReadoutSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn series_stats(series: &[f64]) -> Result<SeriesStats> {
    if series.len() < 2 {
        return Err(crate::error::domain("series length", series.len()));
    }
    if let Some(v) = series.iter().find(|v| !v.is_finite()) {
        return Err(crate::error::domain("series value", v));
    }
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(SeriesStats { n, mean, std: var.sqrt() })
}

/// A dB or bit figure that may be unbounded because the series had no spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Figure {
    pub value: f64,
    pub infinite: bool,
}

impl Figure {
    fn finite(value: f64) -> Self {
        Self { value, infinite: false }
    }

    fn unbounded() -> Self {
        Self {
            value: f64::INFINITY,
            infinite: true,
        }
    }
}

/// 20·log10(mean/std).
pub fn snr_db(series: &[f64]) -> Result<Figure> {
    let s = series_stats(series)?;
    if s.std == 0.0 {
        return Ok(Figure::unbounded());
    }
    Ok(Figure::finite(20.0 * (s.mean.abs() / s.std).log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnobVariant {
    /// log2(mean / (2·√2·std)).
    #[default]
    TwoRootTwo,
    /// log2(mean / (2·√std)); dimensionful, kept for comparison.
    RootStd,
}

pub fn enob(series: &[f64], variant: EnobVariant) -> Result<Figure> {
    let s = series_stats(series)?;
    if s.std == 0.0 {
        return Ok(Figure::unbounded());
    }
    let denom = match variant {
        EnobVariant::TwoRootTwo => 2.0 * SQRT_2 * s.std,
        EnobVariant::RootStd => 2.0 * s.std.sqrt(),
    };
    Ok(Figure::finite((s.mean.abs() / denom).log2()))
}

/// ENOB implied by an SNR under the 2√2 reading.
pub fn enob_from_snr(snr_db: f64) -> f64 {
    (10f64.powf(snr_db / 20.0) / (2.0 * SQRT_2)).log2()
}

/// SNR plus 10·log10 of sampling rate (sensors per frame, kHz) per mW.
pub fn fom_db(snr_db: f64, n_sensors: f64, frame_time_ms: f64, power_mw: f64) -> Result<f64> {
    for (what, v) in [("sensors", n_sensors), ("frame time", frame_time_ms), ("power", power_mw)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(crate::error::domain(what, v));
        }
    }
    Ok(snr_db + 10.0 * ((n_sensors / frame_time_ms) / power_mw).log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Budget {
    pub components: Vec<(String, f64)>,
    pub total: f64,
    pub per_sensor: f64,
    /// Energy per sensor per frame (J).
    pub energy_per_sensor: f64,
    pub fps: f64,
    /// Component shares of the total, same order as `components`.
    pub shares: Vec<(String, f64)>,
}

pub fn budget(components: &[(String, f64)], n_sensors: usize, frame_time: f64) -> Result<Budget> {
    if let Some((name, v)) = components.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("power component `{name}` must be non-negative, got {v}")));
    }
    if n_sensors == 0 {
        return Err(crate::error::domain("sensors", 0));
    }
    if !(frame_time > 0.0) {
        return Err(crate::error::domain("frame time", frame_time));
    }
    let total: f64 = components.iter().map(|(_, v)| v).sum();
    let shares = components
        .iter()
        .map(|(n, v)| (n.clone(), if total > 0.0 { v / total } else { 0.0 }))
        .collect();
    Ok(Budget {
        components: components.to_vec(),
        total,
        per_sensor: total / n_sensors as f64,
        energy_per_sensor: total * frame_time / n_sensors as f64,
        fps: 1.0 / frame_time,
        shares,
    })
}

/// Signal generator, PLL and digital power not covered by the driver and
/// comparator models (W).
pub const GENERATOR_PLL_DIGITAL_POWER: f64 = 41.2e-6;

/// Chip power at idle: quiescent driver, gated comparator and the fixed
/// remainder.
pub fn default_power_components(driver: &DriverSpec, readout: &ReadoutSpec) -> Vec<(String, f64)> {
    vec![
        ("driver".to_string(), driver.supply_v * driver.i_bias_q),
        ("readout".to_string(), readout_power(readout)),
        ("generator_pll_digital".to_string(), GENERATOR_PLL_DIGITAL_POWER),
    ]
}

/// One column of the comparison table, as published.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub work: &'static str,
    pub technology_nm: u32,
    pub supply: &'static str,
    pub method: &'static str,
    pub sensors: u32,
    pub input_range: &'static str,
    pub power_uw: f64,
    pub power_per_sensor_uw: f64,
    pub energy_per_sensor_nj: Option<f64>,
    /// Frame conversion time (ms) used for the sampling rate.
    pub frame_time_ms: Option<f64>,
    pub snr_db: f64,
    pub enob: f64,
    pub fom_db: Option<f64>,
}

pub fn comparison_table() -> Vec<TableEntry> {
    vec![
        TableEntry {
            work: "ISSCC'20 [13]",
            technology_nm: 130,
            supply: "1.2",
            method: "Voltage",
            sensors: 32,
            input_range: "249k",
            power_uw: 70.0,
            power_per_sensor_uw: 2.2,
            energy_per_sensor_nj: None,
            frame_time_ms: None,
            snr_db: 77.7,
            enob: 11.4,
            fom_db: None,
        },
        TableEntry {
            work: "JSSC'23 [14]",
            technology_nm: 180,
            supply: "1.8",
            method: "Voltage",
            sensors: 1,
            input_range: "2.2k-4.4k",
            power_uw: 12.79,
            power_per_sensor_uw: 12.79,
            energy_per_sensor_nj: Some(147.3),
            frame_time_ms: Some(11.52),
            snr_db: 71.0,
            enob: 10.3,
            fom_db: Some(79.3),
        },
        TableEntry {
            work: "JSSC'24 [5]",
            technology_nm: 65,
            supply: "1.8/1.0",
            method: "T-D",
            sensors: 208,
            input_range: "N/A",
            power_uw: 1760.0,
            power_per_sensor_uw: 8.46,
            energy_per_sensor_nj: Some(23.7),
            frame_time_ms: Some(2.81),
            snr_db: 52.7,
            enob: 7.3,
            fom_db: Some(68.9),
        },
        TableEntry {
            work: "JSSC'24 [15]",
            technology_nm: 65,
            supply: "1.2",
            method: "Voltage",
            sensors: 72,
            input_range: "<910k",
            power_uw: 53.0,
            power_per_sensor_uw: 0.74,
            energy_per_sensor_nj: Some(83.3),
            frame_time_ms: Some(112.5),
            snr_db: 70.0,
            enob: 10.1,
            fom_db: Some(80.8),
        },
        TableEntry {
            work: "This work",
            technology_nm: 65,
            supply: "1.2",
            method: "T-D",
            sensors: 253,
            input_range: "20-500k",
            power_uw: 158.0,
            power_per_sensor_uw: 0.62,
            energy_per_sensor_nj: Some(7.5),
            frame_time_ms: Some(12.2),
            snr_db: 71.1,
            enob: 10.3,
            fom_db: Some(92.3),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCheck {
    pub entry: TableEntry,
    pub enob: f64,
    pub fom_db: Option<f64>,
    pub energy_per_sensor_nj: Option<f64>,
}

impl TableCheck {
    pub fn enob_delta(&self) -> f64 {
        self.enob - self.entry.enob
    }

    pub fn fom_delta(&self) -> Option<f64> {
        Some(self.fom_db? - self.entry.fom_db?)
    }
}

/// Recomputes ENOB, FoM and energy per sensor from each entry's own inputs.
pub fn check_table(entries: &[TableEntry]) -> Result<Vec<TableCheck>> {
    entries
        .iter()
        .map(|e| {
            let fom = match e.frame_time_ms {
                Some(t) => Some(fom_db(e.snr_db, e.sensors as f64, t, e.power_uw * 1e-3)?),
                None => None,
            };
            Ok(TableCheck {
                entry: e.clone(),
                enob: enob_from_snr(e.snr_db),
                fom_db: fom,
                energy_per_sensor_nj: e.frame_time_ms.map(|t| e.power_uw * t / e.sensors as f64),
            })
        })
        .collect()
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("N/A".to_string(), |x| format!("{x:.prec$}"))
}

fn quoted(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn table_csv(checks: &[TableCheck], comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        s.push_str(&format!("# {c}\n"));
    }
    s.push_str(
        "work,technology_nm,supply_v,method,sensors,input_range_ohm,power_uw,power_per_sensor_uw,\
         energy_per_sensor_nj,frame_time_ms,snr_db,enob,fom_db,\
         enob_recomputed,fom_recomputed,energy_per_sensor_recomputed_nj,enob_delta,fom_delta\n",
    );
    for c in checks {
        let e = &c.entry;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{},{},{:+.3},{}\n",
            quoted(e.work),
            e.technology_nm,
            quoted(e.supply),
            e.method,
            e.sensors,
            quoted(e.input_range),
            e.power_uw,
            e.power_per_sensor_uw,
            opt(e.energy_per_sensor_nj, 1),
            opt(e.frame_time_ms, 2),
            e.snr_db,
            e.enob,
            opt(e.fom_db, 1),
            c.enob,
            opt(c.fom_db, 3),
            opt(c.energy_per_sensor_nj, 3),
            c.enob_delta(),
            c.fom_delta().map_or("N/A".to_string(), |d| format!("{d:+.3}")),
        ));
    }
    s
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub loads: Vec<f64>,
    /// Capacitance of the fixture in parallel with every load (F).
    pub c_fixture: f64,
    /// Repeats per load; 1 gives a single auto-ranged conversion.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            loads: log_spaced(20.0, 500e3, 25),
            c_fixture: DEFAULT_FIXTURE_CAPACITANCE,
            repeats: 1,
            seed: 1,
        }
    }
}

/// Lead and fixture capacitance across a test load (F).
pub const DEFAULT_FIXTURE_CAPACITANCE: f64 = 20e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub load: f64,
    pub setting: Setting,
    /// Mean |R/R_true - 1| over accepted repeats.
    pub mean_rel_err: Option<f64>,
    pub r_mean: Option<f64>,
    pub snr: Option<Figure>,
    pub accepted: usize,
    /// Flags of the ranging conversion.
    pub flags: Flags,
}

impl SweepRow {
    pub fn excluded(&self) -> bool {
        self.mean_rel_err.is_none()
    }
}

/// Measures every load: one auto-ranged conversion, then, when
/// `repeats > 1`, that many conversions at the frozen setting.
pub fn error_sweep(chain: &Chain, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if let Some(r) = spec.loads.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(crate::error::domain("load", r));
    }
    if spec.repeats == 0 {
        return Err(crate::error::domain("repeats", 0));
    }
    let f = chain.config().excitation.f_exc;
    spec.loads
        .par_iter()
        .enumerate()
        .map(|(k, &load)| {
            let z = rc_load(load, spec.c_fixture, f);
            let m = chain.measure(z, rng::derive_seed(spec.seed, &[k as u64]))?;
            let series: Vec<f64> = if spec.repeats == 1 {
                m.resistance().into_iter().collect()
            } else {
                chain
                    .measure_repeated(m.setting, z, rng::derive_seed(spec.seed, &[k as u64, 1]), spec.repeats)?
                    .iter()
                    .filter(|r| r.flags.ok())
                    .filter_map(|r| r.resistance())
                    .collect()
            };
            let accepted = series.len();
            let (mean_rel_err, r_mean) = if accepted == 0 || !m.flags.ok() {
                (None, None)
            } else {
                let e = series.iter().map(|r| (r / load - 1.0).abs()).sum::<f64>() / accepted as f64;
                (Some(e), Some(series.iter().sum::<f64>() / accepted as f64))
            };
            let snr = if accepted >= 2 { Some(snr_db(&series)?) } else { None };
            Ok(SweepRow {
                load,
                setting: m.setting,
                mean_rel_err,
                r_mean,
                snr,
                accepted,
                flags: m.flags,
            })
        })
        .collect()
}

/// Mean error over loads that were not excluded.
pub fn headline_error(rows: &[SweepRow]) -> Option<f64> {
    let errs: Vec<f64> = rows.iter().filter_map(|r| r.mean_rel_err).collect();
    if errs.is_empty() {
        None
    } else {
        Some(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

pub fn sweep_csv(rows: &[SweepRow], comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        s.push_str(&format!("# {c}\n"));
    }
    if let Some(h) = headline_error(rows) {
        s.push_str(&format!("# mean_rel_err={h:.6e}\n"));
    }
    s.push_str("load_ohm,r_mean_ohm,mean_rel_err,snr_db,accepted,amp_code,mirror_ratio,offset_p,offset_n,flags\n");
    for r in rows {
        let snr = match r.snr {
            Some(f) if f.infinite => "inf".to_string(),
            Some(f) => format!("{:.4}", f.value),
            None => String::new(),
        };
        s.push_str(&format!(
            "{:.4},{},{},{},{},{},{},{},{},{}\n",
            r.load,
            r.r_mean.map_or(String::new(), |v| format!("{v:.4}")),
            r.mean_rel_err.map_or(String::new(), |v| format!("{v:.6e}")),
            snr,
            r.accepted,
            r.setting.amp_code,
            r.setting.mirror_ratio,
            r.setting.offset_p,
            r.setting.offset_n,
            if r.excluded() {
                format!("{} (excluded)", r.flags.label())
            } else {
                r.flags.label()
            }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainConfig;
    use proptest::prelude::*;

    fn series_with(mean: f64, std: f64) -> Vec<f64> {
        vec![mean - std, mean + std]
    }

    #[test]
    fn snr_of_known_ratio() {
        let s = snr_db(&series_with(10e3, 3.162)).unwrap();
        assert!((s.value - 70.0).abs() < 1e-3);
    }

    #[test]
    fn identical_series_is_flagged() {
        let s = snr_db(&[5.0; 10]).unwrap();
        assert!(s.infinite && s.value.is_infinite());
        assert!(enob(&[5.0; 10], EnobVariant::TwoRootTwo).unwrap().infinite);
        assert!(snr_db(&[1.0]).is_err());
    }

    #[test]
    fn enob_readings() {
        for (snr, bits) in [(71.1, 10.3), (52.7, 7.3), (70.0, 10.1), (77.7, 11.4), (71.0, 10.3)] {
            let ratio = 10f64.powf(snr / 20.0);
            let e = enob(&series_with(ratio, 1.0), EnobVariant::TwoRootTwo).unwrap().value;
            assert!((e - bits).abs() < 0.05, "{snr}: {e}");
            assert!((enob_from_snr(snr) - e).abs() < 1e-9);
        }
        let lit = enob(&series_with(3589.0, 1.0), EnobVariant::RootStd).unwrap().value;
        assert!((lit - (3589f64 / 2.0).log2()).abs() < 1e-9);
    }

    #[test]
    fn fom_examples() {
        for (inputs, want) in [
            ((71.1, 253.0, 12.2, 0.158), 92.3),
            ((52.7, 208.0, 2.81, 1.76), 68.9),
            ((70.0, 72.0, 112.5, 0.053), 80.8),
            ((71.0, 1.0, 11.52, 0.01279), 79.3),
        ] {
            let f = fom_db(inputs.0, inputs.1, inputs.2, inputs.3).unwrap();
            assert!((f - want).abs() < 0.05, "{inputs:?}: {f}");
        }
        assert!(fom_db(70.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn default_budget() {
        let comps = default_power_components(&DriverSpec::default(), &ReadoutSpec::default());
        let b = budget(&comps, 253, 12.2e-3).unwrap();
        assert!((b.total - 158e-6).abs() < 1e-12);
        assert!((b.per_sensor * 1e6 - 0.6245).abs() < 1e-3);
        assert!((b.energy_per_sensor * 1e9 - 7.619).abs() < 1e-3);
        assert_eq!(b.fps.round(), 82.0);
        let sum: f64 = b.components.iter().map(|c| c.1).sum();
        assert_eq!(sum, b.total);
        assert!((b.shares.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(budget(&[("x".into(), -1.0)], 1, 1.0).is_err());
    }

    #[test]
    fn table_recomputation() {
        let checks = check_table(&comparison_table()).unwrap();
        for c in &checks {
            assert!(c.enob_delta().abs() < 0.05, "{}", c.entry.work);
            if let Some(d) = c.fom_delta() {
                assert!(d.abs() < 0.05, "{}", c.entry.work);
            }
        }
        let csv = table_csv(&checks, &[]);
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn log_spacing() {
        let v = log_spaced(20.0, 500e3, 25);
        assert_eq!(v.len(), 25);
        assert!((v[0] - 20.0).abs() < 1e-12 && (v[24] - 500e3).abs() < 1e-6);
        let r = v[1] / v[0];
        assert!(v.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-9));
    }

    #[test]
    fn boundary_load_is_excluded() {
        let mut cfg = ChainConfig::default();
        cfg.ranging.enabled = false;
        cfg.path = crate::chain::ExcitationPath::Ideal;
        let chain = Chain::new(cfg).unwrap();
        let s = chain.config().base_setting();
        let boundary = s.mirror_ratio as f64 * s.v_peak() / chain.config().readout.threshold();
        let spec = SweepSpec {
            loads: vec![boundary, 0.5 * boundary],
            c_fixture: 0.0,
            repeats: 1,
            seed: 0,
        };
        let rows = error_sweep(&chain, &spec).unwrap();
        assert!(rows[0].excluded() && rows[0].flags.saturated);
        assert!(!rows[1].excluded());
        assert_eq!(headline_error(&rows), rows[1].mean_rel_err);
        assert!(sweep_csv(&rows, &[]).contains("saturated (excluded)"));
    }

    proptest! {
        #[test]
        fn snr_is_scale_invariant(v in prop::collection::vec(1.0f64..2.0, 2..40), k in 1e-3f64..1e3) {
            let a = snr_db(&v).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let b = snr_db(&scaled).unwrap();
            prop_assert_eq!(a.infinite, b.infinite);
            if !a.infinite {
                prop_assert!((a.value - b.value).abs() < 1e-6);
            }
        }

        #[test]
        fn budget_total_is_sum(parts in prop::collection::vec(0.0f64..1e-3, 1..8)) {
            let comps: Vec<(String, f64)> = parts.iter().enumerate().map(|(i, v)| (format!("c{i}"), *v)).collect();
            let b = budget(&comps, 10, 1e-3).unwrap();
            prop_assert_eq!(b.total, parts.iter().sum::<f64>());
        }
    }
}
