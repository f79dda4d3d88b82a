//! Clocked-comparator time-to-digital readout. The comparator samples the
//! differential mirrored current against a programmable offset threshold on
//! a clock whose phase is advanced by `1/phases` of a tick on every
//! excitation cycle; the merged bit pattern yields the counts from which
//! magnitude and phase are recovered.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sigsynth::ticks_per_period;

/// How repeated samples of one effective position are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeRule {
    /// Per-position majority; ties resolve high.
    Majority,
    /// Total high samples rescaled to one period.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutSpec {
    pub f_clk: f64,
    pub phases: u32,
    pub cycles_per_meas: u32,
    pub offset_code_p: u32,
    pub offset_code_n: u32,
    /// Offset DAC step (A).
    pub offset_lsb: f64,
    /// Input-referred comparator noise per sample (A rms).
    pub noise_sigma: f64,
    /// Sampling-edge jitter (s rms).
    pub jitter_sigma: f64,
    pub merge: MergeRule,
    /// Energy drawn per clock edge while the comparator is conducting (J).
    pub energy_per_edge: f64,
    /// Fraction of the clock period the conduction path stays on with the
    /// asynchronous reset.
    pub gate_duty: f64,
    pub gating_enabled: bool,
    /// Remove the half-position phase lag of the counted pulse centre.
    pub midpoint_phase: bool,
}

pub const OFFSET_CODE_MAX: u32 = 63;

impl Default for ReadoutSpec {
    fn default() -> Self {
        Self {
            f_clk: 64e6,
            phases: 6,
            cycles_per_meas: 6,
            offset_code_p: 0,
            offset_code_n: 40,
            offset_lsb: 0.5e-6,
            noise_sigma: 0.0,
            jitter_sigma: 0.0,
            merge: MergeRule::Majority,
            energy_per_edge: 1.75e-12,
            gate_duty: 0.25,
            gating_enabled: true,
            midpoint_phase: false,
        }
    }
}

impl ReadoutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phases == 0 || self.cycles_per_meas < self.phases {
            return Err(Error::Config(format!(
                "need cycles_per_meas ({}) >= phases ({}) >= 1",
                self.cycles_per_meas, self.phases
            )));
        }
        if self.offset_code_p > OFFSET_CODE_MAX || self.offset_code_n > OFFSET_CODE_MAX {
            return Err(Error::Config("offset codes are 6-bit (0..=63)".into()));
        }
        if self.offset_code_p == self.offset_code_n {
            return Err(Error::Config("net threshold is zero: offset codes are equal".into()));
        }
        if !(self.offset_lsb > 0.0) || !(self.noise_sigma >= 0.0) || !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("offset LSB must be positive, noise non-negative".into()));
        }
        Ok(())
    }

    /// Net differential threshold `(n - p) * lsb`.
    pub fn threshold(&self) -> f64 {
        (self.offset_code_n as f64 - self.offset_code_p as f64) * self.offset_lsb
    }

    pub fn with_offsets(mut self, p: u32, n: u32) -> Self {
        self.offset_code_p = p;
        self.offset_code_n = n;
        self
    }

    /// Effective positions per excitation period.
    pub fn n0(&self, f_exc: f64) -> Result<u32> {
        Ok(ticks_per_period(self.f_clk, f_exc)? as u32 * self.phases)
    }

    /// Wall time of one conversion (s).
    pub fn conversion_time(&self, f_exc: f64) -> f64 {
        self.cycles_per_meas as f64 / f_exc
    }
}

/// Where and when a comparator decision is taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub cycle: u32,
    pub tick: u32,
    pub phase: u32,
    /// Index on the effective grid of `phases` points per tick, counted
    /// from the start of the conversion.
    pub fine_index: u64,
    /// Nominal sample time from the excitation phase zero (s).
    pub t_nominal: f64,
    /// Edge jitter applied to this sample (s).
    pub jitter: f64,
}

impl SamplePoint {
    pub fn t(&self) -> f64 {
        self.t_nominal + self.jitter
    }
}

/// Raw comparator decisions, cycle-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub ticks_per_cycle: u32,
    pub phases: u32,
    pub cycles: u32,
    pub bits: Vec<bool>,
}

impl Bitstream {
    pub fn bit(&self, cycle: u32, tick: u32) -> bool {
        self.bits[(cycle * self.ticks_per_cycle + tick) as usize]
    }

    /// CSV rows `(cycle, phase, tick, bit)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cycle,phase,tick,bit\n");
        for c in 0..self.cycles {
            for t in 0..self.ticks_per_cycle {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    c,
                    c % self.phases,
                    t,
                    self.bit(c, t) as u8
                ));
            }
        }
        out
    }
}

/// Samples `diff` (the differential comparator input, A) over one
/// conversion. Comparator noise and edge jitter are drawn from `rng`.
pub fn sample_bits<F, R>(spec: &ReadoutSpec, f_exc: f64, mut diff: F, rng: &mut R) -> Result<Bitstream>
where
    F: FnMut(&SamplePoint) -> f64,
    R: Rng + ?Sized,
{
    spec.validate()?;
    let ticks = ticks_per_period(spec.f_clk, f_exc)? as u32;
    let threshold = spec.threshold();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut bits = Vec::with_capacity((ticks * spec.cycles_per_meas) as usize);
    for cycle in 0..spec.cycles_per_meas {
        let phase = cycle % spec.phases;
        for tick in 0..ticks {
            let global_tick = (cycle * ticks + tick) as u64;
            let point = SamplePoint {
                cycle,
                tick,
                phase,
                fine_index: global_tick * spec.phases as u64 + phase as u64,
                t_nominal: (global_tick as f64 + phase as f64 / spec.phases as f64) / spec.f_clk,
                jitter: if spec.jitter_sigma > 0.0 { jitter.sample(rng) } else { 0.0 },
            };
            let mut value = diff(&point);
            if spec.noise_sigma > 0.0 {
                value += noise.sample(rng);
            }
            bits.push(value > threshold);
        }
    }
    Ok(Bitstream {
        ticks_per_cycle: ticks,
        phases: spec.phases,
        cycles: spec.cycles_per_meas,
        bits,
    })
}

/// Count triple on the effective grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TdCounts {
    pub n0: u32,
    pub n1: u32,
    pub n2: u32,
    /// No edge found: the pattern is all-low or all-high.
    pub saturated: bool,
}

impl TdCounts {
    pub fn duty(&self) -> f64 {
        self.n1 as f64 / self.n0 as f64
    }

    pub fn csv_header() -> &'static str {
        "n0,n1,n2"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.n0, self.n1, self.n2)
    }
}

/// Merges the interleaved cycles onto the effective grid and returns the
/// merged per-position pattern.
pub fn merge_positions(bits: &Bitstream, rule: MergeRule) -> Result<(Vec<bool>, u32)> {
    if bits.cycles < bits.phases || bits.bits.len() != (bits.cycles * bits.ticks_per_cycle) as usize {
        return Err(Error::Config("bitstream does not cover every interleave phase".into()));
    }
    let n0 = (bits.ticks_per_cycle * bits.phases) as usize;
    let mut high = vec![0u32; n0];
    let mut total = vec![0u32; n0];
    for c in 0..bits.cycles {
        let phase = (c % bits.phases) as usize;
        for t in 0..bits.ticks_per_cycle {
            let k = t as usize * bits.phases as usize + phase;
            total[k] += 1;
            high[k] += bits.bit(c, t) as u32;
        }
    }
    let merged: Vec<bool> = high.iter().zip(&total).map(|(&h, &n)| 2 * h >= n).collect();
    let n1 = match rule {
        MergeRule::Majority => merged.iter().filter(|&&b| b).count() as u32,
        MergeRule::Sum => {
            let h: u64 = high.iter().map(|&h| h as u64).sum();
            let n: u64 = total.iter().map(|&n| n as u64).sum();
            ((h as f64 * n0 as f64) / n as f64).round() as u32
        }
    };
    Ok((merged, n1))
}

/// Extracts `(n0, n1, n2)`. `n2` is the start of the high pulse, located
/// from the circular centroid of the high positions; for a single clean
/// pulse this is exactly its first 0->1 transition.
pub fn extract_counts(bits: &Bitstream, spec: &ReadoutSpec) -> Result<TdCounts> {
    let (merged, n1) = merge_positions(bits, spec.merge)?;
    let n0 = merged.len() as u32;
    if n1 == 0 || n1 >= n0 || merged.iter().all(|&b| b) || merged.iter().all(|&b| !b) {
        return Ok(TdCounts {
            n0,
            n1: n1.min(n0),
            n2: 0,
            saturated: true,
        });
    }
    let sum: Complex64 = merged
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(k, _)| Complex64::from_polar(1.0, TAU * k as f64 / n0 as f64))
        .sum();
    let centroid = (sum.arg() / TAU * n0 as f64).rem_euclid(n0 as f64);
    let start = centroid - (n1 as f64 - 1.0) / 2.0;
    let n2 = (start.round() as i64).rem_euclid(n0 as i64) as u32;
    Ok(TdCounts {
        n0,
        n1,
        n2,
        saturated: false,
    })
}

/// Demodulated current phasor: `i(t) = i_m * sin(2*pi*f*t + theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phasor {
    pub i_m: f64,
    pub theta: f64,
}

pub fn wrap_phase(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Magnitude and phase from counts: with duty `d = n1/n0`,
/// `i_m = i_th / cos(pi*d)` and `theta = pi/2 - 2*pi*(n2 + n1/2)/n0`.
/// Sampled edges lag the true crossings by half a position on average, so
/// this phase sits `pi/n0` below the true one; see [`midpoint_correction`].
/// A negative threshold yields the complementary pattern (`d > 1/2`), for
/// which the same expressions hold.
pub fn demodulate(c: &TdCounts, i_th: f64) -> Result<Phasor> {
    if c.saturated || c.n1 == 0 || c.n1 >= c.n0 {
        return Err(Error::OutOfRange(format!("n1 = {} of n0 = {}", c.n1, c.n0)));
    }
    if i_th == 0.0 {
        return Err(Error::InconsistentCounts("zero threshold".into()));
    }
    let d = c.duty();
    let cos = (PI * d).cos();
    let i_m = i_th / cos;
    if 2 * c.n1 == c.n0 || !(i_m > 0.0) || !i_m.is_finite() {
        return Err(Error::InconsistentCounts(format!(
            "duty {d} incompatible with threshold sign {i_th:e}"
        )));
    }
    let center = c.n2 as f64 + c.n1 as f64 / 2.0;
    Ok(Phasor {
        i_m,
        theta: wrap_phase(PI / 2.0 - TAU * center / c.n0 as f64),
    })
}

/// Phase to add to [`demodulate`] so the pulse centre is taken at the
/// midpoint of its first and last high samples.
pub fn midpoint_correction(n0: u32) -> f64 {
    PI / n0 as f64
}

/// Impedance from the demodulated mirrored current. `theta_ref` is the
/// excitation's phase at the reference tick.
pub fn to_impedance(p: &Phasor, v_m: f64, mirror_ratio: u32, theta_ref: f64) -> Result<Complex64> {
    if !(p.i_m > 0.0) {
        return Err(Error::OpenCircuit);
    }
    let mag = mirror_ratio as f64 * v_m / p.i_m;
    Ok(Complex64::from_polar(mag, -(p.theta - theta_ref)))
}

/// Parallel-equivalent resistance `1 / Re(1/Z)`.
pub fn parallel_resistance(z: Complex64) -> f64 {
    1.0 / (1.0 / z).re
}

/// Comparator power: energy per edge, clock rate, and conduction duty.
pub fn readout_power(spec: &ReadoutSpec) -> f64 {
    let duty = if spec.gating_enabled { spec.gate_duty } else { 1.0 };
    spec.energy_per_edge * spec.f_clk * duty
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const F: f64 = 125e3;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn sine(i_m: f64, theta: f64) -> impl FnMut(&SamplePoint) -> f64 {
        move |p| i_m * (TAU * F * p.t() + theta).sin()
    }

    #[test]
    fn zero_input_all_low() {
        let spec = ReadoutSpec::default();
        let bits = sample_bits(&spec, F, |_| 0.0, &mut rng()).unwrap();
        assert!(bits.bits.iter().all(|&b| !b));
        let c = extract_counts(&bits, &spec).unwrap();
        assert!(c.saturated);
        assert_eq!(c.n1, 0);
        assert!(matches!(demodulate(&c, spec.threshold()), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn default_grid_size_and_time() {
        let spec = ReadoutSpec::default();
        assert_eq!(spec.n0(F).unwrap(), 3072);
        assert!((spec.conversion_time(F) - 48e-6).abs() < 1e-18);
    }

    #[test]
    fn half_duty_square() {
        let spec = ReadoutSpec::default();
        let bits = sample_bits(
            &spec,
            F,
            |p| {
                let phase = (p.t() * F).fract();
                if phase < 0.5 - 1e-9 { 1.0 } else { -1.0 }
            },
            &mut rng(),
        )
        .unwrap();
        let c = extract_counts(&bits, &spec).unwrap();
        assert_eq!((c.n0, c.n1, c.n2), (3072, 1536, 0));
        assert!(!c.saturated);
        assert!(matches!(demodulate(&c, 1e-6), Err(Error::InconsistentCounts(_))));
    }

    #[test]
    fn quarter_duty_at_root_two_threshold() {
        let i_m = 20e-6;
        let spec = ReadoutSpec {
            offset_lsb: i_m / 2f64.sqrt() / 40.0,
            ..Default::default()
        };
        let bits = sample_bits(&spec, F, sine(i_m, 0.3), &mut rng()).unwrap();
        let c = extract_counts(&bits, &spec).unwrap();
        assert!((c.duty() - 0.25).abs() <= 1.0 / 3072.0);
    }

    #[test]
    fn quarter_duty_identities() {
        let c = TdCounts {
            n0: 3072,
            n1: 768,
            n2: 384,
            saturated: false,
        };
        let p = demodulate(&c, 10e-6).unwrap();
        assert!((p.i_m - 10e-6 * 2f64.sqrt()).abs() < 1e-15);
        assert!(p.theta.abs() < 1e-12);
        // vanishing pulse: magnitude approaches the threshold
        let c = TdCounts {
            n1: 1,
            ..c
        };
        let p = demodulate(&c, 10e-6).unwrap();
        assert!((p.i_m / 10e-6 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn recovers_thirty_degrees() {
        let spec = ReadoutSpec::default().with_offsets(0, 100 / 2);
        let spec = ReadoutSpec {
            offset_lsb: 1e-6,
            ..spec
        };
        let (i_m, theta) = (100e-6, 30f64.to_radians());
        let bits = sample_bits(&spec, F, sine(i_m, theta), &mut rng()).unwrap();
        let c = extract_counts(&bits, &spec).unwrap();
        let p = demodulate(&c, spec.threshold()).unwrap();
        let n0 = 3072.0;
        let d = c.duty();
        assert!(((p.i_m - i_m) / i_m).abs() <= PI * (PI * d).tan() / n0 + 2.0 / n0);
        assert!((p.theta - theta).abs() <= TAU * 1.5 / n0);
    }

    #[test]
    fn interleaving_refines_grid() {
        let single = ReadoutSpec {
            phases: 1,
            cycles_per_meas: 1,
            ..Default::default()
        };
        assert_eq!(single.n0(F).unwrap(), 512);
        assert_eq!(ReadoutSpec::default().n0(F).unwrap(), 3072);
    }

    #[test]
    fn complementary_threshold() {
        let spec = ReadoutSpec {
            offset_lsb: 1e-6,
            ..ReadoutSpec::default().with_offsets(0, 30)
        };
        let neg = ReadoutSpec {
            offset_lsb: 1e-6,
            ..ReadoutSpec::default().with_offsets(30, 0)
        };
        let (i_m, theta) = (50e-6, 0.7);
        let a = extract_counts(&sample_bits(&spec, F, sine(i_m, theta), &mut rng()).unwrap(), &spec).unwrap();
        let mut neg_sine = sine(i_m, theta);
        let b = extract_counts(&sample_bits(&neg, F, |p| -neg_sine(p), &mut rng()).unwrap(), &neg).unwrap();
        assert_eq!(a.n1 + b.n1, a.n0);
        let pa = demodulate(&a, spec.threshold()).unwrap();
        let pb = demodulate(&b, neg.threshold()).unwrap();
        assert!((pa.i_m - pb.i_m).abs() / pa.i_m < 2.0 / 3072.0 * PI);
        assert!(wrap_phase(pb.theta - pa.theta - PI).abs() < TAU * 2.0 / 3072.0);
    }

    #[test]
    fn impedance_arithmetic() {
        let p = Phasor {
            i_m: 25e-6,
            theta: 0.0,
        };
        let z = to_impedance(&p, 0.5, 1, 0.0).unwrap();
        assert!((z.re - 20e3).abs() < 1e-9 && z.im.abs() < 1e-9);
        let z25 = to_impedance(&p, 0.5, 25, 0.0).unwrap();
        assert!((z25 / z - 25.0).norm() < 1e-12);
        let open = Phasor { i_m: 0.0, theta: 0.0 };
        assert_eq!(to_impedance(&open, 0.5, 1, 0.0), Err(Error::OpenCircuit));
    }

    #[test]
    fn parallel_rc_recovers_resistance() {
        let (r, c) = (100e3, 10e-12);
        let w = TAU * F;
        let y = Complex64::new(1.0 / r, w * c);
        let z_true = 1.0 / y;
        // current leads the voltage by atan(wRC)
        let p = Phasor {
            i_m: 0.5 * y.norm(),
            theta: y.arg(),
        };
        let z = to_impedance(&p, 0.5, 1, 0.0).unwrap();
        assert!((z.norm() - r / (1.0 + (w * r * c).powi(2)).sqrt()).abs() < 1e-6);
        assert!((z.arg().to_degrees() + 38.14).abs() < 0.01);
        assert!((z - z_true).norm() < 1e-6);
        assert!((parallel_resistance(z) - r).abs() < 1e-6);
    }

    #[test]
    fn power_model() {
        let spec = ReadoutSpec::default();
        assert!((readout_power(&spec) - 28e-6).abs() < 1e-12);
        let half = ReadoutSpec {
            f_clk: 32e6,
            ..spec.clone()
        };
        assert!((readout_power(&half) - 14e-6).abs() < 1e-12);
        let ungated = ReadoutSpec {
            gating_enabled: false,
            ..spec.clone()
        };
        assert!(readout_power(&ungated) > readout_power(&spec));
    }

    #[test]
    fn config_errors() {
        assert!(ReadoutSpec::default().with_offsets(5, 5).validate().is_err());
        assert!(ReadoutSpec::default().with_offsets(0, 64).validate().is_err());
        let short = ReadoutSpec {
            cycles_per_meas: 3,
            ..Default::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn csv_exports() {
        let spec = ReadoutSpec {
            phases: 2,
            cycles_per_meas: 2,
            ..Default::default()
        };
        let bits = sample_bits(&spec, 8e6, |_| 1.0, &mut rng()).unwrap();
        let csv = bits.to_csv();
        assert_eq!(csv.lines().count(), 1 + 16);
        assert!(csv.lines().nth(9).unwrap().starts_with("1,1,0,"));
        let c = TdCounts { n0: 3072, n1: 5, n2: 7, saturated: false };
        assert_eq!(c.csv_row(), "3072,5,7");
    }
}
