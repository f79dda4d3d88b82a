//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p tdzsim --test acceptance`.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdz_core::chain::{Chain, ChainConfig, Setting};
use tdz_core::crossbar::{self, ScanPlan, SensorGrid, TerminationPolicy};
use tdz_core::frontend::{self, DriverSpec};
use tdz_core::metrics::{self, SweepSpec};
use tdz_core::recon::{self, Method, ReconSpec};
use tdz_core::sigsynth::{CoPrimeDac, CoPrimeDacSpec, Excitation, ExcitationSpec};
use tdz_core::tdreadout::{self, ReadoutSpec};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn frame_arithmetic() -> Outcome {
    let plan = ScanPlan::row_major(crossbar::DEFAULT_ROWS, crossbar::DEFAULT_COLS, 48e-6);
    let t = plan.frame_time();
    let exact = 253.0 * 48e-6;
    let rounded_up = (t * 1e4).ceil() / 10.0;
    let fps = plan.frame_rate();
    let ok = plan.len() == 253
        && (t - exact).abs() <= 1e-15
        && (t * 1e3 - 12.144).abs() < 1e-9
        && (rounded_up - 12.2).abs() < 1e-12
        && fps.round() == 82.0
        && (1e3 / 12.2f64).round() == 82.0;
    ensure(ok, format!("253 x 48 us = {:.3} ms (12.2 ms to 0.1 ms), {fps:.2} fps", t * 1e3))
}

fn fom_reproduction() -> Outcome {
    let checks = metrics::check_table(&metrics::comparison_table()).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    let mut seen = 0;
    for c in &checks {
        if let (Some(f), Some(d)) = (c.fom_db, c.fom_delta()) {
            seen += 1;
            ok &= d.abs() <= 0.05;
            parts.push(format!("{:.2} vs {}", f, c.entry.fom_db.unwrap()));
        }
    }
    ensure(ok && seen == 4, parts.join(", "))
}

fn enob_reproduction() -> Outcome {
    let checks = metrics::check_table(&metrics::comparison_table()).map_err(|e| e.to_string())?;
    let ok = checks.len() == 5 && checks.iter().all(|c| c.enob_delta().abs() <= 0.05);
    let parts: Vec<String> = checks.iter().map(|c| format!("{:.2} vs {}", c.enob, c.entry.enob)).collect();
    ensure(ok, parts.join(", "))
}

/// Crossing positions of `i_m * sin(2*pi*x/n0 + theta)` through `i_th`,
/// found by a dense scan refined by bisection. Returns (rising, falling)
/// in fine-position units on [0, n0).
fn brute_crossings(i_m: f64, theta: f64, i_th: f64, n0: u32) -> (f64, f64) {
    let f = |x: f64| i_m * (TAU * x / n0 as f64 + theta).sin() - i_th;
    let dense = 64 * n0 as usize;
    let step = n0 as f64 / dense as f64;
    let (mut rise, mut fall) = (None, None);
    for k in 0..dense {
        let (a, b) = (k as f64 * step, (k + 1) as f64 * step);
        let (fa, fb) = (f(a), f(b));
        if (fa <= 0.0) == (fb <= 0.0) {
            continue;
        }
        let (mut lo, mut hi) = (a, b);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) <= 0.0) == (fa <= 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if fa <= 0.0 {
            rise = Some(lo);
        } else {
            fall = Some(lo);
        }
    }
    (rise.expect("rising crossing"), fall.expect("falling crossing"))
}

fn demodulation_round_trip() -> Outcome {
    let spec = ReadoutSpec::default();
    let f = 125e3;
    let n0 = spec.n0(f).map_err(|e| e.to_string())?;
    let i_th = spec.threshold();
    let nf = n0 as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut none = ChaCha8Rng::seed_from_u64(0);
    let cases = 1000;
    let mut failures = Vec::new();
    let (mut worst_m, mut worst_p) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let i_m = i_th * rng.random_range(1.05..20.0);
        let theta = rng.random_range(-PI..PI);
        let bits = tdreadout::sample_bits(&spec, f, |p| i_m * (TAU * f * p.t() + theta).sin(), &mut none)
            .map_err(|e| e.to_string())?;
        let c = tdreadout::extract_counts(&bits, &spec).map_err(|e| e.to_string())?;
        let p = tdreadout::demodulate(&c, i_th).map_err(|e| e.to_string())?;

        let (rise, fall) = brute_crossings(i_m, theta, i_th, n0);
        let width = (fall - rise).rem_euclid(nf);
        let first = rise.floor() as i64 + 1;
        let count = (first..).take_while(|&k| (k as f64 - rise) < width).count() as u32;
        let d = c.duty();
        let m_err = (p.i_m / i_m - 1.0).abs();
        let m_bound = PI * (PI * d).tan() / nf + 2.0 / nf;
        let true_center = rise + width / 2.0;
        let phase_true = PI / 2.0 - TAU * true_center / nf;
        let p_err = tdreadout::wrap_phase(p.theta - theta).abs();
        let p_bound = TAU * 1.5 / nf;
        worst_m = worst_m.max(m_err / m_bound);
        worst_p = worst_p.max(p_err / p_bound);
        let ok = c.n1 == count
            && c.n2 == (first.rem_euclid(n0 as i64)) as u32
            && m_err <= m_bound
            && p_err <= p_bound
            && tdreadout::wrap_phase(phase_true - theta).abs() < 1e-9;
        if !ok {
            failures.push(case);
        }
    }
    ensure(
        failures.is_empty(),
        format!(
            "{cases} cases, n0={n0}, {} failures, worst magnitude {:.2} and phase {:.2} of bound",
            failures.len(),
            worst_m,
            worst_p
        ),
    )
}

fn accuracy_headline() -> Outcome {
    let chain = Chain::new(ChainConfig::default()).map_err(|e| e.to_string())?;
    let rows = metrics::error_sweep(&chain, &SweepSpec::default()).map_err(|e| e.to_string())?;
    let mean = metrics::headline_error(&rows).ok_or("every load excluded")?;
    let err = |pred: &dyn Fn(f64) -> bool| -> Vec<f64> {
        rows.iter().filter(|r| pred(r.load)).filter_map(|r| r.mean_rel_err).collect()
    };
    let high = err(&|r| r > 100e3);
    let mid = err(&|r| (1e3..=100e3).contains(&r));
    let high_min = high.iter().copied().fold(f64::INFINITY, f64::min);
    let mid_mean = mid.iter().sum::<f64>() / mid.len() as f64;
    let excluded = rows.iter().filter(|r| r.excluded()).count();
    ensure(
        mean <= 0.005 && !high.is_empty() && high_min >= mid_mean,
        format!(
            "mean {:.3}% over {} loads ({excluded} excluded), min above 100k {:.3}% vs mid-range mean {:.3}%",
            100.0 * mean,
            rows.len() - excluded,
            100.0 * high_min,
            100.0 * mid_mean
        ),
    )
}

fn snr_behaviour() -> Outcome {
    let chain = Chain::new(ChainConfig::noisy()).map_err(|e| e.to_string())?;
    let sweep = SweepSpec {
        repeats: 1000,
        ..SweepSpec::default()
    };
    let rows = metrics::error_sweep(&chain, &sweep).map_err(|e| e.to_string())?;
    let (best_load, best) = rows
        .iter()
        .filter_map(|r| Some((r.load, r.snr.filter(|f| !f.infinite)?.value)))
        .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let ends = SweepSpec {
        loads: vec![1e3, 500e3],
        repeats: 1000,
        seed: 2,
        ..SweepSpec::default()
    };
    let e = metrics::error_sweep(&chain, &ends).map_err(|e| e.to_string())?;
    let snr = |k: usize| e[k].snr.filter(|f| !f.infinite).map(|f| f.value);
    let (Some(s1k), Some(s500k)) = (snr(0), snr(1)) else {
        return Err("SNR undefined at 1k or 500k".into());
    };
    ensure(
        best >= 70.0 && s500k < s1k,
        format!(
            "best {best:.2} dB at {best_load:.0} ohm, 1k {s1k:.2} dB, 500k {s500k:.2} dB (1000 repeats)"
        ),
    )
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| log_uniform(rng, lo, hi)).collect()
}

fn sneak_path_oracle() -> Outcome {
    let f = 125e3;
    let r = 10e3;
    let g = SensorGrid::uniform(2, 2, r).and_then(|g| g.with_mux_r_on(0.0)).map_err(|e| e.to_string())?;
    let z = crossbar::equivalent_impedance(&g, 0, 0, TerminationPolicy::Floating, f).map_err(|e| e.to_string())?;
    let rel = (z.re / (0.75 * r) - 1.0).abs();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = random_grid(&mut rng, 4, 4, 100.0, 100e3);
        let g = SensorGrid::new(4, 4, vals.clone())
            .and_then(|g| g.with_mux_r_on(0.0))
            .map_err(|e| e.to_string())?;
        let m = crossbar::forward_resistances(&g, TerminationPolicy::Grounded, f).map_err(|e| e.to_string())?;
        for (a, b) in m.iter().zip(&vals) {
            worst = worst.max((a / b - 1.0).abs());
        }
    }
    ensure(
        rel <= 1e-9 && z.im.abs() <= 1e-9 * r && worst <= 1e-12,
        format!("2x2 floating {:.6} R (rel {rel:.1e}), grounded worst rel {worst:.1e} over 100 grids", z.re / r),
    )
}

fn reconstruction_round_trip() -> Outcome {
    let f = 125e3;
    let spec = ReconSpec {
        method: Method::GaussNewton,
        max_iters: 50,
        ..ReconSpec::default()
    };
    let mut passed = 0;
    let mut worst = 0.0f64;
    let mut noisy_errs = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let truth = random_grid(&mut rng, 4, 4, 100.0, 100e3);
        let g = SensorGrid::new(4, 4, truth.clone()).map_err(|e| e.to_string())?;
        let meas = crossbar::forward_resistances(&g, TerminationPolicy::Floating, f).map_err(|e| e.to_string())?;
        let rec = recon::reconstruct(&meas, &g, &spec, TerminationPolicy::Floating).map_err(|e| e.to_string())?;
        let e = rec.estimate.iter().zip(&truth).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
        worst = worst.max(e);
        if e <= 0.01 && rec.iters <= 50 {
            passed += 1;
        }
        let normal = rand_distr::Normal::new(0.0, 0.005).unwrap();
        let noisy: Vec<f64> = meas.iter().map(|m| m * (1.0 + rng.sample(normal))).collect();
        let rec = recon::reconstruct(&noisy, &g, &spec, TerminationPolicy::Floating).map_err(|e| e.to_string())?;
        noisy_errs.extend(rec.estimate.iter().zip(&truth).map(|(a, b)| (a / b - 1.0).abs()));
    }
    noisy_errs.sort_by(f64::total_cmp);
    let median = noisy_errs[noisy_errs.len() / 2];
    ensure(
        passed == 100 && median <= 0.02,
        format!(
            "noiseless {passed}/100 within 1% (worst {:.2e}), 0.5% noise median element error {:.3}%",
            worst,
            100.0 * median
        ),
    )
}

/// Replays the peak-detector output against the bias thresholds and counts
/// the crossings the event-driven loop must react to.
fn replay_crossings(spec: &DriverSpec, peaks: &[f64]) -> (u64, Vec<u32>) {
    let bias = |k: u32| spec.i_bias_q + k as f64 * spec.i_adp_step;
    let h = spec.hysteresis.unwrap_or(spec.i_adp_step / 2.0);
    let mut level = 0u32;
    let mut crossings = 0;
    let mut levels = Vec::with_capacity(peaks.len());
    for &p in peaks {
        if level < spec.max_adp_steps && p > bias(level) - spec.i_limit {
            level += 1;
            crossings += 1;
        } else if level > 0 && p < bias(level - 1) - spec.i_limit - h {
            level -= 1;
            crossings += 1;
        }
        levels.push(level);
    }
    (crossings, levels)
}

fn adaptive_bias_range() -> Outcome {
    let spec = DriverSpec::default();
    let on = frontend::linear_range(&spec, true, 0.01).map_err(|e| e.to_string())?;
    let off = frontend::linear_range(&spec, false, 0.01).map_err(|e| e.to_string())?;
    let ratio = on / off;
    let mut total = 0;
    let mut replay_ok = true;
    for amp in metrics::log_spaced(20e-6, 1.5e-3, 12) {
        let run = frontend::run_sine(&spec, amp).map_err(|e| e.to_string())?;
        let peaks: Vec<f64> = run.states.iter().map(|s| s.peak_est).collect();
        let (crossings, levels) = replay_crossings(&spec, &peaks);
        let events = run.states.last().map_or(0, |s| s.event_count);
        replay_ok &= events == crossings && run.states.iter().zip(&levels).all(|(s, l)| s.level == *l);
        total += events;
    }
    ensure(
        ratio >= 3.0 && replay_ok && total > 0,
        format!(
            "linear range {:.1} uA vs {:.1} uA, ratio {ratio:.3}; {total} bias events match the replayed crossings",
            on * 1e6,
            off * 1e6
        ),
    )
}

fn harmonic_power(exc: &Excitation) -> f64 {
    let w = exc.to_waveform(512);
    let f = exc.f_exc();
    (2..=5).map(|h| w.project(h as f64 * f).norm_sqr()).sum()
}

fn dem_benefit() -> Outcome {
    let spec = ExcitationSpec::default();
    let cutoff = 2.0 * spec.f_exc;
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..20u64 {
        let run = |dem: bool| -> Result<f64, String> {
            let dspec = CoPrimeDacSpec {
                unit_mismatch_sigma: 0.01,
                dem_enabled: dem,
                ..CoPrimeDacSpec::default()
            };
            let mut dac = CoPrimeDac::new(&dspec, seed).map_err(|e| e.to_string())?;
            let exc = Excitation::synthesize(&spec, &mut dac, cutoff, 6).map_err(|e| e.to_string())?;
            Ok(harmonic_power(&exc))
        };
        let (on, off) = (run(true)?, run(false)?);
        if on < off {
            wins += 1;
        }
        ratios.push(10.0 * (on / off).log10());
    }
    ratios.sort_by(f64::total_cmp);
    ensure(
        wins == 20,
        format!("DEM lower in {wins}/20 seeds, median change {:.1} dB", ratios[10]),
    )
}

fn n1_monotonicity() -> Outcome {
    let mut cfg = ChainConfig::default();
    cfg.ranging.enabled = false;
    let chain = Chain::new(cfg).map_err(|e| e.to_string())?;
    let z = Complex64::new(15e3, 0.0);
    let mut n1 = Vec::new();
    for code in 42..=64 {
        let s = Setting {
            amp_code: code,
            mirror_ratio: 1,
            offset_p: 0,
            offset_n: 40,
        };
        let m = chain.measure_with(s, z, 1).map_err(|e| e.to_string())?;
        n1.push(m.counts.filter(|_| m.flags.ok()).map(|c| c.n1).ok_or(format!("code {code} flagged"))?);
    }
    let ok = n1.windows(2).all(|w| w[1] > w[0]);
    ensure(
        ok,
        format!("codes 42..64: N1 {} -> {} over {} codes", n1[0], n1[n1.len() - 1], n1.len()),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Outcome {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("config/default.toml");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let commands: [&[&str]; 7] = [
        &["measure", "--load", "15000-40j"],
        &["sweep"],
        &["montecarlo"],
        &["frame"],
        &["recon"],
        &["thd"],
        &["table"],
    ];
    let mut files = 0;
    let mut mismatched = Vec::new();
    for cmd in commands {
        let mut dirs = Vec::new();
        for (run, jobs) in [(0, "1"), (1, "3")] {
            let out = tmp.path().join(format!("{}-{run}", cmd[0]));
            let mut args = vec!["tdzsim"];
            args.extend_from_slice(cmd);
            let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
            args.extend_from_slice(&["--config", c, "--seed", "7", "--jobs", jobs, "--out", o]);
            let (mut so, mut se) = (Vec::new(), Vec::new());
            let code = tdzsim::run(args, None, &mut so, &mut se);
            if code != 0 {
                return Err(format!("{} exited {code}: {}", cmd[0], String::from_utf8_lossy(&se)));
            }
            dirs.push(snapshot(&out));
        }
        files += dirs[0].len();
        if dirs[0] != dirs[1] {
            mismatched.push(cmd[0]);
        }
    }
    ensure(
        mismatched.is_empty(),
        format!(
            "7 subcommands, {files} files identical across runs with 1 and 3 workers{}",
            if mismatched.is_empty() { String::new() } else { format!("; differ: {}", mismatched.join(", ")) }
        ),
    )
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 12] = [
        (1, frame_arithmetic),
        (2, fom_reproduction),
        (3, enob_reproduction),
        (4, demodulation_round_trip),
        (5, accuracy_headline),
        (6, snr_behaviour),
        (7, sneak_path_oracle),
        (8, reconstruction_round_trip),
        (9, adaptive_bias_range),
        (10, dem_benefit),
        (11, n1_monotonicity),
        (12, determinism),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (n, f) in criteria {
        let t = Instant::now();
        let (verdict, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n}: {verdict} - {detail} [{:.2} s]", t.elapsed().as_secs_f64());
    }
    println!(
        "acceptance: {}/12 passed in {:.1} s",
        12 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
