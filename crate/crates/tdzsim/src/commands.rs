//! Subcommand bodies. Each writes its files into the context's output
//! directory and a short human-readable summary to `out`.

use std::io::Write;
use std::path::PathBuf;

use num_complex::Complex64;
use rayon::prelude::*;
use tdz_core::chain::{Chain, Measurement};
use tdz_core::crossbar::{pgm, scan_frame, Acquisition, FrameReport, LogSpan, ScanPlan, SensorGrid};
use tdz_core::frontend::{self, DriverSpec};
use tdz_core::metrics::{self, SweepRow, SweepSpec};
use tdz_core::recon::{self, reciprocal};
use tdz_core::tdreadout;

use crate::svg::{Plot, Series, Style};
use crate::{CliError, Context};

type Files = Result<Vec<PathBuf>, CliError>;

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

/// Parses `R`, `R+Xj` or `R-Xj`; `i` is accepted for `j`.
pub fn parse_load(s: &str) -> Result<Complex64, CliError> {
    let bad = || CliError::Config(format!("load `{s}` is not `R`, `R+Xj` or `R-Xj`"));
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let Some(body) = t.strip_suffix(['j', 'i']) else {
        let re: f64 = t.parse().map_err(|_| bad())?;
        return Ok(Complex64::new(re, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| matches!(bytes[k], b'+' | b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    match split {
        Some(k) => {
            let re: f64 = body[..k].parse().map_err(|_| bad())?;
            let im: f64 = match &body[k..] {
                "+" => 1.0,
                "-" => -1.0,
                v => v.parse().map_err(|_| bad())?,
            };
            Ok(Complex64::new(re, im))
        }
        None => {
            let im: f64 = body.parse().map_err(|_| bad())?;
            Ok(Complex64::new(0.0, im))
        }
    }
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or(String::new(), |x| format!("{x:.prec$}"))
}

fn chain(ctx: &Context, noisy: bool) -> Result<Chain, CliError> {
    Ok(Chain::new(ctx.cfg.chain_config(noisy)?)?)
}

pub fn measurement_csv(header: &str, z_load: Complex64, m: &Measurement) -> String {
    let mut s = format!("# {header}\n");
    s.push_str(
        "load_re,load_im,amp_code,mirror_ratio,offset_p,offset_n,n0,n1,n2,i_m,theta,z_re,z_im,r_parallel,attempts,adaptive_events,driver_current,flags\n",
    );
    let c = m.counts.as_ref();
    s.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6e},{}\n",
        z_load.re,
        z_load.im,
        m.setting.amp_code,
        m.setting.mirror_ratio,
        m.setting.offset_p,
        m.setting.offset_n,
        c.map_or(String::new(), |c| c.n0.to_string()),
        c.map_or(String::new(), |c| c.n1.to_string()),
        c.map_or(String::new(), |c| c.n2.to_string()),
        m.phasor.map_or(String::new(), |p| format!("{:.6e}", p.i_m)),
        m.phasor.map_or(String::new(), |p| format!("{:.6}", p.theta)),
        opt(m.z.map(|z| z.re), 4),
        opt(m.z.map(|z| z.im), 4),
        opt(m.resistance(), 4),
        m.attempts,
        m.adaptive_events,
        m.driver_current,
        m.flags.label()
    ));
    s
}

pub fn measure(ctx: &Context, load: &str, out: &mut dyn Write) -> Files {
    let z = parse_load(load)?;
    let ch = chain(ctx, ctx.cfg.noise.enabled)?;
    let m = if ctx.cfg.ranging.enabled {
        ch.measure(z, ctx.seed)?
    } else {
        ch.measure_with(ch.config().base_setting(), z, ctx.seed)?
    };
    say!(out, "load          {} {:+}j ohm", z.re, z.im);
    say!(
        out,
        "setting       amp_code={} mirror_ratio={} offset_p={} offset_n={} (threshold {:.1} uA)",
        m.setting.amp_code,
        m.setting.mirror_ratio,
        m.setting.offset_p,
        m.setting.offset_n,
        (m.setting.offset_n as f64 - m.setting.offset_p as f64) * ctx.cfg.readout.offset_lsb * 1e6
    );
    if let Some(c) = &m.counts {
        say!(out, "counts        N0={} N1={} N2={} duty={:.4}", c.n0, c.n1, c.n2, c.duty());
    }
    if let Some(p) = &m.phasor {
        say!(out, "phasor        I_m={:.4e} A theta={:.6} rad", p.i_m, p.theta);
    }
    match m.z {
        Some(zm) => {
            say!(out, "impedance     {:.3} {:+.3}j ohm", zm.re, zm.im);
            say!(out, "resistance    {:.3} ohm", tdreadout::parallel_resistance(zm));
        }
        None => {
            say!(out, "impedance     none");
        }
    }
    say!(out, "conversions   {}", m.attempts);
    say!(out, "flags         {}", m.flags.label());
    Ok(vec![ctx.write("measure.csv", &measurement_csv(&ctx.header(), z, &m))?])
}

fn error_plot(rows: &[SweepRow], title: &str) -> Plot {
    Plot {
        title: title.into(),
        x_label: "load (ohm)".into(),
        y_label: "|R/R_true - 1| (%)".into(),
        log_x: true,
        log_y: true,
        series: vec![Series {
            name: "relative error".into(),
            points: rows
                .iter()
                .filter_map(|r| Some((r.load, 100.0 * r.mean_rel_err?)))
                .collect(),
            style: Style::Line,
        }],
    }
}

pub fn sweep(ctx: &Context, out: &mut dyn Write) -> Files {
    let s = &ctx.cfg.sweep;
    let ch = chain(ctx, !s.noiseless && ctx.cfg.noise.enabled)?;
    let spec = SweepSpec {
        loads: ctx.cfg.sweep_loads()?,
        c_fixture: s.c_fixture,
        repeats: 1,
        seed: ctx.seed,
    };
    let rows = metrics::error_sweep(&ch, &spec)?;
    for r in &rows {
        say!(
            out,
            "{:>12.2} ohm  err {:>8}  setting {:>2}/{:>2}/{:>2}/{:>2}  {}",
            r.load,
            r.mean_rel_err.map_or("-".to_string(), |e| format!("{:.3}%", 100.0 * e)),
            r.setting.amp_code,
            r.setting.mirror_ratio,
            r.setting.offset_p,
            r.setting.offset_n,
            r.flags.label()
        );
    }
    match metrics::headline_error(&rows) {
        Some(h) => {
            say!(out, "mean relative error {:.4}%", 100.0 * h);
        }
        None => {
            say!(out, "mean relative error: every load excluded");
        }
    }
    let header = ctx.header();
    Ok(vec![
        ctx.write("sweep.csv", &metrics::sweep_csv(&rows, &[header.clone()]))?,
        ctx.write("sweep.svg", &error_plot(&rows, "Resistance error").render(&header))?,
    ])
}

pub fn montecarlo(ctx: &Context, out: &mut dyn Write) -> Files {
    let m = &ctx.cfg.montecarlo;
    let ch = chain(ctx, true)?;
    let spec = SweepSpec {
        loads: ctx.cfg.montecarlo_loads()?,
        c_fixture: m.c_fixture,
        repeats: m.repeats,
        seed: ctx.seed,
    };
    let rows = metrics::error_sweep(&ch, &spec)?;
    let header = ctx.header();
    let mut csv = format!("# {header}\n# repeats={}\n", m.repeats);
    csv.push_str("load_ohm,r_mean_ohm,mean_rel_err,snr_db,enob,accepted,amp_code,mirror_ratio,offset_p,offset_n,flags\n");
    let mut best: Option<(f64, f64)> = None;
    for r in &rows {
        let snr = r.snr.filter(|f| !f.infinite).map(|f| f.value);
        if let Some(v) = snr {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((r.load, v));
            }
        }
        let snr_s = match r.snr {
            Some(f) if f.infinite => "inf".to_string(),
            _ => opt(snr, 4),
        };
        csv.push_str(&format!(
            "{:.4},{},{},{},{},{},{},{},{},{},{}\n",
            r.load,
            opt(r.r_mean, 4),
            r.mean_rel_err.map_or(String::new(), |v| format!("{v:.6e}")),
            snr_s,
            opt(snr.map(metrics::enob_from_snr), 4),
            r.accepted,
            r.setting.amp_code,
            r.setting.mirror_ratio,
            r.setting.offset_p,
            r.setting.offset_n,
            r.flags.label()
        ));
        say!(
            out,
            "{:>12.2} ohm  SNR {:>8} dB  ENOB {:>6}  accepted {}",
            r.load,
            opt(snr, 2),
            opt(snr.map(metrics::enob_from_snr), 2),
            r.accepted
        );
    }
    if let Some((load, v)) = best {
        say!(out, "best SNR {v:.2} dB at {load:.1} ohm");
    }
    let plot = Plot {
        title: "SNR against load".into(),
        x_label: "load (ohm)".into(),
        y_label: "SNR (dB)".into(),
        log_x: true,
        log_y: false,
        series: vec![Series {
            name: format!("{} repeats", m.repeats),
            points: rows
                .iter()
                .filter_map(|r| Some((r.load, r.snr.filter(|f| !f.infinite)?.value)))
                .collect(),
            style: Style::Line,
        }],
    };
    Ok(vec![
        ctx.write("montecarlo.csv", &csv)?,
        ctx.write("montecarlo.svg", &plot.render(&header))?,
    ])
}

fn read_input(path: &std::path::Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Config(format!("missing {what} file {}", path.display())),
        _ => CliError::Io(format!("{}: {e}", path.display())),
    })
}

pub fn load_grid(ctx: &Context) -> Result<SensorGrid, CliError> {
    let g = &ctx.cfg.grid;
    if g.path.is_empty() {
        return Err(CliError::Config("missing grid file: set [grid] path".into()));
    }
    let text = read_input(&ctx.resolve(&g.path), "grid")?;
    let cap = if g.capacitance_path.is_empty() {
        None
    } else {
        Some(read_input(&ctx.resolve(&g.capacitance_path), "capacitance")?)
    };
    Ok(SensorGrid::from_csv(&text, cap.as_deref())?
        .with_mux_r_on(g.mux_r_on)?
        .with_line_cap(g.line_cap)?)
}

fn scan(ctx: &Context, g: &SensorGrid) -> Result<FrameReport, CliError> {
    let plan = ScanPlan::row_major(g.rows(), g.cols(), ctx.cfg.grid.t_meas);
    let f = ctx.cfg.excitation.f_exc;
    let pol = ctx.cfg.policy()?;
    let report = match ctx.cfg.grid.acquisition.as_str() {
        "ideal" => scan_frame(g, &plan, pol, f, Acquisition::Ideal)?,
        _ => {
            let ch = chain(ctx, ctx.cfg.noise.enabled)?;
            scan_frame(g, &plan, pol, f, Acquisition::FullChain { chain: &ch, seed: ctx.seed })?
        }
    };
    Ok(report)
}

fn span(ctx: &Context) -> Result<LogSpan, CliError> {
    let (lo, hi) = (ctx.cfg.grid.map_lo, ctx.cfg.grid.map_hi);
    if !(lo > 0.0 && hi > lo) {
        return Err(CliError::Config("[grid] needs 0 < map_lo < map_hi".into()));
    }
    Ok(LogSpan { lo, hi })
}

fn frame_summary(out: &mut dyn Write, g: &SensorGrid, report: &FrameReport) {
    let t = report.frame_time();
    say!(out, "grid          {}x{} ({} sensors), policy {}", g.rows(), g.cols(), g.len(), report.policy);
    say!(out, "frame time    {:.3} ms ({:.1} fps)", t * 1e3, 1.0 / t);
    say!(out, "elapsed       {:.3} ms including range retries", report.elapsed() * 1e3);
    say!(out, "flagged       {}", report.flagged());
}

pub fn frame(ctx: &Context, out: &mut dyn Write) -> Files {
    let g = load_grid(ctx)?;
    let sp = span(ctx)?;
    let report = scan(ctx, &g)?;
    frame_summary(out, &g, &report);
    let header = vec![ctx.header()];
    Ok(vec![
        ctx.write("frame.csv", &report.to_csv(&g, &header, &[]))?,
        ctx.write("frame.pgm", &pgm(g.rows(), g.cols(), &report.measured(), sp, &header))?,
    ])
}

/// ASCII PGM of values already scaled to 0..=1.
pub fn linear_pgm(rows: usize, cols: usize, values: &[f64], comments: &[String]) -> String {
    let mut s = String::from("P2\n");
    for c in comments {
        s.push_str(&format!("# {c}\n"));
    }
    s.push_str("# value = round(255 * p), p clamped to 0..1\n");
    s.push_str(&format!("{cols} {rows}\n255\n"));
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|p| ((255.0 * p.clamp(0.0, 1.0)).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn recon(ctx: &Context, out: &mut dyn Write) -> Files {
    let g = load_grid(ctx)?;
    let sp = span(ctx)?;
    let spec = ctx.cfg.recon_spec()?;
    let report = scan(ctx, &g)?;
    frame_summary(out, &g, &report);

    // flagged channels enter at the rail they were flagged against
    let mut meas = vec![0.0; g.len()];
    for rd in &report.readings {
        let k = rd.row * g.cols() + rd.col;
        meas[k] = match rd.r_meas() {
            Some(r) if rd.flags.ok() => r.clamp(spec.r_min, spec.r_max),
            _ if rd.flags.short_circuit => spec.r_min,
            _ => spec.r_max,
        };
    }
    let rec = recon::reconstruct(&meas, &g, &spec, report.policy)?;
    let rel: Vec<f64> = rec
        .estimate
        .iter()
        .zip(g.resistances())
        .map(|(e, t)| e / t - 1.0)
        .collect();
    let max_err = rel.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let mut sorted: Vec<f64> = rel.iter().map(|e| e.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    say!(
        out,
        "recon         {} in {} iterations, residual {:.3e}{}{}",
        spec.method,
        rec.iters,
        rec.residual,
        if rec.converged { "" } else { ", not converged" },
        if rec.fell_back { ", fell back to fixed_point" } else { "" }
    );
    say!(out, "element error max {:.3}% median {:.3}%", 100.0 * max_err, 100.0 * median);

    let pressure = recon::pressure_map(&rec.estimate, reciprocal(ctx.cfg.recon.pressure_r_ref));
    let header = vec![
        ctx.header(),
        format!(
            "method={} iters={} residual={:e} converged={} fell_back={}",
            spec.method, rec.iters, rec.residual, rec.converged, rec.fell_back
        ),
    ];
    let extra = [
        ("r_est", rec.estimate.iter().map(|v| Some(*v)).collect()),
        ("rel_err", rel.iter().map(|v| Some(*v)).collect()),
    ];
    let est: Vec<Option<f64>> = rec.estimate.iter().map(|v| Some(*v)).collect();
    Ok(vec![
        ctx.write("recon.csv", &report.to_csv(&g, &header, &extra))?,
        ctx.write("recon.pgm", &pgm(g.rows(), g.cols(), &est, sp, &header))?,
        ctx.write("pressure.pgm", &linear_pgm(g.rows(), g.cols(), &pressure, &header))?,
    ])
}

pub fn thd(ctx: &Context, out: &mut dyn Write) -> Files {
    let t = &ctx.cfg.thd;
    let driver: DriverSpec = ctx.cfg.chain_config(false)?.driver;
    if !(t.lo > 0.0 && t.hi >= t.lo && t.count >= 1) {
        return Err(CliError::Config("[thd] needs 0 < lo <= hi and count >= 1".into()));
    }
    let amps = metrics::log_spaced(t.lo, t.hi, t.count);
    let on = driver.clone().with_adaptive(true);
    let off = driver.clone().with_adaptive(false);
    let thds: Vec<(f64, f64)> = amps
        .par_iter()
        .map(|&a| Ok((frontend::load_thd(&on, a)?, frontend::load_thd(&off, a)?)))
        .collect::<tdz_core::Result<_>>()?;
    let (lin_on, lin_off) = rayon::join(
        || frontend::linear_range(&driver, true, t.limit),
        || frontend::linear_range(&driver, false, t.limit),
    );
    let (lin_on, lin_off) = (lin_on?, lin_off?);
    say!(out, "linear range at THD {:.2}%:", 100.0 * t.limit);
    say!(out, "  adaptive bias on   {:.2} uA", lin_on * 1e6);
    say!(out, "  adaptive bias off  {:.2} uA", lin_off * 1e6);
    say!(out, "  ratio              {:.3}", lin_on / lin_off);

    let header = ctx.header();
    let mut csv = format!(
        "# {header}\n# thd_limit={} linear_range_adaptive={:e} linear_range_fixed={:e} ratio={:.6}\n",
        t.limit,
        lin_on,
        lin_off,
        lin_on / lin_off
    );
    csv.push_str("amplitude_a,thd_adaptive,thd_fixed\n");
    for (a, (x, y)) in amps.iter().zip(&thds) {
        csv.push_str(&format!("{a:.6e},{x:.6e},{y:.6e}\n"));
    }
    let series = |name: &str, pick: fn(&(f64, f64)) -> f64| Series {
        name: name.into(),
        points: amps.iter().zip(&thds).map(|(a, v)| (*a, 100.0 * pick(v))).collect(),
        style: Style::Line,
    };
    let plot = Plot {
        title: "Load-current THD".into(),
        x_label: "peak load current (A)".into(),
        y_label: "THD (%)".into(),
        log_x: true,
        log_y: true,
        series: vec![series("adaptive bias", |v| v.0), series("fixed bias", |v| v.1)],
    };
    Ok(vec![ctx.write("thd.csv", &csv)?, ctx.write("thd.svg", &plot.render(&header))?])
}

pub fn table(ctx: &Context, out: &mut dyn Write) -> Files {
    let checks = metrics::check_table(&metrics::comparison_table())?;
    for c in &checks {
        say!(
            out,
            "{:<16} ENOB {:>6.2} (table {:>5})  FoM {:>7} (table {:>5})",
            c.entry.work,
            c.enob,
            c.entry.enob,
            opt(c.fom_db, 2),
            c.entry.fom_db.map_or("N/A".to_string(), |v| v.to_string())
        );
    }
    let cfg = ctx.cfg.chain_config(false)?;
    let n = ctx.cfg.table.sensors;
    let frame_time = n as f64 * ctx.cfg.grid.t_meas;
    let b = metrics::budget(&metrics::default_power_components(&cfg.driver, &cfg.readout), n, frame_time)?;
    let header = ctx.header();
    let mut csv = format!("# {header}\n# sensors={n} frame_time={frame_time:e} fps={:.4}\n", b.fps);
    csv.push_str("component,power_w,share\n");
    for ((name, p), (_, share)) in b.components.iter().zip(&b.shares) {
        csv.push_str(&format!("{name},{p:.6e},{share:.6}\n"));
        say!(out, "{name:<22} {:>8.2} uW ({:.1}%)", p * 1e6, 100.0 * share);
    }
    csv.push_str(&format!("total,{:.6e},1.000000\n", b.total));
    csv.push_str(&format!("per_sensor,{:.6e},\n", b.per_sensor));
    csv.push_str(&format!("energy_per_sensor_j,{:.6e},\n", b.energy_per_sensor));
    say!(out, "total                  {:>8.2} uW", b.total * 1e6);
    say!(
        out,
        "per sensor {:.3} uW, {:.3} nJ per sensor per frame, {:.1} fps",
        b.per_sensor * 1e6,
        b.energy_per_sensor * 1e9,
        b.fps
    );
    let published = checks.iter().find_map(|c| {
        let t = c.entry.frame_time_ms?;
        (c.entry.work == "This work").then_some(t * 1e-3)
    });
    if let Some(t) = published {
        let e = b.total * t / n as f64;
        csv.push_str(&format!("energy_per_sensor_j_at_{:.1}ms,{e:.6e},\n", t * 1e3));
        say!(out, "at the tabulated {:.1} ms frame: {:.3} nJ per sensor", t * 1e3, e * 1e9);
    }
    Ok(vec![
        ctx.write("table.csv", &metrics::table_csv(&checks, &[header.clone()]))?,
        ctx.write("budget.csv", &csv)?,
    ])
}
