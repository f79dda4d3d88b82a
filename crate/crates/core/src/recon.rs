//! Crosstalk compensation: recovers element resistances from a frame of
//! sneak-path-contaminated readings by inverting the crossbar forward model.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::crossbar::{forward_resistances, lu, SensorGrid, TerminationPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    FixedPoint,
    GaussNewton,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FixedPoint => "fixed_point",
            Self::GaussNewton => "gauss_newton",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_point" => Ok(Self::FixedPoint),
            "gauss_newton" => Ok(Self::GaussNewton),
            other => Err(Error::Config(format!("unknown reconstruction method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconSpec {
    pub method: Method,
    pub max_iters: usize,
    /// Stop once no element moves by more than this fraction.
    pub tol: f64,
    /// Initial Levenberg damping.
    pub damping: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Frequency at which the forward model is evaluated.
    pub f: f64,
}

impl Default for ReconSpec {
    fn default() -> Self {
        Self {
            method: Method::FixedPoint,
            max_iters: 50,
            tol: 1e-4,
            damping: 1e-3,
            r_min: 20.0,
            r_max: 500e3,
            f: 125e3,
        }
    }
}

impl ReconSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(crate::error::domain("tol", self.tol));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(Error::Config(format!(
                "reconstruction bounds need 0 < r_min < r_max, got ({}, {})",
                self.r_min, self.r_max
            )));
        }
        if !(self.damping >= 0.0) {
            return Err(crate::error::domain("damping", self.damping));
        }
        if self.max_iters == 0 {
            return Err(crate::error::domain("max_iters", 0));
        }
        Ok(())
    }

    fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.r_min, self.r_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub estimate: Vec<f64>,
    pub iters: usize,
    /// Final max |F(estimate)/meas - 1|.
    pub residual: f64,
    pub converged: bool,
    /// Gauss-Newton hit a singular system and fell back to the fixed point.
    pub fell_back: bool,
}

/// Finite-difference step in log-conductance.
const FD_STEP: f64 = 1e-3;

struct Problem<'a> {
    template: &'a SensorGrid,
    meas: &'a [f64],
    pol: TerminationPolicy,
    spec: &'a ReconSpec,
}

impl Problem<'_> {
    fn forward(&self, r: &[f64]) -> Result<Vec<f64>> {
        forward_resistances(&self.template.with_resistances(r.to_vec())?, self.pol, self.spec.f)
    }

    fn residual(&self, fwd: &[f64]) -> f64 {
        fwd.iter().zip(self.meas).map(|(f, m)| (f / m - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Inverts the forward model for a row-major frame `meas` taken on an array
/// shaped and terminated like `template`.
pub fn reconstruct(meas: &[f64], template: &SensorGrid, spec: &ReconSpec, pol: TerminationPolicy) -> Result<Reconstruction> {
    spec.validate()?;
    if meas.len() != template.len() {
        return Err(Error::Config(format!(
            "frame has {} readings, grid has {} sensors",
            meas.len(),
            template.len()
        )));
    }
    if let Some(v) = meas.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Config(format!("readings must be positive and finite, got {v}")));
    }
    let p = Problem {
        template,
        meas,
        pol,
        spec,
    };
    match spec.method {
        Method::FixedPoint => fixed_point(&p),
        Method::GaussNewton => match gauss_newton(&p) {
            Err(Error::Singular { .. }) => fixed_point(&p).map(|r| Reconstruction { fell_back: true, ..r }),
            other => other,
        },
    }
}

fn fixed_point(p: &Problem<'_>) -> Result<Reconstruction> {
    let spec = p.spec;
    let mut r: Vec<f64> = p.meas.iter().map(|&m| spec.clamp(m)).collect();
    let mut fwd = p.forward(&r)?;
    let mut res = p.residual(&fwd);
    let mut iters = 0;
    let mut converged = false;
    while iters < spec.max_iters {
        iters += 1;
        // damped multiplicative step; halve the exponent until the residual
        // does not grow
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let cand: Vec<f64> = r
                .iter()
                .zip(p.meas.iter().zip(&fwd))
                .map(|(&ri, (&m, &f))| spec.clamp(ri * (m / f).powf(alpha)))
                .collect();
            let cf = p.forward(&cand)?;
            let cres = p.residual(&cf);
            if cres <= res {
                accepted = Some((cand, cf, cres));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, cf, cres)) = accepted else {
            break;
        };
        let update = cand.iter().zip(&r).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
        r = cand;
        fwd = cf;
        res = cres;
        if update < spec.tol {
            converged = true;
            break;
        }
    }
    Ok(Reconstruction {
        estimate: r,
        iters,
        residual: res,
        converged,
        fell_back: false,
    })
}

fn log_residuals(p: &Problem<'_>, fwd: &[f64]) -> Vec<f64> {
    fwd.iter().zip(p.meas).map(|(f, m)| (f / m).ln()).collect()
}

fn to_r(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| (-v).exp()).collect()
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn gauss_newton(p: &Problem<'_>) -> Result<Reconstruction> {
    let spec = p.spec;
    let n = p.meas.len();
    let x_lo = -spec.r_max.ln();
    let x_hi = -spec.r_min.ln();
    let mut x: Vec<f64> = p.meas.iter().map(|&m| -spec.clamp(m).ln()).collect();
    let mut fwd = p.forward(&to_r(&x))?;
    let mut res = log_residuals(p, &fwd);
    let mut cost = sum_sq(&res);
    let mut lambda = spec.damping;
    let mut iters = 0;
    let mut converged = false;
    while iters < spec.max_iters {
        iters += 1;
        let jac = jacobian(p, &x, &res)?;
        let mut jtj = vec![0.0; n * n];
        let mut jtr = vec![0.0; n];
        for a in 0..n {
            for b in a..n {
                let s: f64 = (0..n).map(|i| jac[a][i] * jac[b][i]).sum();
                jtj[a * n + b] = s;
                jtj[b * n + a] = s;
            }
            jtr[a] = (0..n).map(|i| jac[a][i] * res[i]).sum();
        }
        let mut accepted = None;
        for _ in 0..16 {
            let mut m: Vec<Complex64> = jtj.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            for k in 0..n {
                m[k * n + k] += Complex64::new(lambda * jtj[k * n + k].max(1e-12), 0.0);
            }
            let lu = lu::factor(m, n).map_err(|k| Error::Singular {
                line: format!("element {k}"),
            })?;
            let rhs: Vec<Complex64> = jtr.iter().map(|&v| Complex64::new(-v, 0.0)).collect();
            let step = lu.solve(&rhs);
            let cand: Vec<f64> = x.iter().zip(&step).map(|(xi, d)| (xi + d.re).clamp(x_lo, x_hi)).collect();
            let cf = p.forward(&to_r(&cand))?;
            let cr = log_residuals(p, &cf);
            let cc = sum_sq(&cr);
            if cc <= cost {
                accepted = Some((cand, cf, cr, cc));
                lambda = (lambda / 3.0).max(1e-12);
                break;
            }
            lambda *= 4.0;
        }
        let Some((cand, cf, cr, cc)) = accepted else {
            converged = cost.sqrt() < spec.tol;
            break;
        };
        let update = cand.iter().zip(&x).map(|(a, b)| ((b - a).exp() - 1.0).abs()).fold(0.0, f64::max);
        x = cand;
        fwd = cf;
        res = cr;
        cost = cc;
        if update < spec.tol {
            converged = true;
            break;
        }
    }
    Ok(Reconstruction {
        estimate: to_r(&x),
        iters,
        residual: p.residual(&fwd),
        converged,
        fell_back: false,
    })
}

/// Forward-difference Jacobian of the log residuals; `jac[k]` is the column
/// for unknown `k`.
fn jacobian(p: &Problem<'_>, x: &[f64], res: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..x.len())
        .into_par_iter()
        .map(|k| {
            let mut xk = x.to_vec();
            xk[k] += FD_STEP;
            let fk = p.forward(&to_r(&xk))?;
            Ok(log_residuals(p, &fk).iter().zip(res).map(|(a, b)| (a - b) / FD_STEP).collect())
        })
        .collect()
}

/// Applies a transfer that decreases with resistance and scales the result
/// so its maximum is 1. An all-zero map stays zero.
pub fn pressure_map(estimate: &[f64], transfer: impl Fn(f64) -> f64) -> Vec<f64> {
    let p: Vec<f64> = estimate.iter().map(|&r| transfer(r).max(0.0)).collect();
    let max = p.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        p.iter().map(|v| v / max).collect()
    } else {
        p
    }
}

/// `r_ref / R`, the simplest piezo-resistive transfer.
pub fn reciprocal(r_ref: f64) -> impl Fn(f64) -> f64 {
    move |r| r_ref / r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rows: usize, cols: usize, seed: u64) -> SensorGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (0..rows * cols).map(|_| 10f64.powf(rng.random_range(2.0..5.0))).collect();
        SensorGrid::new(rows, cols, r).unwrap()
    }

    fn gn() -> ReconSpec {
        ReconSpec {
            method: Method::GaussNewton,
            tol: 1e-6,
            ..ReconSpec::default()
        }
    }

    fn max_err(est: &[f64], truth: &[f64]) -> f64 {
        est.iter().zip(truth).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn grounded_is_identity_in_one_iteration() {
        let g = random_grid(3, 4, 1);
        let meas = g.resistances().to_vec();
        let rec = reconstruct(&meas, &g, &ReconSpec::default(), TerminationPolicy::Grounded).unwrap();
        assert_eq!(rec.iters, 1);
        assert!(rec.converged);
        assert!(max_err(&rec.estimate, &meas) < 1e-12);
    }

    #[test]
    fn uniform_two_by_two_inverts_three_quarters() {
        let g = SensorGrid::uniform(2, 2, 1.0).unwrap();
        let meas = vec![7500.0; 4];
        for method in [Method::FixedPoint, Method::GaussNewton] {
            let spec = ReconSpec { method, ..ReconSpec::default() };
            let rec = reconstruct(&meas, &g, &spec, TerminationPolicy::Floating).unwrap();
            assert!(rec.converged, "{method}");
            assert!(max_err(&rec.estimate, &[10e3; 4]) < 1e-3, "{method} {:?}", rec.estimate);
        }
    }

    #[test]
    fn fixed_point_residual_never_grows() {
        let g = random_grid(4, 4, 9);
        let meas = forward_resistances(&g, TerminationPolicy::Floating, 125e3).unwrap();
        let p = Problem {
            template: &g,
            meas: &meas,
            pol: TerminationPolicy::Floating,
            spec: &ReconSpec::default(),
        };
        let mut prev = f64::INFINITY;
        for iters in 1..15 {
            let spec = ReconSpec { max_iters: iters, ..ReconSpec::default() };
            let rec = fixed_point(&Problem { spec: &spec, ..p }).unwrap();
            assert!(rec.residual <= prev);
            prev = rec.residual;
        }
    }

    #[test]
    fn gauss_newton_recovers_random_grids() {
        for seed in 0..10 {
            let g = random_grid(4, 4, seed);
            let meas = forward_resistances(&g, TerminationPolicy::Floating, 125e3).unwrap();
            let rec = reconstruct(&meas, &g, &gn(), TerminationPolicy::Floating).unwrap();
            assert!(max_err(&rec.estimate, g.resistances()) < 0.01, "seed {seed}: {rec:?}");
        }
    }

    #[test]
    fn rejects_bad_frames() {
        let g = SensorGrid::uniform(2, 2, 1e3).unwrap();
        let spec = ReconSpec::default();
        assert!(reconstruct(&[1.0; 3], &g, &spec, TerminationPolicy::Floating).is_err());
        assert!(reconstruct(&[1.0, 1.0, 0.0, 1.0], &g, &spec, TerminationPolicy::Floating).is_err());
        let bad = ReconSpec { r_min: 10.0, r_max: 5.0, ..ReconSpec::default() };
        assert!(reconstruct(&[1.0; 4], &g, &bad, TerminationPolicy::Floating).is_err());
    }

    #[test]
    fn uniform_pressure_is_flat() {
        let p = pressure_map(&[5e3; 6], reciprocal(1e3));
        assert!(p.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hotspot_normalises_to_one() {
        let mut r = vec![500e3; 9];
        r[4] = 20.0;
        let p = pressure_map(&r, reciprocal(20.0));
        assert_eq!(p[4], 1.0);
        assert!(p.iter().enumerate().all(|(k, &v)| k == 4 || v < 1e-3));
    }

    #[test]
    fn forefoot_mask_is_recovered() {
        // loaded region in the first three rows of an 11 x 23 insole
        let (rows, cols) = (11, 23);
        let mask: Vec<bool> = (0..rows * cols).map(|k| k / cols < 3 && (4..19).contains(&(k % cols))).collect();
        let r: Vec<f64> = mask.iter().map(|&m| if m { 300.0 } else { 200e3 }).collect();
        let p = pressure_map(&r, reciprocal(300.0));
        let got: Vec<bool> = p.iter().map(|&v| v >= 0.5).collect();
        assert_eq!(got, mask);
    }

    fn permuted(v: &[f64], rows: usize, cols: usize, pr: &[usize], pc: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[pr[r] * cols + pc[c]] = v[r * cols + c];
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn round_trip_up_to_eight_by_eight(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
            let g = random_grid(rows, cols, seed);
            let meas = forward_resistances(&g, TerminationPolicy::Floating, 125e3).unwrap();
            let rec = reconstruct(&meas, &g, &gn(), TerminationPolicy::Floating).unwrap();
            prop_assert!(max_err(&rec.estimate, g.resistances()) < 0.01);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>()) {
            let (rows, cols) = (3, 4);
            let g = random_grid(rows, cols, seed);
            let meas = forward_resistances(&g, TerminationPolicy::Floating, 125e3).unwrap();
            let pr = [2, 0, 1];
            let pc = [3, 1, 0, 2];
            let spec = ReconSpec::default();
            let a = reconstruct(&meas, &g, &spec, TerminationPolicy::Floating).unwrap();
            let pm = permuted(&meas, rows, cols, &pr, &pc);
            let b = reconstruct(&pm, &g, &spec, TerminationPolicy::Floating).unwrap();
            let pa = permuted(&a.estimate, rows, cols, &pr, &pc);
            for (x, y) in pa.iter().zip(&b.estimate) {
                prop_assert!((x / y - 1.0).abs() < 1e-9);
            }
        }
    }
}
