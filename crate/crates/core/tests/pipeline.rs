use tdz_core::chain::{Chain, ChainConfig};
use tdz_core::crossbar::{pgm, scan_frame, Acquisition, LogSpan, ScanPlan, SensorGrid, TerminationPolicy};
use tdz_core::recon::{reconstruct, Method, ReconSpec};

const F: f64 = 125e3;

fn grid() -> SensorGrid {
    let text = "# rows=3 cols=4 unit=ohm\n\
                200000,150000,90000,200000\n\
                120000,3000,8000,160000\n\
                200000,60000,25000,180000\n";
    SensorGrid::from_csv(text, None).unwrap()
}

#[test]
fn grounded_scan_reads_elements_through_chain() {
    let g = grid();
    let chain = Chain::new(ChainConfig::default()).unwrap();
    let plan = ScanPlan::for_grid(&g);
    let rep = scan_frame(&g, &plan, TerminationPolicy::Grounded, F, Acquisition::FullChain { chain: &chain, seed: 3 })
        .unwrap();
    assert_eq!(rep.flagged(), 0);
    for (m, r) in rep.measured().iter().zip(g.resistances()) {
        // grounded isolation leaves only the two mux switches in series
        let err = m.unwrap() / (r + 2.0 * g.mux_r_on) - 1.0;
        assert!(err.abs() < 0.01, "{m:?} vs {r}");
    }
    let map = pgm(g.rows(), g.cols(), &rep.measured(), LogSpan::default(), &[]);
    assert_eq!(map.lines().filter(|l| !l.starts_with('#')).count(), 3 + g.rows());
}

#[test]
fn floating_scan_then_reconstruction() {
    let g = grid();
    let chain = Chain::new(ChainConfig::default()).unwrap();
    let plan = ScanPlan::for_grid(&g);
    let rep = scan_frame(&g, &plan, TerminationPolicy::Floating, F, Acquisition::FullChain { chain: &chain, seed: 5 })
        .unwrap();
    let meas: Vec<f64> = rep.measured().into_iter().map(Option::unwrap).collect();
    // sneak paths pull every apparent resistance below its element
    assert!(meas.iter().zip(g.resistances()).all(|(m, r)| *m < *r));
    let spec = ReconSpec {
        method: Method::GaussNewton,
        ..ReconSpec::default()
    };
    let rec = reconstruct(&meas, &g, &spec, TerminationPolicy::Floating).unwrap();
    assert!(rec.converged);
    let worst = rec
        .estimate
        .iter()
        .zip(g.resistances())
        .map(|(e, r)| (e / r - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "{worst}");
}
