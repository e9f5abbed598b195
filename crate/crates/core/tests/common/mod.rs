#![allow(dead_code)]

use std::io::Write;
use std::sync::Mutex;

use distcrb::config::{ConfigDocument, DEFAULT_CONFIG};
use distcrb::geometry::{StationLayout, TargetState};
use distcrb::montecarlo::ExperimentPlan;
use distcrb::signal_model::{Decay, NoiseCorrelation, ReflectionCorrelation, Scenario};
use distcrb::waveform::GmskParams;
use nalgebra::Point2;
use rand::Rng;

/// Serialises the heavy criteria so their wall-clock budgets are meaningful.
pub static HEAVY: Mutex<()> = Mutex::new(());

/// Writes straight to the process stderr so the line survives output capture.
pub fn report(criterion: &str, passed: bool, detail: &str) {
    let line = format!("[acceptance] criterion {criterion}: {} - {detail}\n", if passed { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

pub fn reference_doc() -> ConfigDocument {
    ConfigDocument::parse(DEFAULT_CONFIG).unwrap()
}

pub fn reference_plan(trials: usize, bit_draws: usize) -> ExperimentPlan<f64> {
    let mut doc = reference_doc();
    doc.experiment.trials = trials;
    doc.experiment.bit_draws = bit_draws;
    doc.plan().unwrap()
}

fn random_point<R: Rng>(rng: &mut R) -> Point2<f64> {
    Point2::new(rng.random_range(0.0..30_000.0), rng.random_range(0.0..20_000.0))
}

/// Random stations in a 30 x 20 km area and a target at least 500 m from
/// every station.
pub fn random_scenario<R: Rng>(rng: &mut R, max_tx: usize, max_rx: usize, num_bits: usize) -> Scenario<f64> {
    let m = rng.random_range(1..=max_tx);
    let n = rng.random_range(1..=max_rx);
    let tx: Vec<_> = (0..m).map(|_| random_point(rng)).collect();
    let rx: Vec<_> = (0..n).map(|_| random_point(rng)).collect();
    let target = loop {
        let p = random_point(rng);
        if tx.iter().chain(&rx).all(|s| (s - p).norm() > 500.0) {
            break p;
        }
    };
    let layout = StationLayout::new(tx, rx).unwrap();
    let mut gmsk = GmskParams::gsm(if rng.random_bool(0.5) { 300.0 } else { 3000.0 });
    gmsk.num_bits = num_bits;
    let reflection = [Decay::Independent, Decay::Rate(1.0), Decay::Rate(0.1)][rng.random_range(0..3)];
    let noise = [Decay::Independent, Decay::Rate(1e-4), Decay::Rate(2e-5)][rng.random_range(0..3)];
    Scenario {
        reflection: ReflectionCorrelation::uniform(reflection, rng.random_range(0.5..2.0), m * n),
        layout,
        truth: TargetState::new(
            target.x,
            target.y,
            rng.random_range(-80.0..80.0),
            rng.random_range(-80.0..80.0),
        ),
        gmsk,
        energies: (0..m).map(|_| rng.random_range(0.5..2.0)).collect(),
        path_gain: 1.0,
        noise: NoiseCorrelation { decay: noise },
        scnr_db: rng.random_range(-10.0..30.0),
    }
}
