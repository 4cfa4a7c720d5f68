//! Shared fixtures for the benchmarks in `benches/`.

use rem_core::features::{build_samples, Sample};
use rem_core::geo::{Measurement, Scenario};
use rem_core::synth::{synthesize, SynthParams};

/// A fitted synthetic scenario with its measurements and extracted samples.
pub struct Fixture {
    pub scenario: Scenario,
    pub measurements: Vec<Measurement>,
    pub samples: Vec<Sample>,
}

pub fn fixture(n_measurements: usize) -> Fixture {
    let params = SynthParams {
        n_measurements,
        ..SynthParams::default()
    };
    let out = synthesize(&params, 11).expect("default synthesis succeeds");
    let scenario = out.scenario.with_eirp(&out.true_eirp_dbm);
    let samples = build_samples(&scenario, &out.measurements).expect("samples extract");
    Fixture {
        scenario,
        measurements: out.measurements,
        samples,
    }
}
