//! Shared fixtures for the criterion benches.

use onset_core::cohortgen::{gen_cohort, Cohort, GenConfig};
use onset_core::encoder::{EncoderConfig, EncoderParams};
use onset_core::numkit::{Rng, Tensor};

pub fn cohort(n_patients: usize) -> Cohort {
    gen_cohort(&GenConfig {
        n_patients,
        ..GenConfig::default()
    })
    .expect("default generator config is valid")
}

pub fn encoder(d_model: usize) -> EncoderParams {
    let cfg = EncoderConfig {
        d_model,
        d_ff: 2 * d_model,
        ..EncoderConfig::default()
    };
    EncoderParams::init(&cfg, &mut Rng::new(1)).expect("valid encoder config")
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("nonzero shape")
}
