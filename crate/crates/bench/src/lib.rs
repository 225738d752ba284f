//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffaug_core::kernel::{GaussianPrior, KernelBasis, KernelConfig, KernelVelocityField};
use diffaug_core::posterior::RegistrationConfig;
use diffaug_core::{GridGeometry, ScalarVolume};

pub struct Fixture {
    pub moving: ScalarVolume,
    pub template: ScalarVolume,
    pub prior: GaussianPrior,
    pub field: KernelVelocityField,
    pub rc: RegistrationConfig,
}

/// A smooth 2D image pair on an `n x n` grid with a prior-drawn velocity field.
pub fn fixture_2d(n: usize, control_spacing: usize) -> Fixture {
    let g = GridGeometry::unit(&[n, n]).expect("valid grid");
    let c = (n - 1) as f64 / 2.0;
    let blob = |p: [f64; 3], dx: f64| {
        let r2 = (p[0] - c - dx).powi(2) + (p[1] - c).powi(2);
        (-r2 / (0.08 * (n * n) as f64)).exp()
    };
    let moving = ScalarVolume::from_fn(g.clone(), |p| blob(p, 1.5)).expect("finite");
    let template = ScalarVolume::from_fn(g.clone(), |p| blob(p, 0.0)).expect("finite");
    let kernel = KernelConfig::for_geometry(&g, control_spacing).expect("valid kernel");
    let basis = Arc::new(KernelBasis::new(&g, kernel).expect("valid basis"));
    let prior = GaussianPrior::new(basis).expect("positive definite Gram");
    let field = prior.sample(&mut ChaCha8Rng::seed_from_u64(7)).scaled(0.5);
    Fixture {
        moving,
        template,
        prior,
        field,
        rc: RegistrationConfig {
            sigma: 0.1,
            ..RegistrationConfig::default()
        },
    }
}
