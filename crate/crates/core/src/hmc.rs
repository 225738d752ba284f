//! Hamiltonian Monte Carlo with an identity mass matrix, leapfrog integration
//! and Metropolis correction.
//!
//! The step size is adapted multiplicatively during burn-in only; afterwards the
//! kernel is a fixed reversible HMC transition.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarVolume;
use crate::kernel::{GaussianPrior, KernelVelocityField};
use crate::posterior::{Posterior, RegistrationConfig};
use crate::rng::rng_from_seed;

/// Log density with gradient over a flat parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_and_gradient(x, &mut g)
    }
}

pub const TARGET_ACCEPTANCE: f64 = 0.65;
pub const ADAPT_FACTOR: f64 = 1.2;
/// Acceptance probabilities within this distance of the target leave the step unchanged.
pub const ADAPT_BAND: f64 = 0.05;
/// Chains accepting less often than this after tuning are reported as degenerate.
pub const MIN_ACCEPTANCE: f64 = 0.05;
/// After burn-in each transition draws its step uniformly from
/// `tuned * [1 - STEP_JITTER, 1]`, so a fixed trajectory length cannot lock
/// onto the period of a near-Gaussian target. The jitter only shortens steps:
/// the tuned step is the largest one known to be stable.
pub const STEP_JITTER: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub burn_in: usize,
    /// Number of retained samples `S`.
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.01,
            leapfrog_steps: 20,
            burn_in: 50,
            samples: 10,
            thin: 2,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidInput("HMC step size must be positive".into()));
        }
        if self.leapfrog_steps < 1 || self.samples < 1 || self.thin < 1 {
            return Err(Error::InvalidInput(
                "leapfrog steps, samples and thin must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub acceptance_rate: f64,
    pub mean_energy_error: f64,
    pub tuned_step_size: f64,
    pub divergences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub log_density: f64,
    pub gradient: Vec<f64>,
}

impl ChainState {
    pub fn new<T: LogDensity + ?Sized>(target: &T, position: Vec<f64>) -> Self {
        let mut gradient = vec![0.0; position.len()];
        let log_density = target.log_density_and_gradient(&position, &mut gradient);
        ChainState {
            position,
            log_density,
            gradient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub accept_prob: f64,
    /// `H(proposal) - H(start)`.
    pub energy_error: f64,
    /// Non-finite density or gradient along the trajectory.
    pub divergent: bool,
}

/// Runs `steps` leapfrog updates in place. `grad` must hold the gradient at `q`
/// on entry and holds the gradient at the final position on exit.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    step_size: f64,
    steps: usize,
) -> f64 {
    let mut logp = f64::NAN;
    for (pi, gi) in p.iter_mut().zip(grad.iter()) {
        *pi += 0.5 * step_size * gi;
    }
    for l in 0..steps {
        for (qi, pi) in q.iter_mut().zip(p.iter()) {
            *qi += step_size * pi;
        }
        logp = target.log_density_and_gradient(q, grad);
        if !logp.is_finite() {
            return logp;
        }
        let scale = if l + 1 == steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += scale * step_size * gi;
        }
    }
    logp
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|x| x * x).sum::<f64>()
}

/// One HMC transition. On rejection `state` is left untouched.
pub fn hmc_step<T: LogDensity + ?Sized>(
    state: &mut ChainState,
    target: &T,
    step_size: f64,
    leapfrog_steps: usize,
    rng: &mut ChaCha8Rng,
) -> StepOutcome {
    let mut p: Vec<f64> = (0..state.position.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let h0 = -state.log_density + kinetic(&p);
    let mut q = state.position.clone();
    let mut grad = state.gradient.clone();
    let logp = leapfrog(target, &mut q, &mut p, &mut grad, step_size, leapfrog_steps);
    let u: f64 = rng.random();
    let finite = logp.is_finite() && grad.iter().all(|g| g.is_finite());
    if !finite {
        return StepOutcome {
            accepted: false,
            accept_prob: 0.0,
            energy_error: f64::INFINITY,
            divergent: true,
        };
    }
    let h1 = -logp + kinetic(&p);
    let energy_error = h1 - h0;
    let accept_prob = (-energy_error).exp().min(1.0);
    let accepted = u < accept_prob;
    if accepted {
        state.position = q;
        state.log_density = logp;
        state.gradient = grad;
    }
    StepOutcome {
        accepted,
        accept_prob,
        energy_error,
        divergent: false,
    }
}

/// Multiplicative step-size correction toward [`TARGET_ACCEPTANCE`].
pub fn adapt_step_size(step_size: f64, accept_prob: f64) -> f64 {
    if accept_prob > TARGET_ACCEPTANCE + ADAPT_BAND {
        step_size * ADAPT_FACTOR
    } else if accept_prob < TARGET_ACCEPTANCE - ADAPT_BAND {
        step_size / ADAPT_FACTOR
    } else {
        step_size
    }
}

/// Burn-in with step-size adaptation. Advances `state` and returns the tuned step.
///
/// The step moves on the lattice `step_size * 1.2^k`. Near a leapfrog
/// stability limit the rule alternates between a stable and an unstable
/// level, so the last value is not returned. Instead, among the levels
/// visited in the second half of burn-in, the result is the largest whose
/// mean acceptance probability reaches `TARGET_ACCEPTANCE - ADAPT_BAND`, or
/// the one closest to the target (smaller on ties) when none does.
pub fn tune_step_size<T: LogDensity + ?Sized>(
    target: &T,
    state: &mut ChainState,
    cfg: &HmcConfig,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut level: i32 = 0;
    let mut visits: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    let eps_at = |k: i32| cfg.step_size * ADAPT_FACTOR.powi(k);
    for it in 0..cfg.burn_in {
        let out = hmc_step(state, target, eps_at(level), cfg.leapfrog_steps, rng);
        if 2 * it >= cfg.burn_in {
            let e = visits.entry(level).or_insert((0.0, 0));
            e.0 += out.accept_prob;
            e.1 += 1;
        }
        let eps = eps_at(level);
        let next = adapt_step_size(eps, out.accept_prob);
        if next > eps {
            level += 1;
        } else if next < eps {
            level -= 1;
        }
    }
    let mean = |&(sum, n): &(f64, usize)| sum / n as f64;
    let stable = visits
        .iter()
        .rev()
        .find(|(_, v)| mean(v) >= TARGET_ACCEPTANCE - ADAPT_BAND)
        .map(|(&k, _)| k);
    let closest = visits
        .iter()
        .map(|(&k, v)| (k, (mean(v) - TARGET_ACCEPTANCE).abs()))
        .fold(None, |best: Option<(i32, f64)>, (k, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((k, d)),
        })
        .map(|(k, _)| k);
    eps_at(stable.or(closest).unwrap_or(level))
}

#[derive(Debug, Clone)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    pub diagnostics: ChainDiagnostics,
    pub last: ChainState,
}

/// Burn-in (tuned), then keeps every `thin`-th state until `samples` are
/// collected, jittering the tuned step per transition.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    init: Vec<f64>,
    cfg: &HmcConfig,
) -> Result<Chain> {
    cfg.validate()?;
    if init.len() != target.dim() {
        return Err(Error::InvalidInput(format!(
            "initial state has {} coordinates, target expects {}",
            init.len(),
            target.dim()
        )));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut state = ChainState::new(target, init);
    if !state.log_density.is_finite() {
        return Err(Error::InvalidInput("initial state has non-finite density".into()));
    }
    let eps = tune_step_size(target, &mut state, cfg, &mut rng);
    let total = cfg.samples * cfg.thin;
    let mut samples = Vec::with_capacity(cfg.samples);
    let (mut accepted, mut divergences, mut err_sum) = (0usize, 0usize, 0.0);
    for it in 1..=total {
        let jitter = 1.0 - STEP_JITTER * rng.random::<f64>();
        let out = hmc_step(&mut state, target, eps * jitter, cfg.leapfrog_steps, &mut rng);
        accepted += out.accepted as usize;
        if out.divergent {
            divergences += 1;
        } else {
            err_sum += out.energy_error;
        }
        if it % cfg.thin == 0 {
            samples.push(state.position.clone());
        }
    }
    let acceptance_rate = accepted as f64 / total as f64;
    let finite_steps = total - divergences;
    let diagnostics = ChainDiagnostics {
        acceptance_rate,
        mean_energy_error: if finite_steps > 0 {
            err_sum / finite_steps as f64
        } else {
            f64::NAN
        },
        tuned_step_size: eps,
        divergences,
    };
    if acceptance_rate < MIN_ACCEPTANCE {
        return Err(Error::DegenerateChain {
            acceptance: acceptance_rate,
            floor: MIN_ACCEPTANCE,
            subject: None,
        });
    }
    Ok(Chain {
        samples,
        diagnostics,
        last: state,
    })
}

/// Posterior velocity-field samples for observation `ik` against template `it`.
pub fn sample_posterior(
    ik: &ScalarVolume,
    it: &ScalarVolume,
    init: &KernelVelocityField,
    rc: &RegistrationConfig,
    prior: &GaussianPrior,
    cfg: &HmcConfig,
) -> Result<(Vec<KernelVelocityField>, ChainDiagnostics)> {
    let target = Posterior::new(ik, it, prior, *rc)?;
    let chain = run_chain(&target, init.to_flat(), cfg)?;
    let fields = chain
        .samples
        .iter()
        .map(|s| KernelVelocityField::from_flat(prior.basis().clone(), s))
        .collect::<Result<Vec<_>>>()?;
    Ok((fields, chain.diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use crate::kernel::{KernelBasis, KernelConfig};
    use crate::posterior::PriorTarget;
    use std::sync::Arc;

    pub(crate) struct StdNormal(pub usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for (g, xi) in grad.iter_mut().zip(x) {
                *g = -xi;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
    }

    struct Flat(usize);

    impl LogDensity for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_and_gradient(&self, _: &[f64], grad: &mut [f64]) -> f64 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            0.0
        }
    }

    #[test]
    fn tiny_steps_almost_always_accept() {
        let t = StdNormal(5);
        let mut rng = rng_from_seed(1);
        let mut s = ChainState::new(&t, vec![0.5; 5]);
        let acc = (0..500)
            .filter(|_| hmc_step(&mut s, &t, 1e-5, 10, &mut rng).accepted)
            .count();
        assert!(acc as f64 / 500.0 > 0.99);
    }

    #[test]
    fn flat_target_always_accepts() {
        let t = Flat(3);
        let mut rng = rng_from_seed(2);
        let mut s = ChainState::new(&t, vec![0.0; 3]);
        for _ in 0..100 {
            let out = hmc_step(&mut s, &t, 0.7, 5, &mut rng);
            assert!(out.accepted);
            assert!(out.energy_error.abs() < 1e-12);
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let t = StdNormal(4);
        let q0 = vec![0.3, -1.2, 2.0, 0.1];
        let p0 = vec![1.0, 0.5, -0.7, 0.2];
        let (mut q, mut p) = (q0.clone(), p0.clone());
        let mut g = vec![0.0; 4];
        t.log_density_and_gradient(&q, &mut g);
        leapfrog(&t, &mut q, &mut p, &mut g, 0.1, 25);
        p.iter_mut().for_each(|x| *x = -*x);
        leapfrog(&t, &mut q, &mut p, &mut g, 0.1, 25);
        for (a, b) in q.iter().zip(&q0) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in p.iter().zip(&p0) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn adaptation_rule() {
        assert_eq!(adapt_step_size(0.1, 0.65), 0.1);
        assert!((adapt_step_size(0.1, 0.95) - 0.12).abs() < 1e-15);
        assert!((adapt_step_size(0.12, 0.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn huge_initial_step_shrinks() {
        let t = StdNormal(10);
        let cfg = HmcConfig { step_size: 50.0, burn_in: 30, ..Default::default() };
        let mut rng = rng_from_seed(3);
        let mut s = ChainState::new(&t, vec![0.0; 10]);
        assert!(tune_step_size(&t, &mut s, &cfg, &mut rng) < 50.0);
    }

    #[test]
    fn tuned_standard_normal_acceptance() {
        let t = StdNormal(10);
        let cfg = HmcConfig { samples: 500, burn_in: 200, seed: 11, ..Default::default() };
        let chain = run_chain(&t, vec![0.0; 10], &cfg).unwrap();
        let a = chain.diagnostics.acceptance_rate;
        assert!((0.4..=0.95).contains(&a), "acceptance {a}");
        assert_eq!(chain.samples.len(), 500);
    }

    #[test]
    fn same_seed_same_chain() {
        let g = GridGeometry::unit(&[16, 16]).unwrap();
        let basis = Arc::new(KernelBasis::new(&g, KernelConfig::new(12.0, 6).unwrap()).unwrap());
        let prior = GaussianPrior::new(basis).unwrap();
        let cfg = HmcConfig { samples: 20, seed: 5, ..Default::default() };
        let a = run_chain(&PriorTarget(&prior), vec![0.0; prior.dim()], &cfg).unwrap();
        let b = run_chain(&PriorTarget(&prior), vec![0.0; prior.dim()], &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.diagnostics, b.diagnostics);
    }

    #[test]
    fn rejects_bad_config() {
        let t = StdNormal(2);
        assert!(run_chain(&t, vec![0.0; 2], &HmcConfig { samples: 0, ..Default::default() }).is_err());
        assert!(run_chain(&t, vec![0.0; 3], &HmcConfig::default()).is_err());
    }
}
