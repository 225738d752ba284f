use serde::{Deserialize, Serialize};

use diffaug_core::em::EmConfig;
use diffaug_core::flow::DEFAULT_FLOW_STEPS;
use diffaug_core::hmc::HmcConfig;
use diffaug_core::kernel::DEFAULT_CONTROL_SPACING;
use diffaug_core::synth::PopulationConfig;

/// Settings read from `--config`; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub control_spacing: usize,
    /// Kernel support radius in mm; twice the physical control spacing when absent.
    pub support_radius: Option<f64>,
    pub flow_steps: usize,
    pub em: EmConfig,
    /// Chains drawn at augmentation time.
    pub augment_hmc: HmcConfig,
    pub augmentations: usize,
    pub cp: usize,
    pub sd: f64,
    pub population: PopulationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            control_spacing: DEFAULT_CONTROL_SPACING,
            support_radius: None,
            flow_steps: DEFAULT_FLOW_STEPS,
            em: EmConfig::default(),
            augment_hmc: HmcConfig::default(),
            augmentations: 2,
            cp: 8,
            sd: 4.0,
            population: PopulationConfig::default(),
        }
    }
}
