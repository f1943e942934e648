use alloc::vec;
use alloc::vec::Vec;

/// Neuron and synapse constants shared by every layer. Times are in ms,
/// potentials in mV.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronParams {
    /// Membrane time constant.
    pub tau_m: f64,
    /// Synaptic time constant.
    pub tau_s: f64,
    /// Firing threshold of every non-input layer; entry `k - 1` belongs to
    /// layer `k`.
    pub thresholds: Vec<f64>,
    pub refractory: f64,
    pub reset_voltage: f64,
    pub synaptic_delay: f64,
    pub sim_step: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 10.0;

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            tau_m: 64.0,
            tau_s: 8.0,
            thresholds: Vec::new(),
            refractory: 2.0,
            reset_voltage: 0.0,
            synaptic_delay: 1.0,
            sim_step: 1.0,
        }
    }
}

impl NeuronParams {
    /// Default constants with the default threshold on `layers - 1`
    /// non-input layers.
    pub fn for_layers(layers: usize) -> Self {
        Self {
            thresholds: vec![DEFAULT_THRESHOLD; layers.saturating_sub(1)],
            ..Self::default()
        }
    }

    pub fn with_thresholds(mut self, thresholds: Vec<f64>) -> Self {
        self.thresholds = thresholds;
        self
    }

    /// Threshold ν of non-input layer `layer` (1-based over the topology).
    #[inline]
    pub fn threshold(&self, layer: usize) -> f64 {
        debug_assert!(layer >= 1, "the input layer has no threshold");
        self.thresholds[layer - 1]
    }

    /// Number of whole simulation steps in `ms`, or `None` if `ms` is not an
    /// integer multiple of the step.
    pub fn steps_exact(&self, ms: f64) -> Option<u32> {
        let n = ms / self.sim_step;
        let r = libm::round(n);
        if (n - r).abs() <= 1e-9 * r.max(1.0) && r >= 0.0 && r <= u32::MAX as f64 {
            Some(r as u32)
        } else {
            None
        }
    }

    pub fn delay_steps(&self) -> u32 {
        self.steps_exact(self.synaptic_delay).unwrap_or(0)
    }

    pub fn refractory_steps(&self) -> u32 {
        self.steps_exact(self.refractory)
            .unwrap_or_else(|| libm::ceil(self.refractory / self.sim_step) as u32)
    }

    /// Kernel normalization `1 / (1 − τ_s/τ_m)`.
    #[inline]
    pub fn kernel_scale(&self) -> f64 {
        1.0 / (1.0 - self.tau_s / self.tau_m)
    }
}
