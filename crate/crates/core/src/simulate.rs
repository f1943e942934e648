//! Time-stepped leaky integrate-and-fire forward pass.
//!
//! Each neuron carries two exponentially decaying traces, one with the
//! membrane time constant and one with the synaptic time constant. An
//! arriving spike of weight `w` adds `w·c` to both, so the membrane
//! potential `u = trace_m − trace_s` is exactly the weighted sum of
//! double-exponential kernels [`psp_kernel`] since the last reset.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::NeuronParams;
use crate::spike::{Episode, SpikeTrain};
use crate::topology::Topology;

/// Post-synaptic response to a unit-weight spike `dt` ms after it arrives:
/// `c·(exp(−dt/τ_m) − exp(−dt/τ_s))` with `c = 1/(1 − τ_s/τ_m)`, and 0 for
/// `dt < 0`.
pub fn psp_kernel(dt: f64, params: &NeuronParams) -> f64 {
    if dt < 0.0 {
        return 0.0;
    }
    params.kernel_scale() * (libm::exp(-dt / params.tau_m) - libm::exp(-dt / params.tau_s))
}

/// Peak of the kernel, reached at `dt* = τ_m·τ_s·ln(τ_m/τ_s)/(τ_m − τ_s)`.
pub fn psp_kernel_peak(params: &NeuronParams) -> f64 {
    let ratio = params.tau_s / params.tau_m;
    let span = params.tau_m - params.tau_s;
    params.kernel_scale()
        * (libm::pow(ratio, params.tau_s / span) - libm::pow(ratio, params.tau_m / span))
}

/// Kernel sampled at whole simulation steps.
#[derive(Debug, Clone)]
pub struct KernelTable {
    values: Vec<f64>,
}

impl KernelTable {
    pub fn new(params: &NeuronParams, steps: u32) -> Self {
        let values = (0..=steps)
            .map(|n| psp_kernel(n as f64 * params.sim_step, params))
            .collect();
        Self { values }
    }

    /// `ε(steps · sim_step)`; panics past the table length.
    #[inline]
    pub fn at(&self, steps: u32) -> f64 {
        self.values[steps as usize]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeuronState {
    pub trace_m: f64,
    pub trace_s: f64,
    /// First step at which the neuron integrates input again.
    pub refractory_until: u32,
}

impl NeuronState {
    #[inline]
    pub fn potential(&self) -> f64 {
        self.trace_m - self.trace_s
    }

    #[inline]
    pub fn is_refractory(&self, step: u32) -> bool {
        step < self.refractory_until
    }

    #[inline]
    fn inject(&mut self, amount: f64) {
        self.trace_m += amount;
        self.trace_s += amount;
    }
}

/// Each output spike in `fired` (emitted on the previous step) injects
/// `−inhibition_weight` into both traces of every other non-refractory output
/// neuron at `step`.
pub fn lateral_inhibition_forward(states: &mut [NeuronState], fired: &[usize], inhibition_weight: f64, step: u32) {
    if inhibition_weight == 0.0 {
        return;
    }
    for &f in fired {
        for (l, s) in states.iter_mut().enumerate() {
            if l != f && !s.is_refractory(step) {
                s.inject(-inhibition_weight);
            }
        }
    }
}

/// Forward pass without lateral inhibition.
pub fn run_forward(topology: &Topology, params: &NeuronParams, input: &[SpikeTrain], duration_ms: f64) -> Result<Episode> {
    run_forward_with(topology, params, input, duration_ms, 0.0)
}

/// Forward pass; `inhibition_weight > 0` enables lateral inhibition in the
/// output layer.
pub fn run_forward_with(
    topology: &Topology,
    params: &NeuronParams,
    input: &[SpikeTrain],
    duration_ms: f64,
    inhibition_weight: f64,
) -> Result<Episode> {
    run_forward_probe(topology, params, input, duration_ms, inhibition_weight, |_, _, _| {})
}

/// Forward pass that hands every layer's neuron states to `probe` after each
/// step's integration and before firing is checked.
pub fn run_forward_probe(
    topology: &Topology,
    params: &NeuronParams,
    input: &[SpikeTrain],
    duration_ms: f64,
    inhibition_weight: f64,
    mut probe: impl FnMut(u32, usize, &[NeuronState]),
) -> Result<Episode> {
    let steps = match params.steps_exact(duration_ms) {
        Some(s) if s > 0 => s,
        _ => return Err(Error::Duration(duration_ms)),
    };
    if input.len() != topology.size(0) {
        return Err(Error::Shape {
            context: "input trains",
            expected: topology.size(0),
            actual: input.len(),
        });
    }
    if params.thresholds.len() != topology.num_layers() - 1 {
        return Err(Error::Shape {
            context: "thresholds",
            expected: topology.num_layers() - 1,
            actual: params.thresholds.len(),
        });
    }

    // fired[k][t]: neurons of layer k spiking at step t.
    let num_layers = topology.num_layers();
    let mut fired: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); steps as usize]; num_layers];
    for (i, train) in input.iter().enumerate() {
        for &s in train.steps() {
            if s >= steps {
                return Err(Error::InputOutOfRange { neuron: i, step: s, steps });
            }
            fired[0][s as usize].push(i);
        }
    }

    // Pre-major copies so an arriving spike reads one contiguous row.
    let ff_by_pre: Vec<Matrix> = topology.ff_weights.iter().map(Matrix::transpose).collect();
    let rec_by_pre: Vec<Option<Matrix>> = topology
        .recurrent
        .iter()
        .map(|r| r.as_ref().map(|r| r.weights.transpose()))
        .collect();

    let decay_m = libm::exp(-params.sim_step / params.tau_m);
    let decay_s = libm::exp(-params.sim_step / params.tau_s);
    let c = params.kernel_scale();
    let delay = params.delay_steps();
    let refractory = params.refractory_steps();

    let mut states: Vec<Vec<NeuronState>> = topology
        .layers
        .iter()
        .map(|l| vec![NeuronState::default(); l.size])
        .collect();
    let mut trains: Vec<Vec<SpikeTrain>> = topology
        .layers
        .iter()
        .map(|l| vec![SpikeTrain::new(); l.size])
        .collect();
    trains[0] = input.to_vec();

    for t in 0..steps {
        for k in 1..num_layers {
            let (before, rest) = fired.split_at_mut(k);
            let layer_fired = &mut rest[0];
            let layer_states = &mut states[k];

            for s in layer_states.iter_mut() {
                s.trace_m *= decay_m;
                s.trace_s *= decay_s;
            }

            if t >= delay {
                let src = (t - delay) as usize;
                for &j in &before[k - 1][src] {
                    deliver(layer_states, ff_by_pre[k - 1].row(j), c, t);
                }
                if let Some(rec) = &rec_by_pre[k] {
                    for &p in &layer_fired[src] {
                        deliver(layer_states, rec.row(p), c, t);
                    }
                }
            }

            if k == num_layers - 1 && t >= 1 {
                lateral_inhibition_forward(layer_states, &layer_fired[(t - 1) as usize], inhibition_weight, t);
            }

            probe(t, k, layer_states);

            let threshold = params.threshold(k);
            let now = &mut layer_fired[t as usize];
            for (l, s) in layer_states.iter_mut().enumerate() {
                if !s.is_refractory(t) && s.potential() >= threshold {
                    now.push(l);
                    trains[k][l].push(t);
                    *s = NeuronState {
                        trace_m: 0.0,
                        trace_s: 0.0,
                        refractory_until: t + refractory,
                    };
                }
            }
        }
    }

    Ok(Episode::new(steps, trains))
}

#[inline]
fn deliver(states: &mut [NeuronState], weights_from_pre: &[f64], c: f64, step: u32) {
    for (s, &w) in states.iter_mut().zip(weights_from_pre) {
        if !s.is_refractory(step) {
            s.inject(w * c);
        }
    }
}
