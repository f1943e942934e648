//! Layer structure, weights and the structural invariants that tie them
//! together.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::NeuronParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Feedforward,
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub size: usize,
    /// Fraction of the `N·(N−1)` possible intra-layer connections that
    /// exist. Zero unless `kind` is `Recurrent`.
    pub recurrent_density: f64,
}

impl LayerSpec {
    pub fn input(size: usize) -> Self {
        Self {
            kind: LayerKind::Input,
            size,
            recurrent_density: 0.0,
        }
    }

    pub fn feedforward(size: usize) -> Self {
        Self {
            kind: LayerKind::Feedforward,
            size,
            recurrent_density: 0.0,
        }
    }

    pub fn recurrent(size: usize, density: f64) -> Self {
        Self {
            kind: LayerKind::Recurrent,
            size,
            recurrent_density: density,
        }
    }
}

/// Which off-diagonal intra-layer synapses exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynapseMask {
    n: usize,
    bits: Vec<bool>,
}

impl SynapseMask {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    /// Every off-diagonal entry present.
    pub fn off_diagonal(n: usize) -> Self {
        let mut m = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                m.bits[i * n + j] = i != j;
            }
        }
        m
    }

    pub fn from_bits(n: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), n * n, "mask length");
        Self { n, bits }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn contains(&self, post: usize, pre: usize) -> bool {
        self.bits[post * self.n + pre]
    }

    pub fn set(&mut self, post: usize, pre: usize, present: bool) {
        self.bits[post * self.n + pre] = present;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Intra-layer weights `W^{k,k}` and the fixed mask of existing synapses.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentWeights {
    pub weights: Matrix,
    pub mask: SynapseMask,
}

impl RecurrentWeights {
    pub fn zeros(mask: SynapseMask) -> Self {
        let n = mask.size();
        Self {
            weights: Matrix::zeros(n, n),
            mask,
        }
    }

    /// Uses the nonzero off-diagonal entries of `weights` as the mask.
    pub fn from_dense(weights: Matrix) -> Self {
        let n = weights.rows();
        let mut mask = SynapseMask::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j && weights[(i, j)] != 0.0 {
                    mask.set(i, j, true);
                }
            }
        }
        Self { weights, mask }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub layers: Vec<LayerSpec>,
    /// `ff_weights[k - 1]` is `W^{k,k-1}`, shaped `N_k × N_{k-1}`.
    pub ff_weights: Vec<Matrix>,
    /// Indexed by layer; `Some` exactly for recurrent layers.
    pub recurrent: Vec<Option<RecurrentWeights>>,
}

impl Topology {
    /// All-zero weights; recurrent layers start with an empty mask until
    /// [`Topology::init_weights`] draws one.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let violations = structure_violations(&layers);
        if !violations.is_empty() {
            return Err(Error::Invalid(violations));
        }
        let ff_weights = layers
            .windows(2)
            .map(|w| Matrix::zeros(w[1].size, w[0].size))
            .collect();
        let recurrent = layers
            .iter()
            .map(|l| (l.kind == LayerKind::Recurrent).then(|| RecurrentWeights::zeros(SynapseMask::empty(l.size))))
            .collect();
        Ok(Self {
            layers,
            ff_weights,
            recurrent,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn size(&self, layer: usize) -> usize {
        self.layers[layer].size
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// `W^{k,k-1}` for `layer = k ≥ 1`.
    #[inline]
    pub fn ff(&self, layer: usize) -> &Matrix {
        &self.ff_weights[layer - 1]
    }

    #[inline]
    pub fn ff_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.ff_weights[layer - 1]
    }

    #[inline]
    pub fn rec(&self, layer: usize) -> Option<&RecurrentWeights> {
        self.recurrent.get(layer).and_then(Option::as_ref)
    }

    #[inline]
    pub fn rec_mut(&mut self, layer: usize) -> Option<&mut RecurrentWeights> {
        self.recurrent.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn is_recurrent(&self, layer: usize) -> bool {
        self.layers[layer].kind == LayerKind::Recurrent
    }

    /// Draws the recurrent masks and all weights from a generator seeded by
    /// `seed`: masks first, then weights layer by layer.
    ///
    /// A recurrent layer of size `N` and density `d` gets exactly
    /// `⌊d·N·(N−1)⌋` connections; every existing weight is uniform on
    /// `[−1, 1]`.
    pub fn init_weights(&self, seed: u64) -> Result<Topology> {
        let violations = structure_violations(&self.layers);
        if !violations.is_empty() {
            return Err(Error::Invalid(violations));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Topology::new(self.layers.clone())?;

        for (k, spec) in self.layers.iter().enumerate() {
            if spec.kind != LayerKind::Recurrent {
                continue;
            }
            let n = spec.size;
            let slots = n * n.saturating_sub(1);
            let count = libm::floor(spec.recurrent_density * slots as f64) as usize;
            let mut mask = SynapseMask::empty(n);
            for slot in index::sample(&mut rng, slots, count.min(slots)).iter() {
                let post = slot / (n - 1);
                let mut pre = slot % (n - 1);
                if pre >= post {
                    pre += 1;
                }
                mask.set(post, pre, true);
            }
            out.recurrent[k] = Some(RecurrentWeights::zeros(mask));
        }

        for k in 1..self.layers.len() {
            for w in out.ff_weights[k - 1].as_mut_slice() {
                *w = rng.gen_range(-1.0..=1.0);
            }
            if let Some(rec) = out.recurrent[k].as_mut() {
                let n = rec.mask.size();
                for i in 0..n {
                    for j in 0..n {
                        if rec.mask.contains(i, j) {
                            rec.weights[(i, j)] = rng.gen_range(-1.0..=1.0);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One broken invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Layer, matrix or parameter the rule applies to.
    pub location: String,
    pub rule: String,
}

impl Violation {
    fn new(location: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.rule)
    }
}

fn structure_violations(layers: &[LayerSpec]) -> Vec<Violation> {
    let mut out = Vec::new();
    if layers.len() < 2 {
        out.push(Violation::new("layers", "need an input layer and at least one trainable layer"));
    }
    for (k, l) in layers.iter().enumerate() {
        let loc = format!("layer {k}");
        if l.size == 0 {
            out.push(Violation::new(loc.clone(), "size must be at least 1"));
        }
        match (k, l.kind) {
            (0, LayerKind::Input) => {}
            (0, _) => out.push(Violation::new(loc.clone(), "layer 0 must be the input layer")),
            (_, LayerKind::Input) => out.push(Violation::new(loc.clone(), "input layer only allowed as layer 0")),
            _ => {}
        }
        if l.kind == LayerKind::Recurrent {
            if !(0.0..=1.0).contains(&l.recurrent_density) {
                out.push(Violation::new(loc, "recurrent density must lie in [0, 1]"));
            }
        } else if l.recurrent_density != 0.0 {
            out.push(Violation::new(loc, "recurrent density must be 0 for non-recurrent layers"));
        }
    }
    out
}

fn param_violations(params: &NeuronParams, layers: usize, out: &mut Vec<Violation>) {
    if !(params.tau_s > 0.0 && params.tau_m > params.tau_s) {
        out.push(Violation::new("neuron", "tau_m > tau_s > 0"));
    }
    if !(params.sim_step > 0.0) {
        out.push(Violation::new("neuron", "sim_step > 0"));
        return;
    }
    if !(params.refractory >= 0.0) {
        out.push(Violation::new("neuron", "refractory >= 0"));
    } else if params.steps_exact(params.refractory).is_none() {
        out.push(Violation::new("neuron", "refractory must be an integer multiple of sim_step"));
    }
    match params.steps_exact(params.synaptic_delay) {
        None => out.push(Violation::new("neuron", "synaptic_delay must be an integer multiple of sim_step")),
        Some(0) => out.push(Violation::new("neuron", "synaptic_delay must be at least one sim_step")),
        Some(_) => {}
    }
    if params.reset_voltage != 0.0 {
        out.push(Violation::new("neuron", "reset_voltage must be 0 (hard reset to rest)"));
    }
    if params.thresholds.len() != layers.saturating_sub(1) {
        out.push(Violation::new(
            "neuron",
            format!("expected {} thresholds, found {}", layers.saturating_sub(1), params.thresholds.len()),
        ));
    }
    for (i, &t) in params.thresholds.iter().enumerate() {
        if !(t > 0.0 && t.is_finite()) {
            out.push(Violation::new(format!("layer {}", i + 1), "threshold > 0"));
        }
    }
}

/// Every broken invariant of `topology` and `params`; empty when the pair is
/// usable.
pub fn validate(topology: &Topology, params: &NeuronParams) -> Vec<Violation> {
    let layers = &topology.layers;
    let mut out = structure_violations(layers);
    param_violations(params, layers.len(), &mut out);

    if topology.ff_weights.len() != layers.len().saturating_sub(1) {
        out.push(Violation::new("ff_weights", "one matrix per adjacent layer pair"));
    } else {
        for (i, w) in topology.ff_weights.iter().enumerate() {
            let loc = format!("ff_weights {}->{}", i, i + 1);
            if w.shape() != (layers[i + 1].size, layers[i].size) {
                out.push(Violation::new(loc, "shape must be N_k x N_{k-1}"));
            } else if !w.is_finite() {
                out.push(Violation::new(loc, "weights must be finite"));
            }
        }
    }

    if topology.recurrent.len() != layers.len() {
        out.push(Violation::new("rec_weights", "one slot per layer"));
        return out;
    }
    for (k, (spec, rec)) in layers.iter().zip(&topology.recurrent).enumerate() {
        let loc = format!("rec_weights {k}");
        match (spec.kind == LayerKind::Recurrent, rec) {
            (false, None) => {}
            (false, Some(_)) => out.push(Violation::new(loc, "recurrent weights on a non-recurrent layer")),
            (true, None) => out.push(Violation::new(loc, "recurrent layer without recurrent weights")),
            (true, Some(rec)) => {
                let n = spec.size;
                if rec.weights.shape() != (n, n) || rec.mask.size() != n {
                    out.push(Violation::new(loc, "shape must be N_k x N_k"));
                    continue;
                }
                if !rec.weights.is_finite() {
                    out.push(Violation::new(loc.clone(), "weights must be finite"));
                }
                if (0..n).any(|i| rec.weights[(i, i)] != 0.0 || rec.mask.contains(i, i)) {
                    out.push(Violation::new(loc.clone(), "self-connection on the diagonal"));
                }
                let outside =
                    (0..n).any(|i| (0..n).any(|j| i != j && !rec.mask.contains(i, j) && rec.weights[(i, j)] != 0.0));
                if outside {
                    out.push(Violation::new(loc, "nonzero weight outside the sparsity mask"));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> Topology {
        Topology::new(vec![LayerSpec::input(3), LayerSpec::feedforward(2)])
            .unwrap()
            .init_weights(1)
            .unwrap()
    }

    #[test]
    fn well_formed_net_has_no_violations() {
        let t = two_layer();
        assert!(validate(&t, &NeuronParams::for_layers(2)).is_empty());
    }

    #[test]
    fn nonzero_diagonal_is_a_self_connection() {
        let mut t = Topology::new(vec![LayerSpec::input(2), LayerSpec::recurrent(3, 0.5)])
            .unwrap()
            .init_weights(3)
            .unwrap();
        t.rec_mut(1).unwrap().weights[(1, 1)] = 0.5;
        let v = validate(&t, &NeuronParams::for_layers(2));
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].rule.contains("self-connection"));
    }

    #[test]
    fn equal_time_constants_are_rejected() {
        let params = NeuronParams {
            tau_s: 64.0,
            ..NeuronParams::for_layers(2)
        };
        let v = validate(&two_layer(), &params);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("tau_m > tau_s"));
    }

    #[test]
    fn input_layer_only_first() {
        let err = Topology::new(vec![LayerSpec::input(2), LayerSpec::input(2)]).unwrap_err();
        assert!(matches!(err, Error::Invalid(ref v) if v[0].rule.contains("input layer only")));
        assert!(Topology::new(vec![LayerSpec::input(2)]).is_err());
        assert!(Topology::new(vec![LayerSpec::feedforward(2), LayerSpec::feedforward(2)]).is_err());
    }

    #[test]
    fn density_on_feedforward_layer_is_rejected() {
        let spec = LayerSpec {
            recurrent_density: 0.1,
            ..LayerSpec::feedforward(4)
        };
        assert!(Topology::new(vec![LayerSpec::input(2), spec]).is_err());
    }

    #[test]
    fn weight_outside_mask_is_reported() {
        let mut t = Topology::new(vec![LayerSpec::input(2), LayerSpec::recurrent(4, 0.0)])
            .unwrap()
            .init_weights(9)
            .unwrap();
        t.rec_mut(1).unwrap().weights[(0, 1)] = 0.1;
        let v = validate(&t, &NeuronParams::for_layers(2));
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("outside the sparsity mask"));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let base = Topology::new(vec![LayerSpec::input(5), LayerSpec::recurrent(6, 0.4), LayerSpec::feedforward(3)])
            .unwrap();
        let a = base.init_weights(42).unwrap();
        let b = base.init_weights(42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, base.init_weights(43).unwrap());
        for w in &a.ff_weights {
            assert!(w.as_slice().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        assert!(validate(&a, &NeuronParams::for_layers(3)).is_empty());
    }

    #[test]
    fn mask_count_is_floor_of_density_times_slots() {
        let base = Topology::new(vec![LayerSpec::input(1), LayerSpec::recurrent(100, 0.2)]).unwrap();
        let t = base.init_weights(7).unwrap();
        let rec = t.rec(1).unwrap();
        // ⌊0.2 · 100 · 99⌋
        assert_eq!(rec.mask.count(), 1980);
        let nonzero = rec.weights.as_slice().iter().filter(|w| **w != 0.0).count();
        assert_eq!(nonzero, 1980);
        assert!((0..100).all(|i| rec.weights[(i, i)] == 0.0));
    }
}
