//! Loss, Adam, weight regularization and the per-sample training loop.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backprop::{backward, GradientSet, Solver};
use crate::encode::LabeledSpikeSample;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::NeuronParams;
use crate::simulate::run_forward_with;
use crate::spsp::{compute_tableau_readout, DerivativeEstimator};
use crate::topology::{validate, Topology};

/// Rate-coded loss `½‖o − y‖²`.
pub fn loss(counts: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(counts.len(), labels.len(), "counts and labels differ in length");
    0.5 * counts.iter().zip(labels).map(|(o, y)| (o - y) * (o - y)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Desired firing count of the labelled output neuron.
    pub target_count: f64,
    pub nontarget_count: f64,
    pub epochs: usize,
    pub reg_lambda: f64,
    /// Output-layer lateral inhibition; 0 disables it.
    pub inhibition_weight: f64,
    pub solver: Solver,
    pub estimator: DerivativeEstimator,
    /// Read silent neurons' S-PSPs out at the end of the sample.
    pub silent_readout: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluate the test set every this many epochs (and after the last).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_count: 35.0,
            nontarget_count: 5.0,
            epochs: 1,
            reg_lambda: 1e-5,
            inhibition_weight: 0.0,
            solver: Solver::Exact,
            estimator: DerivativeEstimator::default(),
            silent_readout: true,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.target_count > self.nontarget_count && self.nontarget_count >= 0.0) {
            return fail("target_count > nontarget_count >= 0");
        }
        if self.epochs < 1 {
            return fail("epochs >= 1");
        }
        if !(self.reg_lambda >= 0.0) {
            return fail("reg_lambda >= 0");
        }
        if !(self.inhibition_weight >= 0.0) {
            return fail("inhibition_weight >= 0");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return fail("Adam constants: 0 <= beta < 1, epsilon > 0");
        }
        if self.eval_every < 1 {
            return fail("eval_every >= 1");
        }
        Ok(())
    }
}

/// Desired output counts: `target_count` at `class`, `nontarget_count`
/// elsewhere.
pub fn make_labels(class: usize, num_classes: usize, config: &TrainConfig) -> Vec<f64> {
    assert!(class < num_classes, "class index out of range");
    let mut y = vec![config.nontarget_count; num_classes];
    y[class] = config.target_count;
    y
}

/// `λ·sign(w)·exp(|w|)` per existing weight.
pub fn regularization_gradient(topology: &Topology, lambda: f64) -> GradientSet {
    let mut g = GradientSet::zeros(topology);
    add_regularization(&mut g, topology, lambda);
    g
}

#[inline]
fn exp_penalty(w: f64, lambda: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        lambda * w.signum() * libm::exp(w.abs())
    }
}

pub fn add_regularization(grads: &mut GradientSet, topology: &Topology, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (g, w) in grads.ff.iter_mut().zip(&topology.ff_weights) {
        for (g, &w) in g.as_mut_slice().iter_mut().zip(w.as_slice()) {
            *g += exp_penalty(w, lambda);
        }
    }
    for (g, rec) in grads.rec.iter_mut().zip(&topology.recurrent) {
        if let (Some(g), Some(rec)) = (g, rec) {
            let n = g.rows();
            for i in 0..n {
                for j in 0..n {
                    if rec.mask.contains(i, j) {
                        g[(i, j)] += exp_penalty(rec.weights[(i, j)], lambda);
                    }
                }
            }
        }
    }
}

/// Bias-corrected Adam over every weight matrix of a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: GradientSet,
    v: GradientSet,
}

impl AdamState {
    pub fn new(topology: &Topology, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: GradientSet::zeros(topology),
            v: GradientSet::zeros(topology),
        }
    }

    pub fn from_config(topology: &Topology, config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            ..Self::new(topology, config.learning_rate)
        }
    }

    /// Applies one update. A gradient with a non-finite entry leaves both
    /// the weights and the state untouched and returns an error.
    pub fn step(&mut self, grads: &GradientSet, topology: &mut Topology) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let hp = Hyper {
            lr: self.learning_rate,
            b1: self.beta1,
            b2: self.beta2,
            eps: self.epsilon,
            bc1,
            bc2,
        };

        for (k, w) in topology.ff_weights.iter_mut().enumerate() {
            update(w, &grads.ff[k], &mut self.m.ff[k], &mut self.v.ff[k], None, &hp);
        }
        for (k, rec) in topology.recurrent.iter_mut().enumerate() {
            if let (Some(rec), Some(g), Some(m), Some(v)) =
                (rec.as_mut(), grads.rec[k].as_ref(), self.m.rec[k].as_mut(), self.v.rec[k].as_mut())
            {
                update(&mut rec.weights, g, m, v, Some(rec.mask.bits()), &hp);
            }
        }
        Ok(())
    }
}

struct Hyper {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

fn update(w: &mut Matrix, g: &Matrix, m: &mut Matrix, v: &mut Matrix, mask: Option<&[bool]>, hp: &Hyper) {
    let w = w.as_mut_slice();
    let (g, m, v) = (g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
    for i in 0..w.len() {
        if mask.is_some_and(|mask| !mask[i]) {
            continue;
        }
        m[i] = hp.b1 * m[i] + (1.0 - hp.b1) * g[i];
        v[i] = hp.b2 * v[i] + (1.0 - hp.b2) * g[i] * g[i];
        let m_hat = m[i] / hp.bc1;
        let v_hat = v[i] / hp.bc2;
        w[i] -= hp.lr * m_hat / (libm::sqrt(v_hat) + hp.eps);
    }
}

/// Predicted class: the output neuron with the most spikes, lowest index on
/// ties.
pub fn predict(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn new(num_classes: usize) -> Self {
        Self {
            correct: 0,
            total: 0,
            confusion: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn record(&mut self, label: usize, predicted: usize) {
        self.total += 1;
        if label == predicted {
            self.correct += 1;
        }
        self.confusion[label][predicted] += 1;
    }

    pub fn merge(&mut self, other: &Evaluation) {
        self.correct += other.correct;
        self.total += other.total;
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Simulates every sample and scores the argmax prediction.
pub fn evaluate(
    dataset: &[LabeledSpikeSample],
    topology: &Topology,
    params: &NeuronParams,
    inhibition_weight: f64,
) -> Result<Evaluation> {
    let classes = topology.size(topology.output_layer());
    let mut eval = Evaluation::new(classes);
    for sample in dataset {
        eval.record(sample.label, classify(sample, topology, params, inhibition_weight)?);
    }
    Ok(eval)
}

/// Predicted class of one sample.
pub fn classify(
    sample: &LabeledSpikeSample,
    topology: &Topology,
    params: &NeuronParams,
    inhibition_weight: f64,
) -> Result<usize> {
    let classes = topology.size(topology.output_layer());
    if sample.label >= classes {
        return Err(Error::Config(alloc::format!("label {} but only {classes} output neurons", sample.label)));
    }
    let ep = run_forward_with(topology, params, &sample.input, sample.duration_ms, inhibition_weight)?;
    Ok(predict(ep.output_counts()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: bool,
    /// The sample produced no usable gradient and the weights were left
    /// unchanged.
    pub skipped: bool,
}

/// Forward pass, backward pass, regularization and one Adam update for a
/// single sample.
pub fn train_step(
    sample: &LabeledSpikeSample,
    topology: &mut Topology,
    params: &NeuronParams,
    config: &TrainConfig,
    adam: &mut AdamState,
) -> Result<StepOutcome> {
    let classes = topology.size(topology.output_layer());
    if sample.label >= classes {
        return Err(Error::Config(alloc::format!("label {} but only {classes} output neurons", sample.label)));
    }
    let episode = run_forward_with(topology, params, &sample.input, sample.duration_ms, config.inhibition_weight)?;
    let labels = make_labels(sample.label, classes, config);
    let counts = episode.output_counts_f64();
    let outcome = StepOutcome {
        loss: loss(&counts, &labels),
        correct: predict(episode.output_counts()) == sample.label,
        skipped: false,
    };

    let tableau = compute_tableau_readout(&episode, topology, params, &config.estimator, config.silent_readout)?;
    let mut grads = match backward(&episode, &tableau, topology, params, &labels, config.solver) {
        Ok(g) => g,
        Err(e) if e.is_degenerate_sample() => {
            log::warn!("skipping sample: {e}");
            return Ok(StepOutcome { skipped: true, ..outcome });
        }
        Err(e) => return Err(e),
    };
    add_regularization(&mut grads, topology, config.reg_lambda);
    match adam.step(&grads, topology) {
        Ok(()) => Ok(outcome),
        Err(e) if e.is_degenerate_sample() => {
            log::warn!("skipping sample: {e}");
            Ok(StepOutcome { skipped: true, ..outcome })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the epoch's training samples, measured before each
    /// sample's update.
    pub train_loss: f64,
    /// Fraction of training samples classified correctly during the epoch.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub skipped: usize,
}

/// Sample order of `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains with batch size 1. `on_epoch` sees every epoch's metrics and the
/// weights at the end of that epoch.
pub fn train(
    train_set: &[LabeledSpikeSample],
    test_set: Option<&[LabeledSpikeSample]>,
    topology: &Topology,
    params: &NeuronParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Topology),
) -> Result<(Topology, Vec<EpochMetrics>)> {
    config.check()?;
    let violations = validate(topology, params);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }

    let mut net = topology.clone();
    let mut adam = AdamState::from_config(&net, config);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut total_loss = 0.0;
        let mut correct = 0;
        let mut skipped = 0;
        for idx in epoch_order(train_set.len(), config.seed, epoch) {
            let out = train_step(&train_set[idx], &mut net, params, config, &mut adam)
                .map_err(|e| annotate(e, idx))?;
            total_loss += out.loss;
            correct += out.correct as usize;
            skipped += out.skipped as usize;
        }
        let test_acc = match test_set {
            Some(test) if !test.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs) => {
                Some(evaluate(test, &net, params, config.inhibition_weight)?.accuracy())
            }
            _ => None,
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: total_loss / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            skipped,
        };
        on_epoch(&metrics, &net);
        history.push(metrics);
    }
    Ok((net, history))
}

fn annotate(e: Error, sample: usize) -> Error {
    match e {
        Error::Config(msg) => Error::Config(alloc::format!("sample {sample}: {msg}")),
        Error::Singular { layer, detail } => Error::Singular {
            layer,
            detail: alloc::format!("{detail} (sample {sample})"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{LayerSpec, RecurrentWeights, SynapseMask};

    #[test]
    fn loss_cases() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(loss(&[35.0, 5.0], &[5.0, 35.0]), 900.0);
        assert_eq!(loss(&[5.0, 35.0, 1.0], &[35.0, 5.0, 2.0]), loss(&[1.0, 35.0, 5.0], &[2.0, 5.0, 35.0]));
    }

    #[test]
    fn labels_follow_config() {
        let c = TrainConfig::default();
        assert_eq!(make_labels(0, 3, &c), vec![35.0, 5.0, 5.0]);
        assert_eq!(make_labels(0, 1, &c), vec![35.0]);
        assert_eq!(make_labels(2, 5, &c).iter().sum::<f64>(), 35.0 + 4.0 * 5.0);
    }

    #[test]
    fn config_rejects_zero_epochs_and_bad_counts() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.check().is_err());
        assert!(TrainConfig { target_count: 5.0, ..TrainConfig::default() }.check().is_err());
        assert!(TrainConfig { reg_lambda: -1.0, ..TrainConfig::default() }.check().is_err());
        assert!(TrainConfig::default().check().is_ok());
    }

    fn tiny() -> Topology {
        let mut t = Topology::new(vec![LayerSpec::input(2), LayerSpec::recurrent(2, 0.5)]).unwrap();
        *t.ff_mut(1) = Matrix::from_rows(&[[1.0, 0.0], [-0.5, 2.0]]);
        let mut mask = SynapseMask::empty(2);
        mask.set(0, 1, true);
        let mut rec = RecurrentWeights::zeros(mask);
        rec.weights[(0, 1)] = 0.25;
        t.recurrent[1] = Some(rec);
        t
    }

    #[test]
    fn regularization_values() {
        let t = tiny();
        assert!(regularization_gradient(&t, 0.0).matrices().all(|m| m.max_abs() == 0.0));
        let g = regularization_gradient(&t, 1e-5);
        assert!((g.ff[0][(0, 0)] - 1e-5 * core::f64::consts::E).abs() < 1e-18);
        assert!((g.ff[0][(0, 0)] - 2.718e-5).abs() < 1e-8);
        assert_eq!(g.ff[0][(0, 1)], 0.0);
        assert!(g.ff[0][(1, 0)] < 0.0);
        let rec = g.rec[1].as_ref().unwrap();
        assert!(rec[(0, 1)] > 0.0);
        assert_eq!(rec[(1, 0)], 0.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_weights() {
        let mut t = tiny();
        let before = t.clone();
        let mut adam = AdamState::new(&t, 1e-3);
        adam.step(&GradientSet::zeros(&t), &mut t).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let mut t = tiny();
        let before = t.clone();
        let mut g = GradientSet::zeros(&t);
        g.ff[0][(0, 0)] = 0.3;
        g.ff[0][(1, 1)] = 0.6;
        let mut adam = AdamState::new(&t, 1e-3);
        adam.step(&g, &mut t).unwrap();
        let d0 = before.ff(1)[(0, 0)] - t.ff(1)[(0, 0)];
        let d1 = before.ff(1)[(1, 1)] - t.ff(1)[(1, 1)];
        assert!((d0 - d1).abs() < 1e-10);
        assert!((d0 - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_learning_rate() {
        let mut t = tiny();
        let mut g = GradientSet::zeros(&t);
        g.ff[0][(0, 0)] = -0.02;
        let mut adam = AdamState::new(&t, 1e-3);
        let mut last = t.ff(1)[(0, 0)];
        let mut step = 0.0;
        for _ in 0..1000 {
            adam.step(&g, &mut t).unwrap();
            step = t.ff(1)[(0, 0)] - last;
            last = t.ff(1)[(0, 0)];
        }
        assert!((step - 1e-3).abs() < 1e-6, "step {step}");
    }

    #[test]
    fn adam_skips_non_finite_and_respects_mask() {
        let mut t = tiny();
        let before = t.clone();
        let mut adam = AdamState::new(&t, 1e-3);
        let mut g = GradientSet::zeros(&t);
        g.ff[0][(0, 0)] = f64::NAN;
        assert!(adam.step(&g, &mut t).is_err());
        assert_eq!((t.clone(), adam.t), (before.clone(), 0));

        let mut g = GradientSet::zeros(&t);
        g.rec[1].as_mut().unwrap()[(1, 0)] = 5.0;
        g.rec[1].as_mut().unwrap()[(0, 1)] = 5.0;
        adam.step(&g, &mut t).unwrap();
        let rec = &t.rec(1).unwrap().weights;
        assert_eq!(rec[(1, 0)], 0.0);
        assert!(rec[(0, 1)] < 0.25);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(predict(&[0, 0, 0]), 0);
        assert_eq!(predict(&[1, 3, 3]), 1);
        assert_eq!(predict(&[2, 1, 0]), 0);
    }

    #[test]
    fn epoch_order_is_reproducible_permutation() {
        let a = epoch_order(20, 7, 3);
        assert_eq!(a, epoch_order(20, 7, 3));
        assert_ne!(a, epoch_order(20, 7, 4));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}
