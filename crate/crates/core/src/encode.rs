//! Spike encodings of labelled samples.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spike::SpikeTrain;

/// Input spike trains of one sample with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSpikeSample {
    pub input: Vec<SpikeTrain>,
    pub label: usize,
    pub duration_ms: f64,
}

impl LabeledSpikeSample {
    /// Checks that every spike falls inside `duration_steps` and that the
    /// label is below `num_classes`.
    pub fn check(&self, duration_steps: u32, num_classes: usize) -> Result<()> {
        if self.label >= num_classes {
            return Err(Error::Config(alloc::format!(
                "label {} out of range for {num_classes} classes",
                self.label
            )));
        }
        for (i, t) in self.input.iter().enumerate() {
            if let Some(&s) = t.steps().last() {
                if s >= duration_steps {
                    return Err(Error::InputOutOfRange {
                        neuron: i,
                        step: s,
                        steps: duration_steps,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One Bernoulli trial per neuron and time step with probability
/// `scale · intensity / 255`. Neurons are drawn in order from a single
/// generator seeded with `seed`.
pub fn poisson_encode(pixels: &[u8], steps: u32, scale: f64, seed: u64) -> Vec<SpikeTrain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pixels
        .iter()
        .map(|&px| {
            let p = scale * px as f64 / 255.0;
            let mut train = SpikeTrain::new();
            if p > 0.0 {
                for t in 0..steps {
                    if rng.gen::<f64>() < p {
                        train.push(t);
                    }
                }
            }
            train
        })
        .collect()
}

/// Independent Bernoulli spike trains with a per-neuron probability per step.
pub fn bernoulli_trains(probabilities: &[f64], steps: u32, rng: &mut impl Rng) -> Vec<SpikeTrain> {
    probabilities
        .iter()
        .map(|&p| {
            let mut train = SpikeTrain::new();
            for t in 0..steps {
                if rng.gen::<f64>() < p {
                    train.push(t);
                }
            }
            train
        })
        .collect()
}

/// Settings of the synthetic rate-coded classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub num_inputs: usize,
    pub duration_ms: f64,
    pub samples_per_class: usize,
    pub high_rate_hz: f64,
    pub low_rate_hz: f64,
    /// Fraction of inputs firing at the high rate in each class template.
    pub high_fraction: f64,
    pub sim_step: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_inputs: 30,
            duration_ms: 500.0,
            samples_per_class: 50,
            high_rate_hz: 80.0,
            low_rate_hz: 10.0,
            high_fraction: 1.0 / 3.0,
            sim_step: 1.0,
        }
    }
}

/// Minimum fraction of inputs on which any two class templates disagree.
pub const MIN_TEMPLATE_DISTANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `templates[c][i]`: whether input `i` fires at the high rate for class
    /// `c`.
    pub templates: Vec<Vec<bool>>,
    pub train: Vec<LabeledSpikeSample>,
    pub test: Vec<LabeledSpikeSample>,
}

/// Draws one high/low rate template per class (redrawing until every pair
/// differs on at least a quarter of the inputs), then Poisson samples from
/// each template. Each class is split 80/20 into train and test.
pub fn make_synthetic_rate_task(task: &SyntheticTask, seed: u64) -> Result<SyntheticDataset> {
    if task.num_classes < 2 {
        return Err(Error::Config("synthetic task needs at least two classes".into()));
    }
    let high = libm::round(task.high_fraction * task.num_inputs as f64) as usize;
    let required = libm::ceil(MIN_TEMPLATE_DISTANCE * task.num_inputs as f64) as usize;
    if high == 0 || high >= task.num_inputs {
        return Err(Error::Config("high_fraction must leave both high and low inputs".into()));
    }
    let steps = libm::round(task.duration_ms / task.sim_step) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut templates: Vec<Vec<bool>> = Vec::with_capacity(task.num_classes);
    let mut attempts = 0;
    while templates.len() < task.num_classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config("could not draw sufficiently distinct class templates".into()));
        }
        let mut t = vec![false; task.num_inputs];
        for i in rand::seq::index::sample(&mut rng, task.num_inputs, high).iter() {
            t[i] = true;
        }
        let distinct = templates
            .iter()
            .all(|o| o.iter().zip(&t).filter(|(a, b)| a != b).count() >= required);
        if distinct {
            templates.push(t);
        }
    }

    let per_step = |hz: f64| hz * task.sim_step / 1000.0;
    let n_train = (task.samples_per_class * 4).div_ceil(5);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, template) in templates.iter().enumerate() {
        let probs: Vec<f64> = template
            .iter()
            .map(|&h| per_step(if h { task.high_rate_hz } else { task.low_rate_hz }))
            .collect();
        for s in 0..task.samples_per_class {
            let sample = LabeledSpikeSample {
                input: bernoulli_trains(&probs, steps, &mut rng),
                label,
                duration_ms: task.duration_ms,
            };
            if s < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(SyntheticDataset { templates, train, test })
}
