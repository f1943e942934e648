//! TOML run configuration. Unknown keys are rejected; every omitted key
//! takes its default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use spiketrain_core::backprop::Solver;
use spiketrain_core::encode::SyntheticTask;
use spiketrain_core::optimize::TrainConfig;
use spiketrain_core::spsp::DerivativeEstimator;
use spiketrain_core::topology::validate;
use spiketrain_core::{LayerSpec, NeuronParams, Topology};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub neuron: NeuronSection,
    pub layers: Vec<LayerSection>,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronSection {
    pub tau_m: f64,
    pub tau_s: f64,
    /// One per non-input layer; a single value is broadcast.
    pub thresholds: Vec<f64>,
    pub refractory: f64,
    pub reset_voltage: f64,
    pub synaptic_delay: f64,
    pub sim_step: f64,
}

impl Default for NeuronSection {
    fn default() -> Self {
        let p = NeuronParams::default();
        Self {
            tau_m: p.tau_m,
            tau_s: p.tau_s,
            thresholds: vec![spiketrain_core::params::DEFAULT_THRESHOLD],
            refractory: p.refractory,
            reset_voltage: p.reset_voltage,
            synaptic_delay: p.synaptic_delay,
            sim_step: p.sim_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKindName {
    Input,
    Feedforward,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub kind: LayerKindName,
    pub size: usize,
    #[serde(default)]
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverName {
    Exact,
    Taylor,
}

impl From<SolverName> for Solver {
    fn from(s: SolverName) -> Self {
        match s {
            SolverName::Exact => Solver::Exact,
            SolverName::Taylor => Solver::Taylor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorName {
    PreRate,
    RateProportional,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub target_count: f64,
    pub nontarget_count: f64,
    pub reg_lambda: f64,
    pub inhibition_weight: f64,
    pub solver: SolverName,
    pub estimator: EstimatorName,
    pub silent_readout: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: 20,
            target_count: t.target_count,
            nontarget_count: t.nontarget_count,
            reg_lambda: t.reg_lambda,
            inhibition_weight: t.inhibition_weight,
            solver: SolverName::Exact,
            estimator: EstimatorName::PreRate,
            silent_readout: t.silent_readout,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    Synthetic {
        #[serde(default = "defaults::classes")]
        num_classes: usize,
        #[serde(default = "defaults::inputs")]
        num_inputs: usize,
        #[serde(default = "defaults::synthetic_duration")]
        duration_ms: f64,
        #[serde(default = "defaults::per_class")]
        samples_per_class: usize,
        #[serde(default = "defaults::high_rate")]
        high_rate_hz: f64,
        #[serde(default = "defaults::low_rate")]
        low_rate_hz: f64,
        #[serde(default = "defaults::high_fraction")]
        high_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        #[serde(default = "defaults::idx_duration")]
        duration_ms: f64,
        #[serde(default = "defaults::scale")]
        scale: f64,
        limit_train: Option<usize>,
        limit_test: Option<usize>,
    },
    Events {
        train_events: PathBuf,
        train_labels: PathBuf,
        test_events: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        duration_ms: f64,
    },
}

mod defaults {
    use spiketrain_core::encode::SyntheticTask;

    pub fn classes() -> usize {
        SyntheticTask::default().num_classes
    }
    pub fn inputs() -> usize {
        SyntheticTask::default().num_inputs
    }
    pub fn synthetic_duration() -> f64 {
        SyntheticTask::default().duration_ms
    }
    pub fn per_class() -> usize {
        SyntheticTask::default().samples_per_class
    }
    pub fn high_rate() -> f64 {
        SyntheticTask::default().high_rate_hz
    }
    pub fn low_rate() -> f64 {
        SyntheticTask::default().low_rate_hz
    }
    pub fn high_fraction() -> f64 {
        SyntheticTask::default().high_fraction
    }
    pub fn idx_duration() -> f64 {
        400.0
    }
    pub fn scale() -> f64 {
        0.25
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message().trim())))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSection::Synthetic { .. } => {}
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(train_images);
                fix(train_labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            DataSection::Events {
                train_events,
                train_labels,
                test_events,
                test_labels,
                ..
            } => {
                fix(train_events);
                fix(train_labels);
                test_events.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
        }
        fix(&mut self.output.dir);
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKindName::Input => LayerSpec::input(l.size),
                LayerKindName::Feedforward => LayerSpec::feedforward(l.size),
                LayerKindName::Recurrent => LayerSpec::recurrent(l.size, l.density),
            })
            .collect()
    }

    pub fn neuron_params(&self) -> NeuronParams {
        let n = &self.neuron;
        let trainable = self.layers.len().saturating_sub(1);
        let thresholds = if n.thresholds.len() == 1 {
            vec![n.thresholds[0]; trainable]
        } else {
            n.thresholds.clone()
        };
        NeuronParams {
            tau_m: n.tau_m,
            tau_s: n.tau_s,
            thresholds,
            refractory: n.refractory,
            reset_voltage: n.reset_voltage,
            synaptic_delay: n.synaptic_delay,
            sim_step: n.sim_step,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            target_count: t.target_count,
            nontarget_count: t.nontarget_count,
            epochs: t.epochs,
            reg_lambda: t.reg_lambda,
            inhibition_weight: t.inhibition_weight,
            solver: t.solver.into(),
            estimator: match t.estimator {
                EstimatorName::PreRate => DerivativeEstimator::PreRateOnly,
                EstimatorName::RateProportional => DerivativeEstimator::RateProportional,
            },
            silent_readout: t.silent_readout,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            eval_every: t.eval_every,
            seed: self.seed,
        }
    }

    pub fn synthetic_task(&self) -> Option<SyntheticTask> {
        match self.data {
            DataSection::Synthetic {
                num_classes,
                num_inputs,
                duration_ms,
                samples_per_class,
                high_rate_hz,
                low_rate_hz,
                high_fraction,
            } => Some(SyntheticTask {
                num_classes,
                num_inputs,
                duration_ms,
                samples_per_class,
                high_rate_hz,
                low_rate_hz,
                high_fraction,
                sim_step: self.neuron.sim_step,
            }),
            _ => None,
        }
    }

    /// Duration of one sample in ms.
    pub fn duration_ms(&self) -> f64 {
        match self.data {
            DataSection::Synthetic { duration_ms, .. }
            | DataSection::Idx { duration_ms, .. }
            | DataSection::Events { duration_ms, .. } => duration_ms,
        }
    }

    /// Files the data section refers to.
    pub fn data_paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        match &self.data {
            DataSection::Synthetic { .. } => {}
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                out.extend([train_images.as_path(), train_labels.as_path()]);
                out.extend(test_images.iter().chain(test_labels).map(PathBuf::as_path));
            }
            DataSection::Events {
                train_events,
                train_labels,
                test_events,
                test_labels,
                ..
            } => {
                out.extend([train_events.as_path(), train_labels.as_path()]);
                out.extend(test_events.iter().chain(test_labels).map(PathBuf::as_path));
            }
        }
        out
    }

    /// Network, constant, training and data checks; the data files must
    /// exist.
    pub fn check(&self) -> Result<(), CliError> {
        let topology = Topology::new(self.layer_specs())?;
        let params = self.neuron_params();
        let mut problems: Vec<String> = validate(&topology, &params).iter().map(ToString::to_string).collect();
        if let Err(e) = self.train_config().check() {
            problems.push(format!("train: {e}"));
        }
        if self.neuron.thresholds.is_empty() {
            problems.push("neuron.thresholds: at least one value".into());
        }
        if params.steps_exact(self.duration_ms()).is_none_or(|s| s == 0) {
            problems.push(format!(
                "data.duration_ms: {} is not a positive multiple of the simulation step",
                self.duration_ms()
            ));
        }
        match &self.data {
            DataSection::Synthetic { num_classes, num_inputs, .. } => {
                if *num_inputs != topology.size(0) {
                    problems.push(format!("data.num_inputs {num_inputs} != input layer size {}", topology.size(0)));
                }
                if *num_classes != topology.size(topology.output_layer()) {
                    problems.push(format!(
                        "data.num_classes {num_classes} != output layer size {}",
                        topology.size(topology.output_layer())
                    ));
                }
            }
            DataSection::Idx {
                scale,
                test_images,
                test_labels,
                ..
            } => {
                if !(0.0..=1.0).contains(scale) {
                    problems.push("data.scale must lie in [0, 1]".into());
                }
                if test_images.is_some() != test_labels.is_some() {
                    problems.push("data: test_images and test_labels go together".into());
                }
            }
            DataSection::Events {
                test_events,
                test_labels,
                ..
            } => {
                if test_events.is_some() != test_labels.is_some() {
                    problems.push("data: test_events and test_labels go together".into());
                }
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Validation(problems.join("; ")));
        }
        for p in self.data_paths() {
            if !p.exists() {
                return Err(CliError::Data(format!("dataset file not found: {}", p.display())));
            }
        }
        Ok(())
    }
}
