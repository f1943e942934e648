//! Event CSV spike files.
//!
//! Events are `sample_id,neuron_id,time_ms` lines, labels are
//! `sample_id,label` lines. Both are UTF-8, comma-separated, LF-terminated
//! and have no header. Every labelled sample becomes one
//! [`LabeledSpikeSample`], ordered by sample id. Samples without events are
//! kept with empty trains.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use spiketrain_core::encode::LabeledSpikeSample;
use spiketrain_core::SpikeTrain;

#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{}:{line}: neuron {neuron} out of range for {num_neurons} input neurons", path.display())]
    NeuronOutOfRange {
        path: PathBuf,
        line: usize,
        neuron: usize,
        num_neurons: usize,
    },

    #[error("{}:{line}: time {time_ms} ms outside [0, {duration_ms}) ms", path.display())]
    TimeOutOfRange {
        path: PathBuf,
        line: usize,
        time_ms: f64,
        duration_ms: f64,
    },

    #[error("{}:{line}: sample {sample} has no label", path.display())]
    Unlabelled { path: PathBuf, line: usize, sample: u64 },

    #[error("{}:{line}: sample {sample} labelled twice", path.display())]
    DuplicateLabel { path: PathBuf, line: usize, sample: u64 },
}

fn read(path: &Path) -> Result<String, EventError> {
    fs::read_to_string(path).map_err(|source| EventError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty lines with their 1-based numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn fields<'a, const N: usize>(path: &Path, line: usize, text: &'a str) -> Result<[&'a str; N], EventError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    parts.try_into().map_err(|p: Vec<&str>| EventError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("expected {N} comma-separated fields, found {}", p.len()),
    })
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T, EventError> {
    s.parse().map_err(|_| EventError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {what} {s:?}"),
    })
}

/// Reads the labels file into `sample_id → label`.
pub fn read_labels(path: &Path) -> Result<BTreeMap<u64, usize>, EventError> {
    let text = read(path)?;
    let mut out = BTreeMap::new();
    for (line, l) in lines(&text) {
        let [id, label] = fields::<2>(path, line, l)?;
        let id: u64 = parse(path, line, "sample id", id)?;
        let label: usize = parse(path, line, "label", label)?;
        if out.insert(id, label).is_some() {
            return Err(EventError::DuplicateLabel {
                path: path.to_path_buf(),
                line,
                sample: id,
            });
        }
    }
    Ok(out)
}

/// Loads labelled samples. Times must be whole multiples of `sim_step`.
/// Repeated events are dropped with a warning.
pub fn load_event_csv(
    events: &Path,
    labels: &Path,
    num_neurons: usize,
    duration_ms: f64,
    sim_step: f64,
) -> Result<Vec<LabeledSpikeSample>, EventError> {
    let label_map = read_labels(labels)?;
    let text = read(events)?;
    let mut steps: BTreeMap<u64, Vec<Vec<u32>>> = label_map.keys().map(|&id| (id, vec![Vec::new(); num_neurons])).collect();

    for (line, l) in lines(&text) {
        let [sample, neuron, time] = fields::<3>(events, line, l)?;
        let sample: u64 = parse(events, line, "sample id", sample)?;
        let neuron: usize = parse(events, line, "neuron id", neuron)?;
        let time_ms: f64 = parse(events, line, "time", time)?;
        let Some(trains) = steps.get_mut(&sample) else {
            return Err(EventError::Unlabelled {
                path: events.to_path_buf(),
                line,
                sample,
            });
        };
        if neuron >= num_neurons {
            return Err(EventError::NeuronOutOfRange {
                path: events.to_path_buf(),
                line,
                neuron,
                num_neurons,
            });
        }
        if !(time_ms >= 0.0 && time_ms < duration_ms) {
            return Err(EventError::TimeOutOfRange {
                path: events.to_path_buf(),
                line,
                time_ms,
                duration_ms,
            });
        }
        let step = (time_ms / sim_step).round();
        if (step * sim_step - time_ms).abs() > 1e-9 * sim_step.max(1.0) {
            return Err(EventError::Parse {
                path: events.to_path_buf(),
                line,
                message: format!("time {time_ms} ms is not a multiple of the {sim_step} ms step"),
            });
        }
        trains[neuron].push(step as u32);
    }

    Ok(steps
        .into_iter()
        .map(|(id, trains)| LabeledSpikeSample {
            input: trains
                .into_iter()
                .enumerate()
                .map(|(neuron, t)| {
                    let n = t.len();
                    let train = SpikeTrain::from_unsorted(t);
                    if train.count() < n {
                        log::warn!(
                            "{}: sample {id} neuron {neuron}: dropped {} duplicate events",
                            events.display(),
                            n - train.count()
                        );
                    }
                    train
                })
                .collect(),
            label: label_map[&id],
            duration_ms,
        })
        .collect())
}

/// Event and label file contents for `samples`, numbered from 0.
pub fn format_event_csv(samples: &[LabeledSpikeSample], sim_step: f64) -> (String, String) {
    let mut events = String::new();
    let mut labels = String::new();
    for (id, s) in samples.iter().enumerate() {
        writeln!(labels, "{id},{}", s.label).unwrap();
        let mut all: Vec<(u32, usize)> = s
            .input
            .iter()
            .enumerate()
            .flat_map(|(n, t)| t.steps().iter().map(move |&st| (st, n)))
            .collect();
        all.sort_unstable();
        for (step, neuron) in all {
            writeln!(events, "{id},{neuron},{}", step as f64 * sim_step).unwrap();
        }
    }
    (events, labels)
}

pub fn write_event_csv(
    samples: &[LabeledSpikeSample],
    events: &Path,
    labels: &Path,
    sim_step: f64,
) -> Result<(), EventError> {
    let (ev, lb) = format_event_csv(samples, sim_step);
    let write = |p: &Path, s: String| {
        fs::write(p, s).map_err(|source| EventError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    write(events, ev)?;
    write(labels, lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn files(events: &str, labels: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("events.csv");
        let l = dir.path().join("labels.csv");
        fs::write(&e, events).unwrap();
        fs::write(&l, labels).unwrap();
        (dir, e, l)
    }

    #[test]
    fn empty_files_give_no_samples() {
        let (_d, e, l) = files("", "");
        assert!(load_event_csv(&e, &l, 4, 100.0, 1.0).unwrap().is_empty());
    }

    #[test]
    fn single_event() {
        let (_d, e, l) = files("0,3,17\n", "0,2\n");
        let s = load_event_csv(&e, &l, 4, 100.0, 1.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, 2);
        assert_eq!(s[0].input[3].steps(), &[17]);
        assert!(s[0].input[0].is_empty());
    }

    #[test]
    fn duplicates_are_dropped_and_times_sorted() {
        let (_d, e, l) = files("0,1,9\n0,1,4\n0,1,9\n", "0,0\n");
        let s = load_event_csv(&e, &l, 2, 100.0, 1.0).unwrap();
        assert_eq!(s[0].input[1].steps(), &[4, 9]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let (_d, e, l) = files("0,1,9\n\n0,5,3\n", "0,0\n");
        let err = load_event_csv(&e, &l, 2, 100.0, 1.0).unwrap_err();
        assert!(matches!(err, EventError::NeuronOutOfRange { line: 3, neuron: 5, .. }), "{err}");
        assert!(err.to_string().contains(":3:"));

        let (_d, e, l) = files("0,1,100\n", "0,0\n");
        assert!(matches!(
            load_event_csv(&e, &l, 2, 100.0, 1.0),
            Err(EventError::TimeOutOfRange { line: 1, .. })
        ));
        let (_d, e, l) = files("0,1\n", "0,0\n");
        assert!(matches!(load_event_csv(&e, &l, 2, 100.0, 1.0), Err(EventError::Parse { line: 1, .. })));
        let (_d, e, l) = files("1,1,3\n", "0,0\n");
        assert!(matches!(load_event_csv(&e, &l, 2, 100.0, 1.0), Err(EventError::Unlabelled { sample: 1, .. })));
    }

    #[test]
    fn write_then_read_round_trips() {
        let samples = vec![
            LabeledSpikeSample {
                input: vec![SpikeTrain::from_steps(vec![1, 5]).unwrap(), SpikeTrain::new()],
                label: 1,
                duration_ms: 10.0,
            },
            LabeledSpikeSample {
                input: vec![SpikeTrain::new(), SpikeTrain::new()],
                label: 0,
                duration_ms: 10.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let (e, l) = (dir.path().join("e"), dir.path().join("l"));
        write_event_csv(&samples, &e, &l, 1.0).unwrap();
        assert_eq!(load_event_csv(&e, &l, 2, 10.0, 1.0).unwrap(), samples);
    }
}
