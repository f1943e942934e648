use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Spike times of one neuron over one episode, as simulation step indices
/// (time in ms is `step · sim_step`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SpikeTrain(Vec<u32>);

impl SpikeTrain {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Fails unless `steps` is strictly increasing.
    pub fn from_steps(steps: Vec<u32>) -> Result<Self> {
        if let Some(i) = steps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::UnorderedSpikes(i + 1));
        }
        Ok(Self(steps))
    }

    /// Sorts and removes duplicates.
    pub fn from_unsorted(mut steps: Vec<u32>) -> Self {
        steps.sort_unstable();
        steps.dedup();
        Self(steps)
    }

    /// Caller guarantees ordering; used by the simulator, which emits steps in
    /// order.
    pub(crate) fn push(&mut self, step: u32) {
        debug_assert!(self.0.last().is_none_or(|&l| l < step));
        self.0.push(step);
    }

    #[inline]
    pub fn steps(&self) -> &[u32] {
        &self.0
    }

    /// Firing count `o`.
    #[inline]
    pub fn count(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn times_ms(&self, sim_step: f64) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(move |&s| s as f64 * sim_step)
    }

    /// Smallest gap between consecutive spikes, in steps.
    pub fn min_interval(&self) -> Option<u32> {
        self.0.windows(2).map(|w| w[1] - w[0]).min()
    }
}

impl AsRef<[u32]> for SpikeTrain {
    fn as_ref(&self) -> &[u32] {
        &self.0
    }
}

/// Full forward record of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub duration_steps: u32,
    /// `trains[k][i]`: spike train of neuron `i` in layer `k` (layer 0 is the
    /// input).
    pub trains: Vec<Vec<SpikeTrain>>,
    /// `counts[k][i] == trains[k][i].count()`.
    pub counts: Vec<Vec<usize>>,
    /// T-PSPs per layer; empty until filled by [`crate::spsp::fill_tpsp`],
    /// and always empty for the input layer.
    pub tpsp: Vec<Vec<f64>>,
}

impl Episode {
    pub fn new(duration_steps: u32, trains: Vec<Vec<SpikeTrain>>) -> Self {
        let counts = trains
            .iter()
            .map(|layer| layer.iter().map(SpikeTrain::count).collect())
            .collect();
        let tpsp = trains.iter().map(|_| Vec::new()).collect();
        Self {
            duration_steps,
            trains,
            counts,
            tpsp,
        }
    }

    pub fn output_counts(&self) -> &[usize] {
        self.counts.last().map_or(&[], Vec::as_slice)
    }

    /// Output counts as reals, for the loss and output error.
    pub fn output_counts_f64(&self) -> Vec<f64> {
        self.output_counts().iter().map(|&c| c as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_unordered_steps() {
        assert_eq!(SpikeTrain::from_steps(vec![1, 3, 3]), Err(Error::UnorderedSpikes(2)));
        assert!(SpikeTrain::from_steps(vec![]).is_ok());
        assert_eq!(SpikeTrain::from_unsorted(vec![5, 1, 5]).steps(), &[1, 5]);
    }

    #[test]
    fn counts_follow_trains() {
        let t = SpikeTrain::from_steps(vec![0, 4, 9]).unwrap();
        let ep = Episode::new(10, vec![vec![t.clone()], vec![SpikeTrain::new(), t]]);
        assert_eq!(ep.counts, vec![vec![3], vec![0, 3]]);
        assert_eq!(ep.output_counts_f64(), vec![0.0, 3.0]);
    }
}
