//! Spike-train level post-synaptic potentials.
//!
//! The S-PSP `e_lj` collects the kernel contributions of pre-synaptic neuron
//! `j` to the potential of post-synaptic neuron `l`, evaluated right before
//! each of `l`'s firing times. Because firing resets the membrane, a
//! pre-synaptic spike only counts toward the first post-synaptic spike at or
//! after its arrival, and only if it arrived after the previous reset and
//! outside the refractory period that followed it. With this definition the
//! T-PSP `a_l = Σ_j w_lj e_lj` equals the sum of the potentials that crossed
//! threshold, which is what makes `o ≈ a/ν` hold.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::NeuronParams;
use crate::simulate::KernelTable;
use crate::spike::{Episode, SpikeTrain};
use crate::topology::Topology;

/// S-PSPs between one pre-synaptic and one post-synaptic population, with the
/// firing-count derivative estimates the backward pass needs. All matrices
/// are shaped post × pre.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsapBlock {
    pub e: Matrix,
    /// `∂e_lj/∂o_j`
    pub de_dpre: Matrix,
    /// `∂e_lj/∂o_l`
    pub de_dpost: Matrix,
}

impl SpsapBlock {
    pub fn zeros(post: usize, pre: usize) -> Self {
        Self {
            e: Matrix::zeros(post, pre),
            de_dpre: Matrix::zeros(post, pre),
            de_dpost: Matrix::zeros(post, pre),
        }
    }

    fn shape(&self) -> (usize, usize) {
        self.e.shape()
    }
}

/// Tableau entries for one non-input layer: the block from the previous
/// layer and, for recurrent layers, the intra-layer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTableau {
    pub ff: SpsapBlock,
    pub rec: Option<SpsapBlock>,
}

/// S-PSPs and derivative estimates for every layer pair of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsapTableau {
    /// Index `k - 1` holds layer `k`.
    layers: Vec<LayerTableau>,
}

impl SpsapTableau {
    /// Checks shapes against `topology`.
    pub fn from_layers(topology: &Topology, layers: Vec<LayerTableau>) -> Result<Self> {
        if layers.len() != topology.num_layers() - 1 {
            return Err(Error::Shape {
                context: "tableau layers",
                expected: topology.num_layers() - 1,
                actual: layers.len(),
            });
        }
        for (i, lt) in layers.iter().enumerate() {
            let k = i + 1;
            let expected = (topology.size(k), topology.size(k - 1));
            if lt.ff.shape() != expected {
                return Err(Error::Shape {
                    context: "tableau feedforward block",
                    expected: expected.0 * expected.1,
                    actual: lt.ff.e.rows() * lt.ff.e.cols(),
                });
            }
            match (&lt.rec, topology.is_recurrent(k)) {
                (None, false) => {}
                (Some(b), true) if b.shape() == (topology.size(k), topology.size(k)) => {}
                _ => {
                    return Err(Error::Shape {
                        context: "tableau recurrent block",
                        expected: topology.size(k) * topology.size(k),
                        actual: lt.rec.as_ref().map_or(0, |b| b.e.rows() * b.e.cols()),
                    })
                }
            }
        }
        Ok(Self { layers })
    }

    /// Tableau of layer `k ≥ 1`.
    #[inline]
    pub fn layer(&self, k: usize) -> &LayerTableau {
        &self.layers[k - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() + 1
    }
}

/// Estimates of how an S-PSP responds to the firing counts at either end of
/// the synapse.
pub trait SpsapDerivatives {
    fn de_dpre(&self, e: f64, o_pre: usize, o_post: usize) -> f64;
    fn de_dpost(&self, e: f64, o_pre: usize, o_post: usize) -> f64;
}

/// `∂e/∂o_pre = e/o_pre` and `∂e/∂o_post = e/o_post` (zero when the count is
/// zero): every spike contributes the average share.
///
/// With `o_post ≈ a/ν` this makes `Σ_j w_lj ∂e_lj/∂o_l ≈ ν`, so the diagonal
/// of the recurrent system sits near zero on simulated data; see
/// [`PreRateOnly`] for the estimator used in training.
#[derive(Debug, Clone, Copy, Default)]
pub struct RateProportional;

impl SpsapDerivatives for RateProportional {
    fn de_dpre(&self, e: f64, o_pre: usize, _o_post: usize) -> f64 {
        if o_pre == 0 {
            0.0
        } else {
            e / o_pre as f64
        }
    }

    fn de_dpost(&self, e: f64, _o_pre: usize, o_post: usize) -> f64 {
        if o_post == 0 {
            0.0
        } else {
            e / o_post as f64
        }
    }
}

/// `∂e/∂o_pre = e/o_pre`, `∂e/∂o_post = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PreRateOnly;

impl SpsapDerivatives for PreRateOnly {
    fn de_dpre(&self, e: f64, o_pre: usize, o_post: usize) -> f64 {
        RateProportional.de_dpre(e, o_pre, o_post)
    }

    fn de_dpost(&self, _e: f64, _o_pre: usize, _o_post: usize) -> f64 {
        0.0
    }
}

/// Selects an estimator at run time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DerivativeEstimator {
    #[default]
    PreRateOnly,
    RateProportional,
}

impl SpsapDerivatives for DerivativeEstimator {
    fn de_dpre(&self, e: f64, o_pre: usize, o_post: usize) -> f64 {
        match self {
            Self::PreRateOnly => PreRateOnly.de_dpre(e, o_pre, o_post),
            Self::RateProportional => RateProportional.de_dpre(e, o_pre, o_post),
        }
    }

    fn de_dpost(&self, e: f64, o_pre: usize, o_post: usize) -> f64 {
        match self {
            Self::PreRateOnly => PreRateOnly.de_dpost(e, o_pre, o_post),
            Self::RateProportional => RateProportional.de_dpost(e, o_pre, o_post),
        }
    }
}

/// S-PSP from `pre` to `post`.
pub fn compute_spsp(pre: &SpikeTrain, post: &SpikeTrain, params: &NeuronParams) -> f64 {
    let last = post.steps().last().copied().unwrap_or(0);
    spsp_with_table(pre, post, params, &KernelTable::new(params, last))
}

/// Merge walk over both trains: each pre-synaptic arrival is charged to the
/// first post-synaptic spike at or after it, if it fell inside that spike's
/// integration window.
fn spsp_with_table(pre: &SpikeTrain, post: &SpikeTrain, params: &NeuronParams, table: &KernelTable) -> f64 {
    let post = post.steps();
    if post.is_empty() || pre.is_empty() {
        return 0.0;
    }
    let delay = params.delay_steps();
    let blocked = params.refractory_steps().max(1);

    let mut total = 0.0;
    let mut f = 0;
    for &s in pre.steps() {
        let arrival = s + delay;
        while f < post.len() && post[f] < arrival {
            f += 1;
        }
        if f == post.len() {
            break;
        }
        let window_start = if f == 0 { 0 } else { post[f - 1] + blocked };
        if arrival >= window_start {
            total += table.at(post[f] - arrival);
        }
    }
    total
}

fn spsp_block(
    pre: &[SpikeTrain],
    post: &[SpikeTrain],
    params: &NeuronParams,
    table: &KernelTable,
    estimator: &impl SpsapDerivatives,
    readout: Option<&SpikeTrain>,
) -> SpsapBlock {
    let mut block = SpsapBlock::zeros(post.len(), pre.len());
    for (l, post_train) in post.iter().enumerate() {
        let o_post = post_train.count();
        let window = match (post_train.is_empty(), readout) {
            (false, _) => post_train,
            (true, Some(r)) => r,
            (true, None) => continue,
        };
        for (j, pre_train) in pre.iter().enumerate() {
            let e = spsp_with_table(pre_train, window, params, table);
            if e == 0.0 {
                continue;
            }
            let o_pre = pre_train.count();
            block.e[(l, j)] = e;
            block.de_dpre[(l, j)] = estimator.de_dpre(e, o_pre, o_post);
            block.de_dpost[(l, j)] = estimator.de_dpost(e, o_pre, o_post);
        }
    }
    block
}

/// Tableau with the rate-proportional derivative estimates.
pub fn compute_tableau(episode: &Episode, topology: &Topology, params: &NeuronParams) -> Result<SpsapTableau> {
    compute_tableau_with(episode, topology, params, &RateProportional)
}

pub fn compute_tableau_with(
    episode: &Episode,
    topology: &Topology,
    params: &NeuronParams,
    estimator: &impl SpsapDerivatives,
) -> Result<SpsapTableau> {
    compute_tableau_readout(episode, topology, params, estimator, false)
}

/// Like [`compute_tableau_with`]. With `silent_readout`, a neuron that never
/// fired gets S-PSPs read out at the last step of the episode as if it had
/// fired there, so its T-PSP is the potential it built up without reaching
/// threshold. Its firing count stays 0. Without this a silent neuron has
/// all-zero S-PSPs and its incoming weights receive no gradient.
pub fn compute_tableau_readout(
    episode: &Episode,
    topology: &Topology,
    params: &NeuronParams,
    estimator: &impl SpsapDerivatives,
    silent_readout: bool,
) -> Result<SpsapTableau> {
    if episode.trains.len() != topology.num_layers() {
        return Err(Error::Shape {
            context: "episode layers",
            expected: topology.num_layers(),
            actual: episode.trains.len(),
        });
    }
    for (k, trains) in episode.trains.iter().enumerate() {
        if trains.len() != topology.size(k) {
            return Err(Error::Shape {
                context: "episode layer size",
                expected: topology.size(k),
                actual: trains.len(),
            });
        }
    }
    let table = KernelTable::new(params, episode.duration_steps);
    let readout = (silent_readout && episode.duration_steps > 0)
        .then(|| SpikeTrain::from_steps(alloc::vec![episode.duration_steps - 1]).expect("single step"));
    let readout = readout.as_ref();
    let layers = (1..topology.num_layers())
        .map(|k| LayerTableau {
            ff: spsp_block(&episode.trains[k - 1], &episode.trains[k], params, &table, estimator, readout),
            rec: topology
                .is_recurrent(k)
                .then(|| spsp_block(&episode.trains[k], &episode.trains[k], params, &table, estimator, readout)),
        })
        .collect();
    SpsapTableau::from_layers(topology, layers)
}

/// T-PSP of every neuron in layer `k ≥ 1`:
/// `a_l = Σ_j w_lj e_lj + Σ_p w_lp e_lp`, the second sum only for recurrent
/// layers.
pub fn compute_tpsp(tableau: &SpsapTableau, topology: &Topology, k: usize) -> Vec<f64> {
    let lt = tableau.layer(k);
    let w = topology.ff(k);
    (0..topology.size(k))
        .map(|l| {
            let mut a: f64 = w.row(l).iter().zip(lt.ff.e.row(l)).map(|(w, e)| w * e).sum();
            if let (Some(rec), Some(block)) = (topology.rec(k), &lt.rec) {
                a += rec.weights.row(l).iter().zip(block.e.row(l)).map(|(w, e)| w * e).sum::<f64>();
            }
            a
        })
        .collect()
}

/// Stores the T-PSPs of every non-input layer in `episode.tpsp`.
pub fn fill_tpsp(episode: &mut Episode, tableau: &SpsapTableau, topology: &Topology) {
    for k in 1..topology.num_layers() {
        episode.tpsp[k] = compute_tpsp(tableau, topology, k);
    }
}

/// Firing count predicted from a T-PSP, `a/ν`.
#[inline]
pub fn activation(a: f64, threshold: f64) -> f64 {
    a / threshold
}
