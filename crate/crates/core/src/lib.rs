//! Spike-train level backpropagation for recurrent spiking neural networks.
//!
//! The crate is `no_std` (with `alloc`) and contains the numerical engine:
//!
//! - [`simulate`]: time-stepped leaky integrate-and-fire forward pass.
//! - [`spsp`]: spike-train level post-synaptic potentials (S-PSPs) and their
//!   firing-count derivatives.
//! - [`backprop`]: the backward pass. Recurrent layers are handled by solving
//!   the coupled sensitivity system `(Ω − Θ)·P = Φ` once per layer instead of
//!   unrolling the network in time.
//! - [`optimize`]: rate-coded loss, Adam, weight regularization, the
//!   per-sample training loop and evaluation.
//! - [`encode`]: Poisson encoding and the synthetic rate-coded task.
//! - [`oracle`]: independent reference implementations used for checking the
//!   production path.
//!
//! File formats, configuration and the command line live in the `spiketrain`
//! crate.

#![no_std]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backprop;
pub mod encode;
mod error;
pub mod linalg;
pub mod matrix;
pub mod optimize;
pub mod oracle;
pub mod params;
pub mod simulate;
pub mod spike;
pub mod spsp;
pub mod topology;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use params::NeuronParams;
pub use spike::{Episode, SpikeTrain};
pub use topology::{LayerKind, LayerSpec, SynapseMask, Topology};
