//! gwperc: supercritical Galton-Watson trees as reproducible quenched
//! environments, critical Bernoulli percolation on them, and Monte Carlo
//! verification of the associated limit laws (survival scaling, the
//! conditioned generation-size limit, branching-process convergence, and
//! the conditioned-to-survive cluster's size-biased marginal) against
//! their closed forms.
//!
//! Everything is driven by counter-based randomness: trees, runs and
//! samples are pure functions of seeds and indices, so experiments are
//! reproducible bit-for-bit at any degree of parallelism.

pub mod csbp;
pub mod estimators;
pub mod harness;
pub mod iic;
pub mod limit_laws;
pub mod numerics;
pub mod offspring;
pub mod percolation;
pub mod rng;
pub mod tree;
