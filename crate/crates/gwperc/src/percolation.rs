//! Critical Bernoulli edge percolation with retention 1/mu, either on a
//! fixed `TreeStore` (quenched) or on a fresh tree per run (annealed,
//! which is exactly a critical GW tree by thinning).
//!
//! Edge randomness is keyed by (master seed, run index, edge), so any
//! single run can be reproduced in isolation and results do not depend
//! on scheduling. Tree randomness lives in a different domain entirely.

use std::collections::BTreeMap;

use rand::distributions::Distribution;
use thiserror::Error;

use crate::offspring::{sample_offspring, Model};
use crate::rng::{bernoulli_threshold, Key, Stream, StreamRng, DOMAIN_PERC};
use crate::tree::{NodeRef, TreeStore};

const TAG_EDGE_WORD: u64 = 0x6564_6765;
const TAG_SEQ_STREAM: u64 = 0x7365_7175;
/// Per-run work cap; pathological runs abort rather than stall a batch.
pub const DEFAULT_NODE_CAP: u64 = 10_000_000;
/// Above this offspring count, thinning goes through the exact binomial
/// sampler instead of per-edge Bernoulli draws.
const BINOMIAL_CUTOVER: u64 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum PercolationError {
    #[error("run aborted: node-visit cap {cap} exceeded")]
    RunAborted { cap: u64 },
    #[error("invalid levels: require 0 <= m <= n, got m={m}, n={n}")]
    InvalidLevels { m: u32, n: u32 },
}

/// Randomness handle for one percolation run, keyed by
/// (master seed, run index).
#[derive(Clone, Copy, Debug)]
pub struct RunRng {
    key: Key,
}

impl RunRng {
    pub fn new(master_seed: u64, run_index: u64) -> Self {
        RunRng { key: Key::new(DOMAIN_PERC, master_seed).absorb(run_index) }
    }

    /// Word mixed into every edge key of this run.
    pub(crate) fn edge_word(&self) -> u64 {
        self.key.draw(TAG_EDGE_WORD)
    }

    /// Sequential stream for draws that are not edge-indexed (annealed
    /// offspring and thinning).
    pub(crate) fn stream(&self) -> Stream {
        Stream::from_key(self.key.absorb(TAG_SEQ_STREAM))
    }
}

/// One percolation run: root-cluster level counts Y_0..Y_n_max.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTrace {
    pub n_max: u32,
    pub counts: Vec<u64>,
    pub survival: bool,
    pub level_sets: Option<BTreeMap<u32, Vec<NodeRef>>>,
}

impl ClusterTrace {
    pub fn y(&self, level: u32) -> u64 {
        self.counts[level as usize]
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Levels whose cluster vertices should be recorded explicitly.
    pub level_sets_for: Vec<u32>,
    pub node_cap: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { level_sets_for: Vec::new(), node_cap: DEFAULT_NODE_CAP }
    }
}

/// Quenched run on a fixed tree.
pub fn run_cluster(
    store: &TreeStore,
    n_max: u32,
    rng: &RunRng,
) -> Result<ClusterTrace, PercolationError> {
    run_cluster_opts(store, n_max, rng, &RunOptions::default())
}

pub fn run_cluster_opts(
    store: &TreeStore,
    n_max: u32,
    rng: &RunRng,
    opts: &RunOptions,
) -> Result<ClusterTrace, PercolationError> {
    let pc = bernoulli_threshold(store.constants().p_c);
    let edge_word = rng.edge_word();
    let track_paths = !opts.level_sets_for.is_empty();

    let mut counts = Vec::with_capacity(n_max as usize + 1);
    counts.push(1u64);
    let mut frontier: Vec<Key> = vec![store.root_key()];
    let mut paths: Vec<NodeRef> = if track_paths { vec![NodeRef::root()] } else { Vec::new() };
    let mut level_sets: BTreeMap<u32, Vec<NodeRef>> = BTreeMap::new();
    if track_paths && opts.level_sets_for.contains(&0) {
        level_sets.insert(0, paths.clone());
    }

    let mut visits = 0u64;
    for level in 0..n_max {
        let mut next = Vec::with_capacity(frontier.len() + frontier.len() / 2 + 4);
        let mut next_paths = Vec::new();
        for (slot, &key) in frontier.iter().enumerate() {
            let d = store.offspring_at(key);
            visits = visits.saturating_add(d);
            if visits > opts.node_cap {
                return Err(PercolationError::RunAborted { cap: opts.node_cap });
            }
            for i in 0..d {
                let child = key.child(i);
                if child.draw(edge_word) < pc {
                    next.push(child);
                    if track_paths {
                        next_paths.push(paths[slot].child(i));
                    }
                }
            }
        }
        counts.push(next.len() as u64);
        frontier = next;
        if track_paths {
            paths = next_paths;
            if opts.level_sets_for.contains(&(level + 1)) {
                level_sets.insert(level + 1, paths.clone());
            }
        }
        if frontier.is_empty() {
            counts.resize(n_max as usize + 1, 0);
            break;
        }
    }

    let survival = counts[n_max as usize] > 0;
    Ok(ClusterTrace {
        n_max,
        counts,
        survival,
        level_sets: if track_paths { Some(level_sets) } else { None },
    })
}

#[inline]
fn thin(j: u64, p: f64, pc_threshold: u64, stream: &mut Stream) -> u64 {
    if j <= BINOMIAL_CUTOVER {
        (0..j).filter(|_| stream.bernoulli(pc_threshold)).count() as u64
    } else {
        let bin = rand_distr::Binomial::new(j, p).expect("valid binomial parameters");
        bin.sample(&mut StreamRng(stream))
    }
}

/// Annealed run: the root cluster of a fresh tree, simulated directly as
/// a critical GW tree with thinned offspring.
pub fn run_annealed(
    model: &Model,
    n_max: u32,
    rng: &RunRng,
) -> Result<ClusterTrace, PercolationError> {
    run_annealed_opts(model, n_max, rng, DEFAULT_NODE_CAP)
}

pub fn run_annealed_opts(
    model: &Model,
    n_max: u32,
    rng: &RunRng,
    node_cap: u64,
) -> Result<ClusterTrace, PercolationError> {
    let p = model.constants.p_c;
    let pc = bernoulli_threshold(p);
    let mut stream = rng.stream();
    let mut counts = Vec::with_capacity(n_max as usize + 1);
    counts.push(1u64);
    let mut y = 1u64;
    let mut visits = 0u64;
    for _ in 0..n_max {
        let mut next = 0u64;
        for _ in 0..y {
            let j = sample_offspring(&model.spec, &mut stream);
            visits = visits.saturating_add(j);
            if visits > node_cap {
                return Err(PercolationError::RunAborted { cap: node_cap });
            }
            next += thin(j, p, pc, &mut stream);
        }
        counts.push(next);
        y = next;
        if y == 0 {
            counts.resize(n_max as usize + 1, 0);
            break;
        }
    }
    let survival = counts[n_max as usize] > 0;
    Ok(ClusterTrace { n_max, counts, survival, level_sets: None })
}

/// Count the open-descendant vertices `levels` below a cluster vertex,
/// i.e. an unconditioned quenched percolation cluster grown from `root`.
/// Used for the off-spine subtrees of the conditioned cluster sampler.
pub(crate) fn cluster_descendants_at(
    store: &TreeStore,
    root: Key,
    levels: u32,
    edge_word: u64,
    node_cap: u64,
) -> Result<u64, PercolationError> {
    let pc = bernoulli_threshold(store.constants().p_c);
    let mut frontier = vec![root];
    let mut visits = 0u64;
    for _ in 0..levels {
        let mut next = Vec::with_capacity(frontier.len() + 4);
        for &key in &frontier {
            let d = store.offspring_at(key);
            visits = visits.saturating_add(d);
            if visits > node_cap {
                return Err(PercolationError::RunAborted { cap: node_cap });
            }
            for i in 0..d {
                let child = key.child(i);
                if child.draw(edge_word) < pc {
                    next.push(child);
                }
            }
        }
        if next.is_empty() {
            return Ok(0);
        }
        frontier = next;
    }
    Ok(frontier.len() as u64)
}

/// Lower level prescribed for the connector diagnostic:
/// m(n) = floor((1+eps) log n / ((alpha-1) log mu)) with eps = (alpha-1)/2,
/// so that mu^m grows like n^((1+eps)/(alpha-1)).
pub fn connector_level(constants: &crate::offspring::ModelConstants, n: u32) -> u32 {
    let alpha = constants.alpha;
    let eps = (alpha - 1.0) / 2.0;
    let m = ((1.0 + eps) / ((alpha - 1.0) * constants.mu.ln()) * (n as f64).ln()).floor();
    (m.max(0.0) as u32).min(n)
}

/// Outcome of the single-connector diagnostic: among surviving runs, how
/// many level-m cluster vertices carry an open monotone path to level n.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ConnectorStats {
    pub n: u32,
    pub m: u32,
    pub total_runs: u64,
    pub surviving: u64,
    pub aborted: u64,
    /// hist[c] = surviving runs with exactly c connectors (last bin is
    /// ">=len-1").
    pub hist: Vec<u64>,
    pub prob_zero: f64,
    pub prob_one: f64,
    pub prob_two_plus: f64,
}

impl ConnectorStats {
    fn from_hist(n: u32, m: u32, total_runs: u64, aborted: u64, hist: Vec<u64>) -> Self {
        let surviving: u64 = hist.iter().sum();
        let denom = surviving.max(1) as f64;
        let prob_zero = hist[0] as f64 / denom;
        let prob_one = hist[1] as f64 / denom;
        let prob_two_plus = hist[2..].iter().sum::<u64>() as f64 / denom;
        ConnectorStats {
            n,
            m,
            total_runs,
            surviving,
            aborted,
            hist,
            prob_zero,
            prob_one,
            prob_two_plus,
        }
    }

    fn merge(mut self, other: ConnectorStats) -> ConnectorStats {
        for (a, b) in self.hist.iter_mut().zip(other.hist.iter()) {
            *a += b;
        }
        ConnectorStats::from_hist(
            self.n,
            self.m,
            self.total_runs + other.total_runs,
            self.aborted + other.aborted,
            self.hist,
        )
    }
}

const HIST_BINS: usize = 16;

/// Classify surviving runs by their number of level-m connectors.
pub fn connector_diagnostic(
    store: &TreeStore,
    n: u32,
    m: u32,
    runs: u64,
    master_seed: u64,
) -> Result<ConnectorStats, PercolationError> {
    if m > n {
        return Err(PercolationError::InvalidLevels { m, n });
    }
    use rayon::prelude::*;
    let chunk = 65_536u64;
    let chunks = runs.div_ceil(chunk);
    let partials: Vec<ConnectorStats> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(runs);
            let mut hist = vec![0u64; HIST_BINS];
            let mut aborted = 0u64;
            for run_index in lo..hi {
                let rng = RunRng::new(master_seed, run_index);
                match connector_run(store, n, m, &rng) {
                    Ok(Some(c)) => hist[(c as usize).min(HIST_BINS - 1)] += 1,
                    Ok(None) => {}
                    Err(PercolationError::RunAborted { .. }) => aborted += 1,
                    Err(e) => panic!("unexpected percolation error: {e}"),
                }
            }
            ConnectorStats::from_hist(n, m, hi - lo, aborted, hist)
        })
        .collect();
    let zero = ConnectorStats::from_hist(n, m, 0, 0, vec![0u64; HIST_BINS]);
    Ok(partials.into_iter().fold(zero, ConnectorStats::merge))
}

/// One quenched run that tracks, for every cluster vertex below level m,
/// its level-m ancestor. Returns the number of distinct ancestors seen
/// at level n, or None if the run dies before level n.
fn connector_run(
    store: &TreeStore,
    n: u32,
    m: u32,
    rng: &RunRng,
) -> Result<Option<u64>, PercolationError> {
    let pc = bernoulli_threshold(store.constants().p_c);
    let edge_word = rng.edge_word();
    let mut frontier: Vec<(Key, u32)> = vec![(store.root_key(), 0)];
    let mut visits = 0u64;
    for level in 0..n {
        let mut next = Vec::with_capacity(frontier.len() + 4);
        for &(key, tag) in &frontier {
            let d = store.offspring_at(key);
            visits = visits.saturating_add(d);
            if visits > DEFAULT_NODE_CAP {
                return Err(PercolationError::RunAborted { cap: DEFAULT_NODE_CAP });
            }
            for i in 0..d {
                let child = key.child(i);
                if child.draw(edge_word) < pc {
                    next.push((child, tag));
                }
            }
        }
        if next.is_empty() {
            return Ok(None);
        }
        // Vertices that just landed on level m become their own tag.
        if level + 1 == m {
            for (slot, item) in next.iter_mut().enumerate() {
                item.1 = slot as u32;
            }
        }
        frontier = next;
    }
    let mut tags: Vec<u32> = frontier.iter().map(|&(_, t)| t).collect();
    tags.sort_unstable();
    tags.dedup();
    Ok(Some(tags.len() as u64))
}
