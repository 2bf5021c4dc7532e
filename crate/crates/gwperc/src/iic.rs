//! The conditioned-to-survive cluster (incipient infinite cluster): its
//! exact finite-level measure on explicit weighted trees, a consistency
//! checker, and a spine-decomposition sampler on `TreeStore`s.
//!
//! The measure of a height-n subtree t is
//!     (sum of weights over t's level-n vertices / root weight)
//!         * P(cluster restricted to n levels = t),
//! with weights harmonic at internal vertices: w(v) = p * sum w(children).
//! The sampler grows a distinguished ray picked proportionally to the
//! subtree weights, opens every other edge independently with the
//! retention probability, and lets off-spine pieces evolve as plain
//! unconditioned percolation clusters.

use std::collections::VecDeque;

use thiserror::Error;

use crate::percolation;
use crate::rng::{bernoulli_threshold, Key, Stream, DOMAIN_IIC};
use crate::tree::{NodeRef, TreeError, TreeStore};

const TAG_EDGE_WORD: u64 = 0x6969_6365_6467;
const TAG_SEQ_STREAM: u64 = 0x6969_6373_7174;
/// Default cap on enumerated subtrees in the exact checks.
pub const ENUMERATION_BUDGET: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum IicError {
    #[error("subtree height {got} does not match required height {expected}")]
    HeightMismatch { expected: u32, got: u32 },
    #[error("vertex set is not a rooted subtree: {reason}")]
    NotSubtree { reason: String },
    #[error("enumeration budget exceeded: {count} > {budget} subtrees")]
    EnumerationBudget { count: u64, budget: u64 },
    #[error("tree has {nodes} nodes; exact enumeration supports at most 64")]
    TreeTooLarge { nodes: usize },
    #[error("malformed weighted tree: {reason}")]
    Structure { reason: String },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("off-spine growth aborted: {0}")]
    Aborted(String),
}

#[derive(Clone, Debug)]
struct WfNode {
    parent: Option<u32>,
    children: Vec<u32>,
    depth: u32,
    weight: f64,
}

/// Finite rooted tree with per-vertex weights and a retention
/// probability; node 0 is the root, nodes are in BFS order.
#[derive(Clone, Debug)]
pub struct WeightedFiniteTree {
    nodes: Vec<WfNode>,
    height: u32,
    retention: f64,
}

impl WeightedFiniteTree {
    /// Build from per-level child counts: `child_counts[d][i]` is the
    /// number of children of the i-th depth-d node in BFS order. Every
    /// count must be at least 1 (the model has no leaves above the cut).
    pub fn from_child_counts(
        child_counts: &[Vec<usize>],
        retention: f64,
    ) -> Result<Self, IicError> {
        if !(retention > 0.0 && retention < 1.0) {
            return Err(IicError::Structure {
                reason: format!("retention must be in (0,1), got {retention}"),
            });
        }
        let mut nodes =
            vec![WfNode { parent: None, children: Vec::new(), depth: 0, weight: 1.0 }];
        let mut level: Vec<u32> = vec![0];
        for (d, counts) in child_counts.iter().enumerate() {
            if counts.len() != level.len() {
                return Err(IicError::Structure {
                    reason: format!(
                        "level {d} has {} nodes but {} counts",
                        level.len(),
                        counts.len()
                    ),
                });
            }
            let mut next = Vec::new();
            for (&v, &c) in level.iter().zip(counts.iter()) {
                if c == 0 {
                    return Err(IicError::Structure {
                        reason: format!("node {v} at depth {d} has no children"),
                    });
                }
                for _ in 0..c {
                    let id = nodes.len() as u32;
                    nodes.push(WfNode {
                        parent: Some(v),
                        children: Vec::new(),
                        depth: d as u32 + 1,
                        weight: 1.0,
                    });
                    nodes[v as usize].children.push(id);
                    next.push(id);
                }
            }
            level = next;
        }
        Ok(WeightedFiniteTree { nodes, height: child_counts.len() as u32, retention })
    }

    /// Assign the free leaf weights (deepest level, BFS order) and fill
    /// internal weights by the harmonic relation w(v) = p sum w(child).
    pub fn with_leaf_weights(mut self, leaf_weights: &[f64]) -> Result<Self, IicError> {
        let leaves: Vec<u32> = (0..self.nodes.len() as u32)
            .filter(|&v| self.nodes[v as usize].depth == self.height)
            .collect();
        if leaves.len() != leaf_weights.len() {
            return Err(IicError::Structure {
                reason: format!(
                    "{} leaf weights for {} leaves",
                    leaf_weights.len(),
                    leaves.len()
                ),
            });
        }
        for (&v, &w) in leaves.iter().zip(leaf_weights.iter()) {
            if !(w > 0.0) {
                return Err(IicError::Structure {
                    reason: format!("leaf weight {w} must be positive"),
                });
            }
            self.nodes[v as usize].weight = w;
        }
        for v in (0..self.nodes.len()).rev() {
            if self.nodes[v].depth < self.height {
                let sum: f64 = self.nodes[v]
                    .children
                    .iter()
                    .map(|&c| self.nodes[c as usize].weight)
                    .sum();
                self.nodes[v].weight = self.retention * sum;
            }
        }
        Ok(self)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn retention(&self) -> f64 {
        self.retention
    }

    pub fn weight(&self, v: u32) -> f64 {
        self.nodes[v as usize].weight
    }

    pub fn depth(&self, v: u32) -> u32 {
        self.nodes[v as usize].depth
    }

    pub fn children(&self, v: u32) -> &[u32] {
        &self.nodes[v as usize].children
    }

    /// Max |w(v) - p sum w(children)| over internal vertices.
    pub fn harmonicity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for v in &self.nodes {
            if v.depth < self.height {
                let sum: f64 =
                    v.children.iter().map(|&c| self.nodes[c as usize].weight).sum();
                worst = worst.max((v.weight - self.retention * sum).abs());
            }
        }
        worst
    }

    fn mask_height(&self, mask: u64) -> u32 {
        (0..self.nodes.len() as u32)
            .filter(|&v| mask & (1 << v) != 0)
            .map(|v| self.nodes[v as usize].depth)
            .max()
            .unwrap_or(0)
    }

    fn validate_mask(&self, mask: u64) -> Result<(), IicError> {
        if mask & 1 == 0 {
            return Err(IicError::NotSubtree { reason: "missing the root".into() });
        }
        for v in 0..self.nodes.len() as u32 {
            if mask & (1 << v) != 0 {
                if let Some(p) = self.nodes[v as usize].parent {
                    if mask & (1 << p) == 0 {
                        return Err(IicError::NotSubtree {
                            reason: format!("vertex {v} included without its parent {p}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Explicit vertex set of a candidate subtree.
#[derive(Clone, Debug)]
pub struct Subtree {
    pub vertices: Vec<u32>,
}

impl Subtree {
    fn to_mask(&self, wt: &WeightedFiniteTree) -> Result<u64, IicError> {
        if wt.node_count() > 64 {
            return Err(IicError::TreeTooLarge { nodes: wt.node_count() });
        }
        let mut mask = 0u64;
        for &v in &self.vertices {
            if v as usize >= wt.node_count() {
                return Err(IicError::NotSubtree {
                    reason: format!("vertex {v} does not exist"),
                });
            }
            mask |= 1 << v;
        }
        Ok(mask)
    }
}

fn measure_of_mask(wt: &WeightedFiniteTree, mask: u64, n: u32) -> f64 {
    let p = wt.retention;
    let mut edges = 0u32;
    let mut closed = 0u32;
    let mut level_weight = 0.0;
    for v in 0..wt.node_count() as u32 {
        if mask & (1 << v) == 0 {
            continue;
        }
        let node = &wt.nodes[v as usize];
        if node.parent.is_some() {
            edges += 1;
        }
        if node.depth == n {
            level_weight += node.weight;
        }
        if node.depth < n {
            for &c in &node.children {
                if mask & (1 << c) == 0 {
                    closed += 1;
                }
            }
        }
    }
    (level_weight / wt.nodes[0].weight)
        * p.powi(edges as i32)
        * (1.0 - p).powi(closed as i32)
}

/// Exact finite-level measure of one height-n subtree.
pub fn iic_measure_exact(
    wt: &WeightedFiniteTree,
    t: &Subtree,
    n: u32,
) -> Result<f64, IicError> {
    let mask = t.to_mask(wt)?;
    wt.validate_mask(mask)?;
    let h = wt.mask_height(mask);
    if h != n {
        return Err(IicError::HeightMismatch { expected: n, got: h });
    }
    Ok(measure_of_mask(wt, mask, n))
}

/// Number of rooted truncated subtrees (any height <= depth_left), used
/// to enforce the enumeration budget before materializing anything.
fn count_truncated(wt: &WeightedFiniteTree, v: u32, depth_left: u32) -> f64 {
    if depth_left == 0 {
        return 1.0;
    }
    let mut prod = 1.0;
    for &c in wt.children(v) {
        prod *= 1.0 + count_truncated(wt, c, depth_left - 1);
    }
    prod
}

fn enumerate_truncated(wt: &WeightedFiniteTree, v: u32, depth_left: u32) -> Vec<u64> {
    let own = 1u64 << v;
    if depth_left == 0 {
        return vec![own];
    }
    let mut acc = vec![own];
    for &c in wt.children(v) {
        let child_masks = enumerate_truncated(wt, c, depth_left - 1);
        let mut widened = Vec::with_capacity(acc.len() * (1 + child_masks.len()));
        for &base in &acc {
            widened.push(base); // child absent
            for &cm in &child_masks {
                widened.push(base | cm);
            }
        }
        acc = widened;
    }
    acc
}

/// All rooted subtrees of height exactly n, as bitmasks.
pub fn enumerate_height_subtrees(
    wt: &WeightedFiniteTree,
    n: u32,
) -> Result<Vec<u64>, IicError> {
    if wt.node_count() > 64 {
        return Err(IicError::TreeTooLarge { nodes: wt.node_count() });
    }
    if n > wt.height {
        return Err(IicError::HeightMismatch { expected: n, got: wt.height });
    }
    let count = count_truncated(wt, 0, n);
    if count > ENUMERATION_BUDGET as f64 {
        return Err(IicError::EnumerationBudget {
            count: count as u64,
            budget: ENUMERATION_BUDGET,
        });
    }
    Ok(enumerate_truncated(wt, 0, n)
        .into_iter()
        .filter(|&m| wt.mask_height(m) == n)
        .collect())
}

/// Total measure defect |sum over height-n subtrees - 1|.
pub fn normalization_defect(wt: &WeightedFiniteTree, n: u32) -> Result<f64, IicError> {
    let total: f64 = enumerate_height_subtrees(wt, n)?
        .into_iter()
        .map(|m| measure_of_mask(wt, m, n))
        .sum();
    Ok((total - 1.0).abs())
}

/// Consistency of the finite-level family: for every height-n subtree t,
/// the height-(n+1) measures of its extensions must sum to the measure
/// of t. Returns the maximum absolute defect (exhaustive enumeration).
pub fn iic_consistency_check(wt: &WeightedFiniteTree, n: u32) -> Result<f64, IicError> {
    if wt.height < n + 1 {
        return Err(IicError::HeightMismatch { expected: n + 1, got: wt.height });
    }
    let level_n: Vec<u64> = enumerate_height_subtrees(wt, n)?;
    let level_np1: Vec<u64> = enumerate_height_subtrees(wt, n + 1)?;
    // Truncating a height-(n+1) subtree to depth n keeps vertices at
    // depth <= n.
    let depth_mask: u64 = (0..wt.node_count() as u32)
        .filter(|&v| wt.depth(v) <= n)
        .map(|v| 1u64 << v)
        .sum();
    let mut extended: std::collections::HashMap<u64, f64> = std::collections::HashMap::new();
    for &m in &level_np1 {
        *extended.entry(m & depth_mask).or_insert(0.0) += measure_of_mask(wt, m, n + 1);
    }
    let mut worst: f64 = 0.0;
    for &m in &level_n {
        let direct = measure_of_mask(wt, m, n);
        let via_extensions = extended.get(&m).copied().unwrap_or(0.0);
        worst = worst.max((direct - via_extensions).abs());
    }
    Ok(worst)
}

/// Random tree of the given depth with branching uniform in
/// 1..=max_branching and harmonic weights completed from random leaf
/// weights in [0.5, 2). Deterministic in the seed.
pub fn random_harmonic_tree(
    seed: u64,
    depth: u32,
    max_branching: u64,
    retention: f64,
) -> Result<WeightedFiniteTree, IicError> {
    let mut stream = Stream::new(DOMAIN_IIC, seed);
    let mut counts: Vec<Vec<usize>> = Vec::new();
    let mut width = 1usize;
    for _ in 0..depth {
        let level: Vec<usize> =
            (0..width).map(|_| (stream.index(max_branching) + 1) as usize).collect();
        width = level.iter().sum();
        counts.push(level);
    }
    let leaf_weights: Vec<f64> =
        (0..width).map(|_| 0.5 + 1.5 * stream.next_open01()).collect();
    WeightedFiniteTree::from_child_counts(&counts, retention)?.with_leaf_weights(&leaf_weights)
}

/// Sample one conditioned cluster restricted to n levels from an
/// explicit weighted tree, as a bitmask. With exactly harmonic weights
/// the law is exactly the finite-level measure, which the per-atom
/// tests verify.
pub fn sample_finite(wt: &WeightedFiniteTree, n: u32, stream: &mut Stream) -> u64 {
    assert!(n <= wt.height && wt.node_count() <= 64);
    let p = wt.retention;
    let p_thr = bernoulli_threshold(p);
    let mut mask = 1u64;
    let mut frontier: Vec<(u32, bool)> = vec![(0, true)]; // (node, on spine)
    for _ in 0..n {
        let mut next = Vec::new();
        for &(v, on_spine) in &frontier {
            let spine_child = if on_spine {
                // pick child with probability p w(child) / w(v); the
                // harmonic relation makes these sum to one.
                let u = stream.next_open01();
                let mut acc = 0.0;
                let mut chosen = *wt.children(v).last().expect("no leaves above the cut");
                for &c in wt.children(v) {
                    acc += p * wt.weight(c) / wt.weight(v);
                    if u <= acc {
                        chosen = c;
                        break;
                    }
                }
                Some(chosen)
            } else {
                None
            };
            for &c in wt.children(v) {
                let open = match spine_child {
                    Some(sc) if sc == c => true,
                    _ => stream.bernoulli(p_thr),
                };
                if open {
                    mask |= 1 << c;
                    next.push((c, spine_child == Some(c)));
                }
            }
        }
        frontier = next;
    }
    mask
}

/// Randomness handle for one conditioned-cluster sample, keyed by
/// (master seed, sample index) in its own domain.
#[derive(Clone, Copy, Debug)]
pub struct IicRng {
    key: Key,
}

impl IicRng {
    pub fn new(master_seed: u64, sample_index: u64) -> Self {
        IicRng { key: Key::new(DOMAIN_IIC, master_seed).absorb(sample_index) }
    }

    fn edge_word(&self) -> u64 {
        self.key.draw(TAG_EDGE_WORD)
    }

    fn stream(&self) -> Stream {
        Stream::from_key(self.key.absorb(TAG_SEQ_STREAM))
    }
}

/// One sampled conditioned cluster: the spine and the level-n count.
#[derive(Clone, Debug, PartialEq)]
pub struct IicSample {
    pub level: u32,
    /// Child indices of the spine, root downwards.
    pub spine_path: Vec<u64>,
    /// Number of cluster vertices at level n (spine included, so >= 1).
    pub cluster_level_count: u64,
    /// cluster_level_count / n^beta.
    pub z_n: f64,
}

impl IicSample {
    /// Spine vertices as NodeRefs, root first.
    pub fn spine(&self) -> Vec<NodeRef> {
        let mut out = Vec::with_capacity(self.spine_path.len() + 1);
        let mut v = NodeRef::root();
        out.push(v.clone());
        for &i in &self.spine_path {
            v = v.child(i);
            out.push(v.clone());
        }
        out
    }
}

#[derive(Clone, Copy)]
struct WindowEntry {
    key: Key,
    /// Index of the parent in the previous level's buffer. Never
    /// dereferenced for the first window level.
    parent: u32,
    /// Slice [child_lo, child_lo + child_cnt) of the next level's
    /// buffer; filled when that level is expanded.
    child_lo: u32,
    child_cnt: u32,
}

struct WindowLevel {
    buf: Vec<WindowEntry>,
    lo: u32,
    hi: u32,
}

impl WindowLevel {
    fn live(&self) -> u32 {
        self.hi - self.lo
    }
}

/// Sliding window of the m_W + 1 tree levels below the current spine
/// vertex. Selecting the spine child with probability proportional to
/// its depth-m_W descendant count is done by drawing one uniform vertex
/// from the deepest window level and walking its ancestry upward; that
/// is exactly the renormalized W-estimate kernel, never computed per
/// child explicitly.
struct SpineWindow<'a> {
    store: &'a TreeStore,
    levels: VecDeque<WindowLevel>,
    /// Retired level buffers, recycled by expansions to keep the walk
    /// allocation-free in steady state.
    spare: Vec<Vec<WindowEntry>>,
}

impl<'a> SpineWindow<'a> {
    fn new(store: &'a TreeStore, depth: u32) -> Result<Self, TreeError> {
        let mut w = SpineWindow {
            store,
            levels: VecDeque::with_capacity(depth as usize + 1),
            spare: Vec::new(),
        };
        w.reset(depth)?;
        Ok(w)
    }

    /// Rebuild the window below the root, recycling every buffer.
    fn reset(&mut self, depth: u32) -> Result<(), TreeError> {
        while let Some(level) = self.levels.pop_back() {
            self.spare.push(level.buf);
        }
        let root = WindowEntry {
            key: self.store.root_key(),
            parent: u32::MAX,
            child_lo: 0,
            child_cnt: 0,
        };
        let mut buf = self.spare.pop().unwrap_or_default();
        buf.clear();
        buf.push(root);
        let mut seed_level = WindowLevel { buf, lo: 0, hi: 1 };
        for _ in 0..depth {
            let next = self.expand_from(&mut seed_level)?;
            self.levels.push_back(std::mem::replace(&mut seed_level, next));
        }
        // seed_level now holds the deepest expansion; the root pseudo-level
        // was pushed first and must go.
        self.levels.push_back(seed_level);
        if let Some(pseudo) = self.levels.pop_front() {
            self.spare.push(pseudo.buf);
        }
        Ok(())
    }

    fn expand_from(&mut self, level: &mut WindowLevel) -> Result<WindowLevel, TreeError> {
        let budget = self.store.expansion_budget();
        let mut buf = self.spare.pop().unwrap_or_default();
        buf.clear();
        let lo = level.lo as usize;
        let hi = level.hi as usize;
        for (off, entry) in level.buf[lo..hi].iter_mut().enumerate() {
            let key = entry.key;
            let d = self.store.offspring_at(key);
            if buf.len() as u64 + d > budget {
                return Err(TreeError::BudgetExceeded {
                    estimated: buf.len() as f64 + d as f64,
                    budget,
                });
            }
            entry.child_lo = buf.len() as u32;
            entry.child_cnt = d as u32;
            let parent = (lo + off) as u32;
            for i in 0..d {
                buf.push(WindowEntry {
                    key: key.child(i),
                    parent,
                    child_lo: 0,
                    child_cnt: 0,
                });
            }
        }
        let hi = buf.len() as u32;
        Ok(WindowLevel { buf, lo: 0, hi })
    }

    /// Pick the spine child (index into the first window level's live
    /// range) proportional to its deepest-level descendant count.
    fn pick_spine_child(&self, stream: &mut Stream) -> u32 {
        let bottom = self.levels.back().expect("window has levels");
        let pick = bottom.lo + stream.index(bottom.live() as u64) as u32;
        // Each parent pointer at level j indexes level j-1; walking them
        // from the bottom through level 1 lands on an index into level 0.
        let mut idx = pick;
        for level in self.levels.iter().rev().take(self.levels.len() - 1) {
            idx = level.buf[idx as usize].parent;
        }
        idx
    }

    /// Advance the spine into child at buffer index `idx0` of the first
    /// level: narrow every level to that subtree, drop the first level,
    /// and expand one fresh level at the bottom.
    fn descend(&mut self, idx0: u32) -> Result<(), TreeError> {
        let mut lo = idx0;
        let mut hi = idx0 + 1;
        self.levels[0].lo = lo;
        self.levels[0].hi = hi;
        for j in 1..self.levels.len() {
            let prev = &self.levels[j - 1];
            let first = prev.buf[lo as usize].child_lo;
            let last_entry = prev.buf[(hi - 1) as usize];
            let next_hi = last_entry.child_lo + last_entry.child_cnt;
            lo = first;
            hi = next_hi;
            self.levels[j].lo = lo;
            self.levels[j].hi = hi;
        }
        if let Some(dropped) = self.levels.pop_front() {
            self.spare.push(dropped.buf);
        }
        let bottom_idx = self.levels.len() - 1;
        let mut bottom = std::mem::replace(
            &mut self.levels[bottom_idx],
            WindowLevel { buf: Vec::new(), lo: 0, hi: 0 },
        );
        let fresh = self.expand_from(&mut bottom)?;
        self.levels[bottom_idx] = bottom;
        self.levels.push_back(fresh);
        self.maybe_compact();
        Ok(())
    }

    /// Off-spine children of the current spine vertex: every live entry
    /// of the first level except the chosen one.
    fn off_spine_children(&self, chosen: u32) -> Vec<Key> {
        let level = &self.levels[0];
        (level.lo..level.hi)
            .filter(|&i| i != chosen)
            .map(|i| level.buf[i as usize].key)
            .collect()
    }

    fn maybe_compact(&mut self) {
        let total: usize = self.levels.iter().map(|l| l.buf.len()).sum();
        let live: usize = self.levels.iter().map(|l| l.live() as usize).sum();
        if total <= 3 * live + 1024 {
            return;
        }
        // Rebase every buffer to its live slice, in place; parent/child
        // indexes of neighbors shift by the dropped prefix.
        let offsets: Vec<u32> = self.levels.iter().map(|l| l.lo).collect();
        for j in 0..self.levels.len() {
            let lo = self.levels[j].lo as usize;
            let hi = self.levels[j].hi as usize;
            let level = &mut self.levels[j];
            level.buf.copy_within(lo..hi, 0);
            level.buf.truncate(hi - lo);
            if j > 0 {
                for e in level.buf.iter_mut() {
                    e.parent -= offsets[j - 1];
                }
            }
            if j + 1 < offsets.len() {
                for e in level.buf.iter_mut() {
                    e.child_lo -= offsets[j + 1];
                }
            }
            level.lo = 0;
            level.hi = (hi - lo) as u32;
        }
    }
}

/// Reusable conditioned-cluster sampler for one store: the sliding
/// window's buffers persist across samples, so batch sampling is
/// allocation-free in steady state.
pub struct IicSampler<'a> {
    store: &'a TreeStore,
    window: SpineWindow<'a>,
    m_w: u32,
    pc_threshold: u64,
}

impl<'a> IicSampler<'a> {
    pub fn new(store: &'a TreeStore, m_w: u32) -> Result<Self, IicError> {
        let window = SpineWindow::new(store, m_w + 1).map_err(IicError::Tree)?;
        Ok(IicSampler {
            store,
            window,
            m_w,
            pc_threshold: bernoulli_threshold(store.constants().p_c),
        })
    }

    pub fn sample(&mut self, n: u32, rng: &IicRng) -> Result<IicSample, IicError> {
        assert!(n >= 1, "conditioned-cluster sampling requires n >= 1");
        let edge_word = rng.edge_word();
        let mut stream = rng.stream();
        self.window.reset(self.m_w + 1).map_err(IicError::Tree)?;
        let mut spine_path = Vec::with_capacity(n as usize);
        let mut level_n_count = 0u64;

        for depth in 0..n {
            let idx0 = self.window.pick_spine_child(&mut stream);
            let child_index = (idx0 - self.window.levels[0].lo) as u64;
            spine_path.push(child_index);
            for key in self.window.off_spine_children(idx0) {
                if key.draw(edge_word) < self.pc_threshold {
                    // open off-spine edge: grow an unconditioned cluster
                    // from tree depth (depth + 1), counted at level n.
                    let levels_below = n - depth - 1;
                    let c = percolation::cluster_descendants_at(
                        self.store,
                        key,
                        levels_below,
                        edge_word,
                        percolation::DEFAULT_NODE_CAP,
                    )
                    .map_err(|e| IicError::Aborted(e.to_string()))?;
                    level_n_count += c;
                }
            }
            self.window.descend(idx0).map_err(IicError::Tree)?;
        }
        level_n_count += 1; // the spine vertex at level n
        let beta = self.store.constants().beta;
        Ok(IicSample {
            level: n,
            spine_path,
            cluster_level_count: level_n_count,
            z_n: level_n_count as f64 / (n as f64).powf(beta),
        })
    }
}

/// Sample the conditioned cluster on a quenched tree down to level n,
/// using depth-m_w descendant counts as the spine weights. Batch callers
/// should hold an `IicSampler` instead to reuse its buffers.
pub fn sample_iic(
    store: &TreeStore,
    n: u32,
    m_w: u32,
    rng: &IicRng,
) -> Result<IicSample, IicError> {
    IicSampler::new(store, m_w)?.sample(n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::{Model, OffspringConfig};

    fn binary_wt(depth: u32, p: f64) -> WeightedFiniteTree {
        let counts: Vec<Vec<usize>> =
            (0..depth).map(|d| vec![2; 1 << d]).collect();
        let leaves = 1usize << depth;
        WeightedFiniteTree::from_child_counts(&counts, p)
            .unwrap()
            .with_leaf_weights(&vec![1.0; leaves])
            .unwrap()
    }

    fn path_wt(depth: u32, p: f64) -> WeightedFiniteTree {
        let counts: Vec<Vec<usize>> = (0..depth).map(|_| vec![1]).collect();
        WeightedFiniteTree::from_child_counts(&counts, p)
            .unwrap()
            .with_leaf_weights(&[1.7])
            .unwrap()
    }

    #[test]
    fn harmonic_completion_is_harmonic() {
        let wt = binary_wt(3, 0.5);
        assert!(wt.harmonicity_defect() <= 1e-12);
        // root weight = p^3 * sum of leaves = 0.125 * 8 = 1
        assert!((wt.weight(0) - 1.0).abs() < 1e-12);
        for seed in 0..10 {
            let wt = random_harmonic_tree(seed, 3, 3, 0.4).unwrap();
            assert!(wt.harmonicity_defect() <= 1e-12);
        }
    }

    #[test]
    fn measure_binary_root_example() {
        // Binary root, equal leaf weights, p = 1/2, n = 1:
        // {child1} and {child2} get 1/4 each, {both} gets 1/2.
        let wt = binary_wt(1, 0.5);
        let m1 = iic_measure_exact(&wt, &Subtree { vertices: vec![0, 1] }, 1).unwrap();
        let m2 = iic_measure_exact(&wt, &Subtree { vertices: vec![0, 2] }, 1).unwrap();
        let m12 = iic_measure_exact(&wt, &Subtree { vertices: vec![0, 1, 2] }, 1).unwrap();
        assert!((m1 - 0.25).abs() < 1e-15);
        assert!((m2 - 0.25).abs() < 1e-15);
        assert!((m12 - 0.5).abs() < 1e-15);
        assert!((m1 + m2 + m12 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn measure_rejects_wrong_height() {
        let wt = binary_wt(2, 0.5);
        let err = iic_measure_exact(&wt, &Subtree { vertices: vec![0, 1] }, 2).unwrap_err();
        assert!(matches!(err, IicError::HeightMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn measure_rejects_non_subtree() {
        let wt = binary_wt(2, 0.5);
        // vertex 3 is a grandchild; include it without its parent
        let err = iic_measure_exact(&wt, &Subtree { vertices: vec![0, 3] }, 2).unwrap_err();
        assert!(matches!(err, IicError::NotSubtree { .. }));
    }

    #[test]
    fn single_path_tree_is_deterministic() {
        let wt = path_wt(4, 0.3);
        for n in 1..=4 {
            let masks = enumerate_height_subtrees(&wt, n).unwrap();
            assert_eq!(masks.len(), 1);
            let t = Subtree { vertices: (0..=n).collect() };
            assert!((iic_measure_exact(&wt, &t, n).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(iic_consistency_check(&wt, 2).unwrap() < 1e-15);
        // with dyadic retention the unique-subtree defect is exactly zero
        let wt = WeightedFiniteTree::from_child_counts(&[vec![1], vec![1], vec![1]], 0.5)
            .unwrap()
            .with_leaf_weights(&[1.0])
            .unwrap();
        assert_eq!(iic_consistency_check(&wt, 2).unwrap(), 0.0);
    }

    #[test]
    fn normalization_and_consistency_binary() {
        let wt = binary_wt(3, 0.5);
        for n in 1..=3 {
            assert!(normalization_defect(&wt, n).unwrap() <= 1e-12);
        }
        for n in 1..=2 {
            assert!(iic_consistency_check(&wt, n).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn consistency_on_random_weightings() {
        for seed in 0..5 {
            let wt = random_harmonic_tree(1000 + seed, 3, 3, 1.0 / 2.3).unwrap();
            if count_truncated(&wt, 0, 3) > ENUMERATION_BUDGET as f64 {
                continue;
            }
            for n in 1..=2 {
                assert!(
                    iic_consistency_check(&wt, n).unwrap() <= 1e-12,
                    "seed {seed} level {n}"
                );
                assert!(normalization_defect(&wt, n).unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn enumeration_budget_enforced() {
        // Full ternary depth 3 has (1+(1+(1+1)^3... ) ~ 3.9e8 truncated
        // subtrees, beyond the 1e6 budget.
        let counts = vec![vec![3], vec![3; 3], vec![3; 9]];
        let wt = WeightedFiniteTree::from_child_counts(&counts, 0.5)
            .unwrap()
            .with_leaf_weights(&vec![1.0; 27])
            .unwrap();
        assert!(matches!(
            enumerate_height_subtrees(&wt, 3),
            Err(IicError::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn finite_sampler_matches_exact_measure() {
        // Asymmetric depth-2 tree: per-atom z-test at 200k samples.
        let counts = vec![vec![2], vec![1, 2]];
        let wt = WeightedFiniteTree::from_child_counts(&counts, 0.5)
            .unwrap()
            .with_leaf_weights(&[3.0, 0.5, 1.0])
            .unwrap();
        let atoms = enumerate_height_subtrees(&wt, 2).unwrap();
        assert_eq!(atoms.len(), 11);
        let mut stream = Stream::new(DOMAIN_IIC, 2024);
        let n_samples = 200_000u64;
        let mut hist = std::collections::HashMap::new();
        for _ in 0..n_samples {
            *hist.entry(sample_finite(&wt, 2, &mut stream)).or_insert(0u64) += 1;
        }
        for &mask in &atoms {
            let p = measure_of_mask(&wt, mask, 2);
            let got = hist.get(&mask).copied().unwrap_or(0) as f64;
            let sd = (n_samples as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (got - p * n_samples as f64).abs() < 4.0 * sd,
                "atom {mask:b}: {got} vs {}",
                p * n_samples as f64
            );
        }
        // sampled masks that are not atoms would indicate a broken sampler
        let total_on_atoms: u64 = atoms.iter().map(|m| hist.get(m).copied().unwrap_or(0)).sum();
        assert_eq!(total_on_atoms, n_samples);
    }

    #[test]
    fn store_sampler_spine_is_uniform_on_degenerate_tree() {
        let model = Model::from_config(&OffspringConfig::explicit(&[(2, 1.0)])).unwrap();
        let store = TreeStore::new(model, 5);
        let n_samples = 100_000u64;
        let mut first_child = [0u64; 2];
        for i in 0..n_samples {
            let s = sample_iic(&store, 4, 6, &IicRng::new(3, i)).unwrap();
            assert!(s.cluster_level_count >= 1);
            assert_eq!(s.spine_path.len(), 4);
            first_child[s.spine_path[0] as usize] += 1;
        }
        let sd = (n_samples as f64 * 0.25).sqrt();
        assert!((first_child[0] as f64 - n_samples as f64 / 2.0).abs() < 4.0 * sd);
    }

    #[test]
    fn store_sampler_spine_kernel_matches_w_counts() {
        // First spine step on a random tree: frequencies must follow
        // |T_{m_w}(child)| ratios, which w_estimate exposes exactly.
        let model = Model::from_config(&OffspringConfig::explicit(&[
            (1, 1.0 / 3.0),
            (2, 1.0 / 3.0),
            (3, 1.0 / 3.0),
        ]))
        .unwrap();
        let store = TreeStore::new(model, 99);
        let m_w = 8u32;
        let root = NodeRef::root();
        let d = store.offspring_count(&root).unwrap();
        let counts: Vec<u64> =
            (0..d).map(|i| store.w_estimate(&root.child(i), m_w).unwrap().count).collect();
        let total: u64 = counts.iter().sum();
        let n_samples = 100_000u64;
        let mut hist = vec![0u64; d as usize];
        for i in 0..n_samples {
            let s = sample_iic(&store, 1, m_w, &IicRng::new(17, i)).unwrap();
            hist[s.spine_path[0] as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = c as f64 / total as f64;
            let sd = (n_samples as f64 * p * (1.0 - p)).sqrt().max(1.0);
            assert!(
                (hist[i] as f64 - p * n_samples as f64).abs() < 4.0 * sd,
                "child {i}: {} vs {}",
                hist[i],
                p * n_samples as f64
            );
        }
    }

    #[test]
    fn store_sampler_is_reproducible() {
        let model = Model::from_config(&OffspringConfig::explicit(&[(1, 0.8), (2, 0.2)])).unwrap();
        let store = TreeStore::new(model, 12);
        let a = sample_iic(&store, 32, 10, &IicRng::new(7, 42)).unwrap();
        let b = sample_iic(&store, 32, 10, &IicRng::new(7, 42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.spine().len(), 33);
    }

    #[test]
    fn store_sampler_mean_grows_linearly() {
        // E[level-n count] = 1 + sigma_c^2 n under the annealed law; the
        // quenched value fluctuates around it, so only sanity-check that
        // the mean is well above 1 and the count is always >= 1.
        let model = Model::from_config(&OffspringConfig::explicit(&[(1, 0.8), (2, 0.2)])).unwrap();
        let store = TreeStore::new(model, 3);
        let n = 48u32;
        let samples = 4_000u64;
        let mut sum = 0u64;
        for i in 0..samples {
            let s = sample_iic(&store, n, 12, &IicRng::new(5, i)).unwrap();
            assert!(s.cluster_level_count >= 1);
            sum += s.cluster_level_count;
        }
        let mean = sum as f64 / samples as f64;
        assert!(mean > 2.0, "IIC level counts should grow with n, mean = {mean}");
    }
}
