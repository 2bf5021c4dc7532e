//! The quenched environment: a lazily materialized supercritical
//! Galton-Watson tree whose offspring counts are a pure function of
//! (tree seed, node path). Nothing is ever stored authoritatively; the
//! memo is a plain cache and can be dropped at any time.

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

use crate::offspring::Model;
use crate::rng::{Key, DOMAIN_TREE};

const TAG_OFFSPRING: u64 = 0x6f66_6673_7072_6e67;
const MEMO_SHARDS: usize = 16;
/// Rough per-entry footprint of the memo (key, value, links, map slack).
const MEMO_ENTRY_BYTES: usize = 64;

/// Node identity: the sequence of child indices from the root.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct NodeRef {
    path: Vec<u64>,
}

impl NodeRef {
    pub fn root() -> Self {
        NodeRef { path: Vec::new() }
    }

    pub fn from_path(path: Vec<u64>) -> Self {
        NodeRef { path }
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn child(&self, index: u64) -> NodeRef {
        let mut path = self.path.clone();
        path.push(index);
        NodeRef { path }
    }

    pub fn parent(&self) -> Option<NodeRef> {
        if self.path.is_empty() {
            None
        } else {
            Some(NodeRef { path: self.path[..self.path.len() - 1].to_vec() })
        }
    }

    pub fn is_ancestor_of(&self, other: &NodeRef) -> bool {
        other.path.len() >= self.path.len() && other.path[..self.path.len()] == self.path[..]
    }
}

/// Martingale estimate W_m(v) = |T_m(v)| / mu^m.
#[derive(Clone, Debug)]
pub struct WEstimate {
    pub node: NodeRef,
    pub depth: u32,
    /// Exact descendant count |T_m(v)|.
    pub count: u64,
    pub value: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("node unreachable: index {index} at depth {depth} exceeds offspring count {count}")]
    UnreachableNode { depth: usize, index: u64, count: u64 },
    #[error("expansion budget exceeded: ~{estimated:.3e} node visits against budget {budget}")]
    BudgetExceeded { estimated: f64, budget: u64 },
}

/// Seed-deterministic supercritical GW tree.
pub struct TreeStore {
    model: Model,
    tree_seed: u64,
    root_key: Key,
    expansion_budget: u64,
    memo: Memo,
}

impl TreeStore {
    pub fn new(model: Model, tree_seed: u64) -> Self {
        TreeStore {
            model,
            tree_seed,
            root_key: Key::new(DOMAIN_TREE, tree_seed),
            expansion_budget: 100_000_000,
            memo: Memo::new(32 << 20),
        }
    }

    /// Node-visit budget for a single expansion call (defaults to 1e8).
    pub fn with_expansion_budget(mut self, budget: u64) -> Self {
        self.expansion_budget = budget;
        self
    }

    /// Byte budget for the offspring memo (LRU, per-shard).
    pub fn with_memo_budget(mut self, bytes: usize) -> Self {
        self.memo = Memo::new(bytes);
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn constants(&self) -> &crate::offspring::ModelConstants {
        &self.model.constants
    }

    pub fn tree_seed(&self) -> u64 {
        self.tree_seed
    }

    pub fn expansion_budget(&self) -> u64 {
        self.expansion_budget
    }

    pub(crate) fn root_key(&self) -> Key {
        self.root_key
    }

    /// Offspring count at a key, straight from the counter RNG. The hot
    /// paths use this; the memo only fronts the path-validated API.
    #[inline(always)]
    pub(crate) fn offspring_at(&self, key: Key) -> u64 {
        self.model.spec.sample_from_u64(key.draw(TAG_OFFSPRING))
    }

    #[inline(always)]
    fn offspring_at_memoized(&self, key: Key) -> u64 {
        let id = key.as_u128();
        if let Some(v) = self.memo.get(id) {
            return v;
        }
        let v = self.offspring_at(key);
        self.memo.insert(id, v);
        v
    }

    /// Validated key of a node; errors if any prefix index is out of
    /// range for the realized tree.
    pub fn key_of(&self, v: &NodeRef) -> Result<Key, TreeError> {
        let mut key = self.root_key;
        for (depth, &index) in v.path().iter().enumerate() {
            let count = self.offspring_at_memoized(key);
            if index >= count {
                return Err(TreeError::UnreachableNode { depth, index, count });
            }
            key = key.child(index);
        }
        Ok(key)
    }

    /// Offspring count of a reachable node.
    pub fn offspring_count(&self, v: &NodeRef) -> Result<u64, TreeError> {
        let key = self.key_of(v)?;
        Ok(self.offspring_at_memoized(key))
    }

    /// Drop every cached offspring count. Correctness must not change.
    pub fn clear_memo(&self) {
        self.memo.clear();
    }

    fn check_budget(&self, levels: u32) -> Result<(), TreeError> {
        let mu = self.model.constants.mu;
        let estimated = mu.powi(levels as i32);
        if estimated > self.expansion_budget as f64 {
            return Err(TreeError::BudgetExceeded {
                estimated,
                budget: self.expansion_budget,
            });
        }
        Ok(())
    }

    /// Exact |T_m(v)| for the subtree below `key`, by breadth-first
    /// expansion. The deepest level is only counted, never materialized.
    pub(crate) fn descendants_at_depth(&self, key: Key, m: u32) -> Result<u64, TreeError> {
        self.check_budget(m)?;
        if m == 0 {
            return Ok(1);
        }
        let mut visits: u64 = 0;
        let mut level: Vec<Key> = vec![key];
        for _ in 0..m - 1 {
            let mut next = Vec::with_capacity(level.len() * 2);
            for &k in &level {
                let d = self.offspring_at(k);
                for i in 0..d {
                    next.push(k.child(i));
                }
            }
            visits += next.len() as u64;
            if visits > self.expansion_budget {
                return Err(TreeError::BudgetExceeded {
                    estimated: visits as f64,
                    budget: self.expansion_budget,
                });
            }
            level = next;
        }
        Ok(level.iter().map(|&k| self.offspring_at(k)).sum())
    }

    /// Number of generation-m vertices of the whole tree.
    pub fn generation_size(&self, m: u32) -> Result<u64, TreeError> {
        self.descendants_at_depth(self.root_key, m)
    }

    /// W_m(v): descendant count at depth m below v, divided once by mu^m.
    pub fn w_estimate(&self, v: &NodeRef, m: u32) -> Result<WEstimate, TreeError> {
        let key = self.key_of(v)?;
        let count = self.descendants_at_depth(key, m)?;
        let value = count as f64 / self.model.constants.mu.powi(m as i32);
        Ok(WEstimate { node: v.clone(), depth: m, count, value })
    }
}

/// Sharded LRU cache from node id to offspring count.
struct Memo {
    shards: Vec<Mutex<Lru>>,
}

impl Memo {
    fn new(byte_budget: usize) -> Self {
        let per_shard = (byte_budget / MEMO_ENTRY_BYTES / MEMO_SHARDS).max(64) as u32;
        Memo {
            shards: (0..MEMO_SHARDS).map(|_| Mutex::new(Lru::new(per_shard))).collect(),
        }
    }

    #[inline]
    fn shard(&self, id: u128) -> &Mutex<Lru> {
        &self.shards[(id as usize) & (MEMO_SHARDS - 1)]
    }

    fn get(&self, id: u128) -> Option<u64> {
        self.shard(id).lock().unwrap().get(id)
    }

    fn insert(&self, id: u128, val: u64) {
        self.shard(id).lock().unwrap().insert(id, val);
    }

    fn clear(&self) {
        for s in &self.shards {
            s.lock().unwrap().clear();
        }
    }
}

const NIL: u32 = u32::MAX;

struct LruSlot {
    key: u128,
    val: u64,
    prev: u32,
    next: u32,
}

/// Minimal intrusive-list LRU. Capacity is fixed at construction.
struct Lru {
    map: HashMap<u128, u32>,
    slots: Vec<LruSlot>,
    head: u32,
    tail: u32,
    cap: u32,
}

impl Lru {
    fn new(cap: u32) -> Self {
        Lru { map: HashMap::new(), slots: Vec::new(), head: NIL, tail: NIL, cap: cap.max(2) }
    }

    fn unlink(&mut self, i: u32) {
        let (prev, next) = {
            let s = &self.slots[i as usize];
            (s.prev, s.next)
        };
        if prev != NIL {
            self.slots[prev as usize].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.slots[next as usize].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn push_front(&mut self, i: u32) {
        self.slots[i as usize].prev = NIL;
        self.slots[i as usize].next = self.head;
        if self.head != NIL {
            self.slots[self.head as usize].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    fn get(&mut self, key: u128) -> Option<u64> {
        let i = *self.map.get(&key)?;
        self.unlink(i);
        self.push_front(i);
        Some(self.slots[i as usize].val)
    }

    fn insert(&mut self, key: u128, val: u64) {
        if let Some(&i) = self.map.get(&key) {
            self.slots[i as usize].val = val;
            self.unlink(i);
            self.push_front(i);
            return;
        }
        let i = if (self.slots.len() as u32) < self.cap {
            self.slots.push(LruSlot { key, val, prev: NIL, next: NIL });
            (self.slots.len() - 1) as u32
        } else {
            let victim = self.tail;
            let old_key = self.slots[victim as usize].key;
            self.map.remove(&old_key);
            self.unlink(victim);
            self.slots[victim as usize] = LruSlot { key, val, prev: NIL, next: NIL };
            victim
        };
        self.map.insert(key, i);
        self.push_front(i);
    }

    fn clear(&mut self) {
        self.map.clear();
        self.slots.clear();
        self.head = NIL;
        self.tail = NIL;
    }
}
