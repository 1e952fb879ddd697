//! Compact calling-context tree. Paths are interned root-first; common prefixes
//! share nodes. Each node carries a metric accumulator that is summed when trees
//! from different threads are merged.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ids::{CtxId, FrameId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CctError {
    #[error("cannot intern an empty calling context")]
    EmptyPath,
    #[error("unknown context id {0}")]
    UnknownContext(CtxId),
}

/// Metrics attached to tree nodes. `absorb` folds in another tree's metrics;
/// `remap` translates that tree's context ids into this tree's.
pub trait NodeMetrics: Default + Clone {
    fn absorb(&mut self, other: &Self, remap: &ContextRemap);
}

impl NodeMetrics for () {
    fn absorb(&mut self, _: &Self, _: &ContextRemap) {}
}

impl NodeMetrics for u64 {
    fn absorb(&mut self, other: &Self, _: &ContextRemap) {
        *self += *other;
    }
}

/// Id translation produced by merge and canonicalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextRemap(Vec<CtxId>);

impl ContextRemap {
    pub fn get(&self, id: CtxId) -> CtxId {
        self.0[id.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node<M> {
    frame: Option<FrameId>,
    parent: Option<CtxId>,
    children: BTreeMap<FrameId, CtxId>,
    metrics: M,
}

impl<M: Default> Node<M> {
    fn new(frame: Option<FrameId>, parent: Option<CtxId>) -> Self {
        Self { frame, parent, children: BTreeMap::new(), metrics: M::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cct<M = ()> {
    nodes: Vec<Node<M>>,
}

impl<M: NodeMetrics> Default for Cct<M> {
    fn default() -> Self {
        Self::new()
    }
}

impl<M: NodeMetrics> Cct<M> {
    pub fn new() -> Self {
        Self { nodes: vec![Node::new(None, None)] }
    }

    /// Number of non-root nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.node_count() == 0
    }

    pub fn contains(&self, id: CtxId) -> bool {
        id != CtxId::ROOT && id.index() < self.nodes.len()
    }

    pub fn intern(&mut self, frames: &[FrameId]) -> Result<CtxId, CctError> {
        if frames.is_empty() {
            return Err(CctError::EmptyPath);
        }
        let mut cur = CtxId::ROOT;
        for &frame in frames {
            cur = self.child_or_insert(cur, frame);
        }
        Ok(cur)
    }

    fn child_or_insert(&mut self, parent: CtxId, frame: FrameId) -> CtxId {
        if let Some(&child) = self.nodes[parent.index()].children.get(&frame) {
            return child;
        }
        let id = CtxId(u32::try_from(self.nodes.len()).expect("calling-context tree overflow"));
        self.nodes.push(Node::new(Some(frame), Some(parent)));
        self.nodes[parent.index()].children.insert(frame, id);
        id
    }

    /// Finds an already interned path without inserting.
    pub fn lookup(&self, frames: &[FrameId]) -> Option<CtxId> {
        if frames.is_empty() {
            return None;
        }
        let mut cur = CtxId::ROOT;
        for frame in frames {
            cur = *self.nodes[cur.index()].children.get(frame)?;
        }
        Some(cur)
    }

    pub fn path_of(&self, id: CtxId) -> Result<Vec<FrameId>, CctError> {
        if !self.contains(id) {
            return Err(CctError::UnknownContext(id));
        }
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let node = &self.nodes[c.index()];
            if let Some(frame) = node.frame {
                path.push(frame);
            }
            cur = node.parent;
        }
        path.reverse();
        Ok(path)
    }

    pub fn parent(&self, id: CtxId) -> Option<CtxId> {
        self.nodes.get(id.index()).and_then(|n| n.parent)
    }

    pub fn frame(&self, id: CtxId) -> Option<FrameId> {
        self.nodes.get(id.index()).and_then(|n| n.frame)
    }

    pub fn metrics(&self, id: CtxId) -> Option<&M> {
        self.nodes.get(id.index()).map(|n| &n.metrics)
    }

    pub fn metrics_mut(&mut self, id: CtxId) -> Option<&mut M> {
        self.nodes.get_mut(id.index()).map(|n| &mut n.metrics)
    }

    /// Non-root context ids in depth-first order, children by ascending frame id.
    pub fn ids(&self) -> Vec<CtxId> {
        let mut out = Vec::with_capacity(self.node_count());
        let mut stack: Vec<CtxId> = self.nodes[0].children.values().rev().copied().collect();
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id.index()].children.values().rev().copied());
        }
        out
    }

    /// Folds `other` into `self`: identical paths coalesce top-down and their
    /// metrics are summed. Returns the translation of `other`'s ids.
    pub fn merge_from(&mut self, other: &Cct<M>) -> ContextRemap {
        let mut remap = vec![CtxId::ROOT; other.nodes.len()];
        // Parents always precede children in `ids()`.
        for id in other.ids() {
            let node = &other.nodes[id.index()];
            let parent = remap[node.parent.expect("non-root node has a parent").index()];
            remap[id.index()] = self.child_or_insert(parent, node.frame.expect("non-root node has a frame"));
        }
        let remap = ContextRemap(remap);
        for id in other.ids() {
            let target = remap.get(id);
            self.nodes[target.index()].metrics.absorb(&other.nodes[id.index()].metrics, &remap);
        }
        remap
    }

    /// Renumbers nodes in depth-first frame order so that equal path sets get
    /// equal ids regardless of insertion history.
    pub fn canonicalize(&self) -> (Cct<M>, ContextRemap) {
        let mut out = Cct::new();
        let remap = out.merge_from(self);
        (out, remap)
    }

    /// Rebuilds a tree from `(id, parent, frame)` triples, e.g. after deserialization.
    /// Ids must be dense, 1-based, with parents listed before children.
    pub fn from_nodes(nodes: &[(CtxId, CtxId, FrameId)]) -> Result<Self, CctError> {
        let mut tree = Cct::new();
        for &(id, parent, frame) in nodes {
            if id.index() != tree.nodes.len() || parent.index() >= tree.nodes.len() {
                return Err(CctError::UnknownContext(id));
            }
            let got = tree.child_or_insert(parent, frame);
            if got != id {
                return Err(CctError::UnknownContext(id));
            }
        }
        Ok(tree)
    }

    /// `(id, parent, frame)` for every non-root node, in id order.
    pub fn to_nodes(&self) -> Vec<(CtxId, CtxId, FrameId)> {
        (1..self.nodes.len())
            .map(|i| {
                let n = &self.nodes[i];
                (CtxId(i as u32), n.parent.expect("non-root"), n.frame.expect("non-root"))
            })
            .collect()
    }
}

/// Merges two trees into a new one.
pub fn merge<M: NodeMetrics>(a: &Cct<M>, b: &Cct<M>) -> Cct<M> {
    let mut out = a.clone();
    out.merge_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::frames;

    fn path_set<M: NodeMetrics + Copy>(t: &Cct<M>) -> Vec<(Vec<FrameId>, M)> {
        let mut v: Vec<_> = t.ids().into_iter().map(|id| (t.path_of(id).unwrap(), *t.metrics(id).unwrap())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    #[test]
    fn intern_is_idempotent_and_shares_prefixes() {
        let mut t: Cct = Cct::new();
        let a = t.intern(&frames(&[1, 2, 3])).unwrap();
        assert_eq!(t.intern(&frames(&[1, 2, 3])).unwrap(), a);
        let b = t.intern(&frames(&[1, 2, 4])).unwrap();
        assert_ne!(a, b);
        assert_eq!(t.node_count(), 4);
        assert_eq!(t.parent(a), t.parent(b));
    }

    #[test]
    fn empty_path_is_rejected() {
        let mut t: Cct = Cct::new();
        assert_eq!(t.intern(&[]), Err(CctError::EmptyPath));
    }

    #[test]
    fn path_round_trips() {
        let mut t: Cct = Cct::new();
        let single = frames(&[1]);
        let id = t.intern(&single).unwrap();
        assert_eq!(t.path_of(id).unwrap(), single);
        let deep: Vec<FrameId> = (0..50).map(FrameId).collect();
        let id = t.intern(&deep).unwrap();
        assert_eq!(t.path_of(id).unwrap(), deep);
        assert_eq!(t.path_of(CtxId(999)), Err(CctError::UnknownContext(CtxId(999))));
        assert_eq!(t.path_of(CtxId::ROOT), Err(CctError::UnknownContext(CtxId::ROOT)));
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let mut t: Cct<u64> = Cct::new();
        let id = t.intern(&frames(&[1, 2])).unwrap();
        *t.metrics_mut(id).unwrap() = 3;
        let merged = merge(&t, &Cct::new());
        assert_eq!(path_set(&merged), path_set(&t));
        let merged = merge(&Cct::new(), &t);
        assert_eq!(path_set(&merged), path_set(&t));
    }

    #[test]
    fn merge_sums_metrics_and_commutes() {
        let mut a: Cct<u64> = Cct::new();
        let mut b: Cct<u64> = Cct::new();
        let ia = a.intern(&frames(&[1, 2])).unwrap();
        *a.metrics_mut(ia).unwrap() = 3;
        a.intern(&frames(&[1, 5, 6])).unwrap();
        b.intern(&frames(&[7])).unwrap();
        let ib = b.intern(&frames(&[1, 2])).unwrap();
        *b.metrics_mut(ib).unwrap() = 3;
        let ab = merge(&a, &b);
        let ba = merge(&b, &a);
        assert_eq!(path_set(&ab), path_set(&ba));
        let id = ab.lookup(&frames(&[1, 2])).unwrap();
        assert_eq!(*ab.metrics(id).unwrap(), 6);
        assert_eq!(ab.canonicalize().0, ba.canonicalize().0);
    }

    #[test]
    fn nodes_round_trip() {
        let mut t: Cct = Cct::new();
        t.intern(&frames(&[3, 1])).unwrap();
        t.intern(&frames(&[3, 2, 9])).unwrap();
        let rebuilt: Cct = Cct::from_nodes(&t.to_nodes()).unwrap();
        assert_eq!(rebuilt, t);
        assert!(Cct::<()>::from_nodes(&[(CtxId(2), CtxId(0), FrameId(1))]).is_err());
    }
}
