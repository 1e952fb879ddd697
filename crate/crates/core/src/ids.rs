use std::fmt;

use serde::{Deserialize, Serialize};

/// Thread id as carried in the trace.
pub type Tid = u32;

/// Identifier of a frame in the trace's frame table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(pub u32);

/// Identity of a heap object; stable for the object's lifetime, never its address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjId(pub u64);

/// Interned calling context: a node of a calling-context tree. `CtxId(0)` is the root.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CtxId(pub u32);

impl CtxId {
    pub const ROOT: CtxId = CtxId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ObjId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for CtxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Convenience for building frame paths in tests and generators.
pub fn frames(ids: &[u32]) -> Vec<FrameId> {
    ids.iter().copied().map(FrameId).collect()
}
