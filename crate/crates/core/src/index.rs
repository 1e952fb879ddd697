//! Map from live memory intervals `[base, base + size)` to object records.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::ids::{CtxId, ObjId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectRecord {
    pub obj: ObjId,
    pub base: u64,
    pub size: u64,
    pub alloc_ctx: CtxId,
    /// Ordinal of this object among allocations at `alloc_ctx` (0-based).
    pub generation: u64,
    pub live: bool,
}

impl ObjectRecord {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.base <= addr && addr < self.end()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("allocation of object {new} overlaps live object {live}")]
    Overlap { new: ObjId, live: ObjId },
    #[error("object {0} is already live")]
    AlreadyLive(ObjId),
    #[error("unknown object {0}")]
    UnknownObject(ObjId),
    #[error("zero-sized allocation of object {0}")]
    EmptyInterval(ObjId),
}

#[derive(Debug, Default)]
pub struct ObjectIndex {
    by_base: BTreeMap<u64, ObjId>,
    live: HashMap<ObjId, ObjectRecord>,
    generations: HashMap<CtxId, u64>,
}

impl ObjectIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_alloc(
        &mut self,
        obj: ObjId,
        base: u64,
        size: u64,
        alloc_ctx: CtxId,
    ) -> Result<ObjectRecord, IndexError> {
        if size == 0 {
            return Err(IndexError::EmptyInterval(obj));
        }
        if self.live.contains_key(&obj) {
            return Err(IndexError::AlreadyLive(obj));
        }
        let end = base.saturating_add(size);
        // Only the nearest record starting below `end` can intersect.
        if let Some((_, &other)) = self.by_base.range(..end).next_back() {
            if self.live[&other].end() > base {
                return Err(IndexError::Overlap { new: obj, live: other });
            }
        }
        let counter = self.generations.entry(alloc_ctx).or_insert(0);
        let record = ObjectRecord { obj, base, size, alloc_ctx, generation: *counter, live: true };
        *counter += 1;
        self.by_base.insert(base, obj);
        self.live.insert(obj, record.clone());
        Ok(record)
    }

    /// Retires a live object; its interval becomes reusable.
    pub fn release(&mut self, obj: ObjId) -> Result<ObjectRecord, IndexError> {
        let mut record = self.live.remove(&obj).ok_or(IndexError::UnknownObject(obj))?;
        self.by_base.remove(&record.base);
        record.live = false;
        Ok(record)
    }

    /// Object enclosing `addr` and the byte offset of `addr` within it.
    pub fn resolve(&self, addr: u64) -> Option<(ObjId, u64)> {
        self.resolve_record(addr).map(|r| (r.obj, addr - r.base))
    }

    pub fn resolve_record(&self, addr: u64) -> Option<&ObjectRecord> {
        let (_, obj) = self.by_base.range(..=addr).next_back()?;
        let record = &self.live[obj];
        record.contains(addr).then_some(record)
    }

    pub fn get(&self, obj: ObjId) -> Option<&ObjectRecord> {
        self.live.get(&obj)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn live_records(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.by_base.values().map(|obj| &self.live[obj])
    }

    /// Allocations seen so far at `ctx`.
    pub fn allocations_at(&self, ctx: CtxId) -> u64 {
        self.generations.get(&ctx).copied().unwrap_or(0)
    }
}
