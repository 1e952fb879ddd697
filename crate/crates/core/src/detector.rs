//! Replica detection state machine.
//!
//! Per allocation context we keep two tuple queues: `prev` holds samples taken
//! from the previously sampled object, `curr` those from the newest one. Every
//! sample from the newest object pops one tuple from `prev` and asks the
//! watchpoint unit to watch the same offset in the newest object, expecting
//! the old value. A later trap at a matching access context yields one
//! equivalent or different comparison.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::ids::{CtxId, ObjId};
use crate::index::ObjectRecord;
use crate::sampling::Sample;
use crate::trace::AccessKind;
use crate::watchpoint::{ArmDecision, Trap, WatchpointSlot, WatchpointUnit};

pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorConfig {
    /// Per-queue tuple bound; `None` means unbounded.
    pub queue_capacity: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { queue_capacity: Some(DEFAULT_QUEUE_CAPACITY) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleTuple {
    pub access_ctx: CtxId,
    pub offset: u64,
    pub width: u8,
    pub value: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SampledObject {
    obj: ObjId,
    generation: u64,
    size: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ContextState {
    prev_obj: Option<SampledObject>,
    prev_queue: VecDeque<SampleTuple>,
    curr_obj: Option<SampledObject>,
    curr_queue: VecDeque<SampleTuple>,
}

impl ContextState {
    pub fn prev_len(&self) -> usize {
        self.prev_queue.len()
    }

    pub fn curr_len(&self) -> usize {
        self.curr_queue.len()
    }

    pub fn current_object(&self) -> Option<ObjId> {
        self.curr_obj.map(|o| o.obj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComparisonOutcome {
    pub alloc_ctx: CtxId,
    pub access_ctx: CtxId,
    pub offset: u64,
    pub equal: bool,
    pub old_value: u64,
    pub new_value: u64,
    pub old_obj: ObjId,
    pub new_obj: ObjId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub equivalent: u64,
    pub different: u64,
}

impl PairCounts {
    pub fn total(&self) -> u64 {
        self.equivalent + self.different
    }

    pub fn add(&mut self, other: &PairCounts) {
        self.equivalent += other.equivalent;
        self.different += other.different;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawContextCounters {
    pub alloc_ctx: CtxId,
    pub equivalent: u64,
    pub different: u64,
    /// Objects allocated at this context (X).
    pub objects: u64,
    pub samples: u64,
    pub accesses: u64,
    /// Comparison counts split by the access context where they happened.
    pub by_access: BTreeMap<CtxId, PairCounts>,
}

#[derive(Debug, Default)]
pub struct Detector {
    config: DetectorConfig,
    states: HashMap<CtxId, ContextState>,
    counters: HashMap<CtxId, RawContextCounters>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        Self { config, ..Self::default() }
    }

    fn counters_for(&mut self, ctx: CtxId) -> &mut RawContextCounters {
        self.counters.entry(ctx).or_insert_with(|| RawContextCounters { alloc_ctx: ctx, ..Default::default() })
    }

    pub fn state(&self, ctx: CtxId) -> Option<&ContextState> {
        self.states.get(&ctx)
    }

    pub fn on_alloc(&mut self, record: &ObjectRecord) {
        self.states.entry(record.alloc_ctx).or_default();
        self.counters_for(record.alloc_ctx).objects += 1;
    }

    /// Counts an access that landed in an object of `alloc_ctx`.
    pub fn note_access(&mut self, alloc_ctx: CtxId) {
        self.counters_for(alloc_ctx).accesses += 1;
    }

    pub fn on_sample(&mut self, sample: &Sample, unit: &mut WatchpointUnit) -> Vec<ArmDecision> {
        self.counters_for(sample.alloc_ctx).samples += 1;
        let capacity = self.config.queue_capacity;
        let state = self.states.entry(sample.alloc_ctx).or_default();
        let tuple = SampleTuple {
            access_ctx: sample.access_ctx,
            offset: sample.offset,
            width: sample.width,
            value: sample.value,
        };
        let incoming = SampledObject { obj: sample.obj, generation: sample.generation, size: sample.object_size };

        match state.curr_obj {
            Some(curr) if curr.obj == sample.obj => {}
            Some(curr) if sample.generation > curr.generation => {
                state.prev_queue = std::mem::take(&mut state.curr_queue);
                state.prev_obj = Some(curr);
                state.curr_obj = Some(incoming);
            }
            // A sample from an object older than the current one is stale.
            Some(_) => return Vec::new(),
            None => state.curr_obj = Some(incoming),
        }

        if capacity.is_some_and(|cap| state.curr_queue.len() >= cap) {
            state.curr_queue.pop_front();
        }
        if capacity != Some(0) {
            state.curr_queue.push_back(tuple);
        }

        let Some(prev) = state.prev_obj else {
            return Vec::new();
        };
        // Objects of different sizes are never replicas of each other.
        if prev.size != incoming.size || prev.obj == incoming.obj {
            return Vec::new();
        }
        let Some(old) = state.prev_queue.pop_front() else {
            return Vec::new();
        };
        let candidate = WatchpointSlot {
            target_obj: sample.obj,
            target_offset: old.offset,
            width: old.width,
            expected_value: old.value,
            origin_obj: prev.obj,
            origin_access_ctx: old.access_ctx,
            origin_alloc_ctx: sample.alloc_ctx,
        };
        vec![unit.request_arm(candidate)]
    }

    /// Turns a trap into a comparison when it is a load of the same width at the
    /// same offset and the same access context as the originating sample.
    /// Anything else just consumes the slot.
    pub fn on_trap(&mut self, trap: &Trap, access_ctx: CtxId) -> Option<ComparisonOutcome> {
        let slot = &trap.slot;
        if trap.kind != AccessKind::Load
            || access_ctx != slot.origin_access_ctx
            || trap.width != slot.width
            || trap.offset != slot.target_offset
        {
            return None;
        }
        let equal = trap.observed_value == slot.expected_value;
        let counters = self.counters_for(slot.origin_alloc_ctx);
        let per_access = counters.by_access.entry(access_ctx).or_default();
        if equal {
            counters.equivalent += 1;
            per_access.equivalent += 1;
        } else {
            counters.different += 1;
            per_access.different += 1;
        }
        Some(ComparisonOutcome {
            alloc_ctx: slot.origin_alloc_ctx,
            access_ctx,
            offset: slot.target_offset,
            equal,
            old_value: slot.expected_value,
            new_value: trap.observed_value,
            old_obj: slot.origin_obj,
            new_obj: slot.target_obj,
        })
    }

    /// Handles object death: its watchpoints go away, queues stay so pairing
    /// continues with the next object sampled at the same context.
    pub fn on_free(&mut self, obj: ObjId, unit: &mut WatchpointUnit) -> usize {
        unit.disarm_for_object(obj)
    }

    pub fn finalize(&self) -> Vec<RawContextCounters> {
        let mut out: Vec<RawContextCounters> = self.counters.values().cloned().collect();
        out.sort_by_key(|c| c.alloc_ctx);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::watchpoint::{AccessProbe, Capacity};

    const CTX: CtxId = CtxId(3);
    const USE_A: CtxId = CtxId(5);
    const USE_B: CtxId = CtxId(7);

    fn sample(obj: u64, generation: u64, size: u64, access_ctx: CtxId, offset: u64, value: u64) -> Sample {
        Sample {
            obj: ObjId(obj),
            generation,
            object_size: size,
            alloc_ctx: CTX,
            access_ctx,
            offset,
            value,
            width: 8,
            ts: 0,
        }
    }

    fn load(obj: u64, offset: u64, value: u64) -> AccessProbe {
        AccessProbe { obj: ObjId(obj), offset, width: 8, kind: AccessKind::Load, value }
    }

    fn record(obj: u64, generation: u64, size: u64) -> ObjectRecord {
        ObjectRecord { obj: ObjId(obj), base: obj * 1024, size, alloc_ctx: CTX, generation, live: true }
    }

    #[test]
    fn alloc_creates_state_once() {
        let mut d = Detector::new(DetectorConfig::default());
        d.on_alloc(&record(1, 0, 16));
        assert!(d.state(CTX).is_some());
        d.on_alloc(&record(2, 1, 32));
        assert_eq!(d.state(CTX).unwrap().curr_len(), 0);
        assert_eq!(d.finalize()[0].objects, 2);
    }

    #[test]
    fn newer_object_sample_arms_at_old_offset() {
        let mut d = Detector::new(DetectorConfig::default());
        let mut unit = WatchpointUnit::new(Capacity::default(), 0);
        assert!(d.on_sample(&sample(1, 0, 16, USE_A, 0, 11), &mut unit).is_empty());
        let decisions = d.on_sample(&sample(3, 2, 16, USE_B, 8, 99), &mut unit);
        assert_eq!(decisions.len(), 1);
        let armed: Vec<_> = unit.armed_slots().cloned().collect();
        assert_eq!(armed.len(), 1);
        assert_eq!((armed[0].target_obj, armed[0].target_offset, armed[0].expected_value), (ObjId(3), 0, 11));
        assert_eq!(armed[0].origin_access_ctx, USE_A);
        assert_eq!(armed[0].origin_obj, ObjId(1));
    }

    #[test]
    fn size_mismatch_and_empty_prev_do_not_arm() {
        let mut d = Detector::new(DetectorConfig::default());
        let mut unit = WatchpointUnit::new(Capacity::default(), 0);
        // First sampled object: nothing to compare against.
        assert!(d.on_sample(&sample(1, 0, 16, USE_A, 0, 1), &mut unit).is_empty());
        // Different size successor: enqueued, not armed.
        assert!(d.on_sample(&sample(2, 1, 32, USE_A, 0, 1), &mut unit).is_empty());
        assert_eq!(d.state(CTX).unwrap().curr_len(), 1);
        // Same size as object 2, but object 2's queue is drained after one pop.
        assert_eq!(d.on_sample(&sample(3, 2, 32, USE_A, 0, 1), &mut unit).len(), 1);
        assert!(d.on_sample(&sample(3, 2, 32, USE_A, 8, 1), &mut unit).is_empty());
        assert_eq!(unit.armed_count(), 1);
    }

    #[test]
    fn stale_samples_are_ignored() {
        let mut d = Detector::new(DetectorConfig::default());
        let mut unit = WatchpointUnit::new(Capacity::default(), 0);
        d.on_sample(&sample(1, 0, 16, USE_A, 0, 1), &mut unit);
        d.on_sample(&sample(2, 1, 16, USE_A, 0, 1), &mut unit);
        assert!(d.on_sample(&sample(1, 0, 16, USE_A, 8, 1), &mut unit).is_empty());
        assert_eq!(d.state(CTX).unwrap().current_object(), Some(ObjId(2)));
    }

    #[test]
    fn trap_outcomes_follow_value_equality() {
        let mut d = Detector::new(DetectorConfig::default());
        let mut unit = WatchpointUnit::new(Capacity::default(), 0);
        d.on_sample(&sample(1, 0, 16, USE_A, 0, 42), &mut unit);
        d.on_sample(&sample(1, 0, 16, USE_A, 8, 42), &mut unit);
        d.on_sample(&sample(2, 1, 16, USE_B, 8, 0), &mut unit);
        d.on_sample(&sample(2, 1, 16, USE_B, 8, 0), &mut unit);

        let traps = unit.check_trap(&load(2, 0, 42));
        let out = d.on_trap(&traps[0], USE_A).unwrap();
        assert!(out.equal);
        assert_ne!(out.old_obj, out.new_obj);
        let traps = unit.check_trap(&load(2, 8, 41));
        assert!(!d.on_trap(&traps[0], USE_A).unwrap().equal);

        let c = &d.finalize()[0];
        assert_eq!((c.equivalent, c.different), (1, 1));
        assert_eq!(c.by_access[&USE_A], PairCounts { equivalent: 1, different: 1 });
    }

    #[test]
    fn store_or_foreign_context_trap_is_discarded() {
        let mut d = Detector::new(DetectorConfig::default());
        let mut unit = WatchpointUnit::new(Capacity::default(), 0);
        d.on_sample(&sample(1, 0, 16, USE_A, 0, 42), &mut unit);
        d.on_sample(&sample(1, 0, 16, USE_A, 8, 42), &mut unit);
        d.on_sample(&sample(2, 1, 16, USE_A, 8, 0), &mut unit);
        d.on_sample(&sample(2, 1, 16, USE_A, 8, 0), &mut unit);

        let store = AccessProbe { obj: ObjId(2), offset: 0, width: 8, kind: AccessKind::Store, value: 42 };
        let traps = unit.check_trap(&store);
        assert!(d.on_trap(&traps[0], USE_A).is_none());
        let traps = unit.check_trap(&load(2, 8, 42));
        assert!(d.on_trap(&traps[0], USE_B).is_none());
        assert_eq!(unit.armed_count(), 0);
        let c = &d.finalize()[0];
        assert_eq!((c.equivalent, c.different), (0, 0));
    }

    #[test]
    fn width_mismatch_is_discarded() {
        let mut d = Detector::new(DetectorConfig::default());
        let mut unit = WatchpointUnit::new(Capacity::default(), 0);
        d.on_sample(&sample(1, 0, 16, USE_A, 0, 42), &mut unit);
        d.on_sample(&sample(2, 1, 16, USE_A, 8, 0), &mut unit);
        let narrow = AccessProbe { obj: ObjId(2), offset: 0, width: 4, kind: AccessKind::Load, value: 42 };
        let traps = unit.check_trap(&narrow);
        assert_eq!(traps.len(), 1);
        assert!(d.on_trap(&traps[0], USE_A).is_none());
    }

    #[test]
    fn free_disarms_and_pairing_continues() {
        let mut d = Detector::new(DetectorConfig::default());
        let mut unit = WatchpointUnit::new(Capacity::default(), 0);
        d.on_sample(&sample(1, 0, 16, USE_A, 0, 42), &mut unit);
        d.on_sample(&sample(1, 0, 16, USE_A, 8, 43), &mut unit);
        d.on_sample(&sample(2, 1, 16, USE_A, 8, 0), &mut unit);
        assert_eq!(d.on_free(ObjId(2), &mut unit), 1);
        assert_eq!(d.on_free(ObjId(5), &mut unit), 0);
        // Object 2's queue survives its death and pairs with object 3.
        assert_eq!(d.on_sample(&sample(3, 2, 16, USE_A, 0, 0), &mut unit).len(), 1);
        let armed: Vec<_> = unit.armed_slots().cloned().collect();
        assert_eq!((armed[0].origin_obj, armed[0].target_offset), (ObjId(2), 8));
    }

    #[test]
    fn queue_capacity_evicts_oldest() {
        let mut d = Detector::new(DetectorConfig { queue_capacity: Some(2) });
        let mut unit = WatchpointUnit::new(Capacity::Unlimited, 0);
        for (i, off) in [0u64, 8, 16].iter().enumerate() {
            d.on_sample(&sample(1, 0, 32, USE_A, *off, i as u64), &mut unit);
        }
        assert_eq!(d.state(CTX).unwrap().curr_len(), 2);
        d.on_sample(&sample(2, 1, 32, USE_A, 24, 0), &mut unit);
        let first: Vec<_> = unit.armed_slots().map(|s| s.target_offset).collect();
        assert_eq!(first, vec![8]);
    }
}
