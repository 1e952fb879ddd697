//! A bank of simulated debug registers. Each armed slot watches a byte range of
//! one object and fires once on the next overlapping access. When every slot is
//! busy, new arm requests go through reservoir replacement: the t-th request
//! takes a slot with probability W/t.

use std::collections::HashMap;
use std::num::NonZeroUsize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ids::{CtxId, ObjId};
use crate::trace::AccessKind;

/// Debug registers on commodity x86 parts.
pub const DEFAULT_WATCHPOINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capacity {
    Limited(NonZeroUsize),
    Unlimited,
}

impl Capacity {
    pub fn limited(n: usize) -> Option<Capacity> {
        NonZeroUsize::new(n).map(Capacity::Limited)
    }

    pub fn as_option(self) -> Option<usize> {
        match self {
            Capacity::Limited(n) => Some(n.get()),
            Capacity::Unlimited => None,
        }
    }
}

impl Default for Capacity {
    fn default() -> Self {
        Capacity::Limited(NonZeroUsize::new(DEFAULT_WATCHPOINTS).unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchpointSlot {
    pub target_obj: ObjId,
    pub target_offset: u64,
    pub width: u8,
    pub expected_value: u64,
    pub origin_obj: ObjId,
    pub origin_access_ctx: CtxId,
    pub origin_alloc_ctx: CtxId,
}

impl WatchpointSlot {
    fn overlaps(&self, offset: u64, width: u8) -> bool {
        offset < self.target_offset + u64::from(self.width) && self.target_offset < offset + u64::from(width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArmDecision {
    ArmedNewSlot(usize),
    ReplacedSlot { slot: usize, evicted: WatchpointSlot },
    Rejected,
}

impl ArmDecision {
    pub fn armed(&self) -> bool {
        !matches!(self, ArmDecision::Rejected)
    }
}

/// An access already resolved to `(object, offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessProbe {
    pub obj: ObjId,
    pub offset: u64,
    pub width: u8,
    pub kind: AccessKind,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trap {
    pub slot: WatchpointSlot,
    pub observed_value: u64,
    pub kind: AccessKind,
    pub offset: u64,
    pub width: u8,
}

#[derive(Debug)]
pub struct WatchpointUnit {
    capacity: Capacity,
    slots: Vec<Option<WatchpointSlot>>,
    free: Vec<usize>,
    by_object: HashMap<ObjId, Vec<usize>>,
    armed: usize,
    requests_seen: u64,
    rng: ChaCha8Rng,
}

impl WatchpointUnit {
    pub fn new(capacity: Capacity, seed: u64) -> Self {
        Self {
            capacity,
            slots: Vec::new(),
            free: Vec::new(),
            by_object: HashMap::new(),
            armed: 0,
            requests_seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub fn armed_count(&self) -> usize {
        self.armed
    }

    pub fn requests_seen(&self) -> u64 {
        self.requests_seen
    }

    pub fn armed_slots(&self) -> impl Iterator<Item = &WatchpointSlot> {
        self.slots.iter().flatten()
    }

    fn is_full(&self) -> bool {
        match self.capacity {
            Capacity::Limited(w) => self.armed >= w.get(),
            Capacity::Unlimited => false,
        }
    }

    fn install(&mut self, candidate: WatchpointSlot) -> usize {
        let slot = match self.free.pop() {
            Some(i) => i,
            None => {
                self.slots.push(None);
                self.slots.len() - 1
            }
        };
        self.by_object.entry(candidate.target_obj).or_default().push(slot);
        self.slots[slot] = Some(candidate);
        self.armed += 1;
        slot
    }

    fn remove(&mut self, slot: usize) -> Option<WatchpointSlot> {
        let taken = self.slots[slot].take()?;
        if let Some(list) = self.by_object.get_mut(&taken.target_obj) {
            list.retain(|&s| s != slot);
            if list.is_empty() {
                self.by_object.remove(&taken.target_obj);
            }
        }
        self.free.push(slot);
        self.armed -= 1;
        Some(taken)
    }

    pub fn request_arm(&mut self, candidate: WatchpointSlot) -> ArmDecision {
        debug_assert!(candidate.width <= 8);
        self.requests_seen += 1;
        if !self.is_full() {
            return ArmDecision::ArmedNewSlot(self.install(candidate));
        }
        // Full, hence limited: slots.len() == W and every slot is armed.
        let pick = self.rng.gen_range(0..self.requests_seen);
        if pick >= self.slots.len() as u64 {
            return ArmDecision::Rejected;
        }
        let slot = pick as usize;
        let evicted = self.remove(slot).expect("full unit has every slot armed");
        let installed = self.install(candidate);
        debug_assert_eq!(installed, slot);
        ArmDecision::ReplacedSlot { slot, evicted }
    }

    /// Fires and disarms every slot whose watched bytes overlap the access.
    pub fn check_trap(&mut self, probe: &AccessProbe) -> Vec<Trap> {
        let Some(candidates) = self.by_object.get(&probe.obj) else {
            return Vec::new();
        };
        let hits: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&s| self.slots[s].as_ref().is_some_and(|w| w.overlaps(probe.offset, probe.width)))
            .collect();
        hits.into_iter()
            .filter_map(|s| self.remove(s))
            .map(|slot| Trap {
                slot,
                observed_value: probe.value,
                kind: probe.kind,
                offset: probe.offset,
                width: probe.width,
            })
            .collect()
    }

    pub fn disarm_for_object(&mut self, obj: ObjId) -> usize {
        let Some(list) = self.by_object.get(&obj).cloned() else {
            return 0;
        };
        list.into_iter().filter_map(|s| self.remove(s)).count()
    }
}
