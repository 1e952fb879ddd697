//! Simulated PMU load sampling: a per-thread countdown over load events whose
//! reload value is drawn uniformly around the configured period.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cct::{Cct, NodeMetrics};
use crate::ids::{CtxId, ObjId};
use crate::index::ObjectIndex;
use crate::trace::{AccessEvent, AccessKind};

/// Period used on real hardware; desk-scale traces need a far smaller one.
pub const HARDWARE_PERIOD: u64 = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Loads per sample, on average. Must be at least 1.
    pub period: u64,
    /// Relative half-width of the uniform jitter, in `[0, 1)`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { period: 101, jitter: 0.25, seed: 0x5eed }
    }
}

impl SamplerConfig {
    pub fn is_valid(&self) -> bool {
        self.period >= 1 && (0.0..1.0).contains(&self.jitter)
    }
}

/// Draws the next countdown value from `[period(1-j), period(1+j)]`, rounded, at least 1.
pub fn next_gap<R: Rng + ?Sized>(config: &SamplerConfig, rng: &mut R) -> u64 {
    if config.jitter == 0.0 || config.period == 1 {
        return config.period.max(1);
    }
    let p = config.period as f64;
    let lo = p * (1.0 - config.jitter);
    let hi = p * (1.0 + config.jitter);
    let gap = rng.gen_range(lo..=hi).round() as u64;
    gap.max(1)
}

/// Derives an independent stream seed for one thread.
pub fn thread_seed(seed: u64, tid: u32) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (u64::from(tid).wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A load selected by the countdown, not yet attributed to an object.
#[derive(Debug, Clone, Copy)]
pub struct SampleTrigger<'a> {
    pub access: &'a AccessEvent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub obj: ObjId,
    pub generation: u64,
    pub object_size: u64,
    pub alloc_ctx: CtxId,
    pub access_ctx: CtxId,
    pub offset: u64,
    pub value: u64,
    pub width: u8,
    pub ts: u64,
}

#[derive(Debug)]
pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
    countdown: u64,
    triggers: u64,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let countdown = next_gap(&config, &mut rng);
        Self { config, rng, countdown, triggers: 0 }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn triggers(&self) -> u64 {
        self.triggers
    }

    /// Counts one access; loads that drive the countdown to zero become triggers.
    pub fn offer<'a>(&mut self, access: &'a AccessEvent) -> Option<SampleTrigger<'a>> {
        if access.kind != AccessKind::Load {
            return None;
        }
        self.countdown -= 1;
        if self.countdown > 0 {
            return None;
        }
        self.countdown = next_gap(&self.config, &mut self.rng);
        self.triggers += 1;
        Some(SampleTrigger { access })
    }
}

/// Attributes a triggered load to the live object enclosing it, interning its
/// access context. Loads outside tracked objects yield nothing.
pub fn materialize<M: NodeMetrics>(
    trigger: SampleTrigger<'_>,
    index: &ObjectIndex,
    contexts: &mut Cct<M>,
) -> Option<Sample> {
    let access = trigger.access;
    let record = index.resolve_record(access.addr)?;
    let offset = access.addr - record.base;
    if offset + u64::from(access.width) > record.size {
        return None;
    }
    let access_ctx = contexts.intern(&access.ctx).ok()?;
    Some(Sample {
        obj: record.obj,
        generation: record.generation,
        object_size: record.size,
        alloc_ctx: record.alloc_ctx,
        access_ctx,
        offset,
        value: access.value,
        width: access.width,
        ts: access.ts,
    })
}
