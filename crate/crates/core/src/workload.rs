//! Synthetic trace generator with a known object-group structure.
//!
//! Each context allocates X objects split into groups; objects of one group
//! read identical values, objects of different groups differ in at least one
//! compared field. Reads walk the fields in a per-context permuted cyclic
//! order, so every consecutive pair of objects yields the same number of
//! comparisons. The allocation order fixes how many consecutive pairs fall
//! inside one group.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ids::{FrameId, ObjId, Tid};
use crate::trace::{AccessEvent, AccessKind, AllocEvent, FrameDef, FreeEvent, GroundTruthLabel, TraceEvent};

const WORD: u64 = 8;
const MAIN_FRAME: FrameId = FrameId(1);
const FRAMES_PER_CONTEXT: u32 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueModel {
    /// Every group has its own value in every field.
    Distinct,
    /// Group 0 is a template; other groups copy each field with probability p.
    Correlated(f64),
    /// Groups share the template except in d fixed compared fields.
    NearDuplicate(usize),
}

impl std::str::FromStr for ValueModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "distinct" {
            return Ok(ValueModel::Distinct);
        }
        if let Some(p) = s.strip_prefix("correlated:") {
            return p.parse().map(ValueModel::Correlated).map_err(|e| format!("bad probability: {e}"));
        }
        if let Some(d) = s.strip_prefix("near:") {
            return d.parse().map(ValueModel::NearDuplicate).map_err(|e| format!("bad field count: {e}"));
        }
        Err(format!("unknown value model {s:?} (distinct, correlated:P, near:D)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSpec {
    pub group_sizes: Vec<u64>,
    /// Bytes; a multiple of 8.
    pub object_size: u64,
    pub reads_per_object: usize,
    pub writes_per_object: usize,
    pub values: ValueModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub contexts: Vec<ContextSpec>,
    pub threads: u32,
    pub seed: u64,
}

/// Uniform configuration: every context has the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub contexts: usize,
    pub objects_per_context: u64,
    pub group_sizes: Vec<u64>,
    pub object_size: u64,
    pub reads_per_object: usize,
    pub writes_per_object: usize,
    pub threads: u32,
    pub values: ValueModel,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            contexts: 4,
            objects_per_context: 100,
            group_sizes: vec![60, 40],
            object_size: 32,
            reads_per_object: 12,
            writes_per_object: 4,
            threads: 2,
            values: ValueModel::Distinct,
            seed: 0x5eed,
        }
    }
}

impl GenConfig {
    pub fn to_spec(&self) -> Result<WorkloadSpec, GenError> {
        let total: u64 = self.group_sizes.iter().sum();
        if total != self.objects_per_context {
            return Err(GenError::ConfigInvalid(format!(
                "group sizes sum to {total}, expected {}",
                self.objects_per_context
            )));
        }
        let ctx = ContextSpec {
            group_sizes: self.group_sizes.clone(),
            object_size: self.object_size,
            reads_per_object: self.reads_per_object,
            writes_per_object: self.writes_per_object,
            values: self.values,
        };
        Ok(WorkloadSpec { contexts: vec![ctx; self.contexts], threads: self.threads, seed: self.seed })
    }
}

pub fn generate(config: &GenConfig) -> Result<Vec<TraceEvent>, GenError> {
    generate_spec(&config.to_spec()?)
}

/// Ground-truth label of group `g` in context `c`.
pub fn group_label(context: usize, group: usize) -> String {
    format!("c{context}g{group}")
}

/// Frame path of the allocation site of context `c`.
pub fn alloc_path(context: usize) -> Vec<FrameId> {
    let base = 2 + FRAMES_PER_CONTEXT * context as u32;
    vec![MAIN_FRAME, FrameId(base), FrameId(base + 1)]
}

fn use_path(context: usize, variant: u32) -> Vec<FrameId> {
    let base = 2 + FRAMES_PER_CONTEXT * context as u32;
    vec![MAIN_FRAME, FrameId(base), FrameId(base + 2 + variant)]
}

fn frame_table(contexts: usize) -> Vec<FrameDef> {
    let mut out = vec![FrameDef { id: MAIN_FRAME, method: "Main.main".into(), file: "Main.java".into(), line: 1 }];
    for c in 0..contexts {
        let base = 2 + FRAMES_PER_CONTEXT * c as u32;
        let file = format!("Workload{c}.java");
        let names = ["drive", "make", "use0", "use1"];
        for (i, name) in names.iter().enumerate() {
            out.push(FrameDef {
                id: FrameId(base + i as u32),
                method: format!("Workload{c}.{name}"),
                file: file.clone(),
                line: 10 * (i as u32 + 1),
            });
        }
    }
    out
}

/// Number of same-group neighbours in the allocation order of a context.
///
/// Chosen so that the fraction of identical consecutive pairs, k/(X-1), lies
/// strictly between s²-s/(X-1) and s, where s is the largest group's share,
/// and as close as possible to the all-pairs identity rate.
pub fn choose_adjacencies(sizes: &[u64]) -> u64 {
    let x: u64 = sizes.iter().sum();
    let n = sizes.len() as u64;
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if n <= 1 {
        return x.saturating_sub(1);
    }
    let s = largest as f64 / x as f64;
    let lo = s * s * (x - 1) as f64 - s;
    let hi = s * (x - 1) as f64;
    let k_min = (2 * largest).saturating_sub(x + 1);
    let k_max = x - n;
    let target = sizes.iter().map(|&g| (g * (g - 1)) as f64).sum::<f64>() / x as f64;
    let eps = 1e-7;
    let nearest = |candidates: &mut dyn Iterator<Item = u64>| {
        candidates.min_by(|a, b| {
            let da = (*a as f64 - target).abs();
            let db = (*b as f64 - target).abs();
            da.total_cmp(&db).then(a.cmp(b))
        })
    };
    let mut inside = (k_min..=k_max).filter(|&k| k as f64 > lo + eps && (k as f64) < hi - eps);
    nearest(&mut inside).unwrap_or_else(|| nearest(&mut (k_min..=k_max)).expect("nonempty range"))
}

fn arrangeable(counts: &[u64], head: usize) -> bool {
    let total: u64 = counts.iter().sum();
    counts.iter().all(|&c| 2 * c <= total + 1) && 2 * counts[head] <= total
}

/// Group index of each allocation slot: groups are cut into runs, runs are
/// shuffled so no two runs of one group touch, giving exactly
/// `choose_adjacencies(sizes)` same-group neighbours.
pub fn pair_balanced_order<R: Rng + ?Sized>(sizes: &[u64], rng: &mut R) -> Vec<usize> {
    let x: u64 = sizes.iter().sum();
    let k = choose_adjacencies(sizes);
    let runs_total = x - k;
    let cap: Vec<u64> = sizes.iter().map(|&g| g.min(runs_total.div_ceil(2).max(1))).collect();
    let mut runs = vec![1u64; sizes.len()];
    let mut spare = runs_total - sizes.len() as u64;
    while spare > 0 {
        let open: Vec<usize> = (0..sizes.len()).filter(|&i| runs[i] < cap[i]).collect();
        let i = *open.choose(rng).expect("run counts are feasible");
        runs[i] += 1;
        spare -= 1;
    }

    let mut pieces: Vec<Vec<u64>> = sizes
        .iter()
        .zip(&runs)
        .map(|(&size, &r)| {
            let mut cuts: Vec<u64> = rand::seq::index::sample(rng, (size - 1) as usize, (r - 1) as usize)
                .into_iter()
                .map(|c| c as u64 + 1)
                .collect();
            cuts.sort_unstable();
            let mut prev = 0;
            let mut lens: Vec<u64> = cuts
                .into_iter()
                .map(|c| {
                    let len = c - prev;
                    prev = c;
                    len
                })
                .collect();
            lens.push(size - prev);
            lens
        })
        .collect();

    let mut remaining = runs.clone();
    let mut last: Option<usize> = None;
    let mut order = Vec::with_capacity(x as usize);
    for _ in 0..runs_total {
        let options: Vec<usize> = (0..sizes.len())
            .filter(|&g| remaining[g] > 0 && Some(g) != last)
            .filter(|&g| {
                let mut after = remaining.clone();
                after[g] -= 1;
                arrangeable(&after, g)
            })
            .collect();
        let g = *options.choose(rng).expect("run arrangement stays feasible");
        remaining[g] -= 1;
        let len = pieces[g].pop().expect("run available");
        order.extend(std::iter::repeat_n(g, len as usize));
        last = Some(g);
    }
    debug_assert_eq!(order.windows(2).filter(|w| w[0] == w[1]).count() as u64, k);
    order
}

struct ValueSource(u64);

impl ValueSource {
    fn fresh(&mut self) -> u64 {
        self.0 += 1;
        self.0.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

struct ContextPlan {
    order: Vec<usize>,
    read_fields: Vec<usize>,
    group_values: Vec<Vec<u64>>,
}

fn validate(spec: &WorkloadSpec) -> Result<(), GenError> {
    let bad = |m: String| Err(GenError::ConfigInvalid(m));
    if spec.contexts.is_empty() {
        return bad("at least one context is required".into());
    }
    if spec.threads == 0 {
        return bad("at least one thread is required".into());
    }
    for (c, ctx) in spec.contexts.iter().enumerate() {
        if ctx.group_sizes.is_empty() || ctx.group_sizes.contains(&0) {
            return bad(format!("context {c}: group sizes must be positive"));
        }
        if ctx.object_size == 0 || ctx.object_size % WORD != 0 {
            return bad(format!("context {c}: object size must be a positive multiple of 8"));
        }
        match ctx.values {
            ValueModel::Correlated(p) if !(0.0..=1.0).contains(&p) => {
                return bad(format!("context {c}: copy probability {p} outside [0, 1]"));
            }
            ValueModel::NearDuplicate(d) => {
                let fields = (ctx.object_size / WORD) as usize;
                let compared = ctx.reads_per_object.saturating_sub(fields).min(fields);
                if d == 0 || d > compared {
                    return bad(format!("context {c}: near-duplicate needs 1..={compared} differing fields"));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn plan_context<R: Rng + ?Sized>(ctx: &ContextSpec, rng: &mut R, values: &mut ValueSource) -> ContextPlan {
    let fields = (ctx.object_size / WORD) as usize;
    let mut perm: Vec<usize> = (0..fields).collect();
    perm.shuffle(rng);
    let read_fields: Vec<usize> = (0..ctx.reads_per_object).map(|i| perm[i % fields]).collect();
    // A read at position i is compared with the same field's next read at i + F.
    let compared: Vec<usize> = perm.iter().copied().take(ctx.reads_per_object.saturating_sub(fields)).collect();
    let telling: Vec<usize> = if compared.is_empty() {
        perm.iter().copied().take(ctx.reads_per_object.min(fields)).collect()
    } else {
        compared
    };

    let n = ctx.group_sizes.len();
    let template: Vec<u64> = (0..fields).map(|_| values.fresh()).collect();
    let mut group_values: Vec<Vec<u64>> = Vec::with_capacity(n);
    match ctx.values {
        ValueModel::Distinct => {
            for _ in 0..n {
                group_values.push((0..fields).map(|_| values.fresh()).collect());
            }
        }
        ValueModel::Correlated(p) => {
            group_values.push(template.clone());
            for _ in 1..n {
                let mut g: Vec<u64> =
                    template.iter().map(|&v| if rng.gen_bool(p) { v } else { values.fresh() }).collect();
                let clashes = |g: &Vec<u64>, others: &[Vec<u64>]| {
                    others.iter().any(|o| telling.iter().all(|&f| o[f] == g[f]))
                };
                if !telling.is_empty() && clashes(&g, &group_values) {
                    let f = *telling.choose(rng).expect("nonempty");
                    g[f] = values.fresh();
                }
                group_values.push(g);
            }
        }
        ValueModel::NearDuplicate(d) => {
            let mut marked = telling.clone();
            marked.shuffle(rng);
            marked.truncate(d);
            for _ in 0..n {
                let mut g = template.clone();
                for &f in &marked {
                    g[f] = values.fresh();
                }
                group_values.push(g);
            }
        }
    }

    ContextPlan { order: pair_balanced_order(&ctx.group_sizes, rng), read_fields, group_values }
}

#[derive(Default)]
struct Heap {
    next: u64,
    free: HashMap<u64, Vec<u64>>,
}

impl Heap {
    fn for_thread(tid: Tid) -> Self {
        Self { next: (u64::from(tid) + 1) << 32, free: HashMap::new() }
    }

    fn alloc(&mut self, size: u64) -> u64 {
        if let Some(addr) = self.free.get_mut(&size).and_then(Vec::pop) {
            return addr;
        }
        let addr = self.next;
        self.next += size.div_ceil(16) * 16;
        addr
    }

    fn release(&mut self, addr: u64, size: u64) {
        self.free.entry(size).or_default().push(addr);
    }
}

/// One object's events, minus thread-global fields that are filled in at emission.
enum Step {
    Alloc { size: u64, ctx: Vec<FrameId>, label: String },
    Access { kind: AccessKind, offset: u64, value: u64, ctx: Vec<FrameId> },
    Free,
}

fn lifecycle(c: usize, spec: &ContextSpec, plan: &ContextPlan, slot: usize) -> Vec<Step> {
    let group = plan.order[slot];
    let values = &plan.group_values[group];
    let fields = values.len();
    let mut steps = vec![Step::Alloc {
        size: spec.object_size,
        ctx: alloc_path(c),
        label: group_label(c, group),
    }];
    for i in 0..spec.writes_per_object {
        let f = i % fields;
        steps.push(Step::Access { kind: AccessKind::Store, offset: f as u64 * WORD, value: values[f], ctx: alloc_path(c) });
    }
    for &f in &plan.read_fields {
        steps.push(Step::Access {
            kind: AccessKind::Load,
            offset: f as u64 * WORD,
            value: values[f],
            ctx: use_path(c, (f % 2) as u32),
        });
    }
    steps.push(Step::Free);
    steps
}

/// Emits the frame table, then the thread streams interleaved one object
/// lifecycle at a time. Context c runs on thread c mod threads.
pub fn generate_spec(spec: &WorkloadSpec) -> Result<Vec<TraceEvent>, GenError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = ValueSource(rng.gen::<u32>() as u64);
    let plans: Vec<ContextPlan> = spec.contexts.iter().map(|c| plan_context(c, &mut rng, &mut values)).collect();

    let mut events: Vec<TraceEvent> = frame_table(spec.contexts.len()).into_iter().map(TraceEvent::Frame).collect();

    // Per thread: queue of (context, slot) lifecycles, contexts round-robin.
    let mut queues: Vec<Vec<(usize, usize)>> = vec![Vec::new(); spec.threads as usize];
    let longest = spec.contexts.iter().map(|c| c.group_sizes.iter().sum::<u64>()).max().unwrap_or(0);
    for slot in 0..longest as usize {
        for (c, ctx) in spec.contexts.iter().enumerate() {
            if (slot as u64) < ctx.group_sizes.iter().sum::<u64>() {
                queues[c % spec.threads as usize].push((c, slot));
            }
        }
    }

    let mut heaps: Vec<Heap> = (0..spec.threads).map(Heap::for_thread).collect();
    let mut cursors = vec![0usize; queues.len()];
    let mut ts = 0u64;
    let mut next_obj = 1u64;
    loop {
        let mut progressed = false;
        for t in 0..queues.len() {
            let Some(&(c, slot)) = queues[t].get(cursors[t]) else { continue };
            cursors[t] += 1;
            progressed = true;
            let tid = t as Tid;
            let obj = ObjId(next_obj);
            next_obj += 1;
            let mut base = 0;
            for step in lifecycle(c, &spec.contexts[c], &plans[c], slot) {
                ts += 1;
                match step {
                    Step::Alloc { size, ctx, label } => {
                        base = heaps[t].alloc(size);
                        events.push(TraceEvent::Alloc(AllocEvent { tid, ts, obj, addr: base, size, ctx }));
                        events.push(TraceEvent::GroundTruth(GroundTruthLabel { obj, group: Some(label) }));
                    }
                    Step::Access { kind, offset, value, ctx } => {
                        events.push(TraceEvent::Access(AccessEvent {
                            tid,
                            ts,
                            kind,
                            addr: base + offset,
                            width: WORD as u8,
                            value,
                            ctx,
                        }));
                    }
                    Step::Free => {
                        heaps[t].release(base, spec.contexts[c].object_size);
                        events.push(TraceEvent::Free(FreeEvent { tid, ts, obj }));
                    }
                }
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(events)
}

/// The four-object walk-through: a loop allocating at one site, with two
/// reading sites. Object 2 is never read, so pairing goes 1 to 3 to 4.
/// Replayed at period 1 with four watchpoints it yields one equivalent and one
/// different comparison at the allocation site.
pub fn example_one() -> Vec<TraceEvent> {
    const SIZE: u64 = 16;
    const OFF1: u64 = 0;
    const OFF2: u64 = 8;
    const V1: u64 = 1001;
    const V2: u64 = 2002;
    const V2_CHANGED: u64 = 2003;
    let site = vec![FrameId(1), FrameId(2)];
    let line5 = vec![FrameId(1), FrameId(3)];
    let line7 = vec![FrameId(1), FrameId(4)];
    let frame = |id: u32, method: &str, line: u32| {
        TraceEvent::Frame(FrameDef { id: FrameId(id), method: method.into(), file: "Example.java".into(), line })
    };
    let mut events = vec![
        frame(1, "Example.main", 1),
        frame(2, "Example.allocate", 3),
        frame(3, "Example.readFirst", 5),
        frame(4, "Example.readSecond", 7),
    ];
    // (object, second field value, loads as (offset, site, value))
    let plan: [(u64, u64, Vec<(u64, &Vec<FrameId>, u64)>); 4] = [
        (1, V2, vec![(OFF1, &line5, V1)]),
        (2, V2, vec![]),
        (3, V2, vec![(OFF2, &line7, V2), (OFF1, &line5, V1)]),
        (4, V2_CHANGED, vec![(OFF1, &line5, V1), (OFF2, &line7, V2_CHANGED)]),
    ];
    let mut ts = 0;
    let mut access = |kind, addr, value, ctx: &Vec<FrameId>| {
        ts += 1;
        TraceEvent::Access(AccessEvent { tid: 0, ts, kind, addr, width: 8, value, ctx: ctx.clone() })
    };
    let mut body = Vec::new();
    for (obj, second, loads) in &plan {
        let base = 0x1000 * obj;
        body.push((*obj, None));
        body.push((*obj, Some(access(AccessKind::Store, base + OFF1, V1, &site))));
        body.push((*obj, Some(access(AccessKind::Store, base + OFF2, *second, &site))));
        for (off, ctx, value) in loads {
            body.push((*obj, Some(access(AccessKind::Load, base + off, *value, ctx))));
        }
    }
    // Renumber so allocations get their own timestamps.
    let mut ts = 0;
    for (obj, entry) in body {
        ts += 1;
        match entry {
            None => events.push(TraceEvent::Alloc(AllocEvent {
                tid: 0,
                ts,
                obj: ObjId(obj),
                addr: 0x1000 * obj,
                size: SIZE,
                ctx: site.clone(),
            })),
            Some(TraceEvent::Access(mut a)) => {
                a.ts = ts;
                events.push(TraceEvent::Access(a));
            }
            Some(_) => unreachable!(),
        }
    }
    events
}
