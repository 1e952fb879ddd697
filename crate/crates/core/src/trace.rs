//! Event-trace data model and its line-delimited text format.
//!
//! One JSON object per line, short keys:
//!
//! ```text
//! {"k":"frame","id":1,"m":"Main.run","f":"Main.java","l":12}
//! {"k":"alloc","tid":1,"ts":5,"obj":7,"addr":4096,"size":64,"ctx":[1,2]}
//! {"k":"acc","tid":1,"ts":6,"op":"ld","addr":4104,"w":8,"val":42,"ctx":[1,3]}
//! {"k":"free","tid":1,"ts":9,"obj":7}
//! {"k":"gt","obj":7,"grp":"c0g1"}
//! ```
//!
//! Frame and ground-truth records are metadata and carry no `tid`/`ts`.
//! Contexts are root-first; the leaf frame is last.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::Deserialize;
use thiserror::Error;

use crate::ids::{FrameId, ObjId, Tid};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameDef {
    pub id: FrameId,
    pub method: String,
    pub file: String,
    pub line: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessKind {
    Load,
    Store,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocEvent {
    pub tid: Tid,
    pub ts: u64,
    pub obj: ObjId,
    pub addr: u64,
    pub size: u64,
    pub ctx: Vec<FrameId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreeEvent {
    pub tid: Tid,
    pub ts: u64,
    pub obj: ObjId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessEvent {
    pub tid: Tid,
    pub ts: u64,
    pub kind: AccessKind,
    pub addr: u64,
    /// Access width in bytes: 1, 2, 4 or 8.
    pub width: u8,
    /// Value read or written, zero-extended.
    pub value: u64,
    pub ctx: Vec<FrameId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthLabel {
    pub obj: ObjId,
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Frame(FrameDef),
    Alloc(AllocEvent),
    Free(FreeEvent),
    Access(AccessEvent),
    GroundTruth(GroundTruthLabel),
}

impl TraceEvent {
    /// Thread of a behavioral event; metadata records have none.
    pub fn tid(&self) -> Option<Tid> {
        match self {
            TraceEvent::Alloc(e) => Some(e.tid),
            TraceEvent::Free(e) => Some(e.tid),
            TraceEvent::Access(e) => Some(e.tid),
            TraceEvent::Frame(_) | TraceEvent::GroundTruth(_) => None,
        }
    }

    pub fn ts(&self) -> Option<u64> {
        match self {
            TraceEvent::Alloc(e) => Some(e.ts),
            TraceEvent::Free(e) => Some(e.ts),
            TraceEvent::Access(e) => Some(e.ts),
            TraceEvent::Frame(_) | TraceEvent::GroundTruth(_) => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("event violates trace invariants: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("i/o error reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: TraceError,
    },
    #[error("{count} malformed records exceed the skip budget of {budget}")]
    SkipBudgetExceeded { count: usize, budget: usize },
}

pub fn is_valid_width(width: u8) -> bool {
    matches!(width, 1 | 2 | 4 | 8)
}

fn value_fits(width: u8, value: u64) -> bool {
    width >= 8 || value >> (u32::from(width) * 8) == 0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    k: String,
    tid: Option<Tid>,
    ts: Option<u64>,
    obj: Option<u64>,
    addr: Option<u64>,
    size: Option<u64>,
    ctx: Option<Vec<u32>>,
    op: Option<String>,
    w: Option<u8>,
    val: Option<u64>,
    id: Option<u32>,
    m: Option<String>,
    f: Option<String>,
    l: Option<u32>,
    grp: Option<String>,
}

fn need<T>(field: Option<T>, name: &str, kind: &str) -> Result<T, TraceError> {
    field.ok_or_else(|| TraceError::MalformedRecord(format!("{kind} record missing `{name}`")))
}

fn context(raw: Option<Vec<u32>>, kind: &str) -> Result<Vec<FrameId>, TraceError> {
    let raw = need(raw, "ctx", kind)?;
    if raw.is_empty() {
        return Err(TraceError::MalformedRecord(format!("{kind} record has an empty context")));
    }
    Ok(raw.into_iter().map(FrameId).collect())
}

/// Decodes one serialized record.
pub fn parse_event(line: &str) -> Result<TraceEvent, TraceError> {
    let wire: WireRecord =
        serde_json::from_str(line.trim()).map_err(|e| TraceError::MalformedRecord(e.to_string()))?;
    let kind = wire.k.as_str();
    let event = match kind {
        "frame" => TraceEvent::Frame(FrameDef {
            id: FrameId(need(wire.id, "id", kind)?),
            method: need(wire.m, "m", kind)?,
            file: wire.f.unwrap_or_default(),
            line: wire.l.unwrap_or(0),
        }),
        "alloc" => {
            let size = need(wire.size, "size", kind)?;
            if size == 0 {
                return Err(TraceError::MalformedRecord("alloc size must be positive".into()));
            }
            TraceEvent::Alloc(AllocEvent {
                tid: need(wire.tid, "tid", kind)?,
                ts: need(wire.ts, "ts", kind)?,
                obj: ObjId(need(wire.obj, "obj", kind)?),
                addr: need(wire.addr, "addr", kind)?,
                size,
                ctx: context(wire.ctx, kind)?,
            })
        }
        "free" => TraceEvent::Free(FreeEvent {
            tid: need(wire.tid, "tid", kind)?,
            ts: need(wire.ts, "ts", kind)?,
            obj: ObjId(need(wire.obj, "obj", kind)?),
        }),
        "acc" => {
            let op = need(wire.op, "op", kind)?;
            let access_kind = match op.as_str() {
                "ld" => AccessKind::Load,
                "st" => AccessKind::Store,
                other => {
                    return Err(TraceError::MalformedRecord(format!("unknown access op `{other}`")))
                }
            };
            let width = need(wire.w, "w", kind)?;
            if !is_valid_width(width) {
                return Err(TraceError::MalformedRecord(format!("invalid access width {width}")));
            }
            let value = need(wire.val, "val", kind)?;
            if !value_fits(width, value) {
                return Err(TraceError::MalformedRecord(format!(
                    "value {value} does not fit in {width} bytes"
                )));
            }
            TraceEvent::Access(AccessEvent {
                tid: need(wire.tid, "tid", kind)?,
                ts: need(wire.ts, "ts", kind)?,
                kind: access_kind,
                addr: need(wire.addr, "addr", kind)?,
                width,
                value,
                ctx: context(wire.ctx, kind)?,
            })
        }
        "gt" => TraceEvent::GroundTruth(GroundTruthLabel {
            obj: ObjId(need(wire.obj, "obj", kind)?),
            group: wire.grp,
        }),
        other => return Err(TraceError::MalformedRecord(format!("unknown record kind `{other}`"))),
    };
    Ok(event)
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn ctx_list(ctx: &[FrameId]) -> String {
    let items: Vec<String> = ctx.iter().map(|f| f.0.to_string()).collect();
    format!("[{}]", items.join(","))
}

/// Encodes one event as a single line (no trailing newline).
pub fn write_event(event: &TraceEvent) -> Result<String, TraceError> {
    let line = match event {
        TraceEvent::Frame(f) => format!(
            r#"{{"k":"frame","id":{},"m":{},"f":{},"l":{}}}"#,
            f.id.0,
            json_str(&f.method),
            json_str(&f.file),
            f.line
        ),
        TraceEvent::Alloc(a) => {
            if a.size == 0 {
                return Err(TraceError::InvariantViolation("alloc size must be positive".into()));
            }
            if a.ctx.is_empty() {
                return Err(TraceError::InvariantViolation("alloc context is empty".into()));
            }
            format!(
                r#"{{"k":"alloc","tid":{},"ts":{},"obj":{},"addr":{},"size":{},"ctx":{}}}"#,
                a.tid,
                a.ts,
                a.obj.0,
                a.addr,
                a.size,
                ctx_list(&a.ctx)
            )
        }
        TraceEvent::Free(f) => {
            format!(r#"{{"k":"free","tid":{},"ts":{},"obj":{}}}"#, f.tid, f.ts, f.obj.0)
        }
        TraceEvent::Access(a) => {
            if !is_valid_width(a.width) {
                return Err(TraceError::InvariantViolation(format!("invalid width {}", a.width)));
            }
            if !value_fits(a.width, a.value) {
                return Err(TraceError::InvariantViolation(format!(
                    "value {} does not fit in {} bytes",
                    a.value, a.width
                )));
            }
            if a.ctx.is_empty() {
                return Err(TraceError::InvariantViolation("access context is empty".into()));
            }
            let op = match a.kind {
                AccessKind::Load => "ld",
                AccessKind::Store => "st",
            };
            format!(
                r#"{{"k":"acc","tid":{},"ts":{},"op":"{}","addr":{},"w":{},"val":{},"ctx":{}}}"#,
                a.tid,
                a.ts,
                op,
                a.addr,
                a.width,
                a.value,
                ctx_list(&a.ctx)
            )
        }
        TraceEvent::GroundTruth(g) => match &g.group {
            Some(grp) => format!(r#"{{"k":"gt","obj":{},"grp":{}}}"#, g.obj.0, json_str(grp)),
            None => format!(r#"{{"k":"gt","obj":{}}}"#, g.obj.0),
        },
    };
    Ok(line)
}

/// Serializes a whole trace, one record per line.
pub fn write_trace(events: &[TraceEvent]) -> Result<String, TraceError> {
    let mut out = String::new();
    for event in events {
        out.push_str(&write_event(event)?);
        out.push('\n');
    }
    Ok(out)
}

/// A parsed trace plus the number of unparseable lines that were skipped.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub skipped: usize,
}

/// Reads a trace, tolerating up to `skip_budget` unparseable lines. Blank lines are ignored.
pub fn read_trace<R: BufRead>(reader: R, skip_budget: usize) -> Result<Trace, ReadError> {
    let mut trace = Trace::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_event(&line) {
            Ok(event) => trace.events.push(event),
            Err(source) => {
                trace.skipped += 1;
                if trace.skipped > skip_budget {
                    if skip_budget == 0 {
                        return Err(ReadError::Malformed { line: lineno + 1, source });
                    }
                    return Err(ReadError::SkipBudgetExceeded { count: trace.skipped, budget: skip_budget });
                }
            }
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceStats {
    pub event_count: u64,
    pub frame_count: u64,
    pub alloc_count: u64,
    pub free_count: u64,
    pub access_count: u64,
    pub ground_truth_count: u64,
    pub thread_count: u64,
    pub malformed_count: u64,
}

impl TraceStats {
    pub fn typed_total(&self) -> u64 {
        self.frame_count + self.alloc_count + self.free_count + self.access_count + self.ground_truth_count
    }
}

/// Single-pass trace checker. Events that break a trace invariant are counted
/// as malformed instead of by kind, and a short message is kept for each.
#[derive(Debug, Default)]
pub struct Validator {
    stats: TraceStats,
    frames: HashMap<FrameId, FrameDef>,
    /// Live intervals: base address -> (end, object).
    live_ranges: BTreeMap<u64, (u64, ObjId)>,
    live_objects: HashMap<ObjId, u64>,
    seen_objects: HashSet<ObjId>,
    last_ts: HashMap<Tid, u64>,
    threads: HashSet<Tid>,
    diagnostics: Vec<String>,
}

const MAX_DIAGNOSTICS: usize = 64;

impl Validator {
    pub fn new() -> Self {
        Self::default()
    }

    fn flag(&mut self, index: u64, msg: String) {
        self.stats.malformed_count += 1;
        if self.diagnostics.len() < MAX_DIAGNOSTICS {
            self.diagnostics.push(format!("event {index}: {msg}"));
        }
    }

    /// Counts a record that could not be parsed at all.
    pub fn observe_unparseable(&mut self) {
        let index = self.stats.event_count;
        self.stats.event_count += 1;
        self.flag(index, "unparseable record".into());
    }

    pub fn observe(&mut self, event: &TraceEvent) {
        let index = self.stats.event_count;
        self.stats.event_count += 1;
        if let Err(msg) = self.check(event) {
            self.flag(index, msg);
        }
    }

    fn check_thread(&mut self, tid: Tid, ts: u64) -> Result<(), String> {
        self.threads.insert(tid);
        self.stats.thread_count = self.threads.len() as u64;
        if let Some(&last) = self.last_ts.get(&tid) {
            if ts <= last {
                return Err(format!("thread {tid}: ts {ts} does not follow {last}"));
            }
        }
        self.last_ts.insert(tid, ts);
        Ok(())
    }

    fn check_frames(&self, ctx: &[FrameId]) -> Result<(), String> {
        match ctx.iter().find(|f| !self.frames.contains_key(f)) {
            Some(f) => Err(format!("frame {f} used before definition")),
            None if ctx.is_empty() => Err("empty context".into()),
            None => Ok(()),
        }
    }

    fn enclosing(&self, addr: u64) -> Option<(u64, u64, ObjId)> {
        self.live_ranges
            .range(..=addr)
            .next_back()
            .filter(|(_, (end, _))| addr < *end)
            .map(|(base, (end, obj))| (*base, *end, *obj))
    }

    fn check(&mut self, event: &TraceEvent) -> Result<(), String> {
        match event {
            TraceEvent::Frame(f) => {
                if let Some(prev) = self.frames.get(&f.id) {
                    if prev != f {
                        return Err(format!("frame {} redefined", f.id));
                    }
                }
                self.frames.insert(f.id, f.clone());
                self.stats.frame_count += 1;
            }
            TraceEvent::Alloc(a) => {
                self.check_thread(a.tid, a.ts)?;
                self.check_frames(&a.ctx)?;
                if a.size == 0 {
                    return Err("zero-sized allocation".into());
                }
                if self.live_objects.contains_key(&a.obj) {
                    return Err(format!("object {} reused while live", a.obj));
                }
                let end = a.addr.checked_add(a.size).ok_or("allocation wraps the address space")?;
                let overlaps = self
                    .live_ranges
                    .range(..end)
                    .next_back()
                    .is_some_and(|(_, (prev_end, _))| *prev_end > a.addr);
                if overlaps {
                    return Err(format!("object {} overlaps a live allocation", a.obj));
                }
                self.live_ranges.insert(a.addr, (end, a.obj));
                self.live_objects.insert(a.obj, a.addr);
                self.seen_objects.insert(a.obj);
                self.stats.alloc_count += 1;
            }
            TraceEvent::Free(f) => {
                self.check_thread(f.tid, f.ts)?;
                let base = self
                    .live_objects
                    .remove(&f.obj)
                    .ok_or_else(|| format!("free of unknown object {}", f.obj))?;
                self.live_ranges.remove(&base);
                self.stats.free_count += 1;
            }
            TraceEvent::Access(a) => {
                self.check_thread(a.tid, a.ts)?;
                self.check_frames(&a.ctx)?;
                if !is_valid_width(a.width) {
                    return Err(format!("invalid width {}", a.width));
                }
                match self.enclosing(a.addr) {
                    Some((_, end, _)) if a.addr + u64::from(a.width) <= end => {}
                    Some((_, _, obj)) => return Err(format!("access straddles the end of object {obj}")),
                    None => return Err(format!("access at {} outside any live object", a.addr)),
                }
                self.stats.access_count += 1;
            }
            TraceEvent::GroundTruth(g) => {
                if !self.seen_objects.contains(&g.obj) {
                    return Err(format!("ground-truth label for unknown object {}", g.obj));
                }
                self.stats.ground_truth_count += 1;
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> TraceStats {
        self.stats
    }

    pub fn finish(self) -> (TraceStats, Vec<String>) {
        (self.stats, self.diagnostics)
    }
}

/// Validates a stream of events and returns the accumulated counts.
pub fn validate_trace<'a, I>(events: I) -> TraceStats
where
    I: IntoIterator<Item = &'a TraceEvent>,
{
    let mut validator = Validator::new();
    for event in events {
        validator.observe(event);
    }
    validator.stats()
}
