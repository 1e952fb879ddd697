//! Exhaustive ground truth for a trace.
//!
//! Works on raw frame paths and its own address bookkeeping rather than the
//! detector's data structures. For every allocation context on every thread it
//! walks the sequence of objects that became "current" (first load from a
//! newer object), pairs each with its successor, and lines up the
//! predecessor's loads against the successor's: the j-th predecessor load is
//! watched in the successor after its j-th load, and the first later access
//! overlapping those bytes decides the comparison. This is what the detector
//! does when every load is sampled and no watchpoint is ever refused.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{FrameId, ObjId, Tid};
use crate::report::round_sig;
use crate::trace::{AccessKind, TraceEvent};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("trace is not replayable: {0}")]
    InvalidTrace(String),
    #[error("object {obj} at context {path:?}: computed group disagrees with its label")]
    LabelMismatch { path: Vec<FrameId>, obj: ObjId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Access {
    seq: u64,
    kind: AccessKind,
    ctx: Vec<FrameId>,
    offset: u64,
    width: u8,
    value: u64,
    inside: bool,
}

impl Access {
    fn overlaps(&self, offset: u64, width: u8) -> bool {
        self.offset < offset + u64::from(width) && offset < self.offset + u64::from(self.width)
    }
}

#[derive(Debug)]
struct Object {
    id: ObjId,
    tid: Tid,
    path: Vec<FrameId>,
    size: u64,
    base: u64,
    /// Allocation rank among objects of the same (thread, path).
    rank: u64,
    accesses: Vec<Access>,
    label: Option<String>,
}

impl Object {
    fn load_signature(&self) -> Vec<(&[FrameId], u64, u8, u64)> {
        self.accesses
            .iter()
            .filter(|a| a.kind == AccessKind::Load)
            .map(|a| (a.ctx.as_slice(), a.offset, a.width, a.value))
            .collect()
    }
}

/// One comparison the detector would make with period 1 and unlimited slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactComparison {
    pub alloc_path: Vec<FrameId>,
    pub access_path: Vec<FrameId>,
    pub old_obj: ObjId,
    pub new_obj: ObjId,
    pub offset: u64,
    pub equal: bool,
    /// The two objects have identical load histories.
    pub lifetime_equivalent: bool,
}

struct Replay {
    objects: Vec<Object>,
    /// Per (thread, path): in-bounds loads in trace order as (object index, access index).
    context_loads: BTreeMap<(Tid, Vec<FrameId>), Vec<(usize, usize)>>,
}

fn replay(events: &[TraceEvent]) -> Result<Replay, OracleError> {
    let mut objects: Vec<Object> = Vec::new();
    let mut by_id: HashMap<ObjId, usize> = HashMap::new();
    let mut live: HashMap<Tid, BTreeMap<u64, usize>> = HashMap::new();
    let mut ranks: HashMap<(Tid, Vec<FrameId>), u64> = HashMap::new();
    let mut context_loads: BTreeMap<(Tid, Vec<FrameId>), Vec<(usize, usize)>> = BTreeMap::new();
    let mut labels: HashMap<ObjId, Option<String>> = HashMap::new();
    let invalid = |m: String| OracleError::InvalidTrace(m);

    for (seq, event) in events.iter().enumerate() {
        match event {
            TraceEvent::Frame(_) => {}
            TraceEvent::GroundTruth(g) => {
                labels.insert(g.obj, g.group.clone());
            }
            TraceEvent::Alloc(a) => {
                let still_live = by_id.get(&a.obj).is_some_and(|&i| {
                    live.get(&objects[i].tid).and_then(|h| h.get(&objects[i].base)) == Some(&i)
                });
                if still_live {
                    return Err(invalid(format!("object {} allocated while live", a.obj)));
                }
                let heap = live.entry(a.tid).or_default();
                if let Some((_, &i)) = heap.range(..a.addr + a.size).next_back() {
                    if objects[i].base + objects[i].size > a.addr {
                        return Err(invalid(format!("object {} overlaps object {}", a.obj, objects[i].id)));
                    }
                }
                let rank = ranks.entry((a.tid, a.ctx.clone())).or_insert(0);
                let idx = objects.len();
                objects.push(Object {
                    id: a.obj,
                    tid: a.tid,
                    path: a.ctx.clone(),
                    size: a.size,
                    base: a.addr,
                    rank: *rank,
                    accesses: Vec::new(),
                    label: None,
                });
                *rank += 1;
                heap.insert(a.addr, idx);
                by_id.insert(a.obj, idx);
            }
            TraceEvent::Free(f) => {
                let idx = *by_id.get(&f.obj).ok_or_else(|| invalid(format!("free of unknown object {}", f.obj)))?;
                let heap = live.entry(f.tid).or_default();
                if heap.get(&objects[idx].base) != Some(&idx) {
                    return Err(invalid(format!("free of dead object {}", f.obj)));
                }
                heap.remove(&objects[idx].base);
            }
            TraceEvent::Access(a) => {
                let Some(heap) = live.get(&a.tid) else { continue };
                let Some((_, &idx)) = heap.range(..=a.addr).next_back() else { continue };
                let obj = &mut objects[idx];
                if a.addr >= obj.base + obj.size {
                    continue;
                }
                let offset = a.addr - obj.base;
                let inside = offset + u64::from(a.width) <= obj.size;
                obj.accesses.push(Access {
                    seq: seq as u64,
                    kind: a.kind,
                    ctx: a.ctx.clone(),
                    offset,
                    width: a.width,
                    value: a.value,
                    inside,
                });
                if a.kind == AccessKind::Load && inside {
                    context_loads
                        .entry((obj.tid, obj.path.clone()))
                        .or_default()
                        .push((idx, obj.accesses.len() - 1));
                }
            }
        }
    }
    for obj in &mut objects {
        obj.label = labels.get(&obj.id).cloned().flatten();
    }
    Ok(Replay { objects, context_loads })
}

fn pair_comparisons(
    objects: &[Object],
    prev: usize,
    curr: usize,
    prev_loads: &[usize],
    curr_loads: &[usize],
    out: &mut Vec<ExactComparison>,
) {
    let (p, c) = (&objects[prev], &objects[curr]);
    if p.size != c.size {
        return;
    }
    let equivalent = p.load_signature() == c.load_signature();
    for (&watched, &after) in prev_loads.iter().zip(curr_loads) {
        let tuple = &p.accesses[watched];
        let armed_at = c.accesses[after].seq;
        let Some(hit) = c.accesses.iter().find(|a| a.seq > armed_at && a.overlaps(tuple.offset, tuple.width)) else {
            continue;
        };
        if hit.kind != AccessKind::Load || hit.ctx != tuple.ctx || hit.offset != tuple.offset || hit.width != tuple.width {
            continue;
        }
        out.push(ExactComparison {
            alloc_path: c.path.clone(),
            access_path: hit.ctx.clone(),
            old_obj: p.id,
            new_obj: c.id,
            offset: hit.offset,
            equal: hit.value == tuple.value,
            lifetime_equivalent: equivalent,
        });
    }
}

fn comparisons_of(replay: &Replay) -> Vec<ExactComparison> {
    let mut out = Vec::new();
    for loads in replay.context_loads.values() {
        // Objects in the order they became current, with the loads taken while current.
        let mut chain: Vec<(usize, Vec<usize>)> = Vec::new();
        for &(obj, access) in loads {
            match chain.last_mut() {
                Some((curr, taken)) if *curr == obj => taken.push(access),
                Some((curr, _)) if replay.objects[obj].rank <= replay.objects[*curr].rank => {}
                _ => chain.push((obj, vec![access])),
            }
        }
        for w in chain.windows(2) {
            pair_comparisons(&replay.objects, w[0].0, w[1].0, &w[0].1, &w[1].1, &mut out);
        }
    }
    out
}

/// Every comparison of an exhaustive replay, grouped by thread and context in
/// thread order.
pub fn exhaustive_comparisons(events: &[TraceEvent]) -> Result<Vec<ExactComparison>, OracleError> {
    Ok(comparisons_of(&replay(events)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactCounts {
    pub equal: u64,
    pub total: u64,
    pub nonequivalent_equal: u64,
    pub nonequivalent_total: u64,
}

impl ExactCounts {
    fn add(&mut self, c: &ExactComparison) {
        self.total += 1;
        self.equal += u64::from(c.equal);
        if !c.lifetime_equivalent {
            self.nonequivalent_total += 1;
            self.nonequivalent_equal += u64::from(c.equal);
        }
    }

    pub fn theta(&self) -> Option<f64> {
        (self.total > 0).then(|| self.equal as f64 / self.total as f64)
    }

    /// Zero when every comparison came from equivalent objects.
    pub fn alpha(&self) -> f64 {
        if self.nonequivalent_total == 0 {
            0.0
        } else {
            self.nonequivalent_equal as f64 / self.nonequivalent_total as f64
        }
    }
}

/// Exact θ and α per allocation path, threads pooled.
pub fn exhaustive_theta_alpha(events: &[TraceEvent]) -> Result<BTreeMap<Vec<FrameId>, ExactCounts>, OracleError> {
    let mut out: BTreeMap<Vec<FrameId>, ExactCounts> = BTreeMap::new();
    for c in exhaustive_comparisons(events)? {
        out.entry(c.alloc_path.clone()).or_default().add(&c);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessTruth {
    pub path: Vec<FrameId>,
    pub equivalent: u64,
    pub different: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTruth {
    pub alloc_path: Vec<FrameId>,
    pub objects: u64,
    pub largest_group: u64,
    pub largest_ratio: f64,
    /// False when the largest group is tied or is the only group.
    pub lower_strict: bool,
    #[serde(flatten)]
    pub counts: ExactCounts,
    pub theta_exact: Option<f64>,
    pub alpha_exact: f64,
    /// Objects with identical load histories, largest first.
    pub groups: Vec<Vec<ObjId>>,
    /// Objects never loaded; each stands alone.
    pub no_evidence: Vec<ObjId>,
    pub by_access: Vec<AccessTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReport {
    pub version: String,
    pub contexts: Vec<ContextTruth>,
}

impl GroundTruthReport {
    pub fn context(&self, path: &[FrameId]) -> Option<&ContextTruth> {
        self.contexts.iter().find(|c| c.alloc_path == path)
    }

    pub fn to_json(&self) -> String {
        let mut rounded = self.clone();
        for c in &mut rounded.contexts {
            c.largest_ratio = round_sig(c.largest_ratio);
            c.theta_exact = c.theta_exact.map(round_sig);
            c.alpha_exact = round_sig(c.alpha_exact);
        }
        serde_json::to_string_pretty(&rounded).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn check_labels(path: &[FrameId], objects: &[&Object], groups: &[Vec<usize>]) -> Result<(), OracleError> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (g, members) in groups.iter().enumerate() {
        let mut seen: Option<&str> = None;
        for &m in members {
            let Some(label) = objects[m].label.as_deref() else { continue };
            let mismatch = || OracleError::LabelMismatch { path: path.to_vec(), obj: objects[m].id };
            if seen.is_some_and(|s| s != label) {
                return Err(mismatch());
            }
            seen = Some(label);
            if *owner.entry(label).or_insert(g) != g {
                return Err(mismatch());
            }
        }
    }
    Ok(())
}

/// Partitions each context's objects by size and load history, checks the
/// partition against any embedded labels, and attaches exact θ and α.
pub fn exact_groups(events: &[TraceEvent]) -> Result<GroundTruthReport, OracleError> {
    let replay = replay(events)?;
    let mut counts: BTreeMap<Vec<FrameId>, ExactCounts> = BTreeMap::new();
    let mut access: BTreeMap<Vec<FrameId>, BTreeMap<Vec<FrameId>, (u64, u64)>> = BTreeMap::new();
    for c in comparisons_of(&replay) {
        counts.entry(c.alloc_path.clone()).or_default().add(&c);
        let slot = access.entry(c.alloc_path.clone()).or_default().entry(c.access_path.clone()).or_default();
        if c.equal {
            slot.0 += 1;
        } else {
            slot.1 += 1;
        }
    }

    let mut by_path: BTreeMap<&[FrameId], Vec<&Object>> = BTreeMap::new();
    for obj in &replay.objects {
        by_path.entry(&obj.path).or_default().push(obj);
    }

    let mut contexts = Vec::new();
    for (path, objs) in by_path {
        let mut keyed: HashMap<(u64, Vec<(&[FrameId], u64, u8, u64)>), usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut no_evidence = Vec::new();
        for (i, obj) in objs.iter().enumerate() {
            let sig = obj.load_signature();
            if sig.is_empty() {
                no_evidence.push(obj.id);
                continue;
            }
            let g = *keyed.entry((obj.size, sig)).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        check_labels(path, &objs, &groups)?;

        let mut sizes: Vec<u64> = groups.iter().map(|g| g.len() as u64).collect();
        sizes.extend(std::iter::repeat_n(1, no_evidence.len()));
        let largest = sizes.iter().copied().max().unwrap_or(0);
        let tied = sizes.iter().filter(|&&s| s == largest).count() > 1;
        let mut id_groups: Vec<Vec<ObjId>> =
            groups.iter().map(|g| g.iter().map(|&i| objs[i].id).collect()).collect();
        id_groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        let x = objs.len() as u64;
        let c = counts.get(path).copied().unwrap_or_default();
        contexts.push(ContextTruth {
            alloc_path: path.to_vec(),
            objects: x,
            largest_group: largest,
            largest_ratio: largest as f64 / x as f64,
            lower_strict: sizes.len() > 1 && !tied,
            counts: c,
            theta_exact: c.theta(),
            alpha_exact: c.alpha(),
            groups: id_groups,
            no_evidence,
            by_access: access
                .remove(path)
                .unwrap_or_default()
                .into_iter()
                .map(|(p, (e, d))| AccessTruth { path: p, equivalent: e, different: d })
                .collect(),
        });
    }
    Ok(GroundTruthReport { version: "v1".into(), contexts })
}
