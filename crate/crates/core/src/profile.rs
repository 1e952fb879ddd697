//! Detection profiles: a calling-context tree whose allocation-context nodes
//! carry comparison counters, plus the frame table and run settings.
//!
//! Per-thread profiles merge top-down; after every merge the tree is
//! renumbered canonically so that the same set of paths and counts always
//! serializes to the same bytes, whatever the merge order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cct::{Cct, CctError, ContextRemap, NodeMetrics};
use crate::detector::{PairCounts, RawContextCounters};
use crate::ids::{CtxId, FrameId, Tid};
use crate::trace::FrameDef;

pub const PROFILE_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("frame {0} is defined differently in the merged profiles")]
    FrameTableMismatch(FrameId),
    #[error("profiles were recorded with different settings: {0}")]
    ConfigConflict(String),
    #[error("malformed profile: {0}")]
    Malformed(String),
    #[error("bad profile tree: {0}")]
    Tree(#[from] CctError),
    #[error("profile is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextCounters {
    pub equivalent: u64,
    pub different: u64,
    pub objects: u64,
    pub samples: u64,
    pub accesses: u64,
    pub by_access: BTreeMap<CtxId, PairCounts>,
}

impl ContextCounters {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn comparisons(&self) -> u64 {
        self.equivalent + self.different
    }

    pub fn from_raw(raw: &RawContextCounters) -> Self {
        Self {
            equivalent: raw.equivalent,
            different: raw.different,
            objects: raw.objects,
            samples: raw.samples,
            accesses: raw.accesses,
            by_access: raw.by_access.clone(),
        }
    }
}

impl NodeMetrics for ContextCounters {
    fn absorb(&mut self, other: &Self, remap: &ContextRemap) {
        self.equivalent += other.equivalent;
        self.different += other.different;
        self.objects += other.objects;
        self.samples += other.samples;
        self.accesses += other.accesses;
        for (&ctx, counts) in &other.by_access {
            self.by_access.entry(remap.get(ctx)).or_default().add(counts);
        }
    }
}

/// Settings that must agree across merged profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub period: u64,
    pub jitter: f64,
    /// `None` means unlimited.
    pub watchpoints: Option<usize>,
    /// `None` means unbounded.
    pub queue_capacity: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Profile {
    pub meta: Option<RunMeta>,
    pub threads: BTreeSet<Tid>,
    pub frames: BTreeMap<FrameId, FrameDef>,
    pub tree: Cct<ContextCounters>,
}

impl Profile {
    pub fn new(meta: RunMeta) -> Self {
        Self { meta: Some(meta), ..Self::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_none() && self.threads.is_empty() && self.frames.is_empty() && self.tree.is_empty()
    }

    /// Allocation contexts with any recorded activity, in id order.
    pub fn contexts(&self) -> impl Iterator<Item = (CtxId, &ContextCounters)> {
        self.tree.ids().into_iter().filter_map(move |id| {
            let m = self.tree.metrics(id)?;
            (!m.is_empty()).then_some((id, m))
        })
    }

    pub fn add_frames<'a>(&mut self, frames: impl IntoIterator<Item = &'a FrameDef>) -> Result<(), ProfileError> {
        for f in frames {
            match self.frames.get(&f.id) {
                Some(existing) if existing != f => return Err(ProfileError::FrameTableMismatch(f.id)),
                Some(_) => {}
                None => {
                    self.frames.insert(f.id, f.clone());
                }
            }
        }
        Ok(())
    }

    /// Folds `other` in; the result is canonical.
    pub fn merge_from(&mut self, other: &Profile) -> Result<(), ProfileError> {
        match (&self.meta, &other.meta) {
            (Some(a), Some(b)) if a != b => {
                return Err(ProfileError::ConfigConflict(format!("{a:?} vs {b:?}")));
            }
            (None, Some(b)) => self.meta = Some(b.clone()),
            _ => {}
        }
        self.add_frames(other.frames.values())?;
        self.threads.extend(other.threads.iter().copied());
        self.tree.merge_from(&other.tree);
        self.tree = self.tree.canonicalize().0;
        Ok(())
    }

    pub fn canonical(&self) -> Profile {
        Profile { tree: self.tree.canonicalize().0, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        let doc = ProfileJson {
            version: PROFILE_VERSION.into(),
            meta: self.meta.clone(),
            threads: self.threads.iter().copied().collect(),
            frames: self.frames.values().map(FrameJson::from).collect(),
            nodes: self
                .tree
                .to_nodes()
                .into_iter()
                .map(|(id, parent, frame)| NodeJson { id, parent, frame })
                .collect(),
            contexts: self
                .tree
                .to_nodes()
                .into_iter()
                .filter_map(|(id, _, _)| {
                    let m = self.tree.metrics(id)?;
                    (!m.is_empty()).then(|| CountersJson {
                        ctx: id,
                        equivalent: m.equivalent,
                        different: m.different,
                        objects: m.objects,
                        samples: m.samples,
                        accesses: m.accesses,
                        by_access: m
                            .by_access
                            .iter()
                            .map(|(&ctx, c)| AccessJson { ctx, equivalent: c.equivalent, different: c.different })
                            .collect(),
                    })
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("profile serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Profile, ProfileError> {
        let doc: ProfileJson = serde_json::from_str(text)?;
        if doc.version != PROFILE_VERSION {
            return Err(ProfileError::Malformed(format!("unsupported version {:?}", doc.version)));
        }
        let nodes: Vec<(CtxId, CtxId, FrameId)> = doc.nodes.iter().map(|n| (n.id, n.parent, n.frame)).collect();
        let mut tree: Cct<ContextCounters> = Cct::from_nodes(&nodes)?;
        for c in doc.contexts {
            let check = |id: CtxId| {
                if tree.contains(id) {
                    Ok(())
                } else {
                    Err(ProfileError::Malformed(format!("counter refers to unknown context {id}")))
                }
            };
            check(c.ctx)?;
            for a in &c.by_access {
                check(a.ctx)?;
            }
            let m = tree.metrics_mut(c.ctx).expect("checked above");
            *m = ContextCounters {
                equivalent: c.equivalent,
                different: c.different,
                objects: c.objects,
                samples: c.samples,
                accesses: c.accesses,
                by_access: c
                    .by_access
                    .iter()
                    .map(|a| (a.ctx, PairCounts { equivalent: a.equivalent, different: a.different }))
                    .collect(),
            };
        }
        let mut profile = Profile {
            meta: doc.meta,
            threads: doc.threads.into_iter().collect(),
            frames: BTreeMap::new(),
            tree,
        };
        let frames: Vec<FrameDef> = doc.frames.into_iter().map(FrameDef::from).collect();
        profile.add_frames(&frames)?;
        Ok(profile)
    }
}

/// Merges in list order, starting from an empty profile.
pub fn merge_profiles(profiles: &[Profile]) -> Result<Profile, ProfileError> {
    let mut out = Profile::default();
    for p in profiles {
        out.merge_from(p)?;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ProfileJson {
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<RunMeta>,
    #[serde(default)]
    threads: Vec<Tid>,
    frames: Vec<FrameJson>,
    nodes: Vec<NodeJson>,
    contexts: Vec<CountersJson>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    id: FrameId,
    method: String,
    file: String,
    line: u32,
}

impl From<&FrameDef> for FrameJson {
    fn from(f: &FrameDef) -> Self {
        Self { id: f.id, method: f.method.clone(), file: f.file.clone(), line: f.line }
    }
}

impl From<FrameJson> for FrameDef {
    fn from(f: FrameJson) -> Self {
        Self { id: f.id, method: f.method, file: f.file, line: f.line }
    }
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: CtxId,
    parent: CtxId,
    frame: FrameId,
}

#[derive(Serialize, Deserialize)]
struct CountersJson {
    ctx: CtxId,
    equivalent: u64,
    different: u64,
    objects: u64,
    samples: u64,
    accesses: u64,
    by_access: Vec<AccessJson>,
}

#[derive(Serialize, Deserialize)]
struct AccessJson {
    ctx: CtxId,
    equivalent: u64,
    different: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::frames;

    fn meta() -> RunMeta {
        RunMeta { period: 1, jitter: 0.0, watchpoints: Some(4), queue_capacity: Some(64), seed: 7 }
    }

    fn thread_profile(tid: Tid, alloc: &[u32], access: &[u32], eq: u64, diff: u64) -> Profile {
        let mut p = Profile::new(meta());
        p.threads.insert(tid);
        let a = p.tree.intern(&frames(alloc)).unwrap();
        let u = p.tree.intern(&frames(access)).unwrap();
        let m = p.tree.metrics_mut(a).unwrap();
        m.equivalent = eq;
        m.different = diff;
        m.objects = 10;
        m.by_access.insert(u, PairCounts { equivalent: eq, different: diff });
        p
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let p = thread_profile(1, &[1, 2], &[1, 3], 3, 1).canonical();
        let merged = merge_profiles(&[p.clone(), Profile::default()]).unwrap();
        assert_eq!(merged, p);
        let merged = merge_profiles(&[Profile::default(), p.clone()]).unwrap();
        assert_eq!(merged, p);
    }

    #[test]
    fn counters_add_at_shared_paths() {
        let a = thread_profile(1, &[1, 2], &[1, 3], 3, 1);
        let b = thread_profile(2, &[1, 2], &[1, 3], 3, 1);
        let merged = merge_profiles(&[a, b]).unwrap();
        let (_, c) = merged.contexts().next().unwrap();
        assert_eq!((c.equivalent, c.different, c.objects), (6, 2, 20));
        let per_access: Vec<_> = c.by_access.values().copied().collect();
        assert_eq!(per_access, vec![PairCounts { equivalent: 6, different: 2 }]);
        assert_eq!(merged.threads.len(), 2);
    }

    #[test]
    fn merge_order_does_not_matter() {
        let a = thread_profile(1, &[1, 2], &[1, 3], 3, 1);
        let b = thread_profile(2, &[1, 5, 6], &[1, 5, 7], 2, 2);
        let ab = merge_profiles(&[a.clone(), b.clone()]).unwrap();
        let ba = merge_profiles(&[b, a]).unwrap();
        assert_eq!(ab.to_json(), ba.to_json());
    }

    #[test]
    fn conflicting_settings_are_rejected() {
        let a = thread_profile(1, &[1, 2], &[1, 3], 3, 1);
        let mut b = thread_profile(2, &[1, 2], &[1, 3], 3, 1);
        b.meta.as_mut().unwrap().period = 2;
        assert!(matches!(merge_profiles(&[a, b]), Err(ProfileError::ConfigConflict(_))));
    }

    #[test]
    fn differing_frames_are_rejected() {
        let frame = |line| FrameDef { id: FrameId(1), method: "m".into(), file: "f".into(), line };
        let mut a = Profile::default();
        a.add_frames(&[frame(1)]).unwrap();
        let mut b = Profile::default();
        b.add_frames(&[frame(2)]).unwrap();
        assert!(matches!(merge_profiles(&[a, b]), Err(ProfileError::FrameTableMismatch(FrameId(1)))));
    }

    #[test]
    fn json_round_trip() {
        let mut p = merge_profiles(&[thread_profile(1, &[1, 2], &[1, 3], 3, 1)]).unwrap();
        p.add_frames(&[FrameDef { id: FrameId(1), method: "A.b".into(), file: "A.java".into(), line: 3 }]).unwrap();
        let text = p.to_json();
        let back = Profile::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn empty_profile_json() {
        let text = Profile::default().to_json();
        assert!(!text.contains("meta"));
        assert!(Profile::from_json(&text).unwrap().is_empty());
        assert!(Profile::from_json(r#"{"version":"v0","frames":[],"nodes":[],"contexts":[]}"#).is_err());
    }
}
