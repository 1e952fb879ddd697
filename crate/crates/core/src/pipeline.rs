//! Trace replay. Each thread's events go through their own object index,
//! sampler, watchpoint unit and detector; the per-thread profiles are merged in
//! ascending thread order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::bounds;
use crate::cct::{Cct, CctError};
use crate::detector::{Detector, DetectorConfig};
use crate::ids::{FrameId, Tid};
use crate::index::{IndexError, ObjectIndex};
use crate::oracle::{self, GroundTruthReport, OracleError};
use crate::profile::{ContextCounters, Profile, ProfileError, RunMeta};
use crate::report::{self, AlphaSource, RankedReport};
use crate::sampling::{self, materialize, Sampler, SamplerConfig};
use crate::trace::{self, FrameDef, TraceError, TraceEvent};
use crate::watchpoint::{AccessProbe, Capacity, WatchpointUnit};
use crate::workload::{self, GenError, WorkloadSpec};

/// Stream tag mixed into per-thread seeds so the watchpoint unit and the
/// sampler of one thread never share a random stream.
const WATCHPOINT_STREAM: u64 = 0x7761_7463_6870_6f69;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub sampler: SamplerConfig,
    pub watchpoints: Capacity,
    pub detector: DetectorConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { sampler: SamplerConfig::default(), watchpoints: Capacity::default(), detector: DetectorConfig::default() }
    }
}

impl DetectConfig {
    /// Every load sampled, no slot ever refused, queues unbounded.
    pub fn exhaustive(seed: u64) -> Self {
        Self {
            sampler: SamplerConfig { period: 1, jitter: 0.0, seed },
            watchpoints: Capacity::Unlimited,
            detector: DetectorConfig { queue_capacity: None },
        }
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            period: self.sampler.period,
            jitter: self.sampler.jitter,
            watchpoints: self.watchpoints.as_option(),
            queue_capacity: self.detector.queue_capacity,
            seed: self.sampler.seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("thread {tid}: {source}")]
    Index {
        tid: Tid,
        #[source]
        source: IndexError,
    },
    #[error("thread {tid}: {source}")]
    Context {
        tid: Tid,
        #[source]
        source: CctError,
    },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

struct Worker {
    tid: Tid,
    index: ObjectIndex,
    tree: Cct<ContextCounters>,
    sampler: Sampler,
    unit: WatchpointUnit,
    detector: Detector,
}

impl Worker {
    fn new(tid: Tid, cfg: &DetectConfig) -> Self {
        let seed = sampling::thread_seed(cfg.sampler.seed, tid);
        Self {
            tid,
            index: ObjectIndex::new(),
            tree: Cct::new(),
            sampler: Sampler::new(SamplerConfig { seed, ..cfg.sampler }),
            unit: WatchpointUnit::new(cfg.watchpoints, seed ^ WATCHPOINT_STREAM),
            detector: Detector::new(cfg.detector),
        }
    }

    fn intern(&mut self, path: &[FrameId]) -> Result<crate::ids::CtxId, PipelineError> {
        self.tree.intern(path).map_err(|source| PipelineError::Context { tid: self.tid, source })
    }

    fn step(&mut self, event: &TraceEvent) -> Result<(), PipelineError> {
        let tid = self.tid;
        match event {
            TraceEvent::Alloc(a) => {
                let ctx = self.intern(&a.ctx)?;
                let record = self
                    .index
                    .register_alloc(a.obj, a.addr, a.size, ctx)
                    .map_err(|source| PipelineError::Index { tid, source })?;
                self.detector.on_alloc(&record);
            }
            TraceEvent::Free(f) => {
                self.index.release(f.obj).map_err(|source| PipelineError::Index { tid, source })?;
                self.detector.on_free(f.obj, &mut self.unit);
            }
            TraceEvent::Access(a) => {
                if let Some(record) = self.index.resolve_record(a.addr) {
                    let probe = AccessProbe {
                        obj: record.obj,
                        offset: a.addr - record.base,
                        width: a.width,
                        kind: a.kind,
                        value: a.value,
                    };
                    self.detector.note_access(record.alloc_ctx);
                    let traps = self.unit.check_trap(&probe);
                    if !traps.is_empty() {
                        let access_ctx = self.intern(&a.ctx)?;
                        for trap in &traps {
                            self.detector.on_trap(trap, access_ctx);
                        }
                    }
                }
                if let Some(trigger) = self.sampler.offer(a) {
                    if let Some(sample) = materialize(trigger, &self.index, &mut self.tree) {
                        self.detector.on_sample(&sample, &mut self.unit);
                    }
                }
            }
            TraceEvent::Frame(_) | TraceEvent::GroundTruth(_) => {}
        }
        Ok(())
    }

    fn finish(mut self, meta: RunMeta) -> Profile {
        for raw in self.detector.finalize() {
            if let Some(m) = self.tree.metrics_mut(raw.alloc_ctx) {
                *m = ContextCounters::from_raw(&raw);
            }
        }
        let mut profile = Profile::new(meta);
        profile.threads.insert(self.tid);
        profile.tree = self.tree;
        profile
    }
}

fn frame_defs(events: &[TraceEvent]) -> Vec<FrameDef> {
    events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Frame(f) => Some(f.clone()),
            _ => None,
        })
        .collect()
}

/// One profile per thread, in ascending thread order. Threads replay in parallel.
pub fn thread_profiles(events: &[TraceEvent], cfg: &DetectConfig) -> Result<Vec<Profile>, PipelineError> {
    let frames = frame_defs(events);
    let mut streams: BTreeMap<Tid, Vec<&TraceEvent>> = BTreeMap::new();
    for e in events {
        if let Some(tid) = e.tid() {
            streams.entry(tid).or_default().push(e);
        }
    }
    let results: Vec<Result<Profile, PipelineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .map(|(&tid, stream)| {
                let frames = &frames;
                scope.spawn(move || {
                    let mut worker = Worker::new(tid, cfg);
                    for e in stream {
                        worker.step(e)?;
                    }
                    let mut profile = worker.finish(cfg.meta());
                    profile.add_frames(frames)?;
                    Ok(profile)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("replay worker panicked")).collect()
    });
    results.into_iter().collect()
}

/// Replays a trace and returns the merged, canonical profile.
pub fn detect(events: &[TraceEvent], cfg: &DetectConfig) -> Result<Profile, PipelineError> {
    let mut merged = Profile::new(cfg.meta());
    merged.add_frames(&frame_defs(events))?;
    for p in thread_profiles(events, cfg)? {
        merged.merge_from(&p)?;
    }
    Ok(merged.canonical())
}

#[derive(Debug, Error)]
pub enum E2eError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Detect(#[from] PipelineError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub alloc_path: Vec<FrameId>,
    pub objects: u64,
    pub theta_est: Option<f64>,
    pub theta_exact: Option<f64>,
    pub alpha_exact: f64,
    pub largest_ratio: f64,
    /// Theorem check on exact θ and α; `None` when θ ≤ α or X < 2.
    pub contained: Option<bool>,
    pub suspect: bool,
}

impl SummaryRow {
    pub fn abs_error(&self) -> Option<f64> {
        Some((self.theta_est? - self.theta_exact?).abs())
    }
}

#[derive(Debug, Clone)]
pub struct E2eOutput {
    pub trace: String,
    pub profile: Profile,
    pub truth: GroundTruthReport,
    pub report: RankedReport,
    pub summary: Vec<SummaryRow>,
}

/// Generate, detect, run the oracle, rank with oracle α, and compare.
pub fn end_to_end(spec: &WorkloadSpec, cfg: &DetectConfig, threshold: f64) -> Result<E2eOutput, E2eError> {
    let events = workload::generate_spec(spec)?;
    let trace = trace::write_trace(&events)?;
    let profile = detect(&events, cfg)?;
    let truth = oracle::exact_groups(&events)?;
    let report = report::rank(&profile, threshold, &AlphaSource::from_oracle(&truth, 0.0));
    let summary = summarize(&profile, &truth, threshold);
    Ok(E2eOutput { trace, profile, truth, report, summary })
}

pub fn summarize(profile: &Profile, truth: &GroundTruthReport, threshold: f64) -> Vec<SummaryRow> {
    truth
        .contexts
        .iter()
        .map(|t| {
            let est = profile
                .tree
                .lookup(&t.alloc_path)
                .and_then(|id| profile.tree.metrics(id))
                .and_then(|m| bounds::theta(m.equivalent, m.different).ok());
            let contained = t.theta_exact.and_then(|theta| {
                bounds::containment(theta, t.alpha_exact, t.objects, t.largest_ratio, t.lower_strict)
                    .ok()
                    .flatten()
                    .map(|c| c.holds())
            });
            SummaryRow {
                alloc_path: t.alloc_path.clone(),
                objects: t.objects,
                theta_est: est,
                theta_exact: t.theta_exact,
                alpha_exact: t.alpha_exact,
                largest_ratio: t.largest_ratio,
                contained,
                suspect: est.is_some_and(|e| bounds::is_suspect(e, threshold)),
            }
        })
        .collect()
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::from("alloc_path\tobjects\ttheta_est\ttheta_exact\tabs_err\talpha\tlargest_ratio\tcontained\tsuspect\n");
    for r in rows {
        let path: Vec<String> = r.alloc_path.iter().map(|f| f.to_string()).collect();
        let contained = match r.contained {
            Some(true) => "yes",
            Some(false) => "NO",
            None => "n/a",
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{}",
            path.join(";"),
            r.objects,
            fmt(r.theta_est),
            fmt(r.theta_exact),
            fmt(r.abs_error()),
            r.alpha_exact,
            r.largest_ratio,
            contained,
            if r.suspect { "yes" } else { "no" }
        );
    }
    out
}
