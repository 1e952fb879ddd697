//! Ranking of allocation contexts and the three output formats: JSON, folded
//! stacks for flame-graph tools, and plain text.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::bounds::{self, Clamped, ReplicationRatio};
use crate::ids::{CtxId, FrameId};
use crate::oracle::GroundTruthReport;
use crate::profile::Profile;
use crate::trace::FrameDef;

pub const REPORT_VERSION: &str = "v1";

/// Rounds to six significant digits. Serialization then prints the shortest
/// form, so 1 comes out as `1.0`.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Where α comes from for each context.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSource {
    by_path: BTreeMap<Vec<FrameId>, f64>,
    fallback: f64,
}

impl AlphaSource {
    pub fn constant(alpha: f64) -> Self {
        Self { by_path: BTreeMap::new(), fallback: alpha }
    }

    /// Exact α per allocation path, recomputed from the integer counts.
    pub fn from_oracle(truth: &GroundTruthReport, fallback: f64) -> Self {
        let by_path = truth.contexts.iter().map(|c| (c.alloc_path.clone(), c.counts.alpha())).collect();
        Self { by_path, fallback }
    }

    /// α for a path and whether it came from the oracle.
    pub fn lookup(&self, path: &[FrameId]) -> (f64, bool) {
        match self.by_path.get(path) {
            Some(&a) => (a, true),
            None => (self.fallback, false),
        }
    }
}

impl Default for AlphaSource {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessLine {
    pub ctx: CtxId,
    pub path: Vec<FrameId>,
    pub equivalent: u64,
    pub different: u64,
}

impl AccessLine {
    pub fn comparisons(&self) -> u64 {
        self.equivalent + self.different
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedContext {
    pub ctx: CtxId,
    pub alloc_path: Vec<FrameId>,
    pub equivalent: u64,
    pub different: u64,
    pub objects: u64,
    pub samples: u64,
    pub accesses: u64,
    pub theta: f64,
    pub suspect: bool,
    pub alpha: f64,
    pub alpha_from_oracle: bool,
    pub prob_a: Option<Clamped>,
    pub omega: Option<Clamped>,
    /// Needs at least two objects.
    pub gamma: Option<Clamped>,
    pub access: Vec<AccessLine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedReport {
    pub threshold: f64,
    pub frames: BTreeMap<FrameId, FrameDef>,
    pub contexts: Vec<RankedContext>,
    pub ratio: Option<ReplicationRatio>,
    pub object_weighted: Option<f64>,
}

impl RankedReport {
    pub fn suspects(&self) -> impl Iterator<Item = &RankedContext> {
        self.contexts.iter().filter(|c| c.suspect)
    }
}

/// Orders contexts with comparisons by θ, then equivalent count, then id.
pub fn rank(profile: &Profile, threshold: f64, alpha: &AlphaSource) -> RankedReport {
    let mut contexts = Vec::new();
    for (ctx, m) in profile.contexts() {
        let Ok(theta) = bounds::theta(m.equivalent, m.different) else { continue };
        let alloc_path = profile.tree.path_of(ctx).expect("context from this tree");
        let (a, from_oracle) = alpha.lookup(&alloc_path);
        let mut access: Vec<AccessLine> = m
            .by_access
            .iter()
            .map(|(&ctx, c)| AccessLine {
                ctx,
                path: profile.tree.path_of(ctx).expect("context from this tree"),
                equivalent: c.equivalent,
                different: c.different,
            })
            .filter(|l| l.comparisons() > 0)
            .collect();
        access.sort_by(|x, y| y.comparisons().cmp(&x.comparisons()).then(x.ctx.cmp(&y.ctx)));
        contexts.push(RankedContext {
            ctx,
            alloc_path,
            equivalent: m.equivalent,
            different: m.different,
            objects: m.objects,
            samples: m.samples,
            accesses: m.accesses,
            theta,
            suspect: bounds::is_suspect(theta, threshold),
            alpha: a,
            alpha_from_oracle: from_oracle,
            prob_a: bounds::prob_a(theta, a).ok(),
            omega: bounds::lower_bound(theta, a).ok(),
            gamma: bounds::upper_bound(theta, a, m.objects).ok(),
            access,
        });
    }
    contexts.sort_by(|x, y| {
        y.theta.total_cmp(&x.theta).then(y.equivalent.cmp(&x.equivalent)).then(x.ctx.cmp(&y.ctx))
    });
    let pairs: Vec<(u64, u64)> = contexts.iter().map(|c| (c.equivalent, c.different)).collect();
    let triples: Vec<(u64, u64, u64)> = contexts.iter().map(|c| (c.equivalent, c.different, c.objects)).collect();
    RankedReport {
        threshold,
        frames: profile.frames.clone(),
        ratio: bounds::replication_ratio(&pairs).ok(),
        object_weighted: bounds::object_weighted_ratio(&triples).ok(),
        contexts,
    }
}

fn frame_text(frames: &BTreeMap<FrameId, FrameDef>, id: FrameId) -> String {
    match frames.get(&id) {
        Some(f) => format!("{} ({}:{})", f.method, f.file, f.line),
        None => format!("frame#{id}"),
    }
}

fn folded_label(frames: &BTreeMap<FrameId, FrameDef>, id: FrameId) -> String {
    let raw = match frames.get(&id) {
        Some(f) => f.method.clone(),
        None => format!("frame#{id}"),
    };
    raw.chars().map(|c| if c == ';' || c.is_whitespace() { '_' } else { c }).collect()
}

/// One line per (allocation context, access path), in ranked order:
/// the access stack and the number of comparisons made there.
pub fn emit_folded(report: &RankedReport) -> String {
    let mut out = String::new();
    for c in &report.contexts {
        for line in &c.access {
            let stack: Vec<String> = line.path.iter().map(|&f| folded_label(&report.frames, f)).collect();
            let _ = writeln!(out, "{} {}", stack.join(";"), line.comparisons());
        }
    }
    out
}

#[derive(Serialize)]
struct ReportJson {
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replication_ratio: Option<RatioJson>,
    contexts: Vec<EntryJson>,
}

#[derive(Serialize)]
struct RatioJson {
    pooled: f64,
    #[serde(rename = "macro")]
    macro_average: f64,
    object_weighted: Option<f64>,
}

#[derive(Serialize)]
struct EntryJson {
    rank: usize,
    ctx: CtxId,
    alloc_path: Vec<String>,
    theta: f64,
    equivalent: u64,
    different: u64,
    objects: u64,
    samples: u64,
    accesses: u64,
    suspect: bool,
    alpha: f64,
    alpha_source: &'static str,
    prob_a: Option<f64>,
    omega: Option<f64>,
    omega_clamped: bool,
    gamma: Option<f64>,
    gamma_capped: bool,
    access: Vec<AccessJson>,
}

#[derive(Serialize)]
struct AccessJson {
    path: Vec<String>,
    equivalent: u64,
    different: u64,
}

pub fn emit_json(report: &RankedReport) -> String {
    let doc = ReportJson {
        version: REPORT_VERSION,
        threshold: (!report.contexts.is_empty()).then(|| round_sig(report.threshold)),
        replication_ratio: report.ratio.map(|r| RatioJson {
            pooled: round_sig(r.pooled),
            macro_average: round_sig(r.macro_average),
            object_weighted: report.object_weighted.map(round_sig),
        }),
        contexts: report
            .contexts
            .iter()
            .enumerate()
            .map(|(i, c)| EntryJson {
                rank: i + 1,
                ctx: c.ctx,
                alloc_path: c.alloc_path.iter().map(|&f| frame_text(&report.frames, f)).collect(),
                theta: round_sig(c.theta),
                equivalent: c.equivalent,
                different: c.different,
                objects: c.objects,
                samples: c.samples,
                accesses: c.accesses,
                suspect: c.suspect,
                alpha: round_sig(c.alpha),
                alpha_source: if c.alpha_from_oracle { "oracle" } else { "default" },
                prob_a: c.prob_a.map(|a| round_sig(a.value)),
                omega: c.omega.map(|w| round_sig(w.value)),
                omega_clamped: c.omega.is_some_and(|w| w.clamped),
                gamma: c.gamma.map(|g| round_sig(g.value)),
                gamma_capped: c.gamma.is_some_and(|g| g.clamped),
                access: c
                    .access
                    .iter()
                    .map(|l| AccessJson {
                        path: l.path.iter().map(|&f| frame_text(&report.frames, f)).collect(),
                        equivalent: l.equivalent,
                        different: l.different,
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("report serializes")
}

fn fmt_opt(v: Option<Clamped>) -> String {
    match v {
        Some(c) if c.clamped => format!("{:.4}*", c.value),
        Some(c) => format!("{:.4}", c.value),
        None => "n/a".into(),
    }
}

pub fn emit_text(report: &RankedReport) -> String {
    let mut out = String::new();
    if report.contexts.is_empty() {
        out.push_str("no allocation context recorded any comparison\n");
        return out;
    }
    if let Some(r) = report.ratio {
        let _ = write!(out, "replication ratio: pooled {:.4}, per-context mean {:.4}", r.pooled, r.macro_average);
        if let Some(w) = report.object_weighted {
            let _ = write!(out, ", object-weighted {w:.4}");
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "{} contexts, {} above threshold {}",
        report.contexts.len(),
        report.suspects().count(),
        report.threshold
    );
    for (i, c) in report.contexts.iter().enumerate() {
        out.push('\n');
        let _ = writeln!(
            out,
            "#{} theta {:.4}{}  equivalent {} different {}  objects {}  samples {}",
            i + 1,
            c.theta,
            if c.suspect { "  SUSPECT" } else { "" },
            c.equivalent,
            c.different,
            c.objects,
            c.samples
        );
        let source = if c.alpha_from_oracle { "oracle" } else { "default, optimistic" };
        let _ = writeln!(
            out,
            "   alpha {:.4} ({source})  lower {}  upper {}",
            c.alpha,
            fmt_opt(c.omega),
            fmt_opt(c.gamma)
        );
        let _ = writeln!(out, "   allocated at:");
        for &f in &c.alloc_path {
            let _ = writeln!(out, "     {}", frame_text(&report.frames, f));
        }
        for line in &c.access {
            let leaf = line.path.last().map(|&f| frame_text(&report.frames, f)).unwrap_or_default();
            let _ = writeln!(out, "   read at {leaf}: {} equivalent, {} different", line.equivalent, line.different);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::PairCounts;
    use crate::ids::frames;
    use crate::profile::merge_profiles;

    fn profile(entries: &[(&[u32], &[u32], u64, u64)]) -> Profile {
        let mut p = Profile::default();
        for (alloc, access, eq, diff) in entries {
            let a = p.tree.intern(&frames(alloc)).unwrap();
            let u = p.tree.intern(&frames(access)).unwrap();
            let m = p.tree.metrics_mut(a).unwrap();
            m.equivalent += eq;
            m.different += diff;
            m.objects += 10;
            m.by_access.entry(u).or_default().add(&PairCounts { equivalent: *eq, different: *diff });
        }
        merge_profiles(&[p]).unwrap()
    }

    #[test]
    fn rounding_keeps_six_digits() {
        assert_eq!(round_sig(0.123456789), 0.123457);
        assert_eq!(round_sig(1.0), 1.0);
        assert_eq!(serde_json::to_string(&round_sig(1.0)).unwrap(), "1.0");
        assert_eq!(round_sig(0.0), 0.0);
        assert_eq!(round_sig(123456789.0), 123457000.0);
    }

    #[test]
    fn ranks_by_theta_with_threshold() {
        let p = profile(&[(&[1, 2], &[1, 3], 9, 1), (&[1, 4], &[1, 5], 5, 5), (&[1, 6], &[1, 7], 7, 3)]);
        let r = rank(&p, 0.6, &AlphaSource::default());
        let thetas: Vec<f64> = r.contexts.iter().map(|c| c.theta).collect();
        assert_eq!(thetas, vec![0.9, 0.7, 0.5]);
        let suspects: Vec<f64> = r.suspects().map(|c| c.theta).collect();
        assert_eq!(suspects, vec![0.9, 0.7]);
    }

    #[test]
    fn ties_prefer_more_equivalent() {
        let p = profile(&[(&[1, 2], &[1, 3], 4, 4), (&[1, 4], &[1, 5], 8, 8)]);
        let r = rank(&p, 0.6, &AlphaSource::default());
        assert_eq!(r.contexts[0].equivalent, 8);
    }

    #[test]
    fn empty_report_outputs() {
        let r = rank(&Profile::default(), 0.6, &AlphaSource::default());
        assert_eq!(emit_json(&r), r#"{"version":"v1","contexts":[]}"#);
        assert_eq!(emit_folded(&r), "");
    }

    #[test]
    fn folded_lines_use_full_access_paths() {
        let p = profile(&[(&[1, 2], &[1, 3, 4], 3, 2), (&[1, 2], &[1, 3, 5], 1, 0)]);
        let r = rank(&p, 0.6, &AlphaSource::default());
        assert_eq!(emit_folded(&r), "frame#1;frame#3;frame#4 5\nframe#1;frame#3;frame#5 1\n");
    }

    #[test]
    fn json_marks_whole_theta_as_float() {
        let p = profile(&[(&[1, 2], &[1, 3], 5, 0)]);
        let text = emit_json(&rank(&p, 0.6, &AlphaSource::default()));
        assert!(text.contains(r#""theta":1.0"#), "{text}");
        assert!(text.contains(r#""alpha_source":"default""#));
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["contexts"][0]["gamma_capped"], true);
    }

    #[test]
    fn oracle_alpha_is_used_by_path() {
        let p = profile(&[(&[1, 2], &[1, 3], 8, 2)]);
        let mut by_path = BTreeMap::new();
        by_path.insert(frames(&[1, 2]), 0.5);
        let source = AlphaSource { by_path, fallback: 0.0 };
        let r = rank(&p, 0.6, &source);
        let c = &r.contexts[0];
        assert!(c.alpha_from_oracle);
        assert!((c.omega.unwrap().value - 0.3).abs() < 1e-12);
    }
}
