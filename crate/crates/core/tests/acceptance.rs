//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use replica_core::bounds::{self, DEFAULT_SUSPECT_THRESHOLD};
use replica_core::oracle;
use replica_core::pipeline::{self, DetectConfig};
use replica_core::profile::{merge_profiles, Profile};
use replica_core::report::{self, AlphaSource};
use replica_core::sampling::SamplerConfig;
use replica_core::watchpoint::{Capacity, WatchpointSlot, WatchpointUnit};
use replica_core::workload::{self, ContextSpec, GenConfig, ValueModel, WorkloadSpec};
use replica_core::{CtxId, FrameId, ObjId};

type Outcome = Result<String, String>;

fn random_groups(rng: &mut impl Rng, objects: u64, max_groups: usize) -> Vec<u64> {
    let groups = rng.gen_range(1..=max_groups.min(objects as usize));
    let mut cuts: Vec<u64> = Vec::new();
    while cuts.len() < groups - 1 {
        let c = rng.gen_range(1..objects);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(groups);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(objects)) {
        sizes.push(c - prev);
        prev = c;
    }
    sizes
}

/// `compared`: fields that are read again after the initial pass.
fn random_values(rng: &mut impl Rng, compared: usize) -> ValueModel {
    match rng.gen_range(0..3) {
        0 => ValueModel::Distinct,
        2 => ValueModel::NearDuplicate(rng.gen_range(1..=compared)),
        _ => ValueModel::Correlated(rng.gen_range(0.0..0.95)),
    }
}

fn bound_containment() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut skipped, mut violations) = (0, 0, Vec::new());
    for i in 0..1000u64 {
        let objects = rng.gen_range(2..=500);
        let ctx = ContextSpec {
            group_sizes: random_groups(&mut rng, objects, 8),
            object_size: 16,
            reads_per_object: 6,
            writes_per_object: 1,
            values: random_values(&mut rng, 2),
        };
        let spec = WorkloadSpec { contexts: vec![ctx], threads: 1, seed: i };
        let events = workload::generate_spec(&spec).map_err(|e| e.to_string())?;
        let truth = oracle::exact_groups(&events).map_err(|e| e.to_string())?;
        for t in &truth.contexts {
            let Some(theta) = t.theta_exact else {
                skipped += 1;
                continue;
            };
            match bounds::containment(theta, t.alpha_exact, t.objects, t.largest_ratio, t.lower_strict) {
                Ok(Some(c)) if c.holds() => checked += 1,
                Ok(Some(c)) => violations.push(format!("seed {i}: θ={theta} α={} s={} {c:?}", t.alpha_exact, t.largest_ratio)),
                Ok(None) => skipped += 1,
                Err(e) => violations.push(format!("seed {i}: {e}")),
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let summary = format!("{checked} contained, {skipped} with θ ≤ α, {} violations, {elapsed:.1}s", violations.len());
    if violations.is_empty() && elapsed < 60.0 {
        Ok(summary)
    } else {
        Err(format!("{summary}; first: {:?}", violations.first()))
    }
}

fn access_counts(profile: &Profile, alloc: &[FrameId]) -> BTreeMap<Vec<FrameId>, (u64, u64)> {
    let Some(id) = profile.tree.lookup(alloc) else { return BTreeMap::new() };
    let Some(m) = profile.tree.metrics(id) else { return BTreeMap::new() };
    m.by_access
        .iter()
        .map(|(&ctx, c): (&CtxId, _)| (profile.tree.path_of(ctx).expect("known context"), (c.equivalent, c.different)))
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut contexts = 0;
    for seed in 0..100u64 {
        let objects = rng.gen_range(2..=120);
        let cfg = GenConfig {
            contexts: rng.gen_range(1..=4),
            objects_per_context: objects,
            group_sizes: random_groups(&mut rng, objects, 6),
            object_size: 8 * rng.gen_range(1..=4),
            reads_per_object: 0,
            writes_per_object: rng.gen_range(0..=3),
            threads: rng.gen_range(1..=3),
            values: ValueModel::Distinct,
            seed,
        };
        let fields = (cfg.object_size / 8) as usize;
        let reads = fields + rng.gen_range(1..=6);
        let cfg = GenConfig {
            reads_per_object: reads,
            values: random_values(&mut rng, (reads - fields).min(fields)),
            ..cfg
        };
        let events = workload::generate(&cfg).map_err(|e| e.to_string())?;
        let profile = pipeline::detect(&events, &DetectConfig::exhaustive(seed)).map_err(|e| e.to_string())?;
        let truth = oracle::exact_groups(&events).map_err(|e| e.to_string())?;
        for t in &truth.contexts {
            contexts += 1;
            let (eq, diff) = profile
                .tree
                .lookup(&t.alloc_path)
                .and_then(|id| profile.tree.metrics(id))
                .map_or((0, 0), |m| (m.equivalent, m.different));
            if (eq, eq + diff) != (t.counts.equal, t.counts.total) {
                return Err(format!(
                    "seed {seed} {:?}: detector {eq}/{} vs oracle {}/{}",
                    t.alloc_path,
                    eq + diff,
                    t.counts.equal,
                    t.counts.total
                ));
            }
            let exact: BTreeMap<Vec<FrameId>, (u64, u64)> =
                t.by_access.iter().map(|a| (a.path.clone(), (a.equivalent, a.different))).collect();
            if access_counts(&profile, &t.alloc_path) != exact {
                return Err(format!("seed {seed} {:?}: per-access counters differ", t.alloc_path));
            }
        }
    }
    Ok(format!("{contexts} contexts over 100 traces bitwise equal"))
}

fn sampling_convergence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut within, mut total, mut fewest) = (0usize, 0usize, u64::MAX);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let objects = rng.gen_range(250..=350);
        let cfg = GenConfig {
            contexts: 2,
            objects_per_context: objects,
            group_sizes: random_groups(&mut rng, objects, 6),
            object_size: 32,
            reads_per_object: 12,
            writes_per_object: 2,
            threads: 2,
            values: ValueModel::Distinct,
            seed,
        };
        let cfg = GenConfig { values: random_values(&mut rng, 4), ..cfg };
        let spec = cfg.to_spec().map_err(|e| e.to_string())?;
        let detect = DetectConfig {
            sampler: SamplerConfig { period: 3, jitter: 0.75, seed },
            ..DetectConfig::default()
        };
        let out = pipeline::end_to_end(&spec, &detect, DEFAULT_SUSPECT_THRESHOLD).map_err(|e| e.to_string())?;
        for row in &out.summary {
            let comparisons = out
                .profile
                .tree
                .lookup(&row.alloc_path)
                .and_then(|id| out.profile.tree.metrics(id))
                .map_or(0, |m| m.comparisons());
            fewest = fewest.min(comparisons);
            total += 1;
            let err = row.abs_error().unwrap_or(f64::INFINITY);
            worst = worst.max(err);
            if err <= 0.05 {
                within += 1;
            }
        }
    }
    let share = within as f64 / total as f64;
    let summary =
        format!("{within}/{total} contexts within 0.05 ({:.1}%), min comparisons {fewest}, worst {worst:.3}", 100.0 * share);
    if fewest >= 200 && share >= 0.9 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn corpus_spec() -> (WorkloadSpec, Vec<bool>) {
    let ctx = |group_sizes: Vec<u64>, object_size: u64, values| ContextSpec {
        group_sizes,
        object_size,
        reads_per_object: 3 * (object_size / 8) as usize,
        writes_per_object: 2,
        values,
    };
    let mut contexts = Vec::new();
    let mut replicated = Vec::new();
    for i in 0..8u64 {
        let big = 90 + i;
        contexts.push(ctx(vec![big, 100 - big], 32, ValueModel::Distinct));
        replicated.push(true);
    }
    for i in 0..36u64 {
        let sizes = if i % 2 == 0 { vec![1; 100] } else { vec![5; 20] };
        contexts.push(ctx(sizes, 32, ValueModel::Distinct));
        replicated.push(false);
    }
    for _ in 0..12 {
        contexts.push(ctx(vec![5; 20], 32, ValueModel::NearDuplicate(2)));
        replicated.push(false);
    }
    for _ in 0..3 {
        contexts.push(ctx(vec![5; 20], 64, ValueModel::NearDuplicate(1)));
        replicated.push(false);
    }
    (WorkloadSpec { contexts, threads: 4, seed: 4 }, replicated)
}

fn false_positive_corpus() -> Outcome {
    let (spec, replicated) = corpus_spec();
    let detect = DetectConfig { sampler: SamplerConfig { period: 3, jitter: 0.75, seed: 4 }, ..DetectConfig::default() };
    let out = pipeline::end_to_end(&spec, &detect, DEFAULT_SUSPECT_THRESHOLD).map_err(|e| e.to_string())?;
    let by_path: BTreeMap<&[FrameId], bool> = out.summary.iter().map(|r| (r.alloc_path.as_slice(), r.suspect)).collect();
    let (mut fp, mut negatives, mut fneg) = (0, 0, 0);
    for (c, &truly) in replicated.iter().enumerate() {
        let suspect = by_path.get(workload::alloc_path(c).as_slice()).copied().unwrap_or(false);
        match (truly, suspect) {
            (true, false) => fneg += 1,
            (false, s) => {
                negatives += 1;
                fp += usize::from(s);
            }
            _ => {}
        }
    }
    let rate = fp as f64 / negatives as f64;
    let summary = format!(
        "{} contexts, false positives {fp}/{negatives} ({:.1}%), false negatives {fneg}/8",
        replicated.len(),
        100.0 * rate
    );
    if rate <= 0.08 && fneg == 0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn slot(i: u64) -> WatchpointSlot {
    WatchpointSlot {
        target_obj: ObjId(i),
        target_offset: 0,
        width: 8,
        expected_value: 0,
        origin_obj: ObjId(i),
        origin_access_ctx: CtxId(0),
        origin_alloc_ctx: CtxId(0),
    }
}

fn reservoir_fairness() -> Outcome {
    const W: usize = 4;
    const N: usize = 1000;
    const TRIALS: u64 = 100_000;
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()) as u64;
    let counts = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    let mut counts = vec![0u64; N];
                    for trial in (w..TRIALS).step_by(workers as usize) {
                        let mut unit = WatchpointUnit::new(Capacity::limited(W).unwrap(), trial);
                        for i in 0..N as u64 {
                            unit.request_arm(slot(i));
                        }
                        for s in unit.armed_slots() {
                            counts[s.target_obj.0 as usize] += 1;
                        }
                    }
                    counts
                })
            })
            .collect();
        let mut total = vec![0u64; N];
        for h in handles {
            for (t, c) in total.iter_mut().zip(h.join().expect("worker")) {
                *t += c;
            }
        }
        total
    });
    let expected = (TRIALS * W as u64) as f64 / N as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((N - 1) as f64).map_err(|e| e.to_string())?.cdf(stat);
    let summary = format!("chi-square {stat:.1} on {} df, p = {p:.3}", N - 1);
    if p > 0.01 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn example_one() -> Outcome {
    let cfg = DetectConfig { sampler: SamplerConfig { period: 1, jitter: 0.0, seed: 6 }, ..DetectConfig::default() };
    let profile = pipeline::detect(&workload::example_one(), &cfg).map_err(|e| e.to_string())?;
    let counts = profile
        .tree
        .lookup(&[FrameId(1), FrameId(2)])
        .and_then(|id| profile.tree.metrics(id))
        .map(|m| (m.equivalent, m.different));
    match counts {
        Some((1, 1)) => Ok("equivalent 1, different 1".into()),
        other => Err(format!("got {other:?}")),
    }
}

fn rendered(profile: &Profile) -> String {
    let ranked = report::rank(profile, DEFAULT_SUSPECT_THRESHOLD, &AlphaSource::constant(0.0));
    format!("{}\n{}", report::emit_json(&ranked), report::emit_folded(&ranked))
}

fn merge_algebra() -> Outcome {
    let cfg = GenConfig {
        contexts: 8,
        objects_per_context: 60,
        group_sizes: vec![30, 20, 10],
        threads: 8,
        values: ValueModel::Correlated(0.4),
        seed: 7,
        ..GenConfig::default()
    };
    let events = workload::generate(&cfg).map_err(|e| e.to_string())?;
    let detect = DetectConfig { sampler: SamplerConfig { period: 3, jitter: 0.25, seed: 7 }, ..DetectConfig::default() };
    let parts = pipeline::thread_profiles(&events, &detect).map_err(|e| e.to_string())?;
    if parts.len() != 8 {
        return Err(format!("expected 8 thread profiles, got {}", parts.len()));
    }
    let left = merge_profiles(&parts).map_err(|e| e.to_string())?;
    let mut right = parts[7].clone();
    for p in parts[..7].iter().rev() {
        let mut acc = p.clone();
        acc.merge_from(&right).map_err(|e| e.to_string())?;
        right = acc;
    }
    let mut shuffled = parts.clone();
    shuffled.reverse();
    shuffled.swap(1, 5);
    let mut level = shuffled;
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let mut acc = pair[0].clone();
                if let Some(b) = pair.get(1) {
                    acc.merge_from(b)?;
                }
                Ok(acc)
            })
            .collect::<Result<_, _>>()
            .map_err(|e: replica_core::profile::ProfileError| e.to_string())?;
    }
    let tree = level.pop().expect("one profile left");
    let (a, b, c) = (rendered(&left), rendered(&right), rendered(&tree));
    if a == b && b == c {
        Ok(format!("left fold, right fold and shuffled tree agree ({} bytes)", a.len()))
    } else {
        Err("ranked reports differ between merge orders".into())
    }
}

fn golden_spec() -> WorkloadSpec {
    let mut spec = GenConfig {
        contexts: 3,
        objects_per_context: 40,
        group_sizes: vec![24, 10, 6],
        threads: 2,
        seed: 8,
        ..GenConfig::default()
    }
    .to_spec()
    .expect("valid config");
    spec.contexts[1].values = ValueModel::NearDuplicate(1);
    spec.contexts[2].group_sizes = vec![1; 40];
    spec
}

fn golden_files() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let detect = DetectConfig { sampler: SamplerConfig { period: 3, jitter: 0.75, seed: 8 }, ..DetectConfig::default() };
    let out = pipeline::end_to_end(&golden_spec(), &detect, DEFAULT_SUSPECT_THRESHOLD).map_err(|e| e.to_string())?;
    let ranked = report::rank(&out.profile, DEFAULT_SUSPECT_THRESHOLD, &AlphaSource::constant(0.0));
    let outputs = [("report.folded", report::emit_folded(&ranked)), ("report.json", report::emit_json(&ranked))];
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut notes = Vec::new();
    for (name, text) in outputs {
        let path = dir.join(name);
        match std::fs::read_to_string(&path) {
            Ok(golden) if !update => {
                if golden != text {
                    return Err(format!("{name} differs from tests/golden/{name}"));
                }
                notes.push(format!("{name} matches"));
            }
            _ => {
                std::fs::write(&path, &text).map_err(|e| e.to_string())?;
                notes.push(format!("{name} written"));
            }
        }
    }
    Ok(notes.join(", "))
}

fn determinism() -> Outcome {
    let spec = golden_spec();
    let detect = DetectConfig { sampler: SamplerConfig { period: 3, jitter: 0.25, seed: 9 }, ..DetectConfig::default() };
    let run = || -> Result<[String; 4], String> {
        let out = pipeline::end_to_end(&spec, &detect, DEFAULT_SUSPECT_THRESHOLD).map_err(|e| e.to_string())?;
        Ok([out.trace, out.profile.to_json(), out.truth.to_json(), report::emit_json(&out.report)])
    };
    let (a, b) = (run()?, run()?);
    let names = ["trace", "profile", "oracle", "report"];
    match names.iter().zip(a.iter().zip(&b)).find(|(_, (x, y))| x != y) {
        None => Ok("trace, profile, oracle and report byte-identical".into()),
        Some((name, _)) => Err(format!("{name} differs between runs")),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 bound containment", bound_containment),
        ("2 oracle equivalence", oracle_equivalence),
        ("3 sampling convergence", sampling_convergence),
        ("4 false-positive corpus", false_positive_corpus),
        ("5 reservoir fairness", reservoir_fairness),
        ("6 example replay", example_one),
        ("7 merge algebra", merge_algebra),
        ("8 golden files", golden_files),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
