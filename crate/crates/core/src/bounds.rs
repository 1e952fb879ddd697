//! Replication factor and bounds on the largest identical-group ratio.
//!
//! For a context with X objects split into groups of identical objects, let
//! `s = X_N / X` be the share of the largest group. With replication factor θ
//! (fraction of comparisons that matched) and α (chance that a comparison
//! between non-identical objects matches anyway):
//!
//! ```text
//! A = (θ - α) / (1 - α)
//! ω = θ - α                                  (lower bound on s)
//! γ = 1/(2(X-1)) + sqrt(1/(4(X-1)^2) + A)    (upper bound on s)
//! ```

use thiserror::Error;

/// Report threshold on θ for flagging a context as a replica suspect.
pub const DEFAULT_SUSPECT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum BoundsError {
    #[error("no comparisons recorded")]
    NoComparisons,
    #[error("alpha {0} outside [0, 1)")]
    AlphaOutOfRange(f64),
    #[error("theta {0} outside [0, 1]")]
    ThetaOutOfRange(f64),
    #[error("upper bound needs at least two objects, got {0}")]
    TooFewObjects(u64),
}

/// A value that may have been pulled back into its valid range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub clamped: bool,
}

impl Clamped {
    fn exact(value: f64) -> Self {
        Self { value, clamped: false }
    }
}

pub fn theta(equivalent: u64, different: u64) -> Result<f64, BoundsError> {
    let total = equivalent + different;
    if total == 0 {
        return Err(BoundsError::NoComparisons);
    }
    Ok(equivalent as f64 / total as f64)
}

fn check_inputs(theta: f64, alpha: f64) -> Result<(), BoundsError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(BoundsError::AlphaOutOfRange(alpha));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(BoundsError::ThetaOutOfRange(theta));
    }
    Ok(())
}

/// Probability that a matching comparison came from a truly identical pair.
/// θ < α is clamped to 0 and flagged.
pub fn prob_a(theta: f64, alpha: f64) -> Result<Clamped, BoundsError> {
    check_inputs(theta, alpha)?;
    if theta < alpha {
        return Ok(Clamped { value: 0.0, clamped: true });
    }
    Ok(Clamped::exact(((theta - alpha) / (1.0 - alpha)).min(1.0)))
}

/// ω = θ − α, clamped at 0.
pub fn lower_bound(theta: f64, alpha: f64) -> Result<Clamped, BoundsError> {
    check_inputs(theta, alpha)?;
    if theta < alpha {
        return Ok(Clamped { value: 0.0, clamped: true });
    }
    Ok(Clamped::exact(theta - alpha))
}

/// γ, capped at 1 and flagged when the formula exceeds it.
pub fn upper_bound(theta: f64, alpha: f64, objects: u64) -> Result<Clamped, BoundsError> {
    if objects < 2 {
        return Err(BoundsError::TooFewObjects(objects));
    }
    let a = prob_a(theta, alpha)?;
    let t = 1.0 / (objects - 1) as f64;
    let gamma = t / 2.0 + (t * t / 4.0 + a.value).sqrt();
    if gamma > 1.0 {
        return Ok(Clamped { value: 1.0, clamped: true });
    }
    Ok(Clamped { value: gamma, clamped: a.clamped })
}

/// γ without the cap at 1.
pub fn upper_bound_raw(theta: f64, alpha: f64, objects: u64) -> Result<f64, BoundsError> {
    if objects < 2 {
        return Err(BoundsError::TooFewObjects(objects));
    }
    let a = prob_a(theta, alpha)?.value;
    let t = 1.0 / (objects - 1) as f64;
    Ok(t / 2.0 + (t * t / 4.0 + a).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Containment {
    pub lower: bool,
    pub upper: bool,
}

impl Containment {
    pub fn holds(&self) -> bool {
        self.lower && self.upper
    }
}

/// Checks θ − α < X_N/X < γ against a known largest-group ratio. The lower
/// side relaxes to ≤ when `lower_strict` is false (tied or single group).
/// `None` when θ ≤ α, where the bounds say nothing.
pub fn containment(
    theta: f64,
    alpha: f64,
    objects: u64,
    largest_ratio: f64,
    lower_strict: bool,
) -> Result<Option<Containment>, BoundsError> {
    if theta <= alpha {
        check_inputs(theta, alpha)?;
        return Ok(None);
    }
    let omega = lower_bound(theta, alpha)?.value;
    let gamma = upper_bound_raw(theta, alpha, objects)?;
    let lower = if lower_strict { omega < largest_ratio } else { omega <= largest_ratio };
    Ok(Some(Containment { lower, upper: largest_ratio < gamma }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInterval {
    pub omega: Clamped,
    pub gamma: Clamped,
    pub a: Clamped,
}

impl BoundInterval {
    /// Scenario probabilities (A, B, C): identical pair, coincidental match, mismatch.
    pub fn scenarios(&self, alpha: f64) -> (f64, f64, f64) {
        let a = self.a.value;
        let b = alpha * (1.0 - a);
        (a, b, 1.0 - a - b)
    }
}

pub fn bound_interval(theta: f64, alpha: f64, objects: u64) -> Result<BoundInterval, BoundsError> {
    Ok(BoundInterval {
        omega: lower_bound(theta, alpha)?,
        gamma: upper_bound(theta, alpha, objects)?,
        a: prob_a(theta, alpha)?,
    })
}

/// Program-level replication ratios over `(equivalent, different)` pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicationRatio {
    /// Σ equivalent / Σ (equivalent + different).
    pub pooled: f64,
    /// Mean of per-context θ over contexts with comparisons.
    pub macro_average: f64,
}

pub fn replication_ratio(counts: &[(u64, u64)]) -> Result<ReplicationRatio, BoundsError> {
    let (eq, total) = counts.iter().fold((0u64, 0u64), |(e, t), &(eq, diff)| (e + eq, t + eq + diff));
    if total == 0 {
        return Err(BoundsError::NoComparisons);
    }
    let thetas: Vec<f64> = counts.iter().filter_map(|&(e, d)| theta(e, d).ok()).collect();
    Ok(ReplicationRatio {
        pooled: eq as f64 / total as f64,
        macro_average: thetas.iter().sum::<f64>() / thetas.len() as f64,
    })
}

/// Share of objects that sit in contexts weighted by θ: Σ θ·X / Σ X over
/// `(equivalent, different, objects)` triples with comparisons.
pub fn object_weighted_ratio(counts: &[(u64, u64, u64)]) -> Result<f64, BoundsError> {
    let mut weighted = 0.0;
    let mut objects = 0u64;
    for &(eq, diff, x) in counts {
        if let Ok(t) = theta(eq, diff) {
            weighted += t * x as f64;
            objects += x;
        }
    }
    if objects == 0 {
        return Err(BoundsError::NoComparisons);
    }
    Ok(weighted / objects as f64)
}

/// θ strictly above the threshold.
pub fn is_suspect(theta: f64, threshold: f64) -> bool {
    theta > threshold
}
