//! Depth alignment, correlation and lineage verdicts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch_map::ProjectionKind;
use crate::error::{Error, Result};
use crate::fingerprint::{normalize_values, Fingerprint};

pub const DEFAULT_T_HIGH: f64 = 0.9;
pub const DEFAULT_T_LOW: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_high: f64,
    pub t_low: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            t_high: DEFAULT_T_HIGH,
            t_low: DEFAULT_T_LOW,
        }
    }
}

impl Thresholds {
    pub fn new(t_high: f64, t_low: f64) -> Result<Self> {
        if !(t_high.is_finite() && t_low.is_finite() && t_low <= t_high) {
            return Err(Error::InvalidThresholds { t_high, t_low });
        }
        Ok(Thresholds { t_high, t_low })
    }

    pub fn verdict(&self, aggregate: f64) -> Verdict {
        if aggregate >= self.t_high {
            Verdict::LikelyLineage
        } else if aggregate <= self.t_low {
            Verdict::LikelyIndependent
        } else {
            Verdict::Inconclusive
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    LikelyLineage,
    Inconclusive,
    LikelyIndependent,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::LikelyLineage => "LIKELY_LINEAGE",
            Verdict::Inconclusive => "INCONCLUSIVE",
            Verdict::LikelyIndependent => "LIKELY_INDEPENDENT",
        })
    }
}

/// Which input was stretched to the common length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolatedSide {
    None,
    A,
    B,
}

impl fmt::Display for InterpolatedSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterpolatedSide::None => "none",
            InterpolatedSide::A => "a",
            InterpolatedSide::B => "b",
        })
    }
}

/// Two normalized sequences brought to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub kind: ProjectionKind,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub common_length: usize,
    pub interpolated_side: InterpolatedSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindResult {
    pub kind: ProjectionKind,
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
    pub interpolated_side: InterpolatedSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model_a: String,
    pub model_b: String,
    pub hash_a: String,
    pub hash_b: String,
    pub per_kind: Vec<KindResult>,
    pub aggregate: f64,
    /// Kinds averaged into `aggregate`.
    pub aggregate_kinds: Vec<ProjectionKind>,
    pub verdict: Verdict,
    pub thresholds_used: Thresholds,
}

/// Resamples `short` at `target_len` evenly spaced positions spanning its
/// index range, interpolating linearly between neighbouring entries.
pub fn interp_align(short: &[f64], target_len: usize) -> Result<Vec<f64>> {
    let n = short.len();
    if n < 2 {
        return Err(Error::SequenceTooShort { len: n });
    }
    if target_len < n {
        return Err(Error::TargetShorterThanSource {
            source_len: n,
            target: target_len,
        });
    }
    if target_len == n {
        return Ok(short.to_vec());
    }
    let span = (n - 1) as f64;
    let last = target_len - 1;
    Ok((0..target_len)
        .map(|i| {
            if i == last {
                return short[n - 1];
            }
            let x = i as f64 * span / last as f64;
            let j = (x.floor() as usize).min(n - 2);
            let t = x - j as f64;
            if t == 0.0 {
                short[j]
            } else {
                short[j] + t * (short[j + 1] - short[j])
            }
        })
        .collect())
}

/// Pearson correlation, centered two-pass form, clamped to [-1, 1].
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` under zero correlation with `n` samples, from
/// the Student t distribution with `n - 2` degrees of freedom.
pub fn p_value(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::TooFewSamples(n));
    }
    let r = r.clamp(-1.0, 1.0);
    if r.abs() == 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    // P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2), and df/(df+t^2) = 1 - r^2.
    let x = (1.0 - r) * (1.0 + r);
    Ok(statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0))
}

/// Normalizes both sequences and stretches the shorter to the longer length.
pub fn align(kind: ProjectionKind, a: &[f64], b: &[f64], ctx_a: &str, ctx_b: &str) -> Result<AlignedPair> {
    let na = normalize_values(a, &format!("{ctx_a} {kind}"))?;
    let nb = normalize_values(b, &format!("{ctx_b} {kind}"))?;
    let (a, b, side) = match na.len().cmp(&nb.len()) {
        std::cmp::Ordering::Equal => (na, nb, InterpolatedSide::None),
        std::cmp::Ordering::Less => (interp_align(&na, nb.len())?, nb, InterpolatedSide::A),
        std::cmp::Ordering::Greater => {
            let len = na.len();
            (na, interp_align(&nb, len)?, InterpolatedSide::B)
        }
    };
    Ok(AlignedPair {
        kind,
        common_length: a.len(),
        a,
        b,
        interpolated_side: side,
    })
}

/// Mean r over the attention kinds present, or over every kind when none
/// of them is. Returns the mean and the kinds it covers.
pub fn aggregate_score(results: &[(ProjectionKind, f64)]) -> (f64, Vec<ProjectionKind>) {
    let attention: Vec<&(ProjectionKind, f64)> = results.iter().filter(|(k, _)| k.is_attention()).collect();
    let used: Vec<&(ProjectionKind, f64)> = if attention.is_empty() {
        results.iter().collect()
    } else {
        attention
    };
    if used.is_empty() {
        return (f64::NAN, Vec::new());
    }
    let sum: f64 = used.iter().map(|(_, r)| r).sum();
    (sum / used.len() as f64, used.iter().map(|(k, _)| *k).collect())
}

pub fn compare_fingerprints(
    a: &Fingerprint,
    b: &Fingerprint,
    kinds: &[ProjectionKind],
    thresholds: Thresholds,
) -> Result<ComparisonReport> {
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    if kinds.is_empty() {
        return Err(Error::Usage {
            message: "no projection kinds requested".into(),
        });
    }
    let mut per_kind = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let sa = a.sequence(kind)?;
        let sb = b.sequence(kind)?;
        let pair = align(kind, &sa.values, &sb.values, &a.model_id, &b.model_id)?;
        let r = pearson(&pair.a, &pair.b)?;
        per_kind.push(KindResult {
            kind,
            r,
            p_value: p_value(r, pair.common_length)?,
            n: pair.common_length,
            interpolated_side: pair.interpolated_side,
        });
    }
    let rs: Vec<(ProjectionKind, f64)> = per_kind.iter().map(|k| (k.kind, k.r)).collect();
    let (aggregate, aggregate_kinds) = aggregate_score(&rs);
    Ok(ComparisonReport {
        model_a: a.model_id.clone(),
        model_b: b.model_id.clone(),
        hash_a: a.content_hash.clone(),
        hash_b: b.content_hash.clone(),
        per_kind,
        verdict: thresholds.verdict(aggregate),
        aggregate,
        aggregate_kinds,
        thresholds_used: thresholds,
    })
}

/// A failed cell of a correlation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub model_a: String,
    pub model_b: String,
    pub message: String,
}

/// Symmetric N x N grids; `None` marks a cell whose comparison failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub model_ids: Vec<String>,
    pub per_kind: BTreeMap<ProjectionKind, Vec<Vec<Option<f64>>>>,
    /// Per-cell aggregate score.
    pub overall: Vec<Vec<Option<f64>>>,
    pub errors: Vec<CellError>,
}

/// Compares every pair (including each fingerprint with itself). With
/// `skip_errors`, failed cells are left empty and listed in `errors`;
/// otherwise the first failure (in row-major order) is returned.
pub fn pairwise_matrix(
    fps: &[Fingerprint],
    kinds: &[ProjectionKind],
    skip_errors: bool,
) -> Result<CorrelationMatrix> {
    if fps.len() < 2 {
        return Err(Error::Usage {
            message: format!(
                "a correlation matrix needs at least 2 fingerprints, got {}",
                fps.len()
            ),
        });
    }
    let mut seen = HashSet::new();
    for fp in fps {
        if !seen.insert(fp.model_id.as_str()) {
            return Err(Error::DuplicateModelId(fp.model_id.clone()));
        }
    }
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();

    let n = fps.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let results: Vec<Result<ComparisonReport>> = pairs
        .par_iter()
        .map(|&(i, j)| compare_fingerprints(&fps[i], &fps[j], &kinds, Thresholds::default()))
        .collect();

    let empty = vec![vec![None; n]; n];
    let mut per_kind: BTreeMap<ProjectionKind, Vec<Vec<Option<f64>>>> =
        kinds.iter().map(|&k| (k, empty.clone())).collect();
    let mut overall = empty;
    let mut errors = Vec::new();
    for (&(i, j), result) in pairs.iter().zip(results) {
        match result {
            Ok(report) => {
                for k in &report.per_kind {
                    let grid = per_kind.get_mut(&k.kind).expect("requested kind");
                    grid[i][j] = Some(k.r);
                    grid[j][i] = Some(k.r);
                }
                overall[i][j] = Some(report.aggregate);
                overall[j][i] = Some(report.aggregate);
            }
            Err(e) => {
                let (a, b) = (fps[i].model_id.clone(), fps[j].model_id.clone());
                if !skip_errors {
                    return Err(Error::Pair {
                        a,
                        b,
                        source: Box::new(e),
                    });
                }
                errors.push(CellError {
                    model_a: a,
                    model_b: b,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(CorrelationMatrix {
        model_ids: fps.iter().map(|f| f.model_id.clone()).collect(),
        per_kind,
        overall,
        errors,
    })
}
