//! Spectral filters: polynomial and piecewise-constant frequency responses,
//! their application in an operator's eigenbasis, ratio-threshold flatness
//! verification, and integral-Lipschitz constant estimation.
//!
//! A filter acts on a signal through the spectrum of a symmetric operator:
//! the signal is projected onto the eigenbasis, each coefficient is scaled by
//! `h(λ_i)`, and the result is mapped back. A filter is flat on a partition
//! when its response varies by at most `Δ_k` within every group; piecewise
//! filters built by [`design_frt_piecewise`] are flat by construction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{Spectrum, SpectrumPartition};

/// Margin used when clipping non-amplifying responses: |h| stays strictly
/// below 1 by this much.
pub const NON_AMPLIFY_MARGIN: f64 = 1e-6;

/// One piecewise segment: the closed eigenvalue interval a group spans and
/// the response assigned to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub value: f64,
}

/// Piecewise-constant response tied to a spectrum partition.
///
/// Evaluation assigns a query eigenvalue to the group with the smallest
/// relative ratio distance, accepting distances up to the partition's
/// `gamma` (relative eigenvalue movements below the separation threshold
/// cannot cross more than half a gap). Queries farther than that from every
/// group are domain errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseFilter {
    pub partition: SpectrumPartition,
    pub segments: Vec<Segment>,
    /// Response for (near-)zero eigenvalues, present iff the partition had a
    /// zero group.
    pub zero_value: Option<f64>,
    /// Absolute threshold under which a query counts as zero.
    pub zero_cutoff: f64,
}

/// A filter's frequency response.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterSpec {
    /// `h(λ) = Σ_k c_k λ^k`, evaluated by Horner's rule.
    Polynomial(Vec<f64>),
    Piecewise(PiecewiseFilter),
}

impl FilterSpec {
    pub fn polynomial(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Validation("polynomial filter needs at least one coefficient".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite filter coefficient".into()));
        }
        Ok(FilterSpec::Polynomial(coeffs))
    }

    /// Piecewise filter with one value per partition group. `values` aligns
    /// with `partition.groups`; `zero_value` must be present exactly when the
    /// partition has a zero group.
    pub fn piecewise(
        spec: &Spectrum,
        partition: &SpectrumPartition,
        values: Vec<f64>,
        zero_value: Option<f64>,
    ) -> Result<Self> {
        if values.len() != partition.groups.len() {
            return Err(Error::Validation(format!(
                "piecewise filter needs one value per group: {} values for {} groups",
                values.len(),
                partition.groups.len()
            )));
        }
        if partition.zero_group.is_some() != zero_value.is_some() {
            return Err(Error::Validation(
                "zero-group value must be present exactly when the partition has a zero group"
                    .into(),
            ));
        }
        if values.iter().chain(zero_value.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite filter value".into()));
        }
        let vals = spec.eigenvalues();
        let last = partition
            .groups
            .last()
            .map(|g| g.end)
            .or(partition.zero_group.map(|g| g.end))
            .unwrap_or(0);
        if last >= vals.len() {
            return Err(Error::Validation(
                "partition indices exceed the spectrum length".into(),
            ));
        }
        let segments = partition
            .groups
            .iter()
            .zip(&values)
            .map(|(g, &value)| Segment {
                lo: vals[g.start],
                hi: vals[g.end],
                value,
            })
            .collect();
        Ok(FilterSpec::Piecewise(PiecewiseFilter {
            partition: partition.clone(),
            segments,
            zero_value,
            zero_cutoff: spec.zero_cutoff(),
        }))
    }

    /// Evaluate the response at one eigenvalue.
    pub fn response_at(&self, lambda: f64) -> Result<f64> {
        match self {
            FilterSpec::Polynomial(coeffs) => Ok(horner(coeffs, lambda)),
            FilterSpec::Piecewise(pw) => pw.response_at(lambda),
        }
    }

    pub fn to_json(&self) -> String {
        let wire = match self {
            FilterSpec::Polynomial(coeffs) => FilterJson::Polynomial {
                coeffs: coeffs.clone(),
            },
            FilterSpec::Piecewise(pw) => FilterJson::Piecewise {
                partition: pw.partition.clone(),
                values: pw.segments.iter().map(|s| s.value).collect(),
                intervals: pw.segments.iter().map(|s| [s.lo, s.hi]).collect(),
                zero_value: pw.zero_value,
                zero_cutoff: pw.zero_cutoff,
            },
        };
        serde_json::to_string_pretty(&wire).expect("filter serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let wire: FilterJson =
            serde_json::from_str(s).map_err(|e| Error::Validation(format!("filter json: {e}")))?;
        match wire {
            FilterJson::Polynomial { coeffs } => FilterSpec::polynomial(coeffs),
            FilterJson::Piecewise {
                partition,
                values,
                intervals,
                zero_value,
                zero_cutoff,
            } => {
                if values.len() != intervals.len() || values.len() != partition.groups.len() {
                    return Err(Error::Validation(
                        "piecewise filter json: values, intervals, and groups disagree".into(),
                    ));
                }
                let segments = intervals
                    .iter()
                    .zip(&values)
                    .map(|(iv, &value)| Segment {
                        lo: iv[0],
                        hi: iv[1],
                        value,
                    })
                    .collect();
                Ok(FilterSpec::Piecewise(PiecewiseFilter {
                    partition,
                    segments,
                    zero_value,
                    zero_cutoff,
                }))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
enum FilterJson {
    Polynomial {
        coeffs: Vec<f64>,
    },
    Piecewise {
        partition: SpectrumPartition,
        values: Vec<f64>,
        intervals: Vec<[f64; 2]>,
        zero_value: Option<f64>,
        zero_cutoff: f64,
    },
}

impl PiecewiseFilter {
    /// Ratio distance of a query to a segment: zero inside the closed
    /// interval, otherwise the relative distance to the nearest endpoint.
    fn ratio_distance(seg: &Segment, lambda: f64) -> f64 {
        if lambda < seg.lo {
            seg.lo / lambda - 1.0
        } else if lambda > seg.hi {
            lambda / seg.hi - 1.0
        } else {
            0.0
        }
    }

    pub fn response_at(&self, lambda: f64) -> Result<f64> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Validation(format!(
                "piecewise filters are defined for nonnegative eigenvalues, got {lambda}"
            )));
        }
        if lambda <= self.zero_cutoff {
            return self.zero_value.ok_or_else(|| {
                Error::Domain(format!(
                    "eigenvalue {lambda} falls in the zero region but the filter has no zero-group value"
                ))
            });
        }
        let mut best: Option<(f64, f64)> = None;
        for seg in &self.segments {
            let d = Self::ratio_distance(seg, lambda);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, seg.value));
            }
        }
        let margin = self.partition.gamma.max(1e-9);
        match best {
            Some((d, value)) if d <= margin => Ok(value),
            _ => Err(Error::Domain(format!(
                "stray eigenvalue {lambda} lies outside every partition group \
                 (allowed relative margin {margin:.3e})"
            ))),
        }
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Evaluate the filter response at each of the given eigenvalues.
pub fn frequency_response(filter: &FilterSpec, lambdas: &[f64]) -> Result<Vec<f64>> {
    lambdas.iter().map(|&l| filter.response_at(l)).collect()
}

/// Apply `Q · diag(h(λ)) · Qᵀ` to a signal.
pub fn apply_filter(filter: &FilterSpec, spec: &Spectrum, signal: &DVector<f64>) -> Result<DVector<f64>> {
    let q = spec.eigenvectors_required()?;
    if signal.len() != q.nrows() {
        return Err(Error::Validation(format!(
            "signal length {} does not match operator dimension {}",
            signal.len(),
            q.nrows()
        )));
    }
    let response = frequency_response(filter, spec.eigenvalues())?;
    let mut coeffs = q.transpose() * signal;
    for (c, r) in coeffs.iter_mut().zip(&response) {
        *c *= r;
    }
    Ok(q * coeffs)
}

/// Per-group response spread report for flatness verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrtReport {
    /// Max within-group pairwise `|h(λ_i) − h(λ_j)|`, aligned with the
    /// partition's positive groups.
    pub per_group_spread: Vec<f64>,
    /// Spread over the zero group when present.
    pub zero_group_spread: Option<f64>,
    pub delta_max: f64,
    pub passes: bool,
}

/// Measure within-group response spreads and compare against a target.
pub fn verify_frt(
    filter: &FilterSpec,
    spec: &Spectrum,
    partition: &SpectrumPartition,
    delta_target: f64,
) -> Result<FrtReport> {
    if delta_target < 0.0 {
        return Err(Error::Validation("delta target must be nonnegative".into()));
    }
    let response = frequency_response(filter, spec.eigenvalues())?;
    let spread = |range: std::ops::RangeInclusive<usize>| -> f64 {
        let vals = &response[*range.start()..=*range.end()];
        let lo = vals.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        hi - lo
    };
    let per_group_spread: Vec<f64> = partition.groups.iter().map(|g| spread(g.indices())).collect();
    let zero_group_spread = partition.zero_group.map(|g| spread(g.indices()));
    let delta_max = per_group_spread
        .iter()
        .chain(zero_group_spread.iter())
        .fold(0.0f64, |a, &b| a.max(b));
    Ok(FrtReport {
        per_group_spread,
        zero_group_spread,
        delta_max,
        passes: delta_max <= delta_target,
    })
}

/// Build a piecewise filter from a target response sampled at each group's
/// mean eigenvalue. With `non_amplify` the values are clipped into
/// `(−1 + 1e-6, 1 − 1e-6)`. The result is flat on every group, so it passes
/// [`verify_frt`] for any nonnegative target.
pub fn design_frt_piecewise<F: Fn(f64) -> f64>(
    spec: &Spectrum,
    partition: &SpectrumPartition,
    target_response: F,
    non_amplify: bool,
) -> Result<FilterSpec> {
    if partition.groups.is_empty() && partition.zero_group.is_none() {
        return Err(Error::Validation("partition is empty".into()));
    }
    let vals = spec.eigenvalues();
    let mean = |range: std::ops::RangeInclusive<usize>| -> f64 {
        let xs = &vals[*range.start()..=*range.end()];
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let clip = |v: f64| -> f64 {
        if non_amplify {
            v.clamp(-1.0 + NON_AMPLIFY_MARGIN, 1.0 - NON_AMPLIFY_MARGIN)
        } else {
            v
        }
    };
    let values: Vec<f64> = partition
        .groups
        .iter()
        .map(|g| clip(target_response(mean(g.indices()))))
        .collect();
    let zero_value = partition
        .zero_group
        .map(|g| clip(target_response(mean(g.indices()))));
    FilterSpec::piecewise(spec, partition, values, zero_value)
}

/// Estimate the integral Lipschitz constant
/// `B̂ = max_{a≠b} |h(a) − h(b)| (a + b) / (2 |a − b|)`
/// over the supplied positive eigenvalues plus a uniform refinement grid
/// between their min and max (default 10 grid points per supplied value).
///
/// `B̂` is a lower bound on the constant over the continuum. Piecewise
/// filters are only sampled where their response is defined; grid points in
/// wide inter-group gaps are skipped.
pub fn estimate_integral_lipschitz(filter: &FilterSpec, lambdas: &[f64]) -> Result<f64> {
    estimate_integral_lipschitz_with_grid(filter, lambdas, 10 * lambdas.len().max(2))
}

/// Same as [`estimate_integral_lipschitz`] with an explicit number of
/// refinement grid points. Enlarging a grid that nests the coarser one can
/// only raise the estimate.
pub fn estimate_integral_lipschitz_with_grid(
    filter: &FilterSpec,
    lambdas: &[f64],
    grid_points: usize,
) -> Result<f64> {
    let mut pos: Vec<f64> = lambdas.iter().copied().filter(|&l| l > 0.0).collect();
    if pos.iter().any(|l| !l.is_finite()) {
        return Err(Error::Validation("non-finite eigenvalue".into()));
    }
    pos.sort_by(|a, b| a.total_cmp(b));
    pos.dedup();
    if pos.len() < 2 {
        return Err(Error::Validation(
            "integral Lipschitz estimation needs at least two distinct positive eigenvalues"
                .into(),
        ));
    }
    let (lo, hi) = (pos[0], *pos.last().unwrap());
    let mut grid = pos.clone();
    if grid_points >= 2 {
        let step = (hi - lo) / (grid_points - 1) as f64;
        for i in 0..grid_points {
            grid.push(lo + step * i as f64);
        }
    }
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();

    // Piecewise responses are undefined in wide gaps; skip those points.
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(grid.len());
    for &x in &grid {
        match filter.response_at(x) {
            Ok(h) => samples.push((x, h)),
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if samples.len() < 2 {
        return Err(Error::Validation(
            "filter response is defined at fewer than two grid points".into(),
        ));
    }

    let mut best = 0.0f64;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let (a, ha) = samples[i];
            let (b, hb) = samples[j];
            let gap = (b - a).abs();
            if gap <= f64::EPSILON * (a.abs() + b.abs()) {
                continue;
            }
            best = best.max((ha - hb).abs() * (a + b) / (2.0 * gap));
        }
    }
    Ok(best)
}
