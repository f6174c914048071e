//! Eigenvalue spectra and their ratio-separated partitions.
//!
//! A [`Spectrum`] holds the sorted eigenvalues (and, for discrete operators,
//! the orthonormal eigenvectors) of a symmetric operator. [`gamma_partition`]
//! groups eigenvalues so that any two eigenvalues taken from *different*
//! groups differ by more than a relative factor `gamma` in both ratio
//! directions, i.e. `|λ_i/λ_j − 1| > γ` for every cross-group pair of
//! positive eigenvalues. [`weyl_index`] evaluates the index beyond which
//! consecutive eigenvalue gaps of a d-dimensional operator fall below a
//! chosen relative threshold.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold under which an eigenvalue counts as zero.
pub const ZERO_REL_TOL: f64 = 1e-10;

/// Where a spectrum came from. Analytic spectra carry no eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    Discrete,
    Analytic,
}

/// Ordered eigenvalue/eigenvector pairs of a symmetric operator.
#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    eigenvectors: Option<DMatrix<f64>>,
    source: SpectrumSource,
}

impl Spectrum {
    /// Build a spectrum from sorted eigenvalues and optional orthonormal
    /// eigenvectors (columns).
    ///
    /// Eigenvalues must be nondecreasing and finite. Small negative values
    /// (within `1e-8 * max(1, λ_max)`) are clamped to zero; anything more
    /// negative is rejected. When eigenvectors are present their column count
    /// must match the eigenvalue count and the columns must be orthonormal
    /// within `1e-8`.
    pub fn new(
        eigenvalues: Vec<f64>,
        eigenvectors: Option<DMatrix<f64>>,
        source: SpectrumSource,
    ) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Validation("spectrum must be nonempty".into()));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite eigenvalue".into()));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation(
                "eigenvalues must be sorted nondecreasing".into(),
            ));
        }
        let lam_max = eigenvalues.last().copied().unwrap_or(0.0).abs();
        let neg_tol = 1e-8 * lam_max.max(1.0);
        let mut vals = eigenvalues;
        for v in &mut vals {
            if *v < 0.0 {
                if *v < -neg_tol {
                    return Err(Error::Validation(format!(
                        "eigenvalue {v} below negativity tolerance -{neg_tol:.3e}"
                    )));
                }
                *v = 0.0;
            }
        }
        if let Some(q) = &eigenvectors {
            if q.ncols() != vals.len() {
                return Err(Error::Validation(format!(
                    "eigenvector count {} does not match eigenvalue count {}",
                    q.ncols(),
                    vals.len()
                )));
            }
            check_orthonormal(q, 1e-8)?;
        }
        Ok(Self {
            eigenvalues: vals,
            eigenvectors,
            source,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, absent for analytic spectra.
    pub fn eigenvectors(&self) -> Option<&DMatrix<f64>> {
        self.eigenvectors.as_ref()
    }

    /// Eigenvectors or a state error telling the caller to decompose a
    /// discrete operator first.
    pub fn eigenvectors_required(&self) -> Result<&DMatrix<f64>> {
        self.eigenvectors.as_ref().ok_or_else(|| {
            Error::State(
                "spectrum carries no eigenvectors (analytic source); \
                 decompose a discrete operator instead"
                    .into(),
            )
        })
    }

    pub fn source(&self) -> SpectrumSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Threshold below which eigenvalues of this spectrum count as zero.
    pub fn zero_cutoff(&self) -> f64 {
        let lam_max = self.eigenvalues.last().copied().unwrap_or(0.0);
        ZERO_REL_TOL * lam_max.max(f64::MIN_POSITIVE)
    }

    /// Indices of the strictly positive eigenvalues.
    pub fn positive_range(&self) -> std::ops::Range<usize> {
        let cut = self.zero_cutoff();
        let start = self.eigenvalues.partition_point(|&v| v <= cut);
        start..self.eigenvalues.len()
    }
}

fn check_orthonormal(q: &DMatrix<f64>, tol: f64) -> Result<()> {
    let n = q.ncols();
    // Full Gram check is cubic; above 256 columns spot-check a deterministic
    // subset of columns against all others.
    let cols: Vec<usize> = if n <= 256 {
        (0..n).collect()
    } else {
        (0..32).map(|i| (i * 2654435761usize) % n).collect()
    };
    for &i in &cols {
        let ci = q.column(i);
        for j in 0..n {
            let d = ci.dot(&q.column(j));
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > tol {
                return Err(Error::Validation(format!(
                    "eigenvector columns {i},{j} not orthonormal: <q_i,q_j> = {d}"
                )));
            }
        }
    }
    Ok(())
}

/// Contiguous index range `[start, end]` (inclusive) into a sorted spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub start: usize,
    pub end: usize,
}

impl IndexRange {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// A ratio-separated grouping of a spectrum's eigenvalue indices.
///
/// `groups` covers the strictly positive eigenvalues in sorted order;
/// `zero_group` (when present) holds the leading zero eigenvalues, which get
/// their own group because the ratio criterion is undefined at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumPartition {
    pub gamma: f64,
    pub groups: Vec<IndexRange>,
    pub zero_group: Option<IndexRange>,
}

impl SpectrumPartition {
    /// Number of positive-eigenvalue groups (the `M` of the separation).
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PartitionJson::from(self)).expect("partition serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pj: PartitionJson = serde_json::from_str(s)
            .map_err(|e| Error::Validation(format!("partition json: {e}")))?;
        Ok(pj.into())
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionJson {
    gamma: f64,
    groups: Vec<[usize; 2]>,
    zero_group: Option<[usize; 2]>,
}

impl From<&SpectrumPartition> for PartitionJson {
    fn from(p: &SpectrumPartition) -> Self {
        PartitionJson {
            gamma: p.gamma,
            groups: p.groups.iter().map(|g| [g.start, g.end]).collect(),
            zero_group: p.zero_group.map(|g| [g.start, g.end]),
        }
    }
}

impl From<PartitionJson> for SpectrumPartition {
    fn from(pj: PartitionJson) -> Self {
        SpectrumPartition {
            gamma: pj.gamma,
            groups: pj
                .groups
                .iter()
                .map(|g| IndexRange {
                    start: g[0],
                    end: g[1],
                })
                .collect(),
            zero_group: pj.zero_group.map(|g| IndexRange {
                start: g[0],
                end: g[1],
            }),
        }
    }
}

/// Partition a spectrum into groups separated by relative ratio `gamma`.
///
/// Greedy left-to-right over the positive eigenvalues: a new group starts
/// whenever `λ_{k+1} > λ_k / (1 − γ)`. That boundary rule is the stronger of
/// the two ratio directions, so every cross-group pair `(λ_i, λ_j)` of
/// positive eigenvalues satisfies `|λ_i/λ_j − 1| > γ` in both orders. The
/// certificate is verified exhaustively for spectra up to 2000 eigenvalues.
///
/// `gamma` must lie in `(0, 1)`: for `γ ≥ 1` the condition `1 − λ_i/λ_j > γ`
/// cannot hold for positive eigenvalues.
pub fn gamma_partition(spec: &Spectrum, gamma: f64) -> Result<SpectrumPartition> {
    if !(gamma > 0.0 && gamma < 1.0) || !gamma.is_finite() {
        return Err(Error::Validation(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let vals = spec.eigenvalues();
    let pos = spec.positive_range();
    let zero_group = if pos.start > 0 {
        Some(IndexRange {
            start: 0,
            end: pos.start - 1,
        })
    } else {
        None
    };

    let mut groups = Vec::new();
    if pos.start < vals.len() {
        let mut start = pos.start;
        for k in pos.start..vals.len() - 1 {
            if vals[k + 1] > vals[k] / (1.0 - gamma) {
                groups.push(IndexRange { start, end: k });
                start = k + 1;
            }
        }
        groups.push(IndexRange {
            start,
            end: vals.len() - 1,
        });
    }

    let partition = SpectrumPartition {
        gamma,
        groups,
        zero_group,
    };
    if vals.len() <= 2000 {
        verify_separation(spec, &partition)?;
    }
    Ok(partition)
}

/// Exhaustive pairwise check of the cross-group ratio certificate.
pub fn verify_separation(spec: &Spectrum, partition: &SpectrumPartition) -> Result<()> {
    let vals = spec.eigenvalues();
    for (a, ga) in partition.groups.iter().enumerate() {
        for gb in partition.groups.iter().skip(a + 1) {
            for i in ga.indices() {
                for j in gb.indices() {
                    let (li, lj) = (vals[i], vals[j]);
                    if (li / lj - 1.0).abs() <= partition.gamma
                        || (lj / li - 1.0).abs() <= partition.gamma
                    {
                        return Err(Error::InvariantViolation(format!(
                            "cross-group pair (λ_{i}={li}, λ_{j}={lj}) violates the \
                             ratio separation at gamma={}",
                            partition.gamma
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Index beyond which consecutive relative eigenvalue gaps of a
/// d-dimensional operator stay below `gamma`: `⌈(C₁(γ+1)^{d/2} − 1)⁻¹⌉`.
pub fn weyl_index(gamma: f64, d: u32, c1: f64) -> Result<u64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Validation(format!("gamma must be positive, got {gamma}")));
    }
    if d == 0 {
        return Err(Error::Validation("dimension d must be positive".into()));
    }
    if !(c1 > 0.0) || !c1.is_finite() {
        return Err(Error::Validation(format!("C1 must be positive, got {c1}")));
    }
    let denom = c1 * (gamma + 1.0).powf(d as f64 / 2.0) - 1.0;
    if denom <= 0.0 {
        return Err(Error::Domain(format!(
            "C1 (γ+1)^(d/2) − 1 = {denom} is nonpositive; pick a larger C1 or gamma"
        )));
    }
    Ok((1.0 / denom).ceil() as u64)
}

/// Relative gaps `(λ_{k+1} − λ_k)/λ_k` over consecutive positive eigenvalues.
pub fn gap_ratio_profile(spec: &Spectrum) -> Result<Vec<f64>> {
    let vals = spec.eigenvalues();
    let pos = &vals[spec.positive_range()];
    if pos.len() < 2 {
        return Err(Error::Validation(format!(
            "gap ratio profile needs at least two positive eigenvalues, got {}",
            pos.len()
        )));
    }
    Ok(pos.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values_only(vals: &[f64]) -> Spectrum {
        Spectrum::new(vals.to_vec(), None, SpectrumSource::Analytic).unwrap()
    }

    /// Independent brute-force oracle for the ratio separation certificate.
    fn brute_force_separated(vals: &[f64], p: &SpectrumPartition) -> bool {
        for (a, ga) in p.groups.iter().enumerate() {
            for gb in p.groups.iter().skip(a + 1) {
                for i in ga.indices() {
                    for j in gb.indices() {
                        if (vals[i] / vals[j] - 1.0).abs() <= p.gamma
                            || (vals[j] / vals[i] - 1.0).abs() <= p.gamma
                        {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    #[test]
    fn partition_groups_close_pairs_and_separates_far_ones() {
        let spec = values_only(&[1.0, 1.05, 2.0, 2.1, 5.0]);
        let p = gamma_partition(&spec, 0.1).unwrap();
        assert_eq!(p.groups.len(), 3);
        assert_eq!(p.groups[0], IndexRange { start: 0, end: 1 });
        assert_eq!(p.groups[1], IndexRange { start: 2, end: 3 });
        assert_eq!(p.groups[2], IndexRange { start: 4, end: 4 });
        assert!(p.zero_group.is_none());
        assert!(brute_force_separated(spec.eigenvalues(), &p));
        // e.g. |1.05/2 - 1| = 0.475 > 0.1
        assert!((1.05f64 / 2.0 - 1.0).abs() > 0.1);
    }

    #[test]
    fn singleton_spectrum_is_one_group() {
        let spec = values_only(&[1.0]);
        for gamma in [0.05, 0.5, 0.99] {
            let p = gamma_partition(&spec, gamma).unwrap();
            assert_eq!(p.num_groups(), 1);
        }
    }

    #[test]
    fn zero_eigenvalue_gets_its_own_group() {
        let spec = values_only(&[0.0, 1.0, 1.0]);
        let p = gamma_partition(&spec, 0.5).unwrap();
        assert_eq!(p.zero_group, Some(IndexRange { start: 0, end: 0 }));
        assert_eq!(p.groups, vec![IndexRange { start: 1, end: 2 }]);
        assert_eq!(p.num_groups(), 1);
    }

    #[test]
    fn gamma_outside_unit_interval_is_rejected() {
        let spec = values_only(&[1.0, 2.0]);
        assert!(matches!(
            gamma_partition(&spec, 0.0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            gamma_partition(&spec, 1.0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            gamma_partition(&spec, -0.2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn weyl_index_matches_hand_arithmetic() {
        // gamma=3, d=2, C1=1: ceil(1/(4-1)) = 1
        assert_eq!(weyl_index(3.0, 2, 1.0).unwrap(), 1);
        // gamma=1, d=2, C1=1: ceil(1/(2-1)) = 1
        assert_eq!(weyl_index(1.0, 2, 1.0).unwrap(), 1);
    }

    #[test]
    fn weyl_index_rejects_nonpositive_denominator() {
        // 0.5 * 1.1 - 1 = -0.45
        assert!(matches!(weyl_index(0.1, 2, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn gap_ratio_profile_examples() {
        let spec = values_only(&[2.0, 6.0, 12.0]);
        assert_eq!(gap_ratio_profile(&spec).unwrap(), vec![2.0, 1.0]);

        let spec = values_only(&[1.0, 1.0]);
        assert_eq!(gap_ratio_profile(&spec).unwrap(), vec![0.0]);

        let spec = values_only(&[1.0, 1.0, 4.0, 4.0, 9.0]);
        assert_eq!(gap_ratio_profile(&spec).unwrap(), vec![0.0, 3.0, 0.0, 1.25]);
    }

    #[test]
    fn gap_ratio_profile_needs_two_positives() {
        let spec = values_only(&[0.0, 1.0]);
        assert!(matches!(
            gap_ratio_profile(&spec),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn tiny_negative_eigenvalues_clamp_to_zero() {
        let s = Spectrum::new(vec![-1e-9, 1.0], None, SpectrumSource::Discrete).unwrap();
        assert_eq!(s.eigenvalues()[0], 0.0);
        assert!(Spectrum::new(vec![-1.0, 1.0], None, SpectrumSource::Discrete).is_err());
    }

    #[test]
    fn partition_json_round_trip() {
        let spec = values_only(&[0.0, 1.0, 1.05, 5.0]);
        let p = gamma_partition(&spec, 0.1).unwrap();
        let q = SpectrumPartition::from_json(&p.to_json()).unwrap();
        assert_eq!(p.groups, q.groups);
        assert_eq!(p.zero_group, q.zero_group);
        assert_eq!(p.gamma, q.gamma);
    }

    proptest::proptest! {
        #[test]
        fn partition_certificate_holds_on_random_spectra(
            raw in proptest::collection::vec(1e-3f64..1e3, 1..200),
            gamma_ix in 0usize..4,
        ) {
            let gamma = [0.05, 0.1, 0.3, 0.9][gamma_ix];
            let mut vals = raw;
            vals.sort_by(|a, b| a.total_cmp(b));
            let spec = values_only(&vals);
            let p = gamma_partition(&spec, gamma).unwrap();
            proptest::prop_assert!(brute_force_separated(spec.eigenvalues(), &p));
        }

        #[test]
        fn group_count_is_monotone_in_gamma(
            raw in proptest::collection::vec(1e-3f64..1e3, 2..120),
        ) {
            let mut vals = raw;
            vals.sort_by(|a, b| a.total_cmp(b));
            let spec = values_only(&vals);
            let gammas = [0.05, 0.1, 0.3, 0.9];
            let ms: Vec<usize> = gammas
                .iter()
                .map(|&g| gamma_partition(&spec, g).unwrap().num_groups())
                .collect();
            for w in ms.windows(2) {
                proptest::prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn identical_eigenvalues_share_a_group(
            v in 1e-3f64..1e3,
            copies in 2usize..6,
            gamma in 0.01f64..0.99,
        ) {
            let vals = vec![v; copies];
            let spec = values_only(&vals);
            let p = gamma_partition(&spec, gamma).unwrap();
            proptest::prop_assert_eq!(p.num_groups(), 1);
        }
    }
}
