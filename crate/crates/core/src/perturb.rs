//! Relative operator perturbations `ℒ′ = ℒ + Eℒ` with a symmetric `E` of
//! prescribed operator norm `ε`.
//!
//! Three families are provided. `Scalar` and `EigenbasisDiagonal` are
//! diagonal in the base operator's eigenbasis, so they commute with it: the
//! perturbed operator keeps the eigenvectors and scales each eigenvalue by
//! `(1 + ε s_i)`. `SymmetrizedDense` draws a random symmetric direction and
//! generally does not commute, which makes the literal product `Eℒ`
//! asymmetric; [`apply_relative`] reports the asymmetry it removes.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{exact_symmetrize, max_asymmetry, SymmetricOperator};
use crate::rng::rng_from;
use crate::spectrum::{Spectrum, SpectrumSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbFamily {
    /// `E = ε I`.
    Scalar,
    /// `E = Q diag(ε s_i) Qᵀ` with random signs `s_i ∈ {−1, +1}` in the base
    /// operator's eigenbasis.
    EigenbasisDiagonal,
    /// Random Gaussian matrix, symmetrized and rescaled to norm `ε`.
    SymmetrizedDense,
}

/// Recipe for a perturbation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub family: PerturbFamily,
    pub epsilon: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(family: PerturbFamily, epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Validation(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        Ok(Self {
            family,
            epsilon,
            seed,
        })
    }
}

/// What the perturbation is anchored to.
pub enum PerturbationBase<'a> {
    FromSpectrum(&'a Spectrum),
    FromOperator(&'a SymmetricOperator),
}

impl PerturbationBase<'_> {
    fn dim(&self) -> usize {
        match self {
            PerturbationBase::FromSpectrum(s) => s
                .eigenvectors()
                .map(|q| q.nrows())
                .unwrap_or_else(|| s.len()),
            PerturbationBase::FromOperator(op) => op.dim(),
        }
    }
}

/// Draw a symmetric perturbation matrix with `‖E‖₂ = ε` (up to solver
/// tolerance; exactly for the diagonal families).
pub fn generate_perturbation(
    pspec: &PerturbationSpec,
    base: PerturbationBase<'_>,
) -> Result<DMatrix<f64>> {
    let n = base.dim();
    if n == 0 {
        return Err(Error::Validation("perturbation base has dimension 0".into()));
    }
    let eps = pspec.epsilon;
    match pspec.family {
        PerturbFamily::Scalar => Ok(DMatrix::identity(n, n) * eps),
        PerturbFamily::EigenbasisDiagonal => {
            let q = match base {
                PerturbationBase::FromSpectrum(s) => s.eigenvectors_required()?,
                PerturbationBase::FromOperator(_) => {
                    return Err(Error::State(
                        "eigenbasis-diagonal perturbations need a decomposed spectrum".into(),
                    ))
                }
            };
            let mut rng = rng_from(pspec.seed);
            let signs: Vec<f64> = (0..q.ncols())
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect();
            Ok(eigenbasis_diagonal_perturbation(q, eps, &signs))
        }
        PerturbFamily::SymmetrizedDense => {
            if eps == 0.0 {
                return Ok(DMatrix::zeros(n, n));
            }
            let mut rng = rng_from(pspec.seed);
            let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
            let s = exact_symmetrize(g);
            let norm = symmetric_operator_norm(&s)?;
            if norm < 1e-300 {
                return Err(Error::Numeric(
                    "random symmetric direction has negligible norm".into(),
                ));
            }
            Ok(s * (eps / norm))
        }
    }
}

/// Deterministic eigenbasis-diagonal perturbation with explicit signs.
/// With all signs `+1` this collapses to `ε I` by orthonormality.
pub fn eigenbasis_diagonal_perturbation(
    eigenvectors: &DMatrix<f64>,
    epsilon: f64,
    signs: &[f64],
) -> DMatrix<f64> {
    let mut scaled = eigenvectors.clone();
    for (mut col, &s) in scaled.column_iter_mut().zip(signs) {
        col *= epsilon * s;
    }
    exact_symmetrize(scaled * eigenvectors.transpose())
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_operator_norm(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    let se = m
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 40 * n.max(8))
        .ok_or_else(|| Error::Numeric("eigensolver failed while computing an operator norm".into()))?;
    Ok(se.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs())))
}

/// How to resolve the asymmetry of the literal product `Eℒ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// `ℒ + Eℒ`, then exact symmetrization; the discarded asymmetry is
    /// reported.
    Literal,
    /// `ℒ + (Eℒ + ℒE)/2`, symmetric by construction.
    Symmetrized,
}

/// Result of applying a relative perturbation.
pub struct PerturbedOperator {
    pub operator: SymmetricOperator,
    /// Max-entry asymmetry removed from the literal product (zero in
    /// symmetrized mode and for any `E` commuting with the base).
    pub asymmetry: f64,
}

/// Form the relatively perturbed operator `ℒ′`.
///
/// Callers should keep `‖E‖` below 1; larger perturbations are applied as
/// requested but logged.
pub fn apply_relative(
    base: &SymmetricOperator,
    e: &DMatrix<f64>,
    mode: ApplyMode,
) -> Result<PerturbedOperator> {
    let n = base.dim();
    if e.nrows() != n || e.ncols() != n {
        return Err(Error::Validation(format!(
            "perturbation is {}x{} but the operator is {n}x{n}",
            e.nrows(),
            e.ncols()
        )));
    }
    if max_asymmetry(e) > 1e-12 {
        return Err(Error::Validation("perturbation matrix must be symmetric".into()));
    }
    if let Ok(norm) = symmetric_operator_norm(e) {
        if norm >= 1.0 {
            log::warn!("relative perturbation has norm {norm:.3} >= 1");
        }
    }
    let el = e * base.matrix();
    match mode {
        ApplyMode::Literal => {
            let raw = base.matrix() + &el;
            let asymmetry = max_asymmetry(&raw);
            let op = SymmetricOperator::from_nearly_symmetric(raw, 1e-12)?;
            Ok(PerturbedOperator {
                operator: op,
                asymmetry,
            })
        }
        ApplyMode::Symmetrized => {
            let sym_part = exact_symmetrize(el);
            let op = SymmetricOperator::from_nearly_symmetric(base.matrix() + sym_part, 1e-12)?;
            Ok(PerturbedOperator {
                operator: op,
                asymmetry: 0.0,
            })
        }
    }
}

/// Exact spectrum of `ℒ′ = ℒ + Eℒ` for a perturbation that is diagonal in
/// the base eigenbasis: eigenvalues become `(1 + ε s_i) λ_i` with unchanged
/// eigenvectors, re-sorted jointly.
pub fn commuting_perturbed_spectrum(
    base: &Spectrum,
    epsilon: f64,
    signs: &[f64],
) -> Result<Spectrum> {
    let q = base.eigenvectors_required()?;
    if signs.len() != base.len() {
        return Err(Error::Validation(format!(
            "expected {} signs, got {}",
            base.len(),
            signs.len()
        )));
    }
    let scaled: Vec<f64> = base
        .eigenvalues()
        .iter()
        .zip(signs)
        .map(|(&l, &s)| (1.0 + epsilon * s) * l)
        .collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[a].total_cmp(&scaled[b]));
    let vals: Vec<f64> = order.iter().map(|&i| scaled[i]).collect();
    let mut vecs = DMatrix::zeros(q.nrows(), q.ncols());
    for (c, &i) in order.iter().enumerate() {
        vecs.column_mut(c).copy_from(&q.column(i));
    }
    Spectrum::new(vals, Some(vecs), SpectrumSource::Discrete)
}

/// Recover the perturbation size `ε̂ = ‖(ℒ′ − ℒ) ℒ⁺‖₂`, with the
/// pseudoinverse taken on the base operator's positive eigenvalues.
pub fn measured_epsilon(base: &SymmetricOperator, perturbed: &SymmetricOperator) -> Result<f64> {
    if base.dim() != perturbed.dim() {
        return Err(Error::Validation("operator dimensions differ".into()));
    }
    let spec = crate::operators::eigendecompose(base, crate::operators::EigCount::All)?;
    let pos = spec.positive_range();
    if pos.is_empty() {
        return Err(Error::Validation(
            "base operator has rank zero; relative size is undefined".into(),
        ));
    }
    let q = spec.eigenvectors_required()?;
    // (L' - L) L^+ = (L' - L) Q diag(1/λ_i) Qᵀ restricted to positive λ.
    let diff = perturbed.matrix() - base.matrix();
    let mut pinv_cols = DMatrix::zeros(q.nrows(), pos.len());
    for (c, i) in pos.clone().enumerate() {
        let col = q.column(i) / spec.eigenvalues()[i];
        pinv_cols.column_mut(c).copy_from(&col);
    }
    let q_pos = q.columns(pos.start, pos.len());
    let t = diff * pinv_cols * q_pos.transpose();
    // Largest singular value via the symmetric Gram matrix.
    let gram = exact_symmetrize(t.transpose() * &t);
    let top = symmetric_operator_norm(&gram)?;
    Ok(top.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{eigendecompose, EigCount};
    use approx::assert_relative_eq;

    fn tridiag_operator(n: usize) -> SymmetricOperator {
        let m = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        });
        SymmetricOperator::new(m, 0.0).unwrap()
    }

    #[test]
    fn scalar_family_examples() {
        let op = tridiag_operator(3);
        let zero = PerturbationSpec::new(PerturbFamily::Scalar, 0.0, 1).unwrap();
        let e = generate_perturbation(&zero, PerturbationBase::FromOperator(&op)).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));

        let spec = PerturbationSpec::new(PerturbFamily::Scalar, 0.1, 1).unwrap();
        let e = generate_perturbation(&spec, PerturbationBase::FromOperator(&op)).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3) * 0.1);
        assert_relative_eq!(symmetric_operator_norm(&e).unwrap(), 0.1, max_relative = 1e-12);
    }

    #[test]
    fn all_positive_signs_collapse_to_scaled_identity() {
        let op = tridiag_operator(4);
        let spec = eigendecompose(&op, EigCount::All).unwrap();
        let e = eigenbasis_diagonal_perturbation(spec.eigenvectors().unwrap(), 0.2, &[1.0; 4]);
        let diff = (&e - DMatrix::identity(4, 4) * 0.2).norm();
        assert!(diff <= 1e-12);
    }

    #[test]
    fn zero_perturbation_is_identity_map() {
        let op = tridiag_operator(4);
        let e = DMatrix::zeros(4, 4);
        let out = apply_relative(&op, &e, ApplyMode::Literal).unwrap();
        assert_eq!(out.operator.matrix(), op.matrix());
        assert_eq!(out.asymmetry, 0.0);
    }

    #[test]
    fn scalar_perturbation_scales_eigenvalues() {
        let op = tridiag_operator(5);
        let e = DMatrix::identity(5, 5) * 0.25;
        let out = apply_relative(&op, &e, ApplyMode::Literal).unwrap();
        let base = eigendecompose(&op, EigCount::All).unwrap();
        let pert = eigendecompose(&out.operator, EigCount::All).unwrap();
        for (a, b) in base.eigenvalues().iter().zip(pert.eigenvalues()) {
            assert_relative_eq!(b, &(1.25 * a), max_relative = 1e-10);
        }
        assert!(out.asymmetry <= 1e-15);
    }

    #[test]
    fn dense_family_is_generally_noncommuting() {
        let op = tridiag_operator(6);
        let pspec = PerturbationSpec::new(PerturbFamily::SymmetrizedDense, 0.3, 7).unwrap();
        let e = generate_perturbation(&pspec, PerturbationBase::FromOperator(&op)).unwrap();
        assert_relative_eq!(symmetric_operator_norm(&e).unwrap(), 0.3, max_relative = 1e-9);
        let out = apply_relative(&op, &e, ApplyMode::Literal).unwrap();
        assert!(out.asymmetry > 0.0);
        let sym = apply_relative(&op, &e, ApplyMode::Symmetrized).unwrap();
        assert_eq!(sym.asymmetry, 0.0);
    }

    #[test]
    fn measured_epsilon_recovers_scalar_size() {
        let op = tridiag_operator(5);
        assert_relative_eq!(measured_epsilon(&op, &op).unwrap(), 0.0, epsilon = 1e-12);

        let scaled = SymmetricOperator::new(op.matrix() * 1.05, 0.0).unwrap();
        assert_relative_eq!(measured_epsilon(&op, &scaled).unwrap(), 0.05, max_relative = 1e-9);

        let zero = SymmetricOperator::new(DMatrix::zeros(3, 3), 0.0).unwrap();
        assert!(matches!(
            measured_epsilon(&zero, &zero),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn commuting_spectrum_matches_full_decomposition() {
        let op = tridiag_operator(6);
        let base = eigendecompose(&op, EigCount::All).unwrap();
        let signs = [1.0, -1.0, 1.0, 1.0, -1.0, 1.0];
        let eps = 0.15;
        let analytic = commuting_perturbed_spectrum(&base, eps, &signs).unwrap();

        let e = eigenbasis_diagonal_perturbation(base.eigenvectors().unwrap(), eps, &signs);
        let pert = apply_relative(&op, &e, ApplyMode::Symmetrized).unwrap();
        let numeric = eigendecompose(&pert.operator, EigCount::All).unwrap();
        for (a, b) in analytic.eigenvalues().iter().zip(numeric.eigenvalues()) {
            assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn generated_perturbations_are_symmetric_with_target_norm(
            seed in 0u64..200,
            eps in 0.01f64..0.9,
            n in 2usize..20,
        ) {
            let op = tridiag_operator(n);
            let spec = eigendecompose(&op, EigCount::All).unwrap();
            for family in [
                PerturbFamily::Scalar,
                PerturbFamily::EigenbasisDiagonal,
                PerturbFamily::SymmetrizedDense,
            ] {
                let pspec = PerturbationSpec::new(family, eps, seed).unwrap();
                let e = generate_perturbation(&pspec, PerturbationBase::FromSpectrum(&spec)).unwrap();
                proptest::prop_assert!(max_asymmetry(&e) <= 1e-12);
                let norm = symmetric_operator_norm(&e).unwrap();
                proptest::prop_assert!((norm - eps).abs() <= 1e-8 * eps);
            }
        }

        #[test]
        fn round_trip_measures_commuting_norms(
            seed in 0u64..50,
            eps in 0.01f64..0.5,
        ) {
            let op = tridiag_operator(5);
            let spec = eigendecompose(&op, EigCount::All).unwrap();
            let pspec = PerturbationSpec::new(PerturbFamily::EigenbasisDiagonal, eps, seed).unwrap();
            let e = generate_perturbation(&pspec, PerturbationBase::FromSpectrum(&spec)).unwrap();
            let pert = apply_relative(&op, &e, ApplyMode::Symmetrized).unwrap();
            let measured = measured_epsilon(&op, &pert.operator).unwrap();
            proptest::prop_assert!((measured - eps).abs() <= 1e-6 * eps.max(1.0));
        }
    }
}
