//! Discrete symmetric operators standing in for Laplacians on sampled
//! manifolds: Gaussian-kernel Laplacians built from point clouds, graph
//! Laplacians, and closed-form reference spectra for a few manifolds with
//! known eigenvalues.
//!
//! The kernel construction is density normalized: the raw Gaussian affinity
//! is divided by the kernel density estimate at both endpoints before the
//! Laplacian is formed, which removes the first-order sensitivity of the
//! eigenvalues to sampling-density fluctuations. With the calibration applied
//! here the low eigenvalues of [`kernel_laplacian`] converge to the
//! Laplace-Beltrami eigenvalues of the underlying manifold as the sample
//! count grows.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::spectrum::{Spectrum, SpectrumSource};

/// Points sampled from a d-dimensional manifold embedded in N-dimensional
/// ambient space. Rows are points.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: DMatrix<f64>,
    manifold_dim: usize,
}

impl PointCloud {
    pub fn new(points: DMatrix<f64>, manifold_dim: usize) -> Result<Self> {
        let (n, ambient) = (points.nrows(), points.ncols());
        if n < 2 {
            return Err(Error::Validation(format!(
                "point cloud needs at least 2 points, got {n}"
            )));
        }
        if ambient < 1 {
            return Err(Error::Validation("ambient dimension must be >= 1".into()));
        }
        if !(1..=ambient).contains(&manifold_dim) {
            return Err(Error::Validation(format!(
                "manifold dimension {manifold_dim} must satisfy 1 <= d <= {ambient}"
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "point cloud contains a non-finite coordinate".into(),
            ));
        }
        Ok(Self {
            points,
            manifold_dim,
        })
    }

    /// Uniform samples of a circle of the given radius in the plane.
    pub fn sample_circle(n: usize, radius: f64, seed: u64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Validation(format!("radius must be positive, got {radius}")));
        }
        let mut rng = rng_from(seed);
        let mut pts = DMatrix::zeros(n, 2);
        for i in 0..n {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            pts[(i, 0)] = radius * theta.cos();
            pts[(i, 1)] = radius * theta.sin();
        }
        Self::new(pts, 1)
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn ambient_dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn manifold_dim(&self) -> usize {
        self.manifold_dim
    }

    /// Parse a CSV body: one row per point, coordinates as columns.
    pub fn from_csv_str(s: &str, manifold_dim: usize) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| {
                        Error::Validation(format!(
                            "csv line {}: cannot parse '{}' as a number",
                            lineno + 1,
                            tok.trim()
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Validation(format!(
                        "csv line {}: expected {} columns, got {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Validation("csv contains no points".into()));
        }
        let ambient = rows[0].len();
        let mut m = DMatrix::zeros(rows.len(), ambient);
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Self::new(m, manifold_dim)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.points.nrows() {
            let row: Vec<String> = (0..self.points.ncols())
                .map(|j| format!("{:.16e}", self.points[(i, j)]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Dense real symmetric matrix with an explicit symmetry tolerance.
#[derive(Debug, Clone)]
pub struct SymmetricOperator {
    matrix: DMatrix<f64>,
    symmetry_tol: f64,
}

impl SymmetricOperator {
    pub fn new(matrix: DMatrix<f64>, symmetry_tol: f64) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Validation(format!(
                "operator must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("operator contains non-finite entries".into()));
        }
        if symmetry_tol < 0.0 {
            return Err(Error::Validation("symmetry tolerance must be nonnegative".into()));
        }
        let asym = max_asymmetry(&matrix);
        if asym > symmetry_tol {
            return Err(Error::Validation(format!(
                "matrix asymmetry {asym:.3e} exceeds tolerance {symmetry_tol:.3e}"
            )));
        }
        Ok(Self {
            matrix,
            symmetry_tol,
        })
    }

    /// Exactly symmetrize `(A + Aᵀ)/2` first, then wrap.
    pub fn from_nearly_symmetric(matrix: DMatrix<f64>, symmetry_tol: f64) -> Result<Self> {
        Self::new(exact_symmetrize(matrix), symmetry_tol)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn symmetry_tol(&self) -> f64 {
        self.symmetry_tol
    }

    pub fn to_json(&self) -> String {
        let env = OperatorJson {
            n: self.dim(),
            values: self.matrix.transpose().as_slice().to_vec(),
            symmetry_tol: self.symmetry_tol,
        };
        serde_json::to_string_pretty(&env).expect("operator serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let env: OperatorJson =
            serde_json::from_str(s).map_err(|e| Error::Validation(format!("operator json: {e}")))?;
        if env.values.len() != env.n * env.n {
            return Err(Error::Validation(format!(
                "operator json: expected {} values for n={}, got {}",
                env.n * env.n,
                env.n,
                env.values.len()
            )));
        }
        let m = DMatrix::from_row_slice(env.n, env.n, &env.values);
        Self::new(m, env.symmetry_tol)
    }
}

#[derive(Serialize, Deserialize)]
struct OperatorJson {
    n: usize,
    /// Row-major entries.
    values: Vec<f64>,
    symmetry_tol: f64,
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(A + Aᵀ)/2` with both triangles written from the same expression, so the
/// result is bit-exactly symmetric.
pub(crate) fn exact_symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Reference manifolds with closed-form Laplacian spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticManifold {
    Circle { radius: f64 },
    Sphere { radius: f64 },
    FlatTorus { r1: f64, r2: f64 },
}

impl AnalyticManifold {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            AnalyticManifold::Circle { radius } | AnalyticManifold::Sphere { radius } => {
                *radius > 0.0 && radius.is_finite()
            }
            AnalyticManifold::FlatTorus { r1, r2 } => {
                *r1 > 0.0 && *r2 > 0.0 && r1.is_finite() && r2.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("manifold radii must be positive: {self:?}")))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnalyticManifold::Circle { .. } => 1,
            AnalyticManifold::Sphere { .. } | AnalyticManifold::FlatTorus { .. } => 2,
        }
    }
}

/// Neighborhood rule for the kernel affinity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// All pairwise affinities.
    Dense,
    /// Keep affinities to the k nearest neighbors of each point, then
    /// symmetrize by taking the elementwise max.
    Knn(usize),
}

/// How many eigenpairs to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigCount {
    All,
    First(usize),
}

/// Density-normalized Gaussian-kernel graph Laplacian of a point cloud.
///
/// Affinities are `W_ij = exp(−‖x_i − x_j‖² / (4 t))` with zero diagonal
/// (`t` = `bandwidth`; in knn mode only neighbor entries are kept and the
/// matrix is symmetrized by max). Each affinity is divided by the kernel
/// density estimate `q_i = Σ_j W_ij + 1` at both endpoints, and the Laplacian
/// `D̃ − W̃` is scaled by `mean(q)/t` so that eigenvalues converge to the
/// Laplace-Beltrami eigenvalues for uniformly sampled manifolds. The result
/// is exactly symmetrized before it is returned.
pub fn kernel_laplacian(
    cloud: &PointCloud,
    bandwidth: f64,
    mode: KernelMode,
) -> Result<SymmetricOperator> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Validation(format!(
            "bandwidth must be positive and finite, got {bandwidth}"
        )));
    }
    let n = cloud.len();
    if let KernelMode::Knn(k) = mode {
        if k == 0 || k >= n {
            return Err(Error::Validation(format!(
                "knn neighbor count must satisfy 1 <= k < n, got k={k}, n={n}"
            )));
        }
    }

    let d2 = squared_distances(cloud)?;
    let max_d2 = d2.iter().fold(0.0f64, |a, &b| a.max(b));
    if max_d2 == 0.0 && n >= 3 {
        return Err(Error::Degenerate(
            "all points in the cloud are identical".into(),
        ));
    }

    // Affinities, zero diagonal.
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (-d2[(i, j)] / (4.0 * bandwidth)).exp();
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }

    if let KernelMode::Knn(k) = mode {
        w = knn_mask_max(&w, &d2, k);
    }

    // Density normalization: divide each affinity by the kernel density
    // estimate at both endpoints (self-term included in the estimate).
    let q: Vec<f64> = (0..n).map(|i| w.row(i).sum() + 1.0).collect();
    let q_mean = q.iter().sum::<f64>() / n as f64;
    let mut lap = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = w[(i, j)] / (q[i] * q[j]);
            lap[(i, j)] = -v;
            lap[(j, i)] = -v;
        }
    }
    let scale = q_mean / bandwidth;
    for i in 0..n {
        let row_off: f64 = (0..n).filter(|&j| j != i).map(|j| -lap[(i, j)]).sum();
        lap[(i, i)] = row_off;
    }
    lap *= scale;

    SymmetricOperator::from_nearly_symmetric(lap, 1e-12)
}

/// Default kernel bandwidth: squared mean distance to the `⌈log₂ n⌉`-th
/// nearest neighbor.
pub fn bandwidth_heuristic(cloud: &PointCloud) -> Result<f64> {
    let n = cloud.len();
    let d2 = squared_distances(cloud)?;
    let k = ((n as f64).log2().ceil() as usize).clamp(1, n - 1);
    let mut acc = 0.0;
    let mut dists = vec![0.0f64; n - 1];
    for i in 0..n {
        let mut m = 0;
        for j in 0..n {
            if j != i {
                dists[m] = d2[(i, j)];
                m += 1;
            }
        }
        dists.sort_by(|a, b| a.total_cmp(b));
        acc += dists[k - 1].sqrt();
    }
    let mean_knn = acc / n as f64;
    if mean_knn == 0.0 {
        return Err(Error::Degenerate(
            "bandwidth heuristic degenerates on an all-identical cloud".into(),
        ));
    }
    Ok(mean_knn * mean_knn)
}

fn squared_distances(cloud: &PointCloud) -> Result<DMatrix<f64>> {
    let pts = cloud.points();
    let n = pts.nrows();
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..pts.ncols() {
                let d = pts[(i, c)] - pts[(j, c)];
                acc += d * d;
            }
            if !acc.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite distance between points {i} and {j}"
                )));
            }
            d2[(i, j)] = acc;
            d2[(j, i)] = acc;
        }
    }
    Ok(d2)
}

fn knn_mask_max(w: &DMatrix<f64>, d2: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = w.nrows();
    let mut kept = DMatrix::zeros(n, n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| d2[(i, a)].total_cmp(&d2[(i, b)]));
        for &j in order.iter().take(k) {
            kept[(i, j)] = w[(i, j)];
        }
    }
    // Symmetrize by max: keep an edge if either endpoint selected it.
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = kept[(i, j)].max(kept[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Dense symmetric eigendecomposition, eigenvalues sorted nondecreasing.
///
/// The operator is exactly symmetrized before decomposition. Eigenvectors
/// are returned as orthonormal columns aligned with the eigenvalues.
pub fn eigendecompose(op: &SymmetricOperator, count: EigCount) -> Result<Spectrum> {
    let m = exact_symmetrize(op.matrix().clone());
    let n = m.nrows();
    let max_iters = 40 * n.max(8);
    let se = m.try_symmetric_eigen(f64::EPSILON, max_iters).ok_or_else(|| {
        Error::Numeric(format!(
            "symmetric eigensolver did not converge within {max_iters} iterations on an {n}x{n} operator"
        ))
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));

    let keep = match count {
        EigCount::All => n,
        EigCount::First(m) => {
            if m == 0 {
                return Err(Error::Validation("eigenpair count must be positive".into()));
            }
            m.min(n)
        }
    };
    let vals: Vec<f64> = order.iter().take(keep).map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, keep);
    for (c, &i) in order.iter().take(keep).enumerate() {
        vecs.column_mut(c).copy_from(&se.eigenvectors.column(i));
    }
    Spectrum::new(vals, Some(vecs), SpectrumSource::Discrete)
}

/// Closed-form Laplacian spectra of the reference manifolds. No
/// eigenvectors are attached.
///
/// Circle of radius r: `0`, then `(k/r)²` with multiplicity 2 for k >= 1.
/// Sphere of radius r: `l(l+1)/r²` with multiplicity `2l+1`.
/// Flat torus: `(k₁/r₁)² + (k₂/r₂)²` over integer pairs, sorted.
pub fn analytic_spectrum(manifold: &AnalyticManifold, count: usize) -> Result<Spectrum> {
    manifold.validate()?;
    if count == 0 {
        return Err(Error::Validation("eigenvalue count must be >= 1".into()));
    }
    let vals = match manifold {
        AnalyticManifold::Circle { radius } => {
            let mut v = vec![0.0];
            let mut k = 1u64;
            while v.len() < count {
                let lam = (k as f64 / radius).powi(2);
                v.push(lam);
                if v.len() < count {
                    v.push(lam);
                }
                k += 1;
            }
            v
        }
        AnalyticManifold::Sphere { radius } => {
            let mut v = Vec::with_capacity(count);
            let mut l = 0u64;
            while v.len() < count {
                let lam = (l * (l + 1)) as f64 / (radius * radius);
                for _ in 0..(2 * l + 1) {
                    v.push(lam);
                    if v.len() == count {
                        break;
                    }
                }
                l += 1;
            }
            v
        }
        AnalyticManifold::FlatTorus { r1, r2 } => torus_spectrum(*r1, *r2, count),
    };
    Spectrum::new(vals, None, SpectrumSource::Analytic)
}

fn torus_spectrum(r1: f64, r2: f64, count: usize) -> Vec<f64> {
    // Enumerate integer pairs inside a growing box until the `count` smallest
    // values cannot be displaced by anything outside the box.
    let mut k_max = 1i64;
    loop {
        let mut vals = Vec::new();
        for k1 in -k_max..=k_max {
            for k2 in -k_max..=k_max {
                vals.push((k1 as f64 / r1).powi(2) + (k2 as f64 / r2).powi(2));
            }
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        // Any pair outside the box has |k1| > k_max or |k2| > k_max, hence a
        // value above this floor.
        let outside_floor = ((k_max + 1) as f64 / r1.max(r2)).powi(2);
        if vals.len() >= count && vals[count - 1] < outside_floor {
            vals.truncate(count);
            return vals;
        }
        k_max *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn coincident_pair_yields_rescaled_difference_operator() {
        // Kernel value at distance zero is exp(0) = 1 for any bandwidth; the
        // result must be a positive multiple of [[1,-1],[-1,1]].
        let pts = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.3, 0.7]);
        let cloud = PointCloud::new(pts, 1).unwrap();
        let op = kernel_laplacian(&cloud, 0.5, KernelMode::Dense).unwrap();
        let m = op.matrix();
        let w = m[(0, 0)];
        assert!(w > 0.0);
        assert_relative_eq!(m[(0, 1)], -w, max_relative = 1e-15);
        assert_relative_eq!(m[(1, 0)], -w, max_relative = 1e-15);
        assert_relative_eq!(m[(1, 1)], w, max_relative = 1e-15);
    }

    #[test]
    fn identical_cloud_of_three_is_degenerate() {
        let pts = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let cloud = PointCloud::new(pts, 1).unwrap();
        assert!(matches!(
            kernel_laplacian(&cloud, 0.5, KernelMode::Dense),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(bandwidth_heuristic(&cloud), Err(Error::Degenerate(_))));
    }

    #[test]
    fn nan_coordinate_is_rejected() {
        let pts = DMatrix::from_row_slice(2, 2, &[0.0, f64::NAN, 1.0, 0.0]);
        assert!(matches!(PointCloud::new(pts, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn eigendecompose_identity() {
        let op = SymmetricOperator::new(DMatrix::identity(3, 3), 0.0).unwrap();
        let s = eigendecompose(&op, EigCount::All).unwrap();
        for v in s.eigenvalues() {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn eigendecompose_two_by_two() {
        // Characteristic polynomial of [[2,-1],[-1,2]] is λ² - 4λ + 3.
        let op =
            SymmetricOperator::new(DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]), 0.0)
                .unwrap();
        let s = eigendecompose(&op, EigCount::All).unwrap();
        assert_relative_eq!(s.eigenvalues()[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(s.eigenvalues()[1], 3.0, max_relative = 1e-12);
    }

    #[test]
    fn eigendecompose_path_graph() {
        let op =
            SymmetricOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]), 0.0)
                .unwrap();
        let s = eigendecompose(&op, EigCount::All).unwrap();
        assert_relative_eq!(s.eigenvalues()[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(s.eigenvalues()[1], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn eigendecompose_reconstructs() {
        let mut rng = rng_from(11);
        let n = 24;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let sym = exact_symmetrize(a);
        let op = SymmetricOperator::new(sym.clone(), 0.0).unwrap();
        let s = eigendecompose(&op, EigCount::All).unwrap();
        let q = s.eigenvectors().unwrap();
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.eigenvalues().to_vec()));
        let rec = q * lam * q.transpose();
        assert!((rec - &sym).norm() <= 1e-8 * sym.norm());
    }

    #[test]
    fn analytic_circle_and_sphere_spectra() {
        let c = analytic_spectrum(&AnalyticManifold::Circle { radius: 1.0 }, 5).unwrap();
        assert_eq!(c.eigenvalues(), &[0.0, 1.0, 1.0, 4.0, 4.0]);

        let s = analytic_spectrum(&AnalyticManifold::Sphere { radius: 1.0 }, 4).unwrap();
        assert_eq!(s.eigenvalues(), &[0.0, 2.0, 2.0, 2.0]);

        let c2 = analytic_spectrum(&AnalyticManifold::Circle { radius: 2.0 }, 3).unwrap();
        assert_eq!(c2.eigenvalues(), &[0.0, 0.25, 0.25]);
    }

    #[test]
    fn torus_spectrum_matches_direct_enumeration() {
        // Unit square torus: values (k1² + k2²); smallest are
        // 0, 1 (x4), 2 (x4), 4 (x4), ...
        let t = analytic_spectrum(&AnalyticManifold::FlatTorus { r1: 1.0, r2: 1.0 }, 10).unwrap();
        assert_eq!(
            t.eigenvalues(),
            &[0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 4.0]
        );
    }

    #[test]
    fn kernel_laplacian_rows_sum_to_zero_and_psd() {
        let cloud = PointCloud::sample_circle(60, 1.0, 3).unwrap();
        let t = bandwidth_heuristic(&cloud).unwrap();
        let op = kernel_laplacian(&cloud, t, KernelMode::Dense).unwrap();
        let m = op.matrix();
        let norm = m.norm();
        for i in 0..m.nrows() {
            assert!(m.row(i).sum().abs() <= 1e-10 * norm.max(1.0));
        }
        let s = eigendecompose(&op, EigCount::All).unwrap();
        assert!(s.eigenvalues()[0] >= -1e-8 * norm);
    }

    #[test]
    fn knn_mode_is_symmetric_and_validates_k() {
        let cloud = PointCloud::sample_circle(40, 1.0, 5).unwrap();
        let t = bandwidth_heuristic(&cloud).unwrap();
        assert!(kernel_laplacian(&cloud, t, KernelMode::Knn(40)).is_err());
        assert!(kernel_laplacian(&cloud, t, KernelMode::Knn(0)).is_err());
        let op = kernel_laplacian(&cloud, t, KernelMode::Knn(8)).unwrap();
        assert_eq!(max_asymmetry(op.matrix()), 0.0);
    }

    #[test]
    fn permutation_conjugates_the_operator() {
        let cloud = PointCloud::sample_circle(30, 1.0, 9).unwrap();
        let t = bandwidth_heuristic(&cloud).unwrap();
        let op = kernel_laplacian(&cloud, t, KernelMode::Dense).unwrap();

        // Reverse the point order.
        let n = cloud.len();
        let mut pts = DMatrix::zeros(n, 2);
        for i in 0..n {
            pts.set_row(i, &cloud.points().row(n - 1 - i));
        }
        let perm_cloud = PointCloud::new(pts, 1).unwrap();
        let op_perm = kernel_laplacian(&perm_cloud, t, KernelMode::Dense).unwrap();

        let norm = op.matrix().norm();
        for i in 0..n {
            for j in 0..n {
                let a = op.matrix()[(i, j)];
                let b = op_perm.matrix()[(n - 1 - i, n - 1 - j)];
                assert!((a - b).abs() <= 1e-10 * norm.max(1.0), "({i},{j}): {a} vs {b}");
            }
        }

        let ev_a = eigendecompose(&op, EigCount::All).unwrap();
        let ev_b = eigendecompose(&op_perm, EigCount::All).unwrap();
        let scale = ev_a.eigenvalues().last().unwrap().max(1.0);
        for (a, b) in ev_a.eigenvalues().iter().zip(ev_b.eigenvalues()) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn operator_json_round_trip() {
        let op =
            SymmetricOperator::new(DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]), 1e-12)
                .unwrap();
        let back = SymmetricOperator::from_json(&op.to_json()).unwrap();
        assert_eq!(op.matrix(), back.matrix());
        assert_eq!(op.symmetry_tol(), back.symmetry_tol());
    }

    #[test]
    fn cloud_csv_round_trip() {
        let cloud = PointCloud::sample_circle(7, 1.0, 1).unwrap();
        let csv = cloud.to_csv_string();
        let back = PointCloud::from_csv_str(&csv, 1).unwrap();
        assert_eq!(cloud.points(), back.points());
    }
}
