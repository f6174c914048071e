//! Perturbation-stability experiments: evaluate the worst-case output
//! deviation bound for layered spectral networks under relative operator
//! perturbations, sweep perturbation sizes against the empirical deviation,
//! and probe the stability/discriminability trade-off.
//!
//! The bound for an `L`-layer network with `F` features per hidden layer,
//! filters flat on an `M`-group ratio partition at level `γ` and integral
//! Lipschitz constant `B`, under a relative perturbation of size `ε ≤ γ`, is
//!
//! ```text
//! L F^(L−1) ( 2Mπ/(γ − ε + γε) + 2B/(2 − ε) ) ε ‖f‖
//! ```
//!
//! A sweep row whose empirical deviation exceeds this value falsifies either
//! the implementation or one of the preconditions, so the harness treats it
//! as an invariant violation rather than averaging it away.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    design_frt_piecewise, estimate_integral_lipschitz, frequency_response, verify_frt, FilterSpec,
    NON_AMPLIFY_MARGIN,
};
use crate::mnn::{forward, output_distance, Activation, MnnLayer, MnnModel, Signal};
use crate::operators::{eigendecompose, EigCount, SymmetricOperator};
use crate::perturb::{
    apply_relative, commuting_perturbed_spectrum, generate_perturbation, ApplyMode,
    PerturbFamily, PerturbationBase, PerturbationSpec,
};
use crate::rng::{mix_seed, rng_from};
use crate::spectrum::{gamma_partition, Spectrum, SpectrumPartition};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Flatness budget paired with a perturbation size: `Δ(ε) = πε/(γ − ε + γε)`.
pub fn delta_for_epsilon(gamma: f64, epsilon: f64) -> f64 {
    std::f64::consts::PI * epsilon / (gamma - epsilon + gamma * epsilon)
}

/// Worst-case output deviation of an `L`-layer, width-`F` network under a
/// relative perturbation of size `ε`.
pub fn theorem1_bound(
    layers: usize,
    width: usize,
    num_groups: usize,
    gamma: f64,
    epsilon: f64,
    lipschitz: f64,
    input_norm: f64,
) -> Result<f64> {
    if layers < 1 {
        return Err(Error::Domain("layer count L must satisfy L >= 1".into()));
    }
    if width < 1 {
        return Err(Error::Domain("width F must satisfy F >= 1".into()));
    }
    if num_groups < 1 {
        return Err(Error::Domain("group count M must satisfy M >= 1".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if epsilon > gamma {
        return Err(Error::Domain(format!(
            "epsilon <= gamma is required, got epsilon={epsilon} > gamma={gamma}"
        )));
    }
    if epsilon >= 2.0 {
        return Err(Error::Domain(format!(
            "2 - epsilon must be positive, got epsilon={epsilon}"
        )));
    }
    let denom = gamma - epsilon + gamma * epsilon;
    if denom <= 0.0 {
        return Err(Error::Domain(format!(
            "gamma - epsilon + gamma*epsilon must be positive, got {denom}"
        )));
    }
    if !(lipschitz >= 0.0) || !(input_norm >= 0.0) {
        return Err(Error::Domain("B and the input norm must be nonnegative".into()));
    }
    let prefactor = layers as f64 * (width as f64).powi(layers as i32 - 1);
    Ok(prefactor
        * (2.0 * num_groups as f64 * std::f64::consts::PI / denom
            + 2.0 * lipschitz / (2.0 - epsilon))
        * epsilon
        * input_norm)
}

/// How the sweep builds its filter banks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterRecipe {
    /// Piecewise filters sampled from seeded damped low-pass targets;
    /// flat on every group by construction.
    PiecewiseLowPass,
    /// Seeded random polynomials of the given order, rescaled to stay
    /// non-amplifying over the spectrum's range with a `1 + γ` margin.
    Polynomial { order: usize },
}

fn default_activation() -> Activation {
    Activation::Abs
}

fn default_abort() -> bool {
    true
}

/// Sweep configuration. Every `ε` must satisfy `ε ≤ γ`; the filter bank is
/// built once at the flatness budget of the largest `ε` and reused across
/// the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub gamma: f64,
    pub epsilons: Vec<f64>,
    pub layers: usize,
    pub width: usize,
    /// Integral Lipschitz budget `B`; every generated filter's estimate must
    /// stay below it.
    pub lipschitz_budget: f64,
    /// Trials (seeds) per epsilon.
    pub trials: usize,
    pub family: PerturbFamily,
    pub recipe: FilterRecipe,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub base_seed: u64,
    /// Abort with a diagnostic on the first bound violation instead of
    /// merely flagging the row.
    #[serde(default = "default_abort")]
    pub abort_on_violation: bool,
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilon list must be nonempty".into()));
        }
        for &e in &self.epsilons {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::Config(format!("epsilon must be nonnegative, got {e}")));
            }
            if e > self.gamma {
                return Err(Error::Config(format!(
                    "every epsilon must satisfy epsilon <= gamma, got epsilon={e} > gamma={}",
                    self.gamma
                )));
            }
        }
        if self.layers < 1 || self.width < 1 {
            return Err(Error::Config("layers and width must be >= 1".into()));
        }
        if self.trials < 1 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if !(self.lipschitz_budget >= 0.0) {
            return Err(Error::Config("lipschitz budget must be nonnegative".into()));
        }
        Ok(())
    }

    /// Theorem widths: one input feature, `F` per hidden layer, one output.
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![1];
        for _ in 1..self.layers {
            w.push(self.width);
        }
        w.push(1);
        w
    }
}

/// One sweep row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityRow {
    pub epsilon: f64,
    pub trial: usize,
    pub seed: u64,
    pub empirical: f64,
    pub bound: f64,
    pub num_groups: usize,
    pub input_norm: f64,
    pub violated: bool,
}

/// Sweep output: ordered rows plus the context needed to reproduce them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub gamma: f64,
    pub layers: usize,
    pub width: usize,
    pub lipschitz_budget: f64,
    pub delta: f64,
    pub family: PerturbFamily,
    pub num_groups: usize,
    pub rows: Vec<StabilityRow>,
}

impl StabilityReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }

    /// Largest empirical/bound ratio over rows with a positive bound.
    pub fn max_ratio(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.bound > 0.0)
            .map(|r| r.empirical / r.bound)
            .fold(0.0, f64::max)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epsilon,trial,empirical,bound,M,f_norm,flag\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.16e},{},{:.16e},{:.16e},{},{:.16e},{}\n",
                r.epsilon,
                r.trial,
                r.empirical,
                r.bound,
                r.num_groups,
                r.input_norm,
                u8::from(r.violated)
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            rows: usize,
            violations: usize,
            max_ratio: f64,
            gamma: f64,
            layers: usize,
            width: usize,
            lipschitz_budget: f64,
            delta: f64,
            num_groups: usize,
        }
        serde_json::to_string_pretty(&Summary {
            rows: self.rows.len(),
            violations: self.violations(),
            max_ratio: self.max_ratio(),
            gamma: self.gamma,
            layers: self.layers,
            width: self.width,
            lipschitz_budget: self.lipschitz_budget,
            delta: self.delta,
            num_groups: self.num_groups,
        })
        .expect("summary serializes")
    }
}

/// Build the sweep's filter bank, verify flatness at the given budget, and
/// check every filter's integral Lipschitz estimate against the config's
/// budget `B`.
pub fn build_filter_bank(
    config: &StabilityConfig,
    spec: &Spectrum,
    partition: &SpectrumPartition,
) -> Result<MnnModel> {
    let widths = config.widths();
    let eps_max = config.epsilons.iter().copied().fold(0.0, f64::max);
    let delta = delta_for_epsilon(config.gamma, eps_max);

    let lam_pos: Vec<f64> = spec.eigenvalues()[spec.positive_range()].to_vec();
    if lam_pos.len() < 2 {
        return Err(Error::Config(
            "spectrum needs at least two positive eigenvalues for a sweep".into(),
        ));
    }
    let lam_mean = lam_pos.iter().sum::<f64>() / lam_pos.len() as f64;
    let lam_max = *lam_pos.last().unwrap();
    // Integral Lipschitz estimates must also cover eigenvalues after a
    // relative move of up to gamma.
    let mut b_lambdas = lam_pos.clone();
    b_lambdas.insert(0, lam_pos[0] * (1.0 - config.gamma).max(1e-6));
    b_lambdas.push(lam_max * (1.0 + config.gamma));

    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let (f_in, f_out) = (widths[l], widths[l + 1]);
        let mut filters = Vec::with_capacity(f_out);
        for p in 0..f_out {
            let mut row = Vec::with_capacity(f_in);
            for q in 0..f_in {
                let seed = mix_seed(config.base_seed, &[l as u64, p as u64, q as u64]);
                let filter = match config.recipe {
                    FilterRecipe::PiecewiseLowPass => {
                        let mut rng = rng_from(seed);
                        let gain: f64 = rng.gen_range(0.4..0.95);
                        let decay: f64 = rng.gen_range(0.3..3.0);
                        design_frt_piecewise(
                            spec,
                            partition,
                            |lam| gain * (-decay * lam / lam_mean).exp(),
                            true,
                        )?
                    }
                    FilterRecipe::Polynomial { order } => {
                        polynomial_filter(seed, order, lam_max * (1.0 + config.gamma))?
                    }
                };
                let report = verify_frt(&filter, spec, partition, delta)?;
                if !report.passes {
                    return Err(Error::Config(format!(
                        "filter (layer {l}, out {p}, in {q}) fails flatness verification: \
                         spread {:.3e} exceeds delta {:.3e}",
                        report.delta_max, delta
                    )));
                }
                let b_hat = estimate_integral_lipschitz(&filter, &b_lambdas)?;
                if b_hat > config.lipschitz_budget {
                    return Err(Error::Config(format!(
                        "filter (layer {l}, out {p}, in {q}) has integral Lipschitz estimate \
                         {b_hat:.4} above the budget {}",
                        config.lipschitz_budget
                    )));
                }
                row.push(filter);
            }
            filters.push(row);
        }
        layers.push(MnnLayer { filters });
    }
    MnnModel::new(layers, config.activation, widths)
}

/// Seeded random polynomial rescaled so |h| stays below 1 over `[0, lam_hi]`.
fn polynomial_filter(seed: u64, order: usize, lam_hi: f64) -> Result<FilterSpec> {
    if order == 0 {
        return Err(Error::Config("polynomial recipe needs order >= 1".into()));
    }
    let mut rng = rng_from(seed);
    let coeffs: Vec<f64> = (0..order)
        .map(|k| {
            let scale = 1.0 / ((k + 1) * (k + 1)) as f64;
            rng.gen_range(-1.0..1.0) * scale / lam_hi.powi(k as i32)
        })
        .collect();
    let trial = FilterSpec::polynomial(coeffs.clone())?;
    let grid: Vec<f64> = (0..=512).map(|i| lam_hi * i as f64 / 512.0).collect();
    let peak = frequency_response(&trial, &grid)?
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    if peak == 0.0 {
        return FilterSpec::polynomial(vec![0.5]);
    }
    let target_peak: f64 = rng.gen_range(0.4..0.95) * (1.0 - NON_AMPLIFY_MARGIN);
    let rescaled = coeffs.iter().map(|c| c * target_peak / peak).collect();
    FilterSpec::polynomial(rescaled)
}

/// Run the perturbation sweep: for each `(ε, trial)` draw a perturbation,
/// evaluate the network on the base and perturbed spectra, and compare the
/// output deviation against the bound.
pub fn run_stability_sweep(
    config: &StabilityConfig,
    spec: &Spectrum,
    input: &Signal,
) -> Result<StabilityReport> {
    config.validate()?;
    let q = spec.eigenvectors_required()?;
    if input.num_features() != 1 {
        return Err(Error::Config(
            "sweep inputs carry one feature (the bound fixes F0 = 1)".into(),
        ));
    }
    if input.num_points() != q.nrows() {
        return Err(Error::Config(format!(
            "input has {} points but the spectrum has dimension {}",
            input.num_points(),
            q.nrows()
        )));
    }

    let partition = gamma_partition(spec, config.gamma)?;
    let m = partition.num_groups();
    if m == 0 {
        return Err(Error::Config("spectrum has no positive eigenvalues".into()));
    }
    let model = build_filter_bank(config, spec, &partition)?;
    let base_output = forward(&model, spec, input)?;
    let f_norm = input.norm();

    // Dense perturbations act on the reconstructed operator.
    let base_operator = if config.family == PerturbFamily::SymmetrizedDense {
        let lam = DMatrix::from_diagonal(&DVector::from_vec(spec.eigenvalues().to_vec()));
        Some(SymmetricOperator::from_nearly_symmetric(
            q * lam * q.transpose(),
            1e-12,
        )?)
    } else {
        None
    };

    let eps_max = config.epsilons.iter().copied().fold(0.0, f64::max);
    let delta = delta_for_epsilon(config.gamma, eps_max);

    let cells: Vec<(usize, usize)> = (0..config.epsilons.len())
        .flat_map(|ei| (0..config.trials).map(move |t| (ei, t)))
        .collect();

    let mut rows: Vec<StabilityRow> = cells
        .par_iter()
        .map(|&(ei, trial)| -> Result<StabilityRow> {
            let eps = config.epsilons[ei];
            let seed = mix_seed(config.base_seed, &[1, ei as u64, trial as u64]);
            let perturbed_spec = match config.family {
                PerturbFamily::Scalar => {
                    commuting_perturbed_spectrum(spec, eps, &vec![1.0; spec.len()])?
                }
                PerturbFamily::EigenbasisDiagonal => {
                    let mut rng = rng_from(seed);
                    let signs: Vec<f64> = (0..spec.len())
                        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                        .collect();
                    commuting_perturbed_spectrum(spec, eps, &signs)?
                }
                PerturbFamily::SymmetrizedDense => {
                    let pspec = PerturbationSpec::new(config.family, eps, seed)?;
                    let e = generate_perturbation(&pspec, PerturbationBase::FromSpectrum(spec))?;
                    let base = base_operator.as_ref().expect("dense family keeps the operator");
                    let pert = apply_relative(base, &e, ApplyMode::Symmetrized)?;
                    eigendecompose(&pert.operator, EigCount::All)?
                }
            };
            let out = forward(&model, &perturbed_spec, input)?;
            let empirical = output_distance(&base_output, &out)?;
            let bound = theorem1_bound(
                config.layers,
                config.width,
                m,
                config.gamma,
                eps,
                config.lipschitz_budget,
                f_norm,
            )?;
            Ok(StabilityRow {
                epsilon: eps,
                trial,
                seed,
                empirical,
                bound,
                num_groups: m,
                input_norm: f_norm,
                violated: empirical > bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    rows.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon).then(a.trial.cmp(&b.trial)));

    if config.abort_on_violation {
        if let Some(r) = rows.iter().find(|r| r.violated) {
            return Err(Error::InvariantViolation(format!(
                "empirical deviation {:.6e} exceeds bound {:.6e} at epsilon={}, trial={} \
                 (seed {}); this falsifies the implementation or a precondition",
                r.empirical, r.bound, r.epsilon, r.trial, r.seed
            )));
        }
    }

    Ok(StabilityReport {
        gamma: config.gamma,
        layers: config.layers,
        width: config.width,
        lipschitz_budget: config.lipschitz_budget,
        delta,
        family: config.family,
        num_groups: m,
        rows,
    })
}

/// Pair of unit-norm probe signals with energy concentrated in different
/// parts of the spectrum.
pub struct ProbePair {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
}

impl ProbePair {
    /// Unit-norm random mixes of the eigenvectors in two index ranges.
    pub fn from_groups(
        spec: &Spectrum,
        group_a: std::ops::RangeInclusive<usize>,
        group_b: std::ops::RangeInclusive<usize>,
        seed: u64,
    ) -> Result<Self> {
        let q = spec.eigenvectors_required()?;
        let mut rng = rng_from(seed);
        let mut mix = |range: std::ops::RangeInclusive<usize>| -> Result<DVector<f64>> {
            let mut v = DVector::zeros(q.nrows());
            for i in range {
                if i >= q.ncols() {
                    return Err(Error::Validation(format!(
                        "probe index {i} exceeds spectrum size"
                    )));
                }
                let w: f64 = rng.gen_range(0.25..1.0);
                v += q.column(i) * w;
            }
            let n = v.norm();
            if n == 0.0 {
                return Err(Error::Validation("probe group is empty".into()));
            }
            Ok(v / n)
        };
        Ok(Self {
            a: mix(group_a)?,
            b: mix(group_b)?,
        })
    }
}

/// One row of the stability/discriminability table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub gamma: f64,
    pub lipschitz_budget: f64,
    /// Best response difference between the probes' dominant groups that an
    /// admissible (non-amplifying, budgeted) flat filter can realize.
    pub separation: f64,
    /// Reference bound at `ε = γ/2`, `L = F = 1`, unit input.
    pub stability_bound: f64,
}

/// Quantify how well flat filters can separate two probes as the partition
/// threshold and the Lipschitz budget vary. Separation can only shrink as
/// `γ` grows: coarser partitions merge the probes' frequencies.
pub fn discriminability_probe(
    spec: &Spectrum,
    gammas: &[f64],
    budgets: &[f64],
    pair: &ProbePair,
) -> Result<Vec<ProbeRow>> {
    let q = spec.eigenvectors_required()?;
    if pair.a.len() != q.nrows() || pair.b.len() != q.nrows() {
        return Err(Error::Validation("probe length does not match the spectrum".into()));
    }
    let a_hat = q.transpose() * &pair.a;
    let b_hat = q.transpose() * &pair.b;
    let vals = spec.eigenvalues();

    let mut rows = Vec::with_capacity(gammas.len() * budgets.len());
    for &gamma in gammas {
        let partition = gamma_partition(spec, gamma)?;
        let m = partition.num_groups();
        let dominant = |coeffs: &DVector<f64>| -> Option<usize> {
            let mut best = None;
            let mut best_energy = 0.0;
            for (gi, g) in partition.groups.iter().enumerate() {
                let energy: f64 = g.indices().map(|i| coeffs[i] * coeffs[i]).sum();
                if energy > best_energy {
                    best_energy = energy;
                    best = Some(gi);
                }
            }
            best
        };
        let (ga, gb) = match (dominant(&a_hat), dominant(&b_hat)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Validation(
                    "probes must carry energy on positive frequencies".into(),
                ))
            }
        };
        for &budget in budgets {
            let separation = if ga == gb {
                0.0
            } else {
                let (lo_g, hi_g) = (ga.min(gb), ga.max(gb));
                // A step filter assigns +g/2 up to a boundary and −g/2 after
                // it. The binding Lipschitz pair is the closest cross pair at
                // the step; pick the boundary that allows the widest step.
                let mut best = 0.0f64;
                for c in lo_g..hi_g {
                    let top_below = vals[partition.groups[c].end];
                    let bot_above = vals[partition.groups[c + 1].start];
                    let quotient = (top_below + bot_above) / (2.0 * (bot_above - top_below));
                    let allowed = (budget / quotient).min(2.0 * (1.0 - NON_AMPLIFY_MARGIN));
                    best = best.max(allowed);
                }
                best
            };
            let stability_bound =
                theorem1_bound(1, 1, m.max(1), gamma, gamma / 2.0, budget, 1.0)?;
            rows.push(ProbeRow {
                gamma,
                lipschitz_budget: budget,
                separation,
                stability_bound,
            });
        }
    }
    Ok(rows)
}
