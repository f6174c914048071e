//! Ad-hoc wireless power allocation trained with a spectral graph policy.
//!
//! A random planar network carries log-domain channel states
//! `s_ij = ln(d_ij^{−α} · h)` with Rayleigh fast fading `h` redrawn per
//! realization. A graph policy maps the current channel state to per-node
//! on-probabilities; it is trained by primal-dual stochastic ascent on the
//! expected sum rate under a total power budget, with gradients accumulated
//! by hand-written reverse mode through the spectral filter banks.
//!
//! The policy's filters are polynomials in the symmetric normalized channel
//! Laplacian whose spectral responses are averaged within each ratio-
//! separated eigenvalue group before application, so the applied filters are
//! flat on every group of whatever graph they run on. Group averaging is an
//! exact projection: applying it twice changes nothing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Rayleigh};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{exact_symmetrize, eigendecompose, EigCount, SymmetricOperator};
use crate::rng::{mix_seed, rng_from};
use crate::spectrum::gamma_partition;

/// How interference weights derive from the stored log-domain states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterferenceMode {
    /// Squared log-domain state `s_ij²` (the objective taken literally).
    LogSquared,
    /// Squared linear-domain gain `exp(s_ij)²`.
    LinearGain,
}

impl Default for InterferenceMode {
    fn default() -> Self {
        InterferenceMode::LogSquared
    }
}

/// Random planar ad-hoc network with a stored nominal channel realization.
#[derive(Debug, Clone)]
pub struct WirelessNetwork {
    positions: Vec<[f64; 2]>,
    /// Nominal log-domain channel states (includes any applied perturbation).
    states: DMatrix<f64>,
    /// Elementwise multiplier applied to every redrawn state matrix;
    /// all-ones for an unperturbed network.
    log_scale: DMatrix<f64>,
    p_max: f64,
    p0: f64,
    pathloss_exp: f64,
    region_half_width: f64,
    fading_seed: u64,
}

impl WirelessNetwork {
    pub fn num_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn fading_seed(&self) -> u64 {
        self.fading_seed
    }

    /// Override the default power budget (`p_max = n·p0/2`, `p0 = 1`).
    pub fn with_power_budget(mut self, p_max: f64, p0: f64) -> Result<Self> {
        if !(p_max > 0.0) || !(p0 > 0.0) {
            return Err(Error::Validation("power budget and on-power must be positive".into()));
        }
        self.p_max = p_max;
        self.p0 = p0;
        Ok(self)
    }

    /// Redraw the fast fading on the fixed geometry: fresh Rayleigh gain per
    /// ordered pair, pathloss from stored positions, self-distance one meter,
    /// then the persistent perturbation multiplier.
    pub fn draw_states(&self, seed: u64) -> DMatrix<f64> {
        let n = self.num_nodes();
        let mut rng = rng_from(seed);
        let fading = Rayleigh::new(2.0).expect("positive scale");
        let mut st = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { 1.0 } else { self.distance(i, j) };
                let h: f64 = fading.sample(&mut rng);
                st[(i, j)] = (d.powf(-self.pathloss_exp) * h).ln() * self.log_scale[(i, j)];
            }
        }
        st
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.positions[i], self.positions[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    pub fn to_json(&self) -> String {
        let wire = NetworkJson {
            positions: self.positions.clone(),
            s: self.states.transpose().as_slice().to_vec(),
            log_scale: self.log_scale.transpose().as_slice().to_vec(),
            p_max: self.p_max,
            p0: self.p0,
            pathloss_exp: self.pathloss_exp,
            region_half_width: self.region_half_width,
            fading_seed: self.fading_seed,
        };
        serde_json::to_string_pretty(&wire).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let wire: NetworkJson =
            serde_json::from_str(s).map_err(|e| Error::Validation(format!("network json: {e}")))?;
        let n = wire.positions.len();
        if wire.s.len() != n * n || wire.log_scale.len() != n * n {
            return Err(Error::Validation("network json: matrix sizes disagree with positions".into()));
        }
        Ok(Self {
            positions: wire.positions,
            states: DMatrix::from_row_slice(n, n, &wire.s),
            log_scale: DMatrix::from_row_slice(n, n, &wire.log_scale),
            p_max: wire.p_max,
            p0: wire.p0,
            pathloss_exp: wire.pathloss_exp,
            region_half_width: wire.region_half_width,
            fading_seed: wire.fading_seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkJson {
    positions: Vec<[f64; 2]>,
    /// Row-major nominal states.
    s: Vec<f64>,
    /// Row-major perturbation multipliers.
    log_scale: Vec<f64>,
    p_max: f64,
    p0: f64,
    pathloss_exp: f64,
    region_half_width: f64,
    fading_seed: u64,
}

/// Drop `n` nodes uniformly over `[−w, w]²` and draw the nominal channel.
/// Coincident nodes (closer than 1e-6 m) are re-dropped a bounded number of
/// times. Defaults: `p0 = 1` W, `p_max = n·p0/2`.
pub fn generate_network(
    n: usize,
    region_half_width: f64,
    pathloss_exp: f64,
    seed: u64,
) -> Result<WirelessNetwork> {
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 nodes, got {n}")));
    }
    if !(region_half_width > 0.0) {
        return Err(Error::Validation("region half-width must be positive".into()));
    }
    if !pathloss_exp.is_finite() {
        return Err(Error::Validation("pathloss exponent must be finite".into()));
    }
    let mut rng = rng_from(mix_seed(seed, &[0]));
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..100 {
            let cand = [
                rng.gen_range(-region_half_width..region_half_width),
                rng.gen_range(-region_half_width..region_half_width),
            ];
            let ok = positions.iter().all(|p| {
                let d = ((p[0] - cand[0]).powi(2) + (p[1] - cand[1]).powi(2)).sqrt();
                d >= 1e-6
            });
            if ok {
                positions.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Degenerate(
                "could not place a node away from existing ones after 100 retries".into(),
            ));
        }
    }

    let p0 = 1.0;
    let mut net = WirelessNetwork {
        positions,
        states: DMatrix::zeros(n, n),
        log_scale: DMatrix::from_element(n, n, 1.0),
        p_max: n as f64 * p0 / 2.0,
        p0,
        pathloss_exp,
        region_half_width,
        fading_seed: seed,
    };
    net.states = net.draw_states(mix_seed(seed, &[1]));
    Ok(net)
}

/// Scale the channel by a log-normal environment perturbation:
/// every state entry is multiplied by `exp(z)`, `z ~ N(0, σ²)`, and the same
/// multiplier persists across fading redraws.
pub fn perturb_channel(net: &WirelessNetwork, sigma: f64, seed: u64) -> Result<WirelessNetwork> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Validation(format!("sigma must be positive, got {sigma}")));
    }
    let n = net.num_nodes();
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    let mut out = net.clone();
    for i in 0..n {
        for j in 0..n {
            let z: f64 = normal.sample(&mut rng);
            let factor = z.exp();
            out.log_scale[(i, j)] = net.log_scale[(i, j)] * factor;
            out.states[(i, j)] = net.states[(i, j)] * factor;
        }
    }
    Ok(out)
}

/// Instantaneous sum rate for one channel realization and power vector:
/// `Σ_i ln(1 + exp(2 s_ii) p_i / (1 + Σ_{j≠i} w(s_ij) p_j))`.
pub fn rate_for_states(states: &DMatrix<f64>, p: &DVector<f64>, mode: InterferenceMode) -> Result<f64> {
    let n = states.nrows();
    if p.len() != n {
        return Err(Error::Validation("power vector length mismatch".into()));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Validation("powers must be nonnegative and finite".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut interference = 0.0;
        for j in 0..n {
            if j != i {
                interference += interference_weight(states[(i, j)], mode) * p[j];
            }
        }
        let direct = (2.0 * states[(i, i)]).exp();
        total += (1.0 + direct * p[i] / (1.0 + interference)).ln();
    }
    Ok(total)
}

fn interference_weight(s: f64, mode: InterferenceMode) -> f64 {
    match mode {
        InterferenceMode::LogSquared => s * s,
        InterferenceMode::LinearGain => (2.0 * s).exp(),
    }
}

/// Monte Carlo expected sum rate of a fixed power vector over fading
/// redraws, seeded by the network's fading seed.
pub fn sum_rate(net: &WirelessNetwork, p: &DVector<f64>, fading_draws: usize) -> Result<f64> {
    sum_rate_seeded(net, p, fading_draws, net.fading_seed)
}

/// [`sum_rate`] with an explicit seed for the fading draws.
pub fn sum_rate_seeded(
    net: &WirelessNetwork,
    p: &DVector<f64>,
    fading_draws: usize,
    seed: u64,
) -> Result<f64> {
    sum_rate_with_mode(net, p, fading_draws, seed, InterferenceMode::default())
}

pub fn sum_rate_with_mode(
    net: &WirelessNetwork,
    p: &DVector<f64>,
    fading_draws: usize,
    seed: u64,
    mode: InterferenceMode,
) -> Result<f64> {
    if fading_draws == 0 {
        return Err(Error::Validation("fading draw count must be >= 1".into()));
    }
    let mut acc = 0.0;
    for d in 0..fading_draws {
        let st = net.draw_states(mix_seed(seed, &[7, d as u64]));
        acc += rate_for_states(&st, p, mode)?;
    }
    Ok(acc / fading_draws as f64)
}

/// Equal-power baseline rounded to the binary constraint set: the
/// `⌊p_max/p0⌋` nodes with the largest nominal direct states transmit at
/// `p0`, the rest stay silent.
pub fn baseline_allocation(net: &WirelessNetwork) -> DVector<f64> {
    let n = net.num_nodes();
    let k = ((net.p_max / net.p0).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| net.states[(b, b)].total_cmp(&net.states[(a, a)]));
    let mut p = DVector::zeros(n);
    for &i in order.iter().take(k) {
        p[i] = net.p0;
    }
    p
}

/// Network architecture of the allocation policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub layers: usize,
    pub width: usize,
    /// Polynomial filter order (number of coefficients per filter).
    pub order: usize,
    pub gamma: f64,
}

impl PolicyArch {
    fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.width < 1 || self.order < 1 {
            return Err(Error::Validation("layers, width, and order must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Validation(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Feature widths `[1, F, …, F]` (the head maps the last F to one).
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![1];
        for _ in 0..self.layers {
            w.push(self.width);
        }
        w
    }

    fn num_coeffs(&self) -> usize {
        let w = self.widths();
        (0..self.layers).map(|l| w[l] * w[l + 1] * self.order).sum()
    }
}

/// Trainable spectral graph policy: polynomial filter coefficients per
/// layer, a logistic head mapping final features to on-probabilities, and
/// the dual variable of the power budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyModel {
    pub arch: PolicyArch,
    /// Flat coefficient tensor indexed `[layer][out][in][k]`.
    coeffs: Vec<f64>,
    head_w: Vec<f64>,
    head_b: f64,
    /// Dual variable of the expected power constraint; nonnegative.
    mu: f64,
    pub interference: InterferenceMode,
}

impl PolicyModel {
    fn coeff_index(&self, layer: usize, out: usize, inp: usize, k: usize) -> usize {
        let w = self.arch.widths();
        let mut base = 0;
        for l in 0..layer {
            base += w[l] * w[l + 1] * self.arch.order;
        }
        base + (out * w[layer] + inp) * self.arch.order + k
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// All differentiable parameters, coefficients first, then the head.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.coeffs.clone();
        v.extend_from_slice(&self.head_w);
        v.push(self.head_b);
        v
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        let nc = self.coeffs.len();
        let nw = self.head_w.len();
        if params.len() != nc + nw + 1 {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                nc + nw + 1,
                params.len()
            )));
        }
        self.coeffs.copy_from_slice(&params[..nc]);
        self.head_w.copy_from_slice(&params[nc..nc + nw]);
        self.head_b = params[nc + nw];
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: PolicyModel =
            serde_json::from_str(s).map_err(|e| Error::Validation(format!("policy json: {e}")))?;
        if m.coeffs.len() != m.arch.num_coeffs() || m.head_w.len() != m.arch.width {
            return Err(Error::Validation("policy json: parameter counts disagree with arch".into()));
        }
        Ok(m)
    }

    fn init(arch: PolicyArch, interference: InterferenceMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(mix_seed(seed, &[3]));
        let w = arch.widths();
        let mut coeffs = Vec::with_capacity(arch.num_coeffs());
        for l in 0..arch.layers {
            let fan_in = (w[l] as f64).sqrt();
            for _pq in 0..w[l] * w[l + 1] {
                for k in 0..arch.order {
                    let span = 1.0 / ((k + 1) as f64 * fan_in);
                    coeffs.push(rng.gen_range(-span..span));
                }
            }
        }
        let head_w = (0..arch.width)
            .map(|_| rng.gen_range(-0.5..0.5) / (arch.width as f64).sqrt())
            .collect();
        Ok(Self {
            arch,
            coeffs,
            head_w,
            head_b: 0.0,
            mu: 0.0,
            interference,
        })
    }
}

/// Cached eigenstructure of one channel graph: eigenbasis of the symmetric
/// normalized Laplacian plus group-averaged eigenvalue powers for the
/// policy's flat spectral responses.
pub struct SpectralBasis {
    q: DMatrix<f64>,
    /// Eigenvalue index lists of each group (zero group first if present).
    groups: Vec<Vec<usize>>,
    /// `avg_pows[k][i]` is the mean of `λ^k` over eigenvalue `i`'s group.
    avg_pows: Vec<DVector<f64>>,
}

impl SpectralBasis {
    /// Build from the log-domain channel states: adjacency
    /// `(|S| + |S|ᵀ)/2` with zero diagonal, symmetric normalized Laplacian,
    /// full decomposition, ratio partition at `gamma`, and group averaging of
    /// the first `order` eigenvalue powers.
    pub fn from_states(states: &DMatrix<f64>, gamma: f64, order: usize) -> Result<Self> {
        let n = states.nrows();
        let mut adj = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (states[(i, j)].abs() + states[(j, i)].abs());
                adj[(i, j)] = v;
                adj[(j, i)] = v;
            }
        }
        let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
        let mut lap = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                if adj[(i, j)] > 0.0 && deg[i] > 0.0 && deg[j] > 0.0 {
                    lap[(i, j)] -= adj[(i, j)] / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        let op = SymmetricOperator::from_nearly_symmetric(lap, 1e-12)?;
        let spec = eigendecompose(&op, EigCount::All)?;
        let partition = gamma_partition(&spec, gamma)?;

        // Group membership: zero group plus the positive groups.
        let mut group_of = vec![usize::MAX; n];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        if let Some(zg) = partition.zero_group {
            groups.push(zg.indices().collect());
        }
        for g in &partition.groups {
            groups.push(g.indices().collect());
        }
        for (gi, g) in groups.iter().enumerate() {
            for &i in g {
                group_of[i] = gi;
            }
        }

        let vals = spec.eigenvalues();
        let mut avg_pows = Vec::with_capacity(order);
        for k in 0..order {
            let mut means = vec![0.0f64; groups.len()];
            for (gi, g) in groups.iter().enumerate() {
                let s: f64 = g.iter().map(|&i| vals[i].powi(k as i32)).sum();
                means[gi] = s / g.len() as f64;
            }
            let v = DVector::from_fn(n, |i, _| means[group_of[i]]);
            avg_pows.push(v);
        }
        Ok(Self {
            q: spec.eigenvectors_required()?.clone(),
            groups,
            avg_pows,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// Group-average a raw per-eigenvalue response vector. Averaging is an
    /// exact projection: a second application reproduces the output.
    pub fn project_flat(&self, response: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(response.len());
        for g in &self.groups {
            let mean = g.iter().map(|&i| response[i]).sum::<f64>() / g.len() as f64;
            for &i in g {
                out[i] = mean;
            }
        }
        out
    }
}

/// Standardized node features from one state realization: the direct link
/// states, centered and scaled to unit variance.
pub fn node_features(states: &DMatrix<f64>) -> DVector<f64> {
    let n = states.nrows();
    let diag = DVector::from_fn(n, |i, _| states[(i, i)]);
    let mean = diag.sum() / n as f64;
    let var = diag.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-9);
    diag.map(|v| (v - mean) / sd)
}

struct ForwardTrace {
    /// Spectral coefficients of each layer's input.
    input_coeffs: Vec<DMatrix<f64>>,
    /// Pre-activation outputs of each layer.
    preacts: Vec<DMatrix<f64>>,
    /// Final feature block after the last activation.
    final_features: DMatrix<f64>,
    /// Head logits and probabilities.
    logits: DVector<f64>,
    probs: DVector<f64>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Evaluate the policy: per-node transmit probabilities for one feature
/// vector on the given channel graph.
pub fn policy_probabilities(
    model: &PolicyModel,
    basis: &SpectralBasis,
    features: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(forward_trace(model, basis, features)?.probs)
}

fn forward_trace(
    model: &PolicyModel,
    basis: &SpectralBasis,
    features: &DVector<f64>,
) -> Result<ForwardTrace> {
    let n = basis.dim();
    if features.len() != n {
        return Err(Error::Validation("feature length does not match the graph".into()));
    }
    if basis.avg_pows.len() < model.arch.order {
        return Err(Error::Validation(
            "basis was built with a smaller filter order than the model".into(),
        ));
    }
    let widths = model.arch.widths();
    let mut x = DMatrix::from_column_slice(n, 1, features.as_slice());
    let mut input_coeffs = Vec::with_capacity(model.arch.layers);
    let mut preacts = Vec::with_capacity(model.arch.layers);

    for l in 0..model.arch.layers {
        let (f_in, f_out) = (widths[l], widths[l + 1]);
        let x_hat = basis.q.transpose() * &x;
        let mut y_hat = DMatrix::zeros(n, f_out);
        for p in 0..f_out {
            for qf in 0..f_in {
                for k in 0..model.arch.order {
                    let c = model.coeffs[model.coeff_index(l, p, qf, k)];
                    if c != 0.0 {
                        let pow = &basis.avg_pows[k];
                        for i in 0..n {
                            y_hat[(i, p)] += c * pow[i] * x_hat[(i, qf)];
                        }
                    }
                }
            }
        }
        let preact = &basis.q * y_hat;
        x = preact.map(|v| v.max(0.0));
        input_coeffs.push(x_hat);
        preacts.push(preact);
    }

    let logits = DVector::from_fn(n, |i, _| {
        let mut z = model.head_b;
        for (p, w) in model.head_w.iter().enumerate() {
            z += w * x[(i, p)];
        }
        z
    });
    let probs = logits.map(logistic);
    Ok(ForwardTrace {
        input_coeffs,
        preacts,
        final_features: x,
        logits,
        probs,
    })
}

/// Gradients of the sampled Lagrangian with respect to every parameter.
pub struct PolicyGradient {
    pub objective: f64,
    pub sum_rate: f64,
    pub total_power: f64,
    /// Aligned with [`PolicyModel::params_flat`].
    pub params: Vec<f64>,
}

/// Sampled Lagrangian `Σ_i r_i − μ (1ᵀp − p_max)` and its gradient for one
/// channel realization, with `p = p0 · probabilities`.
pub fn policy_gradient(
    model: &PolicyModel,
    basis: &SpectralBasis,
    states: &DMatrix<f64>,
    p_max: f64,
    p0: f64,
) -> Result<PolicyGradient> {
    let n = basis.dim();
    let features = node_features(states);
    let trace = forward_trace(model, basis, &features)?;
    let p = trace.probs.map(|q| p0 * q);

    // Rate terms and their power gradient.
    let mode = model.interference;
    let mut direct = vec![0.0f64; n];
    let mut interference = vec![0.0f64; n];
    for i in 0..n {
        direct[i] = (2.0 * states[(i, i)]).exp();
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                acc += interference_weight(states[(i, j)], mode) * p[j];
            }
        }
        interference[i] = acc;
    }
    let mut sum_rate = 0.0;
    for i in 0..n {
        sum_rate += (1.0 + direct[i] * p[i] / (1.0 + interference[i])).ln();
    }
    let total_power = p.sum();
    let objective = sum_rate - model.mu * (total_power - p_max);

    // dJ/dp_k = a_k/T_k − Σ_{i≠k} a_i p_i w_ik / (U_i T_i) − μ
    let mut dj_dp = DVector::zeros(n);
    for k in 0..n {
        let u_k = 1.0 + interference[k];
        let t_k = u_k + direct[k] * p[k];
        let mut g = direct[k] / t_k;
        for i in 0..n {
            if i != k {
                let u_i = 1.0 + interference[i];
                let t_i = u_i + direct[i] * p[i];
                g -= direct[i] * p[i] * interference_weight(states[(i, k)], mode) / (u_i * t_i);
            }
        }
        dj_dp[k] = g - model.mu;
    }

    // Through the head: dz_i = dJ/dp_i · p0 · q_i (1 − q_i).
    let dz = DVector::from_fn(n, |i, _| {
        let q = trace.probs[i];
        dj_dp[i] * p0 * q * (1.0 - q)
    });
    let widths = model.arch.widths();
    let f_last = *widths.last().unwrap();
    let mut grad_head_w = vec![0.0f64; f_last];
    let mut grad_head_b = 0.0;
    let mut dx = DMatrix::zeros(n, f_last);
    for i in 0..n {
        grad_head_b += dz[i];
        for pf in 0..f_last {
            grad_head_w[pf] += dz[i] * trace.final_features[(i, pf)];
            dx[(i, pf)] = dz[i] * model.head_w[pf];
        }
    }

    // Through the layers, last to first.
    let mut grad_coeffs = vec![0.0f64; model.coeffs.len()];
    for l in (0..model.arch.layers).rev() {
        let (f_in, f_out) = (widths[l], widths[l + 1]);
        let preact = &trace.preacts[l];
        let x_hat = &trace.input_coeffs[l];
        let mut dy = dx.clone();
        for v in dy.iter_mut().zip(preact.iter()) {
            if *v.1 <= 0.0 {
                *v.0 = 0.0;
            }
        }
        let dy_hat = basis.q.transpose() * dy;
        let mut dx_hat = DMatrix::zeros(n, f_in);
        for pf in 0..f_out {
            for qf in 0..f_in {
                for k in 0..model.arch.order {
                    let pow = &basis.avg_pows[k];
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += dy_hat[(i, pf)] * pow[i] * x_hat[(i, qf)];
                    }
                    grad_coeffs[model.coeff_index(l, pf, qf, k)] = acc;
                }
                for k in 0..model.arch.order {
                    let c = model.coeffs[model.coeff_index(l, pf, qf, k)];
                    if c != 0.0 {
                        let pow = &basis.avg_pows[k];
                        for i in 0..n {
                            dx_hat[(i, qf)] += c * pow[i] * dy_hat[(i, pf)];
                        }
                    }
                }
            }
        }
        dx = &basis.q * dx_hat;
    }

    let mut params = grad_coeffs;
    params.extend_from_slice(&grad_head_w);
    params.push(grad_head_b);
    Ok(PolicyGradient {
        objective,
        sum_rate,
        total_power,
        params,
    })
}

/// One record of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPoint {
    pub iteration: usize,
    pub sample_sum_rate: f64,
    pub total_power: f64,
    pub mu: f64,
}

/// Training settings beyond the architecture.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSettings {
    pub iters: usize,
    pub lr: f64,
    #[serde(default)]
    pub interference: InterferenceMode,
}

/// Primal-dual stochastic gradient ascent on the expected sum rate under the
/// power budget. Each iteration draws a fresh fading realization, ascends
/// the sampled Lagrangian, and updates the dual variable with a ten times
/// smaller step: `μ ← max(0, μ + (lr/10)(1ᵀp − p_max))`.
pub fn train_policy(
    net: &WirelessNetwork,
    arch: PolicyArch,
    settings: TrainSettings,
    seed: u64,
) -> Result<(PolicyModel, Vec<TrainPoint>)> {
    if settings.iters < 1 {
        return Err(Error::Validation("iteration count must be >= 1".into()));
    }
    if !(settings.lr >= 0.0) || !settings.lr.is_finite() {
        return Err(Error::Validation("learning rate must be nonnegative".into()));
    }
    let basis = SpectralBasis::from_states(net.states(), arch.gamma, arch.order)?;
    let mut model = PolicyModel::init(arch, settings.interference, seed)?;
    let mut curve = Vec::with_capacity(settings.iters);
    let lr = settings.lr;
    let lr_dual = lr / 10.0;

    for t in 0..settings.iters {
        let st = net.draw_states(mix_seed(seed, &[11, t as u64]));
        let grad = policy_gradient(&model, &basis, &st, net.p_max(), net.p0())?;
        if !grad.objective.is_finite() {
            return Err(Error::Numeric(format!(
                "training objective became non-finite at iteration {t}"
            )));
        }
        if lr > 0.0 {
            let mut params = model.params_flat();
            for (p, g) in params.iter_mut().zip(&grad.params) {
                *p += lr * g;
            }
            model.set_params_flat(&params)?;
            model.mu = (model.mu + lr_dual * (grad.total_power - net.p_max())).max(0.0);
        }
        curve.push(TrainPoint {
            iteration: t,
            sample_sum_rate: grad.sum_rate,
            total_power: grad.total_power,
            mu: model.mu,
        });
    }
    Ok((model, curve))
}

pub fn training_curve_csv(curve: &[TrainPoint]) -> String {
    let mut out = String::from("iteration,sample_sum_rate,total_power,mu\n");
    for p in curve {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            p.iteration, p.sample_sum_rate, p.total_power, p.mu
        ));
    }
    out
}

/// Expected behavior of a trained policy on a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub expected_sum_rate: f64,
    pub expected_power: f64,
    /// Expected sum rate with probabilities hard-thresholded at 1/2.
    pub hard_sum_rate: f64,
}

/// Evaluate a policy over fading redraws: the policy sees each realization
/// through its features while the graph is the evaluation network's nominal
/// channel.
pub fn evaluate_policy(
    net: &WirelessNetwork,
    model: &PolicyModel,
    draws: usize,
    seed: u64,
) -> Result<PolicyEvaluation> {
    if draws == 0 {
        return Err(Error::Validation("evaluation draw count must be >= 1".into()));
    }
    let basis = SpectralBasis::from_states(net.states(), model.arch.gamma, model.arch.order)?;
    let mut rate = 0.0;
    let mut power = 0.0;
    let mut hard_rate = 0.0;
    for d in 0..draws {
        let st = net.draw_states(mix_seed(seed, &[13, d as u64]));
        let probs = policy_probabilities(model, &basis, &node_features(&st))?;
        let p = probs.map(|q| net.p0() * q);
        rate += rate_for_states(&st, &p, model.interference)?;
        power += p.sum();
        let hard = probs.map(|q| if q > 0.5 { net.p0() } else { 0.0 });
        hard_rate += rate_for_states(&st, &hard, model.interference)?;
    }
    let d = draws as f64;
    Ok(PolicyEvaluation {
        expected_sum_rate: rate / d,
        expected_power: power / d,
        hard_sum_rate: hard_rate / d,
    })
}

/// Expected sum rate of the static baseline allocation on a network.
pub fn baseline_sum_rate(
    net: &WirelessNetwork,
    draws: usize,
    seed: u64,
    mode: InterferenceMode,
) -> Result<f64> {
    let p = baseline_allocation(net);
    sum_rate_with_mode(net, &p, draws, seed, mode)
}

/// One robustness trial: sum-rate ratios against the baseline on the nominal
/// and on the perturbed channel, for one trained architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub layers: usize,
    pub width: usize,
    pub sigma: f64,
    pub seed: u64,
    pub ratio_nominal: f64,
    pub ratio_perturbed: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("L,F,sigma,seed,ratio_nominal,ratio_perturbed,difference\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.16e},{},{:.16e},{:.16e},{:.16e}\n",
                r.layers, r.width, r.sigma, r.seed, r.ratio_nominal, r.ratio_perturbed, r.difference
            ));
        }
        out
    }

    /// Median difference per `(L, F, σ)` cell, rows ordered by the input
    /// grids.
    pub fn median_differences(&self) -> Vec<(usize, usize, f64, f64)> {
        let mut cells: Vec<(usize, usize, f64)> = Vec::new();
        for r in &self.rows {
            if !cells.iter().any(|c| c.0 == r.layers && c.1 == r.width && c.2 == r.sigma) {
                cells.push((r.layers, r.width, r.sigma));
            }
        }
        cells
            .iter()
            .map(|&(l, f, s)| {
                let mut ds: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.layers == l && r.width == f && r.sigma == s)
                    .map(|r| r.difference)
                    .collect();
                ds.sort_by(|a, b| a.total_cmp(b));
                let m = if ds.len() % 2 == 1 {
                    ds[ds.len() / 2]
                } else {
                    0.5 * (ds[ds.len() / 2 - 1] + ds[ds.len() / 2])
                };
                (l, f, s, m)
            })
            .collect()
    }
}

/// Study settings: the architecture grid, perturbation strengths, seeds, and
/// shared training/evaluation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySettings {
    pub grid_layers: Vec<usize>,
    pub grid_widths: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub order: usize,
    pub gamma: f64,
    pub train: TrainSettings,
    pub eval_draws: usize,
}

/// Train one policy per `(L, F, seed)` cell and measure how much the
/// policy-to-baseline sum-rate ratio moves when the channel is scaled by a
/// log-normal perturbation. Nominal and perturbed evaluations share fading
/// seeds so the difference isolates the perturbation.
pub fn robustness_study(net: &WirelessNetwork, settings: &StudySettings) -> Result<RobustnessReport> {
    if settings.grid_layers.is_empty()
        || settings.grid_widths.is_empty()
        || settings.sigmas.is_empty()
        || settings.seeds.is_empty()
    {
        return Err(Error::Validation("study grids must be nonempty".into()));
    }
    if settings.eval_draws == 0 {
        return Err(Error::Validation("evaluation draw count must be >= 1".into()));
    }
    let mut cells = Vec::new();
    for &l in &settings.grid_layers {
        for &f in &settings.grid_widths {
            for &seed in &settings.seeds {
                cells.push((l, f, seed));
            }
        }
    }
    let rows: Vec<Vec<RobustnessRow>> = cells
        .par_iter()
        .map(|&(layers, width, seed)| -> Result<Vec<RobustnessRow>> {
            let arch = PolicyArch {
                layers,
                width,
                order: settings.order,
                gamma: settings.gamma,
            };
            let (model, _) = train_policy(net, arch, settings.train, seed)?;
            let eval_seed = mix_seed(seed, &[17]);
            let nominal_eval = evaluate_policy(net, &model, settings.eval_draws, eval_seed)?;
            let nominal_base =
                baseline_sum_rate(net, settings.eval_draws, eval_seed, model.interference)?;
            let ratio_nominal = nominal_eval.expected_sum_rate / nominal_base;

            let mut out = Vec::with_capacity(settings.sigmas.len());
            for (si, &sigma) in settings.sigmas.iter().enumerate() {
                let perturbed = perturb_channel(net, sigma, mix_seed(seed, &[19, si as u64]))?;
                let pert_eval = evaluate_policy(&perturbed, &model, settings.eval_draws, eval_seed)?;
                let pert_base = baseline_sum_rate(
                    &perturbed,
                    settings.eval_draws,
                    eval_seed,
                    model.interference,
                )?;
                let ratio_perturbed = pert_eval.expected_sum_rate / pert_base;
                out.push(RobustnessRow {
                    layers,
                    width,
                    sigma,
                    seed,
                    ratio_nominal,
                    ratio_perturbed,
                    difference: (ratio_nominal - ratio_perturbed).abs(),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut flat: Vec<RobustnessRow> = rows.into_iter().flatten().collect();
    flat.sort_by(|a, b| {
        a.layers
            .cmp(&b.layers)
            .then(a.width.cmp(&b.width))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(RobustnessReport { rows: flat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_net(seed: u64) -> WirelessNetwork {
        generate_network(5, 20.0, 2.2, seed).unwrap()
    }

    #[test]
    fn state_formula_matches_hand_values() {
        // d = 1, h = 1: s = ln(1) = 0; d = 10, h = 1: s = -2.2 ln 10.
        assert_eq!((1.0f64.powf(-2.2) * 1.0).ln(), 0.0);
        let s = (10.0f64.powf(-2.2) * 1.0).ln();
        assert_relative_eq!(s, -2.2 * 10.0f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(s, -5.0657, epsilon = 1e-4);
    }

    #[test]
    fn zero_power_means_zero_rate() {
        let net = small_net(1);
        let p = DVector::zeros(5);
        let r = sum_rate(&net, &p, 3).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn single_node_rate_is_log_two_at_unit_gain() {
        // One direct state of zero (|h|² = 1), unit power, no interferers.
        let st = DMatrix::from_row_slice(1, 1, &[0.0]);
        let p = DVector::from_vec(vec![1.0]);
        let r = rate_for_states(&st, &p, InterferenceMode::LogSquared).unwrap();
        assert_relative_eq!(r, 2.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn interference_strictly_lowers_rates() {
        let st = DMatrix::from_row_slice(2, 2, &[0.5, -2.0, -2.0, 0.5]);
        let both = DVector::from_vec(vec![1.0, 1.0]);
        let r_both = rate_for_states(&st, &both, InterferenceMode::LogSquared).unwrap();
        let solo_rate = |i: usize| {
            let mut p = DVector::zeros(2);
            p[i] = 1.0;
            rate_for_states(&st, &p, InterferenceMode::LogSquared).unwrap()
        };
        assert!(r_both < solo_rate(0) + solo_rate(1));
    }

    #[test]
    fn negative_power_is_rejected() {
        let net = small_net(2);
        let p = DVector::from_vec(vec![1.0, -0.1, 0.0, 0.0, 0.0]);
        assert!(matches!(sum_rate(&net, &p, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn perturbation_scale_is_lognormal_with_unit_limit() {
        let net = small_net(3);
        // Sample mean of exp(z) over many draws within 1% of exp(σ²/2).
        let sigma = 0.1;
        let mut acc = 0.0;
        let mut count = 0usize;
        for seed in 0..200 {
            let pert = perturb_channel(&net, sigma, seed).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    acc += pert.log_scale[(i, j)];
                    count += 1;
                }
            }
        }
        let mean = acc / count as f64;
        assert_relative_eq!(mean, (sigma * sigma / 2.0f64).exp(), max_relative = 0.01);
        assert_eq!(count, 5000);
    }

    #[test]
    fn perturbed_states_scale_elementwise() {
        let net = small_net(4);
        let pert = perturb_channel(&net, 0.2, 9).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = net.states()[(i, j)] * pert.log_scale[(i, j)];
                assert_relative_eq!(pert.states()[(i, j)], expect, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let net = small_net(5);
        let arch = PolicyArch {
            layers: 2,
            width: 2,
            order: 3,
            gamma: 0.2,
        };
        let basis = SpectralBasis::from_states(net.states(), arch.gamma, arch.order).unwrap();
        let mut model = PolicyModel::init(arch, InterferenceMode::LogSquared, 77).unwrap();
        model.mu = 0.3;
        let st = net.draw_states(123);

        let grad = policy_gradient(&model, &basis, &st, net.p_max(), net.p0()).unwrap();
        let params = model.params_flat();
        let step = 1e-5;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += step;
            let mut minus = params.clone();
            minus[i] -= step;
            let mut m_plus = model.clone();
            m_plus.set_params_flat(&plus).unwrap();
            let mut m_minus = model.clone();
            m_minus.set_params_flat(&minus).unwrap();
            let f_plus = policy_gradient(&m_plus, &basis, &st, net.p_max(), net.p0())
                .unwrap()
                .objective;
            let f_minus = policy_gradient(&m_minus, &basis, &st, net.p_max(), net.p0())
                .unwrap()
                .objective;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let scale = grad.params[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (grad.params[i] - fd).abs() / scale <= 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                grad.params[i]
            );
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let net = small_net(6);
        let arch = PolicyArch {
            layers: 1,
            width: 2,
            order: 2,
            gamma: 0.2,
        };
        let settings = TrainSettings {
            iters: 5,
            lr: 0.0,
            interference: InterferenceMode::LogSquared,
        };
        let (model, curve) = train_policy(&net, arch, settings, 21).unwrap();
        let fresh = PolicyModel::init(arch, InterferenceMode::LogSquared, 21).unwrap();
        assert_eq!(model.params_flat(), fresh.params_flat());
        assert_eq!(model.mu(), 0.0);
        assert_eq!(curve.len(), 5);
    }

    #[test]
    fn training_is_deterministic_given_seeds() {
        let net = small_net(7);
        let arch = PolicyArch {
            layers: 2,
            width: 2,
            order: 2,
            gamma: 0.2,
        };
        let settings = TrainSettings {
            iters: 30,
            lr: 0.01,
            interference: InterferenceMode::LogSquared,
        };
        let (m1, c1) = train_policy(&net, arch, settings, 5).unwrap();
        let (m2, c2) = train_policy(&net, arch, settings, 5).unwrap();
        assert_eq!(m1.params_flat(), m2.params_flat());
        assert_eq!(training_curve_csv(&c1), training_curve_csv(&c2));
    }

    #[test]
    fn trained_policy_respects_power_budget() {
        let net = generate_network(8, 30.0, 2.2, 8).unwrap();
        let arch = PolicyArch {
            layers: 1,
            width: 2,
            order: 2,
            gamma: 0.2,
        };
        let settings = TrainSettings {
            iters: 400,
            lr: 0.05,
            interference: InterferenceMode::LogSquared,
        };
        let (model, _) = train_policy(&net, arch, settings, 3).unwrap();
        let eval = evaluate_policy(&net, &model, 64, 99).unwrap();
        assert!(
            eval.expected_power <= 1.05 * net.p_max(),
            "expected power {} exceeds 1.05 * {}",
            eval.expected_power,
            net.p_max()
        );
    }

    #[test]
    fn flat_projection_is_idempotent() {
        let net = small_net(9);
        let basis = SpectralBasis::from_states(net.states(), 0.2, 3).unwrap();
        let raw = DVector::from_fn(basis.dim(), |i, _| (i as f64 * 0.7).sin());
        let once = basis.project_flat(&raw);
        let twice = basis.project_flat(&once);
        assert!((once - twice).norm() <= 1e-12);
    }

    #[test]
    fn monte_carlo_variance_shrinks_with_draws() {
        let net = small_net(10);
        let p = baseline_allocation(&net);
        let variance = |draws: usize| -> f64 {
            let reps = 40;
            let xs: Vec<f64> = (0..reps)
                .map(|r| sum_rate_seeded(&net, &p, draws, 1000 + r as u64).unwrap())
                .collect();
            let mean = xs.iter().sum::<f64>() / reps as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64
        };
        let v_small = variance(4);
        let v_big = variance(32);
        let ratio = v_small / v_big;
        // Theoretical ratio is 8; accept within a factor of 3.
        assert!(
            ratio > 8.0 / 3.0 && ratio < 24.0,
            "variance ratio {ratio} too far from 8"
        );
    }

    #[test]
    fn baseline_turns_on_half_the_nodes() {
        let net = generate_network(10, 30.0, 2.2, 11).unwrap();
        let p = baseline_allocation(&net);
        let on = p.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(on, 5);
        assert_relative_eq!(p.sum(), net.p_max(), max_relative = 1e-12);
    }

    #[test]
    fn zero_sigma_study_rows_vanish() {
        // A perturbation of exactly zero is rejected; the closest valid
        // statement is that the difference is tiny for tiny sigma.
        let net = small_net(12);
        assert!(perturb_channel(&net, 0.0, 1).is_err());
        let settings = StudySettings {
            grid_layers: vec![1],
            grid_widths: vec![1],
            sigmas: vec![1e-9],
            seeds: vec![1],
            order: 2,
            gamma: 0.2,
            train: TrainSettings {
                iters: 20,
                lr: 0.01,
                interference: InterferenceMode::LogSquared,
            },
            eval_draws: 16,
        };
        let report = robustness_study(&net, &settings).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].difference < 1e-6);
    }

    #[test]
    fn network_json_round_trip() {
        let net = small_net(13);
        let back = WirelessNetwork::from_json(&net.to_json()).unwrap();
        assert_eq!(net.states(), back.states());
        assert_eq!(net.positions(), back.positions());
        assert_eq!(net.p_max(), back.p_max());
    }

    #[test]
    fn policy_json_round_trip() {
        let arch = PolicyArch {
            layers: 2,
            width: 3,
            order: 2,
            gamma: 0.3,
        };
        let model = PolicyModel::init(arch, InterferenceMode::LinearGain, 5).unwrap();
        let back = PolicyModel::from_json(&model.to_json()).unwrap();
        assert_eq!(model.params_flat(), back.params_flat());
        assert_eq!(model.interference, back.interference);
    }
}
