//! Multi-layer spectral networks: each layer maps `F_{l−1}` input features to
//! `F_l` output features through a bank of spectral filters followed by a
//! pointwise activation, all sharing one operator eigendecomposition.
//!
//! Every allowed activation is 1-Lipschitz with `σ(0) = 0`, so a zero input
//! propagates to a zero output and layer banks built from non-amplifying
//! filters never expand distances by more than the feature fan-in.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{frequency_response, FilterSpec};
use crate::spectrum::Spectrum;

/// Pointwise activations, all normalized Lipschitz (`|σ(a)−σ(b)| ≤ |a−b|`)
/// and zero-preserving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Abs,
    Tanh,
    Identity,
}

impl Activation {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Abs => x.abs(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Apply an activation elementwise.
pub fn activation_eval(kind: Activation, values: &mut DMatrix<f64>) {
    for v in values.iter_mut() {
        *v = kind.eval(*v);
    }
}

/// An `n × F` block of node signals (columns are features).
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    values: DMatrix<f64>,
}

impl Signal {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Validation("signal needs at least one feature".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("signal contains non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        let n = v.len();
        Self::new(DMatrix::from_column_slice(n, 1, v.as_slice()))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn num_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.values.ncols()
    }

    /// Discrete L² norm over all features (Frobenius norm of the block).
    pub fn norm(&self) -> f64 {
        self.values.norm()
    }
}

/// One layer: `filters[p][q]` maps input feature `q` to output feature `p`.
#[derive(Debug, Clone)]
pub struct MnnLayer {
    pub filters: Vec<Vec<FilterSpec>>,
}

/// A layered spectral network with per-layer filter banks and a shared
/// activation.
#[derive(Debug, Clone)]
pub struct MnnModel {
    layers: Vec<MnnLayer>,
    activation: Activation,
    feature_widths: Vec<usize>,
}

impl MnnModel {
    /// `feature_widths` is `[F_0, …, F_L]`; layer `l` must hold an
    /// `F_{l+1} × F_l` filter bank.
    pub fn new(
        layers: Vec<MnnLayer>,
        activation: Activation,
        feature_widths: Vec<usize>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        if feature_widths.len() != layers.len() + 1 {
            return Err(Error::Validation(format!(
                "expected {} feature widths for {} layers, got {}",
                layers.len() + 1,
                layers.len(),
                feature_widths.len()
            )));
        }
        if feature_widths.iter().any(|&w| w == 0) {
            return Err(Error::Validation("feature widths must be positive".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (f_in, f_out) = (feature_widths[l], feature_widths[l + 1]);
            if layer.filters.len() != f_out
                || layer.filters.iter().any(|row| row.len() != f_in)
            {
                return Err(Error::Validation(format!(
                    "layer {l}: filter bank must be {f_out} x {f_in}"
                )));
            }
        }
        Ok(Self {
            layers,
            activation,
            feature_widths,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn feature_widths(&self) -> &[usize] {
        &self.feature_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[MnnLayer] {
        &self.layers
    }

    pub fn to_json(&self) -> String {
        let wire = ModelJson {
            feature_widths: self.feature_widths.clone(),
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.filters
                        .iter()
                        .map(|row| {
                            row.iter()
                                .map(|f| serde_json::from_str(&f.to_json()).expect("filter json"))
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let wire: ModelJson =
            serde_json::from_str(s).map_err(|e| Error::Validation(format!("model json: {e}")))?;
        let layers = wire
            .layers
            .iter()
            .map(|l| {
                let filters = l
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|f| FilterSpec::from_json(&f.to_string()))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MnnLayer { filters })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, wire.activation, wire.feature_widths)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    feature_widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Vec<Vec<serde_json::Value>>>,
}

/// Evaluate the network on a signal in the given operator spectrum.
///
/// Each layer projects its input onto the eigenbasis once, scales the
/// coefficients by every filter's response, recombines, and applies the
/// activation: `f_l^p = σ(Σ_q h_l^{pq} applied to f_{l−1}^q)`.
pub fn forward(model: &MnnModel, spec: &Spectrum, input: &Signal) -> Result<Signal> {
    let q = spec.eigenvectors_required()?;
    let n = q.nrows();
    if input.num_points() != n {
        return Err(Error::Validation(format!(
            "input has {} points but the operator has dimension {n}",
            input.num_points()
        )));
    }
    if input.num_features() != model.feature_widths[0] {
        return Err(Error::Validation(format!(
            "input has {} features but the network expects {}",
            input.num_features(),
            model.feature_widths[0]
        )));
    }

    let mut features = input.values.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let f_out = model.feature_widths[l + 1];
        let coeffs = q.transpose() * &features;
        let mut out_coeffs = DMatrix::zeros(coeffs.nrows(), f_out);
        for (p, row) in layer.filters.iter().enumerate() {
            for (qi, filter) in row.iter().enumerate() {
                let response = frequency_response(filter, spec.eigenvalues())?;
                for (i, r) in response.iter().enumerate() {
                    out_coeffs[(i, p)] += r * coeffs[(i, qi)];
                }
            }
        }
        features = q * out_coeffs;
        activation_eval(model.activation, &mut features);
    }
    Signal::new(features)
}

/// Discrete L² distance between two signal blocks of matching shape.
pub fn output_distance(a: &Signal, b: &Signal) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::Validation(format!(
            "signal shapes differ: {:?} vs {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    Ok((&a.values - &b.values).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{eigendecompose, EigCount, SymmetricOperator};
    use approx::assert_relative_eq;

    fn path_spectrum() -> Spectrum {
        let op =
            SymmetricOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]), 0.0)
                .unwrap();
        eigendecompose(&op, EigCount::All).unwrap()
    }

    fn single_filter_model(coeffs: Vec<f64>, layers: usize, act: Activation) -> MnnModel {
        let layer = || MnnLayer {
            filters: vec![vec![FilterSpec::polynomial(coeffs.clone()).unwrap()]],
        };
        MnnModel::new(
            (0..layers).map(|_| layer()).collect(),
            act,
            vec![1; layers + 1],
        )
        .unwrap()
    }

    #[test]
    fn identity_network_reproduces_input() {
        let spec = path_spectrum();
        let model = single_filter_model(vec![1.0], 1, Activation::Identity);
        let x = Signal::from_vector(DVector::from_vec(vec![0.6, -0.9])).unwrap();
        let y = forward(&model, &spec, &x).unwrap();
        assert!(output_distance(&x, &y).unwrap() <= 1e-12);
    }

    #[test]
    fn zero_filter_gives_zero_output() {
        let spec = path_spectrum();
        let model = single_filter_model(vec![0.0], 1, Activation::Relu);
        let x = Signal::from_vector(DVector::from_vec(vec![0.6, -0.9])).unwrap();
        let y = forward(&model, &spec, &x).unwrap();
        assert!(y.norm() <= 1e-12);
    }

    #[test]
    fn two_layer_abs_network_on_path() {
        // Identity filters, |.| twice: (1, -1) -> (1, 1).
        let spec = path_spectrum();
        let model = single_filter_model(vec![1.0], 2, Activation::Abs);
        let x = Signal::from_vector(DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let y = forward(&model, &spec, &x).unwrap();
        assert_relative_eq!(y.values()[(0, 0)], 1.0, max_relative = 1e-10);
        assert_relative_eq!(y.values()[(1, 0)], 1.0, max_relative = 1e-10);
    }

    #[test]
    fn output_distance_examples() {
        let a = Signal::from_vector(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let b = Signal::from_vector(DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(output_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(output_distance(&a, &b).unwrap(), 1.0);

        let c = Signal::from_vector(DVector::from_vec(vec![3.0, 4.0])).unwrap();
        let z = Signal::from_vector(DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(output_distance(&c, &z).unwrap(), 5.0);

        let wide = Signal::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(output_distance(&a, &wide).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.eval(-1.0), 0.0);
        assert_eq!(Activation::Relu.eval(0.0), 0.0);
        assert_eq!(Activation::Relu.eval(2.0), 2.0);
        assert_eq!(Activation::Abs.eval(-3.0), 3.0);
        assert_eq!(Activation::Identity.eval(-0.7), -0.7);
        for a in [Activation::Relu, Activation::Abs, Activation::Tanh, Activation::Identity] {
            assert_eq!(a.eval(0.0), 0.0);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let spec = path_spectrum();
        let model = single_filter_model(vec![1.0], 1, Activation::Relu);
        let x = Signal::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(forward(&model, &spec, &x), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_input_maps_to_zero_output() {
        let spec = path_spectrum();
        for act in [Activation::Relu, Activation::Abs, Activation::Tanh] {
            let model = single_filter_model(vec![0.4, 0.1], 3, act);
            let x = Signal::from_vector(DVector::zeros(2)).unwrap();
            let y = forward(&model, &spec, &x).unwrap();
            assert_eq!(y.norm(), 0.0);
        }
    }

    #[test]
    fn identity_activation_composes_filters() {
        let op = SymmetricOperator::new(
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]),
            0.0,
        )
        .unwrap();
        let spec = eigendecompose(&op, EigCount::All).unwrap();
        let f1 = FilterSpec::polynomial(vec![0.2, 0.3]).unwrap();
        let f2 = FilterSpec::polynomial(vec![-0.1, 0.0, 0.05]).unwrap();
        let model = MnnModel::new(
            vec![
                MnnLayer { filters: vec![vec![f1.clone()]] },
                MnnLayer { filters: vec![vec![f2.clone()]] },
            ],
            Activation::Identity,
            vec![1, 1, 1],
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.5, -0.25, 1.0]);
        let y = forward(&model, &spec, &Signal::from_vector(x.clone()).unwrap()).unwrap();

        let direct = crate::filters::apply_filter(
            &f2,
            &spec,
            &crate::filters::apply_filter(&f1, &spec, &x).unwrap(),
        )
        .unwrap();
        let diff = (DVector::from_column_slice(y.values().as_slice()) - direct).norm();
        assert!(diff <= 1e-9);
    }

    #[test]
    fn model_json_round_trip() {
        let f = FilterSpec::polynomial(vec![0.1, 0.2]).unwrap();
        let model = MnnModel::new(
            vec![MnnLayer {
                filters: vec![vec![f.clone()], vec![f.clone()]],
            }],
            Activation::Abs,
            vec![1, 2],
        )
        .unwrap();
        let back = MnnModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back.feature_widths(), model.feature_widths());
        assert_eq!(back.activation(), model.activation());
        assert_eq!(back.layers()[0].filters.len(), 2);
    }

    proptest::proptest! {
        #[test]
        fn activations_are_normalized_lipschitz(
            a in -50.0f64..50.0,
            b in -50.0f64..50.0,
        ) {
            for act in [Activation::Relu, Activation::Abs, Activation::Tanh, Activation::Identity] {
                let lhs = (act.eval(a) - act.eval(b)).abs();
                proptest::prop_assert!(lhs <= (a - b).abs() + 1e-12);
            }
        }
    }
}
