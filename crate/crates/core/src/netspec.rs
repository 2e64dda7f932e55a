//! Network architecture descriptions.
//!
//! A [`NetworkSpec`] is read two ways: the [`kernels`](crate::kernels) module
//! folds it into the analytic NNGP/NTK recursion, and the
//! [`ensemble`](crate::ensemble) module instantiates it as a finite-width
//! network in the NTK parametrization. Both consumers rely on
//! [`NetworkSpec::validate`] having accepted the spec.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Erf,
}

impl Activation {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Erf => statrs::function::erf::erf(u),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-u * u).exp(),
        }
    }
}

/// One layer of a network.
///
/// `Dense`, `Conv`, `LocalAggregation` and `GlobalAggregation` carry weights;
/// the aggregation layers mix channels with a square weight matrix after
/// summing over the neighborhood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense(usize),
    Conv { extent: Vec<usize>, channels: usize },
    Nonlinearity(Activation),
    Flatten,
    LocalAggregation(Vec<Vec<usize>>),
    GlobalAggregation,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        !matches!(self, LayerSpec::Nonlinearity(_) | LayerSpec::Flatten)
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Nonlinearity(_) => "nonlinearity",
            LayerSpec::Flatten => "flatten",
            LayerSpec::LocalAggregation(_) => "local_aggregation",
            LayerSpec::GlobalAggregation => "global_aggregation",
        }
    }
}

/// Tensor shape of a single sample: spatial extents (possibly none) and a
/// channel count. Storage is position-major: feature `a * channels + c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    #[serde(default)]
    pub spatial: Vec<usize>,
    pub channels: usize,
}

impl Shape {
    pub fn flat(channels: usize) -> Self {
        Shape { spatial: Vec::new(), channels }
    }

    pub fn grid(spatial: Vec<usize>, channels: usize) -> Self {
        Shape { spatial, channels }
    }

    /// Number of spatial positions (1 for flat shapes).
    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn len(&self) -> usize {
        self.positions() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_flat(&self) -> bool {
        self.spatial.is_empty()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.spatial.is_empty() {
            write!(f, "({})", self.channels)
        } else {
            let dims: Vec<String> = self.spatial.iter().map(|d| d.to_string()).collect();
            write!(f, "({}; {})", dims.join("x"), self.channels)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("network has no layers")]
    Empty,
    #[error("network has no parameterized layer")]
    NoParameters,
    #[error("input shape has a zero extent")]
    DegenerateInput,
    #[error("layer {layer} (conv): even filter support {extent:?}; every extent must be odd")]
    EvenFilterSupport { layer: usize, extent: Vec<usize> },
    #[error("layer {layer} ({kind}): {reason}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("layer {layer} (local_aggregation): node {node} lists neighbor {index}, but only {nodes} nodes exist")]
    DanglingAggregationIndex {
        layer: usize,
        node: usize,
        index: usize,
        nodes: usize,
    },
    #[error("network output {found} does not match label shape {expected}")]
    LabelShape { expected: Shape, found: Shape },
}

/// Ordered layer list over a declared input shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { input, layers }
    }

    /// `[Dense width, act, Dense width, act, ..., Dense outputs]` on a flat input.
    pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, act: Activation) -> Self {
        let mut layers = Vec::with_capacity(2 * hidden.len() + 1);
        for &w in hidden {
            layers.push(LayerSpec::Dense(w));
            layers.push(LayerSpec::Nonlinearity(act));
        }
        layers.push(LayerSpec::Dense(outputs));
        NetworkSpec::new(Shape::flat(inputs), layers)
    }

    /// Number of parameterized layers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.is_parameterized()).count()
    }

    /// Copy of the spec with every hidden `Dense`/`Conv` width replaced by
    /// `width`. The last width-bearing layer keeps its output size.
    pub fn with_hidden_width(&self, width: usize) -> Self {
        let last = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense(_) | LayerSpec::Conv { .. }));
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Dense(_) if Some(i) != last => LayerSpec::Dense(width),
                LayerSpec::Conv { extent, .. } if Some(i) != last => LayerSpec::Conv {
                    extent: extent.clone(),
                    channels: width,
                },
                other => other.clone(),
            })
            .collect();
        NetworkSpec::new(self.input.clone(), layers)
    }

    /// Output shape after every layer, or the first offending layer.
    pub fn validate(&self) -> Result<Vec<Shape>, SpecError> {
        if self.input.channels == 0 || self.input.spatial.contains(&0) {
            return Err(SpecError::DegenerateInput);
        }
        if self.layers.is_empty() {
            return Err(SpecError::Empty);
        }
        if self.depth() == 0 {
            return Err(SpecError::NoParameters);
        }
        let mut shape = self.input.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut flattened = false;
        for (layer, spec) in self.layers.iter().enumerate() {
            let mismatch = |reason: String| SpecError::ShapeMismatch {
                layer,
                kind: spec.name(),
                reason,
            };
            shape = match spec {
                LayerSpec::Dense(width) => {
                    if !shape.is_flat() {
                        return Err(mismatch(format!(
                            "dense layer needs a flat input, got {shape}; insert a flatten layer"
                        )));
                    }
                    if *width == 0 {
                        return Err(mismatch("zero width".into()));
                    }
                    Shape::flat(*width)
                }
                LayerSpec::Conv { extent, channels } => {
                    if shape.is_flat() {
                        return Err(mismatch(format!("conv needs spatial axes, got {shape}")));
                    }
                    if extent.len() != shape.spatial.len() {
                        return Err(mismatch(format!(
                            "filter has {} axes but input has {}",
                            extent.len(),
                            shape.spatial.len()
                        )));
                    }
                    if extent.iter().any(|e| e % 2 == 0) {
                        return Err(SpecError::EvenFilterSupport {
                            layer,
                            extent: extent.clone(),
                        });
                    }
                    if extent.iter().zip(&shape.spatial).any(|(e, s)| e > s) {
                        return Err(mismatch(format!(
                            "filter {extent:?} exceeds spatial size {:?}",
                            shape.spatial
                        )));
                    }
                    if *channels == 0 {
                        return Err(mismatch("zero channels".into()));
                    }
                    Shape::grid(shape.spatial.clone(), *channels)
                }
                LayerSpec::Nonlinearity(_) => shape,
                LayerSpec::Flatten => {
                    if shape.is_flat() {
                        return Err(mismatch("input is already flat".into()));
                    }
                    if flattened {
                        return Err(mismatch("flatten appears more than once".into()));
                    }
                    if !matches!(self.layers.get(layer + 1), Some(LayerSpec::Dense(_))) {
                        return Err(mismatch("flatten must be followed by a dense layer".into()));
                    }
                    flattened = true;
                    Shape::flat(shape.len())
                }
                LayerSpec::LocalAggregation(neighborhoods) => {
                    if shape.spatial.len() != 1 {
                        return Err(mismatch(format!(
                            "aggregation needs a single node axis, got {shape}"
                        )));
                    }
                    let nodes = shape.spatial[0];
                    if neighborhoods.len() != nodes {
                        return Err(mismatch(format!(
                            "{} neighborhoods for {nodes} nodes",
                            neighborhoods.len()
                        )));
                    }
                    for (node, nbrs) in neighborhoods.iter().enumerate() {
                        if let Some(&index) = nbrs.iter().find(|&&j| j >= nodes) {
                            return Err(SpecError::DanglingAggregationIndex {
                                layer,
                                node,
                                index,
                                nodes,
                            });
                        }
                    }
                    shape
                }
                LayerSpec::GlobalAggregation => {
                    if shape.spatial.len() != 1 {
                        return Err(mismatch(format!(
                            "aggregation needs a single node axis, got {shape}"
                        )));
                    }
                    shape
                }
            };
            trace.push(shape.clone());
        }
        Ok(trace)
    }

    /// Output shape of an accepted spec.
    pub fn output_shape(&self) -> Result<Shape, SpecError> {
        Ok(self.validate()?.pop().expect("validate rejects empty specs"))
    }

    /// [`validate`](Self::validate) plus a check against the task's label shape.
    pub fn validate_for_labels(&self, labels: &Shape) -> Result<Vec<Shape>, SpecError> {
        let trace = self.validate()?;
        let found = trace.last().expect("non-empty trace");
        if found != labels {
            return Err(SpecError::LabelShape {
                expected: labels.clone(),
                found: found.clone(),
            });
        }
        Ok(trace)
    }
}
