//! Layer descriptions and static shape inference.
//!
//! A [`Stack`] is an ordered list of named layers plus the per-sample input
//! dims it accepts. Tensors flowing through a stack always carry a leading
//! batch axis.

use crate::error::{Error, Result};

/// Conv kernels are 3x3, stride 1, zero "same" padding.
pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    /// Per-channel normalization over the batch and any spatial axes.
    BatchNorm { channels: usize },
    LeakyRelu { slope: f32 },
    Sigmoid,
    /// Per-sample target dims; element count must be preserved.
    Reshape { dims: Vec<usize> },
    /// Runs `body` and adds the block input to its output.
    Residual { body: Vec<Layer> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer {
            name: name.into(),
            kind,
        }
    }

    pub fn dense(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self::new(
            name,
            LayerKind::Dense {
                in_features,
                out_features,
            },
        )
    }

    pub fn conv2d(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            },
        )
    }

    pub fn batchnorm(name: impl Into<String>, channels: usize) -> Self {
        Self::new(name, LayerKind::BatchNorm { channels })
    }

    pub fn leaky_relu(name: impl Into<String>, slope: f32) -> Self {
        Self::new(name, LayerKind::LeakyRelu { slope })
    }

    pub fn sigmoid(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Sigmoid)
    }

    pub fn reshape(name: impl Into<String>, dims: &[usize]) -> Self {
        Self::new(
            name,
            LayerKind::Reshape {
                dims: dims.to_vec(),
            },
        )
    }

    pub fn residual(name: impl Into<String>, body: Vec<Layer>) -> Self {
        Self::new(name, LayerKind::Residual { body })
    }

    /// Per-sample output dims for per-sample input dims `input`.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Error::shape(&self.name, msg);
        match &self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                if *in_features == 0 || *out_features == 0 {
                    return Err(err("dense features must be positive".into()));
                }
                if input != [*in_features] {
                    return Err(err(format!(
                        "dense expects input [{in_features}], got {input:?}"
                    )));
                }
                Ok(vec![*out_features])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => {
                if *in_channels == 0 || *out_channels == 0 {
                    return Err(err("conv channels must be positive".into()));
                }
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(err(format!(
                        "conv2d expects input [{in_channels}, H, W], got {input:?}"
                    )));
                }
                Ok(vec![*out_channels, input[1], input[2]])
            }
            LayerKind::BatchNorm { channels } => {
                if *channels == 0 {
                    return Err(err("batchnorm channels must be positive".into()));
                }
                if input.first() != Some(channels) {
                    return Err(err(format!(
                        "batchnorm over {channels} channels got input {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerKind::LeakyRelu { slope } => {
                if !(slope.is_finite() && *slope >= 0.0) {
                    return Err(err(format!("leaky-relu slope {slope} out of range")));
                }
                Ok(input.to_vec())
            }
            LayerKind::Sigmoid => Ok(input.to_vec()),
            LayerKind::Reshape { dims } => {
                if dims.is_empty() || dims.contains(&0) {
                    return Err(err(format!("invalid reshape target {dims:?}")));
                }
                let from: usize = input.iter().product();
                let to: usize = dims.iter().product();
                if from != to {
                    return Err(err(format!("cannot reshape {input:?} into {dims:?}")));
                }
                Ok(dims.clone())
            }
            LayerKind::Residual { body } => {
                let out = chain_dims(body, input)?;
                if out != input {
                    return Err(err(format!(
                        "residual body maps {input:?} to {out:?}; skip needs equal dims"
                    )));
                }
                Ok(out)
            }
        }
    }

    /// (name, dims, trainable) of every tensor this layer owns, body included.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.collect_specs(&mut out);
        out
    }

    fn collect_specs(&self, out: &mut Vec<ParamSpec>) {
        let spec = |suffix: &str, dims: Vec<usize>, kind| ParamSpec {
            name: format!("{}.{suffix}", self.name),
            layer: self.name.clone(),
            dims,
            kind,
        };
        match &self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                out.push(spec("weight", vec![*out_features, *in_features], SpecKind::Weight));
                out.push(spec("bias", vec![*out_features], SpecKind::Bias));
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => {
                out.push(spec(
                    "weight",
                    vec![*out_channels, *in_channels, KERNEL, KERNEL],
                    SpecKind::Weight,
                ));
                out.push(spec("bias", vec![*out_channels], SpecKind::Bias));
            }
            LayerKind::BatchNorm { channels } => {
                out.push(spec("gamma", vec![*channels], SpecKind::Scale));
                out.push(spec("beta", vec![*channels], SpecKind::Bias));
                out.push(spec("running_mean", vec![*channels], SpecKind::RunningMean));
                out.push(spec("running_var", vec![*channels], SpecKind::RunningVar));
            }
            LayerKind::Residual { body } => {
                for l in body {
                    l.collect_specs(out);
                }
            }
            LayerKind::LeakyRelu { .. } | LayerKind::Sigmoid | LayerKind::Reshape { .. } => {}
        }
    }
}

/// Role of a parameter tensor; decides its initialization and whether it is
/// trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecKind {
    Weight,
    Bias,
    Scale,
    RunningMean,
    RunningVar,
}

impl SpecKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, SpecKind::RunningMean | SpecKind::RunningVar)
    }

    /// Recovers the role from a parameter name produced by [`Layer::param_specs`].
    pub fn from_name(name: &str) -> Option<SpecKind> {
        let suffix = name.rsplit('.').next()?;
        Some(match suffix {
            "weight" => SpecKind::Weight,
            "bias" | "beta" => SpecKind::Bias,
            "gamma" => SpecKind::Scale,
            "running_mean" => SpecKind::RunningMean,
            "running_var" => SpecKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub layer: String,
    pub dims: Vec<usize>,
    pub kind: SpecKind,
}

pub(crate) fn chain_dims(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>> {
    layers
        .iter()
        .try_fold(input.to_vec(), |dims, layer| layer.output_dims(&dims))
}

/// Validated layer sequence with a declared per-sample input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    layers: Vec<Layer>,
}

impl Stack {
    pub fn new(input_dims: &[usize], layers: Vec<Layer>) -> Result<Self> {
        if input_dims.is_empty() || input_dims.contains(&0) {
            return Err(Error::shape("input", format!("invalid input dims {input_dims:?}")));
        }
        let output_dims = chain_dims(&layers, input_dims)?;
        let stack = Stack {
            input_dims: input_dims.to_vec(),
            output_dims,
            layers,
        };
        let mut seen = std::collections::HashSet::new();
        for spec in stack.param_specs() {
            if !seen.insert(spec.name.clone()) {
                return Err(Error::shape(spec.layer, format!("duplicate parameter `{}`", spec.name)));
            }
        }
        Ok(stack)
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(|l| l.param_specs()).collect()
    }

    /// Concatenation `self` then `next`; `next` must accept `self`'s output.
    pub fn then(&self, next: &Stack) -> Result<Stack> {
        if next.input_dims != self.output_dims {
            return Err(Error::shape(
                "stack",
                format!(
                    "cannot chain output {:?} into input {:?}",
                    self.output_dims, next.input_dims
                ),
            ));
        }
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Stack::new(&self.input_dims, layers)
    }
}
