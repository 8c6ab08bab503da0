//! Layer menu and network layout.

use serde::{Deserialize, Serialize};

use crate::error::NnError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        size: usize,
    },
    /// Mean over the spatial dimensions, `[c, h, w]` to `[c]`.
    GlobalAvgPool,
    /// Fully connected; flattens whatever shape it receives.
    Dense {
        units: usize,
    },
    Relu,
    /// Normalizes a 1-D activation.
    Softmax,
}

impl LayerSpec {
    pub fn conv(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn max_pool(size: usize) -> Self {
        LayerSpec::MaxPool { size }
    }

    /// Output shape for a single (unbatched) input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *self {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let [_, h, w] = three_d(input, "conv")?;
                if channels == 0 || kernel == 0 || stride == 0 {
                    return Err(NnError::InvalidSpec("conv sizes must be positive".into()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(NnError::InvalidSpec(format!(
                        "conv kernel {kernel} larger than padded input {input:?}"
                    )));
                }
                Ok(vec![
                    channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool { size } => {
                let [c, h, w] = three_d(input, "max_pool")?;
                if size == 0 || h < size || w < size {
                    return Err(NnError::InvalidSpec(format!(
                        "pool size {size} does not fit input {input:?}"
                    )));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::GlobalAvgPool => {
                let [c, _, _] = three_d(input, "global_avg_pool")?;
                Ok(vec![c])
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(NnError::InvalidSpec("dense units must be positive".into()));
                }
                Ok(vec![units])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(NnError::InvalidSpec(format!(
                        "softmax expects a flat input, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// (weight, bias) element counts.
    pub fn param_counts(&self, input: &[usize]) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                channels, kernel, ..
            } => (channels * input[0] * kernel * kernel, channels),
            LayerSpec::Dense { units } => (units * input.iter().product::<usize>(), units),
            _ => (0, 0),
        }
    }
}

fn three_d(input: &[usize], what: &str) -> Result<[usize; 3], NnError> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(NnError::InvalidSpec(format!(
            "{what} expects a [channels, height, width] input, got {input:?}"
        ))),
    }
}

/// A shared trunk followed by one or more heads. Every head reads the trunk
/// output; a single-output network has exactly one head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub trunk: Vec<LayerSpec>,
    pub heads: Vec<Vec<LayerSpec>>,
}

impl NetworkSpec {
    pub fn single(input: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            input,
            trunk: layers,
            heads: vec![Vec::new()],
        }
    }

    /// Output shape of each head, validating every layer on the way.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "bad input shape {:?}",
                self.input
            )));
        }
        if self.heads.is_empty() {
            return Err(NnError::InvalidSpec("at least one head required".into()));
        }
        let mut shape = self.input.clone();
        for layer in &self.trunk {
            shape = layer.output_shape(&shape)?;
        }
        self.heads
            .iter()
            .map(|head| {
                let mut s = shape.clone();
                for layer in head {
                    s = layer.output_shape(&s)?;
                }
                Ok(s)
            })
            .collect()
    }
}
