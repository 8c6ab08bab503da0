//! A network is a trunk plus heads over one flat parameter buffer, so the
//! trunk weights have exactly one storage no matter how many heads read them.

use rand::Rng;

use crate::error::NnError;
use crate::layers::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::spec::{LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
}

impl Layer {
    fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn conv_geom(&self) -> ConvGeom {
        match self.spec {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                ..
            } => ConvGeom {
                in_c: self.in_shape[0],
                in_h: self.in_shape[1],
                in_w: self.in_shape[2],
                out_c: self.out_shape[0],
                out_h: self.out_shape[1],
                out_w: self.out_shape[2],
                kernel,
                stride,
                padding,
            },
            _ => unreachable!("conv_geom on a non-conv layer"),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    input: Vec<T>,
    /// Max-pool argmax indices or softmax outputs, depending on the layer.
    pool_arg: Vec<usize>,
    output: Vec<T>,
}

#[derive(Clone, Debug)]
struct Cache<T> {
    batch: usize,
    trunk: Vec<LayerCache<T>>,
    heads: Vec<Vec<LayerCache<T>>>,
}

/// Gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Aligned with [`Network::params`].
    pub params: Vec<T>,
    pub input: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    params: Vec<T>,
    cache: Option<Cache<T>>,
}

fn build_layers(specs: &[LayerSpec], mut shape: Vec<usize>, offset: &mut usize) -> Result<(Vec<Layer>, Vec<usize>), NnError> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let next = spec.output_shape(&shape)?;
        let (w_len, b_len) = spec.param_counts(&shape);
        let layer = Layer {
            spec: spec.clone(),
            in_shape: shape,
            out_shape: next.clone(),
            w_off: *offset,
            w_len,
            b_off: *offset + w_len,
            b_len,
        };
        *offset += w_len + b_len;
        out.push(layer);
        shape = next;
    }
    Ok((out, shape))
}

impl<T: Scalar> Network<T> {
    /// Builds the network with zeroed parameters.
    pub fn zeroed(spec: NetworkSpec) -> Result<Self, NnError> {
        spec.output_shapes()?;
        let mut offset = 0;
        let (trunk, trunk_out) = build_layers(&spec.trunk, spec.input.clone(), &mut offset)?;
        let heads = spec
            .heads
            .iter()
            .map(|h| build_layers(h, trunk_out.clone(), &mut offset).map(|(l, _)| l))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Network {
            spec,
            trunk,
            heads,
            params: vec![T::zero(); offset],
            cache: None,
        })
    }

    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeroed(spec)?;
        let layers: Vec<Layer> = net
            .trunk
            .iter()
            .chain(net.heads.iter().flatten())
            .cloned()
            .collect();
        for layer in layers {
            if layer.w_len == 0 {
                continue;
            }
            let fan_in = layer.w_len / layer.b_len.max(1);
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in &mut net.params[layer.w_off..layer.w_off + layer.w_len] {
                *w = T::from_f64(rng.random_range(-limit..limit));
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Parameter mutation invalidates any cached forward pass.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.cache = None;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.params.len()],
                got: vec![params.len()],
            });
        }
        self.params.copy_from_slice(params);
        self.cache = None;
        Ok(())
    }

    /// Parameter index range of the trunk (shared by every head).
    pub fn trunk_param_range(&self) -> std::ops::Range<usize> {
        let end = self
            .trunk
            .last()
            .map(|l| l.b_off + l.b_len)
            .unwrap_or(0);
        0..end
    }

    pub fn head_param_range(&self, head: usize) -> std::ops::Range<usize> {
        let layers = &self.heads[head];
        let start = layers
            .iter()
            .find(|l| l.w_len + l.b_len > 0)
            .map(|l| l.w_off);
        let end = layers
            .iter()
            .rev()
            .find(|l| l.w_len + l.b_len > 0)
            .map(|l| l.b_off + l.b_len);
        match (start, end) {
            (Some(s), Some(e)) => s..e,
            _ => 0..0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            cache: None,
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize, NnError> {
        let s = input.shape();
        if s.len() != self.spec.input.len() + 1 || s[1..] != self.spec.input[..] || s[0] == 0 {
            let mut expected = vec![s.first().copied().unwrap_or(1).max(1)];
            expected.extend(&self.spec.input);
            return Err(NnError::ShapeMismatch {
                expected,
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn layer_forward(&self, layer: &Layer, x: Vec<T>, batch: usize, keep: bool) -> (Vec<T>, Option<LayerCache<T>>) {
        let p = &self.params;
        let mut pool_arg = Vec::new();
        let y = match layer.spec {
            LayerSpec::Conv { .. } => layers::conv_forward(
                &x,
                batch,
                &layer.conv_geom(),
                &p[layer.w_off..layer.w_off + layer.w_len],
                &p[layer.b_off..layer.b_off + layer.b_len],
            ),
            LayerSpec::Dense { units } => layers::dense_forward(
                &x,
                batch,
                layer.in_len(),
                units,
                &p[layer.w_off..layer.w_off + layer.w_len],
                &p[layer.b_off..layer.b_off + layer.b_len],
            ),
            LayerSpec::Relu => layers::relu_forward(&x),
            LayerSpec::MaxPool { size } => {
                let shape = [layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]];
                let (y, arg) = layers::max_pool_forward(&x, batch, shape, size);
                pool_arg = arg;
                y
            }
            LayerSpec::GlobalAvgPool => layers::global_avg_pool_forward(&x, layer.in_shape[1] * layer.in_shape[2]),
            LayerSpec::Softmax => layers::softmax_rows(&x, layer.out_len()),
        };
        debug_assert!(y.iter().all(|v| v.is_finite()), "non-finite activation");
        let cache = keep.then(|| LayerCache {
            input: x,
            pool_arg,
            output: if matches!(layer.spec, LayerSpec::Softmax) { y.clone() } else { Vec::new() },
        });
        (y, cache)
    }

    fn run(&self, input: &Tensor<T>, keep: bool) -> Result<(Vec<Tensor<T>>, Option<Cache<T>>), NnError> {
        let batch = self.check_input(input)?;
        let mut x = input.data().to_vec();
        let mut trunk_cache = Vec::new();
        for layer in &self.trunk {
            let (y, c) = self.layer_forward(layer, x, batch, keep);
            trunk_cache.extend(c);
            x = y;
        }
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut head_caches = Vec::with_capacity(self.heads.len());
        for (head, layers) in self.heads.iter().enumerate() {
            let mut h = x.clone();
            let mut hc = Vec::new();
            for layer in layers {
                let (y, c) = self.layer_forward(layer, h, batch, keep);
                hc.extend(c);
                h = y;
            }
            let mut shape = vec![batch];
            shape.extend(self.head_output_shape(head));
            outputs.push(Tensor::new(shape, h)?);
            head_caches.push(hc);
        }
        let cache = keep.then_some(Cache {
            batch,
            trunk: trunk_cache,
            heads: head_caches,
        });
        Ok((outputs, cache))
    }

    fn trunk_output_shape(&self) -> Vec<usize> {
        self.trunk
            .last()
            .map(|l| l.out_shape.clone())
            .unwrap_or_else(|| self.spec.input.clone())
    }

    fn head_output_shape(&self, head: usize) -> Vec<usize> {
        self.heads[head]
            .last()
            .map(|l| l.out_shape.clone())
            .unwrap_or_else(|| self.trunk_output_shape())
    }

    /// Pure inference; one output tensor per head.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnError> {
        self.run(input, false).map(|(o, _)| o)
    }

    /// Like [`predict`](Self::predict) but caches activations for [`backward`](Self::backward).
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnError> {
        let (out, cache) = self.run(input, true)?;
        self.cache = cache;
        Ok(out)
    }

    fn layer_backward(&self, layer: &Layer, cache: &LayerCache<T>, dy: Vec<T>, batch: usize, grads: &mut [T]) -> Vec<T> {
        let p = &self.params;
        match layer.spec {
            LayerSpec::Conv { .. } => {
                let (dw, db) = grads[layer.w_off..layer.b_off + layer.b_len].split_at_mut(layer.w_len);
                layers::conv_backward(
                    &cache.input,
                    &dy,
                    batch,
                    &layer.conv_geom(),
                    &p[layer.w_off..layer.w_off + layer.w_len],
                    dw,
                    db,
                )
            }
            LayerSpec::Dense { units } => {
                let (dw, db) = grads[layer.w_off..layer.b_off + layer.b_len].split_at_mut(layer.w_len);
                layers::dense_backward(
                    &cache.input,
                    &dy,
                    batch,
                    layer.in_len(),
                    units,
                    &p[layer.w_off..layer.w_off + layer.w_len],
                    dw,
                    db,
                )
            }
            LayerSpec::Relu => layers::relu_backward(&cache.input, &dy),
            LayerSpec::MaxPool { .. } => {
                layers::max_pool_backward(&dy, &cache.pool_arg, batch * layer.in_len())
            }
            LayerSpec::GlobalAvgPool => layers::global_avg_pool_backward(&dy, layer.in_shape[1] * layer.in_shape[2]),
            LayerSpec::Softmax => layers::softmax_backward(&cache.output, &dy, layer.out_len()),
        }
    }

    /// Backpropagates per-head output gradients (`None` = zero gradient for
    /// that head). Consumes the cached forward pass.
    pub fn backward(&mut self, head_grads: &[Option<Tensor<T>>]) -> Result<Gradients<T>, NnError> {
        if head_grads.len() != self.heads.len() {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.heads.len()],
                got: vec![head_grads.len()],
            });
        }
        let cache = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let batch = cache.batch;
        let mut grads = vec![T::zero(); self.params.len()];
        let trunk_len = batch * self.trunk_output_shape().iter().product::<usize>();
        let mut d_trunk = vec![T::zero(); trunk_len];
        for (head, dy) in head_grads.iter().enumerate() {
            let Some(dy) = dy else { continue };
            let mut expected = vec![batch];
            expected.extend(self.head_output_shape(head));
            if dy.shape() != expected.as_slice() {
                return Err(NnError::ShapeMismatch {
                    expected,
                    got: dy.shape().to_vec(),
                });
            }
            let mut g = dy.data().to_vec();
            for (layer, lc) in self.heads[head].iter().zip(&cache.heads[head]).rev() {
                g = self.layer_backward(layer, lc, g, batch, &mut grads);
            }
            for (a, b) in d_trunk.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        let mut g = d_trunk;
        for (layer, lc) in self.trunk.iter().zip(&cache.trunk).rev() {
            g = self.layer_backward(layer, lc, g, batch, &mut grads);
        }
        let mut shape = vec![batch];
        shape.extend(&self.spec.input);
        Ok(Gradients {
            params: grads,
            input: Tensor::new(shape, g)?,
        })
    }
}
