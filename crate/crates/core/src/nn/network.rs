use crate::error::{Error, Result};
use crate::nn::layer::{Activation, BatchNorm1d, Conv2d, Dense, Layer, LayerCache, Mode, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ordered stack of layers with a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    input_shape: Vec<usize>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// One gradient tensor per parameter tensor, in `Network::params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(i, &shape)?;
        }
        Ok(Self {
            input_shape,
            output_shape: shape,
            layers,
        })
    }

    /// A network with no layers: forward is the identity.
    pub fn identity(input_shape: Vec<usize>) -> Self {
        Self {
            output_shape: input_shape.clone(),
            input_shape,
            layers: Vec::new(),
        }
    }

    pub fn builder(input_shape: &[usize]) -> NetworkBuilder {
        NetworkBuilder {
            input_shape: input_shape.to_vec(),
            shape: input_shape.to_vec(),
            layers: Vec::new(),
            error: None,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Owning layer index of each tensor in `params()`.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.params().len()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn clone_params(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Shape(format!(
                "network has {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.all_finite())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::LayerShape {
                layer: 0,
                detail: format!(
                    "network input is (batch, {:?}), got {:?}",
                    self.input_shape,
                    x.shape()
                ),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer.forward(i, &h, mode)?;
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                mode,
                input_shape: self.input_shape.clone(),
                layers: caches,
            },
        ))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &Tensor,
    ) -> Result<(GradientSet, Tensor)> {
        if cache.layers.len() != self.layers.len() || cache.input_shape != self.input_shape {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers for input {:?}, network has {} for {:?}",
                cache.layers.len(),
                cache.input_shape,
                self.layers.len(),
                self.input_shape
            )));
        }
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let (pg, dx) = layer.backward(i, lc, &g)?;
            per_layer.push(pg);
            g = dx;
        }
        per_layer.reverse();
        Ok((
            GradientSet {
                tensors: per_layer.into_iter().flatten().collect(),
            },
            g,
        ))
    }

    /// Commit the batch statistics of a train-mode forward pass to the
    /// BatchNorm running estimates.
    pub fn apply_batch_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            layer.update_running_stats(lc);
        }
    }
}

/// Incremental construction that tracks the running per-sample shape.
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    shape: Vec<usize>,
    layers: Vec<Layer>,
    error: Option<Error>,
}

impl NetworkBuilder {
    fn push(mut self, layer: Layer) -> Self {
        if self.error.is_none() {
            match layer.output_shape(self.layers.len(), &self.shape) {
                Ok(s) => {
                    self.shape = s;
                    self.layers.push(layer);
                }
                Err(e) => self.error = Some(e),
            }
        }
        self
    }

    pub fn dense(self, out_units: usize, rng: &mut Rng) -> Self {
        let in_units = self.shape.iter().product();
        self.push(Layer::Dense(Dense::init(in_units, out_units, rng)))
    }

    pub fn conv2d(
        self,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Self {
        let in_channels = self.shape.first().copied().unwrap_or(0);
        self.push(Layer::Conv2d(Conv2d::init(
            in_channels,
            out_channels,
            kernel,
            padding,
            rng,
        )))
    }

    pub fn batchnorm(self) -> Self {
        let f = self.shape.iter().product();
        self.push(Layer::BatchNorm1d(BatchNorm1d::new(f)))
    }

    pub fn activation(self, a: Activation) -> Self {
        self.push(Layer::Activation(a))
    }

    pub fn layer(self, layer: Layer) -> Self {
        self.push(layer)
    }

    pub fn build(self) -> Result<Network> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Network::new(self.input_shape, self.layers)
    }
}
