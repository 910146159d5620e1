use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{build_layer, Layer, LayerSpec, Param};
use super::tensor::Tensor;
use crate::container::{ArtifactKind, Container, StoredTensor};
use crate::error::{Error, Result};

/// A sequential stack of layers with per-layer shapes checked at build time.
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Box<dyn Layer>>,
    shapes: Vec<Vec<usize>>,
    seed: u64,
    /// Number of leading layers run by the last caching forward pass.
    cached_depth: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    seed: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.clone_box()).collect(),
            shapes: self.shapes.clone(),
            seed: self.seed,
            cached_depth: self.cached_depth,
        }
    }
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("input_shape", &self.input_shape)
            .field("layers", &self.specs())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl Network {
    /// Builds the stack and initializes weights from `seed`. `input_shape`
    /// excludes the batch dimension.
    pub fn new(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut shape = input_shape.clone();
        for (i, spec) in specs.iter().enumerate() {
            let layer = build_layer(spec, &mut rng)?;
            shape = layer.output_shape(&shape).map_err(|e| Error::Shape(format!("layer {i} ({spec:?}): {e}")))?;
            if shape.contains(&0) {
                return Err(Error::Shape(format!("layer {i} produces an empty output {shape:?}")));
            }
            layers.push(layer);
            shapes.push(shape.clone());
        }
        Ok(Self { input_shape, layers, shapes, seed, cached_depth: None })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    /// Per-example output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn needs_conditioning(&self) -> bool {
        self.layers.iter().any(|l| l.uses_conditioning())
    }

    fn check_input(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!("network expects [batch, {:?}], got {:?}", self.input_shape, x.shape())));
        }
        if cond.is_some() && !self.needs_conditioning() {
            return Err(Error::Shape("conditioning given to a network without a FiLM layer".into()));
        }
        Ok(())
    }

    /// Training-mode forward through every layer, caching activations.
    pub fn forward(&mut self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.forward_to(x, cond, self.layers.len())
    }

    /// Training-mode forward through the first `depth` layers.
    pub fn forward_to(&mut self, x: &Tensor, cond: Option<&Tensor>, depth: usize) -> Result<Tensor> {
        self.check_input(x, cond)?;
        let depth = depth.min(self.layers.len());
        self.cached_depth = None;
        let mut h = x.clone();
        for layer in &mut self.layers[..depth] {
            h = layer.forward(&h, cond, true)?;
        }
        self.cached_depth = Some(depth);
        Ok(h)
    }

    /// Inference-mode forward; leaves the model untouched.
    pub fn infer(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.infer_to(x, cond, self.layers.len())
    }

    pub fn infer_to(&self, x: &Tensor, cond: Option<&Tensor>, depth: usize) -> Result<Tensor> {
        self.check_input(x, cond)?;
        let mut h = x.clone();
        for layer in &self.layers[..depth.min(self.layers.len())] {
            h = layer.infer(&h, cond)?;
        }
        Ok(h)
    }

    /// Back-propagates `grad` from the output of the last forward pass,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let depth = self.cached_depth.ok_or(Error::NoCache)?;
        let mut g = grad.clone();
        for layer in self.layers[..depth].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameters of layer `i` only.
    pub fn layer_params(&self, i: usize) -> Vec<&Param> {
        self.layers[i].params()
    }

    pub fn layer_params_mut(&mut self, i: usize) -> Vec<&mut Param> {
        self.layers[i].params_mut()
    }

    /// Trainable parameters plus batch-norm running statistics, matching the
    /// usual "total params" figure.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.params().iter().map(|p| p.len()).sum::<usize>() + l.buffers().iter().map(|b| b.len()).sum::<usize>()
            })
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
        self.cached_depth = None;
    }

    pub fn to_container(&self, fingerprint: u64) -> Result<Container> {
        let meta = Meta { input_shape: self.input_shape.clone(), layers: self.specs(), seed: self.seed };
        let mut c = Container::new(ArtifactKind::Checkpoint, fingerprint);
        c.meta =
            serde_json::to_string(&meta).map_err(|e| Error::InvalidInput(format!("cannot encode layer specs: {e}")))?;
        for layer in &self.layers {
            for p in layer.params() {
                c.tensors.push(StoredTensor::f64(p.shape.clone(), p.value.clone()));
            }
            for b in layer.buffers() {
                c.tensors.push(StoredTensor::f64(vec![b.len()], b.clone()));
            }
        }
        Ok(c)
    }

    /// Rebuilds a network from a checkpoint written by `to_container`.
    pub fn from_container(c: &Container, fingerprint: u64) -> Result<Self> {
        c.expect(ArtifactKind::Checkpoint, fingerprint)?;
        let meta: Meta =
            serde_json::from_str(&c.meta).map_err(|e| Error::CorruptFile(format!("checkpoint metadata: {e}")))?;
        let mut net = Self::new(meta.input_shape, &meta.layers, meta.seed)?;
        let mut stored = c.tensors.iter();
        let mut next = |len: usize| -> Result<Vec<f64>> {
            let t = stored.next().ok_or_else(|| Error::CorruptFile("checkpoint is missing tensors".into()))?;
            if t.data.len() != len {
                return Err(Error::CorruptFile(format!(
                    "checkpoint tensor has {} values, layer needs {len}",
                    t.data.len()
                )));
            }
            Ok(t.data.clone())
        };
        for layer in &mut net.layers {
            for p in layer.params_mut() {
                p.value = next(p.len())?;
            }
            for b in layer.buffers_mut() {
                *b = next(b.len())?;
            }
        }
        if stored.next().is_some() {
            return Err(Error::CorruptFile("checkpoint has extra tensors".into()));
        }
        Ok(net)
    }
}
