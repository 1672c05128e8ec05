//! Small convolutional center-point detector with heatmap, offset and size heads.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Foreground prior used to initialise the heatmap-head bias.
pub const HEATMAP_PRIOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidDescriptor(String),
    #[error("input {height}×{width} is not divisible by the output stride {stride}")]
    IndivisibleInput { height: usize, width: usize, stride: usize },
    #[error("expected a 3-channel N×C×H×W image batch, got {0:?}")]
    InputShape(Vec<usize>),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Widths and depth of the backbone and heads.
///
/// Each entry of `stage_channels` is a stride-2 stage; each entry of
/// `decoder_channels` is a nearest-neighbour 2× upsampling followed by a 3×3 conv.
/// The output stride is `2^(stages − decoder stages)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureDescriptor {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub residual_blocks: usize,
    pub decoder_channels: Vec<usize>,
    pub head_channels: usize,
}

impl Default for ArchitectureDescriptor {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stage_channels: vec![32, 64],
            residual_blocks: 2,
            decoder_channels: vec![],
            head_channels: 64,
        }
    }
}

impl ArchitectureDescriptor {
    pub fn validate(&self) -> Result<(), ModelError> {
        let zero = |name: &str| Err(ModelError::InvalidDescriptor(format!("{name} must be non-zero")));
        if self.in_channels == 0 {
            return zero("in_channels");
        }
        if self.stem_channels == 0 {
            return zero("stem_channels");
        }
        if self.head_channels == 0 {
            return zero("head_channels");
        }
        if self.stage_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return zero("every stage/decoder width");
        }
        if self.stage_channels.len() <= self.decoder_channels.len() {
            return Err(ModelError::InvalidDescriptor(format!(
                "need more downsampling stages ({}) than decoder stages ({}) for an output stride of at least 2",
                self.stage_channels.len(),
                self.decoder_channels.len()
            )));
        }
        Ok(())
    }

    /// Net number of stride-2 downsamplings.
    pub fn downsampling_stages(&self) -> usize {
        self.stage_channels.len().saturating_sub(self.decoder_channels.len())
    }

    /// Output stride R.
    pub fn output_stride(&self) -> usize {
        1 << self.downsampling_stages()
    }

    fn feature_channels(&self) -> usize {
        self.decoder_channels
            .last()
            .or(self.stage_channels.last())
            .copied()
            .unwrap_or(self.stem_channels)
    }

    /// Parameter layout in creation order: (path, shape).
    pub fn layout(&self, num_classes: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, c: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, c, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        conv("backbone.stem".into(), self.stem_channels, self.in_channels, 3);
        let mut c = self.stem_channels;
        for (i, &w) in self.stage_channels.iter().enumerate() {
            conv(format!("backbone.stage{i}"), w, c, 3);
            c = w;
        }
        for i in 0..self.residual_blocks {
            conv(format!("backbone.res{i}"), c, c, 3);
        }
        for (i, &w) in self.decoder_channels.iter().enumerate() {
            conv(format!("backbone.up{i}"), w, c, 3);
            c = w;
        }
        for (head, out_c) in [("heatmap", num_classes), ("offset", 2), ("size", 2)] {
            conv(format!("head.{head}.hidden"), self.head_channels, c, 3);
            conv(format!("head.{head}.out"), out_c, self.head_channels, 1);
        }
        out
    }
}

/// Named parameter tensors plus the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams<T> {
    pub arch: ArchitectureDescriptor,
    pub num_classes: usize,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameters recorded on a tape, by path.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, path: &str) -> Result<Var, ModelError> {
        self.vars.get(path).copied().ok_or_else(|| ModelError::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Head outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub heatmap_logits: Var,
    pub heatmap: Var,
    pub offset: Var,
    pub size: Var,
}

/// Heatmap-head outputs only (the path target-domain images take).
#[derive(Debug, Clone, Copy)]
pub struct HeatmapVars {
    pub logits: Var,
    pub heatmap: Var,
}

/// Materialised head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub heatmap_logits: Tensor<T>,
    pub heatmap: Tensor<T>,
    pub offset: Tensor<T>,
    pub size: Tensor<T>,
}

/// Builds a detector with He-normal weights, zero biases and a heatmap bias at the
/// logit of [`HEATMAP_PRIOR`].
pub fn build_model<T: Scalar>(arch: &ArchitectureDescriptor, num_classes: usize, seed: u64) -> Result<DetectorParams<T>, ModelError> {
    arch.validate()?;
    if num_classes == 0 {
        return Err(ModelError::InvalidDescriptor("num_classes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior_bias = -((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR).ln();
    let mut tensors = BTreeMap::new();
    for (path, shape) in arch.layout(num_classes) {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = if path.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        } else if path == "head.heatmap.out.bias" {
            vec![prior_bias; n]
        } else {
            vec![0.0; n]
        };
        let t = Tensor::from_f64(&shape, &values)?.with_requires_grad(true);
        tensors.insert(path, t);
    }
    Ok(DetectorParams {
        arch: arch.clone(),
        num_classes,
        tensors,
    })
}

impl<T: Scalar> DetectorParams<T> {
    pub fn output_stride(&self) -> usize {
        self.arch.output_stride()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect();
        BoundParams { vars }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.constant(t.clone()))).collect();
        BoundParams { vars }
    }

    pub fn cast<U: Scalar>(&self) -> DetectorParams<U> {
        DetectorParams {
            arch: self.arch.clone(),
            num_classes: self.num_classes,
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[1] != self.arch.in_channels {
            return Err(ModelError::InputShape(shape.to_vec()));
        }
        let stride = self.output_stride();
        if shape[2] % stride != 0 || shape[3] % stride != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(ModelError::IndivisibleInput {
                height: shape[2],
                width: shape[3],
                stride,
            });
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var, ModelError> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        let k = tape.shape(w)[2];
        Ok(tape.conv2d(x, w, b, stride, k / 2)?)
    }

    /// Shared feature extractor.
    pub fn forward_features(&self, tape: &mut Tape<T>, p: &BoundParams, images: Var) -> Result<Var, ModelError> {
        self.check_input(tape.shape(images))?;
        let x = self.conv(tape, p, "backbone.stem", images, 1)?;
        let mut x = tape.relu(x);
        for i in 0..self.arch.stage_channels.len() {
            let y = self.conv(tape, p, &format!("backbone.stage{i}"), x, 2)?;
            x = tape.relu(y);
        }
        for i in 0..self.arch.residual_blocks {
            let y = self.conv(tape, p, &format!("backbone.res{i}"), x, 1)?;
            let y = tape.relu(y);
            x = tape.add(x, y)?;
        }
        for i in 0..self.arch.decoder_channels.len() {
            let up = tape.upsample2x(x)?;
            let y = self.conv(tape, p, &format!("backbone.up{i}"), up, 1)?;
            x = tape.relu(y);
        }
        debug_assert_eq!(tape.shape(x)[1], self.arch.feature_channels());
        Ok(x)
    }

    fn head(&self, tape: &mut Tape<T>, p: &BoundParams, name: &str, features: Var) -> Result<Var, ModelError> {
        let h = self.conv(tape, p, &format!("head.{name}.hidden"), features, 1)?;
        let h = tape.relu(h);
        self.conv(tape, p, &format!("head.{name}.out"), h, 1)
    }

    pub fn heatmap_head(&self, tape: &mut Tape<T>, p: &BoundParams, features: Var) -> Result<HeatmapVars, ModelError> {
        let logits = self.head(tape, p, "heatmap", features)?;
        let heatmap = tape.sigmoid(logits);
        Ok(HeatmapVars { logits, heatmap })
    }

    /// Full forward pass: backbone plus all three heads.
    pub fn forward(&self, tape: &mut Tape<T>, p: &BoundParams, images: Var) -> Result<OutputVars, ModelError> {
        let features = self.forward_features(tape, p, images)?;
        let hm = self.heatmap_head(tape, p, features)?;
        let offset = self.head(tape, p, "offset", features)?;
        let size = self.head(tape, p, "size", features)?;
        Ok(OutputVars {
            heatmap_logits: hm.logits,
            heatmap: hm.heatmap,
            offset,
            size,
        })
    }

    /// Backbone and heatmap head only; offset and size heads are not evaluated.
    pub fn forward_heatmap(&self, tape: &mut Tape<T>, p: &BoundParams, images: Var) -> Result<HeatmapVars, ModelError> {
        let features = self.forward_features(tape, p, images)?;
        self.heatmap_head(tape, p, features)
    }

    /// Gradient-free forward pass returning owned tensors.
    pub fn predict(&self, images: &Tensor<T>) -> Result<ModelOutput<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(ModelOutput {
            heatmap_logits: tape.value(out.heatmap_logits),
            heatmap: tape.value(out.heatmap),
            offset: tape.value(out.offset),
            size: tape.value(out.size),
        })
    }

    /// Drops all stored gradients.
    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.clear_grad();
        }
    }

    /// Copies the gradients of a finished backward pass into the parameters.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) -> Result<(), ModelError> {
        for (path, t) in self.tensors.iter_mut() {
            let v = bound.get(path)?;
            if let Some(g) = tape.grad(v) {
                t.set_grad(g.to_vec())?;
            }
        }
        Ok(())
    }
}
