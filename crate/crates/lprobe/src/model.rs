//! Feed-forward classifiers with flat-vector weight access.
//!
//! A [`Model`] owns all weights as one flat `Vec<f64>` (`W`) plus an
//! immutable snapshot of the initialization (`W0`). Per-layer structure
//! exists only while building forward graphs; every weight-space measure
//! (sharpness, Frobenius distance) and every optimizer works on the flat
//! vector. Checkpoints serialize the spec header plus both vectors.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Bindings, ComputeGraph, GradientMap, GraphBuilder, GraphError, NodeId};
use crate::tensor::Tensor;

/// Magic string identifying the checkpoint format version.
pub const CHECKPOINT_MAGIC: &str = "LPROBE1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("weight vector length {got} does not match parameter count {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("batch width {got} does not match input_dim {expected}")]
    BatchWidth { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and initialization parameters of a classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden layer widths; empty means a pure linear model.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(ModelError::InvalidSpec(format!(
                "hidden_dims[{i}] must be positive"
            )));
        }
        Ok(())
    }

    /// Layer widths from input to output: `[input_dim, hidden..., num_classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    /// Analytic parameter count: sum of fan_in*fan_out + fan_out per layer.
    pub fn param_count(&self) -> usize {
        let dims = self.layer_dims();
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One per-layer tensor inside the flat weight vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSlice {
    /// Range of this tensor inside the flat vector.
    pub range: Range<usize>,
    /// `[fan_in, fan_out]` for matrices, `[fan_out]` for biases.
    pub shape: Vec<usize>,
    /// Leaf label used in graphs: `"W1"`, `"b1"`, `"W2"`, ...
    pub label: String,
}

/// Node ids of a graph built from a model, for binding values.
#[derive(Debug, Clone)]
pub struct GraphIds {
    /// The `[rows, input_dim]` input leaf.
    pub input: NodeId,
    /// The `[rows]` label leaf; present only in loss graphs.
    pub labels: Option<NodeId>,
    /// Weight leaves in flat-layout order (matrix, bias, matrix, bias, ...).
    pub weights: Vec<NodeId>,
}

/// A classifier: current flat weights `W` and the frozen init snapshot `W0`.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    w: Vec<f64>,
    w0: Vec<f64>,
}

/// Build a model with seeded scaled-uniform weights and zero biases.
///
/// Each weight matrix is drawn uniformly from `[-b, b]` with
/// `b = sqrt(6 / (fan_in + fan_out))`; the draw is deterministic in
/// `spec.init_seed`. The snapshot `W0` is taken immediately after.
pub fn init_model(spec: &ModelSpec) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut w = vec![0.0; spec.param_count()];
    let dims = spec.layer_dims();
    let mut offset = 0;
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for slot in &mut w[offset..offset + fan_in * fan_out] {
            *slot = rng.gen_range(-bound..=bound);
        }
        // Biases stay zero.
        offset += fan_in * fan_out + fan_out;
    }
    Ok(Model {
        spec: spec.clone(),
        w0: w.clone(),
        w,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Total number of parameters (weights + biases).
    pub fn param_count(&self) -> usize {
        self.w.len()
    }

    /// Current weights as a flat vector.
    pub fn get_flat_weights(&self) -> Vec<f64> {
        self.w.clone()
    }

    /// Borrow the current flat weights.
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// Borrow the immutable initialization snapshot.
    pub fn init_weights(&self) -> &[f64] {
        &self.w0
    }

    /// Replace the current weights. `W0` is untouched.
    pub fn set_flat_weights(&mut self, v: &[f64]) -> Result<(), ModelError> {
        if v.len() != self.w.len() {
            return Err(ModelError::WeightLength {
                expected: self.w.len(),
                got: v.len(),
            });
        }
        self.w.copy_from_slice(v);
        Ok(())
    }

    /// Per-layer tensor layout of the flat vector, in storage order.
    pub fn weight_slices(&self) -> Vec<WeightSlice> {
        let dims = self.spec.layer_dims();
        let mut out = Vec::with_capacity(2 * (dims.len() - 1));
        let mut offset = 0;
        for (layer, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            out.push(WeightSlice {
                range: offset..offset + fan_in * fan_out,
                shape: vec![fan_in, fan_out],
                label: format!("W{}", layer + 1),
            });
            offset += fan_in * fan_out;
            out.push(WeightSlice {
                range: offset..offset + fan_out,
                shape: vec![fan_out],
                label: format!("b{}", layer + 1),
            });
            offset += fan_out;
        }
        out
    }

    /// Create one leaf per weight tensor, in flat-layout order.
    pub fn weight_leaves(&self, g: &mut GraphBuilder) -> Vec<NodeId> {
        self.weight_slices()
            .iter()
            .map(|s| g.leaf(&s.shape, &s.label))
            .collect()
    }

    /// Append the forward pass (matmul + bias + relu per hidden layer) from
    /// `input` through the given weight leaves; returns the logits node.
    pub fn append_forward(&self, g: &mut GraphBuilder, input: NodeId, weights: &[NodeId]) -> NodeId {
        let mut x = input;
        let n_layers = weights.len() / 2;
        for layer in 0..n_layers {
            // Graph construction over validated shapes cannot fail here.
            let z = g.matmul(x, weights[2 * layer]).expect("shapes match");
            let z = g.add(z, weights[2 * layer + 1]).expect("shapes match");
            x = if layer + 1 < n_layers {
                g.relu(z).expect("shapes match")
            } else {
                z
            };
        }
        x
    }

    fn build_graph(&self, rows: usize, with_loss: bool) -> (ComputeGraph, GraphIds) {
        let mut g = GraphBuilder::new();
        let input = g.leaf(&[rows, self.spec.input_dim], "input");
        let weights = self.weight_leaves(&mut g);
        let x = self.append_forward(&mut g, input, &weights);
        let (output, labels) = if with_loss {
            let labels = g.leaf(&[rows], "labels");
            (g.cross_entropy(x, labels).expect("shapes match"), Some(labels))
        } else {
            (x, None)
        };
        let graph = g.build(output).expect("output exists");
        (
            graph,
            GraphIds {
                input,
                labels,
                weights,
            },
        )
    }

    /// Graph computing `[rows, num_classes]` logits from a `[rows, input_dim]`
    /// input leaf and per-layer weight leaves.
    pub fn logits_graph(&self, rows: usize) -> (ComputeGraph, GraphIds) {
        self.build_graph(rows, false)
    }

    /// Graph computing mean cross-entropy loss from input and label leaves.
    pub fn ce_loss_graph(&self, rows: usize) -> (ComputeGraph, GraphIds) {
        self.build_graph(rows, true)
    }

    /// Bind per-layer tensors sliced out of `flat` onto the weight leaves.
    pub fn bind_weights(&self, ids: &GraphIds, flat: &[f64], bindings: &mut Bindings) {
        for (slice, &leaf) in self.weight_slices().iter().zip(&ids.weights) {
            let t = Tensor::from_parts_unchecked(
                slice.shape.clone(),
                flat[slice.range.clone()].to_vec(),
            );
            bindings.insert(leaf, t);
        }
    }

    /// Flatten a per-leaf gradient map back into flat-vector order.
    pub fn flatten_gradient(&self, ids: &GraphIds, grads: &GradientMap) -> Vec<f64> {
        let mut flat = vec![0.0; self.w.len()];
        for (slice, leaf) in self.weight_slices().iter().zip(&ids.weights) {
            flat[slice.range.clone()].copy_from_slice(grads[leaf].data());
        }
        flat
    }

    /// Logits for a batch: `[rows, input_dim] -> [rows, num_classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let shape = batch.shape();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(ModelError::BatchWidth {
                expected: self.spec.input_dim,
                got: if shape.len() == 2 { shape[1] } else { 0 },
            });
        }
        let (graph, ids) = self.logits_graph(shape[0]);
        let mut bindings = Bindings::new();
        bindings.insert(ids.input, batch.clone());
        self.bind_weights(&ids, &self.w, &mut bindings);
        Ok(graph.evaluate(&bindings)?)
    }

    /// Write the checkpoint: header lines then `W` and `W0` as
    /// little-endian 64-bit floats.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let mut header = String::new();
        let _ = writeln!(header, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(header, "input_dim={}", self.spec.input_dim);
        let hidden: Vec<String> = self.spec.hidden_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(header, "hidden_dims={}", hidden.join(","));
        let _ = writeln!(header, "num_classes={}", self.spec.num_classes);
        let _ = writeln!(header, "activation=relu");
        let _ = writeln!(header, "init_seed={}", self.spec.init_seed);
        let mut bytes = header.into_bytes();
        bytes.reserve(16 * self.w.len());
        for value in self.w.iter().chain(&self.w0) {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
        let bytes = fs::read(path)?;
        let mut pos = 0;
        let mut next_line = || -> Result<String, ModelError> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ModelError::Checkpoint("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| ModelError::Checkpoint("header is not valid UTF-8".into()))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };

        let magic = next_line()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut field = |key: &str| -> Result<String, ModelError> {
            let line = next_line()?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Checkpoint(format!("malformed header line {line:?}")))?;
            if k != key {
                return Err(ModelError::Checkpoint(format!(
                    "expected header key {key:?}, found {k:?}"
                )));
            }
            Ok(v.to_string())
        };

        let input_dim: usize = field("input_dim")?
            .parse()
            .map_err(|e| ModelError::Checkpoint(format!("input_dim: {e}")))?;
        let hidden_raw = field("hidden_dims")?;
        let hidden_dims: Vec<usize> = if hidden_raw.is_empty() {
            vec![]
        } else {
            hidden_raw
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| ModelError::Checkpoint(format!("hidden_dims: {e}")))?
        };
        let num_classes: usize = field("num_classes")?
            .parse()
            .map_err(|e| ModelError::Checkpoint(format!("num_classes: {e}")))?;
        let activation = field("activation")?;
        if activation != "relu" {
            return Err(ModelError::Checkpoint(format!(
                "unsupported activation {activation:?}"
            )));
        }
        let init_seed: u64 = field("init_seed")?
            .parse()
            .map_err(|e| ModelError::Checkpoint(format!("init_seed: {e}")))?;

        let spec = ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            init_seed,
        };
        spec.validate()?;
        let omega = spec.param_count();
        let payload = &bytes[pos..];
        if payload.len() != 16 * omega {
            return Err(ModelError::Checkpoint(format!(
                "weight payload is {} bytes, expected {} for {} parameters",
                payload.len(),
                16 * omega,
                omega
            )));
        }
        let read_vec = |start: usize| -> Vec<f64> {
            (0..omega)
                .map(|i| {
                    let o = start + 8 * i;
                    f64::from_le_bytes(payload[o..o + 8].try_into().expect("8 bytes"))
                })
                .collect()
        };
        let w = read_vec(0);
        let w0 = read_vec(8 * omega);
        Ok(Model { spec, w, w0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(input: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            input_dim: input,
            hidden_dims: hidden,
            num_classes: classes,
            init_seed: seed,
        }
    }

    #[test]
    fn param_counts_match_hand_arithmetic() {
        assert_eq!(spec(2, vec![], 3, 0).param_count(), 9);
        assert_eq!(spec(8, vec![16], 3, 0).param_count(), 195);
    }

    #[test]
    fn same_seed_same_weights() {
        let s = spec(8, vec![16], 3, 42);
        let a = init_model(&s).unwrap();
        let b = init_model(&s).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = init_model(&spec(8, vec![16], 3, 43)).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let m = init_model(&spec(8, vec![16], 3, 7)).unwrap();
        let bound1 = (6.0 / 24.0f64).sqrt();
        for s in m.weight_slices() {
            let vals = &m.weights()[s.range.clone()];
            if s.label.starts_with('b') {
                assert!(vals.iter().all(|&v| v == 0.0), "{} not zero", s.label);
            } else if s.label == "W1" {
                assert!(vals.iter().all(|&v| v.abs() <= bound1));
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(init_model(&spec(0, vec![], 3, 0)).is_err());
        assert!(init_model(&spec(2, vec![], 1, 0)).is_err());
        assert!(init_model(&spec(2, vec![0], 3, 0)).is_err());
    }

    #[test]
    fn identity_linear_model_forwards_input() {
        let mut m = init_model(&spec(2, vec![], 2, 0)).unwrap();
        // Weight layout: W1 is [2,2] row-major, then b1.
        m.set_flat_weights(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = m
            .forward(&Tensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[2.0, 5.0]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = init_model(&spec(3, vec![4], 3, 0)).unwrap();
        m.set_flat_weights(&vec![0.0; m.param_count()]).unwrap();
        let out = m.forward(&Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(out.shape(), &[5, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_get_round_trip_preserves_forward() {
        let mut m = init_model(&spec(4, vec![5], 2, 3)).unwrap();
        let batch = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 1.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let before = m.forward(&batch).unwrap();
        let w = m.get_flat_weights();
        m.set_flat_weights(&w).unwrap();
        let after = m.forward(&batch).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn set_does_not_touch_snapshot() {
        let mut m = init_model(&spec(2, vec![], 2, 9)).unwrap();
        let w0 = m.init_weights().to_vec();
        m.set_flat_weights(&vec![7.0; m.param_count()]).unwrap();
        assert_eq!(m.init_weights(), w0.as_slice());
        assert!(m.weights().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn set_rejects_wrong_length() {
        let mut m = init_model(&spec(2, vec![], 2, 0)).unwrap();
        assert!(matches!(
            m.set_flat_weights(&[1.0]),
            Err(ModelError::WeightLength { expected: 6, got: 1 })
        ));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_model(&spec(3, vec![], 2, 0)).unwrap();
        assert!(m.forward(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = init_model(&spec(8, vec![16], 3, 1234)).unwrap();
        let mut w = m.get_flat_weights();
        for (i, v) in w.iter_mut().enumerate() {
            *v += 1e-3 * (i as f64 + 0.25);
        }
        m.set_flat_weights(&w).unwrap();
        m.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec(), m.spec());
        assert_eq!(loaded.weights(), m.weights());
        assert_eq!(loaded.init_weights(), m.init_weights());
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTAMAGIC\n").unwrap();
        assert!(matches!(
            Model::load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn gradient_flattening_matches_layout() {
        let m = init_model(&spec(2, vec![3], 2, 5)).unwrap();
        let (graph, ids) = m.ce_loss_graph(4);
        let mut bindings = Bindings::new();
        bindings.insert(
            ids.input,
            Tensor::new(vec![4, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 0.9, 1.1, -0.2]).unwrap(),
        );
        bindings.insert(ids.labels.unwrap(), Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        m.bind_weights(&ids, m.weights(), &mut bindings);
        let grads = graph.gradient(&bindings, &ids.weights).unwrap();
        let flat = m.flatten_gradient(&ids, &grads);
        assert_eq!(flat.len(), m.param_count());
        // Spot-check: first matrix gradient occupies the first slice.
        let slices = m.weight_slices();
        assert_eq!(
            &flat[slices[0].range.clone()],
            grads[&ids.weights[0]].data()
        );
    }
}
