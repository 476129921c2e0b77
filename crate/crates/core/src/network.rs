//! Desk-scale trainable point-segmentation network.
//!
//! The architecture follows the random-sampling encoder/decoder pattern:
//! each encoder layer runs a dilated residual block (two local-spatial-
//! encoding + attentive-pooling stages with a skip connection) and then
//! randomly decimates the point set; the decoder mirrors the schedule with
//! nearest-neighbor upsampling, skip concatenation and shared MLPs; a small
//! head with dropout produces per-point class logits.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::{ClassSchema, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::{KdTree, NeighborGraph};
use crate::metrics::{compute_report, ConfusionMatrix};
use crate::preprocess::{coverage_batches, tile, tile_seed, Batch};
use crate::rng::{derive_seed, Rng};
use crate::tape::{BatchStats, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

const BN_EPS: f64 = 1e-5;
const STREAM_DROPOUT: u64 = 0xD0;
const STREAM_INIT: u64 = 0x1111;

/// Network hyperparameters. All unstated values default to common
/// random-sampling-network conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerConfig {
    /// Neighbors per point in every KNN graph.
    pub k: usize,
    /// Point-count shrink factor between encoder layers.
    pub decimation_ratio: usize,
    pub num_layers: usize,
    /// Output width of each encoder block.
    pub feature_dims: Vec<usize>,
    pub num_classes: usize,
    /// Dropout on the head's penultimate layer, train mode only.
    pub dropout_rate: f64,
    pub use_batch_norm: bool,
    /// Width of the raw per-point feature vector (rgb + color-presence flag).
    pub input_dim: usize,
    /// Width after the input MLP.
    pub stem_dim: usize,
    /// Hidden width of the classification head.
    pub head_hidden: usize,
    pub bn_momentum: f64,
    pub leaky_slope: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            k: 16,
            decimation_ratio: 4,
            num_layers: 4,
            feature_dims: vec![16, 64, 128, 256],
            num_classes: 5,
            dropout_rate: 0.5,
            use_batch_norm: true,
            input_dim: 4,
            stem_dim: 8,
            head_hidden: 32,
            bn_momentum: 0.9,
            leaky_slope: 0.2,
        }
    }
}

impl LayerConfig {
    /// Validate internal consistency and compatibility with a batch size.
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidParam {
                name: "num_layers",
                reason: "must be at least 1".into(),
            });
        }
        if self.feature_dims.len() != self.num_layers {
            return Err(Error::InvalidParam {
                name: "feature_dims",
                reason: alloc::format!(
                    "{} widths for {} layers",
                    self.feature_dims.len(),
                    self.num_layers
                ),
            });
        }
        if self.feature_dims.iter().any(|&d| d < 2 || d % 2 != 0) {
            return Err(Error::InvalidParam {
                name: "feature_dims",
                reason: "widths must be even and at least 2".into(),
            });
        }
        if self.decimation_ratio < 2 {
            return Err(Error::InvalidParam {
                name: "decimation_ratio",
                reason: "must be at least 2".into(),
            });
        }
        if self.k == 0 {
            return Err(Error::InvalidParam {
                name: "k",
                reason: "must be at least 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParam {
                name: "dropout_rate",
                reason: "must be in [0, 1)".into(),
            });
        }
        let mut div = 1usize;
        for _ in 0..self.num_layers {
            div = div.saturating_mul(self.decimation_ratio);
        }
        if n_points == 0 || n_points % div != 0 {
            return Err(Error::InvalidParam {
                name: "n_points",
                reason: alloc::format!(
                    "{n_points} not divisible by decimation_ratio^num_layers = {div}"
                ),
            });
        }
        Ok(())
    }

    /// Equality of everything except the class count; transfer requires it.
    pub fn backbone_compatible(&self, other: &LayerConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.num_classes = 0;
        b.num_classes = 0;
        a == b
    }

    fn block_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.stem_dim
        } else {
            self.feature_dims[layer - 1]
        }
    }

    fn decoder_out_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.feature_dims[0]
        } else {
            self.feature_dims[layer - 1]
        }
    }
}

/// What a named tensor is, which determines its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
}

fn push_mlp(specs: &mut Vec<TensorSpec>, prefix: &str, out: usize, inp: usize, bn: bool) {
    specs.push(TensorSpec {
        name: alloc::format!("{prefix}.weight"),
        rows: out,
        cols: inp,
        kind: TensorKind::Weight,
    });
    specs.push(TensorSpec {
        name: alloc::format!("{prefix}.bias"),
        rows: 1,
        cols: out,
        kind: TensorKind::Bias,
    });
    if bn {
        for (suffix, kind) in [
            ("bn.gamma", TensorKind::Gamma),
            ("bn.beta", TensorKind::Beta),
            ("bn.running_mean", TensorKind::RunningMean),
            ("bn.running_var", TensorKind::RunningVar),
        ] {
            specs.push(TensorSpec {
                name: alloc::format!("{prefix}.{suffix}"),
                rows: 1,
                cols: out,
                kind,
            });
        }
    }
}

/// Enumerate every tensor the model owns, with shapes. The head is the pair
/// `head.out.weight` (one row per class) and `head.out.bias`.
pub fn tensor_specs(config: &LayerConfig) -> Vec<TensorSpec> {
    let bn = config.use_batch_norm;
    let mut specs = Vec::new();
    push_mlp(&mut specs, "stem", config.stem_dim, config.input_dim, bn);
    for l in 0..config.num_layers {
        let d_in = config.block_input_dim(l);
        let d = config.feature_dims[l];
        let h = d / 2;
        let w1 = h + d_in;
        push_mlp(&mut specs, &alloc::format!("enc{l}.locse1"), h, 10, bn);
        specs.push(TensorSpec {
            name: alloc::format!("enc{l}.ap1.score.weight"),
            rows: w1,
            cols: w1,
            kind: TensorKind::Weight,
        });
        push_mlp(&mut specs, &alloc::format!("enc{l}.ap1.unit"), h, w1, bn);
        push_mlp(&mut specs, &alloc::format!("enc{l}.locse2"), h, 10, bn);
        specs.push(TensorSpec {
            name: alloc::format!("enc{l}.ap2.score.weight"),
            rows: d,
            cols: d,
            kind: TensorKind::Weight,
        });
        push_mlp(&mut specs, &alloc::format!("enc{l}.ap2.unit"), d, d, bn);
        push_mlp(&mut specs, &alloc::format!("enc{l}.skip"), d, d_in, bn);
    }
    let bottom = config.feature_dims[config.num_layers - 1];
    push_mlp(&mut specs, "mid", bottom, bottom, bn);
    for l in (0..config.num_layers).rev() {
        push_mlp(
            &mut specs,
            &alloc::format!("dec{l}"),
            config.decoder_out_dim(l),
            2 * config.feature_dims[l],
            bn,
        );
    }
    push_mlp(
        &mut specs,
        "head.fc",
        config.head_hidden,
        config.feature_dims[0],
        bn,
    );
    specs.push(TensorSpec {
        name: "head.out.weight".to_string(),
        rows: config.num_classes,
        cols: config.head_hidden,
        kind: TensorKind::Weight,
    });
    specs.push(TensorSpec {
        name: "head.out.bias".to_string(),
        rows: 1,
        cols: config.num_classes,
        kind: TensorKind::Bias,
    });
    specs
}

/// Total scalar count across all tensors (buffers included).
pub fn parameter_count(config: &LayerConfig) -> usize {
    tensor_specs(config).iter().map(|s| s.rows * s.cols).sum()
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Uniform He-style init in `±sqrt(6 / fan_in)`, seeded per tensor name so
/// initialization does not depend on construction order.
pub fn init_weight<S: Scalar>(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor<S> {
    let mut rng = Rng::new(derive_seed(seed, fnv1a64(name)));
    let bound = libm::sqrt(6.0 / cols as f64);
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| S::from_f64(rng.range_f64(-bound, bound)))
            .collect(),
    )
}

/// Freshly initialized tensor table for a config.
pub fn init_tensors<S: Scalar>(config: &LayerConfig, seed: u64) -> BTreeMap<String, Tensor<S>> {
    let seed = derive_seed(seed, STREAM_INIT);
    let mut tensors = BTreeMap::new();
    for spec in tensor_specs(config) {
        let t = match spec.kind {
            TensorKind::Weight => init_weight(spec.rows, spec.cols, seed, &spec.name),
            TensorKind::Bias | TensorKind::Beta | TensorKind::RunningMean => {
                Tensor::zeros(spec.rows, spec.cols)
            }
            TensorKind::Gamma | TensorKind::RunningVar => {
                Tensor::from_vec(spec.rows, spec.cols, vec![S::ONE; spec.rows * spec.cols])
            }
        };
        tensors.insert(spec.name, t);
    }
    tensors
}

/// A trained or initialized model: hyperparameters, the class schema the
/// head predicts, and the named tensor table (32-bit).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: LayerConfig,
    pub schema: ClassSchema,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn init(config: LayerConfig, schema: ClassSchema, seed: u64) -> Result<Self> {
        if config.num_classes != schema.len() {
            return Err(Error::IncompatibleConfig(alloc::format!(
                "config has {} classes, schema `{}` has {}",
                config.num_classes,
                schema.name,
                schema.len()
            )));
        }
        schema.validate()?;
        let tensors = init_tensors(&config, seed);
        Ok(ModelParams {
            config,
            schema,
            tensors,
        })
    }

    /// Check that the tensor table matches the config exactly and holds only
    /// finite values.
    pub fn validate_shapes(&self) -> Result<()> {
        if self.config.num_classes != self.schema.len() {
            return Err(Error::IncompatibleConfig(alloc::format!(
                "config has {} classes, schema `{}` has {}",
                self.config.num_classes,
                self.schema.name,
                self.schema.len()
            )));
        }
        let specs = tensor_specs(&self.config);
        if specs.len() != self.tensors.len() {
            return Err(Error::IncompatibleConfig(alloc::format!(
                "{} tensors present, config requires {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for spec in specs {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| Error::IncompatibleConfig(alloc::format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != (spec.rows, spec.cols) {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "tensor `{}` is {:?}, expected ({}, {})",
                    spec.name,
                    t.shape(),
                    spec.rows,
                    spec.cols
                )));
            }
            if !t.all_finite() {
                return Err(Error::IncompatibleConfig(alloc::format!(
                    "tensor `{}` holds non-finite values",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Whether a tensor takes part in gradient descent (running statistics do not).
pub fn is_trainable(name: &str) -> bool {
    !name.ends_with(".running_mean") && !name.ends_with(".running_var")
}

/// Whether a tensor belongs to the classification head's output layer.
pub fn is_head(name: &str) -> bool {
    name.starts_with("head.out.")
}

/// Retain `ceil(n / ratio)` distinct indices, uniform without replacement,
/// sorted ascending, deterministic under `seed`.
pub fn random_downsample(n: usize, ratio: usize, seed: u64) -> Result<Vec<u32>> {
    if ratio < 2 {
        return Err(Error::InvalidParam {
            name: "ratio",
            reason: "must be at least 2".into(),
        });
    }
    if n < ratio {
        return Err(Error::InvalidParam {
            name: "n",
            reason: alloc::format!("{n} points cannot be decimated by ratio {ratio}"),
        });
    }
    let keep = n.div_ceil(ratio);
    let mut rng = Rng::new(seed);
    Ok(rng.sample_without_replacement(n, keep))
}

/// Raw per-point input features: RGB scaled to `[0, 1]` plus a presence
/// flag; clouds without color get zeros and a zero flag.
pub fn input_features<S: Scalar>(cloud: &PointCloud) -> Tensor<S> {
    let n = cloud.len();
    let mut t = Tensor::zeros(n, 4);
    if let Some(colors) = &cloud.colors {
        for (r, c) in colors.iter().enumerate() {
            let row = t.row_mut(r);
            row[0] = S::from_f64(c[0] as f64 / 255.0);
            row[1] = S::from_f64(c[1] as f64 / 255.0);
            row[2] = S::from_f64(c[2] as f64 / 255.0);
            row[3] = S::ONE;
        }
    }
    t
}

/// The 10-scalar relative-position encoding rows for every (point, neighbor)
/// pair of a graph: `[p_i, p_j, p_i - p_j, |p_i - p_j|]`.
pub fn locse_features<S: Scalar>(positions: &[[f64; 3]], graph: &NeighborGraph) -> Tensor<S> {
    let n = graph.rows();
    let k = graph.k;
    let mut t = Tensor::zeros(n * k, 10);
    for i in 0..n {
        let pi = positions[i];
        for (j, &nb) in graph.row(i).iter().enumerate() {
            let pj = positions[nb as usize];
            let d = [pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]];
            let norm = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            let row = t.row_mut(i * k + j);
            row[0] = S::from_f64(pi[0]);
            row[1] = S::from_f64(pi[1]);
            row[2] = S::from_f64(pi[2]);
            row[3] = S::from_f64(pj[0]);
            row[4] = S::from_f64(pj[1]);
            row[5] = S::from_f64(pj[2]);
            row[6] = S::from_f64(d[0]);
            row[7] = S::from_f64(d[1]);
            row[8] = S::from_f64(d[2]);
            row[9] = S::from_f64(norm);
        }
    }
    t
}

/// Local spatial encoding (plain MLP form, no normalization): encode each
/// neighbor's relative position through a shared MLP and concatenate the
/// result with the neighbor's feature vector. Output is `(n*k, d_mlp + d_in)`.
pub fn locse_encode<S: Scalar>(
    tape: &mut Tape<S>,
    positions: &[[f64; 3]],
    graph: &NeighborGraph,
    features: NodeId,
    weight: NodeId,
    bias: NodeId,
    slope: f64,
) -> Result<NodeId> {
    if tape.value(features).rows() != graph.rows() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} feature rows for a {}-row graph",
            tape.value(features).rows(),
            graph.rows()
        )));
    }
    if positions.len() != graph.rows() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} positions for a {}-row graph",
            positions.len(),
            graph.rows()
        )));
    }
    let rel = tape.leaf(locse_features(positions, graph));
    let lin = tape.linear(rel, weight, Some(bias));
    let encoded = tape.leaky_relu(lin, slope);
    let gathered = tape.gather_rows(features, &graph.indices);
    Ok(tape.concat_cols(encoded, gathered))
}

/// Attentive pooling (plain MLP form): per-channel softmax scores from a
/// shared linear function, weighted summation over each point's `k`
/// neighbors, then a shared unit MLP.
pub fn attentive_pool<S: Scalar>(
    tape: &mut Tape<S>,
    neighbor_features: NodeId,
    k: usize,
    score_weight: NodeId,
    unit_weight: NodeId,
    unit_bias: NodeId,
    slope: f64,
    activate: bool,
) -> Result<NodeId> {
    if k == 0 || tape.value(neighbor_features).rows() % k != 0 {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} neighbor rows not grouped by k={k}",
            tape.value(neighbor_features).rows()
        )));
    }
    let scores = tape.linear(neighbor_features, score_weight, None);
    let attn = tape.softmax_groups(scores, k);
    let weighted = tape.mul(attn, neighbor_features);
    let pooled = tape.sum_groups(weighted, k);
    let lin = tape.linear(pooled, unit_weight, Some(unit_bias));
    Ok(if activate {
        tape.leaky_relu(lin, slope)
    } else {
        lin
    })
}

/// Tape node ids for one residual block (plain MLP form).
pub struct BlockNodes {
    pub locse1_weight: NodeId,
    pub locse1_bias: NodeId,
    pub ap1_score: NodeId,
    pub ap1_unit_weight: NodeId,
    pub ap1_unit_bias: NodeId,
    pub locse2_weight: NodeId,
    pub locse2_bias: NodeId,
    pub ap2_score: NodeId,
    pub ap2_unit_weight: NodeId,
    pub ap2_unit_bias: NodeId,
    pub skip_weight: NodeId,
    pub skip_bias: NodeId,
}

/// Dilated residual block (plain MLP form):
/// `out = leaky_relu(AP(LocSE(AP(LocSE(x)))) + skip_mlp(x))`.
pub fn dilated_residual_block<S: Scalar>(
    tape: &mut Tape<S>,
    positions: &[[f64; 3]],
    features: NodeId,
    graph: &NeighborGraph,
    p: &BlockNodes,
    slope: f64,
) -> Result<NodeId> {
    let aug1 = locse_encode(
        tape,
        positions,
        graph,
        features,
        p.locse1_weight,
        p.locse1_bias,
        slope,
    )?;
    let x1 = attentive_pool(
        tape,
        aug1,
        graph.k,
        p.ap1_score,
        p.ap1_unit_weight,
        p.ap1_unit_bias,
        slope,
        true,
    )?;
    let aug2 = locse_encode(
        tape,
        positions,
        graph,
        x1,
        p.locse2_weight,
        p.locse2_bias,
        slope,
    )?;
    let main = attentive_pool(
        tape,
        aug2,
        graph.k,
        p.ap2_score,
        p.ap2_unit_weight,
        p.ap2_unit_bias,
        slope,
        false,
    )?;
    let skip_lin = tape.linear(features, p.skip_weight, Some(p.skip_bias));
    let sum = tape.add(main, skip_lin);
    Ok(tape.leaky_relu(sum, slope))
}

/// Nearest-neighbor feature upsampling: every fine point takes the feature
/// of its nearest coarse point (ties to the lower index).
pub fn nearest_upsample<S: Scalar>(
    tape: &mut Tape<S>,
    coarse_features: NodeId,
    coarse_positions: &[[f64; 3]],
    fine_positions: &[[f64; 3]],
) -> Result<NodeId> {
    if coarse_positions.is_empty() {
        return Err(Error::EmptyInput("nearest_upsample coarse set"));
    }
    if tape.value(coarse_features).rows() != coarse_positions.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} coarse features for {} coarse positions",
            tape.value(coarse_features).rows(),
            coarse_positions.len()
        )));
    }
    let tree = KdTree::build(coarse_positions)?;
    let assignment: Vec<u32> = fine_positions.iter().map(|p| tree.nearest_one(p)).collect();
    Ok(tape.gather_rows(coarse_features, &assignment))
}

/// Forward/backward mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A forward pass still attached to its tape, for training.
pub struct ForwardRun<S: Scalar> {
    pub tape: Tape<S>,
    pub logits: NodeId,
    /// Name -> leaf node of every trainable tensor.
    pub param_ids: BTreeMap<String, NodeId>,
    /// Batch statistics produced by train-mode batch norms, keyed by the
    /// owning MLP prefix.
    pub bn_updates: Vec<(String, BatchStats<S>)>,
}

struct Net<'a, S: Scalar> {
    tape: Tape<S>,
    tensors: &'a BTreeMap<String, Tensor<S>>,
    config: &'a LayerConfig,
    mode: Mode,
    ids: BTreeMap<String, NodeId>,
    bn_updates: Vec<(String, BatchStats<S>)>,
    rng: Rng,
}

impl<'a, S: Scalar> Net<'a, S> {
    fn tensor(&self, name: &str) -> Result<&'a Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::IncompatibleConfig(alloc::format!("missing tensor `{name}`")))
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let value = self.tensor(name)?.clone();
        let id = self.tape.leaf(value);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Shared MLP: linear + optional batch norm + optional leaky relu.
    fn mlp(&mut self, prefix: &str, x: NodeId, activate: bool) -> Result<NodeId> {
        let w = self.param(&alloc::format!("{prefix}.weight"))?;
        let b = self.param(&alloc::format!("{prefix}.bias"))?;
        let mut y = self.tape.linear(x, w, Some(b));
        if self.config.use_batch_norm {
            let gamma = self.param(&alloc::format!("{prefix}.bn.gamma"))?;
            let beta = self.param(&alloc::format!("{prefix}.bn.beta"))?;
            y = match self.mode {
                Mode::Train => {
                    let (id, stats) = self.tape.batch_norm_train(y, gamma, beta, BN_EPS);
                    self.bn_updates.push((prefix.to_string(), stats));
                    id
                }
                Mode::Eval => {
                    let mean = self
                        .tensor(&alloc::format!("{prefix}.bn.running_mean"))?
                        .row(0)
                        .to_vec();
                    let var = self
                        .tensor(&alloc::format!("{prefix}.bn.running_var"))?
                        .row(0)
                        .to_vec();
                    self.tape.batch_norm_eval(y, gamma, beta, &mean, &var, BN_EPS)
                }
            };
        }
        Ok(if activate {
            self.tape.leaky_relu(y, self.config.leaky_slope)
        } else {
            y
        })
    }

    fn locse(
        &mut self,
        prefix: &str,
        positions: &[[f64; 3]],
        graph: &NeighborGraph,
        features: NodeId,
    ) -> Result<NodeId> {
        let rel = self.tape.leaf(locse_features(positions, graph));
        let encoded = self.mlp(prefix, rel, true)?;
        let gathered = self.tape.gather_rows(features, &graph.indices);
        Ok(self.tape.concat_cols(encoded, gathered))
    }

    fn attentive(
        &mut self,
        score_name: &str,
        unit_prefix: &str,
        neighbor_features: NodeId,
        k: usize,
        activate: bool,
    ) -> Result<NodeId> {
        let score_w = self.param(score_name)?;
        let scores = self.tape.linear(neighbor_features, score_w, None);
        let attn = self.tape.softmax_groups(scores, k);
        let weighted = self.tape.mul(attn, neighbor_features);
        let pooled = self.tape.sum_groups(weighted, k);
        self.mlp(unit_prefix, pooled, activate)
    }

    fn block(
        &mut self,
        layer: usize,
        positions: &[[f64; 3]],
        features: NodeId,
        graph: &NeighborGraph,
    ) -> Result<NodeId> {
        let k = graph.k;
        let aug1 = self.locse(&alloc::format!("enc{layer}.locse1"), positions, graph, features)?;
        let x1 = self.attentive(
            &alloc::format!("enc{layer}.ap1.score.weight"),
            &alloc::format!("enc{layer}.ap1.unit"),
            aug1,
            k,
            true,
        )?;
        let aug2 = self.locse(&alloc::format!("enc{layer}.locse2"), positions, graph, x1)?;
        let main = self.attentive(
            &alloc::format!("enc{layer}.ap2.score.weight"),
            &alloc::format!("enc{layer}.ap2.unit"),
            aug2,
            k,
            false,
        )?;
        let skip = self.mlp(&alloc::format!("enc{layer}.skip"), features, false)?;
        let sum = self.tape.add(main, skip);
        Ok(self.tape.leaky_relu(sum, self.config.leaky_slope))
    }
}

fn check_batch(config: &LayerConfig, batch: &Batch) -> Result<()> {
    config.validate(batch.n_points())?;
    if batch.graphs.len() != config.num_layers || batch.down_indices.len() != config.num_layers {
        return Err(Error::IncompatibleConfig(alloc::format!(
            "batch carries {} graphs / {} decimations for a {}-layer config",
            batch.graphs.len(),
            batch.down_indices.len(),
            config.num_layers
        )));
    }
    let mut n = batch.n_points();
    for (l, graph) in batch.graphs.iter().enumerate() {
        if graph.k != config.k {
            return Err(Error::IncompatibleConfig(alloc::format!(
                "graph {l} has k={}, config wants {}",
                graph.k,
                config.k
            )));
        }
        if graph.rows() != n {
            return Err(Error::IncompatibleConfig(alloc::format!(
                "graph {l} has {} rows, expected {n}",
                graph.rows()
            )));
        }
        let keep = n.div_ceil(config.decimation_ratio);
        if batch.down_indices[l].len() != keep {
            return Err(Error::IncompatibleConfig(alloc::format!(
                "decimation {l} keeps {} of {n}, expected {keep}",
                batch.down_indices[l].len()
            )));
        }
        n = keep;
    }
    Ok(())
}

/// Run the network over a batch, keeping the tape for backprop.
pub fn forward_run<'a, S: Scalar>(
    tensors: &'a BTreeMap<String, Tensor<S>>,
    config: &'a LayerConfig,
    batch: &Batch,
    mode: Mode,
    seed: u64,
) -> Result<ForwardRun<S>> {
    check_batch(config, batch)?;
    let levels = batch.level_positions();
    let mut net = Net {
        tape: Tape::new(),
        tensors,
        config,
        mode,
        ids: BTreeMap::new(),
        bn_updates: Vec::new(),
        rng: Rng::new(derive_seed(seed, STREAM_DROPOUT)),
    };

    let features = net.tape.leaf(input_features::<S>(&batch.cloud));
    let mut x = net.mlp("stem", features, true)?;

    let mut skips: Vec<NodeId> = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        x = net.block(l, &levels[l], x, &batch.graphs[l])?;
        skips.push(x);
        x = net.tape.gather_rows(x, &batch.down_indices[l]);
    }

    x = net.mlp("mid", x, true)?;

    for l in (0..config.num_layers).rev() {
        let up = nearest_upsample(&mut net.tape, x, &levels[l + 1], &levels[l])?;
        let cat = net.tape.concat_cols(up, skips[l]);
        x = net.mlp(&alloc::format!("dec{l}"), cat, true)?;
    }

    x = net.mlp("head.fc", x, true)?;
    if mode == Mode::Train && config.dropout_rate > 0.0 {
        let mut rng = net.rng.clone();
        x = net.tape.dropout(x, config.dropout_rate, &mut rng);
    }
    let w = net.param("head.out.weight")?;
    let b = net.param("head.out.bias")?;
    let logits = net.tape.linear(x, w, Some(b));

    Ok(ForwardRun {
        tape: net.tape,
        logits,
        param_ids: net.ids,
        bn_updates: net.bn_updates,
    })
}

/// Per-point class logits for a batch. Eval mode is a pure function of
/// `(params, batch)`: two calls return bitwise-identical tensors.
pub fn forward(params: &ModelParams, batch: &Batch, mode: Mode, seed: u64) -> Result<Tensor<f32>> {
    let run = forward_run(&params.tensors, &params.config, batch, mode, seed)?;
    Ok(run.tape.value(run.logits).clone())
}

/// Mean weighted cross-entropy and its gradient w.r.t. the logits:
/// `grad[r] = w[y_r] * (softmax(z_r) - onehot(y_r)) / n`.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u8],
    weights: &[S],
) -> Result<(S, Tensor<S>)> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if weights.len() != classes {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} class weights for {classes} classes",
            weights.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("cross_entropy"));
    }
    let inv_n = S::ONE / S::from_f64(n as f64);
    let mut grad = Tensor::zeros(n, classes);
    let mut loss = S::ZERO;
    for r in 0..n {
        let y = labels[r] as usize;
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                index: r,
                label: labels[r] as u32,
                class_count: classes,
            });
        }
        let row = logits.row(r);
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.maximum(v);
        }
        let mut denom = S::ZERO;
        for &v in row {
            denom += (v - m).exp();
        }
        let lse = denom.ln() + m;
        loss += weights[y] * (lse - row[y]);
        let g = grad.row_mut(r);
        for c in 0..classes {
            let p = (row[c] - m).exp() / denom;
            let indicator = if c == y { S::ONE } else { S::ZERO };
            g[c] = weights[y] * (p - indicator) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, keyed like the parameter table.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction over every gradient present in
/// `grads`. Parameters without a gradient this step are left untouched.
pub fn adam_step<S: Scalar>(
    params: &mut BTreeMap<String, Tensor<S>>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    hp: &AdamParams,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let beta1 = S::from_f64(hp.beta1);
    let beta2 = S::from_f64(hp.beta2);
    let one_m_beta1 = S::from_f64(1.0 - hp.beta1);
    let one_m_beta2 = S::from_f64(1.0 - hp.beta2);
    let corr1 = S::from_f64(1.0 / (1.0 - libm::pow(hp.beta1, t as f64)));
    let corr2 = S::from_f64(1.0 / (1.0 - libm::pow(hp.beta2, t as f64)));
    let lr = S::from_f64(hp.lr);
    let eps = S::from_f64(hp.eps);

    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::IncompatibleConfig(alloc::format!("gradient for unknown tensor `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "gradient for `{name}` is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + one_m_beta1 * gi;
            let vi = beta2 * v.data()[i] + one_m_beta2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi * corr1;
            let v_hat = vi * corr2;
            p.data_mut()[i] = p.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many consecutive epochs without validation-mIoU
    /// improvement.
    pub patience: usize,
    pub adam: AdamParams,
    pub seed: u64,
    /// Per-class loss weights; uniform when absent.
    pub class_weights: Option<Vec<f32>>,
    /// When set, only the classification head is updated.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            patience: 10,
            adam: AdamParams::default(),
            seed: 0,
            class_weights: None,
            freeze_backbone: false,
        }
    }
}

/// One epoch of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
}

fn fold_bn_updates(
    tensors: &mut BTreeMap<String, Tensor<f32>>,
    updates: &[(String, BatchStats<f32>)],
    momentum: f64,
) {
    let m = momentum as f32;
    for (prefix, stats) in updates {
        if let Some(rm) = tensors.get_mut(&alloc::format!("{prefix}.bn.running_mean")) {
            for (slot, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *slot = m * *slot + (1.0 - m) * b;
            }
        }
        if let Some(rv) = tensors.get_mut(&alloc::format!("{prefix}.bn.running_var")) {
            for (slot, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                *slot = m * *slot + (1.0 - m) * b;
            }
        }
    }
}

/// Argmax with ties resolved toward the lowest class id.
pub fn argmax_class(row: &[f32]) -> u8 {
    let mut best = 0usize;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best as u8
}

/// Mean IoU of eval-mode predictions over labeled batches.
pub fn validation_miou(
    tensors: &BTreeMap<String, Tensor<f32>>,
    config: &LayerConfig,
    batches: &[Batch],
) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(config.num_classes);
    for batch in batches {
        let labels = batch.cloud.labels()?;
        let run = forward_run(tensors, config, batch, Mode::Eval, 0)?;
        let logits = run.tape.value(run.logits);
        let predicted: Vec<u8> = (0..logits.rows())
            .map(|r| argmax_class(logits.row(r)))
            .collect();
        cm.accumulate(labels, &predicted)?;
    }
    let report = compute_report(&cm)?;
    Ok(report.mean_iou.unwrap_or(0.0))
}

/// Epochs of shuffled batch gradient descent with Adam, early stopping on
/// validation mean-IoU. On return `params` holds the weights of the best
/// validation epoch; the full history is returned.
pub fn train(
    params: &mut ModelParams,
    train_batches: &[Batch],
    val_batches: &[Batch],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    if train_batches.is_empty() || val_batches.is_empty() {
        return Err(Error::EmptyInput("train/validation batches"));
    }
    params.validate_shapes()?;
    let classes = params.config.num_classes;
    let weights: Vec<f32> = match &cfg.class_weights {
        Some(w) => {
            if w.len() != classes {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "{} class weights for {classes} classes",
                    w.len()
                )));
            }
            w.clone()
        }
        None => vec![1.0; classes],
    };

    let mut tensors = params.tensors.clone();
    let mut best_tensors = tensors.clone();
    let mut best_miou = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut state: AdamState<f32> = AdamState::new();
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_batches.len()).collect();
        let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, 0xE0 ^ (epoch as u64) << 8));
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        for (step, &bi) in order.iter().enumerate() {
            let batch = &train_batches[bi];
            let labels = batch.cloud.labels()?.to_vec();
            let mut run = forward_run(
                &tensors,
                &params.config,
                batch,
                Mode::Train,
                derive_seed(cfg.seed, ((epoch as u64) << 20) | step as u64),
            )?;
            let loss_id = run
                .tape
                .softmax_cross_entropy(run.logits, &labels, &weights)?;
            epoch_loss += run.tape.value(loss_id).at(0, 0) as f64;
            let mut grads_by_node = run.tape.backward(loss_id);

            fold_bn_updates(&mut tensors, &run.bn_updates, params.config.bn_momentum);

            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (name, id) in &run.param_ids {
                if !is_trainable(name) {
                    continue;
                }
                if cfg.freeze_backbone && !name.starts_with("head.") {
                    continue;
                }
                if let Some(g) = grads_by_node.take(*id) {
                    grads.insert(name.clone(), g);
                }
            }
            adam_step(&mut tensors, &grads, &mut state, &cfg.adam)?;
        }
        let train_loss = epoch_loss / train_batches.len() as f64;
        let val_miou = validation_miou(&tensors, &params.config, val_batches)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_miou,
        });

        if val_miou > best_miou {
            best_miou = val_miou;
            best_tensors = tensors.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }

    params.tensors = best_tensors;
    Ok(history)
}

/// Batch construction settings used by inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictSettings {
    pub n_points: usize,
    pub tile_size: f64,
    pub seed: u64,
}

/// Label every point of a cloud: tile, batch (covering every point at least
/// once), forward in eval mode, arg-max, and stitch labels back into the
/// original point order. Points forwarded more than once keep the label of
/// their last forward, which is deterministic because tile and batch order
/// are.
pub fn predict_labels(
    cloud: &PointCloud,
    params: &ModelParams,
    settings: &PredictSettings,
) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("predict_labels"));
    }
    params.validate_shapes()?;
    let grid = tile(cloud, settings.tile_size)?;
    let mut labels = vec![0u8; cloud.len()];
    for (tile_index, (tile_id, members)) in grid.tiles.iter().enumerate() {
        let tile_cloud = cloud.select(members);
        let batches = coverage_batches(
            &tile_cloud,
            members,
            &params.config,
            settings.n_points,
            *tile_id,
            tile_seed(settings.seed, tile_index as u64),
        )?;
        for batch in &batches {
            let logits = forward(params, batch, Mode::Eval, 0)?;
            for (row, &src) in batch.source_indices.iter().enumerate() {
                labels[src as usize] = argmax_class(logits.row(row));
            }
        }
    }
    let mut out = cloud.clone();
    out.labels = Some(labels);
    out.schema_name = params.schema.name.clone();
    Ok(out)
}
