//! Model graph: an ordered layer DAG with explicit channel wiring.
//!
//! The family covers squeeze/expand fire stacks with batch normalization
//! after every convolution, late max-pool downsampling, a 1x1 embedding
//! convolution feeding global average pooling, and a dense softmax head.
//! Nodes own their parameter tensors, so every trainable scalar is reachable
//! from exactly one layer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Rng;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor<f32>, // [F, C, kH, kW]
    pub bias: Tensor<f32>,   // [F]
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub running_mean: Tensor<f32>,
    pub running_var: Tensor<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BnParams {
    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor<f32>, // [K, C]
    pub bias: Tensor<f32>,   // [K]
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input { channels: usize },
    Conv(ConvParams),
    BatchNorm(BnParams),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Concat,
    GlobalAvgPool,
    Dense(DenseParams),
}

impl NodeKind {
    pub fn tag(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv(_) => "conv",
            NodeKind::BatchNorm(_) => "batchnorm",
            NodeKind::Relu => "relu",
            NodeKind::MaxPool { .. } => "maxpool",
            NodeKind::Concat => "concat",
            NodeKind::GlobalAvgPool => "global_avg_pool",
            NodeKind::Dense(_) => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub name: String,
    pub inputs: Vec<usize>,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub nodes: Vec<GraphNode>,
}

/// Which parameter tensor of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamSlot {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    DenseWeight,
    DenseBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamRef {
    pub node: usize,
    pub slot: ParamSlot,
}

/// Size accounting for a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelStats {
    pub total_filters: usize,
    pub learnables: usize,
    pub embedding_dim: usize,
    pub model_bytes: usize,
}

/// Fire module filter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FireSpec {
    pub squeeze_1x1: usize,
    pub expand_1x1: usize,
    pub expand_3x3: usize,
}

impl FireSpec {
    pub fn out_channels(&self) -> usize {
        self.expand_1x1 + self.expand_3x3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Fire(FireSpec),
}

/// Data-driven description of a model to build: named blocks, then a 1x1
/// embedding conv, global average pooling, and a dense classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub blocks: Vec<(String, BlockSpec)>,
    pub embed_filters: usize,
    pub num_classes: usize,
}

/// The canonical fire-stack schedule: 64-filter 3x3 stem at stride 1 (keeps
/// 113x113 maps), eight fire modules with late downsampling, 1000-filter
/// embedding conv.
pub fn full_arch(num_classes: usize) -> ArchSpec {
    let fire = |s, e| FireSpec {
        squeeze_1x1: s,
        expand_1x1: e,
        expand_3x3: e,
    };
    ArchSpec {
        input_channels: 3,
        blocks: vec![
            (
                "conv1".into(),
                BlockSpec::Conv {
                    filters: 64,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            ),
            (
                "pool1".into(),
                BlockSpec::MaxPool {
                    kernel: 3,
                    stride: 2,
                },
            ),
            ("fire2".into(), BlockSpec::Fire(fire(16, 64))),
            ("fire3".into(), BlockSpec::Fire(fire(16, 64))),
            (
                "pool3".into(),
                BlockSpec::MaxPool {
                    kernel: 3,
                    stride: 2,
                },
            ),
            ("fire4".into(), BlockSpec::Fire(fire(32, 128))),
            ("fire5".into(), BlockSpec::Fire(fire(32, 128))),
            (
                "pool5".into(),
                BlockSpec::MaxPool {
                    kernel: 3,
                    stride: 2,
                },
            ),
            ("fire6".into(), BlockSpec::Fire(fire(48, 192))),
            ("fire7".into(), BlockSpec::Fire(fire(48, 192))),
            ("fire8".into(), BlockSpec::Fire(fire(64, 256))),
            ("fire9".into(), BlockSpec::Fire(fire(64, 256))),
        ],
        embed_filters: 1000,
        num_classes,
    }
}

/// Same topology with every filter count floor-divided. Any layer landing
/// below 2 filters is an error.
pub fn micro_arch(num_classes: usize, width_divisor: usize) -> Result<ArchSpec> {
    let full = full_arch(num_classes);
    let div = |count: usize, layer: &str| -> Result<usize> {
        let scaled = count / width_divisor;
        if scaled < 2 {
            Err(Error::TooFewFilters {
                layer: layer.into(),
                divisor: width_divisor,
                filters: scaled,
            })
        } else {
            Ok(scaled)
        }
    };
    let mut blocks = Vec::with_capacity(full.blocks.len());
    for (name, block) in full.blocks {
        let scaled = match block {
            BlockSpec::Conv {
                filters,
                kernel,
                stride,
                pad,
            } => BlockSpec::Conv {
                filters: div(filters, &name)?,
                kernel,
                stride,
                pad,
            },
            BlockSpec::MaxPool { kernel, stride } => BlockSpec::MaxPool { kernel, stride },
            BlockSpec::Fire(f) => BlockSpec::Fire(FireSpec {
                squeeze_1x1: div(f.squeeze_1x1, &name)?,
                expand_1x1: div(f.expand_1x1, &name)?,
                expand_3x3: div(f.expand_3x3, &name)?,
            }),
        };
        blocks.push((name, scaled));
    }
    Ok(ArchSpec {
        input_channels: full.input_channels,
        blocks,
        embed_filters: div(full.embed_filters, "embed")?,
        num_classes,
    })
}

fn he_conv(filters: usize, in_ch: usize, kernel: usize, rng: &mut Rng) -> Tensor<f32> {
    let fan_in = in_ch * kernel * kernel;
    let std = libm::sqrtf(2.0 / fan_in as f32);
    let data = (0..filters * fan_in).map(|_| rng.normal() * std).collect();
    Tensor::from_vec(&[filters, in_ch, kernel, kernel], data).expect("conv init")
}

impl ModelGraph {
    pub fn new(input_channels: usize) -> Self {
        ModelGraph {
            nodes: vec![GraphNode {
                name: "input".into(),
                inputs: Vec::new(),
                kind: NodeKind::Input {
                    channels: input_channels,
                },
            }],
        }
    }

    fn add(&mut self, name: String, inputs: Vec<usize>, kind: NodeKind) -> usize {
        self.nodes.push(GraphNode { name, inputs, kind });
        self.nodes.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn add_conv(
        &mut self,
        name: &str,
        input: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> usize {
        let in_ch = self.out_channels(input);
        self.add(
            name.into(),
            vec![input],
            NodeKind::Conv(ConvParams {
                weight: he_conv(filters, in_ch, kernel, rng),
                bias: Tensor::zeros(&[filters]),
                stride,
                pad,
            }),
        )
    }

    pub fn add_batchnorm(&mut self, name: &str, input: usize) -> usize {
        let ch = self.out_channels(input);
        self.add(
            name.into(),
            vec![input],
            NodeKind::BatchNorm(BnParams {
                gamma: Tensor::filled(&[ch], 1.0),
                beta: Tensor::zeros(&[ch]),
                running_mean: Tensor::zeros(&[ch]),
                running_var: Tensor::filled(&[ch], 1.0),
                eps: BN_EPSILON,
                momentum: BN_MOMENTUM,
            }),
        )
    }

    pub fn add_relu(&mut self, name: &str, input: usize) -> usize {
        self.add(name.into(), vec![input], NodeKind::Relu)
    }

    /// conv -> batchnorm -> relu; returns the relu node.
    #[allow(clippy::too_many_arguments)]
    pub fn add_conv_bn_relu(
        &mut self,
        name: &str,
        input: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> usize {
        let conv = self.add_conv(name, input, filters, kernel, stride, pad, rng);
        let bn = self.add_batchnorm(&format!("{}.bn", name), conv);
        self.add_relu(&format!("{}.relu", name), bn)
    }

    pub fn add_maxpool(&mut self, name: &str, input: usize, kernel: usize, stride: usize) -> usize {
        self.add(
            name.into(),
            vec![input],
            NodeKind::MaxPool { kernel, stride },
        )
    }

    /// Squeeze then parallel expands; the expand-1x1 block feeds the concat
    /// first (fixed convention the surgery index remapping relies on).
    pub fn add_fire(&mut self, name: &str, input: usize, spec: FireSpec, rng: &mut Rng) -> usize {
        let squeeze = self.add_conv_bn_relu(
            &format!("{}.squeeze", name),
            input,
            spec.squeeze_1x1,
            1,
            1,
            0,
            rng,
        );
        let e1 = self.add_conv_bn_relu(
            &format!("{}.expand1", name),
            squeeze,
            spec.expand_1x1,
            1,
            1,
            0,
            rng,
        );
        let e3 = self.add_conv_bn_relu(
            &format!("{}.expand3", name),
            squeeze,
            spec.expand_3x3,
            3,
            1,
            1,
            rng,
        );
        self.add(format!("{}.concat", name), vec![e1, e3], NodeKind::Concat)
    }

    pub fn add_global_avg_pool(&mut self, name: &str, input: usize) -> usize {
        self.add(name.into(), vec![input], NodeKind::GlobalAvgPool)
    }

    pub fn add_dense(
        &mut self,
        name: &str,
        input: usize,
        out_features: usize,
        rng: &mut Rng,
    ) -> usize {
        let in_ch = self.out_channels(input);
        let std = libm::sqrtf(1.0 / in_ch as f32);
        let data = (0..out_features * in_ch)
            .map(|_| rng.normal() * std)
            .collect();
        self.add(
            name.into(),
            vec![input],
            NodeKind::Dense(DenseParams {
                weight: Tensor::from_vec(&[out_features, in_ch], data).expect("dense init"),
                bias: Tensor::zeros(&[out_features]),
            }),
        )
    }

    /// Output channel count of a node (descriptor length for rank-2 outputs).
    pub fn out_channels(&self, idx: usize) -> usize {
        match &self.nodes[idx].kind {
            NodeKind::Input { channels } => *channels,
            NodeKind::Conv(c) => c.filters(),
            NodeKind::BatchNorm(b) => b.channels(),
            NodeKind::Relu | NodeKind::MaxPool { .. } | NodeKind::GlobalAvgPool => {
                self.out_channels(self.nodes[idx].inputs[0])
            }
            NodeKind::Concat => self.nodes[idx]
                .inputs
                .iter()
                .map(|i| self.out_channels(*i))
                .sum(),
            NodeKind::Dense(d) => d.weight.shape()[0],
        }
    }

    /// Nodes that list `idx` among their inputs.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&idx))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// The GAP node, or an error if the graph has none.
    fn gap_node(&self) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| matches!(n.kind, NodeKind::GlobalAvgPool))
            .ok_or_else(|| Error::UnresolvableWiring {
                layer: "global_avg_pool".into(),
                detail: "graph has no global average pooling node".into(),
            })
    }

    /// Descriptor length: channel count flowing into global average pooling.
    pub fn embedding_dim(&self) -> usize {
        match self.gap_node() {
            Ok(gap) => self.out_channels(self.nodes[gap].inputs[0]),
            Err(_) => 0,
        }
    }

    /// Validate channel consistency along every edge.
    pub fn validate_channels(&self) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            let fail = |detail: String| -> Result<()> {
                let producer = node
                    .inputs
                    .first()
                    .map(|i| self.nodes[*i].name.clone())
                    .unwrap_or_else(|| "(none)".into());
                Err(Error::InconsistentEdge {
                    producer,
                    consumer: node.name.clone(),
                    detail,
                })
            };
            match &node.kind {
                NodeKind::Input { .. } => {}
                NodeKind::Conv(c) => {
                    let got = self.out_channels(node.inputs[0]);
                    if c.in_channels() != got {
                        fail(format!(
                            "conv expects {} in-channels, gets {}",
                            c.in_channels(),
                            got
                        ))?;
                    }
                    if c.bias.shape() != [c.filters()] {
                        fail(format!(
                            "bias length {:?} vs {} filters",
                            c.bias.shape(),
                            c.filters()
                        ))?;
                    }
                }
                NodeKind::BatchNorm(b) => {
                    let got = self.out_channels(node.inputs[0]);
                    if b.channels() != got {
                        fail(format!(
                            "batchnorm over {} channels, gets {}",
                            b.channels(),
                            got
                        ))?;
                    }
                    for (t, label) in [
                        (&b.beta, "beta"),
                        (&b.running_mean, "running_mean"),
                        (&b.running_var, "running_var"),
                    ] {
                        if t.shape() != [b.channels()] {
                            fail(format!(
                                "{} length {:?} vs {} channels",
                                label,
                                t.shape(),
                                b.channels()
                            ))?;
                        }
                    }
                }
                NodeKind::Dense(d) => {
                    let got = self.out_channels(node.inputs[0]);
                    if d.weight.shape()[1] != got {
                        fail(format!(
                            "dense expects {} inputs, gets {}",
                            d.weight.shape()[1],
                            got
                        ))?;
                    }
                }
                NodeKind::Relu
                | NodeKind::MaxPool { .. }
                | NodeKind::GlobalAvgPool
                | NodeKind::Concat => {
                    if node.inputs.is_empty() || node.inputs.iter().any(|i| *i >= idx) {
                        fail("inputs must precede the node".into())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn count_stats(&self) -> ModelStats {
        let mut filters = 0;
        let mut learnables = 0;
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Conv(c) => {
                    filters += c.filters();
                    learnables += c.weight.elements() + c.bias.elements();
                }
                NodeKind::BatchNorm(b) => {
                    learnables += b.gamma.elements() + b.beta.elements();
                }
                NodeKind::Dense(d) => {
                    learnables += d.weight.elements() + d.bias.elements();
                }
                _ => {}
            }
        }
        ModelStats {
            total_filters: filters,
            learnables,
            embedding_dim: self.embedding_dim(),
            model_bytes: crate::checkpoint::encoded_size(self),
        }
    }

    /// Canonical parameter enumeration: node order, then slot order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::Conv(_) => {
                    refs.push(ParamRef {
                        node: idx,
                        slot: ParamSlot::ConvWeight,
                    });
                    refs.push(ParamRef {
                        node: idx,
                        slot: ParamSlot::ConvBias,
                    });
                }
                NodeKind::BatchNorm(_) => {
                    refs.push(ParamRef {
                        node: idx,
                        slot: ParamSlot::BnGamma,
                    });
                    refs.push(ParamRef {
                        node: idx,
                        slot: ParamSlot::BnBeta,
                    });
                }
                NodeKind::Dense(_) => {
                    refs.push(ParamRef {
                        node: idx,
                        slot: ParamSlot::DenseWeight,
                    });
                    refs.push(ParamRef {
                        node: idx,
                        slot: ParamSlot::DenseBias,
                    });
                }
                _ => {}
            }
        }
        refs
    }

    pub fn param(&self, r: ParamRef) -> &Tensor<f32> {
        match (&self.nodes[r.node].kind, r.slot) {
            (NodeKind::Conv(c), ParamSlot::ConvWeight) => &c.weight,
            (NodeKind::Conv(c), ParamSlot::ConvBias) => &c.bias,
            (NodeKind::BatchNorm(b), ParamSlot::BnGamma) => &b.gamma,
            (NodeKind::BatchNorm(b), ParamSlot::BnBeta) => &b.beta,
            (NodeKind::Dense(d), ParamSlot::DenseWeight) => &d.weight,
            (NodeKind::Dense(d), ParamSlot::DenseBias) => &d.bias,
            _ => panic!("param slot does not match node kind"),
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> &mut Tensor<f32> {
        match (&mut self.nodes[r.node].kind, r.slot) {
            (NodeKind::Conv(c), ParamSlot::ConvWeight) => &mut c.weight,
            (NodeKind::Conv(c), ParamSlot::ConvBias) => &mut c.bias,
            (NodeKind::BatchNorm(b), ParamSlot::BnGamma) => &mut b.gamma,
            (NodeKind::BatchNorm(b), ParamSlot::BnBeta) => &mut b.beta,
            (NodeKind::Dense(d), ParamSlot::DenseWeight) => &mut d.weight,
            (NodeKind::Dense(d), ParamSlot::DenseBias) => &mut d.bias,
            _ => panic!("param slot does not match node kind"),
        }
    }
}

/// Build a model from an architecture spec. Weights come from `rng`, so a
/// fixed seed reproduces the model bit for bit.
pub fn build_arch(spec: &ArchSpec, rng: &mut Rng) -> ModelGraph {
    let mut g = ModelGraph::new(spec.input_channels);
    let mut cursor = 0usize;
    for (name, block) in &spec.blocks {
        cursor = match block {
            BlockSpec::Conv {
                filters,
                kernel,
                stride,
                pad,
            } => g.add_conv_bn_relu(name, cursor, *filters, *kernel, *stride, *pad, rng),
            BlockSpec::MaxPool { kernel, stride } => g.add_maxpool(name, cursor, *kernel, *stride),
            BlockSpec::Fire(f) => g.add_fire(name, cursor, *f, rng),
        };
    }
    cursor = g.add_conv_bn_relu("embed", cursor, spec.embed_filters, 1, 1, 0, rng);
    cursor = g.add_global_avg_pool("gap", cursor);
    g.add_dense("fc", cursor, spec.num_classes, rng);
    g
}

pub fn build_full_config(num_classes: usize, rng: &mut Rng) -> ModelGraph {
    build_arch(&full_arch(num_classes), rng)
}

pub fn build_micro_config(
    num_classes: usize,
    width_divisor: usize,
    rng: &mut Rng,
) -> Result<ModelGraph> {
    Ok(build_arch(&micro_arch(num_classes, width_divisor)?, rng))
}

/// Channels to silence, addressed by conv node index.
pub type Ablation = (usize, usize); // (conv node, filter index)

/// Output of an inference pass.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub logits: Tensor<f32>,
    pub embedding: Tensor<f32>,
}

/// For each ablated conv, the relu node where its channel is forced to zero
/// (the end of its conv -> batchnorm -> relu chain).
fn ablation_sites(model: &ModelGraph, ablations: &[Ablation]) -> Result<Vec<(usize, usize)>> {
    let mut sites = Vec::with_capacity(ablations.len());
    for (conv, filter) in ablations {
        let mut at = *conv;
        loop {
            let next = model.consumers(at).into_iter().find(|i| {
                matches!(
                    model.nodes[*i].kind,
                    NodeKind::BatchNorm(_) | NodeKind::Relu
                )
            });
            match next {
                Some(i) => {
                    let is_relu = matches!(model.nodes[i].kind, NodeKind::Relu);
                    at = i;
                    if is_relu {
                        break;
                    }
                }
                None => {
                    return Err(Error::UnresolvableWiring {
                        layer: model.nodes[*conv].name.clone(),
                        detail: "no relu follows this conv; cannot ablate".into(),
                    })
                }
            }
        }
        sites.push((at, *filter));
    }
    Ok(sites)
}

impl ModelGraph {
    /// Inference pass in eval mode (batchnorm uses running statistics).
    /// `ablations` silences the listed conv channels at their post-relu
    /// activations, the functional stand-in for structural removal.
    pub fn forward_eval(&self, x: &Tensor<f32>, ablations: &[Ablation]) -> Result<EvalOutput> {
        let sites = ablation_sites(self, ablations)?;
        let mut vals: Vec<Option<Tensor<f32>>> = vec![None; self.nodes.len()];
        let mut embedding = None;
        for (idx, node) in self.nodes.iter().enumerate() {
            let arg = |i: usize| -> &Tensor<f32> {
                vals[node.inputs[i]].as_ref().expect("topological order")
            };
            let out = match &node.kind {
                NodeKind::Input { channels } => {
                    let (_, c, _, _) = x.dims4("forward")?;
                    if c != *channels {
                        return Err(Error::ChannelMismatch {
                            layer: node.name.clone(),
                            expected: *channels,
                            actual: c,
                        });
                    }
                    x.clone()
                }
                NodeKind::Conv(p) => {
                    ops::conv2d_forward(arg(0), &p.weight, &p.bias, p.stride, p.pad)
                        .map_err(|e| e.with_layer(&node.name))?
                }
                NodeKind::BatchNorm(p) => ops::batchnorm_eval_forward(
                    arg(0),
                    &p.gamma,
                    &p.beta,
                    &p.running_mean,
                    &p.running_var,
                    p.eps,
                )
                .map_err(|e| e.with_layer(&node.name))?,
                NodeKind::Relu => {
                    let mut y = ops::relu_forward(arg(0));
                    for (site, filter) in &sites {
                        if *site == idx {
                            zero_channel(&mut y, *filter);
                        }
                    }
                    y
                }
                NodeKind::MaxPool { kernel, stride } => {
                    ops::maxpool_forward(arg(0), *kernel, *stride)?.0
                }
                NodeKind::Concat => ops::concat_channels_forward(arg(0), arg(1))?,
                NodeKind::GlobalAvgPool => {
                    let y = ops::global_avg_pool_forward(arg(0))?;
                    embedding = Some(y.clone());
                    y
                }
                NodeKind::Dense(p) => ops::dense_forward(arg(0), &p.weight, &p.bias)
                    .map_err(|e| e.with_layer(&node.name))?,
            };
            vals[idx] = Some(out);
        }
        let logits = vals.pop().flatten().expect("graph has nodes");
        Ok(EvalOutput {
            logits,
            embedding: embedding.ok_or_else(|| Error::UnresolvableWiring {
                layer: "gap".into(),
                detail: "graph has no global average pooling node".into(),
            })?,
        })
    }

    /// Training pass through a gradient tape in train mode. Batchnorm
    /// running statistics are updated in place. Returns the loss value id and
    /// the tape binding of every parameter.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<f32>,
        x: Tensor<f32>,
        labels: &[usize],
    ) -> Result<(ValId, Vec<(ParamRef, ValId)>)> {
        let mut vals: Vec<Option<ValId>> = vec![None; self.nodes.len()];
        let mut bindings = Vec::new();
        let n_nodes = self.nodes.len();
        for idx in 0..n_nodes {
            let inputs = self.nodes[idx].inputs.clone();
            let name = self.nodes[idx].name.clone();
            let arg =
                |vals: &[Option<ValId>], i: usize| vals[inputs[i]].expect("topological order");
            let out = match &mut self.nodes[idx].kind {
                NodeKind::Input { channels } => {
                    let (_, c, _, _) = x.dims4("forward")?;
                    if c != *channels {
                        return Err(Error::ChannelMismatch {
                            layer: name,
                            expected: *channels,
                            actual: c,
                        });
                    }
                    tape.input(x.clone())
                }
                NodeKind::Conv(p) => {
                    let w = tape.param(p.weight.clone());
                    let b = tape.param(p.bias.clone());
                    bindings.push((
                        ParamRef {
                            node: idx,
                            slot: ParamSlot::ConvWeight,
                        },
                        w,
                    ));
                    bindings.push((
                        ParamRef {
                            node: idx,
                            slot: ParamSlot::ConvBias,
                        },
                        b,
                    ));
                    tape.conv2d(arg(&vals, 0), w, b, p.stride, p.pad)
                        .map_err(|e| e.with_layer(&name))?
                }
                NodeKind::BatchNorm(p) => {
                    let gamma = tape.param(p.gamma.clone());
                    let beta = tape.param(p.beta.clone());
                    bindings.push((
                        ParamRef {
                            node: idx,
                            slot: ParamSlot::BnGamma,
                        },
                        gamma,
                    ));
                    bindings.push((
                        ParamRef {
                            node: idx,
                            slot: ParamSlot::BnBeta,
                        },
                        beta,
                    ));
                    let (y, mean, var) = tape
                        .batchnorm_train(arg(&vals, 0), gamma, beta, p.eps)
                        .map_err(|e| e.with_layer(&name))?;
                    let m = p.momentum;
                    for (r, b) in p.running_mean.data_mut().iter_mut().zip(mean.data()) {
                        *r = (1.0 - m) * *r + m * *b;
                    }
                    for (r, b) in p.running_var.data_mut().iter_mut().zip(var.data()) {
                        *r = (1.0 - m) * *r + m * *b;
                    }
                    y
                }
                NodeKind::Relu => tape.relu(arg(&vals, 0)),
                NodeKind::MaxPool { kernel, stride } => {
                    tape.maxpool(arg(&vals, 0), *kernel, *stride)?
                }
                NodeKind::Concat => tape.concat_channels(arg(&vals, 0), arg(&vals, 1))?,
                NodeKind::GlobalAvgPool => tape.global_avg_pool(arg(&vals, 0))?,
                NodeKind::Dense(p) => {
                    let w = tape.param(p.weight.clone());
                    let b = tape.param(p.bias.clone());
                    bindings.push((
                        ParamRef {
                            node: idx,
                            slot: ParamSlot::DenseWeight,
                        },
                        w,
                    ));
                    bindings.push((
                        ParamRef {
                            node: idx,
                            slot: ParamSlot::DenseBias,
                        },
                        b,
                    ));
                    tape.dense(arg(&vals, 0), w, b)
                        .map_err(|e| e.with_layer(&name))?
                }
            };
            vals[idx] = Some(out);
        }
        let logits = vals[n_nodes - 1].expect("graph has nodes");
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok((loss, bindings))
    }

    /// Refresh batchnorm running statistics from data without touching
    /// trainable parameters (optional post-surgery recalibration).
    pub fn recalibrate_bn(&mut self, batches: &[Tensor<f32>]) -> Result<()> {
        for batch in batches {
            let mut vals: Vec<Option<Tensor<f32>>> = vec![None; self.nodes.len()];
            let n_nodes = self.nodes.len();
            for idx in 0..n_nodes {
                let inputs = self.nodes[idx].inputs.clone();
                let prev = |vals: &[Option<Tensor<f32>>], i: usize| -> Tensor<f32> {
                    vals[inputs[i]].clone().expect("topological order")
                };
                let out = match &mut self.nodes[idx].kind {
                    NodeKind::Input { .. } => batch.clone(),
                    NodeKind::Conv(p) => {
                        ops::conv2d_forward(&prev(&vals, 0), &p.weight, &p.bias, p.stride, p.pad)?
                    }
                    NodeKind::BatchNorm(p) => {
                        let (y, stats) = ops::batchnorm_train_forward(
                            &prev(&vals, 0),
                            &p.gamma,
                            &p.beta,
                            p.eps,
                        )?;
                        let m = p.momentum;
                        for (r, b) in p.running_mean.data_mut().iter_mut().zip(stats.mean.data()) {
                            *r = (1.0 - m) * *r + m * *b;
                        }
                        for (r, b) in p.running_var.data_mut().iter_mut().zip(stats.var.data()) {
                            *r = (1.0 - m) * *r + m * *b;
                        }
                        y
                    }
                    NodeKind::Relu => ops::relu_forward(&prev(&vals, 0)),
                    NodeKind::MaxPool { kernel, stride } => {
                        ops::maxpool_forward(&prev(&vals, 0), *kernel, *stride)?.0
                    }
                    NodeKind::Concat => {
                        ops::concat_channels_forward(&prev(&vals, 0), &prev(&vals, 1))?
                    }
                    NodeKind::GlobalAvgPool => ops::global_avg_pool_forward(&prev(&vals, 0))?,
                    NodeKind::Dense(p) => ops::dense_forward(&prev(&vals, 0), &p.weight, &p.bias)?,
                };
                vals[idx] = Some(out);
            }
        }
        Ok(())
    }
}

fn zero_channel(t: &mut Tensor<f32>, channel: usize) {
    let shape = t.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    debug_assert!(channel < c);
    let plane = h * w;
    for img in 0..n {
        let base = (img * c + channel) * plane;
        for v in &mut t.data_mut()[base..base + plane] {
            *v = 0.0;
        }
    }
}
