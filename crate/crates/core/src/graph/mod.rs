//! Model graphs: a small static-DAG executor for the denoising networks.
//!
//! A [`ModelGraph`] is a topologically ordered list of nodes (convolutions,
//! instance norms, ReLUs, bilinear upsamples, sums, concatenations) plus a
//! flat parameter store. Forward execution walks the list once; with
//! recording enabled it returns a [`Tape`] that the backward pass consumes to
//! produce one gradient per parameter. Fan-out is handled naturally: a node
//! feeding several consumers receives the sum of their gradients.
//!
//! The tape is tied to the graph it came from via a configuration hash, so
//! replaying a stale tape against a different graph fails loudly instead of
//! producing garbage gradients.

pub mod hrnet;
pub mod unet;

pub use hrnet::{build_hrnet, HrnetConfig};
pub use unet::{build_unet, UnetConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    bilinear_upsample, bilinear_upsample_backward, conv2d_backward, conv2d_forward,
    instance_norm_backward, instance_norm_forward, relu_backward, relu_forward,
    InstanceNormStats,
};
use crate::rng::{stream, StreamTag};
use crate::tensor::{DType, Shape4, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

/// Operation performed by one graph node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    /// The graph input; exactly one per graph, always node 0.
    Input,
    Conv {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        gamma: ParamId,
        beta: ParamId,
        eps: f64,
    },
    Relu,
    /// Bilinear upsample by an integer factor.
    Upsample { factor: usize },
    /// Elementwise sum of all inputs (equal shapes).
    Sum,
    /// Channel concatenation of all inputs (equal batch/spatial dims).
    Concat,
}

/// One node: operation, upstream node ids, and a diagnostic name.
#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
}

/// Flat parameter store; insertion order is the canonical parameter order
/// used by optimizers, checkpoints, and gradient stores.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }
}

/// Which architecture a graph implements; drives checkpoint compatibility.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchDescriptor {
    Hrnet(HrnetConfig),
    Unet(UnetConfig),
    /// Free-form graphs (tests, experiments); the string is hashed.
    Custom(String),
}

impl ArchDescriptor {
    /// Canonical text form, the input of the configuration hash.
    pub fn canonical_string(&self) -> String {
        match self {
            ArchDescriptor::Hrnet(c) => format!(
                "hrnet;branches={};channels={};stages={};convs_per_stage={};in_eps={:e}",
                c.branches,
                c.channels
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                c.stages,
                c.convs_per_stage,
                c.in_eps
            ),
            ArchDescriptor::Unet(c) => format!(
                "unet;input_size={};init_channels={};max_channels={};in_eps={:e}",
                c.input_size, c.init_channels, c.max_channels, c.in_eps
            ),
            ArchDescriptor::Custom(s) => format!("custom;{s}"),
        }
    }
}

/// Structural metadata the executor needs at run time.
#[derive(Debug, Clone)]
pub struct GraphMeta {
    pub arch: ArchDescriptor,
    /// Input height/width must be divisible by this (1 = no constraint).
    pub input_divisor: usize,
    /// Exact required input spatial size, if the architecture demands one.
    pub fixed_input: Option<(usize, usize)>,
    /// Required input channel count.
    pub input_channels: usize,
}

/// A static computation graph with its parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    params: ParamStore,
    meta: GraphMeta,
}

/// FNV-1a over the canonical architecture string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Saved forward state for one backward pass.
#[derive(Debug)]
pub struct Tape {
    values: Vec<Tensor>,
    norm_stats: Vec<Option<InstanceNormStats>>,
    graph_hash: u64,
}

impl Tape {
    /// Value produced by `node` during the recorded forward pass.
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }
}

/// Gradients from one backward pass: one tensor per parameter (aligned with
/// [`ParamStore`] order) plus the gradient at the graph input.
#[derive(Debug)]
pub struct GradStore {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

fn at_node(name: &str, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("node '{name}': {m}")),
        Error::Dtype(m) => Error::Dtype(format!("node '{name}': {m}")),
        Error::Config(m) => Error::Config(format!("node '{name}': {m}")),
        Error::Contract(m) => Error::Contract(format!("node '{name}': {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("node '{name}': {m}")),
        other => other,
    }
}

impl ModelGraph {
    /// Assemble and validate a graph. Nodes must be topologically ordered
    /// (each node only consumes earlier nodes), node 0 must be the single
    /// `Input`, the last node is the output, and all parameters must share
    /// one dtype.
    pub fn from_parts(nodes: Vec<Node>, params: ParamStore, meta: GraphMeta) -> Result<ModelGraph> {
        if nodes.is_empty() {
            return Err(Error::Config("graph has no nodes".into()));
        }
        if !matches!(nodes[0].op, NodeOp::Input) || !nodes[0].inputs.is_empty() {
            return Err(Error::Config("graph node 0 must be the input node".into()));
        }
        let mut dtype: Option<DType> = None;
        for t in params.tensors() {
            match dtype {
                None => dtype = Some(t.dtype()),
                Some(d) if d != t.dtype() => {
                    return Err(Error::Dtype(
                        "graph parameters must share one dtype".into(),
                    ))
                }
                _ => {}
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if id > 0 && matches!(node.op, NodeOp::Input) {
                return Err(Error::Config(format!(
                    "node '{}': graphs have exactly one input node",
                    node.name
                )));
            }
            for &src in &node.inputs {
                if src >= id {
                    return Err(Error::Config(format!(
                        "node '{}' consumes node {src} which does not precede it",
                        node.name
                    )));
                }
            }
            let arity_ok = match node.op {
                NodeOp::Input => node.inputs.is_empty(),
                NodeOp::Sum | NodeOp::Concat => !node.inputs.is_empty(),
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Config(format!(
                    "node '{}' has {} inputs, which its operation does not accept",
                    node.name,
                    node.inputs.len()
                )));
            }
            let pids: &[ParamId] = match &node.op {
                NodeOp::Conv { weight, bias, .. } => &[*weight, *bias],
                NodeOp::InstanceNorm { gamma, beta, .. } => &[*gamma, *beta],
                _ => &[],
            };
            for &pid in pids {
                if pid >= params.len() {
                    return Err(Error::Config(format!(
                        "node '{}' references missing parameter {pid}",
                        node.name
                    )));
                }
            }
            if let NodeOp::Upsample { factor } = node.op {
                if factor == 0 {
                    return Err(Error::Config(format!(
                        "node '{}': upsample factor must be >= 1",
                        node.name
                    )));
                }
            }
        }
        if meta.input_divisor == 0 {
            return Err(Error::Config("input divisor must be >= 1".into()));
        }
        Ok(ModelGraph {
            nodes,
            params,
            meta,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.meta.arch
    }

    /// Hash of the canonical architecture description. Tapes and checkpoints
    /// carry this to detect mismatched pairings.
    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.meta.arch.canonical_string().as_bytes())
    }

    /// Total number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    /// Dtype of the parameters (all share one by construction); `None` for
    /// parameter-free graphs.
    pub fn param_dtype(&self) -> Option<DType> {
        self.params.tensors().first().map(|t| t.dtype())
    }

    /// Dtype of the parameters, defaulting to f32 for parameter-free graphs.
    pub fn dtype(&self) -> DType {
        self.param_dtype().unwrap_or(DType::F32)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let sh = x.shape();
        if sh.c != self.meta.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.meta.input_channels, sh.c
            )));
        }
        if let Some(d) = self.param_dtype() {
            if x.dtype() != d {
                return Err(Error::Dtype(format!(
                    "model parameters are {d} but input is {}",
                    x.dtype()
                )));
            }
        }
        if let Some((h, w)) = self.meta.fixed_input {
            if sh.h != h || sh.w != w {
                return Err(Error::Config(format!(
                    "model requires {h}x{w} inputs, got {}x{}",
                    sh.h, sh.w
                )));
            }
        }
        let d = self.meta.input_divisor;
        if sh.h % d != 0 || sh.w % d != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} is not divisible by {d}",
                sh.h, sh.w
            )));
        }
        Ok(())
    }

    /// Run the graph. With `record` a [`Tape`] for backpropagation is
    /// returned alongside the output.
    pub fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Tape>)> {
        self.check_input(x)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut stats: Vec<Option<InstanceNormStats>> = if record {
            Vec::with_capacity(self.nodes.len())
        } else {
            Vec::new()
        };
        for node in &self.nodes {
            let mut node_stats = None;
            let value = match &node.op {
                NodeOp::Input => x.clone(),
                NodeOp::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => conv2d_forward(
                    &values[node.inputs[0]],
                    &self.params.values[*weight],
                    &self.params.values[*bias],
                    *stride,
                    *pad,
                )
                .map_err(|e| at_node(&node.name, e))?,
                NodeOp::InstanceNorm { gamma, beta, eps } => {
                    let (y, s) = instance_norm_forward(
                        &values[node.inputs[0]],
                        &self.params.values[*gamma],
                        &self.params.values[*beta],
                        *eps,
                    )
                    .map_err(|e| at_node(&node.name, e))?;
                    node_stats = Some(s);
                    y
                }
                NodeOp::Relu => relu_forward(&values[node.inputs[0]]),
                NodeOp::Upsample { factor } => {
                    let src = &values[node.inputs[0]];
                    let sh = src.shape();
                    bilinear_upsample(src, sh.h * factor, sh.w * factor)
                        .map_err(|e| at_node(&node.name, e))?
                }
                NodeOp::Sum => {
                    let mut acc = values[node.inputs[0]].clone();
                    for &src in &node.inputs[1..] {
                        acc = acc
                            .add(&values[src])
                            .map_err(|e| at_node(&node.name, e))?;
                    }
                    acc
                }
                NodeOp::Concat => {
                    let parts: Vec<&Tensor> =
                        node.inputs.iter().map(|&i| &values[i]).collect();
                    Tensor::concat_channels(&parts).map_err(|e| at_node(&node.name, e))?
                }
            };
            values.push(value);
            if record {
                stats.push(node_stats);
            }
        }
        let output = values.last().expect("graph has nodes").clone();
        let tape = record.then(|| Tape {
            values,
            norm_stats: stats,
            graph_hash: self.config_hash(),
        });
        Ok((output, tape))
    }

    /// Backpropagate `grad_out` (gradient at the graph output) through the
    /// recorded tape. Returns gradients for every parameter and the input.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<GradStore> {
        if tape.graph_hash != self.config_hash() || tape.values.len() != self.nodes.len() {
            return Err(Error::Contract(
                "tape does not belong to this graph (stale or mismatched tape)".into(),
            ));
        }
        let out_shape = tape.values.last().expect("graph has nodes").shape();
        if grad_out.shape() != out_shape {
            return Err(Error::Shape(format!(
                "backward: output has shape {out_shape} but gradient has {}",
                grad_out.shape()
            )));
        }
        let out_dtype = tape.values.last().expect("graph has nodes").dtype();
        if grad_out.dtype() != out_dtype {
            return Err(Error::Dtype(format!(
                "backward: recorded output is {out_dtype} but gradient is {}",
                grad_out.dtype()
            )));
        }

        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        *node_grads.last_mut().expect("graph has nodes") = Some(grad_out.clone());
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];

        let mut accumulate_param = |pid: ParamId, g: Tensor| -> Result<()> {
            param_grads[pid] = Some(match param_grads[pid].take() {
                None => g,
                Some(acc) => acc.add(&g)?,
            });
            Ok(())
        };

        for id in (0..self.nodes.len()).rev() {
            let Some(grad) = node_grads[id].take() else {
                continue; // node does not influence the output
            };
            let node = &self.nodes[id];
            let send = |node_grads: &mut Vec<Option<Tensor>>, dst: NodeId, g: Tensor| -> Result<()> {
                node_grads[dst] = Some(match node_grads[dst].take() {
                    None => g,
                    Some(acc) => acc.add(&g)?,
                });
                Ok(())
            };
            match &node.op {
                NodeOp::Input => {
                    node_grads[id] = Some(grad); // keep for the grad store
                }
                NodeOp::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let g = conv2d_backward(
                        &tape.values[node.inputs[0]],
                        &self.params.values[*weight],
                        *stride,
                        *pad,
                        &grad,
                    )
                    .map_err(|e| at_node(&node.name, e))?;
                    let mut it = g.grad_params.into_iter();
                    accumulate_param(*weight, it.next().expect("weight grad").1)?;
                    accumulate_param(*bias, it.next().expect("bias grad").1)?;
                    send(&mut node_grads, node.inputs[0], g.grad_input)?;
                }
                NodeOp::InstanceNorm { gamma, beta, .. } => {
                    let stats = tape.norm_stats[id]
                        .as_ref()
                        .ok_or_else(|| {
                            Error::Contract(format!(
                                "node '{}': tape holds no saved statistics",
                                node.name
                            ))
                        })?;
                    let g = instance_norm_backward(
                        &tape.values[node.inputs[0]],
                        &self.params.values[*gamma],
                        stats,
                        &grad,
                    )
                    .map_err(|e| at_node(&node.name, e))?;
                    let mut it = g.grad_params.into_iter();
                    accumulate_param(*gamma, it.next().expect("gamma grad").1)?;
                    accumulate_param(*beta, it.next().expect("beta grad").1)?;
                    send(&mut node_grads, node.inputs[0], g.grad_input)?;
                }
                NodeOp::Relu => {
                    let gx = relu_backward(&tape.values[node.inputs[0]], &grad)
                        .map_err(|e| at_node(&node.name, e))?;
                    send(&mut node_grads, node.inputs[0], gx)?;
                }
                NodeOp::Upsample { .. } => {
                    let in_sh = tape.values[node.inputs[0]].shape();
                    let gx = bilinear_upsample_backward(&grad, in_sh.h, in_sh.w)
                        .map_err(|e| at_node(&node.name, e))?
                        .grad_input;
                    send(&mut node_grads, node.inputs[0], gx)?;
                }
                NodeOp::Sum => {
                    for &src in &node.inputs {
                        send(&mut node_grads, src, grad.clone())?;
                    }
                }
                NodeOp::Concat => {
                    let mut offset = 0;
                    for &src in &node.inputs {
                        let c = tape.values[src].shape().c;
                        let g = grad
                            .slice_channels(offset, c)
                            .map_err(|e| at_node(&node.name, e))?;
                        send(&mut node_grads, src, g)?;
                        offset += c;
                    }
                }
            }
        }

        let input_grad = node_grads[0]
            .take()
            .unwrap_or(Tensor::zeros(tape.values[0].shape(), self.dtype())?);
        let mut params = Vec::with_capacity(self.params.len());
        for (pid, g) in param_grads.into_iter().enumerate() {
            params.push(match g {
                Some(g) => g,
                None => Tensor::zeros(self.params.values[pid].shape(), self.dtype())?,
            });
        }
        Ok(GradStore {
            params,
            input: input_grad,
        })
    }
}

/// Incremental graph assembly used by the architecture builders.
pub(crate) struct GraphBuilder {
    nodes: Vec<Node>,
    names: Vec<String>,
    values: Vec<Tensor>,
    dtype: DType,
    seed: u64,
}

impl GraphBuilder {
    pub(crate) fn new(seed: u64, dtype: DType) -> GraphBuilder {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                op: NodeOp::Input,
                inputs: vec![],
            }],
            names: Vec::new(),
            values: Vec::new(),
            dtype,
            seed,
        }
    }

    pub(crate) fn input(&self) -> NodeId {
        0
    }

    fn push_node(&mut self, name: String, op: NodeOp, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { name, op, inputs });
        self.nodes.len() - 1
    }

    fn push_param(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    fn init_rng(&self) -> ChaCha8Rng {
        stream(self.seed, StreamTag::Init, self.values.len() as u64)
    }

    /// Kaiming-uniform conv weight: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    fn kaiming_weight(&mut self, c_out: usize, c_in: usize, k: usize) -> Tensor {
        let mut rng = self.init_rng();
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let data: Vec<f64> = (0..c_out * c_in * k * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor::from_vec(Shape4::new(c_out, c_in, k, k), data)
            .expect("weight shape is positive")
            .cast(self.dtype)
    }

    /// Convolution node with freshly initialized weight (Kaiming) and zero bias.
    pub(crate) fn conv(
        &mut self,
        name: &str,
        src: NodeId,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let weight_t = self.kaiming_weight(c_out, c_in, k);
        let weight = self.push_param(format!("{name}.weight"), weight_t);
        let bias_t = Tensor::zeros((1, c_out, 1, 1), self.dtype).expect("bias shape");
        let bias = self.push_param(format!("{name}.bias"), bias_t);
        self.push_node(
            name.to_string(),
            NodeOp::Conv {
                weight,
                bias,
                stride,
                pad,
            },
            vec![src],
        )
    }

    /// Instance-norm node with gamma = 1, beta = 0.
    pub(crate) fn instance_norm(&mut self, name: &str, src: NodeId, c: usize, eps: f64) -> NodeId {
        let gamma_t = Tensor::filled((1, c, 1, 1), 1.0, self.dtype).expect("gamma shape");
        let gamma = self.push_param(format!("{name}.gamma"), gamma_t);
        let beta_t = Tensor::zeros((1, c, 1, 1), self.dtype).expect("beta shape");
        let beta = self.push_param(format!("{name}.beta"), beta_t);
        self.push_node(
            name.to_string(),
            NodeOp::InstanceNorm { gamma, beta, eps },
            vec![src],
        )
    }

    pub(crate) fn relu(&mut self, name: &str, src: NodeId) -> NodeId {
        self.push_node(name.to_string(), NodeOp::Relu, vec![src])
    }

    /// The recurring "convolutional layer" triple: conv + instance norm + ReLU.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv_in_relu(
        &mut self,
        name: &str,
        src: NodeId,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        eps: f64,
    ) -> NodeId {
        let c = self.conv(&format!("{name}.conv"), src, c_in, c_out, k, stride, pad);
        let n = self.instance_norm(&format!("{name}.norm"), c, c_out, eps);
        self.relu(&format!("{name}.relu"), n)
    }

    pub(crate) fn upsample(&mut self, name: &str, src: NodeId, factor: usize) -> NodeId {
        self.push_node(name.to_string(), NodeOp::Upsample { factor }, vec![src])
    }

    pub(crate) fn sum(&mut self, name: &str, srcs: Vec<NodeId>) -> NodeId {
        self.push_node(name.to_string(), NodeOp::Sum, srcs)
    }

    pub(crate) fn concat(&mut self, name: &str, srcs: Vec<NodeId>) -> NodeId {
        self.push_node(name.to_string(), NodeOp::Concat, srcs)
    }

    pub(crate) fn finish(self, meta: GraphMeta) -> Result<ModelGraph> {
        ModelGraph::from_parts(
            self.nodes,
            ParamStore {
                names: self.names,
                values: self.values,
            },
            meta,
        )
    }
}

/// Public constructor for hand-assembled graphs (tests, experiments).
pub fn param_store(named: Vec<(String, Tensor)>) -> ParamStore {
    let (names, values) = named.into_iter().unzip();
    ParamStore { names, values }
}

/// Finite-difference verification of whole models.
pub mod fdcheck {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    /// Sign pattern of every ReLU input: the loss is only differentiable
    /// while this pattern is constant, so finite differences are compared
    /// only where the perturbation does not flip any activation.
    fn relu_mask(model: &ModelGraph, tape: &Tape) -> Result<Vec<bool>> {
        let mut mask = Vec::new();
        for node in model.nodes() {
            if matches!(node.op, NodeOp::Relu) {
                let input = tape.value(node.inputs[0]);
                mask.extend(
                    input
                        .try_slice::<f64>("relu input")?
                        .iter()
                        .map(|&v| v > 0.0),
                );
            }
        }
        Ok(mask)
    }

    /// Max relative error between analytic and central-difference gradients
    /// of the probe loss `sum(r * model(x))` over all parameter elements
    /// whose perturbation keeps the model inside one smooth region (ReLU
    /// kink crossings are skipped; the check fails if 20% or more of the
    /// elements had to be skipped). The model must hold f64 parameters.
    pub fn fd_check_model(model: &ModelGraph, x: &Tensor, step: f64) -> Result<f64> {
        if model.dtype() != DType::F64 {
            return Err(Error::Contract(
                "fd_check_model needs an f64 model".into(),
            ));
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Contract(format!(
                "fd step must be positive and finite, got {step}"
            )));
        }
        let (y, tape) = model.forward(x, true)?;
        let tape = tape.expect("recording forward returns a tape");
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f_6465);
        let r_data: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = Tensor::from_vec(y.shape(), r_data)?;
        let grads = model.backward(&tape, &r)?;

        let mut work = model.clone();
        let mut max_err = 0.0f64;
        let mut total = 0usize;
        let mut skipped = 0usize;
        for pi in 0..model.params().len() {
            let len = model.params().tensors()[pi].len();
            for e in 0..len {
                let orig = work.params().tensors()[pi].try_slice::<f64>("param")?[e];
                let eval = |v: f64, work: &mut ModelGraph| -> Result<(f64, Vec<bool>)> {
                    work.params_mut().tensors_mut()[pi]
                        .as_mut_slice::<f64>()
                        .expect("f64 model")[e] = v;
                    let (y, tape) = work.forward(x, true)?;
                    let tape = tape.expect("recording forward returns a tape");
                    Ok((y.flat_dot(&r)?, relu_mask(work, &tape)?))
                };
                let (plus, mask_plus) = eval(orig + step, &mut work)?;
                let (minus, mask_minus) = eval(orig - step, &mut work)?;
                eval(orig, &mut work)?;
                total += 1;
                if mask_plus != mask_minus {
                    skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * step);
                let a = grads.params[pi].try_slice::<f64>("grad")?[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                max_err = max_err.max(err);
            }
        }
        if skipped * 5 >= total {
            return Err(Error::Degenerate(format!(
                "too many kink crossings ({skipped}/{total}); check is not meaningful"
            )));
        }
        Ok(max_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn custom_meta() -> GraphMeta {
        GraphMeta {
            arch: ArchDescriptor::Custom("test".into()),
            input_divisor: 1,
            fixed_input: None,
            input_channels: 1,
        }
    }

    fn random_f64(shape: impl Into<Shape4>, seed: u64) -> Tensor {
        let shape = shape.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// input -> conv1 -> relu; input -> conv2; sum(relu, conv2).
    fn fanout_graph() -> ModelGraph {
        let w1 = random_f64((2, 1, 3, 3), 50);
        let b1 = random_f64((1, 2, 1, 1), 51);
        let w2 = random_f64((2, 1, 3, 3), 52);
        let b2 = random_f64((1, 2, 1, 1), 53);
        let params = param_store(vec![
            ("c1.weight".into(), w1),
            ("c1.bias".into(), b1),
            ("c2.weight".into(), w2),
            ("c2.bias".into(), b2),
        ]);
        let nodes = vec![
            Node {
                name: "input".into(),
                op: NodeOp::Input,
                inputs: vec![],
            },
            Node {
                name: "c1".into(),
                op: NodeOp::Conv {
                    weight: 0,
                    bias: 1,
                    stride: 1,
                    pad: 1,
                },
                inputs: vec![0],
            },
            Node {
                name: "r1".into(),
                op: NodeOp::Relu,
                inputs: vec![1],
            },
            Node {
                name: "c2".into(),
                op: NodeOp::Conv {
                    weight: 2,
                    bias: 3,
                    stride: 1,
                    pad: 1,
                },
                inputs: vec![0],
            },
            Node {
                name: "sum".into(),
                op: NodeOp::Sum,
                inputs: vec![2, 3],
            },
        ];
        ModelGraph::from_parts(nodes, params, custom_meta()).unwrap()
    }

    #[test]
    fn fanout_input_gradient_is_sum_of_consumer_gradients() {
        let g = fanout_graph();
        let x = random_f64((1, 1, 6, 6), 60);
        let (y, tape) = g.forward(&x, true).unwrap();
        let go = random_f64(y.shape(), 61);
        let grads = g.backward(tape.as_ref().unwrap(), &go).unwrap();

        // Recompute each consumer's input gradient independently.
        let w1 = &g.params().tensors()[0];
        let w2 = &g.params().tensors()[2];
        let b1 = &g.params().tensors()[1];
        let conv1 = conv2d_forward(&x, w1, b1, 1, 1).unwrap();
        let g_after_relu = relu_backward(&conv1, &go).unwrap();
        let gx1 = conv2d_backward(&x, w1, 1, 1, &g_after_relu)
            .unwrap()
            .grad_input;
        let gx2 = conv2d_backward(&x, w2, 1, 1, &go).unwrap().grad_input;
        let want = gx1.add(&gx2).unwrap();

        let diff = grads
            .input
            .sub(&want)
            .unwrap()
            .max_abs();
        assert!(diff < 1e-12, "fan-out gradient mismatch: {diff}");
    }

    #[test]
    fn backward_rejects_stale_tape() {
        let g1 = fanout_graph();
        let mut nodes2 = g1.nodes().to_vec();
        nodes2.truncate(3); // input -> c1 -> r1
        let params2 = param_store(vec![
            ("c1.weight".into(), g1.params().tensors()[0].clone()),
            ("c1.bias".into(), g1.params().tensors()[1].clone()),
        ]);
        let meta2 = GraphMeta {
            arch: ArchDescriptor::Custom("other".into()),
            ..custom_meta()
        };
        let g2 = ModelGraph::from_parts(nodes2, params2, meta2).unwrap();

        let x = random_f64((1, 1, 6, 6), 62);
        let (_, tape) = g1.forward(&x, true).unwrap();
        let go = random_f64((1, 2, 6, 6), 63);
        let err = g2.backward(tape.as_ref().unwrap(), &go).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn from_parts_validates_structure() {
        // Node consuming a later node.
        let nodes = vec![
            Node {
                name: "input".into(),
                op: NodeOp::Input,
                inputs: vec![],
            },
            Node {
                name: "r".into(),
                op: NodeOp::Relu,
                inputs: vec![2],
            },
            Node {
                name: "r2".into(),
                op: NodeOp::Relu,
                inputs: vec![0],
            },
        ];
        let err =
            ModelGraph::from_parts(nodes, param_store(vec![]), custom_meta()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        // Missing parameter reference.
        let nodes = vec![
            Node {
                name: "input".into(),
                op: NodeOp::Input,
                inputs: vec![],
            },
            Node {
                name: "c".into(),
                op: NodeOp::Conv {
                    weight: 0,
                    bias: 1,
                    stride: 1,
                    pad: 1,
                },
                inputs: vec![0],
            },
        ];
        let err =
            ModelGraph::from_parts(nodes, param_store(vec![]), custom_meta()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn forward_without_recording_returns_no_tape() {
        let g = fanout_graph();
        let x = random_f64((1, 1, 6, 6), 64);
        let (y1, tape) = g.forward(&x, false).unwrap();
        assert!(tape.is_none());
        let (y2, tape2) = g.forward(&x, true).unwrap();
        assert!(tape2.is_some());
        assert_eq!(y1, y2);
    }

    #[test]
    fn concat_backward_routes_channel_slices() {
        // input -> (relu, relu) -> concat; gradient must split back cleanly.
        let nodes = vec![
            Node {
                name: "input".into(),
                op: NodeOp::Input,
                inputs: vec![],
            },
            Node {
                name: "a".into(),
                op: NodeOp::Relu,
                inputs: vec![0],
            },
            Node {
                name: "b".into(),
                op: NodeOp::Relu,
                inputs: vec![0],
            },
            Node {
                name: "cat".into(),
                op: NodeOp::Concat,
                inputs: vec![1, 2],
            },
        ];
        let g = ModelGraph::from_parts(nodes, param_store(vec![]), custom_meta()).unwrap();
        let x = Tensor::filled((1, 1, 2, 2), 1.0, DType::F64).unwrap();
        let (y, tape) = g.forward(&x, true).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 2, 2, 2));
        let go = Tensor::from_vec(
            (1, 2, 2, 2),
            vec![1.0f64, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let grads = g.backward(tape.as_ref().unwrap(), &go).unwrap();
        // Both halves flow back to the single input and add up.
        assert_eq!(
            grads.input.to_f64_vec(),
            vec![11.0, 22.0, 33.0, 44.0]
        );
    }
}
