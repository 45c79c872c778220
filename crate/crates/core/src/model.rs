//! The AudioInceptionNeXt network.
//!
//! Stem (5x7 stride-2 conv, BN, ReLU, 3x3 stride-2 max pool), four stages of
//! multi-scale separable-kernel inverted-bottleneck blocks, global average
//! pool, linear head. Stages 2-4 open with a 1x1 stride-2 downsampling conv.
//!
//! Each block runs three depthwise branches (1xk then kx1, k in {3,11,21},
//! BN+ReLU after each), sums them, expands channels by 4 with a 1x1 conv,
//! applies ReLU, squeezes back with a 1x1 conv and a final BN whose gamma is
//! zero-initialized, and adds the block input back.
//!
//! Layer containers are generic over the element type so tests can rerun the
//! exact production wiring in f64 for gradient checks; the `Model` itself is
//! the f32 instantiation plus naming, persistence hooks, and policies.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    BnStatUpdate, ConvSpec, Element, Gradients, Graph, NodeId, SgdMomentum, Tensor,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_kernel: (usize, usize),
    pub stem_stride: (usize, usize),
    pub stem_out: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub expansion: usize,
    pub branch_kernels: Vec<usize>,
    pub downsample_stride: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            stem_kernel: (5, 7),
            stem_stride: (2, 2),
            stem_out: 64,
            stage_channels: [64, 128, 256, 512],
            stage_depths: [3, 4, 6, 3],
            expansion: 4,
            branch_kernels: vec![3, 11, 21],
            downsample_stride: 2,
            num_classes: 44,
        }
    }
}

impl ModelConfig {
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.stem_kernel.0 == 0 || self.stem_kernel.1 == 0 {
            return Err(Error::invalid("stem kernel extents must be positive"));
        }
        if self.stem_stride.0 == 0 || self.stem_stride.1 == 0 {
            return Err(Error::invalid("stem stride must be positive"));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("stage channels must be positive"));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::invalid("stage depths must be positive"));
        }
        if self.stem_out != self.stage_channels[0] {
            return Err(Error::invalid(format!(
                "stem_out {} must equal stage 1 channel count {} (stage 1 has no remapping conv)",
                self.stem_out, self.stage_channels[0]
            )));
        }
        if self.expansion == 0 {
            return Err(Error::invalid("expansion ratio must be at least 1"));
        }
        if self.branch_kernels.is_empty() {
            return Err(Error::invalid("at least one branch kernel required"));
        }
        if let Some(&k) = self.branch_kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::invalid(format!(
                "branch kernels must be odd and positive, got {k}"
            )));
        }
        if self.downsample_stride == 0 {
            return Err(Error::invalid("downsample stride must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        Ok(())
    }
}

/// Fan-based uniform weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U[-sqrt(6/fan_in), +sqrt(6/fan_in)]`
    HeUniform,
    /// `U[-sqrt(6/(fan_in+fan_out)), ...]`
    XavierUniform,
}

impl InitScheme {
    pub fn bound(&self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::HeUniform => (6.0 / fan_in as f64).sqrt(),
            InitScheme::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

/// Whether a named tensor is a trainable parameter or a BN running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    RunningStat,
}

/// Collects per-forward bookkeeping: imported trainable-parameter nodes (in
/// walk order) and pending running-stat updates from train-mode batch norms.
pub struct ForwardState<E: Element> {
    train: bool,
    param_nodes: Vec<NodeId>,
    bn_updates: Vec<(usize, BnStatUpdate<E>)>,
    bn_seen: usize,
}

impl<E: Element> ForwardState<E> {
    pub fn new(train: bool) -> Self {
        ForwardState {
            train,
            param_nodes: Vec::new(),
            bn_updates: Vec::new(),
            bn_seen: 0,
        }
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.param_nodes
    }
}

/// Positional reader over imported parameter node ids; the consumption order
/// in `wire` mirrors the emission order in `visit`.
pub struct Cursor<'a> {
    ids: &'a [NodeId],
    at: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(ids: &'a [NodeId]) -> Self {
        Cursor { ids, at: 0 }
    }

    fn next(&mut self) -> NodeId {
        let id = self.ids[self.at];
        self.at += 1;
        id
    }

    pub fn finished(&self) -> bool {
        self.at == self.ids.len()
    }
}

fn import_slots<E: Element>(
    g: &mut Graph<E>,
    slots: &[&Tensor<E>],
    state: &mut ForwardState<E>,
) -> Vec<NodeId> {
    slots
        .iter()
        .map(|t| {
            let id = g.leaf(t);
            if t.requires_grad() {
                state.param_nodes.push(id);
            }
            id
        })
        .collect()
}

fn ctx(what: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::InvalidArgument(m) => Error::invalid(format!("{what}: {m}")),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Layer containers

#[derive(Clone, Debug)]
pub struct ConvLayer<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub spec: ConvSpec,
}

impl<E: Element> ConvLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Self {
        let spec = ConvSpec::new(kernel, stride, pad).with_groups(groups);
        let weight = Tensor::zeros(vec![out_c, in_c / groups, kernel.0, kernel.1])
            .with_requires_grad(true);
        let bias = bias.then(|| Tensor::zeros(vec![out_c]).with_requires_grad(true));
        ConvLayer { weight, bias, spec }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R, scheme: InitScheme) {
        let s = self.weight.shape();
        let fan_in = s[1] * s[2] * s[3];
        let fan_out = s[0] * s[2] * s[3];
        let b = scheme.bound(fan_in, fan_out);
        for v in self.weight.data_mut() {
            *v = E::from_f64(rng.gen_range(-b..b));
        }
        if let Some(bias) = &mut self.bias {
            for v in bias.data_mut() {
                *v = E::zero();
            }
        }
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<E>, TensorRole)) {
        f(format!("{prefix}.weight"), &self.weight, TensorRole::Param);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b, TensorRole::Param);
        }
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'s mut Tensor<E>, TensorRole),
    ) {
        f(format!("{prefix}.weight"), &mut self.weight, TensorRole::Param);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b, TensorRole::Param);
        }
    }

    fn wire(&self, g: &mut Graph<E>, x: NodeId, cur: &mut Cursor) -> Result<NodeId> {
        let w = cur.next();
        let b = self.bias.as_ref().map(|_| cur.next());
        g.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BnLayer<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
    pub momentum: f64,
    pub frozen: bool,
}

impl<E: Element> BnLayer<E> {
    pub fn build(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::full(vec![channels], E::one()).with_requires_grad(true),
            beta: Tensor::zeros(vec![channels]).with_requires_grad(true),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], E::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            frozen: false,
        }
    }

    pub fn reset(&mut self, gamma_value: E) {
        self.gamma.data_mut().fill(gamma_value);
        self.beta.data_mut().fill(E::zero());
        self.running_mean.data_mut().fill(E::zero());
        self.running_var.data_mut().fill(E::one());
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<E>, TensorRole)) {
        f(format!("{prefix}.gamma"), &self.gamma, TensorRole::Param);
        f(format!("{prefix}.beta"), &self.beta, TensorRole::Param);
        f(format!("{prefix}.running_mean"), &self.running_mean, TensorRole::RunningStat);
        f(format!("{prefix}.running_var"), &self.running_var, TensorRole::RunningStat);
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'s mut Tensor<E>, TensorRole),
    ) {
        f(format!("{prefix}.gamma"), &mut self.gamma, TensorRole::Param);
        f(format!("{prefix}.beta"), &mut self.beta, TensorRole::Param);
        f(format!("{prefix}.running_mean"), &mut self.running_mean, TensorRole::RunningStat);
        f(format!("{prefix}.running_var"), &mut self.running_var, TensorRole::RunningStat);
    }

    fn wire(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        cur: &mut Cursor,
        state: &mut ForwardState<E>,
    ) -> Result<NodeId> {
        use crate::tensor::BnMode;
        let gamma = cur.next();
        let beta = cur.next();
        let mode = if !state.train {
            BnMode::Eval
        } else if self.frozen {
            BnMode::Frozen
        } else {
            BnMode::Train
        };
        let (y, update) = g.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean.data(),
            self.running_var.data(),
            mode,
            self.eps,
            self.momentum,
        )?;
        let index = state.bn_seen;
        state.bn_seen += 1;
        if let Some(u) = update {
            state.bn_updates.push((index, u));
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> LinearLayer<E> {
    pub fn build(din: usize, dout: usize) -> Self {
        LinearLayer {
            weight: Tensor::zeros(vec![dout, din]).with_requires_grad(true),
            bias: Tensor::zeros(vec![dout]).with_requires_grad(true),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R, scheme: InitScheme) {
        let (dout, din) = (self.weight.shape()[0], self.weight.shape()[1]);
        let b = scheme.bound(din, dout);
        for v in self.weight.data_mut() {
            *v = E::from_f64(rng.gen_range(-b..b));
        }
        self.bias.data_mut().fill(E::zero());
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<E>, TensorRole)) {
        f(format!("{prefix}.weight"), &self.weight, TensorRole::Param);
        f(format!("{prefix}.bias"), &self.bias, TensorRole::Param);
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'s mut Tensor<E>, TensorRole),
    ) {
        f(format!("{prefix}.weight"), &mut self.weight, TensorRole::Param);
        f(format!("{prefix}.bias"), &mut self.bias, TensorRole::Param);
    }

    fn wire(&self, g: &mut Graph<E>, x: NodeId, cur: &mut Cursor) -> Result<NodeId> {
        let w = cur.next();
        let b = cur.next();
        g.linear(x, w, b)
    }
}

/// One separable depthwise pair: 1xk then kx1, BN+ReLU after each.
#[derive(Clone, Debug)]
pub struct Branch<E: Element> {
    pub kernel: usize,
    pub dw_row: ConvLayer<E>,
    pub bn_row: BnLayer<E>,
    pub dw_col: ConvLayer<E>,
    pub bn_col: BnLayer<E>,
}

impl<E: Element> Branch<E> {
    pub fn build(channels: usize, kernel: usize) -> Self {
        let half = (kernel - 1) / 2;
        Branch {
            kernel,
            dw_row: ConvLayer::build(channels, channels, (1, kernel), (1, 1), (0, half), channels, false),
            bn_row: BnLayer::build(channels),
            dw_col: ConvLayer::build(channels, channels, (kernel, 1), (1, 1), (half, 0), channels, false),
            bn_col: BnLayer::build(channels),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R, scheme: InitScheme) {
        self.dw_row.init(rng, scheme);
        self.bn_row.reset(E::one());
        self.dw_col.init(rng, scheme);
        self.bn_col.reset(E::one());
    }

    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<E>, TensorRole)) {
        self.dw_row.visit(&format!("{prefix}.dw_1xk"), f);
        self.bn_row.visit(&format!("{prefix}.bn_1xk"), f);
        self.dw_col.visit(&format!("{prefix}.dw_kx1"), f);
        self.bn_col.visit(&format!("{prefix}.bn_kx1"), f);
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'s mut Tensor<E>, TensorRole),
    ) {
        self.dw_row.visit_mut(&format!("{prefix}.dw_1xk"), f);
        self.bn_row.visit_mut(&format!("{prefix}.bn_1xk"), f);
        self.dw_col.visit_mut(&format!("{prefix}.dw_kx1"), f);
        self.bn_col.visit_mut(&format!("{prefix}.bn_kx1"), f);
    }

    fn visit_bn_mut<'s>(&'s mut self, f: &mut dyn FnMut(&'s mut BnLayer<E>)) {
        f(&mut self.bn_row);
        f(&mut self.bn_col);
    }

    fn wire(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        cur: &mut Cursor,
        state: &mut ForwardState<E>,
    ) -> Result<NodeId> {
        let y = self.dw_row.wire(g, x, cur)?;
        let y = self.bn_row.wire(g, y, cur, state)?;
        let y = g.relu(y);
        let y = self.dw_col.wire(g, y, cur)?;
        let y = self.bn_col.wire(g, y, cur, state)?;
        Ok(g.relu(y))
    }
}

/// Multi-scale separable inverted-bottleneck block with a residual add.
#[derive(Clone, Debug)]
pub struct Block<E: Element> {
    pub branches: Vec<Branch<E>>,
    pub expand: ConvLayer<E>,
    pub squeeze: ConvLayer<E>,
    pub bn_out: BnLayer<E>,
}

impl<E: Element> Block<E> {
    pub fn build(channels: usize, expansion: usize, kernels: &[usize]) -> Self {
        let hidden = channels * expansion;
        Block {
            branches: kernels.iter().map(|&k| Branch::build(channels, k)).collect(),
            // expand feeds the ReLU directly, so it carries a bias; squeeze
            // is followed by BN and does not
            expand: ConvLayer::build(channels, hidden, (1, 1), (1, 1), (0, 0), 1, true),
            squeeze: ConvLayer::build(hidden, channels, (1, 1), (1, 1), (0, 0), 1, false),
            bn_out: BnLayer::build(channels),
        }
    }

    /// Standard init: He on convs, identity BNs except the trailing BN whose
    /// gamma starts at zero so the whole block is the identity map.
    pub fn init<R: Rng>(&mut self, rng: &mut R, scheme: InitScheme) {
        for br in &mut self.branches {
            br.init(rng, scheme);
        }
        self.expand.init(rng, scheme);
        self.squeeze.init(rng, scheme);
        self.bn_out.reset(E::zero());
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<E>, TensorRole)) {
        for br in &self.branches {
            br.visit(&format!("{prefix}.branch{}", br.kernel), f);
        }
        self.expand.visit(&format!("{prefix}.expand"), f);
        self.squeeze.visit(&format!("{prefix}.squeeze"), f);
        self.bn_out.visit(&format!("{prefix}.bn_out"), f);
    }

    pub fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'s mut Tensor<E>, TensorRole),
    ) {
        for br in &mut self.branches {
            let p = format!("{prefix}.branch{}", br.kernel);
            br.visit_mut(&p, f);
        }
        self.expand.visit_mut(&format!("{prefix}.expand"), f);
        self.squeeze.visit_mut(&format!("{prefix}.squeeze"), f);
        self.bn_out.visit_mut(&format!("{prefix}.bn_out"), f);
    }

    fn visit_bn_mut<'s>(&'s mut self, f: &mut dyn FnMut(&'s mut BnLayer<E>)) {
        for br in &mut self.branches {
            br.visit_bn_mut(f);
        }
        f(&mut self.bn_out);
    }

    /// Parameter tensors in wire order, for callers that drive [`Block::wire`]
    /// with their own leaves (the f64 gradient checks do).
    pub fn param_tensors(&self) -> Vec<Tensor<E>> {
        let mut out = Vec::new();
        self.visit("block", &mut |_, t, role| {
            if role == TensorRole::Param {
                out.push(t.clone());
            }
        });
        out
    }

    /// Runs the block ops against already-imported parameter nodes.
    pub fn wire(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        cur: &mut Cursor,
        state: &mut ForwardState<E>,
    ) -> Result<NodeId> {
        let mut sum: Option<NodeId> = None;
        for br in &self.branches {
            let b = br.wire(g, x, cur, state)?;
            sum = Some(match sum {
                None => b,
                Some(acc) => g.add(acc, b)?,
            });
        }
        let s = sum.expect("config validation guarantees at least one branch");
        let e = self.expand.wire(g, s, cur)?;
        let e = g.relu(e);
        let q = self.squeeze.wire(g, e, cur)?;
        let o = self.bn_out.wire(g, q, cur, state)?;
        g.add(x, o)
    }

    /// Imports this block's parameters and runs it; standalone entry point
    /// mirroring one step of the full model forward.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        x: NodeId,
        state: &mut ForwardState<E>,
    ) -> Result<NodeId> {
        let mut slots = Vec::new();
        self.visit("block", &mut |_, t, role| {
            if role == TensorRole::Param {
                slots.push(t);
            }
        });
        let ids = import_slots(g, &slots, state);
        self.wire(g, x, &mut Cursor::new(&ids), state)
    }
}

#[derive(Clone, Debug)]
pub struct Downsample<E: Element> {
    pub conv: ConvLayer<E>,
    pub bn: BnLayer<E>,
}

#[derive(Clone, Debug)]
pub struct Stage<E: Element> {
    pub downsample: Option<Downsample<E>>,
    pub blocks: Vec<Block<E>>,
}

impl<E: Element> Stage<E> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<E>, TensorRole)) {
        if let Some(ds) = &self.downsample {
            ds.conv.visit(&format!("{prefix}.downsample.conv"), f);
            ds.bn.visit(&format!("{prefix}.downsample.bn"), f);
        }
        for (j, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.block{}", j + 1), f);
        }
    }

    fn visit_mut<'s>(
        &'s mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'s mut Tensor<E>, TensorRole),
    ) {
        if let Some(ds) = &mut self.downsample {
            ds.conv.visit_mut(&format!("{prefix}.downsample.conv"), f);
            ds.bn.visit_mut(&format!("{prefix}.downsample.bn"), f);
        }
        for (j, block) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.block{}", j + 1);
            block.visit_mut(&p, f);
        }
    }

    fn visit_bn_mut<'s>(&'s mut self, f: &mut dyn FnMut(&'s mut BnLayer<E>)) {
        if let Some(ds) = &mut self.downsample {
            f(&mut ds.bn);
        }
        for block in &mut self.blocks {
            block.visit_bn_mut(f);
        }
    }

    fn wire(
        &self,
        g: &mut Graph<E>,
        mut x: NodeId,
        cur: &mut Cursor,
        state: &mut ForwardState<E>,
    ) -> Result<NodeId> {
        if let Some(ds) = &self.downsample {
            x = ds.conv.wire(g, x, cur)?;
            x = ds.bn.wire(g, x, cur, state)?;
        }
        for block in &self.blocks {
            x = block.wire(g, x, cur, state)?;
        }
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// Model

/// Batch-norm trainability policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPolicy {
    /// Every batch norm trains.
    None,
    /// Freeze every batch norm except the first one in the stem.
    FreezeAllExceptStemFirst,
}

impl std::str::FromStr for BnPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BnPolicy::None),
            "freeze_all_except_stem_first" => Ok(BnPolicy::FreezeAllExceptStemFirst),
            other => Err(Error::invalid(format!("unknown bn policy '{other}'"))),
        }
    }
}

/// Result of a train-mode forward: the recorded graph, the logits node, and
/// the imported trainable-parameter nodes in model walk order.
pub struct TrainForward {
    pub graph: Graph<f32>,
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

pub struct Model {
    pub config: ModelConfig,
    pub stem_conv: ConvLayer<f32>,
    pub stem_bn: BnLayer<f32>,
    pub stages: Vec<Stage<f32>>,
    pub head: LinearLayer<f32>,
}

impl Model {
    /// Constructs the layer graph for a config; weights are zeroed until
    /// [`Model::init_parameters`] runs.
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let stem_conv = ConvLayer::build(
            config.in_channels,
            config.stem_out,
            config.stem_kernel,
            config.stem_stride,
            ((config.stem_kernel.0 - 1) / 2, (config.stem_kernel.1 - 1) / 2),
            1,
            false,
        );
        let stem_bn = BnLayer::build(config.stem_out);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let channels = config.stage_channels[i];
            let downsample = (i > 0).then(|| {
                let s = config.downsample_stride;
                Downsample {
                    conv: ConvLayer::build(
                        config.stage_channels[i - 1],
                        channels,
                        (1, 1),
                        (s, s),
                        (0, 0),
                        1,
                        false,
                    ),
                    bn: BnLayer::build(channels),
                }
            });
            let blocks = (0..config.stage_depths[i])
                .map(|_| Block::build(channels, config.expansion, &config.branch_kernels))
                .collect();
            stages.push(Stage { downsample, blocks });
        }
        let head = LinearLayer::build(config.stage_channels[3], config.num_classes);
        Ok(Model {
            config,
            stem_conv,
            stem_bn,
            stages,
            head,
        })
    }

    /// Build plus seeded initialization; the everyday constructor.
    pub fn new_seeded(config: ModelConfig, seed: u64) -> Result<Model> {
        use rand::SeedableRng;
        let mut model = Model::build(config)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        model.init_parameters(&mut rng, InitScheme::HeUniform);
        Ok(model)
    }

    /// Fan-scaled uniform init for convs and the head, identity BNs, and
    /// zero gamma on each block's trailing BN (so every block starts as the
    /// identity map). Deterministic for a fixed rng state.
    pub fn init_parameters<R: Rng>(&mut self, rng: &mut R, scheme: InitScheme) {
        self.stem_conv.init(rng, scheme);
        self.stem_bn.reset(1.0);
        for stage in &mut self.stages {
            if let Some(ds) = &mut stage.downsample {
                ds.conv.init(rng, scheme);
                ds.bn.reset(1.0);
            }
            for block in &mut stage.blocks {
                block.init(rng, scheme);
            }
        }
        self.head.init(rng, scheme);
    }

    pub fn visit_tensors<'s>(
        &'s self,
        f: &mut dyn FnMut(String, &'s Tensor<f32>, TensorRole),
    ) {
        self.stem_conv.visit("stem.conv", f);
        self.stem_bn.visit("stem.bn", f);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.visit(&format!("stage{}", i + 1), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_tensors_mut<'s>(
        &'s mut self,
        f: &mut dyn FnMut(String, &'s mut Tensor<f32>, TensorRole),
    ) {
        self.stem_conv.visit_mut("stem.conv", f);
        self.stem_bn.visit_mut("stem.bn", f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let p = format!("stage{}", i + 1);
            stage.visit_mut(&p, f);
        }
        self.head.visit_mut("head", f);
    }

    fn visit_bn_mut<'s>(&'s mut self, f: &mut dyn FnMut(&'s mut BnLayer<f32>)) {
        f(&mut self.stem_bn);
        for stage in &mut self.stages {
            stage.visit_bn_mut(f);
        }
    }

    /// Named tensors (trainable and running stats) in walk order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>, TensorRole)> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |name, t, role| out.push((name, t.clone(), role)));
        out
    }

    /// Element count over trainable tensors (running stats excluded).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, t, role| {
            if role == TensorRole::Param {
                n += t.numel();
            }
        });
        n
    }

    /// Sizes of the tensors the optimizer will step, in walk order.
    pub fn trainable_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |_, t, role| {
            if role == TensorRole::Param && t.requires_grad() {
                out.push(t.numel());
            }
        });
        out
    }

    fn wire(
        &self,
        g: &mut Graph<f32>,
        input: NodeId,
        cur: &mut Cursor,
        state: &mut ForwardState<f32>,
    ) -> Result<NodeId> {
        let mut x = self.stem_conv.wire(g, input, cur).map_err(ctx("stem conv"))?;
        x = self.stem_bn.wire(g, x, cur, state)?;
        x = g.relu(x);
        x = g.max_pool2d(x, (3, 3), (2, 2), (1, 1)).map_err(ctx("stem pool"))?;
        for (i, stage) in self.stages.iter().enumerate() {
            let label = format!("stage{}", i + 1);
            x = stage.wire(g, x, cur, state).map_err(ctx(&label))?;
        }
        let pooled = g.global_avg_pool(x)?;
        self.head.wire(g, pooled, cur).map_err(ctx("head"))
    }

    fn run_forward(&self, batch: &Tensor<f32>, train: bool) -> Result<(Graph<f32>, NodeId, ForwardState<f32>)> {
        if batch.shape().len() != 4 || batch.shape()[1] != self.config.in_channels {
            return Err(Error::invalid(format!(
                "model input must be [N,{},T,F], got {:?}",
                self.config.in_channels,
                batch.shape()
            )));
        }
        let mut g = Graph::new();
        let input = g.leaf(batch);
        let mut state = ForwardState::new(train);
        let mut slots = Vec::new();
        self.visit_tensors(&mut |_, t, role| {
            if role == TensorRole::Param {
                slots.push(t);
            }
        });
        let ids = import_slots(&mut g, &slots, &mut state);
        let mut cur = Cursor::new(&ids);
        let logits = self.wire(&mut g, input, &mut cur, &mut state)?;
        debug_assert!(cur.finished(), "unconsumed parameter imports");
        Ok((g, logits, state))
    }

    /// Eval-mode forward: pure function of (parameters, input).
    pub fn forward_eval(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (g, logits, state) = self.run_forward(batch, false)?;
        debug_assert!(state.bn_updates.is_empty());
        Ok(g.tensor(logits))
    }

    /// Train-mode forward: batch statistics in unfrozen BNs (their running
    /// stats are updated in place) and a graph ready for `backward`.
    pub fn forward_train(&mut self, batch: &Tensor<f32>) -> Result<TrainForward> {
        let (graph, logits, state) = self.run_forward(batch, true)?;
        let ForwardState { param_nodes, bn_updates, .. } = state;
        self.apply_bn_updates(bn_updates);
        Ok(TrainForward { graph, logits, param_nodes })
    }

    fn apply_bn_updates(&mut self, updates: Vec<(usize, BnStatUpdate<f32>)>) {
        let mut by_index = updates.into_iter().peekable();
        let mut seen = 0usize;
        self.visit_bn_mut(&mut |bn| {
            if let Some((idx, _)) = by_index.peek() {
                if *idx == seen {
                    let (_, u) = by_index.next().unwrap();
                    bn.running_mean.data_mut().copy_from_slice(&u.mean);
                    bn.running_var.data_mut().copy_from_slice(&u.var);
                }
            }
            seen += 1;
        });
        debug_assert!(by_index.peek().is_none(), "unapplied bn updates");
    }

    /// Adds the gradients from a backward pass into the parameter tensors.
    /// `param_nodes` comes from the matching [`TrainForward`].
    pub fn accumulate_grads(&mut self, param_nodes: &[NodeId], grads: &Gradients<f32>) {
        let mut i = 0;
        self.visit_tensors_mut(&mut |_, t, role| {
            if role == TensorRole::Param && t.requires_grad() {
                if let Some(g) = grads.get(param_nodes[i]) {
                    t.accumulate_grad(g);
                }
                i += 1;
            }
        });
        assert_eq!(i, param_nodes.len(), "parameter walk drifted from forward");
    }

    /// One optimizer update over every trainable parameter.
    pub fn optimizer_step(&mut self, opt: &mut SgdMomentum) {
        let mut i = 0;
        self.visit_tensors_mut(&mut |_, t, role| {
            if role == TensorRole::Param && t.requires_grad() {
                opt.step_one(i, t);
                i += 1;
            }
        });
        opt.finish_step(i);
    }

    /// Swaps in a freshly initialized classification head; the backbone is
    /// untouched. Any optimizer state becomes stale and must be rebuilt.
    pub fn replace_head<R: Rng>(&mut self, num_classes: usize, rng: &mut R) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        self.config.num_classes = num_classes;
        self.head = LinearLayer::build(self.config.stage_channels[3], num_classes);
        self.head.init(rng, InitScheme::HeUniform);
        Ok(())
    }

    /// Applies a BN trainability policy: frozen layers run on their stored
    /// statistics and their gamma/beta stop receiving gradients.
    pub fn set_bn_policy(&mut self, policy: BnPolicy) {
        let mut index = 0usize;
        self.visit_bn_mut(&mut |bn| {
            let frozen = match policy {
                BnPolicy::None => false,
                BnPolicy::FreezeAllExceptStemFirst => index > 0,
            };
            bn.frozen = frozen;
            bn.gamma.set_requires_grad(!frozen);
            bn.beta.set_requires_grad(!frozen);
            index += 1;
        });
    }

    /// Number of batch-norm layers currently accepting gradient updates.
    pub fn trainable_bn_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_bn_mut(&mut |bn| {
            if !bn.frozen {
                n += 1;
            }
        });
        n
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            stem_out: 8,
            stage_channels: [8, 16, 32, 64],
            stage_depths: [1, 1, 1, 1],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_has_three_separable_pairs_per_block() {
        let model = Model::build(ModelConfig::default()).unwrap();
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        for k in [3, 11, 21] {
            assert!(names.contains(&format!("stage2.block1.branch{k}.dw_1xk.weight")));
            assert!(names.contains(&format!("stage2.block1.branch{k}.dw_kx1.weight")));
        }
        // shapes: 1xk and kx1 depthwise pairs
        model.visit_tensors(&mut |name, t, _| {
            if name == "stage2.block1.branch11.dw_1xk.weight" {
                assert_eq!(t.shape(), &[128, 1, 1, 11]);
            }
            if name == "stage2.block1.branch11.dw_kx1.weight" {
                assert_eq!(t.shape(), &[128, 1, 11, 1]);
            }
        });
    }

    #[test]
    fn tensor_names_are_unique() {
        let model = Model::build(ModelConfig::default()).unwrap();
        let mut names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn default_head_is_512_to_44() {
        let model = Model::build(ModelConfig::default()).unwrap();
        assert_eq!(model.head.weight.shape(), &[44, 512]);
        let head_params = model.head.weight.numel() + model.head.bias.numel();
        assert_eq!(head_params, 512 * 44 + 44);
    }

    #[test]
    fn depth_1_config_matches_closed_form_count() {
        // per block: 8C^2 + 88C; downsamples: C_i*C_{i-1} + 2C_i;
        // stem: 1*5*7*C1 + 2C1; head: 512-equivalent * classes + classes
        let cfg = tiny_config();
        let model = Model::build(cfg.clone()).unwrap();
        let c = cfg.stage_channels;
        let mut expect = 0;
        expect += cfg.in_channels * 5 * 7 * c[0] + 2 * c[0]; // stem
        for i in 0..4 {
            if i > 0 {
                expect += c[i - 1] * c[i] + 2 * c[i];
            }
            expect += cfg.stage_depths[i] * (8 * c[i] * c[i] + 88 * c[i]);
        }
        expect += c[3] * cfg.num_classes + cfg.num_classes;
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn head_swap_changes_count_by_exact_delta_and_keeps_backbone() {
        let mut model = Model::new_seeded(ModelConfig::default(), 1).unwrap();
        let base = model.param_count();
        let backbone_before: Vec<(String, Vec<f32>)> = model
            .named_tensors()
            .into_iter()
            .filter(|(n, _, _)| !n.starts_with("head."))
            .map(|(n, t, _)| (n, t.data().to_vec()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        model.replace_head(309, &mut rng).unwrap();
        assert_eq!(model.param_count() - base, (309 - 44) * 512 + (309 - 44));
        assert_eq!(model.param_count() - base, 135_945);
        let backbone_after: Vec<(String, Vec<f32>)> = model
            .named_tensors()
            .into_iter()
            .filter(|(n, _, _)| !n.starts_with("head."))
            .map(|(n, t, _)| (n, t.data().to_vec()))
            .collect();
        assert_eq!(backbone_before, backbone_after);

        // double swap to the same size still re-initializes
        let head_a = model.head.weight.data().to_vec();
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        model.replace_head(309, &mut rng2).unwrap();
        assert_ne!(head_a, model.head.weight.data());
        assert!(model.replace_head(0, &mut rng2).is_err());
    }

    #[test]
    fn bn_freeze_policy_leaves_one_trainable_bn() {
        let mut model = Model::build(ModelConfig::default()).unwrap();
        model.set_bn_policy(BnPolicy::FreezeAllExceptStemFirst);
        assert_eq!(model.trainable_bn_count(), 1);
        assert!(model.stem_bn.gamma.requires_grad());
        assert!(!model.stages[0].blocks[0].bn_out.gamma.requires_grad());
        // per-stage bn count: stem 1 + downsamples 3 + blocks*(2 per branch * 3 + 1)
        model.set_bn_policy(BnPolicy::None);
        let expected = 1 + 3 + (3 + 4 + 6 + 3) * 7;
        assert_eq!(model.trainable_bn_count(), expected);
    }

    #[test]
    fn init_is_deterministic_and_blocks_start_as_identity() {
        let cfg = tiny_config();
        let a = Model::new_seeded(cfg.clone(), 42).unwrap();
        let b = Model::new_seeded(cfg.clone(), 42).unwrap();
        for ((na, ta, _), (nb, tb, _)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} differs across same-seed builds");
        }

        // with gamma-zero trailing BNs a block maps x to x exactly (eval mode)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = &a.stages[0].blocks[0];
        let x = Tensor::from_fn(vec![1, 8, 6, 6], |_| rng.gen_range(0.1..1.0f64) as f32);
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let mut state = ForwardState::new(false);
        let y = block.forward(&mut g, xid, &mut state).unwrap();
        assert_eq!(g.data(y), x.data());
    }

    #[test]
    fn init_weight_variance_tracks_the_scheme() {
        // large tensor: sample variance within 10% of b^2/3
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = ConvLayer::<f32>::build(64, 256, (3, 3), (1, 1), (1, 1), 1, false);
        layer.init(&mut rng, InitScheme::HeUniform);
        let fan_in = 64 * 9;
        let expect = 2.0 / fan_in as f64;
        let data = layer.weight.data();
        let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / data.len() as f64;
        assert!((var - expect).abs() / expect < 0.1, "var {var} expect {expect}");
    }

    #[test]
    fn forward_shapes_match_the_downsampling_chain() {
        let cfg = tiny_config();
        let mut model = Model::new_seeded(cfg, 3).unwrap();
        let batch = Tensor::from_fn(vec![2, 1, 64, 32], |i| (i % 37) as f32 * 0.01);
        let logits = model.forward_eval(&batch).unwrap();
        assert_eq!(logits.shape(), &[2, 44]);
        // train-mode forward agrees on shape and produces a graph
        let fwd = model.forward_train(&batch).unwrap();
        assert_eq!(fwd.graph.shape(fwd.logits), &[2, 44]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = Model::new_seeded(tiny_config(), 9).unwrap();
        let batch = Tensor::from_fn(vec![1, 1, 64, 32], |i| ((i * 31) % 17) as f32 * 0.05);
        let a = model.forward_eval(&batch).unwrap();
        let b = model.forward_eval(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn tiny_inputs_still_run_thanks_to_same_padding() {
        // extents floor at 1 through the whole chain
        let mut model = Model::new_seeded(tiny_config(), 4).unwrap();
        let batch = Tensor::from_fn(vec![1, 1, 8, 8], |i| i as f32 * 0.01);
        let logits = model.forward_train(&batch).unwrap();
        assert_eq!(logits.graph.shape(logits.logits), &[1, 44]);
    }

    #[test]
    fn collapsing_extent_is_reported_with_its_location() {
        // an even stem kernel under-pads, so a 1-pixel input collapses
        let mut cfg = tiny_config();
        cfg.stem_kernel = (6, 8);
        let mut model = Model::new_seeded(cfg, 4).unwrap();
        let batch = Tensor::zeros(vec![1, 1, 1, 1]);
        let err = match model.forward_train(&batch) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("1x1 input should collapse under a 6x8 stem kernel"),
        };
        assert!(err.contains("stem"), "error should name the stem: {err}");
        assert!(err.contains("collapses"), "error should explain: {err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.branch_kernels = vec![4];
        assert!(Model::build(cfg).is_err());
        let mut cfg = ModelConfig::default();
        cfg.stem_out = 32; // != stage_channels[0]
        assert!(Model::build(cfg).is_err());
        let cfg = ModelConfig::default().with_classes(0);
        assert!(Model::build(cfg).is_err());
    }
}
