//! Declarative architectures: block stacks whose GraphConv slots are filled
//! by any layer kind from the zoo.

use rand::Rng;

use crate::config::{ArchitectureId, ExperimentConfig, LayerKind};
use crate::error::{ConfigError, LayerError, TrainError};
use crate::graph::{Graph, GraphKind};
use crate::layers::{Activation, ChebLayer, EdgeNetLayer, FilterBank, GatLayer};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// One graph-convolution slot.
#[derive(Debug, Clone)]
pub enum GraphConv {
    L3(FilterBank),
    Cheb(ChebLayer),
    Gat(GatLayer),
    Edge(EdgeNetLayer),
}

impl GraphConv {
    fn build<R: Rng>(
        kind: &LayerKind,
        g: &Graph,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        Ok(match kind {
            LayerKind::L3 { orders, shared } => {
                GraphConv::L3(FilterBank::new(g, orders, c_in, c_out, *shared, rng)?)
            }
            LayerKind::Cheb { degree } => {
                GraphConv::Cheb(ChebLayer::new(g, *degree, c_in, c_out, rng)?)
            }
            LayerKind::Gcn => GraphConv::Cheb(ChebLayer::gcn(g, c_in, c_out, rng)?),
            LayerKind::Gat { heads, head_dim } => {
                GraphConv::Gat(GatLayer::new(g, *heads, *head_dim, c_in, c_out, rng))
            }
            LayerKind::EdgeNet { taps } => {
                GraphConv::Edge(EdgeNetLayer::new(g, *taps, c_in, c_out, rng))
            }
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            GraphConv::L3(l) => l.params(),
            GraphConv::Cheb(l) => l.params(),
            GraphConv::Gat(l) => l.params(),
            GraphConv::Edge(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            GraphConv::L3(l) => l.params_mut(),
            GraphConv::Cheb(l) => l.params_mut(),
            GraphConv::Gat(l) => l.params_mut(),
            GraphConv::Edge(l) => l.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            GraphConv::L3(l) => l.param_count(),
            GraphConv::Cheb(l) => l.param_count(),
            GraphConv::Gat(l) => l.param_count(),
            GraphConv::Edge(l) => l.param_count(),
        }
    }

    pub fn forward_with_ids(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId, LayerError> {
        match self {
            GraphConv::L3(l) => l.forward_with_ids(tape, ids, x, Activation::Id),
            GraphConv::Cheb(l) => l.forward_with_ids(tape, ids, x, Activation::Id),
            GraphConv::Gat(l) => l.forward_with_ids(tape, ids, x, Activation::Id),
            GraphConv::Edge(l) => l.forward_with_ids(tape, ids, x, Activation::Id),
        }
    }

    pub fn bank(&self) -> Option<&FilterBank> {
        match self {
            GraphConv::L3(fb) => Some(fb),
            _ => None,
        }
    }

    pub fn bank_mut(&mut self) -> Option<&mut FilterBank> {
        match self {
            GraphConv::L3(fb) => Some(fb),
            _ => None,
        }
    }
}

/// Per-channel batch normalization over (batch x nodes), epsilon 1e-5,
/// running-stat momentum 0.1, trainable affine.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::from_vec(&[channels], vec![1.0; channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn new<R: Rng>(f_in: usize, f_out: usize, rng: &mut R) -> Self {
        let s = 1.0 / (f_in as f64).sqrt();
        let mut weight = Tensor::zeros(&[f_in, f_out]);
        for v in weight.data_mut() {
            *v = rng.random_range(-s..=s);
        }
        Self {
            weight,
            bias: Tensor::zeros(&[f_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Conv(GraphConv),
    Norm(BatchNorm),
    Relu,
    /// Stride-2 max pool over the node axis; the following conv was built on
    /// the pooled graph.
    MaxPool2,
    GlobalMeanPool,
    Flatten,
    Fc(Linear),
}

/// A built architecture: the block stack plus the graphs each conv runs on.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchitectureId,
    pub blocks: Vec<Block>,
    /// Graph per conv slot, in order of appearance.
    pub conv_graphs: Vec<Graph>,
    pub num_classes: usize,
}

/// Halve a ring or chain for the stride-2 pool.
fn pooled_graph(g: &Graph) -> Result<Graph, TrainError> {
    if g.n() % 2 != 0 {
        return Err(TrainError::Config(ConfigError::BadValue {
            key: "graph".into(),
            msg: format!("stride-2 pooling needs an even node count, got {}", g.n()),
        }));
    }
    let half = g.n() / 2;
    match g.kind() {
        GraphKind::Ring => Ok(Graph::ring(half)?),
        GraphKind::Chain => Ok(Graph::chain(half)?),
        other => Err(TrainError::Config(ConfigError::BadValue {
            key: "graph".into(),
            msg: format!("stride-2 pooling is defined for rings and chains, got {other:?}"),
        })),
    }
}

/// Instantiate the architecture named by the config on graph `g`.
pub fn build_architecture<R: Rng>(
    config: &ExperimentConfig,
    g: &Graph,
    channels_in: usize,
    rng: &mut R,
) -> Result<Model, TrainError> {
    let layer = &config.layer;
    match config.architecture {
        ArchitectureId::Updown2 => {
            let g2 = pooled_graph(g)?;
            let conv1 = GraphConv::build(layer, g, channels_in, 32, rng)?;
            let conv2 = GraphConv::build(layer, &g2, 32, 64, rng)?;
            let fc = Linear::new(64, 2, rng);
            Ok(Model {
                arch: config.architecture,
                blocks: vec![
                    Block::Conv(conv1),
                    Block::Relu,
                    Block::MaxPool2,
                    Block::Conv(conv2),
                    Block::Relu,
                    Block::GlobalMeanPool,
                    Block::Fc(fc),
                ],
                conv_graphs: vec![g.clone(), g2],
                num_classes: 2,
            })
        }
        ArchitectureId::Updown1 => {
            let conv1 = GraphConv::build(layer, g, channels_in, 32, rng)?;
            let fc = Linear::new(32, 2, rng);
            Ok(Model {
                arch: config.architecture,
                blocks: vec![
                    Block::Conv(conv1),
                    Block::Relu,
                    Block::GlobalMeanPool,
                    Block::Fc(fc),
                ],
                conv_graphs: vec![g.clone()],
                num_classes: 2,
            })
        }
        ArchitectureId::Mnist2 => {
            let conv1 = GraphConv::build(layer, g, channels_in, 32, rng)?;
            let conv2 = GraphConv::build(layer, g, 32, 64, rng)?;
            let fc = Linear::new(g.n() * 64, 10, rng);
            Ok(Model {
                arch: config.architecture,
                blocks: vec![
                    Block::Conv(conv1),
                    Block::Norm(BatchNorm::new(32)),
                    Block::Relu,
                    Block::Conv(conv2),
                    Block::Norm(BatchNorm::new(64)),
                    Block::Relu,
                    Block::Flatten,
                    Block::Fc(fc),
                ],
                conv_graphs: vec![g.clone(), g.clone()],
                num_classes: 10,
            })
        }
    }
}

impl Model {
    /// Trainable parameters in declaration order (block order, each block's
    /// own parameter order).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Conv(c) => out.extend(c.params()),
                Block::Norm(n) => {
                    out.push(&n.gamma);
                    out.push(&n.beta);
                }
                Block::Fc(f) => {
                    out.push(&f.weight);
                    out.push(&f.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            match b {
                Block::Conv(c) => out.extend(c.params_mut()),
                Block::Norm(n) => {
                    out.push(&mut n.gamma);
                    out.push(&mut n.beta);
                }
                Block::Fc(f) => {
                    out.push(&mut f.weight);
                    out.push(&mut f.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Batch-norm running statistics (non-trainable buffers), block order.
    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if let Block::Norm(n) = b {
                out.push(&n.running_mean);
                out.push(&n.running_var);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if let Block::Norm(n) = b {
                out.push(&mut n.running_mean);
                out.push(&mut n.running_var);
            }
        }
        out
    }

    /// All parameters; the convention used in reported counts excludes the
    /// final classifier.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn param_count_excl_fc(&self) -> usize {
        let fc: usize = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Fc(f) => f.weight.len() + f.bias.len(),
                _ => 0,
            })
            .sum();
        self.param_count() - fc
    }

    /// Register every trainable parameter on the tape, in `params()` order.
    pub fn register(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect()
    }

    /// Forward the whole stack. In training mode batch norm uses batch
    /// statistics and updates the running buffers.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        ids: &[TensorId],
        x: TensorId,
        training: bool,
    ) -> Result<TensorId, TrainError> {
        let mut cursor = 0usize;
        let mut h = x;
        // split the id list exactly like params()
        let blocks = std::mem::take(&mut self.blocks);
        let mut result = Ok(());
        let mut new_blocks = Vec::with_capacity(blocks.len());
        for block in blocks {
            let mut block = block;
            if result.is_ok() {
                match &mut block {
                    Block::Conv(c) => {
                        let take = c.params().len();
                        let slice = &ids[cursor..cursor + take];
                        cursor += take;
                        match c.forward_with_ids(tape, slice, h) {
                            Ok(y) => h = y,
                            Err(e) => result = Err(TrainError::Layer(e)),
                        }
                    }
                    Block::Norm(nb) => {
                        let gamma = ids[cursor];
                        let beta = ids[cursor + 1];
                        cursor += 2;
                        if training {
                            match tape.batch_norm_train(h, gamma, beta, nb.eps) {
                                Ok((y, mean, var)) => {
                                    for (rm, m) in nb.running_mean.iter_mut().zip(&mean) {
                                        *rm = (1.0 - nb.momentum) * *rm + nb.momentum * m;
                                    }
                                    for (rv, v) in nb.running_var.iter_mut().zip(&var) {
                                        *rv = (1.0 - nb.momentum) * *rv + nb.momentum * v;
                                    }
                                    h = y;
                                }
                                Err(e) => result = Err(TrainError::Layer(e.into())),
                            }
                        } else {
                            match tape.batch_norm_eval(
                                h,
                                gamma,
                                beta,
                                &nb.running_mean,
                                &nb.running_var,
                                nb.eps,
                            ) {
                                Ok(y) => h = y,
                                Err(e) => result = Err(TrainError::Layer(e.into())),
                            }
                        }
                    }
                    Block::Relu => h = tape.relu(h),
                    Block::MaxPool2 => match tape.stride2_max_pool_nodes(h) {
                        Ok(y) => h = y,
                        Err(e) => result = Err(TrainError::Layer(e.into())),
                    },
                    Block::GlobalMeanPool => match tape.global_mean_pool_nodes(h) {
                        Ok(y) => h = y,
                        Err(e) => result = Err(TrainError::Layer(e.into())),
                    },
                    Block::Flatten => {
                        let shape = tape.value(h).shape().to_vec();
                        let flat = shape[1] * shape[2];
                        match tape.reshape(h, &[shape[0], flat]) {
                            Ok(y) => h = y,
                            Err(e) => result = Err(TrainError::Layer(e.into())),
                        }
                    }
                    Block::Fc(f) => {
                        let w = ids[cursor];
                        let b = ids[cursor + 1];
                        cursor += 2;
                        let _ = &f;
                        match tape.matmul(h, w).and_then(|y| tape.add_bias(y, b)) {
                            Ok(y) => h = y,
                            Err(e) => result = Err(TrainError::Layer(e.into())),
                        }
                    }
                }
            }
            new_blocks.push(block);
        }
        self.blocks = new_blocks;
        result.map(|_| h)
    }

    /// The filter banks among the conv slots, paired with the index of the
    /// graph they were built on.
    pub fn banks(&self) -> Vec<(usize, &FilterBank)> {
        let mut out = Vec::new();
        let mut conv_idx = 0usize;
        for b in &self.blocks {
            if let Block::Conv(c) = b {
                if let Some(fb) = c.bank() {
                    out.push((conv_idx, fb));
                }
                conv_idx += 1;
            }
        }
        out
    }

    /// Index ranges of each bank's basis parameters within `params()`,
    /// aligned with `banks()`. Used to add the analytic penalty gradient.
    pub fn bank_basis_param_ranges(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut cursor = 0usize;
        let mut conv_idx = 0usize;
        for b in &self.blocks {
            match b {
                Block::Conv(c) => {
                    let take = c.params().len();
                    if let Some(fb) = c.bank() {
                        out.push((conv_idx, cursor..cursor + fb.rank()));
                    }
                    cursor += take;
                    conv_idx += 1;
                }
                Block::Norm(_) => cursor += 2,
                Block::Fc(_) => cursor += 2,
                _ => {}
            }
        }
        out
    }
}
