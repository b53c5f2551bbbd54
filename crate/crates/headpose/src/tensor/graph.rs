use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;

use super::layers;
use super::Tensor;
use crate::error::{Error, Result};

/// Identifier of a node inside one [`Graph`]. Nodes are stored in
/// topological order, so `a.0 < b.0` whenever `a` feeds `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

/// The layer set: everything the encoder-decoder of this crate needs.
///
/// Residual bottleneck blocks are assembled from these primitives by
/// [`GraphBuilder::residual_bottleneck`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Batch input, declared per-sample shape (H, W, C).
    Input { shape: [usize; 3] },
    /// A bare learnable tensor, used as a leaf in small test graphs.
    Param { shape: Vec<usize> },
    /// 2-D convolution over NHWC. Weight layout `[out_c, k, k, in_c]`.
    Conv {
        in_c: usize,
        out_c: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    },
    /// Per-channel batch normalization. Batch statistics in training mode,
    /// running statistics (momentum 0.9) in inference mode.
    BatchNorm { channels: usize },
    Relu,
    /// Nearest-neighbor 2x upsampling followed by a same-padded convolution.
    UpsampleConv {
        in_c: usize,
        out_c: usize,
        ksize: usize,
    },
    /// Dense layer over the flattened per-sample features.
    FullyConnected { in_f: usize, out_f: usize },
    /// Softmax over the H*W positions of each channel, so every channel of
    /// every sample sums to 1.
    SpatialSoftmax,
    /// Mean over H and W, keeping a 1x1 spatial extent.
    GlobalAvgPool,
    /// Softmax over consecutive channel pairs: channels (2i, 2i+1) form a
    /// 2-way distribution.
    PairSoftmax,
    /// Elementwise sum of two same-shaped inputs.
    Add,
    /// Channel-axis concatenation.
    Concat,
    /// Sum of every element of the input, across the batch; yields a scalar.
    ReduceSum,
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Per-sample output shape (H, W, C); `[1]` denotes the batch scalar of
    /// `ReduceSum`, and `Param` nodes use their parameter's own shape.
    pub out_shape: Vec<usize>,
    /// Names of this node's entries in the parameter map.
    pub params: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Cached batch statistics of one BatchNorm node, kept for backward and for
/// the running-statistics update.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub x_hat: Tensor,
}

/// All per-node outputs of one forward pass.
#[derive(Debug)]
pub struct Activations {
    values: Vec<Tensor>,
    pub(crate) bn: HashMap<usize, BnCache>,
    pub(crate) mode: Mode,
}

impl Activations {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    /// Uniform in ±1/sqrt(fan_in).
    FanIn(usize),
    Zeros,
    Ones,
    /// Explicit values provided at build time.
    Given,
}

/// Incrementally builds a [`Graph`]. Nodes must be added inputs-first, which
/// makes the stored order topological by construction.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    param_specs: Vec<(String, Vec<usize>, InitKind, bool)>,
    given: BTreeMap<String, Tensor>,
    names: BTreeSet<String>,
    input: Option<usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            param_specs: Vec::new(),
            given: BTreeMap::new(),
            names: BTreeSet::new(),
            input: None,
        }
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn unique(&mut self, name: &str) -> Result<()> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::InvalidConfig(format!("duplicate node name `{name}`")));
        }
        Ok(())
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].out_shape
    }

    fn expect_hwc(&self, id: NodeId, context: &str) -> Result<[usize; 3]> {
        let s = self.shape_of(id);
        if s.len() != 3 {
            return Err(Error::shape(context, "rank-3 (H, W, C) activation", format!("{s:?}")));
        }
        Ok([s[0], s[1], s[2]])
    }

    pub fn input(&mut self, shape: [usize; 3]) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::InvalidConfig("graph already has an input node".into()));
        }
        self.unique("input")?;
        let id = self.push(Node {
            name: "input".into(),
            kind: LayerKind::Input { shape },
            inputs: vec![],
            out_shape: shape.to_vec(),
            params: vec![],
        });
        self.input = Some(id.0);
        Ok(id)
    }

    /// Leaf parameter node with explicit initial values.
    pub fn param(&mut self, name: &str, init: Tensor) -> Result<NodeId> {
        self.unique(name)?;
        let pname = format!("{name}.value");
        self.param_specs
            .push((pname.clone(), init.shape().to_vec(), InitKind::Given, true));
        self.given.insert(pname.clone(), init.clone());
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::Param {
                shape: init.shape().to_vec(),
            },
            inputs: vec![],
            out_shape: init.shape().to_vec(),
            params: vec![pname],
        }))
    }

    pub fn conv(&mut self, name: &str, x: NodeId, out_c: usize, ksize: usize, stride: usize, pad: usize) -> Result<NodeId> {
        self.unique(name)?;
        let [h, w, in_c] = self.expect_hwc(x, name)?;
        if out_c == 0 || in_c == 0 {
            return Err(Error::InvalidConfig(format!("{name}: channel counts must be positive")));
        }
        if ksize == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!("{name}: kernel and stride must be positive")));
        }
        if h + 2 * pad < ksize || w + 2 * pad < ksize {
            return Err(Error::shape(name, format!("input at least {ksize}x{ksize} after padding"), format!("{h}x{w} with pad {pad}")));
        }
        let oh = (h + 2 * pad - ksize) / stride + 1;
        let ow = (w + 2 * pad - ksize) / stride + 1;
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        self.param_specs.push((
            wname.clone(),
            vec![out_c, ksize, ksize, in_c],
            InitKind::FanIn(ksize * ksize * in_c),
            true,
        ));
        self.param_specs.push((bname.clone(), vec![out_c], InitKind::Zeros, true));
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::Conv { in_c, out_c, ksize, stride, pad },
            inputs: vec![x.0],
            out_shape: vec![oh, ow, out_c],
            params: vec![wname, bname],
        }))
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.unique(name)?;
        let [h, w, c] = self.expect_hwc(x, name)?;
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        let rmean = format!("{name}.running_mean");
        let rvar = format!("{name}.running_var");
        self.param_specs.push((gamma.clone(), vec![c], InitKind::Ones, true));
        self.param_specs.push((beta.clone(), vec![c], InitKind::Zeros, true));
        self.param_specs.push((rmean.clone(), vec![c], InitKind::Zeros, false));
        self.param_specs.push((rvar.clone(), vec![c], InitKind::Ones, false));
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::BatchNorm { channels: c },
            inputs: vec![x.0],
            out_shape: vec![h, w, c],
            params: vec![gamma, beta, rmean, rvar],
        }))
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.unique(name)?;
        let shape = self.shape_of(x).to_vec();
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::Relu,
            inputs: vec![x.0],
            out_shape: shape,
            params: vec![],
        }))
    }

    pub fn upsample_conv(&mut self, name: &str, x: NodeId, out_c: usize, ksize: usize) -> Result<NodeId> {
        self.unique(name)?;
        let [h, w, in_c] = self.expect_hwc(x, name)?;
        if ksize % 2 == 0 {
            return Err(Error::InvalidConfig(format!("{name}: same-padded kernel must be odd")));
        }
        if out_c == 0 {
            return Err(Error::InvalidConfig(format!("{name}: channel counts must be positive")));
        }
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        self.param_specs.push((
            wname.clone(),
            vec![out_c, ksize, ksize, in_c],
            InitKind::FanIn(ksize * ksize * in_c),
            true,
        ));
        self.param_specs.push((bname.clone(), vec![out_c], InitKind::Zeros, true));
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::UpsampleConv { in_c, out_c, ksize },
            inputs: vec![x.0],
            out_shape: vec![h * 2, w * 2, out_c],
            params: vec![wname, bname],
        }))
    }

    pub fn fully_connected(&mut self, name: &str, x: NodeId, out_f: usize) -> Result<NodeId> {
        self.unique(name)?;
        let [h, w, c] = self.expect_hwc(x, name)?;
        let in_f = h * w * c;
        if out_f == 0 {
            return Err(Error::InvalidConfig(format!("{name}: output features must be positive")));
        }
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        self.param_specs
            .push((wname.clone(), vec![out_f, in_f], InitKind::FanIn(in_f), true));
        self.param_specs.push((bname.clone(), vec![out_f], InitKind::Zeros, true));
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::FullyConnected { in_f, out_f },
            inputs: vec![x.0],
            out_shape: vec![1, 1, out_f],
            params: vec![wname, bname],
        }))
    }

    pub fn spatial_softmax(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.unique(name)?;
        let [h, w, c] = self.expect_hwc(x, name)?;
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::SpatialSoftmax,
            inputs: vec![x.0],
            out_shape: vec![h, w, c],
            params: vec![],
        }))
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.unique(name)?;
        let [_, _, c] = self.expect_hwc(x, name)?;
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::GlobalAvgPool,
            inputs: vec![x.0],
            out_shape: vec![1, 1, c],
            params: vec![],
        }))
    }

    pub fn pair_softmax(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.unique(name)?;
        let [h, w, c] = self.expect_hwc(x, name)?;
        if c % 2 != 0 {
            return Err(Error::shape(name, "even channel count", format!("{c}")));
        }
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::PairSoftmax,
            inputs: vec![x.0],
            out_shape: vec![h, w, c],
            params: vec![],
        }))
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.unique(name)?;
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                name,
                format!("{:?}", self.shape_of(a)),
                format!("{:?}", self.shape_of(b)),
            ));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::Add,
            inputs: vec![a.0, b.0],
            out_shape: shape,
            params: vec![],
        }))
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        self.unique(name)?;
        if parts.len() < 2 {
            return Err(Error::InvalidConfig(format!("{name}: concat needs at least two inputs")));
        }
        let [h, w, mut c] = self.expect_hwc(parts[0], name)?;
        for p in &parts[1..] {
            let [ph, pw, pc] = self.expect_hwc(*p, name)?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(name, format!("{h}x{w} spatial"), format!("{ph}x{pw}")));
            }
            c += pc;
        }
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::Concat,
            inputs: parts.iter().map(|p| p.0).collect(),
            out_shape: vec![h, w, c],
            params: vec![],
        }))
    }

    pub fn reduce_sum(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.unique(name)?;
        Ok(self.push(Node {
            name: name.into(),
            kind: LayerKind::ReduceSum,
            inputs: vec![x.0],
            out_shape: vec![1],
            params: vec![],
        }))
    }

    /// Pre-activation bottleneck residual block:
    /// 1x1 reduce -> BN -> ReLU -> 3x3 (carries the stride) -> BN -> ReLU ->
    /// 1x1 expand -> BN, added to the skip path. The skip is the identity
    /// when shapes match, otherwise a strided 1x1 projection with its own BN.
    ///
    /// With every weight zero and matching shapes the block is exactly the
    /// identity, since the final BN of an all-zero branch stays zero.
    pub fn residual_bottleneck(&mut self, name: &str, x: NodeId, out_c: usize, stride: usize) -> Result<NodeId> {
        let [_, _, in_c] = self.expect_hwc(x, name)?;
        if out_c == 0 {
            return Err(Error::InvalidConfig(format!("{name}: channel counts must be positive")));
        }
        let mid = (out_c / 4).max(1);
        let c1 = self.conv(&format!("{name}.reduce"), x, mid, 1, 1, 0)?;
        let b1 = self.batch_norm(&format!("{name}.reduce_bn"), c1)?;
        let r1 = self.relu(&format!("{name}.reduce_relu"), b1)?;
        let c2 = self.conv(&format!("{name}.mid"), r1, mid, 3, stride, 1)?;
        let b2 = self.batch_norm(&format!("{name}.mid_bn"), c2)?;
        let r2 = self.relu(&format!("{name}.mid_relu"), b2)?;
        let c3 = self.conv(&format!("{name}.expand"), r2, out_c, 1, 1, 0)?;
        let b3 = self.batch_norm(&format!("{name}.expand_bn"), c3)?;
        let skip = if stride == 1 && in_c == out_c {
            x
        } else {
            let sc = self.conv(&format!("{name}.skip"), x, out_c, 1, stride, 0)?;
            self.batch_norm(&format!("{name}.skip_bn"), sc)?
        };
        self.add(&format!("{name}.join"), b3, skip)
    }

    /// Materialize parameters and freeze the graph. Weights draw from
    /// `rng` uniformly in ±1/sqrt(fan_in); order of draws follows node
    /// insertion order, so a seeded rng gives reproducible models.
    pub fn finish<R: Rng>(self, rng: &mut R) -> Result<Graph> {
        let mut params = BTreeMap::new();
        let mut trainable = BTreeSet::new();
        for (name, shape, init, train) in &self.param_specs {
            let t = match init {
                InitKind::FanIn(fan_in) => {
                    let bound = 1.0 / (*fan_in as f64).sqrt();
                    let mut t = Tensor::zeros(shape);
                    for v in t.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                    t
                }
                InitKind::Zeros => Tensor::zeros(shape),
                InitKind::Ones => Tensor::filled(shape, 1.0),
                InitKind::Given => self.given[name].clone(),
            };
            params.insert(name.clone(), t);
            if *train {
                trainable.insert(name.clone());
            }
        }
        Ok(Graph {
            nodes: self.nodes,
            params,
            trainable,
        })
    }
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// A frozen computation graph plus its named parameters.
#[derive(Debug, Clone)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Declared per-sample output shape of a node (without the batch dim).
    pub fn node_out_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].out_shape
    }

    /// Declared per-sample input shape (H, W, C).
    pub fn input_shape(&self) -> Option<[usize; 3]> {
        self.nodes.iter().find_map(|n| match n.kind {
            LayerKind::Input { shape } => Some(shape),
            _ => None,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn set_params(&mut self, params: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in &params {
            match self.params.get(name) {
                Some(old) if old.shape() == t.shape() => {}
                Some(old) => {
                    return Err(Error::shape(name.clone(), format!("{:?}", old.shape()), format!("{:?}", t.shape())))
                }
                None => return Err(Error::Format(format!("unknown parameter `{name}`"))),
            }
        }
        for (name, t) in params {
            self.params.insert(name, t);
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.trainable.iter()
    }

    /// Total number of scalar parameters, trainable ones only.
    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable.iter().map(|n| self.params[n].len()).sum()
    }

    fn expect_input_shape(&self, batch: &Tensor) -> Result<usize> {
        let decl = self
            .input_shape()
            .ok_or_else(|| Error::InvalidConfig("graph has no input node".into()))?;
        let s = batch.shape();
        if s.len() != 4 || s[1] != decl[0] || s[2] != decl[1] || s[3] != decl[2] {
            return Err(Error::shape(
                "input",
                format!("[N, {}, {}, {}]", decl[0], decl[1], decl[2]),
                format!("{s:?}"),
            ));
        }
        Ok(s[0])
    }

    /// Run the graph on a batch. Every node's activation is computed; the
    /// result is deterministic for identical parameters and input.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Activations> {
        let n = self.expect_input_shape(batch)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut bn = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let out = match &node.kind {
                LayerKind::Input { .. } => batch.clone(),
                LayerKind::Param { .. } => self.params[&node.params[0]].clone(),
                LayerKind::Conv { in_c, out_c, ksize, stride, pad } => {
                    let x = &values[node.inputs[0]];
                    layers::conv_forward(
                        x,
                        &self.params[&node.params[0]],
                        &self.params[&node.params[1]],
                        *in_c,
                        *out_c,
                        *ksize,
                        *stride,
                        *pad,
                    )
                }
                LayerKind::BatchNorm { channels } => {
                    let x = &values[node.inputs[0]];
                    match mode {
                        Mode::Train => {
                            let (y, cache) = layers::batch_norm_train(
                                x,
                                &self.params[&node.params[0]],
                                &self.params[&node.params[1]],
                                *channels,
                            );
                            bn.insert(idx, cache);
                            y
                        }
                        Mode::Eval => layers::batch_norm_eval(
                            x,
                            &self.params[&node.params[0]],
                            &self.params[&node.params[1]],
                            &self.params[&node.params[2]],
                            &self.params[&node.params[3]],
                            *channels,
                        ),
                    }
                }
                LayerKind::Relu => layers::relu_forward(&values[node.inputs[0]]),
                LayerKind::UpsampleConv { in_c, out_c, ksize } => {
                    let x = &values[node.inputs[0]];
                    let up = layers::upsample_nearest(x, 2);
                    layers::conv_forward(
                        &up,
                        &self.params[&node.params[0]],
                        &self.params[&node.params[1]],
                        *in_c,
                        *out_c,
                        *ksize,
                        1,
                        (*ksize - 1) / 2,
                    )
                }
                LayerKind::FullyConnected { in_f, out_f } => layers::fc_forward(
                    &values[node.inputs[0]],
                    &self.params[&node.params[0]],
                    &self.params[&node.params[1]],
                    *in_f,
                    *out_f,
                ),
                LayerKind::SpatialSoftmax => layers::spatial_softmax_forward(&values[node.inputs[0]]),
                LayerKind::GlobalAvgPool => layers::global_avg_pool_forward(&values[node.inputs[0]]),
                LayerKind::PairSoftmax => layers::pair_softmax_forward(&values[node.inputs[0]]),
                LayerKind::Add => {
                    let a = &values[node.inputs[0]];
                    let b = &values[node.inputs[1]];
                    if a.shape() != b.shape() {
                        return Err(Error::shape(&node.name, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
                    }
                    let mut y = a.clone();
                    for (o, v) in y.data_mut().iter_mut().zip(b.data()) {
                        *o += v;
                    }
                    y
                }
                LayerKind::Concat => {
                    let parts: Vec<&Tensor> = node.inputs.iter().map(|i| &values[*i]).collect();
                    layers::concat_forward(&parts)
                }
                LayerKind::ReduceSum => Tensor::scalar(values[node.inputs[0]].sum()),
            };
            values.push(out);
        }
        debug_assert_eq!(values.len(), self.nodes.len());
        let _ = n;
        Ok(Activations { values, bn, mode })
    }

    /// Reverse-mode pass from a scalar loss node: gradient of that scalar
    /// with respect to every trainable parameter. Parameters that do not
    /// influence the loss get zero gradients.
    pub fn backward(&self, acts: &Activations, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let value = acts.value(loss);
        if !value.is_scalar() {
            return Err(Error::shape(
                format!("loss node `{}`", self.nodes[loss.0].name),
                "scalar",
                format!("{:?}", value.shape()),
            ));
        }
        let mut seeds = BTreeMap::new();
        seeds.insert(loss, Tensor::scalar(1.0));
        self.backward_seeded(acts, &seeds)
    }

    /// Reverse-mode pass seeded with explicit output-gradients, used by the
    /// trainer to inject loss gradients at several head nodes at once.
    pub fn backward_seeded(
        &self,
        acts: &Activations,
        seeds: &BTreeMap<NodeId, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>> {
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            let v = acts.value(*id);
            if g.shape() != v.shape() {
                return Err(Error::shape(
                    format!("seed for `{}`", self.nodes[id.0].name),
                    format!("{:?}", v.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            accumulate(&mut node_grads[id.0], g);
        }

        let mut param_grads: BTreeMap<String, Tensor> = self
            .trainable
            .iter()
            .map(|n| (n.clone(), Tensor::zeros(self.params[n].shape())))
            .collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.kind {
                LayerKind::Input { .. } => {}
                LayerKind::Param { .. } => {
                    if let Some(pg) = param_grads.get_mut(&node.params[0]) {
                        for (o, v) in pg.data_mut().iter_mut().zip(grad.data()) {
                            *o += v;
                        }
                    }
                }
                LayerKind::Conv { in_c, out_c, ksize, stride, pad } => {
                    let x = acts.value(NodeId(node.inputs[0]));
                    let (gx, gw, gb) = layers::conv_backward(
                        x,
                        &self.params[&node.params[0]],
                        &grad,
                        *in_c,
                        *out_c,
                        *ksize,
                        *stride,
                        *pad,
                    );
                    add_param_grad(&mut param_grads, &node.params[0], gw);
                    add_param_grad(&mut param_grads, &node.params[1], gb);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::BatchNorm { channels } => {
                    let x = acts.value(NodeId(node.inputs[0]));
                    let gamma = &self.params[&node.params[0]];
                    let (gx, ggamma, gbeta) = match acts.mode {
                        Mode::Train => {
                            let cache = &acts.bn[&idx];
                            layers::batch_norm_backward_train(gamma, cache, &grad, *channels)
                        }
                        Mode::Eval => layers::batch_norm_backward_eval(
                            x,
                            gamma,
                            &self.params[&node.params[2]],
                            &self.params[&node.params[3]],
                            &grad,
                            *channels,
                        ),
                    };
                    add_param_grad(&mut param_grads, &node.params[0], ggamma);
                    add_param_grad(&mut param_grads, &node.params[1], gbeta);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::Relu => {
                    let x = acts.value(NodeId(node.inputs[0]));
                    let gx = layers::relu_backward(x, &grad);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::UpsampleConv { in_c, out_c, ksize } => {
                    let x = acts.value(NodeId(node.inputs[0]));
                    let up = layers::upsample_nearest(x, 2);
                    let (gup, gw, gb) = layers::conv_backward(
                        &up,
                        &self.params[&node.params[0]],
                        &grad,
                        *in_c,
                        *out_c,
                        *ksize,
                        1,
                        (*ksize - 1) / 2,
                    );
                    add_param_grad(&mut param_grads, &node.params[0], gw);
                    add_param_grad(&mut param_grads, &node.params[1], gb);
                    let gx = layers::upsample_nearest_backward(&gup, 2);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::FullyConnected { in_f, out_f } => {
                    let x = acts.value(NodeId(node.inputs[0]));
                    let (gx, gw, gb) =
                        layers::fc_backward(x, &self.params[&node.params[0]], &grad, *in_f, *out_f);
                    add_param_grad(&mut param_grads, &node.params[0], gw);
                    add_param_grad(&mut param_grads, &node.params[1], gb);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::SpatialSoftmax => {
                    let y = acts.value(NodeId(idx));
                    let gx = layers::spatial_softmax_backward(y, &grad);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::GlobalAvgPool => {
                    let x = acts.value(NodeId(node.inputs[0]));
                    let gx = layers::global_avg_pool_backward(x.shape(), &grad);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::PairSoftmax => {
                    let y = acts.value(NodeId(idx));
                    let gx = layers::pair_softmax_backward(y, &grad);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
                LayerKind::Add => {
                    accumulate(&mut node_grads[node.inputs[0]], &grad);
                    accumulate(&mut node_grads[node.inputs[1]], &grad);
                }
                LayerKind::Concat => {
                    let mut offset = 0;
                    let parts: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|i| acts.value(NodeId(*i)).shape()[3])
                        .collect();
                    for (input, c) in node.inputs.iter().zip(&parts) {
                        let gx = layers::concat_slice_backward(&grad, offset, *c);
                        accumulate(&mut node_grads[*input], &gx);
                        offset += c;
                    }
                }
                LayerKind::ReduceSum => {
                    let x = acts.value(NodeId(node.inputs[0]));
                    let gx = Tensor::filled(x.shape(), grad.data()[0]);
                    accumulate(&mut node_grads[node.inputs[0]], &gx);
                }
            }
        }
        Ok(param_grads)
    }

    /// Fold the batch statistics of one training forward pass into the
    /// running statistics (momentum 0.9). Call after the optimizer step.
    pub fn absorb_batch_stats(&mut self, acts: &Activations) {
        const MOMENTUM: f64 = 0.9;
        for (idx, cache) in &acts.bn {
            let node = &self.nodes[*idx];
            let rmean = self.params.get_mut(&node.params[2]).expect("running mean");
            for (r, m) in rmean.data_mut().iter_mut().zip(&cache.mean) {
                *r = MOMENTUM * *r + (1.0 - MOMENTUM) * m;
            }
            let rvar = self.params.get_mut(&node.params[3]).expect("running var");
            for (r, v) in rvar.data_mut().iter_mut().zip(&cache.var) {
                *r = MOMENTUM * *r + (1.0 - MOMENTUM) * v;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => {
            for (o, v) in t.data_mut().iter_mut().zip(g.data()) {
                *o += v;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

fn add_param_grad(grads: &mut BTreeMap<String, Tensor>, name: &str, g: Tensor) {
    if let Some(pg) = grads.get_mut(name) {
        for (o, v) in pg.data_mut().iter_mut().zip(g.data()) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// Nested-loop convolution, the independent oracle for the im2col path.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, ksize: usize, stride: usize, pad: usize) -> Tensor {
        let (n, h, width, in_c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let out_c = w.shape()[0];
        let oh = (h + 2 * pad - ksize) / stride + 1;
        let ow = (width + 2 * pad - ksize) / stride + 1;
        let mut y = Tensor::zeros(&[n, oh, ow, out_c]);
        for i in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..out_c {
                        let mut acc = b.data()[oc];
                        for ky in 0..ksize {
                            for kx in 0..ksize {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy as usize >= h || ix < 0 || ix as usize >= width {
                                    continue;
                                }
                                for ic in 0..in_c {
                                    let wv = w.data()[((oc * ksize + ky) * ksize + kx) * in_c + ic];
                                    acc += wv * x.at4(i, iy as usize, ix as usize, ic);
                                }
                            }
                        }
                        *y.at4_mut(i, oy, ox, oc) = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let mut b = GraphBuilder::new();
        let x = b.input([3, 3, 2]).unwrap();
        let c = b.conv("c", x, 2, 1, 1, 0).unwrap();
        let mut g = b.finish(&mut rng(0)).unwrap();
        // Identity kernel: weight[oc][0][0][ic] = delta(oc, ic), zero bias.
        let w = g.param_mut("c.weight").unwrap();
        w.data_mut().fill(0.0);
        w.data_mut()[0] = 1.0; // oc=0, ic=0
        w.data_mut()[3] = 1.0; // oc=1, ic=1
        let input = random_tensor(&[2, 3, 3, 2], &mut rng(1));
        let acts = g.forward(&input, Mode::Eval).unwrap();
        assert_eq!(acts.value(c).data(), input.data());
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut b = GraphBuilder::new();
        let x = b.input([5, 5, 1]).unwrap();
        let c = b.conv("c", x, 3, 3, 1, 1).unwrap();
        let g = b.finish(&mut rng(2)).unwrap();
        let input = random_tensor(&[2, 5, 5, 1], &mut rng(3));
        let acts = g.forward(&input, Mode::Eval).unwrap();
        let oracle = conv_oracle(&input, g.param("c.weight").unwrap(), g.param("c.bias").unwrap(), 3, 1, 1);
        for (a, o) in acts.value(c).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_conv_matches_oracle() {
        let mut b = GraphBuilder::new();
        let x = b.input([6, 6, 3]).unwrap();
        let c = b.conv("c", x, 4, 3, 2, 1).unwrap();
        let g = b.finish(&mut rng(4)).unwrap();
        let input = random_tensor(&[3, 6, 6, 3], &mut rng(5));
        let acts = g.forward(&input, Mode::Eval).unwrap();
        let oracle = conv_oracle(&input, g.param("c.weight").unwrap(), g.param("c.bias").unwrap(), 3, 2, 1);
        assert_eq!(acts.value(c).shape(), &[3, 3, 3, 4]);
        for (a, o) in acts.value(c).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_clamps_all_negative_input_to_zero() {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 2, 1]).unwrap();
        let r = b.relu("r", x).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let input = Tensor::from_vec(&[1, 2, 2, 1], vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        let acts = g.forward(&input, Mode::Eval).unwrap();
        assert!(acts.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut b = GraphBuilder::new();
        let _x = b.input([1, 1, 1]).unwrap();
        let p = b.param("p", Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap()).unwrap();
        let loss = b.reduce_sum("loss", p).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let acts = g.forward(&Tensor::zeros(&[1, 1, 1, 1]), Mode::Eval).unwrap();
        let grads = g.backward(&acts, loss).unwrap();
        assert_eq!(grads["p.value"].data(), &[1.0; 6]);
    }

    #[test]
    fn disconnected_branch_gets_zero_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 2, 1]).unwrap();
        let fa = b.fully_connected("branch_a", x, 2).unwrap();
        let _fb = b.fully_connected("branch_b", x, 2).unwrap();
        let loss = b.reduce_sum("loss", fa).unwrap();
        let g = b.finish(&mut rng(11)).unwrap();
        let input = random_tensor(&[2, 2, 2, 1], &mut rng(12));
        let acts = g.forward(&input, Mode::Eval).unwrap();
        let grads = g.backward(&acts, loss).unwrap();
        assert!(grads["branch_b.weight"].data().iter().all(|&v| v == 0.0));
        assert!(grads["branch_b.bias"].data().iter().all(|&v| v == 0.0));
        assert!(grads["branch_a.weight"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 2, 1]).unwrap();
        let r = b.relu("r", x).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let input = Tensor::zeros(&[1, 2, 2, 1]);
        let acts = g.forward(&input, Mode::Eval).unwrap();
        let err = g.backward(&acts, r).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn residual_bottleneck_with_zero_weights_is_identity() {
        for mode in [Mode::Train, Mode::Eval] {
            let mut b = GraphBuilder::new();
            let x = b.input([4, 4, 8]).unwrap();
            let blk = b.residual_bottleneck("blk", x, 8, 1).unwrap();
            let mut g = b.finish(&mut rng(20)).unwrap();
            for name in ["blk.reduce.weight", "blk.mid.weight", "blk.expand.weight"] {
                g.param_mut(name).unwrap().data_mut().fill(0.0);
            }
            let input = random_tensor(&[2, 4, 4, 8], &mut rng(21));
            let acts = g.forward(&input, mode).unwrap();
            for (a, o) in acts.value(blk).data().iter().zip(input.data()) {
                assert!((a - o).abs() < 1e-12, "mode {mode:?}");
            }
        }
    }

    #[test]
    fn residual_bottleneck_preserves_spatial_shape() {
        let mut b = GraphBuilder::new();
        let x = b.input([8, 8, 4]).unwrap();
        let blk = b.residual_bottleneck("blk", x, 16, 1).unwrap();
        let blk2 = b.residual_bottleneck("blk2", blk, 32, 2).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let acts = g.forward(&Tensor::zeros(&[1, 8, 8, 4]), Mode::Eval).unwrap();
        assert_eq!(acts.value(blk).shape(), &[1, 8, 8, 16]);
        assert_eq!(acts.value(blk2).shape(), &[1, 4, 4, 32]);
    }

    #[test]
    fn spatial_softmax_on_constant_map_is_uniform() {
        let mut b = GraphBuilder::new();
        let x = b.input([4, 5, 2]).unwrap();
        let s = b.spatial_softmax("s", x).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let input = Tensor::filled(&[1, 4, 5, 2], 3.7);
        let acts = g.forward(&input, Mode::Eval).unwrap();
        for &v in acts.value(s).data() {
            assert!((v - 1.0 / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_softmax_sums_to_one_per_channel() {
        let mut b = GraphBuilder::new();
        let x = b.input([6, 6, 3]).unwrap();
        let s = b.spatial_softmax("s", x).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        for seed in 0..20 {
            let mut r = rng(seed);
            let mut input = Tensor::zeros(&[2, 6, 6, 3]);
            for v in input.data_mut() {
                *v = r.gen_range(-50.0..50.0);
            }
            let acts = g.forward(&input, Mode::Eval).unwrap();
            let y = acts.value(s);
            for n in 0..2 {
                for c in 0..3 {
                    let mut sum = 0.0;
                    for h in 0..6 {
                        for w in 0..6 {
                            let v = y.at4(n, h, w, c);
                            assert!(v >= 0.0);
                            sum += v;
                        }
                    }
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn global_avg_pool_matches_direct_mean() {
        let mut b = GraphBuilder::new();
        let x = b.input([3, 4, 2]).unwrap();
        let p = b.global_avg_pool("p", x).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let input = random_tensor(&[2, 3, 4, 2], &mut rng(33));
        let acts = g.forward(&input, Mode::Eval).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                let mut mean = 0.0;
                for h in 0..3 {
                    for w in 0..4 {
                        mean += input.at4(n, h, w, c);
                    }
                }
                mean /= 12.0;
                assert!((acts.value(p).at4(n, 0, 0, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pair_softmax_pairs_sum_to_one() {
        let mut b = GraphBuilder::new();
        let x = b.input([1, 1, 6]).unwrap();
        let p = b.pair_softmax("p", x).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let input = random_tensor(&[3, 1, 1, 6], &mut rng(44));
        let acts = g.forward(&input, Mode::Eval).unwrap();
        for pair in acts.value(p).data().chunks(2) {
            assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
            assert!(pair[0] >= 0.0 && pair[1] >= 0.0);
        }
    }

    #[test]
    fn upsample_nearest_replicates_blocks() {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 2, 1]).unwrap();
        let u = b.upsample_conv("u", x, 1, 1).unwrap();
        let mut g = b.finish(&mut rng(0)).unwrap();
        // 1x1 identity conv after the upsample isolates the upsampling.
        g.param_mut("u.weight").unwrap().data_mut()[0] = 1.0;
        let input = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let acts = g.forward(&input, Mode::Eval).unwrap();
        let expected = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(acts.value(u).data(), &expected);
    }

    #[test]
    fn concat_stacks_channels_and_splits_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 2, 2]).unwrap();
        let r = b.relu("r", x).unwrap();
        let c1 = b.conv("c1", x, 1, 1, 1, 0).unwrap();
        let cat = b.concat("cat", &[r, c1]).unwrap();
        let loss = b.reduce_sum("loss", cat).unwrap();
        let g = b.finish(&mut rng(55)).unwrap();
        let input = random_tensor(&[1, 2, 2, 2], &mut rng(56));
        let acts = g.forward(&input, Mode::Eval).unwrap();
        assert_eq!(acts.value(cat).shape(), &[1, 2, 2, 3]);
        for h in 0..2 {
            for w in 0..2 {
                assert_eq!(acts.value(cat).at4(0, h, w, 0), acts.value(r).at4(0, h, w, 0));
                assert_eq!(acts.value(cat).at4(0, h, w, 2), acts.value(c1).at4(0, h, w, 0));
            }
        }
        let err = check_gradients(&g, &input, loss, Mode::Eval, 1e-5).unwrap();
        assert!(err <= 1e-4);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut b = GraphBuilder::new();
        let x = b.input([8, 8, 3]).unwrap();
        let blk = b.residual_bottleneck("blk", x, 8, 2).unwrap();
        let s = b.spatial_softmax("s", blk).unwrap();
        let g = b.finish(&mut rng(7)).unwrap();
        let input = random_tensor(&[4, 8, 8, 3], &mut rng(8));
        let a1 = g.forward(&input, Mode::Train).unwrap();
        let a2 = g.forward(&input, Mode::Train).unwrap();
        for id in 0..g.num_nodes() {
            let (t1, t2) = (a1.value(NodeId(id)), a2.value(NodeId(id)));
            assert_eq!(t1.data(), t2.data(), "node {id} differs between runs");
        }
        let _ = s;
    }

    #[test]
    fn input_shape_mismatch_is_reported() {
        let mut b = GraphBuilder::new();
        let _ = b.input([4, 4, 3]).unwrap();
        let g = b.finish(&mut rng(0)).unwrap();
        let err = g.forward(&Tensor::zeros(&[1, 4, 4, 1]), Mode::Eval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input") && msg.contains("4, 4, 3"), "{msg}");
    }

    #[test]
    fn builder_rejects_bad_configs() {
        let mut b = GraphBuilder::new();
        let x = b.input([4, 4, 3]).unwrap();
        assert!(b.conv("c0", x, 0, 3, 1, 1).is_err());
        assert!(b.fully_connected("f0", x, 0).is_err());
        assert!(b.upsample_conv("u0", x, 2, 4).is_err());
        let y = b.conv("c1", x, 2, 3, 1, 1).unwrap();
        assert!(b.add("a0", x, y).is_err());
        assert!(b.conv("c1", x, 2, 3, 1, 1).is_err(), "duplicate name must fail");
    }

    #[test]
    fn absorb_batch_stats_moves_running_statistics() {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 2, 1]).unwrap();
        let bn = b.batch_norm("bn", x).unwrap();
        let mut g = b.finish(&mut rng(0)).unwrap();
        let input = Tensor::filled(&[1, 2, 2, 1], 10.0);
        let acts = g.forward(&input, Mode::Train).unwrap();
        g.absorb_batch_stats(&acts);
        let rm = g.param("bn.running_mean").unwrap().data()[0];
        assert!((rm - 1.0).abs() < 1e-12, "0.9 * 0 + 0.1 * 10 = 1, got {rm}");
        let _ = bn;
    }
}
