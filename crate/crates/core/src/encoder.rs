//! Graph structure encoder: input projections, stacked node/edge message
//! passing layers, max pooling, a linear head and sign binarization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{parse_kv, ConfigError};
use crate::featurize::{EdgeList, ProteinGraph};
use crate::hash_index::HashCode;
use crate::neural::{
    Activation, Adam, BatchNormLayer, BatchNormState, BatchStats, Checkpoint, LinearLayer, Mlp2, Mode, NeuralError,
    ParamSet, Scalar, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("graph `{0}` has no residues")]
    EmptyGraph(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match the encoder layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub code_length: usize,
    pub node_in: usize,
    pub edge_in: usize,
    /// Neighbour count the graphs were built with; informational.
    pub k: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            n_layers: 6,
            code_length: 400,
            node_in: crate::featurize::NODE_FEATURE_DIM,
            edge_in: crate::featurize::ATOM_PAIRS * 16,
            k: 30,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden_dim == 0 || self.n_layers == 0 || self.code_length == 0 || self.node_in == 0 || self.edge_in == 0 {
            return Err(ConfigError::Invalid("encoder dimensions must be positive".into()).into());
        }
        Ok(())
    }

    /// Reads the encoder keys from run-config text; other keys are ignored.
    pub fn from_text(text: &str) -> Result<Self, EncoderError> {
        let mut c = Self::default();
        let mut n_rbf = 16usize;
        let bad = |k: &str, v: &str| ConfigError::BadValue { key: k.into(), value: v.into() };
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "hidden" => c.hidden_dim = v.parse().map_err(|_| bad(&k, &v))?,
                "n_layers" => c.n_layers = v.parse().map_err(|_| bad(&k, &v))?,
                "code_length" => c.code_length = v.parse().map_err(|_| bad(&k, &v))?,
                "k_nn" => c.k = v.parse().map_err(|_| bad(&k, &v))?,
                "n_rbf" => n_rbf = v.parse().map_err(|_| bad(&k, &v))?,
                "activation" => c.activation = v.parse().map_err(|_| bad(&k, &v))?,
                _ => {}
            }
        }
        c.edge_in = crate::featurize::ATOM_PAIRS * n_rbf;
        c.validate()?;
        Ok(c)
    }
}

/// Parameter slots of one message passing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub node_mlp: Mlp2,
    pub mlp: Mlp2,
    pub node_bn: BatchNormLayer,
    pub edge_mlp: Mlp2,
    pub edge_bn: BatchNormLayer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayout {
    pub node_proj: LinearLayer,
    pub edge_proj: LinearLayer,
    pub layers: Vec<LayerParams>,
    pub head: LinearLayer,
}

impl EncoderLayout {
    fn locate<T: Scalar>(params: &ParamSet<T>, n_layers: usize) -> Option<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                Some(LayerParams {
                    node_mlp: Mlp2::locate(params, &format!("layer{l}.node_mlp"))?,
                    mlp: Mlp2::locate(params, &format!("layer{l}.mlp"))?,
                    node_bn: BatchNormLayer::locate(params, &format!("layer{l}.node_bn"))?,
                    edge_mlp: Mlp2::locate(params, &format!("layer{l}.edge_mlp"))?,
                    edge_bn: BatchNormLayer::locate(params, &format!("layer{l}.edge_bn"))?,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            node_proj: LinearLayer::locate(params, "node_proj")?,
            edge_proj: LinearLayer::locate(params, "edge_proj")?,
            layers,
            head: LinearLayer::locate(params, "head")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    pub layout: EncoderLayout,
    pub node_bn: Vec<BatchNormState<T>>,
    pub edge_bn: Vec<BatchNormState<T>>,
}

/// Which batchnorm a set of batch statistics belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSlot {
    Node(usize),
    Edge(usize),
}

pub fn init_params<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>, EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden_dim;
    let mut params = ParamSet::new();
    let node_proj = LinearLayer::init(&mut params, "node_proj", config.node_in, h, &mut rng);
    let edge_proj = LinearLayer::init(&mut params, "edge_proj", config.edge_in, h, &mut rng);
    let layers = (0..config.n_layers)
        .map(|l| LayerParams {
            node_mlp: Mlp2::init(&mut params, &format!("layer{l}.node_mlp"), (3 * h, h, h), &mut rng),
            mlp: Mlp2::init(&mut params, &format!("layer{l}.mlp"), (h, h, h), &mut rng),
            node_bn: BatchNormLayer::init(&mut params, &format!("layer{l}.node_bn"), h),
            edge_mlp: Mlp2::init(&mut params, &format!("layer{l}.edge_mlp"), (3 * h, h, h), &mut rng),
            edge_bn: BatchNormLayer::init(&mut params, &format!("layer{l}.edge_bn"), h),
        })
        .collect();
    let head = LinearLayer::init(&mut params, "head", h, config.code_length, &mut rng);
    Ok(EncoderParams {
        config: config.clone(),
        params,
        layout: EncoderLayout { node_proj, edge_proj, layers, head },
        node_bn: vec![BatchNormState::new(h); config.n_layers],
        edge_bn: vec![BatchNormState::new(h); config.n_layers],
    })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            node_bn: self.node_bn.iter().map(BatchNormState::cast).collect(),
            edge_bn: self.edge_bn.iter().map(BatchNormState::cast).collect(),
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn absorb_stats(&mut self, stats: &[(BnSlot, BatchStats<T>)]) {
        for (slot, s) in stats {
            match *slot {
                BnSlot::Node(l) => self.node_bn[l].update(s),
                BnSlot::Edge(l) => self.edge_bn[l].update(s),
            }
        }
    }
}

impl EncoderParams<f32> {
    pub fn to_checkpoint(&self, config_text: String, adam: Option<Adam>) -> Checkpoint {
        let mut batchnorm = Vec::with_capacity(2 * self.config.n_layers);
        for l in 0..self.config.n_layers {
            batchnorm.push((format!("layer{l}.node_bn"), self.node_bn[l].clone()));
            batchnorm.push((format!("layer{l}.edge_bn"), self.edge_bn[l].clone()));
        }
        Checkpoint { config_text, params: self.params.clone(), batchnorm, adam }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, EncoderError> {
        let config = EncoderConfig::from_text(&ck.config_text)?;
        let expected = init_params::<f32>(&config, 0)?;
        if ck.params.shapes() != expected.params.shapes() {
            return Err(EncoderError::Layout("parameter shapes differ from the configured encoder".into()));
        }
        let layout = EncoderLayout::locate(&ck.params, config.n_layers)
            .ok_or_else(|| EncoderError::Layout("missing parameter names".into()))?;
        if layout != expected.layout {
            return Err(EncoderError::Layout("parameter order differs".into()));
        }
        let find = |name: String| {
            ck.batchnorm
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| s.clone())
                .filter(|s| s.running_mean.len() == config.hidden_dim && s.running_var.len() == config.hidden_dim)
                .ok_or(EncoderError::Layout(format!("missing batchnorm state {name}")))
        };
        let node_bn = (0..config.n_layers).map(|l| find(format!("layer{l}.node_bn"))).collect::<Result<_, _>>()?;
        let edge_bn = (0..config.n_layers).map(|l| find(format!("layer{l}.edge_bn"))).collect::<Result<_, _>>()?;
        Ok(Self { config, params: ck.params.clone(), layout, node_bn, edge_bn })
    }
}

/// Several graphs stacked along the node and edge axes.
#[derive(Debug, Clone)]
pub struct GraphBatch<T> {
    pub nodes: Tensor<T>,
    pub edge_feats: Tensor<T>,
    pub edges: EdgeList,
    /// Row offsets of each graph in `nodes`, length `graphs + 1`.
    pub offsets: Vec<usize>,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn new(graphs: &[&ProteinGraph], config: &EncoderConfig) -> Result<Self, EncoderError> {
        if graphs.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let n: usize = graphs.iter().map(|g| g.n_residues).sum();
        let m: usize = graphs.iter().map(|g| g.n_edges()).sum();
        let mut nodes = Vec::with_capacity(n * config.node_in);
        let mut edge_feats = Vec::with_capacity(m * config.edge_in);
        let mut edges = EdgeList { src: Vec::with_capacity(m), dst: Vec::with_capacity(m) };
        let mut offsets = vec![0usize];
        for g in graphs {
            if g.n_residues == 0 {
                return Err(EncoderError::EmptyGraph(g.id.clone()));
            }
            if g.node_feats.len() != g.n_residues * config.node_in {
                return Err(EncoderError::ShapeMismatch(format!("graph `{}` node features are not {} wide", g.id, config.node_in)));
            }
            if g.edge_dim != config.edge_in || g.edge_feats.len() != g.n_edges() * config.edge_in {
                return Err(EncoderError::ShapeMismatch(format!(
                    "graph `{}` has edge dim {}, encoder expects {}",
                    g.id, g.edge_dim, config.edge_in
                )));
            }
            let base = *offsets.last().unwrap();
            for (i, j) in g.edges.iter() {
                if i >= g.n_residues || j >= g.n_residues {
                    return Err(EncoderError::ShapeMismatch(format!("graph `{}` edge ({i}, {j}) out of range", g.id)));
                }
                edges.src.push((base + i) as u32);
                edges.dst.push((base + j) as u32);
            }
            nodes.extend(g.node_feats.iter().map(|&v| T::of(v)));
            edge_feats.extend(g.edge_feats.iter().map(|&v| T::of(v)));
            offsets.push(base + g.n_residues);
        }
        Ok(Self {
            nodes: Tensor::from_vec(n, config.node_in, nodes)?,
            edge_feats: Tensor::from_vec(m, config.edge_in, edge_feats)?,
            edges,
            offsets,
        })
    }
}

fn check_layer_inputs<T: Scalar>(tape: &Tape<T>, h: Var, e: Var, edges: &EdgeList) -> Result<usize, EncoderError> {
    let (hv, ev) = (tape.value(h), tape.value(e));
    if ev.rows != edges.len() || ev.cols != hv.cols || edges.src.len() != edges.dst.len() {
        return Err(EncoderError::ShapeMismatch(format!(
            "h is {:?}, e is {:?}, {} edges",
            hv.shape(),
            ev.shape(),
            edges.len()
        )));
    }
    Ok(hv.rows)
}

/// `h̃_i = BN(h_i + MLP(h_i + mean_{j ∈ N(i)} NodeMLP(h_i ‖ h_j ‖ e_ij)))`
/// where `N(i)` are the out-neighbours of `i`.
#[allow(clippy::too_many_arguments)]
pub fn node_update<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    layer: &LayerParams,
    bn: &BatchNormState<T>,
    act: Activation,
    h: Var,
    e: Var,
    edges: &EdgeList,
    mode: Mode,
) -> Result<(Var, Option<BatchStats<T>>), EncoderError> {
    let n = check_layer_inputs(tape, h, e, edges)?;
    let hi = tape.gather_rows(h, &edges.src)?;
    let hj = tape.gather_rows(h, &edges.dst)?;
    let cat = tape.concat_cols(&[hi, hj, e])?;
    let msg = layer.node_mlp.forward(tape, params, cat, act)?;
    let agg = tape.mean_aggregate(msg, &edges.src, n)?;
    let u = tape.add(h, agg)?;
    let v = layer.mlp.forward(tape, params, u, act)?;
    let z = tape.add(h, v)?;
    Ok(layer.node_bn.forward(tape, params, bn, z, mode)?)
}

/// `e'_ij = BN(e_ij + EdgeMLP(h̃_i ‖ h̃_j ‖ e_ij))`
#[allow(clippy::too_many_arguments)]
pub fn edge_update<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    layer: &LayerParams,
    bn: &BatchNormState<T>,
    act: Activation,
    h: Var,
    e: Var,
    edges: &EdgeList,
    mode: Mode,
) -> Result<(Var, Option<BatchStats<T>>), EncoderError> {
    check_layer_inputs(tape, h, e, edges)?;
    let hi = tape.gather_rows(h, &edges.src)?;
    let hj = tape.gather_rows(h, &edges.dst)?;
    let cat = tape.concat_cols(&[hi, hj, e])?;
    let upd = layer.edge_mlp.forward(tape, params, cat, act)?;
    let z = tape.add(e, upd)?;
    Ok(layer.edge_bn.forward(tape, params, bn, z, mode)?)
}

/// Output of a batched forward pass.
pub struct Forward<T> {
    /// `graphs x code_length` embeddings, one row per input graph.
    pub y: Var,
    /// Final node representations, before pooling.
    pub nodes: Var,
    /// Row offsets of each graph in `nodes`.
    pub offsets: Vec<usize>,
    /// Train-mode batch statistics to fold into the running estimates.
    pub stats: Vec<(BnSlot, BatchStats<T>)>,
}

/// Runs the encoder on several graphs at once. In train mode every batchnorm
/// normalizes over all nodes (or edges) of the batch jointly.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderParams<T>,
    graphs: &[&ProteinGraph],
    mode: Mode,
) -> Result<Forward<T>, EncoderError> {
    let batch = GraphBatch::<T>::new(graphs, &enc.config)?;
    forward_graph_batch(tape, enc, batch, mode)
}

pub fn forward_graph_batch<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderParams<T>,
    batch: GraphBatch<T>,
    mode: Mode,
) -> Result<Forward<T>, EncoderError> {
    let p = &enc.params;
    let act = enc.config.activation;
    let x = tape.constant(batch.nodes)?;
    let ef = tape.constant(batch.edge_feats)?;
    let mut h = enc.layout.node_proj.forward(tape, p, x)?;
    let mut e = enc.layout.edge_proj.forward(tape, p, ef)?;
    let mut stats = Vec::new();
    let last = enc.layout.layers.len() - 1;
    for (l, layer) in enc.layout.layers.iter().enumerate() {
        let (h_new, s) = node_update(tape, p, layer, &enc.node_bn[l], act, h, e, &batch.edges, mode)?;
        stats.extend(s.map(|s| (BnSlot::Node(l), s)));
        // The final edge update cannot reach the pooled output.
        if l < last && !batch.edges.is_empty() {
            let (e_new, s) = edge_update(tape, p, layer, &enc.edge_bn[l], act, h_new, e, &batch.edges, mode)?;
            stats.extend(s.map(|s| (BnSlot::Edge(l), s)));
            e = e_new;
        }
        h = h_new;
    }
    let pooled = tape.segment_max(h, &batch.offsets)?;
    let y = enc.layout.head.forward(tape, p, pooled)?;
    Ok(Forward { y, nodes: h, offsets: batch.offsets, stats })
}

/// Real-valued embedding of one structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureEmbedding {
    pub id: String,
    pub y: Vec<f64>,
    pub n_residues: usize,
}

pub fn encode<T: Scalar>(graph: &ProteinGraph, enc: &EncoderParams<T>, mode: Mode) -> Result<StructureEmbedding, EncoderError> {
    let mut tape = Tape::new();
    let out = forward_batch(&mut tape, enc, &[graph], mode)?;
    Ok(StructureEmbedding { id: graph.id.clone(), y: tape.value(out.y).to_f64_vec(), n_residues: graph.n_residues })
}

/// Bit `k` is set when `y_k > 0`; zero maps to a cleared bit.
pub fn binarize(emb: &StructureEmbedding) -> HashCode {
    HashCode::from_signs(emb.id.clone(), emb.n_residues as u32, &emb.y)
}

/// Infer-mode codes for many graphs, in input order.
pub fn encode_all<T: Scalar>(graphs: &[ProteinGraph], enc: &EncoderParams<T>) -> Result<Vec<HashCode>, EncoderError>
where
    EncoderParams<T>: Sync,
{
    graphs.par_iter().map(|g| encode(g, enc, Mode::Infer).map(|e| binarize(&e))).collect()
}
