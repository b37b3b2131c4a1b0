//! The end-to-end localizer network: a position encoder and node encoder
//! feeding a spatial-temporal attention stack (two spatial layers, a fusion
//! layer that collapses the channel axis, a temporal layer) and a
//! per-frame classification head over the local areas.
//!
//! The channel fusion is what lets one parameter set serve any number of
//! nodes: spatial attention is permutation-equivariant over channels, the
//! learned-query fusion is permutation-invariant, and everything after it
//! sees a single channel.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, ParamStore, Real, Tensor, Var};
use crate::dsp::FeatureBlock;
use crate::grid::{AreaIndex, GridSpec, OneHotCode};
use crate::rng;
use crate::Sample;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("forward requires at least one node")]
    NoNodes,
    #[error("node {node} has {got} frames, expected {want}")]
    InconsistentFrames { node: usize, got: usize, want: usize },
    #[error("node {node} feature width {got} does not match config {want}")]
    FeatureWidth { node: usize, got: usize, want: usize },
    #[error("node {node} one-hot dimension {got} does not match m_total {want}")]
    OneHotDim { node: usize, got: usize, want: usize },
    #[error("node count {got} exceeds feature block channels {have}")]
    NodeCount { got: usize, have: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Pass-through, for affine-property tests only.
    Identity,
}

/// Architecture of the localizer. Defaults reproduce the published layer
/// widths; smaller values scale every stage down together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of local areas (classes).
    pub m_total: usize,
    /// Acoustic feature width 2F fed to the node encoder.
    pub feature_dim: usize,
    /// Output width of each encoder; the concatenated model width is twice this.
    pub d_embed: usize,
    pub n_heads: usize,
    pub n_spatial_layers: usize,
    /// Hidden width of the position encoder.
    pub pos_hidden: usize,
    /// Hidden widths of the node encoder.
    pub node_hidden: Vec<usize>,
    /// Hidden widths of the output head.
    pub head_widths: Vec<usize>,
    pub activation: Activation,
}

impl ModelConfig {
    /// Published architecture for `m_total` classes.
    pub fn paper(m_total: usize) -> Self {
        ModelConfig {
            m_total,
            feature_dim: 512,
            d_embed: 256,
            n_heads: 4,
            n_spatial_layers: 2,
            pos_hidden: 512,
            node_hidden: vec![1024, 512],
            head_widths: vec![1024, 1024],
            activation: Activation::Relu,
        }
    }

    /// Concatenated embedding width D.
    pub fn d_model(&self) -> usize {
        2 * self.d_embed
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.m_total == 0 {
            return Err(ModelError::BadConfig("m_total must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return Err(ModelError::BadConfig(format!(
                "feature_dim must be even and positive, got {}",
                self.feature_dim
            )));
        }
        if self.d_embed == 0 || self.n_heads == 0 || self.d_model() % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model(),
                self.n_heads
            )));
        }
        if self.n_spatial_layers == 0 {
            return Err(ModelError::BadConfig("need at least one spatial layer".into()));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut pos = vec![(self.m_total, self.pos_hidden), (self.pos_hidden, self.d_embed)];
        if self.pos_hidden == 0 {
            pos = vec![(self.m_total, self.d_embed)];
        }
        let mut node = Vec::new();
        let mut prev = self.feature_dim;
        for &h in &self.node_hidden {
            node.push((prev, h));
            prev = h;
        }
        node.push((prev, self.d_embed));
        let mut head = Vec::new();
        let mut prev = self.d_model();
        for &h in &self.head_widths {
            head.push((prev, h));
            prev = h;
        }
        head.push((prev, self.m_total));
        (pos, node, head)
    }

    /// Names and shapes of every parameter, in creation order.
    fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.d_model();
        let (pos, node, head) = self.encoder_dims();
        let mut out = Vec::new();
        let linear_chain = |prefix: &str, dims: &[(usize, usize)], out: &mut Vec<(String, usize, usize)>| {
            for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), fan_in, fan_out));
                out.push((format!("{prefix}.{i}.bias"), 1, fan_out));
            }
        };
        linear_chain("position_encoder", &pos, &mut out);
        linear_chain("node_encoder", &node, &mut out);
        let attn_block = |prefix: &str, with_query: bool, out: &mut Vec<(String, usize, usize)>| {
            if with_query {
                out.push((format!("{prefix}.attn.query"), 1, d));
            } else {
                out.push((format!("{prefix}.attn.wq"), d, d));
            }
            out.push((format!("{prefix}.attn.wk"), d, d));
            out.push((format!("{prefix}.attn.wv"), d, d));
            out.push((format!("{prefix}.attn.wo"), d, d));
            out.push((format!("{prefix}.norm1.gain"), 1, d));
            out.push((format!("{prefix}.norm1.shift"), 1, d));
            out.push((format!("{prefix}.ffn.0.weight"), d, d));
            out.push((format!("{prefix}.ffn.0.bias"), 1, d));
            out.push((format!("{prefix}.ffn.1.weight"), d, d));
            out.push((format!("{prefix}.ffn.1.bias"), 1, d));
            out.push((format!("{prefix}.norm2.gain"), 1, d));
            out.push((format!("{prefix}.norm2.shift"), 1, d));
        };
        for l in 0..self.n_spatial_layers {
            attn_block(&format!("spatial.{l}"), false, &mut out);
        }
        attn_block("fusion", true, &mut out);
        attn_block("temporal", false, &mut out);
        linear_chain("head", &head, &mut out);
        out
    }

    /// Scalar parameter count implied by the architecture.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

fn glorot<R: Real>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<R> {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..rows * cols)
        .map(|_| R::cast(rng::uniform(rng, -limit, limit)))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Fresh parameter store for `cfg`, seeded deterministically. Weights are
/// Glorot-uniform; biases and norm shifts zero; norm gains one.
pub fn init_params<R: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<R>, ModelError> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, 0x696e_6974);
    let mut store = ParamStore::new();
    for (name, rows, cols) in cfg.param_shapes() {
        let tensor = if name.ends_with(".bias") || name.ends_with(".shift") {
            Tensor::zeros(rows, cols)
        } else if name.ends_with(".gain") {
            Tensor::from_vec(rows, cols, vec![R::one(); rows * cols])
        } else if name.ends_with(".query") {
            // same scheme as a D x 1 projection
            glorot(rows, cols, cols, 1, &mut rng)
        } else {
            glorot(rows, cols, rows, cols, &mut rng)
        };
        store.insert(&name, tensor)?;
    }
    Ok(store)
}

/// One node's model input: where it is and what it recorded.
#[derive(Debug, Clone)]
pub struct NodeInput<R> {
    pub one_hot: OneHotCode,
    /// `n_frames x feature_dim`, frame rows.
    pub features: Tensor<R>,
}

/// Model inputs for (a subset of) the nodes of a rendered sample.
pub fn node_inputs<R: Real>(
    grid: &GridSpec,
    sample: &Sample,
    features: &FeatureBlock,
    node_subset: &[usize],
) -> Result<Vec<NodeInput<R>>, ModelError> {
    let t = features.n_frames();
    let f = features.feature_dim();
    let mut out = Vec::with_capacity(node_subset.len());
    for &n in node_subset {
        if n >= features.n_nodes() {
            return Err(ModelError::NodeCount { got: n + 1, have: features.n_nodes() });
        }
        let mut data = vec![R::zero(); t * f];
        let mut col = vec![0.0f32; f];
        for frame in 0..t {
            features.frame_into(n, frame, &mut col);
            for (feat, &v) in col.iter().enumerate() {
                data[frame * f + feat] = R::cast(v as f64);
            }
        }
        out.push(NodeInput {
            one_hot: grid.one_hot(sample.node_areas[n])?,
            features: Tensor::from_vec(t, f, data),
        });
    }
    Ok(out)
}

fn activation<R: Real>(g: &mut Graph<R>, cfg: &ModelConfig, x: Var) -> Result<Var, GraphError> {
    match cfg.activation {
        Activation::Relu => g.relu(x),
        Activation::Identity => Ok(x),
    }
}

fn linear_chain<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    prefix: &str,
    n_layers: usize,
    mut x: Var,
    relu_after_last: bool,
) -> Result<Var, GraphError> {
    for i in 0..n_layers {
        let w = g.param(&format!("{prefix}.{i}.weight"), store)?;
        let b = g.param(&format!("{prefix}.{i}.bias"), store)?;
        x = g.linear(x, w, b)?;
        if i + 1 < n_layers || relu_after_last {
            x = activation(g, cfg, x)?;
        }
    }
    Ok(x)
}

/// Position encoder: one-hot rows -> `d_embed` embeddings, shared weights.
pub fn position_encode<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    one_hots: Var,
) -> Result<Var, GraphError> {
    linear_chain(g, store, cfg, "position_encoder", 2, one_hots, false)
}

/// Node encoder: acoustic feature rows -> `d_embed` embeddings, shared
/// across nodes and frames.
pub fn node_encode<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    features: Var,
) -> Result<Var, GraphError> {
    linear_chain(g, store, cfg, "node_encoder", cfg.node_hidden.len() + 1, features, false)
}

// Scaled dot-product multi-head self-attention over the rows of x (n x D).
fn mha<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
) -> Result<Var, GraphError> {
    let dh = cfg.head_dim();
    let wq = g.param(&format!("{prefix}.attn.wq"), store)?;
    let wk = g.param(&format!("{prefix}.attn.wk"), store)?;
    let wv = g.param(&format!("{prefix}.attn.wv"), store)?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
        let attn = g.softmax_axis(1, scaled)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat(1, &heads)?;
    let wo = g.param(&format!("{prefix}.attn.wo"), store)?;
    g.matmul(cat, wo)
}

// Fusion attention: the query projection is replaced by a learnable vector,
// collapsing the n rows of x into one.
fn fused_mha<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var, GraphError> {
    let dh = cfg.head_dim();
    let query = g.param("fusion.attn.query", store)?;
    let wk = g.param("fusion.attn.wk", store)?;
    let wv = g.param("fusion.attn.wv", store)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(query, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
        let attn = g.softmax_axis(1, scaled)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat(1, &heads)?;
    let wo = g.param("fusion.attn.wo", store)?;
    g.matmul(cat, wo)
}

// residual -> layer norm -> FFN -> residual -> layer norm
fn post_attention<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    prefix: &str,
    residual: Var,
    attn_out: Var,
) -> Result<Var, GraphError> {
    let sum = g.add(residual, attn_out)?;
    let g1 = g.param(&format!("{prefix}.norm1.gain"), store)?;
    let s1 = g.param(&format!("{prefix}.norm1.shift"), store)?;
    let h = g.layer_norm(sum, g1, s1)?;

    let w0 = g.param(&format!("{prefix}.ffn.0.weight"), store)?;
    let b0 = g.param(&format!("{prefix}.ffn.0.bias"), store)?;
    let mid = g.linear(h, w0, b0)?;
    let mid = activation(g, cfg, mid)?;
    let w1 = g.param(&format!("{prefix}.ffn.1.weight"), store)?;
    let b1 = g.param(&format!("{prefix}.ffn.1.bias"), store)?;
    let ffn = g.linear(mid, w1, b1)?;

    let sum2 = g.add(h, ffn)?;
    let g2 = g.param(&format!("{prefix}.norm2.gain"), store)?;
    let s2 = g.param(&format!("{prefix}.norm2.shift"), store)?;
    g.layer_norm(sum2, g2, s2)
}

/// Cross-channel attention within one frame: tokens are the N node channels.
pub fn spatial_layer<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    layer: usize,
    e_frame: Var,
) -> Result<Var, GraphError> {
    let prefix = format!("spatial.{layer}");
    let attn = mha(g, store, cfg, &prefix, e_frame)?;
    post_attention(g, store, cfg, &prefix, e_frame, attn)
}

/// Learned-query attention that collapses the channel axis; the residual is
/// the channel mean so shapes match.
pub fn fusion_layer<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    e_frame: Var,
) -> Result<Var, GraphError> {
    let attn = fused_mha(g, store, cfg, e_frame)?;
    let residual = g.mean_axis(0, e_frame)?;
    post_attention(g, store, cfg, "fusion", residual, attn)
}

/// Cross-frame attention: tokens are the T frames of the fused feature.
pub fn temporal_layer<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    e_fused: Var,
) -> Result<Var, GraphError> {
    let attn = mha(g, store, cfg, "temporal", e_fused)?;
    post_attention(g, store, cfg, "temporal", e_fused, attn)
}

fn validate_inputs<R: Real>(cfg: &ModelConfig, nodes: &[NodeInput<R>]) -> Result<usize, ModelError> {
    cfg.validate()?;
    if nodes.is_empty() {
        return Err(ModelError::NoNodes);
    }
    let t = nodes[0].features.rows();
    for (i, n) in nodes.iter().enumerate() {
        if n.features.rows() != t {
            return Err(ModelError::InconsistentFrames { node: i, got: n.features.rows(), want: t });
        }
        if n.features.cols() != cfg.feature_dim {
            return Err(ModelError::FeatureWidth { node: i, got: n.features.cols(), want: cfg.feature_dim });
        }
        if n.one_hot.dim() != cfg.m_total {
            return Err(ModelError::OneHotDim { node: i, got: n.one_hot.dim(), want: cfg.m_total });
        }
    }
    Ok(t)
}

/// Per-frame concatenated embeddings: for each frame, an `N x D` tensor whose
/// left half is the (frame-duplicated) position embedding and right half the
/// per-frame acoustic embedding.
pub fn assemble<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    nodes: &[NodeInput<R>],
) -> Result<Vec<Var>, ModelError> {
    let t = validate_inputs(cfg, nodes)?;
    let n = nodes.len();
    let f = cfg.feature_dim;

    let mut pos_data = vec![R::zero(); n * cfg.m_total];
    for (i, node) in nodes.iter().enumerate() {
        pos_data[i * cfg.m_total + node.one_hot.hot().get() - 1] = R::one();
    }
    let pos_in = g.input(Tensor::from_vec(n, cfg.m_total, pos_data));
    let pos_emb = position_encode(g, store, cfg, pos_in)?;

    // frame-major stack: row t*N + n holds node n's features at frame t,
    // so one frame's rows are contiguous
    let mut feat_data = vec![R::zero(); t * n * f];
    for (i, node) in nodes.iter().enumerate() {
        let src = node.features.data();
        for frame in 0..t {
            let dst = (frame * n + i) * f;
            feat_data[dst..dst + f].copy_from_slice(&src[frame * f..(frame + 1) * f]);
        }
    }
    let feat_in = g.input(Tensor::from_vec(t * n, f, feat_data));
    let ac_emb = node_encode(g, store, cfg, feat_in)?;

    let mut frames = Vec::with_capacity(t);
    for frame in 0..t {
        let ac_t = g.slice_rows(ac_emb, frame * n, n)?;
        frames.push(g.concat(1, &[pos_emb, ac_t])?);
    }
    Ok(frames)
}

/// Full forward pass; returns the per-frame class probabilities (`T x M`).
pub fn forward<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    nodes: &[NodeInput<R>],
) -> Result<Var, ModelError> {
    let frames = assemble(g, store, cfg, nodes)?;
    let mut fused = Vec::with_capacity(frames.len());
    for e in frames {
        let mut x = e;
        for l in 0..cfg.n_spatial_layers {
            x = spatial_layer(g, store, cfg, l, x)?;
        }
        fused.push(fusion_layer(g, store, cfg, x)?);
    }
    let stacked = g.concat(0, &fused)?;
    let temporal = temporal_layer(g, store, cfg, stacked)?;
    let logits = linear_chain(g, store, cfg, "head", cfg.head_widths.len() + 1, temporal, false)?;
    Ok(g.softmax_axis(1, logits)?)
}

/// Model output after postprocessing: per-frame probabilities, their mean
/// over time, and the argmax decision.
#[derive(Debug, Clone)]
pub struct Prediction<R> {
    pub frame_probs: Tensor<R>,
    pub pooled: Vec<R>,
    pub decided: AreaIndex,
}

/// Inference: forward pass, frame-mean pooling, hard decision.
pub fn predict<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    nodes: &[NodeInput<R>],
) -> Result<Prediction<R>, ModelError> {
    let mut g = Graph::new();
    let probs = forward(&mut g, store, cfg, nodes)?;
    let tensor = g.value(probs).clone();
    let (t, m) = tensor.shape();
    let mut pooled = vec![R::zero(); m];
    for frame in 0..t {
        for j in 0..m {
            pooled[j] = pooled[j] + tensor.at(frame, j);
        }
    }
    let inv = R::cast(1.0 / t as f64);
    for p in pooled.iter_mut() {
        *p = *p * inv;
    }
    let mut best = 0usize;
    for j in 1..m {
        if pooled[j] > pooled[best] {
            best = j;
        }
    }
    Ok(Prediction { frame_probs: tensor, pooled, decided: AreaIndex::new(best + 1) })
}

/// Cross-entropy of the forward pass against the speaker's one-hot label.
/// Pure evaluation; this is what the finite-difference oracle perturbs.
pub fn loss_value<R: Real>(
    store: &ParamStore<R>,
    cfg: &ModelConfig,
    nodes: &[NodeInput<R>],
    target: &OneHotCode,
) -> Result<R, ModelError> {
    let mut g = Graph::new();
    let probs = forward(&mut g, store, cfg, nodes)?;
    let loss = g.cross_entropy(probs, target)?;
    Ok(g.value(loss).item())
}

/// One training step's forward+backward: leaves gradients in the store
/// (caller applies the optimizer) and returns the loss.
pub fn loss_and_backward<R: Real>(
    store: &mut ParamStore<R>,
    cfg: &ModelConfig,
    nodes: &[NodeInput<R>],
    target: &OneHotCode,
) -> Result<R, ModelError> {
    let mut g = Graph::new();
    let probs = forward(&mut g, store, cfg, nodes)?;
    let loss = g.cross_entropy(probs, target)?;
    g.backward(loss)?;
    store.absorb_grads(&g)?;
    Ok(g.value(loss).item())
}
