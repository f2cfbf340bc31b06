//! Layers: linear, layer norm, dropout, multi-head self-attention and the
//! post-norm transformer encoder layer.
//!
//! Parameters live in a [`ParamStore`] and are referred to by [`ParamId`].
//! A [`Frame`] binds store entries onto a [`Graph`] for one forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::rng::LabRng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    BatchFormer,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named, ordered parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Parameters bound onto a graph for one forward pass.
///
/// Binding is lazy: a parameter becomes a graph leaf the first time a layer
/// asks for it, so [`Frame::is_bound`] tells which parameters a forward pass
/// actually touched.
pub struct Frame<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Frame<'a> {
    /// Parameters bind as gradient-requiring leaves.
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            bound: vec![None; store.len()],
            graph,
            store,
            trainable: true,
        }
    }

    /// Parameters bind as constants.
    pub fn frozen(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(graph, store)
        }
    }

    /// Uses `vars[i]` for parameter `i` instead of binding from the store.
    pub fn with_vars(graph: &'a mut Graph, store: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(LabError::contract(format!(
                "{} vars supplied for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Self {
            bound: vars.iter().copied().map(Some).collect(),
            graph,
            store,
            trainable: true,
        })
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.graph.leaf(value, self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient for each parameter, `None` where it was not used.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

/// Whether stochastic layers are active.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut LabRng),
}

impl Mode<'_> {
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut LabRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    /// Uniform init in `±1/sqrt(fan_in)` for weight and bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut LabRng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = uniform_tensor(&[in_dim, out_dim], bound, rng);
        let b = uniform_tensor(&[out_dim], bound, rng);
        Self::from_tensors(store, name, group, w, b)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        Self {
            weight: store.add(format!("{name}.weight"), group, weight),
            bias: store.add(format!("{name}.bias"), group, bias),
            in_dim,
            out_dim,
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `x · W + b`.
pub fn linear_forward(f: &mut Frame<'_>, p: &LinearParams, x: Var) -> Result<Var> {
    let w = f.param(p.weight);
    let b = f.param(p.bias);
    let xw = f.graph.matmul(x, w)?;
    f.graph.add(xw, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Row-wise `(x - mean) / sqrt(var + eps) * gamma + beta` with population
/// variance.
pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let c = g.value(x).last_dim();
    if g.value(gamma).numel() != c || g.value(beta).numel() != c {
        return Err(LabError::dim("layer_norm", g.shape(x), g.shape(gamma)));
    }
    let xhat = g.normalize(x, eps);
    let scaled = g.mul(xhat, gamma)?;
    g.add(scaled, beta)
}

fn layer_norm_params(f: &mut Frame<'_>, p: &LayerNormParams, x: Var, eps: f64) -> Result<Var> {
    let gamma = f.param(p.gamma);
    let beta = f.param(p.beta);
    layer_norm(f.graph, x, gamma, beta, eps)
}

/// Inverted dropout: zero each entry with probability `p`, scale survivors
/// by `1 / (1 - p)`. Identity outside training.
pub fn dropout(g: &mut Graph, x: Var, p: f64, mode: Mode<'_>) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(LabError::config(format!(
            "dropout probability {p} not in [0, 1)"
        )));
    }
    let rng = match mode {
        Mode::Eval => return Ok(x),
        Mode::Train(rng) => rng,
    };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        if rng.random::<f64>() >= p {
            *m = keep;
        }
    }
    let mask = g.constant(mask);
    g.mul(x, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub eps: f64,
}

impl EncoderConfig {
    /// `dim` features, 4 heads, FFN width `dim`, dropout 0.5.
    pub fn standard(dim: usize) -> Self {
        Self {
            dim,
            heads: 4,
            ffn_dim: dim,
            dropout: 0.5,
            eps: LN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(LabError::config("encoder dimensions must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(LabError::config(format!(
                "feature width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LabError::config(format!(
                "dropout probability {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub config: EncoderConfig,
    pub heads: Vec<HeadParams>,
    pub out_proj: LinearParams,
    pub mlp_in: LinearParams,
    pub mlp_out: LinearParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

impl EncoderLayerParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        config: EncoderConfig,
        rng: &mut LabRng,
    ) -> Result<Self> {
        config.validate()?;
        let (c, hd) = (config.dim, config.head_dim());
        let heads = (0..config.heads)
            .map(|h| {
                let base = format!("{name}.attn.head{h}");
                HeadParams {
                    query: LinearParams::init(store, &format!("{base}.query"), group, c, hd, rng),
                    key: LinearParams::init(store, &format!("{base}.key"), group, c, hd, rng),
                    value: LinearParams::init(store, &format!("{base}.value"), group, c, hd, rng),
                }
            })
            .collect();
        let out_proj = LinearParams::init(store, &format!("{name}.attn.out"), group, c, c, rng);
        let mlp_in = LinearParams::init(
            store,
            &format!("{name}.mlp.in"),
            group,
            c,
            config.ffn_dim,
            rng,
        );
        let mlp_out = LinearParams::init(
            store,
            &format!("{name}.mlp.out"),
            group,
            config.ffn_dim,
            c,
            rng,
        );
        let norm1 = LayerNormParams::init(store, &format!("{name}.norm1"), group, c);
        let norm2 = LayerNormParams::init(store, &format!("{name}.norm2"), group, c);
        Ok(Self {
            config,
            heads,
            out_proj,
            mlp_in,
            mlp_out,
            norm1,
            norm2,
        })
    }

    /// Every parameter id of the layer.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for h in &self.heads {
            ids.extend(h.query.ids());
            ids.extend(h.key.ids());
            ids.extend(h.value.ids());
        }
        ids.extend(self.out_proj.ids());
        ids.extend(self.mlp_in.ids());
        ids.extend(self.mlp_out.ids());
        ids.extend(self.norm1.ids());
        ids.extend(self.norm2.ids());
        ids
    }
}

/// Self-attention output together with the per-head attention matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention per head, concatenated and projected.
pub fn multi_head_self_attention(
    f: &mut Frame<'_>,
    p: &EncoderLayerParams,
    x: Var,
) -> Result<AttentionOutput> {
    let scale = 1.0 / (p.config.head_dim() as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = linear_forward(f, &head.query, x)?;
        let k = linear_forward(f, &head.key, x)?;
        let v = linear_forward(f, &head.value, x)?;
        let kt = f.graph.transpose(k)?;
        let scores = f.graph.matmul(q, kt)?;
        let scores = f.graph.scale(scores, scale);
        let attn = f.graph.softmax(scores)?;
        outs.push(f.graph.matmul_exact(attn, v)?);
        weights.push(attn);
    }
    let concat = f.graph.concat_cols(&outs)?;
    let output = linear_forward(f, &p.out_proj, concat)?;
    Ok(AttentionOutput { output, weights })
}

/// Linear, ReLU, linear.
pub fn mlp_block(f: &mut Frame<'_>, p: &EncoderLayerParams, x: Var) -> Result<Var> {
    let h = linear_forward(f, &p.mlp_in, x)?;
    let h = f.graph.relu(h);
    linear_forward(f, &p.mlp_out, h)
}

/// Post-norm encoder layer:
/// `x̂ = LN(dropout(MSA(x)) + x)`, `out = LN(dropout(MLP(x̂)) + x̂)`.
pub fn transformer_encoder_layer(
    f: &mut Frame<'_>,
    p: &EncoderLayerParams,
    x: Var,
    mut mode: Mode<'_>,
) -> Result<Var> {
    let eps = p.config.eps;
    let attn = multi_head_self_attention(f, p, x)?.output;
    let attn = dropout(f.graph, attn, p.config.dropout, mode.reborrow())?;
    let res = f.graph.add(attn, x)?;
    let xhat = layer_norm_params(f, &p.norm1, res, eps)?;

    let m = mlp_block(f, p, xhat)?;
    let m = dropout(f.graph, m, p.config.dropout, mode.reborrow())?;
    let res = f.graph.add(m, xhat)?;
    layer_norm_params(f, &p.norm2, res, eps)
}

/// Ordered stack of encoder layers sharing one width.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderStack {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        depth: usize,
        rng: &mut LabRng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(LabError::config("encoder stack needs at least one layer"));
        }
        let layers = (0..depth)
            .map(|l| {
                EncoderLayerParams::init(
                    store,
                    &format!("{name}.{l}"),
                    ParamGroup::BatchFormer,
                    config,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].config.dim
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(EncoderLayerParams::ids)
            .collect()
    }

    pub fn forward(&self, f: &mut Frame<'_>, x: Var, mut mode: Mode<'_>) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = transformer_encoder_layer(f, layer, h, mode.reborrow())?;
        }
        Ok(h)
    }
}
