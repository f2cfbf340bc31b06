//! Finite-difference suite over every graph op, the layers built on them
//! and the full training loss.

use rand::Rng;
use serde::Serialize;

use crate::batchformer::{BatchFormerModel, ModelConfig};
use crate::error::{LabError, Result};
use crate::gradcheck::{analytic_gradients, compare_with_numeric, CheckOptions};
use crate::graph::{Graph, Var};
use crate::loss::{balanced_softmax_loss, cross_entropy, ClassCounts, Loss};
use crate::nn::{
    dropout, layer_norm, multi_head_self_attention, transformer_encoder_layer, EncoderConfig,
    EncoderLayerParams, Frame, Mode, ParamGroup, ParamStore, LN_EPS,
};
use crate::rng::{substream, LabRng, Stream};
use crate::tensor::Tensor;

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_exact",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "transpose",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "gather",
    "sum",
    "mean",
    "dropout",
    "cross_entropy",
    "balanced_softmax",
    "attention",
    "encoder_layer",
    "batchformer_loss",
];

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub instances: usize,
    pub seed: u64,
    pub filter: Option<String>,
    /// Negates every analytic gradient before comparison.
    pub inject_wrong_sign: bool,
    pub check: CheckOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            instances: 10,
            seed: 0,
            filter: None,
            inject_wrong_sign: false,
            check: CheckOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpResult {
    pub op: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub ops: Vec<OpResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpResult::passed)
    }

    pub fn instances(&self) -> usize {
        self.ops.iter().map(|o| o.instances).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max)
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    f: CaseFn,
    inputs: Vec<Tensor>,
}

fn rand_tensor(rng: &mut LabRng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    t
}

fn dim(rng: &mut LabRng) -> usize {
    rng.random_range(1..=4)
}

/// Reduces `out` to a scalar through a fixed random weighting, so every
/// output coordinate gets its own cotangent.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

fn unary<F>(rng: &mut LabRng, shape: &[usize], op: F) -> Case
where
    F: Fn(&mut Graph, Var) -> Result<Var> + 'static,
{
    let x = rand_tensor(rng, shape);
    let mut g = Graph::new();
    let probe = g.constant(x.clone());
    let out_shape = op(&mut g, probe)
        .map(|v| g.shape(v).to_vec())
        .unwrap_or_default();
    let w = rand_tensor(rng, &out_shape);
    Case {
        f: Box::new(move |g, v| {
            let out = op(g, v[0])?;
            weighted(g, out, &w)
        }),
        inputs: vec![x],
    }
}

fn binary<F>(rng: &mut LabRng, a: &[usize], b: &[usize], op: F) -> Case
where
    F: Fn(&mut Graph, Var, Var) -> Result<Var> + 'static,
{
    let (x, y) = (rand_tensor(rng, a), rand_tensor(rng, b));
    let mut g = Graph::new();
    let (px, py) = (g.constant(x.clone()), g.constant(y.clone()));
    let out_shape = op(&mut g, px, py)
        .map(|v| g.shape(v).to_vec())
        .unwrap_or_default();
    let w = rand_tensor(rng, &out_shape);
    Case {
        f: Box::new(move |g, v| {
            let out = op(g, v[0], v[1])?;
            weighted(g, out, &w)
        }),
        inputs: vec![x, y],
    }
}

fn broadcast_rhs(rng: &mut LabRng, m: usize, n: usize) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => vec![m, n],
        1 => vec![n],
        _ => vec![],
    }
}

fn labels(rng: &mut LabRng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Encoder layer parameters as FD inputs, preceded by `x`.
fn encoder_case(rng: &mut LabRng, full_layer: bool) -> Result<Case> {
    let heads = [1, 2][rng.random_range(0..2)];
    let dim = heads * rng.random_range(1..=2) * 2;
    let n = rng.random_range(1..=4);
    let config = EncoderConfig {
        dim,
        heads,
        ffn_dim: dim,
        dropout: 0.5,
        eps: LN_EPS,
    };
    let mut store = ParamStore::new();
    let layer = EncoderLayerParams::init(&mut store, "enc", ParamGroup::BatchFormer, config, rng)?;
    for id in layer.ids() {
        let v = store.value_mut(id);
        let noise = rand_tensor(rng, v.shape());
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += 0.1 * b;
        }
    }
    let x = rand_tensor(rng, &[n, dim]);
    let w = rand_tensor(rng, &[n, dim]);
    let mask_seed: u64 = rng.random();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    Ok(Case {
        f: Box::new(move |g, v| {
            let mut f = Frame::with_vars(g, &store, &v[1..])?;
            let out = if full_layer {
                let mut mask_rng = substream(mask_seed, Stream::Dropout);
                transformer_encoder_layer(&mut f, &layer, v[0], Mode::Train(&mut mask_rng))?
            } else {
                multi_head_self_attention(&mut f, &layer, v[0])?.output
            };
            weighted(f.graph, out, &w)
        }),
        inputs,
    })
}

fn model_case(rng: &mut LabRng) -> Result<Case> {
    let shared = rng.random_bool(0.75);
    let config = ModelConfig {
        input_dim: 3,
        hidden_dim: 5,
        feature_dim: 8,
        classes: 3,
        heads: 4,
        encoder_layers: 1,
        dropout: 0.5,
        shared_classifier: shared,
    };
    let seed: u64 = rng.random();
    let model = BatchFormerModel::init(config, seed)?;
    let n = rng.random_range(2..=4);
    let x = rand_tensor(rng, &[n, 3]);
    let y = labels(rng, n, 3);
    let counts = ClassCounts::new(vec![40, 9, 2])?;
    let loss = if rng.random_bool(0.5) {
        Loss::CrossEntropy
    } else {
        Loss::BalancedSoftmax(counts)
    };
    let train_mode = rng.random_bool(0.5);
    let inputs: Vec<Tensor> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    Ok(Case {
        f: Box::new(move |g, v| {
            let mut f = Frame::with_vars(g, &model.store, v)?;
            let mut mask_rng = substream(seed, Stream::Dropout);
            let mode = if train_mode {
                Mode::Train(&mut mask_rng)
            } else {
                Mode::Eval
            };
            model.training_loss(&mut f, &x, &y, &loss, true, mode)
        }),
        inputs,
    })
}

fn build(op: &str, rng: &mut LabRng) -> Result<Case> {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    Ok(match op {
        "matmul" => binary(rng, &[m, k], &[k, n], |g, a, b| g.matmul(a, b)),
        "matmul_exact" => binary(rng, &[m, k], &[k, n], |g, a, b| g.matmul_exact(a, b)),
        "add" => {
            let rhs = broadcast_rhs(rng, m, n);
            binary(rng, &[m, n], &rhs, |g, a, b| g.add(a, b))
        }
        "sub" => {
            let rhs = broadcast_rhs(rng, m, n);
            binary(rng, &[m, n], &rhs, |g, a, b| g.sub(a, b))
        }
        "mul" => {
            let rhs = broadcast_rhs(rng, m, n);
            binary(rng, &[m, n], &rhs, |g, a, b| g.mul(a, b))
        }
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            unary(rng, &[m, n], move |g, x| Ok(g.scale(x, c)))
        }
        "relu" => {
            let mut case = unary(rng, &[m, n], |g, x| Ok(g.relu(x)));
            for v in case.inputs[0].data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1f64.copysign(*v);
                }
            }
            case
        }
        "softmax" => unary(rng, &[m, n], |g, x| g.softmax(x)),
        "log_softmax" => unary(rng, &[m, n], |g, x| g.log_softmax(x)),
        "layer_norm" => {
            let n = n + 1;
            let x = rand_tensor(rng, &[m, n]);
            let gamma = rand_tensor(rng, &[n]);
            let beta = rand_tensor(rng, &[n]);
            let w = rand_tensor(rng, &[m, n]);
            Case {
                f: Box::new(move |g, v| {
                    let out = layer_norm(g, v[0], v[1], v[2], LN_EPS)?;
                    weighted(g, out, &w)
                }),
                inputs: vec![x, gamma, beta],
            }
        }
        "transpose" => unary(rng, &[m, n], |g, x| g.transpose(x)),
        "slice_rows" => {
            let s = rng.random_range(0..m);
            let e = rng.random_range(s + 1..=m);
            unary(rng, &[m, n], move |g, x| g.slice_rows(x, s, e))
        }
        "slice_cols" => {
            let s = rng.random_range(0..n);
            let e = rng.random_range(s + 1..=n);
            unary(rng, &[m, n], move |g, x| g.slice_cols(x, s, e))
        }
        "concat_rows" => binary(rng, &[m, n], &[k, n], |g, a, b| g.concat_rows(&[a, b, a])),
        "concat_cols" => binary(rng, &[m, n], &[m, k], |g, a, b| g.concat_cols(&[b, a])),
        "gather" => {
            let idx = labels(rng, m, n);
            unary(rng, &[m, n], move |g, x| g.gather(x, &idx))
        }
        "sum" => unary(rng, &[m, n], |g, x| {
            let s = g.sum(x);
            let sq = g.mul(s, s)?;
            Ok(sq)
        }),
        "mean" => unary(rng, &[m, n], |g, x| {
            let s = g.mean(x);
            let sq = g.mul(s, s)?;
            Ok(sq)
        }),
        "dropout" => {
            let mask_seed: u64 = rng.random();
            let p = rng.random_range(0.1..0.7);
            unary(rng, &[m, n], move |g, x| {
                let mut r = substream(mask_seed, Stream::Dropout);
                dropout(g, x, p, Mode::Train(&mut r))
            })
        }
        "cross_entropy" => {
            let n = n + 1;
            let y = labels(rng, m, n);
            let x = rand_tensor(rng, &[m, n]);
            Case {
                f: Box::new(move |g, v| cross_entropy(g, v[0], &y)),
                inputs: vec![x],
            }
        }
        "balanced_softmax" => {
            let n = n + 1;
            let y = labels(rng, m, n);
            let counts = ClassCounts::new((0..n).map(|_| rng.random_range(1..500)).collect())?;
            let x = rand_tensor(rng, &[m, n]);
            Case {
                f: Box::new(move |g, v| balanced_softmax_loss(g, v[0], &y, &counts)),
                inputs: vec![x],
            }
        }
        "attention" => encoder_case(rng, false)?,
        "encoder_layer" => encoder_case(rng, true)?,
        "batchformer_loss" => model_case(rng)?,
        other => return Err(LabError::config(format!("unknown op {other:?}"))),
    })
}

pub fn run_op(op: &'static str, opts: &SuiteOptions) -> Result<OpResult> {
    let index = OPS.iter().position(|&o| o == op).unwrap_or(OPS.len()) as u64;
    let mut rng = substream(
        opts.seed.wrapping_mul(1000).wrapping_add(index),
        Stream::Probe,
    );
    let mut result = OpResult {
        op,
        instances: 0,
        checked: 0,
        max_rel_error: 0.0,
        failures: 0,
    };
    for _ in 0..opts.instances {
        let case = build(op, &mut rng)?;
        let (_, mut analytic) = analytic_gradients(&case.f, &case.inputs)?;
        if opts.inject_wrong_sign {
            for t in &mut analytic {
                *t = t.map(|v| -v);
            }
        }
        let report = compare_with_numeric(&case.f, &case.inputs, &analytic, &opts.check)?;
        result.instances += 1;
        result.checked += report.checked;
        result.max_rel_error = result.max_rel_error.max(report.max_rel_error);
        result.failures += report.failures.len();
    }
    Ok(result)
}

/// Runs every op in [`OPS`], or only `opts.filter`.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let selected: Vec<&'static str> = match &opts.filter {
        None => OPS.to_vec(),
        Some(f) => {
            let op = OPS.iter().copied().find(|&o| o == f).ok_or_else(|| {
                LabError::config(format!("unknown op {f:?}; known: {}", OPS.join(", ")))
            })?;
            vec![op]
        }
    };
    let ops = selected
        .into_iter()
        .map(|op| run_op(op, opts))
        .collect::<Result<_>>()?;
    Ok(SuiteReport { ops })
}
