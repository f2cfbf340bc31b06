//! Cross-sample gradient probe: how much does sample `i`'s loss move sample
//! `j`'s features when the encoder mixes the batch?

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::batchformer::{batchformer_forward, BatchFormerModel};
use crate::data::LongTailDataset;
use crate::error::{LabError, Result};
use crate::graph::{Graph, Var};
use crate::loss::Loss;
use crate::nn::{Frame, Mode};
use crate::rng::LabRng;
use crate::stats::spearman;
use crate::tensor::Tensor;

/// Which logit row carries `L_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeBranch {
    Pre,
    #[default]
    Post,
    Sum,
}

/// Where `X` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSite {
    #[default]
    Features,
    Inputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub branch: ProbeBranch,
    pub site: ProbeSite,
    /// When false the loss sees `classifier(X)` only and no row mixes.
    pub batchformer_loss: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            branch: ProbeBranch::Post,
            site: ProbeSite::Features,
            batchformer_loss: true,
        }
    }
}

/// `norms[i][j] = ‖∂L_i/∂X_j‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossGradMatrix {
    pub norms: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl CrossGradMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Mean of `norms[i][j]` over `j ≠ i`.
    pub fn off_diagonal_mean(&self, i: usize) -> f64 {
        let n = self.len();
        let s: f64 = (0..n).filter(|&j| j != i).map(|j| self.norms[i][j]).sum();
        s / (n - 1) as f64
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let mut m = 0.0f64;
        for (i, row) in self.norms.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    m = m.max(v);
                }
            }
        }
        m
    }
}

/// The probe site value `X` for `inputs`.
pub fn probe_site_values(
    model: &BatchFormerModel,
    inputs: &Tensor,
    opts: &ProbeOptions,
) -> Result<Tensor> {
    match opts.site {
        ProbeSite::Inputs => Ok(inputs.clone()),
        ProbeSite::Features => {
            let mut g = Graph::new();
            let mut f = Frame::frozen(&mut g, &model.store);
            let x = f.graph.constant(inputs.clone());
            let feats = model.backbone_forward(&mut f, x)?;
            Ok(g.value(feats).clone())
        }
    }
}

/// Records the logits whose rows feed the per-sample losses, given the site
/// variable `x`. Parameters are constants and the encoder runs without
/// dropout.
pub fn probe_logits(
    model: &BatchFormerModel,
    g: &mut Graph,
    x: Var,
    labels: &[usize],
    opts: &ProbeOptions,
) -> Result<Var> {
    let mut f = Frame::frozen(g, &model.store);
    let feats = match opts.site {
        ProbeSite::Features => x,
        ProbeSite::Inputs => model.backbone_forward(&mut f, x)?,
    };
    if !opts.batchformer_loss {
        return model.classify(&mut f, feats);
    }
    let (dual, _) = batchformer_forward(&mut f, &model.encoder, feats, labels, true, Mode::Eval)?;
    model.classify(&mut f, dual)
}

/// Scalar `L_i` read off `logits` from [`probe_logits`].
pub fn sample_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    i: usize,
    loss: &Loss,
    opts: &ProbeOptions,
) -> Result<Var> {
    let n = labels.len();
    let row = |g: &mut Graph, r: usize| -> Result<Var> {
        let l = g.slice_rows(logits, r, r + 1)?;
        loss.apply(g, l, &labels[i..=i])
    };
    if !opts.batchformer_loss {
        return row(g, i);
    }
    match opts.branch {
        ProbeBranch::Pre => row(g, i),
        ProbeBranch::Post => row(g, n + i),
        ProbeBranch::Sum => {
            let a = row(g, i)?;
            let b = row(g, n + i)?;
            g.add(a, b)
        }
    }
}

/// `∂L_i/∂X` for every `i`, each of the shape of `X`. One backward pass
/// per sample over a single recorded forward pass.
pub fn cross_sample_blocks(
    model: &BatchFormerModel,
    inputs: &Tensor,
    labels: &[usize],
    loss: &Loss,
    opts: &ProbeOptions,
) -> Result<Vec<Tensor>> {
    let n = labels.len();
    if n < 2 {
        return Err(LabError::contract(format!(
            "cross-sample probe needs N >= 2, got {n}"
        )));
    }
    if inputs.dims2()?.0 != n {
        return Err(LabError::dim(
            "cross_sample_gradients",
            inputs.shape(),
            &[n],
        ));
    }
    let site = probe_site_values(model, inputs, opts)?;
    let mut g = Graph::new();
    let x = g.param(site);
    let logits = probe_logits(model, &mut g, x, labels, opts)?;
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let li = sample_loss(&mut g, logits, labels, i, loss, opts)?;
        let grads = g.backward(li)?;
        blocks.push(
            grads
                .get(x)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(x))),
        );
    }
    Ok(blocks)
}

/// Frobenius norms of the per-row gradient blocks `∂L_i/∂X_j`.
pub fn cross_sample_gradients(
    model: &BatchFormerModel,
    inputs: &Tensor,
    labels: &[usize],
    loss: &Loss,
    opts: &ProbeOptions,
) -> Result<CrossGradMatrix> {
    let blocks = cross_sample_blocks(model, inputs, labels, loss, opts)?;
    let norms: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| {
            b.rows()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    if norms.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite {
            op: "cross_sample_gradients",
        });
    }
    Ok(CrossGradMatrix {
        norms,
        labels: labels.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReportRow {
    pub class_id: usize,
    pub train_count: usize,
    pub mean_cross_grad_norm: f64,
    pub n_observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// Observed classes, most frequent first.
    pub rows: Vec<GradReportRow>,
    /// Classes that never appeared in a probed batch.
    pub missing_classes: Vec<usize>,
    /// Rank correlation between frequency rank (0 = most frequent) and
    /// mean cross-gradient norm.
    pub spearman: Option<f64>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub options: ProbeOptions,
}

impl GradReport {
    /// `(class_rank, grad_norm)` pairs, rank counted over all classes.
    pub fn plot_points(&self, counts_rank: &[usize]) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .map(|r| (counts_rank[r.class_id], r.mean_cross_grad_norm))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// For each class, position in the most-frequent-first order.
pub fn frequency_ranks(ds: &LongTailDataset) -> Vec<usize> {
    let mut rank = vec![0; ds.num_classes()];
    for (r, c) in ds.counts.by_frequency().into_iter().enumerate() {
        rank[c] = r;
    }
    rank
}

/// Samples `n_batches` test batches without replacement inside a batch and
/// averages each sample's off-diagonal cross-gradient norm by its class.
pub fn per_class_gradient_report(
    model: &BatchFormerModel,
    ds: &LongTailDataset,
    n_batches: usize,
    batch_size: usize,
    rng: &mut LabRng,
    loss: &Loss,
    opts: &ProbeOptions,
) -> Result<GradReport> {
    if batch_size < 2 || batch_size > ds.test_len() {
        return Err(LabError::contract(format!(
            "probe batch size {batch_size} outside 2..={}",
            ds.test_len()
        )));
    }
    let k = ds.num_classes();
    let mut sums = vec![0.0; k];
    let mut obs = vec![0usize; k];
    for _ in 0..n_batches {
        let idx = sample(rng, ds.test_len(), batch_size).into_vec();
        let (x, y) = ds.test_batch(&idx)?;
        let m = cross_sample_gradients(model, &x, &y, loss, opts)?;
        for (i, &c) in y.iter().enumerate() {
            sums[c] += m.off_diagonal_mean(i);
            obs[c] += 1;
        }
    }
    let rank = frequency_ranks(ds);
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for c in ds.counts.by_frequency() {
        if obs[c] == 0 {
            missing.push(c);
        } else {
            rows.push(GradReportRow {
                class_id: c,
                train_count: ds.counts.get(c),
                mean_cross_grad_norm: sums[c] / obs[c] as f64,
                n_observations: obs[c],
            });
        }
    }
    missing.sort_unstable();
    let xs: Vec<f64> = rows.iter().map(|r| rank[r.class_id] as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_cross_grad_norm).collect();
    Ok(GradReport {
        spearman: spearman(&xs, &ys),
        rows,
        missing_classes: if n_batches == 0 { Vec::new() } else { missing },
        n_batches,
        batch_size,
        options: *opts,
    })
}
