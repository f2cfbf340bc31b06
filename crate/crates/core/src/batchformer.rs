//! A transformer encoder over the batch axis, trained through one shared
//! classifier and dropped at inference time.
//!
//! During training a mini-batch of backbone features `X ∈ R^{N×C}` is read
//! as a single sequence of length `N`, so self-attention mixes samples. The
//! encoded rows are stacked under the original rows and both halves go
//! through the same classifier with duplicated labels. At inference the
//! encoder is skipped entirely: logits are `classifier(backbone(x))`, which
//! depends on nothing but the sample itself.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::graph::{Graph, Var};
use crate::loss::Loss;
use crate::nn::{
    linear_forward, EncoderConfig, EncoderStack, Frame, LinearParams, Mode, ParamGroup, ParamId,
    ParamStore, LN_EPS,
};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
    /// When false, training logits come from the encoded rows only.
    pub shared_classifier: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 64,
            feature_dim: 16,
            classes: 10,
            heads: 4,
            encoder_layers: 1,
            dropout: 0.5,
            shared_classifier: true,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.feature_dim,
            heads: self.heads,
            ffn_dim: self.feature_dim,
            dropout: self.dropout,
            eps: LN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(LabError::config("model widths must be positive"));
        }
        if self.classes < 2 {
            return Err(LabError::config("need at least 2 classes"));
        }
        if !(1..=16).contains(&self.encoder_layers) {
            return Err(LabError::config(format!(
                "encoder_layers {} outside 1..=16",
                self.encoder_layers
            )));
        }
        self.encoder_config().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backbone {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// Backbone MLP, BatchFormer encoder stack and the single classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFormerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: EncoderStack,
    pub classifier: LinearParams,
}

impl BatchFormerModel {
    /// Seeded init. Backbone and classifier draw from one substream and the
    /// encoder from another, so their values do not depend on encoder depth.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(seed, Stream::Init);
        let backbone = Backbone {
            fc1: LinearParams::init(
                &mut store,
                "backbone.fc1",
                ParamGroup::Backbone,
                config.input_dim,
                config.hidden_dim,
                &mut rng,
            ),
            fc2: LinearParams::init(
                &mut store,
                "backbone.fc2",
                ParamGroup::Backbone,
                config.hidden_dim,
                config.feature_dim,
                &mut rng,
            ),
        };
        let classifier = LinearParams::init(
            &mut store,
            "classifier",
            ParamGroup::Classifier,
            config.feature_dim,
            config.classes,
            &mut rng,
        );
        let mut enc_rng = substream(seed, Stream::EncoderInit);
        let encoder = EncoderStack::init(
            &mut store,
            "encoder",
            config.encoder_config(),
            config.encoder_layers,
            &mut enc_rng,
        )?;
        Ok(Self {
            config,
            store,
            backbone,
            encoder,
            classifier,
        })
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.ids()
    }

    /// Parameters updated by training with or without the encoder.
    pub fn trainable_ids(&self, with_batchformer: bool) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| with_batchformer || p.group != ParamGroup::BatchFormer)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn backbone_forward(&self, f: &mut Frame<'_>, inputs: Var) -> Result<Var> {
        let d = f.graph.value(inputs).last_dim();
        if d != self.config.input_dim {
            return Err(LabError::dim(
                "backbone",
                f.graph.shape(inputs),
                &[self.config.input_dim],
            ));
        }
        let h = linear_forward(f, &self.backbone.fc1, inputs)?;
        let h = f.graph.relu(h);
        linear_forward(f, &self.backbone.fc2, h)
    }

    pub fn classify(&self, f: &mut Frame<'_>, features: Var) -> Result<Var> {
        linear_forward(f, &self.classifier, features)
    }

    /// Training logits `[2N, K]` (or `[N, K]` without the shared classifier)
    /// and their labels. `mode` only controls encoder dropout.
    pub fn train_forward(
        &self,
        f: &mut Frame<'_>,
        inputs: Var,
        labels: &[usize],
        mode: Mode<'_>,
    ) -> Result<(Var, Vec<usize>)> {
        let features = self.backbone_forward(f, inputs)?;
        if !self.config.shared_classifier {
            let encoded = self.encoder.forward(f, features, mode)?;
            return Ok((self.classify(f, encoded)?, labels.to_vec()));
        }
        let (dual, dual_labels) =
            batchformer_forward(f, &self.encoder, features, labels, true, mode)?;
        Ok((self.classify(f, dual)?, dual_labels))
    }

    /// `classifier(backbone(x))`, recorded on `f`.
    pub fn plain_forward(&self, f: &mut Frame<'_>, inputs: Var) -> Result<Var> {
        let features = self.backbone_forward(f, inputs)?;
        self.classify(f, features)
    }

    /// Test-time logits. Never evaluates the encoder.
    pub fn inference_forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut f = Frame::frozen(&mut g, &self.store);
        let x = f.graph.constant(inputs.clone());
        let logits = self.plain_forward(&mut f, x)?;
        Ok(g.value(logits).clone())
    }

    /// Scalar training loss: mean over all logit rows (both halves when the
    /// encoder is on).
    pub fn training_loss(
        &self,
        f: &mut Frame<'_>,
        inputs: &Tensor,
        labels: &[usize],
        loss: &Loss,
        with_batchformer: bool,
        mode: Mode<'_>,
    ) -> Result<Var> {
        let x = f.graph.constant(inputs.clone());
        if with_batchformer {
            let (logits, y) = self.train_forward(f, x, labels, mode)?;
            loss.apply(f.graph, logits, &y)
        } else {
            let logits = self.plain_forward(f, x)?;
            loss.apply(f.graph, logits, labels)
        }
    }
}

/// Runs `encoder` along the batch axis and stacks `[x; encoder(x)]` with
/// labels `[y; y]`. With `is_training == false` the inputs come back as
/// they are and the encoder is not touched.
pub fn batchformer_forward(
    f: &mut Frame<'_>,
    encoder: &EncoderStack,
    x: Var,
    labels: &[usize],
    is_training: bool,
    mode: Mode<'_>,
) -> Result<(Var, Vec<usize>)> {
    if !is_training {
        return Ok((x, labels.to_vec()));
    }
    let (n, c) = f
        .graph
        .value(x)
        .dims2()
        .map_err(|_| LabError::dim("batchformer", f.graph.shape(x), &[]))?;
    if n == 0 {
        return Err(LabError::contract("batchformer on an empty batch"));
    }
    if labels.len() != n {
        return Err(LabError::dim("batchformer", &[n, c], &[labels.len()]));
    }
    if c != encoder.dim() {
        return Err(LabError::dim("batchformer", &[n, c], &[encoder.dim()]));
    }
    let encoded = encoder.forward(f, x, mode)?;
    let dual = f.graph.concat_rows(&[x, encoded])?;
    let mut dual_labels = labels.to_vec();
    dual_labels.extend_from_slice(labels);
    Ok((dual, dual_labels))
}
