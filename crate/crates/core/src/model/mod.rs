//! Hookable decoder-only transformer.
//!
//! Block layout: RMSNorm → grouped-query attention with RoPE → residual add →
//! RMSNorm → SiLU-gated MLP → residual add; then a final RMSNorm and the
//! unembedding. Weight matrices are stored `[in, out]` so every projection
//! is a row-vector product.

mod config;
mod container;
mod forward;
mod hooks;
pub mod toy;

use sha2::{Digest, Sha256};

pub use config::ModelConfig;
pub use container::{load_model, read_container, save_model, write_container, ContainerEntry, MODEL_MAGIC};
pub use forward::{forward, head_contribution, ForwardOutput};
pub(crate) use forward::{run, LogitsScope, PatchMap};
pub use hooks::{HookSite, SiteKind};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{rms_norm, vec_mat, Tensor2D};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attention_norm: Vec<T>,
    pub wq: Tensor2D<T>,
    pub wk: Tensor2D<T>,
    pub wv: Tensor2D<T>,
    pub wo: Tensor2D<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Tensor2D<T>,
    pub w_up: Tensor2D<T>,
    pub w_down: Tensor2D<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub tok_embeddings: Tensor2D<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub norm: Vec<T>,
    /// `None` for tied-embedding models.
    pub output: Option<Tensor2D<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    /// All tensors under their container names, canonical order.
    pub fn named(&self) -> Vec<(String, Tensor2D<T>)> {
        let row = |v: &Vec<T>| Tensor2D::new(1, v.len(), v.clone()).expect("1-row view");
        let mut out = vec![("tok_embeddings".to_string(), self.tok_embeddings.clone())];
        for (l, w) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{l}.attention_norm"), row(&w.attention_norm)),
                (format!("layers.{l}.attention.wq"), w.wq.clone()),
                (format!("layers.{l}.attention.wk"), w.wk.clone()),
                (format!("layers.{l}.attention.wv"), w.wv.clone()),
                (format!("layers.{l}.attention.wo"), w.wo.clone()),
                (format!("layers.{l}.ffn_norm"), row(&w.ffn_norm)),
                (format!("layers.{l}.feed_forward.w_gate"), w.w_gate.clone()),
                (format!("layers.{l}.feed_forward.w_up"), w.w_up.clone()),
                (format!("layers.{l}.feed_forward.w_down"), w.w_down.clone()),
            ]);
        }
        out.push(("norm".to_string(), row(&self.norm)));
        if let Some(o) = &self.output {
            out.push(("output".to_string(), o.clone()));
        }
        out
    }

    /// Inverse of [`ModelWeights::named`]; tensors are taken by name.
    pub fn from_named(config: &ModelConfig, mut take: impl FnMut(&str) -> Result<Tensor2D<T>>) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerWeights {
                attention_norm: take(&format!("layers.{l}.attention_norm"))?.into_data(),
                wq: take(&format!("layers.{l}.attention.wq"))?,
                wk: take(&format!("layers.{l}.attention.wk"))?,
                wv: take(&format!("layers.{l}.attention.wv"))?,
                wo: take(&format!("layers.{l}.attention.wo"))?,
                ffn_norm: take(&format!("layers.{l}.ffn_norm"))?.into_data(),
                w_gate: take(&format!("layers.{l}.feed_forward.w_gate"))?,
                w_up: take(&format!("layers.{l}.feed_forward.w_up"))?,
                w_down: take(&format!("layers.{l}.feed_forward.w_down"))?,
            });
        }
        Ok(Self {
            tok_embeddings: take("tok_embeddings")?,
            layers,
            norm: take("norm")?.into_data(),
            output: if config.tied_embeddings { None } else { Some(take("output")?) },
        })
    }
}

/// Immutable weights + config. Shareable across threads.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    weights: ModelWeights<T>,
    vocab: Option<Vec<String>>,
    fingerprint: String,
}

impl<T: Scalar> Model<T> {
    /// Validates every tensor shape against `config`.
    pub fn new(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        Self::with_vocab(config, weights, None)
    }

    /// Like [`Model::new`], also embedding a word-level vocabulary that the
    /// container carries alongside the weights.
    pub fn with_vocab(config: ModelConfig, weights: ModelWeights<T>, vocab: Option<Vec<String>>) -> Result<Self> {
        config.validate()?;
        if weights.layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layer weight sets for {} layers",
                weights.layers.len(),
                config.n_layers
            )));
        }
        if weights.output.is_some() == config.tied_embeddings {
            return Err(Error::Config("output tensor must be present iff embeddings are untied".into()));
        }
        let named = weights.named();
        for ((name, t), (want_name, want)) in named.iter().zip(config.tensor_shapes()) {
            debug_assert_eq!(name, &want_name);
            if t.shape() != want {
                return Err(Error::LoadTensor {
                    tensor: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", t.shape(), want),
                });
            }
            if !t.all_finite() {
                return Err(Error::LoadTensor { tensor: name.clone(), reason: "contains non-finite values".into() });
            }
        }
        if let Some(v) = &vocab {
            if v.len() != config.vocab_size {
                return Err(Error::Config(format!(
                    "embedded vocabulary has {} entries for vocab_size {}",
                    v.len(),
                    config.vocab_size
                )));
            }
        }
        let fingerprint = fingerprint(&config, &named, vocab.as_deref());
        Ok(Self { config, weights, vocab, fingerprint })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub fn vocab(&self) -> Option<&[String]> {
        self.vocab.as_deref()
    }

    /// SHA-256 over the manifest (config, tensor table, vocabulary) and the
    /// tensor contents.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn into_parts(self) -> (ModelConfig, ModelWeights<T>, Option<Vec<String>>) {
        (self.config, self.weights, self.vocab)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let w = &self.weights;
        let v = |x: &Vec<T>| x.iter().map(|e| U::of(e.wide())).collect::<Vec<U>>();
        let weights = ModelWeights {
            tok_embeddings: w.tok_embeddings.cast(),
            layers: w
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attention_norm: v(&l.attention_norm),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: v(&l.ffn_norm),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            norm: v(&w.norm),
            output: w.output.as_ref().map(Tensor2D::cast),
        };
        Model::with_vocab(self.config.clone(), weights, self.vocab.clone()).expect("casting preserves shapes")
    }

    /// Final norm + unembedding of one residual-stream vector.
    pub fn logits_from_residual(&self, resid: &[T]) -> Result<Vec<T>> {
        let normed = rms_norm(resid, &self.weights.norm, T::of(self.config.norm_eps))?;
        match &self.weights.output {
            Some(out) => vec_mat(&normed, out),
            None => {
                let emb = &self.weights.tok_embeddings;
                Ok((0..emb.rows()).map(|v| crate::tensor::dot(&normed, emb.row(v))).collect())
            }
        }
    }
}

fn fingerprint<T: Scalar>(config: &ModelConfig, named: &[(String, Tensor2D<T>)], vocab: Option<&[String]>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
    }
    if let Some(v) = vocab {
        for w in v {
            h.update((w.len() as u64).to_le_bytes());
            h.update(w.as_bytes());
        }
    }
    h.update(T::DTYPE.as_bytes());
    for (_, t) in named {
        for x in t.data() {
            h.update(x.canonical_bits().to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
