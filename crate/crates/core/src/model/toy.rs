//! Seeded random models for hermetic tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{LayerWeights, Model, ModelConfig, ModelWeights};
use crate::rope::RopeParams;
use crate::tensor::Tensor2D;

/// Shape and seed of a generated model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub seed: u64,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub theta_base: f64,
    pub tied_embeddings: bool,
    /// Layers whose attention output projection is zeroed, so the block
    /// passes the residual stream through its attention unchanged.
    pub disabled_attention: Vec<usize>,
}

impl ToySpec {
    /// 2 layers, `d_model` 64, 4 query heads sharing 2 key/value heads.
    pub fn standard(seed: u64, vocab_size: usize) -> Self {
        Self {
            seed,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 128,
            vocab_size,
            theta_base: RopeParams::DEFAULT_THETA,
            tied_embeddings: false,
            disabled_attention: Vec::new(),
        }
    }

    pub fn config(&self) -> Result<ModelConfig> {
        let head_dim = self.d_model / self.n_heads;
        let cfg = ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            rope: RopeParams::new(self.theta_base, head_dim)?,
            norm_eps: ModelConfig::DEFAULT_NORM_EPS,
            tied_embeddings: self.tied_embeddings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build(&self, vocab: Option<Vec<String>>) -> Result<Model<f32>> {
        let cfg = self.config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = cfg.d_model;
        let q = cfg.n_heads * cfg.head_dim;
        let kv = cfg.n_kv_heads * cfg.head_dim;

        let tok_embeddings = uniform(&mut rng, cfg.vocab_size, d, 1.0);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let attention_norm = gains(&mut rng, d);
            let wq = fan_in(&mut rng, d, q);
            let wk = fan_in(&mut rng, d, kv);
            let wv = fan_in(&mut rng, d, kv);
            let mut wo = fan_in(&mut rng, q, d);
            if self.disabled_attention.contains(&l) {
                wo = Tensor2D::zeros(q, d);
            }
            layers.push(LayerWeights {
                attention_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm: gains(&mut rng, d),
                w_gate: fan_in(&mut rng, d, cfg.d_ff),
                w_up: fan_in(&mut rng, d, cfg.d_ff),
                w_down: fan_in(&mut rng, cfg.d_ff, d),
            });
        }
        let norm = gains(&mut rng, d);
        let output = (!cfg.tied_embeddings).then(|| fan_in(&mut rng, d, cfg.vocab_size));
        Model::with_vocab(cfg, ModelWeights { tok_embeddings, layers, norm, output }, vocab)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Tensor2D<f32> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor2D::new(rows, cols, data).expect("sized buffer")
}

/// Unit-variance outputs for unit-variance inputs.
fn fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D<f32> {
    uniform(rng, rows, cols, (3.0 / rows as f32).sqrt())
}

fn gains(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| 1.0 + rng.gen_range(-0.1f32..0.1)).collect()
}

/// The bundled toy model: [`ToySpec::standard`] over the bundled word
/// vocabulary, which the model embeds.
pub fn bundled_toy_model(seed: u64) -> Result<Model<f32>> {
    let tok = crate::fixtures::bundled_tokenizer();
    let vocab = tok.vocab().to_vec();
    ToySpec::standard(seed, vocab.len()).build(Some(vocab))
}
