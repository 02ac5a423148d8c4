use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::RopeParams;

/// Architectural constants of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope: RopeParams,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// When set the unembedding reuses the token embedding matrix.
    #[serde(default)]
    pub tied_embeddings: bool,
}

fn default_norm_eps() -> f64 {
    ModelConfig::DEFAULT_NORM_EPS
}

impl ModelConfig {
    pub const DEFAULT_NORM_EPS: f64 = 1e-5;

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) x head_dim ({}) must equal d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) not divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::Config(format!(
                "rope head_dim {} differs from head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()?;
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config(format!("norm_eps must be positive, got {}", self.norm_eps)));
        }
        Ok(())
    }

    /// Number of query heads sharing each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_head_for(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// Shapes of every tensor a container must hold, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, [usize; 2])> {
        let d = self.d_model;
        let q = self.n_heads * self.head_dim;
        let kv = self.n_kv_heads * self.head_dim;
        let mut out = vec![("tok_embeddings".to_string(), [self.vocab_size, d])];
        for l in 0..self.n_layers {
            out.extend([
                (format!("layers.{l}.attention_norm"), [1, d]),
                (format!("layers.{l}.attention.wq"), [d, q]),
                (format!("layers.{l}.attention.wk"), [d, kv]),
                (format!("layers.{l}.attention.wv"), [d, kv]),
                (format!("layers.{l}.attention.wo"), [q, d]),
                (format!("layers.{l}.ffn_norm"), [1, d]),
                (format!("layers.{l}.feed_forward.w_gate"), [d, self.d_ff]),
                (format!("layers.{l}.feed_forward.w_up"), [d, self.d_ff]),
                (format!("layers.{l}.feed_forward.w_down"), [self.d_ff, d]),
            ]);
        }
        out.push(("norm".to_string(), [1, d]));
        if !self.tied_embeddings {
            out.push(("output".to_string(), [d, self.vocab_size]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            d_ff: 128,
            vocab_size: 100,
            rope: RopeParams::new(500_000.0, 16).unwrap(),
            norm_eps: 1e-5,
            tied_embeddings: false,
        }
    }

    #[test]
    fn valid_config_passes() {
        cfg().validate().unwrap();
        assert_eq!(cfg().kv_head_for(3), 1);
    }

    #[test]
    fn rejects_bad_grouping_and_width() {
        let mut c = cfg();
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg();
        c.head_dim = 8;
        c.rope.head_dim = 8;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg();
        c.n_layers = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tied_models_have_no_output_tensor() {
        let mut c = cfg();
        assert_eq!(c.tensor_shapes().len(), 1 + 2 * 9 + 2);
        c.tied_embeddings = true;
        assert!(c.tensor_shapes().iter().all(|(n, _)| n != "output"));
    }
}
