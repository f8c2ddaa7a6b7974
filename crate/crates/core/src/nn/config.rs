use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyper-parameters of the encoder–decoder model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 44,
            d_model: 32,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            d_ffn: 64,
            max_len: 16,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{key} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig("d_model not divisible by n_heads".into()));
        }
        if self.vocab_size <= 4 {
            return Err(Error::InvalidConfig("vocab_size must exceed the 4 reserved ids".into()));
        }
        if self.max_len < 3 {
            return Err(Error::InvalidConfig("max_len must be >= 3".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key=value` lines used in checkpoint headers.
    pub(crate) fn header_lines(&self) -> Vec<String> {
        vec![
            format!("vocab_size={}", self.vocab_size),
            format!("d_model={}", self.d_model),
            format!("n_heads={}", self.n_heads),
            format!("enc_layers={}", self.enc_layers),
            format!("dec_layers={}", self.dec_layers),
            format!("d_ffn={}", self.d_ffn),
            format!("max_len={}", self.max_len),
            format!("seed={}", self.seed),
        ]
    }

    pub(crate) fn from_header_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let bad = |msg: String| Error::Checkpoint(msg);
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            let parse = || value.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "vocab_size" => cfg.vocab_size = parse()?,
                "d_model" => cfg.d_model = parse()?,
                "n_heads" => cfg.n_heads = parse()?,
                "enc_layers" => cfg.enc_layers = parse()?,
                "dec_layers" => cfg.dec_layers = parse()?,
                "d_ffn" => cfg.d_ffn = parse()?,
                "max_len" => cfg.max_len = parse()?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
                other => return Err(bad(format!("unknown header key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
