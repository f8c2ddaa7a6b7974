use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::NamedTensor;

const ATTN: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Names and shapes of every parameter implied by `config`, sorted by name.
pub fn parameter_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = config.d_model;
    let mut shapes = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>| {
        shapes.insert(name, shape);
    };
    put("emb.tok".into(), vec![config.vocab_size, d]);
    put("emb.pos".into(), vec![config.max_len, d]);
    let block = |put: &mut dyn FnMut(String, Vec<usize>), prefix: String, attns: &[&str], norms: &[&str]| {
        for attn in attns {
            for w in ATTN {
                put(format!("{prefix}.{attn}.{w}"), vec![d, d]);
            }
        }
        put(format!("{prefix}.ffn.w1"), vec![d, config.d_ffn]);
        put(format!("{prefix}.ffn.b1"), vec![config.d_ffn]);
        put(format!("{prefix}.ffn.w2"), vec![config.d_ffn, d]);
        put(format!("{prefix}.ffn.b2"), vec![d]);
        for ln in norms {
            put(format!("{prefix}.{ln}.g"), vec![d]);
            put(format!("{prefix}.{ln}.b"), vec![d]);
        }
    };
    for i in 0..config.enc_layers {
        block(&mut put, format!("enc.{i}"), &["attn"], &["ln1", "ln2"]);
    }
    for i in 0..config.dec_layers {
        block(&mut put, format!("dec.{i}"), &["attn", "xattn"], &["ln1", "ln2", "ln3"]);
    }
    put("out.w".into(), vec![config.vocab_size, d]);
    put("out.b".into(), vec![config.vocab_size]);
    shapes
}

/// All parameters of one encoder–decoder model, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    config: ModelConfig,
    tensors: BTreeMap<String, NamedTensor<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Builds a state from explicit tensors; the name/shape set must match `config`.
    pub fn from_tensors(config: ModelConfig, tensors: impl IntoIterator<Item = NamedTensor<T>>) -> Result<Self> {
        config.validate()?;
        let tensors: BTreeMap<_, _> = tensors.into_iter().map(|t| (t.name().to_string(), t)).collect();
        let expected = parameter_shapes(&config);
        let only_left: Vec<_> = tensors.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
        let only_right: Vec<_> = expected.keys().filter(|k| !tensors.contains_key(*k)).cloned().collect();
        if !only_left.is_empty() || !only_right.is_empty() {
            return Err(Error::NameSetMismatch { only_left, only_right });
        }
        for (name, shape) in &expected {
            if tensors[name].shape() != shape.as_slice() {
                return Err(Error::InvalidTensor {
                    name: name.clone(),
                    reason: format!("expected shape {shape:?}, got {:?}", tensors[name].shape()),
                });
            }
        }
        Ok(ModelState { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl ExactSizeIterator<Item = &NamedTensor<T>> {
        self.tensors.values()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl ExactSizeIterator<Item = &mut NamedTensor<T>> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(NamedTensor::param_count).sum()
    }

    /// Replaces a tensor of the same name and shape.
    pub fn replace(&mut self, tensor: NamedTensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(tensor.name())
            .ok_or_else(|| Error::UnknownTensor(tensor.name().to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::TensorMismatch {
                left: slot.name().to_string(),
                left_shape: slot.shape().to_vec(),
                right: tensor.name().to_string(),
                right_shape: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Checkpoint: config as `key=value` lines, a blank line, then tensor records.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for line in self.config.header_lines() {
            writeln!(w, "{line}")?;
        }
        writeln!(w)?;
        for t in self.tensors.values() {
            t.write_record(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

impl ModelState<f32> {
    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut lines = Vec::new();
        loop {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if n == 0 {
                return Err(Error::Checkpoint("missing header terminator".into()));
            }
            let line = line.trim_end_matches('\n').to_string();
            if line.is_empty() {
                break;
            }
            lines.push(line);
        }
        let config = ModelConfig::from_header_lines(lines.iter().map(String::as_str))?;
        let mut tensors = Vec::new();
        while let Some(t) = NamedTensor::read_record(&mut reader)? {
            tensors.push(t);
        }
        ModelState::from_tensors(config, tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(file)
    }
}

/// Seeded initialization: Glorot-uniform matrices, zero biases, unit gains.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ModelState<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = Vec::new();
    for (name, shape) in parameter_shapes(config) {
        let numel: usize = shape.iter().product();
        let values: Vec<T> = if shape.len() == 2 {
            let s = (6.0 / (shape[0] + shape[1]) as f64).sqrt() as f32;
            (0..numel).map(|_| T::of(rng.gen_range(-s..=s) as f64)).collect()
        } else if name.ends_with(".g") {
            vec![T::one(); numel]
        } else {
            vec![T::zero(); numel]
        };
        tensors.push(NamedTensor::new(name, shape, values)?);
    }
    ModelState::from_tensors(config.clone(), tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form parameter count for the default naming scheme.
    fn closed_form(c: &ModelConfig) -> usize {
        let (v, d, f, l) = (c.vocab_size, c.d_model, c.d_ffn, c.max_len);
        let attn = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        v * d + l * d + c.enc_layers * enc + c.dec_layers * dec + v * d + v
    }

    #[test]
    fn default_param_count_matches_closed_form() {
        let c = ModelConfig::default();
        let m = init_model::<f32>(&c).unwrap();
        assert_eq!(m.num_params(), closed_form(&c));
        // 1408 + 512 + 2*8416 + 2*12576 + 1408 + 44
        assert_eq!(m.num_params(), 45_356);
        assert_eq!(m.len(), 2 + 2 * 12 + 2 * 18 + 2);
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        assert_eq!(init_model::<f32>(&c).unwrap(), init_model::<f32>(&c).unwrap());
        let other = init_model::<f32>(&ModelConfig { seed: 2, ..c }).unwrap();
        assert_ne!(init_model::<f32>(&ModelConfig::default()).unwrap(), other);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        let err = init_model::<f32>(&c).unwrap_err().to_string();
        assert!(err.contains("d_model not divisible by n_heads"), "{err}");
    }

    #[test]
    fn init_ranges() {
        let c = ModelConfig::default();
        let m = init_model::<f32>(&c).unwrap();
        let s = (6.0f32 / (32.0 + 64.0)).sqrt();
        assert!(m.get("enc.0.ffn.w1").unwrap().values().iter().all(|v| v.abs() <= s));
        assert!(m.get("dec.1.ln3.g").unwrap().values().iter().all(|&v| v == 1.0));
        assert!(m.get("out.b").unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn names_are_sorted() {
        let m = init_model::<f32>(&ModelConfig::default()).unwrap();
        let names: Vec<_> = m.names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model::<f32>(&ModelConfig {
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert!(buf.starts_with(b"vocab_size=44\nd_model=32\n"));
        let back = ModelState::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(m, back);
    }
}
