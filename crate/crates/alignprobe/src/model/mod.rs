//! The L-layer transformer encoder under study: parameter initialization,
//! forward pass exposing every intermediate layer, selective re-initialization
//! of layer blocks, and checkpoint I/O.

mod checkpoint;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoder::{bind_params, encoder_forward, mlm_logits, BoundParams, HiddenStates};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::rng_for;
use crate::tensor::{TensorError, TensorF};

/// Layer-norm epsilon used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-12;

/// Standard deviation of a unit normal truncated at +/-2; draws are divided
/// by this so the realized std of initialized weights equals `init_std`.
const TRUNC_NORMAL_STD: f64 = 0.879_626_012_002_991_7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("malformed checkpoint at byte {offset}: {what}")]
    Format { offset: u64, what: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters that determine every tensor shape in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Stored as f32 in checkpoints; kept as its f32 bit pattern here so
    /// config equality is exact across save/load.
    pub init_std_bits: u32,
    /// Whether the MLM output projection reuses the token embedding.
    pub mlm_tied: bool,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train in minutes on a CPU while
    /// keeping a meaningful lower/middle/upper-third layer structure.
    pub fn desk_default() -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            max_seq_len: 32,
            init_std_bits: (0.02f32).to_bits(),
            mlm_tied: false,
        }
    }

    /// Tiny configuration for gradient checking and fast unit tests.
    pub fn tiny(n_layers: usize) -> Self {
        Self {
            n_layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 10,
            init_std_bits: (0.25f32).to_bits(),
            mlm_tied: false,
        }
    }

    pub fn init_std(&self) -> f64 {
        f32::from_bits(self.init_std_bits) as f64
    }

    pub fn set_init_std(&mut self, std: f64) {
        self.init_std_bits = (std as f32).to_bits();
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.init_std() <= 0.0 {
            return Err(ModelError::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight,
    Bias,
    Gain,
}

fn layer_prefix(block: usize) -> String {
    if block == 0 {
        "embed.".to_string()
    } else {
        format!("layer.{block}.")
    }
}

/// Shapes and init kinds of every encoder tensor, in name order.
fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let d = config.d_model;
    let mut specs = vec![
        ("embed.tok".into(), vec![config.vocab_size, d], Weight),
        ("embed.pos".into(), vec![config.max_seq_len, d], Weight),
        ("embed.ln.gain".into(), vec![d], Gain),
        ("embed.ln.bias".into(), vec![d], Bias),
    ];
    for layer in 1..=config.n_layers {
        let p = layer_prefix(layer);
        for name in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{p}attn.{name}"), vec![d, d], Weight));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{p}attn.{name}"), vec![d], Bias));
        }
        specs.push((format!("{p}ln1.gain"), vec![d], Gain));
        specs.push((format!("{p}ln1.bias"), vec![d], Bias));
        specs.push((format!("{p}ff.w1"), vec![d, config.d_ff], Weight));
        specs.push((format!("{p}ff.b1"), vec![config.d_ff], Bias));
        specs.push((format!("{p}ff.w2"), vec![config.d_ff, d], Weight));
        specs.push((format!("{p}ff.b2"), vec![d], Bias));
        specs.push((format!("{p}ln2.gain"), vec![d], Gain));
        specs.push((format!("{p}ln2.bias"), vec![d], Bias));
    }
    if !config.mlm_tied {
        specs.push(("mlm.w".into(), vec![d, config.vocab_size], Weight));
    }
    specs.push(("mlm.b".into(), vec![config.vocab_size], Bias));
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    specs
}

/// Draws one tensor's worth of values for its init kind. Weights come from a
/// normal truncated at two raw standard deviations, rescaled so the realized
/// std equals `init_std`; biases are 0; gains are 1.
fn draw_tensor(name: &str, dims: &[usize], kind: ParamKind, std: f64, seed: u64) -> TensorF {
    let len = dims.iter().product();
    let values = match kind {
        ParamKind::Bias => vec![0.0; len],
        ParamKind::Gain => vec![1.0; len],
        ParamKind::Weight => {
            let mut rng = rng_for(seed, &format!("init/{name}"));
            let scale = std / TRUNC_NORMAL_STD;
            (0..len)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z * scale;
                    }
                })
                .collect()
        }
    };
    TensorF::new(dims.to_vec(), values).expect("spec dims are consistent")
}

/// All learnable parameters of the encoder, addressable by layer block:
/// block 0 is the embedding block, blocks 1..=L are the transformer layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: ModelConfig,
    tensors: BTreeMap<String, TensorF>,
}

impl EncoderParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensor(&self, name: &str) -> &TensorF {
        &self.tensors[name]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut TensorF {
        self.tensors.get_mut(name).expect("unknown tensor name")
    }

    /// Name-ordered iteration over all tensors.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorF)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorF> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, TensorF> {
        self.tensors
    }

    /// Which block a tensor belongs to; the MLM head is outside all blocks.
    pub fn block_of(name: &str) -> Option<usize> {
        if name.starts_with("embed.") {
            Some(0)
        } else {
            name.strip_prefix("layer.")?
                .split('.')
                .next()?
                .parse()
                .ok()
        }
    }

    /// Reconstructs params from named tensors, validating every shape the
    /// config implies. Extra tensors are rejected here; checkpoint loading
    /// splits head tensors off before calling this.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: BTreeMap<String, TensorF>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if tensors.len() != specs.len() {
            let expected: Vec<&String> = specs.iter().map(|(n, _, _)| n).collect();
            let got: Vec<&String> = tensors.keys().collect();
            return Err(ModelError::Config(format!(
                "expected {} encoder tensors, got {} (expected {expected:?}, got {got:?})",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, dims, _) in &specs {
            let tensor = tensors
                .get(name)
                .ok_or_else(|| ModelError::Config(format!("missing tensor {name}")))?;
            if tensor.dims() != dims.as_slice() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has dims {:?}, config implies {dims:?}",
                    tensor.dims()
                )));
            }
        }
        Ok(Self { config, tensors })
    }
}

/// Fresh encoder parameters, deterministic in `(config, seed)`. Each tensor
/// draws from its own named stream, so any subset can be redrawn later
/// without perturbing the rest.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<EncoderParams, ModelError> {
    config.validate()?;
    let tensors = param_specs(config)
        .into_iter()
        .map(|(name, dims, kind)| {
            let t = draw_tensor(&name, &dims, kind, config.init_std(), seed);
            (name, t)
        })
        .collect();
    Ok(EncoderParams {
        config: *config,
        tensors,
    })
}

/// Replaces every tensor inside the listed blocks with a fresh draw from the
/// init scheme (under `seed`), leaving all other tensors bitwise unchanged.
/// Block 0 is the embedding block.
pub fn random_init_layers(
    params: &EncoderParams,
    layer_set: &[usize],
    seed: u64,
) -> Result<EncoderParams, ModelError> {
    for &block in layer_set {
        if block > params.config.n_layers {
            return Err(ModelError::Input(format!(
                "layer index {block} out of range 0..={}",
                params.config.n_layers
            )));
        }
    }
    let mut out = params.clone();
    for (name, dims, kind) in param_specs(&params.config) {
        let block = EncoderParams::block_of(&name);
        if block.is_some_and(|b| layer_set.contains(&b)) {
            let t = draw_tensor(&name, &dims, kind, params.config.init_std(), seed);
            out.tensors.insert(name, t);
        }
    }
    Ok(out)
}
