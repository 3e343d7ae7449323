//! Patch encoder, query decoder and prediction heads.

mod layers;
mod query;

pub use layers::{
    attention, Bound, FeedForward, Linear, MultiHeadAttention, Norm, ParamId, ParamStore, LN_EPS,
};
pub use query::{FramePredictions, QueryKind, QueryRecord, QuerySet, TrackId};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qim::TanParams;
use crate::scalar::Scalar;
use crate::tensor::{Activation, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image shape {got:?} does not match expected {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("query width {queries} differs from memory width {memory}")]
    Width { queries: usize, memory: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_detect_queries: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    /// Sine positional encoding on encoder tokens and cross-attention keys.
    pub positional_encoding: bool,
    /// Normalize sublayer inputs instead of residual sums, with a final norm
    /// after each stack.
    pub norm_first: bool,
    /// Initial class-logit bias expressed as a prior probability.
    pub class_prior: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 3,
            n_detect_queries: 16,
            patch_size: 8,
            image_size: 64,
            channels: 1,
            n_classes: 1,
            ffn_dim: 128,
            activation: Activation::Relu,
            positional_encoding: true,
            norm_first: false,
            class_prior: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err("d_model must be a positive multiple of n_heads");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err("image_size must be divisible by patch_size");
        }
        if self.n_detect_queries == 0 || self.n_classes == 0 || self.channels == 0 || self.ffn_dim == 0 {
            return err("n_detect_queries, n_classes, channels and ffn_dim must be positive");
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return err("class_prior must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: Norm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

/// Handles of every parameter group, in registration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub patch_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Option<Norm>,
    pub detect_queries: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Option<Norm>,
    pub class_head: Linear,
    pub box_head: [Linear; 3],
    pub tan: TanParams,
}

/// Encoded frame: token features plus their positional code.
#[derive(Debug, Clone, Copy)]
pub struct Memory<'t, T> {
    pub tokens: Var<'t, T>,
    pub pos: Var<'t, T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub arch: Architecture,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn deterministically from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let d = config.d_model;
        let h = config.n_heads;
        let patch_in = config.patch_size * config.patch_size * config.channels;
        let patch_proj = Linear::new(&mut ps, "patch_proj", patch_in, d, rng);
        let encoder = (0..config.n_encoder_layers)
            .map(|i| {
                let n = format!("encoder.{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(&mut ps, &format!("{n}.attn"), d, h, rng),
                    norm1: Norm::new(&mut ps, &format!("{n}.norm1"), d),
                    ffn: FeedForward::new(&mut ps, &format!("{n}.ffn"), d, config.ffn_dim, config.activation, rng),
                    norm2: Norm::new(&mut ps, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let encoder_norm = config.norm_first.then(|| Norm::new(&mut ps, "encoder.norm", d));
        let detect_queries = ps.gaussian("detect_queries", &[config.n_detect_queries, d], 0.02, rng);
        let decoder = (0..config.n_decoder_layers)
            .map(|i| {
                let n = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut ps, &format!("{n}.self_attn"), d, h, rng),
                    norm1: Norm::new(&mut ps, &format!("{n}.norm1"), d),
                    cross_attn: MultiHeadAttention::new(&mut ps, &format!("{n}.cross_attn"), d, h, rng),
                    norm2: Norm::new(&mut ps, &format!("{n}.norm2"), d),
                    ffn: FeedForward::new(&mut ps, &format!("{n}.ffn"), d, config.ffn_dim, config.activation, rng),
                    norm3: Norm::new(&mut ps, &format!("{n}.norm3"), d),
                }
            })
            .collect();
        let decoder_norm = config.norm_first.then(|| Norm::new(&mut ps, "decoder.norm", d));
        let class_head = Linear::new(&mut ps, "class_head", d, config.n_classes, rng);
        let prior = config.class_prior;
        *ps.get_mut(class_head.b) = Tensor::full(&[config.n_classes], T::of((prior / (1.0 - prior)).ln()));
        let box_head = [
            Linear::new(&mut ps, "box_head.0", d, d, rng),
            Linear::new(&mut ps, "box_head.1", d, d, rng),
            Linear::new(&mut ps, "box_head.2", d, 4, rng),
        ];
        let tan = TanParams::new(&mut ps, "tan", d, h, config.ffn_dim, config.activation, rng);
        Ok(Self {
            config,
            params: ps,
            arch: Architecture {
                patch_proj,
                encoder,
                encoder_norm,
                detect_queries,
                decoder,
                decoder_norm,
                class_head,
                box_head,
                tan,
            },
        })
    }

    /// Rebuilds the layout for `config` and installs `params` by name.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let id = ParamId(i);
            if model.params.name(id) != name || model.params.get(id).shape() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {i} is {name} {:?}, expected {} {:?}",
                    t.shape(),
                    model.params.name(id),
                    model.params.get(id).shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Splits an `[H, W, C]` image into flattened non-overlapping patches.
    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let c = &self.config;
        let expected = c.image_shape().to_vec();
        if image.shape() != expected.as_slice() {
            return Err(ModelError::ImageShape {
                expected,
                got: image.shape().to_vec(),
            });
        }
        Ok(patchify(image, c.patch_size)?)
    }

    pub fn encode<'t>(&self, image: &Tensor<T>, p: &Bound<'t, T>) -> Result<Memory<'t, T>, ModelError> {
        let tape = p.get(self.arch.detect_queries).tape();
        self.encode_patches(tape.constant(self.patchify(image)?), p)
    }

    /// Encodes already patchified `[tokens, patch_dim]` input.
    pub fn encode_patches<'t>(&self, patches: Var<'t, T>, p: &Bound<'t, T>) -> Result<Memory<'t, T>, ModelError> {
        let tape = patches.tape();
        let g = self.config.image_size / self.config.patch_size;
        let pos = if self.config.positional_encoding {
            sine_position_encoding(g, g, self.config.d_model)
        } else {
            Tensor::zeros(&[g * g, self.config.d_model])
        };
        let pos = tape.constant(pos);
        let mut x = self.arch.patch_proj.forward(patches, p)?;
        for layer in &self.arch.encoder {
            if self.config.norm_first {
                let h = layer.norm1.forward(x, p)?;
                let qk = h.add(pos)?;
                x = x.add(layer.attn.forward(qk, qk, h, p)?)?;
                x = x.add(layer.ffn.forward(layer.norm2.forward(x, p)?, p)?)?;
            } else {
                let qk = x.add(pos)?;
                let a = layer.attn.forward(qk, qk, x, p)?;
                x = layer.norm1.forward(x.add(a)?, p)?;
                let f = layer.ffn.forward(x, p)?;
                x = layer.norm2.forward(x.add(f)?, p)?;
            }
        }
        if let Some(n) = &self.arch.encoder_norm {
            x = n.forward(x, p)?;
        }
        Ok(Memory { tokens: x, pos })
    }

    /// Learnable detect block followed by the given track block.
    pub fn query_set<'t>(
        &self,
        p: &Bound<'t, T>,
        track_embeddings: Var<'t, T>,
        track_records: Vec<QueryRecord>,
    ) -> Result<QuerySet<'t, T>, ModelError> {
        let det = p.get(self.arch.detect_queries);
        let tape = det.tape();
        let embeddings = if track_records.is_empty() {
            det
        } else {
            tape.concat(&[det, track_embeddings], 0)?
        };
        let mut records = vec![QueryRecord::detect(); self.config.n_detect_queries];
        records.extend(track_records);
        Ok(QuerySet::new(embeddings, records)?)
    }

    pub fn decode<'t>(
        &self,
        queries: &QuerySet<'t, T>,
        memory: &Memory<'t, T>,
        p: &Bound<'t, T>,
    ) -> Result<FramePredictions<'t, T>, ModelError> {
        let qw = queries.embeddings.shape()[1];
        let mw = memory.tokens.shape()[1];
        if qw != mw {
            return Err(ModelError::Width {
                queries: qw,
                memory: mw,
            });
        }
        let keys = memory.tokens.add(memory.pos)?;
        let mut x = queries.embeddings;
        for layer in &self.arch.decoder {
            if self.config.norm_first {
                let h = layer.norm1.forward(x, p)?;
                x = x.add(layer.self_attn.forward(h, h, h, p)?)?;
                let h = layer.norm2.forward(x, p)?;
                x = x.add(layer.cross_attn.forward(h, keys, memory.tokens, p)?)?;
                x = x.add(layer.ffn.forward(layer.norm3.forward(x, p)?, p)?)?;
            } else {
                let a = layer.self_attn.forward(x, x, x, p)?;
                x = layer.norm1.forward(x.add(a)?, p)?;
                let c = layer.cross_attn.forward(x, keys, memory.tokens, p)?;
                x = layer.norm2.forward(x.add(c)?, p)?;
                let f = layer.ffn.forward(x, p)?;
                x = layer.norm3.forward(x.add(f)?, p)?;
            }
        }
        if let Some(n) = &self.arch.decoder_norm {
            x = n.forward(x, p)?;
        }
        let probs = self.arch.class_head.forward(x, p)?.sigmoid();
        let [b0, b1, b2] = &self.arch.box_head;
        let b = b0.forward(x, p)?.relu();
        let b = b1.forward(b, p)?.relu();
        let boxes = b2.forward(b, p)?.sigmoid();
        Ok(FramePredictions {
            probs,
            boxes,
            hidden: x,
            n_detect: queries.n_detect(),
        })
    }
}

/// Flattens `[H, W, C]` into `[(H/p)·(W/p), p·p·C]`, patches in row-major order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>, TensorError> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(TensorError::InvalidArgument {
            op: "patchify",
            msg: format!("image {s:?} not divisible into {patch}x{patch} patches"),
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let px = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for pxi in 0..gw {
            for dy in 0..patch {
                let row = (py * patch + dy) * w * c;
                let start = row + pxi * patch * c;
                out.extend_from_slice(&px[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], out)
}

/// Two-dimensional sine/cosine code: half the channels encode the row, half
/// the column, each at geometrically spaced frequencies.
pub fn sine_position_encoding<T: Scalar>(gh: usize, gw: usize, d: usize) -> Tensor<T> {
    let dy = d / 2;
    let dx = d - dy;
    let two_pi = std::f64::consts::TAU;
    let code = |pos: f64, ch: usize, width: usize| {
        let freq = 10000f64.powf((2 * (ch / 2)) as f64 / width.max(1) as f64);
        let a = pos / freq;
        if ch % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut data = Vec::with_capacity(gh * gw * d);
    for y in 0..gh {
        for x in 0..gw {
            let ny = (y as f64 + 0.5) / gh as f64 * two_pi;
            let nx = (x as f64 + 0.5) / gw as f64 * two_pi;
            for ch in 0..dy {
                data.push(T::of(code(ny, ch, dy)));
            }
            for ch in 0..dx {
                data.push(T::of(code(nx, ch, dx)));
            }
        }
    }
    Tensor::new(vec![gh * gw, d], data).expect("consistent extents")
}
