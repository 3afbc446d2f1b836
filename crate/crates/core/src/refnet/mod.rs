//! Tiny reference encoder-decoder segmentation model.
//!
//! Two encoder variants share one decoder:
//! - `conv`: a frozen 3x3 stem, then L blocks of frozen 3x3 depthwise
//!   mixing + trainable 1x1 pointwise projection + relu, and a final
//!   pointwise projection head. Adapter targets: the pointwise layers.
//! - `attention`: patch embedding + learned positions, then L single-head
//!   attention blocks (Q/K/V/O projections are the adapter targets) with a
//!   pointwise feed-forward.
//!
//! The decoder matches query features against class prototypes by
//! temperature-scaled cosine similarity through a learnable D x D
//! projection.

mod forward;
mod meta;

pub use forward::{
    argmax_mask, build_prototypes, decode, downsample_mask, encode, forward_episode_loss,
    forward_predict, FeatureMap, PassState, Scope,
};

pub use meta::{meta_train, MetaTrainConfig};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraTargetHost, TargetPolicy, TargetSpec};
use crate::tensor::{read_tapt, write_tapt, Tensor};
use crate::util::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Conv,
    Attention,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Conv => "conv",
            Variant::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Variant::Conv),
            "attention" => Ok(Variant::Attention),
            other => Err(Error::Config(format!(
                "unknown model variant '{}', expected conv or attention",
                other
            ))),
        }
    }

    /// Default adapter targeting policy for this architecture.
    pub fn default_policy(&self) -> TargetPolicy {
        match self {
            Variant::Conv => TargetPolicy::PointwiseConvs,
            Variant::Attention => TargetPolicy::AttentionProjections,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Stem output channels C (conv variant).
    pub channels: usize,
    /// Feature dimension D.
    pub feature_dim: usize,
    /// Encoder blocks L.
    pub blocks: usize,
    /// Conv stem stride s.
    pub stride: usize,
    /// Attention patch size P.
    pub patch_size: usize,
    /// Square input side; fixes the attention position table.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Conv,
            channels: 32,
            feature_dim: 32,
            blocks: 3,
            stride: 2,
            patch_size: 4,
            image_size: 32,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.channels < 2 || self.feature_dim < 2 {
            return err(format!(
                "channels {} and feature_dim {} must be >= 2",
                self.channels, self.feature_dim
            ));
        }
        if self.blocks == 0 {
            return err("blocks must be >= 1".to_string());
        }
        if self.stride == 0 || self.image_size % self.stride != 0 {
            return err(format!(
                "image_size {} must be divisible by stride {}",
                self.image_size, self.stride
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }

    /// Feature-map downsampling factor of the encoder.
    pub fn feature_factor(&self) -> usize {
        match self.variant {
            Variant::Conv => self.stride,
            Variant::Attention => self.patch_size,
        }
    }
}

/// Index of a parameter in the [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Trained during meta-training. Frozen 3x3 kernels are not.
    pub meta_trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: impl Into<String>, value: Tensor, meta_trainable: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, meta_trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Param)> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|i| (ParamId(i), &self.params[i]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count (frozen included).
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Combined checksum over all parameters, order-sensitive.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0u64;
        for p in &self.params {
            acc = mix_seed(&[acc, p.value.checksum()]);
        }
        acc
    }
}

/// A linear layer in `x * W + b` convention: `W[m, n]`, bias `[1, n]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub target_id: String,
    pub w: ParamId,
    pub b: ParamId,
    pub m: usize,
    pub n: usize,
}

/// A 1x1 convolution stored channel-planar: weights `[C_out, C_in]`, bias
/// `[C_out]`. In `x * W` terms the layer is `W[m, n]` with `m = C_in`,
/// `n = C_out`; adapters follow that convention.
#[derive(Debug, Clone)]
pub struct PlanarConvLayer {
    pub target_id: String,
    pub w: ParamId,
    pub b: ParamId,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub dw: ParamId,
    pub pw: PlanarConvLayer,
}

#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub blocks: Vec<ConvBlock>,
    pub head: PlanarConvLayer,
}

#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub o: LinearLayer,
    pub ff1: LinearLayer,
    pub ff2: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct AttnEncoder {
    pub patch: LinearLayer,
    pub pos: ParamId,
    pub blocks: Vec<AttnBlock>,
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Conv(ConvEncoder),
    Attention(AttnEncoder),
}

/// Learnable D x D projection plus temperature; prototype matching itself
/// has no parameters.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub proj: ParamId,
    pub tau: ParamId,
}

/// Decoder parameter values, extracted for the standalone decode op.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub proj: Tensor,
    pub tau: f64,
}

/// Masked average of support features for one class.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Tensor,
}

/// Frozen encoder/decoder parameters plus structure. Adapters live beside
/// the model (in an `AdapterSet`), never inside it.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: DecoderState,
    pub meta_steps: u64,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -a, a)
}

impl ModelState {
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::default();
        let c = cfg.channels;
        let d = cfg.feature_dim;

        let linear = |store: &mut ParamStore,
                          rng: &mut ChaCha8Rng,
                          id: &str,
                          m: usize,
                          n: usize|
         -> LinearLayer {
            let w = store.add(format!("{}.w", id), he_uniform(rng, vec![m, n], m), true);
            let b = store.add(format!("{}.b", id), Tensor::zeros(vec![1, n]), true);
            LinearLayer { target_id: id.to_string(), w, b, m, n }
        };

        // Planar 1x1 projection: weights [n, m], bias [n].
        let planar = |store: &mut ParamStore,
                      rng: &mut ChaCha8Rng,
                      id: &str,
                      m: usize,
                      n: usize|
         -> PlanarConvLayer {
            let w = store.add(format!("{}.w", id), he_uniform(rng, vec![n, m], m), true);
            let b = store.add(format!("{}.b", id), Tensor::zeros(vec![n]), true);
            PlanarConvLayer { target_id: id.to_string(), w, b, m, n }
        };

        let encoder = match cfg.variant {
            Variant::Conv => {
                let stem_w =
                    store.add("stem.w", he_uniform(&mut rng, vec![c, 3, 3, 3], 27), false);
                let stem_b = store.add(
                    "stem.b",
                    Tensor::rand_uniform(&mut rng, vec![c], -0.2, 0.2),
                    false,
                );
                let mut blocks = Vec::with_capacity(cfg.blocks);
                for i in 0..cfg.blocks {
                    let dw = store.add(
                        format!("block{}.dw", i),
                        Tensor::rand_uniform(&mut rng, vec![c, 3, 3], -0.4, 0.4),
                        false,
                    );
                    let pw = planar(&mut store, &mut rng, &format!("block{}.pointwise", i), c, c);
                    blocks.push(ConvBlock { dw, pw });
                }
                let head = planar(&mut store, &mut rng, "head", c, d);
                Encoder::Conv(ConvEncoder { stem_w, stem_b, blocks, head })
            }
            Variant::Attention => {
                let p = cfg.patch_size;
                let tokens = (cfg.image_size / p) * (cfg.image_size / p);
                let patch = linear(&mut store, &mut rng, "patch_embed", 3 * p * p, d);
                let pos = store.add(
                    "pos_embed",
                    Tensor::rand_uniform(&mut rng, vec![tokens, d], -0.1, 0.1),
                    true,
                );
                let mut blocks = Vec::with_capacity(cfg.blocks);
                for i in 0..cfg.blocks {
                    let q = linear(&mut store, &mut rng, &format!("block{}.attn.q", i), d, d);
                    let k = linear(&mut store, &mut rng, &format!("block{}.attn.k", i), d, d);
                    let v = linear(&mut store, &mut rng, &format!("block{}.attn.v", i), d, d);
                    let o = linear(&mut store, &mut rng, &format!("block{}.attn.o", i), d, d);
                    let ff1 = linear(&mut store, &mut rng, &format!("block{}.ff1", i), d, d);
                    let ff2 = linear(&mut store, &mut rng, &format!("block{}.ff2", i), d, d);
                    blocks.push(AttnBlock { q, k, v, o, ff1, ff2 });
                }
                Encoder::Attention(AttnEncoder { patch, pos, blocks })
            }
        };

        let proj = store.add("decoder.proj", Tensor::eye(d), true);
        let tau = store.add("decoder.tau", Tensor::scalar(10.0), true);
        let decoder = DecoderState { proj, tau };

        Ok(ModelState { cfg, store, encoder, decoder, meta_steps: 0 })
    }

    pub fn decoder_params(&self) -> DecoderParams {
        DecoderParams {
            proj: self.store.get(self.decoder.proj).value.clone(),
            tau: self.store.get(self.decoder.tau).value.data()[0],
        }
    }

    /// Parameter ids of the decoder (the Decoder-FT trainable set).
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        vec![self.decoder.proj, self.decoder.tau]
    }

    /// Combined checksum of every non-decoder parameter.
    pub fn encoder_checksum(&self) -> u64 {
        let mut acc = 0u64;
        for (_, p) in self.store.iter() {
            if !p.name.starts_with("decoder.") {
                acc = mix_seed(&[acc, p.value.checksum()]);
            }
        }
        acc
    }

    /// Combined checksum of the decoder parameters.
    pub fn decoder_checksum(&self) -> u64 {
        let mut acc = 0u64;
        for (_, p) in self.store.iter() {
            if p.name.starts_with("decoder.") {
                acc = mix_seed(&[acc, p.value.checksum()]);
            }
        }
        acc
    }

    fn targets_for_policy(&self, policy: TargetPolicy) -> Vec<TargetSpec> {
        match (&self.encoder, policy) {
            (Encoder::Conv(enc), TargetPolicy::PointwiseConvs) => enc
                .blocks
                .iter()
                .map(|b| &b.pw)
                .chain(std::iter::once(&enc.head))
                .map(|l| TargetSpec { target_id: l.target_id.clone(), m: l.m, n: l.n })
                .collect(),
            (Encoder::Attention(enc), TargetPolicy::AttentionProjections) => enc
                .blocks
                .iter()
                .flat_map(|b| [&b.q, &b.k, &b.v, &b.o])
                .map(|l| TargetSpec { target_id: l.target_id.clone(), m: l.m, n: l.n })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Save as a checkpoint directory: a manifest plus one TAPT file per
    /// parameter.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let params_dir = dir.join("params");
        std::fs::create_dir_all(&params_dir)?;
        let mut names = Vec::new();
        for (i, (_, p)) in self.store.iter().enumerate() {
            let file = format!("p{:03}_{}.tapt", i, p.name.replace('.', "_"));
            write_tapt(&params_dir.join(&file), &p.value)?;
            names.push(p.name.clone());
        }
        let manifest = CheckpointManifest {
            config: self.cfg.clone(),
            meta_steps: self.meta_steps,
            params: names,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("checkpoint manifest encode: {}", e)))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|_| Error::Data(format!("{} is not a checkpoint directory", dir.display())))?;
        let manifest: CheckpointManifest = serde_json::from_str(&raw)
            .map_err(|e| Error::Data(format!("checkpoint manifest decode: {}", e)))?;
        let mut model = ModelState::init(manifest.config)?;
        if manifest.params.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} params, model expects {}",
                manifest.params.len(),
                model.store.len()
            )));
        }
        for (i, name) in manifest.params.iter().enumerate() {
            let (id, current) = model
                .store
                .by_name(name)
                .ok_or_else(|| Error::Data(format!("unknown checkpoint parameter {}", name)))?;
            let file = format!("p{:03}_{}.tapt", i, name.replace('.', "_"));
            let value = read_tapt(&dir.join("params").join(&file))?;
            if value.shape() != current.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} has shape {:?}, expected {:?}",
                    name,
                    value.shape(),
                    current.value.shape()
                )));
            }
            model.store.get_mut(id).value = value;
        }
        model.meta_steps = manifest.meta_steps;
        Ok(model)
    }
}

impl LoraTargetHost for ModelState {
    fn lora_targets(&self, policy: TargetPolicy) -> Result<Vec<TargetSpec>> {
        let targets = self.targets_for_policy(policy);
        if targets.is_empty() {
            return Err(Error::Config(format!(
                "policy {} matches no layers on the {} variant",
                policy.as_str(),
                self.cfg.variant.as_str()
            )));
        }
        Ok(targets)
    }

    fn total_param_count(&self) -> usize {
        self.store.total_count()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    meta_steps: u64,
    params: Vec<String>,
}
