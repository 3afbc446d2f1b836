//! The Take-a-Peek adaptation loop, its baselines, and per-episode state
//! management.
//!
//! One adaptation iteration walks the support set in fixed index order;
//! each support image in turn plays pseudo-query against prototypes built
//! from a `Select`-chosen context of the remaining supports. Only the
//! method's trainable set changes: LoRA adapters for `tap`, the decoder
//! projection and temperature for `decoder_ft`, nothing for `vanilla`.

pub mod adam;
pub mod select;

pub use adam::Adam;
pub use select::{validate_context, SelectStrategy};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::loss::FocalConfig;
use crate::metrics::miou;
use crate::refnet::{
    forward_episode_loss, forward_predict, ModelState, PassState, Scope,
};
use crate::tensor::Tensor;
use crate::util::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Tap,
    DecoderFt,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Tap => "tap",
            Method::DecoderFt => "decoder_ft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "tap" => Ok(Method::Tap),
            "decoder_ft" => Ok(Method::DecoderFt),
            other => Err(Error::Config(format!(
                "unknown method '{}', expected vanilla, tap, or decoder_ft",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub method: Method,
    /// Adaptation iterations T (each walks the whole support set).
    pub iterations: usize,
    pub rank: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub select: SelectStrategy,
    /// Let gradients flow through the support (prototype) branch, not just
    /// the pseudo-query branch.
    pub support_gradients: bool,
    pub loss: FocalConfig,
    pub seed: u64,
    /// Record query mIoU after every iteration (t = 0 included).
    pub track_iteration_miou: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::Tap,
            iterations: 8,
            rank: 16,
            alpha: 1.0,
            learning_rate: 1e-3,
            select: SelectStrategy::Identity,
            support_gradients: true,
            loss: FocalConfig::default(),
            seed: 0,
            track_iteration_miou: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, support_size: usize) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.loss.validate()?;
        self.select.validate(support_size)
    }
}

/// A model prepared for (or produced by) adaptation: a private clone of
/// the checkpoint plus the adapters trained beside it.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub model: ModelState,
    pub adapters: Option<AdapterSet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassRecord {
    pub iteration: usize,
    pub support_index: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub method: Method,
    pub rank: usize,
    pub iterations: usize,
    pub passes: Vec<PassRecord>,
    /// Query mIoU after iterations 0..=T when tracking is enabled.
    pub iteration_miou: Vec<f64>,
    pub replicated: bool,
}

impl AdaptTrace {
    fn new(method: Method, rank: usize, iterations: usize, replicated: bool) -> Self {
        AdaptTrace {
            method,
            rank,
            iterations,
            passes: Vec::new(),
            iteration_miou: Vec::new(),
            replicated,
        }
    }
}

fn require_context(episode: &Episode) -> Result<()> {
    if episode.support.len() < 2 {
        return Err(Error::Contract {
            op: "adapt",
            detail: format!(
                "support set of size {} leaves no context once a pseudo-query is held out; \
                 use replicate_support (copies >= 2) for 1-shot studies",
                episode.support.len()
            ),
        });
    }
    Ok(())
}

fn track_miou(
    trace: &mut AdaptTrace,
    model: &ModelState,
    adapters: Option<&AdapterSet>,
    episode: &Episode,
) -> Result<()> {
    let adapted = AdaptedModel { model: model.clone(), adapters: adapters.cloned() };
    let (mask, _) = predict_query(&adapted, episode)?;
    trace
        .iteration_miou
        .push(miou(&mask, &episode.query.1, &episode.local_classes())?);
    Ok(())
}

/// Run the configured method on one episode. Adapter and optimizer state
/// are created fresh here and never outlive the episode.
pub fn run_method(
    model: &ModelState,
    episode: &Episode,
    cfg: &AdaptConfig,
) -> Result<(AdaptedModel, AdaptTrace)> {
    match cfg.method {
        Method::Vanilla => {
            let adapted = AdaptedModel { model: model.clone(), adapters: None };
            let mut trace = AdaptTrace::new(Method::Vanilla, 0, 0, episode.replicated);
            if cfg.track_iteration_miou {
                track_miou(&mut trace, &adapted.model, None, episode)?;
            }
            Ok((adapted, trace))
        }
        Method::Tap => adapt(model, episode, cfg),
        Method::DecoderFt => decoder_ft(model, episode, cfg),
    }
}

/// Take-a-Peek: T iterations of pseudo-query substitution over the support
/// set, updating only the LoRA adapters. The decoder and every base
/// encoder weight stay bit-identical.
pub fn adapt(model: &ModelState, episode: &Episode, cfg: &AdaptConfig) -> Result<(AdaptedModel, AdaptTrace)> {
    if cfg.method != Method::Tap {
        return Err(Error::Contract {
            op: "adapt",
            detail: format!("adapt called with method {}", cfg.method.as_str()),
        });
    }
    require_context(episode)?;
    cfg.validate(episode.support.len())?;

    let model_clone = model.clone();
    let policy = model_clone.cfg.variant.default_policy();
    let adapter_seed = mix_seed(&[cfg.seed, episode.seed, 0x7461_70]);
    let mut adapters =
        AdapterSet::attach(&model_clone, policy, cfg.rank, cfg.alpha, adapter_seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, episode.seed, 0x73656c]));

    let mut trace =
        AdaptTrace::new(Method::Tap, cfg.rank, cfg.iterations, episode.replicated);
    if cfg.track_iteration_miou {
        track_miou(&mut trace, &model_clone, Some(&adapters), episode)?;
    }

    let nk = episode.support.len();
    let n = episode.n_way();
    for t in 1..=cfg.iterations {
        for i in 0..nk {
            let started = Instant::now();
            let context_idx = cfg.select.select(nk, i, &mut rng)?;
            let context: Vec<&(Tensor, Tensor)> =
                context_idx.iter().map(|&j| &episode.support[j]).collect();

            let mut ps = PassState::new(&model_clone, Some(&adapters), Scope::AdaptersOnly);
            let loss = forward_episode_loss(
                &mut ps,
                &context,
                &episode.support[i].0,
                &episode.support[i].1,
                n,
                &cfg.loss,
                cfg.support_gradients,
            )?;
            let loss_value = ps.tape.value(loss).data()[0];
            let (tape, _, adapter_binds) = ps.finish();
            let grads = tape.backward(loss)?;

            for (target, va, vb) in &adapter_binds {
                let adapter = adapters
                    .get_mut(target)
                    .expect("bound adapter exists in the set");
                grads.write_into(*va, &mut adapter.a)?;
                grads.write_into(*vb, &mut adapter.b)?;
                let ga = adapter.a.take_grad().expect("gradient just written");
                adam.step(&format!("{}.a", target), adapter.a.data_mut(), &ga)?;
                let gb = adapter.b.take_grad().expect("gradient just written");
                adam.step(&format!("{}.b", target), adapter.b.data_mut(), &gb)?;
            }

            trace.passes.push(PassRecord {
                iteration: t,
                support_index: i,
                loss: loss_value,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        if cfg.track_iteration_miou {
            track_miou(&mut trace, &model_clone, Some(&adapters), episode)?;
        }
    }

    Ok((AdaptedModel { model: model_clone, adapters: Some(adapters) }, trace))
}

/// Baseline: the same episodic loop, but the trainable set is the decoder
/// projection and temperature; the encoder stays bit-frozen.
pub fn decoder_ft(
    model: &ModelState,
    episode: &Episode,
    cfg: &AdaptConfig,
) -> Result<(AdaptedModel, AdaptTrace)> {
    if cfg.method != Method::DecoderFt {
        return Err(Error::Contract {
            op: "decoder_ft",
            detail: format!("decoder_ft called with method {}", cfg.method.as_str()),
        });
    }
    require_context(episode)?;
    cfg.validate(episode.support.len())?;

    let mut model_clone = model.clone();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, episode.seed, 0x646674]));

    let mut trace = AdaptTrace::new(Method::DecoderFt, 0, cfg.iterations, episode.replicated);
    if cfg.track_iteration_miou {
        track_miou(&mut trace, &model_clone, None, episode)?;
    }

    let nk = episode.support.len();
    let n = episode.n_way();
    for t in 1..=cfg.iterations {
        for i in 0..nk {
            let started = Instant::now();
            let context_idx = cfg.select.select(nk, i, &mut rng)?;
            let context: Vec<&(Tensor, Tensor)> =
                context_idx.iter().map(|&j| &episode.support[j]).collect();

            let mut ps = PassState::new(&model_clone, None, Scope::DecoderOnly);
            let loss = forward_episode_loss(
                &mut ps,
                &context,
                &episode.support[i].0,
                &episode.support[i].1,
                n,
                &cfg.loss,
                cfg.support_gradients,
            )?;
            let loss_value = ps.tape.value(loss).data()[0];
            let (tape, param_binds, _) = ps.finish();
            let grads = tape.backward(loss)?;

            for (pid, var) in param_binds {
                if let Some(g) = grads.get(var) {
                    let param = model_clone.store.get_mut(pid);
                    let name = param.name.clone();
                    adam.step(&name, param.value.data_mut(), g)?;
                }
            }

            trace.passes.push(PassRecord {
                iteration: t,
                support_index: i,
                loss: loss_value,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        if cfg.track_iteration_miou {
            track_miou(&mut trace, &model_clone, None, episode)?;
        }
    }

    Ok((AdaptedModel { model: model_clone, adapters: None }, trace))
}

/// Predict the query mask with the adapted encoder: prototypes come from
/// the full support set, the decoder is used as-is. Returns
/// `(pred_mask, logits)`.
pub fn predict_query(adapted: &AdaptedModel, episode: &Episode) -> Result<(Tensor, Tensor)> {
    let mut ps = PassState::new(&adapted.model, adapted.adapters.as_ref(), Scope::None);
    let support: Vec<&(Tensor, Tensor)> = episode.support.iter().collect();
    let out_hw = (episode.query.0.shape()[1], episode.query.0.shape()[2]);
    let (logits, mask) =
        forward_predict(&mut ps, &support, &episode.query.0, episode.n_way(), out_hw)?;
    Ok((mask, logits))
}
