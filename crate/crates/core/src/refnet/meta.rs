//! Episodic meta-training of the reference model on base-class episodes.
//! Encoder and decoder train end-to-end; the frozen 3x3 kernels stay at
//! their initialization.

use crate::engine::adam::Adam;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::loss::FocalConfig;
use crate::refnet::{forward_episode_loss, ModelState, PassState, Scope};

#[derive(Debug, Clone)]
pub struct MetaTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: FocalConfig,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig { steps: 2000, lr: 2e-3, loss: FocalConfig::default() }
    }
}

/// Train `model` in place on a stream of base episodes, one Adam step per
/// episode (batch size 1). Returns the per-step loss curve.
pub fn meta_train(
    model: &mut ModelState,
    episodes: impl Iterator<Item = Result<Episode>>,
    cfg: &MetaTrainConfig,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut stream = episodes;

    for step in 0..cfg.steps {
        let episode = stream
            .next()
            .ok_or_else(|| Error::Data(format!("episode stream exhausted at step {}", step)))??;

        let support: Vec<&(crate::tensor::Tensor, crate::tensor::Tensor)> =
            episode.support.iter().collect();
        let mut ps = PassState::new(model, None, Scope::Meta);
        let loss = forward_episode_loss(
            &mut ps,
            &support,
            &episode.query.0,
            &episode.query.1,
            episode.n_way(),
            &cfg.loss,
            true,
        )
        .map_err(|e| step_error(e, step))?;
        let loss_value = ps.tape.value(loss).data()[0];
        losses.push(loss_value);

        let (tape, params, _) = ps.finish();
        let grads = tape.backward(loss).map_err(|e| step_error(e, step))?;
        for (pid, var) in params {
            if let Some(g) = grads.get(var) {
                let param = model.store.get_mut(pid);
                let name = param.name.clone();
                adam.step(&name, param.value.data_mut(), g)
                    .map_err(|e| step_error(e, step))?;
            }
        }
        model.meta_steps += 1;
    }
    Ok(losses)
}

fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::Numerical { op, detail } => Error::Numerical {
            op,
            detail: format!("{} (meta-train step {})", detail, step),
        },
        other => other,
    }
}
