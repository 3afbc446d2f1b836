//! Tape-level forward passes: encoding, prototype construction, decoding,
//! and the episode loss used by both meta-training and adaptation.
//!
//! Internally features live as `[P, D]` matrices (one row per pixel or
//! token); the published ops convert to the `[D, h, w]` layout at the
//! boundary.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lora::{adapted_matmul, AdapterSet};
use crate::loss::{focal_loss_on_tape, FocalConfig};
use crate::refnet::{
    DecoderParams, Encoder, LinearLayer, ModelState, ParamId, PlanarConvLayer, Prototype,
};
use crate::tensor::{Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-12;

/// Which parameters receive gradients in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Inference only.
    None,
    /// Meta-training: every meta-trainable parameter.
    Meta,
    /// Test-time adaptation: adapter A/B matrices only.
    AdaptersOnly,
    /// Decoder fine-tuning baseline: decoder projection and temperature.
    DecoderOnly,
}

/// One forward-backward pass under construction: a tape plus leaf bindings
/// for model parameters and adapters.
pub struct PassState<'m> {
    pub tape: Tape,
    model: &'m ModelState,
    adapters: Option<&'m AdapterSet>,
    scope: Scope,
    param_bound: HashMap<ParamId, Var>,
    adapter_bound: HashMap<(String, bool), AdapterVars>,
}

/// Leaf bindings for one adapter: the Eq.-style factors plus their
/// transposes for the channel-planar path.
#[derive(Debug, Clone, Copy)]
struct AdapterVars {
    a: Var,
    b: Var,
    a_t: Var,
    b_t: Var,
    alpha: f64,
}

impl<'m> PassState<'m> {
    pub fn new(model: &'m ModelState, adapters: Option<&'m AdapterSet>, scope: Scope) -> Self {
        PassState {
            tape: Tape::new(),
            model,
            adapters,
            scope,
            param_bound: HashMap::new(),
            adapter_bound: HashMap::new(),
        }
    }

    pub fn model(&self) -> &ModelState {
        self.model
    }

    fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_bound.get(&id) {
            return Ok(*v);
        }
        let p = self.model.store.get(id);
        let requires = match self.scope {
            Scope::None | Scope::AdaptersOnly => false,
            Scope::Meta => p.meta_trainable,
            Scope::DecoderOnly => p.name.starts_with("decoder."),
        };
        let v = self.tape.leaf(&p.value, requires)?;
        self.param_bound.insert(id, v);
        Ok(v)
    }

    /// Bind the adapter for a target layer, if attached. `grads` selects
    /// the trainable binding (pseudo-query branch) or a detached one
    /// (support branch when support gradients are disabled).
    fn adapter_vars(&mut self, target_id: &str, grads: bool) -> Result<Option<AdapterVars>> {
        let Some(set) = self.adapters else { return Ok(None) };
        let Some(adapter) = set.get(target_id) else { return Ok(None) };
        let key = (target_id.to_string(), grads);
        if let Some(vars) = self.adapter_bound.get(&key) {
            return Ok(Some(*vars));
        }
        let requires = grads && self.scope == Scope::AdaptersOnly;
        let a = self.tape.leaf(&adapter.a, requires)?;
        let b = self.tape.leaf(&adapter.b, requires)?;
        let a_t = self.tape.transpose(a)?;
        let b_t = self.tape.transpose(b)?;
        let vars = AdapterVars { a, b, a_t, b_t, alpha: adapter.alpha };
        self.adapter_bound.insert(key, vars);
        Ok(Some(vars))
    }

    /// Linear layer in `x * W + bias` convention, routed through the
    /// factored adapter path when one is attached to the layer.
    fn linear(&mut self, x: Var, layer: &LinearLayer, adapter_grads: bool) -> Result<Var> {
        let w = self.param(layer.w)?;
        let bias = self.param(layer.b)?;
        let out = match self.adapter_vars(&layer.target_id, adapter_grads)? {
            Some(av) => adapted_matmul(&mut self.tape, x, w, av.a, av.b, av.alpha)?,
            None => self.tape.matmul(x, w)?,
        };
        self.tape.add_bias(out, bias)
    }

    /// Channel-planar 1x1 projection on a `[C_in, h, w]` var, with the
    /// factored adapter delta `alpha * B^T (A^T x)` added when attached.
    fn planar_conv(&mut self, x: Var, layer: &PlanarConvLayer, adapter_grads: bool) -> Result<Var> {
        let w = self.param(layer.w)?;
        let bias = self.param(layer.b)?;
        let base = self.tape.pointwise_conv(x, w, bias)?;
        match self.adapter_vars(&layer.target_id, adapter_grads)? {
            Some(av) => {
                let (h, w_) = {
                    let s = self.tape.shape(x);
                    (s[1], s[2])
                };
                let flat = self.tape.reshape(x, vec![layer.m, h * w_])?;
                let ax = self.tape.matmul(av.a_t, flat)?;
                let bax = self.tape.matmul(av.b_t, ax)?;
                let delta = self.tape.mul_scalar(bax, av.alpha)?;
                let delta = self.tape.reshape(delta, vec![layer.n, h, w_])?;
                self.tape.add(base, delta)
            }
            None => Ok(base),
        }
    }

    /// Consume the pass, returning the tape and the bindings needed to
    /// pull gradients: `(tape, param bindings, adapter bindings)`.
    #[allow(clippy::type_complexity)]
    pub fn finish(self) -> (Tape, Vec<(ParamId, Var)>, Vec<(String, Var, Var)>) {
        let params = self.param_bound.into_iter().collect();
        let adapters = self
            .adapter_bound
            .into_iter()
            .filter_map(|((id, grads), vars)| grads.then_some((id, vars.a, vars.b)))
            .collect();
        (self.tape, params, adapters)
    }
}

/// Features of one image on the tape: `[P, D]` with `P = h * w`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// Encode an image `[3, H, W]` into a feature map. `adapter_grads`
/// controls whether attached adapters receive gradients from this branch.
pub fn encode_on_tape(
    ps: &mut PassState,
    image: &Tensor,
    adapter_grads: bool,
) -> Result<FeatureMap> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape {
            op: "encode",
            detail: format!("expected [3, H, W] image, got {:?}", image.shape()),
        });
    }
    let (ih, iw) = (image.shape()[1], image.shape()[2]);
    let factor = ps.model.cfg.feature_factor();
    if ih % factor != 0 || iw % factor != 0 {
        return Err(Error::Shape {
            op: "encode",
            detail: format!(
                "image {}x{} not divisible by encoder factor {}",
                ih, iw, factor
            ),
        });
    }

    let encoder = ps.model.encoder.clone();
    match &encoder {
        Encoder::Conv(enc) => {
            let stride = ps.model.cfg.stride;
            let d = ps.model.cfg.feature_dim;
            let (h, w) = (ih / stride, iw / stride);
            let pixels = h * w;
            let x = ps.tape.leaf(image, false)?;
            let stem_w = ps.model.store.get(enc.stem_w).value.clone();
            let stem_b = ps.model.store.get(enc.stem_b).value.clone();
            let mut img = ps.tape.conv3x3(x, &stem_w, &stem_b, stride)?;
            for block in &enc.blocks {
                let dw = ps.model.store.get(block.dw).value.clone();
                let mixed = ps.tape.depthwise3x3(img, &dw)?;
                let z = ps.planar_conv(mixed, &block.pw, adapter_grads)?;
                img = ps.tape.relu(z)?;
            }
            let planar = ps.planar_conv(img, &enc.head, adapter_grads)?;
            let flat = ps.tape.reshape(planar, vec![d, pixels])?;
            let feat = ps.tape.transpose(flat)?;
            Ok(FeatureMap { var: feat, h, w })
        }
        Encoder::Attention(enc) => {
            let p = ps.model.cfg.patch_size;
            let d = ps.model.cfg.feature_dim;
            let (h, w) = (ih / p, iw / p);
            let pos_param = ps.model.store.get(enc.pos).value.clone();
            if pos_param.shape()[0] != h * w {
                return Err(Error::Shape {
                    op: "encode",
                    detail: format!(
                        "attention variant expects {} tokens (configured image size {}), got {}",
                        pos_param.shape()[0],
                        ps.model.cfg.image_size,
                        h * w
                    ),
                });
            }
            let x = ps.tape.leaf(image, false)?;
            let patches = ps.tape.patchify(x, p)?;
            let embedded = ps.linear(patches, &enc.patch, false)?;
            let pos = ps.param(enc.pos)?;
            let mut tok = ps.tape.add(embedded, pos)?;
            let scale = 1.0 / (d as f64).sqrt();
            for block in &enc.blocks {
                let q = ps.linear(tok, &block.q, adapter_grads)?;
                let k = ps.linear(tok, &block.k, adapter_grads)?;
                let v = ps.linear(tok, &block.v, adapter_grads)?;
                let qt = ps.tape.transpose(q)?;
                let scores = ps.tape.matmul(k, qt)?;
                let scaled = ps.tape.mul_scalar(scores, scale)?;
                let attn = ps.tape.softmax_channels(scaled)?;
                let vt = ps.tape.transpose(v)?;
                let ctx = ps.tape.matmul(vt, attn)?;
                let ctx_rows = ps.tape.transpose(ctx)?;
                let o = ps.linear(ctx_rows, &block.o, adapter_grads)?;
                tok = ps.tape.add(tok, o)?;
                let f1 = ps.linear(tok, &block.ff1, false)?;
                let f1 = ps.tape.relu(f1)?;
                let f2 = ps.linear(f1, &block.ff2, false)?;
                tok = ps.tape.add(tok, f2)?;
            }
            Ok(FeatureMap { var: tok, h, w })
        }
    }
}

/// Nearest-neighbor downsampling of a full-resolution mask to `h x w`,
/// sampling block centers so class indices are preserved exactly.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if mask.rank() != 2 {
        return Err(Error::Shape {
            op: "downsample_mask",
            detail: format!("expected [H, W] mask, got {:?}", mask.shape()),
        });
    }
    let (mh, mw) = (mask.shape()[0], mask.shape()[1]);
    if mh == h && mw == w {
        return Ok(mask.clone());
    }
    if mh % h != 0 || mw % w != 0 {
        return Err(Error::Shape {
            op: "downsample_mask",
            detail: format!("mask {}x{} not an integer multiple of {}x{}", mh, mw, h, w),
        });
    }
    let (fy, fx) = (mh / h, mw / w);
    let mut out = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        for x in 0..w {
            out.data_mut()[y * w + x] = mask.data()[(y * fy + fy / 2) * mw + (x * fx + fx / 2)];
        }
    }
    Ok(out)
}

/// Build per-class prototypes (background + N foreground classes) from
/// support features on the tape: `[N+1, D]`, one masked average per row.
pub fn prototypes_on_tape(
    ps: &mut PassState,
    feats: &[FeatureMap],
    masks: &[&Tensor],
    n_classes: usize,
) -> Result<Var> {
    if feats.is_empty() || feats.len() != masks.len() {
        return Err(Error::Contract {
            op: "build_prototypes",
            detail: format!("{} feature maps vs {} masks", feats.len(), masks.len()),
        });
    }
    let down: Vec<Tensor> = feats
        .iter()
        .zip(masks)
        .map(|(f, m)| downsample_mask(m, f.h, f.w))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(n_classes + 1);
    for class in 0..=n_classes {
        let mut acc: Option<Var> = None;
        let mut count = 0usize;
        for (f, dm) in feats.iter().zip(&down) {
            let pixels = f.h * f.w;
            let mut row = Tensor::zeros(vec![1, pixels]);
            let mut local = 0usize;
            for (i, v) in dm.data().iter().enumerate() {
                if *v == class as f64 {
                    row.data_mut()[i] = 1.0;
                    local += 1;
                }
            }
            if local == 0 {
                continue;
            }
            count += local;
            let row_v = ps.tape.leaf(&row, false)?;
            let summed = ps.tape.matmul(row_v, f.var)?;
            acc = Some(match acc {
                Some(prev) => ps.tape.add(prev, summed)?,
                None => summed,
            });
        }
        let Some(acc) = acc else {
            return Err(Error::MissingClass {
                class,
                detail: format!(
                    "class {} has no labeled pixels in any support mask at feature resolution",
                    class
                ),
            });
        };
        debug_assert!(count > 0);
        rows.push(ps.tape.mul_scalar(acc, 1.0 / count as f64)?);
    }
    ps.tape.concat_rows(&rows)
}

/// Decode query features against prototypes: temperature-scaled cosine
/// similarity through the decoder projection, upsampled to `out_hw` by
/// nearest neighbor. Result: `[(N+1), H, W]` logits.
pub fn decode_on_tape(
    ps: &mut PassState,
    query: &FeatureMap,
    protos: Var,
    out_hw: (usize, usize),
) -> Result<Var> {
    let n_rows = ps.tape.shape(protos)[0];
    if n_rows == 0 {
        return Err(Error::Contract {
            op: "decode",
            detail: "empty prototype list".to_string(),
        });
    }
    let (oh, ow) = out_hw;
    if oh % query.h != 0 || ow % query.w != 0 || oh / query.h != ow / query.w {
        return Err(Error::Shape {
            op: "decode",
            detail: format!(
                "cannot upsample {}x{} features to {}x{}",
                query.h, query.w, oh, ow
            ),
        });
    }
    let factor = oh / query.h;

    let proj = ps.param(ps.model.decoder.proj)?;
    let tau = ps.param(ps.model.decoder.tau)?;

    let fq = ps.tape.matmul(query.var, proj)?;
    let pp = ps.tape.matmul(protos, proj)?;

    let fq2 = ps.tape.mul(fq, fq)?;
    let qn = ps.tape.sum_axis1(fq2)?;
    let qn = ps.tape.add_scalar(qn, NORM_EPS)?;
    let qn = ps.tape.pow(qn, 0.5)?;
    let qr = ps.tape.pow(qn, -1.0)?;

    let pp2 = ps.tape.mul(pp, pp)?;
    let pn = ps.tape.sum_axis1(pp2)?;
    let pn = ps.tape.add_scalar(pn, NORM_EPS)?;
    let pn = ps.tape.pow(pn, 0.5)?;
    let pr = ps.tape.pow(pn, -1.0)?;
    let pr_row = ps.tape.transpose(pr)?;

    let ppt = ps.tape.transpose(pp)?;
    let dots = ps.tape.matmul(fq, ppt)?;
    let cos = ps.tape.scale_rows(dots, qr)?;
    let cos = ps.tape.scale_cols(cos, pr_row)?;
    let logits = ps.tape.mul(cos, tau)?;

    let cols = ps.tape.transpose(logits)?;
    let cube = ps.tape.reshape(cols, vec![n_rows, query.h, query.w])?;
    if factor == 1 {
        Ok(cube)
    } else {
        ps.tape.upsample_nearest(cube, factor)
    }
}

/// Full episode loss: prototypes from `support`, focal loss of the decoded
/// query logits against `query_mask`.
#[allow(clippy::too_many_arguments)]
pub fn forward_episode_loss(
    ps: &mut PassState,
    support: &[&(Tensor, Tensor)],
    query_image: &Tensor,
    query_mask: &Tensor,
    n_classes: usize,
    loss_cfg: &FocalConfig,
    support_grads: bool,
) -> Result<Var> {
    let mut feats = Vec::with_capacity(support.len());
    let mut masks = Vec::with_capacity(support.len());
    for (img, mask) in support {
        feats.push(encode_on_tape(ps, img, support_grads)?);
        masks.push(mask);
    }
    let protos = prototypes_on_tape(ps, &feats, &masks, n_classes)?;
    let qf = encode_on_tape(ps, query_image, true)?;
    let logits = decode_on_tape(
        ps,
        &qf,
        protos,
        (query_mask.shape()[0], query_mask.shape()[1]),
    )?;
    focal_loss_on_tape(&mut ps.tape, logits, query_mask, loss_cfg)
}

/// Predict a query mask from the full support set. Returns (logits, mask).
pub fn forward_predict(
    ps: &mut PassState,
    support: &[&(Tensor, Tensor)],
    query_image: &Tensor,
    n_classes: usize,
    out_hw: (usize, usize),
) -> Result<(Tensor, Tensor)> {
    let mut feats = Vec::with_capacity(support.len());
    let mut masks = Vec::with_capacity(support.len());
    for (img, mask) in support {
        feats.push(encode_on_tape(ps, img, false)?);
        masks.push(mask);
    }
    let protos = prototypes_on_tape(ps, &feats, &masks, n_classes)?;
    let qf = encode_on_tape(ps, query_image, false)?;
    let logits_var = decode_on_tape(ps, &qf, protos, out_hw)?;
    let logits = ps.tape.value(logits_var).clone();
    let mask = argmax_mask(&logits)?;
    Ok((logits, mask))
}

/// Channel argmax of `[C, H, W]` logits; ties resolve to the lowest class.
pub fn argmax_mask(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 3 {
        return Err(Error::Shape {
            op: "argmax_mask",
            detail: format!("expected [C, H, W] logits, got {:?}", logits.shape()),
        });
    }
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let pixels = h * w;
    let mut mask = Tensor::zeros(vec![h, w]);
    for p in 0..pixels {
        let mut best = 0usize;
        let mut best_v = logits.data()[p];
        for ch in 1..c {
            let v = logits.data()[ch * pixels + p];
            if v > best_v {
                best_v = v;
                best = ch;
            }
        }
        mask.data_mut()[p] = best as f64;
    }
    Ok(mask)
}

// ---------------------------------------------------------------------
// Published standalone operations ([P, D] internals converted at the
// boundary to the [D, h, w] layout).
// ---------------------------------------------------------------------

/// Encode an image with the (unadapted) model: `[D, H/s, W/s]` features.
pub fn encode(model: &ModelState, image: &Tensor) -> Result<Tensor> {
    let mut ps = PassState::new(model, None, Scope::None);
    let fm = encode_on_tape(&mut ps, image, false)?;
    let cols = ps.tape.transpose(fm.var)?;
    let cube = ps
        .tape
        .reshape(cols, vec![model.cfg.feature_dim, fm.h, fm.w])?;
    Ok(ps.tape.value(cube).clone())
}

/// Masked average pooling of `[D, h, w]` support features into per-class
/// prototypes (background class 0 included).
pub fn build_prototypes(
    support_feats: &[Tensor],
    support_masks: &[Tensor],
    n_classes: usize,
) -> Result<Vec<Prototype>> {
    if support_feats.is_empty() || support_feats.len() != support_masks.len() {
        return Err(Error::Contract {
            op: "build_prototypes",
            detail: format!(
                "{} feature tensors vs {} masks",
                support_feats.len(),
                support_masks.len()
            ),
        });
    }
    let d = support_feats[0].shape()[0];
    let mut tape = Tape::new();
    let mut feats = Vec::new();
    for f in support_feats {
        if f.rank() != 3 || f.shape()[0] != d {
            return Err(Error::Shape {
                op: "build_prototypes",
                detail: format!("expected [D, h, w] features, got {:?}", f.shape()),
            });
        }
        let (h, w) = (f.shape()[1], f.shape()[2]);
        let v = tape.leaf(f, false)?;
        let flat = tape.reshape(v, vec![d, h * w])?;
        let rows = tape.transpose(flat)?;
        feats.push(FeatureMap { var: rows, h, w });
    }
    // Reuse the tape implementation through a parameter-free shim.
    let mut protos: Vec<Prototype> = Vec::with_capacity(n_classes + 1);
    for class in 0..=n_classes {
        let mut acc: Option<Var> = None;
        let mut count = 0usize;
        for (f, mask) in feats.iter().zip(support_masks) {
            let dm = downsample_mask(mask, f.h, f.w)?;
            let pixels = f.h * f.w;
            let mut row = Tensor::zeros(vec![1, pixels]);
            let mut local = 0usize;
            for (i, v) in dm.data().iter().enumerate() {
                if *v == class as f64 {
                    row.data_mut()[i] = 1.0;
                    local += 1;
                }
            }
            if local == 0 {
                continue;
            }
            count += local;
            let row_v = tape.leaf(&row, false)?;
            let summed = tape.matmul(row_v, f.var)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, summed)?,
                None => summed,
            });
        }
        let Some(acc) = acc else {
            return Err(Error::MissingClass {
                class,
                detail: format!("class {} has no labeled support pixels", class),
            });
        };
        let avg = tape.mul_scalar(acc, 1.0 / count as f64)?;
        let value = tape.value(avg).clone();
        protos.push(Prototype {
            class_id: class,
            vector: Tensor::new(vec![d], value.into_data())?,
        });
    }
    Ok(protos)
}

/// Decode `[D, h, w]` query features against prototypes with the given
/// decoder parameters. Result: `[(N+1), h, w]` logits at feature
/// resolution (upsample separately before loss/metrics).
pub fn decode(
    query_feats: &Tensor,
    prototypes: &[Prototype],
    dec: &DecoderParams,
) -> Result<Tensor> {
    if prototypes.is_empty() {
        return Err(Error::Contract {
            op: "decode",
            detail: "empty prototype list".to_string(),
        });
    }
    for (i, p) in prototypes.iter().enumerate() {
        if p.class_id != i {
            return Err(Error::Contract {
                op: "decode",
                detail: format!(
                    "prototypes must cover classes 0..=N in order; slot {} holds class {}",
                    i, p.class_id
                ),
            });
        }
    }
    if query_feats.rank() != 3 {
        return Err(Error::Shape {
            op: "decode",
            detail: format!("expected [D, h, w] features, got {:?}", query_feats.shape()),
        });
    }
    let (d, h, w) = (
        query_feats.shape()[0],
        query_feats.shape()[1],
        query_feats.shape()[2],
    );
    let c = prototypes.len();

    let mut tape = Tape::new();
    let qv = tape.leaf(query_feats, false)?;
    let flat = tape.reshape(qv, vec![d, h * w])?;
    let rows = tape.transpose(flat)?;

    let mut pdata = Vec::with_capacity(c * d);
    for p in prototypes {
        if p.vector.numel() != d {
            return Err(Error::Shape {
                op: "decode",
                detail: format!(
                    "prototype {} has dim {}, features have {}",
                    p.class_id,
                    p.vector.numel(),
                    d
                ),
            });
        }
        pdata.extend_from_slice(p.vector.data());
    }
    let pmat = tape.leaf(&Tensor::new(vec![c, d], pdata)?, false)?;

    let proj = tape.leaf(&dec.proj, false)?;
    let fq = tape.matmul(rows, proj)?;
    let pp = tape.matmul(pmat, proj)?;

    let fq2 = tape.mul(fq, fq)?;
    let qn = tape.sum_axis1(fq2)?;
    let qn = tape.add_scalar(qn, NORM_EPS)?;
    let qn = tape.pow(qn, 0.5)?;
    let qr = tape.pow(qn, -1.0)?;

    let pp2 = tape.mul(pp, pp)?;
    let pn = tape.sum_axis1(pp2)?;
    let pn = tape.add_scalar(pn, NORM_EPS)?;
    let pn = tape.pow(pn, 0.5)?;
    let pr = tape.pow(pn, -1.0)?;
    let pr_row = tape.transpose(pr)?;

    let ppt = tape.transpose(pp)?;
    let dots = tape.matmul(fq, ppt)?;
    let cos = tape.scale_rows(dots, qr)?;
    let cos = tape.scale_cols(cos, pr_row)?;
    let tau_v = tape.leaf(&Tensor::scalar(dec.tau), false)?;
    let logits = tape.mul(cos, tau_v)?;
    let cols = tape.transpose(logits)?;
    let cube = tape.reshape(cols, vec![c, h, w])?;
    Ok(tape.value(cube).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refnet::{ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_model() -> ModelState {
        ModelState::init(ModelConfig::default()).unwrap()
    }

    fn attn_model() -> ModelState {
        ModelState::init(ModelConfig { variant: Variant::Attention, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn conv_encode_shape_follows_stride_arithmetic() {
        let model = conv_model();
        let img = Tensor::zeros(vec![3, 32, 32]);
        let feat = encode(&model, &img).unwrap();
        assert_eq!(feat.shape(), &[32, 16, 16]);
    }

    #[test]
    fn attention_encode_shape_follows_patch_arithmetic() {
        let model = attn_model();
        let img = Tensor::zeros(vec![3, 32, 32]);
        let feat = encode(&model, &img).unwrap();
        assert_eq!(feat.shape(), &[32, 8, 8]);
    }

    #[test]
    fn zero_image_encodes_to_finite_features() {
        for model in [conv_model(), attn_model()] {
            let img = Tensor::zeros(vec![3, 32, 32]);
            let feat = encode(&model, &img).unwrap();
            assert!(feat.all_finite());
            // Bias-driven: not all channels identically zero.
            assert!(feat.data().iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let model = conv_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::rand_uniform(&mut rng, vec![3, 32, 32], 0.0, 1.0);
        let a = encode(&model, &img).unwrap();
        let b = encode(&model, &img).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn indivisible_image_is_a_shape_error() {
        let model = conv_model();
        let img = Tensor::zeros(vec![3, 31, 32]);
        assert!(matches!(encode(&model, &img).unwrap_err(), Error::Shape { .. }));
    }

    #[test]
    fn full_mask_prototype_is_the_spatial_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feat = Tensor::rand_uniform(&mut rng, vec![4, 3, 3], -1.0, 1.0);
        let mask = Tensor::full(vec![3, 3], 1.0); // every pixel class 1
        // Class 0 absent everywhere -> missing-class error; give one bg pixel.
        let mut mask_bg = mask.clone();
        mask_bg.data_mut()[0] = 0.0;
        let protos = build_prototypes(&[feat.clone()], &[mask_bg.clone()], 1).unwrap();
        assert_eq!(protos.len(), 2);
        // Oracle: per-pixel accumulation loop for class 1.
        for d in 0..4 {
            let mut acc = 0.0;
            let mut count = 0;
            for p in 0..9 {
                if mask_bg.data()[p] == 1.0 {
                    acc += feat.data()[d * 9 + p];
                    count += 1;
                }
            }
            let expect = acc / count as f64;
            assert!((protos[1].vector.data()[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_supports_leave_prototypes_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feat = Tensor::rand_uniform(&mut rng, vec![4, 3, 3], -1.0, 1.0);
        let labels: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
        let mask = Tensor::new(vec![3, 3], labels).unwrap();
        let once = build_prototypes(&[feat.clone()], &[mask.clone()], 1).unwrap();
        let twice =
            build_prototypes(&[feat.clone(), feat.clone()], &[mask.clone(), mask], 1).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!(a.vector.max_abs_diff(&b.vector) < 1e-12);
        }
    }

    #[test]
    fn random_two_class_prototypes_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feat = Tensor::rand_uniform(&mut rng, vec![5, 4, 4], -2.0, 2.0);
        let labels: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 3) as f64).collect();
        let mask = Tensor::new(vec![4, 4], labels.clone()).unwrap();
        let protos = build_prototypes(&[feat.clone()], &[mask], 2).unwrap();
        for class in 0..=2usize {
            for d in 0..5 {
                let mut acc = 0.0;
                let mut count = 0usize;
                for p in 0..16 {
                    if labels[p] == class as f64 {
                        acc += feat.data()[d * 16 + p];
                        count += 1;
                    }
                }
                let expect = acc / count as f64;
                assert!(
                    (protos[class].vector.data()[d] - expect).abs() < 1e-12,
                    "class {} dim {}",
                    class,
                    d
                );
            }
        }
    }

    #[test]
    fn missing_class_error_names_the_class() {
        let feat = Tensor::zeros(vec![4, 2, 2]);
        let mask = Tensor::zeros(vec![2, 2]); // only background
        let err = build_prototypes(&[feat], &[mask], 2).unwrap_err();
        match err {
            Error::MissingClass { class, .. } => assert_eq!(class, 1),
            other => panic!("expected missing-class error, got {}", other),
        }
    }

    #[test]
    fn decode_self_match_argmaxes_to_the_class() {
        // Distinct prototype directions; query pixels equal to prototype 2.
        let protos = vec![
            Prototype { class_id: 0, vector: Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap() },
            Prototype { class_id: 1, vector: Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap() },
            Prototype { class_id: 2, vector: Tensor::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap() },
        ];
        let mut q = Tensor::zeros(vec![3, 2, 2]);
        for p in 0..4 {
            q.data_mut()[2 * 4 + p] = 1.0; // channel 2 = 1 at every pixel
        }
        let dec = DecoderParams { proj: Tensor::eye(3), tau: 10.0 };
        let logits = decode(&q, &protos, &dec).unwrap();
        let mask = argmax_mask(&logits).unwrap();
        assert!(mask.data().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn zero_temperature_gives_uniform_logits_and_lowest_class_ties() {
        let protos = vec![
            Prototype { class_id: 0, vector: Tensor::new(vec![2], vec![1.0, 0.0]).unwrap() },
            Prototype { class_id: 1, vector: Tensor::new(vec![2], vec![0.0, 1.0]).unwrap() },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::rand_uniform(&mut rng, vec![2, 2, 2], -1.0, 1.0);
        let dec = DecoderParams { proj: Tensor::eye(2), tau: 0.0 };
        let logits = decode(&q, &protos, &dec).unwrap();
        assert!(logits.data().iter().all(|v| *v == 0.0));
        let mask = argmax_mask(&logits).unwrap();
        assert!(mask.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_way_toy_logits_match_hand_cosine_table() {
        // Feature dim 2, one pixel; identity projection, tau = 1.
        let q = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap(); // (3,4), norm 5
        let protos = vec![
            Prototype { class_id: 0, vector: Tensor::new(vec![2], vec![1.0, 0.0]).unwrap() },
            Prototype { class_id: 1, vector: Tensor::new(vec![2], vec![0.0, 2.0]).unwrap() },
            Prototype { class_id: 2, vector: Tensor::new(vec![2], vec![-3.0, 4.0]).unwrap() },
        ];
        let dec = DecoderParams { proj: Tensor::eye(2), tau: 1.0 };
        let logits = decode(&q, &protos, &dec).unwrap();
        // Hand table: cos with (1,0) = 3/5; with (0,2) = 4/5; with (-3,4) = 7/25.
        let expect = [0.6, 0.8, 7.0 / 25.0];
        for (got, want) in logits.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
        }
    }

    #[test]
    fn cosine_similarities_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Tensor::rand_uniform(&mut rng, vec![4, 3, 3], -3.0, 3.0);
        let protos: Vec<Prototype> = (0..3)
            .map(|c| Prototype {
                class_id: c,
                vector: Tensor::rand_uniform(&mut rng, vec![4], -2.0, 2.0),
            })
            .collect();
        let dec = DecoderParams { proj: Tensor::eye(4), tau: 1.0 };
        let logits = decode(&q, &protos, &dec).unwrap();
        assert!(logits.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn permuting_classes_permutes_logit_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::rand_uniform(&mut rng, vec![4, 2, 2], -1.0, 1.0);
        let bg = Tensor::rand_uniform(&mut rng, vec![4], -1.0, 1.0);
        let a = Tensor::rand_uniform(&mut rng, vec![4], -1.0, 1.0);
        let b = Tensor::rand_uniform(&mut rng, vec![4], -1.0, 1.0);
        let dec = DecoderParams { proj: Tensor::eye(4), tau: 5.0 };
        let order1 = vec![
            Prototype { class_id: 0, vector: bg.clone() },
            Prototype { class_id: 1, vector: a.clone() },
            Prototype { class_id: 2, vector: b.clone() },
        ];
        let order2 = vec![
            Prototype { class_id: 0, vector: bg },
            Prototype { class_id: 1, vector: b },
            Prototype { class_id: 2, vector: a },
        ];
        let l1 = decode(&q, &order1, &dec).unwrap();
        let l2 = decode(&q, &order2, &dec).unwrap();
        // Channel 1 of order1 equals channel 2 of order2 and vice versa.
        for p in 0..4 {
            assert_eq!(l1.data()[4 + p].to_bits(), l2.data()[8 + p].to_bits());
            assert_eq!(l1.data()[8 + p].to_bits(), l2.data()[4 + p].to_bits());
        }
    }

    #[test]
    fn downsample_mask_preserves_class_indices() {
        let mut mask = Tensor::zeros(vec![8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                mask.data_mut()[y * 8 + x] = if y >= 4 { 2.0 } else { 0.0 };
            }
        }
        let down = downsample_mask(&mask, 4, 4).unwrap();
        assert_eq!(down.shape(), &[4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                let expect = if y >= 2 { 2.0 } else { 0.0 };
                assert_eq!(down.data()[y * 4 + x], expect);
            }
        }
        assert!(matches!(downsample_mask(&mask, 3, 4), Err(Error::Shape { .. })));
    }

    #[test]
    fn decode_rejects_empty_or_misordered_prototypes() {
        let q = Tensor::zeros(vec![2, 2, 2]);
        let dec = DecoderParams { proj: Tensor::eye(2), tau: 1.0 };
        assert!(matches!(decode(&q, &[], &dec).unwrap_err(), Error::Contract { .. }));
        let bad = vec![Prototype { class_id: 1, vector: Tensor::zeros(vec![2]) }];
        assert!(matches!(decode(&q, &bad, &dec).unwrap_err(), Error::Contract { .. }));
    }
}
