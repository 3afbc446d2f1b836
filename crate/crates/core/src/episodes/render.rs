//! Seeded layout sampling and deterministic rasterization of synthetic
//! scenes into image/mask tensor pairs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episodes::{ClassTable, GenConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::mix_seed;

/// One object instance: class, pose, and per-instance color jitter.
#[derive(Debug, Clone)]
pub struct Placement {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub rot: f64,
    pub color_jitter: [f64; 3],
}

/// A fully determined scene: draw order resolves overlaps (later occludes).
#[derive(Debug, Clone)]
pub struct Layout {
    pub placements: Vec<Placement>,
    pub noise_seed: u64,
}

/// Draw a seeded layout for the given classes (in draw order).
pub fn sample_layout(
    rng: &mut ChaCha8Rng,
    class_ids: &[usize],
    h: usize,
    w: usize,
    cfg: &GenConfig,
) -> Result<Layout> {
    let (smin, smax) = cfg.scale_range(h, w);
    if smax < smin {
        return Err(Error::Layout(format!(
            "canvas {}x{} too small for minimum object scale {}",
            h, w, smin
        )));
    }
    // Coarse capacity check: each object needs room for its footprint.
    let per_object = (2.0 * smin) * (2.0 * smin) * 0.5;
    if class_ids.len() as f64 * per_object > (h * w) as f64 * 0.9 {
        return Err(Error::Layout(format!(
            "canvas {}x{} too small for {} objects",
            h,
            w,
            class_ids.len()
        )));
    }
    let placements = class_ids
        .iter()
        .map(|&class_id| {
            let scale = rng.random_range(smin..smax);
            let margin = scale * 0.8;
            let cx = rng.random_range(margin..(w as f64 - margin));
            let cy = rng.random_range(margin..(h as f64 - margin));
            let rot = rng.random_range(-cfg.max_rotation..cfg.max_rotation);
            let j = cfg.color_jitter;
            let color_jitter = [
                rng.random_range(-j..j),
                rng.random_range(-j..j),
                rng.random_range(-j..j),
            ];
            Placement { class_id, cx, cy, scale, rot, color_jitter }
        })
        .collect();
    Ok(Layout { placements, noise_seed: rng.random::<u64>() })
}

/// Rasterize a layout into an RGB image `[3, H, W]` and class-index mask
/// `[H, W]`. Background is textured noise labeled 0; overlaps are resolved
/// by draw order.
pub fn render(layout: &Layout, classes: &ClassTable, h: usize, w: usize, cfg: &GenConfig) -> Result<(Tensor, Tensor)> {
    let mut image = Tensor::full(vec![3, h, w], 0.5);
    let mut mask = Tensor::zeros(vec![h, w]);

    for pl in &layout.placements {
        let class = classes.get(pl.class_id)?;
        let color = [
            class.base_color[0] + pl.color_jitter[0],
            class.base_color[1] + pl.color_jitter[1],
            class.base_color[2] + pl.color_jitter[2],
        ];
        let (sin, cos) = pl.rot.sin_cos();
        // Bounding box in pixel space, padded for rotation.
        let reach = pl.scale * 1.5;
        let y0 = ((pl.cy - reach).floor().max(0.0)) as usize;
        let y1 = ((pl.cy + reach).ceil().min(h as f64)) as usize;
        let x0 = ((pl.cx - reach).floor().max(0.0)) as usize;
        let x1 = ((pl.cx + reach).ceil().min(w as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - pl.cx) / pl.scale;
                let dy = (y as f64 + 0.5 - pl.cy) / pl.scale;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if class.shape.contains(u, v) {
                    mask.data_mut()[y * w + x] = pl.class_id as f64;
                    for ch in 0..3 {
                        image.data_mut()[(ch * h + y) * w + x] = color[ch];
                    }
                }
            }
        }
    }

    // Per-pixel texture noise over the whole scene.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[layout.noise_seed, 0x6e6f_6973]));
    let amp = cfg.noise;
    for v in image.data_mut() {
        *v += noise_rng.random_range(-amp..amp);
    }
    Ok((image, mask))
}

/// Number of pixels labeled `class_id` in a mask.
pub fn mask_pixel_count(mask: &Tensor, class_id: usize) -> usize {
    let c = class_id as f64;
    mask.data().iter().filter(|v| **v == c).count()
}
