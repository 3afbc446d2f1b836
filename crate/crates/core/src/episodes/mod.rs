//! Synthetic fold-structured benchmark: twelve textured shape classes
//! partitioned into four folds of three, N-way K-shot episode sampling,
//! and the on-disk dataset format.
//!
//! Color assignments deliberately pair classes across folds (a shape and
//! its color twin share a palette entry), so class identity cannot be read
//! off color alone.

pub mod dataset;
pub mod render;
pub mod shapes;

pub use dataset::{Dataset, DatasetConfig, EpisodeRecord, GenSummary};
pub use render::{mask_pixel_count, render, sample_layout, Layout, Placement};
pub use shapes::{ShapeKind, ALL_SHAPES};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::mix_seed;

/// Number of synthetic classes (background excluded).
pub const NUM_CLASSES: usize = 12;
/// Number of cross-validation folds.
pub const NUM_FOLDS: usize = 4;
/// Classes held out as novel per fold.
pub const CLASSES_PER_FOLD: usize = 3;

/// One synthetic class: a shape plus texture parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthClass {
    pub class_id: usize,
    pub shape: ShapeKind,
    pub base_color: [f64; 3],
}

/// The fixed class table: ids 1..=12; id 0 is background.
#[derive(Debug, Clone)]
pub struct ClassTable {
    classes: Vec<SynthClass>,
}

impl ClassTable {
    pub fn standard() -> Self {
        // Each fold owns a hue family (90 degrees apart); classes inside a
        // fold sit 25 degrees apart. Within an episode hue is a weak cue
        // (the fold's classes look alike), and a held-out fold's whole hue
        // family is unseen during meta-training, so novel classes are out
        // of distribution for the frozen encoder.
        let classes = ALL_SHAPES
            .iter()
            .enumerate()
            .map(|(i, &shape)| {
                let fold = i / CLASSES_PER_FOLD;
                let slot = i % CLASSES_PER_FOLD;
                let hue = fold as f64 * 90.0 + slot as f64 * 25.0;
                SynthClass { class_id: i + 1, shape, base_color: hsv_to_rgb(hue, 0.55, 0.75) }
            })
            .collect();
        ClassTable { classes }
    }

    pub fn get(&self, class_id: usize) -> Result<&SynthClass> {
        if class_id == 0 || class_id > self.classes.len() {
            return Err(Error::Sampling(format!("unknown class id {}", class_id)));
        }
        Ok(&self.classes[class_id - 1])
    }

    pub fn all(&self) -> &[SynthClass] {
        &self.classes
    }

    /// The four-fold partition: fold `f` holds out ids `3f+1 ..= 3f+3`.
    pub fn fold_split(&self, fold_index: usize) -> Result<FoldSplit> {
        if fold_index >= NUM_FOLDS {
            return Err(Error::Config(format!("fold index {} out of range 0..{}", fold_index, NUM_FOLDS)));
        }
        let novel: Vec<usize> =
            (fold_index * CLASSES_PER_FOLD + 1..=(fold_index + 1) * CLASSES_PER_FOLD).collect();
        let base: Vec<usize> =
            (1..=NUM_CLASSES).filter(|c| !novel.contains(c)).collect();
        Ok(FoldSplit { fold_index, base, novel })
    }
}

/// One cross-validation split: held-out novel classes vs. base classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

/// Whether the query must contain all N target classes or a random subset
/// (possibly none).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolicy {
    AllPresent,
    Subset,
}

/// Rendering / sampling knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    pub noise: f64,
    pub distractors_max: usize,
    pub color_jitter: f64,
    pub max_rotation: f64,
    /// Reject renders where a required class is occluded below this.
    pub min_visible_pixels: usize,
    pub query_policy: QueryPolicy,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 32,
            noise: 0.12,
            distractors_max: 2,
            color_jitter: 0.15,
            max_rotation: 0.35, // ~20 degrees
            min_visible_pixels: 16,
            query_policy: QueryPolicy::AllPresent,
        }
    }
}

impl GenConfig {
    /// Object scale range (half-size in pixels) for a canvas.
    pub fn scale_range(&self, h: usize, w: usize) -> (f64, f64) {
        let side = h.min(w) as f64;
        (side * 0.14, side * 0.235)
    }
}

/// One N-way K-shot task instance. Masks carry local labels:
/// 0 background, `i+1` for `classes[i]`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub id: String,
    /// Global ids of the sampled novel classes, in slot order.
    pub classes: Vec<usize>,
    /// Exactly N*K (image, mask) pairs, slot-major.
    pub support: Vec<(Tensor, Tensor)>,
    pub query: (Tensor, Tensor),
    pub seed: u64,
    /// Set by [`replicate_support`]: the support set was artificially
    /// enlarged by duplication.
    pub replicated: bool,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.len() / self.classes.len()
    }

    /// Local foreground labels `1..=N`.
    pub fn local_classes(&self) -> Vec<usize> {
        (1..=self.classes.len()).collect()
    }
}

/// HSV to RGB, hue in degrees, s and v in [0, 1].
fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Relabel a rendered global-id mask into local episode labels.
fn relabel(mask: &Tensor, classes: &[usize]) -> Tensor {
    let mut local = Tensor::zeros(mask.shape().to_vec());
    for (i, v) in mask.data().iter().enumerate() {
        let g = *v as usize;
        if let Some(slot) = classes.iter().position(|c| *c == g) {
            local.data_mut()[i] = (slot + 1) as f64;
        }
    }
    local
}

/// Render a scene containing `required` classes (drawn last, in order) on
/// top of `distractors`, retrying until every required class stays visible.
fn render_with_required(
    rng: &mut ChaCha8Rng,
    required: &[usize],
    distractors: &[usize],
    classes: &ClassTable,
    cfg: &GenConfig,
) -> Result<(Tensor, Tensor)> {
    let size = cfg.image_size;
    let mut draw: Vec<usize> = distractors.to_vec();
    draw.extend_from_slice(required);
    for _attempt in 0..50 {
        let layout = sample_layout(rng, &draw, size, size, cfg)?;
        let (image, mask) = render(&layout, classes, size, size, cfg)?;
        let visible = required
            .iter()
            .all(|c| mask_pixel_count(&mask, *c) >= cfg.min_visible_pixels);
        if visible {
            return Ok((image, mask));
        }
    }
    Err(Error::Layout(format!(
        "could not place classes {:?} with {} distractors after 50 attempts",
        required,
        distractors.len()
    )))
}

/// Sample an episode drawing target classes from `ways_pool` and scene
/// distractors from `distractor_pool`. Targets are drawn without
/// replacement; every support image is guaranteed to contain its class.
#[allow(clippy::too_many_arguments)]
pub fn sample_episode_from(
    ways_pool: &[usize],
    distractor_pool: &[usize],
    n: usize,
    k: usize,
    seed: u64,
    classes: &ClassTable,
    cfg: &GenConfig,
    id: String,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(Error::Sampling(format!("n = {} and k = {} must be >= 1", n, k)));
    }
    if n > ways_pool.len() {
        return Err(Error::Sampling(format!(
            "cannot sample {} ways from a pool of {} classes",
            n,
            ways_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = ways_pool.to_vec();
    pool.shuffle(&mut rng);
    let targets: Vec<usize> = pool.into_iter().take(n).collect();

    let sample_distractors = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let count = rng.random_range(0..=cfg.distractors_max);
        (0..count)
            .filter_map(|_| {
                if distractor_pool.is_empty() {
                    None
                } else {
                    Some(distractor_pool[rng.random_range(0..distractor_pool.len())])
                }
            })
            .collect()
    };

    let mut support = Vec::with_capacity(n * k);
    for &target in &targets {
        for _ in 0..k {
            let distractors = sample_distractors(&mut rng);
            let (image, mask) =
                render_with_required(&mut rng, &[target], &distractors, classes, cfg)?;
            support.push((image, relabel(&mask, &targets)));
        }
    }

    let present: Vec<usize> = match cfg.query_policy {
        QueryPolicy::AllPresent => targets.clone(),
        QueryPolicy::Subset => {
            targets.iter().copied().filter(|_| rng.random_range(0..2) == 1).collect()
        }
    };
    // Shuffle target draw order in the query so occlusion order varies.
    let mut ordered = present.clone();
    ordered.shuffle(&mut rng);
    let distractors = sample_distractors(&mut rng);
    let (qimage, qmask) =
        render_with_required(&mut rng, &ordered, &distractors, classes, cfg)?;
    let query = (qimage, relabel(&qmask, &targets));

    Ok(Episode { id, classes: targets, support, query, seed, replicated: false })
}

/// Sample an N-way K-shot episode with novel classes from the held-out
/// fold and distractors from the base classes.
pub fn sample_episode(
    split: &FoldSplit,
    n: usize,
    k: usize,
    seed: u64,
    classes: &ClassTable,
    cfg: &GenConfig,
) -> Result<Episode> {
    sample_episode_from(
        &split.novel,
        &split.base,
        n,
        k,
        seed,
        classes,
        cfg,
        format!("fold{}-s{:016x}", split.fold_index, seed),
    )
}

/// Duplicate every support pair `copies` times (the 1-shot workaround:
/// artificially enlarging the support set).
pub fn replicate_support(episode: &Episode, copies: usize) -> Result<Episode> {
    if copies == 0 {
        return Err(Error::Contract {
            op: "replicate_support",
            detail: "copies must be >= 1".to_string(),
        });
    }
    let mut support = Vec::with_capacity(episode.support.len() * copies);
    for pair in &episode.support {
        for _ in 0..copies {
            support.push(pair.clone());
        }
    }
    Ok(Episode {
        id: episode.id.clone(),
        classes: episode.classes.clone(),
        support,
        query: episode.query.clone(),
        seed: episode.seed,
        replicated: episode.replicated || copies > 1,
    })
}

/// Infinite deterministic stream of base-class episodes for meta-training.
/// Every sampled way and distractor comes from the fold's base classes;
/// the stream never touches the held-out novel classes.
pub struct BaseEpisodeStream {
    split: FoldSplit,
    classes: ClassTable,
    cfg: GenConfig,
    n: usize,
    k: usize,
    seed: u64,
    index: u64,
}

impl BaseEpisodeStream {
    pub fn new(
        split: FoldSplit,
        classes: ClassTable,
        cfg: GenConfig,
        n: usize,
        k: usize,
        seed: u64,
    ) -> Self {
        BaseEpisodeStream { split, classes, cfg, n, k, seed, index: 0 }
    }

    /// Fold hygiene check: true when no novel class can appear.
    pub fn audit_pools(&self) -> bool {
        self.split.base.iter().all(|c| !self.split.novel.contains(c))
    }
}

impl Iterator for BaseEpisodeStream {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        let ep_seed = mix_seed(&[self.seed, 0x6d657461, self.index]);
        let id = format!("meta-fold{}-{}", self.split.fold_index, self.index);
        self.index += 1;
        Some(sample_episode_from(
            &self.split.base,
            &self.split.base,
            self.n,
            self.k,
            ep_seed,
            &self.classes,
            &self.cfg,
            id,
        ))
    }
}
