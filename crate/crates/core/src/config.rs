//! Run configuration: a flat UTF-8 `key = value` format with dotted keys.
//!
//! Unknown keys are rejected; every numeric field is bounds-checked. The
//! resolved configuration round-trips through [`RunConfig::to_flat_string`]
//! so reports can embed the exact configuration that produced them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::engine::{Method, SelectStrategy};
use crate::episodes::QueryPolicy;
use crate::error::{Error, Result};
use crate::loss::WeightMode;
use crate::refnet::Variant;

#[derive(Debug, Clone)]
pub struct DatasetSection {
    pub dir: PathBuf,
    pub seed: u64,
    pub image_size: usize,
    pub cells: Vec<(usize, usize)>,
    pub episodes_per_fold: usize,
    pub runs: usize,
    pub noise: f64,
    pub distractors_max: usize,
    pub query_policy: QueryPolicy,
}

#[derive(Debug, Clone)]
pub struct ModelSection {
    pub variant: Variant,
    pub channels: usize,
    pub feature_dim: usize,
    pub blocks: usize,
    pub stride: usize,
    pub patch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MetaSection {
    pub steps: usize,
    pub lr: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    pub folds: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub iterations: usize,
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub episodes: usize,
    pub runs: usize,
    pub support_gradients: bool,
    pub select: SelectStrategy,
    pub gamma: f64,
    pub weight_mode: WeightMode,
}

#[derive(Debug, Clone)]
pub struct SweepSection {
    pub ranks: Vec<usize>,
    pub iterations: usize,
    pub episodes: usize,
    pub fold: usize,
}

#[derive(Debug, Clone)]
pub struct OneshotSection {
    pub iterations: usize,
    pub episodes: usize,
    pub fold: usize,
    pub n_way: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub meta: MetaSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub oneshot: OneshotSection,
    pub out_dir: PathBuf,
}

/// `(key, default, description)` for every recognized key.
pub const KEY_REFERENCE: &[(&str, &str, &str)] = &[
    ("dataset.dir", "data", "dataset directory (output of gen-data, input elsewhere)"),
    ("dataset.seed", "7", "master seed for dataset generation"),
    ("dataset.image_size", "32", "square image side in pixels"),
    ("dataset.cells", "2x5,1x1,1x2", "comma-separated NxK episode cells to materialize"),
    ("dataset.episodes_per_fold", "50", "episodes per fold per run (per cell)"),
    ("dataset.runs", "3", "independent episode sets per fold"),
    ("dataset.noise", "0.12", "background/object texture noise amplitude"),
    ("dataset.distractors_max", "2", "max distractor objects per scene"),
    ("dataset.query_policy", "all_present", "query contents: all_present or subset"),
    ("model.variant", "conv", "encoder variant: conv or attention"),
    ("model.channels", "32", "conv stem output channels C"),
    ("model.feature_dim", "32", "feature dimension D"),
    ("model.blocks", "3", "encoder blocks L"),
    ("model.stride", "2", "conv stem stride s"),
    ("model.patch_size", "4", "attention patch size P"),
    ("model.seed", "17", "model initialization seed"),
    ("meta.steps", "2000", "meta-training steps (one episode each)"),
    ("meta.lr", "0.002", "meta-training Adam learning rate"),
    ("meta.n_way", "2", "ways per meta-training episode"),
    ("meta.k_shot", "2", "shots per way in meta-training episodes"),
    ("meta.seed", "13", "meta-training episode stream seed"),
    ("meta.window", "100", "window width for the loss-curve summary"),
    ("eval.methods", "vanilla,decoder_ft,tap", "methods to evaluate"),
    ("eval.folds", "0,1,2,3", "folds to evaluate"),
    ("eval.n_way", "2", "ways per evaluation episode"),
    ("eval.k_shot", "5", "shots per way in evaluation episodes"),
    ("eval.iterations", "8", "adaptation iterations T"),
    ("eval.rank", "16", "LoRA rank r"),
    ("eval.alpha", "1.0", "LoRA scaling factor alpha"),
    ("eval.lr", "0.001", "adaptation Adam learning rate"),
    ("eval.episodes", "50", "episodes per fold per run"),
    ("eval.runs", "3", "runs (independent episode sets) per fold"),
    ("eval.support_gradients", "true", "gradients flow through the support branch"),
    ("eval.select", "identity", "context selection: identity or random_k:<j>"),
    ("eval.gamma", "2.0", "focal loss focusing parameter"),
    ("eval.weight_mode", "inverse_log_frequency", "focal class weights: inverse_log_frequency or uniform"),
    ("sweep.ranks", "2,4,8,16,32,64", "ranks for the rank-iteration sweep"),
    ("sweep.iterations", "8", "iterations per sweep cell"),
    ("sweep.episodes", "8", "episodes averaged per sweep cell"),
    ("sweep.fold", "0", "fold used by the sweep"),
    ("oneshot.iterations", "8", "iterations for the 1-shot study"),
    ("oneshot.episodes", "10", "episodes per shot setting"),
    ("oneshot.fold", "0", "fold used by the 1-shot study"),
    ("oneshot.n_way", "1", "ways in the 1-shot study"),
    ("out.dir", "runs/out", "output directory for reports and artifacts"),
];

/// Human-readable key reference table.
pub fn key_reference_table() -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:<24} description", "key", "default");
    for (k, d, doc) in KEY_REFERENCE {
        let _ = writeln!(s, "{:<28} {:<24} {}", k, d, doc);
    }
    s
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: expected an unsigned integer, got '{}'", key, v)))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: expected an unsigned integer, got '{}'", key, v)))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: expected a number, got '{}'", key, v)))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{}: expected true or false, got '{}'", key, v))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect()
}

fn parse_cells(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|cell| {
            let cell = cell.trim();
            let (n, k) = cell.split_once('x').ok_or_else(|| {
                Error::Config(format!("{}: expected NxK cells, got '{}'", key, cell))
            })?;
            Ok((parse_usize(key, n)?, parse_usize(key, k)?))
        })
        .collect()
}

impl RunConfig {
    /// Parse `key = value` text, filling unspecified keys from defaults.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut map: BTreeMap<String, String> = KEY_REFERENCE
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{}'", lineno + 1, raw))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !map.contains_key(key) {
                return Err(Error::Config(format!("line {}: unknown key '{}'", lineno + 1, key)));
            }
            map.insert(key.to_string(), value.to_string());
        }
        Self::from_map(&map)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse_str(&text)
    }

    pub fn default_config() -> RunConfig {
        Self::parse_str("").expect("defaults are valid")
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let g = |key: &str| -> &str { map.get(key).map(|s| s.as_str()).unwrap_or_default() };

        let dataset = DatasetSection {
            dir: PathBuf::from(g("dataset.dir")),
            seed: parse_u64("dataset.seed", g("dataset.seed"))?,
            image_size: parse_usize("dataset.image_size", g("dataset.image_size"))?,
            cells: parse_cells("dataset.cells", g("dataset.cells"))?,
            episodes_per_fold: parse_usize(
                "dataset.episodes_per_fold",
                g("dataset.episodes_per_fold"),
            )?,
            runs: parse_usize("dataset.runs", g("dataset.runs"))?,
            noise: parse_f64("dataset.noise", g("dataset.noise"))?,
            distractors_max: parse_usize("dataset.distractors_max", g("dataset.distractors_max"))?,
            query_policy: match g("dataset.query_policy") {
                "all_present" => QueryPolicy::AllPresent,
                "subset" => QueryPolicy::Subset,
                other => {
                    return Err(Error::Config(format!(
                        "dataset.query_policy: expected all_present or subset, got '{}'",
                        other
                    )))
                }
            },
        };
        let model = ModelSection {
            variant: Variant::parse(g("model.variant"))?,
            channels: parse_usize("model.channels", g("model.channels"))?,
            feature_dim: parse_usize("model.feature_dim", g("model.feature_dim"))?,
            blocks: parse_usize("model.blocks", g("model.blocks"))?,
            stride: parse_usize("model.stride", g("model.stride"))?,
            patch_size: parse_usize("model.patch_size", g("model.patch_size"))?,
            seed: parse_u64("model.seed", g("model.seed"))?,
        };
        let meta = MetaSection {
            steps: parse_usize("meta.steps", g("meta.steps"))?,
            lr: parse_f64("meta.lr", g("meta.lr"))?,
            n_way: parse_usize("meta.n_way", g("meta.n_way"))?,
            k_shot: parse_usize("meta.k_shot", g("meta.k_shot"))?,
            seed: parse_u64("meta.seed", g("meta.seed"))?,
            window: parse_usize("meta.window", g("meta.window"))?,
        };
        let eval = EvalSection {
            methods: g("eval.methods")
                .split(',')
                .map(|m| Method::parse(m.trim()))
                .collect::<Result<_>>()?,
            folds: parse_usize_list("eval.folds", g("eval.folds"))?,
            n_way: parse_usize("eval.n_way", g("eval.n_way"))?,
            k_shot: parse_usize("eval.k_shot", g("eval.k_shot"))?,
            iterations: parse_usize("eval.iterations", g("eval.iterations"))?,
            rank: parse_usize("eval.rank", g("eval.rank"))?,
            alpha: parse_f64("eval.alpha", g("eval.alpha"))?,
            lr: parse_f64("eval.lr", g("eval.lr"))?,
            episodes: parse_usize("eval.episodes", g("eval.episodes"))?,
            runs: parse_usize("eval.runs", g("eval.runs"))?,
            support_gradients: parse_bool("eval.support_gradients", g("eval.support_gradients"))?,
            select: SelectStrategy::parse(g("eval.select"))?,
            gamma: parse_f64("eval.gamma", g("eval.gamma"))?,
            weight_mode: match g("eval.weight_mode") {
                "inverse_log_frequency" => WeightMode::InverseLogFrequency,
                "uniform" => WeightMode::Uniform,
                other => {
                    return Err(Error::Config(format!(
                        "eval.weight_mode: expected inverse_log_frequency or uniform, got '{}'",
                        other
                    )))
                }
            },
        };
        let sweep = SweepSection {
            ranks: parse_usize_list("sweep.ranks", g("sweep.ranks"))?,
            iterations: parse_usize("sweep.iterations", g("sweep.iterations"))?,
            episodes: parse_usize("sweep.episodes", g("sweep.episodes"))?,
            fold: parse_usize("sweep.fold", g("sweep.fold"))?,
        };
        let oneshot = OneshotSection {
            iterations: parse_usize("oneshot.iterations", g("oneshot.iterations"))?,
            episodes: parse_usize("oneshot.episodes", g("oneshot.episodes"))?,
            fold: parse_usize("oneshot.fold", g("oneshot.fold"))?,
            n_way: parse_usize("oneshot.n_way", g("oneshot.n_way"))?,
        };
        let cfg = RunConfig {
            dataset,
            model,
            meta,
            eval,
            sweep,
            oneshot,
            out_dir: PathBuf::from(g("out.dir")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        let d = &self.dataset;
        if d.image_size < 16 || d.image_size > 256 {
            return err(format!("dataset.image_size {} outside 16..=256", d.image_size));
        }
        if d.cells.is_empty() {
            return err("dataset.cells must list at least one NxK cell".into());
        }
        for &(n, k) in &d.cells {
            if n == 0 || n > 3 || k == 0 || k > 16 {
                return err(format!("dataset cell {}x{} outside 1..=3 ways, 1..=16 shots", n, k));
            }
        }
        if d.episodes_per_fold == 0 || d.runs == 0 {
            return err("dataset.episodes_per_fold and dataset.runs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&d.noise) {
            return err(format!("dataset.noise {} outside [0, 1)", d.noise));
        }
        if d.distractors_max > 4 {
            return err(format!("dataset.distractors_max {} outside 0..=4", d.distractors_max));
        }

        let m = &self.model;
        if m.channels < 2 || m.channels > 256 || m.feature_dim < 2 || m.feature_dim > 256 {
            return err("model.channels and model.feature_dim must be in 2..=256".into());
        }
        if m.blocks == 0 || m.blocks > 8 {
            return err(format!("model.blocks {} outside 1..=8", m.blocks));
        }
        if m.stride == 0 || d.image_size % m.stride != 0 {
            return err(format!(
                "dataset.image_size {} must be divisible by model.stride {}",
                d.image_size, m.stride
            ));
        }
        if m.patch_size == 0 || d.image_size % m.patch_size != 0 {
            return err(format!(
                "dataset.image_size {} must be divisible by model.patch_size {}",
                d.image_size, m.patch_size
            ));
        }

        if self.meta.lr <= 0.0 {
            return err(format!("meta.lr {} must be positive", self.meta.lr));
        }
        if self.meta.n_way == 0 || self.meta.n_way > 9 || self.meta.k_shot == 0 {
            return err("meta.n_way must be in 1..=9 and meta.k_shot >= 1".into());
        }
        if self.meta.window == 0 {
            return err("meta.window must be >= 1".into());
        }

        let e = &self.eval;
        if e.methods.is_empty() {
            return err("eval.methods must list at least one method".into());
        }
        for &f in e.folds.iter().chain([&self.sweep.fold, &self.oneshot.fold]) {
            if f > 3 {
                return err(format!("fold index {} outside 0..=3", f));
            }
        }
        if e.n_way == 0 || e.n_way > 3 || e.k_shot == 0 {
            return err("eval.n_way must be in 1..=3 and eval.k_shot >= 1".into());
        }
        if e.rank == 0 {
            return err("eval.rank must be >= 1".into());
        }
        if e.lr <= 0.0 {
            return err(format!("eval.lr {} must be positive", e.lr));
        }
        if e.episodes == 0 || e.runs == 0 {
            return err("eval.episodes and eval.runs must be >= 1".into());
        }
        if e.episodes > self.dataset.episodes_per_fold || e.runs > self.dataset.runs {
            return err(format!(
                "eval wants {} episodes x {} runs but the dataset materializes {} x {}",
                e.episodes, e.runs, self.dataset.episodes_per_fold, self.dataset.runs
            ));
        }
        if !e.gamma.is_finite() || e.gamma < 0.0 {
            return err(format!("eval.gamma {} must be finite and non-negative", e.gamma));
        }
        if self.sweep.ranks.is_empty() || self.sweep.episodes == 0 {
            return err("sweep.ranks must be non-empty and sweep.episodes >= 1".into());
        }
        if self.oneshot.episodes == 0 || self.oneshot.n_way == 0 || self.oneshot.n_way > 3 {
            return err("oneshot.episodes >= 1 and oneshot.n_way in 1..=3 required".into());
        }
        Ok(())
    }

    /// Resolved configuration as sorted `key = value` text; parsing it back
    /// reproduces this configuration exactly.
    pub fn to_flat_string(&self) -> String {
        let mut map = BTreeMap::new();
        let d = &self.dataset;
        map.insert("dataset.dir", d.dir.display().to_string());
        map.insert("dataset.seed", d.seed.to_string());
        map.insert("dataset.image_size", d.image_size.to_string());
        map.insert(
            "dataset.cells",
            d.cells.iter().map(|(n, k)| format!("{}x{}", n, k)).collect::<Vec<_>>().join(","),
        );
        map.insert("dataset.episodes_per_fold", d.episodes_per_fold.to_string());
        map.insert("dataset.runs", d.runs.to_string());
        map.insert("dataset.noise", format!("{}", d.noise));
        map.insert("dataset.distractors_max", d.distractors_max.to_string());
        map.insert(
            "dataset.query_policy",
            match d.query_policy {
                QueryPolicy::AllPresent => "all_present".to_string(),
                QueryPolicy::Subset => "subset".to_string(),
            },
        );
        let m = &self.model;
        map.insert("model.variant", m.variant.as_str().to_string());
        map.insert("model.channels", m.channels.to_string());
        map.insert("model.feature_dim", m.feature_dim.to_string());
        map.insert("model.blocks", m.blocks.to_string());
        map.insert("model.stride", m.stride.to_string());
        map.insert("model.patch_size", m.patch_size.to_string());
        map.insert("model.seed", m.seed.to_string());
        map.insert("meta.steps", self.meta.steps.to_string());
        map.insert("meta.lr", format!("{}", self.meta.lr));
        map.insert("meta.n_way", self.meta.n_way.to_string());
        map.insert("meta.k_shot", self.meta.k_shot.to_string());
        map.insert("meta.seed", self.meta.seed.to_string());
        map.insert("meta.window", self.meta.window.to_string());
        let e = &self.eval;
        map.insert(
            "eval.methods",
            e.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
        );
        map.insert(
            "eval.folds",
            e.folds.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert("eval.n_way", e.n_way.to_string());
        map.insert("eval.k_shot", e.k_shot.to_string());
        map.insert("eval.iterations", e.iterations.to_string());
        map.insert("eval.rank", e.rank.to_string());
        map.insert("eval.alpha", format!("{}", e.alpha));
        map.insert("eval.lr", format!("{}", e.lr));
        map.insert("eval.episodes", e.episodes.to_string());
        map.insert("eval.runs", e.runs.to_string());
        map.insert("eval.support_gradients", e.support_gradients.to_string());
        map.insert("eval.select", e.select.describe());
        map.insert("eval.gamma", format!("{}", e.gamma));
        map.insert(
            "eval.weight_mode",
            match e.weight_mode {
                WeightMode::InverseLogFrequency => "inverse_log_frequency".to_string(),
                WeightMode::Uniform => "uniform".to_string(),
            },
        );
        map.insert(
            "sweep.ranks",
            self.sweep.ranks.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert("sweep.iterations", self.sweep.iterations.to_string());
        map.insert("sweep.episodes", self.sweep.episodes.to_string());
        map.insert("sweep.fold", self.sweep.fold.to_string());
        map.insert("oneshot.iterations", self.oneshot.iterations.to_string());
        map.insert("oneshot.episodes", self.oneshot.episodes.to_string());
        map.insert("oneshot.fold", self.oneshot.fold.to_string());
        map.insert("oneshot.n_way", self.oneshot.n_way.to_string());
        map.insert("out.dir", self.out_dir.display().to_string());

        let mut s = String::new();
        for (k, v) in map {
            let _ = writeln!(s, "{} = {}", k, v);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::default_config();
        assert_eq!(cfg.eval.rank, 16);
        assert_eq!(cfg.dataset.cells, vec![(2, 5), (1, 1), (1, 2)]);
        assert_eq!(cfg.eval.methods.len(), 3);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse_str("eval.bogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'eval.bogus'"));
    }

    #[test]
    fn out_of_bounds_values_are_rejected() {
        assert!(RunConfig::parse_str("dataset.image_size = 7\n").is_err());
        assert!(RunConfig::parse_str("eval.lr = 0\n").is_err());
        assert!(RunConfig::parse_str("eval.folds = 0,9\n").is_err());
        assert!(RunConfig::parse_str("dataset.image_size = 30\n").is_err()); // stride 2 ok, patch 4 not
        assert!(RunConfig::parse_str("eval.episodes = 100\n").is_err()); // exceeds dataset
    }

    #[test]
    fn flat_string_round_trips() {
        let text = "eval.rank = 8\ndataset.seed = 99\neval.select = random_k:2\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        let flat = cfg.to_flat_string();
        let back = RunConfig::parse_str(&flat).unwrap();
        assert_eq!(flat, back.to_flat_string());
        assert_eq!(back.eval.rank, 8);
        assert_eq!(back.dataset.seed, 99);
        assert_eq!(back.eval.select, SelectStrategy::RandomK(2));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse_str("# a comment\n\neval.rank = 4\n").unwrap();
        assert_eq!(cfg.eval.rank, 4);
    }

    #[test]
    fn key_reference_covers_every_default() {
        // Every key in the reference parses under its own default.
        let cfg = RunConfig::default_config();
        let flat = cfg.to_flat_string();
        for (key, _, _) in KEY_REFERENCE {
            assert!(flat.contains(key), "flat output missing {}", key);
        }
    }
}
