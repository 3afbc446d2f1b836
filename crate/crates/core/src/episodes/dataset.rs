//! On-disk dataset: one directory per fold, per-sample TAPT tensors, a
//! line-delimited sample manifest, and per-cell episode manifests that
//! reference samples so evaluation is replayable.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::{
    sample_episode_from, ClassTable, Episode, FoldSplit, GenConfig, SynthClass, NUM_FOLDS,
};
use crate::error::{Error, Result};
use crate::tensor::{read_tapt, write_tapt, Tensor};
use crate::util::mix_seed;

/// Generation-time dataset description, serialized as `dataset.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub gen: GenConfig,
    /// (N, K) cells materialized per fold.
    pub cells: Vec<(usize, usize)>,
    /// Episodes per fold per run (per cell).
    pub episodes_per_fold: usize,
    pub runs: usize,
    pub classes: Vec<SynthClass>,
    pub folds: Vec<Vec<usize>>,
}

impl DatasetConfig {
    pub fn standard(seed: u64, gen: GenConfig, cells: Vec<(usize, usize)>, episodes_per_fold: usize, runs: usize) -> Self {
        let table = ClassTable::standard();
        let folds = (0..NUM_FOLDS)
            .map(|f| table.fold_split(f).expect("fold index in range").novel)
            .collect();
        DatasetConfig {
            seed,
            gen,
            cells,
            episodes_per_fold,
            runs,
            classes: table.all().to_vec(),
            folds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub class_ids: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub fold: usize,
    pub n: usize,
    pub k: usize,
    pub run: usize,
    pub seed: u64,
    pub classes: Vec<usize>,
    pub support: Vec<String>,
    pub query: String,
}

/// Per-fold generation counts for the summary table.
#[derive(Debug, Clone)]
pub struct FoldSummary {
    pub fold: usize,
    pub novel: Vec<usize>,
    pub samples: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub folds: Vec<FoldSummary>,
    pub out_dir: PathBuf,
}

impl GenSummary {
    /// Human-readable class/fold table.
    pub fn table(&self, classes: &ClassTable) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fold  novel classes                samples  episodes");
        for f in &self.folds {
            let names: Vec<String> = f
                .novel
                .iter()
                .map(|c| {
                    classes
                        .get(*c)
                        .map(|sc| format!("{}:{}", c, sc.shape.name()))
                        .unwrap_or_else(|_| c.to_string())
                })
                .collect();
            let _ = writeln!(
                s,
                "{:<5} {:<28} {:<8} {}",
                f.fold,
                names.join(" "),
                f.samples,
                f.episodes
            );
        }
        s
    }
}

fn episodes_manifest_name(n: usize, k: usize) -> String {
    format!("episodes-n{}-k{}.jsonl", n, k)
}

/// Generate the dataset under `dir`. Refuses a non-empty directory unless
/// `force` is set.
pub fn generate(dir: &Path, cfg: &DatasetConfig, force: bool) -> Result<GenSummary> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Data(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;

    let table = ClassTable::standard();
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Data(format!("dataset config encode: {}", e)))?;
    fs::write(dir.join("dataset.json"), json)?;

    let mut folds = Vec::new();
    for f in 0..NUM_FOLDS {
        let split = table.fold_split(f)?;
        let fold_dir = dir.join(format!("fold{}", f));
        let samples_dir = fold_dir.join("samples");
        fs::create_dir_all(&samples_dir)?;

        let mut sample_lines: Vec<String> = Vec::new();
        let mut fold_samples = 0usize;
        let mut fold_episodes = 0usize;

        for &(n, k) in &cfg.cells {
            let mut episode_lines: Vec<String> = Vec::new();
            for run in 0..cfg.runs {
                for e in 0..cfg.episodes_per_fold {
                    let seed = mix_seed(&[
                        cfg.seed,
                        f as u64,
                        n as u64,
                        k as u64,
                        run as u64,
                        e as u64,
                    ]);
                    let ep_id = format!("f{}n{}k{}r{}e{:04}", f, n, k, run, e);
                    let episode = sample_episode_from(
                        &split.novel,
                        &split.base,
                        n,
                        k,
                        seed,
                        &table,
                        &cfg.gen,
                        ep_id.clone(),
                    )?;

                    let mut write_sample = |tag: &str,
                                            image: &Tensor,
                                            mask: &Tensor,
                                            class_ids: Vec<usize>|
                     -> Result<String> {
                        let sid = format!("{}-{}", ep_id, tag);
                        let image_rel = format!("samples/{}_img.tapt", sid);
                        let mask_rel = format!("samples/{}_mask.tapt", sid);
                        write_tapt(&fold_dir.join(&image_rel), image)?;
                        write_tapt(&fold_dir.join(&mask_rel), mask)?;
                        let rec = SampleRecord {
                            id: sid.clone(),
                            image: image_rel,
                            mask: mask_rel,
                            class_ids,
                            seed,
                        };
                        sample_lines.push(
                            serde_json::to_string(&rec)
                                .map_err(|e| Error::Data(format!("sample record: {}", e)))?,
                        );
                        Ok(sid)
                    };

                    let mut support_ids = Vec::with_capacity(episode.support.len());
                    for (si, (img, mask)) in episode.support.iter().enumerate() {
                        let slot = si / k;
                        let sid = write_sample(
                            &format!("s{:02}", si),
                            img,
                            mask,
                            vec![episode.classes[slot]],
                        )?;
                        support_ids.push(sid);
                        fold_samples += 1;
                    }
                    let qid = write_sample(
                        "q",
                        &episode.query.0,
                        &episode.query.1,
                        episode.classes.clone(),
                    )?;
                    fold_samples += 1;

                    let rec = EpisodeRecord {
                        id: ep_id,
                        fold: f,
                        n,
                        k,
                        run,
                        seed,
                        classes: episode.classes.clone(),
                        support: support_ids,
                        query: qid,
                    };
                    episode_lines.push(
                        serde_json::to_string(&rec)
                            .map_err(|e| Error::Data(format!("episode record: {}", e)))?,
                    );
                    fold_episodes += 1;
                }
            }
            let mut ef = fs::File::create(fold_dir.join(episodes_manifest_name(n, k)))?;
            for line in &episode_lines {
                writeln!(ef, "{}", line)?;
            }
        }

        let mut sf = fs::File::create(fold_dir.join("samples.jsonl"))?;
        for line in &sample_lines {
            writeln!(sf, "{}", line)?;
        }

        folds.push(FoldSummary {
            fold: f,
            novel: split.novel.clone(),
            samples: fold_samples,
            episodes: fold_episodes,
        });
    }

    Ok(GenSummary { folds, out_dir: dir.to_path_buf() })
}

/// A generated dataset opened for reading.
pub struct Dataset {
    dir: PathBuf,
    config: DatasetConfig,
    table: ClassTable,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset.json");
        if !cfg_path.exists() {
            return Err(Error::Data(format!(
                "{} is not a dataset directory (missing dataset.json)",
                dir.display()
            )));
        }
        let raw = fs::read_to_string(&cfg_path)?;
        let config: DatasetConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Data(format!("dataset.json decode: {}", e)))?;
        Ok(Dataset { dir: dir.to_path_buf(), config, table: ClassTable::standard() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn class_table(&self) -> &ClassTable {
        &self.table
    }

    pub fn fold_split(&self, fold: usize) -> Result<FoldSplit> {
        self.table.fold_split(fold)
    }

    pub fn has_cell(&self, n: usize, k: usize) -> bool {
        self.config.cells.contains(&(n, k))
    }

    /// Episode records of one fold/cell, ordered as generated.
    pub fn episode_records(&self, fold: usize, n: usize, k: usize) -> Result<Vec<EpisodeRecord>> {
        let path = self
            .dir
            .join(format!("fold{}", fold))
            .join(episodes_manifest_name(n, k));
        if !path.exists() {
            return Err(Error::Data(format!(
                "dataset has no {}-way {}-shot episodes for fold {} ({} missing)",
                n,
                k,
                fold,
                path.display()
            )));
        }
        let reader = BufReader::new(fs::File::open(&path)?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("episode record decode: {}", e)))?,
            );
        }
        Ok(records)
    }

    fn sample_index(&self, fold: usize) -> Result<HashMap<String, SampleRecord>> {
        let path = self.dir.join(format!("fold{}", fold)).join("samples.jsonl");
        let reader = BufReader::new(fs::File::open(&path)?);
        let mut map = HashMap::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("sample record decode: {}", e)))?;
            map.insert(rec.id.clone(), rec);
        }
        Ok(map)
    }

    /// Materialize the episodes of one fold/cell from disk.
    pub fn load_episodes(&self, fold: usize, n: usize, k: usize) -> Result<Vec<Episode>> {
        let records = self.episode_records(fold, n, k)?;
        let index = self.sample_index(fold)?;
        let fold_dir = self.dir.join(format!("fold{}", fold));
        let load_pair = |sid: &str| -> Result<(Tensor, Tensor)> {
            let rec = index.get(sid).ok_or_else(|| {
                Error::Data(format!("sample {} missing from samples.jsonl", sid))
            })?;
            Ok((read_tapt(&fold_dir.join(&rec.image))?, read_tapt(&fold_dir.join(&rec.mask))?))
        };
        records
            .iter()
            .map(|rec| {
                let mut support = Vec::with_capacity(rec.support.len());
                for sid in &rec.support {
                    support.push(load_pair(sid)?);
                }
                let query = load_pair(&rec.query)?;
                Ok(Episode {
                    id: rec.id.clone(),
                    classes: rec.classes.clone(),
                    support,
                    query,
                    seed: rec.seed,
                    replicated: false,
                })
            })
            .collect()
    }
}
