//! Corpus loading and per-grid task tables shared by every stage.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use gridloc_core::canvas::{transform_mask, GridSpec};
use gridloc_core::corpus::{
    load_manifest, load_synthetic_index, AnnotationSet, BinaryMask, LocalizationTask, Pathology, TaskFilter,
};
use gridloc_core::querier::{digest, load_journal, CacheKey, PromptOptions, QueryRecord};
use gridloc_core::scorer::{overlap_fractions, OverlapGrid};

use crate::config::{CorpusFormat, RunConfig};

pub const PREPARED_SCHEMA: &str = "gridloc.prepared.v1";

pub struct Context {
    pub set: AnnotationSet,
    pub corpus_digest: String,
    pub layouts: Vec<GridLayout>,
}

/// Tasks under one grid, with their overlap grids in the same order.
pub struct GridLayout {
    pub spec: GridSpec,
    pub tasks: Vec<LocalizationTask>,
    pub overlaps: Vec<OverlapGrid>,
}

impl Context {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let Some(corpus) = &cfg.corpus else {
            bail!("config has no [corpus] section");
        };
        let set = match corpus.format {
            CorpusFormat::RleJson => {
                let root = corpus.images_root.as_deref().expect("validated");
                load_manifest(&corpus.manifest, root, corpus.default_split)?
            }
            CorpusFormat::SyntheticIndex => load_synthetic_index(&corpus.manifest)?,
        };
        for w in set.warnings() {
            log::warn!("corpus: {w:?}");
        }
        let manifest_bytes =
            std::fs::read(&corpus.manifest).with_context(|| format!("reading {}", corpus.manifest.display()))?;
        let corpus_digest = digest(&manifest_bytes);
        let filter = TaskFilter {
            split: corpus.split,
            view: corpus.view,
            pathologies: corpus.pathologies.clone(),
        };

        let mut canonical: HashMap<(u32, String, Pathology), Option<BinaryMask>> = HashMap::new();
        let mut layouts = Vec::new();
        for spec in cfg.grid_specs()? {
            let mut tasks = Vec::new();
            let mut overlaps = Vec::new();
            for task in gridloc_core::corpus::select_tasks(&set, &filter, spec) {
                let key = (spec.canvas_side(), task.image_id.clone(), task.pathology);
                let mask = match canonical.get(&key) {
                    Some(m) => m.clone(),
                    None => {
                        let record = set.record(&task.image_id).expect("tasks reference records");
                        let native = set.mask(&task.image_id, task.pathology).expect("tasks have masks");
                        let m = transform_mask(native, record.native_width, record.native_height, spec.canvas_side())
                            .with_context(|| format!("{} / {}", task.image_id, task.pathology))?;
                        let m = (!m.is_empty()).then_some(m);
                        canonical.insert(key, m.clone());
                        m
                    }
                };
                let Some(mask) = mask else {
                    log::warn!(
                        "{} / {}: mask is empty after cropping to the canonical frame; task skipped",
                        task.image_id,
                        task.pathology
                    );
                    continue;
                };
                overlaps.push(overlap_fractions(&mask, spec, &cfg.scoring)?);
                tasks.push(task);
            }
            if tasks.is_empty() {
                bail!("no tasks selected for grid {spec}");
            }
            layouts.push(GridLayout { spec, tasks, overlaps });
        }
        Ok(Self {
            set,
            corpus_digest,
            layouts,
        })
    }

    /// Image ids referenced by any task, in order.
    pub fn image_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .layouts
            .iter()
            .flat_map(|l| l.tasks.iter().map(|t| t.image_id.clone()))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

pub fn grid_dir_name(spec: &GridSpec) -> String {
    spec.to_string()
}

pub fn image_file_name(image_id: &str) -> String {
    let safe: String = image_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedImage {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub schema: String,
    pub grid: GridSpec,
    pub images: BTreeMap<String, PreparedImage>,
}

impl PreparedIndex {
    pub fn path(prepared_dir: &Path, spec: &GridSpec) -> PathBuf {
        prepared_dir.join(grid_dir_name(spec)).join("index.json")
    }

    pub fn load(prepared_dir: &Path, spec: &GridSpec) -> Result<Self> {
        let path = Self::path(prepared_dir, spec);
        let text = std::fs::read_to_string(&path).with_context(|| {
            format!(
                "missing prepared images for grid {spec} ({}); run `prepare` first",
                path.display()
            )
        })?;
        let idx: PreparedIndex = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if idx.schema != PREPARED_SCHEMA || idx.grid != *spec {
            bail!("{} does not describe grid {spec}", path.display());
        }
        Ok(idx)
    }

    pub fn entry(&self, image_id: &str) -> Result<&PreparedImage> {
        self.images
            .get(image_id)
            .with_context(|| format!("image {image_id} was not prepared; run `prepare` again"))
    }

    pub fn read_png(&self, prepared_dir: &Path, image_id: &str) -> Result<Arc<[u8]>> {
        let e = self.entry(image_id)?;
        let path = prepared_dir.join(grid_dir_name(&self.grid)).join(&e.file);
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Arc::from(bytes))
    }
}

/// Writes `bytes` unless the file already holds exactly them. Returns
/// whether it wrote.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if digest(&existing) == digest(bytes) {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(true)
}

pub fn journal_path(cfg: &RunConfig, backend_id: &str) -> PathBuf {
    cfg.cache_dir().join(format!("{backend_id}.jsonl"))
}

/// Cache keys for a lane's tasks, derived without reading image bytes.
pub fn lane_keys(
    backend_id: &str,
    layout: &GridLayout,
    index: &PreparedIndex,
    prompt: &PromptOptions,
) -> Result<Vec<CacheKey>> {
    let empty: Arc<[u8]> = Arc::from(&[][..]);
    layout
        .tasks
        .iter()
        .map(|t| {
            let image_hash = index.entry(&t.image_id)?.sha256.clone();
            let prompt_hash = gridloc_core::querier::build_prompt(t, Arc::clone(&empty), prompt).prompt_hash();
            Ok((backend_id.to_string(), image_hash, prompt_hash))
        })
        .collect()
}

/// The cached record for every task of one (backend, grid) lane, in task
/// order. Never contacts a backend.
pub fn lane_records(cfg: &RunConfig, backend_id: &str, layout: &GridLayout) -> Result<Vec<QueryRecord>> {
    let index = PreparedIndex::load(&cfg.prepared_dir(), &layout.spec)?;
    let keys = lane_keys(backend_id, layout, &index, &cfg.prompt)?;
    let journal = load_journal(&journal_path(cfg, backend_id))?;
    let mut missing = 0;
    let mut out = Vec::with_capacity(keys.len());
    for (task, key) in layout.tasks.iter().zip(&keys) {
        match journal.get(key) {
            Some(r) => {
                let mut r = r.clone();
                r.task = task.clone();
                out.push(r);
            }
            None => missing += 1,
        }
    }
    if missing > 0 {
        bail!(
            "backend {backend_id}, grid {}: {missing} of {} tasks have no cached response; run `run` first",
            layout.spec,
            keys.len()
        );
    }
    Ok(out)
}
