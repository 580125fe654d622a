//! Declarative run configuration (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. `--seed` and `--out` override `seed` and `out_dir`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gridloc_core::canvas::{GridSpec, DEFAULT_CANVAS_SIDE};
use gridloc_core::corpus::synthetic::SyntheticSpec;
use gridloc_core::corpus::{Pathology, Split, ViewKind};
use gridloc_core::querier::{BackendConfig, PromptOptions};
use gridloc_core::report::{GroundTruthMode, HeatmapStyle};
use gridloc_core::scorer::ScoringConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Run-length JSON manifest plus an image root.
    RleJson,
    /// Directory index with image and mask PNG paths.
    SyntheticIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub format: CorpusFormat,
    pub manifest: PathBuf,
    #[serde(default)]
    pub images_root: Option<PathBuf>,
    /// Split assigned to bare manifests that carry no split of their own.
    #[serde(default = "default_split")]
    pub default_split: Split,
    /// Only evaluate this split.
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub view: Option<ViewKind>,
    #[serde(default)]
    pub pathologies: Option<Vec<Pathology>>,
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub replicates: usize,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewSection {
    pub cap: usize,
    /// Plausibility atlas: `<slug>.png` region masks in the canonical frame.
    pub atlas_dir: Option<PathBuf>,
    /// Filled-in worksheets, laid out like `report/worksheets`.
    pub completed_dir: Option<PathBuf>,
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self {
            cap: 50,
            atlas_dir: None,
            completed_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub ground_truth_mode: GroundTruthMode,
    pub frontal_only: bool,
    /// Restrict heatmaps to one split.
    pub heatmap_split: Option<Split>,
    pub style: HeatmapStyle,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            ground_truth_mode: GroundTruthMode::default(),
            frontal_only: true,
            heatmap_split: None,
            style: HeatmapStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_grids")]
    pub grids: Vec<String>,
    /// Canvas side for grids given without an `@side` suffix.
    #[serde(default = "default_side")]
    pub canvas_side: u32,
    /// Required except for `simulate`, which defaults to the generated corpus.
    #[serde(default)]
    pub corpus: Option<CorpusSection>,
    /// Corpus generated by `simulate`; `seed` defaults to the global seed.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub prompt: PromptOptions,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub review: ReviewSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_grids() -> Vec<String> {
    vec!["8x8".into()]
}

fn default_side() -> u32 {
    DEFAULT_CANVAS_SIDE
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).context("parsing config")?;
        let synthetic_has_seed = raw
            .get("synthetic")
            .and_then(|s| s.as_table())
            .is_some_and(|t| t.contains_key("seed"));
        let mut cfg: RunConfig = raw.try_into().context("reading config")?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        if let Some(s) = cfg.synthetic.as_mut() {
            if !synthetic_has_seed || overrides.seed.is_some() {
                s.seed = cfg.seed;
            }
        }
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, overrides)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(c) = self.corpus.as_mut() {
            fix(&mut c.manifest);
            if let Some(r) = c.images_root.as_mut() {
                fix(r);
            }
        }
        if let Some(a) = self.review.atlas_dir.as_mut() {
            fix(a);
        }
        if let Some(d) = self.review.completed_dir.as_mut() {
            fix(d);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backends.is_empty() {
            bail!("config lists no backends");
        }
        let mut ids = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate().map_err(anyhow::Error::msg)?;
            if !ids.insert(&b.id) {
                bail!("backend id {:?} appears twice", b.id);
            }
        }
        if self.grids.is_empty() {
            bail!("config lists no grids");
        }
        let specs = self.grid_specs()?;
        for (i, a) in specs.iter().enumerate() {
            if specs[..i].contains(a) {
                bail!("grid {a} appears twice");
            }
        }
        self.scoring.validate().map_err(anyhow::Error::msg)?;
        if self.stats.replicates == 0 {
            bail!("stats.replicates must be at least 1");
        }
        if let Some(c) = &self.corpus {
            if c.format == CorpusFormat::RleJson && c.images_root.is_none() {
                bail!("corpus.images_root is required for the rle_json format");
            }
        }
        Ok(())
    }

    pub fn grid_specs(&self) -> Result<Vec<GridSpec>> {
        self.grids
            .iter()
            .map(|g| {
                let text = if g.contains('@') {
                    g.clone()
                } else {
                    format!("{g}@{}", self.canvas_side)
                };
                text.parse::<GridSpec>().map_err(|e| anyhow::anyhow!("grid {g:?}: {e}"))
            })
            .collect()
    }

    pub fn stats_seed(&self) -> u64 {
        self.stats.seed.unwrap_or(self.seed)
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.out_dir.join("prepared")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.out_dir.join("cache")
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.out_dir.join("scores")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}
