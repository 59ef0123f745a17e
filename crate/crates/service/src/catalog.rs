use candle_core::DType;
use mstraj_core::dataset::{load_dataset, Domain};
use mstraj_core::evaluation::{nested_frames, DEFAULT_BURNIN};
use mstraj_core::models::{read_manifest, ModelCheckpoint};
use mstraj_core::{Model, Variant};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub variant: Variant,
    pub domain: Domain,
    pub agents: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub rnn_width: usize,
    pub macro_categories: usize,
    pub parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_completed: Option<usize>,
}

/// One checkpoint directory. Entries that fail to load stay listed with
/// `valid: false` and the reason.
#[derive(Debug, Clone, Serialize)]
pub struct ModelEntry {
    pub id: String,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<ModelSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
pub struct ModelCatalog {
    entries: Vec<ModelEntry>,
    models: BTreeMap<String, Arc<Model>>,
}

fn load_model(dir: &Path) -> Result<(Model, ModelSummary), String> {
    let manifest = read_manifest(dir).map_err(|e| e.to_string())?;
    let ckpt = ModelCheckpoint::load(dir).map_err(|e| e.to_string())?;
    let model = Model::from_checkpoint(&ckpt, DType::F32).map_err(|e| e.to_string())?;
    let c = &model.config;
    let summary = ModelSummary {
        variant: c.variant,
        domain: c.domain,
        agents: c.agents,
        dim: c.dim,
        latent_dim: c.latent_dim,
        rnn_width: c.rnn_width,
        macro_categories: c.macro_categories,
        parameters: manifest.parameter_count(),
        epochs_completed: manifest.epochs_completed(),
    };
    Ok((model, summary))
}

impl ModelCatalog {
    /// Every subdirectory of `dir` is one checkpoint, named by the
    /// directory.
    pub fn scan(dir: &Path) -> std::io::Result<Self> {
        let mut dirs: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
            .map(|e| e.path())
            .collect();
        dirs.sort();
        let mut catalog = Self::default();
        for path in dirs {
            let id = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            match load_model(&path) {
                Ok((model, summary)) => {
                    catalog.models.insert(id.clone(), Arc::new(model));
                    catalog.entries.push(ModelEntry { id, valid: true, summary: Some(summary), error: None });
                }
                Err(e) => catalog.entries.push(ModelEntry { id, valid: false, summary: None, error: Some(e) }),
            }
        }
        Ok(catalog)
    }

    pub fn entries(&self) -> &[ModelEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&ModelEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Model>> {
        self.models.get(id).cloned()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BurninSnippet {
    pub id: String,
    pub domain: Domain,
    /// Dataset file and trajectory index the frames come from.
    pub source: String,
    pub index: usize,
    /// Unnormalized states, frames x agents x dim.
    pub frames: Vec<Vec<Vec<f64>>>,
}

#[derive(Default)]
pub struct BurninCatalog {
    snippets: Vec<BurninSnippet>,
}

impl BurninCatalog {
    /// The first `per_file` trajectories of every dataset file in `dir`,
    /// cut to the default burn-in length.
    pub fn scan(dir: &Path, per_file: usize) -> std::io::Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect();
        files.sort();
        let mut snippets = Vec::new();
        for path in files {
            // files that are not datasets are skipped
            let Ok(ds) = load_dataset(&path) else { continue };
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            for (i, traj) in ds.trajectories().iter().take(per_file).enumerate() {
                snippets.push(BurninSnippet {
                    id: format!("{stem}-{i}"),
                    domain: ds.domain,
                    source: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    index: i,
                    frames: nested_frames(traj, DEFAULT_BURNIN.min(traj.len())),
                });
            }
        }
        Ok(Self { snippets })
    }

    pub fn for_domain(&self, domain: Domain) -> Vec<&BurninSnippet> {
        self.snippets.iter().filter(|s| s.domain == domain).collect()
    }

    pub fn get(&self, id: &str) -> Option<&BurninSnippet> {
        self.snippets.iter().find(|s| s.id == id)
    }
}
