//! HTTP inference service: checkpoint catalog, bundled burn-in snippets,
//! rollouts with macro-intent grounding, and the court grid.
//!
//! Checkpoints are loaded once at startup and shared read-only. Every
//! rollout runs on its own RNG seeded by the request, so the response body
//! is a pure function of the request. Results are kept in a bounded cache
//! keyed by a digest of the request.

mod catalog;
mod handlers;

pub use catalog::{BurninCatalog, BurninSnippet, ModelCatalog, ModelEntry, ModelSummary};
pub use handlers::{rollout_id, RolloutBody, RolloutResponse};

use axum::routing::{get, post};
use axum::Router;
use mstraj_core::dataset::CourtGeometry;
use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use tokio::sync::Semaphore;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub checkpoint_dir: PathBuf,
    /// Directory of dataset files whose leading frames become burn-ins.
    pub burnin_dir: Option<PathBuf>,
    pub burnins_per_file: usize,
    pub max_concurrent_rollouts: usize,
    pub cache_capacity: usize,
    pub court: CourtGeometry,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint_dir: PathBuf::from("checkpoints"),
            burnin_dir: None,
            burnins_per_file: 16,
            max_concurrent_rollouts: 4,
            cache_capacity: 256,
            court: CourtGeometry::default(),
        }
    }
}

/// Insertion-ordered cache that drops the oldest entry when full.
pub struct ResultCache {
    capacity: usize,
    order: VecDeque<String>,
    entries: HashMap<String, Arc<RolloutResponse>>,
}

impl ResultCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), order: VecDeque::new(), entries: HashMap::new() }
    }

    pub fn get(&self, id: &str) -> Option<Arc<RolloutResponse>> {
        self.entries.get(id).cloned()
    }

    pub fn insert(&mut self, id: String, value: Arc<RolloutResponse>) {
        if self.entries.insert(id.clone(), value).is_some() {
            return;
        }
        self.order.push_back(id);
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct AppState {
    pub models: ModelCatalog,
    pub burnins: BurninCatalog,
    pub court: CourtGeometry,
    /// Rollout slots; a request that finds none free is rejected with 409.
    pub rollout_permits: Arc<Semaphore>,
    pub cache: Mutex<ResultCache>,
}

impl AppState {
    pub fn load(config: &ServiceConfig) -> std::io::Result<Self> {
        if let Err(e) = config.court.validate() {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, e));
        }
        let models = ModelCatalog::scan(&config.checkpoint_dir)?;
        let burnins = match &config.burnin_dir {
            Some(dir) => BurninCatalog::scan(dir, config.burnins_per_file)?,
            None => BurninCatalog::default(),
        };
        Ok(Self {
            models,
            burnins,
            court: config.court,
            rollout_permits: Arc::new(Semaphore::new(config.max_concurrent_rollouts)),
            cache: Mutex::new(ResultCache::new(config.cache_capacity)),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", get(handlers::list_models))
        .route("/burnins", get(handlers::get_burnins))
        .route("/rollouts", post(handlers::create_rollout))
        .route("/rollouts/{id}", get(handlers::get_rollout))
        .route("/court", get(handlers::court))
        .route("/court/cell", get(handlers::court_cell))
        .with_state(state)
}

/// Loads the catalogs and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let state = Arc::new(AppState::load(&config)?);
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    axum::serve(listener, router(state)).await
}
