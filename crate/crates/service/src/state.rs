use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use markmatch_core::retrieval::Pool;
use markmatch_core::segmentation::{MaskSegment, SegmentOptions};
use markmatch_core::{EmbeddingVector, EncoderParams, GrayImage, LossConfig, Result};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub loss: LossConfig,
    pub segment: SegmentOptions,
    /// Pool file rewritten after every enrollment; `None` keeps the pool in
    /// memory only.
    pub pool_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct BallotRecord {
    pub ballot_id: String,
    pub image: Arc<GrayImage>,
    /// Segment ids in creation order.
    pub segments: Vec<String>,
}

#[derive(Debug, Clone)]
pub(crate) struct SegmentEntry {
    pub ballot_id: String,
    pub segment: MaskSegment,
    pub embedding: EmbeddingVector,
    pub alias: Option<String>,
}

#[derive(Debug, Default)]
pub(crate) struct Inner {
    pub ballots: HashMap<String, BallotRecord>,
    pub segments: HashMap<String, SegmentEntry>,
    pub pool: Pool,
    pub next_ballot: usize,
    pub next_segment: usize,
}

/// Shared service state. The model is immutable; everything else sits
/// behind one reader-writer lock, so a query sees the pool either before
/// or after an enrollment.
#[derive(Debug)]
pub struct AppState {
    pub(crate) params: EncoderParams,
    pub(crate) config: ServiceConfig,
    inner: RwLock<Inner>,
}

impl AppState {
    pub fn new(params: EncoderParams, pool: Pool, config: ServiceConfig) -> Result<Self> {
        config.loss.validate()?;
        if pool.dim() != params.embedding_dim() {
            return Err(markmatch_core::Error::InvalidArgument(format!(
                "pool dim {} does not match model embedding dim {}",
                pool.dim(),
                params.embedding_dim()
            )));
        }
        // keep fresh ballot ids clear of ones already in a loaded pool
        let next_ballot = pool
            .records()
            .iter()
            .filter_map(|r| r.ballot_id.strip_prefix("ballot-")?.parse::<usize>().ok())
            .max()
            .map_or(0, |n| n + 1);
        Ok(AppState {
            params,
            config,
            inner: RwLock::new(Inner {
                pool,
                next_ballot,
                ..Default::default()
            }),
        })
    }

    /// An empty pool sized for `params`.
    pub fn with_empty_pool(params: EncoderParams, config: ServiceConfig) -> Result<Self> {
        let pool = Pool::new(params.embedding_dim());
        Self::new(params, pool, config)
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    /// Snapshot of the current pool.
    pub fn pool(&self) -> Pool {
        self.read().pool.clone()
    }

    pub fn ballot(&self, ballot_id: &str) -> Option<BallotRecord> {
        self.read().ballots.get(ballot_id).cloned()
    }

    pub(crate) fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }
}
