//! Forward-trajectory storage: a put/get contract over `(timestep, stage)` keys.
//!
//! Backends:
//! - [`FullStore`] keeps every stage state.
//! - [`CheckpointStore`] keeps step-boundary states every `k` steps and
//!   recomputes a segment on demand by replaying the wave solver.
//! - [`CodecStore`] consolidates states into fixed-length vectors, normalises
//!   them and hands them to a [`VectorCodec`] (autoencoder, quantizer, or an
//!   external process).

mod checkpoint;
mod codec;
mod consolidate;
mod full;
pub mod spill;

use std::sync::Arc;

pub use checkpoint::CheckpointStore;
pub use codec::{CodecStore, VectorCodec};
pub use consolidate::{
    consolidate_space, consolidate_time, scatter_space, scatter_time, ConsolidatedVector, Consolidator, Origin,
    Scheme,
};
pub use full::FullStore;

use crate::error::Result;
use crate::grid::Grid;
use crate::mlp::MlpCodec;
use crate::quant::{ExternalCodec, Quantizer, QuantizerConfig};
use crate::wave::RK_STAGES;

/// Identifies one RK stage state: timestep `t`, stage `s ∈ [0, 4)`. Ordered by `(t, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageKey {
    pub t: usize,
    pub s: usize,
}

impl StageKey {
    pub fn new(t: usize, s: usize) -> Self {
        debug_assert!(s < RK_STAGES);
        Self { t, s }
    }

    pub fn linear(self) -> usize {
        self.t * RK_STAGES + self.s
    }

    pub fn from_linear(i: usize) -> Self {
        Self { t: i / RK_STAGES, s: i % RK_STAGES }
    }
}

/// Memory accounting for a store.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct StoreStats {
    /// Size of everything put, as uncompressed f64.
    pub bytes_logical: u64,
    /// Bytes actually retained, including per-vector metadata.
    pub bytes_resident: u64,
    /// `bytes_logical` over retained payload bytes, excluding per-vector metadata.
    pub compression_ratio_paper: f64,
    /// `bytes_logical / bytes_resident`.
    pub compression_ratio_true: f64,
}

impl StoreStats {
    pub(crate) fn from_bytes(logical: u64, payload: u64, resident: u64) -> Self {
        let ratio = |den: u64| if den == 0 { 0.0 } else { logical as f64 / den as f64 };
        Self {
            bytes_logical: logical,
            bytes_resident: resident,
            compression_ratio_paper: ratio(payload),
            compression_ratio_true: ratio(resident),
        }
    }
}

/// Cumulative work counters a store reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreCounters {
    /// Timesteps re-integrated to serve gets.
    pub recompute_steps: u64,
    pub compress_calls: u64,
    pub decompress_calls: u64,
}

/// Re-runs the forward solver from a step-boundary state.
pub trait StageReplay: Send + Sync {
    fn state_len(&self) -> usize;

    /// Advances `state` (the boundary state of `step`) by one step, emitting its four stage states.
    fn replay_step(&self, step: usize, state: &mut [f64], emit: &mut dyn FnMut(usize, &[f64]));
}

/// Storage contract for forward stage states.
///
/// A forward sweep calls [`put`](Self::put) for every key in increasing
/// order and then [`finish`](Self::finish). After that the store is sealed
/// and [`get`](Self::get) may be called for any key, in any order; reverse
/// order is the fast path. [`rewind`](Self::rewind) marks the start of a new
/// read pass and drops transient caches.
pub trait TrajectoryStore: Send {
    fn kind(&self) -> &'static str;

    /// Hook for backends that recompute states.
    fn bind_replay(&mut self, _replay: Arc<dyn StageReplay>) {}

    fn put(&mut self, key: StageKey, state: &[f64]) -> Result<()>;

    fn finish(&mut self) -> Result<()>;

    fn get(&mut self, key: StageKey, out: &mut [f64]) -> Result<()>;

    fn rewind(&mut self) {}

    fn is_empty(&self) -> bool;

    fn is_sealed(&self) -> bool;

    /// Number of complete timesteps put.
    fn num_steps(&self) -> usize;

    fn stats(&self) -> StoreStats;

    fn counters(&self) -> StoreCounters;

    /// Guaranteed bound on per-vector normalised reconstruction error; `Some(0.0)` for lossless
    /// backends, `None` when no bound is known.
    fn tolerance(&self) -> Option<f64>;
}

/// Builds fresh stores of one backend for each forward sweep.
#[derive(Clone)]
pub enum StoreFactory {
    Full,
    /// Checkpoint interval in timesteps; `None` picks [`CheckpointStore::default_interval`].
    Checkpoint { interval: Option<usize> },
    Mlp { codec: Arc<MlpCodec>, scheme: Scheme },
    Quant { config: QuantizerConfig, scheme: Scheme },
    External { codec: Arc<ExternalCodec>, scheme: Scheme },
}

impl StoreFactory {
    pub fn build(&self, grid: &Grid, num_steps: usize) -> Result<Box<dyn TrajectoryStore>> {
        Ok(match self {
            StoreFactory::Full => Box::new(FullStore::new()),
            StoreFactory::Checkpoint { interval } => {
                Box::new(CheckpointStore::new(interval.unwrap_or_else(|| CheckpointStore::default_interval(num_steps))))
            }
            StoreFactory::Mlp { codec, scheme } => Box::new(CodecStore::new(grid.clone(), *scheme, codec.clone())?),
            StoreFactory::Quant { config, scheme } => {
                Box::new(CodecStore::new(grid.clone(), *scheme, Arc::new(Quantizer::new(*config)?))?)
            }
            StoreFactory::External { codec, scheme } => Box::new(CodecStore::new(grid.clone(), *scheme, codec.clone())?),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            StoreFactory::Full => "full",
            StoreFactory::Checkpoint { .. } => "checkpoint",
            StoreFactory::Mlp { .. } => "ae",
            StoreFactory::Quant { .. } => "quant",
            StoreFactory::External { .. } => "external",
        }
    }

    pub fn is_checkpoint(&self) -> bool {
        matches!(self, StoreFactory::Checkpoint { .. })
    }
}

impl std::fmt::Debug for StoreFactory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}
