use std::sync::Arc;

use super::{StageKey, StageReplay, StoreCounters, StoreStats, TrajectoryStore};
use crate::error::{check_len, Error, Result};
use crate::wave::RK_STAGES;

/// Uniform-interval checkpointing.
///
/// The stage-0 state of every `interval`-th step is retained. A get for a key
/// outside the cached segment replays the whole segment from its checkpoint,
/// so a full reverse traversal re-integrates exactly `T` steps.
pub struct CheckpointStore {
    interval: usize,
    replay: Option<Arc<dyn StageReplay>>,
    checkpoints: Vec<Vec<f64>>,
    puts: usize,
    state_len: usize,
    sealed: bool,
    cached_segment: Option<usize>,
    cache: Vec<Vec<f64>>,
    recompute_steps: u64,
}

impl CheckpointStore {
    pub fn new(interval: usize) -> Self {
        Self {
            interval: interval.max(1),
            replay: None,
            checkpoints: Vec::new(),
            puts: 0,
            state_len: 0,
            sealed: false,
            cached_segment: None,
            cache: Vec::new(),
            recompute_steps: 0,
        }
    }

    /// `⌈√(4T)⌉` stages, rounded up to whole timesteps.
    pub fn default_interval(num_steps: usize) -> usize {
        let stages = ((4 * num_steps) as f64).sqrt().ceil() as usize;
        stages.div_ceil(RK_STAGES).max(1)
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn checkpoint_count(&self) -> usize {
        self.checkpoints.len()
    }

    fn load_segment(&mut self, seg: usize) -> Result<()> {
        let replay = self
            .replay
            .clone()
            .ok_or_else(|| Error::Storage("checkpoint store has no solver bound for recomputation".into()))?;
        let steps = self.puts / RK_STAGES;
        let start = seg * self.interval;
        let end = ((seg + 1) * self.interval).min(steps);
        let mut state = self.checkpoints[seg].clone();
        let needed = (end - start) * RK_STAGES;
        self.cache.resize_with(needed, Vec::new);
        let cache = &mut self.cache;
        for step in start..end {
            let base = (step - start) * RK_STAGES;
            replay.replay_step(step, &mut state, &mut |s, st| {
                let slot = &mut cache[base + s];
                slot.clear();
                slot.extend_from_slice(st);
            });
        }
        self.recompute_steps += (end - start) as u64;
        self.cached_segment = Some(seg);
        Ok(())
    }
}

impl TrajectoryStore for CheckpointStore {
    fn kind(&self) -> &'static str {
        "checkpoint"
    }

    fn bind_replay(&mut self, replay: Arc<dyn StageReplay>) {
        self.replay = Some(replay);
    }

    fn put(&mut self, key: StageKey, state: &[f64]) -> Result<()> {
        if self.sealed {
            return Err(Error::Storage("put into a sealed store".into()));
        }
        if key.linear() != self.puts {
            return Err(Error::Storage(format!("out-of-order put of {key:?}")));
        }
        if self.puts == 0 {
            self.state_len = state.len();
        } else {
            check_len(self.state_len, state.len())?;
        }
        if key.s == 0 && key.t.is_multiple_of(self.interval) {
            self.checkpoints.push(state.to_vec());
        }
        self.puts += 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if !self.puts.is_multiple_of(RK_STAGES) {
            return Err(Error::Storage("sweep ended mid-step".into()));
        }
        self.sealed = true;
        Ok(())
    }

    fn get(&mut self, key: StageKey, out: &mut [f64]) -> Result<()> {
        if !self.sealed {
            return Err(Error::Storage("get before the forward sweep finished".into()));
        }
        if key.linear() >= self.puts || key.s >= RK_STAGES {
            return Err(Error::Storage(format!("{key:?} is beyond the stored trajectory")));
        }
        let seg = key.t / self.interval;
        if self.cached_segment != Some(seg) {
            self.load_segment(seg)?;
        }
        let local = (key.t - seg * self.interval) * RK_STAGES + key.s;
        check_len(self.state_len, out.len())?;
        out.copy_from_slice(&self.cache[local]);
        Ok(())
    }

    fn rewind(&mut self) {
        self.cached_segment = None;
    }

    fn is_empty(&self) -> bool {
        self.puts == 0
    }

    fn is_sealed(&self) -> bool {
        self.sealed
    }

    fn num_steps(&self) -> usize {
        self.puts / RK_STAGES
    }

    fn stats(&self) -> StoreStats {
        let logical = (self.puts * self.state_len * 8) as u64;
        let resident = (self.checkpoints.len() * self.state_len * 8) as u64;
        StoreStats::from_bytes(logical, resident, resident)
    }

    fn counters(&self) -> StoreCounters {
        StoreCounters { recompute_steps: self.recompute_steps, ..Default::default() }
    }

    fn tolerance(&self) -> Option<f64> {
        Some(0.0)
    }
}
