use std::path::Path;

use super::spill::{self, RecordHeader, SpillHeader, SpillRecord, SCHEME_RAW};
use super::{StageKey, StoreCounters, StoreStats, TrajectoryStore};
use crate::error::{check_len, Error, Result};

/// Keeps every stage state verbatim.
#[derive(Debug, Default)]
pub struct FullStore {
    states: Vec<Vec<f64>>,
    state_len: usize,
    sealed: bool,
}

impl FullStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes every stage state to a spill file.
    pub fn spill(&self, path: &Path) -> Result<()> {
        let header = SpillHeader { n_in: self.state_len as u32, scheme: SCHEME_RAW };
        let records = self.states.iter().enumerate().map(|(i, st)| {
            let key = StageKey::from_linear(i);
            SpillRecord {
                header: RecordHeader { t: key.t as u32, s: key.s as u8, field: 0, tile: 0, offset: 0.0, scale: 1.0 },
                payload: st.iter().flat_map(|v| v.to_le_bytes()).collect(),
            }
        });
        spill::write_file(path, &header, records)
    }

    /// Restores a sealed store from a spill file written by [`FullStore::spill`].
    pub fn load(path: &Path) -> Result<Self> {
        let (header, records) = spill::read_file(path)?;
        if header.scheme != SCHEME_RAW {
            return Err(Error::Format("spill file does not hold raw states".into()));
        }
        let mut store = FullStore::new();
        for (i, rec) in records.into_iter().enumerate() {
            let key = StageKey::new(rec.header.t as usize, rec.header.s as usize);
            if key.linear() != i {
                return Err(Error::Format("spill records out of order".into()));
            }
            let state = spill::f64s_from_le(&rec.payload)?;
            check_len(header.n_in as usize, state.len())?;
            store.put(key, &state)?;
        }
        store.finish()?;
        Ok(store)
    }
}

impl TrajectoryStore for FullStore {
    fn kind(&self) -> &'static str {
        "full"
    }

    fn put(&mut self, key: StageKey, state: &[f64]) -> Result<()> {
        if self.sealed {
            return Err(Error::Storage("put into a sealed store".into()));
        }
        if key.linear() != self.states.len() {
            return Err(Error::Storage(format!("out-of-order put of {key:?}")));
        }
        if self.states.is_empty() {
            self.state_len = state.len();
        } else {
            check_len(self.state_len, state.len())?;
        }
        self.states.push(state.to_vec());
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if !self.states.len().is_multiple_of(4) {
            return Err(Error::Storage("sweep ended mid-step".into()));
        }
        self.sealed = true;
        Ok(())
    }

    fn get(&mut self, key: StageKey, out: &mut [f64]) -> Result<()> {
        if !self.sealed {
            return Err(Error::Storage("get before the forward sweep finished".into()));
        }
        let st = self
            .states
            .get(key.linear())
            .ok_or_else(|| Error::Storage(format!("{key:?} was never stored")))?;
        check_len(st.len(), out.len())?;
        out.copy_from_slice(st);
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn is_sealed(&self) -> bool {
        self.sealed
    }

    fn num_steps(&self) -> usize {
        self.states.len() / 4
    }

    fn stats(&self) -> StoreStats {
        let bytes = (self.states.len() * self.state_len * 8) as u64;
        StoreStats::from_bytes(bytes, bytes, bytes)
    }

    fn counters(&self) -> StoreCounters {
        StoreCounters::default()
    }

    fn tolerance(&self) -> Option<f64> {
        Some(0.0)
    }
}
