use std::path::Path;
use std::sync::Arc;

use super::consolidate::{scatter_space, scatter_time, ConsolidatedVector, Consolidator, Origin, Scheme};
use super::spill::{self, RecordHeader, SpillHeader, SpillRecord};
use super::{StageKey, StoreCounters, StoreStats, TrajectoryStore};
use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::mlp::{denormalize_in_place, normalize, NormalizationMeta};
use crate::wave::RK_STAGES;

/// Bytes of per-vector normalisation metadata (offset and scale as f64).
pub const META_BYTES: u64 = 16;

/// A fixed-length vector compressor operating on normalised vectors.
pub trait VectorCodec: Send + Sync {
    fn name(&self) -> &'static str;

    /// Required input length, if the codec is shape-specific.
    fn input_dim(&self) -> Option<usize>;

    /// Encodes `data.len() / n_in` row-stacked vectors, one payload each.
    fn encode_batch(&self, n_in: usize, data: &[f64]) -> Result<Vec<Vec<u8>>>;

    /// Decodes payloads into row-stacked vectors of length `n_in`.
    fn decode_batch(&self, n_in: usize, payloads: &[&[u8]]) -> Result<Vec<f64>>;

    /// Bound on elementwise error in the normalised domain, when the codec guarantees one.
    fn tolerance(&self) -> Option<f64>;
}

#[derive(Debug, Clone)]
struct Entry {
    meta: NormalizationMeta,
    payload: Vec<u8>,
}

/// Lossy store: consolidates, normalises and encodes every forward stage state.
pub struct CodecStore<C: VectorCodec + ?Sized> {
    codec: Arc<C>,
    consolidator: Consolidator,
    entries: Vec<Entry>,
    state_len: usize,
    puts: usize,
    sealed: bool,
    counters: StoreCounters,
    /// Decoded vectors of the most recently read window (time scheme).
    cached: Option<(usize, Vec<ConsolidatedVector>)>,
}

impl<C: VectorCodec + ?Sized> CodecStore<C> {
    pub fn new(grid: Grid, scheme: Scheme, codec: Arc<C>) -> Result<Self> {
        let n_in = scheme.input_dim(&grid);
        if let Some(want) = codec.input_dim() {
            if want != n_in {
                return Err(Error::Config(format!(
                    "{} codec expects vectors of length {want}, consolidation gives {n_in}",
                    codec.name()
                )));
            }
        }
        let state_len = (grid.dim() + 1) * grid.node_count();
        Ok(Self {
            codec,
            consolidator: Consolidator::new(grid, scheme)?,
            entries: Vec::new(),
            state_len,
            puts: 0,
            sealed: false,
            counters: StoreCounters::default(),
            cached: None,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.consolidator.scheme()
    }

    pub fn input_dim(&self) -> usize {
        self.consolidator.input_dim()
    }

    fn store_vectors(&mut self, vectors: Vec<ConsolidatedVector>) -> Result<()> {
        if vectors.is_empty() {
            return Ok(());
        }
        let n_in = self.input_dim();
        let mut data = Vec::with_capacity(vectors.len() * n_in);
        let mut metas = Vec::with_capacity(vectors.len());
        for cv in &vectors {
            let (y, meta) = normalize(&cv.values)?;
            data.extend_from_slice(&y);
            metas.push(meta);
        }
        let payloads = self.codec.encode_batch(n_in, &data)?;
        check_len(vectors.len(), payloads.len())?;
        self.counters.compress_calls += vectors.len() as u64;
        self.entries.extend(metas.into_iter().zip(payloads).map(|(meta, payload)| Entry { meta, payload }));
        Ok(())
    }

    fn decode_range(&mut self, first: usize, count: usize, first_key: StageKey, pad: usize) -> Result<Vec<ConsolidatedVector>> {
        let n_in = self.input_dim();
        let entries = self
            .entries
            .get(first..first + count)
            .ok_or_else(|| Error::Storage(format!("no encoded data for {first_key:?}")))?;
        let payloads: Vec<&[u8]> = entries.iter().map(|e| e.payload.as_slice()).collect();
        let mut flat = self.codec.decode_batch(n_in, &payloads)?;
        check_len(count * n_in, flat.len())?;
        self.counters.decompress_calls += count as u64;
        let tiles = self.consolidator.grid().tile_count();
        let scheme = self.scheme();
        let out = flat
            .chunks_exact_mut(n_in)
            .zip(entries)
            .enumerate()
            .map(|(j, (chunk, e))| {
                denormalize_in_place(chunk, &e.meta);
                ConsolidatedVector {
                    values: chunk.to_vec(),
                    scheme,
                    origin: Origin { field: j / tiles, tile: j % tiles, first: first_key, pad },
                }
            })
            .collect();
        Ok(out)
    }

    /// Writes every encoded vector and its normalisation metadata to a spill file.
    pub fn spill(&self, path: &Path) -> Result<()> {
        let per = self.consolidator.vectors_per_emit();
        let tiles = self.consolidator.grid().tile_count();
        let stages = self.scheme().stages_per_vector();
        let header = SpillHeader { n_in: self.input_dim() as u32, scheme: self.scheme().tag() };
        let records = self.entries.iter().enumerate().map(|(i, e)| {
            let key = StageKey::from_linear((i / per) * stages);
            let j = i % per;
            SpillRecord {
                header: RecordHeader {
                    t: key.t as u32,
                    s: key.s as u8,
                    field: (j / tiles) as u8,
                    tile: (j % tiles) as u32,
                    offset: e.meta.offset,
                    scale: e.meta.scale,
                },
                payload: e.payload.clone(),
            }
        });
        spill::write_file(path, &header, records)
    }

    /// Rebuilds a sealed store holding `num_steps` timesteps from a spill file.
    pub fn load(path: &Path, grid: Grid, scheme: Scheme, codec: Arc<C>, num_steps: usize) -> Result<Self> {
        let mut store = Self::new(grid, scheme, codec)?;
        let (header, records) = spill::read_file(path)?;
        if header.scheme != scheme.tag() || header.n_in as usize != store.input_dim() {
            return Err(Error::Format("spill file does not match the store layout".into()));
        }
        let windows = (num_steps * RK_STAGES).div_ceil(scheme.stages_per_vector());
        check_len(windows * store.consolidator.vectors_per_emit(), records.len())?;
        store.entries = records
            .into_iter()
            .map(|r| Entry { meta: NormalizationMeta { offset: r.header.offset, scale: r.header.scale }, payload: r.payload })
            .collect();
        store.puts = num_steps * RK_STAGES;
        store.sealed = true;
        Ok(store)
    }
}

impl<C: VectorCodec + ?Sized> TrajectoryStore for CodecStore<C> {
    fn kind(&self) -> &'static str {
        self.codec.name()
    }

    fn put(&mut self, key: StageKey, state: &[f64]) -> Result<()> {
        if self.sealed {
            return Err(Error::Storage("put into a sealed store".into()));
        }
        if key.linear() != self.puts {
            return Err(Error::Storage(format!("out-of-order put of {key:?}")));
        }
        check_len(self.state_len, state.len())?;
        let vectors = self.consolidator.push(key, state)?;
        self.store_vectors(vectors)?;
        self.puts += 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if !self.puts.is_multiple_of(RK_STAGES) {
            return Err(Error::Storage("sweep ended mid-step".into()));
        }
        let tail = self.consolidator.finish()?;
        self.store_vectors(tail)?;
        self.sealed = true;
        Ok(())
    }

    fn get(&mut self, key: StageKey, out: &mut [f64]) -> Result<()> {
        if !self.sealed {
            return Err(Error::Storage("get before the forward sweep finished".into()));
        }
        if key.linear() >= self.puts {
            return Err(Error::Storage(format!("{key:?} was never stored")));
        }
        check_len(self.state_len, out.len())?;
        let per = self.consolidator.vectors_per_emit();
        let grid = self.consolidator.grid().clone();
        match self.scheme() {
            Scheme::Space => {
                let vectors = self.decode_range(key.linear() * per, per, key, 0)?;
                for cv in &vectors {
                    scatter_space(&grid, cv, out)?;
                }
            }
            Scheme::Time { window } => {
                let w = key.linear() / window;
                if self.cached.as_ref().map(|(cw, _)| *cw) != Some(w) {
                    let first = StageKey::from_linear(w * window);
                    let pad = ((w + 1) * window).saturating_sub(self.puts);
                    let vectors = self.decode_range(w * per, per, first, pad)?;
                    self.cached = Some((w, vectors));
                }
                let (_, vectors) = self.cached.as_ref().expect("window cached above");
                for cv in vectors {
                    scatter_time(&grid, cv, key.linear() - w * window, out)?;
                }
            }
        }
        Ok(())
    }

    fn rewind(&mut self) {
        self.cached = None;
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
        let payload: u64 = self.entries.iter().map(|e| e.payload.len() as u64).sum();
        let resident = payload + META_BYTES * self.entries.len() as u64;
        StoreStats::from_bytes(logical, payload, resident)
    }

    fn counters(&self) -> StoreCounters {
        self.counters
    }

    fn tolerance(&self) -> Option<f64> {
        self.codec.tolerance()
    }
}
