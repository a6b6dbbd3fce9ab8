//! Training data for the trajectory codec: forward solves at prior draws,
//! consolidated, subsampled, normalised and written as shard files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mlp::TrainingSet;
use crate::mlp::{denormalize, normalize, NormalizationMeta};
use crate::prior::BiLaplacianPrior;
use crate::store::{ConsolidatedVector, Consolidator, Scheme};
use crate::store::{StageKey, StoreCounters, StoreStats, TrajectoryStore};
use crate::wave::{forward_solve, ForwardConfig};

const MAGIC: &[u8; 4] = b"AETD";
const VERSION: u32 = 1;
pub const SHUFFLE_BUFFER: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub meta: NormalizationMeta,
    pub payload: Vec<f32>,
}

impl DatasetRecord {
    pub fn restore(&self) -> Vec<f64> {
        let y: Vec<f64> = self.payload.iter().map(|&v| v as f64).collect();
        denormalize(&y, &self.meta)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub samples: usize,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self { samples: 10, keep_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardSummary {
    pub path: Option<PathBuf>,
    pub candidates: usize,
    pub records: usize,
    /// The forward solve diverged and nothing was written.
    pub skipped: bool,
}

/// Write-only store that turns every stage state into kept, normalised records.
struct RecordSink<'a> {
    consolidator: Consolidator,
    keep_fraction: f64,
    rng: &'a mut ChaCha8Rng,
    records: Vec<DatasetRecord>,
    candidates: usize,
    steps: usize,
    sealed: bool,
}

impl RecordSink<'_> {
    fn absorb(&mut self, vectors: Vec<ConsolidatedVector>) -> Result<()> {
        for cv in vectors {
            self.candidates += 1;
            if self.rng.random::<f64>() < self.keep_fraction {
                let (y, meta) = normalize(&cv.values)?;
                self.records.push(DatasetRecord { meta, payload: y.iter().map(|&v| v as f32).collect() });
            }
        }
        Ok(())
    }
}

impl TrajectoryStore for RecordSink<'_> {
    fn kind(&self) -> &'static str {
        "datagen"
    }

    fn put(&mut self, key: StageKey, state: &[f64]) -> Result<()> {
        let out = self.consolidator.push(key, state)?;
        if key.s == 3 {
            self.steps = key.t + 1;
        }
        self.absorb(out)
    }

    fn finish(&mut self) -> Result<()> {
        let out = self.consolidator.finish()?;
        self.sealed = true;
        self.absorb(out)
    }

    fn get(&mut self, _key: StageKey, _out: &mut [f64]) -> Result<()> {
        Err(Error::Storage("dataset sink is write-only".into()))
    }

    fn is_empty(&self) -> bool {
        self.candidates == 0 && self.steps == 0
    }

    fn is_sealed(&self) -> bool {
        self.sealed
    }

    fn num_steps(&self) -> usize {
        self.steps
    }

    fn stats(&self) -> StoreStats {
        StoreStats::default()
    }

    fn counters(&self) -> StoreCounters {
        StoreCounters::default()
    }

    fn tolerance(&self) -> Option<f64> {
        None
    }
}

fn validate(cfg: &DatagenConfig) -> Result<()> {
    if cfg.samples == 0 {
        return Err(Error::Config("need at least one prior draw".into()));
    }
    if !(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction must lie in (0, 1], got {}", cfg.keep_fraction)));
    }
    Ok(())
}

/// Runs one prior draw and returns its kept records in shuffled order, or
/// `None` if the forward solve diverged.
pub fn draw_records(
    prior: &BiLaplacianPrior,
    forward: &ForwardConfig,
    scheme: Scheme,
    keep_fraction: f64,
    seed: u64,
    draw: usize,
) -> Result<(Option<Vec<DatasetRecord>>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    let wavespeed = prior.sample_around(prior.mean(), &mut rng)?;
    let mut sink = RecordSink {
        consolidator: Consolidator::new(forward.grid.clone(), scheme)?,
        keep_fraction,
        rng: &mut rng,
        records: Vec::new(),
        candidates: 0,
        steps: 0,
        sealed: false,
    };
    match forward_solve(&wavespeed, forward, &mut sink) {
        Ok(_) => {}
        Err(e @ (Error::Divergence { .. } | Error::InvalidMedium(_))) => {
            log::warn!("prior draw {draw} skipped: {e}");
            return Ok((None, sink.candidates));
        }
        Err(e) => return Err(e),
    }
    let candidates = sink.candidates;
    let mut records = std::mem::take(&mut sink.records);
    for chunk in records.chunks_mut(SHUFFLE_BUFFER) {
        chunk.shuffle(&mut rng);
    }
    Ok((Some(records), candidates))
}

/// Generates one shard per prior draw in `out_dir`. Shards are produced in
/// parallel; contents depend only on the seed and draw index.
pub fn generate(
    prior: &BiLaplacianPrior,
    forward: &ForwardConfig,
    scheme: Scheme,
    cfg: &DatagenConfig,
    out_dir: &Path,
) -> Result<Vec<ShardSummary>> {
    validate(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let n_in = scheme.input_dim(&forward.grid);
    (0..cfg.samples)
        .into_par_iter()
        .map(|draw| {
            let (records, candidates) = draw_records(prior, forward, scheme, cfg.keep_fraction, cfg.seed, draw)?;
            let Some(records) = records else {
                return Ok(ShardSummary { path: None, candidates, records: 0, skipped: true });
            };
            let path = out_dir.join(format!("shard_{draw:04}.aetd"));
            write_shard(&path, n_in, scheme, &records)?;
            Ok(ShardSummary { path: Some(path), candidates, records: records.len(), skipped: false })
        })
        .collect()
}

pub fn write_shard(path: &Path, n_in: usize, scheme: Scheme, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(n_in as u32).to_le_bytes())?;
    w.write_all(&[scheme.tag()])?;
    for r in records {
        if r.payload.len() != n_in {
            return Err(Error::Shape { expected: n_in, got: r.payload.len() });
        }
        w.write_all(&r.meta.offset.to_le_bytes())?;
        w.write_all(&r.meta.scale.to_le_bytes())?;
        for v in &r.payload {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns `(N_in, scheme tag, records)`.
pub fn read_shard(path: &Path) -> Result<(usize, u8, Vec<DatasetRecord>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a dataset shard", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_in = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let tag = bytes[12];
    let rec_len = 16 + 4 * n_in;
    let body = &bytes[13..];
    if body.len() % rec_len != 0 {
        return Err(Error::Format("truncated dataset record".into()));
    }
    let records = body
        .chunks_exact(rec_len)
        .map(|c| DatasetRecord {
            meta: NormalizationMeta {
                offset: f64::from_le_bytes(c[..8].try_into().unwrap()),
                scale: f64::from_le_bytes(c[8..16].try_into().unwrap()),
            },
            payload: c[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        })
        .collect();
    Ok((n_in, tag, records))
}

/// Concatenates shard payloads (in the given path order) into a training set.
pub fn load_training_set(paths: &[PathBuf]) -> Result<TrainingSet> {
    let mut n_in = None;
    let mut data = Vec::new();
    for p in paths {
        let (n, _, records) = read_shard(p)?;
        if *n_in.get_or_insert(n) != n {
            return Err(Error::Data(format!("{} has N_in = {n}, expected {}", p.display(), n_in.unwrap())));
        }
        for r in records {
            data.extend_from_slice(&r.payload);
        }
    }
    TrainingSet::new(n_in.ok_or_else(|| Error::Data("no dataset shards".into()))?, data)
}

/// Shard files in `dir`, sorted by name.
pub fn shard_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "aetd"))
        .collect();
    paths.sort();
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::wave::{SourceKind, SourceSpec, TimeAxis};

    fn tiny(n: usize, steps: usize) -> (BiLaplacianPrior, ForwardConfig) {
        let grid = Grid::new(&[n, n], 1.0 / n as f64, &[4, 4]).unwrap();
        let nodes = grid.node_count();
        let prior = BiLaplacianPrior::new(grid.clone(), 10.0, 0.02, vec![1.0; nodes]).unwrap().with_c_min(0.5);
        let config = ForwardConfig {
            grid: grid.clone(),
            density: vec![1.0; nodes],
            time: TimeAxis { dt: 0.2 / n as f64, num_steps: steps },
            sources: vec![SourceSpec {
                location: vec![0.5, 0.8],
                kind: SourceKind::Ricker,
                t_c: 0.1,
                sigma_t: 0.04,
                sigma_x: 0.1,
                direction: vec![0.0, -1.0],
            }],
            receivers: vec![grid.index(1, n - 2)],
            initial: None,
        };
        (prior, config)
    }

    #[test]
    fn full_keep_counts_every_window_and_records_round_trip() {
        let (prior, config) = tiny(8, 7);
        let scheme = Scheme::Time { window: 4 };
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatagenConfig { samples: 1, keep_fraction: 1.0, seed: 3 };
        let out = generate(&prior, &config, scheme, &cfg, dir.path()).unwrap();
        let per_emit = Consolidator::new(config.grid.clone(), scheme).unwrap().vectors_per_emit();
        assert_eq!(out[0].records, per_emit * (4 * 7usize).div_ceil(4));
        let (n_in, tag, records) = read_shard(out[0].path.as_ref().unwrap()).unwrap();
        assert_eq!((n_in, tag), (64, 1));
        for r in &records {
            assert!(r.payload.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let back = r.restore();
            let (y, meta) = normalize(&back).unwrap();
            let tol = 1e-6 * meta.scale.max(r.meta.scale);
            assert!(y.iter().zip(&r.payload).all(|(a, b)| (a - *b as f64).abs() * meta.scale <= tol));
        }
    }

    #[test]
    fn keep_fraction_is_binomial() {
        let (prior, config) = tiny(8, 209);
        let (records, candidates) = draw_records(&prior, &config, Scheme::Space, 0.1, 17, 0).unwrap();
        let kept = records.unwrap().len() as f64;
        let n = candidates as f64;
        assert!(candidates >= 10_000);
        assert!((kept - 0.1 * n).abs() <= 3.0 * (n * 0.1 * 0.9).sqrt());
    }

    #[test]
    fn same_seed_gives_identical_shards() {
        let (prior, config) = tiny(8, 10);
        let cfg = DatagenConfig { samples: 2, keep_fraction: 0.5, seed: 42 };
        let scheme = Scheme::Time { window: 4 };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&prior, &config, scheme, &cfg, a.path()).unwrap();
        generate(&prior, &config, scheme, &cfg, b.path()).unwrap();
        let (pa, pb) = (shard_paths(a.path()).unwrap(), shard_paths(b.path()).unwrap());
        assert_eq!(pa.len(), 2);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let set = load_training_set(&pa).unwrap();
        assert_eq!(set.n_in, 64);
        let bad = DatagenConfig { keep_fraction: 0.0, ..cfg };
        assert!(generate(&prior, &config, scheme, &bad, a.path()).is_err());
    }
}
