//! Fixed-length flattening of state degrees of freedom for codecs.
//!
//! Each physical field (every velocity component and the dilatation) is
//! consolidated independently. The intra-tile node order is the one returned
//! by [`Grid::tile_node_indices`], identical on every tile.

use super::StageKey;
use crate::error::{check_len, Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum Scheme {
    /// One tile of one field at one stage key.
    Space,
    /// One tile of one field over `window` consecutive stage keys.
    Time { window: usize },
}

impl Scheme {
    pub fn input_dim(&self, grid: &Grid) -> usize {
        match *self {
            Scheme::Space => grid.tile_nodes(),
            Scheme::Time { window } => grid.tile_nodes() * window,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Scheme::Space => 0,
            Scheme::Time { .. } => 1,
        }
    }

    pub fn stages_per_vector(&self) -> usize {
        match *self {
            Scheme::Space => 1,
            Scheme::Time { window } => window,
        }
    }
}

/// Where a consolidated vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Origin {
    pub field: usize,
    pub tile: usize,
    /// First stage key covered.
    pub first: StageKey,
    /// Zero-padded trailing stages (time scheme, final window only).
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidatedVector {
    pub values: Vec<f64>,
    pub scheme: Scheme,
    pub origin: Origin,
}

fn field_count(grid: &Grid, state: &[f64]) -> Result<usize> {
    let n = grid.node_count();
    if !state.len().is_multiple_of(n) || state.len() / n != grid.dim() + 1 {
        return Err(Error::Shape { expected: (grid.dim() + 1) * n, got: state.len() });
    }
    Ok(grid.dim() + 1)
}

/// Gathers `field` on `tile` of `state` into a vector of `tile_nodes` entries.
pub fn consolidate_space(grid: &Grid, state: &[f64], key: StageKey, field: usize, tile: usize) -> Result<ConsolidatedVector> {
    let fields = field_count(grid, state)?;
    if field >= fields || tile >= grid.tile_count() {
        return Err(Error::Storage(format!("field {field} / tile {tile} out of range")));
    }
    let base = field * grid.node_count();
    let values = grid.tile_node_indices(tile).into_iter().map(|i| state[base + i]).collect();
    Ok(ConsolidatedVector { values, scheme: Scheme::Space, origin: Origin { field, tile, first: key, pad: 0 } })
}

/// Inverse of [`consolidate_space`]: writes the vector back into `state`.
pub fn scatter_space(grid: &Grid, cv: &ConsolidatedVector, state: &mut [f64]) -> Result<()> {
    field_count(grid, state)?;
    check_len(grid.tile_nodes(), cv.values.len())?;
    let base = cv.origin.field * grid.node_count();
    for (v, i) in cv.values.iter().zip(grid.tile_node_indices(cv.origin.tile)) {
        state[base + i] = *v;
    }
    Ok(())
}

/// Gathers `field` on `tile` over consecutive stage states starting at `first`.
/// Fewer than `window` states are zero-padded and the pad length recorded.
pub fn consolidate_time(
    grid: &Grid,
    states: &[&[f64]],
    window: usize,
    first: StageKey,
    field: usize,
    tile: usize,
) -> Result<ConsolidatedVector> {
    if states.is_empty() || states.len() > window {
        return Err(Error::Storage(format!("time window holds {} states, capacity {window}", states.len())));
    }
    let nodes = grid.tile_node_indices(tile);
    let base = field * grid.node_count();
    let mut values = Vec::with_capacity(window * nodes.len());
    for st in states {
        field_count(grid, st)?;
        values.extend(nodes.iter().map(|&i| st[base + i]));
    }
    values.resize(window * nodes.len(), 0.0);
    Ok(ConsolidatedVector {
        values,
        scheme: Scheme::Time { window },
        origin: Origin { field, tile, first, pad: window - states.len() },
    })
}

/// Writes stage `stage` (0-based within the window) of a time-consolidated vector into `state`.
pub fn scatter_time(grid: &Grid, cv: &ConsolidatedVector, stage: usize, state: &mut [f64]) -> Result<()> {
    let Scheme::Time { window } = cv.scheme else {
        return Err(Error::Storage("not a time-consolidated vector".into()));
    };
    field_count(grid, state)?;
    let tn = grid.tile_nodes();
    check_len(window * tn, cv.values.len())?;
    if stage >= window - cv.origin.pad {
        return Err(Error::Storage(format!("stage {stage} lies in the padded region")));
    }
    let base = cv.origin.field * grid.node_count();
    let chunk = &cv.values[stage * tn..(stage + 1) * tn];
    for (v, i) in chunk.iter().zip(grid.tile_node_indices(cv.origin.tile)) {
        state[base + i] = *v;
    }
    Ok(())
}

/// Streams stage states into consolidated vectors as a forward sweep proceeds.
pub struct Consolidator {
    grid: Grid,
    scheme: Scheme,
    buffer: Vec<Vec<f64>>,
    window_start: Option<StageKey>,
}

impl Consolidator {
    pub fn new(grid: Grid, scheme: Scheme) -> Result<Self> {
        if let Scheme::Time { window } = scheme {
            if window == 0 {
                return Err(Error::Config("time window must be positive".into()));
            }
        }
        Ok(Self { grid, scheme, buffer: Vec::new(), window_start: None })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn input_dim(&self) -> usize {
        self.scheme.input_dim(&self.grid)
    }

    /// Vectors emitted per filled window or key.
    pub fn vectors_per_emit(&self) -> usize {
        (self.grid.dim() + 1) * self.grid.tile_count()
    }

    fn all_fields_tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let tiles = self.grid.tile_count();
        (0..self.grid.dim() + 1).flat_map(move |f| (0..tiles).map(move |t| (f, t)))
    }

    /// Accepts the next stage state. Returns the vectors completed by it, if any.
    pub fn push(&mut self, key: StageKey, state: &[f64]) -> Result<Vec<ConsolidatedVector>> {
        match self.scheme {
            Scheme::Space => {
                self.all_fields_tiles().map(|(f, t)| consolidate_space(&self.grid, state, key, f, t)).collect()
            }
            Scheme::Time { window } => {
                field_count(&self.grid, state)?;
                if self.buffer.is_empty() {
                    self.window_start = Some(key);
                }
                self.buffer.push(state.to_vec());
                if self.buffer.len() == window {
                    self.flush(window)
                } else {
                    Ok(Vec::new())
                }
            }
        }
    }

    /// Emits the final partial window, zero-padded.
    pub fn finish(&mut self) -> Result<Vec<ConsolidatedVector>> {
        match self.scheme {
            Scheme::Time { window } if !self.buffer.is_empty() => self.flush(window),
            _ => Ok(Vec::new()),
        }
    }

    fn flush(&mut self, window: usize) -> Result<Vec<ConsolidatedVector>> {
        let first = self.window_start.take().expect("window start recorded with first state");
        let refs: Vec<&[f64]> = self.buffer.iter().map(|s| s.as_slice()).collect();
        let out = self
            .all_fields_tiles()
            .map(|(f, t)| consolidate_time(&self.grid, &refs, window, first, f, t))
            .collect::<Result<Vec<_>>>()?;
        self.buffer.clear();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(grid: &Grid, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..(grid.dim() + 1) * grid.node_count()).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn space_round_trip_is_identity() {
        let g = Grid::new(&[32, 32], 0.1, &[16, 16]).unwrap();
        let x = random_state(&g, 1);
        let mut back = vec![0.0; x.len()];
        for f in 0..3 {
            for t in 0..g.tile_count() {
                let cv = consolidate_space(&g, &x, StageKey::new(0, 0), f, t).unwrap();
                assert_eq!(cv.values.len(), 256);
                scatter_space(&g, &cv, &mut back).unwrap();
            }
        }
        assert_eq!(x, back);
    }

    #[test]
    fn space_permutation_is_tile_independent() {
        let g = Grid::new(&[8, 8], 0.1, &[4, 4]).unwrap();
        // Field value depends only on position within the tile.
        let mut x = vec![0.0; 3 * 64];
        for i in 0..64 {
            let [a, b] = g.multi_index(i);
            x[64 + i] = ((a % 4) * 10 + b % 4) as f64;
        }
        let va = consolidate_space(&g, &x, StageKey::new(0, 0), 1, 0).unwrap();
        let vb = consolidate_space(&g, &x, StageKey::new(0, 0), 1, 3).unwrap();
        assert_eq!(va.values, vb.values);
    }

    #[test]
    fn time_round_trip_and_padding() {
        let g = Grid::new(&[8, 8], 0.1, &[4, 4]).unwrap();
        let mut c = Consolidator::new(g.clone(), Scheme::Time { window: 16 }).unwrap();
        assert_eq!(c.input_dim(), 256);
        let states: Vec<Vec<f64>> = (0..20).map(|i| random_state(&g, i)).collect();
        let mut vecs = Vec::new();
        for (i, s) in states.iter().enumerate() {
            vecs.extend(c.push(StageKey::from_linear(i), s).unwrap());
        }
        assert_eq!(vecs.len(), 3 * 4);
        let tail = c.finish().unwrap();
        assert_eq!(tail.len(), 12);
        assert_eq!(tail[0].origin.pad, 12);
        assert_eq!(tail[0].origin.first, StageKey::from_linear(16));
        vecs.extend(tail);
        for (i, s) in states.iter().enumerate() {
            let mut back = vec![0.0; s.len()];
            let w = i / 16;
            for cv in vecs.iter().filter(|cv| cv.origin.first.linear() == w * 16) {
                scatter_time(&g, cv, i % 16, &mut back).unwrap();
            }
            assert_eq!(&back, s);
        }
        assert!(scatter_time(&g, &vecs[12], 5, &mut vec![0.0; 192]).is_err());
    }

    #[test]
    fn time_window_overflow_rejected() {
        let g = Grid::new(&[4], 0.1, &[4]).unwrap();
        let s = vec![0.0; 8];
        let refs = vec![s.as_slice(); 5];
        assert!(consolidate_time(&g, &refs, 4, StageKey::new(0, 0), 0, 0).is_err());
    }
}
