//! Uniform cell-centred grids on `[0, n·h]^d` and their consolidation tiles.

use crate::error::{Error, Result};

/// A uniform 1D or 2D grid. Nodes sit at cell centres `(i + ½)·h`.
///
/// Axis 0 runs horizontally; in 2D axis 1 is vertical with the free
/// surface at the top (`x₁ = n₁·h`). Node storage is row-major with axis 0
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: [usize; 2],
    dim: usize,
    spacing: f64,
    tile: [usize; 2],
}

impl Grid {
    pub fn new(cells: &[usize], spacing: f64, tile_shape: &[usize]) -> Result<Self> {
        let dim = cells.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if tile_shape.len() != dim {
            return Err(Error::InvalidGrid("tile shape must have one entry per axis".into()));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing}")));
        }
        for (a, (&n, &t)) in cells.iter().zip(tile_shape).enumerate() {
            if n < 4 {
                return Err(Error::InvalidGrid(format!("axis {a} has {n} nodes, need at least 4")));
            }
            if t == 0 || n % t != 0 {
                return Err(Error::InvalidGrid(format!("tile extent {t} does not divide {n} on axis {a}")));
            }
        }
        let mut shape = [1, 1];
        let mut tile = [1, 1];
        shape[..dim].copy_from_slice(cells);
        tile[..dim].copy_from_slice(tile_shape);
        Ok(Self { shape, dim, spacing, tile })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Nodes along each active axis.
    pub fn cells(&self) -> &[usize] {
        &self.shape[..self.dim]
    }

    pub fn shape2(&self) -> [usize; 2] {
        self.shape
    }

    pub fn tile_shape(&self) -> &[usize] {
        &self.tile[..self.dim]
    }

    pub fn node_count(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    /// Physical extent along `axis`.
    pub fn extent(&self, axis: usize) -> f64 {
        self.shape[axis] as f64 * self.spacing
    }

    pub fn index(&self, i0: usize, i1: usize) -> usize {
        i1 * self.shape[0] + i0
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        [idx % self.shape[0], idx / self.shape[0]]
    }

    pub fn coord(&self, idx: usize) -> [f64; 2] {
        let [i0, i1] = self.multi_index(idx);
        let h = self.spacing;
        let x1 = if self.dim == 2 { (i1 as f64 + 0.5) * h } else { 0.0 };
        [(i0 as f64 + 0.5) * h, x1]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().enumerate().all(|(a, &xa)| (0.0..=self.extent(a)).contains(&xa))
    }

    /// Nearest node to a point in the domain.
    pub fn nearest_node(&self, x: &[f64]) -> Result<usize> {
        if !self.contains(x) {
            return Err(Error::InvalidGrid(format!("point {x:?} lies outside the domain")));
        }
        let mut ij = [0usize; 2];
        for a in 0..self.dim {
            let k = (x[a] / self.spacing - 0.5).round().max(0.0) as usize;
            ij[a] = k.min(self.shape[a] - 1);
        }
        Ok(self.index(ij[0], ij[1]))
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let ij = self.multi_index(idx);
        (0..self.dim).any(|a| ij[a] == 0 || ij[a] == self.shape[a] - 1)
    }

    /// 1.0 on interior nodes, 0.0 on boundary nodes.
    pub fn interior_mask(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| if self.is_boundary(i) { 0.0 } else { 1.0 }).collect()
    }

    /// Cell volume `hᵈ`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    pub fn tiles_per_axis(&self) -> [usize; 2] {
        [self.shape[0] / self.tile[0], self.shape[1] / self.tile[1]]
    }

    pub fn tile_count(&self) -> usize {
        let [a, b] = self.tiles_per_axis();
        a * b
    }

    pub fn tile_nodes(&self) -> usize {
        self.tile[0] * self.tile[1]
    }

    /// Global node indices of `tile`, in the canonical intra-tile order
    /// (row-major, axis 0 fastest). The order is identical for every tile.
    pub fn tile_node_indices(&self, tile: usize) -> Vec<usize> {
        let [ta, _] = self.tiles_per_axis();
        let (t0, t1) = (tile % ta, tile / ta);
        let mut out = Vec::with_capacity(self.tile_nodes());
        for j in 0..self.tile[1] {
            for i in 0..self.tile[0] {
                out.push(self.index(t0 * self.tile[0] + i, t1 * self.tile[1] + j));
            }
        }
        out
    }

    /// Returns a copy of this grid with a different tile shape.
    pub fn with_tile_shape(&self, tile_shape: &[usize]) -> Result<Self> {
        Grid::new(self.cells(), self.spacing, tile_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(&[3], 0.1, &[1]).is_err());
        assert!(Grid::new(&[8, 8], 0.0, &[4, 4]).is_err());
        assert!(Grid::new(&[8, 8], 0.1, &[3, 4]).is_err());
        assert!(Grid::new(&[8, 8, 8], 0.1, &[4, 4, 4]).is_err());
    }

    #[test]
    fn tiles_partition_nodes() {
        let g = Grid::new(&[8, 12], 0.1, &[4, 4]).unwrap();
        assert_eq!(g.tile_count(), 6);
        let mut seen = vec![false; g.node_count()];
        for t in 0..g.tile_count() {
            for i in g.tile_node_indices(t) {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn nearest_node_and_boundary() {
        let g = Grid::new(&[10, 10], 0.1, &[5, 5]).unwrap();
        let i = g.nearest_node(&[0.26, 0.95]).unwrap();
        assert_eq!(g.multi_index(i), [2, 9]);
        assert!(g.is_boundary(i));
        assert!(!g.is_boundary(g.index(4, 4)));
        assert!(g.nearest_node(&[1.2, 0.5]).is_err());
    }
}
