//! Uniform spatial grid over (x, y) for radius-restricted candidate lookup.
//!
//! Cells are keyed by `floor(coord / cell_size)`, stored in a BTreeMap so
//! iteration order (and therefore every consumer of candidate lists) is
//! deterministic.

use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell_size: f64,
    cells: BTreeMap<(i64, i64), Vec<usize>>,
    len: usize,
}

impl SpatialGrid {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        SpatialGrid {
            cell_size,
            cells: BTreeMap::new(),
            len: 0,
        }
    }

    /// Build a grid from (x, y) positions; the stored value is the slot index.
    pub fn build(cell_size: f64, positions: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut grid = SpatialGrid::new(cell_size);
        for (i, (x, y)) in positions.enumerate() {
            grid.insert(x, y, i);
        }
        grid
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x / self.cell_size).floor() as i64,
            (y / self.cell_size).floor() as i64,
        )
    }

    pub fn insert(&mut self, x: f64, y: f64, index: usize) {
        let key = self.key(x, y);
        self.cells.entry(key).or_default().push(index);
        self.len += 1;
    }

    /// Indices stored in every cell intersecting the disc of radius `radius`
    /// around (x, y), in ascending index order. Callers still need an exact
    /// distance filter; this only prunes far cells.
    pub fn candidates_within(&self, x: f64, y: f64, radius: f64) -> Vec<usize> {
        let lo = self.key(x - radius, y - radius);
        let hi = self.key(x + radius, y + radius);
        let mut out = Vec::new();
        let spanned = (hi.0 - lo.0 + 1) as i128 * (hi.1 - lo.1 + 1) as i128;
        if spanned > self.cells.len() as i128 {
            // Huge radii would walk mostly empty cells; scan the occupied
            // cells instead.
            for (&(cx, cy), v) in &self.cells {
                if cx >= lo.0 && cx <= hi.0 && cy >= lo.1 && cy <= hi.1 {
                    out.extend_from_slice(v);
                }
            }
        } else {
            for cx in lo.0..=hi.0 {
                for cy in lo.1..=hi.1 {
                    if let Some(v) = self.cells.get(&(cx, cy)) {
                        out.extend_from_slice(v);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// All (cell, members) pairs, for audits.
    pub fn cells(&self) -> impl Iterator<Item = (&(i64, i64), &Vec<usize>)> {
        self.cells.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_candidates_superset_of_true_hits() {
        let pts: Vec<(f64, f64)> = (0..100)
            .map(|i| ((i % 10) as f64 * 3.0, (i / 10) as f64 * 3.0))
            .collect();
        let grid = SpatialGrid::build(5.0, pts.iter().copied());
        let (qx, qy, r) = (14.0, 8.0, 6.0);
        let cand = grid.candidates_within(qx, qy, r);
        for (i, &(x, y)) in pts.iter().enumerate() {
            let d = ((x - qx).powi(2) + (y - qy).powi(2)).sqrt();
            if d <= r {
                assert!(cand.contains(&i), "missing true hit {i}");
            }
        }
    }

    #[test]
    fn membership_audit_counts_everything_once() {
        let pts: Vec<(f64, f64)> = (0..57).map(|i| (i as f64 * 0.7, -(i as f64) * 1.3)).collect();
        let grid = SpatialGrid::build(25.0, pts.iter().copied());
        let mut seen: Vec<usize> = grid.cells().flat_map(|(_, v)| v.iter().copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..57).collect::<Vec<_>>());
        assert_eq!(grid.len(), 57);
    }

    #[test]
    fn negative_coordinates_bin_correctly() {
        let grid = SpatialGrid::build(10.0, [(-0.5, -0.5), (0.5, 0.5)].into_iter());
        // Both within radius 2 of the origin.
        assert_eq!(grid.candidates_within(0.0, 0.0, 2.0), vec![0, 1]);
    }
}
