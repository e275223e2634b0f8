//! Uniform spatial hash grid for radius and nearest queries over point sets.
//! Query results are deterministic: cells are visited in a fixed relative
//! order and items keep insertion order within a cell.

use std::collections::HashMap;

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<(i32, i32, i32), Vec<u32>>,
    points: Vec<Vector3<f64>>,
}

impl SpatialGrid {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0);
        Self {
            cell,
            cells: HashMap::new(),
            points: Vec::new(),
        }
    }

    pub fn from_points<'a>(cell: f64, points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut g = Self::new(cell);
        for p in points {
            g.insert(*p);
        }
        g
    }

    fn key(&self, p: &Vector3<f64>) -> (i32, i32, i32) {
        (
            (p.x / self.cell).floor() as i32,
            (p.y / self.cell).floor() as i32,
            (p.z / self.cell).floor() as i32,
        )
    }

    /// Insert a point; its index is the insertion count.
    pub fn insert(&mut self, p: Vector3<f64>) -> u32 {
        let idx = self.points.len() as u32;
        self.cells.entry(self.key(&p)).or_default().push(idx);
        self.points.push(p);
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: u32) -> &Vector3<f64> {
        &self.points[idx as usize]
    }

    /// Visit indices of all points within `radius` of `p`, in deterministic
    /// order. `radius` must not exceed the cell size times the scanned ring
    /// (one ring, so radius <= cell).
    pub fn for_each_within(&self, p: &Vector3<f64>, radius: f64, mut f: impl FnMut(u32, f64)) {
        debug_assert!(radius <= self.cell + 1e-12, "radius exceeds one-ring reach");
        let (cx, cy, cz) = self.key(p);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(items) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &idx in items {
                            let d2 = (self.points[idx as usize] - p).norm_squared();
                            if d2 <= r2 {
                                f(idx, d2.sqrt());
                            }
                        }
                    }
                }
            }
        }
    }

    /// Nearest stored point within one cell ring of `p`; falls back to a
    /// full scan when the ring is empty. Ties broken by insertion index.
    pub fn nearest(&self, p: &Vector3<f64>) -> Option<(u32, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best: Option<(f64, u32)> = None;
        let (cx, cy, cz) = self.key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(items) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &idx in items {
                            let d2 = (self.points[idx as usize] - p).norm_squared();
                            if best.map_or(true, |(bd, bi)| d2 < bd || (d2 == bd && idx < bi)) {
                                best = Some((d2, idx));
                            }
                        }
                    }
                }
            }
        }
        // Points may all lie beyond the one-ring reach.
        let fallback_needed = match best {
            Some((d2, _)) => d2.sqrt() > self.cell,
            None => true,
        };
        if fallback_needed {
            best = self
                .points
                .iter()
                .enumerate()
                .map(|(i, q)| ((q - p).norm_squared(), i as u32))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        best.map(|(d2, idx)| (idx, d2.sqrt()))
    }
}
