use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{iou, BoundingBox};
use crate::error::{Error, Result};

/// Grid layout of the detection head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells per side.
    pub k: usize,
    /// Normalized prior sizes `(w, h)`, one per anchor slot.
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
    pub lambda_noobj: f64,
}

impl GridSpec {
    pub fn new(k: usize, anchors: Vec<(f64, f64)>, classes: usize, lambda_noobj: f64) -> Result<Self> {
        let g = Self { k, anchors, classes, lambda_noobj };
        g.validate()?;
        Ok(g)
    }

    pub fn m(&self) -> usize {
        self.anchors.len()
    }

    pub fn cells(&self) -> usize {
        self.k * self.k
    }

    /// Number of (cell, anchor) slots.
    pub fn slots(&self) -> usize {
        self.cells() * self.m()
    }

    /// Raw prediction values per anchor: 4 box offsets, objectness, classes.
    pub fn per_anchor(&self) -> usize {
        5 + self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.anchors.is_empty() || self.classes == 0 {
            return Err(Error::InvalidArgument("grid needs k, M, C >= 1".into()));
        }
        if self.anchors.iter().any(|&(w, h)| !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0)) {
            return Err(Error::InvalidArgument(format!("anchor sizes {:?} outside (0, 1]", self.anchors)));
        }
        if !(self.lambda_noobj >= 0.0) {
            return Err(Error::InvalidArgument("lambda_noobj must be >= 0".into()));
        }
        Ok(())
    }
}

/// Positive slots with their matched truth; `None` marks a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub k: usize,
    pub m: usize,
    pub classes: usize,
    pub slots: Vec<Option<Positive>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub truth: BoundingBox,
    pub class_id: usize,
}

impl TargetAssignment {
    pub fn empty(grid: &GridSpec) -> Self {
        Self { k: grid.k, m: grid.m(), classes: grid.classes, slots: vec![None; grid.slots()] }
    }

    /// Slot index of `(row, col, anchor)`.
    pub fn slot(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.k + col) * self.m + anchor
    }

    pub fn indicator(&self, slot: usize) -> bool {
        self.slots[slot].is_some()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, &Positive)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|p| (i, p)))
    }

    pub fn n_positive(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Cell holding a normalized coordinate; the far edge belongs to the last cell.
pub fn cell_index(v: f64, k: usize) -> usize {
    ((v * k as f64).floor().max(0.0) as usize).min(k - 1)
}

/// Anchor whose prior shape best overlaps `(w, h)` when both are centred;
/// ties go to the lower index.
pub fn best_anchor(w: f64, h: f64, anchors: &[(f64, f64)]) -> usize {
    let truth = BoundingBox { cx: 0.0, cy: 0.0, w, h };
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &(aw, ah)) in anchors.iter().enumerate() {
        let v = iou(&truth, &BoundingBox { cx: 0.0, cy: 0.0, w: aw, h: ah });
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Place each truth box in the cell containing its centre and the anchor of
/// best shape overlap. A slot claimed twice keeps the larger-area truth.
pub fn assign_targets(truth: &[(usize, BoundingBox)], grid: &GridSpec) -> Result<TargetAssignment> {
    let mut out = TargetAssignment::empty(grid);
    for &(class_id, b) in truth {
        b.validate()?;
        if class_id >= grid.classes {
            return Err(Error::InvalidArgument(format!("class {class_id} outside the {} grid classes", grid.classes)));
        }
        let row = cell_index(b.cy, grid.k);
        let col = cell_index(b.cx, grid.k);
        let j = best_anchor(b.w, b.h, &grid.anchors);
        let s = out.slot(row, col, j);
        match &out.slots[s] {
            Some(existing) if existing.truth.area() >= b.area() => {
                log::warn!("dropping truth {b:?}: slot ({row},{col},{j}) already holds a larger box");
            }
            Some(existing) => {
                log::warn!("dropping truth {:?}: slot ({row},{col},{j}) taken by a larger box", existing.truth);
                out.slots[s] = Some(Positive { truth: b, class_id });
            }
            None => out.slots[s] = Some(Positive { truth: b, class_id }),
        }
    }
    Ok(out)
}

/// Lloyd's k-means over truth `(w, h)` pairs, seeded initialisation, sorted
/// by area so the result is order-independent.
pub fn fit_anchors(sizes: &[(f64, f64)], m: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if sizes.is_empty() || m == 0 {
        return Err(Error::InvalidArgument("anchor fitting needs sizes and m >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(m);
    for _ in 0..m {
        centers.push(sizes[rng.gen_range(0..sizes.len())]);
    }
    for _ in 0..100 {
        let mut sum = vec![(0.0, 0.0, 0usize); m];
        for &(w, h) in sizes {
            let j = (0..m)
                .min_by(|&a, &b| {
                    let da = (centers[a].0 - w).powi(2) + (centers[a].1 - h).powi(2);
                    let db = (centers[b].0 - w).powi(2) + (centers[b].1 - h).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            sum[j].0 += w;
            sum[j].1 += h;
            sum[j].2 += 1;
        }
        let mut moved = false;
        for (j, &(sw, sh, n)) in sum.iter().enumerate() {
            let next = if n > 0 {
                (sw / n as f64, sh / n as f64)
            } else {
                // empty cluster: reseed deterministically
                sizes[rng.gen_range(0..sizes.len())]
            };
            if next != centers[j] {
                moved = true;
                centers[j] = next;
            }
        }
        if !moved {
            break;
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centers.into_iter().map(|(w, h)| (w.clamp(1e-3, 1.0), h.clamp(1e-3, 1.0))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(k: usize, anchors: Vec<(f64, f64)>) -> GridSpec {
        GridSpec::new(k, anchors, 6, 0.5).unwrap()
    }

    #[test]
    fn centre_on_boundary_goes_to_upper_cell() {
        let g = grid(2, vec![(0.2, 0.2)]);
        let a = assign_targets(&[(1, BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap())], &g).unwrap();
        assert_eq!(a.n_positive(), 1);
        assert!(a.indicator(a.slot(1, 1, 0)));
        assert_eq!(cell_index(1.0, 4), 3);
        assert_eq!(cell_index(0.0, 4), 0);
    }

    #[test]
    fn empty_truth_gives_all_negatives() {
        let g = grid(4, vec![(0.2, 0.2), (0.1, 0.3)]);
        let a = assign_targets(&[], &g).unwrap();
        assert_eq!(a.slots.len(), 32);
        assert_eq!(a.n_positive(), 0);
    }

    #[test]
    fn anchor_by_shape_overlap() {
        assert_eq!(best_anchor(0.3, 0.1, &[(0.3, 0.1), (0.1, 0.3)]), 0);
        assert_eq!(best_anchor(0.1, 0.3, &[(0.3, 0.1), (0.1, 0.3)]), 1);
        // identical anchors tie: lowest index
        assert_eq!(best_anchor(0.2, 0.2, &[(0.1, 0.1), (0.1, 0.1)]), 0);
    }

    #[test]
    fn collision_keeps_larger_truth() {
        let g = grid(2, vec![(0.2, 0.2)]);
        let small = BoundingBox::new(0.2, 0.2, 0.1, 0.1).unwrap();
        let large = BoundingBox::new(0.3, 0.3, 0.2, 0.2).unwrap();
        for order in [[(0, small), (1, large)], [(1, large), (0, small)]] {
            let a = assign_targets(&order, &g).unwrap();
            assert_eq!(a.n_positive(), 1);
            assert_eq!(a.slots[0].unwrap().class_id, 1);
        }
    }

    #[test]
    fn bad_class_is_rejected() {
        let g = grid(2, vec![(0.2, 0.2)]);
        assert!(assign_targets(&[(6, BoundingBox::new(0.5, 0.5, 0.1, 0.1).unwrap())], &g).is_err());
    }

    #[test]
    fn kmeans_separates_two_clusters() {
        let mut sizes = vec![(0.05, 0.02); 10];
        sizes.extend(vec![(0.4, 0.2); 10]);
        let a = fit_anchors(&sizes, 2, 3).unwrap();
        assert!((a[0].0 - 0.05).abs() < 1e-12 && (a[1].0 - 0.4).abs() < 1e-12);
        assert_eq!(a, fit_anchors(&sizes, 2, 3).unwrap());
    }
}
