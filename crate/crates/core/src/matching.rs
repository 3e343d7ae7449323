//! Matching costs, optimal bipartite assignment and tracklet-aware label
//! assignment across the frames of a clip.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{giou, l1_box, BBox};
use crate::losses::LossWeights;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cost assigned to padding cells when a rectangular matrix is squared up.
pub const PAD_COST: f64 = 1e6;

/// Ground-truth object identity, unique within a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One annotated object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject<T> {
    pub id: ObjectId,
    pub class: usize,
    pub bbox: BBox<T>,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("cost matrix has {len} entries, expected {rows}x{cols}")]
    BadDimensions { rows: usize, cols: usize, len: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("identity {0} is carried by both the track and the newborn assignment")]
    OverlappingIdentity(ObjectId),
    #[error("identity {0} assigned to more than one query slot")]
    DuplicateIdentity(ObjectId),
}

/// Rows are query slots, columns ground-truth candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::BadDimensions {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, MatchError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Optimal row-to-column matching.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatching {
    /// Column matched to each row, `None` for rows left over.
    pub col_of_row: Vec<Option<usize>>,
    pub total: f64,
}

impl RowMatching {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.col_of_row
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }
}

/// Minimum-cost one-to-one assignment covering `min(rows, cols)` pairs.
///
/// Rectangular inputs are padded to a square with [`PAD_COST`] and solved
/// with the O(n³) shortest-augmenting-path form of the Hungarian method,
/// always in double precision.
pub fn hungarian<T: Scalar>(cost: &CostMatrix<T>) -> RowMatching {
    let (rows, cols) = (cost.rows, cost.cols);
    if rows == 0 || cols == 0 {
        return RowMatching {
            col_of_row: vec![None; rows],
            total: 0.0,
        };
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost.get(i, j).as_f64()
        } else {
            PAD_COST
        }
    };
    // 1-based potentials; p[j] = row matched to column j, 0 = none.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            col_of_row[i - 1] = Some(j - 1);
            total += cost.get(i - 1, j - 1).as_f64();
        }
    }
    RowMatching { col_of_row, total }
}

/// Per-slot label: an object identity, or background.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Assignment {
    slots: Vec<Option<ObjectId>>,
}

impl Assignment {
    pub fn background(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn from_slots(slots: Vec<Option<ObjectId>>) -> Result<Self, MatchError> {
        let a = Self { slots };
        a.check_one_to_one()?;
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<ObjectId> {
        self.slots.get(slot).copied().flatten()
    }

    pub fn slots(&self) -> &[Option<ObjectId>] {
        &self.slots
    }

    /// `(slot, identity)` for every non-background slot.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, ObjectId)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(s, id)| id.map(|id| (s, id)))
    }

    pub fn ids(&self) -> HashSet<ObjectId> {
        self.slots.iter().flatten().copied().collect()
    }

    pub fn matched(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn check_one_to_one(&self) -> Result<(), MatchError> {
        let mut seen = HashSet::new();
        for id in self.slots.iter().flatten() {
            if !seen.insert(*id) {
                return Err(MatchError::DuplicateIdentity(*id));
            }
        }
        Ok(())
    }

    /// Background for every identity absent from `present`.
    pub fn restrict_to(&self, present: &HashSet<ObjectId>) -> Self {
        Self {
            slots: self
                .slots
                .iter()
                .map(|s| s.filter(|id| present.contains(id)))
                .collect(),
        }
    }

    /// Keeps the listed slots, in the listed order.
    pub fn select(&self, keep: &[usize]) -> Self {
        Self {
            slots: keep.iter().map(|&i| self.slots[i]).collect(),
        }
    }

    /// Concatenation of slot lists, `self` first.
    pub fn concat(&self, other: &Self) -> Result<Self, MatchError> {
        let mut slots = self.slots.clone();
        slots.extend_from_slice(&other.slots);
        Self::from_slots(slots)
    }

    pub fn push(&mut self, id: Option<ObjectId>) {
        self.slots.push(id);
    }
}

/// DETR-style pairwise cost between predictions and targets.
///
/// `cost(q, t) = -λ_cls·p_q(class_t) + λ_l1·l1(q, t) - λ_giou·giou(q, t)`.
pub fn build_match_cost<T: Scalar>(
    pred_probs: &Tensor<T>,
    pred_boxes: &[BBox<T>],
    targets: &[GtObject<T>],
    w: &LossWeights,
) -> CostMatrix<T> {
    let rows = pred_boxes.len();
    let cols = targets.len();
    let (lc, ll, lg) = (T::of(w.lambda_cls), T::of(w.lambda_l1), T::of(w.lambda_giou));
    let mut data = Vec::with_capacity(rows * cols);
    for (q, pb) in pred_boxes.iter().enumerate() {
        for t in targets {
            let p = pred_probs.get2(q, t.class);
            data.push(-lc * p + ll * l1_box(pb, &t.bbox) - lg * giou(pb, &t.bbox));
        }
    }
    CostMatrix { rows, cols, data }
}

/// Newborn-only matching for the detect block: targets whose identity is
/// already carried by a track query are excluded; unmatched detect slots
/// become background.
pub fn assign_newborn<T: Scalar>(
    detect_probs: &Tensor<T>,
    detect_boxes: &[BBox<T>],
    gt_frame: &[GtObject<T>],
    already_tracked: &HashSet<ObjectId>,
    w: &LossWeights,
) -> Assignment {
    let newborn: Vec<GtObject<T>> = gt_frame
        .iter()
        .filter(|g| !already_tracked.contains(&g.id))
        .copied()
        .collect();
    let mut out = Assignment::background(detect_boxes.len());
    if newborn.is_empty() {
        return out;
    }
    let cost = build_match_cost(detect_probs, detect_boxes, &newborn, w);
    for (slot, col) in hungarian(&cost).pairs() {
        out.slots[slot] = Some(newborn[col].id);
    }
    out
}

/// Next-frame track assignment: surviving track labels followed by newborn
/// labels, background slots dropped and slots renumbered from zero.
pub fn propagate_assignment(prev_tr: &Assignment, prev_det: &Assignment) -> Result<Assignment, MatchError> {
    let tracked = prev_tr.ids();
    if let Some(id) = prev_det.slots.iter().flatten().find(|id| tracked.contains(id)) {
        return Err(MatchError::OverlappingIdentity(*id));
    }
    let slots = prev_tr
        .slots
        .iter()
        .chain(&prev_det.slots)
        .filter(|s| s.is_some())
        .copied()
        .collect();
    Assignment::from_slots(slots)
}
