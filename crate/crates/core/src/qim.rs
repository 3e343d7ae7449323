//! Object entrance/exit filtering and the temporal aggregation network that
//! turns surviving hidden states into next-frame track queries.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::matching::{propagate_assignment, Assignment, GtObject, MatchError, ObjectId};
use crate::model::{Bound, FeedForward, FramePredictions, MultiHeadAttention, Norm, ParamStore, QueryRecord, QuerySet, TrackId};
use crate::scalar::Scalar;
use crate::tensor::{Activation, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifecycleConfig {
    pub tau_en: f64,
    pub tau_ex: f64,
    /// Consecutive low-score frames before a track is dropped.
    pub miss_tolerance: usize,
    pub iou_keep: f64,
    /// Whether tracks inside their low-score grace window are written out.
    pub emit_during_grace: bool,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            tau_en: 0.8,
            tau_ex: 0.6,
            miss_tolerance: 5,
            iou_keep: 0.5,
            emit_during_grace: true,
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.tau_ex && self.tau_ex <= self.tau_en && self.tau_en < 1.0) {
            return Err(format!(
                "need 0 < tau_ex <= tau_en < 1, got tau_ex={} tau_en={}",
                self.tau_ex, self.tau_en
            ));
        }
        if self.miss_tolerance == 0 {
            return Err("miss_tolerance must be at least 1".into());
        }
        if !(self.iou_keep > 0.0 && self.iou_keep < 1.0) {
            return Err(format!("iou_keep must lie in (0, 1), got {}", self.iou_keep));
        }
        Ok(())
    }
}

/// One pre-norm decoder layer without cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TanParams {
    pub norm1: Norm,
    pub attn: MultiHeadAttention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

impl TanParams {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        n_heads: usize,
        ffn_dim: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, n_heads, rng),
            norm2: Norm::new(ps, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, ffn_dim, act, rng),
        }
    }
}

/// Survivors attend to each other with `q = k = hidden + previous query` and
/// `v = hidden`; newborn hidden states are appended afterwards untouched.
pub fn tan_forward<'t, T: Scalar>(
    kept_hidden: Var<'t, T>,
    prev_track_queries: Var<'t, T>,
    newborn_hidden: Var<'t, T>,
    tan: &TanParams,
    p: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let (ks, ps) = (kept_hidden.shape(), prev_track_queries.shape());
    if ks != ps {
        return Err(TensorError::ShapeMismatch {
            op: "tan_forward",
            left: ks,
            right: ps,
        });
    }
    if ks[0] == 0 {
        return Ok(newborn_hidden);
    }
    let qk = tan.norm1.forward(kept_hidden.add(prev_track_queries)?, p)?;
    let h = kept_hidden.add(tan.attn.forward(qk, qk, kept_hidden, p)?)?;
    let out = h.add(tan.ffn.forward(tan.norm2.forward(h, p)?, p)?)?;
    if newborn_hidden.shape()[0] == 0 {
        return Ok(out);
    }
    kept_hidden.tape().concat(&[out, newborn_hidden], 0)
}

/// Which hidden states move on to the next frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transition {
    /// Track-block indices, in order.
    pub survivors: Vec<usize>,
    pub survivor_records: Vec<QueryRecord>,
    /// Detect-block indices, in order.
    pub newborns: Vec<usize>,
    pub newborn_records: Vec<QueryRecord>,
}

impl Transition {
    pub fn len(&self) -> usize {
        self.survivors.len() + self.newborns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<QueryRecord> {
        self.survivor_records.iter().chain(&self.newborn_records).copied().collect()
    }
}

/// Hands out strictly increasing track ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&mut self) -> TrackId {
        self.next += 1;
        TrackId(self.next)
    }
}

/// Training-time selection: kept slots plus the identity each one carries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSelection {
    pub transition: Transition,
    pub survivor_ids: Vec<Option<ObjectId>>,
    pub newborn_ids: Vec<Option<ObjectId>>,
}

impl TrainSelection {
    /// Identities of the next frame's track block, in slot order. Unlabelled
    /// newborns (inserted false positives) are expected at the tail.
    pub fn assignment(&self) -> Result<Assignment, MatchError> {
        let mut a = propagate_assignment(
            &Assignment::from_slots(self.survivor_ids.clone())?,
            &Assignment::from_slots(self.newborn_ids.clone())?,
        )?;
        for _ in self.newborn_ids.iter().filter(|s| s.is_none()) {
            a.push(None);
        }
        Ok(a)
    }
}

/// A track slot survives if its object is present and the predicted box still
/// overlaps it by `iou_keep`; a detect slot survives if it was matched to a
/// newborn.
pub fn filter_train<T: Scalar>(
    preds: &FramePredictions<'_, T>,
    queries: &QuerySet<'_, T>,
    omega_tr: &Assignment,
    omega_det: &Assignment,
    gt_frame: &[GtObject<T>],
    iou_keep: f64,
    ids: &mut IdAllocator,
) -> TrainSelection {
    let boxes = preds.box_values();
    let n_det = preds.n_detect;
    let gt: HashMap<ObjectId, &GtObject<T>> = gt_frame.iter().map(|g| (g.id, g)).collect();
    let mut sel = TrainSelection::default();
    for (i, slot) in omega_tr.slots().iter().enumerate() {
        let Some(id) = slot else { continue };
        let Some(obj) = gt.get(id) else { continue };
        if iou(&boxes[n_det + i], &obj.bbox).as_f64() >= iou_keep {
            sel.transition.survivors.push(i);
            sel.transition.survivor_records.push(queries.records[n_det + i]);
            sel.survivor_ids.push(Some(*id));
        }
    }
    for (j, id) in omega_det.pairs() {
        sel.transition.newborns.push(j);
        sel.transition.newborn_records.push(QueryRecord::track(ids.fresh()));
        sel.newborn_ids.push(Some(id));
    }
    sel
}

/// Inference-time selection from scores alone. `scores` covers the detect
/// block followed by one entry per record in `tracks`.
pub fn filter_infer<T: Scalar>(
    scores: &[T],
    tracks: &[QueryRecord],
    cfg: &LifecycleConfig,
    ids: &mut IdAllocator,
) -> Transition {
    let n_det = scores.len() - tracks.len();
    let mut t = Transition::default();
    for (i, rec) in tracks.iter().enumerate() {
        let count = if scores[n_det + i].as_f64() < cfg.tau_ex {
            rec.disappear_count + 1
        } else {
            0
        };
        if count < cfg.miss_tolerance {
            t.survivors.push(i);
            t.survivor_records.push(QueryRecord {
                disappear_count: count,
                ..*rec
            });
        }
    }
    for (j, s) in scores[..n_det].iter().enumerate() {
        if s.as_f64() > cfg.tau_en {
            t.newborns.push(j);
            t.newborn_records.push(QueryRecord::track(ids.fresh()));
        }
    }
    t
}

/// Gathers the selected hidden states and runs them through the TAN.
///
/// Returns the next track block's embeddings and records.
pub fn advance<'t, T: Scalar>(
    preds: &FramePredictions<'t, T>,
    queries: &QuerySet<'t, T>,
    transition: &Transition,
    tan: &TanParams,
    p: &Bound<'t, T>,
) -> Result<(Var<'t, T>, Vec<QueryRecord>), TensorError> {
    let next = aggregate(preds.hidden, queries.embeddings, preds.n_detect, transition, tan, p)?;
    Ok((next, transition.records()))
}

/// [`advance`] on raw `[n, d]` hidden states and the query embeddings that
/// produced them, the first `n_detect` rows being the detect block.
pub fn aggregate<'t, T: Scalar>(
    hidden: Var<'t, T>,
    embeddings: Var<'t, T>,
    n_detect: usize,
    transition: &Transition,
    tan: &TanParams,
    p: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let rows: Vec<usize> = transition.survivors.iter().map(|i| n_detect + i).collect();
    let kept = hidden.select_rows(&rows)?;
    let prev = embeddings.select_rows(&rows)?;
    let newborn = hidden.select_rows(&transition.newborns)?;
    tan_forward(kept, prev, newborn, tan, p)
}

/// Inference-time per-frame transition: filter by score, then aggregate.
pub fn step_lifecycle<'t, T: Scalar>(
    preds: &FramePredictions<'t, T>,
    queries: &QuerySet<'t, T>,
    cfg: &LifecycleConfig,
    ids: &mut IdAllocator,
    tan: &TanParams,
    p: &Bound<'t, T>,
) -> Result<(Transition, Var<'t, T>, Vec<QueryRecord>), TensorError> {
    let n_det = queries.n_detect();
    let t = filter_infer(&preds.scores(), &queries.records[n_det..], cfg, ids);
    let (next, records) = advance(preds, queries, &t, tan, p)?;
    Ok((t, next, records))
}
