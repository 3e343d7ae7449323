//! Single-frame detection/tracking loss and the clip-level collective
//! average of it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{boxes_to_tensor, giou_rows, l1_rows, BBox};
use crate::matching::{Assignment, GtObject, ObjectId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, Var, CLAMP_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let ws = [self.lambda_cls, self.lambda_l1, self.lambda_giou];
        if ws.iter().any(|w| !(*w >= 0.0)) {
            return Err("loss weights must be nonnegative".into());
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err("at least one loss weight must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            return Err("focal alpha must lie in [0,1] and gamma be nonnegative".into());
        }
        Ok(())
    }

    /// Weighted sum of the three unweighted terms.
    pub fn combine(&self, cls: f64, l1: f64, giou_loss: f64) -> f64 {
        self.lambda_cls * cls + self.lambda_l1 * l1 + self.lambda_giou * giou_loss
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("assignment references identity {0} absent from the frame")]
    MissingIdentity(ObjectId),
    #[error("assignment covers {assigned} slots but predictions have {predicted}")]
    SlotCount { assigned: usize, predicted: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Sigmoid focal loss of one probability.
pub fn focal_loss<T: Scalar>(p: T, target: bool, alpha: T, gamma: T) -> T {
    let eps = T::of(CLAMP_EPS);
    let one = T::one();
    if target {
        -alpha * (one - p).powf(gamma) * p.max(eps).ln()
    } else {
        -(one - alpha) * p.powf(gamma) * (one - p).max(eps).ln()
    }
}

/// Per-query class probabilities and boxes of one block of queries.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBoxes<'t, T> {
    /// `[n, n_classes]`, sigmoid outputs.
    pub probs: Var<'t, T>,
    /// `[n, 4]`, center-size in (0, 1).
    pub boxes: Var<'t, T>,
}

/// Loss of one block with its unweighted components.
#[derive(Debug, Clone, Copy)]
pub struct FrameLoss<'t, T> {
    pub total: Var<'t, T>,
    pub cls: Var<'t, T>,
    pub l1: Var<'t, T>,
    pub giou: Var<'t, T>,
    /// Number of matched ground-truth objects.
    pub matched: usize,
}

/// Focal classification over every query plus L1 and `1 - giou` over matched
/// queries; unnormalized.
pub fn frame_loss<'t, T: Scalar>(
    preds: ScoredBoxes<'t, T>,
    assignment: &Assignment,
    gt_frame: &[GtObject<T>],
    w: &LossWeights,
) -> Result<FrameLoss<'t, T>, LossError> {
    let tape = preds.probs.tape();
    let shape = preds.probs.shape();
    let (n, n_cls) = (shape[0], shape[1]);
    if assignment.len() != n {
        return Err(LossError::SlotCount {
            assigned: assignment.len(),
            predicted: n,
        });
    }
    let by_id: HashMap<ObjectId, &GtObject<T>> = gt_frame.iter().map(|g| (g.id, g)).collect();
    let mut target = Tensor::zeros(&[n, n_cls]);
    let mut rows = Vec::new();
    let mut tboxes: Vec<BBox<T>> = Vec::new();
    for (slot, id) in assignment.pairs() {
        let g = by_id.get(&id).ok_or(LossError::MissingIdentity(id))?;
        target.data_mut()[slot * n_cls + g.class] = T::one();
        rows.push(slot);
        tboxes.push(g.bbox);
    }
    let alpha = T::of(w.focal_alpha);
    let gamma = T::of(w.focal_gamma);
    let p = preds.probs;
    let q = p.rsub_scalar(T::one());
    let pos = q.powf(gamma).mul(p.log())?.scale(-alpha);
    let neg = p.powf(gamma).mul(q.log())?.scale(-(T::one() - alpha));
    let neg_mask = target.map(|t| T::one() - t);
    let cls = pos
        .mul(tape.constant(target))?
        .add(neg.mul(tape.constant(neg_mask))?)?
        .sum();

    let (l1, giou) = if rows.is_empty() {
        (tape.scalar(T::zero()), tape.scalar(T::zero()))
    } else {
        let pb = preds.boxes.select_rows(&rows)?;
        let tb = tape.constant(boxes_to_tensor(&tboxes));
        let l1 = l1_rows(pb, tb)?.sum();
        let giou = giou_rows(pb, tb)?.rsub_scalar(T::one()).sum();
        (l1, giou)
    };
    let total = cls
        .scale(T::of(w.lambda_cls))
        .add(l1.scale(T::of(w.lambda_l1)))?
        .add(giou.scale(T::of(w.lambda_giou)))?;
    Ok(FrameLoss {
        total,
        cls,
        l1,
        giou,
        matched: rows.len(),
    })
}

/// One frame's contribution to the clip loss.
#[derive(Debug, Clone, Copy)]
pub struct FrameTerms<'t, T> {
    pub track_loss: Var<'t, T>,
    pub detect_loss: Var<'t, T>,
    pub v_track: usize,
    pub v_detect: usize,
}

/// Collects per-frame losses and object counts over a clip.
#[derive(Debug, Clone, Default)]
pub struct ClipLossAccumulator<'t, T> {
    frames: Vec<FrameTerms<'t, T>>,
}

impl<'t, T: Scalar> ClipLossAccumulator<'t, T> {
    pub fn new() -> Self {
        Self { frames: Vec::new() }
    }

    pub fn push(&mut self, track_loss: Var<'t, T>, detect_loss: Var<'t, T>, v_track: usize, v_detect: usize) {
        self.frames.push(FrameTerms {
            track_loss,
            detect_loss,
            v_track,
            v_detect,
        });
    }

    pub fn frames(&self) -> &[FrameTerms<'t, T>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `Σ V_i` over the accumulated frames.
    pub fn total_objects(&self) -> usize {
        self.frames.iter().map(|f| f.v_track + f.v_detect).sum()
    }
}

/// Sum of every frame's track and detect losses over `max(Σ V_i, 1)`.
pub fn collective_average_loss<'t, T: Scalar>(acc: &ClipLossAccumulator<'t, T>) -> Result<Var<'t, T>, LossError> {
    let first = acc.frames.first().ok_or_else(|| {
        LossError::Tensor(TensorError::InvalidArgument {
            op: "collective_average_loss",
            msg: "no frames accumulated".into(),
        })
    })?;
    let mut sum = first.track_loss.add(first.detect_loss)?;
    for f in &acc.frames[1..] {
        sum = sum.add(f.track_loss)?.add(f.detect_loss)?;
    }
    let denom = acc.total_objects().max(1);
    Ok(sum.div(sum.tape().scalar(T::of(denom as f64)))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    fn gt(id: u64, b: BBox<f64>) -> GtObject<f64> {
        GtObject {
            id: ObjectId(id),
            class: 0,
            bbox: b,
            visible: true,
        }
    }

    #[test]
    fn focal_examples() {
        let ln2 = 2f64.ln();
        assert!(focal_loss(1.0f64 - 1e-12, true, 0.25, 2.0) < 1e-20);
        assert!((focal_loss(0.5f64, true, 0.25, 2.0) - 0.25 * 0.25 * ln2).abs() < 1e-15);
        assert!((focal_loss(0.5f64, true, 0.25, 2.0) - 0.04332).abs() < 1e-5);
        assert!((focal_loss(0.5f64, false, 0.25, 2.0) - 0.75 * 0.25 * ln2).abs() < 1e-15);
        assert!((focal_loss(0.5f64, false, 0.25, 2.0) - 0.12997).abs() < 1e-5);
    }

    fn block<'t>(tape: &'t Tape<f64>, probs: &[f64], boxes: &[BBox<f64>]) -> ScoredBoxes<'t, f64> {
        ScoredBoxes {
            probs: tape.leaf(Tensor::new(vec![probs.len(), 1], probs.to_vec()).unwrap()),
            boxes: tape.leaf(boxes_to_tensor(boxes)),
        }
    }

    #[test]
    fn perfect_match_has_negligible_loss() {
        let tape = Tape::new();
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        let preds = block(&tape, &[1.0 - 1e-9], &[b]);
        let a = Assignment::from_slots(vec![Some(ObjectId(1))]).unwrap();
        let l = frame_loss(preds, &a, &[gt(1, b)], &LossWeights::default()).unwrap();
        assert!(l.total.item().abs() < 1e-12);
        assert_eq!(l.matched, 1);
    }

    #[test]
    fn single_match_composition() {
        let tape = Tape::new();
        let w = LossWeights::default();
        let pred = BBox::new(0.25, 0.25, 0.5, 0.5);
        let tgt = BBox::new(0.5, 0.5, 0.5, 0.5);
        let preds = block(&tape, &[0.5], &[pred]);
        let a = Assignment::from_slots(vec![Some(ObjectId(3))]).unwrap();
        let l = frame_loss(preds, &a, &[gt(3, tgt)], &w).unwrap();
        let giou_term = 1.0 - (1.0 / 7.0 - 0.125 / 0.5625);
        assert!((l.cls.item() - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l.l1.item() - 0.5).abs() < 1e-12);
        assert!((l.giou.item() - giou_term).abs() < 1e-12);
        assert!((l.total.item() - w.combine(l.cls.item(), 0.5, giou_term)).abs() < 1e-12);
        // the composed figure with l1 = 0.3 and giou = -0.07937
        assert!((w.combine(0.04332, 0.3, 1.07937) - 3.7453).abs() < 1e-4);
    }

    #[test]
    fn empty_frame_is_negatives_only() {
        let tape = Tape::new();
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        let preds = block(&tape, &[0.5, 0.2], &[b, b]);
        let l = frame_loss(preds, &Assignment::background(2), &[], &LossWeights::default()).unwrap();
        let expect = 2.0 * (focal_loss(0.5f64, false, 0.25, 2.0) + focal_loss(0.2, false, 0.25, 2.0));
        assert!((l.total.item() - expect).abs() < 1e-12);
        assert_eq!(l.matched, 0);
    }

    #[test]
    fn missing_identity_is_an_error() {
        let tape = Tape::new();
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        let preds = block(&tape, &[0.5], &[b]);
        let a = Assignment::from_slots(vec![Some(ObjectId(9))]).unwrap();
        let err = frame_loss(preds, &a, &[gt(1, b)], &LossWeights::default()).unwrap_err();
        assert_eq!(err, LossError::MissingIdentity(ObjectId(9)));
    }

    #[test]
    fn cal_arithmetic() {
        let tape = Tape::<f64>::new();
        let mut acc = ClipLossAccumulator::new();
        acc.push(tape.leaf(Tensor::scalar(1.5)), tape.leaf(Tensor::scalar(2.5)), 1, 1);
        acc.push(tape.leaf(Tensor::scalar(6.0)), tape.leaf(Tensor::scalar(0.0)), 3, 0);
        let l = collective_average_loss(&acc).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-15);

        let mut empty = ClipLossAccumulator::new();
        empty.push(tape.leaf(Tensor::scalar(0.0)), tape.leaf(Tensor::scalar(0.7)), 0, 0);
        assert_eq!(collective_average_loss(&empty).unwrap().item(), 0.7);
        assert!(collective_average_loss(&ClipLossAccumulator::<f64>::new()).is_err());
    }

    #[test]
    fn frame_loss_gradient_check() {
        // rows: 3 queries; columns 0 = logit, 1..5 = box pre-activations
        let x = Tensor::new(
            vec![3, 5],
            vec![
                0.3, -0.2, 0.1, -0.9, -1.1, //
                -0.7, 0.4, -0.3, -1.3, -0.8, //
                1.1, 0.0, 0.5, -1.0, -1.2,
            ],
        )
        .unwrap();
        let frame = [
            gt(1, BBox::new(0.45, 0.5, 0.3, 0.25)),
            gt(2, BBox::new(0.6, 0.42, 0.2, 0.3)),
        ];
        let a = Assignment::from_slots(vec![Some(ObjectId(2)), None, Some(ObjectId(1))]).unwrap();
        let r = grad_check(
            |_, x| {
                let probs = x.slice(1, 0, 1)?.sigmoid();
                let boxes = x.slice(1, 1, 4)?.sigmoid();
                let l = frame_loss(ScoredBoxes { probs, boxes }, &a, &frame, &LossWeights::default())
                    .map_err(|e| match e {
                        LossError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?;
                Ok(l.total)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
