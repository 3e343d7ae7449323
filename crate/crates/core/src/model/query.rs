use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::geometry::{tensor_to_boxes, BBox};
use crate::losses::ScoredBoxes;
use crate::scalar::Scalar;
use crate::tensor::{TensorError, Var};

/// Identity handed out by the lifecycle to entering queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrackId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryKind {
    Detect,
    Track,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub kind: QueryKind,
    pub track_id: Option<TrackId>,
    pub disappear_count: usize,
}

impl QueryRecord {
    pub fn detect() -> Self {
        Self {
            kind: QueryKind::Detect,
            track_id: None,
            disappear_count: 0,
        }
    }

    pub fn track(id: TrackId) -> Self {
        Self {
            kind: QueryKind::Track,
            track_id: Some(id),
            disappear_count: 0,
        }
    }
}

/// Detect block followed by a variable-length track block.
#[derive(Debug, Clone)]
pub struct QuerySet<'t, T> {
    pub embeddings: Var<'t, T>,
    pub records: Vec<QueryRecord>,
}

impl<'t, T: Scalar> QuerySet<'t, T> {
    pub fn new(embeddings: Var<'t, T>, records: Vec<QueryRecord>) -> Result<Self, TensorError> {
        let bad = |msg: String| TensorError::InvalidArgument { op: "query_set", msg };
        let shape = embeddings.shape();
        if shape.len() != 2 || shape[0] != records.len() || records.is_empty() {
            return Err(bad(format!("{} records for embeddings {shape:?}", records.len())));
        }
        let mut seen = HashSet::new();
        let mut in_track_block = false;
        for (i, r) in records.iter().enumerate() {
            match (r.kind, r.track_id) {
                (QueryKind::Detect, None) if !in_track_block => {}
                (QueryKind::Track, Some(id)) => {
                    in_track_block = true;
                    if !seen.insert(id) {
                        return Err(bad(format!("track id {} repeated", id.0)));
                    }
                }
                _ => return Err(bad(format!("record {i} breaks the detect-then-track layout"))),
            }
        }
        Ok(Self { embeddings, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_detect(&self) -> usize {
        self.records.iter().filter(|r| r.kind == QueryKind::Detect).count()
    }

    pub fn n_track(&self) -> usize {
        self.len() - self.n_detect()
    }
}

/// Decoder output for one frame, rows in query order.
#[derive(Debug, Clone, Copy)]
pub struct FramePredictions<'t, T> {
    /// `[n, n_classes]`
    pub probs: Var<'t, T>,
    /// `[n, 4]`
    pub boxes: Var<'t, T>,
    /// `[n, d_model]`
    pub hidden: Var<'t, T>,
    pub n_detect: usize,
}

impl<'t, T: Scalar> FramePredictions<'t, T> {
    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_track(&self) -> usize {
        self.len() - self.n_detect
    }

    fn block(&self, start: usize, count: usize) -> Result<ScoredBoxes<'t, T>, TensorError> {
        Ok(ScoredBoxes {
            probs: self.probs.slice(0, start, count)?,
            boxes: self.boxes.slice(0, start, count)?,
        })
    }

    pub fn detect_block(&self) -> Result<ScoredBoxes<'t, T>, TensorError> {
        self.block(0, self.n_detect)
    }

    pub fn track_block(&self) -> Result<ScoredBoxes<'t, T>, TensorError> {
        self.block(self.n_detect, self.n_track())
    }

    /// Highest class probability of every query.
    pub fn scores(&self) -> Vec<T> {
        let p = self.probs.value();
        (0..p.rows())
            .map(|i| p.row(i).iter().copied().fold(T::zero(), T::max))
            .collect()
    }

    /// Argmax class of every query.
    pub fn classes(&self) -> Vec<usize> {
        let p = self.probs.value();
        (0..p.rows())
            .map(|i| {
                let row = p.row(i);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }

    pub fn box_values(&self) -> Vec<BBox<T>> {
        tensor_to_boxes(&self.boxes.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn layout_enforced() {
        let tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros(&[3, 2]));
        let ok = vec![QueryRecord::detect(), QueryRecord::track(TrackId(4)), QueryRecord::track(TrackId(1))];
        let qs = QuerySet::new(e, ok).unwrap();
        assert_eq!((qs.n_detect(), qs.n_track()), (1, 2));
        let dup = vec![QueryRecord::detect(), QueryRecord::track(TrackId(4)), QueryRecord::track(TrackId(4))];
        assert!(QuerySet::new(e, dup).is_err());
        let interleaved = vec![QueryRecord::track(TrackId(1)), QueryRecord::detect(), QueryRecord::detect()];
        assert!(QuerySet::new(e, interleaved).is_err());
        let orphan = QueryRecord {
            kind: QueryKind::Track,
            track_id: None,
            disappear_count: 0,
        };
        assert!(QuerySet::new(e, vec![QueryRecord::detect(), QueryRecord::detect(), orphan]).is_err());
        assert!(QuerySet::new(e, vec![QueryRecord::detect()]).is_err());
    }

    #[test]
    fn blocks_split_at_detect_count() {
        let tape = Tape::<f64>::new();
        let preds = FramePredictions {
            probs: tape.constant(Tensor::from_rows(&[vec![0.1, 0.7], vec![0.5, 0.2], vec![0.3, 0.3]]).unwrap()),
            boxes: tape.constant(Tensor::full(&[3, 4], 0.5)),
            hidden: tape.constant(Tensor::zeros(&[3, 2])),
            n_detect: 2,
        };
        assert_eq!(preds.detect_block().unwrap().probs.shape(), vec![2, 2]);
        assert_eq!(preds.track_block().unwrap().boxes.shape(), vec![1, 4]);
        assert_eq!(preds.scores(), vec![0.7, 0.5, 0.3]);
        assert_eq!(preds.classes(), vec![1, 0, 0]);
    }
}
