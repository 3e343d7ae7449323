//! Online inference over a frame stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::model::{Model, ModelError, QueryRecord, TrackId};
use crate::qim::{aggregate, filter_infer, IdAllocator, LifecycleConfig, Transition};
use crate::scalar::Scalar;
use crate::simulator::Clip;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("frame {frame} has shape {got:?}, model expects {expected:?}")]
    FrameShape {
        frame: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("decoder returned {got} predictions for {expected} queries")]
    PredictionCount { expected: usize, got: usize },
    #[error("invalid lifecycle config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput<T> {
    /// One-based.
    pub frame: usize,
    pub track_id: TrackId,
    pub class: usize,
    pub bbox: BBox<T>,
    pub confidence: T,
}

/// Per-query outputs of one frame: the detect block, then one entry per
/// track query in the order they were supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections<T> {
    pub scores: Vec<T>,
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox<T>>,
}

/// Anything that can score a frame given the live track queries and then
/// carry the selected queries over.
pub trait QueryDecoder<T> {
    fn predict(&mut self, frame: usize, image: &Tensor<T>, tracks: &[QueryRecord]) -> Result<Detections<T>, TrackError>;

    fn advance(&mut self, transition: &Transition) -> Result<(), TrackError>;
}

/// Runs a [`Model`] frame by frame, holding the track-query embeddings
/// between frames off the tape.
#[derive(Debug, Clone)]
pub struct ModelDecoder<'m, T> {
    model: &'m Model<T>,
    tracks: Tensor<T>,
    last: Option<(Tensor<T>, Tensor<T>, usize)>,
}

impl<'m, T: Scalar> ModelDecoder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            model,
            tracks: Tensor::empty_rows(model.config.d_model),
            last: None,
        }
    }
}

impl<T: Scalar> QueryDecoder<T> for ModelDecoder<'_, T> {
    fn predict(&mut self, frame: usize, image: &Tensor<T>, tracks: &[QueryRecord]) -> Result<Detections<T>, TrackError> {
        let expected = self.model.config.image_shape().to_vec();
        if image.shape() != expected.as_slice() {
            return Err(TrackError::FrameShape {
                frame,
                expected,
                got: image.shape().to_vec(),
            });
        }
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, false);
        let memory = self.model.encode(image, &p)?;
        let queries = self.model.query_set(&p, tape.constant(self.tracks.clone()), tracks.to_vec())?;
        let preds = self.model.decode(&queries, &memory, &p)?;
        let out = Detections {
            scores: preds.scores(),
            classes: preds.classes(),
            boxes: preds.box_values(),
        };
        self.last = Some((preds.hidden.value(), queries.embeddings.value(), preds.n_detect));
        Ok(out)
    }

    fn advance(&mut self, transition: &Transition) -> Result<(), TrackError> {
        let (hidden, embeddings, n_detect) = self.last.take().expect("predict precedes advance");
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, false);
        let next = aggregate(
            tape.constant(hidden),
            tape.constant(embeddings),
            n_detect,
            transition,
            &self.model.arch.tan,
            &p,
        )?;
        self.tracks = next.value();
        Ok(())
    }
}

/// Tracks `frames` causally. The first frame sees detect queries only;
/// afterwards the surviving and entering queries are carried forward.
pub fn track_sequence<T: Scalar, D: QueryDecoder<T>>(
    decoder: &mut D,
    frames: &[Tensor<T>],
    cfg: &LifecycleConfig,
) -> Result<Vec<TrackOutput<T>>, TrackError> {
    cfg.validate().map_err(TrackError::Config)?;
    let mut ids = IdAllocator::new();
    let mut tracks: Vec<QueryRecord> = Vec::new();
    let mut out = Vec::new();
    for (t, image) in frames.iter().enumerate() {
        let det = decoder.predict(t, image, &tracks)?;
        let n = det.scores.len();
        if n < tracks.len() || det.boxes.len() != n || det.classes.len() != n {
            return Err(TrackError::PredictionCount {
                expected: tracks.len(),
                got: n,
            });
        }
        let n_det = n - tracks.len();
        let transition = filter_infer(&det.scores, &tracks, cfg, &mut ids);
        let emit = |row: usize, rec: &QueryRecord| TrackOutput {
            frame: t + 1,
            track_id: rec.track_id.expect("track record"),
            class: det.classes[row],
            bbox: det.boxes[row],
            confidence: det.scores[row],
        };
        for (&i, rec) in transition.survivors.iter().zip(&transition.survivor_records) {
            if rec.disappear_count == 0 || cfg.emit_during_grace {
                out.push(emit(n_det + i, rec));
            }
        }
        for (&j, rec) in transition.newborns.iter().zip(&transition.newborn_records) {
            out.push(emit(j, rec));
        }
        if t + 1 < frames.len() {
            decoder.advance(&transition)?;
        }
        tracks = transition.records();
    }
    Ok(out)
}

/// Tracks a simulated clip with `model`.
pub fn track_clip<T: Scalar>(model: &Model<T>, clip: &Clip<T>, cfg: &LifecycleConfig) -> Result<Vec<TrackOutput<T>>, TrackError> {
    let images: Vec<Tensor<T>> = clip.frames.iter().map(|f| f.image.clone()).collect();
    track_sequence(&mut ModelDecoder::new(model), &images, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use std::collections::BTreeSet;

    /// Replays fixed per-frame scores keyed by object; each track query
    /// remembers which scripted object it came from.
    struct Scripted {
        /// frame → (object, score)
        frames: Vec<Vec<(u32, f64)>>,
        n_detect: usize,
        /// object behind each live track query
        carried: Vec<u32>,
        last_detect: Vec<Option<u32>>,
    }

    impl QueryDecoder<f64> for Scripted {
        fn predict(&mut self, frame: usize, _: &Tensor<f64>, tracks: &[QueryRecord]) -> Result<Detections<f64>, TrackError> {
            assert_eq!(tracks.len(), self.carried.len());
            let script = &self.frames[frame];
            let score_of = |obj: u32| script.iter().find(|(o, _)| *o == obj).map_or(0.0, |(_, s)| *s);
            let mut scores = vec![0.0; self.n_detect];
            self.last_detect = vec![None; self.n_detect];
            let untracked = script.iter().filter(|(o, _)| !self.carried.contains(o));
            for (slot, (obj, s)) in untracked.enumerate() {
                scores[slot] = *s;
                self.last_detect[slot] = Some(*obj);
            }
            scores.extend(self.carried.iter().map(|&o| score_of(o)));
            let n = scores.len();
            Ok(Detections {
                scores,
                classes: vec![0; n],
                boxes: vec![BBox::new(0.5, 0.5, 0.1, 0.1); n],
            })
        }

        fn advance(&mut self, t: &Transition) -> Result<(), TrackError> {
            let mut next: Vec<u32> = t.survivors.iter().map(|&i| self.carried[i]).collect();
            next.extend(t.newborns.iter().map(|&j| self.last_detect[j].unwrap()));
            self.carried = next;
            Ok(())
        }
    }

    fn ids_per_frame(out: &[TrackOutput<f64>], frames: usize) -> Vec<BTreeSet<u64>> {
        (1..=frames)
            .map(|f| out.iter().filter(|o| o.frame == f).map(|o| o.track_id.0).collect())
            .collect()
    }

    #[test]
    fn enter_and_exit_scenario() {
        let frames = vec![
            vec![(1, 0.9), (2, 0.95)],
            vec![(1, 0.9), (2, 0.9), (3, 0.85)],
            vec![(1, 0.9), (2, 0.7), (3, 0.9)],
            vec![(1, 0.9), (2, 0.1), (3, 0.9)],
        ];
        let mut dec = Scripted {
            frames,
            n_detect: 4,
            carried: vec![],
            last_detect: vec![],
        };
        let images = vec![Tensor::zeros(&[1, 1, 1]); 4];
        let cfg = LifecycleConfig {
            miss_tolerance: 1,
            ..LifecycleConfig::default()
        };
        let out = track_sequence(&mut dec, &images, &cfg).unwrap();
        let got = ids_per_frame(&out, 4);
        let want: Vec<BTreeSet<u64>> = vec![[1, 2].into(), [1, 2, 3].into(), [1, 2, 3].into(), [1, 3].into()];
        assert_eq!(got, want);
    }

    #[test]
    fn grace_window_emission_flag() {
        let frames = vec![vec![(1, 0.9)], vec![(1, 0.3)], vec![(1, 0.3)], vec![(1, 0.9)]];
        let run = |emit| {
            let mut dec = Scripted {
                frames: frames.clone(),
                n_detect: 2,
                carried: vec![],
                last_detect: vec![],
            };
            let cfg = LifecycleConfig {
                miss_tolerance: 3,
                emit_during_grace: emit,
                ..LifecycleConfig::default()
            };
            let out = track_sequence(&mut dec, &vec![Tensor::zeros(&[1, 1, 1]); 4], &cfg).unwrap();
            out.iter().map(|o| o.frame).collect::<Vec<_>>()
        };
        assert_eq!(run(true), vec![1, 2, 3, 4]);
        assert_eq!(run(false), vec![1, 4]);
    }

    #[test]
    fn empty_scene_and_determinism() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_detect_queries: 4,
            image_size: 16,
            ffn_dim: 16,
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let frames = vec![Tensor::zeros(&cfg.image_shape()); 3];
        let out = track_sequence(&mut ModelDecoder::new(&model), &frames, &LifecycleConfig::default()).unwrap();
        // fresh heads start near the class prior, far below the entrance threshold
        assert!(out.is_empty());

        // a permissive threshold admits everything and must be repeatable
        let lax = LifecycleConfig {
            tau_en: 1e-6,
            tau_ex: 1e-6,
            ..LifecycleConfig::default()
        };
        let a = track_sequence(&mut ModelDecoder::new(&model), &frames, &lax).unwrap();
        let b = track_sequence(&mut ModelDecoder::new(&model), &frames, &lax).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|o| o.frame == 1).count(), 4);
        assert_eq!(a.iter().filter(|o| o.frame == 2).count(), 8);
        let bad = vec![Tensor::zeros(&[8, 8, 1])];
        assert!(matches!(
            track_sequence(&mut ModelDecoder::new(&model), &bad, &lax),
            Err(TrackError::FrameShape { .. })
        ));
    }
}
