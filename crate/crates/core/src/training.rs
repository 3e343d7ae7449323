//! Clip-level training: per-frame label assignment, query filtering and
//! augmentation, the averaged clip loss, and the optimizer step.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::tensor_to_boxes;
use crate::losses::{collective_average_loss, frame_loss, ClipLossAccumulator, FrameLoss, LossError, LossWeights};
use crate::matching::{assign_newborn, Assignment, GtObject, MatchError, ObjectId};
use crate::model::{Bound, FramePredictions, Model, ModelError, QueryRecord};
use crate::qim::{advance, filter_train, IdAllocator, TrainSelection};
use crate::scalar::Scalar;
use crate::simulator::{sample_clip, Clip, SimError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub start_epoch: usize,
    pub clip_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub p_drop: f64,
    pub p_insert: f64,
    /// Most false positives inserted per event.
    pub k_fp: usize,
    pub clip_curriculum: Vec<CurriculumStage>,
    pub max_interval: usize,
    pub learning_rate: f64,
    pub lr_decay: Option<LrDecay>,
    /// Iterations of linear learning-rate ramp from zero.
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Write a checkpoint every this many iterations; zero disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

/// The MOT17 clip-length schedule: 2 frames, then 3, 4 and 5.
pub fn mot_schedule() -> Vec<CurriculumStage> {
    [(0, 2), (50, 3), (90, 4), (150, 5)]
        .into_iter()
        .map(|(start_epoch, clip_len)| CurriculumStage { start_epoch, clip_len })
        .collect()
}

/// A single stage of fixed length from epoch zero.
pub fn fixed_schedule(clip_len: usize) -> Vec<CurriculumStage> {
    vec![CurriculumStage {
        start_epoch: 0,
        clip_len,
    }]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.1,
            p_insert: 0.3,
            k_fp: 1,
            clip_curriculum: mot_schedule(),
            max_interval: 10,
            learning_rate: 2e-4,
            lr_decay: Some(LrDecay {
                epoch: 100,
                factor: 0.1,
            }),
            warmup_iters: 0,
            weight_decay: 1e-4,
            grad_clip_norm: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("p_drop", self.p_drop), ("p_insert", self.p_insert)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let c = &self.clip_curriculum;
        if c.is_empty() || c[0].start_epoch != 0 {
            return Err("clip_curriculum must start at epoch 0".into());
        }
        if c.iter().any(|s| s.clip_len == 0) {
            return Err("clip lengths must be positive".into());
        }
        if c.windows(2)
            .any(|w| w[1].start_epoch <= w[0].start_epoch || w[1].clip_len < w[0].clip_len)
        {
            return Err("clip_curriculum must have increasing epochs and nondecreasing lengths".into());
        }
        if self.max_interval == 0 {
            return Err("max_interval must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.grad_clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err("learning_rate and grad_clip_norm must be positive, weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err("betas must lie in [0, 1) and adam_eps be positive".into());
        }
        Ok(())
    }

    pub fn max_clip_len(&self) -> usize {
        self.clip_curriculum.iter().map(|s| s.clip_len).max().unwrap_or(1)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_decay {
            Some(d) if epoch >= d.epoch => self.learning_rate * d.factor,
            _ => self.learning_rate,
        }
    }
}

/// Length of the last stage whose start is not after `epoch`.
pub fn curriculum_len(epoch: usize, schedule: &[CurriculumStage]) -> usize {
    schedule
        .iter()
        .take_while(|s| s.start_epoch <= epoch)
        .last()
        .or(schedule.first())
        .map_or(1, |s| s.clip_len)
}

/// State of a failing frame, for post-mortems of non-finite losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub frame: Option<usize>,
    pub assignment: String,
    pub score_min: f64,
    pub score_max: f64,
    pub score_mean: f64,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.frame {
            Some(i) => write!(f, "frame {i}")?,
            None => write!(f, "gradient")?,
        }
        write!(
            f,
            ", assignment {}, scores min {:.4} max {:.4} mean {:.4}",
            self.assignment, self.score_min, self.score_max, self.score_mean
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at {0}")]
    NonFinite(Box<Diagnostic>),
    #[error("clip has no frames")]
    EmptyClip,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Drops each kept query independently with probability `p_drop`; dropped
/// objects have no track query next frame and reappear as newborns.
pub fn erase_track_queries(sel: &mut TrainSelection, p_drop: f64, rng: &mut impl Rng) -> usize {
    if p_drop <= 0.0 {
        return 0;
    }
    let before = sel.transition.len();
    let t = &mut sel.transition;
    let keep: Vec<bool> = (0..t.survivors.len()).map(|_| !rng.random_bool(p_drop)).collect();
    retain_by(&mut t.survivors, &keep);
    retain_by(&mut t.survivor_records, &keep);
    retain_by(&mut sel.survivor_ids, &keep);
    let keep: Vec<bool> = (0..t.newborns.len()).map(|_| !rng.random_bool(p_drop)).collect();
    retain_by(&mut t.newborns, &keep);
    retain_by(&mut t.newborn_records, &keep);
    retain_by(&mut sel.newborn_ids, &keep);
    before - sel.transition.len()
}

fn retain_by<X>(v: &mut Vec<X>, keep: &[bool]) {
    let mut i = 0;
    v.retain(|_| {
        i += 1;
        keep[i - 1]
    });
}

/// With probability `p_insert`, appends up to `k_fp` background detect
/// queries, highest score first, as identity-less track queries.
pub fn insert_false_positives<T: Scalar>(
    sel: &mut TrainSelection,
    omega_det: &Assignment,
    detect_scores: &[T],
    p_insert: f64,
    k_fp: usize,
    ids: &mut IdAllocator,
    rng: &mut impl Rng,
) -> usize {
    if p_insert <= 0.0 || !rng.random_bool(p_insert) {
        return 0;
    }
    let mut bg: Vec<usize> = (0..detect_scores.len()).filter(|&j| omega_det.get(j).is_none()).collect();
    bg.sort_by(|&a, &b| detect_scores[b].partial_cmp(&detect_scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let picked = bg.len().min(k_fp);
    for &j in &bg[..picked] {
        sel.transition.newborns.push(j);
        sel.transition.newborn_records.push(QueryRecord::track(ids.fresh()));
        sel.newborn_ids.push(None);
    }
    picked
}

/// Everything computed for one frame of a training clip.
#[derive(Debug, Clone)]
pub struct FrameTrace<'t, T> {
    pub preds: FramePredictions<'t, T>,
    pub track_records: Vec<QueryRecord>,
    /// Track-block labels after dropping absent identities.
    pub omega_tr: Assignment,
    /// Detect-block labels, newborn objects only.
    pub omega_det: Assignment,
    pub track_loss: FrameLoss<'t, T>,
    pub detect_loss: FrameLoss<'t, T>,
    /// What carried over to the next frame, after augmentation.
    pub selection: Option<TrainSelection>,
}

#[derive(Debug, Clone)]
pub struct ClipForward<'t, T> {
    pub loss: Var<'t, T>,
    pub objects: usize,
    pub frames: Vec<FrameTrace<'t, T>>,
}

/// Knobs of one clip's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSettings {
    pub weights: LossWeights,
    pub iou_keep: f64,
    pub p_drop: f64,
    pub p_insert: f64,
    pub k_fp: usize,
}

fn score_stats<T: Scalar>(scores: &[T]) -> (f64, f64, f64) {
    let v: Vec<f64> = scores.iter().map(|s| s.as_f64()).collect();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    (min, max, mean)
}

fn describe(a: &Assignment) -> String {
    let mut s = String::from("[");
    for (i, slot) in a.slots().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        match slot {
            Some(id) => write!(s, "{}", id.0).unwrap(),
            None => s.push('-'),
        }
    }
    s.push(']');
    s
}

/// Runs the clip through the model, building the averaged clip loss. Track
/// queries stay on the tape across frames, so gradients flow through them.
pub fn clip_forward<'t, T: Scalar>(
    model: &Model<T>,
    clip: &Clip<T>,
    settings: &ClipSettings,
    tape: &'t Tape<T>,
    p: &Bound<'t, T>,
    rng: &mut impl Rng,
) -> Result<ClipForward<'t, T>, TrainError> {
    if clip.is_empty() {
        return Err(TrainError::EmptyClip);
    }
    let w = &settings.weights;
    let d = model.config.d_model;
    let mut ids = IdAllocator::new();
    let mut track_emb = tape.constant(Tensor::empty_rows(d));
    let mut track_records: Vec<QueryRecord> = Vec::new();
    let mut carried = Assignment::background(0);
    let mut acc = ClipLossAccumulator::new();
    let mut frames = Vec::with_capacity(clip.len());
    for (fi, frame) in clip.frames.iter().enumerate() {
        let gt: Vec<GtObject<T>> = frame.visible_objects();
        let memory = model.encode(&frame.image, p)?;
        let queries = model.query_set(p, track_emb, track_records.clone())?;
        let preds = model.decode(&queries, &memory, p)?;

        let present: HashSet<ObjectId> = gt.iter().map(|g| g.id).collect();
        let omega_tr = carried.restrict_to(&present);
        let tracked = carried.ids();
        let det = preds.detect_block()?;
        let omega_det = assign_newborn(&det.probs.value(), &tensor_to_boxes(&det.boxes.value()), &gt, &tracked, w);
        let track_loss = frame_loss(preds.track_block()?, &omega_tr, &gt, w)?;
        let detect_loss = frame_loss(det, &omega_det, &gt, w)?;
        let total = track_loss.total.item().as_f64() + detect_loss.total.item().as_f64();
        if !total.is_finite() {
            let (score_min, score_max, score_mean) = score_stats(&preds.scores());
            return Err(TrainError::NonFinite(Box::new(Diagnostic {
                frame: Some(fi),
                assignment: format!("track {} detect {}", describe(&omega_tr), describe(&omega_det)),
                score_min,
                score_max,
                score_mean,
            })));
        }
        acc.push(track_loss.total, detect_loss.total, track_loss.matched, detect_loss.matched);

        let selection = if fi + 1 < clip.len() {
            let mut sel = filter_train(&preds, &queries, &omega_tr, &omega_det, &gt, settings.iou_keep, &mut ids);
            erase_track_queries(&mut sel, settings.p_drop, rng);
            let scores = preds.scores();
            insert_false_positives(
                &mut sel,
                &omega_det,
                &scores[..preds.n_detect],
                settings.p_insert,
                settings.k_fp,
                &mut ids,
                rng,
            );
            let (next, records) = advance(&preds, &queries, &sel.transition, &model.arch.tan, p)?;
            track_emb = next;
            track_records = records;
            carried = sel.assignment()?;
            Some(sel)
        } else {
            None
        };
        frames.push(FrameTrace {
            preds,
            track_records: queries.records[queries.n_detect()..].to_vec(),
            omega_tr,
            omega_det,
            track_loss,
            detect_loss,
            selection,
        });
    }
    let loss = collective_average_loss(&acc)?;
    Ok(ClipForward {
        loss,
        objects: acc.total_objects(),
        frames,
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr_t = T::of(lr);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub clip_len: usize,
    pub loss: f64,
    pub objects: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub settings: ClipSettings,
    opt: AdamW<T>,
    rng: ChaCha8Rng,
    pub iteration: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, weights: LossWeights, iou_keep: f64) -> Result<Self, TrainError> {
        cfg.validate().map_err(TrainError::Config)?;
        weights.validate().map_err(TrainError::Config)?;
        let shapes: Vec<&[usize]> = model.params.iter().map(|(_, t)| t.shape()).collect();
        let opt = AdamW::new(&shapes, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        let settings = ClipSettings {
            weights,
            iou_keep,
            p_drop: cfg.p_drop,
            p_insert: cfg.p_insert,
            k_fp: cfg.k_fp,
        };
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            settings,
            opt,
            rng,
            iteration: 0,
        })
    }

    /// Forward, backward and one optimizer step on `clip`.
    pub fn train_clip(&mut self, clip: &Clip<T>, epoch: usize) -> Result<LogRecord, TrainError> {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, true);
        let fwd = clip_forward(&self.model, clip, &self.settings, &tape, &p, &mut self.rng)?;
        tape.backward(fwd.loss)?;
        let mut grads = p.grads();
        let loss = fwd.loss.item().as_f64();
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            let last = fwd.frames.last().expect("nonempty clip");
            let (score_min, score_max, score_mean) = score_stats(&last.preds.scores());
            return Err(TrainError::NonFinite(Box::new(Diagnostic {
                frame: None,
                assignment: describe(&last.omega_det),
                score_min,
                score_max,
                score_mean,
            })));
        }
        let warm = if self.cfg.warmup_iters > 0 {
            ((self.iteration + 1) as f64 / self.cfg.warmup_iters as f64).min(1.0)
        } else {
            1.0
        };
        self.opt.update(self.model.params.tensors_mut(), &grads, self.cfg.lr_at(epoch) * warm);
        self.iteration += 1;
        Ok(LogRecord {
            iteration: self.iteration,
            epoch,
            clip_len: clip.len(),
            loss,
            objects: fwd.objects,
            grad_norm,
        })
    }

    /// Samples one clip from every sequence, in shuffled order, and trains on each.
    pub fn train_epoch(&mut self, sequences: &[Clip<T>], epoch: usize) -> Result<Vec<LogRecord>, TrainError> {
        self.train_epoch_with(sequences, epoch, |_, _| {})
    }

    /// As [`Trainer::train_epoch`], calling `after_step` after every update.
    pub fn train_epoch_with(
        &mut self,
        sequences: &[Clip<T>],
        epoch: usize,
        mut after_step: impl FnMut(&Model<T>, &LogRecord),
    ) -> Result<Vec<LogRecord>, TrainError> {
        let len = curriculum_len(epoch, &self.cfg.clip_curriculum);
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut self.rng);
        let mut log = Vec::with_capacity(order.len());
        for i in order {
            let seq = &sequences[i];
            let len = len.min(seq.len());
            let interval = if len > 1 {
                self.cfg.max_interval.min((seq.len() - 1) / (len - 1)).max(1)
            } else {
                1
            };
            let clip = sample_clip(seq, len, interval, &mut self.rng)?;
            let rec = self.train_clip(&clip, epoch)?;
            after_step(&self.model, &rec);
            log.push(rec);
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TrackId};
    use crate::qim::Transition;
    use crate::simulator::{simulate_sequence, WorldConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            n_detect_queries: 6,
            patch_size: 8,
            image_size: 32,
            ffn_dim: 32,
            ..ModelConfig::default()
        }
    }

    fn world(seed: u64) -> WorldConfig {
        WorldConfig {
            image_size: 32,
            initial_objects: 2,
            max_objects: 3,
            birth_rate: 0.2,
            death_rate: 0.1,
            seed,
            ..WorldConfig::default()
        }
    }

    fn settings(p_drop: f64, p_insert: f64) -> ClipSettings {
        ClipSettings {
            weights: LossWeights::default(),
            iou_keep: 0.5,
            p_drop,
            p_insert,
            k_fp: 1,
        }
    }

    #[test]
    fn curriculum_lookup() {
        let s = mot_schedule();
        assert_eq!(curriculum_len(0, &s), 2);
        assert_eq!(curriculum_len(49, &s), 2);
        assert_eq!(curriculum_len(90, &s), 4);
        assert_eq!(curriculum_len(1000, &s), 5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            clip_curriculum: vec![
                CurriculumStage {
                    start_epoch: 0,
                    clip_len: 3,
                },
                CurriculumStage {
                    start_epoch: 5,
                    clip_len: 2,
                },
            ],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig {
            p_drop: 1.5,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(99), 2e-4);
        assert!((cfg.lr_at(100) - 2e-5).abs() < 1e-18);
    }

    fn selection(n: usize) -> TrainSelection {
        TrainSelection {
            transition: Transition {
                survivors: (0..n).collect(),
                survivor_records: (0..n as u64).map(|i| QueryRecord::track(TrackId(i + 1))).collect(),
                newborns: vec![0],
                newborn_records: vec![QueryRecord::track(TrackId(99))],
            },
            survivor_ids: (0..n as u64).map(|i| Some(ObjectId(i + 1))).collect(),
            newborn_ids: vec![Some(ObjectId(99))],
        }
    }

    #[test]
    fn erase_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = selection(5);
        assert_eq!(erase_track_queries(&mut s, 0.0, &mut rng), 0);
        assert_eq!(s, selection(5));
        assert_eq!(erase_track_queries(&mut s, 1.0, &mut rng), 6);
        assert!(s.transition.is_empty() && s.survivor_ids.is_empty() && s.newborn_ids.is_empty());
    }

    #[test]
    fn erase_keeps_lists_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = selection(40);
        erase_track_queries(&mut s, 0.5, &mut rng);
        for (slot, id) in s.transition.survivor_records.iter().zip(&s.survivor_ids) {
            assert_eq!(slot.track_id.unwrap().0, id.unwrap().0);
        }
        assert_eq!(s.transition.survivors.len(), s.survivor_ids.len());
    }

    #[test]
    fn insert_takes_best_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ids = IdAllocator::new();
        let omega = Assignment::from_slots(vec![None, Some(ObjectId(1)), None, None]).unwrap();
        let scores = [0.2, 0.9, 0.7, 0.1];
        let mut s = selection(0);
        assert_eq!(insert_false_positives(&mut s, &omega, &scores, 0.0, 1, &mut ids, &mut rng), 0);
        assert_eq!(s, selection(0));
        assert_eq!(insert_false_positives(&mut s, &omega, &scores, 1.0, 2, &mut ids, &mut rng), 2);
        assert_eq!(s.transition.newborns, vec![0, 2, 0]);
        assert_eq!(s.newborn_ids, vec![Some(ObjectId(99)), None, None]);
        let a = s.assignment().unwrap();
        assert_eq!(a.slots(), &[Some(ObjectId(99)), None, None]);
    }

    #[test]
    fn single_frame_clip_is_detection_only() {
        let model = Model::<f64>::new(tiny_model()).unwrap();
        let seq: Clip<f64> = simulate_sequence(&world(0), 1).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = clip_forward(&model, &seq, &settings(0.0, 0.0), &tape, &p, &mut rng).unwrap();
        assert_eq!(fwd.frames.len(), 1);
        assert_eq!(fwd.frames[0].preds.n_track(), 0);
        assert!(fwd.frames[0].selection.is_none());
        let v = fwd.frames[0].omega_det.matched();
        assert_eq!(v, seq.frames[0].visible_objects().len());
        let expect = fwd.frames[0].detect_loss.total.item() / v.max(1) as f64;
        assert!((fwd.loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn full_erasure_matches_per_frame_detection() {
        let model = Model::<f64>::new(tiny_model()).unwrap();
        let seq: Clip<f64> = simulate_sequence(&world(3), 4).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = clip_forward(&model, &seq, &settings(1.0, 0.0), &tape, &p, &mut rng).unwrap();

        let mut sum = 0.0;
        let mut v = 0;
        for f in &seq.frames {
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            let single = Clip { frames: vec![f.clone()] };
            let one = clip_forward(&model, &single, &settings(0.0, 0.0), &tape, &p, &mut rng).unwrap();
            sum += one.frames[0].detect_loss.total.item();
            v += one.frames[0].detect_loss.matched;
        }
        assert!(fwd.frames.iter().all(|f| f.preds.n_track() == 0));
        assert!((fwd.loss.item() - sum / v.max(1) as f64).abs() < 1e-10);
    }

    #[test]
    fn loss_reaches_last_frame_through_track_queries() {
        let model = Model::<f64>::new(tiny_model()).unwrap();
        let cfg = WorldConfig {
            birth_rate: 0.0,
            death_rate: 0.0,
            ..world(5)
        };
        let seq: Clip<f64> = simulate_sequence(&cfg, 5).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = settings(0.0, 0.0);
        // keep every matched query alive regardless of box quality
        s.iou_keep = 1e-9;
        let fwd = clip_forward(&model, &seq, &s, &tape, &p, &mut rng).unwrap();
        let last = fwd.frames.last().unwrap();
        assert!(last.preds.n_track() > 0);
        tape.backward(last.track_loss.total).unwrap();
        let g = fwd.frames[0].preds.hidden.grad().expect("gradient reaches frame 0");
        assert!(g.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn tracked_identities_stay_bound_to_slots() {
        let model = Model::<f64>::new(tiny_model()).unwrap();
        let seq: Clip<f64> = simulate_sequence(&world(7), 6).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = settings(0.2, 0.5);
        s.iou_keep = 1e-9;
        let fwd = clip_forward(&model, &seq, &s, &tape, &p, &mut rng).unwrap();
        let mut binding = std::collections::HashMap::new();
        for f in &fwd.frames {
            let tracked: HashSet<_> = f.omega_tr.ids();
            assert!(f.omega_det.ids().is_disjoint(&tracked));
            for (rec, slot) in f.track_records.iter().zip(f.omega_tr.slots()) {
                if let Some(id) = slot {
                    let prev = binding.insert(rec.track_id.unwrap(), *id);
                    assert!(prev.is_none() || prev == Some(*id));
                }
            }
        }
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let mut opt = AdamW::<f64>::new(&[&[2]], 0.9, 0.999, 1e-8, 0.01);
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.5, -0.25]).unwrap()];
        opt.update(&mut p, &g, 0.1);
        // first step: m̂ = g, v̂ = g², update = lr·sign(g) (up to eps)
        let expect = [1.0 * (1.0 - 0.001) - 0.1, -2.0 * (1.0 - 0.001) + 0.1];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn grad_clipping() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        let mut g = vec![Tensor::new(vec![1], vec![0.05f64]).unwrap()];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.05]);
    }

    #[test]
    fn identical_runs_without_augmentation() {
        let seqs: Vec<Clip<f32>> = (0..2).map(|s| simulate_sequence(&world(s), 6).unwrap()).collect();
        let cfg = TrainConfig {
            p_drop: 0.0,
            p_insert: 0.0,
            clip_curriculum: fixed_schedule(3),
            max_interval: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Model::<f32>::new(tiny_model()).unwrap();
            let mut t = Trainer::new(model, cfg.clone(), LossWeights::default(), 0.5).unwrap();
            for e in 0..2 {
                t.train_epoch(&seqs, e).unwrap();
            }
            t.model.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn smoothed_loss_decreases() {
        let seqs: Vec<Clip<f32>> = (0..4).map(|s| simulate_sequence(&world(s), 4).unwrap()).collect();
        let cfg = TrainConfig {
            clip_curriculum: fixed_schedule(2),
            max_interval: 1,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let model = Model::<f32>::new(tiny_model()).unwrap();
        let mut t = Trainer::new(model, cfg, LossWeights::default(), 0.5).unwrap();
        let mut losses = Vec::new();
        for e in 0..13 {
            losses.extend(t.train_epoch(&seqs, e).unwrap().iter().map(|r| r.loss));
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss went from {head} to {tail}");
        assert_eq!(t.iteration, 52);
    }
}
