//! Central-difference checks over every differentiable op and the
//! composite decoder, aggregation and loss paths, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{giou_rows, l1_rows, BBox};
use crate::losses::{collective_average_loss, frame_loss, ClipLossAccumulator, LossError, LossWeights, ScoredBoxes};
use crate::matching::{Assignment, GtObject, ObjectId};
use crate::model::{attention, Model, ModelConfig, ModelError, MultiHeadAttention, ParamStore, QueryRecord, QuerySet, TrackId};
use crate::qim::{tan_forward, TanParams};
use crate::tensor::{grad_check, Activation, Tensor, TensorError, Var};

pub const SUITE_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Uniform values with magnitude in `[lo, hi]` and random sign unless
/// `positive`, keeping inputs away from kinks at zero.
fn sample(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, positive: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if positive || rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `x` shifted elementwise by at least `gap` in a random direction.
fn apart(rng: &mut ChaCha8Rng, x: &Tensor<f64>, gap: f64) -> Tensor<f64> {
    let d = sample(rng, x.shape(), gap, 2.0 * gap, false);
    Tensor::from_fn(x.shape(), |i| x.data()[i] + d.data()[i])
}

fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 4], |i| {
        if i % 4 < 2 {
            rng.random_range(0.35..0.65)
        } else {
            rng.random_range(0.15..0.4)
        }
    })
}

/// Random-weighted sum, so every output element contributes distinctly.
fn wsum<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = sample(&mut rng, &y.shape(), 0.5, 1.5, false);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

fn loss_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "frame_loss",
            msg: other.to_string(),
        },
    }
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "model",
            msg: other.to_string(),
        },
    }
}

type Check = Box<dyn Fn() -> Result<f64, TensorError>>;

macro_rules! check {
    ($x:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let x = $x;
        Box::new(move || {
            grad_check(|$tape, $v| $body, &x, EPS, SUITE_TOL).map(|r| r.max_rel_error)
        }) as Check
    }};
}

fn checks() -> Vec<(&'static str, Check)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r = &mut rng;
    let x = sample(r, &[3, 4], 0.2, 1.0, false);
    let pos = sample(r, &[3, 4], 0.3, 1.5, true);
    let c = apart(r, &x, 0.2);
    let c2 = c.clone();
    let c3 = c.clone();
    let c4 = c.clone();
    let c5 = c.clone();
    let c6 = c.clone();
    let pos_c = sample(r, &[3, 4], 0.3, 1.5, true);
    let m_b = sample(r, &[4, 5], 0.2, 1.0, false);
    let m_a = sample(r, &[2, 3], 0.2, 1.0, false);
    let m_nt = sample(r, &[5, 4], 0.2, 1.0, false);
    let gain = sample(r, &[4], 0.5, 1.5, true);
    let bias = sample(r, &[4], 0.0, 0.5, false);
    let (g2, b2) = (gain.clone(), bias.clone());
    let ln_x = x.clone();
    let other_rows = sample(r, &[2, 4], 0.2, 1.0, false);
    let other_cols = sample(r, &[3, 2], 0.2, 1.0, false);
    let keys = sample(r, &[5, 4], 0.2, 1.0, false);
    let vals = sample(r, &[5, 4], 0.2, 1.0, false);
    let (k2, v2) = (keys.clone(), vals.clone());
    let pred_boxes = boxes(r, 5);
    let tgt_boxes = boxes(r, 5);
    let tgt2 = tgt_boxes.clone();

    let mut ps = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 4, 2, r);
    let tan = TanParams::new(&mut ps, "tan", 8, 2, 12, Activation::Relu, r);
    let tan_prev = sample(r, &[3, 8], 0.2, 1.0, false);
    let tan_new = sample(r, &[1, 8], 0.2, 1.0, false);
    let tan_x = sample(r, &[3, 8], 0.2, 1.0, false);
    let ps2 = ps.clone();

    // one frame of predictions for the loss paths: 5 queries, 3 objects
    let gt: Vec<GtObject<f64>> = (0..3)
        .map(|i| GtObject {
            id: ObjectId(i as u64 + 1),
            class: 0,
            bbox: BBox::from_slice(tgt_boxes.row(i)),
            visible: true,
        })
        .collect();
    let gt2 = gt.clone();
    let logits = sample(r, &[5, 5], 0.2, 1.5, false);
    let logits2 = logits.clone();
    let assign = Assignment::from_slots(vec![Some(ObjectId(2)), None, Some(ObjectId(1)), None, Some(ObjectId(3))]).unwrap();
    let assign2 = assign.clone();
    let weights = LossWeights::default();

    let dec_cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        n_detect_queries: 3,
        patch_size: 4,
        image_size: 8,
        ffn_dim: 12,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::new(dec_cfg.clone()).expect("valid config");
    let image = sample(r, &dec_cfg.image_shape(), 0.0, 1.0, true);
    let dec_q = sample(r, &[5, 8], 0.2, 1.0, false);
    let model2 = model.clone();
    let image2 = image.clone();

    vec![
        ("add", check!(x.clone(), |t, v| wsum(v.add(t.constant(c.clone()))?, 1))),
        ("sub", check!(x.clone(), |t, v| wsum(t.constant(c2.clone()).sub(v)?, 2))),
        ("mul", check!(x.clone(), |t, v| wsum(v.mul(t.constant(c3.clone()))?, 3))),
        ("div_numerator", check!(x.clone(), |t, v| wsum(v.div(t.constant(pos_c.clone()))?, 4))),
        ("div_denominator", check!(pos.clone(), |t, v| wsum(t.constant(c4.clone()).div(v)?, 5))),
        ("maximum", check!(x.clone(), |t, v| wsum(v.maximum(t.constant(c5.clone()))?, 6))),
        ("minimum", check!(x.clone(), |t, v| wsum(v.minimum(t.constant(c6.clone()))?, 7))),
        ("neg", check!(x.clone(), |_t, v| wsum(v.neg(), 8))),
        ("scale", check!(x.clone(), |_t, v| wsum(v.scale(-2.5), 9))),
        ("add_scalar", check!(x.clone(), |_t, v| wsum(v.add_scalar(0.7).mul(v)?, 10))),
        ("rsub_scalar", check!(x.clone(), |_t, v| wsum(v.rsub_scalar(1.0).mul(v)?, 11))),
        ("sigmoid", check!(x.clone(), |_t, v| wsum(v.sigmoid(), 12))),
        ("relu", check!(x.clone(), |_t, v| wsum(v.relu(), 13))),
        ("gelu", check!(x.clone(), |_t, v| wsum(v.gelu(), 14))),
        ("exp", check!(x.clone(), |_t, v| wsum(v.exp(), 15))),
        ("log", check!(pos.clone(), |_t, v| wsum(v.log(), 16))),
        ("abs", check!(x.clone(), |_t, v| wsum(v.abs(), 17))),
        ("powf", check!(pos.clone(), |_t, v| wsum(v.powf(1.5), 18))),
        ("sum", check!(x.clone(), |_t, v| Ok(v.mul(v)?.sum()))),
        ("mean", check!(x.clone(), |_t, v| Ok(v.mul(v)?.mean()))),
        ("softmax_rows", check!(x.clone(), |_t, v| wsum(v.softmax(1)?, 19))),
        ("softmax_cols", check!(x.clone(), |_t, v| wsum(v.softmax(0)?, 20))),
        (
            "layer_norm_input",
            check!(x.clone(), |t, v| wsum(
                v.layer_norm(t.constant(gain.clone()), t.constant(bias.clone()), 1e-5)?,
                21
            )),
        ),
        (
            "layer_norm_gain",
            check!(g2.clone(), |t, v| wsum(t.constant(ln_x.clone()).layer_norm(v, t.constant(b2.clone()), 1e-5)?, 22)),
        ),
        ("transpose", check!(x.clone(), |_t, v| wsum(v.transpose()?, 23))),
        ("reshape", check!(x.clone(), |_t, v| wsum(v.reshape(&[2, 6])?.softmax(1)?, 24))),
        ("slice", check!(x.clone(), |_t, v| wsum(v.slice(1, 1, 2)?.exp(), 25))),
        ("select_rows", check!(x.clone(), |_t, v| wsum(v.select_rows(&[2, 0, 2])?, 26))),
        ("matmul_left", check!(x.clone(), |t, v| wsum(v.matmul(t.constant(m_b.clone()))?, 27))),
        ("matmul_right", check!(x.clone(), |t, v| wsum(t.constant(m_a.clone()).matmul(v)?, 28))),
        ("matmul_nt", check!(x.clone(), |t, v| wsum(v.matmul_nt(t.constant(m_nt.clone()))?, 29))),
        (
            "concat_rows",
            check!(x.clone(), |t, v| wsum(t.concat(&[v, t.constant(other_rows.clone()), v], 0)?, 30)),
        ),
        (
            "concat_cols",
            check!(x.clone(), |t, v| wsum(t.concat(&[t.constant(other_cols.clone()), v], 1)?, 31)),
        ),
        (
            "attention",
            check!(x.clone(), |t, v| wsum(
                attention(v, t.constant(keys.clone()), t.constant(vals.clone()), 2)?.0,
                32
            )),
        ),
        (
            "multi_head_attention",
            check!(x.clone(), |t, v| {
                let p = ps.bind(t, false);
                wsum(mha.forward(v, t.constant(k2.clone()), t.constant(v2.clone()), &p)?, 33)
            }),
        ),
        ("giou_rows", check!(pred_boxes.clone(), |t, v| wsum(giou_rows(v, t.constant(tgt_boxes.clone()))?, 34))),
        ("l1_rows", check!(pred_boxes.clone(), |t, v| wsum(l1_rows(v, t.constant(tgt2.clone()))?, 35))),
        (
            "frame_loss",
            check!(logits.clone(), |_t, v| {
                let probs = v.slice(1, 0, 1)?.sigmoid();
                let boxes = v.slice(1, 1, 4)?.sigmoid();
                let l = frame_loss(ScoredBoxes { probs, boxes }, &assign, &gt, &weights).map_err(loss_err)?;
                Ok(l.total)
            }),
        ),
        (
            "collective_average_loss",
            check!(logits2.clone(), |_t, v| {
                let mut acc = ClipLossAccumulator::new();
                for (k, slots) in [(0, &assign2), (1, &Assignment::from_slots(vec![None; 5]).unwrap())] {
                    let shifted = v.add_scalar(0.3 * k as f64);
                    let probs = shifted.slice(1, 0, 1)?.sigmoid();
                    let boxes = shifted.slice(1, 1, 4)?.sigmoid();
                    let l = frame_loss(ScoredBoxes { probs, boxes }, slots, &gt2, &LossWeights::default())
                        .map_err(loss_err)?;
                    let det = l.total.scale(0.5);
                    acc.push(l.total, det, l.matched, 1);
                }
                Ok(collective_average_loss(&acc).map_err(loss_err)?)
            }),
        ),
        (
            "temporal_aggregation",
            check!(tan_x.clone(), |t, v| {
                let p = ps2.bind(t, false);
                let out = tan_forward(v, t.constant(tan_prev.clone()), t.constant(tan_new.clone()), &tan, &p)?;
                wsum(out, 36)
            }),
        ),
        (
            "decoder",
            check!(dec_q.clone(), |t, v| {
                let p = model.params.bind(t, false);
                let mem = model.encode(&image, &p).map_err(model_err)?;
                let mut recs = vec![QueryRecord::detect(); 3];
                recs.extend([QueryRecord::track(TrackId(1)), QueryRecord::track(TrackId(2))]);
                let qs = QuerySet::new(v, recs)?;
                let out = model.decode(&qs, &mem, &p).map_err(model_err)?;
                Ok(wsum(out.boxes, 37)?.add(wsum(out.probs, 38)?)?)
            }),
        ),
        (
            "encoder_decoder_image",
            check!(image2.clone(), |t, v| {
                let p = model2.params.bind(t, false);
                // patchify is a fixed permutation; route it through the tape
                let flat = model2.patchify(&v.value()).map_err(model_err)?;
                let perm = permutation_of(&model2, &v.value())?;
                let tokens = v.reshape(&[v.value().numel(), 1])?.select_rows(&perm)?.reshape(flat.shape())?;
                let mem = model2.encode_patches(tokens, &p).map_err(model_err)?;
                let qs = model2.query_set(&p, t.constant(Tensor::empty_rows(8)), vec![]).map_err(model_err)?;
                let out = model2.decode(&qs, &mem, &p).map_err(model_err)?;
                Ok(wsum(out.boxes, 39)?.add(wsum(out.probs, 40)?)?)
            }),
        ),
    ]
}

/// Source index of every patchified element.
fn permutation_of(model: &Model<f64>, image: &Tensor<f64>) -> Result<Vec<usize>, TensorError> {
    let index = Tensor::from_fn(image.shape(), |i| i as f64);
    let flat = model.patchify(&index).map_err(model_err)?;
    Ok(flat.data().iter().map(|&v| v as usize).collect())
}

/// Runs every check; a check that errors is reported as failed with an
/// infinite error.
pub fn run_suite() -> Vec<CheckResult> {
    checks()
        .into_iter()
        .map(|(name, f)| {
            let err = f().unwrap_or(f64::INFINITY);
            CheckResult {
                name,
                max_rel_error: err,
                passed: err < SUITE_TOL,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run_suite();
        assert!(results.len() >= 40);
        for r in &results {
            assert!(r.passed, "{} max rel err {}", r.name, r.max_rel_error);
        }
    }
}
