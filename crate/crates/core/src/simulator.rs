//! Synthetic video: rectangles drifting with noisy constant velocity,
//! reflecting at the borders, appearing and vanishing at random.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::matching::{GtObject, ObjectId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("sequence of {len} frames is shorter than the {needed} a clip may span")]
    TooShort { needed: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub max_objects: usize,
    /// Objects alive in the first frame.
    pub initial_objects: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Speed range in image widths per frame.
    pub velocity_range: [f64; 2],
    pub accel_noise_sigma: f64,
    pub birth_rate: f64,
    pub death_rate: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub pixel_noise_sigma: f64,
    /// Objects whose unoccluded area fraction falls below this are marked invisible.
    pub min_visible_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            max_objects: 4,
            initial_objects: 2,
            image_size: 64,
            channels: 1,
            velocity_range: [0.005, 0.03],
            accel_noise_sigma: 0.002,
            birth_rate: 0.05,
            death_rate: 0.02,
            min_size: 0.12,
            max_size: 0.3,
            pixel_noise_sigma: 0.05,
            min_visible_fraction: 0.25,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        for (name, r) in [("birth_rate", self.birth_rate), ("death_rate", self.death_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.max_objects == 0 || self.initial_objects > self.max_objects {
            return bad(format!(
                "need 0 < initial_objects <= max_objects, got {} and {}",
                self.initial_objects, self.max_objects
            ));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 1.0) {
            return bad(format!("need 0 < min_size <= max_size < 1, got {} and {}", self.min_size, self.max_size));
        }
        let [lo, hi] = self.velocity_range;
        if !(0.0 <= lo && lo <= hi) {
            return bad(format!("velocity_range must be ordered and nonnegative, got {lo}..{hi}"));
        }
        if self.image_size == 0 || self.channels == 0 {
            return bad("image_size and channels must be positive".into());
        }
        if self.accel_noise_sigma < 0.0 || self.pixel_noise_sigma < 0.0 {
            return bad("noise levels must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    /// Position in the source sequence, zero-based.
    pub index: usize,
    /// `[H, W, C]`
    pub image: Tensor<T>,
    pub objects: Vec<GtObject<T>>,
}

impl<T: Scalar> Frame<T> {
    pub fn visible_objects(&self) -> Vec<GtObject<T>> {
        self.objects.iter().filter(|o| o.visible).cloned().collect()
    }

    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame {
            index: self.index,
            image: self.image.cast(),
            objects: self
                .objects
                .iter()
                .map(|o| GtObject {
                    id: o.id,
                    class: o.class,
                    bbox: o.bbox.cast(),
                    visible: o.visible,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip<T> {
    pub frames: Vec<Frame<T>>,
}

impl<T: Scalar> Clip<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Clip<U> {
        Clip {
            frames: self.frames.iter().map(Frame::cast).collect(),
        }
    }
}

/// An object as the renderer sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sprite {
    pub id: ObjectId,
    pub bbox: BBox<f64>,
    pub intensity: [f64; 3],
}

#[derive(Debug, Clone)]
struct Body {
    sprite: Sprite,
    vx: f64,
    vy: f64,
}

fn spawn(cfg: &WorldConfig, id: u64, rng: &mut ChaCha8Rng) -> Body {
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    let h = rng.random_range(cfg.min_size..=cfg.max_size);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    let [lo, hi] = cfg.velocity_range;
    let speed = rng.random_range(lo..=hi);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut intensity = [0.0; 3];
    for v in &mut intensity {
        *v = rng.random_range(0.35..=1.0);
    }
    Body {
        sprite: Sprite {
            id: ObjectId(id),
            bbox: BBox::new(cx, cy, w, h),
            intensity,
        },
        vx: speed * angle.cos(),
        vy: speed * angle.sin(),
    }
}

/// Moves `c` by `v`, folding it back into `[half, 1 - half]`.
fn reflect(c: f64, v: f64, half: f64) -> (f64, f64) {
    let (lo, hi) = (half, 1.0 - half);
    let mut c = c + v;
    let mut v = v;
    if c < lo {
        c = 2.0 * lo - c;
        v = -v;
    } else if c > hi {
        c = 2.0 * hi - c;
        v = -v;
    }
    (c.clamp(lo, hi), v)
}

fn step(body: &mut Body, sigma: f64, noise: &Normal<f64>, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        body.vx += noise.sample(rng);
        body.vy += noise.sample(rng);
    }
    let b = &mut body.sprite.bbox;
    (b.cx, body.vx) = reflect(b.cx, body.vx, b.w / 2.0);
    (b.cy, body.vy) = reflect(b.cy, body.vy, b.h / 2.0);
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` covered by a box: pixels whose centers fall inside.
fn pixel_span(b: &BBox<f64>, size: usize) -> (usize, usize, usize, usize) {
    let (l, t, r, btm) = b.corners();
    let s = size as f64;
    let lo = |v: f64| ((v * s - 0.5).ceil().max(0.0) as usize).min(size);
    let hi = |v: f64| (((v * s - 0.5).floor() + 1.0).max(0.0) as usize).min(size);
    (lo(l), hi(r), lo(t), hi(btm))
}

/// Noise-free painter's-order coverage: which sprite owns each pixel.
fn owners(sprites: &[Sprite], size: usize) -> Vec<Option<usize>> {
    let mut own = vec![None; size * size];
    let mut order: Vec<usize> = (0..sprites.len()).collect();
    order.sort_by_key(|&i| sprites[i].id);
    for i in order {
        let (x0, x1, y0, y1) = pixel_span(&sprites[i].bbox, size);
        for y in y0..y1 {
            for x in x0..x1 {
                own[y * size + x] = Some(i);
            }
        }
    }
    own
}

/// Filled rectangles on a black background, later-born sprites on top, plus
/// Gaussian pixel noise.
pub fn render_frame<T: Scalar>(
    sprites: &[Sprite],
    image_size: usize,
    channels: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let own = owners(sprites, image_size);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(image_size * image_size * channels);
    for o in &own {
        for c in 0..channels {
            let base = o.map_or(0.0, |i| sprites[i].intensity[c % 3]);
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(T::of(base + n));
        }
    }
    Tensor::new(vec![image_size, image_size, channels], data).expect("consistent extents")
}

fn visibility(sprites: &[Sprite], size: usize) -> Vec<f64> {
    let own = owners(sprites, size);
    sprites
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (x0, x1, y0, y1) = pixel_span(&s.bbox, size);
            let total = (x1 - x0) * (y1 - y0);
            if total == 0 {
                return 0.0;
            }
            let shown = own.iter().filter(|&&o| o == Some(i)).count();
            shown as f64 / total as f64
        })
        .collect()
}

/// Deterministic in `cfg.seed`.
pub fn simulate_sequence<T: Scalar>(cfg: &WorldConfig, length: usize) -> Result<Clip<T>, SimError> {
    cfg.validate()?;
    if length == 0 {
        return Err(SimError::Config("sequence length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.accel_noise_sigma).expect("finite sigma");
    let mut next_id = 0u64;
    let mut alive: Vec<Body> = Vec::new();
    let mut frames = Vec::with_capacity(length);
    for index in 0..length {
        if index == 0 {
            for _ in 0..cfg.initial_objects {
                next_id += 1;
                alive.push(spawn(cfg, next_id, &mut rng));
            }
        } else {
            alive.retain(|_| !rng.random_bool(cfg.death_rate));
            for b in &mut alive {
                step(b, cfg.accel_noise_sigma, &noise, &mut rng);
            }
            if rng.random_bool(cfg.birth_rate) && alive.len() < cfg.max_objects {
                next_id += 1;
                alive.push(spawn(cfg, next_id, &mut rng));
            }
        }
        let sprites: Vec<Sprite> = alive.iter().map(|b| b.sprite).collect();
        let vis = visibility(&sprites, cfg.image_size);
        let image = render_frame(&sprites, cfg.image_size, cfg.channels, cfg.pixel_noise_sigma, &mut rng);
        let objects = sprites
            .iter()
            .zip(vis)
            .map(|(s, v)| GtObject {
                id: s.id,
                class: 0,
                bbox: s.bbox.cast(),
                visible: v >= cfg.min_visible_fraction,
            })
            .collect();
        frames.push(Frame { index, image, objects });
    }
    Ok(Clip { frames })
}

/// Keyframes separated by i.i.d. gaps uniform in `[1, max_interval]`, from a
/// uniformly drawn start.
pub fn sample_clip<T: Scalar>(
    sequence: &Clip<T>,
    clip_len: usize,
    max_interval: usize,
    rng: &mut impl Rng,
) -> Result<Clip<T>, SimError> {
    if clip_len == 0 || max_interval == 0 {
        return Err(SimError::Config("clip_len and max_interval must be positive".into()));
    }
    let needed = 1 + (clip_len - 1) * max_interval;
    if sequence.len() < needed {
        return Err(SimError::TooShort {
            needed,
            len: sequence.len(),
        });
    }
    let gaps: Vec<usize> = (1..clip_len).map(|_| rng.random_range(1..=max_interval)).collect();
    let span: usize = gaps.iter().sum();
    let mut at = rng.random_range(0..sequence.len() - span);
    let mut frames = vec![sequence.frames[at].clone()];
    for g in gaps {
        at += g;
        frames.push(sequence.frames[at].clone());
    }
    Ok(Clip { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn quiet() -> WorldConfig {
        WorldConfig {
            birth_rate: 0.0,
            death_rate: 0.0,
            initial_objects: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a: Clip<f64> = simulate_sequence(&WorldConfig::default(), 30).unwrap();
        let b: Clip<f64> = simulate_sequence(&WorldConfig::default(), 30).unwrap();
        assert_eq!(a, b);
        let c: Clip<f64> = simulate_sequence(&WorldConfig { seed: 1, ..WorldConfig::default() }, 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_births_no_deaths_keeps_identities() {
        let clip: Clip<f64> = simulate_sequence(&quiet(), 50).unwrap();
        for f in &clip.frames {
            let ids: Vec<_> = f.objects.iter().map(|o| o.id.0).collect();
            assert_eq!(ids, vec![1, 2, 3]);
        }
    }

    #[test]
    fn boxes_stay_inside() {
        let cfg = WorldConfig {
            velocity_range: [0.05, 0.1],
            accel_noise_sigma: 0.02,
            ..quiet()
        };
        let clip: Clip<f64> = simulate_sequence(&cfg, 200).unwrap();
        for o in clip.frames.iter().flat_map(|f| &f.objects) {
            let (l, t, r, b) = o.bbox.corners();
            assert!(l >= -1e-12 && t >= -1e-12 && r <= 1.0 + 1e-12 && b <= 1.0 + 1e-12);
            assert!(o.bbox.w > 0.0 && o.bbox.h > 0.0);
        }
    }

    #[test]
    fn birth_count_matches_rate() {
        let n = 10_000;
        let p = 0.1;
        let cfg = WorldConfig {
            max_objects: 1000,
            initial_objects: 0,
            birth_rate: p,
            death_rate: 0.5,
            ..WorldConfig::default()
        };
        // rendering dominates; a tiny canvas keeps this quick
        let cfg = WorldConfig { image_size: 4, ..cfg };
        let clip: Clip<f64> = simulate_sequence(&cfg, n + 1).unwrap();
        let mean = p * n as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        // ids are sequential, so the largest one counts births
        let max_id = clip.frames.iter().flat_map(|f| &f.objects).map(|o| o.id.0).max().unwrap();
        assert!((max_id as f64 - mean).abs() < 3.0 * sd, "{max_id} births vs {mean}");
    }

    #[test]
    fn identities_born_in_order_and_never_reused() {
        let cfg = WorldConfig {
            birth_rate: 0.3,
            death_rate: 0.1,
            ..WorldConfig::default()
        };
        let clip: Clip<f64> = simulate_sequence(&cfg, 300).unwrap();
        let mut seen = HashSet::new();
        let mut dead = HashSet::new();
        let mut last_new = 0;
        let mut prev: HashSet<ObjectId> = HashSet::new();
        for f in &clip.frames {
            assert!(f.objects.len() <= cfg.max_objects);
            let cur: HashSet<_> = f.objects.iter().map(|o| o.id).collect();
            for id in f.objects.iter().map(|o| &o.id) {
                assert!(!dead.contains(id));
                if seen.insert(*id) {
                    assert!(id.0 > last_new);
                    last_new = id.0;
                }
            }
            dead.extend(prev.difference(&cur).copied());
            prev = cur;
        }
    }

    #[test]
    fn render_empty_is_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img: Tensor<f64> = render_frame(&[], 16, 1, 0.05, &mut rng);
        let mean = img.data().iter().sum::<f64>() / 256.0;
        assert!(mean.abs() < 0.02);
        let clean: Tensor<f64> = render_frame(&[], 16, 1, 0.0, &mut rng);
        assert!(clean.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_full_frame_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Sprite {
            id: ObjectId(1),
            bbox: BBox::new(0.5, 0.5, 1.0, 1.0),
            intensity: [0.7; 3],
        };
        let img: Tensor<f64> = render_frame(&[s], 16, 1, 0.0, &mut rng);
        assert!(img.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn later_born_drawn_on_top() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let old = Sprite {
            id: ObjectId(1),
            bbox: BBox::from_tlwh(0.0, 0.0, 0.5, 0.5),
            intensity: [0.4; 3],
        };
        let young = Sprite {
            id: ObjectId(2),
            bbox: BBox::from_tlwh(0.25, 0.25, 0.5, 0.5),
            intensity: [0.9; 3],
        };
        // order of the slice must not matter
        let img: Tensor<f64> = render_frame(&[young, old], 8, 1, 0.0, &mut rng);
        let px = |x: usize, y: usize| img.data()[y * 8 + x];
        assert_eq!(px(0, 0), 0.4);
        assert_eq!(px(2, 2), 0.9);
        assert_eq!(px(3, 3), 0.9);
        assert_eq!(px(5, 5), 0.9);
        assert_eq!(px(7, 7), 0.0);
        let vis = visibility(&[old, young], 8);
        assert_eq!(vis, vec![12.0 / 16.0, 1.0]);
    }

    #[test]
    fn consecutive_when_interval_one() {
        let seq: Clip<f64> = simulate_sequence(&WorldConfig { image_size: 8, ..quiet() }, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = sample_clip(&seq, 5, 1, &mut rng).unwrap();
            let idx: Vec<_> = c.frames.iter().map(|f| f.index).collect();
            assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
        }
        assert!(matches!(
            sample_clip(&seq, 5, 10, &mut rng),
            Err(SimError::TooShort { needed: 41, len: 20 })
        ));
    }

    #[test]
    fn gap_histogram_uniform() {
        let seq: Clip<f64> = simulate_sequence(&WorldConfig { image_size: 4, ..quiet() }, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 10;
        let mut hist = vec![0usize; k];
        let draws = 10_000;
        for _ in 0..draws {
            let c = sample_clip(&seq, 2, k, &mut rng).unwrap();
            hist[c.frames[1].index - c.frames[0].index - 1] += 1;
        }
        let e = draws as f64 / k as f64;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // chi-square 99th percentile with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 {chi2} for {hist:?}");
    }
}
