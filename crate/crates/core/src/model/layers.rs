//! Parameterized building blocks shared by the encoder, decoder and TAN.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, trainable or frozen.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn gaussian(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::of(value)))
    }
}

/// Parameters recorded on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradient of every parameter after `backward`, zeros where none flowed.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: ps.xavier(format!("{name}.weight"), d_in, d_out, rng),
            b: ps.constant(format!("{name}.bias"), &[d_out], 0.0),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: ps.constant(format!("{name}.gain"), &[d], 1.0),
            bias: ps.constant(format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), T::of(LN_EPS))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, d, rng),
            act,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let h = self.up.forward(x, p)?.activate(self.act);
        self.down.forward(h, p)
    }
}

/// Scaled dot-product attention split over `n_heads` column groups.
///
/// Returns the concatenated head outputs and each head's `[a, b]` weights.
pub fn attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    n_heads: usize,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>), TensorError> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let d = qs[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            msg: format!("width {d} not divisible into {n_heads} heads"),
        });
    }
    if ks[1] != d || vs[1] != d || ks[0] != vs[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: ks,
            right: vs,
        });
    }
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (q.slice(1, h * dh, dh)?, k.slice(1, h * dh, dh)?, v.slice(1, h * dh, dh)?)
        };
        let w = qh.scale(scale).matmul_nt(kh)?.softmax(1)?;
        outs.push(w.matmul(vh)?);
        weights.push(w);
    }
    let out = if n_heads == 1 {
        outs[0]
    } else {
        q.tape().concat(&outs, 1)?
    };
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            out: Linear::new(ps, &format!("{name}.out"), d, d, rng),
            n_heads,
        }
    }

    /// Projects `q[a,d]`, `k[b,d]`, `v[b,d]`, attends per head and projects back to `[a,d]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        p: &Bound<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let (qs, ks) = (q.shape(), k.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                left: qs,
                right: ks,
            });
        }
        let (heads, _) = attention(
            self.q.forward(q, p)?,
            self.k.forward(k, p)?,
            self.v.forward(v, p)?,
            self.n_heads,
        )?;
        self.out.forward(heads, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_mha(ps: &mut ParamStore<f64>, d: usize, heads: usize) -> MultiHeadAttention {
        let mut lin = |name: &str| Linear {
            w: ps.add(format!("{name}.w"), Tensor::eye(d)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[d])),
        };
        MultiHeadAttention {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            out: lin("o"),
            n_heads: heads,
        }
    }

    #[test]
    fn trivial_single_head() {
        let mut ps = ParamStore::new();
        let mha = identity_mha(&mut ps, 1, 1);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1]));
        assert_eq!(mha.forward(x, x, x, &p).unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn identity_projection_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rand_t = |r, c| Tensor::from_fn(&[r, c], |_| normal.sample(&mut rng));
        let (q, k, v) = (rand_t(3, 4), rand_t(5, 4), rand_t(5, 4));
        let mut ps = ParamStore::new();
        let mha = identity_mha(&mut ps, 4, 1);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let out = mha
            .forward(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &p)
            .unwrap()
            .value();
        // direct oracle: softmax(q kᵀ / 2) v
        for i in 0..3 {
            let s: Vec<f64> = (0..5)
                .map(|j| (0..4).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / 2.0)
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..4 {
                let want: f64 = (0..5).map(|j| e[j] / z * v.get2(j, c)).sum();
                assert!((out.get2(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let tape = Tape::new();
        let mut rand_v = |r, c| tape.constant(Tensor::from_fn(&[r, c], |_| normal.sample(&mut rng)));
        let (q, k, v) = (rand_v(4, 8), rand_v(6, 8), rand_v(6, 8));
        let (_, ws) = attention(q, k, v, 2).unwrap();
        for w in ws {
            let w = w.value();
            for r in 0..4 {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(w.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(attention(x, x, x, 4).is_err());
    }
}
