//! Center-size bounding boxes and the overlap measures built on them.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, Var, CLAMP_EPS};

/// Axis-aligned box in normalized center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box from its top-left corner and extent.
    pub fn from_tlwh(left: T, top: T, w: T, h: T) -> Self {
        let half = T::of(0.5);
        Self::new(left + w * half, top + h * half, w, h)
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(&self) -> (T, T, T, T) {
        let half = T::of(0.5);
        (
            self.cx - self.w * half,
            self.cy - self.h * half,
            self.cx + self.w * half,
            self.cy + self.h * half,
        )
    }

    pub fn area(&self) -> T {
        self.w.max(T::zero()) * self.h.max(T::zero())
    }

    pub fn to_array(self) -> [T; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox::new(
            U::of(self.cx.as_f64()),
            U::of(self.cy.as_f64()),
            U::of(self.w.as_f64()),
            U::of(self.h.as_f64()),
        )
    }

    /// Nonnegative extent and below the sanity bound of 2.
    pub fn is_valid(&self) -> bool {
        let two = T::of(2.0);
        self.w >= T::zero() && self.h >= T::zero() && self.w <= two && self.h <= two
    }
}

fn overlap<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> (T, T) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(T::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(T::zero());
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

/// Intersection over union; zero when the union is empty.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (inter, union) = overlap(a, b);
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (C - U) / C`, `C` the smallest enclosing box area.
pub fn giou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (inter, union) = overlap(a, b);
    let iou = if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    };
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let c = ((ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1))).max(T::of(CLAMP_EPS));
    iou - (c - union) / c
}

/// Sum of absolute coordinate differences.
pub fn l1_box<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Stacks boxes into an `[n, 4]` tensor.
pub fn boxes_to_tensor<T: Scalar>(boxes: &[BBox<T>]) -> Tensor<T> {
    let data = boxes.iter().flat_map(|b| b.to_array()).collect();
    Tensor::new(vec![boxes.len(), 4], data).expect("4 coordinates per box")
}

pub fn tensor_to_boxes<T: Scalar>(t: &Tensor<T>) -> Vec<BBox<T>> {
    t.data().chunks_exact(4).map(BBox::from_slice).collect()
}

struct Corners<'t, T> {
    x1: Var<'t, T>,
    y1: Var<'t, T>,
    x2: Var<'t, T>,
    y2: Var<'t, T>,
    w: Var<'t, T>,
    h: Var<'t, T>,
}

fn corners_var<'t, T: Scalar>(b: Var<'t, T>) -> Result<Corners<'t, T>, TensorError> {
    let cx = b.slice(1, 0, 1)?;
    let cy = b.slice(1, 1, 1)?;
    let w = b.slice(1, 2, 1)?;
    let h = b.slice(1, 3, 1)?;
    let hw = w.scale(T::of(0.5));
    let hh = h.scale(T::of(0.5));
    Ok(Corners {
        x1: cx.sub(hw)?,
        y1: cy.sub(hh)?,
        x2: cx.add(hw)?,
        y2: cy.add(hh)?,
        w,
        h,
    })
}

fn check_boxes<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<usize, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa[1] != 4 || sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(sa[0])
}

/// Row-wise differentiable GIoU of two `[n, 4]` box tensors, shape `[n]`.
pub fn giou_rows<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    let n = check_boxes("giou_rows", &a, &b)?;
    let ca = corners_var(a)?;
    let cb = corners_var(b)?;
    let iw = ca.x2.minimum(cb.x2)?.sub(ca.x1.maximum(cb.x1)?)?.relu();
    let ih = ca.y2.minimum(cb.y2)?.sub(ca.y1.maximum(cb.y1)?)?.relu();
    let inter = iw.mul(ih)?;
    let area_a = ca.w.relu().mul(ca.h.relu())?;
    let area_b = cb.w.relu().mul(cb.h.relu())?;
    let union = area_a.add(area_b)?.sub(inter)?;
    let iou = inter.div(union)?;
    let ew = ca.x2.maximum(cb.x2)?.sub(ca.x1.minimum(cb.x1)?)?;
    let eh = ca.y2.maximum(cb.y2)?.sub(ca.y1.minimum(cb.y1)?)?;
    let enclosing = ew.mul(eh)?;
    let penalty = enclosing.sub(union)?.div(enclosing)?;
    iou.sub(penalty)?.reshape(&[n])
}

/// Row-wise differentiable L1 distance of two `[n, 4]` box tensors, shape `[n]`.
pub fn l1_rows<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    let n = check_boxes("l1_rows", &a, &b)?;
    let ones = a.tape().constant(Tensor::full(&[4, 1], T::one()));
    a.sub(b)?.abs().matmul(ones)?.reshape(&[n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(cx, cy, w, h)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.25, 0.25, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.1, 0.1, 0.1, 0.1), &b(0.8, 0.8, 0.1, 0.1)), 0.0);
        let v = iou(&a, &b(0.5, 0.5, 0.5, 0.5));
        assert!((v - 1.0 / 7.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn giou_examples() {
        let a = b(0.25, 0.25, 0.5, 0.5);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        let v = giou(&b(0.05, 0.05, 0.1, 0.1), &b(0.95, 0.95, 0.1, 0.1));
        assert!((v + 0.98).abs() < 1e-12, "{v}");
        let v = giou(&a, &b(0.5, 0.5, 0.5, 0.5));
        let expected = 1.0 / 7.0 - 0.125 / 0.5625;
        assert!((v - expected).abs() < 1e-12, "{v}");
        assert!((v + 0.07937).abs() < 1e-5);
    }

    #[test]
    fn l1_examples() {
        let a = b(0.5, 0.5, 0.2, 0.2);
        let c = b(0.6, 0.5, 0.2, 0.4);
        assert_eq!(l1_box(&a, &a), 0.0);
        assert!((l1_box(&a, &c) - 0.3).abs() < 1e-12);
        assert_eq!(l1_box(&a, &c), l1_box(&c, &a));
    }

    #[test]
    fn zero_area_is_finite() {
        let z = b(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
        assert!(giou(&z, &z).is_finite());
        let tape = Tape::new();
        let t = tape.leaf(boxes_to_tensor(&[z]));
        let g = giou_rows(t, tape.constant(boxes_to_tensor(&[z]))).unwrap();
        assert!(g.item().is_finite());
    }

    #[test]
    fn tensor_routes_match_scalar_routes() {
        let a = [b(0.25, 0.25, 0.5, 0.5), b(0.05, 0.05, 0.1, 0.1), b(0.4, 0.6, 0.2, 0.3)];
        let c = [b(0.5, 0.5, 0.5, 0.5), b(0.95, 0.95, 0.1, 0.1), b(0.45, 0.55, 0.25, 0.2)];
        let tape = Tape::new();
        let ta = tape.constant(boxes_to_tensor(&a));
        let tc = tape.constant(boxes_to_tensor(&c));
        let g = giou_rows(ta, tc).unwrap().value();
        let l = l1_rows(ta, tc).unwrap().value();
        for i in 0..3 {
            assert!((g.data()[i] - giou(&a[i], &c[i])).abs() < 1e-12);
            assert!((l.data()[i] - l1_box(&a[i], &c[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        // a and b stacked: [a(4), b(4)]
        let x = Tensor::new(vec![2, 4], vec![0.31, 0.42, 0.27, 0.33, 0.45, 0.37, 0.22, 0.41]).unwrap();
        let r = grad_check(
            |_, x| {
                let a = x.slice(0, 0, 1)?;
                let c = x.slice(0, 1, 1)?;
                Ok(giou_rows(a, c)?.sum())
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..0.6f64, 0.01..0.6f64).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn giou_bounded_by_iou(a in arb_box(), c in arb_box()) {
            let (i, g) = (iou(&a, &c), giou(&a, &c));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&g));
            prop_assert!(g <= i + 1e-12);
        }

        #[test]
        fn translation_invariance(a in arb_box(), c in arb_box(), dx in -1.0..1.0f64, dy in -1.0..1.0f64) {
            let (ta, tc) = (a.translate(dx, dy), c.translate(dx, dy));
            prop_assert!((iou(&a, &c) - iou(&ta, &tc)).abs() < 1e-9);
            prop_assert!((giou(&a, &c) - giou(&ta, &tc)).abs() < 1e-9);
        }

        #[test]
        fn giou_equals_iou_when_enclosing_is_union(a in arb_box()) {
            let inner = b(a.cx, a.cy, a.w * 0.5, a.h * 0.5);
            prop_assert!((giou(&a, &inner) - iou(&a, &inner)).abs() < 1e-12);
        }
    }
}
