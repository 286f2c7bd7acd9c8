//! Axis-aligned box primitives and the 22-d spatial feature of a subject/object pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of [`spatial_feature`]: three box deltas and two normalized coordinate tuples.
pub const SPATIAL_DIM: usize = 4 + 4 + 4 + 5 + 5;

/// Axis-aligned rectangle `(x, y, w, h)` in pixels, `(x, y)` being the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x}, {y}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got w={w}, h={h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Containment up to a relative rounding slack on the far edges.
    pub fn contains(&self, other: &BBox) -> bool {
        let slack = 1e-12 * (self.right().abs() + self.bottom().abs() + 1.0);
        self.x <= other.x
            && self.y <= other.y
            && self.right() + slack >= other.right()
            && self.bottom() + slack >= other.bottom()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSize")]
pub struct ImageSize {
    pub w: f64,
    pub h: f64,
}

#[derive(Deserialize)]
struct RawSize {
    w: f64,
    h: f64,
}

impl TryFrom<RawSize> for ImageSize {
    type Error = Error;

    fn try_from(r: RawSize) -> Result<Self> {
        ImageSize::new(r.w, r.h)
    }
}

impl ImageSize {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if !(w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("image size must be positive, got {w}x{h}")));
        }
        Ok(Self { w, h })
    }
}

/// Intersection over union. Touching or disjoint boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Tightest box around both inputs (the phrase box).
pub fn enclosing_box(a: &BBox, b: &BBox) -> BBox {
    let x0 = a.x.min(b.x);
    let y0 = a.y.min(b.y);
    let x1 = a.right().max(b.right());
    let y1 = a.bottom().max(b.bottom());
    BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Box regression delta of `b1` relative to `b2`.
pub fn box_delta(b1: &BBox, b2: &BBox) -> [f64; 4] {
    [
        (b1.x - b2.x) / b2.w,
        (b1.y - b2.y) / b2.h,
        (b1.w / b2.w).ln(),
        (b1.h / b2.h).ln(),
    ]
}

/// Corner coordinates and area normalized by the image size.
pub fn norm_coords(b: &BBox, size: &ImageSize) -> [f64; 5] {
    [
        b.x / size.w,
        b.y / size.h,
        b.right() / size.w,
        b.bottom() / size.h,
        b.area() / (size.w * size.h),
    ]
}

/// `<Δ(s,o), Δ(s,p), Δ(p,o), c(s), c(o)>` where `p` is the enclosing box of `s` and `o`.
pub fn spatial_feature(subject: &BBox, object: &BBox, size: &ImageSize) -> [f64; SPATIAL_DIM] {
    let phrase = enclosing_box(subject, object);
    let mut out = [0.0; SPATIAL_DIM];
    out[0..4].copy_from_slice(&box_delta(subject, object));
    out[4..8].copy_from_slice(&box_delta(subject, &phrase));
    out[8..12].copy_from_slice(&box_delta(&phrase, object));
    out[12..17].copy_from_slice(&norm_coords(subject, size));
    out[17..22].copy_from_slice(&norm_coords(object, size));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(ImageSize::new(0.0, 10.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &bb(5.0, 0.0, 10.0, 10.0)), 1.0 / 3.0, epsilon = 1e-15);
        // shared edge only
        assert_eq!(iou(&a, &bb(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn enclosing_examples() {
        let a = bb(1.0, 2.0, 3.0, 4.0);
        assert_eq!(enclosing_box(&a, &a), a);
        assert_eq!(
            enclosing_box(&bb(0.0, 0.0, 2.0, 2.0), &bb(3.0, 3.0, 1.0, 1.0)),
            bb(0.0, 0.0, 4.0, 4.0)
        );
        assert_eq!(
            enclosing_box(&bb(0.0, 0.0, 4.0, 4.0), &bb(1.0, 1.0, 1.0, 1.0)),
            bb(0.0, 0.0, 4.0, 4.0)
        );
    }

    #[test]
    fn delta_examples() {
        let b = bb(2.0, 3.0, 4.0, 5.0);
        assert_eq!(box_delta(&b, &b), [0.0; 4]);
        let d = box_delta(&bb(4.0, 6.0, 8.0, 10.0), &b);
        let ln2 = std::f64::consts::LN_2;
        for (got, want) in d.iter().zip([0.5, 0.6, ln2, ln2]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        let d = box_delta(&bb(0.0, 0.0, 1.0, 1.0), &bb(1.0, 1.0, 2.0, 2.0));
        for (got, want) in d.iter().zip([-0.5, -0.5, -ln2, -ln2]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn norm_coord_examples() {
        let img = ImageSize::new(100.0, 100.0).unwrap();
        assert_eq!(norm_coords(&bb(0.0, 0.0, 100.0, 100.0), &img), [0.0, 0.0, 1.0, 1.0, 1.0]);
        let c = norm_coords(&bb(10.0, 20.0, 30.0, 40.0), &img);
        for (got, want) in c.iter().zip([0.1, 0.2, 0.4, 0.6, 0.12]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        assert_eq!(norm_coords(&bb(0.0, 0.0, 50.0, 100.0), &img), [0.0, 0.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn spatial_feature_examples() {
        let img = ImageSize::new(4.0, 4.0).unwrap();
        let s = bb(0.0, 0.0, 2.0, 2.0);
        let o = bb(2.0, 0.0, 2.0, 2.0);
        let f = spatial_feature(&s, &o, &img);
        assert_eq!(f.len(), 22);
        assert_eq!(&f[0..4], &[-1.0, 0.0, 0.0, 0.0]);
        assert_eq!(enclosing_box(&s, &o), bb(0.0, 0.0, 4.0, 2.0));
        // Δ(s, p) with p = (0,0,4,2)
        assert_abs_diff_eq!(f[6], (0.5f64).ln(), epsilon = 1e-15);
        let same = spatial_feature(&s, &s, &img);
        assert!(same[..12].iter().all(|&v| v == 0.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.5..100.0f64, 0.5..100.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn enclosing_properties(a in arb_box(), b in arb_box()) {
            let e = enclosing_box(&a, &b);
            prop_assert_eq!(e, enclosing_box(&b, &a));
            prop_assert!(e.contains(&a) && e.contains(&b));
            prop_assert_eq!(enclosing_box(&e, &a), e);
            prop_assert_eq!(enclosing_box(&e, &b), e);
        }

        #[test]
        fn self_delta_is_zero(a in arb_box()) {
            prop_assert_eq!(box_delta(&a, &a), [0.0; 4]);
        }

        #[test]
        fn norm_coords_in_unit_range(x in 0.0..90.0f64, y in 0.0..90.0f64, fw in 0.01..1.0f64, fh in 0.01..1.0f64) {
            let img = ImageSize::new(100.0, 100.0).unwrap();
            let b = BBox::new(x, y, (100.0 - x) * fw, (100.0 - y) * fh).unwrap();
            let c = norm_coords(&b, &img);
            prop_assert!(c[..4].iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn spatial_feature_is_finite(a in arb_box(), b in arb_box()) {
            let img = ImageSize::new(200.0, 200.0).unwrap();
            let f = spatial_feature(&a, &b, &img);
            prop_assert_eq!(f.len(), SPATIAL_DIM);
            prop_assert!(f.iter().all(|v| v.is_finite()));
        }
    }
}
