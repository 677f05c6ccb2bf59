//! Box representations and overlap measures.

use crate::error::GeometryError;

/// Whether a corner-format box is in normalized `[0,1]` or absolute pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordSystem {
    Normalized,
    Pixels,
}

/// Center-format box, normalized to image width/height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-format box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxXyxy {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub coords: CoordSystem,
}

impl BoxCxCyWh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(w > 0.0 && h > 0.0) {
            return Err(GeometryError::Degenerate { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_xyxy(self) -> Result<BoxXyxy, GeometryError> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(GeometryError::Degenerate { w: self.w, h: self.h });
        }
        Ok(BoxXyxy {
            x_min: self.cx - self.w / 2.0,
            y_min: self.cy - self.h / 2.0,
            x_max: self.cx + self.w / 2.0,
            y_max: self.cy + self.h / 2.0,
            coords: CoordSystem::Normalized,
        })
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl BoxXyxy {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, coords: CoordSystem) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            coords,
        };
        b.check()?;
        Ok(b)
    }

    pub fn pixels(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max, y_max, CoordSystem::Pixels)
    }

    pub fn normalized(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max, y_max, CoordSystem::Normalized)
    }

    fn check(&self) -> Result<(), GeometryError> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(GeometryError::Degenerate {
                w: self.x_max - self.x_min,
                h: self.y_max - self.y_min,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Inverse of [`BoxCxCyWh::to_xyxy`]. The result is in this box's units.
    pub fn to_cxcywh(self) -> Result<BoxCxCyWh, GeometryError> {
        self.check()?;
        Ok(BoxCxCyWh {
            cx: (self.x_min + self.x_max) / 2.0,
            cy: (self.y_min + self.y_max) / 2.0,
            w: self.x_max - self.x_min,
            h: self.y_max - self.y_min,
        })
    }

    /// Pixel box to normalized box for an image of `width x height`.
    pub fn normalize(self, width: f64, height: f64) -> Self {
        match self.coords {
            CoordSystem::Normalized => self,
            CoordSystem::Pixels => Self {
                x_min: self.x_min / width,
                y_min: self.y_min / height,
                x_max: self.x_max / width,
                y_max: self.y_max / height,
                coords: CoordSystem::Normalized,
            },
        }
    }

    /// Normalized box to pixel box for an image of `width x height`.
    pub fn to_pixels(self, width: f64, height: f64) -> Self {
        match self.coords {
            CoordSystem::Pixels => self,
            CoordSystem::Normalized => Self {
                x_min: self.x_min * width,
                y_min: self.y_min * height,
                x_max: self.x_max * width,
                y_max: self.y_max * height,
                coords: CoordSystem::Pixels,
            },
        }
    }
}

fn pair_terms(a: &BoxXyxy, b: &BoxXyxy) -> Result<(f64, f64, f64), GeometryError> {
    if a.coords != b.coords {
        return Err(GeometryError::MixedCoordinates);
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (a.x_max.max(b.x_max) - a.x_min.min(b.x_min)) * (a.y_max.max(b.y_max) - a.y_min.min(b.y_min));
    Ok((inter, union, enclosing))
}

/// Intersection over union; 0 for disjoint or edge-touching boxes.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64, GeometryError> {
    let (inter, union, _) = pair_terms(a, b)?;
    Ok(inter / union)
}

/// Generalized IoU: `iou - (|C| - |A∪B|) / |C|` with `C` the smallest enclosing box.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64, GeometryError> {
    let (inter, union, enclosing) = pair_terms(a, b)?;
    // The enclosure contains the union; rounding can make the gap negative.
    Ok(inter / union - (enclosing - union).max(0.0) / enclosing)
}

/// Sum of absolute coordinate differences over `(cx, cy, w, h)`.
pub fn l1_distance(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    a.as_array().iter().zip(b.as_array()).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(a: f64, b: f64, c: f64, d: f64) -> BoxXyxy {
        BoxXyxy::pixels(a, b, c, d).unwrap()
    }

    #[test]
    fn conversion_examples() {
        let full = BoxCxCyWh::new(0.5, 0.5, 1.0, 1.0).unwrap().to_xyxy().unwrap();
        assert_eq!((full.x_min, full.y_min, full.x_max, full.y_max), (0.0, 0.0, 1.0, 1.0));
        let q = BoxCxCyWh::new(0.25, 0.25, 0.5, 0.5).unwrap().to_xyxy().unwrap();
        assert_eq!((q.x_min, q.y_min, q.x_max, q.y_max), (0.0, 0.0, 0.5, 0.5));
        assert!(BoxCxCyWh::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoxXyxy::pixels(3.0, 0.0, 3.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = px(0.0, 0.0, 2.0, 2.0);
        let b = px(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &px(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        let n = BoxXyxy::normalized(0.0, 0.0, 0.5, 0.5).unwrap();
        assert_eq!(iou(&a, &n), Err(GeometryError::MixedCoordinates));
    }

    #[test]
    fn giou_examples() {
        let a = px(0.0, 0.0, 2.0, 2.0);
        let b = px(1.0, 1.0, 3.0, 3.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        assert!((giou(&a, &b).unwrap() + 5.0 / 63.0).abs() < 1e-12);
        let unit = px(0.0, 0.0, 1.0, 1.0);
        let vals: Vec<f64> = [2.0, 10.0, 100.0]
            .iter()
            .map(|&d| giou(&unit, &px(d, 0.0, d + 1.0, 1.0)).unwrap())
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2] && vals[2] > -1.0);
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        let a = px(0.0, 0.0, 1.0, 1.0);
        let b = px(1.0, 0.0, 2.0, 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(giou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn l1_examples() {
        let a = BoxCxCyWh::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = BoxCxCyWh::new(0.4, 0.5, 0.2, 0.3).unwrap();
        assert_eq!(l1_distance(&a, &a), 0.0);
        assert!((l1_distance(&a, &b) - 0.2).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BoxXyxy> {
        (0.0..10.0f64, 0.0..10.0f64, 0.01..5.0f64, 0.01..5.0f64).prop_map(|(x, y, w, h)| px(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn round_trip(cx in 0.0..1.0f64, cy in 0.0..1.0f64, w in 1e-3..1.0f64, h in 1e-3..1.0f64) {
            let b = BoxCxCyWh::new(cx, cy, w, h).unwrap();
            let back = b.to_xyxy().unwrap().to_cxcywh().unwrap();
            for (x, y) in b.as_array().iter().zip(back.as_array()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn giou_bounded_by_iou_and_symmetric(a in arb_box(), b in arb_box()) {
            let i = iou(&a, &b).unwrap();
            let g = giou(&a, &b).unwrap();
            prop_assert!(g <= i + 1e-15);
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!((iou(&b, &a).unwrap() - i).abs() < 1e-15);
            prop_assert!((giou(&b, &a).unwrap() - g).abs() < 1e-15);
        }

        #[test]
        fn invariant_under_translation_and_scaling(a in arb_box(), b in arb_box(), dx in -5.0..5.0f64, dy in -5.0..5.0f64, s in 0.1..10.0f64) {
            let tf = |bx: &BoxXyxy| px((bx.x_min + dx) * s, (bx.y_min + dy) * s, (bx.x_max + dx) * s, (bx.y_max + dy) * s);
            let (ta, tb) = (tf(&a), tf(&b));
            prop_assert!((iou(&a, &b).unwrap() - iou(&ta, &tb).unwrap()).abs() < 1e-9);
            prop_assert!((giou(&a, &b).unwrap() - giou(&ta, &tb).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn l1_symmetric(a in arb_box(), b in arb_box()) {
            let (ca, cb) = (a.to_cxcywh().unwrap(), b.to_cxcywh().unwrap());
            prop_assert_eq!(l1_distance(&ca, &cb), l1_distance(&cb, &ca));
        }
    }
}
