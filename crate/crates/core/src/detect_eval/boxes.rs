use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::geometry::normalize_angle;
use crate::scalar::Scalar;

/// Vehicle footprint: center, width (across), length (along heading) and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub l: T,
    pub yaw: T,
}

impl<T: Scalar> OrientedBox<T> {
    pub fn new(cx: T, cy: T, w: T, l: T, yaw: T) -> Self {
        Self { cx, cy, w, l, yaw: normalize_angle(yaw) }
    }

    pub fn area(&self) -> T {
        self.w * self.l
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > T::zero() && self.l > T::zero() && self.w.is_finite() && self.l.is_finite())
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[T; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let half = T::lit(0.5);
        let (hl, hw) = (self.l * half, self.w * half);
        // Heading axis (c, s), lateral axis (-s, c).
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        local.map(|(a, b)| [self.cx + a * c - b * s, self.cy + a * s + b * c])
    }

    pub fn cast<U: Scalar>(&self) -> OrientedBox<U> {
        OrientedBox {
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            w: U::lit(self.w.as_f64()),
            l: U::lit(self.l.as_f64()),
            yaw: U::lit(self.yaw.as_f64()),
        }
    }

    /// Same box shifted by `(dx, dy)`.
    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }

    fn circumradius(&self) -> T {
        (self.w * self.w + self.l * self.l).sqrt() * T::lit(0.5)
    }
}

/// Signed polygon area (positive for counter-clockwise winding).
pub fn polygon_area<T: Scalar>(poly: &[[T; 2]]) -> T {
    if poly.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc * T::lit(0.5)
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_polygon<T: Scalar>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let scale = clip
        .iter()
        .chain(subject)
        .fold(T::zero(), |m, p| m.max(p[0].abs()).max(p[1].abs()))
        .max(T::one());
    // Points within rounding noise of an edge count as inside, so a polygon
    // clipped against itself comes back unchanged.
    let tol = T::epsilon() * T::lit(64.0) * scale * scale;

    let mut output: Vec<[T; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [T; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            let cur_in = sc >= -tol;
            let prev_in = sp >= -tol;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect<T: Scalar>(p: [T; 2], q: [T; 2], sp: T, sq: T) -> [T; 2] {
    let t = sp / (sp - sq);
    [p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]
}

/// Area of the intersection of two oriented boxes.
pub fn intersection_area<T: Scalar>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> T {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let reach = a.circumradius() + b.circumradius();
    if dx * dx + dy * dy > reach * reach {
        return T::zero();
    }
    let poly = clip_polygon(&a.corners(), &b.corners());
    polygon_area(&poly).max(T::zero())
}

/// Polygon intersection-over-union of two oriented boxes.
pub fn iou<T: Scalar>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> Result<T, GeometryError> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).max(T::zero()).min(T::one()))
}
