//! Geometric primitives and textures in an object-centred frame.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Triangle { pts: [(f64, f64); 3] },
    /// Segment with rounded ends.
    Capsule { x0: f64, y0: f64, x1: f64, y1: f64, r: f64 },
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Triangle { pts } => {
                let sign = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (x - bx) * (ay - by) - (ax - bx) * (y - by);
                let d1 = sign(pts[0], pts[1]);
                let d2 = sign(pts[1], pts[2]);
                let d3 = sign(pts[2], pts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Shape::Capsule { x0, y0, x1, y1, r } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 { 0.0 } else { (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0) };
                let (px, py) = (x0 + t * dx, y0 + t * dy);
                (x - px).powi(2) + (y - py).powi(2) <= r * r
            }
        }
    }

    /// A point strictly inside the shape, used to anchor included parts.
    pub fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, .. } | Shape::Rect { cx, cy, .. } => (cx, cy),
            Shape::Triangle { pts } => ((pts[0].0 + pts[1].0 + pts[2].0) / 3.0, (pts[0].1 + pts[1].1 + pts[2].1) / 3.0),
            Shape::Capsule { x0, y0, x1, y1, .. } => ((x0 + x1) / 2.0, (y0 + y1) / 2.0),
        }
    }

    /// Shape kind index, used when deriving a confusable variant.
    pub fn kind(&self) -> usize {
        match self {
            Shape::Ellipse { .. } => 0,
            Shape::Rect { .. } => 1,
            Shape::Triangle { .. } => 2,
            Shape::Capsule { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Solid,
    Stripes { angle: f64, period: f64 },
    Checker { period: f64 },
    Dots { period: f64 },
}

impl Texture {
    /// Whether the secondary colour is shown at `(x, y)`.
    pub fn secondary(&self, x: f64, y: f64) -> bool {
        match *self {
            Texture::Solid => false,
            Texture::Stripes { angle, period } => {
                let (u, _) = rotate(x, y, angle);
                (u / period).rem_euclid(1.0) < 0.5
            }
            Texture::Checker { period } => {
                (((x / period).floor() as i64) + ((y / period).floor() as i64)).rem_euclid(2) == 0
            }
            Texture::Dots { period } => {
                let fx = (x / period).rem_euclid(1.0) - 0.5;
                let fy = (y / period).rem_euclid(1.0) - 0.5;
                fx * fx + fy * fy < 0.09
            }
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        match rng.gen_range(0..4) {
            0 => Texture::Solid,
            1 => Texture::Stripes { angle: rng.gen_range(0.0..std::f64::consts::PI), period: rng.gen_range(2.5..5.0) },
            2 => Texture::Checker { period: rng.gen_range(2.0..4.0) },
            _ => Texture::Dots { period: rng.gen_range(3.0..5.0) },
        }
    }
}

/// Fixed palette shared by all classes so colour alone rarely identifies one.
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 60, 50],
    [240, 200, 40],
    [60, 170, 80],
    [50, 110, 220],
    [160, 80, 200],
    [240, 140, 40],
    [40, 190, 200],
    [230, 230, 230],
];
