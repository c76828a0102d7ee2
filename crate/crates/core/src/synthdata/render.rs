//! Binary-coverage rasterization of the figure and its garment.

use ndarray::{Array2, Array3};

use super::{GarmentKind, GarmentStyle, Rgb, Texture};
use crate::pose::skeleton::*;
use crate::pose::HUMAN_JOINTS;

const BACKGROUND: Rgb = [236, 236, 236];
const WHITE: Rgb = [255, 255, 255];

type Pt = (f32, f32);

enum Shape {
    Disk(Pt, f32),
    Capsule(Pt, Pt, f32),
    /// Convex polygon, any winding.
    Poly(Vec<Pt>),
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

impl Shape {
    fn contains(&self, p: Pt) -> bool {
        match self {
            Shape::Disk(c, r) => (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r,
            Shape::Capsule(a, b, r) => seg_dist(p, *a, *b) <= *r,
            Shape::Poly(pts) => {
                let n = pts.len();
                let mut sign = 0.0f32;
                for i in 0..n {
                    let (a, b) = (pts[i], pts[(i + 1) % n]);
                    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
        }
    }
}

fn body_shapes(j: &[Pt; HUMAN_JOINTS], u: f32) -> Vec<Shape> {
    let neck = j[NECK];
    let head = (neck.0, neck.1 - 7.0 * u);
    let mut s = vec![
        Shape::Disk(head, 4.5 * u),
        Shape::Capsule(head, neck, 1.5 * u),
        Shape::Poly(vec![j[L_SHOULDER], j[R_SHOULDER], j[R_HIP], j[L_HIP]]),
        Shape::Capsule(j[L_HIP], j[R_HIP], 2.0 * u),
        Shape::Capsule(j[L_SHOULDER], j[R_SHOULDER], 1.5 * u),
    ];
    for (a, b, r) in [
        (L_SHOULDER, L_ELBOW, 1.6),
        (L_ELBOW, L_WRIST, 1.4),
        (R_SHOULDER, R_ELBOW, 1.6),
        (R_ELBOW, R_WRIST, 1.4),
        (L_HIP, L_KNEE, 2.0),
        (L_KNEE, L_ANKLE, 1.7),
        (R_HIP, R_KNEE, 2.0),
        (R_KNEE, R_ANKLE, 1.7),
        (L_SHOULDER, L_HIP, 1.2),
        (R_SHOULDER, R_HIP, 1.2),
    ] {
        s.push(Shape::Capsule(j[a], j[b], r * u));
    }
    s
}

fn garment_shapes(j: &[Pt; HUMAN_JOINTS], kind: GarmentKind, u: f32) -> Vec<Shape> {
    let mut s = Vec::new();
    if matches!(kind, GarmentKind::Upper | GarmentKind::Dress) {
        s.push(Shape::Poly(vec![j[L_SHOULDER], j[R_SHOULDER], j[R_HIP], j[L_HIP]]));
        for (a, b, r) in [
            (L_SHOULDER, R_SHOULDER, 1.8),
            (NECK, L_SHOULDER, 1.8),
            (NECK, R_SHOULDER, 1.8),
            (L_SHOULDER, L_HIP, 1.8),
            (R_SHOULDER, R_HIP, 1.8),
            (L_HIP, R_HIP, 1.8),
            (L_SHOULDER, L_ELBOW, 2.2),
            (R_SHOULDER, R_ELBOW, 2.2),
        ] {
            s.push(Shape::Capsule(j[a], j[b], r * u));
        }
        if kind == GarmentKind::Upper {
            s.push(Shape::Capsule(j[L_ELBOW], j[L_WRIST], 1.9 * u));
            s.push(Shape::Capsule(j[R_ELBOW], j[R_WRIST], 1.9 * u));
        }
    }
    match kind {
        GarmentKind::Lower => {
            for (a, b, r) in [
                (L_HIP, R_HIP, 2.6),
                (L_HIP, L_KNEE, 2.6),
                (R_HIP, R_KNEE, 2.6),
                (L_KNEE, L_ANKLE, 2.3),
                (R_KNEE, R_ANKLE, 2.3),
            ] {
                s.push(Shape::Capsule(j[a], j[b], r * u));
            }
        }
        GarmentKind::Dress => {
            // skirt widening from the hips down to knee height
            let (l, r) = (j[L_HIP], j[R_HIP]);
            let hem = 0.5 * (j[L_KNEE].1 + j[R_KNEE].1);
            let spread = 3.0 * u;
            let (lx, rx) = (j[L_KNEE].0.max(l.0) + spread, j[R_KNEE].0.min(r.0) - spread);
            s.push(Shape::Poly(vec![(l.0 + 1.5 * u, l.1), (lx, hem), (rx, hem), (r.0 - 1.5 * u, r.1)]));
            s.push(Shape::Capsule(l, r, 1.8 * u));
        }
        GarmentKind::Upper => {}
    }
    s
}

fn covered(shapes: &[Shape], p: Pt) -> bool {
    shapes.iter().any(|s| s.contains(p))
}

fn unit(c: Rgb) -> [f32; 3] {
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

fn texture_color(style: &GarmentStyle, p: Pt, anchor: Pt, u: f32) -> [f32; 3] {
    let (dx, dy) = (p.0 - anchor.0, p.1 - anchor.1);
    let idx = match style.texture {
        Texture::Solid => 0,
        Texture::Stripes => (dy / (3.0 * u)).floor() as i64,
        Texture::Checker => (dx / (4.0 * u)).floor() as i64 + (dy / (4.0 * u)).floor() as i64,
    };
    unit(style.colors[idx.rem_euclid(2) as usize])
}

/// Per-pixel coverage of one frame.
pub(crate) struct FrameCoverage {
    pub body: Array2<bool>,
    pub garment: Array2<bool>,
    skin: Rgb,
}

impl FrameCoverage {
    pub fn color_at(&self, x: usize, y: usize, style: &GarmentStyle, anchor: Pt, u: f32) -> [f32; 3] {
        if self.garment[[y, x]] {
            texture_color(style, (x as f32, y as f32), anchor, u)
        } else if self.body[[y, x]] {
            unit(self.skin)
        } else {
            unit(BACKGROUND)
        }
    }
}

pub(crate) fn render_frame(
    joints: &[Pt; HUMAN_JOINTS],
    kind: GarmentKind,
    skin: Rgb,
    (h, w): (usize, usize),
    u: f32,
) -> FrameCoverage {
    let body = body_shapes(joints, u);
    let garment = garment_shapes(joints, kind, u);
    FrameCoverage {
        body: Array2::from_shape_fn((h, w), |(y, x)| covered(&body, (x as f32, y as f32))),
        garment: Array2::from_shape_fn((h, w), |(y, x)| covered(&garment, (x as f32, y as f32))),
        skin,
    }
}

/// The garment alone on white, `[3, H, W]`.
pub(crate) fn render_garment(
    joints: &[Pt; HUMAN_JOINTS],
    kind: GarmentKind,
    style: &GarmentStyle,
    (h, w): (usize, usize),
    u: f32,
) -> Array3<f32> {
    let shapes = garment_shapes(joints, kind, u);
    let white = unit(WHITE);
    let mut img = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = (x as f32, y as f32);
            let c = if covered(&shapes, p) {
                texture_color(style, p, joints[NECK], u)
            } else {
                white
            };
            for k in 0..3 {
                img[[k, y, x]] = c[k];
            }
        }
    }
    img
}

/// Dilation by a Euclidean disk of radius `r` pixels.
pub(crate) fn dilate(m: &Array2<bool>, r: i64) -> Array2<bool> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && m[[yy as usize, xx as usize]] {
                    return true;
                }
            }
        }
        false
    })
}
