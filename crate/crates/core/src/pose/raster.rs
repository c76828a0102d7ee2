use ndarray::Array3;

use super::skeleton::{SkeletonPose, HUMAN_JOINTS, LIMBS};

/// Joint heat-blob width in pixels.
pub const JOINT_SIGMA: f32 = 2.0;
/// Full width of rasterized limb segments in pixels.
pub const LIMB_THICKNESS: f32 = 1.5;
/// Channels in the canonical layout: one per joint then one per limb.
pub const POSE_CHANNELS: usize = HUMAN_JOINTS + LIMBS.len();

/// Rasterized pose conditioning image, `[POSE_CHANNELS, H, W]`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMap(pub Array3<f32>);

impl PoseMap {
    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// Draws a skeleton into the canonical channel layout. Pixel (row i, col j)
/// sits at coordinate (x = j, y = i). Joints outside the canvas clip silently.
pub fn rasterize(pose: &SkeletonPose, size: (usize, usize)) -> PoseMap {
    let (h, w) = size;
    let mut map = Array3::<f32>::zeros((POSE_CHANNELS, h, w));
    let two_sigma_sq = 2.0 * JOINT_SIGMA * JOINT_SIGMA;
    let reach = (3.0 * JOINT_SIGMA).ceil() as i64;

    for (id, j) in pose.canonical_joints() {
        if !j.present {
            continue;
        }
        let (cx, cy) = (j.x.round() as i64, j.y.round() as i64);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as i64 - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as i64 - 1) {
                let dx = x as f32 - j.x;
                let dy = y as f32 - j.y;
                map[[id, y as usize, x as usize]] = (-(dx * dx + dy * dy) / two_sigma_sq).exp();
            }
        }
    }

    let half = LIMB_THICKNESS / 2.0;
    for (li, &(a, b)) in LIMBS.iter().enumerate() {
        let (Some(ja), Some(jb)) = (pose.canonical(a), pose.canonical(b)) else {
            continue;
        };
        if !(ja.present && jb.present) {
            continue;
        }
        let ch = HUMAN_JOINTS + li;
        let x0 = (ja.x.min(jb.x) - half - 1.0).floor().max(0.0) as usize;
        let y0 = (ja.y.min(jb.y) - half - 1.0).floor().max(0.0) as usize;
        let x1 = ((ja.x.max(jb.x) + half + 1.0).ceil() as i64).min(w as i64 - 1);
        let y1 = ((ja.y.max(jb.y) + half + 1.0).ceil() as i64).min(h as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let d = segment_distance(x as f32, y as f32, ja.x, ja.y, jb.x, jb.y);
                // one-pixel linear falloff outside the solid core
                let v = (half + 0.5 - d).clamp(0.0, 1.0);
                if v > map[[ch, y, x]] {
                    map[[ch, y, x]] = v;
                }
            }
        }
    }
    PoseMap(map)
}

fn segment_distance(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (vx, vy) = (bx - ax, by - ay);
    let len_sq = vx * vx + vy * vy;
    let t = if len_sq > 0.0 {
        (((px - ax) * vx + (py - ay) * vy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * vx, ay + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::skeleton::{Joint, SkeletonKind, L_ELBOW, L_SHOULDER};
    use proptest::prelude::*;

    #[test]
    fn absent_pose_is_blank() {
        let p = SkeletonPose::all_absent(SkeletonKind::Human);
        let m = rasterize(&p, (64, 48));
        assert_eq!(m.channels(), POSE_CHANNELS);
        assert!(m.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_joint_peaks_at_center() {
        let mut p = SkeletonPose::all_absent(SkeletonKind::Human);
        p.joints[4] = Joint::new(24.0, 32.0);
        let m = rasterize(&p, (64, 48));
        let ch = m.0.index_axis(ndarray::Axis(0), 4);
        let (mut best, mut arg) = (f32::MIN, (0, 0));
        for ((y, x), &v) in ch.indexed_iter() {
            if v > best {
                best = v;
                arg = (y, x);
            }
        }
        assert_eq!(arg, (32, 24));
        assert_eq!(best, 1.0);
        // only that joint channel is lit
        for c in 0..POSE_CHANNELS {
            if c != 4 {
                assert!(m.0.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn limb_covers_midpoint() {
        let mut p = SkeletonPose::all_absent(SkeletonKind::Human);
        p.joints[L_SHOULDER] = Joint::new(10.0, 10.0);
        p.joints[L_ELBOW] = Joint::new(10.0, 30.0);
        let m = rasterize(&p, (64, 48));
        let limb = LIMBS.iter().position(|&l| l == (L_SHOULDER, L_ELBOW)).unwrap();
        assert!(m.0[[HUMAN_JOINTS + limb, 20, 10]] > 0.0);
        assert_eq!(m.0[[HUMAN_JOINTS + limb, 20, 20]], 0.0);
    }

    #[test]
    fn garment_skeleton_uses_canonical_channels() {
        let mut joints = vec![Joint::absent(); 6];
        joints[0] = Joint::new(20.0, 36.0); // l_hip
        let p = SkeletonPose::new(SkeletonKind::LowerGarment, joints).unwrap();
        let m = rasterize(&p, (64, 48));
        assert_eq!(m.0[[7, 36, 20]], 1.0);
    }

    #[test]
    fn out_of_canvas_joint_clips() {
        let mut p = SkeletonPose::all_absent(SkeletonKind::Human);
        p.joints[0] = Joint::new(-50.0, 500.0);
        p.joints[1] = Joint::new(5.0, 5.0);
        let m = rasterize(&p, (16, 16));
        assert!(m.0.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn adding_a_joint_is_monotone(
            coords in proptest::collection::vec((0.0f32..47.0, 0.0f32..63.0), 13),
            mask in proptest::collection::vec(any::<bool>(), 13),
            extra in 0usize..13,
        ) {
            let joints: Vec<Joint> = coords.iter().zip(&mask)
                .map(|(&(x, y), &m)| Joint { x, y, present: m })
                .collect();
            let mut before = SkeletonPose::new(SkeletonKind::Human, joints).unwrap();
            before.joints[extra].present = false;
            let mut after = before.clone();
            after.joints[extra].present = true;
            let a = rasterize(&before, (64, 48));
            let b = rasterize(&after, (64, 48));
            for (x, y) in a.0.iter().zip(b.0.iter()) {
                prop_assert!(y >= x);
            }
        }
    }
}
