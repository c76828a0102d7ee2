//! Procedural try-on videos: a 2D stick figure wearing a textured garment,
//! with exact skeletons, clothing-agnostic masks and ground-truth targets.

mod io;
mod render;

pub use io::{
    load_gray, load_rgb, read_dataset, read_manifest, read_sample, read_sample_dir, save_gray, save_rgb, write_dataset, write_manifest,
    write_sample, Manifest, ManifestEntry, MANIFEST_FILE,
};

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::network::LATENT_DOWNSAMPLE;
use crate::pose::skeleton::*;
use crate::pose::{Joint, SkeletonKind, SkeletonPose};
use crate::util;

pub const DEFAULT_CANVAS: (usize, usize) = (64, 48);
/// Fill value of the neutralized garment region in agnostic frames: the
/// 8-bit mid-gray, so agnostic frames survive a PNG round trip exactly.
pub const AGNOSTIC_FILL: f32 = 128.0 / 255.0;
/// Dilation radius (px) of the garment region when forming the mask.
pub const MASK_DILATION: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Motion {
    Sway,
    Walk,
    RaiseArms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GarmentKind {
    Upper,
    Lower,
    Dress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
}

macro_rules! named_enum {
    ($ty:ident { $($var:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),*];

            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $name),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$var),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

named_enum!(Motion { Sway => "sway", Walk => "walk", RaiseArms => "raise-arms" });
named_enum!(GarmentKind { Upper => "upper", Lower => "lower", Dress => "dress" });
named_enum!(Texture { Solid => "solid", Stripes => "stripes", Checker => "checker" });

impl GarmentKind {
    pub fn skeleton_kind(self) -> SkeletonKind {
        match self {
            GarmentKind::Upper => SkeletonKind::UpperGarment,
            GarmentKind::Lower => SkeletonKind::LowerGarment,
            GarmentKind::Dress => SkeletonKind::DressGarment,
        }
    }
}

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    /// (height, width) in pixels.
    pub canvas: (usize, usize),
    pub motion: Motion,
    pub garment_kind: GarmentKind,
    pub texture: Texture,
    /// Two garment colours followed by the skin colour.
    pub palette: [Rgb; 3],
}

fn random_color(rng: &mut util::Rng, lo: u8, hi: u8) -> Rgb {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn pick<T: Copy>(rng: &mut util::Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

impl SceneSpec {
    /// A scene with every attribute drawn from `seed`.
    pub fn random(seed: u64, num_frames: usize, canvas: (usize, usize)) -> Self {
        let mut rng = util::rng(util::derive_seed(seed, 0x5ce4e));
        SceneSpec {
            seed,
            num_frames,
            canvas,
            motion: pick(&mut rng, Motion::ALL),
            garment_kind: pick(&mut rng, GarmentKind::ALL),
            texture: pick(&mut rng, Texture::ALL),
            palette: [
                random_color(&mut rng, 20, 235),
                random_color(&mut rng, 20, 235),
                random_color(&mut rng, 150, 230),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Config("num_frames must be at least 1".into()));
        }
        validate_canvas(self.canvas)
    }
}

/// Canvas sides must be positive multiples of the latent downsample factor.
pub fn validate_canvas((h, w): (usize, usize)) -> Result<()> {
    let f = LATENT_DOWNSAMPLE;
    if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Config(format!(
            "canvas {h}x{w} must have both sides divisible by {f}"
        )));
    }
    Ok(())
}

/// One generated try-on example. Videos are `[T, C, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TryOnSample {
    /// Figure wearing its own garment.
    pub source_video: Array4<f32>,
    /// Same motion, wearing the query garment.
    pub target_video: Array4<f32>,
    /// Query garment in the canonical pose on white.
    pub garment_image: Array3<f32>,
    pub agnostic_video: Array4<f32>,
    pub agnostic_mask: Array4<f32>,
    pub human_pose: Vec<SkeletonPose>,
    pub garment_pose: SkeletonPose,
    pub garment_kind: GarmentKind,
}

impl TryOnSample {
    pub fn num_frames(&self) -> usize {
        self.source_video.shape()[0]
    }

    pub fn canvas(&self) -> (usize, usize) {
        let s = self.source_video.shape();
        (s[2], s[3])
    }
}

/// Garment appearance: texture pattern and its two colours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GarmentStyle {
    pub texture: Texture,
    pub colors: [Rgb; 2],
}

/// Joint placement for frame `frame` of a motion, in pixels.
pub(crate) fn figure_pose(motion: Motion, frame: usize, phase0: f32, center_x: f32, canvas: (usize, usize)) -> [(f32, f32); HUMAN_JOINTS] {
    let u = canvas.0 as f32 / 64.0;
    let f = frame as f32;
    let (mut dx, mut arm, mut thigh) = (0.0f32, 0.25f32, 0.0f32);
    match motion {
        Motion::Sway => {
            let phi = 2.0 * PI * f / 16.0 + phase0;
            dx = 3.0 * phi.sin();
            arm = 0.25 + 0.1 * phi.sin();
        }
        Motion::Walk => {
            let phi = 2.0 * PI * f / 16.0 + phase0;
            thigh = 0.3 * phi.sin();
        }
        Motion::RaiseArms => {
            let phi = 2.0 * PI * f / 20.0 + phase0;
            arm = 0.25 + 1.1 * (1.0 - phi.cos()) / 2.0;
        }
    }
    rest_pose(center_x + dx * u, arm, thigh, u)
}

/// Skeleton with arms at `arm` radians from hanging and thighs swung by
/// `thigh` radians (left forward, right back).
fn rest_pose(cx: f32, arm: f32, thigh: f32, u: f32) -> [(f32, f32); HUMAN_JOINTS] {
    let mut j = [(0.0, 0.0); HUMAN_JOINTS];
    let hip_y = 36.0 * u;
    let neck = (cx, hip_y - 20.0 * u);
    j[NECK] = neck;
    for (side, s) in [(-1.0f32, 0usize), (1.0, 1)] {
        // side -1: figure's right (image left)
        let (sh, el, wr, hp, kn, an) = if s == 1 {
            (L_SHOULDER, L_ELBOW, L_WRIST, L_HIP, L_KNEE, L_ANKLE)
        } else {
            (R_SHOULDER, R_ELBOW, R_WRIST, R_HIP, R_KNEE, R_ANKLE)
        };
        let shoulder = (cx + side * 5.0 * u, neck.1 + 1.5 * u);
        let a1 = arm;
        let elbow = (shoulder.0 + side * 8.0 * u * a1.sin(), shoulder.1 + 8.0 * u * a1.cos());
        let a2 = arm + 0.15;
        let wrist = (elbow.0 + side * 7.0 * u * a2.sin(), elbow.1 + 7.0 * u * a2.cos());
        let hip = (cx + side * 3.5 * u, hip_y);
        let t = if s == 1 { thigh } else { -thigh };
        let knee = (hip.0 + 11.0 * u * t.sin(), hip.1 + 11.0 * u * t.cos());
        let ankle = (knee.0 + 11.0 * u * (0.5 * t).sin(), knee.1 + 11.0 * u * (0.5 * t).cos());
        j[sh] = shoulder;
        j[el] = elbow;
        j[wr] = wrist;
        j[hp] = hip;
        j[kn] = knee;
        j[an] = ankle;
    }
    j
}

fn human_skeleton(points: &[(f32, f32); HUMAN_JOINTS], canvas: (usize, usize)) -> SkeletonPose {
    let (h, w) = (canvas.0 as f32, canvas.1 as f32);
    let joints = points
        .iter()
        .map(|&(x, y)| Joint {
            x,
            y,
            present: x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0,
        })
        .collect();
    SkeletonPose {
        kind: SkeletonKind::Human,
        joints,
    }
}

fn garment_skeleton(points: &[(f32, f32); HUMAN_JOINTS], kind: GarmentKind) -> SkeletonPose {
    let sk = kind.skeleton_kind();
    let joints = sk
        .canonical_ids()
        .iter()
        .map(|&c| Joint::new(points[c].0, points[c].1))
        .collect();
    SkeletonPose { kind: sk, joints }
}

/// Renders a scene. Pure function of `spec`.
pub fn generate_sample(spec: &SceneSpec) -> Result<TryOnSample> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let t = spec.num_frames;
    let u = h as f32 / 64.0;
    let mut rng = util::rng(util::derive_seed(spec.seed, 0xf16e));
    let phase0: f32 = rng.random_range(0.0..2.0 * PI);
    let center_x = w as f32 / 2.0 + rng.random_range(-2.0f32..=2.0) * u;
    let query = GarmentStyle {
        texture: spec.texture,
        colors: [spec.palette[0], spec.palette[1]],
    };
    let others: Vec<Texture> = Texture::ALL.iter().copied().filter(|&x| x != spec.texture).collect();
    let own = GarmentStyle {
        texture: pick(&mut rng, &others),
        colors: [random_color(&mut rng, 20, 235), random_color(&mut rng, 20, 235)],
    };
    let skin = spec.palette[2];

    let mut source = Array4::<f32>::zeros((t, 3, h, w));
    let mut target = Array4::<f32>::zeros((t, 3, h, w));
    let mut agnostic = Array4::<f32>::zeros((t, 3, h, w));
    let mut mask = Array4::<f32>::zeros((t, 1, h, w));
    let mut human_pose = Vec::with_capacity(t);
    for f in 0..t {
        let pts = figure_pose(spec.motion, f, phase0, center_x, spec.canvas);
        let frame = render::render_frame(&pts, spec.garment_kind, skin, spec.canvas, u);
        let region = render::dilate(&frame.garment, MASK_DILATION);
        for y in 0..h {
            for x in 0..w {
                let m = region[[y, x]];
                mask[[f, 0, y, x]] = if m { 1.0 } else { 0.0 };
                let anchor = pts[NECK];
                let src = frame.color_at(x, y, &own, anchor, u);
                let tgt = frame.color_at(x, y, &query, anchor, u);
                for c in 0..3 {
                    source[[f, c, y, x]] = src[c];
                    target[[f, c, y, x]] = tgt[c];
                    agnostic[[f, c, y, x]] = if m { AGNOSTIC_FILL } else { src[c] };
                }
            }
        }
        human_pose.push(human_skeleton(&pts, spec.canvas));
    }

    let canonical = rest_pose(w as f32 / 2.0, 0.25, 0.0, u);
    let garment_image = render::render_garment(&canonical, spec.garment_kind, &query, spec.canvas, u);
    Ok(TryOnSample {
        source_video: source,
        target_video: target,
        garment_image,
        agnostic_video: agnostic,
        agnostic_mask: mask,
        human_pose,
        garment_pose: garment_skeleton(&canonical, spec.garment_kind),
        garment_kind: spec.garment_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: GarmentKind, motion: Motion, t: usize) -> SceneSpec {
        SceneSpec {
            seed: 11,
            num_frames: t,
            canvas: DEFAULT_CANVAS,
            motion,
            garment_kind: kind,
            texture: Texture::Stripes,
            palette: [[200, 30, 30], [30, 30, 200], [210, 170, 140]],
        }
    }

    #[test]
    fn single_frame_has_thirteen_joints() {
        let s = generate_sample(&spec(GarmentKind::Upper, Motion::Sway, 1)).unwrap();
        assert_eq!(s.num_frames(), 1);
        assert_eq!(s.human_pose.len(), 1);
        assert_eq!(s.human_pose[0].joint_count(), 13);
        assert_eq!(s.source_video.shape(), &[1, 3, 64, 48]);
    }

    #[test]
    fn generation_is_deterministic() {
        let sp = spec(GarmentKind::Dress, Motion::Walk, 4);
        assert_eq!(generate_sample(&sp).unwrap(), generate_sample(&sp).unwrap());
        let other = SceneSpec { seed: 12, ..sp.clone() };
        assert_ne!(generate_sample(&sp).unwrap(), generate_sample(&other).unwrap());
    }

    #[test]
    fn garment_joint_counts() {
        for (k, n) in [(GarmentKind::Upper, 9), (GarmentKind::Lower, 6), (GarmentKind::Dress, 11)] {
            let s = generate_sample(&spec(k, Motion::Sway, 1)).unwrap();
            assert_eq!(s.garment_pose.joint_count(), n);
        }
    }

    #[test]
    fn bad_canvas_is_config_error() {
        let sp = SceneSpec { canvas: (63, 48), ..spec(GarmentKind::Upper, Motion::Sway, 1) };
        assert!(matches!(generate_sample(&sp), Err(Error::Config(_))));
        let sp = SceneSpec { num_frames: 0, ..spec(GarmentKind::Upper, Motion::Sway, 1) };
        assert!(generate_sample(&sp).is_err());
    }

    #[test]
    fn garment_region_differs_between_source_and_target() {
        let s = generate_sample(&spec(GarmentKind::Upper, Motion::Sway, 1)).unwrap();
        let masked = s.agnostic_mask.sum();
        assert!(masked > 50.0, "mask too small: {masked}");
        let diff = (&s.source_video - &s.target_video).mapv(f32::abs).sum();
        assert!(diff > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn sample_invariants(seed in 0u64..1000, t in 1usize..10) {
            let sp = SceneSpec::random(seed, t, DEFAULT_CANVAS);
            let s = generate_sample(&sp).unwrap();
            prop_assert!(s.agnostic_mask.iter().all(|&m| m == 0.0 || m == 1.0));
            for f in 0..t {
                for c in 0..3 {
                    for y in 0..64 {
                        for x in 0..48 {
                            let keep = 1.0 - s.agnostic_mask[[f, 0, y, x]];
                            prop_assert_eq!(
                                s.target_video[[f, c, y, x]] * keep,
                                s.agnostic_video[[f, c, y, x]] * keep
                            );
                        }
                    }
                }
                prop_assert_eq!(s.human_pose[f].joint_count(), 13);
                for j in &s.human_pose[f].joints {
                    prop_assert!(j.present);
                    prop_assert!(j.x >= 0.0 && j.x <= 47.0 && j.y >= 0.0 && j.y <= 63.0);
                }
            }
            for w in s.human_pose.windows(2) {
                for (a, b) in w[0].joints.iter().zip(&w[1].joints) {
                    prop_assert!(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() <= 6.0);
                }
            }
            prop_assert!(s.source_video.iter().chain(s.garment_image.iter()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
