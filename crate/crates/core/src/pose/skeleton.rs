use rand::Rng as _;

use crate::error::{Error, Result};
use crate::util;

/// Number of joints in the canonical human skeleton.
pub const HUMAN_JOINTS: usize = 13;

/// Canonical joint names, indexed by canonical joint id.
pub const JOINT_NAMES: [&str; HUMAN_JOINTS] = [
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

pub const NECK: usize = 0;
pub const L_SHOULDER: usize = 1;
pub const R_SHOULDER: usize = 2;
pub const L_ELBOW: usize = 3;
pub const R_ELBOW: usize = 4;
pub const L_WRIST: usize = 5;
pub const R_WRIST: usize = 6;
pub const L_HIP: usize = 7;
pub const R_HIP: usize = 8;
pub const L_KNEE: usize = 9;
pub const R_KNEE: usize = 10;
pub const L_ANKLE: usize = 11;
pub const R_ANKLE: usize = 12;

/// Limbs as pairs of canonical joint ids.
pub const LIMBS: [(usize, usize); 13] = [
    (NECK, L_SHOULDER),
    (NECK, R_SHOULDER),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (L_SHOULDER, L_HIP),
    (R_SHOULDER, R_HIP),
    (L_HIP, R_HIP),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
];

/// Left/right partner of every canonical joint.
const MIRROR: [usize; HUMAN_JOINTS] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11];

const HUMAN_IDS: [usize; 13] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];
const UPPER_IDS: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
const LOWER_IDS: [usize; 6] = [7, 8, 9, 10, 11, 12];
const DRESS_IDS: [usize; 11] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Which landmark vocabulary a skeleton uses. Garment skeletons are subsets of
/// the human one, which is what ties garment landmarks to body parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkeletonKind {
    Human,
    UpperGarment,
    LowerGarment,
    DressGarment,
}

impl SkeletonKind {
    /// Canonical joint id of each local joint index.
    pub fn canonical_ids(self) -> &'static [usize] {
        match self {
            SkeletonKind::Human => &HUMAN_IDS,
            SkeletonKind::UpperGarment => &UPPER_IDS,
            SkeletonKind::LowerGarment => &LOWER_IDS,
            SkeletonKind::DressGarment => &DRESS_IDS,
        }
    }

    pub fn joint_count(self) -> usize {
        self.canonical_ids().len()
    }

    /// Garment skeleton kinds are identified by their joint count.
    pub fn garment_from_count(count: usize) -> Option<Self> {
        match count {
            9 => Some(SkeletonKind::UpperGarment),
            6 => Some(SkeletonKind::LowerGarment),
            11 => Some(SkeletonKind::DressGarment),
            _ => None,
        }
    }

    fn local_index(self, canonical: usize) -> Option<usize> {
        self.canonical_ids().iter().position(|&c| c == canonical)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint {
    pub x: f32,
    pub y: f32,
    pub present: bool,
}

impl Joint {
    pub fn new(x: f32, y: f32) -> Self {
        Joint { x, y, present: true }
    }

    pub fn absent() -> Self {
        Joint {
            x: 0.0,
            y: 0.0,
            present: false,
        }
    }
}

/// Keypoints of one frame, in pixel coordinates (x to the right, y down).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonPose {
    pub kind: SkeletonKind,
    pub joints: Vec<Joint>,
}

impl SkeletonPose {
    pub fn new(kind: SkeletonKind, joints: Vec<Joint>) -> Result<Self> {
        let pose = SkeletonPose { kind, joints };
        pose.validate()?;
        Ok(pose)
    }

    pub fn all_absent(kind: SkeletonKind) -> Self {
        SkeletonPose {
            kind,
            joints: vec![Joint::absent(); kind.joint_count()],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.len() != self.kind.joint_count() {
            return Err(Error::Validation(format!(
                "{:?} skeleton needs {} joints, got {}",
                self.kind,
                self.kind.joint_count(),
                self.joints.len()
            )));
        }
        if let Some(i) = self
            .joints
            .iter()
            .position(|j| !j.x.is_finite() || !j.y.is_finite())
        {
            return Err(Error::Validation(format!("joint {i} has non-finite coordinates")));
        }
        Ok(())
    }

    /// (canonical id, joint) pairs.
    pub fn canonical_joints(&self) -> impl Iterator<Item = (usize, &Joint)> {
        self.kind.canonical_ids().iter().copied().zip(self.joints.iter())
    }

    pub fn canonical(&self, id: usize) -> Option<&Joint> {
        self.kind.local_index(id).map(|i| &self.joints[i])
    }

    pub fn present_count(&self) -> usize {
        self.joints.iter().filter(|j| j.present).count()
    }

    /// Horizontal flip on a canvas `width` pixels wide: x is mirrored about the
    /// canvas centre and left/right joints swap roles.
    pub fn flipped(&self, width: usize) -> SkeletonPose {
        let ids = self.kind.canonical_ids();
        let joints = ids
            .iter()
            .map(|&c| {
                let src = self
                    .kind
                    .local_index(MIRROR[c])
                    .expect("garment skeletons are closed under mirroring");
                let j = self.joints[src];
                Joint {
                    x: (width as f32 - 1.0) - j.x,
                    ..j
                }
            })
            .collect();
        SkeletonPose {
            kind: self.kind,
            joints,
        }
    }
}

/// Condition dropping: every joint independently loses its presence flag with
/// probability `p_drop`. One uniform draw is consumed per joint regardless of
/// presence, so the outcome for joint i depends only on the seed.
pub fn drop_keypoints(pose: &SkeletonPose, p_drop: f64, seed: u64) -> Result<SkeletonPose> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Config(format!("drop probability {p_drop} outside [0, 1]")));
    }
    let mut rng = util::rng(seed);
    let joints = pose
        .joints
        .iter()
        .map(|j| {
            let u: f64 = rng.random();
            if u < p_drop {
                Joint { present: false, ..*j }
            } else {
                *j
            }
        })
        .collect();
    Ok(SkeletonPose {
        kind: pose.kind,
        joints,
    })
}
