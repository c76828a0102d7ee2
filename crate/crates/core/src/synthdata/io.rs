//! On-disk dataset layout: one directory of PNG frames plus `poses.txt` per
//! sample, and a manifest listing the sample directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array3, Array4, ArrayView3};

use super::{generate_sample, GarmentKind, SceneSpec, TryOnSample};
use crate::error::{Error, Result};
use crate::pose::{Joint, SkeletonKind, SkeletonPose};

pub const MANIFEST_FILE: &str = "manifest.txt";
const POSES_FILE: &str = "poses.txt";
/// Frame index used in `poses.txt` for garment landmarks.
const GARMENT_FRAME: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Sample directory relative to the manifest's directory.
    pub dir: String,
    pub garment_kind: GarmentKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].dir)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn save_rgb(img: ArrayView3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("RGB image needs 3 channels, got {c}")));
    }
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(img[[0, y, x]]), to_u8(img[[1, y, x]]), to_u8(img[[2, y, x]])])
    });
    out.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn save_gray(img: ArrayView3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 1 {
        return Err(Error::Shape(format!("grayscale image needs 1 channel, got {c}")));
    }
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(img[[0, y as usize, x as usize]])]));
    out.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    }))
}

pub fn load_gray(path: &Path) -> Result<Array3<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
        from_u8(img.get_pixel(x as u32, y as u32)[0])
    }))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn pose_lines(out: &mut String, frame: i64, pose: &SkeletonPose) {
    for (i, j) in pose.joints.iter().enumerate() {
        let _ = writeln!(out, "{frame} {i} {} {} {}", j.x, j.y, j.present as u8);
    }
}

/// Writes one sample's frames and poses into `dir`.
pub fn write_sample(sample: &TryOnSample, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for f in 0..sample.num_frames() {
        save_rgb(sample.source_video.index_axis(ndarray::Axis(0), f), &dir.join(format!("source_{f:04}.png")))?;
        save_rgb(sample.target_video.index_axis(ndarray::Axis(0), f), &dir.join(format!("target_{f:04}.png")))?;
        save_rgb(sample.agnostic_video.index_axis(ndarray::Axis(0), f), &dir.join(format!("agnostic_{f:04}.png")))?;
        save_gray(sample.agnostic_mask.index_axis(ndarray::Axis(0), f), &dir.join(format!("mask_{f:04}.png")))?;
    }
    save_rgb(sample.garment_image.view(), &dir.join("garment.png"))?;
    let mut text = String::new();
    for (f, p) in sample.human_pose.iter().enumerate() {
        pose_lines(&mut text, f as i64, p);
    }
    pose_lines(&mut text, GARMENT_FRAME, &sample.garment_pose);
    let path = dir.join(POSES_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_manifest(manifest: &Manifest) -> Result<()> {
    let mut text = String::new();
    for e in &manifest.entries {
        let _ = writeln!(text, "{} {}", e.dir, e.garment_kind);
    }
    let path = manifest.path();
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Generates and writes every spec under `root`, returning the manifest
/// (also written to `root/manifest.txt`).
pub fn write_dataset(specs: &[SceneSpec], root: &Path) -> Result<Manifest> {
    create_dir(root)?;
    let mut entries = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let dir = format!("sample_{i:04}");
        let sample = generate_sample(spec)?;
        write_sample(&sample, &root.join(&dir))?;
        entries.push(ManifestEntry {
            dir,
            garment_kind: spec.garment_kind,
        });
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        entries,
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

/// Reads a manifest file; sample directories resolve against its parent.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let dir = parts.next().unwrap_or_default().to_string();
        let kind = parts
            .next()
            .ok_or_else(|| Error::Data(format!("{}:{}: missing garment kind", path.display(), n + 1)))?
            .parse()?;
        entries.push(ManifestEntry { dir, garment_kind: kind });
    }
    Ok(Manifest { root, entries })
}

fn parse_poses(text: &str, path: &Path) -> Result<(Vec<SkeletonPose>, Vec<Joint>)> {
    let bad = |n: usize, what: &str| Error::Data(format!("{}:{}: {what}", path.display(), n + 1));
    let mut frames: Vec<Vec<Joint>> = Vec::new();
    let mut garment = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(n, "expected `frame joint x y present`"));
        }
        let frame: i64 = f[0].parse().map_err(|_| bad(n, "bad frame index"))?;
        let joint: usize = f[1].parse().map_err(|_| bad(n, "bad joint index"))?;
        let x: f32 = f[2].parse().map_err(|_| bad(n, "bad x"))?;
        let y: f32 = f[3].parse().map_err(|_| bad(n, "bad y"))?;
        let present = match f[4] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(n, "presence must be 0 or 1")),
        };
        let list = if frame == GARMENT_FRAME {
            &mut garment
        } else if frame >= 0 {
            let fi = frame as usize;
            if frames.len() <= fi {
                frames.resize(fi + 1, Vec::new());
            }
            &mut frames[fi]
        } else {
            return Err(bad(n, "negative frame index"));
        };
        if joint != list.len() {
            return Err(bad(n, "joints must be listed in order"));
        }
        list.push(Joint { x, y, present });
    }
    let human = frames
        .into_iter()
        .map(|j| SkeletonPose::new(SkeletonKind::Human, j))
        .collect::<Result<Vec<_>>>()?;
    Ok((human, garment))
}

/// Reads one sample directory written by [`write_sample`].
pub fn read_sample(dir: &Path, garment_kind: GarmentKind) -> Result<TryOnSample> {
    let path = dir.join(POSES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (human_pose, garment_joints) = parse_poses(&text, &path)?;
    let garment_pose = SkeletonPose::new(garment_kind.skeleton_kind(), garment_joints)?;
    let t = human_pose.len();
    if t == 0 {
        return Err(Error::Data(format!("{} lists no frames", path.display())));
    }
    let garment_image = load_rgb(&dir.join("garment.png"))?;
    let (_, h, w) = garment_image.dim();
    let mut source = Array4::zeros((t, 3, h, w));
    let mut target = Array4::zeros((t, 3, h, w));
    let mut agnostic = Array4::zeros((t, 3, h, w));
    let mut mask = Array4::zeros((t, 1, h, w));
    for f in 0..t {
        for (arr, name, gray) in [
            (&mut source, "source", false),
            (&mut target, "target", false),
            (&mut agnostic, "agnostic", false),
            (&mut mask, "mask", true),
        ] {
            let p = dir.join(format!("{name}_{f:04}.png"));
            let img = if gray { load_gray(&p)? } else { load_rgb(&p)? };
            if img.dim().1 != h || img.dim().2 != w {
                return Err(Error::Data(format!("{} does not match the garment image size", p.display())));
            }
            arr.index_axis_mut(ndarray::Axis(0), f).assign(&img);
        }
    }
    Ok(TryOnSample {
        source_video: source,
        target_video: target,
        garment_image,
        agnostic_video: agnostic,
        agnostic_mask: mask,
        human_pose,
        garment_pose,
        garment_kind,
    })
}

/// Reads a sample directory, taking the garment kind from the number of
/// garment landmarks in its pose file.
pub fn read_sample_dir(dir: &Path) -> Result<TryOnSample> {
    let path = dir.join(POSES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (_, garment) = parse_poses(&text, &path)?;
    let kind = match SkeletonKind::garment_from_count(garment.len()) {
        Some(SkeletonKind::UpperGarment) => GarmentKind::Upper,
        Some(SkeletonKind::LowerGarment) => GarmentKind::Lower,
        Some(SkeletonKind::DressGarment) => GarmentKind::Dress,
        _ => {
            return Err(Error::Data(format!(
                "{}: {} garment landmarks match no garment kind",
                path.display(),
                garment.len()
            )))
        }
    };
    read_sample(dir, kind)
}

/// Reads the manifest at `path` and every sample it lists.
pub fn read_dataset(path: &Path) -> Result<(Manifest, Vec<TryOnSample>)> {
    let manifest = read_manifest(path)?;
    let samples = (0..manifest.len())
        .map(|i| read_sample(&manifest.sample_dir(i), manifest.entries[i].garment_kind))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
