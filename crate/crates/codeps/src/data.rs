//! Synthetic multi-domain scene generation and dataset IO.
//!
//! Scenes are ray-cast from axis-aligned boxes on a ground plane under a sky
//! band. Surface colors are anchored to world position, so a moving camera
//! sees a photoconsistent (Lambertian) world and ground-truth depth plus
//! camera poses reproduce neighbor frames by reprojection.
//!
//! On-disk layout per sequence: `rgb/%06d.png`, `semantic/%06d.png`,
//! `instance/%06d.png`, `depth/%06d.png` (16-bit millimeters, 0 = invalid),
//! `intrinsics.txt` (fx fy cx cy), plus one `classes.txt` per dataset root.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CodepsError, Result};
use crate::imaging::{
    CameraIntrinsics, DepthMap, ImageTensor, InstanceMap, LabelMap, PoseTransform,
};
use crate::replay::{FeatureVector, Sample, TargetBuffer};
use crate::scalar::Real;

pub const CLASS_SKY: u16 = 0;
pub const CLASS_GROUND: u16 = 1;
pub const CLASS_BUILDING: u16 = 2;
pub const CLASS_BOX: u16 = 3;
pub const CLASS_PYLON: u16 = 4;
pub const CLASS_BARREL: u16 = 5;
pub const NUM_CLASSES: usize = 6;
pub const THING_CLASSES: [u16; 3] = [CLASS_BOX, CLASS_PYLON, CLASS_BARREL];

pub fn class_names() -> Vec<(u16, &'static str, bool)> {
    vec![
        (CLASS_SKY, "sky", false),
        (CLASS_GROUND, "ground", false),
        (CLASS_BUILDING, "building", false),
        (CLASS_BOX, "box", true),
        (CLASS_PYLON, "pylon", true),
        (CLASS_BARREL, "barrel", true),
    ]
}

/// Maximum depth written to disk; hits beyond it count as invalid.
const MAX_DEPTH: f64 = 60.0;

/// Parameters of one synthetic domain.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub tag: String,
    pub height: usize,
    pub width: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub num_frames: usize,
    pub layout_seed: u64,
    /// Thing instances per 10 world units of corridor.
    pub object_density: f64,
    /// Camera translation per frame (world units).
    pub speed: f64,
    /// Peak yaw (radians) of the serpentine camera path.
    pub heading_amplitude: f64,
    /// 0 = source palette; 1 = fully shifted target palette.
    pub palette_shift: f64,
    pub labeled: bool,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 {
            return Err(CodepsError::invalid("domain: dims must be multiples of 4"));
        }
        if self.num_frames < 3 {
            return Err(CodepsError::invalid("domain: need at least 3 frames"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CodepsError::invalid("domain: focal lengths must be > 0"));
        }
        if self.object_density < 0.0 || self.speed < 0.0 {
            return Err(CodepsError::invalid("domain: negative density or speed"));
        }
        if !(0.0..=1.0).contains(&self.palette_shift) {
            return Err(CodepsError::invalid("domain: palette_shift outside [0,1]"));
        }
        Ok(())
    }

    pub fn intrinsics<R: Real>(&self) -> Result<CameraIntrinsics<R>> {
        CameraIntrinsics::new(R::c(self.fx), R::c(self.fy), R::c(self.cx), R::c(self.cy))
    }
}

/// Labeled source domain.
pub fn stock_domain_a(num_frames: usize) -> DomainSpec {
    DomainSpec {
        tag: "domain-urban-a".into(),
        height: 64,
        width: 96,
        fx: 80.0,
        fy: 80.0,
        cx: 48.0,
        cy: 32.0,
        num_frames,
        layout_seed: 100,
        object_density: 1.6,
        speed: 0.16,
        heading_amplitude: 0.12,
        palette_shift: 0.0,
        labeled: true,
    }
}

/// Palette-shifted target domain with different intrinsics.
pub fn stock_domain_b(num_frames: usize) -> DomainSpec {
    DomainSpec {
        tag: "domain-urban-b".into(),
        height: 64,
        width: 96,
        fx: 60.0,
        fy: 60.0,
        cx: 54.0,
        cy: 30.0,
        num_frames,
        layout_seed: 200,
        object_density: 1.6,
        speed: 0.16,
        heading_amplitude: 0.12,
        palette_shift: 0.5,
        labeled: true,
    }
}

// --- world model -----------------------------------------------------------

struct WorldBox {
    min: [f64; 3],
    max: [f64; 3],
    class: u16,
    instance: u32,
}

struct World {
    boxes: Vec<WorldBox>,
    ground_y: f64,
}

fn build_world(spec: &DomainSpec) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let ground_y = 1.5;
    let corridor = spec.num_frames as f64 * spec.speed + 20.0;
    let mut boxes = Vec::new();
    // Building rows on both sides.
    let mut z = -4.0;
    while z < corridor {
        for side in [-1.0, 1.0] {
            let x = side * rng.gen_range(5.5..8.5);
            let w = rng.gen_range(2.5..4.5);
            let h = rng.gen_range(3.0..6.0);
            let d = rng.gen_range(4.0..7.0);
            boxes.push(WorldBox {
                min: [x - w / 2.0, ground_y - h, z],
                max: [x + w / 2.0, ground_y, z + d],
                class: CLASS_BUILDING,
                instance: 0,
            });
        }
        z += rng.gen_range(6.0..9.0);
    }
    // Thing obstacles in the corridor.
    let n_things = (spec.object_density * corridor / 10.0).round() as usize;
    let mut instance = 1u32;
    for _ in 0..n_things {
        let z = rng.gen_range(2.0..corridor);
        let x = rng.gen_range(1.2..4.2) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let roll: f64 = rng.gen();
        let (class, w, h) = if roll < 0.08 {
            (CLASS_BARREL, rng.gen_range(0.5..0.7), rng.gen_range(0.7..0.9))
        } else if roll < 0.5 {
            (CLASS_PYLON, rng.gen_range(0.25..0.4), rng.gen_range(1.1..1.5))
        } else {
            (CLASS_BOX, rng.gen_range(0.8..1.4), rng.gen_range(0.8..1.3))
        };
        boxes.push(WorldBox {
            min: [x - w / 2.0, ground_y - h, z],
            max: [x + w / 2.0, ground_y, z + w],
            class,
            instance,
        });
        instance += 1;
    }
    World { boxes, ground_y }
}

fn ray_box(org: [f64; 3], dir: [f64; 3], b: &WorldBox) -> Option<f64> {
    let mut t0 = 0.05f64;
    let mut t1 = MAX_DEPTH;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if org[i] < b.min[i] || org[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut a, mut bb) = ((b.min[i] - org[i]) * inv, (b.max[i] - org[i]) * inv);
        if a > bb {
            std::mem::swap(&mut a, &mut bb);
        }
        t0 = t0.max(a);
        t1 = t1.min(bb);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

/// World-anchored surface shading: a smooth low-frequency texture over a
/// per-class base color, with a slight per-instance tint.
fn surface_color(class: u16, instance: u32, p: [f64; 3]) -> [f64; 3] {
    let base = match class {
        CLASS_GROUND => [0.35, 0.33, 0.30],
        CLASS_BUILDING => [0.55, 0.50, 0.45],
        CLASS_BOX => [0.72, 0.45, 0.18],
        CLASS_PYLON => [0.80, 0.28, 0.24],
        CLASS_BARREL => [0.18, 0.45, 0.75],
        _ => [0.0, 0.0, 0.0],
    };
    let tex = 0.07 * (1.3 * p[0] + 0.7 * p[2]).sin() + 0.05 * (2.1 * p[1] + 1.7 * p[0]).sin();
    let tint = if instance == 0 {
        0.0
    } else {
        0.05 * ((instance.wrapping_mul(2654435761) % 256) as f64 / 255.0 - 0.5)
    };
    [
        (base[0] + tex + tint).clamp(0.0, 1.0),
        (base[1] + tex + tint).clamp(0.0, 1.0),
        (base[2] + tex + tint).clamp(0.0, 1.0),
    ]
}

fn sky_color(dir: [f64; 3]) -> [f64; 3] {
    // dir is normalized-ish; y is down, so up is negative y.
    let up = (-dir[1] / (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt()).max(0.0);
    [
        (0.55 - 0.15 * up).clamp(0.0, 1.0),
        (0.68 - 0.08 * up).clamp(0.0, 1.0),
        (0.88 + 0.05 * up).clamp(0.0, 1.0),
    ]
}

/// Monotone per-channel palette remap, blended by `shift`. Monotonicity
/// keeps the shift realizable by histogram matching.
fn palette_remap(v: f64, channel: usize, shift: f64) -> f64 {
    let mapped = match channel {
        0 => v.powf(0.55) * 1.05,
        1 => v,
        _ => v.powf(1.8) * 0.95,
    };
    ((1.0 - shift) * v + shift * mapped).clamp(0.0, 1.0)
}

/// One rendered frame with its ground truth and camera-to-world pose.
#[derive(Debug, Clone)]
pub struct RenderedFrame<R> {
    pub image: ImageTensor<R>,
    pub semantic: LabelMap,
    pub instance: InstanceMap,
    pub depth: DepthMap<R>,
    pub cam_to_world: PoseTransform<R>,
}

fn yaw_rotation<R: Real>(yaw: f64) -> [[R; 3]; 3] {
    let (s, c) = (R::c(yaw.sin()), R::c(yaw.cos()));
    [
        [c, R::zero(), s],
        [R::zero(), R::one(), R::zero()],
        [-s, R::zero(), c],
    ]
}

/// Renders every frame of the domain in memory.
pub fn generate_frames<R: Real>(spec: &DomainSpec) -> Result<Vec<RenderedFrame<R>>> {
    spec.validate()?;
    let world = build_world(spec);
    let k = spec.intrinsics::<f64>()?;
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut pos = [0.0f64, 0.0, 0.0];
    let mut dist = 0.0f64;
    for _ in 0..spec.num_frames {
        let yaw = spec.heading_amplitude * (0.12 * dist).sin();
        let (s, c) = (yaw.sin(), yaw.cos());
        let rot = [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]];
        let mut image = ImageTensor::zeros(spec.height, spec.width, 3);
        let mut semantic = LabelMap::filled(spec.height, spec.width, CLASS_SKY);
        let mut instance = InstanceMap::filled(spec.height, spec.width, 0);
        let mut depth = DepthMap::filled(spec.height, spec.width, R::zero());
        for y in 0..spec.height {
            for x in 0..spec.width {
                let ray_c = k.unproject(x as f64, y as f64);
                // Rotate into world; the ray keeps camera-depth parameter
                // (z_cam = 1), so the hit parameter t equals metric depth.
                let dir = [
                    rot[0][0] * ray_c[0] + rot[0][1] * ray_c[1] + rot[0][2] * ray_c[2],
                    rot[1][0] * ray_c[0] + rot[1][1] * ray_c[1] + rot[1][2] * ray_c[2],
                    rot[2][0] * ray_c[0] + rot[2][1] * ray_c[1] + rot[2][2] * ray_c[2],
                ];
                let mut best_t = f64::INFINITY;
                let mut hit: Option<(u16, u32)> = None;
                if dir[1] > 1e-9 {
                    let t = (world.ground_y - pos[1]) / dir[1];
                    if t > 0.05 && t < MAX_DEPTH {
                        best_t = t;
                        hit = Some((CLASS_GROUND, 0));
                    }
                }
                for b in &world.boxes {
                    if let Some(t) = ray_box(pos, dir, b) {
                        if t < best_t {
                            best_t = t;
                            hit = Some((b.class, b.instance));
                        }
                    }
                }
                let color = match hit {
                    Some((class, inst)) => {
                        let p = [
                            pos[0] + dir[0] * best_t,
                            pos[1] + dir[1] * best_t,
                            pos[2] + dir[2] * best_t,
                        ];
                        semantic.set(y, x, class);
                        instance.set(y, x, inst);
                        depth.set(y, x, R::c(best_t));
                        surface_color(class, inst, p)
                    }
                    None => sky_color(dir),
                };
                for ch in 0..3 {
                    image.set(y, x, ch, R::c(palette_remap(color[ch], ch, spec.palette_shift)));
                }
            }
        }
        let cam_to_world = PoseTransform {
            rotation: yaw_rotation::<R>(yaw),
            translation: [R::c(pos[0]), R::c(pos[1]), R::c(pos[2])],
        };
        frames.push(RenderedFrame {
            image,
            semantic,
            instance,
            depth,
            cam_to_world,
        });
        pos[0] += spec.speed * s;
        pos[2] += spec.speed * c;
        dist += spec.speed;
    }
    Ok(frames)
}

/// Builds ordered three-frame samples directly from rendered frames,
/// mirroring what `load_sequence` produces from disk (minus quantization).
pub fn frames_to_samples<R: Real>(
    frames: &[RenderedFrame<R>],
    intrinsics: CameraIntrinsics<R>,
    domain_tag: &str,
    labeled: bool,
) -> Vec<Sample<R>> {
    let mut out = Vec::new();
    for i in 2..frames.len() {
        let p = &frames[i - 1];
        out.push(Sample {
            frames: [
                frames[i - 2].image.clone(),
                frames[i - 1].image.clone(),
                frames[i].image.clone(),
            ],
            intrinsics,
            semantic: labeled.then(|| p.semantic.clone()),
            instance: labeled.then(|| p.instance.clone()),
            gt_depth: Some(p.depth.clone()),
            domain_tag: domain_tag.to_string(),
            sequence_index: i - 1,
            rel_path: format!("rgb/{}", frame_name(i - 1)),
        });
    }
    out
}

// --- PNG IO ----------------------------------------------------------------

fn io_err(path: &Path, e: std::io::Error) -> CodepsError {
    CodepsError::io(path.display().to_string(), e)
}

fn img_err(path: &Path, e: image::ImageError) -> CodepsError {
    CodepsError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_rgb<R: Real>(path: &Path, img: &ImageTensor<R>) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = [0, 1, 2].map(|c| {
                (img.get(y, x, c).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| img_err(path, e))
}

/// Debug artifact: one mixed image plus its pseudo-label map per step.
pub fn write_debug_mixed<R: Real>(
    dir: &Path,
    step: u64,
    image: &ImageTensor<R>,
    labels: &LabelMap,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CodepsError::io(dir.display().to_string(), e))?;
    write_rgb(&dir.join(format!("mixed_{step:06}.png")), image)?;
    write_gray8(
        &dir.join(format!("pseudo_{step:06}.png")),
        &labels.data,
        labels.height,
        labels.width,
    )
}

fn read_rgb<R: Real>(path: &Path) -> Result<ImageTensor<R>> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageTensor::from_fn(h, w, 3, |y, x, c| {
        R::c(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    }))
}

fn write_gray8(path: &Path, data: &[u16], h: usize, w: usize) -> Result<()> {
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = data[y * w + x];
            if v > 255 {
                return Err(CodepsError::contract("label id exceeds 8-bit storage"));
            }
            buf.put_pixel(x as u32, y as u32, image::Luma([v as u8]));
        }
    }
    buf.save(path).map_err(|e| img_err(path, e))
}

fn read_gray8(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as u16).collect();
    Ok((data, h, w))
}

fn write_gray16(path: &Path, data: &[u16], h: usize, w: usize) -> Result<()> {
    let mut buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([data[y * w + x]]));
        }
    }
    buf.save(path).map_err(|e| img_err(path, e))
}

fn read_gray16(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

/// Renders the domain and writes one sequence directory under `root`, plus
/// the dataset-level `classes.txt`. Returns the sequence directory.
pub fn generate_domain<R: Real>(spec: &DomainSpec, root: &Path) -> Result<PathBuf> {
    let frames = generate_frames::<R>(spec)?;
    let seq = root.join(&spec.tag);
    let subdirs: &[&str] = if spec.labeled {
        &["rgb", "semantic", "instance", "depth"]
    } else {
        &["rgb", "depth"]
    };
    for sub in subdirs {
        fs::create_dir_all(seq.join(sub)).map_err(|e| io_err(&seq.join(sub), e))?;
    }
    for (i, f) in frames.iter().enumerate() {
        write_rgb(&seq.join("rgb").join(frame_name(i)), &f.image)?;
        if spec.labeled {
            write_gray8(
                &seq.join("semantic").join(frame_name(i)),
                &f.semantic.data,
                spec.height,
                spec.width,
            )?;
            let inst16: Vec<u16> = f.instance.data.iter().map(|v| *v as u16).collect();
            write_gray16(
                &seq.join("instance").join(frame_name(i)),
                &inst16,
                spec.height,
                spec.width,
            )?;
        }
        let mm: Vec<u16> = f
            .depth
            .data
            .iter()
            .map(|d| (d.as_f64() * 1000.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        write_gray16(
            &seq.join("depth").join(frame_name(i)),
            &mm,
            spec.height,
            spec.width,
        )?;
    }
    let intr = format!("{} {} {} {}\n", spec.fx, spec.fy, spec.cx, spec.cy);
    fs::write(seq.join("intrinsics.txt"), intr).map_err(|e| io_err(&seq, e))?;
    let classes: String = class_names()
        .iter()
        .map(|(id, name, thing)| {
            format!("{id} {name} {}\n", if *thing { "thing" } else { "stuff" })
        })
        .collect();
    fs::write(root.join("classes.txt"), classes).map_err(|e| io_err(root, e))?;
    Ok(seq)
}

fn parse_err(path: &Path, message: impl Into<String>) -> CodepsError {
    CodepsError::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn read_intrinsics<R: Real>(path: &Path) -> Result<CameraIntrinsics<R>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, format!("bad intrinsics: {e}")))?;
    if vals.len() != 4 {
        return Err(parse_err(path, "expected exactly fx fy cx cy"));
    }
    CameraIntrinsics::new(R::c(vals[0]), R::c(vals[1]), R::c(vals[2]), R::c(vals[3]))
}

fn numbered_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| parse_err(&path, "non-utf8 filename"))?;
        let idx: usize = stem
            .parse()
            .map_err(|_| parse_err(&path, "filename is not a frame index"))?;
        out.push((idx, path));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

/// Loads a sequence directory into ordered three-frame samples. Sample `i`
/// holds frames `(i-2, i-1, i)` with the center frame as principal; labels
/// and depth, when present, belong to the principal frame.
pub fn load_sequence<R: Real>(seq: &Path, domain_tag: &str) -> Result<Vec<Sample<R>>> {
    let rgb_files = numbered_files(&seq.join("rgb"))?;
    if rgb_files.len() < 3 {
        return Err(CodepsError::invalid(format!(
            "sequence {} has fewer than 3 frames",
            seq.display()
        )));
    }
    let intrinsics = read_intrinsics::<R>(&seq.join("intrinsics.txt"))?;
    let labeled = seq.join("semantic").is_dir();
    let has_depth = seq.join("depth").is_dir();
    let mut images = Vec::with_capacity(rgb_files.len());
    for (_, path) in &rgb_files {
        images.push(read_rgb::<R>(path)?);
    }
    let mut samples = Vec::new();
    for i in 2..rgb_files.len() {
        let principal_idx = rgb_files[i - 1].0;
        let name = frame_name(principal_idx);
        let semantic = if labeled {
            let (data, h, w) = read_gray8(&seq.join("semantic").join(&name))?;
            Some(LabelMap {
                height: h,
                width: w,
                data,
            })
        } else {
            None
        };
        let instance = if labeled && seq.join("instance").is_dir() {
            let (data, h, w) = read_gray16(&seq.join("instance").join(&name))?;
            Some(InstanceMap {
                height: h,
                width: w,
                data: data.into_iter().map(|v| v as u32).collect(),
            })
        } else {
            None
        };
        let gt_depth = if has_depth {
            let (data, h, w) = read_gray16(&seq.join("depth").join(&name))?;
            let mut d = DepthMap::filled(h, w, R::zero());
            for (dst, mm) in d.data.iter_mut().zip(&data) {
                *dst = R::c(*mm as f64 / 1000.0);
            }
            Some(d)
        } else {
            None
        };
        samples.push(Sample {
            frames: [
                images[i - 2].clone(),
                images[i - 1].clone(),
                images[i].clone(),
            ],
            intrinsics,
            semantic,
            instance,
            gt_depth,
            domain_tag: domain_tag.to_string(),
            sequence_index: principal_idx,
            rel_path: format!("rgb/{name}"),
        });
    }
    Ok(samples)
}

pub fn read_classes(path: &Path) -> Result<Vec<(u16, String, bool)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(parse_err(path, format!("bad class line: {line}")));
        }
        let id: u16 = parts[0]
            .parse()
            .map_err(|_| parse_err(path, format!("bad class id: {}", parts[0])))?;
        let thing = match parts[2] {
            "thing" => true,
            "stuff" => false,
            other => return Err(parse_err(path, format!("bad class kind: {other}"))),
        };
        out.push((id, parts[1].to_string(), thing));
    }
    Ok(out)
}

// --- buffer manifest ---------------------------------------------------------

/// Writes the target buffer as a text manifest (`domain_tag sequence_index
/// rel_path` per line) plus a little-endian f32 feature sidecar.
pub fn save_buffer_manifest<R: Real>(buffer: &TargetBuffer<R>, path: &Path) -> Result<()> {
    let mut text = String::new();
    let mut feats: Vec<u8> = Vec::new();
    let dim = buffer.entries().first().map_or(0, |(_, f)| f.dim());
    feats.extend_from_slice(&(buffer.len() as u32).to_le_bytes());
    feats.extend_from_slice(&(dim as u32).to_le_bytes());
    for (sample, feat) in buffer.entries() {
        text.push_str(&format!(
            "{} {} {}\n",
            sample.domain_tag, sample.sequence_index, sample.rel_path
        ));
        for v in &feat.0 {
            feats.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    let side = path.with_extension("features");
    fs::write(&side, feats).map_err(|e| io_err(&side, e))
}

/// Reads back the manifest entries and features (paths only; pixel data is
/// re-loaded from the dataset by the caller).
pub fn load_buffer_manifest<R: Real>(
    path: &Path,
) -> Result<Vec<(String, usize, String, FeatureVector<R>)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let side = path.with_extension("features");
    let bytes = fs::read(&side).map_err(|e| io_err(&side, e))?;
    if bytes.len() < 8 {
        return Err(parse_err(&side, "truncated feature sidecar"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * dim * 4 {
        return Err(parse_err(&side, "feature sidecar length mismatch"));
    }
    let mut out = Vec::with_capacity(count);
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(parse_err(path, format!("bad manifest line: {line}")));
        }
        let seq_idx: usize = parts[1]
            .parse()
            .map_err(|_| parse_err(path, format!("bad sequence index: {}", parts[1])))?;
        let mut feat = Vec::with_capacity(dim);
        for j in 0..dim {
            let off = 8 + (i * dim + j) * 4;
            feat.push(R::c(
                f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64,
            ));
        }
        out.push((
            parts[0].to_string(),
            seq_idx,
            parts[2].to_string(),
            FeatureVector(feat),
        ));
    }
    if out.len() != count {
        return Err(parse_err(path, "manifest/sidecar entry count mismatch"));
    }
    Ok(out)
}

// --- flat key=value config ---------------------------------------------------

/// Parses flat `key=value` text: one pair per line, `#` comments allowed.
pub fn parse_kv(text: &str, path: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CodepsError::Parse {
            path: path.to_string(),
            message: format!("line {}: expected key=value", lineno + 1),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synthesize_view;
    use crate::losses::{photometric_loss, LossWeights};

    fn tiny_spec() -> DomainSpec {
        DomainSpec {
            tag: "tiny".into(),
            height: 32,
            width: 48,
            fx: 40.0,
            fy: 40.0,
            cx: 24.0,
            cy: 16.0,
            num_frames: 6,
            layout_seed: 9,
            object_density: 2.0,
            speed: 0.15,
            heading_amplitude: 0.1,
            palette_shift: 0.0,
            labeled: true,
        }
    }

    #[test]
    fn zero_density_has_no_instances() {
        let mut spec = tiny_spec();
        spec.object_density = 0.0;
        let frames = generate_frames::<f64>(&spec).unwrap();
        for f in &frames {
            assert!(f.instance.data.iter().all(|v| *v == 0));
            assert!(f.semantic.data.iter().all(|c| !THING_CLASSES.contains(c)));
        }
    }

    #[test]
    fn zero_speed_is_static_and_photometrically_consistent() {
        let mut spec = tiny_spec();
        spec.speed = 0.0;
        let frames = generate_frames::<f64>(&spec).unwrap();
        for f in &frames[1..] {
            assert_eq!(f.image.data(), frames[0].image.data());
        }
        // Static scene, identity poses: reprojection error must vanish.
        // Invalid (sky/far) depth is patched to an arbitrary positive value.
        let depth: Vec<f64> = frames[0]
            .depth
            .data
            .iter()
            .map(|d| if *d > 0.0 { *d } else { 8.0 })
            .collect();
        let k = spec.intrinsics::<f64>().unwrap();
        let trip = [
            frames[0].image.clone(),
            frames[1].image.clone(),
            frames[2].image.clone(),
        ];
        let w = LossWeights {
            lambda_sm: 0.0,
            ..Default::default()
        };
        let r = photometric_loss(&trip, &depth, &[0.0; 6], &[0.0; 6], &k, &w).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn view_synthesis_self_consistency() {
        // Reconstruct frame t+1 from frame t using gt depth and pose; the
        // world is Lambertian so the residual is resampling noise only.
        for spec in [tiny_spec(), {
            let mut s = tiny_spec();
            s.palette_shift = 1.0;
            s.layout_seed = 77;
            s
        }] {
            let frames = generate_frames::<f64>(&spec).unwrap();
            let k = spec.intrinsics::<f64>().unwrap();
            let (a, b) = (&frames[2], &frames[3]);
            // maps frame-b camera coords into frame-a camera coords
            let pose = a.cam_to_world.inverse().compose(&b.cam_to_world);
            let (recon, mask) = synthesize_view(&a.image, &b.depth, &pose, &k).unwrap();
            let mut err = 0.0;
            let mut n = 0usize;
            for y in 0..spec.height {
                for x in 0..spec.width {
                    if !mask.get(y, x) {
                        continue;
                    }
                    for c in 0..3 {
                        err += (recon.get(y, x, c) - b.image.get(y, x, c)).abs();
                        n += 1;
                    }
                }
            }
            assert!(n > 0);
            let mean = err / n as f64;
            assert!(mean < 0.02, "mean abs error {mean} for {}", spec.tag);
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let seq = generate_domain::<f64>(&spec, dir.path()).unwrap();
        let frames = generate_frames::<f64>(&spec).unwrap();
        let samples = load_sequence::<f64>(&seq, &spec.tag).unwrap();
        assert_eq!(samples.len(), spec.num_frames - 2);
        let s = &samples[0]; // frames (0,1,2), principal 1
        assert_eq!(s.sequence_index, 1);
        assert!(s.is_labeled());
        for (loaded, gen) in [
            (&s.frames[0], &frames[0]),
            (&s.frames[1], &frames[1]),
            (&s.frames[2], &frames[2]),
        ] {
            for (a, b) in loaded.data().iter().zip(gen.image.data()) {
                // 8-bit quantized round trip
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
        assert_eq!(s.semantic.as_ref().unwrap().data, frames[1].semantic.data);
        assert_eq!(s.instance.as_ref().unwrap().data, frames[1].instance.data);
        for (a, b) in s
            .gt_depth
            .as_ref()
            .unwrap()
            .data
            .iter()
            .zip(&frames[1].depth.data)
        {
            assert!((a - b).abs() <= 0.0005 + 1e-9, "{a} vs {b}");
        }
        let classes = read_classes(&dir.path().join("classes.txt")).unwrap();
        assert_eq!(classes.len(), NUM_CLASSES);
        assert!(classes.iter().any(|(id, n, t)| *id == 5 && n == "barrel" && *t));
    }

    #[test]
    fn unlabeled_domain_loads_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.labeled = false;
        let seq = generate_domain::<f64>(&spec, dir.path()).unwrap();
        let samples = load_sequence::<f64>(&seq, &spec.tag).unwrap();
        assert!(samples.iter().all(|s| !s.is_labeled()));
        assert!(samples.iter().all(|s| s.gt_depth.is_some()));
    }

    #[test]
    fn load_orders_by_numeric_index() {
        let dir = tempfile::tempdir().unwrap();
        let seq = dir.path().join("seq");
        fs::create_dir_all(seq.join("rgb")).unwrap();
        fs::write(seq.join("intrinsics.txt"), "10 10 4 4").unwrap();
        // deliberately written out of order with inconsistent padding
        for (i, v) in [(10usize, 30u8), (3, 10), (1, 200)] {
            let img = ImageTensor::<f64>::from_fn(8, 8, 3, |_, _, _| v as f64 / 255.0);
            write_rgb(&seq.join("rgb").join(format!("{i}.png")), &img).unwrap();
        }
        let samples = load_sequence::<f64>(&seq, "t").unwrap();
        assert_eq!(samples.len(), 1);
        // order 1, 3, 10 -> frames dims ok; principal is file "3"
        assert_eq!(samples[0].sequence_index, 3);
        assert!((samples[0].frames[0].get(0, 0, 0) - 200.0 / 255.0).abs() < 1e-9);
        assert!((samples[0].frames[2].get(0, 0, 0) - 30.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn malformed_intrinsics_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("intrinsics.txt");
        fs::write(&p, "1 2 three 4").unwrap();
        let err = read_intrinsics::<f64>(&p).unwrap_err();
        assert!(err.to_string().contains("intrinsics.txt"));
    }

    #[test]
    fn buffer_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let frames = generate_frames::<f64>(&spec).unwrap();
        let mut buffer = TargetBuffer::new(4);
        for (i, f) in frames.iter().take(3).enumerate() {
            let sample = Sample {
                frames: [f.image.clone(), f.image.clone(), f.image.clone()],
                intrinsics: spec.intrinsics().unwrap(),
                semantic: None,
                instance: None,
                gt_depth: None,
                domain_tag: spec.tag.clone(),
                sequence_index: i,
                rel_path: format!("rgb/{}", frame_name(i)),
            };
            buffer.push_unchecked(sample, FeatureVector(vec![i as f64, 1.0, -0.5]));
        }
        let path = dir.path().join("buffer.txt");
        save_buffer_manifest(&buffer, &path).unwrap();
        let loaded = load_buffer_manifest::<f64>(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (i, (tag, idx, rel, feat)) in loaded.iter().enumerate() {
            assert_eq!(tag, &spec.tag);
            assert_eq!(*idx, i);
            assert_eq!(rel, &format!("rgb/{}", frame_name(i)));
            assert_eq!(feat.0.len(), 3);
            assert!((feat.0[0] - i as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn kv_parser() {
        let pairs = parse_kv("# comment\nseed = 42\n\nlr=0.001\n", "cfg").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("seed".to_string(), "42".to_string()),
                ("lr".to_string(), "0.001".to_string())
            ]
        );
        assert!(parse_kv("no_equals_here", "cfg").is_err());
    }

    #[test]
    fn palette_remap_is_monotone() {
        for c in 0..3 {
            let mut prev = -1.0;
            for i in 0..=100 {
                let v = palette_remap(i as f64 / 100.0, c, 1.0);
                assert!(v >= prev);
                prev = v;
            }
        }
    }
}
