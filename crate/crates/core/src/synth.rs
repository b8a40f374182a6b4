//! Procedural textured scenes with analytic depth, used as a ground-truth
//! oracle for the whole pipeline.

use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, mapfile, MapKind, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, PoseSE3};
use crate::raster::{self, Image};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Frequency of the coarsest octave, cycles per meter.
    pub base_frequency: f64,
    pub octaves: u32,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
    /// Frequency ratio between successive octaves.
    pub lacunarity: f64,
    /// Gain applied around mid-gray before clamping.
    pub contrast: f64,
    /// Octaves fade out between half this many cycles per pixel and this.
    pub max_cycles_per_pixel: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            base_frequency: 1.5,
            octaves: 5,
            persistence: 0.6,
            lacunarity: 2.0,
            contrast: 2.5,
            max_cycles_per_pixel: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Finite rectangle spanned by two orthonormal axes around `center`.
    Rect {
        center: [f64; 3],
        u_axis: [f64; 3],
        v_axis: [f64; 3],
        half_u: f64,
        half_v: f64,
        tint: [f64; 3],
    },
    /// Axis-aligned box.
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
        tint: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub texture: TextureSpec,
    pub seed: u64,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn rect(center: [f64; 3], u: [f64; 3], v: [f64; 3], half_u: f64, half_v: f64, tint: [f64; 3]) -> Primitive {
    Primitive::Rect {
        center,
        u_axis: u,
        v_axis: v,
        half_u,
        half_v,
        tint,
    }
}

impl SceneSpec {
    /// Single plane at depth `z` facing the origin, large enough to fill any
    /// reasonable view.
    pub fn fronto_parallel_plane(z: f64, seed: u64) -> Self {
        SceneSpec {
            primitives: vec![rect([0.0, 0.0, z], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1e3, 1e3, [1.0; 3])],
            texture: TextureSpec::default(),
            seed,
        }
    }

    /// Closed corridor along +z (camera y axis pointing down) with boxes along
    /// the walls. Depths seen from the default trajectory span about 1–10 m.
    pub fn corridor(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let mut tint = |base: [f64; 3]| {
            base.map(|c: f64| (c + rng.gen_range(-0.08..0.08)).clamp(0.2, 1.0))
        };
        let (x_wall, floor, ceiling, near, far) = (1.6, 1.0, -1.4, -2.0, 9.8);
        let mid = 0.5 * (near + far);
        let half_len = 0.5 * (far - near);
        let mut primitives = vec![
            rect([0.0, floor, mid], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], x_wall, half_len, tint([0.85, 0.7, 0.5])),
            rect([0.0, ceiling, mid], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], x_wall, half_len, tint([0.75, 0.8, 0.9])),
            rect([-x_wall, 0.5 * (floor + ceiling), mid], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], half_len, 1.2, tint([0.6, 0.85, 0.6])),
            rect([x_wall, 0.5 * (floor + ceiling), mid], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], half_len, 1.2, tint([0.9, 0.6, 0.6])),
            rect([0.0, 0.5 * (floor + ceiling), far], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], x_wall, 1.2, tint([0.7, 0.7, 0.95])),
            rect([0.0, 0.5 * (floor + ceiling), near], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], x_wall, 1.2, tint([0.8, 0.8, 0.8])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_boxes = 6;
        for b in 0..n_boxes {
            let side = if b % 2 == 0 { -1.0 } else { 1.0 };
            let size = [rng.gen_range(0.35..0.6), rng.gen_range(0.4..0.9), rng.gen_range(0.4..0.8)];
            let z0 = 1.5 + b as f64 * 1.15 + rng.gen_range(0.0..0.5);
            let x_in = side * (x_wall - rng.gen_range(0.0..0.1));
            let (x0, x1) = if side < 0.0 { (x_in, x_in + size[0]) } else { (x_in - size[0], x_in) };
            let tint = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
            primitives.push(Primitive::Cuboid {
                min: [x0, floor - size[1], z0],
                max: [x1, floor, z0 + size[2]],
                tint,
            });
        }
        SceneSpec {
            primitives,
            texture: TextureSpec::default(),
            seed,
        }
    }
}

/// Ray parameter and surface normal of the nearest hit, or `None`.
fn intersect(p: &Primitive, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match p {
        Primitive::Rect {
            center,
            u_axis,
            v_axis,
            half_u,
            half_v,
            ..
        } => {
            let (c, u, v) = (v3(*center), v3(*u_axis), v3(*v_axis));
            let n = u.cross(&v);
            let denom = dir.dot(&n);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (c - origin).dot(&n) / denom;
            if t <= HIT_EPS {
                return None;
            }
            let rel = origin + t * dir - c;
            (rel.dot(&u).abs() <= *half_u && rel.dot(&v).abs() <= *half_v).then_some((t, n))
        }
        Primitive::Cuboid { min, max, .. } => {
            let (lo, hi) = (v3(*min), v3(*max));
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            for a in 0..3 {
                if dir[a].abs() < 1e-15 {
                    if origin[a] < lo[a] || origin[a] > hi[a] {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    axis = a;
                }
                t_far = t_far.min(t1);
            }
            if t_near > t_far || t_near <= HIT_EPS {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = 1.0;
            Some((t_near, n))
        }
    }
}

fn tint(p: &Primitive) -> [f64; 3] {
    match p {
        Primitive::Rect { tint, .. } | Primitive::Cuboid { tint, .. } => *tint,
    }
}

#[inline]
fn hash(x: i64, y: i64, z: i64, salt: u64) -> f64 {
    let mut h = salt
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Trilinearly interpolated lattice noise in [0, 1].
fn value_noise(p: &Vector3<f64>, salt: u64) -> f64 {
    let f = p.map(f64::floor);
    let (x, y, z) = (f.x as i64, f.y as i64, f.z as i64);
    let (u, v, w) = (fade(p.x - f.x), fade(p.y - f.y), fade(p.z - f.z));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c = |dx, dy, dz| hash(x + dx, y + dy, z + dz, salt);
    lerp(
        lerp(lerp(c(0, 0, 0), c(1, 0, 0), u), lerp(c(0, 1, 0), c(1, 1, 0), u), v),
        lerp(lerp(c(0, 0, 1), c(1, 0, 1), u), lerp(c(0, 1, 1), c(1, 1, 1), u), v),
        w,
    )
}

/// Multi-octave noise at `p`. Octaves too fine for the pixel footprint
/// (meters per pixel at the hit) fade to their mean.
fn texture(spec: &TextureSpec, seed: u64, p: &Vector3<f64>, footprint: f64) -> f64 {
    let mut freq = spec.base_frequency;
    let mut amp = 1.0;
    let (mut sum, mut norm) = (0.0, 0.0);
    for o in 0..spec.octaves {
        let cycles_per_pixel = freq * footprint;
        let cut = spec.max_cycles_per_pixel;
        let keep = ((cut - cycles_per_pixel) / (0.5 * cut)).clamp(0.0, 1.0);
        let n = if keep > 0.0 {
            value_noise(&(p * freq), seed.wrapping_add(u64::from(o) * 0x1000_0001))
        } else {
            0.5
        };
        sum += amp * (keep * n + (1.0 - keep) * 0.5);
        norm += amp;
        freq *= spec.lacunarity;
        amp *= spec.persistence;
    }
    (0.5 + spec.contrast * (sum / norm - 0.5)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Image,
    pub depth: DepthMap,
}

struct Hit {
    depth: f64,
    primitive: usize,
    rgb: [f64; 3],
}

fn trace(scene: &SceneSpec, k: &CameraIntrinsics, pose: &PoseSE3, u: f64, v: f64, shade: bool) -> Option<Hit> {
    let ray_cam = k.ray(u, v);
    let dir = pose.rotation() * ray_cam;
    let origin = *pose.translation();
    let mut best: Option<(f64, usize, Vector3<f64>)> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        if let Some((t, n)) = intersect(p, &origin, &dir) {
            if best.map_or(true, |b| t < b.0) {
                best = Some((t, i, n));
            }
        }
    }
    let (t, i, n) = best?;
    // The camera-frame ray has z = 1, so the ray parameter is the depth.
    if !shade {
        return Some(Hit {
            depth: t,
            primitive: i,
            rgb: [0.0; 3],
        });
    }
    let hit = origin + t * dir;
    let cos = (dir.normalize().dot(&n)).abs().max(0.2);
    let footprint = t * dir.norm() / (k.fx.min(k.fy) * cos);
    let lum = texture(&scene.texture, scene.seed, &hit, footprint);
    let c = tint(&scene.primitives[i]);
    Some(Hit {
        depth: t,
        primitive: i,
        rgb: c.map(|ci| ci * (0.15 + 0.85 * lum)),
    })
}

/// Ray-casts one view. Depth is sampled at pixel centers; color averages a
/// `supersample × supersample` grid inside each pixel.
pub fn render_with(scene: &SceneSpec, k: &CameraIntrinsics, pose: &PoseSE3, supersample: usize) -> Rendered {
    let (h, w) = (k.height, k.width);
    let ss = supersample.max(1);
    let mut image = Array3::zeros((3, h, w));
    let mut depth = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            if let Some(hit) = trace(scene, k, pose, j as f64, i as f64, false) {
                depth[(i, j)] = hit.depth;
                valid[(i, j)] = true;
            }
            let mut acc = [0.0; 3];
            let mut n = 0;
            for si in 0..ss {
                for sj in 0..ss {
                    let du = (sj as f64 + 0.5) / ss as f64 - 0.5;
                    let dv = (si as f64 + 0.5) / ss as f64 - 0.5;
                    if let Some(hit) = trace(scene, k, pose, j as f64 + du, i as f64 + dv, true) {
                        for c in 0..3 {
                            acc[c] += hit.rgb[c];
                        }
                        n += 1;
                    }
                }
            }
            for c in 0..3 {
                image[(c, i, j)] = if n > 0 { acc[c] / n as f64 } else { 0.0 };
            }
        }
    }
    Rendered {
        image,
        depth: DepthMap { values: depth, valid },
    }
}

pub fn render(scene: &SceneSpec, k: &CameraIntrinsics, pose: &PoseSE3) -> Rendered {
    render_with(scene, k, pose, 2)
}

/// Analytic depth and primitive index along the ray through sub-pixel
/// position `(u, v)`.
pub fn probe(scene: &SceneSpec, k: &CameraIntrinsics, pose: &PoseSE3, u: f64, v: f64) -> Option<(f64, usize)> {
    trace(scene, k, pose, u, v, false).map(|h| (h.depth, h.primitive))
}

/// Depth only, for high-resolution teacher targets.
pub fn render_depth(scene: &SceneSpec, k: &CameraIntrinsics, pose: &PoseSE3) -> DepthMap {
    let (h, w) = (k.height, k.width);
    let mut values = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            if let Some(hit) = trace(scene, k, pose, j as f64, i as f64, false) {
                values[(i, j)] = hit.depth;
                valid[(i, j)] = true;
            }
        }
    }
    DepthMap { values, valid }
}

/// Smooth handheld-like motion down the corridor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub frames: usize,
    pub fps: f64,
    /// Forward (+z) advance per frame, meters.
    pub step: f64,
    pub sway_amplitude: f64,
    pub sway_period: f64,
    pub bob_amplitude: f64,
    pub bob_period: f64,
    pub yaw_amplitude: f64,
    pub yaw_period: f64,
    pub pitch_amplitude: f64,
    pub pitch_period: f64,
}

impl TrajectorySpec {
    pub fn corridor(frames: usize) -> Self {
        TrajectorySpec {
            frames,
            fps: 10.0,
            step: 0.05,
            sway_amplitude: 0.45,
            sway_period: 10.0,
            bob_amplitude: 0.06,
            bob_period: 23.0,
            yaw_amplitude: 0.12,
            yaw_period: 50.0,
            pitch_amplitude: 0.04,
            pitch_period: 31.0,
        }
    }

    pub fn stationary(frames: usize) -> Self {
        TrajectorySpec {
            step: 0.0,
            sway_amplitude: 0.0,
            bob_amplitude: 0.0,
            yaw_amplitude: 0.0,
            pitch_amplitude: 0.0,
            ..Self::corridor(frames)
        }
    }

    pub fn pose(&self, i: usize) -> PoseSE3 {
        let f = i as f64;
        let wave = |amp: f64, period: f64, phase: f64| {
            amp * (std::f64::consts::TAU * f / period + phase).sin()
        };
        PoseSE3::from_euler_yxz(
            wave(self.yaw_amplitude, self.yaw_period, 0.5),
            wave(self.pitch_amplitude, self.pitch_period, 1.0),
            0.0,
            Vector3::new(
                wave(self.sway_amplitude, self.sway_period, 0.0),
                wave(self.bob_amplitude, self.bob_period, 0.3),
                self.step * f,
            ),
        )
    }

    pub fn trajectory(&self) -> Trajectory {
        let entries = (0..self.frames)
            .map(|i| (i as f64 / self.fps, self.pose(i)))
            .collect();
        Trajectory::new(entries).expect("timestamps increase with frame index")
    }
}

/// Resolution of the simulated teacher and the range of its per-frame
/// affine distortion in inverse-depth space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub width: usize,
    pub height: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Shift bound as a fraction of the frame's inverse-depth range.
    pub shift_fraction: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            width: 192,
            height: 128,
            scale_min: 0.3,
            scale_max: 3.0,
            shift_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub intrinsics: CameraIntrinsics,
    pub teacher: TeacherSpec,
    pub supersample: usize,
}

impl SequenceSpec {
    /// Corridor sequence at 64×96 with a 90° horizontal field of view.
    pub fn desk(seed: u64, frames: usize) -> Self {
        SequenceSpec {
            scene: SceneSpec::corridor(seed),
            trajectory: TrajectorySpec::corridor(frames),
            intrinsics: CameraIntrinsics::new(48.0, 48.0, 47.5, 31.5, 96, 64).expect("valid"),
            teacher: TeacherSpec::default(),
            supersample: 2,
        }
    }
}

/// Per-frame affine applied to the teacher's inverse depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherDistortion {
    pub scale: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub teacher_width: usize,
    pub teacher_height: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub invalid_pixels: usize,
    pub distortions: Vec<TeacherDistortion>,
}

/// `max(0, s·(inv + β·range))` on valid pixels, 0 elsewhere.
pub fn distort_teacher(depth: &DepthMap, d: &TeacherDistortion) -> Array2<f64> {
    let inv = depth.values.mapv(|z| if z > 0.0 { 1.0 / z } else { 0.0 });
    let (lo, hi) = inv
        .iter()
        .zip(depth.valid.iter())
        .filter(|(_, v)| **v)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(*x), hi.max(*x)));
    let range = if hi > lo { hi - lo } else { 0.0 };
    let mut out = Array2::zeros(inv.raw_dim());
    for ((o, &x), &v) in out.iter_mut().zip(inv.iter()).zip(depth.valid.iter()) {
        if v {
            *o = (d.scale * (x + d.shift * range)).max(0.0);
        }
    }
    out
}

/// Renders the sequence and writes it in the dataset layout, plus
/// `scene.json` describing the generator inputs.
pub fn generate_sequence(spec: &SequenceSpec, out: &Path) -> Result<SequenceSummary> {
    let k = spec.intrinsics;
    k.validate()?;
    if spec.trajectory.frames == 0 {
        return Err(Error::Config("sequence needs at least one frame".into()));
    }
    let t = &spec.teacher;
    if !(t.scale_min > 0.0 && t.scale_max >= t.scale_min && t.shift_fraction >= 0.0) {
        return Err(Error::Config("invalid teacher distortion range".into()));
    }
    let k_teacher = k.scaled(t.width, t.height)?;
    for dir in [dataio::IMAGES_DIR, dataio::DEPTH_DIR, dataio::TEACHER_DIR] {
        let p = out.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let traj = spec.trajectory.trajectory();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.scene.seed.wrapping_add(0x7ea_c4e5));
    let mut list = String::from("# timestamp path\n");
    let mut summary = SequenceSummary {
        frames: traj.len(),
        width: k.width,
        height: k.height,
        teacher_width: t.width,
        teacher_height: t.height,
        min_depth: f64::INFINITY,
        max_depth: 0.0,
        invalid_pixels: 0,
        distortions: Vec::with_capacity(traj.len()),
    };
    for (i, (ts, pose)) in traj.entries().iter().enumerate() {
        let stem = dataio::frame_stem(i);
        let view = render_with(&spec.scene, &k, pose, spec.supersample);
        let rel = format!("{}/{stem}.png", dataio::IMAGES_DIR);
        raster::save_png(view.image.view(), &out.join(&rel))?;
        list.push_str(&format!("{ts} {rel}\n"));
        for (&z, &v) in view.depth.values.iter().zip(view.depth.valid.iter()) {
            if v {
                summary.min_depth = summary.min_depth.min(z);
                summary.max_depth = summary.max_depth.max(z);
            } else {
                summary.invalid_pixels += 1;
            }
        }
        let gt = view.depth.values.mapv(|z| z as f32);
        mapfile::write_map(&out.join(dataio::DEPTH_DIR).join(format!("{stem}.bin")), MapKind::Depth, &gt)?;

        let hi = render_depth(&spec.scene, &k_teacher, pose);
        let d = TeacherDistortion {
            scale: rng.gen_range(t.scale_min.ln()..=t.scale_max.ln()).exp(),
            shift: rng.gen_range(-t.shift_fraction..=t.shift_fraction),
        };
        let teacher = distort_teacher(&hi, &d).mapv(|x| x as f32);
        mapfile::write_map(
            &out.join(dataio::TEACHER_DIR).join(format!("{stem}.bin")),
            MapKind::InverseDepth,
            &teacher,
        )?;
        summary.distortions.push(d);
    }
    let list_path = out.join(dataio::IMAGE_LIST);
    std::fs::write(&list_path, list).map_err(|e| Error::io(&list_path, e))?;
    traj.write(&out.join(dataio::TRAJECTORY_FILE))?;
    dataio::write_intrinsics(&out.join(dataio::INTRINSICS_FILE), &k)?;
    let scene_path = out.join("scene.json");
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&scene_path, json).map_err(|e| Error::io(&scene_path, e))?;
    Ok(summary)
}
