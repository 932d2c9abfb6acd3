//! Procedural scenes with exact depth, poses and intrinsics.
//!
//! Two surfaces are available: a fronto-parallel plane (closed-form answers) and
//! a tilted height field with Lambertian shading (real depth structure). Both are
//! point-sampled by casting one ray per pixel centre, so depth is exact up to the
//! ray-cast tolerance.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle_to_pose, CameraIntrinsics, DepthMap, Pose};
use crate::imaging::{read_pfm, write_pfm, Image};

/// Depth written for rays that never reach the surface.
pub const FAR_PLANE: f64 = 100.0;
/// Largest tolerated fraction of missed rays per frame.
pub const MAX_MISS_FRACTION: f64 = 0.01;
/// Shortest texture wavelength, in pixels, at the farthest expected depth.
const MIN_WAVELENGTH_PX: f64 = 8.0;
const TEXTURE_COMPONENTS: usize = 6;
const RELIEF_COMPONENTS: usize = 3;
const AMBIENT: f64 = 0.35;
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Plane,
    Terrain,
}

/// Camera-to-world increments between consecutive frames, each
/// `[rx, ry, rz, tx, ty, tz]` (axis-angle, then translation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// One entry per frame transition.
    Deltas(Vec<[f64; 6]>),
    Constant([f64; 6]),
    /// `step + amplitude·sin(2π·k/period)` at transition `k`.
    Sway {
        step: [f64; 6],
        amplitude: [f64; 6],
        period: f64,
    },
}

impl Motion {
    pub fn deltas(&self, n_frames: usize) -> Result<Vec<[f64; 6]>> {
        let n = n_frames.saturating_sub(1);
        match self {
            Motion::Deltas(d) if d.len() == n => Ok(d.clone()),
            Motion::Deltas(d) => {
                Err(Error::Config(format!("motion lists {} deltas but {n_frames} frames need {n}", d.len())))
            }
            Motion::Constant(d) => Ok(vec![*d; n]),
            Motion::Sway { period, .. } if !(*period > 0.0) => {
                Err(Error::Config(format!("sway period must be positive, got {period}")))
            }
            Motion::Sway { step, amplitude, period } => Ok((0..n)
                .map(|k| {
                    let s = (TAU * k as f64 / period).sin();
                    std::array::from_fn(|i| step[i] + amplitude[i] * s)
                })
                .collect()),
        }
    }
}

fn default_jitter() -> f64 {
    0.1
}

fn default_depth() -> f64 {
    2.0
}

fn default_slope() -> f64 {
    1.2
}

fn default_relief() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    /// Defaults to `fx = fy = width` with the principal point at the image centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    pub n_frames: usize,
    pub motion: Motion,
    #[serde(default)]
    pub texture_seed: u64,
    #[serde(default = "default_jitter")]
    pub brightness_jitter: f64,
    /// Plane distance, or the terrain's depth on the optical axis of the first frame.
    #[serde(default = "default_depth")]
    pub depth: f64,
    /// Terrain only: how fast depth grows towards the top of the image.
    #[serde(default = "default_slope")]
    pub slope: f64,
    /// Terrain only: height-field amplitude as a fraction of `depth`.
    #[serde(default = "default_relief")]
    pub relief: f64,
}

impl SceneConfig {
    /// Fronto-parallel plane at `depth` with constant motion.
    pub fn plane(width: usize, height: usize, n_frames: usize, depth: f64, step: [f64; 6]) -> Self {
        Self {
            kind: SceneKind::Plane,
            width,
            height,
            intrinsics: None,
            n_frames,
            motion: Motion::Constant(step),
            texture_seed: 0,
            brightness_jitter: 0.0,
            depth,
            slope: 0.0,
            relief: 0.0,
        }
    }

    /// Tilted height field seen from a mostly sideways-moving camera.
    pub fn terrain(width: usize, height: usize, n_frames: usize, seed: u64) -> Self {
        Self {
            kind: SceneKind::Terrain,
            width,
            height,
            intrinsics: None,
            n_frames,
            motion: Motion::Sway {
                step: [0.0, 0.0, 0.0, 0.08, 0.0, 0.0],
                amplitude: [0.01, 0.015, 0.005, 0.04, 0.02, 0.03],
                period: 23.0,
            },
            texture_seed: seed,
            brightness_jitter: default_jitter(),
            depth: default_depth(),
            slope: default_slope(),
            relief: default_relief(),
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let k = match self.intrinsics {
            Some(k) => k,
            None => CameraIntrinsics {
                fx: self.width as f64,
                fy: self.width as f64,
                cx: (self.width as f64 - 1.0) / 2.0,
                cy: (self.height as f64 - 1.0) / 2.0,
                width: self.width,
                height: self.height,
            },
        };
        k.validate()?;
        if (k.width, k.height) != (self.width, self.height) {
            return Err(Error::Config(format!(
                "intrinsics are for {}x{} but the scene is {}x{}",
                k.width, k.height, self.width, self.height
            )));
        }
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene resolution must be non-zero".into()));
        }
        if self.n_frames < 3 {
            return Err(Error::Config(format!("scene needs at least 3 frames, got {}", self.n_frames)));
        }
        if !(self.brightness_jitter >= 0.0 && self.brightness_jitter < 1.0) {
            return Err(Error::Config(format!("brightness_jitter must be in [0, 1), got {}", self.brightness_jitter)));
        }
        if !(self.depth > 0.0 && self.depth < FAR_PLANE) {
            return Err(Error::Config(format!("scene depth must be in (0, {FAR_PLANE}), got {}", self.depth)));
        }
        if !(self.slope.is_finite() && self.relief >= 0.0 && self.relief < 0.5) {
            return Err(Error::Config(format!(
                "need finite slope and relief in [0, 0.5), got {} and {}",
                self.slope, self.relief
            )));
        }
        self.intrinsics()?;
        self.motion.deltas(self.n_frames)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub frames: Vec<Image>,
    pub depths: Vec<DepthMap>,
    /// Camera-to-world.
    pub poses: Vec<Pose>,
    /// `false` where the ray missed the surface (depth set to [`FAR_PLANE`]).
    pub valid: Vec<Vec<bool>>,
    pub intrinsics: CameraIntrinsics,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Maps points in frame `target`'s camera to frame `source`'s camera.
    pub fn relative_pose(&self, target: usize, source: usize) -> Pose {
        self.poses[source].inverse().compose(&self.poses[target])
    }
}

/// Sum of plane waves.
#[derive(Debug, Clone)]
struct Waves {
    k: Vec<[f64; 2]>,
    amp: Vec<f64>,
    phase: Vec<[f64; 3]>,
}

impl Waves {
    fn random(rng: &mut ChaCha8Rng, n: usize, min_wavelength: f64, max_wavelength: f64, total_amp: f64) -> Self {
        let mut w = Waves { k: vec![], amp: vec![], phase: vec![] };
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let norm: f64 = raw.iter().sum();
        for a in raw {
            let theta = rng.random_range(0.0..TAU);
            // Log-uniform wavelength.
            let lambda = (min_wavelength.ln() + rng.random::<f64>() * (max_wavelength / min_wavelength).ln()).exp();
            let f = TAU / lambda;
            w.k.push([f * theta.cos(), f * theta.sin()]);
            w.amp.push(total_amp * a / norm);
            w.phase.push([rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)]);
        }
        w
    }

    fn value(&self, x: f64, y: f64, channel: usize) -> f64 {
        (0..self.k.len())
            .map(|j| self.amp[j] * (self.k[j][0] * x + self.k[j][1] * y + self.phase[j][channel]).sin())
            .sum()
    }

    /// Value and gradient of channel 0.
    fn value_grad(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for j in 0..self.k.len() {
            let arg = self.k[j][0] * x + self.k[j][1] * y + self.phase[j][0];
            v += self.amp[j] * arg.sin();
            let c = self.amp[j] * arg.cos();
            gx += c * self.k[j][0];
            gy += c * self.k[j][1];
        }
        (v, gx, gy)
    }

    /// Upper bound on the gradient norm.
    fn lipschitz(&self) -> f64 {
        (0..self.k.len()).map(|j| self.amp[j] * self.k[j][0].hypot(self.k[j][1])).sum()
    }
}

/// World surface `z = depth − slope·y + h(x, y)`, textured by `albedo(x, y)`.
struct Surface {
    depth: f64,
    slope: f64,
    relief: Waves,
    albedo: Waves,
    light: Vector3<f64>,
}

impl Surface {
    fn new(cfg: &SceneConfig, k: &CameraIntrinsics) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed);
        // Farthest depth on screen, for sizing texture wavelengths against the pixel grid.
        let half_fov_y = k.cy.max(k.height as f64 - 1.0 - k.cy) / k.fy;
        let far = match cfg.kind {
            SceneKind::Plane => cfg.depth,
            SceneKind::Terrain => cfg.depth * (1.0 + cfg.relief) / (1.0 - cfg.slope.abs() * half_fov_y).max(0.2),
        };
        let min_wl = MIN_WAVELENGTH_PX * far / k.fx.min(k.fy);
        let albedo = Waves::random(&mut rng, TEXTURE_COMPONENTS, min_wl, 6.0 * min_wl, 0.4);
        let (slope, relief) = match cfg.kind {
            SceneKind::Plane => (0.0, Waves { k: vec![], amp: vec![], phase: vec![] }),
            SceneKind::Terrain => {
                let span = cfg.depth * (k.width as f64 / k.fx);
                (cfg.slope, Waves::random(&mut rng, RELIEF_COMPONENTS, 0.6 * span, 2.0 * span, cfg.relief * cfg.depth))
            }
        };
        Self { depth: cfg.depth, slope, relief, albedo, light: Vector3::new(0.4, -0.6, -1.0).normalize() }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        self.depth - self.slope * y + self.relief.value_grad(x, y).0
    }

    /// Signed gap `p.z − surface(p.x, p.y)`; negative in front of the surface.
    fn gap(&self, p: &Vector3<f64>) -> f64 {
        p.z - self.height(p.x, p.y)
    }

    /// Ray parameter of the first hit along `origin + s·dir` (with `dir` scaled so that
    /// `s` is camera depth), or `None` on a miss.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        // Bound on |d gap / ds| so that each step stays short of the first root.
        let lip = ((dir.z + self.slope * dir.y).abs() + self.relief.lipschitz() * dir.x.hypot(dir.y)).max(1e-12);
        let mut s = 0.0;
        let mut f = self.gap(origin);
        if f >= 0.0 {
            return None;
        }
        for _ in 0..4000 {
            if -f < 1e-12 {
                return Some(s);
            }
            s += -f / lip;
            if s > FAR_PLANE {
                return None;
            }
            f = self.gap(&(origin + dir * s));
        }
        // Slow convergence (grazing ray): finish with bisection if bracketed.
        let (mut lo, mut hi) = (s, s + 1e-3);
        if self.gap(&(origin + dir * hi)) < 0.0 {
            return None;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.gap(&(origin + dir * mid)) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Albedo times Lambertian shading normalized so a camera-facing flat patch gets 1.
    fn shade(&self, p: &Vector3<f64>) -> [f64; 3] {
        let (_, hx, hy) = self.relief.value_grad(p.x, p.y);
        // Gradient of z − height(x, y), pointing away from the camera side.
        let n = -Vector3::new(-hx, self.slope - hy, 1.0).normalize();
        let facing = -self.light.z;
        let lambert = (AMBIENT + (1.0 - AMBIENT) * n.dot(&self.light).max(0.0)) / (AMBIENT + (1.0 - AMBIENT) * facing);
        std::array::from_fn(|c| (0.5 + self.albedo.value(p.x, p.y, c)) * lambert)
    }
}

/// Render every frame of the configured scene.
pub fn render_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let surface = Surface::new(cfg, &k);
    let mut poses = vec![Pose::identity()];
    for d in cfg.motion.deltas(cfg.n_frames)? {
        let step = axis_angle_to_pose([d[0], d[1], d[2]], [d[3], d[4], d[5]]);
        poses.push(poses.last().unwrap().compose(&step));
    }
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed);
    jitter_rng.set_stream(1);
    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut depths = Vec::with_capacity(cfg.n_frames);
    let mut valid = Vec::with_capacity(cfg.n_frames);
    for (fi, pose) in poses.iter().enumerate() {
        let gain = if cfg.brightness_jitter > 0.0 {
            jitter_rng.random_range(1.0 - cfg.brightness_jitter..=1.0 + cfg.brightness_jitter)
        } else {
            1.0
        };
        let mut data = vec![0.0; w * h * 3];
        let mut depth = vec![FAR_PLANE; w * h];
        let mut hit = vec![true; w * h];
        for v in 0..h {
            for u in 0..w {
                let ray = k.backproject(u as f64, v as f64);
                let dir = pose.rotation * ray;
                let i = v * w + u;
                let s = match cfg.kind {
                    SceneKind::Plane => {
                        let s = (cfg.depth - pose.translation.z) / dir.z;
                        if !(dir.z > 0.0 && s > 0.0) {
                            return Err(Error::Config(format!(
                                "frame {fi}: camera motion leaves the plane behind the camera"
                            )));
                        }
                        Some(s)
                    }
                    SceneKind::Terrain => surface.intersect(&pose.translation, &dir),
                };
                match s {
                    Some(s) if s < FAR_PLANE => {
                        let p = pose.translation + dir * s;
                        let rgb = match cfg.kind {
                            SceneKind::Plane => std::array::from_fn(|c| 0.5 + surface.albedo.value(p.x, p.y, c)),
                            SceneKind::Terrain => surface.shade(&p),
                        };
                        for c in 0..3 {
                            data[i * 3 + c] = (rgb[c] * gain).clamp(0.0, 1.0);
                        }
                        depth[i] = s;
                    }
                    _ => {
                        hit[i] = false;
                        data[i * 3..i * 3 + 3].fill(0.5);
                    }
                }
            }
        }
        let misses = hit.iter().filter(|&&b| !b).count();
        if misses as f64 > MAX_MISS_FRACTION * (w * h) as f64 {
            return Err(Error::Config(format!(
                "frame {fi}: {misses} of {} rays miss the surface (limit {:.0}%)",
                w * h,
                MAX_MISS_FRACTION * 100.0
            )));
        }
        if misses > 0 {
            warn!("frame {fi}: {misses} rays miss the surface; filled with the far plane");
        }
        frames.push(Image::new(w, h, 3, data)?);
        depths.push(DepthMap::new(w, h, depth)?);
        valid.push(hit);
    }
    Ok(SyntheticScene { config: cfg.clone(), frames, depths, poses, valid, intrinsics: k })
}

pub fn render_plane_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    if cfg.kind != SceneKind::Plane {
        return Err(Error::Config("render_plane_scene needs kind = plane".into()));
    }
    render_scene(cfg)
}

pub fn render_terrain_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    if cfg.kind != SceneKind::Terrain {
        return Err(Error::Config("render_terrain_scene needs kind = terrain".into()));
    }
    render_scene(cfg)
}

/// Index of an exported dataset; paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: SceneConfig,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<String>,
    pub depths: Vec<String>,
    pub poses: String,
    pub intrinsics: String,
}

impl Manifest {
    pub fn files(&self) -> impl Iterator<Item = &String> {
        self.frames.iter().chain(&self.depths).chain([&self.poses, &self.intrinsics])
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

/// Write frames (PNG), depths (PFM), poses, intrinsics and `manifest.json` under `dir`.
pub fn export_dataset(scene: &SyntheticScene, dir: &Path) -> Result<Manifest> {
    for sub in ["frames", "depths"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        config: scene.config.clone(),
        width: scene.intrinsics.width,
        height: scene.intrinsics.height,
        frames: vec![],
        depths: vec![],
        poses: "poses.txt".into(),
        intrinsics: "intrinsics.json".into(),
    };
    for (i, (frame, depth)) in scene.frames.iter().zip(&scene.depths).enumerate() {
        let f = format!("frames/{i:06}.png");
        let d = format!("depths/{i:06}.pfm");
        frame.save_png(&dir.join(&f))?;
        write_pfm(&dir.join(&d), depth.width, depth.height, &depth.values)?;
        manifest.frames.push(f);
        manifest.depths.push(d);
    }
    let poses: String = scene.poses.iter().map(|p| p.to_line() + "\n").collect();
    write_text(&dir.join(&manifest.poses), &poses)?;
    write_text(&dir.join(&manifest.intrinsics), &to_json(&scene.intrinsics))?;
    write_text(&dir.join("manifest.json"), &to_json(&manifest))?;
    Ok(manifest)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = serde_json::from_str(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", m.version)));
    }
    if m.frames.len() != m.depths.len() {
        return Err(Error::format(&path, "frame and depth lists differ in length"));
    }
    Ok(m)
}

/// Reload a dataset written by [`export_dataset`]. Frames come back 8-bit quantized.
pub fn load_dataset(dir: &Path) -> Result<SyntheticScene> {
    let m = read_manifest(dir)?;
    let kpath = dir.join(&m.intrinsics);
    let intrinsics: CameraIntrinsics =
        serde_json::from_str(&read_text(&kpath)?).map_err(|e| Error::format(&kpath, e.to_string()))?;
    let ppath = dir.join(&m.poses);
    let poses = read_text(&ppath)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Pose::from_line(l).map_err(|e| Error::format(&ppath, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if poses.len() != m.frames.len() {
        return Err(Error::format(&ppath, format!("{} poses for {} frames", poses.len(), m.frames.len())));
    }
    let mut frames = Vec::new();
    let mut depths = Vec::new();
    let mut valid = Vec::new();
    for (f, d) in m.frames.iter().zip(&m.depths) {
        let img = Image::load_png(&dir.join(f))?;
        let dpath = dir.join(d);
        let (w, h, values) = read_pfm(&dpath)?;
        if (w, h) != (img.width, img.height) || (w, h) != (intrinsics.width, intrinsics.height) {
            return Err(Error::format(&dpath, "depth, frame and intrinsics sizes disagree"));
        }
        valid.push(values.iter().map(|&v| v < FAR_PLANE).collect());
        depths.push(DepthMap::new(w, h, values).map_err(|e| Error::format(&dpath, e.to_string()))?);
        frames.push(img);
    }
    Ok(SyntheticScene { config: m.config, frames, depths, poses, valid, intrinsics })
}

/// Dataset directory paths for every file a manifest names.
pub fn manifest_paths(dir: &Path, m: &Manifest) -> Vec<PathBuf> {
    m.files().map(|f| dir.join(f)).chain([dir.join("manifest.json")]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{reproject, synthesize_view};
    use crate::imaging::psnr;

    fn shift_scene(step: [f64; 6]) -> SceneConfig {
        SceneConfig {
            intrinsics: Some(CameraIntrinsics::new(100.0, 100.0, 31.5, 31.5, 64, 64).unwrap()),
            ..SceneConfig::plane(64, 64, 3, 2.0, step)
        }
    }

    #[test]
    fn zero_motion_plane_is_static() {
        let s = render_plane_scene(&shift_scene([0.0; 6])).unwrap();
        assert!(s.frames.windows(2).all(|f| f[0] == f[1]));
        assert!(s.depths.iter().all(|d| d.values.iter().all(|&z| (z - 2.0).abs() < 1e-12)));
    }

    #[test]
    fn lateral_plane_motion_shifts_five_pixels() {
        let s = render_plane_scene(&shift_scene([0.0, 0.0, 0.0, 0.1, 0.0, 0.0])).unwrap();
        let (a, b) = (&s.frames[0], &s.frames[1]);
        let mut worst: f64 = 0.0;
        for y in 0..64 {
            for x in 0..59 {
                for c in 0..3 {
                    worst = worst.max((b.at(x, y, c) - a.at(x + 5, y, c)).abs());
                }
            }
        }
        assert!(worst < 0.02, "max intensity difference {worst}");
    }

    #[test]
    fn plane_behind_camera_is_config_error() {
        let err = render_plane_scene(&shift_scene([0.0, 0.0, 0.0, 0.0, 0.0, 1.5])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn brightness_jitter_bounds_mean() {
        let base = render_plane_scene(&shift_scene([0.0; 6])).unwrap();
        let cfg = SceneConfig { brightness_jitter: 0.2, n_frames: 20, ..shift_scene([0.0; 6]) };
        let s = render_plane_scene(&cfg).unwrap();
        let m0 = base.frames[0].mean();
        let ratios: Vec<f64> = s.frames.iter().map(|f| f.mean() / m0).collect();
        assert!(ratios.iter().all(|r| (0.8 - 1e-9..=1.2 + 1e-9).contains(r)), "{ratios:?}");
        assert!(ratios.iter().any(|r| (r - 1.0).abs() > 0.01));
    }

    #[test]
    fn flat_terrain_reduces_to_plane() {
        let plane = render_plane_scene(&SceneConfig::plane(32, 32, 3, 2.0, [0.0, 0.01, 0.0, 0.05, 0.0, 0.02])).unwrap();
        let mut cfg = plane.config.clone();
        cfg.kind = SceneKind::Terrain;
        let terrain = render_terrain_scene(&cfg).unwrap();
        for (a, b) in plane.depths.iter().zip(&terrain.depths) {
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() < 1e-4));
        }
        for (a, b) in plane.frames.iter().zip(&terrain.frames) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-4));
        }
    }

    #[test]
    fn terrain_is_deterministic_and_varied() {
        let cfg = SceneConfig::terrain(32, 32, 4, 7);
        let (a, b) = (render_terrain_scene(&cfg).unwrap(), render_terrain_scene(&cfg).unwrap());
        assert_eq!(a, b);
        let d = &a.depths[0].values;
        let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi / lo > 2.0, "depth range {lo}..{hi}");
        assert!(a.valid.iter().flatten().all(|&v| v));
    }

    /// Warping frame t into frame t+1 with ground truth reproduces it.
    #[test]
    fn ground_truth_warp_is_consistent() {
        let cfg = SceneConfig { brightness_jitter: 0.0, ..SceneConfig::terrain(64, 64, 4, 3) };
        let s = render_terrain_scene(&cfg).unwrap();
        for t in 0..s.len() - 1 {
            let rel = s.relative_pose(t + 1, t);
            let (warped, valid) = synthesize_view(&s.frames[t], &s.depths[t + 1], &s.intrinsics, &rel).unwrap();
            let grid = reproject(&s.depths[t + 1], &s.intrinsics, &rel).unwrap();
            let inside: Vec<bool> = (0..64 * 64)
                .map(|i| {
                    let [x, y] = grid.coords[i];
                    valid[i] && (0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y)
                })
                .collect();
            let p = psnr(&warped, &s.frames[t + 1], Some(&inside));
            assert!(p > 35.0, "pair {t}: PSNR {p:.2} dB");
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = render_terrain_scene(&SceneConfig::terrain(16, 16, 3, 1)).unwrap();
        let m = export_dataset(&s, dir.path()).unwrap();
        for p in manifest_paths(dir.path(), &m) {
            assert!(p.is_file(), "{}", p.display());
        }
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(
            back.depths,
            s.depths
                .iter()
                .map(|d| DepthMap { values: d.values.iter().map(|&v| v as f32 as f64).collect(), ..d.clone() })
                .collect::<Vec<_>>()
        );
        for (a, b) in back.frames.iter().zip(&s.frames) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 1.0 / 255.0));
        }
        assert_eq!(back.poses, s.poses);
        assert_eq!(back.config, s.config);

        let dir2 = tempfile::tempdir().unwrap();
        export_dataset(&render_terrain_scene(&SceneConfig::terrain(16, 16, 3, 1)).unwrap(), dir2.path()).unwrap();
        for d in &m.depths {
            assert_eq!(fs::read(dir.path().join(d)).unwrap(), fs::read(dir2.path().join(d)).unwrap());
        }
    }

    #[test]
    fn motion_validation() {
        let mut cfg = SceneConfig::plane(8, 8, 4, 2.0, [0.0; 6]);
        cfg.motion = Motion::Deltas(vec![[0.0; 6]; 2]);
        assert!(cfg.validate().is_err());
        cfg.motion = Motion::Deltas(vec![[0.0; 6]; 3]);
        assert!(cfg.validate().is_ok());
        cfg.n_frames = 2;
        assert!(cfg.validate().is_err());
    }
}
