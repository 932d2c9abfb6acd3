//! Pinhole camera, rigid poses and differentiable view synthesis.
//!
//! Pixel coordinates put pixel centres on integers, so a `W×H` image spans
//! `[0, W-1] × [0, H-1]`. Camera axes follow the usual vision convention:
//! `x` right, `y` down, `z` forward.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Minimum depth of a transformed point for its projection to count as valid.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-6;

/// Network pose outputs are multiplied by this before conversion to a transform.
pub const POSE_OUTPUT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Ray through pixel `(u, v)` with unit `z`.
    pub fn backproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("not a rigid transform (|RᵀR - I| = {ortho:e}, det = {det})")));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Twelve numbers, row-major `[R | t]`, space separated.
    pub fn to_line(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let vals = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ];
        vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    }

    pub fn from_line(line: &str) -> Result<Pose> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad pose value {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(Error::Config(format!("pose line needs 12 values, got {}", vals.len())));
        }
        let rotation = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
        Pose::new(rotation, Vector3::new(vals[3], vals[7], vals[11]))
    }

    /// Axis-angle and translation packed as six numbers.
    pub fn to_vector(&self) -> [f64; 6] {
        let aa = nalgebra::Rotation3::from_matrix_unchecked(self.rotation).scaled_axis();
        [aa.x, aa.y, aa.z, self.translation.x, self.translation.y, self.translation.z]
    }
}

/// Rodrigues coefficients `sinθ/θ` and `(1-cosθ)/θ²`, series-expanded near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// Derivatives of the Rodrigues coefficients divided by θ.
fn rodrigues_coeff_derivs(theta: f64) -> (f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (-1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta * theta * theta;
        ((theta * c - s) / t3, (theta * s - 2.0 * (1.0 - c)) / (t3 * theta))
    }
}

fn skew(w: &[f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rodrigues(w: &[f64; 3]) -> [[f64; 3]; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b) = rodrigues_coeffs(theta);
    let s = skew(w);
    let s2 = mat3_mul(&s, &s);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * s[i][j] + b * s2[i][j];
        }
    }
    r
}

/// Rotation by `aa` (axis times angle in radians) followed by translation `t`.
pub fn axis_angle_to_pose(aa: [f64; 3], t: [f64; 3]) -> Pose {
    let r = rodrigues(&aa);
    Pose { rotation: Matrix3::from_fn(|i, j| r[i][j]), translation: Vector3::from(t) }
}

/// Differentiable Rodrigues map, `(N, 3) -> (N, 3, 3)`.
pub fn axis_angle_to_matrix<'g>(aa: Var<'g>) -> Var<'g> {
    let v = aa.value();
    assert!(v.ndim() == 2 && v.shape()[1] == 3, "axis-angle must be (N, 3), got {:?}", v.shape());
    let n = v.shape()[0];
    let mut out = Vec::with_capacity(n * 9);
    for w in v.data().chunks(3) {
        let r = rodrigues(&[w[0], w[1], w[2]]);
        out.extend(r.iter().flatten());
    }
    aa.graph().custom(
        Tensor::new(&[n, 3, 3], out).expect("shape"),
        &[aa],
        Box::new(move |ctx| {
            let mut gw = vec![0.0; n * 3];
            for (b, w) in ctx.inputs[0].data().chunks(3).enumerate() {
                let w = [w[0], w[1], w[2]];
                let g = &ctx.grad.data()[b * 9..(b + 1) * 9];
                let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
                let (a, bb) = rodrigues_coeffs(theta);
                let (da, db) = rodrigues_coeff_derivs(theta);
                let s = skew(&w);
                let s2 = mat3_mul(&s, &s);
                for k in 0..3 {
                    let mut e = [0.0; 3];
                    e[k] = 1.0;
                    let ek = skew(&e);
                    let eks = mat3_mul(&ek, &s);
                    let sek = mat3_mul(&s, &ek);
                    let mut acc = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            let d = da * w[k] * s[i][j]
                                + a * ek[i][j]
                                + db * w[k] * s2[i][j]
                                + bb * (eks[i][j] + sek[i][j]);
                            acc += g[i * 3 + j] * d;
                        }
                    }
                    gw[b * 3 + k] = acc;
                }
            }
            vec![Some(Tensor::new(&[n, 3], gw).expect("shape"))]
        }),
    )
}

/// Split raw pose-network outputs `(N, 6)` into rotation `(N,3,3)` and translation `(N,3)`
/// after applying [`POSE_OUTPUT_SCALE`].
pub fn pose_params_to_transform<'g>(params: Var<'g>) -> (Var<'g>, Var<'g>) {
    let scaled = params.mul_scalar(POSE_OUTPUT_SCALE);
    let rot = axis_angle_to_matrix(scaled.narrow(1, 0, 3));
    (rot, scaled.narrow(1, 3, 3))
}

/// Per-pixel projections of a target view into a source view.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major `(x, y)` source coordinates for every target pixel.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl PixelGrid {
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.coords[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.coords.iter().flat_map(|c| c.iter().copied()).collect();
        Tensor::new(&[1, self.height, self.width, 2], data).expect("grid shape")
    }
}

/// Strictly positive per-pixel depth, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!("depth values must be finite and positive, found {bad}")));
        }
        Ok(Self { width, height, values })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self { width, height, values: vec![depth; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.values.clone()).expect("depth shape")
    }
}

/// Differentiable reprojection of every target pixel into the source view.
///
/// `depth: (N,1,H,W)`, `rotation: (N,3,3)`, `translation: (N,3)` map target-camera
/// points to source-camera points. Returns source coordinates `(N,H,W,2)` and a
/// constant validity mask `(N,1,H,W)` holding 1 for valid pixels. Pixels whose
/// transformed depth is at most [`MIN_PROJECTED_DEPTH`] keep their own coordinates,
/// are masked, and pass no gradient.
pub fn reproject_var<'g>(
    depth: Var<'g>,
    rotation: Var<'g>,
    translation: Var<'g>,
    k: &CameraIntrinsics,
) -> (Var<'g>, Tensor) {
    let dv = depth.value();
    let (rv, tv) = (rotation.value(), translation.value());
    let s = dv.shape();
    assert!(s.len() == 4 && s[1] == 1, "depth must be (N,1,H,W), got {:?}", s);
    let (n, h, w) = (s[0], s[2], s[3]);
    assert_eq!(rv.shape(), &[n, 3, 3], "rotation shape");
    assert_eq!(tv.shape(), &[n, 3], "translation shape");
    let k = *k;
    let mut coords = vec![0.0; n * h * w * 2];
    let mut mask = vec![0.0; n * h * w];
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    for b in 0..n {
        let r = &rv.data()[b * 9..(b + 1) * 9];
        let t = &tv.data()[b * 3..(b + 1) * 3];
        for y in 0..h {
            for x in 0..w {
                let i = (b * h + y) * w + x;
                let d = dv.data()[i];
                let ray = k.backproject(x as f64, y as f64);
                let c = [d * ray.x, d * ray.y, d * ray.z];
                let p: Vec<f64> = (0..3)
                    .map(|row| r[row * 3] * c[0] + r[row * 3 + 1] * c[1] + r[row * 3 + 2] * c[2] + t[row])
                    .collect();
                if p[2] <= MIN_PROJECTED_DEPTH || !p[2].is_finite() {
                    coords[i * 2] = x as f64;
                    coords[i * 2 + 1] = y as f64;
                    continue;
                }
                let u = k.fx * p[0] / p[2] + k.cx;
                let v = k.fy * p[1] / p[2] + k.cy;
                coords[i * 2] = u;
                coords[i * 2 + 1] = v;
                if (0.0..=xmax).contains(&u) && (0.0..=ymax).contains(&v) {
                    mask[i] = 1.0;
                }
            }
        }
    }
    let mask = Tensor::new(&[n, 1, h, w], mask).expect("mask shape");
    let out = depth.graph().custom(
        Tensor::new(&[n, h, w, 2], coords).expect("coord shape"),
        &[depth, rotation, translation],
        Box::new(move |ctx| {
            let (dv, rv, tv) = (&ctx.inputs[0], &ctx.inputs[1], &ctx.inputs[2]);
            let g = ctx.grad.data();
            let mut gd = vec![0.0; n * h * w];
            let mut gr = vec![0.0; n * 9];
            let mut gt = vec![0.0; n * 3];
            for b in 0..n {
                let r = &rv.data()[b * 9..(b + 1) * 9];
                let t = &tv.data()[b * 3..(b + 1) * 3];
                for y in 0..h {
                    for x in 0..w {
                        let i = (b * h + y) * w + x;
                        let d = dv.data()[i];
                        let ray = k.backproject(x as f64, y as f64);
                        let ray = [ray.x, ray.y, ray.z];
                        let c = [d * ray[0], d * ray[1], d * ray[2]];
                        let p: Vec<f64> = (0..3)
                            .map(|row| r[row * 3] * c[0] + r[row * 3 + 1] * c[1] + r[row * 3 + 2] * c[2] + t[row])
                            .collect();
                        if p[2] <= MIN_PROJECTED_DEPTH || !p[2].is_finite() {
                            continue;
                        }
                        let (gu, gv) = (g[i * 2], g[i * 2 + 1]);
                        let iz = 1.0 / p[2];
                        let gp = [gu * k.fx * iz, gv * k.fy * iz, -(gu * k.fx * p[0] + gv * k.fy * p[1]) * iz * iz];
                        let mut gdepth = 0.0;
                        for row in 0..3 {
                            for col in 0..3 {
                                gdepth += gp[row] * r[row * 3 + col] * ray[col];
                                gr[b * 9 + row * 3 + col] += gp[row] * c[col];
                            }
                            gt[b * 3 + row] += gp[row];
                        }
                        gd[i] = gdepth;
                    }
                }
            }
            vec![
                Some(Tensor::new(&[n, 1, h, w], gd).expect("shape")),
                Some(Tensor::new(&[n, 3, 3], gr).expect("shape")),
                Some(Tensor::new(&[n, 3], gt).expect("shape")),
            ]
        }),
    );
    (out, mask)
}

/// Warp `source: (N,C,H,W)` into the target view; returns the estimate and validity mask.
pub fn synthesize_view_var<'g>(
    source: Var<'g>,
    depth: Var<'g>,
    rotation: Var<'g>,
    translation: Var<'g>,
    k: &CameraIntrinsics,
) -> (Var<'g>, Tensor) {
    let (coords, mask) = reproject_var(depth, rotation, translation, k);
    (source.grid_sample(coords), mask)
}

fn pose_vars<'g>(g: &'g Graph, pose: &Pose) -> (Var<'g>, Var<'g>) {
    let r = Tensor::new(&[1, 3, 3], pose.rotation.transpose().as_slice().to_vec()).expect("rotation");
    let t = Tensor::new(&[1, 3], pose.translation.as_slice().to_vec()).expect("translation");
    (g.constant(r), g.constant(t))
}

fn check_depth(depth: &DepthMap, k: &CameraIntrinsics) -> Result<()> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::Shape(format!(
            "depth {}x{} does not match intrinsics {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    if let Some(bad) = depth.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Config(format!("depth must be strictly positive, found {bad}")));
    }
    Ok(())
}

/// Where each target pixel lands in the source view under `target_to_source`.
pub fn reproject(depth: &DepthMap, k: &CameraIntrinsics, target_to_source: &Pose) -> Result<PixelGrid> {
    check_depth(depth, k)?;
    let g = Graph::new();
    let (r, t) = pose_vars(&g, target_to_source);
    let (coords, mask) = reproject_var(g.constant(depth.to_tensor()), r, t, k);
    let c = coords.value();
    Ok(PixelGrid {
        width: depth.width,
        height: depth.height,
        coords: c.data().chunks(2).map(|p| [p[0], p[1]]).collect(),
        valid: mask.data().iter().map(|&m| m > 0.5).collect(),
    })
}

/// Bilinear lookup of `source` at `grid` with clamp-to-edge borders.
pub fn bilinear_sample(source: &Image, grid: &PixelGrid) -> Result<Image> {
    let g = Graph::new();
    let src = g.constant(source.to_tensor());
    let out = src.grid_sample(g.constant(grid.to_tensor())).value();
    Image::from_tensor(&out, 0)
}

/// Reconstruct the target view from `source`, the target depth and the relative pose.
pub fn synthesize_view(
    source: &Image,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    target_to_source: &Pose,
) -> Result<(Image, Vec<bool>)> {
    if source.width != k.width || source.height != k.height {
        return Err(Error::Shape(format!(
            "source image {}x{} does not match intrinsics {}x{}",
            source.width, source.height, k.width, k.height
        )));
    }
    let grid = reproject(depth, k, target_to_source)?;
    let warped = bilinear_sample(source, &grid)?;
    Ok((warped, grid.valid))
}
