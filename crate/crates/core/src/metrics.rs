//! Depth error metrics and absolute trajectory error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Pose};

pub const DEFAULT_DEPTH_CAP: f64 = 150.0;
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3";

    pub fn to_array(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self { abs_rel: a[0], sq_rel: a[1], rmse: a[2], rmse_log: a[3], delta1: a[4], delta2: a[5], delta3: a[6] }
    }

    pub fn csv_row(&self) -> String {
        self.to_array().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
    }

    /// Element-wise mean.
    pub fn mean(all: &[DepthMetrics]) -> Result<DepthMetrics> {
        if all.is_empty() {
            return Err(Error::Numeric("cannot average an empty metric list".into()));
        }
        let mut acc = [0.0; 7];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.to_array()) {
                *a += v;
            }
        }
        Ok(Self::from_array(acc.map(|v| v / all.len() as f64)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthEvalConfig {
    pub median_scale: bool,
    pub cap: f64,
}

impl Default for DepthEvalConfig {
    fn default() -> Self {
        Self { median_scale: true, cap: DEFAULT_DEPTH_CAP }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Standard monocular depth errors over pixels where `mask` (if any) is true and `gt > 0`.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: Option<&[bool]>,
    cfg: &DepthEvalConfig,
) -> Result<DepthMetrics> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Shape(format!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if !(cfg.cap > MIN_EVAL_DEPTH) {
        return Err(Error::Config(format!("depth cap must exceed {MIN_EVAL_DEPTH}, got {}", cfg.cap)));
    }
    let idx: Vec<usize> = (0..gt.values.len())
        .filter(|&i| mask.is_none_or(|m| m[i]) && gt.values[i] > 0.0 && gt.values[i].is_finite())
        .collect();
    if idx.is_empty() {
        return Err(Error::Numeric("no valid pixels to evaluate".into()));
    }
    let mut p: Vec<f64> = idx.iter().map(|&i| pred.values[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| gt.values[i].clamp(MIN_EVAL_DEPTH, cfg.cap)).collect();
    if cfg.median_scale {
        let ratio = median(&mut g.clone()) / median(&mut p.clone());
        p.iter_mut().for_each(|v| *v *= ratio);
    }
    p.iter_mut().for_each(|v| *v = v.clamp(MIN_EVAL_DEPTH, cfg.cap));

    let n = p.len() as f64;
    let mut m = [0.0; 7];
    for (&p, &g) in p.iter().zip(&g) {
        let d = p - g;
        m[0] += d.abs() / g;
        m[1] += d * d / g;
        m[2] += d * d;
        m[3] += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        for k in 0..3 {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                m[4 + k] += 1.0;
            }
        }
    }
    let m = m.map(|v| v / n);
    Ok(DepthMetrics { rmse: m[2].sqrt(), rmse_log: m[3].sqrt(), ..DepthMetrics::from_array(m) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Rigid,
    #[default]
    Similarity,
}

impl std::str::FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Alignment::None),
            "rigid" => Ok(Alignment::Rigid),
            "similarity" => Ok(Alignment::Similarity),
            _ => Err(Error::Config(format!("unknown alignment {s:?} (expected none, rigid or similarity)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<Vector3<f64>>,
}

impl Trajectory {
    pub fn from_poses(poses: &[Pose]) -> Self {
        Self { positions: poses.iter().map(|p| p.translation).collect() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Least-squares `(s, R, t)` with `s·R·src + t ≈ dst` (Umeyama). Scale is 1 unless `with_scale`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let scale = if with_scale && var_s > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s
    } else {
        1.0
    };
    let t = mu_d - scale * r * mu_s;
    (scale, r, t)
}

/// Position RMSE after optionally aligning `pred` onto `gt`.
pub fn ate(pred: &Trajectory, gt: &Trajectory, align: Alignment) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("trajectories have {} and {} positions", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Shape("trajectories need at least 2 positions".into()));
    }
    let aligned: Vec<Vector3<f64>> = match align {
        Alignment::None => pred.positions.clone(),
        Alignment::Rigid | Alignment::Similarity => {
            let (s, r, t) = umeyama(&pred.positions, &gt.positions, align == Alignment::Similarity);
            pred.positions.iter().map(|p| s * r * p + t).collect()
        }
    };
    let se: f64 = aligned.iter().zip(&gt.positions).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Chain relative motions from the identity: `C₀ = I`, `Cₖ₊₁ = Cₖ·Δₖ`.
pub fn accumulate_trajectory(increments: &[Pose]) -> Trajectory {
    let mut c = Pose::identity();
    let mut positions = vec![c.translation];
    for d in increments {
        c = c.compose(d);
        positions.push(c.translation);
    }
    Trajectory { positions }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    use super::*;
    use crate::geometry::axis_angle_to_pose;

    fn map(w: usize, h: usize, f: impl Fn(usize) -> f64) -> DepthMap {
        DepthMap::new(w, h, (0..w * h).map(f).collect()).unwrap()
    }

    const RAW: DepthEvalConfig = DepthEvalConfig { median_scale: false, cap: DEFAULT_DEPTH_CAP };

    #[test]
    fn identical_depths_are_perfect() {
        let g = map(4, 4, |i| 1.0 + i as f64 * 0.3);
        let m = depth_metrics(&g, &g, None, &DepthEvalConfig::default()).unwrap();
        assert_eq!(m, DepthMetrics { delta1: 1.0, delta2: 1.0, delta3: 1.0, ..Default::default() });
    }

    #[test]
    fn constant_ratio_closed_form() {
        let g = map(4, 4, |i| 1.0 + i as f64 * 0.3);
        let p = map(4, 4, |i| 1.2 * g.values[i]);
        let m = depth_metrics(&p, &g, None, &RAW).unwrap();
        assert_relative_eq!(m.abs_rel, 0.2, epsilon = 1e-12);
        assert_relative_eq!(m.rmse_log, 1.2f64.ln(), epsilon = 1e-12);
        assert_eq!(m.delta1, 1.0);
        let scaled = depth_metrics(&map(4, 4, |i| 3.7 * g.values[i]), &g, None, &DepthEvalConfig::default()).unwrap();
        assert!(scaled.abs_rel < 1e-12 && scaled.rmse < 1e-12);
    }

    #[test]
    fn empty_valid_set_errors() {
        let g = map(2, 2, |_| 1.0);
        assert!(depth_metrics(&g, &g, Some(&[false; 4]), &RAW).is_err());
        assert!(depth_metrics(&map(2, 1, |_| 1.0), &g, None, &RAW).is_err());
    }

    /// Straightforward per-pixel reference.
    fn reference(p: &[f64], g: &[f64], median_scale: bool, cap: f64) -> [f64; 7] {
        let med = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if s.len() % 2 == 1 {
                s[s.len() / 2]
            } else {
                (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
            }
        };
        let g: Vec<f64> = g.iter().map(|v| v.max(1e-3).min(cap)).collect();
        let ratio = if median_scale { med(&g) / med(p) } else { 1.0 };
        let mut out = [0.0; 7];
        let n = p.len() as f64;
        for i in 0..p.len() {
            let pi = (p[i] * ratio).max(1e-3).min(cap);
            out[0] += (pi - g[i]).abs() / g[i] / n;
            out[1] += (pi - g[i]).powi(2) / g[i] / n;
            out[2] += (pi - g[i]).powi(2) / n;
            out[3] += (pi.ln() - g[i].ln()).powi(2) / n;
            let r = if pi > g[i] { pi / g[i] } else { g[i] / pi };
            out[4] += (r < 1.25) as u8 as f64 / n;
            out[5] += (r < 1.5625) as u8 as f64 / n;
            out[6] += (r < 1.953125) as u8 as f64 / n;
        }
        out[2] = out[2].sqrt();
        out[3] = out[3].sqrt();
        out
    }

    proptest! {
        #[test]
        fn matches_reference(p in proptest::collection::vec(0.05f64..200.0, 64), g in proptest::collection::vec(0.05f64..200.0, 64), ms: bool) {
            let cfg = DepthEvalConfig { median_scale: ms, cap: 150.0 };
            let m = depth_metrics(&DepthMap::new(8, 8, p.clone()).unwrap(), &DepthMap::new(8, 8, g.clone()).unwrap(), None, &cfg).unwrap();
            let r = reference(&p, &g, ms, 150.0);
            for (a, b) in m.to_array().iter().zip(r) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        }

        #[test]
        fn median_scaling_invariance(p in proptest::collection::vec(0.05f64..100.0, 64), g in proptest::collection::vec(0.05f64..100.0, 64), k in 0u32..8) {
            let s = 2f64.powi(k as i32 - 4);
            let cfg = DepthEvalConfig::default();
            let gt = DepthMap::new(8, 8, g).unwrap();
            let a = depth_metrics(&DepthMap::new(8, 8, p.clone()).unwrap(), &gt, None, &cfg).unwrap();
            let b = depth_metrics(&DepthMap::new(8, 8, p.iter().map(|v| v * s).collect()).unwrap(), &gt, None, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn rigid_ate_is_rigid_invariant(
            pts in proptest::collection::vec(proptest::array::uniform3(-5.0f64..5.0), 4..12),
            aa in proptest::array::uniform3(-2.0f64..2.0),
            t in proptest::array::uniform3(-10.0f64..10.0),
        ) {
            let gt = Trajectory { positions: pts.iter().map(|p| Vector3::from(*p)).collect() };
            let pred = Trajectory { positions: gt.positions.iter().map(|p| p + Vector3::new(0.1 * p.y, -0.05 * p.x, 0.2)).collect() };
            let tf = axis_angle_to_pose(aa, t);
            let moved = Trajectory { positions: pred.positions.iter().map(|p| tf.transform_point(p)).collect() };
            let (a, b) = (ate(&pred, &gt, Alignment::Rigid).unwrap(), ate(&moved, &gt, Alignment::Rigid).unwrap());
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn ate_examples() {
        let gt = Trajectory {
            positions: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 2.0, 0.5)],
        };
        assert_eq!(ate(&gt, &gt, Alignment::None).unwrap(), 0.0);
        let offset = Trajectory { positions: gt.positions.iter().map(|p| p + Vector3::new(3.0, -1.0, 2.0)).collect() };
        assert!(ate(&offset, &gt, Alignment::Rigid).unwrap() < 1e-12);
        assert_relative_eq!(ate(&offset, &gt, Alignment::None).unwrap(), 14f64.sqrt(), epsilon = 1e-12);
        let doubled = Trajectory { positions: gt.positions.iter().map(|p| 2.0 * p).collect() };
        assert!(ate(&doubled, &gt, Alignment::Similarity).unwrap() < 1e-12);
        assert!(ate(&doubled, &gt, Alignment::Rigid).unwrap() > 0.1);
        let short = Trajectory { positions: gt.positions[..2].to_vec() };
        assert!(ate(&short, &gt, Alignment::None).is_err());
    }

    #[test]
    fn umeyama_recovers_similarity() {
        let src: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.3, 0.1, 1.0]]
            .iter()
            .map(|p| Vector3::from(*p))
            .collect();
        let r = Rotation3::from_scaled_axis(Vector3::new(0.3, -0.2, 0.9)).into_inner();
        let t = Vector3::new(1.0, 2.0, -3.0);
        let dst: Vec<_> = src.iter().map(|p| 0.7 * r * p + t).collect();
        let (s, r2, t2) = umeyama(&src, &dst, true);
        assert_relative_eq!(s, 0.7, epsilon = 1e-10);
        assert!((r2 - r).abs().max() < 1e-10);
        assert!((t2 - t).abs().max() < 1e-10);
    }

    #[test]
    fn accumulation_examples() {
        assert!(accumulate_trajectory(&[Pose::identity(); 4]).positions.iter().all(|p| p.norm() == 0.0));
        let step = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let tr = accumulate_trajectory(&[step; 5]);
        for (i, p) in tr.positions.iter().enumerate() {
            assert_eq!(*p, Vector3::new(i as f64, 0.0, 0.0));
        }
        let t = axis_angle_to_pose([0.2, -0.4, 0.1], [0.5, 1.0, -2.0]);
        let back = accumulate_trajectory(&[t, t.inverse(), t, t.inverse()]);
        assert!(back.positions.last().unwrap().norm() < 1e-9);
    }
}
