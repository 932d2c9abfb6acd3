//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever runs forward passes on constant inputs, so it shares
//! no code with the backward closures it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{pose_params_to_transform, synthesize_view_var, CameraIntrinsics};
use crate::lora::lora_residual;
use crate::losses::{
    edge_aware_smoothness_var, min_reprojection_loss_var, ms_ssim_var, MsSsimConfig, ReprojectionLossConfig, SsimConfig,
};

/// Floor on the denominator of the relative error, so that probes where both
/// gradients vanish compare in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub probes: Vec<Probe>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.probes.extend(other.probes);
        self
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `f` (which must reduce to a scalar) at `inputs`. Only inputs whose index
/// is in `probe_inputs` are probed; the rest are treated as constants.
pub fn check<F>(
    inputs: &[Tensor],
    probe_inputs: &[usize],
    probes: usize,
    step: f64,
    rng: &mut impl Rng,
    f: F,
) -> GradReport
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let analytic: Vec<Option<Tensor>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| if probe_inputs.contains(&i) { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter().map(|v| Some(grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))).collect()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(probes);
    for k in 0..probes {
        let input = probe_inputs[k % probe_inputs.len()];
        let index = rng.random_range(0..inputs[input].numel());
        let orig = inputs[input].data()[index];
        work[input].data_mut()[index] = orig + step;
        let plus = eval(&work);
        work[input].data_mut()[index] = orig - step;
        let minus = eval(&work);
        work[input].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[input].as_ref().map(|t| t.data()[index]).unwrap_or(0.0);
        out.push(Probe { input, index, analytic: a, numeric, rel_err: rel_err(a, numeric) });
    }
    GradReport { probes: out }
}

/// Names accepted by [`check_component`].
pub const COMPONENTS: &[&str] =
    &["ms_ssim", "ssim", "min_reprojection", "sampler", "warp_depth", "warp_pose", "lora", "smoothness"];

/// Probes per component.
pub const COMPONENT_PROBES: usize = 24;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Smooth random image: a few sinusoids plus mild noise, so SSIM statistics are non-degenerate.
fn smooth_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let p: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..6.0)).collect();
    let noise = uniform(&[1, c, h, w], -0.05, 0.05, rng);
    Tensor::from_fn(&[1, c, h, w], |i| {
        let (ch, y, x) = (i[1] as f64, i[2] as f64, i[3] as f64);
        0.5 + 0.2 * (0.31 * x + p[0] + ch).sin()
            + 0.15 * (0.23 * y + p[1] - ch).cos()
            + 0.1 * (0.17 * (x + y) + p[2]).sin()
    })
    .zip_map(&noise, |a, b| a + b)
}

/// Analytic vs. central-difference gradients of one differentiable component,
/// reduced to a scalar by projecting onto fixed random weights.
pub fn check_component(name: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = COMPONENT_PROBES;
    let step = DEFAULT_STEP;
    let k = CameraIntrinsics::new(12.0, 12.0, 7.5, 5.5, 16, 12).expect("intrinsics");
    let report = match name {
        "ms_ssim" => {
            let cfg = MsSsimConfig::default();
            let x = smooth_image(3, 176, 176, &mut rng);
            let y = x.zip_map(&uniform(&[1, 3, 176, 176], -0.1, 0.1, &mut rng), |a, b| a + b);
            check(&[x, y], &[1], n, step, &mut rng, |_, v| ms_ssim_var(v[0], v[1], &cfg).sum())
        }
        "ssim" => {
            let cfg = MsSsimConfig::single_scale(SsimConfig::default());
            let x = smooth_image(3, 24, 24, &mut rng);
            let y = x.zip_map(&uniform(&[1, 3, 24, 24], -0.1, 0.1, &mut rng), |a, b| a + b);
            check(&[x, y], &[0, 1], n, step, &mut rng, |_, v| ms_ssim_var(v[0], v[1], &cfg).sum())
        }
        "min_reprojection" => {
            let ms = MsSsimConfig::default().fitted_to(48, 48)?;
            let cfg = ReprojectionLossConfig::default();
            let t = smooth_image(3, 48, 48, &mut rng);
            let a = t.zip_map(&uniform(&[1, 3, 48, 48], -0.1, 0.1, &mut rng), |p, q| p + q);
            let b = t.zip_map(&uniform(&[1, 3, 48, 48], -0.1, 0.1, &mut rng), |p, q| p + q);
            let mask_a = Tensor::from_fn(&[1, 1, 48, 48], |i| (i[3] < 40) as u8 as f64);
            let mask_b = Tensor::from_fn(&[1, 1, 48, 48], |i| (i[3] > 8) as u8 as f64);
            check(&[t, a, b], &[1, 2], n, step, &mut rng, |_, v| {
                let est = [(v[1], mask_a.clone()), (v[2], mask_b.clone())];
                min_reprojection_loss_var(v[0], &est, &cfg, &ms).0
            })
        }
        "sampler" => {
            let img = uniform(&[2, 3, 10, 12], 0.0, 1.0, &mut rng);
            let coords = Tensor::from_fn(&[2, 7, 9, 2], |i| {
                if i[3] == 0 {
                    rng.random_range(0.1..10.9)
                } else {
                    rng.random_range(0.1..8.9)
                }
            });
            let w = uniform(&[2, 3, 7, 9], -1.0, 1.0, &mut rng);
            check(&[img, coords, w], &[0, 1], n, step, &mut rng, |_, v| (v[0].grid_sample(v[1]) * v[2]).sum())
        }
        "warp_depth" | "warp_pose" => {
            let batch = if name == "warp_pose" { 4 } else { 2 };
            let src = smooth_image(3, 12, 16, &mut rng);
            let src = Tensor::concat(&vec![&src; batch], 0);
            let depth = uniform(&[batch, 1, 12, 16], 2.0, 4.0, &mut rng);
            let params = uniform(&[batch, 6], -3.0, 3.0, &mut rng);
            let w = uniform(&[batch, 3, 12, 16], -1.0, 1.0, &mut rng);
            let probe = if name == "warp_pose" { 2 } else { 1 };
            check(&[src, depth, params, w], &[probe], n, step, &mut rng, |_, v| {
                let (r, t) = pose_params_to_transform(v[2]);
                (synthesize_view_var(v[0], v[1], r, t, &k).0 * v[3]).sum()
            })
        }
        "lora" => {
            let x = uniform(&[5, 10], -1.0, 1.0, &mut rng);
            let w0 = uniform(&[8, 10], -0.3, 0.3, &mut rng);
            let a = uniform(&[3, 10], -0.3, 0.3, &mut rng);
            let b = uniform(&[8, 3], -0.3, 0.3, &mut rng);
            let w = uniform(&[5, 8], -1.0, 1.0, &mut rng);
            check(&[x, w0, a, b, w], &[2, 3], n, step, &mut rng, |_, v| {
                let base = v[0].linear(v[1], None);
                (lora_residual(base, v[0], v[2], v[3], 1.0) * v[4]).sum()
            })
        }
        "smoothness" => {
            let disp = uniform(&[2, 1, 12, 16], 0.05, 0.95, &mut rng);
            let img = uniform(&[2, 3, 12, 16], 0.0, 1.0, &mut rng);
            check(&[disp, img], &[0], n, step, &mut rng, |_, v| edge_aware_smoothness_var(v[0], v[1]))
        }
        other => {
            return Err(Error::Config(format!(
                "unknown gradcheck component {other:?}; valid: {}",
                COMPONENTS.join(", ")
            )));
        }
    };
    Ok(report)
}
