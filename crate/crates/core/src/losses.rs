//! Structural similarity, its multi-scale form, the multi-scale reprojection loss,
//! edge-aware smoothness, and assembly of the full self-supervised objective.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{synthesize_view_var, CameraIntrinsics};
use crate::imaging::Image;
use crate::model::disparity_to_depth_var;

/// Canonical five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Floor applied to per-scale similarity means before exponentiation.
const MS_SSIM_FLOOR: f64 = 1e-6;

/// Guard added to the mean disparity before normalization.
const SMOOTHNESS_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("ssim.window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("ssim.k1 and ssim.k2 must be positive".into()));
        }
        if !(self.dynamic_range > 0.0) {
            return Err(Error::Config("ssim.dynamic_range must be positive".into()));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsSsimConfig {
    pub scales: usize,
    /// One exponent per scale, finest first; the last also weights luminance.
    pub weights: Vec<f64>,
    pub ssim: SsimConfig,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self { scales: 5, weights: MS_SSIM_WEIGHTS.to_vec(), ssim: SsimConfig::default() }
    }
}

impl MsSsimConfig {
    pub fn single_scale(ssim: SsimConfig) -> Self {
        Self { scales: 1, weights: vec![1.0], ssim }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        if self.scales == 0 {
            return Err(Error::Config("ms_ssim.scales must be >= 1".into()));
        }
        if self.weights.len() != self.scales {
            return Err(Error::Config(format!(
                "ms_ssim.weights has {} entries for {} scales",
                self.weights.len(),
                self.scales
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-3 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(format!("ms_ssim.weights must be non-negative and sum to 1, sum is {sum}")));
        }
        Ok(())
    }

    /// Largest scale count whose coarsest level (repeated floor halving) still fits the window.
    pub fn max_feasible_scales(&self, height: usize, width: usize) -> usize {
        let mut m = 0;
        let (mut h, mut w) = (height, width);
        while h.min(w) >= self.ssim.window {
            m += 1;
            h /= 2;
            w /= 2;
        }
        m
    }

    pub fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        let max = self.max_feasible_scales(height, width);
        if self.scales > max {
            return Err(Error::Config(format!(
                "{}x{} image supports at most {max} MS-SSIM scales with window {}, {} requested",
                width, height, self.ssim.window, self.scales
            )));
        }
        Ok(())
    }

    /// This configuration reduced to the scales an image of the given size supports,
    /// with the leading weights renormalized to sum to one.
    pub fn fitted_to(&self, height: usize, width: usize) -> Result<MsSsimConfig> {
        let max = self.max_feasible_scales(height, width);
        if max == 0 {
            return Err(Error::Config(format!(
                "{width}x{height} image is smaller than the SSIM window {}",
                self.ssim.window
            )));
        }
        if self.scales <= max {
            return Ok(self.clone());
        }
        warn!("MS-SSIM reduced from {} to {max} scales for {width}x{height} input", self.scales);
        let head = &self.weights[..max];
        let sum: f64 = head.iter().sum();
        Ok(MsSsimConfig { scales: max, weights: head.iter().map(|w| w / sum).collect(), ssim: self.ssim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprojectionLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub smoothness_weight: f64,
    pub per_pixel_min: bool,
}

impl Default for ReprojectionLossConfig {
    fn default() -> Self {
        Self { alpha: 0.9, beta: 0.1, smoothness_weight: 1e-3, per_pixel_min: true }
    }
}

impl ReprojectionLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("loss.alpha and loss.beta must be non-negative".into()));
        }
        if !(self.smoothness_weight >= 0.0) {
            return Err(Error::Config("loss.smoothness_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Luminance and contrast-structure maps, each `(N, C, H-w+1, W-w+1)`.
pub fn ssim_components<'g>(x: Var<'g>, y: Var<'g>, cfg: &SsimConfig) -> (Var<'g>, Var<'g>) {
    let w = cfg.window;
    let mu_x = x.box_filter(w);
    let mu_y = y.box_filter(w);
    let mu_xx = mu_x * mu_x;
    let mu_yy = mu_y * mu_y;
    let mu_xy = mu_x * mu_y;
    let s_xx = (x * x).box_filter(w) - mu_xx;
    let s_yy = (y * y).box_filter(w) - mu_yy;
    let s_xy = (x * y).box_filter(w) - mu_xy;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let l = (mu_xy * 2.0 + c1) / (mu_xx + mu_yy + c1);
    let cs = (s_xy * 2.0 + c2) / (s_xx + s_yy + c2);
    (l, cs)
}

/// Mean over every axis but the first: `(N, ...) -> (N)`.
fn per_sample_mean<'g>(v: Var<'g>) -> Var<'g> {
    let s = v.shape();
    let n = s[0];
    v.reshape(&[n, s[1..].iter().product()]).mean_axis(1, false)
}

/// Per-sample MS-SSIM of `(N, C, H, W)` batches, shape `(N)`.
pub fn ms_ssim_var<'g>(x: Var<'g>, y: Var<'g>, cfg: &MsSsimConfig) -> Var<'g> {
    let (mut x, mut y) = (x, y);
    let mut acc: Option<Var<'g>> = None;
    for j in 0..cfg.scales {
        let (l, cs) = ssim_components(x, y, &cfg.ssim);
        let wj = cfg.weights[j];
        let term = if j + 1 == cfg.scales {
            per_sample_mean(l * cs).clamp_min(MS_SSIM_FLOOR).powf(wj)
        } else {
            per_sample_mean(cs).clamp_min(MS_SSIM_FLOOR).powf(wj)
        };
        acc = Some(match acc {
            Some(a) => a * term,
            None => term,
        });
        if j + 1 < cfg.scales {
            x = x.avg_pool2();
            y = y.avg_pool2();
        }
    }
    acc.expect("at least one scale")
}

fn image_pair(x: &Image, y: &Image) -> Result<(Tensor, Tensor)> {
    if (x.width, x.height, x.channels) != (y.width, y.height, y.channels) {
        return Err(Error::Shape(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            x.width, x.height, x.channels, y.width, y.height, y.channels
        )));
    }
    Ok((x.to_tensor(), y.to_tensor()))
}

/// Single-scale SSIM: mean value and the per-pixel map (one channel per image channel,
/// `(W-w+1) × (H-w+1)` valid-window positions).
pub fn ssim(x: &Image, y: &Image, cfg: &SsimConfig) -> Result<(f64, Image)> {
    cfg.validate()?;
    let (xt, yt) = image_pair(x, y)?;
    if x.width < cfg.window || x.height < cfg.window {
        return Err(Error::Shape(format!("{}x{} image is smaller than window {}", x.width, x.height, cfg.window)));
    }
    let g = Graph::new();
    let (l, cs) = ssim_components(g.constant(xt), g.constant(yt), cfg);
    let map = (l * cs).value();
    let mean = map.mean();
    Ok((mean, Image::from_tensor(&map, 0)?))
}

/// Multi-scale SSIM between two images. Fails when the image cannot hold every scale.
pub fn ms_ssim(x: &Image, y: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    cfg.validate()?;
    let (xt, yt) = image_pair(x, y)?;
    cfg.check_fits(x.height, x.width)?;
    let g = Graph::new();
    Ok(ms_ssim_var(g.constant(xt), g.constant(yt), cfg).item())
}

/// Multi-scale reprojection loss of a batch, `alpha·(1 - MS-SSIM) + beta·L1`, with the L1
/// term averaged over valid pixels. Returns the loss and whether the mask was empty (in
/// which case the loss is a constant zero).
pub fn ms_reprojection_loss_var<'g>(
    target: Var<'g>,
    estimate: Var<'g>,
    mask: &Tensor,
    cfg: &ReprojectionLossConfig,
    ms: &MsSsimConfig,
) -> (Var<'g>, bool) {
    let g = target.graph();
    let s = target.shape();
    assert_eq!(s, estimate.shape(), "target/estimate shape mismatch");
    assert_eq!(mask.shape(), &[s[0], 1, s[2], s[3]], "mask shape");
    let valid = mask.sum();
    if valid == 0.0 {
        return (g.scalar(0.0), true);
    }
    let ssim_term = (ms_ssim_var(target, estimate, ms).mean() * -1.0 + 1.0) * cfg.alpha;
    let diff = (target - estimate).abs() * g.constant(mask.clone());
    let l1 = diff.sum() * (1.0 / (valid * s[1] as f64));
    (ssim_term + l1 * cfg.beta, false)
}

/// Convenience wrapper over images; `mask` is row-major per pixel.
pub fn ms_reprojection_loss(
    target: &Image,
    estimate: &Image,
    mask: &[bool],
    cfg: &ReprojectionLossConfig,
    ms: &MsSsimConfig,
) -> Result<(f64, bool)> {
    cfg.validate()?;
    ms.validate()?;
    let (t, e) = image_pair(target, estimate)?;
    if mask.len() != target.width * target.height {
        return Err(Error::Shape("mask length does not match image".into()));
    }
    ms.check_fits(target.height, target.width)?;
    let m = Tensor::new(&[1, 1, target.height, target.width], mask.iter().map(|&v| v as u8 as f64).collect())?;
    let g = Graph::new();
    let (loss, empty) = ms_reprojection_loss_var(g.constant(t), g.constant(e), &m, cfg, ms);
    Ok((loss.item(), empty))
}

/// Edge-aware smoothness of `disparity: (N,1,H,W)` guided by `image: (N,C,H,W)`, using
/// disparity normalized by its per-sample mean.
pub fn edge_aware_smoothness_var<'g>(disparity: Var<'g>, image: Var<'g>) -> Var<'g> {
    let s = disparity.shape();
    assert_eq!(s[1], 1, "disparity must have one channel");
    let (h, w) = (s[2], s[3]);
    let mean = disparity.mean_axis(3, true).mean_axis(2, true) + SMOOTHNESS_EPS;
    let d = disparity / mean;
    let dx = (d.narrow(3, 0, w - 1) - d.narrow(3, 1, w - 1)).abs();
    let dy = (d.narrow(2, 0, h - 1) - d.narrow(2, 1, h - 1)).abs();
    let ix = (image.narrow(3, 0, w - 1) - image.narrow(3, 1, w - 1)).abs().mean_axis(1, true);
    let iy = (image.narrow(2, 0, h - 1) - image.narrow(2, 1, h - 1)).abs().mean_axis(1, true);
    (dx * (-ix).exp()).mean() + (dy * (-iy).exp()).mean()
}

pub fn edge_aware_smoothness(disparity: &Image, image: &Image) -> Result<f64> {
    if disparity.channels != 1 || (disparity.width, disparity.height) != (image.width, image.height) {
        return Err(Error::Shape("disparity must be single-channel and match the image size".into()));
    }
    let g = Graph::new();
    Ok(edge_aware_smoothness_var(g.constant(disparity.to_tensor()), g.constant(image.to_tensor())).item())
}

/// Full self-supervised objective configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub reprojection: ReprojectionLossConfig,
    pub ms_ssim: MsSsimConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.reprojection.validate()?;
        self.ms_ssim.validate()
    }
}

/// Everything the objective needs from one batch.
pub struct SslBatch<'g> {
    /// Centre frames `(N, C, H, W)`.
    pub target: Var<'g>,
    /// Neighbouring frames, each `(N, C, H, W)`.
    pub sources: Vec<Var<'g>>,
    /// Target-to-source rotation `(N,3,3)` and translation `(N,3)`, one per source.
    pub poses: Vec<(Var<'g>, Var<'g>)>,
    /// Disparity pyramid, finest first, scale `i` at `(N, 1, H/2^i, W/2^i)`.
    pub disparities: Vec<Var<'g>>,
    pub intrinsics: CameraIntrinsics,
    pub min_depth: f64,
    pub max_depth: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ms_reproj: f64,
    pub smoothness: f64,
    /// True when some scale had no valid reprojected pixel.
    pub empty_mask: bool,
}

/// Per-pixel MS-SSIM `(N, 1, H, W)`: each scale's channel-averaged similarity map is floored,
/// raised to its weight and resized back to the input grid before the product over scales.
pub fn ms_ssim_map_var<'g>(x: Var<'g>, y: Var<'g>, cfg: &MsSsimConfig) -> Var<'g> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (mut x, mut y) = (x, y);
    let mut acc: Option<Var<'g>> = None;
    for j in 0..cfg.scales {
        let (l, cs) = ssim_components(x, y, &cfg.ssim);
        let sim = if j + 1 == cfg.scales { l * cs } else { cs };
        let term = sim.mean_axis(1, true).clamp_min(MS_SSIM_FLOOR).powf(cfg.weights[j]).resize_bilinear(h, w);
        acc = Some(match acc {
            Some(a) => a * term,
            None => term,
        });
        if j + 1 < cfg.scales {
            x = x.avg_pool2();
            y = y.avg_pool2();
        }
    }
    acc.expect("at least one scale")
}

/// Per-pixel reprojection error `alpha·(1 - MS-SSIM map) + beta·mean_c |target - estimate|`.
pub fn reprojection_error_map<'g>(
    target: Var<'g>,
    estimate: Var<'g>,
    cfg: &ReprojectionLossConfig,
    ms: &MsSsimConfig,
) -> Var<'g> {
    let ssim = (ms_ssim_map_var(target, estimate, ms) * -1.0 + 1.0) * cfg.alpha;
    let l1 = (target - estimate).abs().mean_axis(1, true) * cfg.beta;
    ssim + l1
}

/// Per pixel, the smallest error over sources, averaged over all pixels. Validity masks do
/// not enter: an out-of-view sample reads the clamped border and loses to a source that sees
/// the point, which keeps the loss continuous in depth and pose. The flag reports pixels
/// that no source sees at all.
pub fn min_reprojection_loss_var<'g>(
    target: Var<'g>,
    estimates: &[(Var<'g>, Tensor)],
    cfg: &ReprojectionLossConfig,
    ms: &MsSsimConfig,
) -> (Var<'g>, bool) {
    let g = target.graph();
    let errors: Vec<Var<'g>> = estimates.iter().map(|(e, _)| reprojection_error_map(target, *e, cfg, ms)).collect();
    let values: Vec<_> = errors.iter().map(|e| e.value()).collect();
    let shape = values[0].shape().to_vec();
    let len = values[0].numel();
    // Ties go to the earlier source.
    let best: Vec<usize> = (0..len)
        .map(|i| (1..errors.len()).fold(0, |b, si| if values[si].data()[i] < values[b].data()[i] { si } else { b }))
        .collect();
    let unseen = (0..len).any(|i| estimates.iter().all(|(_, m)| m.data()[i] <= 0.5));
    let mut picked: Option<Var<'g>> = None;
    for (si, e) in errors.iter().enumerate() {
        let sel = Tensor::new(&shape, best.iter().map(|&b| (b == si) as u8 as f64).collect()).expect("selection");
        let part = *e * g.constant(sel);
        picked = Some(match picked {
            Some(acc) => acc + part,
            None => part,
        });
    }
    (picked.expect("at least one source").mean(), unseen)
}

/// The self-supervised loss over every pyramid scale: each disparity is upsampled to the
/// input resolution, converted to depth and used to warp every source frame into the target
/// view; the multi-scale reprojection loss plus weighted edge-aware smoothness is averaged
/// over scales.
pub fn total_ssl_loss<'g>(batch: &SslBatch<'g>, cfg: &LossConfig) -> Result<(Var<'g>, LossBreakdown)> {
    let g = batch.target.graph();
    let s = batch.target.shape();
    let (h, w) = (s[2], s[3]);
    if batch.sources.is_empty() || batch.sources.len() != batch.poses.len() {
        return Err(Error::Config("need one pose per source frame and at least one source".into()));
    }
    if batch.disparities.is_empty() {
        return Err(Error::Config("depth pyramid is empty".into()));
    }
    let ms = cfg.ms_ssim.fitted_to(h, w)?;
    let rp = &cfg.reprojection;
    let mut total: Option<Var<'g>> = None;
    let mut breakdown = LossBreakdown::default();
    let mut image_at_scale = batch.target;
    for (i, disp) in batch.disparities.iter().enumerate() {
        let ds = disp.shape();
        if ds[2] != h >> i || ds[3] != w >> i {
            return Err(Error::Shape(format!("pyramid scale {i} is {:?}, expected {}x{}", ds, h >> i, w >> i)));
        }
        let full = if i == 0 { *disp } else { disp.resize_bilinear(h, w) };
        let depth = disparity_to_depth_var(full, batch.min_depth, batch.max_depth);
        let warped: Vec<(Var<'g>, Tensor)> = batch
            .sources
            .iter()
            .zip(&batch.poses)
            .map(|(src, (r, t))| synthesize_view_var(*src, depth, *r, *t, &batch.intrinsics))
            .collect();
        let reproj = if rp.per_pixel_min {
            let (l, empty) = min_reprojection_loss_var(batch.target, &warped, rp, &ms);
            breakdown.empty_mask |= empty;
            l
        } else {
            let mut acc: Option<Var<'g>> = None;
            for (est, mask) in &warped {
                let (l, empty) = ms_reprojection_loss_var(batch.target, *est, mask, rp, &ms);
                breakdown.empty_mask |= empty;
                acc = Some(match acc {
                    Some(a) => a + l,
                    None => l,
                });
            }
            acc.expect("sources") * (1.0 / warped.len() as f64)
        };
        if i > 0 {
            image_at_scale = image_at_scale.avg_pool2();
        }
        let smooth = if rp.smoothness_weight > 0.0 {
            edge_aware_smoothness_var(*disp, image_at_scale) * (rp.smoothness_weight / (1u64 << i) as f64)
        } else {
            g.scalar(0.0)
        };
        breakdown.ms_reproj += reproj.item();
        breakdown.smoothness += smooth.item();
        let scale_loss = reproj + smooth;
        total = Some(match total {
            Some(t) => t + scale_loss,
            None => scale_loss,
        });
    }
    let k = batch.disparities.len() as f64;
    breakdown.ms_reproj /= k;
    breakdown.smoothness /= k;
    let total = total.expect("scales") * (1.0 / k);
    breakdown.total = total.item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check, DEFAULT_STEP};

    fn noise_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    // Hand-derived constant-image SSIM: c = s = 1, l = (2·0.5·0.25 + C1)/(0.25 + 0.0625 + C1).
    const CONST_SSIM: f64 = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);

    #[test]
    fn ssim_closed_forms() {
        let x = noise_image(16, 16, 3, 1);
        let (s, map) = ssim(&x, &x, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!((map.width, map.height, map.channels), (6, 6, 3));
        let a = Image::filled(16, 16, 1, 0.5);
        let b = Image::filled(16, 16, 1, 0.25);
        let (s, _) = ssim(&a, &b, &SsimConfig::default()).unwrap();
        assert!((s - CONST_SSIM).abs() < 1e-12);
        assert!((CONST_SSIM - 0.8001).abs() < 1e-4);
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = noise_image(20, 17, 3, 2);
        let y = noise_image(20, 17, 3, 3);
        let cfg = SsimConfig::default();
        assert!((ssim(&x, &y, &cfg).unwrap().0 - ssim(&y, &x, &cfg).unwrap().0).abs() < 1e-15);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = Image::filled(10, 20, 1, 0.1);
        assert!(matches!(ssim(&x, &x, &SsimConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn ms_ssim_constant_images_match_closed_form() {
        let cfg = MsSsimConfig::default();
        let a = Image::filled(176, 176, 1, 0.5);
        let b = Image::filled(176, 176, 1, 0.25);
        let v = ms_ssim(&a, &b, &cfg).unwrap();
        let expected = CONST_SSIM.powf(0.1333);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert!((expected - 0.9707).abs() < 1e-4);
    }

    #[test]
    fn ms_ssim_single_scale_is_ssim() {
        let x = noise_image(24, 24, 3, 4);
        let y = noise_image(24, 24, 3, 5);
        let ms = ms_ssim(&x, &y, &MsSsimConfig::single_scale(SsimConfig::default())).unwrap();
        let (s, _) = ssim(&x, &y, &SsimConfig::default()).unwrap();
        assert!((ms - s.max(MS_SSIM_FLOOR)).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_too_small_names_max_scales() {
        let x = Image::filled(64, 64, 3, 0.5);
        let err = ms_ssim(&x, &x, &MsSsimConfig::default()).unwrap_err().to_string();
        assert!(err.contains("at most 3"), "{err}");
        let fitted = MsSsimConfig::default().fitted_to(64, 64).unwrap();
        assert_eq!(fitted.scales, 3);
        assert!((fitted.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn downsampling_halves_with_floor() {
        let cfg =
            MsSsimConfig { scales: 2, weights: vec![0.5, 0.5], ssim: SsimConfig { window: 3, ..Default::default() } };
        assert_eq!(cfg.max_feasible_scales(13, 7), 2); // 13x7 -> 6x3 -> 3x1
        assert_eq!(cfg.max_feasible_scales(6, 6), 2);
        let g = Graph::new();
        let v = g.constant(Tensor::zeros(&[1, 1, 13, 7])).avg_pool2();
        assert_eq!(v.shape(), vec![1, 1, 6, 3]);
    }

    #[test]
    fn reprojection_loss_examples() {
        let cfg = ReprojectionLossConfig::default();
        let ms = MsSsimConfig::default();
        let x = noise_image(176, 176, 3, 6);
        let all = vec![true; 176 * 176];
        assert_eq!(ms_reprojection_loss(&x, &x, &all, &cfg, &ms).unwrap().0, 0.0);
        let a = Image::filled(176, 176, 3, 0.5);
        let b = Image::filled(176, 176, 3, 0.25);
        let (l, _) = ms_reprojection_loss(&a, &b, &all, &cfg, &ms).unwrap();
        let expected = 0.9 * (1.0 - CONST_SSIM.powf(0.1333)) + 0.1 * 0.25;
        assert!((l - expected).abs() < 1e-12);
        assert!((expected - 0.0514).abs() < 1e-4);
        // alpha = 0, beta = 1 gives the mean absolute error over valid pixels.
        let l1 = ReprojectionLossConfig { alpha: 0.0, beta: 1.0, ..cfg };
        let y = noise_image(176, 176, 3, 7);
        let mut mask = all.clone();
        mask[..176 * 10].iter_mut().for_each(|m| *m = false);
        let (l, _) = ms_reprojection_loss(&x, &y, &mask, &l1, &ms).unwrap();
        let mut mae = 0.0;
        for p in 176 * 10..176 * 176 {
            for c in 0..3 {
                mae += (x.data[p * 3 + c] - y.data[p * 3 + c]).abs();
            }
        }
        mae /= (176 * 166 * 3) as f64;
        assert!((l - mae).abs() < 1e-12);
        let (l, empty) = ms_reprojection_loss(&x, &y, &vec![false; 176 * 176], &cfg, &ms).unwrap();
        assert!(empty && l == 0.0);
    }

    #[test]
    fn ms_ssim_map_closed_forms() {
        let ms = MsSsimConfig::default().fitted_to(64, 64).unwrap();
        let g = Graph::new();
        let x = g.constant(noise_image(64, 64, 3, 9).to_tensor());
        let same = ms_ssim_map_var(x, x, &ms).value();
        assert_eq!(same.shape(), &[1, 1, 64, 64]);
        assert!(same.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        // Constant images: every scale map is constant, so the map equals the scalar everywhere.
        let a = g.constant(Image::filled(64, 64, 3, 0.5).to_tensor());
        let b = g.constant(Image::filled(64, 64, 3, 0.25).to_tensor());
        let scalar = ms_ssim_var(a, b, &ms).item();
        assert!(ms_ssim_map_var(a, b, &ms).value().data().iter().all(|v| (v - scalar).abs() < 1e-12));
    }

    #[test]
    fn min_reprojection_takes_per_pixel_minimum() {
        let ms = MsSsimConfig::default().fitted_to(64, 64).unwrap();
        let cfg = ReprojectionLossConfig::default();
        let g = Graph::new();
        let t = g.constant(noise_image(64, 64, 3, 10).to_tensor());
        let other = g.constant(noise_image(64, 64, 3, 11).to_tensor());
        let all = Tensor::full(&[1, 1, 64, 64], 1.0);
        let none = Tensor::zeros(&[1, 1, 64, 64]);
        // A perfect source wins everywhere, in either order.
        let (l, unseen) = min_reprojection_loss_var(t, &[(other, all.clone()), (t, all.clone())], &cfg, &ms);
        assert!(l.item().abs() < 1e-12 && !unseen);
        let (l, _) = min_reprojection_loss_var(t, &[(t, none.clone()), (other, all.clone())], &cfg, &ms);
        assert!(l.item().abs() < 1e-12);
        // Single source: the mean of its error map.
        let (l, _) = min_reprojection_loss_var(t, &[(other, all.clone())], &cfg, &ms);
        let alone = reprojection_error_map(t, other, &cfg, &ms).value();
        assert!((l.item() - alone.mean()).abs() < 1e-12 && alone.mean() > 0.1);
        // Left half from one source, right half from the other.
        let left = Tensor::from_fn(&[1, 3, 64, 64], |i| if i[3] < 32 { 0.0 } else { 1.0 });
        let right = Tensor::from_fn(&[1, 3, 64, 64], |i| if i[3] < 32 { 1.0 } else { 0.0 });
        let (a, b) = (t + g.constant(left) * other, t + g.constant(right) * other);
        let (l, _) = min_reprojection_loss_var(t, &[(a, all.clone()), (b, all)], &cfg, &ms);
        let (ea, eb) =
            (reprojection_error_map(t, a, &cfg, &ms).value(), reprojection_error_map(t, b, &cfg, &ms).value());
        let want = ea.data().iter().zip(eb.data()).map(|(x, y)| x.min(*y)).sum::<f64>() / ea.numel() as f64;
        assert!((l.item() - want).abs() < 1e-12);
        let (_, unseen) = min_reprojection_loss_var(t, &[(t, none.clone()), (other, none)], &cfg, &ms);
        assert!(unseen);
    }

    #[test]
    fn smoothness_examples() {
        let img = Image::filled(4, 4, 3, 0.5);
        assert!(edge_aware_smoothness(&Image::filled(4, 4, 1, 0.3), &img).unwrap().abs() < 1e-15);
        // Ramp 1..4 along x has mean 2.5, so every normalized x-step is 1/2.5 and y-steps are 0.
        let ramp = Image::new(4, 4, 1, (0..16).map(|i| (i % 4) as f64 + 1.0).collect()).unwrap();
        let v = edge_aware_smoothness(&ramp, &img).unwrap();
        assert!((v - 0.4).abs() < 1e-6, "{v}");
        // A disparity step on an image edge is cheaper than on a flat image.
        let step = Image::new(4, 4, 1, (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 2.0 }).collect()).unwrap();
        let edge = Image::new(4, 4, 3, (0..48).map(|i| if (i / 3) % 4 < 2 { 0.0 } else { 1.0 }).collect()).unwrap();
        assert!(edge_aware_smoothness(&step, &edge).unwrap() < edge_aware_smoothness(&step, &img).unwrap());
    }

    #[test]
    fn ms_ssim_gradient_matches_finite_differences() {
        let x = noise_image(44, 44, 3, 8).to_tensor();
        let y = x.map(|v| (v + 0.1 * (v * 37.0).sin()).clamp(0.0, 1.0));
        let cfg = MsSsimConfig::default().fitted_to(44, 44).unwrap();
        assert_eq!(cfg.scales, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = check(&[x, y], &[1], 20, DEFAULT_STEP, &mut rng, |_, v| ms_ssim_var(v[0], v[1], &cfg).sum());
        assert!(r.max_rel_err() < 1e-3, "{:?}", r.worst());
    }
}
