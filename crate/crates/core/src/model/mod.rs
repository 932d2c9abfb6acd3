//! Miniature transformer depth network and convolutional pose network.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod posenet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binding, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::imaging::Image;
use crate::lora::{inject_vector_lora, LoraInjectionSpec};

pub use decoder::{DecoderConfig, DepthDecoder};
pub use encoder::{EncoderConfig, Projection, TransformerBlock, TransformerEncoder};
pub use posenet::{PoseNet, PoseNetConfig};

pub const DEFAULT_MIN_DEPTH: f64 = 0.1;
pub const DEFAULT_MAX_DEPTH: f64 = 100.0;

/// Per-channel normalization applied to `[0, 1]` images before either network.
pub(crate) const PIXEL_MEAN: f64 = 0.45;
pub(crate) const PIXEL_STD: f64 = 0.225;

/// Standardize `[0, 1]` pixels with the fixed dataset mean and deviation.
pub fn normalize_input<'g>(x: Var<'g>) -> Var<'g> {
    x.add_scalar(-PIXEL_MEAN).mul_scalar(1.0 / PIXEL_STD)
}

// Independent RNG streams so that e.g. the frozen encoder is identical across LoRA configs.
const STREAM_ENCODER: u64 = 0;
const STREAM_LORA: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_POSE: u64 = 3;

pub(crate) fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn default_min_depth() -> f64 {
    DEFAULT_MIN_DEPTH
}

fn default_max_depth() -> f64 {
    DEFAULT_MAX_DEPTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub pose: PoseNetConfig,
    #[serde(default = "default_min_depth")]
    pub min_depth: f64,
    #[serde(default = "default_max_depth")]
    pub max_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            pose: PoseNetConfig::default(),
            min_depth: DEFAULT_MIN_DEPTH,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.pose.validate()?;
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        Ok(())
    }

    /// Input height and width must both be multiples of this.
    pub fn input_divisor(&self) -> usize {
        self.encoder.patch_size * 8
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.input_divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "input {width}x{height} must have both dimensions divisible by {d} (patch_size·8)"
            )));
        }
        Ok(())
    }
}

/// Four sigmoid disparity maps, finest first (`1, 1/2, 1/4, 1/8` of the input).
#[derive(Debug, Clone)]
pub struct DepthPyramid {
    /// Each `(N, 1, H/2^i, W/2^i)`.
    pub disparities: Vec<Tensor>,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl DepthPyramid {
    /// Full-resolution metric depth of image `index`.
    pub fn depth(&self, index: usize) -> DepthMap {
        let d = &self.disparities[0];
        let (h, w) = (d.shape()[2], d.shape()[3]);
        let values = d.data()[index * h * w..(index + 1) * h * w]
            .iter()
            .map(|&v| disparity_to_depth(v, self.min_depth, self.max_depth))
            .collect();
        DepthMap { width: w, height: h, values }
    }
}

/// Raw pose-network output for one frame pair, before the output scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseEstimate {
    pub fn from_row(row: &[f64]) -> Self {
        Self { axis_angle: [row[0], row[1], row[2]], translation: [row[3], row[4], row[5]] }
    }

    /// Rigid transform after applying the output scale.
    pub fn to_pose(&self) -> crate::geometry::Pose {
        let s = crate::geometry::POSE_OUTPUT_SCALE;
        crate::geometry::axis_angle_to_pose(self.axis_angle.map(|v| v * s), self.translation.map(|v| v * s))
    }
}

/// `1 / (1/max + (1/min − 1/max)·disp)`.
pub fn disparity_to_depth(disp: f64, min_depth: f64, max_depth: f64) -> f64 {
    let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
    1.0 / (lo + (hi - lo) * disp)
}

/// Inverse of [`disparity_to_depth`].
pub fn depth_to_disparity(depth: f64, min_depth: f64, max_depth: f64) -> f64 {
    let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
    (1.0 / depth - lo) / (hi - lo)
}

pub fn disparity_to_depth_var<'g>(disp: Var<'g>, min_depth: f64, max_depth: f64) -> Var<'g> {
    let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
    disp.mul_scalar(hi - lo).add_scalar(lo).recip()
}

/// Depth network, pose network and the parameter store they share.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: TransformerEncoder,
    pub decoder: DepthDecoder,
    pub pose: PoseNet,
}

impl Model {
    /// Build with deterministic initialization; `lora` adapts the (frozen) encoder.
    pub fn new(config: &ModelConfig, lora: Option<&LoraInjectionSpec>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut encoder =
            TransformerEncoder::new(&config.encoder, &mut store, &mut component_rng(seed, STREAM_ENCODER));
        if let Some(spec) = lora {
            inject_vector_lora(&mut encoder, &mut store, spec, &mut component_rng(seed, STREAM_LORA))?;
        } else {
            for id in encoder.param_ids() {
                store.set_trainable(id, false);
            }
        }
        let decoder =
            DepthDecoder::new(&config.decoder, &config.encoder, &mut store, &mut component_rng(seed, STREAM_DECODER));
        let pose = PoseNet::new(&config.pose, &mut store, &mut component_rng(seed, STREAM_POSE));
        Ok(Self { config: config.clone(), store, encoder, decoder, pose })
    }

    /// Disparity pyramid `[(N,1,H,W), (N,1,H/2,W/2), ...]` for `(N, 3, H, W)` images.
    pub fn depth_forward<'g>(&self, bind: &Binding<'g, '_>, images: Var<'g>) -> Result<Vec<Var<'g>>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("depth network expects (N, 3, H, W), got {s:?}")));
        }
        self.config.check_input(s[2], s[3])?;
        let taps = self.encoder.forward(bind, normalize_input(images))?;
        Ok(self.decoder.forward(bind, &taps, s[2], s[3]))
    }

    /// Raw `(N, 6)` pose outputs for target→source motion.
    pub fn pose_forward<'g>(&self, bind: &Binding<'g, '_>, frame_a: Var<'g>, frame_b: Var<'g>) -> Result<Var<'g>> {
        self.pose.forward(bind, frame_a, frame_b)
    }

    /// Inference on a single image.
    pub fn predict(&self, image: &Image) -> Result<DepthPyramid> {
        let g = Graph::new();
        let bind = Binding::new(&g, &self.store);
        let disps = self.depth_forward(&bind, g.constant(image.to_tensor()))?;
        Ok(DepthPyramid {
            disparities: disps.iter().map(|d| (*d.value()).clone()).collect(),
            min_depth: self.config.min_depth,
            max_depth: self.config.max_depth,
        })
    }

    pub fn predict_pose(&self, frame_a: &Image, frame_b: &Image) -> Result<PoseEstimate> {
        let g = Graph::new();
        let bind = Binding::new(&g, &self.store);
        let out = self.pose_forward(&bind, g.constant(frame_a.to_tensor()), g.constant(frame_b.to_tensor()))?;
        Ok(PoseEstimate::from_row(out.value().data()))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.get(id).trainable).collect()
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::autograd::ParamGroup;
    use crate::lora::RankVector;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { blocks: 4, embed_dim: 16, heads: 2, patch_size: 8, mlp_ratio: 2.0 },
            ..ModelConfig::default()
        }
    }

    fn test_image(w: usize, h: usize, phase: f64) -> Image {
        let data = (0..w * h * 3).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin()).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn disparity_depth_examples() {
        assert_relative_eq!(disparity_to_depth(1.0, 0.1, 100.0), 0.1, epsilon = 1e-12);
        assert_relative_eq!(disparity_to_depth(0.0, 0.1, 100.0), 100.0, epsilon = 1e-9);
        assert_relative_eq!(disparity_to_depth(0.5, 0.1, 100.0), 1.0 / (0.01 + 9.99 * 0.5), epsilon = 1e-12);
        assert_relative_eq!(disparity_to_depth(0.5, 0.1, 100.0), 0.199800, epsilon = 1e-6);
        for d in [0.01, 0.3, 0.9] {
            assert_relative_eq!(depth_to_disparity(disparity_to_depth(d, 0.1, 100.0), 0.1, 100.0), d, epsilon = 1e-12);
        }
        let g = Graph::new();
        let v = disparity_to_depth_var(g.constant(Tensor::new(&[3], vec![0.0, 0.5, 1.0]).unwrap()), 0.1, 100.0);
        for (a, d) in v.value().data().iter().zip([0.0, 0.5, 1.0]) {
            assert_relative_eq!(*a, disparity_to_depth(d, 0.1, 100.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn pyramid_shapes_and_range() {
        let model = Model::new(&tiny_config(), None, 3).unwrap();
        let p = model.predict(&test_image(64, 64, 0.0)).unwrap();
        let shapes: Vec<_> = p.disparities.iter().map(|d| d.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 1, 64, 64], vec![1, 1, 32, 32], vec![1, 1, 16, 16], vec![1, 1, 8, 8]]);
        assert!(p.disparities.iter().all(|d| d.data().iter().all(|&v| v > 0.0 && v < 1.0)));
        let again = model.predict(&test_image(64, 64, 0.0)).unwrap();
        assert!(p.disparities.iter().zip(&again.disparities).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let model = Model::new(&tiny_config(), None, 3).unwrap();
        let err = model.predict(&test_image(64, 40, 0.0)).unwrap_err();
        assert!(matches!(&err, Error::Shape(m) if m.contains("64")), "{err}");
    }

    #[test]
    fn zero_heads_give_half() {
        let mut model = Model::new(&tiny_config(), None, 3).unwrap();
        for head in model.decoder.heads.clone() {
            for id in head.param_ids() {
                model.store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let p = model.predict(&test_image(64, 64, 0.2)).unwrap();
        assert!(p.disparities.iter().all(|d| d.data().iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn pose_forward_examples() {
        let mut model = Model::new(&tiny_config(), None, 3).unwrap();
        let (a, b) = (test_image(64, 64, 0.0), test_image(64, 64, 1.0));
        let ab = model.predict_pose(&a, &b).unwrap();
        let ba = model.predict_pose(&b, &a).unwrap();
        assert_ne!(ab, ba);
        let err = model.predict_pose(&a, &test_image(32, 64, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        for id in model.pose.output.param_ids() {
            model.store.value_mut(id).data_mut().fill(0.0);
        }
        let same = model.predict_pose(&a, &a).unwrap();
        assert_eq!(same.to_pose().to_vector(), [0.0; 6]);
    }

    #[test]
    fn pose_outputs_finite_on_random_inputs() {
        use rand::Rng;
        let model = Model::new(&tiny_config(), None, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mk =
                |rng: &mut ChaCha8Rng| Image::new(16, 16, 3, (0..768).map(|_| rng.random::<f64>()).collect()).unwrap();
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let p = model.predict_pose(&a, &b).unwrap();
            assert!(p.axis_angle.iter().chain(&p.translation).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn lora_gradients_reach_factors_only() {
        let cfg = tiny_config();
        let spec = LoraInjectionSpec::new(RankVector(vec![3, 3, 2, 2]));
        let mut model = Model::new(&cfg, Some(&spec), 1).unwrap();
        // Non-zero B so that A also receives gradient.
        for l in model.encoder.lora_layers().cloned().collect::<Vec<_>>() {
            let t = model.store.value_mut(l.b);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let g = Graph::new();
        let bind = Binding::new(&g, &model.store);
        let disps = model.depth_forward(&bind, g.constant(test_image(64, 64, 0.5).to_tensor())).unwrap();
        let loss = disps.iter().map(|d| d.mean()).reduce(|a, b| a + b).unwrap();
        let grads: std::collections::HashMap<_, _> = bind.collect(g.backward(loss)).into_iter().collect();
        for (id, p) in model.store.iter() {
            match p.group {
                ParamGroup::LoraA | ParamGroup::LoraB => {
                    assert!(grads[&id].data().iter().any(|&v| v != 0.0), "{} has zero gradient", p.name)
                }
                ParamGroup::EncoderBase => assert!(!grads.contains_key(&id), "{} received gradient", p.name),
                _ => {}
            }
        }
    }

    #[test]
    fn frozen_encoder_identical_across_lora_configs() {
        let cfg = tiny_config();
        let plain = Model::new(&cfg, None, 11).unwrap();
        let adapted = Model::new(&cfg, Some(&LoraInjectionSpec::new(RankVector(vec![2; 4]))), 11).unwrap();
        for (id, p) in plain.store.iter().filter(|(_, p)| p.group != ParamGroup::LoraA && p.group != ParamGroup::LoraB)
        {
            let other = adapted.store.id(&p.name).unwrap();
            assert!(plain.store.value(id).bit_eq(adapted.store.value(other)), "{}", p.name);
        }
    }
}
