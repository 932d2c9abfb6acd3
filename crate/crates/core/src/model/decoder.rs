//! Convolutional neck and head that turn four token maps into a disparity pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderConfig;
use super::layers::Conv2d;
use crate::autograd::{Binding, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Feature channels at `1, 1/2, 1/4, 1/8` resolution.
    pub channels: [usize; 4],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { channels: [16, 16, 32, 32] }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("decoder.channels must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DepthDecoder {
    /// 1×1 projections of the tapped tokens, shallowest first.
    pub reassemble: Vec<Conv2d>,
    /// 3×3 fusion at `1/8, 1/4, 1/2, 1`.
    pub fuse: Vec<Conv2d>,
    /// 1×1 channel changes before upsampling from `1/4` and from `1/2`.
    pub lateral: Vec<Conv2d>,
    /// Disparity heads at `1, 1/2, 1/4, 1/8`.
    pub heads: Vec<Conv2d>,
    patch_size: usize,
}

impl DepthDecoder {
    pub fn new(cfg: &DecoderConfig, enc: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Decoder;
        let [c0, c1, c2, c3] = cfg.channels;
        let d = enc.embed_dim;
        // Tap k (shallow→deep) is fused at scale 1/2, 1/4, 1/8, 1/8.
        let reassemble = [c1, c2, c3, c3]
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("decoder.reassemble.{i}"), g, d, c, 1, 1, 1.0, rng))
            .collect();
        let fuse = [(c3, c3, "s3"), (c3, c2, "s2"), (c1, c1, "s1"), (c1, c0, "s0")]
            .iter()
            .map(|&(i, o, n)| Conv2d::new(store, &format!("decoder.fuse.{n}"), g, i, o, 3, 1, RELU_GAIN, rng))
            .collect();
        let lateral = vec![Conv2d::new(store, "decoder.lateral.s2", g, c2, c1, 1, 1, 1.0, rng)];
        let heads = [c0, c1, c2, c3]
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("decoder.head.{i}"), g, c, 1, 3, 1, 1.0, rng))
            .collect();
        Self { reassemble, fuse, lateral, heads, patch_size: enc.patch_size }
    }

    /// Token maps to the 1/8 grid as `(N, C, H/8, W/8)`.
    fn to_grid<'g>(&self, tokens: Var<'g>, height: usize, width: usize) -> Var<'g> {
        let s = tokens.shape();
        let p = self.patch_size;
        let (gh, gw) = (height / p, width / p);
        let mut x = tokens.reshape(&[s[0], gh, gw, s[2]]).permute(&[0, 3, 1, 2]);
        let mut scale = p;
        while scale < 8 {
            x = x.avg_pool2();
            scale *= 2;
        }
        if scale > 8 {
            x = x.upsample_nearest(scale / 8);
        }
        x
    }

    /// `taps` are four `(N, T, D)` token maps; output is finest first.
    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, taps: &[Var<'g>], height: usize, width: usize) -> Vec<Var<'g>> {
        assert_eq!(taps.len(), 4, "decoder expects four taps");
        let r: Vec<Var<'g>> = taps
            .iter()
            .zip(&self.reassemble)
            .map(|(&t, conv)| conv.forward(bind, self.to_grid(t, height, width)))
            .collect();
        let fuse = |i: usize, x: Var<'g>| self.fuse[i].forward(bind, x).relu();
        let head = |i: usize, x: Var<'g>| self.heads[i].forward(bind, x).sigmoid();

        let f3 = fuse(0, r[3] + r[2]);
        let f2 = fuse(1, f3.upsample_nearest(2) + r[1].upsample_nearest(2));
        let f1 = fuse(2, self.lateral[0].forward(bind, f2).upsample_nearest(2) + r[0].upsample_nearest(4));
        let f0 = fuse(3, f1.upsample_nearest(2));
        vec![head(0, f0), head(1, f1), head(2, f2), head(3, f3)]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.reassemble, &self.fuse, &self.lateral, &self.heads]
            .into_iter()
            .flatten()
            .flat_map(Conv2d::param_ids)
            .collect()
    }
}
