//! Strided convolutional ego-motion regressor over a stacked frame pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::normalize_input;
use crate::autograd::{Binding, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNetConfig {
    /// Channels of the four stride-2 convolutions.
    pub channels: [usize; 4],
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64, 64] }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("pose.channels must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PoseNet {
    pub convs: Vec<Conv2d>,
    /// 1×1 projection to the six motion parameters.
    pub output: Conv2d,
}

impl PoseNet {
    pub fn new(cfg: &PoseNetConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Pose;
        let mut in_ch = 6;
        let mut convs = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("pose.conv{i}"), g, in_ch, c, 3, 2, std::f64::consts::SQRT_2, rng));
            in_ch = c;
        }
        let output = Conv2d::new(store, "pose.output", g, in_ch, 6, 1, 1, 0.01, rng);
        Self { convs, output }
    }

    /// `(N, 6)` raw outputs (axis-angle then translation) for `(N, 3, H, W)` frame pairs.
    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, frame_a: Var<'g>, frame_b: Var<'g>) -> Result<Var<'g>> {
        let (sa, sb) = (frame_a.shape(), frame_b.shape());
        if sa != sb || sa.len() != 4 || sa[1] != 3 {
            return Err(Error::Shape(format!(
                "pose network needs two equal (N, 3, H, W) frames, got {sa:?} and {sb:?}"
            )));
        }
        let mut x = normalize_input(Var::concat(&[frame_a, frame_b], 1));
        for conv in &self.convs {
            x = conv.forward(bind, x).relu();
        }
        let out = self.output.forward(bind, x);
        let s = out.shape();
        Ok(out.reshape(&[s[0], 6, s[2] * s[3]]).mean_axis(2, false))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs.iter().chain([&self.output]).flat_map(Conv2d::param_ids).collect()
    }
}
