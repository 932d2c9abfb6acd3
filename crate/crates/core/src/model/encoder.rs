//! Pre-norm vision transformer over non-overlapping patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear};
use crate::autograd::{Binding, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::lora::{LoraLinear, ProjectionKind};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { blocks: 12, embed_dim: 96, heads: 4, patch_size: 8, mlp_ratio: 2.0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("encoder.blocks must be at least 1".into()));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder.embed_dim ({}) must be a positive multiple of encoder.heads ({})",
                self.embed_dim, self.heads
            )));
        }
        if !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!("encoder.patch_size must be a power of two, got {}", self.patch_size)));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(Error::Config(format!("encoder.mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Blocks whose outputs feed the decoder: `round(blocks·k/4)` for `k = 1..4`.
    pub fn tap_blocks(&self) -> [usize; 4] {
        [1, 2, 3, 4].map(|k| ((self.blocks * k) as f64 / 4.0).round().max(1.0) as usize)
    }
}

/// An attention projection: plain, or with a low-rank adapter beside it.
#[derive(Debug, Clone)]
pub enum Projection {
    Dense(Linear),
    Lora(LoraLinear),
}

impl Projection {
    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        match self {
            Projection::Dense(l) => l.forward(bind, x),
            Projection::Lora(l) => l.forward(bind, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Projection::Dense(l) => l.param_ids(),
            Projection::Lora(l) => l.param_ids(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    fn new(name: &str, cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let g = ParamGroup::EncoderBase;
        let mut proj = |p: &str, store: &mut ParamStore| {
            Projection::Dense(Linear::new(store, &format!("{name}.attn.{p}"), g, true, d, d, INIT_STD, true, rng))
        };
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), g, true, d);
        let q = proj("q", store);
        let k = proj("k", store);
        let v = proj("v", store);
        let o = proj("o", store);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), g, true, d);
        let hidden = cfg.hidden_dim();
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), g, true, d, hidden, INIT_STD, true, rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), g, true, hidden, d, INIT_STD, true, rng);
        Self { norm1, q, k, v, o, norm2, fc1, fc2, heads: cfg.heads }
    }

    pub fn projection(&self, kind: ProjectionKind) -> &Projection {
        match kind {
            ProjectionKind::Q => &self.q,
            ProjectionKind::K => &self.k,
            ProjectionKind::V => &self.v,
            ProjectionKind::O => &self.o,
        }
    }

    pub fn projection_mut(&mut self, kind: ProjectionKind) -> &mut Projection {
        match kind {
            ProjectionKind::Q => &mut self.q,
            ProjectionKind::K => &mut self.k,
            ProjectionKind::V => &mut self.v,
            ProjectionKind::O => &mut self.o,
        }
    }

    /// `x: (N, T, D)`.
    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        let y = self.norm1.forward(bind, x);
        let ctx = self.q.forward(bind, y).attention(self.k.forward(bind, y), self.v.forward(bind, y), self.heads);
        let x = x + self.o.forward(bind, ctx);

        let y = self.norm2.forward(bind, x);
        x + self.fc2.forward(bind, self.fc1.forward(bind, y).gelu())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm1.param_ids();
        for p in [&self.q, &self.k, &self.v, &self.o] {
            ids.extend(p.param_ids());
        }
        ids.extend(self.norm2.param_ids());
        ids.extend(self.fc1.param_ids());
        ids.extend(self.fc2.param_ids());
        ids
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    /// Maximum token count the positional table covers.
    pub max_tokens: usize,
}

/// Positional table size: enough for a 256×256 input at the configured patch size.
const MAX_GRID_PIXELS: usize = 256;

impl TransformerEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let (d, p) = (cfg.embed_dim, cfg.patch_size);
        let g = ParamGroup::EncoderBase;
        let patch_embed = Linear::new(store, "encoder.patch_embed", g, true, 3 * p * p, d, INIT_STD, true, rng);
        let side = (MAX_GRID_PIXELS / p).max(1);
        let max_tokens = side * side;
        let pos_embed = store.normal("encoder.pos_embed", g, true, &[max_tokens, d], INIT_STD, rng);
        let blocks =
            (0..cfg.blocks).map(|i| TransformerBlock::new(&format!("encoder.blocks.{i}"), cfg, store, rng)).collect();
        let norm = LayerNorm::new(store, "encoder.norm", g, true, d);
        Self { config: cfg.clone(), patch_embed, pos_embed, blocks, norm, max_tokens }
    }

    /// Normalized token features `(N, T, D)` at each tap block, shallowest first.
    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, images: Var<'g>) -> Result<Vec<Var<'g>>> {
        let s = images.shape();
        let p = self.config.patch_size;
        let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        if hh % p != 0 || ww % p != 0 {
            return Err(Error::Shape(format!("input {ww}x{hh} is not divisible by patch size {p}")));
        }
        let (gh, gw) = (hh / p, ww / p);
        let tokens = gh * gw;
        if tokens > self.max_tokens {
            return Err(Error::Shape(format!("{tokens} patches exceed the positional table ({})", self.max_tokens)));
        }
        let patches =
            images.reshape(&[n, c, gh, p, gw, p]).permute(&[0, 2, 4, 1, 3, 5]).reshape(&[n, tokens, c * p * p]);
        let pos = bind.var(self.pos_embed).narrow(0, 0, tokens);
        let mut x = self.patch_embed.forward(bind, patches) + pos;
        assert_eq!(x.shape()[1], tokens, "token count");

        let taps = self.config.tap_blocks();
        let mut out = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(bind, x);
            for _ in taps.iter().filter(|&&t| t == i + 1) {
                out.push(self.norm.forward(bind, x));
            }
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patch_embed.param_ids();
        ids.push(self.pos_embed);
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.extend(self.norm.param_ids());
        ids
    }

    pub fn lora_layers(&self) -> impl Iterator<Item = &LoraLinear> {
        self.blocks.iter().flat_map(|b| {
            [&b.q, &b.k, &b.v, &b.o].into_iter().filter_map(|p| match p {
                Projection::Lora(l) => Some(l),
                Projection::Dense(_) => None,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{Graph, Tensor};

    #[test]
    fn taps_follow_quarter_pattern() {
        let mut cfg = EncoderConfig::default();
        assert_eq!(cfg.tap_blocks(), [3, 6, 9, 12]);
        cfg.blocks = 2;
        assert_eq!(cfg.tap_blocks(), [1, 1, 2, 2]);
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig { embed_dim: 10, heads: 4, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig { blocks: 0, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { patch_size: 6, ..EncoderConfig::default() }.validate().is_err());
    }

    #[test]
    fn attention_mixes_tokens_and_keeps_shape() {
        let cfg = EncoderConfig { blocks: 2, embed_dim: 8, heads: 2, patch_size: 4, mlp_ratio: 1.0 };
        let mut store = ParamStore::new();
        let enc = TransformerEncoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::new();
        let bind = Binding::new(&g, &store);
        let img = Tensor::from_fn(&[2, 3, 8, 12], |i| ((i[0] + 2 * i[1] + 3 * i[2] + 5 * i[3]) % 7) as f64 / 7.0);
        let taps = enc.forward(&bind, g.constant(img.clone())).unwrap();
        assert_eq!(taps.len(), 4);
        assert!(taps.iter().all(|t| t.shape() == vec![2, 6, 8]));
        // Changing one patch changes every token's output via attention.
        let mut img2 = img;
        img2.set(&[0, 0, 0, 0], 0.99);
        let taps2 = enc.forward(&bind, g.constant(img2)).unwrap();
        let (a, b) = (taps[3].value(), taps2[3].value());
        for tok in 0..6 {
            let diff = (0..8).map(|c| (a.at(&[0, tok, c]) - b.at(&[0, tok, c])).abs()).fold(0.0, f64::max);
            assert!(diff > 0.0, "token {tok}");
        }
        for tok in 0..6 {
            for c in 0..8 {
                assert_eq!(a.at(&[1, tok, c]), b.at(&[1, tok, c]));
            }
        }
    }
}
