//! Low-rank adapters with a per-block rank vector.
//!
//! A [`LoraLinear`] keeps its base projection `W0` frozen and learns `B·A` beside it:
//! `h = W0·x + scale·B·(A·x)`. [`inject_vector_lora`] swaps selected attention
//! projections of every encoder block for adapters whose rank comes from that
//! block's entry in a [`RankVector`].

use std::collections::BTreeSet;
use std::fmt;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binding, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::encoder::{Projection, TransformerEncoder};
use crate::model::layers::Linear;

/// Standard deviation of the Gaussian used for `A`; `B` starts at zero.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// One LoRA rank per transformer block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankVector(pub Vec<usize>);

impl RankVector {
    /// `[14, 14, 12, 12, 10, 10, 8, 8, 8, 8, 8, 8]`: more capacity in early blocks.
    pub fn decreasing_12() -> Self {
        RankVector(vec![14, 14, 12, 12, 10, 10, 8, 8, 8, 8, 8, 8])
    }

    pub fn uniform(blocks: usize, rank: usize) -> Self {
        RankVector(vec![rank; blocks])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.0.len() != blocks {
            return Err(Error::Config(format!(
                "rank vector has {} entries but the encoder has {blocks} blocks",
                self.0.len()
            )));
        }
        if let Some(i) = self.0.iter().position(|&r| r == 0) {
            return Err(Error::Config(format!("rank vector entry {i} is zero; ranks must be >= 1")));
        }
        if self.0.windows(2).any(|w| w[1] > w[0]) {
            warn!("rank vector {:?} is not non-increasing", self.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Q,
    K,
    V,
    O,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 4] = [ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V, ProjectionKind::O];

    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::Q => "q",
            ProjectionKind::K => "k",
            ProjectionKind::V => "v",
            ProjectionKind::O => "o",
        }
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_targets() -> BTreeSet<ProjectionKind> {
    [ProjectionKind::Q, ProjectionKind::V].into_iter().collect()
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraInjectionSpec {
    #[serde(default = "default_targets")]
    pub targets: BTreeSet<ProjectionKind>,
    pub rank_vector: RankVector,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl LoraInjectionSpec {
    pub fn new(rank_vector: RankVector) -> Self {
        Self { targets: default_targets(), rank_vector, scale: 1.0 }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        self.rank_vector.validate(blocks)?;
        if self.targets.is_empty() {
            return Err(Error::Config("lora.targets must name at least one projection".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("lora.scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Frozen base projection plus trainable low-rank factors `A: (r, k)` and `B: (d, r)`.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraLinear {
    /// Wrap `base` (which is frozen in `store`) with fresh factors: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn wrap(
        store: &mut ParamStore,
        name: &str,
        base: Linear,
        rank: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d, k) = (base.out_features, base.in_features);
        if rank == 0 || rank >= d.min(k) {
            return Err(Error::Config(format!("LoRA rank {rank} must satisfy 1 <= r < min({d}, {k})")));
        }
        for id in base.param_ids() {
            store.set_trainable(id, false);
        }
        let a = store.normal(format!("{name}.lora_a"), ParamGroup::LoraA, true, &[rank, k], LORA_A_INIT_STD, rng);
        let b = store.insert(format!("{name}.lora_b"), ParamGroup::LoraB, true, Tensor::zeros(&[d, rank]));
        Ok(Self { base, a, b, rank, scale })
    }

    /// Build from explicit matrices (`w0: d×k`, `a: r×k`, `b: d×r`).
    pub fn from_parts(
        store: &mut ParamStore,
        name: &str,
        w0: Tensor,
        a: Tensor,
        b: Tensor,
        scale: f64,
    ) -> Result<Self> {
        let (ws, as_, bs) = (w0.shape().to_vec(), a.shape().to_vec(), b.shape().to_vec());
        if ws.len() != 2 || as_.len() != 2 || bs.len() != 2 || as_[1] != ws[1] || bs[0] != ws[0] || bs[1] != as_[0] {
            return Err(Error::Shape(format!("incompatible LoRA parts W0 {ws:?}, A {as_:?}, B {bs:?}")));
        }
        let rank = as_[0];
        if rank == 0 || rank >= ws[0].min(ws[1]) {
            return Err(Error::Config(format!("LoRA rank {rank} must satisfy 1 <= r < min{:?}", ws)));
        }
        let weight = store.insert(format!("{name}.weight"), ParamGroup::EncoderBase, false, w0);
        let a = store.insert(format!("{name}.lora_a"), ParamGroup::LoraA, true, a);
        let b = store.insert(format!("{name}.lora_b"), ParamGroup::LoraB, true, b);
        let base = Linear { weight, bias: None, in_features: ws[1], out_features: ws[0] };
        Ok(Self { base, a, b, rank, scale })
    }

    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        let base = self.base.forward(bind, x);
        lora_residual(base, x, bind.var(self.a), bind.var(self.b), self.scale)
    }

    /// Trainable scalars this adapter adds: `r·(d + k)`.
    pub fn trainable_count(&self) -> usize {
        self.rank * (self.base.out_features + self.base.in_features)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.base.param_ids();
        ids.extend([self.a, self.b]);
        ids
    }
}

/// `base + scale·B·(A·x)`, where `base` is the frozen projection of `x`.
pub fn lora_residual<'g>(base: Var<'g>, x: Var<'g>, a: Var<'g>, b: Var<'g>, scale: f64) -> Var<'g> {
    base + x.linear(a, None).linear(b, None) * scale
}

/// `W0·x + scale·B·(A·x)` for a single input vector.
pub fn lora_forward(store: &ParamStore, layer: &LoraLinear, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.base.in_features {
        return Err(Error::Shape(format!("input has length {}, layer expects {}", x.len(), layer.base.in_features)));
    }
    let g = Graph::new();
    let bind = Binding::new(&g, store);
    let xv = g.constant(Tensor::new(&[1, x.len()], x.to_vec())?);
    Ok(layer.forward(&bind, xv).value().data().to_vec())
}

/// Replace every targeted projection of block `i` with an adapter of rank `ranks[i]` and
/// freeze every other encoder parameter.
pub fn inject_vector_lora(
    encoder: &mut TransformerEncoder,
    store: &mut ParamStore,
    spec: &LoraInjectionSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    spec.validate(encoder.blocks.len())?;
    for id in encoder.param_ids() {
        store.set_trainable(id, false);
    }
    for (i, (block, &rank)) in encoder.blocks.iter_mut().zip(&spec.rank_vector.0).enumerate() {
        for &kind in &spec.targets {
            let slot = block.projection_mut(kind);
            let Projection::Dense(base) = slot else {
                return Err(Error::Config(format!("block {i} projection {kind} already adapted")));
            };
            let lora = LoraLinear::wrap(
                store,
                &format!("encoder.blocks.{i}.attn.{kind}"),
                base.clone(),
                rank,
                spec.scale,
                rng,
            )?;
            *slot = Projection::Lora(lora);
        }
    }
    Ok(())
}

/// `Σ r·(d + k)` over every adapted projection of `encoder`.
pub fn trainable_param_count(encoder: &TransformerEncoder) -> usize {
    encoder.lora_layers().map(LoraLinear::trainable_count).sum()
}

/// Trainable encoder scalars found by walking the parameter store.
pub fn enumerate_trainable(encoder: &TransformerEncoder, store: &ParamStore) -> usize {
    encoder.param_ids().into_iter().filter(|&id| store.get(id).trainable).map(|id| store.value(id).numel()).sum()
}

pub fn lora_param_ids(encoder: &TransformerEncoder) -> Vec<ParamId> {
    encoder.lora_layers().flat_map(|l| [l.a, l.b]).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::encoder::EncoderConfig;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut store = ParamStore::new();
        let zero_b = LoraLinear::from_parts(
            &mut store,
            "a",
            Tensor::eye(2),
            t(&[1, 2], &[0.3, -0.7]),
            t(&[2, 1], &[0.0, 0.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(lora_forward(&store, &zero_b, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        let l = LoraLinear::from_parts(
            &mut store,
            "b",
            Tensor::eye(2),
            t(&[1, 2], &[0.0, 1.0]),
            t(&[2, 1], &[1.0, 0.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(lora_forward(&store, &l, &[3.0, 4.0]).unwrap(), vec![7.0, 4.0]);
        let l = LoraLinear::from_parts(
            &mut store,
            "c",
            Tensor::zeros(&[2, 2]),
            t(&[1, 2], &[1.0, 0.0]),
            t(&[2, 1], &[2.0, 0.0]),
            1.0,
        )
        .unwrap();
        assert_eq!(lora_forward(&store, &l, &[1.0, 1.0]).unwrap(), vec![2.0, 0.0]);
        assert!(matches!(lora_forward(&store, &l, &[1.0, 1.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn rank_must_stay_below_min_dimension() {
        let mut store = ParamStore::new();
        assert!(LoraLinear::from_parts(
            &mut store,
            "x",
            Tensor::eye(2),
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2, 2]),
            1.0
        )
        .is_err());
    }

    fn small_encoder(blocks: usize, dim: usize, store: &mut ParamStore) -> TransformerEncoder {
        let cfg = EncoderConfig { blocks, embed_dim: dim, heads: 2, patch_size: 4, mlp_ratio: 1.0 };
        TransformerEncoder::new(&cfg, store, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn injection_maps_ranks_per_block() {
        let mut store = ParamStore::new();
        let mut enc = small_encoder(2, 8, &mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        inject_vector_lora(&mut enc, &mut store, &LoraInjectionSpec::new(RankVector(vec![3, 1])), &mut rng).unwrap();
        let ranks: Vec<_> = enc.lora_layers().map(|l| l.rank).collect();
        assert_eq!(ranks, vec![3, 3, 1, 1]);
        for b in &enc.blocks {
            assert!(matches!(b.projection(ProjectionKind::K), Projection::Dense(_)));
            assert!(matches!(b.projection(ProjectionKind::O), Projection::Dense(_)));
        }
        assert_eq!(trainable_param_count(&enc), 2 * 3 * 16 + 2 * 16);
        assert_eq!(enumerate_trainable(&enc, &store), trainable_param_count(&enc));
    }

    #[test]
    fn injection_rejects_length_mismatch() {
        let mut store = ParamStore::new();
        let mut enc = small_encoder(2, 8, &mut store);
        let err = inject_vector_lora(
            &mut enc,
            &mut store,
            &LoraInjectionSpec::new(RankVector(vec![1, 1, 1])),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(RankVector(vec![2, 0]).validate(2).is_err());
        // Increasing ranks are allowed.
        assert!(RankVector(vec![1, 2]).validate(2).is_ok());
    }

    #[test]
    fn count_examples() {
        let mut store = ParamStore::new();
        let mut enc = small_encoder(1, 4, &mut store);
        assert_eq!(trainable_param_count(&enc), 0);
        let spec = LoraInjectionSpec {
            targets: [ProjectionKind::Q].into_iter().collect(),
            rank_vector: RankVector(vec![2]),
            scale: 1.0,
        };
        inject_vector_lora(&mut enc, &mut store, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(trainable_param_count(&enc), 16);
    }

    #[test]
    fn rank_vector_serializes_as_int_array() {
        let json = serde_json::to_string(&RankVector::decreasing_12()).unwrap();
        assert_eq!(json, "[14,14,12,12,10,10,8,8,8,8,8,8]");
        let spec: LoraInjectionSpec = serde_json::from_str(r#"{"rank_vector":[3,1]}"#).unwrap();
        assert_eq!(spec.targets, default_targets());
        assert!(serde_json::from_str::<LoraInjectionSpec>(r#"{"rank_vector":[3],"targets":["x"]}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn count_matches_enumeration(ranks in proptest::collection::vec(1usize..6, 3), mask in 1u8..16) {
            let mut store = ParamStore::new();
            let mut enc = small_encoder(3, 8, &mut store);
            let targets = ProjectionKind::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, k)| *k).collect();
            let spec = LoraInjectionSpec { targets, rank_vector: RankVector(ranks), scale: 1.0 };
            inject_vector_lora(&mut enc, &mut store, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            prop_assert_eq!(trainable_param_count(&enc), enumerate_trainable(&enc, &store));
        }
    }
}
