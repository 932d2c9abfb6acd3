use rand::Rng;

use crate::autograd::{Binding, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Dense layer `y = x Wᵀ + b` with `W: (out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        trainable: bool,
        in_features: usize,
        out_features: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.normal(format!("{name}.weight"), group, trainable, &[out_features, in_features], std, rng);
        let bias = bias.then(|| store.insert(format!("{name}.bias"), group, trainable, Tensor::zeros(&[out_features])));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.linear(bind.var(self.weight), self.bias.map(|b| bind.var(b)))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = store.normal(
            format!("{name}.weight"),
            group,
            true,
            &[out_ch, in_ch, kernel, kernel],
            gain / fan_in.sqrt(),
            rng,
        );
        let bias = store.insert(format!("{name}.bias"), group, true, Tensor::zeros(&[out_ch]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.conv2d(bind.var(self.weight), Some(bind.var(self.bias)), self.stride, self.pad)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Affine layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, trainable: bool, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), group, trainable, Tensor::full(&[dim], 1.0));
        let beta = store.insert(format!("{name}.beta"), group, trainable, Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<'g>(&self, bind: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(bind.var(self.gamma), bind.var(self.beta), 1e-6)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
