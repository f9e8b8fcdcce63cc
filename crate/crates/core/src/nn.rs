//! Layer building blocks shared by the image and graph stages.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.init(
            rng,
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            init,
        );
        let bias = store.init(rng, format!("{name}.bias"), &[out_channels], fan_in, Init::Zeros);
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// Convolution plus bias, no activation.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.param(self.weight), self.stride, self.pad)?
            .add_channel_bias(p.param(self.bias))
    }
}

/// Mean-aggregation graph convolution with a separate self transform:
/// `relu(W_self X + W_neigh X Â^T + b)` where `Â` row-averages each
/// node's closed neighborhood.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        // Two summed branches: halve each one's variance.
        let fan_in = 2 * in_channels;
        let shape = [out_channels, in_channels];
        GcnLayer {
            w_self: store.init(rng, format!("{name}.w_self"), &shape, fan_in, Init::He),
            w_neigh: store.init(rng, format!("{name}.w_neigh"), &shape, fan_in, Init::He),
            bias: store.init(rng, format!("{name}.bias"), &[out_channels], fan_in, Init::Zeros),
            in_channels,
            out_channels,
        }
    }

    /// `x` is `C_in x M`; `agg` is the `M x M` mean-aggregation matrix.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>, agg: Var<'t>) -> Result<Var<'t>> {
        check_channels("gcn", self.in_channels, &x)?;
        let neigh = x.matmul(agg, false, true)?;
        let own = p.param(self.w_self).matmul(x, false, false)?;
        let msg = p.param(self.w_neigh).matmul(neigh, false, false)?;
        Ok(own.add(msg)?.add_channel_bias(p.param(self.bias))?.relu())
    }
}

/// Per-node affine map `W X + b`.
#[derive(Clone, Debug)]
pub struct NodeLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl NodeLinear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        init: Init,
    ) -> Self {
        NodeLinear {
            weight: store.init(
                rng,
                format!("{name}.weight"),
                &[out_channels, in_channels],
                in_channels,
                init,
            ),
            bias: store.init(rng, format!("{name}.bias"), &[out_channels], in_channels, Init::Zeros),
            in_channels,
            out_channels,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("linear", self.in_channels, &x)?;
        p.param(self.weight)
            .matmul(x, false, false)?
            .add_channel_bias(p.param(self.bias))
    }
}

/// Single-head scaled dot-product attention across nodes, added residually.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let shape = [channels, channels];
        SelfAttention {
            query: store.init(rng, format!("{name}.query"), &shape, channels, Init::Lecun),
            key: store.init(rng, format!("{name}.key"), &shape, channels, Init::Lecun),
            value: store.init(rng, format!("{name}.value"), &shape, channels, Init::Lecun),
            channels,
        }
    }

    /// `x + V softmax(Q^T K / sqrt(C))^T` for `x` of shape `C x M`.
    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("attention", self.channels, &x)?;
        let q = p.param(self.query).matmul(x, false, false)?;
        let k = p.param(self.key).matmul(x, false, false)?;
        let v = p.param(self.value).matmul(x, false, false)?;
        let scores = q
            .matmul(k, true, false)?
            .scale(1.0 / (self.channels as f64).sqrt());
        let weights = scores.softmax_rows()?;
        x.add(v.matmul(weights, false, true)?)
    }
}

pub(crate) fn check_channels(layer: &str, expected: usize, x: &Var<'_>) -> Result<()> {
    let shape = x.shape();
    if shape.first() != Some(&expected) {
        return Err(Error::Shape(format!(
            "{layer}: expected {expected} input channels, got {shape:?}"
        )));
    }
    Ok(())
}
