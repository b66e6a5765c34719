use guidnoise_tensor::{conv2d, Tensor};

use super::params::{Init, ParamId, ParamStore, Scope};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::FanIn(in_dim) };
        Ok(Self {
            weight: s.param("weight", &[out_dim, in_dim], init)?,
            bias: s.param("bias", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(x.linear(p.tensor(self.weight), p.tensor(self.bias))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: ParamId,
    pad: usize,
    stride: usize,
}

impl Conv {
    pub fn new(s: &mut Scope, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[out_ch, in_ch, kernel, kernel], Init::FanIn(in_ch * kernel * kernel))?,
            bias: s.param("bias", &[out_ch], Init::Zeros)?,
            pad: kernel / 2,
            stride,
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(x, p.tensor(self.weight), Some(p.tensor(self.bias)), self.stride, self.pad)?)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub(crate) fn num_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupNorm {
    weight: ParamId,
    bias: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(s: &mut Scope, channels: usize, max_groups: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[channels], Init::Ones)?,
            bias: s.param("bias", &[channels], Init::Zeros)?,
            groups: num_groups(channels, max_groups),
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(guidnoise_tensor::group_norm(x, p.tensor(self.weight), p.tensor(self.bias), self.groups, 1e-5)?)
    }
}

/// Pre-activation residual block with an additive conditioning vector:
/// `skip(x) + conv2(silu(norm2(conv1(silu(norm1(x))) + proj(silu(cond)))))`.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    cond_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(s: &mut Scope, in_ch: usize, out_ch: usize, cond_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut s.pp("norm1"), in_ch, groups)?,
            conv1: Conv::new(&mut s.pp("conv1"), in_ch, out_ch, 3, 1)?,
            cond_proj: Linear::new(&mut s.pp("cond"), cond_dim, out_ch, false)?,
            norm2: GroupNorm::new(&mut s.pp("norm2"), out_ch, groups)?,
            conv2: Conv::new(&mut s.pp("conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch {
                Some(Conv::new(&mut s.pp("skip"), in_ch, out_ch, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x)?.silu())?;
        let h = h.add_channel(&self.cond_proj.forward(p, &cond.silu())?)?;
        let h = self.conv2.forward(p, &self.norm2.forward(p, &h)?.silu())?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(p, x)?,
            None => x.clone(),
        };
        Ok(skip.add(&h)?)
    }
}
