//! Parameterized layers composed from tape operations.

use attn_align_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// 3x3 (or k x k) convolution with bias, He-initialized.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[c_out, c_in, kernel, kernel], std),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        Ok(g.tape.conv2d(x, w, Some(b), self.stride, self.padding)?)
    }
}

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[d_in, d_out], std))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.matmul(x, w)?;
        Ok(g.tape.add_bias(y, b)?)
    }
}

/// Layer normalization over the last dimension with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let n = g.tape.layer_norm(x)?;
        let s = g.tape.mul_cols(n, gamma)?;
        Ok(g.tape.add_bias(s, beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(crate::Error::config(format!(
                "{name}: {groups} groups do not divide {channels} channels"
            )));
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(GroupNorm { groups, gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let n = g.tape.group_norm(x, self.groups)?;
        Ok(g.tape.channel_affine(n, gamma, beta)?)
    }
}

/// conv -> GroupNorm -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv::new(store, &format!("{name}.conv"), c_in, c_out, 3, stride, 1, rng)?;
        let norm = GroupNorm::new(store, &format!("{name}.gn"), c_out, groups)?;
        Ok(ConvBlock { conv, norm })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(g.tape.relu(y)?)
    }
}

/// `[HW, C]` rows-of-positions layout to channel-first `[C, H, W]`.
pub fn to_chw<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = g.tape.transpose(x)?;
    let c = g.tape.shape(t)[0];
    Ok(g.tape.reshape(t, &[c, h, w])?)
}

/// Channel-first `[C, H, W]` to `[HW, C]`.
pub fn to_hwc<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let flat = g.tape.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(g.tape.transpose(flat)?)
}
