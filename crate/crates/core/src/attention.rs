//! Channel and spatial attention (CBAM).

use mitodet_tensor::{Conv2dSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, normal_init};

pub const DEFAULT_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

/// Shared two-layer perceptron `C -> C/r -> C`, stored as 1×1 kernels.
#[derive(Clone, Debug)]
pub struct ChannelAttentionParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub reduction: usize,
}

impl<T: Scalar> ChannelAttentionParams<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(format!(
                "channel count {channels} not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w1: Tensor::zeros([hidden, channels, 1, 1]),
            b1: Tensor::zeros([1, hidden, 1, 1]),
            w2: Tensor::zeros([channels, hidden, 1, 1]),
            b2: Tensor::zeros([1, channels, 1, 1]),
            reduction,
        })
    }

    pub fn random<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction)?;
        let hidden = channels / reduction;
        p.w1 = kaiming_normal([hidden, channels, 1, 1], rng);
        p.w2 = kaiming_normal([channels, hidden, 1, 1], rng);
        p.b1 = normal_init([1, hidden, 1, 1], 0.1, rng);
        p.b2 = normal_init([1, channels, 1, 1], 0.1, rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }
}

/// One 7×7 kernel mapping [mean; max] to a single map.
#[derive(Clone, Debug)]
pub struct SpatialAttentionParams<T> {
    pub kernel: Tensor<T>,
    pub bias: T,
}

impl<T: Scalar> SpatialAttentionParams<T> {
    pub fn zeros() -> Self {
        Self {
            kernel: Tensor::zeros([1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
            bias: T::zero(),
        }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            kernel: kaiming_normal([1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], rng),
            bias: T::zero(),
        }
    }
}

/// Parameter handles of the channel branch inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct ChannelVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialVars {
    pub kernel: Var,
    pub bias: Var,
}

/// σ(MLP(avg) + MLP(max)), shape `[N, C, 1, 1]`.
pub fn channel_weights_var<T: Scalar>(g: &mut Graph<T>, x: Var, p: ChannelVars) -> Result<Var> {
    let c = g.shape(x)[1];
    if g.shape(p.w1)[1] != c {
        return Err(Error::invalid(format!(
            "attention expects {} channels, got {c}",
            g.shape(p.w1)[1]
        )));
    }
    let pw = Conv2dSpec::new(1, 0);
    let mlp = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let h = g.conv2d(v, p.w1, Some(p.b1), pw)?;
        let h = g.relu(h);
        Ok(g.conv2d(h, p.w2, Some(p.b2), pw)?)
    };
    let avg = g.global_avg_pool(x);
    let max = g.global_max_pool(x);
    let a = mlp(g, avg)?;
    let m = mlp(g, max)?;
    let s = g.add(a, m)?;
    Ok(g.sigmoid(s))
}

/// σ(conv7×7([mean_c; max_c])), shape `[N, 1, H, W]`.
pub fn spatial_weights_var<T: Scalar>(g: &mut Graph<T>, x: Var, p: SpatialVars) -> Result<Var> {
    let mean = g.channel_mean(x);
    let max = g.channel_max(x);
    let cat = g.concat_channels(&[mean, max])?;
    let z = g.conv2d(
        cat,
        p.kernel,
        Some(p.bias),
        Conv2dSpec::same(SPATIAL_KERNEL),
    )?;
    Ok(g.sigmoid(z))
}

/// Channel attention then spatial attention on the reweighted map.
pub fn cbam_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cp: ChannelVars,
    sp: SpatialVars,
) -> Result<Var> {
    let mc = channel_weights_var(g, x, cp)?;
    let m1 = g.mul(x, mc)?;
    let ms = spatial_weights_var(g, m1, sp)?;
    Ok(g.mul(m1, ms)?)
}

fn check_finite<T: Scalar>(m: &Tensor<T>) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::invalid("attention input contains non-finite values"))
    }
}

fn channel_inputs<T: Scalar>(g: &mut Graph<T>, p: &ChannelAttentionParams<T>) -> ChannelVars {
    ChannelVars {
        w1: g.input(p.w1.clone()),
        b1: g.input(p.b1.clone()),
        w2: g.input(p.w2.clone()),
        b2: g.input(p.b2.clone()),
    }
}

fn spatial_inputs<T: Scalar>(g: &mut Graph<T>, p: &SpatialAttentionParams<T>) -> SpatialVars {
    SpatialVars {
        kernel: g.input(p.kernel.clone()),
        bias: g.input(Tensor::full([1, 1, 1, 1], p.bias)),
    }
}

/// Per-sample channel weights, `[N, C, 1, 1]`, each in (0, 1).
pub fn channel_attention<T: Scalar>(
    m: &Tensor<T>,
    p: &ChannelAttentionParams<T>,
) -> Result<Tensor<T>> {
    check_finite(m)?;
    let mut g = Graph::inference();
    let x = g.input(m.clone());
    let vars = channel_inputs(&mut g, p);
    let w = channel_weights_var(&mut g, x, vars)?;
    Ok(g.value(w).clone())
}

/// Per-sample spatial weights, `[N, 1, H, W]`, each in (0, 1).
pub fn spatial_attention<T: Scalar>(
    m: &Tensor<T>,
    p: &SpatialAttentionParams<T>,
) -> Result<Tensor<T>> {
    check_finite(m)?;
    let mut g = Graph::inference();
    let x = g.input(m.clone());
    let vars = spatial_inputs(&mut g, p);
    let w = spatial_weights_var(&mut g, x, vars)?;
    Ok(g.value(w).clone())
}

pub fn apply_cbam<T: Scalar>(
    m: &Tensor<T>,
    cp: &ChannelAttentionParams<T>,
    sp: &SpatialAttentionParams<T>,
) -> Result<Tensor<T>> {
    check_finite(m)?;
    let mut g = Graph::inference();
    let x = g.input(m.clone());
    let cv = channel_inputs(&mut g, cp);
    let sv = spatial_inputs(&mut g, sp);
    let y = cbam_var(&mut g, x, cv, sv)?;
    Ok(g.value(y).clone())
}

/// Largest divisor of `channels` not exceeding `reduction`.
pub fn effective_reduction(channels: usize, reduction: usize) -> usize {
    (1..=reduction.max(1).min(channels))
        .rev()
        .find(|r| channels.is_multiple_of(*r))
        .unwrap_or(1)
}

/// Trainable CBAM block registered in a parameter store.
#[derive(Clone, Debug)]
pub struct Cbam {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    kernel: ParamId,
    bias: ParamId,
}

impl Cbam {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let r = effective_reduction(channels, reduction);
        let cp = ChannelAttentionParams::<T>::zeros(channels, r)?;
        let hidden = channels / r;
        Ok(Self {
            w1: store.add(
                &format!("{name}.mlp1.weight"),
                kaiming_normal([hidden, channels, 1, 1], rng),
            )?,
            b1: store.add(&format!("{name}.mlp1.bias"), cp.b1)?,
            w2: store.add(
                &format!("{name}.mlp2.weight"),
                kaiming_normal([channels, hidden, 1, 1], rng),
            )?,
            b2: store.add(&format!("{name}.mlp2.bias"), cp.b2)?,
            kernel: store.add(
                &format!("{name}.spatial.weight"),
                kaiming_normal([1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], rng),
            )?,
            bias: store.add(&format!("{name}.spatial.bias"), Tensor::zeros([1, 1, 1, 1]))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let cv = ChannelVars {
            w1: g.param(store, self.w1),
            b1: g.param(store, self.b1),
            w2: g.param(store, self.w2),
            b2: g.param(store, self.b2),
        };
        let sv = SpatialVars {
            kernel: g.param(store, self.kernel),
            bias: g.param(store, self.bias),
        };
        cbam_var(g, x, cv, sv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_half_weights() {
        let m = Tensor::<f64>::zeros([2, 4, 3, 3]);
        let cp = ChannelAttentionParams::zeros(4, 2).unwrap();
        let w = channel_attention(&m, &cp).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.5));
        let s = spatial_attention(&m, &SpatialAttentionParams::zeros()).unwrap();
        assert_eq!(s.shape(), [2, 1, 3, 3]);
        assert!(s.data().iter().all(|&v| v == 0.5));
        let out = apply_cbam(&m, &cp, &SpatialAttentionParams::zeros()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_reduction_and_mismatch() {
        assert!(ChannelAttentionParams::<f32>::zeros(6, 4).is_err());
        let cp = ChannelAttentionParams::<f32>::zeros(8, 2).unwrap();
        assert!(channel_attention(&Tensor::zeros([1, 4, 2, 2]), &cp).is_err());
    }

    #[test]
    fn effective_reduction_divides() {
        assert_eq!(effective_reduction(256, 16), 16);
        assert_eq!(effective_reduction(8, 16), 8);
        assert_eq!(effective_reduction(24, 16), 12);
    }
}
