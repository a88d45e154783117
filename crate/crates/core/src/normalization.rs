//! Group Normalization and Weight Standardization.
//!
//! Both standardize a block of values with its mean and *sample* (unbiased,
//! `n - 1`) variance: GN over each `(sample, channel group)` of activations,
//! WS over each output channel's fan-in (`C_in × k × k`) of a convolution
//! kernel. A block with a single element has variance zero by definition.
//!
//! The pure functions [`group_normalize`] and [`weight_standardize`] run the
//! same tape operations the networks use, so they are the reference surface
//! for testing.

use mitodet_tensor::{CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Group count used when a layer does not override it: `max_groups` when the
/// channel count allows, otherwise the largest divisor of `channels` not
/// exceeding it (one channel per group for narrow layers).
pub fn default_groups(channels: usize, max_groups: usize) -> usize {
    if channels <= max_groups {
        return channels.max(1);
    }
    (1..=max_groups)
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Scalar> GnParams<T> {
    /// Identity affine (`gamma = 1`, `beta = 0`).
    pub fn identity(channels: usize, groups: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            groups,
            eps: DEFAULT_EPS,
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.gamma.len() != channels || self.beta.len() != channels {
            return Err(Error::invalid(format!(
                "group norm: {channels} channels but gamma/beta have {}/{}",
                self.gamma.len(),
                self.beta.len()
            )));
        }
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "group norm: {channels} channels not divisible into {} groups",
                self.groups
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid("group norm: eps must be positive"));
        }
        Ok(())
    }
}

/// Convolution kernels `C_out × C_in × k × k` plus the standardization epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T> {
    pub weights: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> KernelBank<T> {
    pub fn new(weights: Tensor<T>) -> Self {
        Self {
            weights,
            eps: DEFAULT_EPS,
        }
    }
}

/// Standardizes consecutive blocks of `block` elements of `x` into `out`.
/// Returns the per-block reciprocal standard deviations.
fn standardize_blocks<T: Scalar>(x: &[T], block: usize, eps: f64, out: &mut [T]) -> Vec<T> {
    let mut rstd = Vec::with_capacity(x.len() / block);
    let m = T::from_usize(block).unwrap();
    for (src, dst) in x.chunks(block).zip(out.chunks_mut(block)) {
        let mean = src.iter().copied().sum::<T>() / m;
        let ss: T = src.iter().map(|&v| (v - mean) * (v - mean)).sum();
        let var = if block > 1 {
            ss / (m - T::one())
        } else {
            T::zero()
        };
        let r = T::one() / (var + T::from_f64_lossy(eps)).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    rstd
}

/// Backward of [`standardize_blocks`] with respect to its input.
fn standardize_blocks_backward<T: Scalar>(
    xhat: &[T],
    dxhat: &[T],
    block: usize,
    rstd: &[T],
    dx: &mut [T],
) {
    let m = T::from_usize(block).unwrap();
    for (((xh, dxh), d), &r) in xhat
        .chunks(block)
        .zip(dxhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .zip(rstd)
    {
        if block == 1 {
            d[0] = T::zero();
            continue;
        }
        let sum_d: T = dxh.iter().copied().sum();
        let sum_dx: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let mean_d = sum_d / m;
        let k = sum_dx / (m - T::one());
        for ((o, &a), &b) in d.iter_mut().zip(dxh).zip(xh) {
            *o = r * (a - mean_d - b * k);
        }
    }
}

struct GroupNormOp<T> {
    groups: usize,
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for GroupNormOp<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let [n, c, h, w] = gy.shape();
        let hw = h * w;
        let gamma = inputs[1].data();
        let mut dgamma = Tensor::zeros(inputs[1].shape());
        let mut dbeta = Tensor::zeros(inputs[2].shape());
        let mut dxhat = Tensor::zeros(gy.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let g = &gy.data()[off..off + hw];
                let xh = &self.xhat.data()[off..off + hw];
                let (mut sg, mut sb) = (T::zero(), T::zero());
                for (&gv, &xv) in g.iter().zip(xh) {
                    sg = sg + gv * xv;
                    sb = sb + gv;
                }
                dgamma.data_mut()[ch] = dgamma.data()[ch] + sg;
                dbeta.data_mut()[ch] = dbeta.data()[ch] + sb;
                for (d, &gv) in dxhat.data_mut()[off..off + hw].iter_mut().zip(g) {
                    *d = gv * gamma[ch];
                }
            }
        }
        let block = c / self.groups * hw;
        let mut dx = Tensor::zeros(gy.shape());
        standardize_blocks_backward(
            self.xhat.data(),
            dxhat.data(),
            block,
            &self.rstd,
            dx.data_mut(),
        );
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

/// Records group normalization of `x` with per-channel `gamma`/`beta`
/// (each shaped `1 × C × 1 × 1`).
pub fn group_norm_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: f64,
) -> Result<Var> {
    let [n, c, h, w] = g.shape(x);
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!(
            "group norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if g.value(gamma).numel() != c || g.value(beta).numel() != c {
        return Err(Error::invalid(
            "group norm: gamma/beta length differs from channels",
        ));
    }
    let hw = h * w;
    let xv = g.value(x);
    let mut xhat = Tensor::zeros([n, c, h, w]);
    let rstd = standardize_blocks(xv.data(), c / groups * hw, eps, xhat.data_mut());
    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());
    let mut y = xhat.clone();
    for (plane, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
        let ch = plane % c;
        chunk.iter_mut().for_each(|v| *v = *v * gm[ch] + bt[ch]);
    }
    Ok(g.custom(
        &[x, gamma, beta],
        y,
        Box::new(GroupNormOp { groups, xhat, rstd }),
    ))
}

struct WeightStdOp<T> {
    what: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for WeightStdOp<T> {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let [_, cin, k, _] = gy.shape();
        let mut dw = Tensor::zeros(gy.shape());
        standardize_blocks_backward(
            self.what.data(),
            gy.data(),
            cin * k * k,
            &self.rstd,
            dw.data_mut(),
        );
        vec![Some(dw)]
    }
}

/// Records weight standardization of a `C_out × C_in × k × k` kernel.
pub fn weight_std_var<T: Scalar>(g: &mut Graph<T>, w: Var, eps: f64) -> Var {
    let [_, cin, k, _] = g.shape(w);
    let wv = g.value(w);
    let mut what = Tensor::zeros(wv.shape());
    let rstd = standardize_blocks(wv.data(), cin * k * k, eps, what.data_mut());
    g.custom(&[w], what.clone(), Box::new(WeightStdOp { what, rstd }))
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what}: non-finite input")))
    }
}

/// Group normalization of an `N × C × H × W` feature map.
pub fn group_normalize<T: Scalar>(x: &Tensor<T>, p: &GnParams<T>) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    p.validate(c)?;
    check_finite(x, "group norm")?;
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let gamma = g.input(Tensor::new([1, c, 1, 1], p.gamma.clone())?);
    let beta = g.input(Tensor::new([1, c, 1, 1], p.beta.clone())?);
    let y = group_norm_var(&mut g, xv, gamma, beta, p.groups, p.eps)?;
    Ok(g.value(y).clone())
}

/// Standardizes each output-channel kernel to zero mean and unit sample variance.
pub fn weight_standardize<T: Scalar>(bank: &KernelBank<T>) -> Result<KernelBank<T>> {
    check_finite(&bank.weights, "weight standardization")?;
    let [_, _, kh, kw] = bank.weights.shape();
    if kh == 0 || kh != kw {
        return Err(Error::invalid(
            "weight standardization: kernels must be square, k >= 1",
        ));
    }
    let mut g = Graph::inference();
    let w = g.input(bank.weights.clone());
    let y = weight_std_var(&mut g, w, bank.eps);
    Ok(KernelBank {
        weights: g.value(y).clone(),
        eps: bank.eps,
    })
}

/// Group-normalization layer with learned per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: store.add(
                &format!("{name}.gamma"),
                Tensor::full([1, channels, 1, 1], T::one()),
            )?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]))?,
            groups,
            eps: DEFAULT_EPS,
        })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        group_norm_var(g, x, gamma, beta, self.groups, self.eps)
    }
}
