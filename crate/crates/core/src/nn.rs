//! Layer building blocks shared by the detector and the classifier.

use mitodet_tensor::{Conv2dSpec, CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::normalization::{weight_std_var, DEFAULT_EPS};

/// He-normal initialization for a `cout × cin × k × k` kernel.
pub fn kaiming_normal<T: Scalar, R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(z * std)
    })
}

/// Normal initialization with a fixed standard deviation.
pub fn normal_init<T: Scalar, R: Rng>(shape: [usize; 4], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(z * std)
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    /// Standardize the kernel before every use.
    pub standardize: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvOptions {
    pub stride: usize,
    pub bias: bool,
    pub standardize: bool,
    /// Weight init std; `None` means He-normal.
    pub init_std: Option<f64>,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            bias: false,
            standardize: false,
            init_std: None,
        }
    }
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: ConvOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let w = match opts.init_std {
            Some(std) => normal_init(shape, std, rng),
            None => kaiming_normal(shape, rng),
        };
        let weight = store.add(&format!("{name}.weight"), w)?;
        let bias = if opts.bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spec: Conv2dSpec::new(opts.stride, kernel / 2),
            standardize: opts.standardize,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut w = g.param(store, self.weight);
        if self.standardize {
            w = weight_std_var(g, w, DEFAULT_EPS);
        }
        let b = self.bias.map(|b| g.param(store, b));
        Ok(g.conv2d(x, w, b, self.spec)?)
    }
}

/// Batch normalization with running statistics (biased batch variance for
/// normalization, unbiased for the running estimate).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
    eps: f64,
}

struct BatchNormTrainOp<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for BatchNormTrainOp<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let [n, c, h, w] = gy.shape();
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let gamma = inputs[1].data();
        let mut dx = Tensor::zeros(gy.shape());
        let mut dgamma = Tensor::zeros([1, c, 1, 1]);
        let mut dbeta = Tensor::zeros([1, c, 1, 1]);
        for ch in 0..c {
            let (mut sd, mut sdx) = (T::zero(), T::zero());
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for (&g, &xh) in gy.data()[off..off + hw]
                    .iter()
                    .zip(&self.xhat.data()[off..off + hw])
                {
                    sd = sd + g;
                    sdx = sdx + g * xh;
                }
            }
            dgamma.data_mut()[ch] = sdx;
            dbeta.data_mut()[ch] = sd;
            let k = gamma[ch] * self.rstd[ch] / m;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for p in off..off + hw {
                    let v = m * gy.data()[p] - sd - self.xhat.data()[p] * sdx;
                    dx.data_mut()[p] = k * v;
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

struct BatchNormEvalOp<T> {
    scale: Vec<T>,
    xhat: Tensor<T>,
}

impl<T: Scalar> CustomOp<T> for BatchNormEvalOp<T> {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _out: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let [n, c, h, w] = gy.shape();
        let hw = h * w;
        let mut dx = gy.clone();
        let mut dgamma = Tensor::zeros([1, c, 1, 1]);
        let mut dbeta = Tensor::zeros([1, c, 1, 1]);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for p in off..off + hw {
                    let g = gy.data()[p];
                    dgamma.data_mut()[ch] = dgamma.data()[ch] + g * self.xhat.data()[p];
                    dbeta.data_mut()[ch] = dbeta.data()[ch] + g;
                    dx.data_mut()[p] = g * self.scale[ch];
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let s = [1, channels, 1, 1];
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(s, T::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(s))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(s))?,
            running_var: store
                .add_buffer(&format!("{name}.running_var"), Tensor::full(s, T::one()))?,
            momentum: 0.1,
            eps: DEFAULT_EPS,
        })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let [n, c, h, w] = g.shape(x);
        let hw = h * w;
        let xv = g.value(x).clone();
        let (gm, bt) = (g.value(gamma).clone(), g.value(beta).clone());
        let eps = T::from_f64_lossy(self.eps);
        let mut xhat = Tensor::zeros(xv.shape());
        let mut y = Tensor::zeros(xv.shape());
        if g.is_training() {
            let m = T::from_usize(n * hw).unwrap();
            let mut rstd = vec![T::zero(); c];
            let mut new_mean = store.get(self.running_mean).clone();
            let mut new_var = store.get(self.running_var).clone();
            let mom = T::from_f64_lossy(self.momentum);
            for ch in 0..c {
                let mut sum = T::zero();
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    sum = sum + xv.data()[off..off + hw].iter().copied().sum::<T>();
                }
                let mean = sum / m;
                let mut ss = T::zero();
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    ss = ss
                        + xv.data()[off..off + hw]
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<T>();
                }
                let var = ss / m;
                let r = T::one() / (var + eps).sqrt();
                rstd[ch] = r;
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for p in off..off + hw {
                        let xh = (xv.data()[p] - mean) * r;
                        xhat.data_mut()[p] = xh;
                        y.data_mut()[p] = xh * gm.data()[ch] + bt.data()[ch];
                    }
                }
                let unbiased = if n * hw > 1 { ss / (m - T::one()) } else { var };
                let rm = &mut new_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean;
                let rv = &mut new_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
            }
            g.push_buffer_update(self.running_mean, new_mean);
            g.push_buffer_update(self.running_var, new_var);
            Ok(g.custom(
                &[x, gamma, beta],
                y,
                Box::new(BatchNormTrainOp { xhat, rstd }),
            ))
        } else {
            let rm = store.get(self.running_mean).data();
            let rv = store.get(self.running_var).data();
            let mut scale = vec![T::zero(); c];
            for ch in 0..c {
                let r = T::one() / (rv[ch] + eps).sqrt();
                scale[ch] = r * gm.data()[ch];
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for p in off..off + hw {
                        let xh = (xv.data()[p] - rm[ch]) * r;
                        xhat.data_mut()[p] = xh;
                        y.data_mut()[p] = xh * gm.data()[ch] + bt.data()[ch];
                    }
                }
            }
            Ok(g.custom(
                &[x, gamma, beta],
                y,
                Box::new(BatchNormEvalOp { scale, xhat }),
            ))
        }
    }
}

/// Applies running-statistic updates recorded during a training pass.
pub fn apply_buffer_updates<T: Scalar>(g: &mut Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
    for (id, v) in g.take_buffer_updates() {
        store.set(id, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn([4, 2, 3, 3], |[_, c, _, _]| {
            rng.random_range(-1.0..1.0) + 5.0 * c as f64
        });
        let mut g = Graph::training();
        let xv = g.input(x);
        let y = bn.forward(&mut g, &store, xv).unwrap();
        let yv = g.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..9).map(move |p| (n, p)))
                .map(|(n, p)| yv.at([n, ch, p / 3, p % 3]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
        apply_buffer_updates(&mut g, &mut store).unwrap();
        let rm = store.get(store.id("bn.running_mean").unwrap());
        assert!((rm.data()[1] - 0.5).abs() < 0.1, "{:?}", rm.data());
    }

    #[test]
    fn standardized_conv_uses_normalized_kernel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::new(
            &mut store,
            "c",
            2,
            3,
            3,
            ConvOptions {
                standardize: true,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        // Scaling the raw kernel must not change the output.
        let x = Tensor::from_fn([1, 2, 5, 5], |[_, c, y, x]| (c + y * x) as f64 * 0.1);
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::inference();
            let xv = g.input(x.clone());
            let y = conv.forward(&mut g, store, xv).unwrap();
            g.value(y).clone()
        };
        let a = run(&store);
        let w = store.get(conv.weight).scale(7.5);
        store.set(conv.weight, w).unwrap();
        let b = run(&store);
        for (p, q) in a.data().iter().zip(b.data()) {
            // eps makes the invariance approximate.
            assert!((p - q).abs() < 1e-3 * p.abs().max(1.0));
        }
    }
}
