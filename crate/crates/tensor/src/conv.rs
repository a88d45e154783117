//! im2col-based 2-D convolution kernels (cross-correlation, zero padding).

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    /// Padding that keeps the spatial size for odd kernels at stride 1.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
        }
    }

    fn is_pointwise(&self, k: usize) -> bool {
        k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv2d_output_side(input: usize, kernel: usize, spec: Conv2dSpec) -> usize {
    (input + 2 * spec.pad - kernel) / spec.stride + 1
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Geometry {
    let [_, c, h, wd] = x.shape();
    let k = w.shape()[2];
    Geometry {
        c,
        h,
        w: wd,
        k,
        ho: conv2d_output_side(h, k, spec),
        wo: conv2d_output_side(wd, k, spec),
        spec,
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Tensor<T> {
    let g = geometry(x, w, spec);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let ckk = g.c * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let mut y = Tensor::zeros([n, cout, g.ho, g.wo]);
    let pointwise = spec.is_pointwise(g.k);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw_out]
    };
    for i in 0..n {
        let xs = x.sample(i);
        let b: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let ys = y.sample_mut(i);
        T::gemm(
            cout,
            ckk,
            hw_out,
            T::one(),
            w.data(),
            false,
            b,
            false,
            T::zero(),
            ys,
        );
        if let Some(bias) = bias {
            for (co, chunk) in ys.chunks_mut(hw_out).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    y
}

/// Returns `(dx, dw, dbias)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
    spec: Conv2dSpec,
    want: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = geometry(x, w, spec);
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let ckk = g.c * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let pointwise = spec.is_pointwise(g.k);

    let mut dx = want[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = want[1].then(|| Tensor::zeros(w.shape()));
    let db = want[2].then(|| {
        let mut b = Tensor::zeros([1, cout, 1, 1]);
        for i in 0..n {
            for (co, chunk) in grad_y.sample(i).chunks(hw_out).enumerate() {
                let s: T = chunk.iter().copied().sum();
                b.data_mut()[co] = b.data()[co] + s;
            }
        }
        b
    });

    let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * hw_out }];
    let mut dcols = vec![
        T::zero();
        if want[0] && !pointwise {
            ckk * hw_out
        } else {
            0
        }
    ];
    for i in 0..n {
        let gy = grad_y.sample(i);
        if let Some(dw) = dw.as_mut() {
            let b: &[T] = if pointwise {
                x.sample(i)
            } else {
                im2col(x.sample(i), &g, &mut cols);
                &cols
            };
            T::gemm(
                cout,
                hw_out,
                ckk,
                T::one(),
                gy,
                false,
                b,
                true,
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            if pointwise {
                T::gemm(
                    ckk,
                    cout,
                    hw_out,
                    T::one(),
                    w.data(),
                    true,
                    gy,
                    false,
                    T::zero(),
                    dx.sample_mut(i),
                );
            } else {
                T::gemm(
                    ckk,
                    cout,
                    hw_out,
                    T::one(),
                    w.data(),
                    true,
                    gy,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, &g, dx.sample_mut(i));
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape();
        let [co, _, k, _] = w.shape();
        let ho = conv2d_output_side(h, k, spec);
        let wo = conv2d_output_side(wd, k, spec);
        Tensor::from_fn([n, co, ho, wo], |[b, o, oy, ox]| {
            let mut s = 0.0;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.at([b, ci, iy as usize, ix as usize]) * w.at([o, ci, ky, kx]);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn matches_direct_correlation() {
        for (k, stride, pad) in [
            (3, 1, 1),
            (3, 2, 1),
            (1, 1, 0),
            (1, 2, 0),
            (7, 2, 3),
            (2, 2, 0),
        ] {
            let spec = Conv2dSpec::new(stride, pad);
            let x = Tensor::from_fn([2, 3, 9, 8], |[a, b, c, d]| {
                ((a * 7 + b * 5 + c * 3 + d) as f64 * 0.37).sin()
            });
            let w = Tensor::from_fn([4, 3, k, k], |[a, b, c, d]| {
                ((a * 11 + b * 7 + c * 3 + d) as f64 * 0.53).cos()
            });
            let y = conv2d_forward(&x, &w, None, spec);
            let want = naive(&x, &w, spec);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn output_side_arithmetic() {
        assert_eq!(conv2d_output_side(224, 7, Conv2dSpec::new(2, 3)), 112);
        assert_eq!(conv2d_output_side(7, 3, Conv2dSpec::new(2, 1)), 4);
        assert_eq!(conv2d_output_side(4, 3, Conv2dSpec::new(2, 1)), 2);
    }
}
