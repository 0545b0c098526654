//! Layers with explicit backward passes. Activations use a channel-major
//! `(C, N, H, W)` layout so a convolution is a single `W · im2col(x)` product
//! whose result is already in that layout.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use super::real::Real;
use crate::rng::Rng;

/// 3x3 convolution with padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<R: Real> {
    /// `(c_out, c_in * 9)`, column index `ci * 9 + ky * 3 + kx`.
    pub weight: Array2<R>,
    pub bias: Array1<R>,
    pub stride: usize,
}

pub struct ConvCache<R: Real> {
    cols: Array2<R>,
    in_shape: [usize; 4],
}

pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

impl<R: Real> Conv<R> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Conv {
            weight: Array2::from_shape_fn((c_out, c_in * 9), |_| R::lit(normal.sample(rng))),
            bias: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn c_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array4<R>) -> (Array4<R>, ConvCache<R>) {
        let [c, n, h, w] = shape4(x);
        assert_eq!(c, self.c_in(), "conv input channels");
        let (ho, wo) = (conv_out_len(h, self.stride), conv_out_len(w, self.stride));
        let cols = im2col(x, self.stride);
        let mut y = self.weight.dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let y = y
            .into_shape_with_order((self.c_out(), n, ho, wo))
            .expect("conv output shape");
        (
            y,
            ConvCache {
                cols,
                in_shape: [c, n, h, w],
            },
        )
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        dy: &Array4<R>,
        cache: &ConvCache<R>,
        grad: &mut Conv<R>,
        need_input_grad: bool,
    ) -> Option<Array4<R>> {
        let [co, n, ho, wo] = shape4(dy);
        let dy2 = as_matrix(dy, co, n * ho * wo);
        ndarray::linalg::general_mat_mul(R::one(), &dy2, &cache.cols.t(), R::one(), &mut grad.weight);
        grad.bias += &dy2.sum_axis(Axis(1));
        if !need_input_grad {
            return None;
        }
        let dcols = self.weight.t().dot(&dy2);
        Some(col2im(&dcols, cache.in_shape, self.stride))
    }
}

fn shape4<R>(x: &Array4<R>) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

fn as_matrix<R: Real>(x: &Array4<R>, rows: usize, cols: usize) -> ArrayView2<'_, R> {
    x.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous activation")
}

pub fn im2col<R: Real>(x: &Array4<R>, stride: usize) -> Array2<R> {
    let [c, n, h, w] = shape4(x);
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let ncols = n * ho * wo;
    let mut cols = Array2::<R>::zeros((c * 9, ncols));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncols;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xbase = ((ci * n + ni) * h + iy as usize) * w;
                        let obase = row + (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                cs[obase + ox] = xs[xbase + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<R: Real>(cols: &Array2<R>, in_shape: [usize; 4], stride: usize) -> Array4<R> {
    let [c, n, h, w] = in_shape;
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let ncols = n * ho * wo;
    let mut x = Array4::<R>::zeros((c, n, h, w));
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncols;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xbase = ((ci * n + ni) * h + iy as usize) * w;
                        let obase = row + (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                xs[xbase + ix as usize] += cs[obase + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace<R: Real>(x: &mut Array4<R>) {
    x.mapv_inplace(|v| v.max(R::zero()));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<R: Real>(dy: &mut Array4<R>, y: &Array4<R>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= R::zero() {
            *d = R::zero();
        }
    });
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<R: Real> {
    /// `(out, in)`
    pub weight: Array2<R>,
    pub bias: Array1<R>,
}

impl<R: Real> Linear<R> {
    pub fn new(d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Linear {
            weight: Array2::from_shape_fn((d_out, d_in), |_| R::lit(normal.sample(rng))),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<R>) -> Array2<R> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn backward(&self, dy: &Array2<R>, x: &Array2<R>, grad: &mut Linear<R>) -> Array2<R> {
        ndarray::linalg::general_mat_mul(R::one(), &dy.t(), x, R::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

/// 2x2 average pooling over `(C, N, H, W)` flattened to `(N, C * H/2 * W/2)`.
pub fn avgpool2_flatten<R: Real>(x: &Array4<R>) -> Array2<R> {
    let [c, n, h, w] = shape4(x);
    let (ph, pw) = (h / 2, w / 2);
    let quarter = R::lit(0.25);
    let mut out = Array2::<R>::zeros((n, c * ph * pw));
    for ci in 0..c {
        for ni in 0..n {
            for y in 0..ph {
                for xx in 0..pw {
                    let s = x[[ci, ni, 2 * y, 2 * xx]]
                        + x[[ci, ni, 2 * y + 1, 2 * xx]]
                        + x[[ci, ni, 2 * y, 2 * xx + 1]]
                        + x[[ci, ni, 2 * y + 1, 2 * xx + 1]];
                    out[[ni, (ci * ph + y) * pw + xx]] = s * quarter;
                }
            }
        }
    }
    out
}

pub fn avgpool2_flatten_backward<R: Real>(dy: &Array2<R>, in_shape: [usize; 4]) -> Array4<R> {
    let [c, n, h, w] = in_shape;
    let (ph, pw) = (h / 2, w / 2);
    let quarter = R::lit(0.25);
    let mut dx = Array4::<R>::zeros((c, n, h, w));
    for ci in 0..c {
        for ni in 0..n {
            for y in 0..ph {
                for xx in 0..pw {
                    let g = dy[[ni, (ci * ph + y) * pw + xx]] * quarter;
                    dx[[ci, ni, 2 * y, 2 * xx]] = g;
                    dx[[ci, ni, 2 * y + 1, 2 * xx]] = g;
                    dx[[ci, ni, 2 * y, 2 * xx + 1]] = g;
                    dx[[ci, ni, 2 * y + 1, 2 * xx + 1]] = g;
                }
            }
        }
    }
    dx
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
pub fn l2_normalize_rows<R: Real>(x: &Array2<R>) -> (Array2<R>, Array1<R>) {
    let eps = R::lit(1e-12);
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(eps));
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

pub fn l2_normalize_rows_backward<R: Real>(
    dy: &Array2<R>,
    y: &Array2<R>,
    norms: &Array1<R>,
) -> Array2<R> {
    let mut dx = dy.clone();
    for ((mut row, yr), (&nrm, dyr)) in dx
        .outer_iter_mut()
        .zip(y.outer_iter())
        .zip(norms.iter().zip(dy.outer_iter()))
    {
        let proj = yr.dot(&dyr);
        row.zip_mut_with(&yr, |d, &v| *d = (*d - v * proj) / nrm);
    }
    dx
}
