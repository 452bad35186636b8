use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayView2, ArrayView4, ArrayViewMut2};
use rand::Rng;

use super::{Param, ParamVisitor};
use crate::real::Real;

/// Stride-1 "same" convolution with a 1×1 or 3×3 kernel.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `(out, in, k, k)`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, bias: bool, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            in_channels: in_ch,
            out_channels: out_ch,
            kernel,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let k = self.in_channels * self.kernel * self.kernel;
        ArrayView2::from_shape((self.out_channels, k), self.weight.value.as_slice().expect("contiguous"))
            .expect("weight shape")
    }

    pub fn forward(&self, x: ArrayView4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((b, self.out_channels, h, w));
        let wm = self.weight_matrix();
        let kk = c * self.kernel * self.kernel;
        let mut cols = vec![T::zero(); if self.kernel == 3 { kk * hw } else { 0 }];
        {
            let os = out.as_slice_mut().expect("fresh");
            for n in 0..b {
                let xin = &xs[n * c * hw..(n + 1) * c * hw];
                let src = if self.kernel == 3 {
                    im2col3(xin, c, h, w, &mut cols);
                    ArrayView2::from_shape((kk, hw), &cols[..]).expect("cols")
                } else {
                    ArrayView2::from_shape((c, hw), xin).expect("input")
                };
                let dst = &mut os[n * self.out_channels * hw..(n + 1) * self.out_channels * hw];
                let mut dm = ArrayViewMut2::from_shape((self.out_channels, hw), dst).expect("out");
                general_mat_mul(T::one(), &wm, &src, T::zero(), &mut dm);
                if let Some(bias) = &self.bias {
                    for (o, mut row) in dm.outer_iter_mut().enumerate() {
                        let bv = bias.value[o];
                        row.mapv_inplace(|v| v + bv);
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: ArrayView4<T>, d_out: ArrayView4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        let hw = h * w;
        let oc = self.out_channels;
        let kk = c * self.kernel * self.kernel;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let d_out = d_out.as_standard_layout();
        let gs = d_out.as_slice().expect("standard layout");
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let wm = self.weight_matrix().to_owned();
        let mut cols = vec![T::zero(); kk * hw];
        let mut dcols = vec![T::zero(); kk * hw];
        let dws = self.weight.grad.as_slice_mut().expect("contiguous");
        let mut dwm = ArrayViewMut2::from_shape((oc, kk), dws).expect("grad shape");
        {
            let dxs = dx.as_slice_mut().expect("fresh");
            for n in 0..b {
                let g = ArrayView2::from_shape((oc, hw), &gs[n * oc * hw..(n + 1) * oc * hw]).expect("grad");
                let xin = &xs[n * c * hw..(n + 1) * c * hw];
                let dxn = &mut dxs[n * c * hw..(n + 1) * c * hw];
                if self.kernel == 3 {
                    im2col3(xin, c, h, w, &mut cols);
                    let cv = ArrayView2::from_shape((kk, hw), &cols[..]).expect("cols");
                    general_mat_mul(T::one(), &g, &cv.t(), T::one(), &mut dwm);
                    let mut dc = ArrayViewMut2::from_shape((kk, hw), &mut dcols[..]).expect("dcols");
                    general_mat_mul(T::one(), &wm.t(), &g, T::zero(), &mut dc);
                    col2im3(&dcols, c, h, w, dxn);
                } else {
                    let xv = ArrayView2::from_shape((c, hw), xin).expect("input");
                    general_mat_mul(T::one(), &g, &xv.t(), T::one(), &mut dwm);
                    let mut dv = ArrayViewMut2::from_shape((c, hw), dxn).expect("dx");
                    general_mat_mul(T::one(), &wm.t(), &g, T::zero(), &mut dv);
                }
            }
        }
        if let Some(bias) = &mut self.bias {
            for n in 0..b {
                for o in 0..oc {
                    let s: T = gs[(n * oc + o) * hw..(n * oc + o + 1) * hw].iter().copied().sum();
                    bias.grad[o] += s;
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.visit(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.visit(&format!("{prefix}.bias"), b);
        }
    }

    /// Zeroes weights and bias.
    pub fn zero_(&mut self) {
        self.weight.value.fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.value.fill(T::zero());
        }
    }
}

/// `cols[(ci*9 + ky*3 + kx), i*w + j] = x[ci, i + ky - 1, j + kx - 1]`, zero outside.
fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let dst = &mut row[i * w..(i + 1) * w];
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters-adds `cols` back into `dx`.
fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..(i + 1) * w];
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}
