//! Shape bookkeeping and raw kernels for the convolution and pooling nodes.

use super::Scalar;
use crate::error::{bail, Result};

/// Geometry of a grouped 2-D convolution over an NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    /// (top, bottom, left, right) zero padding.
    pub pad: (usize, usize, usize, usize),
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        pad: (usize, usize, usize, usize),
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            bail!(Shape, "conv expects 4-d input and weight, got {:?} and {:?}", input, weight);
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cig, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            bail!(Shape, "conv groups {groups} incompatible with input {:?} / weight {:?}", input, weight);
        }
        if stride.0 == 0 || stride.1 == 0 {
            bail!(InvalidArgument, "conv stride must be >= 1");
        }
        let ph = h + pad.0 + pad.1;
        let pw = w + pad.2 + pad.3;
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            bail!(Shape, "kernel {}x{} does not fit padded input {}x{}", kh, kw, ph, pw);
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            hout: (ph - kh) / stride.0 + 1,
            wout: (pw - kw) / stride.1 + 1,
        })
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    pub fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.hout, self.wout]
    }

    /// Unfolds group `g` of one sample into `cols` (`k() x hout*wout`).
    pub(crate) fn im2col<T: Scalar>(&self, x: &[T], g: usize, cols: &mut [T]) {
        let hw = self.hout * self.wout;
        let (sh, sw) = self.stride;
        let (pt, _, pl, _) = self.pad;
        let cig = self.cin_g();
        for ci in 0..cig {
            let plane = &x[(g * cig + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + ki) * self.kw + kj) * hw..][..hw];
                    for oh in 0..self.hout {
                        let dst = &mut row[oh * self.wout..][..self.wout];
                        let ih = (oh * sh + ki) as isize - pt as isize;
                        if ih < 0 || ih as usize >= self.h {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..][..self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * sw + kj) as isize - pl as isize;
                            *d = if iw < 0 || iw as usize >= self.w { T::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters `cols` back, accumulating into `dx`.
    pub(crate) fn col2im<T: Scalar>(&self, cols: &[T], g: usize, dx: &mut [T]) {
        let hw = self.hout * self.wout;
        let (sh, sw) = self.stride;
        let (pt, _, pl, _) = self.pad;
        let cig = self.cin_g();
        for ci in 0..cig {
            let plane = &mut dx[(g * cig + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &cols[((ci * self.kh + ki) * self.kw + kj) * hw..][..hw];
                    for oh in 0..self.hout {
                        let ih = (oh * sh + ki) as isize - pt as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..][..self.w];
                        for (ow, &v) in row[oh * self.wout..][..self.wout].iter().enumerate() {
                            let iw = (ow * sw + kj) as isize - pl as isize;
                            if iw >= 0 && (iw as usize) < self.w {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, x: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
        let hw = self.hout * self.wout;
        let k = self.k();
        let cog = self.cout_g();
        let mut cols = alloc::vec![T::zero(); k * hw];
        let in_len = self.cin * self.h * self.w;
        let out_len = self.cout * hw;
        for n in 0..self.n {
            let xs = &x[n * in_len..][..in_len];
            let os = &mut out[n * out_len..][..out_len];
            for g in 0..self.groups {
                self.im2col(xs, g, &mut cols);
                let wg = &weight[g * cog * k..][..cog * k];
                let og = &mut os[g * cog * hw..][..cog * hw];
                T::gemm(cog, k, hw, T::one(), wg, k, 1, &cols, hw, 1, T::zero(), og, hw, 1);
            }
            if let Some(b) = bias {
                for (co, &bv) in b.iter().enumerate() {
                    os[co * hw..][..hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }

    /// Accumulates input, weight and bias gradients for upstream gradient `dout`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Scalar>(
        &self,
        x: &[T],
        weight: &[T],
        dout: &[T],
        mut dx: Option<&mut [T]>,
        mut dw: Option<&mut [T]>,
        mut db: Option<&mut [T]>,
    ) {
        let hw = self.hout * self.wout;
        let k = self.k();
        let cog = self.cout_g();
        let mut cols = alloc::vec![T::zero(); k * hw];
        let mut dcols = alloc::vec![T::zero(); k * hw];
        let in_len = self.cin * self.h * self.w;
        let out_len = self.cout * hw;
        for n in 0..self.n {
            let xs = &x[n * in_len..][..in_len];
            let ds = &dout[n * out_len..][..out_len];
            for g in 0..self.groups {
                let dg = &ds[g * cog * hw..][..cog * hw];
                if let Some(dw) = dw.as_deref_mut() {
                    self.im2col(xs, g, &mut cols);
                    let dwg = &mut dw[g * cog * k..][..cog * k];
                    T::gemm(cog, hw, k, T::one(), dg, hw, 1, &cols, 1, hw, T::one(), dwg, k, 1);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let wg = &weight[g * cog * k..][..cog * k];
                    T::gemm(k, cog, hw, T::one(), wg, 1, k, dg, hw, 1, T::zero(), &mut dcols, hw, 1);
                    self.col2im(&dcols, g, &mut dx[n * in_len..][..in_len]);
                }
            }
            if let Some(db) = db.as_deref_mut() {
                for (co, b) in db.iter_mut().enumerate() {
                    *b += ds[co * hw..][..hw].iter().copied().sum::<T>();
                }
            }
        }
    }
}

/// Geometry of an unpadded 2-D pooling window over an NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub hout: usize,
    pub wout: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], kernel: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if input.len() != 4 {
            bail!(Shape, "pooling expects 4-d input, got {:?}", input);
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            bail!(InvalidArgument, "pool kernel and stride must be >= 1");
        }
        if kernel.0 > h || kernel.1 > w {
            bail!(Shape, "pool window {:?} larger than input {}x{}", kernel, h, w);
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            kernel,
            stride,
            hout: (h - kernel.0) / stride.0 + 1,
            wout: (w - kernel.1) / stride.1 + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.hout, self.wout]
    }

    /// Calls `f(out_index, input_index)` for every (output cell, window element) pair.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        for plane in 0..self.n * self.c {
            let ib = plane * self.h * self.w;
            let ob = plane * self.hout * self.wout;
            for oh in 0..self.hout {
                for ow in 0..self.wout {
                    let o = ob + oh * self.wout + ow;
                    for i in 0..kh {
                        let row = ib + (oh * sh + i) * self.w + ow * sw;
                        for j in 0..kw {
                            f(o, row + j);
                        }
                    }
                }
            }
        }
    }

    pub fn window(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}
