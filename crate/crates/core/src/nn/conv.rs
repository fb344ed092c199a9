//! Per-sample 2-D convolution via im2col + GEMM.

use crate::tensor::gemm;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Offset of the `[out_c, in_c, k, k]` weight in the flat parameter vector.
    pub w: usize,
    /// Offset of the `[out_c]` bias.
    pub b: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    #[cfg(test)]
    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.positions()
    }

    pub fn n_weights(&self) -> usize {
        self.out_c * self.col_rows()
    }

    /// Output positions `lo..hi` along one axis whose input coordinate
    /// `o * stride + offset - pad` falls inside `0..len`.
    fn valid(&self, offset: usize, out: usize, len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(offset).div_ceil(s).min(out);
        let hi = (len + self.pad)
            .saturating_sub(offset)
            .div_ceil(s)
            .min(out)
            .max(lo);
        (lo, hi)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.positions();
        let (h, w, s) = (self.in_h, self.in_w, self.stride);
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..self.k {
                let (y0, y1) = self.valid(ki, self.out_h, h);
                for kj in 0..self.k {
                    let (x0, x1) = self.valid(kj, self.out_w, w);
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.fill(0.0);
                    for oy in y0..y1 {
                        let src = &plane[(oy * s + ki - self.pad) * w..][..w];
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if s == 1 {
                            let ix0 = x0 + kj - self.pad;
                            d[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                d[ox] = src[ox * s + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        let (h, w, s) = (self.in_h, self.in_w, self.stride);
        for c in 0..self.in_c {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..self.k {
                let (y0, y1) = self.valid(ki, self.out_h, h);
                for kj in 0..self.k {
                    let (x0, x1) = self.valid(kj, self.out_w, w);
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in y0..y1 {
                        let d = &mut plane[(oy * s + ki - self.pad) * w..][..w];
                        let r = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in x0..x1 {
                            d[ox * s + kj - self.pad] += r[ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64], col: &mut Vec<f64>) {
        let (kk, p) = (self.col_rows(), self.positions());
        col.resize(kk * p, 0.0);
        self.im2col(x, col);
        let w = &params[self.w..self.w + self.n_weights()];
        gemm(self.out_c, kk, p, w, false, col, false, 0.0, out);
        let b = &params[self.b..self.b + self.out_c];
        for (o, bias) in out.chunks_mut(p).zip(b) {
            o.iter_mut().for_each(|v| *v += bias);
        }
    }

    /// Accumulates parameter gradients into `grads` (when given) and the
    /// input gradient into `dx` (when given).
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dout: &[f64],
        grads: Option<&mut [f64]>,
        dx: Option<&mut [f64]>,
        col: &mut Vec<f64>,
    ) {
        let (kk, p) = (self.col_rows(), self.positions());
        col.resize(kk * p, 0.0);
        if let Some(g) = grads {
            self.im2col(x, col);
            gemm(
                self.out_c,
                p,
                kk,
                dout,
                false,
                col,
                true,
                1.0,
                &mut g[self.w..self.w + self.n_weights()],
            );
            for (gb, d) in g[self.b..self.b + self.out_c]
                .iter_mut()
                .zip(dout.chunks(p))
            {
                *gb += d.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx {
            let w = &params[self.w..self.w + self.n_weights()];
            gemm(kk, self.out_c, p, w, true, dout, false, 0.0, col);
            self.col2im_add(col, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(g: &ConvGeom, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = params[g.b + o];
                    for c in 0..g.in_c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                let wi = ((o * g.in_c + c) * g.k + ki) * g.k + kj;
                                s += params[g.w + wi]
                                    * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for (stride, pad, in_h, in_w, out_h, out_w) in
            [(2, 1, 5, 4, 3, 2), (1, 1, 4, 3, 4, 3), (1, 0, 4, 5, 2, 3)]
        {
            let g = ConvGeom {
                in_c: 2,
                out_c: 3,
                k: 3,
                stride,
                pad,
                in_h,
                in_w,
                out_h,
                out_w,
                w: 0,
                b: 54,
            };
            let params: Vec<f64> = (0..57).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect();
            let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.3).sin()).collect();
            let mut out = vec![0.0; g.out_len()];
            let mut col = Vec::new();
            g.forward(&params, &x, &mut out, &mut col);
            for (a, b) in out.iter().zip(direct(&g, &params, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
