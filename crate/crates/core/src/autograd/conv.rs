//! im2col lowering for 2-d convolution.

/// Geometry of one convolution: input `c x h x w`, kernel `kh x kw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        if stride == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1 stride-1 unpadded kernel reads the input as its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls one `c x h x w` image into `cols` of shape `(c*kh*kw) x (oh*ow)`.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ol;
                let dst = &mut cols[row..row + ol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto a `c x h x w` gradient image.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ol;
                let src = &cols[row..row + ol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let g = ConvGeom::new(3, 96, 48, 3, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (48, 24));
        let g = ConvGeom::new(1, 2, 2, 2, 2, 1, 0).unwrap();
        assert_eq!((g.oh, g.ow), (1, 1));
        assert!(ConvGeom::new(1, 2, 2, 3, 3, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&g, &y, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
