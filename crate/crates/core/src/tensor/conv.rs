//! im2col / col2im kernels shared by strided, dilated and transposed 3D
//! convolution. The "large" side is the convolution input (or the output of
//! a transposed convolution); the "small" side is the other one.

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub large: [usize; 3],
    pub small: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward convolution over a `large` input.
    pub fn forward(
        large: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || dilation == 0 {
            return Err(Error::invalid("kernel, stride and dilation must be positive"));
        }
        let reach = dilation * (kernel - 1) + 1;
        let mut small = [0; 3];
        for (s, &l) in small.iter_mut().zip(&large) {
            let span = l + 2 * padding;
            if span < reach {
                return Err(Error::InvalidShape {
                    shape: large.to_vec(),
                    reason: format!(
                        "degenerate convolution output (kernel reach {reach}, padded extent {span})"
                    ),
                });
            }
            *s = (span - reach) / stride + 1;
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            dilation,
            large,
            small,
        })
    }

    /// Geometry of a transposed convolution over a `small` input.
    pub fn transposed(
        small: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || dilation == 0 {
            return Err(Error::invalid("kernel, stride and dilation must be positive"));
        }
        let mut large = [0; 3];
        for (l, &s) in large.iter_mut().zip(&small) {
            let full = (s - 1) * stride + dilation * (kernel - 1) + 1;
            if full <= 2 * padding {
                return Err(Error::InvalidShape {
                    shape: small.to_vec(),
                    reason: "degenerate transposed convolution output".into(),
                });
            }
            *l = full - 2 * padding;
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            dilation,
            large,
            small,
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn large_len(&self) -> usize {
        self.large.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    /// Large-side coordinate touched by small-side position `o` and tap `t`
    /// along axis `axis`, or `None` when it falls in the padding.
    #[inline]
    fn source(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.large[axis]).then_some(pos as usize)
    }

    /// Unfolds one sample `[channels, large...]` into `[channels·k³, small]`.
    pub(crate) fn im2col(&self, large: &[Real], channels: usize, cols: &mut [Real]) {
        let k = self.kernel;
        let [ld, lh, lw] = self.large;
        let [sd, sh, sw] = self.small;
        let ns = sd * sh * sw;
        debug_assert_eq!(large.len(), channels * ld * lh * lw);
        debug_assert_eq!(cols.len(), channels * k * k * k * ns);
        let mut row = 0;
        for c in 0..channels {
            let plane = &large[c * ld * lh * lw..(c + 1) * ld * lh * lw];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let out = &mut cols[row * ns..(row + 1) * ns];
                        let mut j = 0;
                        for od in 0..sd {
                            let id = self.source(0, od, kd);
                            for oh in 0..sh {
                                let ih = self.source(1, oh, kh);
                                match (id, ih) {
                                    (Some(id), Some(ih)) => {
                                        let base = (id * lh + ih) * lw;
                                        for ow in 0..sw {
                                            out[j + ow] = match self.source(2, ow, kw) {
                                                Some(iw) => plane[base + iw],
                                                None => 0.0,
                                            };
                                        }
                                    }
                                    _ => out[j..j + sw].iter_mut().for_each(|v| *v = 0.0),
                                }
                                j += sw;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, adding
    /// into `large`.
    pub(crate) fn col2im(&self, cols: &[Real], channels: usize, large: &mut [Real]) {
        let k = self.kernel;
        let [ld, lh, lw] = self.large;
        let [sd, sh, sw] = self.small;
        let ns = sd * sh * sw;
        debug_assert_eq!(large.len(), channels * ld * lh * lw);
        let mut row = 0;
        for c in 0..channels {
            let plane = &mut large[c * ld * lh * lw..(c + 1) * ld * lh * lw];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let src = &cols[row * ns..(row + 1) * ns];
                        let mut j = 0;
                        for od in 0..sd {
                            let id = self.source(0, od, kd);
                            for oh in 0..sh {
                                if let (Some(id), Some(ih)) = (id, self.source(1, oh, kh)) {
                                    let base = (id * lh + ih) * lw;
                                    for ow in 0..sw {
                                        if let Some(iw) = self.source(2, ow, kw) {
                                            plane[base + iw] += src[j + ow];
                                        }
                                    }
                                }
                                j += sw;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}
