//! im2col lowering for the zero-padded "same" 1-D convolution over zones.

use crate::scalar::Scalar;

/// Geometry of a batched convolution over an `[rows, zones, channels]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub rows: usize,
    pub zones: usize,
    pub channels: usize,
    pub filters: usize,
    pub len: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.len / 2
    }

    pub fn patch(&self) -> usize {
        self.channels * self.len
    }

    /// Gather every receptive field into a `[rows * zones, channels * len]` matrix.
    pub fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (n, f, l, pad) = (self.zones, self.channels, self.len, self.pad());
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.rows * n * patch];
        for r in 0..self.rows {
            let xr = &x[r * n * f..(r + 1) * n * f];
            for z in 0..n {
                let dst = &mut cols[(r * n + z) * patch..(r * n + z + 1) * patch];
                for li in 0..l {
                    let src = z as isize + li as isize - pad as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let src = src as usize;
                    for fi in 0..f {
                        dst[fi * l + li] = xr[src * f + fi];
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add patch gradients back onto the input layout.
    pub fn col2im<T: Scalar>(&self, dcols: &[T], dx: &mut [T]) {
        let (n, f, l, pad) = (self.zones, self.channels, self.len, self.pad());
        let patch = self.patch();
        for r in 0..self.rows {
            for z in 0..n {
                let src = &dcols[(r * n + z) * patch..(r * n + z + 1) * patch];
                for li in 0..l {
                    let dst = z as isize + li as isize - pad as isize;
                    if dst < 0 || dst >= n as isize {
                        continue;
                    }
                    let base = r * n * f + dst as usize * f;
                    for fi in 0..f {
                        dx[base + fi] = dx[base + fi] + src[fi * l + li];
                    }
                }
            }
        }
    }
}
