//! Direct 3D convolution kernels on `C×X×Y×Z` buffers.
//!
//! Per output voxel, products are accumulated in `(c_in, kx, ky, kz)` order,
//! which is also the order a naive nested-loop reference would use. Keep it
//! that way: the forward pass is compared bitwise against such a reference.

use crate::tensor::Element;

/// Output extent along one axis, or `None` when the kernel does not fit.
pub fn conv3d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Range of output indices `o` with `0 <= o*stride + k - padding < input`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n_in, n_out, s, p) = (self.input[axis], self.output[axis], self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= n_in - 1  =>  o <= (n_in - 1 + p - k) / s
        let hi = if n_in + p > k {
            ((n_in - 1 + p - k) / s + 1).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn in_index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.input[0] + x) * self.input[1] + y) * self.input[2] + z
    }

    fn out_index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.output[0] + x) * self.output[1] + y) * self.output[2] + z
    }

    fn kernel_index(&self, co: usize, ci: usize, kx: usize, ky: usize, kz: usize) -> usize {
        (((co * self.c_in + ci) * self.kernel[0] + kx) * self.kernel[1] + ky) * self.kernel[2] + kz
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.output.iter().product::<usize>()
    }

    /// Visits every (kernel tap, valid output voxel) pair for one `(co, ci)`
    /// plane in accumulation order, passing `(kernel_idx, in_idx, out_idx)`.
    #[inline]
    fn for_each_tap(&self, co: usize, ci: usize, mut f: impl FnMut(usize, usize, usize)) {
        let s = self.stride;
        for kx in 0..self.kernel[0] {
            let (x_lo, x_hi) = self.valid(0, kx);
            for ky in 0..self.kernel[1] {
                let (y_lo, y_hi) = self.valid(1, ky);
                for kz in 0..self.kernel[2] {
                    let (z_lo, z_hi) = self.valid(2, kz);
                    let ki = self.kernel_index(co, ci, kx, ky, kz);
                    for ox in x_lo..x_hi {
                        let ix = ox * s + kx - self.padding;
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - self.padding;
                            let ob = self.out_index(co, ox, oy, 0);
                            let ib = self.in_index(ci, ix, iy, 0);
                            for oz in z_lo..z_hi {
                                let iz = oz * s + kz - self.padding;
                                f(ki, ib + iz, ob + oz);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Element>(&self, input: &[T], kernel: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.output_len()];
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                self.for_each_tap(co, ci, |ki, ii, oi| {
                    out[oi] += kernel[ki] * input[ii];
                });
            }
        }
        out
    }

    pub fn backward_input<T: Element>(&self, kernel: &[T], grad_out: &[T], grad_in: &mut [T]) {
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                self.for_each_tap(co, ci, |ki, ii, oi| {
                    grad_in[ii] += kernel[ki] * grad_out[oi];
                });
            }
        }
    }

    pub fn backward_kernel<T: Element>(&self, input: &[T], grad_out: &[T], grad_kernel: &mut [T]) {
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                self.for_each_tap(co, ci, |ki, ii, oi| {
                    grad_kernel[ki] += grad_out[oi] * input[ii];
                });
            }
        }
    }
}

/// Plain forward convolution without the tape.
///
/// `input` is `C_in×X×Y×Z`, `kernel` is `C_out×C_in×kx×ky×kz`. Returns the
/// output buffer and its extents, or `None` on a shape mismatch.
pub fn conv3d_forward<T: Element>(
    input: &[T],
    input_shape: &[usize],
    kernel: &[T],
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Option<(Vec<T>, Vec<usize>)> {
    let geo = geometry(input_shape, kernel_shape, stride, padding).ok()?;
    let out = geo.forward(input, kernel);
    Some((out, vec![geo.c_out, geo.output[0], geo.output[1], geo.output[2]]))
}

pub(crate) fn geometry(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry, String> {
    let [c_in, x, y, z] = input_shape else {
        return Err(format!("conv3d input must be C×X×Y×Z, got {input_shape:?}"));
    };
    let [c_out, k_in, kx, ky, kz] = kernel_shape else {
        return Err(format!("conv3d kernel must be Cout×Cin×k×k×k, got {kernel_shape:?}"));
    };
    if c_in != k_in {
        return Err(format!("conv3d input has {c_in} channels but kernel expects {k_in}"));
    }
    if stride == 0 {
        return Err("conv3d stride must be >= 1".into());
    }
    let mut output = [0usize; 3];
    for (axis, (&n, &k)) in [*x, *y, *z].iter().zip([*kx, *ky, *kz].iter()).enumerate() {
        output[axis] = conv3d_output_extent(n, k, stride, padding).ok_or_else(|| {
            format!("conv3d kernel extent {k} exceeds padded input extent {} on axis {axis}", n + 2 * padding)
        })?;
    }
    Ok(ConvGeometry {
        c_in: *c_in,
        c_out: *c_out,
        input: [*x, *y, *z],
        kernel: [*kx, *ky, *kz],
        output,
        stride,
        padding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv3d_output_extent(5, 3, 2, 1), Some(3));
        assert_eq!(conv3d_output_extent(4, 1, 1, 0), Some(4));
        assert_eq!(conv3d_output_extent(2, 5, 1, 1), None);
        assert_eq!(conv3d_output_extent(16, 3, 2, 1), Some(8));
    }

    #[test]
    fn valid_ranges_cover_in_bounds_taps_only() {
        let geo = geometry(&[1, 5, 4, 3], &[1, 1, 3, 3, 3], 2, 1).unwrap();
        for axis in 0..3 {
            for k in 0..3 {
                let (lo, hi) = geo.valid(axis, k);
                for o in 0..geo.output[axis] {
                    let pos = (o * 2 + k) as isize - 1;
                    let inside = pos >= 0 && (pos as usize) < geo.input[axis];
                    assert_eq!(inside, o >= lo && o < hi, "axis {axis} k {k} o {o}");
                }
            }
        }
    }
}
