//! Dense kernels: strided GEMM and the im2col/col2im pair used by convolutions.

/// Row/column strides of a matrix operand.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }
}

fn max_index(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * l.rs + (cols - 1) * l.cs + 1
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + (accumulate ? c : 0)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], la: Layout, b: &[f32], lb: Layout, c: &mut [f32], accumulate: bool) {
    assert!(a.len() >= max_index(m, k, la), "gemm: lhs too short");
    assert!(b.len() >= max_index(k, n, lb), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution (square kernel, equal stride/padding on both axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `img` (`channels x in_h x in_w`) into `col` (`col_rows x col_cols`).
pub fn im2col(img: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.in_h + ih as usize) * g.in_w..][..g.in_w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `col` back into `img`.
pub fn col2im(col: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.in_h + ih as usize) * g.in_w..][..g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
