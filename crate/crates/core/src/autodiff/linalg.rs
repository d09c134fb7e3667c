//! Thin safe wrappers over `matrixmultiply::dgemm` for row-major buffers.

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.row_stride + (self.cols - 1) as isize * self.col_stride)
            as usize
    }
}

/// Products below this many multiply-adds skip dgemm's packing.
const SMALL_GEMM: usize = 512;

fn small_gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for p in 0..k {
            let av = a.data[(i as isize * a.row_stride + p as isize * a.col_stride) as usize];
            let base = (p as isize * b.row_stride) as usize;
            if b.col_stride == 1 {
                for (v, bv) in row.iter_mut().zip(&b.data[base..base + n]) {
                    *v += av * bv;
                }
            } else {
                let step = b.col_stride as usize;
                for (j, v) in row.iter_mut().enumerate() {
                    *v += av * b.data[base + j * step];
                }
            }
        }
    }
}

/// `c = a · b + beta · c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    if m * k * n <= SMALL_GEMM {
        small_gemm(a, b, c, beta);
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the max_offset
    // checks above, and `c` holds at least m*n contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(
            MatRef::row_major(&a, 2, 2).t(),
            MatRef::row_major(&b, 2, 2),
            &mut c,
            0.0,
        );
        // aᵀ·b = [[26,30],[38,44]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(
            MatRef::row_major(&a, 2, 2),
            MatRef::row_major(&b, 2, 2).t(),
            &mut c,
            1.0,
        );
        // + a·bᵀ = [[17,23],[39,53]]
        assert_eq!(c, [43.0, 53.0, 77.0, 97.0]);
    }
}
