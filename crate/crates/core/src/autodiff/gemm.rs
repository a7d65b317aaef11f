/// Strided view of a row-major matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatRef {
    pub const fn rows(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride,
            col_stride: 1,
        }
    }

    /// View of the transpose of a row-major matrix stored at `offset`.
    pub const fn transposed(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride: 1,
            col_stride: row_stride,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = alpha * a @ b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: MatRef,
    b: &[f64],
    bv: MatRef,
    beta: f64,
    c: &mut [f64],
    cv: MatRef,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last_index(m, k) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || bv.last_index(k, n) < b.len(), "gemm: b out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched lies within the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| f64::from(x) * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, 1.0, &a, MatRef::rows(0, 3), &b, MatRef::rows(0, 4), 1.0, &mut c, MatRef::rows(0, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_view() {
        // a is stored 3x2, used as its 2x3 transpose
        let a = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 1.0, 1.0];
        let mut c = [0.0; 2];
        gemm(2, 3, 1, 1.0, &a, MatRef::transposed(0, 2), &b, MatRef::rows(0, 1), 0.0, &mut c, MatRef::rows(0, 1));
        assert_eq!(c, [6.0, 15.0]);
    }
}
