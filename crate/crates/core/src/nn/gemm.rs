use super::Scalar;

/// Strided view of an `rows x cols` matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a·b + beta * c`, bounds-checked against the slices.
pub(crate) fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    am: Mat,
    b: &[T],
    bm: Mat,
    beta: T,
    c: &mut [T],
    cm: Mat,
) {
    assert_eq!(am.cols, bm.rows, "gemm inner dimensions");
    assert_eq!(
        (am.rows, bm.cols),
        (cm.rows, cm.cols),
        "gemm output dimensions"
    );
    assert!(am.span() <= a.len() && bm.span() <= b.len() && cm.span() <= c.len());
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    // SAFETY: spans checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            alpha,
            a.as_ptr(),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr(),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr(),
            cm.rs as isize,
            cm.cs as isize,
        )
    }
}
