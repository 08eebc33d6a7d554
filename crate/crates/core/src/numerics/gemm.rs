//! Safe wrappers over the strided gemm kernels.

use super::float::Float;

/// A read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        View { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Mutable strided destination.
pub(crate) struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        ViewMut { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }
}

/// `c = a @ b + beta * c`.
pub(crate) fn gemm<T: Float>(a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.rows == 0 || a.cols == 0 || a.last_index() < a.data.len());
    assert!(b.rows == 0 || b.cols == 0 || b.last_index() < b.data.len());
    assert!(c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs < c.data.len());
    if a.cols == 0 {
        // Empty contraction: only the beta scaling applies.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = c.offset + r * c.rs + col * c.cs;
                c.data[idx] = beta * c.data[idx];
            }
        }
        return;
    }
    // SAFETY: every index touched by the kernel is bounded by the asserts above.
    unsafe {
        T::gemm(
            c.rows,
            a.cols,
            c.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
