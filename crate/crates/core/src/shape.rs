//! 4-D tensor shape (batch, channels, height, width).

use std::fmt;

use crate::error::{Error, Result};

/// Shape of a dense 4-D tensor, row-major over (N, C, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::EmptyShape([n, c, h, w]));
        }
        Ok(Shape { n, c, h, w })
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of (n, c, h, w).
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims() {
        assert!(Shape::new(1, 0, 2, 2).is_err());
        assert!(Shape::new(0, 1, 1, 1).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let s = Shape::new(2, 3, 4, 5).unwrap();
        assert_eq!(s.numel(), 120);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), 119);
    }
}
