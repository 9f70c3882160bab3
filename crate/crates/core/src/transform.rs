//! The eight rotation/flip operations acting on square grids.
//!
//! An operation is a counter-clockwise rotation by `gamma * 90` degrees
//! followed, optionally, by a horizontal (left-right) flip. Under the rotation
//! the value at `(r, c)` moves to `(n - 1 - c, r)`; the flip then sends column
//! `c` to `n - 1 - c`.
//!
//! Composition reads "`a` after `b`":
//! `apply(compose(a, b), x) == apply(a, apply(b, x))`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformOp {
    gamma: u8,
    flip: bool,
}

impl TransformOp {
    pub const IDENTITY: TransformOp = TransformOp {
        gamma: 0,
        flip: false,
    };

    /// Builds an operation; `gamma` is reduced modulo 4, so every integer is valid.
    pub fn new(gamma: i64, flip: bool) -> Self {
        Self {
            gamma: gamma.rem_euclid(4) as u8,
            flip,
        }
    }

    /// All eight group elements, rotations first.
    pub fn all() -> [TransformOp; 8] {
        let mut ops = [Self::IDENTITY; 8];
        for (i, op) in ops.iter_mut().enumerate() {
            *op = Self::new((i % 4) as i64, i >= 4);
        }
        ops
    }

    pub fn gamma(self) -> u8 {
        self.gamma
    }

    pub fn flip(self) -> bool {
        self.flip
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }

    /// Index in `0..8` matching the order of [`TransformOp::all`].
    pub fn index(self) -> usize {
        self.gamma as usize + if self.flip { 4 } else { 0 }
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            // reflections are involutions
            self
        } else {
            Self::new(-(self.gamma as i64), false)
        }
    }

    /// `self` after `other`.
    pub fn compose(self, other: TransformOp) -> Self {
        // F R = R^-1 F, so F^a R^g F R^h = F^(a+1) R^(h-g).
        if other.flip {
            Self::new(
                other.gamma as i64 - self.gamma as i64,
                !self.flip,
            )
        } else {
            Self::new(self.gamma as i64 + other.gamma as i64, self.flip)
        }
    }

    /// Uniform draw over the eight operations.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let i = rng.random_range(0..8u8);
        Self::new((i % 4) as i64, i >= 4)
    }

    /// Destination of the value at `(r, c)` in an `n x n` plane.
    #[inline]
    pub fn map_coord(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let (mut r, mut c) = (r, c);
        for _ in 0..self.gamma {
            (r, c) = (n - 1 - c, r);
        }
        if self.flip {
            c = n - 1 - c;
        }
        (r, c)
    }

    /// Applies the operation to every channel of a square grid.
    pub fn apply<T: Copy>(self, grid: &Grid<T>) -> Result<Grid<T>> {
        if !grid.is_square() {
            return Err(Error::Shape(format!(
                "transform requires a square grid, got {}x{}",
                grid.height(),
                grid.width()
            )));
        }
        if self.is_identity() {
            return Ok(grid.clone());
        }
        let n = grid.width();
        let mut out = grid.data().to_vec();
        for ch in 0..grid.channels() {
            apply_plane(self, grid.plane(ch), &mut out[ch * n * n..(ch + 1) * n * n], n);
        }
        Grid::new(grid.channels(), n, n, out)
    }
}

/// Writes the transformed `n x n` plane `src` into `dst`.
pub fn apply_plane<T: Copy>(op: TransformOp, src: &[T], dst: &mut [T], n: usize) {
    debug_assert_eq!(src.len(), n * n);
    debug_assert_eq!(dst.len(), n * n);
    for r in 0..n {
        for c in 0..n {
            let (rr, cc) = op.map_coord(r, c, n);
            dst[rr * n + cc] = src[r * n + c];
        }
    }
}

impl Default for TransformOp {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for TransformOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rot{}", self.gamma as u32 * 90)?;
        if self.flip {
            write!(f, "+flip")?;
        }
        Ok(())
    }
}
