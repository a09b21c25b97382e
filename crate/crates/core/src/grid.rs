//! Dense 2-D value grids and boolean masks shared across the crate.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// H x W grid of f64 values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Grid {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "grid",
                details: format!("{}x{} grid needs {} values, got {}", h, w, h * w, data.len()),
            });
        }
        Ok(Grid { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.w..(y + 1) * self.w]
    }

    /// Shift by (dy, dx); vacated pixels become 0.
    pub fn translate(&self, dy: i64, dx: i64) -> Grid {
        let mut out = Grid::zeros(self.h, self.w);
        for y in 0..self.h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= self.h as i64 {
                continue;
            }
            for x in 0..self.w as i64 {
                let sx = x - dx;
                if sx < 0 || sx >= self.w as i64 {
                    continue;
                }
                out.set(y as usize, x as usize, self.get(sy as usize, sx as usize));
            }
        }
        out
    }
}

/// H x W boolean mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![true; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "mask",
                details: format!("{}x{} mask needs {} values, got {}", h, w, h * w, data.len()),
            });
        }
        Ok(Mask { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// Element-wise AND.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                op: "mask_and",
                details: format!(
                    "{}x{} vs {}x{}",
                    self.h, self.w, other.h, other.w
                ),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Mask {
            h: self.h,
            w: self.w,
            data,
        })
    }

    /// Shift by (dy, dx); vacated pixels become false.
    pub fn translate(&self, dy: i64, dx: i64) -> Mask {
        let mut out = Mask::new(self.h, self.w);
        for y in 0..self.h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= self.h as i64 {
                continue;
            }
            for x in 0..self.w as i64 {
                let sx = x - dx;
                if sx < 0 || sx >= self.w as i64 {
                    continue;
                }
                if self.get(sy as usize, sx as usize) {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
        out
    }
}
