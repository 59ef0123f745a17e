use serde::{Deserialize, Serialize};

/// Left half-court geometry in feet. `x` runs along the court width and
/// `y` along the half-court length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CourtGeometry {
    pub width: f64,
    pub half_length: f64,
    pub rows: usize,
    pub cols: usize,
    pub cell: f64,
}

impl Default for CourtGeometry {
    fn default() -> Self {
        Self { width: 50.0, half_length: 47.0, rows: 10, cols: 9, cell: 5.0 }
    }
}

impl CourtGeometry {
    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.cell > 0.0 && self.width > 0.0 && self.half_length > 0.0) {
            return Err("court extents and cell size must be positive".into());
        }
        if self.rows == 0 || self.cols == 0 {
            return Err("grid must have at least one row and column".into());
        }
        if self.rows as f64 * self.cell > self.width + self.cell {
            return Err("grid rows overflow the court width".into());
        }
        if self.cols as f64 * self.cell > self.half_length {
            return Err("grid columns overflow the half-court length".into());
        }
        Ok(())
    }

    /// Grid cell containing `(x, y)`: row-major with `row = floor(x / cell)`,
    /// `col = floor(y / cell)`. Points outside the grid map to the nearest
    /// edge cell.
    pub fn label_cell(&self, pos: &[f64]) -> usize {
        let clamp = |v: f64, n: usize| {
            let idx = (v / self.cell).floor();
            if idx.is_nan() || idx < 0.0 {
                0
            } else {
                (idx as usize).min(n - 1)
            }
        };
        clamp(pos[0], self.rows) * self.cols + clamp(pos[1], self.cols)
    }

    /// Center of grid cell `cell` in feet.
    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (row, col) = (cell / self.cols, cell % self.cols);
        [(row as f64 + 0.5) * self.cell, (col as f64 + 0.5) * self.cell]
    }

    /// Half-court bounds `[0, width] x [0, half_length]`.
    pub fn bounds(&self) -> [f64; 4] {
        [0.0, self.width, 0.0, self.half_length]
    }
}
