//! Regular grid-sparse acquisition for adjacent sections.
//!
//! Every `spacing x spacing` block of the lattice contributes exactly one
//! measured site at the configured phase offset. Blocks cut short by the
//! image border keep their site by clamping it to the last row/column.

use alloc::format;
use alloc::vec::Vec;

use crate::sample::Mask;
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    spacing: usize,
    offset: (usize, usize),
    height: usize,
    width: usize,
    coords: Vec<(usize, usize)>,
    mask: Mask,
}

/// Builds the sampling lattice for an `height x width` section.
pub fn make_grid_mask(height: usize, width: usize, spacing: usize, offset: (usize, usize)) -> Result<SamplingGrid> {
    if spacing == 0 {
        return Err(Error::InvalidArgument(alloc::string::String::from("grid spacing must be positive")));
    }
    if offset.0 >= spacing || offset.1 >= spacing {
        return Err(Error::OffsetOutOfRange { row: offset.0, col: offset.1, spacing });
    }
    if height < spacing || width < spacing {
        return Err(Error::InvalidArgument(format!("{height}x{width} section is smaller than spacing {spacing}")));
    }
    let (rows, cols) = (height.div_ceil(spacing), width.div_ceil(spacing));
    let mut coords = Vec::with_capacity(rows * cols);
    let mut data = alloc::vec![0u8; height * width];
    for by in 0..rows {
        let r = (by * spacing + offset.0).min(height - 1);
        for bx in 0..cols {
            let c = (bx * spacing + offset.1).min(width - 1);
            coords.push((r, c));
            data[r * width + c] = 1;
        }
    }
    let mask = Mask::new(height, width, data)?;
    Ok(SamplingGrid { spacing, offset, height, width, coords, mask })
}

impl SamplingGrid {
    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn offset(&self) -> (usize, usize) {
        self.offset
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Measured sites `(row, col)` in block raster order.
    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Number of blocks per axis `(rows, cols)`.
    pub fn coarse_dims(&self) -> (usize, usize) {
        (self.height.div_ceil(self.spacing), self.width.div_ceil(self.spacing))
    }

    pub fn sampling_fraction(&self) -> f64 {
        self.coords.len() as f64 / (self.height * self.width) as f64
    }

    /// Zeroes expression off the grid; returns the sparse map and its mask.
    pub fn apply(&self, expression: &Tensor) -> Result<(Tensor, Mask)> {
        Ok((apply_mask(expression, &self.mask)?, self.mask.clone()))
    }
}

/// Keeps `expression[g, i]` where `mask[i] == 1` and zeroes the rest.
pub fn apply_mask(expression: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (g, h, w) = expression.dims3()?;
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::Shape {
            op: "apply_mask",
            detail: format!("expression {h}x{w} vs mask {}x{}", mask.height(), mask.width()),
        });
    }
    let mut out = expression.clone();
    for gi in 0..g {
        for (i, v) in out.channel_mut(gi).iter_mut().enumerate() {
            if !mask.is_set(i) {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
