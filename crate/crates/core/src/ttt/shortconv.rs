use crate::error::{Error, Result};
use crate::numerics::{conv2d, ConvKernel, Grid4, Matrix, Real};

/// How token rows map onto per-frame image grids.
///
/// Non-special rows, taken in order, fill `frames x grid_h x grid_w` in
/// frame-major, row-major order. Special rows (camera/register) sit outside
/// the grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub special_mask: Vec<bool>,
}

impl FrameLayout {
    /// Uniform layout with `specials` special rows leading every frame.
    pub fn uniform(frames: usize, grid_h: usize, grid_w: usize, specials: usize) -> Self {
        let per_frame = specials + grid_h * grid_w;
        let special_mask = (0..frames * per_frame)
            .map(|i| i % per_frame < specials)
            .collect();
        Self {
            frames,
            grid_h,
            grid_w,
            special_mask,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.special_mask.len()
    }

    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.special_mask.len() != rows {
            return Err(Error::Contract(format!(
                "special mask covers {} rows, matrix has {rows}",
                self.special_mask.len()
            )));
        }
        let patches = self.special_mask.iter().filter(|s| !**s).count();
        if patches != self.frames * self.grid_h * self.grid_w {
            return Err(Error::Contract(format!(
                "{patches} patch tokens do not fill {} frames of {}x{}",
                self.frames, self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }

    /// Row count per frame when every frame has the same number of rows and
    /// frames occupy contiguous row ranges.
    pub fn rows_per_frame(&self) -> Option<usize> {
        if self.frames == 0 || self.n_tokens() % self.frames != 0 {
            return None;
        }
        Some(self.n_tokens() / self.frames)
    }
}

/// Reshapes patch rows of `v` onto their image grids, convolves each frame,
/// and flattens back. Special rows are copied through unchanged.
pub fn short_conv2d_values<T: Real>(
    v: &Matrix<T>,
    layout: &FrameLayout,
    kernel: &ConvKernel<T>,
) -> Result<Matrix<T>> {
    layout.validate(v.rows())?;
    let d = v.cols();
    let patch_rows: Vec<usize> = (0..v.rows()).filter(|&r| !layout.special_mask[r]).collect();
    let grid = Grid4::new(
        layout.frames,
        layout.grid_h,
        layout.grid_w,
        d,
        v.select_rows(&patch_rows).into_data(),
    )?;
    let mixed = conv2d(&grid, kernel)?;
    if mixed.dims().3 != d {
        return Err(Error::shape(
            "short_conv2d_values",
            "kernel must preserve the channel count",
        ));
    }
    let mut out = v.clone();
    for (cell, &r) in mixed.data().chunks_exact(d).zip(&patch_rows) {
        out.row_mut(r).copy_from_slice(cell);
    }
    Ok(out)
}
