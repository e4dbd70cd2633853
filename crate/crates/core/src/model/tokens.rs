use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};
use crate::ttt::FrameLayout;

/// Specials per frame: one camera token, one register token.
pub const DEFAULT_SPECIALS: usize = 2;

const LATENT_TAG: u64 = 0;
const FRAME_TAG: u64 = 1 << 32;
const OFFSET_STD: f64 = 0.5;
const NOISE_STD: f64 = 0.3;

/// Frame-major token matrix with specials first within each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T: Real = f64> {
    pub n_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d: usize,
    pub specials_per_frame: usize,
    pub tokens: Matrix<T>,
    pub special_mask: Vec<bool>,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(
        n_frames: usize,
        grid_h: usize,
        grid_w: usize,
        specials_per_frame: usize,
        tokens: Matrix<T>,
    ) -> Result<Self> {
        let layout = FrameLayout::uniform(n_frames, grid_h, grid_w, specials_per_frame);
        if tokens.rows() != layout.n_tokens() {
            return Err(Error::shape(
                "TokenGrid",
                format!(
                    "{} rows for {n_frames} frames of {} tokens",
                    tokens.rows(),
                    grid_h * grid_w + specials_per_frame
                ),
            ));
        }
        Ok(Self {
            n_frames,
            grid_h,
            grid_w,
            d: tokens.cols(),
            specials_per_frame,
            tokens,
            special_mask: layout.special_mask,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w + self.specials_per_frame
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn layout(&self) -> FrameLayout {
        FrameLayout {
            frames: self.n_frames,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            special_mask: self.special_mask.clone(),
        }
    }

    /// Same layout, new token values.
    pub fn with_tokens(&self, tokens: Matrix<T>) -> Result<Self> {
        Self::new(self.n_frames, self.grid_h, self.grid_w, self.specials_per_frame, tokens)
    }

    pub fn frame_rows(&self, frame: usize) -> Matrix<T> {
        let p = self.tokens_per_frame();
        self.tokens.slice_rows(frame * p, (frame + 1) * p)
    }

    /// Grid holding the listed frames in the listed order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        if let Some(&bad) = frames.iter().find(|&&f| f >= self.n_frames) {
            return Err(Error::Contract(format!(
                "frame {bad} out of range for {} frames",
                self.n_frames
            )));
        }
        let p = self.tokens_per_frame();
        let rows: Vec<usize> = frames.iter().flat_map(|&f| f * p..(f + 1) * p).collect();
        Self::new(
            frames.len(),
            self.grid_h,
            self.grid_w,
            self.specials_per_frame,
            self.tokens.select_rows(&rows),
        )
    }

    pub fn cast<U: Real>(&self) -> TokenGrid<U> {
        TokenGrid {
            n_frames: self.n_frames,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            d: self.d,
            specials_per_frame: self.specials_per_frame,
            tokens: self.tokens.cast(),
            special_mask: self.special_mask.clone(),
        }
    }
}

/// Pseudo-scene of `n_frames` views. See [`tokenize_frames`].
pub fn tokenize_synthetic(
    n_frames: usize,
    grid_h: usize,
    grid_w: usize,
    d: usize,
    seed: u64,
) -> Result<TokenGrid> {
    tokenize_frames(&(0..n_frames as u64).collect::<Vec<_>>(), grid_h, grid_w, d, seed)
}

/// Views `frame_ids` of the scene keyed by `seed`. Patch tokens are a
/// shared per-position scene latent plus a per-frame offset plus noise;
/// specials are drawn independently. A frame's tokens depend only on
/// `(seed, frame id)`, so any subset of views is consistent with the full
/// scene.
pub fn tokenize_frames(
    frame_ids: &[u64],
    grid_h: usize,
    grid_w: usize,
    d: usize,
    seed: u64,
) -> Result<TokenGrid> {
    if frame_ids.is_empty() || grid_h == 0 || grid_w == 0 || d == 0 {
        return Err(Error::Contract(format!(
            "synthetic scene needs non-zero counts, got {} frames, {grid_h}x{grid_w} grid, d={d}",
            frame_ids.len()
        )));
    }
    let patches = grid_h * grid_w;
    let mut latent_rng = Rng::fork(seed, LATENT_TAG);
    let latent: Vec<f64> = (0..patches * d).map(|_| latent_rng.normal()).collect();

    let per_frame = patches + DEFAULT_SPECIALS;
    let mut data = Vec::with_capacity(frame_ids.len() * per_frame * d);
    for &f in frame_ids {
        let mut rng = Rng::fork(seed, FRAME_TAG | f);
        let offset: Vec<f64> = (0..d).map(|_| OFFSET_STD * rng.normal()).collect();
        for _ in 0..DEFAULT_SPECIALS * d {
            data.push(rng.normal());
        }
        for p in 0..patches {
            for c in 0..d {
                data.push(latent[p * d + c] + offset[c] + NOISE_STD * rng.normal());
            }
        }
    }
    let tokens = Matrix::new(frame_ids.len() * per_frame, d, data)?;
    TokenGrid::new(frame_ids.len(), grid_h, grid_w, DEFAULT_SPECIALS, tokens)
}
