use super::Real;
use crate::error::{Error, Result};

/// Frame-major image grid `(frames, height, width, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid4<T: Real = f64> {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Grid4<T> {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(Error::shape(
                "Grid4::new",
                format!(
                    "{} values for ({frames}, {height}, {width}, {channels})",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn cell(&self, f: usize, y: usize, x: usize) -> &[T] {
        let start = ((f * self.height + y) * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn map(&self, g: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| g(v)).collect(),
            ..self.clone()
        }
    }
}

/// Square spatial kernel. Dense weights are laid out `[ky][kx][c_in][c_out]`,
/// depthwise weights `[ky][kx][c]`.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvKernel<T: Real = f64> {
    Dense {
        size: usize,
        c_in: usize,
        c_out: usize,
        weights: Vec<T>,
    },
    Depthwise {
        size: usize,
        channels: usize,
        weights: Vec<T>,
    },
}

impl<T: Real> ConvKernel<T> {
    pub fn dense(size: usize, c_in: usize, c_out: usize, weights: Vec<T>) -> Result<Self> {
        check_size(size)?;
        if weights.len() != size * size * c_in * c_out {
            return Err(Error::shape("ConvKernel::dense", "weight count"));
        }
        Ok(Self::Dense {
            size,
            c_in,
            c_out,
            weights,
        })
    }

    pub fn depthwise(size: usize, channels: usize, weights: Vec<T>) -> Result<Self> {
        check_size(size)?;
        if weights.len() != size * size * channels {
            return Err(Error::shape("ConvKernel::depthwise", "weight count"));
        }
        Ok(Self::Depthwise {
            size,
            channels,
            weights,
        })
    }

    /// Centre tap 1, everything else 0.
    pub fn identity(size: usize, channels: usize) -> Result<Self> {
        check_size(size)?;
        let mut weights = vec![T::zero(); size * size * channels];
        let centre = (size / 2) * size + size / 2;
        weights[centre * channels..(centre + 1) * channels].fill(T::one());
        Self::depthwise(size, channels, weights)
    }

    pub fn size(&self) -> usize {
        match self {
            Self::Dense { size, .. } | Self::Depthwise { size, .. } => *size,
        }
    }

    pub fn channels_in(&self) -> usize {
        match self {
            Self::Dense { c_in, .. } => *c_in,
            Self::Depthwise { channels, .. } => *channels,
        }
    }

    pub fn channels_out(&self) -> usize {
        match self {
            Self::Dense { c_out, .. } => *c_out,
            Self::Depthwise { channels, .. } => *channels,
        }
    }

    /// Expands a depthwise kernel to its channel-diagonal dense form.
    pub fn to_dense(&self) -> Self {
        match self {
            Self::Dense { .. } => self.clone(),
            Self::Depthwise {
                size,
                channels,
                weights,
            } => {
                let c = *channels;
                let mut dense = vec![T::zero(); size * size * c * c];
                for tap in 0..size * size {
                    for ch in 0..c {
                        dense[(tap * c + ch) * c + ch] = weights[tap * c + ch];
                    }
                }
                Self::Dense {
                    size: *size,
                    c_in: c,
                    c_out: c,
                    weights: dense,
                }
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        if self.channels_in() != self.channels_out() {
            return false;
        }
        let id = Self::identity(self.size(), self.channels_in()).expect("size is odd");
        match self {
            Self::Dense { .. } => *self == id.to_dense(),
            Self::Depthwise { .. } => *self == id,
        }
    }
}

fn check_size(size: usize) -> Result<()> {
    if size % 2 == 0 {
        return Err(Error::Contract(format!(
            "convolution kernel size must be odd, got {size}"
        )));
    }
    Ok(())
}

/// Per-frame 2D cross-correlation (no kernel flip) with zero padding and
/// "same" output size. Frames never mix.
pub fn conv2d<T: Real>(grid: &Grid4<T>, kernel: &ConvKernel<T>) -> Result<Grid4<T>> {
    let (frames, h, w, c) = grid.dims();
    if kernel.channels_in() != c {
        return Err(Error::shape(
            "conv2d",
            format!("grid has {c} channels, kernel expects {}", kernel.channels_in()),
        ));
    }
    let size = kernel.size();
    let r = (size / 2) as isize;
    let c_out = kernel.channels_out();
    let mut out = vec![T::zero(); frames * h * w * c_out];

    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[((f * h + y) * w + x) * c_out..][..c_out];
                for ky in 0..size {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..size {
                        let sx = x as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = grid.cell(f, sy as usize, sx as usize);
                        let tap = ky * size + kx;
                        match kernel {
                            ConvKernel::Depthwise { weights, .. } => {
                                let wt = &weights[tap * c..][..c];
                                for ch in 0..c {
                                    o[ch] += src[ch] * wt[ch];
                                }
                            }
                            ConvKernel::Dense { weights, .. } => {
                                for (ci, &s) in src.iter().enumerate() {
                                    let wt = &weights[(tap * c + ci) * c_out..][..c_out];
                                    for co in 0..c_out {
                                        o[co] += s * wt[co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Grid4::new(frames, h, w, c_out, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_grid(frames: usize, h: usize, w: usize, c: usize, seed: u64) -> Grid4 {
        let mut rng = Rng::new(seed);
        let data = (0..frames * h * w * c).map(|_| rng.normal()).collect();
        Grid4::new(frames, h, w, c, data).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let g = random_grid(2, 4, 5, 3, 1);
        let k = ConvKernel::identity(3, 3).unwrap();
        assert_eq!(conv2d(&g, &k).unwrap(), g);
        assert_eq!(conv2d(&g, &k.to_dense()).unwrap(), g);
        assert!(k.is_identity());
        assert!(k.to_dense().is_identity());
    }

    #[test]
    fn averaging_kernel_on_constant_grid() {
        let g: Grid4 = Grid4::new(1, 5, 5, 1, vec![2.5; 25]).unwrap();
        let k = ConvKernel::depthwise(3, 1, vec![1.0 / 9.0; 9]).unwrap();
        let out = conv2d(&g, &k).unwrap();
        // interior cell (2, 2)
        assert!((out.data()[2 * 5 + 2] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn hand_convolution_with_zero_padding() {
        let g = Grid4::new(1, 1, 2, 1, vec![1.0, 2.0]).unwrap();
        let k = ConvKernel::dense(3, 1, 1, vec![1.0; 9]).unwrap();
        assert_eq!(conv2d(&g, &k).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(
            ConvKernel::<f64>::depthwise(2, 1, vec![0.0; 4]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn frames_do_not_mix() {
        let g = random_grid(3, 3, 3, 2, 9);
        let mut rng = Rng::new(4);
        let k = ConvKernel::dense(3, 2, 2, (0..36).map(|_| rng.normal()).collect()).unwrap();
        let base = conv2d(&g, &k).unwrap();
        let mut data = g.data().to_vec();
        for v in &mut data[18..36] {
            *v += 10.0;
        }
        let moved = conv2d(&Grid4::new(3, 3, 3, 2, data).unwrap(), &k).unwrap();
        assert_eq!(base.data()[..18], moved.data()[..18]);
        assert_eq!(base.data()[36..], moved.data()[36..]);
        assert_ne!(base.data()[18..36], moved.data()[18..36]);
    }

    #[test]
    fn depthwise_matches_its_dense_expansion() {
        let g = random_grid(2, 4, 3, 4, 2);
        let mut rng = Rng::new(8);
        let k = ConvKernel::depthwise(3, 4, (0..36).map(|_| rng.normal()).collect()).unwrap();
        let a = conv2d(&g, &k).unwrap();
        let b = conv2d(&g, &k.to_dense()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_is_linear() {
        let x = random_grid(2, 4, 4, 3, 11);
        let y = random_grid(2, 4, 4, 3, 12);
        let mut rng = Rng::new(13);
        let k = ConvKernel::dense(3, 3, 3, (0..81).map(|_| rng.normal()).collect()).unwrap();
        let (a, b) = (1.7, -0.3);
        let mix = Grid4::new(
            2,
            4,
            4,
            3,
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        )
        .unwrap();
        let lhs = conv2d(&mix, &k).unwrap();
        let cx = conv2d(&x, &k).unwrap();
        let cy = conv2d(&y, &k).unwrap();
        for i in 0..lhs.data().len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }
}
