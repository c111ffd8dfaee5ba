//! Images and the deterministic primitives shared by losses and metrics.

use crate::error::{ensure, Result};
use crate::tape::kernels;
use crate::tensor::{Real, Tensor};

pub use crate::tensor::{pixel_shuffle, pixel_unshuffle};

/// Full-range BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Full-range BT.601 RGB -> YCbCr matrix; Cb and Cr are offset by 0.5.
pub const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    LUMA,
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];
pub const YCBCR_OFFSET: [f64; 3] = [0.0, 0.5, 0.5];

/// Planar `[C, H, W]` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Validates shape, finiteness and range.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            channels == 1 || channels == 3,
            "images have 1 or 3 channels, got {channels}"
        );
        ensure!(
            data.len() == channels * height * width,
            "image {channels}x{height}x{width} needs {} values, got {}",
            channels * height * width,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "image values must be finite and within [0, 1]"
        );
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    /// Like [`Image::new`] but clamps into `[0, 1]` (non-finite values become 0).
    pub fn from_clamped(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_clamped(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    /// Single-channel images become 3 identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            channels: 3,
            data,
            ..*self
        }
    }

    /// Luma plane (row-major `H*W`), BT.601 weights for RGB, identity for gray.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..r.len())
            .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
            .collect()
    }

    pub fn luma_image(&self) -> Image {
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.luma(),
        }
    }

    pub fn transpose(&self) -> Image {
        let (c, h, w) = self.dims();
        let mut data = vec![0.0; self.data.len()];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ci * w + x) * h + y] = self.get(ci, y, x);
                }
            }
        }
        Image {
            channels: c,
            height: w,
            width: h,
            data,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("image dims")
    }

    /// Converts a `[C,H,W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        let (c, h, w) = t.chw()?;
        Image::from_clamped(
            c,
            h,
            w,
            t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        )
    }

    /// The `h x w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Image> {
        ensure!(
            y + h <= self.height && x + w <= self.width,
            "crop {h}x{w} at ({y}, {x}) exceeds image {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for r in y..y + h {
                data.extend_from_slice(&plane[r * self.width + x..r * self.width + x + w]);
            }
        }
        Ok(Image { data, channels: self.channels, height: h, width: w })
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }
}

pub(crate) fn check_same_shape(images: &[&Image], what: &str) -> Result<()> {
    for im in images.iter().skip(1) {
        ensure!(
            im.same_shape(images[0]),
            "{what}: shape mismatch {:?} vs {:?}",
            im.dims(),
            images[0].dims()
        );
    }
    Ok(())
}

/// Signed Sobel responses of a single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

impl GradientField {
    pub fn magnitude(&self) -> Vec<f64> {
        self.gx
            .iter()
            .zip(&self.gy)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect()
    }
}

fn apply_color_matrix(img: &Image, m: &[[f64; 3]; 3], offset: &[f64; 3]) -> Vec<f64> {
    let p = img.height * img.width;
    let mut out = vec![0.0; 3 * p];
    let planes = [img.plane(0), img.plane(1), img.plane(2)];
    for k in 0..3 {
        for i in 0..p {
            out[k * p + i] =
                m[k][0] * planes[0][i] + m[k][1] * planes[1][i] + m[k][2] * planes[2][i] + offset[k];
        }
    }
    out
}

/// Full-range BT.601 conversion; channels become `(Y, Cb, Cr)` with chroma centered at 0.5.
pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    ensure!(img.channels == 3, "rgb_to_ycbcr needs 3 channels, got {}", img.channels);
    let data = apply_color_matrix(img, &RGB_TO_YCBCR, &YCBCR_OFFSET);
    Image::from_clamped(3, img.height, img.width, data)
}

/// Inverse of [`rgb_to_ycbcr`], clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    ensure!(img.channels == 3, "ycbcr_to_rgb needs 3 channels, got {}", img.channels);
    let inv = invert3(&RGB_TO_YCBCR);
    // rgb = inv * (ycc - offset)
    let shift: [f64; 3] = std::array::from_fn(|k| -(0..3).map(|j| inv[k][j] * YCBCR_OFFSET[j]).sum::<f64>());
    let data = apply_color_matrix(img, &inv, &shift);
    Image::from_clamped(3, img.height, img.width, data)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
        [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
        [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
    ]
}

/// 3x3 Sobel with reflect padding on a single-channel image.
pub fn sobel(img: &Image) -> Result<GradientField> {
    ensure!(img.channels == 1, "sobel needs a single-channel image, got {}", img.channels);
    sobel_plane(&img.data, img.height, img.width)
}

/// [`sobel`] on a raw row-major plane.
pub fn sobel_plane(plane: &[f64], height: usize, width: usize) -> Result<GradientField> {
    ensure!(
        height >= 3 && width >= 3,
        "sobel: image {height}x{width} smaller than 3x3"
    );
    ensure!(plane.len() == height * width, "sobel: plane size mismatch");
    let out = kernels::sobel(plane, 1, height, width);
    let p = height * width;
    Ok(GradientField {
        height,
        width,
        gx: out[..p].to_vec(),
        gy: out[p..].to_vec(),
    })
}

/// Per-element maximum.
pub fn elementwise_max(a: &Image, b: &Image) -> Result<Image> {
    check_same_shape(&[a, b], "elementwise_max")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x.max(*y)).collect();
    Ok(Image { data, ..*a })
}
